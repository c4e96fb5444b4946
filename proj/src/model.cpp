#include "stepdpo/model.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>

#include "stepdpo/error.hpp"
#include "stepdpo/kernels.hpp"
#include "stepdpo/parallel.hpp"
#include "stepdpo/rng.hpp"

namespace stepdpo {

const char* to_string(Precision p) { return p == Precision::f64 ? "f64" : "f32"; }

Precision precision_from_string(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw Error(ErrorKind::config, "unknown precision \"" + s + "\" (expected f32 or f64)");
}

void ModelConfig::validate() const {
  auto bad = [](const std::string& why) { throw Error(ErrorKind::config, "invalid model config: " + why); };
  if (n_layers < 1) bad("n_layers must be >= 1");
  if (d_model < 1 || n_heads < 1) bad("d_model and n_heads must be positive");
  if (d_model % n_heads != 0) {
    bad("d_model " + std::to_string(d_model) + " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (context_len < 2) bad("context_len must be >= 2");
  if (vocab_size != Vocab::instance().size()) {
    bad("vocab_size " + std::to_string(vocab_size) + " does not match the vocabulary (" +
        std::to_string(Vocab::instance().size()) + ")");
  }
}

ParamLayout ParamLayout::build(const ModelConfig& cfg) {
  cfg.validate();
  ParamLayout lay;
  const std::size_t d = cfg.d_model, V = cfg.vocab_size, C = cfg.context_len;
  std::size_t off = 0;
  auto add = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    lay.tensors.push_back({name, off, rows, cols});
    const std::size_t at = off;
    off += rows * cols;
    return at;
  };
  lay.tok_emb = add("tok_emb", V, d);
  lay.pos_emb = add("pos_emb", C, d);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    Block b{};
    b.ln1_g = add(p + "ln1.gain", 1, d);
    b.ln1_b = add(p + "ln1.bias", 1, d);
    b.w_qkv = add(p + "attn.w_qkv", 3 * d, d);
    b.b_qkv = add(p + "attn.b_qkv", 1, 3 * d);
    b.w_o = add(p + "attn.w_out", d, d);
    b.b_o = add(p + "attn.b_out", 1, d);
    b.ln2_g = add(p + "ln2.gain", 1, d);
    b.ln2_b = add(p + "ln2.bias", 1, d);
    b.w_fc = add(p + "mlp.w_fc", 4 * d, d);
    b.b_fc = add(p + "mlp.b_fc", 1, 4 * d);
    b.w_proj = add(p + "mlp.w_proj", d, 4 * d);
    b.b_proj = add(p + "mlp.b_proj", 1, d);
    lay.blocks.push_back(b);
  }
  lay.lnf_g = add("ln_f.gain", 1, d);
  lay.lnf_b = add("ln_f.bias", 1, d);
  lay.w_head = add("head.weight", V, d);
  lay.b_head = add("head.bias", 1, V);
  lay.total = off;
  return lay;
}

template <class T>
Model<T>::Model(const ModelConfig& cfg) : cfg_(cfg), layout_(ParamLayout::build(cfg)), params_(layout_.total, T(0)) {
  Rng rng(cfg.init_seed, 0x1417);
  const double std_w = 0.02;
  const double std_res = 0.02 / std::sqrt(2.0 * cfg.n_layers);
  for (const auto& t : layout_.tensors) {
    const bool gain = t.name.ends_with(".gain");
    const bool bias = t.name.ends_with("bias") || t.name.ends_with("b_qkv") || t.name.ends_with("b_out") ||
                      t.name.ends_with("b_fc") || t.name.ends_with("b_proj");
    const bool residual = t.name.ends_with("w_out") || t.name.ends_with("w_proj");
    for (std::size_t i = 0; i < t.size(); ++i) {
      T& p = params_[t.offset + i];
      if (gain) {
        p = T(1);
      } else if (bias) {
        p = T(0);
      } else {
        p = static_cast<T>(rng.normal() * (residual ? std_res : std_w));
      }
    }
  }
}

template <class T>
Model<T>::Model(const ModelConfig& cfg, std::vector<T> params)
    : cfg_(cfg), layout_(ParamLayout::build(cfg)), params_(std::move(params)) {
  if (params_.size() != layout_.total) {
    throw Error(ErrorKind::corrupt_checkpoint, "parameter count " + std::to_string(params_.size()) +
                                                   " does not match layout (" + std::to_string(layout_.total) + ")");
  }
}

template <class T>
void Model<T>::zero_output_head() {
  std::fill_n(params_.begin() + layout_.w_head, cfg_.vocab_size * cfg_.d_model, T(0));
  std::fill_n(params_.begin() + layout_.b_head, cfg_.vocab_size, T(0));
}

namespace {

constexpr double kLnEps = 1e-5;

template <class T>
void layernorm_forward(const T* x, std::size_t L, std::size_t d, const T* g, const T* b, T* y, T* mean,
                       T* rstd) {
  for (std::size_t t = 0; t < L; ++t) {
    const T* xr = x + t * d;
    T m = 0;
    for (std::size_t i = 0; i < d; ++i) m += xr[i];
    m /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - m) * (xr[i] - m);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
    T* yr = y + t * d;
    for (std::size_t i = 0; i < d; ++i) yr[i] = (xr[i] - m) * rs * g[i] + b[i];
    mean[t] = m;
    rstd[t] = rs;
  }
}

// dx += LayerNorm'(dy); dg, db accumulate.
template <class T>
void layernorm_backward(const T* dy, const T* x, const T* mean, const T* rstd, const T* g, std::size_t L,
                        std::size_t d, T* dx, T* dg, T* db) {
  for (std::size_t t = 0; t < L; ++t) {
    const T* xr = x + t * d;
    const T* dyr = dy + t * d;
    T* dxr = dx + t * d;
    const T m = mean[t], rs = rstd[t];
    T sum_dxhat = 0, sum_dxhat_xhat = 0;
    for (std::size_t i = 0; i < d; ++i) {
      const T xhat = (xr[i] - m) * rs;
      const T dxhat = dyr[i] * g[i];
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xhat;
      dg[i] += dyr[i] * xhat;
      db[i] += dyr[i];
    }
    const T inv_d = T(1) / static_cast<T>(d);
    for (std::size_t i = 0; i < d; ++i) {
      const T xhat = (xr[i] - m) * rs;
      const T dxhat = dyr[i] * g[i];
      dxr[i] += rs * (dxhat - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
    }
  }
}

template <class T>
void log_softmax_rows(const T* logits, std::size_t rows, std::size_t V, T* out) {
  for (std::size_t t = 0; t < rows; ++t) {
    const T* lr = logits + t * V;
    T* o = out + t * V;
    const T mx = *std::max_element(lr, lr + V);
    T sum = 0;
    for (std::size_t v = 0; v < V; ++v) sum += std::exp(lr[v] - mx);
    const T lse = mx + std::log(sum);
    for (std::size_t v = 0; v < V; ++v) o[v] = lr[v] - lse;
  }
}

template <class T>
struct BlockActs {
  std::vector<T> ln1, ln1_mean, ln1_rstd, qkv, att, att_out, x_mid, ln2, ln2_mean, ln2_rstd, fc, act;
};

template <class T>
struct Activations {
  std::size_t L = 0;
  std::vector<std::vector<T>> resid;  // n_layers + 1 residual stream states
  std::vector<BlockActs<T>> blocks;
  std::vector<T> lnf, lnf_mean, lnf_rstd;
  std::vector<T> logprobs;
};

template <class T>
void check_tokens(const Model<T>& m, std::span<const Token> tokens) {
  const auto& cfg = m.config();
  if (tokens.size() > static_cast<std::size_t>(cfg.context_len)) {
    throw Error(ErrorKind::length, "sequence of " + std::to_string(tokens.size()) +
                                       " tokens exceeds context_len " + std::to_string(cfg.context_len));
  }
  for (Token t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) throw Error(ErrorKind::argument, "token id out of range");
  }
}

template <class T>
void forward(const Model<T>& m, std::span<const Token> tokens, Activations<T>& a) {
  check_tokens(m, tokens);
  const auto& k = kernels::table<T>();
  const auto& cfg = m.config();
  const auto& lay = m.layout();
  const T* P = m.params().data();
  const std::size_t L = tokens.size(), d = cfg.d_model, V = cfg.vocab_size, H = cfg.n_heads;
  a.L = L;
  a.resid.assign(cfg.n_layers + 1, std::vector<T>(L * d));
  a.blocks.resize(cfg.n_layers);

  auto& x0 = a.resid[0];
  for (std::size_t t = 0; t < L; ++t) {
    const T* te = P + lay.tok_emb + static_cast<std::size_t>(tokens[t]) * d;
    const T* pe = P + lay.pos_emb + t * d;
    for (std::size_t i = 0; i < d; ++i) x0[t * d + i] = te[i] + pe[i];
  }

  std::vector<T> tmp(L * d);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& b = lay.blocks[l];
    auto& ba = a.blocks[l];
    const auto& x = a.resid[l];
    ba.ln1.resize(L * d);
    ba.ln1_mean.resize(L);
    ba.ln1_rstd.resize(L);
    layernorm_forward(x.data(), L, d, P + b.ln1_g, P + b.ln1_b, ba.ln1.data(), ba.ln1_mean.data(),
                      ba.ln1_rstd.data());
    ba.qkv.resize(L * 3 * d);
    k.linear_forward(ba.ln1.data(), L, d, P + b.w_qkv, P + b.b_qkv, 3 * d, ba.qkv.data());
    ba.att.assign(H * L * L, T(0));
    ba.att_out.resize(L * d);
    k.attention_forward(ba.qkv.data(), L, d, H, ba.att.data(), ba.att_out.data());
    k.linear_forward(ba.att_out.data(), L, d, P + b.w_o, P + b.b_o, d, tmp.data());
    ba.x_mid.resize(L * d);
    for (std::size_t i = 0; i < L * d; ++i) ba.x_mid[i] = x[i] + tmp[i];

    ba.ln2.resize(L * d);
    ba.ln2_mean.resize(L);
    ba.ln2_rstd.resize(L);
    layernorm_forward(ba.x_mid.data(), L, d, P + b.ln2_g, P + b.ln2_b, ba.ln2.data(), ba.ln2_mean.data(),
                      ba.ln2_rstd.data());
    ba.fc.resize(L * 4 * d);
    k.linear_forward(ba.ln2.data(), L, d, P + b.w_fc, P + b.b_fc, 4 * d, ba.fc.data());
    ba.act.resize(L * 4 * d);
    k.gelu_forward(ba.fc.data(), ba.act.data(), L * 4 * d);
    k.linear_forward(ba.act.data(), L, 4 * d, P + b.w_proj, P + b.b_proj, d, tmp.data());
    auto& out = a.resid[l + 1];
    for (std::size_t i = 0; i < L * d; ++i) out[i] = ba.x_mid[i] + tmp[i];
  }

  a.lnf.resize(L * d);
  a.lnf_mean.resize(L);
  a.lnf_rstd.resize(L);
  layernorm_forward(a.resid.back().data(), L, d, P + lay.lnf_g, P + lay.lnf_b, a.lnf.data(), a.lnf_mean.data(),
                    a.lnf_rstd.data());
  std::vector<T> logits(L * V);
  k.linear_forward(a.lnf.data(), L, d, P + lay.w_head, P + lay.b_head, V, logits.data());
  a.logprobs.resize(L * V);
  log_softmax_rows(logits.data(), L, V, a.logprobs.data());
}

// Accumulates d(loss)/d(params) into grad given d(loss)/d(logits).
template <class T>
void backward(const Model<T>& m, std::span<const Token> tokens, const Activations<T>& a, const T* dlogits,
              T* grad) {
  const auto& k = kernels::table<T>();
  const auto& cfg = m.config();
  const auto& lay = m.layout();
  const T* P = m.params().data();
  const std::size_t L = a.L, d = cfg.d_model, V = cfg.vocab_size, H = cfg.n_heads;

  k.linear_backward_params(dlogits, a.lnf.data(), L, d, V, grad + lay.w_head, grad + lay.b_head);
  std::vector<T> dln(L * d, T(0));
  k.linear_backward_input(dlogits, L, V, P + lay.w_head, d, dln.data());
  std::vector<T> dx(L * d, T(0));
  layernorm_backward(dln.data(), a.resid.back().data(), a.lnf_mean.data(), a.lnf_rstd.data(), P + lay.lnf_g, L, d,
                     dx.data(), grad + lay.lnf_g, grad + lay.lnf_b);

  std::vector<T> dact(L * 4 * d), dqkv(L * 3 * d), datt(L * d), scratch(L);
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& b = lay.blocks[l];
    const auto& ba = a.blocks[l];

    // MLP branch: dx is the gradient at the block output.
    k.linear_backward_params(dx.data(), ba.act.data(), L, 4 * d, d, grad + b.w_proj, grad + b.b_proj);
    std::fill(dact.begin(), dact.end(), T(0));
    k.linear_backward_input(dx.data(), L, d, P + b.w_proj, 4 * d, dact.data());
    k.gelu_backward(ba.fc.data(), dact.data(), dact.data(), L * 4 * d);
    k.linear_backward_params(dact.data(), ba.ln2.data(), L, d, 4 * d, grad + b.w_fc, grad + b.b_fc);
    std::fill(dln.begin(), dln.end(), T(0));
    k.linear_backward_input(dact.data(), L, 4 * d, P + b.w_fc, d, dln.data());
    layernorm_backward(dln.data(), ba.x_mid.data(), ba.ln2_mean.data(), ba.ln2_rstd.data(), P + b.ln2_g, L, d,
                       dx.data(), grad + b.ln2_g, grad + b.ln2_b);

    // Attention branch: dx is now the gradient at x_mid.
    k.linear_backward_params(dx.data(), ba.att_out.data(), L, d, d, grad + b.w_o, grad + b.b_o);
    std::fill(datt.begin(), datt.end(), T(0));
    k.linear_backward_input(dx.data(), L, d, P + b.w_o, d, datt.data());
    std::fill(dqkv.begin(), dqkv.end(), T(0));
    k.attention_backward(ba.qkv.data(), ba.att.data(), datt.data(), L, d, H, dqkv.data(), scratch.data());
    k.linear_backward_params(dqkv.data(), ba.ln1.data(), L, d, 3 * d, grad + b.w_qkv, grad + b.b_qkv);
    std::fill(dln.begin(), dln.end(), T(0));
    k.linear_backward_input(dqkv.data(), L, 3 * d, P + b.w_qkv, d, dln.data());
    layernorm_backward(dln.data(), a.resid[l].data(), ba.ln1_mean.data(), ba.ln1_rstd.data(), P + b.ln1_g, L, d,
                       dx.data(), grad + b.ln1_g, grad + b.ln1_b);
  }

  for (std::size_t t = 0; t < L; ++t) {
    T* gt = grad + lay.tok_emb + static_cast<std::size_t>(tokens[t]) * d;
    T* gp = grad + lay.pos_emb + t * d;
    for (std::size_t i = 0; i < d; ++i) {
      gt[i] += dx[t * d + i];
      gp[i] += dx[t * d + i];
    }
  }
}

template <class T>
void check_span(const Model<T>& m, const ScoredSpan& s) {
  if (s.completion_start == 0) throw Error(ErrorKind::argument, "scored span needs a non-empty condition");
  if (s.completion_start >= s.tokens.size()) throw Error(ErrorKind::argument, "scored span has an empty completion");
  if (s.tokens.size() > static_cast<std::size_t>(m.config().context_len)) {
    throw Error(ErrorKind::length, "sequence of " + std::to_string(s.tokens.size()) + " tokens exceeds context_len " +
                                       std::to_string(m.config().context_len));
  }
}

// The final token is only a target, so the network sees tokens[0, n-1).
template <class T>
T span_forward(const Model<T>& m, const ScoredSpan& s, Activations<T>& a) {
  check_span(m, s);
  const std::span<const Token> input(s.tokens.data(), s.tokens.size() - 1);
  forward(m, input, a);
  const std::size_t V = m.config().vocab_size;
  T sum = 0;
  for (std::size_t t = s.completion_start - 1; t + 1 < s.tokens.size(); ++t) {
    sum += a.logprobs[t * V + static_cast<std::size_t>(s.tokens[t + 1])];
  }
  return sum;
}

}  // namespace

template <class T>
LogProbs<T> forward_logprobs(const Model<T>& m, std::span<const Token> tokens) {
  Activations<T> a;
  forward(m, tokens, a);
  return LogProbs<T>{tokens.size(), static_cast<std::size_t>(m.config().vocab_size), std::move(a.logprobs)};
}

ScoredSpan make_span(std::span<const Token> condition, std::span<const Token> completion) {
  ScoredSpan s;
  s.tokens.reserve(condition.size() + completion.size());
  s.tokens.insert(s.tokens.end(), condition.begin(), condition.end());
  s.tokens.insert(s.tokens.end(), completion.begin(), completion.end());
  s.completion_start = condition.size();
  return s;
}

template <class T>
T seq_logprob(const Model<T>& m, std::span<const Token> prompt, std::span<const Token> completion) {
  if (completion.empty()) throw Error(ErrorKind::argument, "seq_logprob: empty completion");
  if (prompt.empty()) throw Error(ErrorKind::argument, "seq_logprob: empty prompt");
  Activations<T> a;
  return span_forward(m, make_span(prompt, completion), a);
}

template <class T>
std::vector<T> span_logprobs(const Model<T>& m, std::span<const ScoredSpan> spans, int workers) {
  std::vector<T> out(spans.size());
  parallel_for(spans.size(), workers, [&](std::size_t i) {
    Activations<T> a;
    out[i] = span_forward(m, spans[i], a);
  });
  return out;
}

template <class T>
LossGrad<T> loss_and_grad(const Model<T>& m, std::span<const ScoredSpan> spans, const LossFn<T>& loss_fn,
                          int workers) {
  const std::size_t n = spans.size();
  const std::size_t V = m.config().vocab_size;
  std::vector<Activations<T>> acts(n);
  LossGrad<T> out;
  out.logprobs.resize(n);
  parallel_for(n, workers, [&](std::size_t i) { out.logprobs[i] = span_forward(m, spans[i], acts[i]); });

  std::vector<T> coeff(n, T(0));
  out.loss = loss_fn(out.logprobs, coeff);
  if (!std::isfinite(static_cast<double>(out.loss))) {
    throw Error(ErrorKind::numerical, "non-finite loss " + std::to_string(static_cast<double>(out.loss)) +
                                          " over " + std::to_string(n) + " spans");
  }

  const std::size_t P = m.param_count();
  out.grad.assign(P, T(0));
  std::vector<std::vector<T>> partial(n);
  parallel_for(n, workers, [&](std::size_t i) {
    if (coeff[i] == T(0)) return;
    const ScoredSpan& s = spans[i];
    const Activations<T>& a = acts[i];
    // d logprob(target) / d logits = onehot(target) - softmax
    std::vector<T> dlogits(a.L * V, T(0));
    for (std::size_t t = s.completion_start - 1; t + 1 < s.tokens.size(); ++t) {
      T* row = dlogits.data() + t * V;
      const T* lp = a.logprobs.data() + t * V;
      for (std::size_t v = 0; v < V; ++v) row[v] = -coeff[i] * std::exp(lp[v]);
      row[static_cast<std::size_t>(s.tokens[t + 1])] += coeff[i];
    }
    partial[i].assign(P, T(0));
    backward(m, std::span<const Token>(s.tokens.data(), a.L), a, dlogits.data(), partial[i].data());
    acts[i] = Activations<T>{};
  });
  for (std::size_t i = 0; i < n; ++i) {
    if (partial[i].empty()) continue;
    for (std::size_t j = 0; j < P; ++j) out.grad[j] += partial[i][j];
  }
  for (std::size_t j = 0; j < P; ++j) {
    if (!std::isfinite(static_cast<double>(out.grad[j]))) {
      throw Error(ErrorKind::numerical, "non-finite gradient at parameter " + std::to_string(j));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Incremental decoding

namespace {

template <class T>
class Decoder {
 public:
  explicit Decoder(const Model<T>& m)
      : m_(m), k_(kernels::table<T>()), d_(m.config().d_model), H_(m.config().n_heads) {
    const auto& cfg = m.config();
    const std::size_t C = cfg.context_len;
    kcache_.assign(cfg.n_layers, std::vector<T>(C * d_));
    vcache_.assign(cfg.n_layers, std::vector<T>(C * d_));
    x_.resize(d_);
    ln_.resize(d_);
    qkv_.resize(3 * d_);
    att_out_.resize(d_);
    tmp_.resize(d_);
    fc_.resize(4 * d_);
    scores_.resize(C);
    logits_.resize(cfg.vocab_size);
  }

  int position() const { return pos_; }

  std::span<const T> step(Token token) {
    const auto& cfg = m_.config();
    const auto& lay = m_.layout();
    const T* P = m_.params().data();
    const std::size_t d = d_, dh = d_ / H_, t = static_cast<std::size_t>(pos_);
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    for (std::size_t i = 0; i < d; ++i) {
      x_[i] = P[lay.tok_emb + static_cast<std::size_t>(token) * d + i] + P[lay.pos_emb + t * d + i];
    }
    T mean, rstd;
    for (int l = 0; l < cfg.n_layers; ++l) {
      const auto& b = lay.blocks[l];
      layernorm_forward(x_.data(), 1, d, P + b.ln1_g, P + b.ln1_b, ln_.data(), &mean, &rstd);
      k_.linear_forward(ln_.data(), 1, d, P + b.w_qkv, P + b.b_qkv, 3 * d, qkv_.data());
      std::copy_n(qkv_.data() + d, d, kcache_[l].data() + t * d);
      std::copy_n(qkv_.data() + 2 * d, d, vcache_[l].data() + t * d);
      std::fill(att_out_.begin(), att_out_.end(), T(0));
      for (std::size_t h = 0; h < H_; ++h) {
        const T* q = qkv_.data() + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t s = 0; s <= t; ++s) {
          scores_[s] = k_.dot(q, kcache_[l].data() + s * d + h * dh, dh) * scale;
          mx = std::max(mx, scores_[s]);
        }
        T sum = 0;
        for (std::size_t s = 0; s <= t; ++s) {
          scores_[s] = std::exp(scores_[s] - mx);
          sum += scores_[s];
        }
        const T inv = T(1) / sum;
        for (std::size_t s = 0; s <= t; ++s) {
          k_.axpy(scores_[s] * inv, vcache_[l].data() + s * d + h * dh, att_out_.data() + h * dh, dh);
        }
      }
      k_.linear_forward(att_out_.data(), 1, d, P + b.w_o, P + b.b_o, d, tmp_.data());
      for (std::size_t i = 0; i < d; ++i) x_[i] += tmp_[i];
      layernorm_forward(x_.data(), 1, d, P + b.ln2_g, P + b.ln2_b, ln_.data(), &mean, &rstd);
      k_.linear_forward(ln_.data(), 1, d, P + b.w_fc, P + b.b_fc, 4 * d, fc_.data());
      k_.gelu_forward(fc_.data(), fc_.data(), fc_.size());
      k_.linear_forward(fc_.data(), 1, 4 * d, P + b.w_proj, P + b.b_proj, d, tmp_.data());
      for (std::size_t i = 0; i < d; ++i) x_[i] += tmp_[i];
    }
    layernorm_forward(x_.data(), 1, d, P + lay.lnf_g, P + lay.lnf_b, ln_.data(), &mean, &rstd);
    k_.linear_forward(ln_.data(), 1, d, P + lay.w_head, P + lay.b_head, cfg.vocab_size, logits_.data());
    ++pos_;
    return logits_;
  }

 private:
  const Model<T>& m_;
  const kernels::Table<T>& k_;
  std::size_t d_, H_;
  int pos_ = 0;
  std::vector<std::vector<T>> kcache_, vcache_;
  std::vector<T> x_, ln_, qkv_, att_out_, tmp_, fc_, scores_, logits_;
};

template <class T>
Token choose(std::span<const T> logits, const SampleOptions& opts, Rng& rng) {
  if (opts.greedy) {
    return static_cast<Token>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  const double mx = static_cast<double>(*std::max_element(logits.begin(), logits.end()));
  double total = 0;
  std::vector<double> w(logits.size());
  for (std::size_t v = 0; v < logits.size(); ++v) {
    w[v] = std::exp((static_cast<double>(logits[v]) - mx) / opts.temperature);
    total += w[v];
  }
  const double u = rng.uniform() * total;
  double acc = 0;
  for (std::size_t v = 0; v < w.size(); ++v) {
    acc += w[v];
    if (u < acc) return static_cast<Token>(v);
  }
  // u landed in the rounding gap at the top: take the last positive-weight token.
  for (std::size_t v = w.size(); v-- > 0;) {
    if (w[v] > 0) return static_cast<Token>(v);
  }
  return 0;
}

}  // namespace

template <class T>
SampleResult sample(const Model<T>& m, std::span<const Token> prompt, const SampleOptions& opts) {
  if (!opts.greedy && !(opts.temperature > 0)) throw Error(ErrorKind::argument, "temperature must be positive");
  if (opts.max_new < 1) throw Error(ErrorKind::argument, "max_new must be >= 1");
  if (prompt.empty()) throw Error(ErrorKind::argument, "sample: empty prompt");
  check_tokens(m, prompt);
  const Token eos = Vocab::instance().eos();
  const int C = m.config().context_len;
  Decoder<T> dec(m);
  Rng rng(opts.seed, 0x5A11);
  std::span<const T> logits;
  for (Token t : prompt) logits = dec.step(t);
  SampleResult out;
  for (int i = 0; i < opts.max_new; ++i) {
    if (prompt.size() + out.tokens.size() >= static_cast<std::size_t>(C)) break;
    if (i > 0) logits = dec.step(out.tokens.back());
    const Token next = choose(logits, opts, rng);
    if (next == eos) {
      out.ended = true;
      return out;
    }
    out.tokens.push_back(next);
  }
  out.truncated = true;
  return out;
}

template <class T>
std::string param_checksum(const Model<T>& m) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (T v : m.params()) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    for (unsigned char c : bytes) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

#define STEPDPO_INSTANTIATE(T)                                                                            \
  template class Model<T>;                                                                                \
  template LogProbs<T> forward_logprobs(const Model<T>&, std::span<const Token>);                        \
  template T seq_logprob(const Model<T>&, std::span<const Token>, std::span<const Token>);               \
  template std::vector<T> span_logprobs(const Model<T>&, std::span<const ScoredSpan>, int);              \
  template LossGrad<T> loss_and_grad(const Model<T>&, std::span<const ScoredSpan>, const LossFn<T>&, int); \
  template SampleResult sample(const Model<T>&, std::span<const Token>, const SampleOptions&);          \
  template std::string param_checksum(const Model<T>&);

STEPDPO_INSTANTIATE(float)
STEPDPO_INSTANTIATE(double)

#undef STEPDPO_INSTANTIATE

}  // namespace stepdpo
