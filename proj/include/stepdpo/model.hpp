#pragma once

// Pre-norm decoder-only transformer with learned positional embeddings and
// hand-written reverse-mode gradients.
//
// Parameters live in one flat vector whose layout is a pure function of the
// config. Everything is templated on the scalar type; float is the training
// precision and double the verification precision.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stepdpo/task.hpp"

namespace stepdpo {

enum class Precision : std::uint8_t { f32, f64 };

const char* to_string(Precision p);
Precision precision_from_string(const std::string& s);

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int context_len = 256;
  int vocab_size = Vocab::instance().size();
  Precision precision = Precision::f32;
  std::uint64_t init_seed = 0;

  /// Throws Error(config).
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ParamTensor {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
};

/// Offsets of every tensor inside the flat parameter vector.
struct ParamLayout {
  struct Block {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
  };
  std::size_t tok_emb = 0;
  std::size_t pos_emb = 0;
  std::vector<Block> blocks;
  std::size_t lnf_g = 0, lnf_b = 0, w_head = 0, b_head = 0;
  std::size_t total = 0;
  std::vector<ParamTensor> tensors;

  static ParamLayout build(const ModelConfig& cfg);
};

template <class T>
class Model {
 public:
  using Scalar = T;

  /// Scaled-normal weights (std 0.02, residual projections 0.02/sqrt(2L)),
  /// unit LayerNorm gains, zero biases; drawn from cfg.init_seed.
  explicit Model(const ModelConfig& cfg);
  /// Adopts an existing parameter vector (checkpoint loading).
  Model(const ModelConfig& cfg, std::vector<T> params);

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t param_count() const { return params_.size(); }
  std::span<T> params() { return params_; }
  std::span<const T> params() const { return params_; }

  /// Zeroes the output projection and bias so every prediction is uniform.
  void zero_output_head();

 private:
  ModelConfig cfg_;
  ParamLayout layout_;
  std::vector<T> params_;
};

template <class T>
Model<T> init_model(const ModelConfig& cfg) {
  return Model<T>(cfg);
}

/// Frozen deep copy of a policy: read-only forever after creation.
template <class T>
class ReferenceModel {
 public:
  const Model<T>& model() const { return model_; }
  const ModelConfig& config() const { return model_.config(); }

  template <class U>
  friend ReferenceModel<U> clone_frozen(const Model<U>& m);

 private:
  explicit ReferenceModel(Model<T> m) : model_(std::move(m)) {}
  Model<T> model_;
};

template <class T>
ReferenceModel<T> clone_frozen(const Model<T>& m) {
  return ReferenceModel<T>(m);
}

/// Row-major [rows x vocab] log-probabilities; row t is the distribution of
/// token t+1 given tokens 0..t.
template <class T>
struct LogProbs {
  std::size_t rows = 0;
  std::size_t vocab = 0;
  std::vector<T> data;

  std::span<const T> row(std::size_t t) const { return {data.data() + t * vocab, vocab}; }
};

/// Throws Error(length) when tokens exceed the context.
template <class T>
LogProbs<T> forward_logprobs(const Model<T>& m, std::span<const Token> tokens);

/// Sum of log p(completion_j | prompt, completion_<j). Prompt must be
/// non-empty (there is no BOS token); completion must be non-empty.
template <class T>
T seq_logprob(const Model<T>& m, std::span<const Token> prompt, std::span<const Token> completion);

/// A sequence whose tokens [completion_start, size) are scored.
struct ScoredSpan {
  TokenSeq tokens;
  std::size_t completion_start = 0;

  std::size_t completion_length() const { return tokens.size() - completion_start; }
};

ScoredSpan make_span(std::span<const Token> condition, std::span<const Token> completion);

/// Span log-probabilities for many sequences, parallel over sequences.
template <class T>
std::vector<T> span_logprobs(const Model<T>& m, std::span<const ScoredSpan> spans, int workers = 1);

/// Scalar loss of the span log-probabilities. Must write dloss/dlogprob_i
/// into the second argument and return the loss.
template <class T>
using LossFn = std::function<T(std::span<const T> logprobs, std::span<T> dloss)>;

template <class T>
struct LossGrad {
  T loss = 0;
  std::vector<T> grad;      // aligned with Model::params()
  std::vector<T> logprobs;  // per span
};

/// Exact gradient of loss(span_logprobs) w.r.t. the parameters. Per-span
/// gradients are reduced in span order, so the result is bitwise independent
/// of `workers`. Throws Error(numerical) for a non-finite loss or gradient.
template <class T>
LossGrad<T> loss_and_grad(const Model<T>& m, std::span<const ScoredSpan> spans, const LossFn<T>& loss,
                          int workers = 1);

struct SampleOptions {
  double temperature = 1.0;
  bool greedy = false;  // argmax, ties to the lowest token id
  int max_new = 128;
  std::uint64_t seed = 0;
};

struct SampleResult {
  TokenSeq tokens;         // generated tokens, eos excluded
  bool ended = false;      // eos emitted
  bool truncated = false;  // stopped by max_new or the context limit
};

/// Ancestral sampling with a key-value cache. Draw j uses the j-th uniform
/// of Rng(seed), so outputs depend only on (model, prompt, options).
template <class T>
SampleResult sample(const Model<T>& m, std::span<const Token> prompt, const SampleOptions& opts);

/// FNV-1a 64 over the little-endian parameter bytes, as 16 hex digits.
template <class T>
std::string param_checksum(const Model<T>& m);

}  // namespace stepdpo
