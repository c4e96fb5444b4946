#pragma once

// Central finite-difference oracle for loss_and_grad.

#include <algorithm>
#include <cmath>
#include <functional>

#include "stepdpo/model.hpp"
#include "stepdpo/rng.hpp"

namespace stepdpo::testing {

struct GradCheck {
  double max_rel = 0;
  double max_abs = 0;
  std::size_t worst = 0;
};

// rel_i = |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor
// keeps coordinates whose true gradient is ~0 from dividing rounding noise
// by nothing.
inline GradCheck compare_gradients(const std::vector<double>& analytic, const std::vector<double>& numeric,
                                   double floor = 1e-6) {
  GradCheck g;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double diff = std::abs(analytic[i] - numeric[i]);
    const double rel = diff / std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    g.max_abs = std::max(g.max_abs, diff);
    if (rel > g.max_rel) {
      g.max_rel = rel;
      g.worst = i;
    }
  }
  return g;
}

// Numeric gradient of f(params) by central differences with step h.
inline std::vector<double> numeric_gradient(Model<double>& m, const std::function<double()>& f, double h = 1e-5) {
  std::vector<double> g(m.param_count());
  auto p = m.params();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double keep = p[i];
    p[i] = keep + h;
    const double up = f();
    p[i] = keep - h;
    const double down = f();
    p[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

// Tiny random model; the head is perturbed away from init so logits are not
// near-uniform and every parameter receives signal.
inline Model<double> tiny_model(std::uint64_t seed, int layers = 1, int d = 8, int heads = 2, int ctx = 24) {
  ModelConfig cfg;
  cfg.n_layers = layers;
  cfg.d_model = d;
  cfg.n_heads = heads;
  cfg.context_len = ctx;
  cfg.precision = Precision::f64;
  cfg.init_seed = seed;
  Model<double> m(cfg);
  Rng r(seed, 99);
  for (double& v : m.params()) v += 0.3 * r.normal();
  return m;
}

inline TokenSeq random_tokens(Rng& r, std::size_t n) {
  TokenSeq t(n);
  const int V = Vocab::instance().size();
  for (auto& x : t) x = static_cast<Token>(r.uniform_int(0, V - 1));
  return t;
}

}  // namespace stepdpo::testing
