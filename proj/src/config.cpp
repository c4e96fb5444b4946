#include <cstdio>

#include "stepdpo/error.hpp"
#include "stepdpo/json_io.hpp"

namespace stepdpo {

void require_known_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const char* where) {
  if (!j.is_object()) throw Error(ErrorKind::config, std::string(where) + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw Error(ErrorKind::config, std::string(where) + ": unknown key \"" + key + "\"");
  }
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string json_hash(const nlohmann::json& j) { return fnv1a_hex(j.dump()); }

namespace {

template <class V>
void get_if(const nlohmann::json& j, const char* key, V& out) {
  if (auto it = j.find(key); it != j.end()) {
    try {
      out = it->get<V>();
    } catch (const nlohmann::json::exception& ex) {
      throw Error(ErrorKind::config, std::string("config key \"") + key + "\": " + ex.what());
    }
  }
}

}  // namespace

void to_json(nlohmann::json& j, const GenConfig& c) {
  j = {{"min_steps", c.min_steps},
       {"max_steps", c.max_steps},
       {"operand_max", c.operand_max},
       {"value_bound", c.value_bound},
       {"context_budget", c.context_budget}};
}

void from_json(const nlohmann::json& j, GenConfig& c) {
  require_known_keys(j, {"min_steps", "max_steps", "operand_max", "value_bound", "context_budget"}, "task");
  get_if(j, "min_steps", c.min_steps);
  get_if(j, "max_steps", c.max_steps);
  get_if(j, "operand_max", c.operand_max);
  get_if(j, "value_bound", c.value_bound);
  get_if(j, "context_budget", c.context_budget);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers},     {"d_model", c.d_model},
       {"n_heads", c.n_heads},       {"context_len", c.context_len},
       {"vocab_size", c.vocab_size}, {"precision", to_string(c.precision)},
       {"init_seed", c.init_seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  require_known_keys(j, {"n_layers", "d_model", "n_heads", "context_len", "vocab_size", "precision", "init_seed"},
                     "model");
  get_if(j, "n_layers", c.n_layers);
  get_if(j, "d_model", c.d_model);
  get_if(j, "n_heads", c.n_heads);
  get_if(j, "context_len", c.context_len);
  get_if(j, "vocab_size", c.vocab_size);
  std::string prec = to_string(c.precision);
  get_if(j, "precision", prec);
  c.precision = precision_from_string(prec);
  get_if(j, "init_seed", c.init_seed);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"peak_lr", c.peak_lr},     {"schedule", to_string(c.schedule)}, {"warmup_ratio", c.warmup_ratio},
       {"epochs", c.epochs},       {"batch_size", c.batch_size},       {"weight_decay", c.weight_decay},
       {"grad_clip", c.grad_clip}, {"max_steps", c.max_steps},         {"log_every", c.log_every},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  require_known_keys(j,
                     {"peak_lr", "schedule", "warmup_ratio", "epochs", "batch_size", "weight_decay", "grad_clip",
                      "max_steps", "log_every", "seed"},
                     "sft");
  get_if(j, "peak_lr", c.peak_lr);
  std::string sched = to_string(c.schedule);
  get_if(j, "schedule", sched);
  c.schedule = schedule_from_string(sched);
  get_if(j, "warmup_ratio", c.warmup_ratio);
  get_if(j, "epochs", c.epochs);
  get_if(j, "batch_size", c.batch_size);
  get_if(j, "weight_decay", c.weight_decay);
  get_if(j, "grad_clip", c.grad_clip);
  get_if(j, "max_steps", c.max_steps);
  get_if(j, "log_every", c.log_every);
  get_if(j, "seed", c.seed);
}

void to_json(nlohmann::json& j, const SamplingConfig& c) { j = {{"temperature", c.temperature}, {"n", c.n}}; }

void from_json(const nlohmann::json& j, SamplingConfig& c) {
  require_known_keys(j, {"temperature", "n"}, "sampling");
  get_if(j, "temperature", c.temperature);
  get_if(j, "n", c.n);
}

void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = {{"collect", c.collect}, {"rectify", c.rectify}, {"max_new", c.max_new}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PipelineConfig& c) {
  require_known_keys(j, {"collect", "rectify", "max_new", "seed"}, "pipeline");
  get_if(j, "collect", c.collect);
  get_if(j, "rectify", c.rectify);
  get_if(j, "max_new", c.max_new);
  get_if(j, "seed", c.seed);
}

void to_json(nlohmann::json& j, const PrefConfig& c) {
  j = {{"beta", c.beta},
       {"mode", to_string(c.mode)},
       {"peak_lr", c.peak_lr},
       {"warmup_ratio", c.warmup_ratio},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"max_steps", c.max_steps},
       {"weight_decay", c.weight_decay},
       {"grad_clip", c.grad_clip},
       {"eval_every", c.eval_every},
       {"divergence_factor", c.divergence_factor},
       {"divergence_patience", c.divergence_patience},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PrefConfig& c) {
  require_known_keys(j,
                     {"beta", "mode", "peak_lr", "warmup_ratio", "epochs", "batch_size", "max_steps", "weight_decay",
                      "grad_clip", "eval_every", "divergence_factor", "divergence_patience", "seed"},
                     "pref");
  get_if(j, "beta", c.beta);
  std::string mode = to_string(c.mode);
  get_if(j, "mode", mode);
  c.mode = pref_mode_from_string(mode);
  get_if(j, "peak_lr", c.peak_lr);
  get_if(j, "warmup_ratio", c.warmup_ratio);
  get_if(j, "epochs", c.epochs);
  get_if(j, "batch_size", c.batch_size);
  get_if(j, "max_steps", c.max_steps);
  get_if(j, "weight_decay", c.weight_decay);
  get_if(j, "grad_clip", c.grad_clip);
  get_if(j, "eval_every", c.eval_every);
  get_if(j, "divergence_factor", c.divergence_factor);
  get_if(j, "divergence_patience", c.divergence_patience);
  get_if(j, "seed", c.seed);
}

}  // namespace stepdpo
