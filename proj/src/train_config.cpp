#include "cosa/train_config.hpp"

#include <algorithm>
#include <cmath>

#include "cosa/corpus_io.hpp"
#include "cosa/errors.hpp"

namespace cosa {

using nlohmann::json;

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::sst:
      return "sst";
    case TrainMode::cosa:
      return "cosa";
    case TrainMode::cosa_copy:
      return "cosa_copy";
    case TrainMode::cosa_shuffle:
      return "cosa_shuffle";
  }
  return "?";
}

TrainMode parse_mode(const std::string& name) {
  if (name == "sst") return TrainMode::sst;
  if (name == "cosa") return TrainMode::cosa;
  if (name == "cosa_copy") return TrainMode::cosa_copy;
  if (name == "cosa_shuffle") return TrainMode::cosa_shuffle;
  throw ConfigError("unknown mode '" + name + "' (expected sst, cosa, cosa_copy, cosa_shuffle)");
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("config: " + what);
  };
  require(steps >= 1, "steps must be >= 1");
  require(n_b >= 1, "n_b must be >= 1");
  require(std::isfinite(base_lr) && base_lr >= 0.0, "base_lr must be finite and >= 0");
  require(warmup_fraction >= 0.0 && warmup_fraction < 1.0, "warmup_fraction must be in [0, 1)");
  require(weight_decay >= 0.0, "weight_decay must be >= 0");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "beta1 and beta2 must be in [0, 1)");
  require(adam_eps > 0.0, "adam_eps must be > 0");
  require(clip_norm >= 0.0, "clip_norm must be >= 0");
  require(temperature_min > 0.0 && temperature_min <= temperature_max, "temperature bounds are inconsistent");
  require(eval_every >= 0 && checkpoint_every >= 0, "eval_every and checkpoint_every must be >= 0");
  require(corpus.holdout < corpus.n || !corpus.dir.empty(), "corpus.holdout must be smaller than corpus.n");
  require(eval.queries >= 1 && eval.frames >= 1 && eval.rerank_k >= 1 && eval.captions >= 1,
          "eval sizes must be >= 1");
  require(eval.max_len >= 0, "eval.max_len must be >= 0");
  concat.validate();
  objectives.validate();
  if (mode == TrainMode::cosa_copy && concat.n_c < 1) throw ConfigError("config: cosa_copy needs concat.n_c >= 1");
  const TrainConfig r = resolved();
  require(r.model.max_frames >= r.concat.n_c + 1, "model.max_frames must be >= concat.n_c + 1");
  require(r.model.max_frames >= eval.frames, "model.max_frames must be >= eval.frames");
  if (r.effective_objectives().on(Objective::itm) || r.effective_objectives().on(Objective::citm)) {
    require(n_b >= 2, "matching objectives need n_b >= 2");
  }
  if (r.effective_objectives().any_concatenated()) {
    require(n_b >= r.concat.n_c + 1, "n_b must be >= concat.n_c + 1");
  }
}

ObjectiveConfig TrainConfig::effective_objectives() const {
  if (mode != TrainMode::sst) return objectives;
  ObjectiveConfig out = objectives;
  out.enabled.fill(false);
  for (Objective o : kAllObjectives) {
    if (objectives.on(o)) out.set(single_counterpart(o), true);
  }
  return out;
}

TrainConfig TrainConfig::resolved() const {
  TrainConfig r = *this;
  switch (mode) {
    case TrainMode::sst:
      r.concat.n_c = 0;
      r.objectives = effective_objectives();
      break;
    case TrainMode::cosa:
      r.concat.variant = ConcatVariant::cosa;
      break;
    case TrainMode::cosa_copy:
      r.concat.variant = ConcatVariant::copy;
      break;
    case TrainMode::cosa_shuffle:
      r.concat.variant = ConcatVariant::shuffle;
      break;
  }
  r.concat.max_position_len = r.model.max_position_len;
  return r;
}

json TrainConfig::to_json() const {
  json corpus_json = {{"dir", corpus.dir},
                      {"n", corpus.n},
                      {"seed", corpus.seed},
                      {"holdout", corpus.holdout},
                      {"grammar", grammar_to_json(corpus.grammar)}};
  return {{"mode", to_string(mode)},
          {"seed", seed},
          {"steps", steps},
          {"n_b", n_b},
          {"base_lr", base_lr},
          {"warmup_fraction", warmup_fraction},
          {"weight_decay", weight_decay},
          {"beta1", beta1},
          {"beta2", beta2},
          {"adam_eps", adam_eps},
          {"clip_norm", clip_norm},
          {"temperature_min", temperature_min},
          {"temperature_max", temperature_max},
          {"eval_every", eval_every},
          {"checkpoint_every", checkpoint_every},
          {"concat", {{"n_c", concat.n_c}, {"strategy", to_string(concat.strategy)}, {"insert_sep", concat.insert_sep}}},
          {"objectives", objectives.to_json()},
          {"model", model.to_json()},
          {"corpus", corpus_json},
          {"eval",
           {{"queries", eval.queries},
            {"frames", eval.frames},
            {"rerank_k", eval.rerank_k},
            {"captions", eval.captions},
            {"seed", eval.seed},
            {"max_len", eval.max_len}}}};
}

namespace {

// Reads `key` of `j` into `field` when present; type errors name the key path.
template <class F>
void read(const json& j, const char* key, F& field, const std::string& path) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<F>();
  } catch (const json::exception&) {
    throw ConfigError("config: wrong type for '" + path + key + "'");
  }
}

void reject_unknown(const json& j, const json& known, const std::string& path) {
  if (!j.is_object()) throw ConfigError("config: '" + (path.empty() ? std::string("<root>") : path) + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("config: unknown key '" + path + key + "'");
  }
}

}  // namespace

TrainConfig TrainConfig::from_json(const json& j, const TrainConfig& base) {
  TrainConfig c = base;
  const json known = base.to_json();
  reject_unknown(j, known, "");
  if (j.contains("mode")) {
    std::string m;
    read(j, "mode", m, "");
    c.mode = parse_mode(m);
  }
  read(j, "seed", c.seed, "");
  read(j, "steps", c.steps, "");
  read(j, "n_b", c.n_b, "");
  read(j, "base_lr", c.base_lr, "");
  read(j, "warmup_fraction", c.warmup_fraction, "");
  read(j, "weight_decay", c.weight_decay, "");
  read(j, "beta1", c.beta1, "");
  read(j, "beta2", c.beta2, "");
  read(j, "adam_eps", c.adam_eps, "");
  read(j, "clip_norm", c.clip_norm, "");
  read(j, "temperature_min", c.temperature_min, "");
  read(j, "temperature_max", c.temperature_max, "");
  read(j, "eval_every", c.eval_every, "");
  read(j, "checkpoint_every", c.checkpoint_every, "");
  if (j.contains("concat")) {
    const json& s = j.at("concat");
    reject_unknown(s, known.at("concat"), "concat.");
    read(s, "n_c", c.concat.n_c, "concat.");
    read(s, "insert_sep", c.concat.insert_sep, "concat.");
    if (s.contains("strategy")) {
      std::string name;
      read(s, "strategy", name, "concat.");
      c.concat.strategy = parse_strategy(name);
    }
  }
  if (j.contains("objectives")) {
    try {
      json merged = c.objectives.to_json();
      reject_unknown(j.at("objectives"), merged, "objectives.");
      for (const auto& [key, value] : j.at("objectives").items()) {
        if (key == "weights" && value.is_object()) {
          for (const auto& [name, w] : value.items()) merged["weights"][name] = w;
        } else {
          merged[key] = value;
        }
      }
      c.objectives = ObjectiveConfig::from_json(merged);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
  if (j.contains("model")) {
    json merged = c.model.to_json();
    reject_unknown(j.at("model"), merged, "model.");
    for (const auto& [key, value] : j.at("model").items()) merged[key] = value;
    try {
      c.model = ModelConfig::from_json(merged);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
  if (j.contains("corpus")) {
    const json& s = j.at("corpus");
    reject_unknown(s, known.at("corpus"), "corpus.");
    read(s, "dir", c.corpus.dir, "corpus.");
    read(s, "n", c.corpus.n, "corpus.");
    read(s, "seed", c.corpus.seed, "corpus.");
    read(s, "holdout", c.corpus.holdout, "corpus.");
    if (s.contains("grammar")) {
      try {
        c.corpus.grammar = grammar_from_json(s.at("grammar"));
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("config: corpus.grammar: ") + e.what());
      }
    }
  }
  if (j.contains("eval")) {
    const json& s = j.at("eval");
    reject_unknown(s, known.at("eval"), "eval.");
    read(s, "queries", c.eval.queries, "eval.");
    read(s, "frames", c.eval.frames, "eval.");
    read(s, "rerank_k", c.eval.rerank_k, "eval.");
    read(s, "captions", c.eval.captions, "eval.");
    read(s, "seed", c.eval.seed, "eval.");
    read(s, "max_len", c.eval.max_len, "eval.");
  }
  return c;
}

TrainConfig TrainConfig::from_json(const json& j) { return from_json(j, TrainConfig{}); }

double lr_at(int step, const TrainConfig& cfg) {
  const double total = cfg.steps;
  const double warmup = cfg.warmup_fraction * total;
  const double s = std::clamp<double>(step, 0.0, total);
  if (s < warmup) return cfg.base_lr * s / warmup;
  return cfg.base_lr * (total - s) / (total - warmup);
}

}  // namespace cosa
