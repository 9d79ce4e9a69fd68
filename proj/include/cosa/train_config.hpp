#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "cosa/concat.hpp"
#include "cosa/corpus.hpp"
#include "cosa/model.hpp"
#include "cosa/objectives.hpp"

namespace cosa {

enum class TrainMode { sst, cosa, cosa_copy, cosa_shuffle };

std::string to_string(TrainMode m);
TrainMode parse_mode(const std::string& name);  // throws ConfigError

/// Either a corpus directory or generation parameters.
struct CorpusSpec {
  std::string dir;  // empty: generate from n/seed/grammar
  std::size_t n = 2000;
  std::uint64_t seed = 7;
  std::size_t holdout = 200;  // trailing samples kept out of training
  GrammarConfig grammar = GrammarConfig::default_grammar();

  friend bool operator==(const CorpusSpec&, const CorpusSpec&) = default;
};

struct EvalSpec {
  int queries = 200;        // paragraph queries; also the number of 4-frame pseudo videos
  int frames = 4;           // frames per evaluation pseudo video
  int rerank_k = 8;
  int captions = 200;       // single-image captioning items
  std::uint64_t seed = 12345;
  int max_len = 0;          // decode limit; 0 uses the model's max_position_len

  friend bool operator==(const EvalSpec&, const EvalSpec&) = default;
};

struct TrainConfig {
  TrainMode mode = TrainMode::cosa;
  std::uint64_t seed = 0;
  int steps = 3000;
  int n_b = 32;
  double base_lr = 1e-4;
  double warmup_fraction = 0.1;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;  // 0 disables clipping
  double temperature_min = 0.001;
  double temperature_max = 0.5;
  int eval_every = 0;        // 0: evaluate only after the last step
  int checkpoint_every = 0;  // 0: checkpoint only after the last step
  ConcatConfig concat;
  ObjectiveConfig objectives = ObjectiveConfig::defaults();
  ModelConfig model;
  CorpusSpec corpus;
  EvalSpec eval;

  /// Throws ConfigError naming the offending field.
  void validate() const;

  /// Mode-dependent settings applied: sst forces n_c = 0 and maps every
  /// concatenated objective onto its single-sample counterpart; the concat
  /// variant follows the mode; the concat length limit follows the model.
  TrainConfig resolved() const;
  /// Objectives actually optimized in this mode.
  ObjectiveConfig effective_objectives() const;

  nlohmann::json to_json() const;
  /// Fields absent from `j` keep the values already in `base`.
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& base);
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Linear warmup from 0 to base_lr over warmup_fraction * steps, then linear
/// decay to 0 at `steps`.
double lr_at(int step, const TrainConfig& cfg);

}  // namespace cosa
