#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cosa/checkpoint.hpp"
#include "cosa/eval.hpp"
#include "cosa/objectives.hpp"
#include "cosa/train_config.hpp"

namespace cosa {

struct TrainData {
  Corpus corpus;
  std::vector<Sample> train;
  std::vector<Sample> heldout;  // the trailing corpus.holdout samples
};

TrainData load_train_data(const CorpusSpec& spec);

/// Resolves the mode settings and binds the model to the corpus vocabulary.
/// Throws ConfigError when paragraphs cannot fit the model.
TrainConfig bind_config(const TrainConfig& cfg, const Corpus& corpus);

struct RunState {
  int step = 0;
  Model<float> model;
  std::vector<ag::Matrix<float>> adam_m, adam_v;  // parameter visit order
  Rng data_rng, mask_rng, negative_rng;
  std::vector<std::size_t> order;  // current epoch permutation of the training split
  std::size_t cursor = 0;
  int epoch = 0;

  explicit RunState(Model<float> m) : model(std::move(m)) {}
};

class Trainer {
 public:
  /// `cfg` must come from bind_config().
  Trainer(const TrainConfig& cfg, const TrainData& data);

  const TrainConfig& config() const { return cfg_; }
  const ObjectiveConfig& objectives() const { return objectives_; }
  RunState& state() { return state_; }
  const RunState& state() const { return state_; }
  std::size_t grouping_calls() const { return grouping_calls_; }

  /// Next n_b training samples from shuffled epochs (incomplete tails dropped).
  std::vector<Sample> next_batch();
  /// Concatenated items for the batch according to the mode.
  std::vector<ConcatGroup> build_groups(std::span<const Sample> batch);

  /// One optimizer update. Throws NumericalError on a non-finite loss (the
  /// parameters are left untouched) or non-finite parameters after the update.
  LossBreakdown step();

  Checkpoint checkpoint() const;
  /// Throws DataError when the checkpoint belongs to a different config.
  void restore(const Checkpoint& ckpt);

 private:
  void apply_update(double lr);

  TrainConfig cfg_;
  ObjectiveConfig objectives_;
  const TrainData* data_;
  RunState state_;
  std::size_t grouping_calls_ = 0;
};

struct RunOptions {
  std::filesystem::path run_dir;
  std::optional<std::filesystem::path> resume;  // checkpoint to continue from
  bool force = false;                           // replace an existing run
  std::ostream* progress = nullptr;
  int progress_every = 100;
};

struct RunResult {
  int steps = 0;
  std::map<std::string, double> final_metrics;
  std::filesystem::path final_checkpoint;
};

/// Run directory layout: config.json (resolved), metrics.jsonl,
/// checkpoints/step_NNNNNN.ckpt, final.ckpt, final_metrics.json.
RunResult run(const TrainConfig& cfg, const RunOptions& options);

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path);

}  // namespace cosa
