#pragma once

#include <array>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cosa/concat.hpp"
#include "cosa/model.hpp"
#include "cosa/rng.hpp"

namespace cosa {

/// Vanilla objectives run on single samples, the C-prefixed ones on
/// concatenated groups.
enum class Objective { itc, itm, mlm, gm, citc, citm, cmlm, cgm };
inline constexpr int kNumObjectives = 8;
inline constexpr std::array<Objective, kNumObjectives> kAllObjectives = {
    Objective::itc,  Objective::itm,  Objective::mlm,  Objective::gm,
    Objective::citc, Objective::citm, Objective::cmlm, Objective::cgm};

std::string to_string(Objective o);
Objective parse_objective(const std::string& name);  // throws ConfigError
bool is_concatenated(Objective o);
/// CITC -> ITC, CITM -> ITM, CMLM -> MLM, CGM -> GM; vanilla objectives map to themselves.
Objective single_counterpart(Objective o);

struct ObjectiveConfig {
  std::array<bool, kNumObjectives> enabled{};
  std::array<double, kNumObjectives> weights{1, 1, 1, 1, 1, 1, 1, 1};
  double mlm_rate = 0.15;
  double gm_rate = 0.60;
  bool hard_negative = true;

  /// ITC, ITM, CITC, CITM, CMLM, CGM.
  static ObjectiveConfig defaults();
  static ObjectiveConfig only(std::initializer_list<Objective> objectives);

  bool on(Objective o) const { return enabled[static_cast<std::size_t>(o)]; }
  void set(Objective o, bool value) { enabled[static_cast<std::size_t>(o)] = value; }
  double weight(Objective o) const { return weights[static_cast<std::size_t>(o)]; }
  bool any_single() const;
  bool any_concatenated() const;
  std::vector<Objective> enabled_list() const;
  void validate() const;

  nlohmann::json to_json() const;
  static ObjectiveConfig from_json(const nlohmann::json& j);
  friend bool operator==(const ObjectiveConfig&, const ObjectiveConfig&) = default;
};

struct LossBreakdown {
  std::array<double, kNumObjectives> values{};
  std::array<bool, kNumObjectives> present{};
  double total = 0.0;
  int masked_tokens = 0;
  int negatives = 0;

  double value(Objective o) const { return values[static_cast<std::size_t>(o)]; }
  bool has(Objective o) const { return present[static_cast<std::size_t>(o)]; }
  bool finite() const;
};

/// Symmetric InfoNCE over row-normalized globals; diagonal pairs are positives.
template <typename T>
ag::Var<T> contrastive_loss(ag::Var<T> video_globals, ag::Var<T> text_globals, ag::Var<T> temperature);
double contrastive_loss(const ag::Matrix<double>& video_globals, const ag::Matrix<double>& text_globals,
                        double temperature);

struct HardNegatives {
  std::vector<int> text_for_video;  // row i: a text index != i
  std::vector<int> video_for_text;  // column j: a video index != j
};
/// Samples each negative from the softmax of the anchor's off-diagonal
/// similarities. `sim(i, j)` scores video i against text j.
HardNegatives mine_hard_negatives(const ag::Matrix<double>& sim, Rng& rng);
/// Negatives drawn uniformly from the other indices.
HardNegatives uniform_negatives(int n, Rng& rng);

/// Two-class cross-entropy over ITM logits (column 1 = match), mean over rows.
template <typename T>
ag::Var<T> matching_loss(ag::Var<T> itm_logits, std::vector<int> labels);

/// Mean cross-entropy of the prediction head at the masked positions of one
/// paragraph that cross-attends to `visual_sequence`.
template <typename T>
ag::Var<T> masked_reconstruction_loss(const Model<T>& model, ag::Tape<T>& tape, const MaskedParagraph& masked,
                                      ag::Var<T> visual_sequence, bool causal);

/// Inputs of one training step. Vanilla objectives read `samples` (each a
/// single-frame pseudo video); concatenated objectives read `groups`.
struct StepInputs {
  std::span<const Sample> samples;
  std::span<const ConcatGroup> groups;
};

template <typename T>
struct LossGraph {
  ag::Var<T> total;
  LossBreakdown breakdown;
};

/// Builds the full loss graph of one step on `tape`. Masks are drawn from
/// `mask_rng`, negatives from `negative_rng`.
template <typename T>
LossGraph<T> total_loss(const Model<T>& model, ag::Tape<T>& tape, const StepInputs& inputs,
                        const ObjectiveConfig& cfg, Rng& mask_rng, Rng& negative_rng);

}  // namespace cosa
