#include "cosa/objectives.hpp"

#include <cmath>
#include <deque>
#include <unordered_map>

#include "cosa/errors.hpp"

namespace cosa {

using nlohmann::json;

namespace {

constexpr std::array<const char*, kNumObjectives> kNames = {"itc", "itm", "mlm", "gm", "citc", "citm", "cmlm", "cgm"};

std::size_t idx(Objective o) { return static_cast<std::size_t>(o); }

}  // namespace

std::string to_string(Objective o) { return kNames[idx(o)]; }

Objective parse_objective(const std::string& name) {
  for (Objective o : kAllObjectives) {
    if (name == kNames[idx(o)]) return o;
  }
  throw ConfigError("unknown objective '" + name + "'");
}

bool is_concatenated(Objective o) { return idx(o) >= 4; }

Objective single_counterpart(Objective o) {
  return is_concatenated(o) ? static_cast<Objective>(idx(o) - 4) : o;
}

ObjectiveConfig ObjectiveConfig::defaults() {
  return only({Objective::itc, Objective::itm, Objective::citc, Objective::citm, Objective::cmlm, Objective::cgm});
}

ObjectiveConfig ObjectiveConfig::only(std::initializer_list<Objective> objectives) {
  ObjectiveConfig c;
  for (Objective o : objectives) c.set(o, true);
  return c;
}

bool ObjectiveConfig::any_single() const {
  return on(Objective::itc) || on(Objective::itm) || on(Objective::mlm) || on(Objective::gm);
}

bool ObjectiveConfig::any_concatenated() const {
  return on(Objective::citc) || on(Objective::citm) || on(Objective::cmlm) || on(Objective::cgm);
}

std::vector<Objective> ObjectiveConfig::enabled_list() const {
  std::vector<Objective> out;
  for (Objective o : kAllObjectives) {
    if (on(o)) out.push_back(o);
  }
  return out;
}

void ObjectiveConfig::validate() const {
  if (!any_single() && !any_concatenated()) throw ConfigError("objectives: at least one objective must be enabled");
  if (!(mlm_rate > 0.0 && mlm_rate <= 1.0)) throw ConfigError("objectives: mlm_rate must be in (0, 1]");
  if (!(gm_rate > 0.0 && gm_rate <= 1.0)) throw ConfigError("objectives: gm_rate must be in (0, 1]");
  for (Objective o : kAllObjectives) {
    if (!(weight(o) >= 0.0) || !std::isfinite(weight(o))) {
      throw ConfigError("objectives: weight of " + to_string(o) + " must be finite and >= 0");
    }
  }
}

json ObjectiveConfig::to_json() const {
  json enabled_names = json::array();
  json w = json::object();
  for (Objective o : kAllObjectives) {
    if (on(o)) enabled_names.push_back(to_string(o));
    w[to_string(o)] = weight(o);
  }
  return {{"enabled", enabled_names},
          {"weights", w},
          {"mlm_rate", mlm_rate},
          {"gm_rate", gm_rate},
          {"hard_negative", hard_negative}};
}

ObjectiveConfig ObjectiveConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("objectives: expected an object");
  ObjectiveConfig c = defaults();
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "enabled") {
        c.enabled.fill(false);
        for (const auto& name : value) c.set(parse_objective(name.get<std::string>()), true);
      } else if (key == "weights") {
        if (!value.is_object()) throw ConfigError("objectives.weights: expected an object");
        for (const auto& [name, wv] : value.items()) {
          c.weights[idx(parse_objective(name))] = wv.get<double>();
        }
      } else if (key == "mlm_rate") {
        c.mlm_rate = value.get<double>();
      } else if (key == "gm_rate") {
        c.gm_rate = value.get<double>();
      } else if (key == "hard_negative") {
        c.hard_negative = value.get<bool>();
      } else {
        throw ConfigError("objectives: unknown key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("objectives: ") + e.what());
  }
  return c;
}

bool LossBreakdown::finite() const {
  if (!std::isfinite(total)) return false;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (present[i] && !std::isfinite(values[i])) return false;
  }
  return true;
}

template <typename T>
ag::Var<T> contrastive_loss(ag::Var<T> video_globals, ag::Var<T> text_globals, ag::Var<T> temperature) {
  const auto n = video_globals.rows();
  if (n < 1 || text_globals.rows() != n || text_globals.cols() != video_globals.cols()) {
    throw ShapeError("contrastive_loss: need two n x d matrices with n >= 1");
  }
  auto logits = ag::div_scalar(ag::matmul_nt(ag::normalize_rows(video_globals), ag::normalize_rows(text_globals)),
                               temperature);
  std::vector<int> diagonal(static_cast<std::size_t>(n));
  for (int i = 0; i < static_cast<int>(n); ++i) diagonal[static_cast<std::size_t>(i)] = i;
  auto v2t = ag::cross_entropy(logits, diagonal);
  auto t2v = ag::cross_entropy(ag::transpose(logits), diagonal);
  return ag::scale(ag::add(v2t, t2v), T(0.5));
}

double contrastive_loss(const ag::Matrix<double>& video_globals, const ag::Matrix<double>& text_globals,
                        double temperature) {
  ag::Tape<double> tape(false);
  ag::Matrix<double> t(1, 1);
  t(0, 0) = temperature;
  return contrastive_loss(tape.constant(video_globals), tape.constant(text_globals), tape.constant(t)).item();
}

namespace {

int draw_excluding(const ag::Matrix<double>& sim, int anchor, bool by_row, Rng& rng) {
  const int n = static_cast<int>(sim.rows());
  double peak = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < n; ++k) {
    if (k != anchor) peak = std::max(peak, by_row ? sim(anchor, k) : sim(k, anchor));
  }
  std::vector<double> weights(static_cast<std::size_t>(n), 0.0);
  double total = 0.0;
  for (int k = 0; k < n; ++k) {
    if (k == anchor) continue;
    const double s = by_row ? sim(anchor, k) : sim(k, anchor);
    weights[static_cast<std::size_t>(k)] = std::isfinite(peak) ? std::exp(s - peak) : 1.0;
    total += weights[static_cast<std::size_t>(k)];
  }
  const double u = rng.uniform01() * total;
  double acc = 0.0;
  int last = -1;
  for (int k = 0; k < n; ++k) {
    if (k == anchor) continue;
    acc += weights[static_cast<std::size_t>(k)];
    last = k;
    if (u < acc) return k;
  }
  return last;
}

}  // namespace

HardNegatives mine_hard_negatives(const ag::Matrix<double>& sim, Rng& rng) {
  const int n = static_cast<int>(sim.rows());
  if (sim.cols() != n) throw ShapeError("mine_hard_negatives: similarity matrix must be square");
  if (n < 2) throw ConfigError("mine_hard_negatives: need a batch of at least 2");
  HardNegatives out;
  out.text_for_video.resize(static_cast<std::size_t>(n));
  out.video_for_text.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.text_for_video[static_cast<std::size_t>(i)] = draw_excluding(sim, i, true, rng);
  for (int j = 0; j < n; ++j) out.video_for_text[static_cast<std::size_t>(j)] = draw_excluding(sim, j, false, rng);
  return out;
}

HardNegatives uniform_negatives(int n, Rng& rng) {
  if (n < 2) throw ConfigError("uniform_negatives: need a batch of at least 2");
  HardNegatives out;
  auto draw = [&](int anchor) {
    const int k = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(n - 1)));
    return k >= anchor ? k + 1 : k;
  };
  for (int i = 0; i < n; ++i) out.text_for_video.push_back(draw(i));
  for (int j = 0; j < n; ++j) out.video_for_text.push_back(draw(j));
  return out;
}

template <typename T>
ag::Var<T> matching_loss(ag::Var<T> itm_logits, std::vector<int> labels) {
  if (itm_logits.cols() != 2 || itm_logits.rows() != static_cast<Eigen::Index>(labels.size())) {
    throw ShapeError("matching_loss: need one 2-logit row per label");
  }
  return ag::cross_entropy(itm_logits, std::move(labels));
}

template <typename T>
ag::Var<T> masked_reconstruction_loss(const Model<T>& model, ag::Tape<T>& tape, const MaskedParagraph& masked,
                                      ag::Var<T> visual_sequence, bool causal) {
  if (masked.masked_positions.empty()) throw MaskingError("masked_reconstruction_loss: no masked positions");
  auto memory = model.prepare_memory(tape, visual_sequence);
  TextSequence seq{masked.input_tokens, causal, 0, static_cast<int>(visual_sequence.rows())};
  auto out = model.text_forward(tape, std::span<const TextSequence>(&seq, 1), &memory);
  std::vector<int> targets(masked.target_tokens.begin(), masked.target_tokens.end());
  auto rows = ag::gather_rows(out.hidden, masked.masked_positions);
  return ag::cross_entropy(model.token_logits(tape, rows), std::move(targets));
}

namespace {

std::vector<TokenId> frame_caption(const std::vector<TokenId>& caption) {
  std::vector<TokenId> out;
  out.reserve(caption.size() + 2);
  out.push_back(Vocabulary::kCls);
  out.insert(out.end(), caption.begin(), caption.end());
  out.push_back(Vocabulary::kSep);
  return out;
}

template <typename T>
ag::Matrix<double> detached_similarity(ag::Var<T> video_globals, ag::Var<T> text_globals, T temperature) {
  ag::Matrix<double> v = video_globals.value().template cast<double>();
  ag::Matrix<double> t = text_globals.value().template cast<double>();
  v.rowwise().normalize();
  t.rowwise().normalize();
  return (v * t.transpose()) / static_cast<double>(temperature);
}

// One side of the step: either the single-sample items or the concatenated groups.
template <typename T>
struct Side {
  Objective contrastive, matching, bidirectional, causal;
  std::vector<std::vector<TokenId>> texts;  // framed [CLS] ... [SEP]
  std::vector<std::vector<int>> frames;     // image indices per video
  VideoBatch<T> videos;
  int memory_offset = 0;
  ag::Var<T> video_globals, text_globals;
  std::size_t size() const { return texts.size(); }
};

struct MatchingJob {
  Objective objective;
  std::vector<int> sequences;
  std::vector<int> labels;
};

struct ReconstructionJob {
  Objective objective;
  std::vector<std::pair<int, int>> slots;  // (sequence, position)
  std::vector<int> targets;
};

}  // namespace

template <typename T>
LossGraph<T> total_loss(const Model<T>& model, ag::Tape<T>& tape, const StepInputs& inputs,
                        const ObjectiveConfig& cfg, Rng& mask_rng, Rng& negative_rng) {
  cfg.validate();
  const bool want_single = cfg.any_single();
  const bool want_groups = cfg.any_concatenated();
  if (want_single && inputs.samples.empty()) throw ConfigError("total_loss: vanilla objectives need samples");
  if (!want_single && !inputs.samples.empty()) throw ConfigError("total_loss: samples given but no vanilla objective");
  if (want_groups && inputs.groups.empty()) throw ConfigError("total_loss: concatenated objectives need groups");
  if (!want_groups && !inputs.groups.empty()) {
    throw ConfigError("total_loss: groups given but no concatenated objective");
  }

  // Per-objective child streams keep each objective's draws independent of
  // which other objectives are enabled.
  const std::uint64_t mask_base = mask_rng.next_u64();
  const std::uint64_t negative_base = negative_rng.next_u64();
  auto mask_stream = [&](Objective o) { return Rng(mix_seed(mask_base, idx(o))); };
  auto negative_stream = [&](Objective o) { return Rng(mix_seed(negative_base, idx(o))); };

  // Every distinct image is encoded once.
  std::vector<const Image*> images;
  std::unordered_map<SampleId, int> by_id;
  auto image_index = [&](SampleId id, const Image& img) {
    auto it = by_id.find(id);
    if (it != by_id.end() && *images[static_cast<std::size_t>(it->second)] == img) return it->second;
    images.push_back(&img);
    const int k = static_cast<int>(images.size()) - 1;
    by_id.emplace(id, k);
    return k;
  };

  Side<T> single{Objective::itc, Objective::itm, Objective::mlm, Objective::gm, {}, {}, {}, 0, {}, {}};
  Side<T> grouped{Objective::citc, Objective::citm, Objective::cmlm, Objective::cgm, {}, {}, {}, 0, {}, {}};
  if (want_single) {
    for (const Sample& s : inputs.samples) {
      single.texts.push_back(frame_caption(s.caption));
      single.frames.push_back({image_index(s.id, s.image)});
    }
  }
  if (want_groups) {
    for (const ConcatGroup& g : inputs.groups) {
      if (g.frames.size() != g.member_ids.size() || g.frames.empty()) {
        throw GroupingError("total_loss: group frames and member ids disagree");
      }
      grouped.texts.push_back(g.paragraph);
      std::vector<int> frames;
      for (std::size_t k = 0; k < g.frames.size(); ++k) frames.push_back(image_index(g.member_ids[k], g.frames[k]));
      grouped.frames.push_back(std::move(frames));
    }
  }

  auto features = model.encode_images(tape, images);
  std::vector<Side<T>*> sides;
  if (want_single) sides.push_back(&single);
  if (want_groups) sides.push_back(&grouped);
  for (Side<T>* side : sides) side->videos = model.assemble_videos(tape, features, side->frames);

  auto temperature = model.temperature(tape);
  LossGraph<T> result;
  LossBreakdown& bd = result.breakdown;
  std::array<ag::Var<T>, kNumObjectives> losses{};

  // Unimodal pass for the contrastive globals, which also feed negative mining.
  std::vector<TextSequence> unimodal;
  std::vector<std::pair<Side<T>*, int>> unimodal_owner;
  for (Side<T>* side : sides) {
    const bool needs = cfg.on(side->contrastive) || (cfg.on(side->matching) && cfg.hard_negative);
    if (!needs) continue;
    unimodal_owner.emplace_back(side, static_cast<int>(unimodal.size()));
    for (const auto& text : side->texts) unimodal.push_back({text, false, 0, 0});
  }
  if (!unimodal.empty()) {
    auto out = model.text_forward(tape, unimodal, nullptr);
    for (auto [side, first] : unimodal_owner) {
      std::vector<int> cls;
      for (std::size_t i = 0; i < side->size(); ++i) cls.push_back(out.offsets[static_cast<std::size_t>(first) + i]);
      side->text_globals = model.text_globals(tape, ag::gather_rows(out.hidden, std::move(cls)));
      side->video_globals = model.video_globals(tape, side->videos);
      if (cfg.on(side->contrastive)) {
        losses[idx(side->contrastive)] = contrastive_loss(side->video_globals, side->text_globals, temperature);
      }
    }
  }

  // Cross-modal pass: every matching and reconstruction sequence in one run.
  std::vector<ag::Var<T>> memory_parts;
  int memory_rows = 0;
  for (Side<T>* side : sides) {
    if (!(cfg.on(side->matching) || cfg.on(side->bidirectional) || cfg.on(side->causal))) continue;
    side->memory_offset = memory_rows;
    memory_parts.push_back(side->videos.sequence);
    memory_rows += static_cast<int>(side->videos.sequence.rows());
  }

  std::deque<std::vector<TokenId>> owned;
  std::vector<TextSequence> cross;
  std::vector<MatchingJob> matching_jobs;
  std::vector<ReconstructionJob> reconstruction_jobs;
  const int frame_len = model.config().frame_len();
  auto video_slice = [&](const Side<T>& side, int v, std::span<const TokenId> tokens, bool causal) {
    return TextSequence{tokens, causal, side.memory_offset + side.videos.offsets[static_cast<std::size_t>(v)],
                        side.videos.frame_counts[static_cast<std::size_t>(v)] * frame_len};
  };

  for (Side<T>* side : sides) {
    const int n = static_cast<int>(side->size());
    if (cfg.on(side->matching)) {
      Rng rng = negative_stream(side->matching);
      HardNegatives negs;
      if (cfg.hard_negative) {
        negs = mine_hard_negatives(detached_similarity(side->video_globals, side->text_globals, temperature.item()),
                                   rng);
      } else {
        negs = uniform_negatives(n, rng);
      }
      MatchingJob job{side->matching, {}, {}};
      auto add = [&](int text, int video, int label) {
        job.sequences.push_back(static_cast<int>(cross.size()));
        job.labels.push_back(label);
        cross.push_back(video_slice(*side, video, side->texts[static_cast<std::size_t>(text)], false));
      };
      for (int i = 0; i < n; ++i) {
        add(i, i, 1);
        add(negs.text_for_video[static_cast<std::size_t>(i)], i, 0);
        add(i, negs.video_for_text[static_cast<std::size_t>(i)], 0);
      }
      bd.negatives += 2 * n;
      matching_jobs.push_back(std::move(job));
    }
    for (Objective o : {side->bidirectional, side->causal}) {
      if (!cfg.on(o)) continue;
      const bool causal = o == side->causal;
      const double rate = causal ? cfg.gm_rate : cfg.mlm_rate;
      Rng rng = mask_stream(o);
      ReconstructionJob job{o, {}, {}};
      for (int i = 0; i < n; ++i) {
        MaskedParagraph m = mask_tokens(side->texts[static_cast<std::size_t>(i)], rate, rng);
        if (causal) {
          // the closing [SEP] is always predicted so decoding learns to stop
          const int last = static_cast<int>(m.input_tokens.size()) - 1;
          m.input_tokens[static_cast<std::size_t>(last)] = Vocabulary::kMask;
          m.masked_positions.push_back(last);
          m.target_tokens.push_back(Vocabulary::kSep);
        }
        owned.push_back(std::move(m.input_tokens));
        for (int p : m.masked_positions) job.slots.emplace_back(static_cast<int>(cross.size()), p);
        cross.push_back(video_slice(*side, i, owned.back(), causal));
        job.targets.insert(job.targets.end(), m.target_tokens.begin(), m.target_tokens.end());
      }
      bd.masked_tokens += static_cast<int>(job.targets.size());
      reconstruction_jobs.push_back(std::move(job));
    }
  }

  if (!cross.empty()) {
    auto memory_rows_var = memory_parts.size() == 1 ? memory_parts[0] : ag::concat_rows<T>(memory_parts);
    auto memory = model.prepare_memory(tape, memory_rows_var);
    auto out = model.text_forward(tape, cross, &memory);
    for (auto& job : matching_jobs) {
      std::vector<int> cls;
      for (int s : job.sequences) cls.push_back(out.offsets[static_cast<std::size_t>(s)]);
      auto logits = model.itm_logits(tape, ag::gather_rows(out.hidden, std::move(cls)));
      losses[idx(job.objective)] = matching_loss(logits, std::move(job.labels));
    }
    for (auto& job : reconstruction_jobs) {
      std::vector<int> rows;
      for (auto [seq, pos] : job.slots) rows.push_back(out.offsets[static_cast<std::size_t>(seq)] + pos);
      auto logits = model.token_logits(tape, ag::gather_rows(out.hidden, std::move(rows)));
      losses[idx(job.objective)] = ag::cross_entropy(logits, std::move(job.targets));
    }
  }

  for (Objective o : kAllObjectives) {
    if (!cfg.on(o)) continue;
    const ag::Var<T>& loss = losses[idx(o)];
    bd.present[idx(o)] = true;
    bd.values[idx(o)] = static_cast<double>(loss.item());
    auto weighted = ag::scale(loss, static_cast<T>(cfg.weight(o)));
    result.total = result.total.valid() ? ag::add(result.total, weighted) : weighted;
  }
  bd.total = static_cast<double>(result.total.item());
  return result;
}

#define COSA_INSTANTIATE(T)                                                                                        \
  template ag::Var<T> contrastive_loss<T>(ag::Var<T>, ag::Var<T>, ag::Var<T>);                                  \
  template ag::Var<T> matching_loss<T>(ag::Var<T>, std::vector<int>);                                            \
  template ag::Var<T> masked_reconstruction_loss<T>(const Model<T>&, ag::Tape<T>&, const MaskedParagraph&,       \
                                                    ag::Var<T>, bool);                                           \
  template LossGraph<T> total_loss<T>(const Model<T>&, ag::Tape<T>&, const StepInputs&, const ObjectiveConfig&, \
                                      Rng&, Rng&);

COSA_INSTANTIATE(float)
COSA_INSTANTIATE(double)

}  // namespace cosa
