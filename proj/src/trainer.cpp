#include "cosa/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include "cosa/binary_io.hpp"
#include "cosa/corpus_io.hpp"
#include "cosa/errors.hpp"
#include "cosa/harness.hpp"

namespace cosa {

namespace fs = std::filesystem;
using nlohmann::json;

TrainData load_train_data(const CorpusSpec& spec) {
  TrainData data;
  data.corpus = spec.dir.empty() ? build_corpus(spec.n, spec.seed, spec.grammar) : read_corpus(spec.dir);
  const std::size_t n = data.corpus.samples.size();
  if (spec.holdout >= n) {
    throw ConfigError("corpus: holdout " + std::to_string(spec.holdout) + " leaves no training samples out of " +
                      std::to_string(n));
  }
  data.train.assign(data.corpus.samples.begin(), data.corpus.samples.end() - static_cast<std::ptrdiff_t>(spec.holdout));
  data.heldout.assign(data.corpus.samples.end() - static_cast<std::ptrdiff_t>(spec.holdout), data.corpus.samples.end());
  return data;
}

TrainConfig bind_config(const TrainConfig& cfg, const Corpus& corpus) {
  cfg.validate();
  TrainConfig r = cfg.resolved();
  const int vocab = static_cast<int>(corpus.vocab.size());
  if (r.model.vocab_size != 0 && r.model.vocab_size != vocab) {
    throw ConfigError("config: model.vocab_size " + std::to_string(r.model.vocab_size) +
                      " does not match the corpus vocabulary (" + std::to_string(vocab) + ")");
  }
  r.model.vocab_size = vocab;
  r.model.validate();
  const int caption = max_caption_len(corpus.grammar);
  const int seps = r.concat.insert_sep ? 1 : 0;
  auto paragraph = [&](int members) { return members * caption + (members - 1) * seps + 2; };
  if (paragraph(r.concat.n_c + 1) > r.model.max_position_len) {
    throw ConfigError("config: paragraphs of " + std::to_string(r.concat.n_c + 1) + " captions need " +
                      std::to_string(paragraph(r.concat.n_c + 1)) + " positions, model.max_position_len is " +
                      std::to_string(r.model.max_position_len));
  }
  if (paragraph(r.eval.frames) - seps * (r.eval.frames - 1) > r.model.max_position_len) {
    throw ConfigError("config: evaluation paragraphs exceed model.max_position_len");
  }
  return r;
}

Trainer::Trainer(const TrainConfig& cfg, const TrainData& data)
    : cfg_(cfg),
      objectives_(cfg.effective_objectives()),
      data_(&data),
      state_(Model<float>(cfg.model, mix_seed(cfg.seed, 0))) {
  if (cfg_.model.vocab_size != static_cast<int>(data.corpus.vocab.size())) {
    throw ConfigError("trainer: config is not bound to this corpus");
  }
  if (static_cast<int>(data.train.size()) < cfg_.n_b) {
    throw ConfigError("trainer: training split (" + std::to_string(data.train.size()) + ") is smaller than n_b");
  }
  state_.data_rng = Rng(mix_seed(cfg_.seed, 1));
  state_.mask_rng = Rng(mix_seed(cfg_.seed, 2));
  state_.negative_rng = Rng(mix_seed(cfg_.seed, 3));
  state_.model.params().visit([&](const std::string&, const ag::Param<float>& p) {
    state_.adam_m.push_back(ag::Matrix<float>::Zero(p.value.rows(), p.value.cols()));
    state_.adam_v.push_back(ag::Matrix<float>::Zero(p.value.rows(), p.value.cols()));
  });
}

std::vector<Sample> Trainer::next_batch() {
  const auto n_b = static_cast<std::size_t>(cfg_.n_b);
  if (state_.order.empty() || state_.cursor + n_b > state_.order.size()) {
    state_.order.resize(data_->train.size());
    std::iota(state_.order.begin(), state_.order.end(), std::size_t{0});
    state_.data_rng.shuffle(state_.order.begin(), state_.order.end());
    state_.cursor = 0;
    ++state_.epoch;
  }
  std::vector<Sample> batch;
  batch.reserve(n_b);
  for (std::size_t i = 0; i < n_b; ++i) batch.push_back(data_->train[state_.order[state_.cursor + i]]);
  state_.cursor += n_b;
  return batch;
}

namespace {

std::vector<std::vector<float>> grouping_features(const Model<float>& model, std::span<const Sample> batch,
                                                  GroupingStrategy strategy) {
  ag::Tape<float> tape(false);
  ag::Matrix<float> g;
  if (strategy == GroupingStrategy::vision_similarity) {
    std::vector<const Image*> images;
    std::vector<std::vector<int>> frames;
    for (const Sample& s : batch) {
      frames.push_back({static_cast<int>(images.size())});
      images.push_back(&s.image);
    }
    auto videos = model.assemble_videos(tape, model.encode_images(tape, images), frames);
    g = model.video_globals(tape, videos).value();
  } else {
    std::vector<std::vector<TokenId>> texts;
    for (const Sample& s : batch) {
      std::vector<TokenId> t{Vocabulary::kCls};
      t.insert(t.end(), s.caption.begin(), s.caption.end());
      t.push_back(Vocabulary::kSep);
      texts.push_back(std::move(t));
    }
    std::vector<TextSequence> seqs;
    for (const auto& t : texts) seqs.push_back({t, false, 0, 0});
    auto out = model.text_forward(tape, seqs, nullptr);
    g = model.text_globals(tape, ag::gather_rows(out.hidden, out.offsets)).value();
  }
  std::vector<std::vector<float>> features;
  for (Eigen::Index i = 0; i < g.rows(); ++i) features.emplace_back(g.row(i).data(), g.row(i).data() + g.cols());
  return features;
}

}  // namespace

std::vector<ConcatGroup> Trainer::build_groups(std::span<const Sample> batch) {
  std::vector<ConcatGroup> groups;
  if (cfg_.mode == TrainMode::sst || !objectives_.any_concatenated()) return groups;
  ++grouping_calls_;
  const Vocabulary& vocab = data_->corpus.vocab;
  if (cfg_.mode == TrainMode::cosa_copy) {
    for (const Sample& s : batch) groups.push_back(variant_copy(s, cfg_.concat, vocab));
    return groups;
  }
  std::vector<std::vector<float>> features;
  if (cfg_.concat.strategy != GroupingStrategy::random && cfg_.concat.n_c > 0) {
    features = grouping_features(state_.model, batch, cfg_.concat.strategy);
  }
  groups = group_batch(batch, cfg_.concat, state_.data_rng, vocab, features);
  if (cfg_.mode == TrainMode::cosa_shuffle) {
    for (auto& g : groups) g = variant_shuffle(g, state_.data_rng);
  }
  return groups;
}

LossBreakdown Trainer::step() {
  const std::vector<Sample> batch = next_batch();
  const std::vector<ConcatGroup> groups = build_groups(batch);
  StepInputs inputs;
  if (objectives_.any_single()) inputs.samples = batch;
  inputs.groups = groups;

  state_.model.zero_grad();
  ag::Tape<float> tape(true);
  LossGraph<float> graph = total_loss(state_.model, tape, inputs, objectives_, state_.mask_rng, state_.negative_rng);
  if (!graph.breakdown.finite()) {
    throw NumericalError("non-finite loss at step " + std::to_string(state_.step + 1));
  }
  tape.backward(graph.total);
  apply_update(lr_at(state_.step, cfg_));
  ++state_.step;
  bool finite = true;
  state_.model.params().visit([&](const std::string&, const ag::Param<float>& p) {
    finite = finite && p.value.allFinite();
  });
  if (!finite) throw NumericalError("non-finite parameters after step " + std::to_string(state_.step));
  return graph.breakdown;
}

void Trainer::apply_update(double lr) {
  ModelParams<float>& params = state_.model.params();
  double sq = 0.0;
  params.visit([&](const std::string&, const ag::Param<float>& p) {
    sq += p.grad.template cast<double>().squaredNorm();
  });
  const double norm = std::sqrt(sq);
  const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / (norm + 1e-6) : 1.0;

  const double t = state_.step + 1;
  const auto b1 = static_cast<float>(cfg_.beta1);
  const auto b2 = static_cast<float>(cfg_.beta2);
  const auto bc1 = static_cast<float>(1.0 - std::pow(cfg_.beta1, t));
  const auto bc2 = static_cast<float>(1.0 - std::pow(cfg_.beta2, t));
  const auto eps = static_cast<float>(cfg_.adam_eps);
  const auto lr_f = static_cast<float>(lr);
  const auto wd = static_cast<float>(cfg_.weight_decay);
  const auto scale = static_cast<float>(clip);
  std::size_t k = 0;
  params.visit([&](const std::string&, ag::Param<float>& p) {
    auto& m = state_.adam_m[k];
    auto& v = state_.adam_v[k];
    ++k;
    const auto g = (p.grad.array() * scale).eval();
    m.array() = b1 * m.array() + (1.0f - b1) * g;
    v.array() = b2 * v.array() + (1.0f - b2) * g.square();
    auto update = ((m.array() / bc1) / ((v.array() / bc2).sqrt() + eps)).eval();
    if (p.decay) update += wd * p.value.array();
    p.value.array() -= lr_f * update;
  });
  auto& temp = params.temperature.value;
  temp(0, 0) = std::clamp(temp(0, 0), static_cast<float>(cfg_.temperature_min), static_cast<float>(cfg_.temperature_max));
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ckpt;
  store_model(ckpt, state_.model);
  ckpt.header["train_config"] = cfg_.to_json();
  ckpt.header["state"] = {{"step", state_.step},
                          {"epoch", state_.epoch},
                          {"cursor", state_.cursor},
                          {"rng",
                           {{"data", state_.data_rng.state()},
                            {"mask", state_.mask_rng.state()},
                            {"negative", state_.negative_rng.state()}}}};
  std::size_t k = 0;
  state_.model.params().visit([&](const std::string& name, const ag::Param<float>&) {
    ckpt.tensors.push_back(to_tensor<float>("adam.m." + name, state_.adam_m[k]));
    ckpt.tensors.push_back(to_tensor<float>("adam.v." + name, state_.adam_v[k]));
    ++k;
  });
  CheckpointTensor order;
  order.name = "data.order";
  order.dtype = Dtype::f64;
  order.rows = 1;
  order.cols = static_cast<std::int64_t>(state_.order.size());
  order.values.assign(state_.order.begin(), state_.order.end());
  ckpt.tensors.push_back(std::move(order));
  return ckpt;
}

void Trainer::restore(const Checkpoint& ckpt) {
  if (!ckpt.header.contains("train_config") || !ckpt.header.contains("state")) {
    throw DataError("checkpoint: not a training checkpoint");
  }
  if (ckpt.header.at("train_config") != cfg_.to_json()) {
    throw DataError("checkpoint: training config differs from the current run");
  }
  const Model<float> loaded = load_model<float>(ckpt, &cfg_.model);
  std::vector<const ag::Param<float>*> source;
  loaded.params().visit([&](const std::string&, const ag::Param<float>& p) { source.push_back(&p); });
  try {
    const json& s = ckpt.header.at("state");
    state_.step = s.at("step").get<int>();
    state_.epoch = s.at("epoch").get<int>();
    state_.cursor = s.at("cursor").get<std::size_t>();
    state_.data_rng.set_state(s.at("rng").at("data").get<std::string>());
    state_.mask_rng.set_state(s.at("rng").at("mask").get<std::string>());
    state_.negative_rng.set_state(s.at("rng").at("negative").get<std::string>());
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint state: ") + e.what());
  }
  std::size_t k = 0;
  state_.model.params().visit([&](const std::string& name, ag::Param<float>& p) {
    p.value = source[k]->value;
    state_.adam_m[k] = from_tensor<float>(ckpt.at("adam.m." + name));
    state_.adam_v[k] = from_tensor<float>(ckpt.at("adam.v." + name));
    if (state_.adam_m[k].rows() != p.value.rows() || state_.adam_m[k].cols() != p.value.cols() ||
        state_.adam_v[k].rows() != p.value.rows() || state_.adam_v[k].cols() != p.value.cols()) {
      throw DataError("checkpoint: optimizer state for '" + name + "' has the wrong shape");
    }
    ++k;
  });
  const CheckpointTensor& order = ckpt.at("data.order");
  state_.order.assign(order.values.begin(), order.values.end());
  if (state_.cursor > state_.order.size()) throw DataError("checkpoint: data cursor out of range");
}

// ---------------------------------------------------------------------------

namespace {

class MetricsLog {
 public:
  MetricsLog(const fs::path& path, std::uint64_t seed, std::string mode)
      : out_(path, std::ios::app), seed_(seed), mode_(std::move(mode)) {
    if (!out_) throw DataError("cannot open metrics log " + path.string());
  }

  void write(int step, const std::string& phase, const std::string& name, double value) {
    MetricsRecord r{step, phase, name, value, seed_, mode_};
    out_ << r.to_json().dump() << '\n';
  }

  void write_raw(const json& j) { out_ << j.dump() << '\n'; }
  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
  std::uint64_t seed_;
  std::string mode_;
};

void write_json(const fs::path& path, const json& j) { io::write_file_atomic(path, j.dump(2) + "\n"); }

// Keeps the records up to and including `step` (resume truncation).
void truncate_log(const fs::path& path, int step) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception&) {
      throw DataError("metrics log " + path.string() + ": malformed line");
    }
    if (j.value("step", 0) <= step) kept += line + "\n";
  }
  in.close();
  io::write_file_atomic(path, kept);
}

std::string step_name(int step) {
  std::ostringstream s;
  s << "step_" << std::setw(6) << std::setfill('0') << step << ".ckpt";
  return s.str();
}

}  // namespace

std::vector<MetricsRecord> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("metrics log not found: " + path.string());
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(MetricsRecord::from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw DataError("metrics log " + path.string() + ": " + e.what());
    }
  }
  return out;
}

RunResult run(const TrainConfig& cfg_in, const RunOptions& options) {
  cfg_in.validate();
  const TrainData data = load_train_data(cfg_in.corpus);
  const TrainConfig cfg = bind_config(cfg_in, data.corpus);
  const fs::path dir = options.run_dir;
  const fs::path log_path = dir / "metrics.jsonl";
  const std::vector<std::string> owned = {"config.json", "metrics.jsonl", "final.ckpt", "final_metrics.json",
                                          "run.json", "checkpoints"};

  if (!options.resume) {
    bool occupied = false;
    for (const auto& name : owned) occupied = occupied || fs::exists(dir / name);
    if (occupied && !options.force) {
      throw ConfigError("run directory " + dir.string() + " already holds a run (use --force to replace it)");
    }
    for (const auto& name : owned) fs::remove_all(dir / name);
  }
  fs::create_directories(dir / "checkpoints");
  write_json(dir / "config.json", cfg.to_json());
  write_json(dir / "run.json", {{"code_version", kCodeVersion}});

  Trainer trainer(cfg, data);
  if (options.resume) {
    trainer.restore(read_checkpoint(*options.resume));
    truncate_log(log_path, trainer.state().step);
  }
  const EvalSuite suite = build_eval_suite(data.heldout, data.corpus.vocab, cfg.eval, cfg.model.max_position_len);
  MetricsLog log(log_path, cfg.seed, to_string(cfg.mode));

  std::map<std::string, double> last_eval;
  int last_eval_step = -1;
  auto run_eval = [&](int step) {
    last_eval = evaluate(trainer.state().model, suite);
    for (const auto& [name, value] : last_eval) log.write(step, "eval", name, value);
    log.flush();
    last_eval_step = step;
  };

  while (trainer.state().step < cfg.steps) {
    const int step = trainer.state().step + 1;
    const double lr = lr_at(trainer.state().step, cfg);
    LossBreakdown bd;
    try {
      bd = trainer.step();
    } catch (const NumericalError& e) {
      log.write_raw({{"step", step},
                     {"phase", "train"},
                     {"name", "abort"},
                     {"value", nullptr},
                     {"seed", cfg.seed},
                     {"mode", to_string(cfg.mode)},
                     {"diagnostic", e.what()}});
      log.flush();
      throw;
    }
    log.write(step, "train", "loss", bd.total);
    for (Objective o : kAllObjectives) {
      if (bd.has(o)) log.write(step, "train", "loss/" + to_string(o), bd.value(o));
    }
    log.write(step, "train", "lr", lr);
    log.write(step, "train", "temperature", trainer.state().model.params().temperature.value(0, 0));
    if (options.progress && options.progress_every > 0 && step % options.progress_every == 0) {
      *options.progress << "[" << dir.filename().string() << "] step " << step << "/" << cfg.steps
                        << " loss " << bd.total << std::endl;
    }
    if (cfg.eval_every > 0 && step % cfg.eval_every == 0) run_eval(step);
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps) {
      log.flush();
      write_checkpoint(dir / "checkpoints" / step_name(step), trainer.checkpoint());
    }
  }
  if (last_eval_step != cfg.steps) run_eval(cfg.steps);
  log.flush();
  RunResult result;
  result.steps = cfg.steps;
  result.final_metrics = last_eval;
  result.final_checkpoint = dir / "final.ckpt";
  write_checkpoint(result.final_checkpoint, trainer.checkpoint());
  write_json(dir / "final_metrics.json", json(last_eval));
  return result;
}

}  // namespace cosa
