#include "cosa/eval.hpp"

#include <algorithm>
#include <numeric>

#include "cosa/errors.hpp"

namespace cosa {

using nlohmann::json;

json MetricsRecord::to_json() const {
  return {{"step", step}, {"phase", phase}, {"name", name}, {"value", value}, {"seed", seed}, {"mode", mode}};
}

MetricsRecord MetricsRecord::from_json(const json& j) {
  try {
    MetricsRecord r;
    r.step = j.at("step").get<int>();
    r.phase = j.at("phase").get<std::string>();
    r.name = j.at("name").get<std::string>();
    r.value = j.at("value").is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at("value").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.mode = j.at("mode").get<std::string>();
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("metrics record: ") + e.what());
  }
}

namespace {

constexpr int kChunk = 256;  // sequences per packed no-grad pass

template <typename T>
struct EncodedVideos {
  ag::Matrix<T> sequence;  // all videos back to back
  ag::Matrix<T> globals;   // one row per video
  std::vector<int> offsets;
  std::vector<int> lengths;
  std::vector<ag::Matrix<T>> keys, values;  // cross-attention memory per text layer
};

template <typename T>
EncodedVideos<T> encode_videos(const Model<T>& model, std::span<const std::vector<Image>> videos) {
  if (videos.empty()) throw ShapeError("encode_videos: no videos");
  ag::Tape<T> tape(false);
  std::vector<const Image*> images;
  std::vector<std::vector<int>> frames;
  for (const auto& v : videos) {
    std::vector<int> idx;
    for (const Image& f : v) {
      idx.push_back(static_cast<int>(images.size()));
      images.push_back(&f);
    }
    frames.push_back(std::move(idx));
  }
  auto features = model.encode_images(tape, images);
  auto batch = model.assemble_videos(tape, features, frames);
  auto memory = model.prepare_memory(tape, batch.sequence);
  EncodedVideos<T> out;
  out.sequence = batch.sequence.value();
  out.globals = model.video_globals(tape, batch).value();
  out.offsets = batch.offsets;
  for (int c : batch.frame_counts) out.lengths.push_back(c * model.config().frame_len());
  for (std::size_t l = 0; l < memory.keys.size(); ++l) {
    out.keys.push_back(memory.keys[l].value());
    out.values.push_back(memory.values[l].value());
  }
  return out;
}

template <typename T>
VisualMemory<T> constant_memory(ag::Tape<T>& tape, const EncodedVideos<T>& enc) {
  VisualMemory<T> mem;
  mem.rows = tape.constant(enc.sequence);
  for (std::size_t l = 0; l < enc.keys.size(); ++l) {
    mem.keys.push_back(tape.constant(enc.keys[l]));
    mem.values.push_back(tape.constant(enc.values[l]));
  }
  return mem;
}

template <typename T>
ag::Matrix<T> text_globals(const Model<T>& model, std::span<const std::vector<TokenId>> texts) {
  ag::Matrix<T> out(static_cast<Eigen::Index>(texts.size()), model.config().d_model);
  for (std::size_t begin = 0; begin < texts.size(); begin += kChunk) {
    const std::size_t end = std::min(texts.size(), begin + kChunk);
    ag::Tape<T> tape(false);
    std::vector<TextSequence> seqs;
    for (std::size_t i = begin; i < end; ++i) seqs.push_back({texts[i], false, 0, 0});
    auto enc = model.text_forward(tape, seqs, nullptr);
    auto g = model.text_globals(tape, ag::gather_rows(enc.hidden, enc.offsets));
    out.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin)) = g.value();
  }
  return out;
}

ag::Matrix<double> cosine(ag::Matrix<double> a, ag::Matrix<double> b) {
  a.rowwise().normalize();
  b.rowwise().normalize();
  return a * b.transpose();
}

Ranking rank_by(const std::vector<double>& scores, std::vector<int> ids) {
  std::stable_sort(ids.begin(), ids.end(), [&](int x, int y) {
    const double sx = scores[static_cast<std::size_t>(x)], sy = scores[static_cast<std::size_t>(y)];
    if (sx != sy) return sx > sy;
    return x < y;
  });
  return ids;
}

TokenId argmax_token(const auto& row) {
  TokenId best = Vocabulary::kSep;
  double best_value = -std::numeric_limits<double>::infinity();
  for (Eigen::Index v = 0; v < row.size(); ++v) {
    if (v == Vocabulary::kPad || v == Vocabulary::kCls || v == Vocabulary::kMask) continue;
    const double x = static_cast<double>(row(v));
    if (x > best_value) {
      best_value = x;
      best = static_cast<TokenId>(v);
    }
  }
  return best;
}

}  // namespace

template <typename T>
ag::Matrix<double> itc_similarity(const Model<T>& model, const RetrievalTask& task) {
  if (task.candidates.empty()) throw ShapeError("retrieve: no candidates");
  if (task.queries.empty()) throw ShapeError("retrieve: no queries");
  const auto videos = encode_videos(model, task.candidates);
  const auto texts = text_globals(model, std::span<const std::vector<TokenId>>(task.queries));
  return cosine(texts.template cast<double>(), videos.globals.template cast<double>());
}

namespace {

// Both stages; the stage-1 rankings are copied to `itc_out` when given.
template <typename T>
std::vector<Ranking> two_stage(const Model<T>& model, const RetrievalTask& task, std::vector<Ranking>* itc_out) {
  if (task.candidates.empty()) throw ShapeError("retrieve: no candidates");
  if (task.rerank_k < 1) throw ConfigError("retrieve: rerank_k must be >= 1");
  const auto videos = encode_videos(model, task.candidates);
  const auto texts = text_globals(model, std::span<const std::vector<TokenId>>(task.queries));
  const ag::Matrix<double> sim = cosine(texts.template cast<double>(), videos.globals.template cast<double>());
  const int n_cand = static_cast<int>(task.candidates.size());
  const int k = std::min(task.rerank_k, n_cand);

  std::vector<Ranking> rankings;
  std::vector<int> all(static_cast<std::size_t>(n_cand));
  std::iota(all.begin(), all.end(), 0);
  for (std::size_t q = 0; q < task.queries.size(); ++q) {
    std::vector<double> row(sim.row(static_cast<Eigen::Index>(q)).data(),
                            sim.row(static_cast<Eigen::Index>(q)).data() + n_cand);
    rankings.push_back(rank_by(row, all));
  }
  if (itc_out) *itc_out = rankings;
  if (k <= 1) return rankings;

  // Stage 2: ITM match logits for the top block of every query.
  std::vector<std::pair<int, int>> pairs;  // (query, candidate)
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    for (int r = 0; r < k; ++r) pairs.emplace_back(static_cast<int>(q), rankings[q][static_cast<std::size_t>(r)]);
  }
  std::vector<double> match(pairs.size());
  for (std::size_t begin = 0; begin < pairs.size(); begin += kChunk) {
    const std::size_t end = std::min(pairs.size(), begin + kChunk);
    ag::Tape<T> tape(false);
    auto memory = constant_memory(tape, videos);
    std::vector<TextSequence> seqs;
    for (std::size_t p = begin; p < end; ++p) {
      const auto [q, c] = pairs[p];
      seqs.push_back({task.queries[static_cast<std::size_t>(q)], false, videos.offsets[static_cast<std::size_t>(c)],
                      videos.lengths[static_cast<std::size_t>(c)]});
    }
    auto out = model.text_forward(tape, seqs, &memory);
    auto logits = model.itm_logits(tape, ag::gather_rows(out.hidden, out.offsets)).value();
    for (std::size_t p = begin; p < end; ++p) match[p] = static_cast<double>(logits(static_cast<Eigen::Index>(p - begin), 1));
  }
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    std::vector<double> scores(static_cast<std::size_t>(n_cand), 0.0);
    std::vector<int> block(rankings[q].begin(), rankings[q].begin() + k);
    for (int r = 0; r < k; ++r) scores[static_cast<std::size_t>(block[static_cast<std::size_t>(r)])] = match[q * k + r];
    block = rank_by(scores, block);
    std::copy(block.begin(), block.end(), rankings[q].begin());
  }
  return rankings;
}

}  // namespace

template <typename T>
std::vector<Ranking> retrieve(const Model<T>& model, const RetrievalTask& task) {
  return two_stage(model, task, nullptr);
}

double recall_at_k(std::span<const Ranking> rankings, std::span<const int> gold, int k) {
  if (k < 1) throw ConfigError("recall_at_k: k must be >= 1");
  if (rankings.size() != gold.size()) throw ShapeError("recall_at_k: one gold index per ranking required");
  if (rankings.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const auto& r = rankings[q];
    const auto limit = std::min<std::size_t>(static_cast<std::size_t>(k), r.size());
    if (std::find(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(limit), gold[q]) !=
        r.begin() + static_cast<std::ptrdiff_t>(limit)) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

template <typename T>
std::vector<std::vector<TokenId>> generate_batch(const Model<T>& model, std::span<const std::vector<Image>> inputs,
                                                 int max_len) {
  if (max_len < 2 || max_len > model.config().max_position_len) {
    throw ConfigError("generate: max_len must be in [2, max_position_len]");
  }
  std::vector<std::vector<TokenId>> out(inputs.size());
  if (inputs.empty()) return out;
  const auto videos = encode_videos(model, inputs);
  std::vector<std::vector<TokenId>> prefix(inputs.size(), std::vector<TokenId>{Vocabulary::kCls});
  std::vector<std::size_t> active(inputs.size());
  std::iota(active.begin(), active.end(), 0);
  while (!active.empty()) {
    std::vector<std::size_t> still;
    for (std::size_t begin = 0; begin < active.size(); begin += kChunk) {
      const std::size_t end = std::min(active.size(), begin + kChunk);
      ag::Tape<T> tape(false);
      auto memory = constant_memory(tape, videos);
      std::vector<std::vector<TokenId>> inputs_now;
      std::vector<TextSequence> seqs;
      for (std::size_t a = begin; a < end; ++a) {
        auto tokens = prefix[active[a]];
        tokens.push_back(Vocabulary::kMask);
        inputs_now.push_back(std::move(tokens));
      }
      for (std::size_t a = begin; a < end; ++a) {
        const std::size_t i = active[a];
        seqs.push_back({inputs_now[a - begin], true, videos.offsets[i], videos.lengths[i]});
      }
      auto enc = model.text_forward(tape, seqs, &memory);
      std::vector<int> slots;
      for (std::size_t s = 0; s < seqs.size(); ++s) slots.push_back(enc.offsets[s] + enc.lengths[s] - 1);
      auto logits = model.token_logits(tape, ag::gather_rows(enc.hidden, std::move(slots))).value();
      for (std::size_t a = begin; a < end; ++a) {
        const std::size_t i = active[a];
        const TokenId tok = argmax_token(logits.row(static_cast<Eigen::Index>(a - begin)));
        prefix[i].push_back(tok);
        if (tok != Vocabulary::kSep && static_cast<int>(prefix[i].size()) + 1 <= max_len) still.push_back(i);
      }
    }
    active = std::move(still);
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& p = prefix[i];
    auto last = p.end();
    if (p.size() > 1 && p.back() == Vocabulary::kSep) --last;
    out[i].assign(p.begin() + 1, last);
  }
  return out;
}

template <typename T>
std::vector<TokenId> generate(const Model<T>& model, std::span<const Image> frames, int max_len) {
  std::vector<std::vector<Image>> one{std::vector<Image>(frames.begin(), frames.end())};
  return generate_batch(model, std::span<const std::vector<Image>>(one), max_len).front();
}

CaptionScores caption_metrics(std::span<const TokenId> pred, std::span<const TokenId> gold) {
  CaptionScores s;
  s.exact_match = std::equal(pred.begin(), pred.end(), gold.begin(), gold.end()) ? 1.0 : 0.0;
  const std::size_t denom = std::max(pred.size(), gold.size());
  if (denom == 0) {
    s.token_acc = 1.0;
    return s;
  }
  std::size_t matched = 0;
  for (std::size_t i = 0; i < std::min(pred.size(), gold.size()); ++i) matched += pred[i] == gold[i];
  s.token_acc = static_cast<double>(matched) / static_cast<double>(denom);
  return s;
}

double span_order_accuracy(std::span<const TokenId> pred, std::span<const TokenId> gold,
                           std::span<const TokenSpan> spans) {
  if (spans.empty()) return 0.0;
  std::size_t correct = 0;
  for (const TokenSpan& s : spans) {
    if (s.begin < 0 || s.end > static_cast<int>(gold.size()) || s.begin > s.end) {
      throw ShapeError("span_order_accuracy: span outside gold");
    }
    if (s.end > static_cast<int>(pred.size())) continue;
    correct += std::equal(pred.begin() + s.begin, pred.begin() + s.end, gold.begin() + s.begin);
  }
  return static_cast<double>(correct) / static_cast<double>(spans.size());
}

EvalSuite build_eval_suite(std::span<const Sample> heldout, const Vocabulary& vocab, const EvalSpec& spec,
                           int max_position_len) {
  const auto h = static_cast<int>(heldout.size());
  if (spec.queries > h || spec.captions > h) {
    throw ConfigError("eval: need at least " + std::to_string(std::max(spec.queries, spec.captions)) +
                      " held-out samples, have " + std::to_string(h));
  }
  if (spec.frames > h) throw ConfigError("eval: fewer held-out samples than frames per pseudo video");
  ConcatConfig cc;
  cc.n_c = spec.frames - 1;
  cc.max_position_len = max_position_len;
  Rng rng(spec.seed);
  const auto rows = group_indices(heldout, cc, rng);

  EvalSuite suite;
  suite.retrieval.rerank_k = spec.rerank_k;
  int longest_story = 0;
  for (int q = 0; q < spec.queries; ++q) {
    std::vector<const Sample*> members;
    for (std::size_t i : rows[static_cast<std::size_t>(q)]) members.push_back(&heldout[i]);
    ConcatGroup g = concatenate(members, cc, vocab);
    suite.retrieval.queries.push_back(g.paragraph);
    suite.retrieval.candidates.push_back(g.frames);
    suite.retrieval.gold.push_back(q);
    std::vector<TokenSpan> spans;
    for (const TokenSpan& s : g.spans) spans.push_back({s.begin - 1, s.end - 1});
    suite.story.inputs.push_back(std::move(g.frames));
    suite.story.gold.emplace_back(g.paragraph.begin() + 1, g.paragraph.end() - 1);
    suite.story.spans.push_back(std::move(spans));
    longest_story = std::max(longest_story, static_cast<int>(g.paragraph.size()));
  }
  int longest_caption = 0;
  for (int i = 0; i < spec.captions; ++i) {
    const Sample& s = heldout[static_cast<std::size_t>(i)];
    suite.captions.inputs.push_back({s.image});
    suite.captions.gold.push_back(s.caption);
    longest_caption = std::max(longest_caption, static_cast<int>(s.caption.size()) + 2);
  }
  // One slot of slack beyond the longest framed gold sequence.
  auto limit = [&](int longest) {
    return spec.max_len > 0 ? std::min(spec.max_len, max_position_len) : std::min(longest + 1, max_position_len);
  };
  suite.story.max_len = limit(longest_story);
  suite.captions.max_len = limit(longest_caption);
  return suite;
}

template <typename T>
std::map<std::string, double> evaluate(const Model<T>& model, const EvalSuite& suite) {
  std::map<std::string, double> m;
  const RetrievalTask& rt = suite.retrieval;
  std::vector<Ranking> itc_rankings;
  const auto rankings = two_stage(model, rt, &itc_rankings);
  m["itc_R@1"] = recall_at_k(itc_rankings, rt.gold, 1);
  m["R@1"] = recall_at_k(rankings, rt.gold, 1);
  m["R@5"] = recall_at_k(rankings, rt.gold, 5);
  m["R@10"] = recall_at_k(rankings, rt.gold, 10);

  auto score = [&](const CaptionTask& task, const std::string& prefix, bool spans) {
    const auto preds = generate_batch(model, std::span<const std::vector<Image>>(task.inputs), task.max_len);
    double em = 0, acc = 0, span = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const auto s = caption_metrics(preds[i], task.gold[i]);
      em += s.exact_match;
      acc += s.token_acc;
      if (spans) span += span_order_accuracy(preds[i], task.gold[i], task.spans[i]);
    }
    const double n = static_cast<double>(std::max<std::size_t>(1, preds.size()));
    m[prefix + "exact_match"] = em / n;
    m[prefix + "token_acc"] = acc / n;
    if (spans) m["span_acc"] = span / n;
  };
  score(suite.story, "story_", true);
  score(suite.captions, "caption_", false);
  return m;
}

#define COSA_INSTANTIATE(T)                                                                                      \
  template ag::Matrix<double> itc_similarity<T>(const Model<T>&, const RetrievalTask&);                       \
  template std::vector<Ranking> retrieve<T>(const Model<T>&, const RetrievalTask&);                           \
  template std::vector<TokenId> generate<T>(const Model<T>&, std::span<const Image>, int);                    \
  template std::vector<std::vector<TokenId>> generate_batch<T>(const Model<T>&,                                \
                                                               std::span<const std::vector<Image>>, int);     \
  template std::map<std::string, double> evaluate<T>(const Model<T>&, const EvalSuite&);

COSA_INSTANTIATE(float)
COSA_INSTANTIATE(double)

}  // namespace cosa
