#include "cosa/concat.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cosa/errors.hpp"

namespace cosa {

std::string to_string(GroupingStrategy s) {
  switch (s) {
    case GroupingStrategy::random:
      return "random";
    case GroupingStrategy::vision_similarity:
      return "vision_similarity";
    case GroupingStrategy::text_similarity:
      return "text_similarity";
  }
  return "?";
}

std::string to_string(ConcatVariant v) {
  switch (v) {
    case ConcatVariant::cosa:
      return "cosa";
    case ConcatVariant::copy:
      return "copy";
    case ConcatVariant::shuffle:
      return "shuffle";
  }
  return "?";
}

GroupingStrategy parse_strategy(const std::string& name) {
  if (name == "random") return GroupingStrategy::random;
  if (name == "vision_similarity") return GroupingStrategy::vision_similarity;
  if (name == "text_similarity") return GroupingStrategy::text_similarity;
  throw ConfigError("unknown grouping strategy '" + name + "'");
}

ConcatVariant parse_variant(const std::string& name) {
  if (name == "cosa") return ConcatVariant::cosa;
  if (name == "copy") return ConcatVariant::copy;
  if (name == "shuffle") return ConcatVariant::shuffle;
  throw ConfigError("unknown concat variant '" + name + "'");
}

void ConcatConfig::validate() const {
  if (n_c < 0) throw ConfigError("concat: n_c must be >= 0");
  if (max_position_len < 2) throw ConfigError("concat: max_position_len must be >= 2");
}

namespace {

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    dot += static_cast<double>(a[k]) * b[k];
    na += static_cast<double>(a[k]) * a[k];
    nb += static_cast<double>(b[k]) * b[k];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

}  // namespace

std::vector<std::vector<std::size_t>> group_indices(std::span<const Sample> batch, const ConcatConfig& cfg,
                                                    Rng& rng, std::span<const std::vector<float>> features) {
  cfg.validate();
  const std::size_t n = batch.size();
  const auto n_c = static_cast<std::size_t>(cfg.n_c);
  std::vector<std::vector<std::size_t>> out(n);
  if (n_c == 0) {
    for (std::size_t i = 0; i < n; ++i) out[i] = {i};
    return out;
  }
  if (n < n_c + 1) {
    throw GroupingError("group_batch: batch of " + std::to_string(n) + " cannot supply " + std::to_string(n_c) +
                        " distinct companions per anchor");
  }

  if (cfg.strategy == GroupingStrategy::random) {
    std::vector<std::size_t> others(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
      // Candidates in ascending index order, anchor excluded, then a partial
      // Fisher-Yates draw of n_c of them.
      for (std::size_t j = 0, k = 0; j < n; ++j) {
        if (j != i) others[k++] = j;
      }
      out[i].reserve(n_c + 1);
      out[i].push_back(i);
      for (std::size_t k = 0; k < n_c; ++k) {
        const std::size_t pick = k + rng.uniform_index(others.size() - k);
        std::swap(others[k], others[pick]);
        out[i].push_back(others[k]);
      }
    }
    return out;
  }

  if (features.size() != n) {
    throw ConfigError("group_batch: similarity strategy '" + to_string(cfg.strategy) +
                      "' needs one feature vector per batch element");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (features[i].size() != features[0].size() || features[i].empty()) {
      throw ConfigError("group_batch: feature vectors must be non-empty and equally sized");
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) scored.emplace_back(cosine(features[i], features[j]), j);
    }
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n_c), scored.end(),
                      [&](const auto& a, const auto& b) {
                        if (a.first != b.first) return a.first > b.first;
                        return batch[a.second].id < batch[b.second].id;
                      });
    out[i].push_back(i);
    for (std::size_t k = 0; k < n_c; ++k) out[i].push_back(scored[k].second);
  }
  return out;
}

std::vector<ConcatGroup> group_batch(std::span<const Sample> batch, const ConcatConfig& cfg, Rng& rng,
                                     const Vocabulary& vocab, std::span<const std::vector<float>> features) {
  const auto rows = group_indices(batch, cfg, rng, features);
  std::vector<ConcatGroup> groups;
  groups.reserve(rows.size());
  std::vector<const Sample*> members;
  for (const auto& row : rows) {
    members.clear();
    for (std::size_t idx : row) members.push_back(&batch[idx]);
    groups.push_back(concatenate(members, cfg, vocab));
  }
  return groups;
}

ConcatGroup concatenate(std::span<const Sample* const> members, const ConcatConfig& cfg, const Vocabulary&) {
  if (members.size() != static_cast<std::size_t>(cfg.n_c) + 1) {
    throw GroupingError("concatenate: expected " + std::to_string(cfg.n_c + 1) + " members, got " +
                        std::to_string(members.size()));
  }
  std::size_t length = 1;
  for (std::size_t k = 0; k < members.size(); ++k) {
    if (members[k]->caption.empty()) throw GroupingError("concatenate: empty caption");
    length += members[k]->caption.size() + ((cfg.insert_sep && k + 1 < members.size()) ? 1 : 0);
  }
  length += 1;
  if (length > static_cast<std::size_t>(cfg.max_position_len)) {
    throw TruncationError("concatenate: paragraph of " + std::to_string(length) +
                          " tokens exceeds max_position_len " + std::to_string(cfg.max_position_len));
  }

  ConcatGroup g;
  g.separated = cfg.insert_sep;
  g.paragraph.reserve(length);
  g.paragraph.push_back(Vocabulary::kCls);
  for (std::size_t k = 0; k < members.size(); ++k) {
    const Sample& s = *members[k];
    g.member_ids.push_back(s.id);
    g.frames.push_back(s.image);
    const int begin = static_cast<int>(g.paragraph.size());
    g.paragraph.insert(g.paragraph.end(), s.caption.begin(), s.caption.end());
    g.spans.push_back({begin, static_cast<int>(g.paragraph.size())});
    g.caption_order.push_back(static_cast<int>(k));
    if (cfg.insert_sep && k + 1 < members.size()) g.paragraph.push_back(Vocabulary::kSep);
  }
  g.paragraph.push_back(Vocabulary::kSep);
  return g;
}

ConcatGroup concatenate(std::span<const Sample> members, const ConcatConfig& cfg, const Vocabulary& vocab) {
  std::vector<const Sample*> ptrs;
  ptrs.reserve(members.size());
  for (const Sample& s : members) ptrs.push_back(&s);
  return concatenate(ptrs, cfg, vocab);
}

ConcatGroup variant_copy(const Sample& sample, const ConcatConfig& cfg, const Vocabulary& vocab) {
  if (cfg.n_c < 1) throw ConfigError("variant_copy: n_c must be >= 1");
  std::vector<const Sample*> members(static_cast<std::size_t>(cfg.n_c) + 1, &sample);
  return concatenate(members, cfg, vocab);
}

ConcatGroup variant_shuffle(const ConcatGroup& group, Rng& rng) {
  const std::size_t m = group.spans.size();
  std::vector<int> perm(m);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm.begin(), perm.end());

  ConcatGroup out;
  out.member_ids = group.member_ids;
  out.frames = group.frames;
  out.separated = group.separated;
  out.paragraph.reserve(group.paragraph.size());
  out.paragraph.push_back(Vocabulary::kCls);
  for (std::size_t k = 0; k < m; ++k) {
    const TokenSpan src = group.spans[static_cast<std::size_t>(perm[k])];
    const int begin = static_cast<int>(out.paragraph.size());
    out.paragraph.insert(out.paragraph.end(), group.paragraph.begin() + src.begin,
                         group.paragraph.begin() + src.end);
    out.spans.push_back({begin, static_cast<int>(out.paragraph.size())});
    out.caption_order.push_back(group.caption_order[static_cast<std::size_t>(perm[k])]);
    if (group.separated && k + 1 < m) out.paragraph.push_back(Vocabulary::kSep);
  }
  out.paragraph.push_back(Vocabulary::kSep);
  return out;
}

MaskedParagraph mask_tokens(std::span<const TokenId> paragraph, double rate, Rng& rng) {
  if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("mask_tokens: rate must be in (0, 1]");
  std::vector<int> maskable;
  for (std::size_t i = 0; i < paragraph.size(); ++i) {
    if (!Vocabulary::is_special(paragraph[i])) maskable.push_back(static_cast<int>(i));
  }
  if (maskable.empty()) throw MaskingError("mask_tokens: paragraph has no maskable tokens");
  // Stochastic rounding keeps the expected fraction at exactly `rate`.
  double expected = rate * static_cast<double>(maskable.size());
  if (std::abs(expected - std::round(expected)) < 1e-9) expected = std::round(expected);
  const double whole = std::floor(expected);
  const bool extra = rng.uniform01() < expected - whole;
  const auto count = std::clamp<std::size_t>(static_cast<std::size_t>(whole) + (extra ? 1 : 0), 1, maskable.size());

  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t pick = k + rng.uniform_index(maskable.size() - k);
    std::swap(maskable[k], maskable[pick]);
  }
  MaskedParagraph out;
  out.rate = rate;
  out.masked_positions.assign(maskable.begin(), maskable.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(out.masked_positions.begin(), out.masked_positions.end());
  out.input_tokens.assign(paragraph.begin(), paragraph.end());
  out.target_tokens.reserve(count);
  for (int pos : out.masked_positions) {
    out.target_tokens.push_back(paragraph[static_cast<std::size_t>(pos)]);
    out.input_tokens[static_cast<std::size_t>(pos)] = Vocabulary::kMask;
  }
  return out;
}

nlohmann::json dump_groups(std::span<const ConcatGroup> groups, const Vocabulary& vocab) {
  nlohmann::json out = nlohmann::json::array();
  for (const ConcatGroup& g : groups) {
    nlohmann::json spans = nlohmann::json::array();
    for (const TokenSpan& s : g.spans) spans.push_back({s.begin, s.end});
    out.push_back({{"member_ids", g.member_ids},
                   {"paragraph", detokenize(g.paragraph, vocab)},
                   {"spans", spans},
                   {"caption_order", g.caption_order}});
  }
  return out;
}

}  // namespace cosa
