#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cosa/corpus.hpp"
#include "cosa/rng.hpp"

namespace cosa {

enum class GroupingStrategy { random, vision_similarity, text_similarity };
enum class ConcatVariant { cosa, copy, shuffle };

std::string to_string(GroupingStrategy s);
std::string to_string(ConcatVariant v);
GroupingStrategy parse_strategy(const std::string& name);  // throws ConfigError
ConcatVariant parse_variant(const std::string& name);

struct ConcatConfig {
  int n_c = 3;  // companions per anchor; 0 degenerates to single-sample training
  GroupingStrategy strategy = GroupingStrategy::random;
  ConcatVariant variant = ConcatVariant::cosa;
  bool insert_sep = false;
  int max_position_len = 64;

  void validate() const;
};

struct TokenSpan {
  int begin = 0;  // inclusive
  int end = 0;    // exclusive
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

/// One pseudo video-paragraph item: frames in member order, paragraph framed
/// as [CLS] caption... [SEP].
struct ConcatGroup {
  std::vector<SampleId> member_ids;
  std::vector<Image> frames;
  std::vector<TokenId> paragraph;
  std::vector<TokenSpan> spans;   // span k holds the caption of frame caption_order[k]
  std::vector<int> caption_order;
  bool separated = false;         // [SEP] between captions

  std::size_t size() const { return member_ids.size(); }
};

struct MaskedParagraph {
  std::vector<TokenId> input_tokens;
  std::vector<TokenId> target_tokens;  // aligned with masked_positions
  std::vector<int> masked_positions;   // ascending
  double rate = 0.0;
};

/// Batch-relative member indices for every anchor: row i starts with i and is
/// followed by n_c distinct other indices. `features` (one vector per batch
/// element) is required for the similarity strategies.
std::vector<std::vector<std::size_t>> group_indices(std::span<const Sample> batch, const ConcatConfig& cfg,
                                                    Rng& rng,
                                                    std::span<const std::vector<float>> features = {});

std::vector<ConcatGroup> group_batch(std::span<const Sample> batch, const ConcatConfig& cfg, Rng& rng,
                                     const Vocabulary& vocab,
                                     std::span<const std::vector<float>> features = {});

ConcatGroup concatenate(std::span<const Sample* const> members, const ConcatConfig& cfg, const Vocabulary& vocab);
ConcatGroup concatenate(std::span<const Sample> members, const ConcatConfig& cfg, const Vocabulary& vocab);

ConcatGroup variant_copy(const Sample& sample, const ConcatConfig& cfg, const Vocabulary& vocab);

/// Permutes the caption segments uniformly at random; frames stay in place.
ConcatGroup variant_shuffle(const ConcatGroup& group, Rng& rng);

/// Replaces rate * maskable uniformly chosen non-special tokens with [MASK].
/// A fractional count is rounded up with probability equal to its fraction
/// (at least one token is always masked).
MaskedParagraph mask_tokens(std::span<const TokenId> paragraph, double rate, Rng& rng);

/// Structured dump of a concatenated batch for inspection.
nlohmann::json dump_groups(std::span<const ConcatGroup> groups, const Vocabulary& vocab);

}  // namespace cosa
