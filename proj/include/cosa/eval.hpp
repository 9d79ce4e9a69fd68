#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cosa/concat.hpp"
#include "cosa/model.hpp"
#include "cosa/train_config.hpp"

namespace cosa {

struct RetrievalTask {
  std::vector<std::vector<TokenId>> queries;     // framed paragraphs
  std::vector<std::vector<Image>> candidates;    // pseudo videos
  std::vector<int> gold;                         // query -> candidate
  int rerank_k = 8;
};

struct CaptionTask {
  std::vector<std::vector<Image>> inputs;
  std::vector<std::vector<TokenId>> gold;        // unframed token sequences
  std::vector<std::vector<TokenSpan>> spans;     // per item caption spans in gold (may be empty)
  int max_len = 0;                               // framed decode limit
};

struct MetricsRecord {
  int step = 0;
  std::string phase;  // train | eval
  std::string name;
  double value = 0.0;
  std::uint64_t seed = 0;
  std::string mode;

  nlohmann::json to_json() const;
  static MetricsRecord from_json(const nlohmann::json& j);  // throws DataError
  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

using Ranking = std::vector<int>;

/// Stage-1 cosine similarity of every (query, candidate) pair.
template <typename T>
ag::Matrix<double> itc_similarity(const Model<T>& model, const RetrievalTask& task);

/// Stage 1 ranks by contrastive similarity, stage 2 reorders the top
/// rerank_k by the ITM match logit. Ties go to the lower candidate index.
template <typename T>
std::vector<Ranking> retrieve(const Model<T>& model, const RetrievalTask& task);

/// Fraction of queries whose gold candidate is within the top k.
double recall_at_k(std::span<const Ranking> rankings, std::span<const int> gold, int k);

/// Greedy decoding under the causal cross-modal pass. Each step feeds the
/// prefix plus a [MASK] slot and takes the argmax at the slot ([PAD], [CLS]
/// and [MASK] excluded). Stops at [SEP] or when the framed sequence reaches
/// max_len. The result excludes [CLS] and the final [SEP].
template <typename T>
std::vector<TokenId> generate(const Model<T>& model, std::span<const Image> frames, int max_len);

/// Lockstep batched version of generate(); identical outputs.
template <typename T>
std::vector<std::vector<TokenId>> generate_batch(const Model<T>& model, std::span<const std::vector<Image>> inputs,
                                                 int max_len);

struct CaptionScores {
  double exact_match = 0.0;
  double token_acc = 0.0;
};
CaptionScores caption_metrics(std::span<const TokenId> pred, std::span<const TokenId> gold);

/// Fraction of gold spans reproduced exactly at the same positions of `pred`.
double span_order_accuracy(std::span<const TokenId> pred, std::span<const TokenId> gold,
                           std::span<const TokenSpan> spans);

struct EvalSuite {
  RetrievalTask retrieval;
  CaptionTask story;     // multi-frame pseudo videos, gold = in-order caption concatenation
  CaptionTask captions;  // single images
};

/// Deterministic evaluation sets from the held-out samples, concatenated with
/// a fixed evaluation seed.
EvalSuite build_eval_suite(std::span<const Sample> heldout, const Vocabulary& vocab, const EvalSpec& spec,
                           int max_position_len);

/// Metric name -> value: R@1, R@5, R@10, itc_R@1, story_exact_match,
/// story_token_acc, span_acc, caption_exact_match, caption_token_acc.
template <typename T>
std::map<std::string, double> evaluate(const Model<T>& model, const EvalSuite& suite);

}  // namespace cosa
