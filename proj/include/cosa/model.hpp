#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cosa/autograd.hpp"
#include "cosa/corpus.hpp"

namespace cosa {

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_vision_layers = 2;
  int n_text_layers = 2;
  int patch_size = 8;
  int image_size = 32;
  int channels = 3;
  int max_position_len = 64;
  int max_frames = 8;
  int vocab_size = 0;  // filled from the corpus vocabulary
  int itm_head_hidden = 64;
  int ffn_mult = 4;
  double temperature_init = 0.07;
  double init_std = 0.02;
  /// Video global = mean of projected frame [CLS] features (true) or the
  /// projection of the mean [CLS] feature (false).
  bool project_then_mean = true;

  int patches_per_side() const { return image_size / patch_size; }
  int frame_len() const { return 1 + patches_per_side() * patches_per_side(); }
  int patch_dim() const { return patch_size * patch_size * channels; }
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);  // rejects unknown keys
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class TextMode { unimodal, cross_bidirectional, cross_causal };

template <typename T>
struct LinearParams {
  ag::Param<T> weight;  // in x out
  ag::Param<T> bias;    // 1 x out
};

template <typename T>
struct NormParams {
  ag::Param<T> gamma;
  ag::Param<T> beta;
};

template <typename T>
struct AttentionParams {
  LinearParams<T> query, key, value, out;
};

template <typename T>
struct FeedForwardParams {
  LinearParams<T> up, down;
};

template <typename T>
struct VisionBlockParams {
  NormParams<T> norm_attn;
  AttentionParams<T> attn;
  NormParams<T> norm_ffn;
  FeedForwardParams<T> ffn;
};

/// Pre-norm text block: self-attention, cross-attention (skipped in unimodal
/// mode), feed-forward.
template <typename T>
struct TextBlockParams {
  NormParams<T> norm_self;
  AttentionParams<T> self_attn;
  NormParams<T> norm_cross;
  AttentionParams<T> cross_attn;
  NormParams<T> norm_ffn;
  FeedForwardParams<T> ffn;
};

template <typename T>
struct ModelParams {
  LinearParams<T> patch_embed;
  ag::Param<T> vision_cls;
  ag::Param<T> vision_pos;
  std::vector<VisionBlockParams<T>> vision_blocks;
  NormParams<T> vision_norm;
  ag::Param<T> temporal;  // max_frames x d_model
  ag::Param<T> token_embed;
  ag::Param<T> text_pos;
  std::vector<TextBlockParams<T>> text_blocks;
  NormParams<T> text_norm;
  // Token prediction head shared by masked and generative modeling; the output
  // projection is tied to token_embed.
  LinearParams<T> lm_transform;
  NormParams<T> lm_norm;
  ag::Param<T> lm_bias;
  LinearParams<T> itm_hidden;
  LinearParams<T> itm_out;
  LinearParams<T> vision_proj;
  LinearParams<T> text_proj;
  ag::Param<T> temperature;  // 1 x 1

  /// Calls f(name, param) for every tensor in a fixed order.
  template <class F>
  void visit(F&& f);
  template <class F>
  void visit(F&& f) const;
};

/// One text sequence of a packed forward pass.
struct TextSequence {
  std::span<const TokenId> tokens;
  bool causal = false;
  int memory_begin = 0;  // rows of the visual memory this sequence attends to
  int memory_len = 0;
};

template <typename T>
struct VisualMemory {
  ag::Var<T> rows;
  std::vector<ag::Var<T>> keys;    // per text layer
  std::vector<ag::Var<T>> values;  // per text layer
};

template <typename T>
struct TextOutput {
  ag::Var<T> hidden;         // packed final hidden states
  std::vector<int> offsets;  // first row of each sequence
  std::vector<int> lengths;
};

/// Packed visual sequences of several pseudo videos.
template <typename T>
struct VideoBatch {
  ag::Var<T> sequence;           // frame features + temporal embeddings, videos back to back
  std::vector<int> offsets;      // first row of each video
  std::vector<int> frame_counts;
  ag::Var<T> cls_rows;           // per frame [CLS] row (with temporal embedding), videos back to back
};

template <typename T>
class Model {
 public:
  using Mat = ag::Matrix<T>;

  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ModelParams<T>& params() { return params_; }
  const ModelParams<T>& params() const { return params_; }
  std::size_t parameter_count() const;
  void zero_grad() const;

  // -- packed building blocks -------------------------------------------------

  /// Per-image token features, images back to back (frame_len rows each).
  ag::Var<T> encode_images(ag::Tape<T>& tape, std::span<const Image* const> images) const;

  /// Gathers frame features into pseudo videos: video v, frame t uses the rows
  /// of image frames[v][t] plus temporal embedding t.
  VideoBatch<T> assemble_videos(ag::Tape<T>& tape, ag::Var<T> image_features,
                                const std::vector<std::vector<int>>& frames) const;

  /// Contrastive global of each video (unnormalized).
  ag::Var<T> video_globals(ag::Tape<T>& tape, const VideoBatch<T>& videos) const;

  VisualMemory<T> prepare_memory(ag::Tape<T>& tape, ag::Var<T> rows) const;

  /// Packed text forward. With memory == nullptr every sequence runs unimodal
  /// (cross-attention skipped); otherwise every sequence cross-attends to its
  /// memory slice. [PAD] keys are masked.
  TextOutput<T> text_forward(ag::Tape<T>& tape, std::span<const TextSequence> sequences,
                             const VisualMemory<T>* memory) const;

  ag::Var<T> token_logits(ag::Tape<T>& tape, ag::Var<T> hidden_rows) const;
  ag::Var<T> itm_logits(ag::Tape<T>& tape, ag::Var<T> cls_rows) const;
  ag::Var<T> text_globals(ag::Tape<T>& tape, ag::Var<T> cls_rows) const;
  ag::Var<T> temperature(ag::Tape<T>& tape) const { return tape.param(params_.temperature); }

  // -- single-item operations (no gradient) -----------------------------------

  struct ImageEncoding {
    Mat features;  // frame_len x d_model, row 0 is [CLS]
    Mat cls;       // 1 x d_model
  };
  ImageEncoding encode_image(const Image& image) const;

  struct VideoEncoding {
    Mat visual_sequence;  // frames * frame_len x d_model
    Mat video_global;     // 1 x d_model
  };
  VideoEncoding encode_pseudo_video(std::span<const Image> frames) const;

  struct TextEncoding {
    Mat hidden;  // len x d_model
    Mat cls;     // 1 x d_model
    Mat logits;  // len x vocab_size
  };
  /// `visual_sequence` must be present iff mode != unimodal.
  TextEncoding text_forward(std::span<const TokenId> tokens, TextMode mode,
                            const std::optional<Mat>& visual_sequence) const;

  /// 2 logits: [non-match, match].
  Mat itm_score(std::span<const TokenId> paragraph, const Mat& visual_sequence) const;

 private:
  ag::Var<T> attention_block(ag::Tape<T>& tape, const AttentionParams<T>& p, ag::Var<T> x_norm,
                             std::vector<ag::AttentionSegment> segments, std::vector<std::uint8_t> key_valid) const;
  ag::Var<T> feed_forward(ag::Tape<T>& tape, const FeedForwardParams<T>& p, ag::Var<T> x) const;
  ag::Var<T> lin(ag::Tape<T>& tape, const LinearParams<T>& p, ag::Var<T> x) const;
  ag::Var<T> norm(ag::Tape<T>& tape, const NormParams<T>& p, ag::Var<T> x) const;

  ModelConfig config_;
  ModelParams<T> params_;
};

// ---------------------------------------------------------------------------

namespace detail {

template <class L, class F>
void visit_linear(const std::string& prefix, L& p, F& f) {
  f(prefix + ".weight", p.weight);
  f(prefix + ".bias", p.bias);
}

template <class N, class F>
void visit_norm(const std::string& prefix, N& p, F& f) {
  f(prefix + ".gamma", p.gamma);
  f(prefix + ".beta", p.beta);
}

template <class A, class F>
void visit_attention(const std::string& prefix, A& p, F& f) {
  visit_linear(prefix + ".query", p.query, f);
  visit_linear(prefix + ".key", p.key, f);
  visit_linear(prefix + ".value", p.value, f);
  visit_linear(prefix + ".out", p.out, f);
}

template <class P, class F>
void visit_params(P& p, F& f) {
  visit_linear("vision.patch_embed", p.patch_embed, f);
  f("vision.cls", p.vision_cls);
  f("vision.pos", p.vision_pos);
  for (std::size_t i = 0; i < p.vision_blocks.size(); ++i) {
    const std::string b = "vision.blocks." + std::to_string(i);
    auto& blk = p.vision_blocks[i];
    visit_norm(b + ".norm_attn", blk.norm_attn, f);
    visit_attention(b + ".attn", blk.attn, f);
    visit_norm(b + ".norm_ffn", blk.norm_ffn, f);
    visit_linear(b + ".ffn.up", blk.ffn.up, f);
    visit_linear(b + ".ffn.down", blk.ffn.down, f);
  }
  visit_norm("vision.norm", p.vision_norm, f);
  f("temporal", p.temporal);
  f("text.token_embed", p.token_embed);
  f("text.pos", p.text_pos);
  for (std::size_t i = 0; i < p.text_blocks.size(); ++i) {
    const std::string b = "text.blocks." + std::to_string(i);
    auto& blk = p.text_blocks[i];
    visit_norm(b + ".norm_self", blk.norm_self, f);
    visit_attention(b + ".self_attn", blk.self_attn, f);
    visit_norm(b + ".norm_cross", blk.norm_cross, f);
    visit_attention(b + ".cross_attn", blk.cross_attn, f);
    visit_norm(b + ".norm_ffn", blk.norm_ffn, f);
    visit_linear(b + ".ffn.up", blk.ffn.up, f);
    visit_linear(b + ".ffn.down", blk.ffn.down, f);
  }
  visit_norm("text.norm", p.text_norm, f);
  visit_linear("head.lm.transform", p.lm_transform, f);
  visit_norm("head.lm.norm", p.lm_norm, f);
  f("head.lm.bias", p.lm_bias);
  visit_linear("head.itm.hidden", p.itm_hidden, f);
  visit_linear("head.itm.out", p.itm_out, f);
  visit_linear("head.vision_proj", p.vision_proj, f);
  visit_linear("head.text_proj", p.text_proj, f);
  f("temperature", p.temperature);
}

}  // namespace detail

template <typename T>
template <class F>
void ModelParams<T>::visit(F&& f) {
  detail::visit_params(*this, f);
}

template <typename T>
template <class F>
void ModelParams<T>::visit(F&& f) const {
  detail::visit_params(*this, f);
}

extern template class Model<float>;
extern template class Model<double>;

}  // namespace cosa
