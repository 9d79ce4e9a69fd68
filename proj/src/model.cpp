#include "cosa/model.hpp"

#include <cmath>
#include <set>

#include "cosa/errors.hpp"
#include "cosa/rng.hpp"

namespace cosa {

using nlohmann::json;

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model config: " + what);
  };
  require(d_model > 0 && n_heads > 0 && d_model % n_heads == 0, "d_model must be a positive multiple of n_heads");
  require(n_vision_layers >= 1 && n_text_layers >= 1, "layer counts must be >= 1");
  require(patch_size > 0 && image_size > 0 && image_size % patch_size == 0, "image_size must be a multiple of patch_size");
  require(channels >= 1, "channels must be >= 1");
  require(max_position_len >= 2, "max_position_len must be >= 2");
  require(max_frames >= 1, "max_frames must be >= 1");
  require(vocab_size > Vocabulary::kNumReserved, "vocab_size must exceed the reserved tokens");
  require(itm_head_hidden >= 1 && ffn_mult >= 1, "head sizes must be positive");
  require(temperature_init > 0.0, "temperature_init must be positive");
  require(init_std > 0.0, "init_std must be positive");
}

json ModelConfig::to_json() const {
  return {{"d_model", d_model},
          {"n_heads", n_heads},
          {"n_vision_layers", n_vision_layers},
          {"n_text_layers", n_text_layers},
          {"patch_size", patch_size},
          {"image_size", image_size},
          {"channels", channels},
          {"max_position_len", max_position_len},
          {"max_frames", max_frames},
          {"vocab_size", vocab_size},
          {"itm_head_hidden", itm_head_hidden},
          {"ffn_mult", ffn_mult},
          {"temperature_init", temperature_init},
          {"init_std", init_std},
          {"project_then_mean", project_then_mean}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model: expected an object");
  ModelConfig c;
  const json defaults = c.to_json();
  for (const auto& [key, _] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError("model: unknown key '" + key + "'");
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("d_model", c.d_model);
    get("n_heads", c.n_heads);
    get("n_vision_layers", c.n_vision_layers);
    get("n_text_layers", c.n_text_layers);
    get("patch_size", c.patch_size);
    get("image_size", c.image_size);
    get("channels", c.channels);
    get("max_position_len", c.max_position_len);
    get("max_frames", c.max_frames);
    get("vocab_size", c.vocab_size);
    get("itm_head_hidden", c.itm_head_hidden);
    get("ffn_mult", c.ffn_mult);
    get("temperature_init", c.temperature_init);
    get("init_std", c.init_std);
    get("project_then_mean", c.project_then_mean);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return c;
}

namespace {

template <typename T>
void init_normal(ag::Param<T>& p, int rows, int cols, double std, Rng& rng) {
  p.value.resize(rows, cols);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) {
    double x = rng.normal();
    while (std::abs(x) > 2.0) x = rng.normal();  // truncated at two standard deviations
    p.value.data()[i] = static_cast<T>(x * std);
  }
}

template <typename T>
void init_const(ag::Param<T>& p, int rows, int cols, double value) {
  p.value.setConstant(rows, cols, static_cast<T>(value));
  p.decay = false;
}

template <typename T>
void init_linear(LinearParams<T>& p, int in, int out, double std, Rng& rng) {
  init_normal(p.weight, in, out, std, rng);
  init_const(p.bias, 1, out, 0.0);
}

template <typename T>
void init_norm(NormParams<T>& p, int d) {
  init_const(p.gamma, 1, d, 1.0);
  init_const(p.beta, 1, d, 0.0);
}

template <typename T>
void init_attention(AttentionParams<T>& p, int d, double std, Rng& rng) {
  init_linear(p.query, d, d, std, rng);
  init_linear(p.key, d, d, std, rng);
  init_linear(p.value, d, d, std, rng);
  init_linear(p.out, d, d, std, rng);
}

template <typename T>
void init_embedding(ag::Param<T>& p, int rows, int cols, double std, Rng& rng) {
  init_normal(p, rows, cols, std, rng);
  p.decay = false;
}

}  // namespace

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const int d = config_.d_model;
  const int ffn = d * config_.ffn_mult;
  const double std = config_.init_std;
  Rng rng(seed);
  ModelParams<T>& p = params_;

  init_linear(p.patch_embed, config_.patch_dim(), d, std, rng);
  init_embedding(p.vision_cls, 1, d, std, rng);
  init_embedding(p.vision_pos, config_.frame_len(), d, std, rng);
  p.vision_blocks.resize(static_cast<std::size_t>(config_.n_vision_layers));
  for (auto& b : p.vision_blocks) {
    init_norm(b.norm_attn, d);
    init_attention(b.attn, d, std, rng);
    init_norm(b.norm_ffn, d);
    init_linear(b.ffn.up, d, ffn, std, rng);
    init_linear(b.ffn.down, ffn, d, std, rng);
  }
  init_norm(p.vision_norm, d);
  init_embedding(p.temporal, config_.max_frames, d, std, rng);
  init_embedding(p.token_embed, config_.vocab_size, d, std, rng);
  init_embedding(p.text_pos, config_.max_position_len, d, std, rng);
  p.text_blocks.resize(static_cast<std::size_t>(config_.n_text_layers));
  for (auto& b : p.text_blocks) {
    init_norm(b.norm_self, d);
    init_attention(b.self_attn, d, std, rng);
    init_norm(b.norm_cross, d);
    init_attention(b.cross_attn, d, std, rng);
    init_norm(b.norm_ffn, d);
    init_linear(b.ffn.up, d, ffn, std, rng);
    init_linear(b.ffn.down, ffn, d, std, rng);
  }
  init_norm(p.text_norm, d);
  init_linear(p.lm_transform, d, d, std, rng);
  init_norm(p.lm_norm, d);
  init_const(p.lm_bias, 1, config_.vocab_size, 0.0);
  init_linear(p.itm_hidden, d, config_.itm_head_hidden, std, rng);
  init_linear(p.itm_out, config_.itm_head_hidden, 2, std, rng);
  init_linear(p.vision_proj, d, d, std, rng);
  init_linear(p.text_proj, d, d, std, rng);
  init_const(p.temperature, 1, 1, config_.temperature_init);
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  params_.visit([&](const std::string&, const ag::Param<T>& p) { n += static_cast<std::size_t>(p.value.size()); });
  return n;
}

template <typename T>
void Model<T>::zero_grad() const {
  params_.visit([](const std::string&, const ag::Param<T>& p) { p.zero_grad(); });
}

template <typename T>
ag::Var<T> Model<T>::lin(ag::Tape<T>& tape, const LinearParams<T>& p, ag::Var<T> x) const {
  return ag::linear(x, tape.param(p.weight), tape.param(p.bias));
}

template <typename T>
ag::Var<T> Model<T>::norm(ag::Tape<T>& tape, const NormParams<T>& p, ag::Var<T> x) const {
  return ag::layer_norm(x, tape.param(p.gamma), tape.param(p.beta));
}

template <typename T>
ag::Var<T> Model<T>::attention_block(ag::Tape<T>& tape, const AttentionParams<T>& p, ag::Var<T> x_norm,
                                     std::vector<ag::AttentionSegment> segments,
                                     std::vector<std::uint8_t> key_valid) const {
  auto q = lin(tape, p.query, x_norm);
  auto k = lin(tape, p.key, x_norm);
  auto v = lin(tape, p.value, x_norm);
  auto a = ag::attention(q, k, v, std::move(segments), config_.n_heads, std::move(key_valid));
  return lin(tape, p.out, a);
}

template <typename T>
ag::Var<T> Model<T>::feed_forward(ag::Tape<T>& tape, const FeedForwardParams<T>& p, ag::Var<T> x) const {
  return lin(tape, p.down, ag::gelu(lin(tape, p.up, x)));
}

template <typename T>
ag::Var<T> Model<T>::encode_images(ag::Tape<T>& tape, std::span<const Image* const> images) const {
  if (images.empty()) throw ShapeError("encode_images: no images");
  const int ps = config_.patch_size;
  const int side = config_.patches_per_side();
  const int per_image = side * side;
  const int frame_len = config_.frame_len();
  const int n = static_cast<int>(images.size());

  Mat patches(static_cast<Eigen::Index>(n) * per_image, config_.patch_dim());
  for (int m = 0; m < n; ++m) {
    const Image& img = *images[static_cast<std::size_t>(m)];
    if (img.height != config_.image_size || img.width != config_.image_size || img.channels != config_.channels) {
      throw ShapeError("encode_images: image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                       "x" + std::to_string(img.channels) + ", model expects " + std::to_string(config_.image_size) +
                       "x" + std::to_string(config_.image_size) + "x" + std::to_string(config_.channels));
    }
    for (int pr = 0; pr < side; ++pr) {
      for (int pc = 0; pc < side; ++pc) {
        T* row = patches.row(static_cast<Eigen::Index>(m) * per_image + pr * side + pc).data();
        int col = 0;
        for (int y = 0; y < ps; ++y) {
          for (int x = 0; x < ps; ++x) {
            for (int c = 0; c < config_.channels; ++c) row[col++] = static_cast<T>(img.at(pr * ps + y, pc * ps + x, c));
          }
        }
      }
    }
  }

  auto embedded = lin(tape, params_.patch_embed, tape.constant(std::move(patches)));
  const ag::Var<T> parts[] = {tape.param(params_.vision_cls), embedded};
  auto tokens = ag::concat_rows<T>(parts);
  std::vector<int> order, pos;
  order.reserve(static_cast<std::size_t>(n) * frame_len);
  pos.reserve(order.capacity());
  std::vector<ag::AttentionSegment> segments;
  for (int m = 0; m < n; ++m) {
    order.push_back(0);
    pos.push_back(0);
    for (int k = 0; k < per_image; ++k) {
      order.push_back(1 + m * per_image + k);
      pos.push_back(1 + k);
    }
    segments.push_back({m * frame_len, frame_len, m * frame_len, frame_len, false});
  }
  auto x = ag::add(ag::gather_rows(tokens, std::move(order)), ag::gather_rows(tape.param(params_.vision_pos), std::move(pos)));
  for (const auto& b : params_.vision_blocks) {
    x = ag::add(x, attention_block(tape, b.attn, norm(tape, b.norm_attn, x), segments, {}));
    x = ag::add(x, feed_forward(tape, b.ffn, norm(tape, b.norm_ffn, x)));
  }
  return norm(tape, params_.vision_norm, x);
}

template <typename T>
VideoBatch<T> Model<T>::assemble_videos(ag::Tape<T>& tape, ag::Var<T> image_features,
                                        const std::vector<std::vector<int>>& frames) const {
  const int frame_len = config_.frame_len();
  const auto n_images = static_cast<int>(image_features.rows() / frame_len);
  VideoBatch<T> out;
  std::vector<int> rows, temporal, cls;
  int at = 0;
  for (const auto& video : frames) {
    if (video.empty()) throw ShapeError("assemble_videos: video without frames");
    if (static_cast<int>(video.size()) > config_.max_frames) {
      throw ShapeError("assemble_videos: " + std::to_string(video.size()) + " frames exceed max_frames " +
                       std::to_string(config_.max_frames));
    }
    out.offsets.push_back(at);
    out.frame_counts.push_back(static_cast<int>(video.size()));
    for (std::size_t t = 0; t < video.size(); ++t) {
      const int m = video[t];
      if (m < 0 || m >= n_images) throw ShapeError("assemble_videos: image index out of range");
      cls.push_back(at);
      for (int r = 0; r < frame_len; ++r) {
        rows.push_back(m * frame_len + r);
        temporal.push_back(static_cast<int>(t));
      }
      at += frame_len;
    }
  }
  out.sequence = ag::add(ag::gather_rows(image_features, std::move(rows)),
                         ag::gather_rows(tape.param(params_.temporal), std::move(temporal)));
  out.cls_rows = ag::gather_rows(out.sequence, std::move(cls));
  return out;
}

template <typename T>
ag::Var<T> Model<T>::video_globals(ag::Tape<T>& tape, const VideoBatch<T>& videos) const {
  if (config_.project_then_mean) {
    return ag::mean_row_groups(lin(tape, params_.vision_proj, videos.cls_rows), videos.frame_counts);
  }
  return lin(tape, params_.vision_proj, ag::mean_row_groups(videos.cls_rows, videos.frame_counts));
}

template <typename T>
VisualMemory<T> Model<T>::prepare_memory(ag::Tape<T>& tape, ag::Var<T> rows) const {
  VisualMemory<T> mem;
  mem.rows = rows;
  for (const auto& b : params_.text_blocks) {
    mem.keys.push_back(lin(tape, b.cross_attn.key, rows));
    mem.values.push_back(lin(tape, b.cross_attn.value, rows));
  }
  return mem;
}

template <typename T>
TextOutput<T> Model<T>::text_forward(ag::Tape<T>& tape, std::span<const TextSequence> sequences,
                                     const VisualMemory<T>* memory) const {
  if (sequences.empty()) throw ShapeError("text_forward: no sequences");
  TextOutput<T> out;
  std::vector<int> ids, pos;
  std::vector<std::uint8_t> key_valid;
  bool any_pad = false;
  std::vector<ag::AttentionSegment> self_segments, cross_segments;
  int at = 0;
  for (const TextSequence& s : sequences) {
    const int len = static_cast<int>(s.tokens.size());
    if (len == 0) throw ShapeError("text_forward: empty sequence");
    if (len > config_.max_position_len) {
      throw TruncationError("text_forward: sequence of " + std::to_string(len) + " tokens exceeds max_position_len " +
                            std::to_string(config_.max_position_len));
    }
    out.offsets.push_back(at);
    out.lengths.push_back(len);
    for (int i = 0; i < len; ++i) {
      const TokenId tok = s.tokens[static_cast<std::size_t>(i)];
      if (tok >= config_.vocab_size) throw ShapeError("text_forward: token id outside vocabulary");
      ids.push_back(tok);
      pos.push_back(i);
      key_valid.push_back(tok != Vocabulary::kPad);
      any_pad = any_pad || tok == Vocabulary::kPad;
    }
    self_segments.push_back({at, len, at, len, s.causal});
    if (memory) {
      if (s.memory_len <= 0 || s.memory_begin < 0 || s.memory_begin + s.memory_len > memory->rows.rows()) {
        throw ShapeError("text_forward: memory slice out of range");
      }
      cross_segments.push_back({at, len, s.memory_begin, s.memory_len, false});
    }
    at += len;
  }
  if (!any_pad) key_valid.clear();

  auto x = ag::add(ag::gather_rows(tape.param(params_.token_embed), std::move(ids)),
                   ag::gather_rows(tape.param(params_.text_pos), std::move(pos)));
  for (std::size_t l = 0; l < params_.text_blocks.size(); ++l) {
    const auto& b = params_.text_blocks[l];
    x = ag::add(x, attention_block(tape, b.self_attn, norm(tape, b.norm_self, x), self_segments, key_valid));
    if (memory) {
      auto q = lin(tape, b.cross_attn.query, norm(tape, b.norm_cross, x));
      auto a = ag::attention(q, memory->keys[l], memory->values[l], cross_segments, config_.n_heads);
      x = ag::add(x, lin(tape, b.cross_attn.out, a));
    }
    x = ag::add(x, feed_forward(tape, b.ffn, norm(tape, b.norm_ffn, x)));
  }
  out.hidden = norm(tape, params_.text_norm, x);
  return out;
}

template <typename T>
ag::Var<T> Model<T>::token_logits(ag::Tape<T>& tape, ag::Var<T> hidden_rows) const {
  auto h = norm(tape, params_.lm_norm, ag::gelu(lin(tape, params_.lm_transform, hidden_rows)));
  return ag::add_row(ag::matmul_nt(h, tape.param(params_.token_embed)), tape.param(params_.lm_bias));
}

template <typename T>
ag::Var<T> Model<T>::itm_logits(ag::Tape<T>& tape, ag::Var<T> cls_rows) const {
  return lin(tape, params_.itm_out, ag::gelu(lin(tape, params_.itm_hidden, cls_rows)));
}

template <typename T>
ag::Var<T> Model<T>::text_globals(ag::Tape<T>& tape, ag::Var<T> cls_rows) const {
  return lin(tape, params_.text_proj, cls_rows);
}

template <typename T>
typename Model<T>::ImageEncoding Model<T>::encode_image(const Image& image) const {
  ag::Tape<T> tape(false);
  const Image* ptr = &image;
  auto f = encode_images(tape, std::span<const Image* const>(&ptr, 1));
  ImageEncoding out;
  out.features = f.value();
  out.cls = f.value().topRows(1);
  return out;
}

template <typename T>
typename Model<T>::VideoEncoding Model<T>::encode_pseudo_video(std::span<const Image> frames) const {
  if (frames.empty() || static_cast<int>(frames.size()) > config_.max_frames) {
    throw ShapeError("encode_pseudo_video: need 1.." + std::to_string(config_.max_frames) + " frames, got " +
                     std::to_string(frames.size()));
  }
  ag::Tape<T> tape(false);
  std::vector<const Image*> ptrs;
  std::vector<int> order;
  for (const Image& f : frames) {
    order.push_back(static_cast<int>(ptrs.size()));
    ptrs.push_back(&f);
  }
  auto features = encode_images(tape, ptrs);
  auto videos = assemble_videos(tape, features, {order});
  VideoEncoding out;
  out.visual_sequence = videos.sequence.value();
  out.video_global = video_globals(tape, videos).value();
  return out;
}

template <typename T>
typename Model<T>::TextEncoding Model<T>::text_forward(std::span<const TokenId> tokens, TextMode mode,
                                                       const std::optional<Mat>& visual_sequence) const {
  const bool cross = mode != TextMode::unimodal;
  if (cross != visual_sequence.has_value()) {
    throw ShapeError(cross ? "text_forward: cross-modal mode needs a visual sequence"
                           : "text_forward: unimodal mode takes no visual sequence");
  }
  if (cross && (visual_sequence->rows() == 0 || visual_sequence->cols() != config_.d_model)) {
    throw ShapeError("text_forward: visual sequence must be non-empty with d_model columns");
  }
  ag::Tape<T> tape(false);
  std::optional<VisualMemory<T>> memory;
  TextSequence seq{tokens, mode == TextMode::cross_causal, 0, 0};
  if (cross) {
    memory = prepare_memory(tape, tape.constant(*visual_sequence));
    seq.memory_len = static_cast<int>(visual_sequence->rows());
  }
  auto out = text_forward(tape, std::span<const TextSequence>(&seq, 1), memory ? &*memory : nullptr);
  TextEncoding enc;
  enc.hidden = out.hidden.value();
  enc.cls = enc.hidden.topRows(1);
  enc.logits = token_logits(tape, out.hidden).value();
  return enc;
}

template <typename T>
typename Model<T>::Mat Model<T>::itm_score(std::span<const TokenId> paragraph, const Mat& visual_sequence) const {
  if (visual_sequence.rows() == 0 || visual_sequence.cols() != config_.d_model) {
    throw ShapeError("itm_score: visual sequence must be non-empty with d_model columns");
  }
  ag::Tape<T> tape(false);
  auto memory = prepare_memory(tape, tape.constant(visual_sequence));
  TextSequence seq{paragraph, false, 0, static_cast<int>(visual_sequence.rows())};
  auto out = text_forward(tape, std::span<const TextSequence>(&seq, 1), &memory);
  return itm_logits(tape, ag::gather_rows(out.hidden, {0})).value();
}

template class Model<float>;
template class Model<double>;

}  // namespace cosa
