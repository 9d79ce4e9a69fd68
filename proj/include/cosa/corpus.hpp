#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cosa/rng.hpp"

namespace cosa {

using TokenId = std::uint16_t;
using SampleId = std::uint64_t;

/// Dense H x W x C image, row-major with channels innermost, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool same_shape(const Image& other) const {
    return height == other.height && width == other.width && channels == other.channels;
  }
  friend bool operator==(const Image&, const Image&) = default;
};

struct ColorDef {
  std::string name;
  float r = 0, g = 0, b = 0;
};

struct SizeDef {
  std::string name;
  float radius = 0.3f;  // fraction of the grid cell edge
};

/// Enumerations the scene generator draws from. Shape names must be drawable
/// by render(); see known_shapes().
struct GrammarConfig {
  std::vector<std::string> shapes;
  std::vector<ColorDef> colors;
  std::vector<SizeDef> sizes;
  std::vector<std::string> row_words;  // grid rows, top to bottom
  std::vector<std::string> col_words;  // grid columns, left to right
  int image_size = 32;
  int channels = 3;
  float background = 0.0f;

  static GrammarConfig default_grammar();
  static std::span<const std::string_view> known_shapes();

  int grid() const { return static_cast<int>(row_words.size()); }
  int cell_size() const { return image_size / grid(); }
  std::size_t scene_space() const;
  /// Throws ConfigError on empty enumerations, unknown shapes, or a grid that
  /// does not tile the image.
  void validate() const;

  friend bool operator==(const GrammarConfig&, const GrammarConfig&);
};

struct SceneSpec {
  int shape_id = 0;
  int color_id = 0;
  int row = 0;
  int col = 0;
  int size_id = 0;

  auto operator<=>(const SceneSpec&) const = default;
};

bool scene_valid(const SceneSpec& scene, const GrammarConfig& grammar);
/// Mixed-radix index in [0, scene_space()).
std::size_t scene_index(const SceneSpec& scene, const GrammarConfig& grammar);
SceneSpec scene_from_index(std::size_t index, const GrammarConfig& grammar);

/// Closed word vocabulary with fixed reserved ids.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kCls = 1;
  static constexpr TokenId kSep = 2;
  static constexpr TokenId kMask = 3;
  static constexpr int kNumReserved = 4;

  Vocabulary();
  /// Reserved tokens followed by every grammar word in declaration order.
  static Vocabulary from_grammar(const GrammarConfig& grammar);
  /// Rebuilds from a serialized word list; the first kNumReserved entries must
  /// be the reserved tokens.
  static Vocabulary from_words(const std::vector<std::string>& words);

  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }
  bool contains(std::string_view word) const;
  TokenId id(std::string_view word) const;  // throws TokenizeError
  const std::string& word(TokenId id) const;
  static bool is_special(TokenId id) { return id < kNumReserved; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.words_ == b.words_; }

 private:
  void add(const std::string& word);

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab);
std::string detokenize(std::span<const TokenId> tokens, const Vocabulary& vocab);

struct Sample {
  SampleId id = 0;
  Image image;
  std::vector<TokenId> caption;  // no [CLS]/[SEP] framing
  SceneSpec scene;
};

struct VideoSample {
  SampleId id = 0;
  std::vector<Image> frames;
  std::vector<TokenId> caption;  // describes the first frame's scene
  SceneSpec scene;
};

struct Corpus {
  GrammarConfig grammar;
  std::uint64_t seed = 0;
  Vocabulary vocab;
  std::vector<Sample> samples;
  /// Samples whose scene repeats an earlier one (only when n > scene space).
  std::size_t duplicates = 0;
};

Image render(const SceneSpec& scene, const GrammarConfig& grammar);
std::vector<TokenId> describe(const SceneSpec& scene, const GrammarConfig& grammar, const Vocabulary& vocab);
/// Inverse of describe(); throws DataError for sequences outside the template.
SceneSpec parse_caption(std::span<const TokenId> caption, const GrammarConfig& grammar, const Vocabulary& vocab);

/// Longest caption the template can produce.
int max_caption_len(const GrammarConfig& grammar);

Corpus build_corpus(std::size_t n, std::uint64_t seed, const GrammarConfig& grammar);

/// Video clips as `frames` noisy renderings of one scene each.
std::vector<VideoSample> build_video_corpus(std::size_t n, std::uint64_t seed, const GrammarConfig& grammar,
                                            int frames = 4, float noise = 0.05f);

Sample sample_frame(const VideoSample& video, Rng& rng);

}  // namespace cosa
