#include "cosa/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <sstream>

#include "cosa/errors.hpp"

namespace cosa {

namespace {

constexpr std::array<std::string_view, 6> kKnownShapes = {"circle", "square", "triangle",
                                                          "diamond", "cross", "ring"};

int shape_kind(const std::string& name) {
  for (std::size_t i = 0; i < kKnownShapes.size(); ++i) {
    if (kKnownShapes[i] == name) return static_cast<int>(i);
  }
  return -1;
}

// Coverage test in cell-local coordinates centered on the cell, radius in pixels.
bool covers(int kind, float dx, float dy, float r) {
  const float ax = std::abs(dx);
  const float ay = std::abs(dy);
  switch (kind) {
    case 0:  // circle
      return dx * dx + dy * dy <= r * r;
    case 1:  // square
      return ax <= 0.8f * r && ay <= 0.8f * r;
    case 2:  // triangle, apex up
      return dy >= -r && dy <= 0.8f * r && ax <= 0.55f * (dy + r);
    case 3:  // diamond
      return ax + ay <= r;
    case 4:  // cross
      return (ax <= 0.35f * r && ay <= r) || (ay <= 0.35f * r && ax <= r);
    case 5: {  // ring
      const float d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.3f * r * r;
    }
    default:
      return false;
  }
}

}  // namespace

GrammarConfig GrammarConfig::default_grammar() {
  GrammarConfig g;
  g.shapes = {"circle", "square", "triangle", "diamond", "cross", "ring"};
  g.colors = {{"red", 1.0f, 0.0f, 0.0f},   {"green", 0.0f, 1.0f, 0.0f},   {"blue", 0.0f, 0.2f, 1.0f},
              {"yellow", 1.0f, 1.0f, 0.0f}, {"cyan", 0.0f, 1.0f, 1.0f},    {"magenta", 1.0f, 0.0f, 1.0f},
              {"white", 1.0f, 1.0f, 1.0f},  {"orange", 1.0f, 0.5f, 0.0f}};
  g.sizes = {{"small", 0.25f}, {"medium", 0.35f}, {"large", 0.45f}};
  g.row_words = {"top", "upper", "lower", "bottom"};
  g.col_words = {"left", "midleft", "midright", "right"};
  return g;
}

std::span<const std::string_view> GrammarConfig::known_shapes() { return kKnownShapes; }

std::size_t GrammarConfig::scene_space() const {
  return shapes.size() * colors.size() * sizes.size() * row_words.size() * col_words.size();
}

void GrammarConfig::validate() const {
  if (shapes.empty() || colors.empty() || sizes.empty() || row_words.empty() || col_words.empty()) {
    throw ConfigError("grammar: every enumeration (shapes, colors, sizes, rows, cols) must be non-empty");
  }
  if (row_words.size() != col_words.size()) {
    throw ConfigError("grammar: row_words and col_words must have equal length (square grid)");
  }
  if (image_size <= 0 || image_size % grid() != 0) {
    throw ConfigError("grammar: image_size must be a positive multiple of the grid size");
  }
  if (channels != 1 && channels != 3) throw ConfigError("grammar: channels must be 1 or 3");
  for (const auto& s : shapes) {
    if (shape_kind(s) < 0) throw ConfigError("grammar: unknown shape '" + s + "'");
  }
  for (const auto& s : sizes) {
    if (!(s.radius > 0.0f && s.radius <= 0.5f)) {
      throw ConfigError("grammar: size '" + s.name + "' radius must be in (0, 0.5]");
    }
  }
  if (!(background >= 0.0f && background <= 1.0f)) throw ConfigError("grammar: background must be in [0,1]");
}

bool operator==(const GrammarConfig& a, const GrammarConfig& b) {
  auto color_eq = [](const ColorDef& x, const ColorDef& y) {
    return x.name == y.name && x.r == y.r && x.g == y.g && x.b == y.b;
  };
  auto size_eq = [](const SizeDef& x, const SizeDef& y) { return x.name == y.name && x.radius == y.radius; };
  return a.shapes == b.shapes &&
         std::equal(a.colors.begin(), a.colors.end(), b.colors.begin(), b.colors.end(), color_eq) &&
         std::equal(a.sizes.begin(), a.sizes.end(), b.sizes.begin(), b.sizes.end(), size_eq) &&
         a.row_words == b.row_words && a.col_words == b.col_words && a.image_size == b.image_size &&
         a.channels == b.channels && a.background == b.background;
}

bool scene_valid(const SceneSpec& s, const GrammarConfig& g) {
  return s.shape_id >= 0 && s.shape_id < static_cast<int>(g.shapes.size()) && s.color_id >= 0 &&
         s.color_id < static_cast<int>(g.colors.size()) && s.size_id >= 0 &&
         s.size_id < static_cast<int>(g.sizes.size()) && s.row >= 0 && s.row < g.grid() && s.col >= 0 &&
         s.col < g.grid();
}

std::size_t scene_index(const SceneSpec& s, const GrammarConfig& g) {
  std::size_t idx = static_cast<std::size_t>(s.shape_id);
  idx = idx * g.colors.size() + static_cast<std::size_t>(s.color_id);
  idx = idx * g.sizes.size() + static_cast<std::size_t>(s.size_id);
  idx = idx * g.row_words.size() + static_cast<std::size_t>(s.row);
  idx = idx * g.col_words.size() + static_cast<std::size_t>(s.col);
  return idx;
}

SceneSpec scene_from_index(std::size_t index, const GrammarConfig& g) {
  SceneSpec s;
  s.col = static_cast<int>(index % g.col_words.size());
  index /= g.col_words.size();
  s.row = static_cast<int>(index % g.row_words.size());
  index /= g.row_words.size();
  s.size_id = static_cast<int>(index % g.sizes.size());
  index /= g.sizes.size();
  s.color_id = static_cast<int>(index % g.colors.size());
  index /= g.colors.size();
  s.shape_id = static_cast<int>(index);
  return s;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
  add("[PAD]");
  add("[CLS]");
  add("[SEP]");
  add("[MASK]");
}

void Vocabulary::add(const std::string& word) {
  if (word.empty() || word.find_first_of(" \t\n") != std::string::npos) {
    throw ConfigError("vocabulary: invalid word '" + word + "'");
  }
  if (index_.contains(word)) throw ConfigError("vocabulary: duplicate word '" + word + "'");
  if (words_.size() >= 0xFFFF) throw ConfigError("vocabulary: too many words for 16-bit ids");
  index_.emplace(word, static_cast<TokenId>(words_.size()));
  words_.push_back(word);
}

Vocabulary Vocabulary::from_grammar(const GrammarConfig& g) {
  Vocabulary v;
  v.add("a");
  v.add("at");
  for (const auto& s : g.sizes) v.add(s.name);
  for (const auto& c : g.colors) v.add(c.name);
  for (const auto& s : g.shapes) v.add(s);
  for (const auto& r : g.row_words) v.add(r);
  for (const auto& c : g.col_words) v.add(c);
  return v;
}

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  Vocabulary v;
  if (words.size() < static_cast<std::size_t>(kNumReserved) ||
      !std::equal(v.words_.begin(), v.words_.end(), words.begin())) {
    throw DataError("vocabulary: serialized word list does not start with the reserved tokens");
  }
  for (std::size_t i = kNumReserved; i < words.size(); ++i) v.add(words[i]);
  return v;
}

bool Vocabulary::contains(std::string_view word) const { return index_.contains(std::string(word)); }

TokenId Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) throw TokenizeError("out-of-vocabulary word '" + std::string(word) + "'");
  return it->second;
}

const std::string& Vocabulary::word(TokenId id) const {
  if (id >= words_.size()) throw TokenizeError("token id " + std::to_string(id) + " outside vocabulary");
  return words_[id];
}

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab) {
  std::vector<TokenId> out;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) out.push_back(vocab.id(word));
  return out;
}

std::string detokenize(std::span<const TokenId> tokens, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += vocab.word(tokens[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scenes

Image render(const SceneSpec& scene, const GrammarConfig& g) {
  Image img(g.image_size, g.image_size, g.channels, g.background);
  const int cell = g.cell_size();
  const int kind = shape_kind(g.shapes[scene.shape_id]);
  const float r = g.sizes[scene.size_id].radius * static_cast<float>(cell);
  const ColorDef& color = g.colors[scene.color_id];
  const float rgb[3] = {color.r, color.g, color.b};
  const float half = 0.5f * static_cast<float>(cell);
  for (int y = 0; y < cell; ++y) {
    for (int x = 0; x < cell; ++x) {
      const float dx = static_cast<float>(x) + 0.5f - half;
      const float dy = static_cast<float>(y) + 0.5f - half;
      if (!covers(kind, dx, dy, r)) continue;
      const int py = scene.row * cell + y;
      const int px = scene.col * cell + x;
      if (g.channels == 3) {
        for (int c = 0; c < 3; ++c) img.at(py, px, c) = rgb[c];
      } else {
        img.at(py, px, 0) = (rgb[0] + rgb[1] + rgb[2]) / 3.0f;
      }
    }
  }
  return img;
}

std::vector<TokenId> describe(const SceneSpec& s, const GrammarConfig& g, const Vocabulary& vocab) {
  return {vocab.id("a"),
          vocab.id(g.sizes[s.size_id].name),
          vocab.id(g.colors[s.color_id].name),
          vocab.id(g.shapes[s.shape_id]),
          vocab.id("at"),
          vocab.id(g.row_words[s.row]),
          vocab.id(g.col_words[s.col])};
}

int max_caption_len(const GrammarConfig&) { return 7; }

SceneSpec parse_caption(std::span<const TokenId> caption, const GrammarConfig& g, const Vocabulary& vocab) {
  if (caption.size() != 7) throw DataError("caption does not follow the scene template");
  auto find = [&](const auto& list, TokenId tok, auto name_of) -> int {
    const std::string& w = vocab.word(tok);
    for (std::size_t i = 0; i < list.size(); ++i) {
      if (name_of(list[i]) == w) return static_cast<int>(i);
    }
    throw DataError("caption word '" + w + "' not in the expected grammar slot");
  };
  auto plain = [](const std::string& s) -> const std::string& { return s; };
  if (caption[0] != vocab.id("a") || caption[4] != vocab.id("at")) {
    throw DataError("caption does not follow the scene template");
  }
  SceneSpec s;
  s.size_id = find(g.sizes, caption[1], [](const SizeDef& d) -> const std::string& { return d.name; });
  s.color_id = find(g.colors, caption[2], [](const ColorDef& d) -> const std::string& { return d.name; });
  s.shape_id = find(g.shapes, caption[3], plain);
  s.row = find(g.row_words, caption[5], plain);
  s.col = find(g.col_words, caption[6], plain);
  return s;
}

// ---------------------------------------------------------------------------
// Corpus generation

namespace {

// n scene indices: distinct when possible (partial Fisher-Yates over a sparse
// permutation), uniform with replacement otherwise.
std::vector<std::size_t> draw_scene_indices(std::size_t n, std::size_t space, Rng& rng) {
  std::vector<std::size_t> out;
  out.reserve(n);
  if (n <= space) {
    std::unordered_map<std::size_t, std::size_t> swapped;
    auto get = [&](std::size_t i) {
      auto it = swapped.find(i);
      return it == swapped.end() ? i : it->second;
    };
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + rng.uniform_index(space - i);
      const std::size_t vi = get(i);
      const std::size_t vj = get(j);
      swapped[j] = vi;
      out.push_back(vj);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) out.push_back(rng.uniform_index(space));
  }
  return out;
}

}  // namespace

Corpus build_corpus(std::size_t n, std::uint64_t seed, const GrammarConfig& grammar) {
  if (n == 0) throw ConfigError("build_corpus: n must be >= 1");
  grammar.validate();
  Corpus corpus;
  corpus.grammar = grammar;
  corpus.seed = seed;
  corpus.vocab = Vocabulary::from_grammar(grammar);
  Rng rng(seed);
  const auto indices = draw_scene_indices(n, grammar.scene_space(), rng);
  std::set<std::size_t> seen;
  corpus.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.id = i;
    s.scene = scene_from_index(indices[i], grammar);
    s.image = render(s.scene, grammar);
    s.caption = describe(s.scene, grammar, corpus.vocab);
    if (!seen.insert(indices[i]).second) ++corpus.duplicates;
    corpus.samples.push_back(std::move(s));
  }
  return corpus;
}

std::vector<VideoSample> build_video_corpus(std::size_t n, std::uint64_t seed, const GrammarConfig& grammar,
                                            int frames, float noise) {
  if (n == 0) throw ConfigError("build_video_corpus: n must be >= 1");
  if (frames < 1) throw ConfigError("build_video_corpus: frames must be >= 1");
  grammar.validate();
  const Vocabulary vocab = Vocabulary::from_grammar(grammar);
  Rng rng(seed);
  const auto indices = draw_scene_indices(n, grammar.scene_space(), rng);
  Rng noise_rng(mix_seed(seed, 1));
  std::vector<VideoSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    VideoSample v;
    v.id = i;
    v.scene = scene_from_index(indices[i], grammar);
    v.caption = describe(v.scene, grammar, vocab);
    const Image base = render(v.scene, grammar);
    for (int f = 0; f < frames; ++f) {
      Image frame = base;
      for (float& p : frame.pixels) {
        const float jitter = static_cast<float>((2.0 * noise_rng.uniform01() - 1.0) * noise);
        p = std::clamp(p + jitter, 0.0f, 1.0f);
      }
      v.frames.push_back(std::move(frame));
    }
    out.push_back(std::move(v));
  }
  return out;
}

Sample sample_frame(const VideoSample& video, Rng& rng) {
  if (video.frames.empty()) throw DataError("sample_frame: video has no frames");
  Sample s;
  s.id = video.id;
  s.image = video.frames[rng.uniform_index(video.frames.size())];
  s.caption = video.caption;
  s.scene = video.scene;
  return s;
}

}  // namespace cosa
