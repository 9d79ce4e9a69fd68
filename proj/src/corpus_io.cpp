#include "cosa/corpus_io.hpp"

#include <cstring>
#include <fstream>
#include <set>

#include "cosa/binary_io.hpp"
#include "cosa/errors.hpp"

namespace cosa {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items()) {
    if (!ok.contains(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

}  // namespace

json grammar_to_json(const GrammarConfig& g) {
  json colors = json::array();
  for (const auto& c : g.colors) colors.push_back({{"name", c.name}, {"rgb", {c.r, c.g, c.b}}});
  json sizes = json::array();
  for (const auto& s : g.sizes) sizes.push_back({{"name", s.name}, {"radius", s.radius}});
  return {{"shapes", g.shapes},       {"colors", colors},         {"sizes", sizes},
          {"rows", g.row_words},      {"cols", g.col_words},      {"image_size", g.image_size},
          {"channels", g.channels},   {"background", g.background}};
}

GrammarConfig grammar_from_json(const json& j) {
  check_keys(j, {"shapes", "colors", "sizes", "rows", "cols", "image_size", "channels", "background"}, "grammar");
  GrammarConfig g = GrammarConfig::default_grammar();
  try {
    if (j.contains("shapes")) g.shapes = j.at("shapes").get<std::vector<std::string>>();
    if (j.contains("colors")) {
      g.colors.clear();
      for (const auto& c : j.at("colors")) {
        check_keys(c, {"name", "rgb"}, "grammar.colors[]");
        const auto rgb = c.at("rgb").get<std::vector<float>>();
        if (rgb.size() != 3) throw ConfigError("grammar.colors[].rgb: expected 3 components");
        g.colors.push_back({c.at("name").get<std::string>(), rgb[0], rgb[1], rgb[2]});
      }
    }
    if (j.contains("sizes")) {
      g.sizes.clear();
      for (const auto& s : j.at("sizes")) {
        check_keys(s, {"name", "radius"}, "grammar.sizes[]");
        g.sizes.push_back({s.at("name").get<std::string>(), s.at("radius").get<float>()});
      }
    }
    if (j.contains("rows")) g.row_words = j.at("rows").get<std::vector<std::string>>();
    if (j.contains("cols")) g.col_words = j.at("cols").get<std::vector<std::string>>();
    if (j.contains("image_size")) g.image_size = j.at("image_size").get<int>();
    if (j.contains("channels")) g.channels = j.at("channels").get<int>();
    if (j.contains("background")) g.background = j.at("background").get<float>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("grammar: ") + e.what());
  }
  return g;
}

void write_corpus(const fs::path& dir, const Corpus& corpus) {
  fs::create_directories(dir);
  const GrammarConfig& g = corpus.grammar;
  json manifest = {{"format_version", kCorpusFormatVersion},
                   {"n", corpus.samples.size()},
                   {"seed", corpus.seed},
                   {"duplicates", corpus.duplicates},
                   {"grammar", grammar_to_json(g)},
                   {"vocab", corpus.vocab.words()},
                   {"records", kCorpusRecords}};

  std::string buf;
  const std::size_t pixels = static_cast<std::size_t>(g.image_size) * g.image_size * g.channels;
  buf.reserve(corpus.samples.size() * (8 + 4 * pixels + 2 + 2 * 8));
  for (const Sample& s : corpus.samples) {
    if (s.image.pixels.size() != pixels) throw DataError("write_corpus: image shape differs from grammar");
    io::put_le<std::uint64_t>(buf, s.id);
    for (float p : s.image.pixels) io::put_le<float>(buf, p);
    io::put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(s.caption.size()));
    for (TokenId t : s.caption) io::put_le<std::uint16_t>(buf, t);
  }

  std::ofstream records(dir / kCorpusRecords, std::ios::binary | std::ios::trunc);
  records.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  std::ofstream man(dir / kCorpusManifest, std::ios::trunc);
  man << manifest.dump(2) << '\n';
  if (!records || !man) throw DataError("write_corpus: failed writing to " + dir.string());
}

Corpus read_corpus(const fs::path& dir) {
  std::ifstream man(dir / kCorpusManifest);
  if (!man) throw DataError("corpus manifest not found: " + (dir / kCorpusManifest).string());
  json manifest;
  try {
    manifest = json::parse(man);
  } catch (const json::exception& e) {
    throw DataError("corpus manifest: " + std::string(e.what()));
  }
  Corpus corpus;
  std::size_t n = 0;
  try {
    if (manifest.at("format_version").get<int>() != kCorpusFormatVersion) {
      throw DataError("corpus manifest: unsupported format_version");
    }
    n = manifest.at("n").get<std::size_t>();
    corpus.seed = manifest.at("seed").get<std::uint64_t>();
    corpus.duplicates = manifest.at("duplicates").get<std::size_t>();
    corpus.grammar = grammar_from_json(manifest.at("grammar"));
    corpus.vocab = Vocabulary::from_words(manifest.at("vocab").get<std::vector<std::string>>());
  } catch (const json::exception& e) {
    throw DataError("corpus manifest: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw DataError(std::string("corpus manifest: ") + e.what());
  }
  corpus.grammar.validate();

  std::ifstream rec(dir / kCorpusRecords, std::ios::binary);
  if (!rec) throw DataError("corpus records not found: " + (dir / kCorpusRecords).string());
  const std::string buf((std::istreambuf_iterator<char>(rec)), std::istreambuf_iterator<char>());
  const GrammarConfig& g = corpus.grammar;
  std::size_t pos = 0;
  corpus.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.id = io::get_le<std::uint64_t>(buf, pos, "corpus records");
    s.image = Image(g.image_size, g.image_size, g.channels);
    for (float& p : s.image.pixels) p = io::get_le<float>(buf, pos, "corpus records");
    const auto len = io::get_le<std::uint16_t>(buf, pos, "corpus records");
    s.caption.resize(len);
    for (TokenId& t : s.caption) {
      t = io::get_le<std::uint16_t>(buf, pos, "corpus records");
      if (t >= corpus.vocab.size()) throw DataError("corpus records: token id outside vocabulary");
    }
    s.scene = parse_caption(s.caption, g, corpus.vocab);
    corpus.samples.push_back(std::move(s));
  }
  if (pos != buf.size()) throw DataError("corpus records: trailing bytes after the last sample");
  return corpus;
}

}  // namespace cosa
