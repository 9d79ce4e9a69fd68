#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "cosa/corpus.hpp"

namespace cosa {

inline constexpr int kCorpusFormatVersion = 1;
inline constexpr const char* kCorpusManifest = "manifest.json";
inline constexpr const char* kCorpusRecords = "samples.bin";

nlohmann::json grammar_to_json(const GrammarConfig& grammar);
/// Unknown keys are rejected; missing keys fall back to the default grammar.
GrammarConfig grammar_from_json(const nlohmann::json& j);

/// Writes manifest.json and samples.bin into `dir` (created if absent).
///
/// Record layout, little-endian: id u64, image f32[H*W*C] row-major,
/// caption length u16, caption ids u16[len].
void write_corpus(const std::filesystem::path& dir, const Corpus& corpus);

/// Scenes are recovered from the captions, which are bijective with them.
Corpus read_corpus(const std::filesystem::path& dir);

}  // namespace cosa
