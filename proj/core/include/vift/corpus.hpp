#pragma once

#include <string>
#include <variant>
#include <vector>

#include "vift/scene.hpp"

namespace vift {

// Caption pair in instruction format: image, caption query drawn from the
// fixed pool, canonical caption as response.
struct CaptionRecord {
    ToyImage image;
    std::string query;
    std::string response;
};

// Text-only instruction: a scene described in caption grammar followed by a
// question; the response is the oracle answer. Carries no image.
struct TextRecord {
    std::string query;
    std::string response;
};

// Held-out composite evaluation item: never used for training.
struct CompositeRecord {
    ToyImage image;
    std::string question;
    std::string answer;
};

using Record = std::variant<CaptionRecord, TextRecord, CompositeRecord>;

// The fixed caption-query pool (>= 8 phrasings).
const std::vector<std::string>& caption_query_pool();

// Scene sampling. Training splits (captions, text tasks) draw scenes whose
// hash has even parity; composite evaluation draws odd parity, so the two
// worlds are disjoint by construction.
SceneSpec sample_scene(class Rng& rng, std::size_t patch_grid, int hash_parity);
Question sample_question(class Rng& rng, const SceneSpec& scene);

std::vector<CaptionRecord> gen_caption_dataset(std::size_t n, std::uint64_t seed, std::size_t patch_grid = 4);
std::vector<TextRecord> gen_text_task_dataset(std::size_t n, std::uint64_t seed, std::size_t patch_grid = 4);
std::vector<CompositeRecord> gen_composite_eval(std::size_t n, std::uint64_t seed, std::size_t patch_grid = 4);

// JSONL persistence. One record per line, schema keyed by "kind". Writing is
// atomic (temp file + rename) and byte-deterministic; malformed input lines
// are reported with their line number.
void write_jsonl(const std::string& path, const std::vector<Record>& records);
std::vector<Record> read_jsonl(const std::string& path);

std::vector<Record> to_records(const std::vector<CaptionRecord>& v);
std::vector<Record> to_records(const std::vector<TextRecord>& v);
std::vector<Record> to_records(const std::vector<CompositeRecord>& v);
std::vector<CaptionRecord> caption_records(const std::vector<Record>& records);
std::vector<TextRecord> text_records(const std::vector<Record>& records);
std::vector<CompositeRecord> composite_records(const std::vector<Record>& records);

// Atomic text-file write used by every file-emitting module.
void write_file_atomic(const std::string& path, const std::string& contents);

}  // namespace vift
