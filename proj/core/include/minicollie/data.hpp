#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "minicollie/errors.hpp"

namespace minicollie::data {

// Byte-level vocabulary: 256 raw byte values plus control tokens.
inline constexpr int32_t kPadId = 256;
inline constexpr int32_t kBosId = 257;
inline constexpr int32_t kEosId = 258;
inline constexpr int32_t kVocabSize = 259;
inline constexpr int kTokenizerVersion = 1;

std::vector<int32_t> byte_tokenize(const std::string& s);
// Inverse of byte_tokenize; control tokens are skipped.
std::string detokenize(std::span<const int32_t> ids);
// Cumulative byte_tokenize invocations (cache-hit instrumentation).
int64_t tokenize_call_count();

// ---- example records --------------------------------------------------------

// Either {text} (pre-training style; loss on the whole text) or
// {input, output} (instruction style; loss on the output span only).
struct TrainingExample {
  std::optional<std::string> text;
  std::optional<std::string> input;
  std::optional<std::string> output;
};

struct GenerationExample {
  std::string text;
  std::optional<std::string> target;
};

struct ClassificationExample {
  std::string input;
  std::vector<std::string> options;
  int target = 0;
};

std::vector<TrainingExample> load_training_json(const std::string& path);
std::vector<GenerationExample> load_generation_json(const std::string& path);
std::vector<ClassificationExample> load_classification_json(const std::string& path);

// ---- encoding ---------------------------------------------------------------

struct Encoded {
  std::vector<int32_t> ids;
  std::vector<uint8_t> mask;  // 1 where the token contributes to the loss as a target
};

// {text}:          ids = bos + text + eos,            mask 0 on bos only.
// {input, output}: ids = bos + input + output + eos,  mask 0 over bos+input,
//                  1 over output+eos. Over-length sequences drop bytes from
//                  the left of the input span; the output span is never
//                  truncated (DataError when it cannot fit).
Encoded encode_training_example(const TrainingExample& ex, int64_t max_len);

// One masked sequence per option: the input span is masked, the option span
// (plus eos) is scored.
std::vector<Encoded> encode_classification(const ClassificationExample& ex, int64_t max_len);

struct TokenBatch {
  std::vector<int32_t> input_ids;  // batch * seq, right-padded with pad_id
  std::vector<uint8_t> loss_mask;  // 0 on padding
  int64_t batch = 0;
  int64_t seq = 0;
  int32_t pad_id = kPadId;
  std::vector<int64_t> lengths;
};

TokenBatch assemble_batch(const std::vector<Encoded>& dataset,
                          std::span<const size_t> indices);

// ---- on-disk cache ----------------------------------------------------------

uint64_t file_content_hash(const std::string& path);

void cache_processed(const std::vector<Encoded>& encoded, uint64_t source_hash,
                     int64_t max_len, const std::string& dir);
// Verifies the manifest (source hash, max_len, tokenizer version) and
// returns batches bit-identical to the cached ones. A mismatching source
// hash is a stale-cache DataError, never silently served.
std::vector<Encoded> load_cached(const std::string& dir, uint64_t expected_source_hash,
                                 int64_t max_len);

// Loads + encodes a training JSON file, consulting/filling the cache when
// cache_dir is non-empty.
std::vector<Encoded> prepare_training_dataset(const std::string& json_path, int64_t max_len,
                                              const std::string& cache_dir = "");

}  // namespace minicollie::data
