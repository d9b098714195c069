#include "minicollie/data.hpp"

#include <atomic>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "minicollie/util.hpp"

namespace minicollie::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {
std::atomic<int64_t> g_tokenize_calls{0};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return s;
}

json parse_json_file(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError("malformed JSON in '" + path + "' at byte " + std::to_string(e.byte) +
                    ": " + e.what());
  }
}

json expect_array(const json& j, const std::string& path) {
  if (!j.is_array()) throw DataError("'" + path + "': expected a JSON array of records");
  return j;
}

std::string record_err(size_t idx, const std::string& msg) {
  return "record " + std::to_string(idx) + ": " + msg;
}

}  // namespace

std::vector<int32_t> byte_tokenize(const std::string& s) {
  g_tokenize_calls.fetch_add(1, std::memory_order_relaxed);
  std::vector<int32_t> ids;
  ids.reserve(s.size());
  for (unsigned char c : s) ids.push_back(static_cast<int32_t>(c));
  return ids;
}

std::string detokenize(std::span<const int32_t> ids) {
  std::string s;
  s.reserve(ids.size());
  for (int32_t id : ids)
    if (id >= 0 && id < 256) s.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  return s;
}

int64_t tokenize_call_count() { return g_tokenize_calls.load(std::memory_order_relaxed); }

// ---- loading ----------------------------------------------------------------

std::vector<TrainingExample> load_training_json(const std::string& path) {
  const json arr = expect_array(parse_json_file(path), path);
  std::vector<TrainingExample> out;
  for (size_t i = 0; i < arr.size(); ++i) {
    const json& r = arr[i];
    if (!r.is_object()) throw DataError(record_err(i, "expected an object"));
    TrainingExample ex;
    if (r.contains("text")) ex.text = r.at("text").get<std::string>();
    if (r.contains("input")) ex.input = r.at("input").get<std::string>();
    if (r.contains("output")) ex.output = r.at("output").get<std::string>();
    const bool has_text = ex.text.has_value();
    const bool has_io = ex.input.has_value() || ex.output.has_value();
    if (has_text && has_io)
      throw DataError(record_err(i, "record mixes 'text' with 'input'/'output'"));
    if (!has_text) {
      if (!ex.input.has_value() || !ex.output.has_value())
        throw DataError(record_err(i, "record needs either 'text' or both 'input' and 'output'"));
      if (ex.output->empty()) throw DataError(record_err(i, "'output' must be non-empty"));
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<GenerationExample> load_generation_json(const std::string& path) {
  const json arr = expect_array(parse_json_file(path), path);
  std::vector<GenerationExample> out;
  for (size_t i = 0; i < arr.size(); ++i) {
    const json& r = arr[i];
    if (!r.is_object() || !r.contains("text"))
      throw DataError(record_err(i, "generation record needs a 'text' field"));
    GenerationExample ex;
    ex.text = r.at("text").get<std::string>();
    if (ex.text.empty()) throw DataError(record_err(i, "'text' must be non-empty"));
    if (r.contains("target")) ex.target = r.at("target").get<std::string>();
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<ClassificationExample> load_classification_json(const std::string& path) {
  const json arr = expect_array(parse_json_file(path), path);
  std::vector<ClassificationExample> out;
  for (size_t i = 0; i < arr.size(); ++i) {
    const json& r = arr[i];
    if (!r.is_object() || !r.contains("input") || !r.contains("output") || !r.contains("target"))
      throw DataError(record_err(i, "classification record needs 'input', 'output', 'target'"));
    ClassificationExample ex;
    ex.input = r.at("input").get<std::string>();
    if (!r.at("output").is_array())
      throw DataError(record_err(i, "'output' must list the candidate options"));
    for (const json& o : r.at("output")) ex.options.push_back(o.get<std::string>());
    ex.target = r.at("target").get<int>();
    if (ex.options.size() < 2)
      throw DataError(record_err(i, "classification needs at least 2 options"));
    if (ex.target < 0 || static_cast<size_t>(ex.target) >= ex.options.size())
      throw DataError(record_err(i, "'target' index out of range"));
    out.push_back(std::move(ex));
  }
  return out;
}

// ---- encoding ---------------------------------------------------------------

Encoded encode_training_example(const TrainingExample& ex, int64_t max_len) {
  Encoded enc;
  if (ex.text.has_value()) {
    std::vector<int32_t> body = byte_tokenize(*ex.text);
    const int64_t total = static_cast<int64_t>(body.size()) + 2;
    if (total > max_len)
      throw DataError("example of " + std::to_string(total) +
                      " tokens exceeds max_len " + std::to_string(max_len) +
                      " and the loss-bearing text span is never truncated");
    enc.ids.push_back(kBosId);
    enc.mask.push_back(0);
    for (int32_t id : body) {
      enc.ids.push_back(id);
      enc.mask.push_back(1);
    }
    enc.ids.push_back(kEosId);
    enc.mask.push_back(1);
    return enc;
  }
  if (!ex.input.has_value() || !ex.output.has_value() || ex.output->empty())
    throw DataError("training example needs 'text' or non-empty 'input'/'output'");

  std::vector<int32_t> in_ids = byte_tokenize(*ex.input);
  std::vector<int32_t> out_ids = byte_tokenize(*ex.output);
  const int64_t fixed = static_cast<int64_t>(out_ids.size()) + 2;  // bos + output + eos
  if (fixed > max_len)
    throw DataError("output span of " + std::to_string(out_ids.size()) +
                    " tokens cannot fit max_len " + std::to_string(max_len));
  const int64_t keep_input =
      std::min<int64_t>(static_cast<int64_t>(in_ids.size()), max_len - fixed);
  const size_t in_start = in_ids.size() - static_cast<size_t>(keep_input);

  enc.ids.push_back(kBosId);
  enc.mask.push_back(0);
  for (size_t i = in_start; i < in_ids.size(); ++i) {
    enc.ids.push_back(in_ids[i]);
    enc.mask.push_back(0);
  }
  for (int32_t id : out_ids) {
    enc.ids.push_back(id);
    enc.mask.push_back(1);
  }
  enc.ids.push_back(kEosId);
  enc.mask.push_back(1);
  return enc;
}

std::vector<Encoded> encode_classification(const ClassificationExample& ex, int64_t max_len) {
  std::vector<Encoded> out;
  for (const std::string& option : ex.options) {
    TrainingExample te;
    te.input = ex.input;
    te.output = option;
    out.push_back(encode_training_example(te, max_len));
  }
  return out;
}

TokenBatch assemble_batch(const std::vector<Encoded>& dataset,
                          std::span<const size_t> indices) {
  TokenBatch batch;
  batch.batch = static_cast<int64_t>(indices.size());
  for (size_t idx : indices) {
    if (idx >= dataset.size()) throw ContractError("assemble_batch: index out of range");
    batch.seq = std::max(batch.seq, static_cast<int64_t>(dataset[idx].ids.size()));
  }
  batch.input_ids.assign(static_cast<size_t>(batch.batch * batch.seq), kPadId);
  batch.loss_mask.assign(static_cast<size_t>(batch.batch * batch.seq), 0);
  for (size_t r = 0; r < indices.size(); ++r) {
    const Encoded& e = dataset[indices[r]];
    batch.lengths.push_back(static_cast<int64_t>(e.ids.size()));
    for (size_t i = 0; i < e.ids.size(); ++i) {
      batch.input_ids[r * static_cast<size_t>(batch.seq) + i] = e.ids[i];
      batch.loss_mask[r * static_cast<size_t>(batch.seq) + i] = e.mask[i];
    }
  }
  return batch;
}

// ---- cache ------------------------------------------------------------------

uint64_t file_content_hash(const std::string& path) {
  const std::string contents = read_file(path);
  return fnv1a64(contents);
}

namespace {
constexpr const char* kManifestFile = "manifest.json";
constexpr const char* kTokensFile = "tokens.bin";

template <typename T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("token cache truncated");
  return v;
}
}  // namespace

void cache_processed(const std::vector<Encoded>& encoded, uint64_t source_hash,
                     int64_t max_len, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create cache dir '" + dir + "': " + ec.message());

  std::ofstream bin(fs::path(dir) / kTokensFile, std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cache dir '" + dir + "' is not writable");
  write_pod<uint64_t>(bin, encoded.size());
  for (const Encoded& e : encoded) {
    write_pod<uint32_t>(bin, static_cast<uint32_t>(e.ids.size()));
    bin.write(reinterpret_cast<const char*>(e.ids.data()),
              static_cast<std::streamsize>(e.ids.size() * sizeof(int32_t)));
    bin.write(reinterpret_cast<const char*>(e.mask.data()),
              static_cast<std::streamsize>(e.mask.size()));
  }
  bin.flush();
  if (!bin) throw IoError("failed writing token cache in '" + dir + "'");

  json manifest;
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(source_hash));
  manifest["source_hash"] = hex;
  manifest["count"] = encoded.size();
  manifest["max_len"] = max_len;
  manifest["tokenizer_version"] = kTokenizerVersion;
  std::ofstream mf(fs::path(dir) / kManifestFile, std::ios::trunc);
  if (!mf) throw IoError("cache dir '" + dir + "' is not writable");
  mf << manifest.dump(2) << "\n";
}

std::vector<Encoded> load_cached(const std::string& dir, uint64_t expected_source_hash,
                                 int64_t max_len) {
  const fs::path mpath = fs::path(dir) / kManifestFile;
  if (!fs::exists(mpath)) throw DataError("no cache manifest in '" + dir + "'");
  const json manifest = parse_json_file(mpath.string());

  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(expected_source_hash));
  if (manifest.value("source_hash", "") != hex)
    throw DataError("stale cache in '" + dir + "': source content changed (expected hash " +
                    std::string(hex) + ", cached " + manifest.value("source_hash", "?") + ")");
  if (manifest.value("tokenizer_version", -1) != kTokenizerVersion)
    throw DataError("stale cache in '" + dir + "': tokenizer version changed");
  if (manifest.value("max_len", int64_t{-1}) != max_len)
    throw DataError("stale cache in '" + dir + "': max_len changed");

  std::ifstream bin(fs::path(dir) / kTokensFile, std::ios::binary);
  if (!bin) throw DataError("cache in '" + dir + "' is missing its token file");
  const uint64_t count = read_pod<uint64_t>(bin);
  std::vector<Encoded> out;
  out.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    const uint32_t len = read_pod<uint32_t>(bin);
    Encoded e;
    e.ids.resize(len);
    e.mask.resize(len);
    bin.read(reinterpret_cast<char*>(e.ids.data()),
             static_cast<std::streamsize>(len * sizeof(int32_t)));
    bin.read(reinterpret_cast<char*>(e.mask.data()), static_cast<std::streamsize>(len));
    if (!bin) throw DataError("token cache in '" + dir + "' truncated");
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<Encoded> prepare_training_dataset(const std::string& json_path, int64_t max_len,
                                              const std::string& cache_dir) {
  const uint64_t hash = file_content_hash(json_path);
  if (!cache_dir.empty() && fs::exists(fs::path(cache_dir) / kManifestFile))
    return load_cached(cache_dir, hash, max_len);

  std::vector<Encoded> encoded;
  for (const TrainingExample& ex : load_training_json(json_path))
    encoded.push_back(encode_training_example(ex, max_len));
  if (!cache_dir.empty()) cache_processed(encoded, hash, max_len, cache_dir);
  return encoded;
}

}  // namespace minicollie::data
