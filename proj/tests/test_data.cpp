#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "minicollie/data.hpp"
#include "minicollie/util.hpp"

using namespace minicollie;
using namespace minicollie::data;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("minicollie_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

std::string write_file(const fs::path& p, const std::string& contents) {
  std::ofstream out(p, std::ios::trunc | std::ios::binary);
  out << contents;
  return p.string();
}

}  // namespace

TEST_CASE("byte tokenizer basics and round trip") {
  CHECK(byte_tokenize("").empty());
  CHECK(byte_tokenize("AB") == std::vector<int32_t>{65, 66});

  Rng rng(123);
  for (int i = 0; i < 1000; ++i) {
    std::string s;
    const size_t len = rng.below(40);
    for (size_t j = 0; j < len; ++j) s.push_back(static_cast<char>(rng.below(256)));
    CHECK(detokenize(byte_tokenize(s)) == s);
  }
}

TEST_CASE("load_training_json") {
  TempDir tmp;
  auto path = write_file(tmp.path / "ok.json",
                         R"([{"text":"hello"},{"input":"a","output":"b"},{"text":""}])");
  auto ds = load_training_json(path);
  CHECK(ds.size() == 3);
  CHECK(ds[0].text == "hello");
  CHECK(ds[1].input == "a");

  auto empty = write_file(tmp.path / "empty.json", "[]");
  CHECK(load_training_json(empty).empty());

  auto both = write_file(tmp.path / "both.json", R"([{"text":"x","input":"y","output":"z"}])");
  CHECK_THROWS_WITH_AS(load_training_json(both), doctest::Contains("record 0"), DataError);

  auto noout = write_file(tmp.path / "noout.json", R"([{"input":"y"}])");
  CHECK_THROWS_AS(load_training_json(noout), DataError);

  auto emptyout = write_file(tmp.path / "emptyout.json", R"([{"input":"y","output":""}])");
  CHECK_THROWS_AS(load_training_json(emptyout), DataError);

  auto bad = write_file(tmp.path / "bad.json", R"([{"text": "unterminated)");
  CHECK_THROWS_WITH_AS(load_training_json(bad), doctest::Contains("byte"), DataError);
}

TEST_CASE("encode_training_example masking") {
  TrainingExample io;
  io.input = "ab";
  io.output = "cd";
  Encoded e = encode_training_example(io, 16);
  CHECK(e.ids == std::vector<int32_t>{kBosId, 'a', 'b', 'c', 'd', kEosId});
  CHECK(e.mask == std::vector<uint8_t>{0, 0, 0, 1, 1, 1});

  TrainingExample text;
  text.text = "x";
  Encoded t = encode_training_example(text, 8);
  CHECK(t.ids == std::vector<int32_t>{kBosId, 'x', kEosId});
  CHECK(t.mask == std::vector<uint8_t>{0, 1, 1});

  TrainingExample bad;
  bad.input = "a";
  bad.output = "";
  CHECK_THROWS_AS(encode_training_example(bad, 8), DataError);
}

TEST_CASE("truncation drops from the left of the input span only") {
  TrainingExample io;
  io.input = "0123456789";
  io.output = "xy";
  Encoded e = encode_training_example(io, 8);  // bos + 4 input + 2 output + eos
  CHECK(e.ids.size() == 8);
  CHECK(e.ids == std::vector<int32_t>{kBosId, '6', '7', '8', '9', 'x', 'y', kEosId});
  CHECK(e.mask == std::vector<uint8_t>{0, 0, 0, 0, 0, 1, 1, 1});

  TrainingExample impossible;
  impossible.input = "a";
  impossible.output = "0123456789";
  CHECK_THROWS_AS(encode_training_example(impossible, 8), DataError);

  TrainingExample long_text;
  long_text.text = "0123456789";
  CHECK_THROWS_AS(encode_training_example(long_text, 8), DataError);
}

TEST_CASE("mask property over random input/output pairs") {
  Rng rng(7);
  for (int iter = 0; iter < 500; ++iter) {
    std::string in, out;
    const size_t ni = rng.below(20), no = 1 + rng.below(20);
    for (size_t i = 0; i < ni; ++i) in.push_back(static_cast<char>('a' + rng.below(26)));
    for (size_t i = 0; i < no; ++i) out.push_back(static_cast<char>('a' + rng.below(26)));
    TrainingExample ex;
    ex.input = in;
    ex.output = out;
    Encoded e = encode_training_example(ex, 64);
    REQUIRE(e.ids.size() == ni + no + 2);
    for (size_t i = 0; i < 1 + ni; ++i) CHECK(e.mask[i] == 0);
    for (size_t i = 1 + ni; i < e.ids.size(); ++i) CHECK(e.mask[i] == 1);
    CHECK(e.ids.back() == kEosId);
  }
}

TEST_CASE("classification encodings") {
  ClassificationExample ex;
  ex.input = "q";
  ex.options = {"yes", "no"};
  ex.target = 1;
  auto seqs = encode_classification(ex, 32);
  CHECK(seqs.size() == 2);
  CHECK(seqs[0].ids.size() == 1 + 1 + 3 + 1);
  CHECK(seqs[1].ids.size() == 1 + 1 + 2 + 1);
  // Input span masked in every option sequence.
  CHECK(seqs[0].mask[1] == 0);
  CHECK(seqs[0].mask[2] == 1);

  TempDir tmp;
  auto good = write_file(tmp.path / "c.json",
                         R"([{"input":"q","output":["a","b"],"target":0}])");
  CHECK(load_classification_json(good).size() == 1);
  auto single = write_file(tmp.path / "s.json",
                           R"([{"input":"q","output":["a"],"target":0}])");
  CHECK_THROWS_AS(load_classification_json(single), DataError);
  auto oob = write_file(tmp.path / "o.json",
                        R"([{"input":"q","output":["a","b"],"target":2}])");
  CHECK_THROWS_AS(load_classification_json(oob), DataError);
}

TEST_CASE("batch assembly pads and masks") {
  std::vector<Encoded> ds;
  TrainingExample a;
  a.text = "abc";
  ds.push_back(encode_training_example(a, 16));
  TrainingExample b;
  b.text = "z";
  ds.push_back(encode_training_example(b, 16));

  std::vector<size_t> idx{0, 1};
  TokenBatch batch = assemble_batch(ds, idx);
  CHECK(batch.batch == 2);
  CHECK(batch.seq == 5);
  CHECK(batch.input_ids[1 * 5 + 3] == kPadId);
  CHECK(batch.loss_mask[1 * 5 + 3] == 0);
  CHECK(batch.lengths == std::vector<int64_t>{5, 3});
}

TEST_CASE("cache round trip, staleness, and tokenize skipping") {
  TempDir tmp;
  auto jsonp = write_file(tmp.path / "train.json",
                          R"([{"text":"hello"},{"input":"ab","output":"cd"}])");
  const std::string cache = (tmp.path / "cache").string();

  auto first = prepare_training_dataset(jsonp, 32, cache);
  CHECK(first.size() == 2);
  const int64_t calls_after_first = tokenize_call_count();

  auto second = prepare_training_dataset(jsonp, 32, cache);
  CHECK(tokenize_call_count() == calls_after_first);  // cache hit, no tokenization
  REQUIRE(second.size() == first.size());
  for (size_t i = 0; i < first.size(); ++i) {
    CHECK(second[i].ids == first[i].ids);
    CHECK(second[i].mask == first[i].mask);
  }

  // Source edited: refuse to serve the stale cache.
  write_file(tmp.path / "train.json", R"([{"text":"HELLO"}])");
  CHECK_THROWS_WITH_AS(load_cached(cache, file_content_hash(jsonp), 32),
                       doctest::Contains("stale"), DataError);

  // Truncated cache detected.
  auto tk = tmp.path / "cache" / "tokens.bin";
  fs::resize_file(tk, fs::file_size(tk) - 3);
  write_file(tmp.path / "train.json", R"([{"text":"hello"},{"input":"ab","output":"cd"}])");
  CHECK_THROWS_AS(load_cached(cache, file_content_hash(jsonp), 32), DataError);
}
