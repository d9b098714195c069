#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace minicollie {

// Deterministic RNG used for all seeded behavior. Gaussian draws are
// hand-rolled (Box-Muller) so results do not depend on the standard
// library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return n == 0 ? 0 : engine_() % n; }

  double normal(double mean = 0.0, double std = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + std * spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + std * r * std::cos(theta);
  }

  // In-place Fisher-Yates; deterministic for a given engine state.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// FNV-1a 64-bit, used for content hashes and checkpoint checksums.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

// Per-worker instrumentation. Tracks live tensor bytes, live parameter
// gradient bytes (the quantity LOMO/AdaLomo bound), and the attention
// kernels' peak score-buffer footprint per head.
struct RuntimeStats {
  int64_t tensor_bytes = 0;
  int64_t tensor_bytes_peak = 0;
  int64_t param_grad_bytes = 0;
  int64_t param_grad_bytes_peak = 0;
  int64_t attn_score_elems_per_head_peak = 0;

  void add_tensor_bytes(int64_t n) {
    tensor_bytes += n;
    if (tensor_bytes > tensor_bytes_peak) tensor_bytes_peak = tensor_bytes;
  }
  void sub_tensor_bytes(int64_t n) { tensor_bytes -= n; }
  void add_param_grad_bytes(int64_t n) {
    param_grad_bytes += n;
    if (param_grad_bytes > param_grad_bytes_peak) param_grad_bytes_peak = param_grad_bytes;
  }
  void sub_param_grad_bytes(int64_t n) { param_grad_bytes -= n; }
  void note_score_buffer(int64_t elems_per_head) {
    if (elems_per_head > attn_score_elems_per_head_peak)
      attn_score_elems_per_head_peak = elems_per_head;
  }
  void reset_peaks() {
    tensor_bytes_peak = tensor_bytes;
    param_grad_bytes_peak = param_grad_bytes;
    attn_score_elems_per_head_peak = 0;
  }
};

// Current thread's stats sink. Worker threads point this at their own
// instance; everything else shares a process-wide default.
RuntimeStats& runtime_stats();
void set_runtime_stats(RuntimeStats* stats);

}  // namespace minicollie
