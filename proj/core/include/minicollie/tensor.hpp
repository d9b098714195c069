#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "minicollie/errors.hpp"
#include "minicollie/util.hpp"

namespace minicollie {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense double-precision tensor. Value-semantic handle onto shared storage;
// copies alias the same buffer. Produced tensors are treated as immutable
// except for gradient accumulation during backward and in-place parameter
// updates by optimizers.
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t numel() const;
  int64_t dim(int i) const;
  int ndim() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  // True when backward must deliver a gradient here (requires_grad leaves
  // and everything computed from them).
  bool grad_needed() const;

  std::vector<double>& data();
  const std::vector<double>& data() const;
  double item() const;

  bool has_grad() const;
  std::vector<double>& grad();              // allocates zero-filled on first use
  const std::vector<double>& grad() const;  // requires has_grad()
  void zero_grad();
  void drop_grad();

  // Parameter bookkeeping (drives the fused-optimizer hooks and the
  // gradient-storage instrumentation).
  void mark_param(std::string name);
  bool is_param() const;
  const std::string& name() const;

  // ZeRO-3 support: drop the value buffer while keeping the handle, then
  // refill with identical contents before the next use.
  void release_data();
  void refill_data(std::span<const double> values);
  bool data_released() const;

  // Identity of the underlying storage (tape node bookkeeping).
  const void* id() const { return impl_.get(); }

  friend class Tape;

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
};

// Reverse-mode tape. Nodes are appended in execution order; backward runs
// every node's closure in strict reverse append order, which makes gradient
// accumulation deterministic.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Creates the output tensor of an op and records a node listing its
  // inputs. The backward closure is attached afterwards (it usually needs
  // to capture the output handle): set_last_backward.
  Tensor make_op_output(Shape shape, std::vector<double> data,
                        const std::vector<Tensor>& inputs);
  void set_last_backward(std::function<void()> backward);

  // Records a closure without creating an output (comm nodes and the like).
  void record(const std::vector<Tensor>& inputs, std::function<void()> backward);

  void backward(const Tensor& out);               // scalar output, seed 1.0
  void backward(const Tensor& out, double seed);  // scalar output, custom seed
  void backward_with_grad(const Tensor& out, std::span<const double> out_grad);

  // Fires once the parameter's gradient is fully accumulated (i.e. after
  // the earliest-recorded node consuming it has run its backward).
  void add_post_grad_hook(const Tensor& param, std::function<void(Tensor&)> hook);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::function<void()> backward;
    std::vector<const void*> input_ids;
  };
  struct Hook {
    Tensor param;
    std::function<void(Tensor&)> fn;
  };
  std::vector<Node> nodes_;
  std::vector<Hook> hooks_;

  void run_backward();
};

// ---- primitive ops -------------------------------------------------------

// Batched matrix product: a [.., m, k] x b [.., k, n] -> [.., m, n].
// Leading dimensions must match exactly; 2-D inputs are the plain case.
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
// a [.., m, k] x b [.., n, k] -> [.., m, n]  (b transposed on last two dims).
Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b);
// x [.., in] x w [out, in] -> [.., out].
Tensor linear(Tape& tape, const Tensor& x, const Tensor& w);

// Elementwise; b may have fewer dimensions as long as its shape equals the
// trailing suffix of a's (broadcast over the leading dimensions).
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double c);
Tensor silu(Tape& tape, const Tensor& a);

// Scalar sum of all elements.
Tensor sum(Tape& tape, const Tensor& a);

Tensor softmax_lastdim(Tape& tape, const Tensor& x);

inline constexpr double kRmsNormEps = 1e-6;
Tensor rms_norm(Tape& tape, const Tensor& x, const Tensor& weight);

Tensor reshape(Tape& tape, const Tensor& x, Shape shape);
// [b, s, H] -> [b, heads, s, H/heads]
Tensor head_split(Tape& tape, const Tensor& x, int64_t heads);
// [b, h, s, d] -> [b, s, h*d]
Tensor head_merge(Tape& tape, const Tensor& x);

// Row lookup: table [V, H], ids length b*s -> [b, s, H].
Tensor embedding(Tape& tape, const Tensor& table, const std::vector<int32_t>& ids,
                 int64_t batch, int64_t seq);

enum class Reduction { kMean, kSum };

struct CrossEntropyResult {
  Tensor loss;           // scalar
  int64_t masked_count;  // number of positions contributing to the loss
};

// Mean (or sum) negative log-softmax over positions with mask == 1.
// logits [b, s, V]; targets/mask length b*s. Throws DataError when every
// position is masked out.
CrossEntropyResult cross_entropy(Tape& tape, const Tensor& logits,
                                 const std::vector<int32_t>& targets,
                                 const std::vector<uint8_t>& mask,
                                 Reduction reduction = Reduction::kMean);

// ---- gradient checking ----------------------------------------------------

// Central-difference check of d f / d x. Returns the worst per-element
// relative error with denominator max(|analytic|, |numeric|, 1e-8).
double finite_diff_check(
    const std::function<Tensor(Tape&, const Tensor&)>& f,
    const Tensor& x, double h);

}  // namespace minicollie
