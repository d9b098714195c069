#include "minicollie/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <unordered_map>

namespace minicollie {

namespace {
RuntimeStats g_default_stats;
thread_local RuntimeStats* t_stats = nullptr;
}  // namespace

RuntimeStats& runtime_stats() { return t_stats ? *t_stats : g_default_stats; }
void set_runtime_stats(RuntimeStats* stats) { t_stats = stats; }

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

struct Tensor::Impl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool grad_needed = false;
  bool is_param = false;
  bool released = false;
  std::string name;
  RuntimeStats* stats = nullptr;

  Impl(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    stats = &runtime_stats();
    stats->add_tensor_bytes(static_cast<int64_t>(data.size() * sizeof(double)));
  }
  ~Impl() {
    if (!released) stats->sub_tensor_bytes(static_cast<int64_t>(data.size() * sizeof(double)));
    if (!grad.empty()) {
      stats->sub_tensor_bytes(static_cast<int64_t>(grad.size() * sizeof(double)));
      if (is_param) stats->sub_param_grad_bytes(static_cast<int64_t>(grad.size() * sizeof(double)));
    }
  }
};

Tensor Tensor::leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size()))
    throw ContractError("tensor: data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
  auto impl = std::make_shared<Impl>(std::move(shape), std::move(data));
  impl->requires_grad = requires_grad;
  impl->grad_needed = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)), 0.0);
  return leaf(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::full(Shape shape, double value) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)), value);
  return leaf(std::move(shape), std::move(d), false);
}

Tensor Tensor::scalar(double value) { return leaf({1}, {value}, false); }

const Shape& Tensor::shape() const { return impl_->shape; }
int64_t Tensor::numel() const { return shape_numel(impl_->shape); }
int64_t Tensor::dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
int Tensor::ndim() const { return static_cast<int>(impl_->shape.size()); }

bool Tensor::requires_grad() const { return impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  impl_->requires_grad = value;
  impl_->grad_needed = value;
}

bool Tensor::grad_needed() const { return impl_->grad_needed; }

std::vector<double>& Tensor::data() {
  if (impl_->released) throw ContractError("tensor '" + impl_->name + "': data accessed while released");
  return impl_->data;
}
const std::vector<double>& Tensor::data() const {
  if (impl_->released) throw ContractError("tensor '" + impl_->name + "': data accessed while released");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
  return data()[0];
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::vector<double>& Tensor::grad() {
  if (impl_->grad.empty()) {
    impl_->grad.assign(static_cast<size_t>(numel()), 0.0);
    impl_->stats->add_tensor_bytes(static_cast<int64_t>(impl_->grad.size() * sizeof(double)));
    if (impl_->is_param)
      impl_->stats->add_param_grad_bytes(static_cast<int64_t>(impl_->grad.size() * sizeof(double)));
  }
  return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (impl_->grad.empty()) throw ContractError("grad() on tensor without gradient");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::drop_grad() {
  if (impl_->grad.empty()) return;
  impl_->stats->sub_tensor_bytes(static_cast<int64_t>(impl_->grad.size() * sizeof(double)));
  if (impl_->is_param)
    impl_->stats->sub_param_grad_bytes(static_cast<int64_t>(impl_->grad.size() * sizeof(double)));
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

void Tensor::mark_param(std::string name) {
  impl_->is_param = true;
  impl_->name = std::move(name);
  impl_->requires_grad = true;
  impl_->grad_needed = true;
}

bool Tensor::is_param() const { return impl_->is_param; }
const std::string& Tensor::name() const { return impl_->name; }

void Tensor::release_data() {
  if (impl_->released) return;
  impl_->stats->sub_tensor_bytes(static_cast<int64_t>(impl_->data.size() * sizeof(double)));
  impl_->data.clear();
  impl_->data.shrink_to_fit();
  impl_->released = true;
}

void Tensor::refill_data(std::span<const double> values) {
  if (!impl_->released) throw ContractError("refill_data on live tensor '" + impl_->name + "'");
  if (static_cast<int64_t>(values.size()) != numel())
    throw ContractError("refill_data: size mismatch for '" + impl_->name + "'");
  impl_->data.assign(values.begin(), values.end());
  impl_->released = false;
  impl_->stats->add_tensor_bytes(static_cast<int64_t>(impl_->data.size() * sizeof(double)));
}

bool Tensor::data_released() const { return impl_->released; }

// ---- Tape ------------------------------------------------------------------

Tensor Tape::make_op_output(Shape shape, std::vector<double> data,
                            const std::vector<Tensor>& inputs) {
  Tensor out = Tensor::leaf(std::move(shape), std::move(data), false);
  bool needed = false;
  for (const Tensor& in : inputs) needed = needed || in.grad_needed();
  out.impl_->grad_needed = needed;
  Node node;
  node.input_ids.reserve(inputs.size());
  for (const Tensor& in : inputs) node.input_ids.push_back(in.id());
  nodes_.push_back(std::move(node));
  return out;
}

void Tape::set_last_backward(std::function<void()> backward) {
  if (nodes_.empty()) throw ContractError("set_last_backward on empty tape");
  nodes_.back().backward = std::move(backward);
}

void Tape::record(const std::vector<Tensor>& inputs, std::function<void()> backward) {
  Node node;
  node.backward = std::move(backward);
  for (const Tensor& in : inputs) node.input_ids.push_back(in.id());
  nodes_.push_back(std::move(node));
}

void Tape::backward(const Tensor& out) { backward(out, 1.0); }

void Tape::backward(const Tensor& out, double seed) {
  if (out.numel() != 1)
    throw ContractError("backward: loss must be scalar, got " + shape_str(out.shape()));
  Tensor o = out;
  o.grad()[0] += seed;
  run_backward();
}

void Tape::backward_with_grad(const Tensor& out, std::span<const double> out_grad) {
  if (static_cast<int64_t>(out_grad.size()) != out.numel())
    throw ContractError("backward_with_grad: gradient size mismatch");
  Tensor o = out;
  auto& g = o.grad();
  for (size_t i = 0; i < out_grad.size(); ++i) g[i] += out_grad[i];
  run_backward();
}

void Tape::add_post_grad_hook(const Tensor& param, std::function<void(Tensor&)> hook) {
  hooks_.push_back(Hook{param, std::move(hook)});
}

void Tape::run_backward() {
  // Earliest node consuming each hooked parameter: in reverse traversal it
  // is the last node that can still contribute to that parameter's gradient.
  std::unordered_map<const void*, size_t> first_use;
  for (const Hook& h : hooks_) first_use.emplace(h.param.id(), nodes_.size());
  if (!hooks_.empty()) {
    for (size_t i = 0; i < nodes_.size(); ++i) {
      for (const void* id : nodes_[i].input_ids) {
        auto it = first_use.find(id);
        if (it != first_use.end() && it->second == nodes_.size()) it->second = i;
      }
    }
  }

  for (size_t i = nodes_.size(); i-- > 0;) {
    if (nodes_[i].backward) nodes_[i].backward();
    if (!hooks_.empty()) {
      for (Hook& h : hooks_) {
        if (first_use[h.param.id()] == i) {
          h.param.grad();  // materialize zeros for parameters with no gradient flow
          h.fn(h.param);
        }
      }
    }
  }
  for (Hook& h : hooks_) {
    if (first_use[h.param.id()] == nodes_.size()) {
      h.param.grad();
      h.fn(h.param);
    }
  }
  hooks_.clear();
}

// ---- op helpers ------------------------------------------------------------

namespace {

bool same_leading(const Shape& a, const Shape& b, size_t tail) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i + tail < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

// Validates that b's shape is a trailing suffix of a's; returns b's numel.
int64_t broadcast_suffix(const Tensor& a, const Tensor& b, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sb.size() > sa.size())
    throw ContractError(std::string(op) + ": cannot broadcast " + shape_str(sb) +
                        " onto smaller " + shape_str(sa));
  const size_t off = sa.size() - sb.size();
  for (size_t i = 0; i < sb.size(); ++i) {
    if (sa[off + i] != sb[i])
      throw ContractError(std::string(op) + ": incompatible shapes " + shape_str(sa) +
                          " and " + shape_str(sb));
  }
  return b.numel();
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// ---- matmul family ---------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw ContractError("matmul: operands must have >= 2 dims, got " + shape_str(a.shape()) +
                        " and " + shape_str(b.shape()));
  if (!same_leading(a.shape(), b.shape(), 2))
    throw ContractError("matmul: batch dims differ: " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  const int64_t m = a.dim(a.ndim() - 2), k = a.dim(a.ndim() - 1);
  const int64_t k2 = b.dim(b.ndim() - 2), n = b.dim(b.ndim() - 1);
  if (k != k2)
    throw ContractError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  const int64_t batches = a.numel() / (m * k);

  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(static_cast<size_t>(batches * m * n), 0.0);

  {
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (int64_t bt = 0; bt < batches; ++bt) {
      const double* A = pa + bt * m * k;
      const double* B = pb + bt * k * n;
      double* Y = out.data() + bt * m * n;
      for (int64_t i = 0; i < m; ++i)
        for (int64_t t = 0; t < k; ++t) {
          const double av = A[i * k + t];
          const double* brow = B + t * n;
          double* yrow = Y + i * n;
          for (int64_t j = 0; j < n; ++j) yrow[j] += av * brow[j];
        }
    }
  }

  Tensor y = tape.make_op_output(std::move(out_shape), std::move(out), {a, b});
  tape.set_last_backward([a = a, b = b, y, m, k, n, batches]() mutable {
    if (!y.has_grad() || !y.grad_needed()) return;
    const double* dy = y.grad().data();
    if (a.grad_needed()) {
      double* da = a.grad().data();
      const double* pb = b.data().data();
      for (int64_t bt = 0; bt < batches; ++bt) {
        const double* DY = dy + bt * m * n;
        const double* B = pb + bt * k * n;
        double* DA = da + bt * m * k;
        for (int64_t i = 0; i < m; ++i)
          for (int64_t t = 0; t < k; ++t) {
            const double* dyrow = DY + i * n;
            const double* brow = B + t * n;
            double acc = 0.0;
            for (int64_t j = 0; j < n; ++j) acc += dyrow[j] * brow[j];
            DA[i * k + t] += acc;
          }
      }
    }
    if (b.grad_needed()) {
      double* db = b.grad().data();
      const double* pa = a.data().data();
      for (int64_t bt = 0; bt < batches; ++bt) {
        const double* DY = dy + bt * m * n;
        const double* A = pa + bt * m * k;
        double* DB = db + bt * k * n;
        for (int64_t i = 0; i < m; ++i)
          for (int64_t t = 0; t < k; ++t) {
            const double av = A[i * k + t];
            const double* dyrow = DY + i * n;
            double* dbrow = DB + t * n;
            for (int64_t j = 0; j < n; ++j) dbrow[j] += av * dyrow[j];
          }
      }
    }
  });
  return y;
}

Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2 || !same_leading(a.shape(), b.shape(), 2))
    throw ContractError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  const int64_t m = a.dim(a.ndim() - 2), k = a.dim(a.ndim() - 1);
  const int64_t n = b.dim(b.ndim() - 2), k2 = b.dim(b.ndim() - 1);
  if (k != k2)
    throw ContractError("matmul_nt: inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  const int64_t batches = a.numel() / (m * k);

  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(static_cast<size_t>(batches * m * n), 0.0);
  {
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (int64_t bt = 0; bt < batches; ++bt) {
      const double* A = pa + bt * m * k;
      const double* B = pb + bt * n * k;
      double* Y = out.data() + bt * m * n;
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
          const double* arow = A + i * k;
          const double* brow = B + j * k;
          double acc = 0.0;
          for (int64_t t = 0; t < k; ++t) acc += arow[t] * brow[t];
          Y[i * n + j] = acc;
        }
    }
  }

  Tensor y = tape.make_op_output(std::move(out_shape), std::move(out), {a, b});
  tape.set_last_backward([a = a, b = b, y, m, k, n, batches]() mutable {
    if (!y.has_grad() || !y.grad_needed()) return;
    const double* dy = y.grad().data();
    if (a.grad_needed()) {
      double* da = a.grad().data();
      const double* pb = b.data().data();
      for (int64_t bt = 0; bt < batches; ++bt) {
        const double* DY = dy + bt * m * n;
        const double* B = pb + bt * n * k;
        double* DA = da + bt * m * k;
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j) {
            const double g = DY[i * n + j];
            const double* brow = B + j * k;
            double* darow = DA + i * k;
            for (int64_t t = 0; t < k; ++t) darow[t] += g * brow[t];
          }
      }
    }
    if (b.grad_needed()) {
      double* db = b.grad().data();
      const double* pa = a.data().data();
      for (int64_t bt = 0; bt < batches; ++bt) {
        const double* DY = dy + bt * m * n;
        const double* A = pa + bt * m * k;
        double* DB = db + bt * n * k;
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j) {
            const double g = DY[i * n + j];
            const double* arow = A + i * k;
            double* dbrow = DB + j * k;
            for (int64_t t = 0; t < k; ++t) dbrow[t] += g * arow[t];
          }
      }
    }
  });
  return y;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w) {
  if (w.ndim() != 2)
    throw ContractError("linear: weight must be 2-D, got " + shape_str(w.shape()));
  if (x.ndim() < 1 || x.dim(x.ndim() - 1) != w.dim(1))
    throw ContractError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                        shape_str(w.shape()));
  const int64_t in = w.dim(1), out_dim = w.dim(0);
  const int64_t rows = x.numel() / in;

  Shape out_shape(x.shape());
  out_shape.back() = out_dim;
  std::vector<double> out(static_cast<size_t>(rows * out_dim), 0.0);
  {
    const double* px = x.data().data();
    const double* pw = w.data().data();
    for (int64_t r = 0; r < rows; ++r) {
      const double* xrow = px + r * in;
      double* yrow = out.data() + r * out_dim;
      for (int64_t o = 0; o < out_dim; ++o) {
        const double* wrow = pw + o * in;
        double acc = 0.0;
        for (int64_t i = 0; i < in; ++i) acc += xrow[i] * wrow[i];
        yrow[o] = acc;
      }
    }
  }

  Tensor y = tape.make_op_output(std::move(out_shape), std::move(out), {x, w});
  tape.set_last_backward([x = x, w = w, y, rows, in, out_dim]() mutable {
    if (!y.has_grad() || !y.grad_needed()) return;
    const double* dy = y.grad().data();
    if (x.grad_needed()) {
      double* dx = x.grad().data();
      const double* pw = w.data().data();
      for (int64_t r = 0; r < rows; ++r) {
        const double* dyrow = dy + r * out_dim;
        double* dxrow = dx + r * in;
        for (int64_t o = 0; o < out_dim; ++o) {
          const double g = dyrow[o];
          const double* wrow = pw + o * in;
          for (int64_t i = 0; i < in; ++i) dxrow[i] += g * wrow[i];
        }
      }
    }
    if (w.grad_needed()) {
      double* dw = w.grad().data();
      const double* px = x.data().data();
      for (int64_t r = 0; r < rows; ++r) {
        const double* dyrow = dy + r * out_dim;
        const double* xrow = px + r * in;
        for (int64_t o = 0; o < out_dim; ++o) {
          const double g = dyrow[o];
          double* dwrow = dw + o * in;
          for (int64_t i = 0; i < in; ++i) dwrow[i] += g * xrow[i];
        }
      }
    }
  });
  return y;
}

// ---- elementwise -----------------------------------------------------------

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  const int64_t block = broadcast_suffix(a, b, "add");
  const int64_t total = a.numel();
  std::vector<double> out(a.data());
  const double* pb = b.data().data();
  for (int64_t i = 0; i < total; ++i) out[static_cast<size_t>(i)] += pb[i % block];

  Tensor y = tape.make_op_output(a.shape(), std::move(out), {a, b});
  tape.set_last_backward([a = a, b = b, y, block, total]() mutable {
    if (!y.has_grad() || !y.grad_needed()) return;
    const double* dy = y.grad().data();
    if (a.grad_needed()) {
      double* da = a.grad().data();
      for (int64_t i = 0; i < total; ++i) da[i] += dy[i];
    }
    if (b.grad_needed()) {
      double* db = b.grad().data();
      for (int64_t i = 0; i < total; ++i) db[i % block] += dy[i];
    }
  });
  return y;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  const int64_t block = broadcast_suffix(a, b, "mul");
  const int64_t total = a.numel();
  std::vector<double> out(static_cast<size_t>(total));
  {
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (int64_t i = 0; i < total; ++i) out[static_cast<size_t>(i)] = pa[i] * pb[i % block];
  }
  Tensor y = tape.make_op_output(a.shape(), std::move(out), {a, b});
  tape.set_last_backward([a = a, b = b, y, block, total]() mutable {
    if (!y.has_grad() || !y.grad_needed()) return;
    const double* dy = y.grad().data();
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    if (a.grad_needed()) {
      double* da = a.grad().data();
      for (int64_t i = 0; i < total; ++i) da[i] += dy[i] * pb[i % block];
    }
    if (b.grad_needed()) {
      double* db = b.grad().data();
      for (int64_t i = 0; i < total; ++i) db[i % block] += dy[i] * pa[i];
    }
  });
  return y;
}

Tensor scale(Tape& tape, const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (double& v : out) v *= c;
  Tensor y = tape.make_op_output(a.shape(), std::move(out), {a});
  tape.set_last_backward([a = a, y, c]() mutable {
    if (!y.has_grad() || !y.grad_needed() || !a.grad_needed()) return;
    const double* dy = y.grad().data();
    double* da = a.grad().data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) da[i] += c * dy[i];
  });
  return y;
}

Tensor silu(Tape& tape, const Tensor& a) {
  const int64_t n = a.numel();
  std::vector<double> out(static_cast<size_t>(n));
  {
    const double* pa = a.data().data();
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = pa[i] * sigmoid(pa[i]);
  }
  Tensor y = tape.make_op_output(a.shape(), std::move(out), {a});
  tape.set_last_backward([a = a, y, n]() mutable {
    if (!y.has_grad() || !y.grad_needed() || !a.grad_needed()) return;
    const double* dy = y.grad().data();
    const double* pa = a.data().data();
    double* da = a.grad().data();
    for (int64_t i = 0; i < n; ++i) {
      const double s = sigmoid(pa[i]);
      da[i] += dy[i] * s * (1.0 + pa[i] * (1.0 - s));
    }
  });
  return y;
}

Tensor sum(Tape& tape, const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  Tensor y = tape.make_op_output({1}, {total}, {a});
  tape.set_last_backward([a = a, y]() mutable {
    if (!y.has_grad() || !y.grad_needed() || !a.grad_needed()) return;
    const double g = y.grad()[0];
    double* da = a.grad().data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) da[i] += g;
  });
  return y;
}

Tensor softmax_lastdim(Tape& tape, const Tensor& x) {
  if (x.ndim() < 1 || x.dim(x.ndim() - 1) < 1)
    throw ContractError("softmax: empty last dimension in " + shape_str(x.shape()));
  const int64_t n = x.dim(x.ndim() - 1);
  const int64_t rows = x.numel() / n;
  std::vector<double> out(static_cast<size_t>(x.numel()));
  {
    const double* px = x.data().data();
    for (int64_t r = 0; r < rows; ++r) {
      const double* xr = px + r * n;
      double* yr = out.data() + r * n;
      double mx = xr[0];
      for (int64_t i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
      if (!std::isfinite(mx))
        throw DataError("softmax: non-finite input value");
      double sum = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        yr[i] = std::exp(xr[i] - mx);
        sum += yr[i];
      }
      for (int64_t i = 0; i < n; ++i) yr[i] /= sum;
    }
  }
  Tensor y = tape.make_op_output(x.shape(), std::move(out), {x});
  tape.set_last_backward([x = x, y, rows, n]() mutable {
    if (!y.has_grad() || !y.grad_needed() || !x.grad_needed()) return;
    const double* dy = y.grad().data();
    const double* py = y.data().data();
    double* dx = x.grad().data();
    for (int64_t r = 0; r < rows; ++r) {
      const double* dyr = dy + r * n;
      const double* yr = py + r * n;
      double dot = 0.0;
      for (int64_t i = 0; i < n; ++i) dot += dyr[i] * yr[i];
      double* dxr = dx + r * n;
      for (int64_t i = 0; i < n; ++i) dxr[i] += yr[i] * (dyr[i] - dot);
    }
  });
  return y;
}

Tensor rms_norm(Tape& tape, const Tensor& x, const Tensor& weight) {
  if (weight.ndim() != 1 || x.dim(x.ndim() - 1) != weight.dim(0))
    throw ContractError("rms_norm: weight " + shape_str(weight.shape()) +
                        " does not match input " + shape_str(x.shape()));
  const int64_t n = x.dim(x.ndim() - 1);
  const int64_t rows = x.numel() / n;
  std::vector<double> out(static_cast<size_t>(x.numel()));
  std::vector<double> inv_rms(static_cast<size_t>(rows));
  {
    const double* px = x.data().data();
    const double* pw = weight.data().data();
    for (int64_t r = 0; r < rows; ++r) {
      const double* xr = px + r * n;
      double s2 = 0.0;
      for (int64_t i = 0; i < n; ++i) s2 += xr[i] * xr[i];
      const double inv = 1.0 / std::sqrt(s2 / static_cast<double>(n) + kRmsNormEps);
      inv_rms[static_cast<size_t>(r)] = inv;
      double* yr = out.data() + r * n;
      for (int64_t i = 0; i < n; ++i) yr[i] = xr[i] * inv * pw[i];
    }
  }
  Tensor y = tape.make_op_output(x.shape(), std::move(out), {x, weight});
  tape.set_last_backward([x = x, weight = weight, y, inv_rms = std::move(inv_rms), rows, n]() mutable {
    if (!y.has_grad() || !y.grad_needed()) return;
    const double* dy = y.grad().data();
    const double* px = x.data().data();
    const double* pw = weight.data().data();
    for (int64_t r = 0; r < rows; ++r) {
      const double inv = inv_rms[static_cast<size_t>(r)];
      const double* dyr = dy + r * n;
      const double* xr = px + r * n;
      if (weight.grad_needed()) {
        double* dw = weight.grad().data();
        for (int64_t i = 0; i < n; ++i) dw[i] += dyr[i] * xr[i] * inv;
      }
      if (x.grad_needed()) {
        double dot = 0.0;
        for (int64_t i = 0; i < n; ++i) dot += dyr[i] * pw[i] * xr[i];
        const double k = dot * inv * inv * inv / static_cast<double>(n);
        double* dxr = x.grad().data() + r * n;
        for (int64_t i = 0; i < n; ++i) dxr[i] += dyr[i] * pw[i] * inv - xr[i] * k;
      }
    }
  });
  return y;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ContractError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                        shape_str(shape));
  std::vector<double> out(x.data());
  Tensor y = tape.make_op_output(std::move(shape), std::move(out), {x});
  tape.set_last_backward([x = x, y]() mutable {
    if (!y.has_grad() || !y.grad_needed() || !x.grad_needed()) return;
    const double* dy = y.grad().data();
    double* dx = x.grad().data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) dx[i] += dy[i];
  });
  return y;
}

Tensor head_split(Tape& tape, const Tensor& x, int64_t heads) {
  if (x.ndim() != 3) throw ContractError("head_split: expected [b,s,H], got " + shape_str(x.shape()));
  const int64_t b = x.dim(0), s = x.dim(1), hdim = x.dim(2);
  if (hdim % heads != 0)
    throw ContractError("head_split: hidden " + std::to_string(hdim) +
                        " not divisible by heads " + std::to_string(heads));
  const int64_t d = hdim / heads;
  std::vector<double> out(static_cast<size_t>(x.numel()));
  {
    const double* px = x.data().data();
    for (int64_t bb = 0; bb < b; ++bb)
      for (int64_t hh = 0; hh < heads; ++hh)
        for (int64_t ss = 0; ss < s; ++ss) {
          const double* src = px + (bb * s + ss) * hdim + hh * d;
          double* dst = out.data() + ((bb * heads + hh) * s + ss) * d;
          std::memcpy(dst, src, static_cast<size_t>(d) * sizeof(double));
        }
  }
  Tensor y = tape.make_op_output({b, heads, s, d}, std::move(out), {x});
  tape.set_last_backward([x = x, y, b, s, heads, d, hdim]() mutable {
    if (!y.has_grad() || !y.grad_needed() || !x.grad_needed()) return;
    const double* dy = y.grad().data();
    double* dx = x.grad().data();
    for (int64_t bb = 0; bb < b; ++bb)
      for (int64_t hh = 0; hh < heads; ++hh)
        for (int64_t ss = 0; ss < s; ++ss) {
          const double* src = dy + ((bb * heads + hh) * s + ss) * d;
          double* dst = dx + (bb * s + ss) * hdim + hh * d;
          for (int64_t i = 0; i < d; ++i) dst[i] += src[i];
        }
  });
  return y;
}

Tensor head_merge(Tape& tape, const Tensor& x) {
  if (x.ndim() != 4) throw ContractError("head_merge: expected [b,h,s,d], got " + shape_str(x.shape()));
  const int64_t b = x.dim(0), heads = x.dim(1), s = x.dim(2), d = x.dim(3);
  const int64_t hdim = heads * d;
  std::vector<double> out(static_cast<size_t>(x.numel()));
  {
    const double* px = x.data().data();
    for (int64_t bb = 0; bb < b; ++bb)
      for (int64_t hh = 0; hh < heads; ++hh)
        for (int64_t ss = 0; ss < s; ++ss) {
          const double* src = px + ((bb * heads + hh) * s + ss) * d;
          double* dst = out.data() + (bb * s + ss) * hdim + hh * d;
          std::memcpy(dst, src, static_cast<size_t>(d) * sizeof(double));
        }
  }
  Tensor y = tape.make_op_output({b, s, hdim}, std::move(out), {x});
  tape.set_last_backward([x = x, y, b, s, heads, d, hdim]() mutable {
    if (!y.has_grad() || !y.grad_needed() || !x.grad_needed()) return;
    const double* dy = y.grad().data();
    double* dx = x.grad().data();
    for (int64_t bb = 0; bb < b; ++bb)
      for (int64_t hh = 0; hh < heads; ++hh)
        for (int64_t ss = 0; ss < s; ++ss) {
          const double* src = dy + (bb * s + ss) * hdim + hh * d;
          double* dst = dx + ((bb * heads + hh) * s + ss) * d;
          for (int64_t i = 0; i < d; ++i) dst[i] += src[i];
        }
  });
  return y;
}

Tensor embedding(Tape& tape, const Tensor& table, const std::vector<int32_t>& ids,
                 int64_t batch, int64_t seq) {
  if (table.ndim() != 2) throw ContractError("embedding: table must be 2-D");
  if (static_cast<int64_t>(ids.size()) != batch * seq)
    throw ContractError("embedding: ids length does not match batch*seq");
  const int64_t v = table.dim(0), h = table.dim(1);
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= v)
      throw DataError("embedding: token id " + std::to_string(ids[i]) + " at position " +
                      std::to_string(i) + " out of range [0," + std::to_string(v) + ")");
  }
  std::vector<double> out(static_cast<size_t>(batch * seq * h));
  {
    const double* pt = table.data().data();
    for (size_t i = 0; i < ids.size(); ++i)
      std::memcpy(out.data() + static_cast<int64_t>(i) * h, pt + ids[i] * h,
                  static_cast<size_t>(h) * sizeof(double));
  }
  Tensor y = tape.make_op_output({batch, seq, h}, std::move(out), {table});
  tape.set_last_backward([table = table, y, ids, h]() mutable {
    if (!y.has_grad() || !y.grad_needed() || !table.grad_needed()) return;
    const double* dy = y.grad().data();
    double* dt = table.grad().data();
    for (size_t i = 0; i < ids.size(); ++i) {
      const double* src = dy + static_cast<int64_t>(i) * h;
      double* dst = dt + ids[i] * h;
      for (int64_t j = 0; j < h; ++j) dst[j] += src[j];
    }
  });
  return y;
}

CrossEntropyResult cross_entropy(Tape& tape, const Tensor& logits,
                                 const std::vector<int32_t>& targets,
                                 const std::vector<uint8_t>& mask, Reduction reduction) {
  if (logits.ndim() != 3)
    throw ContractError("cross_entropy: logits must be [b,s,V], got " + shape_str(logits.shape()));
  const int64_t b = logits.dim(0), s = logits.dim(1), v = logits.dim(2);
  if (static_cast<int64_t>(targets.size()) != b * s || targets.size() != mask.size())
    throw ContractError("cross_entropy: targets/mask must be shaped b*s");

  int64_t count = 0;
  double total = 0.0;
  std::vector<double> lse(static_cast<size_t>(b * s), 0.0);
  {
    const double* pl = logits.data().data();
    for (int64_t p = 0; p < b * s; ++p) {
      if (!mask[static_cast<size_t>(p)]) continue;
      const int32_t tgt = targets[static_cast<size_t>(p)];
      if (tgt < 0 || tgt >= v)
        throw DataError("cross_entropy: target " + std::to_string(tgt) + " out of range at position " +
                        std::to_string(p));
      const double* row = pl + p * v;
      double mx = row[0];
      for (int64_t i = 1; i < v; ++i) mx = std::max(mx, row[i]);
      double sum = 0.0;
      for (int64_t i = 0; i < v; ++i) sum += std::exp(row[i] - mx);
      const double l = mx + std::log(sum);
      lse[static_cast<size_t>(p)] = l;
      total += l - row[tgt];
      ++count;
    }
  }
  if (count == 0) throw DataError("cross_entropy: every position is masked out (empty loss)");

  const double value = reduction == Reduction::kMean ? total / static_cast<double>(count) : total;
  Tensor loss = tape.make_op_output({1}, {value}, {logits});
  tape.set_last_backward([logits = logits, loss, targets, mask, lse = std::move(lse), b, s, v, count,
                          reduction]() mutable {
    if (!loss.has_grad() || !logits.grad_needed()) return;
    const double seed = loss.grad()[0];
    const double f = reduction == Reduction::kMean ? seed / static_cast<double>(count) : seed;
    const double* pl = logits.data().data();
    double* dl = logits.grad().data();
    for (int64_t p = 0; p < b * s; ++p) {
      if (!mask[static_cast<size_t>(p)]) continue;
      const double* row = pl + p * v;
      double* drow = dl + p * v;
      const double l = lse[static_cast<size_t>(p)];
      const int32_t tgt = targets[static_cast<size_t>(p)];
      for (int64_t i = 0; i < v; ++i) drow[i] += f * std::exp(row[i] - l);
      drow[tgt] -= f;
    }
  });
  return CrossEntropyResult{loss, count};
}

// ---- finite differences ----------------------------------------------------

double finite_diff_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                         const Tensor& x, double h) {
  if (h <= 0.0) throw ContractError("finite_diff_check: h must be positive");

  std::vector<double> analytic;
  {
    Tape tape;
    Tensor xl = Tensor::leaf(x.shape(), x.data(), true);
    Tensor out = f(tape, xl);
    if (out.numel() != 1) throw ContractError("finite_diff_check: f must be scalar-valued");
    tape.backward(out);
    analytic = xl.grad();
  }

  auto eval = [&](const std::vector<double>& vals) {
    Tape tape;
    Tensor xl = Tensor::leaf(x.shape(), vals, false);
    return f(tape, xl).item();
  };

  double worst = 0.0;
  std::vector<double> vals = x.data();
  for (size_t i = 0; i < vals.size(); ++i) {
    const double orig = vals[i];
    vals[i] = orig + h;
    const double fp = eval(vals);
    vals[i] = orig - h;
    const double fm = eval(vals);
    vals[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace minicollie
