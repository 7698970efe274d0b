// SPDX-License-Identifier: Apache-2.0

#include "imad/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace imad {

namespace {

// out (r x c) += a (r x k) * b (k x c), all row-major. Each output element
// accumulates over k in a fixed order whatever the buffer alignment, so
// results are bit-reproducible; the inner loop vectorises across columns.
void gemm_accumulate(const double* a, const double* b, double* out, std::size_t r,
                     std::size_t k, std::size_t c) {
  for (std::size_t i = 0; i < r; ++i) {
    double* row = out + i * c;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = a[i * k + p];
      const double* brow = b + p * c;
      for (std::size_t j = 0; j < c; ++j) row[j] += s * brow[j];
    }
  }
}

std::vector<double> transposed(std::span<const double> m, std::size_t rows, std::size_t cols) {
  std::vector<double> t(m.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = m[i * cols + j];
  return t;
}

thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_flops = 0;

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

[[noreturn]] void shape_fail(const char* kind, const std::string& detail) {
  throw ShapeError(std::string(kind) + ": " + detail);
}

void require_matrix(const char* kind, const Tensor& t) {
  if (!t.defined()) shape_fail(kind, "undefined tensor operand");
  if (t.rank() == 0 || t.rank() > 2)
    shape_fail(kind, "expected rank 1 or 2, got " + shape_string(t.shape()));
}

void check_finite(const char* kind, const std::vector<double>& values) {
  for (double v : values) {
    if (!std::isfinite(v))
      throw NumericError(std::string(kind) + ": non-finite value produced");
  }
}

// Broadcast descriptor for the second operand of elementwise binary ops.
struct Broadcast {
  std::size_t rows, cols;
  bool row_bcast, col_bcast;
  std::size_t index(std::size_t i, std::size_t j) const {
    return (row_bcast ? 0 : i) * cols + (col_bcast ? 0 : j);
  }
};

Broadcast broadcast_of(const char* kind, const Tensor& a, const Tensor& b) {
  require_matrix(kind, a);
  require_matrix(kind, b);
  const std::size_t ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  const bool rows_ok = br == ar || br == 1;
  const bool cols_ok = bc == ac || bc == 1;
  if (!rows_ok || !cols_ok)
    shape_fail(kind, "cannot broadcast " + shape_string(b.shape()) + " onto " +
                         shape_string(a.shape()));
  return Broadcast{br, bc, br == 1 && ar != 1, bc == 1 && ac != 1};
}

int normalize_axis(const char* kind, int axis) {
  if (axis < -1 || axis > 1)
    shape_fail(kind, "axis must be -1, 0 or 1, got " + std::to_string(axis));
  return axis;
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = product(shape);
  return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape.empty()) throw ShapeError("tensor: shape must have at least one extent");
  for (std::size_t e : shape)
    if (e == 0) throw ShapeError("tensor: zero extent in " + shape_string(shape));
  if (product(shape) != data.size())
    throw ShapeError("tensor: shape " + shape_string(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1, 1}, {value}, requires_grad);
}

Tensor Tensor::row(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return from_data({1, n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows,
                      bool requires_grad) {
  std::vector<double> data;
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("tensor: ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return from_data({r, c}, std::move(data), requires_grad);
}

std::size_t Tensor::rows() const {
  return rank() == 1 ? 1 : impl_->shape[0];
}

std::size_t Tensor::cols() const {
  return rank() == 1 ? impl_->shape[0] : impl_->shape[1];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (r >= rows() || c >= cols())
    throw ShapeError("tensor: index out of range for " + shape_string(shape()));
  return impl_->data[r * cols() + c];
}

double Tensor::item() const {
  if (size() != 1)
    throw ShapeError("tensor: item() on non-scalar " + shape_string(shape()));
  return impl_->data[0];
}

void Tensor::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  if (!flag) impl_->grad.clear();
}

std::vector<double> Tensor::grad() const {
  if (impl_->grad.empty()) return std::vector<double>(size(), 0.0);
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  return from_data(shape(), impl_->data, false);
}

Tensor Tensor::clone() const {
  return from_data(shape(), impl_->data, impl_->requires_grad);
}

// ---------------------------------------------------------------------------
// Graph machinery

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

namespace flops {
void reset() { t_flops = 0; }
std::uint64_t count() { return t_flops; }
void add(std::uint64_t n) { t_flops += n; }
}  // namespace flops

Tensor make_result(const char* kind, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs,
                   std::function<void(const detail::TensorImpl&)> backward_fn) {
  check_finite(kind, data);
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    impl->requires_grad = true;
    auto node = std::make_shared<detail::Node>();
    node->kind = kind;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward_fn);
    impl->node = std::move(node);
  }
  return Tensor(std::move(impl));
}

void accumulate_grad(const Tensor& t, std::span<const double> g) {
  auto& impl = t.impl();
  if (!impl.requires_grad) return;
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) impl.grad[i] += g[i];
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw GraphError("backward: undefined loss tensor");
  if (loss.size() != 1)
    throw GraphError("backward: loss must be scalar, got " + shape_string(loss.shape()));
  if (loss.is_leaf())
    throw GraphError("backward: loss has no recorded graph");

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<const detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(&loss.impl(), 0);
  visited.insert(&loss.impl());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      detail::TensorImpl* child = &impl->node->inputs[next].impl();
      ++next;
      if (child->requires_grad && visited.insert(child).second)
        stack.emplace_back(child, 0);
    } else {
      order.push_back(impl);
      stack.pop_back();
    }
  }

  auto& root = loss.impl();
  if (root.grad.empty()) root.grad.assign(1, 0.0);
  root.grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* impl = *it;
    if (!impl->node) continue;
    if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
    impl->node->backward(*impl);
  }

  // Consume the graph: interior nodes drop their links and gradients.
  for (detail::TensorImpl* impl : order) {
    if (impl->node) {
      impl->node.reset();
      impl->grad.clear();
      impl->grad.shrink_to_fit();
    } else {
      check_finite("backward", impl->grad);
    }
  }
}

// ---------------------------------------------------------------------------
// Operations

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
  if (b.rows() != k)
    shape_fail("matmul", "inner dimensions differ: " + shape_string(a.shape()) +
                             " x " + shape_string(b.shape()));
  std::vector<double> out(r * c, 0.0);
  gemm_accumulate(a.data().data(), b.data().data(), out.data(), r, k, c);
  flops::add(2ull * r * k * c);
  return make_result("matmul", {r, c}, std::move(out), {a, b},
                     [a, b, r, k, c](const detail::TensorImpl& o) {
                       if (a.requires_grad()) {
                         // dA = dOut * B^T
                         const auto bt = transposed(b.data(), k, c);
                         std::vector<double> ga(r * k, 0.0);
                         gemm_accumulate(o.grad.data(), bt.data(), ga.data(), r, c, k);
                         accumulate_grad(a, ga);
                       }
                       if (b.requires_grad()) {
                         // dB = A^T * dOut
                         const auto at = transposed(a.data(), r, k);
                         std::vector<double> gb(k * c, 0.0);
                         gemm_accumulate(at.data(), o.grad.data(), gb.data(), k, r, c);
                         accumulate_grad(b, gb);
                       }
                     });
}

namespace {

enum class Binary { add, sub, mul };

Tensor binary(const char* kind, Binary op, const Tensor& a, const Tensor& b) {
  const Broadcast bc = broadcast_of(kind, a, b);
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double x = ad[i * c + j], y = bd[bc.index(i, j)];
      out[i * c + j] = op == Binary::add ? x + y : op == Binary::sub ? x - y : x * y;
    }
  flops::add(r * c);
  return make_result(kind, {r, c}, std::move(out), {a, b},
                     [a, b, op, bc, r, c](const detail::TensorImpl& o) {
                       const auto& go = o.grad;
                       if (a.requires_grad()) {
                         if (op == Binary::mul) {
                           std::vector<double> ga(r * c);
                           const auto bd = b.data();
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j)
                               ga[i * c + j] = go[i * c + j] * bd[bc.index(i, j)];
                           accumulate_grad(a, ga);
                         } else {
                           accumulate_grad(a, go);
                         }
                       }
                       if (b.requires_grad()) {
                         std::vector<double> gb(bc.rows * bc.cols, 0.0);
                         const auto ad = a.data();
                         for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < c; ++j) {
                             double g = go[i * c + j];
                             if (op == Binary::sub) g = -g;
                             if (op == Binary::mul) g *= ad[i * c + j];
                             gb[bc.index(i, j)] += g;
                           }
                         accumulate_grad(b, gb);
                       }
                     });
}

template <class Fwd, class Deriv>
Tensor unary(const char* kind, const Tensor& a, Fwd fwd, Deriv deriv) {
  require_matrix(kind, a);
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  const auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i]);
  flops::add(r * c);
  auto result = make_result(kind, {r, c}, std::move(out), {a}, nullptr);
  if (!result.is_leaf()) {
    // The derivative is expressed through input x and output y.
    result.impl().node->backward = [a, deriv](const detail::TensorImpl& o) {
      std::vector<double> ga(o.data.size());
      const auto ad = a.data();
      for (std::size_t i = 0; i < ga.size(); ++i)
        ga[i] = o.grad[i] * deriv(ad[i], o.data[i]);
      accumulate_grad(a, ga);
    };
  }
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", Binary::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", Binary::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", Binary::mul, a, b); }

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) shape_fail("concat", "no operands");
  if (axis != 0 && axis != 1) shape_fail("concat", "axis must be 0 or 1");
  for (const auto& p : parts) require_matrix("concat", p);
  const std::size_t r0 = parts[0].rows(), c0 = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (axis == 0 && p.cols() != c0)
      shape_fail("concat", "column count " + std::to_string(p.cols()) +
                               " differs from " + std::to_string(c0));
    if (axis == 1 && p.rows() != r0)
      shape_fail("concat", "row count " + std::to_string(p.rows()) + " differs from " +
                               std::to_string(r0));
    total += axis == 0 ? p.rows() : p.cols();
  }
  const std::size_t r = axis == 0 ? total : r0;
  const std::size_t c = axis == 0 ? c0 : total;
  std::vector<double> out(r * c);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto pd = p.data();
    const std::size_t pr = p.rows(), pc = p.cols();
    for (std::size_t i = 0; i < pr; ++i)
      for (std::size_t j = 0; j < pc; ++j) {
        const std::size_t oi = axis == 0 ? offset + i : i;
        const std::size_t oj = axis == 0 ? j : offset + j;
        out[oi * c + oj] = pd[i * pc + j];
      }
    offset += axis == 0 ? pr : pc;
  }
  return make_result("concat", {r, c}, std::move(out), parts,
                     [parts, axis, c](const detail::TensorImpl& o) {
                       std::size_t offset = 0;
                       for (const auto& p : parts) {
                         const std::size_t pr = p.rows(), pc = p.cols();
                         if (p.requires_grad()) {
                           std::vector<double> gp(pr * pc);
                           for (std::size_t i = 0; i < pr; ++i)
                             for (std::size_t j = 0; j < pc; ++j) {
                               const std::size_t oi = axis == 0 ? offset + i : i;
                               const std::size_t oj = axis == 0 ? j : offset + j;
                               gp[i * pc + j] = o.grad[oi * c + oj];
                             }
                           accumulate_grad(p, gp);
                         }
                         offset += axis == 0 ? pr : pc;
                       }
                     });
}

Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t length) {
  require_matrix("split", a);
  if (axis != 0 && axis != 1) shape_fail("split", "axis must be 0 or 1");
  const std::size_t r = a.rows(), c = a.cols();
  const std::size_t extent = axis == 0 ? r : c;
  if (length == 0 || begin + length > extent)
    shape_fail("split", "range [" + std::to_string(begin) + ", " +
                            std::to_string(begin + length) + ") exceeds extent " +
                            std::to_string(extent) + " of " + shape_string(a.shape()));
  const std::size_t orow = axis == 0 ? length : r;
  const std::size_t ocol = axis == 0 ? c : length;
  std::vector<double> out(orow * ocol);
  const auto ad = a.data();
  for (std::size_t i = 0; i < orow; ++i)
    for (std::size_t j = 0; j < ocol; ++j) {
      const std::size_t si = axis == 0 ? begin + i : i;
      const std::size_t sj = axis == 0 ? j : begin + j;
      out[i * ocol + j] = ad[si * c + sj];
    }
  return make_result("split", {orow, ocol}, std::move(out), {a},
                     [a, axis, begin, orow, ocol, c](const detail::TensorImpl& o) {
                       std::vector<double> ga(a.size(), 0.0);
                       for (std::size_t i = 0; i < orow; ++i)
                         for (std::size_t j = 0; j < ocol; ++j) {
                           const std::size_t si = axis == 0 ? begin + i : i;
                           const std::size_t sj = axis == 0 ? j : begin + j;
                           ga[si * c + sj] = o.grad[i * ocol + j];
                         }
                       accumulate_grad(a, ga);
                     });
}

std::vector<Tensor> split(const Tensor& a, const std::vector<std::size_t>& sizes,
                          int axis) {
  require_matrix("split", a);
  const std::size_t extent = axis == 0 ? a.rows() : a.cols();
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (total != extent)
    shape_fail("split", "sizes sum to " + std::to_string(total) + " but extent is " +
                            std::to_string(extent));
  std::vector<Tensor> out;
  std::size_t begin = 0;
  for (std::size_t s : sizes) {
    out.push_back(slice(a, axis, begin, s));
    begin += s;
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_matrix("reshape", a);
  if (shape.size() == 1) shape = {1, shape[0]};
  if (shape.size() != 2 || product(shape) != a.size())
    shape_fail("reshape", "cannot view " + shape_string(a.shape()) + " as " +
                              shape_string(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {a},
                     [a](const detail::TensorImpl& o) { accumulate_grad(a, o.grad); });
}

Tensor transpose(const Tensor& a) {
  require_matrix("transpose", a);
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  const auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = ad[i * c + j];
  return make_result("transpose", {c, r}, std::move(out), {a},
                     [a, r, c](const detail::TensorImpl& o) {
                       std::vector<double> ga(r * c);
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j)
                           ga[i * c + j] = o.grad[j * r + i];
                       accumulate_grad(a, ga);
                     });
}

Tensor shift_rows(const Tensor& a, int offset, PadMode mode) {
  require_matrix("shift_rows", a);
  const std::size_t r = a.rows(), c = a.cols();
  const auto n = static_cast<long>(r);
  // source row for each output row, or -1 for a zero pad row
  std::vector<long> source(r);
  for (long i = 0; i < n; ++i) {
    long s = i - offset;
    if (mode == PadMode::ring) {
      s = ((s % n) + n) % n;
    } else if (s < 0 || s >= n) {
      s = -1;
    }
    source[static_cast<std::size_t>(i)] = s;
  }
  std::vector<double> out(r * c, 0.0);
  const auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i)
    if (source[i] >= 0)
      std::copy_n(ad.begin() + source[i] * static_cast<long>(c), c, out.begin() + i * c);
  return make_result("shift_rows", {r, c}, std::move(out), {a},
                     [a, source, c](const detail::TensorImpl& o) {
                       std::vector<double> ga(a.size(), 0.0);
                       for (std::size_t i = 0; i < source.size(); ++i)
                         if (source[i] >= 0)
                           for (std::size_t j = 0; j < c; ++j)
                             ga[source[i] * c + j] += o.grad[i * c + j];
                       accumulate_grad(a, ga);
                     });
}

Tensor softmax(const Tensor& a, int axis) {
  require_matrix("softmax", a);
  if (axis != 0 && axis != 1) shape_fail("softmax", "axis must be 0 or 1");
  const std::size_t r = a.rows(), c = a.cols();
  const std::size_t groups = axis == 1 ? r : c;
  const std::size_t len = axis == 1 ? c : r;
  auto at = [=](std::size_t g, std::size_t k) {
    return axis == 1 ? g * c + k : k * c + g;
  };
  std::vector<double> out(r * c);
  const auto ad = a.data();
  for (std::size_t g = 0; g < groups; ++g) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, ad[at(g, k)]);
    double z = 0.0;
    for (std::size_t k = 0; k < len; ++k) {
      const double e = std::exp(ad[at(g, k)] - mx);
      out[at(g, k)] = e;
      z += e;
    }
    for (std::size_t k = 0; k < len; ++k) out[at(g, k)] /= z;
  }
  flops::add(3ull * r * c);
  return make_result("softmax", {r, c}, std::move(out), {a},
                     [a, groups, len, at](const detail::TensorImpl& o) {
                       std::vector<double> ga(o.data.size());
                       for (std::size_t g = 0; g < groups; ++g) {
                         double dot = 0.0;
                         for (std::size_t k = 0; k < len; ++k)
                           dot += o.grad[at(g, k)] * o.data[at(g, k)];
                         for (std::size_t k = 0; k < len; ++k)
                           ga[at(g, k)] = o.data[at(g, k)] * (o.grad[at(g, k)] - dot);
                       }
                       accumulate_grad(a, ga);
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_matrix("layer_norm", x);
  require_matrix("layer_norm", gain);
  require_matrix("layer_norm", bias);
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.size() != c || bias.size() != c)
    shape_fail("layer_norm", "gain/bias width " + std::to_string(gain.size()) + "/" +
                                 std::to_string(bias.size()) + " != input width " +
                                 std::to_string(c));
  std::vector<double> out(r * c), xhat(r * c), inv_std(r);
  const auto xd = x.data(), gd = gain.data(), bd = bias.data();
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xd[i * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = xd[i * c + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xd[i * c + j] - mu) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * gd[j] + bd[j];
    }
  }
  flops::add(8ull * r * c);
  return make_result(
      "layer_norm", {r, c}, std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), r,
       c](const detail::TensorImpl& o) {
        const auto gd = gain.data();
        if (x.requires_grad()) {
          std::vector<double> gx(r * c);
          const double inv_c = 1.0 / static_cast<double>(c);
          for (std::size_t i = 0; i < r; ++i) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dxh = o.grad[i * c + j] * gd[j];
              m1 += dxh;
              m2 += dxh * xhat[i * c + j];
            }
            m1 *= inv_c;
            m2 *= inv_c;
            for (std::size_t j = 0; j < c; ++j) {
              const double dxh = o.grad[i * c + j] * gd[j];
              gx[i * c + j] = inv_std[i] * (dxh - m1 - xhat[i * c + j] * m2);
            }
          }
          accumulate_grad(x, gx);
        }
        if (gain.requires_grad() || bias.requires_grad()) {
          std::vector<double> gg(c, 0.0), gb(c, 0.0);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) {
              gg[j] += o.grad[i * c + j] * xhat[i * c + j];
              gb[j] += o.grad[i * c + j];
            }
          accumulate_grad(gain, gg);
          accumulate_grad(bias, gb);
        }
      });
}

Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids) {
  require_matrix("embedding_lookup", table);
  if (ids.empty()) shape_fail("embedding_lookup", "no ids given");
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * d);
  const auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v)
      shape_fail("embedding_lookup", "id " + std::to_string(ids[i]) +
                                         " out of range for table of " +
                                         std::to_string(v) + " rows");
    std::copy_n(td.begin() + ids[i] * d, d, out.begin() + i * d);
  }
  return make_result("embedding_lookup", {ids.size(), d}, std::move(out), {table},
                     [table, ids, d](const detail::TensorImpl& o) {
                       std::vector<double> gt(table.size(), 0.0);
                       for (std::size_t i = 0; i < ids.size(); ++i)
                         for (std::size_t j = 0; j < d; ++j)
                           gt[ids[i] * d + j] += o.grad[i * d + j];
                       accumulate_grad(table, gt);
                     });
}

namespace {

Tensor reduce(const char* kind, const Tensor& a, int axis, bool average) {
  require_matrix(kind, a);
  normalize_axis(kind, axis);
  const std::size_t r = a.rows(), c = a.cols();
  const std::size_t orow = axis == 1 ? r : 1;
  const std::size_t ocol = axis == 0 ? c : 1;
  const double count = axis == 0 ? double(r) : axis == 1 ? double(c) : double(r * c);
  const double f = average ? 1.0 / count : 1.0;
  std::vector<double> out(orow * ocol, 0.0);
  const auto ad = a.data();
  auto oidx = [=](std::size_t i, std::size_t j) {
    return axis == 0 ? j : axis == 1 ? i : std::size_t{0};
  };
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[oidx(i, j)] += ad[i * c + j];
  for (double& v : out) v *= f;
  flops::add(r * c);
  return make_result(kind, {orow, ocol}, std::move(out), {a},
                     [a, r, c, f, oidx](const detail::TensorImpl& o) {
                       std::vector<double> ga(r * c);
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j)
                           ga[i * c + j] = o.grad[oidx(i, j)] * f;
                       accumulate_grad(a, ga);
                     });
}

}  // namespace

Tensor sum(const Tensor& a, int axis) { return reduce("sum", a, axis, false); }
Tensor mean(const Tensor& a, int axis) { return reduce("mean", a, axis, true); }

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  require_matrix("cosine_similarity", a);
  require_matrix("cosine_similarity", b);
  if (a.size() != b.size())
    shape_fail("cosine_similarity", "operands " + shape_string(a.shape()) + " and " +
                                        shape_string(b.shape()) + " differ in size");
  const auto ad = a.data(), bd = b.data();
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) {
    dot += ad[i] * bd[i];
    na2 += ad[i] * ad[i];
    nb2 += bd[i] * bd[i];
  }
  const double na = std::sqrt(na2), nb = std::sqrt(nb2);
  const bool degenerate = na == 0.0 || nb == 0.0;
  const double cosv = degenerate ? 0.0 : dot / (na * nb);
  flops::add(6ull * ad.size());
  return make_result("cosine_similarity", {1, 1}, {cosv}, {a, b},
                     [a, b, na, nb, cosv, degenerate](const detail::TensorImpl& o) {
                       if (degenerate) return;
                       const double g = o.grad[0];
                       const auto ad = a.data(), bd = b.data();
                       const std::size_t n = ad.size();
                       if (a.requires_grad()) {
                         std::vector<double> ga(n);
                         for (std::size_t i = 0; i < n; ++i)
                           ga[i] = g * (bd[i] / (na * nb) - cosv * ad[i] / (na * na));
                         accumulate_grad(a, ga);
                       }
                       if (b.requires_grad()) {
                         std::vector<double> gb(n);
                         for (std::size_t i = 0; i < n; ++i)
                           gb[i] = g * (ad[i] / (na * nb) - cosv * bd[i] / (nb * nb));
                         accumulate_grad(b, gb);
                       }
                     });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets) {
  require_matrix("cross_entropy", logits);
  const std::size_t r = logits.rows(), c = logits.cols();
  if (targets.size() != r)
    shape_fail("cross_entropy", std::to_string(targets.size()) + " targets for " +
                                    std::to_string(r) + " rows");
  std::vector<double> probs(r * c);
  double loss = 0.0;
  const auto ld = logits.data();
  for (std::size_t i = 0; i < r; ++i) {
    if (targets[i] >= c)
      shape_fail("cross_entropy", "target " + std::to_string(targets[i]) +
                                      " out of range for " + std::to_string(c) +
                                      " classes");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, ld[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(ld[i * c + j] - mx);
      z += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    loss += -(ld[i * c + targets[i]] - mx - std::log(z));
  }
  loss /= static_cast<double>(r);
  flops::add(4ull * r * c);
  return make_result("cross_entropy", {1, 1}, {loss}, {logits},
                     [logits, targets, probs = std::move(probs), r,
                      c](const detail::TensorImpl& o) {
                       const double g = o.grad[0] / static_cast<double>(r);
                       std::vector<double> gl(r * c);
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j)
                           gl[i * c + j] =
                               g * (probs[i * c + j] - (j == targets[i] ? 1.0 : 0.0));
                       accumulate_grad(logits, gl);
                     });
}

Tensor binary_cross_entropy_with_logits(const Tensor& logits,
                                        const std::vector<double>& labels) {
  require_matrix("binary_cross_entropy", logits);
  const std::size_t n = logits.size();
  if (labels.size() != n)
    shape_fail("binary_cross_entropy", std::to_string(labels.size()) + " labels for " +
                                           std::to_string(n) + " logits");
  const auto zd = logits.data();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = zd[i], y = labels[i];
    loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  loss /= static_cast<double>(n);
  flops::add(5ull * n);
  return make_result("binary_cross_entropy", {1, 1}, {loss}, {logits},
                     [logits, labels, n](const detail::TensorImpl& o) {
                       const double g = o.grad[0] / static_cast<double>(n);
                       const auto zd = logits.data();
                       std::vector<double> gz(n);
                       for (std::size_t i = 0; i < n; ++i) {
                         const double z = zd[i];
                         const double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z))
                                                 : std::exp(z) / (1.0 + std::exp(z));
                         gz[i] = g * (s - labels[i]);
                       }
                       accumulate_grad(logits, gz);
                     });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_matrix("mse", a);
  require_matrix("mse", b);
  if (a.size() != b.size())
    shape_fail("mse", "operands " + shape_string(a.shape()) + " and " +
                          shape_string(b.shape()) + " differ in size");
  const auto ad = a.data(), bd = b.data();
  const std::size_t n = ad.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) loss += (ad[i] - bd[i]) * (ad[i] - bd[i]);
  loss /= static_cast<double>(n);
  flops::add(3ull * n);
  return make_result("mse", {1, 1}, {loss}, {a, b}, [a, b, n](const detail::TensorImpl& o) {
    const double g = 2.0 * o.grad[0] / static_cast<double>(n);
    const auto ad = a.data(), bd = b.data();
    std::vector<double> ga(n), gb(n);
    for (std::size_t i = 0; i < n; ++i) {
      ga[i] = g * (ad[i] - bd[i]);
      gb[i] = -ga[i];
    }
    accumulate_grad(a, ga);
    accumulate_grad(b, gb);
  });
}

}  // namespace ops

}  // namespace imad
