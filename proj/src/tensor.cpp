#include "pvae/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "pvae/error.hpp"

namespace pvae {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::span<double> Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

namespace {

void check_shape(const Shape& shape) {
  for (auto d : shape)
    if (d == 0) throw ShapeError("zero-sized dimension in shape " + to_string(shape));
}

void ensure_finite(std::span<const double> values, const char* op) {
  for (double v : values)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
}

const Node& ref(const Tensor& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
  return *t.node();
}

// Builds the output node; inputs and the backward rule are only kept when
// some input participates in differentiation.
Tensor make_result(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> fn, const char* op) {
  ensure_finite(value, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  for (const auto& in : inputs) {
    if (in.requires_grad()) {
      node->requires_grad = true;
      break;
    }
  }
  if (node->requires_grad) {
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward_fn = std::move(fn);
  }
  return Tensor::from_node(std::move(node));
}

Tensor make_result_n(Shape shape, std::vector<double> value, std::span<const Tensor> inputs,
                     std::function<void(Node&)> fn, const char* op) {
  ensure_finite(value, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad =
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (node->requires_grad) {
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward_fn = std::move(fn);
  }
  return Tensor::from_node(std::move(node));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (ref(a, op).shape != ref(b, op).shape)
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
}

template <class F, class G>
Tensor unary(const Tensor& a, const char* op, F forward, G derivative) {
  const auto& in = ref(a, op).value;
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = forward(in[i]);
  return make_result(
      a.shape(), std::move(out), {a},
      [derivative](Node& self) {
        Node& x = *self.inputs[0];
        if (!x.requires_grad) return;
        auto gx = x.grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i)
          gx[i] += self.grad[i] * derivative(x.value[i], self.value[i]);
      },
      op);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, double fill) {
  check_shape(shape);
  node_ = std::make_shared<Node>();
  node_->value.assign(numel(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  check_shape(shape);
  if (numel(shape) != values.size())
    throw ShapeError("tensor shape " + to_string(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const { return ref(*this, "shape").shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
  return s[axis];
}

std::size_t Tensor::size() const { return ref(*this, "size").value.size(); }

std::span<const double> Tensor::data() const { return ref(*this, "data").value; }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::is_leaf() const { return node_ && !node_->backward_fn; }

std::span<const double> Tensor::grad() const { return ref(*this, "grad").grad; }

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw ShapeError("mutable_data() on an interior graph node");
  return node_->value;
}

std::span<double> Tensor::mutable_grad() {
  ref(*this, "grad");
  return node_->grad;
}

Tensor Tensor::detach() const { return Tensor(shape(), std::vector<double>(data().begin(), data().end())); }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_result(
      a.shape(), std::move(out), {a, b},
      [](Node& self) {
        for (auto& in : self.inputs) {
          if (!in->requires_grad) continue;
          auto g = in->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
      },
      "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result(
      a.shape(), std::move(out), {a, b},
      [](Node& self) {
        if (self.inputs[0]->requires_grad) {
          auto g = self.inputs[0]->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (self.inputs[1]->requires_grad) {
          auto g = self.inputs[1]->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
      },
      "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_result(
      a.shape(), std::move(out), {a, b},
      [](Node& self) {
        Node& x = *self.inputs[0];
        Node& y = *self.inputs[1];
        if (x.requires_grad) {
          auto g = x.grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y.value[i];
        }
        if (y.requires_grad) {
          auto g = y.grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x.value[i];
        }
      },
      "mul");
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, "scale", [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary(
      a, "add_scalar", [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Tensor square(const Tensor& a) {
  return unary(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : ref(a, "log").value)
    if (!(v > 0.0)) throw NumericError("log of non-positive value");
  return unary(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary(
      a, "softplus",
      [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  auto v = ref(a, "sum").value;
  double s = std::accumulate(v.begin(), v.end(), 0.0);
  return make_result(
      Shape{1}, {s}, {a},
      [](Node& self) {
        auto g = self.inputs[0]->grad_buffer();
        for (auto& gi : g) gi += self.grad[0];
      },
      "sum");
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor sum_last(const Tensor& a) {
  if (ref(a, "sum_last").shape.size() != 2)
    throw ShapeError("sum_last expects rank 2, got " + to_string(a.shape()));
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  auto v = a.data();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r] += v[r * cols + c];
  return make_result(
      Shape{rows}, std::move(out), {a},
      [rows, cols](Node& self) {
        auto g = self.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += self.grad[r];
      },
      "sum_last");
}

// ---------------------------------------------------------------------------
// Structural

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const auto& xs = ref(x, "add_bias").shape;
  if (xs.size() != 2 || ref(bias, "add_bias").shape.size() != 1 || bias.dim(0) != xs[1])
    throw ShapeError("add_bias: cannot broadcast " + to_string(bias.shape()) + " over " +
                     to_string(xs));
  const std::size_t rows = xs[0], cols = xs[1];
  std::vector<double> out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += b[c];
  return make_result(
      xs, std::move(out), {x, bias},
      [rows, cols](Node& self) {
        if (self.inputs[0]->requires_grad) {
          auto g = self.inputs[0]->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (self.inputs[1]->requires_grad) {
          auto g = self.inputs[1]->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
        }
      },
      "add_bias");
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  const auto& xs = ref(x, "add_channel_bias").shape;
  if (xs.size() != 4 || ref(bias, "add_channel_bias").shape.size() != 1 || bias.dim(0) != xs[1])
    throw ShapeError("add_channel_bias: cannot broadcast " + to_string(bias.shape()) + " over " +
                     to_string(xs));
  const std::size_t batch = xs[0], channels = xs[1], plane = xs[2] * xs[3];
  std::vector<double> out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t p = 0; p < plane; ++p) out[(n * channels + c) * plane + p] += b[c];
  return make_result(
      xs, std::move(out), {x, bias},
      [batch, channels, plane](Node& self) {
        if (self.inputs[0]->requires_grad) {
          auto g = self.inputs[0]->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (self.inputs[1]->requires_grad) {
          auto g = self.inputs[1]->grad_buffer();
          for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t c = 0; c < channels; ++c)
              for (std::size_t p = 0; p < plane; ++p) g[c] += self.grad[(n * channels + c) * plane + p];
        }
      },
      "add_channel_bias");
}

Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const std::size_t rows = ref(parts[0], "concat").shape.size() == 2 ? parts[0].dim(0) : 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (ref(p, "concat").shape.size() != 2 || p.dim(0) != rows)
      throw ShapeError("concat: incompatible shape " + to_string(p.shape()) + " vs " +
                       to_string(parts[0].shape()));
    widths.push_back(p.dim(1));
  }
  const std::size_t total = std::accumulate(widths.begin(), widths.end(), std::size_t{0});
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto v = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(r * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
    offset += widths[k];
  }
  return make_result_n(
      Shape{rows, total}, std::move(out), parts,
      [rows, total, widths](Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
          Node& in = *self.inputs[k];
          if (in.requires_grad) {
            auto g = in.grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < widths[k]; ++c)
                g[r * widths[k] + c] += self.grad[r * total + off + c];
          }
          off += widths[k];
        }
      },
      "concat");
}

Tensor concat(const Tensor& a, const Tensor& b) {
  const Tensor parts[] = {a, b};
  return concat(std::span<const Tensor>(parts));
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of zero tensors");
  Shape tail(ref(parts[0], "concat_rows").shape.begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    const auto& s = ref(p, "concat_rows").shape;
    if (Shape(s.begin() + 1, s.end()) != tail)
      throw ShapeError("concat_rows: incompatible shape " + to_string(s) + " vs " +
                       to_string(parts[0].shape()));
    rows += s[0];
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return make_result_n(
      std::move(shape), std::move(out), parts,
      [](Node& self) {
        std::size_t off = 0;
        for (auto& in : self.inputs) {
          const std::size_t n = in->value.size();
          if (in->requires_grad) {
            auto g = in->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
          }
          off += n;
        }
      },
      "concat_rows");
}

Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t end) {
  if (ref(x, "slice_last").shape.size() != 2 || begin >= end || end > x.dim(1))
    throw ShapeError("slice_last: columns [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of range for " + to_string(x.shape()));
  const std::size_t rows = x.dim(0), cols = x.dim(1), width = end - begin;
  auto v = x.data();
  std::vector<double> out(rows * width);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < width; ++c) out[r * width + c] = v[r * cols + begin + c];
  return make_result(
      Shape{rows, width}, std::move(out), {x},
      [rows, cols, width, begin](Node& self) {
        auto g = self.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < width; ++c) g[r * cols + begin + c] += self.grad[r * width + c];
      },
      "slice_last");
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != ref(x, "reshape").value.size())
    throw ShapeError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  check_shape(shape);
  return make_result(
      std::move(shape), x.node()->value, {x},
      [](Node& self) {
        auto g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      },
      "reshape");
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& as = ref(a, "matmul").shape;
  const auto& bs = ref(b, "matmul").shape;
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0])
    throw ShapeError("matmul: dimension mismatch " + to_string(as) + " x " + to_string(bs));
  const auto m = static_cast<Eigen::Index>(as[0]);
  const auto k = static_cast<Eigen::Index>(as[1]);
  const auto n = static_cast<Eigen::Index>(bs[1]);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MapMat(out.data(), m, n).noalias() =
      ConstMapMat(a.data().data(), m, k) * ConstMapMat(b.data().data(), k, n);
  return make_result(
      Shape{as[0], bs[1]}, std::move(out), {a, b},
      [m, k, n](Node& self) {
        Node& x = *self.inputs[0];
        Node& y = *self.inputs[1];
        ConstMapMat g(self.grad.data(), m, n);
        if (x.requires_grad)
          MapMat(x.grad_buffer().data(), m, k).noalias() +=
              g * ConstMapMat(y.value.data(), k, n).transpose();
        if (y.requires_grad)
          MapMat(y.grad_buffer().data(), k, n).noalias() +=
              ConstMapMat(x.value.data(), m, k).transpose() * g;
      },
      "matmul");
}

// ---------------------------------------------------------------------------
// Convolution (4x4 kernel, stride 2, padding 1)

namespace {

constexpr std::size_t kKernel = 4;
constexpr std::size_t kStride = 2;
constexpr std::ptrdiff_t kPad = 1;

struct ConvGeometry {
  std::size_t batch, channels, height, width;  // of the high-resolution side
  std::size_t out_h() const { return height / kStride; }
  std::size_t out_w() const { return width / kStride; }
  std::size_t patch() const { return channels * kKernel * kKernel; }
  std::size_t positions() const { return out_h() * out_w(); }
};

// cols[(c*16 + ky*4 + kx), (oy*Wo + ox)] = x[c, 2oy+ky-1, 2ox+kx-1]
void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < kKernel; ++ky)
      for (std::size_t kx = 0; kx < kKernel; ++kx) {
        double* row = cols + ((c * kKernel + ky) * kKernel + kx) * positions;
        for (std::size_t oy = 0; oy < g.out_h(); ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * kStride + ky) - kPad;
          for (std::size_t ox = 0; ox < g.out_w(); ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * kStride + kx) - kPad;
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                ix < static_cast<std::ptrdiff_t>(g.width);
            row[oy * g.out_w() + ox] =
                inside ? x[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                           static_cast<std::size_t>(ix)]
                       : 0.0;
          }
        }
      }
}

void col2im(const double* cols, const ConvGeometry& g, double* x) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < kKernel; ++ky)
      for (std::size_t kx = 0; kx < kKernel; ++kx) {
        const double* row = cols + ((c * kKernel + ky) * kKernel + kx) * positions;
        for (std::size_t oy = 0; oy < g.out_h(); ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * kStride + ky) - kPad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w(); ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * kStride + kx) - kPad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            x[(c * g.height + static_cast<std::size_t>(iy)) * g.width + static_cast<std::size_t>(ix)] +=
                row[oy * g.out_w() + ox];
          }
        }
      }
}

// Returns (batched shape, was_batched).
std::pair<Shape, bool> as_batched(const Shape& s, const char* op) {
  if (s.size() == 3) return {Shape{1, s[0], s[1], s[2]}, false};
  if (s.size() == 4) return {s, true};
  throw ShapeError(std::string(op) + ": expected [C x H x W] or [B x C x H x W], got " + to_string(s));
}

void check_kernels(const Shape& ks, const char* op) {
  if (ks.size() != 4 || ks[2] != kKernel || ks[3] != kKernel)
    throw ShapeError(std::string(op) + ": kernels must be [C_out x C_in x 4 x 4], got " + to_string(ks));
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels) {
  auto [xs, batched] = as_batched(ref(input, "conv2d").shape, "conv2d");
  const auto& ks = ref(kernels, "conv2d").shape;
  check_kernels(ks, "conv2d");
  if (ks[1] != xs[1])
    throw ShapeError("conv2d: input channels " + to_string(input.shape()) + " vs kernels " + to_string(ks));
  if (xs[2] % 2 != 0 || xs[3] % 2 != 0)
    throw ShapeError("conv2d: spatial dims must be even, got " + to_string(input.shape()));
  const ConvGeometry geo{xs[0], xs[1], xs[2], xs[3]};
  const std::size_t c_out = ks[0];
  const auto patch = static_cast<Eigen::Index>(geo.patch());
  const auto positions = static_cast<Eigen::Index>(geo.positions());
  const std::size_t in_stride = geo.channels * geo.height * geo.width;
  const std::size_t out_stride = c_out * geo.positions();

  std::vector<double> cols(geo.batch * geo.patch() * geo.positions());
  std::vector<double> out(geo.batch * out_stride);
  ConstMapMat kmat(kernels.data().data(), static_cast<Eigen::Index>(c_out), patch);
  for (std::size_t n = 0; n < geo.batch; ++n) {
    double* col = cols.data() + n * geo.patch() * geo.positions();
    im2col(input.data().data() + n * in_stride, geo, col);
    MapMat(out.data() + n * out_stride, static_cast<Eigen::Index>(c_out), positions).noalias() =
        kmat * ConstMapMat(col, patch, positions);
  }
  Shape out_shape = batched ? Shape{geo.batch, c_out, geo.out_h(), geo.out_w()}
                            : Shape{c_out, geo.out_h(), geo.out_w()};
  return make_result(
      std::move(out_shape), std::move(out), {input, kernels},
      [geo, c_out, patch, positions, in_stride, out_stride, cols = std::move(cols)](Node& self) {
        Node& x = *self.inputs[0];
        Node& k = *self.inputs[1];
        const auto co = static_cast<Eigen::Index>(c_out);
        std::vector<double> dcol(static_cast<std::size_t>(patch * positions));
        for (std::size_t n = 0; n < geo.batch; ++n) {
          ConstMapMat g(self.grad.data() + n * out_stride, co, positions);
          if (k.requires_grad)
            MapMat(k.grad_buffer().data(), co, patch).noalias() +=
                g * ConstMapMat(cols.data() + n * geo.patch() * geo.positions(), patch, positions).transpose();
          if (x.requires_grad) {
            MapMat(dcol.data(), patch, positions).noalias() =
                ConstMapMat(k.value.data(), co, patch).transpose() * g;
            col2im(dcol.data(), geo, x.grad_buffer().data() + n * in_stride);
          }
        }
      },
      "conv2d");
}

Tensor conv2d_transposed(const Tensor& input, const Tensor& kernels) {
  auto [ys, batched] = as_batched(ref(input, "conv2d_transposed").shape, "conv2d_transposed");
  const auto& ks = ref(kernels, "conv2d_transposed").shape;
  check_kernels(ks, "conv2d_transposed");
  if (ks[0] != ys[1])
    throw ShapeError("conv2d_transposed: input channels " + to_string(input.shape()) + " vs kernels " +
                     to_string(ks));
  const std::size_t c_low = ks[0];
  const ConvGeometry geo{ys[0], ks[1], ys[2] * kStride, ys[3] * kStride};
  const auto patch = static_cast<Eigen::Index>(geo.patch());
  const auto positions = static_cast<Eigen::Index>(geo.positions());
  const std::size_t in_stride = c_low * geo.positions();
  const std::size_t out_stride = geo.channels * geo.height * geo.width;
  const auto cl = static_cast<Eigen::Index>(c_low);

  std::vector<double> out(geo.batch * out_stride, 0.0);
  std::vector<double> col(static_cast<std::size_t>(patch * positions));
  ConstMapMat kmat(kernels.data().data(), cl, patch);
  for (std::size_t n = 0; n < geo.batch; ++n) {
    MapMat(col.data(), patch, positions).noalias() =
        kmat.transpose() * ConstMapMat(input.data().data() + n * in_stride, cl, positions);
    col2im(col.data(), geo, out.data() + n * out_stride);
  }
  Shape out_shape = batched ? Shape{geo.batch, geo.channels, geo.height, geo.width}
                            : Shape{geo.channels, geo.height, geo.width};
  return make_result(
      std::move(out_shape), std::move(out), {input, kernels},
      [geo, cl, patch, positions, in_stride, out_stride](Node& self) {
        Node& y = *self.inputs[0];
        Node& k = *self.inputs[1];
        std::vector<double> dcol(static_cast<std::size_t>(patch * positions));
        for (std::size_t n = 0; n < geo.batch; ++n) {
          im2col(self.grad.data() + n * out_stride, geo, dcol.data());
          ConstMapMat dc(dcol.data(), patch, positions);
          if (y.requires_grad)
            MapMat(y.grad_buffer().data() + n * in_stride, cl, positions).noalias() +=
                ConstMapMat(k.value.data(), cl, patch) * dc;
          if (k.requires_grad)
            MapMat(k.grad_buffer().data(), cl, patch).noalias() +=
                ConstMapMat(y.value.data() + n * in_stride, cl, positions) * dc.transpose();
        }
      },
      "conv2d_transposed");
}

// ---------------------------------------------------------------------------
// LSTM

std::size_t LstmParams::hidden_dim() const { return bias.dim(0) / 4; }

std::size_t LstmParams::input_dim() const { return weight.dim(0) - hidden_dim(); }

LstmState lstm_step(const Tensor& x, const LstmState& state, const LstmParams& params) {
  const std::size_t hidden = params.hidden_dim();
  if (params.bias.dim(0) % 4 != 0 || params.weight.rank() != 2 || params.weight.dim(1) != 4 * hidden)
    throw ShapeError("lstm_step: inconsistent parameters " + to_string(params.weight.shape()) + ", " +
                     to_string(params.bias.shape()));
  Tensor input = x.rank() == 1 ? reshape(x, Shape{1, x.dim(0)}) : x;
  if (input.rank() != 2 || input.dim(1) != params.input_dim())
    throw ShapeError("lstm_step: input " + to_string(x.shape()) + " vs input dim " +
                     std::to_string(params.input_dim()));
  const std::size_t rows = input.dim(0);
  const Shape state_shape{rows, hidden};
  if (state.h.shape() != state_shape || state.c.shape() != state_shape)
    throw ShapeError("lstm_step: state " + to_string(state.h.shape()) + "/" + to_string(state.c.shape()) +
                     " vs expected " + to_string(state_shape));

  Tensor gates = add_bias(matmul(concat(input, state.h), params.weight), params.bias);
  Tensor i = sigmoid(slice_last(gates, 0, hidden));
  Tensor f = sigmoid(slice_last(gates, hidden, 2 * hidden));
  Tensor g = tanh(slice_last(gates, 2 * hidden, 3 * hidden));
  Tensor o = sigmoid(slice_last(gates, 3 * hidden, 4 * hidden));
  Tensor c = f * state.c + i * g;
  Tensor h = o * tanh(c);
  return {h, c};
}

// ---------------------------------------------------------------------------
// Backward

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ShapeError("backward: loss must be a scalar, got " +
                     (loss.defined() ? to_string(loss.shape()) : std::string("undefined")));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  // `order` owns its nodes: releasing one node's inputs must not free a
  // node that is still waiting for its turn.
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack{{loss.node(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->inputs.size()) {
      std::shared_ptr<Node> child = top.first->inputs[top.second++];
      if (child->requires_grad && !visited.count(child.get())) {
        visited.insert(child.get());
        stack.emplace_back(std::move(child), 0);
      }
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& node = **it;
    if (!node.backward_fn) continue;
    if (!node.grad.empty()) node.backward_fn(node);
    node.backward_fn = nullptr;
    node.inputs.clear();
    node.grad.clear();
    node.grad.shrink_to_fit();
  }
}

}  // namespace pvae
