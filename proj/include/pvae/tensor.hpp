#pragma once

// Dense double-precision tensors with tape-free reverse-mode differentiation.
//
// Every operation that has at least one input requiring a gradient records
// its inputs and a backward rule on the output node. `backward(loss)` sorts
// the reachable nodes topologically, runs the rules in reverse, leaves the
// gradients on the requires-grad leaves and releases the interior of the
// graph. A new graph is built by every forward pass.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pvae {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::span<double> grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  /// Constant tensor filled with `fill`.
  explicit Tensor(Shape shape, double fill = 0.0);
  /// Constant tensor with explicit row-major values.
  Tensor(Shape shape, std::vector<double> values);

  /// Trainable leaf. Gradients accumulate on it across backward calls
  /// until `zero_grad()`.
  static Tensor parameter(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;
  std::span<const double> data() const;
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  bool is_leaf() const;
  /// Empty span when no gradient has reached this tensor.
  std::span<const double> grad() const;
  void zero_grad();

  /// Writable view of a leaf's values; used by optimizers and
  /// checkpoint loading. Throws for interior graph nodes.
  std::span<double> mutable_data();
  /// Empty when no gradient has reached this tensor.
  std::span<double> mutable_grad();

  /// Same values, cut from the graph.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

// Elementwise arithmetic (identical shapes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor square(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }

// Unary nonlinearities.
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor relu(const Tensor& a);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// [B x N] -> [B]
Tensor sum_last(const Tensor& a);

// Structural.
/// x [B x N] + bias [N], broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);
/// x [B x C x H x W] + bias [C], broadcast over batch and space.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
/// Concatenation along the last axis of rank-2 tensors with equal rows.
Tensor concat(std::span<const Tensor> parts);
Tensor concat(const Tensor& a, const Tensor& b);
/// Concatenation along the first axis; trailing dims must agree.
Tensor concat_rows(std::span<const Tensor> parts);
/// Columns [begin, end) of a rank-2 tensor.
Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);

/// [m x k] * [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);

/// 4x4 kernels, stride 2, zero padding 1. `input` is [C_in x H x W] or
/// [B x C_in x H x W], kernels [C_out x C_in x 4 x 4]; H and W must be even.
Tensor conv2d(const Tensor& input, const Tensor& kernels);
/// Adjoint of `conv2d` with the same kernel tensor: input [C_out x H x W]
/// (optionally batched) -> [C_in x 2H x 2W].
Tensor conv2d_transposed(const Tensor& input, const Tensor& kernels);

struct LstmParams {
  Tensor weight;  // [(D_in + D_h) x 4 D_h], gate blocks ordered i, f, g, o
  Tensor bias;    // [4 D_h]
  std::size_t input_dim() const;
  std::size_t hidden_dim() const;
};

struct LstmState {
  Tensor h;
  Tensor c;
};

/// One step of a standard LSTM cell on a batch: x [B x D_in] (or [D_in]),
/// h, c [B x D_h]. c' = f*c + i*g, h' = o*tanh(c').
LstmState lstm_step(const Tensor& x, const LstmState& state, const LstmParams& params);

/// Runs reverse-mode differentiation from a scalar loss.
void backward(const Tensor& loss);

}  // namespace pvae
