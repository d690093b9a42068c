#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fuseseg {

using Shape = std::vector<std::size_t>;

/// Thrown when operand shapes do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a serialized artifact (tensor, checkpoint, dataset) is malformed.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown when a computation produces NaN/Inf where finite values are required.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

/// Receives the gradient of the op output; accumulates into the parents it captured.
using BackwardFn = std::function<void(std::span<const double> out_grad)>;

/// Handle to a node of the reverse-mode graph. Copies share the node.
///
/// Values are 64-bit floats in row-major order; image tensors use NCHW.
/// `grad` is absent until something accumulates into it.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  /// In-place mutation; reserved for leaves (parameters, optimizer updates).
  std::span<double> mutable_values();
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  bool has_grad() const;
  std::span<const double> grad() const;
  /// Gradient buffer, zero-allocated on first access.
  std::span<double> grad_buffer() const;
  void zero_grad();

  bool is_leaf() const;
  std::uint64_t id() const;

  /// Detached copy of the values (new leaf, no grad).
  Tensor clone() const;

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node> node_;

  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>, BackwardFn);
  friend void backward(const Tensor& loss);
};

/// Creates the output node of a differentiable op. The backward closure and the
/// parent links are dropped when no parent requires a gradient or when
/// gradient recording is disabled.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                   BackwardFn fn);

/// Accumulates dLoss/dθ into every requires_grad tensor reachable from `loss`.
/// Leaf gradients accumulate across calls; call zero_grad() between steps.
void backward(const Tensor& loss);

/// Whether ops currently record graph edges (thread-local).
bool grad_enabled();

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Zero-mean normal with variance 2/fan_in, deterministic per seed.
Tensor he_init(const Shape& shape, std::size_t fan_in, std::uint64_t seed);

bool all_finite(std::span<const double> values);

}  // namespace fuseseg
