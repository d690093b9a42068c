#pragma once

#include "fuseseg/tensor.hpp"

namespace fuseseg {

/// Convolution parameters. For conv2d the kernel is (C_out, C_in, k, k); for
/// conv_transpose2d it is (C_in, C_out, k, k), i.e. the kernel of the conv2d
/// whose adjoint it computes. `bias` may be undefined.
struct ConvParams {
  Tensor kernel;
  Tensor bias;
  int stride = 1;
  int dilation = 1;
  int padding = 0;
};

/// Padding that keeps the spatial size of a stride-1 convolution.
int same_padding(int kernel_size, int dilation);

/// Output extent of a convolution along one axis; throws when it would be < 1.
std::size_t conv_output_extent(std::size_t in, int kernel, int stride, int dilation, int pad);

Tensor conv2d(const Tensor& input, const ConvParams& params);
Tensor conv_transpose2d(const Tensor& input, const ConvParams& params);

/// 2x2 window, stride 2. Ties go to the first element in row-major window order.
Tensor maxpool2d(const Tensor& input);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
/// Scales every channel of (N,C,H,W) features by the same (N,1,H,W) map.
Tensor broadcast_mul(const Tensor& features, const Tensor& map);

Tensor scale(const Tensor& x, double factor);

/// While alive on a thread, relu and maxpool2d fold every branch they take
/// (active unit, winning window element) into `digest`. Two forward passes
/// with equal digests follow the same piecewise-linear region.
class BranchTrace {
 public:
  BranchTrace();
  ~BranchTrace();
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;

  std::uint64_t digest() const { return digest_; }
  void fold(std::uint64_t v) { digest_ = (digest_ ^ v) * 0x100000001b3ull; }

 private:
  std::uint64_t digest_ = 0xcbf29ce484222325ull;
  BranchTrace* outer_;
};
/// Sum of all elements, shape (1).
Tensor sum(const Tensor& x);

}  // namespace fuseseg
