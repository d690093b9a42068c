#include "fuseseg/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include <Eigen/Core>

#include "direct_conv.hpp"

namespace fuseseg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

// Upper bound on the im2col scratch buffer (doubles) before the batch is split.
constexpr std::size_t kColBudget = std::size_t{1} << 24;

// Grow-only per-thread scratch; slot 0 holds columns, slot 1 the channel-major operand.
double* scratch(std::size_t slot, std::size_t n) {
  struct Buffer {
    std::unique_ptr<double[]> data;
    std::size_t size = 0;
  };
  thread_local std::array<Buffer, 2> buffers;
  auto& b = buffers[slot];
  if (b.size < n) {
    b.data.reset(new double[n]);
    b.size = n;
  }
  return b.data.get();
}

void require_rank4(const Tensor& t, const char* op, const char* what) {
  if (!t.defined() || t.rank() != 4) {
    throw ShapeError(std::string(op) + ": " + what + " must be rank-4 (N,C,H,W), got " +
                     (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
  }
}

/// Geometry of a convolution seen from its "image" side (C,H,W) and its
/// "column" side (Ho,Wo). conv2d reads the image; conv_transpose2d writes it.
struct Geometry {
  std::size_t channels, height, width;
  std::size_t out_h, out_w;
  int k, stride, pad, dil;

  std::size_t rows() const { return channels * static_cast<std::size_t>(k * k); }
  std::size_t plane() const { return out_h * out_w; }
  std::size_t image_size() const { return channels * height * width; }
};

// Range of output columns [lo, hi) whose input coordinate o*stride - pad + off is inside [0, extent).
inline void valid_range(std::size_t out_extent, std::size_t extent, int stride, long off,
                        std::size_t& lo, std::size_t& hi) {
  // need 0 <= o*stride + off < extent
  long l = off >= 0 ? 0 : (-off + stride - 1) / stride;
  long h = static_cast<long>(extent) - off;  // o*stride < h
  long u = h <= 0 ? 0 : (h + stride - 1) / stride;
  lo = static_cast<std::size_t>(std::clamp<long>(l, 0, static_cast<long>(out_extent)));
  hi = static_cast<std::size_t>(std::clamp<long>(u, 0, static_cast<long>(out_extent)));
  if (hi < lo) hi = lo;
}

/// Unfolds one image into rows (c,ki,kj) x columns (oh,ow); `ld` is the row stride of `col`.
void im2col(const double* image, const Geometry& g, double* col, std::size_t ld) {
  const std::size_t ow_n = g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double* plane = image + c * g.height * g.width;
    for (int ki = 0; ki < g.k; ++ki) {
      const long row_off = static_cast<long>(ki) * g.dil - g.pad;
      std::size_t oh_lo, oh_hi;
      valid_range(g.out_h, g.height, g.stride, row_off, oh_lo, oh_hi);
      for (int kj = 0; kj < g.k; ++kj) {
        const long col_off = static_cast<long>(kj) * g.dil - g.pad;
        std::size_t ow_lo, ow_hi;
        valid_range(ow_n, g.width, g.stride, col_off, ow_lo, ow_hi);
        double* dst = col + ((c * g.k + ki) * g.k + kj) * ld;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          double* d = dst + oh * ow_n;
          if (oh < oh_lo || oh >= oh_hi) {
            std::fill(d, d + ow_n, 0.0);
            continue;
          }
          const double* src =
              plane + static_cast<std::size_t>(static_cast<long>(oh) * g.stride + row_off) * g.width;
          std::fill(d, d + ow_lo, 0.0);
          if (g.stride == 1) {
            std::copy(src + (static_cast<long>(ow_lo) + col_off), src + (static_cast<long>(ow_hi) + col_off),
                      d + ow_lo);
          } else {
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
              d[ow] = src[static_cast<long>(ow) * g.stride + col_off];
            }
          }
          std::fill(d + ow_hi, d + ow_n, 0.0);
        }
      }
    }
  }
}

/// Adjoint of im2col: accumulates columns back into the image.
void col2im(const double* col, std::size_t ld, const Geometry& g, double* image) {
  const std::size_t ow_n = g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    double* plane = image + c * g.height * g.width;
    for (int ki = 0; ki < g.k; ++ki) {
      const long row_off = static_cast<long>(ki) * g.dil - g.pad;
      std::size_t oh_lo, oh_hi;
      valid_range(g.out_h, g.height, g.stride, row_off, oh_lo, oh_hi);
      for (int kj = 0; kj < g.k; ++kj) {
        const long col_off = static_cast<long>(kj) * g.dil - g.pad;
        std::size_t ow_lo, ow_hi;
        valid_range(ow_n, g.width, g.stride, col_off, ow_lo, ow_hi);
        const double* src_row = col + ((c * g.k + ki) * g.k + kj) * ld;
        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
          const double* s = src_row + oh * ow_n;
          double* dst =
              plane + static_cast<std::size_t>(static_cast<long>(oh) * g.stride + row_off) * g.width;
          if (g.stride == 1) {
            double* d = dst + col_off;
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) d[ow] += s[ow];
          } else {
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
              dst[static_cast<long>(ow) * g.stride + col_off] += s[ow];
            }
          }
        }
      }
    }
  }
}

std::size_t group_size(std::size_t batch, std::size_t rows, std::size_t plane) {
  const std::size_t per_sample = std::max<std::size_t>(1, rows * plane);
  return std::clamp<std::size_t>(kColBudget / per_sample, 1, std::max<std::size_t>(batch, 1));
}

// (N,C,P) samples [n0, n0+g) -> (C, g*P) matrix.
void gather_channels_major(const double* src, std::size_t n0, std::size_t g, std::size_t channels,
                           std::size_t plane, double* dst) {
  const std::size_t ld = g * plane;
  for (std::size_t j = 0; j < g; ++j) {
    const double* s = src + (n0 + j) * channels * plane;
    for (std::size_t c = 0; c < channels; ++c) {
      std::copy(s + c * plane, s + (c + 1) * plane, dst + c * ld + j * plane);
    }
  }
}

// Inverse of gather_channels_major; accumulates when `accumulate`.
void scatter_channels_major(const double* src, std::size_t n0, std::size_t g, std::size_t channels,
                            std::size_t plane, double* dst, bool accumulate) {
  const std::size_t ld = g * plane;
  for (std::size_t j = 0; j < g; ++j) {
    double* d = dst + (n0 + j) * channels * plane;
    for (std::size_t c = 0; c < channels; ++c) {
      const double* s = src + c * ld + j * plane;
      if (accumulate) {
        for (std::size_t p = 0; p < plane; ++p) d[c * plane + p] += s[p];
      } else {
        std::copy(s, s + plane, d + c * plane);
      }
    }
  }
}

void check_conv_params(const ConvParams& p, const char* op) {
  if (!p.kernel.defined() || p.kernel.rank() != 4) {
    throw ShapeError(std::string(op) + ": kernel must be rank-4");
  }
  if (p.kernel.dim(2) != p.kernel.dim(3)) {
    throw ShapeError(std::string(op) + ": only square kernels are supported, got " +
                     shape_str(p.kernel.shape()));
  }
  if (p.stride < 1 || p.dilation < 1 || p.padding < 0) {
    throw std::invalid_argument(std::string(op) + ": stride and dilation must be >= 1, padding >= 0");
  }
}

void add_bias(const Tensor& bias, std::size_t batch, std::size_t channels, std::size_t plane,
              std::vector<double>& out, const char* op) {
  if (!bias.defined()) return;
  if (bias.numel() != channels) {
    throw ShapeError(std::string(op) + ": bias has " + std::to_string(bias.numel()) +
                     " entries, expected " + std::to_string(channels));
  }
  const auto b = bias.values();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      double* d = out.data() + (n * channels + c) * plane;
      const double bc = b[c];
      for (std::size_t p = 0; p < plane; ++p) d[p] += bc;
    }
  }
}

void bias_grad(Tensor bias, std::span<const double> gout, std::size_t batch, std::size_t channels,
               std::size_t plane) {
  if (!bias.defined() || !bias.requires_grad()) return;
  auto db = bias.grad_buffer();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double* g = gout.data() + (n * channels + c) * plane;
      db[c] += std::accumulate(g, g + plane, 0.0);
    }
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace

int same_padding(int kernel_size, int dilation) { return dilation * (kernel_size - 1) / 2; }

std::size_t conv_output_extent(std::size_t in, int kernel, int stride, int dilation, int pad) {
  const long extent = static_cast<long>(kernel - 1) * dilation + 1;
  const long padded = static_cast<long>(in) + 2L * pad;
  if (extent > padded) {
    throw ShapeError("effective kernel extent " + std::to_string(extent) +
                     " exceeds padded input extent " + std::to_string(padded));
  }
  return static_cast<std::size_t>((padded - extent) / stride + 1);
}

namespace {

// Stride-1 layers with rows a multiple of 8 wide go through the direct kernels.
bool use_direct(const Geometry& g) {
  return g.stride == 1 && g.out_w % 8 == 0 && g.width % 8 == 0 && g.pad <= g.dil * (g.k - 1);
}

// Copies a (C,H,W) image into a zero-padded (C,H+2p,W+2p) buffer.
direct::Plane pad_image(const double* src, std::size_t channels, std::size_t h, std::size_t w, int pad,
                        double* buf) {
  if (pad == 0) return {src, channels, h, w};
  const std::size_t p = static_cast<std::size_t>(pad);
  const std::size_t hp = h + 2 * p, wp = w + 2 * p;
  std::fill(buf, buf + channels * hp * wp, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < h; ++i) {
      std::copy(src + (c * h + i) * w, src + (c * h + i + 1) * w, buf + (c * hp + i + p) * wp + p);
    }
  }
  return {buf, channels, hp, wp};
}

std::size_t padded_size(std::size_t channels, std::size_t h, std::size_t w, int pad) {
  const std::size_t p = static_cast<std::size_t>(pad);
  return channels * (h + 2 * p) * (w + 2 * p);
}

void conv2d_forward_direct(const double* x, const double* w, const Geometry& g, std::size_t batch,
                           std::size_t cout, double* out) {
  double* buf = scratch(0, padded_size(g.channels, g.height, g.width, g.pad));
  for (std::size_t n = 0; n < batch; ++n) {
    const auto in = pad_image(x + n * g.image_size(), g.channels, g.height, g.width, g.pad, buf);
    direct::forward(in, w, cout, g.k, g.dil, out + n * cout * g.plane(), g.out_h, g.out_w, false);
  }
}

void conv2d_forward_gemm(const double* x, const double* w_data, const Geometry& g, std::size_t batch,
                         std::size_t cout, double* out) {
  const std::size_t rows = g.rows(), plane = g.plane();
  const std::size_t group = group_size(batch, rows, plane);
  double* col = scratch(0, rows * group * plane);
  double* tmp = scratch(1, cout * group * plane);
  ConstMapMat w(w_data, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(rows));
  for (std::size_t n0 = 0; n0 < batch; n0 += group) {
    const std::size_t gs = std::min(group, batch - n0);
    const std::size_t ld = gs * plane;
    for (std::size_t j = 0; j < gs; ++j) im2col(x + (n0 + j) * g.image_size(), g, col + j * plane, ld);
    ConstMapMat cm(col, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(ld));
    MapMat tm(tmp, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(ld));
    tm.noalias() = w * cm;
    scatter_channels_major(tmp, n0, gs, cout, plane, out, false);
  }
}

void conv2d_backward_direct(const double* x, const double* w, const double* gout, const Geometry& g,
                            std::size_t batch, std::size_t cout, double* dx, double* dw) {
  const std::size_t plane = g.plane();
  const std::size_t kk = static_cast<std::size_t>(g.k * g.k);
  if (dw) {
    double* buf = scratch(0, padded_size(g.channels, g.height, g.width, g.pad));
    for (std::size_t n = 0; n < batch; ++n) {
      const auto in = pad_image(x + n * g.image_size(), g.channels, g.height, g.width, g.pad, buf);
      if (!direct::weight_grad(in, gout + n * cout * plane, cout, g.k, g.out_h, g.out_w, g.dil, dw)) {
        throw std::logic_error("direct weight gradient: unsupported kernel size");
      }
    }
  }
  if (dx) {
    // Input gradient = stride-1 convolution of the output gradient with the
    // channel-swapped, spatially flipped kernel.
    std::vector<double> flipped(cout * g.channels * kk);
    for (std::size_t co = 0; co < cout; ++co) {
      for (std::size_t ci = 0; ci < g.channels; ++ci) {
        for (std::size_t t = 0; t < kk; ++t) {
          flipped[(ci * cout + co) * kk + (kk - 1 - t)] = w[(co * g.channels + ci) * kk + t];
        }
      }
    }
    const int pad = g.dil * (g.k - 1) - g.pad;
    double* buf = scratch(1, padded_size(cout, g.out_h, g.out_w, pad));
    for (std::size_t n = 0; n < batch; ++n) {
      const auto in = pad_image(gout + n * cout * plane, cout, g.out_h, g.out_w, pad, buf);
      direct::forward(in, flipped.data(), g.channels, g.k, g.dil, dx + n * g.image_size(), g.height, g.width,
                      true);
    }
  }
}

void conv2d_backward_gemm(const double* x, const double* w_data, const double* gout, const Geometry& g,
                          std::size_t batch, std::size_t cout, double* dx, double* dw) {
  const std::size_t rows = g.rows(), plane = g.plane();
  const std::size_t group = group_size(batch, rows, plane);
  double* col = scratch(0, rows * group * plane);
  double* gm = scratch(1, cout * group * plane);
  ConstMapMat w(w_data, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(rows));
  for (std::size_t n0 = 0; n0 < batch; n0 += group) {
    const std::size_t gs = std::min(group, batch - n0);
    const std::size_t ld = gs * plane;
    const auto ldi = static_cast<Eigen::Index>(ld);
    gather_channels_major(gout, n0, gs, cout, plane, gm);
    ConstMapMat gmat(gm, static_cast<Eigen::Index>(cout), ldi);
    if (dw) {
      for (std::size_t j = 0; j < gs; ++j) im2col(x + (n0 + j) * g.image_size(), g, col + j * plane, ld);
      ConstMapMat cm(col, static_cast<Eigen::Index>(rows), ldi);
      MapMat dwm(dw, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(rows));
      dwm.noalias() += gmat * cm.transpose();
    }
    if (dx) {
      MapMat dcol(col, static_cast<Eigen::Index>(rows), ldi);
      dcol.noalias() = w.transpose() * gmat;
      for (std::size_t j = 0; j < gs; ++j) col2im(col + j * plane, ld, g, dx + (n0 + j) * g.image_size());
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const ConvParams& params) {
  require_rank4(input, "conv2d", "input");
  check_conv_params(params, "conv2d");
  const Tensor& kernel = params.kernel;
  const std::size_t batch = input.dim(0), cin = input.dim(1);
  const std::size_t cout = kernel.dim(0);
  if (kernel.dim(1) != cin) {
    throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels but kernel " +
                     shape_str(kernel.shape()) + " expects " + std::to_string(kernel.dim(1)));
  }
  const int k = static_cast<int>(kernel.dim(2));
  Geometry g{cin, input.dim(2), input.dim(3), 0, 0, k, params.stride, params.padding, params.dilation};
  g.out_h = conv_output_extent(g.height, k, g.stride, g.dil, g.pad);
  g.out_w = conv_output_extent(g.width, k, g.stride, g.dil, g.pad);
  const std::size_t plane = g.plane();
  const bool direct_path = use_direct(g);

  std::vector<double> out(batch * cout * plane);
  if (direct_path) {
    conv2d_forward_direct(input.values().data(), kernel.values().data(), g, batch, cout, out.data());
  } else {
    conv2d_forward_gemm(input.values().data(), kernel.values().data(), g, batch, cout, out.data());
  }
  add_bias(params.bias, batch, cout, plane, out, "conv2d");

  Shape shape{batch, cout, g.out_h, g.out_w};
  std::vector<Tensor> parents{input, kernel};
  if (params.bias.defined()) parents.push_back(params.bias);
  return make_result(
      std::move(shape), std::move(out), std::move(parents),
      [input, kernel, bias = params.bias, g, batch, cout, direct_path](std::span<const double> gout) {
        bias_grad(bias, gout, batch, cout, g.plane());
        double* dw = kernel.requires_grad() ? kernel.grad_buffer().data() : nullptr;
        double* dx = input.requires_grad() ? input.grad_buffer().data() : nullptr;
        if (!dw && !dx) return;
        const double* x = input.values().data();
        const double* w = kernel.values().data();
        if (direct_path && (g.k == 1 || g.k == 3)) {
          conv2d_backward_direct(x, w, gout.data(), g, batch, cout, dx, dw);
        } else if (direct_path) {
          conv2d_backward_direct(x, w, gout.data(), g, batch, cout, dx, nullptr);
          conv2d_backward_gemm(x, w, gout.data(), g, batch, cout, nullptr, dw);
        } else {
          conv2d_backward_gemm(x, w, gout.data(), g, batch, cout, dx, dw);
        }
      });
}

Tensor conv_transpose2d(const Tensor& input, const ConvParams& params) {
  require_rank4(input, "conv_transpose2d", "input");
  check_conv_params(params, "conv_transpose2d");
  const Tensor& kernel = params.kernel;
  const std::size_t batch = input.dim(0), cin = input.dim(1);
  if (kernel.dim(0) != cin) {
    throw ShapeError("conv_transpose2d: input has " + std::to_string(cin) + " channels but kernel " +
                     shape_str(kernel.shape()) + " expects " + std::to_string(kernel.dim(0)));
  }
  const std::size_t cout = kernel.dim(1);
  const int k = static_cast<int>(kernel.dim(2));
  const long ext = static_cast<long>(k - 1) * params.dilation + 1;
  const long oh = (static_cast<long>(input.dim(2)) - 1) * params.stride - 2L * params.padding + ext;
  const long ow = (static_cast<long>(input.dim(3)) - 1) * params.stride - 2L * params.padding + ext;
  if (oh < 1 || ow < 1) throw ShapeError("conv_transpose2d: empty output for input " + shape_str(input.shape()));
  // The output image is the "image side" of the adjoint conv2d geometry.
  Geometry g{cout, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), input.dim(2), input.dim(3),
             k, params.stride, params.padding, params.dilation};
  const std::size_t rows = g.rows(), plane = g.plane();  // plane = input spatial size

  std::vector<double> out(batch * g.image_size(), 0.0);
  const std::size_t group = group_size(batch, rows, plane);
  double* col = scratch(0, rows * group * plane);
  double* ym = scratch(1, cin * group * plane);
  ConstMapMat w(kernel.values().data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(rows));
  for (std::size_t n0 = 0; n0 < batch; n0 += group) {
    const std::size_t gs = std::min(group, batch - n0);
    const std::size_t ld = gs * plane;
    gather_channels_major(input.values().data(), n0, gs, cin, plane, ym);
    ConstMapMat y(ym, static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(ld));
    MapMat cm(col, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(ld));
    cm.noalias() = w.transpose() * y;
    for (std::size_t j = 0; j < gs; ++j) {
      col2im(col + j * plane, ld, g, out.data() + (n0 + j) * g.image_size());
    }
  }
  add_bias(params.bias, batch, cout, g.height * g.width, out, "conv_transpose2d");

  Shape shape{batch, cout, g.height, g.width};
  std::vector<Tensor> parents{input, kernel};
  if (params.bias.defined()) parents.push_back(params.bias);
  return make_result(
      std::move(shape), std::move(out), std::move(parents),
      [input, kernel, bias = params.bias, g, batch, cin](std::span<const double> gout) {
        const std::size_t rows = g.rows(), plane = g.plane();
        bias_grad(bias, gout, batch, g.channels, g.height * g.width);
        const bool need_w = kernel.requires_grad(), need_x = input.requires_grad();
        if (!need_w && !need_x) return;
        const std::size_t group = group_size(batch, rows, plane);
        double* col = scratch(0, rows * group * plane);
        double* ym = scratch(1, cin * group * plane);
        ConstMapMat w(kernel.values().data(), static_cast<Eigen::Index>(cin),
                      static_cast<Eigen::Index>(rows));
        for (std::size_t n0 = 0; n0 < batch; n0 += group) {
          const std::size_t gs = std::min(group, batch - n0);
          const std::size_t ld = gs * plane;
          const auto ldi = static_cast<Eigen::Index>(ld);
          for (std::size_t j = 0; j < gs; ++j) {
            im2col(gout.data() + (n0 + j) * g.image_size(), g, col + j * plane, ld);
          }
          ConstMapMat cm(col, static_cast<Eigen::Index>(rows), ldi);
          if (need_w) {
            gather_channels_major(input.values().data(), n0, gs, cin, plane, ym);
            ConstMapMat y(ym, static_cast<Eigen::Index>(cin), ldi);
            MapMat dwm(kernel.grad_buffer().data(), static_cast<Eigen::Index>(cin),
                       static_cast<Eigen::Index>(rows));
            dwm.noalias() += y * cm.transpose();
          }
          if (need_x) {
            MapMat dy(ym, static_cast<Eigen::Index>(cin), ldi);
            dy.noalias() = w * cm;
            scatter_channels_major(ym, n0, gs, cin, plane, input.grad_buffer().data(), true);
          }
        }
      });
}

namespace {
thread_local BranchTrace* active_trace = nullptr;
}  // namespace

BranchTrace::BranchTrace() : outer_(active_trace) { active_trace = this; }
BranchTrace::~BranchTrace() { active_trace = outer_; }

Tensor maxpool2d(const Tensor& input) {
  require_rank4(input, "maxpool2d", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("maxpool2d: spatial dims must be even, got " + shape_str(input.shape()));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<double> out(n * c * oh * ow);
  std::vector<std::uint32_t> argmax(out.size());  // flat input index
  const auto x = input.values();
  for (std::size_t p = 0; p < n * c; ++p) {
    const std::size_t base = p * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t top = base + 2 * i * w + 2 * j;
        const std::size_t cand[4] = {top, top + 1, top + w, top + w + 1};
        std::size_t best = cand[0];
        for (int q = 1; q < 4; ++q) {
          if (x[cand[q]] > x[best]) best = cand[q];
        }
        const std::size_t o = (p * oh + i) * ow + j;
        out[o] = x[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  if (active_trace) {
    for (std::uint32_t a : argmax) active_trace->fold(a);
  }
  return make_result({n, c, oh, ow}, std::move(out), {input},
                     [input, argmax = std::move(argmax)](std::span<const double> gout) {
                       auto dx = input.grad_buffer();
                       for (std::size_t o = 0; o < gout.size(); ++o) dx[argmax[o]] += gout[o];
                     });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto v = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : 0.0;
  if (active_trace) {
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      word = (word << 1) | (v[i] > 0.0);
      if (i % 64 == 63 || i + 1 == out.size()) {
        active_trace->fold(word);
        word = 0;
      }
    }
  }
  return make_result(x.shape(), std::move(out), {x}, [x](std::span<const double> gout) {
    auto dx = x.grad_buffer();
    const auto v = x.values();
    for (std::size_t i = 0; i < gout.size(); ++i) {
      if (v[i] > 0.0) dx[i] += gout[i];
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  constexpr double lo = std::numeric_limits<double>::min();
  const double hi = std::nextafter(1.0, 0.0);
  std::vector<double> out(x.numel());
  const auto v = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    double s;
    if (v[i] >= 0.0) {
      s = 1.0 / (1.0 + std::exp(-v[i]));
    } else {
      const double e = std::exp(v[i]);
      s = e / (1.0 + e);
    }
    out[i] = std::clamp(s, lo, hi);
  }
  std::vector<double> saved = out;
  return make_result(x.shape(), std::move(out), {x},
                     [x, s = std::move(saved)](std::span<const double> gout) {
                       auto dx = x.grad_buffer();
                       for (std::size_t i = 0; i < gout.size(); ++i) dx[i] += gout[i] * s[i] * (1.0 - s[i]);
                     });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank4(a, "concat_channels", "a");
  require_rank4(b, "concat_channels", "b");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: N/H/W mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
  std::vector<double> out(n * (ca + cb) * plane);
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < n; ++i) {
    auto dst = out.begin() + static_cast<long>(i * (ca + cb) * plane);
    dst = std::copy(av.begin() + static_cast<long>(i * ca * plane),
                    av.begin() + static_cast<long>((i + 1) * ca * plane), dst);
    std::copy(bv.begin() + static_cast<long>(i * cb * plane),
              bv.begin() + static_cast<long>((i + 1) * cb * plane), dst);
  }
  return make_result({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                     [a, b, n, ca, cb, plane](std::span<const double> gout) {
                       for (std::size_t i = 0; i < n; ++i) {
                         const double* src = gout.data() + i * (ca + cb) * plane;
                         if (a.requires_grad()) {
                           double* da = a.grad_buffer().data() + i * ca * plane;
                           for (std::size_t q = 0; q < ca * plane; ++q) da[q] += src[q];
                         }
                         if (b.requires_grad()) {
                           double* db = b.grad_buffer().data() + i * cb * plane;
                           for (std::size_t q = 0; q < cb * plane; ++q) db[q] += src[ca * plane + q];
                         }
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> gout) {
    for (const Tensor* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto d = t->grad_buffer();
      for (std::size_t i = 0; i < gout.size(); ++i) d[i] += gout[i];
    }
  });
}

Tensor broadcast_mul(const Tensor& features, const Tensor& map) {
  require_rank4(features, "broadcast_mul", "features");
  require_rank4(map, "broadcast_mul", "map");
  if (map.dim(1) != 1 || map.dim(0) != features.dim(0) || map.dim(2) != features.dim(2) ||
      map.dim(3) != features.dim(3)) {
    throw ShapeError("broadcast_mul: map " + shape_str(map.shape()) + " incompatible with features " +
                     shape_str(features.shape()));
  }
  const std::size_t n = features.dim(0), c = features.dim(1), plane = features.dim(2) * features.dim(3);
  std::vector<double> out(features.numel());
  const auto f = features.values(), m = map.values();
  for (std::size_t i = 0; i < n; ++i) {
    const double* mp = m.data() + i * plane;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (i * c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) out[off + p] = f[off + p] * mp[p];
    }
  }
  return make_result(features.shape(), std::move(out), {features, map},
                     [features, map, n, c, plane](std::span<const double> gout) {
                       const auto f = features.values(), m = map.values();
                       double* df = features.requires_grad() ? features.grad_buffer().data() : nullptr;
                       double* dm = map.requires_grad() ? map.grad_buffer().data() : nullptr;
                       for (std::size_t i = 0; i < n; ++i) {
                         for (std::size_t ch = 0; ch < c; ++ch) {
                           const std::size_t off = (i * c + ch) * plane;
                           for (std::size_t p = 0; p < plane; ++p) {
                             if (df) df[off + p] += gout[off + p] * m[i * plane + p];
                             if (dm) dm[i * plane + p] += gout[off + p] * f[off + p];
                           }
                         }
                       }
                     });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (auto& v : out) v *= factor;
  return make_result(x.shape(), std::move(out), {x}, [x, factor](std::span<const double> gout) {
    auto dx = x.grad_buffer();
    for (std::size_t i = 0; i < gout.size(); ++i) dx[i] += factor * gout[i];
  });
}

Tensor sum(const Tensor& x) {
  const auto v = x.values();
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  return make_result({1}, {total}, {x}, [x](std::span<const double> gout) {
    auto dx = x.grad_buffer();
    for (auto& d : dx) d += gout[0];
  });
}

}  // namespace fuseseg
