// Register-blocked direct convolution for stride-1 layers whose output rows
// are a multiple of 8 doubles wide. Inputs are pre-padded, so the inner loops
// carry no bounds checks.
#pragma once

#include <algorithm>
#include <cstddef>

namespace fuseseg::direct {

// Unaligned 8-lane double vector (GCC/Clang vector extension).
typedef double v8d __attribute__((vector_size(64), aligned(8)));

inline v8d load(const double* p) { return *reinterpret_cast<const v8d*>(p); }
inline void store(double* p, v8d v) { *reinterpret_cast<v8d*>(p) = v; }

struct Plane {
  const double* data;  // (C, H, W), zero-padded
  std::size_t channels, height, width;
};

/// out[co0..co0+CB)[oh][x0..x0+8NV) (+)= sum_{ci,ki,kj} w[co][ci][ki][kj] * in[ci][oh+ki*d][x+kj*d]
// K > 0 fixes the kernel size at compile time; K == 0 reads it from `k_rt`.
template <int CB, int NV, int K>
__attribute__((always_inline)) inline void forward_tile(const Plane& in, const double* w, std::size_t co0,
                                                        int k_rt, int d, double* out, std::size_t out_h,
                                                        std::size_t out_w, std::size_t oh, std::size_t x0,
                                                        bool accumulate) {
  const int k = K > 0 ? K : k_rt;
  v8d acc[CB][NV];
  for (int c = 0; c < CB; ++c)
    for (int v = 0; v < NV; ++v) acc[c][v] = v8d{};
  const std::size_t kk = static_cast<std::size_t>(k * k);
  const std::size_t wstride = in.channels * kk;
  for (std::size_t ci = 0; ci < in.channels; ++ci) {
    for (int ki = 0; ki < k; ++ki) {
      const double* row = in.data + (ci * in.height + oh + static_cast<std::size_t>(ki * d)) * in.width + x0;
      const double* wp = w + co0 * wstride + ci * kk + static_cast<std::size_t>(ki * k);
      for (int kj = 0; kj < k; ++kj) {
        const double* r = row + kj * d;
        v8d x[NV];
        for (int v = 0; v < NV; ++v) x[v] = load(r + 8 * v);
        for (int c = 0; c < CB; ++c) {
          const double wv = wp[c * wstride + static_cast<std::size_t>(kj)];
          for (int v = 0; v < NV; ++v) acc[c][v] += wv * x[v];
        }
      }
    }
  }
  for (int c = 0; c < CB; ++c) {
    double* o = out + ((co0 + static_cast<std::size_t>(c)) * out_h + oh) * out_w + x0;
    for (int v = 0; v < NV; ++v) {
      if (accumulate) {
        store(o + 8 * v, load(o + 8 * v) + acc[c][v]);
      } else {
        store(o + 8 * v, acc[c][v]);
      }
    }
  }
}

template <int CB, int K>
inline void forward_rows(const Plane& in, const double* w, std::size_t co0, int k, int d, double* out,
                         std::size_t out_h, std::size_t out_w, bool accumulate) {
  for (std::size_t oh = 0; oh < out_h; ++oh) {
    std::size_t x0 = 0;
    for (; x0 + 16 <= out_w; x0 += 16) forward_tile<CB, 2, K>(in, w, co0, k, d, out, out_h, out_w, oh, x0, accumulate);
    for (; x0 + 8 <= out_w; x0 += 8) forward_tile<CB, 1, K>(in, w, co0, k, d, out, out_h, out_w, oh, x0, accumulate);
  }
}

/// Full stride-1 convolution of one padded image; `w` is (C_out, C_in, k, k).
template <int K>
inline void forward_k(const Plane& in, const double* w, std::size_t c_out, int k, int d, double* out,
                      std::size_t out_h, std::size_t out_w, bool accumulate) {
  std::size_t co = 0;
  for (; co + 8 <= c_out; co += 8) forward_rows<8, K>(in, w, co, k, d, out, out_h, out_w, accumulate);
  for (; co + 4 <= c_out; co += 4) forward_rows<4, K>(in, w, co, k, d, out, out_h, out_w, accumulate);
  for (; co < c_out; ++co) forward_rows<1, K>(in, w, co, k, d, out, out_h, out_w, accumulate);
}

inline void forward(const Plane& in, const double* w, std::size_t c_out, int k, int d, double* out,
                    std::size_t out_h, std::size_t out_w, bool accumulate) {
  switch (k) {
    case 1: forward_k<1>(in, w, c_out, k, d, out, out_h, out_w, accumulate); break;
    case 3: forward_k<3>(in, w, c_out, k, d, out, out_h, out_w, accumulate); break;
    default: forward_k<0>(in, w, c_out, k, d, out, out_h, out_w, accumulate); break;
  }
}

/// dw[co0..co0+CB)[ci][ki][0..K) += sum_{oh in [oh0,oh1), x} g[co][oh][x] * in[ci][oh+ki*d][x+kj*d]
template <int CB, int K>
inline void weight_grad_tile(const Plane& in, const double* g, std::size_t out_h, std::size_t out_w,
                             std::size_t oh0, std::size_t oh1, std::size_t co0, std::size_t ci, int ki, int d,
                             double* dw) {
  v8d acc[CB][K];
  for (int c = 0; c < CB; ++c)
    for (int j = 0; j < K; ++j) acc[c][j] = v8d{};
  const std::size_t plane = out_h * out_w;
  for (std::size_t oh = oh0; oh < oh1; ++oh) {
    const double* row = in.data + (ci * in.height + oh + static_cast<std::size_t>(ki * d)) * in.width;
    for (std::size_t x0 = 0; x0 < out_w; x0 += 8) {
      v8d x[K];
      for (int j = 0; j < K; ++j) x[j] = load(row + x0 + static_cast<std::size_t>(j * d));
      for (int c = 0; c < CB; ++c) {
        const v8d gv = load(g + (co0 + static_cast<std::size_t>(c)) * plane + oh * out_w + x0);
        for (int j = 0; j < K; ++j) acc[c][j] += gv * x[j];
      }
    }
  }
  const std::size_t kk = static_cast<std::size_t>(K * K);
  for (int c = 0; c < CB; ++c) {
    double* dst = dw + ((co0 + static_cast<std::size_t>(c)) * in.channels + ci) * kk + static_cast<std::size_t>(ki * K);
    for (int j = 0; j < K; ++j) {
      double s = 0.0;
      for (int l = 0; l < 8; ++l) s += acc[c][j][l];
      dst[j] += s;
    }
  }
}

template <int CB, int K>
inline void weight_grad_block(const Plane& in, const double* g, std::size_t out_h, std::size_t out_w,
                              std::size_t co0, int d, double* dw) {
  // Row tiles sized so the CB gradient rows stay in L1 while every input channel streams past.
  const std::size_t rows = std::max<std::size_t>(1, 2048 / (CB * out_w));
  for (std::size_t oh0 = 0; oh0 < out_h; oh0 += rows) {
    const std::size_t oh1 = std::min(out_h, oh0 + rows);
    for (std::size_t ci = 0; ci < in.channels; ++ci) {
      for (int ki = 0; ki < K; ++ki) weight_grad_tile<CB, K>(in, g, out_h, out_w, oh0, oh1, co0, ci, ki, d, dw);
    }
  }
}

template <int K>
inline void weight_grad_k(const Plane& in, const double* g, std::size_t c_out, std::size_t out_h,
                          std::size_t out_w, int d, double* dw) {
  constexpr int CB = 8;
  std::size_t co = 0;
  for (; co + CB <= c_out; co += CB) weight_grad_block<CB, K>(in, g, out_h, out_w, co, d, dw);
  for (; co < c_out; ++co) weight_grad_block<1, K>(in, g, out_h, out_w, co, d, dw);
}

/// Kernel gradient for k in {1, 3}; returns false for other kernel sizes.
inline bool weight_grad(const Plane& in, const double* g, std::size_t c_out, int k, std::size_t out_h,
                        std::size_t out_w, int d, double* dw) {
  if (k == 3) {
    weight_grad_k<3>(in, g, c_out, out_h, out_w, d, dw);
    return true;
  }
  if (k == 1) {
    weight_grad_k<1>(in, g, c_out, out_h, out_w, d, dw);
    return true;
  }
  return false;
}

}  // namespace fuseseg::direct
