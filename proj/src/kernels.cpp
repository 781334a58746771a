#include "mrr/kernels.hpp"

#include <limits>
#include <vector>

// Keep every GEMM single-threaded so the summation order never depends on the thread count.
#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mrr::kernels {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

// Samples per conv weight-gradient partial and rows per dense GEMM block. Both
// variants cut the batch the same way and reduce partials in block order, which
// makes their results bit-identical.
constexpr std::size_t kConvBlock = 8;
constexpr std::size_t kDenseBlock = 16;

std::size_t blocks(std::size_t n, std::size_t size) { return (n + size - 1) / size; }

// (C*k*k, oh*ow) patch matrix of one sample.
void im2col(const ConvDims& d, const double* src, RowMat& cols) {
  const std::size_t oh = d.out_height(), ow = d.out_width(), k = d.kernel;
  cols.resize(static_cast<Eigen::Index>(d.in_channels * k * k), static_cast<Eigen::Index>(oh * ow));
  double* dst = cols.data();
  for (std::size_t c = 0; c < d.in_channels; ++c) {
    const double* plane = src + c * d.height * d.width;
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx)
        for (std::size_t y = 0; y < oh; ++y) {
          const double* s = plane + (y + ky) * d.width + kx;
          for (std::size_t x = 0; x < ow; ++x) *dst++ = s[x];
        }
  }
}

void col2im(const ConvDims& d, const RowMat& cols, double* dst) {
  const std::size_t oh = d.out_height(), ow = d.out_width(), k = d.kernel;
  for (std::size_t i = 0; i < d.in_channels * d.height * d.width; ++i) dst[i] = 0.0;
  const double* src = cols.data();
  for (std::size_t c = 0; c < d.in_channels; ++c) {
    double* plane = dst + c * d.height * d.width;
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx)
        for (std::size_t y = 0; y < oh; ++y) {
          double* t = plane + (y + ky) * d.width + kx;
          for (std::size_t x = 0; x < ow; ++x) t[x] += *src++;
        }
  }
}

void conv_forward_impl(const ConvDims& d, std::span<const double> in, std::span<const double> w,
                       std::span<const double> bias, std::span<double> out, bool parallel) {
  const auto O = static_cast<Eigen::Index>(d.out_channels);
  const auto K = static_cast<Eigen::Index>(d.in_channels * d.kernel * d.kernel);
  const auto P = static_cast<Eigen::Index>(d.out_height() * d.out_width());
  const CMap W(w.data(), O, K);
  const Eigen::Map<const Eigen::VectorXd> bv(bias.data(), O);
  const auto n = static_cast<std::ptrdiff_t>(d.batch);
#pragma omp parallel if (parallel)
  {
    RowMat cols;
#pragma omp for schedule(static)
    for (std::ptrdiff_t b = 0; b < n; ++b) {
      im2col(d, in.data() + b * d.in_channels * d.height * d.width, cols);
      MMap dst(out.data() + b * O * P, O, P);
      dst.noalias() = W * cols;
      dst.colwise() += bv;
    }
  }
}

void conv_backward_impl(const ConvDims& d, std::span<const double> in, std::span<const double> w,
                        std::span<const double> grad_out, std::span<double> grad_in,
                        std::span<double> grad_w, std::span<double> grad_bias, bool parallel) {
  const auto O = static_cast<Eigen::Index>(d.out_channels);
  const auto K = static_cast<Eigen::Index>(d.in_channels * d.kernel * d.kernel);
  const auto P = static_cast<Eigen::Index>(d.out_height() * d.out_width());
  const std::size_t in_size = d.in_channels * d.height * d.width;
  const CMap W(w.data(), O, K);
  const std::size_t nb = blocks(d.batch, kConvBlock);
  std::vector<RowMat> partial(nb, RowMat::Zero(O, K));
#pragma omp parallel if (parallel)
  {
    RowMat cols, dcols;
#pragma omp for schedule(static)
    for (std::ptrdiff_t blk = 0; blk < static_cast<std::ptrdiff_t>(nb); ++blk) {
      const std::size_t first = static_cast<std::size_t>(blk) * kConvBlock;
      const std::size_t last = std::min(d.batch, first + kConvBlock);
      for (std::size_t b = first; b < last; ++b) {
        im2col(d, in.data() + b * in_size, cols);
        const CMap G(grad_out.data() + b * O * P, O, P);
        partial[blk].noalias() += G * cols.transpose();
        if (!grad_in.empty()) {
          dcols.noalias() = W.transpose() * G;
          col2im(d, dcols, grad_in.data() + b * in_size);
        }
      }
    }
  }
  MMap gw(grad_w.data(), O, K);
  gw.setZero();
  for (const auto& p : partial) gw += p;
  for (Eigen::Index o = 0; o < O; ++o) {
    double acc = 0.0;
    for (std::size_t b = 0; b < d.batch; ++b) {
      const double* g = grad_out.data() + (b * d.out_channels + o) * P;
      for (Eigen::Index i = 0; i < P; ++i) acc += g[i];
    }
    grad_bias[o] = acc;
  }
}

void dense_forward_impl(const DenseDims& d, std::span<const double> in, std::span<const double> w,
                        std::span<const double> bias, std::span<double> out, bool parallel) {
  const auto I = static_cast<Eigen::Index>(d.in_features), U = static_cast<Eigen::Index>(d.units);
  const CMap W(w.data(), U, I);
  const Eigen::Map<const Eigen::RowVectorXd> bv(bias.data(), U);
  const std::size_t nb = blocks(d.batch, kDenseBlock);
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t blk = 0; blk < static_cast<std::ptrdiff_t>(nb); ++blk) {
    const std::size_t first = static_cast<std::size_t>(blk) * kDenseBlock;
    const auto rows = static_cast<Eigen::Index>(std::min(d.batch, first + kDenseBlock) - first);
    const CMap X(in.data() + first * d.in_features, rows, I);
    MMap Y(out.data() + first * d.units, rows, U);
    Y.noalias() = X * W.transpose();
    Y.rowwise() += bv;
  }
}

void dense_backward_impl(const DenseDims& d, std::span<const double> in, std::span<const double> w,
                         std::span<const double> grad_out, std::span<double> grad_in,
                         std::span<double> grad_w, std::span<double> grad_bias, bool parallel) {
  const auto I = static_cast<Eigen::Index>(d.in_features), U = static_cast<Eigen::Index>(d.units);
  const CMap W(w.data(), U, I);
  const std::size_t nb = blocks(d.batch, kDenseBlock);
  std::vector<RowMat> partial(nb);
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t blk = 0; blk < static_cast<std::ptrdiff_t>(nb); ++blk) {
    const std::size_t first = static_cast<std::size_t>(blk) * kDenseBlock;
    const auto rows = static_cast<Eigen::Index>(std::min(d.batch, first + kDenseBlock) - first);
    const CMap X(in.data() + first * d.in_features, rows, I);
    const CMap G(grad_out.data() + first * d.units, rows, U);
    partial[blk].noalias() = G.transpose() * X;
    if (!grad_in.empty()) {
      MMap GX(grad_in.data() + first * d.in_features, rows, I);
      GX.noalias() = G * W;
    }
  }
  MMap gw(grad_w.data(), U, I);
  gw.setZero();
  for (const auto& p : partial) gw += p;
  for (Eigen::Index o = 0; o < U; ++o) {
    double acc = 0.0;
    for (std::size_t b = 0; b < d.batch; ++b) acc += grad_out[b * d.units + o];
    grad_bias[o] = acc;
  }
}

inline void maxpool_plane(const PoolDims& d, std::size_t bc, std::span<const double> in,
                          std::span<double> out, std::span<std::size_t> argmax) {
  const std::size_t oh = d.out_height(), ow = d.out_width(), win = d.window;
  const std::size_t in_base = bc * d.height * d.width;
  const std::size_t out_base = bc * oh * ow;
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double best = -std::numeric_limits<double>::infinity();
      std::size_t best_at = in_base + (y * win) * d.width + x * win;
      for (std::size_t dy = 0; dy < win; ++dy) {
        for (std::size_t dx = 0; dx < win; ++dx) {
          const std::size_t at = in_base + (y * win + dy) * d.width + x * win + dx;
          if (in[at] > best) {
            best = in[at];
            best_at = at;
          }
        }
      }
      out[out_base + y * ow + x] = best;
      argmax[out_base + y * ow + x] = best_at;
    }
  }
}

inline void maxpool_plane_backward(const PoolDims& d, std::size_t bc, std::span<const double> grad_out,
                                   std::span<const std::size_t> argmax, std::span<double> grad_in) {
  const std::size_t plane_in = d.height * d.width;
  const std::size_t plane_out = d.out_height() * d.out_width();
  for (std::size_t i = 0; i < plane_in; ++i) grad_in[bc * plane_in + i] = 0.0;
  for (std::size_t i = 0; i < plane_out; ++i) {
    grad_in[argmax[bc * plane_out + i]] += grad_out[bc * plane_out + i];
  }
}


void maxpool_forward_impl(const PoolDims& d, std::span<const double> in, std::span<double> out,
                          std::span<std::size_t> argmax, bool parallel) {
  const auto n = static_cast<std::ptrdiff_t>(d.batch * d.channels);
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t bc = 0; bc < n; ++bc) maxpool_plane(d, bc, in, out, argmax);
}

void maxpool_backward_impl(const PoolDims& d, std::span<const double> grad_out,
                           std::span<const std::size_t> argmax, std::span<double> grad_in, bool parallel) {
  const auto n = static_cast<std::ptrdiff_t>(d.batch * d.channels);
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t bc = 0; bc < n; ++bc) maxpool_plane_backward(d, bc, grad_out, argmax, grad_in);
}

}  // namespace

#define MRR_KERNEL_DEFS(PARALLEL)                                                                      \
  void conv2d_forward(const ConvDims& d, std::span<const double> in, std::span<const double> w,        \
                      std::span<const double> bias, std::span<double> out) {                            \
    conv_forward_impl(d, in, w, bias, out, PARALLEL);                                                   \
  }                                                                                                     \
  void conv2d_backward(const ConvDims& d, std::span<const double> in, std::span<const double> w,       \
                       std::span<const double> grad_out, std::span<double> grad_in,                     \
                       std::span<double> grad_w, std::span<double> grad_bias) {                         \
    conv_backward_impl(d, in, w, grad_out, grad_in, grad_w, grad_bias, PARALLEL);                       \
  }                                                                                                     \
  void maxpool_forward(const PoolDims& d, std::span<const double> in, std::span<double> out,           \
                       std::span<std::size_t> argmax) {                                                 \
    maxpool_forward_impl(d, in, out, argmax, PARALLEL);                                                 \
  }                                                                                                     \
  void maxpool_backward(const PoolDims& d, std::span<const double> grad_out,                          \
                        std::span<const std::size_t> argmax, std::span<double> grad_in) {               \
    maxpool_backward_impl(d, grad_out, argmax, grad_in, PARALLEL);                                      \
  }                                                                                                     \
  void dense_forward(const DenseDims& d, std::span<const double> in, std::span<const double> w,        \
                     std::span<const double> bias, std::span<double> out) {                             \
    dense_forward_impl(d, in, w, bias, out, PARALLEL);                                                  \
  }                                                                                                     \
  void dense_backward(const DenseDims& d, std::span<const double> in, std::span<const double> w,       \
                      std::span<const double> grad_out, std::span<double> grad_in,                      \
                      std::span<double> grad_w, std::span<double> grad_bias) {                          \
    dense_backward_impl(d, in, w, grad_out, grad_in, grad_w, grad_bias, PARALLEL);                      \
  }

namespace serial {
MRR_KERNEL_DEFS(false)
}  // namespace serial

MRR_KERNEL_DEFS(true)

#undef MRR_KERNEL_DEFS

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace mrr::kernels
