#pragma once

#include <cstddef>
#include <span>

// Inner loops of the layer menu, built on blocked GEMMs. Every kernel exists
// twice: a serial reference and an OpenMP version that spreads the blocks over
// threads. Blocking and reduction order do not depend on the thread count, so
// the two are bit-identical; tests rely on that.
namespace mrr::kernels {

struct ConvDims {
  std::size_t batch, in_channels, height, width, out_channels, kernel;
  std::size_t out_height() const { return height - kernel + 1; }
  std::size_t out_width() const { return width - kernel + 1; }
};

struct PoolDims {
  std::size_t batch, channels, height, width, window;
  std::size_t out_height() const { return height / window; }
  std::size_t out_width() const { return width / window; }
};

struct DenseDims {
  std::size_t batch, in_features, units;
};

#define MRR_KERNEL_DECLS                                                                       \
  void conv2d_forward(const ConvDims& d, std::span<const double> in, std::span<const double> w, \
                      std::span<const double> bias, std::span<double> out);                     \
  void conv2d_backward(const ConvDims& d, std::span<const double> in, std::span<const double> w, \
                       std::span<const double> grad_out, std::span<double> grad_in,              \
                       std::span<double> grad_w, std::span<double> grad_bias);                   \
  void maxpool_forward(const PoolDims& d, std::span<const double> in, std::span<double> out,    \
                       std::span<std::size_t> argmax);                                           \
  void maxpool_backward(const PoolDims& d, std::span<const double> grad_out,                   \
                        std::span<const std::size_t> argmax, std::span<double> grad_in);        \
  void dense_forward(const DenseDims& d, std::span<const double> in, std::span<const double> w, \
                     std::span<const double> bias, std::span<double> out);                      \
  void dense_backward(const DenseDims& d, std::span<const double> in, std::span<const double> w, \
                      std::span<const double> grad_out, std::span<double> grad_in,               \
                      std::span<double> grad_w, std::span<double> grad_bias);

namespace serial {
MRR_KERNEL_DECLS
}  // namespace serial

MRR_KERNEL_DECLS

#undef MRR_KERNEL_DECLS

// Threads available to the parallel kernels (1 when built without OpenMP).
int max_threads();

}  // namespace mrr::kernels
