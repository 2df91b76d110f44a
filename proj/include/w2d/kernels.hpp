#pragma once

// Raw numeric kernels behind the autodiff layer primitives.
//
// Two implementations of each kernel exist: `serial::` is the straightforward
// reference, `parallel::` distributes independent output elements over OpenMP
// threads. Both accumulate every output element in the same order, so their
// results are bitwise identical (tests/test_kernels.cpp checks this). The
// free functions in `w2d::kernels` dispatch on the process-wide policy.
//
// Backward kernels accumulate (+=) into their outputs.

#include <cstddef>
#include <span>

namespace w2d::kernels {

enum class Policy { serial, parallel };

void set_policy(Policy policy);
Policy policy();

struct DenseDims {
  std::size_t batch, in, out;
};

struct Conv2dDims {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel, stride, padding;

  std::size_t out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
};

struct Pool2dDims {
  std::size_t batch, channels, height, width;
  std::size_t kernel, stride;

  std::size_t out_height() const { return (height - kernel) / stride + 1; }
  std::size_t out_width() const { return (width - kernel) / stride + 1; }
};

#define W2D_KERNEL_DECLS                                                                                       \
  void dense_forward(const DenseDims& d, std::span<const double> x, std::span<const double> w,                \
                     std::span<const double> b, std::span<double> y);                                          \
  void dense_backward_input(const DenseDims& d, std::span<const double> dy, std::span<const double> w,         \
                            std::span<double> dx);                                                            \
  void dense_backward_params(const DenseDims& d, std::span<const double> dy, std::span<const double> x,        \
                             std::span<double> dw, std::span<double> db);                                      \
  void conv2d_forward(const Conv2dDims& d, std::span<const double> x, std::span<const double> w,              \
                      std::span<const double> b, std::span<double> y);                                         \
  void conv2d_backward_input(const Conv2dDims& d, std::span<const double> dy, std::span<const double> w,       \
                             std::span<double> dx);                                                            \
  void conv2d_backward_params(const Conv2dDims& d, std::span<const double> dy, std::span<const double> x,      \
                              std::span<double> dw, std::span<double> db);                                     \
  void maxpool_forward(const Pool2dDims& d, std::span<const double> x, std::span<double> y,                    \
                       std::span<std::size_t> argmax);                                                         \
  void maxpool_backward(const Pool2dDims& d, std::span<const double> dy, std::span<const std::size_t> argmax,  \
                        std::span<double> dx);                                                                 \
  void avgpool_forward(const Pool2dDims& d, std::span<const double> x, std::span<double> y);                   \
  void avgpool_backward(const Pool2dDims& d, std::span<const double> dy, std::span<double> dx);

namespace serial {
W2D_KERNEL_DECLS
}

namespace parallel {
W2D_KERNEL_DECLS
}

W2D_KERNEL_DECLS

#undef W2D_KERNEL_DECLS

}  // namespace w2d::kernels
