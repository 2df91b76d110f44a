#include "w2d/kernels.hpp"

namespace w2d::kernels::serial {

void dense_forward(const DenseDims& d, std::span<const double> x, std::span<const double> w,
                   std::span<const double> b, std::span<double> y) {
  for (std::size_t n = 0; n < d.batch; ++n)
    for (std::size_t o = 0; o < d.out; ++o) {
      double s = b[o];
      for (std::size_t i = 0; i < d.in; ++i) s += x[n * d.in + i] * w[o * d.in + i];
      y[n * d.out + o] = s;
    }
}

void dense_backward_input(const DenseDims& d, std::span<const double> dy, std::span<const double> w,
                          std::span<double> dx) {
  for (std::size_t n = 0; n < d.batch; ++n)
    for (std::size_t o = 0; o < d.out; ++o) {
      const double g = dy[n * d.out + o];
      for (std::size_t i = 0; i < d.in; ++i) dx[n * d.in + i] += g * w[o * d.in + i];
    }
}

void dense_backward_params(const DenseDims& d, std::span<const double> dy, std::span<const double> x,
                           std::span<double> dw, std::span<double> db) {
  for (std::size_t n = 0; n < d.batch; ++n)
    for (std::size_t o = 0; o < d.out; ++o) {
      const double g = dy[n * d.out + o];
      db[o] += g;
      for (std::size_t i = 0; i < d.in; ++i) dw[o * d.in + i] += g * x[n * d.in + i];
    }
}

void conv2d_forward(const Conv2dDims& d, std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> y) {
  const std::size_t oh = d.out_height(), ow = d.out_width(), k = d.kernel;
  for (std::size_t n = 0; n < d.batch; ++n)
    for (std::size_t o = 0; o < d.out_channels; ++o)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double s = b[o];
          for (std::size_t c = 0; c < d.in_channels; ++c)
            for (std::size_t ky = 0; ky < k; ++ky) {
              const auto iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) - static_cast<std::ptrdiff_t>(d.padding);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.height)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const auto ix =
                    static_cast<std::ptrdiff_t>(ox * d.stride + kx) - static_cast<std::ptrdiff_t>(d.padding);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.width)) continue;
                s += x[((n * d.in_channels + c) * d.height + iy) * d.width + ix] *
                     w[((o * d.in_channels + c) * k + ky) * k + kx];
              }
            }
          y[((n * d.out_channels + o) * oh + oy) * ow + ox] = s;
        }
}

void conv2d_backward_input(const Conv2dDims& d, std::span<const double> dy, std::span<const double> w,
                           std::span<double> dx) {
  const std::size_t oh = d.out_height(), ow = d.out_width(), k = d.kernel;
  for (std::size_t n = 0; n < d.batch; ++n)
    for (std::size_t o = 0; o < d.out_channels; ++o)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const double g = dy[((n * d.out_channels + o) * oh + oy) * ow + ox];
          for (std::size_t c = 0; c < d.in_channels; ++c)
            for (std::size_t ky = 0; ky < k; ++ky) {
              const auto iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) - static_cast<std::ptrdiff_t>(d.padding);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.height)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const auto ix =
                    static_cast<std::ptrdiff_t>(ox * d.stride + kx) - static_cast<std::ptrdiff_t>(d.padding);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.width)) continue;
                dx[((n * d.in_channels + c) * d.height + iy) * d.width + ix] +=
                    g * w[((o * d.in_channels + c) * k + ky) * k + kx];
              }
            }
        }
}

void conv2d_backward_params(const Conv2dDims& d, std::span<const double> dy, std::span<const double> x,
                            std::span<double> dw, std::span<double> db) {
  const std::size_t oh = d.out_height(), ow = d.out_width(), k = d.kernel;
  for (std::size_t n = 0; n < d.batch; ++n)
    for (std::size_t o = 0; o < d.out_channels; ++o)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const double g = dy[((n * d.out_channels + o) * oh + oy) * ow + ox];
          db[o] += g;
          for (std::size_t c = 0; c < d.in_channels; ++c)
            for (std::size_t ky = 0; ky < k; ++ky) {
              const auto iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) - static_cast<std::ptrdiff_t>(d.padding);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.height)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const auto ix =
                    static_cast<std::ptrdiff_t>(ox * d.stride + kx) - static_cast<std::ptrdiff_t>(d.padding);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.width)) continue;
                dw[((o * d.in_channels + c) * k + ky) * k + kx] +=
                    g * x[((n * d.in_channels + c) * d.height + iy) * d.width + ix];
              }
            }
        }
}

void maxpool_forward(const Pool2dDims& d, std::span<const double> x, std::span<double> y,
                     std::span<std::size_t> argmax) {
  const std::size_t oh = d.out_height(), ow = d.out_width();
  for (std::size_t p = 0; p < d.batch * d.channels; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (p * d.height + oy * d.stride) * d.width + ox * d.stride;
        for (std::size_t ky = 0; ky < d.kernel; ++ky)
          for (std::size_t kx = 0; kx < d.kernel; ++kx) {
            const std::size_t idx = (p * d.height + oy * d.stride + ky) * d.width + ox * d.stride + kx;
            if (x[idx] > x[best]) best = idx;
          }
        const std::size_t out = (p * oh + oy) * ow + ox;
        y[out] = x[best];
        argmax[out] = best;
      }
}

void maxpool_backward(const Pool2dDims& d, std::span<const double> dy, std::span<const std::size_t> argmax,
                      std::span<double> dx) {
  const std::size_t total = d.batch * d.channels * d.out_height() * d.out_width();
  for (std::size_t out = 0; out < total; ++out) dx[argmax[out]] += dy[out];
}

void avgpool_forward(const Pool2dDims& d, std::span<const double> x, std::span<double> y) {
  const std::size_t oh = d.out_height(), ow = d.out_width();
  const double area = static_cast<double>(d.kernel * d.kernel);
  for (std::size_t p = 0; p < d.batch * d.channels; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double s = 0.0;
        for (std::size_t ky = 0; ky < d.kernel; ++ky)
          for (std::size_t kx = 0; kx < d.kernel; ++kx)
            s += x[(p * d.height + oy * d.stride + ky) * d.width + ox * d.stride + kx];
        y[(p * oh + oy) * ow + ox] = s / area;
      }
}

void avgpool_backward(const Pool2dDims& d, std::span<const double> dy, std::span<double> dx) {
  const std::size_t oh = d.out_height(), ow = d.out_width();
  const double area = static_cast<double>(d.kernel * d.kernel);
  for (std::size_t p = 0; p < d.batch * d.channels; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const double g = dy[(p * oh + oy) * ow + ox] / area;
        for (std::size_t ky = 0; ky < d.kernel; ++ky)
          for (std::size_t kx = 0; kx < d.kernel; ++kx)
            dx[(p * d.height + oy * d.stride + ky) * d.width + ox * d.stride + kx] += g;
      }
}

}  // namespace w2d::kernels::serial
