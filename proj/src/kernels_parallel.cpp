#include <atomic>
#include <cstdint>

#include "w2d/kernels.hpp"

namespace w2d::kernels {

namespace {
std::atomic<Policy> g_policy{Policy::parallel};

using sidx = std::int64_t;  // OpenMP loop counters
}  // namespace

void set_policy(Policy p) { g_policy.store(p); }
Policy policy() { return g_policy.load(); }

namespace parallel {

void dense_forward(const DenseDims& d, std::span<const double> x, std::span<const double> w,
                   std::span<const double> b, std::span<double> y) {
  const double* xp = x.data();
  const double* wp = w.data();
#pragma omp parallel for schedule(static)
  for (sidx sn = 0; sn < static_cast<sidx>(d.batch); ++sn) {
    const auto n = static_cast<std::size_t>(sn);
    const double* xr = xp + n * d.in;
    double* yr = y.data() + n * d.out;
    for (std::size_t o = 0; o < d.out; ++o) {
      const double* wr = wp + o * d.in;
      double s = b[o];
      for (std::size_t i = 0; i < d.in; ++i) s += xr[i] * wr[i];
      yr[o] = s;
    }
  }
}

void dense_backward_input(const DenseDims& d, std::span<const double> dy, std::span<const double> w,
                          std::span<double> dx) {
#pragma omp parallel for schedule(static)
  for (sidx sn = 0; sn < static_cast<sidx>(d.batch); ++sn) {
    const auto n = static_cast<std::size_t>(sn);
    double* dxr = dx.data() + n * d.in;
    for (std::size_t o = 0; o < d.out; ++o) {
      const double g = dy[n * d.out + o];
      if (g == 0.0) continue;
      const double* wr = w.data() + o * d.in;
      for (std::size_t i = 0; i < d.in; ++i) dxr[i] += g * wr[i];
    }
  }
}

void dense_backward_params(const DenseDims& d, std::span<const double> dy, std::span<const double> x,
                           std::span<double> dw, std::span<double> db) {
#pragma omp parallel for schedule(static)
  for (sidx so = 0; so < static_cast<sidx>(d.out); ++so) {
    const auto o = static_cast<std::size_t>(so);
    double* dwr = dw.data() + o * d.in;
    for (std::size_t n = 0; n < d.batch; ++n) {
      const double g = dy[n * d.out + o];
      db[o] += g;
      if (g == 0.0) continue;
      const double* xr = x.data() + n * d.in;
      for (std::size_t i = 0; i < d.in; ++i) dwr[i] += g * xr[i];
    }
  }
}

void conv2d_forward(const Conv2dDims& d, std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> y) {
  const std::size_t oh = d.out_height(), ow = d.out_width(), k = d.kernel;
  const auto H = static_cast<std::ptrdiff_t>(d.height), W = static_cast<std::ptrdiff_t>(d.width);
  const auto pad = static_cast<std::ptrdiff_t>(d.padding);
#pragma omp parallel for collapse(2) schedule(static)
  for (sidx sn = 0; sn < static_cast<sidx>(d.batch); ++sn)
    for (sidx so = 0; so < static_cast<sidx>(d.out_channels); ++so) {
      const auto n = static_cast<std::size_t>(sn), o = static_cast<std::size_t>(so);
      const double* xn = x.data() + n * d.in_channels * d.height * d.width;
      const double* wo = w.data() + o * d.in_channels * k * k;
      double* yo = y.data() + (n * d.out_channels + o) * oh * ow;
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const auto y0 = static_cast<std::ptrdiff_t>(oy * d.stride) - pad;
          const auto x0 = static_cast<std::ptrdiff_t>(ox * d.stride) - pad;
          double s = b[o];
          for (std::size_t c = 0; c < d.in_channels; ++c) {
            const double* xc = xn + c * d.height * d.width;
            const double* wc = wo + c * k * k;
            for (std::size_t ky = 0; ky < k; ++ky) {
              const auto iy = y0 + static_cast<std::ptrdiff_t>(ky);
              if (iy < 0 || iy >= H) continue;
              const double* xrow = xc + iy * W;
              const double* wrow = wc + ky * k;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const auto ix = x0 + static_cast<std::ptrdiff_t>(kx);
                if (ix < 0 || ix >= W) continue;
                s += xrow[ix] * wrow[kx];
              }
            }
          }
          yo[oy * ow + ox] = s;
        }
    }
}

void conv2d_backward_input(const Conv2dDims& d, std::span<const double> dy, std::span<const double> w,
                           std::span<double> dx) {
  const std::size_t oh = d.out_height(), ow = d.out_width(), k = d.kernel;
  const auto H = static_cast<std::ptrdiff_t>(d.height), W = static_cast<std::ptrdiff_t>(d.width);
  const auto pad = static_cast<std::ptrdiff_t>(d.padding);
#pragma omp parallel for collapse(2) schedule(static)
  for (sidx sn = 0; sn < static_cast<sidx>(d.batch); ++sn)
    for (sidx sc = 0; sc < static_cast<sidx>(d.in_channels); ++sc) {
      const auto n = static_cast<std::size_t>(sn), c = static_cast<std::size_t>(sc);
      double* dxc = dx.data() + (n * d.in_channels + c) * d.height * d.width;
      for (std::size_t o = 0; o < d.out_channels; ++o) {
        const double* dyo = dy.data() + (n * d.out_channels + o) * oh * ow;
        const double* wc = w.data() + (o * d.in_channels + c) * k * k;
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const double g = dyo[oy * ow + ox];
            const auto y0 = static_cast<std::ptrdiff_t>(oy * d.stride) - pad;
            const auto x0 = static_cast<std::ptrdiff_t>(ox * d.stride) - pad;
            for (std::size_t ky = 0; ky < k; ++ky) {
              const auto iy = y0 + static_cast<std::ptrdiff_t>(ky);
              if (iy < 0 || iy >= H) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const auto ix = x0 + static_cast<std::ptrdiff_t>(kx);
                if (ix < 0 || ix >= W) continue;
                dxc[iy * W + ix] += g * wc[ky * k + kx];
              }
            }
          }
      }
    }
}

void conv2d_backward_params(const Conv2dDims& d, std::span<const double> dy, std::span<const double> x,
                            std::span<double> dw, std::span<double> db) {
  const std::size_t oh = d.out_height(), ow = d.out_width(), k = d.kernel;
  const auto H = static_cast<std::ptrdiff_t>(d.height), W = static_cast<std::ptrdiff_t>(d.width);
  const auto pad = static_cast<std::ptrdiff_t>(d.padding);
#pragma omp parallel for schedule(static)
  for (sidx so = 0; so < static_cast<sidx>(d.out_channels); ++so) {
    const auto o = static_cast<std::size_t>(so);
    double* dwo = dw.data() + o * d.in_channels * k * k;
    for (std::size_t n = 0; n < d.batch; ++n) {
      const double* dyo = dy.data() + (n * d.out_channels + o) * oh * ow;
      const double* xn = x.data() + n * d.in_channels * d.height * d.width;
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const double g = dyo[oy * ow + ox];
          db[o] += g;
          const auto y0 = static_cast<std::ptrdiff_t>(oy * d.stride) - pad;
          const auto x0 = static_cast<std::ptrdiff_t>(ox * d.stride) - pad;
          for (std::size_t c = 0; c < d.in_channels; ++c) {
            const double* xc = xn + c * d.height * d.width;
            double* dwc = dwo + c * k * k;
            for (std::size_t ky = 0; ky < k; ++ky) {
              const auto iy = y0 + static_cast<std::ptrdiff_t>(ky);
              if (iy < 0 || iy >= H) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const auto ix = x0 + static_cast<std::ptrdiff_t>(kx);
                if (ix < 0 || ix >= W) continue;
                dwc[ky * k + kx] += g * xc[iy * W + ix];
              }
            }
          }
        }
    }
  }
}

void maxpool_forward(const Pool2dDims& d, std::span<const double> x, std::span<double> y,
                     std::span<std::size_t> argmax) {
  const std::size_t oh = d.out_height(), ow = d.out_width();
#pragma omp parallel for schedule(static)
  for (sidx sp = 0; sp < static_cast<sidx>(d.batch * d.channels); ++sp) {
    const auto p = static_cast<std::size_t>(sp);
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
}

void maxpool_backward(const Pool2dDims& d, std::span<const double> dy, std::span<const std::size_t> argmax,
                      std::span<double> dx) {
  const std::size_t plane = d.out_height() * d.out_width();
#pragma omp parallel for schedule(static)
  for (sidx sp = 0; sp < static_cast<sidx>(d.batch * d.channels); ++sp) {
    const auto p = static_cast<std::size_t>(sp);
    for (std::size_t out = p * plane; out < (p + 1) * plane; ++out) dx[argmax[out]] += dy[out];
  }
}

void avgpool_forward(const Pool2dDims& d, std::span<const double> x, std::span<double> y) {
  const std::size_t oh = d.out_height(), ow = d.out_width();
  const double area = static_cast<double>(d.kernel * d.kernel);
#pragma omp parallel for schedule(static)
  for (sidx sp = 0; sp < static_cast<sidx>(d.batch * d.channels); ++sp) {
    const auto p = static_cast<std::size_t>(sp);
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double s = 0.0;
        for (std::size_t ky = 0; ky < d.kernel; ++ky)
          for (std::size_t kx = 0; kx < d.kernel; ++kx)
            s += x[(p * d.height + oy * d.stride + ky) * d.width + ox * d.stride + kx];
        y[(p * oh + oy) * ow + ox] = s / area;
      }
  }
}

void avgpool_backward(const Pool2dDims& d, std::span<const double> dy, std::span<double> dx) {
  const std::size_t oh = d.out_height(), ow = d.out_width();
  const double area = static_cast<double>(d.kernel * d.kernel);
#pragma omp parallel for schedule(static)
  for (sidx sp = 0; sp < static_cast<sidx>(d.batch * d.channels); ++sp) {
    const auto p = static_cast<std::size_t>(sp);
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const double g = dy[(p * oh + oy) * ow + ox] / area;
        for (std::size_t ky = 0; ky < d.kernel; ++ky)
          for (std::size_t kx = 0; kx < d.kernel; ++kx)
            dx[(p * d.height + oy * d.stride + ky) * d.width + ox * d.stride + kx] += g;
      }
  }
}

}  // namespace parallel

#define W2D_DISPATCH(name, ...)                                    \
  if (policy() == Policy::serial) return serial::name(__VA_ARGS__); \
  return parallel::name(__VA_ARGS__)

void dense_forward(const DenseDims& d, std::span<const double> x, std::span<const double> w,
                   std::span<const double> b, std::span<double> y) {
  W2D_DISPATCH(dense_forward, d, x, w, b, y);
}
void dense_backward_input(const DenseDims& d, std::span<const double> dy, std::span<const double> w,
                          std::span<double> dx) {
  W2D_DISPATCH(dense_backward_input, d, dy, w, dx);
}
void dense_backward_params(const DenseDims& d, std::span<const double> dy, std::span<const double> x,
                           std::span<double> dw, std::span<double> db) {
  W2D_DISPATCH(dense_backward_params, d, dy, x, dw, db);
}
void conv2d_forward(const Conv2dDims& d, std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> y) {
  W2D_DISPATCH(conv2d_forward, d, x, w, b, y);
}
void conv2d_backward_input(const Conv2dDims& d, std::span<const double> dy, std::span<const double> w,
                           std::span<double> dx) {
  W2D_DISPATCH(conv2d_backward_input, d, dy, w, dx);
}
void conv2d_backward_params(const Conv2dDims& d, std::span<const double> dy, std::span<const double> x,
                            std::span<double> dw, std::span<double> db) {
  W2D_DISPATCH(conv2d_backward_params, d, dy, x, dw, db);
}
void maxpool_forward(const Pool2dDims& d, std::span<const double> x, std::span<double> y,
                     std::span<std::size_t> argmax) {
  W2D_DISPATCH(maxpool_forward, d, x, y, argmax);
}
void maxpool_backward(const Pool2dDims& d, std::span<const double> dy, std::span<const std::size_t> argmax,
                      std::span<double> dx) {
  W2D_DISPATCH(maxpool_backward, d, dy, argmax, dx);
}
void avgpool_forward(const Pool2dDims& d, std::span<const double> x, std::span<double> y) {
  W2D_DISPATCH(avgpool_forward, d, x, y);
}
void avgpool_backward(const Pool2dDims& d, std::span<const double> dy, std::span<double> dx) {
  W2D_DISPATCH(avgpool_backward, d, dy, dx);
}

#undef W2D_DISPATCH

}  // namespace w2d::kernels
