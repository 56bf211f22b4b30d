#pragma once

// Dense inner loops behind the tensor operations.
//
// Every kernel exists twice: `serial::` is the plain reference loop and
// `parallel::` distributes independent output elements over OpenMP threads.
// Each output element is produced by the same sequence of f64 accumulations in
// both variants, so the two agree bit-for-bit regardless of thread count.

#include <cstddef>
#include <span>

namespace lico::kernels {

/// Geometry of a single-image 2-D convolution (CHW input, OIKK weights).
struct ConvGeometry {
  std::size_t in_channels = 0;
  std::size_t in_height = 0;
  std::size_t in_width = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;

  std::size_t out_height() const { return (in_height + 2 * padding - kernel) / stride + 1; }
  std::size_t out_width() const { return (in_width + 2 * padding - kernel) / stride + 1; }
  std::size_t in_size() const { return in_channels * in_height * in_width; }
  std::size_t out_size() const { return out_channels * out_height() * out_width(); }
  std::size_t weight_size() const { return out_channels * in_channels * kernel * kernel; }
};

// Below this many multiply-adds the OpenMP region costs more than it saves.
inline constexpr std::size_t kMinParallelWork = 1 << 15;

namespace detail {

// c[i, j] = sum_p a[i, p] * b[p, j] for rows [i] of a single output row.
template <class Real>
inline void gemm_row(std::size_t i, std::size_t k, std::size_t n, const Real* a, const Real* b,
                     Real* c) {
  for (std::size_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
      acc += static_cast<double>(a[i * k + p]) * static_cast<double>(b[p * n + j]);
    }
    c[i * n + j] = static_cast<Real>(acc);
  }
}

template <class Real>
inline void conv_forward_channel(const ConvGeometry& g, std::size_t o, const Real* x,
                                 const Real* w, const Real* bias, Real* y) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  const long k = static_cast<long>(g.kernel);
  const long pad = static_cast<long>(g.padding);
  for (std::size_t r = 0; r < oh; ++r) {
    for (std::size_t c = 0; c < ow; ++c) {
      double acc = bias ? static_cast<double>(bias[o]) : 0.0;
      for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
        for (long kr = 0; kr < k; ++kr) {
          const long ir = static_cast<long>(r * g.stride) + kr - pad;
          if (ir < 0 || ir >= static_cast<long>(g.in_height)) continue;
          for (long kc = 0; kc < k; ++kc) {
            const long ic = static_cast<long>(c * g.stride) + kc - pad;
            if (ic < 0 || ic >= static_cast<long>(g.in_width)) continue;
            acc += static_cast<double>(
                       w[((o * g.in_channels + ci) * g.kernel + kr) * g.kernel + kc]) *
                   static_cast<double>(x[(ci * g.in_height + ir) * g.in_width + ic]);
          }
        }
      }
      y[(o * oh + r) * ow + c] = static_cast<Real>(acc);
    }
  }
}

// dx for one input channel, gathered from every output position that reads it.
template <class Real>
inline void conv_backward_input_channel(const ConvGeometry& g, std::size_t ci, const Real* dy,
                                        const Real* w, Real* dx) {
  const long oh = static_cast<long>(g.out_height());
  const long ow = static_cast<long>(g.out_width());
  const long k = static_cast<long>(g.kernel);
  const long s = static_cast<long>(g.stride);
  const long pad = static_cast<long>(g.padding);
  for (std::size_t ir = 0; ir < g.in_height; ++ir) {
    for (std::size_t ic = 0; ic < g.in_width; ++ic) {
      double acc = 0.0;
      for (std::size_t o = 0; o < g.out_channels; ++o) {
        for (long kr = 0; kr < k; ++kr) {
          const long num_r = static_cast<long>(ir) + pad - kr;
          if (num_r < 0 || num_r % s != 0) continue;
          const long r = num_r / s;
          if (r >= oh) continue;
          for (long kc = 0; kc < k; ++kc) {
            const long num_c = static_cast<long>(ic) + pad - kc;
            if (num_c < 0 || num_c % s != 0) continue;
            const long c = num_c / s;
            if (c >= ow) continue;
            acc += static_cast<double>(dy[(o * oh + r) * ow + c]) *
                   static_cast<double>(w[((o * g.in_channels + ci) * g.kernel + kr) * g.kernel + kc]);
          }
        }
      }
      dx[(ci * g.in_height + ir) * g.in_width + ic] += static_cast<Real>(acc);
    }
  }
}

// dw (and db) for one output channel.
template <class Real>
inline void conv_backward_weight_channel(const ConvGeometry& g, std::size_t o, const Real* x,
                                         const Real* dy, Real* dw, Real* db) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  const long pad = static_cast<long>(g.padding);
  for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
    for (std::size_t kr = 0; kr < g.kernel; ++kr) {
      for (std::size_t kc = 0; kc < g.kernel; ++kc) {
        double acc = 0.0;
        for (std::size_t r = 0; r < oh; ++r) {
          const long ir = static_cast<long>(r * g.stride + kr) - pad;
          if (ir < 0 || ir >= static_cast<long>(g.in_height)) continue;
          for (std::size_t c = 0; c < ow; ++c) {
            const long ic = static_cast<long>(c * g.stride + kc) - pad;
            if (ic < 0 || ic >= static_cast<long>(g.in_width)) continue;
            acc += static_cast<double>(dy[(o * oh + r) * ow + c]) *
                   static_cast<double>(x[(ci * g.in_height + ir) * g.in_width + ic]);
          }
        }
        dw[((o * g.in_channels + ci) * g.kernel + kr) * g.kernel + kc] += static_cast<Real>(acc);
      }
    }
  }
  if (db) {
    double acc = 0.0;
    for (std::size_t p = 0; p < oh * ow; ++p) acc += static_cast<double>(dy[o * oh * ow + p]);
    db[o] += static_cast<Real>(acc);
  }
}

}  // namespace detail

namespace serial {

/// c (m x n) = a (m x k) * b (k x n), all row-major.
template <class Real>
void matmul(std::size_t m, std::size_t k, std::size_t n, std::span<const Real> a,
            std::span<const Real> b, std::span<Real> c) {
  for (std::size_t i = 0; i < m; ++i) detail::gemm_row(i, k, n, a.data(), b.data(), c.data());
}

template <class Real>
void conv2d_forward(const ConvGeometry& g, std::span<const Real> x, std::span<const Real> w,
                    std::span<const Real> bias, std::span<Real> y) {
  const Real* b = bias.empty() ? nullptr : bias.data();
  for (std::size_t o = 0; o < g.out_channels; ++o) {
    detail::conv_forward_channel(g, o, x.data(), w.data(), b, y.data());
  }
}

/// Accumulates into dx.
template <class Real>
void conv2d_backward_input(const ConvGeometry& g, std::span<const Real> dy,
                           std::span<const Real> w, std::span<Real> dx) {
  for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
    detail::conv_backward_input_channel(g, ci, dy.data(), w.data(), dx.data());
  }
}

/// Accumulates into dw and (when non-empty) db.
template <class Real>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const Real> x,
                            std::span<const Real> dy, std::span<Real> dw, std::span<Real> db) {
  Real* dbp = db.empty() ? nullptr : db.data();
  for (std::size_t o = 0; o < g.out_channels; ++o) {
    detail::conv_backward_weight_channel(g, o, x.data(), dy.data(), dw.data(), dbp);
  }
}

}  // namespace serial

namespace parallel {

template <class Real>
void matmul(std::size_t m, std::size_t k, std::size_t n, std::span<const Real> a,
            std::span<const Real> b, std::span<Real> c) {
  const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (m * k * n >= kMinParallelWork)
  for (long i = 0; i < rows; ++i) {
    detail::gemm_row(static_cast<std::size_t>(i), k, n, a.data(), b.data(), c.data());
  }
}

template <class Real>
void conv2d_forward(const ConvGeometry& g, std::span<const Real> x, std::span<const Real> w,
                    std::span<const Real> bias, std::span<Real> y) {
  const Real* b = bias.empty() ? nullptr : bias.data();
  const long outs = static_cast<long>(g.out_channels);
  const std::size_t work = g.out_size() * g.in_channels * g.kernel * g.kernel;
#pragma omp parallel for schedule(static) if (work >= kMinParallelWork)
  for (long o = 0; o < outs; ++o) {
    detail::conv_forward_channel(g, static_cast<std::size_t>(o), x.data(), w.data(), b, y.data());
  }
}

template <class Real>
void conv2d_backward_input(const ConvGeometry& g, std::span<const Real> dy,
                           std::span<const Real> w, std::span<Real> dx) {
  const long ins = static_cast<long>(g.in_channels);
  const std::size_t work = g.out_size() * g.in_channels * g.kernel * g.kernel;
#pragma omp parallel for schedule(static) if (work >= kMinParallelWork)
  for (long ci = 0; ci < ins; ++ci) {
    detail::conv_backward_input_channel(g, static_cast<std::size_t>(ci), dy.data(), w.data(),
                                        dx.data());
  }
}

template <class Real>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const Real> x,
                            std::span<const Real> dy, std::span<Real> dw, std::span<Real> db) {
  Real* dbp = db.empty() ? nullptr : db.data();
  const long outs = static_cast<long>(g.out_channels);
  const std::size_t work = g.out_size() * g.in_channels * g.kernel * g.kernel;
#pragma omp parallel for schedule(static) if (work >= kMinParallelWork)
  for (long o = 0; o < outs; ++o) {
    detail::conv_backward_weight_channel(g, static_cast<std::size_t>(o), x.data(), dy.data(),
                                         dw.data(), dbp);
  }
}

}  // namespace parallel

}  // namespace lico::kernels
