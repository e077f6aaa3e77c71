#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "attrloc/tensor.hpp"

namespace attrloc {

// -------------------- helpers --------------------

namespace detail {

template <typename T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                         ", got " + shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename T>
BasicTensor<T> make_output(Shape shape, BasicTape<T>* tape) {
  BasicTensor<T> out(std::move(shape));
  if (tape) out.set_requires_grad(true);
  return out;
}

}  // namespace detail

// -------------------- elementwise --------------------

template <typename T>
BasicTensor<T> add(BasicTensor<T> a, BasicTensor<T> b) {
  detail::require_same_shape(a, b, "add");
  auto* tape = detail::recording_tape<T>({&a, &b});
  auto out = detail::make_output<T>(a.shape(), tape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  if (tape)
    tape->record("add", {a, b}, out, [a, b, out]() mutable {
      detail::accumulate(a, out.grad());
      detail::accumulate(b, out.grad());
    });
  return out;
}

template <typename T>
BasicTensor<T> mul(BasicTensor<T> a, BasicTensor<T> b) {
  detail::require_same_shape(a, b, "mul");
  auto* tape = detail::recording_tape<T>({&a, &b});
  auto out = detail::make_output<T>(a.shape(), tape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
  if (tape)
    tape->record("mul", {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  return out;
}

template <typename T>
BasicTensor<T> scale(BasicTensor<T> a, T factor) {
  auto* tape = detail::recording_tape<T>({&a});
  auto out = detail::make_output<T>(a.shape(), tape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * factor;
  if (tape)
    tape->record("scale", {a}, out, [a, out, factor]() mutable {
      auto g = out.grad();
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  return out;
}

template <typename T>
BasicTensor<T> sum(BasicTensor<T> a) {
  auto* tape = detail::recording_tape<T>({&a});
  auto out = detail::make_output<T>(Shape{1}, tape);
  T acc{0};
  for (auto v : a.data()) acc += v;
  out[0] = acc;
  if (tape)
    tape->record("sum", {a}, out, [a, out]() mutable {
      T g = out.grad()[0];
      for (auto& v : a.grad_mut()) v += g;
    });
  return out;
}

template <typename T>
BasicTensor<T> mean(BasicTensor<T> a) {
  return scale(sum(a), T{1} / static_cast<T>(a.numel()));
}

enum class Activation { relu, sigmoid, tanh };

template <typename T>
BasicTensor<T> activation(BasicTensor<T> x, Activation kind) {
  auto* tape = detail::recording_tape<T>({&x});
  auto out = detail::make_output<T>(x.shape(), tape);
  const std::size_t n = x.numel();
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < n; ++i) {
        // split on sign so exp never overflows
        T v = x[i];
        out[i] = v >= T{0} ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v));
      }
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(x[i]);
      break;
  }
  if (tape)
    tape->record("activation", {x}, out, [x, out, kind]() mutable {
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) {
        T y = out[i];
        switch (kind) {
          case Activation::relu: gx[i] += x[i] > T{0} ? g[i] : T{0}; break;
          case Activation::sigmoid: gx[i] += g[i] * y * (T{1} - y); break;
          case Activation::tanh: gx[i] += g[i] * (T{1} - y * y); break;
        }
      }
    });
  return out;
}

template <typename T> BasicTensor<T> relu(BasicTensor<T> x) { return activation(std::move(x), Activation::relu); }
template <typename T> BasicTensor<T> sigmoid(BasicTensor<T> x) { return activation(std::move(x), Activation::sigmoid); }
template <typename T> BasicTensor<T> tanh(BasicTensor<T> x) { return activation(std::move(x), Activation::tanh); }

// -------------------- shape plumbing --------------------

/// Collapses every axis after the first: (N, ...) -> (N, F).
template <typename T>
BasicTensor<T> flatten(BasicTensor<T> x) {
  auto* tape = detail::recording_tape<T>({&x});
  const std::size_t n = x.dim(0);
  auto out = detail::make_output<T>(Shape{n, x.numel() / n}, tape);
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  if (tape)
    tape->record("flatten", {x}, out, [x, out]() mutable { detail::accumulate(x, out.grad()); });
  return out;
}

/// Channel concatenation, `a` first.
template <typename T>
BasicTensor<T> concat_channels(BasicTensor<T> a, BasicTensor<T> b) {
  detail::require_rank(a, 4, "concat_channels", "a");
  detail::require_rank(b, 4, "concat_channels", "b");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw DimensionError("concat_channels: N/H/W mismatch between " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  auto* tape = detail::recording_tape<T>({&a, &b});
  auto out = detail::make_output<T>(Shape{n, ca + cb, a.dim(2), a.dim(3)}, tape);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.ptr() + i * ca * hw, ca * hw, out.ptr() + i * (ca + cb) * hw);
    std::copy_n(b.ptr() + i * cb * hw, cb * hw, out.ptr() + i * (ca + cb) * hw + ca * hw);
  }
  if (tape)
    tape->record("concat_channels", {a, b}, out, [a, b, out, n, ca, cb, hw]() mutable {
      auto g = out.grad();
      for (std::size_t i = 0; i < n; ++i) {
        const T* src = g.data() + i * (ca + cb) * hw;
        if (a.requires_grad()) {
          T* ga = a.grad_mut().data() + i * ca * hw;
          for (std::size_t k = 0; k < ca * hw; ++k) ga[k] += src[k];
        }
        if (b.requires_grad()) {
          T* gb = b.grad_mut().data() + i * cb * hw;
          for (std::size_t k = 0; k < cb * hw; ++k) gb[k] += src[ca * hw + k];
        }
      }
    });
  return out;
}

/// Channels [begin, end) of an NCHW tensor.
template <typename T>
BasicTensor<T> slice_channels(BasicTensor<T> x, std::size_t begin, std::size_t end) {
  detail::require_rank(x, 4, "slice_channels", "input");
  if (begin >= end || end > x.dim(1))
    throw DimensionError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3), k = end - begin;
  auto* tape = detail::recording_tape<T>({&x});
  auto out = detail::make_output<T>(Shape{n, k, x.dim(2), x.dim(3)}, tape);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(x.ptr() + (i * c + begin) * hw, k * hw, out.ptr() + i * k * hw);
  if (tape)
    tape->record("slice_channels", {x}, out, [x, out, n, c, hw, k, begin]() mutable {
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k * hw; ++j) gx[(i * c + begin) * hw + j] += g[i * k * hw + j];
    });
  return out;
}

/// Column concatenation of (N, k_i) matrices.
template <typename T>
BasicTensor<T> concat_columns(std::vector<BasicTensor<T>> parts) {
  if (parts.empty()) throw ContractError("concat_columns: no inputs");
  const std::size_t n = parts.front().dim(0);
  std::size_t total = 0;
  BasicTape<T>* tape = nullptr;
  for (auto& p : parts) {
    detail::require_rank(p, 2, "concat_columns", "part");
    if (p.dim(0) != n) throw DimensionError("concat_columns: row mismatch " + shape_str(p.shape()));
    total += p.dim(1);
    if (!tape) tape = detail::recording_tape<T>({&p});
  }
  auto out = detail::make_output<T>(Shape{n, total}, tape);
  std::size_t off = 0;
  for (auto& p : parts) {
    const std::size_t k = p.dim(1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) out[i * total + off + j] = p[i * k + j];
    off += k;
  }
  if (tape)
    tape->record("concat_columns", parts, out, [parts, out, n, total]() mutable {
      auto g = out.grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        const std::size_t k = p.dim(1);
        if (p.requires_grad()) {
          auto gp = p.grad_mut();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < k; ++j) gp[i * k + j] += g[i * total + off + j];
        }
        off += k;
      }
    });
  return out;
}

// -------------------- dense --------------------

/// x (N,F) * W (F,G) + b (G).
template <typename T>
BasicTensor<T> dense(BasicTensor<T> x, BasicTensor<T> w, BasicTensor<T> b) {
  detail::require_rank(x, 2, "dense", "input");
  detail::require_rank(w, 2, "dense", "weight");
  if (x.dim(1) != w.dim(0))
    throw DimensionError("dense: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  const std::size_t n = x.dim(0), f = w.dim(0), g = w.dim(1);
  if (b.defined() && b.numel() != g)
    throw DimensionError("dense: bias " + shape_str(b.shape()) + " does not match output width " + std::to_string(g));
  auto* tape = detail::recording_tape<T>({&x, &w, &b});
  auto out = detail::make_output<T>(Shape{n, g}, tape);
  for (std::size_t i = 0; i < n; ++i) {
    T* o = out.ptr() + i * g;
    if (b.defined()) std::copy_n(b.ptr(), g, o);
    for (std::size_t k = 0; k < f; ++k) {
      const T xv = x[i * f + k];
      const T* wr = w.ptr() + k * g;
      for (std::size_t j = 0; j < g; ++j) o[j] += xv * wr[j];
    }
  }
  if (tape)
    tape->record("dense", {x, w, b}, out, [x, w, b, out, n, f, g]() mutable {
      auto go = out.grad();
      if (x.requires_grad()) {
        auto gx = x.grad_mut();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < f; ++k) {
            T acc{0};
            for (std::size_t j = 0; j < g; ++j) acc += go[i * g + j] * w[k * g + j];
            gx[i * f + k] += acc;
          }
      }
      if (w.requires_grad()) {
        auto gw = w.grad_mut();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < f; ++k) {
            const T xv = x[i * f + k];
            for (std::size_t j = 0; j < g; ++j) gw[k * g + j] += xv * go[i * g + j];
          }
      }
      if (b.defined() && b.requires_grad()) {
        auto gb = b.grad_mut();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < g; ++j) gb[j] += go[i * g + j];
      }
    });
  return out;
}

// -------------------- convolution --------------------

namespace detail {

struct ConvGeom {
  std::size_t c, h, w, k, stride, pad, oh, ow;
  std::size_t rows() const { return c * k * k; }
  std::size_t cols() const { return oh * ow; }
};

template <typename T>
void im2col(const T* img, const ConvGeom& g, T* col) {
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t kh = 0; kh < g.k; ++kh)
      for (std::size_t kw = 0; kw < g.k; ++kw) {
        T* row = col + ((c * g.k + kh) * g.k + kw) * g.cols();
        for (std::size_t y = 0; y < g.oh; ++y) {
          const long iy = static_cast<long>(y * g.stride + kh) - static_cast<long>(g.pad);
          for (std::size_t x = 0; x < g.ow; ++x) {
            const long ix = static_cast<long>(x * g.stride + kw) - static_cast<long>(g.pad);
            row[y * g.ow + x] = (iy < 0 || ix < 0 || iy >= static_cast<long>(g.h) || ix >= static_cast<long>(g.w))
                                    ? T{0}
                                    : img[(c * g.h + iy) * g.w + ix];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* img) {
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t kh = 0; kh < g.k; ++kh)
      for (std::size_t kw = 0; kw < g.k; ++kw) {
        const T* row = col + ((c * g.k + kh) * g.k + kw) * g.cols();
        for (std::size_t y = 0; y < g.oh; ++y) {
          const long iy = static_cast<long>(y * g.stride + kh) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t x = 0; x < g.ow; ++x) {
            const long ix = static_cast<long>(x * g.stride + kw) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            img[(c * g.h + iy) * g.w + ix] += row[y * g.ow + x];
          }
        }
      }
}

}  // namespace detail

/// 2-D cross-correlation over NCHW input with OIKK weights. `bias` may be
/// undefined.
template <typename T>
BasicTensor<T> conv2d(BasicTensor<T> x, BasicTensor<T> w, BasicTensor<T> bias, std::size_t stride,
                      std::size_t padding) {
  detail::require_rank(x, 4, "conv2d", "input");
  detail::require_rank(w, 4, "conv2d", "weight");
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  if (x.dim(1) != w.dim(1))
    throw DimensionError("conv2d: input channels (axis 1 of " + shape_str(x.shape()) +
                         ") != weight in-channels (axis 1 of " + shape_str(w.shape()) + ")");
  if (w.dim(2) != w.dim(3)) throw DimensionError("conv2d: kernel must be square, got " + shape_str(w.shape()));
  const std::size_t k = w.dim(2);
  if (x.dim(2) + 2 * padding < k || x.dim(3) + 2 * padding < k)
    throw DimensionError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
  const std::size_t o = w.dim(0);
  if (bias.defined() && bias.numel() != o)
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " != out-channels " + std::to_string(o));

  detail::ConvGeom g{x.dim(1), x.dim(2), x.dim(3), k, stride, padding, 0, 0};
  g.oh = (g.h + 2 * padding - k) / stride + 1;
  g.ow = (g.w + 2 * padding - k) / stride + 1;
  const std::size_t n = x.dim(0), rows = g.rows(), cols = g.cols();

  auto* tape = detail::recording_tape<T>({&x, &w, &bias});
  auto out = detail::make_output<T>(Shape{n, o, g.oh, g.ow}, tape);
  std::vector<T> col(rows * cols);
  for (std::size_t i = 0; i < n; ++i) {
    detail::im2col(x.ptr() + i * g.c * g.h * g.w, g, col.data());
    T* dst = out.ptr() + i * o * cols;
    for (std::size_t oc = 0; oc < o; ++oc) {
      T* orow = dst + oc * cols;
      std::fill_n(orow, cols, bias.defined() ? bias[oc] : T{0});
      const T* wrow = w.ptr() + oc * rows;
      for (std::size_t r = 0; r < rows; ++r) {
        const T wv = wrow[r];
        const T* crow = col.data() + r * cols;
        for (std::size_t j = 0; j < cols; ++j) orow[j] += wv * crow[j];
      }
    }
  }
  if (tape)
    tape->record("conv2d", {x, w, bias}, out, [x, w, bias, out, g, n, o, rows, cols]() mutable {
      auto go = out.grad();
      std::vector<T> col(rows * cols), dcol(rows * cols);
      for (std::size_t i = 0; i < n; ++i) {
        const T* gi = go.data() + i * o * cols;
        if (bias.defined() && bias.requires_grad()) {
          auto gb = bias.grad_mut();
          for (std::size_t oc = 0; oc < o; ++oc)
            for (std::size_t j = 0; j < cols; ++j) gb[oc] += gi[oc * cols + j];
        }
        if (w.requires_grad()) {
          detail::im2col(x.ptr() + i * g.c * g.h * g.w, g, col.data());
          auto gw = w.grad_mut();
          for (std::size_t oc = 0; oc < o; ++oc) {
            const T* grow = gi + oc * cols;
            T* gwrow = gw.data() + oc * rows;
            for (std::size_t r = 0; r < rows; ++r) {
              const T* crow = col.data() + r * cols;
              T acc{0};
              for (std::size_t j = 0; j < cols; ++j) acc += grow[j] * crow[j];
              gwrow[r] += acc;
            }
          }
        }
        if (x.requires_grad()) {
          std::fill(dcol.begin(), dcol.end(), T{0});
          for (std::size_t oc = 0; oc < o; ++oc) {
            const T* grow = gi + oc * cols;
            const T* wrow = w.ptr() + oc * rows;
            for (std::size_t r = 0; r < rows; ++r) {
              const T wv = wrow[r];
              T* drow = dcol.data() + r * cols;
              for (std::size_t j = 0; j < cols; ++j) drow[j] += wv * grow[j];
            }
          }
          detail::col2im_add(dcol.data(), g, x.grad_mut().data() + i * g.c * g.h * g.w);
        }
      }
    });
  return out;
}

// -------------------- normalization --------------------

template <typename T>
struct BatchNormStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean(channels, T{0}), running_var(channels, T{1}) {}
};

enum class Mode { train, eval };

/// Per-channel batch normalization over (N, H, W). Train mode normalizes with
/// batch statistics and updates the running estimates (unbiased variance);
/// eval mode uses the running estimates.
template <typename T>
BasicTensor<T> batchnorm2d(BasicTensor<T> x, BasicTensor<T> gamma, BasicTensor<T> beta, BatchNormStats<T>& stats,
                           Mode mode) {
  detail::require_rank(x, 4, "batchnorm2d", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.numel() != c || beta.numel() != c || stats.running_mean.size() != c)
    throw DimensionError("batchnorm2d: parameters do not match " + std::to_string(c) + " channels");
  if (mode == Mode::train && n < 2)
    throw ContractError("batchnorm2d: degenerate batch of size 1 in train mode");

  auto* tape = detail::recording_tape<T>({&x, &gamma, &beta});
  auto out = detail::make_output<T>(x.shape(), tape);
  std::vector<T> mu(c), inv_std(c);
  const T count = static_cast<T>(n * hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (mode == Mode::train) {
      T s{0};
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < hw; ++j) s += x[(i * c + ch) * hw + j];
      const T m = s / count;
      T v{0};
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < hw; ++j) {
          const T d = x[(i * c + ch) * hw + j] - m;
          v += d * d;
        }
      const T var = v / count;
      mu[ch] = m;
      inv_std[ch] = T{1} / std::sqrt(var + stats.eps);
      const T unbiased = count > 1 ? v / (count - 1) : var;
      stats.running_mean[ch] = (T{1} - stats.momentum) * stats.running_mean[ch] + stats.momentum * m;
      stats.running_var[ch] = (T{1} - stats.momentum) * stats.running_var[ch] + stats.momentum * unbiased;
    } else {
      mu[ch] = stats.running_mean[ch];
      inv_std[ch] = T{1} / std::sqrt(stats.running_var[ch] + stats.eps);
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < hw; ++j) {
        const std::size_t idx = (i * c + ch) * hw + j;
        out[idx] = (x[idx] - mu[ch]) * inv_std[ch] * gamma[ch] + beta[ch];
      }
  }
  if (tape)
    tape->record("batchnorm2d", {x, gamma, beta}, out,
                 [x, gamma, beta, out, mu, inv_std, n, c, hw, count, mode]() mutable {
                   auto go = out.grad();
                   for (std::size_t ch = 0; ch < c; ++ch) {
                     T sum_g{0}, sum_gx{0};
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < hw; ++j) {
                         const std::size_t idx = (i * c + ch) * hw + j;
                         const T xhat = (x[idx] - mu[ch]) * inv_std[ch];
                         sum_g += go[idx];
                         sum_gx += go[idx] * xhat;
                       }
                     if (gamma.requires_grad()) gamma.grad_mut()[ch] += sum_gx;
                     if (beta.requires_grad()) beta.grad_mut()[ch] += sum_g;
                     if (!x.requires_grad()) continue;
                     auto gx = x.grad_mut();
                     const T k = gamma[ch] * inv_std[ch];
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < hw; ++j) {
                         const std::size_t idx = (i * c + ch) * hw + j;
                         if (mode == Mode::eval) {
                           gx[idx] += go[idx] * k;
                         } else {
                           const T xhat = (x[idx] - mu[ch]) * inv_std[ch];
                           gx[idx] += k * (go[idx] - sum_g / count - xhat * sum_gx / count);
                         }
                       }
                   }
                 });
  return out;
}

// -------------------- pooling / resampling --------------------

enum class Pool { max2x2, global_avg };

/// max2x2 halves H and W (ties go to the first element in row-major order);
/// global_avg yields (N, C, 1, 1).
template <typename T>
BasicTensor<T> pool2d(BasicTensor<T> x, Pool kind) {
  detail::require_rank(x, 4, "pool2d", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto* tape = detail::recording_tape<T>({&x});
  if (kind == Pool::global_avg) {
    auto out = detail::make_output<T>(Shape{n, c, 1, 1}, tape);
    const std::size_t hw = h * w;
    for (std::size_t p = 0; p < n * c; ++p) {
      T s{0};
      for (std::size_t j = 0; j < hw; ++j) s += x[p * hw + j];
      out[p] = s / static_cast<T>(hw);
    }
    if (tape)
      tape->record("global_avg_pool", {x}, out, [x, out, n, c, hw]() mutable {
        auto go = out.grad();
        auto gx = x.grad_mut();
        const T inv = T{1} / static_cast<T>(hw);
        for (std::size_t p = 0; p < n * c; ++p)
          for (std::size_t j = 0; j < hw; ++j) gx[p * hw + j] += go[p] * inv;
      });
    return out;
  }
  if (h % 2 || w % 2) throw DimensionError("pool2d max2x2: odd spatial extent in " + shape_str(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  auto out = detail::make_output<T>(Shape{n, c, oh, ow}, tape);
  std::vector<std::size_t> argmax(out.numel());
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        std::size_t best = (p * h + 2 * y) * w + 2 * xx;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (p * h + 2 * y + dy) * w + 2 * xx + dx;
            if (x[idx] > x[best]) best = idx;
          }
        const std::size_t o = (p * oh + y) * ow + xx;
        out[o] = x[best];
        argmax[o] = best;
      }
  if (tape)
    tape->record("max_pool2x2", {x}, out, [x, out, argmax]() mutable {
      auto go = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t o = 0; o < go.size(); ++o) gx[argmax[o]] += go[o];
    });
  return out;
}

template <typename T>
BasicTensor<T> global_avg_pool(BasicTensor<T> x) {
  return pool2d(std::move(x), Pool::global_avg);
}

template <typename T>
BasicTensor<T> upsample_nearest2x(BasicTensor<T> x) {
  detail::require_rank(x, 4, "upsample_nearest2x", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto* tape = detail::recording_tape<T>({&x});
  auto out = detail::make_output<T>(Shape{n, c, 2 * h, 2 * w}, tape);
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx) out[(p * 2 * h + y) * 2 * w + xx] = x[(p * h + y / 2) * w + xx / 2];
  if (tape)
    tape->record("upsample_nearest2x", {x}, out, [x, out, n, c, h, w]() mutable {
      auto go = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t p = 0; p < n * c; ++p)
        for (std::size_t y = 0; y < 2 * h; ++y)
          for (std::size_t xx = 0; xx < 2 * w; ++xx) gx[(p * h + y / 2) * w + xx / 2] += go[(p * 2 * h + y) * 2 * w + xx];
    });
  return out;
}

// -------------------- broadcasting products --------------------

/// x (N,C,H,W) scaled per channel by gate (N,C).
template <typename T>
BasicTensor<T> mul_channels(BasicTensor<T> x, BasicTensor<T> gate) {
  detail::require_rank(x, 4, "mul_channels", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gate.numel() != n * c)
    throw DimensionError("mul_channels: gate " + shape_str(gate.shape()) + " does not match " + shape_str(x.shape()));
  auto* tape = detail::recording_tape<T>({&x, &gate});
  auto out = detail::make_output<T>(x.shape(), tape);
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t j = 0; j < hw; ++j) out[p * hw + j] = x[p * hw + j] * gate[p];
  if (tape)
    tape->record("mul_channels", {x, gate}, out, [x, gate, out, n, c, hw]() mutable {
      auto go = out.grad();
      for (std::size_t p = 0; p < n * c; ++p) {
        if (x.requires_grad()) {
          auto gx = x.grad_mut();
          for (std::size_t j = 0; j < hw; ++j) gx[p * hw + j] += go[p * hw + j] * gate[p];
        }
        if (gate.requires_grad()) {
          T acc{0};
          for (std::size_t j = 0; j < hw; ++j) acc += go[p * hw + j] * x[p * hw + j];
          gate.grad_mut()[p] += acc;
        }
      }
    });
  return out;
}

/// x (N,C,H,W) scaled per location by mask (N,1,H,W).
template <typename T>
BasicTensor<T> mul_spatial(BasicTensor<T> x, BasicTensor<T> mask) {
  detail::require_rank(x, 4, "mul_spatial", "input");
  detail::require_rank(mask, 4, "mul_spatial", "mask");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (mask.dim(0) != n || mask.dim(1) != 1 || mask.dim(2) != x.dim(2) || mask.dim(3) != x.dim(3))
    throw DimensionError("mul_spatial: mask " + shape_str(mask.shape()) + " does not match " + shape_str(x.shape()));
  auto* tape = detail::recording_tape<T>({&x, &mask});
  auto out = detail::make_output<T>(x.shape(), tape);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < hw; ++j) out[(i * c + ch) * hw + j] = x[(i * c + ch) * hw + j] * mask[i * hw + j];
  if (tape)
    tape->record("mul_spatial", {x, mask}, out, [x, mask, out, n, c, hw]() mutable {
      auto go = out.grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t j = 0; j < hw; ++j) {
            const std::size_t idx = (i * c + ch) * hw + j;
            if (x.requires_grad()) x.grad_mut()[idx] += go[idx] * mask[i * hw + j];
            if (mask.requires_grad()) mask.grad_mut()[i * hw + j] += go[idx] * x[idx];
          }
    });
  return out;
}

/// Mean over the channel axis: (N,C,H,W) -> (N,1,H,W).
template <typename T>
BasicTensor<T> channel_mean(BasicTensor<T> x) {
  detail::require_rank(x, 4, "channel_mean", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  auto* tape = detail::recording_tape<T>({&x});
  auto out = detail::make_output<T>(Shape{n, 1, x.dim(2), x.dim(3)}, tape);
  const T inv = T{1} / static_cast<T>(c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < hw; ++j) {
      T s{0};
      for (std::size_t ch = 0; ch < c; ++ch) s += x[(i * c + ch) * hw + j];
      out[i * hw + j] = s * inv;
    }
  if (tape)
    tape->record("channel_mean", {x}, out, [x, out, n, c, hw, inv]() mutable {
      auto go = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t j = 0; j < hw; ++j) gx[(i * c + ch) * hw + j] += go[i * hw + j] * inv;
    });
  return out;
}

}  // namespace attrloc
