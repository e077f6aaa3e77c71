#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "attrloc/ops.hpp"

namespace attrloc {

/// Scale-plus-translation box in normalized feature coordinates:
///   x_src = sx * x_tgt + tx,  y_src = sy * y_tgt + ty
/// Normalized -1 / +1 address the centers of the first / last pixel.
struct BoxTransform {
  double sx = 1.0, sy = 1.0, tx = 0.0, ty = 0.0;
};

struct ImageBox {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
};

inline double sigmoid_scalar(double v) {
  return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

/// Raw (sx, sy, tx, ty) -> (sigmoid, sigmoid, tanh, tanh).
inline BoxTransform constrain_params(const std::array<double, 4>& raw) {
  return {sigmoid_scalar(raw[0]), sigmoid_scalar(raw[1]), std::tanh(raw[2]), std::tanh(raw[3])};
}

/// Differentiable batched form over an (N, 4) tensor of raw parameters.
template <typename T>
BasicTensor<T> constrain_params(BasicTensor<T> raw) {
  detail::require_rank(raw, 2, "constrain_params", "raw");
  if (raw.dim(1) != 4) throw DimensionError("constrain_params: expected (N,4), got " + shape_str(raw.shape()));
  auto* tape = detail::recording_tape<T>({&raw});
  auto out = detail::make_output<T>(raw.shape(), tape);
  const std::size_t n = raw.dim(0);
  for (std::size_t i = 0; i < n; ++i) {
    out[4 * i + 0] = static_cast<T>(sigmoid_scalar(raw[4 * i + 0]));
    out[4 * i + 1] = static_cast<T>(sigmoid_scalar(raw[4 * i + 1]));
    out[4 * i + 2] = std::tanh(raw[4 * i + 2]);
    out[4 * i + 3] = std::tanh(raw[4 * i + 3]);
  }
  if (tape)
    tape->record("constrain_params", {raw}, out, [raw, out, n]() mutable {
      auto go = out.grad();
      auto gr = raw.grad_mut();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < 4; ++k) {
          const T y = out[4 * i + k];
          gr[4 * i + k] += go[4 * i + k] * (k < 2 ? y * (T{1} - y) : T{1} - y * y);
        }
    });
  return out;
}

template <typename T>
std::vector<BoxTransform> to_box_transforms(const BasicTensor<T>& theta) {
  std::vector<BoxTransform> boxes(theta.dim(0));
  for (std::size_t i = 0; i < boxes.size(); ++i)
    boxes[i] = {double(theta[4 * i]), double(theta[4 * i + 1]), double(theta[4 * i + 2]), double(theta[4 * i + 3])};
  return boxes;
}

/// Uniform lattice over [-1, 1]; a single sample sits at 0.
inline double lattice_coord(std::size_t i, std::size_t extent) {
  return extent == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(extent - 1);
}

/// theta (N,4) = (sx, sy, tx, ty) -> source grid (N, Ho, Wo, 2) holding (x, y).
template <typename T>
BasicTensor<T> affine_grid(BasicTensor<T> theta, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(theta, 2, "affine_grid", "theta");
  if (theta.dim(1) != 4) throw DimensionError("affine_grid: expected (N,4), got " + shape_str(theta.shape()));
  if (out_h < 1 || out_w < 1) throw ContractError("affine_grid: output size must be positive");
  const std::size_t n = theta.dim(0);
  auto* tape = detail::recording_tape<T>({&theta});
  auto out = detail::make_output<T>(Shape{n, out_h, out_w, 2}, tape);
  for (std::size_t b = 0; b < n; ++b) {
    const T sx = theta[4 * b], sy = theta[4 * b + 1], tx = theta[4 * b + 2], ty = theta[4 * b + 3];
    for (std::size_t i = 0; i < out_h; ++i) {
      const T yt = static_cast<T>(lattice_coord(i, out_h));
      for (std::size_t j = 0; j < out_w; ++j) {
        const T xt = static_cast<T>(lattice_coord(j, out_w));
        const std::size_t o = ((b * out_h + i) * out_w + j) * 2;
        out[o] = sx * xt + tx;
        out[o + 1] = sy * yt + ty;
      }
    }
  }
  if (tape)
    tape->record("affine_grid", {theta}, out, [theta, out, n, out_h, out_w]() mutable {
      auto go = out.grad();
      auto gt = theta.grad_mut();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < out_h; ++i) {
          const T yt = static_cast<T>(lattice_coord(i, out_h));
          for (std::size_t j = 0; j < out_w; ++j) {
            const T xt = static_cast<T>(lattice_coord(j, out_w));
            const std::size_t o = ((b * out_h + i) * out_w + j) * 2;
            gt[4 * b + 0] += go[o] * xt;
            gt[4 * b + 1] += go[o + 1] * yt;
            gt[4 * b + 2] += go[o];
            gt[4 * b + 3] += go[o + 1];
          }
        }
    });
  return out;
}

/// Bilinear sampling of features (N,C,H,W) at grid (N,Ho,Wo,2). Each of the
/// four neighbours outside the map contributes zero.
template <typename T>
BasicTensor<T> grid_sample(BasicTensor<T> features, BasicTensor<T> grid) {
  detail::require_rank(features, 4, "grid_sample", "features");
  detail::require_rank(grid, 4, "grid_sample", "grid");
  const std::size_t n = features.dim(0), c = features.dim(1), h = features.dim(2), w = features.dim(3);
  if (grid.dim(0) != n || grid.dim(3) != 2)
    throw DimensionError("grid_sample: grid " + shape_str(grid.shape()) + " incompatible with " +
                         shape_str(features.shape()));
  if (!grid.all_finite()) throw NumericError("grid_sample: non-finite sampling grid");
  const std::size_t oh = grid.dim(1), ow = grid.dim(2), ohw = oh * ow, hw = h * w;

  // per output point: corner indices (or -1) and fractional offsets
  struct Tap {
    long x0, y0;
    T fx, fy;
  };
  std::vector<Tap> taps(n * ohw);
  const T half_w = static_cast<T>(w - 1) / T{2}, half_h = static_cast<T>(h - 1) / T{2};
  for (std::size_t p = 0; p < n * ohw; ++p) {
    const T px = (grid[2 * p] + T{1}) * half_w;
    const T py = (grid[2 * p + 1] + T{1}) * half_h;
    const T flx = std::floor(px), fly = std::floor(py);
    taps[p] = {static_cast<long>(flx), static_cast<long>(fly), px - flx, py - fly};
  }
  auto inside = [&](long x, long y) { return x >= 0 && y >= 0 && x < long(w) && y < long(h); };

  auto* tape = detail::recording_tape<T>({&features, &grid});
  auto out = detail::make_output<T>(Shape{n, c, oh, ow}, tape);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t q = 0; q < ohw; ++q) {
      const Tap& t = taps[b * ohw + q];
      const T wts[4] = {(T{1} - t.fx) * (T{1} - t.fy), t.fx * (T{1} - t.fy), (T{1} - t.fx) * t.fy, t.fx * t.fy};
      const long xs[4] = {t.x0, t.x0 + 1, t.x0, t.x0 + 1};
      const long ys[4] = {t.y0, t.y0, t.y0 + 1, t.y0 + 1};
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* fmap = features.ptr() + (b * c + ch) * hw;
        T v{0};
        for (int k = 0; k < 4; ++k)
          if (inside(xs[k], ys[k])) v += wts[k] * fmap[ys[k] * long(w) + xs[k]];
        out[(b * c + ch) * ohw + q] = v;
      }
    }
  if (tape)
    tape->record("grid_sample", {features, grid}, out,
                 [features, grid, out, taps, n, c, h, w, ohw, hw, half_w, half_h]() mutable {
                   auto go = out.grad();
                   auto inside = [&](long x, long y) { return x >= 0 && y >= 0 && x < long(w) && y < long(h); };
                   for (std::size_t b = 0; b < n; ++b)
                     for (std::size_t q = 0; q < ohw; ++q) {
                       const Tap& t = taps[b * ohw + q];
                       const T wts[4] = {(T{1} - t.fx) * (T{1} - t.fy), t.fx * (T{1} - t.fy), (T{1} - t.fx) * t.fy,
                                         t.fx * t.fy};
                       const long xs[4] = {t.x0, t.x0 + 1, t.x0, t.x0 + 1};
                       const long ys[4] = {t.y0, t.y0, t.y0 + 1, t.y0 + 1};
                       T dpx{0}, dpy{0};
                       for (std::size_t ch = 0; ch < c; ++ch) {
                         const T g = go[(b * c + ch) * ohw + q];
                         if (g == T{0}) continue;
                         const T* fmap = features.ptr() + (b * c + ch) * hw;
                         T v[4];
                         for (int k = 0; k < 4; ++k) v[k] = inside(xs[k], ys[k]) ? fmap[ys[k] * long(w) + xs[k]] : T{0};
                         if (features.requires_grad()) {
                           T* gf = features.grad_mut().data() + (b * c + ch) * hw;
                           for (int k = 0; k < 4; ++k)
                             if (inside(xs[k], ys[k])) gf[ys[k] * long(w) + xs[k]] += g * wts[k];
                         }
                         dpx += g * ((v[1] - v[0]) * (T{1} - t.fy) + (v[3] - v[2]) * t.fy);
                         dpy += g * ((v[2] - v[0]) * (T{1} - t.fx) + (v[3] - v[1]) * t.fx);
                       }
                       if (grid.requires_grad()) {
                         auto gg = grid.grad_mut();
                         gg[2 * (b * ohw + q)] += dpx * half_w;
                         gg[2 * (b * ohw + q) + 1] += dpy * half_h;
                       }
                     }
                 });
  return out;
}

/// Maps a normalized feature-space box to input-image pixels: box corners go
/// to (fractional) feature pixel indices, each index to the center of its
/// receptive field, (index + 0.5) * stride, then the result is clipped.
inline ImageBox feature_box_to_image_box(const BoxTransform& t, std::size_t stride, std::size_t level_h,
                                         std::size_t level_w, std::size_t image_h, std::size_t image_w) {
  auto to_image = [stride](double u, std::size_t extent) {
    const double idx = (u + 1.0) * 0.5 * static_cast<double>(extent - 1);
    return (idx + 0.5) * static_cast<double>(stride);
  };
  auto clip = [](double v, double hi) { return std::clamp(v, 0.0, hi); };
  ImageBox box;
  box.x0 = clip(to_image(t.tx - t.sx, level_w), double(image_w));
  box.x1 = clip(to_image(t.tx + t.sx, level_w), double(image_w));
  box.y0 = clip(to_image(t.ty - t.sy, level_h), double(image_h));
  box.y1 = clip(to_image(t.ty + t.sy, level_h), double(image_h));
  if (box.x1 < box.x0) box.x1 = box.x0;
  if (box.y1 < box.y0) box.y1 = box.y0;
  return box;
}

}  // namespace attrloc
