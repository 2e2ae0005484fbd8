#pragma once

// ROI cropping, noise injection and the geometric/photometric augmentation engine.

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fundus/data.hpp"
#include "fundus/errors.hpp"
#include "fundus/rng.hpp"

namespace fundus {

/// Reads `t` [C,H,W] at integer coordinates with edge replication.
inline float sample_clamped(const Tensor<float>& t, std::size_t c, long row, long col) {
  const long h = static_cast<long>(t.dim(1)), w = static_cast<long>(t.dim(2));
  row = std::clamp(row, 0L, h - 1);
  col = std::clamp(col, 0L, w - 1);
  return t.at(c, static_cast<std::size_t>(row), static_cast<std::size_t>(col));
}

inline Tensor<float> crop_tensor(const Tensor<float>& t, long top, long left, std::size_t size) {
  Tensor<float> out({t.dim(0), size, size});
  for (std::size_t c = 0; c < t.dim(0); ++c)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x)
        out.at(c, y, x) = sample_clamped(t, c, top + static_cast<long>(y), left + static_cast<long>(x));
  return out;
}

/// Square window of side `size` whose centre pixel is `center` (rounded to the
/// nearest pixel), padded by edge replication. The ROI of the result is moved
/// to the window's coordinates so a repeated crop is a no-op.
inline Sample crop_roi(const Sample& s, RoiCenter center, std::size_t size, std::size_t divisor = 1) {
  if (size == 0) throw ShapeError("crop_roi: size must be positive");
  if (divisor == 0 || size % divisor != 0)
    throw ShapeError("crop_roi: size " + std::to_string(size) + " is not divisible by " + std::to_string(divisor));
  const long half = static_cast<long>(size / 2);
  const long top = std::lround(center.row) - half, left = std::lround(center.col) - half;
  Sample out = s;
  out.image = crop_tensor(s.image, top, left, size);
  if (s.depth) out.depth = crop_tensor(*s.depth, top, left, size);
  if (s.masks) out.masks = crop_tensor(*s.masks, top, left, size);
  const RoiCenter old = s.roi.value_or(center);
  out.roi = RoiCenter{old.row - static_cast<double>(top), old.col - static_cast<double>(left)};
  return out;
}

/// Crop around the sample's own ROI annotation (image centre when absent).
inline Sample crop_roi(const Sample& s, std::size_t size, std::size_t divisor = 1) {
  const RoiCenter c = s.roi.value_or(RoiCenter{static_cast<double>(s.height() / 2), static_cast<double>(s.width() / 2)});
  return crop_roi(s, c, size, divisor);
}

/// i.i.d. Gaussian noise of standard deviation sigma, clamped to [0,1].
inline Tensor<float> add_noise(const Tensor<float>& image, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw ConfigError("add_noise: sigma must be non-negative");
  Tensor<float> out = image;
  if (sigma == 0.0) return out;
  Rng rng = derive_rng(seed, "noise");
  std::normal_distribution<double> dist(0.0, sigma);
  for (auto& v : out.data()) v = static_cast<float>(std::clamp(static_cast<double>(v) + dist(rng), 0.0, 1.0));
  return out;
}

struct AugmentConfig {
  std::size_t factor = 100;
  double zoom_min = 0.9, zoom_max = 1.1;
  double gamma_min = 0.7, gamma_max = 1.4;
  bool rot90 = true;              // quarter turns drawn from {0,1,2,3}
  double fine_rotation_deg = 15;  // uniform in [-v, v]
  bool flip_horizontal = true;
  bool flip_vertical = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (factor < 1) throw ConfigError("augment: factor must be >= 1");
    if (!(zoom_min > 0.0) || zoom_max < zoom_min) throw ConfigError("augment: zoom range must lie in (0, inf)");
    if (!(gamma_min > 0.0) || gamma_max < gamma_min) throw ConfigError("augment: gamma range must lie in (0, inf)");
    if (!(fine_rotation_deg >= 0.0)) throw ConfigError("augment: fine rotation must be non-negative");
  }
};

/// One augmentation draw. Applied as: flips, then quarter turns, then a
/// rotation by `angle_deg` and zoom about the image centre, then gamma.
struct Transform {
  bool flip_h = false, flip_v = false;
  int quarter_turns = 0;
  double angle_deg = 0.0;
  double zoom = 1.0;
  double gamma = 1.0;

  bool is_identity() const { return !flip_h && !flip_v && quarter_turns == 0 && angle_deg == 0.0 && zoom == 1.0 && gamma == 1.0; }
  bool is_lattice() const { return angle_deg == 0.0 && zoom == 1.0; }

  std::string describe() const {
    std::ostringstream os;
    os.precision(17);
    os << "flip_h=" << flip_h << " flip_v=" << flip_v << " rot90=" << quarter_turns << " angle=" << angle_deg << " zoom=" << zoom
       << " gamma=" << gamma;
    return os.str();
  }
};

namespace detail {

// Maps output pixel (y, x) to the source pixel under flips and quarter turns
// (exact integer path). Quarter turns are counter-clockwise.
inline std::pair<long, long> lattice_source(const Transform& t, long y, long x, long h, long w) {
  // undo the rotation first (it was applied last), then the flips
  long sy = y, sx = x;
  for (int k = 0; k < ((t.quarter_turns % 4) + 4) % 4; ++k) {
    const long ny = sx, nx = h - 1 - sy;  // inverse of one ccw quarter turn on a square
    sy = ny;
    sx = nx;
  }
  if (t.flip_v) sy = h - 1 - sy;
  if (t.flip_h) sx = w - 1 - sx;
  return {sy, sx};
}

inline Tensor<float> apply_lattice(const Tensor<float>& t, const Transform& tr) {
  const long h = static_cast<long>(t.dim(1)), w = static_cast<long>(t.dim(2));
  Tensor<float> out(t.shape());
  for (std::size_t c = 0; c < t.dim(0); ++c)
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        const auto [sy, sx] = lattice_source(tr, y, x, h, w);
        out.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
            t.at(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
      }
  return out;
}

// Continuous part: output position p relative to the centre comes from
// R(-angle) p / zoom in the lattice-transformed image.
inline Tensor<float> apply_affine(const Tensor<float>& t, const Transform& tr, bool nearest) {
  const std::size_t h = t.dim(1), w = t.dim(2);
  const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
  const double a = tr.angle_deg * std::numbers::pi / 180.0;
  const double ca = std::cos(a) / tr.zoom, sa = std::sin(a) / tr.zoom;
  Tensor<float> out(t.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      const double sy = cy + ca * dy - sa * dx;
      const double sx = cx + sa * dy + ca * dx;
      for (std::size_t c = 0; c < t.dim(0); ++c) {
        float v;
        if (nearest) {
          v = sample_clamped(t, c, std::lround(sy), std::lround(sx));
        } else {
          const double fy = std::floor(sy), fx = std::floor(sx);
          const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
          const double wy = sy - fy, wx = sx - fx;
          const double v00 = sample_clamped(t, c, y0, x0), v01 = sample_clamped(t, c, y0, x0 + 1);
          const double v10 = sample_clamped(t, c, y0 + 1, x0), v11 = sample_clamped(t, c, y0 + 1, x0 + 1);
          v = static_cast<float>((1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11));
        }
        out.at(c, y, x) = v;
      }
    }
  return out;
}

}  // namespace detail

/// Geometric part of `tr` on one modality. Masks use nearest-neighbour
/// sampling and stay binary; image and depth use bilinear sampling.
inline Tensor<float> apply_geometry(const Tensor<float>& t, const Transform& tr, bool nearest) {
  if (tr.quarter_turns % 2 != 0 && t.dim(1) != t.dim(2)) throw ShapeError("augment: quarter turns need a square image");
  Tensor<float> out = tr.flip_h || tr.flip_v || tr.quarter_turns % 4 != 0 ? detail::apply_lattice(t, tr) : t;
  if (!tr.is_lattice()) out = detail::apply_affine(out, tr, nearest);
  return out;
}

inline Tensor<float> apply_gamma(const Tensor<float>& t, double gamma) {
  Tensor<float> out = t;
  if (gamma == 1.0) return out;
  for (auto& v : out.data()) v = static_cast<float>(std::pow(std::clamp(static_cast<double>(v), 0.0, 1.0), gamma));
  return out;
}

inline Sample apply_transform(const Sample& s, const Transform& tr) {
  Sample out = s;
  out.image = apply_gamma(apply_geometry(s.image, tr, false), tr.gamma);
  if (s.depth) out.depth = apply_geometry(*s.depth, tr, false);
  if (s.masks) {
    out.masks = apply_geometry(*s.masks, tr, true);
    binarize_inplace(*out.masks);
  }
  out.roi.reset();
  return out;
}

/// Draws the transform for `replica` of sample `id`. Replica 0 is the identity
/// so every original stays in the augmented set.
inline Transform draw_transform(const AugmentConfig& cfg, const std::string& id, std::size_t replica, bool square) {
  Transform t;
  if (replica == 0) return t;
  Rng rng = derive_rng(cfg.seed, "augment/" + id, replica);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  t.flip_h = cfg.flip_horizontal && u(rng) < 0.5;
  t.flip_v = cfg.flip_vertical && u(rng) < 0.5;
  t.quarter_turns = cfg.rot90 ? static_cast<int>(rng() % 4) : 0;
  if (!square) t.quarter_turns &= 2;
  t.angle_deg = cfg.fine_rotation_deg * (2 * u(rng) - 1);
  t.zoom = cfg.zoom_min + (cfg.zoom_max - cfg.zoom_min) * u(rng);
  // gamma drawn log-uniformly so the range is symmetric around 1 in ratio
  t.gamma = std::exp(std::log(cfg.gamma_min) + (std::log(cfg.gamma_max) - std::log(cfg.gamma_min)) * u(rng));
  return t;
}

/// factor outputs per input, ordered input-major. Output ids are
/// "<parent>~<replica>"; each records its parent and transform.
inline std::vector<Sample> augment(const std::vector<Sample>& samples, const AugmentConfig& cfg) {
  cfg.validate();
  std::vector<Sample> out;
  out.reserve(samples.size() * cfg.factor);
  for (const auto& s : samples) {
    for (std::size_t r = 0; r < cfg.factor; ++r) {
      const Transform tr = draw_transform(cfg, s.id, r, s.height() == s.width());
      Sample a = apply_transform(s, tr);
      a.id = s.id + "~" + std::to_string(r);
      a.source = Source{SourceKind::Augmented, s.id, tr.describe()};
      out.push_back(std::move(a));
    }
  }
  return out;
}

}  // namespace fundus
