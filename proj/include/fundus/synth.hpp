#pragma once

// Parametric synthetic fundus crops with exact depth and mask ground truth.

#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fundus/data.hpp"
#include "fundus/errors.hpp"
#include "fundus/rng.hpp"

namespace fundus {

struct SynthParams {
  std::size_t size = 64;
  double disc_row = 32, disc_col = 32;
  double disc_axis_v = 18, disc_axis_h = 16;  // semi-axes in pixels before rotation
  double rotation = 0.0;                      // radians
  double cup_ratio_v = 0.5, cup_ratio_h = 0.5;
  double background = 0.33, rim = 0.63, cup = 0.87;
  double pallor = 0.12;  // extra brightness proportional to normalized depth
  double amplitude = 1.0;
  double cup_weight = 0.6;  // share of the depth profile carried by the cup bump
  std::size_t vessels = 5;
  double vessel_width = 1.0;
  double illumination = 0.12, illumination_angle = 0.0;
  double noise_sigma = 0.01;
  std::uint64_t seed = 0;

  void validate() const {
    if (size < 8) throw ConfigError("synth: size must be at least 8");
    if (!(disc_axis_v > 0 && disc_axis_h > 0)) throw ConfigError("synth: disc axes must be positive");
    if (!(cup_ratio_v > 0 && cup_ratio_v < 1 && cup_ratio_h > 0 && cup_ratio_h < 1))
      throw ConfigError("synth: cup axes must lie strictly inside the disc axes");
    if (!(amplitude >= 0 && amplitude <= 1)) throw ConfigError("synth: amplitude must lie in [0,1]");
    if (!(cup_weight >= 0 && cup_weight <= 1)) throw ConfigError("synth: cup_weight must lie in [0,1]");
    if (!(noise_sigma >= 0)) throw ConfigError("synth: noise sigma must be non-negative");
    if (!(vessel_width > 0)) throw ConfigError("synth: vessel width must be positive");
  }

  double cup_axis_v() const { return disc_axis_v * cup_ratio_v; }
  double cup_axis_h() const { return disc_axis_h * cup_ratio_h; }

  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "size = " << size << "\ndisc_row = " << disc_row << "\ndisc_col = " << disc_col << "\ndisc_axis_v = " << disc_axis_v
       << "\ndisc_axis_h = " << disc_axis_h << "\nrotation = " << rotation << "\ncup_ratio_v = " << cup_ratio_v
       << "\ncup_ratio_h = " << cup_ratio_h << "\nbackground = " << background << "\nrim = " << rim << "\ncup = " << cup
       << "\npallor = " << pallor << "\namplitude = " << amplitude << "\ncup_weight = " << cup_weight << "\nvessels = " << vessels
       << "\nvessel_width = " << vessel_width << "\nillumination = " << illumination
       << "\nillumination_angle = " << illumination_angle << "\nnoise_sigma = " << noise_sigma << "\nseed = " << seed << "\n";
    return os.str();
  }
};

/// Half of the vertical (row-direction) extent of a rotated ellipse.
inline double ellipse_vertical_half_extent(double axis_v, double axis_h, double rotation) {
  const double c = std::cos(rotation), s = std::sin(rotation);
  return std::sqrt(axis_v * axis_v * c * c + axis_h * axis_h * s * s);
}

/// Analytic vertical cup-to-disc ratio of the two ellipses.
inline double synth_vertical_cdr(const SynthParams& p) {
  return ellipse_vertical_half_extent(p.cup_axis_v(), p.cup_axis_h(), p.rotation) /
         ellipse_vertical_half_extent(p.disc_axis_v, p.disc_axis_h, p.rotation);
}

/// Normalized elliptical radius: < 1 inside, 1 on the boundary.
inline double ellipse_radius(double dy, double dx, double axis_v, double axis_h, double rotation) {
  const double c = std::cos(rotation), s = std::sin(rotation);
  const double pv = dy * c - dx * s;
  const double ph = dy * s + dx * c;
  return std::sqrt((pv / axis_v) * (pv / axis_v) + (ph / axis_h) * (ph / axis_h));
}

inline double bump(double u) { return u < 1.0 ? (1.0 - u * u) * (1.0 - u * u) : 0.0; }

/// Depth at a pixel offset from the disc centre, in [0, amplitude].
inline double synth_depth_at(const SynthParams& p, double dy, double dx) {
  const double ud = ellipse_radius(dy, dx, p.disc_axis_v, p.disc_axis_h, p.rotation);
  if (ud >= 1.0) return 0.0;
  const double uc = ellipse_radius(dy, dx, p.cup_axis_v(), p.cup_axis_h(), p.rotation);
  return p.amplitude * ((1.0 - p.cup_weight) * bump(ud) + p.cup_weight * bump(uc));
}

namespace detail {

struct Point {
  double y, x;
};

inline double segment_distance(Point p, Point a, Point b) {
  const double vy = b.y - a.y, vx = b.x - a.x;
  const double len2 = vy * vy + vx * vx;
  double t = len2 > 0 ? ((p.y - a.y) * vy + (p.x - a.x) * vx) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dy = p.y - (a.y + t * vy), dx = p.x - (a.x + t * vx);
  return std::sqrt(dy * dy + dx * dx);
}

// Cubic Bezier vessels radiating from near the disc centre.
inline std::vector<std::vector<Point>> vessel_paths(const SynthParams& p) {
  Rng rng = derive_rng(p.seed, "vessels");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double reach = 0.9 * static_cast<double>(p.size);
  std::vector<std::vector<Point>> paths;
  for (std::size_t v = 0; v < p.vessels; ++v) {
    const double theta = 2 * std::numbers::pi * (static_cast<double>(v) + 0.6 * u(rng)) / static_cast<double>(p.vessels);
    const double bend = 0.6 * (u(rng) - 0.5);
    const Point p0{p.disc_row + 0.3 * p.cup_axis_v() * (u(rng) - 0.5), p.disc_col + 0.3 * p.cup_axis_h() * (u(rng) - 0.5)};
    auto at = [&](double r, double ang) { return Point{p0.y + r * std::sin(ang), p0.x + r * std::cos(ang)}; };
    const std::array<Point, 4> c{p0, at(reach * 0.3, theta + bend), at(reach * 0.65, theta - bend), at(reach, theta + 0.5 * bend)};
    std::vector<Point> path;
    constexpr int kSteps = 40;
    for (int i = 0; i <= kSteps; ++i) {
      const double t = static_cast<double>(i) / kSteps, s = 1 - t;
      path.push_back(Point{s * s * s * c[0].y + 3 * s * s * t * c[1].y + 3 * s * t * t * c[2].y + t * t * t * c[3].y,
                           s * s * s * c[0].x + 3 * s * s * t * c[1].x + 3 * s * t * t * c[2].x + t * t * t * c[3].x});
    }
    paths.push_back(std::move(path));
  }
  return paths;
}

}  // namespace detail

/// Renders one sample. The image is quantized to 8 bits; depth is
/// amplitude-scaled (not normalized); masks come from the ellipses exactly.
inline Sample synth_sample(const SynthParams& p, std::string id = "synth") {
  p.validate();
  const std::size_t n = p.size;
  Sample s;
  s.id = std::move(id);
  s.source.kind = SourceKind::Synthetic;
  s.roi = RoiCenter{p.disc_row, p.disc_col};
  s.image = Tensor<float>({3, n, n});
  s.depth = Tensor<float>({1, n, n});
  s.masks = Tensor<float>({2, n, n});
  const auto paths = detail::vessel_paths(p);
  Rng noise = derive_rng(p.seed, "pixel-noise");
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double disc_mean = 0.5 * (p.disc_axis_v + p.disc_axis_h);
  const double cup_mean = 0.5 * (p.cup_axis_v() + p.cup_axis_h());
  const double gy = std::sin(p.illumination_angle), gx = std::cos(p.illumination_angle);
  constexpr std::array<double, 3> kChannelGamma{0.7, 1.4, 2.4};
  const double half = (static_cast<double>(n) - 1) / 2;

  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double dy = static_cast<double>(y) - p.disc_row, dx = static_cast<double>(x) - p.disc_col;
      const double ud = ellipse_radius(dy, dx, p.disc_axis_v, p.disc_axis_h, p.rotation);
      const double uc = ellipse_radius(dy, dx, p.cup_axis_v(), p.cup_axis_h(), p.rotation);
      s.masks->at(0, y, x) = ud <= 1.0 ? 1.0f : 0.0f;
      s.masks->at(1, y, x) = uc <= 1.0 ? 1.0f : 0.0f;
      const double depth = synth_depth_at(p, dy, dx);
      s.depth->at(0, y, x) = static_cast<float>(depth);

      // roughly one-pixel soft edges
      const double td = std::clamp(0.5 + (1.0 - ud) * disc_mean, 0.0, 1.0);
      const double tc = std::clamp(0.5 + (1.0 - uc) * cup_mean, 0.0, 1.0);
      double lum = p.background + td * (p.rim - p.background) + tc * (p.cup - p.rim);
      lum += p.pallor * (p.amplitude > 0 ? depth / p.amplitude : 0.0);
      double dist = 1e9;
      for (const auto& path : paths)
        for (std::size_t i = 1; i < path.size(); ++i)
          dist = std::min(dist, detail::segment_distance({static_cast<double>(y), static_cast<double>(x)}, path[i - 1], path[i]));
      lum *= 1.0 - 0.55 * std::exp(-(dist / p.vessel_width) * (dist / p.vessel_width));
      const double ny = (static_cast<double>(y) - half) / half, nx = (static_cast<double>(x) - half) / half;
      lum *= 1.0 + p.illumination * (gx * nx + gy * ny);
      lum = std::clamp(lum, 0.0, 1.0);
      for (std::size_t c = 0; c < 3; ++c) {
        double v = std::pow(lum, kChannelGamma[c]);
        if (p.noise_sigma > 0) v += p.noise_sigma * gauss(noise);
        v = std::clamp(v, 0.0, 1.0);
        s.image.at(c, y, x) = static_cast<float>(std::lround(v * 255.0) * (1.0 / 255));
      }
    }
  return s;
}

/// Randomized but plausible parameters for sample `index` of a dataset.
inline SynthParams random_synth_params(std::size_t size, std::uint64_t seed, std::size_t index) {
  Rng rng = derive_rng(seed, "synth-params", index);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  const double n = static_cast<double>(size);
  SynthParams p;
  p.size = size;
  p.disc_row = (n - 1) / 2 + uni(-0.06, 0.06) * n;
  p.disc_col = (n - 1) / 2 + uni(-0.06, 0.06) * n;
  p.disc_axis_v = uni(0.24, 0.32) * n;
  p.disc_axis_h = p.disc_axis_v * uni(0.85, 1.0);
  p.rotation = uni(-0.35, 0.35);
  p.cup_ratio_v = uni(0.35, 0.7);
  p.cup_ratio_h = std::clamp(p.cup_ratio_v * uni(0.9, 1.1), 0.2, 0.9);
  p.background = uni(0.28, 0.38);
  p.rim = uni(0.58, 0.68);
  p.cup = uni(0.82, 0.92);
  p.amplitude = uni(0.5, 1.0);
  p.vessels = 4 + static_cast<std::size_t>(rng() % 4);
  p.vessel_width = n / 64.0 * uni(0.7, 1.1);
  p.illumination = uni(0.05, 0.2);
  p.illumination_angle = uni(0.0, 2 * std::numbers::pi);
  p.noise_sigma = 0.01;
  p.seed = rng();
  return p;
}

struct SynthDataset {
  std::vector<Sample> samples;
  std::vector<SynthParams> params;

  std::map<std::string, std::string> params_text() const {
    std::map<std::string, std::string> out;
    for (std::size_t i = 0; i < samples.size(); ++i) out[samples[i].id] = params[i].to_text();
    return out;
  }
};

inline std::string synth_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "synth_%03zu", index);
  return buf;
}

/// `count` samples. Depth is min-max normalized and quantized to the 16-bit
/// grid, so the result equals what load_dataset returns after save_dataset.
inline SynthDataset synth_dataset(std::size_t count, std::size_t size, std::uint64_t seed) {
  SynthDataset ds;
  for (std::size_t i = 0; i < count; ++i) {
    SynthParams p = random_synth_params(size, seed, i);
    Sample s = synth_sample(p, synth_id(i));
    normalize_minmax(*s.depth, s.id);
    for (auto& v : s.depth->data()) v = static_cast<float>(std::lround(static_cast<double>(v) * 65535.0) * (1.0 / 65535));
    ds.samples.push_back(std::move(s));
    ds.params.push_back(p);
  }
  return ds;
}

}  // namespace fundus
