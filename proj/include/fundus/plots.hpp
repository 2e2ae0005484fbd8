#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "fundus/errors.hpp"
#include "fundus/image_io.hpp"
#include "fundus/metrics.hpp"
#include "fundus/tensor.hpp"
#include "fundus/training.hpp"

namespace fundus {

inline constexpr std::size_t kPanelGutter = 4;
inline constexpr std::uint16_t kGutterValue = 255;

/// Hot colormap, black to red to yellow to white for v in [0,1]:
/// r = 3v, g = 3v - 1, b = 3v - 2, each clamped to [0,1] and scaled to 8 bits.
/// At most one channel is unsaturated, so (r + g + b) / 765 recovers v.
inline std::array<std::uint16_t, 3> hot_encode(double v) {
  v = std::clamp(v, 0.0, 1.0);
  std::array<std::uint16_t, 3> rgb{};
  for (int c = 0; c < 3; ++c) rgb[c] = static_cast<std::uint16_t>(std::lround(255.0 * std::clamp(3.0 * v - c, 0.0, 1.0)));
  return rgb;
}

inline double hot_decode(std::uint16_t r, std::uint16_t g, std::uint16_t b) { return (r + g + b) / 765.0; }

/// [3,H,W] image to an 8-bit RGB raster.
inline Raster render_image(const Tensor<float>& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("render_image: expected [3,H,W], got " + shape_str(img.shape()));
  return tensor_to_raster(img, 255);
}

/// Single depth plane ([H,W] or [1,H,W]) through the hot colormap.
inline Raster render_depth(const Tensor<float>& depth) {
  if (depth.rank() < 2 || depth.size() != depth.dim(depth.rank() - 2) * depth.dim(depth.rank() - 1))
    throw ShapeError("render_depth: expected one plane, got " + shape_str(depth.shape()));
  const std::size_t h = depth.dim(depth.rank() - 2), w = depth.dim(depth.rank() - 1);
  Raster r(w, h, 3, 255);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const auto rgb = hot_encode(depth[y * w + x]);
      for (std::size_t c = 0; c < 3; ++c) r.at(y, x, c) = rgb[c];
    }
  return r;
}

/// Inverse of render_depth on its own output.
inline Tensor<float> decode_depth(const Raster& r) {
  if (r.channels != 3 || r.maxval != 255) throw DataError("decode_depth: expected an 8-bit RGB raster");
  Tensor<float> t({1, r.height, r.width});
  for (std::size_t y = 0; y < r.height; ++y)
    for (std::size_t x = 0; x < r.width; ++x) t[y * r.width + x] = static_cast<float>(hot_decode(r.at(y, x, 0), r.at(y, x, 1), r.at(y, x, 2)));
  return t;
}

/// [2,H,W] disc/cup maps as grey levels: background 0, disc 128, cup 255.
inline Raster render_masks(const Tensor<float>& masks) {
  if (masks.rank() != 3 || masks.dim(0) != 2) throw ShapeError("render_masks: expected [2,H,W], got " + shape_str(masks.shape()));
  const std::size_t h = masks.dim(1), w = masks.dim(2);
  Raster r(w, h, 3, 255);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::uint16_t v = masks.at(1, y, x) >= 0.5f ? 255 : masks.at(0, y, x) >= 0.5f ? 128 : 0;
      for (std::size_t c = 0; c < 3; ++c) r.at(y, x, c) = v;
    }
  return r;
}

/// Tiles side by side with kPanelGutter columns of kGutterValue between them.
inline Raster panel(const std::vector<Raster>& tiles) {
  if (tiles.empty()) throw ShapeError("panel: no tiles");
  const std::size_t h = tiles[0].height;
  std::size_t w = 0;
  for (const auto& t : tiles) {
    if (t.height != h || t.channels != 3 || t.maxval != 255) throw ShapeError("panel: tiles must be 8-bit RGB of equal height");
    w += t.width;
  }
  w += kPanelGutter * (tiles.size() - 1);
  Raster out(w, h, 3, 255);
  std::fill(out.samples.begin(), out.samples.end(), kGutterValue);
  std::size_t x0 = 0;
  for (const auto& t : tiles) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < t.width; ++x)
        for (std::size_t c = 0; c < 3; ++c) out.at(y, x0 + x, c) = t.at(y, x, c);
    x0 += t.width + kPanelGutter;
  }
  return out;
}

/// One row per epoch: losses then every validation metric seen in the report.
inline std::string curve_csv(const std::vector<EpochRecord>& epochs) {
  std::set<std::string> keys;
  for (const auto& e : epochs)
    for (const auto& [k, v] : e.val) keys.insert(k);
  std::string out = "epoch,g_loss,reg_loss,adv_loss,d_loss";
  for (const auto& k : keys) out += ",val_" + k;
  out += "\n";
  for (const auto& e : epochs) {
    out += std::to_string(e.epoch) + "," + format_double(e.g_loss) + "," + format_double(e.reg_loss) + "," + format_double(e.adv_loss) +
           "," + format_double(e.d_loss);
    for (const auto& k : keys) {
      out += ",";
      if (auto it = e.val.find(k); it != e.val.end()) out += format_double(it->second);
    }
    out += "\n";
  }
  return out;
}

}  // namespace fundus
