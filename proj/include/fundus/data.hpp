#pragma once

// Samples and the on-disk dataset layout.
//
//   root/images/<id>.ppm | <id>.png   RGB, 8 or 16 bit
//   root/depth/<id>.pgm               16-bit, min-max normalized on load
//   root/masks/<id>_disc.pgm          binarized at half scale
//   root/masks/<id>_cup.pgm
//   root/roi.txt                      "id row col" per line, optional
//   root/params/<id>.txt              synthetic generator parameters, optional

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fundus/errors.hpp"
#include "fundus/image_io.hpp"
#include "fundus/tensor.hpp"

namespace fundus {

enum class SourceKind { Real, Synthetic, Augmented };

struct Source {
  SourceKind kind = SourceKind::Real;
  std::string parent;      // augmented only
  std::string descriptor;  // augmented only: the applied transform
};

struct RoiCenter {
  double row = 0.0, col = 0.0;
  bool operator==(const RoiCenter&) const = default;
};

struct Sample {
  std::string id;
  Tensor<float> image;                 // [3,H,W] in [0,1]
  std::optional<Tensor<float>> depth;  // [1,H,W] in [0,1]
  std::optional<Tensor<float>> masks;  // [2,H,W], channel 0 disc, 1 cup, values {0,1}
  Source source;
  std::optional<RoiCenter> roi;

  std::size_t height() const { return image.dim(1); }
  std::size_t width() const { return image.dim(2); }
};

/// Throws DataError unless the modalities of `s` are spatially aligned and
/// masks are exactly binary.
inline void validate_sample(const Sample& s) {
  if (s.image.rank() != 3 || s.image.dim(0) != 3) throw DataError(s.id + ": image must be [3,H,W]");
  const std::size_t h = s.height(), w = s.width();
  if (s.depth && s.depth->shape() != Shape{1, h, w})
    throw DataError(s.id + ": depth " + shape_str(s.depth->shape()) + " does not match image " + shape_str(s.image.shape()));
  if (s.masks) {
    if (s.masks->shape() != Shape{2, h, w})
      throw DataError(s.id + ": masks " + shape_str(s.masks->shape()) + " do not match image " + shape_str(s.image.shape()));
    for (float v : s.masks->data())
      if (v != 0.0f && v != 1.0f) throw DataError(s.id + ": mask values must be 0 or 1");
  }
}

/// Per-image min-max normalization to [0,1] in place.
inline void normalize_minmax(Tensor<float>& t, const std::string& id) {
  const auto [lo, hi] = std::minmax_element(t.data().begin(), t.data().end());
  const double mn = *lo, mx = *hi;
  if (!(mx > mn)) throw DataError(id + ": degenerate depth range");
  for (auto& v : t.data()) v = static_cast<float>((static_cast<double>(v) - mn) / (mx - mn));
}

inline void binarize_inplace(Tensor<float>& t) {
  for (auto& v : t.data()) v = v >= 0.5f ? 1.0f : 0.0f;
}

/// Raster to [C,H,W] floats in [0,1].
inline Tensor<float> raster_to_tensor(const Raster& r) {
  Tensor<float> t({r.channels, r.height, r.width});
  const double scale = 1.0 / r.maxval;
  for (std::size_t c = 0; c < r.channels; ++c)
    for (std::size_t y = 0; y < r.height; ++y)
      for (std::size_t x = 0; x < r.width; ++x) t.at(c, y, x) = static_cast<float>(r.at(y, x, c) * scale);
  return t;
}

/// [C,H,W] (C = 1 or 3) to a raster, clamped and rounded to the nearest level.
inline Raster tensor_to_raster(const Tensor<float>& t, std::uint32_t maxval) {
  Raster r(t.dim(2), t.dim(1), t.dim(0), maxval);
  for (std::size_t c = 0; c < r.channels; ++c)
    for (std::size_t y = 0; y < r.height; ++y)
      for (std::size_t x = 0; x < r.width; ++x) {
        const double v = std::clamp(static_cast<double>(t.at(c, y, x)), 0.0, 1.0);
        r.at(y, x, c) = static_cast<std::uint16_t>(std::lround(v * maxval));
      }
  return r;
}

/// Extracts channel c of [C,H,W] as [1,H,W].
inline Tensor<float> channel(const Tensor<float>& t, std::size_t c) {
  const std::size_t plane = t.dim(1) * t.dim(2);
  std::vector<float> out(t.ptr() + c * plane, t.ptr() + (c + 1) * plane);
  return Tensor<float>({1, t.dim(1), t.dim(2)}, std::move(out));
}

struct LoadOptions {
  bool require_depth = false;
  bool require_masks = false;
};

inline std::map<std::string, RoiCenter> read_roi_file(const fs::path& path) {
  std::map<std::string, RoiCenter> out;
  if (!fs::exists(path)) return out;
  std::ifstream in(path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string id;
    RoiCenter c;
    if (!(ls >> id >> c.row >> c.col)) throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 'id row col'");
    out[id] = c;
  }
  return out;
}

/// Reads every image under root/images, sorted by id. A modality directory
/// that exists must provide a file for every image.
inline std::vector<Sample> load_dataset(const fs::path& root, const LoadOptions& opts = {}) {
  const fs::path images = root / "images";
  if (!fs::is_directory(images)) throw DataError("dataset has no images directory: " + root.string());
  std::vector<std::pair<std::string, fs::path>> files;
  for (const auto& e : fs::directory_iterator(images)) {
    const auto ext = e.path().extension();
    if (ext == ".ppm" || ext == ".png") files.emplace_back(e.path().stem().string(), e.path());
  }
  std::sort(files.begin(), files.end());
  for (std::size_t i = 1; i < files.size(); ++i)
    if (files[i].first == files[i - 1].first) throw DataError("duplicate image id: " + files[i].first);
  if (files.empty()) throw DataError("dataset contains no images: " + root.string());

  const bool has_depth = fs::is_directory(root / "depth");
  const bool has_masks = fs::is_directory(root / "masks");
  if (opts.require_depth && !has_depth) throw DataError("dataset has no depth directory: " + root.string());
  if (opts.require_masks && !has_masks) throw DataError("dataset has no masks directory: " + root.string());
  const auto rois = read_roi_file(root / "roi.txt");
  const bool synthetic = fs::is_directory(root / "params");

  std::vector<Sample> out;
  for (const auto& [id, path] : files) {
    Sample s;
    s.id = id;
    const Raster img = read_raster(path);
    if (img.channels != 3) throw DataError(path.string() + ": expected an RGB image");
    s.image = raster_to_tensor(img);
    if (has_depth) {
      const fs::path dp = root / "depth" / (id + ".pgm");
      if (!fs::exists(dp)) throw DataError(id + ": missing depth map " + dp.string());
      const Raster d = read_raster(dp);
      if (d.channels != 1) throw DataError(dp.string() + ": depth must be single channel");
      s.depth = raster_to_tensor(d);
      normalize_minmax(*s.depth, id);
    }
    if (has_masks) {
      Tensor<float> m({2, s.height(), s.width()});
      const char* names[] = {"_disc.pgm", "_cup.pgm"};
      for (std::size_t c = 0; c < 2; ++c) {
        const fs::path mp = root / "masks" / (id + names[c]);
        if (!fs::exists(mp)) throw DataError(id + ": missing mask " + mp.string());
        const Raster r = read_raster(mp);
        if (r.channels != 1 || r.width != s.width() || r.height != s.height())
          throw DataError(mp.string() + ": mask does not match image dimensions");
        const Tensor<float> t = raster_to_tensor(r);
        std::copy(t.data().begin(), t.data().end(), m.data().begin() + c * t.size());
      }
      binarize_inplace(m);
      s.masks = std::move(m);
    }
    if (auto it = rois.find(id); it != rois.end()) s.roi = it->second;
    s.source.kind = synthetic ? SourceKind::Synthetic : SourceKind::Real;
    validate_sample(s);
    out.push_back(std::move(s));
  }
  return out;
}

/// Writes the dataset layout. Images go to PPM, depth to 16-bit PGM, masks
/// to 8-bit PGM. `params` maps ids to free-form text stored under params/.
inline void save_dataset(const fs::path& root, const std::vector<Sample>& samples,
                         const std::map<std::string, std::string>& params = {}) {
  fs::create_directories(root / "images");
  const bool any_depth = std::any_of(samples.begin(), samples.end(), [](const Sample& s) { return s.depth.has_value(); });
  const bool any_masks = std::any_of(samples.begin(), samples.end(), [](const Sample& s) { return s.masks.has_value(); });
  if (any_depth) fs::create_directories(root / "depth");
  if (any_masks) fs::create_directories(root / "masks");
  if (!params.empty()) fs::create_directories(root / "params");
  std::ostringstream roi;
  roi << std::setprecision(17);
  bool any_roi = false;
  for (const auto& s : samples) {
    validate_sample(s);
    if (any_depth && !s.depth) throw DataError(s.id + ": depth missing while other samples have it");
    if (any_masks && !s.masks) throw DataError(s.id + ": masks missing while other samples have them");
    write_pnm(root / "images" / (s.id + ".ppm"), tensor_to_raster(s.image, 255));
    if (s.depth) write_pnm(root / "depth" / (s.id + ".pgm"), tensor_to_raster(*s.depth, 65535));
    if (s.masks) {
      write_pnm(root / "masks" / (s.id + "_disc.pgm"), tensor_to_raster(channel(*s.masks, 0), 255));
      write_pnm(root / "masks" / (s.id + "_cup.pgm"), tensor_to_raster(channel(*s.masks, 1), 255));
    }
    if (s.roi) {
      any_roi = true;
      roi << s.id << ' ' << s.roi->row << ' ' << s.roi->col << '\n';
    }
  }
  for (const auto& [id, text] : params) write_file_atomic(root / "params" / (id + ".txt"), text);
  if (any_roi) write_file_atomic(root / "roi.txt", roi.str());
}

}  // namespace fundus
