#pragma once

// Depth and segmentation evaluation measures and their aggregation.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fundus/errors.hpp"
#include "fundus/tensor.hpp"

namespace fundus {

template <typename T>
void require_comparable(const Tensor<T>& x, const Tensor<T>& y, const char* what) {
  if (x.shape() != y.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  if (x.size() == 0) throw ShapeError(std::string(what) + ": empty input");
}

/// Root of the per-pixel mean squared difference.
template <typename T>
double rmse(const Tensor<T>& x, const Tensor<T>& y) {
  require_comparable(x, y, "rmse");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(x.size()));
}

/// Pearson correlation over all pixels. Throws DataError when either map is constant.
template <typename T>
double pearson_r(const Tensor<T>& x, const Tensor<T>& y) {
  require_comparable(x, y, "pearson_r");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double a = static_cast<double>(x[i]) - mx, b = static_cast<double>(y[i]) - my;
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  if (sxx == 0.0 || syy == 0.0) throw DataError("pearson_r: undefined correlation for a constant map");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Binary mask with its extent; every mask metric goes through binarize().
struct BinaryMask {
  std::size_t height = 0, width = 0;
  std::vector<unsigned char> bits;

  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
  bool empty() const { return count() == 0; }
  bool at(std::size_t r, std::size_t c) const { return bits[r * width + c] != 0; }
};

/// Threshold a probability or mask plane (any shape whose last two extents are H, W) at 0.5.
template <typename T>
BinaryMask binarize(const Tensor<T>& plane, double threshold = 0.5) {
  if (plane.rank() < 2) throw ShapeError("binarize: need at least two dimensions");
  BinaryMask m;
  m.height = plane.dim(plane.rank() - 2);
  m.width = plane.dim(plane.rank() - 1);
  if (plane.size() != m.height * m.width) throw ShapeError("binarize: expected a single plane, got " + shape_str(plane.shape()));
  m.bits.resize(plane.size());
  for (std::size_t i = 0; i < plane.size(); ++i) m.bits[i] = static_cast<double>(plane[i]) >= threshold ? 1 : 0;
  return m;
}

struct Overlap {
  std::size_t intersection = 0, pred = 0, gt = 0;
};

inline Overlap overlap(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width) throw ShapeError("mask metrics: extent mismatch");
  Overlap o;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    o.pred += pred.bits[i];
    o.gt += gt.bits[i];
    o.intersection += pred.bits[i] & gt.bits[i];
  }
  return o;
}

/// Intersection over union; 1 when both masks are empty.
inline double iou(const BinaryMask& pred, const BinaryMask& gt) {
  const Overlap o = overlap(pred, gt);
  const std::size_t uni = o.pred + o.gt - o.intersection;
  return uni == 0 ? 1.0 : static_cast<double>(o.intersection) / static_cast<double>(uni);
}

/// Dice / F1 overlap; 1 when both masks are empty.
inline double f_measure(const BinaryMask& pred, const BinaryMask& gt) {
  const Overlap o = overlap(pred, gt);
  return o.pred + o.gt == 0 ? 1.0 : 2.0 * static_cast<double>(o.intersection) / static_cast<double>(o.pred + o.gt);
}

/// Number of rows containing at least one set pixel, from first to last.
inline std::size_t vertical_extent(const BinaryMask& m) {
  std::size_t first = m.height, last = 0;
  for (std::size_t r = 0; r < m.height; ++r)
    for (std::size_t c = 0; c < m.width; ++c)
      if (m.at(r, c)) {
        first = std::min(first, r);
        last = std::max(last, r);
        break;
      }
  return first == m.height ? 0 : last - first + 1;
}

/// Vertical cup extent over vertical disc extent; 0 for an empty cup.
inline double vertical_cdr(const BinaryMask& disc, const BinaryMask& cup) {
  const std::size_t d = vertical_extent(disc);
  if (d == 0) throw DataError("vertical_cdr: undefined for an empty disc");
  return static_cast<double>(vertical_extent(cup)) / static_cast<double>(d);
}

// ---------------------------------------------------------------------------
// Per-image rows and aggregation

struct MetricRow {
  std::string group;  // e.g. fold or method name
  std::string id;
  std::map<std::string, double> values;
  std::vector<std::string> flags;  // convention events such as "cup:both_empty"
};

struct MetricStats {
  double mean = 0.0, std = 0.0;
  std::size_t n = 0;
};

struct MetricReport {
  std::vector<MetricRow> rows;
  std::map<std::string, std::map<std::string, MetricStats>> groups;  // group -> metric -> stats

  std::size_t flag_count() const {
    std::size_t n = 0;
    for (const auto& r : rows) n += r.flags.size();
    return n;
  }
};

/// Mean and sample standard deviation (n-1); std is 0 for a single value.
inline MetricStats mean_std(const std::vector<double>& v) {
  MetricStats s;
  s.n = v.size();
  if (v.empty()) return s;
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  if (v.size() < 2) return s;
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  return s;
}

/// Groups rows by `group`, sorted by (group, id), then computes stats per metric.
inline MetricReport aggregate(std::vector<MetricRow> rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const MetricRow& a, const MetricRow& b) {
    return a.group != b.group ? a.group < b.group : a.id < b.id;
  });
  MetricReport rep;
  std::map<std::string, std::map<std::string, std::vector<double>>> values;
  for (const auto& r : rows)
    for (const auto& [k, v] : r.values) values[r.group][k].push_back(v);
  for (const auto& [g, metrics] : values)
    for (const auto& [k, v] : metrics) rep.groups[g][k] = mean_std(v);
  rep.rows = std::move(rows);
  return rep;
}

struct DepthMetrics {
  double rmse = 0.0, r = 0.0;
};

template <typename T>
DepthMetrics depth_metrics(const Tensor<T>& pred, const Tensor<T>& gt) {
  return {rmse(pred, gt), pearson_r(pred, gt)};
}

struct SegMetrics {
  double disc_f = 0, disc_iou = 0, cup_f = 0, cup_iou = 0;
  double cdr_pred = 0, cdr_gt = 0;
  bool cdr_defined = true;
  std::vector<std::string> flags;
};

/// pred and gt are [2,H,W] (disc, cup) probability or binary maps.
template <typename T>
SegMetrics seg_metrics(const Tensor<T>& pred, const Tensor<T>& gt) {
  if (pred.shape() != gt.shape() || pred.rank() != 3 || pred.dim(0) != 2)
    throw ShapeError("seg_metrics: expected matching [2,H,W] maps, got " + shape_str(pred.shape()) + " and " + shape_str(gt.shape()));
  const std::size_t plane = pred.dim(1) * pred.dim(2);
  auto plane_of = [&](const Tensor<T>& t, std::size_t c) {
    return Tensor<T>({pred.dim(1), pred.dim(2)}, std::vector<T>(t.ptr() + c * plane, t.ptr() + (c + 1) * plane));
  };
  const BinaryMask pd = binarize(plane_of(pred, 0)), pc = binarize(plane_of(pred, 1));
  const BinaryMask gd = binarize(plane_of(gt, 0)), gc = binarize(plane_of(gt, 1));
  SegMetrics m;
  m.disc_f = f_measure(pd, gd);
  m.disc_iou = iou(pd, gd);
  m.cup_f = f_measure(pc, gc);
  m.cup_iou = iou(pc, gc);
  if (pd.empty() && gd.empty()) m.flags.push_back("disc:both_empty");
  if (pc.empty() && gc.empty()) m.flags.push_back("cup:both_empty");
  if (pc.empty()) m.flags.push_back("cup:pred_empty");
  if (pd.empty()) {
    m.cdr_defined = false;
    m.flags.push_back("disc:pred_empty_cdr_undefined");
  } else {
    m.cdr_pred = vertical_cdr(pd, pc);
  }
  m.cdr_gt = gd.empty() ? 0.0 : vertical_cdr(gd, gc);
  return m;
}

inline MetricRow depth_row(std::string group, std::string id, const DepthMetrics& m) {
  return MetricRow{std::move(group), std::move(id), {{"rmse", m.rmse}, {"r", m.r}}, {}};
}

inline MetricRow seg_row(std::string group, std::string id, const SegMetrics& m) {
  MetricRow row{std::move(group), std::move(id),
                {{"disc_f", m.disc_f}, {"disc_iou", m.disc_iou}, {"cup_f", m.cup_f}, {"cup_iou", m.cup_iou}},
                m.flags};
  if (m.cdr_defined) {
    row.values["cdr_pred"] = m.cdr_pred;
    row.values["cdr_abs_err"] = std::abs(m.cdr_pred - m.cdr_gt);
  }
  return row;
}

// ---------------------------------------------------------------------------
// Report output

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// One line per row: group,id,<metrics in sorted key order>,flags.
inline std::string report_csv(const MetricReport& rep) {
  std::vector<std::string> keys;
  for (const auto& r : rep.rows)
    for (const auto& [k, v] : r.values)
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  std::ostringstream os;
  os << "group,id";
  for (const auto& k : keys) os << ',' << k;
  os << ",flags\n";
  for (const auto& r : rep.rows) {
    os << r.group << ',' << r.id;
    for (const auto& k : keys) {
      os << ',';
      if (auto it = r.values.find(k); it != r.values.end()) os << format_double(it->second);
    }
    os << ',';
    for (std::size_t i = 0; i < r.flags.size(); ++i) os << (i ? ";" : "") << r.flags[i];
    os << '\n';
  }
  return os.str();
}

inline nlohmann::ordered_json report_summary_json(const MetricReport& rep) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [g, metrics] : rep.groups) {
    nlohmann::ordered_json block = nlohmann::ordered_json::object();
    for (const auto& [k, s] : metrics) block[k] = {{"mean", s.mean}, {"std", s.std}, {"n", s.n}};
    j[g] = block;
  }
  return {{"groups", j}, {"rows", rep.rows.size()}, {"flagged_events", rep.flag_count()}};
}

/// Fixed-width terminal table: one line per group, "mean +- std" per metric.
inline std::string report_table(const MetricReport& rep) {
  std::vector<std::string> keys;
  for (const auto& [g, metrics] : rep.groups)
    for (const auto& [k, s] : metrics)
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  std::ostringstream os;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-12s", "group");
  os << buf;
  for (const auto& k : keys) {
    std::snprintf(buf, sizeof buf, " %19s", k.c_str());
    os << buf;
  }
  os << '\n';
  for (const auto& [g, metrics] : rep.groups) {
    std::snprintf(buf, sizeof buf, "%-12s", g.c_str());
    os << buf;
    for (const auto& k : keys) {
      if (auto it = metrics.find(k); it != metrics.end())
        std::snprintf(buf, sizeof buf, " %9.4f +- %6.4f", it->second.mean, it->second.std);
      else
        std::snprintf(buf, sizeof buf, " %19s", "-");
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace fundus
