#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "fundus/augment.hpp"
#include "fundus/data.hpp"
#include "fundus/folds.hpp"
#include "fundus/image_io.hpp"
#include "fundus/metrics.hpp"
#include "fundus/synth.hpp"

using namespace fundus;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("fundus_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Raster gradient_raster(std::size_t w, std::size_t h, std::size_t c, std::uint32_t maxval) {
  Raster r(w, h, c, maxval);
  for (std::size_t i = 0; i < r.samples.size(); ++i) r.samples[i] = static_cast<std::uint16_t>((i * 7919) % (maxval + 1));
  return r;
}

Sample small_synth(std::size_t size = 64, std::uint64_t seed = 3) { return synth_dataset(1, size, seed).samples[0]; }

// Centroid of a mask plane in (row, col).
std::pair<double, double> centroid(const Tensor<float>& masks, std::size_t ch) {
  double sr = 0, sc = 0, n = 0;
  for (std::size_t y = 0; y < masks.dim(1); ++y)
    for (std::size_t x = 0; x < masks.dim(2); ++x)
      if (masks.at(ch, y, x) > 0.5f) {
        sr += static_cast<double>(y);
        sc += static_cast<double>(x);
        n += 1;
      }
  return {sr / n, sc / n};
}

}  // namespace

TEST(ImageIo, PnmRoundTrip8And16Bit) {
  const auto dir = scratch_dir("pnm");
  for (auto [c, mv] : {std::pair<std::size_t, std::uint32_t>{3, 255}, {1, 255}, {1, 65535}, {3, 65535}}) {
    const Raster r = gradient_raster(7, 5, c, mv);
    write_pnm(dir / "a.pnm", r);
    const Raster back = read_pnm(dir / "a.pnm");
    EXPECT_EQ(back.width, 7u);
    EXPECT_EQ(back.height, 5u);
    EXPECT_EQ(back.channels, c);
    EXPECT_EQ(back.maxval, mv);
    EXPECT_EQ(back.samples, r.samples);
  }
}

TEST(ImageIo, PngRoundTrip) {
  const auto dir = scratch_dir("png");
  for (auto [c, mv] : {std::pair<std::size_t, std::uint32_t>{3, 255}, {1, 255}, {1, 65535}}) {
    const Raster r = gradient_raster(9, 4, c, mv);
    write_png(dir / "a.png", r);
    const Raster back = read_raster(dir / "a.png");
    EXPECT_EQ(back.channels, c);
    EXPECT_EQ(back.maxval, mv);
    EXPECT_EQ(back.samples, r.samples);
  }
}

TEST(ImageIo, MalformedFilesAreDataErrors) {
  const auto dir = scratch_dir("bad");
  write_file_atomic(dir / "t.pgm", "P5\n4 4\n255\nab");
  EXPECT_THROW(read_pnm(dir / "t.pgm"), DataError);
  write_file_atomic(dir / "x.pgm", "P2\n1 1\n255\n0");
  EXPECT_THROW(read_pnm(dir / "x.pgm"), DataError);
  write_file_atomic(dir / "x.png", "\x89PNG\r\n\x1a\nxxxx");
  EXPECT_THROW(read_png(dir / "x.png"), DataError);
  EXPECT_THROW(read_raster(dir / "missing.png"), DataError);
}

TEST(LoadDataset, ImageDepthPairsWithoutMasks) {
  const auto dir = scratch_dir("pairs");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "depth");
  for (int i = 0; i < 30; ++i) {
    const std::string id = "img" + std::to_string(i);
    write_pnm(dir / "images" / (id + ".ppm"), gradient_raster(8, 8, 3, 255));
    write_pnm(dir / "depth" / (id + ".pgm"), gradient_raster(8, 8, 1, 65535));
  }
  const auto samples = load_dataset(dir);
  ASSERT_EQ(samples.size(), 30u);
  for (const auto& s : samples) {
    EXPECT_TRUE(s.depth.has_value());
    EXPECT_FALSE(s.masks.has_value());
    EXPECT_EQ(s.image.shape(), (Shape{3, 8, 8}));
  }
}

TEST(LoadDataset, ConstantDepthIsDegenerate) {
  const auto dir = scratch_dir("constdepth");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "depth");
  write_pnm(dir / "images" / "a.ppm", gradient_raster(4, 4, 3, 255));
  Raster d(4, 4, 1, 65535);
  std::fill(d.samples.begin(), d.samples.end(), 1234);
  write_pnm(dir / "depth" / "a.pgm", d);
  try {
    load_dataset(dir);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("degenerate depth range"), std::string::npos);
  }
}

TEST(LoadDataset, SixteenBitDepthNormalizesToUnitRange) {
  const auto dir = scratch_dir("depth16");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "depth");
  write_pnm(dir / "images" / "a.ppm", gradient_raster(16, 16, 3, 255));
  Raster d(16, 16, 1, 65535);
  for (std::size_t i = 0; i < d.samples.size(); ++i) d.samples[i] = static_cast<std::uint16_t>(i * 65535 / (d.samples.size() - 1));
  write_pnm(dir / "depth" / "a.pgm", d);
  const auto s = load_dataset(dir).at(0);
  const auto [lo, hi] = std::minmax_element(s.depth->data().begin(), s.depth->data().end());
  EXPECT_EQ(*lo, 0.0f);
  EXPECT_EQ(*hi, 1.0f);
}

TEST(LoadDataset, MissingPairAndMismatchedMaskAreErrors) {
  const auto dir = scratch_dir("missing");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "depth");
  write_pnm(dir / "images" / "a.ppm", gradient_raster(4, 4, 3, 255));
  write_pnm(dir / "images" / "b.ppm", gradient_raster(4, 4, 3, 255));
  write_pnm(dir / "depth" / "a.pgm", gradient_raster(4, 4, 1, 65535));
  EXPECT_THROW(load_dataset(dir), DataError);

  const auto dir2 = scratch_dir("mismatch");
  fs::create_directories(dir2 / "images");
  fs::create_directories(dir2 / "masks");
  write_pnm(dir2 / "images" / "a.ppm", gradient_raster(4, 4, 3, 255));
  write_pnm(dir2 / "masks" / "a_disc.pgm", gradient_raster(4, 4, 1, 255));
  write_pnm(dir2 / "masks" / "a_cup.pgm", gradient_raster(5, 4, 1, 255));
  EXPECT_THROW(load_dataset(dir2), DataError);
}

TEST(LoadDataset, MasksBinarizedAtHalf) {
  const auto dir = scratch_dir("masks");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  write_pnm(dir / "images" / "a.ppm", gradient_raster(2, 1, 3, 255));
  Raster m(2, 1, 1, 255);
  m.samples = {127, 128};
  write_pnm(dir / "masks" / "a_disc.pgm", m);
  write_pnm(dir / "masks" / "a_cup.pgm", m);
  const auto s = load_dataset(dir).at(0);
  EXPECT_EQ(s.masks->at(0, 0, 0), 0.0f);
  EXPECT_EQ(s.masks->at(0, 0, 1), 1.0f);
}

TEST(LoadDataset, SaveLoadRoundTripIsBitwise) {
  const auto dir = scratch_dir("roundtrip");
  const auto ds = synth_dataset(4, 32, 11);
  save_dataset(dir, ds.samples, ds.params_text());
  const auto loaded = load_dataset(dir);
  ASSERT_EQ(loaded.size(), ds.samples.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    EXPECT_EQ(loaded[i].id, ds.samples[i].id);
    EXPECT_TRUE(loaded[i].image == ds.samples[i].image);
    EXPECT_TRUE(*loaded[i].depth == *ds.samples[i].depth);
    EXPECT_TRUE(*loaded[i].masks == *ds.samples[i].masks);
    EXPECT_EQ(loaded[i].roi, ds.samples[i].roi);
    EXPECT_EQ(loaded[i].source.kind, SourceKind::Synthetic);
  }
  const auto dir2 = scratch_dir("roundtrip2");
  save_dataset(dir2, loaded, ds.params_text());
  for (const auto& sub : {"images", "depth", "masks", "params"})
    for (const auto& e : fs::directory_iterator(dir / sub))
      EXPECT_EQ(read_file(e.path()), read_file(dir2 / sub / e.path().filename())) << e.path();
  EXPECT_EQ(read_file(dir / "roi.txt"), read_file(dir2 / "roi.txt"));
}

TEST(CropRoi, FullExtentAtCentreIsIdentity) {
  const Sample s = small_synth();
  const Sample c = crop_roi(s, RoiCenter{32, 32}, 64);
  EXPECT_TRUE(c.image == s.image);
  EXPECT_TRUE(*c.depth == *s.depth);
  EXPECT_TRUE(*c.masks == *s.masks);
}

TEST(CropRoi, RepeatedCropIsIdempotent) {
  const Sample s = small_synth(96);
  const Sample a = crop_roi(s, 48, 16);
  const Sample b = crop_roi(a, 48, 16);
  EXPECT_TRUE(a.image == b.image);
  EXPECT_TRUE(*a.depth == *b.depth);
  EXPECT_TRUE(*a.masks == *b.masks);
  EXPECT_EQ(a.roi, b.roi);
}

TEST(CropRoi, DiscCentroidLandsAtWindowCentre) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto ds = synth_dataset(1, 128, seed);
    const Sample c = crop_roi(ds.samples[0], 64, 16);
    const auto [r, col] = centroid(*c.masks, 0);
    // the window centre pixel is size/2 after rounding the ROI to the grid
    const double off_r = ds.params[0].disc_row - std::round(ds.params[0].disc_row);
    const double off_c = ds.params[0].disc_col - std::round(ds.params[0].disc_col);
    EXPECT_NEAR(r, 32 + off_r, 1.0);
    EXPECT_NEAR(col, 32 + off_c, 1.0);
  }
}

TEST(CropRoi, EdgeReplicationAndDivisibility) {
  const Sample s = small_synth(32);
  const Sample c = crop_roi(s, RoiCenter{0, 0}, 16);
  EXPECT_EQ(c.image.at(0, 0, 0), s.image.at(0, 0, 0));
  EXPECT_EQ(c.image.at(1, 3, 2), s.image.at(1, 0, 0));
  EXPECT_EQ(c.image.at(2, 10, 12), s.image.at(2, 2, 4));
  EXPECT_THROW(crop_roi(s, 24, 16), ShapeError);
}

TEST(AddNoise, ZeroSigmaIsIdentity) {
  const Sample s = small_synth();
  EXPECT_TRUE(add_noise(s.image, 0.0, 5) == s.image);
  EXPECT_THROW(add_noise(s.image, -0.1, 5), ConfigError);
}

TEST(AddNoise, EmpiricalStdAndClamp) {
  const Tensor<float> clean = Tensor<float>::full({1, 128, 128}, 0.5f);
  const Tensor<float> noisy = add_noise(clean, 0.1, 9);
  double s = 0, ss = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const double d = static_cast<double>(noisy[i]) - clean[i];
    s += d;
    ss += d * d;
  }
  const double n = static_cast<double>(clean.size());
  const double sd = std::sqrt(ss / n - (s / n) * (s / n));
  EXPECT_NEAR(sd, 0.1, 0.01);
  const Tensor<float> wide = add_noise(clean, 2.0, 9);
  for (float v : wide.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_TRUE(add_noise(clean, 0.1, 9) == noisy);
  EXPECT_FALSE(add_noise(clean, 0.1, 10) == noisy);
}

TEST(Augment, TwentyFourTimesHundred) {
  const auto ds = synth_dataset(24, 16, 1);
  AugmentConfig cfg;
  cfg.factor = 100;
  const auto out = augment(ds.samples, cfg);
  ASSERT_EQ(out.size(), 2400u);
  std::set<std::string> ids;
  for (const auto& a : out) {
    ids.insert(a.id);
    EXPECT_EQ(a.source.kind, SourceKind::Augmented);
    EXPECT_FALSE(a.source.descriptor.empty());
    validate_sample(a);
  }
  EXPECT_EQ(ids.size(), 2400u);
  EXPECT_EQ(out[0].source.parent, ds.samples[0].id);
  EXPECT_EQ(out[2399].source.parent, ds.samples[23].id);
}

TEST(Augment, IdentityTransformLeavesSampleUnchanged) {
  const Sample s = small_synth();
  const Sample a = apply_transform(s, Transform{});
  EXPECT_TRUE(a.image == s.image);
  EXPECT_TRUE(*a.depth == *s.depth);
  EXPECT_TRUE(*a.masks == *s.masks);
  AugmentConfig cfg;
  cfg.factor = 3;
  const auto out = augment({s}, cfg);
  EXPECT_TRUE(out[0].image == s.image);  // replica 0
}

TEST(Augment, FlipsAndQuarterTurnsAreExact) {
  const Sample s = small_synth();
  Transform h;
  h.flip_h = true;
  const Sample twice = apply_transform(apply_transform(s, h), h);
  EXPECT_TRUE(twice.image == s.image);
  EXPECT_TRUE(*twice.masks == *s.masks);
  Transform q;
  q.quarter_turns = 1;
  Sample r = s;
  for (int i = 0; i < 4; ++i) r = apply_transform(r, q);
  EXPECT_TRUE(r.image == s.image);
  EXPECT_TRUE(*r.depth == *s.depth);
  // one quarter turn moves (0, W-1) to (0, 0)
  const Sample one = apply_transform(s, q);
  EXPECT_EQ(one.image.at(0, 0, 0), s.image.at(0, 0, 63));
}

TEST(Augment, GammaTouchesOnlyTheImage) {
  const Sample s = small_synth();
  Transform g;
  g.gamma = 1.3;
  const Sample a = apply_transform(s, g);
  EXPECT_FALSE(a.image == s.image);
  EXPECT_TRUE(*a.depth == *s.depth);
  EXPECT_TRUE(*a.masks == *s.masks);
  EXPECT_NEAR(a.image.at(0, 10, 10), std::pow(s.image.at(0, 10, 10), 1.3f), 1e-6);
}

TEST(Augment, MasksStayBinaryAndAligned) {
  const Sample s = small_synth();
  Transform t;
  t.angle_deg = 11;
  t.zoom = 1.07;
  t.flip_v = true;
  const Sample a = apply_transform(s, t);
  validate_sample(a);
  // cup stays inside disc after identical resampling
  for (std::size_t i = 0; i < 64 * 64; ++i)
    if (a.masks->data()[64 * 64 + i] > 0) EXPECT_EQ(a.masks->data()[i], 1.0f);
}

TEST(Augment, PerSampleStreamsIndependentOfBatchComposition) {
  const auto ds = synth_dataset(3, 16, 2);
  AugmentConfig cfg;
  cfg.factor = 5;
  const auto all = augment(ds.samples, cfg);
  const auto single = augment({ds.samples[2]}, cfg);
  for (std::size_t r = 0; r < 5; ++r) EXPECT_TRUE(all[10 + r].image == single[r].image);
}

TEST(Augment, ConfigValidation) {
  AugmentConfig c;
  c.factor = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.gamma_min = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.zoom_min = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

// Geometric transforms about the image centre commute with a centred crop.
TEST(Augment, GeometryCommutesWithCentredCrop) {
  const Sample s = small_synth(64);
  const RoiCenter centre{32, 32};  // a 32-window at 32 spans rows 16..47, centred like the image
  for (const Transform& t : {Transform{true, false, 0}, Transform{false, true, 1}, Transform{false, false, 2},
                             Transform{false, false, 0, 9.0, 1.0}, Transform{true, false, 3, -7.0, 1.05}}) {
    const Sample a = crop_roi(apply_transform(s, t), centre, 32);
    const Sample b = apply_transform(crop_roi(s, centre, 32), t);
    // compare away from the window border, where padding differs
    double worst = 0, worst_mask = 0;
    for (std::size_t y = 8; y < 24; ++y)
      for (std::size_t x = 8; x < 24; ++x) {
        worst = std::max(worst, static_cast<double>(std::abs(a.depth->at(0, y, x) - b.depth->at(0, y, x))));
        worst_mask = std::max(worst_mask, static_cast<double>(std::abs(a.masks->at(0, y, x) - b.masks->at(0, y, x))));
      }
    EXPECT_LE(worst, 2.0 / 255);
    EXPECT_LE(worst_mask, 2.0 / 255);
  }
}

TEST(Folds, ThirtyIntoFiveGivesSixAndTwentyFour) {
  std::vector<std::string> ids;
  for (int i = 0; i < 30; ++i) ids.push_back("s" + std::to_string(i));
  const FoldPlan plan = make_folds(ids, 5, 42);
  std::set<std::string> seen;
  for (std::size_t f = 0; f < 5; ++f) {
    const auto val = plan.validation(f, ids);
    const auto train = plan.training(f, ids);
    EXPECT_EQ(val.size(), 6u);
    EXPECT_EQ(train.size(), 24u);
    for (const auto& id : val) EXPECT_TRUE(seen.insert(id).second) << "id in two folds: " << id;
    for (const auto& id : train) EXPECT_EQ(std::count(val.begin(), val.end(), id), 0);
  }
  EXPECT_EQ(seen.size(), 30u);
}

TEST(Folds, DeterministicPerSeed) {
  std::vector<std::string> ids;
  for (int i = 0; i < 30; ++i) ids.push_back("s" + std::to_string(i));
  EXPECT_EQ(make_folds(ids, 5, 1).assignments, make_folds(ids, 5, 1).assignments);
  EXPECT_NE(make_folds(ids, 5, 1).assignments, make_folds(ids, 5, 2).assignments);
}

TEST(Folds, SizesDifferByAtMostOne) {
  for (std::size_t n : {5u, 7u, 11u, 32u}) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back("x" + std::to_string(i));
    const FoldPlan plan = make_folds(ids, 5, n);
    std::vector<std::size_t> sizes(5, 0);
    for (const auto& [id, f] : plan.assignments) ++sizes[f];
    EXPECT_LE(*std::max_element(sizes.begin(), sizes.end()) - *std::min_element(sizes.begin(), sizes.end()), 1u);
  }
  EXPECT_THROW(make_folds({"a", "b"}, 5, 0), DataError);
  EXPECT_THROW(make_folds({"a", "a"}, 2, 0), DataError);
}

TEST(Folds, AugmentedSamplesInheritTheirParentsFold) {
  const auto ds = synth_dataset(10, 16, 4);
  std::vector<std::string> ids;
  for (const auto& s : ds.samples) ids.push_back(s.id);
  const FoldPlan plan = make_folds(ids, 5, 8);
  AugmentConfig cfg;
  cfg.factor = 4;
  for (const auto& a : augment(ds.samples, cfg)) EXPECT_EQ(plan.fold_of(a.source.parent), plan.fold_of(a.id.substr(0, a.id.find('~'))));
}

TEST(Synth, ZeroAmplitudeGivesFlatDepth) {
  SynthParams p;
  p.amplitude = 0;
  const Sample s = synth_sample(p);
  for (float v : s.depth->data()) EXPECT_EQ(v, 0.0f);
}

TEST(Synth, CupToDiscAreaRatioMatchesEllipses) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const SynthParams p = random_synth_params(256, seed, 0);
    const Sample s = synth_sample(p);
    double disc = 0, cup = 0;
    for (std::size_t i = 0; i < 256 * 256; ++i) {
      disc += s.masks->data()[i];
      cup += s.masks->data()[256 * 256 + i];
    }
    const double expected = (p.cup_axis_v() * p.cup_axis_h()) / (p.disc_axis_v * p.disc_axis_h);
    EXPECT_NEAR(cup / disc, expected, 0.05 * expected);
  }
}

TEST(Synth, VerticalCdrMatchesAxisRatio) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const SynthParams p = random_synth_params(128, seed, 1);
    const Sample s = synth_sample(p);
    const double measured = vertical_cdr(binarize(channel(*s.masks, 0)), binarize(channel(*s.masks, 1)));
    const double disc_rows = 2 * ellipse_vertical_half_extent(p.disc_axis_v, p.disc_axis_h, p.rotation);
    // each extent is quantized to whole rows: at most one row of error per structure
    const double cup_rows = synth_vertical_cdr(p) * disc_rows;
    const double tol = (cup_rows + 1) / (disc_rows - 1) - cup_rows / disc_rows;
    EXPECT_NEAR(measured, synth_vertical_cdr(p), tol) << "seed " << seed;
  }
}

TEST(Synth, DepthPeaksAtCupCentreAndVanishesOnDiscBoundary) {
  const SynthParams p = random_synth_params(64, 5, 0);
  EXPECT_DOUBLE_EQ(synth_depth_at(p, 0, 0), p.amplitude);
  for (int k = 0; k < 16; ++k) {
    const double t = 2 * std::numbers::pi * k / 16;
    // boundary point of the rotated disc ellipse
    const double pv = p.disc_axis_v * std::cos(t), ph = p.disc_axis_h * std::sin(t);
    const double c = std::cos(p.rotation), s = std::sin(p.rotation);
    const double dy = pv * c + ph * s, dx = -pv * s + ph * c;
    EXPECT_NEAR(synth_depth_at(p, dy, dx), 0.0, 1e-12);
    EXPECT_LE(synth_depth_at(p, 0.5 * dy, 0.5 * dx), p.amplitude);
  }
  const Sample smp = synth_sample(p);
  const auto [lo, hi] = std::minmax_element(smp.depth->data().begin(), smp.depth->data().end());
  EXPECT_EQ(*lo, 0.0f);
  EXPECT_LE(*hi, static_cast<float>(p.amplitude));
}

TEST(Synth, CupInsideDiscAndDeterministic) {
  const auto a = synth_dataset(3, 64, 9);
  const auto b = synth_dataset(3, 64, 9);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(a.samples[i].image == b.samples[i].image);
    const auto& m = *a.samples[i].masks;
    for (std::size_t k = 0; k < 64 * 64; ++k)
      if (m.data()[64 * 64 + k] > 0) EXPECT_EQ(m.data()[k], 1.0f);
  }
  SynthParams bad;
  bad.cup_ratio_v = 1.0;
  EXPECT_THROW(synth_sample(bad), ConfigError);
}
