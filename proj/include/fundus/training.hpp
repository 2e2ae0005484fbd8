#pragma once

// The three training stages and the k-fold protocol around them.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "fundus/adam.hpp"
#include "fundus/augment.hpp"
#include "fundus/config.hpp"
#include "fundus/data.hpp"
#include "fundus/folds.hpp"
#include "fundus/losses.hpp"
#include "fundus/metrics.hpp"
#include "fundus/networks.hpp"

namespace fundus {

enum class Stage { Autoencoder, Depth, Segmentation };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Autoencoder: return "autoencoder";
    case Stage::Depth: return "depth";
    case Stage::Segmentation: return "segmentation";
  }
  return "?";
}

inline ModelRole generator_role(Stage s) {
  switch (s) {
    case Stage::Autoencoder: return ModelRole::Autoencoder;
    case Stage::Depth: return ModelRole::DepthGenerator;
    case Stage::Segmentation: return ModelRole::SegGenerator;
  }
  return ModelRole::DepthGenerator;
}

inline ModelRole discriminator_role(Stage s) {
  return s == Stage::Segmentation ? ModelRole::SegDiscriminator : ModelRole::DepthDiscriminator;
}

using Gen = Generator<float>;
using Disc = Discriminator<float>;

// ---------------------------------------------------------------------------
// Data preparation

/// Applies the configured ROI crop to every sample.
inline std::vector<Sample> prepare_samples(const std::vector<Sample>& samples, const TrainConfig& cfg) {
  std::vector<Sample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(cfg.crop_size ? crop_roi(s, cfg.crop_size, std::size_t{1} << cfg.depth_levels) : s);
  return out;
}

/// Lazily augmented view: index i is replica i % factor of base sample i / factor.
class TrainingSet {
 public:
  TrainingSet(std::vector<Sample> base, AugmentConfig cfg) : base_(std::move(base)), cfg_(cfg) { cfg_.validate(); }

  std::size_t size() const { return base_.size() * cfg_.factor; }
  const std::vector<Sample>& base() const { return base_; }
  const AugmentConfig& augment_config() const { return cfg_; }

  Sample get(std::size_t i) const {
    const Sample& s = base_.at(i / cfg_.factor);
    const std::size_t replica = i % cfg_.factor;
    const Transform tr = draw_transform(cfg_, s.id, replica, s.height() == s.width());
    Sample a = apply_transform(s, tr);
    a.id = s.id + "~" + std::to_string(replica);
    a.source = Source{SourceKind::Augmented, s.id, tr.describe()};
    return a;
  }

 private:
  std::vector<Sample> base_;
  AugmentConfig cfg_;
};

/// Network target for a sample: clean image, depth or masks.
inline const Tensor<float>& stage_target(const Sample& s, Stage stage) {
  switch (stage) {
    case Stage::Autoencoder: return s.image;
    case Stage::Depth:
      if (!s.depth) throw DataError(s.id + ": depth map required for the depth stage");
      return *s.depth;
    case Stage::Segmentation:
      if (!s.masks) throw DataError(s.id + ": masks required for the segmentation stage");
      return *s.masks;
  }
  throw DataError("unknown stage");
}

inline std::uint64_t stream_seed(std::uint64_t seed, const std::string& key, std::uint64_t index = 0) {
  return splitmix64(seed ^ splitmix64(fnv1a(key) + index));
}

/// Autoencoder input: the image with noise seeded by (run seed, id, epoch).
inline Tensor<float> noisy_input(const Sample& s, const TrainConfig& cfg, std::uint64_t epoch) {
  return add_noise(s.image, cfg.noise_sigma, stream_seed(cfg.seed, "ae-noise/" + s.id, epoch));
}

// ---------------------------------------------------------------------------
// Reports

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double g_loss = 0, reg_loss = 0, adv_loss = 0, d_loss = 0;
  std::map<std::string, double> val;
};

struct StageReport {
  std::string stage;
  std::string init = "fresh";
  std::size_t train_samples = 0, val_samples = 0;
  std::vector<EpochRecord> epochs;
  std::optional<TransferAudit> transfer;
  std::string checkpoint;
  double wall_seconds = 0;  // logged, never serialized
};

inline nlohmann::ordered_json epoch_json(const EpochRecord& e) {
  nlohmann::ordered_json j{{"epoch", e.epoch}, {"g_loss", e.g_loss}, {"reg_loss", e.reg_loss}, {"adv_loss", e.adv_loss}, {"d_loss", e.d_loss}};
  nlohmann::ordered_json v = nlohmann::ordered_json::object();
  for (const auto& [k, x] : e.val) v[k] = x;
  j["val"] = v;
  return j;
}

/// One JSON object per epoch, then a summary line.
inline std::string report_jsonl(const StageReport& r) {
  std::string out;
  for (const auto& e : r.epochs) out += epoch_json(e).dump() + "\n";
  nlohmann::ordered_json s{{"stage", r.stage}, {"init", r.init}, {"epochs", r.epochs.size()}, {"train_samples", r.train_samples},
                           {"val_samples", r.val_samples}, {"checkpoint", r.checkpoint}};
  if (r.transfer) s["transfer"] = {{"copied", r.transfer->copied}, {"skipped", r.transfer->skipped}, {"skipped_layers", r.transfer->skipped_layers}};
  if (!r.epochs.empty()) s["final"] = epoch_json(r.epochs.back());
  out += nlohmann::ordered_json{{"summary", s}}.dump() + "\n";
  return out;
}

/// Reads the epoch records back from a JSONL report.
inline std::vector<EpochRecord> parse_report_jsonl(const std::string& text) {
  std::vector<EpochRecord> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed report line: ") + e.what());
    }
    if (j.contains("summary")) continue;
    EpochRecord e;
    e.epoch = j.at("epoch").get<std::size_t>();
    e.g_loss = j.at("g_loss").get<double>();
    e.reg_loss = j.at("reg_loss").get<double>();
    e.adv_loss = j.at("adv_loss").get<double>();
    e.d_loss = j.at("d_loss").get<double>();
    for (const auto& [k, v] : j.at("val").items()) e.val[k] = v.get<double>();
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

inline Tensor<float> predict_one(const Gen& g, const Tensor<float>& image) {
  Tensor<float> x = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  Tensor<float> y = g.predict(x);
  return y.reshaped({y.dim(1), y.dim(2), y.dim(3)});
}

inline std::vector<MetricRow> evaluate_depth(const Gen& g, const std::vector<Sample>& samples, const std::string& group) {
  std::vector<MetricRow> rows;
  for (const auto& s : samples) {
    const Tensor<float> pred = predict_one(g, s.image);
    const Tensor<float>& gt = stage_target(s, Stage::Depth);
    MetricRow row{group, s.id, {{"rmse", rmse(pred, gt)}}, {}};
    try {
      row.values["r"] = pearson_r(pred, gt);
    } catch (const DataError&) {
      row.values["r"] = 0.0;
      row.flags.push_back("r:undefined_constant_map");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::vector<MetricRow> evaluate_segmentation(const Gen& g, const std::vector<Sample>& samples, const std::string& group) {
  std::vector<MetricRow> rows;
  for (const auto& s : samples) rows.push_back(seg_row(group, s.id, seg_metrics(predict_one(g, s.image), stage_target(s, Stage::Segmentation))));
  return rows;
}

inline std::vector<MetricRow> evaluate_autoencoder(const Gen& g, const std::vector<Sample>& samples, const TrainConfig& cfg,
                                                   const std::string& group) {
  std::vector<MetricRow> rows;
  for (const auto& s : samples) {
    const Tensor<float> pred = predict_one(g, noisy_input(s, cfg, 0));
    rows.push_back(MetricRow{group, s.id, {{"recon_rmse", rmse(pred, s.image)}}, {}});
  }
  return rows;
}

inline std::vector<MetricRow> evaluate_stage(Stage stage, const Gen& g, const std::vector<Sample>& samples, const TrainConfig& cfg,
                                             const std::string& group) {
  switch (stage) {
    case Stage::Autoencoder: return evaluate_autoencoder(g, samples, cfg, group);
    case Stage::Depth: return evaluate_depth(g, samples, group);
    case Stage::Segmentation: return evaluate_segmentation(g, samples, group);
  }
  return {};
}

inline std::map<std::string, double> mean_values(const std::vector<MetricRow>& rows) {
  std::map<std::string, std::vector<double>> acc;
  for (const auto& r : rows)
    for (const auto& [k, v] : r.values) acc[k].push_back(v);
  std::map<std::string, double> out;
  for (const auto& [k, v] : acc) out[k] = mean_std(v).mean;
  return out;
}

// ---------------------------------------------------------------------------
// Stage training

struct StageOptions {
  fs::path out_dir;  // empty: nothing written
  std::ostream* log = nullptr;
};

struct StageResult {
  std::unique_ptr<Gen> generator;
  std::unique_ptr<Disc> discriminator;  // null when not adversarial
  StageReport report;
};

inline std::uint64_t model_seed(const TrainConfig& cfg, Stage stage, const char* part) {
  return stream_seed(cfg.seed, std::string("init/") + stage_name(stage) + "/" + part);
}

/// Fresh generator for a stage, optionally initialized by weight transfer.
inline std::unique_ptr<Gen> make_generator(Stage stage, const TrainConfig& cfg, const Gen* init, std::optional<TransferAudit>* audit) {
  auto g = std::make_unique<Gen>(cfg.generator_spec(generator_role(stage)));
  init_weights(*g, model_seed(cfg, stage, "generator"));
  if (init) {
    TransferAudit a = transfer_weights(*init, *g);
    if (audit) *audit = std::move(a);
  }
  return g;
}

/// Runs one stage. Autoencoder stages never use a discriminator.
inline StageResult train_stage(Stage stage, const TrainingSet& train, const std::vector<Sample>& val, const TrainConfig& cfg,
                               const Gen* init = nullptr, const StageOptions& opts = {}, const std::string& init_label = "") {
  cfg.validate();
  if (train.size() == 0) throw DataError(std::string(stage_name(stage)) + ": empty training set");
  const bool adversarial = cfg.adversarial && stage != Stage::Autoencoder;
  const std::size_t epochs = stage == Stage::Autoencoder ? cfg.ae_epochs : cfg.epochs;
  if (epochs < 1) throw ConfigError(std::string(stage_name(stage)) + ": epoch count must be >= 1");
  const double lambda = stage == Stage::Segmentation ? cfg.seg_lambda : cfg.depth_lambda;
  for (const auto& s : train.base()) stage_target(s, stage);
  for (const auto& s : val) stage_target(s, stage);

  StageResult res;
  res.report.stage = stage_name(stage);
  res.report.train_samples = train.size();
  res.report.val_samples = val.size();
  res.generator = make_generator(stage, cfg, init, &res.report.transfer);
  if (init) res.report.init = init_label.empty() ? "transfer" : init_label;
  Gen& G = *res.generator;
  if (adversarial) {
    res.discriminator = std::make_unique<Disc>(cfg.discriminator_spec(discriminator_role(stage)));
    init_weights(*res.discriminator, model_seed(cfg, stage, "discriminator"));
  }
  Adam<float> g_opt(cfg.adam), d_opt(cfg.adam);
  const auto started = std::chrono::steady_clock::now();
  if (!opts.out_dir.empty()) fs::create_directories(opts.out_dir);
  const std::string prefix = std::string(stage_name(stage));

  std::vector<std::size_t> order(train.size());
  for (std::size_t e = 1; e <= epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = derive_rng(cfg.seed, prefix + "/epoch", e);
    for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[rng() % (i + 1)]);

    EpochRecord rec;
    rec.epoch = e;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size, ++batches) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      std::vector<Sample> batch;
      for (std::size_t i = b0; i < b1; ++i) batch.push_back(train.get(order[i]));
      try {
        std::vector<Tensor<float>> inputs;
        std::vector<const Tensor<float>*> xin, tin;
        for (const auto& s : batch) inputs.push_back(stage == Stage::Autoencoder ? noisy_input(s, cfg, e) : s.image);
        for (std::size_t k = 0; k < batch.size(); ++k) {
          xin.push_back(&inputs[k]);
          tin.push_back(&stage_target(batch[k], stage));
        }
        const Tensor<float> x = stack(xin), target = stack(tin);

        Tape<float> tape;
        Var fake = G.forward(tape, tape.constant(x), true).output;
        Var adv{};
        if (adversarial) {
          Disc& D = *res.discriminator;
          D.params().zero_grad();
          Tape<float> dt;
          Var pr = D.forward(dt, dt.constant(target), true);
          Var pf = D.forward(dt, dt.constant(tape.value(fake)), true);
          Var dl = discriminator_loss(dt, pr, pf);
          dt.backward(dl);
          d_opt.step(D.params().pointers());
          rec.d_loss += dt.value(dl)[0];
          adv = generator_adversarial_loss(tape, D.forward(tape, fake, false), cfg.generator_loss);
          rec.adv_loss += tape.value(adv)[0];
        }
        Var reg = stage == Stage::Segmentation ? l1_loss(tape, fake, target) : l2_regression_loss(tape, fake, target);
        Var obj = adversarial ? generator_objective(tape, adv, reg, lambda, true) : reg;
        G.params().zero_grad();
        tape.backward(obj);
        g_opt.step(G.params().pointers());
        rec.reg_loss += tape.value(reg)[0];
        rec.g_loss += tape.value(obj)[0];
      } catch (const NumericalError& err) {
        throw NumericalError(prefix + ": epoch " + std::to_string(e) + ", batch " + std::to_string(batches + 1) + ": " + err.what());
      }
    }
    const double nb = static_cast<double>(batches);
    rec.g_loss /= nb;
    rec.reg_loss /= nb;
    rec.adv_loss /= nb;
    rec.d_loss /= nb;
    if (!val.empty() && cfg.eval_every && (e % cfg.eval_every == 0 || e == epochs))
      rec.val = mean_values(evaluate_stage(stage, G, val, cfg, "val"));
    if (opts.log) {
      *opts.log << prefix << " epoch " << e << "/" << epochs << " g " << rec.g_loss << " reg " << rec.reg_loss;
      if (adversarial) *opts.log << " d " << rec.d_loss;
      for (const auto& [k, v] : rec.val) *opts.log << " val_" << k << " " << v;
      *opts.log << "\n";
    }
    res.report.epochs.push_back(std::move(rec));
    if (!opts.out_dir.empty() && cfg.checkpoint_every && e % cfg.checkpoint_every == 0 && e != epochs) {
      char name[64];
      std::snprintf(name, sizeof name, "%s_generator_e%04zu.ckpt", prefix.c_str(), e);
      G.save(opts.out_dir / name);
    }
  }
  res.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  if (!opts.out_dir.empty()) {
    const fs::path ckpt = opts.out_dir / (prefix + "_generator.ckpt");
    G.save(ckpt);
    if (res.discriminator) res.discriminator->save(opts.out_dir / (prefix + "_discriminator.ckpt"));
    res.report.checkpoint = ckpt.filename().string();
    write_file_atomic(opts.out_dir / (prefix + "_report.jsonl"), report_jsonl(res.report));
  }
  if (opts.log) *opts.log << prefix << " finished in " << res.report.wall_seconds << " s\n";
  return res;
}

inline StageResult train_autoencoder(const TrainingSet& train, const std::vector<Sample>& val, const TrainConfig& cfg,
                                     const StageOptions& opts = {}) {
  return train_stage(Stage::Autoencoder, train, val, cfg, nullptr, opts);
}

/// init: null for a fresh generator, else an autoencoder to transfer from.
inline StageResult train_depth(const TrainingSet& train, const std::vector<Sample>& val, const TrainConfig& cfg, const Gen* init = nullptr,
                               const StageOptions& opts = {}) {
  return train_stage(Stage::Depth, train, val, cfg, init, opts, "autoencoder");
}

/// init: null for a fresh generator, else a depth generator to transfer from.
inline StageResult train_segmentation(const TrainingSet& train, const std::vector<Sample>& val, const TrainConfig& cfg,
                                      const Gen* init = nullptr, const StageOptions& opts = {}) {
  return train_stage(Stage::Segmentation, train, val, cfg, init, opts, "depth");
}

// ---------------------------------------------------------------------------
// Cross-validation

struct FoldResult {
  std::size_t fold = 0;
  std::vector<std::string> train_ids, val_ids;
  std::size_t train_samples = 0;   // after augmentation
  std::size_t val_augmented = 0;   // augmented samples that reached validation; always 0
  std::vector<StageReport> reports;
  std::vector<MetricRow> rows;
  std::map<std::string, double> means;
  std::shared_ptr<Gen> depth_generator, seg_generator, ae_generator;
};

struct CrossValResult {
  Stage stage = Stage::Depth;
  FoldPlan plan;
  std::vector<FoldResult> folds;
  MetricReport per_image;     // groups fold_<k>
  MetricReport fold_summary;  // group "folds": one row per fold holding that fold's means
};

struct CrossValOptions {
  fs::path out_dir;
  std::ostream* log = nullptr;
  std::size_t workers = 1;
};

/// Worker count from FUNDUS_WORKERS, default 1.
inline std::size_t workers_from_env() {
  const char* v = std::getenv("FUNDUS_WORKERS");
  if (!v || !*v) return 1;
  const std::size_t n = detail::parse_uint<std::size_t>("FUNDUS_WORKERS", v);
  return std::max<std::size_t>(n, 1);
}

inline std::vector<Sample> select(const std::vector<Sample>& all, const std::vector<std::string>& ids) {
  std::map<std::string, const Sample*> by_id;
  for (const auto& s : all) by_id[s.id] = &s;
  std::vector<Sample> out;
  for (const auto& id : ids) out.push_back(*by_id.at(id));
  return out;
}

inline std::string fold_name(std::size_t f) { return "fold_" + std::to_string(f); }

/// One fold of the configured stage chain, evaluated on its validation split.
inline FoldResult run_fold(const std::vector<Sample>& data, const FoldPlan& plan, std::size_t f, const TrainConfig& cfg, Stage stage,
                           const CrossValOptions& opts) {
  std::vector<std::string> ids;
  for (const auto& s : data) ids.push_back(s.id);
  FoldResult fr;
  fr.fold = f;
  fr.train_ids = plan.training(f, ids);
  fr.val_ids = plan.validation(f, ids);
  const std::vector<Sample> train = select(data, fr.train_ids);
  const std::vector<Sample> val = select(data, fr.val_ids);
  const TrainingSet ts(train, cfg.augment_config(f));
  fr.train_samples = ts.size();
  for (const auto& s : val)
    if (s.source.kind == SourceKind::Augmented) ++fr.val_augmented;

  StageOptions so;
  so.log = opts.log;
  if (!opts.out_dir.empty()) so.out_dir = opts.out_dir / fold_name(f);

  std::shared_ptr<Gen> ae, depth, seg;
  const bool need_depth = stage == Stage::Depth || (stage == Stage::Segmentation && cfg.seg_init == SegInit::Depth);
  const bool need_ae = stage == Stage::Autoencoder || (need_depth && cfg.pretrain_autoencoder && cfg.ae_epochs > 0);
  if (need_ae) {
    auto r = train_autoencoder(ts, val, cfg, so);
    fr.reports.push_back(std::move(r.report));
    ae = std::move(r.generator);
  }
  if (need_depth) {
    auto r = train_depth(ts, val, cfg, ae.get(), so);
    fr.reports.push_back(std::move(r.report));
    depth = std::move(r.generator);
  }
  if (stage == Stage::Segmentation) {
    auto r = train_segmentation(ts, val, cfg, cfg.seg_init == SegInit::Depth ? depth.get() : nullptr, so);
    fr.reports.push_back(std::move(r.report));
    seg = std::move(r.generator);
  }
  const Gen& final_g = stage == Stage::Autoencoder ? *ae : stage == Stage::Depth ? *depth : *seg;
  fr.rows = evaluate_stage(stage, final_g, val, cfg, fold_name(f));
  fr.means = mean_values(fr.rows);
  fr.ae_generator = ae;
  fr.depth_generator = depth;
  fr.seg_generator = seg;
  if (!so.out_dir.empty()) write_file_atomic(so.out_dir / "metrics.csv", report_csv(aggregate(fr.rows)));
  return fr;
}

template <typename E>
[[noreturn]] void rethrow_annotated(const E& e, std::size_t fold) {
  throw E(fold_name(fold) + ": " + e.what());
}

inline nlohmann::ordered_json cross_val_json(const CrossValResult& cv) {
  nlohmann::ordered_json folds = nlohmann::ordered_json::array();
  for (const auto& f : cv.folds) {
    nlohmann::ordered_json m = nlohmann::ordered_json::object();
    for (const auto& [k, v] : f.means) m[k] = v;
    folds.push_back({{"fold", f.fold}, {"val_ids", f.val_ids}, {"train_samples", f.train_samples},
                     {"val_augmented", f.val_augmented}, {"means", m}});
  }
  nlohmann::ordered_json agg = nlohmann::ordered_json::object();
  if (auto it = cv.fold_summary.groups.find("folds"); it != cv.fold_summary.groups.end())
    for (const auto& [k, s] : it->second) agg[k] = {{"mean", s.mean}, {"std", s.std}, {"n", s.n}};
  return {{"stage", stage_name(cv.stage)}, {"k", cv.plan.k}, {"seed", cv.plan.seed}, {"folds", folds},
          {"aggregate", agg}, {"flagged_events", cv.per_image.flag_count()}};
}

/// k-fold protocol: training splits are augmented, validation images never are.
/// Folds run on `workers` threads; results do not depend on the worker count.
inline CrossValResult cross_validate(const std::vector<Sample>& raw, const TrainConfig& cfg, Stage stage, const CrossValOptions& opts = {}) {
  cfg.validate();
  const std::vector<Sample> data = prepare_samples(raw, cfg);
  std::vector<std::string> ids;
  for (const auto& s : data) ids.push_back(s.id);
  CrossValResult cv;
  cv.stage = stage;
  cv.plan = make_folds(ids, cfg.folds, cfg.seed);
  cv.folds.resize(cfg.folds);
  std::vector<std::exception_ptr> errors(cfg.folds);

  auto work = [&](std::size_t f) {
    try {
      try {
        cv.folds[f] = run_fold(data, cv.plan, f, cfg, stage, opts);
      } catch (const NumericalError& e) {
        rethrow_annotated(e, f);
      } catch (const DataError& e) {
        rethrow_annotated(e, f);
      } catch (const ConfigError& e) {
        rethrow_annotated(e, f);
      } catch (const ShapeError& e) {
        rethrow_annotated(e, f);
      }
    } catch (...) {
      errors[f] = std::current_exception();
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(opts.workers, 1, cfg.folds);
  if (workers == 1) {
    for (std::size_t f = 0; f < cfg.folds; ++f) work(f);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t f; (f = next++) < cfg.folds;) work(f);
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<MetricRow> all, per_fold;
  for (const auto& f : cv.folds) {
    all.insert(all.end(), f.rows.begin(), f.rows.end());
    per_fold.push_back(MetricRow{"folds", fold_name(f.fold), f.means, {}});
  }
  cv.per_image = aggregate(all);
  cv.fold_summary = aggregate(per_fold);
  if (!opts.out_dir.empty()) {
    fs::create_directories(opts.out_dir);
    write_file_atomic(opts.out_dir / "per_image.csv", report_csv(cv.per_image));
    write_file_atomic(opts.out_dir / "summary.json", cross_val_json(cv).dump(2) + "\n");
    std::string assign;
    for (const auto& [id, f] : cv.plan.assignments) assign += id + " " + std::to_string(f) + "\n";
    write_file_atomic(opts.out_dir / "folds.txt", assign);
  }
  return cv;
}

}  // namespace fundus
