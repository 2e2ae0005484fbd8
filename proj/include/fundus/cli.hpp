#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fundus/config.hpp"
#include "fundus/data.hpp"
#include "fundus/errors.hpp"
#include "fundus/image_io.hpp"
#include "fundus/io_util.hpp"
#include "fundus/metrics.hpp"
#include "fundus/networks.hpp"
#include "fundus/plots.hpp"
#include "fundus/synth.hpp"
#include "fundus/training.hpp"

namespace fundus::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

namespace detail {

struct Common {
  std::string config, data, out;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
};

inline void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "Config file (key = value lines)");
  sub->add_option("--data", c.data, "Dataset root")->required();
  sub->add_option("--out", c.out, "Output directory")->required();
  c.seed_opt = sub->add_option("--seed", c.seed, "Override the config seed");
}

inline TrainConfig resolve_config(const Common& c) {
  TrainConfig cfg = c.config.empty() ? TrainConfig{} : load_config(c.config);
  if (c.seed_opt && c.seed_opt->count()) cfg.seed = c.seed;
  cfg.validate();
  return cfg;
}

/// Every regular file under root except the manifest, as sorted relative paths.
inline std::vector<std::string> list_artifacts(const fs::path& root) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), root).generic_string();
    if (rel == "manifest.json" || e.path().extension() == ".tmp") continue;
    out.push_back(rel);
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline void write_manifest(const fs::path& root, const std::string& command, std::uint64_t seed, const TrainConfig* cfg) {
  fs::create_directories(root);
  if (cfg) write_file_atomic(root / "config.txt", config_to_text(*cfg));
  nlohmann::ordered_json j{{"command", command}, {"seed", seed}};
  if (cfg) j["config_hash"] = config_hash(*cfg);
  j["artifacts"] = list_artifacts(root);
  write_file_atomic(root / "manifest.json", j.dump(2) + "\n");
}

inline Stage parse_stage(const std::string& s) {
  if (s == "ae" || s == "autoencoder") return Stage::Autoencoder;
  if (s == "depth") return Stage::Depth;
  if (s == "seg" || s == "segmentation") return Stage::Segmentation;
  throw ConfigError("unknown stage '" + s + "' (expected ae, depth or seg)");
}

inline LoadOptions load_options(Stage s) {
  LoadOptions o;
  o.require_depth = s == Stage::Depth;
  o.require_masks = s == Stage::Segmentation;
  return o;
}

inline std::unique_ptr<Gen> load_generator(const TrainConfig& cfg, ModelRole role, const fs::path& ckpt) {
  if (!fs::exists(ckpt)) throw DataError("checkpoint not found: " + ckpt.string());
  auto g = std::make_unique<Gen>(cfg.generator_spec(role));
  g->load(ckpt);
  return g;
}

inline std::vector<Sample> optional_val(const std::string& root, Stage stage, const TrainConfig& cfg) {
  if (root.empty()) return {};
  return prepare_samples(load_dataset(root, load_options(stage)), cfg);
}

/// Predictions in dataset layout: depth/<id>.pgm (raw, unnormalized) or masks/<id>_{disc,cup}.pgm.
inline Tensor<float> read_prediction(const fs::path& root, const std::string& id, Stage stage) {
  if (stage == Stage::Depth) {
    const Raster r = read_raster(root / "depth" / (id + ".pgm"));
    if (r.channels != 1) throw DataError(id + ": predicted depth must be single channel");
    return raster_to_tensor(r);
  }
  const Raster d = read_raster(root / "masks" / (id + "_disc.pgm"));
  const Raster c = read_raster(root / "masks" / (id + "_cup.pgm"));
  if (d.channels != 1 || c.channels != 1 || d.width != c.width || d.height != c.height)
    throw DataError(id + ": predicted masks must be matching single-channel planes");
  Tensor<float> m({2, d.height, d.width});
  const Tensor<float> td = raster_to_tensor(d), tc = raster_to_tensor(c);
  std::copy(td.data().begin(), td.data().end(), m.data().begin());
  std::copy(tc.data().begin(), tc.data().end(), m.data().begin() + td.size());
  return m;
}

inline void write_prediction(const fs::path& root, const std::string& id, Stage stage, const Tensor<float>& pred) {
  if (stage == Stage::Depth) {
    write_pnm(root / "depth" / (id + ".pgm"), tensor_to_raster(pred, 65535));
    return;
  }
  Tensor<float> hard = pred;
  binarize_inplace(hard);
  write_pnm(root / "masks" / (id + "_disc.pgm"), tensor_to_raster(channel(hard, 0), 255));
  write_pnm(root / "masks" / (id + "_cup.pgm"), tensor_to_raster(channel(hard, 1), 255));
}

inline MetricRow eval_row(Stage stage, const std::string& id, const Tensor<float>& pred, const Tensor<float>& gt) {
  if (stage == Stage::Depth) {
    MetricRow row = depth_row("eval", id, DepthMetrics{rmse(pred, gt), 0.0});
    try {
      row.values["r"] = pearson_r(pred, gt);
    } catch (const DataError&) {
      row.values["r"] = 0.0;
      row.flags.push_back("r:undefined");
    }
    return row;
  }
  return seg_row("eval", id, seg_metrics(pred, gt));
}

}  // namespace detail

/// Runs one subcommand. args excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fundus optic nerve head depth and segmentation pipeline", "fundus"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");
  const std::string keys = config_help();
  const std::string env_note = "Environment: FUNDUS_WORKERS sets the cross-validation worker count (default 1).\n";

  // synth
  std::size_t synth_count = 30, synth_size = 64;
  std::uint64_t synth_seed = 0;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with exact ground truth");
  synth->add_option("--count", synth_count, "Number of samples")->capture_default_str();
  synth->add_option("--size", synth_size, "Image extent in pixels")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Generator seed")->capture_default_str();
  synth->add_option("--out", synth_out, "Output dataset root")->required();

  // stage training
  detail::Common ae_c, depth_c, seg_c, cv_c;
  std::string ae_val, depth_val, seg_val, depth_init, seg_init;
  auto* ae = app.add_subcommand("pretrain-ae", "Denoising autoencoder pretraining on all images");
  detail::add_common(ae, ae_c);
  ae->add_option("--val", ae_val, "Optional validation dataset root");
  auto* dep = app.add_subcommand("train-depth", "Train the depth GAN");
  detail::add_common(dep, depth_c);
  dep->add_option("--val", depth_val, "Optional validation dataset root");
  dep->add_option("--init", depth_init, "Autoencoder checkpoint to start from");
  auto* seg = app.add_subcommand("train-seg", "Train the segmentation GAN");
  detail::add_common(seg, seg_c);
  seg->add_option("--val", seg_val, "Optional validation dataset root");
  seg->add_option("--init", seg_init, "Depth generator checkpoint (required when seg_init = depth)");

  std::string cv_stage = "depth";
  auto* cv = app.add_subcommand("cross-validate", "k-fold cross-validation of one stage and its prerequisites");
  detail::add_common(cv, cv_c);
  cv->add_option("--stage", cv_stage, "ae, depth or seg")->capture_default_str();

  // eval
  std::string ev_pred, ev_gt, ev_task, ev_ckpt, ev_config, ev_out;
  auto* ev = app.add_subcommand("eval", "Score predictions (or a checkpoint) against ground truth");
  ev->add_option("--gt", ev_gt, "Ground-truth dataset root")->required();
  ev->add_option("--task", ev_task, "depth or seg")->required();
  auto* ev_pred_opt = ev->add_option("--pred", ev_pred, "Predictions in dataset layout");
  auto* ev_ckpt_opt = ev->add_option("--checkpoint", ev_ckpt, "Generator checkpoint to run on --gt images");
  ev_pred_opt->excludes(ev_ckpt_opt);
  ev->add_option("--config", ev_config, "Config describing the checkpoint's network");
  ev->add_option("--out", ev_out, "Directory for per-image CSV, summary and predictions");

  // inspect-transfer
  std::string it_source, it_from = "depth", it_to = "seg", it_config, it_out;
  auto* it = app.add_subcommand("inspect-transfer", "Audit weight transfer between generator roles");
  it->add_option("--source", it_source, "Source generator checkpoint")->required();
  it->add_option("--from", it_from, "Source stage: ae or depth")->capture_default_str();
  it->add_option("--to", it_to, "Target stage: depth or seg")->capture_default_str();
  it->add_option("--config", it_config, "Config describing both networks");
  it->add_option("--out", it_out, "Directory for transfer.json");

  // export-plots
  std::vector<std::string> ep_reports;
  std::string ep_data, ep_pred, ep_task = "depth", ep_out;
  auto* ep = app.add_subcommand("export-plots", "Loss-curve CSVs and input | prediction | ground-truth panels");
  ep->add_option("--report", ep_reports, "Stage report (.jsonl); repeatable")->required();
  ep->add_option("--data", ep_data, "Dataset root for panels");
  ep->add_option("--pred", ep_pred, "Predictions in dataset layout for panels");
  ep->add_option("--task", ep_task, "depth or seg")->capture_default_str();
  ep->add_option("--out", ep_out, "Output directory")->required();

  for (auto* s : app.get_subcommands({})) s->footer(keys + env_note);
  app.footer(keys + env_note);

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, err, err);
    err << "usage: fundus <synth|pretrain-ae|train-depth|train-seg|cross-validate|eval|inspect-transfer|export-plots> [options]\n";
    return kUsage;
  }

  try {
    if (*synth) {
      const SynthDataset ds = synth_dataset(synth_count, synth_size, synth_seed);
      save_dataset(synth_out, ds.samples, ds.params_text());
      detail::write_manifest(synth_out, "synth", synth_seed, nullptr);
      out << "wrote " << ds.samples.size() << " samples to " << synth_out << "\n";
      return kOk;
    }

    auto train_one = [&](Stage stage, const detail::Common& c, const std::string& val_root, const Gen* init) {
      const TrainConfig cfg = detail::resolve_config(c);
      const auto train = prepare_samples(load_dataset(c.data, detail::load_options(stage)), cfg);
      const auto val = detail::optional_val(val_root, stage, cfg);
      StageOptions so;
      so.out_dir = c.out;
      so.log = &err;
      const TrainingSet ts(train, cfg.augment_config(0));
      const StageResult r = train_stage(stage, ts, val, cfg, init, so,
                                        stage == Stage::Depth ? "autoencoder" : stage == Stage::Segmentation ? "depth" : "");
      detail::write_manifest(c.out, ae->parsed() ? "pretrain-ae" : dep->parsed() ? "train-depth" : "train-seg", cfg.seed, &cfg);
      out << stage_name(stage) << ": " << r.report.epochs.size() << " epochs, checkpoint " << (fs::path(c.out) / r.report.checkpoint).string()
          << "\n";
      return kOk;
    };
    if (*ae) return train_one(Stage::Autoencoder, ae_c, ae_val, nullptr);
    if (*dep) {
      std::unique_ptr<Gen> init;
      if (!depth_init.empty()) init = detail::load_generator(detail::resolve_config(depth_c), ModelRole::Autoencoder, depth_init);
      return train_one(Stage::Depth, depth_c, depth_val, init.get());
    }
    if (*seg) {
      const TrainConfig cfg = detail::resolve_config(seg_c);
      std::unique_ptr<Gen> init;
      if (cfg.seg_init == SegInit::Depth) {
        if (seg_init.empty()) throw ConfigError("train-seg: seg_init = depth requires --init <depth checkpoint>");
        init = detail::load_generator(cfg, ModelRole::DepthGenerator, seg_init);
      } else if (!seg_init.empty()) {
        throw ConfigError("train-seg: --init given but seg_init = scratch");
      }
      return train_one(Stage::Segmentation, seg_c, seg_val, init.get());
    }

    if (*cv) {
      const Stage stage = detail::parse_stage(cv_stage);
      const TrainConfig cfg = detail::resolve_config(cv_c);
      LoadOptions lo = detail::load_options(stage);
      if (stage == Stage::Segmentation && cfg.seg_init == SegInit::Depth) lo.require_depth = true;
      const auto data = load_dataset(cv_c.data, lo);
      CrossValOptions o;
      o.out_dir = cv_c.out;
      o.log = &err;
      o.workers = workers_from_env();
      const CrossValResult res = cross_validate(data, cfg, stage, o);
      detail::write_manifest(cv_c.out, "cross-validate", cfg.seed, &cfg);
      out << report_table(res.fold_summary);
      return kOk;
    }

    if (*ev) {
      const Stage stage = detail::parse_stage(ev_task);
      if (stage == Stage::Autoencoder) throw ConfigError("eval: task must be depth or seg");
      if (ev_pred.empty() == ev_ckpt.empty()) throw ConfigError("eval: give exactly one of --pred or --checkpoint");
      auto gt = load_dataset(ev_gt, detail::load_options(stage));
      TrainConfig cfg = ev_config.empty() ? TrainConfig{} : load_config(ev_config);
      std::unique_ptr<Gen> g;
      if (!ev_ckpt.empty()) {
        g = detail::load_generator(cfg, generator_role(stage), ev_ckpt);
        gt = prepare_samples(gt, cfg);
      }
      std::vector<MetricRow> rows;
      for (const auto& s : gt) {
        const Tensor<float>& target = stage_target(s, stage);
        const Tensor<float> pred = g ? predict_one(*g, s.image) : detail::read_prediction(ev_pred, s.id, stage);
        if (pred.shape() != target.shape())
          throw DataError(s.id + ": prediction " + shape_str(pred.shape()) + " does not match ground truth " + shape_str(target.shape()));
        if (g && !ev_out.empty()) detail::write_prediction(fs::path(ev_out) / "pred", s.id, stage, pred);
        rows.push_back(detail::eval_row(stage, s.id, pred, target));
      }
      const MetricReport rep = aggregate(rows);
      out << report_table(rep);
      if (!ev_out.empty()) {
        write_file_atomic(fs::path(ev_out) / "per_image.csv", report_csv(rep));
        write_file_atomic(fs::path(ev_out) / "summary.json", report_summary_json(rep).dump(2) + "\n");
        detail::write_manifest(ev_out, "eval", cfg.seed, ev_ckpt.empty() ? nullptr : &cfg);
      }
      return kOk;
    }

    if (*it) {
      const Stage from = detail::parse_stage(it_from), to = detail::parse_stage(it_to);
      const TrainConfig cfg = it_config.empty() ? TrainConfig{} : load_config(it_config);
      const auto source = detail::load_generator(cfg, generator_role(from), it_source);
      std::optional<TransferAudit> audit;
      const auto target = make_generator(to, cfg, source.get(), &audit);
      std::size_t identical = 0;
      for (const auto& id : audit->copied)
        identical += std::ranges::equal(source->params().at(id).value.data(), target->params().at(id).value.data());
      out << "copied " << audit->copied.size() << " parameters (" << identical << " bitwise equal), skipped " << audit->skipped.size() << "\n";
      for (const auto& l : audit->skipped_layers) out << "skipped layer " << l << "\n";
      if (!it_out.empty()) {
        nlohmann::ordered_json j{{"from", stage_name(from)},
                                 {"to", stage_name(to)},
                                 {"copied", audit->copied},
                                 {"skipped", audit->skipped},
                                 {"skipped_layers", audit->skipped_layers},
                                 {"bitwise_equal", identical}};
        write_file_atomic(fs::path(it_out) / "transfer.json", j.dump(2) + "\n");
        detail::write_manifest(it_out, "inspect-transfer", cfg.seed, &cfg);
      }
      return identical == audit->copied.size() ? kOk : kData;
    }

    if (*ep) {
      const fs::path root = ep_out;
      for (const auto& r : ep_reports) {
        if (!fs::exists(r)) throw DataError("report not found: " + r);
        const auto epochs = parse_report_jsonl(read_file(r));
        write_file_atomic(root / "curves" / (fs::path(r).stem().string() + ".csv"), curve_csv(epochs));
      }
      if (!ep_data.empty() || !ep_pred.empty()) {
        if (ep_data.empty() || ep_pred.empty()) throw ConfigError("export-plots: panels need both --data and --pred");
        const Stage stage = detail::parse_stage(ep_task);
        if (stage == Stage::Autoencoder) throw ConfigError("export-plots: task must be depth or seg");
        for (const auto& s : load_dataset(ep_data, detail::load_options(stage))) {
          const Tensor<float> pred = detail::read_prediction(ep_pred, s.id, stage);
          const Tensor<float>& gt = stage_target(s, stage);
          if (pred.shape() != gt.shape()) throw DataError(s.id + ": prediction does not match ground truth");
          const Raster p = stage == Stage::Depth ? render_depth(pred) : render_masks(pred);
          const Raster t = stage == Stage::Depth ? render_depth(gt) : render_masks(gt);
          write_png(root / "panels" / (s.id + ".png"), panel({render_image(s.image), p, t}));
        }
      }
      detail::write_manifest(root, "export-plots", 0, nullptr);
      return kOk;
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalError& e) {
    err << "numerical abort: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, out, err);
}

}  // namespace fundus::cli
