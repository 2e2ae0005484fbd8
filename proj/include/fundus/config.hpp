#pragma once

// Run configuration: a flat `key = value` file. Every key has a default.

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fundus/adam.hpp"
#include "fundus/augment.hpp"
#include "fundus/errors.hpp"
#include "fundus/io_util.hpp"
#include "fundus/losses.hpp"
#include "fundus/networks.hpp"
#include "fundus/rng.hpp"

namespace fundus {

enum class SegInit { Depth, Scratch };

struct TrainConfig {
  // schedule
  std::size_t epochs = 200;
  std::size_t ae_epochs = 200;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::size_t eval_every = 1;        // validation cadence in epochs; 0 disables
  // objective
  bool adversarial = true;
  double depth_lambda = 100.0;
  double seg_lambda = 100.0;
  GeneratorLossForm generator_loss = GeneratorLossForm::NonSaturating;
  AdamConfig adam{};
  // generator
  std::size_t base_width = 32;
  std::size_t depth_levels = 4;
  std::size_t max_width = 256;
  bool residual = true;
  std::size_t res_blocks = 2;
  // discriminator
  std::size_t disc_blocks = 4;
  std::size_t disc_base_width = 32;
  double disc_leaky_slope = 0.2;
  // data
  double noise_sigma = 0.1;
  std::size_t crop_size = 128;  // 0: use images as given
  std::size_t augment_factor = 100;
  double zoom_min = 0.9, zoom_max = 1.1;
  double gamma_min = 0.7, gamma_max = 1.4;
  bool rot90 = true;
  double fine_rotation_deg = 15.0;
  bool flip_horizontal = true, flip_vertical = true;
  // protocol
  std::size_t folds = 5;
  bool pretrain_autoencoder = true;
  SegInit seg_init = SegInit::Depth;

  GeneratorSpec generator_spec(ModelRole role) const {
    GeneratorSpec g;
    g.base_width = base_width;
    g.depth_levels = depth_levels;
    g.max_width = max_width;
    g.residual = residual;
    g.res_blocks = res_blocks;
    return generator_spec_for(role, g);
  }
  DiscriminatorSpec discriminator_spec(ModelRole role) const {
    DiscriminatorSpec d;
    d.input_channels = role_channels(role).in;
    d.conv_blocks = disc_blocks;
    d.base_width = disc_base_width;
    d.max_width = std::max(max_width, disc_base_width);
    d.leaky_slope = disc_leaky_slope;
    return d;
  }
  AugmentConfig augment_config(std::uint64_t stream) const {
    AugmentConfig a;
    a.factor = augment_factor;
    a.zoom_min = zoom_min;
    a.zoom_max = zoom_max;
    a.gamma_min = gamma_min;
    a.gamma_max = gamma_max;
    a.rot90 = rot90;
    a.fine_rotation_deg = fine_rotation_deg;
    a.flip_horizontal = flip_horizontal;
    a.flip_vertical = flip_vertical;
    a.seed = splitmix64(seed ^ splitmix64(stream));
    return a;
  }

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (depth_lambda < 0 || seg_lambda < 0) throw ConfigError("lambda must be >= 0");
    if (!(adam.lr > 0)) throw ConfigError("lr must be positive");
    if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1)) throw ConfigError("Adam betas must lie in [0,1)");
    if (!(adam.epsilon > 0)) throw ConfigError("adam_epsilon must be positive");
    if (base_width < 1 || max_width < base_width) throw ConfigError("need 1 <= base_width <= max_width");
    if (depth_levels < 1) throw ConfigError("depth_levels must be >= 1");
    if (disc_blocks < 1 || disc_base_width < 1) throw ConfigError("discriminator needs at least one block of width >= 1");
    if (!(disc_leaky_slope > 0 && disc_leaky_slope < 1)) throw ConfigError("disc_leaky_slope must lie in (0,1)");
    if (!(noise_sigma >= 0)) throw ConfigError("noise_sigma must be >= 0");
    if (crop_size && crop_size % (std::size_t{1} << depth_levels) != 0)
      throw ConfigError("crop_size must be divisible by 2^depth_levels");
    if (folds < 2) throw ConfigError("folds must be >= 2");
    augment_config(0).validate();
  }
};

/// One documented configuration key.
struct ConfigKey {
  std::string name;
  std::string doc;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // prefer the shortest representation that round-trips
  for (int prec = 1; prec < 17; ++prec) {
    char shorter[40];
    std::snprintf(shorter, sizeof shorter, "%.*g", prec, v);
    if (std::strtod(shorter, nullptr) == v) return shorter;
  }
  return buf;
}

inline double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(d)) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return d;
}

template <typename U>
U parse_uint(const std::string& key, const std::string& v) {
  U out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

#define FUNDUS_KEY_SIZE(field, doc)                                                                       \
  ConfigKey{#field, doc, [](const TrainConfig& c) { return std::to_string(c.field); },                    \
            [](TrainConfig& c, const std::string& v) { c.field = detail::parse_uint<std::size_t>(#field, v); }}
#define FUNDUS_KEY_DOUBLE(name, field, doc)                                                               \
  ConfigKey{name, doc, [](const TrainConfig& c) { return detail::fmt_double(c.field); },                  \
            [](TrainConfig& c, const std::string& v) { c.field = detail::parse_double(name, v); }}
#define FUNDUS_KEY_BOOL(field, doc)                                                                       \
  ConfigKey{#field, doc, [](const TrainConfig& c) { return std::string(c.field ? "true" : "false"); },    \
            [](TrainConfig& c, const std::string& v) { c.field = detail::parse_bool(#field, v); }}

/// Every configuration key in canonical order.
inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      FUNDUS_KEY_SIZE(epochs, "training epochs for the depth and segmentation stages"),
      FUNDUS_KEY_SIZE(ae_epochs, "epochs of denoising-autoencoder pretraining"),
      FUNDUS_KEY_SIZE(batch_size, "samples per optimizer step"),
      ConfigKey{"seed", "run seed; every random stream derives from it",
                [](const TrainConfig& c) { return std::to_string(c.seed); },
                [](TrainConfig& c, const std::string& v) { c.seed = detail::parse_uint<std::uint64_t>("seed", v); }},
      FUNDUS_KEY_SIZE(checkpoint_every, "write an extra checkpoint every N epochs (0: final only)"),
      FUNDUS_KEY_SIZE(eval_every, "validate every N epochs (0: never during training)"),
      FUNDUS_KEY_BOOL(adversarial, "train with a discriminator (false: pure regression objective)"),
      FUNDUS_KEY_DOUBLE("depth_lambda", depth_lambda, "weight of the L2 depth term against the adversarial term"),
      FUNDUS_KEY_DOUBLE("seg_lambda", seg_lambda, "weight of the L1 mask term against the adversarial term"),
      ConfigKey{"generator_loss", "adversarial generator term: non_saturating (-log D(G)) or minimax (log(1-D(G)))",
                [](const TrainConfig& c) {
                  return std::string(c.generator_loss == GeneratorLossForm::NonSaturating ? "non_saturating" : "minimax");
                },
                [](TrainConfig& c, const std::string& v) {
                  if (v == "non_saturating") c.generator_loss = GeneratorLossForm::NonSaturating;
                  else if (v == "minimax") c.generator_loss = GeneratorLossForm::Minimax;
                  else throw ConfigError("generator_loss: expected non_saturating or minimax, got '" + v + "'");
                }},
      FUNDUS_KEY_DOUBLE("lr", adam.lr, "Adam learning rate"),
      FUNDUS_KEY_DOUBLE("beta1", adam.beta1, "Adam first-moment decay"),
      FUNDUS_KEY_DOUBLE("beta2", adam.beta2, "Adam second-moment decay"),
      FUNDUS_KEY_DOUBLE("adam_epsilon", adam.epsilon, "Adam denominator epsilon (added after the square root)"),
      FUNDUS_KEY_SIZE(base_width, "generator channels at the first scale"),
      FUNDUS_KEY_SIZE(depth_levels, "generator down/upsampling stages"),
      FUNDUS_KEY_SIZE(max_width, "channel cap for generator and discriminator"),
      FUNDUS_KEY_BOOL(residual, "residual blocks at every generator scale"),
      FUNDUS_KEY_SIZE(res_blocks, "residual blocks per scale when residual is on"),
      FUNDUS_KEY_SIZE(disc_blocks, "stride-2 conv blocks in the discriminator"),
      FUNDUS_KEY_SIZE(disc_base_width, "discriminator channels in the first block"),
      FUNDUS_KEY_DOUBLE("disc_leaky_slope", disc_leaky_slope, "negative slope of the discriminator leaky relu"),
      FUNDUS_KEY_DOUBLE("noise_sigma", noise_sigma, "Gaussian noise std for autoencoder inputs"),
      FUNDUS_KEY_SIZE(crop_size, "square ROI crop side in pixels (0: no crop)"),
      FUNDUS_KEY_SIZE(augment_factor, "augmented copies per training image (copy 0 is the original)"),
      FUNDUS_KEY_DOUBLE("zoom_min", zoom_min, "lower zoom bound"),
      FUNDUS_KEY_DOUBLE("zoom_max", zoom_max, "upper zoom bound"),
      FUNDUS_KEY_DOUBLE("gamma_min", gamma_min, "lower gamma-jitter bound (image only)"),
      FUNDUS_KEY_DOUBLE("gamma_max", gamma_max, "upper gamma-jitter bound (image only)"),
      FUNDUS_KEY_BOOL(rot90, "random quarter turns"),
      FUNDUS_KEY_DOUBLE("fine_rotation_deg", fine_rotation_deg, "uniform fine rotation range in degrees (+-)"),
      FUNDUS_KEY_BOOL(flip_horizontal, "random left-right flips"),
      FUNDUS_KEY_BOOL(flip_vertical, "random up-down flips"),
      FUNDUS_KEY_SIZE(folds, "cross-validation folds"),
      FUNDUS_KEY_BOOL(pretrain_autoencoder, "initialize the depth generator from a denoising autoencoder"),
      ConfigKey{"seg_init", "segmentation generator initialization: depth (transfer) or scratch",
                [](const TrainConfig& c) { return std::string(c.seg_init == SegInit::Depth ? "depth" : "scratch"); },
                [](TrainConfig& c, const std::string& v) {
                  if (v == "depth") c.seg_init = SegInit::Depth;
                  else if (v == "scratch") c.seg_init = SegInit::Scratch;
                  else throw ConfigError("seg_init: expected depth or scratch, got '" + v + "'");
                }},
  };
  return keys;
}

#undef FUNDUS_KEY_SIZE
#undef FUNDUS_KEY_DOUBLE
#undef FUNDUS_KEY_BOOL

inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys())
    if (k.name == key) return k.set(cfg, value);
  throw ConfigError("unknown config key '" + key + "'");
}

/// Applies `key = value` lines on top of `base`. '#' starts a comment.
inline TrainConfig parse_config(const std::string& text, TrainConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    try {
      set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

inline TrainConfig load_config(const fs::path& path, TrainConfig base = {}) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse_config(read_file(path), base);
}

/// Canonical text: every key in order, one per line; parse_config(to_text(c)) == c.
inline std::string config_to_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

inline std::string config_hash(const TrainConfig& cfg) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(config_to_text(cfg))));
  return buf;
}

/// Help text listing every key with its default.
inline std::string config_help() {
  const TrainConfig defaults;
  std::string out = "Config keys (key = value, one per line):\n";
  for (const auto& k : config_keys()) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "  %-22s default %-16s %s\n", k.name.c_str(), k.get(defaults).c_str(), k.doc.c_str());
    out += buf;
  }
  return out;
}

}  // namespace fundus
