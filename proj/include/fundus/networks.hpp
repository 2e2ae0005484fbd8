#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fundus/autograd.hpp"
#include "fundus/checkpoint.hpp"
#include "fundus/errors.hpp"
#include "fundus/ops.hpp"
#include "fundus/rng.hpp"
#include "fundus/tensor.hpp"

namespace fundus {

enum class ModelRole { Autoencoder, DepthGenerator, SegGenerator, DepthDiscriminator, SegDiscriminator };

inline const char* role_name(ModelRole r) {
  switch (r) {
    case ModelRole::Autoencoder: return "autoencoder";
    case ModelRole::DepthGenerator: return "depth_generator";
    case ModelRole::SegGenerator: return "seg_generator";
    case ModelRole::DepthDiscriminator: return "depth_discriminator";
    case ModelRole::SegDiscriminator: return "seg_discriminator";
  }
  return "?";
}

/// Input and output channel counts fixed by each role. The autoencoder
/// reconstructs all three colour channels.
struct RoleChannels {
  std::size_t in, out;
};
inline RoleChannels role_channels(ModelRole r) {
  switch (r) {
    case ModelRole::Autoencoder: return {3, 3};
    case ModelRole::DepthGenerator: return {3, 1};
    case ModelRole::SegGenerator: return {3, 2};
    case ModelRole::DepthDiscriminator: return {1, 1};
    case ModelRole::SegDiscriminator: return {2, 1};
  }
  return {0, 0};
}

struct GeneratorSpec {
  std::size_t input_channels = 3;
  std::size_t output_channels = 1;
  std::size_t base_width = 32;
  std::size_t depth_levels = 4;
  std::size_t max_width = 256;
  bool residual = false;
  std::size_t res_blocks = 2;  // per scale, when residual

  std::size_t width(std::size_t level) const { return std::min(base_width << level, max_width); }
};

/// Copy of base with the channel counts fixed by the role.
inline GeneratorSpec generator_spec_for(ModelRole r, GeneratorSpec base) {
  const auto ch = role_channels(r);
  base.input_channels = ch.in;
  base.output_channels = ch.out;
  return base;
}

struct DiscriminatorSpec {
  std::size_t input_channels = 1;
  std::size_t conv_blocks = 4;
  std::size_t base_width = 32;
  std::size_t max_width = 256;
  double leaky_slope = 0.2;

  std::size_t width(std::size_t block) const { return std::min(base_width << block, max_width); }
};

/// One row of the emitted layer table.
struct LayerInfo {
  std::string id;
  std::string kind;  // conv, deconv, norm, linear
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  bool bias = false;
  bool head = false;  // output layer whose shape follows the role
  std::vector<std::string> param_ids;
  std::size_t param_count = 0;
};

struct ParamInit {
  enum class Kind { Normal, Constant } kind = Kind::Constant;
  double value = 0.0;  // std for Normal, fill for Constant
};

/// Insertion-ordered, id-indexed parameter set.
template <typename T>
class ParamStore {
 public:
  Parameter<T>& add(const std::string& id, Shape shape, ParamInit init) {
    if (index_.count(id)) throw ShapeError("duplicate parameter id " + id);
    index_[id] = entries_.size();
    entries_.push_back(Entry{id, Parameter<T>(Tensor<T>(std::move(shape))), init});
    return entries_.back().param;
  }

  Parameter<T>& at(const std::string& id) { return entries_.at(lookup(id)).param; }
  const Parameter<T>& at(const std::string& id) const { return entries_.at(lookup(id)).param; }
  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  std::size_t size() const { return entries_.size(); }
  const std::string& id(std::size_t k) const { return entries_[k].id; }
  Parameter<T>& param(std::size_t k) { return entries_[k].param; }
  const Parameter<T>& param(std::size_t k) const { return entries_[k].param; }
  const ParamInit& init(std::size_t k) const { return entries_[k].init; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.param.value.size();
    return n;
  }

  std::vector<Parameter<T>*> pointers() {
    std::vector<Parameter<T>*> out;
    for (auto& e : entries_) out.push_back(&e.param);
    return out;
  }

  void zero_grad() {
    for (auto& e : entries_) e.param.zero_grad();
  }

  std::vector<NamedTensor> to_named() const {
    std::vector<NamedTensor> out;
    for (const auto& e : entries_) out.push_back({e.id, e.param.value.template cast<float>()});
    return out;
  }

  /// Replace every value from a checkpoint; ids and shapes must match exactly.
  void load_named(const std::vector<NamedTensor>& tensors) {
    if (tensors.size() != entries_.size())
      throw DataError("checkpoint has " + std::to_string(tensors.size()) + " parameters, model has " + std::to_string(entries_.size()));
    for (std::size_t k = 0; k < tensors.size(); ++k) {
      if (tensors[k].id != entries_[k].id) throw DataError("checkpoint parameter " + tensors[k].id + " does not match " + entries_[k].id);
      if (tensors[k].value.shape() != entries_[k].param.value.shape()) throw DataError("checkpoint shape mismatch for " + tensors[k].id);
    }
    for (std::size_t k = 0; k < tensors.size(); ++k) entries_[k].param.value = tensors[k].value.template cast<T>();
  }

 private:
  std::size_t lookup(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ShapeError("unknown parameter id " + id);
    return it->second;
  }

  struct Entry {
    std::string id;
    Parameter<T> param;
    ParamInit init;
  };
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Parameters plus the layer table describing them. Concrete networks add
/// their layers in forward order.
template <typename T>
class Model {
 public:
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const std::vector<LayerInfo>& layers() const { return layers_; }

  const LayerInfo& layer(const std::string& id) const {
    for (const auto& l : layers_)
      if (l.id == id) return l;
    throw ShapeError("unknown layer " + id);
  }

  /// One line per layer: id kind in out kernel stride params.
  std::string layer_table() const {
    std::ostringstream os;
    for (const auto& l : layers_)
      os << l.id << ' ' << l.kind << ' ' << l.in_channels << ' ' << l.out_channels << ' ' << l.kernel << ' ' << l.stride << ' '
         << l.param_count << (l.head ? " head" : "") << '\n';
    return os.str();
  }

  void save(const fs::path& path) const { save_checkpoint(path, params_.to_named()); }
  void load(const fs::path& path) { params_.load_named(load_checkpoint(path)); }

 protected:
  void add_conv(const std::string& id, std::size_t in, std::size_t out, std::size_t k, std::size_t stride, bool bias, bool head = false) {
    LayerInfo l{id, "conv", in, out, k, stride, bias, head, {}, 0};
    const double fan_in = static_cast<double>(in * k * k);
    add_param(l, id + ".weight", {out, in, k, k}, {ParamInit::Kind::Normal, std::sqrt(2.0 / fan_in)});
    if (bias) add_param(l, id + ".bias", {out}, {});
    layers_.push_back(std::move(l));
  }
  void add_deconv(const std::string& id, std::size_t in, std::size_t out, std::size_t k, std::size_t stride, bool bias) {
    LayerInfo l{id, "deconv", in, out, k, stride, bias, false, {}, 0};
    // Each output pixel receives in * (k / stride)^2 contributions.
    const double fan_in = std::max(1.0, static_cast<double>(in * k * k) / static_cast<double>(stride * stride));
    add_param(l, id + ".weight", {in, out, k, k}, {ParamInit::Kind::Normal, std::sqrt(2.0 / fan_in)});
    if (bias) add_param(l, id + ".bias", {out}, {});
    layers_.push_back(std::move(l));
  }
  void add_norm(const std::string& id, std::size_t ch) {
    LayerInfo l{id, "norm", ch, ch, 0, 1, false, false, {}, 0};
    add_param(l, id + ".gain", {ch}, {ParamInit::Kind::Constant, 1.0});
    add_param(l, id + ".shift", {ch}, {});
    layers_.push_back(std::move(l));
  }
  void add_linear(const std::string& id, std::size_t in, std::size_t out, bool head = false) {
    LayerInfo l{id, "linear", in, out, 0, 1, true, head, {}, 0};
    add_param(l, id + ".weight", {out, in}, {ParamInit::Kind::Normal, std::sqrt(1.0 / static_cast<double>(in))});
    add_param(l, id + ".bias", {out}, {});
    layers_.push_back(std::move(l));
  }

  Var param(Tape<T>& tape, const std::string& id, bool trainable) const {
    return tape.parameter(const_cast<Parameter<T>&>(params_.at(id)), trainable);
  }
  Var conv(Tape<T>& tape, Var x, const std::string& id, int stride, int pad, bool trainable) const {
    const LayerInfo& l = layer(id);
    return conv2d(tape, x, param(tape, id + ".weight", trainable), l.bias ? param(tape, id + ".bias", trainable) : Var{}, stride, pad);
  }
  Var deconv(Tape<T>& tape, Var x, const std::string& id, int stride, int pad, bool trainable) const {
    const LayerInfo& l = layer(id);
    return conv_transpose2d(tape, x, param(tape, id + ".weight", trainable), l.bias ? param(tape, id + ".bias", trainable) : Var{}, stride, pad);
  }
  Var norm(Tape<T>& tape, Var x, const std::string& id, bool trainable) const {
    return instance_norm(tape, x, param(tape, id + ".gain", trainable), param(tape, id + ".shift", trainable));
  }
  Var affine(Tape<T>& tape, Var x, const std::string& id, bool trainable) const {
    return linear(tape, x, param(tape, id + ".weight", trainable), param(tape, id + ".bias", trainable));
  }

 private:
  void add_param(LayerInfo& l, const std::string& pid, Shape shape, ParamInit init) {
    l.param_count += shape_size(shape);
    l.param_ids.push_back(pid);
    params_.add(pid, std::move(shape), init);
  }

  ParamStore<T> params_;
  std::vector<LayerInfo> layers_;
};

/// Deterministic fan-in scaled normal initialization. Each parameter draws
/// from its own stream keyed by (seed, id), so the result is independent of
/// parameter order.
template <typename T>
void init_weights(Model<T>& model, std::uint64_t seed) {
  auto& ps = model.params();
  for (std::size_t k = 0; k < ps.size(); ++k) {
    auto& v = ps.param(k).value;
    const ParamInit& init = ps.init(k);
    if (init.kind == ParamInit::Kind::Constant) {
      v.fill(static_cast<T>(init.value));
      continue;
    }
    Rng rng = derive_rng(seed, ps.id(k));
    std::normal_distribution<double> dist(0.0, init.value);
    for (auto& x : v.data()) x = static_cast<T>(dist(rng));
  }
  ps.zero_grad();
}

/// Encoder-decoder generator: stride-2 conv encoder, transposed-conv decoder,
/// channel-concatenated skips at every scale, optional residual blocks at
/// every scale, 1x1 conv + sigmoid head.
template <typename T>
class Generator : public Model<T> {
 public:
  struct Output {
    Var output;
    Var features;  // input to the head, i.e. the last shared activation
  };

  explicit Generator(GeneratorSpec spec) : spec_(spec) {
    if (spec_.input_channels == 0 || spec_.output_channels == 0 || spec_.base_width == 0 || spec_.depth_levels == 0)
      throw ShapeError("generator: channels, base width and depth levels must be positive");
    if (spec_.max_width < spec_.base_width) throw ShapeError("generator: max_width below base_width");
    const std::size_t L = spec_.depth_levels;
    this->add_conv("enc0.conv", spec_.input_channels, spec_.width(0), 3, 1, false);
    this->add_norm("enc0.norm", spec_.width(0));
    add_res_blocks("enc0", spec_.width(0));
    for (std::size_t l = 1; l <= L; ++l) {
      const std::string s = "down" + std::to_string(l);
      this->add_conv(s + ".conv", spec_.width(l - 1), spec_.width(l), 3, 2, false);
      this->add_norm(s + ".norm", spec_.width(l));
      add_res_blocks(s, spec_.width(l));
    }
    for (std::size_t l = L; l >= 1; --l) {
      const std::string s = "up" + std::to_string(l);
      const std::size_t w = spec_.width(l - 1);
      this->add_deconv(s + ".deconv", spec_.width(l), w, 2, 2, false);
      this->add_norm(s + ".norm", w);
      this->add_conv(s + ".fuse", 2 * w, w, 3, 1, false);
      this->add_norm(s + ".fuse_norm", w);
      add_res_blocks(s, w);
    }
    this->add_conv("head.conv", spec_.width(0), spec_.output_channels, 1, 1, true, true);
  }

  const GeneratorSpec& spec() const { return spec_; }

  Output forward(Tape<T>& tape, Var x, bool trainable = true) const {
    const auto& xs = tape.value(x).shape();
    if (xs.size() != 4 || xs[1] != spec_.input_channels) throw ShapeError("generator: expected N," + std::to_string(spec_.input_channels) + ",H,W input");
    const std::size_t div = std::size_t{1} << spec_.depth_levels;
    if (xs[2] % div != 0 || xs[3] % div != 0)
      throw ShapeError("generator: spatial extent " + std::to_string(xs[2]) + "x" + std::to_string(xs[3]) + " not divisible by " + std::to_string(div));
    const auto enc_act = Activation::leaky_relu(0.2);
    const auto dec_act = Activation::relu();

    std::vector<Var> skips;
    Var h = activation(tape, this->norm(tape, this->conv(tape, x, "enc0.conv", 1, 1, trainable), "enc0.norm", trainable), enc_act);
    h = res_blocks(tape, h, "enc0", enc_act, trainable);
    for (std::size_t l = 1; l <= spec_.depth_levels; ++l) {
      skips.push_back(h);
      const std::string s = "down" + std::to_string(l);
      h = activation(tape, this->norm(tape, this->conv(tape, h, s + ".conv", 2, 1, trainable), s + ".norm", trainable), enc_act);
      h = res_blocks(tape, h, s, enc_act, trainable);
    }
    for (std::size_t l = spec_.depth_levels; l >= 1; --l) {
      const std::string s = "up" + std::to_string(l);
      h = activation(tape, this->norm(tape, this->deconv(tape, h, s + ".deconv", 2, 0, trainable), s + ".norm", trainable), dec_act);
      h = concat_channels(tape, h, skips[l - 1]);
      h = activation(tape, this->norm(tape, this->conv(tape, h, s + ".fuse", 1, 1, trainable), s + ".fuse_norm", trainable), dec_act);
      h = res_blocks(tape, h, s, dec_act, trainable);
    }
    Var out = activation(tape, this->conv(tape, h, "head.conv", 1, 0, trainable), Activation::sigmoid());
    return {out, h};
  }

  /// Inference without gradient bookkeeping.
  Tensor<T> predict(const Tensor<T>& x) const {
    Tape<T> tape;
    return tape.value(forward(tape, tape.constant(x), false).output);
  }

 private:
  void add_res_blocks(const std::string& scope, std::size_t w) {
    if (!spec_.residual) return;
    for (std::size_t r = 0; r < spec_.res_blocks; ++r) {
      const std::string s = scope + ".res" + std::to_string(r);
      this->add_conv(s + ".conv1", w, w, 3, 1, false);
      this->add_norm(s + ".norm1", w);
      this->add_conv(s + ".conv2", w, w, 3, 1, false);
      this->add_norm(s + ".norm2", w);
    }
  }

  // y = x + norm(conv(act(norm(conv(x))))); a zero branch reduces to identity.
  Var res_blocks(Tape<T>& tape, Var h, const std::string& scope, Activation act, bool trainable) const {
    if (!spec_.residual) return h;
    for (std::size_t r = 0; r < spec_.res_blocks; ++r) {
      const std::string s = scope + ".res" + std::to_string(r);
      Var b = activation(tape, this->norm(tape, this->conv(tape, h, s + ".conv1", 1, 1, trainable), s + ".norm1", trainable), act);
      b = this->norm(tape, this->conv(tape, b, s + ".conv2", 1, 1, trainable), s + ".norm2", trainable);
      h = add(tape, h, b);
    }
    return h;
  }

  GeneratorSpec spec_;
};

/// Global classifier over a map: stride-2 conv + leaky ReLU blocks, global
/// average pooling, one affine layer, sigmoid. Output [N, 1].
template <typename T>
class Discriminator : public Model<T> {
 public:
  explicit Discriminator(DiscriminatorSpec spec) : spec_(spec) {
    if (spec_.input_channels == 0 || spec_.conv_blocks == 0 || spec_.base_width == 0)
      throw ShapeError("discriminator: channels, blocks and base width must be positive");
    std::size_t in = spec_.input_channels;
    for (std::size_t b = 0; b < spec_.conv_blocks; ++b) {
      this->add_conv("block" + std::to_string(b) + ".conv", in, spec_.width(b), 3, 2, true);
      in = spec_.width(b);
    }
    this->add_linear("fc", in, 1, true);
  }

  const DiscriminatorSpec& spec() const { return spec_; }

  Var forward(Tape<T>& tape, Var x, bool trainable = true) const {
    const auto& xs = tape.value(x).shape();
    if (xs.size() != 4 || xs[1] != spec_.input_channels) throw ShapeError("discriminator: expected N," + std::to_string(spec_.input_channels) + ",H,W input");
    const std::size_t min_extent = std::size_t{1} << spec_.conv_blocks;
    if (xs[2] < min_extent || xs[3] < min_extent)
      throw ShapeError("discriminator: input smaller than " + std::to_string(min_extent) + " px receptive path");
    const auto act = Activation::leaky_relu(spec_.leaky_slope);
    Var h = x;
    for (std::size_t b = 0; b < spec_.conv_blocks; ++b) h = activation(tape, this->conv(tape, h, "block" + std::to_string(b) + ".conv", 2, 1, trainable), act);
    return activation(tape, this->affine(tape, global_avg_pool(tape, h), "fc", trainable), Activation::sigmoid());
  }

  Tensor<T> predict(const Tensor<T>& x) const {
    Tape<T> tape;
    return tape.value(forward(tape, tape.constant(x), false));
  }

 private:
  DiscriminatorSpec spec_;
};

struct TransferAudit {
  std::vector<std::string> copied;   // parameter ids copied bitwise
  std::vector<std::string> skipped;  // parameter ids left at the target's initialization
  std::vector<std::string> skipped_layers;
};

/// Copy every shape-matched parameter from source into target. Only layers
/// flagged as heads may differ in shape; any other difference refuses the
/// transfer before anything is written.
template <typename T>
TransferAudit transfer_weights(const Model<T>& source, Model<T>& target) {
  const auto& sl = source.layers();
  const auto& tl = target.layers();
  if (sl.size() != tl.size()) throw ShapeError("transfer_weights: layer tables differ in length (" + std::to_string(sl.size()) + " vs " + std::to_string(tl.size()) + ")");
  TransferAudit audit;
  for (std::size_t i = 0; i < sl.size(); ++i) {
    const LayerInfo& a = sl[i];
    const LayerInfo& b = tl[i];
    if (a.id != b.id || a.kind != b.kind || a.kernel != b.kernel || a.stride != b.stride || a.bias != b.bias)
      throw ShapeError("transfer_weights: incompatible layer " + a.id + " vs " + b.id);
    bool match = a.param_ids == b.param_ids;
    for (std::size_t k = 0; match && k < a.param_ids.size(); ++k)
      match = source.params().at(a.param_ids[k]).value.shape() == target.params().at(b.param_ids[k]).value.shape();
    if (!match && !(a.head && b.head)) throw ShapeError("transfer_weights: shape mismatch at non-head layer " + a.id);
    auto& dst = match ? audit.copied : audit.skipped;
    dst.insert(dst.end(), b.param_ids.begin(), b.param_ids.end());
    if (!match) audit.skipped_layers.push_back(b.id);
  }
  for (const auto& id : audit.copied) target.params().at(id).value = source.params().at(id).value;
  return audit;
}

}  // namespace fundus
