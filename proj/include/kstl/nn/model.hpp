#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "kstl/core/errors.hpp"
#include "kstl/core/rng.hpp"
#include "kstl/core/tensor.hpp"
#include "kstl/nn/layers.hpp"
#include "kstl/nn/param_set.hpp"

namespace kstl::nn {

struct ConvBlockSpec {
  std::size_t out_channels = 8;
  bool batch_norm = true;
  bool pool = true;
};

struct DenseSpec {
  std::size_t width = 6;
  bool batch_norm = true;
  bool relu = true;
  double dropout = 0.5;
};

/// Backbone of 3x3 conv blocks (conv -> [bn] -> relu -> [maxpool2]) followed
/// by global average pooling, then a fully connected head. The last head entry
/// is the classifier and is always a plain linear layer.
struct ArchitectureConfig {
  std::size_t input_edge = 16;
  std::size_t in_channels = 3;
  std::vector<ConvBlockSpec> backbone;
  std::vector<DenseSpec> head;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;

  std::size_t feature_width() const { return backbone.empty() ? in_channels : backbone.back().out_channels; }
  std::size_t num_classes() const { return head.empty() ? 0 : head.back().width; }

  /// Width of the representation fed to the final classifier layer.
  std::size_t penultimate_width() const { return head.size() >= 2 ? head[head.size() - 2].width : feature_width(); }

  void validate() const {
    if (input_edge == 0 || in_channels == 0) throw ConfigError("input edge and channel count must be positive");
    if (head.empty()) throw ConfigError("head must contain at least the classifier layer");
    std::size_t edge = input_edge;
    for (std::size_t i = 0; i < backbone.size(); ++i) {
      if (backbone[i].out_channels == 0) throw ConfigError("backbone block " + std::to_string(i) + " has 0 channels");
      if (backbone[i].pool) {
        if (edge < 2)
          throw ConfigError("backbone block " + std::to_string(i) + " pools a " + std::to_string(edge) + "px map");
        edge /= 2;
      }
    }
    for (const auto& d : head) {
      if (d.width == 0) throw ConfigError("head layer width must be positive");
      check_dropout_rate(d.dropout);
    }
  }
};

/// Hidden widths 768/256/128 with batch-norm, ReLU and dropout 0.5, then a
/// 6-way classifier.
inline std::vector<DenseSpec> full_scale_head(std::size_t classes = 6) {
  return {{768, true, true, 0.5}, {256, true, true, 0.5}, {128, true, true, 0.5}, {classes, false, false, 0.0}};
}

inline std::vector<DenseSpec> make_head(const std::vector<std::size_t>& hidden, std::size_t classes,
                                        bool batch_norm = true, double dropout = 0.5) {
  std::vector<DenseSpec> head;
  for (std::size_t w : hidden) head.push_back({w, batch_norm, true, dropout});
  head.push_back({classes, false, false, 0.0});
  return head;
}

/// Desk-scale default: 3 blocks with 8/16/32 channels on 16px patches and a
/// 64/32 hidden head.
inline ArchitectureConfig desk_architecture(std::size_t classes = 6) {
  ArchitectureConfig a;
  a.input_edge = 16;
  a.backbone = {{8, true, true}, {16, true, true}, {32, true, true}};
  a.head = make_head({64, 32}, classes);
  return a;
}

// JSON mapping.
inline void to_json(nlohmann::json& j, const ConvBlockSpec& b) {
  j = {{"out_channels", b.out_channels}, {"batch_norm", b.batch_norm}, {"pool", b.pool}};
}
inline void from_json(const nlohmann::json& j, ConvBlockSpec& b) {
  b.out_channels = j.at("out_channels").get<std::size_t>();
  b.batch_norm = j.value("batch_norm", true);
  b.pool = j.value("pool", true);
}
inline void to_json(nlohmann::json& j, const DenseSpec& d) {
  j = {{"width", d.width}, {"batch_norm", d.batch_norm}, {"relu", d.relu}, {"dropout", d.dropout}};
}
inline void from_json(const nlohmann::json& j, DenseSpec& d) {
  d.width = j.at("width").get<std::size_t>();
  d.batch_norm = j.value("batch_norm", true);
  d.relu = j.value("relu", true);
  d.dropout = j.value("dropout", 0.5);
}
inline void to_json(nlohmann::json& j, const ArchitectureConfig& a) {
  j = {{"input_edge", a.input_edge}, {"in_channels", a.in_channels}, {"backbone", a.backbone},
       {"head", a.head},         {"bn_momentum", a.bn_momentum}, {"bn_epsilon", a.bn_epsilon}};
}
inline void from_json(const nlohmann::json& j, ArchitectureConfig& a) {
  a.input_edge = j.at("input_edge").get<std::size_t>();
  a.in_channels = j.value("in_channels", std::size_t{3});
  a.backbone = j.at("backbone").get<std::vector<ConvBlockSpec>>();
  a.head = j.at("head").get<std::vector<DenseSpec>>();
  a.bn_momentum = j.value("bn_momentum", 0.1);
  a.bn_epsilon = j.value("bn_epsilon", 1e-5);
}

namespace detail {
inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xf];
  return s;
}
inline nlohmann::json backbone_structure(const ArchitectureConfig& a) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : a.backbone) blocks.push_back({b.out_channels, b.batch_norm, b.pool});
  return {{"input_edge", a.input_edge}, {"in_channels", a.in_channels}, {"blocks", blocks}, {"eps", a.bn_epsilon}};
}
}  // namespace detail

/// Hash of everything that determines parameter names and shapes. Training
/// hyperparameters (dropout rate, batch-norm momentum) are excluded.
inline std::string arch_hash(const ArchitectureConfig& a) {
  nlohmann::json head = nlohmann::json::array();
  for (const auto& d : a.head) head.push_back({d.width, d.batch_norm, d.relu});
  nlohmann::json s = {{"backbone", detail::backbone_structure(a)}, {"head", head}};
  return detail::hex64(fnv1a64(s.dump()));
}

inline std::string backbone_hash(const ArchitectureConfig& a) {
  return detail::hex64(fnv1a64(detail::backbone_structure(a).dump()));
}

template <typename T>
struct ModelState {
  ParamSet<T> params;
  NamedTensors<T> buffers;  // batch-norm running statistics
};

// ------------------------------------------------------------ layer nodes

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, ModelState<T>& state, Mode mode, Rng* rng) = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out, const ModelState<T>& state, Gradients<T>& grads) = 0;
  virtual std::string name() const = 0;

 protected:
  [[noreturn]] void missing_cache() const { throw UsageError(name() + ": backward called without a forward cache"); }
};

template <typename T>
class ConvNode final : public Layer<T> {
 public:
  explicit ConvNode(std::string prefix) : prefix_(std::move(prefix)) {}
  Tensor<T> forward(const Tensor<T>& x, ModelState<T>& s, Mode, Rng*) override {
    input_ = x;
    return conv2d_forward(x, s.params.value(prefix_ + ".weight"), s.params.value(prefix_ + ".bias"), geometry_);
  }
  Tensor<T> backward(const Tensor<T>& gy, const ModelState<T>& s, Gradients<T>& grads) override {
    if (!input_) this->missing_cache();
    auto g = conv2d_backward(gy, *input_, s.params.value(prefix_ + ".weight"), geometry_);
    input_.reset();
    accumulate(grads.at(prefix_ + ".weight"), g.weight);
    accumulate(grads.at(prefix_ + ".bias"), g.bias);
    return std::move(g.input);
  }
  std::string name() const override { return prefix_; }

 private:
  static void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
  std::string prefix_;
  Conv2dGeometry geometry_{1, 1};
  std::optional<Tensor<T>> input_;
};

template <typename T>
class BatchNormNode final : public Layer<T> {
 public:
  BatchNormNode(std::string prefix, BatchNormOptions opt) : prefix_(std::move(prefix)), opt_(opt) {}
  Tensor<T> forward(const Tensor<T>& x, ModelState<T>& s, Mode mode, Rng*) override {
    cache_.emplace();
    return batchnorm_forward(x, s.params.value(prefix_ + ".gamma"), s.params.value(prefix_ + ".beta"), mode,
                             s.buffers.at(prefix_ + ".running_mean"), s.buffers.at(prefix_ + ".running_var"), opt_,
                             &*cache_);
  }
  Tensor<T> backward(const Tensor<T>& gy, const ModelState<T>& s, Gradients<T>& grads) override {
    if (!cache_) this->missing_cache();
    auto g = batchnorm_backward(gy, s.params.value(prefix_ + ".gamma"), *cache_);
    cache_.reset();
    auto& gg = grads.at(prefix_ + ".gamma");
    auto& gb = grads.at(prefix_ + ".beta");
    for (std::size_t i = 0; i < gg.size(); ++i) {
      gg[i] += g.gamma[i];
      gb[i] += g.beta[i];
    }
    return std::move(g.input);
  }
  std::string name() const override { return prefix_; }

 private:
  std::string prefix_;
  BatchNormOptions opt_;
  std::optional<BatchNormCache<T>> cache_;
};

template <typename T>
class ReluNode final : public Layer<T> {
 public:
  explicit ReluNode(std::string n) : name_(std::move(n)) {}
  Tensor<T> forward(const Tensor<T>& x, ModelState<T>&, Mode, Rng*) override {
    input_ = x;
    return relu_forward(x);
  }
  Tensor<T> backward(const Tensor<T>& gy, const ModelState<T>&, Gradients<T>&) override {
    if (!input_) this->missing_cache();
    auto g = relu_backward(gy, *input_);
    input_.reset();
    return g;
  }
  std::string name() const override { return name_; }

 private:
  std::string name_;
  std::optional<Tensor<T>> input_;
};

template <typename T>
class MaxPoolNode final : public Layer<T> {
 public:
  explicit MaxPoolNode(std::string n) : name_(std::move(n)) {}
  Tensor<T> forward(const Tensor<T>& x, ModelState<T>&, Mode, Rng*) override {
    input_shape_ = x.shape();
    argmax_.emplace();
    return maxpool2_forward(x, &*argmax_);
  }
  Tensor<T> backward(const Tensor<T>& gy, const ModelState<T>&, Gradients<T>&) override {
    if (!argmax_) this->missing_cache();
    auto g = maxpool2_backward(gy, input_shape_, *argmax_);
    argmax_.reset();
    return g;
  }
  std::string name() const override { return name_; }

 private:
  std::string name_;
  Shape input_shape_;
  std::optional<std::vector<std::size_t>> argmax_;
};

template <typename T>
class GlobalAvgPoolNode final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, ModelState<T>&, Mode, Rng*) override {
    input_shape_ = x.shape();
    return global_avg_pool_forward(x);
  }
  Tensor<T> backward(const Tensor<T>& gy, const ModelState<T>&, Gradients<T>&) override {
    if (!input_shape_) this->missing_cache();
    auto g = global_avg_pool_backward(gy, *input_shape_);
    input_shape_.reset();
    return g;
  }
  std::string name() const override { return "backbone.gap"; }

 private:
  std::optional<Shape> input_shape_;
};

template <typename T>
class LinearNode final : public Layer<T> {
 public:
  explicit LinearNode(std::string prefix) : prefix_(std::move(prefix)) {}
  Tensor<T> forward(const Tensor<T>& x, ModelState<T>& s, Mode, Rng*) override {
    input_ = x;
    return linear_forward(x, s.params.value(prefix_ + ".weight"), s.params.value(prefix_ + ".bias"));
  }
  Tensor<T> backward(const Tensor<T>& gy, const ModelState<T>& s, Gradients<T>& grads) override {
    if (!input_) this->missing_cache();
    auto g = linear_backward(gy, *input_, s.params.value(prefix_ + ".weight"));
    input_.reset();
    auto& gw = grads.at(prefix_ + ".weight");
    auto& gb = grads.at(prefix_ + ".bias");
    for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += g.weight[i];
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g.bias[i];
    return std::move(g.input);
  }
  std::string name() const override { return prefix_; }

 private:
  std::string prefix_;
  std::optional<Tensor<T>> input_;
};

template <typename T>
class DropoutNode final : public Layer<T> {
 public:
  DropoutNode(std::string n, double rate) : name_(std::move(n)), rate_(rate) { check_dropout_rate(rate); }
  void set_rate(double rate) {
    check_dropout_rate(rate);
    rate_ = rate;
  }
  double rate() const { return rate_; }
  Tensor<T> forward(const Tensor<T>& x, ModelState<T>&, Mode mode, Rng* rng) override {
    mask_.reset();
    active_ = true;
    if (mode == Mode::eval || rate_ == 0.0) return x;
    if (!rng) throw UsageError(name_ + ": train-mode dropout requires a seeded random source");
    mask_ = dropout_mask<T>(x.size(), rate_, *rng);
    return dropout_forward(x, rate_, mode, &*mask_);
  }
  Tensor<T> backward(const Tensor<T>& gy, const ModelState<T>&, Gradients<T>&) override {
    if (!active_) this->missing_cache();
    active_ = false;
    return dropout_backward(gy, mask_ ? &*mask_ : nullptr);
  }
  std::string name() const override { return name_; }

 private:
  std::string name_;
  double rate_;
  bool active_ = false;
  std::optional<std::vector<T>> mask_;
};

// ------------------------------------------------------------------ model

/// Sequential classifier built from an ArchitectureConfig. Parameters are
/// named "backbone.block<i>.conv.weight", "head.fc<j>.bias", and so on.
template <typename T>
class Model {
 public:
  Model(ArchitectureConfig arch, std::uint64_t init_seed) : arch_(std::move(arch)) {
    arch_.validate();
    build();
    initialize(init_seed);
  }

  const ArchitectureConfig& arch() const { return arch_; }
  ModelState<T>& state() { return state_; }
  const ModelState<T>& state() const { return state_; }
  ParamSet<T>& params() { return state_.params; }
  const ParamSet<T>& params() const { return state_.params; }
  std::size_t parameter_count() const { return state_.params.parameter_count(); }

  /// Re-draws every parameter: Kaiming normal (std = sqrt(2 / fan_in)) for
  /// weights, zero biases, gamma 1, beta 0, running stats (0, 1).
  void initialize(std::uint64_t seed) {
    for (auto& e : state_.params.values()) init_parameter(e.name, e.value, seed);
    for (auto& e : state_.buffers) e.value.fill(e.name.ends_with(".running_var") ? T(1) : T(0));
    state_.params.reset_velocity();
  }

  void init_parameter(const std::string& name, Tensor<T>& value, std::uint64_t seed) const {
    if (name.ends_with(".weight")) {
      const std::size_t fan_in = value.size() / value.dim(0);
      const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
      Rng rng(derive_seed(seed, "init/" + name));
      for (auto& v : value.values()) v = static_cast<T>(stddev * rng.normal());
    } else if (name.ends_with(".gamma")) {
      value.fill(T(1));
    } else {
      value.fill(T(0));
    }
  }

  void set_dropout(double rate) {
    for (auto& l : layers_)
      if (auto* d = dynamic_cast<DropoutNode<T>*>(l.get())) d->set_rate(rate);
    for (std::size_t i = 0; i + 1 < arch_.head.size(); ++i) arch_.head[i].dropout = rate;
  }

  /// Logits for an NCHW batch.
  Tensor<T> forward(const Tensor<T>& batch, Mode mode, Rng* dropout_rng = nullptr) {
    return run(batch, layers_.size(), mode, dropout_rng);
  }

  /// Eval-mode activations entering the final classifier layer.
  Tensor<T> features(const Tensor<T>& batch) { return run(batch, classifier_index_, Mode::eval, nullptr); }

  /// Gradients of every parameter for the most recent forward() call.
  Gradients<T> backward(const Tensor<T>& grad_logits) {
    Gradients<T> grads;
    for (const auto& e : state_.params.values()) grads.add(e.name, Tensor<T>(e.value.shape()));
    Tensor<T> g = grad_logits;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      g = layers_[i]->backward(g, state_, grads);
      require_finite(g, layers_[i]->name() + " backward");
    }
    for (const auto& e : grads) require_finite(e.value, "gradient of " + e.name);
    return grads;
  }

 private:
  Tensor<T> run(const Tensor<T>& batch, std::size_t stop, Mode mode, Rng* rng) {
    if (batch.rank() != 4 || batch.dim(1) != arch_.in_channels || batch.dim(2) != arch_.input_edge ||
        batch.dim(3) != arch_.input_edge)
      throw ConfigError("model expects Nx" + std::to_string(arch_.in_channels) + "x" +
                        std::to_string(arch_.input_edge) + "x" + std::to_string(arch_.input_edge) + " input, got " +
                        shape_string(batch.shape()));
    Tensor<T> x = batch;
    for (std::size_t i = 0; i < stop; ++i) {
      x = layers_[i]->forward(x, state_, mode, rng);
      require_finite(x, layers_[i]->name() + " forward");
    }
    return x;
  }

  void build() {
    const BatchNormOptions bn{arch_.bn_momentum, arch_.bn_epsilon};
    std::size_t in = arch_.in_channels;
    auto add_bn = [&](const std::string& p, std::size_t ch) {
      state_.params.add(p + ".gamma", Tensor<T>({ch}));
      state_.params.add(p + ".beta", Tensor<T>({ch}));
      state_.buffers.add(p + ".running_mean", Tensor<T>({ch}));
      state_.buffers.add(p + ".running_var", Tensor<T>({ch}, T(1)));
      layers_.push_back(std::make_unique<BatchNormNode<T>>(p, bn));
    };
    for (std::size_t i = 0; i < arch_.backbone.size(); ++i) {
      const auto& b = arch_.backbone[i];
      const std::string p = "backbone.block" + std::to_string(i);
      state_.params.add(p + ".conv.weight", Tensor<T>({b.out_channels, in, 3, 3}));
      state_.params.add(p + ".conv.bias", Tensor<T>({b.out_channels}));
      layers_.push_back(std::make_unique<ConvNode<T>>(p + ".conv"));
      if (b.batch_norm) add_bn(p + ".bn", b.out_channels);
      layers_.push_back(std::make_unique<ReluNode<T>>(p + ".relu"));
      if (b.pool) layers_.push_back(std::make_unique<MaxPoolNode<T>>(p + ".pool"));
      in = b.out_channels;
    }
    layers_.push_back(std::make_unique<GlobalAvgPoolNode<T>>());
    for (std::size_t j = 0; j < arch_.head.size(); ++j) {
      const auto& d = arch_.head[j];
      const bool last = j + 1 == arch_.head.size();
      const std::string p = "head.fc" + std::to_string(j);
      if (last) classifier_index_ = layers_.size();
      state_.params.add(p + ".weight", Tensor<T>({d.width, in}));
      state_.params.add(p + ".bias", Tensor<T>({d.width}));
      layers_.push_back(std::make_unique<LinearNode<T>>(p));
      if (!last) {
        if (d.batch_norm) add_bn("head.bn" + std::to_string(j), d.width);
        if (d.relu) layers_.push_back(std::make_unique<ReluNode<T>>("head.relu" + std::to_string(j)));
        layers_.push_back(std::make_unique<DropoutNode<T>>("head.dropout" + std::to_string(j), d.dropout));
      }
      in = d.width;
    }
  }

  ArchitectureConfig arch_;
  ModelState<T> state_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
  std::size_t classifier_index_ = 0;
};

}  // namespace kstl::nn
