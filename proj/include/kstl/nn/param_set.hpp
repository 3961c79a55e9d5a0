#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kstl/core/errors.hpp"
#include "kstl/core/tensor.hpp"

namespace kstl::nn {

/// Insertion-ordered collection of uniquely named tensors.
template <typename T>
class NamedTensors {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
  };

  void add(std::string name, Tensor<T> value) {
    if (index_.contains(name)) throw ConfigError("duplicate tensor name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(value)});
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  Tensor<T>& at(const std::string& name) { return entries_[locate(name)].value; }
  const Tensor<T>& at(const std::string& name) const { return entries_[locate(name)].value; }

  std::size_t size() const noexcept { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
  }

  /// Total number of scalar values across all tensors.
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

 private:
  std::size_t locate(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no tensor named '" + name + "'");
    return it->second;
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

template <typename T>
using Gradients = NamedTensors<T>;

/// Trainable parameters plus the optimizer velocity for each of them.
template <typename T>
class ParamSet {
 public:
  void add(const std::string& name, Tensor<T> value) {
    Tensor<T> velocity(value.shape());
    values_.add(name, std::move(value));
    velocity_.add(name, std::move(velocity));
  }

  bool contains(const std::string& name) const { return values_.contains(name); }
  Tensor<T>& value(const std::string& name) { return values_.at(name); }
  const Tensor<T>& value(const std::string& name) const { return values_.at(name); }
  Tensor<T>& velocity(const std::string& name) { return velocity_.at(name); }
  const Tensor<T>& velocity(const std::string& name) const { return velocity_.at(name); }

  const NamedTensors<T>& values() const { return values_; }
  NamedTensors<T>& values() { return values_; }
  const NamedTensors<T>& velocities() const { return velocity_; }
  NamedTensors<T>& velocities() { return velocity_; }

  std::size_t size() const { return values_.size(); }
  std::vector<std::string> names() const { return values_.names(); }

  /// Number of trainable scalars.
  std::size_t parameter_count() const { return values_.scalar_count(); }

  void reset_velocity() {
    for (auto& e : velocity_) e.value.fill(T(0));
  }

 private:
  NamedTensors<T> values_;
  NamedTensors<T> velocity_;
};

/// SGD with momentum, in the convention
///   v <- momentum * v + g
///   theta <- theta - lr * v
/// Gradients must name exactly the parameters of `params`, with equal shapes.
template <typename T>
void sgd_momentum_step(ParamSet<T>& params, const Gradients<T>& grads, double lr, double momentum) {
  const auto pnames = params.names();
  const auto gnames = grads.names();
  std::vector<std::string> ps(pnames), gs(gnames), diff;
  std::sort(ps.begin(), ps.end());
  std::sort(gs.begin(), gs.end());
  std::set_symmetric_difference(ps.begin(), ps.end(), gs.begin(), gs.end(), std::back_inserter(diff));
  if (!diff.empty()) {
    std::string list;
    for (const auto& d : diff) list += (list.empty() ? "" : ", ") + d;
    throw ConfigError("parameter/gradient name mismatch: " + list);
  }
  const T lr_t = static_cast<T>(lr), mu = static_cast<T>(momentum);
  for (const auto& g : grads) {
    Tensor<T>& theta = params.value(g.name);
    Tensor<T>& v = params.velocity(g.name);
    if (g.value.shape() != theta.shape())
      throw ConfigError("gradient for '" + g.name + "' has shape " + shape_string(g.value.shape()) +
                        ", parameter has " + shape_string(theta.shape()));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = mu * v[i] + g.value[i];
      theta[i] -= lr_t * v[i];
    }
  }
}

}  // namespace kstl::nn
