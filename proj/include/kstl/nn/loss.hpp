#pragma once

#include <cmath>
#include <span>
#include <string>

#include "kstl/core/errors.hpp"
#include "kstl/core/tensor.hpp"

namespace kstl::nn {

template <typename T>
struct LossResult {
  T loss;
  Tensor<T> grad_logits;
};

/// Mean softmax cross-entropy over the batch. The gradient is
/// (softmax - onehot) / B.
template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ConfigError("logits must be BxC, got " + shape_string(logits.shape()));
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch)
    throw DataError("got " + std::to_string(labels.size()) + " labels for a batch of " + std::to_string(batch));
  LossResult<T> r{T(0), Tensor<T>(logits.shape())};
  // Accumulate in double so the float path does not lose the tiny losses of
  // saturated predictions.
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes)
      throw DataError("sample " + std::to_string(b) + " has label " + std::to_string(label) +
                      " outside [0, " + std::to_string(classes) + ")");
    const T* z = logits.data() + b * classes;
    std::size_t top = 0;
    for (std::size_t c = 1; c < classes; ++c)
      if (z[c] > z[top]) top = c;
    const T zmax = z[top];
    double rest = 0.0;
    for (std::size_t c = 0; c < classes; ++c)
      if (c != top) rest += std::exp(static_cast<double>(z[c] - zmax));
    const double denom = 1.0 + rest;
    const double log_denom = std::log1p(rest);
    // -log softmax(label) = log(sum exp(z - zmax)) - (z_label - zmax)
    total += log_denom - static_cast<double>(z[label] - zmax);
    for (std::size_t c = 0; c < classes; ++c) {
      const double p = std::exp(static_cast<double>(z[c] - zmax)) / denom;
      r.grad_logits[b * classes + c] =
          static_cast<T>((p - (static_cast<std::size_t>(label) == c ? 1.0 : 0.0)) / static_cast<double>(batch));
    }
  }
  r.loss = static_cast<T>(total / static_cast<double>(batch));
  return r;
}

}  // namespace kstl::nn
