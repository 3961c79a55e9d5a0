#pragma once

#include <cmath>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "kstl/core/errors.hpp"
#include "kstl/core/rng.hpp"
#include "kstl/data/augment.hpp"
#include "kstl/data/pipeline.hpp"
#include "kstl/nn/loss.hpp"
#include "kstl/nn/model.hpp"
#include "kstl/transfer/config.hpp"

namespace kstl::transfer {

using data::Image;
using data::Patch;

/// Whitened patches with integer labels. `patches` points into the prepared
/// data the set was built from, which must outlive it.
template <typename T>
struct LabeledSet {
  std::vector<Image<T>> images;
  std::vector<int> labels;
  std::vector<const Patch*> patches;

  std::size_t size() const { return images.size(); }
};

/// `keys[i]` is the class served by output unit i.
template <typename T>
LabeledSet<T> make_set(const std::vector<Patch>& patches, const data::WhiteningStats& stats,
                       const std::vector<std::string>& keys) {
  LabeledSet<T> s;
  for (const auto& p : patches) {
    s.images.push_back(data::whiten<T>(p, stats));
    s.labels.push_back(data::class_index(keys, p.class_key));
    s.patches.push_back(&p);
  }
  return s;
}

template <typename T>
Tensor<T> to_batch(const std::vector<Image<T>>& images) {
  const auto& first = images.front();
  Tensor<T> t({images.size(), first.channels, first.height, first.width});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& im = images[n];
    for (std::size_t y = 0; y < im.height; ++y)
      for (std::size_t x = 0; x < im.width; ++x)
        for (std::size_t c = 0; c < im.channels; ++c) t.at(n, c, y, x) = im.at(x, y, c);
  }
  return t;
}

/// Fragments the training loop may never read, plus an optional log of what
/// it did read.
struct AccessGuard {
  std::set<std::string> forbidden_fragments;
  std::vector<std::string>* log = nullptr;

  static AccessGuard from_split(const data::SplitManifest& m) {
    AccessGuard g;
    for (const auto& [f, side] : m.fragments)
      if (side == data::SplitSide::test) g.forbidden_fragments.insert(f);
    return g;
  }

  void check(const Patch& p) const {
    if (log) log->push_back(p.patch_id);
    if (forbidden_fragments.contains(p.fragment_id))
      throw StageContractError("training step read patch " + p.patch_id + " of test fragment " + p.fragment_id);
  }
};

struct Prediction {
  std::string patch_id;
  int truth = 0;
  int predicted = 0;
  std::vector<double> scores;  // softmax
};

struct Evaluation {
  std::vector<Prediction> predictions;
  double accuracy = 0;
  double loss = 0;

  std::vector<int> predicted() const {
    std::vector<int> v;
    for (const auto& p : predictions) v.push_back(p.predicted);
    return v;
  }
  std::vector<int> truth() const {
    std::vector<int> v;
    for (const auto& p : predictions) v.push_back(p.truth);
    return v;
  }
};

template <typename T>
Evaluation evaluate(nn::Model<T>& model, const LabeledSet<T>& set, std::size_t batch = 64) {
  Evaluation e;
  if (set.size() == 0) return e;
  std::size_t correct = 0;
  double loss = 0;
  for (std::size_t start = 0; start < set.size(); start += batch) {
    const std::size_t end = std::min(set.size(), start + batch);
    std::vector<Image<T>> imgs(set.images.begin() + start, set.images.begin() + end);
    const auto logits = model.forward(to_batch(imgs), nn::Mode::eval);
    const std::size_t classes = logits.dim(1);
    for (std::size_t i = 0; i < end - start; ++i) {
      Prediction p{set.patches[start + i]->patch_id, set.labels[start + i], 0, std::vector<double>(classes)};
      double mx = -INFINITY;
      for (std::size_t c = 0; c < classes; ++c) mx = std::max(mx, double(logits[i * classes + c]));
      double z = 0;
      for (std::size_t c = 0; c < classes; ++c) z += p.scores[c] = std::exp(double(logits[i * classes + c]) - mx);
      for (std::size_t c = 0; c < classes; ++c) {
        p.scores[c] /= z;
        if (p.scores[c] > p.scores[p.predicted]) p.predicted = static_cast<int>(c);
      }
      loss -= std::log(std::max(p.scores[p.truth], 1e-300));
      correct += p.predicted == p.truth;
      e.predictions.push_back(std::move(p));
    }
  }
  e.accuracy = double(correct) / double(set.size());
  e.loss = loss / double(set.size());
  return e;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double test_accuracy = 0;
};

struct TrainOutcome {
  std::vector<EpochRecord> log;
  data::AugmentTrace trace;
  std::size_t steps = 0;
};

struct TrainOptions {
  TrainConfig config;
  data::AugmentPolicy policy = data::AugmentPolicy::geometric;
  data::BlurConfig blur;
  std::uint64_t seed = 0;
  const AccessGuard* guard = nullptr;
};

/// Mini-batch SGD with momentum over shuffled epochs. A trailing batch of a
/// single sample is dropped (batch norm needs two). Test accuracy is measured
/// after every epoch for the log only; it never influences training.
template <typename T>
TrainOutcome train(nn::Model<T>& model, const LabeledSet<T>& train_set, const LabeledSet<T>* test_set,
                   const TrainOptions& opt) {
  opt.config.validate();
  if (train_set.size() < 2) throw DataError("training needs at least two samples");
  model.set_dropout(opt.config.dropout);
  TrainOutcome out;
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 1; epoch <= opt.config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(derive_seed(opt.seed, "train/shuffle", epoch));
    Rng aug(derive_seed(opt.seed, "train/augment", epoch));
    Rng drop(derive_seed(opt.seed, "train/dropout", epoch));
    shuffle.shuffle(order);
    double loss_sum = 0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.config.batch_size) {
      const std::size_t end = std::min(order.size(), start + opt.config.batch_size);
      if (end - start < 2) break;
      std::vector<Image<T>> imgs;
      std::vector<int> labels;
      for (std::size_t i = start; i < end; ++i) {
        const std::size_t k = order[i];
        if (opt.guard) opt.guard->check(*train_set.patches[k]);
        imgs.push_back(data::augment(train_set.images[k], opt.policy, aug, opt.blur, &out.trace));
        labels.push_back(train_set.labels[k]);
      }
      const std::string at = "step " + std::to_string(out.steps) + " (epoch " + std::to_string(epoch) + ")";
      double batch_loss = 0;
      try {
        const auto logits = model.forward(to_batch(imgs), nn::Mode::train, &drop);
        auto loss = nn::softmax_cross_entropy(logits, std::span<const int>(labels));
        batch_loss = double(loss.loss);
        if (!std::isfinite(batch_loss)) throw NumericError("loss is " + std::to_string(batch_loss));
        const auto grads = model.backward(loss.grad_logits);
        nn::sgd_momentum_step(model.params(), grads, opt.config.learning_rate, opt.config.momentum);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at " + at + ": " + e.what());
      }
      loss_sum += batch_loss * double(end - start);
      seen += end - start;
      ++out.steps;
    }
    EpochRecord r{epoch, loss_sum / double(seen), 0};
    if (test_set && test_set->size() > 0) {
      try {
        r.test_accuracy = evaluate(model, *test_set).accuracy;
      } catch (const NumericError& e) {
        throw NumericError("training diverged by step " + std::to_string(out.steps) + " (epoch " +
                           std::to_string(epoch) + " evaluation): " + e.what());
      }
    }
    out.log.push_back(r);
  }
  return out;
}

}  // namespace kstl::transfer
