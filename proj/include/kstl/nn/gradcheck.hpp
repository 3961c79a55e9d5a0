#pragma once

// Central finite-difference checks for every layer type, in double precision.
// Each check contracts the layer output with a fixed random tensor r to get a
// scalar loss L = sum(r * y), feeds r as grad_out to the analytic backward,
// and compares against (L(p + h) - L(p - h)) / 2h on random coordinates.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "kstl/core/rng.hpp"
#include "kstl/core/tensor.hpp"
#include "kstl/nn/layers.hpp"
#include "kstl/nn/loss.hpp"
#include "kstl/nn/model.hpp"

namespace kstl::nn {

struct GradCheckOptions {
  double step = 1e-5;
  std::size_t coordinates = 12;  // per checked tensor
  double tolerance = 1e-5;
  std::uint64_t seed = 7;
};

struct GradCheckResult {
  std::string layer;
  double worst_relative_error = 0.0;
  std::size_t coordinates_checked = 0;
  bool passed(double tol) const { return worst_relative_error < tol; }
};

/// |analytic - numeric| / max(1, |analytic|)
inline double gradient_relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

inline Tensor<double> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(shape);
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

inline double contract(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

namespace detail {

// Perturbs random coordinates of `target` and compares the numeric slope of
// `loss` with `analytic`.
inline void probe(Tensor<double>& target, const Tensor<double>& analytic, const std::function<double()>& loss,
                  Rng& rng, const GradCheckOptions& opt, GradCheckResult& res) {
  const std::size_t n = std::min(opt.coordinates, target.size());
  std::vector<std::size_t> idx(target.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(idx);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = idx[k];
    const double orig = target[i];
    target[i] = orig + opt.step;
    const double lp = loss();
    target[i] = orig - opt.step;
    const double lm = loss();
    target[i] = orig;
    const double numeric = (lp - lm) / (2 * opt.step);
    res.worst_relative_error = std::max(res.worst_relative_error, gradient_relative_error(analytic[i], numeric));
    ++res.coordinates_checked;
  }
}

}  // namespace detail

inline GradCheckResult check_conv2d(const GradCheckOptions& opt = {}) {
  Rng rng(derive_seed(opt.seed, "gradcheck/conv2d"));
  Tensor<double> x = random_tensor({2, 3, 6, 5}, rng);
  Tensor<double> w = random_tensor({4, 3, 3, 3}, rng, 0.5);
  Tensor<double> b = random_tensor({4}, rng);
  const Conv2dGeometry g{1, 1};
  Tensor<double> r = random_tensor(conv2d_forward(x, w, b, g).shape(), rng);
  auto grads = conv2d_backward(r, x, w, g);
  auto loss = [&] { return contract(conv2d_forward(x, w, b, g), r); };
  GradCheckResult res{"conv2d"};
  detail::probe(x, grads.input, loss, rng, opt, res);
  detail::probe(w, grads.weight, loss, rng, opt, res);
  detail::probe(b, grads.bias, loss, rng, opt, res);
  return res;
}

inline GradCheckResult check_conv2d_strided(const GradCheckOptions& opt = {}) {
  Rng rng(derive_seed(opt.seed, "gradcheck/conv2d_strided"));
  Tensor<double> x = random_tensor({2, 2, 7, 7}, rng);
  Tensor<double> w = random_tensor({3, 2, 3, 3}, rng, 0.5);
  Tensor<double> b = random_tensor({3}, rng);
  const Conv2dGeometry g{2, 1};
  Tensor<double> r = random_tensor(conv2d_forward(x, w, b, g).shape(), rng);
  auto grads = conv2d_backward(r, x, w, g);
  auto loss = [&] { return contract(conv2d_forward(x, w, b, g), r); };
  GradCheckResult res{"conv2d(stride 2)"};
  detail::probe(x, grads.input, loss, rng, opt, res);
  detail::probe(w, grads.weight, loss, rng, opt, res);
  detail::probe(b, grads.bias, loss, rng, opt, res);
  return res;
}

inline GradCheckResult check_batchnorm(const Shape& shape, Mode mode, const GradCheckOptions& opt = {}) {
  Rng rng(derive_seed(opt.seed, "gradcheck/batchnorm", shape.size() * 2 + (mode == Mode::train)));
  const std::size_t c = shape[1];
  Tensor<double> x = random_tensor(shape, rng, 2.0);
  Tensor<double> gamma = random_tensor({c}, rng);
  Tensor<double> beta = random_tensor({c}, rng);
  Tensor<double> rmean = random_tensor({c}, rng, 0.3);
  Tensor<double> rvar({c});
  for (auto& v : rvar.values()) v = 0.5 + rng.uniform();
  const BatchNormOptions bo;
  auto fwd = [&](BatchNormCache<double>* cache) {
    Tensor<double> m = rmean, v = rvar;  // running stats are not part of the function
    return batchnorm_forward(x, gamma, beta, mode, m, v, bo, cache);
  };
  BatchNormCache<double> cache;
  Tensor<double> r = random_tensor(fwd(&cache).shape(), rng);
  auto grads = batchnorm_backward(r, gamma, cache);
  auto loss = [&] { return contract(fwd(nullptr), r); };
  GradCheckResult res{std::string("batchnorm") + (shape.size() == 4 ? "2d" : "1d") +
                      (mode == Mode::train ? "(train)" : "(eval)")};
  detail::probe(x, grads.input, loss, rng, opt, res);
  detail::probe(gamma, grads.gamma, loss, rng, opt, res);
  detail::probe(beta, grads.beta, loss, rng, opt, res);
  return res;
}

inline GradCheckResult check_relu(const GradCheckOptions& opt = {}) {
  Rng rng(derive_seed(opt.seed, "gradcheck/relu"));
  Tensor<double> x = random_tensor({3, 20}, rng);
  Tensor<double> r = random_tensor(x.shape(), rng);
  Tensor<double> g = relu_backward(r, x);
  GradCheckResult res{"relu"};
  detail::probe(x, g, [&] { return contract(relu_forward(x), r); }, rng, opt, res);
  return res;
}

inline GradCheckResult check_maxpool2(const GradCheckOptions& opt = {}) {
  Rng rng(derive_seed(opt.seed, "gradcheck/maxpool2"));
  Tensor<double> x = random_tensor({2, 3, 6, 7}, rng);
  std::vector<std::size_t> argmax;
  Tensor<double> r = random_tensor(maxpool2_forward(x, &argmax).shape(), rng);
  Tensor<double> g = maxpool2_backward(r, x.shape(), argmax);
  GradCheckResult res{"maxpool2"};
  detail::probe(x, g, [&] { return contract(maxpool2_forward(x), r); }, rng, opt, res);
  return res;
}

inline GradCheckResult check_global_avg_pool(const GradCheckOptions& opt = {}) {
  Rng rng(derive_seed(opt.seed, "gradcheck/gap"));
  Tensor<double> x = random_tensor({2, 4, 3, 5}, rng);
  Tensor<double> r = random_tensor({2, 4}, rng);
  Tensor<double> g = global_avg_pool_backward(r, x.shape());
  GradCheckResult res{"global_avg_pool"};
  detail::probe(x, g, [&] { return contract(global_avg_pool_forward(x), r); }, rng, opt, res);
  return res;
}

inline GradCheckResult check_linear(const GradCheckOptions& opt = {}) {
  Rng rng(derive_seed(opt.seed, "gradcheck/linear"));
  Tensor<double> x = random_tensor({4, 7}, rng);
  Tensor<double> w = random_tensor({5, 7}, rng);
  Tensor<double> b = random_tensor({5}, rng);
  Tensor<double> r = random_tensor({4, 5}, rng);
  auto grads = linear_backward(r, x, w);
  auto loss = [&] { return contract(linear_forward(x, w, b), r); };
  GradCheckResult res{"linear"};
  detail::probe(x, grads.input, loss, rng, opt, res);
  detail::probe(w, grads.weight, loss, rng, opt, res);
  detail::probe(b, grads.bias, loss, rng, opt, res);
  return res;
}

inline GradCheckResult check_dropout(const GradCheckOptions& opt = {}) {
  Rng rng(derive_seed(opt.seed, "gradcheck/dropout"));
  Tensor<double> x = random_tensor({4, 10}, rng);
  const auto mask = dropout_mask<double>(x.size(), 0.5, rng);
  Tensor<double> r = random_tensor(x.shape(), rng);
  Tensor<double> g = dropout_backward(r, &mask);
  GradCheckResult res{"dropout(train, fixed mask)"};
  detail::probe(x, g, [&] { return contract(dropout_forward(x, 0.5, Mode::train, &mask), r); }, rng, opt, res);
  return res;
}

inline GradCheckResult check_softmax_cross_entropy(const GradCheckOptions& opt = {}) {
  Rng rng(derive_seed(opt.seed, "gradcheck/xent"));
  Tensor<double> z = random_tensor({4, 6}, rng, 2.0);
  const std::vector<int> labels{0, 3, 5, 2};
  auto g = softmax_cross_entropy<double>(z, labels).grad_logits;
  GradCheckResult res{"softmax_cross_entropy"};
  detail::probe(z, g, [&] { return softmax_cross_entropy<double>(z, labels).loss; }, rng, opt, res);
  return res;
}

/// Whole-model check: loss = cross-entropy of a small 3-class network in train
/// mode (batch-norm on batch statistics, dropout with a re-seeded mask).
inline GradCheckResult check_model(const GradCheckOptions& opt = {}) {
  ArchitectureConfig arch;
  arch.input_edge = 8;
  arch.backbone = {{3, true, true}, {4, true, false}};
  arch.head = make_head({5}, 3, true, 0.3);
  Model<double> model(arch, derive_seed(opt.seed, "gradcheck/model-init"));
  Rng rng(derive_seed(opt.seed, "gradcheck/model"));
  Tensor<double> x = random_tensor({4, 3, 8, 8}, rng);
  const std::vector<int> labels{0, 1, 2, 1};
  const std::uint64_t mask_seed = derive_seed(opt.seed, "gradcheck/model-dropout");
  auto loss = [&] {
    Rng dr(mask_seed);
    return softmax_cross_entropy<double>(model.forward(x, Mode::train, &dr), labels).loss;
  };
  Rng dr(mask_seed);
  auto lr = softmax_cross_entropy<double>(model.forward(x, Mode::train, &dr), labels);
  auto grads = model.backward(lr.grad_logits);
  GradCheckResult res{"model(end-to-end)"};
  for (auto& e : model.params().values()) detail::probe(e.value, grads.at(e.name), loss, rng, opt, res);
  return res;
}

inline std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& opt = {}) {
  return {check_conv2d(opt),
          check_conv2d_strided(opt),
          check_batchnorm({6, 3, 3, 2}, Mode::train, opt),
          check_batchnorm({8, 5}, Mode::train, opt),
          check_batchnorm({4, 3, 2, 2}, Mode::eval, opt),
          check_relu(opt),
          check_maxpool2(opt),
          check_global_avg_pool(opt),
          check_linear(opt),
          check_dropout(opt),
          check_softmax_cross_entropy(opt),
          check_model(opt)};
}

}  // namespace kstl::nn
