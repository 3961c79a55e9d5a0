#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kstl/core/errors.hpp"
#include "kstl/data/whitening.hpp"
#include "kstl/nn/checkpoint.hpp"
#include "kstl/transfer/trainer.hpp"

namespace kstl::embed {

struct RowMeta {
  std::string patch_id;
  std::string class_key;
  data::View view = data::View::surface;
};

/// N x D activations entering the final classifier, one row per patch.
struct FeatureMatrix {
  Eigen::MatrixXd values;
  std::vector<RowMeta> rows;
};

template <typename T>
FeatureMatrix extract_features(nn::Model<T>& model, const std::vector<data::Patch>& patches,
                               const data::WhiteningStats& stats, std::size_t batch = 64) {
  FeatureMatrix f;
  const std::size_t d = model.arch().penultimate_width();
  f.values.resize(static_cast<Eigen::Index>(patches.size()), static_cast<Eigen::Index>(d));
  for (std::size_t start = 0; start < patches.size(); start += batch) {
    const std::size_t end = std::min(patches.size(), start + batch);
    std::vector<data::Image<T>> imgs;
    for (std::size_t i = start; i < end; ++i) imgs.push_back(data::whiten<T>(patches[i], stats));
    const auto feats = model.features(transfer::to_batch(imgs));
    for (std::size_t i = 0; i < end - start; ++i)
      for (std::size_t j = 0; j < d; ++j) f.values(Eigen::Index(start + i), Eigen::Index(j)) = double(feats[i * d + j]);
  }
  for (const auto& p : patches) f.rows.push_back({p.patch_id, p.class_key, p.view});
  return f;
}

/// Same, for a stored checkpoint (evaluated in double precision).
inline FeatureMatrix extract_features(const nn::Checkpoint& c, const std::vector<data::Patch>& patches,
                                      const data::WhiteningStats& stats) {
  nn::Model<double> model(c.meta.arch, 0);
  nn::restore(model, c, false);
  return extract_features(model, patches, stats);
}

struct Projection {
  Eigen::MatrixXd coords;  // N x k
  Eigen::MatrixXd axes;    // D x k, unit columns
  Eigen::VectorXd mean;    // D
  std::vector<double> variance;
  std::vector<double> explained;  // fraction of total variance per axis
};

/// Mean-centred projection onto the top-k eigenvectors of the sample
/// covariance, by decreasing eigenvalue. Each axis is signed so that its
/// first loading with magnitude above 1e-12 is positive.
inline Projection pca_project(const Eigen::MatrixXd& x, std::size_t k = 2) {
  const auto n = x.rows(), d = x.cols();
  if (n <= Eigen::Index(k)) throw DataError("PCA needs more rows (" + std::to_string(n) + ") than components (" + std::to_string(k) + ")");
  if (Eigen::Index(k) > d) throw ConfigError("PCA asked for " + std::to_string(k) + " components of " + std::to_string(d) + "-dim data");
  Projection p;
  p.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - p.mean.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / double(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw NumericError("covariance eigendecomposition failed");
  const double total = std::max(es.eigenvalues().sum(), 0.0);
  p.axes.resize(d, Eigen::Index(k));
  for (std::size_t i = 0; i < k; ++i) {
    const Eigen::Index src = d - 1 - Eigen::Index(i);  // eigenvalues ascend
    Eigen::VectorXd v = es.eigenvectors().col(src);
    for (Eigen::Index j = 0; j < d; ++j)
      if (std::abs(v(j)) > 1e-12) {
        if (v(j) < 0) v = -v;
        break;
      }
    p.axes.col(Eigen::Index(i)) = v;
    const double lambda = std::max(es.eigenvalues()(src), 0.0);
    p.variance.push_back(lambda);
    p.explained.push_back(total > 0 ? lambda / total : 0.0);
  }
  p.coords = centered * p.axes;
  return p;
}

struct Separability {
  double silhouette = 0;
  std::vector<std::string> classes;
  Eigen::MatrixXd centroids;          // classes x k
  Eigen::MatrixXd centroid_distance;  // classes x classes
  std::vector<std::string> flags;
};

/// Mean silhouette with Euclidean distances. A point alone in its class
/// scores 0, and a point whose a and b are both 0 scores 0 (flagged).
inline Separability separability_report(const Eigen::MatrixXd& points, const std::vector<std::string>& labels) {
  const auto n = points.rows();
  if (std::size_t(n) != labels.size())
    throw DataError("separability: " + std::to_string(n) + " points but " + std::to_string(labels.size()) + " labels");
  Separability s;
  std::map<std::string, std::vector<Eigen::Index>> members;
  for (Eigen::Index i = 0; i < n; ++i) members[labels[i]].push_back(i);
  if (members.size() < 2) throw DataError("separability needs at least 2 classes, got " + std::to_string(members.size()));
  std::map<std::string, std::size_t> index;
  for (const auto& [k, v] : members) {
    index[k] = s.classes.size();
    s.classes.push_back(k);
  }
  const auto c = Eigen::Index(s.classes.size());
  s.centroids = Eigen::MatrixXd::Zero(c, points.cols());
  for (const auto& [k, v] : members) {
    for (auto i : v) s.centroids.row(Eigen::Index(index[k])) += points.row(i);
    s.centroids.row(Eigen::Index(index[k])) /= double(v.size());
  }
  s.centroid_distance.resize(c, c);
  for (Eigen::Index i = 0; i < c; ++i)
    for (Eigen::Index j = 0; j < c; ++j) s.centroid_distance(i, j) = (s.centroids.row(i) - s.centroids.row(j)).norm();

  std::size_t degenerate = 0, singletons = 0;
  double sum = 0;
  std::vector<double> to_class(static_cast<std::size_t>(c));
  for (Eigen::Index i = 0; i < n; ++i) {
    std::fill(to_class.begin(), to_class.end(), 0.0);
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) to_class[index[labels[j]]] += (points.row(i) - points.row(j)).norm();
    const std::size_t own = index[labels[i]];
    const std::size_t own_size = members[labels[i]].size();
    if (own_size == 1) {
      ++singletons;
      continue;
    }
    const double a = to_class[own] / double(own_size - 1);
    double b = INFINITY;
    for (std::size_t k = 0; k < to_class.size(); ++k)
      if (k != own) b = std::min(b, to_class[k] / double(members[s.classes[k]].size()));
    const double m = std::max(a, b);
    if (m == 0) {
      ++degenerate;
      continue;
    }
    sum += (b - a) / m;
  }
  s.silhouette = sum / double(n);
  if (degenerate) s.flags.push_back(std::to_string(degenerate) + " points coincide with every other point; silhouette 0 for them");
  if (singletons) s.flags.push_back(std::to_string(singletons) + " points are alone in their class; silhouette 0 for them");
  return s;
}

inline std::string embedding_csv(const FeatureMatrix& f, const Projection& p) {
  std::ostringstream os;
  os.precision(17);
  os << "# projection: PCA of penultimate-layer features (linear, in place of a neighbour-graph embedding); explained";
  for (double e : p.explained) os << ' ' << e;
  os << "\npatch_id,class_key,view";
  const char* axis[] = {"x", "y", "z"};
  for (Eigen::Index k = 0; k < p.coords.cols(); ++k) os << ',' << (k < 3 ? axis[k] : ("c" + std::to_string(k)).c_str());
  os << '\n';
  for (std::size_t i = 0; i < f.rows.size(); ++i) {
    os << f.rows[i].patch_id << ',' << f.rows[i].class_key << ',' << data::to_string(f.rows[i].view);
    for (Eigen::Index k = 0; k < p.coords.cols(); ++k) os << ',' << p.coords(Eigen::Index(i), k);
    os << '\n';
  }
  return os.str();
}

}  // namespace kstl::embed
