#include <gtest/gtest.h>

#include <cmath>

#include "kstl/embed/features.hpp"
#include "kstl/synth/generator.hpp"

using namespace kstl;
using namespace kstl::embed;

namespace {

// Cyclic Jacobi eigenvalue iteration for a symmetric matrix; returns
// eigenvalues and eigenvectors (columns) unsorted.
std::pair<Eigen::VectorXd, Eigen::MatrixXd> jacobi_eigen(Eigen::MatrixXd a) {
  const auto n = a.rows();
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-30) break;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
  }
  return {a.diagonal(), v};
}

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal() * double(j + 1);
  return m;
}

double silhouette_reference(const Eigen::MatrixXd& x, const std::vector<std::string>& y) {
  double total = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    std::map<std::string, std::pair<double, int>> acc;
    for (Eigen::Index j = 0; j < x.rows(); ++j) {
      if (i == j) continue;
      auto& e = acc[y[j]];
      e.first += (x.row(i) - x.row(j)).norm();
      e.second += 1;
    }
    if (!acc.count(y[i])) continue;
    const double a = acc[y[i]].first / acc[y[i]].second;
    double b = 1e300;
    for (const auto& [k, e] : acc)
      if (k != y[i]) b = std::min(b, e.first / e.second);
    if (std::max(a, b) > 0) total += (b - a) / std::max(a, b);
  }
  return total / double(x.rows());
}

}  // namespace

TEST(Pca, MatchesJacobiOracleReconstruction) {
  const auto x = random_matrix(50, 5, 1);
  const auto p = pca_project(x, 2);
  const Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd cov = c.transpose() * c / 49.0;
  auto [vals, vecs] = jacobi_eigen(cov);
  std::vector<Eigen::Index> order{0, 1, 2, 3, 4};
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return vals(a) > vals(b); });
  Eigen::MatrixXd top(5, 2);
  top << vecs.col(order[0]), vecs.col(order[1]);
  const double want = (c - c * top * top.transpose()).norm();
  const double got = (c - p.coords * p.axes.transpose()).norm();
  EXPECT_NEAR(got, want, 1e-8);
  EXPECT_NEAR(p.variance[0], vals(order[0]), 1e-8);
  EXPECT_NEAR(p.variance[1], vals(order[1]), 1e-8);
  EXPECT_GE(p.explained[0], p.explained[1]);
}

TEST(Pca, SignConventionAndRowOrderInvariance) {
  const auto x = random_matrix(30, 4, 2);
  const auto p = pca_project(x, 2);
  for (int k = 0; k < 2; ++k) {
    Eigen::Index j = 0;
    while (std::abs(p.axes(j, k)) <= 1e-12) ++j;
    EXPECT_GT(p.axes(j, k), 0);
  }
  Eigen::MatrixXd rev = x.colwise().reverse();
  const auto q = pca_project(rev, 2);
  EXPECT_LT((q.axes - p.axes).norm(), 1e-10);
  EXPECT_LT((q.coords.colwise().reverse() - p.coords).norm(), 1e-9);
}

TEST(Pca, CollinearPointsAndIdempotence) {
  Eigen::MatrixXd line(20, 4);
  for (int i = 0; i < 20; ++i) line.row(i) << i, 2 * i, -i, 0.5 * i;
  const auto p = pca_project(line, 2);
  EXPECT_NEAR(p.explained[0], 1.0, 1e-12);
  EXPECT_NEAR(p.explained[1], 0.0, 1e-12);

  const auto x = random_matrix(40, 6, 3);
  const auto once = pca_project(x, 2);
  const auto twice = pca_project(once.coords, 2);
  // Re-projecting the 2-D coordinates only re-centres (already zero mean)
  // and re-signs; magnitudes are preserved.
  EXPECT_LT((twice.coords.cwiseAbs() - once.coords.cwiseAbs()).norm(), 1e-9);
  EXPECT_THROW(pca_project(random_matrix(2, 3, 1), 2), DataError);
  EXPECT_THROW(pca_project(random_matrix(10, 1, 1), 2), ConfigError);
}

TEST(Silhouette, SeparatedBlobs) {
  Rng rng(5);
  Eigen::MatrixXd x(40, 2);
  std::vector<std::string> y;
  for (int i = 0; i < 40; ++i) {
    const double cx = i < 20 ? 0 : 50;
    x.row(i) << cx + rng.normal(), rng.normal();
    y.push_back(i < 20 ? "a" : "b");
  }
  const auto s = separability_report(x, y);
  EXPECT_GT(s.silhouette, 0.8);
  EXPECT_NEAR(s.silhouette, silhouette_reference(x, y), 1e-12);
  EXPECT_NEAR(s.centroid_distance(0, 1), 50, 1.5);
  std::vector<std::string> renamed;
  for (const auto& l : y) renamed.push_back(l == "a" ? "zz" : "aa");
  EXPECT_NEAR(separability_report(x, renamed).silhouette, s.silhouette, 1e-15);
}

TEST(Silhouette, DegenerateCases) {
  Eigen::MatrixXd same = Eigen::MatrixXd::Constant(6, 2, 3.0);
  const auto s = separability_report(same, {"a", "a", "a", "b", "b", "b"});
  EXPECT_EQ(s.silhouette, 0.0);
  ASSERT_FALSE(s.flags.empty());
  EXPECT_THROW(separability_report(same, {"a", "a", "a", "a", "a", "a"}), DataError);
  const auto x = random_matrix(25, 3, 7);
  std::vector<std::string> y;
  for (int i = 0; i < 25; ++i) y.push_back(std::string(1, char('a' + i % 3)));
  EXPECT_NEAR(separability_report(x, y).silhouette, silhouette_reference(x, y), 1e-12);
}

TEST(Features, RowsMatchPenultimateWidth) {
  synth::SynthSpec s;
  s.images_per_class_per_view = 1;
  s.b_images_per_class_per_view = 1;
  s.edge = 16;
  const auto d = synth::generate(s);
  auto patches = data::extract_all(d.a, {16, 4});
  patches.push_back(patches.front());
  const auto stats = data::compute_whitening_stats(patches, "A/train");
  nn::Model<double> m(nn::desk_architecture(6), 3);
  const auto f = extract_features(m, patches, stats);
  EXPECT_EQ(f.values.rows(), Eigen::Index(patches.size()));
  EXPECT_EQ(f.values.cols(), 32);
  EXPECT_TRUE(f.values.allFinite());
  EXPECT_EQ(f.values.row(0), f.values.row(f.values.rows() - 1));
  EXPECT_EQ(f.rows.front().patch_id, patches.front().patch_id);

  auto arch = nn::desk_architecture(6);
  arch.backbone.back().out_channels = 768;
  arch.head = nn::full_scale_head(6);
  nn::Model<float> full(arch, 1);
  EXPECT_EQ(extract_features(full, patches, stats).values.cols(), 128);

  const auto p = pca_project(f.values, 2);
  const auto csv = embedding_csv(f, p);
  EXPECT_NE(csv.find("patch_id,class_key,view,x,y\n"), std::string::npos);
  EXPECT_EQ(csv.rfind("# projection: PCA", 0), 0u);
}
