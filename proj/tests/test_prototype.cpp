#include <gtest/gtest.h>

#include "peace/model/prototype.hpp"
#include "support/fd.hpp"

using namespace peace;
using peace::testing::check_gradients;
using peace::testing::make_param;
using peace::testing::random_tensor;
using peace::testing::weighted_sum;

namespace {

double loss_value(const Tensor& h, const Tensor& v, double tau,
                  const NegativePolicy& policy = NegativePolicy::in_batch()) {
  Graph g;
  return g.value(contrastive_loss(g, g.constant(h), g.constant(v), tau, policy))[0];
}

}  // namespace

TEST(Similarity, RowsSumToOne) {
  Rng rng(1);
  Tensor P = random_tensor({50, 16}, rng);
  for (int t = 0; t < 100; ++t) {
    Tensor h = random_tensor({16}, rng, 3.0);
    auto s = similarity(h.values(), P);
    double sum = 0;
    for (double x : s) {
      EXPECT_GE(x, 0.0);
      sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Similarity, BatchedMatchesSingle) {
  Rng rng(2);
  Tensor P = random_tensor({7, 5}, rng);
  Tensor H = random_tensor({4, 5}, rng);
  Graph g;
  const Tensor& S = g.value(similarity(g, g.constant(H), g.constant(P)));
  for (std::size_t r = 0; r < 4; ++r) {
    auto s = similarity(H.row(r), P);
    for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(S.at(r, i), s[i], 1e-14);
  }
  EXPECT_THROW(similarity(random_tensor({4}, rng).values(), P), ValidationError);
}

TEST(PrototypeView, StaysInsideConvexHull) {
  Rng rng(3);
  Tensor P = random_tensor({30, 8}, rng);
  for (int t = 0; t < 200; ++t) {
    auto v = prototype_view(similarity(random_tensor({8}, rng, 4.0).values(), P), P);
    for (std::size_t k = 0; k < 8; ++k) {
      double lo = P.at(0, k), hi = P.at(0, k);
      for (std::size_t i = 1; i < 30; ++i) lo = std::min(lo, P.at(i, k)), hi = std::max(hi, P.at(i, k));
      EXPECT_GE(v[k], lo - 1e-12);
      EXPECT_LE(v[k], hi + 1e-12);
    }
  }
}

TEST(PrototypeView, OneHotSelectsRow) {
  Rng rng(4);
  Tensor P = random_tensor({5, 3}, rng);
  std::vector<double> s(5, 0.0);
  s[3] = 1.0;
  auto v = prototype_view(s, P);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(v[k], P.at(3, k));
}

TEST(InfoNce, SingleNegativeClosedForm) {
  // Each view equals its own embedding (cos 1) and is orthogonal to the other.
  Tensor h = Tensor::matrix(2, 3, std::vector<double>{1, 0, 0, 0, 2, 0});
  EXPECT_NEAR(loss_value(h, h, 0.2), 2.0 * std::log(1.0 + std::exp(-5.0)), 1e-9);
}

TEST(InfoNce, UniformSimilaritiesGiveTwoLogN) {
  for (std::size_t n : {2u, 5u, 17u}) {
    Tensor h = Tensor::matrix(n, 4, 1.0);
    EXPECT_NEAR(loss_value(h, h, 0.2), 2.0 * std::log(static_cast<double>(n)), 1e-12) << n;
  }
}

TEST(InfoNce, NonNegativeAndDecreasingInAlignment) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    EXPECT_GE(loss_value(random_tensor({6, 4}, rng), random_tensor({6, 4}, rng), 0.2), 0.0);
  }
  // Raising one positive cosine with everything else fixed lowers the loss.
  Tensor h = Tensor::matrix(3, 2, std::vector<double>{1, 0, 0, 1, -1, 0});
  double prev = std::numeric_limits<double>::infinity();
  for (double angle : {1.5, 1.0, 0.5, 0.2, 0.0}) {
    Tensor v = h;
    v.at(1, 0) = std::sin(angle);
    v.at(1, 1) = std::cos(angle);
    double cur = loss_value(h, v, 0.2);
    EXPECT_LT(cur, prev) << angle;
    prev = cur;
  }
}

TEST(InfoNce, BatchOfOneIsAnError) {
  Tensor h = Tensor::matrix(1, 3, 1.0);
  EXPECT_THROW(loss_value(h, h, 0.2), ValidationError);
}

TEST(InfoNce, CrossPrototypePolicyDropsSameOwnerNegatives) {
  Rng rng(6);
  Tensor h = random_tensor({4, 3}, rng);
  Tensor v = random_tensor({4, 3}, rng);
  // Everyone shares an owner except row 3: rows 0..2 only see row 3.
  auto policy = NegativePolicy::cross_prototype({0, 0, 0, 1});
  const double got = loss_value(h, v, 0.5, policy);

  auto cosine_of = [&](const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
    return cosine_sim(a.row(i), b.row(j)) / 0.5;
  };
  double expect = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<std::size_t> cand = {i};
    for (std::size_t j = 0; j < 4; ++j)
      if (j != i && (i == 3 || j == 3)) cand.push_back(j);
    double zf = 0, zb = 0;
    for (auto j : cand) {
      zf += std::exp(cosine_of(h, i, v, j));
      zb += std::exp(cosine_of(v, i, h, j));
    }
    expect += -cosine_of(h, i, v, i) + std::log(zf) - cosine_of(v, i, h, i) + std::log(zb);
  }
  EXPECT_NEAR(got, expect / 4.0, 1e-12);
  EXPECT_NEAR(loss_value(h, v, 0.5, NegativePolicy::cross_prototype({0, 1, 2, 3})), loss_value(h, v, 0.5), 1e-12);
}

TEST(InfoNce, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  Parameter H = make_param("H", random_tensor({5, 6}, rng));
  Parameter V = make_param("V", random_tensor({5, 6}, rng));
  for (auto policy : {NegativePolicy::in_batch(), NegativePolicy::cross_prototype({0, 1, 0, 2, 1})}) {
    auto res = check_gradients({&H, &V}, [&](Graph& g) {
      return contrastive_loss(g, g.param(H), g.param(V), 0.2, policy);
    }, 8);
    EXPECT_LE(res.max_rel_error, 1e-4);
  }
}

TEST(Similarity, GradientsMatchFiniteDifferences) {
  Rng rng(8);
  Parameter H = make_param("H", random_tensor({4, 6}, rng));
  Parameter P = make_param("P", random_tensor({9, 6}, rng));
  auto sim = check_gradients({&H, &P}, [&](Graph& g) {
    return weighted_sum(g, similarity(g, g.param(H), g.param(P)), 1);
  }, 9);
  EXPECT_LE(sim.max_rel_error, 1e-4);
  auto view = check_gradients({&H, &P}, [&](Graph& g) {
    Var p = g.param(P);
    return weighted_sum(g, prototype_view(g, similarity(g, g.param(H), p), p), 2);
  }, 10);
  EXPECT_LE(view.max_rel_error, 1e-4);
}

TEST(TopkMask, KeepsExactlyKWithoutTies) {
  Rng rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> len(1, 300);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> s(len(rng));
    for (auto& x : s) x = u(rng);
    std::uniform_int_distribution<std::size_t> kk(1, s.size());
    const std::size_t k = kk(rng);
    auto m = topk_mask(s, k);
    std::size_t kept = 0;
    double min_kept = 2, max_dropped = -1;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (m[i] == 0.0) {
        ++kept;
        min_kept = std::min(min_kept, s[i]);
      } else {
        EXPECT_EQ(m[i], kNegInf);
        max_dropped = std::max(max_dropped, s[i]);
      }
    }
    ASSERT_EQ(kept, k);
    EXPECT_GT(min_kept, max_dropped);
  }
}

TEST(TopkMask, TiesAtThresholdAreAllKept) {
  std::vector<double> s = {0.1, 0.3, 0.3, 0.3, 0.0};
  auto m = topk_mask(s, 2);
  EXPECT_EQ(m, (std::vector<double>{kNegInf, 0.0, 0.0, 0.0, kNegInf}));
  std::vector<double> flat(6, 0.25);
  auto all = topk_mask(flat, 1);
  EXPECT_EQ(std::count(all.begin(), all.end(), 0.0), 6);
  std::vector<double> above = {0.5, 0.2, 0.2, 0.1};
  auto m2 = topk_mask(above, 1);
  EXPECT_EQ(m2, (std::vector<double>{0.0, kNegInf, kNegInf, kNegInf}));
}

TEST(TopkMask, KOutOfRangeIsAnError) {
  std::vector<double> s = {0.5, 0.5};
  EXPECT_THROW(topk_mask(s, 0), ValidationError);
  EXPECT_THROW(topk_mask(s, 3), ValidationError);
}

TEST(Purity, MajorityVoteAccuracy) {
  std::vector<PrototypeAssignment> a = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 1, 0}, {4, 1, 0}};
  std::vector<std::size_t> truth = {7, 7, 8, 8, 9};
  EXPECT_DOUBLE_EQ(assignment_purity(a, truth), 3.0 / 5.0);
  std::vector<PrototypeAssignment> singletons;
  for (std::size_t e = 0; e < 5; ++e) singletons.push_back({e, e, 0});
  EXPECT_DOUBLE_EQ(assignment_purity(singletons, truth), 1.0);
}

TEST(Assignments, ArgmaxOfSimilarity) {
  Tensor P = Tensor::matrix(3, 2, std::vector<double>{1, 0, 0, 1, -1, 0});
  Tensor H = Tensor::matrix(3, 2, std::vector<double>{0, 5, -3, 1, 2, 0.5});
  auto a = prototype_assignments(H, P);
  EXPECT_EQ(a[0].prototype, 1u);
  EXPECT_EQ(a[1].prototype, 2u);
  EXPECT_EQ(a[2].prototype, 0u);
  EXPECT_EQ(nearest_prototype(H.row(1), P), 2u);
}

TEST(KMeans, RecoversSeparatedClusters) {
  Rng rng(10);
  std::normal_distribution<double> n(0.0, 0.05);
  Tensor pts = Tensor::matrix(60, 2);
  const double cx[3] = {0, 10, -10};
  for (std::size_t i = 0; i < 60; ++i) {
    pts.at(i, 0) = cx[i % 3] + n(rng);
    pts.at(i, 1) = n(rng);
  }
  Tensor c = kmeans_plus_plus(pts, 3, rng);
  std::vector<double> xs = {c.at(0, 0), c.at(1, 0), c.at(2, 0)};
  std::sort(xs.begin(), xs.end());
  EXPECT_NEAR(xs[0], -10, 0.1);
  EXPECT_NEAR(xs[1], 0, 0.1);
  EXPECT_NEAR(xs[2], 10, 0.1);
}
