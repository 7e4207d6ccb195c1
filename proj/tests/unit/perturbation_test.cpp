#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "gsae/perturbation.hpp"
#include "test_util.hpp"

namespace gsae {
namespace {

const HookPoint kHook{1, HookSite::kResidPost};

struct Setup {
  Model model;
  Transformer<double> model_d;
  ActivationCache cache;
};

const Setup& setup() {
  static const Setup s = [] {
    Model m(test::tiny_config(2, 16, 2, 16, 21));
    test::randomize(m, 21, 0.3);
    auto cache = capture(m, kHook, test::random_sequences(12, 12, 256, 4), {});
    auto md = m.cast<double>();
    return Setup{std::move(m), std::move(md), std::move(cache)};
  }();
  return s;
}

std::vector<float> gaussian_pool(std::size_t n, std::size_t d, std::uint64_t seed,
                                 std::vector<double> scales = {}) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<float> pool(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      const double s = scales.empty() ? 1.0 : scales[k];
      pool[i * d + k] = static_cast<float>(s * normal(rng));
    }
  }
  return pool;
}

// Sequence activations and gradients from the double model.
HookGradients<double> sequence(std::size_t i) {
  const auto tokens = test::random_sequences(20, 10, 256, 40)[i];
  return setup().model_d.grad_wrt_resid(kHook, tokens);
}

std::vector<int> sequence_tokens(std::size_t i) {
  return test::random_sequences(20, 10, 256, 40)[i];
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

TEST(DirectionSampler, DrawsAreUnitNorm) {
  const auto pool = gaussian_pool(50, 16, 1);
  for (auto family : {DirectionFamily::kActivationDiff, DirectionFamily::kIsotropic,
                      DirectionFamily::kCovariance}) {
    DirectionSampler s(family, pool, 50, 16, 3);
    for (int i = 0; i < 200; ++i) {
      const auto v = s.next();
      ASSERT_EQ(v.size(), 16u);
      EXPECT_NEAR(test::l2(v), 1.0, 1e-9) << to_string(family);
    }
  }
}

TEST(DirectionSampler, IsotropicMeanIsNearZero) {
  const std::size_t d = 16, n = 20000;
  DirectionSampler s(DirectionFamily::kIsotropic, {}, 0, d, 5);
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto v = s.next();
    for (std::size_t k = 0; k < d; ++k) mean[k] += v[k] / n;
  }
  // Each component of a unit isotropic draw has variance 1/d.
  const double bound = 4.0 / std::sqrt(double(d) * n);
  for (double m : mean) EXPECT_LT(std::abs(m), bound);
}

TEST(DirectionSampler, IdentityCovarianceSpreadsEvenly) {
  const std::size_t d = 8, n = 20000;
  const auto pool = gaussian_pool(5000, d, 6);
  DirectionSampler s(DirectionFamily::kCovariance, pool, 5000, d, 7);
  std::vector<double> second(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto v = s.next();
    for (std::size_t k = 0; k < d; ++k) second[k] += v[k] * v[k] / n;
  }
  for (double m : second) EXPECT_NEAR(m, 1.0 / d, 0.1 / d);
}

TEST(DirectionSampler, RawCovarianceDrawsMatchPool) {
  const std::size_t d = 6, n = 10000;
  const auto pool = gaussian_pool(400, d, 8, {3, 1, 0.5, 2, 1, 0.2});
  // Correlate two coordinates.
  auto mixed = pool;
  for (std::size_t i = 0; i < 400; ++i) mixed[i * d + 1] += 0.8f * mixed[i * d];
  const auto target = empirical_covariance(mixed, 400, d);
  DirectionSampler s(DirectionFamily::kCovariance, mixed, 400, d, 9);
  std::vector<float> draws(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto v = s.next_raw();
    for (std::size_t k = 0; k < d; ++k) draws[i * d + k] = static_cast<float>(v[k]);
  }
  const auto got = empirical_covariance(draws, n, d);
  double diff = 0, norm = 0;
  for (std::size_t i = 0; i < d * d; ++i) {
    diff += std::pow(got[i] - target[i], 2);
    norm += target[i] * target[i];
  }
  EXPECT_LT(std::sqrt(diff / norm), 0.1);
  EXPECT_EQ(s.jitter(), 0.0);
}

TEST(DirectionSampler, SingularPoolGetsJitter) {
  const std::size_t d = 4, n = 30;
  std::mt19937_64 rng(10);
  std::normal_distribution<double> normal;
  std::vector<float> pool(n * d, 0.0f);
  for (std::size_t i = 0; i < n; ++i) {
    pool[i * d] = static_cast<float>(normal(rng));
    pool[i * d + 1] = static_cast<float>(normal(rng));
  }
  DirectionSampler s(DirectionFamily::kCovariance, pool, n, d, 11);
  EXPECT_GT(s.jitter(), 0.0);
  for (int i = 0; i < 20; ++i) EXPECT_NEAR(test::l2(s.next()), 1.0, 1e-9);
}

TEST(DirectionSampler, RejectsTooSmallPool) {
  const std::vector<float> one(4, 1.0f);
  EXPECT_THROW(DirectionSampler(DirectionFamily::kActivationDiff, one, 1, 4, 0),
               std::invalid_argument);
  EXPECT_THROW(DirectionSampler(DirectionFamily::kCovariance, one, 1, 4, 0),
               std::invalid_argument);
  EXPECT_NO_THROW(DirectionSampler(DirectionFamily::kIsotropic, {}, 0, 4, 0));
  EXPECT_EQ(parse_direction_family("covariance_random"), DirectionFamily::kCovariance);
  EXPECT_THROW(parse_direction_family("gaussian"), std::invalid_argument);
}

TEST(EmpiricalCovariance, MatchesNaiveSum) {
  const std::size_t n = 30, d = 5;
  const auto pool = gaussian_pool(n, d, 12);
  const auto cov = empirical_covariance(pool, n, d);
  std::vector<double> mean(d, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) mean[k] += pool[i * d + k] / double(n);
  }
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = 0; b < d; ++b) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) {
        s += (pool[i * d + a] - mean[a]) * (pool[i * d + b] - mean[b]);
      }
      EXPECT_NEAR(cov[a * d + b], s / (n - 1), 1e-12);
    }
  }
}

ActivationCache aligned_cache(bool along_gradient) {
  // Gradient e2; activations either in span(e0, e1) or along e2.
  ActivationCache cache(4, kHook, io::Sha256{});
  std::mt19937_64 rng(13);
  std::normal_distribution<float> normal;
  const std::vector<float> g{0, 0, 2, 0};
  for (int i = 0; i < 40; ++i) {
    std::vector<float> x(4, 0.0f);
    if (along_gradient) {
      x[2] = normal(rng);
    } else {
      x[0] = normal(rng);
      x[1] = normal(rng);
    }
    cache.append(x, g, 0, static_cast<std::uint16_t>(i), 0);
  }
  return cache;
}

TEST(DirectionalDerivatives, GeometryOfActivationDifferences) {
  const auto orth = directional_derivative_comparison(aligned_cache(false), 500, 1);
  ASSERT_EQ(orth.size(), 3u);
  EXPECT_EQ(orth[0].family, DirectionFamily::kActivationDiff);
  EXPECT_EQ(orth[0].mean_abs_derivative, 0.0);
  EXPECT_LT(orth[2].mean_abs_derivative, 1e-2);
  EXPECT_GT(orth[1].mean_abs_derivative, 0.5);
  EXPECT_EQ(orth[1].n, 500u);

  const auto along = directional_derivative_comparison(aligned_cache(true), 500, 1);
  EXPECT_NEAR(along[0].mean_abs_derivative, 2.0, 1e-6);
  EXPECT_NEAR(along[2].mean_abs_derivative, 2.0, 1e-2);
}

TEST(DirectionalDerivatives, SeededAndRejectsGradientFreeCache) {
  const auto& s = setup();
  const auto a = directional_derivative_comparison(s.cache, 300, 4);
  const auto b = directional_derivative_comparison(s.cache, 300, 4);
  for (int f = 0; f < 3; ++f) {
    EXPECT_EQ(a[f].mean_abs_derivative, b[f].mean_abs_derivative);
    EXPECT_GT(a[f].mean_abs_derivative, 0.0);
  }
  ActivationCache empty_grads(4, kHook, io::Sha256{});
  empty_grads.append(std::vector<float>(4, 1.0f), std::vector<float>(4, 0.0f), 0, 0, 0);
  EXPECT_THROW(directional_derivative_comparison(empty_grads, 10, 0), std::invalid_argument);
}

TEST(PerturbationResponse, ZeroDeltaIsZero) {
  const auto seq = sequence(0);
  const auto tokens = sequence_tokens(0);
  const std::vector<double> zero(16, 0.0);
  for (std::size_t p = 0; p < tokens.size(); ++p) {
    EXPECT_EQ(perturbation_response<double>(setup().model_d, kHook, seq.x, tokens, p, zero), 0.0);
  }
}

TEST(PerturbationResponse, FirstOrderTaylorAgreement) {
  std::mt19937_64 rng(14);
  int checked = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    const auto seq = sequence(i);
    const auto tokens = sequence_tokens(i);
    for (std::size_t p = 0; p + 1 < tokens.size(); p += 3) {
      std::span<const double> g(seq.grad.data() + p * 16, 16);
      const double gn = test::l2(g);
      if (gn == 0.0) continue;
      auto noise = test::normal_values<double>(16, rng, 1.0);
      std::vector<double> delta(16);
      for (int k = 0; k < 16; ++k) delta[k] = g[k] / gn + 0.5 * noise[k] / std::sqrt(16.0);
      const double scale = 1e-4 / test::l2(delta);
      for (auto& v : delta) v *= scale;
      const double predicted = dot(g, delta);
      const double actual =
          perturbation_response<double>(setup().model_d, kHook, seq.x, tokens, p, delta);
      EXPECT_NEAR(actual, predicted, 0.1 * std::abs(predicted)) << "seq " << i << " pos " << p;
      ++checked;
    }
  }
  EXPECT_GT(checked, 20);
}

TEST(PerturbationResponse, StepAgainstGradientLowersLoss) {
  const auto seq = sequence(3);
  const auto tokens = sequence_tokens(3);
  for (std::size_t p = 0; p + 1 < tokens.size(); ++p) {
    std::span<const double> g(seq.grad.data() + p * 16, 16);
    const double gn = test::l2(g);
    std::vector<double> down(16), up(16);
    for (int k = 0; k < 16; ++k) {
      down[k] = -1e-3 * g[k] / gn;
      up[k] = -down[k];
    }
    EXPECT_LT(perturbation_response<double>(setup().model_d, kHook, seq.x, tokens, p, down), 0.0);
    EXPECT_GT(perturbation_response<double>(setup().model_d, kHook, seq.x, tokens, p, up), 0.0);
  }
}

TEST(PerturbationResponse, CurvatureTermIsEven) {
  std::mt19937_64 rng(15);
  const auto seq = sequence(5);
  const auto tokens = sequence_tokens(5);
  const auto& m = setup().model_d;
  for (std::size_t p = 0; p + 1 < tokens.size(); p += 2) {
    auto d1 = test::normal_values<double>(16, rng, 1.0);
    const double s = 0.02 / test::l2(d1);
    for (auto& v : d1) v *= s;
    std::vector<double> neg(16), dbl(16), dneg(16);
    for (int k = 0; k < 16; ++k) {
      neg[k] = -d1[k];
      dbl[k] = 2 * d1[k];
      dneg[k] = -2 * d1[k];
    }
    const double even1 = perturbation_response<double>(m, kHook, seq.x, tokens, p, d1) +
                         perturbation_response<double>(m, kHook, seq.x, tokens, p, neg);
    const double even2 = perturbation_response<double>(m, kHook, seq.x, tokens, p, dbl) +
                         perturbation_response<double>(m, kHook, seq.x, tokens, p, dneg);
    // Odd terms cancel, leaving a quadratic in the step size.
    EXPECT_NEAR(even2 / even1, 4.0, 0.4) << "pos " << p;
  }
}

TEST(PerturbationResponse, FloatModelAgreesWithDouble) {
  const auto tokens = sequence_tokens(2);
  const auto seq = sequence(2);
  const std::vector<float> xf(seq.x.begin(), seq.x.end());
  std::vector<double> delta(16, 0.0);
  delta[4] = 0.5;
  const double f = perturbation_response<float>(setup().model, kHook, xf, tokens, 1, delta);
  const double d = perturbation_response<double>(setup().model_d, kHook, seq.x, tokens, 1, delta);
  EXPECT_NEAR(f, d, 1e-4 + 1e-2 * std::abs(d));
  EXPECT_THROW(perturbation_response<double>(setup().model_d, kHook, seq.x, tokens, 99, delta),
               std::out_of_range);
}

// Ranks by counting: 1 + #smaller + (#equal others) / 2.
std::vector<double> counting_ranks(std::span<const double> v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0, equal = 0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      if (v[j] < v[i]) ++less;
      if (j != i && v[j] == v[i]) ++equal;
    }
    r[i] = 1 + less + equal / 2;
  }
  return r;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  const double n = double(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

TEST(Spearman, PerfectAgreementAndReversal) {
  const std::vector<double> x{1, 2, 3};
  EXPECT_DOUBLE_EQ(*spearman(x, std::vector<double>{10, 20, 30}), 1.0);
  EXPECT_DOUBLE_EQ(*spearman(x, std::vector<double>{3, 2, 1}), -1.0);
  EXPECT_EQ(average_ranks(std::vector<double>{5, 1, 5, 2}), (std::vector<double>{3.5, 1, 3.5, 2}));
}

TEST(Spearman, MatchesCountingOracle) {
  std::mt19937_64 rng(16);
  std::uniform_int_distribution<int> small(0, 6);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 5 + trial % 40;
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      // Small integer values force plenty of ties.
      a[i] = trial % 2 ? small(rng) : std::normal_distribution<double>()(rng);
      b[i] = small(rng);
    }
    const auto ra = counting_ranks(a), rb = counting_ranks(b);
    EXPECT_EQ(average_ranks(a), ra);
    const auto got = spearman(a, b);
    ASSERT_TRUE(got.has_value());
    EXPECT_NEAR(*got, pearson(ra, rb), 1e-12);
    EXPECT_GE(*got, -1.0);
    EXPECT_LE(*got, 1.0);
  }
}

TEST(Spearman, InvariantUnderMonotoneTransforms) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = test::normal_values<double>(30, rng);
    const auto b = test::normal_values<double>(30, rng);
    std::vector<double> ta(30), tb(30);
    for (int i = 0; i < 30; ++i) {
      ta[i] = std::exp(a[i]);
      tb[i] = 3 * b[i] * b[i] * b[i] + 1;
    }
    EXPECT_EQ(*spearman(a, b), *spearman(ta, tb));
    EXPECT_NEAR(*spearman(a, b), *spearman(b, a), 1e-15);
  }
}

TEST(Spearman, ZeroVarianceIsAbsent) {
  const std::vector<double> flat{2, 2, 2, 2}, x{1, 2, 3, 4};
  EXPECT_FALSE(spearman(flat, x).has_value());
  EXPECT_FALSE(spearman(x, flat).has_value());
  EXPECT_THROW(spearman(x, std::vector<double>{1, 2}), std::invalid_argument);
}

TEST(CorrelationStudy, FirstOrderTermTracksSmallPerturbations) {
  const auto& s = setup();
  CorrelationOptions opt;
  opt.n_samples = 150;
  opt.seed = 3;
  const std::vector<double> buckets{1e-3, 1.0};
  const auto reps = correlation_study(s.model_d, s.cache, buckets, opt);
  ASSERT_EQ(reps.size(), 2u);
  EXPECT_EQ(reps[0].n_samples, 150u);
  EXPECT_FALSE(reps[0].insufficient);
  ASSERT_TRUE(reps[0].spearman_firstorder_vs_dloss.has_value());
  ASSERT_TRUE(reps[0].spearman_norm_vs_dloss.has_value());
  EXPECT_GT(*reps[0].spearman_firstorder_vs_dloss, 0.9);
  EXPECT_GT(*reps[0].spearman_firstorder_vs_dloss, *reps[0].spearman_norm_vs_dloss);
  EXPECT_GT(reps[0].dloss_spread_orders, 0.0);
  EXPECT_EQ(reps[1].layer, kHook.layer);

  const auto again = correlation_study(s.model_d, s.cache, buckets, opt);
  EXPECT_EQ(again[0].spearman_firstorder_vs_dloss, reps[0].spearman_firstorder_vs_dloss);
}

TEST(CorrelationStudy, DegenerateAndInsufficientBuckets) {
  const auto& s = setup();
  CorrelationOptions fixed;
  fixed.n_samples = 40;
  fixed.relative_std = 0.0;
  const std::vector<double> bucket{0.01};
  const auto r = correlation_study(s.model_d, s.cache, bucket, fixed);
  EXPECT_FALSE(r[0].spearman_norm_vs_dloss.has_value());
  EXPECT_TRUE(r[0].spearman_firstorder_vs_dloss.has_value());

  CorrelationOptions few;
  few.n_samples = 5;
  const auto f = correlation_study(s.model_d, s.cache, bucket, few);
  EXPECT_TRUE(f[0].insufficient);
  EXPECT_EQ(f[0].n_samples, 5u);

  ActivationCache narrow(8, kHook, io::Sha256{});
  narrow.append(std::vector<float>(8, 1.0f), std::vector<float>(8, 1.0f), 0, 0, 0);
  EXPECT_THROW(correlation_study(s.model_d, narrow, bucket, few), std::invalid_argument);
}

TEST(PerturbationCsv, RowsAndAbsentValues) {
  std::ostringstream os;
  write_perturbation_header(os);
  const std::vector<DerivativeComparison> d{{2, DirectionFamily::kIsotropic, 0.5, 1000}};
  write_derivative_rows(os, d);
  std::vector<CorrelationReport> c(2);
  c[0].layer = 3;
  c[0].bucket_mean = 0.01;
  c[0].spearman_firstorder_vs_dloss = 0.75;
  c[0].dloss_spread_orders = 2.5;
  c[0].n_samples = 200;
  c[1].layer = 3;
  c[1].bucket_mean = 1;
  c[1].insufficient = true;
  c[1].n_samples = 4;
  write_correlation_rows(os, c);
  EXPECT_EQ(os.str(),
            "layer,family_or_bucket,metric,value,n\n"
            "2,isotropic_random,mean_abs_directional_derivative,0.5,1000\n"
            "3,bucket_0.01,spearman_norm_vs_dloss,nan,200\n"
            "3,bucket_0.01,spearman_firstorder_vs_dloss,0.75,200\n"
            "3,bucket_0.01,dloss_spread_orders,2.5,200\n"
            "3,bucket_1,insufficient,nan,4\n");
}

}  // namespace
}  // namespace gsae
