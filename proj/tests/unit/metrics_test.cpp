#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "gsae/corpus.hpp"
#include "gsae/metrics.hpp"
#include "test_util.hpp"

namespace gsae {
namespace {

struct Fixture {
  Model model;
  ActivationCache train, eval;
};

// A briefly trained model, so reconstructions that discard information cost
// loss rather than helping by luck.
const Fixture& fixture() {
  static const Fixture f = [] {
    const auto text = generate_synthetic_corpus(200000, 1);
    const std::vector<int> stream(text.begin(), text.end());
    TrainLmOptions opts;
    opts.steps = 150;
    opts.batch_size = 8;
    opts.warmup_steps = 10;
    opts.lr = 1e-2f;
    auto m = train_lm(stream, test::tiny_config(2, 16, 2, 16, 3), opts).model;
    const auto seqs = chunk_sequences(stream, 16);
    const HookPoint hook{0, HookSite::kResidPost};
    const std::vector<std::vector<int>> train_seqs(seqs.begin(), seqs.begin() + 40);
    const std::vector<std::vector<int>> eval_seqs(seqs.end() - 8, seqs.end());
    auto train = capture(m, hook, train_seqs, {});
    auto eval = capture(m, hook, eval_seqs, {});
    return Fixture{std::move(m), std::move(train), std::move(eval)};
  }();
  return f;
}

std::vector<float> all_x(const ActivationCache& c) {
  std::vector<std::size_t> idx(c.size());
  std::iota(idx.begin(), idx.end(), 0u);
  return c.gather_x(idx);
}

SaeConfig base_config(SaeVariant variant = SaeVariant::kTopK) {
  SaeConfig c;
  c.d = 16;
  c.h = 64;
  c.k = 8;
  c.beta = 1.0;
  c.variant = variant;
  c.batch_size = 64;
  c.train_steps = 60;
  return c;
}

TEST(Nmse, HandExamples) {
  const std::vector<float> x{3, 4};
  EXPECT_EQ(nmse(x, x), 0.0);
  EXPECT_EQ(nmse(x, std::vector<float>{0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(nmse(x, std::vector<float>{3, 0}), 0.8);
  EXPECT_THROW(nmse(std::vector<float>{0, 0}, x), std::invalid_argument);
}

TEST(Nmse, ScaleEquivariantInError) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = test::normal_values<float>(10, rng);
    const auto e = test::normal_values<float>(10, rng, 0.25);
    std::vector<float> a(10), b(10);
    for (int i = 0; i < 10; ++i) {
      a[i] = x[i] + e[i];
      b[i] = x[i] + 2 * e[i];
    }
    // Recompute the perturbed points' errors exactly as stored in float.
    double ea = 0, eb = 0;
    for (int i = 0; i < 10; ++i) {
      ea += std::pow(double(a[i]) - x[i], 2);
      eb += std::pow(double(b[i]) - x[i], 2);
    }
    EXPECT_NEAR(nmse(x, b) / nmse(x, a), std::sqrt(eb / ea), 1e-12);
    EXPECT_NEAR(nmse(x, b) / nmse(x, a), 2.0, 1e-5);
  }
}

TEST(Nmse, MeanOverRecords) {
  const std::vector<float> x{3, 4, 1, 0}, xh{3, 0, 1, 0};
  EXPECT_DOUBLE_EQ(mean_nmse(x, xh, 2), (0.8 + 0.0) / 2);
}

TEST(LossAdded, IdentityIsExactlyZero) {
  const auto& f = fixture();
  EXPECT_EQ(loss_added(f.model, f.eval, all_x(f.eval)), 0.0);
}

TEST(LossAdded, PartialDegradationLiesBetween) {
  const auto& f = fixture();
  const auto x = all_x(f.eval);
  const auto runs = f.eval.sequences();
  const std::size_t half_runs = runs.size() / 2;
  auto mixed = x;
  ActivationCache degraded_part(16, f.eval.hook(), f.eval.header().checkpoint_hash);
  std::vector<float> degraded_x;
  for (std::size_t r = 0; r < half_runs; ++r) {
    for (std::size_t i = runs[r].begin; i < runs[r].begin + runs[r].length; ++i) {
      degraded_part.append(f.eval.record(i));
      for (std::size_t j = i * 16; j < (i + 1) * 16; ++j) {
        mixed[j] *= 0.3f;
        degraded_x.push_back(mixed[j]);
      }
    }
  }
  const double subgroup = loss_added(f.model, degraded_part, degraded_x);
  const double got = loss_added(f.model, f.eval, mixed);
  EXPECT_GT(subgroup, 0.0);
  EXPECT_GT(got, 0.0);
  EXPECT_LT(got, subgroup);
  // Per-sequence averaging: the exact half contributes zeros.
  EXPECT_NEAR(got, subgroup * double(half_runs) / runs.size(), 1e-12);
}

TEST(LossAdded, DecoderBiasOnlyMatchesDirectForward) {
  const auto& f = fixture();
  auto cfg = base_config();
  auto params = init_params(cfg);
  std::mt19937_64 rng(4);
  for (auto& v : params.b_dec.mutable_data()) v = std::normal_distribution<float>()(rng);
  const auto runs = f.eval.sequences();
  std::vector<float> xh(f.eval.size() * 16);
  for (std::size_t i = 0; i < f.eval.size(); ++i) {
    for (int j = 0; j < 16; ++j) xh[i * 16 + j] = params.b_dec.at(j);
  }
  double expected = 0;
  for (const auto& run : runs) {
    std::vector<int> tokens;
    std::vector<float> x;
    for (std::size_t i = run.begin; i < run.begin + run.length; ++i) {
      tokens.push_back(static_cast<int>(f.eval.token_id(i)));
      x.insert(x.end(), f.eval.x(i).begin(), f.eval.x(i).end());
    }
    const std::vector<int> targets(tokens.begin() + 1, tokens.end());
    const ag::Shape shape{run.length, 16};
    const double base = f.model.loss_from_resid(0, ag::Tensor<float>(shape, x), targets);
    const double rec = f.model.loss_from_resid(
        0, ag::Tensor<float>(shape, std::vector<float>(xh.begin(), xh.begin() + run.length * 16)),
        targets);
    expected += (rec - base) / base;
  }
  expected /= runs.size();
  const double got = loss_added(f.model, f.eval, xh);
  EXPECT_GT(got, 0.0);
  EXPECT_NEAR(got, expected, 1e-9);
}

TEST(LossAdded, RejectsMisalignedInput) {
  const auto& f = fixture();
  EXPECT_THROW(loss_added(f.model, f.eval, std::vector<float>(5)), std::invalid_argument);
}

TEST(LossAdded, NonFiniteReportsRecord) {
  const auto& f = fixture();
  auto xh = all_x(f.eval);
  xh[20] = INFINITY;
  try {
    loss_added(f.model, f.eval, xh);
    FAIL() << "expected a runtime error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("record"), std::string::npos) << e.what();
  }
}

TEST(DeadFraction, Extremes) {
  DeadLatentTracker t(10, 5);
  t.update(std::vector<std::uint8_t>(10, 1));
  EXPECT_EQ(dead_fraction(t), 0.0);
  DeadLatentTracker never(10, 5);
  for (int i = 0; i < 5; ++i) never.update(std::vector<std::uint8_t>(10, 0));
  EXPECT_EQ(dead_fraction(never), 1.0);
}

TEST(ReplayTracker, MatchesManualReplay) {
  const auto& f = fixture();
  const auto cfg = base_config();
  Sae sae{cfg, init_params(cfg)};
  const auto t = replay_tracker(sae, f.eval, 32);
  const auto codes = run_sae_on_cache(sae, f.eval);
  DeadLatentTracker manual(cfg.h, cfg.dead_window);
  for (std::size_t b = 0; b < f.eval.size(); b += 32) {
    std::vector<std::uint8_t> fired(cfg.h, 0);
    for (std::size_t i = b; i < std::min(f.eval.size(), b + 32); ++i) {
      for (int j = 0; j < cfg.h; ++j) fired[j] |= codes.y[i * cfg.h + j] != 0;
    }
    manual.update(fired);
  }
  EXPECT_EQ(t.consecutive_inactive, manual.consecutive_inactive);
  EXPECT_EQ(t.batches_seen, manual.batches_seen);
}

TEST(ParetoSweep, SingleConfigurationGivesOneRow) {
  const auto& f = fixture();
  SweepGrid grid{{SaeVariant::kTopK}, {8}, {64}, {}, {0}};
  std::vector<MetricRow> seen;
  const auto rows = pareto_sweep(f.train, f.eval, f.model, base_config(), grid,
                                 [&](const MetricRow& r) { seen.push_back(r); });
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(seen.size(), 1u);
  EXPECT_EQ(rows[0].variant, "topk");
  EXPECT_TRUE(rows[0].error.empty());
  EXPECT_GE(rows[0].nmse, 0.0);
  EXPECT_GE(rows[0].dead_fraction, 0.0);
  EXPECT_LE(rows[0].dead_fraction, 1.0);
  EXPECT_EQ(rows[0].n_eval_records, f.eval.size());
}

TEST(ParetoSweep, FailedRunIsRecordedAndSweepContinues) {
  const auto& f = fixture();
  // k = 100 exceeds h = 64 and fails validation.
  SweepGrid grid{{SaeVariant::kTopK}, {100, 8}, {64}, {}, {0}};
  const auto rows = pareto_sweep(f.train, f.eval, f.model, base_config(), grid);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_FALSE(rows[0].error.empty());
  EXPECT_TRUE(std::isnan(rows[0].nmse));
  EXPECT_TRUE(rows[1].error.empty());
}

TEST(ParetoSweep, BetaAxisOnlyMultipliesGsae) {
  const auto& f = fixture();
  auto base = base_config();
  base.train_steps = 5;
  SweepGrid grid{{SaeVariant::kTopK, SaeVariant::kGsae}, {8}, {64}, {0.5, 2.0}, {0}};
  const auto rows = pareto_sweep(f.train, f.eval, f.model, base, grid);
  EXPECT_EQ(rows.size(), 3u);
}

TEST(ParetoSweep, NmseNonIncreasingInKAcrossSeeds) {
  const auto& f = fixture();
  auto base = base_config();
  base.train_steps = 400;
  base.lr = 1e-2;
  SweepGrid grid{{SaeVariant::kTopK}, {2, 4, 8}, {64}, {}, {0, 1, 2}};
  const auto rows = pareto_sweep(f.train, f.eval, f.model, base, grid);
  ASSERT_EQ(rows.size(), 9u);
  std::map<int, double> mean;
  for (const auto& r : rows) mean[r.k] += r.nmse / 3;
  EXPECT_GE(mean[2], mean[4]);
  EXPECT_GE(mean[4], mean[8]);
}

TEST(MetricCsv, HeaderAndRoundTrip) {
  std::vector<MetricRow> rows{
      {"gsae", 32, 2560, 1e5, 1, 0.25, 0.125, 0.5, 1000, ""},
      {"topk", 8, 2560, 1e5, 2, 0.1 + 0.2, 1.0 / 3, 0.0, 77, ""}};
  test::TempDir dir;
  {
    std::ofstream out(dir / "m.csv");
    write_metric_csv(out, rows);
  }
  std::ifstream in(dir / "m.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "variant,k,h,beta,seed,nmse,loss_added,dead_fraction,n_eval");
  const auto back = read_metric_csv(dir / "m.csv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].variant, "topk");
  EXPECT_EQ(back[1].nmse, 0.1 + 0.2);
  EXPECT_EQ(back[1].loss_added, 1.0 / 3);
  EXPECT_EQ(back[0].beta, 1e5);
  EXPECT_EQ(back[0].n_eval_records, 1000u);
}

TEST(ActivationDensity, CountingIdentityAndExtremes) {
  const auto& f = fixture();
  auto cfg = base_config();
  Sae sae{cfg, init_params(cfg)};
  auto b_enc = sae.params.b_enc.mutable_data();
  b_enc[3] = 1e6f;   // always selected
  b_enc[5] = -1e6f;  // never selected
  const auto p = activation_density(sae, f.eval);
  ASSERT_EQ(p.frequency.size(), 64u);
  EXPECT_EQ(p.n_tokens, f.eval.size());
  EXPECT_EQ(p.frequency[3], 1.0);
  EXPECT_EQ(p.frequency[5], 0.0);
  double total = 0;
  for (double q : p.frequency) {
    EXPECT_GE(q, 0.0);
    EXPECT_LE(q, 1.0);
    total += q * double(p.n_tokens);
  }
  EXPECT_NEAR(total, double(cfg.k * f.eval.size()), 1e-6);
}

Sae sae_with_decoder(std::size_t d, std::size_t h, std::vector<float> w_dec) {
  SaeConfig cfg;
  cfg.d = static_cast<int>(d);
  cfg.h = static_cast<int>(h);
  cfg.k = 1;
  Sae sae{cfg, {}};
  sae.params.w_enc = ag::Tensor<float>({h, d});
  sae.params.b_enc = ag::Tensor<float>({h});
  sae.params.w_dec = ag::Tensor<float>({d, h}, std::move(w_dec));
  sae.params.b_dec = ag::Tensor<float>({d});
  return sae;
}

TEST(DecoderSimilarity, IdenticalAndOrthonormalColumns) {
  // Columns: e0, e0, e1.
  auto sae = sae_with_decoder(2, 3, {1, 1, 0, 0, 0, 1});
  auto p = decoder_similarity(sae);
  EXPECT_NEAR(p.max_cosine[0], 1.0, 1e-12);
  EXPECT_NEAR(p.max_cosine[1], 1.0, 1e-12);
  EXPECT_NEAR(p.max_cosine[2], 0.0, 1e-12);
  auto eye = sae_with_decoder(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  for (double v : decoder_similarity(eye).max_cosine) EXPECT_EQ(v, 0.0);
}

TEST(DecoderSimilarity, MatchesBruteForceAndPermutes) {
  std::mt19937_64 rng(7);
  const std::size_t d = 16, h = 64;
  const auto w = test::normal_values<float>(d * h, rng);
  const auto sae = sae_with_decoder(d, h, w);
  const auto p = decoder_similarity(sae);
  for (std::size_t i = 0; i < h; ++i) {
    double best = -2;
    for (std::size_t j = 0; j < h; ++j) {
      if (j == i) continue;
      double dot = 0, ni = 0, nj = 0;
      for (std::size_t r = 0; r < d; ++r) {
        dot += double(w[r * h + i]) * w[r * h + j];
        ni += double(w[r * h + i]) * w[r * h + i];
        nj += double(w[r * h + j]) * w[r * h + j];
      }
      best = std::max(best, dot / std::sqrt(ni * nj));
    }
    EXPECT_NEAR(p.max_cosine[i], best, 1e-9);
    EXPECT_GE(p.max_cosine[i], -1.0);
    EXPECT_LE(p.max_cosine[i], 1.0);
  }
  std::vector<std::size_t> perm(h);
  std::iota(perm.begin(), perm.end(), 0u);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<float> wp(d * h);
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t j = 0; j < h; ++j) wp[r * h + j] = w[r * h + perm[j]];
  }
  const auto pp = decoder_similarity(sae_with_decoder(d, h, wp));
  for (std::size_t j = 0; j < h; ++j) EXPECT_NEAR(pp.max_cosine[j], p.max_cosine[perm[j]], 1e-12);
}

TEST(DecoderSimilarity, ZeroColumnExcluded) {
  auto sae = sae_with_decoder(2, 3, {1, 0, 1, 0, 0, 1});
  const auto p = decoder_similarity(sae);
  EXPECT_EQ(p.excluded, (std::vector<int>{1}));
  EXPECT_TRUE(std::isnan(p.max_cosine[1]));
  EXPECT_NEAR(p.max_cosine[0], 1 / std::sqrt(2.0), 1e-12);
}

TEST(SimilarityRegion, DecileBuckets) {
  SimilarityProfile p;
  for (int i = 0; i < 100; ++i) p.max_cosine.push_back((i * 37 % 100) / 100.0);
  const auto left = similarity_region(p, SimilarityBucket::kLeft);
  const auto mid = similarity_region(p, SimilarityBucket::kMiddle);
  const auto right = similarity_region(p, SimilarityBucket::kRight);
  ASSERT_EQ(left.size(), 10u);
  ASSERT_EQ(mid.size(), 10u);
  ASSERT_EQ(right.size(), 10u);
  for (int i : left) EXPECT_LT(p.max_cosine[i], 0.1);
  for (int i : mid) EXPECT_TRUE(p.max_cosine[i] >= 0.45 && p.max_cosine[i] < 0.55);
  for (int i : right) EXPECT_GE(p.max_cosine[i], 0.9);
  EXPECT_EQ(parse_similarity_bucket("middle"), SimilarityBucket::kMiddle);
  EXPECT_THROW(parse_similarity_bucket("center"), std::invalid_argument);
}

TEST(BucketDerivatives, ProjectionIdentities) {
  const std::size_t d = 4, h = 5;
  ActivationCache cache(d, {0, HookSite::kResidPost}, io::Sha256{});
  const std::vector<float> g{3, 0, 4, 0};
  cache.append(std::vector<float>{1, 1, 1, 1}, g, 0, 0, 0);
  // Column 0 is g / |g| scaled by 2, column 1 is orthogonal to g, the rest
  // are unrelated.
  std::vector<float> w(d * h, 0.0f);
  auto set_col = [&](std::size_t j, std::vector<float> c) {
    for (std::size_t r = 0; r < d; ++r) w[r * h + j] = c[r];
  };
  set_col(0, {1.2f, 0, 1.6f, 0});
  set_col(1, {0, 1, 0, 0});
  set_col(2, {0, 0, 0, 1});
  set_col(3, {0, 1, 0, 1});
  set_col(4, {-4, 0, 3, 0});
  const auto sae = sae_with_decoder(d, h, w);
  SimilarityProfile only0, only1;
  only0.max_cosine = {0.0, NAN, NAN, NAN, NAN};
  only1.max_cosine = {NAN, 0.0, NAN, NAN, NAN};
  const auto a = similarity_bucket_derivatives(sae, only0, cache, SimilarityBucket::kLeft, 1, 1, 0);
  EXPECT_NEAR(a.mean_abs_derivative, 5.0, 1e-6);
  const auto b = similarity_bucket_derivatives(sae, only1, cache, SimilarityBucket::kRight, 1, 1, 0);
  EXPECT_EQ(b.mean_abs_derivative, 0.0);
}

TEST(BucketDerivatives, SmallRegionWarnsAndUsesAll) {
  const auto& f = fixture();
  auto cfg = base_config();
  Sae sae{cfg, init_params(cfg)};
  const auto profile = decoder_similarity(sae);
  const auto r = similarity_bucket_derivatives(sae, profile, f.eval, SimilarityBucket::kLeft, 30,
                                               50, 1);
  EXPECT_TRUE(r.warning.has_value());
  EXPECT_EQ(r.n_latents, 7u);  // ceil(0.1 * 64)
  EXPECT_EQ(r.n_tokens, 50u);
  EXPECT_GT(r.mean_abs_derivative, 0.0);
  const auto again = similarity_bucket_derivatives(sae, profile, f.eval, SimilarityBucket::kLeft,
                                                   30, 50, 1);
  EXPECT_EQ(again.mean_abs_derivative, r.mean_abs_derivative);
}

TEST(ProfileSummary, LinearQuantiles) {
  const std::vector<double> v{4, 1, 3, 2, 5, NAN};
  const auto s = summarize(v);
  EXPECT_EQ(s.n, 5u);
  EXPECT_EQ(s.min, 1);
  EXPECT_EQ(s.max, 5);
  EXPECT_EQ(s.median, 3);
  EXPECT_EQ(s.mean, 3);
  EXPECT_DOUBLE_EQ(s.p25, 2);
  EXPECT_DOUBLE_EQ(s.p10, 1.4);
  std::ostringstream os;
  write_sorted_profile(os, v);
  EXPECT_EQ(os.str(), "1\n2\n3\n4\n5\n");
  const auto j = nlohmann::json::parse(summary_json(s, "density"));
  EXPECT_EQ(j["kind"], "density");
  EXPECT_EQ(j["median"], 3.0);
}

TEST(FormatDouble, ShortestRoundTrip) {
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(std::stod(format_double(1e5)), 1e5);
  EXPECT_EQ(format_double(NAN), "nan");
  const double x = 1.0 / 3;
  EXPECT_EQ(std::stod(format_double(x)), x);
}

}  // namespace
}  // namespace gsae
