#include "gsae/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/Core>
#include <json.hpp>

namespace gsae {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr std::size_t kChunk = 4096;

using RowMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Partial Fisher-Yates: the first `take` entries of a seeded permutation.
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t take,
                                                    std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  take = std::min(take, n);
  for (std::size_t i = 0; i < take; ++i) {
    std::swap(idx[i], idx[i + rng() % (n - i)]);
  }
  idx.resize(take);
  return idx;
}

double sequence_loss(const Model& model, const HookPoint& hook, std::span<const float> x,
                     std::span<const int> tokens) {
  const std::size_t n = tokens.size(), d = model.config().d_model;
  ag::Tensor<float> xt({n, d}, std::vector<float>(x.begin(), x.end()));
  const auto logits = model.logits_from_hook(hook, xt, tokens);
  const auto head = ag::slice(logits, 0, n - 1, 0, logits.cols());
  return ag::cross_entropy(head, tokens.subspan(1)).item();
}

}  // namespace

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double nmse(std::span<const float> x, std::span<const float> x_hat) {
  if (x.size() != x_hat.size()) throw std::invalid_argument("nmse: length mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = double(x[i]) - double(x_hat[i]);
    num += e * e;
    den += double(x[i]) * double(x[i]);
  }
  if (den == 0.0) throw std::invalid_argument("nmse: undefined for x = 0");
  return std::sqrt(num) / std::sqrt(den);
}

double mean_nmse(std::span<const float> x, std::span<const float> x_hat, std::size_t n) {
  if (n == 0 || x.size() != x_hat.size() || x.size() % n != 0) {
    throw std::invalid_argument("mean_nmse: bad batch shape");
  }
  const std::size_t d = x.size() / n;
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    total += nmse(x.subspan(r * d, d), x_hat.subspan(r * d, d));
  }
  return total / double(n);
}

double loss_added(const Model& model, const HookPoint& hook, std::span<const float> x,
                  std::span<const float> x_hat, std::span<const int> tokens) {
  const std::size_t d = model.config().d_model;
  if (tokens.size() < 2) throw std::invalid_argument("loss_added: need >= 2 tokens");
  if (x.size() != tokens.size() * d || x_hat.size() != x.size()) {
    throw std::invalid_argument("loss_added: batches are not aligned");
  }
  const double base = sequence_loss(model, hook, x, tokens);
  if (!(base > 0.0) || !std::isfinite(base)) {
    throw std::runtime_error("loss_added: reference loss is " + format_double(base));
  }
  const double recon = sequence_loss(model, hook, x_hat, tokens);
  if (!std::isfinite(recon)) {
    throw std::runtime_error("loss_added: non-finite reconstructed loss");
  }
  return (recon - base) / base;
}

double loss_added(const Model& model, const ActivationCache& eval,
                  std::span<const float> x_hat) {
  const std::size_t d = eval.d_model();
  if (x_hat.size() != eval.size() * d) {
    throw std::invalid_argument("loss_added: reconstruction not aligned with cache");
  }
  const HookPoint hook = eval.hook();
  double total = 0.0;
  std::size_t count = 0;
  std::vector<int> tokens;
  for (const auto& run : eval.sequences()) {
    if (run.length < 2) continue;
    tokens.resize(run.length);
    for (std::size_t i = 0; i < run.length; ++i) {
      tokens[i] = static_cast<int>(eval.token_id(run.begin + i));
    }
    std::span<const float> x(eval.x(run.begin).data(), run.length * d);
    try {
      total += loss_added(model, hook, x, x_hat.subspan(run.begin * d, run.length * d), tokens);
    } catch (const std::runtime_error& e) {
      throw std::runtime_error(std::string(e.what()) + " (sequence " +
                               std::to_string(eval.sequence_id(run.begin)) + ", record " +
                               std::to_string(run.begin) + ")");
    }
    ++count;
  }
  if (count == 0) throw std::invalid_argument("loss_added: no sequence of length >= 2");
  return total / double(count);
}

double dead_fraction(const DeadLatentTracker& tracker) {
  if (tracker.dead.empty()) return 0.0;
  return double(tracker.dead_count()) / double(tracker.dead.size());
}

SaeCodes run_sae_on_cache(const Sae& sae, const ActivationCache& cache) {
  const std::size_t d = cache.d_model(), h = sae.params.h();
  SaeCodes all;
  all.n = cache.size();
  all.z.resize(all.n * h);
  all.y.resize(all.n * h);
  all.x_hat.resize(all.n * d);
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < cache.size(); begin += kChunk) {
    const std::size_t n = std::min(kChunk, cache.size() - begin);
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), begin);
    const auto codes = run_sae(sae, cache.gather_x(idx), cache.gather_g(idx), n);
    std::copy(codes.z.begin(), codes.z.end(), all.z.begin() + begin * h);
    std::copy(codes.y.begin(), codes.y.end(), all.y.begin() + begin * h);
    std::copy(codes.x_hat.begin(), codes.x_hat.end(), all.x_hat.begin() + begin * d);
  }
  return all;
}

DeadLatentTracker replay_tracker(const Sae& sae, const ActivationCache& cache,
                                 std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("replay_tracker: batch_size must be >= 1");
  const std::size_t h = sae.params.h();
  DeadLatentTracker tracker(static_cast<int>(h), sae.config.dead_window);
  std::vector<std::size_t> idx;
  std::vector<std::uint8_t> fired(h);
  for (std::size_t begin = 0; begin < cache.size(); begin += batch_size) {
    const std::size_t n = std::min(batch_size, cache.size() - begin);
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), begin);
    const auto codes = run_sae(sae, cache.gather_x(idx), cache.gather_g(idx), n);
    std::fill(fired.begin(), fired.end(), 0);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < h; ++j) {
        if (codes.y[r * h + j] != 0.0f) fired[j] = 1;
      }
    }
    tracker.update(fired);
  }
  return tracker;
}

MetricRow evaluate_sae(const Sae& sae, const ActivationCache& eval, const Model& model,
                       const DeadLatentTracker& tracker) {
  if (eval.empty()) throw std::invalid_argument("evaluate_sae: empty evaluation cache");
  if (eval.d_model() != static_cast<std::size_t>(sae.config.d)) {
    throw std::invalid_argument("evaluate_sae: cache width does not match SAE");
  }
  const auto codes = run_sae_on_cache(sae, eval);
  std::vector<float> xs(eval.size() * eval.d_model());
  for (std::size_t i = 0; i < eval.size(); ++i) {
    std::copy(eval.x(i).begin(), eval.x(i).end(), xs.begin() + i * eval.d_model());
  }
  MetricRow row;
  row.variant = std::string(to_string(sae.config.variant));
  row.k = sae.config.k;
  row.h = sae.config.h;
  row.beta = sae.config.beta;
  row.seed = sae.config.seed;
  row.nmse = mean_nmse(xs, codes.x_hat, eval.size());
  row.loss_added = loss_added(model, eval, codes.x_hat);
  row.dead_fraction = dead_fraction(tracker);
  row.n_eval_records = eval.size();
  return row;
}

std::vector<MetricRow> pareto_sweep(const ActivationCache& train, const ActivationCache& eval,
                                    const Model& model, const SaeConfig& base,
                                    const SweepGrid& grid,
                                    const std::function<void(const MetricRow&)>& on_row) {
  if (grid.variants.empty() || grid.ks.empty() || grid.hs.empty() || grid.seeds.empty()) {
    throw std::invalid_argument("pareto_sweep: every grid axis must be nonempty");
  }
  const std::vector<double> betas = grid.betas.empty() ? std::vector<double>{base.beta}
                                                       : grid.betas;
  std::vector<MetricRow> rows;
  for (auto variant : grid.variants) {
    // beta only matters for gsae; other variants run once per (k, h, seed).
    const auto& vb = variant == SaeVariant::kGsae ? betas : std::vector<double>{base.beta};
    for (int h : grid.hs) {
      for (int k : grid.ks) {
        for (double beta : vb) {
          for (auto seed : grid.seeds) {
            SaeConfig cfg = base;
            cfg.variant = variant;
            cfg.h = h;
            cfg.k = k;
            cfg.beta = beta;
            cfg.seed = seed;
            MetricRow row;
            try {
              auto trained = train_sae(train, cfg, &model);
              row = evaluate_sae(trained.sae, eval, model, trained.tracker);
            } catch (const std::exception& e) {
              row = MetricRow{std::string(to_string(variant)), k, h, beta, seed,
                              kNaN, kNaN, kNaN, 0, e.what()};
            }
            rows.push_back(row);
            if (on_row) on_row(row);
          }
        }
      }
    }
  }
  return rows;
}

void write_metric_csv(std::ostream& out, std::span<const MetricRow> rows) {
  out << "variant,k,h,beta,seed,nmse,loss_added,dead_fraction,n_eval\n";
  for (const auto& r : rows) {
    out << r.variant << ',' << r.k << ',' << r.h << ',' << format_double(r.beta) << ','
        << r.seed << ',' << format_double(r.nmse) << ',' << format_double(r.loss_added) << ','
        << format_double(r.dead_fraction) << ',' << r.n_eval_records << '\n';
  }
}

std::vector<MetricRow> read_metric_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "variant,k,h,beta,seed,nmse,loss_added,dead_fraction,n_eval") {
    throw std::runtime_error("unexpected metric CSV header in " + path.string());
  }
  std::vector<MetricRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 9) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": expected 9 fields");
    }
    MetricRow r;
    r.variant = f[0];
    r.k = std::stoi(f[1]);
    r.h = std::stoi(f[2]);
    r.beta = std::stod(f[3]);
    r.seed = std::stoull(f[4]);
    r.nmse = std::stod(f[5]);
    r.loss_added = std::stod(f[6]);
    r.dead_fraction = std::stod(f[7]);
    r.n_eval_records = std::stoull(f[8]);
    rows.push_back(r);
  }
  return rows;
}

DensityProfile activation_density(const Sae& sae, const ActivationCache& eval) {
  if (eval.empty()) throw std::invalid_argument("activation_density: empty cache");
  const std::size_t h = sae.params.h();
  std::vector<std::size_t> counts(h, 0);
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < eval.size(); begin += kChunk) {
    const std::size_t n = std::min(kChunk, eval.size() - begin);
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), begin);
    const auto codes = run_sae(sae, eval.gather_x(idx), eval.gather_g(idx), n);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < h; ++j) {
        if (codes.y[r * h + j] != 0.0f) ++counts[j];
      }
    }
  }
  DensityProfile p;
  p.n_tokens = eval.size();
  p.frequency.resize(h);
  for (std::size_t j = 0; j < h; ++j) p.frequency[j] = double(counts[j]) / double(p.n_tokens);
  return p;
}

SimilarityProfile decoder_similarity(const Sae& sae) {
  const int d = sae.params.d(), h = sae.params.h();
  if (h < 2) throw std::invalid_argument("decoder_similarity: need h >= 2");
  Eigen::Map<const RowMatF> w(sae.params.w_dec.data().data(), d, h);
  Eigen::MatrixXd unit = w.cast<double>();
  SimilarityProfile p;
  std::vector<bool> keep(h, true);
  for (int j = 0; j < h; ++j) {
    const double n = unit.col(j).norm();
    if (n == 0.0) {
      keep[j] = false;
      p.excluded.push_back(j);
    } else {
      unit.col(j) /= n;
    }
  }
  const Eigen::MatrixXd gram = unit.transpose() * unit;
  p.max_cosine.assign(h, kNaN);
  for (int i = 0; i < h; ++i) {
    if (!keep[i]) continue;
    double best = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < h; ++j) {
      if (j != i && keep[j]) best = std::max(best, gram(j, i));
    }
    if (std::isfinite(best)) p.max_cosine[i] = std::clamp(best, -1.0, 1.0);
  }
  return p;
}

std::string_view to_string(SimilarityBucket bucket) {
  switch (bucket) {
    case SimilarityBucket::kLeft:
      return "left";
    case SimilarityBucket::kMiddle:
      return "middle";
    case SimilarityBucket::kRight:
      return "right";
  }
  return "?";
}

SimilarityBucket parse_similarity_bucket(std::string_view name) {
  if (name == "left") return SimilarityBucket::kLeft;
  if (name == "middle") return SimilarityBucket::kMiddle;
  if (name == "right") return SimilarityBucket::kRight;
  throw std::invalid_argument("unknown similarity bucket: " + std::string(name));
}

std::vector<int> similarity_region(const SimilarityProfile& profile, SimilarityBucket bucket) {
  std::vector<int> order;
  for (int i = 0; i < static_cast<int>(profile.max_cosine.size()); ++i) {
    if (std::isfinite(profile.max_cosine[i])) order.push_back(i);
  }
  const auto& v = profile.max_cosine;
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return v[a] < v[b] || (v[a] == v[b] && a < b); });
  const std::size_t n = order.size();
  const auto decile = static_cast<std::size_t>(std::ceil(0.1 * double(n)));
  std::size_t lo = 0, hi = n;
  switch (bucket) {
    case SimilarityBucket::kLeft:
      hi = std::min(decile, n);
      break;
    case SimilarityBucket::kRight:
      lo = n - std::min(decile, n);
      break;
    case SimilarityBucket::kMiddle:
      // Centered window the same size as the outer deciles.
      lo = (n - std::min(decile, n)) / 2;
      hi = std::min(lo + std::max<std::size_t>(decile, 1), n);
      break;
  }
  return {order.begin() + lo, order.begin() + hi};
}

BucketDerivative similarity_bucket_derivatives(const Sae& sae,
                                               const SimilarityProfile& profile,
                                               const ActivationCache& eval,
                                               SimilarityBucket bucket,
                                               std::size_t n_latents, std::size_t n_tokens,
                                               std::uint64_t seed) {
  if (profile.max_cosine.size() != static_cast<std::size_t>(sae.params.h())) {
    throw std::invalid_argument("similarity profile does not match SAE width");
  }
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    const auto g = eval.g(i);
    if (std::any_of(g.begin(), g.end(), [](float v) { return v != 0.0f; })) usable.push_back(i);
  }
  if (usable.empty()) throw std::invalid_argument("evaluation cache holds no gradients");

  const auto region = similarity_region(profile, bucket);
  BucketDerivative out;
  if (region.size() < n_latents) {
    out.warning = "region " + std::string(to_string(bucket)) + " holds " +
                  std::to_string(region.size()) + " latents, fewer than the " +
                  std::to_string(n_latents) + " requested; using all";
  }
  std::mt19937_64 rng(seed);
  const auto latent_pick = sample_without_replacement(region.size(), n_latents, rng);
  const auto token_pick = sample_without_replacement(usable.size(), n_tokens, rng);
  if (latent_pick.empty()) throw std::invalid_argument("similarity region is empty");

  double total = 0.0;
  for (auto li : latent_pick) {
    const auto col = sae.params.decoder_column(region[li]);
    double norm = 0.0;
    for (float v : col) norm += double(v) * v;
    norm = std::sqrt(norm);
    for (auto ti : token_pick) {
      const auto g = eval.g(usable[ti]);
      double dot = 0.0;
      for (std::size_t j = 0; j < col.size(); ++j) dot += double(g[j]) * col[j];
      total += std::abs(dot / norm);
    }
  }
  out.n_latents = latent_pick.size();
  out.n_tokens = token_pick.size();
  out.mean_abs_derivative = total / double(out.n_latents * out.n_tokens);
  return out;
}

ProfileSummary summarize(std::span<const double> values) {
  std::vector<double> v;
  for (double x : values) {
    if (std::isfinite(x)) v.push_back(x);
  }
  ProfileSummary s;
  s.n = v.size();
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  auto q = [&](double p) {
    const double pos = p * double(v.size() - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const double frac = pos - double(i);
    return i + 1 < v.size() ? v[i] + frac * (v[i + 1] - v[i]) : v[i];
  };
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  s.min = v.front();
  s.max = v.back();
  s.p10 = q(0.10);
  s.p25 = q(0.25);
  s.median = q(0.50);
  s.p75 = q(0.75);
  s.p90 = q(0.90);
  return s;
}

void write_sorted_profile(std::ostream& out, std::span<const double> values) {
  std::vector<double> v;
  for (double x : values) {
    if (std::isfinite(x)) v.push_back(x);
  }
  std::sort(v.begin(), v.end());
  for (double x : v) out << format_double(x) << '\n';
}

std::string summary_json(const ProfileSummary& s, const std::string& kind) {
  nlohmann::ordered_json j;
  j["kind"] = kind;
  j["n"] = s.n;
  j["mean"] = s.mean;
  j["min"] = s.min;
  j["p10"] = s.p10;
  j["p25"] = s.p25;
  j["median"] = s.median;
  j["p75"] = s.p75;
  j["p90"] = s.p90;
  j["max"] = s.max;
  return j.dump();
}

}  // namespace gsae
