#include "gsae/perturbation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "gsae/log.hpp"
#include "gsae/metrics.hpp"

namespace gsae {

namespace {

using RowMatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::vector<double> normalized(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n == 0.0) throw std::runtime_error("sampled a zero direction");
  for (auto& x : v) x /= n;
  return v;
}

std::vector<std::size_t> gradient_records(const ActivationCache& cache) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < cache.size(); ++i) {
    const auto g = cache.g(i);
    if (std::any_of(g.begin(), g.end(), [](float v) { return v != 0.0f; })) out.push_back(i);
  }
  if (out.empty()) throw std::invalid_argument("cache holds no non-zero gradients");
  return out;
}

}  // namespace

std::string_view to_string(DirectionFamily family) {
  switch (family) {
    case DirectionFamily::kActivationDiff:
      return "activation_diff";
    case DirectionFamily::kIsotropic:
      return "isotropic_random";
    case DirectionFamily::kCovariance:
      return "covariance_random";
  }
  return "?";
}

DirectionFamily parse_direction_family(std::string_view name) {
  if (name == "activation_diff") return DirectionFamily::kActivationDiff;
  if (name == "isotropic_random" || name == "isotropic") return DirectionFamily::kIsotropic;
  if (name == "covariance_random" || name == "covariance") return DirectionFamily::kCovariance;
  throw std::invalid_argument("unknown direction family: " + std::string(name));
}

std::vector<double> empirical_covariance(std::span<const float> pool, std::size_t n,
                                         std::size_t d) {
  if (n < 2 || pool.size() != n * d) {
    throw std::invalid_argument("empirical_covariance: need an [n >= 2, d] pool");
  }
  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> p(
      pool.data(), n, d);
  RowMatD centered = p.cast<double>();
  centered.rowwise() -= centered.colwise().mean();
  RowMatD cov = centered.transpose() * centered / double(n - 1);
  return {cov.data(), cov.data() + d * d};
}

DirectionSampler::DirectionSampler(DirectionFamily family, std::span<const float> pool,
                                   std::size_t n, std::size_t d, std::uint64_t seed)
    : family_(family), pool_(pool), n_(n), d_(d), rng_(seed) {
  if (d == 0) throw std::invalid_argument("DirectionSampler: d must be > 0");
  if (family != DirectionFamily::kIsotropic) {
    if (n < 2 || pool.size() != n * d) {
      throw std::invalid_argument(std::string(to_string(family)) +
                                  " directions need a pool of at least 2 activations");
    }
  }
  if (family != DirectionFamily::kCovariance) return;

  const auto cov_v = empirical_covariance(pool, n, d);
  Eigen::Map<const RowMatD> cov(cov_v.data(), d, d);
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) {
    jitter_ = 1e-6 * cov.trace() / double(d);
    if (!(jitter_ > 0.0)) jitter_ = 1e-12;
    llt.compute(cov + jitter_ * Eigen::MatrixXd::Identity(d, d));
    warn("pool covariance is singular; added diagonal jitter " + format_double(jitter_));
    if (llt.info() != Eigen::Success) {
      throw std::runtime_error("covariance factorization failed even after jitter");
    }
  }
  const Eigen::MatrixXd l = llt.matrixL();
  factor_.resize(d * d);
  Eigen::Map<RowMatD>(factor_.data(), d, d) = l;
}

std::vector<double> DirectionSampler::next_raw() {
  std::vector<double> v(d_);
  switch (family_) {
    case DirectionFamily::kActivationDiff: {
      const std::size_t i = rng_() % n_;
      std::size_t j = rng_() % (n_ - 1);
      if (j >= i) ++j;
      for (std::size_t k = 0; k < d_; ++k) {
        v[k] = double(pool_[i * d_ + k]) - double(pool_[j * d_ + k]);
      }
      break;
    }
    case DirectionFamily::kIsotropic:
      for (auto& x : v) x = normal_(rng_);
      break;
    case DirectionFamily::kCovariance: {
      std::vector<double> xi(d_);
      for (auto& x : xi) x = normal_(rng_);
      for (std::size_t r = 0; r < d_; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c <= r; ++c) s += factor_[r * d_ + c] * xi[c];
        v[r] = s;
      }
      break;
    }
  }
  return v;
}

std::vector<double> DirectionSampler::next() {
  // Identical activations give a zero difference; redraw.
  for (int attempt = 0; attempt < 100; ++attempt) {
    auto v = next_raw();
    double n = 0.0;
    for (double x : v) n += x * x;
    if (n > 0.0) return normalized(std::move(v));
  }
  throw std::runtime_error("could not draw a non-zero direction");
}

std::vector<DerivativeComparison> directional_derivative_comparison(
    const ActivationCache& cache, std::size_t n_per_family, std::uint64_t seed) {
  const auto usable = gradient_records(cache);
  const std::size_t n = cache.size(), d = cache.d_model();
  std::span<const float> pool(cache.x(0).data(), n * d);
  std::vector<DerivativeComparison> out;
  const DirectionFamily families[] = {DirectionFamily::kActivationDiff,
                                      DirectionFamily::kIsotropic,
                                      DirectionFamily::kCovariance};
  for (std::size_t f = 0; f < 3; ++f) {
    // Each family gets its own stream; the record stream is shared by seed so
    // every family sees the same gradients.
    DirectionSampler sampler(families[f], pool, n, d, seed * 3 + f + 1);
    std::mt19937_64 pick(seed);
    double total = 0.0;
    for (std::size_t s = 0; s < n_per_family; ++s) {
      const auto g = cache.g(usable[pick() % usable.size()]);
      const auto dir = sampler.next();
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += double(g[k]) * dir[k];
      total += std::abs(dot);
    }
    out.push_back({static_cast<int>(cache.hook().layer), families[f],
                   n_per_family ? total / double(n_per_family) : 0.0, n_per_family});
  }
  return out;
}

template <typename T>
double loss_from_hook(const Transformer<T>& model, const HookPoint& hook, std::span<const T> x,
                      std::span<const int> tokens) {
  const std::size_t n = tokens.size(), d = model.config().d_model;
  if (n < 2 || x.size() != n * d) {
    throw std::invalid_argument("loss_from_hook: activations do not match tokens");
  }
  ag::Tensor<T> xt({n, d}, std::vector<T>(x.begin(), x.end()));
  const auto logits = model.logits_from_hook(hook, xt, tokens);
  return double(ag::cross_entropy(ag::slice(logits, 0, n - 1, 0, logits.cols()),
                                  tokens.subspan(1))
                    .item());
}

template <typename T>
double perturbation_response(const Transformer<T>& model, const HookPoint& hook,
                             std::span<const T> x, std::span<const int> tokens,
                             std::size_t position, std::span<const double> delta) {
  const std::size_t d = model.config().d_model;
  if (delta.size() != d) throw std::invalid_argument("perturbation_response: delta length");
  if (position >= tokens.size()) throw std::out_of_range("perturbation_response: position");
  std::vector<T> shifted(x.begin(), x.end());
  for (std::size_t k = 0; k < d; ++k) shifted[position * d + k] += static_cast<T>(delta[k]);
  return loss_from_hook<T>(model, hook, shifted, tokens) - loss_from_hook(model, hook, x, tokens);
}

template double loss_from_hook<float>(const Transformer<float>&, const HookPoint&,
                                      std::span<const float>, std::span<const int>);
template double loss_from_hook<double>(const Transformer<double>&, const HookPoint&,
                                       std::span<const double>, std::span<const int>);
template double perturbation_response<float>(const Transformer<float>&, const HookPoint&,
                                             std::span<const float>, std::span<const int>,
                                             std::size_t, std::span<const double>);
template double perturbation_response<double>(const Transformer<double>&, const HookPoint&,
                                              std::span<const double>, std::span<const int>,
                                              std::size_t, std::span<const double>);

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * double(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

std::optional<double> spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) {
    throw std::invalid_argument("spearman: need two equal-length samples of size >= 2");
  }
  const auto rx = average_ranks(xs), ry = average_ranks(ys);
  const double n = double(xs.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<CorrelationReport> correlation_study(const Transformer<double>& model,
                                                 const ActivationCache& cache,
                                                 std::span<const double> bucket_means,
                                                 const CorrelationOptions& options) {
  if (bucket_means.empty()) throw std::invalid_argument("correlation_study: no buckets");
  const HookPoint hook = cache.hook();
  model.check_hook(hook);
  const std::size_t d = cache.d_model();
  if (d != static_cast<std::size_t>(model.config().d_model)) {
    throw std::invalid_argument("correlation_study: cache width does not match the model");
  }
  // Records that can be perturbed: non-zero gradient inside a run of >= 2.
  std::vector<std::pair<std::size_t, std::size_t>> sites;  // (run index, offset)
  const auto runs = cache.sequences();
  for (std::size_t r = 0; r < runs.size(); ++r) {
    if (runs[r].length < 2) continue;
    for (std::size_t o = 0; o < runs[r].length; ++o) {
      const auto g = cache.g(runs[r].begin + o);
      if (std::any_of(g.begin(), g.end(), [](float v) { return v != 0.0f; })) {
        sites.emplace_back(r, o);
      }
    }
  }
  if (sites.empty()) throw std::invalid_argument("correlation_study: nothing to perturb");

  std::map<std::size_t, double> base_loss;
  auto run_data = [&](std::size_t r, std::vector<double>& x, std::vector<int>& tokens) {
    const auto& run = runs[r];
    x.resize(run.length * d);
    tokens.resize(run.length);
    for (std::size_t i = 0; i < run.length; ++i) {
      const auto xi = cache.x(run.begin + i);
      std::copy(xi.begin(), xi.end(), x.begin() + i * d);
      tokens[i] = static_cast<int>(cache.token_id(run.begin + i));
    }
  };

  std::vector<CorrelationReport> out;
  std::vector<double> x;
  std::vector<int> tokens;
  for (std::size_t b = 0; b < bucket_means.size(); ++b) {
    const double m = bucket_means[b];
    const double half_width = std::sqrt(3.0) * options.relative_std * m;
    std::mt19937_64 rng(options.seed + 1000003ULL * (b + 1));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(m - half_width, m + half_width);

    std::vector<double> norms, first_order, dloss;
    for (std::size_t s = 0; s < options.n_samples; ++s) {
      const auto [r, o] = sites[rng() % sites.size()];
      std::vector<double> dir(d);
      for (auto& v : dir) v = normal(rng);
      dir = normalized(std::move(dir));
      const double norm = std::max(half_width > 0.0 ? unif(rng) : m, 1e-6);
      for (auto& v : dir) v *= norm;

      run_data(r, x, tokens);
      auto it = base_loss.find(r);
      if (it == base_loss.end()) {
        it = base_loss.emplace(r, loss_from_hook<double>(model, hook, x, tokens)).first;
      }
      for (std::size_t k = 0; k < d; ++k) x[o * d + k] += dir[k];
      const double change = loss_from_hook<double>(model, hook, x, tokens) - it->second;
      if (!std::isfinite(change)) continue;

      const auto g = cache.g(runs[r].begin + o);
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += double(g[k]) * dir[k];
      norms.push_back(norm);
      first_order.push_back(std::abs(dot));
      dloss.push_back(std::abs(change));
    }

    CorrelationReport rep;
    rep.layer = hook.layer;
    rep.bucket_mean = m;
    rep.n_samples = dloss.size();
    if (dloss.size() < 10) {
      rep.insufficient = true;
      warn("bucket " + format_double(m) + ": only " + std::to_string(dloss.size()) +
           " valid samples");
      out.push_back(rep);
      continue;
    }
    rep.spearman_norm_vs_dloss = spearman(norms, dloss);
    rep.spearman_firstorder_vs_dloss = spearman(first_order, dloss);
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (double v : dloss) {
      if (v > 0.0) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    rep.dloss_spread_orders = hi > 0.0 ? std::log10(hi / lo) : 0.0;
    out.push_back(rep);
  }
  return out;
}

void write_perturbation_header(std::ostream& out) {
  out << "layer,family_or_bucket,metric,value,n\n";
}

void write_derivative_rows(std::ostream& out, std::span<const DerivativeComparison> rows) {
  for (const auto& r : rows) {
    out << r.layer << ',' << to_string(r.family) << ",mean_abs_directional_derivative,"
        << format_double(r.mean_abs_derivative) << ',' << r.n << '\n';
  }
}

void write_correlation_rows(std::ostream& out, std::span<const CorrelationReport> rows) {
  auto opt = [](const std::optional<double>& v) {
    return v ? format_double(*v) : std::string("nan");
  };
  for (const auto& r : rows) {
    const std::string bucket = "bucket_" + format_double(r.bucket_mean);
    const auto emit = [&](std::string_view metric, const std::string& value) {
      out << r.layer << ',' << bucket << ',' << metric << ',' << value << ',' << r.n_samples
          << '\n';
    };
    if (r.insufficient) {
      emit("insufficient", "nan");
      continue;
    }
    emit("spearman_norm_vs_dloss", opt(r.spearman_norm_vs_dloss));
    emit("spearman_firstorder_vs_dloss", opt(r.spearman_firstorder_vs_dloss));
    emit("dloss_spread_orders", format_double(r.dloss_spread_orders));
  }
}

}  // namespace gsae
