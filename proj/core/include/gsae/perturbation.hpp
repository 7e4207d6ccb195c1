#pragma once

// Perturbation studies on hook activations: how strongly the loss responds to
// activation-difference directions versus random ones, and whether the
// first-order term |g . delta| predicts the loss change better than ||delta||.

#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gsae/activation_store.hpp"
#include "gsae/transformer.hpp"

namespace gsae {

enum class DirectionFamily { kActivationDiff, kIsotropic, kCovariance };

std::string_view to_string(DirectionFamily family);
DirectionFamily parse_direction_family(std::string_view name);

/// Draws unit directions in R^d. The pool is a row-major [n, d] set of
/// activations; it must hold at least 2 rows for the activation-difference
/// and covariance families.
class DirectionSampler {
 public:
  DirectionSampler(DirectionFamily family, std::span<const float> pool, std::size_t n,
                   std::size_t d, std::uint64_t seed);

  /// Unit-normalized draw.
  std::vector<double> next();
  /// Draw before normalization.
  std::vector<double> next_raw();

  DirectionFamily family() const { return family_; }
  /// Diagonal jitter added to make the covariance factorizable (0 if none).
  double jitter() const { return jitter_; }
  /// Lower-triangular factor of the pool covariance (row-major [d, d]).
  const std::vector<double>& cholesky_factor() const { return factor_; }

 private:
  DirectionFamily family_;
  std::span<const float> pool_;
  std::size_t n_, d_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::vector<double> factor_;
  double jitter_ = 0.0;
};

/// Empirical covariance of a row-major [n, d] pool (mean-centered, 1/(n-1)).
std::vector<double> empirical_covariance(std::span<const float> pool, std::size_t n,
                                         std::size_t d);

struct DerivativeComparison {
  int layer = 0;
  DirectionFamily family = DirectionFamily::kIsotropic;
  double mean_abs_derivative = 0.0;
  std::size_t n = 0;
};

/// For each family, the mean of |g . d| over `n_per_family` draws, pairing a
/// random record with a non-zero gradient with a fresh direction. Directions
/// come from the cache's own activations.
std::vector<DerivativeComparison> directional_derivative_comparison(
    const ActivationCache& cache, std::size_t n_per_family, std::uint64_t seed);

/// Loss change when `delta` is added to the hook activation at `position` of
/// a sequence whose hook activations are `x` ([positions, d]). For mlp_out
/// hooks the perturbation lands on the MLP output before the residual add.
template <typename T>
double perturbation_response(const Transformer<T>& model, const HookPoint& hook,
                             std::span<const T> x, std::span<const int> tokens,
                             std::size_t position, std::span<const double> delta);

/// Mean next-token loss of a sequence from its hook activations.
template <typename T>
double loss_from_hook(const Transformer<T>& model, const HookPoint& hook, std::span<const T> x,
                      std::span<const int> tokens);

/// Spearman rank correlation with average ranks for ties; nullopt when
/// either rank vector has zero variance.
std::optional<double> spearman(std::span<const double> xs, std::span<const double> ys);

/// Average (1-based) ranks with ties sharing their mean rank.
std::vector<double> average_ranks(std::span<const double> v);

struct CorrelationReport {
  int layer = 0;
  double bucket_mean = 0.0;
  std::optional<double> spearman_norm_vs_dloss;
  std::optional<double> spearman_firstorder_vs_dloss;
  std::size_t n_samples = 0;
  /// log10(max |dloss| / min |dloss|) over samples with non-zero change.
  double dloss_spread_orders = 0.0;
  bool insufficient = false;
};

struct CorrelationOptions {
  std::size_t n_samples = 200;
  /// Norm standard deviation as a fraction of the bucket mean.
  double relative_std = 0.5;
  std::uint64_t seed = 0;
};

/// For each bucket mean m: isotropic directions scaled to norms drawn
/// uniformly with mean m and std relative_std * m (clipped at 1e-6), applied
/// at random positions of cached sequences. Reports the Spearman correlation
/// of |dloss| with the norm and with |g . delta|. `model` should be the
/// double-precision copy so tiny changes are not lost to rounding.
std::vector<CorrelationReport> correlation_study(const Transformer<double>& model,
                                                 const ActivationCache& cache,
                                                 std::span<const double> bucket_means,
                                                 const CorrelationOptions& options);

/// Rows of `layer,family_or_bucket,metric,value,n`.
void write_perturbation_header(std::ostream& out);
void write_derivative_rows(std::ostream& out, std::span<const DerivativeComparison> rows);
void write_correlation_rows(std::ostream& out, std::span<const CorrelationReport> rows);

}  // namespace gsae
