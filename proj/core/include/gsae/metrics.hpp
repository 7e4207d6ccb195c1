#pragma once

// Evaluation metrics over frozen SAEs and activation caches.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gsae/activation_store.hpp"
#include "gsae/sae.hpp"
#include "gsae/transformer.hpp"

namespace gsae {

struct MetricRow {
  std::string variant;
  int k = 0;
  int h = 0;
  double beta = 0.0;
  std::uint64_t seed = 0;
  double nmse = 0.0;
  double loss_added = 0.0;
  double dead_fraction = 0.0;
  std::size_t n_eval_records = 0;
  /// Set when the configuration failed; the numeric fields are then NaN.
  std::string error;
};

/// ||x - x_hat|| / ||x||. Throws std::invalid_argument when x is zero.
double nmse(std::span<const float> x, std::span<const float> x_hat);

/// Mean per-record NMSE over [n, d] batches.
double mean_nmse(std::span<const float> x, std::span<const float> x_hat, std::size_t n);

/// (L(x_hat) - L(x)) / L(x) for one sequence whose activations at `hook` are
/// `x` ([positions, d]); `tokens` are the sequence's input tokens.
double loss_added(const Model& model, const HookPoint& hook, std::span<const float> x,
                  std::span<const float> x_hat, std::span<const int> tokens);

/// Relative loss change averaged over every sequence run of `eval` (runs of
/// fewer than two records are skipped). `x_hat` is aligned with the cache.
double loss_added(const Model& model, const ActivationCache& eval,
                  std::span<const float> x_hat);

double dead_fraction(const DeadLatentTracker& tracker);

/// Replays the dead-latent rule over `cache` in fixed batches of `batch_size`
/// records (cache order). Used when no training tracker is available.
DeadLatentTracker replay_tracker(const Sae& sae, const ActivationCache& cache,
                                 std::size_t batch_size);

/// Runs the SAE over every cache record in chunks.
SaeCodes run_sae_on_cache(const Sae& sae, const ActivationCache& cache);

/// NMSE, L_added and dead fraction of one SAE on an evaluation cache.
MetricRow evaluate_sae(const Sae& sae, const ActivationCache& eval, const Model& model,
                       const DeadLatentTracker& tracker);

struct SweepGrid {
  std::vector<SaeVariant> variants;
  std::vector<int> ks;
  std::vector<int> hs;
  std::vector<double> betas;
  std::vector<std::uint64_t> seeds;
};

/// Trains one SAE per grid point from `base` (identical step budget) and
/// evaluates it. A failed configuration yields a row with `error` set and the
/// sweep continues.
std::vector<MetricRow> pareto_sweep(const ActivationCache& train, const ActivationCache& eval,
                                    const Model& model, const SaeConfig& base,
                                    const SweepGrid& grid,
                                    const std::function<void(const MetricRow&)>& on_row = {});

void write_metric_csv(std::ostream& out, std::span<const MetricRow> rows);
std::vector<MetricRow> read_metric_csv(const std::filesystem::path& path);

struct DensityProfile {
  std::vector<double> frequency;  // per latent, in [0, 1]
  std::size_t n_tokens = 0;
};

/// Fraction of records on which each latent is selected with a nonzero value.
DensityProfile activation_density(const Sae& sae, const ActivationCache& eval);

struct SimilarityProfile {
  /// Max cosine to any other column; NaN for excluded zero-norm columns.
  std::vector<double> max_cosine;
  std::vector<int> excluded;
};

SimilarityProfile decoder_similarity(const Sae& sae);

enum class SimilarityBucket { kLeft, kMiddle, kRight };
std::string_view to_string(SimilarityBucket bucket);
SimilarityBucket parse_similarity_bucket(std::string_view name);

struct BucketDerivative {
  double mean_abs_derivative = 0.0;
  std::size_t n_latents = 0;
  std::size_t n_tokens = 0;
  /// Set when the region held fewer latents than requested.
  std::optional<std::string> warning;
};

/// Latent indices in a similarity region, ordered by similarity: left is the
/// bottom 10%, middle 45-55%, right the top 10%.
std::vector<int> similarity_region(const SimilarityProfile& profile, SimilarityBucket bucket);

/// Mean over sampled latents and sampled non-degenerate records of
/// |g . W_dec^i / ||W_dec^i|||.
BucketDerivative similarity_bucket_derivatives(const Sae& sae,
                                               const SimilarityProfile& profile,
                                               const ActivationCache& eval,
                                               SimilarityBucket bucket,
                                               std::size_t n_latents, std::size_t n_tokens,
                                               std::uint64_t seed);

struct ProfileSummary {
  std::size_t n = 0;
  double mean = 0, min = 0, p10 = 0, p25 = 0, median = 0, p75 = 0, p90 = 0, max = 0;
};

/// Summary of the finite entries of `values` (linear-interpolated quantiles).
ProfileSummary summarize(std::span<const double> values);

/// Writes the finite values sorted ascending, one per line.
void write_sorted_profile(std::ostream& out, std::span<const double> values);
/// One JSON object on one line.
std::string summary_json(const ProfileSummary& s, const std::string& kind);

/// Shortest round-trip decimal form used by every text output.
std::string format_double(double v);

}  // namespace gsae
