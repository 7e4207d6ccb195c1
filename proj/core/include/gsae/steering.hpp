#pragma once

// Steering with SAE decoder directions: which tokens a latent promotes, and how
// much probability mass adding the latent's direction moves onto them.

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gsae/activation_store.hpp"
#include "gsae/sae.hpp"
#include "gsae/transformer.hpp"

namespace gsae {

struct SteeringResult {
  int latent_index = 0;
  double alpha = 0.0;
  /// Mean over contexts of the summed probability change on the associated
  /// tokens, and on every other token.
  double added_prob_associated = 0.0;
  double added_prob_other = 0.0;
  int context_count = 0;
  int skipped_contexts = 0;
  /// Largest |sum of all probability changes| over the steered contexts.
  double max_conservation_error = 0.0;
  std::string error;
};

/// The n token ids with the largest W_U W_dec^i, descending, ties by lowest id.
/// Warns (but still answers) when `dead` is set.
std::vector<int> associated_logits(const Sae& sae, const Model& model, int latent, int n,
                                   bool dead = false);

/// Final-position output distributions (double softmax) of one context with
/// and without `delta` added to the hook activation at the final position.
struct SteeredDistributions {
  std::vector<double> base;
  std::vector<double> steered;
};
SteeredDistributions steer_context(const Model& model, const HookPoint& hook,
                                   std::span<const int> tokens, std::span<const float> delta);

/// Adds alpha * W_dec^i / ||W_dec^i|| at the final position of each context
/// and averages the probability change over the associated tokens and over
/// the rest of the vocabulary.
SteeringResult steering_effect(const Sae& sae, const Model& model, const HookPoint& hook,
                               int latent, double alpha,
                               std::span<const std::vector<int>> contexts, int n);

/// One result per (latent, alpha), latent-major. Failed cells carry `error`.
std::vector<SteeringResult> steering_sweep(const Sae& sae, const Model& model,
                                           const HookPoint& hook, std::span<const int> latents,
                                           std::span<const double> alphas,
                                           std::span<const std::vector<int>> contexts, int n);

/// Seeded sample of `count` latents that are not dead-flagged (all of them
/// when `count` exceeds the alive count), ascending.
std::vector<int> sample_alive_latents(std::span<const std::uint8_t> dead, std::size_t count,
                                      std::uint64_t seed);

/// Median activation norm over the cache.
double median_activation_norm(const ActivationCache& cache);
/// {0.5, 1, 2, 4, 8} * median ||x|| / 10.
std::vector<double> default_alpha_grid(const ActivationCache& cache);

/// Seeded sample of `count` held-out contexts: windows of `length` tokens
/// taken from the cache's sequence runs.
std::vector<std::vector<int>> sample_contexts(const ActivationCache& cache, std::size_t count,
                                              std::size_t length, std::uint64_t seed);

struct CaseStudy {
  int latent_a = 0;
  int latent_b = 0;
  std::vector<int> associated_a;
  std::vector<int> associated_b;
  /// Union of both associated sets, ascending, with per-token mean deltas.
  std::vector<int> tokens;
  std::vector<double> delta_a;
  std::vector<double> delta_b;
  /// Mean added probability on each SAE's non-associated tokens.
  double other_a = 0.0;
  double other_b = 0.0;
};

/// The latent with the largest mean pre-activation over the probe's hook
/// activations. Throws std::invalid_argument when no mean is positive.
int probe_latent(const Sae& sae, const Model& model, const HookPoint& hook,
                 std::span<const int> probe_tokens);

CaseStudy case_study(const Sae& sae_a, const Sae& sae_b, const Model& model,
                     const HookPoint& hook, std::span<const int> probe_tokens, double alpha,
                     int n, std::span<const std::vector<int>> contexts);

/// CSV `token,delta_prob_sae_a,delta_prob_sae_b`, with a final `<other>` row.
void write_case_study_csv(std::ostream& out, const CaseStudy& study);
/// One JSON object per line.
void write_steering_jsonl(std::ostream& out, std::span<const SteeringResult> rows);

}  // namespace gsae
