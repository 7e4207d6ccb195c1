#pragma once

// Sparse autoencoder parameterization, the four activation variants, and the
// training loop.
//
//   z     = W_enc (x - b_dec) + b_enc
//   y     = sigma(z)
//   x_hat = W_dec y + b_dec
//
// TopK keeps the k largest z. The gradient-aware variant ranks latents by
// z + beta * z * |W_dec^T g|, where g is the loss gradient at x, but still
// keeps the value z itself.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gsae/activation_store.hpp"
#include "gsae/adam.hpp"
#include "gsae/autograd.hpp"
#include "gsae/transformer.hpp"

namespace gsae {

enum class SaeVariant : std::uint8_t { kReluL1 = 0, kTopK = 1, kGsae = 2, kE2eTopK = 3 };

std::string_view to_string(SaeVariant variant);
SaeVariant parse_sae_variant(std::string_view name);
bool is_topk_family(SaeVariant variant);

struct SaeConfig {
  int d = 0;
  int h = 0;
  int k = 32;
  double beta = 1e5;
  SaeVariant variant = SaeVariant::kTopK;
  double l1_coefficient = 1e-3;
  double lr = 1e-3;
  int batch_size = 256;
  long train_steps = 1000;
  std::uint64_t seed = 0;
  int dead_window = 5;

  void validate() const;
  bool operator==(const SaeConfig&) const = default;
};

struct SaeParams {
  ag::Tensor<float> w_enc;  // [h, d]
  ag::Tensor<float> b_enc;  // [h]
  ag::Tensor<float> w_dec;  // [d, h]
  ag::Tensor<float> b_dec;  // [d]

  int d() const { return static_cast<int>(b_dec.size()); }
  int h() const { return static_cast<int>(b_enc.size()); }
  /// Deep copy (parameter handles are shared otherwise).
  SaeParams clone() const;
  std::vector<ag::Tensor<float>> tensors() const { return {w_enc, b_enc, w_dec, b_dec}; }
  /// Column i of W_dec.
  std::vector<float> decoder_column(int i) const;
};

struct Sae {
  SaeConfig config;
  SaeParams params;
};

/// Exactly k latent indices (ascending) and the score each was ranked by.
struct SelectionMask {
  std::vector<std::uint32_t> indices;
  std::vector<float> scores;

  bool operator==(const SelectionMask&) const = default;
};

struct DeadLatentTracker {
  DeadLatentTracker() = default;
  DeadLatentTracker(int h, int window);

  std::vector<int> consecutive_inactive;
  std::vector<std::uint8_t> dead;
  int window = 5;
  long batches_seen = 0;

  /// Counters increment on silence and reset on firing.
  void update(std::span<const std::uint8_t> fired);
  std::size_t dead_count() const;
};

/// W_dec columns: seeded Gaussian, unit-normalized; W_enc = W_dec^T; zero
/// biases.
SaeParams init_params(const SaeConfig& config);

std::vector<float> encode_pre(const SaeParams& params, std::span<const float> x);
SelectionMask select_topk(std::span<const float> z, int k);
/// W_dec^T g.
std::vector<float> decoder_projection(const SaeParams& params, std::span<const float> g);
/// Ranks latents by z_i + beta * z_i * |attribution_i| where `attribution`
/// is W_dec^T g. g is treated as a constant.
SelectionMask select_by_attribution(std::span<const float> z,
                                    std::span<const float> attribution, int k,
                                    double beta);
/// Throws std::invalid_argument when g is not finite.
SelectionMask select_gradient_topk(std::span<const float> z, std::span<const float> g,
                                   const SaeParams& params, int k, double beta);
std::vector<float> apply_mask(std::span<const float> z, const SelectionMask& mask);
std::vector<float> decode(const SaeParams& params, std::span<const float> y);

/// Batched inference over a frozen SAE. `g` is required for gsae.
struct SaeCodes {
  std::size_t n = 0;
  std::vector<float> z;      // [n, h]
  std::vector<float> y;      // [n, h]
  std::vector<float> x_hat;  // [n, d]
};
SaeCodes run_sae(const Sae& sae, std::span<const float> x, std::span<const float> g,
                 std::size_t n);

/// Overwrites each W_dec column with its unit-norm direction.
void normalize_decoder(SaeParams& params);

class SaeTrainer {
 public:
  /// `model` is required for e2e_topk; `hook` is where the cache was taken.
  SaeTrainer(const SaeConfig& config, SaeParams params, const Model* model = nullptr,
             HookPoint hook = {});

  /// One optimizer step on the given cache records; returns the batch loss.
  /// For e2e_topk the records must form whole sequence runs.
  double train_step(const ActivationCache& cache, std::span<const std::size_t> batch);

  const SaeConfig& config() const { return config_; }
  const SaeParams& params() const { return params_; }
  const DeadLatentTracker& tracker() const { return tracker_; }
  long steps_taken() const { return step_; }

 private:
  double reconstruction_step(const ActivationCache& cache,
                             std::span<const std::size_t> batch,
                             std::vector<std::uint8_t>& fired);
  double e2e_step(const ActivationCache& cache, std::span<const std::size_t> batch,
                  std::vector<std::uint8_t>& fired);
  // Selection mask [n, h] of 0/1 for the TopK family.
  std::vector<float> selection_matrix(std::span<const float> z, std::span<const float> g,
                                      std::size_t n) const;

  SaeConfig config_;
  SaeParams params_;
  Adam adam_;
  DeadLatentTracker tracker_;
  const Model* model_;
  HookPoint hook_;
  long step_ = 0;
};

struct SaeTrainResult {
  Sae sae;
  DeadLatentTracker tracker;
  std::vector<double> losses;
};

/// Full training run: seeded shuffled batches (whole sequences for e2e_topk),
/// config.train_steps steps. Throws TrainingDiverged on a non-finite loss.
SaeTrainResult train_sae(const ActivationCache& cache, const SaeConfig& config,
                         const Model* model = nullptr,
                         const std::function<void(long, double)>& on_step = {});

/// Picks beta so that beta * E|g . u| equals `target_product`, where u ranges
/// over random unit directions and g over the cache's non-degenerate
/// gradients.
double calibrate_beta(const ActivationCache& cache, double target_product,
                      std::uint64_t seed, std::size_t samples = 4096);

// SAE checkpoint: "GSAE", u32 version, config, then W_enc, b_enc, W_dec,
// b_dec with shape headers as little-endian f32.
std::string serialize_sae(const Sae& sae);
Sae deserialize_sae(std::string_view bytes);
void save_sae(const Sae& sae, const std::filesystem::path& path);
Sae load_sae(const std::filesystem::path& path);

}  // namespace gsae
