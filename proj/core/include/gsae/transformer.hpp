#pragma once

// Tiny pre-layer-norm GPT-style decoder over byte tokens. Besides ordinary
// language modelling it exposes the map from a hook-point activation to the
// predictive cross-entropy loss, and the gradient of that loss with respect to
// the activation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gsae/autograd.hpp"
#include "gsae/binary_io.hpp"

namespace gsae {

struct ModelConfig {
  int n_layers = 4;
  int d_model = 128;
  int n_heads = 4;
  int d_head = 32;
  int vocab_size = 256;
  int context_length = 128;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument when the fields are inconsistent.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class HookSite : std::uint8_t { kResidPost = 0, kMlpOut = 1 };

std::string_view to_string(HookSite site);
HookSite parse_hook_site(std::string_view name);

struct HookPoint {
  int layer = 0;
  HookSite site = HookSite::kResidPost;
};

template <typename T>
struct LayerParams {
  ag::Tensor<T> ln1_gain, ln1_bias;
  ag::Tensor<T> w_qkv, b_qkv;  // [d, 3d], [3d]
  ag::Tensor<T> w_attn_out, b_attn_out;
  ag::Tensor<T> ln2_gain, ln2_bias;
  ag::Tensor<T> w_fc, b_fc;      // [d, 4d], [4d]
  ag::Tensor<T> w_proj, b_proj;  // [4d, d], [d]
};

/// Everything recorded by a full forward pass over one sequence.
template <typename T>
struct ForwardTrace {
  ag::Tensor<T> logits;         // [positions, vocab]
  std::optional<T> loss;        // absent for single-token input
  std::vector<ag::Tensor<T>> resid_mid;   // per layer, after attention
  std::vector<ag::Tensor<T>> mlp_out;     // per layer
  std::vector<ag::Tensor<T>> resid_post;  // per layer

  const ag::Tensor<T>& at(const HookPoint& hook) const;
};

/// Hook activations of one sequence with the gradient of the mean predictive
/// loss with respect to them.
template <typename T>
struct HookGradients {
  std::vector<T> x;     // [positions, d_model], row-major
  std::vector<T> grad;  // same layout
  std::size_t positions = 0;
  std::size_t d_model = 0;
  T loss = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(long step, double loss);
  long step() const { return step_; }

 private:
  long step_;
};

template <typename T>
class Transformer {
 public:
  enum class Init { kRandom, kZeros };

  explicit Transformer(const ModelConfig& config, Init init = Init::kRandom);

  const ModelConfig& config() const { return config_; }

  /// Handles to every parameter in checkpoint declaration order.
  std::vector<ag::Tensor<T>> parameters() const;
  void set_requires_grad(bool value);

  template <typename U>
  Transformer<U> cast() const;

  const ag::Tensor<T>& token_embedding() const { return wte_; }
  const ag::Tensor<T>& unembedding() const { return w_u_; }  // [vocab, d]
  const ag::Tensor<T>& unembedding_bias() const { return b_u_; }
  const LayerParams<T>& layer(int i) const { return layers_.at(i); }

  /// Forward over one sequence. Loss averages next-token cross-entropy over
  /// positions 0..n-2.
  ForwardTrace<T> forward_full(std::span<const int> tokens) const;

  /// Mean next-token loss over `n_seq` equal-length sequences laid out
  /// contiguously in `tokens`; graph-enabled for training.
  ag::Tensor<T> lm_loss(std::span<const int> tokens, std::size_t n_seq) const;

  /// Logits when `x` ([positions, d_model]) replaces the activation at `hook`.
  /// `tokens` are needed only for mlp_out hooks (to rebuild the residual
  /// stream up to the MLP). Gradients flow back into `x`.
  ag::Tensor<T> logits_from_hook(const HookPoint& hook, const ag::Tensor<T>& x,
                                 std::span<const int> tokens = {}) const;

  /// Mean cross-entropy of the logits produced from layer-`layer` residual
  /// activations against `targets` (one per predicted position, i.e.
  /// positions - 1 entries).
  T loss_from_resid(int layer, const ag::Tensor<T>& x,
                    std::span<const int> targets) const;

  /// Final-position output distribution from layer-`layer` residuals.
  std::vector<double> probs_from_resid(int layer, const ag::Tensor<T>& x) const;

  /// Activations at `hook` and the gradient of the mean predictive loss with
  /// respect to each position's activation. The final position has no
  /// downstream loss and receives an all-zero gradient.
  HookGradients<T> grad_wrt_resid(const HookPoint& hook,
                                  std::span<const int> tokens) const;

  void check_hook(const HookPoint& hook) const;

 private:
  template <typename U>
  friend class Transformer;

  ag::Tensor<T> embed(std::span<const int> tokens, std::size_t n_seq) const;
  ag::Tensor<T> attention(const LayerParams<T>& p, const ag::Tensor<T>& h,
                          std::size_t n_seq) const;
  ag::Tensor<T> mlp(const LayerParams<T>& p, const ag::Tensor<T>& h) const;
  ag::Tensor<T> unembed(const ag::Tensor<T>& resid) const;
  void check_tokens(std::span<const int> tokens) const;

  ModelConfig config_;
  ag::Tensor<T> wte_, wpe_;
  std::vector<LayerParams<T>> layers_;
  ag::Tensor<T> ln_f_gain_, ln_f_bias_;
  ag::Tensor<T> w_u_, b_u_;
};

using Model = Transformer<float>;

struct TrainLmOptions {
  long steps = 1000;
  float lr = 3e-3f;
  int batch_size = 16;
  long warmup_steps = 50;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  long log_every = 50;
  std::function<void(long step, double loss)> on_log;
};

struct TrainLmResult {
  Model model;
  std::vector<double> losses;  // one per step
};

/// Trains on random (cycling) windows of `stream`. Throws TrainingDiverged
/// when the loss becomes non-finite.
TrainLmResult train_lm(std::span<const int> stream, const ModelConfig& config,
                       const TrainLmOptions& options);

// Checkpoint file: "GSLM", u32 version, config, then parameters in
// declaration order, each with a shape header, as little-endian f32.
std::string serialize_checkpoint(const Model& model);
Model deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
io::Sha256 checkpoint_hash(const Model& model);

}  // namespace gsae
