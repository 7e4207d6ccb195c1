#include "gsae/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "gsae/adam.hpp"

namespace gsae {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
ag::Tensor<T> normal_tensor(ag::Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> data(ag::numel(shape));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return ag::Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
ag::Tensor<T> filled(ag::Shape shape, T value) {
  return ag::Tensor<T>(shape, std::vector<T>(ag::numel(shape), value));
}

template <typename U, typename T>
ag::Tensor<U> cast_tensor(const ag::Tensor<T>& t) {
  std::vector<U> data(t.size());
  std::transform(t.data().begin(), t.data().end(), data.begin(),
                 [](T v) { return static_cast<U>(v); });
  return ag::Tensor<U>(t.shape(), std::move(data));
}

template <typename T>
std::vector<ag::Tensor<T>*> layer_fields(LayerParams<T>& p) {
  return {&p.ln1_gain, &p.ln1_bias, &p.w_qkv,    &p.b_qkv,
          &p.w_attn_out, &p.b_attn_out, &p.ln2_gain, &p.ln2_bias,
          &p.w_fc,     &p.b_fc,     &p.w_proj,   &p.b_proj};
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& why) {
    throw std::invalid_argument("invalid model config: " + why);
  };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (d_model < 1 || n_heads < 1 || d_head < 1) fail("dimensions must be positive");
  if (n_heads * d_head != d_model) fail("n_heads * d_head must equal d_model");
  if (vocab_size < 2) fail("vocab_size must be >= 2");
  if (context_length < 2) fail("context_length must be >= 2");
}

std::string_view to_string(HookSite site) {
  return site == HookSite::kResidPost ? "resid_post" : "mlp_out";
}

HookSite parse_hook_site(std::string_view name) {
  if (name == "resid_post") return HookSite::kResidPost;
  if (name == "mlp_out") return HookSite::kMlpOut;
  throw std::invalid_argument("unknown hook site: " + std::string(name));
}

template <typename T>
const ag::Tensor<T>& ForwardTrace<T>::at(const HookPoint& hook) const {
  return hook.site == HookSite::kResidPost ? resid_post.at(hook.layer)
                                           : mlp_out.at(hook.layer);
}

TrainingDiverged::TrainingDiverged(long step, double loss)
    : std::runtime_error("training diverged at step " + std::to_string(step) +
                         " (loss " + std::to_string(loss) + ")"),
      step_(step) {}

// ---------------------------------------------------------------------------
// Construction

template <typename T>
Transformer<T>::Transformer(const ModelConfig& config, Init init) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model;
  const std::size_t v = config_.vocab_size;
  const std::size_t ctx = config_.context_length;
  std::mt19937_64 rng(config_.seed);
  const bool random = init == Init::kRandom;
  auto weight = [&](ag::Shape shape, double stddev) {
    return random ? normal_tensor<T>(std::move(shape), stddev, rng)
                  : ag::Tensor<T>(std::move(shape));
  };
  const double std_resid = 0.02 / std::sqrt(2.0 * config_.n_layers);

  wte_ = weight({v, d}, 0.02);
  wpe_ = weight({ctx, d}, 0.01);
  layers_.resize(config_.n_layers);
  for (auto& p : layers_) {
    p.ln1_gain = filled<T>({d}, T(1));
    p.ln1_bias = ag::Tensor<T>({d});
    p.w_qkv = weight({d, 3 * d}, 0.02);
    p.b_qkv = ag::Tensor<T>({3 * d});
    p.w_attn_out = weight({d, d}, std_resid);
    p.b_attn_out = ag::Tensor<T>({d});
    p.ln2_gain = filled<T>({d}, T(1));
    p.ln2_bias = ag::Tensor<T>({d});
    p.w_fc = weight({d, 4 * d}, 0.02);
    p.b_fc = ag::Tensor<T>({4 * d});
    p.w_proj = weight({4 * d, d}, std_resid);
    p.b_proj = ag::Tensor<T>({d});
  }
  ln_f_gain_ = filled<T>({d}, T(1));
  ln_f_bias_ = ag::Tensor<T>({d});
  // A zero unembedding makes the initial prediction uniform.
  w_u_ = ag::Tensor<T>({v, d});
  b_u_ = ag::Tensor<T>({v});
}

template <typename T>
std::vector<ag::Tensor<T>> Transformer<T>::parameters() const {
  std::vector<ag::Tensor<T>> out{wte_, wpe_};
  for (auto& p : layers_) {
    for (auto* f : layer_fields(const_cast<LayerParams<T>&>(p))) out.push_back(*f);
  }
  out.push_back(ln_f_gain_);
  out.push_back(ln_f_bias_);
  out.push_back(w_u_);
  out.push_back(b_u_);
  return out;
}

template <typename T>
void Transformer<T>::set_requires_grad(bool value) {
  for (auto& p : parameters()) p.set_requires_grad(value);
}

template <typename T>
template <typename U>
Transformer<U> Transformer<T>::cast() const {
  Transformer<U> out(config_, Transformer<U>::Init::kZeros);
  out.wte_ = cast_tensor<U>(wte_);
  out.wpe_ = cast_tensor<U>(wpe_);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto src = layer_fields(const_cast<LayerParams<T>&>(layers_[l]));
    auto dst = layer_fields(out.layers_[l]);
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = cast_tensor<U>(*src[i]);
  }
  out.ln_f_gain_ = cast_tensor<U>(ln_f_gain_);
  out.ln_f_bias_ = cast_tensor<U>(ln_f_bias_);
  out.w_u_ = cast_tensor<U>(w_u_);
  out.b_u_ = cast_tensor<U>(b_u_);
  return out;
}

// ---------------------------------------------------------------------------
// Forward pieces

template <typename T>
void Transformer<T>::check_tokens(std::span<const int> tokens) const {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= config_.vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(tokens[i]) +
                                  " at position " + std::to_string(i) +
                                  " is outside the vocabulary");
    }
  }
}

template <typename T>
void Transformer<T>::check_hook(const HookPoint& hook) const {
  if (hook.layer < 0 || hook.layer >= config_.n_layers) {
    throw std::out_of_range("hook layer " + std::to_string(hook.layer) +
                            " out of range for a " +
                            std::to_string(config_.n_layers) + "-layer model");
  }
}

template <typename T>
ag::Tensor<T> Transformer<T>::embed(std::span<const int> tokens,
                                    std::size_t n_seq) const {
  check_tokens(tokens);
  const std::size_t seq_len = tokens.size() / n_seq;
  if (seq_len > static_cast<std::size_t>(config_.context_length)) {
    throw std::invalid_argument("sequence of " + std::to_string(seq_len) +
                                " tokens exceeds context length " +
                                std::to_string(config_.context_length));
  }
  std::vector<int> pos(tokens.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i % seq_len);
  return ag::add(ag::embedding(wte_, tokens), ag::embedding(wpe_, std::span<const int>(pos)));
}

template <typename T>
ag::Tensor<T> Transformer<T>::attention(const LayerParams<T>& p,
                                        const ag::Tensor<T>& h,
                                        std::size_t n_seq) const {
  const std::size_t d = config_.d_model;
  const std::size_t dh = config_.d_head;
  const std::size_t seq_len = h.rows() / n_seq;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  auto qkv = ag::add(ag::matmul(h, p.w_qkv), p.b_qkv);
  std::vector<ag::Tensor<T>> seqs;
  seqs.reserve(n_seq);
  for (std::size_t s = 0; s < n_seq; ++s) {
    const std::size_t r0 = s * seq_len, r1 = r0 + seq_len;
    std::vector<ag::Tensor<T>> heads;
    heads.reserve(config_.n_heads);
    for (int hd = 0; hd < config_.n_heads; ++hd) {
      const std::size_t c = hd * dh;
      auto q = ag::slice(qkv, r0, r1, c, c + dh);
      auto k = ag::slice(qkv, r0, r1, d + c, d + c + dh);
      auto v = ag::slice(qkv, r0, r1, 2 * d + c, 2 * d + c + dh);
      auto scores = ag::scale(ag::matmul(q, ag::transpose(k)), inv_sqrt);
      auto weights = ag::softmax(ag::causal_mask(scores));
      heads.push_back(ag::matmul(weights, v));
    }
    seqs.push_back(heads.size() == 1 ? heads[0] : ag::concat(heads, 1));
  }
  auto merged = seqs.size() == 1 ? seqs[0] : ag::concat(seqs, 0);
  return ag::add(ag::matmul(merged, p.w_attn_out), p.b_attn_out);
}

template <typename T>
ag::Tensor<T> Transformer<T>::mlp(const LayerParams<T>& p,
                                  const ag::Tensor<T>& h) const {
  auto hidden = ag::gelu(ag::add(ag::matmul(h, p.w_fc), p.b_fc));
  return ag::add(ag::matmul(hidden, p.w_proj), p.b_proj);
}

template <typename T>
ag::Tensor<T> Transformer<T>::unembed(const ag::Tensor<T>& resid) const {
  auto h = ag::layer_norm(resid, ln_f_gain_, ln_f_bias_);
  return ag::add(ag::matmul(h, ag::transpose(w_u_)), b_u_);
}

template <typename T>
ForwardTrace<T> Transformer<T>::forward_full(std::span<const int> tokens) const {
  if (tokens.empty()) throw std::invalid_argument("forward_full: empty input");
  ForwardTrace<T> trace;
  auto x = embed(tokens, 1);
  for (const auto& p : layers_) {
    auto mid = ag::add(x, attention(p, ag::layer_norm(x, p.ln1_gain, p.ln1_bias), 1));
    auto m = mlp(p, ag::layer_norm(mid, p.ln2_gain, p.ln2_bias));
    x = ag::add(mid, m);
    trace.resid_mid.push_back(mid);
    trace.mlp_out.push_back(m);
    trace.resid_post.push_back(x);
  }
  trace.logits = unembed(x);
  if (tokens.size() >= 2) {
    auto head = ag::slice(trace.logits, 0, tokens.size() - 1, 0, trace.logits.cols());
    trace.loss = ag::cross_entropy(head, tokens.subspan(1)).item();
  }
  return trace;
}

template <typename T>
ag::Tensor<T> Transformer<T>::lm_loss(std::span<const int> tokens,
                                      std::size_t n_seq) const {
  if (n_seq == 0 || tokens.size() % n_seq != 0) {
    throw std::invalid_argument("lm_loss: tokens do not split into equal sequences");
  }
  const std::size_t seq_len = tokens.size() / n_seq;
  if (seq_len < 2) throw std::invalid_argument("lm_loss: sequences need >= 2 tokens");
  auto x = embed(tokens, n_seq);
  for (const auto& p : layers_) {
    x = ag::add(x, attention(p, ag::layer_norm(x, p.ln1_gain, p.ln1_bias), n_seq));
    x = ag::add(x, mlp(p, ag::layer_norm(x, p.ln2_gain, p.ln2_bias)));
  }
  auto logits = unembed(x);
  // Drop each sequence's final row; targets are the next tokens.
  std::vector<ag::Tensor<T>> heads;
  std::vector<int> targets;
  for (std::size_t s = 0; s < n_seq; ++s) {
    const std::size_t r0 = s * seq_len;
    heads.push_back(ag::slice(logits, r0, r0 + seq_len - 1, 0, logits.cols()));
    targets.insert(targets.end(), tokens.begin() + r0 + 1,
                   tokens.begin() + r0 + seq_len);
  }
  auto pred = heads.size() == 1 ? heads[0] : ag::concat(heads, 0);
  return ag::cross_entropy(pred, std::span<const int>(targets));
}

template <typename T>
ag::Tensor<T> Transformer<T>::logits_from_hook(const HookPoint& hook,
                                               const ag::Tensor<T>& x,
                                               std::span<const int> tokens) const {
  check_hook(hook);
  if (x.rank() != 2 || x.cols() != static_cast<std::size_t>(config_.d_model)) {
    throw ag::ShapeError("logits_from_hook: expected [positions, " +
                         std::to_string(config_.d_model) + "], got " +
                         ag::shape_str(x.shape()));
  }
  if (x.rows() > static_cast<std::size_t>(config_.context_length)) {
    throw std::invalid_argument("logits_from_hook: too many positions");
  }
  ag::Tensor<T> resid = x;
  if (hook.site == HookSite::kMlpOut) {
    if (tokens.size() != x.rows()) {
      throw std::invalid_argument("logits_from_hook: mlp_out hook needs the "
                                  "sequence's tokens");
    }
    auto h = embed(tokens, 1).detach();
    for (int l = 0; l < hook.layer; ++l) {
      const auto& p = layers_[l];
      h = ag::add(h, attention(p, ag::layer_norm(h, p.ln1_gain, p.ln1_bias), 1));
      h = ag::add(h, mlp(p, ag::layer_norm(h, p.ln2_gain, p.ln2_bias)));
    }
    const auto& p = layers_[hook.layer];
    auto mid = ag::add(h, attention(p, ag::layer_norm(h, p.ln1_gain, p.ln1_bias), 1));
    resid = ag::add(mid.detach(), x);
  }
  for (int l = hook.layer + 1; l < config_.n_layers; ++l) {
    const auto& p = layers_[l];
    resid = ag::add(resid, attention(p, ag::layer_norm(resid, p.ln1_gain, p.ln1_bias), 1));
    resid = ag::add(resid, mlp(p, ag::layer_norm(resid, p.ln2_gain, p.ln2_bias)));
  }
  return unembed(resid);
}

template <typename T>
T Transformer<T>::loss_from_resid(int layer, const ag::Tensor<T>& x,
                                  std::span<const int> targets) const {
  if (x.rank() != 2 || targets.size() + 1 != x.rows()) {
    throw std::invalid_argument("loss_from_resid: need positions - 1 targets");
  }
  auto logits = logits_from_hook({layer, HookSite::kResidPost}, x);
  auto head = ag::slice(logits, 0, targets.size(), 0, logits.cols());
  return ag::cross_entropy(head, targets).item();
}

template <typename T>
std::vector<double> Transformer<T>::probs_from_resid(int layer,
                                                     const ag::Tensor<T>& x) const {
  auto logits = logits_from_hook({layer, HookSite::kResidPost}, x);
  const std::size_t v = logits.cols();
  const std::size_t last = logits.rows() - 1;
  std::vector<double> p(v);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, double(logits.at(last, j)));
  double z = 0.0;
  for (std::size_t j = 0; j < v; ++j) z += (p[j] = std::exp(double(logits.at(last, j)) - mx));
  for (auto& q : p) q /= z;
  return p;
}

template <typename T>
HookGradients<T> Transformer<T>::grad_wrt_resid(const HookPoint& hook,
                                                std::span<const int> tokens) const {
  check_hook(hook);
  if (tokens.size() < 2) {
    throw std::invalid_argument("grad_wrt_resid: need at least 2 tokens");
  }
  auto trace = forward_full(tokens);
  const auto& cached = trace.at(hook);
  ag::Tensor<T> x(cached.shape(),
                  std::vector<T>(cached.data().begin(), cached.data().end()), true);
  auto logits = logits_from_hook(hook, x, tokens);
  auto head = ag::slice(logits, 0, tokens.size() - 1, 0, logits.cols());
  auto loss = ag::cross_entropy(head, tokens.subspan(1));
  loss.backward();

  HookGradients<T> out;
  out.positions = x.rows();
  out.d_model = x.cols();
  out.x.assign(x.data().begin(), x.data().end());
  out.grad.assign(x.grad().begin(), x.grad().end());
  out.loss = loss.item();
  return out;
}

template class Transformer<float>;
template class Transformer<double>;
template struct ForwardTrace<float>;
template struct ForwardTrace<double>;
template Transformer<double> Transformer<float>::cast<double>() const;
template Transformer<float> Transformer<double>::cast<float>() const;
template Transformer<float> Transformer<float>::cast<float>() const;

// ---------------------------------------------------------------------------
// Training

TrainLmResult train_lm(std::span<const int> stream, const ModelConfig& config,
                       const TrainLmOptions& options) {
  config.validate();
  if (stream.size() < 2) throw std::invalid_argument("train_lm: corpus too small");
  if (options.batch_size < 1) throw std::invalid_argument("train_lm: batch_size < 1");
  Model model(config);
  model.set_requires_grad(true);
  Adam adam(model.parameters(), AdamOptions{.lr = options.lr});

  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<std::size_t> start_dist(0, stream.size() - 1);
  const std::size_t ctx = config.context_length;
  std::vector<int> batch(ctx * options.batch_size);

  TrainLmResult result{std::move(model), {}};
  for (long step = 0; step < options.steps; ++step) {
    for (int b = 0; b < options.batch_size; ++b) {
      const std::size_t start = start_dist(rng);
      for (std::size_t i = 0; i < ctx; ++i) {
        batch[b * ctx + i] = stream[(start + i) % stream.size()];
      }
    }
    auto loss = result.model.lm_loss(batch, options.batch_size);
    const double value = loss.item();
    if (!std::isfinite(value)) throw TrainingDiverged(step, value);
    loss.backward();
    if (options.clip_norm > 0) adam.clip_grad_norm(options.clip_norm);

    double lr_scale = 1.0;
    if (step < options.warmup_steps) {
      lr_scale = double(step + 1) / double(options.warmup_steps);
    } else if (options.steps > options.warmup_steps) {
      const double progress = double(step - options.warmup_steps) /
                              double(options.steps - options.warmup_steps);
      lr_scale = 0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * progress));
    }
    adam.step(static_cast<float>(lr_scale));
    result.losses.push_back(value);
    if (options.on_log && (step % options.log_every == 0 || step + 1 == options.steps)) {
      options.on_log(step, value);
    }
  }
  result.model.set_requires_grad(false);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

std::string serialize_checkpoint(const Model& model) {
  io::BinaryWriter w;
  w.bytes("GSLM");
  w.u32(kCheckpointVersion);
  const auto& c = model.config();
  w.u32(c.n_layers);
  w.u32(c.d_model);
  w.u32(c.n_heads);
  w.u32(c.d_head);
  w.u32(c.vocab_size);
  w.u32(c.context_length);
  w.u64(c.seed);
  const auto params = model.parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.u32(static_cast<std::uint32_t>(p.rank()));
    for (auto dim : p.shape()) w.u32(static_cast<std::uint32_t>(dim));
    w.f32s(p.data());
  }
  return w.take();
}

Model deserialize_checkpoint(std::string_view bytes) {
  io::BinaryReader r(bytes);
  r.expect_magic("GSLM");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw io::FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig c;
  c.n_layers = static_cast<int>(r.u32());
  c.d_model = static_cast<int>(r.u32());
  c.n_heads = static_cast<int>(r.u32());
  c.d_head = static_cast<int>(r.u32());
  c.vocab_size = static_cast<int>(r.u32());
  c.context_length = static_cast<int>(r.u32());
  c.seed = r.u64();
  Model model(c, Model::Init::kZeros);
  auto params = model.parameters();
  const auto count = r.u32();
  if (count != params.size()) {
    throw io::FormatError("checkpoint holds " + std::to_string(count) +
                          " tensors, config expects " + std::to_string(params.size()));
  }
  for (auto& p : params) {
    const auto rank = r.u32();
    ag::Shape shape(rank);
    for (auto& dim : shape) dim = r.u32();
    if (shape != p.shape()) {
      throw io::FormatError("checkpoint tensor shape " + ag::shape_str(shape) +
                            " does not match expected " + ag::shape_str(p.shape()));
    }
    r.f32s(p.mutable_data());
  }
  if (!r.done()) throw io::FormatError("trailing bytes after checkpoint");
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_checkpoint(model));
}

Model load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(io::read_file(path));
}

io::Sha256 checkpoint_hash(const Model& model) {
  return io::sha256(serialize_checkpoint(model));
}

}  // namespace gsae
