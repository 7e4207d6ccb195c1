#include "gsae/sae.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace gsae {

namespace {

constexpr std::uint32_t kSaeVersion = 1;

using RowMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapF = Eigen::Map<RowMatF>;
using CMapF = Eigen::Map<const RowMatF>;
using CVecF = Eigen::Map<const Eigen::VectorXf>;

void require_finite(std::span<const float> v, const char* what) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw std::invalid_argument(std::string(what) + ": non-finite value at index " +
                                  std::to_string(i));
    }
  }
}

// Top-k of `scores` with lowest-index tie-breaking, written into `idx`
// (ascending order) using `scratch` of size scores.size().
void topk_indices(std::span<const float> scores, int k, std::vector<std::uint32_t>& scratch,
                  std::vector<std::uint32_t>& idx) {
  const std::size_t n = scores.size();
  scratch.resize(n);
  std::iota(scratch.begin(), scratch.end(), 0u);
  auto better = [&](std::uint32_t a, std::uint32_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  };
  const std::size_t kk = std::min<std::size_t>(std::max(k, 0), n);
  if (kk < n) std::nth_element(scratch.begin(), scratch.begin() + kk, scratch.end(), better);
  idx.assign(scratch.begin(), scratch.begin() + kk);
  std::sort(idx.begin(), idx.end());
}

}  // namespace

std::string_view to_string(SaeVariant variant) {
  switch (variant) {
    case SaeVariant::kReluL1:
      return "relu_l1";
    case SaeVariant::kTopK:
      return "topk";
    case SaeVariant::kGsae:
      return "gsae";
    case SaeVariant::kE2eTopK:
      return "e2e_topk";
  }
  return "?";
}

SaeVariant parse_sae_variant(std::string_view name) {
  if (name == "relu_l1") return SaeVariant::kReluL1;
  if (name == "topk") return SaeVariant::kTopK;
  if (name == "gsae") return SaeVariant::kGsae;
  if (name == "e2e_topk") return SaeVariant::kE2eTopK;
  throw std::invalid_argument("unknown SAE variant: " + std::string(name));
}

bool is_topk_family(SaeVariant variant) { return variant != SaeVariant::kReluL1; }

void SaeConfig::validate() const {
  auto fail = [](const std::string& why) {
    throw std::invalid_argument("invalid SAE config: " + why);
  };
  if (d < 1) fail("d must be >= 1");
  if (h <= d) fail("h must exceed d (overcomplete dictionary)");
  if (is_topk_family(variant) && (k < 1 || k > h)) fail("k must be in [1, h]");
  if (!(beta >= 0.0) || !std::isfinite(beta)) fail("beta must be finite and >= 0");
  if (l1_coefficient < 0.0) fail("l1_coefficient must be >= 0");
  if (!(lr > 0.0)) fail("lr must be > 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (train_steps < 0) fail("train_steps must be >= 0");
  if (dead_window < 1) fail("dead_window must be >= 1");
}

SaeParams SaeParams::clone() const {
  auto copy = [](const ag::Tensor<float>& t) { return t.detach(); };
  return {copy(w_enc), copy(b_enc), copy(w_dec), copy(b_dec)};
}

std::vector<float> SaeParams::decoder_column(int i) const {
  const int dd = d(), hh = h();
  std::vector<float> col(dd);
  const auto w = w_dec.data();
  for (int r = 0; r < dd; ++r) col[r] = w[static_cast<std::size_t>(r) * hh + i];
  return col;
}

DeadLatentTracker::DeadLatentTracker(int h, int window_)
    : consecutive_inactive(h, 0), dead(h, 0), window(window_) {}

void DeadLatentTracker::update(std::span<const std::uint8_t> fired) {
  if (fired.size() != consecutive_inactive.size()) {
    throw std::invalid_argument("tracker update: expected " +
                                std::to_string(consecutive_inactive.size()) + " latents");
  }
  for (std::size_t i = 0; i < fired.size(); ++i) {
    consecutive_inactive[i] = fired[i] ? 0 : consecutive_inactive[i] + 1;
    dead[i] = consecutive_inactive[i] >= window ? 1 : 0;
  }
  ++batches_seen;
}

std::size_t DeadLatentTracker::dead_count() const {
  return static_cast<std::size_t>(std::count(dead.begin(), dead.end(), 1));
}

SaeParams init_params(const SaeConfig& config) {
  config.validate();
  const std::size_t d = config.d, h = config.h;
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<float> w_dec(d * h);
  for (auto& v : w_dec) v = static_cast<float>(dist(rng));
  SaeParams p;
  p.w_dec = ag::Tensor<float>({d, h}, std::move(w_dec));
  normalize_decoder(p);
  std::vector<float> w_enc(h * d);
  MapF(w_enc.data(), h, d) = CMapF(p.w_dec.data().data(), d, h).transpose();
  p.w_enc = ag::Tensor<float>({h, d}, std::move(w_enc));
  p.b_enc = ag::Tensor<float>({h});
  p.b_dec = ag::Tensor<float>({d});
  return p;
}

void normalize_decoder(SaeParams& params) {
  const auto d = params.w_dec.rows(), h = params.w_dec.cols();
  MapF w(params.w_dec.mutable_data().data(), d, h);
  for (std::size_t j = 0; j < h; ++j) {
    const float n = w.col(j).norm();
    if (n > 0.0f) w.col(j) /= n;
  }
}

std::vector<float> encode_pre(const SaeParams& params, std::span<const float> x) {
  const int d = params.d(), h = params.h();
  if (static_cast<int>(x.size()) != d) {
    throw std::invalid_argument("encode_pre: input has length " + std::to_string(x.size()) +
                                ", SAE expects " + std::to_string(d));
  }
  const float* w = params.w_enc.data().data();
  const float* be = params.b_enc.data().data();
  const float* bd = params.b_dec.data().data();
  std::vector<double> xc(d);
  for (int i = 0; i < d; ++i) xc[i] = static_cast<double>(x[i]) - bd[i];
  std::vector<float> z(h);
  for (int j = 0; j < h; ++j) {
    double acc = be[j];
    const float* row = w + static_cast<std::size_t>(j) * d;
    for (int i = 0; i < d; ++i) acc += row[i] * xc[i];
    z[j] = static_cast<float>(acc);
  }
  return z;
}

SelectionMask select_topk(std::span<const float> z, int k) {
  require_finite(z, "select_topk");
  SelectionMask m;
  std::vector<std::uint32_t> scratch;
  topk_indices(z, k, scratch, m.indices);
  for (auto i : m.indices) m.scores.push_back(z[i]);
  return m;
}

std::vector<float> decoder_projection(const SaeParams& params, std::span<const float> g) {
  const int d = params.d(), h = params.h();
  if (static_cast<int>(g.size()) != d) {
    throw std::invalid_argument("decoder_projection: gradient has length " +
                                std::to_string(g.size()));
  }
  const float* w = params.w_dec.data().data();
  std::vector<double> acc(h, 0.0);
  for (int i = 0; i < d; ++i) {
    const double gi = g[i];
    const float* row = w + static_cast<std::size_t>(i) * h;
    for (int j = 0; j < h; ++j) acc[j] += row[j] * gi;
  }
  return std::vector<float>(acc.begin(), acc.end());
}

SelectionMask select_by_attribution(std::span<const float> z,
                                    std::span<const float> attribution, int k,
                                    double beta) {
  if (z.size() != attribution.size()) {
    throw std::invalid_argument("select_by_attribution: length mismatch");
  }
  require_finite(z, "select_by_attribution");
  std::vector<float> scores(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double zi = z[i];
    scores[i] = static_cast<float>(zi + beta * zi * std::abs(double{attribution[i]}));
  }
  SelectionMask m;
  std::vector<std::uint32_t> scratch;
  topk_indices(scores, k, scratch, m.indices);
  for (auto i : m.indices) m.scores.push_back(scores[i]);
  return m;
}

SelectionMask select_gradient_topk(std::span<const float> z, std::span<const float> g,
                                   const SaeParams& params, int k, double beta) {
  require_finite(g, "select_gradient_topk: gradient");
  if (beta < 0.0) throw std::invalid_argument("select_gradient_topk: beta < 0");
  return select_by_attribution(z, decoder_projection(params, g), k, beta);
}

std::vector<float> apply_mask(std::span<const float> z, const SelectionMask& mask) {
  std::vector<float> y(z.size(), 0.0f);
  for (auto i : mask.indices) y.at(i) = z[i];
  return y;
}

std::vector<float> decode(const SaeParams& params, std::span<const float> y) {
  const int d = params.d(), h = params.h();
  if (static_cast<int>(y.size()) != h) {
    throw std::invalid_argument("decode: code has length " + std::to_string(y.size()));
  }
  const float* w = params.w_dec.data().data();
  const float* bd = params.b_dec.data().data();
  std::vector<float> out(d);
  for (int i = 0; i < d; ++i) {
    double acc = bd[i];
    const float* row = w + static_cast<std::size_t>(i) * h;
    for (int j = 0; j < h; ++j) acc += static_cast<double>(row[j]) * y[j];
    out[i] = static_cast<float>(acc);
  }
  return out;
}

SaeCodes run_sae(const Sae& sae, std::span<const float> x, std::span<const float> g,
                 std::size_t n) {
  const auto& p = sae.params;
  const std::size_t d = p.d(), h = p.h();
  if (x.size() != n * d) throw std::invalid_argument("run_sae: input size mismatch");
  const bool gradient_aware = sae.config.variant == SaeVariant::kGsae;
  if (gradient_aware && g.size() != n * d) {
    throw std::invalid_argument("run_sae: gsae inference needs gradients");
  }
  SaeCodes out;
  out.n = n;
  out.z.resize(n * h);
  out.y.assign(n * h, 0.0f);
  out.x_hat.resize(n * d);
  CMapF X(x.data(), n, d);
  CMapF W_enc(p.w_enc.data().data(), h, d);
  CMapF W_dec(p.w_dec.data().data(), d, h);
  Eigen::RowVectorXf b_dec = CVecF(p.b_dec.data().data(), d).transpose();
  Eigen::RowVectorXf b_enc = CVecF(p.b_enc.data().data(), h).transpose();
  MapF Z(out.z.data(), n, h);
  Z.noalias() = (X.rowwise() - b_dec) * W_enc.transpose();
  Z.rowwise() += b_enc;

  RowMatF attribution;
  if (gradient_aware) attribution = CMapF(g.data(), n, d) * W_dec;

  std::vector<std::uint32_t> scratch, idx;
  std::vector<float> scores(h);
  for (std::size_t r = 0; r < n; ++r) {
    std::span<const float> zr(out.z.data() + r * h, h);
    float* yr = out.y.data() + r * h;
    if (sae.config.variant == SaeVariant::kReluL1) {
      for (std::size_t j = 0; j < h; ++j) yr[j] = zr[j] > 0.0f ? zr[j] : 0.0f;
      continue;
    }
    std::span<const float> rank_by = zr;
    if (gradient_aware) {
      const float b = static_cast<float>(sae.config.beta);
      for (std::size_t j = 0; j < h; ++j) {
        scores[j] = zr[j] + b * zr[j] * std::abs(attribution(r, j));
      }
      rank_by = scores;
    }
    topk_indices(rank_by, sae.config.k, scratch, idx);
    for (auto j : idx) yr[j] = zr[j];
  }
  MapF Xh(out.x_hat.data(), n, d);
  Xh.noalias() = CMapF(out.y.data(), n, h) * W_dec.transpose();
  Xh.rowwise() += b_dec;
  return out;
}

// ---------------------------------------------------------------------------
// Training

SaeTrainer::SaeTrainer(const SaeConfig& config, SaeParams params, const Model* model,
                       HookPoint hook)
    : config_(config),
      params_(std::move(params)),
      adam_(params_.tensors(), AdamOptions{.lr = static_cast<float>(config.lr)}),
      tracker_(config.h, config.dead_window),
      model_(model),
      hook_(hook) {
  config_.validate();
  if (params_.d() != config_.d || params_.h() != config_.h) {
    throw std::invalid_argument("SaeTrainer: parameter shapes do not match config");
  }
  if (config_.variant == SaeVariant::kE2eTopK) {
    if (model_ == nullptr) {
      throw std::invalid_argument("e2e_topk training requires a model checkpoint");
    }
    model_->check_hook(hook_);
  }
  for (auto& t : params_.tensors()) t.set_requires_grad(true);
}

std::vector<float> SaeTrainer::selection_matrix(std::span<const float> z,
                                                std::span<const float> g,
                                                std::size_t n) const {
  const std::size_t d = config_.d, h = config_.h;
  std::vector<float> mask(n * h, 0.0f);
  RowMatF attribution;
  const bool gradient_aware = config_.variant == SaeVariant::kGsae;
  if (gradient_aware) {
    require_finite(g, "gsae training: cached gradient");
    attribution = CMapF(g.data(), n, d) * CMapF(params_.w_dec.data().data(), d, h);
  }
  const float b = static_cast<float>(config_.beta);
  std::vector<std::uint32_t> scratch, idx;
  std::vector<float> scores(h);
  for (std::size_t r = 0; r < n; ++r) {
    std::span<const float> zr(z.data() + r * h, h);
    std::span<const float> rank_by = zr;
    if (gradient_aware) {
      for (std::size_t j = 0; j < h; ++j) {
        scores[j] = zr[j] + b * zr[j] * std::abs(attribution(r, j));
      }
      rank_by = scores;
    }
    topk_indices(rank_by, config_.k, scratch, idx);
    for (auto j : idx) mask[r * h + j] = 1.0f;
  }
  return mask;
}

double SaeTrainer::reconstruction_step(const ActivationCache& cache,
                                       std::span<const std::size_t> batch,
                                       std::vector<std::uint8_t>& fired) {
  const std::size_t n = batch.size(), d = config_.d, h = config_.h;
  ag::Tensor<float> x({n, d}, cache.gather_x(batch));
  auto xc = ag::sub(x, params_.b_dec);
  auto z = ag::add(ag::matmul(xc, ag::transpose(params_.w_enc)), params_.b_enc);
  ag::Tensor<float> y;
  if (config_.variant == SaeVariant::kReluL1) {
    y = ag::relu(z);
  } else {
    const auto g = config_.variant == SaeVariant::kGsae ? cache.gather_g(batch)
                                                        : std::vector<float>{};
    y = ag::mul(z, ag::Tensor<float>({n, h}, selection_matrix(z.data(), g, n)));
  }
  auto x_hat = ag::add(ag::matmul(y, ag::transpose(params_.w_dec)), params_.b_dec);
  auto err = ag::sub(x_hat, x);
  auto loss = ag::scale(ag::sum(ag::mul(err, err)), 1.0f / static_cast<float>(n));
  if (config_.variant == SaeVariant::kReluL1) {
    loss = ag::add(loss, ag::scale(ag::sum(ag::abs(y)),
                                   static_cast<float>(config_.l1_coefficient / n)));
  }
  const auto yd = y.data();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < h; ++j) {
      if (yd[r * h + j] != 0.0f) fired[j] = 1;
    }
  }
  const double value = loss.item();
  if (!std::isfinite(value)) throw TrainingDiverged(step_, value);
  loss.backward();
  return value;
}

double SaeTrainer::e2e_step(const ActivationCache& cache, std::span<const std::size_t> batch,
                            std::vector<std::uint8_t>& fired) {
  const std::size_t d = config_.d, h = config_.h;
  // Split the batch into runs of consecutive positions of one sequence.
  std::vector<std::pair<std::size_t, std::size_t>> runs;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const bool cont = i > 0 && batch[i] == batch[i - 1] + 1 &&
                      cache.sequence_id(batch[i]) == cache.sequence_id(batch[i - 1]);
    if (cont) {
      ++runs.back().second;
    } else {
      runs.emplace_back(i, 1);
    }
  }
  std::vector<ag::Tensor<float>> kls;
  std::size_t total_rows = 0;
  for (const auto& [start, len] : runs) {
    auto idx = batch.subspan(start, len);
    ag::Tensor<float> x({len, d}, cache.gather_x(idx));
    std::vector<int> tokens(len);
    for (std::size_t i = 0; i < len; ++i) tokens[i] = static_cast<int>(cache.token_id(idx[i]));
    auto xc = ag::sub(x, params_.b_dec);
    auto z = ag::add(ag::matmul(xc, ag::transpose(params_.w_enc)), params_.b_enc);
    auto y = ag::mul(z, ag::Tensor<float>({len, h}, selection_matrix(z.data(), {}, len)));
    auto x_hat = ag::add(ag::matmul(y, ag::transpose(params_.w_dec)), params_.b_dec);
    for (std::size_t r = 0; r < len; ++r) {
      for (std::size_t j = 0; j < h; ++j) {
        if (y.at(r, j) != 0.0f) fired[j] = 1;
      }
    }
    // Reference distribution from the genuine activations (constant).
    auto ref_logits = model_->logits_from_hook(hook_, x, tokens).detach();
    auto ref_logp = ag::log_softmax(ref_logits);
    auto ref_p = ag::softmax(ref_logits);
    auto logq = ag::log_softmax(model_->logits_from_hook(hook_, x_hat, tokens));
    kls.push_back(ag::sum(ag::mul(ref_p, ag::sub(ref_logp, logq))));
    total_rows += len;
  }
  auto total = kls[0];
  for (std::size_t i = 1; i < kls.size(); ++i) total = ag::add(total, kls[i]);
  auto loss = ag::scale(total, 1.0f / static_cast<float>(total_rows));
  const double value = loss.item();
  if (!std::isfinite(value)) throw TrainingDiverged(step_, value);
  loss.backward();
  return value;
}

double SaeTrainer::train_step(const ActivationCache& cache,
                              std::span<const std::size_t> batch) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  if (cache.d_model() != static_cast<std::size_t>(config_.d)) {
    throw std::invalid_argument("train_step: cache width does not match SAE input");
  }
  std::vector<std::uint8_t> fired(config_.h, 0);
  const double loss = config_.variant == SaeVariant::kE2eTopK
                          ? e2e_step(cache, batch, fired)
                          : reconstruction_step(cache, batch, fired);
  adam_.step();
  normalize_decoder(params_);
  tracker_.update(fired);
  ++step_;
  return loss;
}

SaeTrainResult train_sae(const ActivationCache& cache, const SaeConfig& config,
                         const Model* model,
                         const std::function<void(long, double)>& on_step) {
  config.validate();
  if (cache.empty()) throw std::invalid_argument("train_sae: empty cache");
  if (cache.d_model() != static_cast<std::size_t>(config.d)) {
    throw std::invalid_argument("train_sae: cache d_model " +
                                std::to_string(cache.d_model()) + " != SAE d " +
                                std::to_string(config.d));
  }
  SaeTrainer trainer(config, init_params(config), model, cache.hook());
  SaeTrainResult result;

  if (config.variant == SaeVariant::kE2eTopK) {
    const auto runs = cache.sequences();
    const std::size_t mean_len = std::max<std::size_t>(1, cache.size() / runs.size());
    const std::size_t per_batch =
        std::max<std::size_t>(1, static_cast<std::size_t>(config.batch_size) / mean_len);
    BatchSampler sampler(runs.size(), per_batch, config.seed);
    std::vector<std::size_t> idx;
    for (long s = 0; s < config.train_steps; ++s) {
      idx.clear();
      for (auto r : sampler.next()) {
        for (std::size_t i = 0; i < runs[r].length; ++i) idx.push_back(runs[r].begin + i);
      }
      result.losses.push_back(trainer.train_step(cache, idx));
      if (on_step) on_step(s, result.losses.back());
    }
  } else {
    BatchSampler sampler(cache.size(), config.batch_size, config.seed);
    for (long s = 0; s < config.train_steps; ++s) {
      result.losses.push_back(trainer.train_step(cache, sampler.next()));
      if (on_step) on_step(s, result.losses.back());
    }
  }
  result.sae = Sae{config, trainer.params().clone()};
  result.tracker = trainer.tracker();
  return result;
}

double calibrate_beta(const ActivationCache& cache, double target_product,
                      std::uint64_t seed, std::size_t samples) {
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < cache.size(); ++i) {
    const auto g = cache.g(i);
    if (std::any_of(g.begin(), g.end(), [](float v) { return v != 0.0f; })) usable.push_back(i);
  }
  if (usable.empty()) throw std::invalid_argument("calibrate_beta: no non-zero gradients");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t d = cache.d_model();
  std::vector<double> u(d);
  double total = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    const auto g = cache.g(usable[rng() % usable.size()]);
    double norm = 0.0;
    for (auto& v : u) {
      v = normal(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) dot += g[j] * u[j] / norm;
    total += std::abs(dot);
  }
  return target_product / (total / double(samples));
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

void write_tensor(io::BinaryWriter& w, const ag::Tensor<float>& t) {
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (auto dim : t.shape()) w.u32(static_cast<std::uint32_t>(dim));
  w.f32s(t.data());
}

ag::Tensor<float> read_tensor(io::BinaryReader& r, const ag::Shape& expected,
                              const char* name) {
  const auto rank = r.u32();
  ag::Shape shape(rank);
  for (auto& dim : shape) dim = r.u32();
  if (shape != expected) {
    throw io::FormatError(std::string("SAE tensor ") + name + " has shape " +
                          ag::shape_str(shape) + ", expected " + ag::shape_str(expected));
  }
  ag::Tensor<float> t(shape);
  r.f32s(t.mutable_data());
  return t;
}

}  // namespace

std::string serialize_sae(const Sae& sae) {
  const auto& c = sae.config;
  io::BinaryWriter w;
  w.bytes("GSAE");
  w.u32(kSaeVersion);
  w.u32(static_cast<std::uint32_t>(c.d));
  w.u32(static_cast<std::uint32_t>(c.h));
  w.u32(static_cast<std::uint32_t>(c.k));
  w.f64(c.beta);
  w.u8(static_cast<std::uint8_t>(c.variant));
  w.f64(c.l1_coefficient);
  w.f64(c.lr);
  w.u32(static_cast<std::uint32_t>(c.batch_size));
  w.u64(static_cast<std::uint64_t>(c.train_steps));
  w.u64(c.seed);
  w.u32(static_cast<std::uint32_t>(c.dead_window));
  write_tensor(w, sae.params.w_enc);
  write_tensor(w, sae.params.b_enc);
  write_tensor(w, sae.params.w_dec);
  write_tensor(w, sae.params.b_dec);
  return w.take();
}

Sae deserialize_sae(std::string_view bytes) {
  io::BinaryReader r(bytes);
  r.expect_magic("GSAE");
  const auto version = r.u32();
  if (version != kSaeVersion) {
    throw io::FormatError("unsupported SAE checkpoint version " + std::to_string(version));
  }
  Sae sae;
  auto& c = sae.config;
  c.d = static_cast<int>(r.u32());
  c.h = static_cast<int>(r.u32());
  c.k = static_cast<int>(r.u32());
  c.beta = r.f64();
  const auto variant = r.u8();
  if (variant > 3) throw io::FormatError("unknown SAE variant code " + std::to_string(variant));
  c.variant = static_cast<SaeVariant>(variant);
  c.l1_coefficient = r.f64();
  c.lr = r.f64();
  c.batch_size = static_cast<int>(r.u32());
  c.train_steps = static_cast<long>(r.u64());
  c.seed = r.u64();
  c.dead_window = static_cast<int>(r.u32());
  c.validate();
  const std::size_t d = c.d, h = c.h;
  sae.params.w_enc = read_tensor(r, {h, d}, "W_enc");
  sae.params.b_enc = read_tensor(r, {h}, "b_enc");
  sae.params.w_dec = read_tensor(r, {d, h}, "W_dec");
  sae.params.b_dec = read_tensor(r, {d}, "b_dec");
  if (!r.done()) throw io::FormatError("trailing bytes after SAE checkpoint");
  return sae;
}

void save_sae(const Sae& sae, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_sae(sae));
}

Sae load_sae(const std::filesystem::path& path) { return deserialize_sae(io::read_file(path)); }

}  // namespace gsae
