#include <benchmark/benchmark.h>

#include <numeric>
#include <random>
#include <vector>

#include "gsae/activation_store.hpp"
#include "gsae/autograd.hpp"
#include "gsae/sae.hpp"
#include "gsae/transformer.hpp"

namespace {

std::vector<float> random_vector(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  gsae::ag::Tensor<float> a({n, n}, random_vector(n * n, 1));
  gsae::ag::Tensor<float> b({n, n}, random_vector(n * n, 2));
  for (auto _ : state) {
    auto c = gsae::ag::matmul(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

gsae::SaeConfig sae_config(int h, int k, gsae::SaeVariant variant) {
  gsae::SaeConfig c;
  c.d = 128;
  c.h = h;
  c.k = k;
  c.variant = variant;
  c.beta = 1e3;
  c.batch_size = 256;
  return c;
}

gsae::ActivationCache random_cache(std::size_t n, int d) {
  gsae::ActivationCache cache(d, {0, gsae::HookSite::kResidPost}, {});
  const auto xs = random_vector(n * d, 3);
  auto gs = random_vector(n * d, 4);
  for (auto& v : gs) v *= 1e-3f;
  for (std::size_t i = 0; i < n; ++i) {
    cache.append({xs.data() + i * d, static_cast<std::size_t>(d)},
                 {gs.data() + i * d, static_cast<std::size_t>(d)}, 0, 0,
                 static_cast<std::uint32_t>(i));
  }
  return cache;
}

void BM_SaeTrainStep(benchmark::State& state) {
  const auto variant = static_cast<gsae::SaeVariant>(state.range(1));
  const auto cfg = sae_config(static_cast<int>(state.range(0)), 32, variant);
  const auto cache = random_cache(1024, cfg.d);
  gsae::SaeTrainer trainer(cfg, gsae::init_params(cfg));
  std::vector<std::size_t> batch(cfg.batch_size);
  std::iota(batch.begin(), batch.end(), 0);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.train_step(cache, batch));
  state.SetItemsProcessed(state.iterations() * cfg.batch_size);
}
BENCHMARK(BM_SaeTrainStep)
    ->Args({640, static_cast<int>(gsae::SaeVariant::kTopK)})
    ->Args({640, static_cast<int>(gsae::SaeVariant::kGsae)})
    ->Args({2560, static_cast<int>(gsae::SaeVariant::kGsae)})
    ->Unit(benchmark::kMillisecond);

void BM_GradientTopK(benchmark::State& state) {
  const auto cfg = sae_config(static_cast<int>(state.range(0)), 32, gsae::SaeVariant::kGsae);
  const auto params = gsae::init_params(cfg);
  const auto x = random_vector(cfg.d, 5);
  const auto g = random_vector(cfg.d, 6);
  const auto z = gsae::encode_pre(params, x);
  for (auto _ : state) {
    auto m = gsae::select_gradient_topk(z, g, params, cfg.k, cfg.beta);
    benchmark::DoNotOptimize(m.indices.data());
  }
}
BENCHMARK(BM_GradientTopK)->Arg(640)->Arg(2560);

void BM_TransformerForward(benchmark::State& state) {
  gsae::ModelConfig cfg;
  cfg.context_length = static_cast<int>(state.range(0));
  gsae::Model model(cfg);
  std::vector<int> tokens(cfg.context_length);
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<int>((i * 31) % 256);
  for (auto _ : state) {
    auto trace = model.forward_full(tokens);
    benchmark::DoNotOptimize(trace.logits.data().data());
  }
  state.SetItemsProcessed(state.iterations() * cfg.context_length);
}
BENCHMARK(BM_TransformerForward)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_ResidGradient(benchmark::State& state) {
  gsae::ModelConfig cfg;
  gsae::Model model(cfg);
  std::vector<int> tokens(cfg.context_length);
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<int>((i * 17) % 256);
  for (auto _ : state) {
    auto hg = model.grad_wrt_resid({2, gsae::HookSite::kResidPost}, tokens);
    benchmark::DoNotOptimize(hg.grad.data());
  }
}
BENCHMARK(BM_ResidGradient)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
