#include "gsae/steering.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <json.hpp>

#include "gsae/log.hpp"
#include "gsae/metrics.hpp"

namespace gsae {

namespace {

std::vector<double> final_softmax(const ag::Tensor<float>& logits) {
  const std::size_t v = logits.cols(), last = logits.rows() - 1;
  std::vector<double> p(v);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, double(logits.at(last, j)));
  double z = 0.0;
  for (std::size_t j = 0; j < v; ++j) z += (p[j] = std::exp(double(logits.at(last, j)) - mx));
  for (auto& q : p) q /= z;
  return p;
}

std::vector<float> unit_column(const Sae& sae, int latent) {
  if (latent < 0 || latent >= sae.params.h()) {
    throw std::out_of_range("latent index " + std::to_string(latent) + " out of range");
  }
  auto col = sae.params.decoder_column(latent);
  double norm = 0.0;
  for (float v : col) norm += double(v) * v;
  norm = std::sqrt(norm);
  if (norm == 0.0) {
    throw std::invalid_argument("decoder column " + std::to_string(latent) + " has zero norm");
  }
  for (auto& v : col) v = static_cast<float>(v / norm);
  return col;
}

bool all_finite(std::span<const double> p) {
  return std::all_of(p.begin(), p.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace

std::vector<int> associated_logits(const Sae& sae, const Model& model, int latent, int n,
                                   bool dead) {
  const int vocab = model.config().vocab_size, d = model.config().d_model;
  if (n < 1 || n > vocab) throw std::invalid_argument("associated_logits: n out of range");
  if (sae.params.d() != d) throw std::invalid_argument("SAE width does not match the model");
  if (dead) warn("latent " + std::to_string(latent) + " is dead; associated logits are moot");
  const auto col = sae.params.decoder_column(latent);
  const auto w_u = model.unembedding().data();
  std::vector<double> score(vocab);
  for (int t = 0; t < vocab; ++t) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += double(w_u[std::size_t(t) * d + j]) * col[j];
    score[t] = s;
  }
  std::vector<int> order(vocab);
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + n, order.end(), [&](int a, int b) {
    return score[a] > score[b] || (score[a] == score[b] && a < b);
  });
  order.resize(n);
  return order;
}

SteeredDistributions steer_context(const Model& model, const HookPoint& hook,
                                   std::span<const int> tokens, std::span<const float> delta) {
  const std::size_t d = model.config().d_model;
  if (tokens.empty()) throw std::invalid_argument("steer_context: empty context");
  if (delta.size() != d) throw std::invalid_argument("steer_context: delta has wrong length");
  const auto trace = model.forward_full(tokens);
  const auto& x = trace.at(hook);
  SteeredDistributions out;
  out.base = final_softmax(trace.logits);
  std::vector<float> shifted(x.data().begin(), x.data().end());
  const std::size_t last = tokens.size() - 1;
  for (std::size_t j = 0; j < d; ++j) shifted[last * d + j] += delta[j];
  ag::Tensor<float> xs(x.shape(), std::move(shifted));
  out.steered = final_softmax(model.logits_from_hook(hook, xs, tokens));
  return out;
}

SteeringResult steering_effect(const Sae& sae, const Model& model, const HookPoint& hook,
                               int latent, double alpha,
                               std::span<const std::vector<int>> contexts, int n) {
  if (contexts.empty()) throw std::invalid_argument("steering_effect: no contexts");
  const auto unit = unit_column(sae, latent);
  const auto assoc = associated_logits(sae, model, latent, n);
  std::vector<std::uint8_t> in_l(model.config().vocab_size, 0);
  for (int t : assoc) in_l[t] = 1;

  std::vector<float> delta(unit.size());
  for (std::size_t j = 0; j < unit.size(); ++j) delta[j] = static_cast<float>(alpha * unit[j]);

  SteeringResult r;
  r.latent_index = latent;
  r.alpha = alpha;
  for (const auto& ctx : contexts) {
    if (alpha == 0.0) {
      ++r.context_count;
      continue;
    }
    const auto dist = steer_context(model, hook, ctx, delta);
    if (!all_finite(dist.base) || !all_finite(dist.steered)) {
      ++r.skipped_contexts;
      continue;
    }
    double a = 0.0, o = 0.0;
    for (std::size_t t = 0; t < dist.base.size(); ++t) {
      const double change = dist.steered[t] - dist.base[t];
      (in_l[t] ? a : o) += change;
    }
    r.added_prob_associated += a;
    r.added_prob_other += o;
    r.max_conservation_error = std::max(r.max_conservation_error, std::abs(a + o));
    ++r.context_count;
  }
  if (r.skipped_contexts > 0) {
    warn("latent " + std::to_string(latent) + ": skipped " +
         std::to_string(r.skipped_contexts) + " contexts with non-finite probabilities");
  }
  if (r.context_count > 0) {
    r.added_prob_associated /= r.context_count;
    r.added_prob_other /= r.context_count;
  }
  return r;
}

std::vector<SteeringResult> steering_sweep(const Sae& sae, const Model& model,
                                           const HookPoint& hook, std::span<const int> latents,
                                           std::span<const double> alphas,
                                           std::span<const std::vector<int>> contexts, int n) {
  std::vector<SteeringResult> rows;
  rows.reserve(latents.size() * alphas.size());
  for (int latent : latents) {
    for (double alpha : alphas) {
      try {
        rows.push_back(steering_effect(sae, model, hook, latent, alpha, contexts, n));
      } catch (const std::exception& e) {
        SteeringResult r;
        r.latent_index = latent;
        r.alpha = alpha;
        r.added_prob_associated = r.added_prob_other = std::nan("");
        r.error = e.what();
        rows.push_back(r);
      }
    }
  }
  return rows;
}

std::vector<int> sample_alive_latents(std::span<const std::uint8_t> dead, std::size_t count,
                                      std::uint64_t seed) {
  std::vector<int> alive;
  for (std::size_t i = 0; i < dead.size(); ++i) {
    if (!dead[i]) alive.push_back(static_cast<int>(i));
  }
  std::mt19937_64 rng(seed);
  const std::size_t take = std::min(count, alive.size());
  for (std::size_t i = 0; i < take; ++i) {
    std::swap(alive[i], alive[i + rng() % (alive.size() - i)]);
  }
  alive.resize(take);
  std::sort(alive.begin(), alive.end());
  return alive;
}

double median_activation_norm(const ActivationCache& cache) {
  if (cache.empty()) throw std::invalid_argument("median_activation_norm: empty cache");
  std::vector<double> norms(cache.size());
  for (std::size_t i = 0; i < cache.size(); ++i) {
    double s = 0.0;
    for (float v : cache.x(i)) s += double(v) * v;
    norms[i] = std::sqrt(s);
  }
  return summarize(norms).median;
}

std::vector<double> default_alpha_grid(const ActivationCache& cache) {
  const double unit = median_activation_norm(cache) / 10.0;
  return {0.5 * unit, 1.0 * unit, 2.0 * unit, 4.0 * unit, 8.0 * unit};
}

std::vector<std::vector<int>> sample_contexts(const ActivationCache& cache, std::size_t count,
                                              std::size_t length, std::uint64_t seed) {
  std::vector<SequenceRun> runs;
  for (const auto& run : cache.sequences()) {
    if (run.length >= std::max<std::size_t>(length, 2)) runs.push_back(run);
  }
  if (runs.empty()) throw std::invalid_argument("sample_contexts: no sequence long enough");
  std::mt19937_64 rng(seed);
  std::vector<std::vector<int>> out;
  for (std::size_t c = 0; c < count; ++c) {
    const auto& run = runs[rng() % runs.size()];
    const std::size_t start = rng() % (run.length - length + 1);
    std::vector<int> ctx(length);
    for (std::size_t i = 0; i < length; ++i) {
      ctx[i] = static_cast<int>(cache.token_id(run.begin + start + i));
    }
    out.push_back(std::move(ctx));
  }
  return out;
}

int probe_latent(const Sae& sae, const Model& model, const HookPoint& hook,
                 std::span<const int> probe_tokens) {
  if (probe_tokens.empty()) throw std::invalid_argument("probe text is empty");
  const auto trace = model.forward_full(probe_tokens);
  const auto& x = trace.at(hook);
  const std::size_t n = x.rows(), d = x.cols(), h = sae.params.h();
  std::vector<double> mean(h, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const auto z = encode_pre(sae.params, x.data().subspan(r * d, d));
    for (std::size_t j = 0; j < h; ++j) mean[j] += z[j] / double(n);
  }
  const auto best = std::max_element(mean.begin(), mean.end()) - mean.begin();
  if (!(mean[best] > 0.0)) throw std::invalid_argument("probe text activates no latent");
  return static_cast<int>(best);
}

CaseStudy case_study(const Sae& sae_a, const Sae& sae_b, const Model& model,
                     const HookPoint& hook, std::span<const int> probe_tokens, double alpha,
                     int n, std::span<const std::vector<int>> contexts) {
  if (contexts.empty()) throw std::invalid_argument("case_study: no contexts");
  CaseStudy cs;
  cs.latent_a = probe_latent(sae_a, model, hook, probe_tokens);
  cs.latent_b = probe_latent(sae_b, model, hook, probe_tokens);
  cs.associated_a = associated_logits(sae_a, model, cs.latent_a, n);
  cs.associated_b = associated_logits(sae_b, model, cs.latent_b, n);
  cs.tokens = cs.associated_a;
  cs.tokens.insert(cs.tokens.end(), cs.associated_b.begin(), cs.associated_b.end());
  std::sort(cs.tokens.begin(), cs.tokens.end());
  cs.tokens.erase(std::unique(cs.tokens.begin(), cs.tokens.end()), cs.tokens.end());

  const std::size_t vocab = model.config().vocab_size;
  auto mean_change = [&](const Sae& sae, int latent) {
    const auto unit = unit_column(sae, latent);
    std::vector<float> delta(unit.size());
    for (std::size_t j = 0; j < unit.size(); ++j) delta[j] = static_cast<float>(alpha * unit[j]);
    std::vector<double> change(vocab, 0.0);
    if (alpha == 0.0) return change;
    for (const auto& ctx : contexts) {
      const auto dist = steer_context(model, hook, ctx, delta);
      for (std::size_t t = 0; t < vocab; ++t) {
        change[t] += (dist.steered[t] - dist.base[t]) / double(contexts.size());
      }
    }
    return change;
  };
  const auto change_a = mean_change(sae_a, cs.latent_a);
  const auto change_b = mean_change(sae_b, cs.latent_b);
  for (int t : cs.tokens) {
    cs.delta_a.push_back(change_a[t]);
    cs.delta_b.push_back(change_b[t]);
  }
  auto other = [&](const std::vector<double>& change, const std::vector<int>& assoc) {
    double total = std::accumulate(change.begin(), change.end(), 0.0);
    for (int t : assoc) total -= change[t];
    return total;
  };
  cs.other_a = other(change_a, cs.associated_a);
  cs.other_b = other(change_b, cs.associated_b);
  return cs;
}

void write_case_study_csv(std::ostream& out, const CaseStudy& study) {
  out << "token,delta_prob_sae_a,delta_prob_sae_b\n";
  for (std::size_t i = 0; i < study.tokens.size(); ++i) {
    out << study.tokens[i] << ',' << format_double(study.delta_a[i]) << ','
        << format_double(study.delta_b[i]) << '\n';
  }
  out << "<other>," << format_double(study.other_a) << ',' << format_double(study.other_b)
      << '\n';
}

void write_steering_jsonl(std::ostream& out, std::span<const SteeringResult> rows) {
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["latent_index"] = r.latent_index;
    j["alpha"] = r.alpha;
    if (r.error.empty()) {
      j["added_prob_associated"] = r.added_prob_associated;
      j["added_prob_other"] = r.added_prob_other;
    } else {
      j["added_prob_associated"] = nullptr;
      j["added_prob_other"] = nullptr;
      j["error"] = r.error;
    }
    j["context_count"] = r.context_count;
    j["skipped_contexts"] = r.skipped_contexts;
    j["max_conservation_error"] = r.max_conservation_error;
    out << j.dump() << '\n';
  }
}

}  // namespace gsae
