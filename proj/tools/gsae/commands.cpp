#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "command.hpp"
#include "gsae/activation_store.hpp"
#include "gsae/binary_io.hpp"
#include "gsae/corpus.hpp"
#include "gsae/log.hpp"
#include "gsae/metrics.hpp"
#include "gsae/perturbation.hpp"
#include "gsae/sae.hpp"
#include "gsae/steering.hpp"
#include "gsae/transformer.hpp"

namespace gsae::cli {

namespace {

namespace fs = std::filesystem;

void require(const std::string& value, const std::string& flag) {
  if (value.empty()) throw UsageError("--" + flag + " is required");
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, ',');) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

std::vector<double> csv_doubles(const std::string& s, const std::string& flag) {
  std::vector<double> out;
  for (const auto& p : split_csv(s)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(p, &used));
      if (used != p.size()) throw std::invalid_argument(p);
    } catch (const std::exception&) {
      throw UsageError("--" + flag + ": '" + p + "' is not a number");
    }
  }
  return out;
}

std::vector<long> csv_ints(const std::string& s, const std::string& flag) {
  std::vector<long> out;
  for (double v : csv_doubles(s, flag)) {
    if (v != std::floor(v)) throw UsageError("--" + flag + ": expected integers");
    out.push_back(static_cast<long>(v));
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  io::write_file_atomic(path, text);
}

fs::path with_suffix(const fs::path& p, const std::string& suffix) {
  return fs::path(p.string() + suffix);
}

std::string train_sidecar_path(const std::string& sae_path) { return sae_path + ".train.json"; }

// Dead flags recorded at training time, if the sidecar exists.
std::optional<DeadLatentTracker> load_training_tracker(const std::string& sae_path, int h) {
  const auto path = train_sidecar_path(sae_path);
  if (!fs::exists(path)) return std::nullopt;
  const auto j = nlohmann::json::parse(io::read_file(path));
  DeadLatentTracker t(h, j.at("dead_window").get<int>());
  t.batches_seen = j.at("batches_seen").get<long>();
  for (int i : j.at("dead").get<std::vector<int>>()) {
    t.dead.at(i) = 1;
    t.consecutive_inactive.at(i) = t.window;
  }
  return t;
}

Model load_model_checked(const std::string& path) {
  require(path, "checkpoint");
  return load_checkpoint(path);
}

ActivationCache load_cache_for(const std::string& path, const Model* model) {
  require(path, "cache");
  if (model == nullptr) return ActivationCache::load(path);
  return ActivationCache::load(path, checkpoint_hash(*model));
}

// ---------------------------------------------------------------------------

class TrainLm : public Command {
 public:
  std::string name() const override { return "train-lm"; }
  std::string description() const override {
    return "Train the byte-level transformer on a corpus";
  }
  std::vector<std::string> inputs() const override { return {"corpus"}; }
  void add_options(CLI::App& app) override {
    app.add_option("--corpus", corpus_, "Corpus file (raw bytes)");
    app.add_option("--out", out_, "Checkpoint to write");
    app.add_option("--layers", cfg_.n_layers, "Transformer blocks");
    app.add_option("--d-model", cfg_.d_model, "Residual width");
    app.add_option("--heads", cfg_.n_heads, "Attention heads");
    app.add_option("--context", cfg_.context_length, "Context length");
    app.add_option("--steps", opts_.steps, "Optimizer steps");
    app.add_option("--lr", opts_.lr, "Peak learning rate");
    app.add_option("--batch", opts_.batch_size, "Sequences per step");
    app.add_option("--warmup", opts_.warmup_steps, "Linear warmup steps");
    app.add_option("--clip", opts_.clip_norm, "Gradient-norm clip");
    app.add_option("--seed", opts_.seed, "Master seed");
    app.add_option("--log-every", opts_.log_every, "Log interval in steps");
  }
  std::vector<fs::path> run() override {
    require(corpus_, "corpus");
    require(out_, "out");
    if (cfg_.n_heads < 1 || cfg_.d_model % cfg_.n_heads != 0) {
      throw UsageError("--d-model must be divisible by --heads");
    }
    cfg_.d_head = cfg_.d_model / cfg_.n_heads;
    cfg_.seed = derive_seed(opts_.seed, "lm-init");
    const auto tokens = ingest_corpus(corpus_);
    std::cerr << "train-lm: " << tokens.size() << " tokens\n";
    opts_.on_log = [](long step, double loss) {
      std::cerr << "step " << step << " loss " << format_double(loss) << '\n';
    };
    TrainLmOptions o = opts_;
    o.seed = derive_seed(opts_.seed, "lm-batches");
    const auto result = train_lm(tokens, cfg_, o);
    save_checkpoint(result.model, out_);
    std::ostringstream losses;
    losses << "step,loss\n";
    for (std::size_t i = 0; i < result.losses.size(); ++i) {
      losses << i << ',' << format_double(result.losses[i]) << '\n';
    }
    const auto loss_path = with_suffix(out_, ".losses.csv");
    write_text(loss_path, losses.str());
    return {out_, loss_path};
  }

 private:
  std::string corpus_, out_;
  ModelConfig cfg_;
  TrainLmOptions opts_;
};

class Capture : public Command {
 public:
  std::string name() const override { return "capture"; }
  std::string description() const override {
    return "Record hook activations and loss gradients into a cache";
  }
  std::vector<std::string> inputs() const override { return {"checkpoint", "corpus"}; }
  void add_options(CLI::App& app) override {
    app.add_option("--checkpoint", checkpoint_, "Model checkpoint");
    app.add_option("--corpus", corpus_, "Corpus file (raw bytes)");
    app.add_option("--layer", layer_, "Hook layer (0-based)");
    app.add_option("--site", site_, "Hook site: resid_post or mlp_out");
    app.add_option("--max-records", max_records_, "Record cap");
    app.add_option("--split", split_, "Sequences to use: train, eval or all");
    app.add_option("--eval-fraction", eval_fraction_, "Trailing fraction held out for eval");
    app.add_option("--out", out_, "Cache to write");
  }
  std::vector<fs::path> run() override {
    require(corpus_, "corpus");
    require(out_, "out");
    const auto model = load_model_checked(checkpoint_);
    const HookPoint hook{layer_, parse_hook_site(site_)};
    model.check_hook(hook);
    const auto tokens = ingest_corpus(corpus_);
    const auto sequences = chunk_sequences(tokens, model.config().context_length);
    const auto split = split_sequences(sequences.size(), eval_fraction_);
    std::size_t begin = 0, end = sequences.size();
    if (split_ == "train") {
      end = split.train_end;
    } else if (split_ == "eval") {
      begin = split.train_end;
    } else if (split_ != "all") {
      throw UsageError("--split must be train, eval or all");
    }
    std::span<const std::vector<int>> chosen(sequences.data() + begin, end - begin);
    CaptureOptions opts;
    opts.max_records = max_records_;
    opts.first_sequence_id = static_cast<std::uint32_t>(begin);
    const auto cache = capture_to_file(model, hook, chosen, opts, out_);
    std::cerr << "capture: " << cache.size() << " records from sequences [" << begin << ", "
              << end << ")\n";
    return {out_};
  }

 private:
  std::string checkpoint_, corpus_, out_;
  int layer_ = 2;
  std::string site_ = "resid_post";
  std::size_t max_records_ = 100000;
  std::string split_ = "all";
  double eval_fraction_ = 0.1;
};

void add_sae_options(CLI::App& app, SaeConfig& c, std::string& variant, double& expansion) {
  app.add_option("--variant", variant, "relu_l1, topk, gsae or e2e_topk")
      ->check(CLI::IsMember({"relu_l1", "topk", "gsae", "e2e_topk"}));
  app.add_option("--expansion", expansion, "Dictionary size as a multiple of d (if --dict-size is 0)");
  app.add_option("--dict-size", c.h, "Dictionary size h (0: use --expansion)");
  app.add_option("--k", c.k, "Active latents per token (TopK family)");
  app.add_option("--beta", c.beta, "Gradient weight in the g-SAE selection score");
  app.add_option("--l1", c.l1_coefficient, "L1 coefficient (relu_l1)");
  app.add_option("--lr", c.lr, "Adam learning rate");
  app.add_option("--batch", c.batch_size, "Records per step");
  app.add_option("--steps", c.train_steps, "Optimizer steps");
  app.add_option("--seed", c.seed, "Seed");
  app.add_option("--dead-window", c.dead_window, "Silent batches before a latent is dead");
}

class TrainSae : public Command {
 public:
  std::string name() const override { return "train-sae"; }
  std::string description() const override { return "Train one SAE on an activation cache"; }
  std::vector<std::string> inputs() const override { return {"cache", "checkpoint"}; }
  void add_options(CLI::App& app) override {
    app.add_option("--cache", cache_, "Training cache");
    app.add_option("--checkpoint", checkpoint_, "Model checkpoint (required for e2e_topk)");
    add_sae_options(app, cfg_, variant_, expansion_);
    app.add_option("--beta-product", beta_product_,
                   "If > 0, set beta from the cache so that beta * E|g . u| equals this");
    app.add_option("--log-every", log_every_, "Log interval in steps");
    app.add_option("--out", out_, "SAE file to write");
  }
  std::vector<fs::path> run() override {
    require(out_, "out");
    cfg_.variant = parse_sae_variant(variant_);
    std::optional<Model> model;
    if (!checkpoint_.empty()) model = load_checkpoint(checkpoint_);
    if (cfg_.variant == SaeVariant::kE2eTopK && !model) {
      throw UsageError("--checkpoint is required for e2e_topk");
    }
    const auto cache = load_cache_for(cache_, model ? &*model : nullptr);
    SaeConfig c = cfg_;
    c.d = static_cast<int>(cache.d_model());
    if (c.h == 0) c.h = static_cast<int>(std::lround(expansion_ * c.d));
    if (beta_product_ > 0.0) {
      c.beta = calibrate_beta(cache, beta_product_, derive_seed(c.seed, "beta"));
      std::cerr << "train-sae: calibrated beta " << format_double(c.beta) << '\n';
    }
    const long every = log_every_;
    const auto result = train_sae(cache, c, model ? &*model : nullptr, [every](long s, double l) {
      if (every > 0 && s % every == 0) {
        std::cerr << "step " << s << " loss " << format_double(l) << '\n';
      }
    });
    save_sae(result.sae, out_);

    nlohmann::ordered_json j;
    j["variant"] = std::string(to_string(c.variant));
    j["steps"] = c.train_steps;
    j["final_loss"] = result.losses.empty() ? 0.0 : result.losses.back();
    j["dead_window"] = result.tracker.window;
    j["batches_seen"] = result.tracker.batches_seen;
    std::vector<int> dead;
    for (std::size_t i = 0; i < result.tracker.dead.size(); ++i) {
      if (result.tracker.dead[i]) dead.push_back(static_cast<int>(i));
    }
    j["dead_fraction"] = dead_fraction(result.tracker);
    j["dead"] = dead;
    const fs::path side = train_sidecar_path(out_);
    write_text(side, j.dump() + "\n");
    std::cerr << "train-sae: dead fraction " << format_double(dead_fraction(result.tracker))
              << '\n';
    return {out_, side};
  }

 private:
  std::string cache_, checkpoint_, out_;
  std::string variant_ = "gsae";
  SaeConfig cfg_;
  double expansion_ = 20.0;
  double beta_product_ = 0.0;
  long log_every_ = 100;
};

class Eval : public Command {
 public:
  std::string name() const override { return "eval"; }
  std::string description() const override {
    return "NMSE, loss added and dead fraction of one SAE";
  }
  std::vector<std::string> inputs() const override { return {"sae", "cache", "checkpoint"}; }
  void add_options(CLI::App& app) override {
    app.add_option("--sae", sae_, "SAE file");
    app.add_option("--cache", cache_, "Evaluation cache");
    app.add_option("--checkpoint", checkpoint_, "Model checkpoint");
    app.add_option("--replay-batch", replay_batch_,
                   "Batch size for replaying dead-latent tracking without a training sidecar");
    app.add_option("--out", out_, "Metric CSV to write");
  }
  std::vector<fs::path> run() override {
    require(sae_, "sae");
    require(out_, "out");
    const auto model = load_model_checked(checkpoint_);
    const auto cache = load_cache_for(cache_, &model);
    const auto sae = load_sae(sae_);
    auto tracker = load_training_tracker(sae_, sae.params.h());
    if (!tracker) {
      warn("no training sidecar for " + sae_ + "; replaying dead-latent tracking on the cache");
      tracker = replay_tracker(sae, cache, replay_batch_);
    }
    const auto row = evaluate_sae(sae, cache, model, *tracker);
    std::ostringstream csv;
    write_metric_csv(csv, std::span(&row, 1));
    write_text(out_, csv.str());
    std::cout << csv.str();
    return {out_};
  }

 private:
  std::string sae_, cache_, checkpoint_, out_;
  std::size_t replay_batch_ = 256;
};

class Sweep : public Command {
 public:
  std::string name() const override { return "sweep"; }
  std::string description() const override {
    return "Train and evaluate a grid of SAEs (Pareto data)";
  }
  std::vector<std::string> inputs() const override {
    return {"cache", "eval-cache", "checkpoint"};
  }
  void add_options(CLI::App& app) override {
    app.add_option("--cache", cache_, "Training cache");
    app.add_option("--eval-cache", eval_cache_, "Evaluation cache");
    app.add_option("--checkpoint", checkpoint_, "Model checkpoint");
    app.add_option("--variants", variants_, "Comma-separated variants");
    app.add_option("--ks", ks_, "Comma-separated k values");
    app.add_option("--expansions", expansions_, "Comma-separated expansion factors");
    app.add_option("--betas", betas_, "Comma-separated beta values (gsae only)");
    app.add_option("--beta-products", beta_products_,
                   "Comma-separated targets for beta * E|g . u|; replaces --betas when given");
    app.add_option("--seeds", seeds_, "Comma-separated seeds");
    app.add_option("--l1", base_.l1_coefficient, "L1 coefficient (relu_l1)");
    app.add_option("--lr", base_.lr, "Adam learning rate");
    app.add_option("--batch", base_.batch_size, "Records per step");
    app.add_option("--steps", base_.train_steps, "Optimizer steps per configuration");
    app.add_option("--dead-window", base_.dead_window, "Silent batches before a latent is dead");
    app.add_option("--out", out_, "Metric CSV to write");
  }
  std::vector<fs::path> run() override {
    require(out_, "out");
    require(eval_cache_, "eval-cache");
    const auto model = load_model_checked(checkpoint_);
    const auto train = load_cache_for(cache_, &model);
    const auto eval = load_cache_for(eval_cache_, &model);
    SweepGrid grid;
    for (const auto& v : split_csv(variants_)) {
      try {
        grid.variants.push_back(parse_sae_variant(v));
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
    }
    for (long k : csv_ints(ks_, "ks")) grid.ks.push_back(static_cast<int>(k));
    for (double e : csv_doubles(expansions_, "expansions")) {
      grid.hs.push_back(static_cast<int>(std::lround(e * double(train.d_model()))));
    }
    grid.betas = csv_doubles(betas_, "betas");
    if (!beta_products_.empty()) {
      grid.betas.clear();
      for (double t : csv_doubles(beta_products_, "beta-products")) {
        if (t <= 0.0) throw UsageError("--beta-products must be positive");
        grid.betas.push_back(calibrate_beta(train, t, derive_seed(0, "beta")));
      }
    }
    for (long s : csv_ints(seeds_, "seeds")) grid.seeds.push_back(static_cast<std::uint64_t>(s));
    if (grid.variants.empty() || grid.ks.empty() || grid.hs.empty() || grid.seeds.empty()) {
      throw UsageError("every sweep grid must be nonempty");
    }
    SaeConfig base = base_;
    base.d = static_cast<int>(train.d_model());
    const auto rows = pareto_sweep(train, eval, model, base, grid, [](const MetricRow& r) {
      std::cerr << r.variant << " k=" << r.k << " h=" << r.h << " seed=" << r.seed;
      if (r.error.empty()) {
        std::cerr << " nmse=" << format_double(r.nmse)
                  << " loss_added=" << format_double(r.loss_added) << '\n';
      } else {
        std::cerr << " failed: " << r.error << '\n';
      }
    });
    std::ostringstream csv;
    write_metric_csv(csv, rows);
    write_text(out_, csv.str());
    return {out_};
  }

 private:
  std::string cache_, eval_cache_, checkpoint_, out_;
  std::string variants_ = "topk,gsae", ks_ = "32", expansions_ = "20", betas_ = "100000",
              beta_products_, seeds_ = "0";
  SaeConfig base_;
};

class Steer : public Command {
 public:
  std::string name() const override { return "steer"; }
  std::string description() const override {
    return "Steering sweep over latents and alphas, or a two-SAE case study";
  }
  std::vector<std::string> inputs() const override {
    return {"sae", "sae-b", "checkpoint", "cache"};
  }
  void add_options(CLI::App& app) override {
    app.add_option("--sae", sae_, "SAE file");
    app.add_option("--checkpoint", checkpoint_, "Model checkpoint");
    app.add_option("--cache", cache_, "Held-out cache (contexts and activation norms)");
    app.add_option("--layer", layer_, "Hook layer (-1: the cache's layer)");
    app.add_option("--site", site_, "Hook site (empty: the cache's site)");
    app.add_option("--alpha-grid", alpha_grid_,
                   "Comma-separated alphas (empty: {0.5,1,2,4,8} x median |x| / 10)");
    app.add_option("--latents", latents_, "Number of alive latents to sample, or 'all'");
    app.add_option("--contexts", contexts_, "Contexts per latent");
    app.add_option("--context-length", context_length_, "Tokens per context");
    app.add_option("--top-n", top_n_, "Associated logits per latent");
    app.add_option("--seed", seed_, "Master seed");
    app.add_option("--sae-b", sae_b_, "Second SAE: switches to case-study mode");
    app.add_option("--probe-text", probe_, "Case study: text whose top latent is steered");
    app.add_option("--alpha", alpha_, "Case study: alpha (0: middle of the default grid)");
    app.add_option("--out", out_, "JSON-lines (sweep) or CSV (case study) output");
  }
  std::vector<fs::path> run() override {
    require(sae_, "sae");
    require(out_, "out");
    const auto model = load_model_checked(checkpoint_);
    const auto cache = load_cache_for(cache_, &model);
    HookPoint hook = cache.hook();
    if (layer_ >= 0) hook.layer = layer_;
    if (!site_.empty()) hook.site = parse_hook_site(site_);
    if (hook.layer != cache.hook().layer || hook.site != cache.hook().site) {
      warn("steering hook differs from the cache's hook; alpha scale uses the cache norms");
    }
    model.check_hook(hook);
    const auto sae = load_sae(sae_);
    const auto contexts = sample_contexts(cache, contexts_, context_length_,
                                          derive_seed(seed_, "contexts"));
    const auto default_grid = default_alpha_grid(cache);

    if (!sae_b_.empty()) {
      if (probe_.empty()) throw UsageError("--probe-text is required with --sae-b");
      const auto sae_b = load_sae(sae_b_);
      const std::vector<int> probe(probe_.begin(), probe_.end());
      const double alpha = alpha_ > 0.0 ? alpha_ : default_grid[2];
      const auto study = case_study(sae, sae_b, model, hook, probe, alpha, top_n_, contexts);
      std::ostringstream csv;
      write_case_study_csv(csv, study);
      write_text(out_, csv.str());
      return {out_};
    }

    const auto alphas = alpha_grid_.empty() ? default_grid : csv_doubles(alpha_grid_, "alpha-grid");
    std::vector<std::uint8_t> dead(sae.params.h(), 0);
    if (auto t = load_training_tracker(sae_, sae.params.h())) dead = t->dead;
    std::size_t count = dead.size();
    if (latents_ != "all") {
      const auto v = csv_ints(latents_, "latents");
      if (v.size() != 1 || v[0] < 1) throw UsageError("--latents must be a count or 'all'");
      count = static_cast<std::size_t>(v[0]);
    }
    const auto latents = sample_alive_latents(dead, count, derive_seed(seed_, "latents"));
    const auto rows = steering_sweep(sae, model, hook, latents, alphas, contexts, top_n_);
    std::ostringstream out;
    write_steering_jsonl(out, rows);
    write_text(out_, out.str());
    std::cerr << "steer: " << rows.size() << " rows\n";
    return {out_};
  }

 private:
  std::string sae_, checkpoint_, cache_, site_, alpha_grid_, out_, sae_b_, probe_;
  int layer_ = -1;
  std::string latents_ = "200";
  std::size_t contexts_ = 10, context_length_ = 32;
  int top_n_ = 10;
  std::uint64_t seed_ = 0;
  double alpha_ = 0.0;
};

class Perturb : public Command {
 public:
  std::string name() const override { return "perturb"; }
  std::string description() const override {
    return "Directional-derivative and perturbation-correlation studies";
  }
  std::vector<std::string> inputs() const override { return {"checkpoint", "cache"}; }
  void add_options(CLI::App& app) override {
    app.add_option("--checkpoint", checkpoint_, "Model checkpoint");
    app.add_option("--cache", caches_, "Cache(s), one per layer; repeat or comma-separate")
        ->delimiter(',');
    app.add_option("--mode", mode_, "derivatives or correlations");
    app.add_option("--buckets", buckets_, "Comma-separated norm-bucket means");
    app.add_option("--bucket-units", bucket_units_,
                   "relative (multiples of median |x|) or absolute");
    app.add_option("--samples", samples_, "Samples per family or bucket");
    app.add_option("--seed", seed_, "Master seed");
    app.add_option("--out", out_, "CSV to write");
  }
  std::vector<fs::path> run() override {
    require(out_, "out");
    if (caches_.empty()) throw UsageError("--cache is required");
    const auto model = load_model_checked(checkpoint_);
    std::ostringstream csv;
    write_perturbation_header(csv);
    if (mode_ == "derivatives") {
      for (const auto& path : caches_) {
        const auto cache = load_cache_for(path, &model);
        const auto seed = derive_seed(seed_, "derivatives-" + std::to_string(cache.hook().layer));
        write_derivative_rows(csv, directional_derivative_comparison(cache, samples_, seed));
      }
    } else if (mode_ == "correlations") {
      const auto model64 = model.cast<double>();
      const auto means = csv_doubles(buckets_, "buckets");
      if (means.empty()) throw UsageError("--buckets must be nonempty");
      if (bucket_units_ != "relative" && bucket_units_ != "absolute") {
        throw UsageError("--bucket-units must be relative or absolute");
      }
      for (const auto& path : caches_) {
        const auto cache = load_cache_for(path, &model);
        std::vector<double> scaled = means;
        if (bucket_units_ == "relative") {
          const double median = median_activation_norm(cache);
          for (auto& m : scaled) m *= median;
        }
        CorrelationOptions opts;
        opts.n_samples = samples_;
        opts.seed = derive_seed(seed_, "correlations-" + std::to_string(cache.hook().layer));
        write_correlation_rows(csv, correlation_study(model64, cache, scaled, opts));
      }
    } else {
      throw UsageError("--mode must be derivatives or correlations");
    }
    write_text(out_, csv.str());
    return {out_};
  }

 private:
  std::string checkpoint_, out_;
  std::vector<std::string> caches_;
  std::string mode_ = "derivatives", buckets_ = "0.01,0.03,0.1,0.3,1",
              bucket_units_ = "relative";
  std::size_t samples_ = 1000;
  std::uint64_t seed_ = 0;
};

class Density : public Command {
 public:
  std::string name() const override { return "density"; }
  std::string description() const override { return "Per-latent firing frequencies"; }
  std::vector<std::string> inputs() const override { return {"sae", "cache"}; }
  void add_options(CLI::App& app) override {
    app.add_option("--sae", sae_, "SAE file");
    app.add_option("--cache", cache_, "Evaluation cache");
    app.add_option("--out", out_, "Sorted frequencies, one per line");
  }
  std::vector<fs::path> run() override {
    require(sae_, "sae");
    require(out_, "out");
    const auto sae = load_sae(sae_);
    const auto cache = load_cache_for(cache_, nullptr);
    const auto profile = activation_density(sae, cache);
    std::ostringstream sorted;
    write_sorted_profile(sorted, profile.frequency);
    write_text(out_, sorted.str());
    auto s = nlohmann::ordered_json::parse(summary_json(summarize(profile.frequency), "density"));
    s["n_tokens"] = profile.n_tokens;
    const auto summary = with_suffix(out_, ".summary.jsonl");
    write_text(summary, s.dump() + "\n");
    return {out_, summary};
  }

 private:
  std::string sae_, cache_, out_;
};

class Similarity : public Command {
 public:
  std::string name() const override { return "similarity"; }
  std::string description() const override {
    return "Decoder max-cosine profile and similarity-bucket directional derivatives";
  }
  std::vector<std::string> inputs() const override { return {"sae", "cache"}; }
  void add_options(CLI::App& app) override {
    app.add_option("--sae", sae_, "SAE file");
    app.add_option("--cache", cache_, "Cache with gradients (enables bucket derivatives)");
    app.add_option("--n-latents", n_latents_, "Latents sampled per bucket");
    app.add_option("--n-tokens", n_tokens_, "Records sampled per bucket");
    app.add_option("--seed", seed_, "Master seed");
    app.add_option("--out", out_, "Sorted max-cosine values, one per line");
  }
  std::vector<fs::path> run() override {
    require(sae_, "sae");
    require(out_, "out");
    const auto sae = load_sae(sae_);
    const auto profile = decoder_similarity(sae);
    if (!profile.excluded.empty()) {
      warn(std::to_string(profile.excluded.size()) + " zero-norm decoder columns excluded");
    }
    std::ostringstream sorted;
    write_sorted_profile(sorted, profile.max_cosine);
    write_text(out_, sorted.str());
    std::ostringstream lines;
    lines << summary_json(summarize(profile.max_cosine), "similarity") << '\n';
    if (!cache_.empty()) {
      const auto cache = load_cache_for(cache_, nullptr);
      for (auto bucket : {SimilarityBucket::kLeft, SimilarityBucket::kMiddle,
                          SimilarityBucket::kRight}) {
        const auto r = similarity_bucket_derivatives(
            sae, profile, cache, bucket, n_latents_, n_tokens_,
            derive_seed(seed_, std::string("bucket-") + std::string(to_string(bucket))));
        if (r.warning) warn(*r.warning);
        nlohmann::ordered_json j;
        j["kind"] = "bucket_derivative";
        j["bucket"] = std::string(to_string(bucket));
        j["mean_abs_derivative"] = r.mean_abs_derivative;
        j["n_latents"] = r.n_latents;
        j["n_tokens"] = r.n_tokens;
        lines << j.dump() << '\n';
      }
    }
    const auto summary = with_suffix(out_, ".summary.jsonl");
    write_text(summary, lines.str());
    return {out_, summary};
  }

 private:
  std::string sae_, cache_, out_;
  std::size_t n_latents_ = 30, n_tokens_ = 300;
  std::uint64_t seed_ = 0;
};

}  // namespace

std::vector<std::unique_ptr<Command>> make_commands() {
  std::vector<std::unique_ptr<Command>> out;
  out.push_back(std::make_unique<TrainLm>());
  out.push_back(std::make_unique<Capture>());
  out.push_back(std::make_unique<TrainSae>());
  out.push_back(std::make_unique<Eval>());
  out.push_back(std::make_unique<Sweep>());
  out.push_back(std::make_unique<Steer>());
  out.push_back(std::make_unique<Perturb>());
  out.push_back(std::make_unique<Density>());
  out.push_back(std::make_unique<Similarity>());
  return out;
}

}  // namespace gsae::cli
