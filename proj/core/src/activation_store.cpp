#include "gsae/activation_store.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace gsae {

bool ActivationRecord::degenerate() const {
  return std::all_of(g.begin(), g.end(), [](float v) { return v == 0.0f; });
}

ActivationCache::ActivationCache(std::uint32_t d_model, HookPoint hook,
                                 io::Sha256 checkpoint_hash) {
  header_.d_model = d_model;
  header_.layer = static_cast<std::uint32_t>(hook.layer);
  header_.site = hook.site;
  header_.checkpoint_hash = checkpoint_hash;
}

ActivationRecord ActivationCache::record(std::size_t i) const {
  ActivationRecord r;
  r.x.assign(x(i).begin(), x(i).end());
  r.g.assign(g(i).begin(), g(i).end());
  r.token_id = token_ids_[i];
  r.position = positions_[i];
  r.sequence_id = sequence_ids_[i];
  return r;
}

void ActivationCache::append(std::span<const float> x, std::span<const float> g,
                             std::uint32_t token_id, std::uint16_t position,
                             std::uint32_t sequence_id) {
  if (x.size() != d_model() || g.size() != d_model()) {
    throw std::invalid_argument("cache append: record width does not match d_model " +
                                std::to_string(d_model()));
  }
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (!std::isfinite(x[j]) || !std::isfinite(g[j])) {
      throw std::invalid_argument("cache append: non-finite value in record of sequence " +
                                  std::to_string(sequence_id) + " position " +
                                  std::to_string(position));
    }
  }
  xs_.insert(xs_.end(), x.begin(), x.end());
  gs_.insert(gs_.end(), g.begin(), g.end());
  token_ids_.push_back(token_id);
  positions_.push_back(position);
  sequence_ids_.push_back(sequence_id);
  header_.count = token_ids_.size();
}

std::vector<float> ActivationCache::gather_x(std::span<const std::size_t> indices) const {
  std::vector<float> out(indices.size() * d_model());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(xs_.data() + indices[i] * d_model(), d_model(), out.data() + i * d_model());
  }
  return out;
}

std::vector<float> ActivationCache::gather_g(std::span<const std::size_t> indices) const {
  std::vector<float> out(indices.size() * d_model());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(gs_.data() + indices[i] * d_model(), d_model(), out.data() + i * d_model());
  }
  return out;
}

std::vector<SequenceRun> ActivationCache::sequences() const {
  std::vector<SequenceRun> runs;
  for (std::size_t i = 0; i < size(); ++i) {
    if (runs.empty() || sequence_ids_[i] != sequence_ids_[runs.back().begin] ||
        positions_[i] != positions_[i - 1] + 1) {
      runs.push_back({i, 1});
    } else {
      ++runs.back().length;
    }
  }
  return runs;
}

// Layout: "GSAC" | version u32 | d_model u32 | count u64 | layer u32 | site u8 |
// checkpoint hash [32] | records (x f32*d, g f32*d, token u32, position u16,
// sequence u32).
std::string ActivationCache::serialize() const {
  io::BinaryWriter w;
  w.bytes("GSAC");
  w.u32(header_.version);
  w.u32(header_.d_model);
  w.u64(header_.count);
  w.u32(header_.layer);
  w.u8(static_cast<std::uint8_t>(header_.site));
  w.bytes(std::string_view(reinterpret_cast<const char*>(header_.checkpoint_hash.data()),
                           header_.checkpoint_hash.size()));
  for (std::size_t i = 0; i < size(); ++i) {
    w.f32s(x(i));
    w.f32s(g(i));
    w.u32(token_ids_[i]);
    w.u16(positions_[i]);
    w.u32(sequence_ids_[i]);
  }
  return w.take();
}

ActivationCache ActivationCache::deserialize(std::string_view bytes,
                                             const std::optional<io::Sha256>& expected_hash) {
  io::BinaryReader r(bytes);
  r.expect_magic("GSAC");
  ActivationCache cache;
  auto& h = cache.header_;
  h.version = r.u32();
  if (h.version != CacheHeader::kVersion) {
    throw io::FormatError("unsupported cache version " + std::to_string(h.version));
  }
  h.d_model = r.u32();
  const std::uint64_t count = r.u64();
  h.layer = r.u32();
  const auto site = r.u8();
  if (site > 1) throw io::FormatError("unknown hook site code " + std::to_string(site));
  h.site = static_cast<HookSite>(site);
  const auto hash = r.bytes(32);
  std::copy(hash.begin(), hash.end(), h.checkpoint_hash.begin());
  if (expected_hash && *expected_hash != h.checkpoint_hash) {
    throw CacheMismatch("activation cache was generated by checkpoint " +
                        io::to_hex(h.checkpoint_hash) + ", expected " +
                        io::to_hex(*expected_hash));
  }
  const std::size_t record_bytes = 8 * std::size_t(h.d_model) + 10;
  if (r.remaining() != count * record_bytes) {
    throw io::FormatError("cache header claims " + std::to_string(count) +
                          " records but payload holds " +
                          std::to_string(r.remaining()) + " bytes");
  }
  const std::size_t d = h.d_model;
  cache.xs_.resize(count * d);
  cache.gs_.resize(count * d);
  cache.token_ids_.resize(count);
  cache.positions_.resize(count);
  cache.sequence_ids_.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    r.f32s({cache.xs_.data() + i * d, d});
    r.f32s({cache.gs_.data() + i * d, d});
    cache.token_ids_[i] = r.u32();
    cache.positions_[i] = r.u16();
    cache.sequence_ids_[i] = r.u32();
  }
  h.count = count;
  return cache;
}

void ActivationCache::save(const std::filesystem::path& path) const {
  io::write_file_atomic(path, serialize());
}

ActivationCache ActivationCache::load(const std::filesystem::path& path,
                                      const std::optional<io::Sha256>& expected_hash) {
  return deserialize(io::read_file(path), expected_hash);
}

// ---------------------------------------------------------------------------
// Capture

std::vector<ActivationRecord> capture_sequence(const Model& model, const HookPoint& hook,
                                               std::span<const int> tokens,
                                               std::uint32_t sequence_id) {
  const auto grads = model.grad_wrt_resid(hook, tokens);
  const std::size_t d = grads.d_model;
  std::vector<ActivationRecord> out(grads.positions);
  for (std::size_t p = 0; p < grads.positions; ++p) {
    auto& r = out[p];
    r.x.assign(grads.x.begin() + p * d, grads.x.begin() + (p + 1) * d);
    r.g.assign(grads.grad.begin() + p * d, grads.grad.begin() + (p + 1) * d);
    r.token_id = static_cast<std::uint32_t>(tokens[p]);
    r.position = static_cast<std::uint16_t>(p);
    r.sequence_id = sequence_id;
  }
  return out;
}

ActivationCache capture(const Model& model, const HookPoint& hook,
                        std::span<const std::vector<int>> sequences,
                        const CaptureOptions& options) {
  model.check_hook(hook);
  ActivationCache cache(static_cast<std::uint32_t>(model.config().d_model), hook,
                        checkpoint_hash(model));
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    if (cache.size() >= options.max_records) break;
    if (sequences[s].size() < 2) continue;
    const auto sid = static_cast<std::uint32_t>(options.first_sequence_id + s);
    for (const auto& r : capture_sequence(model, hook, sequences[s], sid)) {
      if (cache.size() >= options.max_records) break;
      cache.append(r);
    }
  }
  return cache;
}

ActivationCache capture_to_file(const Model& model, const HookPoint& hook,
                                std::span<const std::vector<int>> sequences,
                                const CaptureOptions& options,
                                const std::filesystem::path& out) {
  auto cache = capture(model, hook, sequences, options);
  cache.save(out);
  return cache;
}

// ---------------------------------------------------------------------------
// Batching

BatchSampler::BatchSampler(std::size_t count, std::size_t batch_size, std::uint64_t seed)
    : count_(count), batch_size_(batch_size), seed_(seed) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  if (count == 0) throw std::invalid_argument("cannot batch an empty cache");
  order_.resize(count);
  reshuffle();
}

void BatchSampler::reshuffle() {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::mt19937_64 rng(seed_ ^ (0x9e3779b97f4a7c15ULL * (epoch_ + 1)));
  // Fisher-Yates with an explicit modulo draw keeps the order independent of
  // the standard library's distribution implementation.
  for (std::size_t i = count_; i > 1; --i) {
    std::swap(order_[i - 1], order_[rng() % i]);
  }
}

std::size_t BatchSampler::batches_per_epoch() const {
  return (count_ + batch_size_ - 1) / batch_size_;
}

std::span<const std::size_t> BatchSampler::next() {
  if (cursor_ >= count_) {
    ++epoch_;
    cursor_ = 0;
    reshuffle();
  }
  const std::size_t n = std::min(batch_size_, count_ - cursor_);
  batch_.assign(order_.begin() + cursor_, order_.begin() + cursor_ + n);
  cursor_ += n;
  return batch_;
}

SequenceSplit split_sequences(std::size_t n_sequences, double eval_fraction) {
  if (eval_fraction < 0.0 || eval_fraction > 1.0) {
    throw std::invalid_argument("eval_fraction must be in [0, 1]");
  }
  const auto n_eval = static_cast<std::size_t>(std::llround(eval_fraction * n_sequences));
  return {n_sequences - std::min(n_eval, n_sequences)};
}

}  // namespace gsae
