#pragma once

// Activation + gradient capture at a hook point, the on-disk cache format, and
// seeded shuffled batch serving.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gsae/binary_io.hpp"
#include "gsae/transformer.hpp"

namespace gsae {

/// One (activation, loss gradient) pair at a fixed hook and token position.
struct ActivationRecord {
  std::vector<float> x;
  std::vector<float> g;
  std::uint32_t token_id = 0;
  std::uint16_t position = 0;
  std::uint32_t sequence_id = 0;

  /// True for records whose gradient is identically zero (final positions).
  bool degenerate() const;
};

struct CacheHeader {
  static constexpr std::uint32_t kVersion = 1;
  std::uint32_t version = kVersion;
  std::uint32_t d_model = 0;
  std::uint64_t count = 0;
  std::uint32_t layer = 0;
  HookSite site = HookSite::kResidPost;
  io::Sha256 checkpoint_hash{};
};

class CacheMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A contiguous run of records from one source sequence.
struct SequenceRun {
  std::size_t begin = 0;
  std::size_t length = 0;
};

/// In-memory activation cache with flat storage. Records keep capture order.
class ActivationCache {
 public:
  ActivationCache() = default;
  ActivationCache(std::uint32_t d_model, HookPoint hook, io::Sha256 checkpoint_hash);

  const CacheHeader& header() const { return header_; }
  std::size_t size() const { return token_ids_.size(); }
  bool empty() const { return size() == 0; }
  std::size_t d_model() const { return header_.d_model; }
  HookPoint hook() const {
    return {static_cast<int>(header_.layer), header_.site};
  }

  std::span<const float> x(std::size_t i) const {
    return {xs_.data() + i * d_model(), d_model()};
  }
  std::span<const float> g(std::size_t i) const {
    return {gs_.data() + i * d_model(), d_model()};
  }
  std::uint32_t token_id(std::size_t i) const { return token_ids_[i]; }
  std::uint16_t position(std::size_t i) const { return positions_[i]; }
  std::uint32_t sequence_id(std::size_t i) const { return sequence_ids_[i]; }
  ActivationRecord record(std::size_t i) const;

  void append(std::span<const float> x, std::span<const float> g,
              std::uint32_t token_id, std::uint16_t position,
              std::uint32_t sequence_id);
  void append(const ActivationRecord& r) {
    append(r.x, r.g, r.token_id, r.position, r.sequence_id);
  }

  /// Row-major [indices.size(), d_model] copies.
  std::vector<float> gather_x(std::span<const std::size_t> indices) const;
  std::vector<float> gather_g(std::span<const std::size_t> indices) const;

  /// Maximal runs of consecutive records sharing a sequence id.
  std::vector<SequenceRun> sequences() const;

  std::string serialize() const;
  /// Throws CacheMismatch when `expected_hash` is given and differs from the
  /// stored checkpoint hash.
  static ActivationCache deserialize(std::string_view bytes,
                                     const std::optional<io::Sha256>& expected_hash = {});
  void save(const std::filesystem::path& path) const;
  static ActivationCache load(const std::filesystem::path& path,
                              const std::optional<io::Sha256>& expected_hash = {});

 private:
  CacheHeader header_;
  std::vector<float> xs_, gs_;
  std::vector<std::uint32_t> token_ids_;
  std::vector<std::uint16_t> positions_;
  std::vector<std::uint32_t> sequence_ids_;
};

/// Records for one sequence at `hook`: every position, with the final one
/// carrying a zero gradient.
std::vector<ActivationRecord> capture_sequence(const Model& model, const HookPoint& hook,
                                               std::span<const int> tokens,
                                               std::uint32_t sequence_id);

struct CaptureOptions {
  std::size_t max_records = 100000;
  /// Sequence ids are `first_sequence_id + index into sequences`.
  std::uint32_t first_sequence_id = 0;
};

/// Captures up to `max_records` records from `sequences` (sequences shorter
/// than 2 tokens are skipped).
ActivationCache capture(const Model& model, const HookPoint& hook,
                        std::span<const std::vector<int>> sequences,
                        const CaptureOptions& options);

/// Captures and writes the cache; a partially written file is removed on
/// failure.
ActivationCache capture_to_file(const Model& model, const HookPoint& hook,
                                std::span<const std::vector<int>> sequences,
                                const CaptureOptions& options,
                                const std::filesystem::path& out);

/// Serves seeded shuffled batches of indices in [0, count). Every epoch is a
/// fresh permutation; the last batch of an epoch may be short.
class BatchSampler {
 public:
  BatchSampler(std::size_t count, std::size_t batch_size, std::uint64_t seed);

  std::span<const std::size_t> next();
  std::size_t epoch() const { return epoch_; }
  std::size_t batches_per_epoch() const;

 private:
  void reshuffle();

  std::size_t count_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
  std::vector<std::size_t> batch_;
};

/// Splits sequence indices deterministically: the trailing `eval_fraction` of
/// sequences forms the evaluation split.
struct SequenceSplit {
  std::size_t train_end = 0;  // [0, train_end) train, [train_end, n) eval
};
SequenceSplit split_sequences(std::size_t n_sequences, double eval_fraction);

}  // namespace gsae
