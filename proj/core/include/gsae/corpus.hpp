#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace gsae {

/// Byte-level tokens of a text file, in file order. Throws on an empty or
/// unreadable file.
std::vector<int> ingest_corpus(const std::filesystem::path& path);

/// Splits a token stream into consecutive windows of `context_length`; the
/// final window may be shorter.
std::vector<std::vector<int>> chunk_sequences(std::span<const int> stream,
                                              std::size_t context_length);

/// Deterministic English-like text with topical paragraphs, dialogue, numbers
/// and lists. Used as a self-contained training corpus.
std::string generate_synthetic_corpus(std::size_t n_bytes, std::uint64_t seed);

}  // namespace gsae
