#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hsproj/tensor.hpp"

namespace hsproj {

// One retrieval trigger: the generated tokens' last-layer hidden states plus,
// once computed, the teacher's embedding of the generated query.
struct Trace {
  std::string trigger_id;
  std::string conversation_id;
  std::string query_text;
  std::size_t token_count = 0;
  std::size_t d_h = 0;
  std::vector<float> hidden_states;  // [token_count x d_h]
  std::optional<std::vector<float>> teacher_embedding;

  void validate() const;  // throws DataError
  Tensor hidden_tensor() const;
  bool operator==(const Trace&) const = default;
};

struct CacheKey {
  std::string model_name;
  std::uint32_t tokenizer_max_length = 0;
  std::uint32_t generation_length = 0;

  // "model_name|tokenizer_max_length|generation_length"
  std::string canonical() const;
};

// 64-bit FNV-1a of the canonical key string, as 16 lowercase hex digits.
std::string cache_key_digest(const CacheKey& key);
std::uint64_t fnv1a64(std::string_view bytes);

inline constexpr std::uint32_t kTraceFormatVersion = 1;

std::vector<std::uint8_t> encode_trace(const Trace& trace);
// Throws VersionError, CorruptionError (checksum/truncation) or DecodeError.
Trace decode_trace(std::span<const std::uint8_t> bytes, const std::string& context);

std::filesystem::path trace_path(const std::filesystem::path& root, const CacheKey& key, const std::string& trigger_id);

// <root>/<digest>/<trigger_id>.htrc, written via temp file + rename.
void write_trace(const std::filesystem::path& root, const CacheKey& key, const Trace& trace);
// std::nullopt on a cache miss; corrupt or foreign-version files throw.
std::optional<Trace> read_trace(const std::filesystem::path& root, const CacheKey& key, const std::string& trigger_id);
// Sorted, deduplicated trigger ids cached under the key's digest.
std::vector<std::string> scan(const std::filesystem::path& root, const CacheKey& key);

}  // namespace hsproj
