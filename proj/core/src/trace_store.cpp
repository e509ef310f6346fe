#include "hsproj/trace_store.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <system_error>

#include "hsproj/binary_io.hpp"
#include "hsproj/error.hpp"

namespace hsproj {

namespace {

constexpr char kTraceMagic[] = "HTRC";
constexpr char kTraceExtension[] = ".htrc";

void check_trigger_id(const std::string& id) {
  const bool ok = !id.empty() && id != "." && id != ".." && std::all_of(id.begin(), id.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
  });
  if (!ok) throw ConfigError("trigger id \"" + id + "\" is not a valid cache file name");
}

}  // namespace

void Trace::validate() const {
  if (token_count == 0) throw DataError("trace " + trigger_id + ": token_count must be >= 1");
  if (d_h == 0) throw DataError("trace " + trigger_id + ": d_h must be >= 1");
  if (hidden_states.size() != token_count * d_h) {
    throw DataError("trace " + trigger_id + ": " + std::to_string(hidden_states.size()) +
                    " hidden values for token_count=" + std::to_string(token_count) + ", d_h=" + std::to_string(d_h));
  }
  if (teacher_embedding) {
    double sq = 0.0;
    for (float v : *teacher_embedding) sq += static_cast<double>(v) * v;
    if (teacher_embedding->empty() || std::abs(std::sqrt(sq) - 1.0) > 1e-5) {
      throw DataError("trace " + trigger_id + ": teacher embedding is not unit-norm");
    }
  }
}

Tensor Trace::hidden_tensor() const {
  return Tensor::from({token_count, d_h}, std::vector<double>(hidden_states.begin(), hidden_states.end()));
}

std::string CacheKey::canonical() const {
  return model_name + "|" + std::to_string(tokenizer_max_length) + "|" + std::to_string(generation_length);
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string cache_key_digest(const CacheKey& key) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(key.canonical())));
  return buf;
}

std::vector<std::uint8_t> encode_trace(const Trace& trace) {
  trace.validate();
  ByteWriter w;
  w.put_magic(kTraceMagic);
  w.put_u32(kTraceFormatVersion);
  w.put_string(trace.trigger_id);
  w.put_string(trace.conversation_id);
  w.put_string(trace.query_text);
  w.put_u32(static_cast<std::uint32_t>(trace.token_count));
  w.put_u32(static_cast<std::uint32_t>(trace.d_h));
  const auto d = trace.teacher_embedding ? trace.teacher_embedding->size() : 0;
  w.put_u32(static_cast<std::uint32_t>(d));
  for (float v : trace.hidden_states) w.put_f32(v);
  if (trace.teacher_embedding)
    for (float v : *trace.teacher_embedding) w.put_f32(v);
  w.put_u32(crc32_of(w.bytes()));
  return w.take();
}

Trace decode_trace(std::span<const std::uint8_t> bytes, const std::string& context) {
  {
    if (bytes.size() < 4) throw CorruptionError(context + ": truncated trace file");
    ByteReader header(bytes, context);
    header.expect_magic(kTraceMagic);
    if (header.remaining() < 4) throw CorruptionError(context + ": truncated trace header");
    const auto version = header.get_u32("format version");
    if (version != kTraceFormatVersion) {
      throw VersionError(context + ": trace format version " + std::to_string(version) + ", this build reads " +
                         std::to_string(kTraceFormatVersion));
    }
  }
  if (bytes.size() < 12) throw CorruptionError(context + ": truncated trace file");
  const auto payload = bytes.first(bytes.size() - 4);
  ByteReader trailer(bytes.last(4), context);
  if (trailer.get_u32("checksum") != crc32_of(payload)) {
    throw CorruptionError(context + ": checksum mismatch (truncated or corrupted trace)");
  }

  ByteReader r(payload, context);
  r.expect_magic(kTraceMagic);
  r.get_u32("format version");
  Trace t;
  t.trigger_id = r.get_string("trigger_id");
  t.conversation_id = r.get_string("conversation_id");
  t.query_text = r.get_string("query_text");
  t.token_count = r.get_u32("token_count");
  t.d_h = r.get_u32("d_h");
  const auto d = r.get_u32("teacher dim");
  if (r.remaining() != (t.token_count * t.d_h + d) * 4) {
    throw DecodeError(context + ": payload length does not match header dimensions");
  }
  t.hidden_states.resize(t.token_count * t.d_h);
  for (auto& v : t.hidden_states) v = r.get_f32("hidden states");
  if (d > 0) {
    std::vector<float> teacher(d);
    for (auto& v : teacher) v = r.get_f32("teacher embedding");
    t.teacher_embedding = std::move(teacher);
  }
  try {
    t.validate();
  } catch (const DataError& e) {
    throw DecodeError(context + ": " + e.what());
  }
  return t;
}

std::filesystem::path trace_path(const std::filesystem::path& root, const CacheKey& key,
                                 const std::string& trigger_id) {
  check_trigger_id(trigger_id);
  return root / cache_key_digest(key) / (trigger_id + kTraceExtension);
}

void write_trace(const std::filesystem::path& root, const CacheKey& key, const Trace& trace) {
  write_file_atomic(trace_path(root, key, trace.trigger_id), encode_trace(trace));
}

std::optional<Trace> read_trace(const std::filesystem::path& root, const CacheKey& key,
                                const std::string& trigger_id) {
  const auto path = trace_path(root, key, trigger_id);
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) return std::nullopt;
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const IoError&) {
    // Removed between the existence check and the open.
    if (!std::filesystem::exists(path, ec)) return std::nullopt;
    throw;
  }
  Trace t = decode_trace(bytes, path.string());
  if (t.trigger_id != trigger_id) {
    throw CorruptionError(path.string() + ": stored trigger id " + t.trigger_id + " does not match file name");
  }
  return t;
}

std::vector<std::string> scan(const std::filesystem::path& root, const CacheKey& key) {
  const auto dir = root / cache_key_digest(key);
  std::error_code ec;
  if (!std::filesystem::exists(dir, ec)) return {};
  std::vector<std::string> ids;
  std::filesystem::directory_iterator it(dir, ec);
  if (ec) throw IoError("cannot read cache directory " + dir.string() + ": " + ec.message());
  for (const auto& entry : it) {
    const auto& p = entry.path();
    if (p.extension() != kTraceExtension) continue;
    ids.push_back(p.stem().string());
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

}  // namespace hsproj
