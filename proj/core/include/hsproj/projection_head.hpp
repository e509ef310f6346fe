#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hsproj/binary_io.hpp"
#include "hsproj/tensor.hpp"

namespace hsproj {

// Shape of the student mapper: hidden-state sequence [n x d_h] -> unit [d].
struct MapperConfig {
  std::size_t d_h = 4096;
  std::size_t d_m = 1024;
  std::size_t d = 1024;
  std::size_t layers = 2;
  std::size_t heads = 8;
  std::size_t ff_dim = 4096;
  std::size_t max_positions = 128;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
  bool operator==(const MapperConfig&) const = default;
};

// Feedforward activation recorded in the parameter file header.
enum class Activation : std::uint32_t { kGeluErf = 1 };

struct EncoderLayer {
  Tensor ln1_gain, ln1_bias;
  AttentionWeights attn;
  Tensor ln2_gain, ln2_bias;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;
};

struct NamedParam {
  std::string name;
  Tensor tensor;
  // Matrix weights decay; biases, norm parameters and positions do not.
  bool decay;
};

struct MapperParams {
  MapperConfig config;
  Tensor w_in, b_in;
  Tensor pos_emb;
  std::vector<EncoderLayer> layers;
  Tensor final_gain, final_bias;
  Tensor w_out, b_out;

  // Every learnable tensor in file/declaration order.
  std::vector<NamedParam> named() const;
  std::size_t parameter_count() const;
  // Deep copy with fresh storage and the same requires_grad flags.
  MapperParams clone() const;
  void zero_grad() const;
};

// Closed-form parameter count for a config, independent of any allocation.
std::size_t mapper_parameter_count(const MapperConfig& config);

MapperParams init_mapper(const MapperConfig& config);

// hidden: [n x d_h]; mask: length n, true = real token. Returns unit [d].
Tensor mapper_forward(const MapperParams& params, const Tensor& hidden, const Mask& mask);
Tensor mapper_forward(const MapperParams& params, const Tensor& hidden);

// Parameter file: "HSPH", u32 version, config, activation, f64 blocks.
inline constexpr std::uint32_t kParamFormatVersion = 1;

void encode_params(const MapperParams& params, ByteWriter& out);
MapperParams decode_params(ByteReader& in);

void save_params(const MapperParams& params, const std::filesystem::path& path);
MapperParams load_params(const std::filesystem::path& path);
// Additionally rejects files whose config differs from `expected` (ConfigError).
MapperParams load_params(const std::filesystem::path& path, const MapperConfig& expected);

}  // namespace hsproj
