#include "hsproj/projection_head.hpp"

#include <algorithm>
#include <cmath>

#include "hsproj/error.hpp"
#include "hsproj/random.hpp"

namespace hsproj {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr char kParamMagic[] = "HSPH";
// Trailing sections a checkpoint may append after the parameter blocks.
constexpr char kOptimizerMagic[] = "HOPT";

Tensor uniform_weight(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> values(fan_in * fan_out);
  for (auto& v : values) v = rng.uniform(-bound, bound);
  return Tensor::from({fan_in, fan_out}, std::move(values), true);
}

Tensor zeros(std::size_t n) { return Tensor::zeros({n}, true); }
Tensor ones(std::size_t n) { return Tensor::filled({n}, 1.0, true); }

Tensor clone_tensor(const Tensor& t) {
  return Tensor::from(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), t.requires_grad());
}

}  // namespace

void MapperConfig::validate() const {
  if (d_h == 0 || d_m == 0 || d == 0 || layers == 0 || heads == 0 || ff_dim == 0) {
    throw ConfigError("mapper config: every dimension must be >= 1");
  }
  if (max_positions == 0) throw ConfigError("mapper config: max_positions must be >= 1");
  if (d_m % heads != 0) {
    throw ConfigError("mapper config: d_m=" + std::to_string(d_m) + " not divisible by heads=" +
                      std::to_string(heads));
  }
}

std::size_t mapper_parameter_count(const MapperConfig& c) {
  const std::size_t attention = 4 * (c.d_m * c.d_m + c.d_m);
  const std::size_t feedforward = c.d_m * c.ff_dim + c.ff_dim + c.ff_dim * c.d_m + c.d_m;
  const std::size_t norms = 4 * c.d_m;
  return c.d_h * c.d_m + c.d_m + c.max_positions * c.d_m + c.layers * (attention + feedforward + norms) +
         2 * c.d_m + c.d_m * c.d + c.d;
}

MapperParams init_mapper(const MapperConfig& config) {
  config.validate();
  Rng rng(config.seed);
  MapperParams p;
  p.config = config;
  const auto dm = config.d_m;
  p.w_in = uniform_weight(rng, config.d_h, dm);
  p.b_in = zeros(dm);
  p.pos_emb = Tensor::zeros({config.max_positions, dm}, true);
  for (std::size_t l = 0; l < config.layers; ++l) {
    EncoderLayer layer;
    layer.ln1_gain = ones(dm);
    layer.ln1_bias = zeros(dm);
    layer.attn.w_q = uniform_weight(rng, dm, dm);
    layer.attn.b_q = zeros(dm);
    layer.attn.w_k = uniform_weight(rng, dm, dm);
    layer.attn.b_k = zeros(dm);
    layer.attn.w_v = uniform_weight(rng, dm, dm);
    layer.attn.b_v = zeros(dm);
    layer.attn.w_o = uniform_weight(rng, dm, dm);
    layer.attn.b_o = zeros(dm);
    layer.ln2_gain = ones(dm);
    layer.ln2_bias = zeros(dm);
    layer.ff_w1 = uniform_weight(rng, dm, config.ff_dim);
    layer.ff_b1 = zeros(config.ff_dim);
    layer.ff_w2 = uniform_weight(rng, config.ff_dim, dm);
    layer.ff_b2 = zeros(dm);
    p.layers.push_back(std::move(layer));
  }
  p.final_gain = ones(dm);
  p.final_bias = zeros(dm);
  p.w_out = uniform_weight(rng, dm, config.d);
  p.b_out = zeros(config.d);
  return p;
}

std::vector<NamedParam> MapperParams::named() const {
  std::vector<NamedParam> out;
  out.push_back({"w_in", w_in, true});
  out.push_back({"b_in", b_in, false});
  out.push_back({"pos_emb", pos_emb, false});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    out.push_back({prefix + "ln1_gain", L.ln1_gain, false});
    out.push_back({prefix + "ln1_bias", L.ln1_bias, false});
    out.push_back({prefix + "w_q", L.attn.w_q, true});
    out.push_back({prefix + "b_q", L.attn.b_q, false});
    out.push_back({prefix + "w_k", L.attn.w_k, true});
    out.push_back({prefix + "b_k", L.attn.b_k, false});
    out.push_back({prefix + "w_v", L.attn.w_v, true});
    out.push_back({prefix + "b_v", L.attn.b_v, false});
    out.push_back({prefix + "w_o", L.attn.w_o, true});
    out.push_back({prefix + "b_o", L.attn.b_o, false});
    out.push_back({prefix + "ln2_gain", L.ln2_gain, false});
    out.push_back({prefix + "ln2_bias", L.ln2_bias, false});
    out.push_back({prefix + "ff_w1", L.ff_w1, true});
    out.push_back({prefix + "ff_b1", L.ff_b1, false});
    out.push_back({prefix + "ff_w2", L.ff_w2, true});
    out.push_back({prefix + "ff_b2", L.ff_b2, false});
  }
  out.push_back({"final_gain", final_gain, false});
  out.push_back({"final_bias", final_bias, false});
  out.push_back({"w_out", w_out, true});
  out.push_back({"b_out", b_out, false});
  return out;
}

std::size_t MapperParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : named()) n += p.tensor.numel();
  return n;
}

MapperParams MapperParams::clone() const {
  MapperParams c;
  c.config = config;
  c.w_in = clone_tensor(w_in);
  c.b_in = clone_tensor(b_in);
  c.pos_emb = clone_tensor(pos_emb);
  for (const auto& L : layers) {
    EncoderLayer n;
    n.ln1_gain = clone_tensor(L.ln1_gain);
    n.ln1_bias = clone_tensor(L.ln1_bias);
    n.attn = {clone_tensor(L.attn.w_q), clone_tensor(L.attn.b_q), clone_tensor(L.attn.w_k),
              clone_tensor(L.attn.b_k), clone_tensor(L.attn.w_v), clone_tensor(L.attn.b_v),
              clone_tensor(L.attn.w_o), clone_tensor(L.attn.b_o)};
    n.ln2_gain = clone_tensor(L.ln2_gain);
    n.ln2_bias = clone_tensor(L.ln2_bias);
    n.ff_w1 = clone_tensor(L.ff_w1);
    n.ff_b1 = clone_tensor(L.ff_b1);
    n.ff_w2 = clone_tensor(L.ff_w2);
    n.ff_b2 = clone_tensor(L.ff_b2);
    c.layers.push_back(std::move(n));
  }
  c.final_gain = clone_tensor(final_gain);
  c.final_bias = clone_tensor(final_bias);
  c.w_out = clone_tensor(w_out);
  c.b_out = clone_tensor(b_out);
  return c;
}

void MapperParams::zero_grad() const {
  for (auto& p : named()) p.tensor.zero_grad();
}

Tensor mapper_forward(const MapperParams& params, const Tensor& hidden, const Mask& mask) {
  const auto& cfg = params.config;
  if (hidden.rank() != 2 || hidden.dim(1) != cfg.d_h) {
    throw DimensionError("mapper_forward: hidden states " + shape_string(hidden.shape()) + " do not match d_h=" +
                         std::to_string(cfg.d_h));
  }
  const std::size_t n = hidden.dim(0);
  if (n == 0) throw EmptySequenceError("mapper_forward: empty sequence");
  if (n > cfg.max_positions) {
    throw SequenceLengthError("mapper_forward: sequence length " + std::to_string(n) + " exceeds max_positions=" +
                        std::to_string(cfg.max_positions));
  }
  if (mask.size() != n) {
    throw DimensionError("mapper_forward: mask length " + std::to_string(mask.size()) + " vs sequence length " +
                         std::to_string(n));
  }
  if (std::find(mask.begin(), mask.end(), true) == mask.end()) {
    throw EmptySequenceError("mapper_forward: empty sequence (every position masked)");
  }

  Tensor x = add_row_bias(matmul(hidden, params.w_in), params.b_in);
  x = add(x, slice_rows(params.pos_emb, 0, n));
  for (const auto& layer : params.layers) {
    const Tensor a = layer_norm(x, layer.ln1_gain, layer.ln1_bias, kLayerNormEps);
    x = add(x, multi_head_self_attention(a, mask, layer.attn, cfg.heads));
    const Tensor f = layer_norm(x, layer.ln2_gain, layer.ln2_bias, kLayerNormEps);
    const Tensor hidden_ff = gelu(add_row_bias(matmul(f, layer.ff_w1), layer.ff_b1));
    x = add(x, add_row_bias(matmul(hidden_ff, layer.ff_w2), layer.ff_b2));
  }
  x = layer_norm(x, params.final_gain, params.final_bias, kLayerNormEps);
  const Tensor pooled = reshape(masked_mean_pool(x, mask), {1, cfg.d_m});
  const Tensor projected = reshape(add_row_bias(matmul(pooled, params.w_out), params.b_out), {cfg.d});
  return l2_normalize(projected);
}

Tensor mapper_forward(const MapperParams& params, const Tensor& hidden) {
  return mapper_forward(params, hidden, Mask(hidden.rank() == 2 ? hidden.dim(0) : 0, true));
}

// --- persistence -----------------------------------------------------------------

void encode_params(const MapperParams& params, ByteWriter& out) {
  const auto& c = params.config;
  out.put_magic(kParamMagic);
  out.put_u32(kParamFormatVersion);
  out.put_u32(static_cast<std::uint32_t>(c.d_h));
  out.put_u32(static_cast<std::uint32_t>(c.d_m));
  out.put_u32(static_cast<std::uint32_t>(c.d));
  out.put_u32(static_cast<std::uint32_t>(c.layers));
  out.put_u32(static_cast<std::uint32_t>(c.heads));
  out.put_u32(static_cast<std::uint32_t>(c.ff_dim));
  out.put_u32(static_cast<std::uint32_t>(c.max_positions));
  out.put_u64(c.seed);
  out.put_u32(static_cast<std::uint32_t>(Activation::kGeluErf));
  out.put_u64(params.parameter_count());
  for (const auto& p : params.named())
    for (double v : p.tensor.data()) out.put_f64(v);
}

MapperParams decode_params(ByteReader& in) {
  in.expect_magic(kParamMagic);
  const auto version = in.get_u32("format version");
  if (version != kParamFormatVersion) {
    throw VersionError(in.context() + ": unsupported parameter format version " + std::to_string(version) +
                      " (this build reads " + std::to_string(kParamFormatVersion) + ")");
  }
  MapperConfig c;
  c.d_h = in.get_u32("d_h");
  c.d_m = in.get_u32("d_m");
  c.d = in.get_u32("d");
  c.layers = in.get_u32("layers");
  c.heads = in.get_u32("heads");
  c.ff_dim = in.get_u32("ff_dim");
  c.max_positions = in.get_u32("max_positions");
  c.seed = in.get_u64("seed");
  const auto activation = in.get_u32("activation");
  if (activation != static_cast<std::uint32_t>(Activation::kGeluErf)) {
    throw DecodeError(in.context() + ": unknown activation code " + std::to_string(activation));
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw DecodeError(in.context() + ": invalid stored config: " + e.what());
  }
  const auto count = in.get_u64("parameter count");
  if (count != mapper_parameter_count(c)) {
    throw DecodeError(in.context() + ": parameter count " + std::to_string(count) + " inconsistent with config");
  }
  if (in.remaining() < count * 8) {
    throw DecodeError(in.context() + ": truncated parameter payload");
  }
  MapperParams p = init_mapper(c);
  for (auto& np : p.named()) {
    auto dst = np.tensor.mutable_data();
    for (auto& v : dst) v = in.get_f64("parameter block");
  }
  return p;
}

void save_params(const MapperParams& params, const std::filesystem::path& path) {
  ByteWriter w;
  encode_params(params, w);
  write_file_atomic(path, w.bytes());
}

MapperParams load_params(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes, path.string());
  MapperParams p = decode_params(r);
  if (!r.at_end() && !r.peek_magic(kOptimizerMagic)) {
    throw DecodeError(path.string() + ": unexpected trailing bytes after parameter blocks");
  }
  return p;
}

MapperParams load_params(const std::filesystem::path& path, const MapperConfig& expected) {
  MapperParams p = load_params(path);
  auto comparable = p.config;
  comparable.seed = expected.seed;
  if (!(comparable == expected)) {
    throw ConfigError(path.string() + ": stored mapper config (d_h=" + std::to_string(p.config.d_h) +
                      ", d_m=" + std::to_string(p.config.d_m) + ", d=" + std::to_string(p.config.d) +
                      ") does not match the expected config (d_h=" + std::to_string(expected.d_h) + ", d_m=" +
                      std::to_string(expected.d_m) + ", d=" + std::to_string(expected.d) + ")");
  }
  return p;
}

}  // namespace hsproj
