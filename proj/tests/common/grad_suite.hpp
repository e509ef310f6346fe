#pragma once

// Gradient checks for every differentiable op plus the full projection-head
// loss. Shared by the unit tests and the acceptance runner.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hsproj/losses.hpp"
#include "hsproj/projection_head.hpp"
#include "hsproj/random.hpp"
#include "hsproj/tensor.hpp"

namespace hsproj::testing {

struct GradCase {
  std::string name;
  std::function<double(std::uint64_t seed)> max_rel_error;
};

namespace grad_detail {

inline Tensor rnd(Rng& rng, Shape shape, bool rg = true, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), rg);
}

inline Tensor probe(const Tensor& x, Rng& rng) { return sum(mul(x, rnd(rng, x.shape(), false))); }

inline Tensor unit_rows(Rng& rng, std::size_t rows, std::size_t cols) {
  std::vector<Tensor> out;
  for (std::size_t r = 0; r < rows; ++r) out.push_back(l2_normalize(rnd(rng, {cols}, false)).detach());
  return stack_rows(out);
}

// Builds inputs and a scalar function from a seed, then runs grad_check.
template <typename Make>
double check(std::uint64_t seed, Make make) {
  Rng rng(seed);
  std::vector<Tensor> inputs;
  std::function<Tensor()> f = make(rng, inputs);
  return grad_check(f, inputs);
}

inline MapperConfig tiny_config(std::uint64_t seed) {
  MapperConfig c;
  c.d_h = 8;
  c.d_m = 8;
  c.d = 4;
  c.layers = 1;
  c.heads = 2;
  c.ff_dim = 16;
  c.max_positions = 8;
  c.seed = seed;
  return c;
}

}  // namespace grad_detail

inline std::vector<GradCase> gradient_cases() {
  using namespace grad_detail;
  std::vector<GradCase> cases;
  const auto add_case = [&](std::string name, auto make) {
    cases.push_back({std::move(name), [make](std::uint64_t seed) { return check(seed, make); }});
  };

  add_case("add", [](Rng& rng, std::vector<Tensor>& in) {
    auto a = rnd(rng, {3, 4}), b = rnd(rng, {3, 4});
    in = {a, b};
    auto w = rnd(rng, {3, 4}, false);
    return std::function<Tensor()>([=] { return sum(mul(add(a, b), w)); });
  });
  add_case("sub", [](Rng& rng, std::vector<Tensor>& in) {
    auto a = rnd(rng, {3, 4}), b = rnd(rng, {3, 4});
    in = {a, b};
    auto w = rnd(rng, {3, 4}, false);
    return std::function<Tensor()>([=] { return sum(mul(sub(a, b), w)); });
  });
  add_case("mul", [](Rng& rng, std::vector<Tensor>& in) {
    auto a = rnd(rng, {2, 5}), b = rnd(rng, {2, 5});
    in = {a, b};
    auto w = rnd(rng, {2, 5}, false);
    return std::function<Tensor()>([=] { return sum(mul(mul(a, b), w)); });
  });
  add_case("scale", [](Rng& rng, std::vector<Tensor>& in) {
    auto a = rnd(rng, {4});
    in = {a};
    auto w = rnd(rng, {4}, false);
    const double f = rng.normal();
    return std::function<Tensor()>([=] { return sum(mul(scale(a, f), w)); });
  });
  add_case("add_scalar", [](Rng& rng, std::vector<Tensor>& in) {
    auto a = rnd(rng, {4});
    in = {a};
    auto w = rnd(rng, {4}, false);
    return std::function<Tensor()>([=] { return sum(mul(mul(add_scalar(a, 0.7), a), w)); });
  });
  add_case("add_row_bias", [](Rng& rng, std::vector<Tensor>& in) {
    auto x = rnd(rng, {3, 4}), b = rnd(rng, {4});
    in = {x, b};
    auto w = rnd(rng, {3, 4}, false);
    return std::function<Tensor()>([=] { return sum(mul(add_row_bias(x, b), w)); });
  });
  add_case("gelu", [](Rng& rng, std::vector<Tensor>& in) {
    auto x = rnd(rng, {3, 5});
    in = {x};
    auto w = rnd(rng, {3, 5}, false);
    return std::function<Tensor()>([=] { return sum(mul(gelu(x), w)); });
  });
  add_case("reshape", [](Rng& rng, std::vector<Tensor>& in) {
    auto x = rnd(rng, {2, 6});
    in = {x};
    auto w = rnd(rng, {3, 4}, false);
    return std::function<Tensor()>([=] { return sum(mul(reshape(x, {3, 4}), w)); });
  });
  add_case("transpose", [](Rng& rng, std::vector<Tensor>& in) {
    auto x = rnd(rng, {2, 5});
    in = {x};
    auto w = rnd(rng, {5, 2}, false);
    return std::function<Tensor()>([=] { return sum(mul(transpose(x), w)); });
  });
  add_case("slice_rows", [](Rng& rng, std::vector<Tensor>& in) {
    auto x = rnd(rng, {5, 3});
    in = {x};
    auto w = rnd(rng, {2, 3}, false);
    return std::function<Tensor()>([=] { return sum(mul(slice_rows(x, 2, 2), w)); });
  });
  add_case("slice_cols", [](Rng& rng, std::vector<Tensor>& in) {
    auto x = rnd(rng, {3, 6});
    in = {x};
    auto w = rnd(rng, {3, 3}, false);
    return std::function<Tensor()>([=] { return sum(mul(slice_cols(x, 1, 3), w)); });
  });
  add_case("concat_cols", [](Rng& rng, std::vector<Tensor>& in) {
    auto a = rnd(rng, {3, 2}), b = rnd(rng, {3, 4});
    in = {a, b};
    auto w = rnd(rng, {3, 6}, false);
    return std::function<Tensor()>([=] {
      std::vector<Tensor> parts{a, b};
      return sum(mul(concat_cols(parts), w));
    });
  });
  add_case("stack_rows", [](Rng& rng, std::vector<Tensor>& in) {
    auto a = rnd(rng, {4}), b = rnd(rng, {4}), c = rnd(rng, {4});
    in = {a, b, c};
    auto w = rnd(rng, {3, 4}, false);
    return std::function<Tensor()>([=] {
      std::vector<Tensor> rows{a, b, c};
      return sum(mul(stack_rows(rows), w));
    });
  });
  add_case("sum", [](Rng& rng, std::vector<Tensor>& in) {
    auto x = rnd(rng, {3, 3});
    in = {x};
    return std::function<Tensor()>([=] { return mul(sum(x), sum(x)); });
  });
  add_case("mean", [](Rng& rng, std::vector<Tensor>& in) {
    auto x = rnd(rng, {4, 2});
    in = {x};
    return std::function<Tensor()>([=] { return mul(mean(x), sum(mul(x, x))); });
  });
  add_case("matmul", [](Rng& rng, std::vector<Tensor>& in) {
    auto a = rnd(rng, {3, 4}), b = rnd(rng, {4, 2});
    in = {a, b};
    auto w = rnd(rng, {3, 2}, false);
    return std::function<Tensor()>([=] { return sum(mul(matmul(a, b), w)); });
  });
  add_case("layer_norm", [](Rng& rng, std::vector<Tensor>& in) {
    auto x = rnd(rng, {3, 5}), g = rnd(rng, {5}), b = rnd(rng, {5});
    in = {x, g, b};
    auto w = rnd(rng, {3, 5}, false);
    return std::function<Tensor()>([=] { return sum(mul(layer_norm(x, g, b), w)); });
  });
  add_case("softmax", [](Rng& rng, std::vector<Tensor>& in) {
    auto x = rnd(rng, {3, 4});
    in = {x};
    auto w = rnd(rng, {3, 4}, false);
    return std::function<Tensor()>([=] { return sum(mul(softmax(x), w)); });
  });
  add_case("log_softmax", [](Rng& rng, std::vector<Tensor>& in) {
    auto x = rnd(rng, {3, 4});
    in = {x};
    auto w = rnd(rng, {3, 4}, false);
    return std::function<Tensor()>([=] { return sum(mul(log_softmax(x), w)); });
  });
  add_case("masked_mean_pool", [](Rng& rng, std::vector<Tensor>& in) {
    auto x = rnd(rng, {5, 3});
    in = {x};
    auto w = rnd(rng, {3}, false);
    Mask mask{true, false, true, true, false};
    return std::function<Tensor()>([=] { return sum(mul(masked_mean_pool(x, mask), w)); });
  });
  add_case("l2_normalize", [](Rng& rng, std::vector<Tensor>& in) {
    auto x = rnd(rng, {6});
    in = {x};
    auto w = rnd(rng, {6}, false);
    return std::function<Tensor()>([=] { return sum(mul(l2_normalize(x), w)); });
  });
  add_case("multi_head_self_attention", [](Rng& rng, std::vector<Tensor>& in) {
    const std::size_t n = 4, dm = 6;
    auto x = rnd(rng, {n, dm});
    AttentionWeights aw{rnd(rng, {dm, dm}, true, 0.5), rnd(rng, {dm}, true, 0.1), rnd(rng, {dm, dm}, true, 0.5),
                        rnd(rng, {dm}, true, 0.1),     rnd(rng, {dm, dm}, true, 0.5), rnd(rng, {dm}, true, 0.1),
                        rnd(rng, {dm, dm}, true, 0.5), rnd(rng, {dm}, true, 0.1)};
    // b_k is left out: softmax is shift invariant, so its gradient is identically
    // zero and a relative error on it only measures roundoff. See key_bias_gradient.
    in = {x, aw.w_q, aw.b_q, aw.w_k, aw.w_v, aw.b_v, aw.w_o, aw.b_o};
    auto w = rnd(rng, {n, dm}, false);
    Mask mask{true, true, false, true};
    return std::function<Tensor()>([=] { return sum(mul(multi_head_self_attention(x, mask, aw, 2), w)); });
  });
  add_case("alignment_loss", [](Rng& rng, std::vector<Tensor>& in) {
    auto p = rnd(rng, {3, 4});
    in = {p};
    auto t = unit_rows(rng, 3, 4);
    return std::function<Tensor()>([=] {
      std::vector<Tensor> rows;
      for (std::size_t i = 0; i < 3; ++i) rows.push_back(l2_normalize(reshape(slice_rows(p, i, 1), {4})));
      return alignment_loss(stack_rows(rows), t);
    });
  });
  add_case("contrastive_loss", [](Rng& rng, std::vector<Tensor>& in) {
    auto p = rnd(rng, {4, 5});
    in = {p};
    auto t = unit_rows(rng, 4, 5);
    return std::function<Tensor()>([=] {
      std::vector<Tensor> rows;
      for (std::size_t i = 0; i < 4; ++i) rows.push_back(l2_normalize(reshape(slice_rows(p, i, 1), {5})));
      return contrastive_loss(stack_rows(rows), t, 0.5);
    });
  });
  add_case("rank_distill_loss", [](Rng& rng, std::vector<Tensor>& in) {
    auto p = rnd(rng, {5});
    in = {p};
    auto cands = unit_rows(rng, 6, 5);
    std::vector<double> scores(6);
    for (auto& s : scores) s = rng.uniform(-1.0, 1.0);
    return std::function<Tensor()>([=] { return rank_distill_loss(l2_normalize(p), cands, scores, 0.5); });
  });

  // Full tiny-config head under the combined loss, every parameter group checked.
  add_case("projection_head_combined_loss", [](Rng& rng, std::vector<Tensor>& in) {
    const auto cfg = tiny_config(rng.next());
    auto params = init_mapper(cfg);
    // Non-trivial values for groups initialised to constants.
    for (const auto& np : params.named()) {
      Tensor t = np.tensor;
      for (auto& v : t.mutable_data()) v += 0.1 * rng.normal();
    }
    for (const auto& np : params.named())
      if (!np.name.ends_with(".b_k")) in.push_back(np.tensor);
    std::vector<Tensor> hidden;
    std::vector<Mask> masks;
    const std::size_t lengths[] = {3, 5, 2};
    for (std::size_t n : lengths) {
      hidden.push_back(rnd(rng, {n + 1, cfg.d_h}, false));
      Mask m(n + 1, true);
      m[n] = false;  // trailing padding
      masks.push_back(m);
    }
    auto teacher = unit_rows(rng, 3, cfg.d);
    std::vector<RankTargets> targets;
    for (int q = 0; q < 3; ++q) {
      std::vector<double> scores(4);
      for (auto& s : scores) s = rng.uniform(-1.0, 1.0);
      targets.push_back({unit_rows(rng, 4, cfg.d), scores});
    }
    LossWeights weights{0.5, 0.5, 0.5, 0.5, 0.5};
    return std::function<Tensor()>([=] {
      std::vector<Tensor> preds;
      for (std::size_t i = 0; i < hidden.size(); ++i) preds.push_back(mapper_forward(params, hidden[i], masks[i]));
      return combined_loss(preds, teacher, targets, weights).total;
    });
  });
  return cases;
}

// Largest |d loss / d b_k| over the attention key biases of a random tiny head.
inline double key_bias_gradient(std::uint64_t seed) {
  using namespace grad_detail;
  Rng rng(seed);
  auto params = init_mapper(tiny_config(seed));
  for (const auto& np : params.named()) {
    Tensor t = np.tensor;
    for (auto& v : t.mutable_data()) v += 0.1 * rng.normal();
  }
  auto hidden = rnd(rng, {5, 8}, false);
  auto out = mapper_forward(params, hidden, {true, true, true, true, false});
  probe(out, rng).backward();
  double worst = 0.0;
  for (const auto& np : params.named())
    if (np.name.ends_with(".b_k"))
      for (double g : np.tensor.grad()) worst = std::max(worst, std::abs(g));
  return worst;
}

}  // namespace hsproj::testing
