#include "hsproj/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "hsproj/error.hpp"

namespace hsproj {

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<detail::Node>;

NodePtr make_node(Shape shape, std::vector<double> data) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  return node;
}

// Wraps a freshly computed result, recording the graph edge only when some
// input tracks gradients and grad mode is on.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<NodePtr> parents,
                   std::function<void(detail::Node&)> backward_fn) {
  auto node = make_node(std::move(shape), std::move(data));
  const bool track = g_grad_enabled && std::any_of(parents.begin(), parents.end(), [](const NodePtr& p) {
                       return p->requires_grad;
                     });
  if (track) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + " tensor, got " +
                         shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

// Accumulates `src` into parent's grad if that parent tracks gradients.
void accumulate(detail::Node& parent, const std::vector<double>& src) {
  if (!parent.requires_grad) return;
  auto& g = parent.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

// --- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return filled(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  auto node = make_node(std::move(shape), std::vector<double>(n, value));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                         shape_string(shape));
  }
  auto node = make_node(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

void Tensor::zero_grad() {
  if (node_->requires_grad) node_->grad.assign(node_->data.size(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_string(shape()));
  return node_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (rank() != 2) throw DimensionError("at(r, c) on tensor " + shape_string(shape()));
  return node_->data.at(r * node_->shape[1] + c);
}

Tensor Tensor::detach() const {
  auto node = make_node(node_->shape, node_->data);
  return Tensor(std::move(node));
}

void Tensor::backward() {
  if (numel() != 1) {
    throw ContractError("backward() requires a scalar root, got " + shape_string(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS yields a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order) node->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
  for (auto* node : order) {
    if (node->backward_fn) {
      node->backward_fn = nullptr;
      node->parents.clear();
    }
  }
}

// --- elementwise --------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node& self) {
    accumulate(*self.parents[0], self.grad);
    accumulate(*self.parents[1], self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node& self) {
    accumulate(*self.parents[0], self.grad);
    auto& rhs = *self.parents[1];
    if (rhs.requires_grad) {
      auto& g = rhs.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  return make_result(x.shape(), std::move(out), {x.node()}, [factor](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor add_scalar(const Tensor& x, double value) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + value;
  return make_result(x.shape(), std::move(out), {x.node()},
                     [](detail::Node& self) { accumulate(*self.parents[0], self.grad); });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  require_rank(bias, 1, "add_row_bias");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.dim(0) != n) {
    throw DimensionError("add_row_bias: bias " + shape_string(bias.shape()) + " does not fit " +
                         shape_string(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.data()[j];
  return make_result(x.shape(), std::move(out), {x.node(), bias.node()}, [m, n](detail::Node& self) {
    accumulate(*self.parents[0], self.grad);
    auto& pb = *self.parents[1];
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  return make_result(x.shape(), std::move(out), {x.node()}, [](detail::Node& self) {
    auto& parent = *self.parents[0];
    auto& g = parent.ensure_grad();
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = parent.data[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x.node()},
                     [](detail::Node& self) { accumulate(*self.parents[0], self.grad); });
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x.data()[i * n + j];
  return make_result({n, m}, std::move(out), {x.node()}, [m, n](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank(x, 2, "slice_rows");
  const std::size_t n = x.dim(1);
  if (begin + count > x.dim(0)) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_string(x.shape()));
  }
  std::vector<double> out(x.data().begin() + begin * n, x.data().begin() + (begin + count) * n);
  return make_result({count, n}, std::move(out), {x.node()}, [begin, n](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank(x, 2, "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (begin + count > n) {
    throw DimensionError("slice_cols: columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_string(x.shape()));
  }
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x.data()[i * n + begin + j];
  return make_result({m, count}, std::move(out), {x.node()}, [m, n, begin, count](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * n + begin + j] += self.grad[i * count + j];
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  std::vector<NodePtr> parents;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != m) {
      throw DimensionError("concat_cols: row mismatch " + shape_string(parts[0].shape()) + " vs " +
                           shape_string(p.shape()));
    }
    widths.push_back(p.dim(1));
    total += p.dim(1);
    parents.push_back(p.node());
  }
  std::vector<double> out(m * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto w = widths[k];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + offset + j] = parts[k].data()[i * w + j];
    offset += w;
  }
  return make_result({m, total}, std::move(out), std::move(parents), [m, total, widths](detail::Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const auto w = widths[k];
      auto& parent = *self.parents[k];
      if (parent.requires_grad) {
        auto& g = parent.ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * total + off + j];
      }
      off += w;
    }
  });
}

Tensor stack_rows(std::span<const Tensor> rows) {
  if (rows.empty()) throw DimensionError("stack_rows: no inputs");
  const std::size_t d = rows[0].numel();
  std::vector<double> out;
  out.reserve(rows.size() * d);
  std::vector<NodePtr> parents;
  for (const auto& r : rows) {
    if (r.rank() != 1 || r.numel() != d) {
      throw DimensionError("stack_rows: expected [" + std::to_string(d) + "], got " + shape_string(r.shape()));
    }
    out.insert(out.end(), r.data().begin(), r.data().end());
    parents.push_back(r.node());
  }
  return make_result({rows.size(), d}, std::move(out), std::move(parents), [d](detail::Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& parent = *self.parents[k];
      if (!parent.requires_grad) continue;
      auto& g = parent.ensure_grad();
      for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[k * d + j];
    }
  });
}

// --- reductions --------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result({}, {total}, {x.node()}, [](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// --- linear algebra ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_string(a.shape()) + " by " + shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return make_result({m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](detail::Node& self) {
    auto& na = *self.parents[0];
    auto& nb = *self.parents[1];
    const double* dc = self.grad.data();
    if (na.requires_grad) {
      auto& ga = na.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* brow = nb.data.data() + p * n;
          const double* drow = dc + i * n;
          for (std::size_t j = 0; j < n; ++j) acc += drow[j] * brow[j];
          ga[i * k + p] += acc;
        }
    }
    if (nb.requires_grad) {
      auto& gb = nb.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = na.data[i * k + p];
          double* grow = gb.data() + p * n;
          const double* drow = dc + i * n;
          for (std::size_t j = 0; j < n; ++j) grow[j] += av * drow[j];
        }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank(x, 2, "layer_norm");
  const std::size_t m = x.dim(0), d = x.dim(1);
  if (d == 0) throw DimensionError("layer_norm: zero-width rows");
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" + shape_string(bias.shape()) +
                         " do not fit " + shape_string(x.shape()));
  }
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");

  std::vector<double> out(m * d), xhat(m * d), rstd(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data().data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mu) * rstd[i];
      out[i * d + j] = xhat[i * d + j] * gain.data()[j] + bias.data()[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
      [m, d, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& self) {
        auto& nx = *self.parents[0];
        auto& ng = *self.parents[1];
        auto& nb = *self.parents[2];
        const double* dy = self.grad.data();
        if (ng.requires_grad) {
          auto& gg = ng.ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) gg[j] += dy[i * d + j] * xhat[i * d + j];
        }
        if (nb.requires_grad) {
          auto& gb = nb.ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) gb[j] += dy[i * d + j];
        }
        if (nx.requires_grad) {
          auto& gx = nx.ensure_grad();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = dy[i * d + j] * ng.data[j];
              mean_dxhat += dxh;
              mean_dxhat_xhat += dxh * xhat[i * d + j];
            }
            mean_dxhat *= inv_d;
            mean_dxhat_xhat *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = dy[i * d + j] * ng.data[j];
              gx[i * d + j] += rstd[i] * (dxh - mean_dxhat - xhat[i * d + j] * mean_dxhat_xhat);
            }
          }
        }
      });
}

namespace {

std::pair<std::size_t, std::size_t> rows_and_width(const Tensor& x, const char* op) {
  if (x.rank() == 0) throw DimensionError(std::string(op) + ": scalar input");
  const std::size_t n = x.shape().back();
  if (n == 0) throw DimensionError(std::string(op) + ": empty last axis");
  return {x.numel() / n, n};
}

}  // namespace

Tensor softmax(const Tensor& x) {
  const auto [rows, n] = rows_and_width(x, "softmax");
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  return make_result(x.shape(), std::move(out), {x.node()}, [rows, n](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * n;
      const double* dy = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  const auto [rows, n] = rows_and_width(x, "log_softmax");
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(in[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) o[j] = in[j] - lse;
  }
  return make_result(x.shape(), std::move(out), {x.node()}, [rows, n](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * n;
      const double* dy = self.grad.data() + r * n;
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += dy[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += dy[j] - std::exp(y[j]) * total;
    }
  });
}

Tensor masked_mean_pool(const Tensor& x, const Mask& mask) {
  require_rank(x, 2, "masked_mean_pool");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (mask.size() != n) {
    throw DimensionError("masked_mean_pool: mask length " + std::to_string(mask.size()) + " vs " +
                         shape_string(x.shape()));
  }
  const auto valid = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  if (valid == 0) throw EmptySequenceError("masked_mean_pool: empty sequence (every position masked)");
  const double inv = 1.0 / static_cast<double>(valid);
  std::vector<double> out(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    for (std::size_t j = 0; j < d; ++j) out[j] += x.data()[i * d + j];
  }
  for (auto& v : out) v *= inv;
  return make_result({d}, std::move(out), {x.node()}, [mask, n, d, inv](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      if (!mask[i]) continue;
      for (std::size_t j = 0; j < d; ++j) g[i * d + j] += self.grad[j] * inv;
    }
  });
}

Tensor l2_normalize(const Tensor& x) {
  double sq = 0.0;
  for (double v : x.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("l2_normalize: non-finite input (norm " + std::to_string(norm) + ")");
  if (!(norm > 0.0)) {
    throw ContractError("l2_normalize: degenerate input with norm " + std::to_string(norm));
  }
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] / norm;
  return make_result(x.shape(), std::move(out), {x.node()}, [norm](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    double dot = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) dot += self.data[i] * self.grad[i];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += (self.grad[i] - self.data[i] * dot) / norm;
  });
}

Tensor multi_head_self_attention(const Tensor& x, const Mask& mask, const AttentionWeights& w,
                                 std::size_t heads) {
  require_rank(x, 2, "multi_head_self_attention");
  const std::size_t n = x.dim(0), dm = x.dim(1);
  if (heads == 0 || dm % heads != 0) {
    throw ConfigError("multi_head_self_attention: model width " + std::to_string(dm) +
                      " not divisible by head count " + std::to_string(heads));
  }
  if (mask.size() != n) {
    throw DimensionError("multi_head_self_attention: mask length " + std::to_string(mask.size()) + " vs " +
                         shape_string(x.shape()));
  }
  const std::size_t dk = dm / heads;

  std::vector<double> bias(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (!mask[j]) bias[i * n + j] = kMaskedLogit;
  const Tensor key_bias = Tensor::from({n, n}, std::move(bias));

  const Tensor q = add_row_bias(matmul(x, w.w_q), w.b_q);
  const Tensor k = add_row_bias(matmul(x, w.w_k), w.b_k);
  const Tensor v = add_row_bias(matmul(x, w.w_v), w.b_v);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  std::vector<Tensor> outputs;
  outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = slice_cols(q, h * dk, dk);
    const Tensor kh = slice_cols(k, h * dk, dk);
    const Tensor vh = slice_cols(v, h * dk, dk);
    const Tensor logits = add(scale(matmul(qh, transpose(kh)), inv_sqrt_dk), key_bias);
    outputs.push_back(matmul(softmax(logits), vh));
  }
  return add_row_bias(matmul(concat_cols(outputs), w.w_o), w.b_o);
}

// --- gradient check ------------------------------------------------------------

double grad_check(const std::function<Tensor()>& f, std::span<Tensor> inputs, double h) {
  for (auto& t : inputs) {
    if (!t.requires_grad()) throw ContractError("grad_check: every input must require grad");
    t.zero_grad();
  }
  {
    Tensor out = f();
    out.backward();
  }
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());

  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double original = data[i];
      data[i] = original + h;
      const double plus = f().item();
      data[i] = original - h;
      const double minus = f().item();
      data[i] = original;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace hsproj
