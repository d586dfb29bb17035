#include "ecer/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "ecer/error.hpp"

namespace ecer {

namespace {

using detail::Node;
using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const MatR>;
using MMap = Eigen::Map<MatR>;

thread_local bool t_grad_enabled = true;

void check(bool cond, const std::string& what) {
  if (!cond) fail(ErrorCode::kShapeMismatch, what);
}

std::size_t rows_of(const Tensor& t) {
  check(t.rank() == 2, "expected a 2-D tensor, got " + shape_str(t.shape()));
  return t.dim(0);
}

std::size_t cols_of(const Tensor& t) {
  check(t.rank() == 2, "expected a 2-D tensor, got " + shape_str(t.shape()));
  return t.dim(1);
}

Tensor make(Shape shape, std::vector<double> value,
            std::initializer_list<Tensor> parents,
            std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(fn);
  }
  return Tensor(std::move(node));
}

Tensor make_many(Shape shape, std::vector<double> value,
                 const std::vector<Tensor>& parents,
                 std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(fn);
  }
  return Tensor(std::move(node));
}

// Parent gradient buffer, or nullptr if that parent does not need one.
std::vector<double>* pgrad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  return &p.ensure_grad();
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    fail(ErrorCode::kShapeMismatch, "shape " + shape_str(shape) + " does not hold " +
                                        std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::row(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return from({1, n}, std::move(values), requires_grad);
}

Tensor Tensor::scalar(double v) { return from({1, 1}, {v}); }

double Tensor::item() const {
  check(numel() == 1, "item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

void Tensor::zero_grad() {
  if (node_) node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::detach() const {
  return from(node_->shape, node_->value, false);
}

Tensor Tensor::clone(bool requires_grad) const {
  return from(node_->shape, node_->value, requires_grad);
}

void Tensor::backward() const {
  check(numel() == 1, "backward() without a seed needs a single-element tensor");
  const double one = 1.0;
  backward(std::span<const double>(&one, 1));
}

void Tensor::backward(std::span<const double> seed) const {
  check(seed.size() == numel(), "backward seed size mismatch");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  auto& g = node_->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

namespace ops {

Tensor add(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return make(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = pgrad(self, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  return make(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = pgrad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return make(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = pgrad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * c;
  return make(a.shape(), std::move(out), {a}, [c](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * c;
    }
  });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = a.at(i);
    out[i] = v > 0.0 ? v : slope * v;
  }
  return make(a.shape(), std::move(out), {a}, [slope](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      const auto& av = self.parents[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i) {
        (*g)[i] += self.grad[i] * (av[i] > 0.0 ? 1.0 : slope);
      }
    }
  });
}

Tensor relu(const Tensor& a) { return leaky_relu(a, 0.0); }

Tensor add_row(const Tensor& a, const Tensor& b) {
  const std::size_t m = rows_of(a), n = cols_of(a);
  check(b.numel() == n, "add_row: bias of " + std::to_string(b.numel()) +
                            " for " + std::to_string(n) + " columns");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.at(i * n + j) + b.at(j);
  return make(a.shape(), std::move(out), {a, b}, [m, n](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = pgrad(self, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[j] += self.grad[i * n + j];
    }
  });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  check(s.numel() == 1, "mul_scalar: scalar operand has " + std::to_string(s.numel()) + " values");
  const double c = s.item();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * c;
  return make(a.shape(), std::move(out), {a, s}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    const double c = self.parents[1]->value[0];
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * c;
    }
    if (auto* g = pgrad(self, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < av.size(); ++i) acc += self.grad[i] * av[i];
      (*g)[0] += acc;
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = rows_of(a), k = cols_of(a), n = cols_of(b);
  check(rows_of(b) == k, "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n);
  MMap(out.data(), m, n).noalias() =
      CMap(a.data().data(), m, k) * CMap(b.data().data(), k, n);
  return make({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    CMap dc(self.grad.data(), m, n);
    if (auto* g = pgrad(self, 0)) {
      MMap(g->data(), m, k).noalias() +=
          dc * CMap(self.parents[1]->value.data(), k, n).transpose();
    }
    if (auto* g = pgrad(self, 1)) {
      MMap(g->data(), k, n).noalias() +=
          CMap(self.parents[0]->value.data(), m, k).transpose() * dc;
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const std::size_t m = rows_of(a), k = cols_of(a), n = rows_of(b);
  check(cols_of(b) == k, "matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  std::vector<double> out(m * n);
  MMap(out.data(), m, n).noalias() =
      CMap(a.data().data(), m, k) * CMap(b.data().data(), n, k).transpose();
  return make({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    CMap dc(self.grad.data(), m, n);
    if (auto* g = pgrad(self, 0)) {
      MMap(g->data(), m, k).noalias() += dc * CMap(self.parents[1]->value.data(), n, k);
    }
    if (auto* g = pgrad(self, 1)) {
      MMap(g->data(), n, k).noalias() +=
          dc.transpose() * CMap(self.parents[0]->value.data(), m, k);
    }
  });
}

Tensor transpose(const Tensor& a) {
  const std::size_t m = rows_of(a), n = cols_of(a);
  std::vector<double> out(m * n);
  MMap(out.data(), n, m) = CMap(a.data().data(), m, n).transpose();
  return make({n, m}, std::move(out), {a}, [m, n](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      MMap(g->data(), m, n) += CMap(self.grad.data(), n, m).transpose();
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  check(shape_numel(shape) == a.numel(),
        "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return make(std::move(shape), a.to_vector(), {a}, [](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_cols: no inputs");
  const std::size_t m = rows_of(parts[0]);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    check(rows_of(p) == m, "concat_cols: row count mismatch");
    widths.push_back(cols_of(p));
    total += widths.back();
  }
  std::vector<double> out(m * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].data();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(src.begin() + i * widths[k], widths[k], out.begin() + i * total + off);
    off += widths[k];
  }
  return make_many({m, total}, std::move(out), parts, [m, total, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (auto* g = pgrad(self, k)) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j)
            (*g)[i * widths[k] + j] += self.grad[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_rows: no inputs");
  const std::size_t n = cols_of(parts[0]);
  std::size_t m = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    check(cols_of(p) == n, "concat_rows: column count mismatch");
    m += rows_of(p);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return make_many({m, n}, std::move(out), parts, [](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const std::size_t len = self.parents[k]->value.size();
      if (auto* g = pgrad(self, k)) {
        for (std::size_t i = 0; i < len; ++i) (*g)[i] += self.grad[off + i];
      }
      off += len;
    }
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  const std::size_t m = rows_of(a), n = cols_of(a);
  check(begin <= end && end <= m, "slice_rows out of range");
  std::vector<double> out(a.data().begin() + begin * n, a.data().begin() + end * n);
  return make({end - begin, n}, std::move(out), {a}, [begin, n](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[begin * n + i] += self.grad[i];
    }
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  const std::size_t m = rows_of(a), n = cols_of(a);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * n);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    check(idx[r] < m, "gather_rows index out of range");
    std::copy_n(a.data().begin() + idx[r] * n, n, out.begin() + r * n);
  }
  return make({idx.size(), n}, std::move(out), {a}, [idx, n](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < n; ++j) (*g)[idx[r] * n + j] += self.grad[r * n + j];
    }
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return make({1, 1}, {acc}, {a}, [](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (double& v : *g) v += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_rows(const Tensor& a) {
  const std::size_t m = rows_of(a), n = cols_of(a);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a.at(i * n + j);
  return make({1, n}, std::move(out), {a}, [m, n](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += self.grad[j];
    }
  });
}

Tensor mean_rows(const Tensor& a) {
  return scale(sum_rows(a), 1.0 / static_cast<double>(rows_of(a)));
}

Tensor group_mean_rows(const Tensor& a, std::size_t group) {
  const std::size_t m = rows_of(a), n = cols_of(a);
  check(group > 0 && m % group == 0, "group_mean_rows: rows not divisible by group");
  const std::size_t groups = m / group;
  const double inv = 1.0 / static_cast<double>(group);
  std::vector<double> out(groups * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[(i / group) * n + j] += a.at(i * n + j) * inv;
  return make({groups, n}, std::move(out), {a}, [m, n, group, inv](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          (*g)[i * n + j] += self.grad[(i / group) * n + j] * inv;
    }
  });
}

Tensor l2_normalize_rows(const Tensor& a, std::size_t* zero_rows) {
  const std::size_t m = rows_of(a), n = cols_of(a);
  std::vector<double> norms(m);
  std::vector<double> out(a.numel(), 0.0);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a.at(i * n + j) * a.at(i * n + j);
    norms[i] = std::sqrt(s);
    if (norms[i] == 0.0) {
      ++zeros;
      continue;
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.at(i * n + j) / norms[i];
  }
  if (zero_rows) *zero_rows = zeros;
  return make(a.shape(), std::move(out), {a}, [m, n, norms](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        if (norms[i] == 0.0) continue;
        const double* y = self.value.data() + i * n;
        const double* dy = self.grad.data() + i * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += (dy[j] - y[j] * dot) / norms[i];
      }
    }
  });
}

Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
  return matmul_nt(l2_normalize_rows(a), l2_normalize_rows(b));
}

Tensor softmax_rows(const Tensor& a) {
  const std::size_t m = rows_of(a), n = cols_of(a);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, a.at(i * n + j));
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += out[i * n + j] = std::exp(a.at(i * n + j) - mx);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= s;
  }
  return make(a.shape(), std::move(out), {a}, [m, n](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        const double* y = self.value.data() + i * n;
        const double* dy = self.grad.data() + i * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += y[j] * (dy[j] - dot);
      }
    }
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  const std::size_t m = rows_of(a), n = cols_of(a);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, a.at(i * n + j));
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(a.at(i * n + j) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.at(i * n + j) - lse;
  }
  return make(a.shape(), std::move(out), {a}, [m, n](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        const double* y = self.value.data() + i * n;
        const double* dy = self.grad.data() + i * n;
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += dy[j];
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += dy[j] - std::exp(y[j]) * s;
      }
    }
  });
}

Tensor nll_sum(const Tensor& logp, std::span<const std::size_t> labels) {
  const std::size_t m = rows_of(logp), n = cols_of(logp);
  check(labels.size() == m, "nll_sum: label count mismatch");
  std::vector<std::size_t> y(labels.begin(), labels.end());
  double acc = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (y[i] >= n) fail(ErrorCode::kInvalidArgument, "label " + std::to_string(y[i]) + " out of range");
    acc -= logp.at(i * n + y[i]);
  }
  return make({1, 1}, {acc}, {logp}, [y, n](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < y.size(); ++i) (*g)[i * n + y[i]] -= self.grad[0];
    }
  });
}

namespace {

// col[(c·9 + ky·3 + kx), h·W + w] = x[c, h + ky - 1, w + kx - 1] (zero padded).
void im2col3x3(const double* x, std::size_t c_in, std::size_t h, std::size_t w, double* col) {
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < c_in; ++c)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        double* dst = col + (c * 9 + ky * 3 + kx) * hw;
        const double* src = x + c * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + static_cast<long>(ky) - 1;
          double* drow = dst + y * w;
          if (sy < 0 || sy >= static_cast<long>(h)) {
            std::fill_n(drow, w, 0.0);
            continue;
          }
          for (std::size_t xx = 0; xx < w; ++xx) {
            const long sx = static_cast<long>(xx) + static_cast<long>(kx) - 1;
            drow[xx] = (sx < 0 || sx >= static_cast<long>(w)) ? 0.0 : src[sy * w + sx];
          }
        }
      }
}

void col2im3x3(const double* col, std::size_t c_in, std::size_t h, std::size_t w, double* x) {
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < c_in; ++c)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const double* src = col + (c * 9 + ky * 3 + kx) * hw;
        double* dst = x + c * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + static_cast<long>(ky) - 1;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const long sx = static_cast<long>(xx) + static_cast<long>(kx) - 1;
            if (sx < 0 || sx >= static_cast<long>(w)) continue;
            dst[sy * w + sx] += src[y * w + xx];
          }
        }
      }
}

}  // namespace

Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& bias) {
  check(x.rank() == 4, "conv3x3: input must be [B, C, H, W], got " + shape_str(x.shape()));
  check(w.rank() == 4 && w.dim(2) == 3 && w.dim(3) == 3 && w.dim(1) == x.dim(1),
        "conv3x3: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), c_in = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t c_out = w.dim(0), hw = h * wd, kdim = c_in * 9;
  check(bias.numel() == c_out, "conv3x3: bias size");

  auto cols = std::make_shared<std::vector<double>>(b * kdim * hw);
  std::vector<double> out(b * c_out * hw);
  CMap wm(w.data().data(), c_out, kdim);
  for (std::size_t i = 0; i < b; ++i) {
    double* col = cols->data() + i * kdim * hw;
    im2col3x3(x.data().data() + i * c_in * hw, c_in, h, wd, col);
    MMap o(out.data() + i * c_out * hw, c_out, hw);
    o.noalias() = wm * CMap(col, kdim, hw);
    for (std::size_t c = 0; c < c_out; ++c) o.row(c).array() += bias.at(c);
  }
  return make({b, c_out, h, wd}, std::move(out), {x, w, bias},
              [cols, b, c_in, c_out, h, wd, hw, kdim](Node& self) {
                auto* gx = pgrad(self, 0);
                auto* gw = pgrad(self, 1);
                auto* gb = pgrad(self, 2);
                CMap wm(self.parents[1]->value.data(), c_out, kdim);
                std::vector<double> dcol(gx ? kdim * hw : 0);
                for (std::size_t i = 0; i < b; ++i) {
                  CMap dout(self.grad.data() + i * c_out * hw, c_out, hw);
                  const double* col = cols->data() + i * kdim * hw;
                  if (gw) MMap(gw->data(), c_out, kdim).noalias() += dout * CMap(col, kdim, hw).transpose();
                  if (gb) {
                    for (std::size_t c = 0; c < c_out; ++c) (*gb)[c] += dout.row(c).sum();
                  }
                  if (gx) {
                    MMap(dcol.data(), kdim, hw).noalias() = wm.transpose() * dout;
                    col2im3x3(dcol.data(), c_in, h, wd, gx->data() + i * c_in * hw);
                  }
                }
              });
}

Tensor max_pool2x2(const Tensor& x) {
  check(x.rank() == 4, "max_pool2x2: input must be [B, C, H, W]");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  check(h >= 2 && w >= 2, "max_pool2x2: spatial dims too small");
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<double> out(b * c * oh * ow);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t p = 0; p < b * c; ++p) {
    const double* src = x.data().data() + p * h * w;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        std::size_t best = (2 * y) * w + 2 * xx;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (2 * y + dy) * w + 2 * xx + dx;
            if (src[idx] > src[best]) best = idx;
          }
        const std::size_t o = p * oh * ow + y * ow + xx;
        out[o] = src[best];
        arg[o] = p * h * w + best;
      }
  }
  return make({b, c, oh, ow}, std::move(out), {x}, [arg = std::move(arg)](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < arg.size(); ++i) (*g)[arg[i]] += self.grad[i];
    }
  });
}

Tensor nchw_to_rows(const Tensor& x) {
  check(x.rank() == 4, "nchw_to_rows: input must be [B, C, H, W]");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < b; ++i)
    MMap(out.data() + i * hw * c, hw, c) = CMap(x.data().data() + i * c * hw, c, hw).transpose();
  return make({b * hw, c}, std::move(out), {x}, [b, c, hw](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < b; ++i)
        MMap(g->data() + i * c * hw, c, hw) += CMap(self.grad.data() + i * hw * c, hw, c).transpose();
    }
  });
}

Tensor spatial_mean(const Tensor& x) {
  check(x.rank() == 4, "spatial_mean: input must be [B, C, H, W]");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const double inv = 1.0 / static_cast<double>(hw);
  std::vector<double> out(b * c, 0.0);
  for (std::size_t p = 0; p < b * c; ++p) {
    double s = 0.0;
    for (std::size_t k = 0; k < hw; ++k) s += x.at(p * hw + k);
    out[p] = s * inv;
  }
  return make({b, c}, std::move(out), {x}, [hw, inv](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i / hw] * inv;
    }
  });
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    BatchNormState& state, bool training) {
  check(x.rank() == 4, "batch_norm2d: input must be [B, C, H, W]");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  check(gamma.numel() == c && beta.numel() == c, "batch_norm2d: affine size");
  if (state.running_mean.size() != c) {
    state.running_mean.assign(c, 0.0);
    state.running_var.assign(c, 1.0);
  }
  const double count = static_cast<double>(b * hw);
  std::vector<double> mu(c), inv_std(c);
  if (training) {
    check(b * hw > 1, "batch_norm2d: need more than one value per channel in training");
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0, ss = 0.0;
      for (std::size_t i = 0; i < b; ++i) {
        const double* p = x.data().data() + (i * c + ch) * hw;
        for (std::size_t k = 0; k < hw; ++k) s += p[k];
      }
      mu[ch] = s / count;
      for (std::size_t i = 0; i < b; ++i) {
        const double* p = x.data().data() + (i * c + ch) * hw;
        for (std::size_t k = 0; k < hw; ++k) ss += (p[k] - mu[ch]) * (p[k] - mu[ch]);
      }
      const double var = ss / count;
      inv_std[ch] = 1.0 / std::sqrt(var + state.eps);
      state.running_mean[ch] = (1 - state.momentum) * state.running_mean[ch] + state.momentum * mu[ch];
      state.running_var[ch] = (1 - state.momentum) * state.running_var[ch] +
                              state.momentum * ss / std::max(count - 1.0, 1.0);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = state.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(state.running_var[ch] + state.eps);
    }
  }
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) {
        const double xh = (x.at(base + k) - mu[ch]) * inv_std[ch];
        (*xhat)[base + k] = xh;
        out[base + k] = gamma.at(ch) * xh + beta.at(ch);
      }
    }
  return make(x.shape(), std::move(out), {x, gamma, beta},
              [xhat, inv_std, b, c, hw, count, training](Node& self) {
                auto* gx = pgrad(self, 0);
                auto* gg = pgrad(self, 1);
                auto* gbeta = pgrad(self, 2);
                const auto& gam = self.parents[1]->value;
                for (std::size_t ch = 0; ch < c; ++ch) {
                  double sdy = 0.0, sdyx = 0.0;
                  for (std::size_t i = 0; i < b; ++i) {
                    const std::size_t base = (i * c + ch) * hw;
                    for (std::size_t k = 0; k < hw; ++k) {
                      sdy += self.grad[base + k];
                      sdyx += self.grad[base + k] * (*xhat)[base + k];
                    }
                  }
                  if (gg) (*gg)[ch] += sdyx;
                  if (gbeta) (*gbeta)[ch] += sdy;
                  if (!gx) continue;
                  const double gs = gam[ch] * inv_std[ch];
                  for (std::size_t i = 0; i < b; ++i) {
                    const std::size_t base = (i * c + ch) * hw;
                    for (std::size_t k = 0; k < hw; ++k) {
                      if (training) {
                        (*gx)[base + k] += gs * (self.grad[base + k] - sdy / count -
                                                 (*xhat)[base + k] * sdyx / count);
                      } else {
                        (*gx)[base + k] += gs * self.grad[base + k];
                      }
                    }
                  }
                }
              });
}

Tensor custom(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
              std::function<void(Node&)> backward) {
  check(shape_numel(shape) == value.size(), "custom op: shape does not match values");
  return make_many(std::move(shape), std::move(value), inputs, std::move(backward));
}

}  // namespace ops
}  // namespace ecer
