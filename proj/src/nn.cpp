#include "ecer/nn.hpp"

#include <cmath>

#include "ecer/error.hpp"

namespace ecer::nn {

Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight_(init_uniform({in, out}, in, rng)), bias_(init_uniform({1, out}, in, rng)) {}

Tensor Linear::operator()(const Tensor& x) const {
  return ops::add_row(ops::matmul(x, weight_), bias_);
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight_});
  out.push_back({prefix + ".bias", bias_});
}

TwoLayer::TwoLayer(std::size_t in, std::size_t hidden, std::size_t out, double slope, Rng& rng)
    : first_(in, hidden, rng), second_(hidden, out, rng), slope_(slope) {}

Tensor TwoLayer::operator()(const Tensor& x) const {
  return second_(ops::leaky_relu(first_(x), slope_));
}

void TwoLayer::collect(const std::string& prefix, ParamList& out) const {
  first_.collect(prefix + ".0", out);
  second_.collect(prefix + ".1", out);
}

Adam::Adam(ParamList params, AdamOptions options) : params_(std::move(params)), opt_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k].tensor;
    const auto g = p.grad();
    if (g.empty()) continue;
    auto w = p.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] + opt_.weight_decay * w[i];
      m[i] = opt_.beta1 * m[i] + (1 - opt_.beta1) * gi;
      v[i] = opt_.beta2 * v[i] + (1 - opt_.beta2) * gi * gi;
      w[i] -= opt_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt_.eps);
    }
  }
}

std::vector<std::vector<double>> snapshot(const ParamList& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor.to_vector());
  return out;
}

void restore(ParamList& params, const std::vector<std::vector<double>>& values) {
  require(values.size() == params.size(), ErrorCode::kShapeMismatch, "snapshot size mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto dst = params[k].tensor.mutable_data();
    require(dst.size() == values[k].size(), ErrorCode::kShapeMismatch,
            "snapshot size mismatch for " + params[k].name);
    std::copy(values[k].begin(), values[k].end(), dst.begin());
  }
}

}  // namespace ecer::nn
