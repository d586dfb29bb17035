#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ecer/rng.hpp"
#include "ecer/tensor.hpp"

namespace ecer::nn {

/// Named handle to a trainable tensor. Tensors share storage on copy, so a
/// ParamList aliases the module's own parameters.
struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedTensor>;

/// Fan-in scaled uniform init in [-1/√fan_in, 1/√fan_in].
Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng);

class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng);

  /// x: [m, in] → [m, out].
  Tensor operator()(const Tensor& x) const;

  std::size_t in_features() const { return weight_.dim(0); }
  std::size_t out_features() const { return weight_.dim(1); }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

  void collect(const std::string& prefix, ParamList& out) const;

 private:
  Tensor weight_;  // [in, out]
  Tensor bias_;    // [1, out]
};

/// linear → leaky ReLU → linear.
class TwoLayer {
 public:
  TwoLayer() = default;
  TwoLayer(std::size_t in, std::size_t hidden, std::size_t out, double slope, Rng& rng);

  Tensor operator()(const Tensor& x) const;

  Linear& first() { return first_; }
  Linear& second() { return second_; }
  const Linear& first() const { return first_; }
  const Linear& second() const { return second_; }
  double slope() const { return slope_; }

  void collect(const std::string& prefix, ParamList& out) const;

 private:
  Linear first_;
  Linear second_;
  double slope_ = 0.1;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class Adam {
 public:
  Adam(ParamList params, AdamOptions options);

  void zero_grad();
  /// Applies one update from the accumulated gradients. Parameters with no
  /// gradient this step are left untouched.
  void step();
  std::int64_t steps() const { return t_; }

 private:
  ParamList params_;
  AdamOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

/// Copies parameter values (for snapshots / best-model tracking).
std::vector<std::vector<double>> snapshot(const ParamList& params);
void restore(ParamList& params, const std::vector<std::vector<double>>& values);

}  // namespace ecer::nn
