#include "ecer/backbone.hpp"

#include <cmath>

#include "ecer/error.hpp"

namespace ecer {

void BackboneConfig::validate() const {
  require(!channels.empty(), ErrorCode::kConfig, "backbone needs at least one block");
  for (std::size_t i = 1; i < channels.size(); ++i) {
    require(channels[i] > channels[i - 1], ErrorCode::kConfig,
            "backbone channels must be strictly increasing");
  }
  require(input_size >> channels.size() >= 1, ErrorCode::kConfig,
          "input size " + std::to_string(input_size) + " too small for " +
              std::to_string(channels.size()) + " downsampling blocks");
  require(input_size % (std::size_t{1} << channels.size()) == 0, ErrorCode::kConfig,
          "input size must be divisible by 2^blocks");
  require(num_base_classes >= 1, ErrorCode::kConfig, "num_base_classes must be >= 1");
}

std::vector<std::pair<std::size_t, std::size_t>> BackboneConfig::spatial_dims() const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t s = input_size;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    s /= 2;
    out.emplace_back(s, s);
  }
  return out;
}

Backbone::Backbone(BackboneConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng(derive_seed(config_.seed, 0xBAC4B0E));
  std::size_t c_in = config_.in_channels;
  for (std::size_t c_out : config_.channels) {
    Block b;
    // He-style scaling for ReLU networks.
    const double std_dev = std::sqrt(2.0 / static_cast<double>(c_in * 9));
    std::vector<double> w(c_out * c_in * 9);
    for (double& x : w) x = rng.normal() * std_dev;
    b.conv_w = Tensor::from({c_out, c_in, 3, 3}, std::move(w), true);
    b.conv_b = Tensor::zeros({c_out});
    b.gamma = Tensor::full({1, c_out}, 1.0, true);
    b.beta = Tensor::zeros({1, c_out}, true);
    b.bn.running_mean.assign(c_out, 0.0);
    b.bn.running_var.assign(c_out, 1.0);
    blocks_.push_back(std::move(b));
    c_in = c_out;
  }
  head_ = nn::Linear(config_.feature_dim(), config_.num_base_classes, rng);
}

Tensor Backbone::run_block(std::size_t i, const Tensor& x, bool training,
                           ops::BatchNormState& bn) const {
  const auto& b = blocks_[i];
  auto y = ops::conv3x3(x, b.conv_w, b.conv_b);
  y = ops::batch_norm2d(y, b.gamma, b.beta, bn, training);
  return ops::max_pool2x2(ops::relu(y));
}

StageFeatures Backbone::run(const Tensor& input, std::size_t first_block, bool training,
                            std::vector<ops::BatchNormState>& states) const {
  require(first_block < blocks_.size(), ErrorCode::kInvalidArgument, "first_block out of range");
  require(input.rank() == 4, ErrorCode::kShapeMismatch,
          "backbone input must be [B, C, H, W], got " + shape_str(input.shape()));
  const auto dims = config_.spatial_dims();
  const std::size_t expect_c = first_block == 0 ? config_.in_channels : config_.channels[first_block - 1];
  const std::size_t expect_hw = first_block == 0 ? config_.input_size : dims[first_block - 1].first;
  require(input.dim(1) == expect_c && input.dim(2) == expect_hw && input.dim(3) == expect_hw,
          ErrorCode::kShapeMismatch,
          "backbone input " + shape_str(input.shape()) + " does not match config (expected [B, " +
              std::to_string(expect_c) + ", " + std::to_string(expect_hw) + ", " +
              std::to_string(expect_hw) + "])");
  StageFeatures out;
  out.batch = input.dim(0);
  Tensor x = input;
  for (std::size_t i = first_block; i < blocks_.size(); ++i) {
    x = run_block(i, x, training, states[i]);
    out.activations.push_back(x);
    out.maps.push_back(ops::nchw_to_rows(x));
    out.spatial_dims.push_back(dims[i]);
  }
  out.global_vec = ops::spatial_mean(x);
  return out;
}

StageFeatures Backbone::forward_all_stages(const Tensor& images, bool training) {
  std::vector<ops::BatchNormState> states;
  for (auto& b : blocks_) states.push_back(b.bn);
  auto out = run(images, 0, training, states);
  if (training) {
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].bn = states[i];
  }
  return out;
}

StageFeatures Backbone::infer(const Tensor& images) const { return infer_from(images, 0); }

StageFeatures Backbone::infer_from(const Tensor& input, std::size_t first_block) const {
  std::vector<ops::BatchNormState> states;
  for (const auto& b : blocks_) states.push_back(b.bn);
  return run(input, first_block, false, states);
}

Tensor Backbone::classify_base(const Tensor& global_vec) const {
  require(global_vec.rank() == 2 && global_vec.dim(1) == config_.feature_dim(),
          ErrorCode::kShapeMismatch,
          "classify_base expects [B, " + std::to_string(config_.feature_dim()) + "], got " +
              shape_str(global_vec.shape()));
  return head_(global_vec);
}

nn::ParamList Backbone::block_parameters(std::size_t i) const {
  const auto& b = blocks_.at(i);
  const auto p = "backbone.block" + std::to_string(i + 1);
  return {{p + ".conv.weight", b.conv_w}, {p + ".bn.gamma", b.gamma}, {p + ".bn.beta", b.beta}};
}

nn::ParamList Backbone::head_parameters() const {
  nn::ParamList out;
  head_.collect("backbone.head", out);
  return out;
}

nn::ParamList Backbone::parameters() const {
  nn::ParamList out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto b = block_parameters(i);
    out.insert(out.end(), b.begin(), b.end());
  }
  auto h = head_parameters();
  out.insert(out.end(), h.begin(), h.end());
  return out;
}

void Backbone::save_to(Checkpoint& ck) const {
  ck.add(parameters());
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto p = "backbone.block" + std::to_string(i + 1) + ".bn.";
    const auto& bn = blocks_[i].bn;
    ck.add(p + "running_mean", {bn.running_mean.size()}, bn.running_mean);
    ck.add(p + "running_var", {bn.running_var.size()}, bn.running_var);
  }
}

void Backbone::load_from(const Checkpoint& ck) {
  auto params = parameters();
  ck.load_into(params);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto p = "backbone.block" + std::to_string(i + 1) + ".bn.";
    auto& bn = blocks_[i].bn;
    const auto& m = ck.at(p + "running_mean");
    const auto& v = ck.at(p + "running_var");
    require(m.values.size() == bn.running_mean.size() && v.values.size() == bn.running_var.size(),
            ErrorCode::kShapeMismatch, "checkpoint normalization stats do not match block " +
                                           std::to_string(i + 1));
    bn.running_mean = m.values;
    bn.running_var = v.values;
  }
}

}  // namespace ecer
