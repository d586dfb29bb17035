#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "ecer/checkpoint.hpp"
#include "ecer/nn.hpp"
#include "ecer/tensor.hpp"

namespace ecer {

struct BackboneConfig {
  std::vector<std::size_t> channels{16, 32, 64, 128};
  std::size_t input_size = 32;
  std::size_t in_channels = 3;
  std::size_t num_base_classes = 10;
  std::uint64_t seed = 0;

  void validate() const;
  /// (H_i, W_i) after each block.
  std::vector<std::pair<std::size_t, std::size_t>> spatial_dims() const;
  std::size_t feature_dim() const { return channels.back(); }
};

/// Per-block feature maps for a batch. Map i is stored as a 2-D tensor
/// [B·HW_i, C_i]; rows b·HW_i … (b+1)·HW_i − 1 belong to image b, i.e. the
/// logical [B, HW_i, C_i] layout flattened on the first two axes.
struct StageFeatures {
  std::size_t batch = 0;
  std::vector<Tensor> maps;
  std::vector<std::pair<std::size_t, std::size_t>> spatial_dims;
  /// [B, C_N]: spatial mean of the final block.
  Tensor global_vec;
  /// Raw block outputs [B, C_i, H_i, W_i].
  std::vector<Tensor> activations;

  std::size_t num_blocks() const { return maps.size(); }
  std::size_t locations(std::size_t block) const {
    return spatial_dims[block].first * spatial_dims[block].second;
  }
  std::size_t channels(std::size_t block) const { return maps[block].dim(1); }
  /// Logical [B, HW_i, C_i].
  Shape map_shape(std::size_t block) const {
    return {batch, locations(block), channels(block)};
  }
};

/// Convolutional encoder: each block is conv3x3 → batch norm → ReLU → 2×2
/// max pool, so spatial size halves while channels grow.
class Backbone {
 public:
  explicit Backbone(BackboneConfig config);

  const BackboneConfig& config() const { return config_; }

  /// images: [B, C_in, H, W]. Training mode normalizes with batch
  /// statistics and updates the running estimates.
  StageFeatures forward_all_stages(const Tensor& images, bool training);
  /// Evaluation-mode forward; never mutates state.
  StageFeatures infer(const Tensor& images) const;
  /// Runs blocks [first_block, N) on `input` (the output of block
  /// first_block − 1) in evaluation mode. Returned maps cover those blocks only.
  StageFeatures infer_from(const Tensor& input, std::size_t first_block) const;

  /// Base-class logits from global vectors [B, C_N].
  Tensor classify_base(const Tensor& global_vec) const;

  nn::ParamList parameters() const;
  nn::ParamList block_parameters(std::size_t block) const;
  nn::ParamList head_parameters() const;

  void save_to(Checkpoint& ck) const;
  void load_from(const Checkpoint& ck);

 private:
  struct Block {
    Tensor conv_w;
    Tensor conv_b;  // frozen zeros; normalization supplies the shift
    Tensor gamma;
    Tensor beta;
    ops::BatchNormState bn;
  };

  Tensor run_block(std::size_t i, const Tensor& x, bool training, ops::BatchNormState& bn) const;
  StageFeatures run(const Tensor& input, std::size_t first_block, bool training,
                    std::vector<ops::BatchNormState>& states) const;

  BackboneConfig config_;
  std::vector<Block> blocks_;
  nn::Linear head_;
};

}  // namespace ecer
