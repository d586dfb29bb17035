#pragma once

// Progressive visual-semantic aggregation: semantic-guided pattern
// extraction per backbone block, cross-block fusion, prototype calibration
// and the cosine episode classifier.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecer/checkpoint.hpp"
#include "ecer/nn.hpp"
#include "ecer/tensor.hpp"

namespace ecer {

struct PvsaConfig {
  double alpha = 0.2;
  double beta = 0.8;
  double tau = 0.1;  // classifier temperature
  std::size_t num_entities = 10;
  bool use_svpe = true;
  bool use_pc = true;
  bool use_entities = true;
  /// Number of trailing backbone blocks that run SVPE (1 = final block only).
  std::size_t num_stages = 4;
  bool raw_attention = false;
  bool entity_mean = false;
  double leaky_slope = 0.1;
  /// Start the semantic branch's last layer at zero so that C = α·f_s
  /// (the raw prototype up to scale) before fine-tuning.
  bool zero_init_output = true;

  void validate(std::size_t num_blocks) const;
  /// Indices of the blocks that run SVPE, ascending.
  std::vector<std::size_t> stage_blocks(std::size_t num_blocks) const;
  /// Entities per class actually fed to the model.
  std::size_t effective_entities() const { return use_svpe && use_entities ? num_entities : 0; }
  nlohmann::json to_json() const;
};

/// Scaled dot-product pooling of feature locations under a guiding vector.
/// s: [R, C]; maps: [G·hw, C]; row r attends to group r / rows_per_group.
/// Returns F' [R, C]. With `raw` the weights are the unnormalized dot
/// products averaged over locations instead of a softmax.
/// `weights` (optional) receives [R, hw] attention weights.
Tensor semantic_attention(const Tensor& s, const Tensor& maps, std::size_t hw,
                          std::size_t rows_per_group, bool raw = false,
                          std::vector<double>* weights = nullptr);

/// One SVPE block for a single semantic vector: s [1, C], F [HW, C] → P [1, C].
Tensor svpe_block(const Tensor& s, const Tensor& F, const nn::TwoLayer& fusion,
                  bool raw = false, std::vector<double>* weights = nullptr);

/// Prototype calibration for one class.
/// f_s [1, C], P_cls [1, C], P_ent [K, C] (K may be 0).
Tensor calibrate_prototype(const Tensor& f_s, const Tensor& P_cls, const Tensor& P_ent,
                           double alpha, double beta, const nn::TwoLayer& fusion,
                           const nn::Linear& fc, bool entity_mean = false);

/// Logits cos(q, C_j)/τ. query [M, C], prototypes [N, C]. Throws kZeroVector
/// on any zero row.
Tensor classify_logits(const Tensor& query, const Tensor& prototypes, double tau);
/// Softmax of classify_logits.
Tensor classify_query(const Tensor& query, const Tensor& prototypes, double tau);

struct EpisodeLoss {
  Tensor sum;  // Σ over queries of −log p[y]
  double mean = 0.0;
};
/// From log-probabilities [M, N].
EpisodeLoss episode_loss(const Tensor& log_probs, std::span<const std::size_t> labels);
/// Convenience for already-normalized probabilities.
double episode_loss_from_probs(std::span<const double> probs, std::size_t way,
                               std::span<const std::size_t> labels);

/// Semantic rows for a batch of classes: row c·(K+1) is the class embedding,
/// the next K rows its entities.
struct SemanticBatch {
  Tensor rows;  // [N·(K+1), D_s]
  std::size_t items_per_class = 1;
  std::size_t num_classes() const { return rows.dim(0) / items_per_class; }
};

/// Support-side visual inputs for N classes (already shot-averaged).
struct SupportFeatures {
  std::vector<Tensor> maps;  // per block [N·HW_i, C_i]
  std::vector<std::size_t> locations;  // HW_i
  Tensor f_s;  // [N, C_N]
};

struct ProgressiveOutput {
  std::vector<std::size_t> blocks;  // active block indices
  std::vector<Tensor> s;  // per active block [R, C_i]: guiding vectors
  std::vector<Tensor> P;  // per active block [R, C_i]
  std::vector<std::vector<double>> weights;  // per active block [R·HW_i]
};

struct PrototypeBundle {
  Tensor f_s;       // [N, C_N]
  Tensor P;         // [N·(K+1), C_N] fused patterns; row c·(K+1) is P_cls
  Tensor C;         // [N, C_N] calibrated prototypes
  std::size_t items_per_class = 1;
};

class PvsaModel {
 public:
  PvsaModel() = default;
  PvsaModel(std::vector<std::size_t> channels, std::size_t semantic_dim, PvsaConfig config,
            std::uint64_t seed);

  const PvsaConfig& config() const { return config_; }
  void set_config(const PvsaConfig& config);
  std::size_t semantic_dim() const { return semantic_dim_; }
  const std::vector<std::size_t>& channels() const { return channels_; }

  ProgressiveOutput run_progressive(const SupportFeatures& support, const SemanticBatch& sem,
                                    bool keep_weights = false) const;
  /// [R, C_i] per active block → [R, C_N].
  Tensor fuse_blocks(const std::vector<Tensor>& P, const std::vector<std::size_t>& blocks) const;
  /// f_s [N, C_N], fused patterns [N·(K+1), C_N] → C [N, C_N].
  Tensor calibrate(const Tensor& f_s, const Tensor& fused, std::size_t items_per_class) const;

  /// Full support-side path. With SVPE disabled C = f_s.
  PrototypeBundle prototypes(const SupportFeatures& support, const SemanticBatch& sem) const;

  nn::ParamList parameters() const;
  void save_to(Checkpoint& ck) const;
  void load_from(const Checkpoint& ck);

  // Component access for tests and diagnostics.
  struct Block {
    nn::Linear W;        // D_s → C_i
    nn::Linear U;        // C_{i-1} → C_i (unused for the first active block)
    nn::TwoLayer fusion; // 2·C_i → C_i
    nn::Linear to_final; // C_i → C_N
  };
  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  /// Fuse net over concatenated blocks, per number of active stages.
  nn::TwoLayer& block_fusion() { return block_fusion_; }
  nn::TwoLayer& pc_fusion() { return pc_fusion_; }
  nn::Linear& pc_fc() { return pc_fc_; }

 private:
  PvsaConfig config_;
  std::vector<std::size_t> channels_;
  std::size_t semantic_dim_ = 0;
  std::vector<Block> blocks_;
  nn::TwoLayer block_fusion_;
  nn::TwoLayer pc_fusion_;
  nn::Linear pc_fc_;
};

/// Per-block cosine maps between guiding vectors and feature locations,
/// min-max normalized to [0, 1] (constant grids become 0.5).
struct SimilarityGrid {
  std::size_t block = 0;
  std::string item;  // semantic item text
  std::size_t height = 0, width = 0;
  std::vector<double> raw;         // cosines before normalization
  std::vector<double> normalized;
};

std::vector<double> minmax_normalize(std::span<const double> values);

/// Grids for one image. `maps[i]` is [HW_i, C_i], `dims[i]` its (H, W);
/// `items` names the rows of `sem` (one class, K+1 items).
std::vector<SimilarityGrid> similarity_grids(const PvsaModel& model,
                                             const std::vector<Tensor>& maps,
                                             const std::vector<std::pair<std::size_t, std::size_t>>& dims,
                                             const Tensor& f_s, const SemanticBatch& sem,
                                             const std::vector<std::string>& items);

void write_grid_csv(const std::filesystem::path& path, const SimilarityGrid& grid);
void write_grid_pgm(const std::filesystem::path& path, const SimilarityGrid& grid);

}  // namespace ecer
