#pragma once

// Multi-modality pre-training: base-class cross-entropy plus global and
// local image–caption contrastive terms, with caption embeddings mapped
// into the visual feature space by an adapter.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <json.hpp>

#include "ecer/backbone.hpp"
#include "ecer/data.hpp"
#include "ecer/nn.hpp"
#include "ecer/providers.hpp"

namespace ecer {

struct PretrainConfig {
  double lambda = 1.0;  // global contrastive weight
  double eta = 1.0;     // local contrastive weight
  double tau = 0.07;
  bool eq1_literal = false;
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  double lr = 1e-3;
  // Ablation switches. A disabled term is still computed and reported but
  // carries zero weight in the total.
  bool use_global = true;
  bool use_local = true;
  bool use_adapter = true;
  std::size_t adapter_hidden = 256;
  double leaky_slope = 0.1;

  void validate() const;
  double global_weight() const { return use_global ? lambda : 0.0; }
  double local_weight() const { return use_local ? eta : 0.0; }
};

/// cos(v, t). Throws kZeroVector if either is zero.
double global_similarity(std::span<const double> v, std::span<const double> t);

/// (1/HW) Σ_k cos(f_k, t) over the rows of `features` ([HW, C] row-major).
/// Zero rows contribute 0; their count goes to `zero_locations`.
double local_similarity(std::span<const double> features, std::size_t channels,
                        std::span<const double> t, std::size_t* zero_locations = nullptr);

/// sims[i][j] = cos(v_i, t_j). v, t: [B, C].
Tensor global_similarity_matrix(const Tensor& v, const Tensor& t);
/// sims[i][j] = (1/HW) Σ_k cos(f_ik, t_j). `rows` is [B·HW, C] grouped by image.
Tensor local_similarity_matrix(const Tensor& rows, std::size_t hw, const Tensor& t,
                               std::size_t* zero_locations = nullptr);

/// Symmetric image↔text InfoNCE over sims[B, B] (row i = image i, column j =
/// text j): mean over items of the image→text term plus mean over items of
/// the text→image term. `literal` drops the positive pair from each
/// denominator.
Tensor contrastive_loss(const Tensor& sims, double tau, bool literal);

/// Maps text embeddings [B, D_s] into visual space [B, C_N]. With the
/// adapter disabled a frozen seeded random projection stands in.
class TextAdapter {
 public:
  TextAdapter() = default;
  TextAdapter(std::size_t text_dim, std::size_t visual_dim, const PretrainConfig& config,
              std::uint64_t seed);

  Tensor operator()(const Tensor& text) const;
  std::size_t in_dim() const { return in_dim_; }
  std::size_t out_dim() const { return out_dim_; }
  bool trainable() const { return trainable_; }
  nn::ParamList parameters() const;

 private:
  std::size_t in_dim_ = 0;
  std::size_t out_dim_ = 0;
  bool trainable_ = true;
  nn::TwoLayer net_;
  Tensor projection_;  // frozen, when !trainable_
};

struct LossBreakdown {
  double ce = 0.0;
  double it_global = 0.0;
  double it_local = 0.0;
  double total = 0.0;
  std::size_t correct = 0;
  std::size_t count = 0;
  std::size_t zero_local_features = 0;
};

/// Builds the pre-training objective for one batch (no update).
/// images: [B, 3, H, W]; captions: [B, D_s]; labels: base-class indices.
std::pair<Tensor, LossBreakdown> pretrain_objective(Backbone& backbone, const TextAdapter& adapter,
                                                    const Tensor& images, const Tensor& captions,
                                                    std::span<const std::size_t> labels,
                                                    const PretrainConfig& config, bool training);

class Pretrainer {
 public:
  Pretrainer(Backbone& backbone, TextAdapter& adapter, const PretrainConfig& config);

  /// One optimizer update on backbone, CE head and adapter.
  LossBreakdown step(const Tensor& images, const Tensor& captions,
                     std::span<const std::size_t> labels);

 private:
  Backbone& backbone_;
  TextAdapter& adapter_;
  PretrainConfig config_;
  nn::Adam adam_;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double ce = 0.0;
  double it_global = 0.0;
  double it_local = 0.0;
  double total = 0.0;
  double base_train_acc = 0.0;
};

struct PretrainData {
  const Dataset* dataset = nullptr;
  SplitView base;
  /// Caption embedding for each image id.
  std::map<std::string, std::vector<double>> caption_vectors;
};

/// Embeds the caption of every base image. Missing captions are an error.
PretrainData prepare_pretrain_data(const Dataset& dataset, const CaptionStore& captions,
                                   EmbeddingProvider& embedder);

/// Runs `config.epochs` epochs. `on_epoch` sees each epoch's mean metrics.
std::vector<EpochMetrics> run_pretraining(Backbone& backbone, TextAdapter& adapter,
                                          const PretrainData& data, const PretrainConfig& config,
                                          std::uint64_t seed,
                                          const std::function<void(const EpochMetrics&)>& on_epoch = {});

}  // namespace ecer
