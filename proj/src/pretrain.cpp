#include "ecer/pretrain.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ecer/error.hpp"
#include "ecer/rng.hpp"

namespace ecer {

void PretrainConfig::validate() const {
  require(tau > 0.0, ErrorCode::kConfig, "pretrain.tau must be > 0");
  require(lambda >= 0.0 && eta >= 0.0, ErrorCode::kConfig, "pretrain.lambda/eta must be >= 0");
  require(batch_size >= 2, ErrorCode::kConfig, "pretrain.batch_size must be >= 2");
  require(lr > 0.0, ErrorCode::kConfig, "pretrain.lr must be > 0");
}

namespace {

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

double global_similarity(std::span<const double> v, std::span<const double> t) {
  require(v.size() == t.size(), ErrorCode::kShapeMismatch, "global_similarity: dimension mismatch");
  const double nv = norm(v), nt = norm(t);
  if (nv == 0.0 || nt == 0.0) fail(ErrorCode::kZeroVector, "global_similarity: zero vector");
  double d = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) d += v[i] * t[i];
  return std::clamp(d / (nv * nt), -1.0, 1.0);
}

double local_similarity(std::span<const double> features, std::size_t channels,
                        std::span<const double> t, std::size_t* zero_locations) {
  require(channels == t.size() && channels > 0 && features.size() % channels == 0 &&
              !features.empty(),
          ErrorCode::kShapeMismatch, "local_similarity: shape mismatch");
  const double nt = norm(t);
  if (nt == 0.0) fail(ErrorCode::kZeroVector, "local_similarity: zero text vector");
  const std::size_t hw = features.size() / channels;
  std::size_t zeros = 0;
  double acc = 0.0;
  for (std::size_t k = 0; k < hw; ++k) {
    const auto f = features.subspan(k * channels, channels);
    const double nf = norm(f);
    if (nf == 0.0) {
      ++zeros;
      continue;
    }
    double d = 0.0;
    for (std::size_t i = 0; i < channels; ++i) d += f[i] * t[i];
    acc += d / (nf * nt);
  }
  if (zero_locations) *zero_locations = zeros;
  return acc / static_cast<double>(hw);
}

Tensor global_similarity_matrix(const Tensor& v, const Tensor& t) {
  return ops::cosine_matrix(v, t);
}

Tensor local_similarity_matrix(const Tensor& rows, std::size_t hw, const Tensor& t,
                               std::size_t* zero_locations) {
  // mean_k cos(f_k, t) = (mean_k f̂_k) · t̂
  auto unit = ops::l2_normalize_rows(rows, zero_locations);
  auto pooled = ops::group_mean_rows(unit, hw);
  return ops::matmul_nt(pooled, ops::l2_normalize_rows(t));
}

Tensor contrastive_loss(const Tensor& sims, double tau, bool literal) {
  require(sims.rank() == 2 && sims.dim(0) == sims.dim(1), ErrorCode::kShapeMismatch,
          "contrastive_loss: sims must be square");
  const std::size_t b = sims.dim(0);
  require(b >= 2, ErrorCode::kInvalidArgument, "contrastive_loss: batch must hold >= 2 pairs");
  require(tau > 0.0, ErrorCode::kInvalidArgument, "contrastive_loss: tau must be > 0");

  const auto s = sims.data();
  // d[i*b+j] = dL/d sims[i][j]
  std::vector<double> d(b * b, 0.0);
  const double inv_b = 1.0 / static_cast<double>(b);
  double loss = 0.0;
  std::vector<double> w(b);
  for (int direction = 0; direction < 2; ++direction) {
    for (std::size_t i = 0; i < b; ++i) {
      // direction 0: row i (image i vs all texts); 1: column i.
      auto at = [&](std::size_t j) { return direction == 0 ? s[i * b + j] / tau : s[j * b + i] / tau; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < b; ++j) {
        if (literal && j == i) continue;
        mx = std::max(mx, at(j));
      }
      double z = 0.0;
      for (std::size_t j = 0; j < b; ++j) {
        w[j] = (literal && j == i) ? 0.0 : std::exp(at(j) - mx);
        z += w[j];
      }
      loss += inv_b * (mx + std::log(z) - at(i));
      for (std::size_t j = 0; j < b; ++j) {
        const double g = inv_b * (w[j] / z - (j == i ? 1.0 : 0.0)) / tau;
        d[direction == 0 ? i * b + j : j * b + i] += g;
      }
    }
  }
  return ops::custom({1, 1}, {loss}, {sims}, [d = std::move(d)](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < d.size(); ++i) g[i] += self.grad[0] * d[i];
  });
}

TextAdapter::TextAdapter(std::size_t text_dim, std::size_t visual_dim, const PretrainConfig& config,
                         std::uint64_t seed)
    : in_dim_(text_dim), out_dim_(visual_dim), trainable_(config.use_adapter) {
  Rng rng(derive_seed(seed, 0xADA97E5));
  if (trainable_) {
    net_ = nn::TwoLayer(text_dim, config.adapter_hidden, visual_dim, config.leaky_slope, rng);
  } else {
    std::vector<double> w(text_dim * visual_dim);
    for (double& x : w) x = rng.normal() / std::sqrt(static_cast<double>(visual_dim));
    projection_ = Tensor::from({text_dim, visual_dim}, std::move(w));
  }
}

Tensor TextAdapter::operator()(const Tensor& text) const {
  require(text.rank() == 2 && text.dim(1) == in_dim_, ErrorCode::kShapeMismatch,
          "adapter expects [B, " + std::to_string(in_dim_) + "] text embeddings, got " +
              shape_str(text.shape()));
  return trainable_ ? net_(text) : ops::matmul(text, projection_);
}

nn::ParamList TextAdapter::parameters() const {
  nn::ParamList out;
  if (trainable_) net_.collect("adapter", out);
  return out;
}

std::pair<Tensor, LossBreakdown> pretrain_objective(Backbone& backbone, const TextAdapter& adapter,
                                                    const Tensor& images, const Tensor& captions,
                                                    std::span<const std::size_t> labels,
                                                    const PretrainConfig& config, bool training) {
  const std::size_t b = images.dim(0);
  require(captions.rank() == 2 && captions.dim(0) == b, ErrorCode::kMissingCaption,
          "pretrain batch: every image needs a caption embedding");
  require(labels.size() == b, ErrorCode::kShapeMismatch, "pretrain batch: label count mismatch");
  require(adapter.out_dim() == backbone.config().feature_dim(), ErrorCode::kShapeMismatch,
          "adapter output dim must equal the backbone feature dim");

  auto feats = backbone.forward_all_stages(images, training);
  auto logits = backbone.classify_base(feats.global_vec);
  auto ce = ops::scale(ops::nll_sum(ops::log_softmax_rows(logits), labels), 1.0 / static_cast<double>(b));
  auto text = adapter(captions);

  LossBreakdown lb;
  auto g = contrastive_loss(global_similarity_matrix(feats.global_vec, text), config.tau, config.eq1_literal);
  const std::size_t last = feats.num_blocks() - 1;
  auto l = contrastive_loss(
      local_similarity_matrix(feats.maps[last], feats.locations(last), text, &lb.zero_local_features),
      config.tau, config.eq1_literal);
  auto total = ops::add(ops::add(ce, ops::scale(g, config.global_weight())),
                        ops::scale(l, config.local_weight()));

  lb.ce = ce.item();
  lb.it_global = g.item();
  lb.it_local = l.item();
  lb.total = total.item();
  lb.count = b;
  const std::size_t n = logits.dim(1);
  for (std::size_t i = 0; i < b; ++i) {
    const auto row = logits.data().subspan(i * n, n);
    const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    lb.correct += pred == labels[i];
  }
  return {total, lb};
}

Pretrainer::Pretrainer(Backbone& backbone, TextAdapter& adapter, const PretrainConfig& config)
    : backbone_(backbone),
      adapter_(adapter),
      config_(config),
      adam_(
          [&] {
            auto p = backbone.parameters();
            auto a = adapter.parameters();
            p.insert(p.end(), a.begin(), a.end());
            return p;
          }(),
          nn::AdamOptions{.lr = config.lr}) {
  config_.validate();
}

LossBreakdown Pretrainer::step(const Tensor& images, const Tensor& captions,
                               std::span<const std::size_t> labels) {
  adam_.zero_grad();
  auto [loss, lb] = pretrain_objective(backbone_, adapter_, images, captions, labels, config_, true);
  loss.backward();
  adam_.step();
  if (lb.zero_local_features > 0) {
    spdlog::debug("{} zero local feature vector(s) contributed cosine 0", lb.zero_local_features);
  }
  return lb;
}

PretrainData prepare_pretrain_data(const Dataset& dataset, const CaptionStore& captions,
                                   EmbeddingProvider& embedder) {
  PretrainData data;
  data.dataset = &dataset;
  data.base = dataset.split("base");
  require(data.base.num_classes() == dataset.manifest().splits.base.size(), ErrorCode::kUnknownClass,
          "base split references unknown classes");
  const auto ids = data.base.all_image_ids();
  std::vector<std::string> missing;
  for (const auto& id : ids) {
    if (!captions.contains(id)) missing.push_back(id);
  }
  if (!missing.empty()) {
    fail(ErrorCode::kMissingCaption, std::to_string(missing.size()) +
                                         " base image(s) have no caption, first: " + missing.front());
  }
  for (const auto& id : ids) {
    data.caption_vectors[id] = embedder.embed_text(captions.at(id).caption_text, EmbeddingKind::kCaption).vector;
  }
  return data;
}

std::vector<EpochMetrics> run_pretraining(Backbone& backbone, TextAdapter& adapter,
                                          const PretrainData& data, const PretrainConfig& config,
                                          std::uint64_t seed,
                                          const std::function<void(const EpochMetrics&)>& on_epoch) {
  config.validate();
  require(data.dataset != nullptr, ErrorCode::kInvalidArgument, "pretrain data has no dataset");
  std::vector<std::pair<std::string, std::size_t>> items;
  for (std::size_t c = 0; c < data.base.num_classes(); ++c) {
    for (const auto& id : data.base.image_ids[c]) items.emplace_back(id, c);
  }
  require(items.size() >= 2, ErrorCode::kInsufficientImages, "pre-training needs >= 2 base images");
  const std::size_t d_s = adapter.in_dim();

  Pretrainer trainer(backbone, adapter, config);
  std::vector<EpochMetrics> history;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng rng(derive_seed(seed, epoch));
    rng.shuffle(std::span(items));
    EpochMetrics m;
    m.epoch = epoch;
    std::size_t correct = 0, seen = 0, batches = 0;
    for (std::size_t start = 0; start < items.size(); start += config.batch_size) {
      const std::size_t end = std::min(items.size(), start + config.batch_size);
      if (end - start < 2) break;  // normalization and contrastive terms need pairs
      std::vector<std::string> ids;
      std::vector<std::size_t> labels;
      std::vector<double> caps;
      caps.reserve((end - start) * d_s);
      for (std::size_t i = start; i < end; ++i) {
        ids.push_back(items[i].first);
        labels.push_back(items[i].second);
        const auto& v = data.caption_vectors.at(items[i].first);
        caps.insert(caps.end(), v.begin(), v.end());
      }
      const auto images = data.dataset->load_images(ids);
      const auto lb = trainer.step(images, Tensor::from({ids.size(), d_s}, std::move(caps)), labels);
      m.ce += lb.ce;
      m.it_global += lb.it_global;
      m.it_local += lb.it_local;
      m.total += lb.total;
      correct += lb.correct;
      seen += lb.count;
      ++batches;
    }
    const double nb = static_cast<double>(std::max<std::size_t>(batches, 1));
    m.ce /= nb;
    m.it_global /= nb;
    m.it_local /= nb;
    m.total /= nb;
    m.base_train_acc = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return history;
}

}  // namespace ecer
