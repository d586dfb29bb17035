#include "ecer/pvsa.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "ecer/error.hpp"
#include "ecer/rng.hpp"

namespace ecer {

using nlohmann::json;

void PvsaConfig::validate(std::size_t num_blocks) const {
  require(alpha >= 0.0 && beta >= 0.0, ErrorCode::kConfig, "pvsa.alpha and pvsa.beta must be >= 0");
  require(tau > 0.0, ErrorCode::kConfig, "pvsa.tau must be > 0");
  require(num_stages >= 1 && num_stages <= num_blocks, ErrorCode::kConfig,
          "pvsa.stages must be in [1, " + std::to_string(num_blocks) + "]");
}

std::vector<std::size_t> PvsaConfig::stage_blocks(std::size_t num_blocks) const {
  std::vector<std::size_t> out;
  for (std::size_t b = num_blocks - num_stages; b < num_blocks; ++b) out.push_back(b);
  return out;
}

json PvsaConfig::to_json() const {
  return {{"alpha", alpha},         {"beta", beta},
          {"tau", tau},             {"num_entities", num_entities},
          {"use_svpe", use_svpe},   {"use_pc", use_pc},
          {"use_entities", use_entities}, {"stages", num_stages},
          {"raw_attention", raw_attention}, {"entity_mean", entity_mean},
          {"leaky_slope", leaky_slope}, {"zero_init_output", zero_init_output}};
}

Tensor semantic_attention(const Tensor& s, const Tensor& maps, std::size_t hw,
                          std::size_t rows_per_group, bool raw, std::vector<double>* weights) {
  require(s.rank() == 2 && maps.rank() == 2 && s.dim(1) == maps.dim(1), ErrorCode::kShapeMismatch,
          "svpe: semantic " + shape_str(s.shape()) + " vs feature map " + shape_str(maps.shape()));
  require(hw > 0 && rows_per_group > 0 && maps.dim(0) % hw == 0, ErrorCode::kShapeMismatch,
          "svpe: feature map rows not a multiple of HW");
  const std::size_t R = s.dim(0), C = s.dim(1), G = maps.dim(0) / hw;
  require(R == G * rows_per_group, ErrorCode::kShapeMismatch,
          "svpe: " + std::to_string(R) + " semantic rows for " + std::to_string(G) + " map group(s)");

  const auto sv = s.data();
  const auto fv = maps.data();
  const double scale = 1.0 / std::sqrt(static_cast<double>(C));
  std::vector<double> w(R * hw);
  std::vector<double> out(R * C, 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    const double* f0 = fv.data() + (r / rows_per_group) * hw * C;
    const double* sr = sv.data() + r * C;
    double* wr = w.data() + r * hw;
    for (std::size_t k = 0; k < hw; ++k) {
      double d = 0.0;
      for (std::size_t c = 0; c < C; ++c) d += sr[c] * f0[k * C + c];
      wr[k] = d * scale;
    }
    if (raw) {
      for (std::size_t k = 0; k < hw; ++k) wr[k] /= static_cast<double>(hw);
    } else {
      const double mx = *std::max_element(wr, wr + hw);
      double z = 0.0;
      for (std::size_t k = 0; k < hw; ++k) z += (wr[k] = std::exp(wr[k] - mx));
      for (std::size_t k = 0; k < hw; ++k) wr[k] /= z;
    }
    double* o = out.data() + r * C;
    for (std::size_t k = 0; k < hw; ++k)
      for (std::size_t c = 0; c < C; ++c) o[c] += wr[k] * f0[k * C + c];
  }
  if (weights) *weights = w;

  return ops::custom({R, C}, std::move(out), {s, maps},
                     [w = std::move(w), R, C, hw, rows_per_group, raw, scale](detail::Node& self) {
    const auto& sv = self.parents[0]->value;
    const auto& fv = self.parents[1]->value;
    std::vector<double>* gs = self.parents[0]->requires_grad ? &self.parents[0]->ensure_grad() : nullptr;
    std::vector<double>* gf = self.parents[1]->requires_grad ? &self.parents[1]->ensure_grad() : nullptr;
    std::vector<double> dw(hw), da(hw);
    for (std::size_t r = 0; r < R; ++r) {
      const std::size_t base = (r / rows_per_group) * hw * C;
      const double* f0 = fv.data() + base;
      const double* g = self.grad.data() + r * C;
      const double* wr = w.data() + r * hw;
      double dot = 0.0;
      for (std::size_t k = 0; k < hw; ++k) {
        double d = 0.0;
        for (std::size_t c = 0; c < C; ++c) d += g[c] * f0[k * C + c];
        dw[k] = d;
        dot += wr[k] * d;
      }
      for (std::size_t k = 0; k < hw; ++k) {
        da[k] = raw ? dw[k] / static_cast<double>(hw) : wr[k] * (dw[k] - dot);
      }
      if (gs) {
        double* o = gs->data() + r * C;
        for (std::size_t k = 0; k < hw; ++k)
          for (std::size_t c = 0; c < C; ++c) o[c] += da[k] * scale * f0[k * C + c];
      }
      if (gf) {
        const double* sr = sv.data() + r * C;
        for (std::size_t k = 0; k < hw; ++k) {
          double* o = gf->data() + base + k * C;
          for (std::size_t c = 0; c < C; ++c) o[c] += wr[k] * g[c] + da[k] * scale * sr[c];
        }
      }
    }
  });
}

Tensor svpe_block(const Tensor& s, const Tensor& F, const nn::TwoLayer& fusion, bool raw,
                  std::vector<double>* weights) {
  require(s.rank() == 2 && s.dim(0) == 1, ErrorCode::kShapeMismatch, "svpe_block expects s as [1, C]");
  auto pooled = semantic_attention(s, F, F.dim(0), 1, raw, weights);
  return fusion(ops::concat_cols({pooled, s}));
}

namespace {

// Σ (or mean, for the entity rows) of per-item terms grouped by class.
Tensor combine_items(const Tensor& items, std::size_t per_class, bool entity_mean) {
  if (per_class == 1) return items;
  const std::size_t n = items.dim(0) / per_class;
  if (!entity_mean) return ops::scale(ops::group_mean_rows(items, per_class), static_cast<double>(per_class));
  std::vector<std::size_t> cls, ent;
  for (std::size_t c = 0; c < n; ++c) {
    cls.push_back(c * per_class);
    for (std::size_t k = 1; k < per_class; ++k) ent.push_back(c * per_class + k);
  }
  return ops::add(ops::gather_rows(items, cls), ops::group_mean_rows(ops::gather_rows(items, ent), per_class - 1));
}

Tensor repeat_rows(const Tensor& a, std::size_t times) {
  if (times == 1) return a;
  std::vector<std::size_t> idx;
  for (std::size_t r = 0; r < a.dim(0); ++r)
    for (std::size_t t = 0; t < times; ++t) idx.push_back(r);
  return ops::gather_rows(a, idx);
}

void check_nonzero_rows(const Tensor& a, const char* what) {
  const std::size_t n = a.dim(1);
  for (std::size_t r = 0; r < a.dim(0); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += a.data()[r * n + c] * a.data()[r * n + c];
    if (s == 0.0) fail(ErrorCode::kZeroVector, std::string(what) + " row " + std::to_string(r) + " is zero");
  }
}

}  // namespace

Tensor calibrate_prototype(const Tensor& f_s, const Tensor& P_cls, const Tensor& P_ent, double alpha,
                           double beta, const nn::TwoLayer& fusion, const nn::Linear& fc,
                           bool entity_mean) {
  require(f_s.rank() == 2 && f_s.dim(0) == 1 && P_cls.shape() == f_s.shape(), ErrorCode::kShapeMismatch,
          "calibrate_prototype: f_s and P_cls must be [1, C]");
  require(alpha >= 0.0 && beta >= 0.0, ErrorCode::kInvalidArgument, "alpha, beta must be >= 0");
  std::vector<Tensor> items{P_cls};
  if (P_ent.defined() && P_ent.numel() > 0) {
    require(P_ent.dim(1) == f_s.dim(1), ErrorCode::kShapeMismatch, "calibrate_prototype: P_ent width");
    items.push_back(P_ent);
  }
  auto P = ops::concat_rows(items);
  const std::size_t per = P.dim(0);
  auto c_items = fusion(ops::concat_cols({repeat_rows(f_s, per), P}));
  auto semantic = combine_items(fc(c_items), per, entity_mean);
  return ops::add(ops::scale(f_s, alpha), ops::scale(semantic, beta));
}

Tensor classify_logits(const Tensor& query, const Tensor& prototypes, double tau) {
  require(tau > 0.0, ErrorCode::kInvalidArgument, "classifier temperature must be > 0");
  require(query.rank() == 2 && prototypes.rank() == 2 && query.dim(1) == prototypes.dim(1),
          ErrorCode::kShapeMismatch, "classify: query/prototype widths differ");
  check_nonzero_rows(prototypes, "prototype");
  check_nonzero_rows(query, "query feature");
  return ops::scale(ops::cosine_matrix(query, prototypes), 1.0 / tau);
}

Tensor classify_query(const Tensor& query, const Tensor& prototypes, double tau) {
  return ops::softmax_rows(classify_logits(query, prototypes, tau));
}

EpisodeLoss episode_loss(const Tensor& log_probs, std::span<const std::size_t> labels) {
  require(log_probs.rank() == 2 && labels.size() == log_probs.dim(0), ErrorCode::kShapeMismatch,
          "episode_loss: one label per query row");
  for (auto y : labels) {
    require(y < log_probs.dim(1), ErrorCode::kInvalidArgument,
            "episode_loss: label " + std::to_string(y) + " outside [0, " + std::to_string(log_probs.dim(1)) + ")");
  }
  EpisodeLoss out;
  out.sum = ops::nll_sum(log_probs, labels);
  out.mean = labels.empty() ? 0.0 : out.sum.item() / static_cast<double>(labels.size());
  return out;
}

double episode_loss_from_probs(std::span<const double> probs, std::size_t way,
                               std::span<const std::size_t> labels) {
  require(probs.size() == way * labels.size(), ErrorCode::kShapeMismatch, "episode_loss: shape");
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] < way, ErrorCode::kInvalidArgument, "episode_loss: label out of range");
    s -= std::log(probs[i * way + labels[i]]);
  }
  return s;
}

PvsaModel::PvsaModel(std::vector<std::size_t> channels, std::size_t semantic_dim, PvsaConfig config,
                     std::uint64_t seed)
    : config_(config), channels_(std::move(channels)), semantic_dim_(semantic_dim) {
  require(!channels_.empty() && semantic_dim_ > 0, ErrorCode::kConfig, "pvsa: empty dimensions");
  config_.validate(channels_.size());
  Rng rng(derive_seed(seed, 0x5C9E));
  const std::size_t cn = channels_.back();
  const double slope = config_.leaky_slope;
  for (std::size_t i = 0; i < channels_.size(); ++i) {
    const std::size_t c = channels_[i];
    Block b;
    b.W = nn::Linear(semantic_dim_, c, rng);
    b.U = nn::Linear(i == 0 ? c : channels_[i - 1], c, rng);
    b.fusion = nn::TwoLayer(2 * c, c, c, slope, rng);
    b.to_final = nn::Linear(c, cn, rng);
    blocks_.push_back(std::move(b));
  }
  block_fusion_ = nn::TwoLayer(config_.num_stages * cn, cn, cn, slope, rng);
  pc_fusion_ = nn::TwoLayer(2 * cn, cn, cn, slope, rng);
  pc_fc_ = nn::Linear(cn, cn, rng);
  if (config_.zero_init_output) {
    auto& last = config_.use_pc ? pc_fc_ : block_fusion_.second();
    std::fill(last.weight().mutable_data().begin(), last.weight().mutable_data().end(), 0.0);
    std::fill(last.bias().mutable_data().begin(), last.bias().mutable_data().end(), 0.0);
  }
}

void PvsaModel::set_config(const PvsaConfig& config) {
  require(config.num_stages == config_.num_stages, ErrorCode::kConfig,
          "pvsa.stages is fixed once the model is built");
  config.validate(channels_.size());
  config_ = config;
}

ProgressiveOutput PvsaModel::run_progressive(const SupportFeatures& support, const SemanticBatch& sem,
                                             bool keep_weights) const {
  const std::size_t nb = channels_.size();
  require(support.maps.size() == nb && support.locations.size() == nb, ErrorCode::kShapeMismatch,
          "pvsa expects " + std::to_string(nb) + " feature blocks, got " + std::to_string(support.maps.size()));
  require(sem.rows.rank() == 2 && sem.rows.dim(1) == semantic_dim_, ErrorCode::kShapeMismatch,
          "pvsa: semantic rows must be [R, " + std::to_string(semantic_dim_) + "]");
  ProgressiveOutput out;
  out.blocks = config_.stage_blocks(nb);
  Tensor prev;
  for (std::size_t j = 0; j < out.blocks.size(); ++j) {
    const std::size_t b = out.blocks[j];
    const auto& blk = blocks_[b];
    Tensor s = blk.W(sem.rows);
    if (j > 0) s = ops::leaky_relu(ops::add(s, blk.U(prev)), config_.leaky_slope);
    std::vector<double> w;
    auto pooled = semantic_attention(s, support.maps[b], support.locations[b], sem.items_per_class,
                                     config_.raw_attention, keep_weights ? &w : nullptr);
    auto P = blk.fusion(ops::concat_cols({pooled, s}));
    out.s.push_back(s);
    out.P.push_back(P);
    out.weights.push_back(std::move(w));
    prev = P;
  }
  return out;
}

Tensor PvsaModel::fuse_blocks(const std::vector<Tensor>& P, const std::vector<std::size_t>& blocks) const {
  require(P.size() == blocks.size() && P.size() == config_.num_stages, ErrorCode::kShapeMismatch,
          "fuse_blocks: expected " + std::to_string(config_.num_stages) + " block outputs");
  std::vector<Tensor> parts;
  for (std::size_t j = 0; j < P.size(); ++j) {
    require(P[j].dim(1) == channels_.at(blocks[j]), ErrorCode::kShapeMismatch,
            "fuse_blocks: block " + std::to_string(blocks[j]) + " width mismatch");
    parts.push_back(blocks_[blocks[j]].to_final(P[j]));
  }
  return block_fusion_(ops::concat_cols(parts));
}

Tensor PvsaModel::calibrate(const Tensor& f_s, const Tensor& fused, std::size_t items_per_class) const {
  require(fused.dim(0) == f_s.dim(0) * items_per_class, ErrorCode::kShapeMismatch,
          "calibrate: pattern rows do not match classes × items");
  Tensor semantic;
  if (config_.use_pc) {
    auto c_items = pc_fusion_(ops::concat_cols({repeat_rows(f_s, items_per_class), fused}));
    semantic = combine_items(pc_fc_(c_items), items_per_class, config_.entity_mean);
  } else {
    // Without calibration layers the fused patterns enter the blend directly.
    semantic = combine_items(fused, items_per_class, config_.entity_mean);
  }
  return ops::add(ops::scale(f_s, config_.alpha), ops::scale(semantic, config_.beta));
}

PrototypeBundle PvsaModel::prototypes(const SupportFeatures& support, const SemanticBatch& sem) const {
  PrototypeBundle b;
  b.f_s = support.f_s;
  b.items_per_class = sem.items_per_class;
  if (!config_.use_svpe) {
    b.C = support.f_s;
    return b;
  }
  require(sem.num_classes() == support.f_s.dim(0), ErrorCode::kShapeMismatch,
          "pvsa: semantic batch covers a different number of classes than the support set");
  auto prog = run_progressive(support, sem);
  b.P = fuse_blocks(prog.P, prog.blocks);
  b.C = calibrate(support.f_s, b.P, sem.items_per_class);
  return b;
}

nn::ParamList PvsaModel::parameters() const {
  nn::ParamList out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "pvsa.block" + std::to_string(i);
    blocks_[i].W.collect(p + ".W", out);
    blocks_[i].U.collect(p + ".U", out);
    blocks_[i].fusion.collect(p + ".fusion", out);
    blocks_[i].to_final.collect(p + ".to_final", out);
  }
  block_fusion_.collect("pvsa.block_fusion", out);
  pc_fusion_.collect("pvsa.pc_fusion", out);
  pc_fc_.collect("pvsa.pc_fc", out);
  return out;
}

void PvsaModel::save_to(Checkpoint& ck) const {
  ck.add(parameters());
  ck.meta["pvsa"] = config_.to_json();
  ck.meta["pvsa_channels"] = channels_;
  ck.meta["pvsa_semantic_dim"] = semantic_dim_;
}

void PvsaModel::load_from(const Checkpoint& ck) {
  auto params = parameters();
  ck.load_into(params);
}

std::vector<double> minmax_normalize(std::span<const double> values) {
  std::vector<double> out(values.size(), 0.5);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  if (!(range > 1e-12)) return out;
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - *lo) / range;
  return out;
}

std::vector<SimilarityGrid> similarity_grids(const PvsaModel& model, const std::vector<Tensor>& maps,
                                             const std::vector<std::pair<std::size_t, std::size_t>>& dims,
                                             const Tensor& f_s, const SemanticBatch& sem,
                                             const std::vector<std::string>& items) {
  require(sem.num_classes() == 1 && items.size() == sem.items_per_class, ErrorCode::kShapeMismatch,
          "similarity_grids: one class with named items expected");
  NoGradGuard ng;
  SupportFeatures sf;
  sf.maps = maps;
  for (const auto& [h, w] : dims) sf.locations.push_back(h * w);
  sf.f_s = f_s;
  const auto prog = model.run_progressive(sf, sem);
  std::vector<SimilarityGrid> out;
  for (std::size_t j = 0; j < prog.blocks.size(); ++j) {
    const std::size_t b = prog.blocks[j];
    const std::size_t hw = sf.locations[b], C = maps[b].dim(1);
    const auto fv = maps[b].data();
    const auto sv = prog.s[j].data();
    for (std::size_t r = 0; r < items.size(); ++r) {
      SimilarityGrid g;
      g.block = b;
      g.item = items[r];
      g.height = dims[b].first;
      g.width = dims[b].second;
      g.raw.resize(hw);
      double ns = 0.0;
      for (std::size_t c = 0; c < C; ++c) ns += sv[r * C + c] * sv[r * C + c];
      ns = std::sqrt(ns);
      for (std::size_t k = 0; k < hw; ++k) {
        double d = 0.0, nf = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          d += sv[r * C + c] * fv[k * C + c];
          nf += fv[k * C + c] * fv[k * C + c];
        }
        nf = std::sqrt(nf);
        g.raw[k] = (ns == 0.0 || nf == 0.0) ? 0.0 : d / (ns * nf);
      }
      g.normalized = minmax_normalize(g.raw);
      out.push_back(std::move(g));
    }
  }
  return out;
}

void write_grid_csv(const std::filesystem::path& path, const SimilarityGrid& grid) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out.precision(17);
  for (std::size_t y = 0; y < grid.height; ++y) {
    for (std::size_t x = 0; x < grid.width; ++x) {
      if (x) out << ',';
      out << grid.normalized[y * grid.width + x];
    }
    out << '\n';
  }
}

void write_grid_pgm(const std::filesystem::path& path, const SimilarityGrid& grid) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out << "P5\n" << grid.width << ' ' << grid.height << "\n255\n";
  for (double v : grid.normalized) {
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
}

}  // namespace ecer
