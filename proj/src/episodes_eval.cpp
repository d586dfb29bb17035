#include "ecer/episodes_eval.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <numeric>
#include <thread>

#include "ecer/error.hpp"
#include "ecer/rng.hpp"

namespace ecer {

using nlohmann::json;

void EpisodeProtocol::validate() const {
  require(way >= 2, ErrorCode::kConfig, "way must be >= 2");
  require(shots >= 1, ErrorCode::kConfig, "shots must be >= 1");
  require(queries >= 1, ErrorCode::kConfig, "queries must be >= 1");
  require(tasks >= 1, ErrorCode::kConfig, "tasks must be >= 1");
}

json EpisodeProtocol::to_json() const {
  return {{"way", way}, {"shots", shots}, {"queries", queries}, {"tasks", tasks}};
}

std::uint64_t episode_seed(std::uint64_t root, std::size_t t) { return derive_seed(root, t); }

Episode sample_episode(const SplitView& split, std::size_t way, std::size_t shots, std::size_t queries,
                       std::uint64_t seed) {
  require(way >= 1 && shots >= 1 && queries >= 1, ErrorCode::kInvalidArgument,
          "episode needs way, shots and queries >= 1");
  if (split.num_classes() < way) {
    fail(ErrorCode::kInsufficientClasses, "split '" + split.name + "' has " +
                                              std::to_string(split.num_classes()) + " classes, " +
                                              std::to_string(way) + "-way episodes need more");
  }
  const std::size_t need = shots + queries;
  for (std::size_t c = 0; c < split.num_classes(); ++c) {
    if (split.image_ids[c].size() < need) {
      fail(ErrorCode::kInsufficientImages, "class '" + split.class_names[c] + "' has " +
                                               std::to_string(split.image_ids[c].size()) + " images, needs " +
                                               std::to_string(need));
    }
  }
  Rng rng(seed);
  std::vector<std::size_t> classes(split.num_classes());
  std::iota(classes.begin(), classes.end(), 0);
  // Partial Fisher–Yates: the first `way` slots are a uniform draw.
  for (std::size_t i = 0; i < way; ++i) {
    std::swap(classes[i], classes[i + rng.index(classes.size() - i)]);
  }
  Episode ep;
  ep.way = way;
  ep.shots = shots;
  ep.queries_per_class = queries;
  ep.seed = seed;
  for (std::size_t label = 0; label < way; ++label) {
    const std::size_t c = classes[label];
    ep.class_names.push_back(split.class_names[c]);
    std::vector<std::size_t> pick(split.image_ids[c].size());
    std::iota(pick.begin(), pick.end(), 0);
    for (std::size_t i = 0; i < need; ++i) std::swap(pick[i], pick[i + rng.index(pick.size() - i)]);
    for (std::size_t i = 0; i < need; ++i) {
      EpisodeItem item{split.image_ids[c][pick[i]], label, split.class_names[c]};
      (i < shots ? ep.support : ep.query).push_back(std::move(item));
    }
  }
  return ep;
}

AccuracyStats summarize_accuracies(std::span<const double> acc) {
  AccuracyStats s;
  if (acc.empty()) return s;
  const double n = static_cast<double>(acc.size());
  s.mean = std::accumulate(acc.begin(), acc.end(), 0.0) / n;
  if (acc.size() > 1) {
    double ss = 0.0;
    for (double a : acc) ss += (a - s.mean) * (a - s.mean);
    s.stddev = std::sqrt(ss / (n - 1.0));
  }
  s.ci95 = 1.96 * s.stddev / std::sqrt(n);
  return s;
}

std::string EvalReport::summary() const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f ± %.2f", 100.0 * mean_acc, 100.0 * ci95);
  return buf;
}

json EvalReport::to_json() const {
  return {{"protocol", protocol.to_json()},
          {"root_seed", root_seed},
          {"mean_acc", mean_acc},
          {"ci95", ci95},
          {"summary", summary()},
          {"accuracies", accuracies},
          {"domain_tags", domain_tags},
          {"config", config}};
}

// ---------------------------------------------------------------------------

FeatureBank FeatureBank::build(const Backbone& backbone, const Dataset& dataset,
                               std::span<const std::string> image_ids, std::size_t batch_size) {
  NoGradGuard ng;
  FeatureBank bank;
  bank.channels_ = backbone.config().channels;
  for (const auto& [h, w] : backbone.config().spatial_dims()) bank.locations_.push_back(h * w);
  batch_size = std::max<std::size_t>(batch_size, 1);
  for (std::size_t start = 0; start < image_ids.size(); start += batch_size) {
    const std::size_t end = std::min(image_ids.size(), start + batch_size);
    const auto ids = image_ids.subspan(start, end - start);
    const auto feats = backbone.infer(dataset.load_images(ids));
    for (std::size_t b = 0; b < ids.size(); ++b) {
      Entry e;
      for (std::size_t i = 0; i < feats.num_blocks(); ++i) {
        const std::size_t len = feats.locations(i) * feats.channels(i);
        const auto src = feats.maps[i].data().subspan(b * len, len);
        e.maps.emplace_back(src.begin(), src.end());
      }
      const std::size_t cn = feats.global_vec.dim(1);
      const auto g = feats.global_vec.data().subspan(b * cn, cn);
      e.global.assign(g.begin(), g.end());
      bank.entries_[ids[b]] = std::move(e);
    }
  }
  return bank;
}

const FeatureBank::Entry& FeatureBank::at(const std::string& id) const {
  auto it = entries_.find(id);
  if (it == entries_.end()) fail(ErrorCode::kMissingImage, "no features for image '" + id + "'");
  return it->second;
}

SupportFeatures FeatureBank::support(const Episode& ep) const {
  SupportFeatures sf;
  sf.locations = locations_;
  const std::size_t nb = channels_.size(), cn = channels_.back();
  const double inv = 1.0 / static_cast<double>(ep.shots);
  std::vector<std::vector<double>> maps(nb);
  for (std::size_t i = 0; i < nb; ++i) maps[i].assign(ep.way * locations_[i] * channels_[i], 0.0);
  std::vector<double> fs(ep.way * cn, 0.0);
  for (const auto& item : ep.support) {
    const auto& e = at(item.image_id);
    for (std::size_t i = 0; i < nb; ++i) {
      const std::size_t len = e.maps[i].size();
      double* dst = maps[i].data() + item.label * len;
      for (std::size_t j = 0; j < len; ++j) dst[j] += inv * e.maps[i][j];
    }
    for (std::size_t j = 0; j < cn; ++j) fs[item.label * cn + j] += inv * e.global[j];
  }
  for (std::size_t i = 0; i < nb; ++i) {
    sf.maps.push_back(Tensor::from({ep.way * locations_[i], channels_[i]}, std::move(maps[i])));
  }
  sf.f_s = Tensor::from({ep.way, cn}, std::move(fs));
  return sf;
}

Tensor FeatureBank::queries(const Episode& ep) const {
  const std::size_t cn = channels_.back();
  std::vector<double> q;
  q.reserve(ep.query.size() * cn);
  for (const auto& item : ep.query) {
    const auto& g = at(item.image_id).global;
    q.insert(q.end(), g.begin(), g.end());
  }
  return Tensor::from({ep.query.size(), cn}, std::move(q));
}

// ---------------------------------------------------------------------------

SemanticTable SemanticTable::build(std::span<const std::string> class_names, const EntityStore& entities,
                                   EmbeddingProvider& embedder, std::size_t max_entities) {
  SemanticTable t;
  t.dim_ = embedder.dim();
  if (max_entities > 0) entities.require_classes(class_names);
  for (const auto& name : class_names) {
    std::vector<std::vector<double>> rows;
    rows.push_back(embedder.embed_text(prompt_class(name), EmbeddingKind::kPromptedClass).vector);
    if (max_entities > 0) {
      const auto& set = entities.at(name);
      const std::size_t k = std::min(max_entities, set.selected.size());
      if (k < max_entities) {
        spdlog::warn("class '{}' has {} selected entities, {} requested", name, k, max_entities);
      }
      for (std::size_t j = 0; j < k; ++j) {
        rows.push_back(embedder.embed_text(set.selected[j].text, EmbeddingKind::kEntity).vector);
      }
    }
    t.rows_[name] = std::move(rows);
  }
  return t;
}

std::size_t SemanticTable::entities_available(const std::string& class_name) const {
  auto it = rows_.find(class_name);
  if (it == rows_.end()) fail(ErrorCode::kMissingEntities, "no semantic rows for class '" + class_name + "'");
  return it->second.size() - 1;
}

std::size_t SemanticTable::common_k(std::span<const std::string> class_names, std::size_t k_max) const {
  std::size_t k = k_max;
  for (const auto& c : class_names) k = std::min(k, entities_available(c));
  return k;
}

SemanticBatch SemanticTable::batch(std::span<const std::string> class_names, std::size_t k) const {
  SemanticBatch b;
  b.items_per_class = k + 1;
  std::vector<double> v;
  v.reserve(class_names.size() * (k + 1) * dim_);
  for (const auto& c : class_names) {
    require(entities_available(c) >= k, ErrorCode::kMissingEntities,
            "class '" + c + "' has fewer than " + std::to_string(k) + " entities");
    const auto& rows = rows_.at(c);
    for (std::size_t j = 0; j <= k; ++j) v.insert(v.end(), rows[j].begin(), rows[j].end());
  }
  b.rows = Tensor::from({class_names.size() * (k + 1), dim_}, std::move(v));
  return b;
}

// ---------------------------------------------------------------------------

namespace {

Tensor logits_from(const PvsaModel& model, const SupportFeatures& support, const Tensor& queries,
                   const SemanticTable& sem, const Episode& ep) {
  const auto& cfg = model.config();
  SemanticBatch batch;
  if (cfg.use_svpe) batch = sem.batch(ep.class_names, sem.common_k(ep.class_names, cfg.effective_entities()));
  const auto bundle = model.prototypes(support, batch);
  return classify_logits(queries, bundle.C, cfg.tau);
}

std::vector<std::size_t> query_labels(const Episode& ep) {
  std::vector<std::size_t> y;
  for (const auto& q : ep.query) y.push_back(q.label);
  return y;
}

}  // namespace

Tensor episode_logits(const PvsaModel& model, const FeatureBank& bank, const SemanticTable& sem,
                      const Episode& ep) {
  return logits_from(model, bank.support(ep), bank.queries(ep), sem, ep);
}

double episode_accuracy(const Tensor& logits, const Episode& ep) {
  const std::size_t n = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ep.query.size(); ++i) {
    const auto row = logits.data().subspan(i * n, n);
    correct += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == ep.query[i].label;
  }
  return ep.query.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(ep.query.size());
}

void FinetuneConfig::validate() const {
  require(lr > 0.0, ErrorCode::kConfig, "finetune.lr must be > 0");
  require(way >= 2 && shots >= 1 && queries >= 1, ErrorCode::kConfig, "finetune episode shape invalid");
  require(val_fraction > 0.0 && val_fraction < 1.0, ErrorCode::kConfig, "finetune.val_fraction must be in (0, 1)");
  require(episodes_per_epoch >= 1 && val_episodes >= 1, ErrorCode::kConfig, "finetune episode counts must be >= 1");
}

json FinetuneConfig::to_json() const {
  return {{"epochs", epochs},   {"episodes_per_epoch", episodes_per_epoch},
          {"lr", lr},           {"way", way},
          {"shots", shots},     {"queries", queries},
          {"val_fraction", val_fraction}, {"val_episodes", val_episodes},
          {"unfreeze_last_block", unfreeze_last_block}};
}

FinetuneSplits carve_validation(const Dataset& dataset, const FinetuneConfig& config, std::uint64_t seed) {
  FinetuneSplits out;
  out.train = dataset.split("base");
  if (dataset.manifest().splits.val.size() >= config.way) {
    out.val = dataset.split("val");
    out.source = "val-split";
    return out;
  }
  const std::size_t nb = out.train.num_classes();
  const auto n_val = static_cast<std::size_t>(std::ceil(config.val_fraction * static_cast<double>(nb)));
  Rng rng(derive_seed(seed, 0x7A1));
  if (n_val >= config.way && nb - n_val >= config.way) {
    std::vector<std::size_t> order(nb);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(std::span(order));
    SplitView train{"base-train", {}, {}}, val{"base-val", {}, {}};
    for (std::size_t j = 0; j < nb; ++j) {
      auto& dst = j < n_val ? val : train;
      dst.class_names.push_back(out.train.class_names[order[j]]);
      dst.image_ids.push_back(out.train.image_ids[order[j]]);
    }
    out.train = std::move(train);
    out.val = std::move(val);
    out.source = "base-classes";
    return out;
  }
  // Too few base classes for class-level hold-out: hold out images instead.
  SplitView train{"base-train", out.train.class_names, {}}, val{"base-val", out.train.class_names, {}};
  for (const auto& ids : out.train.image_ids) {
    auto shuffled = ids;
    rng.shuffle(std::span(shuffled));
    const auto n = std::max<std::size_t>(
        config.shots + 1, static_cast<std::size_t>(std::ceil(config.val_fraction * static_cast<double>(ids.size()))));
    val.image_ids.emplace_back(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(std::min(n, ids.size())));
    train.image_ids.emplace_back(shuffled.begin() + static_cast<std::ptrdiff_t>(std::min(n, ids.size())), shuffled.end());
  }
  out.train = std::move(train);
  out.val = std::move(val);
  out.source = "base-images";
  return out;
}

namespace {

double mean_accuracy(const PvsaModel& model, const FeatureBank& bank, const SemanticTable& sem,
                     const std::vector<Episode>& episodes) {
  NoGradGuard ng;
  double s = 0.0;
  for (const auto& ep : episodes) s += episode_accuracy(episode_logits(model, bank, sem, ep), ep);
  return episodes.empty() ? 0.0 : s / static_cast<double>(episodes.size());
}

std::size_t min_class_size(const SplitView& v) {
  std::size_t m = SIZE_MAX;
  for (const auto& ids : v.image_ids) m = std::min(m, ids.size());
  return m;
}

// Recomputes final-block features for an episode with gradients flowing
// into the last block (used when it is unfrozen).
struct LiveFinal {
  const Backbone* backbone;
  const Dataset* dataset;
  const FeatureBank* bank;

  std::pair<SupportFeatures, Tensor> operator()(const Episode& ep) const {
    const std::size_t last = backbone->config().channels.size() - 1;
    auto sf = bank->support(ep);
    std::vector<std::string> ids;
    for (const auto& it : ep.support) ids.push_back(it.image_id);
    for (const auto& it : ep.query) ids.push_back(it.image_id);
    StageFeatures pre;
    {
      NoGradGuard ng;
      pre = backbone->infer(dataset->load_images(ids));
    }
    auto fin = backbone->infer_from(pre.activations[last - 1], last);
    const std::size_t hw = fin.locations(0);
    const std::size_t ns = ep.support.size();
    // shot-average support rows
    std::vector<Tensor> maps, globals;
    for (std::size_t c = 0; c < ep.way; ++c) {
      std::vector<std::size_t> rows, grow;
      for (std::size_t j = 0; j < ns; ++j) {
        if (ep.support[j].label != c) continue;
        grow.push_back(j);
        for (std::size_t k = 0; k < hw; ++k) rows.push_back(j * hw + k);
      }
      // [shots·hw, C] → mean over shots per location
      auto m = ops::gather_rows(fin.maps[0], rows);
      std::vector<std::size_t> perm;
      for (std::size_t k = 0; k < hw; ++k)
        for (std::size_t s = 0; s < grow.size(); ++s) perm.push_back(s * hw + k);
      maps.push_back(ops::group_mean_rows(ops::gather_rows(m, perm), grow.size()));
      globals.push_back(ops::mean_rows(ops::gather_rows(fin.global_vec, grow)));
    }
    sf.maps[last] = ops::concat_rows(maps);
    sf.f_s = ops::concat_rows(globals);
    std::vector<std::size_t> qrows;
    for (std::size_t j = 0; j < ep.query.size(); ++j) qrows.push_back(ns + j);
    return {sf, ops::gather_rows(fin.global_vec, qrows)};
  }
};

}  // namespace

FinetuneResult finetune(Backbone& backbone, PvsaModel& model, const Dataset& dataset,
                        const EntityStore& entities, EmbeddingProvider& embedder,
                        const FinetuneConfig& config, std::uint64_t seed,
                        const std::function<void(const FinetuneEpoch&)>& on_epoch) {
  config.validate();
  FinetuneResult result;
  auto splits = carve_validation(dataset, config, seed);
  result.validation_source = splits.source;

  std::vector<std::string> class_names = splits.train.class_names;
  for (const auto& c : splits.val.class_names) {
    if (std::find(class_names.begin(), class_names.end(), c) == class_names.end()) class_names.push_back(c);
  }
  const auto& cfg = model.config();
  const std::size_t k_max = cfg.effective_entities();
  const auto sem = SemanticTable::build(class_names, entities, embedder, cfg.use_svpe ? k_max : 0);

  std::vector<std::string> ids = splits.train.all_image_ids();
  for (const auto& id : splits.val.all_image_ids()) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  auto bank = FeatureBank::build(backbone, dataset, ids);

  const std::size_t val_way = std::min(config.way, splits.val.num_classes());
  const std::size_t val_queries = std::min(config.queries, min_class_size(splits.val) - config.shots);
  std::vector<Episode> val_eps;
  for (std::size_t t = 0; t < config.val_episodes; ++t) {
    val_eps.push_back(sample_episode(splits.val, val_way, config.shots, val_queries,
                                     episode_seed(derive_seed(seed, 0x7A11D), t)));
  }

  auto params = model.parameters();
  if (config.unfreeze_last_block) {
    auto b = backbone.block_parameters(backbone.config().channels.size() - 1);
    params.insert(params.end(), b.begin(), b.end());
  }
  const auto refresh_bank = [&] {
    if (config.unfreeze_last_block) bank = FeatureBank::build(backbone, dataset, ids);
  };

  result.val_acc_before = mean_accuracy(model, bank, sem, val_eps);
  result.best_val_acc = result.val_acc_before;
  auto best = nn::snapshot(params);
  if (!cfg.use_svpe || config.epochs == 0) return result;

  nn::Adam adam(params, nn::AdamOptions{.lr = config.lr});
  const std::size_t train_queries = std::min(config.queries, min_class_size(splits.train) - config.shots);
  LiveFinal live{&backbone, &dataset, &bank};
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    FinetuneEpoch m;
    m.epoch = epoch;
    double loss_sum = 0.0, acc_sum = 0.0;
    for (std::size_t e = 0; e < config.episodes_per_epoch; ++e) {
      const auto ep = sample_episode(splits.train, config.way, config.shots, train_queries,
                                     episode_seed(derive_seed(seed, epoch), e));
      adam.zero_grad();
      Tensor logits;
      if (config.unfreeze_last_block) {
        auto [sf, q] = live(ep);
        logits = logits_from(model, sf, q, sem, ep);
      } else {
        logits = episode_logits(model, bank, sem, ep);
      }
      const auto labels = query_labels(ep);
      auto loss = episode_loss(ops::log_softmax_rows(logits), labels);
      loss.sum.backward();
      adam.step();
      loss_sum += loss.mean;
      acc_sum += episode_accuracy(logits, ep);
    }
    refresh_bank();
    m.loss_mean = loss_sum / static_cast<double>(config.episodes_per_epoch);
    m.train_acc = acc_sum / static_cast<double>(config.episodes_per_epoch);
    m.val_acc = mean_accuracy(model, bank, sem, val_eps);
    if (m.val_acc > result.best_val_acc) {
      result.best_val_acc = m.val_acc;
      result.best_epoch = epoch;
      best = nn::snapshot(params);
    }
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  nn::restore(params, best);
  refresh_bank();
  return result;
}

EvalReport evaluate_episodes(const PvsaModel& model, const FeatureBank& bank, const SemanticTable& sem,
                             const SplitView& split, const EvalOptions& options) {
  options.protocol.validate();
  const auto& p = options.protocol;
  // Surface sampler errors before spawning workers.
  (void)sample_episode(split, p.way, p.shots, p.queries, episode_seed(options.root_seed, 0));

  EvalReport report;
  report.protocol = p;
  report.root_seed = options.root_seed;
  report.accuracies.assign(p.tasks, 0.0);
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto work = [&] {
    NoGradGuard ng;
    try {
      for (std::size_t t = next++; t < p.tasks; t = next++) {
        const auto ep = sample_episode(split, p.way, p.shots, p.queries, episode_seed(options.root_seed, t));
        report.accuracies[t] = episode_accuracy(episode_logits(model, bank, sem, ep), ep);
      }
    } catch (...) {
      std::lock_guard lock(error_mu);
      if (!error) error = std::current_exception();
      next = p.tasks;
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(options.workers, 1, p.tasks);
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);
  const auto stats = summarize_accuracies(report.accuracies);
  report.mean_acc = stats.mean;
  report.ci95 = stats.ci95;
  report.config = {{"pvsa", model.config().to_json()}};
  return report;
}

EvalReport evaluate(const Backbone& backbone, const PvsaModel& model, const Dataset& dataset,
                    const EntityStore& entities, EmbeddingProvider& embedder, const EvalOptions& options,
                    const std::string& split_name) {
  options.protocol.validate();
  const auto split = dataset.split(split_name);
  const auto& cfg = model.config();
  const auto sem = SemanticTable::build(split.class_names, entities, embedder,
                                        cfg.use_svpe ? cfg.effective_entities() : 0);
  const auto ids = split.all_image_ids();
  const auto bank = FeatureBank::build(backbone, dataset, ids);
  auto report = evaluate_episodes(model, bank, sem, split, options);
  report.domain_tags = {{"source", dataset.manifest().domain}, {"target", dataset.manifest().domain},
                        {"dataset", dataset.manifest().name}, {"split", split_name}};
  return report;
}

EvalReport evaluate_cross_domain(const Backbone& backbone, const PvsaModel& model,
                                 const std::string& source_domain, const Dataset& target,
                                 const EntityStore& target_entities, EmbeddingProvider& embedder,
                                 const EvalOptions& options) {
  require(target.manifest().image_size == backbone.config().input_size, ErrorCode::kShapeMismatch,
          "target dataset image size " + std::to_string(target.manifest().image_size) +
              " differs from the backbone input size");
  auto report = evaluate(backbone, model, target, target_entities, embedder, options, "novel");
  report.domain_tags["source"] = source_domain;
  return report;
}

}  // namespace ecer
