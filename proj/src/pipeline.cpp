#include "ecer/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "ecer/checkpoint.hpp"
#include "ecer/entity_selection.hpp"
#include "ecer/rng.hpp"

namespace ecer {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// RunConfig

json RunConfig::defaults() {
  return {
      {"run_id", "default"},
      {"output_dir", "runs"},
      {"seed", 0},
      {"workers", 1},
      {"preset", "desk"},
      {"dataset", {{"manifest", ""}}},
      {"xdomain", {{"manifest", ""}, {"source", ""}}},
      {"providers",
       {{"mode", "fixture"},
        {"embed_dim", 512},
        {"seed", 0},
        {"fixture_noise", 0.1},
        {"cache_dir", ""},
        {"entity_template", kDefaultEntityTemplate},
        {"fixture_entities_dir", ""},
        {"base_url", "https://api.openai.com"},
        {"llm_model", "gpt-4o"},
        {"embed_model", "text-embedding-3-small"},
        {"retries", 3},
        {"max_in_flight", 4},
        {"timeout_seconds", 60}}},
      {"backbone", {{"channels", {16, 32, 64, 128}}}},
      {"pretrain",
       {{"lambda", 1.0},
        {"eta", 1.0},
        {"tau", 0.07},
        {"eq1_literal", false},
        {"batch_size", 32},
        {"epochs", 30},
        {"lr", 1e-3},
        {"use_global", true},
        {"use_local", true},
        {"use_adapter", true},
        {"adapter_hidden", 256}}},
      {"entities", {{"k", 10}, {"n_gen", 20}, {"against_prompt", true}, {"min_similarity", nullptr}}},
      {"pvsa",
       {{"alpha", 0.2},
        {"beta", 0.8},
        {"tau", 0.1},
        {"num_entities", 10},
        {"use_svpe", true},
        {"use_pc", true},
        {"use_entities", true},
        {"num_stages", 4},
        {"raw_attention", false},
        {"entity_mean", false},
        {"zero_init_output", true}}},
      {"finetune",
       {{"epochs", 10},
        {"episodes_per_epoch", 100},
        {"lr", 1e-3},
        {"way", 5},
        {"shots", 1},
        {"queries", 15},
        {"val_fraction", 0.2},
        {"val_episodes", 100},
        {"unfreeze_last_block", false}}},
      {"eval", {{"way", 5}, {"shots", 1}, {"queries", 15}, {"tasks", 600}}},
      {"synth",
       {{"out_dir", ""},
        {"num_base", 10},
        {"num_val", 5},
        {"num_novel", 5},
        {"images_per_class", 40},
        {"image_size", 32},
        {"hue_shift_degrees", 0.0},
        {"texture_contrast", 1.0},
        {"distractors", 1},
        {"compositional", true},
        {"domain", "synthetic"}}},
      {"export", {{"image_id", ""}, {"class_name", ""}, {"features_split", ""}}},
  };
}

std::vector<std::string> RunConfig::preset_names() { return {"desk", "paper"}; }

RunConfig::RunConfig() : tree_(defaults()) {
  if (const char* mode = std::getenv("ECER_PROVIDER_MODE"); mode && *mode) {
    parse_provider_mode(mode);  // validates
    tree_["providers"]["mode"] = mode;
  }
}

void RunConfig::apply_preset(const std::string& name) {
  if (name == "desk") {
    merge({{"pretrain", {{"epochs", 30}, {"batch_size", 32}, {"lr", 1e-3}}},
           {"finetune", {{"epochs", 10}, {"lr", 1e-3}}}},
          "preset desk");
  } else if (name == "paper") {
    merge({{"pretrain", {{"epochs", 200}, {"batch_size", 128}, {"lr", 1e-4}}},
           {"finetune", {{"epochs", 50}, {"lr", 1e-4}}},
           {"entities", {{"k", 10}}},
           {"pvsa", {{"alpha", 0.2}, {"beta", 0.8}, {"num_entities", 10}}},
           {"eval", {{"way", 5}, {"shots", 1}, {"queries", 15}, {"tasks", 600}}}},
          "preset paper");
  } else {
    fail(ErrorCode::kConfig, "unknown preset '" + name + "' (expected desk or paper)");
  }
  tree_["preset"] = name;
}

namespace {

bool same_kind(const json& def, const json& v) {
  if (def.is_null()) return v.is_null() || v.is_number();
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_number_float()) return v.is_number();
  if (def.is_number_integer()) return v.is_number_integer() || (v.is_number_float() && v.get<double>() == std::floor(v.get<double>()));
  if (def.is_string()) return v.is_string();
  if (def.is_array()) return v.is_array();
  if (def.is_object()) return v.is_object();
  return false;
}

void merge_into(json& dst, const json& src, const json& schema, const std::string& path,
                const std::string& origin) {
  if (!src.is_object()) fail(ErrorCode::kConfig, origin + ": '" + path + "' must be an object");
  for (const auto& [key, value] : src.items()) {
    const std::string full = path.empty() ? key : path + "." + key;
    if (!schema.contains(key)) fail(ErrorCode::kConfig, origin + ": unknown config key '" + full + "'");
    const auto& def = schema.at(key);
    if (def.is_object()) {
      merge_into(dst[key], value, def, full, origin);
      continue;
    }
    if (!same_kind(def, value)) {
      fail(ErrorCode::kConfig, origin + ": config key '" + full + "' expects " + std::string(def.type_name()) +
                                   ", got " + value.dump());
    }
    if (def.is_number_integer() && value.is_number_float()) {
      dst[key] = static_cast<std::int64_t>(value.get<double>());
    } else {
      dst[key] = value;
    }
  }
}

json& lookup(json& root, const std::string& dotted, bool& found) {
  json* node = &root;
  std::stringstream ss(dotted);
  std::string part;
  found = true;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) {
      found = false;
      return root;
    }
    node = &(*node)[part];
  }
  return *node;
}

}  // namespace

void RunConfig::merge(const json& overrides, const std::string& origin) {
  merge_into(tree_, overrides, defaults(), "", origin);
}

void RunConfig::merge_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kMissingFile, "config file not found: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::kConfig, "config file " + path.string() + " does not parse: " + e.what());
  }
  merge(j, path.string());
}

bool RunConfig::has_key(const std::string& dotted_key) const {
  auto schema = defaults();
  bool found = false;
  const auto& node = lookup(schema, dotted_key, found);
  return found && !node.is_object();
}

void RunConfig::set(const std::string& dotted_key, const std::string& value) {
  auto schema = defaults();
  bool found = false;
  const json& def = lookup(schema, dotted_key, found);
  if (!found || def.is_object()) fail(ErrorCode::kConfig, "unknown config key '" + dotted_key + "'");
  json v;
  if (def.is_string()) {
    v = value;
  } else {
    try {
      v = json::parse(value);
    } catch (const json::parse_error&) {
      fail(ErrorCode::kConfig, "config key '" + dotted_key + "' expects " + std::string(def.type_name()) +
                                   ", got '" + value + "'");
    }
  }
  // Rebuild as a nested object so merge() does the type checking.
  json patch = v;
  std::vector<std::string> parts;
  std::stringstream ss(dotted_key);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  merge(patch, "--" + dotted_key);
}

fs::path RunConfig::run_dir() const {
  return fs::path(tree_["output_dir"].get<std::string>()) / tree_["run_id"].get<std::string>();
}

std::uint64_t RunConfig::seed() const { return tree_["seed"].get<std::uint64_t>(); }

std::size_t RunConfig::workers() const {
  const auto w = tree_["workers"].get<std::int64_t>();
  require(w >= 1, ErrorCode::kConfig, "workers must be >= 1");
  return static_cast<std::size_t>(w);
}

namespace {

std::size_t count(const json& j, const char* key) {
  const auto v = j.at(key).get<std::int64_t>();
  require(v >= 0, ErrorCode::kConfig, std::string(key) + " must be >= 0");
  return static_cast<std::size_t>(v);
}

}  // namespace

BackboneConfig RunConfig::backbone(std::size_t num_base_classes) const {
  BackboneConfig c;
  c.channels = tree_["backbone"]["channels"].get<std::vector<std::size_t>>();
  c.num_base_classes = num_base_classes;
  c.seed = backbone_seed(seed());
  return c;
}

PretrainConfig RunConfig::pretrain() const {
  const auto& j = tree_["pretrain"];
  PretrainConfig c;
  c.lambda = j["lambda"].get<double>();
  c.eta = j["eta"].get<double>();
  c.tau = j["tau"].get<double>();
  c.eq1_literal = j["eq1_literal"].get<bool>();
  c.batch_size = count(j, "batch_size");
  c.epochs = count(j, "epochs");
  c.lr = j["lr"].get<double>();
  c.use_global = j["use_global"].get<bool>();
  c.use_local = j["use_local"].get<bool>();
  c.use_adapter = j["use_adapter"].get<bool>();
  c.adapter_hidden = count(j, "adapter_hidden");
  c.validate();
  return c;
}

PvsaConfig RunConfig::pvsa() const {
  const auto& j = tree_["pvsa"];
  PvsaConfig c;
  c.alpha = j["alpha"].get<double>();
  c.beta = j["beta"].get<double>();
  c.tau = j["tau"].get<double>();
  c.num_entities = count(j, "num_entities");
  c.use_svpe = j["use_svpe"].get<bool>();
  c.use_pc = j["use_pc"].get<bool>();
  c.use_entities = j["use_entities"].get<bool>();
  c.num_stages = count(j, "num_stages");
  c.raw_attention = j["raw_attention"].get<bool>();
  c.entity_mean = j["entity_mean"].get<bool>();
  c.zero_init_output = j["zero_init_output"].get<bool>();
  c.validate(tree_["backbone"]["channels"].size());
  return c;
}

FinetuneConfig RunConfig::finetune() const {
  const auto& j = tree_["finetune"];
  FinetuneConfig c;
  c.epochs = count(j, "epochs");
  c.episodes_per_epoch = count(j, "episodes_per_epoch");
  c.lr = j["lr"].get<double>();
  c.way = count(j, "way");
  c.shots = count(j, "shots");
  c.queries = count(j, "queries");
  c.val_fraction = j["val_fraction"].get<double>();
  c.val_episodes = count(j, "val_episodes");
  c.unfreeze_last_block = j["unfreeze_last_block"].get<bool>();
  c.validate();
  return c;
}

EpisodeProtocol RunConfig::protocol() const {
  const auto& j = tree_["eval"];
  EpisodeProtocol p;
  p.way = count(j, "way");
  p.shots = count(j, "shots");
  p.queries = count(j, "queries");
  p.tasks = count(j, "tasks");
  p.validate();
  return p;
}

ProviderConfig RunConfig::providers() const {
  const auto& j = tree_["providers"];
  ProviderConfig c;
  c.mode = parse_provider_mode(j["mode"].get<std::string>());
  c.embed_dim = count(j, "embed_dim");
  c.seed = j["seed"].get<std::uint64_t>();
  c.fixture_noise = j["fixture_noise"].get<double>();
  const auto cache = j["cache_dir"].get<std::string>();
  c.cache_dir = cache.empty() ? run_dir() / "cache" : fs::path(cache);
  c.entity_template = j["entity_template"].get<std::string>();
  c.fixture_entities_dir = j["fixture_entities_dir"].get<std::string>();
  for (auto* h : {&c.llm_http, &c.embed_http}) {
    h->base_url = j["base_url"].get<std::string>();
    h->retries = static_cast<int>(count(j, "retries"));
    h->max_in_flight = static_cast<int>(std::max<std::size_t>(1, count(j, "max_in_flight")));
    h->timeout_seconds = static_cast<int>(count(j, "timeout_seconds"));
  }
  c.llm_http.model = j["llm_model"].get<std::string>();
  c.embed_http.model = j["embed_model"].get<std::string>();
  require(c.embed_dim >= 1, ErrorCode::kConfig, "providers.embed_dim must be >= 1");
  return c;
}

SyntheticSpec RunConfig::synthetic() const {
  const auto& j = tree_["synth"];
  SyntheticSpec s;
  s.domain = j["domain"].get<std::string>();
  s.name = "synthetic-" + s.domain;
  s.num_base = count(j, "num_base");
  s.num_val = count(j, "num_val");
  s.num_novel = count(j, "num_novel");
  s.images_per_class = count(j, "images_per_class");
  s.image_size = count(j, "image_size");
  s.hue_shift_degrees = j["hue_shift_degrees"].get<double>();
  s.texture_contrast = j["texture_contrast"].get<double>();
  s.distractors = count(j, "distractors");
  s.compositional = j["compositional"].get<bool>();
  s.seed = seed();
  return s;
}

std::size_t RunConfig::entity_k() const {
  const auto k = count(tree_["entities"], "k");
  require(k >= 1, ErrorCode::kConfig, "entities.k must be >= 1");
  return k;
}

std::size_t RunConfig::entity_n_gen() const {
  const auto n = count(tree_["entities"], "n_gen");
  require(n >= 1, ErrorCode::kConfig, "entities.n_gen must be >= 1");
  return n;
}

// ---------------------------------------------------------------------------

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kMissingPrerequisite:
    case ErrorCode::kMissingEntities:
      return 3;
    case ErrorCode::kProviderUnavailable:
    case ErrorCode::kMalformedResponse:
      return 4;
    default:
      return 2;
  }
}

std::string remediation_hint(const Error& e) {
  if (e.code() == ErrorCode::kMissingEntities) return "run `ecer gen-entities` with the same run id first";
  if (e.code() != ErrorCode::kMissingPrerequisite) return "";
  const std::string msg = e.what();
  if (msg.find("backbone.ckpt") != std::string::npos) return "run `ecer pretrain` with the same run id first";
  if (msg.find("model.ckpt") != std::string::npos) return "run `ecer finetune` with the same run id first";
  if (msg.find("entities") != std::string::npos) return "run `ecer gen-entities` with the same run id first";
  return "";
}

std::uint64_t backbone_seed(std::uint64_t root) { return derive_seed(root, 0xBB); }
std::uint64_t pvsa_seed(std::uint64_t root) { return derive_seed(root, 0x9E5A); }
std::uint64_t eval_seed(std::uint64_t root) { return derive_seed(root, 0xE7A1); }

// ---------------------------------------------------------------------------

namespace {

Dataset load_dataset(const RunConfig& config) {
  const auto path = config.tree()["dataset"]["manifest"].get<std::string>();
  if (path.empty()) fail(ErrorCode::kConfig, "dataset.manifest is not set (use --manifest)");
  return Dataset::load(path);
}

ProviderConfig provider_config(const RunConfig& config, const Dataset* dataset) {
  auto pc = config.providers();
  if (pc.fixture_entities_dir.empty() && dataset) {
    if (auto dir = dataset->entity_path(); dir && fs::exists(*dir)) pc.fixture_entities_dir = *dir;
  }
  return pc;
}

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

/// CSV whose first line is a comment carrying the config echo.
class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const json& echo, const std::vector<std::string>& header) : path_(path) {
    fs::create_directories(path.parent_path());
    out_.open(path);
    if (!out_) fail(ErrorCode::kIo, "cannot write " + path.string());
    out_ << "# config " << echo.dump() << "\n";
    for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
    out_ << "\n";
  }
  template <typename... T>
  void row(const T&... values) {
    std::size_t i = 0;
    ((out_ << (i++ ? "," : "") << values), ...);
    out_ << "\n";
    out_.flush();
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

Checkpoint require_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorCode::kMissingPrerequisite, "missing prerequisite " + path.string());
  return Checkpoint::load(path);
}

BackboneConfig backbone_config_from(const json& meta) {
  const auto& b = meta.at("backbone");
  BackboneConfig c;
  c.channels = b.at("channels").get<std::vector<std::size_t>>();
  c.input_size = b.at("input_size").get<std::size_t>();
  c.num_base_classes = b.at("num_base_classes").get<std::size_t>();
  c.seed = b.at("seed").get<std::uint64_t>();
  return c;
}

json backbone_meta(const BackboneConfig& c) {
  return {{"channels", c.channels},
          {"input_size", c.input_size},
          {"num_base_classes", c.num_base_classes},
          {"seed", c.seed}};
}

/// Backbone from the run; the fine-tuned last block wins when present.
Backbone load_backbone(const RunPaths& paths, std::string* domain = nullptr) {
  const auto ck = require_checkpoint(paths.backbone_ckpt());
  Backbone bb(backbone_config_from(ck.meta));
  bb.load_from(ck);
  if (domain) *domain = ck.meta.value("domain", "");
  if (fs::exists(paths.model_ckpt())) {
    const auto mk = Checkpoint::load(paths.model_ckpt());
    if (mk.meta.value("backbone_finetuned", false)) bb.load_from(mk);
  }
  return bb;
}

EntityStore load_entities(const RunPaths& paths) {
  if (!fs::is_directory(paths.entities_dir())) {
    fail(ErrorCode::kMissingPrerequisite, "missing prerequisite: no entities at " + paths.entities_dir().string());
  }
  return EntityStore::load_dir(paths.entities_dir());
}

PvsaModel make_model(const RunConfig& config, const Backbone& bb, std::size_t semantic_dim) {
  return PvsaModel(bb.config().channels, semantic_dim, config.pvsa(), pvsa_seed(config.seed()));
}

/// Model for evaluation: a trained checkpoint is required whenever the
/// semantic branch is on.
PvsaModel load_model(const RunConfig& config, const RunPaths& paths, const Backbone& bb,
                     std::size_t semantic_dim) {
  auto model = make_model(config, bb, semantic_dim);
  if (config.pvsa().use_svpe) {
    const auto ck = require_checkpoint(paths.model_ckpt());
    // Switches that decide which layers carry trained weights must match.
    if (ck.meta.contains("pvsa")) {
      const auto trained = ck.meta["pvsa"];
      const auto now = config.pvsa().to_json();
      for (const char* key : {"use_pc", "use_entities", "stages", "raw_attention", "entity_mean"}) {
        if (trained.contains(key) && trained[key] != now[key]) {
          fail(ErrorCode::kConfig, std::string("model.ckpt was fine-tuned with pvsa.") +
                                       (std::string(key) == "stages" ? "num_stages" : key) + "=" +
                                       trained[key].dump() + " but this run asks for " + now[key].dump() +
                                       "; rerun finetune with the same setting or use another --run-id");
        }
      }
    }
    model.load_from(ck);
  }
  return model;
}

void log_epoch(const EpochMetrics& m) {
  spdlog::info("pretrain epoch {:3d}  ce {:.4f}  global {:.4f}  local {:.4f}  total {:.4f}  acc {:.3f}", m.epoch,
               m.ce, m.it_global, m.it_local, m.total, m.base_train_acc);
}

struct PretrainOutcome {
  Backbone backbone;
  std::vector<EpochMetrics> epochs;
};

PretrainOutcome pretrain_backbone(const RunConfig& config, const Dataset& ds, EmbeddingProvider& embedder,
                                  CsvWriter* csv) {
  const auto caption_path = ds.caption_path();
  if (!caption_path) fail(ErrorCode::kMissingFile, "dataset manifest names no caption manifest");
  const auto captions = load_captions(*caption_path);
  const auto data = prepare_pretrain_data(ds, captions, embedder);
  auto bc = config.backbone(data.base.num_classes());
  bc.input_size = ds.manifest().image_size;
  const auto pc = config.pretrain();
  PretrainOutcome out{Backbone(bc), {}};
  TextAdapter adapter(embedder.dim(), bc.feature_dim(), pc, derive_seed(config.seed(), 0xADA));
  out.epochs = run_pretraining(out.backbone, adapter, data, pc, derive_seed(config.seed(), 0x9E7), [&](const EpochMetrics& m) {
    log_epoch(m);
    if (csv) csv->row(m.epoch, m.ce, m.it_global, m.it_local, m.total, m.base_train_acc);
  });
  return out;
}

std::vector<std::string> entity_classes(const RunConfig& config, const Dataset& ds) {
  std::vector<std::string> names;
  for (const auto& c : ds.manifest().classes) names.push_back(c.class_name);
  const auto target = config.tree()["xdomain"]["manifest"].get<std::string>();
  if (!target.empty()) {
    const auto t = Dataset::load(target);
    for (const auto& c : t.manifest().classes) {
      if (std::find(names.begin(), names.end(), c.class_name) == names.end()) names.push_back(c.class_name);
    }
  }
  return names;
}

json with_run(json config, const RunConfig& run) {
  if (!config.is_object()) config = json::object();
  config["run"] = run.echo();
  return config;
}

}  // namespace

GenSynthResult cmd_gen_synth(const RunConfig& config) {
  const auto spec = config.synthetic();
  const auto out = config.tree()["synth"]["out_dir"].get<std::string>();
  const fs::path dir = out.empty() ? config.run_dir() / "synthetic" : fs::path(out);
  auto providers = make_providers(provider_config(config, nullptr));
  const auto res = generate_synthetic(spec, dir, *providers.embedder);
  write_json(dir / "generation.json", {{"config", config.echo()}});
  GenSynthResult r;
  r.manifest_path = res.manifest_path;
  r.classes = res.manifest.classes.size();
  for (const auto& c : res.manifest.classes) r.images += c.image_ids.size();
  spdlog::info("synthetic dataset: {} classes, {} images -> {}", r.classes, r.images, r.manifest_path.string());
  return r;
}

PretrainResult cmd_pretrain(const RunConfig& config) {
  const RunPaths paths{config.run_dir()};
  const auto ds = load_dataset(config);
  auto providers = make_providers(provider_config(config, &ds));
  fs::create_directories(paths.dir);
  CsvWriter csv(paths.pretrain_csv(), config.echo(), {"epoch", "ce", "it_global", "it_local", "total", "base_train_acc"});
  auto out = pretrain_backbone(config, ds, *providers.embedder, &csv);
  Checkpoint ck;
  ck.meta = {{"kind", "backbone"},
             {"config", config.echo()},
             {"backbone", backbone_meta(out.backbone.config())},
             {"domain", ds.manifest().domain},
             {"dataset", ds.manifest().name}};
  if (!out.epochs.empty()) ck.meta["final_base_train_acc"] = out.epochs.back().base_train_acc;
  out.backbone.save_to(ck);
  ck.save(paths.backbone_ckpt());
  spdlog::info("wrote {}", paths.backbone_ckpt().string());
  return {std::move(out.epochs), paths.backbone_ckpt()};
}

GenEntitiesResult cmd_gen_entities(const RunConfig& config) {
  const RunPaths paths{config.run_dir()};
  const auto ds = load_dataset(config);
  auto providers = make_providers(provider_config(config, &ds));
  const auto k = config.entity_k();
  const auto n_gen = config.entity_n_gen();
  const auto& ej = config.tree()["entities"];
  ScoreOptions opts{.against_prompt = ej["against_prompt"].get<bool>()};
  std::optional<double> floor;
  if (!ej["min_similarity"].is_null()) floor = ej["min_similarity"].get<double>();

  GenEntitiesResult r;
  std::optional<Error> first_error;
  for (const auto& name : entity_classes(config, ds)) {
    try {
      const auto resp = providers.llm->generate_entities(name, n_gen);
      const auto set = build_entity_set(name, resp.raw_candidates, *providers.embedder, k, opts, floor);
      for (const auto& w : set.warnings) spdlog::warn("{}: {}", name, w);
      r.warnings += set.warnings.size();
      r.files.push_back(EntityStore::write(paths.entities_dir(), set, config.echo()));
      spdlog::info("{}: {} selected, {} rejected{}", name, set.selected.size(), set.rejected.size(),
                   resp.cached ? " (cache hit)" : "");
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kProviderUnavailable && e.code() != ErrorCode::kMalformedResponse) throw;
      spdlog::error("{}: {}", name, e.what());
      r.failed.push_back(name);
      if (!first_error) first_error = e;
    }
  }
  r.cache_hits = providers.llm->cache_hits();
  r.provider_calls = providers.llm->provider_calls();
  spdlog::info("entities: {} written, {} failed, {} cache hits, {} provider calls", r.files.size(), r.failed.size(),
               r.cache_hits, r.provider_calls);
  if (first_error) {
    throw Error(first_error->code(), std::to_string(r.failed.size()) + " class(es) failed, first: " +
                                         first_error->what());
  }
  return r;
}

FinetuneCommandResult cmd_finetune(const RunConfig& config) {
  const RunPaths paths{config.run_dir()};
  const auto ds = load_dataset(config);
  auto bb = load_backbone(paths);
  const auto entities = load_entities(paths);
  auto providers = make_providers(provider_config(config, &ds));
  auto model = make_model(config, bb, providers.embedder->dim());
  const auto fc = config.finetune();

  CsvWriter csv(paths.finetune_csv(), config.echo(), {"epoch", "loss_mean", "train_acc", "val_acc"});
  FinetuneCommandResult out;
  out.result = finetune(bb, model, ds, entities, *providers.embedder, fc, derive_seed(config.seed(), 0xF7),
                        [&](const FinetuneEpoch& e) {
                          spdlog::info("finetune epoch {:3d}  loss {:.4f}  train {:.3f}  val {:.3f}", e.epoch,
                                       e.loss_mean, e.train_acc, e.val_acc);
                          csv.row(e.epoch, e.loss_mean, e.train_acc, e.val_acc);
                        });
  const auto& r = out.result;
  spdlog::info("validation ({}): before {:.4f}, best {:.4f} at epoch {}", r.validation_source, r.val_acc_before,
               r.best_val_acc, r.best_epoch);

  Checkpoint ck;
  ck.meta = {{"kind", "pvsa"},
             {"config", config.echo()},
             {"pvsa", model.config().to_json()},
             {"semantic_dim", model.semantic_dim()},
             {"backbone_finetuned", fc.unfreeze_last_block},
             {"finetune",
              {{"val_acc_before", r.val_acc_before},
               {"best_val_acc", r.best_val_acc},
               {"best_epoch", r.best_epoch},
               {"validation_source", r.validation_source}}}};
  model.save_to(ck);
  if (fc.unfreeze_last_block) bb.save_to(ck);
  ck.save(paths.model_ckpt());
  out.checkpoint = paths.model_ckpt();
  return out;
}

EvalReport cmd_eval(const RunConfig& config) {
  const RunPaths paths{config.run_dir()};
  const EvalOptions opts{config.protocol(), eval_seed(config.seed()), config.workers()};
  const auto ds = load_dataset(config);
  const auto bb = load_backbone(paths);
  auto providers = make_providers(provider_config(config, &ds));
  const auto model = load_model(config, paths, bb, providers.embedder->dim());
  const auto entities = config.pvsa().use_svpe ? load_entities(paths) : EntityStore{};
  auto report = evaluate(bb, model, ds, entities, *providers.embedder, opts);
  report.config = with_run(report.config, config);
  write_json(paths.eval_report(), report.to_json());
  return report;
}

EvalReport cmd_eval_xdomain(const RunConfig& config) {
  const RunPaths paths{config.run_dir()};
  const EvalOptions opts{config.protocol(), eval_seed(config.seed()), config.workers()};
  const auto target_path = config.tree()["xdomain"]["manifest"].get<std::string>();
  if (target_path.empty()) fail(ErrorCode::kConfig, "xdomain.manifest is not set");
  const auto target = Dataset::load(target_path);
  std::string domain;
  const auto bb = load_backbone(paths, &domain);
  if (const auto s = config.tree()["xdomain"]["source"].get<std::string>(); !s.empty()) domain = s;
  auto providers = make_providers(provider_config(config, &target));
  const auto model = load_model(config, paths, bb, providers.embedder->dim());
  const auto entities = config.pvsa().use_svpe ? load_entities(paths) : EntityStore{};
  auto report = evaluate_cross_domain(bb, model, domain, target, entities, *providers.embedder, opts);
  report.config = with_run(report.config, config);
  write_json(paths.xdomain_report(), report.to_json());
  return report;
}

namespace {

/// Global feature vector of every image in a split, one CSV row each.
std::filesystem::path export_features(const RunConfig& config, const Dataset& ds, const Backbone& bb,
                                      const std::string& split_name) {
  const auto split = ds.split(split_name);
  const auto path = RunPaths{config.run_dir()}.dir / ("features_" + class_file_stem(split_name) + ".csv");
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out << "# config " << config.echo().dump() << "\n";
  out << "image_id,class_name";
  const std::size_t dim = bb.config().feature_dim();
  for (std::size_t c = 0; c < dim; ++c) out << ",f" << c;
  out << "\n";
  out.precision(9);
  constexpr std::size_t kChunk = 64;
  for (std::size_t k = 0; k < split.class_names.size(); ++k) {
    const auto& ids = split.image_ids[k];
    for (std::size_t lo = 0; lo < ids.size(); lo += kChunk) {
      const std::vector<std::string> chunk(ids.begin() + lo, ids.begin() + std::min(ids.size(), lo + kChunk));
      NoGradGuard ng;
      const auto g = bb.infer(ds.load_images(chunk)).global_vec;
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        out << chunk[i] << ',' << split.class_names[k];
        for (std::size_t c = 0; c < dim; ++c) out << ',' << g.at(i * dim + c);
        out << '\n';
      }
    }
  }
  spdlog::info("wrote {} features to {}", split_name, path.string());
  return path;
}

}  // namespace

ExportMapsResult cmd_export_maps(const RunConfig& config) {
  const RunPaths paths{config.run_dir()};
  const auto& ex = config.tree()["export"];
  const auto image_id = ex["image_id"].get<std::string>();
  const auto features_split = ex["features_split"].get<std::string>();
  if (image_id.empty() && features_split.empty()) {
    fail(ErrorCode::kConfig, "export.image_id is not set (use --image-id, or --export.features_split)");
  }
  const auto ds = load_dataset(config);
  ExportMapsResult out;
  if (image_id.empty()) {
    out.features_csv = export_features(config, ds, load_backbone(paths), features_split);
    return out;
  }
  if (!ds.has_image(image_id)) fail(ErrorCode::kMissingImage, "unknown image id '" + image_id + "'");
  auto class_name = ex["class_name"].get<std::string>();
  if (class_name.empty()) class_name = ds.class_of(image_id);
  const auto& classes = ds.manifest().classes;
  if (std::none_of(classes.begin(), classes.end(), [&](const ClassEntry& c) { return c.class_name == class_name; })) {
    fail(ErrorCode::kUnknownClass, "unknown class '" + class_name + "'");
  }
  if (!config.pvsa().use_svpe) fail(ErrorCode::kConfig, "export-maps needs pvsa.use_svpe");

  const auto bb = load_backbone(paths);
  if (!features_split.empty()) out.features_csv = export_features(config, ds, bb, features_split);
  auto providers = make_providers(provider_config(config, &ds));
  const auto model = load_model(config, paths, bb, providers.embedder->dim());
  const auto entities = load_entities(paths);
  const std::vector<std::string> one{class_name};
  const auto k_max = model.config().effective_entities();
  const auto table = SemanticTable::build(one, entities, *providers.embedder, k_max);
  const auto k = table.common_k(one, k_max);
  const auto sem = table.batch(one, k);
  std::vector<std::string> items{prompt_class(class_name)};
  if (k > 0) {
    const auto& set = entities.at(class_name);
    for (std::size_t j = 0; j < k; ++j) items.push_back(set.selected[j].text);
  }

  StageFeatures feats;
  {
    NoGradGuard ng;
    const std::vector<std::string> ids{image_id};
    feats = bb.infer(ds.load_images(ids));
  }
  out.grids = similarity_grids(model, feats.maps, feats.spatial_dims, feats.global_vec, sem, items);
  out.dir = paths.maps_dir() / (class_file_stem(image_id) + "__" + class_file_stem(class_name));
  fs::create_directories(out.dir);
  json index = {{"config", config.echo()},
                {"image_id", image_id},
                {"class_name", class_name},
                {"items", items},
                {"grids", json::array()}};
  for (std::size_t g = 0; g < out.grids.size(); ++g) {
    const auto& grid = out.grids[g];
    const auto item_idx = g % items.size();
    const auto stem = "block" + std::to_string(grid.block + 1) + "_item" + std::to_string(item_idx);
    write_grid_csv(out.dir / (stem + ".csv"), grid);
    write_grid_pgm(out.dir / (stem + ".pgm"), grid);
    index["grids"].push_back({{"file", stem},
                              {"block", grid.block + 1},
                              {"item", grid.item},
                              {"height", grid.height},
                              {"width", grid.width}});
  }
  write_json(out.dir / "index.json", index);
  spdlog::info("wrote {} grids to {}", out.grids.size(), out.dir.string());
  return out;
}

std::vector<std::pair<std::string, json>> pretrain_ablation_rows() {
  return {{"ce", {{"use_global", false}, {"use_local", false}, {"use_adapter", false}}},
          {"ce+global", {{"use_global", true}, {"use_local", false}, {"use_adapter", false}}},
          {"ce+global+local", {{"use_global", true}, {"use_local", true}, {"use_adapter", false}}},
          {"ce+global+local+adapter", {{"use_global", true}, {"use_local", true}, {"use_adapter", true}}}};
}

std::vector<std::pair<std::string, json>> finetune_ablation_rows() {
  return {{"baseline", {{"use_svpe", false}, {"use_pc", false}, {"use_entities", false}}},
          {"svpe", {{"use_svpe", true}, {"use_pc", false}, {"use_entities", false}}},
          {"svpe+pc", {{"use_svpe", true}, {"use_pc", true}, {"use_entities", false}}},
          {"svpe+entity", {{"use_svpe", true}, {"use_pc", false}, {"use_entities", true}}},
          {"svpe+pc+entity", {{"use_svpe", true}, {"use_pc", true}, {"use_entities", true}}}};
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

AblationRow run_finetune_row(const RunConfig& row_config, const std::string& name, const json& flags, Backbone& bb,
                             const Dataset& ds, const EntityStore& entities, EmbeddingProvider& embedder,
                             const fs::path& dir) {
  auto model = make_model(row_config, bb, embedder.dim());
  const auto fc = row_config.finetune();
  // Tensors share storage on copy; reload so an unfrozen block stays per-row.
  Checkpoint ck;
  bb.save_to(ck);
  Backbone local(bb.config());
  local.load_from(ck);
  const auto r = finetune(local, model, ds, entities, embedder, fc, derive_seed(row_config.seed(), 0xF7));
  EvalOptions opts{row_config.protocol(), eval_seed(row_config.seed()), row_config.workers()};
  AblationRow row{name, flags, row_config.echo(), evaluate(local, model, ds, entities, embedder, opts)};
  row.report.config = with_run(row.report.config, row_config);
  row.report.config["finetune"] = {{"val_acc_before", r.val_acc_before},
                                   {"best_val_acc", r.best_val_acc},
                                   {"best_epoch", r.best_epoch}};
  write_json(dir / "config.json", row_config.echo());
  write_json(dir / "eval_report.json", row.report.to_json());
  spdlog::info("ablation {}: {}", name, row.report.summary());
  return row;
}

}  // namespace

AblationResult cmd_ablate(const RunConfig& config, const std::vector<std::string>& tables) {
  for (const auto& t : tables) {
    require(t == "pretrain" || t == "finetune", ErrorCode::kConfig,
            "unknown ablation table '" + t + "' (expected pretrain or finetune)");
  }
  const auto want = [&](const char* t) { return std::find(tables.begin(), tables.end(), t) != tables.end(); };
  const RunPaths paths{config.run_dir()};
  const auto ds = load_dataset(config);
  const auto entities = load_entities(paths);
  auto providers = make_providers(provider_config(config, &ds));
  AblationResult out;

  if (want("finetune")) {
    auto bb = load_backbone(paths);
    CsvWriter csv(paths.ablation_dir() / "finetune_table.csv", config.echo(),
                  {"row", "svpe", "pc", "entity", "mean_acc", "ci95", "summary", "config_hash"});
    for (const auto& [name, flags] : finetune_ablation_rows()) {
      RunConfig rc = config;
      rc.merge({{"pvsa", flags}}, "ablation " + name);
      auto row = run_finetune_row(rc, name, flags, bb, ds, entities, *providers.embedder,
                                  paths.ablation_dir() / "finetune" / name);
      csv.row(name, flags["use_svpe"].get<bool>(), flags["use_pc"].get<bool>(), flags["use_entities"].get<bool>(),
              row.report.mean_acc, row.report.ci95, row.report.summary(), hex64(fnv1a64(rc.echo().dump())));
      out.finetune_rows.push_back(std::move(row));
    }
  }
  if (want("pretrain")) {
    CsvWriter csv(paths.ablation_dir() / "pretrain_table.csv", config.echo(),
                  {"row", "ce", "global", "local", "adapter", "mean_acc", "ci95", "summary", "config_hash"});
    for (const auto& [name, flags] : pretrain_ablation_rows()) {
      RunConfig rc = config;
      rc.merge({{"pretrain", flags}}, "ablation " + name);
      auto pre = pretrain_backbone(rc, ds, *providers.embedder, nullptr);
      auto row = run_finetune_row(rc, name, flags, pre.backbone, ds, entities, *providers.embedder,
                                  paths.ablation_dir() / "pretrain" / name);
      if (!pre.epochs.empty()) row.report.config["final_base_train_acc"] = pre.epochs.back().base_train_acc;
      csv.row(name, true, flags["use_global"].get<bool>(), flags["use_local"].get<bool>(),
              flags["use_adapter"].get<bool>(), row.report.mean_acc, row.report.ci95, row.report.summary(),
              hex64(fnv1a64(rc.echo().dump())));
      out.pretrain_rows.push_back(std::move(row));
    }
  }
  return out;
}

}  // namespace ecer
