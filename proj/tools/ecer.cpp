// ecer: command-line front end for the few-shot pipeline.
//
//   ecer gen-synth    --run-id demo
//   ecer pretrain     --run-id demo --manifest runs/demo/synthetic/manifest.json
//   ecer gen-entities --run-id demo --manifest ...
//   ecer finetune     --run-id demo --manifest ...
//   ecer eval         --run-id demo --manifest ... --tasks 600
//
// Any config key can be overridden as a dotted flag, e.g. --pretrain.epochs 200.

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ecer/pipeline.hpp"

namespace {

struct Common {
  std::string config_file;
  std::string preset;
  std::optional<std::string> run_id, output_dir, manifest, image_id, class_name;
  std::optional<std::uint64_t> seed;
  std::optional<long long> way, shots, queries, tasks, workers;
  std::string tables = "finetune,pretrain";
  bool quiet = false;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_file, "JSON config file");
  sub->add_option("--preset", c.preset, "desk or paper");
  sub->add_option("--run-id", c.run_id, "run id (outputs go to {output_dir}/{run_id})");
  sub->add_option("--output-dir", c.output_dir, "output root");
  sub->add_option("--seed", c.seed, "root seed");
  sub->add_option("--manifest", c.manifest, "dataset manifest");
  sub->add_option("--way", c.way, "episode way (eval)");
  sub->add_option("--shots", c.shots, "support shots per class (eval)");
  sub->add_option("--queries", c.queries, "queries per class (eval)");
  sub->add_option("--tasks", c.tasks, "number of evaluation episodes");
  sub->add_option("--workers", c.workers, "parallel evaluation workers");
  sub->add_option("--image-id", c.image_id, "image for export-maps");
  sub->add_option("--class-name", c.class_name, "class for export-maps");
  sub->add_flag("-q,--quiet", c.quiet, "only warnings and errors");
  sub->allow_extras();
}

/// --a.b value | --a.b=value pairs left over after CLI11 parsing.
void apply_dotted(ecer::RunConfig& cfg, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const auto& a = extras[i];
    if (a.rfind("--", 0) != 0) ecer::fail(ecer::ErrorCode::kConfig, "unexpected argument '" + a + "'");
    auto key = a.substr(2);
    std::string value;
    if (auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else if (!cfg.has_key(key)) {
      ecer::fail(ecer::ErrorCode::kConfig, "unknown option or config key '--" + key + "'");
    } else if (i + 1 < extras.size()) {
      value = extras[++i];
    } else {
      ecer::fail(ecer::ErrorCode::kConfig, "missing value for '--" + key + "'");
    }
    cfg.set(key, value);
  }
}

ecer::RunConfig build_config(const Common& c, const std::vector<std::string>& extras) {
  ecer::RunConfig cfg;
  if (!c.preset.empty()) cfg.apply_preset(c.preset);
  if (!c.config_file.empty()) cfg.merge_file(c.config_file);
  using nlohmann::json;
  json flags = json::object();
  if (c.run_id) flags["run_id"] = *c.run_id;
  if (c.output_dir) flags["output_dir"] = *c.output_dir;
  if (c.seed) flags["seed"] = *c.seed;
  if (c.workers) flags["workers"] = *c.workers;
  if (c.manifest) flags["dataset"]["manifest"] = *c.manifest;
  if (c.way) flags["eval"]["way"] = *c.way;
  if (c.shots) flags["eval"]["shots"] = *c.shots;
  if (c.queries) flags["eval"]["queries"] = *c.queries;
  if (c.tasks) flags["eval"]["tasks"] = *c.tasks;
  if (c.image_id) flags["export"]["image_id"] = *c.image_id;
  if (c.class_name) flags["export"]["class_name"] = *c.class_name;
  cfg.merge(flags, "command line");
  apply_dotted(cfg, extras);
  return cfg;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s + ",") {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  return out;
}

int run(const std::string& name, const ecer::RunConfig& cfg, const Common& c) {
  using namespace ecer;
  if (name == "gen-synth") {
    const auto r = cmd_gen_synth(cfg);
    std::printf("%s\n", r.manifest_path.string().c_str());
  } else if (name == "pretrain") {
    const auto r = cmd_pretrain(cfg);
    if (!r.epochs.empty()) std::printf("base train accuracy %.2f%%\n", 100.0 * r.epochs.back().base_train_acc);
  } else if (name == "gen-entities") {
    const auto r = cmd_gen_entities(cfg);
    std::printf("%zu entity sets, %zu cache hits, %zu provider calls\n", r.files.size(), r.cache_hits,
                r.provider_calls);
  } else if (name == "finetune") {
    const auto r = cmd_finetune(cfg);
    std::printf("validation %.2f%% -> %.2f%% (epoch %zu)\n", 100.0 * r.result.val_acc_before,
                100.0 * r.result.best_val_acc, r.result.best_epoch);
  } else if (name == "eval") {
    std::printf("%s\n", cmd_eval(cfg).summary().c_str());
  } else if (name == "eval-xdomain") {
    std::printf("%s\n", cmd_eval_xdomain(cfg).summary().c_str());
  } else if (name == "export-maps") {
    const auto r = cmd_export_maps(cfg);
    if (!r.grids.empty()) std::printf("%zu grids in %s\n", r.grids.size(), r.dir.string().c_str());
    if (!r.features_csv.empty()) std::printf("features in %s\n", r.features_csv.string().c_str());
  } else if (name == "ablate") {
    const auto r = cmd_ablate(cfg, split_list(c.tables));
    for (const auto& row : r.finetune_rows) std::printf("finetune %-24s %s\n", row.name.c_str(), row.report.summary().c_str());
    for (const auto& row : r.pretrain_rows) std::printf("pretrain %-24s %s\n", row.name.c_str(), row.report.summary().c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Entity-guided few-shot learning pipeline"};
  app.require_subcommand(1);
  Common common;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-synth", "render the synthetic dataset"},
      {"pretrain", "multi-modal backbone pre-training"},
      {"gen-entities", "generate and filter class entities"},
      {"finetune", "episode-based fine-tuning"},
      {"eval", "episodic evaluation on the novel split"},
      {"eval-xdomain", "evaluation on another domain's novel split"},
      {"export-maps", "per-block semantic similarity grids and raw feature dumps"},
      {"ablate", "ablation tables (fine-tuning and pre-training switches)"},
  };
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub, common);
    if (name == "ablate") sub->add_option("--tables", common.tables, "finetune,pretrain");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  spdlog::set_pattern("[%H:%M:%S] %^%l%$ %v");
  if (common.quiet) spdlog::set_level(spdlog::level::warn);
  CLI::App* chosen = app.get_subcommands().front();
  try {
    const auto cfg = build_config(common, chosen->remaining());
    return run(chosen->get_name(), cfg, common);
  } catch (const ecer::Error& e) {
    spdlog::error("{} [{}]", e.what(), ecer::error_code_name(e.code()));
    if (const auto hint = ecer::remediation_hint(e); !hint.empty()) spdlog::error("hint: {}", hint);
    return ecer::exit_code_for(e.code());
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
}
