#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "ecer/entity_selection.hpp"
#include "ecer/pipeline.hpp"

using namespace ecer;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("ecer_test_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

/// Tiny run: 5 base / 5 novel classes, one pre-training epoch.
RunConfig tiny_config(const fs::path& out, const std::string& run_id) {
  RunConfig c;
  c.merge({{"output_dir", out.string()},
           {"run_id", run_id},
           {"providers", {{"mode", "fixture"}, {"embed_dim", 64}}},
           {"backbone", {{"channels", {4, 8, 16, 32}}}},
           {"synth", {{"num_base", 5}, {"num_val", 0}, {"num_novel", 5}, {"images_per_class", 20}}},
           {"pretrain", {{"epochs", 1}, {"batch_size", 16}, {"adapter_hidden", 16}}},
           {"finetune", {{"epochs", 1}, {"episodes_per_epoch", 3}, {"val_episodes", 3}, {"queries", 5}}},
           {"eval", {{"tasks", 6}, {"queries", 5}}}});
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(ECER_CLI_PATH) + " " + args + " -q > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, DefaultsAndPaperPreset) {
  RunConfig c;
  EXPECT_EQ(c.pvsa().alpha, 0.2);
  EXPECT_EQ(c.pvsa().beta, 0.8);
  c.apply_preset("paper");
  const auto& t = c.echo();
  EXPECT_EQ(t["preset"], "paper");
  EXPECT_EQ(t["pretrain"]["epochs"], 200);
  EXPECT_EQ(t["pretrain"]["batch_size"], 128);
  EXPECT_EQ(t["finetune"]["epochs"], 50);
  EXPECT_EQ(t["entities"]["k"], 10);
  EXPECT_EQ(t["pvsa"]["alpha"], 0.2);
  EXPECT_EQ(t["pvsa"]["beta"], 0.8);
  EXPECT_EQ(c.protocol().tasks, 600u);
  EXPECT_EQ(c.protocol().way, 5u);
  EXPECT_EQ(c.protocol().queries, 15u);
  EXPECT_THROW(c.apply_preset("huge"), Error);
}

TEST(Config, LayeringOrder) {
  const auto dir = scratch("layers");
  {
    std::ofstream f(dir / "c.json");
    f << R"({"pretrain": {"epochs": 7, "lr": 0.01}, "eval": {"tasks": 50}})";
  }
  RunConfig c;
  c.apply_preset("paper");
  c.merge_file(dir / "c.json");
  c.set("eval.tasks", "9");
  EXPECT_EQ(c.pretrain().epochs, 7u);   // file beats preset
  EXPECT_EQ(c.pretrain().lr, 0.01);
  EXPECT_EQ(c.pretrain().batch_size, 128u);  // preset kept where the file is silent
  EXPECT_EQ(c.protocol().tasks, 9u);    // dotted override beats file
  c.set("pvsa.use_pc", "false");
  EXPECT_FALSE(c.pvsa().use_pc);
  c.set("run_id", "abc");
  EXPECT_EQ(c.run_dir().filename(), "abc");
}

TEST(Config, RejectsUnknownKeysAndBadTypes) {
  RunConfig c;
  const auto expect_config_error = [](auto&& f) {
    try {
      f();
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kConfig) << e.what();
    }
  };
  expect_config_error([&] { c.set("pvsa.gamma", "1"); });
  expect_config_error([&] { c.set("pvsa.use_pc", "maybe"); });
  expect_config_error([&] { c.set("eval.tasks", "2.5"); });
  expect_config_error([&] { c.merge({{"finetune", {{"epochz", 3}}}}); });
  expect_config_error([&] { c.merge({{"eval", 3}}); });
  EXPECT_TRUE(c.has_key("eval.tasks"));
  EXPECT_FALSE(c.has_key("eval"));
  try {
    c.merge_file("/nonexistent/config.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(exit_code_for(e.code()), 2);
  }
}

TEST(Config, CrossDomainProtocolFileMerges) {
  const auto proto = json::parse(std::ifstream(fs::path(ECER_SOURCE_DIR) / "configs" / "bscd_protocol.json"));
  std::set<std::string> names;
  for (const auto& t : proto.at("targets")) {
    RunConfig c;
    c.apply_preset("paper");
    c.merge(proto.at("run"));
    c.merge(t.at("config"));
    EXPECT_EQ(c.protocol().tasks, 600u);
    EXPECT_FALSE(c.tree()["xdomain"]["manifest"].get<std::string>().empty());
    names.insert(t.at("name").get<std::string>());
  }
  EXPECT_EQ(names, (std::set<std::string>{"ChestX", "ISIC", "EuroSAT", "CropDisease"}));
}

TEST(Config, ExitCodeMapping) {
  EXPECT_EQ(exit_code_for(ErrorCode::kConfig), 2);
  EXPECT_EQ(exit_code_for(ErrorCode::kOverlappingSplits), 2);
  EXPECT_EQ(exit_code_for(ErrorCode::kMissingPrerequisite), 3);
  EXPECT_EQ(exit_code_for(ErrorCode::kMissingEntities), 3);
  EXPECT_EQ(exit_code_for(ErrorCode::kProviderUnavailable), 4);
  EXPECT_EQ(exit_code_for(ErrorCode::kMalformedResponse), 4);
  EXPECT_FALSE(remediation_hint(Error(ErrorCode::kMissingEntities, "x")).empty());
}

TEST(Pipeline, EndToEndTinyRun) {
  const auto out = scratch("e2e");
  auto c = tiny_config(out, "tiny");
  const auto synth = cmd_gen_synth(c);
  EXPECT_EQ(synth.images, 200u);
  c.set("dataset.manifest", synth.manifest_path.string());

  const auto pre = cmd_pretrain(c);
  ASSERT_EQ(pre.epochs.size(), 1u);
  EXPECT_TRUE(fs::exists(pre.checkpoint));
  {
    std::ifstream csv(RunPaths{c.run_dir()}.pretrain_csv());
    std::string first;
    std::getline(csv, first);
    EXPECT_EQ(first.rfind("# config ", 0), 0u);
    EXPECT_EQ(json::parse(first.substr(9)), c.echo());
  }

  const auto ent = cmd_gen_entities(c);
  EXPECT_EQ(ent.files.size(), 10u);
  EXPECT_TRUE(ent.failed.empty());
  const auto store = EntityStore::load_dir(RunPaths{c.run_dir()}.entities_dir());
  for (const auto& [name, set] : store.sets()) EXPECT_EQ(set.selected.size(), 10u) << name;

  // Second run is served from the cache and writes identical files.
  std::string before;
  {
    std::ifstream f(ent.files.front());
    before.assign(std::istreambuf_iterator<char>(f), {});
  }
  const auto again = cmd_gen_entities(c);
  EXPECT_EQ(again.provider_calls, 0u);
  EXPECT_EQ(again.cache_hits, 10u);
  {
    std::ifstream f(ent.files.front());
    EXPECT_EQ(before, std::string(std::istreambuf_iterator<char>(f), {}));
  }

  const auto ft = cmd_finetune(c);
  EXPECT_TRUE(fs::exists(ft.checkpoint));
  EXPECT_EQ(ft.result.history.size(), 1u);

  const auto rep = cmd_eval(c);
  EXPECT_EQ(rep.accuracies.size(), 6u);
  EXPECT_EQ(rep.config.at("run"), c.echo());
  const auto rep2 = cmd_eval(c);
  EXPECT_EQ(rep.accuracies, rep2.accuracies);
  const auto on_disk = json::parse(std::ifstream(RunPaths{c.run_dir()}.eval_report()));
  EXPECT_EQ(on_disk.at("accuracies").get<std::vector<double>>(), rep.accuracies);

  auto xc = c;
  xc.set("xdomain.manifest", synth.manifest_path.string());
  const auto x = cmd_eval_xdomain(xc);
  EXPECT_EQ(x.accuracies, rep.accuracies);
  EXPECT_EQ(x.domain_tags.at("target"), "synthetic");

  auto pc_off = c;
  pc_off.set("pvsa.use_pc", "false");
  try {
    cmd_eval(pc_off);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfig);
    EXPECT_NE(std::string(e.what()).find("pvsa.use_pc"), std::string::npos) << e.what();
  }
  auto svpe_off = c;
  svpe_off.merge({{"pvsa", {{"use_svpe", false}, {"use_pc", false}, {"use_entities", false}}}});
  EXPECT_EQ(cmd_eval(svpe_off).accuracies.size(), 6u);

  auto mc = c;
  mc.set("export.image_id", "c07_000");
  const auto maps = cmd_export_maps(mc);
  EXPECT_EQ(maps.grids.size(), 4u * 11u);
  EXPECT_TRUE(fs::exists(maps.dir / "index.json"));
  EXPECT_TRUE(maps.features_csv.empty());

  auto fc = c;
  fc.set("export.features_split", "novel");
  const auto feats = cmd_export_maps(fc);
  EXPECT_TRUE(feats.grids.empty());
  std::ifstream csv(feats.features_csv);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(csv, line)) rows += line[0] != '#';
  EXPECT_EQ(rows, 1u + 100u);  // header + 5 novel classes x 20
}

TEST(Pipeline, ShiftedDomainRunsEndToEnd) {
  const auto out = scratch("shift");
  auto c = tiny_config(out, "src");
  const auto synth = cmd_gen_synth(c);
  c.set("dataset.manifest", synth.manifest_path.string());
  auto t = c;
  t.merge({{"synth", {{"out_dir", (out / "target").string()}, {"hue_shift_degrees", 120.0},
                      {"texture_contrast", 0.4}, {"domain", "shifted"}}}});
  const auto target = cmd_gen_synth(t);
  c.set("xdomain.manifest", target.manifest_path.string());
  cmd_pretrain(c);
  cmd_gen_entities(c);
  cmd_finetune(c);
  const auto in = cmd_eval(c);
  const auto x = cmd_eval_xdomain(c);
  EXPECT_EQ(x.accuracies.size(), 6u);
  EXPECT_EQ(x.domain_tags.at("target"), "shifted");
  EXPECT_NE(x.accuracies, in.accuracies);
}

TEST(Pipeline, EntityWarningsWhenKTooLarge) {
  const auto out = scratch("bigk");
  auto c = tiny_config(out, "bigk");
  const auto synth = cmd_gen_synth(c);
  c.set("dataset.manifest", synth.manifest_path.string());
  c.set("entities.k", "30");
  const auto r = cmd_gen_entities(c);
  EXPECT_EQ(r.files.size(), 10u);
  EXPECT_GE(r.warnings, 10u);
  const auto set = entity_set_from_json(json::parse(std::ifstream(r.files.front())));
  EXPECT_LT(set.selected.size(), 30u);
  EXPECT_FALSE(set.warnings.empty());
}

TEST(Pipeline, MissingPrerequisites) {
  const auto out = scratch("missing");
  auto c = tiny_config(out, "m");
  const auto synth = cmd_gen_synth(c);
  c.set("dataset.manifest", synth.manifest_path.string());
  try {
    cmd_eval(c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(exit_code_for(e.code()), 3);
    EXPECT_FALSE(remediation_hint(e).empty());
  }
  auto r = c;
  r.set("providers.mode", "replay");
  try {
    cmd_gen_entities(r);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(exit_code_for(e.code()), 4);
  }
}

TEST(Pipeline, AblationRowsDistinct) {
  const auto ft = finetune_ablation_rows();
  const auto pt = pretrain_ablation_rows();
  EXPECT_EQ(ft.size(), 5u);
  EXPECT_EQ(pt.size(), 4u);
  std::set<std::string> seen;
  for (const auto& [name, flags] : ft) EXPECT_TRUE(seen.insert(flags.dump()).second) << name;
  for (const auto& [name, flags] : pt) EXPECT_TRUE(seen.insert(flags.dump()).second) << name;
}

TEST(Cli, ExitCodes) {
  const auto out = scratch("cli");
  const std::string base = "--output-dir " + out.string() + " --run-id r ";
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("eval " + base + "--no.such.key 3"), 2);
  EXPECT_EQ(run_cli("gen-synth " + base + "--synth.num_base 5 --synth.num_val 0 --synth.images_per_class 4"), 0);
  const auto manifest = (out / "r" / "synthetic" / "manifest.json").string();
  ASSERT_TRUE(fs::exists(manifest));
  EXPECT_EQ(run_cli("eval " + base + "--manifest " + manifest + " --tasks 0"), 2);
  EXPECT_EQ(run_cli("eval " + base + "--manifest " + manifest), 3);
  EXPECT_EQ(run_cli("gen-entities " + base + "--manifest " + manifest + " --providers.mode replay"), 4);
  EXPECT_EQ(run_cli("pretrain " + base + "--manifest /nonexistent/manifest.json"), 2);
}
