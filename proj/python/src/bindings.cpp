#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <json.hpp>

#include "ecer/entity_selection.hpp"
#include "ecer/episodes_eval.hpp"
#include "ecer/pipeline.hpp"
#include "ecer/pretrain.hpp"
#include "ecer/pvsa.hpp"

namespace py = pybind11;
using namespace ecer;
using nlohmann::json;

namespace {

// JSON crosses the boundary as text; the Python side parses it.
std::string dump(const json& j) { return j.dump(); }

Tensor matrix(const std::vector<std::vector<double>>& rows) {
  require(!rows.empty(), ErrorCode::kInvalidArgument, "empty matrix");
  std::vector<double> flat;
  for (const auto& r : rows) {
    require(r.size() == rows.front().size(), ErrorCode::kShapeMismatch, "ragged matrix");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return Tensor::from({rows.size(), rows.front().size()}, std::move(flat));
}

std::vector<std::vector<double>> rows_of(const Tensor& t) {
  const std::size_t n = t.shape()[0], c = t.numel() / n;
  std::vector<std::vector<double>> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i].assign(t.data().begin() + i * c, t.data().begin() + (i + 1) * c);
  return out;
}

}  // namespace

PYBIND11_MODULE(_ecer, m) {
  m.doc() = "ecer core bindings";

  static py::exception<Error> error(m, "EcerError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      PyErr_SetObject(error.ptr(), py::make_tuple(e.what(), std::string(error_code_name(e.code())),
                                                  exit_code_for(e.code()))
                                       .ptr());
    }
  });

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def("apply_preset", &RunConfig::apply_preset)
      .def("merge_json", [](RunConfig& c, const std::string& text) { c.merge(json::parse(text)); })
      .def("merge_file", [](RunConfig& c, const std::string& p) { c.merge_file(p); })
      .def("set", &RunConfig::set)
      .def("has_key", &RunConfig::has_key)
      .def("echo_json", [](const RunConfig& c) { return dump(c.echo()); })
      .def("run_dir", [](const RunConfig& c) { return c.run_dir().string(); })
      .def_static("preset_names", &RunConfig::preset_names);

  m.def("gen_synth", [](const RunConfig& c) {
    py::gil_scoped_release nogil;
    const auto r = cmd_gen_synth(c);
    return dump({{"manifest", r.manifest_path.string()}, {"images", r.images}, {"classes", r.classes}});
  });
  m.def("pretrain", [](const RunConfig& c) {
    py::gil_scoped_release nogil;
    const auto r = cmd_pretrain(c);
    json epochs = json::array();
    for (const auto& e : r.epochs)
      epochs.push_back({{"epoch", e.epoch},
                        {"ce", e.ce},
                        {"it_global", e.it_global},
                        {"it_local", e.it_local},
                        {"total", e.total},
                        {"base_train_acc", e.base_train_acc}});
    return dump({{"checkpoint", r.checkpoint.string()}, {"epochs", epochs}});
  });
  m.def("gen_entities", [](const RunConfig& c) {
    py::gil_scoped_release nogil;
    const auto r = cmd_gen_entities(c);
    std::vector<std::string> files;
    for (const auto& f : r.files) files.push_back(f.string());
    return dump({{"files", files},
                 {"failed", r.failed},
                 {"cache_hits", r.cache_hits},
                 {"provider_calls", r.provider_calls},
                 {"warnings", r.warnings}});
  });
  m.def("finetune", [](const RunConfig& c) {
    py::gil_scoped_release nogil;
    const auto r = cmd_finetune(c);
    json history = json::array();
    for (const auto& h : r.result.history)
      history.push_back({{"epoch", h.epoch}, {"loss", h.loss_mean}, {"train_acc", h.train_acc}, {"val_acc", h.val_acc}});
    return dump({{"checkpoint", r.checkpoint.string()},
                 {"val_acc_before", r.result.val_acc_before},
                 {"best_val_acc", r.result.best_val_acc},
                 {"best_epoch", r.result.best_epoch},
                 {"validation_source", r.result.validation_source},
                 {"history", history}});
  });
  m.def("evaluate", [](const RunConfig& c) {
    py::gil_scoped_release nogil;
    return dump(cmd_eval(c).to_json());
  });
  m.def("evaluate_cross_domain", [](const RunConfig& c) {
    py::gil_scoped_release nogil;
    return dump(cmd_eval_xdomain(c).to_json());
  });
  m.def("export_maps", [](const RunConfig& c) {
    py::gil_scoped_release nogil;
    const auto r = cmd_export_maps(c);
    return dump({{"dir", r.dir.string()}, {"grids", r.grids.size()}, {"features_csv", r.features_csv.string()}});
  });
  m.def("exit_code_for_name", [](const std::string& name) {
    for (int i = 0; i <= static_cast<int>(ErrorCode::kIo); ++i) {
      const auto code = static_cast<ErrorCode>(i);
      if (error_code_name(code) == name) return exit_code_for(code);
    }
    return 1;
  });

  m.def(
      "contrastive_loss",
      [](const std::vector<std::vector<double>>& sims, double tau, bool literal) {
        return contrastive_loss(matrix(sims), tau, literal).item();
      },
      py::arg("sims"), py::arg("tau"), py::arg("literal") = false);
  m.def("global_similarity_matrix", [](const std::vector<std::vector<double>>& v,
                                       const std::vector<std::vector<double>>& t) {
    return rows_of(global_similarity_matrix(matrix(v), matrix(t)));
  });
  m.def("classify", [](const std::vector<std::vector<double>>& query, const std::vector<std::vector<double>>& protos,
                       double tau) { return rows_of(classify_query(matrix(query), matrix(protos), tau)); });
  m.def("summarize_accuracies", [](const std::vector<double>& acc) {
    const auto s = summarize_accuracies(acc);
    return py::make_tuple(s.mean, s.stddev, s.ci95);
  });
  m.def(
      "select_top_k",
      [](const std::vector<std::pair<std::string, double>>& scored, std::size_t k) {
        std::vector<EntityCandidate> cs;
        for (const auto& [text, sim] : scored) cs.push_back({text, {}, sim});
        std::vector<std::string> out;
        for (const auto& c : select_top_k(cs, k).selected) out.push_back(c.text);
        return out;
      },
      py::arg("scored"), py::arg("k"));
  m.def("sample_episode", [](const std::vector<std::string>& classes,
                             const std::vector<std::vector<std::string>>& image_ids, std::size_t way,
                             std::size_t shots, std::size_t queries, std::uint64_t seed) {
    const SplitView split{"split", classes, image_ids};
    const auto ep = sample_episode(split, way, shots, queries, seed);
    const auto ids = [](const std::vector<EpisodeItem>& items) {
      std::vector<std::pair<std::string, std::size_t>> out;
      for (const auto& i : items) out.emplace_back(i.image_id, i.label);
      return out;
    };
    return py::make_tuple(ep.class_names, ids(ep.support), ids(ep.query));
  });
  m.def("episode_seed", &episode_seed);
}
