#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "synthtrial/dataset.hpp"
#include "synthtrial/experiments.hpp"
#include "synthtrial/hivae.hpp"
#include "synthtrial/metrics.hpp"
#include "synthtrial/simulate.hpp"
#include "synthtrial/survstats.hpp"

namespace py = pybind11;
using namespace synthtrial;

PYBIND11_MODULE(synthtrial, m) {
    m.doc() = "synthetic control arms with survival outcomes";

    py::register_exception<ValidationError>(m, "ValidationError");
    py::register_exception<NumericalError>(m, "NumericalError");

    py::class_<TrialDataset>(m, "TrialDataset")
        .def_property_readonly("n_rows", [](const TrialDataset& d) { return d.n_rows(); })
        .def_property_readonly("manifest",
                               [](const TrialDataset& d) { return manifest_to_json(d.schema); })
        .def_property_readonly("columns", [](const TrialDataset& d) { return d.cols; })
        .def_property_readonly("treatment", [](const TrialDataset& d) { return d.treatment; })
        .def_property_readonly("time", [](const TrialDataset& d) { return d.time; })
        .def_property_readonly("event", [](const TrialDataset& d) { return d.event; })
        .def("column_names",
             [](const TrialDataset& d) {
                 std::vector<std::string> names;
                 for (const auto& c : d.schema.covariates) names.push_back(c.name);
                 return names;
             })
        .def(
            "save",
            [](const TrialDataset& d, const std::string& csv_path,
               const std::string& manifest_path) {
                save_csv(d, csv_path);
                save_manifest(d.schema,
                              manifest_path.empty() ? csv_path + ".manifest.json" : manifest_path);
            },
            py::arg("csv_path"), py::arg("manifest_path") = "")
        .def_static(
            "load",
            [](const std::string& csv_path, const std::string& manifest_path) {
                const auto schema = load_manifest(manifest_path);
                auto ds = load_csv(csv_path, schema);
                validate(ds);
                return ds;
            },
            py::arg("csv_path"), py::arg("manifest_path"));

    py::class_<HiVaeModel>(m, "Model")
        .def_property_readonly("config",
                               [](const HiVaeModel& mod) { return hivae_config_to_json(mod.cfg); })
        .def_property_readonly("manifest",
                               [](const HiVaeModel& mod) { return manifest_to_json(mod.schema); })
        .def("save", [](const HiVaeModel& mod, const std::string& path) { save_model(mod, path); },
             py::arg("path"));

    m.def("load_model", &load_model, py::arg("path"));

    m.def(
        "simulate",
        [](const std::string& config_json, std::uint64_t seed) {
            const SimConfig cfg =
                config_json.empty() ? SimConfig::defaults() : sim_config_from_json(config_json);
            return simulate_trial(cfg, seed);
        },
        py::arg("config_json") = "", py::arg("seed") = 20240901,
        "Draw a two-arm trial; empty config uses the defaults.");

    m.def(
        "split_arms",
        [](const TrialDataset& d) {
            auto [control, treated] = split_arms(d);
            return py::make_tuple(std::move(control), std::move(treated));
        },
        py::arg("data"));

    m.def(
        "fit",
        [](const TrialDataset& data, const std::string& config_json, bool model_treatment,
           std::uint64_t seed) {
            const HiVaeConfig cfg =
                config_json.empty() ? HiVaeConfig{} : hivae_config_from_json(config_json);
            auto model = prepare_model(data, cfg, model_treatment, derive_seed(seed, "prepare"));
            const auto trace = train_model(model, data, derive_seed(seed, "train"));
            return py::make_tuple(std::move(model), trace.epoch_elbo, trace.diverged);
        },
        py::arg("data"), py::arg("config_json") = "", py::arg("model_treatment") = false,
        py::arg("seed") = 20240901, "Returns (model, per-epoch ELBO trace, diverged flag).");

    m.def("sample_posterior", &sample_posterior, py::arg("model"), py::arg("source"),
          py::arg("n_out"), py::arg("seed"), py::arg("identity_debug") = false);
    m.def("sample_prior", &sample_prior, py::arg("model"), py::arg("n_out"), py::arg("seed"));

    m.def(
        "evaluate",
        [](const TrialDataset& real, const TrialDataset& synth,
           const std::vector<std::string>& quasi_identifiers, std::uint64_t seed) {
            MetricsOptions opt;
            opt.quasi_identifiers = quasi_identifiers;
            opt.seed = seed;
            return metrics_report_to_json(evaluate_metrics(real, synth, opt));
        },
        py::arg("real"), py::arg("synth"), py::arg("quasi_identifiers") = std::vector<std::string>{},
        py::arg("seed") = 20240901, "Fidelity and privacy metrics as a JSON string.");

    m.def("js_distance", &js_distance, py::arg("real"), py::arg("synth"), py::arg("bins") = 10);
    m.def("survival_distance", &survival_distance, py::arg("real"), py::arg("synth"));
    m.def(
        "detection_auc",
        [](const TrialDataset& real, const TrialDataset& synth, int folds, std::uint64_t seed) {
            return detection_auc(real, synth, folds, seed);
        },
        py::arg("real"), py::arg("synth"), py::arg("folds") = 5, py::arg("seed") = 20240901);

    m.def(
        "kaplan_meier",
        [](const std::vector<double>& times, const std::vector<int>& events) {
            std::vector<py::tuple> out;
            for (const auto& p : kaplan_meier(times, events))
                out.push_back(py::make_tuple(p.time, p.surv, p.n_risk, p.n_event));
            return out;
        },
        py::arg("times"), py::arg("events"), "List of (time, surv, n_risk, n_event) steps.");

    m.def(
        "logrank",
        [](const std::vector<double>& t1, const std::vector<int>& e1,
           const std::vector<double>& t2, const std::vector<int>& e2) {
            const auto r = logrank_test(t1, e1, t2, e2);
            return py::make_tuple(r.stat, r.p);
        },
        py::arg("times1"), py::arg("events1"), py::arg("times2"), py::arg("events2"));

    m.def("schoenfeld_power", &schoenfeld_power, py::arg("beta_tilde"), py::arg("alpha"),
          py::arg("events_treated"), py::arg("events_control"));

    m.def(
        "run_study",
        [](const std::string& config_json, const std::string& out_dir) {
            run_study(study_config_from_json(config_json), out_dir);
            return study_summary(out_dir);
        },
        py::arg("config_json"), py::arg("out_dir"),
        "Runs the calibration study grid and returns the rendered summary.");
}
