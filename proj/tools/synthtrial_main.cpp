#include <cerrno>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "synthtrial/dataset.hpp"
#include "synthtrial/experiments.hpp"
#include "synthtrial/hivae.hpp"
#include "synthtrial/metrics.hpp"
#include "synthtrial/simulate.hpp"
#include "synthtrial/survstats.hpp"

namespace {

constexpr std::uint64_t kDefaultSeed = 20240901;

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw synthtrial::ValidationError("cannot read '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw synthtrial::ValidationError("cannot write '" + path + "'");
    f << content;
}

std::optional<std::uint64_t> env_seed() {
    const char* env = std::getenv("SYNTHTRIAL_SEED");
    if (env == nullptr || *env == '\0') return std::nullopt;
    errno = 0;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (errno != 0 || end == env || *end != '\0')
        throw synthtrial::ValidationError("SYNTHTRIAL_SEED must be an unsigned integer");
    return static_cast<std::uint64_t>(v);
}

std::uint64_t resolve_seed(bool flag_set, std::uint64_t flag_value) {
    if (flag_set) return flag_value;
    if (const auto e = env_seed()) return *e;
    return kDefaultSeed;
}

int fail(const std::string& type, const std::string& message, bool json_errors) {
    if (json_errors) {
        nlohmann::json j;
        j["error"]["type"] = type;
        j["error"]["message"] = message;
        std::cerr << j.dump() << "\n";
    } else {
        std::cerr << "error: " << message << "\n";
    }
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    using namespace synthtrial;

    CLI::App app{"synthetic control arms with survival outcomes"};
    app.name("synthtrial");
    app.require_subcommand(1);
    bool json_errors = false;
    app.add_flag("--json-errors", json_errors, "emit errors as JSON on stderr");

    // validate
    auto* val_cmd = app.add_subcommand("validate", "check a dataset against its manifest");
    std::string val_data, val_manifest;
    val_cmd->add_option("--data", val_data, "dataset CSV")->required();
    val_cmd->add_option("--manifest", val_manifest, "schema manifest JSON")->required();

    // simulate
    auto* sim_cmd = app.add_subcommand("simulate", "draw a two-arm trial from the generative model");
    std::string sim_cfg_path, sim_out, sim_manifest_out;
    std::uint64_t sim_seed = kDefaultSeed;
    int sim_n = 0;
    double sim_beta = 0.0;
    sim_cmd->add_option("--config", sim_cfg_path, "simulation config JSON (defaults when omitted)");
    sim_cmd->add_option("--out", sim_out, "output CSV")->required();
    sim_cmd->add_option("--manifest-out", sim_manifest_out,
                        "output manifest path (default <out>.manifest.json)");
    auto* sim_seed_opt = sim_cmd->add_option("--seed", sim_seed, "root seed");
    auto* sim_n_opt = sim_cmd->add_option("--n", sim_n, "override subject count");
    auto* sim_beta_opt = sim_cmd->add_option("--beta", sim_beta, "override treatment log hazard ratio");

    // fit
    auto* fit_cmd = app.add_subcommand("fit", "train a generative model on a dataset");
    std::string fit_data, fit_manifest, fit_cfg_path, fit_out, fit_arm = "control",
                fit_head;
    std::uint64_t fit_seed = kDefaultSeed;
    int fit_epochs = 0;
    bool fit_model_treatment = false;
    fit_cmd->add_option("--data", fit_data, "training CSV")->required();
    fit_cmd->add_option("--manifest", fit_manifest, "schema manifest JSON")->required();
    fit_cmd->add_option("--config", fit_cfg_path, "model config JSON (defaults when omitted)");
    fit_cmd->add_option("--out", fit_out, "model checkpoint path")->required();
    fit_cmd->add_option("--arm", fit_arm, "rows to train on: control | all")
        ->check(CLI::IsMember({"control", "all"}));
    fit_cmd->add_flag("--model-treatment", fit_model_treatment,
                      "model the treatment column as an extra feature");
    fit_cmd->add_option("--head", fit_head, "override survival head: weibull | piecewise")
        ->check(CLI::IsMember({"weibull", "piecewise"}));
    auto* fit_epochs_opt = fit_cmd->add_option("--epochs", fit_epochs, "override max epochs");
    auto* fit_seed_opt = fit_cmd->add_option("--seed", fit_seed, "root seed");

    // generate
    auto* gen_cmd = app.add_subcommand("generate", "sample synthetic control rows from a model");
    std::string gen_model, gen_out, gen_manifest_out, gen_source, gen_source_manifest,
                gen_mode = "posterior";
    std::uint64_t gen_seed = kDefaultSeed;
    int gen_n = 0;
    gen_cmd->add_option("--model", gen_model, "model checkpoint path")->required();
    gen_cmd->add_option("--n", gen_n, "rows to generate")->required()->check(CLI::PositiveNumber);
    gen_cmd->add_option("--out", gen_out, "output CSV")->required();
    gen_cmd->add_option("--manifest-out", gen_manifest_out,
                        "output manifest path (default <out>.manifest.json)");
    gen_cmd->add_option("--mode", gen_mode, "posterior | prior")
        ->check(CLI::IsMember({"posterior", "prior"}));
    gen_cmd->add_option("--source", gen_source, "source CSV for posterior sampling");
    gen_cmd->add_option("--manifest", gen_source_manifest, "source manifest JSON");
    auto* gen_seed_opt = gen_cmd->add_option("--seed", gen_seed, "root seed");

    // evaluate
    auto* eval_cmd = app.add_subcommand("evaluate", "fidelity and privacy metrics for a synthetic arm");
    std::string eval_real, eval_synth, eval_manifest, eval_out;
    std::vector<std::string> eval_qis;
    std::uint64_t eval_seed = kDefaultSeed;
    int eval_bins = 10, eval_folds = 5;
    eval_cmd->add_option("--real", eval_real, "real CSV")->required();
    eval_cmd->add_option("--synth", eval_synth, "synthetic CSV")->required();
    eval_cmd->add_option("--manifest", eval_manifest, "shared manifest JSON")->required();
    eval_cmd->add_option("--out", eval_out, "report JSON path (stdout when omitted)");
    eval_cmd->add_option("--bins", eval_bins, "histogram bins for divergence and k-map");
    eval_cmd->add_option("--folds", eval_folds, "detection cross-validation folds");
    eval_cmd->add_option("--qi", eval_qis, "quasi-identifier column (repeatable); enables k-map");
    auto* eval_seed_opt = eval_cmd->add_option("--seed", eval_seed, "root seed");

    // stats
    auto* stats_cmd = app.add_subcommand("stats", "survival summaries and the two-arm log-rank test");
    std::string stats_data, stats_manifest, stats_out;
    stats_cmd->add_option("--data", stats_data, "dataset CSV")->required();
    stats_cmd->add_option("--manifest", stats_manifest, "schema manifest JSON")->required();
    stats_cmd->add_option("--out", stats_out, "output JSON path (stdout when omitted)");

    // study
    auto* study_cmd = app.add_subcommand("study", "run a calibration study grid");
    std::string study_cfg_path, study_out;
    std::uint64_t study_seed = kDefaultSeed;
    int study_jobs = 1;
    study_cmd->add_option("--config", study_cfg_path, "study config JSON")->required();
    study_cmd->add_option("--out", study_out, "output directory")->required();
    auto* study_jobs_opt = study_cmd->add_option("--jobs", study_jobs, "worker thread cap");
    auto* study_seed_opt = study_cmd->add_option("--seed", study_seed, "root seed");

    // report
    auto* report_cmd = app.add_subcommand("report", "render the summary of a study directory");
    std::string report_in;
    report_cmd->add_option("--in", report_in, "study directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        if (rc == 0) return 0;
        std::cerr << app.help();
        return 2;
    }

    try {
        if (val_cmd->parsed()) {
            const auto schema = load_manifest(val_manifest);
            const auto ds = load_csv(val_data, schema);
            synthtrial::validate(ds);
            std::cout << "ok: " << ds.n_rows() << " rows, " << schema.covariates.size()
                      << " covariates\n";
            return 0;
        }

        if (sim_cmd->parsed()) {
            SimConfig cfg = sim_cfg_path.empty() ? SimConfig::defaults()
                                                 : sim_config_from_json(read_file(sim_cfg_path));
            if (sim_n_opt->count() > 0) cfg.n = sim_n;
            if (sim_beta_opt->count() > 0) cfg.beta = sim_beta;
            const auto seed = resolve_seed(sim_seed_opt->count() > 0, sim_seed);
            const auto trial = simulate_trial(cfg, seed);
            save_csv(trial, sim_out);
            const auto manifest_path =
                sim_manifest_out.empty() ? sim_out + ".manifest.json" : sim_manifest_out;
            save_manifest(trial.schema, manifest_path);
            std::cout << "wrote " << trial.n_rows() << " rows to " << sim_out << "\n";
            return 0;
        }

        if (fit_cmd->parsed()) {
            const auto schema = load_manifest(fit_manifest);
            auto ds = load_csv(fit_data, schema);
            synthtrial::validate(ds);
            if (fit_arm == "control") {
                ds = split_arms(ds).first;
                if (ds.n_rows() == 0) throw ValidationError("dataset has no control rows");
            }
            HiVaeConfig cfg = fit_cfg_path.empty() ? HiVaeConfig{}
                                                   : hivae_config_from_json(read_file(fit_cfg_path));
            if (!fit_head.empty()) cfg.survival_head = survival_head_from_string(fit_head);
            if (fit_epochs_opt->count() > 0) cfg.max_epochs = fit_epochs;
            const auto seed = resolve_seed(fit_seed_opt->count() > 0, fit_seed);
            auto model = prepare_model(ds, cfg, fit_model_treatment, derive_seed(seed, "prepare"));
            const auto trace = train_model(model, ds, derive_seed(seed, "train"));
            save_model(model, fit_out);
            if (trace.diverged)
                std::cerr << "warning: training diverged (" << trace.note
                          << "); saved the best checkpoint\n";
            std::cout << "trained " << trace.epoch_elbo.size() << " epochs, best epoch "
                      << trace.best_epoch << ", saved to " << fit_out << "\n";
            return 0;
        }

        if (gen_cmd->parsed()) {
            const auto model = load_model(gen_model);
            const auto seed = resolve_seed(gen_seed_opt->count() > 0, gen_seed);
            TrialDataset out;
            if (gen_mode == "posterior") {
                if (gen_source.empty() || gen_source_manifest.empty())
                    throw ValidationError(
                        "posterior sampling needs --source and --manifest");
                const auto schema = load_manifest(gen_source_manifest);
                const auto src = load_csv(gen_source, schema);
                synthtrial::validate(src);
                out = sample_posterior(model, src, gen_n, seed);
            } else {
                out = sample_prior(model, gen_n, seed);
            }
            save_csv(out, gen_out);
            const auto manifest_path =
                gen_manifest_out.empty() ? gen_out + ".manifest.json" : gen_manifest_out;
            save_manifest(out.schema, manifest_path);
            std::cout << "wrote " << out.n_rows() << " rows to " << gen_out << "\n";
            return 0;
        }

        if (eval_cmd->parsed()) {
            const auto schema = load_manifest(eval_manifest);
            const auto real = load_csv(eval_real, schema);
            const auto synth = load_csv(eval_synth, schema);
            synthtrial::validate(real);
            synthtrial::validate(synth);
            MetricsOptions opt;
            opt.histogram_bins = eval_bins;
            opt.discretize_bins = eval_bins;
            opt.detection_folds = eval_folds;
            opt.quasi_identifiers = eval_qis;
            opt.seed = resolve_seed(eval_seed_opt->count() > 0, eval_seed);
            const auto report = evaluate_metrics(real, synth, opt);
            const auto text = metrics_report_to_json(report);
            if (eval_out.empty())
                std::cout << text << "\n";
            else
                write_file(eval_out, text + "\n");
            return 0;
        }

        if (stats_cmd->parsed()) {
            const auto schema = load_manifest(stats_manifest);
            const auto ds = load_csv(stats_data, schema);
            synthtrial::validate(ds);
            const auto [control, treated] = split_arms(ds);
            nlohmann::json j;
            j["n"] = ds.n_rows();
            j["n_control"] = control.n_rows();
            j["n_treated"] = treated.n_rows();
            auto censoring = [](const TrialDataset& arm) {
                if (arm.n_rows() == 0) return 0.0;
                long censored = 0;
                for (int e : arm.event) censored += e == 0;
                return static_cast<double>(censored) / static_cast<double>(arm.n_rows());
            };
            j["censoring"] = censoring(ds);
            auto km_json = [](const TrialDataset& arm) {
                nlohmann::json pts = nlohmann::json::array();
                for (const auto& p : kaplan_meier(arm.time, arm.event)) {
                    nlohmann::json q;
                    q["time"] = p.time;
                    q["surv"] = p.surv;
                    q["n_risk"] = p.n_risk;
                    q["n_event"] = p.n_event;
                    pts.push_back(q);
                }
                return pts;
            };
            if (control.n_rows() > 0) {
                j["censoring_control"] = censoring(control);
                j["km_control"] = km_json(control);
            }
            if (treated.n_rows() > 0) {
                j["censoring_treated"] = censoring(treated);
                j["km_treated"] = km_json(treated);
            }
            if (control.n_rows() > 0 && treated.n_rows() > 0) {
                const auto lr = logrank_test(control.time, control.event, treated.time,
                                             treated.event);
                j["logrank"]["stat"] = lr.stat;
                j["logrank"]["p"] = lr.p;
            }
            const auto text = j.dump(2);
            if (stats_out.empty())
                std::cout << text << "\n";
            else
                write_file(stats_out, text + "\n");
            return 0;
        }

        if (study_cmd->parsed()) {
            auto cfg = study_config_from_json(read_file(study_cfg_path));
            if (study_jobs_opt->count() > 0) cfg.jobs = study_jobs;
            if (study_seed_opt->count() > 0)
                cfg.seed = study_seed;
            else if (const auto e = env_seed())
                cfg.seed = *e;
            run_study(cfg, study_out);
            std::cout << study_summary(study_out);
            return 0;
        }

        if (report_cmd->parsed()) {
            std::cout << study_summary(report_in);
            return 0;
        }
    } catch (const ValidationError& e) {
        return fail("validation", e.what(), json_errors);
    } catch (const NumericalError& e) {
        return fail("numerical", e.what(), json_errors);
    } catch (const std::exception& e) {
        return fail("internal", e.what(), json_errors);
    }
    std::cerr << app.help();
    return 2;
}
