#include "synthtrial/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace synthtrial {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string training_arms_to_string(TrainingArms a) {
    return a == TrainingArms::ControlOnly ? "control_only" : "control_plus_treated";
}

TrainingArms training_arms_from_string(const std::string& s) {
    if (s == "control_only") return TrainingArms::ControlOnly;
    if (s == "control_plus_treated") return TrainingArms::ControlPlusTreated;
    throw ValidationError("unknown training arms '" + s + "'");
}

std::string sampling_mode_to_string(SamplingMode m) {
    return m == SamplingMode::Posterior ? "posterior" : "prior";
}

SamplingMode sampling_mode_from_string(const std::string& s) {
    if (s == "posterior") return SamplingMode::Posterior;
    if (s == "prior") return SamplingMode::Prior;
    throw ValidationError("unknown sampling mode '" + s + "'");
}

std::string selection_to_string(const SelectionRule& r) {
    switch (r.kind) {
        case SelectionRule::Kind::None:
            return "none";
        case SelectionRule::Kind::BestByPValue:
            return "best";
        case SelectionRule::Kind::TopFraction: {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "top:%g", r.q);
            return buf;
        }
    }
    throw ValidationError("unknown selection rule");
}

SelectionRule selection_from_string(const std::string& s) {
    SelectionRule r;
    if (s == "none") {
        r.kind = SelectionRule::Kind::None;
        return r;
    }
    if (s == "best") {
        r.kind = SelectionRule::Kind::BestByPValue;
        return r;
    }
    if (s.rfind("top:", 0) == 0) {
        r.kind = SelectionRule::Kind::TopFraction;
        try {
            r.q = std::stod(s.substr(4));
        } catch (const std::exception&) {
            throw ValidationError("invalid selection '" + s + "'");
        }
        if (!(r.q > 0.0 && r.q <= 1.0))
            throw ValidationError("selection fraction must lie in (0, 1]");
        return r;
    }
    throw ValidationError("unknown selection '" + s + "'");
}

void ScenarioConfig::check() const {
    if (!(upsilon > 0.0 && upsilon <= 1.0)) throw ValidationError("upsilon must lie in (0, 1]");
    if (n_gen < 1) throw ValidationError("n_gen must be >= 1");
    if (m_reps < 1) throw ValidationError("m_reps must be >= 1");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must lie in (0, 1)");
    if (selection.kind == SelectionRule::Kind::TopFraction &&
        !(selection.q > 0.0 && selection.q <= 1.0))
        throw ValidationError("selection fraction must lie in (0, 1]");
}

void HiVaeGenerator::fit(const TrialDataset& train_control, const TrialDataset* treated,
                         std::uint64_t seed) {
    TrialDataset train = train_control;
    bool include_treatment = false;
    if (arms_ == TrainingArms::ControlPlusTreated && treated != nullptr &&
        treated->n_rows() > 0) {
        train = concat_rows(train_control, *treated);
        include_treatment = true;
    }
    model_ = prepare_model(train, cfg_, include_treatment, derive_seed(seed, "prepare"));
    trace_ = train_model(model_, train, derive_seed(seed, "train"));
    if (trace_.diverged) throw NumericalError("generator training diverged: " + trace_.note);
    source_ = std::move(train);
    fitted_ = true;
}

TrialDataset HiVaeGenerator::generate(int n_out, std::uint64_t seed) {
    if (!fitted_) throw ValidationError("generator is not fitted");
    if (mode_ == SamplingMode::Posterior) return sample_posterior(model_, source_, n_out, seed);
    return sample_prior(model_, n_out, seed);
}

const HiVaeModel& HiVaeGenerator::model() const {
    if (!fitted_) throw ValidationError("generator is not fitted");
    return model_;
}

void IdentityGenerator::fit(const TrialDataset& train_control, const TrialDataset*,
                            std::uint64_t) {
    if (train_control.n_rows() == 0) throw ValidationError("training controls are empty");
    train_ = train_control;
    fitted_ = true;
}

TrialDataset IdentityGenerator::generate(int n_out, std::uint64_t) {
    if (!fitted_) throw ValidationError("generator is not fitted");
    if (n_out < 1) throw ValidationError("n_out must be >= 1");
    return train_;
}

namespace {

struct ReplicationCapture {
    TrialDataset train_control;
    TrialDataset first_arm;
    bool filled = false;
};

ReplicationRecord run_replication_impl(const TrialDataset& trial, const ScenarioConfig& sc,
                                       Generator& gen, std::uint64_t seed,
                                       ReplicationCapture* capture) {
    sc.check();
    auto [control, treated] = split_arms(trial);
    if (control.n_rows() == 0 || treated.n_rows() == 0)
        throw ValidationError("replication needs both trial arms");
    const auto train_control = subsample(control, sc.upsilon, derive_seed(seed, "downsize"));
    ReplicationRecord rec;
    rec.n_train_control = static_cast<int>(train_control.n_rows());
    rec.n_treated = static_cast<int>(treated.n_rows());
    rec.p_initial = logrank_test(train_control.time, train_control.event, treated.time,
                                 treated.event)
                        .p;
    const int n_sim = static_cast<int>(treated.n_rows());
    try {
        gen.fit(train_control,
                sc.training_arms == TrainingArms::ControlPlusTreated ? &treated : nullptr,
                derive_seed(seed, "fit"));
        rec.p_vs_treated.reserve(static_cast<std::size_t>(sc.n_gen));
        rec.p_vs_control.reserve(static_cast<std::size_t>(sc.n_gen));
        for (int g = 0; g < sc.n_gen; ++g) {
            const auto arm = gen.generate(n_sim, derive_seed(seed, "generate", g));
            rec.p_vs_treated.push_back(
                logrank_test(arm.time, arm.event, treated.time, treated.event).p);
            rec.p_vs_control.push_back(
                logrank_test(arm.time, arm.event, train_control.time, train_control.event).p);
            if (g == 0 && capture != nullptr) {
                capture->train_control = train_control;
                capture->first_arm = arm;
                capture->filled = true;
            }
        }
    } catch (const std::exception& e) {
        rec.failed = true;
        rec.note = e.what();
    }
    return rec;
}

}  // namespace

ReplicationRecord run_replication(const TrialDataset& trial, const ScenarioConfig& scenario,
                                  Generator& gen, std::uint64_t seed) {
    return run_replication_impl(trial, scenario, gen, seed, nullptr);
}

int select_best(const ReplicationRecord& record) {
    if (record.p_vs_control.empty())
        throw ValidationError("select_best needs at least one generated arm");
    int best = 0;
    for (int i = 1; i < static_cast<int>(record.p_vs_control.size()); ++i)
        if (record.p_vs_control[static_cast<std::size_t>(i)] >
            record.p_vs_control[static_cast<std::size_t>(best)])
            best = i;
    return best;
}

double acceptance_proportion(const std::vector<ReplicationRecord>& records, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must lie in (0, 1)");
    long used = 0, accepted = 0;
    for (const auto& rec : records) {
        if (rec.failed || rec.p_vs_control.empty()) continue;
        const auto reject = benjamini_hochberg(rec.p_vs_control, alpha);
        ++used;
        if (std::any_of(reject.begin(), reject.end(), [](bool r) { return !r; })) ++accepted;
    }
    return used > 0 ? static_cast<double>(accepted) / static_cast<double>(used) : 0.0;
}

CalibrationResult estimate_power(const std::vector<ReplicationRecord>& records,
                                 const std::vector<double>& beta_grid, double alpha,
                                 const SelectionRule& selection) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must lie in (0, 1)");
    CalibrationResult cal;
    cal.alpha = alpha;
    cal.selection = selection;
    for (double beta : beta_grid) {
        std::vector<ReplicationRecord> matching;
        for (const auto& rec : records)
            if (rec.beta == beta) matching.push_back(rec);
        PowerPoint pt;
        pt.beta = beta;
        long init_hits = 0, gen_hits = 0, gen_total = 0, best_hits = 0, best_total = 0;
        for (const auto& rec : matching) {
            if (rec.failed) {
                ++pt.m_failed;
                continue;
            }
            ++pt.m_used;
            if (rec.p_initial < alpha) ++init_hits;
            for (double p : rec.p_vs_treated) {
                if (p < alpha) ++gen_hits;
                ++gen_total;
            }
            if (selection.kind == SelectionRule::Kind::BestByPValue &&
                !rec.p_vs_control.empty()) {
                const auto best = static_cast<std::size_t>(select_best(rec));
                if (rec.p_vs_treated[best] < alpha) ++best_hits;
                ++best_total;
            } else if (selection.kind == SelectionRule::Kind::TopFraction &&
                       !rec.p_vs_control.empty()) {
                const auto n = rec.p_vs_control.size();
                auto k = static_cast<std::size_t>(
                    std::lround(selection.q * static_cast<double>(n)));
                k = std::clamp<std::size_t>(k, 1, n);
                std::vector<std::size_t> order(n);
                std::iota(order.begin(), order.end(), std::size_t{0});
                std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                    return rec.p_vs_control[a] > rec.p_vs_control[b];
                });
                for (std::size_t i = 0; i < k; ++i) {
                    if (rec.p_vs_treated[order[i]] < alpha) ++best_hits;
                    ++best_total;
                }
            }
        }
        if (pt.m_used > 0) {
            pt.power_initial = static_cast<double>(init_hits) / pt.m_used;
            if (gen_total > 0)
                pt.power_gen = static_cast<double>(gen_hits) / static_cast<double>(gen_total);
        }
        if (selection.kind != SelectionRule::Kind::None && best_total > 0) {
            pt.has_best = true;
            pt.power_gen_best =
                static_cast<double>(best_hits) / static_cast<double>(best_total);
        }
        pt.accept_prop = acceptance_proportion(matching, alpha);
        cal.points.push_back(pt);
    }
    return cal;
}

void attach_theory(CalibrationResult& cal, const SimConfig& sim, double upsilon, int mc_reps,
                   std::uint64_t seed) {
    if (cal.points.empty()) return;
    if (mc_reps < 1) throw ValidationError("mc_reps must be >= 1");
    std::vector<double> betas;
    betas.reserve(cal.points.size());
    for (const auto& pt : cal.points) betas.push_back(pt.beta);
    const auto rows = effect_size_mc(sim, betas, mc_reps, derive_seed(seed, "effect-size"));
    for (std::size_t i = 0; i < cal.points.size(); ++i) {
        const auto& row = rows[i];
        auto& pt = cal.points[i];
        const double rate_c = row.events_control / row.n_control;
        const double e_c_reduced = rate_c * std::round(upsilon * row.n_control);
        const double e_c_generated = rate_c * row.n_treated;
        pt.theory_reduced =
            schoenfeld_power(row.beta_tilde, cal.alpha, row.events_treated, e_c_reduced);
        pt.theory_generated =
            schoenfeld_power(row.beta_tilde, cal.alpha, row.events_treated, e_c_generated);
        pt.has_theory = true;
    }
}

void SearchConfig::check() const {
    if (budget < 1) throw ValidationError("search budget must be >= 1");
    if (method < 1 || method > 3) throw ValidationError("search method must be 1, 2, or 3");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
        throw ValidationError("validation_fraction must lie in (0, 1)");
    if (n_gen < 1) throw ValidationError("search n_gen must be >= 1");
    if (space.learning_rates.empty()) throw ValidationError("learning rate grid is empty");
    if (space.batch_fractions.empty() && !space.include_batch_100)
        throw ValidationError("batch size grid is empty");
    auto check_range = [](int lo, int hi, int step, const char* what) {
        if (lo < 1 || hi < lo || step < 1)
            throw ValidationError(std::string("invalid grid for ") + what);
    };
    check_range(space.z_min, space.z_max, space.z_step, "z_dim");
    check_range(space.y_min, space.y_max, space.y_step, "y_dim");
    check_range(space.s_min, space.s_max, space.s_step, "s_dim");
    if (space.survival_layers.empty()) throw ValidationError("survival layer grid is empty");
    if (space.interval_grid.empty()) throw ValidationError("interval grid is empty");
    base.check();
}

SearchResult hyperparameter_search(const TrialDataset& data, const SearchConfig& cfg,
                                   std::uint64_t seed) {
    cfg.check();
    if (data.n_rows() < 4) throw ValidationError("search needs at least 4 rows");
    const auto n = static_cast<int>(data.n_rows());

    TrialDataset train_split, val_split;
    if (cfg.method != 1) {
        auto n_val = static_cast<int>(std::lround(cfg.validation_fraction * n));
        n_val = std::clamp(n_val, 1, n - 1);
        std::vector<std::size_t> idx(static_cast<std::size_t>(n));
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        Rng rng(derive_seed(seed, "split"));
        rng.shuffle(idx);
        std::vector<std::size_t> val_idx(idx.begin(), idx.begin() + n_val);
        std::vector<std::size_t> train_idx(idx.begin() + n_val, idx.end());
        std::sort(val_idx.begin(), val_idx.end());
        std::sort(train_idx.begin(), train_idx.end());
        val_split = take_rows(data, val_idx);
        train_split = take_rows(data, train_idx);
    }
    const TrialDataset& fit_data = cfg.method == 1 ? data : train_split;
    const int n_train = static_cast<int>(fit_data.n_rows());

    auto grid_pick = [](int lo, int hi, int step, Rng& rng) {
        const auto count = static_cast<std::size_t>((hi - lo) / step + 1);
        return lo + step * static_cast<int>(rng.below(count));
    };

    SearchResult res;
    for (int t = 0; t < cfg.budget; ++t) {
        Rng rng(derive_seed(seed, "trial-cfg", static_cast<std::uint64_t>(t)));
        HiVaeConfig c = cfg.base;
        c.learning_rate = cfg.space.learning_rates[rng.below(cfg.space.learning_rates.size())];
        std::vector<int> batch_opts;
        for (double f : cfg.space.batch_fractions)
            batch_opts.push_back(std::max(1, static_cast<int>(std::lround(f * n_train))));
        if (cfg.space.include_batch_100) batch_opts.push_back(100);
        c.batch_size = std::clamp(batch_opts[rng.below(batch_opts.size())], 1, n_train);
        c.z_dim = grid_pick(cfg.space.z_min, cfg.space.z_max, cfg.space.z_step, rng);
        c.y_dim = grid_pick(cfg.space.y_min, cfg.space.y_max, cfg.space.y_step, rng);
        c.s_dim = grid_pick(cfg.space.s_min, cfg.space.s_max, cfg.space.s_step, rng);
        if (c.survival_head == SurvivalHeadKind::Piecewise) {
            c.survival_layers =
                cfg.space.survival_layers[rng.below(cfg.space.survival_layers.size())];
            c.n_intervals = cfg.space.interval_grid[rng.below(cfg.space.interval_grid.size())];
        }
        SearchTrial trial;
        trial.cfg = c;
        try {
            const std::uint64_t tseed = derive_seed(seed, "trial-run", static_cast<std::uint64_t>(t));
            auto model = prepare_model(fit_data, c, false, derive_seed(tseed, "prepare"));
            const auto tr = train_model(model, fit_data, derive_seed(tseed, "train"));
            if (tr.diverged) throw NumericalError("training diverged: " + tr.note);
            const TrialDataset& src = cfg.method == 2 ? val_split : data;
            const auto n_sim = static_cast<int>(src.n_rows());
            double total = 0.0;
            for (int g = 0; g < cfg.n_gen; ++g) {
                const auto arm = sample_posterior(model, src, n_sim,
                                                  derive_seed(tseed, "gen", g));
                total += survival_distance(data, arm);
            }
            trial.objective = total / cfg.n_gen;
        } catch (const std::exception& e) {
            trial.failed = true;
            trial.note = e.what();
        }
        if (!trial.failed && (res.best_trial < 0 || trial.objective < res.best_objective)) {
            res.best = trial.cfg;
            res.best_objective = trial.objective;
            res.best_trial = t;
        }
        res.trace.push_back(std::move(trial));
    }
    if (res.best_trial < 0) throw NumericalError("all hyperparameter search trials failed");
    return res;
}

void StudyConfig::check() const {
    sim.check();
    model.check();
    if (upsilons.empty()) throw ValidationError("upsilons must be nonempty");
    for (double u : upsilons)
        if (!(u > 0.0 && u <= 1.0)) throw ValidationError("upsilon must lie in (0, 1]");
    if (modes.empty()) throw ValidationError("modes must be nonempty");
    if (selections.empty()) throw ValidationError("selections must be nonempty");
    if (n_gen < 1) throw ValidationError("n_gen must be >= 1");
    if (m_reps < 1) throw ValidationError("m_reps must be >= 1");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must lie in (0, 1)");
    if (theory_mc_reps < 0) throw ValidationError("theory_mc_reps must be >= 0");
    if (jobs < 1) throw ValidationError("jobs must be >= 1");
}

StudyConfig study_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("invalid study config JSON: ") + e.what());
    }
    StudyConfig c;
    try {
        if (j.contains("sim")) c.sim = sim_config_from_json(j.at("sim").dump());
        if (j.contains("model")) c.model = hivae_config_from_json(j.at("model").dump());
        if (j.contains("generator")) {
            const auto g = j.at("generator").get<std::string>();
            if (g == "identity")
                c.use_identity_generator = true;
            else if (g == "hivae")
                c.use_identity_generator = false;
            else
                throw ValidationError("unknown generator '" + g + "'");
        }
        if (j.contains("training_arms"))
            c.training_arms = training_arms_from_string(j.at("training_arms").get<std::string>());
        if (j.contains("upsilons")) c.upsilons = j.at("upsilons").get<std::vector<double>>();
        if (j.contains("modes")) {
            c.modes.clear();
            for (const auto& s : j.at("modes"))
                c.modes.push_back(sampling_mode_from_string(s.get<std::string>()));
        }
        if (j.contains("selections")) {
            c.selections.clear();
            for (const auto& s : j.at("selections"))
                c.selections.push_back(selection_from_string(s.get<std::string>()));
        }
        if (j.contains("beta_grid")) c.beta_grid = j.at("beta_grid").get<std::vector<double>>();
        if (j.contains("n_gen")) c.n_gen = j.at("n_gen").get<int>();
        if (j.contains("m_reps")) c.m_reps = j.at("m_reps").get<int>();
        if (j.contains("alpha")) c.alpha = j.at("alpha").get<double>();
        if (j.contains("theory_mc_reps")) c.theory_mc_reps = j.at("theory_mc_reps").get<int>();
        if (j.contains("with_metrics")) c.with_metrics = j.at("with_metrics").get<bool>();
        if (j.contains("jobs")) c.jobs = j.at("jobs").get<int>();
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("invalid study config JSON: ") + e.what());
    }
    c.check();
    return c;
}

namespace {

json study_config_to_json_obj(const StudyConfig& c) {
    json j;
    j["sim"] = json::parse(sim_config_to_json(c.sim));
    j["model"] = json::parse(hivae_config_to_json(c.model));
    j["generator"] = c.use_identity_generator ? "identity" : "hivae";
    j["training_arms"] = training_arms_to_string(c.training_arms);
    j["upsilons"] = c.upsilons;
    json modes = json::array();
    for (auto m : c.modes) modes.push_back(sampling_mode_to_string(m));
    j["modes"] = modes;
    json sels = json::array();
    for (const auto& s : c.selections) sels.push_back(selection_to_string(s));
    j["selections"] = sels;
    j["beta_grid"] = c.beta_grid;
    j["n_gen"] = c.n_gen;
    j["m_reps"] = c.m_reps;
    j["alpha"] = c.alpha;
    j["theory_mc_reps"] = c.theory_mc_reps;
    j["with_metrics"] = c.with_metrics;
    j["jobs"] = c.jobs;
    j["seed"] = c.seed;
    return j;
}

}  // namespace

std::string study_config_to_json(const StudyConfig& cfg) {
    return study_config_to_json_obj(cfg).dump(2);
}

namespace {

void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
    if (jobs <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    auto worker = [&]() {
        while (true) {
            const int i = next.fetch_add(1);
            if (i >= n) break;
            fn(i);
        }
    };
    const int k = std::min(jobs, n);
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
}

std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

std::string fmt_full(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ValidationError("cannot write '" + path + "'");
    f << content;
}

std::string read_text(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValidationError("cannot read '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

json record_to_json(const ReplicationRecord& r) {
    json j;
    j["beta"] = r.beta;
    j["replication"] = r.replication;
    j["failed"] = r.failed;
    j["note"] = r.note;
    j["p_initial"] = r.p_initial;
    j["p_vs_treated"] = r.p_vs_treated;
    j["p_vs_control"] = r.p_vs_control;
    j["n_train_control"] = r.n_train_control;
    j["n_treated"] = r.n_treated;
    return j;
}

ReplicationRecord record_from_json(const json& j) {
    ReplicationRecord r;
    r.beta = j.at("beta").get<double>();
    r.replication = j.at("replication").get<int>();
    r.failed = j.at("failed").get<bool>();
    r.note = j.at("note").get<std::string>();
    r.p_initial = j.at("p_initial").get<double>();
    r.p_vs_treated = j.at("p_vs_treated").get<std::vector<double>>();
    r.p_vs_control = j.at("p_vs_control").get<std::vector<double>>();
    r.n_train_control = j.at("n_train_control").get<int>();
    r.n_treated = j.at("n_treated").get<int>();
    return r;
}

json calibration_to_json(const CalibrationResult& cal) {
    json j;
    j["alpha"] = cal.alpha;
    j["selection"] = selection_to_string(cal.selection);
    json points = json::array();
    for (const auto& pt : cal.points) {
        json p;
        p["beta"] = pt.beta;
        p["power_initial"] = pt.power_initial;
        p["power_gen"] = pt.power_gen;
        if (pt.has_best)
            p["power_gen_best"] = pt.power_gen_best;
        else
            p["power_gen_best"] = nullptr;
        p["accept_prop"] = pt.accept_prop;
        p["m_used"] = pt.m_used;
        p["m_failed"] = pt.m_failed;
        if (pt.has_theory) {
            p["theory_reduced"] = pt.theory_reduced;
            p["theory_generated"] = pt.theory_generated;
        } else {
            p["theory_reduced"] = nullptr;
            p["theory_generated"] = nullptr;
        }
        points.push_back(p);
    }
    j["points"] = points;
    return j;
}

std::string power_csv(const CalibrationResult& cal) {
    std::ostringstream out;
    out << "beta,power_initial,power_gen,power_gen_best,accept_prop,theory_reduced,"
           "theory_generated,m_used,m_failed\n";
    for (const auto& pt : cal.points) {
        out << fmt_full(pt.beta) << ',' << fmt_full(pt.power_initial) << ','
            << fmt_full(pt.power_gen) << ',';
        if (pt.has_best) out << fmt_full(pt.power_gen_best);
        out << ',' << fmt_full(pt.accept_prop) << ',';
        if (pt.has_theory) out << fmt_full(pt.theory_reduced);
        out << ',';
        if (pt.has_theory) out << fmt_full(pt.theory_generated);
        out << ',' << pt.m_used << ',' << pt.m_failed << '\n';
    }
    return out.str();
}

std::string sanitize(const std::string& s) {
    std::string out = s;
    for (char& c : out)
        if (c == ':' || c == '/' || c == ' ') c = '-';
    return out;
}

std::unique_ptr<Generator> make_generator(const StudyConfig& cfg, SamplingMode mode) {
    if (cfg.use_identity_generator) return std::make_unique<IdentityGenerator>();
    return std::make_unique<HiVaeGenerator>(cfg.model, cfg.training_arms, mode);
}

}  // namespace

StudyReport run_study(const StudyConfig& cfg, const std::string& out_dir) {
    cfg.check();
    fs::create_directories(out_dir);
    write_text((fs::path(out_dir) / "study_config.json").string(),
               study_config_to_json(cfg) + "\n");

    // one censoring calibration per beta, shared by every cell
    std::vector<double> lambda_by_beta(cfg.beta_grid.size());
    for (std::size_t bi = 0; bi < cfg.beta_grid.size(); ++bi) {
        SimConfig sim_b = cfg.sim;
        sim_b.beta = cfg.beta_grid[bi];
        lambda_by_beta[bi] = resolve_lambda_c(sim_b, derive_seed(cfg.seed, "lambda", bi));
    }

    StudyReport report;
    json report_cells = json::array();
    for (double upsilon : cfg.upsilons) {
        for (SamplingMode mode : cfg.modes) {
            const std::string key = "u" + fmt_g(upsilon) + "_" + sampling_mode_to_string(mode);
            const fs::path cell_dir = fs::path(out_dir) / ("cell_" + key);
            fs::create_directories(cell_dir);
            const std::uint64_t cell_seed = derive_seed(cfg.seed, "cell:" + key);

            ScenarioConfig sc;
            sc.upsilon = upsilon;
            sc.training_arms = cfg.training_arms;
            sc.sampling_mode = mode;
            sc.n_gen = cfg.n_gen;
            sc.m_reps = cfg.m_reps;
            sc.beta_grid = cfg.beta_grid;
            sc.alpha = cfg.alpha;

            const int n_tasks = static_cast<int>(cfg.beta_grid.size()) * cfg.m_reps;
            std::vector<ReplicationRecord> records(static_cast<std::size_t>(n_tasks));
            const std::string records_path = (cell_dir / "records.json").string();

            bool loaded = false;
            if (fs::exists(records_path)) {
                try {
                    const auto arr = json::parse(read_text(records_path));
                    if (arr.is_array() && static_cast<int>(arr.size()) == n_tasks) {
                        for (int i = 0; i < n_tasks; ++i)
                            records[static_cast<std::size_t>(i)] = record_from_json(arr.at(i));
                        loaded = true;
                    }
                } catch (const std::exception&) {
                    loaded = false;  // recompute on any parse problem
                }
            }
            if (!loaded && n_tasks > 0) {
                parallel_for(n_tasks, cfg.jobs, [&](int task) {
                    const auto bi = static_cast<std::size_t>(task) /
                                    static_cast<std::size_t>(cfg.m_reps);
                    const int m = task % cfg.m_reps;
                    const std::uint64_t task_seed =
                        derive_seed(cell_seed, "rep", static_cast<std::uint64_t>(task));
                    ReplicationRecord rec;
                    try {
                        SimConfig sim_b = cfg.sim;
                        sim_b.beta = cfg.beta_grid[bi];
                        sim_b.lambda_c = lambda_by_beta[bi];
                        const auto trial =
                            simulate_trial(sim_b, derive_seed(task_seed, "sim"));
                        auto gen = make_generator(cfg, mode);
                        rec = run_replication(trial, sc, *gen, task_seed);
                    } catch (const std::exception& e) {
                        rec.failed = true;
                        rec.note = e.what();
                    }
                    rec.beta = cfg.beta_grid[bi];
                    rec.replication = m;
                    records[static_cast<std::size_t>(task)] = rec;
                });
                json arr = json::array();
                for (const auto& rec : records) arr.push_back(record_to_json(rec));
                write_text(records_path, arr.dump(2) + "\n");
            }

            StudyCell cell;
            cell.upsilon = upsilon;
            cell.mode = mode;
            cell.records = records;

            json cell_json;
            cell_json["upsilon"] = upsilon;
            cell_json["mode"] = sampling_mode_to_string(mode);
            cell_json["dir"] = "cell_" + key;
            json cals_json = json::array();
            for (const auto& sel : cfg.selections) {
                auto cal = estimate_power(records, cfg.beta_grid, cfg.alpha, sel);
                if (cfg.theory_mc_reps > 0 && !cal.points.empty())
                    attach_theory(cal, cfg.sim, upsilon, cfg.theory_mc_reps,
                                  derive_seed(cfg.seed, "theory"));
                const std::string sel_name = sanitize(selection_to_string(sel));
                write_text((cell_dir / ("calibration_" + sel_name + ".json")).string(),
                           calibration_to_json(cal).dump(2) + "\n");
                write_text((cell_dir / ("power_" + sel_name + ".csv")).string(),
                           power_csv(cal));
                cals_json.push_back(calibration_to_json(cal));
                cell.calibrations.push_back(std::move(cal));
            }
            cell_json["calibrations"] = cals_json;

            if (cfg.with_metrics && !cfg.beta_grid.empty()) {
                // one representative arm: replication 0 of the first beta,
                // regenerated with the same seeds the record used
                const std::uint64_t task_seed = derive_seed(cell_seed, "rep", 0);
                try {
                    SimConfig sim_b = cfg.sim;
                    sim_b.beta = cfg.beta_grid[0];
                    sim_b.lambda_c = lambda_by_beta[0];
                    const auto trial = simulate_trial(sim_b, derive_seed(task_seed, "sim"));
                    auto gen = make_generator(cfg, mode);
                    ReplicationCapture cap;
                    run_replication_impl(trial, sc, *gen, task_seed, &cap);
                    if (cap.filled) {
                        MetricsOptions mopt;
                        mopt.seed = derive_seed(cfg.seed, "metrics");
                        cell.metrics = evaluate_metrics(cap.train_control, cap.first_arm, mopt);
                        cell.has_metrics = true;
                    }
                } catch (const std::exception& e) {
                    cell_json["metrics_error"] = e.what();
                }
                if (cell.has_metrics) {
                    const auto mj = json::parse(metrics_report_to_json(cell.metrics));
                    write_text((cell_dir / "metrics.json").string(), mj.dump(2) + "\n");
                    cell_json["metrics"] = mj;
                } else {
                    cell_json["metrics"] = nullptr;
                }
            }

            long usable = 0;
            for (const auto& rec : records)
                if (!rec.failed) ++usable;
            if (n_tasks > 0 && usable == 0)
                report.failed_cells.push_back("cell_" + key);
            cell_json["failed_replications"] =
                static_cast<long>(records.size()) - usable;
            report_cells.push_back(cell_json);
            report.cells.push_back(std::move(cell));
        }
    }

    json report_json;
    report_json["cells"] = report_cells;
    report_json["failed_cells"] = report.failed_cells;
    write_text((fs::path(out_dir) / "report.json").string(), report_json.dump(2) + "\n");
    return report;
}

std::string study_summary(const std::string& dir) {
    const auto path = (fs::path(dir) / "report.json").string();
    json j;
    try {
        j = json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw ValidationError(std::string("invalid report.json: ") + e.what());
    }
    std::ostringstream out;
    for (const auto& cell : j.at("cells")) {
        out << "cell upsilon=" << cell.at("upsilon").get<double>()
            << " mode=" << cell.at("mode").get<std::string>() << "\n";
        for (const auto& cal : cell.at("calibrations")) {
            out << "  selection=" << cal.at("selection").get<std::string>() << "\n";
            out << "    beta  p_initial  p_gen  p_gen_best  accept  th_reduced  th_generated\n";
            for (const auto& pt : cal.at("points")) {
                auto cellval = [&](const char* k) {
                    return pt.at(k).is_null() ? std::string("-")
                                              : fmt_g(pt.at(k).get<double>());
                };
                char line[160];
                std::snprintf(line, sizeof(line),
                              "    %-5g %-10s %-6s %-11s %-7s %-11s %s\n",
                              pt.at("beta").get<double>(),
                              fmt_g(pt.at("power_initial").get<double>()).c_str(),
                              fmt_g(pt.at("power_gen").get<double>()).c_str(),
                              cellval("power_gen_best").c_str(),
                              fmt_g(pt.at("accept_prop").get<double>()).c_str(),
                              cellval("theory_reduced").c_str(),
                              cellval("theory_generated").c_str());
                out << line;
            }
        }
        if (cell.contains("metrics") && !cell.at("metrics").is_null()) {
            const auto& m = cell.at("metrics");
            out << "  metrics: js=" << fmt_g(m.at("js_distance").get<double>())
                << " survival=" << fmt_g(m.at("survival_distance").get<double>())
                << " auc=" << fmt_g(m.at("detection_auc").get<double>())
                << " nndr=" << fmt_g(m.at("nndr").get<double>()) << "\n";
        }
    }
    const auto& failed = j.at("failed_cells");
    out << "failed cells: ";
    if (failed.empty()) {
        out << "none\n";
    } else {
        for (std::size_t i = 0; i < failed.size(); ++i)
            out << (i ? ", " : "") << failed.at(i).get<std::string>();
        out << "\n";
    }
    return out.str();
}

}  // namespace synthtrial
