#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "synthtrial/dataset.hpp"
#include "synthtrial/hivae.hpp"
#include "synthtrial/metrics.hpp"
#include "synthtrial/simulate.hpp"
#include "synthtrial/survstats.hpp"

namespace synthtrial {

enum class TrainingArms { ControlOnly, ControlPlusTreated };
enum class SamplingMode { Posterior, Prior };

std::string training_arms_to_string(TrainingArms a);
TrainingArms training_arms_from_string(const std::string& s);
std::string sampling_mode_to_string(SamplingMode m);
SamplingMode sampling_mode_from_string(const std::string& s);

struct SelectionRule {
    enum class Kind { None, BestByPValue, TopFraction };
    Kind kind = Kind::BestByPValue;
    double q = 0.2;  // TopFraction only
};

// "none", "best", or "top:<q>"
std::string selection_to_string(const SelectionRule& r);
SelectionRule selection_from_string(const std::string& s);

struct ScenarioConfig {
    double upsilon = 1.0;
    TrainingArms training_arms = TrainingArms::ControlOnly;
    SamplingMode sampling_mode = SamplingMode::Posterior;
    int n_gen = 50;
    int m_reps = 20;
    std::vector<double> beta_grid{0.0};  // may be empty
    double alpha = 0.05;
    SelectionRule selection{};

    void check() const;
};

// A fitted source of synthetic control arms.
class Generator {
  public:
    virtual ~Generator() = default;
    // treated is null when training uses the control arm only
    virtual void fit(const TrialDataset& train_control, const TrialDataset* treated,
                     std::uint64_t seed) = 0;
    virtual TrialDataset generate(int n_out, std::uint64_t seed) = 0;
};

class HiVaeGenerator : public Generator {
  public:
    HiVaeGenerator(HiVaeConfig cfg, TrainingArms arms, SamplingMode mode)
        : cfg_(std::move(cfg)), arms_(arms), mode_(mode) {}

    void fit(const TrialDataset& train_control, const TrialDataset* treated,
             std::uint64_t seed) override;
    TrialDataset generate(int n_out, std::uint64_t seed) override;

    const HiVaeModel& model() const;
    const TrainTrace& trace() const { return trace_; }

  private:
    HiVaeConfig cfg_;
    TrainingArms arms_;
    SamplingMode mode_;
    HiVaeModel model_;
    TrainTrace trace_;
    TrialDataset source_;  // posterior sampling draws rows from here
    bool fitted_ = false;
};

// Test double: returns the training control rows verbatim, ignoring the
// requested size, so generated-vs-control comparisons are exact ties.
class IdentityGenerator : public Generator {
  public:
    void fit(const TrialDataset& train_control, const TrialDataset* treated,
             std::uint64_t seed) override;
    TrialDataset generate(int n_out, std::uint64_t seed) override;

  private:
    TrialDataset train_;
    bool fitted_ = false;
};

struct ReplicationRecord {
    double beta = 0.0;
    int replication = 0;
    bool failed = false;
    std::string note;
    double p_initial = 1.0;            // log-rank of train controls vs treated
    std::vector<double> p_vs_treated;  // per generated arm, vs treated
    std::vector<double> p_vs_control;  // per generated arm, vs train controls
    int n_train_control = 0;
    int n_treated = 0;
};

// Splits arms, downsizes controls by upsilon, fits the generator, produces
// n_gen arms of size n_treated, and records both log-rank p-values per arm.
// Generator failures mark the record failed instead of throwing.
ReplicationRecord run_replication(const TrialDataset& trial, const ScenarioConfig& scenario,
                                  Generator& gen, std::uint64_t seed);

// argmax over generated-vs-control p-values, ties broken by lowest index.
int select_best(const ReplicationRecord& record);

// Fraction of usable replications where BH at level alpha across the
// generated-vs-control p-values leaves at least one null unrejected.
double acceptance_proportion(const std::vector<ReplicationRecord>& records, double alpha);

struct PowerPoint {
    double beta = 0.0;
    double power_initial = 0.0;
    double power_gen = 0.0;
    bool has_best = false;
    double power_gen_best = 0.0;
    double accept_prop = 0.0;
    int m_used = 0;
    int m_failed = 0;
    bool has_theory = false;
    double theory_reduced = 0.0;    // Schoenfeld power at the downsized control size
    double theory_generated = 0.0;  // Schoenfeld power at the generated control size
};

struct CalibrationResult {
    double alpha = 0.05;
    SelectionRule selection;
    std::vector<PowerPoint> points;  // one per beta, in grid order
};

CalibrationResult estimate_power(const std::vector<ReplicationRecord>& records,
                                 const std::vector<double>& beta_grid, double alpha,
                                 const SelectionRule& selection = SelectionRule{});

// Schoenfeld curves from effect_size_mc: expected event counts are scaled to
// the downsized control size (upsilon * N^C) and to the generated size (N^T),
// with the treated arm unchanged.
void attach_theory(CalibrationResult& cal, const SimConfig& sim, double upsilon, int mc_reps,
                   std::uint64_t seed);

struct SearchSpace {
    std::vector<double> learning_rates{2e-2, 1e-3, 1e-4};
    std::vector<double> batch_fractions{0.25, 0.4, 0.6, 0.75};  // of the training size
    bool include_batch_100 = true;
    int z_min = 10, z_max = 200, z_step = 10;
    int y_min = 10, y_max = 200, y_step = 5;
    int s_min = 10, s_max = 200, s_step = 10;
    std::vector<int> survival_layers{1, 2};   // piecewise head only
    std::vector<int> interval_grid{5, 10, 15, 20};
};

struct SearchConfig {
    int budget = 150;
    // 1: fit on all rows, generate n rows from them; 2: fit on a split,
    // generate from the held-out rows at their size; 3: fit on a split,
    // generate from all rows at full size. Scores against the full data.
    int method = 1;
    double validation_fraction = 0.3;
    int n_gen = 5;  // generated sets per trial for the objective
    SearchSpace space;
    HiVaeConfig base;  // head kind, epochs, patience, tau for every trial

    void check() const;
};

struct SearchTrial {
    HiVaeConfig cfg;
    double objective = 0.0;  // mean survival_distance, lower is better
    bool failed = false;
    std::string note;
};

struct SearchResult {
    HiVaeConfig best;
    double best_objective = 0.0;
    int best_trial = -1;
    std::vector<SearchTrial> trace;
};

// Uniform random search over the declared grids.
SearchResult hyperparameter_search(const TrialDataset& data, const SearchConfig& cfg,
                                   std::uint64_t seed);

struct StudyConfig {
    SimConfig sim = SimConfig::defaults();
    HiVaeConfig model;
    bool use_identity_generator = false;
    TrainingArms training_arms = TrainingArms::ControlOnly;
    std::vector<double> upsilons{1.0};
    std::vector<SamplingMode> modes{SamplingMode::Posterior};
    std::vector<SelectionRule> selections{SelectionRule{}};
    std::vector<double> beta_grid{0.0};
    int n_gen = 50;
    int m_reps = 20;
    double alpha = 0.05;
    int theory_mc_reps = 200;
    bool with_metrics = true;
    int jobs = 1;
    std::uint64_t seed = 20240901;

    void check() const;
};

StudyConfig study_config_from_json(const std::string& text);
std::string study_config_to_json(const StudyConfig& cfg);

struct StudyCell {
    double upsilon = 1.0;
    SamplingMode mode = SamplingMode::Posterior;
    std::vector<ReplicationRecord> records;
    std::vector<CalibrationResult> calibrations;  // one per selection rule
    bool has_metrics = false;
    MetricsReport metrics;  // one representative generated arm vs its training controls
};

struct StudyReport {
    std::vector<StudyCell> cells;
    std::vector<std::string> failed_cells;
};

// Executes the (upsilon x mode) grid; replications cover beta x m. Selection
// rules reuse the same records. Writes per-cell records, calibrations,
// power-curve CSVs, and report.json under out_dir; completed cells found on
// disk are reused, so an interrupted study resumes to the identical report.
StudyReport run_study(const StudyConfig& cfg, const std::string& out_dir);

// Rendered summary of a study directory written by run_study.
std::string study_summary(const std::string& dir);

}  // namespace synthtrial
