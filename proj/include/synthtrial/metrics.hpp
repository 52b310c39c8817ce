#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "synthtrial/dataset.hpp"
#include "synthtrial/nncore.hpp"

namespace synthtrial {

// Average per-covariate Jensen-Shannon divergence (log base 2, so each term
// lies in [0, 1]): categorical columns by level frequencies, numeric columns
// by `bins` equal-width bins over the pooled range. Outcome columns are
// covered by survival_distance instead.
double js_distance(const TrialDataset& real, const TrialDataset& synth, int bins = 10);

// Mean over numeric covariate columns of 1 - sup|ECDF difference|; empty when
// the schema has no numeric covariates.
std::optional<double> ks_score(const TrialDataset& real, const TrialDataset& synth);

// Integral of |S_real - S_synth| between Kaplan-Meier curves over
// [0, min(max time of each arm)], evaluated on the merged step grid and
// divided by the integration range.
double survival_distance(const TrialDataset& real, const TrialDataset& synth);

// Pluggable real-vs-synthetic classifier for detection_auc. Returns one score
// per test row; larger means more likely synthetic.
class DetectionClassifier {
  public:
    virtual ~DetectionClassifier() = default;
    virtual std::vector<double> fit_score(const nn::Mat& x_train, const std::vector<int>& y_train,
                                          const nn::Mat& x_test, std::uint64_t seed) = 0;
};

// Gradient-boosted regression trees on the logistic loss, Newton leaf values.
class BoostedTreesClassifier : public DetectionClassifier {
  public:
    int rounds = 100;
    int max_depth = 3;
    double learning_rate = 0.1;
    double l2 = 1.0;

    std::vector<double> fit_score(const nn::Mat& x_train, const std::vector<int>& y_train,
                                  const nn::Mat& x_test, std::uint64_t seed) override;
};

// Mann-Whitney ROC-AUC with 0.5 credit for tied scores; labels are 0/1.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Stratified cross-validated mean ROC-AUC of real (0) vs synthetic (1) on
// one-hot, standardized features; 0.5 means indistinguishable. classifier may
// be null (boosted trees default).
double detection_auc(const TrialDataset& real, const TrialDataset& synth, int folds = 5,
                     std::uint64_t seed = 20240901, DetectionClassifier* classifier = nullptr,
                     std::vector<std::string>* notices = nullptr);

struct KMapResult {
    bool defined = false;  // at least one real record matched
    long k_min = 0;        // minimum synthetic count over matched real records
    double mean = 0.0;     // mean synthetic count over matched real records
    long zero_matches = 0; // real records absent from the synthetic support
};

// Quasi-identifier combinations: numeric QI columns are discretized to
// real-data quantile bins (deciles by default), then each real record's
// combination is counted in the synthetic data.
KMapResult k_map(const TrialDataset& real, const TrialDataset& synth,
                 const std::vector<std::string>& quasi_identifiers, int bins = 10);

struct NndrResult {
    double value = 0.0;  // mean clipped ratio over usable real records
    long skipped = 0;    // real records with a zero-distance real neighbor
};

// Nearest-neighbor distance ratio d(nearest synthetic) / d(nearest other
// real) per real record, clipped to [0, 1]; 0 means synthetic duplicates.
NndrResult nndr(const TrialDataset& real, const TrialDataset& synth);

struct MetricsOptions {
    int histogram_bins = 10;
    int detection_folds = 5;
    int discretize_bins = 10;
    std::vector<std::string> quasi_identifiers;  // empty: k_map omitted
    std::uint64_t seed = 20240901;
};

struct MetricsReport {
    double js_distance = 0.0;
    bool has_ks_score = false;
    double ks_score = 1.0;
    double survival_distance = 0.0;
    double detection_auc = 0.5;
    bool has_k_map = false;
    long k_map = 0;
    double k_map_mean = 0.0;
    long k_map_zero_matches = 0;
    double nndr = 0.0;
    long nndr_skipped = 0;
    std::vector<std::string> notices;
};

MetricsReport evaluate_metrics(const TrialDataset& real, const TrialDataset& synth,
                               const MetricsOptions& opt);

std::string metrics_report_to_json(const MetricsReport& report);

}  // namespace synthtrial
