#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "synthtrial/dataset.hpp"
#include "synthtrial/nncore.hpp"

namespace synthtrial {

enum class SurvivalHeadKind { Weibull, Piecewise };

std::string survival_head_to_string(SurvivalHeadKind k);
SurvivalHeadKind survival_head_from_string(const std::string& s);

struct HiVaeConfig {
    int s_dim = 10;  // mixture components L
    int z_dim = 10;
    int y_dim = 20;
    SurvivalHeadKind survival_head = SurvivalHeadKind::Weibull;
    int n_intervals = 10;  // piecewise head only
    int survival_layers = 1;
    double learning_rate = 1e-3;
    int batch_size = 100;
    int max_epochs = 200;
    int patience = 10;
    double tau = 1.0;
    bool anneal_tau = false;  // linear tau -> 0.5 over the epoch schedule

    void check() const;
};

HiVaeConfig hivae_config_from_json(const std::string& text);
std::string hivae_config_to_json(const HiVaeConfig& cfg);

// Per-feature input statistics. Real columns store mean/sd of the raw value,
// positive columns mean/sd of log(x); counts and categoricals leave the
// defaults unused.
struct FeatureNorm {
    double mean = 0.0;
    double sd = 1.0;
};

struct TimeNorm {
    double log_mean = 0.0;  // encoder input scale for log t
    double log_sd = 1.0;
    double scale = 1.0;  // Weibull head works on t / scale
    std::vector<double> bounds;  // piecewise interval edges, bounds[0] = 0
};

struct HiVaeModel {
    Schema schema;
    HiVaeConfig cfg;
    bool includes_treatment = false;  // treatment modeled as an extra categorical feature
    std::vector<FeatureNorm> norms;   // one per model feature
    TimeNorm time_norm;
    nn::ParamStore params;

    // Model features: schema covariates, plus treatment last when included.
    std::vector<ColumnSpec> model_features() const;
};

struct TrainTrace {
    std::vector<double> epoch_elbo;  // per-row ELBO on the full training set
    int best_epoch = -1;
    bool diverged = false;
    std::string note;
};

// Survival math shared by both heads (raw time scale).
double weibull_log_density(double t, double scale, double shape);
double weibull_log_survival(double t, double scale, double shape);

// Interval edges: 0, interior empirical quantiles, 1.05 * max(times); strictly
// increasing by construction.
std::vector<double> piecewise_bounds(const std::vector<double>& times, int n_intervals);
double piecewise_density(double t, const std::vector<double>& bounds,
                         const std::vector<double>& masses);
double piecewise_survival(double t, const std::vector<double>& bounds,
                          const std::vector<double>& masses);

struct SurvivalParams {
    double scale = 1.0;  // Weibull
    double shape = 1.0;
    std::vector<double> masses;  // piecewise
};

// delta=1: log f_T(t) + log S_C(t); delta=0: log S_T(t) + log f_C(t).
// Beyond the final piecewise edge both S and the density floor at 1e-12.
double survival_loglik(SurvivalHeadKind kind, const std::vector<double>& bounds, double t,
                       double delta, const SurvivalParams& eta_t, const SurvivalParams& eta_c);

struct EncodeResult {
    std::vector<double> pi;  // length L
    nn::Mat mu;              // L x K posterior mean given each component
    nn::Mat var;             // L x K diagonal variances
};

struct FeatureParams {
    FeatureKind kind = FeatureKind::Real;
    double mu = 0.0;  // real: standardized scale; positive: standardized log scale
    double var = 1.0;
    double lambda = 0.0;         // count
    std::vector<double> probs;   // categorical
};

// Normalization statistics and freshly initialized parameters; no training.
HiVaeModel prepare_model(const TrialDataset& data, const HiVaeConfig& cfg,
                         bool include_treatment, std::uint64_t seed);

EncodeResult encode_row(const HiVaeModel& m, const TrialDataset& data, int row);
FeatureParams decode_feature(const HiVaeModel& m, const std::vector<double>& y, int s,
                             int feature);
void decode_survival(const HiVaeModel& m, const std::vector<double>& y, int s,
                     SurvivalParams& eta_t, SurvivalParams& eta_c);

struct ElboParts {
    double elbo = 0.0;  // summed over the batch
    double recon = 0.0;
    double kl_z = 0.0;
    double kl_s = 0.0;
};

// Single-sample ELBO on the given rows; noise_seed fixes the Gumbel and
// Gaussian draws so repeated calls (e.g. finite differencing) see the same
// relaxation.
ElboParts elbo_value(const HiVaeModel& m, const TrialDataset& data, const std::vector<int>& rows,
                     std::uint64_t noise_seed);
std::map<std::string, nn::Mat> elbo_grads(const HiVaeModel& m, const TrialDataset& data,
                                          const std::vector<int>& rows, std::uint64_t noise_seed);

// Head-level log-likelihood closures for gradient checking: y (B x H) and
// s_onehot (B x L) enter as constants, only the head parameters vary.
// Targets are on the decoder's native scale (standardized for real features,
// standardized log for positive ones, raw counts, category codes).
double feature_head_value(const HiVaeModel& m, int feature, const nn::Mat& y,
                          const nn::Mat& s_onehot, const std::vector<double>& target);
std::map<std::string, nn::Mat> feature_head_grads(const HiVaeModel& m, int feature,
                                                  const nn::Mat& y, const nn::Mat& s_onehot,
                                                  const std::vector<double>& target);
double survival_head_value(const HiVaeModel& m, const nn::Mat& y, const nn::Mat& s_onehot,
                           const std::vector<double>& t, const std::vector<double>& delta);
std::map<std::string, nn::Mat> survival_head_grads(const HiVaeModel& m, const nn::Mat& y,
                                                   const nn::Mat& s_onehot,
                                                   const std::vector<double>& t,
                                                   const std::vector<double>& delta);

// Minibatch Adam ascent on the ELBO with early stopping (no relative
// improvement of 1e-4 for `patience` epochs); the best checkpoint wins. On a
// non-finite step the last good checkpoint is restored and the trace reports
// the divergence.
TrainTrace train_model(HiVaeModel& m, const TrialDataset& data, std::uint64_t seed);

// Draws rows by cycling reshuffled source permutations, encodes, samples
// (s, z) from the posterior, decodes and samples every feature and (t, delta).
// identity_debug bypasses the decoder and copies the scheduled source rows.
TrialDataset sample_posterior(const HiVaeModel& m, const TrialDataset& source, int n_out,
                              std::uint64_t seed, bool identity_debug = false);
TrialDataset sample_prior(const HiVaeModel& m, int n_out, std::uint64_t seed);

// Writes parameters to `path` and a sidecar (schema, config, normalization)
// to `path + ".meta.json"`.
void save_model(const HiVaeModel& m, const std::string& path);
HiVaeModel load_model(const std::string& path);

}  // namespace synthtrial
