#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "synthtrial/common.hpp"
#include "synthtrial/dataset.hpp"

namespace synthtrial {

enum class CensoringMode { Independent, Dependent };

struct SimConfig {
    int n = 600;
    int d = 12;
    double rho = 0.5;
    std::vector<bool> binary_mask;  // size d; true = dichotomized as 1{x > 0}
    std::vector<double> alpha;      // size d, log hazard coefficients
    double beta = 0.0;              // treatment log hazard ratio
    double kappa_t = 2.0;           // event Weibull shape
    double kappa_c = 2.0;           // censoring Weibull shape
    double lambda_c = 0.0;          // censoring scale; <= 0 means calibrate
    CensoringMode mode = CensoringMode::Independent;
    double target_censoring = 0.15;

    // n=600, d=12, binary block x1..x6, real block x7..x12 with coefficients
    // (1, -e^{-1/10}, e^{-2/10}, 0, 0, 0), rho=0.5, shapes 2, 15% censoring.
    static SimConfig defaults();
    void check() const;
};

// Correlated covariates: latent z ~ N(0, Sigma) with Sigma_jk = rho^{|j-k|}
// via Cholesky, masked columns thresholded to 1{z > 0}. Row-major, n x d.
std::vector<std::vector<double>> sample_covariates(const SimConfig& cfg, int n, Rng& rng);

struct OutcomeDraw {
    std::vector<double> latent_event;   // tau
    std::vector<double> latent_censor;  // c
    std::vector<double> time;           // min(tau, c)
    std::vector<int> event;             // 1{tau <= c}
};

// Inverse-transform Weibull event and censoring times given per-subject linear
// predictors. Requires cfg.lambda_c > 0.
OutcomeDraw sample_outcomes(const SimConfig& cfg, const std::vector<double>& linpred, Rng& rng);

// Bisection for the censoring scale reaching `target` censoring within +-1%
// on a frozen pilot sample; throws NumericalError when the target cannot be
// bracketed in [1e-6, 1e6].
double calibrate_censoring(const SimConfig& cfg, double target, int pilot_n, std::uint64_t seed);

// cfg.lambda_c when positive, otherwise the calibrated value.
double resolve_lambda_c(const SimConfig& cfg, std::uint64_t seed);

Schema sim_schema(const SimConfig& cfg);

TrialDataset simulate_trial(const SimConfig& cfg, std::uint64_t seed);

SimConfig sim_config_from_json(const std::string& text);
std::string sim_config_to_json(const SimConfig& cfg);

}  // namespace synthtrial
