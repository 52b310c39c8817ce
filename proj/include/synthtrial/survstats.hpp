#pragma once

#include <cstdint>
#include <vector>

#include "synthtrial/common.hpp"
#include "synthtrial/simulate.hpp"

namespace synthtrial {

struct KmPoint {
    double time;
    double surv;
    double n_risk;
    double n_event;
};

// Product-limit estimator. Points at distinct event times; censorings at a tied
// time stay in the risk set for that time.
std::vector<KmPoint> kaplan_meier(const std::vector<double>& times,
                                  const std::vector<int>& events);

// Right-continuous step evaluation, S(t) = 1 before the first event.
double km_eval(const std::vector<KmPoint>& curve, double t);
// Left limit S(t-).
double km_eval_left(const std::vector<KmPoint>& curve, double t);

struct LogRankResult {
    double stat = 0.0;
    double p = 1.0;
    double observed[2] = {0.0, 0.0};
    double expected[2] = {0.0, 0.0};
};

// Two-group log-rank test with hypergeometric variance. Degenerate inputs with
// zero variance yield stat 0, p 1.
LogRankResult logrank_test(const std::vector<double>& times1, const std::vector<int>& events1,
                           const std::vector<double>& times2, const std::vector<int>& events2);

// Step-up false discovery rate control; returns per-hypothesis rejection flags.
std::vector<bool> benjamini_hochberg(const std::vector<double>& pvals, double q);

// Two-sided power of the log-rank test for marginal log hazard ratio
// beta_tilde given expected event counts per arm.
double schoenfeld_power(double beta_tilde, double alpha, double events_treated,
                        double events_control);

struct EffectSizeRow {
    double beta = 0.0;        // conditional log hazard ratio used in simulation
    double beta_tilde = 0.0;  // mean univariate Cox coefficient of treatment
    double events_treated = 0.0;
    double events_control = 0.0;
    double n_treated = 0.0;
    double n_control = 0.0;
};

// Calibrates marginal effect sizes by Monte Carlo: simulates `reps` trials per
// beta and fits a univariate Cox model on the treatment indicator.
std::vector<EffectSizeRow> effect_size_mc(const SimConfig& cfg, const std::vector<double>& betas,
                                          int reps, std::uint64_t seed);

struct CoxResult {
    std::vector<double> beta;
    std::vector<double> se;
    double loglik = 0.0;
    int iterations = 0;
    // Breslow cumulative baseline hazard steps (time, Lambda0(time))
    std::vector<std::pair<double, double>> baseline;
};

// Cox proportional hazards by Newton iteration, Breslow tie handling.
// X is row-major (one covariate vector per subject); p = 0 fits the null model
// and the baseline reduces to the Nelson-Aalen estimator.
CoxResult cox_fit(const std::vector<std::vector<double>>& X, const std::vector<double>& times,
                  const std::vector<int>& events);

double cox_cumhaz(const CoxResult& fit, double t);

// Harrell's concordance. A pair (i, j) is comparable when the earlier time is
// an observed event (ties in time: event vs censored counts, event vs event
// does not); tied risk scores contribute 0.5.
double c_index(const std::vector<double>& risk, const std::vector<double>& times,
               const std::vector<int>& events);

// IPCW Brier score integrated over `grid` by the trapezoid rule and divided by
// the grid range. surv_pred[i][g] is the predicted S(grid[g] | x_i).
double integrated_brier(const std::vector<std::vector<double>>& surv_pred,
                        const std::vector<double>& times, const std::vector<int>& events,
                        const std::vector<double>& grid);

struct KsResult {
    double stat = 0.0;
    double p = 1.0;
};

KsResult ks_two_sample(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace synthtrial
