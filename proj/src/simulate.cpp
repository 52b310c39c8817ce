#include "synthtrial/simulate.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace synthtrial {

using nlohmann::json;

SimConfig SimConfig::defaults() {
    SimConfig cfg;
    cfg.binary_mask.assign(12, false);
    for (int j = 0; j < 6; ++j) cfg.binary_mask[static_cast<std::size_t>(j)] = true;
    cfg.alpha.assign(12, 0.0);
    cfg.alpha[6] = 1.0;
    cfg.alpha[7] = -std::exp(-1.0 / 10.0);
    cfg.alpha[8] = std::exp(-2.0 / 10.0);
    return cfg;
}

void SimConfig::check() const {
    if (n < 2) throw ValidationError("sim config: n must be >= 2");
    if (d < 1) throw ValidationError("sim config: d must be >= 1");
    if (!(rho > -1.0 && rho < 1.0)) throw ValidationError("sim config: rho must be in (-1, 1)");
    if (binary_mask.size() != static_cast<std::size_t>(d))
        throw ValidationError("sim config: binary_mask length must equal d");
    if (alpha.size() != static_cast<std::size_t>(d))
        throw ValidationError("sim config: alpha length must equal d");
    if (!(kappa_t > 0.0) || !(kappa_c > 0.0))
        throw ValidationError("sim config: Weibull shapes must be > 0");
    if (!(target_censoring > 0.0 && target_censoring < 1.0))
        throw ValidationError("sim config: target censoring must be in (0, 1)");
    if (!std::isfinite(lambda_c) || lambda_c < 0.0)
        throw ValidationError("sim config: lambda_c must be finite and >= 0");
    for (double a : alpha)
        if (!std::isfinite(a)) throw ValidationError("sim config: alpha must be finite");
}

namespace {

// Lower Cholesky factor of Sigma_jk = rho^{|j-k|}.
std::vector<std::vector<double>> toeplitz_chol(int d, double rho) {
    std::vector<std::vector<double>> L(static_cast<std::size_t>(d),
                                       std::vector<double>(static_cast<std::size_t>(d), 0.0));
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j <= i; ++j) {
            double sum = std::pow(rho, std::abs(i - j));
            for (int k = 0; k < j; ++k) sum -= L[i][k] * L[j][k];
            if (i == j) {
                if (sum <= 0.0) throw NumericalError("Toeplitz covariance is not positive definite");
                L[i][i] = std::sqrt(sum);
            } else {
                L[i][j] = sum / L[j][j];
            }
        }
    }
    return L;
}

}  // namespace

std::vector<std::vector<double>> sample_covariates(const SimConfig& cfg, int n, Rng& rng) {
    cfg.check();
    const int d = cfg.d;
    auto L = toeplitz_chol(d, cfg.rho);
    std::vector<std::vector<double>> x(static_cast<std::size_t>(n),
                                       std::vector<double>(static_cast<std::size_t>(d), 0.0));
    std::vector<double> z(static_cast<std::size_t>(d));
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) z[static_cast<std::size_t>(j)] = rng.normal();
        for (int j = 0; j < d; ++j) {
            double v = 0.0;
            for (int k = 0; k <= j; ++k) v += L[j][k] * z[static_cast<std::size_t>(k)];
            x[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                cfg.binary_mask[static_cast<std::size_t>(j)] ? (v > 0.0 ? 1.0 : 0.0) : v;
        }
    }
    return x;
}

OutcomeDraw sample_outcomes(const SimConfig& cfg, const std::vector<double>& linpred, Rng& rng) {
    if (!(cfg.lambda_c > 0.0))
        throw ValidationError("sample_outcomes requires a resolved lambda_c > 0");
    OutcomeDraw out;
    const std::size_t n = linpred.size();
    out.latent_event.resize(n);
    out.latent_censor.resize(n);
    out.time.resize(n);
    out.event.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double u = rng.uniform();
        const double v = rng.uniform();
        const double risk = std::exp(linpred[i]);
        const double tau = std::pow(-std::log(1.0 - u) / risk, 1.0 / cfg.kappa_t);
        double c;
        if (cfg.mode == CensoringMode::Independent) {
            c = cfg.lambda_c * std::pow(-std::log(1.0 - v), 1.0 / cfg.kappa_c);
        } else {
            c = cfg.lambda_c * std::pow(-std::log(1.0 - v) / risk, 1.0 / cfg.kappa_c);
        }
        out.latent_event[i] = tau;
        out.latent_censor[i] = c;
        out.time[i] = std::min(tau, c);
        out.event[i] = tau <= c ? 1 : 0;
    }
    return out;
}

namespace {

struct Pilot {
    std::vector<double> linpred;
    std::vector<double> log_event;   // -log(1-u), event latent before scaling
    std::vector<double> log_censor;  // -log(1-v)
};

double pilot_censoring(const Pilot& p, const SimConfig& cfg, double lambda_c) {
    std::size_t censored = 0;
    const std::size_t n = p.linpred.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double risk = std::exp(p.linpred[i]);
        const double tau = std::pow(p.log_event[i] / risk, 1.0 / cfg.kappa_t);
        const double c = cfg.mode == CensoringMode::Independent
                             ? lambda_c * std::pow(p.log_censor[i], 1.0 / cfg.kappa_c)
                             : lambda_c * std::pow(p.log_censor[i] / risk, 1.0 / cfg.kappa_c);
        if (c < tau) ++censored;
    }
    return static_cast<double>(censored) / static_cast<double>(n);
}

}  // namespace

double calibrate_censoring(const SimConfig& cfg, double target, int pilot_n, std::uint64_t seed) {
    cfg.check();
    if (pilot_n < 100) throw ValidationError("calibrate_censoring: pilot size too small");
    if (!(target > 0.0 && target < 1.0))
        throw NumericalError("calibrate_censoring: target " + std::to_string(target) +
                             " cannot be bracketed by a finite censoring scale");

    // One frozen pilot draw reused for every lambda keeps the censoring
    // fraction exactly monotone in lambda, so bisection is well posed.
    Rng cov_rng(derive_seed(seed, "calib-cov"));
    Rng trt_rng(derive_seed(seed, "calib-treat"));
    Rng out_rng(derive_seed(seed, "calib-u"));
    auto X = sample_covariates(cfg, pilot_n, cov_rng);
    Pilot p;
    p.linpred.resize(static_cast<std::size_t>(pilot_n));
    p.log_event.resize(static_cast<std::size_t>(pilot_n));
    p.log_censor.resize(static_cast<std::size_t>(pilot_n));
    for (int i = 0; i < pilot_n; ++i) {
        double lp = 0.0;
        for (int j = 0; j < cfg.d; ++j)
            lp += cfg.alpha[static_cast<std::size_t>(j)] *
                  X[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        lp += cfg.beta * static_cast<double>(trt_rng.bernoulli(0.5));
        p.linpred[static_cast<std::size_t>(i)] = lp;
        p.log_event[static_cast<std::size_t>(i)] = -std::log(1.0 - out_rng.uniform());
        p.log_censor[static_cast<std::size_t>(i)] = -std::log(1.0 - out_rng.uniform());
    }

    double lo = 1e-6, hi = 1e6;
    const double f_lo = pilot_censoring(p, cfg, lo);  // lambda small -> heavy censoring
    const double f_hi = pilot_censoring(p, cfg, hi);
    if (!(f_lo > target && target > f_hi))
        throw NumericalError("calibrate_censoring: target " + std::to_string(target) +
                             " not bracketed (censoring in [" + std::to_string(f_hi) + ", " +
                             std::to_string(f_lo) + "])");
    double mid = lo;
    for (int it = 0; it < 200; ++it) {
        mid = 0.5 * (lo + hi);
        const double f = pilot_censoring(p, cfg, mid);
        if (std::fabs(f - target) <= 0.01) return mid;
        if (f > target)
            lo = mid;  // too much censoring: increase lambda
        else
            hi = mid;
    }
    throw NumericalError("calibrate_censoring: bisection did not reach the target within 1%");
}

double resolve_lambda_c(const SimConfig& cfg, std::uint64_t seed) {
    if (cfg.lambda_c > 0.0) return cfg.lambda_c;
    return calibrate_censoring(cfg, cfg.target_censoring, 50000, derive_seed(seed, "calibrate"));
}

Schema sim_schema(const SimConfig& cfg) {
    Schema s;
    for (int j = 0; j < cfg.d; ++j) {
        ColumnSpec c;
        c.name = "x" + std::to_string(j + 1);
        if (cfg.binary_mask[static_cast<std::size_t>(j)]) {
            c.kind = FeatureKind::Categorical;
            c.levels = {"0", "1"};
        } else {
            c.kind = FeatureKind::Real;
        }
        s.covariates.push_back(std::move(c));
    }
    return s;
}

TrialDataset simulate_trial(const SimConfig& cfg, std::uint64_t seed) {
    cfg.check();
    SimConfig resolved = cfg;
    resolved.lambda_c = resolve_lambda_c(cfg, seed);

    Rng cov_rng(derive_seed(seed, "covariates"));
    Rng trt_rng(derive_seed(seed, "treatment"));
    Rng out_rng(derive_seed(seed, "outcomes"));

    auto X = sample_covariates(resolved, resolved.n, cov_rng);
    std::vector<int> treat(static_cast<std::size_t>(resolved.n));
    std::vector<double> linpred(static_cast<std::size_t>(resolved.n));
    for (int i = 0; i < resolved.n; ++i) {
        treat[static_cast<std::size_t>(i)] = trt_rng.bernoulli(0.5);
        double lp = 0.0;
        for (int j = 0; j < resolved.d; ++j)
            lp += resolved.alpha[static_cast<std::size_t>(j)] *
                  X[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        lp += resolved.beta * static_cast<double>(treat[static_cast<std::size_t>(i)]);
        linpred[static_cast<std::size_t>(i)] = lp;
    }
    auto outcomes = sample_outcomes(resolved, linpred, out_rng);

    TrialDataset ds;
    ds.schema = sim_schema(resolved);
    ds.cols.assign(static_cast<std::size_t>(resolved.d), {});
    for (int i = 0; i < resolved.n; ++i)
        for (int j = 0; j < resolved.d; ++j)
            ds.cols[static_cast<std::size_t>(j)].push_back(
                X[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
    ds.treatment = std::move(treat);
    ds.time = std::move(outcomes.time);
    ds.event = std::move(outcomes.event);
    validate(ds);
    return ds;
}

SimConfig sim_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("sim config is not valid JSON: ") + e.what());
    }
    SimConfig cfg = SimConfig::defaults();
    if (j.contains("n")) cfg.n = j["n"].get<int>();
    if (j.contains("d")) {
        cfg.d = j["d"].get<int>();
        if (cfg.d < 1) throw ValidationError("sim config: d must be >= 1");
        cfg.binary_mask.assign(static_cast<std::size_t>(cfg.d), false);
        cfg.alpha.assign(static_cast<std::size_t>(cfg.d), 0.0);
    }
    if (j.contains("rho")) cfg.rho = j["rho"].get<double>();
    if (j.contains("n_binary")) {
        int nb = j["n_binary"].get<int>();
        if (nb < 0 || nb > cfg.d) throw ValidationError("sim config: n_binary out of range");
        cfg.binary_mask.assign(static_cast<std::size_t>(cfg.d), false);
        for (int k = 0; k < nb; ++k) cfg.binary_mask[static_cast<std::size_t>(k)] = true;
    }
    if (j.contains("binary_mask")) {
        auto m = j["binary_mask"].get<std::vector<bool>>();
        if (m.size() != static_cast<std::size_t>(cfg.d))
            throw ValidationError("sim config: binary_mask length must equal d");
        cfg.binary_mask = m;
    }
    if (j.contains("alpha")) {
        auto a = j["alpha"].get<std::vector<double>>();
        std::size_t n_real = 0;
        for (bool b : cfg.binary_mask)
            if (!b) ++n_real;
        if (a.size() == static_cast<std::size_t>(cfg.d)) {
            cfg.alpha = a;
        } else if (a.size() == n_real) {
            // convenience: coefficients for the real block only, zeros elsewhere
            cfg.alpha.assign(static_cast<std::size_t>(cfg.d), 0.0);
            std::size_t k = 0;
            for (std::size_t jx = 0; jx < cfg.binary_mask.size(); ++jx)
                if (!cfg.binary_mask[jx]) cfg.alpha[jx] = a[k++];
        } else {
            throw ValidationError("sim config: alpha must have length d or one per real column");
        }
    }
    if (j.contains("beta")) cfg.beta = j["beta"].get<double>();
    if (j.contains("kappa_t")) cfg.kappa_t = j["kappa_t"].get<double>();
    if (j.contains("kappa_c")) cfg.kappa_c = j["kappa_c"].get<double>();
    if (j.contains("lambda_c")) {
        if (j["lambda_c"].is_string()) {
            if (j["lambda_c"].get<std::string>() != "auto")
                throw ValidationError("sim config: lambda_c must be a number or \"auto\"");
            cfg.lambda_c = 0.0;
        } else {
            cfg.lambda_c = j["lambda_c"].get<double>();
        }
    }
    if (j.contains("censoring")) {
        std::string m = j["censoring"].get<std::string>();
        if (m == "independent")
            cfg.mode = CensoringMode::Independent;
        else if (m == "dependent")
            cfg.mode = CensoringMode::Dependent;
        else
            throw ValidationError("sim config: censoring must be 'independent' or 'dependent'");
    }
    if (j.contains("target_censoring")) cfg.target_censoring = j["target_censoring"].get<double>();
    cfg.check();
    return cfg;
}

std::string sim_config_to_json(const SimConfig& cfg) {
    json j;
    j["n"] = cfg.n;
    j["d"] = cfg.d;
    j["rho"] = cfg.rho;
    j["binary_mask"] = cfg.binary_mask;
    j["alpha"] = cfg.alpha;
    j["beta"] = cfg.beta;
    j["kappa_t"] = cfg.kappa_t;
    j["kappa_c"] = cfg.kappa_c;
    j["lambda_c"] = cfg.lambda_c;
    j["censoring"] = cfg.mode == CensoringMode::Independent ? "independent" : "dependent";
    j["target_censoring"] = cfg.target_censoring;
    return j.dump(2);
}

}  // namespace synthtrial
