#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "doctest.h"
#include "synthtrial/common.hpp"
#include "synthtrial/dataset.hpp"
#include "synthtrial/hivae.hpp"
#include "synthtrial/metrics.hpp"
#include "synthtrial/simulate.hpp"

using namespace synthtrial;
using nn::Mat;

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

double softplus_ref(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); }

// small mixed-kind dataset exercising every head
TrialDataset mixed_dataset(std::size_t n, std::uint64_t seed) {
    TrialDataset ds;
    ds.schema.covariates = {{"xr", FeatureKind::Real, {}},
                            {"xp", FeatureKind::Positive, {}},
                            {"xc", FeatureKind::Count, {}},
                            {"xk", FeatureKind::Categorical, {"a", "b", "c"}}};
    ds.cols.assign(4, {});
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        ds.cols[0].push_back(2.0 * rng.normal() + 1.0);
        ds.cols[1].push_back(std::exp(0.5 * rng.normal()));
        ds.cols[2].push_back(static_cast<double>(rng.below(7)));
        ds.cols[3].push_back(static_cast<double>(rng.below(3)));
        ds.treatment.push_back(0);
        ds.time.push_back(0.2 + 2.0 * rng.uniform());
        ds.event.push_back(rng.bernoulli(0.8));
    }
    validate(ds);
    return ds;
}

// ---- test-local replica of the generative math for the evidence oracle ----

std::vector<double> affine_ref(const Mat& w, const Mat& b, const std::vector<double>& x) {
    std::vector<double> out(w.cols, 0.0);
    for (std::size_t c = 0; c < w.cols; ++c) {
        double acc = b.at(0, c);
        for (std::size_t r = 0; r < w.rows; ++r) acc += x[r] * w.at(r, c);
        out[c] = acc;
    }
    return out;
}

std::vector<double> dense_ref(const HiVaeModel& m, const std::string& prefix,
                              const std::vector<double>& x, bool tanh_act) {
    auto out = affine_ref(m.params.get(prefix + "_W"), m.params.get(prefix + "_b"), x);
    if (tanh_act)
        for (double& v : out) v = std::tanh(v);
    return out;
}

double logsumexp(const std::vector<double>& v) {
    const double mx = *std::max_element(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) s += std::exp(x - mx);
    return mx + std::log(s);
}

// log p(features, t, delta | z) for a one-component, one-dimensional model,
// on the decoder's native scales
double loglik_given_z(const HiVaeModel& m, const TrialDataset& d, std::size_t row, double z) {
    const auto feats = m.model_features();
    auto y = dense_ref(m, "dec_g", {z}, true);
    std::vector<double> head_in = y;
    head_in.push_back(1.0);  // one-hot s with L = 1

    double ll = 0.0;
    for (std::size_t j = 0; j < feats.size(); ++j) {
        const double raw = d.cols[j][row];
        const auto out = dense_ref(m, "head" + std::to_string(j), head_in, false);
        switch (feats[j].kind) {
            case FeatureKind::Real: {
                const double x = (raw - m.norms[j].mean) / m.norms[j].sd;
                ll += -0.5 * out[1] - 0.5 * (x - out[0]) * (x - out[0]) * std::exp(-out[1]) -
                      0.5 * std::log(kTwoPi);
                break;
            }
            case FeatureKind::Positive: {
                const double x = (std::log(raw) - m.norms[j].mean) / m.norms[j].sd;
                ll += -0.5 * out[1] - 0.5 * (x - out[0]) * (x - out[0]) * std::exp(-out[1]) -
                      0.5 * std::log(kTwoPi);
                break;
            }
            case FeatureKind::Count: {
                const double lam = softplus_ref(out[0]) + 1e-8;
                ll += raw * std::log(lam) - lam - std::lgamma(raw + 1.0);
                break;
            }
            case FeatureKind::Categorical: {
                const auto code = static_cast<std::size_t>(raw);
                ll += out[code] - logsumexp(out);
                break;
            }
        }
    }

    const double t = d.time[row];
    const double delta = static_cast<double>(d.event[row]);
    const auto out_t = dense_ref(m, "surv_t", head_in, false);
    const auto out_c = dense_ref(m, "surv_c", head_in, false);
    if (m.cfg.survival_head == SurvivalHeadKind::Weibull) {
        const double u = t / m.time_norm.scale;
        auto parts = [&](const std::vector<double>& out) {
            const double sc = softplus_ref(out[0]) + 1e-6;
            const double sh = softplus_ref(out[1]) + 1e-6;
            const double pw = std::pow(u / sc, sh);
            const double lf = std::log(sh) - sh * std::log(sc) + (sh - 1.0) * std::log(u) - pw;
            return std::pair<double, double>(lf, -pw);
        };
        const auto [lf_t, ls_t] = parts(out_t);
        const auto [lf_c, ls_c] = parts(out_c);
        ll += delta == 1.0 ? lf_t + ls_c : ls_t + lf_c;
    } else {
        const auto& b = m.time_norm.bounds;
        auto parts = [&](const std::vector<double>& out) {
            std::vector<double> p(out.size());
            const double lse = logsumexp(out);
            for (std::size_t k = 0; k < out.size(); ++k) p[k] = std::exp(out[k] - lse);
            const double ti = std::min(t, b.back());
            std::size_t k = b.size() - 2;
            for (std::size_t q = 0; q + 1 < b.size(); ++q)
                if (ti >= b[q] && ti < b[q + 1]) {
                    k = q;
                    break;
                }
            const double width = b[k + 1] - b[k];
            double cdf = p[k] * (ti - b[k]) / width;
            for (std::size_t q = 0; q < k; ++q) cdf += p[q];
            const double dens = std::max(p[k] / width, 1e-12);
            const double surv = std::max(1.0 - cdf, 1e-12);
            return std::pair<double, double>(std::log(dens), std::log(surv));
        };
        const auto [lf_t, ls_t] = parts(out_t);
        const auto [lf_c, ls_c] = parts(out_c);
        ll += delta == 1.0 ? lf_t + ls_c : ls_t + lf_c;
    }
    return ll;
}

struct RowPosterior {
    double mu_q = 0.0, lv_q = 0.0, mu_p = 0.0, kl = 0.0;
};

RowPosterior encode_ref(const HiVaeModel& m, const TrialDataset& d, std::size_t row) {
    const auto feats = m.model_features();
    std::vector<double> x;
    for (std::size_t j = 0; j < feats.size(); ++j) {
        const double raw = d.cols[j][row];
        switch (feats[j].kind) {
            case FeatureKind::Real:
                x.push_back((raw - m.norms[j].mean) / m.norms[j].sd);
                break;
            case FeatureKind::Positive:
                x.push_back((std::log(raw) - m.norms[j].mean) / m.norms[j].sd);
                break;
            case FeatureKind::Count:
                x.push_back(std::log1p(raw));
                break;
            case FeatureKind::Categorical:
                for (std::size_t l = 0; l < feats[j].levels.size(); ++l)
                    x.push_back(l == static_cast<std::size_t>(raw) ? 1.0 : 0.0);
                break;
        }
    }
    x.push_back((std::log(d.time[row]) - m.time_norm.log_mean) / m.time_norm.log_sd);
    x.push_back(static_cast<double>(d.event[row]));

    const auto phi = dense_ref(m, "enc_trunk", x, true);
    RowPosterior rp;
    rp.mu_q = dense_ref(m, "enc_mu", phi, false)[0] + m.params.get("enc_mu_emb").at(0, 0);
    rp.lv_q = dense_ref(m, "enc_lv", phi, false)[0] + m.params.get("enc_lv_emb").at(0, 0);
    rp.mu_p = m.params.get("prior_mu").at(0, 0);
    const double dm = rp.mu_q - rp.mu_p;
    rp.kl = 0.5 * (std::exp(rp.lv_q) + dm * dm - rp.lv_q - 1.0);
    return rp;
}

struct RowEvidence {
    double logp = 0.0;      // log integral of prior times likelihood
    double true_elbo = 0.0; // E_q log p(x|z) - KL(q || p)
};

RowEvidence quadrature_row(const HiVaeModel& m, const TrialDataset& d, std::size_t row) {
    const auto rp = encode_ref(m, d, row);
    const double sd_q = std::exp(0.5 * rp.lv_q);
    const double lo = std::min(rp.mu_p - 12.0, rp.mu_q - 12.0 * std::max(1.0, sd_q));
    const double hi = std::max(rp.mu_p + 12.0, rp.mu_q + 12.0 * std::max(1.0, sd_q));
    const int n_pts = 4001;
    const double dz = (hi - lo) / (n_pts - 1);

    std::vector<double> log_joint(n_pts);
    double eq_recon = 0.0;
    for (int i = 0; i < n_pts; ++i) {
        const double z = lo + i * dz;
        const double ll = loglik_given_z(m, d, row, z);
        const double zp = z - rp.mu_p;
        log_joint[i] = -0.5 * zp * zp - 0.5 * std::log(kTwoPi) + ll;
        const double zq = z - rp.mu_q;
        const double qdens = std::exp(-0.5 * zq * zq / std::exp(rp.lv_q)) /
                             std::sqrt(kTwoPi * std::exp(rp.lv_q));
        const double w = (i == 0 || i == n_pts - 1) ? 0.5 : 1.0;
        eq_recon += w * qdens * ll * dz;
    }
    const double mx = *std::max_element(log_joint.begin(), log_joint.end());
    double acc = 0.0;
    for (int i = 0; i < n_pts; ++i) {
        const double w = (i == 0 || i == n_pts - 1) ? 0.5 : 1.0;
        acc += w * std::exp(log_joint[i] - mx) * dz;
    }
    RowEvidence ev;
    ev.logp = mx + std::log(acc);
    ev.true_elbo = eq_recon - rp.kl;
    return ev;
}

void check_elbo_against_evidence(SurvivalHeadKind head) {
    const auto data = mixed_dataset(8, 505);
    HiVaeConfig cfg;
    cfg.s_dim = 1;
    cfg.z_dim = 1;
    cfg.y_dim = 3;
    cfg.survival_head = head;
    cfg.n_intervals = 4;
    auto m = prepare_model(data, cfg, false, 99);

    std::vector<int> rows(data.n_rows());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int>(i);

    double kl_sum = 0.0, logp_sum = 0.0, true_elbo_sum = 0.0;
    for (std::size_t i = 0; i < data.n_rows(); ++i) {
        kl_sum += encode_ref(m, data, i).kl;
        const auto ev = quadrature_row(m, data, i);
        logp_sum += ev.logp;
        true_elbo_sum += ev.true_elbo;
    }

    // jensen: the exact elbo sits below the evidence
    CHECK(true_elbo_sum <= logp_sum + 1e-6);

    // the closed-form kl terms are deterministic and must match the replica
    const auto once = elbo_value(m, data, rows, 1);
    CHECK(std::fabs(once.kl_s) < 1e-12);  // single component: no mixture kl
    CHECK(once.kl_z == doctest::Approx(kl_sum).epsilon(1e-8));

    // the single-draw estimator is unbiased for the exact elbo
    const int n_draws = 400;
    std::vector<double> draws(n_draws);
    double mean = 0.0;
    for (int s = 0; s < n_draws; ++s) {
        draws[s] = elbo_value(m, data, rows, 1000 + static_cast<std::uint64_t>(s)).elbo;
        mean += draws[s];
    }
    mean /= n_draws;
    double var = 0.0;
    for (double v : draws) var += (v - mean) * (v - mean);
    const double se = std::sqrt(var / (n_draws - 1)) / std::sqrt(static_cast<double>(n_draws));
    CAPTURE(mean);
    CAPTURE(true_elbo_sum);
    CAPTURE(se);
    CHECK(std::fabs(mean - true_elbo_sum) < 5.0 * se + 1e-3);
    CHECK(mean <= logp_sum + 4.0 * se);
}

HiVaeModel grad_model(const TrialDataset& data, SurvivalHeadKind head, int layers) {
    HiVaeConfig cfg;
    cfg.s_dim = 3;
    cfg.z_dim = 4;
    cfg.y_dim = 6;
    cfg.survival_head = head;
    cfg.n_intervals = 5;
    cfg.survival_layers = layers;
    return prepare_model(data, cfg, false, 77);
}

Mat random_y(std::size_t b, std::size_t h, std::uint64_t seed) {
    Mat y(b, h);
    Rng rng(seed);
    for (auto& v : y.a) v = std::tanh(rng.normal());
    return y;
}

Mat random_onehot(std::size_t b, std::size_t l, std::uint64_t seed) {
    Mat s(b, l);
    Rng rng(seed);
    for (std::size_t i = 0; i < b; ++i) s.at(i, rng.below(l)) = 1.0;
    return s;
}

std::vector<double> row_signature(const TrialDataset& ds, std::size_t i) {
    std::vector<double> sig;
    for (const auto& col : ds.cols) sig.push_back(col[i]);
    sig.push_back(ds.time[i]);
    sig.push_back(static_cast<double>(ds.event[i]));
    sig.push_back(static_cast<double>(ds.treatment[i]));
    return sig;
}

}  // namespace

TEST_CASE("weibull survival and density obey the closed forms") {
    // S(scale) = exp(-1) for any shape
    for (double sh : {0.5, 1.0, 2.0, 3.7})
        CHECK(weibull_log_survival(2.5, 2.5, sh) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(weibull_log_survival(1e-12, 3.0, 2.0) == doctest::Approx(0.0).epsilon(1e-9));

    // hand value of the log density
    const double want = std::log(3.0 / 2.0) + 2.0 * std::log(1.0 / 2.0) - 0.125;
    CHECK(weibull_log_density(1.0, 2.0, 3.0) == doctest::Approx(want).epsilon(1e-12));

    // the density integrates to one (shapes >= 1 keep the integrand bounded;
    // upper limit carries survival mass below 1e-12)
    for (double sh : {2.0, 3.5}) {
        const double scale = 1.7;
        const int n = 200000;
        const double upper = scale * std::pow(27.7, 1.0 / sh);
        const double dt = upper / n;
        double total = 0.0;
        for (int i = 1; i <= n; ++i)
            total += std::exp(weibull_log_density((i - 0.5) * dt, scale, sh)) * dt;
        CHECK(std::fabs(total - 1.0) < 1e-6);
    }

    // density is the negative derivative of survival, shape below 1 included
    for (double sh : {0.8, 2.0})
        for (double t : {0.4, 1.1, 2.9}) {
            const double h = 1e-6;
            const double fd = (std::exp(weibull_log_survival(t - h, 1.7, sh)) -
                               std::exp(weibull_log_survival(t + h, 1.7, sh))) /
                              (2 * h);
            CHECK(std::exp(weibull_log_density(t, 1.7, sh)) ==
                  doctest::Approx(fd).epsilon(1e-7));
        }
}

TEST_CASE("piecewise bounds start at zero and overshoot the maximum") {
    std::vector<double> times;
    Rng rng(4);
    for (int i = 0; i < 100; ++i) times.push_back(0.1 + 3.0 * rng.uniform());
    const auto b = piecewise_bounds(times, 6);
    REQUIRE(b.size() == 7);
    CHECK(b.front() == 0.0);
    CHECK(b.back() == doctest::Approx(1.05 * *std::max_element(times.begin(), times.end())));
    for (std::size_t k = 1; k < b.size(); ++k) CHECK(b[k] > b[k - 1]);
}

TEST_CASE("piecewise density and survival form a proper distribution") {
    const std::vector<double> bounds{0.0, 1.0, 2.0, 4.0};
    const std::vector<double> masses{0.2, 0.5, 0.3};

    SUBCASE("single uniform interval") {
        const std::vector<double> b1{0.0, 1.0};
        const std::vector<double> m1{1.0};
        CHECK(piecewise_density(0.25, b1, m1) == doctest::Approx(1.0));
        CHECK(piecewise_survival(0.25, b1, m1) == doctest::Approx(0.75));
        CHECK(piecewise_survival(0.0, b1, m1) == doctest::Approx(1.0));
    }
    SUBCASE("density integrates to one") {
        const int n = 100000;
        const double dt = bounds.back() / n;
        double total = 0.0;
        for (int i = 1; i <= n; ++i) total += piecewise_density((i - 0.5) * dt, bounds, masses) * dt;
        CHECK(std::fabs(total - 1.0) < 1e-6);
    }
    SUBCASE("survival is continuous, monotone, and anchored") {
        CHECK(piecewise_survival(0.0, bounds, masses) == doctest::Approx(1.0));
        double prev = 1.0;
        for (double t = 0.0; t <= 4.0; t += 0.01) {
            const double s = piecewise_survival(t, bounds, masses);
            CHECK(s <= prev + 1e-12);
            prev = s;
        }
        // continuity across interior edges
        for (double edge : {1.0, 2.0})
            CHECK(std::fabs(piecewise_survival(edge - 1e-9, bounds, masses) -
                            piecewise_survival(edge + 1e-9, bounds, masses)) < 1e-6);
        CHECK(piecewise_survival(4.0, bounds, masses) < 1e-9);
    }
    SUBCASE("beyond the last edge both quantities floor and stay loggable") {
        CHECK(piecewise_density(9.0, bounds, masses) == doctest::Approx(1e-12));
        CHECK(piecewise_survival(9.0, bounds, masses) == doctest::Approx(1e-12));
        SurvivalParams eta;
        eta.masses = masses;
        const double ll = survival_loglik(SurvivalHeadKind::Piecewise, bounds, 9.0, 1.0, eta, eta);
        CHECK(std::isfinite(ll));
    }
}

TEST_CASE("censored survival loglik picks the right factorization") {
    SurvivalParams eta_t;
    eta_t.scale = 2.0;
    eta_t.shape = 1.5;
    SurvivalParams eta_c;
    eta_c.scale = 3.0;
    eta_c.shape = 0.9;
    const double t = 1.3;
    const double event_ll = survival_loglik(SurvivalHeadKind::Weibull, {}, t, 1.0, eta_t, eta_c);
    CHECK(event_ll == doctest::Approx(weibull_log_density(t, 2.0, 1.5) +
                                      weibull_log_survival(t, 3.0, 0.9))
                          .epsilon(1e-12));
    const double cens_ll = survival_loglik(SurvivalHeadKind::Weibull, {}, t, 0.0, eta_t, eta_c);
    CHECK(cens_ll == doctest::Approx(weibull_log_survival(t, 2.0, 1.5) +
                                     weibull_log_density(t, 3.0, 0.9))
                         .epsilon(1e-12));
}

TEST_CASE("every decoder head passes a finite-difference gradient check") {
    const auto data = mixed_dataset(30, 909);
    auto m = grad_model(data, SurvivalHeadKind::Weibull, 1);
    const std::size_t B = 5;
    const auto y = random_y(B, static_cast<std::size_t>(m.cfg.y_dim), 13);
    const auto s = random_onehot(B, static_cast<std::size_t>(m.cfg.s_dim), 14);

    const auto feats = m.model_features();
    for (std::size_t j = 0; j < feats.size(); ++j) {
        std::vector<double> target(B);
        Rng rng(100 + j);
        for (std::size_t i = 0; i < B; ++i) {
            switch (feats[j].kind) {
                case FeatureKind::Real:
                case FeatureKind::Positive:
                    target[i] = rng.normal();
                    break;
                case FeatureKind::Count:
                    target[i] = static_cast<double>(rng.below(6));
                    break;
                case FeatureKind::Categorical:
                    target[i] = static_cast<double>(rng.below(feats[j].levels.size()));
                    break;
            }
        }
        const auto grads = feature_head_grads(m, static_cast<int>(j), y, s, target);
        const auto report = nn::grad_check(
            m.params,
            [&](nn::ParamStore&) {
                return feature_head_value(m, static_cast<int>(j), y, s, target);
            },
            grads);
        CAPTURE(j);
        CHECK(report.max_rel_err < 1e-4);
    }
}

TEST_CASE("both survival heads pass a finite-difference gradient check") {
    const auto data = mixed_dataset(30, 909);
    const std::size_t B = 6;
    std::vector<double> t{0.4, 1.1, 0.7, 2.2, 0.3, 1.9};
    std::vector<double> delta{1, 0, 1, 1, 0, 1};
    for (const auto kind : {SurvivalHeadKind::Weibull, SurvivalHeadKind::Piecewise}) {
        for (int layers : {1, 2}) {
            auto m = grad_model(data, kind, layers);
            const auto y = random_y(B, static_cast<std::size_t>(m.cfg.y_dim), 21);
            const auto s = random_onehot(B, static_cast<std::size_t>(m.cfg.s_dim), 22);
            const auto grads = survival_head_grads(m, y, s, t, delta);
            const auto report = nn::grad_check(
                m.params,
                [&](nn::ParamStore&) { return survival_head_value(m, y, s, t, delta); },
                grads);
            CAPTURE(static_cast<int>(kind));
            CAPTURE(layers);
            CHECK(report.max_rel_err < 1e-4);
        }
    }
}

TEST_CASE("the full elbo gradient survives a finite-difference audit") {
    const auto data = mixed_dataset(30, 909);
    auto m = grad_model(data, SurvivalHeadKind::Weibull, 1);
    std::vector<int> rows{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    const std::uint64_t noise = 424242;
    const auto grads = elbo_grads(m, data, rows, noise);
    const auto report = nn::grad_check(
        m.params,
        [&](nn::ParamStore&) { return elbo_value(m, data, rows, noise).elbo; },
        grads);
    CAPTURE(report.worst_param);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("single-sample elbo is an unbiased bound on the quadrature evidence") {
    SUBCASE("weibull head") { check_elbo_against_evidence(SurvivalHeadKind::Weibull); }
    SUBCASE("piecewise head") { check_elbo_against_evidence(SurvivalHeadKind::Piecewise); }
}

TEST_CASE("encode and decode produce well-formed distributions") {
    const auto data = mixed_dataset(40, 321);
    auto m = grad_model(data, SurvivalHeadKind::Weibull, 1);

    const auto er = encode_row(m, data, 3);
    double total = 0.0;
    for (double p : er.pi) {
        CHECK(p >= 0.0);
        total += p;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    for (double v : er.var.a) CHECK(v > 0.0);

    const auto er2 = encode_row(m, data, 3);
    CHECK(er.pi == er2.pi);
    CHECK(er.mu.a == er2.mu.a);

    std::vector<double> y(static_cast<std::size_t>(m.cfg.y_dim), 0.3);
    for (int j = 0; j < 4; ++j) {
        const auto fp = decode_feature(m, y, 1, j);
        switch (fp.kind) {
            case FeatureKind::Real:
            case FeatureKind::Positive:
                CHECK(fp.var > 0.0);
                break;
            case FeatureKind::Count:
                CHECK(fp.lambda > 0.0);
                break;
            case FeatureKind::Categorical: {
                double ps = 0.0;
                for (double p : fp.probs) {
                    CHECK(p > 0.0);
                    ps += p;
                }
                CHECK(ps == doctest::Approx(1.0).epsilon(1e-12));
                break;
            }
        }
    }

    SurvivalParams eta_t, eta_c;
    decode_survival(m, y, 0, eta_t, eta_c);
    CHECK(eta_t.scale > 0.0);
    CHECK(eta_t.shape > 0.0);
    CHECK(eta_c.scale > 0.0);

    auto pw = grad_model(data, SurvivalHeadKind::Piecewise, 1);
    SurvivalParams pt, pc;
    decode_survival(pw, y, 0, pt, pc);
    double ms = 0.0;
    for (double v : pt.masses) {
        CHECK(v > 0.0);
        ms += v;
    }
    CHECK(ms == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("training raises the elbo and is reproducible") {
    const auto data = mixed_dataset(120, 2023);
    HiVaeConfig cfg;
    cfg.s_dim = 3;
    cfg.z_dim = 3;
    cfg.y_dim = 8;
    cfg.batch_size = 40;
    cfg.max_epochs = 25;
    cfg.patience = 25;
    cfg.learning_rate = 5e-3;

    auto m1 = prepare_model(data, cfg, false, 7);
    const auto tr1 = train_model(m1, data, 11);
    REQUIRE_FALSE(tr1.diverged);
    REQUIRE_FALSE(tr1.epoch_elbo.empty());
    CHECK(tr1.best_epoch >= 0);
    CHECK(tr1.best_epoch < static_cast<int>(tr1.epoch_elbo.size()));
    const double best = *std::max_element(tr1.epoch_elbo.begin(), tr1.epoch_elbo.end());
    CHECK(best > tr1.epoch_elbo.front());
    CHECK(tr1.epoch_elbo[static_cast<std::size_t>(tr1.best_epoch)] ==
          doctest::Approx(best).epsilon(1e-12));

    auto m2 = prepare_model(data, cfg, false, 7);
    const auto tr2 = train_model(m2, data, 11);
    CHECK(tr1.epoch_elbo == tr2.epoch_elbo);
    for (const auto& [name, mat] : m1.params.values) CHECK(mat.a == m2.params.get(name).a);
}

TEST_CASE("posterior sampling yields valid data of the requested size") {
    const auto data = mixed_dataset(60, 31415);
    HiVaeConfig cfg;
    cfg.s_dim = 2;
    cfg.z_dim = 2;
    cfg.y_dim = 6;
    cfg.batch_size = 30;
    cfg.max_epochs = 10;
    cfg.patience = 10;
    auto m = prepare_model(data, cfg, false, 3);
    train_model(m, data, 4);

    const auto gen = sample_posterior(m, data, 157, 5);
    CHECK(gen.n_rows() == 157);
    validate(gen);
    for (double v : gen.cols[3]) CHECK((v == 0.0 || v == 1.0 || v == 2.0));
    for (double v : gen.cols[1]) CHECK(v > 0.0);
    for (int tr : gen.treatment) CHECK(tr == 0);

    const auto again = sample_posterior(m, data, 157, 5);
    for (std::size_t j = 0; j < gen.cols.size(); ++j) CHECK(gen.cols[j] == again.cols[j]);
    CHECK(gen.time == again.time);
    CHECK(gen.event == again.event);

    const auto prior = sample_prior(m, 80, 6);
    CHECK(prior.n_rows() == 80);
    validate(prior);
    CHECK(std::isfinite(js_distance(data, prior)));
}

TEST_CASE("identity debug sampling returns source rows verbatim") {
    const auto data = mixed_dataset(25, 2718);
    HiVaeConfig cfg;
    cfg.s_dim = 2;
    cfg.z_dim = 2;
    cfg.y_dim = 4;
    auto m = prepare_model(data, cfg, false, 8);

    const auto out = sample_posterior(m, data, 25, 99, true);
    REQUIRE(out.n_rows() == 25);
    std::vector<std::vector<double>> got, want;
    for (std::size_t i = 0; i < 25; ++i) {
        got.push_back(row_signature(out, i));
        want.push_back(row_signature(data, i));
    }
    std::sort(got.begin(), got.end());
    std::sort(want.begin(), want.end());
    CHECK(got == want);
}

TEST_CASE("a trained model preserves the censoring level of its arm") {
    auto sim = SimConfig::defaults();
    sim.lambda_c = resolve_lambda_c(sim, 1);
    const auto trial = simulate_trial(sim, 17);
    const auto control = split_arms(trial).first;

    HiVaeConfig cfg;  // default widths; enough epochs for the heads to settle
    cfg.max_epochs = 600;
    cfg.patience = 40;
    auto m = prepare_model(control, cfg, false, 23);
    const auto tr = train_model(m, control, 29);
    REQUIRE_FALSE(tr.diverged);

    const auto gen = sample_posterior(m, control, 1000, 37);
    auto censored = [](const TrialDataset& ds) {
        double c = 0.0;
        for (int e : ds.event) c += e == 0 ? 1.0 : 0.0;
        return c / static_cast<double>(ds.n_rows());
    };
    CHECK(std::fabs(censored(gen) - censored(control)) < 0.12);
}

TEST_CASE("model save and load round trips generation exactly") {
    const auto data = mixed_dataset(50, 161803);
    HiVaeConfig cfg;
    cfg.s_dim = 2;
    cfg.z_dim = 3;
    cfg.y_dim = 5;
    cfg.survival_head = SurvivalHeadKind::Piecewise;
    cfg.n_intervals = 5;
    cfg.max_epochs = 6;
    cfg.patience = 6;
    cfg.batch_size = 25;
    auto m = prepare_model(data, cfg, false, 12);
    train_model(m, data, 13);

    const std::string path = "/tmp/synthtrial_test_model_" + std::to_string(getpid()) + ".bin";
    save_model(m, path);
    const auto loaded = load_model(path);
    CHECK(loaded.cfg.survival_head == SurvivalHeadKind::Piecewise);
    CHECK(loaded.time_norm.bounds == m.time_norm.bounds);
    CHECK(loaded.includes_treatment == m.includes_treatment);

    const auto a = sample_posterior(m, data, 64, 21);
    const auto b = sample_posterior(loaded, data, 64, 21);
    for (std::size_t j = 0; j < a.cols.size(); ++j) CHECK(a.cols[j] == b.cols[j]);
    CHECK(a.time == b.time);
    CHECK(a.event == b.event);
    std::remove(path.c_str());
    std::remove((path + ".meta.json").c_str());
}

TEST_CASE("model config json round trips and rejects bad fields") {
    HiVaeConfig cfg;
    cfg.s_dim = 7;
    cfg.z_dim = 9;
    cfg.y_dim = 33;
    cfg.survival_head = SurvivalHeadKind::Piecewise;
    cfg.n_intervals = 15;
    cfg.survival_layers = 2;
    cfg.learning_rate = 2e-2;
    cfg.batch_size = 73;
    cfg.max_epochs = 321;
    cfg.patience = 17;
    cfg.tau = 0.8;
    cfg.anneal_tau = true;
    const auto back = hivae_config_from_json(hivae_config_to_json(cfg));
    CHECK(back.s_dim == 7);
    CHECK(back.z_dim == 9);
    CHECK(back.y_dim == 33);
    CHECK(back.survival_head == SurvivalHeadKind::Piecewise);
    CHECK(back.n_intervals == 15);
    CHECK(back.survival_layers == 2);
    CHECK(back.learning_rate == 2e-2);
    CHECK(back.batch_size == 73);
    CHECK(back.max_epochs == 321);
    CHECK(back.patience == 17);
    CHECK(back.tau == 0.8);
    CHECK(back.anneal_tau);

    CHECK_THROWS_AS(hivae_config_from_json("{\"s_dim\": 0}"), ValidationError);
    CHECK_THROWS_AS(hivae_config_from_json("{\"survival_layers\": 3}"), ValidationError);
    CHECK_THROWS_AS(hivae_config_from_json("{\"tau\": 0.0}"), ValidationError);
    CHECK_THROWS_AS(hivae_config_from_json("not json"), ValidationError);
    CHECK_THROWS_AS(hivae_config_from_json("{\"survival_head\": \"exotic\"}"), ValidationError);
}

TEST_CASE("piecewise head trains end to end") {
    const auto data = mixed_dataset(80, 55);
    HiVaeConfig cfg;
    cfg.s_dim = 2;
    cfg.z_dim = 3;
    cfg.y_dim = 6;
    cfg.survival_head = SurvivalHeadKind::Piecewise;
    cfg.n_intervals = 5;
    cfg.batch_size = 40;
    cfg.max_epochs = 15;
    cfg.patience = 15;
    auto m = prepare_model(data, cfg, false, 61);
    const auto tr = train_model(m, data, 62);
    REQUIRE_FALSE(tr.diverged);
    const auto gen = sample_posterior(m, data, 40, 63);
    validate(gen);
    for (double t : gen.time) CHECK(t <= m.time_norm.bounds.back());
}
