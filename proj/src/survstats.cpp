#include "synthtrial/survstats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace synthtrial {

namespace {

void check_surv_input(const std::vector<double>& times, const std::vector<int>& events) {
    if (times.empty()) throw ValidationError("survival input is empty");
    if (times.size() != events.size())
        throw ValidationError("times and events have different lengths");
    for (std::size_t i = 0; i < times.size(); ++i) {
        if (!std::isfinite(times[i]))
            throw ValidationError("non-finite survival time at row " + std::to_string(i + 1));
        if (events[i] != 0 && events[i] != 1)
            throw ValidationError("event indicator must be 0 or 1 at row " + std::to_string(i + 1));
    }
}

}  // namespace

std::vector<KmPoint> kaplan_meier(const std::vector<double>& times,
                                  const std::vector<int>& events) {
    check_surv_input(times, events);
    const std::size_t n = times.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });

    std::vector<KmPoint> curve;
    double at_risk = static_cast<double>(n);
    double surv = 1.0;
    std::size_t i = 0;
    while (i < n) {
        const double t = times[idx[i]];
        double d = 0.0, removed = 0.0;
        while (i < n && times[idx[i]] == t) {
            if (events[idx[i]] == 1) d += 1.0;
            removed += 1.0;
            ++i;
        }
        if (d > 0.0) {
            surv *= 1.0 - d / at_risk;
            curve.push_back({t, surv, at_risk, d});
        }
        at_risk -= removed;
    }
    return curve;
}

double km_eval(const std::vector<KmPoint>& curve, double t) {
    double s = 1.0;
    for (const auto& pt : curve) {
        if (pt.time > t) break;
        s = pt.surv;
    }
    return s;
}

double km_eval_left(const std::vector<KmPoint>& curve, double t) {
    double s = 1.0;
    for (const auto& pt : curve) {
        if (pt.time >= t) break;
        s = pt.surv;
    }
    return s;
}

LogRankResult logrank_test(const std::vector<double>& times1, const std::vector<int>& events1,
                           const std::vector<double>& times2, const std::vector<int>& events2) {
    check_surv_input(times1, events1);
    check_surv_input(times2, events2);

    struct Row {
        double t;
        int event;
        int group;
    };
    std::vector<Row> rows;
    rows.reserve(times1.size() + times2.size());
    for (std::size_t i = 0; i < times1.size(); ++i) rows.push_back({times1[i], events1[i], 0});
    for (std::size_t i = 0; i < times2.size(); ++i) rows.push_back({times2[i], events2[i], 1});
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.t < b.t; });

    long double n1 = static_cast<long double>(times1.size());
    long double n2 = static_cast<long double>(times2.size());
    long double o1 = 0.0L, o2 = 0.0L, e1 = 0.0L, e2 = 0.0L, var = 0.0L;

    std::size_t i = 0;
    while (i < rows.size()) {
        const double t = rows[i].t;
        long double d1 = 0.0L, d2 = 0.0L, r1 = 0.0L, r2 = 0.0L;
        while (i < rows.size() && rows[i].t == t) {
            if (rows[i].group == 0) {
                r1 += 1.0L;
                if (rows[i].event == 1) d1 += 1.0L;
            } else {
                r2 += 1.0L;
                if (rows[i].event == 1) d2 += 1.0L;
            }
            ++i;
        }
        const long double d = d1 + d2;
        const long double n = n1 + n2;
        if (d > 0.0L && n > 0.0L) {
            o1 += d1;
            o2 += d2;
            e1 += d * n1 / n;
            e2 += d * n2 / n;
            if (n > 1.0L) var += d * (n1 / n) * (n2 / n) * (n - d) / (n - 1.0L);
        }
        n1 -= r1;
        n2 -= r2;
    }

    LogRankResult res;
    res.observed[0] = static_cast<double>(o1);
    res.observed[1] = static_cast<double>(o2);
    res.expected[0] = static_cast<double>(e1);
    res.expected[1] = static_cast<double>(e2);
    if (var > 0.0L) {
        const long double diff = o1 - e1;
        res.stat = static_cast<double>(diff * diff / var);
        res.p = chi2_sf_1df(res.stat);
    } else {
        res.stat = 0.0;
        res.p = 1.0;
    }
    return res;
}

std::vector<bool> benjamini_hochberg(const std::vector<double>& pvals, double q) {
    if (!(q > 0.0 && q < 1.0)) throw ValidationError("FDR level must be in (0, 1)");
    const std::size_t m = pvals.size();
    for (double p : pvals)
        if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("p-values must lie in [0, 1]");
    std::vector<bool> reject(m, false);
    if (m == 0) return reject;
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return pvals[a] < pvals[b]; });
    double threshold = -1.0;
    for (std::size_t k = m; k >= 1; --k) {
        if (pvals[idx[k - 1]] <= static_cast<double>(k) * q / static_cast<double>(m)) {
            threshold = pvals[idx[k - 1]];
            break;
        }
    }
    if (threshold >= 0.0)
        for (std::size_t i = 0; i < m; ++i) reject[i] = pvals[i] <= threshold;
    return reject;
}

double schoenfeld_power(double beta_tilde, double alpha, double events_treated,
                        double events_control) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must be in (0, 1)");
    if (!(events_treated > 0.0) || !(events_control > 0.0))
        throw ValidationError("expected event counts must be > 0");
    if (!std::isfinite(beta_tilde)) throw ValidationError("beta_tilde must be finite");
    const double sigma = std::sqrt(1.0 / events_treated + 1.0 / events_control);
    const double z = norm_ppf(1.0 - alpha / 2.0);
    const double shift = std::fabs(beta_tilde) / sigma;
    return 1.0 - (norm_cdf(z - shift) - norm_cdf(-z - shift));
}

namespace {

// Cholesky solve of A x = b for symmetric positive definite A (small p).
std::vector<double> spd_solve(std::vector<std::vector<double>> A, std::vector<double> b) {
    const std::size_t p = b.size();
    for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double sum = A[i][j];
            for (std::size_t k = 0; k < j; ++k) sum -= A[i][k] * A[j][k];
            if (i == j) {
                if (!(sum > 1e-300)) throw NumericalError("singular information matrix");
                A[i][i] = std::sqrt(sum);
            } else {
                A[i][j] = sum / A[j][j];
            }
        }
    }
    for (std::size_t i = 0; i < p; ++i) {
        double sum = b[i];
        for (std::size_t k = 0; k < i; ++k) sum -= A[i][k] * b[k];
        b[i] = sum / A[i][i];
    }
    for (std::size_t i = p; i >= 1; --i) {
        double sum = b[i - 1];
        for (std::size_t k = i; k < p; ++k) sum -= A[k][i - 1] * b[k];
        b[i - 1] = sum / A[i - 1][i - 1];
    }
    return b;
}

struct PartialLik {
    double loglik = 0.0;
    std::vector<double> grad;
    std::vector<std::vector<double>> info;  // negative Hessian
};

PartialLik cox_eval(const std::vector<std::vector<double>>& X, const std::vector<double>& times,
                    const std::vector<int>& events, const std::vector<std::size_t>& desc,
                    const std::vector<double>& beta) {
    const std::size_t n = times.size();
    const std::size_t p = beta.size();
    PartialLik out;
    out.grad.assign(p, 0.0);
    out.info.assign(p, std::vector<double>(p, 0.0));

    double s0 = 0.0;
    std::vector<double> s1(p, 0.0);
    std::vector<std::vector<double>> s2(p, std::vector<double>(p, 0.0));

    std::size_t i = 0;
    while (i < n) {
        const double t = times[desc[i]];
        // everyone with this time enters the risk set before events here count
        std::size_t start = i;
        while (i < n && times[desc[i]] == t) {
            const std::size_t s = desc[i];
            double xb = 0.0;
            for (std::size_t k = 0; k < p; ++k) xb += X[s][k] * beta[k];
            xb = std::min(std::max(xb, -700.0), 700.0);
            const double w = std::exp(xb);
            s0 += w;
            for (std::size_t k = 0; k < p; ++k) {
                s1[k] += w * X[s][k];
                for (std::size_t l = 0; l <= k; ++l) s2[k][l] += w * X[s][k] * X[s][l];
            }
            ++i;
        }
        double d = 0.0;
        for (std::size_t j = start; j < i; ++j) {
            const std::size_t s = desc[j];
            if (events[s] != 1) continue;
            d += 1.0;
            double xb = 0.0;
            for (std::size_t k = 0; k < p; ++k) xb += X[s][k] * beta[k];
            out.loglik += xb;
            for (std::size_t k = 0; k < p; ++k) out.grad[k] += X[s][k];
        }
        if (d > 0.0) {
            out.loglik -= d * std::log(s0);
            for (std::size_t k = 0; k < p; ++k) {
                const double m1k = s1[k] / s0;
                out.grad[k] -= d * m1k;
                for (std::size_t l = 0; l <= k; ++l)
                    out.info[k][l] += d * (s2[k][l] / s0 - m1k * (s1[l] / s0));
            }
        }
    }
    for (std::size_t k = 0; k < p; ++k)
        for (std::size_t l = k + 1; l < p; ++l) out.info[k][l] = out.info[l][k];
    return out;
}

}  // namespace

CoxResult cox_fit(const std::vector<std::vector<double>>& X, const std::vector<double>& times,
                  const std::vector<int>& events) {
    check_surv_input(times, events);
    const std::size_t n = times.size();
    const std::size_t p = X.empty() ? 0 : X[0].size();
    if (!X.empty() && X.size() != n)
        throw ValidationError("cox_fit: covariate row count does not match times");
    for (const auto& row : X)
        if (row.size() != p) throw ValidationError("cox_fit: ragged covariate matrix");
    int n_events = 0;
    for (int e : events) n_events += e;
    if (n_events == 0) throw ValidationError("cox_fit: no events observed");

    // descending time order; ties grouped in one risk-set update
    std::vector<std::size_t> desc(n);
    std::iota(desc.begin(), desc.end(), 0);
    std::sort(desc.begin(), desc.end(),
              [&](std::size_t a, std::size_t b) { return times[a] > times[b]; });

    CoxResult res;
    res.beta.assign(p, 0.0);

    if (p > 0) {
        PartialLik cur = cox_eval(X, times, events, desc, res.beta);
        bool converged = false;
        for (int it = 1; it <= 100; ++it) {
            res.iterations = it;
            double gmax = 0.0;
            for (double g : cur.grad) gmax = std::max(gmax, std::fabs(g));
            if (gmax < 1e-8) {
                converged = true;
                break;
            }
            std::vector<double> step = spd_solve(cur.info, cur.grad);
            double scale = 1.0;
            PartialLik next;
            bool improved = false;
            // tolerance scaled by |loglik| so rounding noise near the optimum
            // cannot defeat the acceptance test
            const double tol = 1e-12 * (1.0 + std::fabs(cur.loglik));
            for (int h = 0; h < 30; ++h) {
                std::vector<double> cand = res.beta;
                for (std::size_t k = 0; k < p; ++k) cand[k] += scale * step[k];
                next = cox_eval(X, times, events, desc, cand);
                if (std::isfinite(next.loglik) && next.loglik >= cur.loglik - tol) {
                    res.beta = cand;
                    improved = true;
                    break;
                }
                scale *= 0.5;
            }
            if (!improved) throw NumericalError("cox_fit: step halving failed to improve");
            for (double b : res.beta)
                if (std::fabs(b) > 500.0)
                    throw NumericalError("cox_fit: coefficients diverged (monotone likelihood)");
            cur = next;
        }
        if (!converged) {
            double gmax = 0.0;
            for (double g : cur.grad) gmax = std::max(gmax, std::fabs(g));
            if (gmax >= 1e-8) throw NumericalError("cox_fit: Newton did not converge");
        }
        res.loglik = cur.loglik;
        // standard errors from the inverse information
        res.se.assign(p, 0.0);
        for (std::size_t k = 0; k < p; ++k) {
            std::vector<double> ek(p, 0.0);
            ek[k] = 1.0;
            std::vector<double> col = spd_solve(cur.info, ek);
            if (col[k] < 0.0) throw NumericalError("cox_fit: negative variance estimate");
            res.se[k] = std::sqrt(col[k]);
        }
    } else {
        PartialLik cur = cox_eval(X, times, events, desc, res.beta);
        res.loglik = cur.loglik;
        res.iterations = 0;
    }

    // Breslow cumulative baseline hazard at distinct event times
    std::vector<std::size_t> asc(desc.rbegin(), desc.rend());
    double s0 = 0.0;
    {
        // risk-set sums with the fitted beta, swept from the largest time down
        std::vector<std::pair<double, double>> steps;  // (time, d/S0)
        std::size_t i = 0;
        while (i < n) {
            const double t = times[desc[i]];
            double d = 0.0;
            while (i < n && times[desc[i]] == t) {
                const std::size_t s = desc[i];
                double xb = 0.0;
                for (std::size_t k = 0; k < p; ++k) xb += X[s][k] * res.beta[k];
                s0 += std::exp(std::min(std::max(xb, -700.0), 700.0));
                if (events[s] == 1) d += 1.0;
                ++i;
            }
            if (d > 0.0) steps.push_back({t, d / s0});
        }
        std::sort(steps.begin(), steps.end());
        double cum = 0.0;
        for (auto& [t, h] : steps) {
            cum += h;
            res.baseline.push_back({t, cum});
        }
    }
    (void)asc;
    return res;
}

double cox_cumhaz(const CoxResult& fit, double t) {
    double h = 0.0;
    for (const auto& [time, cum] : fit.baseline) {
        if (time > t) break;
        h = cum;
    }
    return h;
}

double c_index(const std::vector<double>& risk, const std::vector<double>& times,
               const std::vector<int>& events) {
    check_surv_input(times, events);
    if (risk.size() != times.size()) throw ValidationError("c_index: risk length mismatch");
    const std::size_t n = times.size();
    double conc = 0.0;
    long long comparable = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            std::size_t a, b;  // a = earlier subject whose event makes the pair comparable
            if (times[i] < times[j]) {
                if (events[i] != 1) continue;
                a = i;
                b = j;
            } else if (times[j] < times[i]) {
                if (events[j] != 1) continue;
                a = j;
                b = i;
            } else {
                // tied times: event vs censored is usable, otherwise skip
                if (events[i] == 1 && events[j] == 0) {
                    a = i;
                    b = j;
                } else if (events[j] == 1 && events[i] == 0) {
                    a = j;
                    b = i;
                } else {
                    continue;
                }
            }
            ++comparable;
            if (risk[a] > risk[b])
                conc += 1.0;
            else if (risk[a] == risk[b])
                conc += 0.5;
        }
    }
    if (comparable == 0) throw ValidationError("c_index: no comparable pairs");
    return conc / static_cast<double>(comparable);
}

double integrated_brier(const std::vector<std::vector<double>>& surv_pred,
                        const std::vector<double>& times, const std::vector<int>& events,
                        const std::vector<double>& grid) {
    check_surv_input(times, events);
    const std::size_t n = times.size();
    const std::size_t g = grid.size();
    if (g < 2) throw ValidationError("integrated_brier: grid needs at least two points");
    for (std::size_t k = 1; k < g; ++k)
        if (!(grid[k] > grid[k - 1]))
            throw ValidationError("integrated_brier: grid must be strictly increasing");
    if (surv_pred.size() != n) throw ValidationError("integrated_brier: prediction rows mismatch");
    for (const auto& row : surv_pred) {
        if (row.size() != g) throw ValidationError("integrated_brier: prediction grid mismatch");
        for (double v : row)
            if (!(v >= 0.0 && v <= 1.0))
                throw ValidationError("integrated_brier: predictions must lie in [0, 1]");
    }

    // reverse Kaplan-Meier of the censoring distribution
    std::vector<int> cens(n);
    for (std::size_t i = 0; i < n; ++i) cens[i] = 1 - events[i];
    auto gcurve = kaplan_meier(times, cens);

    std::vector<double> bs(g, 0.0);
    for (std::size_t k = 0; k < g; ++k) {
        const double t = grid[k];
        const double g_at_t = km_eval(gcurve, t);
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (times[i] <= t && events[i] == 1) {
                const double w = km_eval_left(gcurve, times[i]);
                if (!(w > 0.0))
                    throw NumericalError("integrated_brier: censoring weight is zero at t=" +
                                         std::to_string(times[i]));
                acc += surv_pred[i][k] * surv_pred[i][k] / w;
            } else if (times[i] > t) {
                if (!(g_at_t > 0.0))
                    throw NumericalError("integrated_brier: censoring weight is zero at t=" +
                                         std::to_string(t));
                const double r = 1.0 - surv_pred[i][k];
                acc += r * r / g_at_t;
            }
        }
        bs[k] = acc / static_cast<double>(n);
    }
    double integral = 0.0;
    for (std::size_t k = 1; k < g; ++k)
        integral += 0.5 * (bs[k] + bs[k - 1]) * (grid[k] - grid[k - 1]);
    return integral / (grid.back() - grid.front());
}

KsResult ks_two_sample(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.empty() || b.empty()) throw ValidationError("ks_two_sample: empty sample");
    std::vector<double> sa = a, sb = b;
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    const double na = static_cast<double>(sa.size());
    const double nb = static_cast<double>(sb.size());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < sa.size() && j < sb.size()) {
        const double v = std::min(sa[i], sb[j]);
        while (i < sa.size() && sa[i] <= v) ++i;
        while (j < sb.size() && sb[j] <= v) ++j;
        d = std::max(d, std::fabs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
    }
    KsResult res;
    res.stat = d;
    const double en = std::sqrt(na * nb / (na + nb));
    res.p = kolmogorov_sf((en + 0.12 + 0.11 / en) * d);
    return res;
}

std::vector<EffectSizeRow> effect_size_mc(const SimConfig& cfg, const std::vector<double>& betas,
                                          int reps, std::uint64_t seed) {
    cfg.check();
    if (reps < 1) throw ValidationError("effect_size_mc: reps must be >= 1");
    if (betas.empty()) throw ValidationError("effect_size_mc: no beta values");
    std::vector<EffectSizeRow> table;
    for (std::size_t bi = 0; bi < betas.size(); ++bi) {
        SimConfig c = cfg;
        c.beta = betas[bi];
        c.lambda_c = resolve_lambda_c(c, derive_seed(seed, "esmc-calibrate", bi));
        EffectSizeRow row;
        row.beta = betas[bi];
        for (int r = 0; r < reps; ++r) {
            TrialDataset ds =
                simulate_trial(c, derive_seed(seed, "esmc-rep", bi * 1000003 + static_cast<std::size_t>(r)));
            std::vector<std::vector<double>> X(ds.n_rows(), std::vector<double>(1, 0.0));
            for (std::size_t i = 0; i < ds.n_rows(); ++i)
                X[i][0] = static_cast<double>(ds.treatment[i]);
            CoxResult fit;
            try {
                fit = cox_fit(X, ds.time, ds.event);
            } catch (const NumericalError& e) {
                throw NumericalError(std::string("effect_size_mc: Cox fit failed at beta=") +
                                     std::to_string(betas[bi]) + ": " + e.what());
            }
            row.beta_tilde += fit.beta[0];
            for (std::size_t i = 0; i < ds.n_rows(); ++i) {
                if (ds.treatment[i] == 1) {
                    row.n_treated += 1.0;
                    row.events_treated += ds.event[i];
                } else {
                    row.n_control += 1.0;
                    row.events_control += ds.event[i];
                }
            }
        }
        const double r = static_cast<double>(reps);
        row.beta_tilde /= r;
        row.events_treated /= r;
        row.events_control /= r;
        row.n_treated /= r;
        row.n_control /= r;
        table.push_back(row);
    }
    return table;
}

}  // namespace synthtrial
