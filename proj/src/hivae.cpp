#include "synthtrial/hivae.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace synthtrial {

using json = nlohmann::json;
using nn::Mat;
using nn::Tape;

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kSurvFloor = 1e-12;

double stable_softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

}  // namespace

std::string survival_head_to_string(SurvivalHeadKind k) {
    return k == SurvivalHeadKind::Weibull ? "weibull" : "piecewise";
}

SurvivalHeadKind survival_head_from_string(const std::string& s) {
    if (s == "weibull") return SurvivalHeadKind::Weibull;
    if (s == "piecewise") return SurvivalHeadKind::Piecewise;
    throw ValidationError("unknown survival head '" + s + "'");
}

void HiVaeConfig::check() const {
    if (s_dim < 1) throw ValidationError("s_dim must be >= 1");
    if (z_dim < 1) throw ValidationError("z_dim must be >= 1");
    if (y_dim < 1) throw ValidationError("y_dim must be >= 1");
    if (n_intervals < 1) throw ValidationError("n_intervals must be >= 1");
    if (survival_layers != 1 && survival_layers != 2)
        throw ValidationError("survival_layers must be 1 or 2");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
        throw ValidationError("learning_rate must be positive");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (max_epochs < 1) throw ValidationError("max_epochs must be >= 1");
    if (patience < 1) throw ValidationError("patience must be >= 1");
    if (!(tau > 0.0)) throw ValidationError("tau must be positive");
}

HiVaeConfig hivae_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("invalid model config JSON: ") + e.what());
    }
    HiVaeConfig cfg;
    try {
        if (j.contains("s_dim")) cfg.s_dim = j.at("s_dim").get<int>();
        if (j.contains("z_dim")) cfg.z_dim = j.at("z_dim").get<int>();
        if (j.contains("y_dim")) cfg.y_dim = j.at("y_dim").get<int>();
        if (j.contains("survival_head"))
            cfg.survival_head = survival_head_from_string(j.at("survival_head").get<std::string>());
        if (j.contains("n_intervals")) cfg.n_intervals = j.at("n_intervals").get<int>();
        if (j.contains("survival_layers")) cfg.survival_layers = j.at("survival_layers").get<int>();
        if (j.contains("learning_rate")) cfg.learning_rate = j.at("learning_rate").get<double>();
        if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<int>();
        if (j.contains("max_epochs")) cfg.max_epochs = j.at("max_epochs").get<int>();
        if (j.contains("patience")) cfg.patience = j.at("patience").get<int>();
        if (j.contains("tau")) cfg.tau = j.at("tau").get<double>();
        if (j.contains("anneal_tau")) cfg.anneal_tau = j.at("anneal_tau").get<bool>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("invalid model config JSON: ") + e.what());
    }
    cfg.check();
    return cfg;
}

namespace {

json config_to_json_obj(const HiVaeConfig& cfg) {
    json j;
    j["s_dim"] = cfg.s_dim;
    j["z_dim"] = cfg.z_dim;
    j["y_dim"] = cfg.y_dim;
    j["survival_head"] = survival_head_to_string(cfg.survival_head);
    j["n_intervals"] = cfg.n_intervals;
    j["survival_layers"] = cfg.survival_layers;
    j["learning_rate"] = cfg.learning_rate;
    j["batch_size"] = cfg.batch_size;
    j["max_epochs"] = cfg.max_epochs;
    j["patience"] = cfg.patience;
    j["tau"] = cfg.tau;
    j["anneal_tau"] = cfg.anneal_tau;
    return j;
}

}  // namespace

std::string hivae_config_to_json(const HiVaeConfig& cfg) {
    return config_to_json_obj(cfg).dump(2);
}

std::vector<ColumnSpec> HiVaeModel::model_features() const {
    std::vector<ColumnSpec> feats = schema.covariates;
    if (includes_treatment) {
        ColumnSpec tr;
        tr.name = schema.treatment_col;
        tr.kind = FeatureKind::Categorical;
        tr.levels = {"0", "1"};
        feats.push_back(tr);
    }
    return feats;
}

double weibull_log_density(double t, double scale, double shape) {
    if (!(t > 0.0)) throw ValidationError("weibull density needs t > 0");
    if (!(scale > 0.0) || !(shape > 0.0))
        throw ValidationError("weibull parameters must be positive");
    const double logr = std::log(t) - std::log(scale);
    return std::log(shape) - std::log(scale) + (shape - 1.0) * logr - std::exp(shape * logr);
}

double weibull_log_survival(double t, double scale, double shape) {
    if (!(t > 0.0)) throw ValidationError("weibull survival needs t > 0");
    if (!(scale > 0.0) || !(shape > 0.0))
        throw ValidationError("weibull parameters must be positive");
    return -std::exp(shape * (std::log(t) - std::log(scale)));
}

std::vector<double> piecewise_bounds(const std::vector<double>& times, int n_intervals) {
    if (times.empty()) throw ValidationError("piecewise_bounds needs at least one time");
    if (n_intervals < 1) throw ValidationError("n_intervals must be >= 1");
    std::vector<double> sorted = times;
    std::sort(sorted.begin(), sorted.end());
    if (!(sorted.front() > 0.0) || !std::isfinite(sorted.back()))
        throw ValidationError("times must be positive and finite");
    std::vector<double> b;
    b.reserve(static_cast<std::size_t>(n_intervals) + 1);
    b.push_back(0.0);
    for (int i = 1; i < n_intervals; ++i)
        b.push_back(quantile_sorted(sorted, static_cast<double>(i) / n_intervals));
    b.push_back(1.05 * sorted.back());
    const double eps = 1e-9 * std::max(1.0, b.back());
    for (std::size_t i = 1; i < b.size(); ++i)
        if (b[i] <= b[i - 1]) b[i] = b[i - 1] + eps;
    return b;
}

namespace {

void check_piecewise_args(const std::vector<double>& bounds, const std::vector<double>& masses) {
    if (bounds.size() < 2) throw ValidationError("piecewise head needs at least 2 bounds");
    if (masses.size() + 1 != bounds.size())
        throw ValidationError("piecewise masses must have one entry per interval");
    double total = 0.0;
    for (double p : masses) {
        if (!(p >= 0.0)) throw ValidationError("piecewise masses must be nonnegative");
        total += p;
    }
    if (std::fabs(total - 1.0) > 1e-6)
        throw ValidationError("piecewise masses must sum to 1");
}

// Index k with bounds[k] < t <= bounds[k+1]; requires t in range.
std::size_t interval_of(double t, const std::vector<double>& bounds) {
    std::size_t k = static_cast<std::size_t>(
        std::upper_bound(bounds.begin(), bounds.end(), t) - bounds.begin());
    if (k == 0) return 0;  // t <= bounds[0] handled by callers
    if (k >= bounds.size()) k = bounds.size() - 1;
    return k - 1;
}

}  // namespace

double piecewise_density(double t, const std::vector<double>& bounds,
                         const std::vector<double>& masses) {
    check_piecewise_args(bounds, masses);
    if (!(t > 0.0)) throw ValidationError("piecewise density needs t > 0");
    if (t > bounds.back()) return kSurvFloor;
    const std::size_t k = interval_of(t, bounds);
    return masses[k] / (bounds[k + 1] - bounds[k]);
}

double piecewise_survival(double t, const std::vector<double>& bounds,
                          const std::vector<double>& masses) {
    check_piecewise_args(bounds, masses);
    if (t <= 0.0) return 1.0;
    if (t > bounds.back()) return kSurvFloor;
    const std::size_t k = interval_of(t, bounds);
    double cdf = 0.0;
    for (std::size_t i = 0; i < k; ++i) cdf += masses[i];
    cdf += masses[k] * (t - bounds[k]) / (bounds[k + 1] - bounds[k]);
    double s = 1.0 - cdf;
    if (s < 0.0) s = 0.0;
    return s;
}

double survival_loglik(SurvivalHeadKind kind, const std::vector<double>& bounds, double t,
                       double delta, const SurvivalParams& eta_t, const SurvivalParams& eta_c) {
    if (!(t > 0.0)) throw ValidationError("survival_loglik needs t > 0");
    if (delta != 0.0 && delta != 1.0) throw ValidationError("delta must be 0 or 1");
    double logf_t, logs_t, logf_c, logs_c;
    if (kind == SurvivalHeadKind::Weibull) {
        logf_t = weibull_log_density(t, eta_t.scale, eta_t.shape);
        logs_t = weibull_log_survival(t, eta_t.scale, eta_t.shape);
        logf_c = weibull_log_density(t, eta_c.scale, eta_c.shape);
        logs_c = weibull_log_survival(t, eta_c.scale, eta_c.shape);
    } else {
        logf_t = std::log(std::max(piecewise_density(t, bounds, eta_t.masses), kSurvFloor));
        logs_t = std::log(std::max(piecewise_survival(t, bounds, eta_t.masses), kSurvFloor));
        logf_c = std::log(std::max(piecewise_density(t, bounds, eta_c.masses), kSurvFloor));
        logs_c = std::log(std::max(piecewise_survival(t, bounds, eta_c.masses), kSurvFloor));
    }
    return delta == 1.0 ? logf_t + logs_c : logs_t + logf_c;
}

namespace {

int head_out_dim(const ColumnSpec& f) {
    switch (f.kind) {
        case FeatureKind::Real:
        case FeatureKind::Positive:
            return 2;
        case FeatureKind::Count:
            return 1;
        case FeatureKind::Categorical:
            return static_cast<int>(f.levels.size());
    }
    throw ValidationError("unknown feature kind");
}

int surv_out_dim(const HiVaeConfig& cfg) {
    return cfg.survival_head == SurvivalHeadKind::Weibull ? 2 : cfg.n_intervals;
}

int encoder_width(const std::vector<ColumnSpec>& feats) {
    int d = 2;  // time and event
    for (const auto& f : feats)
        d += f.kind == FeatureKind::Categorical ? static_cast<int>(f.levels.size()) : 1;
    return d;
}

double feature_raw(const HiVaeModel& m, const TrialDataset& data, int row, int feature) {
    const int n_cov = static_cast<int>(m.schema.covariates.size());
    if (feature < n_cov) return data.cols[static_cast<std::size_t>(feature)][static_cast<std::size_t>(row)];
    return static_cast<double>(data.treatment[static_cast<std::size_t>(row)]);
}

std::vector<double> encoder_input_row(const HiVaeModel& m, const std::vector<ColumnSpec>& feats,
                                      const TrialDataset& data, int row) {
    std::vector<double> x;
    x.reserve(static_cast<std::size_t>(encoder_width(feats)));
    for (std::size_t j = 0; j < feats.size(); ++j) {
        const double v = feature_raw(m, data, row, static_cast<int>(j));
        const FeatureNorm& nm = m.norms[j];
        switch (feats[j].kind) {
            case FeatureKind::Real:
                x.push_back((v - nm.mean) / nm.sd);
                break;
            case FeatureKind::Positive:
                x.push_back((std::log(v) - nm.mean) / nm.sd);
                break;
            case FeatureKind::Count:
                x.push_back(std::log1p(v));
                break;
            case FeatureKind::Categorical: {
                const std::size_t levels = feats[j].levels.size();
                const auto code = static_cast<std::size_t>(v);
                for (std::size_t r = 0; r < levels; ++r) x.push_back(r == code ? 1.0 : 0.0);
                break;
            }
        }
    }
    const double t = data.time[static_cast<std::size_t>(row)];
    x.push_back((std::log(t) - m.time_norm.log_mean) / m.time_norm.log_sd);
    x.push_back(static_cast<double>(data.event[static_cast<std::size_t>(row)]));
    return x;
}

void create_params(HiVaeModel& m, Rng& rng) {
    const auto feats = m.model_features();
    const int d_in = encoder_width(feats);
    const auto L = static_cast<std::size_t>(m.cfg.s_dim);
    const auto K = static_cast<std::size_t>(m.cfg.z_dim);
    const auto H = static_cast<std::size_t>(m.cfg.y_dim);
    auto& p = m.params;
    auto dense_pair = [&](const std::string& prefix, std::size_t in, std::size_t out) {
        p.add(prefix + "_W", nn::glorot(in, out, rng));
        p.add(prefix + "_b", Mat(1, out));
    };
    dense_pair("enc_trunk", static_cast<std::size_t>(d_in), H);
    dense_pair("enc_pi", H, L);
    dense_pair("enc_mu", H, K);
    dense_pair("enc_lv", H, K);
    p.add("enc_mu_emb", nn::glorot(L, K, rng));
    p.add("enc_lv_emb", Mat(L, K));
    p.add("prior_mu", nn::glorot(L, K, rng));
    dense_pair("dec_g", K, H);
    for (std::size_t j = 0; j < feats.size(); ++j)
        dense_pair("head" + std::to_string(j), H + L,
                   static_cast<std::size_t>(head_out_dim(feats[j])));
    const auto sd = static_cast<std::size_t>(surv_out_dim(m.cfg));
    for (const std::string& base : {std::string("surv_t"), std::string("surv_c")}) {
        if (m.cfg.survival_layers == 2) {
            dense_pair(base + "_h", H + L, H);
            dense_pair(base, H, sd);
        } else {
            dense_pair(base, H + L, sd);
        }
    }
}

// Constants for one batch's survival likelihood, on the head's native scale.
struct SurvConst {
    Mat log_u;     // B x 1, log(t / time scale)
    Mat delta;     // B x 1
    Mat omdelta;   // B x 1
    Mat dens_w;    // B x K_int
    Mat cdf_w;     // B x K_int
};

SurvConst make_surv_const(const HiVaeModel& m, const std::vector<double>& t,
                          const std::vector<double>& delta) {
    const auto B = t.size();
    if (delta.size() != B) throw ValidationError("time and event vectors disagree in length");
    SurvConst sc;
    sc.delta = Mat(B, 1);
    sc.omdelta = Mat(B, 1);
    for (std::size_t i = 0; i < B; ++i) {
        if (!(t[i] > 0.0)) throw ValidationError("survival times must be positive");
        if (delta[i] != 0.0 && delta[i] != 1.0) throw ValidationError("delta must be 0 or 1");
        sc.delta.at(i, 0) = delta[i];
        sc.omdelta.at(i, 0) = 1.0 - delta[i];
    }
    if (m.cfg.survival_head == SurvivalHeadKind::Weibull) {
        sc.log_u = Mat(B, 1);
        for (std::size_t i = 0; i < B; ++i)
            sc.log_u.at(i, 0) = std::log(t[i] / m.time_norm.scale);
    } else {
        const auto& b = m.time_norm.bounds;
        const auto K = b.size() - 1;
        sc.dens_w = Mat(B, K);
        sc.cdf_w = Mat(B, K);
        for (std::size_t i = 0; i < B; ++i) {
            const double ti = std::min(t[i], b.back());
            const std::size_t k = interval_of(ti, b);
            const double width = b[k + 1] - b[k];
            sc.dens_w.at(i, k) = 1.0 / width;
            for (std::size_t q = 0; q < k; ++q) sc.cdf_w.at(i, q) = 1.0;
            sc.cdf_w.at(i, k) = (ti - b[k]) / width;
        }
    }
    return sc;
}

// Per-batch constants for the full ELBO.
struct BatchConst {
    Mat xenc;                  // B x D_in
    std::vector<Mat> targets;  // per feature: B x 1, or B x levels one-hot
    SurvConst surv;
    std::size_t B = 0;
};

Mat feature_target_mat(const HiVaeModel& m, const ColumnSpec& f, std::size_t j,
                       const std::vector<double>& raw) {
    const auto B = raw.size();
    if (f.kind == FeatureKind::Categorical) {
        Mat t(B, f.levels.size());
        for (std::size_t i = 0; i < B; ++i) {
            const auto code = static_cast<std::size_t>(raw[i]);
            if (raw[i] < 0.0 || code >= f.levels.size() ||
                raw[i] != static_cast<double>(code))
                throw ValidationError("invalid category code in column '" + f.name + "'");
            t.at(i, code) = 1.0;
        }
        return t;
    }
    Mat t(B, 1);
    const FeatureNorm& nm = m.norms[j];
    for (std::size_t i = 0; i < B; ++i) {
        switch (f.kind) {
            case FeatureKind::Real:
                t.at(i, 0) = (raw[i] - nm.mean) / nm.sd;
                break;
            case FeatureKind::Positive:
                if (!(raw[i] > 0.0))
                    throw ValidationError("positive column '" + f.name + "' has a nonpositive value");
                t.at(i, 0) = (std::log(raw[i]) - nm.mean) / nm.sd;
                break;
            default:
                t.at(i, 0) = raw[i];
        }
    }
    return t;
}

BatchConst make_batch(const HiVaeModel& m, const TrialDataset& data,
                      const std::vector<int>& rows) {
    if (rows.empty()) throw ValidationError("batch must be nonempty");
    const auto feats = m.model_features();
    BatchConst bc;
    bc.B = rows.size();
    const auto d_in = static_cast<std::size_t>(encoder_width(feats));
    bc.xenc = Mat(bc.B, d_in);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto x = encoder_input_row(m, feats, data, rows[i]);
        for (std::size_t c = 0; c < d_in; ++c) bc.xenc.at(i, c) = x[c];
    }
    bc.targets.reserve(feats.size());
    for (std::size_t j = 0; j < feats.size(); ++j) {
        std::vector<double> raw(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i)
            raw[i] = feature_raw(m, data, rows[i], static_cast<int>(j));
        bc.targets.push_back(feature_target_mat(m, feats[j], j, raw));
    }
    std::vector<double> t(rows.size()), delta(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        t[i] = data.time[static_cast<std::size_t>(rows[i])];
        delta[i] = static_cast<double>(data.event[static_cast<std::size_t>(rows[i])]);
    }
    bc.surv = make_surv_const(m, t, delta);
    return bc;
}

// Summed log-likelihood node for one feature head given constant head input.
Tape::Id feature_ll_node(Tape& tape, nn::TapeBind& bind, const HiVaeModel& m, int feature,
                         Tape::Id head_in, const Mat& target, Rng& init_rng) {
    const auto feats = m.model_features();
    const auto& f = feats[static_cast<std::size_t>(feature)];
    const std::string prefix = "head" + std::to_string(feature);
    switch (f.kind) {
        case FeatureKind::Real:
        case FeatureKind::Positive: {
            const auto out = nn::dense(tape, bind, prefix, head_in, 2,
                                       nn::Activation::Identity, init_rng);
            const auto mu = tape.slice_cols(out, 0, 1);
            const auto lv = tape.slice_cols(out, 1, 2);
            const auto x = tape.leaf(target);
            const auto quad = tape.mul(tape.square(tape.sub(x, mu)), tape.exp_(tape.neg(lv)));
            const auto ll = tape.add_const(tape.scale(tape.add(lv, quad), -0.5), -0.5 * kLog2Pi);
            return tape.sum(ll);
        }
        case FeatureKind::Count: {
            const auto out = nn::dense(tape, bind, prefix, head_in, 1,
                                       nn::Activation::Identity, init_rng);
            const auto lam = tape.add_const(tape.softplus(out), 1e-8);
            const auto x = tape.leaf(target);
            const auto ll = tape.sub(tape.mul(x, tape.log_(lam)), lam);
            double lg = 0.0;
            for (double v : target.a) lg += std::lgamma(v + 1.0);
            return tape.add_const(tape.sum(ll), -lg);
        }
        case FeatureKind::Categorical: {
            const auto out = nn::dense(tape, bind, prefix, head_in, f.levels.size(),
                                       nn::Activation::Identity, init_rng);
            const auto lsm = tape.log_softmax_rows(out);
            return tape.sum(tape.rowsum(tape.mul(lsm, tape.leaf(target))));
        }
    }
    throw ValidationError("unknown feature kind");
}

// Summed censored survival log-likelihood node for both heads.
Tape::Id survival_ll_node(Tape& tape, nn::TapeBind& bind, const HiVaeModel& m, Tape::Id head_in,
                          const SurvConst& sc, Rng& init_rng) {
    auto head_out = [&](const std::string& base) {
        Tape::Id in = head_in;
        if (m.cfg.survival_layers == 2)
            in = nn::dense(tape, bind, base + "_h", in, static_cast<std::size_t>(m.cfg.y_dim),
                           nn::Activation::Tanh, init_rng);
        return nn::dense(tape, bind, base, in, static_cast<std::size_t>(surv_out_dim(m.cfg)),
                         nn::Activation::Identity, init_rng);
    };
    const auto out_t = head_out("surv_t");
    const auto out_c = head_out("surv_c");
    std::pair<Tape::Id, Tape::Id> ft_st, fc_sc;
    if (m.cfg.survival_head == SurvivalHeadKind::Weibull) {
        const auto logu = tape.leaf(sc.log_u);
        auto part = [&](Tape::Id out) {
            const auto scale = tape.add_const(tape.softplus(tape.slice_cols(out, 0, 1)), 1e-6);
            const auto shape = tape.add_const(tape.softplus(tape.slice_cols(out, 1, 2)), 1e-6);
            const auto log_scale = tape.log_(scale);
            const auto pw = tape.exp_(tape.mul(shape, tape.sub(logu, log_scale)));
            const auto logf =
                tape.sub(tape.add(tape.sub(tape.log_(shape), tape.mul(shape, log_scale)),
                                  tape.mul(tape.add_const(shape, -1.0), logu)),
                         pw);
            return std::pair<Tape::Id, Tape::Id>(logf, tape.neg(pw));
        };
        ft_st = part(out_t);
        fc_sc = part(out_c);
    } else {
        const auto dens_w = tape.leaf(sc.dens_w);
        const auto cdf_w = tape.leaf(sc.cdf_w);
        auto part = [&](Tape::Id out) {
            const auto p = tape.softmax_rows(out);
            const auto dens = tape.clamp_min(tape.rowsum(tape.mul(p, dens_w)), kSurvFloor);
            const auto cdf = tape.rowsum(tape.mul(p, cdf_w));
            const auto surv = tape.clamp_min(tape.add_const(tape.neg(cdf), 1.0), kSurvFloor);
            return std::pair<Tape::Id, Tape::Id>(tape.log_(dens), tape.log_(surv));
        };
        ft_st = part(out_t);
        fc_sc = part(out_c);
    }
    const auto d = tape.leaf(sc.delta);
    const auto od = tape.leaf(sc.omdelta);
    const auto ll_t = tape.add(tape.mul(d, ft_st.first), tape.mul(od, ft_st.second));
    const auto ll_c = tape.add(tape.mul(od, fc_sc.first), tape.mul(d, fc_sc.second));
    return tape.sum(tape.add(ll_t, ll_c));
}

struct ElboNodeSet {
    Tape::Id elbo, recon, kl_z, kl_s;
};

ElboNodeSet build_elbo(Tape& tape, nn::TapeBind& bind, const HiVaeModel& m, const BatchConst& bc,
                       const Mat& gumbel_noise, const Mat& eps, double tau, Rng& init_rng) {
    const auto L = static_cast<std::size_t>(m.cfg.s_dim);
    const auto K = static_cast<std::size_t>(m.cfg.z_dim);
    const auto feats = m.model_features();

    const auto x = tape.leaf(bc.xenc);
    const auto phi = nn::dense(tape, bind, "enc_trunk", x, static_cast<std::size_t>(m.cfg.y_dim),
                               nn::Activation::Tanh, init_rng);
    const auto pi_logits =
        nn::dense(tape, bind, "enc_pi", phi, L, nn::Activation::Identity, init_rng);
    const auto pi = tape.softmax_rows(pi_logits);
    const auto log_pi = tape.log_softmax_rows(pi_logits);

    // KL(q(s|x) || uniform) = log L + sum_l pi_l log pi_l
    const auto kl_s_rows =
        tape.rowsum(tape.mul(pi, tape.add_const(log_pi, std::log(static_cast<double>(L)))));
    const auto kl_s = tape.sum(kl_s_rows);

    const auto base_mu =
        nn::dense(tape, bind, "enc_mu", phi, K, nn::Activation::Identity, init_rng);
    const auto base_lv =
        nn::dense(tape, bind, "enc_lv", phi, K, nn::Activation::Identity, init_rng);
    const auto u_mu = bind.use("enc_mu_emb");
    const auto u_lv = bind.use("enc_lv_emb");
    const auto prior = bind.use("prior_mu");

    // E_{q(s)} KL(q(z|x,s) || p(z|s)) expanded so every term is a matrix
    // product: mu_q(l) = base_mu + U_mu[l], logvar(l) = base_lv + U_lv[l],
    // Q[l] = U_mu[l] - prior[l].
    const auto e_exp = tape.matmul_nt(tape.exp_(base_lv), tape.exp_(u_lv));
    const auto q = tape.sub(u_mu, prior);
    const auto quad = tape.add_colvec(
        tape.add_rowvec(tape.scale(tape.matmul_nt(base_mu, q), 2.0),
                        tape.transpose(tape.rowsum(tape.square(q)))),
        tape.rowsum(tape.square(base_mu)));
    const auto zeros = tape.leaf(Mat(bc.B, L));
    const auto lv_sum = tape.add_rowvec(tape.add_colvec(zeros, tape.rowsum(base_lv)),
                                        tape.transpose(tape.rowsum(u_lv)));
    const auto kl_mat = tape.scale(
        tape.add_const(tape.sub(tape.add(e_exp, quad), lv_sum), -static_cast<double>(K)), 0.5);
    const auto kl_z = tape.sum(tape.rowsum(tape.mul(pi, kl_mat)));

    const auto s_soft = nn::gumbel_softmax(tape, pi_logits, gumbel_noise, tau);
    const auto mu_z = tape.add(base_mu, tape.matmul(s_soft, u_mu));
    const auto lv_z = tape.add(base_lv, tape.matmul(s_soft, u_lv));
    const auto z = nn::gaussian_reparam(tape, mu_z, lv_z, eps);
    const auto y = nn::dense(tape, bind, "dec_g", z, static_cast<std::size_t>(m.cfg.y_dim),
                             nn::Activation::Tanh, init_rng);
    const auto head_in = tape.concat_cols(y, s_soft);

    Tape::Id recon = survival_ll_node(tape, bind, m, head_in, bc.surv, init_rng);
    for (std::size_t j = 0; j < feats.size(); ++j)
        recon = tape.add(recon, feature_ll_node(tape, bind, m, static_cast<int>(j), head_in,
                                                bc.targets[j], init_rng));

    ElboNodeSet set;
    set.recon = recon;
    set.kl_z = kl_z;
    set.kl_s = kl_s;
    set.elbo = tape.sub(tape.sub(recon, kl_z), kl_s);
    return set;
}

ElboParts eval_elbo(const HiVaeModel& m, const BatchConst& bc, std::uint64_t noise_seed,
                    double tau, std::map<std::string, Mat>* grads_out) {
    Rng noise(noise_seed);
    Mat gn(bc.B, static_cast<std::size_t>(m.cfg.s_dim));
    for (double& v : gn.a) v = noise.gumbel();
    Mat eps(bc.B, static_cast<std::size_t>(m.cfg.z_dim));
    for (double& v : eps.a) v = noise.normal();

    Tape tape;
    auto& params = const_cast<nn::ParamStore&>(m.params);
    nn::TapeBind bind(tape, params);
    Rng unused_init(derive_seed(noise_seed, "elbo-init"));
    const auto nodes = build_elbo(tape, bind, m, bc, gn, eps, tau, unused_init);

    ElboParts parts;
    parts.elbo = tape.val(nodes.elbo).at(0, 0);
    parts.recon = tape.val(nodes.recon).at(0, 0);
    parts.kl_z = tape.val(nodes.kl_z).at(0, 0);
    parts.kl_s = tape.val(nodes.kl_s).at(0, 0);
    if (!std::isfinite(parts.elbo)) throw NumericalError("ELBO is not finite");
    if (parts.kl_z < -1e-6 || parts.kl_s < -1e-6)
        throw NumericalError("closed-form KL term is negative");
    if (grads_out != nullptr) {
        tape.backward(nodes.elbo);
        *grads_out = bind.grads();
    }
    return parts;
}

std::vector<double> affine(const Mat& w, const Mat& b, const std::vector<double>& x) {
    std::vector<double> out(w.cols, 0.0);
    for (std::size_t c = 0; c < w.cols; ++c) {
        double acc = b.at(0, c);
        for (std::size_t r = 0; r < w.rows; ++r) acc += x[r] * w.at(r, c);
        out[c] = acc;
    }
    return out;
}

std::vector<double> dense_value(const HiVaeModel& m, const std::string& prefix,
                                const std::vector<double>& x, bool tanh_act) {
    auto out = affine(m.params.get(prefix + "_W"), m.params.get(prefix + "_b"), x);
    if (tanh_act)
        for (double& v : out) v = std::tanh(v);
    return out;
}

std::vector<double> softmax_value(std::vector<double> v) {
    double mx = *std::max_element(v.begin(), v.end());
    double total = 0.0;
    for (double& x : v) {
        x = std::exp(x - mx);
        total += x;
    }
    for (double& x : v) x /= total;
    return v;
}

std::vector<double> head_input_value(const HiVaeModel& m, const std::vector<double>& y, int s) {
    const auto L = static_cast<std::size_t>(m.cfg.s_dim);
    std::vector<double> in = y;
    for (std::size_t l = 0; l < L; ++l)
        in.push_back(l == static_cast<std::size_t>(s) ? 1.0 : 0.0);
    return in;
}

std::vector<double> surv_head_value(const HiVaeModel& m, const std::string& base,
                                    const std::vector<double>& head_in) {
    std::vector<double> in = head_in;
    if (m.cfg.survival_layers == 2) in = dense_value(m, base + "_h", in, true);
    return dense_value(m, base, in, false);
}

double sample_survival_time(const HiVaeModel& m, const SurvivalParams& p, Rng& rng) {
    if (m.cfg.survival_head == SurvivalHeadKind::Weibull) {
        const double u = rng.uniform();
        return p.scale * std::pow(-std::log1p(-u), 1.0 / p.shape);
    }
    const auto& b = m.time_norm.bounds;
    const std::size_t k = rng.categorical(p.masses);
    return b[k] + rng.uniform() * (b[k + 1] - b[k]);
}

}  // namespace

HiVaeModel prepare_model(const TrialDataset& data, const HiVaeConfig& cfg, bool include_treatment,
                         std::uint64_t seed) {
    cfg.check();
    data.schema.check();
    if (data.n_rows() == 0) throw ValidationError("cannot prepare a model on an empty dataset");
    HiVaeModel m;
    m.schema = data.schema;
    m.cfg = cfg;
    m.includes_treatment = include_treatment;
    const auto feats = m.model_features();

    auto mean_sd = [](const std::vector<double>& v) {
        double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        double ss = 0.0;
        for (double x : v) ss += (x - mean) * (x - mean);
        double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 1.0;
        return std::pair<double, double>(mean, std::max(sd, 1e-8));
    };

    m.norms.assign(feats.size(), FeatureNorm{});
    const auto n = data.n_rows();
    for (std::size_t j = 0; j < feats.size(); ++j) {
        if (feats[j].kind != FeatureKind::Real && feats[j].kind != FeatureKind::Positive) continue;
        std::vector<double> v(n);
        for (std::size_t i = 0; i < n; ++i) {
            double raw = feature_raw(m, data, static_cast<int>(i), static_cast<int>(j));
            if (feats[j].kind == FeatureKind::Positive) {
                if (!(raw > 0.0))
                    throw ValidationError("positive column '" + feats[j].name +
                                          "' has a nonpositive value");
                raw = std::log(raw);
            }
            v[i] = raw;
        }
        auto [mean, sd] = mean_sd(v);
        m.norms[j] = FeatureNorm{mean, sd};
    }

    std::vector<double> logs(n);
    double tmean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!(data.time[i] > 0.0)) throw ValidationError("times must be positive");
        logs[i] = std::log(data.time[i]);
        tmean += data.time[i];
    }
    auto [lmean, lsd] = mean_sd(logs);
    m.time_norm.log_mean = lmean;
    m.time_norm.log_sd = lsd;
    m.time_norm.scale = tmean / static_cast<double>(n);
    m.time_norm.bounds = piecewise_bounds(data.time, cfg.n_intervals);

    Rng init(derive_seed(seed, "init"));
    create_params(m, init);
    return m;
}

EncodeResult encode_row(const HiVaeModel& m, const TrialDataset& data, int row) {
    const auto feats = m.model_features();
    if (row < 0 || static_cast<std::size_t>(row) >= data.n_rows())
        throw ValidationError("row out of range");
    const auto x = encoder_input_row(m, feats, data, row);
    const auto phi = dense_value(m, "enc_trunk", x, true);
    EncodeResult er;
    er.pi = softmax_value(dense_value(m, "enc_pi", phi, false));
    const auto base_mu = dense_value(m, "enc_mu", phi, false);
    const auto base_lv = dense_value(m, "enc_lv", phi, false);
    const auto L = static_cast<std::size_t>(m.cfg.s_dim);
    const auto K = static_cast<std::size_t>(m.cfg.z_dim);
    const Mat& u_mu = m.params.get("enc_mu_emb");
    const Mat& u_lv = m.params.get("enc_lv_emb");
    er.mu = Mat(L, K);
    er.var = Mat(L, K);
    for (std::size_t l = 0; l < L; ++l)
        for (std::size_t k = 0; k < K; ++k) {
            er.mu.at(l, k) = base_mu[k] + u_mu.at(l, k);
            er.var.at(l, k) = std::exp(base_lv[k] + u_lv.at(l, k));
            if (!std::isfinite(er.mu.at(l, k)) || !(er.var.at(l, k) > 0.0))
                throw NumericalError("encoder produced a non-finite posterior");
        }
    double total = 0.0;
    for (double p : er.pi) {
        if (!std::isfinite(p)) throw NumericalError("encoder produced a non-finite posterior");
        total += p;
    }
    if (std::fabs(total - 1.0) > 1e-9) throw NumericalError("encoder posterior does not sum to 1");
    return er;
}

FeatureParams decode_feature(const HiVaeModel& m, const std::vector<double>& y, int s,
                             int feature) {
    const auto feats = m.model_features();
    if (feature < 0 || static_cast<std::size_t>(feature) >= feats.size())
        throw ValidationError("feature index out of range");
    if (s < 0 || s >= m.cfg.s_dim) throw ValidationError("mixture component out of range");
    if (y.size() != static_cast<std::size_t>(m.cfg.y_dim))
        throw ValidationError("y has the wrong dimension");
    const auto in = head_input_value(m, y, s);
    const auto out = dense_value(m, "head" + std::to_string(feature), in, false);
    const auto& f = feats[static_cast<std::size_t>(feature)];
    FeatureParams fp;
    fp.kind = f.kind;
    switch (f.kind) {
        case FeatureKind::Real:
        case FeatureKind::Positive:
            fp.mu = out[0];
            fp.var = std::exp(out[1]);
            break;
        case FeatureKind::Count:
            fp.lambda = stable_softplus(out[0]) + 1e-8;
            break;
        case FeatureKind::Categorical:
            fp.probs = softmax_value(out);
            break;
    }
    return fp;
}

void decode_survival(const HiVaeModel& m, const std::vector<double>& y, int s,
                     SurvivalParams& eta_t, SurvivalParams& eta_c) {
    if (s < 0 || s >= m.cfg.s_dim) throw ValidationError("mixture component out of range");
    if (y.size() != static_cast<std::size_t>(m.cfg.y_dim))
        throw ValidationError("y has the wrong dimension");
    const auto in = head_input_value(m, y, s);
    auto fill = [&](const std::string& base, SurvivalParams& p) {
        const auto out = surv_head_value(m, base, in);
        if (m.cfg.survival_head == SurvivalHeadKind::Weibull) {
            p.scale = (stable_softplus(out[0]) + 1e-6) * m.time_norm.scale;
            p.shape = stable_softplus(out[1]) + 1e-6;
            p.masses.clear();
        } else {
            p.masses = softmax_value(out);
        }
    };
    fill("surv_t", eta_t);
    fill("surv_c", eta_c);
}

ElboParts elbo_value(const HiVaeModel& m, const TrialDataset& data, const std::vector<int>& rows,
                     std::uint64_t noise_seed) {
    const auto bc = make_batch(m, data, rows);
    return eval_elbo(m, bc, noise_seed, m.cfg.tau, nullptr);
}

std::map<std::string, Mat> elbo_grads(const HiVaeModel& m, const TrialDataset& data,
                                      const std::vector<int>& rows, std::uint64_t noise_seed) {
    const auto bc = make_batch(m, data, rows);
    std::map<std::string, Mat> grads;
    eval_elbo(m, bc, noise_seed, m.cfg.tau, &grads);
    return grads;
}

namespace {

double head_check_value(const HiVaeModel& m, int feature, const Mat& y, const Mat& s_onehot,
                        const std::vector<double>& target, const std::vector<double>& t,
                        const std::vector<double>& delta, bool survival,
                        std::map<std::string, Mat>* grads_out) {
    if (y.rows != s_onehot.rows) throw ValidationError("y and s_onehot disagree in rows");
    Tape tape;
    auto& params = const_cast<nn::ParamStore&>(m.params);
    nn::TapeBind bind(tape, params);
    Rng unused_init(derive_seed(0, "head-check"));
    const auto head_in = tape.concat_cols(tape.leaf(y), tape.leaf(s_onehot));
    Tape::Id node;
    if (survival) {
        node = survival_ll_node(tape, bind, m, head_in, make_surv_const(m, t, delta), unused_init);
    } else {
        const auto feats = m.model_features();
        const auto& f = feats[static_cast<std::size_t>(feature)];
        Mat tmat;
        if (f.kind == FeatureKind::Categorical) {
            tmat = Mat(target.size(), f.levels.size());
            for (std::size_t i = 0; i < target.size(); ++i)
                tmat.at(i, static_cast<std::size_t>(target[i])) = 1.0;
        } else {
            tmat = Mat(target.size(), 1);
            for (std::size_t i = 0; i < target.size(); ++i) tmat.at(i, 0) = target[i];
        }
        node = feature_ll_node(tape, bind, m, feature, head_in, tmat, unused_init);
    }
    const double value = tape.val(node).at(0, 0);
    if (grads_out != nullptr) {
        tape.backward(node);
        *grads_out = bind.grads();
    }
    return value;
}

}  // namespace

double feature_head_value(const HiVaeModel& m, int feature, const Mat& y, const Mat& s_onehot,
                          const std::vector<double>& target) {
    return head_check_value(m, feature, y, s_onehot, target, {}, {}, false, nullptr);
}

std::map<std::string, Mat> feature_head_grads(const HiVaeModel& m, int feature, const Mat& y,
                                              const Mat& s_onehot,
                                              const std::vector<double>& target) {
    std::map<std::string, Mat> grads;
    head_check_value(m, feature, y, s_onehot, target, {}, {}, false, &grads);
    return grads;
}

double survival_head_value(const HiVaeModel& m, const Mat& y, const Mat& s_onehot,
                           const std::vector<double>& t, const std::vector<double>& delta) {
    return head_check_value(m, -1, y, s_onehot, {}, t, delta, true, nullptr);
}

std::map<std::string, Mat> survival_head_grads(const HiVaeModel& m, const Mat& y,
                                               const Mat& s_onehot, const std::vector<double>& t,
                                               const std::vector<double>& delta) {
    std::map<std::string, Mat> grads;
    head_check_value(m, -1, y, s_onehot, {}, t, delta, true, &grads);
    return grads;
}

TrainTrace train_model(HiVaeModel& m, const TrialDataset& data, std::uint64_t seed) {
    if (data.n_rows() == 0) throw ValidationError("training set is empty");
    const int n = static_cast<int>(data.n_rows());
    std::vector<int> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), 0);
    const auto full = make_batch(m, data, all);

    nn::AdamConfig acfg;
    acfg.lr = m.cfg.learning_rate;
    Rng shuffle_rng(derive_seed(seed, "shuffle"));
    const std::uint64_t eval_seed = derive_seed(seed, "eval-noise");
    const int bs = std::min(m.cfg.batch_size, n);
    const int n_batches = (n + bs - 1) / bs;

    TrainTrace trace;
    double best = -std::numeric_limits<double>::infinity();
    std::map<std::string, Mat> best_values;
    int bad = 0;

    for (int epoch = 0; epoch < m.cfg.max_epochs; ++epoch) {
        double tau = m.cfg.tau;
        if (m.cfg.anneal_tau && m.cfg.max_epochs > 1)
            tau += (0.5 - m.cfg.tau) * static_cast<double>(epoch) / (m.cfg.max_epochs - 1);
        auto idx = all;
        shuffle_rng.shuffle(idx);
        try {
            for (int b = 0; b < n_batches; ++b) {
                const auto lo = static_cast<std::size_t>(b) * static_cast<std::size_t>(bs);
                const auto hi = std::min(lo + static_cast<std::size_t>(bs), idx.size());
                std::vector<int> rows(idx.begin() + static_cast<std::ptrdiff_t>(lo),
                                      idx.begin() + static_cast<std::ptrdiff_t>(hi));
                const auto bc = make_batch(m, data, rows);
                std::map<std::string, Mat> grads;
                eval_elbo(m, bc, derive_seed(seed, "step-noise",
                                             static_cast<std::uint64_t>(epoch) *
                                                     static_cast<std::uint64_t>(n_batches) +
                                                 static_cast<std::uint64_t>(b)),
                          tau, &grads);
                const double k = -1.0 / static_cast<double>(rows.size());
                for (auto& [name, g] : grads)
                    for (double& v : g.a) v *= k;
                nn::adam_step(m.params, grads, acfg);
            }
            const auto ev = eval_elbo(m, full, eval_seed, m.cfg.tau, nullptr);
            const double per_row = ev.elbo / n;
            trace.epoch_elbo.push_back(per_row);
            if (trace.best_epoch < 0 ||
                per_row > best + 1e-4 * std::max(1.0, std::fabs(best))) {
                best = per_row;
                best_values = m.params.values;
                trace.best_epoch = epoch;
                bad = 0;
            } else if (++bad >= m.cfg.patience) {
                break;
            }
        } catch (const NumericalError& err) {
            trace.diverged = true;
            trace.note = err.what();
            break;
        }
    }
    if (!best_values.empty()) m.params.values = best_values;
    return trace;
}

namespace {

void append_sampled_row(const HiVaeModel& m, const std::vector<double>& z, int s, Rng& rng,
                        TrialDataset& out) {
    const auto y = dense_value(m, "dec_g", z, true);
    const auto feats = m.model_features();
    const auto n_cov = m.schema.covariates.size();
    for (std::size_t j = 0; j < feats.size(); ++j) {
        const auto fp = decode_feature(m, y, s, static_cast<int>(j));
        double value = 0.0;
        switch (fp.kind) {
            case FeatureKind::Real:
                value = m.norms[j].mean +
                        m.norms[j].sd * (fp.mu + std::sqrt(fp.var) * rng.normal());
                break;
            case FeatureKind::Positive:
                value = std::exp(m.norms[j].mean +
                                 m.norms[j].sd * (fp.mu + std::sqrt(fp.var) * rng.normal()));
                break;
            case FeatureKind::Count:
                value = static_cast<double>(rng.poisson(fp.lambda));
                break;
            case FeatureKind::Categorical:
                value = static_cast<double>(rng.categorical(fp.probs));
                break;
        }
        // generated arms are control arms: a modeled treatment column is
        // sampled (keeping the draw sequence stable) and then forced to 0
        if (j < n_cov) out.cols[j].push_back(value);
    }
    SurvivalParams eta_t, eta_c;
    decode_survival(m, y, s, eta_t, eta_c);
    const double tau_star = sample_survival_time(m, eta_t, rng);
    const double c_star = sample_survival_time(m, eta_c, rng);
    out.time.push_back(std::max(1e-9, std::min(tau_star, c_star)));
    out.event.push_back(tau_star <= c_star ? 1 : 0);
    out.treatment.push_back(0);
}

TrialDataset empty_like(const HiVaeModel& m) {
    TrialDataset out;
    out.schema = m.schema;
    out.cols.assign(m.schema.covariates.size(), {});
    return out;
}

}  // namespace

TrialDataset sample_posterior(const HiVaeModel& m, const TrialDataset& source, int n_out,
                              std::uint64_t seed, bool identity_debug) {
    if (n_out < 1) throw ValidationError("n_out must be >= 1");
    if (source.n_rows() == 0) throw ValidationError("source dataset is empty");
    if (schema_fingerprint(source.schema) != schema_fingerprint(m.schema))
        throw ValidationError("source schema does not match the model");

    Rng sched(derive_seed(seed, "schedule"));
    std::vector<std::size_t> order;
    order.reserve(static_cast<std::size_t>(n_out));
    std::vector<std::size_t> base(source.n_rows());
    std::iota(base.begin(), base.end(), std::size_t{0});
    while (order.size() < static_cast<std::size_t>(n_out)) {
        auto perm = base;
        sched.shuffle(perm);
        for (std::size_t i : perm) {
            if (order.size() == static_cast<std::size_t>(n_out)) break;
            order.push_back(i);
        }
    }
    if (identity_debug) return take_rows(source, order);

    Rng rng(derive_seed(seed, "draw"));
    TrialDataset out = empty_like(m);
    const auto K = static_cast<std::size_t>(m.cfg.z_dim);
    for (std::size_t i : order) {
        const auto er = encode_row(m, source, static_cast<int>(i));
        const int s = static_cast<int>(rng.categorical(er.pi));
        std::vector<double> z(K);
        for (std::size_t k = 0; k < K; ++k)
            z[k] = er.mu.at(static_cast<std::size_t>(s), k) +
                   std::sqrt(er.var.at(static_cast<std::size_t>(s), k)) * rng.normal();
        append_sampled_row(m, z, s, rng, out);
    }
    return out;
}

TrialDataset sample_prior(const HiVaeModel& m, int n_out, std::uint64_t seed) {
    if (n_out < 1) throw ValidationError("n_out must be >= 1");
    Rng rng(derive_seed(seed, "draw"));
    TrialDataset out = empty_like(m);
    const auto K = static_cast<std::size_t>(m.cfg.z_dim);
    const Mat& prior = m.params.get("prior_mu");
    for (int i = 0; i < n_out; ++i) {
        const int s = static_cast<int>(rng.below(static_cast<std::size_t>(m.cfg.s_dim)));
        std::vector<double> z(K);
        for (std::size_t k = 0; k < K; ++k)
            z[k] = prior.at(static_cast<std::size_t>(s), k) + rng.normal();
        append_sampled_row(m, z, s, rng, out);
    }
    return out;
}

void save_model(const HiVaeModel& m, const std::string& path) {
    {
        std::ofstream f(path);
        if (!f) throw ValidationError("cannot write '" + path + "'");
        f << nn::params_to_json(m.params);
    }
    json meta;
    meta["format"] = "synthtrial-hivae-meta";
    meta["version"] = 1;
    meta["schema"] = json::parse(manifest_to_json(m.schema));
    meta["schema_fingerprint"] = schema_fingerprint(m.schema);
    meta["config"] = config_to_json_obj(m.cfg);
    meta["includes_treatment"] = m.includes_treatment;
    json norms = json::array();
    for (const auto& nmr : m.norms) norms.push_back({{"mean", nmr.mean}, {"sd", nmr.sd}});
    meta["feature_norms"] = norms;
    meta["time_norm"] = {{"log_mean", m.time_norm.log_mean},
                         {"log_sd", m.time_norm.log_sd},
                         {"scale", m.time_norm.scale},
                         {"bounds", m.time_norm.bounds}};
    std::ofstream f(path + ".meta.json");
    if (!f) throw ValidationError("cannot write '" + path + ".meta.json'");
    f << meta.dump(2) << "\n";
}

HiVaeModel load_model(const std::string& path) {
    auto read_file = [](const std::string& p) {
        std::ifstream f(p);
        if (!f) throw ValidationError("cannot read '" + p + "'");
        std::ostringstream ss;
        ss << f.rdbuf();
        return ss.str();
    };
    HiVaeModel m;
    m.params = nn::params_from_json(read_file(path));
    json meta;
    try {
        meta = json::parse(read_file(path + ".meta.json"));
    } catch (const json::exception& e) {
        throw ValidationError(std::string("invalid model sidecar: ") + e.what());
    }
    try {
        if (meta.at("format").get<std::string>() != "synthtrial-hivae-meta")
            throw ValidationError("not a model sidecar file");
        if (meta.at("version").get<int>() != 1)
            throw ValidationError("unsupported model sidecar version");
        m.schema = manifest_from_json(meta.at("schema").dump());
        m.cfg = hivae_config_from_json(meta.at("config").dump());
        m.includes_treatment = meta.at("includes_treatment").get<bool>();
        m.norms.clear();
        for (const auto& jn : meta.at("feature_norms"))
            m.norms.push_back(
                FeatureNorm{jn.at("mean").get<double>(), jn.at("sd").get<double>()});
        const auto& tn = meta.at("time_norm");
        m.time_norm.log_mean = tn.at("log_mean").get<double>();
        m.time_norm.log_sd = tn.at("log_sd").get<double>();
        m.time_norm.scale = tn.at("scale").get<double>();
        m.time_norm.bounds = tn.at("bounds").get<std::vector<double>>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("invalid model sidecar: ") + e.what());
    }
    if (m.norms.size() != m.model_features().size())
        throw ValidationError("model sidecar norms do not match the schema");
    return m;
}

}  // namespace synthtrial
