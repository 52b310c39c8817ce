#include "synthtrial/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "json.hpp"
#include "synthtrial/survstats.hpp"

namespace synthtrial {

using json = nlohmann::json;
using nn::Mat;

namespace {

void check_pair(const TrialDataset& real, const TrialDataset& synth) {
    if (real.n_rows() == 0) throw ValidationError("real dataset is empty");
    if (synth.n_rows() == 0) throw ValidationError("synthetic dataset is empty");
    if (schema_fingerprint(real.schema) != schema_fingerprint(synth.schema))
        throw ValidationError("real and synthetic datasets have different schemas");
}

double js_div_base2(const std::vector<double>& pc, const std::vector<double>& qc) {
    double psum = std::accumulate(pc.begin(), pc.end(), 0.0);
    double qsum = std::accumulate(qc.begin(), qc.end(), 0.0);
    double d = 0.0;
    for (std::size_t i = 0; i < pc.size(); ++i) {
        const double p = pc[i] / psum;
        const double q = qc[i] / qsum;
        const double m = 0.5 * (p + q);
        if (p > 0.0) d += 0.5 * p * std::log2(p / m);
        if (q > 0.0) d += 0.5 * q * std::log2(q / m);
    }
    if (d < 0.0) d = 0.0;
    if (d > 1.0) d = 1.0;
    return d;
}

double ecdf_sup_diff(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < a.size() || j < b.size()) {
        double x;
        if (j >= b.size() || (i < a.size() && a[i] <= b[j]))
            x = a[i];
        else
            x = b[j];
        while (i < a.size() && a[i] <= x) ++i;
        while (j < b.size() && b[j] <= x) ++j;
        d = std::max(d, std::fabs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
    }
    return d;
}

// One-hot + standardized design space. Numeric columns (covariates and time)
// are standardized by the reference dataset's statistics; one-hot and event
// columns stay 0/1.
struct FeatureSpace {
    std::vector<int> source;        // covariate index, -1 = time, -2 = event
    std::vector<int> level;         // categorical level for one-hot columns, else -1
    std::vector<double> mean, sd;   // identity transform encoded as (0, 1)
};

FeatureSpace make_feature_space(const TrialDataset& reference) {
    FeatureSpace fs;
    auto mean_sd = [](const std::vector<double>& v) {
        const double mean =
            std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        double ss = 0.0;
        for (double x : v) ss += (x - mean) * (x - mean);
        double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
        return std::pair<double, double>(mean, sd > 1e-12 ? sd : 1.0);
    };
    const auto& covs = reference.schema.covariates;
    for (std::size_t j = 0; j < covs.size(); ++j) {
        if (covs[j].kind == FeatureKind::Categorical) {
            for (std::size_t l = 0; l < covs[j].levels.size(); ++l) {
                fs.source.push_back(static_cast<int>(j));
                fs.level.push_back(static_cast<int>(l));
                fs.mean.push_back(0.0);
                fs.sd.push_back(1.0);
            }
        } else {
            auto [m, s] = mean_sd(reference.cols[j]);
            fs.source.push_back(static_cast<int>(j));
            fs.level.push_back(-1);
            fs.mean.push_back(m);
            fs.sd.push_back(s);
        }
    }
    auto [tm, ts] = mean_sd(reference.time);
    fs.source.push_back(-1);
    fs.level.push_back(-1);
    fs.mean.push_back(tm);
    fs.sd.push_back(ts);
    fs.source.push_back(-2);
    fs.level.push_back(-1);
    fs.mean.push_back(0.0);
    fs.sd.push_back(1.0);
    return fs;
}

Mat feature_matrix(const FeatureSpace& fs, const TrialDataset& d) {
    const auto n = d.n_rows();
    Mat x(n, fs.source.size());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < fs.source.size(); ++c) {
            double v;
            if (fs.source[c] == -1)
                v = d.time[i];
            else if (fs.source[c] == -2)
                v = static_cast<double>(d.event[i]);
            else
                v = d.cols[static_cast<std::size_t>(fs.source[c])][i];
            if (fs.level[c] >= 0)
                v = v == static_cast<double>(fs.level[c]) ? 1.0 : 0.0;
            x.at(i, c) = (v - fs.mean[c]) / fs.sd[c];
        }
    }
    return x;
}

double row_dist2(const Mat& a, std::size_t i, const Mat& b, std::size_t j) {
    double acc = 0.0;
    for (std::size_t c = 0; c < a.cols; ++c) {
        const double d = a.at(i, c) - b.at(j, c);
        acc += d * d;
    }
    return acc;
}

}  // namespace

double js_distance(const TrialDataset& real, const TrialDataset& synth, int bins) {
    check_pair(real, synth);
    if (bins < 1) throw ValidationError("bins must be >= 1");
    const auto& covs = real.schema.covariates;
    if (covs.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t j = 0; j < covs.size(); ++j) {
        std::vector<double> p, q;
        if (covs[j].kind == FeatureKind::Categorical) {
            p.assign(covs[j].levels.size(), 0.0);
            q.assign(covs[j].levels.size(), 0.0);
            for (double v : real.cols[j]) p[static_cast<std::size_t>(v)] += 1.0;
            for (double v : synth.cols[j]) q[static_cast<std::size_t>(v)] += 1.0;
        } else {
            double lo = std::numeric_limits<double>::infinity(), hi = -lo;
            for (double v : real.cols[j]) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            for (double v : synth.cols[j]) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            const auto nb = static_cast<std::size_t>(bins);
            p.assign(nb, 0.0);
            q.assign(nb, 0.0);
            const double width = (hi - lo) / bins;
            auto bin_of = [&](double v) {
                if (width <= 0.0) return std::size_t{0};
                auto b = static_cast<std::size_t>((v - lo) / width);
                return std::min(b, nb - 1);
            };
            for (double v : real.cols[j]) p[bin_of(v)] += 1.0;
            for (double v : synth.cols[j]) q[bin_of(v)] += 1.0;
        }
        total += js_div_base2(p, q);
    }
    return total / static_cast<double>(covs.size());
}

std::optional<double> ks_score(const TrialDataset& real, const TrialDataset& synth) {
    check_pair(real, synth);
    const auto& covs = real.schema.covariates;
    double total = 0.0;
    int used = 0;
    for (std::size_t j = 0; j < covs.size(); ++j) {
        if (covs[j].kind == FeatureKind::Categorical) continue;
        total += 1.0 - ecdf_sup_diff(real.cols[j], synth.cols[j]);
        ++used;
    }
    if (used == 0) return std::nullopt;
    return total / used;
}

double survival_distance(const TrialDataset& real, const TrialDataset& synth) {
    if (real.n_rows() == 0 || synth.n_rows() == 0)
        throw ValidationError("survival_distance needs at least one subject per arm");
    const auto km1 = kaplan_meier(real.time, real.event);
    const auto km2 = kaplan_meier(synth.time, synth.event);
    const double t1 = *std::max_element(real.time.begin(), real.time.end());
    const double t2 = *std::max_element(synth.time.begin(), synth.time.end());
    const double horizon = std::min(t1, t2);
    if (!(horizon > 0.0)) throw ValidationError("survival_distance range is degenerate");
    std::vector<double> grid{0.0, horizon};
    for (const auto& pt : km1)
        if (pt.time < horizon) grid.push_back(pt.time);
    for (const auto& pt : km2)
        if (pt.time < horizon) grid.push_back(pt.time);
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    double integral = 0.0;
    for (std::size_t g = 0; g + 1 < grid.size(); ++g)
        integral += std::fabs(km_eval(km1, grid[g]) - km_eval(km2, grid[g])) *
                    (grid[g + 1] - grid[g]);
    return integral / horizon;
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size() || scores.empty())
        throw ValidationError("roc_auc needs matching nonempty scores and labels");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double n1 = 0.0, n0 = 0.0, rank_sum = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t k = i; k < j; ++k) {
            if (labels[idx[k]] == 1) {
                rank_sum += avg_rank;
                n1 += 1.0;
            } else {
                n0 += 1.0;
            }
        }
        i = j;
    }
    if (n1 == 0.0 || n0 == 0.0) throw ValidationError("roc_auc needs both classes");
    return (rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0);
}

namespace {

struct TreeNode {
    int feature = -1;
    double thr = 0.0;
    double value = 0.0;
    int left = -1, right = -1;
};

struct Tree {
    std::vector<TreeNode> nodes;

    double predict(const Mat& x, std::size_t row) const {
        int id = 0;
        while (nodes[static_cast<std::size_t>(id)].feature >= 0) {
            const auto& nd = nodes[static_cast<std::size_t>(id)];
            id = x.at(row, static_cast<std::size_t>(nd.feature)) <= nd.thr ? nd.left : nd.right;
        }
        return nodes[static_cast<std::size_t>(id)].value;
    }
};

int build_tree(Tree& tree, const Mat& x, const std::vector<double>& g,
               const std::vector<double>& h, std::vector<std::size_t>& rows, int depth,
               double l2) {
    double gsum = 0.0, hsum = 0.0;
    for (std::size_t r : rows) {
        gsum += g[r];
        hsum += h[r];
    }
    auto make_leaf = [&]() {
        TreeNode leaf;
        leaf.value = -gsum / (hsum + l2);
        tree.nodes.push_back(leaf);
        return static_cast<int>(tree.nodes.size()) - 1;
    };
    if (depth == 0 || rows.size() < 2) return make_leaf();

    const double parent_obj = gsum * gsum / (hsum + l2);
    double best_gain = 1e-12;
    int best_feature = -1;
    double best_thr = 0.0;
    std::vector<std::size_t> order(rows);
    for (std::size_t f = 0; f < x.cols; ++f) {
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return x.at(a, f) < x.at(b, f);
        });
        double gl = 0.0, hl = 0.0;
        for (std::size_t k = 0; k + 1 < order.size(); ++k) {
            gl += g[order[k]];
            hl += h[order[k]];
            const double xv = x.at(order[k], f), xn = x.at(order[k + 1], f);
            if (xv == xn) continue;
            const double gr = gsum - gl, hr = hsum - hl;
            const double gain =
                gl * gl / (hl + l2) + gr * gr / (hr + l2) - parent_obj;
            if (gain > best_gain) {
                best_gain = gain;
                best_feature = static_cast<int>(f);
                best_thr = 0.5 * (xv + xn);
            }
        }
    }
    if (best_feature < 0) return make_leaf();

    std::vector<std::size_t> left, right;
    for (std::size_t r : rows)
        (x.at(r, static_cast<std::size_t>(best_feature)) <= best_thr ? left : right).push_back(r);
    const int self = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    tree.nodes[static_cast<std::size_t>(self)].feature = best_feature;
    tree.nodes[static_cast<std::size_t>(self)].thr = best_thr;
    const int l = build_tree(tree, x, g, h, left, depth - 1, l2);
    const int r = build_tree(tree, x, g, h, right, depth - 1, l2);
    tree.nodes[static_cast<std::size_t>(self)].left = l;
    tree.nodes[static_cast<std::size_t>(self)].right = r;
    return self;
}

}  // namespace

std::vector<double> BoostedTreesClassifier::fit_score(const Mat& x_train,
                                                      const std::vector<int>& y_train,
                                                      const Mat& x_test, std::uint64_t) {
    if (x_train.rows != y_train.size() || x_train.rows == 0)
        throw ValidationError("classifier needs matching nonempty training data");
    const auto n = x_train.rows;
    double pos = 0.0;
    for (int y : y_train) pos += y;
    const double p0 = std::clamp(pos / static_cast<double>(n), 1e-6, 1.0 - 1e-6);
    const double f0 = std::log(p0 / (1.0 - p0));

    std::vector<double> f(n, f0), g(n), h(n);
    std::vector<Tree> forest;
    forest.reserve(static_cast<std::size_t>(rounds));
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    for (int r = 0; r < rounds; ++r) {
        for (std::size_t i = 0; i < n; ++i) {
            const double s = 1.0 / (1.0 + std::exp(-f[i]));
            g[i] = s - static_cast<double>(y_train[i]);
            h[i] = std::max(s * (1.0 - s), 1e-12);
        }
        Tree tree;
        auto rows = all;
        build_tree(tree, x_train, g, h, rows, max_depth, l2);
        for (std::size_t i = 0; i < n; ++i) f[i] += learning_rate * tree.predict(x_train, i);
        forest.push_back(std::move(tree));
    }
    std::vector<double> scores(x_test.rows, f0);
    for (std::size_t i = 0; i < x_test.rows; ++i)
        for (const auto& tree : forest) scores[i] += learning_rate * tree.predict(x_test, i);
    return scores;
}

double detection_auc(const TrialDataset& real, const TrialDataset& synth, int folds,
                     std::uint64_t seed, DetectionClassifier* classifier,
                     std::vector<std::string>* notices) {
    check_pair(real, synth);
    if (folds < 2) throw ValidationError("detection_auc needs folds >= 2");
    auto note = [&](const std::string& s) {
        if (notices != nullptr) notices->push_back(s);
    };
    const double nr = static_cast<double>(real.n_rows());
    const double ns = static_cast<double>(synth.n_rows());
    if (std::max(nr, ns) / std::min(nr, ns) > 10.0)
        note("detection_auc: class imbalance exceeds 1:10");

    const auto fs = make_feature_space(real);
    const Mat xr = feature_matrix(fs, real);
    const Mat xs = feature_matrix(fs, synth);
    const auto n_total = xr.rows + xs.rows;
    Mat x(n_total, xr.cols);
    std::vector<int> y(n_total);
    for (std::size_t i = 0; i < xr.rows; ++i) {
        for (std::size_t c = 0; c < xr.cols; ++c) x.at(i, c) = xr.at(i, c);
        y[i] = 0;
    }
    for (std::size_t i = 0; i < xs.rows; ++i) {
        for (std::size_t c = 0; c < xs.cols; ++c) x.at(xr.rows + i, c) = xs.at(i, c);
        y[xr.rows + i] = 1;
    }

    // stratified fold ids: shuffle each class, deal round-robin
    std::vector<int> fold(n_total, 0);
    for (int cls = 0; cls < 2; ++cls) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < n_total; ++i)
            if (y[i] == cls) members.push_back(i);
        Rng rng(derive_seed(seed, cls == 0 ? "folds-real" : "folds-synthetic"));
        rng.shuffle(members);
        for (std::size_t k = 0; k < members.size(); ++k)
            fold[members[k]] = static_cast<int>(k % static_cast<std::size_t>(folds));
    }

    BoostedTreesClassifier default_clf;
    DetectionClassifier* clf = classifier != nullptr ? classifier : &default_clf;
    double total = 0.0;
    int used = 0;
    for (int f = 0; f < folds; ++f) {
        std::vector<std::size_t> train_rows, test_rows;
        for (std::size_t i = 0; i < n_total; ++i)
            (fold[i] == f ? test_rows : train_rows).push_back(i);
        bool test_both = false, train_both = false;
        {
            int t0 = 0, t1 = 0, r0 = 0, r1 = 0;
            for (std::size_t i : test_rows) (y[i] == 0 ? t0 : t1) += 1;
            for (std::size_t i : train_rows) (y[i] == 0 ? r0 : r1) += 1;
            test_both = t0 > 0 && t1 > 0;
            train_both = r0 > 0 && r1 > 0;
        }
        if (!test_both || !train_both) {
            note("detection_auc: fold " + std::to_string(f) + " skipped (single-class split)");
            continue;
        }
        Mat xtr(train_rows.size(), x.cols), xte(test_rows.size(), x.cols);
        std::vector<int> ytr(train_rows.size()), yte(test_rows.size());
        for (std::size_t i = 0; i < train_rows.size(); ++i) {
            for (std::size_t c = 0; c < x.cols; ++c) xtr.at(i, c) = x.at(train_rows[i], c);
            ytr[i] = y[train_rows[i]];
        }
        for (std::size_t i = 0; i < test_rows.size(); ++i) {
            for (std::size_t c = 0; c < x.cols; ++c) xte.at(i, c) = x.at(test_rows[i], c);
            yte[i] = y[test_rows[i]];
        }
        const auto scores = clf->fit_score(xtr, ytr, xte, derive_seed(seed, "fold", f));
        total += roc_auc(scores, yte);
        ++used;
    }
    if (used == 0) {
        note("detection_auc: no usable folds, returning 0.5");
        return 0.5;
    }
    return total / used;
}

KMapResult k_map(const TrialDataset& real, const TrialDataset& synth,
                 const std::vector<std::string>& quasi_identifiers, int bins) {
    check_pair(real, synth);
    if (quasi_identifiers.empty()) throw ValidationError("empty quasi-identifier set");
    if (bins < 1) throw ValidationError("bins must be >= 1");
    std::vector<int> cols;
    std::vector<std::vector<double>> edges;  // per QI, empty for categoricals
    for (const auto& name : quasi_identifiers) {
        const int j = real.schema.index_of(name);
        if (j < 0) throw ValidationError("unknown quasi-identifier column '" + name + "'");
        cols.push_back(j);
        if (real.schema.covariates[static_cast<std::size_t>(j)].kind ==
            FeatureKind::Categorical) {
            edges.emplace_back();
        } else {
            auto sorted = real.cols[static_cast<std::size_t>(j)];
            std::sort(sorted.begin(), sorted.end());
            std::vector<double> e;
            for (int b = 1; b < bins; ++b)
                e.push_back(quantile_sorted(sorted, static_cast<double>(b) / bins));
            edges.push_back(std::move(e));
        }
    }
    auto key_of = [&](const TrialDataset& d, std::size_t row) {
        std::vector<int> key(cols.size());
        for (std::size_t q = 0; q < cols.size(); ++q) {
            const double v = d.cols[static_cast<std::size_t>(cols[q])][row];
            if (edges[q].empty())
                key[q] = static_cast<int>(v);
            else
                key[q] = static_cast<int>(
                    std::upper_bound(edges[q].begin(), edges[q].end(), v) - edges[q].begin());
        }
        return key;
    };
    std::map<std::vector<int>, long> counts;
    for (std::size_t i = 0; i < synth.n_rows(); ++i) counts[key_of(synth, i)] += 1;
    KMapResult res;
    long matched = 0;
    double sum = 0.0;
    for (std::size_t i = 0; i < real.n_rows(); ++i) {
        const auto it = counts.find(key_of(real, i));
        const long c = it == counts.end() ? 0 : it->second;
        if (c == 0) {
            res.zero_matches += 1;
            continue;
        }
        if (matched == 0 || c < res.k_min) res.k_min = c;
        sum += static_cast<double>(c);
        ++matched;
    }
    res.defined = matched > 0;
    res.mean = matched > 0 ? sum / static_cast<double>(matched) : 0.0;
    return res;
}

NndrResult nndr(const TrialDataset& real, const TrialDataset& synth) {
    check_pair(real, synth);
    if (real.n_rows() < 2) throw ValidationError("nndr needs at least 2 real records");
    const auto fs = make_feature_space(real);
    const Mat xr = feature_matrix(fs, real);
    const Mat xs = feature_matrix(fs, synth);
    NndrResult res;
    double acc = 0.0;
    long used = 0;
    for (std::size_t i = 0; i < xr.rows; ++i) {
        double d_syn = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < xs.rows; ++j) d_syn = std::min(d_syn, row_dist2(xr, i, xs, j));
        double d_real = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < xr.rows; ++k)
            if (k != i) d_real = std::min(d_real, row_dist2(xr, i, xr, k));
        if (d_real == 0.0) {
            res.skipped += 1;
            continue;
        }
        double ratio = std::sqrt(d_syn) / std::sqrt(d_real);
        ratio = std::clamp(ratio, 0.0, 1.0);
        acc += ratio;
        ++used;
    }
    if (used == 0) throw NumericalError("nndr: every real record has a zero-distance duplicate");
    res.value = acc / static_cast<double>(used);
    return res;
}

MetricsReport evaluate_metrics(const TrialDataset& real, const TrialDataset& synth,
                               const MetricsOptions& opt) {
    MetricsReport rep;
    rep.js_distance = js_distance(real, synth, opt.histogram_bins);
    if (const auto ks = ks_score(real, synth)) {
        rep.has_ks_score = true;
        rep.ks_score = *ks;
    } else {
        rep.notices.push_back("ks_score omitted: no numeric covariate columns");
    }
    rep.survival_distance = survival_distance(real, synth);
    rep.detection_auc =
        detection_auc(real, synth, opt.detection_folds, opt.seed, nullptr, &rep.notices);
    if (opt.quasi_identifiers.empty()) {
        rep.notices.push_back("k_map omitted: no quasi-identifiers provided");
    } else {
        const auto km = k_map(real, synth, opt.quasi_identifiers, opt.discretize_bins);
        rep.has_k_map = km.defined;
        rep.k_map = km.k_min;
        rep.k_map_mean = km.mean;
        rep.k_map_zero_matches = km.zero_matches;
        if (!km.defined)
            rep.notices.push_back("k_map undefined: no real record matched the synthetic support");
        if (km.zero_matches > 0)
            rep.notices.push_back("k_map: " + std::to_string(km.zero_matches) +
                                  " real record(s) have no synthetic match");
    }
    const auto nd = nndr(real, synth);
    rep.nndr = nd.value;
    rep.nndr_skipped = nd.skipped;
    if (nd.skipped > 0)
        rep.notices.push_back("nndr: " + std::to_string(nd.skipped) +
                              " duplicate real record(s) skipped");
    return rep;
}

std::string metrics_report_to_json(const MetricsReport& rep) {
    json j;
    j["js_distance"] = rep.js_distance;
    if (rep.has_ks_score)
        j["ks_score"] = rep.ks_score;
    else
        j["ks_score"] = nullptr;
    j["survival_distance"] = rep.survival_distance;
    j["detection_auc"] = rep.detection_auc;
    if (rep.has_k_map) {
        j["k_map"] = rep.k_map;
        j["k_map_mean"] = rep.k_map_mean;
    } else {
        j["k_map"] = nullptr;
        j["k_map_mean"] = nullptr;
    }
    j["k_map_zero_matches"] = rep.k_map_zero_matches;
    j["nndr"] = rep.nndr;
    j["nndr_skipped"] = rep.nndr_skipped;
    j["notices"] = rep.notices;
    return j.dump(2);
}

}  // namespace synthtrial
