#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "synthtrial/dataset.hpp"
#include "synthtrial/metrics.hpp"
#include "synthtrial/simulate.hpp"

using namespace synthtrial;

namespace {

// one categorical covariate with the given level codes
TrialDataset cat_dataset(const std::vector<double>& codes, int n_levels = 2) {
    TrialDataset ds;
    ColumnSpec spec;
    spec.name = "grp";
    spec.kind = FeatureKind::Categorical;
    for (int l = 0; l < n_levels; ++l) spec.levels.push_back(std::to_string(l));
    ds.schema.covariates = {spec};
    ds.cols = {codes};
    ds.treatment.assign(codes.size(), 0);
    ds.time.assign(codes.size(), 1.0);
    ds.event.assign(codes.size(), 1);
    return ds;
}

// one real covariate
TrialDataset real_dataset(const std::vector<double>& values) {
    TrialDataset ds;
    ds.schema.covariates = {{"x", FeatureKind::Real, {}}};
    ds.cols = {values};
    ds.treatment.assign(values.size(), 0);
    ds.time.assign(values.size(), 1.0);
    ds.event.assign(values.size(), 1);
    return ds;
}

TrialDataset survival_dataset(const std::vector<double>& times, const std::vector<int>& events) {
    TrialDataset ds;
    ds.schema.covariates = {{"x", FeatureKind::Real, {}}};
    ds.cols = {std::vector<double>(times.size(), 0.0)};
    ds.treatment.assign(times.size(), 0);
    ds.time = times;
    ds.event = events;
    return ds;
}

// jensen-shannon divergence in bits over two finite distributions
double js_bits(const std::vector<double>& p, const std::vector<double>& q) {
    double out = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0) out += 0.5 * p[i] * std::log2(p[i] / m);
        if (q[i] > 0) out += 0.5 * q[i] * std::log2(q[i] / m);
    }
    return out;
}

}  // namespace

TEST_CASE("js distance is zero on a copy and one on disjoint supports") {
    const auto real = cat_dataset({0, 1, 0, 1, 0, 1});
    CHECK(js_distance(real, real) == doctest::Approx(0.0).epsilon(1e-14));

    const auto zeros = cat_dataset({0, 0, 0, 0});
    const auto ones = cat_dataset({1, 1, 1, 1});
    CHECK(js_distance(zeros, ones) == doctest::Approx(1.0).epsilon(1e-12));

    // numeric columns: equal-width bins over the pooled range
    const auto low = real_dataset({0.0, 0.1, 0.2, 0.3});
    const auto high = real_dataset({10.0, 10.1, 10.2, 10.3});
    CHECK(js_distance(low, high) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("js distance matches the closed form on a skewed binary column") {
    // real 50/50 over 10 rows, synthetic 90/10 over 10 rows
    const auto real = cat_dataset({0, 1, 0, 1, 0, 1, 0, 1, 0, 1});
    const auto synth = cat_dataset({0, 0, 0, 0, 0, 0, 0, 0, 0, 1});
    const double want = js_bits({0.5, 0.5}, {0.9, 0.1});
    CHECK(js_distance(real, synth) == doctest::Approx(want).epsilon(1e-12));
    // symmetric by construction
    CHECK(js_distance(synth, real) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("ks score averages one minus the ecdf gap") {
    const auto a = real_dataset({1, 2, 3});
    const auto b = real_dataset({1.5, 2.5, 3.5});
    const auto same = ks_score(a, a);
    REQUIRE(same.has_value());
    CHECK(*same == doctest::Approx(1.0).epsilon(1e-14));

    const auto shifted = ks_score(a, b);
    REQUIRE(shifted.has_value());
    CHECK(*shifted == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

    const auto far = ks_score(a, real_dataset({100, 101, 102}));
    CHECK(*far == doctest::Approx(0.0).epsilon(1e-12));

    // no numeric covariates: undefined
    const auto cat = cat_dataset({0, 1});
    CHECK_FALSE(ks_score(cat, cat).has_value());
}

TEST_CASE("survival distance integrates the gap between km curves") {
    const auto real = survival_dataset({2, 2, 2}, {0, 0, 0});  // S = 1 throughout
    const auto synth = survival_dataset({1, 2}, {1, 0});       // S drops to 1/2 at t=1
    // |1 - S| is 0 on [0,1) and 1/2 on [1,2]; integral 0.5 over range 2
    CHECK(survival_distance(real, synth) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(survival_distance(synth, real) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(survival_distance(real, real) == doctest::Approx(0.0).epsilon(1e-14));
}

TEST_CASE("roc auc counts pairs with half credit for ties") {
    CHECK(roc_auc({0.1, 0.4, 0.35, 0.8}, {0, 1, 0, 1}) == doctest::Approx(1.0));
    CHECK(roc_auc({0.8, 0.1, 0.9, 0.2}, {0, 1, 0, 1}) == doctest::Approx(0.0));
    CHECK(roc_auc({0.5, 0.5, 0.2, 0.8}, {1, 0, 0, 1}) == doctest::Approx(0.875));
    CHECK(roc_auc({0.3, 0.3, 0.3, 0.3}, {1, 0, 1, 0}) == doctest::Approx(0.5));
}

TEST_CASE("detection auc cannot tell two halves of one sample apart") {
    auto cfg = SimConfig::defaults();
    cfg.n = 400;
    cfg.lambda_c = 1.0;
    const auto trial = simulate_trial(cfg, 606);
    std::vector<std::size_t> first, second;
    for (std::size_t i = 0; i < trial.n_rows(); ++i)
        (i < trial.n_rows() / 2 ? first : second).push_back(i);
    const auto a = take_rows(trial, first);
    const auto b = take_rows(trial, second);
    const double auc = detection_auc(a, b, 5, 42);
    CHECK(auc > 0.4);
    CHECK(auc < 0.6);
}

TEST_CASE("detection auc flags a shifted synthetic sample") {
    auto cfg = SimConfig::defaults();
    cfg.n = 300;
    cfg.lambda_c = 1.0;
    const auto real = simulate_trial(cfg, 607);
    auto synth = simulate_trial(cfg, 608);
    for (std::size_t j = 0; j < synth.cols.size(); ++j) {
        if (synth.schema.covariates[j].kind != FeatureKind::Real) continue;
        for (auto& v : synth.cols[j]) v += 10.0;
    }
    CHECK(detection_auc(real, synth, 5, 42) > 0.95);
}

TEST_CASE("k map counts synthetic matches of real quasi-identifier combos") {
    SUBCASE("copy of unique rows gives k = 1") {
        const auto real = cat_dataset({0, 1}, 2);
        const auto r = k_map(real, real, {"grp"});
        CHECK(r.defined);
        CHECK(r.k_min == 1);
        CHECK(r.mean == doctest::Approx(1.0));
        CHECK(r.zero_matches == 0);
    }
    SUBCASE("eleven-fold replication gives k = 11") {
        auto cfg = SimConfig::defaults();
        cfg.n = 40;
        cfg.lambda_c = 1.0;
        const auto real = simulate_trial(cfg, 99);
        TrialDataset synth = real;
        for (int k = 1; k < 11; ++k) synth = concat_rows(synth, real);
        const auto r = k_map(real, synth, {"x1", "x2", "x7"});
        CHECK(r.defined);
        CHECK(r.k_min >= 11);
    }
    SUBCASE("hand instance with a missing combination") {
        TrialDataset real;
        real.schema.covariates = {{"a", FeatureKind::Categorical, {"0", "1"}},
                                  {"b", FeatureKind::Categorical, {"0", "1"}}};
        real.cols = {{0, 0, 1}, {0, 1, 0}};  // combos (0,0), (0,1), (1,0)
        real.treatment = {0, 0, 0};
        real.time = {1, 1, 1};
        real.event = {1, 1, 1};
        TrialDataset synth = real;
        synth.cols = {{0, 0, 0, 1}, {0, 0, 0, 1}};  // (0,0) x3, (1,1) x1
        synth.treatment = {0, 0, 0, 0};
        synth.time = {1, 1, 1, 1};
        synth.event = {1, 1, 1, 1};
        const auto r = k_map(real, synth, {"a", "b"});
        CHECK(r.defined);
        CHECK(r.k_min == 3);      // only the (0,0) records match
        CHECK(r.zero_matches == 2);  // (0,1) and (1,0) have no synthetic twin
        CHECK(r.mean == doctest::Approx(3.0));
    }
    SUBCASE("row order of the synthetic data is irrelevant") {
        auto cfg = SimConfig::defaults();
        cfg.n = 30;
        cfg.lambda_c = 1.0;
        const auto real = simulate_trial(cfg, 100);
        const auto synth = simulate_trial(cfg, 101);
        std::vector<std::size_t> reversed(synth.n_rows());
        for (std::size_t i = 0; i < reversed.size(); ++i)
            reversed[i] = synth.n_rows() - 1 - i;
        const auto a = k_map(real, synth, {"x1", "x7"});
        const auto b = k_map(real, take_rows(synth, reversed), {"x1", "x7"});
        CHECK(a.defined == b.defined);
        CHECK(a.k_min == b.k_min);
        CHECK(a.mean == doctest::Approx(b.mean));
        CHECK(a.zero_matches == b.zero_matches);
    }
    SUBCASE("unknown quasi-identifier is rejected") {
        const auto real = cat_dataset({0, 1});
        CHECK_THROWS_AS(k_map(real, real, {"nope"}), ValidationError);
    }
}

TEST_CASE("nndr measures synthetic closeness relative to real spacing") {
    SUBCASE("an exact copy scores zero") {
        const auto real = real_dataset({0.0, 1.0, 2.5, 4.0});
        const auto r = nndr(real, real);
        CHECK(r.value == doctest::Approx(0.0).epsilon(1e-14));
        CHECK(r.skipped == 0);
    }
    SUBCASE("distant synthetic data clips to one") {
        const auto real = real_dataset({0.0, 1.0, 2.0});
        const auto far = real_dataset({50.0, 60.0, 70.0});
        CHECK(nndr(real, far).value == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("hand arithmetic on one dimension") {
        // ratios are scale-free in one dimension, so standardization drops out:
        // real 0: synth at 0.25 vs other real at 1 -> 0.25
        // real 1: synth at 0.75 away vs other real at 1 -> 0.75
        const auto real = real_dataset({0.0, 1.0});
        const auto synth = real_dataset({0.25});
        CHECK(nndr(real, synth).value == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("duplicated synthetic rows change nothing") {
        const auto real = real_dataset({0.0, 1.0});
        const auto synth = real_dataset({0.25});
        const auto doubled = real_dataset({0.25, 0.25, 0.25});
        CHECK(nndr(real, synth).value == doctest::Approx(nndr(real, doubled).value));
    }
    SUBCASE("duplicate real records are skipped, not divided by zero") {
        const auto real = real_dataset({0.0, 0.0, 1.0});
        const auto synth = real_dataset({0.5});
        const auto r = nndr(real, synth);
        CHECK(r.skipped == 2);
        // the surviving record: synth at 0.5 vs other real at 1.0
        CHECK(r.value == doctest::Approx(0.5).epsilon(1e-12));
    }
}

TEST_CASE("evaluate metrics assembles every section") {
    auto cfg = SimConfig::defaults();
    cfg.n = 200;
    cfg.lambda_c = 1.0;
    const auto real = simulate_trial(cfg, 801);
    const auto synth = simulate_trial(cfg, 802);

    MetricsOptions opt;
    opt.quasi_identifiers = {"x1", "x7"};
    opt.seed = 7;
    const auto rep = evaluate_metrics(real, synth, opt);
    CHECK(rep.js_distance >= 0.0);
    CHECK(rep.js_distance <= 1.0);
    CHECK(rep.has_ks_score);
    CHECK(rep.ks_score > 0.0);
    CHECK(rep.survival_distance >= 0.0);
    CHECK(rep.detection_auc > 0.2);
    CHECK(rep.detection_auc < 0.8);
    CHECK(rep.has_k_map);
    CHECK(rep.nndr >= 0.0);
    CHECK(rep.nndr <= 1.0);

    const auto parsed = nlohmann::json::parse(metrics_report_to_json(rep));
    CHECK(parsed.contains("js_distance"));
    CHECK(parsed.contains("ks_score"));
    CHECK(parsed.contains("survival_distance"));
    CHECK(parsed.contains("detection_auc"));
    CHECK(parsed.contains("k_map"));
    CHECK(parsed.contains("nndr"));
    CHECK(parsed["js_distance"].get<double>() == doctest::Approx(rep.js_distance));

    // no quasi-identifiers: k_map omitted and serialized as null
    MetricsOptions bare;
    bare.seed = 7;
    const auto rep2 = evaluate_metrics(real, synth, bare);
    CHECK_FALSE(rep2.has_k_map);
    const auto parsed2 = nlohmann::json::parse(metrics_report_to_json(rep2));
    CHECK(parsed2["k_map"].is_null());
}
