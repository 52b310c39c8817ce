#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "synthtrial/common.hpp"

namespace synthtrial {

enum class FeatureKind { Real, Positive, Count, Categorical };

std::string to_string(FeatureKind k);
FeatureKind feature_kind_from_string(const std::string& s);

struct ColumnSpec {
    std::string name;
    FeatureKind kind = FeatureKind::Real;
    std::vector<std::string> levels;  // categorical only, in declared order
};

struct Schema {
    std::vector<ColumnSpec> covariates;
    std::string treatment_col = "treatment";
    std::string time_col = "time";
    std::string event_col = "event";

    // -1 when the name is not a covariate column
    int index_of(const std::string& name) const;
    std::size_t count_kind(FeatureKind k) const;
    // structural validity: unique names, reserved columns disjoint from
    // covariates, categorical levels nonempty and unique
    void check() const;
};

// Columnar trial dataset. Covariate columns align with schema.covariates.
// Categorical cells store the level code (index into levels) as a double.
struct TrialDataset {
    Schema schema;
    std::vector<std::vector<double>> cols;
    std::vector<int> treatment;
    std::vector<double> time;
    std::vector<int> event;

    std::size_t n_rows() const { return time.size(); }
};

Schema manifest_from_json(const std::string& text);
std::string manifest_to_json(const Schema& schema);
Schema load_manifest(const std::string& path);
void save_manifest(const Schema& schema, const std::string& path);

TrialDataset load_csv(const std::string& path, const Schema& schema);
void save_csv(const TrialDataset& ds, const std::string& path);

// Full row-level validation; throws ValidationError naming row and column.
void validate(const TrialDataset& ds);

// (control, treated) by the treatment column; schemas unchanged.
std::pair<TrialDataset, TrialDataset> split_arms(const TrialDataset& ds);

// Uniform without-replacement subset of round(upsilon * n) rows, original row
// order preserved; upsilon = 1 returns an unpermuted copy.
TrialDataset subsample(const TrialDataset& ds, double upsilon, std::uint64_t seed);

TrialDataset take_rows(const TrialDataset& ds, const std::vector<std::size_t>& idx);
TrialDataset concat_rows(const TrialDataset& a, const TrialDataset& b);

// Stable hex digest of the manifest, for model sidecars.
std::string schema_fingerprint(const Schema& schema);

}  // namespace synthtrial
