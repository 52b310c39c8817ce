#include "synthtrial/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

namespace synthtrial {

using nlohmann::json;

std::string to_string(FeatureKind k) {
    switch (k) {
        case FeatureKind::Real: return "real";
        case FeatureKind::Positive: return "positive";
        case FeatureKind::Count: return "count";
        case FeatureKind::Categorical: return "categorical";
    }
    return "real";
}

FeatureKind feature_kind_from_string(const std::string& s) {
    if (s == "real") return FeatureKind::Real;
    if (s == "positive") return FeatureKind::Positive;
    if (s == "count") return FeatureKind::Count;
    if (s == "categorical") return FeatureKind::Categorical;
    throw ValidationError("unknown feature kind '" + s + "'");
}

int Schema::index_of(const std::string& name) const {
    for (std::size_t j = 0; j < covariates.size(); ++j)
        if (covariates[j].name == name) return static_cast<int>(j);
    return -1;
}

std::size_t Schema::count_kind(FeatureKind k) const {
    std::size_t n = 0;
    for (const auto& c : covariates)
        if (c.kind == k) ++n;
    return n;
}

void Schema::check() const {
    std::unordered_set<std::string> seen;
    for (const auto& c : covariates) {
        if (c.name.empty()) throw ValidationError("covariate with empty name");
        if (!seen.insert(c.name).second)
            throw ValidationError("duplicate column name '" + c.name + "'");
        if (c.kind == FeatureKind::Categorical) {
            if (c.levels.empty())
                throw ValidationError("categorical column '" + c.name + "' has no levels");
            std::unordered_set<std::string> lv;
            for (const auto& l : c.levels)
                if (!lv.insert(l).second)
                    throw ValidationError("categorical column '" + c.name +
                                          "' has duplicate level '" + l + "'");
        } else if (!c.levels.empty()) {
            throw ValidationError("non-categorical column '" + c.name + "' declares levels");
        }
    }
    for (const std::string* r : {&treatment_col, &time_col, &event_col}) {
        if (r->empty()) throw ValidationError("reserved column name is empty");
        if (!seen.insert(*r).second)
            throw ValidationError("reserved column '" + *r +
                                  "' collides with another column");
    }
}

Schema manifest_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("manifest is not valid JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("columns") || !j["columns"].is_array())
        throw ValidationError("manifest must be an object with a 'columns' array");
    Schema s;
    for (const auto& c : j["columns"]) {
        ColumnSpec spec;
        if (!c.contains("name") || !c["name"].is_string())
            throw ValidationError("manifest column without a string 'name'");
        spec.name = c["name"].get<std::string>();
        if (!c.contains("kind") || !c["kind"].is_string())
            throw ValidationError("manifest column '" + spec.name + "' without a string 'kind'");
        spec.kind = feature_kind_from_string(c["kind"].get<std::string>());
        if (c.contains("levels")) {
            if (!c["levels"].is_array())
                throw ValidationError("levels of '" + spec.name + "' must be an array");
            for (const auto& l : c["levels"]) {
                if (!l.is_string())
                    throw ValidationError("levels of '" + spec.name + "' must be strings");
                spec.levels.push_back(l.get<std::string>());
            }
        }
        s.covariates.push_back(std::move(spec));
    }
    if (j.contains("treatment_column")) s.treatment_col = j["treatment_column"].get<std::string>();
    if (j.contains("time_column")) s.time_col = j["time_column"].get<std::string>();
    if (j.contains("event_column")) s.event_col = j["event_column"].get<std::string>();
    s.check();
    return s;
}

std::string manifest_to_json(const Schema& schema) {
    json cols = json::array();
    for (const auto& c : schema.covariates) {
        json jc;
        jc["name"] = c.name;
        jc["kind"] = to_string(c.kind);
        if (c.kind == FeatureKind::Categorical) jc["levels"] = c.levels;
        cols.push_back(jc);
    }
    json j;
    j["columns"] = cols;
    j["treatment_column"] = schema.treatment_col;
    j["time_column"] = schema.time_col;
    j["event_column"] = schema.event_col;
    return j.dump(2);
}

Schema load_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open manifest '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return manifest_from_json(ss.str());
}

void save_manifest(const Schema& schema, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write manifest '" + path + "'");
    out << manifest_to_json(schema) << "\n";
}

std::string schema_fingerprint(const Schema& schema) {
    std::uint64_t h = fnv1a64(manifest_to_json(schema));
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace {

// One CSV record, RFC 4180 quoting. Returns false at end of input.
bool read_record(std::istream& in, std::vector<std::string>& fields, std::size_t& line_no) {
    fields.clear();
    std::string field;
    bool in_quotes = false, any = false;
    int ch;
    while ((ch = in.get()) != EOF) {
        any = true;
        char c = static_cast<char>(ch);
        if (in_quotes) {
            if (c == '"') {
                if (in.peek() == '"') {
                    field.push_back('"');
                    in.get();
                } else {
                    in_quotes = false;
                }
            } else {
                if (c == '\n') ++line_no;
                field.push_back(c);
            }
        } else if (c == '"') {
            in_quotes = true;
        } else if (c == ',') {
            fields.push_back(std::move(field));
            field.clear();
        } else if (c == '\n') {
            ++line_no;
            if (!field.empty() && field.back() == '\r') field.pop_back();
            fields.push_back(std::move(field));
            return true;
        } else {
            field.push_back(c);
        }
    }
    if (!any) return false;
    if (in_quotes) throw ValidationError("unterminated quoted field at end of CSV");
    if (!field.empty() && field.back() == '\r') field.pop_back();
    fields.push_back(std::move(field));
    return true;
}

double parse_double(const std::string& s, std::size_t row, const std::string& col) {
    double v = 0.0;
    const char* b = s.data();
    const char* e = s.data() + s.size();
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e)
        throw ValidationError("row " + std::to_string(row) + ", column '" + col +
                              "': cannot parse '" + s + "' as a number");
    return v;
}

int parse_binary(const std::string& s, std::size_t row, const std::string& col) {
    if (s == "0") return 0;
    if (s == "1") return 1;
    throw ValidationError("row " + std::to_string(row) + ", column '" + col +
                          "': expected 0 or 1, got '" + s + "'");
}

void append_csv_field(std::string& out, const std::string& field) {
    bool needs_quote = field.find_first_of(",\"\n\r") != std::string::npos;
    if (!needs_quote) {
        out += field;
        return;
    }
    out.push_back('"');
    for (char c : field) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
    }
    out.push_back('"');
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

TrialDataset load_csv(const std::string& path, const Schema& schema) {
    schema.check();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open CSV '" + path + "'");

    std::size_t line_no = 1;
    std::vector<std::string> header;
    if (!read_record(in, header, line_no))
        throw ValidationError("CSV '" + path + "' is empty");

    const std::size_t p = schema.covariates.size();
    // map each physical column to its role
    std::vector<int> role(header.size(), -1);  // >=0: covariate index
    int treat_at = -1, time_at = -1, event_at = -1;
    std::unordered_map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (pos.count(header[i]))
            throw ValidationError("duplicate CSV header '" + header[i] + "'");
        pos[header[i]] = i;
        int ci = schema.index_of(header[i]);
        if (ci >= 0) {
            role[i] = ci;
        } else if (header[i] == schema.treatment_col) {
            treat_at = static_cast<int>(i);
        } else if (header[i] == schema.time_col) {
            time_at = static_cast<int>(i);
        } else if (header[i] == schema.event_col) {
            event_at = static_cast<int>(i);
        } else {
            throw ValidationError("CSV column '" + header[i] + "' is not in the manifest");
        }
    }
    for (const auto& c : schema.covariates)
        if (!pos.count(c.name))
            throw ValidationError("CSV is missing manifest column '" + c.name + "'");
    if (treat_at < 0) throw ValidationError("CSV is missing treatment column '" + schema.treatment_col + "'");
    if (time_at < 0) throw ValidationError("CSV is missing time column '" + schema.time_col + "'");
    if (event_at < 0) throw ValidationError("CSV is missing event column '" + schema.event_col + "'");

    TrialDataset ds;
    ds.schema = schema;
    ds.cols.assign(p, {});

    std::vector<std::string> fields;
    std::size_t row = 0;
    while (read_record(in, fields, line_no)) {
        if (fields.size() == 1 && fields[0].empty()) continue;  // trailing blank line
        ++row;
        if (fields.size() != header.size())
            throw ValidationError("row " + std::to_string(row) + ": expected " +
                                  std::to_string(header.size()) + " fields, got " +
                                  std::to_string(fields.size()));
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (role[i] >= 0) {
                const ColumnSpec& spec = schema.covariates[static_cast<std::size_t>(role[i])];
                double v;
                if (spec.kind == FeatureKind::Categorical) {
                    auto it = std::find(spec.levels.begin(), spec.levels.end(), fields[i]);
                    if (it == spec.levels.end())
                        throw ValidationError("row " + std::to_string(row) + ", column '" +
                                              spec.name + "': unknown level '" + fields[i] + "'");
                    v = static_cast<double>(it - spec.levels.begin());
                } else {
                    v = parse_double(fields[i], row, spec.name);
                }
                ds.cols[static_cast<std::size_t>(role[i])].push_back(v);
            } else if (static_cast<int>(i) == treat_at) {
                ds.treatment.push_back(parse_binary(fields[i], row, schema.treatment_col));
            } else if (static_cast<int>(i) == time_at) {
                ds.time.push_back(parse_double(fields[i], row, schema.time_col));
            } else {
                ds.event.push_back(parse_binary(fields[i], row, schema.event_col));
            }
        }
    }
    validate(ds);
    return ds;
}

void save_csv(const TrialDataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write CSV '" + path + "'");
    std::string line;
    for (const auto& c : ds.schema.covariates) {
        append_csv_field(line, c.name);
        line.push_back(',');
    }
    append_csv_field(line, ds.schema.treatment_col);
    line.push_back(',');
    append_csv_field(line, ds.schema.time_col);
    line.push_back(',');
    append_csv_field(line, ds.schema.event_col);
    out << line << "\n";

    const std::size_t n = ds.n_rows();
    for (std::size_t i = 0; i < n; ++i) {
        line.clear();
        for (std::size_t j = 0; j < ds.schema.covariates.size(); ++j) {
            const ColumnSpec& spec = ds.schema.covariates[j];
            if (spec.kind == FeatureKind::Categorical) {
                append_csv_field(line, spec.levels[static_cast<std::size_t>(ds.cols[j][i])]);
            } else if (spec.kind == FeatureKind::Count) {
                line += std::to_string(static_cast<long long>(ds.cols[j][i]));
            } else {
                line += format_double(ds.cols[j][i]);
            }
            line.push_back(',');
        }
        line += std::to_string(ds.treatment[i]);
        line.push_back(',');
        line += format_double(ds.time[i]);
        line.push_back(',');
        line += std::to_string(ds.event[i]);
        out << line << "\n";
    }
    if (!out) throw ValidationError("failed while writing CSV '" + path + "'");
}

void validate(const TrialDataset& ds) {
    ds.schema.check();
    const std::size_t n = ds.time.size();
    if (ds.treatment.size() != n || ds.event.size() != n)
        throw ValidationError("treatment/time/event column lengths differ");
    if (ds.cols.size() != ds.schema.covariates.size())
        throw ValidationError("covariate column count does not match the manifest");
    for (std::size_t j = 0; j < ds.cols.size(); ++j)
        if (ds.cols[j].size() != n)
            throw ValidationError("column '" + ds.schema.covariates[j].name +
                                  "' has wrong length");
    for (std::size_t i = 0; i < n; ++i) {
        const std::string rc = "row " + std::to_string(i + 1);
        if (!(ds.time[i] > 0.0) || !std::isfinite(ds.time[i]))
            throw ValidationError(rc + ", column '" + ds.schema.time_col +
                                  "': time must be finite and > 0");
        if (ds.event[i] != 0 && ds.event[i] != 1)
            throw ValidationError(rc + ", column '" + ds.schema.event_col +
                                  "': event must be 0 or 1");
        if (ds.treatment[i] != 0 && ds.treatment[i] != 1)
            throw ValidationError(rc + ", column '" + ds.schema.treatment_col +
                                  "': treatment must be 0 or 1");
        for (std::size_t j = 0; j < ds.cols.size(); ++j) {
            const ColumnSpec& spec = ds.schema.covariates[j];
            const double v = ds.cols[j][i];
            if (!std::isfinite(v))
                throw ValidationError(rc + ", column '" + spec.name + "': non-finite value");
            switch (spec.kind) {
                case FeatureKind::Real:
                    break;
                case FeatureKind::Positive:
                    if (!(v > 0.0))
                        throw ValidationError(rc + ", column '" + spec.name +
                                              "': positive feature must be > 0");
                    break;
                case FeatureKind::Count:
                    if (v < 0.0 || v != std::floor(v))
                        throw ValidationError(rc + ", column '" + spec.name +
                                              "': count must be a nonnegative integer");
                    break;
                case FeatureKind::Categorical: {
                    double nl = static_cast<double>(spec.levels.size());
                    if (v != std::floor(v) || v < 0.0 || v >= nl)
                        throw ValidationError(rc + ", column '" + spec.name +
                                              "': level code out of range");
                    break;
                }
            }
        }
    }
}

TrialDataset take_rows(const TrialDataset& ds, const std::vector<std::size_t>& idx) {
    TrialDataset out;
    out.schema = ds.schema;
    out.cols.assign(ds.cols.size(), {});
    for (std::size_t i : idx) {
        if (i >= ds.n_rows()) throw ValidationError("take_rows index out of range");
        for (std::size_t j = 0; j < ds.cols.size(); ++j) out.cols[j].push_back(ds.cols[j][i]);
        out.treatment.push_back(ds.treatment[i]);
        out.time.push_back(ds.time[i]);
        out.event.push_back(ds.event[i]);
    }
    return out;
}

TrialDataset concat_rows(const TrialDataset& a, const TrialDataset& b) {
    if (manifest_to_json(a.schema) != manifest_to_json(b.schema))
        throw ValidationError("concat_rows requires identical schemas");
    TrialDataset out = a;
    for (std::size_t j = 0; j < out.cols.size(); ++j)
        out.cols[j].insert(out.cols[j].end(), b.cols[j].begin(), b.cols[j].end());
    out.treatment.insert(out.treatment.end(), b.treatment.begin(), b.treatment.end());
    out.time.insert(out.time.end(), b.time.begin(), b.time.end());
    out.event.insert(out.event.end(), b.event.begin(), b.event.end());
    return out;
}

std::pair<TrialDataset, TrialDataset> split_arms(const TrialDataset& ds) {
    std::vector<std::size_t> ctrl, trt;
    for (std::size_t i = 0; i < ds.n_rows(); ++i)
        (ds.treatment[i] == 0 ? ctrl : trt).push_back(i);
    return {take_rows(ds, ctrl), take_rows(ds, trt)};
}

TrialDataset subsample(const TrialDataset& ds, double upsilon, std::uint64_t seed) {
    if (!(upsilon > 0.0 && upsilon <= 1.0))
        throw ValidationError("subsample fraction must be in (0, 1]");
    const std::size_t n = ds.n_rows();
    if (static_cast<std::size_t>(upsilon * static_cast<double>(n)) < 1)
        throw ValidationError("subsample would select no rows");
    if (upsilon == 1.0) return ds;
    std::size_t k = static_cast<std::size_t>(std::llround(upsilon * static_cast<double>(n)));
    if (k < 1) k = 1;
    if (k > n) k = n;
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed);
    // partial Fisher-Yates, then restore original row order
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t j = i + rng.below(n - i);
        std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return take_rows(ds, idx);
}

}  // namespace synthtrial
