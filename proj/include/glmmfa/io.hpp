#pragma once
#include <glmmfa/data.hpp>
#include <glmmfa/errors.hpp>
#include <glmmfa/factor_model.hpp>
#include <glmmfa/mcecm.hpp>
#include <glmmfa/selection.hpp>
#include <glmmfa/simlab.hpp>
#include <json.hpp>
#include <Eigen/Dense>
#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace glmmfa {

using json = nlohmann::ordered_json;

#ifndef GLMMFA_VERSION
#define GLMMFA_VERSION "0.0.0"
#endif

inline std::string version() { return GLMMFA_VERSION; }

// ---------------------------------------------------------------- CSV

struct CsvTable
{
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int column(const std::string& name) const
    {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw ConfigError("column '" + name + "' not found in CSV header");
        return static_cast<int>(it - header.begin());
    }
};

namespace detail {

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

/// Splits one CSV line; double quotes protect commas, "" is a literal quote.
inline std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(trim(cur));
    return out;
}

inline double parse_double(const std::string& s, const std::string& where)
{
    double v = 0.0;
    const char* b = s.data();
    const char* e = s.data() + s.size();
    const auto res = std::from_chars(b, e, v);
    if (res.ec != std::errc() || res.ptr != e) throw DataError("non-numeric value '" + s + "' at " + where);
    return v;
}

inline std::string csv_escape(const std::string& s)
{
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
    return out + "\"";
}

} // namespace detail

/// Reads a CSV file with one header row. Blank lines and lines starting with '#' are skipped.
inline CsvTable read_csv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open '" + path.string() + "'");
    CsvTable t;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string s = detail::trim(line);
        if (s.empty() || s[0] == '#') continue;
        auto cells = detail::split_csv_line(s);
        if (t.header.empty()) {
            t.header = std::move(cells);
            continue;
        }
        if (cells.size() != t.header.size()) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                            std::to_string(t.header.size()) + " fields, found " + std::to_string(cells.size()));
        }
        t.rows.push_back(std::move(cells));
    }
    if (t.header.empty()) throw DataError("'" + path.string() + "' has no header row");
    return t;
}

/// Writes `content` to a sibling temporary file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw ConfigError("cannot write '" + tmp.string() + "'");
        out << content;
        if (!out) throw ConfigError("write failed for '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

/// Which CSV columns play which role. Empty predictor / random lists mean "all".
struct ColumnRoles
{
    std::string response = "y";
    std::string group = "group";
    std::vector<std::string> predictors;
    /// Names of random-effect candidates; "(Intercept)" denotes the random intercept.
    std::vector<std::string> random_effects;
};

struct LoadedData
{
    GroupedDataset data;
    StandardizationInfo standardization;
    std::vector<std::string> group_labels; // label of group k+1
};

/**
 * Builds a standardized dataset from a CSV table. Group labels may be any strings;
 * they are numbered 1..K in order of first appearance.
 */
inline LoadedData dataset_from_csv(const CsvTable& t, const ColumnRoles& roles, const Family& family)
{
    const int iy = t.column(roles.response);
    const int ig = t.column(roles.group);
    std::vector<int> ix;
    std::vector<std::string> names;
    if (roles.predictors.empty()) {
        for (int c = 0; c < static_cast<int>(t.header.size()); ++c) {
            if (c == iy || c == ig) continue;
            ix.push_back(c);
            names.push_back(t.header[c]);
        }
    } else {
        for (const auto& n : roles.predictors) {
            ix.push_back(t.column(n));
            names.push_back(n);
        }
    }
    if (ix.empty()) throw ConfigError("no predictor columns");
    const int N = static_cast<int>(t.rows.size());
    if (N == 0) throw DataError("CSV has no data rows");
    const int p = static_cast<int>(ix.size());

    LoadedData out;
    Eigen::MatrixXd Xraw(N, p);
    out.data.y.resize(N);
    out.data.group.resize(N);
    std::map<std::string, int> label_id;
    for (int i = 0; i < N; ++i) {
        const auto& row = t.rows[i];
        const std::string where = "row " + std::to_string(i + 1);
        out.data.y(i) = detail::parse_double(row[iy], where + ", column " + roles.response);
        const auto [it, fresh] = label_id.emplace(row[ig], static_cast<int>(label_id.size()) + 1);
        if (fresh) out.group_labels.push_back(row[ig]);
        out.data.group[i] = it->second;
        for (int j = 0; j < p; ++j) Xraw(i, j) = detail::parse_double(row[ix[j]], where + ", column " + names[j]);
    }
    out.data.num_groups = static_cast<int>(label_id.size());
    out.data.predictor_names = names;

    if (roles.random_effects.empty()) {
        out.data.z_columns = all_columns(p);
    } else {
        for (const auto& n : roles.random_effects) {
            if (n == "(Intercept)" || n == "intercept") {
                out.data.z_columns.push_back(kIntercept);
                continue;
            }
            const auto it = std::find(names.begin(), names.end(), n);
            if (it == names.end()) throw ConfigError("random effect '" + n + "' is not a predictor");
            out.data.z_columns.push_back(static_cast<int>(it - names.begin()) + 1);
        }
    }

    try {
        auto [Xs, info] = standardize(Xraw);
        out.data.X = std::move(Xs);
        out.standardization = std::move(info);
    } catch (const DegenerateColumnError& e) {
        throw DataError(std::string(e.what()) + " (predictor '" + names.at(e.column()) + "')");
    }
    validate_dataset(out.data, family);
    return out;
}

inline LoadedData load_dataset(const std::filesystem::path& path, const ColumnRoles& roles, const Family& family)
{
    return dataset_from_csv(read_csv(path), roles, family);
}

/// y, group, then the predictors, at full precision. `preamble` is copied verbatim
/// and should consist of '#' lines.
inline std::string dataset_to_csv(const GroupedDataset& d, const std::string& preamble = "")
{
    std::ostringstream os;
    os << std::setprecision(17);
    os << preamble;
    os << "y,group";
    for (int j = 1; j <= d.p(); ++j) os << "," << detail::csv_escape(d.column_name(j));
    os << "\n";
    for (int i = 0; i < d.N(); ++i) {
        os << d.y(i) << "," << d.group[i];
        for (int j = 0; j < d.p(); ++j) os << "," << d.X(i, j);
        os << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------- JSON

inline json to_json(const Eigen::VectorXd& v)
{
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

/// Row-major nested arrays.
inline json to_json(const Eigen::MatrixXd& m)
{
    json a = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) a.push_back(to_json(Eigen::VectorXd(m.row(i).transpose())));
    return a;
}

inline Eigen::VectorXd vector_from_json(const json& j)
{
    Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
    return v;
}

inline Eigen::MatrixXd matrix_from_json(const json& j)
{
    if (j.empty()) return {};
    Eigen::MatrixXd m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j[0].size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (j[i].size() != j[0].size()) throw ConfigError("ragged matrix in JSON");
        for (std::size_t c = 0; c < j[i].size(); ++c)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = j[i][c].get<double>();
    }
    return m;
}

inline json to_json(const ThetaState& th)
{
    return json{{"beta", to_json(th.beta)}, {"B", to_json(th.B)}, {"tau", th.tau}};
}

inline ThetaState theta_from_json(const json& j)
{
    ThetaState th;
    th.beta = vector_from_json(j.at("beta"));
    th.B = matrix_from_json(j.at("B"));
    th.tau = j.value("tau", 1.0);
    return th;
}

inline json to_json(const SelectedSets& s, const GroupedDataset* data = nullptr)
{
    json j{{"S1", s.S1}, {"S2", s.S2}};
    if (data) {
        json n1 = json::array(), n2 = json::array();
        for (int c : s.S1) n1.push_back(data->column_name(c));
        for (int c : s.S2) n2.push_back(data->column_name(c));
        j["S1_names"] = n1;
        j["S2_names"] = n2;
    }
    return j;
}

/// Draws are summarized (count, burn-in, acceptance), not dumped; see draws_to_csv.
inline json to_json(const FitResult& f)
{
    json j;
    j["theta"] = to_json(f.theta);
    j["converged"] = f.converged;
    j["em_iterations"] = f.em_iterations;
    j["q1_trace"] = f.q1_trace;
    j["mstep_cycles"] = f.mstep_cycles;
    if (f.final_draws.K() > 0) {
        j["final_draws"] = {{"M", f.final_draws.M},
                            {"burn_in", f.final_draws.burn_in},
                            {"acceptance", f.final_draws.acceptance}};
    }
    return j;
}

/// One row per group and draw: group, draw, alpha_1..alpha_r.
inline std::string draws_to_csv(const PosteriorDraws& d)
{
    std::ostringstream os;
    os << std::setprecision(17) << "group,draw";
    for (int c = 1; c <= d.r(); ++c) os << ",alpha_" << c;
    os << "\n";
    for (int k = 0; k < d.K(); ++k) {
        const auto& A = d.draws[k];
        for (Eigen::Index m = 0; m < A.rows(); ++m) {
            os << k + 1 << "," << m + 1;
            for (Eigen::Index c = 0; c < A.cols(); ++c) os << "," << A(m, c);
            os << "\n";
        }
    }
    return os.str();
}

inline json to_json(const PathEntry& e)
{
    json j{{"lambda0", e.lambda0}, {"lambda1", e.lambda1}, {"stage", e.stage}, {"failed", e.failed}};
    if (e.failed) {
        j["message"] = e.message;
        return j;
    }
    j["bic_icq"] = e.bic_icq;
    j["df_fixed"] = e.df_fixed;
    j["df_random"] = e.df_random;
    j["fit"] = to_json(e.fit);
    return j;
}

inline json to_json(const SelectionPath& p)
{
    json entries = json::array();
    for (const auto& e : p.entries) entries.push_back(to_json(e));
    return json{{"best_index", p.best_index}, {"entries", entries}, {"reference_fit", to_json(p.reference_fit)}};
}

/// One row per grid point, in fitting order.
inline std::string path_to_csv(const SelectionPath& p)
{
    std::ostringstream os;
    os << std::setprecision(12);
    os << "index,stage,lambda0,lambda1,bic_icq,df_fixed,df_random,em_iterations,converged,failed,best\n";
    for (std::size_t i = 0; i < p.entries.size(); ++i) {
        const auto& e = p.entries[i];
        os << i << "," << e.stage << "," << e.lambda0 << "," << e.lambda1 << ",";
        if (e.failed) os << "NA,NA,NA,NA,NA,1,";
        else os << e.bic_icq << "," << e.df_fixed << "," << e.df_random << "," << e.fit.em_iterations << ","
                << (e.fit.converged ? 1 : 0) << ",0,";
        os << (static_cast<int>(i) == p.best_index ? 1 : 0) << "\n";
    }
    return os.str();
}

inline json to_json(const GrowthRatioResult& g)
{
    return json{{"r_hat", g.r_hat},
                {"U", g.U_used},
                {"gr_values", to_json(g.gr_values)},
                {"eigenvalues", to_json(g.eigenvalues)},
                {"warnings", g.warnings}};
}

inline json to_json(const SimTruth& t)
{
    return json{{"family", to_string(t.family.kind)},
                {"N", t.N},
                {"K", t.K},
                {"p", t.p},
                {"r", t.r},
                {"beta_true", to_json(t.beta_true)},
                {"B_true", to_json(t.B_true)},
                {"S1_true", t.S1_true},
                {"S2_true", t.S2_true},
                {"alpha_true", to_json(t.alpha_true)}};
}

inline SimTruth truth_from_json(const json& j)
{
    SimTruth t;
    t.family = family_from_string(j.at("family").get<std::string>());
    t.N = j.at("N").get<int>();
    t.K = j.at("K").get<int>();
    t.p = j.at("p").get<int>();
    t.r = j.at("r").get<int>();
    t.beta_true = vector_from_json(j.at("beta_true"));
    t.B_true = matrix_from_json(j.at("B_true"));
    t.S1_true = j.at("S1_true").get<std::vector<int>>();
    t.S2_true = j.at("S2_true").get<std::vector<int>>();
    if (j.contains("alpha_true")) t.alpha_true = matrix_from_json(j.at("alpha_true"));
    return t;
}

inline json to_json(const MetricsRow& m)
{
    return json{{"tp_fixed_pct", m.tp_fixed_pct},     {"fp_fixed_pct", m.fp_fixed_pct},
                {"tp_random_pct", m.tp_random_pct},   {"fp_random_pct", m.fp_random_pct},
                {"mean_abs_dev", m.mean_abs_dev},     {"r_used", m.r_used},
                {"r_true", m.r_true}};
}

/// Columns follow the usual table order: TP/FP fixed, TP/FP random, then the rest.
inline std::string metrics_header() { return "tp_fixed_pct,fp_fixed_pct,tp_random_pct,fp_random_pct,mean_abs_dev"; }

inline std::string metrics_cells(const MetricsRow& m)
{
    std::ostringstream os;
    os << std::setprecision(6) << m.tp_fixed_pct << "," << m.fp_fixed_pct << "," << m.tp_random_pct << ","
       << m.fp_random_pct << "," << m.mean_abs_dev;
    return os.str();
}

inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

} // namespace glmmfa
