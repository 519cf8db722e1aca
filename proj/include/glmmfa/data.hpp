#pragma once
#include <glmmfa/errors.hpp>
#include <glmmfa/family.hpp>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace glmmfa {

/// Column index 0 refers to the implicit intercept; j >= 1 refers to column j-1 of X.
inline constexpr int kIntercept = 0;

/**
 * Grouped observations.
 *
 * X holds the p predictors without an intercept column. Group labels are
 * 1-based in {1..num_groups}. z_columns lists, in order, the columns of
 * (1, X) that carry a random effect; 0 denotes the intercept.
 */
struct GroupedDataset
{
    Eigen::VectorXd y;
    Eigen::MatrixXd X;
    std::vector<int> group;
    int num_groups = 0;
    std::vector<int> z_columns;
    std::vector<std::string> predictor_names;

    int N() const { return static_cast<int>(y.size()); }
    int p() const { return static_cast<int>(X.cols()); }
    int q() const { return static_cast<int>(z_columns.size()); }
    int K() const { return num_groups; }

    /// Name of column c of (1, X).
    std::string column_name(int c) const
    {
        if (c == kIntercept) return "(Intercept)";
        if (c - 1 < static_cast<int>(predictor_names.size())) return predictor_names[c - 1];
        return "x" + std::to_string(c);
    }
};

/// All columns 0..p as random-effect candidates.
inline std::vector<int> all_columns(int p)
{
    std::vector<int> cols(p + 1);
    for (int c = 0; c <= p; ++c) cols[c] = c;
    return cols;
}

struct StandardizationInfo
{
    Eigen::VectorXd means;
    Eigen::VectorXd scales;
};

/**
 * Centers each column and scales it to unit root mean square,
 * N^{-1} sum x^2 = 1 (population scaling).
 */
inline std::pair<Eigen::MatrixXd, StandardizationInfo> standardize(const Eigen::MatrixXd& X)
{
    const auto n = X.rows();
    const auto p = X.cols();
    if (n == 0) throw DataError("cannot standardize an empty matrix");
    StandardizationInfo info{Eigen::VectorXd(p), Eigen::VectorXd(p)};
    Eigen::MatrixXd Xs(n, p);
    for (Eigen::Index j = 0; j < p; ++j) {
        const double mean = X.col(j).mean();
        const double scale =
            std::sqrt((X.col(j).array() - mean).square().sum() / static_cast<double>(n));
        const double ref = std::max(1.0, X.col(j).cwiseAbs().maxCoeff());
        if (!std::isfinite(scale) || scale <= 1e-12 * ref) {
            throw DegenerateColumnError(static_cast<int>(j));
        }
        info.means(j) = mean;
        info.scales(j) = scale;
        Xs.col(j) = (X.col(j).array() - mean) / scale;
    }
    return {std::move(Xs), std::move(info)};
}

struct ValidationSummary
{
    int N = 0;
    int K = 0;
    int p = 0;
    int q = 0;
    std::vector<int> group_sizes;
};

/// Checks every dataset invariant and throws ValidationError carrying all violations at once.
inline ValidationSummary validate_dataset(const GroupedDataset& data, const Family& family)
{
    std::vector<std::string> violations;
    ValidationSummary s;
    s.N = data.N();
    s.K = data.num_groups;
    s.p = data.p();
    s.q = data.q();

    if (data.N() == 0) violations.push_back("no observations");
    if (data.X.rows() != data.y.size()) {
        violations.push_back("design matrix has " + std::to_string(data.X.rows()) +
                             " rows but response has " + std::to_string(data.y.size()));
    }
    if (static_cast<Eigen::Index>(data.group.size()) != data.y.size()) {
        violations.push_back("group vector has " + std::to_string(data.group.size()) +
                             " entries but response has " + std::to_string(data.y.size()));
    }
    if (data.num_groups < 1) violations.push_back("number of groups must be at least 1");

    s.group_sizes.assign(std::max(data.num_groups, 0), 0);
    int bad_labels = 0;
    for (int g : data.group) {
        if (g < 1 || g > data.num_groups) ++bad_labels;
        else ++s.group_sizes[g - 1];
    }
    if (bad_labels > 0) {
        violations.push_back(std::to_string(bad_labels) + " group labels outside {1.." +
                             std::to_string(data.num_groups) + "}");
    }
    for (int k = 0; k < data.num_groups; ++k) {
        if (s.group_sizes[k] == 0) {
            violations.push_back("empty group: label " + std::to_string(k + 1) + " never occurs");
        }
    }

    std::set<int> seen;
    for (int c : data.z_columns) {
        if (c < 0 || c > data.p()) {
            violations.push_back("random-effect column " + std::to_string(c) + " out of range");
        }
        if (!seen.insert(c).second) {
            violations.push_back("duplicate random-effect column " + std::to_string(c));
        }
    }

    int out_of_support = 0;
    for (Eigen::Index i = 0; i < data.y.size(); ++i) {
        if (!family.valid_response(data.y(i))) ++out_of_support;
    }
    if (out_of_support > 0) {
        violations.push_back(std::to_string(out_of_support) + " responses out of support for the " +
                             to_string(family.kind) + " family");
    }
    if (!data.X.allFinite()) violations.push_back("design matrix contains non-finite values");

    if (!violations.empty()) throw ValidationError(std::move(violations));
    return s;
}

/**
 * Group-contiguous view of a dataset used by the solvers.
 *
 * Rows are reordered so that group k occupies [start[k], start[k] + size[k]).
 * X1 carries the intercept column first; Z holds the random-effect columns.
 * weight[i] = 1 / (K n_k) is the per-observation normalization of the loss (1/N when
 * groups are balanced).
 */
struct ModelFrame
{
    Eigen::VectorXd y;
    Eigen::MatrixXd X1;
    Eigen::MatrixXd Z;
    Eigen::VectorXd weight;
    std::vector<int> start;
    std::vector<int> size;
    std::vector<int> order;
    std::vector<int> z_columns;
    int intercept_row = -1;

    int N() const { return static_cast<int>(y.size()); }
    int p() const { return static_cast<int>(X1.cols()) - 1; }
    int q() const { return static_cast<int>(Z.cols()); }
    int K() const { return static_cast<int>(start.size()); }
};

inline ModelFrame make_frame(const GroupedDataset& data)
{
    const int n = data.N();
    const int p = data.p();
    const int K = data.num_groups;
    ModelFrame f;
    f.order.resize(n);
    for (int i = 0; i < n; ++i) f.order[i] = i;
    std::stable_sort(f.order.begin(), f.order.end(),
                     [&](int a, int b) { return data.group[a] < data.group[b]; });
    f.size.assign(K, 0);
    for (int g : data.group) ++f.size[g - 1];
    f.start.assign(K, 0);
    for (int k = 1; k < K; ++k) f.start[k] = f.start[k - 1] + f.size[k - 1];

    f.y.resize(n);
    f.X1.resize(n, p + 1);
    f.weight.resize(n);
    for (int i = 0; i < n; ++i) {
        const int src = f.order[i];
        f.y(i) = data.y(src);
        f.X1(i, 0) = 1.0;
        f.X1.row(i).tail(p) = data.X.row(src);
        f.weight(i) = 1.0 / (static_cast<double>(K) * f.size[data.group[src] - 1]);
    }
    f.z_columns = data.z_columns;
    f.Z.resize(n, data.q());
    for (int t = 0; t < data.q(); ++t) {
        f.Z.col(t) = f.X1.col(data.z_columns[t]);
        if (data.z_columns[t] == kIntercept) f.intercept_row = t;
    }
    return f;
}

} // namespace glmmfa
