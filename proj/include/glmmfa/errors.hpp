#pragma once
#include <stdexcept>
#include <string>
#include <vector>

namespace glmmfa {

/// Base class of every exception thrown by the library.
class Error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent configuration.
class ConfigError : public Error
{
public:
    using Error::Error;
};

/// Input data violates an invariant of the model.
class DataError : public Error
{
public:
    using Error::Error;
};

/// A response value lies outside the support of the family.
class DomainError : public DataError
{
public:
    using DataError::DataError;
};

/// Constant predictor column encountered during standardization.
class DegenerateColumnError : public DataError
{
public:
    DegenerateColumnError(int column, const std::string& name = "")
        : DataError("degenerate (constant) column " + std::to_string(column) +
                    (name.empty() ? std::string() : " '" + name + "'")),
          column_(column)
    {}
    int column() const noexcept { return column_; }

private:
    int column_;
};

/// Batch of dataset invariant violations.
class ValidationError : public DataError
{
public:
    explicit ValidationError(std::vector<std::string> violations)
        : DataError(join(violations)), violations_(std::move(violations))
    {}
    const std::vector<std::string>& violations() const noexcept { return violations_; }

private:
    static std::string join(const std::vector<std::string>& v)
    {
        std::string out = "dataset validation failed:";
        for (const auto& s : v) out += "\n  - " + s;
        return out;
    }
    std::vector<std::string> violations_;
};

/// Non-finite objective, failed chain initialization and similar.
class NumericalError : public Error
{
public:
    using Error::Error;
};

/// Dimensions of two arguments disagree.
class DimensionError : public Error
{
public:
    using Error::Error;
};

} // namespace glmmfa
