#pragma once

#include <stdexcept>
#include <string>

namespace uds {

/// Argument outside the physical domain of an operation (negative flow, bound violation, ...).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// A model equation produced a non-finite value.
class ModelError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller misuse: mismatched series lengths, wrong template kind, unknown names.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Rank-deficient design matrix in a linear least-squares fit.
class RankError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input document (config JSON, scenario CSV, dataset CSV).
/// Carries an optional 1-based line/column for diagnostics.
class SchemaError : public std::runtime_error {
public:
    explicit SchemaError(const std::string& what, int line = 0, int column = 0)
        : std::runtime_error(what), line_(line), column_(column) {}

    int line() const noexcept { return line_; }
    int column() const noexcept { return column_; }

private:
    int line_;
    int column_;
};

}  // namespace uds
