#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace asc {

// Base for every error raised by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

// Bad caller-supplied data: token ids out of range, sequences too long, malformed lists.
class InputError : public Error {
public:
    using Error::Error;
};

// A configuration invariant is violated. `fields` names the offending fields.
class ConfigError : public Error {
public:
    ConfigError(const std::string& what, std::vector<std::string> fields = {})
        : Error(what), fields_(std::move(fields)) {}
    const std::vector<std::string>& fields() const noexcept { return fields_; }

private:
    std::vector<std::string> fields_;
};

// Iterative method failed to converge; carries the last iterate.
class NumericError : public Error {
public:
    NumericError(const std::string& what, double last_value, std::size_t iterations)
        : Error(what), last_value_(last_value), iterations_(iterations) {}
    double last_value() const noexcept { return last_value_; }
    std::size_t iterations() const noexcept { return iterations_; }

private:
    double last_value_;
    std::size_t iterations_;
};

class LoadError : public Error {
public:
    using Error::Error;
};

class PlanError : public Error {
public:
    using Error::Error;
};

class TrainingDivergence : public Error {
public:
    TrainingDivergence(const std::string& what, std::size_t step) : Error(what), step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

}  // namespace asc
