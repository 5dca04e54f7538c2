#pragma once

#include <stdexcept>
#include <string>

namespace qkdec {

/// Base class for every error thrown by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class TrainingError : public Error {
public:
    TrainingError(const std::string& what, std::size_t batch_index)
        : Error(what + " (batch " + std::to_string(batch_index) + ")"),
          batch_index_(batch_index) {}
    std::size_t batch_index() const noexcept { return batch_index_; }

private:
    std::size_t batch_index_;
};

class EmptyEvalSetError : public Error {
public:
    using Error::Error;
};

class EmptyEstimateError : public Error {
public:
    using Error::Error;
};

class MergeError : public Error {
public:
    using Error::Error;
};

class ZeroMatrixError : public Error {
public:
    using Error::Error;
};

class ProjectorError : public Error {
public:
    using Error::Error;
};

class NotEnoughKeysError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class SchemaError : public Error {
public:
    using Error::Error;
};

class RuleError : public Error {
public:
    using Error::Error;
};

} // namespace qkdec
