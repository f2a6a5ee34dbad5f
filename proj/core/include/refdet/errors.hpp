#pragma once

#include <stdexcept>
#include <string>

namespace refdet {

/// Bad user input: malformed config files, unknown keys, incompatible
/// hyperparameters. Maps to CLI exit code 1.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Bad data: missing files, shape/label mismatches, non-finite values,
/// out-of-range ids. Maps to CLI exit code 2.
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Numeric failure at runtime: non-finite activations or losses, zero-norm
/// vectors fed to cosine similarity, undefined metrics. Maps to exit code 3.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Corrupted or incompatible persisted state (checkpoint checksum/version).
class IntegrityError : public std::runtime_error {
public:
    explicit IntegrityError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace refdet
