#pragma once

#include <stdexcept>
#include <string>

namespace mfc {

// Base for everything thrown by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Grid or full-state enumeration would exceed the configured memory cap.
class SizingError : public Error {
public:
    using Error::Error;
};

// Bad argument to an operation (wrong range, z_i != 0, i == j, ...).
class ArgumentError : public Error {
public:
    using Error::Error;
};

// Point outside the simplex / chart domain.
class DomainError : public Error {
public:
    using Error::Error;
};

// Backward integration produced a non-finite value.
class DivergenceError : public Error {
public:
    using Error::Error;
};

// Forward flow integration lost mass beyond tolerance.
class IntegratorError : public Error {
public:
    using Error::Error;
};

// Thinning acceptance ratio exceeded 1 (majorant rate misconfigured).
class MajorantError : public Error {
public:
    using Error::Error;
};

// Operation requires model structure this problem does not have (split cost, flag B...).
class UnsupportedModelError : public Error {
public:
    using Error::Error;
};

// Invalid or inconsistent experiment configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace mfc
