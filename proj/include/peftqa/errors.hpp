#pragma once

#include <stdexcept>
#include <string>

namespace peftqa {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape or dimension disagreement between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

// Violated precondition of an API call.
class ContractError : public Error {
public:
    using Error::Error;
};

// Malformed or inconsistent input data (offsets, codes, file contents).
class DataError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class StateError : public Error {
public:
    using Error::Error;
};

// Non-finite values or a degenerate numeric guard.
class NumericError : public Error {
public:
    using Error::Error;
};

class UnsupportedError : public Error {
public:
    using Error::Error;
};

class CoverageError : public Error {
public:
    using Error::Error;
};

class UsageError : public Error {
public:
    using Error::Error;
};

class DecodeError : public Error {
public:
    using Error::Error;
};

}  // namespace peftqa
