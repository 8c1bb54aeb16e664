#pragma once

#include <stdexcept>
#include <string>

namespace schvpp {

/// Base of every error raised by the library. The C API maps each subclass
/// onto one status code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

class OutOfRange : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Corrupt or mismatched checkpoint / config / manifest content.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Mathematically undefined request (e.g. BD-rate with no quality overlap).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Non-finite values detected during optimization.
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace schvpp
