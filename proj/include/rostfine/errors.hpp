#pragma once

#include <stdexcept>
#include <string>

namespace rostfine {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or rank disagreement between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// An argument or configuration value violates its documented range.
/// `field()` names the offending setting when one applies.
class ValueError : public Error {
public:
    explicit ValueError(const std::string& what, std::string field = {})
        : Error(what), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

class NonFiniteError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Malformed on-disk data. Each failure mode carries its own kind so callers
/// can distinguish a foreign file from a damaged one.
class FormatError : public Error {
public:
    enum class Kind { BadMagic, UnsupportedVersion, Truncated, Schema, Corruption, MissingEntry };

    FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

} // namespace rostfine
