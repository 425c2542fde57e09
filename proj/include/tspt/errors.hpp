// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace tspt {

/// Caller violated a precondition (bad shapes, out-of-range rank, ...).
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A computation produced values outside its numeric contract
/// (non-finite loss, excessive imaginary residue, ...).
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A per-slice factorization failed; carries the offending frontal slice.
class DecompositionError : public std::runtime_error {
public:
    DecompositionError(const std::string& msg, int slice)
        : std::runtime_error(msg + " (frontal slice " + std::to_string(slice) + ")"),
          slice_(slice) {}
    int slice() const { return slice_; }

private:
    int slice_;
};

/// Container file could not be read or violates the format invariants.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A metric has no defined value for the given inputs (e.g. hd95 of an
/// empty mask). The caller decides policy.
class UndefinedMetric : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace tspt
