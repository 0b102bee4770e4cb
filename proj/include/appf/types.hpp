#pragma once

#include <complex>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace appf {

using Complex = std::complex<double>;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using CVector = Eigen::VectorXcd;
using CMatrix = Eigen::MatrixXcd;

inline constexpr double kNominalHz = 60.0;
inline constexpr double kPi = 3.14159265358979323846;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Malformed input: bad case file, inconsistent references, violated invariants.
class ConfigError : public Error {
  public:
    using Error::Error;
};

class DegenerateBranchError : public Error {
  public:
    using Error::Error;
};

/// Raised when stages are requested out of order.
class SequencingError : public Error {
  public:
    using Error::Error;
};

}  // namespace appf
