/// Basic numeric aliases and the error taxonomy shared by all modules.
#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace longshape {

// Points, momenta and vertex sets are stored row-wise: one point per row,
// `ambient_dim` columns (2 or 3).
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using IMat = Eigen::MatrixXi;

/// Bad configuration: schema violations, invalid tunables.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Bad data: malformed files, inconsistent datasets, invalid shapes.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Numerical failure: divergence, ill-conditioning, non-convergence.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace longshape
