#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfreg {

/// Malformed or inconsistent file contents.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t byte_offset = 0)
      : std::runtime_error(what), byte_offset_(byte_offset) {}
  std::size_t byte_offset() const noexcept { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

/// An iterative method failed to reach its tolerance. Carries the best iterate
/// found and the residual it achieved.
class NumericalFailure : public std::runtime_error {
 public:
  NumericalFailure(const std::string& what, std::vector<double> best = {}, double residual = 0.0)
      : std::runtime_error(what), best_(std::move(best)), residual_(residual) {}
  const std::vector<double>& best_iterate() const noexcept { return best_; }
  double residual() const noexcept { return residual_; }

 private:
  std::vector<double> best_;
  double residual_;
};

/// Backtracking exhausted its budget without satisfying the sufficient-decrease test.
class LineSearchFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// det A == 0 where the stored energy is evaluated.
class SingularConfiguration : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace dfreg
