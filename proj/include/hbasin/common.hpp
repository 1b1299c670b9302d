#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace hbasin {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;  // rows are samples unless stated otherwise
using Labels = std::vector<std::uint8_t>;

inline constexpr std::uint8_t kFactual = 0;
inline constexpr std::uint8_t kHallucinated = 1;

/// Any failure raised by the toolkit. The message is meant for end users.
class BasinError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace hbasin
