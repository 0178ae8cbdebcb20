#pragma once

#include <stdexcept>
#include <string>

namespace qx {

// Raised for bad inputs: malformed files, out-of-range arguments, violated
// preconditions. The CLI maps it to exit code 1.
class UserError : public std::runtime_error {
 public:
  explicit UserError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace qx
