#pragma once

#include <stdexcept>
#include <string>

namespace rtdp {

struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape disagreement between tensor operands.
struct shape_error : error {
  using error::error;
};

// A stated precondition or postcondition was violated by the caller.
struct contract_error : error {
  using error::error;
};

// Out-of-range index (token ids, gather indices).
struct index_error : error {
  using error::error;
};

// Bad configuration file, unknown key, or incompatible model config.
struct config_error : error {
  using error::error;
};

// Corrupt, truncated or checksum-failing file.
struct integrity_error : error {
  using error::error;
};

}  // namespace rtdp
