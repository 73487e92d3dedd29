#pragma once

#include <cstdint>
#include <vector>

namespace pete {

// One padded side of a batch: row-major [batch, seq] token ids with a
// parallel {0,1} validity mask (1 = real token, 0 = padding).
struct TokenBatch {
  int64_t batch = 0;
  int64_t seq = 0;
  std::vector<int64_t> ids;
  std::vector<float> mask;

  int64_t numel() const { return batch * seq; }
};

}  // namespace pete
