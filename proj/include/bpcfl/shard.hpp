#pragma once

#include <vector>

#include "bpcfl/types.hpp"

namespace bpcfl {

// One client's local dataset. `is_test[i]` marks withheld rows; without a
// split every row is training data.
struct DatasetShard {
  int client_id = 0;
  Matrix inputs;   // n x D
  Matrix targets;  // n x C (one-hot rows for classification)
  std::vector<bool> is_test;

  Index size() const { return inputs.rows(); }
  Index train_size() const;
  Matrix train_inputs() const;
  Matrix train_targets() const;
  Matrix test_inputs() const;
  Matrix test_targets() const;
  void validate() const;
};

}  // namespace bpcfl
