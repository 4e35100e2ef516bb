#pragma once

#include <stdexcept>
#include <string>

#include "sod/model.hpp"

namespace sod {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Binary checkpoint: magic, format version, scalar width, embedded graph
// spec text, anchors, then named parameter/buffer tensors in declaration
// order. Writes are atomic (temp file + rename).
void save_checkpoint(Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace sod
