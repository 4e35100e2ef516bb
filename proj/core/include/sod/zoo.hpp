#pragma once

#include <string>
#include <vector>

#include "sod/graph.hpp"

namespace sod {

// Shipped model family. All three share a byte-identical local (CNN) path;
// the dual-path variants add a global ViT branch and lighter shared layers.
std::vector<std::string> zoo_names();
GraphSpec zoo_spec(const std::string& name, int classes = 3, int imgsz = 640);

}  // namespace sod
