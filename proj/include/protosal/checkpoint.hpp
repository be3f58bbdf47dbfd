#pragma once

#include <string>

#include "protosal/graph.hpp"

namespace protosal {

// Compact structural signature of a graph: op kinds, attributes, and wiring.
// Loading refuses checkpoints whose descriptor differs from the target graph.
std::string topology_descriptor(const Graph& g);

void save_checkpoint(const std::string& path, const Graph& g);

// Parameters are matched by name and shape-checked. Buffers included.
void load_checkpoint(const std::string& path, Graph& g);

}  // namespace protosal
