#pragma once

#include <filesystem>
#include <string>

#include "appf/grid.hpp"

namespace appf::grid {

/// Parses a grid description (JSON, schema in docs/case_format.md) and validates it.
Network parse_network(const std::string& text);
Network load_network(const std::filesystem::path& path);

/// Serializes every field needed to reproduce the network exactly.
std::string to_json(const Network& net, int indent = 2);
void save_network(const Network& net, const std::filesystem::path& path);

}  // namespace appf::grid
