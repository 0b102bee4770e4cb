#pragma once

#include "appf/grid.hpp"

namespace appf::reference {

/// Three interconnected copies of the 3-machine 9-bus system, each with two
/// inverter buses, balanced by a full power flow (slack at bus 1).
/// Bus ids: area a (1..3) holds ids 11(a-1)+1 .. 11(a-1)+11.
grid::Network build_reference_case();

/// Path of the checked-in copy shipped with the repository.
const char* reference_case_path();

}  // namespace appf::reference
