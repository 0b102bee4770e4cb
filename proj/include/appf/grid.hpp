#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "appf/types.hpp"

namespace appf::grid {

enum class BusKind { SG, IBR, Load, Transfer };

const char* to_string(BusKind kind);
BusKind bus_kind_from_string(const std::string& name);

/// Network node. Quantities are per unit on the system base.
/// `v_mag`, `v_ang`, `p_inj`, `q_inj` hold the last known operating point.
struct Bus {
    int id = 0;  // external label used in case files and reports
    BusKind kind = BusKind::Transfer;
    std::size_t area = 0;  // index into Network::areas
    double v_mag = 1.0;
    double v_ang = 0.0;
    double p_inj = 0.0;
    double q_inj = 0.0;
    double v_min = 0.95;
    double v_max = 1.05;
    Complex shunt{0.0, 0.0};  // fixed shunt admittance to ground

    bool operator==(const Bus&) const = default;
};

/// Pi-model branch. `shunt` is the total line charging, split half per end.
struct Branch {
    std::size_t from = 0;
    std::size_t to = 0;
    Complex series_impedance{0.0, 0.1};
    Complex shunt{0.0, 0.0};
    double thermal_rating_p = 9.99;
    bool is_tie_line = false;

    bool operator==(const Branch&) const = default;
};

struct SgUnit {
    std::string name;
    std::size_t bus = 0;
    double p_set = 0.0;
    double q_set = 0.0;
    double v_set = 1.0;
    double p_min = 0.0;
    double p_max = 1.0;
    double q_min = -1.0;
    double q_max = 1.0;
    double inertia_h = 3.0;        // s
    double damping_d = 0.0;        // p.u. power / p.u. speed
    double droop_r = 0.05;         // p.u. speed / p.u. power
    double governor_time_constant = 0.5;
    double avr_gain = 20.0;
    double avr_time_constant = 1.0;
    double transient_reactance = 0.1;  // x'_d
    double agc_participation_factor = 0.0;

    bool operator==(const SgUnit&) const = default;
};

struct IbrUnit {
    std::string name;
    std::size_t bus = 0;
    double p_set = 0.0;
    double q_set = 0.0;
    double s_max = 0.7548;
    double p_min = 0.0;
    double p_max = 0.7548;
    double q_min = -0.5;
    double q_max = 0.5;
    double actuation_time_constant = 0.01;

    bool operator==(const IbrUnit&) const = default;
};

struct Load {
    std::size_t bus = 0;
    double p = 0.0;
    double q = 0.0;

    bool operator==(const Load&) const = default;
};

struct Area {
    int id = 0;
    std::string name;
    std::vector<std::size_t> buses;

    bool operator==(const Area&) const = default;
};

/// The static grid. Construct, then call `validate()`; treat as immutable afterwards.
struct Network {
    std::string name;
    double base_mva = 100.0;
    std::vector<Bus> buses;
    std::vector<Branch> branches;
    std::vector<SgUnit> sgs;
    std::vector<IbrUnit> ibrs;
    std::vector<Load> loads;
    std::vector<Area> areas;

    /// Checks every invariant and recomputes derived flags (tie lines).
    /// Throws ConfigError / DegenerateBranchError.
    void validate();

    std::size_t bus_count() const { return buses.size(); }
    std::size_t bus_index(int id) const;
    std::size_t area_index(int id) const;

    /// Net scheduled device injection at each bus: SG + IBR setpoints minus loads.
    Vector scheduled_p() const;
    Vector scheduled_q() const;
    double load_p(std::size_t bus) const;
    double load_q(std::size_t bus) const;

    std::vector<std::size_t> sgs_at(std::size_t bus) const;
    std::vector<std::size_t> ibrs_at(std::size_t bus) const;
    std::vector<std::size_t> ibrs_in_area(std::size_t area) const;
    std::vector<std::size_t> sgs_in_area(std::size_t area) const;
    /// Branches incident to `bus` that cross an area boundary.
    std::vector<std::size_t> ties_at(std::size_t bus) const;

    bool operator==(const Network&) const = default;
};

/// Tie-lines between hierarchy level i and i+1 together with their endpoints.
struct LevelLink {
    std::vector<std::size_t> tie_lines;
    std::vector<std::size_t> lower_buses;  // B^{i(i+1)}: endpoints inside level i
    std::vector<std::size_t> upper_buses;  // endpoints inside level i+1
};

struct HierarchyPartition {
    std::size_t contingent_area = 0;
    std::vector<std::vector<std::size_t>> levels;  // area indices, level 0 = {contingent}
    std::vector<LevelLink> links;                  // links[i] joins levels[i] and levels[i+1]
    std::vector<std::size_t> excluded_areas;       // unreachable from the contingent area
    std::vector<int> level_of_area;                // -1 when excluded

    std::size_t level_count() const { return levels.size(); }
    std::vector<std::size_t> buses_in_level(const Network& net, std::size_t level) const;
    int level_of_bus(const Network& net, std::size_t bus) const;
};

/// Standard nodal admittance matrix of the full network.
CMatrix build_admittance(const Network& net);

/// Admittance matrix of the sub-network induced by `buses` (rows follow the
/// order given). Branches with an endpoint outside the set are dropped,
/// shunt halves included.
CMatrix build_admittance(const Network& net, std::span<const std::size_t> buses);

/// Breadth-first levels of areas over tie-line adjacency.
HierarchyPartition assign_hierarchies(const Network& net, std::size_t contingent_area);

enum class HeadroomMode { Active, Reactive };

/// Distance from the current setpoint to the binding capability limit, floored at 0.
double compute_headroom(const IbrUnit& unit, HeadroomMode mode);

}  // namespace appf::grid
