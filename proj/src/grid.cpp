#include "appf/grid.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <set>
#include <sstream>

namespace appf::grid {

const char* to_string(BusKind kind) {
    switch (kind) {
        case BusKind::SG: return "SG";
        case BusKind::IBR: return "IBR";
        case BusKind::Load: return "Load";
        case BusKind::Transfer: return "Transfer";
    }
    return "?";
}

BusKind bus_kind_from_string(const std::string& name) {
    if (name == "SG") return BusKind::SG;
    if (name == "IBR") return BusKind::IBR;
    if (name == "Load") return BusKind::Load;
    if (name == "Transfer") return BusKind::Transfer;
    throw ConfigError("unknown bus kind '" + name + "'");
}

namespace {

void require(bool condition, const std::string& message) {
    if (!condition) throw ConfigError(message);
}

bool finite(double x) { return std::isfinite(x); }

}  // namespace

void Network::validate() {
    const std::size_t n = buses.size();
    require(n > 0, "network has no buses");
    require(base_mva > 0.0, "base_mva must be positive");
    require(!areas.empty(), "network has no areas");

    std::set<int> ids;
    for (const auto& bus : buses) {
        require(ids.insert(bus.id).second, "duplicate bus id " + std::to_string(bus.id));
        require(bus.area < areas.size(), "bus " + std::to_string(bus.id) + " has unknown area");
        require(bus.v_min < bus.v_max, "bus " + std::to_string(bus.id) + ": v_min >= v_max");
        require(finite(bus.v_mag) && finite(bus.v_ang) && finite(bus.p_inj) && finite(bus.q_inj),
                "bus " + std::to_string(bus.id) + ": non-finite quantity");
    }

    // Areas: non-overlapping, nonempty, consistent with Bus::area.
    std::vector<int> owner(n, -1);
    for (std::size_t a = 0; a < areas.size(); ++a) {
        require(!areas[a].buses.empty(), "area " + std::to_string(areas[a].id) + " is empty");
        for (auto b : areas[a].buses) {
            require(b < n, "area references unknown bus");
            require(owner[b] == -1, "bus " + std::to_string(buses[b].id) + " in two areas");
            owner[b] = static_cast<int>(a);
            require(buses[b].area == a, "bus " + std::to_string(buses[b].id) + " area mismatch");
        }
    }
    for (std::size_t b = 0; b < n; ++b)
        require(owner[b] != -1, "bus " + std::to_string(buses[b].id) + " belongs to no area");

    for (auto& br : branches) {
        require(br.from < n && br.to < n, "branch references unknown bus");
        require(br.from != br.to, "branch with identical endpoints");
        if (std::abs(br.series_impedance) == 0.0)
            throw DegenerateBranchError("branch " + std::to_string(buses[br.from].id) + "-" +
                                        std::to_string(buses[br.to].id) +
                                        " has zero series impedance");
        br.is_tie_line = buses[br.from].area != buses[br.to].area;
    }

    for (const auto& sg : sgs) {
        require(sg.bus < n, "SG references unknown bus");
        require(sg.p_min <= sg.p_set && sg.p_set <= sg.p_max, "SG " + sg.name + ": p_set out of bounds");
        require(sg.q_min <= sg.q_set && sg.q_set <= sg.q_max, "SG " + sg.name + ": q_set out of bounds");
        require(sg.inertia_h > 0.0, "SG " + sg.name + ": inertia must be positive");
        require(sg.droop_r > 0.0, "SG " + sg.name + ": droop must be positive");
        require(sg.transient_reactance > 0.0, "SG " + sg.name + ": x'd must be positive");
        require(buses[sg.bus].kind == BusKind::SG, "SG " + sg.name + " sits on a non-SG bus");
    }
    for (const auto& ibr : ibrs) {
        require(ibr.bus < n, "IBR references unknown bus");
        require(ibr.p_set * ibr.p_set + ibr.q_set * ibr.q_set <= ibr.s_max * ibr.s_max * (1 + 1e-12),
                "IBR " + ibr.name + ": setpoint outside MVA rating");
        require(ibr.p_min <= ibr.p_set && ibr.p_set <= ibr.p_max, "IBR " + ibr.name + ": p_set out of bounds");
        require(ibr.q_min <= ibr.q_set && ibr.q_set <= ibr.q_max, "IBR " + ibr.name + ": q_set out of bounds");
        require(buses[ibr.bus].kind == BusKind::IBR, "IBR " + ibr.name + " sits on a non-IBR bus");
    }
    for (const auto& load : loads) require(load.bus < n, "load references unknown bus");

    // AGC participation factors sum to 1 within every area that has SGs.
    for (std::size_t a = 0; a < areas.size(); ++a) {
        auto units = sgs_in_area(a);
        if (units.empty()) continue;
        double sum = 0.0;
        for (auto u : units) sum += sgs[u].agc_participation_factor;
        require(std::abs(sum - 1.0) < 1e-9,
                "AGC participation factors of area " + std::to_string(areas[a].id) + " do not sum to 1");
    }
}

std::size_t Network::bus_index(int id) const {
    for (std::size_t i = 0; i < buses.size(); ++i)
        if (buses[i].id == id) return i;
    throw ConfigError("unknown bus id " + std::to_string(id));
}

std::size_t Network::area_index(int id) const {
    for (std::size_t i = 0; i < areas.size(); ++i)
        if (areas[i].id == id) return i;
    throw ConfigError("unknown area id " + std::to_string(id));
}

double Network::load_p(std::size_t bus) const {
    double p = 0.0;
    for (const auto& l : loads)
        if (l.bus == bus) p += l.p;
    return p;
}

double Network::load_q(std::size_t bus) const {
    double q = 0.0;
    for (const auto& l : loads)
        if (l.bus == bus) q += l.q;
    return q;
}

Vector Network::scheduled_p() const {
    Vector p = Vector::Zero(static_cast<Eigen::Index>(buses.size()));
    for (const auto& sg : sgs) p[sg.bus] += sg.p_set;
    for (const auto& ibr : ibrs) p[ibr.bus] += ibr.p_set;
    for (const auto& l : loads) p[l.bus] -= l.p;
    return p;
}

Vector Network::scheduled_q() const {
    Vector q = Vector::Zero(static_cast<Eigen::Index>(buses.size()));
    for (const auto& sg : sgs) q[sg.bus] += sg.q_set;
    for (const auto& ibr : ibrs) q[ibr.bus] += ibr.q_set;
    for (const auto& l : loads) q[l.bus] -= l.q;
    return q;
}

std::vector<std::size_t> Network::sgs_at(std::size_t bus) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < sgs.size(); ++i)
        if (sgs[i].bus == bus) out.push_back(i);
    return out;
}

std::vector<std::size_t> Network::ibrs_at(std::size_t bus) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < ibrs.size(); ++i)
        if (ibrs[i].bus == bus) out.push_back(i);
    return out;
}

std::vector<std::size_t> Network::ibrs_in_area(std::size_t area) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < ibrs.size(); ++i)
        if (buses[ibrs[i].bus].area == area) out.push_back(i);
    return out;
}

std::vector<std::size_t> Network::sgs_in_area(std::size_t area) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < sgs.size(); ++i)
        if (buses[sgs[i].bus].area == area) out.push_back(i);
    return out;
}

std::vector<std::size_t> Network::ties_at(std::size_t bus) const {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < branches.size(); ++k) {
        const auto& br = branches[k];
        if (br.is_tie_line && (br.from == bus || br.to == bus)) out.push_back(k);
    }
    return out;
}

std::vector<std::size_t> HierarchyPartition::buses_in_level(const Network& net, std::size_t level) const {
    std::vector<std::size_t> out;
    for (auto a : levels.at(level))
        out.insert(out.end(), net.areas[a].buses.begin(), net.areas[a].buses.end());
    std::sort(out.begin(), out.end());
    return out;
}

int HierarchyPartition::level_of_bus(const Network& net, std::size_t bus) const {
    return level_of_area.at(net.buses.at(bus).area);
}

namespace {

void stamp(CMatrix& y, std::size_t i, std::size_t j, const Branch& br) {
    if (std::abs(br.series_impedance) == 0.0)
        throw DegenerateBranchError("branch with zero series impedance");
    const Complex ys = 1.0 / br.series_impedance;
    const auto a = static_cast<Eigen::Index>(i);
    const auto b = static_cast<Eigen::Index>(j);
    y(a, a) += ys + br.shunt / 2.0;
    y(b, b) += ys + br.shunt / 2.0;
    y(a, b) -= ys;
    y(b, a) -= ys;
}

}  // namespace

CMatrix build_admittance(const Network& net) {
    const auto n = static_cast<Eigen::Index>(net.buses.size());
    CMatrix y = CMatrix::Zero(n, n);
    for (const auto& br : net.branches) stamp(y, br.from, br.to, br);
    for (Eigen::Index k = 0; k < n; ++k) y(k, k) += net.buses[static_cast<std::size_t>(k)].shunt;
    return y;
}

CMatrix build_admittance(const Network& net, std::span<const std::size_t> buses) {
    std::vector<int> local(net.buses.size(), -1);
    for (std::size_t i = 0; i < buses.size(); ++i) local.at(buses[i]) = static_cast<int>(i);
    const auto n = static_cast<Eigen::Index>(buses.size());
    CMatrix y = CMatrix::Zero(n, n);
    for (const auto& br : net.branches) {
        if (local[br.from] < 0 || local[br.to] < 0) continue;
        stamp(y, static_cast<std::size_t>(local[br.from]), static_cast<std::size_t>(local[br.to]), br);
    }
    for (std::size_t i = 0; i < buses.size(); ++i)
        y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) += net.buses[buses[i]].shunt;
    return y;
}

HierarchyPartition assign_hierarchies(const Network& net, std::size_t contingent_area) {
    const std::size_t na = net.areas.size();
    if (contingent_area >= na) throw ConfigError("contingent area does not exist");

    std::vector<std::set<std::size_t>> adjacency(na);
    for (const auto& br : net.branches) {
        if (!br.is_tie_line) continue;
        const auto a = net.buses[br.from].area;
        const auto b = net.buses[br.to].area;
        adjacency[a].insert(b);
        adjacency[b].insert(a);
    }

    HierarchyPartition part;
    part.contingent_area = contingent_area;
    part.level_of_area.assign(na, -1);
    part.level_of_area[contingent_area] = 0;
    std::deque<std::size_t> queue{contingent_area};
    while (!queue.empty()) {
        const auto a = queue.front();
        queue.pop_front();
        for (auto b : adjacency[a]) {
            if (part.level_of_area[b] != -1) continue;
            part.level_of_area[b] = part.level_of_area[a] + 1;
            queue.push_back(b);
        }
    }

    int depth = 0;
    for (auto lvl : part.level_of_area) depth = std::max(depth, lvl);
    part.levels.resize(static_cast<std::size_t>(depth) + 1);
    for (std::size_t a = 0; a < na; ++a) {
        if (part.level_of_area[a] < 0)
            part.excluded_areas.push_back(a);
        else
            part.levels[static_cast<std::size_t>(part.level_of_area[a])].push_back(a);
    }

    part.links.resize(part.levels.size() - 1);
    for (std::size_t k = 0; k < net.branches.size(); ++k) {
        const auto& br = net.branches[k];
        if (!br.is_tie_line) continue;
        const int la = part.level_of_area[net.buses[br.from].area];
        const int lb = part.level_of_area[net.buses[br.to].area];
        if (la < 0 || lb < 0 || std::abs(la - lb) != 1) continue;
        const auto lower = la < lb ? br.from : br.to;
        const auto upper = la < lb ? br.to : br.from;
        auto& link = part.links[static_cast<std::size_t>(std::min(la, lb))];
        link.tie_lines.push_back(k);
        if (std::find(link.lower_buses.begin(), link.lower_buses.end(), lower) == link.lower_buses.end())
            link.lower_buses.push_back(lower);
        if (std::find(link.upper_buses.begin(), link.upper_buses.end(), upper) == link.upper_buses.end())
            link.upper_buses.push_back(upper);
    }
    for (auto& link : part.links) {
        std::sort(link.lower_buses.begin(), link.lower_buses.end());
        std::sort(link.upper_buses.begin(), link.upper_buses.end());
    }
    return part;
}

double compute_headroom(const IbrUnit& unit, HeadroomMode mode) {
    double h = 0.0;
    if (mode == HeadroomMode::Active) {
        h = std::min(unit.p_max, unit.s_max) - unit.p_set;
    } else {
        const double circle = std::sqrt(std::max(0.0, unit.s_max * unit.s_max - unit.p_set * unit.p_set));
        h = std::min(unit.q_max, circle) - unit.q_set;
    }
    return std::max(0.0, h);
}

}  // namespace appf::grid
