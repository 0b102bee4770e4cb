#pragma once

#include <cstdint>
#include <random>

#include "appf/grid.hpp"
#include "appf/powerflow.hpp"

namespace testing {

using appf::Complex;
using appf::grid::BusKind;

/// Incremental construction of small networks for tests.
struct NetBuilder {
    appf::grid::Network net;

    explicit NetBuilder(int areas = 1) {
        net.name = "test";
        for (int a = 0; a < areas; ++a) net.areas.push_back({a + 1, "A" + std::to_string(a + 1), {}});
    }

    std::size_t bus(BusKind kind, std::size_t area = 0) {
        appf::grid::Bus b;
        b.id = static_cast<int>(net.buses.size()) + 1;
        b.kind = kind;
        b.area = area;
        net.areas[area].buses.push_back(net.buses.size());
        net.buses.push_back(b);
        return net.buses.size() - 1;
    }

    void branch(std::size_t from, std::size_t to, Complex z, Complex shunt = {}) {
        appf::grid::Branch br;
        br.from = from;
        br.to = to;
        br.series_impedance = z;
        br.shunt = shunt;
        net.branches.push_back(br);
    }

    void sg(std::size_t bus, double p, double v = 1.0) {
        appf::grid::SgUnit u;
        u.name = "G" + std::to_string(net.sgs.size() + 1);
        u.bus = bus;
        u.p_set = p;
        u.v_set = v;
        u.p_min = -10.0;
        u.p_max = 10.0;
        u.q_min = -10.0;
        u.q_max = 10.0;
        net.sgs.push_back(u);
    }

    void ibr(std::size_t bus, double p, double q = 0.0) {
        appf::grid::IbrUnit u;
        u.name = "I" + std::to_string(net.ibrs.size() + 1);
        u.bus = bus;
        u.p_set = p;
        u.q_set = q;
        net.ibrs.push_back(u);
    }

    void load(std::size_t bus, double p, double q) { net.loads.push_back({bus, p, q}); }

    appf::grid::Network build() {
        // Equal AGC participation inside each area.
        for (std::size_t a = 0; a < net.areas.size(); ++a) {
            auto units = net.sgs_in_area(a);
            for (auto u : units) net.sgs[u].agc_participation_factor = 1.0 / static_cast<double>(units.size());
        }
        net.validate();
        return net;
    }
};

inline double max_abs_mismatch(const appf::CMatrix& y, const appf::powerflow::PowerFlowSolution& s) {
    appf::CVector inj(static_cast<Eigen::Index>(s.size()));
    for (Eigen::Index k = 0; k < inj.size(); ++k) inj[k] = Complex(s.p[k], s.q[k]);
    const auto r = appf::powerflow::mismatch(y, s.voltages(), inj);
    return r.size() ? r.cwiseAbs().maxCoeff() : 0.0;
}

}  // namespace testing
