#include "appf/reference_case.hpp"

#include <array>

#include "appf/powerflow.hpp"

namespace appf::reference {

namespace {

struct MachineData {
    double h;
    double xd_prime;
    double rating_mva;  // nameplate, used to put the droop on system base
    double v_set;
    double p_max;
};

// Anderson/Fouad 9-bus machine constants on 100 MVA.
constexpr std::array<MachineData, 3> kMachines{{
    {23.64, 0.0608, 247.5, 1.040, 2.50},
    {6.40, 0.1198, 192.0, 1.025, 3.00},
    {3.01, 0.1813, 128.0, 1.025, 2.70},
}};

struct LineData {
    int from, to;
    double r, x, b;
};

constexpr std::array<LineData, 9> kLines{{
    {1, 4, 0.0, 0.0576, 0.0},
    {4, 5, 0.017, 0.092, 0.158},
    {5, 6, 0.039, 0.17, 0.358},
    {3, 6, 0.0, 0.0586, 0.0},
    {6, 7, 0.0119, 0.1008, 0.209},
    {7, 8, 0.0085, 0.072, 0.149},
    {8, 2, 0.0, 0.0625, 0.0},
    {8, 9, 0.032, 0.161, 0.306},
    {9, 4, 0.01, 0.085, 0.176},
}};

struct AreaDispatch {
    std::array<double, 3> sg_p;                    // MW; the slack value is a starting guess
    std::array<std::array<double, 2>, 3> loads;    // MW, MVAr at local buses 5, 7, 9
};

// Area 2 imports; areas 1 and 3 export. Area 2 totals: 382.8 MW / 115.2 MVAr
// of load, 325.5 MW of generation including 69 MW on its first machine.
constexpr std::array<AreaDispatch, 3> kDispatch{{
    {{90.0, 115.0, 80.0}, {{{90.0, 30.0}, {100.0, 35.0}, {110.0, 50.0}}}},
    {{69.0, 120.0, 76.5}, {{{110.0, 30.0}, {122.0, 35.0}, {150.8, 50.2}}}},
    {{85.0, 140.0, 80.0}, {{{95.0, 30.0}, {100.0, 35.0}, {115.0, 50.0}}}},
}};

constexpr double kBase = 100.0;
constexpr double kIbrRatingMva = 75.48;
constexpr double kIbrSetMw = 30.0;
constexpr double kIbrMaxMw = 70.0;
constexpr double kIbrQLimitMvar = 60.0;

int global_id(int area, int local) { return 11 * area + local; }

}  // namespace

const char* reference_case_path() { return APPF_DATA_DIR "/case33.json"; }

grid::Network build_reference_case() {
    using grid::BusKind;
    grid::Network net;
    net.name = "33-bus three-area reference";
    net.base_mva = kBase;

    for (int a = 0; a < 3; ++a) {
        net.areas.push_back({a + 1, "A" + std::to_string(a + 1), {}});
        for (int local = 1; local <= 11; ++local) {
            grid::Bus bus;
            bus.id = global_id(a, local);
            bus.area = static_cast<std::size_t>(a);
            if (local <= 3)
                bus.kind = BusKind::SG;
            else if (local == 5 || local == 7 || local == 9)
                bus.kind = BusKind::Load;
            else if (local >= 10)
                bus.kind = BusKind::IBR;
            else
                bus.kind = BusKind::Transfer;
            net.areas.back().buses.push_back(net.buses.size());
            net.buses.push_back(bus);
        }
        auto idx = [&](int local) { return static_cast<std::size_t>(11 * a + local - 1); };

        for (const auto& l : kLines) {
            grid::Branch br;
            br.from = idx(l.from);
            br.to = idx(l.to);
            br.series_impedance = {l.r, l.x};
            br.shunt = {0.0, l.b};
            br.thermal_rating_p = 2.5;
            net.branches.push_back(br);
        }
        // Inverter feeders: local 10 at bus 7, local 11 at bus 5.
        for (auto [ibr, host] : {std::pair{10, 7}, std::pair{11, 5}}) {
            grid::Branch br;
            br.from = idx(host);
            br.to = idx(ibr);
            br.series_impedance = {0.005, 0.05};
            br.thermal_rating_p = 1.5;
            net.branches.push_back(br);
        }

        const auto& d = kDispatch[static_cast<std::size_t>(a)];
        for (int m = 0; m < 3; ++m) {
            const auto& md = kMachines[static_cast<std::size_t>(m)];
            grid::SgUnit sg;
            sg.name = "SG" + std::to_string(3 * a + m + 1);
            sg.bus = idx(m + 1);
            sg.p_set = d.sg_p[static_cast<std::size_t>(m)] / kBase;
            sg.v_set = md.v_set;
            sg.p_min = 0.0;
            sg.p_max = md.p_max;
            sg.q_min = -3.0;
            sg.q_max = 3.0;
            sg.inertia_h = md.h;
            sg.damping_d = 2.0 * md.h;
            sg.droop_r = 0.05 * kBase / md.rating_mva;
            sg.governor_time_constant = 0.5;
            sg.avr_gain = 20.0;
            sg.avr_time_constant = 1.0;
            sg.transient_reactance = md.xd_prime;
            sg.agc_participation_factor = md.rating_mva / (247.5 + 192.0 + 128.0);
            net.sgs.push_back(sg);
        }
        for (int k = 0; k < 2; ++k) {
            grid::IbrUnit ibr;
            ibr.name = "IBR" + std::to_string(2 * a + k + 1);
            ibr.bus = idx(10 + k);
            ibr.p_set = kIbrSetMw / kBase;
            ibr.s_max = kIbrRatingMva / kBase;
            ibr.p_min = 0.0;
            ibr.p_max = kIbrMaxMw / kBase;
            ibr.q_min = -kIbrQLimitMvar / kBase;
            ibr.q_max = kIbrQLimitMvar / kBase;
            ibr.actuation_time_constant = 0.01;
            net.ibrs.push_back(ibr);
        }
        const std::array<int, 3> load_bus{5, 7, 9};
        for (std::size_t k = 0; k < 3; ++k)
            net.loads.push_back({idx(load_bus[k]), d.loads[k][0] / kBase, d.loads[k][1] / kBase});
    }

    // Tie lines: 8-15 (A1-A2), 17-26 (A2-A3), 6-30 (A1-A3).
    for (auto [f, t] : {std::pair{8, 15}, std::pair{17, 26}, std::pair{6, 30}}) {
        grid::Branch br;
        br.from = static_cast<std::size_t>(f - 1);
        br.to = static_cast<std::size_t>(t - 1);
        br.series_impedance = {0.05, 0.20};
        br.shunt = {0.0, 0.15};
        br.thermal_rating_p = 1.5;
        net.branches.push_back(br);
    }

    net.validate();
    const auto x = powerflow::solve_regular_power_flow(net, 0);
    powerflow::apply_solution(net, x);
    net.validate();
    return net;
}

}  // namespace appf::reference
