#include <cmath>
#include <sstream>

#include <doctest.h>
#include <json.hpp>

#include "appf/dynamics.hpp"
#include "appf/reference_case.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace appf;
using testing::BusKind;

namespace {

// Two areas, one machine each, an inverter behind the area-1 load bus.
grid::Network two_area() {
    testing::NetBuilder b(2);
    const auto g1 = b.bus(BusKind::SG, 0);
    const auto l1 = b.bus(BusKind::Load, 0);
    const auto g2 = b.bus(BusKind::SG, 1);
    const auto l2 = b.bus(BusKind::Load, 1);
    const auto i1 = b.bus(BusKind::IBR, 0);
    b.branch(g1, l1, {0.01, 0.1});
    b.branch(l1, i1, {0.005, 0.05});
    b.branch(g2, l2, {0.01, 0.1});
    b.branch(l1, l2, {0.02, 0.2}, {0.0, 0.05});
    b.sg(g1, 0.5);
    b.sg(g2, 0.6);
    b.ibr(i1, 0.3);
    b.load(l1, 0.8, 0.2);
    b.load(l2, 0.6, 0.1);
    auto net = b.build();
    for (auto& u : net.sgs) {
        u.damping_d = 1.0;
        u.inertia_h = 4.0;
        u.transient_reactance = 0.2;
    }
    return net;
}

double max_state_change(const dyn::Simulator& a, const std::vector<dyn::SgState>& sg0, const CVector& v0) {
    double m = (a.voltages() - v0).cwiseAbs().maxCoeff();
    for (std::size_t k = 0; k < sg0.size(); ++k) {
        const auto& s = a.sgs()[k];
        m = std::max({m, std::abs(s.delta - sg0[k].delta), std::abs(s.speed_dev - sg0[k].speed_dev),
                      std::abs(s.p_mech - sg0[k].p_mech), std::abs(s.e_internal - sg0[k].e_internal)});
    }
    return m;
}

}  // namespace

TEST_CASE("simulator holds its initial equilibrium") {
    SUBCASE("reference case, AGC on") {
        dyn::SimOptions o;
        o.agc.enabled = true;
        dyn::Simulator sim(reference::build_reference_case(), o);
        const auto sg0 = sim.sgs();
        const CVector v0 = sim.voltages();
        double worst = 0.0;
        sim.run_until(10.0, [&](const dyn::Sample& s) {
            for (double f : s.frequency) worst = std::max(worst, std::abs(f - kNominalHz));
        });
        CHECK(max_state_change(sim, sg0, v0) <= 1e-9);
        CHECK(worst <= 1e-9);
        CHECK_FALSE(sim.agc_active());
    }
    SUBCASE("initial voltages match the power flow") {
        const auto net = two_area();
        dyn::Simulator sim(net);
        const auto v = sim.initial_point().voltages();
        CHECK((sim.voltages() - v).cwiseAbs().maxCoeff() <= 1e-9);
    }
}

TEST_CASE("inverter actuation is a first-order lag") {
    const auto net = two_area();
    dyn::Simulator sim(net);
    const double tau = net.ibrs[0].actuation_time_constant;
    const double p0 = sim.ibrs()[0].p;
    sim.schedule({1.0, dyn::SetpointArrival{{{0, p0 + 0.1, 0.0}}}, "step"});
    sim.run_until(1.0 + tau);
    CHECK(sim.ibrs()[0].p - p0 == doctest::Approx(0.1 * (1.0 - std::exp(-1.0))).epsilon(1e-4));
    sim.run_until(1.0 + 5.0 * tau);
    CHECK(sim.ibrs()[0].p - p0 >= 0.99 * 0.1);

    SUBCASE("setpoints are clipped to capability") {
        sim.schedule({2.0, dyn::SetpointArrival{{{0, 5.0, 5.0}}}, "too much"});
        sim.run_until(2.5);
        const auto& u = net.ibrs[0];
        CHECK(std::hypot(sim.ibrs()[0].p_ref, sim.ibrs()[0].q_ref) <= u.s_max + 1e-12);
        CHECK(std::hypot(sim.ibrs()[0].p, sim.ibrs()[0].q) <= u.s_max + 1e-9);
    }
}

TEST_CASE("single machine settles on its droop line") {
    testing::NetBuilder b;
    const auto g = b.bus(BusKind::SG);
    const auto l = b.bus(BusKind::Load);
    const Complex z{0.02, 0.15};
    b.branch(g, l, z);
    b.sg(g, 0.7);
    b.load(l, 0.7, 0.2);
    auto net = b.build();
    net.sgs[0].damping_d = 1.5;
    net.sgs[0].droop_r = 0.05;
    net.sgs[0].inertia_h = 3.0;

    dyn::Simulator sim(net);
    const double pe0 = sim.sgs()[0].p_mech;
    const double vt = sim.sgs()[0].v_ref;
    sim.schedule({0.5, dyn::LoadStep{l, 0.1, 0.0}, "step"});
    dyn::Sample last;
    sim.run_until(60.0, [&](const dyn::Sample& s) { last = s; });

    // Independent steady state: the machine terminal is held at v_ref by the
    // integral AVR and supplies the stepped load plus losses.
    Eigen::MatrixXcd y(2, 2);
    y << 1.0 / z, -1.0 / z, -1.0 / z, 1.0 / z;
    const auto v = oracle::pq_power_flow(y, vt, {0.0, -Complex{0.8, 0.2}});
    REQUIRE(v);
    const double pe1 = oracle::slack_injection(y, *v).real();
    const auto& u = net.sgs[0];
    const double dw = -(pe1 - pe0) / (1.0 / u.droop_r + u.damping_d);
    CHECK(sim.sgs()[0].speed_dev == doctest::Approx(dw).epsilon(1e-6));
    CHECK(last.frequency[l] == doctest::Approx(kNominalHz * (1.0 + dw)).epsilon(1e-9));
    CHECK(last.sg_p[0] == doctest::Approx(pe1).epsilon(1e-7));
}

TEST_CASE("AGC restores frequency and tie schedules") {
    const auto net = two_area();
    const std::size_t load_bus = 1;
    auto run = [&](bool agc) {
        dyn::SimOptions o;
        o.agc.enabled = agc;
        o.agc.integral_gain = 0.2;
        o.agc.activation_delay = 2.0;
        dyn::Simulator sim(net, o);
        const auto base = sim.sample().tie_p_in;
        sim.schedule({1.0, dyn::LoadStep{load_bus, 0.1, 0.0}, "step"});
        dyn::Sample last;
        sim.run_until(120.0, [&](const dyn::Sample& s) { last = s; });
        return std::tuple{last, base, sim.sgs()[0].speed_dev};
    };
    const auto [with, base, dw_agc] = run(true);
    CHECK(std::abs(dw_agc) <= 1e-6);
    CHECK(std::abs(with.tie_p_in[0] - base[0]) <= 1e-4);
    CHECK(std::abs(with.tie_p_in[1] - base[1]) <= 1e-4);

    const auto [without, base2, dw] = run(false);
    CHECK(std::abs(dw) >= 1e-4);
    CHECK(std::abs(without.frequency[0] - kNominalHz) >= 1e-3);
}

TEST_CASE("runs are deterministic and exported consistently") {
    const auto net = two_area();
    auto once = [&] {
        const auto t = dyn::run_scenario(net, {{1.0, dyn::LoadStep{1, 0.05, 0.02}, "load"}}, 3.0);
        std::ostringstream csv;
        t.write_csv(csv);
        return std::pair{csv.str(), t};
    };
    const auto [a, ta] = once();
    const auto [b, tb] = once();
    CHECK(a == b);
    CHECK(ta.samples.size() == 181);
    CHECK(a.substr(0, a.find('\n')) ==
          "time,f_1,f_2,f_3,f_4,f_5,v_1,v_2,v_3,v_4,v_5,p_G1,q_G1,p_G2,q_G2,p_I1,q_I1");
    const auto meta = nlohmann::json::parse(ta.metadata_json({}, "cfg"));
    CHECK(meta["events"].size() == 1);
    CHECK(meta["events"][0]["time"].get<double>() == doctest::Approx(1.0));
    CHECK(meta["config_hash"].get<std::string>().size() == 16);
    CHECK(meta["config_hash"] != nlohmann::json::parse(ta.metadata_json({}, "cfg2"))["config_hash"]);
}

TEST_CASE("halving the step barely moves the trajectory") {
    const auto net = reference::build_reference_case();
    auto run = [&](double dt) {
        dyn::SimOptions o;
        o.dt = dt;
        return dyn::run_scenario(net, {{1.0, dyn::LoadStep{net.bus_index(16), 0.63, 0.0}, "load"}}, 6.0, o);
    };
    const auto coarse = run(1.0 / 1200.0);
    const auto fine = run(1.0 / 2400.0);
    REQUIRE(coarse.samples.size() == fine.samples.size());
    double worst = 0.0;
    for (std::size_t k = 0; k < coarse.samples.size(); ++k)
        for (std::size_t b = 0; b < net.bus_count(); ++b)
            worst = std::max(worst, std::abs(coarse.samples[k].frequency[b] - fine.samples[k].frequency[b]));
    CHECK(worst < 1e-4);
}

TEST_CASE("generation minus load equals branch losses at every sample") {
    const auto net = two_area();
    dyn::Simulator sim(net);
    sim.schedule({0.5, dyn::LoadStep{3, 0.05, 0.05}, "load"});
    sim.schedule({1.0, dyn::SetpointArrival{{{0, 0.4, 0.1}}}, "ibr"});
    double worst = 0.0;
    sim.run_until(4.0, [&](const dyn::Sample& s) {
        double gen = 0.0;
        const double load = 1.4 + (s.time >= 0.5 ? 0.05 : 0.0);
        for (double p : s.sg_p) gen += p;
        for (double p : s.ibr_p) gen += p;
        double losses = 0.0;
        for (const auto& br : net.branches) {
            const auto f = powerflow::line_flow(br, std::polar(s.v_mag[br.from], s.v_ang[br.from]),
                                                std::polar(s.v_mag[br.to], s.v_ang[br.to]));
            losses += f.p_from + f.p_to;
        }
        worst = std::max(worst, std::abs(gen - load - losses));
    });
    CHECK(worst <= 1e-8);
}

TEST_CASE("generator trip and event bookkeeping") {
    const auto net = two_area();
    dyn::Simulator sim(net);
    const double pre = sim.sample().sg_p[1];
    sim.schedule({1.0, dyn::AvrSetpoint{0, 1.01}, "second"});
    sim.schedule({0.5, dyn::GeneratorTrip{1}, "trip"});
    sim.schedule({1.0, dyn::SetpointArrival{{{0, 0.5, 0.0}}}, "third"});
    dyn::Sample after;
    sim.run_until(3.0, [&](const dyn::Sample& s) {
        if (std::abs(s.time - 0.5) < 1e-9) after = s;
    });
    CHECK(after.lost_generation[1] == doctest::Approx(pre).epsilon(1e-12));
    CHECK(after.sg_p[1] == 0.0);
    CHECK_FALSE(sim.sgs()[1].online);
    const auto& ev = sim.applied_events();
    REQUIRE(ev.size() == 3);
    CHECK(ev[0].label == "trip");
    CHECK(ev[1].label == "second");
    CHECK(ev[2].label == "third");
    CHECK(sim.sgs()[0].v_ref == 1.01);
}

TEST_CASE("a collapsing network reports the state at failure") {
    const auto net = two_area();
    dyn::Simulator sim(net);
    sim.schedule({0.2, dyn::LoadStep{3, 40.0, 10.0}, "collapse"});
    try {
        sim.run_until(2.0);
        FAIL("expected a simulation error");
    } catch (const dyn::SimulationError& e) {
        const auto dump = nlohmann::json::parse(e.state_dump);
        CHECK(dump["sg"].size() == 2);
        CHECK(dump["time"].get<double>() == doctest::Approx(0.2).epsilon(1e-6));
    }
}

TEST_CASE("bad simulator options") {
    dyn::SimOptions o;
    o.dt = 1e-3;  // 60 Hz output is not a whole number of steps
    CHECK_THROWS_AS(dyn::Simulator(two_area(), o), ConfigError);
}
