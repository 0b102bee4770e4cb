#include <doctest.h>

#include <random>

#include "support.hpp"

using namespace appf;
using testing::NetBuilder;
using grid::BusKind;

TEST_CASE("mismatch") {
    SUBCASE("flat profile without shunts has zero residual") {
        NetBuilder b;
        for (int i = 0; i < 4; ++i) b.bus(BusKind::Load);
        b.branch(0, 1, {0.01, 0.1});
        b.branch(1, 2, {0.02, 0.2});
        b.branch(2, 3, {0.03, 0.1});
        const auto y = grid::build_admittance(b.build());
        const CVector v = CVector::Ones(4);
        CHECK(powerflow::mismatch(y, v, CVector::Zero(4)).cwiseAbs().maxCoeff() < 1e-14);
    }
    SUBCASE("lossless two-bus flow") {
        NetBuilder b;
        b.bus(BusKind::Load);
        b.bus(BusKind::Load);
        b.branch(0, 1, {0.0, 0.1});
        const auto y = grid::build_admittance(b.build());
        CVector v(2);
        v << std::polar(1.0, 0.0), std::polar(1.0, -0.1);
        const auto s = powerflow::injections(y, v);
        CHECK(s[0].real() == doctest::Approx(std::sin(0.1) / 0.1).epsilon(1e-12));
        CHECK(s[0].real() == doctest::Approx(0.99833).epsilon(1e-5));
        CHECK(s[1].real() == doctest::Approx(-s[0].real()).epsilon(1e-12));
    }
}

TEST_CASE("line flow") {
    grid::Branch br;
    br.series_impedance = {0.0, 0.1};
    auto f = powerflow::line_flow(br, std::polar(1.0, 0.05), std::polar(1.0, 0.05));
    CHECK(std::abs(f.p_from) < 1e-15);
    f = powerflow::line_flow(br, std::polar(1.0, 0.1), std::polar(1.0, 0.0));
    CHECK(f.p_from == doctest::Approx(0.99833).epsilon(1e-5));

    // Open receiving end: I_to = 0, so V_to = V_from / (1 + z y/2); the
    // sending end then supplies the charging of both halves.
    br.series_impedance = {0.01, 0.1};
    br.shunt = {0.0, 0.2};
    const Complex vf = 1.0;
    const Complex vt = vf / (1.0 + br.series_impedance * br.shunt / 2.0);
    f = powerflow::line_flow(br, vf, vt);
    CHECK(std::abs(f.p_to) < 1e-12);
    CHECK(std::abs(f.q_to) < 1e-12);
    // Sending end, no series current term: I = Vf*y/2 + (Vf-Vt)/z = Vt*y/2 + Vf*y/2.
    const Complex i = vt * br.shunt / 2.0 + vf * br.shunt / 2.0;
    CHECK(f.q_from == doctest::Approx((vf * std::conj(i)).imag()).epsilon(1e-12));
}

TEST_CASE("power derivatives match central differences") {
    std::mt19937 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    NetBuilder b;
    for (int i = 0; i < 5; ++i) b.bus(BusKind::Load);
    b.branch(0, 1, {0.01, 0.1}, {0.0, 0.1});
    b.branch(1, 2, {0.02, 0.2});
    b.branch(2, 3, {0.03, 0.1}, {0.0, 0.05});
    b.branch(3, 4, {0.01, 0.05});
    b.branch(4, 0, {0.04, 0.3});
    const auto y = grid::build_admittance(b.build());
    for (int trial = 0; trial < 10; ++trial) {
        Vector vm(5), va(5);
        for (int k = 0; k < 5; ++k) {
            vm[k] = 0.9 + 0.2 * u(rng);
            va[k] = 0.3 * (u(rng) - 0.5);
        }
        const auto d = powerflow::power_derivatives(y, powerflow::to_phasors(vm, va));
        const double h = 1e-6;
        double worst = 0.0;
        for (int j = 0; j < 5; ++j) {
            for (int which = 0; which < 2; ++which) {
                Vector m1 = vm, m2 = vm, a1 = va, a2 = va;
                (which == 0 ? m1 : a1)[j] += h;
                (which == 0 ? m2 : a2)[j] -= h;
                const CVector fd = (powerflow::injections(y, powerflow::to_phasors(m1, a1)) -
                                    powerflow::injections(y, powerflow::to_phasors(m2, a2))) /
                                   (2.0 * h);
                const CVector an = which == 0 ? d.ds_dvm.col(j) : d.ds_dva.col(j);
                for (int k = 0; k < 5; ++k) {
                    const double scale = std::max(1.0, std::abs(an[k]));
                    worst = std::max(worst, std::abs(fd[k] - an[k]) / scale);
                }
            }
        }
        CHECK(worst < 1e-5);
    }
}

namespace {

/// Gauss-Seidel on the two-bus slack + PQ system; independent of the Newton code.
Complex gauss_seidel_two_bus(Complex z, Complex s_load) {
    const Complex y = 1.0 / z;
    Complex v2 = 1.0;
    for (int it = 0; it < 10000; ++it) {
        // I2 = y (V2 - V1) = conj(S2 / V2) with S2 = -s_load
        v2 = 1.0 + std::conj(-s_load / v2) / y;
    }
    return v2;
}

}  // namespace

TEST_CASE("regular power flow") {
    SUBCASE("two-bus slack and load") {
        NetBuilder b;
        auto s = b.bus(BusKind::SG);
        auto l = b.bus(BusKind::Load);
        b.sg(s, 0.0);
        b.load(l, 0.5, 0.2);
        b.branch(s, l, {0.01, 0.1});
        const auto net = b.build();
        const auto sol = powerflow::solve_regular_power_flow(net, s);
        CHECK(sol.converged);
        CHECK(sol.max_mismatch <= 1e-8);
        const Complex v2 = gauss_seidel_two_bus({0.01, 0.1}, {0.5, 0.2});
        CHECK(sol.v_mag[1] == doctest::Approx(std::abs(v2)).epsilon(1e-8));
        CHECK(sol.v_ang[1] == doctest::Approx(std::arg(v2)).epsilon(1e-8));
        CHECK(testing::max_abs_mismatch(grid::build_admittance(net), sol) <= 1e-8);
    }
    SUBCASE("zero load gives the flat profile") {
        NetBuilder b;
        auto s = b.bus(BusKind::SG);
        auto l = b.bus(BusKind::Load);
        b.sg(s, 0.0);
        b.branch(s, l, {0.01, 0.1});
        const auto sol = powerflow::solve_regular_power_flow(b.build(), s);
        CHECK(sol.iterations == 0);
        CHECK(sol.v_mag[1] == 1.0);
    }
    SUBCASE("load beyond the transfer limit diverges") {
        NetBuilder b;
        auto s = b.bus(BusKind::SG);
        auto l = b.bus(BusKind::Load);
        b.sg(s, 0.0);
        b.load(l, 50.0, 0.0);
        b.branch(s, l, {0.0, 0.1});
        CHECK_THROWS_AS(powerflow::solve_regular_power_flow(b.build(), s), powerflow::DivergedError);
    }
}

TEST_CASE("apply_solution reproduces the operating point") {
    NetBuilder b;
    auto g1 = b.bus(BusKind::SG);
    auto g2 = b.bus(BusKind::SG);
    auto i = b.bus(BusKind::IBR);
    auto l = b.bus(BusKind::Load);
    b.sg(g1, 0.0, 1.02);
    b.sg(g2, 0.4, 1.01);
    b.ibr(i, 0.2, 0.0);
    b.load(l, 0.9, 0.3);
    b.branch(g1, l, {0.01, 0.1});
    b.branch(g2, l, {0.01, 0.12});
    b.branch(i, l, {0.02, 0.08});
    auto net = b.build();
    const auto sol = powerflow::solve_regular_power_flow(net, g1);
    powerflow::apply_solution(net, sol);
    const auto again = powerflow::solve_regular_power_flow(net, g1, {.flat_start = false});
    CHECK(again.iterations == 0);
    CHECK((net.scheduled_p() - sol.p).cwiseAbs().maxCoeff() < 1e-12);
}
