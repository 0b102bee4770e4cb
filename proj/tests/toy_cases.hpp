#pragma once

#include <random>

#include "appf/stage_solver.hpp"
#include "oracles.hpp"

namespace toy {

using appf::Complex;
using appf::powerflow::Quantity;

/// Bus 0 is a boundary bus (|V|, theta fixed), bus 1 an inverter with free
/// P and Q, the rest constant-power loads. Objective: deviation of the
/// boundary injection from its pre-event value plus deviation of the
/// inverter P from a requested setpoint.
struct Instance {
    appf::CMatrix y;
    Complex v0;
    Complex s0_pre;          // boundary injection before the load step
    double p_request = 0.0;  // requested inverter P
    double p_min = 0.0, p_max = 0.0, q_min = 0.0, q_max = 0.0;
    std::vector<Complex> loads;  // per bus, negative injection
    double w1 = 1.0, w2 = 1.0;

    std::size_t size() const { return static_cast<std::size_t>(y.rows()); }

    appf::powerflow::StageSpec spec() const {
        const auto n = size();
        appf::powerflow::StageSpec s(n);
        s.initial_point.v_mag[0] = std::abs(v0);
        s.initial_point.v_ang[0] = std::arg(v0);
        s.initial_point.p[0] = s0_pre.real();
        s.initial_point.q[0] = s0_pre.imag();
        s.mask.set_pattern(0, Quantity::P, Quantity::Q);
        for (auto q : {Quantity::Vm, Quantity::Va, Quantity::P, Quantity::Q}) s.mask.set_fixed(1, q, false);
        s.initial_point.p[1] = p_request;
        s.bound(1, Quantity::P) = {p_min, p_max};
        s.bound(1, Quantity::Q) = {q_min, q_max};
        for (std::size_t k = 2; k < n; ++k) {
            s.mask.set_pattern(k, Quantity::Vm, Quantity::Va);
            s.initial_point.p[static_cast<Eigen::Index>(k)] = -loads[k].real();
            s.initial_point.q[static_cast<Eigen::Index>(k)] = -loads[k].imag();
        }
        for (std::size_t k = 0; k < n; ++k) s.balance_scope.push_back(k);
        s.objective.push_back({w1, {{{0, Quantity::P}, 1.0}}, s0_pre.real(), "boundary P"});
        s.objective.push_back({w1, {{{0, Quantity::Q}, 1.0}}, s0_pre.imag(), "boundary Q"});
        s.objective.push_back({w2, {{{1, Quantity::P}, 1.0}}, p_request, "inverter P"});
        return s;
    }

    /// Objective evaluated through an independent power-flow solve with the
    /// inverter injection fixed at (p, q).
    double evaluate(double p, double q) const {
        std::vector<Complex> s(size());
        s[1] = Complex(p, q);
        for (std::size_t k = 2; k < size(); ++k) s[k] = -loads[k];
        const auto v = oracle::pq_power_flow(y, v0, s);
        if (!v) return std::numeric_limits<double>::infinity();
        const Complex sb = oracle::slack_injection(y, *v);
        return w1 * std::norm(sb - s0_pre) + w2 * (p - p_request) * (p - p_request);
    }
};

inline Instance random_instance(std::mt19937& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Instance t;
    const int n = 3 + static_cast<int>(rng() % 2);
    t.y = appf::CMatrix::Zero(n, n);
    auto link = [&](int a, int b) {
        const Complex z(0.005 + 0.03 * u(rng), 0.05 + 0.15 * u(rng));
        const Complex sh(0.0, 0.05 * u(rng));
        t.y(a, a) += 1.0 / z + sh / 2.0;
        t.y(b, b) += 1.0 / z + sh / 2.0;
        t.y(a, b) -= 1.0 / z;
        t.y(b, a) -= 1.0 / z;
    };
    for (int k = 1; k < n; ++k) link(static_cast<int>(rng() % static_cast<unsigned>(k)), k);
    if (n == 4) link(1, 3);
    t.v0 = std::polar(0.98 + 0.06 * u(rng), 0.1 * (u(rng) - 0.5));
    t.loads.assign(static_cast<std::size_t>(n), 0.0);
    for (int k = 2; k < n; ++k) t.loads[static_cast<std::size_t>(k)] = Complex(0.2 + 0.5 * u(rng), 0.3 * u(rng));
    t.p_min = 0.0;
    t.p_max = 0.4 + 0.4 * u(rng);
    t.q_min = -0.4;
    t.q_max = 0.4;
    const double p_pre = 0.2 * u(rng);
    // Pre-event boundary injection from the inverter at p_pre, q = 0 and loads
    // 0.1 lighter at the last bus: the optimizer then has to cover a load step.
    std::vector<Complex> s(static_cast<std::size_t>(n));
    s[1] = p_pre;
    for (int k = 2; k < n; ++k) s[static_cast<std::size_t>(k)] = -t.loads[static_cast<std::size_t>(k)];
    s.back() += 0.1;
    const auto v = oracle::pq_power_flow(t.y, t.v0, s);
    t.s0_pre = oracle::slack_injection(t.y, *v);
    // Requested setpoint: sometimes above the P limit so the bound binds.
    t.p_request = p_pre + 0.1 + (u(rng) < 0.3 ? t.p_max : 0.0);
    t.w1 = 0.5 + u(rng);
    t.w2 = 0.5 + u(rng);
    return t;
}

}  // namespace toy
