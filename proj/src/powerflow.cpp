#include "appf/powerflow.hpp"

#include <algorithm>
#include <cmath>

namespace appf::powerflow {

CVector PowerFlowSolution::voltages() const { return to_phasors(v_mag, v_ang); }

CVector to_phasors(const Vector& v_mag, const Vector& v_ang) {
    CVector v(v_mag.size());
    for (Eigen::Index k = 0; k < v.size(); ++k) v[k] = std::polar(v_mag[k], v_ang[k]);
    return v;
}

CVector injections(const CMatrix& y, const CVector& v) {
    const CVector current = y * v;
    return v.cwiseProduct(current.conjugate());
}

CVector mismatch(const CMatrix& y, const CVector& v, const CVector& s_injection) {
    return injections(y, v) - s_injection;
}

PowerDerivatives power_derivatives(const CMatrix& y, const CVector& v) {
    const auto n = v.size();
    const CVector current = y * v;
    CVector v_unit(n);
    for (Eigen::Index k = 0; k < n; ++k) v_unit[k] = v[k] / std::abs(v[k]);

    PowerDerivatives d;
    // dS/d|V| = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|)
    d.ds_dvm = v.asDiagonal() * (y * v_unit.asDiagonal()).conjugate();
    // dS/dtheta = j diag(V) conj(diag(I) - Y diag(V))
    CMatrix inner = -(y * v.asDiagonal());
    for (Eigen::Index k = 0; k < n; ++k) {
        inner(k, k) += current[k];
        d.ds_dvm(k, k) += std::conj(current[k]) * v_unit[k];
    }
    d.ds_dva = Complex(0.0, 1.0) * (v.asDiagonal() * inner.conjugate());
    return d;
}

PowerFlowSolution solve_newton(const CMatrix& y, const std::vector<BusRole>& roles, const Vector& v_mag,
                               const Vector& v_ang, const Vector& p, const Vector& q,
                               const NewtonOptions& options) {
    const auto n = static_cast<Eigen::Index>(roles.size());
    std::vector<Eigen::Index> angle_vars;
    std::vector<Eigen::Index> mag_vars;
    for (Eigen::Index k = 0; k < n; ++k) {
        if (roles[static_cast<std::size_t>(k)] != BusRole::Slack) angle_vars.push_back(k);
        if (roles[static_cast<std::size_t>(k)] == BusRole::PQ) mag_vars.push_back(k);
    }
    const auto na = static_cast<Eigen::Index>(angle_vars.size());
    const auto nm = static_cast<Eigen::Index>(mag_vars.size());

    PowerFlowSolution sol;
    sol.v_mag = v_mag;
    sol.v_ang = v_ang;
    CVector s_spec(n);
    for (Eigen::Index k = 0; k < n; ++k) s_spec[k] = Complex(p[k], q[k]);

    auto residual = [&](const CVector& v) {
        const CVector r = mismatch(y, v, s_spec);
        Vector f(na + nm);
        for (Eigen::Index i = 0; i < na; ++i) f[i] = r[angle_vars[static_cast<std::size_t>(i)]].real();
        for (Eigen::Index i = 0; i < nm; ++i) f[na + i] = r[mag_vars[static_cast<std::size_t>(i)]].imag();
        return f;
    };

    CVector v = to_phasors(sol.v_mag, sol.v_ang);
    Vector f = residual(v);
    double norm = f.size() ? f.lpNorm<Eigen::Infinity>() : 0.0;
    int iter = 0;
    while (!(norm <= options.tolerance) && iter < options.max_iterations && std::isfinite(norm)) {
        const auto d = power_derivatives(y, v);
        Matrix jac(na + nm, na + nm);
        for (Eigen::Index i = 0; i < na; ++i) {
            const auto row = angle_vars[static_cast<std::size_t>(i)];
            for (Eigen::Index j = 0; j < na; ++j) jac(i, j) = d.ds_dva(row, angle_vars[static_cast<std::size_t>(j)]).real();
            for (Eigen::Index j = 0; j < nm; ++j) jac(i, na + j) = d.ds_dvm(row, mag_vars[static_cast<std::size_t>(j)]).real();
        }
        for (Eigen::Index i = 0; i < nm; ++i) {
            const auto row = mag_vars[static_cast<std::size_t>(i)];
            for (Eigen::Index j = 0; j < na; ++j) jac(na + i, j) = d.ds_dva(row, angle_vars[static_cast<std::size_t>(j)]).imag();
            for (Eigen::Index j = 0; j < nm; ++j) jac(na + i, na + j) = d.ds_dvm(row, mag_vars[static_cast<std::size_t>(j)]).imag();
        }
        const Vector dx = jac.partialPivLu().solve(-f);
        for (Eigen::Index i = 0; i < na; ++i) sol.v_ang[angle_vars[static_cast<std::size_t>(i)]] += dx[i];
        for (Eigen::Index i = 0; i < nm; ++i) sol.v_mag[mag_vars[static_cast<std::size_t>(i)]] += dx[na + i];
        v = to_phasors(sol.v_mag, sol.v_ang);
        f = residual(v);
        norm = f.lpNorm<Eigen::Infinity>();
        ++iter;
    }

    const CVector s = injections(y, v);
    sol.p = s.real();
    sol.q = s.imag();
    for (Eigen::Index k = 0; k < n; ++k) {
        // Specified quantities are reported exactly as specified.
        if (roles[static_cast<std::size_t>(k)] != BusRole::Slack) sol.p[k] = p[k];
        if (roles[static_cast<std::size_t>(k)] == BusRole::PQ) sol.q[k] = q[k];
    }
    sol.iterations = iter;
    sol.max_mismatch = norm;
    sol.converged = norm <= options.tolerance;
    if (!sol.converged)
        throw DivergedError("power flow did not converge after " + std::to_string(iter) +
                                " iterations (mismatch " + std::to_string(norm) + ")",
                            sol);
    return sol;
}

PowerFlowSolution solve_regular_power_flow(const grid::Network& net, std::size_t slack_bus,
                                           const RegularPowerFlowOptions& options) {
    const auto n = net.bus_count();
    if (slack_bus >= n) throw ConfigError("slack bus out of range");
    std::vector<BusRole> roles(n, BusRole::PQ);
    Vector vm(static_cast<Eigen::Index>(n));
    Vector va(static_cast<Eigen::Index>(n));
    for (std::size_t k = 0; k < n; ++k) {
        vm[k] = options.flat_start ? 1.0 : net.buses[k].v_mag;
        va[k] = options.flat_start ? 0.0 : net.buses[k].v_ang;
    }
    for (const auto& sg : net.sgs) {
        roles[sg.bus] = BusRole::PV;
        vm[sg.bus] = sg.v_set;
    }
    if (options.ibr_as_pv) {
        for (const auto& ibr : net.ibrs) {
            if (roles[ibr.bus] == BusRole::PV) continue;
            roles[ibr.bus] = BusRole::PV;
            vm[ibr.bus] = net.buses[ibr.bus].v_mag;
        }
    }
    roles[slack_bus] = BusRole::Slack;
    if (options.flat_start) va[slack_bus] = net.buses[slack_bus].v_ang;
    return solve_newton(grid::build_admittance(net), roles, vm, va, net.scheduled_p(), net.scheduled_q(),
                        options.newton);
}

LineFlow line_flow(const grid::Branch& branch, Complex v_from, Complex v_to) {
    const Complex ys = 1.0 / branch.series_impedance;
    const Complex half = branch.shunt / 2.0;
    const Complex i_from = (v_from - v_to) * ys + v_from * half;
    const Complex i_to = (v_to - v_from) * ys + v_to * half;
    const Complex s_from = v_from * std::conj(i_from);
    const Complex s_to = v_to * std::conj(i_to);
    return {s_from.real(), s_from.imag(), s_to.real(), s_to.imag()};
}

LineFlow line_flow(const grid::Branch& branch, const PowerFlowSolution& solution) {
    const auto f = static_cast<Eigen::Index>(branch.from);
    const auto t = static_cast<Eigen::Index>(branch.to);
    return line_flow(branch, std::polar(solution.v_mag[f], solution.v_ang[f]),
                     std::polar(solution.v_mag[t], solution.v_ang[t]));
}

void apply_solution(grid::Network& net, const PowerFlowSolution& solution) {
    for (std::size_t k = 0; k < net.bus_count(); ++k) {
        auto& bus = net.buses[k];
        const auto i = static_cast<Eigen::Index>(k);
        bus.v_mag = solution.v_mag[i];
        bus.v_ang = solution.v_ang[i];
        bus.p_inj = solution.p[i];
        bus.q_inj = solution.q[i];
        const auto units = net.sgs_at(k);
        if (units.empty()) continue;
        double p_other = -net.load_p(k);
        double q_other = -net.load_q(k);
        for (auto u : net.ibrs_at(k)) {
            p_other += net.ibrs[u].p_set;
            q_other += net.ibrs[u].q_set;
        }
        const double share = 1.0 / static_cast<double>(units.size());
        for (auto u : units) {
            auto& sg = net.sgs[u];
            sg.p_set = (solution.p[i] - p_other) * share;
            sg.q_set = (solution.q[i] - q_other) * share;
            sg.v_set = solution.v_mag[i];
        }
    }
}

}  // namespace appf::powerflow
