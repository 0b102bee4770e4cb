#include "appf/volt_appf.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/LU>

namespace appf::volt {

using powerflow::Quantity;

// ---------------------------------------------------------------- detection

std::optional<ReactiveImbalanceReport> detect_reactive_imbalance(std::span<const VoltageSample> samples,
                                                                 const Vector& v_pre, const VoltageBounds& bounds,
                                                                 double estimated_delta_q, double debounce) {
    std::optional<double> onset;
    for (const auto& s : samples) {
        if (static_cast<Eigen::Index>(s.v_mag.size()) != v_pre.size())
            throw ConfigError("voltage sample size does not match the pre-event profile");
        std::optional<std::size_t> worst;
        double worst_dev = 0.0;
        for (std::size_t k = 0; k < s.v_mag.size(); ++k) {
            const double dev = s.v_mag[k] - v_pre[static_cast<Eigen::Index>(k)];
            // strict, with slack for rounding of values that sit on the band edge
            const bool out = dev < -bounds.beta1 - 1e-12 || dev > bounds.beta2 + 1e-12;
            if (out && std::abs(dev) > std::abs(worst_dev)) {
                worst = k;
                worst_dev = dev;
            }
        }
        if (!worst) {
            onset.reset();
            continue;
        }
        if (!onset) onset = s.time;
        if (s.time - *onset >= debounce - 1e-9) return ReactiveImbalanceReport{*worst, estimated_delta_q, worst_dev, *onset};
    }
    return std::nullopt;
}

// -------------------------------------------------------------- sensitivity

bool SensitivityMatrix::stale(const powerflow::PowerFlowSolution& now, double threshold) const {
    return std::abs(now.q.sum() - total_q) > threshold;
}

std::vector<powerflow::BusRole> sensitivity_roles(const grid::Network& net, std::size_t slack_bus) {
    if (slack_bus >= net.bus_count()) throw ConfigError("slack bus out of range");
    std::vector<powerflow::BusRole> roles(net.bus_count(), powerflow::BusRole::PQ);
    for (const auto& sg : net.sgs) roles[sg.bus] = powerflow::BusRole::PV;
    roles[slack_bus] = powerflow::BusRole::Slack;
    return roles;
}

SensitivityMatrix compute_sensitivity(const grid::Network& net, const powerflow::PowerFlowSolution& x,
                                      std::size_t slack_bus) {
    const auto roles = sensitivity_roles(net, slack_bus);
    const auto n = net.bus_count();
    if (x.size() != n) throw ConfigError("operating point does not match the network");
    std::vector<Eigen::Index> ang, mag;
    for (std::size_t k = 0; k < n; ++k) {
        if (roles[k] != powerflow::BusRole::Slack) ang.push_back(static_cast<Eigen::Index>(k));
        if (roles[k] == powerflow::BusRole::PQ) mag.push_back(static_cast<Eigen::Index>(k));
    }
    const auto na = static_cast<Eigen::Index>(ang.size());
    const auto nm = static_cast<Eigen::Index>(mag.size());
    const auto d = powerflow::power_derivatives(grid::build_admittance(net), x.voltages());

    Matrix j(na + nm, na + nm);
    for (Eigen::Index r = 0; r < na; ++r) {
        for (Eigen::Index c = 0; c < na; ++c) j(r, c) = d.ds_dva(ang[r], ang[c]).real();
        for (Eigen::Index c = 0; c < nm; ++c) j(r, na + c) = d.ds_dvm(ang[r], mag[c]).real();
    }
    for (Eigen::Index r = 0; r < nm; ++r) {
        for (Eigen::Index c = 0; c < na; ++c) j(na + r, c) = d.ds_dva(mag[r], ang[c]).imag();
        for (Eigen::Index c = 0; c < nm; ++c) j(na + r, na + c) = d.ds_dvm(mag[r], mag[c]).imag();
    }

    SensitivityMatrix out;
    out.s = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    out.perturbable.assign(n, false);
    out.total_q = x.q.sum();
    for (auto k : mag) out.perturbable[static_cast<std::size_t>(k)] = true;
    if (nm == 0) return out;

    Eigen::FullPivLU<Matrix> lu(j);
    if (!lu.isInvertible() || lu.rcond() < 1e-12)
        throw SingularJacobianError("power-flow Jacobian is singular at the operating point");
    const Matrix inv = lu.inverse();
    for (Eigen::Index r = 0; r < nm; ++r)
        for (Eigen::Index c = 0; c < nm; ++c) out.s(mag[r], mag[c]) = inv(na + r, na + c);
    return out;
}

// ---------------------------------------------------------- classification

std::vector<IbrQHeadroom> reactive_headrooms(const grid::Network& net, std::span<const std::size_t> ibrs) {
    std::vector<IbrQHeadroom> out;
    for (auto u : ibrs) {
        const auto& unit = net.ibrs.at(u);
        out.push_back({u, unit.bus, net.buses[unit.bus].id, unit.q_set,
                       grid::compute_headroom(unit, grid::HeadroomMode::Reactive)});
    }
    return out;
}

IbrClassPartition rank_and_classify(const Matrix& s, std::size_t contingent_bus, double delta_q,
                                    std::vector<IbrQHeadroom> units) {
    const auto k = static_cast<Eigen::Index>(contingent_bus);
    if (k >= s.rows()) throw ConfigError("contingent bus out of range");
    for (const auto& u : units)
        if (static_cast<Eigen::Index>(u.bus) >= s.cols()) throw ConfigError("inverter bus out of range");
    std::stable_sort(units.begin(), units.end(), [&](const IbrQHeadroom& a, const IbrQHeadroom& b) {
        const double sa = s(k, static_cast<Eigen::Index>(a.bus));
        const double sb = s(k, static_cast<Eigen::Index>(b.bus));
        if (sa != sb) return sa > sb;
        return a.bus_id < b.bus_id;
    });

    IbrClassPartition out;
    out.ranking = units;
    std::size_t n1 = units.size();
    double sum = 0.0;
    for (std::size_t i = 0; i <= units.size(); ++i) {
        if (sum >= delta_q) {
            n1 = i;
            break;
        }
        if (i < units.size()) sum += units[i].headroom;
    }
    for (std::size_t i = 0; i < units.size(); ++i) (i < n1 ? out.class1 : out.class2).push_back(units[i].ibr);
    return out;
}

ReactiveDispatch primary_reactive_dispatch(const IbrClassPartition& partition, double delta_q) {
    if (delta_q < 0.0) throw ConfigError("reactive dispatch covers deficits only");
    ReactiveDispatch out;
    double remaining = delta_q;
    for (const auto& u : partition.ranking) {
        const bool class1 = std::find(partition.class1.begin(), partition.class1.end(), u.ibr) != partition.class1.end();
        const double inc = class1 ? std::min(u.headroom, remaining) : 0.0;
        remaining -= inc;
        out.ibrs.push_back(u.ibr);
        out.increments.push_back(inc);
        out.setpoints.push_back(u.q_set + inc);
    }
    out.residual = std::max(0.0, remaining);
    return out;
}

grid::Network apply_reactive_dispatch(grid::Network net, const ReactiveDispatch& dispatch) {
    for (std::size_t i = 0; i < dispatch.ibrs.size(); ++i) net.ibrs.at(dispatch.ibrs[i]).q_set = dispatch.setpoints[i];
    return net;
}

// ------------------------------------------------------- sequential stages

double load_voltage_objective(const grid::Network& net, const Vector& v_mag, std::span<const std::size_t> buses) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t k = 0; k < buses.size(); ++k) {
        if (net.buses[buses[k]].kind != grid::BusKind::Load) continue;
        const double d = v_mag[static_cast<Eigen::Index>(k)] - 1.0;
        sum += d * d;
        ++count;
    }
    return count ? sum / static_cast<double>(count) : 0.0;
}

namespace {

enum class Role { Sg, Class1, Class2, Held, Passive };

bool contains(const std::vector<std::size_t>& v, std::size_t x) { return std::find(v.begin(), v.end(), x) != v.end(); }

struct Layout {
    std::vector<std::size_t> buses;
    std::vector<Role> roles;
    std::vector<std::size_t> ibr_at;  // IBR index for inverter roles
    CMatrix y;
};

Layout make_layout(const VoltageProblem& pb) {
    const auto& net = *pb.net;
    Layout l;
    l.buses = pb.buses;
    if (l.buses.empty()) {
        l.buses.resize(net.bus_count());
        std::iota(l.buses.begin(), l.buses.end(), std::size_t{0});
    }
    l.y = grid::build_admittance(net, l.buses);
    for (auto bus : l.buses) {
        const auto ibrs = net.ibrs_at(bus);
        if (ibrs.size() > 1) throw ConfigError("stage model supports one inverter per bus");
        Role r = Role::Passive;
        std::size_t unit = 0;
        if (!net.sgs_at(bus).empty()) {
            if (!ibrs.empty()) throw ConfigError("bus " + std::to_string(net.buses[bus].id) + " hosts both SG and IBR");
            r = Role::Sg;
        } else if (!ibrs.empty()) {
            unit = ibrs.front();
            r = contains(pb.classes.class1, unit) ? Role::Class1
                : contains(pb.classes.class2, unit) ? Role::Class2
                                                    : Role::Held;
        }
        l.roles.push_back(r);
        l.ibr_at.push_back(unit);
    }
    return l;
}

powerflow::Bound voltage_band(const VoltageProblem& pb, std::size_t bus, bool relaxed) {
    const auto& b = pb.bounds;
    const bool load = pb.net->buses[bus].kind == grid::BusKind::Load;
    if (!relaxed || load) return {b.local_min, b.local_max};
    const double v0 = pb.x_pre->v_mag[static_cast<Eigen::Index>(bus)];
    return {v0 - b.global_delta, std::min(v0 + b.global_delta, b.global_cap)};
}

powerflow::StageSpec make_spec(const VoltageProblem& pb, const Layout& l, Step step, bool relaxed,
                               const powerflow::PowerFlowSolution& start, const powerflow::PowerFlowSolution& pre) {
    const auto& net = *pb.net;
    const auto n = l.buses.size();
    powerflow::StageSpec spec(n);
    spec.initial_point = start;
    std::size_t loads = 0;
    for (auto bus : l.buses) loads += net.buses[bus].kind == grid::BusKind::Load;

    for (std::size_t k = 0; k < n; ++k) {
        const auto bus = l.buses[k];
        const auto i = static_cast<Eigen::Index>(k);
        spec.balance_scope.push_back(k);
        spec.bus_ids.push_back(net.buses[bus].id);
        spec.bound(k, Quantity::Vm) = voltage_band(pb, bus, relaxed);
        if (net.buses[bus].kind == grid::BusKind::Load && loads > 0)
            spec.objective.push_back({1.0 / static_cast<double>(loads), {{{k, Quantity::Vm}, 1.0}}, 1.0, "load |V|"});

        const double lp = net.load_p(bus);
        const double lq = net.load_q(bus);
        switch (l.roles[k]) {
            case Role::Sg: {
                if (step == Step::WithSg) {
                    spec.mask.set_pattern(k, Quantity::Vm, Quantity::Q);
                    spec.initial_point.p[i] = pre.p[i];
                    double qmin = -lq, qmax = -lq;
                    for (auto u : net.sgs_at(bus)) {
                        qmin += net.sgs[u].q_min;
                        qmax += net.sgs[u].q_max;
                    }
                    spec.bound(k, Quantity::Q) = {qmin, qmax};
                } else {
                    // held at the pre-event injection
                    spec.mask.set_pattern(k, Quantity::Vm, Quantity::Va);
                    spec.angle_reference_preference.push_back(k);
                    spec.initial_point.p[i] = pre.p[i];
                    spec.initial_point.q[i] = pre.q[i];
                }
                break;
            }
            case Role::Class1:
            case Role::Class2: {
                const bool fixed_pq = l.roles[k] == Role::Class1 && (step == Step::WithSg || step == Step::SgHeld);
                if (fixed_pq) {
                    spec.mask.set_pattern(k, Quantity::Vm, Quantity::Va);
                    break;
                }
                // theta pinned at the starting point; |V| is the decision the
                // inverter realizes through its P, Q output.
                spec.mask.set_pattern(k, Quantity::P, Quantity::Q);
                spec.mask.set_fixed(k, Quantity::Vm, false);
                const auto& unit = net.ibrs[l.ibr_at[k]];
                spec.bound(k, Quantity::P) = {unit.p_min - lp, std::min(unit.p_max, unit.s_max) - lp};
                spec.bound(k, Quantity::Q) = {unit.q_min - lq, unit.q_max - lq};
                spec.circles.push_back({k, unit.s_max, lp, lq});
                if (pb.setpoint_weight > 0.0)
                    spec.objective.push_back({pb.setpoint_weight, {{{k, Quantity::P}, 1.0}}, unit.p_set - lp, unit.name});
                break;
            }
            case Role::Held:
            case Role::Passive:
                spec.mask.set_pattern(k, Quantity::Vm, Quantity::Va);
                break;
        }
    }
    // Once the machines' Q is in play every inverter may be pinned in P, which
    // would leave the losses with nowhere to go; the first machine takes them.
    if (step == Step::WithSg || step == Step::SgHeld) {
        bool any_p = false;
        for (std::size_t k = 0; k < n; ++k) any_p = any_p || spec.mask.is_free(k, Quantity::P);
        for (std::size_t k = 0; k < n && !any_p; ++k) {
            if (l.roles[k] != Role::Sg) continue;
            const auto bus = l.buses[k];
            double pmin = -net.load_p(bus), pmax = -net.load_p(bus);
            for (auto u : net.sgs_at(bus)) {
                pmin += net.sgs[u].p_min;
                pmax += net.sgs[u].p_max;
            }
            spec.mask.set_fixed(k, Quantity::P, false);
            spec.bound(k, Quantity::P) = {pmin, pmax};
            any_p = true;
        }
    }
    for (std::size_t k = 0; k < n; ++k) {
        const auto i = static_cast<Eigen::Index>(k);
        for (auto q : {Quantity::P, Quantity::Q}) {
            if (!spec.mask.is_free(k, q)) continue;
            auto& v = q == Quantity::P ? spec.initial_point.p[i] : spec.initial_point.q[i];
            v = std::clamp(v, spec.bound(k, q).min, spec.bound(k, q).max);
        }
    }
    return spec;
}

powerflow::PowerFlowSolution restrict(const powerflow::PowerFlowSolution& x, const Layout& l) {
    const auto n = static_cast<Eigen::Index>(l.buses.size());
    powerflow::PowerFlowSolution out;
    out.v_mag.resize(n);
    out.v_ang.resize(n);
    for (Eigen::Index k = 0; k < n; ++k) {
        const auto b = static_cast<Eigen::Index>(l.buses[static_cast<std::size_t>(k)]);
        out.v_mag[k] = x.v_mag[b];
        out.v_ang[k] = x.v_ang[b];
    }
    const CVector s = powerflow::injections(l.y, out.voltages());
    out.p = s.real();
    out.q = s.imag();
    out.converged = x.converged;
    return out;
}

}  // namespace

VoltageOutcome sequential_voltage_optimization(const VoltageProblem& pb, const powerflow::StageOptions& options) {
    if (!pb.net || !pb.x_pre || !pb.x_init) throw ConfigError("voltage problem inputs incomplete");
    if (pb.x_pre->size() != pb.net->bus_count() || pb.x_init->size() != pb.net->bus_count())
        throw ConfigError("operating points do not match the network");
    const auto l = make_layout(pb);
    const auto start = restrict(*pb.x_init, l);
    const auto pre = restrict(*pb.x_pre, l);

    VoltageOutcome out;
    out.buses = l.buses;
    std::optional<powerflow::StageResult> best;
    Step best_step = Step::LocalIbr;
    std::optional<powerflow::InfeasibilityReport> last_failure;
    powerflow::PowerFlowSolution warm = start;

    auto attempt = [&](Step step, bool relaxed, const powerflow::PowerFlowSolution& from) -> bool {
        StepRecord rec{step, false, 0.0, {}};
        try {
            auto r = powerflow::solve_constrained_stage(l.y, make_spec(pb, l, step, relaxed, from, pre), options);
            rec.converged = true;
            rec.objective = load_voltage_objective(*pb.net, r.solution.v_mag, l.buses);
            warm = r.solution;
            if (!best || rec.objective <= load_voltage_objective(*pb.net, best->solution.v_mag, l.buses) + 1e-12) {
                best = std::move(r);
                best_step = step;
            } else {
                rec.note = "objective above the accepted solution; kept previous";
            }
        } catch (const powerflow::InfeasibleError& e) {
            rec.note = e.report.message();
            last_failure = e.report;
        } catch (const powerflow::DivergedError& e) {
            rec.note = e.what();
            last_failure = powerflow::InfeasibilityReport{e.what(), 0, Quantity::Vm, 0.0};
        }
        out.steps.push_back(rec);
        return rec.converged;
    };

    if (!attempt(Step::LocalIbr, false, start)) {
        attempt(Step::RelaxedIbr, true, start);
        if (!attempt(Step::WithSg, true, warm)) attempt(Step::SgHeld, true, warm);
    }

    if (!best) {
        out.failure = last_failure;
        out.solution = start;
        out.objective = load_voltage_objective(*pb.net, start.v_mag, l.buses);
        return out;
    }
    out.converged = true;
    out.accepted = best_step;
    out.solution = best->solution;
    out.objective = load_voltage_objective(*pb.net, out.solution.v_mag, l.buses);
    const auto& net = *pb.net;
    for (std::size_t k = 0; k < l.buses.size(); ++k) {
        const auto bus = l.buses[k];
        const auto i = static_cast<Eigen::Index>(k);
        const double v = out.solution.v_mag[i];
        if (v < pb.bounds.local_min - 1e-9 || v > pb.bounds.local_max + 1e-9) out.relaxed_buses.push_back(bus);
        if (l.roles[k] == Role::Sg)
            for (auto u : net.sgs_at(bus)) out.sg_voltage_setpoints.push_back({u, v});
        if (l.roles[k] == Role::Class1 || l.roles[k] == Role::Class2)
            out.ibr_setpoints.push_back({l.ibr_at[k], out.solution.p[i] + net.load_p(bus), out.solution.q[i] + net.load_q(bus)});
    }
    return out;
}

VoltageAppfRun run_voltage_appf(const grid::Network& post_event, const powerflow::PowerFlowSolution& x_pre,
                                std::size_t bus, double delta_q, const VoltageAppfOptions& options) {
    VoltageAppfRun run;
    run.sensitivity = compute_sensitivity(post_event, x_pre, options.slack_bus);
    if (delta_q <= 0.0) {
        // nothing to restore: the pre-event point stands
        run.post_primary = x_pre;
        auto& o = run.outcome;
        o.converged = true;
        o.solution = x_pre;
        o.buses.resize(post_event.bus_count());
        std::iota(o.buses.begin(), o.buses.end(), std::size_t{0});
        o.objective = load_voltage_objective(post_event, x_pre.v_mag, o.buses);
        for (std::size_t u = 0; u < post_event.sgs.size(); ++u)
            o.sg_voltage_setpoints.push_back({u, x_pre.v_mag[static_cast<Eigen::Index>(post_event.sgs[u].bus)]});
        for (std::size_t u = 0; u < post_event.ibrs.size(); ++u)
            o.ibr_setpoints.push_back({u, post_event.ibrs[u].p_set, post_event.ibrs[u].q_set});
        return run;
    }
    std::vector<std::size_t> all(post_event.ibrs.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    run.classes = rank_and_classify(run.sensitivity.s, bus, delta_q, reactive_headrooms(post_event, all));
    run.primary = primary_reactive_dispatch(run.classes, delta_q);
    const auto dispatched = apply_reactive_dispatch(post_event, run.primary);
    run.post_primary = powerflow::solve_regular_power_flow(dispatched, options.slack_bus);

    VoltageProblem pb;
    pb.net = &dispatched;
    pb.x_pre = &x_pre;
    pb.x_init = &run.post_primary;
    pb.classes = run.classes;
    pb.bounds = options.bounds;
    run.outcome = sequential_voltage_optimization(pb, options.stage);
    return run;
}

}  // namespace appf::volt
