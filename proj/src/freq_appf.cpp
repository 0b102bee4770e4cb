#include "appf/freq_appf.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace appf::freq {

using powerflow::Quantity;

const char* to_string(ImbalanceKind kind) {
    return kind == ImbalanceKind::LoadChange ? "load_change" : "generation_trip";
}

// ---------------------------------------------------------------- detection

namespace {

std::optional<ImbalanceKind> classify(const AreaObservation& o, double threshold) {
    if (o.lost_generation > threshold) return ImbalanceKind::GenerationTrip;
    if (o.delta_gen < -threshold && std::abs(o.delta_tie + o.delta_gen) <= threshold)
        return ImbalanceKind::GenerationTrip;
    if (std::abs(std::abs(o.delta_tie) - std::abs(o.delta_gen)) > threshold) return ImbalanceKind::LoadChange;
    return std::nullopt;
}

double magnitude(const AreaObservation& o, ImbalanceKind kind, double threshold) {
    if (kind == ImbalanceKind::LoadChange) return o.delta_tie + o.delta_gen;
    return o.lost_generation > threshold ? o.lost_generation : -o.delta_gen;
}

}  // namespace

void ActiveImbalanceDetector::reset() {
    onset_.reset();
    onset_areas_.clear();
    onset_kinds_.clear();
}

std::optional<ImbalanceReport> ActiveImbalanceDetector::feed(const AreaSample& sample) {
    std::vector<std::size_t> flagged;
    std::vector<ImbalanceKind> kinds;
    for (std::size_t a = 0; a < sample.areas.size(); ++a) {
        if (auto kind = classify(sample.areas[a], options_.threshold)) {
            flagged.push_back(a);
            kinds.push_back(*kind);
        }
    }
    if (flagged.empty()) {
        reset();
        return std::nullopt;
    }
    if (!onset_ || flagged != onset_areas_ || kinds != onset_kinds_) {
        onset_ = sample.time;
        onset_areas_ = flagged;
        onset_kinds_ = kinds;
    }
    if (sample.time - *onset_ < options_.debounce - 1e-9) return std::nullopt;

    ImbalanceReport report;
    report.contingent_area = flagged.front();
    report.kind = kinds.front();
    report.magnitude = magnitude(sample.areas[flagged.front()], kinds.front(), options_.threshold);
    report.detection_time = *onset_;
    report.observations = sample.areas;
    report.flagged_areas = flagged;
    report.multiple = flagged.size() > 1;
    reset();
    return report;
}

std::optional<ImbalanceReport> detect_active_imbalance(std::span<const AreaSample> samples,
                                                       const DetectionOptions& options) {
    ActiveImbalanceDetector detector(options);
    for (const auto& s : samples)
        if (auto r = detector.feed(s)) return r;
    return std::nullopt;
}

// ---------------------------------------------------------- primary dispatch

std::vector<IbrHeadroom> active_headrooms(const grid::Network& net, std::span<const std::size_t> ibrs) {
    std::vector<IbrHeadroom> out;
    for (auto i : ibrs)
        out.push_back({i, net.ibrs.at(i).p_set, grid::compute_headroom(net.ibrs[i], grid::HeadroomMode::Active)});
    return out;
}

double PrimaryDispatch::total_increment() const { return std::accumulate(increments.begin(), increments.end(), 0.0); }

std::map<std::size_t, double> PrimaryDispatch::setpoint_map() const {
    std::map<std::size_t, double> out;
    for (std::size_t k = 0; k < ibrs.size(); ++k) out[ibrs[k]] = setpoints[k];
    return out;
}

PrimaryDispatch primary_dispatch_first_hierarchy(double delta_p, std::span<const IbrHeadroom> units) {
    if (!(delta_p >= 0.0)) throw ConfigError("primary dispatch expects a non-negative deficit");
    PrimaryDispatch d;
    d.level = 0;
    d.request = delta_p;
    double total = 0.0;
    for (const auto& u : units) total += u.headroom;
    const bool sufficient = delta_p <= total;
    for (const auto& u : units) {
        double inc = u.headroom;
        if (sufficient) inc = total > 0.0 ? delta_p * u.headroom / total : 0.0;
        d.ibrs.push_back(u.ibr);
        d.increments.push_back(inc);
        d.setpoints.push_back(u.p_set + inc);
    }
    d.residual_deficit = sufficient ? 0.0 : delta_p - total;
    return d;
}

PrimaryDispatch primary_dispatch_higher_hierarchy(double request, std::size_t level,
                                                  const std::vector<std::vector<IbrHeadroom>>& areas) {
    if (!(request >= 0.0)) throw ConfigError("primary dispatch expects a non-negative deficit");
    PrimaryDispatch d;
    d.level = level;
    d.request = request;
    std::vector<double> sums;
    double total = 0.0;
    for (const auto& area : areas) {
        double s = 0.0;
        for (const auto& u : area) s += u.headroom;
        sums.push_back(s);
        total += s;
    }
    const bool sufficient = request <= total;
    for (std::size_t a = 0; a < areas.size(); ++a) {
        const double share = sufficient ? (total > 0.0 ? request * sums[a] / total : 0.0) : sums[a];
        d.area_shares.push_back(share);
        for (const auto& u : areas[a]) {
            double inc = u.headroom;
            if (sufficient) inc = sums[a] > 0.0 ? share * u.headroom / sums[a] : 0.0;
            d.ibrs.push_back(u.ibr);
            d.increments.push_back(inc);
            d.setpoints.push_back(u.p_set + inc);
        }
    }
    d.residual_deficit = sufficient ? 0.0 : request - total;
    return d;
}

std::vector<PrimaryDispatch> plan_primary(const grid::Network& net, const grid::HierarchyPartition& partition,
                                          double delta_p, std::span<const std::size_t> held_ibrs) {
    auto available = [&](std::size_t area) {
        std::vector<std::size_t> ids;
        for (auto i : net.ibrs_in_area(area))
            if (std::find(held_ibrs.begin(), held_ibrs.end(), i) == held_ibrs.end()) ids.push_back(i);
        return active_headrooms(net, ids);
    };
    std::vector<PrimaryDispatch> out;
    out.push_back(primary_dispatch_first_hierarchy(delta_p, available(partition.contingent_area)));
    for (std::size_t level = 1; level < partition.level_count() && out.back().residual_deficit > 0.0; ++level) {
        std::vector<std::vector<IbrHeadroom>> areas;
        for (auto a : partition.levels[level]) areas.push_back(available(a));
        out.push_back(primary_dispatch_higher_hierarchy(out.back().residual_deficit, level, areas));
    }
    return out;
}

// ------------------------------------------------------------------- stages

namespace {

bool contains(std::span<const std::size_t> v, std::size_t x) { return std::find(v.begin(), v.end(), x) != v.end(); }

struct LocalInjection {
    double p = 0.0;
    double q = 0.0;
};

LocalInjection local_injection(const grid::Network& net, std::size_t bus, std::span<const std::size_t> tripped) {
    LocalInjection s{-net.load_p(bus), -net.load_q(bus)};
    for (auto u : net.sgs_at(bus)) {
        if (contains(tripped, u)) continue;
        s.p += net.sgs[u].p_set;
        s.q += net.sgs[u].q_set;
    }
    for (auto u : net.ibrs_at(bus)) {
        s.p += net.ibrs[u].p_set;
        s.q += net.ibrs[u].q_set;
    }
    return s;
}

/// Flow into the lower level through `branch`, measured at its lower end.
Complex inflow_at(const grid::Branch& br, std::size_t lower, const powerflow::PowerFlowSolution& x) {
    const auto f = powerflow::line_flow(br, x);
    return br.from == lower ? Complex(-f.p_from, -f.q_from) : Complex(-f.p_to, -f.q_to);
}

/// Flow leaving the upper end of `branch`.
Complex outflow_at(const grid::Branch& br, std::size_t upper, const powerflow::PowerFlowSolution& x) {
    const auto f = powerflow::line_flow(br, x);
    return br.from == upper ? Complex(f.p_from, f.q_from) : Complex(f.p_to, f.q_to);
}

std::size_t other_end(const grid::Branch& br, std::size_t bus) { return br.from == bus ? br.to : br.from; }

CVector stage_injection(const CMatrix& y, const std::vector<std::size_t>& buses,
                        const powerflow::PowerFlowSolution& x) {
    CVector v(static_cast<Eigen::Index>(buses.size()));
    for (std::size_t k = 0; k < buses.size(); ++k) {
        const auto i = static_cast<Eigen::Index>(buses[k]);
        v[static_cast<Eigen::Index>(k)] = std::polar(x.v_mag[i], x.v_ang[i]);
    }
    return powerflow::injections(y, v);
}

}  // namespace

BuiltStage build_stage_spec(const StageInputs& in) {
    if (!in.net || !in.partition || !in.x_star) throw ConfigError("stage inputs incomplete");
    const auto& net = *in.net;
    const auto& part = *in.partition;
    const auto& xs = *in.x_star;
    const auto& ref = in.reference ? *in.reference : xs;
    const std::size_t level = in.level;
    if (level >= part.level_count()) throw ConfigError("hierarchy level out of range");
    if (level > 0 && !in.previous) throw SequencingError("stage " + std::to_string(level + 1) +
                                                         " needs the result of stage " + std::to_string(level));
    if (in.previous && in.previous->level + 1 != level) throw SequencingError("stage results out of order");

    BuiltStage out;
    out.buses = part.buses_in_level(net, level);
    const auto n = out.buses.size();
    out.y = grid::build_admittance(net, out.buses);
    std::vector<int> local(net.bus_count(), -1);
    for (std::size_t k = 0; k < n; ++k) local[out.buses[k]] = static_cast<int>(k);

    const grid::LevelLink empty;
    const auto& up = level + 1 < part.level_count() ? part.links[level] : empty;
    const auto& down = level > 0 ? part.links[level - 1] : empty;

    const CVector s_star = stage_injection(out.y, out.buses, xs);
    const CVector s_ref = stage_injection(out.y, out.buses, ref);

    auto& spec = out.spec;
    spec = powerflow::StageSpec(n);
    for (std::size_t k = 0; k < n; ++k) {
        const auto i = static_cast<Eigen::Index>(k);
        const auto b = static_cast<Eigen::Index>(out.buses[k]);
        spec.initial_point.v_mag[i] = ref.v_mag[b];
        spec.initial_point.v_ang[i] = ref.v_ang[b];
        spec.initial_point.p[i] = s_ref[i].real();
        spec.initial_point.q[i] = s_ref[i].imag();
        spec.balance_scope.push_back(k);
        spec.bus_ids.push_back(net.buses[out.buses[k]].id);
    }

    // Flows the previous stage expects through each downward tie.
    std::map<std::size_t, Complex> tie_down_target;
    if (level > 0) {
        for (const auto& t : in.previous->ties_up) tie_down_target[t.branch] = Complex(t.p, t.q);
        for (auto k : down.tie_lines)
            if (!tie_down_target.count(k)) throw SequencingError("previous stage lacks a tie target");
    }

    Complex boundary_target = 0.0;
    std::vector<std::pair<powerflow::VariableRef, double>> sum_p, sum_q;
    for (std::size_t k = 0; k < n; ++k) {
        const auto bus = out.buses[k];
        const auto& info = net.buses[bus];
        const auto i = static_cast<Eigen::Index>(k);
        const bool is_up = contains(up.lower_buses, bus);
        const bool is_down = contains(down.upper_buses, bus);
        if (is_up && is_down) throw ConfigError("bus " + std::to_string(info.id) + " borders two hierarchy links");
        const auto inj = local_injection(net, bus, in.tripped_sgs);
        const auto vm_bound = powerflow::Bound{info.v_min, info.v_max};

        std::vector<std::size_t> live_sgs;
        for (auto u : net.sgs_at(bus))
            if (!contains(in.tripped_sgs, u)) live_sgs.push_back(u);
        const auto ibrs = net.ibrs_at(bus);
        if (ibrs.size() > 1) throw ConfigError("stage model supports one inverter per bus");

        if (is_up) {
            out.boundary_up.push_back(k);
            spec.mask.set_pattern(k, Quantity::P, Quantity::Q);
            double cap = inj.p;
            for (auto t : up.tie_lines) {
                const auto& br = net.branches[t];
                if (br.from != bus && br.to != bus) continue;
                cap += std::min(inflow_at(br, bus, xs).real() + in.delta_p_load, br.thermal_rating_p);
            }
            spec.bound(k, Quantity::P).max = cap;
            boundary_target += s_star[i];
            sum_p.push_back({{k, Quantity::P}, 1.0});
            sum_q.push_back({{k, Quantity::Q}, 1.0});
        } else if (is_down) {
            out.boundary_down.push_back(k);
            spec.mask.set_pattern(k, Quantity::Vm, Quantity::Va);
            spec.bound(k, Quantity::Vm) = vm_bound;
            Complex s = Complex(inj.p, inj.q);
            for (auto t : down.tie_lines) {
                const auto& br = net.branches[t];
                if (br.from != bus && br.to != bus) continue;
                const auto lower = other_end(br, bus);
                const Complex delta = tie_down_target[t] - inflow_at(br, lower, xs);
                s -= outflow_at(br, bus, xs) + delta;
            }
            spec.initial_point.p[i] = s.real();
            spec.initial_point.q[i] = s.imag();
        } else if (!live_sgs.empty()) {
            spec.mask.set_pattern(k, Quantity::Va, Quantity::Q);
            spec.initial_point.p[i] = inj.p;
            spec.angle_reference_preference.push_back(k);
            double qmin = -net.load_q(bus), qmax = -net.load_q(bus);
            for (auto u : live_sgs) {
                qmin += net.sgs[u].q_min;
                qmax += net.sgs[u].q_max;
            }
            spec.bound(k, Quantity::Q) = {qmin, qmax};
        } else if (!ibrs.empty() && !contains(in.held_ibrs, ibrs.front())) {
            const auto& unit = net.ibrs[ibrs.front()];
            const double lp = net.load_p(bus);
            const double lq = net.load_q(bus);
            spec.mask.set_pattern(k, Quantity::P, Quantity::Q);
            spec.mask.set_fixed(k, Quantity::Va, false);
            spec.bound(k, Quantity::P) = {unit.p_min - lp, std::min(unit.p_max, unit.s_max) - lp};
            spec.bound(k, Quantity::Q) = {unit.q_min - lq, unit.q_max - lq};
            spec.circles.push_back({k, unit.s_max, lp, lq});
            auto it = in.primary_setpoints.find(ibrs.front());
            const double target = it != in.primary_setpoints.end() ? it->second : unit.p_set;
            spec.objective.push_back({in.weights.ibr, {{{k, Quantity::P}, 1.0}}, target - lp, unit.name});
        } else {
            spec.mask.set_pattern(k, Quantity::Vm, Quantity::Va);
            spec.bound(k, Quantity::Vm) = vm_bound;
            spec.initial_point.p[i] = inj.p;
            spec.initial_point.q[i] = inj.q;
        }
    }
    if (!sum_p.empty()) {
        spec.objective.push_back({in.weights.tie, sum_p, boundary_target.real(), "tie P"});
        spec.objective.push_back({in.weights.tie, sum_q, boundary_target.imag(), "tie Q"});
    }
    // Ensure free starting values respect their bounds for a cleaner first step.
    for (std::size_t k = 0; k < n; ++k) {
        const auto i = static_cast<Eigen::Index>(k);
        const auto& pb = spec.bound(k, Quantity::P);
        const auto& qb = spec.bound(k, Quantity::Q);
        if (spec.mask.is_free(k, Quantity::P)) spec.initial_point.p[i] = std::clamp(spec.initial_point.p[i], pb.min, pb.max);
        if (spec.mask.is_free(k, Quantity::Q)) spec.initial_point.q[i] = std::clamp(spec.initial_point.q[i], qb.min, qb.max);
    }
    return out;
}

StageResult solve_stage(const StageInputs& in, const powerflow::StageOptions& options) {
    auto built = build_stage_spec(in);
    const auto& net = *in.net;
    const auto& xs = *in.x_star;
    const auto solved = powerflow::solve_constrained_stage(built.y, built.spec, options);

    StageResult r;
    r.level = in.level;
    r.buses = built.buses;
    r.solution = solved.solution;
    r.objective = solved.objective;
    for (std::size_t k = 0; k < built.buses.size(); ++k) {
        const auto bus = built.buses[k];
        const auto i = static_cast<Eigen::Index>(k);
        for (auto u : net.ibrs_at(bus)) {
            if (contains(in.held_ibrs, u)) continue;
            r.ibr_setpoints.push_back({u, r.solution.p[i] + net.load_p(bus), r.solution.q[i] + net.load_q(bus)});
        }
    }

    const auto& part = *in.partition;
    if (in.level > 0) {
        for (const auto& t : in.previous->ties_up) r.ties_down.push_back(t);
    }
    if (in.level + 1 < part.level_count()) {
        const CVector s_star = stage_injection(built.y, built.buses, xs);
        const auto& link = part.links[in.level];
        for (auto k : built.boundary_up) {
            const auto bus = built.buses[k];
            const auto i = static_cast<Eigen::Index>(k);
            std::vector<std::size_t> ties;
            for (auto t : link.tie_lines)
                if (net.branches[t].from == bus || net.branches[t].to == bus) ties.push_back(t);
            const Complex delta = (Complex(r.solution.p[i], r.solution.q[i]) - s_star[i]) / static_cast<double>(ties.size());
            for (auto t : ties) {
                const Complex target = inflow_at(net.branches[t], bus, xs) + delta;
                r.ties_up.push_back({t, target.real(), target.imag()});
            }
        }
    }
    return r;
}

AppfOutcome run_appf(const grid::Network& post_event, const grid::HierarchyPartition& partition,
                     const powerflow::PowerFlowSolution& x_star, const ImbalanceReport& report,
                     const AppfOptions& options, const powerflow::PowerFlowSolution* reference,
                     std::vector<std::size_t> tripped_sgs) {
    AppfOutcome out;
    out.primary = plan_primary(post_event, partition, report.magnitude, options.held_ibrs);
    for (std::size_t level = 0; level < partition.level_count(); ++level) {
        StageInputs in;
        in.net = &post_event;
        in.partition = &partition;
        in.x_star = &x_star;
        in.reference = reference;
        in.level = level;
        if (level < out.primary.size()) in.primary_setpoints = out.primary[level].setpoint_map();
        in.previous = out.stages.empty() ? nullptr : &out.stages.back();
        in.weights = options.weights;
        in.delta_p_load = report.magnitude;
        in.held_ibrs = options.held_ibrs;
        in.tripped_sgs = tripped_sgs;
        try {
            out.stages.push_back(solve_stage(in, options.stage));
        } catch (const powerflow::InfeasibleError& e) {
            out.failure = e.report;
            out.failed_level = level;
            break;
        } catch (const powerflow::DivergedError& e) {
            out.failure = powerflow::InfeasibilityReport{e.what(), 0, Quantity::P, 0.0};
            out.failed_level = level;
            break;
        }
        if (level < out.primary.size() && out.primary[level].residual_deficit <= 0.0) break;
    }
    return out;
}

}  // namespace appf::freq
