#include "appf/dynamics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <sstream>

#include <json.hpp>

namespace appf::dyn {

namespace {

constexpr double kOmegaS = 2.0 * kPi * kNominalHz;

Complex clip_to_capability(const grid::IbrUnit& u, double p, double q) {
    p = std::clamp(p, u.p_min, std::min(u.p_max, u.s_max));
    q = std::clamp(q, u.q_min, u.q_max);
    const double s = std::hypot(p, q);
    if (s > u.s_max && s > 0.0) {
        p *= u.s_max / s;
        q *= u.s_max / s;
    }
    return {p, q};
}

void put(std::ostream& out, double x) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, x);
    out.write(buf, r.ptr - buf);
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace

std::string describe(const SimEvent& e) {
    std::ostringstream o;
    std::visit(
        [&](const auto& p) {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, LoadStep>)
                o << "load step at bus index " << p.bus << ": dP=" << p.dp << " dQ=" << p.dq;
            else if constexpr (std::is_same_v<T, GeneratorTrip>)
                o << "trip of SG index " << p.sg;
            else if constexpr (std::is_same_v<T, SetpointArrival>) {
                o << "IBR setpoints";
                for (const auto& c : p.commands) o << " [" << c.ibr << ": " << c.p << ", " << c.q << "]";
            } else
                o << "AVR setpoint of SG index " << p.sg << ": " << p.v_ref;
        },
        e.payload);
    return o.str();
}

void Trajectory::write_csv(std::ostream& out) const {
    out << "time";
    for (int id : bus_ids) out << ",f_" << id;
    for (int id : bus_ids) out << ",v_" << id;
    for (const auto& n : sg_names) out << ",p_" << n << ",q_" << n;
    for (const auto& n : ibr_names) out << ",p_" << n << ",q_" << n;
    out << '\n';
    for (const auto& s : samples) {
        put(out, s.time);
        for (double f : s.frequency) out << ',', put(out, f);
        for (double v : s.v_mag) out << ',', put(out, v);
        for (std::size_t k = 0; k < s.sg_p.size(); ++k) {
            out << ',';
            put(out, s.sg_p[k]);
            out << ',';
            put(out, s.sg_q[k]);
        }
        for (std::size_t k = 0; k < s.ibr_p.size(); ++k) {
            out << ',';
            put(out, s.ibr_p[k]);
            out << ',';
            put(out, s.ibr_q[k]);
        }
        out << '\n';
    }
}

std::string Trajectory::metadata_json(const SimOptions& options, const std::string& config) const {
    nlohmann::json j;
    char hash[17];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a(config)));
    j["config_hash"] = hash;
    j["dt"] = options.dt;
    j["output_rate"] = options.output_rate;
    j["frequency_filter"] = options.frequency_filter;
    j["agc"] = {{"enabled", options.agc.enabled}, {"integral_gain", options.agc.integral_gain}};
    j["ibr_droop"] = {{"enabled", options.ibr_droop.enabled}, {"r", options.ibr_droop.r}};
    j["samples"] = samples.size();
    j["events"] = nlohmann::json::array();
    for (const auto& e : events)
        j["events"].push_back({{"time", e.time}, {"label", e.label}, {"description", describe(e)}});
    return j.dump(2);
}

Simulator::Simulator(grid::Network net, SimOptions options) : net_(std::move(net)), options_(options) {
    if (!(options_.dt > 0.0) || !(options_.output_rate > 0.0))
        throw ConfigError("time step and output rate must be positive");
    const double ratio = 1.0 / (options_.output_rate * options_.dt);
    steps_per_sample_ = std::max(1LL, std::llround(ratio));
    if (std::abs(ratio - static_cast<double>(steps_per_sample_)) > 1e-6)
        throw ConfigError("output interval must be a whole number of time steps");

    powerflow::RegularPowerFlowOptions pf;
    pf.flat_start = false;
    pf.newton.tolerance = 1e-12;
    x0_ = powerflow::solve_regular_power_flow(net_, 0, pf);
    powerflow::apply_solution(net_, x0_);

    const auto n = net_.bus_count();
    load_.assign(n, Complex{});
    for (const auto& l : net_.loads) load_[l.bus] += Complex{l.p, l.q};
    for (std::size_t b = 0; b < net_.branches.size(); ++b)
        if (net_.branches[b].is_tie_line) ties_.push_back(b);

    v_ = x0_.voltages();
    sg_.resize(net_.sgs.size());
    for (std::size_t k = 0; k < sg_.size(); ++k) {
        const auto& u = net_.sgs[k];
        const Complex vt = v_[static_cast<Eigen::Index>(u.bus)];
        const Complex i = std::conj(Complex{u.p_set, u.q_set} / vt);
        const Complex e = vt + Complex{0.0, u.transient_reactance} * i;
        sg_[k].delta = std::arg(e);
        sg_[k].e_internal = std::abs(e);
    }
    ibr_.resize(net_.ibrs.size());
    for (std::size_t k = 0; k < ibr_.size(); ++k) {
        const auto& u = net_.ibrs[k];
        ibr_[k] = {u.p_set, u.q_set, u.p_set, u.q_set};
    }
    droop_p_.assign(ibr_.size(), 0.0);
    agc_.assign(net_.areas.size(), 0.0);
    lost_.assign(net_.areas.size(), 0.0);
    freq_dev_.assign(n, 0.0);

    rebuild_network();
    solve_network(snapshot(), v_);
    // Settle the machine references on the simulator's own network solution.
    for (std::size_t k = 0; k < sg_.size(); ++k) {
        const auto& u = net_.sgs[k];
        const Complex e = internal_voltage(sg_[k]);
        const double pe = std::real(e * std::conj(sg_current(sg_[k], k, v_)));
        sg_[k].p_mech = sg_[k].p_ref = pe;
        sg_[k].v_ref = std::abs(v_[static_cast<Eigen::Index>(u.bus)]);
    }
    tie_baseline_ = tie_inflow(v_);
}

void Simulator::rebuild_network() {
    CMatrix y = grid::build_admittance(net_);
    for (std::size_t k = 0; k < sg_.size(); ++k) {
        if (!sg_[k].online) continue;
        const auto b = static_cast<Eigen::Index>(net_.sgs[k].bus);
        y(b, b) += 1.0 / Complex{0.0, net_.sgs[k].transient_reactance};
    }
    const auto n = y.rows();
    for (Eigen::Index k = 0; k < n; ++k)
        if (y(k, k) == Complex{}) y(k, k) = Complex{0.0, 1e-300};  // keep the diagonal in the pattern
    y_aug_ = y.sparseView();
    y_aug_.makeCompressed();
    bias_.assign(net_.areas.size(), 0.0);
    for (std::size_t k = 0; k < sg_.size(); ++k) {
        if (!sg_[k].online) continue;
        const auto& u = net_.sgs[k];
        bias_[net_.buses[u.bus].area] += 1.0 / u.droop_r + u.damping_d;
    }
    lu_valid_ = false;
}

Complex Simulator::internal_voltage(const SgState& s) const { return std::polar(s.e_internal, s.delta); }

Complex Simulator::sg_current(const SgState& s, std::size_t k, const CVector& v) const {
    if (!s.online) return {};
    const auto& u = net_.sgs[k];
    return (internal_voltage(s) - v[static_cast<Eigen::Index>(u.bus)]) / Complex{0.0, u.transient_reactance};
}

Simulator::Snapshot Simulator::snapshot() const { return {sg_, ibr_, agc_}; }

void Simulator::load_injections(const Snapshot& s) {
    s_inj_.resize(static_cast<Eigen::Index>(load_.size()));
    for (std::size_t b = 0; b < load_.size(); ++b) s_inj_[static_cast<Eigen::Index>(b)] = -load_[b];
    for (std::size_t k = 0; k < s.ibr.size(); ++k)
        s_inj_[static_cast<Eigen::Index>(net_.ibrs[k].bus)] += Complex{s.ibr[k].p, s.ibr[k].q};
}

// Nodal current balance in a frame rotated by `rot`; expects s_inj_ to match `s`.
CVector Simulator::residual(const Snapshot& s, const CVector& v, Complex rot) const {
    CVector f = y_aug_ * v;
    for (std::size_t k = 0; k < s.sg.size(); ++k) {
        if (!s.sg[k].online) continue;
        const auto& u = net_.sgs[k];
        f[static_cast<Eigen::Index>(u.bus)] -= rot * internal_voltage(s.sg[k]) / Complex{0.0, u.transient_reactance};
    }
    f.array() -= (s_inj_.array() / v.array()).conjugate();
    return f;
}

void Simulator::factor(const CVector& v) {
    const auto n = static_cast<Eigen::Index>(v.size());
    jac_.setZero(2 * n, 2 * n);
    for (Eigen::Index c = 0; c < y_aug_.outerSize(); ++c)
        for (Eigen::SparseMatrix<Complex>::InnerIterator it(y_aug_, c); it; ++it) {
            const auto r = it.row();
            jac_(r, c) = it.value().real();
            jac_(r, n + c) = -it.value().imag();
            jac_(n + r, c) = it.value().imag();
            jac_(n + r, n + c) = it.value().real();
        }
    for (Eigen::Index k = 0; k < n; ++k) {
        const Complex cv = std::conj(v[k]);
        const Complex di_de = -std::conj(s_inj_[k]) / (cv * cv);
        const Complex di_df = Complex{0.0, 1.0} * std::conj(s_inj_[k]) / (cv * cv);
        jac_(k, k) -= di_de.real();
        jac_(n + k, k) -= di_de.imag();
        jac_(k, n + k) -= di_df.real();
        jac_(n + k, n + k) -= di_df.imag();
    }
    lu_.compute(jac_);
    lu_valid_ = true;
}

// The equations are invariant under a common rotation, so the solve runs in
// the frame of the machines' inertia-weighted mean angle; the factorization
// then stays valid while the system runs off nominal frequency.
void Simulator::solve_network(const Snapshot& s, CVector& v) {
    const auto n = static_cast<Eigen::Index>(v.size());
    load_injections(s);
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < s.sg.size(); ++k)
        if (s.sg[k].online) {
            num += net_.sgs[k].inertia_h * s.sg[k].delta;
            den += net_.sgs[k].inertia_h;
        }
    const Complex rot = std::polar(1.0, den > 0.0 ? -num / den : 0.0);
    CVector w = v * rot;
    int since_factor = 0;
    Vector rhs(2 * n);
    for (int it = 0; it < 30; ++it) {
        const CVector f = residual(s, w, rot);
        if (f.cwiseAbs().maxCoeff() < options_.network_tolerance) {
            v = w / rot;
            if (it > 2) lu_valid_ = false;
            return;
        }
        if (!lu_valid_ || since_factor >= 3) {
            factor(w);
            since_factor = 0;
        }
        rhs << -f.real(), -f.imag();
        const Vector dx = lu_.solve(rhs);
        for (Eigen::Index k = 0; k < n; ++k) w[k] += Complex{dx[k], dx[n + k]};
        ++since_factor;
        if (!w.allFinite()) break;
    }
    fail("network solution did not converge");
}

std::vector<double> Simulator::tie_inflow(const CVector& v) const {
    std::vector<double> in(net_.areas.size(), 0.0);
    for (auto b : ties_) {
        const auto& br = net_.branches[b];
        const auto f = powerflow::line_flow(br, v[static_cast<Eigen::Index>(br.from)], v[static_cast<Eigen::Index>(br.to)]);
        in[net_.buses[br.from].area] -= f.p_from;
        in[net_.buses[br.to].area] -= f.p_to;
    }
    return in;
}

double Simulator::area_speed(const Snapshot& s, std::size_t area) const {
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < s.sg.size(); ++k) {
        if (!s.sg[k].online || net_.buses[net_.sgs[k].bus].area != area) continue;
        num += net_.sgs[k].inertia_h * s.sg[k].speed_dev;
        den += net_.sgs[k].inertia_h;
    }
    return den > 0.0 ? num / den : 0.0;
}

std::vector<double> Simulator::area_control_error(const Snapshot& s, const CVector& v) const {
    auto ace = tie_inflow(v);
    for (std::size_t a = 0; a < ace.size(); ++a) ace[a] -= tie_baseline_[a] + bias_[a] * area_speed(s, a);
    return ace;
}

Simulator::Snapshot Simulator::derivatives(const Snapshot& s, const CVector& v) const {
    Snapshot d{s.sg, s.ibr, s.agc};
    for (std::size_t k = 0; k < s.sg.size(); ++k) {
        auto& dk = d.sg[k];
        const auto& x = s.sg[k];
        const auto& u = net_.sgs[k];
        if (!x.online) {
            dk.delta = dk.speed_dev = dk.p_mech = dk.e_internal = 0.0;
            continue;
        }
        const double pe = std::real(internal_voltage(x) * std::conj(sg_current(x, k, v)));
        const std::size_t area = net_.buses[u.bus].area;
        const double p_ref = x.p_ref + u.agc_participation_factor * s.agc[area];
        dk.delta = kOmegaS * x.speed_dev;
        dk.speed_dev = (x.p_mech - pe - u.damping_d * x.speed_dev) / (2.0 * u.inertia_h);
        dk.p_mech = (p_ref - x.speed_dev / u.droop_r - x.p_mech) / u.governor_time_constant;
        dk.e_internal = u.avr_gain / u.avr_time_constant * (x.v_ref - std::abs(v[static_cast<Eigen::Index>(u.bus)]));
    }
    for (std::size_t k = 0; k < s.ibr.size(); ++k) {
        const auto& u = net_.ibrs[k];
        const Complex ref = clip_to_capability(u, s.ibr[k].p_ref + droop_p_[k], s.ibr[k].q_ref);
        d.ibr[k].p = (ref.real() - s.ibr[k].p) / u.actuation_time_constant;
        d.ibr[k].q = (ref.imag() - s.ibr[k].q) / u.actuation_time_constant;
    }
    if (agc_active_) {
        const auto ace = area_control_error(s, v);
        for (std::size_t a = 0; a < d.agc.size(); ++a) d.agc[a] = options_.agc.integral_gain * ace[a];
    } else {
        std::fill(d.agc.begin(), d.agc.end(), 0.0);
    }
    return d;
}

void Simulator::step() {
    const double dt = options_.dt;
    if (options_.ibr_droop.enabled) {
        for (std::size_t k = 0; k < ibr_.size(); ++k) {
            const auto& u = net_.ibrs[k];
            droop_p_[k] = -(freq_dev_[u.bus] / kNominalHz) / options_.ibr_droop.r * u.s_max;
        }
    }

    auto axpy = [](const Snapshot& x, double h, const Snapshot& d) {
        Snapshot y = x;
        for (std::size_t k = 0; k < y.sg.size(); ++k) {
            y.sg[k].delta += h * d.sg[k].delta;
            y.sg[k].speed_dev += h * d.sg[k].speed_dev;
            y.sg[k].p_mech += h * d.sg[k].p_mech;
            y.sg[k].e_internal += h * d.sg[k].e_internal;
        }
        for (std::size_t k = 0; k < y.ibr.size(); ++k) {
            y.ibr[k].p += h * d.ibr[k].p;
            y.ibr[k].q += h * d.ibr[k].q;
        }
        for (std::size_t a = 0; a < y.agc.size(); ++a) y.agc[a] += h * d.agc[a];
        return y;
    };

    const Snapshot x = snapshot();
    const CVector v_old = v_;
    CVector v = v_;
    const Snapshot k1 = derivatives(x, v);
    Snapshot x2 = axpy(x, dt / 2, k1);
    solve_network(x2, v);
    const Snapshot k2 = derivatives(x2, v);
    Snapshot x3 = axpy(x, dt / 2, k2);
    solve_network(x3, v);
    const Snapshot k3 = derivatives(x3, v);
    Snapshot x4 = axpy(x, dt, k3);
    solve_network(x4, v);
    const Snapshot k4 = derivatives(x4, v);

    Snapshot next = x;
    next = axpy(next, dt / 6, k1);
    next = axpy(next, dt / 3, k2);
    next = axpy(next, dt / 3, k3);
    next = axpy(next, dt / 6, k4);
    solve_network(next, v);

    sg_ = std::move(next.sg);
    ibr_ = std::move(next.ibr);
    agc_ = std::move(next.agc);
    v_ = v;

    const double gain = 1.0 - std::exp(-dt / options_.frequency_filter);
    for (Eigen::Index b = 0; b < v_.size(); ++b) {
        const double raw = std::arg(v_[b] * std::conj(v_old[b])) / dt / (2.0 * kPi);
        auto& y = freq_dev_[static_cast<std::size_t>(b)];
        y += gain * (raw - y);
    }
    for (const auto& s : sg_)
        if (s.online && !(std::abs(s.speed_dev) <= options_.speed_limit)) fail("machine speed deviation out of range");

    if (options_.agc.enabled && !agc_active_) {
        const double t = time() + dt;
        if (agc_onset_ < 0.0) {
            for (double e : area_control_error(snapshot(), v_))
                if (std::abs(e) > options_.agc.trigger) agc_onset_ = t;
        } else if (t >= agc_onset_ + options_.agc.activation_delay - 0.5 * dt) {
            agc_active_ = true;
        }
    }
}

void Simulator::schedule(SimEvent event) {
    if (!std::isfinite(event.time)) throw ConfigError("event time must be finite");
    auto pos = std::upper_bound(pending_.begin(), pending_.end(), event.time,
                                [](double t, const SimEvent& e) { return t < e.time; });
    pending_.insert(pos, std::move(event));
}

void Simulator::apply(const SimEvent& e) {
    std::visit(
        [&](const auto& p) {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, LoadStep>) {
                if (p.bus >= load_.size()) throw ConfigError("load step at unknown bus");
                load_[p.bus] += Complex{p.dp, p.dq};
                lu_valid_ = false;
            } else if constexpr (std::is_same_v<T, GeneratorTrip>) {
                if (p.sg >= sg_.size()) throw ConfigError("trip of unknown generator");
                auto& s = sg_[p.sg];
                if (!s.online) return;
                const double pe = std::real(internal_voltage(s) * std::conj(sg_current(s, p.sg, v_)));
                lost_[net_.buses[net_.sgs[p.sg].bus].area] += pe;
                s.online = false;
                rebuild_network();
            } else if constexpr (std::is_same_v<T, SetpointArrival>) {
                for (const auto& c : p.commands) {
                    if (c.ibr >= ibr_.size()) throw ConfigError("setpoint for unknown inverter");
                    const Complex r = clip_to_capability(net_.ibrs[c.ibr], c.p, c.q);
                    ibr_[c.ibr].p_ref = r.real();
                    ibr_[c.ibr].q_ref = r.imag();
                }
            } else {
                if (p.sg >= sg_.size()) throw ConfigError("AVR setpoint for unknown generator");
                sg_[p.sg].v_ref = p.v_ref;
            }
        },
        e.payload);
    applied_.push_back(e);
}

void Simulator::apply_due_events() {
    const double now = time() + 0.5 * options_.dt;
    bool any = false;
    while (!pending_.empty() && pending_.front().time <= now) {
        SimEvent e = std::move(pending_.front());
        pending_.erase(pending_.begin());
        e.time = time();
        apply(e);
        any = true;
    }
    if (any) solve_network(snapshot(), v_);
}

void Simulator::run_until(double t_end, const std::function<void(const Sample&)>& on_sample) {
    const long long end = std::llround(t_end / options_.dt);
    auto emit = [&] {
        if (step_count_ % steps_per_sample_ == 0 && step_count_ != last_emitted_) {
            last_emitted_ = step_count_;
            if (on_sample) on_sample(sample());
        }
    };
    apply_due_events();
    emit();
    while (step_count_ < end) {
        step();
        ++step_count_;
        apply_due_events();
        emit();
    }
}

Sample Simulator::sample() const {
    Sample s;
    s.time = time();
    const auto n = static_cast<std::size_t>(v_.size());
    s.frequency.resize(n);
    s.v_mag.resize(n);
    s.v_ang.resize(n);
    for (std::size_t b = 0; b < n; ++b) {
        const auto i = static_cast<Eigen::Index>(b);
        s.frequency[b] = kNominalHz + freq_dev_[b];
        s.v_mag[b] = std::abs(v_[i]);
        s.v_ang[b] = std::arg(v_[i]);
    }
    s.area_generation.assign(net_.areas.size(), 0.0);
    for (std::size_t k = 0; k < sg_.size(); ++k) {
        const Complex i = sg_current(sg_[k], k, v_);
        const Complex sk = v_[static_cast<Eigen::Index>(net_.sgs[k].bus)] * std::conj(i);
        s.sg_p.push_back(sk.real());
        s.sg_q.push_back(sk.imag());
        s.area_generation[net_.buses[net_.sgs[k].bus].area] += sk.real();
    }
    for (std::size_t k = 0; k < ibr_.size(); ++k) {
        s.ibr_p.push_back(ibr_[k].p);
        s.ibr_q.push_back(ibr_[k].q);
        s.area_generation[net_.buses[net_.ibrs[k].bus].area] += ibr_[k].p;
    }
    s.bus_p.resize(n);
    s.bus_q.resize(n);
    for (std::size_t b = 0; b < n; ++b) {
        s.bus_p[b] = -load_[b].real();
        s.bus_q[b] = -load_[b].imag();
    }
    for (std::size_t k = 0; k < sg_.size(); ++k) {
        s.bus_p[net_.sgs[k].bus] += s.sg_p[k];
        s.bus_q[net_.sgs[k].bus] += s.sg_q[k];
    }
    for (std::size_t k = 0; k < ibr_.size(); ++k) {
        s.bus_p[net_.ibrs[k].bus] += ibr_[k].p;
        s.bus_q[net_.ibrs[k].bus] += ibr_[k].q;
    }
    s.tie_p_in = tie_inflow(v_);
    s.lost_generation = lost_;
    s.balance_residual = residual(snapshot(), v_, 1.0).cwiseAbs().maxCoeff();
    return s;
}

void Simulator::fail(const std::string& what) const {
    nlohmann::json j;
    j["time"] = time();
    for (std::size_t k = 0; k < sg_.size(); ++k)
        j["sg"].push_back({{"name", net_.sgs[k].name},
                           {"online", sg_[k].online},
                           {"delta", sg_[k].delta},
                           {"speed_dev", sg_[k].speed_dev},
                           {"p_mech", sg_[k].p_mech},
                           {"e_internal", sg_[k].e_internal}});
    for (std::size_t k = 0; k < ibr_.size(); ++k)
        j["ibr"].push_back({{"name", net_.ibrs[k].name}, {"p", ibr_[k].p}, {"q", ibr_[k].q}});
    j["agc"] = agc_;
    throw SimulationError(what + " at t=" + std::to_string(time()), j.dump());
}

Trajectory run_scenario(const grid::Network& net, std::vector<SimEvent> events, double duration,
                        const SimOptions& options) {
    Simulator sim(net, options);
    for (auto& e : events) sim.schedule(std::move(e));
    Trajectory t;
    for (const auto& b : sim.network().buses) t.bus_ids.push_back(b.id);
    for (const auto& u : sim.network().sgs) t.sg_names.push_back(u.name);
    for (const auto& u : sim.network().ibrs) t.ibr_names.push_back(u.name);
    sim.run_until(duration, [&](const Sample& s) { t.samples.push_back(s); });
    t.events = sim.applied_events();
    return t;
}

}  // namespace appf::dyn
