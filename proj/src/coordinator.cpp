#include "appf/coordinator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include <json.hpp>

namespace appf::coord {

using nlohmann::json;

const char* to_string(Phase p) {
    switch (p) {
        case Phase::Idle: return "Idle";
        case Phase::Detected: return "Detected";
        case Phase::PrimaryDispatched: return "PrimaryDispatched";
        case Phase::StageSolving: return "StageSolving";
        case Phase::AwaitingUpstream: return "AwaitingUpstream";
        case Phase::Complete: return "Complete";
        case Phase::FallbackAGC: return "FallbackAGC";
    }
    return "?";
}

const char* to_string(MessageKind k) {
    switch (k) {
        case MessageKind::DeficitRequest: return "DeficitRequest";
        case MessageKind::TieTargets: return "TieTargets";
        case MessageKind::HeadroomUpdate: return "HeadroomUpdate";
        case MessageKind::SetpointCommand: return "SetpointCommand";
        case MessageKind::StageComplete: return "StageComplete";
        case MessageKind::Fallback: return "Fallback";
    }
    return "?";
}

namespace {

bool in_flight(Phase p) {
    return p == Phase::Detected || p == Phase::PrimaryDispatched || p == Phase::StageSolving ||
           p == Phase::AwaitingUpstream;
}

bool contains(const std::vector<std::size_t>& v, std::size_t x) { return std::find(v.begin(), v.end(), x) != v.end(); }

}  // namespace

bool legal_transition(Phase from, Phase to) {
    if (to == Phase::FallbackAGC) return in_flight(from);
    switch (from) {
        case Phase::Idle: return to == Phase::Detected;
        case Phase::Detected: return to == Phase::PrimaryDispatched;
        case Phase::PrimaryDispatched: return to == Phase::StageSolving;
        case Phase::StageSolving: return to == Phase::Complete || to == Phase::AwaitingUpstream;
        case Phase::AwaitingUpstream: return to == Phase::Complete;
        case Phase::Complete:
        case Phase::FallbackAGC: return to == Phase::Idle;
    }
    return false;
}

std::vector<MeasurementFrame> frames_from_sample(const grid::Network& net, const dyn::Sample& s) {
    std::vector<MeasurementFrame> out(net.areas.size());
    for (std::size_t a = 0; a < net.areas.size(); ++a) {
        auto& f = out[a];
        f.timestamp = s.time;
        f.area = a;
        for (auto b : net.areas[a].buses) f.buses.push_back({b, s.v_mag[b], s.v_ang[b], s.bus_p[b], s.bus_q[b]});
        f.lost_generation = a < s.lost_generation.size() ? s.lost_generation[a] : 0.0;
    }
    for (std::size_t k = 0; k < net.branches.size(); ++k) {
        const auto& br = net.branches[k];
        if (!br.is_tie_line) continue;
        const auto flow = powerflow::line_flow(br, std::polar(s.v_mag[br.from], s.v_ang[br.from]),
                                               std::polar(s.v_mag[br.to], s.v_ang[br.to]));
        out[net.buses[br.from].area].ties.push_back({k, -flow.p_from, -flow.q_from});
        out[net.buses[br.to].area].ties.push_back({k, -flow.p_to, -flow.q_to});
    }
    return out;
}

std::vector<dyn::SimEvent> to_events(const DispatchCommand& c) {
    std::vector<dyn::SimEvent> out;
    if (!c.ibrs.empty()) out.push_back({c.time, dyn::SetpointArrival{c.ibrs}, c.label});
    for (const auto& a : c.avrs) out.push_back({c.time, a, c.label});
    return out;
}

// ------------------------------------------------------------------ system

struct CoordinatorSystem::Impl {
    struct Timer {
        double time;
        std::uint64_t seq;
        std::function<void(double)> fn;
    };

    // State of one contingency response, shared by the areas taking part.
    struct Run {
        std::size_t episode = 0;
        std::size_t contingent = 0;
        double detection_time = 0.0;
        EventEstimate estimate;
        grid::HierarchyPartition partition;
        grid::Network post;
        double magnitude = 0.0;  // measured deficit
        bool frequency = false;
        bool voltage = false;
        bool frequency_done = false;
        bool voltage_done = false;
        bool failed = false;
        std::vector<std::size_t> held;
        std::vector<std::map<std::size_t, double>> primary;  // per level
        std::vector<double> residual;                        // per level, after primary
        std::vector<std::size_t> areas;
    };

    struct AreaCtl {
        AreaStatus status;
        std::optional<MeasurementFrame> baseline;
        double last_time = -std::numeric_limits<double>::infinity();
        freq::ActiveImbalanceDetector detector;
        std::vector<volt::VoltageSample> window;
        Vector v_pre;
        std::vector<std::size_t> gen_buses;
        std::vector<std::size_t> ibrs;
        std::vector<std::size_t> sgs;
        std::optional<std::size_t> run;
        EventEstimate handled;  // cumulative estimate already acted upon
        bool quiet = false;     // a rebaseline has been logged since the last episode
        std::map<std::size_t, double> peer_headroom;
        std::uint64_t epoch = 0;  // bumps on every re-arm, invalidating stale timers
    };

    grid::Network net;
    powerflow::PowerFlowSolution x_pre;
    Estimator estimator;
    CoordinatorConfig config;
    std::vector<AreaCtl> areas;
    std::vector<Run> runs;
    std::vector<Timer> timers;
    std::uint64_t seq = 0;
    std::map<std::pair<std::size_t, std::size_t>, double> channel_last;
    std::vector<Message> log;
    std::vector<TraceRecord> trace;
    std::vector<Episode> episodes;
    std::vector<double> known_p, known_q;  // last commanded IBR setpoints
    std::vector<DispatchCommand> out;
    std::mt19937_64 rng;

    Impl(const grid::Network& n, const powerflow::PowerFlowSolution& x, Estimator e, CoordinatorConfig c)
        : net(n), x_pre(x), estimator(std::move(e)), config(std::move(c)), rng(config.seed) {
        areas.resize(net.areas.size());
        for (std::size_t a = 0; a < net.areas.size(); ++a) {
            auto& A = areas[a];
            A.detector = freq::ActiveImbalanceDetector(config.detection);
            A.ibrs = net.ibrs_in_area(a);
            A.sgs = net.sgs_in_area(a);
            const auto& buses = net.areas[a].buses;
            A.v_pre.resize(static_cast<Eigen::Index>(buses.size()));
            for (std::size_t k = 0; k < buses.size(); ++k) {
                A.v_pre[static_cast<Eigen::Index>(k)] = x_pre.v_mag[static_cast<Eigen::Index>(buses[k])];
                if (!net.sgs_at(buses[k]).empty() || !net.ibrs_at(buses[k]).empty()) A.gen_buses.push_back(k);
            }
        }
        for (const auto& u : net.ibrs) {
            known_p.push_back(u.p_set);
            known_q.push_back(u.q_set);
        }
        if (config.heartbeat_period > 0.0)
            for (std::size_t a = 0; a < areas.size(); ++a) at(0.0, [this, a](double t) { heartbeat(a, t); });
    }

    int area_id(std::size_t a) const { return net.areas[a].id; }

    void at(double time, std::function<void(double)> fn) { timers.push_back({time, seq++, std::move(fn)}); }

    // Timer that only fires if the area has not been re-armed meanwhile.
    void at_area(std::size_t a, double time, std::function<void(double)> fn) {
        const auto epoch = areas[a].epoch;
        at(time, [this, a, epoch, fn = std::move(fn)](double t) {
            if (areas[a].epoch == epoch) fn(t);
        });
    }

    void record(double t, json j) {
        j["t"] = t;
        trace.push_back({t, j.dump()});
    }

    void transition(std::size_t a, Phase to, double t, const std::string& why) {
        auto& s = areas[a].status;
        if (!legal_transition(s.phase, to))
            throw SequencingError(std::string("illegal transition ") + to_string(s.phase) + " -> " + to_string(to) +
                                  " in area " + std::to_string(area_id(a)));
        record(t, {{"type", "transition"}, {"area", area_id(a)}, {"from", to_string(s.phase)}, {"to", to_string(to)},
                   {"why", why}});
        s.phase = to;
        if (to == Phase::Complete || to == Phase::FallbackAGC)
            at_area(a, t + config.rearm_delay, [this, a](double tt) { rearm(a, tt); });
    }

    // Moves forward through the in-flight phases without repeating any.
    void reach(std::size_t a, Phase to, double t, const std::string& why) {
        static const Phase order[] = {Phase::Idle, Phase::Detected, Phase::PrimaryDispatched, Phase::StageSolving};
        auto rank = [](Phase p) {
            for (int k = 0; k < 4; ++k)
                if (order[k] == p) return k;
            return 4;
        };
        while (rank(areas[a].status.phase) < rank(to)) transition(a, order[rank(areas[a].status.phase) + 1], t, why);
    }

    void rearm(std::size_t a, double t) {
        auto& A = areas[a];
        transition(a, Phase::Idle, t, "re-armed");
        ++A.epoch;
        A.baseline.reset();
        A.detector.reset();
        A.window.clear();
        A.run.reset();
        A.quiet = false;
        A.status.level = -1;
        A.status.pending_deficit = 0.0;
    }

    double latency() {
        if (config.latency_range) {
            std::uniform_real_distribution<double> d(config.latency_range->first, config.latency_range->second);
            return d(rng);
        }
        return config.latency;
    }

    void send(Message m, double t, std::optional<double> fixed_latency = std::nullopt) {
        m.send_time = t;
        m.sequence = seq;
        const auto channel = std::pair{m.source, m.destination};
        double delivery = t + (fixed_latency ? *fixed_latency : latency());
        if (auto it = channel_last.find(channel); it != channel_last.end()) delivery = std::max(delivery, it->second);
        channel_last[channel] = delivery;
        m.delivery_time = delivery;
        log.push_back(m);
        json j{{"type", "send"},     {"kind", to_string(m.kind)},        {"from", area_id(m.source)},
               {"to", area_id(m.destination)}, {"delivery", delivery}, {"seq", m.sequence}};
        if (m.kind == MessageKind::DeficitRequest) j["deficit"] = m.deficit;
        if (m.kind == MessageKind::HeadroomUpdate) j["headroom"] = m.headroom;
        record(t, j);
        at(delivery, [this, m](double tt) { deliver(m, tt); });
    }

    void emit(std::size_t a, double t, const std::string& label, std::vector<dyn::IbrCommand> ibrs,
              std::vector<dyn::AvrSetpoint> avrs) {
        if (ibrs.empty() && avrs.empty()) return;
        json j{{"type", "dispatch"}, {"area", area_id(a)}, {"label", label}};
        for (const auto& c : ibrs) {
            known_p[c.ibr] = c.p;
            known_q[c.ibr] = c.q;
            j["ibrs"].push_back({{"name", net.ibrs[c.ibr].name}, {"p", c.p}, {"q", c.q}});
        }
        for (const auto& v : avrs) j["avrs"].push_back({{"name", net.sgs[v.sg].name}, {"v_ref", v.v_ref}});
        record(t, j);
        out.push_back({t, a, label, std::move(ibrs), std::move(avrs)});
    }

    // Groups device commands by owning area: local ones go out directly, the
    // rest travel as setpoint messages.
    void dispatch_or_forward(std::size_t a, double t, const std::string& label, const std::vector<dyn::IbrCommand>& ibrs,
                             const std::vector<dyn::AvrSetpoint>& avrs, std::optional<double> fixed_latency,
                             std::size_t level = 0, bool keep_active = false) {
        std::map<std::size_t, std::pair<std::vector<dyn::IbrCommand>, std::vector<dyn::AvrSetpoint>>> by_area;
        for (const auto& c : ibrs) by_area[net.buses[net.ibrs[c.ibr].bus].area].first.push_back(c);
        for (const auto& v : avrs) by_area[net.buses[net.sgs[v.sg].bus].area].second.push_back(v);
        for (auto& [b, cmds] : by_area) {
            if (b == a) {
                emit(a, t, label, cmds.first, cmds.second);
                continue;
            }
            Message m;
            m.kind = MessageKind::SetpointCommand;
            m.source = a;
            m.destination = b;
            m.setpoints = cmds.first;
            m.avrs = cmds.second;
            m.level = level;
            m.keep_active = keep_active;
            send(std::move(m), t, fixed_latency);
        }
    }

    double active_headroom(std::size_t ibr, const std::vector<std::size_t>& held) const {
        if (contains(held, ibr)) return 0.0;
        auto u = net.ibrs[ibr];
        u.p_set = known_p[ibr];
        u.q_set = known_q[ibr];
        return grid::compute_headroom(u, grid::HeadroomMode::Active);
    }

    std::vector<freq::IbrHeadroom> unit_headrooms(std::size_t a, const std::vector<std::size_t>& held) const {
        std::vector<freq::IbrHeadroom> units;
        for (auto i : areas[a].ibrs)
            if (!contains(held, i)) units.push_back({i, known_p[i], active_headroom(i, held)});
        return units;
    }

    void heartbeat(std::size_t a, double t) {
        double h = 0.0;
        for (auto i : areas[a].ibrs) h += active_headroom(i, {});
        for (std::size_t b = 0; b < areas.size(); ++b) {
            if (b == a) continue;
            Message m;
            m.kind = MessageKind::HeadroomUpdate;
            m.source = a;
            m.destination = b;
            m.headroom = h;
            send(std::move(m), t);
        }
        at(t + config.heartbeat_period, [this, a](double tt) { heartbeat(a, tt); });
    }

    // ------------------------------------------------------------ detection

    freq::AreaObservation observe(const AreaCtl& A, const MeasurementFrame& f) const {
        freq::AreaObservation o;
        const auto& b = *A.baseline;
        double tie = 0.0, tie0 = 0.0;
        for (const auto& t : f.ties) tie += t.p;
        for (const auto& t : b.ties) tie0 += t.p;
        o.delta_tie = tie - tie0;
        for (auto k : A.gen_buses) o.delta_gen += f.buses[k].p - b.buses[k].p;
        o.lost_generation = f.lost_generation - b.lost_generation;
        // Breakers report trips. Local units backing off while imports rise is
        // the normal aftermath of a load event, not a lost unit.
        const double thr = config.detection.threshold;
        if (o.lost_generation <= thr && o.delta_gen < -thr && std::abs(o.delta_tie + o.delta_gen) <= thr)
            o.delta_gen = o.delta_tie = 0.0;
        return o;
    }

    bool ingest(const MeasurementFrame& f) {
        if (f.area >= areas.size()) throw ConfigError("frame for unknown area");
        auto& A = areas[f.area];
        if (!(f.timestamp > A.last_time)) {
            ++A.status.dropped_frames;
            record(f.timestamp, {{"type", "dropped_frame"}, {"area", area_id(f.area)}});
            return false;
        }
        A.last_time = f.timestamp;
        if (f.buses.size() != net.areas[f.area].buses.size()) throw ConfigError("frame does not match area buses");
        if (!A.baseline) {
            A.baseline = f;
            return false;
        }
        const auto phase = A.status.phase;
        if (phase == Phase::Complete || phase == Phase::FallbackAGC) return false;

        std::optional<freq::ImbalanceReport> active;
        if (config.frequency_control) active = A.detector.feed({f.timestamp, {observe(A, f)}});

        std::optional<volt::ReactiveImbalanceReport> reactive;
        if (config.voltage_control && phase == Phase::Idle) {
            volt::VoltageSample vs{f.timestamp, {}};
            bool in_band = true;
            for (std::size_t k = 0; k < f.buses.size(); ++k) {
                vs.v_mag.push_back(f.buses[k].v_mag);
                const double d = f.buses[k].v_mag - A.v_pre[static_cast<Eigen::Index>(k)];
                if (d < -config.voltage_bounds.beta1 || d > config.voltage_bounds.beta2) in_band = false;
            }
            if (in_band) {
                A.window.clear();
            } else {
                A.window.push_back(std::move(vs));
                reactive = volt::detect_reactive_imbalance(A.window, A.v_pre, config.voltage_bounds, 0.0,
                                                           config.detection.debounce);
                if (reactive) {
                    reactive->bus = net.areas[f.area].buses[reactive->bus];
                    A.window.clear();
                }
            }
        }

        if (active) {
            active->contingent_area = f.area;
            record(f.timestamp, {{"type", "active_detection"}, {"area", area_id(f.area)},
                                 {"kind", freq::to_string(active->kind)}, {"magnitude", active->magnitude},
                                 {"detection_time", active->detection_time}});
        }
        if (reactive)
            record(f.timestamp, {{"type", "reactive_detection"}, {"area", area_id(f.area)},
                                 {"bus", net.buses[reactive->bus].id}, {"deviation", reactive->deviation},
                                 {"detection_time", reactive->detection_time}});

        if (!active && !reactive) return false;
        if (phase != Phase::Idle && !(active && in_flight(phase))) return true;
        const auto fresh = new_event(f.area, f.timestamp);
        if (!fresh) {
            // Nothing new in the area: losses and flows are still moving after
            // an earlier event or dispatch. Start over from this frame.
            if (!A.quiet)
                record(f.timestamp, {{"type", "rebaselined"}, {"area", area_id(f.area)}, {"why", "no new event estimated"}});
            A.quiet = true;
            A.baseline = f;
            A.detector.reset();
            A.window.clear();
            return false;
        }
        if (phase != Phase::Idle) {
            // A new event while this area is still busy with an APPF response.
            fallback(f.area, f.timestamp, "second detection during an APPF episode");
            return true;
        }
        A.quiet = false;
        start(f.area, f, active, reactive, *fresh);
        return true;
    }

    // Part of the area's estimate not yet handled by an episode.
    std::optional<EventEstimate> new_event(std::size_t a, double now) {
        if (!estimator) return std::nullopt;
        const auto est = estimator(a, now);
        if (!est) return std::nullopt;
        const auto& h = areas[a].handled;
        EventEstimate d{est->bus, est->delta_p - h.delta_p, est->delta_q - h.delta_q, {}};
        for (auto u : est->tripped_sgs)
            if (!contains(h.tripped_sgs, u)) d.tripped_sgs.push_back(u);
        const double thr = config.detection.threshold;
        if (std::abs(d.delta_p) <= thr && std::abs(d.delta_q) <= thr && d.tripped_sgs.empty()) return std::nullopt;
        areas[a].handled = *est;
        return d;
    }

    // ------------------------------------------------------------- episodes

    void start(std::size_t a, const MeasurementFrame& f, const std::optional<freq::ImbalanceReport>& active,
               const std::optional<volt::ReactiveImbalanceReport>& reactive, const EventEstimate& est) {
        auto& A = areas[a];
        const double now = f.timestamp;
        double t_d = now;
        if (active) t_d = std::min(t_d, active->detection_time);
        if (reactive) t_d = std::min(t_d, reactive->detection_time);

        const double thr = config.detection.threshold;
        bool freq_part = false, volt_part = false;
        if (active) {
            const bool trip = !est.tripped_sgs.empty();
            freq_part = active->magnitude > thr && (trip || est.delta_p > thr);
        }
        if (reactive) volt_part = std::abs(est.delta_q) > thr;

        A.baseline = f;
        A.detector.reset();
        A.window.clear();
        if (!freq_part && !volt_part) {
            if (!active) {
                record(now, {{"type", "ignored"}, {"area", area_id(a)}, {"why", "no reactive imbalance estimated"}});
                return;
            }
            // Surpluses and events without a located deficit stay with AGC.
            transition(a, Phase::Detected, now, "active imbalance");
            transition(a, Phase::FallbackAGC, now, "imbalance not served by APPF");
            return;
        }

        Run r;
        r.episode = episodes.size();
        r.contingent = a;
        r.detection_time = t_d;
        r.estimate = est;
        r.frequency = freq_part;
        r.voltage = volt_part;
        r.post = net;
        bool placed = false;
        for (auto& l : r.post.loads)
            if (l.bus == est.bus) {
                l.p += est.delta_p;
                l.q += est.delta_q;
                placed = true;
                break;
            }
        if (!placed && (est.delta_p != 0.0 || est.delta_q != 0.0))
            r.post.loads.push_back({est.bus, est.delta_p, est.delta_q});
        r.areas = {a};

        Episode ep;
        if (freq_part) ep.active = active;
        if (volt_part) {
            ep.reactive = reactive;
            ep.reactive->delta_q = est.delta_q;
        }
        episodes.push_back(std::move(ep));
        runs.push_back(std::move(r));
        const auto run = runs.size() - 1;
        A.run = run;
        A.status.level = 0;
        transition(a, Phase::Detected, now, freq_part && volt_part ? "simultaneous imbalance"
                                            : freq_part             ? "active imbalance"
                                                                    : "reactive imbalance");
        if (volt_part && !start_voltage(run, now)) return;
        if (freq_part) start_frequency(run, *active);
    }

    bool start_voltage(std::size_t run, double now) {
        auto& r = runs[run];
        const auto a = r.contingent;
        volt::VoltageAppfOptions vo;
        vo.bounds = config.voltage_bounds;
        vo.bounds.local_min += config.voltage_margin;
        vo.bounds.local_max -= config.voltage_margin;
        vo.stage = config.stage;
        // The voltage stage answers the reactive part; an active part is left to
        // the frequency stages that follow.
        grid::Network reactive_only = r.post;
        for (auto& l : reactive_only.loads)
            if (l.bus == r.estimate.bus) {
                l.p -= r.estimate.delta_p;
                break;
            }
        try {
            episodes[r.episode].voltage =
                volt::run_voltage_appf(reactive_only, x_pre, r.estimate.bus, r.estimate.delta_q, vo);
        } catch (const Error& e) {
            record(now, {{"type", "voltage_failure"}, {"area", area_id(a)}, {"what", e.what()}});
            transition(a, Phase::FallbackAGC, now, "voltage pipeline failed");
            r.failed = true;
            return false;
        }
        const auto& v = *episodes[r.episode].voltage;
        if (r.frequency) {
            r.held = v.classes.class1;
            episodes[r.episode].held_ibrs = r.held;
        }
        at_area(a, r.detection_time + config.primary_delay, [this, run](double t) { voltage_primary(run, t); });
        at_area(a, r.detection_time + config.voltage_secondary_delay,
                [this, run](double t) { voltage_secondary(run, t); });
        return true;
    }

    void voltage_primary(std::size_t run, double t) {
        auto& r = runs[run];
        if (r.failed) return;
        const auto a = r.contingent;
        const auto& d = episodes[r.episode].voltage->primary;
        std::vector<dyn::IbrCommand> cmds;
        for (std::size_t k = 0; k < d.ibrs.size(); ++k) cmds.push_back({d.ibrs[k], known_p[d.ibrs[k]], d.setpoints[k]});
        reach(a, Phase::PrimaryDispatched, t, "reactive primary dispatched");
        dispatch_or_forward(a, t, "reactive primary", cmds, {}, std::nullopt);
        reach(a, Phase::StageSolving, t, "voltage secondary pending");
    }

    void voltage_secondary(std::size_t run, double t) {
        auto& r = runs[run];
        if (r.failed) return;
        const auto a = r.contingent;
        const auto& v = *episodes[r.episode].voltage;
        if (!v.outcome.converged) {
            fallback(a, t, "voltage secondary did not converge");
            return;
        }
        const auto& class1 = v.classes.class1;
        std::vector<dyn::IbrCommand> full, q_only;
        for (const auto& s : v.outcome.ibr_setpoints) {
            if (contains(class1, s.ibr))
                full.push_back({s.ibr, s.p, s.q});
            else
                q_only.push_back({s.ibr, known_p[s.ibr], s.q});
        }
        std::vector<dyn::AvrSetpoint> avrs;
        for (const auto& [sg, vm] : v.outcome.sg_voltage_setpoints)
            if (!contains(r.estimate.tripped_sgs, sg)) avrs.push_back({sg, vm});
        reach(a, Phase::StageSolving, t, "voltage secondary");
        dispatch_or_forward(a, t, "voltage secondary", full, avrs, std::nullopt);
        dispatch_or_forward(a, t, "voltage secondary", q_only, {}, std::nullopt, 0, true);
        r.voltage_done = true;
        if (!r.frequency || r.frequency_done) transition(a, Phase::Complete, t, "voltage secondary dispatched");
    }

    void start_frequency(std::size_t run, const freq::ImbalanceReport& report) {
        auto& r = runs[run];
        r.magnitude = report.magnitude;
        r.partition = grid::assign_hierarchies(r.post, r.contingent);
        r.primary.assign(r.partition.level_count(), {});
        r.residual.assign(r.partition.level_count(), 0.0);
        for (std::size_t l = 1; l < r.partition.level_count(); ++l)
            for (auto b : r.partition.levels[l]) r.areas.push_back(b);
        const auto a = r.contingent;
        areas[a].status.pending_deficit = r.magnitude;
        at_area(a, r.detection_time + config.primary_delay, [this, run](double t) { primary_first(run, t); });
        at_area(a, r.detection_time + config.estimation_delay, [this, run](double t) {
            if (!runs[run].failed) solve_level(run, 0, std::nullopt, t);
        });
    }

    void primary_first(std::size_t run, double t) {
        auto& r = runs[run];
        if (r.failed) return;
        const auto a = r.contingent;
        const auto units = unit_headrooms(a, r.held);
        auto d = freq::primary_dispatch_first_hierarchy(r.magnitude, units);
        r.primary[0] = d.setpoint_map();
        r.residual[0] = d.residual_deficit;
        std::vector<dyn::IbrCommand> cmds;
        for (std::size_t k = 0; k < d.ibrs.size(); ++k) cmds.push_back({d.ibrs[k], d.setpoints[k], known_q[d.ibrs[k]]});
        reach(a, Phase::PrimaryDispatched, t, "primary dispatched");
        emit(a, t, "primary", cmds, {});
        episodes[r.episode].primary.push_back(d);
        reach(a, Phase::StageSolving, t, "awaiting state estimate");
        areas[a].status.pending_deficit = d.residual_deficit;
        if (d.residual_deficit > 0.0 && r.partition.level_count() > 1) request_deficit(run, 0, d.residual_deficit, t);
    }

    void request_deficit(std::size_t run, std::size_t from_level, double deficit, double t) {
        const auto& r = runs[run];
        const auto src = r.partition.levels[from_level].front();
        for (auto b : r.partition.levels[from_level + 1]) {
            Message m;
            m.kind = MessageKind::DeficitRequest;
            m.source = src;
            m.destination = b;
            m.level = from_level + 1;
            m.deficit = deficit;
            send(std::move(m), t);
        }
    }

    std::size_t lead(const Run& r, std::size_t level) const { return r.partition.levels[level].front(); }

    void deliver(const Message& m, double t) {
        const auto b = m.destination;
        auto& B = areas[b];
        record(t, {{"type", "deliver"}, {"kind", to_string(m.kind)}, {"from", area_id(m.source)}, {"to", area_id(b)},
                   {"seq", m.sequence}});
        switch (m.kind) {
            case MessageKind::HeadroomUpdate: B.peer_headroom[m.source] = m.headroom; break;
            case MessageKind::DeficitRequest: on_deficit_request(m, t); break;
            case MessageKind::TieTargets: {
                if (!B.run || B.status.phase != Phase::StageSolving) break;
                const auto run = *B.run;
                freq::StageResult stub;
                stub.level = m.level - 1;
                stub.ties_up = m.ties;
                const double when = std::max(t, m.send_time + config.next_stage_delay);
                at_area(b, when, [this, run, stub, level = m.level](double tt) {
                    if (!runs[run].failed) solve_level(run, level, stub, tt);
                });
                break;
            }
            case MessageKind::SetpointCommand: {
                auto cmds = m.setpoints;
                if (m.keep_active)
                    for (auto& c : cmds) c.p = known_p[c.ibr];
                emit(b, t, "secondary", cmds, m.avrs);
                if (!B.run || B.status.phase != Phase::StageSolving || B.status.level <= 0) break;
                const auto level = static_cast<std::size_t>(B.status.level);
                const auto& r = runs[*B.run];
                if (m.level == level && m.source == lead(r, level) && b != m.source)
                    transition(b, Phase::Complete, t, "level setpoints received");
                break;
            }
            case MessageKind::StageComplete:
                if (B.status.phase == Phase::AwaitingUpstream) complete_lead(b, t);
                break;
            case MessageKind::Fallback:
                if (in_flight(B.status.phase)) {
                    if (B.run) runs[*B.run].failed = true;
                    transition(b, Phase::FallbackAGC, t, "fallback notice");
                }
                break;
        }
    }

    void on_deficit_request(const Message& m, double t) {
        const auto b = m.destination;
        auto& B = areas[b];
        const auto source_run = areas[m.source].run;
        if (!source_run) return;
        const auto run = *source_run;
        if (runs[run].failed) return;
        if (B.status.phase == Phase::Complete) rearm(b, t);
        if (B.status.phase != Phase::Idle) {
            // Busy with its own response: the request cannot be honoured.
            fallback(m.source, t, "deficit request to a busy area");
            return;
        }
        B.run = run;
        B.status.level = static_cast<int>(m.level);
        B.status.pending_deficit = m.deficit;
        B.detector.reset();
        transition(b, Phase::Detected, t, "deficit request");
        const double when = std::max(t, m.send_time + config.primary_delay);
        at_area(b, when, [this, b, run, level = m.level, req = m.deficit](double tt) {
            primary_higher(b, run, level, req, tt);
        });
    }

    void primary_higher(std::size_t b, std::size_t run, std::size_t level, double request, double t) {
        auto& r = runs[run];
        if (r.failed) return;
        auto& B = areas[b];
        const auto units = unit_headrooms(b, r.held);
        double own = 0.0;
        for (const auto& u : units) own += u.headroom;
        double total = own;
        for (auto p : r.partition.levels[level])
            if (p != b) {
                auto it = B.peer_headroom.find(p);
                if (it != B.peer_headroom.end()) total += it->second;
            }
        // This area's part of the level request, by headroom.
        const double allotted = total > 0.0 ? request * own / total : (b == lead(r, level) ? request : 0.0);
        const double share = std::min(own, allotted);
        auto d = freq::primary_dispatch_first_hierarchy(share, units);
        d.level = level;
        d.request = allotted;
        d.area_shares = {share};
        d.residual_deficit = allotted - share;
        const double level_residual = std::max(0.0, request - total);
        for (const auto& [i, p] : d.setpoint_map()) r.primary[level][i] = p;
        std::vector<dyn::IbrCommand> cmds;
        for (std::size_t k = 0; k < d.ibrs.size(); ++k) cmds.push_back({d.ibrs[k], d.setpoints[k], known_q[d.ibrs[k]]});
        reach(b, Phase::PrimaryDispatched, t, "primary dispatched");
        emit(b, t, "primary", cmds, {});
        episodes[r.episode].primary.push_back(d);
        reach(b, Phase::StageSolving, t, "awaiting stage");
        B.status.pending_deficit = level_residual;
        if (b == lead(r, level)) {
            r.residual[level] = level_residual;
            if (level_residual > 0.0 && level + 1 < r.partition.level_count())
                request_deficit(run, level, level_residual, t);
        }
    }

    void solve_level(std::size_t run, std::size_t level, std::optional<freq::StageResult> previous, double t) {
        auto& r = runs[run];
        const auto a = lead(r, level);
        freq::StageInputs in;
        in.net = &r.post;
        in.partition = &r.partition;
        in.x_star = &x_pre;
        const auto& ep = episodes[r.episode];
        if (ep.voltage && ep.voltage->outcome.converged) in.reference = &ep.voltage->outcome.solution;
        in.level = level;
        in.primary_setpoints = r.primary[level];
        in.previous = previous ? &*previous : nullptr;
        in.weights = config.weights;
        in.delta_p_load = r.magnitude;
        in.held_ibrs = r.held;
        in.tripped_sgs = r.estimate.tripped_sgs;
        freq::StageResult res;
        try {
            res = freq::solve_stage(in, config.stage);
        } catch (const powerflow::InfeasibleError& e) {
            episodes[r.episode].failure = e.report;
            fallback(a, t, "stage infeasible: " + e.report.message());
            return;
        } catch (const powerflow::DivergedError& e) {
            episodes[r.episode].failure = powerflow::InfeasibilityReport{e.what(), 0, powerflow::Quantity::P, 0.0};
            fallback(a, t, std::string("stage diverged: ") + e.what());
            return;
        }
        record(t, {{"type", "stage"}, {"area", area_id(a)}, {"level", level}, {"objective", res.objective}});
        std::vector<dyn::IbrCommand> cmds;
        for (const auto& s : res.ibr_setpoints) cmds.push_back({s.ibr, s.p, s.q});
        dispatch_or_forward(a, t, "secondary", cmds, {}, 0.0, level);
        for (auto p : r.partition.levels[level]) {
            const bool has = std::any_of(cmds.begin(), cmds.end(),
                                         [&](const auto& c) { return net.buses[net.ibrs[c.ibr].bus].area == p; });
            if (p == a || has) continue;
            Message m;
            m.kind = MessageKind::SetpointCommand;
            m.source = a;
            m.destination = p;
            m.level = level;
            send(std::move(m), t, 0.0);
        }
        episodes[r.episode].stages.push_back(res);

        if (r.residual[level] > 0.0 && level + 1 < r.partition.level_count()) {
            Message m;
            m.kind = MessageKind::TieTargets;
            m.source = a;
            m.destination = lead(r, level + 1);
            m.level = level + 1;
            m.ties = res.ties_up;
            send(std::move(m), t);
            transition(a, Phase::AwaitingUpstream, t, "tie targets sent upstream");
            return;
        }
        r.frequency_done = true;
        if (level == 0 && r.voltage && !r.voltage_done) return;
        complete_lead(a, t);
    }

    void complete_lead(std::size_t a, double t) {
        auto& A = areas[a];
        transition(a, Phase::Complete, t, "stage complete");
        if (!A.run || A.status.level <= 0) return;
        const auto& r = runs[*A.run];
        Message m;
        m.kind = MessageKind::StageComplete;
        m.source = a;
        m.destination = lead(r, static_cast<std::size_t>(A.status.level) - 1);
        m.level = static_cast<std::size_t>(A.status.level) - 1;
        send(std::move(m), t);
    }

    void fallback(std::size_t a, double t, const std::string& why) {
        auto& A = areas[a];
        if (A.run) {
            auto& r = runs[*A.run];
            r.failed = true;
            for (auto b : r.areas)
                if (b != a) {
                    Message m;
                    m.kind = MessageKind::Fallback;
                    m.source = a;
                    m.destination = b;
                    send(std::move(m), t);
                }
        }
        if (in_flight(A.status.phase)) transition(a, Phase::FallbackAGC, t, why);
    }

    double next_wakeup() const {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& x : timers) best = std::min(best, x.time);
        return best;
    }

    std::vector<DispatchCommand> advance(double now) {
        out.clear();
        for (;;) {
            auto it = timers.end();
            for (auto k = timers.begin(); k != timers.end(); ++k)
                if (k->time <= now + 1e-9 &&
                    (it == timers.end() || k->time < it->time || (k->time == it->time && k->seq < it->seq)))
                    it = k;
            if (it == timers.end()) break;
            Timer x = std::move(*it);
            timers.erase(it);
            x.fn(x.time);
        }
        return std::move(out);
    }
};

CoordinatorSystem::CoordinatorSystem(const grid::Network& net, const powerflow::PowerFlowSolution& x_pre,
                                     Estimator estimator, CoordinatorConfig config)
    : impl_(std::make_unique<Impl>(net, x_pre, std::move(estimator), std::move(config))) {}

CoordinatorSystem::~CoordinatorSystem() = default;

bool CoordinatorSystem::ingest(const MeasurementFrame& frame) { return impl_->ingest(frame); }
double CoordinatorSystem::next_wakeup() const { return impl_->next_wakeup(); }
std::vector<DispatchCommand> CoordinatorSystem::advance(double now) { return impl_->advance(now); }
const AreaStatus& CoordinatorSystem::status(std::size_t area) const { return impl_->areas.at(area).status; }
std::size_t CoordinatorSystem::area_count() const { return impl_->areas.size(); }
const std::vector<Message>& CoordinatorSystem::messages() const { return impl_->log; }
const std::vector<TraceRecord>& CoordinatorSystem::trace() const { return impl_->trace; }
const std::vector<CoordinatorSystem::Episode>& CoordinatorSystem::episodes() const { return impl_->episodes; }

void CoordinatorSystem::write_trace(std::ostream& out) const {
    for (const auto& r : impl_->trace) out << r.json << '\n';
}

}  // namespace appf::coord
