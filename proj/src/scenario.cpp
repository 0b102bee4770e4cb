#include "appf/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "appf/case_io.hpp"
#include "appf/reference_case.hpp"

namespace appf::scenario {

using nlohmann::json;

const char* to_string(Mode m) {
    switch (m) {
        case Mode::None: return "none";
        case Mode::Droop: return "droop";
        case Mode::Hierarchical: return "hierarchical";
        case Mode::HierarchicalDroop: return "hierarchical+droop";
        case Mode::AgcOnly: return "agc-only";
    }
    return "?";
}

Mode mode_from_string(const std::string& name) {
    for (auto m : {Mode::None, Mode::Droop, Mode::Hierarchical, Mode::HierarchicalDroop, Mode::AgcOnly})
        if (name == to_string(m)) return m;
    throw ConfigError("unknown control mode '" + name + "'");
}

const std::vector<ScenarioDef>& scenarios() {
    static const std::vector<ScenarioDef> defs{
        {"case1", "63 MW load step at bus 16", {{10.0, 16, 0.63, 0.0, ""}}},
        {"case2", "130 MW load step at bus 16", {{10.0, 16, 1.30, 0.0, ""}}},
        {"gen-trip", "trip of SG4 (69 MW) at bus 12", {{10.0, 12, 0.0, 0.0, "SG4"}}},
        {"volt", "105 MVAr reactive load step at bus 16", {{10.0, 16, 0.0, 1.05, ""}}},
        {"simultaneous", "80 MW + 50 MVAr load step at bus 16", {{10.0, 16, 0.80, 0.50, ""}}},
    };
    return defs;
}

const ScenarioDef& find_scenario(const std::string& id) {
    for (const auto& s : scenarios())
        if (s.id == id) return s;
    throw ConfigError("unknown scenario '" + id + "'");
}

namespace {

template <class T>
void take(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

Disturbance disturbance_from_json(const json& j) {
    Disturbance d;
    take(j, "time", d.time);
    take(j, "bus_id", d.bus_id);
    take(j, "dp", d.dp);
    take(j, "dq", d.dq);
    take(j, "trip_sg", d.trip_sg);
    return d;
}

json to_json(const Disturbance& d) {
    return {{"time", d.time}, {"bus_id", d.bus_id}, {"dp", d.dp}, {"dq", d.dq}, {"trip_sg", d.trip_sg}};
}

}  // namespace

ScenarioConfig apply_config_json(ScenarioConfig c, const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config file: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
    try {
        take(j, "case", c.case_path);
        take(j, "scenario", c.scenario);
        if (j.contains("mode")) c.mode = mode_from_string(j.at("mode").get<std::string>());
        take(j, "duration", c.duration);
        take(j, "plot_data", c.plot_data);
        if (j.contains("events")) {
            c.events.clear();
            for (const auto& e : j.at("events")) c.events.push_back(disturbance_from_json(e));
        }
        if (j.contains("delays")) {
            const auto& d = j.at("delays");
            take(d, "primary", c.coordinator.primary_delay);
            take(d, "estimation", c.coordinator.estimation_delay);
            take(d, "next_stage", c.coordinator.next_stage_delay);
            take(d, "voltage_secondary", c.coordinator.voltage_secondary_delay);
            take(d, "latency", c.coordinator.latency);
            if (d.contains("latency_range")) {
                const auto r = d.at("latency_range").get<std::vector<double>>();
                if (r.size() != 2) throw ConfigError("latency_range needs two values");
                c.coordinator.latency_range = std::pair{r[0], r[1]};
            }
        }
        if (j.contains("weights")) {
            take(j.at("weights"), "w1", c.coordinator.weights.tie);
            take(j.at("weights"), "w2", c.coordinator.weights.ibr);
        }
        take(j, "seed", c.coordinator.seed);
        if (j.contains("agc")) {
            take(j.at("agc"), "integral_gain", c.sim.agc.integral_gain);
            take(j.at("agc"), "activation_delay", c.sim.agc.activation_delay);
            take(j.at("agc"), "trigger", c.sim.agc.trigger);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config file: ") + e.what());
    }
    return c;
}

void validate(const ScenarioConfig& c) {
    find_scenario(c.scenario);
    if (c.coordinator.weights.tie < 0.0 || c.coordinator.weights.ibr < 0.0)
        throw ConfigError("weights must be non-negative");
    if (!(c.duration > 0.0) || !std::isfinite(c.duration)) throw ConfigError("duration must be positive");
    const auto& k = c.coordinator;
    for (double d : {k.primary_delay, k.estimation_delay, k.next_stage_delay, k.voltage_secondary_delay, k.latency})
        if (!(d >= 0.0) || !std::isfinite(d)) throw ConfigError("delays must be finite and non-negative");
    if (k.latency_range && !(0.0 <= k.latency_range->first && k.latency_range->first <= k.latency_range->second))
        throw ConfigError("latency_range must satisfy 0 <= low <= high");
}

namespace {

std::size_t sg_by_name(const grid::Network& net, const std::string& name) {
    for (std::size_t k = 0; k < net.sgs.size(); ++k)
        if (net.sgs[k].name == name) return k;
    throw ConfigError("unknown SG '" + name + "'");
}

std::vector<dyn::SimEvent> to_sim_events(const grid::Network& net, const std::vector<Disturbance>& events) {
    std::vector<dyn::SimEvent> out;
    for (const auto& d : events) {
        if (!(d.time >= 0.0)) throw ConfigError("event time must be non-negative");
        if (!d.trip_sg.empty()) out.push_back({d.time, dyn::GeneratorTrip{sg_by_name(net, d.trip_sg)}, "trip " + d.trip_sg});
        if (d.dp != 0.0 || d.dq != 0.0) {
            std::ostringstream label;
            label << "load step bus " << d.bus_id;
            out.push_back({d.time, dyn::LoadStep{net.bus_index(d.bus_id), d.dp, d.dq}, label.str()});
        }
    }
    return out;
}

// Perfect state estimation: the coordinator of the area hosting a disturbance
// learns its location and size once it has happened.
coord::Estimator perfect_estimator(const grid::Network& net, const std::vector<Disturbance>& events) {
    return [&net, events](std::size_t area, double time) -> std::optional<coord::EventEstimate> {
        std::optional<coord::EventEstimate> est;
        for (const auto& d : events) {
            if (d.time > time + 1e-9) continue;
            const auto bus = net.bus_index(d.bus_id);
            std::optional<std::size_t> sg;
            if (!d.trip_sg.empty()) sg = sg_by_name(net, d.trip_sg);
            const auto host = sg ? net.sgs[*sg].bus : bus;
            if (net.buses[host].area != area) continue;
            if (!est) est = coord::EventEstimate{bus, 0.0, 0.0, {}};
            est->bus = bus;
            est->delta_p += d.dp;
            est->delta_q += d.dq;
            if (sg) est->tripped_sgs.push_back(*sg);
        }
        return est;
    };
}

grid::Network load_case(const ScenarioConfig& c) {
    return c.case_path.empty() ? reference::build_reference_case() : grid::load_network(c.case_path);
}

}  // namespace

Metrics compute_metrics(const dyn::Trajectory& t, double onset, double band) {
    Metrics m;
    m.onset = onset;
    if (t.samples.empty()) return m;
    const auto& first = t.samples.front();
    std::optional<double> last_out;
    m.nadir = std::numeric_limits<double>::infinity();
    for (const auto& s : t.samples) {
        for (std::size_t b = 0; b < s.frequency.size(); ++b) {
            const double f = s.frequency[b];
            if (f < m.nadir) {
                m.nadir = f;
                m.nadir_time = s.time;
            }
            if (s.time >= onset && std::abs(f - kNominalHz) > band) last_out = s.time;
            m.max_voltage_deviation = std::max(m.max_voltage_deviation, std::abs(s.v_mag[b] - first.v_mag[b]));
        }
    }
    const auto& last = t.samples.back();
    if (!last_out)
        m.settling_time = 0.0;
    else if (*last_out < last.time)
        m.settling_time = *last_out - onset;
    m.final_f_min = *std::min_element(last.frequency.begin(), last.frequency.end());
    m.final_f_max = *std::max_element(last.frequency.begin(), last.frequency.end());
    m.final_voltage = last.v_mag;
    m.ibr_p_initial = first.ibr_p;
    m.ibr_p_final = last.ibr_p;
    m.ibr_q_final = last.ibr_q;
    return m;
}

CaseResult run_case(const ScenarioConfig& config) {
    validate(config);
    CaseResult r;
    r.config = config;
    r.network = load_case(config);
    const auto& net = r.network;
    const auto& events = config.events.empty() ? find_scenario(config.scenario).events : config.events;

    dyn::SimOptions o = config.sim;
    const auto mode = config.mode;
    const bool appf = mode == Mode::Hierarchical || mode == Mode::HierarchicalDroop;
    o.agc.enabled = appf || mode == Mode::AgcOnly;
    o.ibr_droop.enabled = mode == Mode::Droop || mode == Mode::HierarchicalDroop;

    dyn::Simulator sim(net, o);
    for (auto& e : to_sim_events(net, events)) sim.schedule(std::move(e));

    std::optional<coord::CoordinatorSystem> coordinator;
    if (appf) coordinator.emplace(net, sim.initial_point(), perfect_estimator(net, events), config.coordinator);

    auto& tr = r.trajectory;
    for (const auto& b : net.buses) tr.bus_ids.push_back(b.id);
    for (const auto& u : net.sgs) tr.sg_names.push_back(u.name);
    for (const auto& u : net.ibrs) tr.ibr_names.push_back(u.name);

    const auto on_sample = [&](const dyn::Sample& s) {
        tr.samples.push_back(s);
        if (coordinator)
            for (const auto& f : coord::frames_from_sample(net, s)) coordinator->ingest(f);
    };
    const double dt = o.dt;
    const auto end_step = std::llround(config.duration / dt);
    const auto steps_per_sample = std::llround(1.0 / (o.output_rate * dt));
    auto pump = [&] {
        if (!coordinator) return;
        for (const auto& c : coordinator->advance(sim.time() + 0.5 * dt))
            for (auto& e : coord::to_events(c)) sim.schedule(std::move(e));
    };
    sim.run_until(0.0, on_sample);
    pump();
    long long step = 0;
    while (step < end_step) {
        long long next = (step / steps_per_sample + 1) * steps_per_sample;
        if (coordinator) {
            const double w = coordinator->next_wakeup();
            if (std::isfinite(w)) next = std::min(next, std::max(step + 1, static_cast<long long>(std::llround(w / dt))));
        }
        next = std::min(next, end_step);
        sim.run_until(static_cast<double>(next) * dt, on_sample);
        step = next;
        pump();
    }
    tr.events = sim.applied_events();

    if (coordinator) {
        r.trace = coordinator->trace();
        r.messages = coordinator->messages();
        r.episodes = coordinator->episodes();
        for (std::size_t a = 0; a < coordinator->area_count(); ++a) r.final_phases.push_back(coordinator->status(a).phase);
    }

    // Summary
    double onset = events.empty() ? 0.0 : events.front().time;
    for (const auto& d : events) onset = std::min(onset, d.time);
    const auto m = compute_metrics(tr, onset);
    json s;
    s["scenario"] = config.scenario;
    s["mode"] = to_string(mode);
    for (const auto& d : events) s["events"].push_back(to_json(d));
    s["onset"] = m.onset;
    s["settling_time"] = m.settling_time ? json(*m.settling_time) : json(nullptr);
    s["nadir_hz"] = m.nadir;
    s["nadir_time"] = m.nadir_time;
    s["final_frequency"] = {m.final_f_min, m.final_f_max};
    s["max_voltage_deviation"] = m.max_voltage_deviation;
    for (std::size_t k = 0; k < net.ibrs.size(); ++k) {
        const auto& u = net.ibrs[k];
        s["ibrs"].push_back({{"name", u.name},
                             {"area", net.areas[net.buses[u.bus].area].id},
                             {"p_initial", m.ibr_p_initial[k]},
                             {"p_final", m.ibr_p_final[k]},
                             {"q_final", m.ibr_q_final[k]},
                             {"utilization", m.ibr_p_final[k] / std::min(u.p_max, u.s_max)}});
    }
    const auto& first = tr.samples.front();
    const auto& last = tr.samples.back();
    for (std::size_t k = 0; k < net.sgs.size(); ++k)
        s["sgs"].push_back({{"name", net.sgs[k].name},
                            {"p_initial", first.sg_p[k]},
                            {"p_final", last.sg_p[k]},
                            {"q_initial", first.sg_q[k]},
                            {"q_final", last.sg_q[k]}});
    if (coordinator) {
        json c;
        for (std::size_t a = 0; a < r.final_phases.size(); ++a)
            c["final_phase"].push_back({{"area", net.areas[a].id}, {"phase", coord::to_string(r.final_phases[a])}});
        for (const auto& ep : r.episodes) {
            json e;
            if (ep.active)
                e["active"] = {{"area", net.areas[ep.active->contingent_area].id},
                               {"kind", freq::to_string(ep.active->kind)},
                               {"magnitude", ep.active->magnitude},
                               {"detection_time", ep.active->detection_time}};
            if (ep.reactive)
                e["reactive"] = {{"bus", net.buses[ep.reactive->bus].id},
                                 {"delta_q", ep.reactive->delta_q},
                                 {"detection_time", ep.reactive->detection_time}};
            for (const auto& p : ep.primary)
                e["primary"].push_back(
                    {{"level", p.level}, {"request", p.request}, {"increment", p.total_increment()},
                     {"residual", p.residual_deficit}});
            for (const auto& st : ep.stages) {
                json sj{{"level", st.level}, {"objective", st.objective}};
                for (const auto& sp : st.ibr_setpoints)
                    sj["ibrs"].push_back({{"name", net.ibrs[sp.ibr].name}, {"p", sp.p}, {"q", sp.q}});
                e["stages"].push_back(sj);
            }
            if (ep.voltage) {
                json v{{"converged", ep.voltage->outcome.converged},
                       {"accepted_step", static_cast<int>(ep.voltage->outcome.accepted)}};
                for (auto i : ep.voltage->classes.class1) v["class1"].push_back(net.ibrs[i].name);
                for (auto i : ep.voltage->classes.class2) v["class2"].push_back(net.ibrs[i].name);
                for (auto b : ep.voltage->outcome.relaxed_buses) v["relaxed_buses"].push_back(net.buses[b].id);
                e["voltage"] = v;
            }
            if (ep.failure) e["failure"] = ep.failure->message();
            c["episodes"].push_back(e);
        }
        json times = json::array();
        for (const auto& ev : tr.events)
            if (ev.label != "" && std::holds_alternative<dyn::SetpointArrival>(ev.payload)) times.push_back(ev.time);
        c["setpoint_times"] = times;
        s["coordination"] = c;
    }
    r.summary_json = s.dump(2);
    return r;
}

void write_artifacts(const CaseResult& r, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto open = [&](const std::string& name) {
        std::ofstream f(dir / name, std::ios::binary);
        if (!f) throw ConfigError("cannot write " + (dir / name).string());
        return f;
    };
    {
        auto f = open("trajectory.csv");
        r.trajectory.write_csv(f);
    }
    {
        json cfg{{"scenario", r.config.scenario}, {"mode", to_string(r.config.mode)}, {"duration", r.config.duration},
                 {"case", r.config.case_path}, {"seed", r.config.coordinator.seed}};
        auto f = open("trajectory.meta.json");
        f << r.trajectory.metadata_json(r.config.sim, cfg.dump()) << '\n';
    }
    {
        auto f = open("summary.json");
        f << r.summary_json << '\n';
    }
    {
        auto f = open("trace.jsonl");
        for (const auto& t : r.trace) f << t.json << '\n';
    }
    if (!r.config.plot_data) return;
    const auto& net = r.network;
    // Frequency (Fig. 8 layout): one column per area, taken at the area's first load bus.
    std::vector<std::size_t> probes;
    for (const auto& a : net.areas)
        for (auto b : a.buses)
            if (net.buses[b].kind == grid::BusKind::Load) {
                probes.push_back(b);
                break;
            }
    {
        auto f = open("plot_frequency.csv");
        f << "time";
        for (auto b : probes) f << ",f_" << net.buses[b].id;
        f << '\n';
        for (const auto& s : r.trajectory.samples) {
            f << s.time;
            for (auto b : probes) f << ',' << s.frequency[b];
            f << '\n';
        }
    }
    {
        auto f = open("plot_ibr.csv");
        f << "time";
        for (const auto& u : net.ibrs) f << ",p_" << u.name << ",q_" << u.name;
        f << '\n';
        for (const auto& s : r.trajectory.samples) {
            f << s.time;
            for (std::size_t k = 0; k < net.ibrs.size(); ++k) f << ',' << s.ibr_p[k] << ',' << s.ibr_q[k];
            f << '\n';
        }
    }
    {
        auto f = open("plot_voltage.csv");
        f << "time";
        for (const auto& b : net.buses) f << ",v_" << b.id;
        f << '\n';
        for (const auto& s : r.trajectory.samples) {
            f << s.time;
            for (double v : s.v_mag) f << ',' << v;
            f << '\n';
        }
    }
}

// ------------------------------------------------------------ steady state

void SteadyStateTable::write_csv(std::ostream& out) const {
    out << "bus,kind,p_pre,q_pre,v_pre,p_rpf,q_rpf,v_rpf,p_appf,q_appf,v_appf\n";
    out.precision(10);
    for (const auto& r : rows)
        out << r.bus_id << ',' << r.kind << ',' << r.p_pre << ',' << r.q_pre << ',' << r.v_pre << ',' << r.p_rpf << ','
            << r.q_rpf << ',' << r.v_rpf << ',' << r.p_appf << ',' << r.q_appf << ',' << r.v_appf << '\n';
}

std::string SteadyStateTable::to_json() const {
    json j;
    j["ibr_utilization"] = {{"pre", pre_ibr_utilization}, {"rpf", rpf_ibr_utilization}, {"appf", appf_ibr_utilization}};
    j["appf_stages"] = appf_stages;
    for (const auto& r : rows)
        j["rows"].push_back({{"bus", r.bus_id},
                             {"kind", r.kind},
                             {"pre", {r.p_pre, r.q_pre, r.v_pre}},
                             {"rpf", {r.p_rpf, r.q_rpf, r.v_rpf}},
                             {"appf", {r.p_appf, r.q_appf, r.v_appf}}});
    return j.dump(2);
}

SteadyStateTable compare_rpf_appf(const grid::Network& net, const Disturbance& d, const freq::Weights& weights) {
    powerflow::RegularPowerFlowOptions rpf;
    const auto pre = powerflow::solve_regular_power_flow(net, 0, rpf);
    if (!pre.converged) throw ConfigError("base case power flow did not converge");

    const auto bus = net.bus_index(d.bus_id);
    const auto area = net.buses[bus].area;
    std::vector<std::size_t> tripped;
    double deficit = d.dp;
    if (!d.trip_sg.empty()) {
        const auto sg = sg_by_name(net, d.trip_sg);
        tripped.push_back(sg);
        deficit += net.sgs[sg].p_set;
    }

    // APPF post-event model: the load change, tripped units listed separately.
    grid::Network post = net;
    bool placed = false;
    for (auto& l : post.loads)
        if (l.bus == bus) {
            l.p += d.dp;
            l.q += d.dq;
            placed = true;
            break;
        }
    if (!placed && (d.dp != 0.0 || d.dq != 0.0)) post.loads.push_back({bus, d.dp, d.dq});

    // Conventional redispatch: surviving SGs share the deficit by rating.
    grid::Network conv = post;
    if (!tripped.empty()) {
        const auto sg_bus = conv.sgs[tripped.front()].bus;
        conv.sgs.erase(conv.sgs.begin() + static_cast<std::ptrdiff_t>(tripped.front()));
        if (conv.sgs_at(sg_bus).empty()) conv.buses[sg_bus].kind = grid::BusKind::Transfer;
    }
    double rating = 0.0;
    for (const auto& u : conv.sgs) rating += u.p_max;
    for (auto& u : conv.sgs) u.p_set += deficit * u.p_max / rating;
    const auto after = powerflow::solve_regular_power_flow(conv, 0, rpf);
    if (!after.converged) throw ConfigError("post-event power flow did not converge");

    SteadyStateTable t;
    for (std::size_t b = 0; b < net.bus_count(); ++b) {
        const auto i = static_cast<Eigen::Index>(b);
        SteadyStateRow row;
        row.bus_id = net.buses[b].id;
        row.kind = grid::to_string(net.buses[b].kind);
        row.p_pre = pre.p[i];
        row.q_pre = pre.q[i];
        row.v_pre = pre.v_mag[i];
        row.p_rpf = after.p[i];
        row.q_rpf = after.q[i];
        row.v_rpf = after.v_mag[i];
        row.p_appf = pre.p[i];
        row.q_appf = pre.q[i];
        row.v_appf = pre.v_mag[i];
        t.rows.push_back(row);
    }

    if (deficit > 1e-12) {
        const auto partition = grid::assign_hierarchies(post, area);
        freq::ImbalanceReport report;
        report.contingent_area = area;
        report.kind = tripped.empty() ? freq::ImbalanceKind::LoadChange : freq::ImbalanceKind::GenerationTrip;
        report.magnitude = deficit;
        freq::AppfOptions ao;
        ao.weights = weights;
        const auto out = freq::run_appf(post, partition, pre, report, ao, nullptr, tripped);
        if (out.failure) throw ConfigError("APPF stage failed: " + out.failure->message());
        t.appf_stages = out.stages.size();
        for (const auto& st : out.stages) {
            const auto& order = st.buses;
            for (std::size_t k = 0; k < order.size(); ++k) {
                const auto i = static_cast<Eigen::Index>(k);
                auto& row = t.rows[order[k]];
                row.p_appf = st.solution.p[i];
                row.q_appf = st.solution.q[i];
                row.v_appf = st.solution.v_mag[i];
            }
        }
    }

    // IBR utilization of the contingent area: sum of net injections at IBR
    // buses over their active ceilings.
    double cap = 0.0, u_pre = 0.0, u_rpf = 0.0, u_appf = 0.0;
    for (auto k : net.ibrs_in_area(area)) {
        const auto& u = net.ibrs[k];
        const auto b = u.bus;
        cap += std::min(u.p_max, u.s_max);
        const double load = post.load_p(b);
        u_pre += t.rows[b].p_pre + net.load_p(b);
        u_rpf += t.rows[b].p_rpf + load;
        u_appf += t.rows[b].p_appf + load;
    }
    t.pre_ibr_utilization = u_pre / cap;
    t.rpf_ibr_utilization = u_rpf / cap;
    t.appf_ibr_utilization = u_appf / cap;
    return t;
}

}  // namespace appf::scenario
