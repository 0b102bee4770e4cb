#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "appf/coordinator.hpp"
#include "appf/dynamics.hpp"

namespace appf::scenario {

enum class Mode { None, Droop, Hierarchical, HierarchicalDroop, AgcOnly };

const char* to_string(Mode m);
Mode mode_from_string(const std::string& name);  // throws ConfigError

/// Load step and/or unit trip applied at one instant.
struct Disturbance {
    double time = 10.0;
    int bus_id = 16;
    double dp = 0.0;  // p.u.
    double dq = 0.0;
    std::string trip_sg;  // SG name, empty for none
};

struct ScenarioDef {
    std::string id;
    std::string description;
    std::vector<Disturbance> events;
};

const std::vector<ScenarioDef>& scenarios();
const ScenarioDef& find_scenario(const std::string& id);  // throws ConfigError

struct ScenarioConfig {
    std::string case_path;  // empty: built-in reference case
    std::string scenario = "case1";
    Mode mode = Mode::Hierarchical;
    /// Replaces the scenario's event list when non-empty.
    std::vector<Disturbance> events;
    double duration = 100.0;
    dyn::SimOptions sim;
    coord::CoordinatorConfig coordinator;
    bool plot_data = false;
};

/// Reads overrides from a JSON config file on top of `base`.
ScenarioConfig apply_config_json(ScenarioConfig base, const std::string& text);
void validate(const ScenarioConfig& c);  // throws ConfigError

struct CaseResult {
    ScenarioConfig config;
    grid::Network network;
    dyn::Trajectory trajectory;
    std::vector<coord::TraceRecord> trace;
    std::vector<coord::Message> messages;
    std::vector<coord::CoordinatorSystem::Episode> episodes;
    std::vector<coord::Phase> final_phases;
    std::string summary_json;
};

/// Runs one scenario under one control mode. Throws ConfigError for bad
/// input and dyn::SimulationError when the simulation aborts.
CaseResult run_case(const ScenarioConfig& config);

/// Metrics computed from the trajectory alone.
struct Metrics {
    double onset = 0.0;
    std::optional<double> settling_time;  // after onset; empty when never settled
    double nadir = kNominalHz;
    double nadir_time = 0.0;
    double final_f_min = kNominalHz;
    double final_f_max = kNominalHz;
    double max_voltage_deviation = 0.0;  // over buses and time, vs t = 0
    std::vector<double> final_voltage;
    std::vector<double> ibr_p_initial, ibr_p_final, ibr_q_final;
};
Metrics compute_metrics(const dyn::Trajectory& t, double onset, double band = 0.01);

/// Writes trajectory.csv, trajectory.meta.json, summary.json, trace.jsonl and
/// (with plot_data) the per-figure series into `dir`.
void write_artifacts(const CaseResult& r, const std::filesystem::path& dir);

struct SteadyStateRow {
    int bus_id = 0;
    std::string kind;
    double p_pre = 0.0, q_pre = 0.0, v_pre = 0.0;
    double p_rpf = 0.0, q_rpf = 0.0, v_rpf = 0.0;
    double p_appf = 0.0, q_appf = 0.0, v_appf = 0.0;
};

struct SteadyStateTable {
    std::vector<SteadyStateRow> rows;
    double rpf_ibr_utilization = 0.0;   // contingent area: sum P / sum P_max
    double appf_ibr_utilization = 0.0;
    double pre_ibr_utilization = 0.0;
    std::size_t appf_stages = 0;

    void write_csv(std::ostream& out) const;
    std::string to_json() const;
};

/// Static comparison: conventional redispatch (SGs in proportion to their
/// ratings, slack takes the rest) against the APPF stage solutions.
SteadyStateTable compare_rpf_appf(const grid::Network& net, const Disturbance& contingency,
                                  const freq::Weights& weights = {});

}  // namespace appf::scenario
