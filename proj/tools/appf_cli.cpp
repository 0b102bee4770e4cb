// Command-line front end for the scenario runner.
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "appf/case_io.hpp"
#include "appf/powerflow.hpp"
#include "appf/reference_case.hpp"
#include "appf/scenario.hpp"

namespace {

constexpr int kConfigFailure = 2;
constexpr int kSimulationFailure = 3;

using namespace appf;

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read " + path);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

struct RunFlags {
    std::string config_file;
    std::string case_path;
    std::string scenario = "case1";
    std::vector<std::string> modes{"hierarchical"};
    std::string out_dir = "out";
    std::optional<double> duration, primary_delay, estimation_delay, next_stage_delay, latency, w1, w2;
    std::vector<double> latency_range;
    std::optional<std::uint64_t> seed;
    bool plot_data = false;
};

void add_common(CLI::App* cmd, RunFlags& f) {
    cmd->add_option("-s,--scenario", f.scenario, "Scenario id (see list-scenarios)");
    cmd->add_option("--case", f.case_path, "Case file; the built-in 33-bus case when omitted");
    cmd->add_option("-c,--config", f.config_file, "JSON config; its values override flags");
    cmd->add_option("--w1", f.w1, "Tie-line weight");
    cmd->add_option("--w2", f.w2, "IBR weight");
}

scenario::ScenarioConfig base_config(const RunFlags& f) {
    scenario::ScenarioConfig c;
    c.scenario = f.scenario;
    c.case_path = f.case_path;
    c.plot_data = f.plot_data;
    if (f.duration) c.duration = *f.duration;
    auto& k = c.coordinator;
    if (f.primary_delay) k.primary_delay = *f.primary_delay;
    if (f.estimation_delay) k.estimation_delay = *f.estimation_delay;
    if (f.next_stage_delay) k.next_stage_delay = *f.next_stage_delay;
    if (f.latency) k.latency = *f.latency;
    if (!f.latency_range.empty()) {
        if (f.latency_range.size() != 2) throw ConfigError("--latency-range takes two values");
        k.latency_range = std::pair{f.latency_range[0], f.latency_range[1]};
    }
    if (f.seed) k.seed = *f.seed;
    if (f.w1) k.weights.tie = *f.w1;
    if (f.w2) k.weights.ibr = *f.w2;
    return c;
}

int run(const RunFlags& f) {
    const auto flagged = base_config(f);
    std::vector<scenario::ScenarioConfig> configs;
    for (const auto& m : f.modes) {
        auto c = flagged;
        c.mode = scenario::mode_from_string(m);
        if (!f.config_file.empty()) c = scenario::apply_config_json(c, read_file(f.config_file));
        scenario::validate(c);
        configs.push_back(c);
    }
    for (const auto& c : configs) {
        const auto dir = configs.size() > 1 ? std::filesystem::path(f.out_dir) / scenario::to_string(c.mode)
                                            : std::filesystem::path(f.out_dir);
        const auto r = scenario::run_case(c);
        scenario::write_artifacts(r, dir);
        std::cout << c.scenario << " [" << scenario::to_string(c.mode) << "] -> " << dir.string() << '\n';
    }
    return 0;
}

int compare(const RunFlags& f) {
    auto c = base_config(f);
    if (!f.config_file.empty()) c = scenario::apply_config_json(c, read_file(f.config_file));
    scenario::validate(c);
    const auto net = c.case_path.empty() ? reference::build_reference_case() : grid::load_network(c.case_path);
    const auto& events = c.events.empty() ? scenario::find_scenario(c.scenario).events : c.events;
    if (events.size() != 1) throw ConfigError("compare needs exactly one disturbance");
    const auto table = scenario::compare_rpf_appf(net, events.front(), c.coordinator.weights);
    std::filesystem::create_directories(f.out_dir);
    std::ofstream csv(std::filesystem::path(f.out_dir) / "steady_state.csv", std::ios::binary);
    table.write_csv(csv);
    std::ofstream js(std::filesystem::path(f.out_dir) / "steady_state.json", std::ios::binary);
    js << table.to_json() << '\n';
    std::cout << "contingent-area IBR utilization: pre " << table.pre_ibr_utilization << ", RPF "
              << table.rpf_ibr_utilization << ", APPF " << table.appf_ibr_utilization << '\n';
    return 0;
}

int list_scenarios() {
    for (const auto& s : scenario::scenarios()) std::cout << s.id << "\t" << s.description << '\n';
    std::cout << "modes: none, droop, hierarchical, hierarchical+droop, agc-only\n";
    return 0;
}

int validate_case(const std::string& path) {
    const auto net = grid::load_network(path);
    const auto pf = powerflow::solve_regular_power_flow(net, 0);
    std::cout << net.name << ": " << net.bus_count() << " buses, " << net.areas.size() << " areas, "
              << net.sgs.size() << " SGs, " << net.ibrs.size() << " IBRs; base power flow "
              << (pf.converged ? "converges" : "does not converge") << " (mismatch " << pf.max_mismatch << ")\n";
    return pf.converged ? 0 : kConfigFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Area-prioritized power flow scenarios"};
    app.require_subcommand(1);

    RunFlags flags;
    auto* run_cmd = app.add_subcommand("run", "Simulate a scenario and write its artifacts");
    add_common(run_cmd, flags);
    run_cmd->add_option("-m,--mode", flags.modes, "Control mode(s)");
    run_cmd->add_option("-o,--out", flags.out_dir, "Output directory");
    run_cmd->add_option("--duration", flags.duration, "Simulated seconds");
    run_cmd->add_option("--primary-delay", flags.primary_delay, "Detection to primary dispatch, s");
    run_cmd->add_option("--estimation-delay", flags.estimation_delay, "Detection to first stage, s");
    run_cmd->add_option("--next-stage-delay", flags.next_stage_delay, "Tie targets to next stage, s");
    run_cmd->add_option("--latency", flags.latency, "Inter-area latency, s");
    run_cmd->add_option("--latency-range", flags.latency_range, "Randomized latency bounds, s")->expected(2);
    run_cmd->add_option("--seed", flags.seed, "Seed for randomized latencies");
    run_cmd->add_flag("--plot-data", flags.plot_data, "Also write per-figure series");

    auto* cmp_cmd = app.add_subcommand("compare", "Steady-state RPF versus APPF table");
    add_common(cmp_cmd, flags);
    cmp_cmd->add_option("-o,--out", flags.out_dir, "Output directory");

    app.add_subcommand("list-scenarios", "List scenario ids and control modes");

    std::string case_file;
    auto* val_cmd = app.add_subcommand("validate-case", "Parse a case file and solve its base power flow");
    val_cmd->add_option("file", case_file, "Case file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kConfigFailure;
    }

    try {
        if (*run_cmd) return run(flags);
        if (*cmp_cmd) return compare(flags);
        if (*val_cmd) return validate_case(case_file);
        return list_scenarios();
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return kConfigFailure;
    } catch (const dyn::SimulationError& e) {
        std::cerr << "simulation failed: " << e.what() << '\n' << e.state_dump << '\n';
        return kSimulationFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
