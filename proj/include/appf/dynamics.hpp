#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/SparseCore>

#include "appf/grid.hpp"
#include "appf/powerflow.hpp"

namespace appf::dyn {

class SimulationError : public Error {
  public:
    SimulationError(const std::string& what, std::string dump) : Error(what), state_dump(std::move(dump)) {}
    std::string state_dump;
};

struct SgState {
    double delta = 0.0;         // rotor angle, rad, synchronous frame
    double speed_dev = 0.0;     // p.u.
    double p_mech = 0.0;        // p.u.
    double e_internal = 1.0;    // |E'|, driven by the AVR
    double p_ref = 0.0;         // governor load reference before AGC
    double v_ref = 1.0;         // AVR setpoint
    bool online = true;
};

struct IbrState {
    double p = 0.0;
    double q = 0.0;
    double p_ref = 0.0;
    double q_ref = 0.0;
};

struct LoadStep {
    std::size_t bus = 0;
    double dp = 0.0;
    double dq = 0.0;
};
struct GeneratorTrip {
    std::size_t sg = 0;
};
struct IbrCommand {
    std::size_t ibr = 0;
    double p = 0.0;
    double q = 0.0;
};
struct SetpointArrival {
    std::vector<IbrCommand> commands;
};
struct AvrSetpoint {
    std::size_t sg = 0;
    double v_ref = 1.0;
};

using EventPayload = std::variant<LoadStep, GeneratorTrip, SetpointArrival, AvrSetpoint>;

struct SimEvent {
    double time = 0.0;
    EventPayload payload;
    std::string label;
};

std::string describe(const SimEvent& e);

struct AgcOptions {
    bool enabled = false;
    double integral_gain = 0.04;  // p.u. power per p.u. ACE per s
    double trigger = 0.01;        // |ACE| that starts the activation timer
    double activation_delay = 10.0;
};

struct DroopOptions {
    bool enabled = false;
    double r = 0.05;  // p.u. speed per p.u. of inverter rating
};

struct SimOptions {
    double dt = 1.0 / 1200.0;
    double output_rate = 60.0;
    double frequency_filter = 0.05;  // s
    double network_tolerance = 1e-10;
    double speed_limit = 0.05;       // |speed deviation| that flags instability
    AgcOptions agc;
    DroopOptions ibr_droop;
};

/// One output sample.
struct Sample {
    double time = 0.0;
    std::vector<double> frequency;  // Hz per bus
    std::vector<double> v_mag;      // per bus
    std::vector<double> v_ang;      // per bus, rad
    std::vector<double> sg_p, sg_q;
    std::vector<double> ibr_p, ibr_q;
    std::vector<double> bus_p, bus_q;  // net device injection per bus
    std::vector<double> tie_p_in;   // per area, into the area
    std::vector<double> area_generation;
    std::vector<double> lost_generation;  // per area, pre-trip output of tripped units
    double balance_residual = 0.0;        // max nodal current mismatch
};

struct Trajectory {
    std::vector<int> bus_ids;
    std::vector<std::string> sg_names;
    std::vector<std::string> ibr_names;
    std::vector<Sample> samples;
    std::vector<SimEvent> events;  // as applied

    void write_csv(std::ostream& out) const;
    /// Sidecar: event list, sampling, options, and a hash of the configuration.
    std::string metadata_json(const SimOptions& options, const std::string& config) const;
};

/// Quasi-static phasor simulator: classical machines behind x'_d with swing,
/// governor, integral AVR and AGC; first-order inverter actuation; constant
/// PQ loads; the network is re-solved algebraically at every RK4 stage.
class Simulator {
  public:
    /// The network's device setpoints must describe a converged power flow
    /// (apply_solution); states are initialized at that equilibrium.
    Simulator(grid::Network net, SimOptions options = {});

    void schedule(SimEvent event);
    /// Advances to `t_end`, calling `on_sample` at every output instant
    /// (including t = now on the first call). Callbacks may schedule events
    /// strictly later than the sample time.
    void run_until(double t_end, const std::function<void(const Sample&)>& on_sample = {});

    double time() const { return static_cast<double>(step_count_) * options_.dt; }
    const grid::Network& network() const { return net_; }
    const powerflow::PowerFlowSolution& initial_point() const { return x0_; }
    const std::vector<SgState>& sgs() const { return sg_; }
    const std::vector<IbrState>& ibrs() const { return ibr_; }
    const CVector& voltages() const { return v_; }
    const std::vector<double>& agc_integrators() const { return agc_; }
    bool agc_active() const { return agc_active_; }
    const std::vector<SimEvent>& applied_events() const { return applied_; }
    Sample sample() const;

  private:
    struct Snapshot {
        std::vector<SgState> sg;
        std::vector<IbrState> ibr;
        std::vector<double> agc;
    };

    void apply_due_events();
    void apply(const SimEvent& e);
    void rebuild_network();
    void solve_network(const Snapshot& s, CVector& v);
    void load_injections(const Snapshot& s);
    CVector residual(const Snapshot& s, const CVector& v, Complex rot) const;
    void factor(const CVector& v);
    Snapshot snapshot() const;
    Snapshot derivatives(const Snapshot& s, const CVector& v) const;
    void step();
    [[noreturn]] void fail(const std::string& what) const;
    std::vector<double> tie_inflow(const CVector& v) const;
    double area_speed(const Snapshot& s, std::size_t area) const;
    std::vector<double> area_control_error(const Snapshot& s, const CVector& v) const;
    Complex internal_voltage(const SgState& s) const;
    Complex sg_current(const SgState& s, std::size_t k, const CVector& v) const;

    grid::Network net_;
    SimOptions options_;
    powerflow::PowerFlowSolution x0_;
    std::vector<SgState> sg_;
    std::vector<IbrState> ibr_;
    std::vector<double> agc_;
    std::vector<double> lost_;
    std::vector<double> tie_baseline_;
    std::vector<double> bias_;
    std::vector<Complex> load_;  // per bus, constant PQ
    Eigen::SparseMatrix<Complex> y_aug_;
    CVector v_;
    Matrix jac_;
    Eigen::PartialPivLU<Matrix> lu_;
    bool lu_valid_ = false;
    CVector s_inj_;  // IBR minus load, refreshed per network solve
    std::vector<double> freq_dev_;  // filtered, Hz
    std::vector<double> droop_p_;   // per IBR, held over one step
    double agc_onset_ = -1.0;
    bool agc_active_ = false;
    std::vector<std::size_t> ties_;
    long long step_count_ = 0;
    long long steps_per_sample_ = 1;
    long long last_emitted_ = -1;
    std::vector<SimEvent> pending_;
    std::vector<SimEvent> applied_;
};

/// Plain batch run with a fixed event list.
Trajectory run_scenario(const grid::Network& net, std::vector<SimEvent> events, double duration,
                        const SimOptions& options = {});

}  // namespace appf::dyn
