#pragma once

#include <optional>
#include <span>
#include <vector>

#include "appf/grid.hpp"
#include "appf/stage_solver.hpp"

namespace appf::volt {

struct VoltageBounds {
    double local_min = 0.95;
    double local_max = 1.05;
    double global_delta = 0.10;  // half-width of the band around the pre-event profile
    double global_cap = 1.10;    // absolute ceiling of the relaxed band
    double beta1 = 0.05;         // allowed sag before detection
    double beta2 = 0.05;         // allowed swell before detection
};

struct VoltageSample {
    double time = 0.0;
    std::vector<double> v_mag;
};

struct ReactiveImbalanceReport {
    std::size_t bus = 0;
    double delta_q = 0.0;
    double deviation = 0.0;  // |V| - V_pre at the reported bus
    double detection_time = 0.0;
};

/// Flags the bus with the largest excursion outside [V_pre - beta1, V_pre + beta2]
/// once the excursion has persisted for `debounce` seconds. The imbalance
/// size comes from the area state estimator (`estimated_delta_q`).
std::optional<ReactiveImbalanceReport> detect_reactive_imbalance(std::span<const VoltageSample> samples,
                                                                 const Vector& v_pre, const VoltageBounds& bounds,
                                                                 double estimated_delta_q, double debounce = 0.1);

class SingularJacobianError : public Error {
  public:
    using Error::Error;
};

/// dV/dQ coefficients at an operating point; rows and columns of buses where
/// Q is not a free injection (SG, slack) are zero.
struct SensitivityMatrix {
    Matrix s;
    std::vector<bool> perturbable;
    double total_q = 0.0;  // sum of Q injections at the operating point

    /// True once the total reactive injection has moved by more than `threshold`.
    bool stale(const powerflow::PowerFlowSolution& now, double threshold = 0.05) const;
};

/// Power-flow roles used for the sensitivity: slack, PV at SG buses, PQ elsewhere.
std::vector<powerflow::BusRole> sensitivity_roles(const grid::Network& net, std::size_t slack_bus);

/// Throws SingularJacobianError near voltage collapse.
SensitivityMatrix compute_sensitivity(const grid::Network& net, const powerflow::PowerFlowSolution& x,
                                      std::size_t slack_bus = 0);

struct IbrQHeadroom {
    std::size_t ibr = 0;
    std::size_t bus = 0;
    int bus_id = 0;
    double q_set = 0.0;
    double headroom = 0.0;
};

std::vector<IbrQHeadroom> reactive_headrooms(const grid::Network& net, std::span<const std::size_t> ibrs);

struct IbrClassPartition {
    std::vector<IbrQHeadroom> ranking;  // descending sensitivity
    std::vector<std::size_t> class1;    // IBR indices
    std::vector<std::size_t> class2;
};

IbrClassPartition rank_and_classify(const Matrix& s, std::size_t contingent_bus, double delta_q,
                                    std::vector<IbrQHeadroom> units);

struct ReactiveDispatch {
    std::vector<std::size_t> ibrs;
    std::vector<double> increments;
    std::vector<double> setpoints;
    double residual = 0.0;  // imbalance left for the secondary stage
};

/// Fills class-1 headrooms in ranking order; the last unit takes the remainder.
ReactiveDispatch primary_reactive_dispatch(const IbrClassPartition& partition, double delta_q);

enum class Step { LocalIbr = 3, RelaxedIbr = 4, WithSg = 5, SgHeld = 6 };

struct StepRecord {
    Step step;
    bool converged = false;
    double objective = 0.0;
    std::string note;
};

struct VoltageOutcome {
    bool converged = false;
    Step accepted = Step::LocalIbr;
    std::vector<StepRecord> steps;
    std::vector<std::size_t> buses;  // stage order -> network bus
    powerflow::PowerFlowSolution solution;
    double objective = 0.0;
    std::vector<std::pair<std::size_t, double>> sg_voltage_setpoints;  // SG index, |V|
    struct IbrSet {
        std::size_t ibr;
        double p;
        double q;
    };
    std::vector<IbrSet> ibr_setpoints;
    std::vector<std::size_t> relaxed_buses;  // buses whose final |V| lies outside the local band
    std::optional<powerflow::InfeasibilityReport> failure;
};

struct VoltageProblem {
    const grid::Network* net = nullptr;  // post-event network with primary setpoints applied
    const powerflow::PowerFlowSolution* x_pre = nullptr;   // pre-event profile for the global band
    const powerflow::PowerFlowSolution* x_init = nullptr;  // initialization (post-primary operating point)
    std::vector<std::size_t> buses;                        // stage buses; empty = whole network
    IbrClassPartition classes;
    VoltageBounds bounds;
    /// Weight pulling free inverter injections toward their setpoints; keeps
    /// otherwise flat directions well posed.
    double setpoint_weight = 1e-3;
};

/// Resource-ordered sequence of stage solves: inverters under the local band,
/// then inverters under the relaxed band, then SGs through AVR setpoints.
VoltageOutcome sequential_voltage_optimization(const VoltageProblem& problem,
                                               const powerflow::StageOptions& options = {});

/// Network with the event applied and IBR reactive setpoints moved by the dispatch.
grid::Network apply_reactive_dispatch(grid::Network net, const ReactiveDispatch& dispatch);

struct VoltageAppfOptions {
    VoltageBounds bounds;
    std::size_t slack_bus = 0;
    powerflow::StageOptions stage;
};

struct VoltageAppfRun {
    SensitivityMatrix sensitivity;
    IbrClassPartition classes;
    ReactiveDispatch primary;
    powerflow::PowerFlowSolution post_primary;
    VoltageOutcome outcome;
};

/// Whole pipeline for a reactive event at `bus`: sensitivities at the
/// pre-event point, ranking, class-1 dispatch, then the sequential stages.
VoltageAppfRun run_voltage_appf(const grid::Network& post_event, const powerflow::PowerFlowSolution& x_pre,
                                std::size_t bus, double delta_q, const VoltageAppfOptions& options = {});

/// Mean squared deviation of load-bus voltages from 1 p.u. (the stage objective).
double load_voltage_objective(const grid::Network& net, const Vector& v_mag, std::span<const std::size_t> buses);

}  // namespace appf::volt
