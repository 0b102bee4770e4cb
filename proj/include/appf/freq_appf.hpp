#pragma once

#include <map>
#include <optional>
#include <span>
#include <vector>

#include "appf/grid.hpp"
#include "appf/stage_solver.hpp"

namespace appf::freq {

enum class ImbalanceKind { LoadChange, GenerationTrip };

const char* to_string(ImbalanceKind kind);

/// Deviations from the pre-event baseline observed by one area coordinator.
/// Tie deltas are positive into the area.
struct AreaObservation {
    double delta_tie = 0.0;
    double delta_gen = 0.0;
    double lost_generation = 0.0;  // pre-trip output of units whose breakers opened
};

struct AreaSample {
    double time = 0.0;
    std::vector<AreaObservation> areas;
};

struct ImbalanceReport {
    std::size_t contingent_area = 0;
    ImbalanceKind kind = ImbalanceKind::LoadChange;
    double magnitude = 0.0;  // p.u., positive = deficit
    double detection_time = 0.0;
    std::vector<AreaObservation> observations;
    /// More than one area tripped the test in the same window: the event is
    /// left to AGC instead of APPF.
    bool multiple = false;
    std::vector<std::size_t> flagged_areas;
};

struct DetectionOptions {
    double threshold = 0.01;  // p.u.
    double debounce = 0.1;    // s
};

/// Streaming form of the detection test; feed samples in time order.
class ActiveImbalanceDetector {
  public:
    explicit ActiveImbalanceDetector(DetectionOptions options = {}) : options_(options) {}
    std::optional<ImbalanceReport> feed(const AreaSample& sample);
    void reset();

  private:
    DetectionOptions options_;
    std::optional<double> onset_;
    std::vector<std::size_t> onset_areas_;
    std::vector<ImbalanceKind> onset_kinds_;
};

std::optional<ImbalanceReport> detect_active_imbalance(std::span<const AreaSample> samples,
                                                       const DetectionOptions& options = {});

struct IbrHeadroom {
    std::size_t ibr = 0;  // index into Network::ibrs
    double p_set = 0.0;
    double headroom = 0.0;
};

std::vector<IbrHeadroom> active_headrooms(const grid::Network& net, std::span<const std::size_t> ibrs);

struct PrimaryDispatch {
    std::size_t level = 0;
    double request = 0.0;
    std::vector<std::size_t> ibrs;
    std::vector<double> increments;
    std::vector<double> setpoints;
    std::vector<double> area_shares;  // higher hierarchies only
    double residual_deficit = 0.0;

    double total_increment() const;
    std::map<std::size_t, double> setpoint_map() const;
};

/// Headroom-proportional split inside the contingent area, saturating every
/// unit when the deficit exceeds the total headroom.
PrimaryDispatch primary_dispatch_first_hierarchy(double delta_p, std::span<const IbrHeadroom> units);

/// Area shares proportional to area headroom sums, then unit shares
/// proportional to unit headroom inside each area.
PrimaryDispatch primary_dispatch_higher_hierarchy(double request, std::size_t level,
                                                  const std::vector<std::vector<IbrHeadroom>>& areas);

struct Weights {
    double tie = 1.0;  // w1
    double ibr = 1.0;  // w2
};

/// Complex power through one tie-line of a hierarchy link, measured at the
/// lower-level end and positive into the lower level.
struct TieTarget {
    std::size_t branch = 0;
    double p = 0.0;
    double q = 0.0;
};

struct IbrSetpoint {
    std::size_t ibr = 0;
    double p = 0.0;
    double q = 0.0;
};

struct StageResult {
    std::size_t level = 0;
    std::vector<std::size_t> buses;  // network bus indices, in stage order
    powerflow::PowerFlowSolution solution;
    double objective = 0.0;
    std::vector<IbrSetpoint> ibr_setpoints;
    std::vector<TieTarget> ties_down;  // link to level-1 (as used by this stage)
    std::vector<TieTarget> ties_up;    // link to level+1 (handed to the next stage)
};

struct StageInputs {
    const grid::Network* net = nullptr;  // post-event network (loads, trips applied)
    const grid::HierarchyPartition* partition = nullptr;
    const powerflow::PowerFlowSolution* x_star = nullptr;  // pre-event operating point
    /// Operating point that supplies held voltages; defaults to x_star.
    const powerflow::PowerFlowSolution* reference = nullptr;
    std::size_t level = 0;
    std::map<std::size_t, double> primary_setpoints;  // IBR index -> P target
    const StageResult* previous = nullptr;
    Weights weights;
    double delta_p_load = 0.0;
    /// Units reserved for other duties: their P and Q are held at the reference.
    std::vector<std::size_t> held_ibrs;
    std::vector<std::size_t> tripped_sgs;
};

/// Builds the level's optimization problem together with the map from stage
/// order to network bus index.
struct BuiltStage {
    powerflow::StageSpec spec;
    std::vector<std::size_t> buses;
    CMatrix y;
    std::vector<std::size_t> boundary_up;    // stage-local indices
    std::vector<std::size_t> boundary_down;  // stage-local indices
};
BuiltStage build_stage_spec(const StageInputs& in);

/// Solves one level and derives unit setpoints and the tie targets handed up.
StageResult solve_stage(const StageInputs& in, const powerflow::StageOptions& options = {});

struct AppfOutcome {
    std::vector<PrimaryDispatch> primary;
    std::vector<StageResult> stages;
    std::optional<powerflow::InfeasibilityReport> failure;
    std::size_t failed_level = 0;
};

struct AppfOptions {
    Weights weights;
    std::vector<std::size_t> held_ibrs;
    powerflow::StageOptions stage;
};

/// Primary dispatch per level until the deficit is absorbed.
std::vector<PrimaryDispatch> plan_primary(const grid::Network& net, const grid::HierarchyPartition& partition,
                                          double delta_p, std::span<const std::size_t> held_ibrs = {});

/// Sequential stages starting at the contingent level; stops at the first
/// level whose primary dispatch left no residual deficit. An infeasible stage
/// ends the sequence with the partial results and the report.
AppfOutcome run_appf(const grid::Network& post_event, const grid::HierarchyPartition& partition,
                     const powerflow::PowerFlowSolution& x_star, const ImbalanceReport& report,
                     const AppfOptions& options = {}, const powerflow::PowerFlowSolution* reference = nullptr,
                     std::vector<std::size_t> tripped_sgs = {});

}  // namespace appf::freq
