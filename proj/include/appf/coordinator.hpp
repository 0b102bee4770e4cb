#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "appf/dynamics.hpp"
#include "appf/freq_appf.hpp"
#include "appf/volt_appf.hpp"

namespace appf::coord {

enum class Phase { Idle, Detected, PrimaryDispatched, StageSolving, AwaitingUpstream, Complete, FallbackAGC };

const char* to_string(Phase p);
bool legal_transition(Phase from, Phase to);

struct BusMeasurement {
    std::size_t bus = 0;
    double v_mag = 1.0;
    double v_ang = 0.0;
    double p = 0.0;  // net injection
    double q = 0.0;
};

struct TieMeasurement {
    std::size_t branch = 0;
    double p = 0.0;  // into the area
    double q = 0.0;
};

/// What one area's estimator publishes at every sample.
struct MeasurementFrame {
    double timestamp = 0.0;
    std::size_t area = 0;
    std::vector<BusMeasurement> buses;
    std::vector<TieMeasurement> ties;
    double lost_generation = 0.0;  // breaker telemetry
};

std::vector<MeasurementFrame> frames_from_sample(const grid::Network& net, const dyn::Sample& s);

enum class MessageKind { DeficitRequest, TieTargets, HeadroomUpdate, SetpointCommand, StageComplete, Fallback };

const char* to_string(MessageKind k);

/// Inter-coordinator message. Between hierarchy levels only deficits, tie
/// targets, headroom sums and phase notices travel. Setpoint commands carry
/// device setpoints only, never bus states.
struct Message {
    MessageKind kind = MessageKind::HeadroomUpdate;
    std::size_t source = 0;  // area index
    std::size_t destination = 0;
    double send_time = 0.0;
    double delivery_time = 0.0;
    std::uint64_t sequence = 0;
    std::size_t level = 0;
    double deficit = 0.0;
    double headroom = 0.0;
    std::vector<freq::TieTarget> ties;
    std::vector<dyn::IbrCommand> setpoints;
    std::vector<dyn::AvrSetpoint> avrs;
    bool keep_active = false;  // apply Q only; the receiving area keeps its own P
};

/// Setpoints leaving a coordinator for the devices of its area.
struct DispatchCommand {
    double time = 0.0;
    std::size_t area = 0;
    std::string label;
    std::vector<dyn::IbrCommand> ibrs;
    std::vector<dyn::AvrSetpoint> avrs;
};

std::vector<dyn::SimEvent> to_events(const DispatchCommand& c);

/// Event size and location as delivered by the area state estimator.
struct EventEstimate {
    std::size_t bus = 0;
    double delta_p = 0.0;
    double delta_q = 0.0;
    std::vector<std::size_t> tripped_sgs;
};
using Estimator = std::function<std::optional<EventEstimate>(std::size_t area, double time)>;

struct CoordinatorConfig {
    double primary_delay = 0.5;
    double estimation_delay = 20.0;   // detection -> first stage solution
    double next_stage_delay = 10.0;   // tie targets -> next stage solution
    double voltage_secondary_delay = 1.0;
    double latency = 0.25;
    std::optional<std::pair<double, double>> latency_range;  // randomized per message when set
    std::uint64_t seed = 1;
    double heartbeat_period = 5.0;
    double rearm_delay = 10.0;
    freq::DetectionOptions detection;
    volt::VoltageBounds voltage_bounds;
    /// Tightens the local band the voltage stages dispatch against, so the
    /// settled dynamic profile stays inside the nominal one.
    double voltage_margin = 0.002;
    freq::Weights weights;
    powerflow::StageOptions stage;
    bool frequency_control = true;
    bool voltage_control = true;
};

/// Per-area record kept for inspection and tests.
struct AreaStatus {
    Phase phase = Phase::Idle;
    int level = -1;  // hierarchy level in the current episode
    double pending_deficit = 0.0;
    std::size_t dropped_frames = 0;
};

struct TraceRecord {
    double time = 0.0;
    std::string json;  // one JSON object
};

/// All area coordinators of one network plus the delayed FIFO channels
/// between them, driven by the simulation loop.
class CoordinatorSystem {
  public:
    CoordinatorSystem(const grid::Network& net, const powerflow::PowerFlowSolution& x_pre, Estimator estimator,
                      CoordinatorConfig config = {});
    ~CoordinatorSystem();
    CoordinatorSystem(const CoordinatorSystem&) = delete;
    CoordinatorSystem& operator=(const CoordinatorSystem&) = delete;

    /// Feeds one frame to its area coordinator; returns true when it triggered
    /// a detection.
    bool ingest(const MeasurementFrame& frame);
    /// Earliest pending timer or message delivery (infinity when nothing is pending).
    double next_wakeup() const;
    /// Runs every timer and delivery due at or before `now`.
    std::vector<DispatchCommand> advance(double now);

    const AreaStatus& status(std::size_t area) const;
    std::size_t area_count() const;
    const std::vector<Message>& messages() const;  // in send order
    const std::vector<TraceRecord>& trace() const;
    void write_trace(std::ostream& out) const;

    /// Outcomes of the last episode, for summaries.
    struct Episode {
        std::optional<freq::ImbalanceReport> active;
        std::optional<volt::ReactiveImbalanceReport> reactive;
        std::vector<freq::PrimaryDispatch> primary;
        std::vector<freq::StageResult> stages;
        std::optional<volt::VoltageAppfRun> voltage;
        std::optional<powerflow::InfeasibilityReport> failure;
        std::vector<std::size_t> held_ibrs;
    };
    const std::vector<Episode>& episodes() const;

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace appf::coord
