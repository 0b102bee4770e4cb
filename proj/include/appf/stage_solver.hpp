#pragma once

#include <array>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "appf/powerflow.hpp"

namespace appf::powerflow {

enum class Quantity : std::size_t { Vm = 0, Va = 1, P = 2, Q = 3 };

const char* to_string(Quantity q);

struct VariableRef {
    std::size_t bus = 0;
    Quantity quantity = Quantity::Vm;
};

/// Fixed/free flag per bus for each of |V|, theta, P, Q.
class VariableMask {
  public:
    VariableMask() = default;
    explicit VariableMask(std::size_t buses) : fixed_(buses, {true, true, true, true}) {}

    std::size_t size() const { return fixed_.size(); }
    bool is_fixed(std::size_t bus, Quantity q) const { return fixed_.at(bus)[static_cast<std::size_t>(q)]; }
    bool is_free(std::size_t bus, Quantity q) const { return !is_fixed(bus, q); }
    void set_fixed(std::size_t bus, Quantity q, bool fixed) { fixed_.at(bus)[static_cast<std::size_t>(q)] = fixed; }

    /// Frees exactly the two listed quantities and fixes the other two.
    void set_pattern(std::size_t bus, Quantity free_a, Quantity free_b);
    std::size_t fixed_count(std::size_t bus) const;
    std::size_t free_count() const;

  private:
    std::vector<std::array<bool, 4>> fixed_;
};

/// weight * (sum_i coeff_i * x_i - target)^2
struct ObjectiveTerm {
    double weight = 1.0;
    std::vector<std::pair<VariableRef, double>> combination;
    double target = 0.0;
    std::string label;
};

struct Bound {
    double min = -std::numeric_limits<double>::infinity();
    double max = std::numeric_limits<double>::infinity();
};

/// (P + p_offset)^2 + (Q + q_offset)^2 <= s_max^2 on a bus injection; models
/// an inverter's MVA rating when other devices share the bus.
struct CapabilityCircle {
    std::size_t bus = 0;
    double s_max = 0.0;
    double p_offset = 0.0;
    double q_offset = 0.0;
};

/// One constrained power-flow stage over the buses of an admittance matrix.
struct StageSpec {
    VariableMask mask;
    std::vector<ObjectiveTerm> objective;
    std::vector<std::array<Bound, 4>> bounds;
    PowerFlowSolution initial_point;
    std::vector<std::size_t> balance_scope;
    std::vector<CapabilityCircle> circles;
    /// Candidates for pinning the angle of components that have no fixed angle,
    /// in order of preference. Falls back to the lowest bus index.
    std::vector<std::size_t> angle_reference_preference;
    /// External bus labels for reports; defaults to index + 1.
    std::vector<int> bus_ids;

    explicit StageSpec(std::size_t buses = 0);
    std::size_t size() const { return mask.size(); }
    Bound& bound(std::size_t bus, Quantity q) { return bounds.at(bus)[static_cast<std::size_t>(q)]; }
    const Bound& bound(std::size_t bus, Quantity q) const { return bounds.at(bus)[static_cast<std::size_t>(q)]; }
    double objective_value(const PowerFlowSolution& x) const;
};

struct StageOptions {
    double feasibility_tolerance = 1e-9;
    double optimality_tolerance = 1e-8;
    int max_iterations = 150;
};

struct StageResult {
    PowerFlowSolution solution;
    double objective = 0.0;
    double optimality = 0.0;  // scaled Lagrangian-gradient norm at the solution
    std::vector<std::size_t> pinned_angles;
};

struct InfeasibilityReport {
    std::string constraint;  // e.g. "|V| upper bound", "power balance"
    int bus_id = 0;
    Quantity quantity = Quantity::Vm;
    double violation = 0.0;
    std::string message() const;
};

class InfeasibleError : public Error {
  public:
    InfeasibleError(InfeasibilityReport r, PowerFlowSolution last)
        : Error("infeasible stage: " + r.message()), report(std::move(r)), last_iterate(std::move(last)) {}
    InfeasibilityReport report;
    PowerFlowSolution last_iterate;
};

/// Minimizes the spec objective subject to power balance on the balance scope
/// and the bounds/circles, with a primal-dual interior-point method.
/// Throws InfeasibleError (with the most violated constraint) or DivergedError.
StageResult solve_constrained_stage(const CMatrix& y, const StageSpec& spec, const StageOptions& options = {});

}  // namespace appf::powerflow
