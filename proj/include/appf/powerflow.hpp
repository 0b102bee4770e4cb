#pragma once

#include <cstddef>
#include <vector>

#include "appf/grid.hpp"

namespace appf::powerflow {

/// Polar bus state plus net injections at every bus.
struct PowerFlowSolution {
    Vector v_mag;
    Vector v_ang;
    Vector p;
    Vector q;
    bool converged = false;
    int iterations = 0;
    double max_mismatch = 0.0;

    CVector voltages() const;
    std::size_t size() const { return static_cast<std::size_t>(v_mag.size()); }
};

class DivergedError : public Error {
  public:
    DivergedError(const std::string& what, PowerFlowSolution last)
        : Error(what), last_iterate(std::move(last)) {}
    PowerFlowSolution last_iterate;
};

CVector to_phasors(const Vector& v_mag, const Vector& v_ang);

/// residual_k = V_k * conj(sum_m Y_km V_m) - (P_k + jQ_k); no masking.
CVector mismatch(const CMatrix& y, const CVector& v, const CVector& s_injection);

/// Complex power injections S = diag(V) conj(Y V).
CVector injections(const CMatrix& y, const CVector& v);

/// Partial derivatives of the injections S(V) with respect to |V| and angle.
struct PowerDerivatives {
    CMatrix ds_dvm;
    CMatrix ds_dva;
};
PowerDerivatives power_derivatives(const CMatrix& y, const CVector& v);

enum class BusRole { Slack, PV, PQ };

struct NewtonOptions {
    double tolerance = 1e-8;
    int max_iterations = 50;
};

/// Newton-Raphson in polar form. `v_mag`/`v_ang` are the starting point and
/// carry the fixed magnitudes (PV, slack) and angle (slack); `p`/`q` the
/// specified injections (ignored where not specified by the role).
/// Throws DivergedError carrying the last iterate.
PowerFlowSolution solve_newton(const CMatrix& y, const std::vector<BusRole>& roles, const Vector& v_mag,
                               const Vector& v_ang, const Vector& p, const Vector& q,
                               const NewtonOptions& options = {});

struct RegularPowerFlowOptions {
    NewtonOptions newton;
    bool ibr_as_pv = false;
    bool flat_start = true;
};

/// Whole-network power flow: SG buses PV, IBR buses PQ (or PV), loads PQ.
PowerFlowSolution solve_regular_power_flow(const grid::Network& net, std::size_t slack_bus,
                                           const RegularPowerFlowOptions& options = {});

/// Pi-model branch flows, positive leaving the respective end into the branch.
struct LineFlow {
    double p_from = 0.0;
    double q_from = 0.0;
    double p_to = 0.0;
    double q_to = 0.0;
};
LineFlow line_flow(const grid::Branch& branch, Complex v_from, Complex v_to);
LineFlow line_flow(const grid::Branch& branch, const PowerFlowSolution& solution);

/// Writes a converged solution back into the network: bus states and the
/// device setpoints that reproduce it (slack SG absorbs the balance).
void apply_solution(grid::Network& net, const PowerFlowSolution& solution);

}  // namespace appf::powerflow
