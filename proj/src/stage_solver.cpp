#include "appf/stage_solver.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace appf::powerflow {

const char* to_string(Quantity q) {
    switch (q) {
        case Quantity::Vm: return "|V|";
        case Quantity::Va: return "theta";
        case Quantity::P: return "P";
        case Quantity::Q: return "Q";
    }
    return "?";
}

void VariableMask::set_pattern(std::size_t bus, Quantity free_a, Quantity free_b) {
    for (std::size_t q = 0; q < 4; ++q) fixed_.at(bus)[q] = true;
    set_fixed(bus, free_a, false);
    set_fixed(bus, free_b, false);
}

std::size_t VariableMask::fixed_count(std::size_t bus) const {
    return static_cast<std::size_t>(std::count(fixed_.at(bus).begin(), fixed_.at(bus).end(), true));
}

std::size_t VariableMask::free_count() const {
    std::size_t n = 0;
    for (std::size_t b = 0; b < fixed_.size(); ++b) n += 4 - fixed_count(b);
    return n;
}

StageSpec::StageSpec(std::size_t buses) : mask(buses), bounds(buses) {
    initial_point.v_mag = Vector::Ones(static_cast<Eigen::Index>(buses));
    initial_point.v_ang = Vector::Zero(static_cast<Eigen::Index>(buses));
    initial_point.p = Vector::Zero(static_cast<Eigen::Index>(buses));
    initial_point.q = Vector::Zero(static_cast<Eigen::Index>(buses));
}

namespace {

double value_of(const PowerFlowSolution& s, VariableRef ref) {
    const auto i = static_cast<Eigen::Index>(ref.bus);
    switch (ref.quantity) {
        case Quantity::Vm: return s.v_mag[i];
        case Quantity::Va: return s.v_ang[i];
        case Quantity::P: return s.p[i];
        case Quantity::Q: return s.q[i];
    }
    return 0.0;
}

double& value_of(PowerFlowSolution& s, VariableRef ref) {
    const auto i = static_cast<Eigen::Index>(ref.bus);
    switch (ref.quantity) {
        case Quantity::Vm: return s.v_mag[i];
        case Quantity::Va: return s.v_ang[i];
        case Quantity::P: return s.p[i];
        case Quantity::Q: return s.q[i];
    }
    return s.v_mag[i];
}

}  // namespace

double StageSpec::objective_value(const PowerFlowSolution& x) const {
    double f = 0.0;
    for (const auto& term : objective) {
        double r = -term.target;
        for (const auto& [ref, coeff] : term.combination) r += coeff * value_of(x, ref);
        f += term.weight * r * r;
    }
    return f;
}

std::string InfeasibilityReport::message() const {
    std::ostringstream out;
    out << constraint << " at bus " << bus_id << " violated by " << violation;
    return out.str();
}

namespace {

constexpr std::size_t kIdx(Quantity q) { return static_cast<std::size_t>(q); }

/// Connected components of the admittance graph; used for angle pinning.
std::vector<int> components(const CMatrix& y) {
    const auto n = static_cast<std::size_t>(y.rows());
    std::vector<int> comp(n, -1);
    int next = 0;
    for (std::size_t s = 0; s < n; ++s) {
        if (comp[s] >= 0) continue;
        std::vector<std::size_t> stack{s};
        comp[s] = next;
        while (!stack.empty()) {
            const auto a = stack.back();
            stack.pop_back();
            for (std::size_t b = 0; b < n; ++b) {
                if (comp[b] >= 0 || a == b) continue;
                if (std::abs(y(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b))) == 0.0) continue;
                comp[b] = next;
                stack.push_back(b);
            }
        }
        ++next;
    }
    return comp;
}

enum class IneqKind { Lower, Upper, Circle };

struct Inequality {
    IneqKind kind;
    std::size_t index;  // free-variable index, or circle index
};

/// Dense working form of a stage problem over the free variables.
class StageProblem {
  public:
    StageProblem(const CMatrix& y, const StageSpec& spec, VariableMask mask, bool with_bounds)
        : y_(y), spec_(spec), mask_(std::move(mask)), with_bounds_(with_bounds) {
        const std::size_t n = spec.size();
        free_index_.assign(n, {-1, -1, -1, -1});
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t q = 0; q < 4; ++q) {
                if (mask_.is_fixed(b, static_cast<Quantity>(q))) continue;
                free_index_[b][q] = static_cast<int>(vars_.size());
                vars_.push_back({b, static_cast<Quantity>(q)});
            }
        }
        nx_ = static_cast<Eigen::Index>(vars_.size());
        ng_ = 2 * static_cast<Eigen::Index>(spec.balance_scope.size());

        if (with_bounds) {
            for (std::size_t i = 0; i < vars_.size(); ++i) {
                const auto& bd = spec.bound(vars_[i].bus, vars_[i].quantity);
                if (std::isfinite(bd.min)) ineq_.push_back({IneqKind::Lower, i});
                if (std::isfinite(bd.max)) ineq_.push_back({IneqKind::Upper, i});
            }
            for (std::size_t c = 0; c < spec.circles.size(); ++c) {
                const auto& circle = spec.circles[c];
                if (mask_.is_fixed(circle.bus, Quantity::P) && mask_.is_fixed(circle.bus, Quantity::Q)) continue;
                ineq_.push_back({IneqKind::Circle, c});
            }
        }
        nh_ = static_cast<Eigen::Index>(ineq_.size());

        // Objective in free-variable space: r_t = a_t . x + c_t
        obj_a_ = Matrix::Zero(static_cast<Eigen::Index>(spec.objective.size()), nx_);
        obj_c_ = Vector::Zero(static_cast<Eigen::Index>(spec.objective.size()));
        obj_w_ = Vector::Zero(static_cast<Eigen::Index>(spec.objective.size()));
        for (std::size_t t = 0; t < spec.objective.size(); ++t) {
            const auto& term = spec.objective[t];
            const auto ti = static_cast<Eigen::Index>(t);
            obj_w_[ti] = term.weight;
            obj_c_[ti] = -term.target;
            for (const auto& [ref, coeff] : term.combination) {
                const int fi = free_index_.at(ref.bus)[kIdx(ref.quantity)];
                if (fi >= 0)
                    obj_a_(ti, fi) += coeff;
                else
                    obj_c_[ti] += coeff * value_of(spec.initial_point, ref);
            }
        }
        hess_f_ = 2.0 * obj_a_.transpose() * obj_w_.asDiagonal() * obj_a_;
    }

    Eigen::Index nx() const { return nx_; }
    Eigen::Index ng() const { return ng_; }
    Eigen::Index nh() const { return nh_; }
    const std::vector<VariableRef>& vars() const { return vars_; }
    const std::vector<Inequality>& inequalities() const { return ineq_; }
    const StageSpec& spec() const { return spec_; }

    Vector initial_x() const {
        Vector x(nx_);
        for (Eigen::Index i = 0; i < nx_; ++i) {
            const auto& ref = vars_[static_cast<std::size_t>(i)];
            const auto& bd = spec_.bound(ref.bus, ref.quantity);
            x[i] = value_of(spec_.initial_point, ref);
            if (with_bounds_) x[i] = std::clamp(x[i], bd.min, bd.max);
        }
        return x;
    }

    PowerFlowSolution state(const Vector& x) const {
        PowerFlowSolution s = spec_.initial_point;
        for (Eigen::Index i = 0; i < nx_; ++i) value_of(s, vars_[static_cast<std::size_t>(i)]) = x[i];
        return s;
    }

    double objective(const Vector& x) const {
        const Vector r = obj_a_ * x + obj_c_;
        return r.dot(obj_w_.cwiseProduct(r));
    }

    Vector objective_gradient(const Vector& x) const {
        const Vector r = obj_a_ * x + obj_c_;
        return 2.0 * obj_a_.transpose() * obj_w_.cwiseProduct(r);
    }

    const Matrix& objective_hessian() const { return hess_f_; }

    /// Balance residuals (real rows then imaginary rows per scope bus) and Jacobian.
    void balance(const Vector& x, Vector& g, Matrix* jac) const {
        const auto s = state(x);
        const CVector v = s.voltages();
        const CVector inj = injections(y_, v);
        g.resize(ng_);
        const auto& scope = spec_.balance_scope;
        for (std::size_t r = 0; r < scope.size(); ++r) {
            const auto k = static_cast<Eigen::Index>(scope[r]);
            const auto ri = static_cast<Eigen::Index>(r);
            g[2 * ri] = inj[k].real() - s.p[k];
            g[2 * ri + 1] = inj[k].imag() - s.q[k];
        }
        if (!jac) return;
        const auto d = power_derivatives(y_, v);
        jac->setZero(ng_, nx_);
        for (std::size_t r = 0; r < scope.size(); ++r) {
            const auto k = scope[r];
            const auto ri = static_cast<Eigen::Index>(r);
            for (Eigen::Index i = 0; i < nx_; ++i) {
                const auto& ref = vars_[static_cast<std::size_t>(i)];
                const auto col = static_cast<Eigen::Index>(ref.bus);
                Complex value;
                switch (ref.quantity) {
                    case Quantity::Vm: value = d.ds_dvm(static_cast<Eigen::Index>(k), col); break;
                    case Quantity::Va: value = d.ds_dva(static_cast<Eigen::Index>(k), col); break;
                    case Quantity::P: value = ref.bus == k ? Complex(-1.0, 0.0) : Complex(0.0); break;
                    case Quantity::Q: value = ref.bus == k ? Complex(0.0, -1.0) : Complex(0.0); break;
                }
                (*jac)(2 * ri, i) = value.real();
                (*jac)(2 * ri + 1, i) = value.imag();
            }
        }
    }

    void inequality(const Vector& x, Vector& h, Matrix& jac) const {
        h.resize(nh_);
        jac.setZero(nh_, nx_);
        const auto s = state(x);
        for (Eigen::Index r = 0; r < nh_; ++r) {
            const auto& c = ineq_[static_cast<std::size_t>(r)];
            if (c.kind == IneqKind::Circle) {
                const auto& circle = spec_.circles[c.index];
                const auto b = static_cast<Eigen::Index>(circle.bus);
                const double p = s.p[b] + circle.p_offset;
                const double q = s.q[b] + circle.q_offset;
                h[r] = p * p + q * q - circle.s_max * circle.s_max;
                const int ip = free_index_[circle.bus][kIdx(Quantity::P)];
                const int iq = free_index_[circle.bus][kIdx(Quantity::Q)];
                if (ip >= 0) jac(r, ip) = 2.0 * p;
                if (iq >= 0) jac(r, iq) = 2.0 * q;
                continue;
            }
            const auto i = static_cast<Eigen::Index>(c.index);
            const auto& ref = vars_[c.index];
            const auto& bd = spec_.bound(ref.bus, ref.quantity);
            if (c.kind == IneqKind::Lower) {
                h[r] = bd.min - x[i];
                jac(r, i) = -1.0;
            } else {
                h[r] = x[i] - bd.max;
                jac(r, i) = 1.0;
            }
        }
    }

    /// Hessian of lambda' g(x) + mu_circle' h_circle(x).
    Matrix constraint_hessian(const Vector& x, const Vector& lambda, const Vector& mu) const {
        Matrix hess = Matrix::Zero(nx_, nx_);
        Vector g;
        Matrix jp;
        Matrix jm;
        // Balance rows are linear in P and Q; only voltage columns need differencing.
        for (Eigen::Index i = 0; i < nx_; ++i) {
            const auto q = vars_[static_cast<std::size_t>(i)].quantity;
            if (q != Quantity::Vm && q != Quantity::Va) continue;
            const double step = 1e-6;
            Vector xp = x;
            Vector xm = x;
            xp[i] += step;
            xm[i] -= step;
            balance(xp, g, &jp);
            balance(xm, g, &jm);
            hess.col(i) = (jp.transpose() * lambda - jm.transpose() * lambda) / (2.0 * step);
        }
        hess = 0.5 * (hess + hess.transpose()).eval();
        for (Eigen::Index r = 0; r < nh_; ++r) {
            const auto& c = ineq_[static_cast<std::size_t>(r)];
            if (c.kind != IneqKind::Circle) continue;
            const auto& circle = spec_.circles[c.index];
            for (auto q : {Quantity::P, Quantity::Q}) {
                const int fi = free_index_[circle.bus][kIdx(q)];
                if (fi >= 0) hess(fi, fi) += 2.0 * mu[r];
            }
        }
        return hess;
    }

  private:
    const CMatrix& y_;
    const StageSpec& spec_;
    VariableMask mask_;
    bool with_bounds_ = true;
    std::vector<std::array<int, 4>> free_index_;
    std::vector<VariableRef> vars_;
    std::vector<Inequality> ineq_;
    Eigen::Index nx_ = 0;
    Eigen::Index ng_ = 0;
    Eigen::Index nh_ = 0;
    Matrix obj_a_;
    Vector obj_c_;
    Vector obj_w_;
    Matrix hess_f_;
};

struct IpmOutcome {
    Vector x;
    bool converged = false;
    int iterations = 0;
    double feasibility = 0.0;
    double optimality = 0.0;
};

double max_positive(const Vector& h) { return h.size() ? std::max(0.0, h.maxCoeff()) : 0.0; }

double inf_norm(const Vector& v) { return v.size() ? v.lpNorm<Eigen::Infinity>() : 0.0; }

/// Primal-dual interior point with slack variables for h(x) <= 0.
IpmOutcome interior_point(const StageProblem& prob, const StageOptions& options) {
    constexpr double kStepFraction = 0.99995;
    constexpr double kCentering = 0.1;
    constexpr double kRegularization = 1e-10;

    const auto nx = prob.nx();
    const auto ng = prob.ng();
    const auto nh = prob.nh();

    IpmOutcome out;
    Vector x = prob.initial_x();
    Vector g;
    Matrix jg;
    Vector h;
    Matrix jh;
    prob.balance(x, g, &jg);
    prob.inequality(x, h, jh);

    Vector z = Vector::Ones(nh);
    for (Eigen::Index i = 0; i < nh; ++i)
        if (h[i] < -1.0) z[i] = -h[i];
    double gamma = 1.0;
    Vector mu = gamma * z.cwiseInverse();
    Vector lambda = Vector::Zero(ng);

    auto measures = [&](double& feas, double& grad, double& comp) {
        const Vector lx = prob.objective_gradient(x) + jg.transpose() * lambda + jh.transpose() * mu;
        feas = std::max(inf_norm(g), max_positive(h));
        grad = inf_norm(lx) / (1.0 + std::max(inf_norm(lambda), inf_norm(mu)));
        comp = nh ? z.dot(mu) / (1.0 + inf_norm(x)) : 0.0;
    };

    double feas = 0.0;
    double grad = 0.0;
    double comp = 0.0;
    measures(feas, grad, comp);
    for (int it = 0; it < options.max_iterations; ++it) {
        if (feas <= options.feasibility_tolerance && grad <= options.optimality_tolerance &&
            comp <= options.feasibility_tolerance) {
            out.converged = true;
            break;
        }
        out.iterations = it + 1;

        const Vector lx = prob.objective_gradient(x) + jg.transpose() * lambda + jh.transpose() * mu;
        const Vector zinv = z.cwiseInverse();
        Matrix lxx = prob.objective_hessian() + prob.constraint_hessian(x, lambda, mu);
        const Matrix dh_zinv = jh.transpose() * zinv.asDiagonal();
        Matrix m = lxx + dh_zinv * mu.asDiagonal() * jh;
        m.diagonal().array() += kRegularization;
        const Vector nvec = lx + dh_zinv * (mu.cwiseProduct(h) + gamma * Vector::Ones(nh));

        Matrix kkt = Matrix::Zero(nx + ng, nx + ng);
        kkt.topLeftCorner(nx, nx) = m;
        kkt.topRightCorner(nx, ng) = jg.transpose();
        kkt.bottomLeftCorner(ng, nx) = jg;
        Vector rhs(nx + ng);
        rhs.head(nx) = -nvec;
        rhs.tail(ng) = -g;
        const Vector sol = kkt.partialPivLu().solve(rhs);
        if (!sol.allFinite()) break;

        const Vector dx = sol.head(nx);
        const Vector dlambda = sol.tail(ng);
        const Vector dz = -h - z - jh * dx;
        const Vector dmu = -mu + zinv.cwiseProduct(gamma * Vector::Ones(nh) - mu.cwiseProduct(dz));

        double alpha_p = 1.0;
        double alpha_d = 1.0;
        for (Eigen::Index i = 0; i < nh; ++i) {
            if (dz[i] < 0.0) alpha_p = std::min(alpha_p, kStepFraction * (-z[i] / dz[i]));
            if (dmu[i] < 0.0) alpha_d = std::min(alpha_d, kStepFraction * (-mu[i] / dmu[i]));
        }

        x += alpha_p * dx;
        z += alpha_p * dz;
        lambda += alpha_d * dlambda;
        mu += alpha_d * dmu;
        if (nh) gamma = kCentering * z.dot(mu) / static_cast<double>(nh);

        prob.balance(x, g, &jg);
        prob.inequality(x, h, jh);
        measures(feas, grad, comp);
        if (!std::isfinite(feas) || !std::isfinite(grad)) break;
    }
    if (!out.converged && feas <= options.feasibility_tolerance && grad <= options.optimality_tolerance &&
        comp <= options.feasibility_tolerance)
        out.converged = true;
    out.x = x;
    out.feasibility = feas;
    out.optimality = grad;
    return out;
}

VariableMask with_pinned_angles(const CMatrix& y, const StageSpec& spec, std::vector<std::size_t>& pinned) {
    VariableMask mask = spec.mask;
    const auto comp = components(y);
    const int count = comp.empty() ? 0 : *std::max_element(comp.begin(), comp.end()) + 1;
    for (int c = 0; c < count; ++c) {
        bool anchored = false;
        std::size_t lowest = spec.size();
        for (std::size_t b = 0; b < spec.size(); ++b) {
            if (comp[b] != c) continue;
            lowest = std::min(lowest, b);
            if (mask.is_fixed(b, Quantity::Va)) anchored = true;
        }
        if (anchored) continue;
        std::size_t choice = lowest;
        for (auto cand : spec.angle_reference_preference) {
            if (cand < spec.size() && comp[cand] == c) {
                choice = cand;
                break;
            }
        }
        mask.set_fixed(choice, Quantity::Va, true);
        pinned.push_back(choice);
    }
    return mask;
}

int label_of(const StageSpec& spec, std::size_t bus) {
    return bus < spec.bus_ids.size() ? spec.bus_ids[bus] : static_cast<int>(bus) + 1;
}

/// Locates the constraint responsible for a failed solve by re-solving with
/// the inequalities dropped and measuring what the relaxed optimum violates.
InfeasibilityReport diagnose(const CMatrix& y, const StageSpec& spec, const VariableMask& mask,
                             const StageOptions& options, const Vector& failed_x, const StageProblem& failed) {
    StageProblem relaxed(y, spec, mask, /*with_bounds=*/false);
    const auto outcome = interior_point(relaxed, options);
    InfeasibilityReport worst;
    if (!outcome.converged) {
        Vector g;
        failed.balance(failed_x, g, nullptr);
        Eigen::Index row = 0;
        worst.violation = g.size() ? g.cwiseAbs().maxCoeff(&row) : 0.0;
        worst.constraint = row % 2 == 0 ? "active power balance" : "reactive power balance";
        worst.quantity = row % 2 == 0 ? Quantity::P : Quantity::Q;
        if (g.size()) worst.bus_id = label_of(spec, spec.balance_scope[static_cast<std::size_t>(row / 2)]);
        return worst;
    }
    const auto state = relaxed.state(outcome.x);
    worst.violation = 0.0;
    for (std::size_t i = 0; i < relaxed.vars().size(); ++i) {
        const auto& ref = relaxed.vars()[i];
        const auto& bd = spec.bound(ref.bus, ref.quantity);
        const double v = outcome.x[static_cast<Eigen::Index>(i)];
        const double lo = bd.min - v;
        const double hi = v - bd.max;
        if (lo > worst.violation) {
            worst = {std::string(to_string(ref.quantity)) + " lower bound", label_of(spec, ref.bus), ref.quantity, lo};
        }
        if (hi > worst.violation) {
            worst = {std::string(to_string(ref.quantity)) + " upper bound", label_of(spec, ref.bus), ref.quantity, hi};
        }
    }
    for (const auto& circle : spec.circles) {
        const auto b = static_cast<Eigen::Index>(circle.bus);
        const double s = std::hypot(state.p[b] + circle.p_offset, state.q[b] + circle.q_offset);
        if (s - circle.s_max > worst.violation)
            worst = {"MVA capability", label_of(spec, circle.bus), Quantity::Q, s - circle.s_max};
    }
    return worst;
}

}  // namespace

StageResult solve_constrained_stage(const CMatrix& y, const StageSpec& spec, const StageOptions& options) {
    const std::size_t n = spec.size();
    if (static_cast<std::size_t>(y.rows()) != n || spec.bounds.size() != n ||
        static_cast<std::size_t>(spec.initial_point.v_mag.size()) != n)
        throw ConfigError("stage spec dimensions do not match the admittance matrix");
    for (const auto& term : spec.objective)
        if (!(term.weight >= 0.0)) throw ConfigError("objective weights must be non-negative");
    for (const auto& per_bus : spec.bounds)
        for (const auto& bd : per_bus)
            if (bd.min > bd.max) throw ConfigError("bound with min > max");
    for (auto b : spec.balance_scope)
        if (b >= n) throw ConfigError("balance scope references unknown bus");

    StageResult result;
    const VariableMask mask = with_pinned_angles(y, spec, result.pinned_angles);
    StageProblem prob(y, spec, mask, /*with_bounds=*/true);
    const auto outcome = interior_point(prob, options);

    if (!outcome.converged) {
        auto report = diagnose(y, spec, mask, options, outcome.x, prob);
        auto last = prob.state(outcome.x);
        last.converged = false;
        last.iterations = outcome.iterations;
        last.max_mismatch = outcome.feasibility;
        if (report.violation > options.feasibility_tolerance) throw InfeasibleError(std::move(report), std::move(last));
        throw DivergedError("stage optimization did not converge (optimality " +
                                std::to_string(outcome.optimality) + ")",
                            std::move(last));
    }

    // Clip onto the box (moves at most the feasibility tolerance) and report.
    Vector x = outcome.x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const auto& ref = prob.vars()[static_cast<std::size_t>(i)];
        const auto& bd = spec.bound(ref.bus, ref.quantity);
        x[i] = std::clamp(x[i], bd.min, bd.max);
    }
    Vector g;
    prob.balance(x, g, nullptr);
    result.solution = prob.state(x);
    result.solution.converged = true;
    result.solution.iterations = outcome.iterations;
    result.solution.max_mismatch = inf_norm(g);
    result.objective = prob.objective(x);
    result.optimality = outcome.optimality;
    return result;
}

}  // namespace appf::powerflow
