#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "appf/freq_appf.hpp"
#include "appf/reference_case.hpp"
#include "oracles.hpp"
#include "random_cases.hpp"
#include "support.hpp"

using namespace appf;
using freq::AreaObservation;
using freq::AreaSample;
using testing::NetBuilder;
using grid::BusKind;

namespace {

std::vector<AreaSample> steady(std::vector<AreaObservation> obs, double t0 = 0.0, double t1 = 0.3) {
    std::vector<AreaSample> out;
    for (double t = t0; t <= t1 + 1e-12; t += 0.05) out.push_back({t, obs});
    return out;
}

std::vector<freq::IbrHeadroom> units(std::vector<double> h) {
    std::vector<freq::IbrHeadroom> out;
    for (std::size_t k = 0; k < h.size(); ++k) out.push_back({k, 0.1, h[k]});
    return out;
}

}  // namespace

TEST_CASE("active imbalance detection") {
    SUBCASE("load change in one area") {
        const auto r = freq::detect_active_imbalance(steady({{0.63, 0.0}, {-0.0, 0.0}, {0.0, 0.0}}));
        REQUIRE(r);
        CHECK(r->contingent_area == 0);
        CHECK(r->kind == freq::ImbalanceKind::LoadChange);
        CHECK(r->magnitude == doctest::Approx(0.63));
        CHECK(r->detection_time == 0.0);
        CHECK_FALSE(r->multiple);
    }
    SUBCASE("quiet streams") {
        CHECK_FALSE(freq::detect_active_imbalance(steady({{0.0, 0.0}, {0.0, 0.0}})));
    }
    SUBCASE("non-contingent areas see matching tie and generation changes") {
        const auto r = freq::detect_active_imbalance(steady({{0.0, 0.0}, {-0.2, 0.2}, {0.63, 0.0}}));
        REQUIRE(r);
        CHECK(r->contingent_area == 2);
    }
    SUBCASE("generation trip") {
        const auto r = freq::detect_active_imbalance(steady({{0.69, -0.69}, {-0.3, 0.3}}));
        REQUIRE(r);
        CHECK(r->kind == freq::ImbalanceKind::GenerationTrip);
        CHECK(r->magnitude == doctest::Approx(0.69));
    }
    SUBCASE("breaker status reports the lost output") {
        const auto r = freq::detect_active_imbalance(steady({{0.4, -0.1, 0.69}, {0.0, 0.0}}));
        REQUIRE(r);
        CHECK(r->kind == freq::ImbalanceKind::GenerationTrip);
        CHECK(r->magnitude == doctest::Approx(0.69));
    }
    SUBCASE("two areas at once are flagged for fallback") {
        const auto r = freq::detect_active_imbalance(steady({{0.5, 0.0}, {0.3, 0.0}}));
        REQUIRE(r);
        CHECK(r->multiple);
        CHECK(r->flagged_areas == std::vector<std::size_t>{0, 1});
    }
    SUBCASE("short glitch is debounced") {
        std::vector<AreaSample> s{{0.0, {{0.5, 0.0}}}, {0.05, {{0.0, 0.0}}}, {0.1, {{0.0, 0.0}}}, {0.15, {{0.0, 0.0}}}};
        CHECK_FALSE(freq::detect_active_imbalance(s));
    }
    SUBCASE("below threshold") {
        CHECK_FALSE(freq::detect_active_imbalance(steady({{0.009, 0.0}})));
    }
}

TEST_CASE("primary dispatch, first hierarchy") {
    SUBCASE("proportional split") {
        const auto d = freq::primary_dispatch_first_hierarchy(0.63, units({0.50, 0.30}));
        CHECK(d.increments[0] == doctest::Approx(0.39375).epsilon(1e-12));
        CHECK(d.increments[1] == doctest::Approx(0.23625).epsilon(1e-12));
        CHECK(d.residual_deficit == 0.0);
        CHECK(d.setpoints[0] == doctest::Approx(0.49375));
    }
    SUBCASE("saturation") {
        const auto d = freq::primary_dispatch_first_hierarchy(1.30, units({0.50, 0.40}));
        CHECK(d.increments == std::vector<double>{0.50, 0.40});
        CHECK(d.residual_deficit == doctest::Approx(0.40).epsilon(1e-12));
    }
    SUBCASE("zero deficit") {
        const auto d = freq::primary_dispatch_first_hierarchy(0.0, units({0.50, 0.40}));
        CHECK(d.total_increment() == 0.0);
        CHECK(d.residual_deficit == 0.0);
    }
    SUBCASE("no units") {
        const auto d = freq::primary_dispatch_first_hierarchy(0.3, {});
        CHECK(d.ibrs.empty());
        CHECK(d.residual_deficit == 0.3);
    }
    SUBCASE("negative request") {
        CHECK_THROWS_AS(freq::primary_dispatch_first_hierarchy(-0.1, units({0.5})), ConfigError);
    }
}

TEST_CASE("primary dispatch, higher hierarchy") {
    SUBCASE("area shares follow headroom sums") {
        const auto d = freq::primary_dispatch_higher_hierarchy(0.40, 1, {units({0.4, 0.2}), {{2, 0.1, 0.2}}});
        REQUIRE(d.area_shares.size() == 2);
        CHECK(d.area_shares[0] == doctest::Approx(0.30).epsilon(1e-12));
        CHECK(d.area_shares[1] == doctest::Approx(0.10).epsilon(1e-12));
        CHECK(d.increments[0] == doctest::Approx(0.20).epsilon(1e-12));
        CHECK(d.increments[1] == doctest::Approx(0.10).epsilon(1e-12));
        CHECK(d.residual_deficit == 0.0);
    }
    SUBCASE("deficient level saturates and reports the rest") {
        const auto d = freq::primary_dispatch_higher_hierarchy(1.0, 1, {units({0.3, 0.2}), {{2, 0.1, 0.3}}});
        CHECK(d.total_increment() == doctest::Approx(0.8).epsilon(1e-12));
        CHECK(d.residual_deficit == doctest::Approx(0.2).epsilon(1e-12));
    }
}

TEST_CASE("primary dispatch conservation") {
    std::mt19937 rng(11);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> h(1 + trial % 5);
        for (auto& x : h) x = u(rng);
        const double total = std::accumulate(h.begin(), h.end(), 0.0);
        const double dp = 2.0 * total * u(rng);
        const auto d = freq::primary_dispatch_first_hierarchy(dp, units(h));
        CHECK(std::abs(d.total_increment() - std::min(dp, total)) <= 1e-12);
        CHECK(std::abs(d.total_increment() + d.residual_deficit - dp) <= 1e-12);
        const auto oracle = oracle::proportional_split(dp, h);
        for (std::size_t k = 0; k < h.size(); ++k) {
            CHECK(std::abs(d.increments[k] - oracle[k]) <= 1e-12);
            CHECK(d.increments[k] <= h[k] + 1e-15);
        }

        std::vector<std::vector<freq::IbrHeadroom>> areas{units(h), units({u(rng), u(rng)})};
        const double all = total + areas[1][0].headroom + areas[1][1].headroom;
        const auto hd = freq::primary_dispatch_higher_hierarchy(dp, 1, areas);
        CHECK(std::abs(hd.total_increment() - std::min(dp, all)) <= 1e-12);
    }
}

namespace {

/// Three-bus single area: SG, IBR, load.
grid::Network three_bus(double load_p) {
    NetBuilder b;
    auto g = b.bus(BusKind::SG);
    auto i = b.bus(BusKind::IBR);
    auto l = b.bus(BusKind::Load);
    b.sg(g, 0.4, 1.02);
    b.ibr(i, 0.2, 0.05);
    b.load(l, load_p, 0.2);
    b.branch(g, l, {0.02, 0.2});
    b.branch(i, l, {0.01, 0.1});
    b.branch(g, i, {0.03, 0.25});
    auto net = b.build();
    const auto x = powerflow::solve_regular_power_flow(net, g);
    powerflow::apply_solution(net, x);
    return net;
}

}  // namespace

TEST_CASE("stage sequencing") {
    auto net = reference::build_reference_case();
    const auto xs = powerflow::solve_regular_power_flow(net, 0, {.flat_start = false});
    const auto part = grid::assign_hierarchies(net, 1);
    freq::StageInputs in;
    in.net = &net;
    in.partition = &part;
    in.x_star = &xs;
    in.level = 1;
    CHECK_THROWS_AS(freq::build_stage_spec(in), SequencingError);
    in.level = 7;
    CHECK_THROWS_AS(freq::build_stage_spec(in), ConfigError);
}

TEST_CASE("stage spec of the contingent level") {
    auto net = reference::build_reference_case();
    const auto xs = powerflow::solve_regular_power_flow(net, 0, {.flat_start = false});
    const auto part = grid::assign_hierarchies(net, 1);
    freq::StageInputs in;
    in.net = &net;
    in.partition = &part;
    in.x_star = &xs;
    const auto built = freq::build_stage_spec(in);
    CHECK(built.spec.balance_scope.size() == 11);
    REQUIRE(built.boundary_up.size() == 2);
    for (auto k : built.boundary_up) {
        CHECK(built.spec.mask.is_fixed(k, powerflow::Quantity::Vm));
        CHECK(built.spec.mask.is_fixed(k, powerflow::Quantity::Va));
        CHECK(built.spec.mask.is_free(k, powerflow::Quantity::P));
        CHECK(built.spec.mask.is_free(k, powerflow::Quantity::Q));
    }

    SUBCASE("single area has no tie term") {
        const auto small = three_bus(0.5);
        const auto x = powerflow::solve_regular_power_flow(small, 0, {.flat_start = false});
        const auto p = grid::assign_hierarchies(small, 0);
        freq::StageInputs s;
        s.net = &small;
        s.partition = &p;
        s.x_star = &x;
        const auto b = freq::build_stage_spec(s);
        REQUIRE(b.spec.objective.size() == 1);
        CHECK(b.spec.objective[0].label == "I1");
    }
}

TEST_CASE("single-area stage matches grid search") {
    for (double step : {0.1, 0.25, 0.4}) {
        const auto pre = three_bus(0.5);
        const auto xs = powerflow::solve_regular_power_flow(pre, 0, {.flat_start = false});
        auto post = pre;
        post.loads[0].p += step;
        const auto part = grid::assign_hierarchies(post, 0);
        freq::ImbalanceReport rep;
        rep.magnitude = step;
        const auto out = freq::run_appf(post, part, xs, rep);
        REQUIRE_FALSE(out.failure);
        REQUIRE(out.stages.size() == 1);
        const auto& st = out.stages[0];
        REQUIRE(st.ibr_setpoints.size() == 1);

        // The stage leaves no freedom once SG P and both held voltages are
        // fixed; search the inverter output that meets them.
        const auto y = grid::build_admittance(post);
        const double p_sg = pre.sgs[0].p_set;
        const double v_ibr = xs.v_mag[1];
        const oracle::C v_slack = std::polar(xs.v_mag[0], 0.0);
        auto cost = [&](double p, double q) {
            const auto v = oracle::pq_power_flow(y, v_slack, {0.0, {p, q}, {-post.loads[0].p, -post.loads[0].q}});
            if (!v) return 1e9;
            const double dp = oracle::slack_injection(y, *v).real() - p_sg;
            const double dv = std::abs((*v)[1]) - v_ibr;
            return dp * dp + dv * dv;
        };
        const auto best = oracle::grid_search(cost, 0.0, 0.75, -0.5, 0.5, 1e-4);
        CHECK(best.value < 1e-6);
        CHECK(std::abs(st.ibr_setpoints[0].p - best.a) <= 1e-3);
        CHECK(std::abs(st.ibr_setpoints[0].q - best.b) <= 1e-3);
        CHECK(testing::max_abs_mismatch(y, st.solution) <= 1e-6);
    }
}


TEST_CASE("prioritization over randomized two-area cases") {
    std::mt19937 rng(2024);
    int two_stage = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const auto c = cases::random_two_area(rng);
        const auto part = grid::assign_hierarchies(c.post, 0);
        freq::ImbalanceReport rep;
        rep.magnitude = c.delta_p;
        const auto out = freq::run_appf(c.post, part, c.xs, rep);
        CAPTURE(trial);
        REQUIRE_FALSE(out.failure);
        REQUIRE(!out.primary.empty());

        const double h0 = grid::compute_headroom(c.post.ibrs[0], grid::HeadroomMode::Active);
        CHECK(std::abs(out.primary[0].total_increment() - std::min(c.delta_p, h0)) <= 1e-12);
        CHECK(std::abs(out.primary[0].residual_deficit - std::max(0.0, c.delta_p - h0)) <= 1e-12);

        // Level-1 inverters move only when level 0 ran short.
        const bool short_of_power = out.primary[0].residual_deficit > 0.0;
        CHECK(out.stages.size() == (short_of_power ? 2u : 1u));
        if (short_of_power) {
            ++two_stage;
            REQUIRE(out.primary.size() == 2);
            CHECK(out.primary[1].residual_deficit < out.primary[0].residual_deficit);
            CHECK(out.primary[1].residual_deficit == 0.0);
        } else {
            for (const auto& set : out.stages[0].ibr_setpoints) CHECK(set.ibr == 0);
        }

        for (const auto& st : out.stages) {
            const auto y = grid::build_admittance(c.post, st.buses);
            CHECK(testing::max_abs_mismatch(y, st.solution) <= 1e-6);
            for (std::size_t k = 0; k < st.buses.size(); ++k) {
                for (auto g : c.post.sgs_at(st.buses[k]))
                    CHECK(st.solution.p[static_cast<Eigen::Index>(k)] == c.post.sgs[g].p_set - c.post.load_p(st.buses[k]));
            }
            for (const auto& set : st.ibr_setpoints) {
                const auto& unit = c.post.ibrs[set.ibr];
                CHECK(set.p >= unit.p_min - 1e-9);
                CHECK(set.p <= std::min(unit.p_max, unit.s_max) + 1e-9);
                CHECK(std::hypot(set.p, set.q) <= unit.s_max + 1e-9);
            }
        }

        // Final setpoints through a plain power flow.
        auto fin = c.post;
        for (const auto& st : out.stages)
            for (const auto& set : st.ibr_setpoints) {
                fin.ibrs[set.ibr].p_set = set.p;
                fin.ibrs[set.ibr].q_set = set.q;
            }
        const auto x = powerflow::solve_regular_power_flow(fin, 0, {.newton = {1e-10, 50}});
        CHECK(testing::max_abs_mismatch(grid::build_admittance(fin), x) <= 1e-6);
        const auto& tie = fin.branches[4];
        const double flow_in = -powerflow::line_flow(tie, x).p_from;
        const double p_star = -powerflow::line_flow(tie, c.xs).p_from;
        CHECK(flow_in <= std::min(p_star + c.delta_p, tie.thermal_rating_p) + 1e-6);
    }
    CHECK(two_stage > 5);
}

TEST_CASE("reference case: load steps at bus 16") {
    const auto net = reference::build_reference_case();
    const auto xs = powerflow::solve_regular_power_flow(net, 0, {.flat_start = false});
    const auto bus16 = net.bus_index(16);
    auto event = [&](double dp) {
        auto post = net;
        for (auto& l : post.loads)
            if (l.bus == bus16) l.p += dp;
        return post;
    };

    SUBCASE("63 MW stays inside the contingent area") {
        const auto post = event(0.63);
        const auto part = grid::assign_hierarchies(post, 1);
        freq::ImbalanceReport rep;
        rep.contingent_area = 1;
        rep.magnitude = 0.63;
        const auto out = freq::run_appf(post, part, xs, rep);
        REQUIRE_FALSE(out.failure);
        REQUIRE(out.stages.size() == 1);
        double total = 0.0;
        for (const auto& s : out.stages[0].ibr_setpoints) total += s.p - net.ibrs[s.ibr].p_set;
        CHECK(std::abs(total - 0.63) <= 0.02 * 0.63 + 1e-4);
        const auto& st = out.stages[0];
        for (std::size_t k = 0; k < st.buses.size(); ++k)
            if (!net.sgs_at(st.buses[k]).empty()) CHECK(st.solution.p[static_cast<Eigen::Index>(k)] == xs.p[static_cast<Eigen::Index>(st.buses[k])]);
    }
    SUBCASE("130 MW reaches the second hierarchy") {
        const auto post = event(1.30);
        const auto part = grid::assign_hierarchies(post, 1);
        freq::ImbalanceReport rep;
        rep.contingent_area = 1;
        rep.magnitude = 1.30;
        const auto out = freq::run_appf(post, part, xs, rep);
        REQUIRE_FALSE(out.failure);
        REQUIRE(out.stages.size() == 2);
        const auto& p0 = out.primary[0];
        double h = 0.0;
        for (auto u : net.ibrs_in_area(1)) h += grid::compute_headroom(net.ibrs[u], grid::HeadroomMode::Active);
        CHECK(std::abs(p0.residual_deficit - (1.30 - h)) <= 1e-12);
        for (std::size_t k = 0; k < p0.ibrs.size(); ++k)
            CHECK(p0.setpoints[k] == std::min(net.ibrs[p0.ibrs[k]].p_max, net.ibrs[p0.ibrs[k]].s_max));
        CHECK(out.stages[1].ibr_setpoints.size() == 4);
        for (const auto& s : out.stages[1].ibr_setpoints) {
            CHECK(s.p > net.ibrs[s.ibr].p_set);
            CHECK(s.p <= net.ibrs[s.ibr].p_max + 1e-9);
        }
    }
}
