#include <doctest.h>

#include <cmath>
#include <random>

#include <Eigen/Eigenvalues>

#include "pitpo/bench.hpp"
#include "pitpo/constraints.hpp"
#include "pitpo/reward.hpp"

using namespace pitpo;
using namespace pitpo::constraints;
using turb::Tensor;

namespace {

Dataset box(double lo, double hi, std::size_t n = 21)
{
    Dataset d;
    d.variables = {"x"};
    d.X.resize(static_cast<Eigen::Index>(n), 1);
    d.y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        d.X(static_cast<Eigen::Index>(i), 0) = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    }
    return d;
}

double diff_of(const char* text, std::vector<double> c, const Dataset& d)
{
    return diff_penalty(expr::parse(text, d.variables), c, d);
}

Tensor random_symmetric(std::mt19937& rng)
{
    std::normal_distribution<double> nd;
    Tensor a;
    for (int i = 0; i < 9; ++i) {
        a.data()[i] = nd(rng);
    }
    return 0.5 * (a + a.transpose());
}

}  // namespace

TEST_CASE("differentiability probe")
{
    const auto d = box(-1, 1);
    CHECK(diff_of("c0*x^3 + c1*x", {1.0, -2.0}, d) == 0.0);
    CHECK(diff_of("c0/x", {1.0}, d) > 0.0);
    CHECK(diff_of("c0*abs(x)", {1.0}, d) == 0.0);
    CHECK(diff_of("c0*sqrt(x)", {1.0}, box(1, 4)) == 0.0);
    const double frac = diff_of("c0*sqrt(x)", {1.0}, d);
    CHECK(frac > 0.3);
    CHECK(frac <= 1.0);

    Dataset two;
    two.variables = {"x", "y"};
    two.X.resize(3, 2);
    two.X << 0, 0, 1, 2, 2, 1;
    two.y = Eigen::VectorXd::Zero(3);
    CHECK(diff_of("c0*x*y + sin(y)", {1.0}, two) == 0.0);
    CHECK(diff_of("c0*y/(x - 1)", {1.0}, two) > 0.0);
}

TEST_CASE("gating")
{
    RawPenalties raw;
    raw.p_dim = 1.0;
    raw.p_diff = 0.4;
    raw.domain = {{"realizability", 2.0}};
    auto r = gated_physical_penalty(1.0, raw, 1.0);
    CHECK_FALSE(r.gated_active);
    CHECK(r.total == 0.0);
    r = gated_physical_penalty(2.0, raw, 1.0);
    CHECK(r.total == 0.0);
    r = gated_physical_penalty(0.5, raw, 1.0);
    CHECK(r.gated_active);
    CHECK(r.total == doctest::Approx(1.0 + 0.2 + 1.0));

    RawPenalties dim_only;
    dim_only.p_dim = 1.0;
    CHECK(gated_physical_penalty(0.0, dim_only, 1.0).total == 1.0);
    RawPenalties diff_only;
    diff_only.p_diff = 0.4;
    CHECK(gated_physical_penalty(0.0, diff_only, 1.0).total == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("dimension penalty")
{
    Dataset d = box(1, 2, 5);
    d.units = units::UnitMap{{"x", units::UnitVector::parse("m")}};
    d.target_unit = units::UnitVector::parse("m");
    CHECK(dim_penalty(expr::parse("c0*x", d.variables), d) == 0.0);
    CHECK(dim_penalty(expr::parse("c0*x + x^2", d.variables), d) > 0.0);
    d.units.reset();
    CHECK(dim_penalty(expr::parse("c0*x + x^2", d.variables), d) == 0.0);
}

TEST_CASE("elite schedule")
{
    double best = std::numeric_limits<double>::infinity();
    const std::vector<double> first = {std::numeric_limits<double>::infinity(), 3.0};
    CHECK(elite_schedule(first, best) == std::vector<Stage>{Stage::A, Stage::B});
    CHECK(best == 3.0);
    const std::vector<double> tie = {3.0};
    CHECK(elite_schedule(tie, best) == std::vector<Stage>{Stage::A});
    const std::vector<double> batch = {4.0, 2.0, 5.0, 3.5};
    const auto st = elite_schedule(batch, best);
    CHECK(std::count(st.begin(), st.end(), Stage::B) == 1);
    CHECK(st[1] == Stage::B);
    CHECK(best == 2.0);
}

TEST_CASE("turbulence realizability")
{
    CHECK(turb::realizability({Tensor::Identity(), Tensor::Identity()}) == 0.0);
    Tensor t = Tensor::Identity();
    t(0, 0) = -1.0;
    CHECK(turb::realizability({t}) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(turb::realizability({Tensor::Zero()}) == 0.0);
    Tensor asym = Tensor::Identity();
    asym(0, 1) = 1e-3;
    CHECK_THROWS_AS((void)turb::realizability({asym}), std::invalid_argument);

    std::mt19937 rng(4);
    for (int trial = 0; trial < 300; ++trial) {
        Tensor a = random_symmetric(rng);
        if (trial % 2 == 0) {
            a = a * a.transpose();  // PSD
        }
        Eigen::SelfAdjointEigenSolver<Tensor> es(a);
        const bool psd = es.eigenvalues().minCoeff() >= 0.0;
        CHECK((turb::realizability({a}) == 0.0) == psd);
        CHECK(turb::realizability({a}) >= 0.0);
    }
}

TEST_CASE("turbulence wall decay, slope and energy")
{
    Tensor d3 = Tensor::Zero();
    d3(0, 0) = 3.0;
    CHECK(turb::wall_decay({d3, Tensor::Identity()}, {0.01, 0.5}, 0.1) == doctest::Approx(3.0));
    CHECK(turb::wall_decay({Tensor::Zero()}, {0.01}, 0.1) == 0.0);
    CHECK(turb::wall_decay({d3}, {0.5}, 0.1) == 0.0);

    std::vector<double> yp;
    std::vector<double> cube;
    std::vector<double> square;
    std::vector<double> flat;
    for (int i = 0; i < 20; ++i) {
        const double y = 1.0 + 4.0 * i / 19.0;
        yp.push_back(y);
        cube.push_back(0.01 * y * y * y);
        square.push_back(0.01 * y * y);
        flat.push_back(0.3);
    }
    CHECK(turb::asymptotic_slope(cube, yp, 1, 5) < 1e-10);
    CHECK(turb::asymptotic_slope(square, yp, 1, 5) == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(turb::asymptotic_slope(flat, yp, 1, 5) == doctest::Approx(3.0).epsilon(1e-10));
    auto scaled = cube;
    for (auto& v : scaled) {
        v *= 7.5;
    }
    CHECK(turb::asymptotic_slope(scaled, yp, 1, 5) < 1e-10);
    CHECK(turb::asymptotic_slope({1.0, 2.0}, {2.0, 3.0}, 1, 5) == 0.0);

    const Tensor neg = -Tensor::Identity();
    CHECK(turb::energy_consistency({Tensor::Zero()}, {Tensor::Identity()}, {0.0}) == 0.0);
    CHECK(turb::energy_consistency({neg, neg}, {Tensor::Identity(), Tensor::Identity()}, {3.0, 3.0}) == 0.0);
    CHECK(turb::energy_consistency({neg}, {Tensor::Identity()}, {0.0}) == doctest::Approx(9.0));
}

TEST_CASE("turbulence plugin on the synthetic closure")
{
    const auto field = turb::synthetic(300, 2);
    const TurbulencePlugin plugin(field.samples);
    const auto X = turb::features(field.samples);
    const std::vector<std::string> vars = {"I1", "I2"};
    const auto s = expr::parse(field.program, vars);
    const auto g = expr::evaluate_outputs(s, field.coeffs, X);
    const auto rec = turb::reconstruct(g, field.samples);
    CHECK(rec.selected_mse < 1e-20);
    const auto stage_a = plugin.evaluate(g, false);
    REQUIRE(stage_a.size() == 1);
    CHECK(stage_a[0].first == "realizability");
    const auto full = plugin.evaluate(g, true);
    CHECK(full.size() == 4);
    for (const auto& [name, v] : full) {
        INFO(name);
        CHECK(v >= 0.0);
        if (name == "energy") {
            CHECK(v < 1e-20);
        }
    }
    Eigen::ArrayXXd bad = g;
    bad(0, 0) = std::nan("");
    CHECK(std::isinf(plugin.evaluate(bad, true).front().second));
}

TEST_CASE("reward")
{
    using namespace pitpo::reward;
    CHECK(fit_reward(1.0, 1.0, 0.0) == 0.0);
    CHECK(fit_reward(std::exp(-10.0), 1.0, 1e-50) == doctest::Approx(10.0).epsilon(1e-14));
    CHECK(fit_reward(std::numeric_limits<double>::infinity(), 1.0, 1e-50) == kRewardFloor);
    CHECK(fit_reward(std::nan(""), 1.0, 1e-50) == kRewardFloor);
    CHECK(fit_reward(0.0, 1.0, 1e-50) == doctest::Approx(50.0 * std::log(10.0)));
    CHECK(complexity_penalty(9, 5e-3) == doctest::Approx(0.045));
    CHECK(complexity_penalty(1, 0.0) == 0.0);
    CHECK(complexity_penalty(100, 5e-3) == doctest::Approx(0.5));

    ConstraintReport closed;
    RewardConfig cfg;
    auto r = global_reward(1.0 - cfg.epsilon, 0, closed, cfg);
    CHECK(r.r_global == 0.0);
    r = global_reward(std::exp(-10.0), 9, closed, cfg);
    CHECK(r.r_global == doctest::Approx(9.955));
    CHECK(r.r_global == r.r_fit - r.p_cplx - r.p_phy);

    RawPenalties raw;
    raw.p_dim = 2.0;
    const auto open = gated_physical_penalty(0.1, raw, 1.0);
    const auto shut = gated_physical_penalty(0.1, raw, 0.01);
    const auto ro = global_reward(0.1, 7, open, cfg);
    const auto rs = global_reward(0.1, 7, shut, cfg);
    CHECK(ro.r_global < rs.r_global);
    CHECK(ro.r_fit == rs.r_fit);
    CHECK(ro.p_cplx == rs.p_cplx);
    CHECK(rs.p_phy == 0.0);

    // monotone in mse; equal mse differs only by the length term
    double prev = global_reward(10.0, 5, closed, cfg).r_global;
    for (double m = 5.0; m > 1e-30; m /= 7.0) {
        const double cur = global_reward(m, 5, closed, cfg).r_global;
        CHECK(cur >= prev);
        prev = cur;
    }
    CHECK(global_reward(0.3, 5, closed, cfg).r_global - global_reward(0.3, 8, closed, cfg).r_global
          == doctest::Approx(3 * cfg.lambda_len).epsilon(1e-12));
}
