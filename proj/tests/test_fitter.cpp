#include <doctest.h>

#include <cmath>
#include <random>

#include "pitpo/bench.hpp"
#include "pitpo/fitter.hpp"

using namespace pitpo;

namespace {

Dataset line_data(std::initializer_list<double> xs, double slope)
{
    Dataset d;
    d.variables = {"x"};
    d.X.resize(static_cast<Eigen::Index>(xs.size()), 1);
    d.y.resize(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (const double x : xs) {
        d.X(i, 0) = x;
        d.y(i) = slope * x;
        ++i;
    }
    return d;
}

double nmse_of(const expr::Skeleton& s, const FitResult& r, const Dataset& train)
{
    const auto pred = expr::evaluate(s, r.coeffs, train.X);
    return bench::metrics(pred, train.y.array(), 1e-3).nmse;
}

}  // namespace

TEST_CASE("mse")
{
    Eigen::ArrayXd y(2);
    y << 1, 1;
    CHECK(mse(y, y) == 0.0);
    CHECK(mse(Eigen::ArrayXd::Zero(2), y) == 1.0);
    Eigen::ArrayXd p(2);
    Eigen::ArrayXd q(2);
    p << 1, 2;
    q << 2, 4;
    CHECK(mse(p, q) == doctest::Approx(2.5));
    p(0) = std::nan("");
    CHECK(std::isinf(mse(p, q)));
    CHECK_THROWS_AS((void)mse(Eigen::ArrayXd::Zero(3), q), std::invalid_argument);
}

TEST_CASE("fit: exact linear recovery")
{
    const auto d = line_data({1, 2, 3, 4}, 2.0);
    const auto s = expr::parse("c0*x", d.variables);
    const auto r = fit(s, d);
    CHECK(r.coeffs[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(r.mse < 1e-24);
    CHECK(r.linear_path);
    CHECK(r.converged);
}

TEST_CASE("fit: constant model is the mean")
{
    auto d = line_data({1, 2, 3, 7}, 1.0);
    const auto s = expr::parse("c0", d.variables);
    const auto r = fit(s, d);
    const double mean = d.y.mean();
    const double var = (d.y.array() - mean).square().mean();
    CHECK(r.coeffs[0] == doctest::Approx(mean).epsilon(1e-9));
    CHECK(r.mse == doctest::Approx(var).epsilon(1e-9));
}

TEST_CASE("fit: no coefficients")
{
    const auto d = line_data({1, 2}, 1.0);
    const auto r = fit(expr::parse("x", d.variables), d);
    CHECK(r.mse == 0.0);
    CHECK(r.coeffs.empty());
}

TEST_CASE("fit: non-finite predictions")
{
    const auto d = line_data({-1, 0, 1, 2}, 1.0);
    const auto r = fit(expr::parse("c0/x", d.variables), d);
    CHECK(std::isinf(r.mse));
    CHECK_FALSE(r.converged);
}

TEST_CASE("fit: linear fast path agrees with the iterative path")
{
    std::mt19937 rng(3);
    std::uniform_real_distribution<double> u(0.5, 3.0);
    const char* programs[] = {"c0*x + c1*x^2", "c0*sin(x) + c1*exp(x) + c2", "c0*x^-1 + c1*log(x) + c2*x*sin(x)",
                              "c0*sqrt(x) - c1*x^3"};
    for (const char* text : programs) {
        Dataset d;
        d.variables = {"x"};
        d.X.resize(60, 1);
        d.y.resize(60);
        for (Eigen::Index i = 0; i < 60; ++i) {
            d.X(i, 0) = u(rng);
            d.y(i) = std::cos(3 * d.X(i, 0)) + 0.3 * d.X(i, 0);
        }
        const auto s = expr::parse(text, d.variables);
        const auto fast = fit(s, d);
        FitBudget b;
        b.force_iterative = true;
        const auto slow = fit(s, d, b);
        INFO(text);
        CHECK(fast.linear_path);
        CHECK_FALSE(slow.linear_path);
        CHECK(std::abs(fast.mse - slow.mse) <= 1e-8 * fast.mse);
    }
}

TEST_CASE("fit: deterministic and never worse than zero coefficients")
{
    const auto task = bench::oscillator1_task(400, 2);
    const auto train = task.data.train();
    const auto s = expr::parse("c0*sin(c1*x) + c2*exp(c3*v)", train.variables);
    FitBudget b;
    b.seed = 11;
    const auto r1 = fit(s, train, b);
    const auto r2 = fit(s, train, b);
    CHECK(r1.coeffs == r2.coeffs);
    CHECK(r1.mse == r2.mse);
    const std::vector<double> zeros(s.coeff_count(), 0.0);
    const auto zero_mse = objective_mse(s, zeros, Objective::scalar(train));
    if (r1.converged) {
        CHECK(r1.mse <= zero_mse);
    }
    // invariant: reported mse is recomputable
    const auto pred = expr::evaluate(s, r1.coeffs, train.X);
    CHECK(r1.mse == doctest::Approx(mse(pred, train.y.array())).epsilon(1e-12));
}

TEST_CASE("fit: oscillator ground truths")
{
    for (const auto& task : {bench::oscillator1_task(1000, 0), bench::oscillator2_task(1000, 0)}) {
        const auto train = task.data.train();
        const auto s = expr::parse(task.ground_truth->program, train.variables);
        const auto r = fit(s, train);
        INFO(task.name);
        INFO(r.mse);
        CHECK(nmse_of(s, r, train) < 1e-12);
        // sin(c1*t) is odd, so (c0, c1) is recovered up to a joint sign
        auto c = r.coeffs;
        if (c[1] < 0) {
            c[0] = -c[0];
            c[1] = -c[1];
        }
        for (std::size_t k = 0; k < c.size(); ++k) {
            CHECK(c[k] == doctest::Approx(task.ground_truth->coeffs[k]).epsilon(1e-6));
        }
    }
}
