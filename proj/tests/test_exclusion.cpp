#include <doctest.h>

#include <cmath>
#include <random>

#include "pitpo/bench.hpp"
#include "pitpo/exclusion.hpp"

using namespace pitpo;
using namespace pitpo::exclusion;

namespace {

Eigen::MatrixXd x_x2()
{
    Eigen::MatrixXd phi(2, 2);
    phi << 1, 1, 2, 4;
    return phi;
}

GramAnalysis orthogonal(std::size_t k)
{
    return analyze(Eigen::MatrixXd::Identity(4, static_cast<Eigen::Index>(k)) * 2.0, k);
}

}  // namespace

TEST_CASE("gram matrix")
{
    const auto g = gram_matrix(x_x2());
    CHECK(g(0, 0) == 2.5);
    CHECK(g(0, 1) == 4.5);
    CHECK(g(1, 0) == 4.5);
    CHECK(g(1, 1) == 8.5);
    CHECK(gram_matrix(Eigen::MatrixXd::Ones(5, 1))(0, 0) == 1.0);

    Eigen::MatrixXd q = Eigen::MatrixXd::Identity(3, 3) * std::sqrt(3.0);
    CHECK(gram_matrix(q).isApprox(Eigen::MatrixXd::Identity(3, 3), 1e-15));

    // brute force
    std::mt19937 rng(1);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd phi(37, 5);
    for (Eigen::Index i = 0; i < phi.size(); ++i) {
        phi.data()[i] = nd(rng);
    }
    const auto fast = gram_matrix(phi);
    for (Eigen::Index i = 0; i < 5; ++i) {
        for (Eigen::Index j = 0; j < 5; ++j) {
            double s = 0.0;
            for (Eigen::Index n = 0; n < 37; ++n) {
                s += phi(n, i) * phi(n, j);
            }
            s /= 37.0;
            CHECK(std::abs(fast(i, j) - s) <= 1e-12 * std::max(1.0, std::abs(s)));
        }
    }
    CHECK(fast == fast.transpose());
}

TEST_CASE("analysis invariants and degenerate columns")
{
    Eigen::MatrixXd phi(3, 3);
    phi << 1, 0, 1, 2, 0, std::nan(""), 3, 0, 1;
    const auto a = analyze(phi, 3);
    CHECK_FALSE(a.degenerate[0]);
    CHECK(a.degenerate[1]);
    CHECK(a.degenerate[2]);
    CHECK(a.projection(0, 0) == 1.0);
    const std::vector<double> b = {1.0, 1e-3, 1e-3};
    CHECK(std::isnan(exclusion_bound(1, b, a, {})));
    ExclusionConfig cfg;
    const auto flags = detect_redundant(b, a, cfg, Mode::Theorem);
    CHECK_FALSE(flags[1]);
    CHECK_FALSE(flags[2]);
}

TEST_CASE("exclusion bound examples")
{
    ExclusionConfig cfg;
    cfg.A = 0.5;
    cfg.B = 2.0;
    cfg.M = 2;
    const auto a = analyze(x_x2(), 2);
    const std::vector<double> b = {1.0, 0.01};
    CHECK(a.projection(1, 0) == doctest::Approx(4.5 / 8.5).epsilon(1e-15));
    CHECK(exclusion_bound(1, b, a, cfg) == doctest::Approx(0.5 - 3.0 * 4.5 / 8.5).epsilon(1e-14));

    const auto o = orthogonal(2);
    CHECK(exclusion_bound(0, b, o, cfg) == 0.5);
    const std::vector<double> b2 = {0.9, 0.1};
    CHECK(detect_redundant(b2, o, cfg, Mode::Theorem) == std::vector<bool>{false, true});

    // m clamps to |S \ K|
    Eigen::MatrixXd phi(3, 3);
    phi << 1, 1, 1, 0, 1, 0, 0, 0, 1;
    const auto ext = analyze(phi, 1);
    cfg.M = 10;
    const std::vector<double> one = {1.0};
    CHECK(exclusion_bound(0, one, ext, cfg) == doctest::Approx(0.5 - 2.0 * 2.0).epsilon(1e-14));
    cfg.M = 2;
    CHECK(exclusion_bound(0, one, ext, cfg) == doctest::Approx(0.5 - 2.0).epsilon(1e-14));
}

TEST_CASE("ratio mode")
{
    ExclusionConfig cfg;
    GramAnalysis none;
    const std::vector<double> b = {1.0, 1e-6};
    CHECK(detect_redundant(b, none, cfg, Mode::Ratio) == std::vector<bool>{false, true});
    const std::vector<double> single = {1.0};
    CHECK(detect_redundant(single, none, cfg, Mode::Ratio) == std::vector<bool>{false});
    CHECK(detect_redundant(std::vector<double>{}, none, cfg, Mode::Ratio).empty());
    // implicit unit coefficient never flagged
    const std::vector<double> tiny = {1e3, 1.0};
    CHECK(detect_redundant(tiny, none, cfg, Mode::Ratio, {false, true}) == std::vector<bool>{false, false});

    std::mt19937 rng(5);
    std::uniform_real_distribution<double> u(-2, 2);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> v(5);
        for (auto& x : v) {
            x = u(rng) * std::pow(10.0, 3 * u(rng));
        }
        const double scale = std::pow(10.0, 2 * u(rng));
        auto w = v;
        for (auto& x : w) {
            x *= scale;
        }
        CHECK(detect_redundant(v, none, cfg, Mode::Ratio) == detect_redundant(w, none, cfg, Mode::Ratio));
        const auto tau = coefficient_ratios(v, cfg.epsilon);
        double sum = 0.0;
        for (const double x : tau) {
            CHECK(x >= 0.0);
            CHECK(x <= 1.0);
            sum += x;
        }
        CHECK(sum <= 1.0 + 1e-15);
    }
}

TEST_CASE("token penalty")
{
    ExclusionConfig cfg;
    CHECK(token_penalty(1.0, cfg) == 0.0);
    CHECK(token_penalty(5.0, cfg) == 0.0);
    CHECK(token_penalty(std::exp(-2.0), cfg) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(token_penalty(-std::exp(-4.0), cfg) == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(std::isfinite(token_penalty(0.0, cfg)));
    CHECK(token_penalty(0.0, cfg) > 0.0);
}

TEST_CASE("config validation")
{
    ExclusionConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.B = 0.1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.rho = 1.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.M = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("monotonicity in A and B")
{
    std::mt19937 rng(9);
    std::normal_distribution<double> nd;
    for (int t = 0; t < 100; ++t) {
        Eigen::MatrixXd phi(20, 6);
        for (Eigen::Index i = 0; i < phi.size(); ++i) {
            phi.data()[i] = nd(rng);
        }
        const auto a = analyze(phi, 3);
        const std::vector<double> b = {nd(rng), nd(rng), nd(rng)};
        ExclusionConfig base;
        base.M = 3;
        auto wider = base;
        wider.B = 3.0;
        auto lower = base;
        lower.A = 0.25;
        for (std::size_t i = 0; i < 3; ++i) {
            const double t0 = exclusion_bound(i, b, a, base);
            CHECK(exclusion_bound(i, b, a, wider) <= t0);
            CHECK(exclusion_bound(i, b, a, lower) <= t0);
        }
    }
}

TEST_CASE("theorem soundness on random dictionaries")
{
    const auto rep = soundness_suite(1000, 2024);
    const std::string first = rep.failures.empty() ? std::string() : rep.failures.front();
    INFO(first);
    CHECK(rep.trials == 1000);
    CHECK(rep.violations == 0);
    CHECK(rep.true_indices_checked > 1000);
    // the check is not vacuous: some spurious indices are excluded
    CHECK(rep.spurious_flagged > 0);
}

TEST_CASE("soundness suite catches a broken bound")
{
    const auto rep = soundness_suite(300, 7, Fault::DropInterference);
    CHECK(rep.violations > 0);
}

TEST_CASE("candidate analysis")
{
    bench::DictionaryOptions opt;
    opt.seed = 3;
    opt.seed_spurious = true;
    const auto task = bench::gen_dictionary_task(opt);
    REQUIRE(task.seed_programs.size() == 1);
    const auto obj = task.train_objective();
    const auto s = expr::parse(task.seed_programs[0], task.data.variables);
    const auto bases = expr::decompose_terms(s);
    const auto r = fit(s, obj);
    ExclusionConfig cfg;
    const auto ca = analyze_candidate(s, r.coeffs, obj, cfg);
    REQUIRE(ca.b.size() == 4);
    int flagged = 0;
    for (std::size_t i = 0; i < 4; ++i) {
        flagged += ca.redundant[i] ? 1 : 0;
        CHECK(ca.penalty[i] >= 0.0);
        if (!ca.redundant[i]) {
            CHECK(ca.penalty[i] == 0.0);
        }
    }
    CHECK(flagged == 1);
    for (std::size_t i = 0; i < 4; ++i) {
        bool truth = false;
        for (const auto j : task.true_support) {
            truth = truth || bases[i].text == task.dictionary[j];
        }
        CHECK(ca.redundant[i] == !truth);
        if (!truth) {
            CHECK(ca.penalty[i] > 10.0);
        }
    }

    cfg.mode = Mode::Theorem;
    const auto th = analyze_candidate(s, r.coeffs, obj, cfg);
    REQUIRE(th.gram.has_value());
    CHECK(th.gram->dictionary.size() > 4);
    CHECK(th.gram->projection.diagonal().head(4).isOnes());
}
