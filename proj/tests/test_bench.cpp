#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "pitpo/bench.hpp"
#include "pitpo/turbulence.hpp"

using namespace pitpo;
using namespace pitpo::bench;

TEST_CASE("oscillator 1 initial state")
{
    const auto d = gen_oscillator1(101, 0);
    CHECK(d.X(0, 0) == 0.5);
    CHECK(d.X(0, 1) == 0.5);  // dx/dt = v
    CHECK(d.y(0) == doctest::Approx(-0.2677).epsilon(1e-3));
    const double hand = 0.8 * std::sin(0.5) - 0.5 * 0.125 - 0.2 * 0.125 - 0.5 * 0.25 - 0.5 * std::cos(0.5);
    CHECK(d.y(0) == doctest::Approx(hand).epsilon(1e-15));
}

TEST_CASE("oscillator 2 initial state")
{
    const auto d = gen_oscillator2(101, 0);
    CHECK(d.X(0, 2) == 0.5);
    CHECK(d.y(0) == doctest::Approx(-3.5226).epsilon(1e-4));
}

TEST_CASE("oscillator splits")
{
    const auto d = gen_oscillator1(1001, 4);
    std::size_t train = 0;
    std::size_t id = 0;
    std::size_t ood = 0;
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
        const double t = 50.0 * static_cast<double>(i) / 1000.0;
        const auto s = d.split[static_cast<std::size_t>(i)];
        CHECK((t >= 40.0) == (s == Split::OodTest));
        train += s == Split::Train;
        id += s == Split::IdTest;
        ood += s == Split::OodTest;
    }
    CHECK(id == 80);
    CHECK(train == 720);
    CHECK(ood == 201);
}

TEST_CASE("ODE targets converge under tighter tolerances")
{
    const auto a = gen_oscillator1(300, 0, 1e-9, 1e-11);
    const auto b = gen_oscillator1(300, 0, 5e-10, 5e-12);
    const double rel = (a.y - b.y).cwiseAbs().maxCoeff() / a.y.cwiseAbs().maxCoeff();
    CHECK(rel < 1e-8);
    const auto c = gen_oscillator2(300, 0, 1e-9, 1e-11);
    const auto e = gen_oscillator2(300, 0, 5e-10, 5e-12);
    CHECK((c.y - e.y).cwiseAbs().maxCoeff() / c.y.cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("E. coli closed form")
{
    const EcoliParams p;
    CHECK(ecoli_rate(p, 2.0, 0.0, 35.0, 6.0) == 0.0);
    CHECK(ecoli_rate(p, 2.0, 3.0, 35.0, p.pH_min) == doctest::Approx(0.0).scale(1.0));
    // acidity factors at the optimum multiply to one
    const double base = p.mu_max * 2.0 * (3.0 / (p.K_S + 3.0)) * std::tanh(p.k * (35.0 - p.x0))
        / (1.0 + p.c * std::pow(35.0 - p.x_decay, 4));
    CHECK(ecoli_rate(p, 2.0, 3.0, 35.0, p.pH_opt) == doctest::Approx(base).epsilon(1e-14));
    const auto d = gen_ecoli(200, 1, p);
    d.validate();
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
        CHECK(d.X(i, 3) >= p.pH_min);
        CHECK(d.X(i, 3) <= p.pH_max);
    }
}

TEST_CASE("ground-truth round trips")
{
    for (const auto& task : {ecoli_task(400, 0), gen_dictionary_task({}), turbulence_synthetic_task(200, 1)}) {
        const auto& gt = *task.ground_truth;
        const auto s = expr::parse(gt.program, task.data.variables);
        const auto obj = task.train_objective();
        const double m = objective_mse(s, gt.coeffs, obj);
        INFO(task.name);
        CHECK(m / obj.target_variance() < 1e-24);
        // cold start from the default restarts; the nine-parameter E. coli
        // form only converges from a nearby start
        FitBudget budget;
        if (task.name == "ecoli") {
            auto guess = gt.coeffs;
            for (auto& c : guess) {
                c *= 1.01;
            }
            budget.initial_guesses.push_back(guess);
        }
        const auto r = fit(s, obj, budget);
        CHECK(r.mse / obj.target_variance() <= 1e-12);
    }
}

TEST_CASE("metrics")
{
    Eigen::ArrayXd y(3);
    y << 1, 2, 4;
    auto m = metrics(y, y, 0.1);
    CHECK(m.nmse == 0.0);
    CHECK(m.acc_all == 1.0);
    CHECK(m.acc_avg == 1.0);

    m = metrics(Eigen::ArrayXd::Constant(3, y.mean()), y, 0.1);
    CHECK(m.nmse == 1.0);

    Eigen::ArrayXd p(3);
    p << 1.05, 2, 5;
    m = metrics(p, y, 0.1);
    CHECK(m.acc_avg == doctest::Approx(2.0 / 3.0));
    CHECK(m.acc_all == 0.0);
    CHECK(m.acc_avg >= m.acc_all);

    CHECK_THROWS_AS((void)metrics(y, Eigen::ArrayXd::Ones(3), 0.1), std::invalid_argument);
}

TEST_CASE("dictionary task")
{
    DictionaryOptions opt;
    opt.dict_size = 1;
    opt.support = 1;
    const auto one = gen_dictionary_task(opt);
    CHECK(one.ground_truth->program.rfind("c0*", 0) == 0);
    CHECK(one.true_support == std::vector<std::size_t>{0});

    for (unsigned seed = 0; seed < 5; ++seed) {
        DictionaryOptions o;
        o.seed = seed;
        o.dict_size = 8;
        const auto t = gen_dictionary_task(o);
        CHECK(best_subset(t.dictionary, t.data) == t.true_support);
        for (const double c : t.ground_truth->coeffs) {
            CHECK(std::abs(c) >= o.A);
            CHECK(std::abs(c) <= o.B);
        }
    }
    opt.dict_size = 11;
    CHECK_THROWS((void)gen_dictionary_task(opt));
}

TEST_CASE("csv loaders")
{
    const auto dir = std::filesystem::temp_directory_path() / "pitpo_bench_test";
    std::filesystem::create_directories(dir);
    const auto path = (dir / "data.csv").string();
    {
        std::ofstream out(path);
        out << "eps,T,sigma\n0.01,20,100\n0.02,20,120\n0.03,100,90\n";
    }
    const auto d = load_csv_task(path);
    CHECK(d.variables == std::vector<std::string>{"eps", "T"});
    CHECK(d.y(2) == 90.0);
    const auto task = load_task(path, 0, 0);
    CHECK(task.reference_program.has_value());
    {
        std::ofstream out(path);
        out << "eps,T,sigma\n";
    }
    CHECK_THROWS_AS((void)load_csv_task(path), std::invalid_argument);
    {
        std::ofstream out(path);
        out << "eps,T,sigma\n0.01,abc,3\n";
    }
    CHECK_THROWS_AS((void)load_csv_task(path), std::invalid_argument);
    CHECK_THROWS_AS((void)turb::load_csv(path), std::invalid_argument);
    std::filesystem::remove_all(dir);
}

TEST_CASE("turbulence csv round trip")
{
    const auto dir = std::filesystem::temp_directory_path() / "pitpo_turb_test";
    std::filesystem::create_directories(dir);
    const auto path = (dir / "turb.csv").string();
    {
        std::ofstream out(path);
        out << "I1,I2";
        for (const char* p : {"T1", "T2", "T3", "b"}) {
            for (int i = 0; i < 3; ++i) {
                for (int j = 0; j < 3; ++j) {
                    out << "," << p << "_" << i << j;
                }
            }
        }
        out << ",k,y\n";
        out << "0,2";
        for (int t = 0; t < 4; ++t) {
            for (int i = 0; i < 3; ++i) {
                for (int j = 0; j < 3; ++j) {
                    out << "," << (i == j ? 1.0 : 0.0);
                }
            }
        }
        out << ",1,0.1\n";
    }
    const auto s = turb::load_csv(path);
    REQUIRE(s.size() == 1);
    CHECK(s[0].I1 == 0.0);
    CHECK(s[0].I2 == doctest::Approx(0.76159).epsilon(1e-5));
    CHECK_FALSE(s[0].y_plus.has_value());
    std::filesystem::remove_all(dir);
}
