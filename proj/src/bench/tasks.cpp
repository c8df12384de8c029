#include "pitpo/bench.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <random>

#include <Eigen/QR>
#include <boost/numeric/odeint.hpp>
#include <fmt/core.h>

#include "pitpo/csv.hpp"

namespace pitpo::bench {

namespace odeint = boost::numeric::odeint;

namespace {

using State = std::array<double, 2>;

// Uniform times on [0, 50]; t < 40 is split 90/10 into train / in-domain
// test by a seeded shuffle, t >= 40 is the out-of-domain test set.
std::vector<Split> time_split(const std::vector<double>& times, unsigned seed)
{
    std::vector<Split> split(times.size(), Split::OodTest);
    std::vector<std::size_t> inside;
    for (std::size_t i = 0; i < times.size(); ++i) {
        if (times[i] < 40.0) {
            inside.push_back(i);
        }
    }
    std::mt19937_64 rng(seed);
    std::shuffle(inside.begin(), inside.end(), rng);
    const auto n_id = inside.size() / 10;
    for (std::size_t j = 0; j < inside.size(); ++j) {
        split[inside[j]] = j < n_id ? Split::IdTest : Split::Train;
    }
    return split;
}

std::vector<double> uniform_times(std::size_t n)
{
    std::vector<double> t(n);
    for (std::size_t i = 0; i < n; ++i) {
        t[i] = n == 1 ? 0.0 : 50.0 * static_cast<double>(i) / static_cast<double>(n - 1);
    }
    return t;
}

template <class Rhs>
std::vector<State> integrate(Rhs rhs, const std::vector<double>& times, double rtol, double atol)
{
    State s{0.5, 0.5};
    std::vector<State> out;
    out.reserve(times.size());
    auto stepper = odeint::make_dense_output(atol, rtol, odeint::runge_kutta_dopri5<State>());
    odeint::integrate_times(stepper, rhs, s, times.begin(), times.end(), 1e-3,
                            [&](const State& x, double) { out.push_back(x); });
    return out;
}

double osc1_accel(double x, double v)
{
    return 0.8 * std::sin(1.0 * x) - 0.5 * v * v * v - 0.2 * x * x * x - 0.5 * x * v - x * std::cos(x);
}

double osc2_accel(double t, double x, double v)
{
    return 0.3 * std::sin(1.0 * t) - 0.5 * v * v * v - 1.0 * x * v - 5.0 * x * std::exp(0.5 * x);
}

GrammarSpec oscillator_grammar(std::vector<std::string> vars)
{
    GrammarSpec g;
    g.variables = std::move(vars);
    g.functions = {expr::Func::Sin, expr::Func::Cos, expr::Func::Exp};
    g.exponents = {2, 3};
    g.max_terms = 6;
    g.max_factors = 2;
    g.max_depth = 1;
    return g;
}

}  // namespace

Dataset gen_oscillator1(std::size_t n_points, unsigned seed, double rtol, double atol)
{
    const auto times = uniform_times(n_points);
    const auto traj = integrate(
        [](const State& s, State& ds, double) {
            ds[0] = s[1];
            ds[1] = osc1_accel(s[0], s[1]);
        },
        times, rtol, atol);
    Dataset d;
    d.variables = {"x", "v"};
    d.X.resize(static_cast<Eigen::Index>(n_points), 2);
    d.y.resize(static_cast<Eigen::Index>(n_points));
    for (std::size_t i = 0; i < n_points; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        d.X(r, 0) = traj[i][0];
        d.X(r, 1) = traj[i][1];
        d.y(r) = osc1_accel(traj[i][0], traj[i][1]);
    }
    d.split = time_split(times, seed);
    return d;
}

Dataset gen_oscillator2(std::size_t n_points, unsigned seed, double rtol, double atol)
{
    const auto times = uniform_times(n_points);
    const auto traj = integrate(
        [](const State& s, State& ds, double t) {
            ds[0] = s[1];
            ds[1] = osc2_accel(t, s[0], s[1]);
        },
        times, rtol, atol);
    Dataset d;
    d.variables = {"t", "x", "v"};
    d.X.resize(static_cast<Eigen::Index>(n_points), 3);
    d.y.resize(static_cast<Eigen::Index>(n_points));
    for (std::size_t i = 0; i < n_points; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        d.X(r, 0) = times[i];
        d.X(r, 1) = traj[i][0];
        d.X(r, 2) = traj[i][1];
        d.y(r) = osc2_accel(times[i], traj[i][0], traj[i][1]);
    }
    d.split = time_split(times, seed);
    return d;
}

double ecoli_rate(const EcoliParams& p, double B, double S, double T, double pH)
{
    const double monod = S / (p.K_S + S);
    const double dT = T - p.x_decay;
    const double temp = std::tanh(p.k * (T - p.x0)) / (1.0 + p.c * dT * dT * dT * dT);
    const double acid = std::exp(-std::abs(pH - p.pH_opt));
    const double s = std::sin((pH - p.pH_min) * std::numbers::pi / (p.pH_max - p.pH_min));
    return p.mu_max * B * monod * temp * acid * s * s;
}

Dataset gen_ecoli(std::size_t n_points, unsigned seed, const EcoliParams& p)
{
    // Latin hypercube over B in [0.1, 10], S in [0, 10], T in [20, 45],
    // pH in [pH_min, pH_max].
    const std::array<std::pair<double, double>, 4> ranges{{{0.1, 10.0}, {0.0, 10.0}, {20.0, 45.0}, {p.pH_min, p.pH_max}}};
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Dataset d;
    d.variables = {"B", "S", "T", "pH"};
    const auto n = static_cast<Eigen::Index>(n_points);
    d.X.resize(n, 4);
    d.y.resize(n);
    for (int c = 0; c < 4; ++c) {
        std::vector<std::size_t> perm(n_points);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        for (std::size_t i = 0; i < n_points; ++i) {
            const double u = (static_cast<double>(perm[i]) + unit(rng)) / static_cast<double>(n_points);
            d.X(static_cast<Eigen::Index>(i), c) = ranges[static_cast<std::size_t>(c)].first
                + u * (ranges[static_cast<std::size_t>(c)].second - ranges[static_cast<std::size_t>(c)].first);
        }
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        d.y(i) = ecoli_rate(p, d.X(i, 0), d.X(i, 1), d.X(i, 2), d.X(i, 3));
    }
    // out-of-domain: the hottest tenth of the samples
    std::vector<Eigen::Index> order(n_points);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return d.X(a, 2) < d.X(b, 2); });
    d.split.assign(n_points, Split::Train);
    const auto n_ood = n_points / 10;
    for (std::size_t j = n_points - n_ood; j < n_points; ++j) {
        d.split[static_cast<std::size_t>(order[j])] = Split::OodTest;
    }
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < n_points; ++i) {
        if (d.split[i] == Split::Train) {
            rest.push_back(i);
        }
    }
    std::shuffle(rest.begin(), rest.end(), rng);
    for (std::size_t j = 0; j < rest.size() / 10; ++j) {
        d.split[rest[j]] = Split::IdTest;
    }
    return d;
}

TaskSpec oscillator1_task(std::size_t n_points, unsigned seed)
{
    TaskSpec t;
    t.name = "oscillator1";
    t.source = Source::OdeSimulated;
    t.data = gen_oscillator1(n_points, seed);
    t.ground_truth = GroundTruth{"c0*sin(c1*x) - c2*v^3 - c3*x^3 - c4*x*v - x*cos(x)", {0.8, 1.0, 0.5, 0.2, 0.5}};
    t.acc_tolerance = 1e-3;
    t.grammar = oscillator_grammar(t.data.variables);
    return t;
}

TaskSpec oscillator2_task(std::size_t n_points, unsigned seed)
{
    TaskSpec t;
    t.name = "oscillator2";
    t.source = Source::OdeSimulated;
    t.data = gen_oscillator2(n_points, seed);
    t.ground_truth = GroundTruth{"c0*sin(c1*t) - c2*v^3 - c3*x*v - c4*x*exp(c5*x)", {0.3, 1.0, 0.5, 1.0, 5.0, 0.5}};
    t.acc_tolerance = 1e-3;
    t.grammar = oscillator_grammar(t.data.variables);
    return t;
}

TaskSpec ecoli_task(std::size_t n_points, unsigned seed)
{
    const EcoliParams p;
    TaskSpec t;
    t.name = "ecoli";
    t.source = Source::ClosedForm;
    t.data = gen_ecoli(n_points, seed, p);
    t.ground_truth = GroundTruth{
        "c0*B*S/(c1 + S)*tanh(c2*(T - c3))/(1 + c4*((T - c5)^2)^2)*exp(-abs(pH - c6))*sin(c7*(pH - c8))^2",
        {p.mu_max, p.K_S, p.k, p.x0, p.c, p.x_decay, p.pH_opt, std::numbers::pi / (p.pH_max - p.pH_min), p.pH_min}};
    t.acc_tolerance = 0.1;
    t.grammar.variables = t.data.variables;
    t.grammar.exponents = {2, 3, -1};
    t.grammar.max_terms = 3;
    t.grammar.max_factors = 4;
    return t;
}

Dataset load_csv_task(const std::string& path, const CsvSchema& schema)
{
    const auto table = csv::read(path);
    if (table.rows.empty()) {
        throw std::invalid_argument(fmt::format("'{}' has a header but no data rows", path));
    }
    const auto target = schema.target ? table.index(*schema.target) : table.header.size() - 1;
    const std::optional<std::size_t> split_col =
        table.has(schema.split_column) ? std::optional(table.index(schema.split_column)) : std::nullopt;
    std::vector<std::size_t> inputs;
    Dataset d;
    for (std::size_t c = 0; c < table.header.size(); ++c) {
        if (c != target && (!split_col || c != *split_col)) {
            inputs.push_back(c);
            d.variables.push_back(table.header[c]);
        }
    }
    const auto n = static_cast<Eigen::Index>(table.rows.size());
    d.X.resize(n, static_cast<Eigen::Index>(inputs.size()));
    d.y.resize(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const auto& row = table.rows[static_cast<std::size_t>(r)];
        for (std::size_t c = 0; c < inputs.size(); ++c) {
            d.X(r, static_cast<Eigen::Index>(c)) = row[inputs[c]];
        }
        d.y(r) = row[target];
        if (split_col) {
            const double s = row[*split_col];
            if (s != 0.0 && s != 1.0 && s != 2.0) {
                throw std::invalid_argument(fmt::format("'{}' row {}: split must be 0, 1 or 2", path, r + 2));
            }
            d.split.push_back(static_cast<Split>(static_cast<int>(s)));
        }
    }
    d.validate();
    return d;
}

std::vector<std::string> unary_library(const std::string& v)
{
    return {v,
            v + "^2",
            v + "^3",
            v + "^-1",
            "sqrt(" + v + ")",
            "sin(" + v + ")",
            "cos(" + v + ")",
            "tanh(" + v + ")",
            "exp(" + v + ")",
            "log(" + v + ")",
            v + "*sin(" + v + ")",
            v + "*exp(" + v + ")"};
}

TaskSpec gen_dictionary_task(const DictionaryOptions& opt)
{
    if (opt.support < 1 || opt.support > opt.dict_size || opt.dict_size > 10) {
        throw std::invalid_argument("dictionary task needs 1 <= support <= dict_size <= 10");
    }
    std::mt19937_64 rng(opt.seed);
    auto pool = unary_library("x");
    std::shuffle(pool.begin(), pool.end(), rng);
    TaskSpec t;
    t.name = fmt::format("dictionary:{}:{}:{}", opt.dict_size, opt.support, opt.seed);
    t.source = Source::SyntheticDictionary;
    t.dictionary.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(opt.dict_size));

    std::vector<std::size_t> idx(opt.dict_size);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    t.true_support.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(opt.support));
    std::sort(t.true_support.begin(), t.true_support.end());

    std::uniform_real_distribution<double> mag(opt.A, opt.B);
    std::bernoulli_distribution coin(0.5);
    GroundTruth gt;
    for (std::size_t j = 0; j < t.true_support.size(); ++j) {
        if (j > 0) {
            gt.program += " + ";
        }
        gt.program += fmt::format("c{}*{}", j, t.dictionary[t.true_support[j]]);
        gt.coeffs.push_back(coin(rng) ? mag(rng) : -mag(rng));
    }

    std::uniform_real_distribution<double> xs(opt.lo, opt.hi);
    t.data.variables = {"x"};
    const auto n = static_cast<Eigen::Index>(opt.n_points);
    t.data.X.resize(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        t.data.X(i, 0) = xs(rng);
    }
    t.data.y = expr::evaluate(expr::parse(gt.program, t.data.variables), gt.coeffs, t.data.X).matrix();
    t.ground_truth = gt;
    t.acc_tolerance = 1e-3;

    t.grammar.variables = t.data.variables;
    t.grammar.atoms = t.dictionary;
    t.grammar.shape_parameters = false;
    t.grammar.constant_term = false;
    t.grammar.implicit_unit = false;
    t.grammar.minus = false;
    t.grammar.max_terms = static_cast<int>(std::min<std::size_t>(opt.dict_size, opt.support + 2));
    t.grammar.max_factors = 1;

    if (opt.seed_spurious && opt.support < opt.dict_size) {
        const auto spurious = idx[opt.support];
        auto terms = t.true_support;
        terms.push_back(spurious);
        std::sort(terms.begin(), terms.end());
        std::string program;
        for (std::size_t j = 0; j < terms.size(); ++j) {
            program += fmt::format("{}c{}*{}", j > 0 ? " + " : "", j, t.dictionary[terms[j]]);
        }
        t.seed_programs.push_back(program);
    }
    return t;
}

std::vector<std::size_t> best_subset(const std::vector<std::string>& dictionary, const Dataset& d, double tol)
{
    const auto D = dictionary.size();
    const auto train = d.train();
    Eigen::MatrixXd Phi(train.rows(), static_cast<Eigen::Index>(D));
    for (std::size_t j = 0; j < D; ++j) {
        Phi.col(static_cast<Eigen::Index>(j)) =
            expr::evaluate(expr::parse(dictionary[j], train.variables), {}, train.X).matrix();
    }
    const double var = (train.y.array() - train.y.mean()).square().mean();
    std::vector<std::size_t> best;
    double best_nmse = std::numeric_limits<double>::infinity();
    for (std::size_t size = 1; size <= D && best.empty(); ++size) {
        std::vector<bool> pick(D, false);
        std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(size), true);
        do {
            std::vector<std::size_t> cols;
            for (std::size_t j = 0; j < D; ++j) {
                if (pick[j]) {
                    cols.push_back(j);
                }
            }
            Eigen::MatrixXd A(train.rows(), static_cast<Eigen::Index>(cols.size()));
            for (std::size_t j = 0; j < cols.size(); ++j) {
                A.col(static_cast<Eigen::Index>(j)) = Phi.col(static_cast<Eigen::Index>(cols[j]));
            }
            const Eigen::VectorXd c = A.colPivHouseholderQr().solve(train.y);
            const double nmse = (A * c - train.y).squaredNorm() / static_cast<double>(train.rows()) / var;
            if (nmse <= tol && nmse < best_nmse) {
                best_nmse = nmse;
                best = cols;
            }
        } while (std::prev_permutation(pick.begin(), pick.end()));
    }
    return best;
}

namespace {

TaskSpec turbulence_task(std::string name, turb::Samples samples)
{
    TaskSpec t;
    t.name = std::move(name);
    t.source = Source::TurbulenceCsv;
    t.data.variables = {"I1", "I2"};
    t.data.X = turb::features(samples);
    t.data.y = Eigen::VectorXd::Zero(t.data.X.rows());
    t.turbulence = std::move(samples);
    t.acc_tolerance = 0.1;
    t.grammar.variables = t.data.variables;
    t.grammar.functions = {expr::Func::Exp, expr::Func::Tanh};
    t.grammar.exponents = {2};
    t.grammar.outputs = 3;
    t.grammar.max_terms = 3;
    t.grammar.max_factors = 2;
    t.grammar.max_depth = 1;
    return t;
}

}  // namespace

TaskSpec turbulence_synthetic_task(std::size_t n_points, unsigned seed)
{
    auto field = turb::synthetic(n_points, seed);
    auto t = turbulence_task("turbulence-synthetic", std::move(field.samples));
    t.source = Source::ClosedForm;
    t.ground_truth = GroundTruth{field.program, field.coeffs};
    return t;
}

TaskSpec turbulence_csv_task(const std::string& path) { return turbulence_task(path, turb::load_csv(path)); }

Objective TaskSpec::objective(Split which) const
{
    if (turbulence) {
        return turb::make_objective(*turbulence);
    }
    const auto part = data.subset(which);
    return Objective::scalar(part.X, part.y);
}

Objective TaskSpec::train_objective() const { return objective(Split::Train); }

Metrics metrics(const Eigen::ArrayXd& pred, const Eigen::ArrayXd& y, double tau)
{
    if (pred.size() != y.size() || y.size() == 0) {
        throw std::invalid_argument("metrics: prediction and target sizes differ or are empty");
    }
    const double var = (y - y.mean()).square().mean();
    if (!(var > 0.0)) {
        throw std::invalid_argument("metrics: target variance is zero, NMSE undefined");
    }
    Metrics m;
    m.nmse = (pred - y).square().mean() / var;
    if (!std::isfinite(m.nmse)) {
        m.nmse = std::numeric_limits<double>::infinity();
    }
    std::size_t used = 0;
    std::size_t within = 0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        if (y(i) == 0.0) {
            continue;
        }
        ++used;
        const double rel = std::abs(pred(i) - y(i)) / std::abs(y(i));
        if (rel <= tau) {
            ++within;
        }
    }
    m.acc_avg = used == 0 ? 0.0 : static_cast<double>(within) / static_cast<double>(used);
    m.acc_all = used > 0 && within == used ? 1.0 : 0.0;
    return m;
}

TaskSpec load_task(const std::string& name, std::size_t n_points, unsigned seed)
{
    if (name == "oscillator1") {
        return oscillator1_task(n_points, seed);
    }
    if (name == "oscillator2") {
        return oscillator2_task(n_points, seed);
    }
    if (name == "ecoli") {
        return ecoli_task(n_points, seed);
    }
    if (name == "turbulence-synthetic") {
        return turbulence_synthetic_task(std::min<std::size_t>(n_points, 400), seed);
    }
    if (name.rfind("turbulence:", 0) == 0) {
        return turbulence_csv_task(name.substr(11));
    }
    if (name.rfind("dictionary", 0) == 0) {
        DictionaryOptions opt;
        opt.seed = seed;
        std::vector<std::string> parts;
        std::size_t start = 0;
        while (start <= name.size()) {
            const auto colon = name.find(':', start);
            parts.push_back(name.substr(start, colon == std::string::npos ? std::string::npos : colon - start));
            if (colon == std::string::npos) {
                break;
            }
            start = colon + 1;
        }
        if (parts[0] != "dictionary" && parts[0] != "dictionary-spurious") {
            throw std::invalid_argument(fmt::format("unknown task '{}'", name));
        }
        opt.seed_spurious = parts[0] == "dictionary-spurious";
        try {
            if (parts.size() > 1) {
                opt.dict_size = std::stoul(parts[1]);
            }
            if (parts.size() > 2) {
                opt.support = std::stoul(parts[2]);
            }
            if (parts.size() > 3) {
                opt.seed = static_cast<unsigned>(std::stoul(parts[3]));
            }
        } catch (const std::logic_error&) {
            throw std::invalid_argument(fmt::format("malformed dictionary task '{}'", name));
        }
        return gen_dictionary_task(opt);
    }
    if (std::filesystem::exists(name)) {
        TaskSpec t;
        t.name = std::filesystem::path(name).filename().string();
        t.source = Source::Csv;
        t.data = load_csv_task(name);
        t.grammar.variables = t.data.variables;
        t.acc_tolerance = 0.1;
        if (t.data.variables.size() == 2 && t.data.variables[0] == "eps" && t.data.variables[1] == "T") {
            t.reference_program = "(c0 + c1*exp(c2*log(eps)))*(1 - exp(c3*log((T - c4)/c5)))";
        }
        return t;
    }
    throw std::invalid_argument(fmt::format("unknown task '{}'", name));
}

}  // namespace pitpo::bench
