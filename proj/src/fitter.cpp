#include "pitpo/fitter.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <Eigen/QR>
#include <fmt/core.h>
#include <unsupported/Eigen/NonLinearOptimization>

namespace pitpo {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
// fraction of rows allowed to be non-finite before a candidate is rejected
constexpr double kMaskTolerance = 1e-3;

}  // namespace

Dataset Dataset::subset(Split which) const
{
    if (split.empty()) {
        return which == Split::Train ? *this : Dataset{Eigen::MatrixXd(0, X.cols()), Eigen::VectorXd(0), variables, units, target_unit, {}};
    }
    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        if (split[static_cast<std::size_t>(i)] == which) {
            idx.push_back(i);
        }
    }
    Dataset out{Eigen::MatrixXd(static_cast<Eigen::Index>(idx.size()), X.cols()),
                Eigen::VectorXd(static_cast<Eigen::Index>(idx.size())), variables, units, target_unit, {}};
    for (std::size_t r = 0; r < idx.size(); ++r) {
        out.X.row(static_cast<Eigen::Index>(r)) = X.row(idx[r]);
        out.y(static_cast<Eigen::Index>(r)) = y(idx[r]);
    }
    return out;
}

void Dataset::validate() const
{
    if (X.rows() < 1) {
        throw std::invalid_argument("dataset has no rows");
    }
    if (X.rows() != y.size()) {
        throw std::invalid_argument(fmt::format("X has {} rows but y has {}", X.rows(), y.size()));
    }
    if (static_cast<std::size_t>(X.cols()) != variables.size()) {
        throw std::invalid_argument("variable names do not match the input columns");
    }
    if (!X.allFinite() || !y.allFinite()) {
        throw std::invalid_argument("dataset contains NaN or infinite values");
    }
    if (!split.empty() && split.size() != static_cast<std::size_t>(X.rows())) {
        throw std::invalid_argument("split mask length does not match the row count");
    }
}

Objective Objective::scalar(const Eigen::MatrixXd& X, const Eigen::VectorXd& y)
{
    Objective o;
    o.X = X;
    o.weights.push_back(Eigen::ArrayXXd::Ones(X.rows(), 1));
    o.targets.push_back(y.array());
    return o;
}

Eigen::ArrayXXd Objective::residuals(const Eigen::ArrayXXd& outputs) const
{
    Eigen::ArrayXXd r(X.rows(), static_cast<Eigen::Index>(weights.size()));
    for (std::size_t b = 0; b < weights.size(); ++b) {
        const auto col = static_cast<Eigen::Index>(b);
        r.col(col) = (weights[b] * outputs).rowwise().sum() - targets[b];
    }
    return r;
}

double Objective::target_variance() const
{
    double sum = 0.0;
    double sq = 0.0;
    double n = 0.0;
    for (const auto& t : targets) {
        sum += t.sum();
        sq += t.square().sum();
        n += static_cast<double>(t.size());
    }
    const double mean = sum / n;
    return std::max(0.0, sq / n - mean * mean);
}

double mse(const Eigen::ArrayXd& pred, const Eigen::ArrayXd& y)
{
    if (pred.size() != y.size()) {
        throw std::invalid_argument(fmt::format("mse: {} predictions for {} targets", pred.size(), y.size()));
    }
    if (pred.size() == 0) {
        throw std::invalid_argument("mse: empty input");
    }
    if (!pred.allFinite() || !y.allFinite()) {
        return kInf;
    }
    return (pred - y).square().mean();
}

namespace {

// Residual vector and Jacobian over the finite rows of the objective.
struct Linearization {
    Eigen::VectorXd r;
    Eigen::MatrixXd J;
    std::size_t masked{0};
    bool rejected{false};
};

bool too_many_masked(std::size_t masked, Eigen::Index rows)
{
    return static_cast<double>(masked) > kMaskTolerance * static_cast<double>(rows);
}

Linearization linearize(const expr::Skeleton& s, std::span<const double> c, const Objective& obj, bool with_jacobian)
{
    const auto n = obj.rows();
    const auto k = static_cast<Eigen::Index>(s.coeff_count());
    const auto blocks = static_cast<Eigen::Index>(obj.weights.size());
    Linearization out;

    expr::Evaluation ev;
    if (with_jacobian) {
        ev = expr::evaluate_with_jacobian(s, c, obj.X);
    } else {
        ev.values = expr::evaluate_outputs(s, c, obj.X);
    }
    const Eigen::ArrayXXd res = obj.residuals(ev.values);

    std::vector<Eigen::Index> good;
    good.reserve(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        bool ok = res.row(i).allFinite();
        for (std::size_t m = 0; ok && with_jacobian && m < ev.jacobian.size(); ++m) {
            ok = ev.jacobian[m].row(i).allFinite();
        }
        if (ok) {
            good.push_back(i);
        }
    }
    out.masked = static_cast<std::size_t>(n) - good.size();
    if (too_many_masked(out.masked, n) || good.empty()) {
        out.rejected = true;
        return out;
    }
    const auto g = static_cast<Eigen::Index>(good.size());
    out.r.resize(g * blocks);
    if (with_jacobian) {
        out.J.setZero(g * blocks, k);
    }
    for (Eigen::Index b = 0; b < blocks; ++b) {
        for (Eigen::Index gi = 0; gi < g; ++gi) {
            const auto row = good[static_cast<std::size_t>(gi)];
            out.r(b * g + gi) = res(row, b);
            if (with_jacobian) {
                for (std::size_t m = 0; m < ev.jacobian.size(); ++m) {
                    out.J.row(b * g + gi) += obj.weights[static_cast<std::size_t>(b)](row, static_cast<Eigen::Index>(m))
                        * ev.jacobian[m].row(row).matrix();
                }
            }
        }
    }
    return out;
}

double value_of(const Linearization& lin)
{
    return lin.rejected ? kInf : lin.r.squaredNorm() / static_cast<double>(lin.r.size());
}

FitResult linear_fit(const expr::Skeleton& s, const Objective& obj, const FitBudget& budget)
{
    FitResult out;
    out.linear_path = true;
    const auto k = static_cast<Eigen::Index>(s.coeff_count());
    out.coeffs.assign(static_cast<std::size_t>(k), 0.0);
    const auto lin = linearize(s, out.coeffs, obj, true);
    if (lin.rejected) {
        out.mse = kInf;
        return out;
    }
    const auto rows = lin.J.rows();
    const double scale = 1.0 / std::sqrt(static_cast<double>(rows));
    // Ridge solve on the augmented system; a few proximal passes remove the
    // ridge bias when the columns are well determined.
    Eigen::MatrixXd aug(rows + k, k);
    aug.topRows(rows) = lin.J * scale;
    aug.bottomRows(k) = std::sqrt(budget.ridge) * Eigen::MatrixXd::Identity(k, k);
    const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(aug);
    Eigen::VectorXd c = Eigen::VectorXd::Zero(k);
    Eigen::VectorXd rhs(rows + k);
    for (int pass = 0; pass < 4; ++pass) {
        rhs.head(rows) = -(lin.J * c + lin.r) * scale;
        rhs.tail(k).setZero();
        const Eigen::VectorXd delta = qr.solve(rhs);
        if (!delta.allFinite()) {
            break;
        }
        c += delta;
        if (delta.norm() <= 1e-15 * (1.0 + c.norm())) {
            break;
        }
    }
    out.coeffs.assign(c.data(), c.data() + k);
    out.mse = objective_mse(s, out.coeffs, obj, &out.masked_rows);
    out.converged = std::isfinite(out.mse);
    out.restarts_used = 1;
    return out;
}

struct LocalResult {
    Eigen::VectorXd c;
    double f{kInf};
    bool converged{false};
};

LocalResult bfgs(const expr::Skeleton& s, const Objective& obj, Eigen::VectorXd c, const FitBudget& budget)
{
    const auto k = c.size();
    auto eval = [&](const Eigen::VectorXd& x, bool grad) {
        return linearize(s, std::span<const double>(x.data(), static_cast<std::size_t>(k)), obj, grad);
    };
    auto lin = eval(c, true);
    double f = value_of(lin);
    LocalResult out{c, f, false};
    if (!std::isfinite(f)) {
        return out;
    }
    auto gradient = [](const Linearization& l) -> Eigen::VectorXd {
        return 2.0 * l.J.transpose() * l.r / static_cast<double>(l.r.size());
    };
    Eigen::VectorXd g = gradient(lin);
    Eigen::MatrixXd H = Eigen::MatrixXd::Identity(k, k);
    bool scaled = false;
    for (int it = 0; it < budget.max_iters; ++it) {
        if (g.lpNorm<Eigen::Infinity>() < budget.grad_tol || f == 0.0) {
            out.converged = true;
            break;
        }
        Eigen::VectorXd p = -H * g;
        double slope = g.dot(p);
        if (!(slope < 0.0)) {
            H.setIdentity();
            p = -g;
            slope = -g.squaredNorm();
        }
        double t = 1.0;
        Eigen::VectorXd next;
        Linearization nlin;
        double fn = kInf;
        bool accepted = false;
        for (int bt = 0; bt < 60; ++bt) {
            next = c + t * p;
            nlin = eval(next, true);
            fn = value_of(nlin);
            if (std::isfinite(fn) && fn <= f + 1e-4 * t * slope) {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) {
            break;
        }
        const Eigen::VectorXd gn = gradient(nlin);
        const Eigen::VectorXd sv = next - c;
        const Eigen::VectorXd yv = gn - g;
        const double sy = sv.dot(yv);
        if (sy > 1e-300) {
            if (!scaled) {
                H *= sy / yv.squaredNorm();
                scaled = true;
            }
            const double rho = 1.0 / sy;
            const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(k, k);
            H = (I - rho * sv * yv.transpose()) * H * (I - rho * yv * sv.transpose()) + rho * sv * sv.transpose();
        }
        const double drop = f - fn;
        c = next;
        f = fn;
        g = gn;
        if (drop <= 1e-16 * f && sv.norm() <= 1e-14 * (1.0 + c.norm())) {
            break;
        }
    }
    out.c = c;
    out.f = f;
    if (g.lpNorm<Eigen::Infinity>() < budget.grad_tol) {
        out.converged = true;
    }
    return out;
}

// Levenberg-Marquardt refinement on a fixed row mask.
struct ResidualFunctor {
    using Scalar = double;
    enum { InputsAtCompileTime = Eigen::Dynamic, ValuesAtCompileTime = Eigen::Dynamic };
    using InputType = Eigen::VectorXd;
    using ValueType = Eigen::VectorXd;
    using JacobianType = Eigen::MatrixXd;

    const expr::Skeleton* s;
    const Objective* obj;
    Eigen::Index n_values;

    [[nodiscard]] int inputs() const { return static_cast<int>(s->coeff_count()); }
    [[nodiscard]] int values() const { return static_cast<int>(n_values); }

    int operator()(const Eigen::VectorXd& x, Eigen::VectorXd& fvec) const
    {
        const auto lin = linearize(*s, std::span<const double>(x.data(), static_cast<std::size_t>(x.size())), *obj, false);
        if (lin.rejected || lin.r.size() != n_values) {
            return -1;
        }
        fvec = lin.r;
        return 0;
    }

    int df(const Eigen::VectorXd& x, Eigen::MatrixXd& fjac) const
    {
        const auto lin = linearize(*s, std::span<const double>(x.data(), static_cast<std::size_t>(x.size())), *obj, true);
        if (lin.rejected || lin.r.size() != n_values) {
            return -1;
        }
        fjac = lin.J;
        return 0;
    }
};

LocalResult polish(const expr::Skeleton& s, const Objective& obj, const LocalResult& start)
{
    const auto lin = linearize(s, std::span<const double>(start.c.data(), static_cast<std::size_t>(start.c.size())), obj, true);
    if (lin.rejected || lin.r.size() < start.c.size()) {
        return start;
    }
    ResidualFunctor functor{&s, &obj, lin.r.size()};
    Eigen::LevenbergMarquardt<ResidualFunctor> lm(functor);
    lm.parameters.maxfev = 400;
    lm.parameters.ftol = 1e-15;
    lm.parameters.xtol = 1e-15;
    Eigen::VectorXd x = start.c;
    const auto status = lm.minimize(x);
    const auto after = linearize(s, std::span<const double>(x.data(), static_cast<std::size_t>(x.size())), obj, false);
    const double f = value_of(after);
    if (!(f < start.f)) {
        return start;
    }
    LocalResult out{x, f, start.converged};
    out.converged = out.converged || status == Eigen::LevenbergMarquardtSpace::RelativeReductionTooSmall
        || status == Eigen::LevenbergMarquardtSpace::RelativeErrorTooSmall
        || status == Eigen::LevenbergMarquardtSpace::RelativeErrorAndReductionTooSmall
        || status == Eigen::LevenbergMarquardtSpace::CosinusTooSmall
        || status == Eigen::LevenbergMarquardtSpace::XtolTooSmall
        || status == Eigen::LevenbergMarquardtSpace::FtolTooSmall;
    return out;
}

Eigen::VectorXd restart_point(int r, Eigen::Index k, std::mt19937_64& rng)
{
    static constexpr double grid[] = {0.0, 1.0, -1.0, 0.1, -0.1};
    if (r < 5) {
        return Eigen::VectorXd::Constant(k, grid[r]);
    }
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd c(k);
    for (Eigen::Index i = 0; i < k; ++i) {
        c(i) = normal(rng);
    }
    return c;
}

}  // namespace

double objective_mse(const expr::Skeleton& s, std::span<const double> coeffs, const Objective& obj, std::size_t* masked)
{
    const auto lin = linearize(s, coeffs, obj, false);
    if (masked != nullptr) {
        *masked = lin.masked;
    }
    return value_of(lin);
}

FitResult fit(const expr::Skeleton& s, const Objective& obj, const FitBudget& budget)
{
    if (obj.outputs() != s.outputs()) {
        throw std::invalid_argument(
            fmt::format("program has {} outputs, objective expects {}", s.outputs(), obj.outputs()));
    }
    const auto k = static_cast<Eigen::Index>(s.coeff_count());
    if (k == 0) {
        FitResult out;
        out.mse = objective_mse(s, {}, obj, &out.masked_rows);
        out.converged = std::isfinite(out.mse);
        return out;
    }
    if (s.linear_in_coefficients() && !budget.force_iterative) {
        return linear_fit(s, obj, budget);
    }

    std::mt19937_64 rng(budget.seed);
    const double floor = 1e-30 * (1.0 + obj.target_variance());
    LocalResult best;
    FitResult out;
    const int guesses = static_cast<int>(budget.initial_guesses.size());
    for (int r = 0; r < guesses + std::max(1, budget.restarts); ++r) {
        Eigen::VectorXd start;
        if (r < guesses) {
            const auto& g = budget.initial_guesses[static_cast<std::size_t>(r)];
            if (static_cast<Eigen::Index>(g.size()) != k) {
                throw std::invalid_argument("initial guess length does not match the coefficient count");
            }
            start = Eigen::Map<const Eigen::VectorXd>(g.data(), k);
        } else {
            start = restart_point(r - guesses, k, rng);
        }
        auto local = bfgs(s, obj, start, budget);
        if (std::isfinite(local.f) && local.f > 0.0) {
            local = polish(s, obj, local);
        }
        ++out.restarts_used;
        if (local.f < best.f || best.c.size() == 0) {
            best = local;
        }
        if (best.f <= floor) {
            break;
        }
    }
    out.coeffs.assign(best.c.data(), best.c.data() + best.c.size());
    out.mse = objective_mse(s, out.coeffs, obj, &out.masked_rows);
    out.converged = best.converged && std::isfinite(out.mse);
    return out;
}

FitResult fit(const expr::Skeleton& s, const Dataset& d, const FitBudget& budget)
{
    const auto train = d.train();
    return fit(s, Objective::scalar(train), budget);
}

}  // namespace pitpo
