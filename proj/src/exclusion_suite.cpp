#include <algorithm>
#include <cmath>
#include <random>

#include <Eigen/QR>
#include <fmt/core.h>

#include "pitpo/exclusion.hpp"

namespace pitpo::exclusion {

Eigen::MatrixXd basis_matrix(const std::vector<std::string>& bases, const std::vector<std::string>& variables,
                             const Eigen::MatrixXd& X)
{
    Eigen::MatrixXd phi(X.rows(), static_cast<Eigen::Index>(bases.size()));
    for (std::size_t j = 0; j < bases.size(); ++j) {
        const auto s = expr::parse(bases[j], variables);
        phi.col(static_cast<Eigen::Index>(j)) = expr::evaluate(s, {}, X).matrix();
    }
    return phi;
}

namespace {

std::vector<std::string> trial_pool(std::size_t nvars)
{
    static const char* unary[] = {"{}", "{}^2", "{}^3", "sin({})", "cos({})", "sin(2*{})", "cos(3*{})", "{}*sin({})"};
    const std::vector<std::string> names = {"x", "y"};
    std::vector<std::string> pool = {"1"};
    for (std::size_t v = 0; v < nvars; ++v) {
        for (const char* u : unary) {
            pool.push_back(fmt::format(fmt::runtime(u), names[v], names[v]));
        }
    }
    if (nvars == 2) {
        pool.emplace_back("x*y");
        pool.emplace_back("x*cos(y)");
    }
    return pool;
}

}  // namespace

SoundnessReport soundness_suite(int trials, std::uint64_t seed, Fault fault)
{
    SoundnessReport rep;
    std::mt19937_64 rng(seed);
    auto uniform_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    for (int trial = 0; trial < trials; ++trial) {
        const auto nvars = static_cast<std::size_t>(uniform_int(1, 2));
        std::vector<std::string> vars(nvars);
        for (std::size_t v = 0; v < nvars; ++v) {
            vars[v] = v == 0 ? "x" : "y";
        }
        auto pool = trial_pool(nvars);
        std::shuffle(pool.begin(), pool.end(), rng);
        const auto S = static_cast<std::size_t>(uniform_int(2, 8));
        pool.resize(S);

        const int n = uniform_int(50, 200);
        const double lo = -2.0 + 2.5 * unit(rng);
        const double hi = lo + 0.5 + 3.0 * unit(rng);
        Eigen::MatrixXd X(n, static_cast<Eigen::Index>(nvars));
        for (Eigen::Index r = 0; r < X.rows(); ++r) {
            for (Eigen::Index c = 0; c < X.cols(); ++c) {
                X(r, c) = lo + (hi - lo) * unit(rng);
            }
        }
        const Eigen::MatrixXd phi = basis_matrix(pool, vars, X);

        ExclusionConfig cfg;
        cfg.A = 0.1 + unit(rng);
        cfg.B = cfg.A * (1.0 + 4.0 * unit(rng));
        cfg.fault = fault;

        // true support S' and fitted support K, overlapping
        std::vector<std::size_t> idx(S);
        for (std::size_t j = 0; j < S; ++j) {
            idx[j] = j;
        }
        std::shuffle(idx.begin(), idx.end(), rng);
        const auto true_size = static_cast<std::size_t>(uniform_int(1, static_cast<int>(std::min<std::size_t>(S, 4))));
        std::vector<bool> in_truth(S, false);
        for (std::size_t k = 0; k < true_size; ++k) {
            in_truth[idx[k]] = true;
        }
        cfg.M = static_cast<int>(true_size) + uniform_int(0, 2);
        std::vector<bool> in_k(S, false);
        in_k[idx[static_cast<std::size_t>(uniform_int(0, static_cast<int>(true_size) - 1))]] = true;
        for (std::size_t j = 0; j < S; ++j) {
            if (unit(rng) < 0.5) {
                in_k[j] = true;
            }
        }

        Eigen::VectorXd a = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(S));
        for (std::size_t j = 0; j < S; ++j) {
            if (in_truth[j]) {
                const double mag = cfg.A + (cfg.B - cfg.A) * unit(rng);
                a(static_cast<Eigen::Index>(j)) = unit(rng) < 0.5 ? -mag : mag;
            }
        }
        const Eigen::VectorXd y = phi * a;

        // reorder columns as K first, then S \ K
        std::vector<std::size_t> order;
        for (std::size_t j = 0; j < S; ++j) {
            if (in_k[j]) {
                order.push_back(j);
            }
        }
        const std::size_t ksize = order.size();
        for (std::size_t j = 0; j < S; ++j) {
            if (!in_k[j]) {
                order.push_back(j);
            }
        }
        Eigen::MatrixXd ordered(n, static_cast<Eigen::Index>(S));
        for (std::size_t j = 0; j < S; ++j) {
            ordered.col(static_cast<Eigen::Index>(j)) = phi.col(static_cast<Eigen::Index>(order[j]));
        }
        const Eigen::MatrixXd phik = ordered.leftCols(static_cast<Eigen::Index>(ksize));
        const Eigen::VectorXd bk = phik.completeOrthogonalDecomposition().solve(y);
        std::vector<double> b(bk.data(), bk.data() + bk.size());

        const auto analysis = analyze(ordered, ksize);
        const auto flags = detect_redundant(b, analysis, cfg, Mode::Theorem);
        ++rep.trials;
        for (std::size_t k = 0; k < ksize; ++k) {
            if (in_truth[order[k]]) {
                ++rep.true_indices_checked;
                if (flags[k]) {
                    ++rep.violations;
                    if (rep.failures.size() < 5) {
                        rep.failures.push_back(fmt::format("trial {}: true basis {} flagged (|b|={:.6g}, bound={:.6g})",
                                                           trial, pool[order[k]], std::abs(b[k]),
                                                           exclusion_bound(k, b, analysis, cfg)));
                    }
                }
            } else {
                ++rep.spurious_total;
                rep.spurious_flagged += flags[k] ? 1 : 0;
            }
        }
    }
    return rep;
}

}  // namespace pitpo::exclusion
