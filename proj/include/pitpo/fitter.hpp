#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pitpo/expr.hpp"
#include "pitpo/units.hpp"

namespace pitpo {

enum class Split : std::uint8_t { Train, IdTest, OodTest };

struct Dataset {
    Eigen::MatrixXd X;                    // N x d, columns in `variables` order
    Eigen::VectorXd y;
    std::vector<std::string> variables;
    std::optional<units::UnitMap> units;  // per variable
    std::optional<units::UnitVector> target_unit;
    std::vector<Split> split;             // empty: every row is training data

    [[nodiscard]] Eigen::Index rows() const noexcept { return X.rows(); }
    [[nodiscard]] Dataset subset(Split which) const;
    [[nodiscard]] Dataset train() const { return subset(Split::Train); }
    // throws std::invalid_argument on NaN, shape mismatch or empty data
    void validate() const;
};

// Maps program outputs to residuals. Block b of the residual vector is
//   r_b(n) = sum_m weights[b](n, m) * out_m(n) - targets[b](n)
// A scalar regression problem is one block with unit weight.
struct Objective {
    Eigen::MatrixXd X;
    std::vector<Eigen::ArrayXXd> weights;  // per block: N x outputs
    std::vector<Eigen::ArrayXd> targets;   // per block: N

    static Objective scalar(const Eigen::MatrixXd& X, const Eigen::VectorXd& y);
    static Objective scalar(const Dataset& train) { return scalar(train.X, train.y); }

    [[nodiscard]] Eigen::Index rows() const noexcept { return X.rows(); }
    [[nodiscard]] std::size_t outputs() const noexcept { return weights.empty() ? 0 : static_cast<std::size_t>(weights[0].cols()); }
    // N x blocks residual matrix for the given program outputs (N x outputs)
    [[nodiscard]] Eigen::ArrayXXd residuals(const Eigen::ArrayXXd& outputs) const;
    // population variance of all target entries
    [[nodiscard]] double target_variance() const;
};

struct FitBudget {
    int restarts{8};
    int max_iters{200};
    double grad_tol{1e-10};
    std::uint64_t seed{0};
    double ridge{1e-10};
    // skip the linear fast path even for linear skeletons
    bool force_iterative{false};
    // extra starting points tried before the default restarts
    std::vector<std::vector<double>> initial_guesses;
};

struct FitResult {
    std::vector<double> coeffs;
    double mse{0.0};
    bool converged{false};
    int restarts_used{0};
    bool linear_path{false};
    std::size_t masked_rows{0};  // rows dropped for non-finite predictions
};

// Mean squared residual; +Inf if any element is non-finite.
double mse(const Eigen::ArrayXd& pred, const Eigen::ArrayXd& y);

// MSE of the program over the objective with fixed coefficients. Rows with a
// non-finite prediction are dropped when they are at most 0.1% of all rows,
// otherwise the result is +Inf.
double objective_mse(const expr::Skeleton& s, std::span<const double> coeffs, const Objective& obj,
                     std::size_t* masked = nullptr);

FitResult fit(const expr::Skeleton& s, const Objective& obj, const FitBudget& budget = {});
FitResult fit(const expr::Skeleton& s, const Dataset& d, const FitBudget& budget = {});

}  // namespace pitpo
