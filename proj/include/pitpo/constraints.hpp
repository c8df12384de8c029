#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "pitpo/expr.hpp"
#include "pitpo/fitter.hpp"
#include "pitpo/turbulence.hpp"

namespace pitpo::constraints {

struct Weights {
    double w_dim{1.0};
    double w_diff{0.5};
    double w_domain{0.5};  // applied to every domain constraint
};

using Named = std::vector<std::pair<std::string, double>>;

struct RawPenalties {
    double p_dim{0.0};
    double p_diff{0.0};
    Named domain;
};

struct ConstraintReport {
    double p_dim{0.0};
    double p_diff{0.0};
    Named p_domain;
    bool gated_active{false};
    double total{0.0};
};

// Fraction of 64 quasi-random probes inside the training bounding box where a
// central difference is non-finite or trips the jump heuristic. In [0, 1].
double diff_penalty(const expr::Skeleton& s, std::span<const double> coeffs, const Dataset& d);

inline constexpr int kDiffProbes = 64;

// Number of dimensional violations; 0 when the dataset carries no units.
double dim_penalty(const expr::Skeleton& s, const Dataset& d);

ConstraintReport gated_physical_penalty(double candidate_mse, const RawPenalties& raw, double gate,
                                        const Weights& w = {});

// Task-specific constraints. outputs: N x M program values on the training rows.
class DomainPlugin {
public:
    virtual ~DomainPlugin() = default;
    [[nodiscard]] virtual std::string name() const = 0;
    [[nodiscard]] virtual std::vector<std::string> required_fields() const = 0;
    // full=false evaluates the cheap subset only
    [[nodiscard]] virtual Named evaluate(const Eigen::ArrayXXd& outputs, bool full) const = 0;
};

class TurbulencePlugin final : public DomainPlugin {
public:
    TurbulencePlugin(turb::Samples train_samples, turb::PenaltySettings settings = {});
    [[nodiscard]] std::string name() const override { return "turbulence"; }
    [[nodiscard]] std::vector<std::string> required_fields() const override;
    [[nodiscard]] Named evaluate(const Eigen::ArrayXXd& outputs, bool full) const override;

private:
    turb::Samples samples_;
    turb::PenaltySettings settings_;
};

enum class Stage : std::uint8_t { A, B };

// Sequential in batch order: a candidate strictly below the running best is
// stage B and becomes the new best.
std::vector<Stage> elite_schedule(std::span<const double> mses, double& best_so_far);

}  // namespace pitpo::constraints
