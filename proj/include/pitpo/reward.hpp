#pragma once

#include <cstddef>

#include "pitpo/constraints.hpp"

namespace pitpo::reward {

inline constexpr double kRewardFloor = -1e6;

struct RewardConfig {
    double alpha{1.0};
    double lambda_len{5e-3};
    double epsilon{1e-50};
};

struct RewardBreakdown {
    double r_fit{0.0};
    double p_cplx{0.0};
    double p_phy{0.0};
    double r_global{0.0};
    double mse{0.0};
};

// -alpha * log(mse + eps); non-finite mse maps to the floor.
double fit_reward(double mse, double alpha, double eps);

double complexity_penalty(std::size_t node_count, double lambda_len);

RewardBreakdown global_reward(double mse, std::size_t node_count, const constraints::ConstraintReport& report,
                              const RewardConfig& cfg = {});

}  // namespace pitpo::reward
