#include "pitpo/reward.hpp"

#include <algorithm>
#include <cmath>

namespace pitpo::reward {

double fit_reward(double mse, double alpha, double eps)
{
    if (!std::isfinite(mse)) {
        return kRewardFloor;
    }
    return std::max(kRewardFloor, -alpha * std::log(mse + eps));
}

double complexity_penalty(std::size_t node_count, double lambda_len)
{
    return lambda_len * static_cast<double>(node_count);
}

RewardBreakdown global_reward(double mse, std::size_t node_count, const constraints::ConstraintReport& report,
                              const RewardConfig& cfg)
{
    RewardBreakdown r;
    r.mse = mse;
    r.r_fit = fit_reward(mse, cfg.alpha, cfg.epsilon);
    r.p_cplx = complexity_penalty(node_count, cfg.lambda_len);
    r.p_phy = report.gated_active ? report.total : 0.0;
    r.r_global = r.r_fit - r.p_cplx - r.p_phy;
    return r;
}

}  // namespace pitpo::reward
