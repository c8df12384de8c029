#include "pitpo/constraints.hpp"

#include <cmath>
#include <limits>

#include <spdlog/spdlog.h>

#include "pitpo/units.hpp"

namespace pitpo::constraints {

namespace {

constexpr int kPrimes[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53};

double radical_inverse(unsigned index, int base)
{
    double f = 1.0;
    double r = 0.0;
    while (index > 0) {
        f /= base;
        r += f * static_cast<double>(index % static_cast<unsigned>(base));
        index /= static_cast<unsigned>(base);
    }
    return r;
}

}  // namespace

double diff_penalty(const expr::Skeleton& s, std::span<const double> coeffs, const Dataset& d)
{
    const auto train = d.train();
    const Eigen::Index dims = train.X.cols();
    if (train.rows() == 0 || dims == 0) {
        return 0.0;
    }
    if (dims > static_cast<Eigen::Index>(std::size(kPrimes))) {
        throw std::invalid_argument("diff_penalty: too many input dimensions for the probe sequence");
    }
    const Eigen::RowVectorXd lo = train.X.colwise().minCoeff();
    const Eigen::RowVectorXd hi = train.X.colwise().maxCoeff();

    // rows: probe, then +h and -h along each axis
    const Eigen::Index stride = 1 + 2 * dims;
    Eigen::MatrixXd P(kDiffProbes * stride, dims);
    std::vector<double> step(static_cast<std::size_t>(dims));
    for (Eigen::Index k = 0; k < dims; ++k) {
        const double range = hi(k) - lo(k);
        step[static_cast<std::size_t>(k)] = 1e-4 * (range > 0.0 ? range : std::max(1.0, std::abs(lo(k))));
    }
    for (int p = 0; p < kDiffProbes; ++p) {
        Eigen::RowVectorXd x(dims);
        for (Eigen::Index k = 0; k < dims; ++k) {
            x(k) = lo(k) + (hi(k) - lo(k)) * radical_inverse(static_cast<unsigned>(p + 1), kPrimes[k]);
        }
        const Eigen::Index base = p * stride;
        P.row(base) = x;
        for (Eigen::Index k = 0; k < dims; ++k) {
            P.row(base + 1 + 2 * k) = x;
            P.row(base + 2 + 2 * k) = x;
            P(base + 1 + 2 * k, k) += step[static_cast<std::size_t>(k)];
            P(base + 2 + 2 * k, k) -= step[static_cast<std::size_t>(k)];
        }
    }
    const Eigen::ArrayXXd f = expr::evaluate_outputs(s, coeffs, P);

    int bad = 0;
    for (int p = 0; p < kDiffProbes; ++p) {
        const Eigen::Index base = p * stride;
        bool fail = false;
        for (Eigen::Index m = 0; m < f.cols() && !fail; ++m) {
            const double f0 = f(base, m);
            if (!std::isfinite(f0)) {
                fail = true;
                break;
            }
            for (Eigen::Index k = 0; k < dims && !fail; ++k) {
                const double h = step[static_cast<std::size_t>(k)];
                const double fp = f(base + 1 + 2 * k, m);
                const double fm = f(base + 2 + 2 * k, m);
                const double quotient = (fp - fm) / (2.0 * h);
                const double limit = 1e6 * h * (1.0 + std::abs(f0));
                fail = !std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(quotient)
                    || std::abs(fp - f0) > limit || std::abs(fm - f0) > limit;
            }
        }
        bad += fail ? 1 : 0;
    }
    return static_cast<double>(bad) / kDiffProbes;
}

double dim_penalty(const expr::Skeleton& s, const Dataset& d)
{
    if (!d.units || !d.target_unit) {
        return 0.0;
    }
    return static_cast<double>(units::check_dimensions(s, *d.units, *d.target_unit).violations);
}

ConstraintReport gated_physical_penalty(double candidate_mse, const RawPenalties& raw, double gate, const Weights& w)
{
    ConstraintReport r;
    r.p_dim = raw.p_dim;
    r.p_diff = raw.p_diff;
    r.p_domain = raw.domain;
    r.gated_active = candidate_mse < gate;
    if (!r.gated_active) {
        r.total = 0.0;
        return r;
    }
    double total = w.w_dim * raw.p_dim + w.w_diff * raw.p_diff;
    for (const auto& [name, value] : raw.domain) {
        total += w.w_domain * value;
    }
    r.total = total;
    return r;
}

TurbulencePlugin::TurbulencePlugin(turb::Samples train_samples, turb::PenaltySettings settings)
    : samples_(std::move(train_samples)), settings_(settings)
{
}

std::vector<std::string> TurbulencePlugin::required_fields() const
{
    return {"I1", "I2", "T1..T3", "b", "k", "y"};
}

Named TurbulencePlugin::evaluate(const Eigen::ArrayXXd& outputs, bool full) const
{
    if (outputs.cols() != 3 || outputs.rows() != static_cast<Eigen::Index>(samples_.size())) {
        throw std::invalid_argument("turbulence plugin: expected N x 3 coefficient functions");
    }
    if (!outputs.allFinite()) {
        const double inf = std::numeric_limits<double>::infinity();
        return {{"realizability", inf}};
    }
    const auto p = turb::evaluate_penalties(outputs, samples_, settings_, full);
    Named out = {{"realizability", p.realizability}};
    if (p.wall_decay) {
        out.emplace_back("wall_decay", *p.wall_decay);
    }
    if (p.asymptotic_slope) {
        out.emplace_back("asymptotic_slope", *p.asymptotic_slope);
    }
    if (p.energy) {
        out.emplace_back("energy", *p.energy);
    }
    return out;
}

std::vector<Stage> elite_schedule(std::span<const double> mses, double& best_so_far)
{
    std::vector<Stage> stages(mses.size(), Stage::A);
    for (std::size_t i = 0; i < mses.size(); ++i) {
        if (mses[i] < best_so_far) {
            stages[i] = Stage::B;
            best_so_far = mses[i];
        }
    }
    return stages;
}

}  // namespace pitpo::constraints
