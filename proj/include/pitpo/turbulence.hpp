#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pitpo/fitter.hpp"

namespace pitpo::turb {

using Tensor = Eigen::Matrix3d;

struct TurbulenceSample {
    double I1{0.0};
    double I2{0.0};
    std::array<Tensor, 3> bases{Tensor::Zero(), Tensor::Zero(), Tensor::Zero()};
    Tensor target_b{Tensor::Zero()};
    double k{0.0};
    double y{0.0};
    std::optional<double> y_plus;
    std::optional<Tensor> grad_U;
    std::optional<double> Pk_ref;
};

using Samples = std::vector<TurbulenceSample>;

// Components (i, j) entering the selected-component MSE.
inline constexpr std::array<std::pair<int, int>, 4> kSelected{{{0, 0}, {0, 1}, {1, 1}, {2, 2}}};

double normalize_invariant(double I);

// Throws std::invalid_argument when a tensor is not symmetric within tol.
void require_symmetric(const Tensor& t, double tol, const char* what);

// P1: mean over samples of max(0, -lambda_min(tau)).
double realizability(const std::vector<Tensor>& tau);
// P2: mean Frobenius norm over samples with y < y0; 0 for an empty band.
double wall_decay(const std::vector<Tensor>& tau, const std::vector<double>& y, double y0);
// P3: |slope - 3| of log|tau_xy| against log(y+) inside [lo, hi]; 0 with
// fewer than three usable samples.
double asymptotic_slope(const std::vector<double>& tau_xy, const std::vector<double>& y_plus, double lo, double hi);
// P4: mean squared deviation of -tau_ij dU_i/dx_j from the reference production.
double energy_consistency(const std::vector<Tensor>& tau, const std::vector<Tensor>& grad_U,
                          const std::vector<double>& Pk_ref);

struct Reconstruction {
    std::vector<Tensor> b_hat;
    std::vector<Tensor> tau;  // k * b_hat
    double selected_mse{0.0};
};

// g: N x 3 coefficient-function values (G1, G2, G3) per sample.
Reconstruction reconstruct(const Eigen::ArrayXXd& g, const Samples& samples);

// Residual objective: k * sum_m G^m T^m - k * b over the selected components.
Objective make_objective(const Samples& samples);

// Inputs for a program: columns I1, I2 (already normalized by the loader).
Eigen::MatrixXd features(const Samples& samples);

struct PenaltySettings {
    std::optional<double> wall_band;  // y0; default 0.02 * max(y)
    double yplus_lo{1.0};
    double yplus_hi{5.0};
};

struct Penalties {
    double realizability{0.0};
    std::optional<double> wall_decay;
    std::optional<double> asymptotic_slope;
    std::optional<double> energy;
};

// full=false: realizability only (stage A); full=true: all four (stage B).
Penalties evaluate_penalties(const Eigen::ArrayXXd& g, const Samples& samples, const PenaltySettings& settings,
                             bool full);

// CSV with columns I1, I2, T1_00..T3_22, b_00..b_22, k, y and optional
// y_plus, gradU_00..gradU_22, Pk_ref. Invariants are normalized on load.
Samples load_csv(const std::string& path);

// Synthetic fields with a known three-function closure.
struct SyntheticField {
    Samples samples;
    std::string program;  // ground truth over I1, I2
    std::vector<double> coeffs;
};
SyntheticField synthetic(std::size_t n, unsigned seed);

}  // namespace pitpo::turb
