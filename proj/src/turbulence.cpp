#include "pitpo/turbulence.hpp"

#include <cmath>
#include <random>

#include <Eigen/Eigenvalues>
#include <fmt/core.h>
#include <spdlog/spdlog.h>

#include "pitpo/csv.hpp"

namespace pitpo::turb {

double normalize_invariant(double I) { return std::tanh(I / 2.0); }

void require_symmetric(const Tensor& t, double tol, const char* what)
{
    if ((t - t.transpose()).cwiseAbs().maxCoeff() > tol) {
        throw std::invalid_argument(fmt::format("{} is not symmetric", what));
    }
}

double realizability(const std::vector<Tensor>& tau)
{
    if (tau.empty()) {
        return 0.0;
    }
    double sum = 0.0;
    for (const auto& t : tau) {
        require_symmetric(t, 1e-8, "stress tensor");
        if (!t.allFinite()) {
            return std::numeric_limits<double>::infinity();
        }
        const Eigen::SelfAdjointEigenSolver<Tensor> eig(t, Eigen::EigenvaluesOnly);
        sum += std::max(0.0, -eig.eigenvalues().minCoeff());
    }
    return sum / static_cast<double>(tau.size());
}

double wall_decay(const std::vector<Tensor>& tau, const std::vector<double>& y, double y0)
{
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < tau.size(); ++i) {
        if (y[i] < y0) {
            sum += tau[i].norm();
            ++count;
        }
    }
    return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

double asymptotic_slope(const std::vector<double>& tau_xy, const std::vector<double>& y_plus, double lo, double hi)
{
    std::vector<double> lx;
    std::vector<double> ly;
    for (std::size_t i = 0; i < tau_xy.size(); ++i) {
        if (y_plus[i] >= lo && y_plus[i] <= hi && y_plus[i] > 0.0 && tau_xy[i] != 0.0 && std::isfinite(tau_xy[i])) {
            lx.push_back(std::log(y_plus[i]));
            ly.push_back(std::log(std::abs(tau_xy[i])));
        }
    }
    if (lx.size() < 3) {
        spdlog::warn("asymptotic slope: {} usable samples in the y+ band, penalty set to 0", lx.size());
        return 0.0;
    }
    const auto n = static_cast<Eigen::Index>(lx.size());
    const Eigen::Map<const Eigen::ArrayXd> x(lx.data(), n);
    const Eigen::Map<const Eigen::ArrayXd> v(ly.data(), n);
    const double mx = x.mean();
    const double mv = v.mean();
    const double sxx = (x - mx).square().sum();
    if (sxx <= 0.0) {
        spdlog::warn("asymptotic slope: degenerate y+ values, penalty set to 0");
        return 0.0;
    }
    const double slope = ((x - mx) * (v - mv)).sum() / sxx;
    return std::abs(slope - 3.0);
}

double energy_consistency(const std::vector<Tensor>& tau, const std::vector<Tensor>& grad_U,
                          const std::vector<double>& Pk_ref)
{
    if (tau.empty()) {
        return 0.0;
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < tau.size(); ++i) {
        const double pk = -(tau[i].array() * grad_U[i].array()).sum();
        sum += (pk - Pk_ref[i]) * (pk - Pk_ref[i]);
    }
    return sum / static_cast<double>(tau.size());
}

Reconstruction reconstruct(const Eigen::ArrayXXd& g, const Samples& samples)
{
    Reconstruction out;
    out.b_hat.reserve(samples.size());
    out.tau.reserve(samples.size());
    double sum = 0.0;
    for (std::size_t n = 0; n < samples.size(); ++n) {
        const auto& s = samples[n];
        const auto row = static_cast<Eigen::Index>(n);
        Tensor b = g(row, 0) * s.bases[0] + g(row, 1) * s.bases[1] + g(row, 2) * s.bases[2];
        out.b_hat.push_back(b);
        out.tau.push_back(s.k * b);
        for (const auto& [i, j] : kSelected) {
            const double d = s.k * (b(i, j) - s.target_b(i, j));
            sum += d * d;
        }
    }
    out.selected_mse = samples.empty() ? 0.0 : sum / static_cast<double>(samples.size() * kSelected.size());
    return out;
}

Eigen::MatrixXd features(const Samples& samples)
{
    Eigen::MatrixXd X(static_cast<Eigen::Index>(samples.size()), 2);
    for (std::size_t n = 0; n < samples.size(); ++n) {
        X(static_cast<Eigen::Index>(n), 0) = samples[n].I1;
        X(static_cast<Eigen::Index>(n), 1) = samples[n].I2;
    }
    return X;
}

Objective make_objective(const Samples& samples)
{
    Objective o;
    o.X = features(samples);
    const auto n = static_cast<Eigen::Index>(samples.size());
    for (const auto& [i, j] : kSelected) {
        Eigen::ArrayXXd w(n, 3);
        Eigen::ArrayXd t(n);
        for (Eigen::Index r = 0; r < n; ++r) {
            const auto& s = samples[static_cast<std::size_t>(r)];
            for (int m = 0; m < 3; ++m) {
                w(r, m) = s.k * s.bases[static_cast<std::size_t>(m)](i, j);
            }
            t(r) = s.k * s.target_b(i, j);
        }
        o.weights.push_back(std::move(w));
        o.targets.push_back(std::move(t));
    }
    return o;
}

Penalties evaluate_penalties(const Eigen::ArrayXXd& g, const Samples& samples, const PenaltySettings& settings,
                             bool full)
{
    const auto rec = reconstruct(g, samples);
    Penalties p;
    p.realizability = realizability(rec.tau);
    if (!full) {
        return p;
    }
    std::vector<double> y(samples.size());
    double ymax = 0.0;
    bool have_yplus = true;
    bool have_energy = true;
    for (std::size_t n = 0; n < samples.size(); ++n) {
        y[n] = samples[n].y;
        ymax = std::max(ymax, y[n]);
        have_yplus = have_yplus && samples[n].y_plus.has_value();
        have_energy = have_energy && samples[n].grad_U.has_value() && samples[n].Pk_ref.has_value();
    }
    p.wall_decay = wall_decay(rec.tau, y, settings.wall_band.value_or(0.02 * ymax));
    if (have_yplus) {
        std::vector<double> txy(samples.size());
        std::vector<double> yp(samples.size());
        for (std::size_t n = 0; n < samples.size(); ++n) {
            txy[n] = rec.tau[n](0, 1);
            yp[n] = *samples[n].y_plus;
        }
        p.asymptotic_slope = asymptotic_slope(txy, yp, settings.yplus_lo, settings.yplus_hi);
    } else {
        spdlog::debug("y_plus missing, asymptotic slope constraint skipped");
    }
    if (have_energy) {
        std::vector<Tensor> grad(samples.size());
        std::vector<double> ref(samples.size());
        for (std::size_t n = 0; n < samples.size(); ++n) {
            grad[n] = *samples[n].grad_U;
            ref[n] = *samples[n].Pk_ref;
        }
        p.energy = energy_consistency(rec.tau, grad, ref);
    } else {
        spdlog::debug("gradU or Pk_ref missing, energy constraint skipped");
    }
    return p;
}

namespace {

Tensor read_tensor(const csv::Table& t, const std::vector<double>& row, const std::string& prefix)
{
    Tensor out;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            out(i, j) = row[t.index(fmt::format("{}_{}{}", prefix, i, j))];
        }
    }
    return out;
}

bool has_tensor(const csv::Table& t, const std::string& prefix)
{
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            if (!t.has(fmt::format("{}_{}{}", prefix, i, j))) {
                return false;
            }
        }
    }
    return true;
}

}  // namespace

Samples load_csv(const std::string& path)
{
    const auto t = csv::read(path);
    if (t.rows.empty()) {
        throw std::invalid_argument(fmt::format("'{}' has a header but no data rows", path));
    }
    for (const auto* required : {"I1", "I2", "k", "y"}) {
        (void)t.index(required);
    }
    for (const auto* prefix : {"T1", "T2", "T3", "b"}) {
        if (!has_tensor(t, prefix)) {
            throw std::invalid_argument(fmt::format("'{}' lacks the {}_ij columns", path, prefix));
        }
    }
    const bool yplus = t.has("y_plus");
    const bool grad = has_tensor(t, "gradU");
    const bool pk = t.has("Pk_ref");
    Samples out;
    out.reserve(t.rows.size());
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        TurbulenceSample s;
        s.I1 = normalize_invariant(row[t.index("I1")]);
        s.I2 = normalize_invariant(row[t.index("I2")]);
        for (int m = 0; m < 3; ++m) {
            s.bases[static_cast<std::size_t>(m)] = read_tensor(t, row, fmt::format("T{}", m + 1));
            require_symmetric(s.bases[static_cast<std::size_t>(m)], 1e-10, "tensor basis");
        }
        s.target_b = read_tensor(t, row, "b");
        require_symmetric(s.target_b, 1e-10, "anisotropy tensor");
        s.k = row[t.index("k")];
        if (s.k < 0.0) {
            throw std::invalid_argument(fmt::format("'{}' row {}: negative k", path, r + 2));
        }
        s.y = row[t.index("y")];
        if (yplus) {
            s.y_plus = row[t.index("y_plus")];
        }
        if (grad) {
            s.grad_U = read_tensor(t, row, "gradU");
        }
        if (pk) {
            s.Pk_ref = row[t.index("Pk_ref")];
        }
        out.push_back(std::move(s));
    }
    return out;
}

SyntheticField synthetic(std::size_t n, unsigned seed)
{
    SyntheticField f;
    f.program = "c0 + c1*I1; c2*I2; c3";
    f.coeffs = {-0.09, 0.04, 0.05, -0.02};
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        Eigen::Matrix3d A;
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) {
                A(r, c) = normal(rng);
            }
        }
        Tensor S = 0.5 * (A + A.transpose());
        S -= S.trace() / 3.0 * Tensor::Identity();
        const Tensor R = 0.5 * (A - A.transpose());
        TurbulenceSample s;
        const double i1 = (S * S).trace();
        const double i2 = (R * R).trace();
        s.I1 = normalize_invariant(i1);
        s.I2 = normalize_invariant(i2);
        s.bases[0] = S;
        s.bases[1] = S * R - R * S;
        s.bases[2] = S * S - i1 / 3.0 * Tensor::Identity();
        const double g1 = f.coeffs[0] + f.coeffs[1] * s.I1;
        const double g2 = f.coeffs[2] * s.I2;
        const double g3 = f.coeffs[3];
        s.target_b = g1 * s.bases[0] + g2 * s.bases[1] + g3 * s.bases[2];
        s.y = unit(rng);
        s.y_plus = 200.0 * s.y;
        s.k = 0.5 + unit(rng);
        s.grad_U = S + R;
        s.Pk_ref = -(s.k * s.target_b.array() * s.grad_U->array()).sum();
        f.samples.push_back(std::move(s));
    }
    return f;
}

}  // namespace pitpo::turb
