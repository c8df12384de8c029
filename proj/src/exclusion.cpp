#include "pitpo/exclusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/core.h>

#include "pitpo/bench.hpp"

namespace pitpo::exclusion {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

void ExclusionConfig::validate() const
{
    if (!(A > 0.0) || !(B >= A)) {
        throw std::invalid_argument(fmt::format("exclusion: need 0 < A <= B (A={}, B={})", A, B));
    }
    if (M < 1) {
        throw std::invalid_argument("exclusion: M must be at least 1");
    }
    if (!(rho > 0.0 && rho < 1.0)) {
        throw std::invalid_argument("exclusion: rho must lie in (0, 1)");
    }
    if (!(penalty_scale > 0.0)) {
        throw std::invalid_argument("exclusion: penalty scale must be positive");
    }
    if (!(epsilon > 0.0)) {
        throw std::invalid_argument("exclusion: epsilon must be positive");
    }
}

Eigen::MatrixXd gram_matrix(const Eigen::MatrixXd& phi)
{
    const double n = static_cast<double>(phi.rows());
    Eigen::MatrixXd g = phi.transpose() * phi / n;
    // exact symmetry regardless of summation order
    return 0.5 * (g + g.transpose());
}

GramAnalysis analyze(const Eigen::MatrixXd& phi, std::size_t support_size, std::vector<std::string> names)
{
    GramAnalysis a;
    const auto S = phi.cols();
    a.support_size = support_size;
    a.dictionary = std::move(names);
    a.degenerate.assign(static_cast<std::size_t>(S), false);
    Eigen::MatrixXd clean = phi;
    for (Eigen::Index j = 0; j < S; ++j) {
        if (!phi.col(j).allFinite()) {
            a.degenerate[static_cast<std::size_t>(j)] = true;
            clean.col(j).setZero();
        }
    }
    a.gram = gram_matrix(clean);
    a.projection.resize(S, S);
    for (Eigen::Index i = 0; i < S; ++i) {
        const double gii = a.gram(i, i);
        if (a.degenerate[static_cast<std::size_t>(i)] || !(gii > kDegenerateDiagonal)) {
            a.degenerate[static_cast<std::size_t>(i)] = true;
            a.projection.row(i).setConstant(kNaN);
            continue;
        }
        for (Eigen::Index j = 0; j < S; ++j) {
            a.projection(i, j) = a.gram(j, i) / gii;
        }
        a.projection(i, i) = 1.0;
    }
    a.bounds.assign(support_size, kNaN);
    a.redundant.assign(support_size, false);
    return a;
}

double exclusion_bound(std::size_t i, std::span<const double> b, const GramAnalysis& a, const ExclusionConfig& cfg)
{
    if (a.degenerate.at(i)) {
        return kNaN;
    }
    const auto K = a.support_size;
    const auto ii = static_cast<Eigen::Index>(i);
    double internal = 0.0;
    for (std::size_t j = 0; j < K; ++j) {
        if (j == i) {
            continue;
        }
        const double t = a.degenerate[j] ? 0.0 : std::abs(a.projection(ii, static_cast<Eigen::Index>(j)));
        internal += (cfg.B + std::abs(b[j])) * t;
    }
    std::vector<double> s;
    for (auto l = static_cast<Eigen::Index>(K); l < a.projection.cols(); ++l) {
        if (!a.degenerate[static_cast<std::size_t>(l)]) {
            s.push_back(std::abs(a.projection(ii, l)));
        }
    }
    std::sort(s.begin(), s.end(), std::greater<>());
    const auto m = std::min<std::size_t>(static_cast<std::size_t>(cfg.M - 1), s.size());
    double external = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
        external += s[k];
    }
    if (cfg.fault == Fault::DropInterference) {
        return cfg.A;
    }
    return cfg.A - (internal + cfg.B * external);
}

std::vector<double> coefficient_ratios(std::span<const double> b, double epsilon)
{
    double total = 0.0;
    for (const double v : b) {
        total += std::abs(v);
    }
    std::vector<double> tau(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) {
        tau[i] = std::abs(b[i]) / (total + epsilon);
    }
    return tau;
}

std::vector<bool> detect_redundant(std::span<const double> b, const GramAnalysis& a, const ExclusionConfig& cfg,
                                   Mode mode, const std::vector<bool>& fixed)
{
    std::vector<bool> flags(b.size(), false);
    if (b.empty()) {
        return flags;
    }
    const auto tau = coefficient_ratios(b, cfg.epsilon);
    for (std::size_t i = 0; i < b.size(); ++i) {
        if (!fixed.empty() && fixed[i]) {
            continue;
        }
        if (mode == Mode::Ratio) {
            flags[i] = tau[i] <= cfg.rho;
        } else {
            const double bound = exclusion_bound(i, b, a, cfg);
            flags[i] = !std::isnan(bound) && std::abs(b[i]) < bound;
        }
    }
    return flags;
}

double token_penalty(double b_i, const ExclusionConfig& cfg)
{
    return cfg.penalty_scale * std::max(0.0, -std::log(std::abs(b_i) + cfg.epsilon));
}

Eigen::MatrixXd lifted_terms(const expr::Skeleton& s, std::span<const double> coeffs, const Objective& obj)
{
    const auto n = obj.rows();
    const auto blocks = static_cast<Eigen::Index>(obj.weights.size());
    const auto& terms = s.terms();
    Eigen::MatrixXd phi(n * blocks, static_cast<Eigen::Index>(terms.size()));
    for (std::size_t t = 0; t < terms.size(); ++t) {
        const Eigen::ArrayXd basis = expr::evaluate_basis(s, terms[t], coeffs, obj.X);
        for (Eigen::Index b = 0; b < blocks; ++b) {
            phi.col(static_cast<Eigen::Index>(t)).segment(b * n, n) =
                (obj.weights[static_cast<std::size_t>(b)].col(static_cast<Eigen::Index>(terms[t].output)) * basis).matrix();
        }
    }
    return phi;
}

CandidateAnalysis analyze_candidate(const expr::Skeleton& s, std::span<const double> coeffs, const Objective& obj,
                                    const ExclusionConfig& cfg)
{
    CandidateAnalysis out;
    const auto& terms = s.terms();
    for (const auto& t : terms) {
        const double c = t.coefficient ? coeffs[*t.coefficient] : 1.0;
        out.b.push_back(t.sign * c);
        out.implicit_unit.push_back(!t.coefficient.has_value());
    }
    GramAnalysis gram;
    if (cfg.mode == Mode::Theorem) {
        Eigen::MatrixXd support = lifted_terms(s, coeffs, obj);
        std::vector<std::string> names;
        for (const auto& b : expr::decompose_terms(s)) {
            names.push_back(b.text);
        }
        std::vector<Eigen::VectorXd> external;
        std::vector<std::string> external_names;
        if (cfg.external_library) {
            const auto n = obj.rows();
            const auto blocks = static_cast<Eigen::Index>(obj.weights.size());
            for (const auto& var : s.variables()) {
                for (const auto& text : bench::unary_library(var)) {
                    const auto lib = expr::parse(text, s.variables());
                    const Eigen::ArrayXd v = expr::evaluate(lib, {}, obj.X);
                    for (std::size_t o = 0; o < s.outputs(); ++o) {
                        Eigen::VectorXd col(n * blocks);
                        for (Eigen::Index b = 0; b < blocks; ++b) {
                            col.segment(b * n, n) =
                                (obj.weights[static_cast<std::size_t>(b)].col(static_cast<Eigen::Index>(o)) * v).matrix();
                        }
                        if (!col.allFinite() || col.squaredNorm() == 0.0) {
                            continue;
                        }
                        // drop library entries that duplicate a support basis
                        bool duplicate = false;
                        for (Eigen::Index j = 0; j < support.cols() && !duplicate; ++j) {
                            const double nj = support.col(j).norm();
                            if (std::isfinite(nj) && nj > 0.0) {
                                const double cosine = std::abs(support.col(j).dot(col)) / (nj * col.norm());
                                duplicate = cosine > 1.0 - 1e-12;
                            }
                        }
                        if (!duplicate) {
                            external.push_back(std::move(col));
                            external_names.push_back(s.outputs() > 1 ? fmt::format("{}@{}", text, o) : text);
                        }
                    }
                }
            }
        }
        Eigen::MatrixXd phi(support.rows(), support.cols() + static_cast<Eigen::Index>(external.size()));
        phi.leftCols(support.cols()) = support;
        for (std::size_t e = 0; e < external.size(); ++e) {
            phi.col(support.cols() + static_cast<Eigen::Index>(e)) = external[e];
        }
        names.insert(names.end(), external_names.begin(), external_names.end());
        gram = analyze(phi, terms.size(), std::move(names));
        for (std::size_t i = 0; i < terms.size(); ++i) {
            gram.bounds[i] = exclusion_bound(i, out.b, gram, cfg);
        }
    } else {
        gram.support_size = terms.size();
    }
    out.redundant = detect_redundant(out.b, gram, cfg, cfg.mode, out.implicit_unit);
    gram.tau = coefficient_ratios(out.b, cfg.epsilon);
    gram.redundant = out.redundant;
    out.penalty.assign(terms.size(), 0.0);
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (out.redundant[i]) {
            out.penalty[i] = token_penalty(out.b[i], cfg);
        }
    }
    if (cfg.mode == Mode::Theorem) {
        out.gram = std::move(gram);
    }
    return out;
}

}  // namespace pitpo::exclusion
