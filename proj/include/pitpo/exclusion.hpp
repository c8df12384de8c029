#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pitpo/expr.hpp"
#include "pitpo/fitter.hpp"

namespace pitpo::exclusion {

enum class Mode : std::uint8_t { Ratio, Theorem };

// Fault injection for the verify suite; never set outside of it.
enum class Fault : std::uint8_t { None, DropInterference };

struct ExclusionConfig {
    double A{0.5};
    double B{2.0};
    int M{5};
    double rho{1e-2};
    double penalty_scale{0.5};
    double epsilon{1e-50};
    Mode mode{Mode::Ratio};
    // add the unary library over every variable as S \ K in theorem mode
    bool external_library{true};
    Fault fault{Fault::None};

    void validate() const;  // throws std::invalid_argument
};

inline constexpr double kDegenerateDiagonal = 1e-14;

struct GramAnalysis {
    std::vector<std::string> dictionary;  // support K first, then S \ K
    std::size_t support_size{0};
    Eigen::MatrixXd gram;
    Eigen::MatrixXd projection;  // T_ij = G_ji / G_ii (NaN rows for degenerate i)
    std::vector<bool> degenerate;
    std::vector<double> bounds;  // per support index; NaN when degenerate or not computed
    std::vector<bool> redundant;  // per support index
    std::vector<double> tau;      // per support index
};

// G = Phi^T Phi / N for basis evaluations in the columns of Phi.
Eigen::MatrixXd gram_matrix(const Eigen::MatrixXd& phi);

// Gram and projection matrices; non-finite columns or G_ii <= 1e-14 are degenerate.
GramAnalysis analyze(const Eigen::MatrixXd& phi, std::size_t support_size, std::vector<std::string> names = {});

double exclusion_bound(std::size_t i, std::span<const double> b, const GramAnalysis& a, const ExclusionConfig& cfg);

std::vector<double> coefficient_ratios(std::span<const double> b, double epsilon);

// fixed[i]: coefficient i is an implicit unit coefficient and is never flagged.
std::vector<bool> detect_redundant(std::span<const double> b, const GramAnalysis& a, const ExclusionConfig& cfg,
                                   Mode mode, const std::vector<bool>& fixed = {});

double token_penalty(double b_i, const ExclusionConfig& cfg);

// Per-term view of a fitted candidate.
struct CandidateAnalysis {
    std::vector<double> b;              // effective coefficient of each term (sign folded in)
    std::vector<bool> implicit_unit;    // term has no leading placeholder
    std::vector<bool> redundant;        // per term
    std::vector<double> penalty;        // P_tok per term (0 unless redundant)
    std::optional<GramAnalysis> gram;   // theorem mode only
};

// Terms are lifted through the objective's weights, so multi-output programs
// are analyzed in residual space.
CandidateAnalysis analyze_candidate(const expr::Skeleton& s, std::span<const double> coeffs, const Objective& obj,
                                    const ExclusionConfig& cfg);

// Columns of basis evaluations lifted to residual space (rows: N * blocks).
Eigen::MatrixXd lifted_terms(const expr::Skeleton& s, std::span<const double> coeffs, const Objective& obj);

// Evaluate coefficient-free basis expressions into the columns of Phi.
Eigen::MatrixXd basis_matrix(const std::vector<std::string>& bases, const std::vector<std::string>& variables,
                             const Eigen::MatrixXd& X);

// Randomized soundness check: noiseless dictionary targets, least squares on a
// random K overlapping the true support, theorem-mode flags on true indices.
struct SoundnessReport {
    int trials{0};
    int violations{0};
    int true_indices_checked{0};
    int spurious_flagged{0};  // correct exclusions of indices outside the truth
    int spurious_total{0};
    std::vector<std::string> failures;  // first few violations, human readable
};

SoundnessReport soundness_suite(int trials, std::uint64_t seed, Fault fault = Fault::None);

}  // namespace pitpo::exclusion
