#include "pitpo/expr.hpp"

#include <cmath>

#include <fmt/core.h>

namespace pitpo::expr {

namespace {

void check_inputs(const Skeleton& s, std::span<const double> coeffs, const Eigen::MatrixXd& X)
{
    if (coeffs.size() != s.coeff_count()) {
        throw std::invalid_argument(
            fmt::format("coefficient vector has {} entries, skeleton expects {}", coeffs.size(), s.coeff_count()));
    }
    if (static_cast<std::size_t>(X.cols()) != s.variables().size()) {
        throw std::invalid_argument(
            fmt::format("input matrix has {} columns, skeleton declares {} variables", X.cols(), s.variables().size()));
    }
}

Eigen::ArrayXd integer_power(const Eigen::ArrayXd& base, int n)
{
    Eigen::ArrayXd out = Eigen::ArrayXd::Ones(base.size());
    for (int k = 0; k < std::abs(n); ++k) {
        out *= base;
    }
    return n < 0 ? out.inverse() : out;
}

Eigen::ArrayXd apply(Func f, const Eigen::ArrayXd& v)
{
    switch (f) {
    case Func::Exp: return v.exp();
    case Func::Log: return v.log();
    case Func::Sin: return v.sin();
    case Func::Cos: return v.cos();
    case Func::Tanh: return v.tanh();
    case Func::Sqrt: return v.sqrt();
    case Func::Abs: return v.abs();
    }
    return v;
}

// d f(v) / d v
Eigen::ArrayXd derivative(Func f, const Eigen::ArrayXd& v, const Eigen::ArrayXd& fv)
{
    switch (f) {
    case Func::Exp: return fv;
    case Func::Log: return v.inverse();
    case Func::Sin: return v.cos();
    case Func::Cos: return -v.sin();
    case Func::Tanh: return 1.0 - fv.square();
    case Func::Sqrt: return 0.5 / fv;
    case Func::Abs: return v.sign();
    }
    return Eigen::ArrayXd::Ones(v.size());
}

std::vector<Eigen::ArrayXd> sweep(const Skeleton& s, std::span<const double> coeffs, const Eigen::MatrixXd& X)
{
    const auto& nodes = s.nodes();
    const auto rows = X.rows();
    std::vector<Eigen::ArrayXd> v(nodes.size());
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const auto& n = nodes[i];
        switch (n.kind) {
        case NodeKind::Add: v[i] = v[n.lhs] + v[n.rhs]; break;
        case NodeKind::Sub: v[i] = v[n.lhs] - v[n.rhs]; break;
        case NodeKind::Mul: v[i] = v[n.lhs] * v[n.rhs]; break;
        case NodeKind::Div: v[i] = v[n.lhs] / v[n.rhs]; break;
        case NodeKind::Pow: v[i] = integer_power(v[n.lhs], static_cast<int>(nodes[n.rhs].value)); break;
        case NodeKind::Neg: v[i] = -v[n.lhs]; break;
        case NodeKind::Call: v[i] = apply(n.func, v[n.lhs]); break;
        case NodeKind::Variable: v[i] = X.col(n.slot).array(); break;
        case NodeKind::Coefficient: v[i] = Eigen::ArrayXd::Constant(rows, coeffs[static_cast<std::size_t>(n.slot)]); break;
        case NodeKind::Constant: v[i] = Eigen::ArrayXd::Constant(rows, n.value); break;
        }
    }
    return v;
}

}  // namespace

Eigen::ArrayXXd evaluate_outputs(const Skeleton& s, std::span<const double> coeffs, const Eigen::MatrixXd& X)
{
    check_inputs(s, coeffs, X);
    const auto v = sweep(s, coeffs, X);
    Eigen::ArrayXXd out(X.rows(), static_cast<Eigen::Index>(s.outputs()));
    for (std::size_t o = 0; o < s.outputs(); ++o) {
        out.col(static_cast<Eigen::Index>(o)) = v[s.roots()[o]];
    }
    return out;
}

Eigen::ArrayXd evaluate(const Skeleton& s, std::span<const double> coeffs, const Eigen::MatrixXd& X)
{
    if (s.outputs() != 1) {
        throw std::invalid_argument("evaluate() requires a single-output skeleton");
    }
    return evaluate_outputs(s, coeffs, X).col(0);
}

Eigen::ArrayXd evaluate_node(const Skeleton& s, std::int32_t node, std::span<const double> coeffs,
                             const Eigen::MatrixXd& X)
{
    check_inputs(s, coeffs, X);
    return sweep(s, coeffs, X)[static_cast<std::size_t>(node)];
}

Eigen::ArrayXd evaluate_basis(const Skeleton& s, const Term& term, std::span<const double> coeffs,
                              const Eigen::MatrixXd& X)
{
    if (!term.coefficient) {
        return evaluate_node(s, term.root, coeffs, X);
    }
    std::vector<double> unit(coeffs.begin(), coeffs.end());
    unit[*term.coefficient] = 1.0;
    return evaluate_node(s, term.root, unit, X);
}

Evaluation evaluate_with_jacobian(const Skeleton& s, std::span<const double> coeffs, const Eigen::MatrixXd& X)
{
    check_inputs(s, coeffs, X);
    const auto& nodes = s.nodes();
    const auto rows = X.rows();
    const auto k = static_cast<Eigen::Index>(s.coeff_count());
    const auto v = sweep(s, coeffs, X);
    // empty arrays stand for an identically zero Jacobian
    std::vector<Eigen::ArrayXXd> J(nodes.size());
    auto zero_or = [&](std::int32_t i) -> Eigen::ArrayXXd {
        return J[i].size() == 0 ? Eigen::ArrayXXd::Zero(rows, k) : J[i];
    };
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const auto& n = nodes[i];
        const bool dl = n.lhs >= 0 && J[n.lhs].size() > 0;
        const bool dr = n.rhs >= 0 && J[n.rhs].size() > 0;
        switch (n.kind) {
        case NodeKind::Add:
            if (dl || dr) J[i] = zero_or(n.lhs) + zero_or(n.rhs);
            break;
        case NodeKind::Sub:
            if (dl || dr) J[i] = zero_or(n.lhs) - zero_or(n.rhs);
            break;
        case NodeKind::Mul:
            if (dl || dr) J[i] = zero_or(n.lhs).colwise() * v[n.rhs] + zero_or(n.rhs).colwise() * v[n.lhs];
            break;
        case NodeKind::Div:
            if (dl || dr) {
                const Eigen::ArrayXd inv = v[n.rhs].inverse();
                J[i] = zero_or(n.lhs).colwise() * inv - zero_or(n.rhs).colwise() * (v[n.lhs] * inv.square());
            }
            break;
        case NodeKind::Pow:
            if (dl) {
                const int e = static_cast<int>(nodes[n.rhs].value);
                J[i] = J[n.lhs].colwise() * (e * integer_power(v[n.lhs], e - 1));
            }
            break;
        case NodeKind::Neg:
            if (dl) J[i] = -J[n.lhs];
            break;
        case NodeKind::Call:
            if (dl) J[i] = J[n.lhs].colwise() * derivative(n.func, v[n.lhs], v[i]);
            break;
        case NodeKind::Coefficient:
            J[i] = Eigen::ArrayXXd::Zero(rows, k);
            J[i].col(n.slot).setOnes();
            break;
        case NodeKind::Variable:
        case NodeKind::Constant:
            break;
        }
    }
    Evaluation out;
    out.values.resize(rows, static_cast<Eigen::Index>(s.outputs()));
    for (std::size_t o = 0; o < s.outputs(); ++o) {
        const auto r = s.roots()[o];
        out.values.col(static_cast<Eigen::Index>(o)) = v[r];
        out.jacobian.push_back(zero_or(r));
    }
    return out;
}

}  // namespace pitpo::expr
