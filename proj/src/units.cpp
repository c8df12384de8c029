#include "pitpo/units.hpp"

#include <cctype>
#include <numeric>
#include <optional>
#include <stdexcept>

#include <fmt/core.h>

namespace pitpo::units {

Rational::Rational(std::int64_t num, std::int64_t den)
{
    if (den == 0) {
        throw std::domain_error("rational with zero denominator");
    }
    if (den < 0) {
        num = -num;
        den = -den;
    }
    const auto g = std::gcd(num, den);
    num_ = g == 0 ? 0 : num / g;
    den_ = g == 0 ? 1 : den / g;
}

Rational operator+(Rational a, Rational b) { return {a.num_ * b.den_ + b.num_ * a.den_, a.den_ * b.den_}; }
Rational operator-(Rational a, Rational b) { return {a.num_ * b.den_ - b.num_ * a.den_, a.den_ * b.den_}; }
Rational operator*(Rational a, Rational b) { return {a.num_ * b.num_, a.den_ * b.den_}; }
Rational operator/(Rational a, Rational b) { return {a.num_ * b.den_, a.den_ * b.num_}; }

std::string Rational::str() const
{
    return den_ == 1 ? fmt::format("{}", num_) : fmt::format("{}/{}", num_, den_);
}

namespace {
constexpr std::array<std::string_view, kBaseCount> kSymbols{"m", "kg", "s", "K", "mol", "A", "cd"};
}

bool UnitVector::dimensionless() const
{
    for (const auto& e : exponents) {
        if (!e.is_zero()) {
            return false;
        }
    }
    return true;
}

std::string UnitVector::str() const
{
    std::string out;
    for (std::size_t i = 0; i < kBaseCount; ++i) {
        if (exponents[i].is_zero()) {
            continue;
        }
        if (!out.empty()) {
            out += '*';
        }
        out += kSymbols[i];
        if (!(exponents[i] == Rational(1))) {
            out += "^" + exponents[i].str();
        }
    }
    return out.empty() ? "1" : out;
}

UnitVector UnitVector::of(Base b, Rational power)
{
    UnitVector u;
    u.exponents[static_cast<std::size_t>(b)] = power;
    return u;
}

UnitVector UnitVector::parse(std::string_view text)
{
    UnitVector u;
    std::size_t i = 0;
    int sign = 1;
    auto skip = [&] {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i])) != 0) {
            ++i;
        }
    };
    skip();
    if (text.substr(i) == "1" || i == text.size()) {
        return u;
    }
    while (i < text.size()) {
        skip();
        const auto start = i;
        while (i < text.size() && std::isalpha(static_cast<unsigned char>(text[i])) != 0) {
            ++i;
        }
        const auto symbol = text.substr(start, i - start);
        if (symbol.empty() && i < text.size() && text[i] == '1') {
            ++i;  // "1/s"
            skip();
            if (i < text.size() && text[i] == '/') {
                sign = -1;
                ++i;
            }
            continue;
        }
        std::optional<std::size_t> base;
        for (std::size_t b = 0; b < kBaseCount; ++b) {
            if (kSymbols[b] == symbol) {
                base = b;
            }
        }
        if (!base) {
            throw std::invalid_argument(fmt::format("unknown unit symbol '{}' in '{}'", symbol, text));
        }
        Rational power = 1;
        if (i < text.size() && text[i] == '^') {
            ++i;
            const auto num_start = i;
            if (i < text.size() && text[i] == '-') {
                ++i;
            }
            while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i])) != 0) {
                ++i;
            }
            power = Rational(std::stoll(std::string(text.substr(num_start, i - num_start))));
        }
        u.exponents[*base] = u.exponents[*base] + Rational(sign) * power;
        skip();
        if (i < text.size()) {
            if (text[i] == '*') {
                sign = sign > 0 ? 1 : -1;
            } else if (text[i] == '/') {
                sign = -1;
            } else {
                throw std::invalid_argument(fmt::format("malformed unit '{}'", text));
            }
            ++i;
        }
    }
    return u;
}

UnitVector operator+(const UnitVector& a, const UnitVector& b)
{
    UnitVector u;
    for (std::size_t i = 0; i < kBaseCount; ++i) {
        u.exponents[i] = a.exponents[i] + b.exponents[i];
    }
    return u;
}

UnitVector operator-(const UnitVector& a, const UnitVector& b)
{
    UnitVector u;
    for (std::size_t i = 0; i < kBaseCount; ++i) {
        u.exponents[i] = a.exponents[i] - b.exponents[i];
    }
    return u;
}

UnitVector operator*(Rational k, const UnitVector& u)
{
    UnitVector out;
    for (std::size_t i = 0; i < kBaseCount; ++i) {
        out.exponents[i] = k * u.exponents[i];
    }
    return out;
}

namespace {

// unit(node) = constant + sum_k coef[k] * u_k, u_k the unknown placeholder units
struct Affine {
    std::vector<Rational> coef;
    UnitVector constant;
};

Affine scaled(Rational k, const Affine& a)
{
    Affine out{std::vector<Rational>(a.coef.size()), k * a.constant};
    for (std::size_t i = 0; i < a.coef.size(); ++i) {
        out.coef[i] = k * a.coef[i];
    }
    return out;
}

Affine combine(const Affine& a, const Affine& b, Rational kb)
{
    Affine out{std::vector<Rational>(a.coef.size()), a.constant + kb * b.constant};
    for (std::size_t i = 0; i < a.coef.size(); ++i) {
        out.coef[i] = a.coef[i] + kb * b.coef[i];
    }
    return out;
}

// Incrementally maintained reduced row-echelon system over the placeholder units.
class LinearSystem {
public:
    explicit LinearSystem(std::size_t unknowns) : unknowns_(unknowns) {}

    // Adds sum_k coef[k] u_k = rhs if consistent with the accepted rows.
    bool try_add(std::vector<Rational> coef, UnitVector rhs)
    {
        for (const auto& row : rows_) {
            const auto f = coef[row.pivot];
            if (f.is_zero()) {
                continue;
            }
            for (std::size_t k = 0; k < unknowns_; ++k) {
                coef[k] = coef[k] - f * row.coef[k];
            }
            rhs = rhs - f * row.rhs;
        }
        std::optional<std::size_t> pivot;
        for (std::size_t k = 0; k < unknowns_ && !pivot; ++k) {
            if (!coef[k].is_zero()) {
                pivot = k;
            }
        }
        if (!pivot) {
            return rhs.dimensionless();
        }
        const auto inv = Rational(1) / coef[*pivot];
        for (auto& c : coef) {
            c = c * inv;
        }
        rhs = inv * rhs;
        for (auto& row : rows_) {
            const auto f = row.coef[*pivot];
            if (f.is_zero()) {
                continue;
            }
            for (std::size_t k = 0; k < unknowns_; ++k) {
                row.coef[k] = row.coef[k] - f * coef[k];
            }
            row.rhs = row.rhs - f * rhs;
        }
        rows_.push_back(Row{std::move(coef), rhs, *pivot});
        return true;
    }

    // Free unknowns are set to dimensionless.
    [[nodiscard]] std::vector<UnitVector> solution() const
    {
        std::vector<UnitVector> out(unknowns_);
        for (const auto& row : rows_) {
            out[row.pivot] = row.rhs;
        }
        return out;
    }

private:
    struct Row {
        std::vector<Rational> coef;
        UnitVector rhs;
        std::size_t pivot;
    };
    std::size_t unknowns_;
    std::vector<Row> rows_;
};

UnitVector variable_unit(const expr::Skeleton& s, const expr::Node& n, const UnitMap& units)
{
    const auto& name = s.variables()[static_cast<std::size_t>(n.slot)];
    const auto it = units.find(name);
    if (it == units.end()) {
        throw std::invalid_argument(fmt::format("no unit annotation for variable '{}'", name));
    }
    return it->second;
}

}  // namespace

DimensionReport check_dimensions(const expr::Skeleton& s, const UnitMap& units, const UnitVector& target)
{
    using expr::NodeKind;
    const auto& nodes = s.nodes();
    const auto k = s.coeff_count();
    std::vector<Affine> u(nodes.size(), Affine{std::vector<Rational>(k), {}});
    LinearSystem system(k);
    DimensionReport report;

    auto require_equal = [&](const Affine& a, const Affine& b) {
        auto diff = combine(a, b, Rational(-1));
        if (!system.try_add(diff.coef, Rational(-1) * diff.constant)) {
            ++report.violations;
        }
    };

    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const auto& n = nodes[i];
        switch (n.kind) {
        case NodeKind::Add:
        case NodeKind::Sub:
            require_equal(u[n.lhs], u[n.rhs]);
            u[i] = u[n.lhs];
            break;
        case NodeKind::Mul: u[i] = combine(u[n.lhs], u[n.rhs], Rational(1)); break;
        case NodeKind::Div: u[i] = combine(u[n.lhs], u[n.rhs], Rational(-1)); break;
        case NodeKind::Pow: u[i] = scaled(Rational(static_cast<std::int64_t>(nodes[n.rhs].value)), u[n.lhs]); break;
        case NodeKind::Neg: u[i] = u[n.lhs]; break;
        case NodeKind::Call:
            if (expr::is_transcendental(n.func)) {
                require_equal(u[n.lhs], Affine{std::vector<Rational>(k), {}});
                u[i] = Affine{std::vector<Rational>(k), {}};
            } else if (n.func == expr::Func::Sqrt) {
                u[i] = scaled(Rational(1, 2), u[n.lhs]);
            } else {
                u[i] = u[n.lhs];
            }
            break;
        case NodeKind::Variable: u[i].constant = variable_unit(s, n, units); break;
        case NodeKind::Coefficient: u[i].coef[static_cast<std::size_t>(n.slot)] = Rational(1); break;
        case NodeKind::Constant: break;
        }
    }
    for (const auto r : s.roots()) {
        require_equal(u[r], Affine{std::vector<Rational>(k), target});
    }
    report.placeholder_units = system.solution();
    return report;
}

std::size_t count_inconsistencies(const expr::Skeleton& s, const UnitMap& units, const UnitVector& target,
                                  const std::vector<UnitVector>& placeholder_units)
{
    using expr::NodeKind;
    const auto& nodes = s.nodes();
    std::vector<UnitVector> u(nodes.size());
    std::size_t bad = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const auto& n = nodes[i];
        switch (n.kind) {
        case NodeKind::Add:
        case NodeKind::Sub:
            bad += u[n.lhs] == u[n.rhs] ? 0 : 1;
            u[i] = u[n.lhs];
            break;
        case NodeKind::Mul: u[i] = u[n.lhs] + u[n.rhs]; break;
        case NodeKind::Div: u[i] = u[n.lhs] - u[n.rhs]; break;
        case NodeKind::Pow: u[i] = Rational(static_cast<std::int64_t>(nodes[n.rhs].value)) * u[n.lhs]; break;
        case NodeKind::Neg: u[i] = u[n.lhs]; break;
        case NodeKind::Call:
            if (expr::is_transcendental(n.func)) {
                bad += u[n.lhs].dimensionless() ? 0 : 1;
                u[i] = UnitVector{};
            } else {
                u[i] = n.func == expr::Func::Sqrt ? Rational(1, 2) * u[n.lhs] : u[n.lhs];
            }
            break;
        case NodeKind::Variable: u[i] = variable_unit(s, n, units); break;
        case NodeKind::Coefficient: u[i] = placeholder_units.at(static_cast<std::size_t>(n.slot)); break;
        case NodeKind::Constant: break;
        }
    }
    for (const auto r : s.roots()) {
        bad += u[r] == target ? 0 : 1;
    }
    return bad;
}

}  // namespace pitpo::units
