#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "pitpo/expr.hpp"

namespace pitpo::units {

// Exact rational with a positive, reduced denominator.
class Rational {
public:
    constexpr Rational() = default;
    Rational(std::int64_t num, std::int64_t den = 1);

    [[nodiscard]] std::int64_t num() const noexcept { return num_; }
    [[nodiscard]] std::int64_t den() const noexcept { return den_; }
    [[nodiscard]] bool is_zero() const noexcept { return num_ == 0; }

    friend Rational operator+(Rational a, Rational b);
    friend Rational operator-(Rational a, Rational b);
    friend Rational operator*(Rational a, Rational b);
    friend Rational operator/(Rational a, Rational b);
    friend Rational operator-(Rational a) { return {-a.num_, a.den_}; }
    friend bool operator==(const Rational& a, const Rational& b) = default;

    [[nodiscard]] std::string str() const;

private:
    std::int64_t num_{0};
    std::int64_t den_{1};
};

enum class Base : std::uint8_t { Length, Mass, Time, Temperature, Amount, Current, Luminosity };
inline constexpr std::size_t kBaseCount = 7;

struct UnitVector {
    std::array<Rational, kBaseCount> exponents{};

    [[nodiscard]] bool dimensionless() const;
    [[nodiscard]] std::string str() const;

    // Parses products/quotients of base symbols: "m", "m/s", "kg*m^2/s^2", "1".
    // Symbols: m kg s K mol A cd.
    static UnitVector parse(std::string_view text);
    static UnitVector of(Base b, Rational power = 1);

    friend UnitVector operator+(const UnitVector& a, const UnitVector& b);
    friend UnitVector operator-(const UnitVector& a, const UnitVector& b);
    friend UnitVector operator*(Rational k, const UnitVector& u);
    friend bool operator==(const UnitVector& a, const UnitVector& b) = default;
};

using UnitMap = std::map<std::string, UnitVector>;

struct DimensionReport {
    std::size_t violations{0};
    // concrete unit for every placeholder under which all accepted constraints hold
    std::vector<UnitVector> placeholder_units;
};

// Counts dimensional violations: additive operands with unequal units,
// transcendental functions of dimensioned arguments, and a root unit that
// differs from the target. Placeholders are free unit variables; a constraint
// is a violation only when it cannot be satisfied jointly with the ones
// already accepted.
DimensionReport check_dimensions(const expr::Skeleton& s, const UnitMap& units, const UnitVector& target);

// Forward propagation with fixed placeholder units; returns the number of
// inconsistent nodes (additions, transcendental arguments, root vs target).
std::size_t count_inconsistencies(const expr::Skeleton& s, const UnitMap& units, const UnitVector& target,
                                  const std::vector<UnitVector>& placeholder_units);

}  // namespace pitpo::units
