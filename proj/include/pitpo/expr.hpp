#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace pitpo::expr {

class ParseError : public std::runtime_error {
public:
    enum class Kind { Syntax, UnknownIdentifier, PlaceholderGap, DuplicatePlaceholder };

    ParseError(Kind kind, std::size_t offset, const std::string& message);

    [[nodiscard]] Kind kind() const noexcept { return kind_; }
    // byte offset into the source text
    [[nodiscard]] std::size_t offset() const noexcept { return offset_; }

private:
    Kind kind_;
    std::size_t offset_;
};

enum class TokenKind : std::uint8_t { Variable, Coefficient, Operator, Function, Constant, Paren };

std::string_view to_string(TokenKind kind);

struct Token {
    TokenKind kind{TokenKind::Operator};
    std::string text;
    std::size_t index{0};
    std::size_t offset{0};

    // Tokens compare by kind and text; positions are provenance only.
    friend bool operator==(const Token& a, const Token& b) { return a.kind == b.kind && a.text == b.text; }
};

std::vector<Token> tokenize(std::string_view text);

// Joins token texts with the canonical spacing used by the printer.
std::string join_tokens(std::span<const Token> tokens);

enum class Func : std::uint8_t { Exp, Log, Sin, Cos, Tanh, Sqrt, Abs };

inline constexpr std::size_t kFunctionCount = 7;

std::string_view function_name(Func f);
std::optional<Func> function_from_name(std::string_view name);
// exp, log, sin, cos, tanh require dimensionless arguments
bool is_transcendental(Func f);

enum class NodeKind : std::uint8_t { Add, Sub, Mul, Div, Pow, Neg, Call, Variable, Coefficient, Constant };

// Flat arena node. Children always precede their parent in the arena, so a
// forward sweep over the node vector is a valid evaluation order.
struct Node {
    NodeKind kind{NodeKind::Constant};
    Func func{Func::Exp};
    std::int32_t lhs{-1};
    std::int32_t rhs{-1};
    std::int32_t slot{0};   // variable column or coefficient ordinal
    double value{0.0};      // constant value; Pow stores its exponent in a Constant rhs
    std::int32_t op_token{-1};
    std::int32_t first_token{-1};
    std::int32_t last_token{-1};
};

// One top-level additive summand: sign * [coefficient] * basis.
struct Term {
    std::size_t output{0};
    std::int32_t root{-1};
    int sign{1};
    std::optional<std::size_t> coefficient;  // leading support coefficient ordinal
    std::int32_t coefficient_node{-1};
    std::vector<std::size_t> span;           // token indices, sorted
};

class Skeleton {
public:
    Skeleton() = default;

    [[nodiscard]] const std::vector<Node>& nodes() const noexcept { return nodes_; }
    [[nodiscard]] const std::vector<std::int32_t>& roots() const noexcept { return roots_; }
    [[nodiscard]] std::size_t outputs() const noexcept { return roots_.size(); }
    [[nodiscard]] const std::vector<Token>& tokens() const noexcept { return tokens_; }
    [[nodiscard]] const std::vector<std::string>& variables() const noexcept { return variables_; }
    [[nodiscard]] std::size_t coeff_count() const noexcept { return coeff_count_; }
    [[nodiscard]] const std::vector<Term>& terms() const noexcept { return terms_; }

    // token index -> term index (nullopt for tokens outside every span)
    [[nodiscard]] std::vector<std::optional<std::size_t>> token_terms() const;

    // Placeholders that are not the leading coefficient of any term.
    [[nodiscard]] std::vector<std::size_t> shape_parameters() const;

    // True when every placeholder is a leading support coefficient, i.e. the
    // model is linear in its coefficients.
    [[nodiscard]] bool linear_in_coefficients() const { return shape_parameters().empty(); }

    [[nodiscard]] std::string text() const;

private:
    friend class Parser;
    friend Skeleton make_skeleton(std::vector<Node> nodes, std::vector<std::int32_t> roots,
                                  std::vector<std::string> variables);

    void finalize();

    std::vector<Node> nodes_;
    std::vector<std::int32_t> roots_;
    std::vector<Token> tokens_;
    std::vector<std::string> variables_;
    std::size_t coeff_count_{0};
    std::vector<Term> terms_;
};

// Parses a DSL program. Without a variable list, identifiers are declared in
// order of first appearance; with one, any other identifier is an error.
Skeleton parse(std::string_view text);
Skeleton parse(std::string_view text, std::span<const std::string> variables);

// Builds a skeleton from an arena by printing and re-parsing it, so tokens and
// spans are always those of the canonical text.
Skeleton make_skeleton(std::vector<Node> nodes, std::vector<std::int32_t> roots, std::vector<std::string> variables);

std::string print(const Skeleton& s);
std::string print_subtree(const std::vector<Node>& nodes, std::int32_t root, std::span<const std::string> variables);

bool structurally_equal(const Skeleton& a, const Skeleton& b);

// AST node count; every operator, function, variable, placeholder and literal is one node.
std::size_t complexity(const Skeleton& s);

struct Basis {
    std::string text;                        // printed basis function phi_j
    std::optional<std::size_t> coefficient;  // nullopt: implicit unit coefficient
    int sign{1};
    std::size_t output{0};
};

std::vector<Basis> decompose_terms(const Skeleton& s);

// Evaluation. X is N x d with columns in s.variables() order.
Eigen::ArrayXXd evaluate_outputs(const Skeleton& s, std::span<const double> coeffs, const Eigen::MatrixXd& X);
Eigen::ArrayXd evaluate(const Skeleton& s, std::span<const double> coeffs, const Eigen::MatrixXd& X);

struct Evaluation {
    Eigen::ArrayXXd values;                 // N x outputs
    std::vector<Eigen::ArrayXXd> jacobian;  // per output: N x coeff_count
};

Eigen::ArrayXd evaluate_node(const Skeleton& s, std::int32_t node, std::span<const double> coeffs,
                             const Eigen::MatrixXd& X);

// Values and forward-mode derivatives with respect to every coefficient.
Evaluation evaluate_with_jacobian(const Skeleton& s, std::span<const double> coeffs, const Eigen::MatrixXd& X);

// phi_j: the term's summand with its leading coefficient set to one.
Eigen::ArrayXd evaluate_basis(const Skeleton& s, const Term& term, std::span<const double> coeffs,
                              const Eigen::MatrixXd& X);

}  // namespace pitpo::expr
