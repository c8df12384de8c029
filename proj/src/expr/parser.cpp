#include "pitpo/expr.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <map>

#include <fmt/core.h>

namespace pitpo::expr {

class Parser {
public:
    Parser(std::string_view text, std::optional<std::span<const std::string>> variables)
        : text_(text), tokens_(tokenize(text))
    {
        if (variables) {
            fixed_variables_ = true;
            variables_.assign(variables->begin(), variables->end());
        }
    }

    Skeleton run()
    {
        if (tokens_.empty()) {
            throw ParseError(ParseError::Kind::Syntax, 0, "empty program");
        }
        Skeleton s;
        roots_.push_back(expression());
        while (at_operator(";")) {
            ++pos_;
            roots_.push_back(expression());
        }
        if (pos_ < tokens_.size()) {
            throw syntax_error("unexpected token '" + tokens_[pos_].text + "'");
        }
        check_placeholders();
        s.nodes_ = std::move(nodes_);
        s.roots_ = std::move(roots_);
        s.tokens_ = std::move(tokens_);
        s.variables_ = std::move(variables_);
        s.coeff_count_ = placeholder_count_;
        s.finalize();
        return s;
    }

private:
    [[nodiscard]] std::size_t offset_here() const
    {
        return pos_ < tokens_.size() ? tokens_[pos_].offset : text_.size();
    }

    [[nodiscard]] ParseError syntax_error(const std::string& what) const
    {
        return {ParseError::Kind::Syntax, offset_here(), what};
    }

    [[nodiscard]] bool at_operator(std::string_view op) const
    {
        return pos_ < tokens_.size() && tokens_[pos_].kind == TokenKind::Operator && tokens_[pos_].text == op;
    }

    [[nodiscard]] bool at_paren(char p) const
    {
        return pos_ < tokens_.size() && tokens_[pos_].kind == TokenKind::Paren && tokens_[pos_].text[0] == p;
    }

    std::int32_t add(Node n)
    {
        nodes_.push_back(n);
        return static_cast<std::int32_t>(nodes_.size() - 1);
    }

    std::int32_t binary(NodeKind kind, std::int32_t lhs, std::int32_t rhs, std::size_t op_token)
    {
        Node n;
        n.kind = kind;
        n.lhs = lhs;
        n.rhs = rhs;
        n.op_token = static_cast<std::int32_t>(op_token);
        n.first_token = nodes_[lhs].first_token;
        n.last_token = nodes_[rhs].last_token;
        return add(n);
    }

    std::int32_t expression()
    {
        auto lhs = term();
        while (at_operator("+") || at_operator("-")) {
            const auto op = pos_++;
            const auto kind = tokens_[op].text == "+" ? NodeKind::Add : NodeKind::Sub;
            const auto rhs = term();
            lhs = binary(kind, lhs, rhs, op);
        }
        return lhs;
    }

    std::int32_t term()
    {
        auto lhs = unary();
        while (at_operator("*") || at_operator("/")) {
            const auto op = pos_++;
            const auto kind = tokens_[op].text == "*" ? NodeKind::Mul : NodeKind::Div;
            const auto rhs = unary();
            lhs = binary(kind, lhs, rhs, op);
        }
        return lhs;
    }

    std::int32_t unary()
    {
        if (at_operator("-")) {
            const auto op = pos_++;
            const auto child = unary();
            Node n;
            n.kind = NodeKind::Neg;
            n.lhs = child;
            n.op_token = static_cast<std::int32_t>(op);
            n.first_token = static_cast<std::int32_t>(op);
            n.last_token = nodes_[child].last_token;
            return add(n);
        }
        return power();
    }

    std::int32_t power()
    {
        const auto base = primary();
        if (!at_operator("^")) {
            return base;
        }
        const auto op = pos_++;
        if (pos_ >= tokens_.size() || tokens_[pos_].kind != TokenKind::Constant) {
            throw syntax_error("exponent must be an integer literal");
        }
        const auto& tok = tokens_[pos_];
        int exponent = 0;
        const auto* first = tok.text.data();
        const auto* last = first + tok.text.size();
        const auto [ptr, ec] = std::from_chars(first, last, exponent);
        if (ec != std::errc{} || ptr != last || exponent < -3 || exponent > 3) {
            throw syntax_error("exponent must be an integer literal in [-3, 3]");
        }
        Node e;
        e.kind = NodeKind::Constant;
        e.value = exponent;
        e.first_token = e.last_token = static_cast<std::int32_t>(pos_);
        ++pos_;
        const auto rhs = add(e);
        return binary(NodeKind::Pow, base, rhs, op);
    }

    std::int32_t primary()
    {
        if (pos_ >= tokens_.size()) {
            throw syntax_error("unexpected end of input");
        }
        const auto here = pos_;
        const auto& tok = tokens_[pos_];
        Node n;
        n.first_token = n.last_token = static_cast<std::int32_t>(here);
        switch (tok.kind) {
        case TokenKind::Constant: {
            ++pos_;
            n.kind = NodeKind::Constant;
            n.value = std::strtod(tok.text.c_str(), nullptr);
            return add(n);
        }
        case TokenKind::Coefficient: {
            ++pos_;
            n.kind = NodeKind::Coefficient;
            n.slot = std::atoi(tok.text.c_str() + 1);
            return add(n);
        }
        case TokenKind::Variable: {
            if (here + 1 < tokens_.size() && tokens_[here + 1].kind == TokenKind::Paren && tokens_[here + 1].text == "(") {
                throw ParseError(ParseError::Kind::UnknownIdentifier, tok.offset, "unknown function '" + tok.text + "'");
            }
            ++pos_;
            n.kind = NodeKind::Variable;
            n.slot = variable_slot(tok);
            return add(n);
        }
        case TokenKind::Function: {
            ++pos_;
            if (!at_paren('(')) {
                throw syntax_error("expected '(' after function name");
            }
            ++pos_;
            const auto arg = expression();
            if (!at_paren(')')) {
                throw syntax_error("expected ')'");
            }
            n.kind = NodeKind::Call;
            n.func = *function_from_name(tok.text);
            n.lhs = arg;
            n.op_token = static_cast<std::int32_t>(here);
            n.last_token = static_cast<std::int32_t>(pos_);
            ++pos_;
            return add(n);
        }
        case TokenKind::Paren: {
            if (tok.text != "(") {
                break;
            }
            ++pos_;
            const auto inner = expression();
            if (!at_paren(')')) {
                throw syntax_error("expected ')'");
            }
            nodes_[inner].first_token = static_cast<std::int32_t>(here);
            nodes_[inner].last_token = static_cast<std::int32_t>(pos_);
            ++pos_;
            return inner;
        }
        case TokenKind::Operator:
            break;
        }
        throw syntax_error("unexpected token '" + tok.text + "'");
    }

    std::int32_t variable_slot(const Token& tok)
    {
        const auto it = std::find(variables_.begin(), variables_.end(), tok.text);
        if (it != variables_.end()) {
            return static_cast<std::int32_t>(it - variables_.begin());
        }
        if (fixed_variables_) {
            throw ParseError(ParseError::Kind::UnknownIdentifier, tok.offset, "unknown identifier '" + tok.text + "'");
        }
        variables_.push_back(tok.text);
        return static_cast<std::int32_t>(variables_.size() - 1);
    }

    void check_placeholders()
    {
        std::map<int, std::size_t> seen;  // ordinal -> byte offset
        for (const auto& n : nodes_) {
            if (n.kind != NodeKind::Coefficient) {
                continue;
            }
            const auto offset = tokens_[n.first_token].offset;
            if (!seen.emplace(n.slot, offset).second) {
                throw ParseError(ParseError::Kind::DuplicatePlaceholder, offset,
                                 fmt::format("placeholder c{} appears more than once", n.slot));
            }
        }
        int expected = 0;
        for (const auto& [ordinal, offset] : seen) {
            if (ordinal != expected) {
                throw ParseError(ParseError::Kind::PlaceholderGap, offset,
                                 fmt::format("placeholder c{} used but c{} is missing", ordinal, expected));
            }
            ++expected;
        }
        placeholder_count_ = seen.size();
    }

    std::string_view text_;
    std::vector<Token> tokens_;
    std::size_t pos_{0};
    std::vector<Node> nodes_;
    std::vector<std::int32_t> roots_;
    std::vector<std::string> variables_;
    bool fixed_variables_{false};
    std::size_t placeholder_count_{0};
};

Skeleton parse(std::string_view text) { return Parser(text, std::nullopt).run(); }

Skeleton parse(std::string_view text, std::span<const std::string> variables)
{
    return Parser(text, variables).run();
}

}  // namespace pitpo::expr
