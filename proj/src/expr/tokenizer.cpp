#include "pitpo/expr.hpp"

#include <array>
#include <cctype>

#include <fmt/core.h>

namespace pitpo::expr {

ParseError::ParseError(Kind kind, std::size_t offset, const std::string& message)
    : std::runtime_error(fmt::format("{} (at byte {})", message, offset)), kind_(kind), offset_(offset)
{
}

std::string_view to_string(TokenKind kind)
{
    switch (kind) {
    case TokenKind::Variable: return "variable";
    case TokenKind::Coefficient: return "coefficient";
    case TokenKind::Operator: return "operator";
    case TokenKind::Function: return "function";
    case TokenKind::Constant: return "constant";
    case TokenKind::Paren: return "paren";
    }
    return "unknown";
}

namespace {
constexpr std::array<std::string_view, kFunctionCount> kFunctionNames{"exp", "log", "sin", "cos", "tanh", "sqrt", "abs"};

bool is_placeholder(std::string_view ident)
{
    if (ident.size() < 2 || ident[0] != 'c') {
        return false;
    }
    for (std::size_t i = 1; i < ident.size(); ++i) {
        if (std::isdigit(static_cast<unsigned char>(ident[i])) == 0) {
            return false;
        }
    }
    return true;
}
}  // namespace

std::string_view function_name(Func f) { return kFunctionNames[static_cast<std::size_t>(f)]; }

std::optional<Func> function_from_name(std::string_view name)
{
    for (std::size_t i = 0; i < kFunctionNames.size(); ++i) {
        if (kFunctionNames[i] == name) {
            return static_cast<Func>(i);
        }
    }
    return std::nullopt;
}

bool is_transcendental(Func f) { return f != Func::Sqrt && f != Func::Abs; }

std::vector<Token> tokenize(std::string_view text)
{
    std::vector<Token> out;
    std::size_t i = 0;
    auto push = [&](TokenKind kind, std::size_t begin, std::size_t end) {
        out.push_back(Token{kind, std::string(text.substr(begin, end - begin)), out.size(), begin});
    };
    auto scan_digits = [&](std::size_t j) {
        while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j])) != 0) {
            ++j;
        }
        return j;
    };

    while (i < text.size()) {
        const char ch = text[i];
        if (std::isspace(static_cast<unsigned char>(ch)) != 0) {
            ++i;
            continue;
        }
        if (std::isdigit(static_cast<unsigned char>(ch)) != 0
            || (ch == '.' && i + 1 < text.size() && std::isdigit(static_cast<unsigned char>(text[i + 1])) != 0)) {
            std::size_t j = scan_digits(i);
            if (j < text.size() && text[j] == '.') {
                j = scan_digits(j + 1);
            }
            if (j < text.size() && (text[j] == 'e' || text[j] == 'E')) {
                std::size_t k = j + 1;
                if (k < text.size() && (text[k] == '+' || text[k] == '-')) {
                    ++k;
                }
                const std::size_t m = scan_digits(k);
                if (m == k) {
                    throw ParseError(ParseError::Kind::Syntax, j, "malformed exponent in numeric literal");
                }
                j = m;
            }
            push(TokenKind::Constant, i, j);
            i = j;
            continue;
        }
        if (std::isalpha(static_cast<unsigned char>(ch)) != 0 || ch == '_') {
            std::size_t j = i + 1;
            while (j < text.size() && (std::isalnum(static_cast<unsigned char>(text[j])) != 0 || text[j] == '_')) {
                ++j;
            }
            const auto ident = text.substr(i, j - i);
            TokenKind kind = TokenKind::Variable;
            if (is_placeholder(ident)) {
                kind = TokenKind::Coefficient;
            } else if (function_from_name(ident)) {
                kind = TokenKind::Function;
            }
            push(kind, i, j);
            i = j;
            continue;
        }
        switch (ch) {
        case '+':
        case '-':
        case '*':
        case '/':
        case ';':
            push(TokenKind::Operator, i, i + 1);
            ++i;
            break;
        case '^': {
            push(TokenKind::Operator, i, i + 1);
            ++i;
            // the exponent is a signed integer literal, kept as one token
            std::size_t j = i;
            while (j < text.size() && std::isspace(static_cast<unsigned char>(text[j])) != 0) {
                ++j;
            }
            std::size_t k = j;
            if (k < text.size() && text[k] == '-') {
                ++k;
            }
            const std::size_t m = scan_digits(k);
            if (m > k) {
                push(TokenKind::Constant, j, m);
                i = m;
            }
            break;
        }
        case '(':
        case ')':
            push(TokenKind::Paren, i, i + 1);
            ++i;
            break;
        default:
            throw ParseError(ParseError::Kind::Syntax, i, fmt::format("unexpected character '{}'", ch));
        }
    }
    return out;
}

std::string join_tokens(std::span<const Token> tokens)
{
    std::string out;
    bool prev_operand = false;
    for (const auto& tok : tokens) {
        const bool binary = tok.kind == TokenKind::Operator && (tok.text == "+" || tok.text == "-") && prev_operand;
        if (binary) {
            out += ' ';
            out += tok.text;
            out += ' ';
        } else if (tok.kind == TokenKind::Operator && tok.text == ";") {
            out += "; ";
        } else {
            out += tok.text;
        }
        prev_operand = tok.kind == TokenKind::Variable || tok.kind == TokenKind::Coefficient
            || tok.kind == TokenKind::Constant || (tok.kind == TokenKind::Paren && tok.text == ")");
    }
    return out;
}

}  // namespace pitpo::expr
