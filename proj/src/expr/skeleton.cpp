#include "pitpo/expr.hpp"

#include <algorithm>
#include <set>

#include <fmt/core.h>

namespace pitpo::expr {

namespace {

int precedence(NodeKind kind)
{
    switch (kind) {
    case NodeKind::Add:
    case NodeKind::Sub: return 1;
    case NodeKind::Mul:
    case NodeKind::Div: return 2;
    case NodeKind::Neg: return 3;
    case NodeKind::Pow: return 4;
    default: return 5;
    }
}

std::string format_constant(double v)
{
    return fmt::format("{}", v);
}

class Printer {
public:
    Printer(const std::vector<Node>& nodes, std::span<const std::string> variables)
        : nodes_(nodes), variables_(variables)
    {
    }

    std::string operator()(std::int32_t i) const
    {
        const auto& n = nodes_[i];
        switch (n.kind) {
        case NodeKind::Add:
        case NodeKind::Sub:
        case NodeKind::Mul:
        case NodeKind::Div: {
            const int p = precedence(n.kind);
            const char* op = n.kind == NodeKind::Add ? " + " : n.kind == NodeKind::Sub ? " - " : n.kind == NodeKind::Mul ? "*" : "/";
            return wrap(n.lhs, precedence(nodes_[n.lhs].kind) < p) + op + wrap(n.rhs, precedence(nodes_[n.rhs].kind) <= p);
        }
        case NodeKind::Neg:
            return "-" + wrap(n.lhs, precedence(nodes_[n.lhs].kind) < 3);
        case NodeKind::Pow:
            return wrap(n.lhs, precedence(nodes_[n.lhs].kind) < 5) + "^"
                + fmt::format("{}", static_cast<int>(nodes_[n.rhs].value));
        case NodeKind::Call:
            return std::string(function_name(n.func)) + "(" + (*this)(n.lhs) + ")";
        case NodeKind::Variable:
            return variables_[static_cast<std::size_t>(n.slot)];
        case NodeKind::Coefficient:
            return fmt::format("c{}", n.slot);
        case NodeKind::Constant:
            return format_constant(n.value);
        }
        return {};
    }

private:
    [[nodiscard]] std::string wrap(std::int32_t i, bool parens) const
    {
        return parens ? "(" + (*this)(i) + ")" : (*this)(i);
    }

    const std::vector<Node>& nodes_;
    std::span<const std::string> variables_;
};

bool subtree_equal(const Skeleton& a, std::int32_t i, const Skeleton& b, std::int32_t j)
{
    const auto& x = a.nodes()[i];
    const auto& y = b.nodes()[j];
    if (x.kind != y.kind) {
        return false;
    }
    switch (x.kind) {
    case NodeKind::Variable:
        return a.variables()[static_cast<std::size_t>(x.slot)] == b.variables()[static_cast<std::size_t>(y.slot)];
    case NodeKind::Coefficient:
        return x.slot == y.slot;
    case NodeKind::Constant:
        return x.value == y.value;
    case NodeKind::Call:
        return x.func == y.func && subtree_equal(a, x.lhs, b, y.lhs);
    case NodeKind::Neg:
        return subtree_equal(a, x.lhs, b, y.lhs);
    default:
        return subtree_equal(a, x.lhs, b, y.lhs) && subtree_equal(a, x.rhs, b, y.rhs);
    }
}

// Left-to-right multiplicative factors of a summand (Mul operands, Div
// numerators, through Neg). Denominators are not linear factors.
void collect_factors(const std::vector<Node>& nodes, std::int32_t i, std::vector<std::int32_t>& out)
{
    const auto& n = nodes[i];
    switch (n.kind) {
    case NodeKind::Mul:
        collect_factors(nodes, n.lhs, out);
        collect_factors(nodes, n.rhs, out);
        break;
    case NodeKind::Div:
        collect_factors(nodes, n.lhs, out);
        break;
    case NodeKind::Neg:
        collect_factors(nodes, n.lhs, out);
        break;
    default:
        out.push_back(i);
    }
}

bool contains(const std::vector<Node>& nodes, std::int32_t root, std::int32_t target)
{
    if (root == target) {
        return true;
    }
    const auto& n = nodes[root];
    return (n.lhs >= 0 && contains(nodes, n.lhs, target)) || (n.rhs >= 0 && contains(nodes, n.rhs, target));
}

class SubtreeCopier {
public:
    explicit SubtreeCopier(const std::vector<Node>& src) : src_(src) {}

    std::int32_t copy(std::int32_t i)
    {
        Node n = src_[i];
        if (n.lhs >= 0) {
            n.lhs = copy(n.lhs);
        }
        if (n.rhs >= 0) {
            n.rhs = copy(n.rhs);
        }
        return push(n);
    }

    // Copy of the summand with one multiplicative factor removed.
    std::int32_t strip(std::int32_t i, std::int32_t factor)
    {
        if (i == factor) {
            return one();
        }
        const auto& n = src_[i];
        switch (n.kind) {
        case NodeKind::Mul: {
            if (contains(src_, n.lhs, factor)) {
                const auto l = strip(n.lhs, factor);
                const auto r = copy(n.rhs);
                return is_one(l) ? r : make(NodeKind::Mul, l, r);
            }
            const auto l = copy(n.lhs);
            const auto r = strip(n.rhs, factor);
            return is_one(r) ? l : make(NodeKind::Mul, l, r);
        }
        case NodeKind::Div:
            return make(NodeKind::Div, strip(n.lhs, factor), copy(n.rhs));
        case NodeKind::Neg:
            return make(NodeKind::Neg, strip(n.lhs, factor), -1);
        default:
            return copy(i);
        }
    }

    std::vector<Node> nodes;

private:
    std::int32_t push(Node n)
    {
        nodes.push_back(n);
        return static_cast<std::int32_t>(nodes.size() - 1);
    }

    std::int32_t one()
    {
        Node n;
        n.kind = NodeKind::Constant;
        n.value = 1.0;
        return push(n);
    }

    [[nodiscard]] bool is_one(std::int32_t i) const
    {
        return nodes[i].kind == NodeKind::Constant && nodes[i].value == 1.0;
    }

    std::int32_t make(NodeKind kind, std::int32_t lhs, std::int32_t rhs)
    {
        Node n;
        n.kind = kind;
        n.lhs = lhs;
        n.rhs = rhs;
        return push(n);
    }

    const std::vector<Node>& src_;
};

}  // namespace

void Skeleton::finalize()
{
    terms_.clear();
    std::vector<std::size_t> pending;

    auto emit = [&](std::size_t output, std::int32_t root, int sign) {
        Term t;
        t.output = output;
        t.root = root;
        t.sign = sign;
        std::vector<std::int32_t> factors;
        collect_factors(nodes_, root, factors);
        for (const auto f : factors) {
            if (nodes_[f].kind == NodeKind::Coefficient) {
                t.coefficient = static_cast<std::size_t>(nodes_[f].slot);
                t.coefficient_node = f;
                break;
            }
        }
        const auto& n = nodes_[root];
        for (auto k = n.first_token; k <= n.last_token; ++k) {
            t.span.push_back(static_cast<std::size_t>(k));
        }
        t.span.insert(t.span.end(), pending.begin(), pending.end());
        pending.clear();
        terms_.push_back(std::move(t));
    };

    auto flatten = [&](auto&& self, std::size_t output, std::int32_t i, int sign) -> void {
        const auto& n = nodes_[i];
        switch (n.kind) {
        case NodeKind::Add:
        case NodeKind::Sub:
            self(self, output, n.lhs, sign);
            pending.push_back(static_cast<std::size_t>(n.op_token));
            self(self, output, n.rhs, n.kind == NodeKind::Add ? sign : -sign);
            break;
        case NodeKind::Neg:
            pending.push_back(static_cast<std::size_t>(n.op_token));
            self(self, output, n.lhs, -sign);
            break;
        default:
            emit(output, i, sign);
        }
    };

    for (std::size_t o = 0; o < roots_.size(); ++o) {
        flatten(flatten, o, roots_[o], 1);
    }

    // Tokens not covered yet (grouping parens, ';'): '(' joins the next term,
    // ')' the previous one, anything else the next one.
    std::vector<std::int64_t> owner(tokens_.size(), -1);
    for (std::size_t t = 0; t < terms_.size(); ++t) {
        for (const auto k : terms_[t].span) {
            owner[k] = static_cast<std::int64_t>(t);
        }
    }
    for (std::size_t k = 0; k < tokens_.size(); ++k) {
        if (owner[k] >= 0) {
            continue;
        }
        std::int64_t next = -1;
        std::int64_t prev = -1;
        for (std::size_t j = k + 1; j < tokens_.size() && next < 0; ++j) {
            next = owner[j];
        }
        for (std::size_t j = k; j-- > 0 && prev < 0;) {
            prev = owner[j];
        }
        const bool closing = tokens_[k].kind == TokenKind::Paren && tokens_[k].text == ")";
        const auto chosen = closing ? (prev >= 0 ? prev : next) : (next >= 0 ? next : prev);
        if (chosen >= 0) {
            terms_[static_cast<std::size_t>(chosen)].span.push_back(k);
        }
    }
    for (auto& t : terms_) {
        std::sort(t.span.begin(), t.span.end());
    }
}

std::vector<std::optional<std::size_t>> Skeleton::token_terms() const
{
    std::vector<std::optional<std::size_t>> map(tokens_.size());
    for (std::size_t t = 0; t < terms_.size(); ++t) {
        for (const auto k : terms_[t].span) {
            map[k] = t;
        }
    }
    return map;
}

std::vector<std::size_t> Skeleton::shape_parameters() const
{
    std::set<std::size_t> leading;
    for (const auto& t : terms_) {
        if (t.coefficient) {
            leading.insert(*t.coefficient);
        }
    }
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < coeff_count_; ++c) {
        if (leading.count(c) == 0) {
            out.push_back(c);
        }
    }
    return out;
}

std::string Skeleton::text() const { return print(*this); }

std::string print_subtree(const std::vector<Node>& nodes, std::int32_t root, std::span<const std::string> variables)
{
    return Printer(nodes, variables)(root);
}

std::string print(const Skeleton& s)
{
    std::string out;
    const Printer printer(s.nodes(), s.variables());
    for (std::size_t o = 0; o < s.roots().size(); ++o) {
        if (o > 0) {
            out += "; ";
        }
        out += printer(s.roots()[o]);
    }
    return out;
}

Skeleton make_skeleton(std::vector<Node> nodes, std::vector<std::int32_t> roots, std::vector<std::string> variables)
{
    std::string text;
    const Printer printer(nodes, variables);
    for (std::size_t o = 0; o < roots.size(); ++o) {
        if (o > 0) {
            text += "; ";
        }
        text += printer(roots[o]);
    }
    return parse(text, variables);
}

bool structurally_equal(const Skeleton& a, const Skeleton& b)
{
    if (a.roots().size() != b.roots().size() || a.coeff_count() != b.coeff_count()) {
        return false;
    }
    for (std::size_t o = 0; o < a.roots().size(); ++o) {
        if (!subtree_equal(a, a.roots()[o], b, b.roots()[o])) {
            return false;
        }
    }
    return true;
}

std::size_t complexity(const Skeleton& s) { return s.nodes().size(); }

std::vector<Basis> decompose_terms(const Skeleton& s)
{
    std::vector<Basis> out;
    out.reserve(s.terms().size());
    for (const auto& t : s.terms()) {
        Basis b;
        b.coefficient = t.coefficient;
        b.sign = t.sign;
        b.output = t.output;
        SubtreeCopier copier(s.nodes());
        const auto root = t.coefficient ? copier.strip(t.root, t.coefficient_node) : copier.copy(t.root);
        b.text = print_subtree(copier.nodes, root, s.variables());
        out.push_back(std::move(b));
    }
    return out;
}

}  // namespace pitpo::expr
