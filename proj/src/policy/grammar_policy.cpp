#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <fmt/core.h>

#include "pitpo/policy.hpp"

namespace pitpo::policy {

namespace {

const char* kind_name(StateKind k)
{
    switch (k) {
    case StateKind::Sum: return "sum";
    case StateKind::Term: return "term";
    case StateKind::Factor: return "factor";
    case StateKind::More: return "more";
    case StateKind::Arg: return "arg";
    }
    return "?";
}

std::vector<std::string> token_texts(std::string_view text)
{
    std::vector<std::string> out;
    for (const auto& t : expr::tokenize(text)) {
        out.push_back(t.text);
    }
    return out;
}

std::string join(const std::vector<std::string>& toks)
{
    std::string out;
    for (const auto& t : toks) {
        if (t == "+" || t == "-") {
            out += " " + t + " ";
        } else if (t == ";") {
            out += "; ";
        } else {
            out += t;
        }
    }
    return out;
}

// Factor alphabet at a given depth.
struct FactorProduction {
    std::string label;
    std::vector<std::string> tokens;  // emitted before any argument
    bool call{false};
};

std::vector<FactorProduction> factor_productions(const GrammarSpec& g, int depth)
{
    std::vector<FactorProduction> out;
    if (!g.atoms.empty() && depth == 0) {
        for (const auto& a : g.atoms) {
            out.push_back({a, token_texts(a), false});
        }
        return out;
    }
    for (const auto& v : g.variables) {
        out.push_back({v, {v}, false});
    }
    for (const auto& v : g.variables) {
        for (const int e : g.exponents) {
            out.push_back({fmt::format("{}^{}", v, e), {v, "^", std::to_string(e)}, false});
        }
    }
    if (depth < g.max_depth) {
        for (const auto f : g.functions) {
            const std::string name(expr::function_name(f));
            out.push_back({name, {name, "("}, true});
        }
    }
    return out;
}

double logsumexp(const Eigen::VectorXd& z)
{
    const double m = z.maxCoeff();
    return m + std::log((z.array() - m).exp().sum());
}

struct NeedChoice {
    std::uint32_t state;
};
struct Mismatch {};

}  // namespace

struct Generator {
    const GrammarPolicy& P;
    std::function<std::uint32_t(std::uint32_t)> pick;
    std::function<void(std::size_t, const std::string&)> on_emit;
    std::vector<std::string> toks;
    std::vector<Decision> decisions;
    std::size_t pending{0};
    int next_coef{0};

    void emit(std::string t)
    {
        toks.push_back(std::move(t));
        for (; pending < decisions.size(); ++pending) {
            decisions[pending].token = static_cast<std::uint32_t>(toks.size() - 1);
        }
        if (on_emit) {
            on_emit(toks.size() - 1, toks.back());
        }
    }

    const std::string& decide(const std::string& name)
    {
        const auto s = P.id(name);
        const auto& st = P.states_[s];
        std::uint32_t a = 0;
        if (st.labels.size() > 1) {
            a = pick(s);
            decisions.push_back({s, a, 0});
        }
        return st.labels[a];
    }

    void coef() { emit(fmt::format("c{}", next_coef++)); }

    void run()
    {
        const auto& g = P.spec_;
        for (int o = 0; o < g.outputs; ++o) {
            if (o > 0) {
                emit(";");
            }
            for (int t = 0; t < g.max_terms; ++t) {
                if (t > 0) {
                    const auto& op = decide(fmt::format("o{}/sum{}", o, t));
                    if (op == "stop") {
                        break;
                    }
                    emit(op);
                }
                term(fmt::format("o{}/t{}", o, t));
            }
        }
        for (; pending < decisions.size(); ++pending) {
            decisions[pending].token = static_cast<std::uint32_t>(toks.size() - 1);
        }
    }

    void term(const std::string& path)
    {
        const auto& kind = decide(path + "/term");
        if (kind == "coef") {
            coef();
            return;
        }
        if (kind == "coef*basis") {
            coef();
            emit("*");
        }
        chain(path, 0);
    }

    void chain(const std::string& path, int depth)
    {
        for (int slot = 0; slot < P.spec_.max_factors; ++slot) {
            if (slot > 0) {
                const auto& op = decide(fmt::format("{}/m{}", path, slot));
                if (op == "end") {
                    break;
                }
                emit(op);
            }
            factor(fmt::format("{}/f{}", path, slot), depth);
        }
    }

    void factor(const std::string& path, int depth)
    {
        const auto& label = decide(path);
        const auto prods = factor_productions(P.spec_, depth);
        const auto it = std::find_if(prods.begin(), prods.end(), [&](const auto& p) { return p.label == label; });
        for (const auto& t : it->tokens) {
            emit(t);
        }
        if (it->call) {
            const auto& arg = decide(path + "/arg");
            if (arg == "scaled") {
                coef();
                emit("*");
            }
            chain(path + "/in", depth + 1);
            emit(")");
        }
    }
};

GrammarPolicy::GrammarPolicy(GrammarSpec spec, double temperature) : spec_(std::move(spec))
{
    set_temperature(temperature);
    if (spec_.variables.empty()) {
        throw std::invalid_argument("grammar: no variables");
    }
    if (spec_.max_terms < 1 || spec_.max_factors < 1 || spec_.max_depth < 0 || spec_.outputs < 1) {
        throw std::invalid_argument("grammar: max_terms, max_factors and outputs must be positive");
    }
    for (int o = 0; o < spec_.outputs; ++o) {
        for (int t = 0; t < spec_.max_terms; ++t) {
            const auto path = fmt::format("o{}/t{}", o, t);
            if (t > 0) {
                std::vector<std::string> ops = {"stop", "+"};
                if (spec_.minus) {
                    ops.emplace_back("-");
                }
                add_state(fmt::format("o{}/sum{}", o, t), StateKind::Sum, ops);
            }
            std::vector<std::string> kinds = {"coef*basis"};
            if (spec_.constant_term) {
                kinds.emplace_back("coef");
            }
            if (spec_.implicit_unit) {
                kinds.emplace_back("basis");
            }
            add_state(path + "/term", StateKind::Term, kinds);
            build_chain(path, 0);
        }
    }
    logits_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(states_.back().offset + states_.back().labels.size()));

    // worst-case token count, bottom up
    std::vector<std::size_t> chain_len(static_cast<std::size_t>(spec_.max_depth) + 2, 0);
    for (int d = spec_.max_depth; d >= 0; --d) {
        std::size_t factor_len = 0;
        for (const auto& p : factor_productions(spec_, d)) {
            std::size_t len = p.tokens.size();
            if (p.call) {
                len += 2 + 1 + chain_len[static_cast<std::size_t>(d) + 1];
            }
            factor_len = std::max(factor_len, len);
        }
        const auto mf = static_cast<std::size_t>(spec_.max_factors);
        chain_len[static_cast<std::size_t>(d)] = mf * factor_len + (mf - 1);
    }
    const std::size_t term_len = 2 + chain_len[0];
    const auto mt = static_cast<std::size_t>(spec_.max_terms);
    const std::size_t out_len = mt * term_len + (mt - 1);
    max_tokens_ = static_cast<std::size_t>(spec_.outputs) * (out_len + 1);
}

void GrammarPolicy::build_chain(const std::string& path, int depth)
{
    const auto prods = factor_productions(spec_, depth);
    std::vector<std::string> labels;
    bool any_call = false;
    for (const auto& p : prods) {
        labels.push_back(p.label);
        any_call = any_call || p.call;
    }
    std::vector<std::string> ops = {"end", "*"};
    if (spec_.atoms.empty() || depth > 0) {
        ops.emplace_back("/");
    }
    for (int slot = 0; slot < spec_.max_factors; ++slot) {
        if (slot > 0) {
            add_state(fmt::format("{}/m{}", path, slot), StateKind::More, ops);
        }
        const auto f = fmt::format("{}/f{}", path, slot);
        add_state(f, StateKind::Factor, labels, depth);
        if (any_call) {
            std::vector<std::string> args = {"plain"};
            if (spec_.shape_parameters) {
                args.emplace_back("scaled");
            }
            add_state(f + "/arg", StateKind::Arg, args, depth + 1);
            build_chain(f + "/in", depth + 1);
        }
    }
}

std::uint32_t GrammarPolicy::add_state(std::string name, StateKind kind, std::vector<std::string> labels, int depth)
{
    StateInfo st;
    st.offset = states_.empty() ? 0 : states_.back().offset + states_.back().labels.size();
    st.name = std::move(name);
    st.kind = kind;
    st.labels = std::move(labels);
    st.depth = depth;
    const auto id = static_cast<std::uint32_t>(states_.size());
    index_.emplace(st.name, id);
    states_.push_back(std::move(st));
    return id;
}

std::uint32_t GrammarPolicy::id(const std::string& name) const
{
    const auto it = index_.find(name);
    if (it == index_.end()) {
        throw std::logic_error("grammar policy: unknown state " + name);
    }
    return it->second;
}

void GrammarPolicy::set_temperature(double t)
{
    if (!(t > 0.0) || !std::isfinite(t)) {
        throw std::invalid_argument("policy temperature must be positive");
    }
    temperature_ = t;
}

Eigen::VectorXd GrammarPolicy::log_probs(std::uint32_t state, const Eigen::VectorXd& bias) const
{
    const auto& st = states_.at(state);
    const auto off = static_cast<Eigen::Index>(st.offset);
    const auto n = static_cast<Eigen::Index>(st.labels.size());
    Eigen::VectorXd z = logits_.segment(off, n);
    if (bias.size() > 0) {
        z += bias.segment(off, n);
    }
    z /= temperature_;
    return z.array() - logsumexp(z);
}

Eigen::VectorXd GrammarPolicy::context_bias(const Elites& elites, double weight) const
{
    Eigen::VectorXd bias = Eigen::VectorXd::Zero(logits_.size());
    if (elites.empty() || weight == 0.0) {
        return bias;
    }
    std::map<std::string, int> counts;
    for (const auto& [text, reward] : elites) {
        std::set<std::string> features;
        try {
            const auto toks = token_texts(text);
            for (std::size_t i = 0; i < toks.size(); ++i) {
                features.insert(toks[i]);
                if (i + 2 < toks.size() && toks[i + 1] == "^") {
                    features.insert(toks[i] + "^" + toks[i + 2]);
                }
            }
            for (const auto& b : expr::decompose_terms(expr::parse(text, spec_.variables))) {
                features.insert(b.text);
            }
        } catch (const std::exception&) {
            continue;
        }
        for (const auto& f : features) {
            ++counts[f];
        }
    }
    const double n = static_cast<double>(elites.size());
    for (const auto& st : states_) {
        if (st.kind != StateKind::Factor) {
            continue;
        }
        for (std::size_t a = 0; a < st.labels.size(); ++a) {
            const auto it = counts.find(st.labels[a]);
            if (it != counts.end()) {
                bias(static_cast<Eigen::Index>(st.offset + a)) = weight * it->second / n;
            }
        }
    }
    return bias;
}

namespace {

SampledProgram finish(const GrammarPolicy& p, Generator& gen, const Eigen::VectorXd& bias)
{
    SampledProgram s;
    s.text = join(gen.toks);
    s.tokens = expr::tokenize(s.text);
    if (s.tokens.size() != gen.toks.size()) {
        throw std::logic_error("grammar policy: emitted tokens do not re-tokenize: " + s.text);
    }
    s.decisions = std::move(gen.decisions);
    const auto sk = expr::parse(s.text, p.spec().variables);
    s.term_token_map = sk.token_terms();
    s.logprobs = p.token_logprobs(s, bias);
    return s;
}

}  // namespace

SampledProgram GrammarPolicy::sample(const Eigen::VectorXd& bias, std::mt19937_64& rng) const
{
    Generator gen{*this, {}, {}, {}, {}, 0, 0};
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    gen.pick = [&](std::uint32_t s) {
        const Eigen::VectorXd p = log_probs(s, bias).array().exp();
        const double u = unit(rng) * p.sum();
        double acc = 0.0;
        for (Eigen::Index a = 0; a < p.size(); ++a) {
            acc += p(a);
            if (u < acc) {
                return static_cast<std::uint32_t>(a);
            }
        }
        // u landed on the rounding tail: last production with nonzero mass
        Eigen::Index a = p.size() - 1;
        while (a > 0 && p(a) == 0.0) {
            --a;
        }
        return static_cast<std::uint32_t>(a);
    };
    gen.run();
    return finish(*this, gen, bias);
}

SampledProgram GrammarPolicy::greedy(const Eigen::VectorXd& bias) const
{
    Generator gen{*this, {}, {}, {}, {}, 0, 0};
    gen.pick = [&](std::uint32_t s) {
        Eigen::Index best = 0;
        log_probs(s, bias).maxCoeff(&best);
        return static_cast<std::uint32_t>(best);
    };
    gen.run();
    return finish(*this, gen, bias);
}

std::optional<std::vector<Decision>> GrammarPolicy::derive(const std::string& text) const
{
    std::vector<std::string> target;
    try {
        target = token_texts(text);
    } catch (const std::exception&) {
        return std::nullopt;
    }
    std::vector<std::vector<std::uint32_t>> stack{{}};
    while (!stack.empty()) {
        const auto prefix = std::move(stack.back());
        stack.pop_back();
        std::size_t used = 0;
        Generator gen{*this, {}, {}, {}, {}, 0, 0};
        gen.pick = [&](std::uint32_t s) {
            if (used < prefix.size()) {
                return prefix[used++];
            }
            throw NeedChoice{s};
        };
        gen.on_emit = [&](std::size_t i, const std::string& tok) {
            if (i >= target.size() || target[i] != tok) {
                throw Mismatch{};
            }
        };
        try {
            gen.run();
            if (gen.toks.size() == target.size()) {
                return gen.decisions;
            }
        } catch (const NeedChoice& need) {
            const auto n = states_[need.state].labels.size();
            for (std::size_t a = n; a-- > 0;) {
                auto next = prefix;
                next.push_back(static_cast<std::uint32_t>(a));
                stack.push_back(std::move(next));
            }
        } catch (const Mismatch&) {
        }
    }
    return std::nullopt;
}

void GrammarPolicy::pin(const std::string& text, double margin)
{
    const auto path = derive(text);
    if (!path) {
        throw std::invalid_argument("program is not derivable in this grammar: " + text);
    }
    for (const auto& d : *path) {
        const auto& st = states_[d.state];
        const auto off = static_cast<Eigen::Index>(st.offset);
        const auto n = static_cast<Eigen::Index>(st.labels.size());
        auto seg = logits_.segment(off, n);
        double others = -std::numeric_limits<double>::infinity();
        for (Eigen::Index a = 0; a < n; ++a) {
            if (a != static_cast<Eigen::Index>(d.action)) {
                others = std::max(others, seg(a));
            }
        }
        seg(static_cast<Eigen::Index>(d.action)) = std::max(seg(static_cast<Eigen::Index>(d.action)), others + margin);
    }
}

std::vector<double> GrammarPolicy::token_logprobs(const SampledProgram& s, const Eigen::VectorXd& bias) const
{
    std::vector<double> lp(s.tokens.size(), 0.0);
    for (const auto& d : s.decisions) {
        lp.at(d.token) += log_probs(d.state, bias)(static_cast<Eigen::Index>(d.action));
    }
    return lp;
}

nlohmann::json GrammarPolicy::to_json() const
{
    nlohmann::json spec = {
        {"variables", spec_.variables},
        {"exponents", spec_.exponents},
        {"atoms", spec_.atoms},
        {"shape_parameters", spec_.shape_parameters},
        {"constant_term", spec_.constant_term},
        {"implicit_unit", spec_.implicit_unit},
        {"minus", spec_.minus},
        {"max_terms", spec_.max_terms},
        {"max_factors", spec_.max_factors},
        {"max_depth", spec_.max_depth},
        {"outputs", spec_.outputs},
    };
    std::vector<std::string> funcs;
    for (const auto f : spec_.functions) {
        funcs.emplace_back(expr::function_name(f));
    }
    spec["functions"] = funcs;
    nlohmann::json states = nlohmann::json::array();
    for (const auto& st : states_) {
        std::vector<double> v(static_cast<std::size_t>(st.labels.size()));
        for (std::size_t a = 0; a < v.size(); ++a) {
            v[a] = logits_(static_cast<Eigen::Index>(st.offset + a));
        }
        states.push_back({{"name", st.name}, {"kind", kind_name(st.kind)}, {"labels", st.labels}, {"logits", v}});
    }
    return {{"format", "pitpo-policy/1"}, {"temperature", temperature_}, {"grammar", spec}, {"states", states}};
}

GrammarPolicy GrammarPolicy::from_json(const nlohmann::json& j)
{
    if (j.value("format", "") != "pitpo-policy/1") {
        throw std::invalid_argument("policy checkpoint: unsupported format");
    }
    const auto& g = j.at("grammar");
    GrammarSpec spec;
    spec.variables = g.at("variables").get<std::vector<std::string>>();
    spec.exponents = g.at("exponents").get<std::vector<int>>();
    spec.atoms = g.at("atoms").get<std::vector<std::string>>();
    spec.shape_parameters = g.at("shape_parameters").get<bool>();
    spec.constant_term = g.at("constant_term").get<bool>();
    spec.implicit_unit = g.value("implicit_unit", true);
    spec.minus = g.at("minus").get<bool>();
    spec.max_terms = g.at("max_terms").get<int>();
    spec.max_factors = g.at("max_factors").get<int>();
    spec.max_depth = g.at("max_depth").get<int>();
    spec.outputs = g.at("outputs").get<int>();
    spec.functions.clear();
    for (const auto& name : g.at("functions").get<std::vector<std::string>>()) {
        const auto f = expr::function_from_name(name);
        if (!f) {
            throw std::invalid_argument("policy checkpoint: unknown function " + name);
        }
        spec.functions.push_back(*f);
    }
    GrammarPolicy p(spec, j.at("temperature").get<double>());
    const auto& states = j.at("states");
    if (states.size() != p.states_.size()) {
        throw std::invalid_argument("policy checkpoint: state table does not match the grammar");
    }
    for (std::size_t s = 0; s < states.size(); ++s) {
        const auto& st = p.states_[s];
        const auto v = states[s].at("logits").get<std::vector<double>>();
        if (states[s].at("name").get<std::string>() != st.name || v.size() != st.labels.size()) {
            throw std::invalid_argument("policy checkpoint: state table does not match the grammar");
        }
        for (std::size_t a = 0; a < v.size(); ++a) {
            p.logits_(static_cast<Eigen::Index>(st.offset + a)) = v[a];
        }
    }
    return p;
}

void GrammarPolicy::save(const std::string& path, const std::string& rng_state) const
{
    auto j = to_json();
    if (!rng_state.empty()) {
        j["rng"] = rng_state;
    }
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write " + path);
    }
    out << j.dump(1) << '\n';
}

GrammarPolicy GrammarPolicy::load(const std::string& path, std::string* rng_state)
{
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot read " + path);
    }
    const auto j = nlohmann::json::parse(in);
    if (rng_state != nullptr) {
        *rng_state = j.value("rng", "");
    }
    return from_json(j);
}

std::vector<SampledProgram> sample_group(const GrammarPolicy& policy, const Context& ctx, int G, std::uint64_t seed)
{
    if (G < 1) {
        throw std::invalid_argument("sample_group: G must be at least 1");
    }
    std::mt19937_64 rng(seed);
    std::vector<SampledProgram> out;
    out.reserve(static_cast<std::size_t>(G));
    for (int i = 0; i < G; ++i) {
        out.push_back(policy.sample(ctx.bias, rng));
    }
    return out;
}

}  // namespace pitpo::policy
