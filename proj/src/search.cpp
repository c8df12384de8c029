#include "pitpo/search.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <random>
#include <regex>
#include <sstream>
#include <thread>
#include <unordered_map>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace pitpo::search {

using nlohmann::json;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

json number(double v)
{
    return std::isfinite(v) ? json(v) : json(nullptr);
}

json named_json(const constraints::Named& n)
{
    json j = json::object();
    for (const auto& [k, v] : n) {
        j[k] = number(v);
    }
    return j;
}

std::uint64_t stream_seed(std::uint64_t seed, int iteration, int island)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(iteration), static_cast<std::uint32_t>(island)};
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

int resolve_threads(int requested)
{
    if (requested > 0) {
        return requested;
    }
    if (const char* env = std::getenv("PITPO_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) {
            return n;
        }
    }
    return 1;
}

// Pure per-text evaluation; shared across the run.
struct Evaluated {
    bool valid{false};
    std::string error;
    expr::Skeleton skeleton;
    std::vector<double> coeffs;
    double mse{kInf};
    double p_dim{0.0};
    double p_diff{0.0};
    constraints::Named domain_cheap;
    mutable std::optional<constraints::Named> domain_full;
    exclusion::CandidateAnalysis analysis;
    bool exact{false};
};

class Evaluator {
public:
    Evaluator(const bench::TaskSpec& task, const SearchConfig& cfg)
        : task_(task), cfg_(cfg), train_(task.data.train()), obj_(task.train_objective())
    {
        if (task.turbulence) {
            plugin_ = std::make_unique<constraints::TurbulencePlugin>(*task.turbulence);
        }
    }

    [[nodiscard]] const Objective& objective() const { return obj_; }
    [[nodiscard]] bool has_plugin() const { return plugin_ != nullptr; }

    [[nodiscard]] Evaluated evaluate(const std::string& text) const
    {
        Evaluated e;
        try {
            e.skeleton = expr::parse(text, task_.data.variables);
        } catch (const std::exception& ex) {
            e.error = ex.what();
            return e;
        }
        if (e.skeleton.outputs() != obj_.outputs()) {
            e.error = fmt::format("program has {} outputs, task expects {}", e.skeleton.outputs(), obj_.outputs());
            return e;
        }
        e.valid = true;
        try {
            auto budget = cfg_.fit;
            budget.seed = cfg_.seed;
            const auto fr = fit(e.skeleton, obj_, budget);
            e.coeffs = fr.coeffs;
            e.mse = fr.mse;
        } catch (const std::exception& ex) {
            e.error = ex.what();
            e.mse = kInf;
        }
        if (!std::isfinite(e.mse)) {
            e.mse = kInf;
            return e;
        }
        e.p_dim = constraints::dim_penalty(e.skeleton, train_);
        e.p_diff = constraints::diff_penalty(e.skeleton, e.coeffs, train_);
        if (plugin_) {
            e.domain_cheap = plugin_->evaluate(outputs(e), false);
        }
        if (cfg_.token_regularization) {
            try {
                e.analysis = exclusion::analyze_candidate(e.skeleton, e.coeffs, obj_, cfg_.exclusion);
            } catch (const std::exception& ex) {
                spdlog::debug("exclusion analysis failed for '{}': {}", text, ex.what());
            }
        }
        e.exact = exact_support(task_, e.skeleton, e.coeffs, e.mse);
        return e;
    }

    [[nodiscard]] constraints::Named domain_full(const Evaluated& e) const
    {
        return plugin_->evaluate(outputs(e), true);
    }

private:
    [[nodiscard]] Eigen::ArrayXXd outputs(const Evaluated& e) const
    {
        return expr::evaluate_outputs(e.skeleton, e.coeffs, obj_.X);
    }

    const bench::TaskSpec& task_;
    const SearchConfig& cfg_;
    Dataset train_;
    Objective obj_;
    std::unique_ptr<constraints::DomainPlugin> plugin_;
};

using Cache = std::unordered_map<std::string, std::shared_ptr<Evaluated>>;

void evaluate_missing(const Evaluator& ev, Cache& cache, const std::vector<std::string>& texts, int threads)
{
    std::vector<std::string> todo;
    for (const auto& t : texts) {
        if (!cache.contains(t) && std::find(todo.begin(), todo.end(), t) == todo.end()) {
            todo.push_back(t);
        }
    }
    std::vector<std::shared_ptr<Evaluated>> out(todo.size());
    const auto work = [&](std::size_t i) { out[i] = std::make_shared<Evaluated>(ev.evaluate(todo[i])); };
    const int n_threads = std::min<int>(threads, static_cast<int>(todo.size()));
    if (n_threads <= 1) {
        for (std::size_t i = 0; i < todo.size(); ++i) {
            work(i);
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (int w = 0; w < n_threads; ++w) {
            pool.emplace_back([&] {
                for (auto i = next++; i < todo.size(); i = next++) {
                    work(i);
                }
            });
        }
        for (auto& th : pool) {
            th.join();
        }
    }
    for (std::size_t i = 0; i < todo.size(); ++i) {
        cache.emplace(todo[i], std::move(out[i]));
    }
}

reward::RewardBreakdown floor_breakdown()
{
    reward::RewardBreakdown b;
    b.r_fit = reward::kRewardFloor;
    b.r_global = reward::kRewardFloor;
    b.mse = kInf;
    return b;
}

std::vector<std::string> split_words(const std::string& s)
{
    std::istringstream in(s);
    std::vector<std::string> out;
    for (std::string w; in >> w;) {
        out.push_back(w);
    }
    return out;
}

policy::SampledProgram echo_like(const std::string& text, const std::vector<std::string>& variables)
{
    bridge::ResponseSample s;
    s.text = text;
    for (const auto& t : expr::tokenize(text)) {
        s.tokens.push_back(t.text);
    }
    s.logprobs.assign(s.tokens.size(), -0.25);
    return bridge::to_sampled(s, variables);
}

}  // namespace

// ---------------------------------------------------------------- config

void SearchConfig::validate() const
{
    if (iterations < 1) {
        throw std::invalid_argument("iterations must be at least 1");
    }
    if (islands < 1) {
        throw std::invalid_argument("islands must be at least 1");
    }
    if (group_size < 2) {
        throw std::invalid_argument("group size must be at least 2");
    }
    if (buffer_capacity < 1) {
        throw std::invalid_argument("buffer capacity must be at least 1");
    }
    if (context_k < 0 || reset_period < 0 || threads < 0) {
        throw std::invalid_argument("context_k, reset_period and threads must be nonnegative");
    }
    if (!(gate_fraction > 0.0) || !(temperature > 0.0) || !(context_weight >= 0.0)) {
        throw std::invalid_argument("gate_fraction and temperature must be positive, context_weight nonnegative");
    }
    if (!(reward.alpha > 0.0) || !(reward.lambda_len >= 0.0)) {
        throw std::invalid_argument("alpha must be positive and lambda_len nonnegative");
    }
    if (fit.restarts < 1 || fit.max_iters < 1) {
        throw std::invalid_argument("fit budget must allow at least one restart and iteration");
    }
    exclusion.validate();
    auto u = update;
    u.group_size = group_size;
    u.validate();
}

json SearchConfig::to_json() const
{
    return json{{"iterations", iterations},
                {"islands", islands},
                {"group_size", group_size},
                {"seed", seed},
                {"buffer_capacity", buffer_capacity},
                {"context_k", context_k},
                {"reset_period", reset_period},
                {"gate_fraction", gate_fraction},
                {"temperature", temperature},
                {"context_weight", context_weight},
                {"token_regularization", token_regularization},
                {"stop_on_recovery", stop_on_recovery},
                {"threads", threads},
                {"log_candidates", log_candidates},
                {"alpha", reward.alpha},
                {"lambda_len", reward.lambda_len},
                {"epsilon", reward.epsilon},
                {"w_dim", weights.w_dim},
                {"w_diff", weights.w_diff},
                {"w_domain", weights.w_domain},
                {"exclusion_mode", exclusion.mode == exclusion::Mode::Ratio ? "ratio" : "theorem"},
                {"rho", exclusion.rho},
                {"penalty_scale", exclusion.penalty_scale},
                {"A", exclusion.A},
                {"B", exclusion.B},
                {"M", exclusion.M},
                {"external_library", exclusion.external_library},
                {"learning_rate", update.learning_rate},
                {"clip_eps", update.clip_eps},
                {"kl_beta", update.kl_beta},
                {"fit_restarts", fit.restarts},
                {"fit_max_iters", fit.max_iters}};
}

SearchConfig SearchConfig::from_json(const json& j)
{
    if (!j.is_object()) {
        throw std::invalid_argument("config must be a JSON object");
    }
    SearchConfig c;
    const auto known = c.to_json();
    for (const auto& [k, v] : j.items()) {
        if (!known.contains(k)) {
            throw std::invalid_argument(fmt::format("unknown config key '{}'", k));
        }
    }
    const auto get = [&](const char* key, auto& dst) {
        if (j.contains(key)) {
            try {
                j.at(key).get_to(dst);
            } catch (const json::exception&) {
                throw std::invalid_argument(fmt::format("config key '{}' has the wrong type", key));
            }
        }
    };
    get("iterations", c.iterations);
    get("islands", c.islands);
    get("group_size", c.group_size);
    get("seed", c.seed);
    get("buffer_capacity", c.buffer_capacity);
    get("context_k", c.context_k);
    get("reset_period", c.reset_period);
    get("gate_fraction", c.gate_fraction);
    get("temperature", c.temperature);
    get("context_weight", c.context_weight);
    get("token_regularization", c.token_regularization);
    get("stop_on_recovery", c.stop_on_recovery);
    get("threads", c.threads);
    get("log_candidates", c.log_candidates);
    get("alpha", c.reward.alpha);
    get("lambda_len", c.reward.lambda_len);
    get("epsilon", c.reward.epsilon);
    get("w_dim", c.weights.w_dim);
    get("w_diff", c.weights.w_diff);
    get("w_domain", c.weights.w_domain);
    if (j.contains("exclusion_mode")) {
        const auto m = j.at("exclusion_mode").get<std::string>();
        if (m == "ratio") {
            c.exclusion.mode = exclusion::Mode::Ratio;
        } else if (m == "theorem") {
            c.exclusion.mode = exclusion::Mode::Theorem;
        } else {
            throw std::invalid_argument(fmt::format("exclusion_mode must be ratio or theorem, got '{}'", m));
        }
    }
    get("rho", c.exclusion.rho);
    get("penalty_scale", c.exclusion.penalty_scale);
    get("A", c.exclusion.A);
    get("B", c.exclusion.B);
    get("M", c.exclusion.M);
    get("external_library", c.exclusion.external_library);
    get("learning_rate", c.update.learning_rate);
    get("clip_eps", c.update.clip_eps);
    get("kl_beta", c.update.kl_beta);
    get("fit_restarts", c.fit.restarts);
    get("fit_max_iters", c.fit.max_iters);
    c.update.group_size = c.group_size;
    return c;
}

json CandidateRecord::to_json() const
{
    json j{{"iter", iteration},
           {"island", island},
           {"index", index},
           {"program", program},
           {"valid", valid},
           {"mse", number(breakdown.mse)},
           {"r_fit", breakdown.r_fit},
           {"p_cplx", breakdown.p_cplx},
           {"p_phy", breakdown.p_phy},
           {"r_global", breakdown.r_global},
           {"gate_active", report.gated_active},
           {"p_dim", number(raw.p_dim)},
           {"p_diff", number(raw.p_diff)},
           {"domain", named_json(raw.domain)},
           {"stage", stage == constraints::Stage::B ? "B" : "A"},
           {"coeffs", coeffs},
           {"redundant", redundant},
           {"exact_support", exact_support},
           {"external", external}};
    if (!error.empty()) {
        j["error"] = error;
    }
    return j;
}

json IterationLog::to_json() const
{
    return json{{"iter", iter},
                {"best_mse", number(best_mse)},
                {"best_nmse", number(best_nmse)},
                {"best_reward", best_reward},
                {"gate_open", gate_open},
                {"evals", evals}};
}

// ---------------------------------------------------------------- buffers

void insert_into_buffer(IslandState& island, std::vector<BufferEntry> entries, std::size_t capacity)
{
    for (auto& e : entries) {
        auto it = std::find_if(island.buffer.begin(), island.buffer.end(),
                               [&](const BufferEntry& b) { return b.program == e.program; });
        if (it != island.buffer.end()) {
            if (e.reward > it->reward) {
                *it = std::move(e);
            }
            continue;
        }
        island.buffer.push_back(std::move(e));
    }
    std::stable_sort(island.buffer.begin(), island.buffer.end(),
                     [](const BufferEntry& a, const BufferEntry& b) { return a.reward > b.reward; });
    if (island.buffer.size() > capacity) {
        island.buffer.resize(capacity);
    }
}

void select_and_reset(std::vector<IslandState>& islands, const std::optional<BufferEntry>& best_global, int iteration,
                      const SearchConfig& cfg)
{
    for (auto& isl : islands) {
        if (isl.buffer.size() > cfg.buffer_capacity) {
            isl.buffer.resize(cfg.buffer_capacity);
        }
    }
    if (cfg.reset_period <= 0 || iteration % cfg.reset_period != 0 || !best_global) {
        return;
    }
    std::vector<std::size_t> order(islands.size());
    std::iota(order.begin(), order.end(), 0);
    const auto score = [&](std::size_t i) {
        const auto* b = islands[i].best_local();
        return b ? b->reward : -kInf;
    };
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double sa = score(a);
        const double sb = score(b);
        if (sa != sb) {
            return sa < sb;
        }
        return islands[a].id < islands[b].id;
    });
    const std::size_t n_reset = islands.size() / 2;
    for (std::size_t r = 0; r < n_reset; ++r) {
        auto& isl = islands[order[r]];
        isl.buffer.clear();
        isl.buffer.push_back(*best_global);
    }
}

policy::Elites build_context(const IslandState& island, int k)
{
    policy::Elites out;
    std::vector<const BufferEntry*> sorted;
    for (const auto& e : island.buffer) {
        sorted.push_back(&e);
    }
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const BufferEntry* a, const BufferEntry* b) { return a->reward > b->reward; });
    for (std::size_t i = 0; i < sorted.size() && static_cast<int>(i) < k; ++i) {
        out.emplace_back(sorted[i]->program, sorted[i]->reward);
    }
    return out;
}

bool exact_support(const bench::TaskSpec& task, const expr::Skeleton& s, std::span<const double> coeffs, double mse)
{
    if (task.dictionary.empty() || task.true_support.empty() || !std::isfinite(mse)) {
        return false;
    }
    const auto obj = task.train_objective();
    const double var = obj.target_variance();
    if (!(var > 0.0) || !(mse / var < 1e-8)) {
        return false;
    }
    const auto& terms = s.terms();
    if (terms.size() != task.true_support.size()) {
        return false;
    }
    std::vector<std::string> truth;
    for (const auto j : task.true_support) {
        truth.push_back(task.dictionary.at(j));
    }
    const auto phi = exclusion::basis_matrix(truth, task.data.variables, obj.X);
    std::vector<bool> used(truth.size(), false);
    for (const auto& term : terms) {
        const Eigen::ArrayXd b = expr::evaluate_basis(s, term, coeffs, obj.X);
        if (!b.allFinite()) {
            return false;
        }
        bool matched = false;
        for (std::size_t j = 0; j < truth.size() && !matched; ++j) {
            if (used[j]) {
                continue;
            }
            const double denom = b.matrix().norm() * phi.col(static_cast<Eigen::Index>(j)).norm();
            if (!(denom > 0.0)) {
                continue;
            }
            const double cosine = std::abs(b.matrix().dot(phi.col(static_cast<Eigen::Index>(j)))) / denom;
            if (cosine > 1.0 - 1e-10) {
                used[j] = true;
                matched = true;
            }
        }
        if (!matched) {
            return false;
        }
    }
    return true;
}

// ---------------------------------------------------------------- sources

BridgeSource::BridgeSource(std::unique_ptr<bridge::Client> client, int max_tokens)
    : client_(std::move(client)), max_tokens_(max_tokens)
{
}

ProgramSource::Batch BridgeSource::generate(int iteration, int island, const policy::Elites& context, int n,
                                            const std::vector<std::string>& variables)
{
    bridge::GenerateRequest req;
    req.request_id = fmt::format("it{}-is{}", iteration, island);
    req.island = island;
    req.context = context;
    req.n_samples = n;
    req.max_tokens = max_tokens_;
    const auto resp = client_->generate(req);
    Batch b;
    b.request_id = req.request_id;
    for (const auto& s : resp.samples) {
        b.samples.push_back(bridge::to_sampled(s, variables));
    }
    return b;
}

void BridgeSource::update(const std::vector<bridge::UpdateRecord>& records)
{
    if (records.empty()) {
        return;
    }
    try {
        client_->emit_update(records);
    } catch (const std::exception& e) {
        spdlog::warn("bridge update not acknowledged: {}", e.what());
    }
}

ProgramSource::Batch ReplaySource::generate(int iteration, int island, const policy::Elites&, int n,
                                            const std::vector<std::string>& variables)
{
    Batch b;
    b.request_id = fmt::format("it{}-is{}", iteration, island);
    for (int i = 0; i < n; ++i) {
        b.samples.push_back(echo_like(programs_.at(next_ % programs_.size()), variables));
        ++next_;
    }
    return b;
}

void ReplaySource::update(const std::vector<bridge::UpdateRecord>& records)
{
    received.insert(received.end(), records.begin(), records.end());
}

std::unique_ptr<ProgramSource> make_bridge_source(const std::string& target, std::chrono::milliseconds timeout)
{
    std::string spec = target;
    if (spec.rfind("bridge:", 0) == 0) {
        spec = spec.substr(7);
    }
    if (spec.empty()) {
        throw std::invalid_argument("bridge target is empty");
    }
    static const std::regex host_port(R"(^([A-Za-z0-9_.\-]+):(\d+)$)");
    std::smatch m;
    std::unique_ptr<bridge::Transport> transport;
    if (std::regex_match(spec, m, host_port)) {
        transport = std::make_unique<bridge::TcpTransport>(m[1].str(), std::stoi(m[2].str()));
    } else {
        transport = std::make_unique<bridge::StdioTransport>(split_words(spec));
    }
    return std::make_unique<BridgeSource>(std::make_unique<bridge::Client>(std::move(transport), timeout));
}

// ---------------------------------------------------------------- run

RunState run_search(const bench::TaskSpec& task, const SearchConfig& cfg_in, const Hooks& hooks)
{
    SearchConfig cfg = cfg_in;
    cfg.update.group_size = cfg.group_size;
    cfg.validate();
    task.data.validate();

    const Evaluator ev(task, cfg);
    const double target_var = ev.objective().target_variance();
    const int threads = resolve_threads(cfg.threads);

    std::optional<policy::GrammarPolicy> own_policy;
    if (!hooks.policy) {
        own_policy.emplace(task.grammar, cfg.temperature);
    }
    policy::GrammarPolicy& pol = hooks.policy ? *hooks.policy : *own_policy;
    const policy::GrammarPolicy ref = pol;

    RunState st;
    st.seed = cfg.seed;
    st.mse_initial = kNaN;
    st.best_mse_so_far = kInf;
    for (int i = 0; i < cfg.islands; ++i) {
        st.islands.push_back(IslandState{i, {}});
    }

    std::ofstream traj_out;
    std::ofstream cand_out;
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        json run{{"task", task.name}, {"config", cfg.to_json()}, {"generator", hooks.source ? hooks.source->name() : "grammar"},
                 {"protocol", bridge::kVersion}};
        std::ofstream(std::filesystem::path(cfg.out_dir) / "run.json") << run.dump(2) << '\n';
        traj_out.open(std::filesystem::path(cfg.out_dir) / "trajectory.jsonl");
        if (cfg.log_candidates) {
            cand_out.open(std::filesystem::path(cfg.out_dir) / "candidates.jsonl");
        }
    }

    Cache cache;
    std::optional<CandidateRecord> best_record;

    const auto consider_best = [&](const CandidateRecord& rec) {
        if (!rec.valid || !std::isfinite(rec.breakdown.mse)) {
            return;
        }
        if (!st.best_global || rec.breakdown.r_global > st.best_global->reward) {
            st.best_global = BufferEntry{rec.program, rec.breakdown.r_global, rec.breakdown.mse, rec.coeffs, rec.breakdown};
            best_record = rec;
        }
    };

    // Scores one candidate against the current gate.
    const auto score = [&](const Evaluated& e, constraints::Stage stage, CandidateRecord& rec) {
        rec.valid = e.valid;
        rec.error = e.error;
        rec.coeffs = e.coeffs;
        rec.stage = stage;
        if (!e.valid || !std::isfinite(e.mse)) {
            rec.breakdown = floor_breakdown();
            return;
        }
        rec.raw.p_dim = e.p_dim;
        rec.raw.p_diff = e.p_diff;
        if (ev.has_plugin()) {
            if (stage == constraints::Stage::B) {
                auto& full = e.domain_full;
                if (!full) {
                    full = ev.domain_full(e);
                }
                rec.raw.domain = *full;
            } else {
                rec.raw.domain = e.domain_cheap;
            }
        }
        const double gate = std::isnan(st.mse_initial) ? 0.0 : cfg.gate_fraction * st.mse_initial;
        rec.report = constraints::gated_physical_penalty(e.mse, rec.raw, gate, cfg.weights);
        rec.breakdown = reward::global_reward(e.mse, expr::complexity(e.skeleton), rec.report, cfg.reward);
        rec.redundant = e.analysis.redundant;
        rec.term_penalty = e.analysis.penalty;
        rec.exact_support = e.exact;
    };

    // seed programs enter every buffer before the first iteration, scored with the gate closed
    if (!task.seed_programs.empty()) {
        evaluate_missing(ev, cache, task.seed_programs, threads);
        std::vector<BufferEntry> seeds;
        for (const auto& text : task.seed_programs) {
            CandidateRecord rec;
            rec.program = text;
            score(*cache.at(text), constraints::Stage::A, rec);
            if (rec.valid && std::isfinite(rec.breakdown.mse)) {
                seeds.push_back(BufferEntry{text, rec.breakdown.r_global, rec.breakdown.mse, rec.coeffs, rec.breakdown});
                consider_best(rec);
            }
        }
        for (auto& isl : st.islands) {
            insert_into_buffer(isl, seeds, cfg.buffer_capacity);
        }
    }

    const auto N = static_cast<std::size_t>(cfg.islands);
    const auto G = static_cast<std::size_t>(cfg.group_size);

    for (int iter = 1; iter <= cfg.iterations; ++iter) {
        st.iteration = iter;

        // Stage 1: contexts and sampling from a frozen policy snapshot
        std::vector<policy::Context> contexts(N);
        std::vector<std::vector<policy::SampledProgram>> groups(N);
        std::vector<bool> external(N, false);
        std::vector<std::string> request_ids(N);
        for (std::size_t j = 0; j < N; ++j) {
            contexts[j].elites = build_context(st.islands[j], cfg.context_k);
            if (hooks.source) {
                try {
                    auto b = hooks.source->generate(iter, static_cast<int>(j), contexts[j].elites, cfg.group_size,
                                                    task.data.variables);
                    if (b.samples.size() != G) {
                        throw bridge::ProtocolError("generator returned the wrong number of samples");
                    }
                    groups[j] = std::move(b.samples);
                    request_ids[j] = std::move(b.request_id);
                    external[j] = true;
                    continue;
                } catch (const std::exception& e) {
                    spdlog::warn("iteration {} island {}: {} generator failed ({}); using the built-in policy", iter, j,
                                 hooks.source->name(), e.what());
                    ++st.fallbacks;
                }
            }
            contexts[j].bias = pol.context_bias(contexts[j].elites, cfg.context_weight);
            groups[j] = policy::sample_group(pol, contexts[j], cfg.group_size, stream_seed(cfg.seed, iter, static_cast<int>(j)));
        }

        std::vector<std::string> texts;
        for (const auto& g : groups) {
            for (const auto& s : g) {
                texts.push_back(s.text);
            }
        }
        evaluate_missing(ev, cache, texts, threads);

        // gate reference: first finite MSE of the run, in batch order
        if (std::isnan(st.mse_initial)) {
            for (const auto& t : texts) {
                const auto& e = *cache.at(t);
                if (e.valid && std::isfinite(e.mse)) {
                    st.mse_initial = e.mse;
                    break;
                }
            }
        }

        std::vector<double> batch_mse;
        for (const auto& t : texts) {
            const auto& e = *cache.at(t);
            batch_mse.push_back(e.valid ? e.mse : kInf);
        }
        const auto stages = constraints::elite_schedule(batch_mse, st.best_mse_so_far);

        std::vector<std::vector<CandidateRecord>> records(N);
        std::vector<policy::GroupBatch> batches;
        std::vector<policy::GroupBatch> stage_b;
        std::vector<bridge::UpdateRecord> outgoing;
        for (std::size_t j = 0; j < N; ++j) {
            std::vector<double> rewards;
            for (std::size_t i = 0; i < G; ++i) {
                CandidateRecord rec;
                rec.iteration = iter;
                rec.island = static_cast<int>(j);
                rec.index = static_cast<int>(i);
                rec.program = groups[j][i].text;
                rec.external = external[j];
                score(*cache.at(rec.program), stages[j * G + i], rec);
                rewards.push_back(rec.breakdown.r_global);
                records[j].push_back(std::move(rec));
            }
            const auto adv = policy::standardize_advantages(rewards);

            policy::GroupBatch gb;
            gb.context = contexts[j];
            gb.rewards = rewards;
            policy::GroupBatch gb_b;
            gb_b.context = contexts[j];
            for (std::size_t i = 0; i < G; ++i) {
                auto& rec = records[j][i];
                const auto& s = groups[j][i];
                std::vector<bool> redundant;
                std::vector<double> pen;
                if (cfg.token_regularization) {
                    redundant = rec.redundant;
                    pen = rec.term_penalty;
                }
                auto ta = policy::token_aware_advantages(s, adv[i], redundant, pen);
                rec.token_advantages = ta.advantages;
                if (external[j]) {
                    bridge::UpdateRecord ur;
                    ur.request_id = request_ids[j];
                    ur.sample_index = static_cast<int>(i);
                    ur.advantages = ta.advantages;
                    for (const double p : ta.penalties) {
                        ur.penalty_flags.push_back(p > 0.0);
                    }
                    ur.reward = rec.breakdown.r_global;
                    ur.mse = rec.breakdown.mse;
                    outgoing.push_back(std::move(ur));
                    continue;
                }
                if (rec.stage == constraints::Stage::B) {
                    gb_b.samples.push_back(s);
                    gb_b.rewards.push_back(rewards[i]);
                    gb_b.advantages.push_back(ta.advantages);
                    gb_b.token_penalties.push_back(ta.penalties);
                }
                gb.advantages.push_back(std::move(ta.advantages));
                gb.token_penalties.push_back(std::move(ta.penalties));
            }
            if (!external[j]) {
                gb.samples = groups[j];
                batches.push_back(std::move(gb));
                if (!gb_b.samples.empty()) {
                    stage_b.push_back(std::move(gb_b));
                }
            }
        }
        st.evaluations += static_cast<long>(N * G);

        // best tracking and buffers
        for (std::size_t j = 0; j < N; ++j) {
            std::vector<BufferEntry> entries;
            for (const auto& rec : records[j]) {
                consider_best(rec);
                if (rec.exact_support && !st.first_recovery_iteration) {
                    st.first_recovery_iteration = iter;
                    st.recovered_program = rec.program;
                }
                if (rec.valid && std::isfinite(rec.breakdown.mse)) {
                    entries.push_back(BufferEntry{rec.program, rec.breakdown.r_global, rec.breakdown.mse, rec.coeffs, rec.breakdown});
                }
                if (hooks.on_candidate) {
                    hooks.on_candidate(rec);
                }
                if (cand_out.is_open()) {
                    cand_out << rec.to_json().dump() << '\n';
                }
            }
            insert_into_buffer(st.islands[j], std::move(entries), cfg.buffer_capacity);
        }

        // Stage 2: one update on the aggregated batch
        if (!batches.empty()) {
            const auto res = policy::pitpo_loss(pol, ref, batches, cfg.update);
            if (policy::apply_update(pol, res.gradient, cfg.update)) {
                ++st.updates_applied;
            }
        }
        if (ev.has_plugin() && !stage_b.empty()) {
            const auto res = policy::pitpo_loss(pol, ref, stage_b, cfg.update);
            if (policy::apply_update(pol, res.gradient, cfg.update)) {
                ++st.updates_applied;
            }
        }
        if (hooks.source && !outgoing.empty()) {
            hooks.source->update(outgoing);
        }

        // Stage 3
        select_and_reset(st.islands, st.best_global, iter, cfg);

        IterationLog log;
        log.iter = iter;
        log.best_mse = st.best_global ? st.best_global->mse : kInf;
        log.best_nmse = target_var > 0.0 ? log.best_mse / target_var : kNaN;
        log.best_reward = st.best_global ? st.best_global->reward : reward::kRewardFloor;
        log.gate_open = !std::isnan(st.mse_initial);
        log.evals = static_cast<int>(N * G);
        st.trajectory.push_back(log);
        if (traj_out.is_open()) {
            traj_out << log.to_json().dump() << '\n' << std::flush;
        }
        if (hooks.on_iteration) {
            hooks.on_iteration(log);
        }
        if (cfg.stop_on_recovery && st.first_recovery_iteration) {
            break;
        }
    }

    if (!cfg.out_dir.empty()) {
        const std::filesystem::path dir(cfg.out_dir);
        json best = json::object();
        if (best_record) {
            best = {{"program", best_record->program},
                    {"coeffs", best_record->coeffs},
                    {"mse", number(best_record->breakdown.mse)},
                    {"nmse", number(target_var > 0.0 ? best_record->breakdown.mse / target_var : kNaN)},
                    {"reward",
                     {{"r_fit", best_record->breakdown.r_fit},
                      {"p_cplx", best_record->breakdown.p_cplx},
                      {"p_phy", best_record->breakdown.p_phy},
                      {"r_global", best_record->breakdown.r_global}}},
                    {"constraints",
                     {{"p_dim", best_record->report.p_dim},
                      {"p_diff", best_record->report.p_diff},
                      {"p_domain", named_json(best_record->report.p_domain)},
                      {"gated_active", best_record->report.gated_active},
                      {"total", best_record->report.total}}},
                    {"found_at_iteration", best_record->iteration}};
            if (!task.turbulence) {
                const auto s = expr::parse(best_record->program, task.data.variables);
                json m = json::object();
                for (const auto& [name, split] : {std::pair{"train", Split::Train}, std::pair{"id_test", Split::IdTest},
                                                  std::pair{"ood_test", Split::OodTest}}) {
                    const auto part = task.data.subset(split);
                    if (part.rows() == 0) {
                        continue;
                    }
                    try {
                        const auto mt = bench::metrics(expr::evaluate(s, best_record->coeffs, part.X), part.y.array(),
                                                       task.acc_tolerance);
                        m[name] = {{"nmse", number(mt.nmse)}, {"acc_all", mt.acc_all}, {"acc_avg", mt.acc_avg}};
                    } catch (const std::exception& e) {
                        m[name] = {{"error", e.what()}};
                    }
                }
                best["metrics"] = std::move(m);
            }
        }
        best["first_recovery_iteration"] = st.first_recovery_iteration ? json(*st.first_recovery_iteration) : json(nullptr);
        best["recovered_program"] = st.recovered_program ? json(*st.recovered_program) : json(nullptr);
        best["iterations_run"] = st.iteration;
        best["evaluations"] = st.evaluations;
        best["fallbacks"] = st.fallbacks;
        std::ofstream(dir / "best.json") << best.dump(2) << '\n';
        pol.save((dir / "policy.ckpt").string(), std::to_string(cfg.seed));
    }
    return st;
}

}  // namespace pitpo::search
