#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "pitpo/expr.hpp"
#include "pitpo/grammar.hpp"

namespace pitpo::policy {

enum class StateKind : std::uint8_t { Sum, Term, Factor, More, Arg };

struct StateInfo {
    std::string name;
    StateKind kind{StateKind::Sum};
    std::vector<std::string> labels;  // one per production
    std::size_t offset{0};            // first logit in the flat parameter vector
    int depth{0};                     // factor states: nesting depth
};

// One sampled production. Forced productions are not recorded.
struct Decision {
    std::uint32_t state{0};
    std::uint32_t action{0};
    std::uint32_t token{0};  // token the decision is charged to
};

struct SampledProgram {
    std::string text;
    std::vector<expr::Token> tokens;
    std::vector<double> logprobs;  // per token, under the sampling snapshot
    std::vector<std::optional<std::size_t>> term_token_map;
    std::vector<Decision> decisions;  // empty for externally generated programs
};

using Elites = std::vector<std::pair<std::string, double>>;  // (text, reward), best first

// Conditioning record for one group: elites plus the logit offsets derived from them.
struct Context {
    Elites elites;
    Eigen::VectorXd bias;  // empty: no offset
};

class GrammarPolicy {
public:
    explicit GrammarPolicy(GrammarSpec spec, double temperature = 1.0);

    [[nodiscard]] const GrammarSpec& spec() const noexcept { return spec_; }
    [[nodiscard]] const std::vector<StateInfo>& states() const noexcept { return states_; }
    [[nodiscard]] std::size_t parameter_count() const noexcept { return static_cast<std::size_t>(logits_.size()); }
    [[nodiscard]] const Eigen::VectorXd& logits() const noexcept { return logits_; }
    Eigen::VectorXd& logits() noexcept { return logits_; }
    [[nodiscard]] double temperature() const noexcept { return temperature_; }
    void set_temperature(double t);
    // upper bound on the token length of any program in the grammar
    [[nodiscard]] std::size_t max_tokens() const noexcept { return max_tokens_; }

    // Logit offsets for factor productions seen in the elites, scaled by the
    // fraction of elites that contain them.
    [[nodiscard]] Eigen::VectorXd context_bias(const Elites& elites, double weight) const;

    [[nodiscard]] SampledProgram sample(const Eigen::VectorXd& bias, std::mt19937_64& rng) const;
    [[nodiscard]] SampledProgram greedy(const Eigen::VectorXd& bias) const;

    // Decision sequence that produces exactly this program, if any.
    [[nodiscard]] std::optional<std::vector<Decision>> derive(const std::string& text) const;
    // Raise the logits along a derivation so greedy decoding yields it.
    void pin(const std::string& text, double margin = 40.0);

    // Per-state log-probabilities under the current logits.
    [[nodiscard]] Eigen::VectorXd log_probs(std::uint32_t state, const Eigen::VectorXd& bias) const;
    // Per-token log-probabilities of a sampled program under the current logits.
    [[nodiscard]] std::vector<double> token_logprobs(const SampledProgram& s, const Eigen::VectorXd& bias) const;

    [[nodiscard]] nlohmann::json to_json() const;
    static GrammarPolicy from_json(const nlohmann::json& j);
    void save(const std::string& path, const std::string& rng_state = {}) const;
    static GrammarPolicy load(const std::string& path, std::string* rng_state = nullptr);

private:
    friend struct Generator;

    void build_chain(const std::string& path, int depth);
    std::uint32_t add_state(std::string name, StateKind kind, std::vector<std::string> labels, int depth = 0);
    [[nodiscard]] std::uint32_t id(const std::string& name) const;

    GrammarSpec spec_;
    double temperature_{1.0};
    std::vector<StateInfo> states_;
    std::unordered_map<std::string, std::uint32_t> index_;
    Eigen::VectorXd logits_;
    std::size_t max_tokens_{0};
};

// G independent samples from the frozen policy; deterministic given the seed.
std::vector<SampledProgram> sample_group(const GrammarPolicy& policy, const Context& ctx, int G, std::uint64_t seed);

// Population standardization; all zeros when std < 1e-12.
std::vector<double> standardize_advantages(std::span<const double> rewards);

struct TokenAdvantages {
    std::vector<double> advantages;
    std::vector<double> penalties;
};

// A_k = A_global - P_k, with P_k the term penalty when token k lies in a
// redundant term's span.
TokenAdvantages token_aware_advantages(const SampledProgram& s, double global_advantage,
                                       const std::vector<bool>& redundant, const std::vector<double>& term_penalty);

struct UpdateConfig {
    double learning_rate{0.05};
    double clip_eps{0.2};
    double kl_beta{0.01};
    int group_size{4};
    int epochs_per_batch{1};

    void validate() const;
};

struct GroupBatch {
    Context context;
    std::vector<SampledProgram> samples;
    std::vector<double> rewards;
    std::vector<std::vector<double>> advantages;       // per sample, per token
    std::vector<std::vector<double>> token_penalties;  // per sample, per token
};

struct LossResult {
    double loss{0.0};
    double surrogate{0.0};  // mean clipped objective
    double kl{0.0};         // mean per-token KL to the reference
    Eigen::VectorXd gradient;
};

// Clipped surrogate plus exact per-state KL, averaged per sample over tokens
// and over all samples of all groups. Old log-probabilities are the ones
// stored in each sample.
LossResult pitpo_loss(const GrammarPolicy& policy, const GrammarPolicy& ref, std::span<const GroupBatch> batch,
                      const UpdateConfig& cfg);

// Gradient step on the logits; returns false and leaves the policy unchanged
// when the gradient is not finite.
bool apply_update(GrammarPolicy& policy, const Eigen::VectorXd& gradient, const UpdateConfig& cfg);

// Finite-difference check of pitpo_loss on random batches (verify suite).
struct GradientCheckReport {
    int batches{0};
    int failures{0};
    double max_relative_error{0.0};
};
GradientCheckReport gradient_check(int batches, std::uint64_t seed);

}  // namespace pitpo::policy
