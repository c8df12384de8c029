#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pitpo/bench.hpp"
#include "pitpo/bridge.hpp"
#include "pitpo/constraints.hpp"
#include "pitpo/exclusion.hpp"
#include "pitpo/fitter.hpp"
#include "pitpo/policy.hpp"
#include "pitpo/reward.hpp"

namespace pitpo::search {

struct SearchConfig {
    int iterations{2500};
    int islands{4};
    int group_size{4};
    std::uint64_t seed{0};
    std::size_t buffer_capacity{32};
    int context_k{2};
    int reset_period{100};      // 0: never reset
    double gate_fraction{1e-3};  // delta_gate = gate_fraction * mse_initial
    double temperature{1.0};
    double context_weight{1.0};
    bool token_regularization{true};
    bool stop_on_recovery{false};
    int threads{0};  // 0: PITPO_THREADS or 1
    std::string out_dir;  // empty: no artifacts
    bool log_candidates{false};

    reward::RewardConfig reward;
    constraints::Weights weights;
    exclusion::ExclusionConfig exclusion;
    policy::UpdateConfig update;
    FitBudget fit{4, 100, 1e-10, 0, 1e-10, false, {}};

    void validate() const;
    [[nodiscard]] nlohmann::json to_json() const;
    // Unknown keys are rejected; missing keys keep their defaults.
    static SearchConfig from_json(const nlohmann::json& j);
};

struct BufferEntry {
    std::string program;
    double reward{reward::kRewardFloor};
    double mse{0.0};
    std::vector<double> coeffs;
    reward::RewardBreakdown breakdown;
};

struct IslandState {
    int id{0};
    std::vector<BufferEntry> buffer;  // descending reward, unique texts
    [[nodiscard]] const BufferEntry* best_local() const { return buffer.empty() ? nullptr : &buffer.front(); }
};

// Everything the engine knows about one scored candidate.
struct CandidateRecord {
    int iteration{0};
    int island{0};
    int index{0};  // position in the island's group
    std::string program;
    bool valid{false};
    std::string error;
    std::vector<double> coeffs;
    constraints::RawPenalties raw;
    constraints::ConstraintReport report;
    reward::RewardBreakdown breakdown;
    constraints::Stage stage{constraints::Stage::A};
    std::vector<bool> redundant;  // per term
    std::vector<double> term_penalty;
    std::vector<double> token_advantages;
    bool exact_support{false};
    bool external{false};

    [[nodiscard]] nlohmann::json to_json() const;
};

struct IterationLog {
    int iter{0};
    double best_mse{0.0};
    double best_nmse{0.0};
    double best_reward{0.0};
    bool gate_open{false};
    int evals{0};

    [[nodiscard]] nlohmann::json to_json() const;
};

struct RunState {
    std::vector<IslandState> islands;
    std::optional<BufferEntry> best_global;
    int iteration{0};
    double mse_initial{0.0};  // NaN until the first finite MSE of the run
    double best_mse_so_far{0.0};
    std::uint64_t seed{0};
    std::vector<IterationLog> trajectory;
    std::optional<int> first_recovery_iteration;
    std::optional<std::string> recovered_program;
    long evaluations{0};
    int fallbacks{0};
    int updates_applied{0};
};

// External program generator. generate() may throw bridge::TimeoutError or
// bridge::ProtocolError; the island then falls back to the built-in policy.
class ProgramSource {
public:
    virtual ~ProgramSource() = default;
    [[nodiscard]] virtual std::string name() const = 0;
    struct Batch {
        std::string request_id;
        std::vector<policy::SampledProgram> samples;
    };
    virtual Batch generate(int iteration, int island, const policy::Elites& context, int n,
                           const std::vector<std::string>& variables) = 0;
    // Advantages for the samples delivered this iteration. Failures are logged.
    virtual void update(const std::vector<bridge::UpdateRecord>& records) = 0;
};

// Generator behind the JSONL bridge.
class BridgeSource final : public ProgramSource {
public:
    BridgeSource(std::unique_ptr<bridge::Client> client, int max_tokens = 256);
    [[nodiscard]] std::string name() const override { return "bridge"; }
    Batch generate(int iteration, int island, const policy::Elites& context, int n,
                   const std::vector<std::string>& variables) override;
    void update(const std::vector<bridge::UpdateRecord>& records) override;

private:
    std::unique_ptr<bridge::Client> client_;
    int max_tokens_;
};

// Replays fixed programs through the same path external samples take, with
// the echo adapter's token log-probabilities.
class ReplaySource final : public ProgramSource {
public:
    explicit ReplaySource(std::vector<std::string> programs) : programs_(std::move(programs)) {}
    [[nodiscard]] std::string name() const override { return "replay"; }
    Batch generate(int iteration, int island, const policy::Elites& context, int n,
                   const std::vector<std::string>& variables) override;
    void update(const std::vector<bridge::UpdateRecord>& records) override;

    std::vector<bridge::UpdateRecord> received;

private:
    std::vector<std::string> programs_;
    std::size_t next_{0};
};

// Parses "bridge:<host:port>" or "bridge:<command line>" into a source.
std::unique_ptr<ProgramSource> make_bridge_source(const std::string& target, std::chrono::milliseconds timeout);

struct Hooks {
    ProgramSource* source{nullptr};        // null: built-in grammar policy only
    policy::GrammarPolicy* policy{nullptr};  // optional initial policy; updated in place
    std::function<void(const CandidateRecord&)> on_candidate;
    std::function<void(const IterationLog&)> on_iteration;
};

RunState run_search(const bench::TaskSpec& task, const SearchConfig& cfg, const Hooks& hooks = {});

// Truncation every iteration; every reset_period iterations the bottom
// floor(N/2) islands by best_local reward (ties: lower id first) are cleared
// and reseeded with the global best.
void select_and_reset(std::vector<IslandState>& islands, const std::optional<BufferEntry>& best_global,
                      int iteration, const SearchConfig& cfg);

// Top-k buffer entries, best first.
policy::Elites build_context(const IslandState& island, int k);

// Inserts, deduplicates by text (keeping the higher reward) and truncates.
void insert_into_buffer(IslandState& island, std::vector<BufferEntry> entries, std::size_t capacity);

// Exact-support check for dictionary tasks: every term proportional to a
// distinct true dictionary column, one term per true column, train NMSE < 1e-8.
bool exact_support(const bench::TaskSpec& task, const expr::Skeleton& s, std::span<const double> coeffs, double mse);

}  // namespace pitpo::search
