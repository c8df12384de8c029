// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "pitpo/bench.hpp"
#include "pitpo/constraints.hpp"
#include "pitpo/exclusion.hpp"
#include "pitpo/policy.hpp"
#include "pitpo/reward.hpp"
#include "pitpo/search.hpp"
#include "pitpo/turbulence.hpp"
#include "pitpo/units.hpp"

using namespace pitpo;
using Clock = std::chrono::steady_clock;
using nlohmann::json;

namespace {

struct Outcome {
    bool pass{false};
    std::string detail;
};

double seconds_since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool same_bits(double a, double b)
{
    return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
}

double median(std::vector<int> v)
{
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// dictionary index of each term, by basis proportionality; -1 when unmatched
std::vector<int> term_indices(const bench::TaskSpec& task, const expr::Skeleton& s, std::span<const double> coeffs)
{
    const auto X = task.data.train().X;
    const auto phi = exclusion::basis_matrix(task.dictionary, task.data.variables, X);
    std::vector<int> out;
    for (const auto& term : s.terms()) {
        const Eigen::VectorXd b = expr::evaluate_basis(s, term, coeffs, X).matrix();
        int hit = -1;
        for (Eigen::Index j = 0; j < phi.cols(); ++j) {
            const double c = std::abs(b.dot(phi.col(j))) / (b.norm() * phi.col(j).norm());
            if (c > 1.0 - 1e-10) {
                hit = static_cast<int>(j);
                break;
            }
        }
        out.push_back(hit);
    }
    return out;
}

Outcome soundness()
{
    const auto t0 = Clock::now();
    const auto rep = exclusion::soundness_suite(1000, 20240601);
    const double secs = seconds_since(t0);
    return {rep.trials == 1000 && rep.violations == 0 && secs < 60.0,
            fmt::format("{} trials, {} true indices checked, {} violations, {:.1f} s", rep.trials,
                        rep.true_indices_checked, rep.violations, secs)};
}

Outcome usefulness()
{
    int flagged_ok = 0;
    int oracle_ok = 0;
    const int tasks = 100;
    for (int seed = 0; seed < tasks; ++seed) {
        bench::DictionaryOptions o;
        o.seed = static_cast<unsigned>(seed);
        o.seed_spurious = true;
        const auto task = bench::gen_dictionary_task(o);
        const auto s = expr::parse(task.seed_programs.at(0), task.data.variables);
        const auto obj = task.train_objective();
        const auto fr = fit(s, obj);
        exclusion::ExclusionConfig cfg;  // ratio mode, rho = 1e-2
        const auto an = exclusion::analyze_candidate(s, fr.coeffs, obj, cfg);
        const auto idx = term_indices(task, s, fr.coeffs);
        const std::set<std::size_t> truth(task.true_support.begin(), task.true_support.end());
        bool ok = true;
        std::vector<std::size_t> kept;
        for (std::size_t t = 0; t < idx.size(); ++t) {
            const bool spurious = idx[t] < 0 || !truth.contains(static_cast<std::size_t>(idx[t]));
            ok = ok && an.redundant[t] == spurious;
            if (!an.redundant[t] && idx[t] >= 0) {
                kept.push_back(static_cast<std::size_t>(idx[t]));
            }
        }
        flagged_ok += ok;
        std::sort(kept.begin(), kept.end());
        oracle_ok += kept == bench::best_subset(task.dictionary, task.data);
    }
    return {flagged_ok >= 95 && oracle_ok >= 95,
            fmt::format("spurious flagged and truth kept in {}/{}; best-subset oracle agrees in {}/{}", flagged_ok, tasks,
                        oracle_ok, tasks)};
}

Outcome gradient()
{
    const auto t0 = Clock::now();
    const auto rep = policy::gradient_check(100, 7);
    const double secs = seconds_since(t0);
    return {rep.batches == 100 && rep.failures == 0 && secs < 30.0,
            fmt::format("{} batches, {} failures, max relative error {:.2e}, {:.1f} s", rep.batches, rep.failures,
                        rep.max_relative_error, secs)};
}

Outcome advantage_contract()
{
    std::mt19937_64 rng(11);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    double worst_mean = 0.0;
    double worst_std = 0.0;
    for (int g = 0; g < 1000; ++g) {
        const int G = 2 + static_cast<int>(unit(rng) * 15);
        std::vector<double> r(static_cast<std::size_t>(G));
        const double scale = std::pow(10.0, 4.0 * unit(rng) - 2.0);
        for (auto& v : r) {
            v = scale * nd(rng) + 100.0 * nd(rng);
        }
        const auto a = policy::standardize_advantages(r);
        double m = 0.0;
        for (const double v : a) {
            m += v;
        }
        m /= G;
        double var = 0.0;
        for (const double v : a) {
            var += (v - m) * (v - m);
        }
        worst_mean = std::max(worst_mean, std::abs(m));
        worst_std = std::max(worst_std, std::abs(std::sqrt(var / G) - 1.0));
    }

    // span audit
    const auto osc = bench::oscillator1_task(200, 0);
    bench::DictionaryOptions dopt;
    dopt.seed = 3;
    dopt.seed_spurious = true;
    const auto dict = bench::gen_dictionary_task(dopt);
    int programs = 0;
    int penalized_tokens = 0;
    int real_flags = 0;
    int violations = 0;
    for (const auto* task : {&osc, &dict}) {
        policy::GrammarPolicy pol(task->grammar, 1.0);
        for (Eigen::Index i = 0; i < pol.logits().size(); ++i) {
            pol.logits()(i) = 0.7 * nd(rng);
        }
        const auto obj = task->train_objective();
        for (int n = 0; n < 500; ++n) {
            const auto s = pol.sample({}, rng);
            const auto sk = expr::parse(s.text, task->data.variables);
            const auto& terms = sk.terms();
            if (s.term_token_map != sk.token_terms()) {
                ++violations;
            }
            std::vector<bool> redundant(terms.size(), false);
            std::vector<double> pen(terms.size(), 0.0);
            if (task == &dict) {
                const auto fr = fit(sk, obj);
                if (std::isfinite(fr.mse)) {
                    const auto an = exclusion::analyze_candidate(sk, fr.coeffs, obj, exclusion::ExclusionConfig{});
                    redundant = an.redundant;
                    pen = an.penalty;
                    real_flags += static_cast<int>(std::count(redundant.begin(), redundant.end(), true));
                }
            }
            for (std::size_t t = 0; t < terms.size(); ++t) {
                if (!redundant[t] && unit(rng) < 0.3) {
                    redundant[t] = true;
                    pen[t] = -std::log(unit(rng) + 1e-300);
                }
            }
            const double A = nd(rng);
            const auto ta = policy::token_aware_advantages(s, A, redundant, pen);
            std::vector<std::optional<std::size_t>> owner(s.tokens.size());
            for (std::size_t t = 0; t < terms.size(); ++t) {
                for (const auto k : terms[t].span) {
                    owner[k] = t;
                }
            }
            for (std::size_t k = 0; k < s.tokens.size(); ++k) {
                const double p = ta.penalties[k];
                const bool inside = owner[k] && redundant[*owner[k]];
                if (!(p >= 0.0)) {
                    ++violations;
                }
                if (inside) {
                    violations += !(p == pen[*owner[k]] && ta.advantages[k] == A - p);
                } else {
                    violations += !(p == 0.0 && ta.advantages[k] == A);
                }
                penalized_tokens += p > 0.0;
            }
            ++programs;
        }
    }
    const bool ok = worst_mean < 1e-10 && worst_std < 1e-10 && violations == 0 && programs == 1000 &&
                    penalized_tokens > 0 && real_flags > 0;
    return {ok, fmt::format("max |mean| {:.1e}, max |std-1| {:.1e} over 1000 groups; {} programs audited, {} penalized "
                            "tokens ({} exclusion flags), {} violations",
                            worst_mean, worst_std, programs, penalized_tokens, real_flags, violations)};
}

Outcome ground_truth_round_trips()
{
    double worst = 0.0;
    std::string detail;
    for (const auto& task : {bench::oscillator1_task(1000, 0), bench::oscillator2_task(1000, 0)}) {
        const auto s = expr::parse(task.ground_truth->program, task.data.variables);
        FitBudget budget;
        budget.initial_guesses = {task.ground_truth->coeffs};
        const auto fr = fit(s, task.data.train(), budget);
        const auto m = bench::metrics(expr::evaluate(s, fr.coeffs, task.data.X), task.data.y.array(), task.acc_tolerance);
        worst = std::max(worst, m.nmse);
        detail += fmt::format("{} NMSE {:.2e}; ", task.name, m.nmse);
    }
    return {worst < 1e-12, detail};
}

Outcome end_to_end()
{
    const auto t0 = Clock::now();
    int recovered = 0;
    std::vector<int> its;
    for (int seed = 0; seed < 10; ++seed) {
        bench::DictionaryOptions o;
        o.seed = static_cast<unsigned>(seed);
        const auto task = bench::gen_dictionary_task(o);
        search::SearchConfig cfg;  // N = 4, G = 4, built-in policy
        cfg.iterations = 500;
        cfg.seed = static_cast<std::uint64_t>(seed);
        cfg.stop_on_recovery = true;
        const auto st = search::run_search(task, cfg);
        if (st.first_recovery_iteration) {
            ++recovered;
            its.push_back(*st.first_recovery_iteration);
        } else {
            its.push_back(-1);
        }
    }
    const double secs = seconds_since(t0);
    std::string list;
    for (const int i : its) {
        list += fmt::format(" {}", i);
    }
    return {recovered >= 8 && secs < 600.0,
            fmt::format("{}/10 seeds recovered (iterations:{}), {:.1f} s", recovered, list, secs)};
}

Outcome stagnation()
{
    const int T = 500;
    std::vector<int> with;
    std::vector<int> without;
    for (const bool treg : {true, false}) {
        for (int seed = 0; seed < 10; ++seed) {
            bench::DictionaryOptions o;
            o.seed = static_cast<unsigned>(seed);
            o.seed_spurious = true;
            const auto task = bench::gen_dictionary_task(o);
            search::SearchConfig cfg;
            cfg.iterations = T;
            cfg.seed = static_cast<std::uint64_t>(seed);
            cfg.stop_on_recovery = true;
            cfg.token_regularization = treg;
            cfg.update.learning_rate = 10.0;
            cfg.context_weight = 0.0;
            const auto st = search::run_search(task, cfg);
            (treg ? with : without).push_back(st.first_recovery_iteration ? *st.first_recovery_iteration : T + 1);
        }
    }
    const double mw = median(with);
    const double mo = median(without);
    return {mw < mo, fmt::format("median iterations to exact support: {} with token regularization, {} without "
                                 "(unrecovered counted as {})",
                                 mw, mo, T + 1)};
}

Outcome gating()
{
    const auto dir = std::filesystem::temp_directory_path() / "pitpo_acceptance_gating";
    std::filesystem::remove_all(dir);
    // unit annotations so that dimensional violations actually occur
    auto task = bench::oscillator1_task(300, 0);
    task.data.units = units::UnitMap{{"x", units::UnitVector::parse("m")}, {"v", units::UnitVector::parse("m/s")}};
    task.data.target_unit = units::UnitVector::parse("m/s^2");
    search::SearchConfig cfg;
    cfg.iterations = 60;
    cfg.seed = 5;
    cfg.out_dir = dir.string();
    cfg.log_candidates = true;
    search::run_search(task, cfg);

    std::ifstream in(dir / "candidates.jsonl");
    std::vector<json> rows;
    for (std::string line; std::getline(in, line);) {
        rows.push_back(json::parse(line));
    }
    double mse_initial = std::nan("");
    for (const auto& r : rows) {
        if (r["iter"] == 1 && r["mse"].is_number()) {
            mse_initial = r["mse"].get<double>();
            break;
        }
    }
    const double gate = cfg.gate_fraction * mse_initial;
    int closed = 0;
    int open = 0;
    int closed_with_penalty = 0;
    int violations = 0;
    for (const auto& r : rows) {
        if (!r["mse"].is_number()) {
            continue;
        }
        const double mse = r["mse"].get<double>();
        const bool active = r["gate_active"].get<bool>();
        const double r_fit = r["r_fit"].get<double>();
        const double p_cplx = r["p_cplx"].get<double>();
        const double p_phy = r["p_phy"].get<double>();
        const double r_global = r["r_global"].get<double>();
        violations += active != (mse < gate);
        violations += !same_bits(r_global, r_fit - p_cplx - p_phy);

        constraints::RawPenalties raw;
        raw.p_dim = r["p_dim"].get<double>();
        raw.p_diff = r["p_diff"].get<double>();
        for (const auto& [k, v] : r["domain"].items()) {
            raw.domain.emplace_back(k, v.get<double>());
        }
        const auto s = expr::parse(r["program"].get<std::string>(), task.data.variables);
        const auto nodes = expr::complexity(s);
        const auto same = reward::global_reward(mse, nodes, constraints::gated_physical_penalty(mse, raw, gate, cfg.weights),
                                                cfg.reward);
        violations += !(same_bits(same.r_fit, r_fit) && same_bits(same.p_cplx, p_cplx) && same_bits(same.p_phy, p_phy) &&
                        same_bits(same.r_global, r_global));
        // flip the indicator: only p_phy may move
        const double flipped_gate = active ? 0.0 : std::numeric_limits<double>::infinity();
        const auto flip = reward::global_reward(
            mse, nodes, constraints::gated_physical_penalty(mse, raw, flipped_gate, cfg.weights), cfg.reward);
        violations += !(same_bits(flip.r_fit, r_fit) && same_bits(flip.p_cplx, p_cplx));
        violations += !same_bits(flip.r_global, flip.r_fit - flip.p_cplx - flip.p_phy);
        if (active) {
            ++open;
            violations += !(flip.p_phy == 0.0);
        } else {
            ++closed;
            violations += !(p_phy == 0.0);
            violations += !same_bits(r_global, r_fit - p_cplx);
            const double raw_total = raw.p_dim + raw.p_diff;
            if (raw_total > 0.0) {
                ++closed_with_penalty;
                violations += !(flip.p_phy > 0.0);
            }
        }
    }
    std::filesystem::remove_all(dir);
    return {violations == 0 && closed > 0 && closed_with_penalty > 0,
            fmt::format("{} logged candidates: {} gate closed ({} with nonzero raw penalties), {} gate open; {} "
                        "bitwise mismatches",
                        rows.size(), closed, closed_with_penalty, open, violations)};
}

Outcome turbulence()
{
    std::mt19937_64 rng(17);
    std::normal_distribution<double> nd;
    std::vector<turb::Tensor> psd;
    for (int i = 0; i < 500; ++i) {
        turb::Tensor a;
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) {
                a(r, c) = nd(rng);
            }
        }
        psd.push_back(a * a.transpose());
    }
    const double p1 = turb::realizability(psd);

    std::vector<double> yp;
    std::vector<double> tau;
    for (int i = 1; i <= 40; ++i) {
        yp.push_back(0.15 * i);
        tau.push_back(-0.037 * std::pow(yp.back(), 3));
    }
    const double p3 = turb::asymptotic_slope(tau, yp, 1.0, 5.0);

    const auto field = turb::synthetic(400, 3);
    const auto s = expr::parse(field.program, std::vector<std::string>{"I1", "I2"});
    const auto g = expr::evaluate_outputs(s, field.coeffs, turb::features(field.samples));
    const double sel = turb::reconstruct(g, field.samples).selected_mse;
    return {std::abs(p1) <= 1e-10 && std::abs(p3) <= 1e-10 && std::abs(sel) <= 1e-10,
            fmt::format("P1 on PSD fields {:.1e}, P3 for (y+)^3 {:.1e}, oracle reconstruction selected-MSE {:.1e}", p1, p3,
                        sel)};
}

Outcome metrics_check()
{
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd;
    Eigen::ArrayXd y(257);
    for (auto& v : y) {
        v = 3.0 + 2.0 * nd(rng);
    }
    const auto mean_pred = bench::metrics(Eigen::ArrayXd::Constant(y.size(), y.mean()), y, 0.1);

    // hand-computed: relative errors 0.05, 0, 0.25, 0.02 with tau 0.1
    Eigen::ArrayXd t(4);
    t << 1, 2, 4, -5;
    Eigen::ArrayXd p(4);
    p << 1.05, 2, 5, -5.1;
    const auto m = bench::metrics(p, t, 0.1);
    const auto all = bench::metrics(t * 1.01, t, 0.1);  // every error 1%
    const bool ok = mean_pred.nmse == 1.0 && m.acc_avg == 0.75 && m.acc_all == 0.0 && all.acc_all == 1.0 &&
                    all.acc_avg == 1.0;
    return {ok, fmt::format("mean-predictor NMSE {}; fixture Acc_avg {} Acc_all {}; uniform 1% error Acc_all {}",
                            mean_pred.nmse, m.acc_avg, m.acc_all, all.acc_all)};
}

}  // namespace

int main()
{
    spdlog::set_level(spdlog::level::err);
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"exclusion soundness", soundness},
        {"exclusion usefulness", usefulness},
        {"gradient fidelity", gradient},
        {"advantage contract", advantage_contract},
        {"ground-truth round trips", ground_truth_round_trips},
        {"end-to-end recovery", end_to_end},
        {"stagnation break", stagnation},
        {"gating semantics", gating},
        {"turbulence evaluator", turbulence},
        {"metrics cross-check", metrics_check},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, fmt::format("exception: {}", e.what())};
        }
        failed += !o.pass;
        std::cout << fmt::format("{} [{}] {}: {}", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail)
                  << std::endl;
    }
    std::cout << fmt::format("{}/{} criteria passed", criteria.size() - static_cast<std::size_t>(failed), criteria.size())
              << std::endl;
    return failed == 0 ? 0 : 1;
}
