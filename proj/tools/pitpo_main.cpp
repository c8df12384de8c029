#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "pitpo/bench.hpp"
#include "pitpo/bridge.hpp"
#include "pitpo/constraints.hpp"
#include "pitpo/exclusion.hpp"
#include "pitpo/fitter.hpp"
#include "pitpo/policy.hpp"
#include "pitpo/reward.hpp"
#include "pitpo/search.hpp"

using namespace pitpo;
using nlohmann::json;

namespace {

constexpr const char* kEngineVersion = "0.1.0";

enum Exit : int { kOk = 0, kViolations = 1, kConfigError = 2, kTaskError = 3, kParseError = 4 };

json number(double v)
{
    return std::isfinite(v) ? json(v) : json(nullptr);
}

void flatten(const json& j, const std::string& prefix, std::ostream& out)
{
    if (j.is_object()) {
        for (const auto& [k, v] : j.items()) {
            flatten(v, prefix.empty() ? k : prefix + "." + k, out);
        }
    } else if (j.is_array()) {
        for (std::size_t i = 0; i < j.size(); ++i) {
            flatten(j[i], fmt::format("{}[{}]", prefix, i), out);
        }
    } else {
        out << prefix << ',' << (j.is_string() ? j.get<std::string>() : j.dump()) << '\n';
    }
}

struct RunArgs {
    std::string task;
    int iters{-1};
    int islands{-1};
    int group{-1};
    std::string policy{"grammar"};
    long long seed{-1};
    std::string out;
    std::string exclusion_mode;
    std::string config;
    std::size_t points{1000};
    int threads{-1};
    bool log_candidates{false};
    bool stop_on_recovery{false};
    double bridge_timeout{120.0};
};

int cmd_run(const RunArgs& a)
{
    if (a.task.empty()) {
        std::cerr << "error: --task is required\n";
        return kConfigError;
    }
    search::SearchConfig cfg;
    try {
        if (!a.config.empty()) {
            std::ifstream in(a.config);
            if (!in) {
                throw std::invalid_argument(fmt::format("cannot open config file '{}'", a.config));
            }
            cfg = search::SearchConfig::from_json(json::parse(in));
        }
        if (a.iters >= 0) {
            cfg.iterations = a.iters;
        }
        if (a.islands >= 0) {
            cfg.islands = a.islands;
        }
        if (a.group >= 0) {
            cfg.group_size = a.group;
        }
        if (a.seed >= 0) {
            cfg.seed = static_cast<std::uint64_t>(a.seed);
        }
        if (a.threads >= 0) {
            cfg.threads = a.threads;
        }
        if (!a.exclusion_mode.empty()) {
            cfg.exclusion.mode = a.exclusion_mode == "theorem" ? exclusion::Mode::Theorem : exclusion::Mode::Ratio;
        }
        cfg.out_dir = a.out;
        cfg.log_candidates = cfg.log_candidates || a.log_candidates;
        cfg.stop_on_recovery = cfg.stop_on_recovery || a.stop_on_recovery;
        cfg.update.group_size = cfg.group_size;
        cfg.validate();
        if (a.policy != "grammar" && a.policy.rfind("bridge:", 0) != 0) {
            throw std::invalid_argument(fmt::format("--policy must be grammar or bridge:<cmd|host:port>, got '{}'", a.policy));
        }
        if (!(a.bridge_timeout > 0.0)) {
            throw std::invalid_argument("--bridge-timeout must be positive");
        }
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    }

    bench::TaskSpec task;
    try {
        task = bench::load_task(a.task, a.points, static_cast<unsigned>(cfg.seed));
    } catch (const std::exception& e) {
        std::cerr << "task error: " << e.what() << '\n';
        return kTaskError;
    }

    std::unique_ptr<search::ProgramSource> source;
    if (a.policy != "grammar") {
        try {
            source = search::make_bridge_source(
                a.policy, std::chrono::milliseconds(static_cast<long long>(a.bridge_timeout * 1000.0)));
        } catch (const std::exception& e) {
            std::cerr << "config error: cannot start generator: " << e.what() << '\n';
            return kConfigError;
        }
    }

    search::Hooks hooks;
    hooks.source = source.get();
    const auto t0 = std::chrono::steady_clock::now();
    const auto st = search::run_search(task, cfg, hooks);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    json summary{{"task", task.name},
                 {"iterations", st.iteration},
                 {"evaluations", st.evaluations},
                 {"fallbacks", st.fallbacks},
                 {"seconds", secs}};
    if (st.best_global) {
        summary["best"] = {{"program", st.best_global->program},
                           {"coeffs", st.best_global->coeffs},
                           {"mse", number(st.best_global->mse)},
                           {"r_global", st.best_global->reward}};
    }
    summary["first_recovery_iteration"] =
        st.first_recovery_iteration ? json(*st.first_recovery_iteration) : json(nullptr);
    summary["recovered_program"] = st.recovered_program ? json(*st.recovered_program) : json(nullptr);
    std::cout << summary.dump(2) << '\n';
    return kOk;
}

struct EvalArgs {
    std::string task;
    std::string program;
    std::string format{"json"};
    std::size_t points{1000};
    long long seed{0};
    double gate_fraction{1e-3};
};

int cmd_eval(const EvalArgs& a)
{
    if (a.task.empty() || a.program.empty()) {
        std::cerr << "error: --task and --program are required\n";
        return kConfigError;
    }
    bench::TaskSpec task;
    try {
        task = bench::load_task(a.task, a.points, static_cast<unsigned>(a.seed));
    } catch (const std::exception& e) {
        std::cerr << "task error: " << e.what() << '\n';
        return kTaskError;
    }
    expr::Skeleton s;
    try {
        s = expr::parse(a.program, task.data.variables);
    } catch (const std::exception& e) {
        std::cerr << "syntax error: " << e.what() << '\n';
        return kParseError;
    }
    const auto obj = task.train_objective();
    if (s.outputs() != obj.outputs()) {
        std::cerr << fmt::format("syntax error: program has {} outputs, task expects {}\n", s.outputs(), obj.outputs());
        return kParseError;
    }
    FitBudget budget;
    budget.seed = static_cast<std::uint64_t>(a.seed);
    const auto fr = fit(s, obj, budget);
    const auto train = task.data.train();

    constraints::RawPenalties raw;
    if (std::isfinite(fr.mse)) {
        raw.p_dim = constraints::dim_penalty(s, train);
        raw.p_diff = constraints::diff_penalty(s, fr.coeffs, train);
        if (task.turbulence) {
            constraints::TurbulencePlugin plugin(*task.turbulence);
            raw.domain = plugin.evaluate(expr::evaluate_outputs(s, fr.coeffs, obj.X), true);
        }
    }
    // Without a run there is no initial MSE; the mean predictor's MSE stands in.
    const double gate = a.gate_fraction * obj.target_variance();
    const auto report = constraints::gated_physical_penalty(fr.mse, raw, gate);
    const auto br = reward::global_reward(fr.mse, expr::complexity(s), report);

    json out;
    out["program"] = expr::print(s);
    out["task"] = task.name;
    out["coeffs"] = fr.coeffs;
    out["fit"] = {{"mse", number(fr.mse)}, {"converged", fr.converged}, {"linear_path", fr.linear_path},
                  {"masked_rows", fr.masked_rows}};
    out["reward"] = {{"r_fit", br.r_fit}, {"p_cplx", br.p_cplx}, {"p_phy", br.p_phy}, {"r_global", br.r_global},
                     {"mse", number(br.mse)}};
    json domain = json::object();
    for (const auto& [k, v] : raw.domain) {
        domain[k] = number(v);
    }
    out["constraints"] = {{"p_dim", raw.p_dim},    {"p_diff", raw.p_diff},
                          {"p_domain", domain},    {"gate", gate},
                          {"gated_active", report.gated_active}, {"total", report.total}};

    if (std::isfinite(fr.mse)) {
        exclusion::ExclusionConfig ratio_cfg;
        const auto ratio = exclusion::analyze_candidate(s, fr.coeffs, obj, ratio_cfg);
        exclusion::ExclusionConfig thm_cfg;
        thm_cfg.mode = exclusion::Mode::Theorem;
        json gram = json::object();
        try {
            const auto thm = exclusion::analyze_candidate(s, fr.coeffs, obj, thm_cfg);
            if (thm.gram) {
                json bounds = json::array();
                for (const double b : thm.gram->bounds) {
                    bounds.push_back(number(b));
                }
                gram = {{"support_size", thm.gram->support_size},
                        {"dictionary_size", thm.gram->dictionary.size()},
                        {"degenerate", thm.gram->degenerate},
                        {"bounds", bounds},
                        {"theorem_redundant", thm.redundant}};
            }
        } catch (const std::exception& e) {
            gram = {{"error", e.what()}};
        }
        json terms = json::array();
        for (std::size_t t = 0; t < ratio.b.size(); ++t) {
            terms.push_back({{"b", ratio.b[t]}, {"redundant", ratio.redundant[t]}, {"p_tok", ratio.penalty[t]}});
        }
        gram["terms"] = terms;
        out["exclusion"] = gram;
    }

    if (!task.turbulence) {
        json m = json::object();
        for (const auto& [name, split] : {std::pair{"train", Split::Train}, std::pair{"id_test", Split::IdTest},
                                          std::pair{"ood_test", Split::OodTest}}) {
            const auto part = task.data.subset(split);
            if (part.rows() == 0) {
                continue;
            }
            try {
                const auto mt = bench::metrics(expr::evaluate(s, fr.coeffs, part.X), part.y.array(), task.acc_tolerance);
                m[name] = {{"nmse", number(mt.nmse)}, {"acc_all", mt.acc_all}, {"acc_avg", mt.acc_avg}};
            } catch (const std::exception& e) {
                m[name] = {{"error", e.what()}};
            }
        }
        out["metrics"] = m;
    } else {
        const double var = obj.target_variance();
        out["metrics"] = {{"train", {{"nmse", number(var > 0 ? fr.mse / var : NAN)}}}};
    }

    if (a.format == "csv") {
        flatten(out, "", std::cout);
    } else {
        std::cout << out.dump(2) << '\n';
    }
    return kOk;
}

struct VerifyArgs {
    int trials{1000};
    long long seed{0};
    int gradient_batches{100};
    bool inject_fault{false};
};

int cmd_verify(const VerifyArgs& a)
{
    if (a.trials < 0 || a.gradient_batches < 0) {
        std::cerr << "config error: --trials and --gradient-batches must be nonnegative\n";
        return kConfigError;
    }
    if (a.trials == 0) {
        spdlog::warn("--trials 0: the soundness suite is vacuous");
    }
    const auto fault = a.inject_fault ? exclusion::Fault::DropInterference : exclusion::Fault::None;
    const auto t0 = std::chrono::steady_clock::now();
    const auto sound = exclusion::soundness_suite(a.trials, static_cast<std::uint64_t>(a.seed), fault);
    const auto t1 = std::chrono::steady_clock::now();
    const auto grad = policy::gradient_check(a.gradient_batches, static_cast<std::uint64_t>(a.seed));
    const auto t2 = std::chrono::steady_clock::now();

    json out{{"soundness",
              {{"trials", sound.trials},
               {"violations", sound.violations},
               {"true_indices_checked", sound.true_indices_checked},
               {"spurious_flagged", sound.spurious_flagged},
               {"spurious_total", sound.spurious_total},
               {"failures", sound.failures},
               {"seconds", std::chrono::duration<double>(t1 - t0).count()},
               {"fault_injected", a.inject_fault}}},
             {"gradient",
              {{"batches", grad.batches},
               {"failures", grad.failures},
               {"max_relative_error", grad.max_relative_error},
               {"seconds", std::chrono::duration<double>(t2 - t1).count()}}}};
    std::cout << out.dump(2) << '\n';
    return sound.violations == 0 && grad.failures == 0 ? kOk : kViolations;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Physics-informed symbolic regression search engine"};
    app.set_version_flag("--version", fmt::format("pitpo {} (protocol {})", kEngineVersion, bridge::kVersion));
    app.require_subcommand(1);
    app.fallthrough();
    std::string log_level = "info";
    app.add_option("--log-level", log_level, "trace | debug | info | warn | error")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error"}));

    RunArgs ra;
    auto* run = app.add_subcommand("run", "run a search");
    run->add_option("--task", ra.task, "task name or CSV path");
    run->add_option("--iters", ra.iters, "iterations T");
    run->add_option("--islands", ra.islands, "islands N");
    run->add_option("--group", ra.group, "group size G");
    run->add_option("--policy", ra.policy, "grammar | bridge:<cmd|host:port>");
    run->add_option("--seed", ra.seed, "random seed");
    run->add_option("--out", ra.out, "run directory");
    run->add_option("--exclusion-mode", ra.exclusion_mode, "ratio | theorem")
        ->check(CLI::IsMember({"ratio", "theorem"}));
    run->add_option("--config", ra.config, "JSON config file (flags override it)");
    run->add_option("--points", ra.points, "points for generated tasks");
    run->add_option("--threads", ra.threads, "evaluation threads (default: PITPO_THREADS or 1)");
    run->add_flag("--log-candidates", ra.log_candidates, "write candidates.jsonl");
    run->add_flag("--stop-on-recovery", ra.stop_on_recovery, "stop once the exact dictionary support is found");
    run->add_option("--bridge-timeout", ra.bridge_timeout, "seconds to wait for an adapter reply");

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "fit and score one program");
    ev->add_option("--task", ea.task, "task name or CSV path");
    ev->add_option("--program", ea.program, "DSL program");
    ev->add_option("--format", ea.format, "json | csv")->check(CLI::IsMember({"json", "csv"}));
    ev->add_option("--points", ea.points, "points for generated tasks");
    ev->add_option("--seed", ea.seed, "random seed");
    ev->add_option("--gate-fraction", ea.gate_fraction, "gate relative to the mean predictor's MSE");

    VerifyArgs va;
    auto* ver = app.add_subcommand("verify", "exclusion soundness suite and policy gradient check");
    ver->add_option("--trials", va.trials, "soundness trials");
    ver->add_option("--seed", va.seed, "random seed");
    ver->add_option("--gradient-batches", va.gradient_batches, "gradient check batches");
    ver->add_flag("--inject-fault", va.inject_fault, "run the suite against a deliberately broken bound");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfigError;
    }
    spdlog::set_default_logger(spdlog::stderr_color_mt("pitpo"));
    spdlog::set_level(spdlog::level::from_str(log_level));

    try {
        if (*run) {
            return cmd_run(ra);
        }
        if (*ev) {
            return cmd_eval(ea);
        }
        return cmd_verify(va);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kConfigError;
    }
}
