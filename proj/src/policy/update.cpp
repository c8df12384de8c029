#include <algorithm>
#include <cmath>
#include <numeric>

#include <spdlog/spdlog.h>

#include "pitpo/policy.hpp"

namespace pitpo::policy {

std::vector<double> standardize_advantages(std::span<const double> rewards)
{
    std::vector<double> out(rewards.size(), 0.0);
    if (rewards.size() < 2) {
        return out;
    }
    const double n = static_cast<double>(rewards.size());
    const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
    double var = 0.0;
    for (const double r : rewards) {
        var += (r - mean) * (r - mean);
    }
    const double sd = std::sqrt(var / n);
    if (!(sd >= 1e-12) || !std::isfinite(sd)) {
        return out;
    }
    for (std::size_t i = 0; i < rewards.size(); ++i) {
        out[i] = (rewards[i] - mean) / sd;
    }
    return out;
}

TokenAdvantages token_aware_advantages(const SampledProgram& s, double global_advantage,
                                       const std::vector<bool>& redundant, const std::vector<double>& term_penalty)
{
    TokenAdvantages out;
    const auto L = s.tokens.size();
    out.penalties.assign(L, 0.0);
    out.advantages.assign(L, global_advantage);
    for (std::size_t k = 0; k < L && k < s.term_token_map.size(); ++k) {
        const auto t = s.term_token_map[k];
        if (t && *t < redundant.size() && redundant[*t]) {
            const double p = std::max(0.0, term_penalty.at(*t));
            out.penalties[k] = p;
            out.advantages[k] = global_advantage - p;
        }
    }
    return out;
}

void UpdateConfig::validate() const
{
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) {
        throw std::invalid_argument("update: clip_eps must lie in (0, 1)");
    }
    if (!(kl_beta >= 0.0)) {
        throw std::invalid_argument("update: kl_beta must be nonnegative");
    }
    if (group_size < 2) {
        throw std::invalid_argument("update: group size must be at least 2");
    }
    if (!(learning_rate > 0.0)) {
        throw std::invalid_argument("update: learning rate must be positive");
    }
    if (epochs_per_batch < 1) {
        throw std::invalid_argument("update: epochs_per_batch must be at least 1");
    }
}

LossResult pitpo_loss(const GrammarPolicy& policy, const GrammarPolicy& ref, std::span<const GroupBatch> batch,
                      const UpdateConfig& cfg)
{
    LossResult out;
    out.gradient = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(policy.parameter_count()));
    const double T = policy.temperature();
    std::size_t count = 0;
    for (const auto& g : batch) {
        count += g.samples.size();
    }
    if (count == 0) {
        return out;
    }
    const double inv_n = 1.0 / static_cast<double>(count);
    const auto& states = policy.states();

    for (const auto& g : batch) {
        const auto& bias = g.context.bias;
        for (std::size_t i = 0; i < g.samples.size(); ++i) {
            const auto& s = g.samples[i];
            const auto L = s.tokens.size();
            if (L == 0) {
                continue;
            }
            const auto& adv = g.advantages.at(i);
            if (adv.size() != L || s.logprobs.size() != L) {
                throw std::invalid_argument("pitpo_loss: advantage or logprob length differs from token count");
            }
            const double w = inv_n / static_cast<double>(L);

            std::vector<double> lp(L, 0.0);
            std::vector<double> kl(L, 0.0);
            std::vector<Eigen::VectorXd> logp(s.decisions.size());
            std::vector<Eigen::VectorXd> logq(s.decisions.size());
            std::vector<double> kl_state(s.decisions.size());
            for (std::size_t d = 0; d < s.decisions.size(); ++d) {
                const auto& dec = s.decisions[d];
                logp[d] = policy.log_probs(dec.state, bias);
                logq[d] = ref.log_probs(dec.state, bias);
                lp[dec.token] += logp[d](static_cast<Eigen::Index>(dec.action));
                kl_state[d] = (logp[d].array().exp() * (logp[d] - logq[d]).array()).sum();
                kl[dec.token] += kl_state[d];
            }

            std::vector<double> coef(L, 0.0);  // d(surrogate_k)/d(lp_k)
            for (std::size_t k = 0; k < L; ++k) {
                const double r = std::exp(lp[k] - s.logprobs[k]);
                const double a = adv[k];
                const double clipped = std::clamp(r, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
                const double unclipped_term = r * a;
                const double clipped_term = clipped * a;
                const double surr = std::min(unclipped_term, clipped_term);
                out.surrogate += w * surr;
                out.kl += w * kl[k];
                coef[k] = unclipped_term <= clipped_term ? r * a : 0.0;
                if (clipped == r) {
                    coef[k] = r * a;
                }
            }

            for (std::size_t d = 0; d < s.decisions.size(); ++d) {
                const auto& dec = s.decisions[d];
                const auto& st = states[dec.state];
                const auto off = static_cast<Eigen::Index>(st.offset);
                const Eigen::VectorXd p = logp[d].array().exp();
                // -surrogate
                Eigen::VectorXd dlogp = -p;
                dlogp(static_cast<Eigen::Index>(dec.action)) += 1.0;
                out.gradient.segment(off, p.size()) -= (w * coef[dec.token] / T) * dlogp;
                // + beta * KL
                if (cfg.kl_beta > 0.0) {
                    const Eigen::VectorXd gk = p.array() * ((logp[d] - logq[d]).array() - kl_state[d]);
                    out.gradient.segment(off, p.size()) += (w * cfg.kl_beta / T) * gk;
                }
            }
        }
    }
    out.loss = -out.surrogate + cfg.kl_beta * out.kl;
    return out;
}

bool apply_update(GrammarPolicy& policy, const Eigen::VectorXd& gradient, const UpdateConfig& cfg)
{
    if (gradient.size() != policy.logits().size()) {
        throw std::invalid_argument("apply_update: gradient size mismatch");
    }
    if (!gradient.allFinite()) {
        spdlog::warn("policy update skipped: non-finite gradient");
        return false;
    }
    policy.logits() -= cfg.learning_rate * gradient;
    return true;
}

GradientCheckReport gradient_check(int batches, std::uint64_t seed)
{
    GradientCheckReport rep;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    GrammarSpec spec;
    spec.variables = {"x", "y"};
    spec.functions = {expr::Func::Sin, expr::Func::Exp};
    spec.exponents = {2, -1};
    spec.max_terms = 3;
    spec.max_factors = 2;
    spec.max_depth = 1;

    for (int b = 0; b < batches; ++b) {
        GrammarPolicy old_policy(spec, 0.5 + unit(rng));
        for (Eigen::Index i = 0; i < old_policy.logits().size(); ++i) {
            old_policy.logits()(i) = nd(rng);
        }
        GrammarPolicy ref = old_policy;
        for (Eigen::Index i = 0; i < ref.logits().size(); ++i) {
            ref.logits()(i) += 0.5 * nd(rng);
        }
        UpdateConfig cfg;
        cfg.kl_beta = 0.1 * unit(rng);

        std::vector<GroupBatch> groups(2);
        for (auto& g : groups) {
            g.context.bias = Eigen::VectorXd::Zero(old_policy.logits().size());
            for (Eigen::Index i = 0; i < g.context.bias.size(); ++i) {
                g.context.bias(i) = unit(rng) < 0.1 ? nd(rng) : 0.0;
            }
            g.samples = sample_group(old_policy, g.context, 4, rng());
            for (const auto& s : g.samples) {
                std::vector<double> a(s.tokens.size());
                for (auto& v : a) {
                    v = nd(rng);
                }
                g.advantages.push_back(std::move(a));
            }
        }

        // perturb away from the clip boundaries
        GrammarPolicy policy = old_policy;
        bool ok = false;
        for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
            policy.logits() = old_policy.logits();
            for (Eigen::Index i = 0; i < policy.logits().size(); ++i) {
                policy.logits()(i) += 0.15 * nd(rng);
            }
            ok = true;
            for (const auto& g : groups) {
                for (const auto& s : g.samples) {
                    const auto lp = policy.token_logprobs(s, g.context.bias);
                    for (std::size_t k = 0; k < lp.size(); ++k) {
                        const double r = std::exp(lp[k] - s.logprobs[k]);
                        if (std::abs(r - (1.0 - cfg.clip_eps)) <= 1e-3 || std::abs(r - (1.0 + cfg.clip_eps)) <= 1e-3) {
                            ok = false;
                        }
                    }
                }
            }
        }
        if (!ok) {
            continue;
        }

        const auto res = pitpo_loss(policy, ref, groups, cfg);
        Eigen::VectorXd fd(res.gradient.size());
        const double h = 1e-6;
        GrammarPolicy probe = policy;
        for (Eigen::Index i = 0; i < fd.size(); ++i) {
            const double keep = probe.logits()(i);
            probe.logits()(i) = keep + h;
            const double up = pitpo_loss(probe, ref, groups, cfg).loss;
            probe.logits()(i) = keep - h;
            const double down = pitpo_loss(probe, ref, groups, cfg).loss;
            probe.logits()(i) = keep;
            fd(i) = (up - down) / (2 * h);
        }
        const double scale = std::max({fd.norm(), res.gradient.norm(), 1e-8});
        const double rel = (fd - res.gradient).norm() / scale;
        ++rep.batches;
        rep.max_relative_error = std::max(rep.max_relative_error, rel);
        if (!(rel < 1e-5)) {
            ++rep.failures;
        }
    }
    return rep;
}

}  // namespace pitpo::policy
