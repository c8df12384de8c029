#include <fmt/format.h>

#include "pitpo/bridge.hpp"

namespace pitpo::bridge {

namespace {

std::unique_ptr<Client> spawn(std::vector<std::string> argv, const std::string& mode, std::chrono::milliseconds timeout)
{
    if (!mode.empty()) {
        argv.push_back("--mode");
        argv.push_back(mode);
    }
    return std::make_unique<Client>(std::make_unique<StdioTransport>(argv), timeout);
}

GenerateRequest request(const std::string& id, int n)
{
    GenerateRequest r;
    r.request_id = id;
    r.island = 0;
    r.n_samples = n;
    r.context = {{"c0*x", 1.0}};
    return r;
}

template <class Fn>
ConformanceCase run_case(std::string name, Fn&& fn)
{
    ConformanceCase c;
    c.name = std::move(name);
    try {
        c.detail = fn();
        c.passed = c.detail.empty();
    } catch (const std::exception& e) {
        c.detail = fmt::format("unexpected exception: {}", e.what());
    }
    return c;
}

// Empty string when fn raised E.
template <class E, class Fn>
std::string expect_throw(Fn&& fn)
{
    try {
        fn();
    } catch (const E&) {
        return {};
    }
    return "accepted a response that should have been rejected";
}

}  // namespace

std::vector<ConformanceCase> conformance_suite(const std::vector<std::string>& adapter_argv,
                                               std::chrono::milliseconds timeout, bool fault_modes)
{
    std::vector<ConformanceCase> out;
    const std::string ok_mode = fault_modes ? "ok" : "";

    out.push_back(run_case("cardinality", [&]() -> std::string {
        auto client = spawn(adapter_argv, ok_mode, timeout);
        for (const int n : {1, 4}) {
            const auto resp = client->generate(request(fmt::format("card-{}", n), n));
            if (static_cast<int>(resp.samples.size()) != n) {
                return fmt::format("asked for {}, got {}", n, resp.samples.size());
            }
        }
        return {};
    }));

    out.push_back(run_case("token_count", [&]() -> std::string {
        auto client = spawn(adapter_argv, ok_mode, timeout);
        const auto resp = client->generate(request("tok", 3));
        for (const auto& s : resp.samples) {
            if (s.logprobs.size() != s.tokens.size()) {
                return "logprob count differs from token count";
            }
            const auto toks = expr::tokenize(s.text);
            if (toks.size() != s.tokens.size()) {
                return fmt::format("'{}' tokenizes to {} tokens, adapter sent {}", s.text, toks.size(), s.tokens.size());
            }
            for (std::size_t i = 0; i < toks.size(); ++i) {
                if (toks[i].text != s.tokens[i]) {
                    return fmt::format("token {} is '{}', expected '{}'", i, s.tokens[i], toks[i].text);
                }
            }
        }
        return {};
    }));

    out.push_back(run_case("update_roundtrip", [&]() -> std::string {
        auto client = spawn(adapter_argv, ok_mode, timeout);
        const auto resp = client->generate(request("upd", 2));
        std::vector<UpdateRecord> recs;
        for (std::size_t i = 0; i < resp.samples.size(); ++i) {
            UpdateRecord r;
            r.request_id = "upd";
            r.sample_index = static_cast<int>(i);
            r.advantages.assign(resp.samples[i].tokens.size(), 0.5 - static_cast<double>(i));
            r.penalty_flags.assign(r.advantages.size(), false);
            r.penalty_flags.back() = true;
            r.reward = 3.0;
            r.mse = 1e-3;
            recs.push_back(std::move(r));
        }
        const auto ack = client->emit_update(recs);
        if (fault_modes) {
            if (!ack.contains("records") || ack["records"].size() != recs.size()) {
                return "ack does not echo the records";
            }
            for (std::size_t i = 0; i < recs.size(); ++i) {
                if (ack["records"][i] != to_json(recs[i])) {
                    return fmt::format("record {} changed in the round trip", i);
                }
            }
        }
        return {};
    }));

    out.push_back(run_case("update_length_mismatch", [&]() -> std::string {
        auto client = spawn(adapter_argv, ok_mode, timeout);
        const auto resp = client->generate(request("mis", 1));
        UpdateRecord r;
        r.request_id = "mis";
        r.advantages.assign(resp.samples[0].tokens.size() + 1, 0.0);
        r.penalty_flags.assign(r.advantages.size(), false);
        if (auto err = expect_throw<ProtocolError>([&] { client->emit_update({r}); }); !err.empty()) {
            return "engine sent a record whose length differs from the delivered tokens";
        }
        return {};
    }));

    if (!fault_modes) {
        return out;
    }

    out.push_back(run_case("adapter_rejects_mismatch", [&]() -> std::string {
        std::vector<std::string> argv = adapter_argv;
        argv.insert(argv.end(), {"--mode", "ok"});
        StdioTransport t(argv);
        t.send_line(to_json(request("raw", 1)).dump());
        const auto line = t.recv_line(timeout);
        if (!line) {
            return "no generate reply";
        }
        const auto resp = parse_response(parse_line(*line));
        UpdateRecord r;
        r.request_id = "raw";
        r.advantages.assign(resp.samples[0].tokens.size() + 2, 0.0);
        r.penalty_flags.assign(r.advantages.size(), false);
        t.send_line(update_message("raw-update", {r}).dump());
        const auto reply = t.recv_line(timeout);
        if (!reply) {
            return "no update reply";
        }
        const auto j = parse_line(*reply);
        if (j.value("type", std::string{}) != "error") {
            return "adapter acknowledged a mismatched update";
        }
        return {};
    }));

    out.push_back(run_case("wrong_cardinality_rejected", [&]() -> std::string {
        auto client = spawn(adapter_argv, "wrong-count", timeout);
        return expect_throw<ProtocolError>([&] { client->generate(request("wc", 4)); });
    }));

    out.push_back(run_case("logprob_length_rejected", [&]() -> std::string {
        auto client = spawn(adapter_argv, "bad-logprobs", timeout);
        return expect_throw<ProtocolError>([&] { client->generate(request("lp", 2)); });
    }));

    out.push_back(run_case("malformed_json_rejected", [&]() -> std::string {
        auto client = spawn(adapter_argv, "bad-json", timeout);
        return expect_throw<ProtocolError>([&] { client->generate(request("js", 2)); });
    }));

    out.push_back(run_case("unparseable_program_marked", [&]() -> std::string {
        auto client = spawn(adapter_argv, "bad-program", timeout);
        const auto resp = client->generate(request("bp", 2));
        for (const auto& s : resp.samples) {
            const auto sp = to_sampled(s, {"x"});
            if (sp.tokens.size() != s.tokens.size()) {
                return "token list not preserved";
            }
            bool parsed = true;
            try {
                (void)expr::parse(s.text);
            } catch (const std::exception&) {
                parsed = false;
            }
            if (parsed) {
                return fmt::format("'{}' was expected to be unparseable", s.text);
            }
        }
        return {};
    }));

    out.push_back(run_case("timeout", [&]() -> std::string {
        auto argv = adapter_argv;
        argv.insert(argv.end(), {"--mode", "silent"});
        Client client(std::make_unique<StdioTransport>(argv), std::chrono::milliseconds(200));
        return expect_throw<TimeoutError>([&] { client.generate(request("to", 1)); });
    }));

    return out;
}

}  // namespace pitpo::bridge
