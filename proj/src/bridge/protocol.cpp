#include <cmath>

#include <fmt/format.h>

#include "pitpo/bridge.hpp"

namespace pitpo::bridge {

using nlohmann::json;

namespace {

json envelope(const char* type, const std::string& request_id)
{
    return json{{"type", type}, {"version", kVersion}, {"request_id", request_id}};
}

void expect_type(const json& j, const char* type)
{
    if (!j.is_object()) {
        throw ProtocolError("message is not a JSON object");
    }
    if (j.value("version", std::string{}) != kVersion) {
        throw ProtocolError(fmt::format("unsupported protocol version '{}'", j.value("version", std::string{})));
    }
    const auto t = j.value("type", std::string{});
    if (t == "error" && std::string(type) != "error") {
        throw ProtocolError(fmt::format("adapter error: {}", j.value("message", std::string{"(no message)"})));
    }
    if (t != type) {
        throw ProtocolError(fmt::format("expected '{}' message, got '{}'", type, t));
    }
    if (!j.contains("request_id") || !j["request_id"].is_string()) {
        throw ProtocolError("missing request_id");
    }
}

template <class T>
T field(const json& j, const char* key)
{
    if (!j.contains(key)) {
        throw ProtocolError(fmt::format("missing field '{}'", key));
    }
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ProtocolError(fmt::format("bad field '{}': {}", key, e.what()));
    }
}

}  // namespace

json to_json(const GenerateRequest& r)
{
    json j = envelope("generate_request", r.request_id);
    j["island"] = r.island;
    json ctx = json::array();
    for (const auto& [text, reward] : r.context) {
        ctx.push_back({{"program", text}, {"reward", std::isfinite(reward) ? json(reward) : json(nullptr)}});
    }
    j["context"] = std::move(ctx);
    j["n_samples"] = r.n_samples;
    j["max_tokens"] = r.max_tokens;
    return j;
}

json to_json(const GenerateResponse& r)
{
    json j = envelope("generate_response", r.request_id);
    json samples = json::array();
    for (const auto& s : r.samples) {
        json e{{"text", s.text}, {"tokens", s.tokens}, {"logprobs", s.logprobs}};
        if (s.ref_logprobs) {
            e["ref_logprobs"] = *s.ref_logprobs;
        }
        samples.push_back(std::move(e));
    }
    j["samples"] = std::move(samples);
    return j;
}

json to_json(const UpdateRecord& r)
{
    return json{{"request_id", r.request_id},
                {"sample_index", r.sample_index},
                {"advantages", r.advantages},
                {"penalty_flags", r.penalty_flags},
                {"reward", r.reward},
                {"mse", std::isfinite(r.mse) ? json(r.mse) : json(nullptr)}};
}

json update_message(const std::string& request_id, const std::vector<UpdateRecord>& records)
{
    json j = envelope("update", request_id);
    json recs = json::array();
    for (const auto& r : records) {
        recs.push_back(to_json(r));
    }
    j["records"] = std::move(recs);
    return j;
}

GenerateRequest parse_request(const json& j)
{
    expect_type(j, "generate_request");
    GenerateRequest r;
    r.request_id = j["request_id"].get<std::string>();
    r.island = field<int>(j, "island");
    r.n_samples = field<int>(j, "n_samples");
    r.max_tokens = j.value("max_tokens", 256);
    if (r.n_samples < 1) {
        throw ProtocolError("n_samples must be positive");
    }
    if (j.contains("context")) {
        if (!j["context"].is_array()) {
            throw ProtocolError("context must be an array");
        }
        for (const auto& e : j["context"]) {
            const double reward = e.contains("reward") && e["reward"].is_number() ? e["reward"].get<double>()
                                                                                   : -HUGE_VAL;
            r.context.emplace_back(field<std::string>(e, "program"), reward);
        }
    }
    return r;
}

GenerateResponse parse_response(const json& j)
{
    expect_type(j, "generate_response");
    GenerateResponse r;
    r.request_id = j["request_id"].get<std::string>();
    if (!j.contains("samples") || !j["samples"].is_array()) {
        throw ProtocolError("samples must be an array");
    }
    for (const auto& e : j["samples"]) {
        ResponseSample s;
        s.text = field<std::string>(e, "text");
        s.tokens = field<std::vector<std::string>>(e, "tokens");
        s.logprobs = field<std::vector<double>>(e, "logprobs");
        if (e.contains("ref_logprobs") && !e["ref_logprobs"].is_null()) {
            s.ref_logprobs = field<std::vector<double>>(e, "ref_logprobs");
        }
        r.samples.push_back(std::move(s));
    }
    return r;
}

UpdateRecord parse_record(const json& j)
{
    UpdateRecord r;
    r.request_id = field<std::string>(j, "request_id");
    r.sample_index = field<int>(j, "sample_index");
    r.advantages = field<std::vector<double>>(j, "advantages");
    r.penalty_flags = field<std::vector<bool>>(j, "penalty_flags");
    r.reward = field<double>(j, "reward");
    r.mse = j.contains("mse") && j["mse"].is_number() ? j["mse"].get<double>() : HUGE_VAL;
    if (r.penalty_flags.size() != r.advantages.size()) {
        throw ProtocolError("penalty_flags and advantages differ in length");
    }
    return r;
}

json parse_line(const std::string& line)
{
    try {
        return json::parse(line);
    } catch (const json::exception& e) {
        throw ProtocolError(fmt::format("malformed JSON: {}", e.what()));
    }
}

void validate_response(const GenerateRequest& req, const GenerateResponse& resp)
{
    if (resp.request_id != req.request_id) {
        throw ProtocolError(fmt::format("response id '{}' does not match request '{}'", resp.request_id, req.request_id));
    }
    if (static_cast<int>(resp.samples.size()) != req.n_samples) {
        throw ProtocolError(fmt::format("expected {} samples, got {}", req.n_samples, resp.samples.size()));
    }
    for (std::size_t i = 0; i < resp.samples.size(); ++i) {
        const auto& s = resp.samples[i];
        if (s.tokens.empty()) {
            throw ProtocolError(fmt::format("sample {} has no tokens", i));
        }
        if (s.logprobs.size() != s.tokens.size()) {
            throw ProtocolError(fmt::format("sample {}: {} logprobs for {} tokens", i, s.logprobs.size(), s.tokens.size()));
        }
        if (s.ref_logprobs && s.ref_logprobs->size() != s.tokens.size()) {
            throw ProtocolError(fmt::format("sample {}: ref_logprobs length differs from token count", i));
        }
        for (const double v : s.logprobs) {
            if (!std::isfinite(v) || v > 1e-9) {
                throw ProtocolError(fmt::format("sample {}: logprob {} is not a log-probability", i, v));
            }
        }
    }
}

policy::SampledProgram to_sampled(const ResponseSample& s, const std::vector<std::string>& variables)
{
    policy::SampledProgram out;
    out.text = s.text;
    out.logprobs = s.logprobs;
    out.tokens.reserve(s.tokens.size());
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
        expr::Token t;
        t.text = s.tokens[i];
        t.index = i;
        out.tokens.push_back(std::move(t));
    }
    out.term_token_map.assign(s.tokens.size(), std::nullopt);
    try {
        const auto toks = expr::tokenize(s.text);
        bool same = toks.size() == s.tokens.size();
        for (std::size_t i = 0; same && i < toks.size(); ++i) {
            same = toks[i].text == s.tokens[i];
        }
        if (!same) {
            return out;
        }
        const auto sk = expr::parse(s.text, variables);
        out.tokens = toks;
        out.term_token_map = sk.token_terms();
    } catch (const std::exception&) {
        // left unmapped; the evaluation path reports the parse failure
    }
    return out;
}

}  // namespace pitpo::bridge
