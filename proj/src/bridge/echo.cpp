#include <fmt/format.h>

#include "pitpo/bridge.hpp"

namespace pitpo::bridge {

using nlohmann::json;

namespace {

std::string error_line(const std::string& request_id, const std::string& message)
{
    return json{{"type", "error"}, {"version", kVersion}, {"request_id", request_id}, {"message", message}}.dump();
}

std::vector<std::string> token_texts(const std::string& text)
{
    std::vector<std::string> out;
    for (const auto& t : expr::tokenize(text)) {
        out.push_back(t.text);
    }
    return out;
}

}  // namespace

std::string EchoResponder::reply(const std::string& line)
{
    if (opt_.mode == "silent") {
        return {};
    }
    json j;
    try {
        j = parse_line(line);
    } catch (const ProtocolError& e) {
        return error_line("", e.what());
    }
    const auto id = j.value("request_id", std::string{});
    const auto type = j.value("type", std::string{});
    try {
        if (type == "generate_request") {
            const auto req = parse_request(j);
            if (opt_.mode == "bad-json") {
                return "{\"type\": \"generate_response\", \"samples\": [";
            }
            GenerateResponse resp;
            resp.request_id = req.request_id;
            int n = req.n_samples;
            if (opt_.mode == "wrong-count") {
                n = n > 1 ? n - 1 : 2;
            }
            const std::string text = opt_.mode == "bad-program" ? std::string("c0*x +") : opt_.program;
            for (int i = 0; i < n; ++i) {
                ResponseSample s;
                s.text = text;
                s.tokens = token_texts(text);
                s.logprobs.assign(s.tokens.size(), -0.25);
                if (opt_.mode == "bad-logprobs") {
                    s.logprobs.pop_back();
                }
                delivered_[{req.request_id, i}] = s.tokens.size();
                resp.samples.push_back(std::move(s));
            }
            return to_json(resp).dump();
        }
        if (type == "update") {
            if (j.value("version", std::string{}) != kVersion) {
                return error_line(id, "unsupported protocol version");
            }
            if (!j.contains("records") || !j["records"].is_array()) {
                return error_line(id, "update without records");
            }
            for (const auto& rj : j["records"]) {
                const auto r = parse_record(rj);
                const auto it = delivered_.find({r.request_id, r.sample_index});
                if (it == delivered_.end()) {
                    return error_line(id, fmt::format("unknown sample {}/{}", r.request_id, r.sample_index));
                }
                if (it->second != r.advantages.size()) {
                    return error_line(id, fmt::format("token-count mismatch for {}/{}: {} advantages, {} tokens",
                                                      r.request_id, r.sample_index, r.advantages.size(), it->second));
                }
            }
            return json{{"type", "ack"}, {"version", kVersion}, {"request_id", id}, {"records", j["records"]}}.dump();
        }
        return error_line(id, fmt::format("unknown message type '{}'", type));
    } catch (const std::exception& e) {
        return error_line(id, e.what());
    }
}

}  // namespace pitpo::bridge
