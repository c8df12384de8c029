#pragma once

#include <chrono>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pitpo/policy.hpp"

namespace pitpo::bridge {

inline constexpr const char* kVersion = "pitpo/1";

class ProtocolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class TimeoutError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct GenerateRequest {
    std::string request_id;
    int island{0};
    policy::Elites context;  // descending reward
    int n_samples{1};
    int max_tokens{256};
};

struct ResponseSample {
    std::string text;
    std::vector<std::string> tokens;
    std::vector<double> logprobs;
    std::optional<std::vector<double>> ref_logprobs;
};

struct GenerateResponse {
    std::string request_id;
    std::vector<ResponseSample> samples;
};

struct UpdateRecord {
    std::string request_id;
    int sample_index{0};
    std::vector<double> advantages;
    std::vector<bool> penalty_flags;
    double reward{0.0};
    double mse{0.0};
};

nlohmann::json to_json(const GenerateRequest& r);
nlohmann::json to_json(const GenerateResponse& r);
nlohmann::json to_json(const UpdateRecord& r);
nlohmann::json update_message(const std::string& request_id, const std::vector<UpdateRecord>& records);

// Parsing checks the envelope (type, version) and field shapes; throws ProtocolError.
GenerateRequest parse_request(const nlohmann::json& j);
GenerateResponse parse_response(const nlohmann::json& j);
UpdateRecord parse_record(const nlohmann::json& j);
nlohmann::json parse_line(const std::string& line);

// Cardinality, request id and per-sample logprob lengths.
void validate_response(const GenerateRequest& req, const GenerateResponse& resp);

// Engine-side view of an external sample. Tokens and term spans come from the
// adapter's token list; the term map is filled only when the text parses and
// tokenizes to the same list.
policy::SampledProgram to_sampled(const ResponseSample& s, const std::vector<std::string>& variables);

class Transport {
public:
    virtual ~Transport() = default;
    virtual void send_line(const std::string& line) = 0;
    // nullopt on timeout; throws ProtocolError when the peer has gone away
    virtual std::optional<std::string> recv_line(std::chrono::milliseconds timeout) = 0;
};

// Spawns the adapter as a child process and talks over its stdin/stdout.
class StdioTransport final : public Transport {
public:
    explicit StdioTransport(const std::vector<std::string>& argv);
    ~StdioTransport() override;
    StdioTransport(const StdioTransport&) = delete;
    StdioTransport& operator=(const StdioTransport&) = delete;

    void send_line(const std::string& line) override;
    std::optional<std::string> recv_line(std::chrono::milliseconds timeout) override;

private:
    int pid_{-1};
    int to_child_{-1};
    int from_child_{-1};
    std::string buffer_;
};

class TcpTransport final : public Transport {
public:
    TcpTransport(const std::string& host, int port);
    ~TcpTransport() override;
    TcpTransport(const TcpTransport&) = delete;
    TcpTransport& operator=(const TcpTransport&) = delete;

    void send_line(const std::string& line) override;
    std::optional<std::string> recv_line(std::chrono::milliseconds timeout) override;

private:
    int fd_{-1};
    std::string buffer_;
};

// Correlates requests and responses by request_id over one transport.
class Client {
public:
    explicit Client(std::unique_ptr<Transport> transport,
                    std::chrono::milliseconds timeout = std::chrono::milliseconds(120000));

    // throws TimeoutError or ProtocolError
    GenerateResponse generate(const GenerateRequest& req);
    // Records are checked against the delivered token counts before sending.
    // Returns the ack payload; throws ProtocolError on an error reply or a
    // length mismatch and TimeoutError when no ack arrives.
    nlohmann::json emit_update(const std::vector<UpdateRecord>& records);

    void remember_token_count(const std::string& request_id, int sample_index, std::size_t tokens);
    [[nodiscard]] std::chrono::milliseconds timeout() const noexcept { return timeout_; }

private:
    nlohmann::json await(const std::string& request_id);

    std::unique_ptr<Transport> transport_;
    std::chrono::milliseconds timeout_;
    std::deque<nlohmann::json> stash_;
    std::map<std::pair<std::string, int>, std::size_t> delivered_;
    std::uint64_t next_update_{0};
};

// Reference responder used by the echo adapter and the conformance suite.
struct EchoOptions {
    std::string program{"c0*x"};
    // ok | bad-json | bad-program | wrong-count | bad-logprobs | silent
    std::string mode{"ok"};
};
class EchoResponder {
public:
    explicit EchoResponder(EchoOptions opt) : opt_(std::move(opt)) {}
    // Reply line for one request line (empty: stay silent).
    std::string reply(const std::string& line);

private:
    EchoOptions opt_;
    std::map<std::pair<std::string, int>, std::size_t> delivered_;
};

struct ConformanceCase {
    std::string name;
    bool passed{false};
    std::string detail;
};

// Cardinality, token-count and update round-trip cases against an adapter
// command line. With fault_modes the adapter must also honor --mode (see
// EchoOptions) and the engine-side rejection paths are exercised.
std::vector<ConformanceCase> conformance_suite(const std::vector<std::string>& adapter_argv,
                                               std::chrono::milliseconds timeout, bool fault_modes = true);

}  // namespace pitpo::bridge
