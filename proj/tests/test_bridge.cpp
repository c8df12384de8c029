#include <doctest.h>

#include <thread>

#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include "pitpo/bridge.hpp"

using namespace pitpo;
using namespace pitpo::bridge;
using nlohmann::json;

namespace {

// One-connection loopback server answering with the echo responder.
class LoopbackServer {
public:
    explicit LoopbackServer(EchoOptions opt) : echo_(std::move(opt))
    {
        srv_ = ::socket(AF_INET, SOCK_STREAM, 0);
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        addr.sin_port = 0;
        ::bind(srv_, reinterpret_cast<sockaddr*>(&addr), sizeof addr);
        ::listen(srv_, 1);
        socklen_t len = sizeof addr;
        ::getsockname(srv_, reinterpret_cast<sockaddr*>(&addr), &len);
        port_ = ntohs(addr.sin_port);
        thread_ = std::thread([this] { serve(); });
    }
    ~LoopbackServer()
    {
        thread_.join();
        ::close(srv_);
    }
    [[nodiscard]] int port() const { return port_; }

private:
    void serve()
    {
        const int fd = ::accept(srv_, nullptr, nullptr);
        std::string buf;
        char chunk[1024];
        for (;;) {
            const auto n = ::read(fd, chunk, sizeof chunk);
            if (n <= 0) {
                break;
            }
            buf.append(chunk, static_cast<std::size_t>(n));
            for (auto nl = buf.find('\n'); nl != std::string::npos; nl = buf.find('\n')) {
                auto out = echo_.reply(buf.substr(0, nl)) + "\n";
                buf.erase(0, nl + 1);
                if (::write(fd, out.data(), out.size()) < 0) {
                    break;
                }
            }
        }
        ::close(fd);
    }

    EchoResponder echo_;
    int srv_{-1};
    int port_{0};
    std::thread thread_;
};

GenerateRequest request(const std::string& id, int n)
{
    GenerateRequest r;
    r.request_id = id;
    r.n_samples = n;
    r.context = {{"c0*x^2", 4.0}, {"c0*x", 1.5}};
    return r;
}

}  // namespace

TEST_CASE("messages carry type and version and round trip")
{
    const auto req = request("r1", 3);
    const auto j = to_json(req);
    CHECK(j["type"] == "generate_request");
    CHECK(j["version"] == kVersion);
    const auto back = parse_request(j);
    CHECK(back.request_id == "r1");
    CHECK(back.n_samples == 3);
    CHECK(back.context == req.context);

    auto extra = j;
    extra["future_field"] = {1, 2, 3};
    CHECK_NOTHROW(parse_request(extra));

    auto wrong = j;
    wrong["version"] = "pitpo/0";
    CHECK_THROWS_AS(parse_request(wrong), ProtocolError);
    CHECK_THROWS_AS(parse_line("{not json"), ProtocolError);

    const json err{{"type", "error"}, {"version", kVersion}, {"request_id", "r1"}, {"message", "boom"}};
    CHECK_THROWS_AS(parse_response(err), ProtocolError);
}

TEST_CASE("response validation")
{
    const auto req = request("v", 2);
    GenerateResponse resp;
    resp.request_id = "v";
    resp.samples.push_back({"c0*x", {"c0", "*", "x"}, {-0.1, -0.2, -0.3}, std::nullopt});
    CHECK_THROWS_AS(validate_response(req, resp), ProtocolError);
    resp.samples.push_back(resp.samples[0]);
    CHECK_NOTHROW(validate_response(req, resp));
    resp.samples[1].logprobs.pop_back();
    CHECK_THROWS_AS(validate_response(req, resp), ProtocolError);
    resp.samples[1].logprobs = {-0.1, 0.5, -0.1};
    CHECK_THROWS_AS(validate_response(req, resp), ProtocolError);
    resp.samples[1].logprobs = {-0.1, -0.1, -0.1};
    resp.request_id = "other";
    CHECK_THROWS_AS(validate_response(req, resp), ProtocolError);
}

TEST_CASE("external samples map tokens to terms")
{
    ResponseSample s{"c0*x + c1*sin(x)", {"c0", "*", "x", "+", "c1", "*", "sin", "(", "x", ")"}, {}, std::nullopt};
    s.logprobs.assign(s.tokens.size(), -0.5);
    const auto sp = to_sampled(s, {"x"});
    REQUIRE(sp.term_token_map.size() == 10);
    CHECK(sp.term_token_map[0] == std::optional<std::size_t>{0});
    CHECK(sp.term_token_map[4] == std::optional<std::size_t>{1});

    ResponseSample bad{"c0*x +", {"c0", "*", "x", "+"}, {-1, -1, -1, -1}, std::nullopt};
    const auto sb = to_sampled(bad, {"x"});
    CHECK(sb.tokens.size() == 4);
    for (const auto& t : sb.term_token_map) {
        CHECK_FALSE(t.has_value());
    }
}

TEST_CASE("conformance suite against the echo adapter")
{
    const auto cases = conformance_suite({ECHO_ADAPTER_PATH}, std::chrono::milliseconds(5000));
    CHECK(cases.size() >= 9);
    for (const auto& c : cases) {
        INFO(c.name << ": " << c.detail);
        CHECK(c.passed);
    }
}

TEST_CASE("tcp transport with request correlation")
{
    LoopbackServer server(EchoOptions{"c0*x^2", "ok"});
    Client client(std::make_unique<TcpTransport>("127.0.0.1", server.port()), std::chrono::milliseconds(5000));
    const auto resp = client.generate(request("tcp-1", 4));
    REQUIRE(resp.samples.size() == 4);
    CHECK(resp.samples[0].text == "c0*x^2");
    CHECK(resp.samples[0].tokens.size() == resp.samples[0].logprobs.size());

    UpdateRecord r;
    r.request_id = "tcp-1";
    r.sample_index = 2;
    r.advantages.assign(resp.samples[2].tokens.size(), 0.25);
    r.penalty_flags.assign(r.advantages.size(), false);
    const auto ack = client.emit_update({r});
    CHECK(ack["type"] == "ack");
    CHECK(ack["records"][0] == to_json(r));

    const auto empty = client.emit_update({});
    CHECK(empty["type"] == "ack");
}
