#include <cerrno>
#include <csignal>
#include <cstring>

#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "pitpo/bridge.hpp"

namespace pitpo::bridge {

namespace {

void ignore_sigpipe()
{
    static const bool once = [] {
        std::signal(SIGPIPE, SIG_IGN);
        return true;
    }();
    (void)once;
}

void write_all(int fd, const std::string& data)
{
    std::size_t done = 0;
    while (done < data.size()) {
        const auto n = ::write(fd, data.data() + done, data.size() - done);
        if (n < 0) {
            if (errno == EINTR) {
                continue;
            }
            throw ProtocolError(fmt::format("write to adapter failed: {}", std::strerror(errno)));
        }
        done += static_cast<std::size_t>(n);
    }
}

// Reads until a newline is buffered or the deadline passes.
std::optional<std::string> read_line(int fd, std::string& buffer, std::chrono::milliseconds timeout)
{
    using clock = std::chrono::steady_clock;
    const auto deadline = clock::now() + timeout;
    for (;;) {
        const auto nl = buffer.find('\n');
        if (nl != std::string::npos) {
            std::string line = buffer.substr(0, nl);
            buffer.erase(0, nl + 1);
            if (!line.empty() && line.back() == '\r') {
                line.pop_back();
            }
            return line;
        }
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - clock::now());
        if (left.count() <= 0) {
            return std::nullopt;
        }
        pollfd p{fd, POLLIN, 0};
        const int rc = ::poll(&p, 1, static_cast<int>(std::min<long long>(left.count(), 1 << 30)));
        if (rc < 0) {
            if (errno == EINTR) {
                continue;
            }
            throw ProtocolError(fmt::format("poll failed: {}", std::strerror(errno)));
        }
        if (rc == 0) {
            return std::nullopt;
        }
        char chunk[4096];
        const auto n = ::read(fd, chunk, sizeof chunk);
        if (n < 0) {
            if (errno == EINTR || errno == EAGAIN) {
                continue;
            }
            throw ProtocolError(fmt::format("read from adapter failed: {}", std::strerror(errno)));
        }
        if (n == 0) {
            throw ProtocolError("adapter closed the connection");
        }
        buffer.append(chunk, static_cast<std::size_t>(n));
    }
}

}  // namespace

StdioTransport::StdioTransport(const std::vector<std::string>& argv)
{
    if (argv.empty()) {
        throw std::invalid_argument("stdio transport: empty command");
    }
    ignore_sigpipe();
    int in[2];
    int out[2];
    if (::pipe(in) != 0 || ::pipe(out) != 0) {
        throw std::runtime_error(fmt::format("pipe: {}", std::strerror(errno)));
    }
    const pid_t pid = ::fork();
    if (pid < 0) {
        throw std::runtime_error(fmt::format("fork: {}", std::strerror(errno)));
    }
    if (pid == 0) {
        ::dup2(in[0], STDIN_FILENO);
        ::dup2(out[1], STDOUT_FILENO);
        ::close(in[0]);
        ::close(in[1]);
        ::close(out[0]);
        ::close(out[1]);
        std::vector<char*> args;
        for (const auto& a : argv) {
            args.push_back(const_cast<char*>(a.c_str()));
        }
        args.push_back(nullptr);
        ::execvp(args[0], args.data());
        std::fprintf(stderr, "exec %s: %s\n", args[0], std::strerror(errno));
        ::_exit(127);
    }
    ::close(in[0]);
    ::close(out[1]);
    ::fcntl(in[1], F_SETFD, FD_CLOEXEC);
    ::fcntl(out[0], F_SETFD, FD_CLOEXEC);
    pid_ = pid;
    to_child_ = in[1];
    from_child_ = out[0];
}

StdioTransport::~StdioTransport()
{
    if (to_child_ >= 0) {
        ::close(to_child_);
    }
    if (from_child_ >= 0) {
        ::close(from_child_);
    }
    if (pid_ > 0) {
        // give the adapter a moment to exit on EOF, then stop it
        for (int i = 0; i < 50; ++i) {
            if (::waitpid(pid_, nullptr, WNOHANG) == pid_) {
                return;
            }
            ::usleep(10000);
        }
        ::kill(pid_, SIGKILL);
        ::waitpid(pid_, nullptr, 0);
    }
}

void StdioTransport::send_line(const std::string& line)
{
    write_all(to_child_, line + "\n");
}

std::optional<std::string> StdioTransport::recv_line(std::chrono::milliseconds timeout)
{
    return read_line(from_child_, buffer_, timeout);
}

TcpTransport::TcpTransport(const std::string& host, int port)
{
    ignore_sigpipe();
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const auto service = std::to_string(port);
    if (const int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &res); rc != 0) {
        throw std::runtime_error(fmt::format("resolve {}:{}: {}", host, port, ::gai_strerror(rc)));
    }
    for (auto* a = res; a != nullptr; a = a->ai_next) {
        const int fd = ::socket(a->ai_family, a->ai_socktype | SOCK_CLOEXEC, a->ai_protocol);
        if (fd < 0) {
            continue;
        }
        if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) {
            fd_ = fd;
            break;
        }
        ::close(fd);
    }
    ::freeaddrinfo(res);
    if (fd_ < 0) {
        throw std::runtime_error(fmt::format("connect {}:{} failed", host, port));
    }
}

TcpTransport::~TcpTransport()
{
    if (fd_ >= 0) {
        ::close(fd_);
    }
}

void TcpTransport::send_line(const std::string& line)
{
    write_all(fd_, line + "\n");
}

std::optional<std::string> TcpTransport::recv_line(std::chrono::milliseconds timeout)
{
    return read_line(fd_, buffer_, timeout);
}

Client::Client(std::unique_ptr<Transport> transport, std::chrono::milliseconds timeout)
    : transport_(std::move(transport)), timeout_(timeout)
{
    if (!transport_) {
        throw std::invalid_argument("bridge client: null transport");
    }
}

nlohmann::json Client::await(const std::string& request_id)
{
    for (auto it = stash_.begin(); it != stash_.end(); ++it) {
        if (it->value("request_id", std::string{}) == request_id) {
            auto j = std::move(*it);
            stash_.erase(it);
            return j;
        }
    }
    using clock = std::chrono::steady_clock;
    const auto deadline = clock::now() + timeout_;
    for (;;) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - clock::now());
        if (left.count() <= 0) {
            throw TimeoutError(fmt::format("no reply to '{}' within {} ms", request_id, timeout_.count()));
        }
        const auto line = transport_->recv_line(left);
        if (!line) {
            throw TimeoutError(fmt::format("no reply to '{}' within {} ms", request_id, timeout_.count()));
        }
        if (line->empty()) {
            continue;
        }
        auto j = parse_line(*line);
        if (!j.is_object()) {
            throw ProtocolError("message is not a JSON object");
        }
        if (j.value("request_id", std::string{}) == request_id) {
            return j;
        }
        spdlog::debug("bridge: stashing reply for '{}'", j.value("request_id", std::string{}));
        stash_.push_back(std::move(j));
    }
}

GenerateResponse Client::generate(const GenerateRequest& req)
{
    transport_->send_line(to_json(req).dump());
    const auto resp = parse_response(await(req.request_id));
    validate_response(req, resp);
    for (std::size_t i = 0; i < resp.samples.size(); ++i) {
        remember_token_count(req.request_id, static_cast<int>(i), resp.samples[i].tokens.size());
    }
    return resp;
}

void Client::remember_token_count(const std::string& request_id, int sample_index, std::size_t tokens)
{
    delivered_[{request_id, sample_index}] = tokens;
}

nlohmann::json Client::emit_update(const std::vector<UpdateRecord>& records)
{
    for (const auto& r : records) {
        if (r.penalty_flags.size() != r.advantages.size()) {
            throw ProtocolError("update record: penalty_flags and advantages differ in length");
        }
        const auto it = delivered_.find({r.request_id, r.sample_index});
        if (it != delivered_.end() && it->second != r.advantages.size()) {
            throw ProtocolError(fmt::format("update record {}/{}: {} advantages for {} tokens", r.request_id,
                                            r.sample_index, r.advantages.size(), it->second));
        }
    }
    const auto id = fmt::format("update-{}", next_update_++);
    transport_->send_line(update_message(id, records).dump());
    auto reply = await(id);
    if (reply.value("type", std::string{}) == "error") {
        throw ProtocolError(fmt::format("adapter rejected update: {}", reply.value("message", std::string{})));
    }
    if (reply.value("type", std::string{}) != "ack" || reply.value("version", std::string{}) != kVersion) {
        throw ProtocolError("expected ack");
    }
    for (const auto& r : records) {
        delivered_.erase({r.request_id, r.sample_index});
    }
    return reply;
}

}  // namespace pitpo::bridge
