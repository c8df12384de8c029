// Reference adapter: answers every generate_request with a fixed program.
// Speaks JSONL on stdin/stdout, or on one TCP connection with --listen.

#include <cstdio>
#include <iostream>
#include <string>

#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <CLI11.hpp>

#include "pitpo/bridge.hpp"

namespace {

int serve_tcp(int port, pitpo::bridge::EchoResponder& echo)
{
    const int srv = ::socket(AF_INET, SOCK_STREAM, 0);
    int one = 1;
    ::setsockopt(srv, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::bind(srv, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(srv, 1) != 0) {
        std::perror("echo_adapter: listen");
        return 1;
    }
    socklen_t len = sizeof addr;
    ::getsockname(srv, reinterpret_cast<sockaddr*>(&addr), &len);
    std::cerr << "listening on " << ntohs(addr.sin_port) << std::endl;
    const int fd = ::accept(srv, nullptr, nullptr);
    ::close(srv);
    if (fd < 0) {
        std::perror("echo_adapter: accept");
        return 1;
    }
    std::string buf;
    char chunk[4096];
    for (;;) {
        const auto n = ::read(fd, chunk, sizeof chunk);
        if (n <= 0) {
            break;
        }
        buf.append(chunk, static_cast<std::size_t>(n));
        for (auto nl = buf.find('\n'); nl != std::string::npos; nl = buf.find('\n')) {
            const auto line = buf.substr(0, nl);
            buf.erase(0, nl + 1);
            auto out = echo.reply(line);
            if (!out.empty()) {
                out += '\n';
                if (::write(fd, out.data(), out.size()) < 0) {
                    break;
                }
            }
        }
    }
    ::close(fd);
    return 0;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"echo adapter"};
    pitpo::bridge::EchoOptions opt;
    int port = -1;
    app.add_option("--program", opt.program, "program returned for every sample");
    app.add_option("--mode", opt.mode, "ok | bad-json | bad-program | wrong-count | bad-logprobs | silent")
        ->check(CLI::IsMember({"ok", "bad-json", "bad-program", "wrong-count", "bad-logprobs", "silent"}));
    app.add_option("--listen", port, "serve one TCP connection on this port (0: any)");
    CLI11_PARSE(app, argc, argv);

    pitpo::bridge::EchoResponder echo(opt);
    if (port >= 0) {
        return serve_tcp(port, echo);
    }
    std::string line;
    while (std::getline(std::cin, line)) {
        const auto out = echo.reply(line);
        if (!out.empty()) {
            std::cout << out << '\n' << std::flush;
        }
    }
    return 0;
}
