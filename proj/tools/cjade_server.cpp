// Serves the large model over the wire protocol until SIGINT/SIGTERM.

#include "cjade/server.hpp"

#include "CLI11.hpp"
#include "tool_common.hpp"

#include <atomic>
#include <csignal>
#include <iostream>

#include <poll.h>
#include <unistd.h>

namespace {

int g_signal_pipe[2] = {-1, -1};

void on_signal(int) {
    const char b = 1;
    [[maybe_unused]] ssize_t n = ::write(g_signal_pipe[1], &b, 1);
}

} // namespace

int main(int argc, char** argv) {
    using namespace cjade;

    CLI::App app{"jade classification server"};
    std::string listen = "127.0.0.1:9317";
    server::ServerConfig cfg;
    app.add_option("--listen", listen, "address as HOST:PORT (port 0 picks a free port)")
        ->envname("CJADE_LISTEN")
        ->capture_default_str();
    app.add_option("--weights", cfg.weights_path, "large model weight file")
        ->envname("CJADE_WEIGHTS")
        ->required();
    app.add_option("--feature-head", cfg.feature_head_path,
                   "feature head weight file; omitting refuses Features payloads")
        ->envname("CJADE_FEATURE_HEAD");
    app.add_option("--max-concurrency", cfg.max_concurrency, "parallel compute slots")
        ->envname("CJADE_MAX_CONCURRENCY")
        ->capture_default_str();
    app.add_option("--compute-timeout-ms", cfg.compute_timeout_ms,
                   "per-request compute timeout, 0 disables")
        ->envname("CJADE_COMPUTE_TIMEOUT_MS")
        ->capture_default_str();
    app.add_option("--log-level", cfg.log_level, "0 quiet, 1 connections, 2 requests")
        ->envname("CJADE_LOG_LEVEL")
        ->capture_default_str();
    CLI11_PARSE(app, argc, argv);

    try {
        const tool::HostPort hp = [&] {
            // accept a bare port too
            if (listen.find(':') == std::string::npos) {
                tool::HostPort p;
                p.port = std::stoi(listen);
                return p;
            }
            return tool::parse_host_port(listen);
        }();
        cfg.host = hp.host;
        cfg.port = static_cast<std::uint16_t>(hp.port);

        server::Server srv(cfg);
        srv.load_and_warm();
        srv.start();
        std::cout << "listening on " << cfg.host << ":" << srv.port() << std::endl;

        if (::pipe(g_signal_pipe) != 0) throw ValueError("signal pipe failed");
        std::signal(SIGINT, on_signal);
        std::signal(SIGTERM, on_signal);
        pollfd pfd{g_signal_pipe[0], POLLIN, 0};
        while (::poll(&pfd, 1, -1) < 0) {
            // EINTR from the signal itself; the pipe byte settles the race
        }
        std::cout << "shutting down after " << srv.requests_served() << " requests" << std::endl;
        srv.stop();
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
}
