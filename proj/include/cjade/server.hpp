#pragma once

#include <cstdint>
#include <memory>
#include <string>

namespace cjade::server {

struct ServerConfig {
    std::string host = "127.0.0.1";
    int port = 0; // 0 picks a free port, readable via Server::port() after start
    std::string weights_path;
    std::string feature_head_path; // empty: Features payloads answered with Unsupported
    int max_concurrency = 2;
    double compute_timeout_ms = 0; // <= 0: no limit
    int log_level = 0;             // 0 silent, 1 lifecycle, 2 per-request
};

// Hosts the large model behind the wire protocol. Compute is bounded by
// max_concurrency model instances granted to requests in FIFO arrival order;
// socket I/O runs on per-connection threads so a slow client never holds a
// compute slot.
class Server {
  public:
    struct State;

    explicit Server(ServerConfig cfg);
    ~Server();
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    // loads and shape-checks the weights, then runs one dummy forward per
    // instance so the first real request pays no initialization cost
    void load_and_warm();
    void start();
    // stops accepting, lets in-flight requests finish, joins all threads
    void stop();

    bool running() const;
    int port() const;
    std::uint64_t requests_served() const;

  private:
    std::unique_ptr<State> st_;
};

} // namespace cjade::server
