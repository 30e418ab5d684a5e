#pragma once

#include "cjade/cascade.hpp"
#include "cjade/protocol.hpp"

#include <cstdint>
#include <optional>
#include <string>

namespace cjade::net {

struct NetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// move-only owner of a connected TCP socket
class Socket {
  public:
    Socket() = default;
    explicit Socket(int fd) : fd_(fd) {}
    Socket(Socket&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
    Socket& operator=(Socket&& o) noexcept;
    ~Socket() { close(); }
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;

    bool valid() const { return fd_ >= 0; }
    int fd() const { return fd_; }
    void close();
    void shutdown_read();

    void send_all(const std::uint8_t* data, std::size_t len);
    // up to max bytes; 0 on orderly peer close; throws NetError on failure
    std::size_t recv_some(std::uint8_t* buf, std::size_t max);
    // false on timeout
    bool wait_readable(double timeout_ms);

  private:
    int fd_ = -1;
};

Socket connect_tcp(const std::string& host, int port, double timeout_ms);

// blocking single-frame exchange helpers for one-in-flight sessions
void send_frame(Socket& s, proto::MsgType type, const std::vector<std::uint8_t>& payload);
std::optional<proto::Frame> recv_frame(Socket& s, proto::FrameReader& reader, double timeout_ms);

// TCP client for the classification service; implements the cascade
// transport. One in-flight request per instance, reconnects on demand.
class RemoteCloud : public cascade::CloudTransport {
  public:
    RemoteCloud(std::string host, int port);

    // when set, Features requests are refused unless the server's advertised
    // edge hash matches (version pinning of the feature space)
    void set_expected_edge_hash(std::uint64_t h) { expected_edge_hash_ = h; }

    bool ping(double timeout_ms = 1000.0);
    proto::HelloPayload hello(double timeout_ms = 1000.0);

    cascade::CloudReply classify(const cascade::CloudRequest& request, double timeout_ms) override;

  private:
    void ensure_connected(double timeout_ms);

    std::string host_;
    int port_;
    Socket sock_;
    proto::FrameReader reader_;
    std::uint64_t next_request_id_ = 1;
    std::optional<proto::HelloPayload> hello_;
    std::optional<std::uint64_t> expected_edge_hash_;
};

} // namespace cjade::net
