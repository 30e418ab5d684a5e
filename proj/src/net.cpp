#include "cjade/net.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>

namespace cjade::net {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

[[noreturn]] void throw_errno(const std::string& what) {
    throw NetError(what + ": " + std::strerror(errno));
}

} // namespace

Socket& Socket::operator=(Socket&& o) noexcept {
    if (this != &o) {
        close();
        fd_ = o.fd_;
        o.fd_ = -1;
    }
    return *this;
}

void Socket::close() {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

void Socket::shutdown_read() {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RD);
}

void Socket::send_all(const std::uint8_t* data, std::size_t len) {
    std::size_t off = 0;
    while (off < len) {
        ssize_t n = ::send(fd_, data + off, len - off, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw_errno("send");
        }
        off += static_cast<std::size_t>(n);
    }
}

std::size_t Socket::recv_some(std::uint8_t* buf, std::size_t max) {
    for (;;) {
        ssize_t n = ::recv(fd_, buf, max, 0);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw_errno("recv");
        }
        return static_cast<std::size_t>(n);
    }
}

bool Socket::wait_readable(double timeout_ms) {
    pollfd pfd{fd_, POLLIN, 0};
    int ms = timeout_ms < 0 ? 0 : static_cast<int>(std::ceil(timeout_ms));
    for (;;) {
        int rc = ::poll(&pfd, 1, ms);
        if (rc < 0) {
            if (errno == EINTR) continue;
            throw_errno("poll");
        }
        return rc > 0;
    }
}

Socket connect_tcp(const std::string& host, int port, double timeout_ms) {
    if (port <= 0 || port > 65535) throw NetError("invalid port " + std::to_string(port));

    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res);
    if (rc != 0) throw NetError("resolve " + host + ": " + gai_strerror(rc));

    NetError last("connect: no addresses");
    for (addrinfo* ai = res; ai; ai = ai->ai_next) {
        int fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
        if (fd < 0) continue;
        Socket s(fd);

        int flags = ::fcntl(fd, F_GETFL, 0);
        ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
        rc = ::connect(fd, ai->ai_addr, ai->ai_addrlen);
        if (rc < 0 && errno == EINPROGRESS) {
            pollfd pfd{fd, POLLOUT, 0};
            int ms = timeout_ms < 0 ? 0 : static_cast<int>(std::ceil(timeout_ms));
            rc = ::poll(&pfd, 1, ms);
            if (rc == 0) {
                last = NetError("connect " + host + ": timed out");
                continue;
            }
            int err = 0;
            socklen_t len = sizeof(err);
            ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
            if (err != 0) {
                last = NetError("connect " + host + ": " + std::strerror(err));
                continue;
            }
        } else if (rc < 0) {
            last = NetError("connect " + host + ": " + std::strerror(errno));
            continue;
        }
        ::fcntl(fd, F_SETFL, flags);
        int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
        ::freeaddrinfo(res);
        return s;
    }
    ::freeaddrinfo(res);
    throw last;
}

void send_frame(Socket& s, proto::MsgType type, const std::vector<std::uint8_t>& payload) {
    std::vector<std::uint8_t> frame = proto::encode_frame(type, payload);
    s.send_all(frame.data(), frame.size());
}

std::optional<proto::Frame> recv_frame(Socket& s, proto::FrameReader& reader, double timeout_ms) {
    Clock::time_point t0 = Clock::now();
    std::uint8_t buf[4096];
    for (;;) {
        if (std::optional<proto::Frame> f = reader.next()) return f;
        double remaining = timeout_ms - ms_since(t0);
        if (remaining <= 0) return std::nullopt;
        if (!s.wait_readable(remaining)) return std::nullopt;
        std::size_t n = s.recv_some(buf, sizeof(buf));
        if (n == 0) throw NetError("connection closed by peer");
        reader.feed(buf, n);
    }
}

RemoteCloud::RemoteCloud(std::string host, int port) : host_(std::move(host)), port_(port) {}

void RemoteCloud::ensure_connected(double timeout_ms) {
    if (sock_.valid()) return;
    sock_ = connect_tcp(host_, port_, timeout_ms);
    reader_ = proto::FrameReader();
    hello_.reset();
}

bool RemoteCloud::ping(double timeout_ms) {
    try {
        ensure_connected(timeout_ms);
        send_frame(sock_, proto::MsgType::Ping, {});
        std::optional<proto::Frame> f = recv_frame(sock_, reader_, timeout_ms);
        return f && f->type == proto::MsgType::Pong;
    } catch (const std::exception&) {
        sock_.close();
        return false;
    }
}

proto::HelloPayload RemoteCloud::hello(double timeout_ms) {
    ensure_connected(timeout_ms);
    if (hello_) return *hello_;
    send_frame(sock_, proto::MsgType::Hello, {});
    std::optional<proto::Frame> f = recv_frame(sock_, reader_, timeout_ms);
    if (!f) throw NetError("hello: timed out");
    if (f->type != proto::MsgType::Hello) throw NetError("hello: unexpected reply type");
    hello_ = proto::decode_hello(f->payload);
    return *hello_;
}

cascade::CloudReply RemoteCloud::classify(const cascade::CloudRequest& request, double timeout_ms) {
    Clock::time_point t0 = Clock::now();
    cascade::CloudReply reply;
    try {
        ensure_connected(timeout_ms);

        proto::ClassifyRequestPayload p;
        p.request_id = next_request_id_++;
        p.kind = request.kind;
        if (request.kind == cascade::PayloadKind::Features) {
            proto::HelloPayload h = hello(timeout_ms);
            if (h.feature_len == 0) {
                reply.error = "server does not accept feature payloads";
                return reply;
            }
            if (expected_edge_hash_ && h.edge_model_hash != *expected_edge_hash_) {
                reply.error = "server feature space pinned to a different edge model";
                return reply;
            }
            p.features = proto::quantize_features(request.features);
        } else {
            p.image = request.image;
            if (request.kind == cascade::PayloadKind::Roi) p.box = request.box;
        }

        std::vector<std::uint8_t> body = proto::encode_classify_request(p);
        send_frame(sock_, proto::MsgType::ClassifyReq, body);
        reply.bytes_sent = body.size() + proto::kFrameOverhead;

        double remaining = timeout_ms - ms_since(t0);
        std::optional<proto::Frame> f = recv_frame(sock_, reader_, remaining);
        if (!f) {
            sock_.close();
            reply.error = "timed out waiting for reply";
            return reply;
        }
        reply.bytes_received = f->payload.size() + proto::kFrameOverhead;

        if (f->type == proto::MsgType::Error) {
            proto::ErrorPayload e = proto::decode_error(f->payload);
            reply.error = e.message;
            return reply;
        }
        if (f->type != proto::MsgType::ClassifyResp) {
            sock_.close();
            reply.error = "unexpected reply type";
            return reply;
        }
        proto::ClassifyResponsePayload r = proto::decode_classify_response(f->payload);
        if (r.request_id != p.request_id) {
            sock_.close();
            reply.error = "reply request id mismatch";
            return reply;
        }
        reply.ok = true;
        reply.probs = std::move(r.probs);
        reply.cloud_ms = r.compute_us / 1000.0;
        reply.network_ms = std::max(0.0, ms_since(t0) - reply.cloud_ms);
        return reply;
    } catch (const std::exception& e) {
        sock_.close();
        reply.ok = false;
        reply.error = e.what();
        return reply;
    }
}

} // namespace cjade::net
