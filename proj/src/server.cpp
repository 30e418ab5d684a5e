#include "cjade/server.hpp"

#include "cjade/image.hpp"
#include "cjade/io.hpp"
#include "cjade/models.hpp"
#include "cjade/net.hpp"
#include "cjade/protocol.hpp"

#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <iostream>
#include <mutex>
#include <thread>
#include <unordered_set>
#include <vector>

namespace cjade::server {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// grants model instances to requests in strict arrival order
class ComputeGate {
  public:
    explicit ComputeGate(int slots) {
        for (int i = 0; i < slots; ++i) free_.push_back(static_cast<std::size_t>(i));
    }

    // timeout_ms <= 0 waits forever; nullopt means the wait timed out
    std::optional<std::size_t> acquire(double timeout_ms) {
        std::unique_lock lk(mu_);
        Waiter w;
        queue_.push_back(&w);
        dispatch();
        if (timeout_ms <= 0) {
            cv_.wait(lk, [&] { return w.granted; });
        } else {
            const auto deadline =
                Clock::now() + std::chrono::duration_cast<Clock::duration>(
                                   std::chrono::duration<double, std::milli>(timeout_ms));
            if (!cv_.wait_until(lk, deadline, [&] { return w.granted; })) {
                queue_.erase(std::find(queue_.begin(), queue_.end(), &w));
                return std::nullopt;
            }
        }
        return w.slot;
    }

    void release(std::size_t slot) {
        std::lock_guard lk(mu_);
        free_.push_back(slot);
        dispatch();
    }

  private:
    struct Waiter {
        bool granted = false;
        std::size_t slot = 0;
    };

    void dispatch() { // mu_ held
        bool any = false;
        while (!queue_.empty() && !free_.empty()) {
            Waiter* w = queue_.front();
            queue_.pop_front();
            w->slot = free_.back();
            free_.pop_back();
            w->granted = true;
            any = true;
        }
        if (any) cv_.notify_all();
    }

    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<Waiter*> queue_;
    std::vector<std::size_t> free_;
};

struct SlotGuard {
    ComputeGate& gate;
    std::size_t slot;
    ~SlotGuard() { gate.release(slot); }
};

struct Worker {
    models::ModelArtifact model;
    std::optional<models::ModelArtifact> head;
};

} // namespace

struct Server::State {
    ServerConfig cfg;

    bool loaded = false;
    std::vector<Worker> workers;
    std::unique_ptr<ComputeGate> gate;
    std::uint16_t class_count = 0;
    std::uint16_t feature_len = 0; // 0: Features unsupported
    std::uint64_t edge_hash = 0;

    std::atomic<bool> running{false};
    std::atomic<std::uint64_t> served{0};
    net::Socket listener;
    int bound_port = 0;
    int wake_pipe[2] = {-1, -1};
    std::thread accept_thread;

    std::mutex conn_mu;
    std::vector<std::thread> conn_threads;
    std::unordered_set<int> open_fds;

    void log(int level, const std::string& msg) {
        if (cfg.log_level >= level) std::cerr << "[cjade-server] " << msg << "\n";
    }
};

namespace {

std::vector<float> probs_row0(const Tensor& t) {
    std::vector<float> out(static_cast<std::size_t>(t.shape[1]));
    for (int c = 0; c < t.shape[1]; ++c) out[static_cast<std::size_t>(c)] = t.at2(0, c);
    return out;
}

std::vector<float> compute_probs(Worker& w, const proto::ClassifyRequestPayload& req) {
    if (req.kind == cascade::PayloadKind::Features) {
        std::vector<float> feats = proto::dequantize_features(req.features);
        Tensor in({1, static_cast<int>(feats.size())});
        in.data = std::move(feats);
        return probs_row0(models::predict_probs(*w.head, in));
    }
    const int S = w.model.net.input_shape[1];
    Tensor image = req.image;
    if (req.kind == cascade::PayloadKind::Roi &&
        (image.shape[1] != S || image.shape[2] != S))
        image = img::resize_bilinear(image, S, S);
    return probs_row0(nn::softmax_rows(models::multiscale_forward(w.model, image)));
}

void send_error(net::Socket& sock, proto::ErrorCode code, const std::string& msg) {
    net::send_frame(sock, proto::MsgType::Error, proto::encode_error({code, msg}));
}

bool handle_classify(Server::State& st, net::Socket& sock, const proto::Frame& frame) {
    const Clock::time_point t0 = Clock::now();
    const proto::ClassifyRequestPayload req = proto::decode_classify_request(frame.payload);
    const double timeout = st.cfg.compute_timeout_ms;

    if (req.kind == cascade::PayloadKind::Features) {
        if (st.feature_len == 0) {
            send_error(sock, proto::ErrorCode::Unsupported, "no feature head configured");
            return true;
        }
        if (req.features.q.size() != st.feature_len) {
            send_error(sock, proto::ErrorCode::Malformed,
                       "feature length " + std::to_string(req.features.q.size()) + ", head expects " +
                           std::to_string(st.feature_len));
            return true;
        }
    } else if (req.image.shape[0] != st.workers[0].model.net.input_shape[0]) {
        send_error(sock, proto::ErrorCode::Malformed,
                   "image has " + std::to_string(req.image.shape[0]) + " channels, model expects " +
                       std::to_string(st.workers[0].model.net.input_shape[0]));
        return true;
    }

    std::optional<std::size_t> slot = st.gate->acquire(timeout);
    if (!slot) {
        send_error(sock, proto::ErrorCode::Timeout, "compute slot wait exceeded timeout");
        return true;
    }
    SlotGuard guard{*st.gate, *slot};
    if (timeout > 0 && ms_since(t0) > timeout) {
        send_error(sock, proto::ErrorCode::Timeout, "request exceeded compute timeout");
        return true;
    }

    std::vector<float> probs;
    std::uint32_t compute_us = 0;
    try {
        const Clock::time_point c0 = Clock::now();
        probs = compute_probs(st.workers[*slot], req);
        const double us = ms_since(c0) * 1000.0;
        compute_us = us >= 4294967295.0 ? 4294967295u : static_cast<std::uint32_t>(us);
    } catch (const std::exception& e) {
        send_error(sock, proto::ErrorCode::Internal, e.what());
        return true;
    }
    if (timeout > 0 && ms_since(t0) > timeout) {
        send_error(sock, proto::ErrorCode::Timeout, "request exceeded compute timeout");
        return true;
    }

    // counted before the bytes go out so the total is never behind what a
    // joined client has already seen
    ++st.served;
    net::send_frame(sock, proto::MsgType::ClassifyResp,
                    proto::encode_classify_response({req.request_id, probs, compute_us}));
    st.log(2, "served request " + std::to_string(req.request_id));
    return true;
}

// false: close the connection
bool handle_frame(Server::State& st, net::Socket& sock, const proto::Frame& frame) {
    switch (frame.type) {
    case proto::MsgType::Ping:
        net::send_frame(sock, proto::MsgType::Pong, {});
        return true;
    case proto::MsgType::Hello:
        net::send_frame(sock, proto::MsgType::Hello,
                        proto::encode_hello({st.class_count, st.feature_len, st.edge_hash}));
        return true;
    case proto::MsgType::ClassifyReq:
        return handle_classify(st, sock, frame);
    default:
        send_error(sock, proto::ErrorCode::Malformed,
                   "unexpected message type " + std::to_string(static_cast<int>(frame.type)));
        return false;
    }
}

void serve_connection(Server::State& st, net::Socket& sock) {
    proto::FrameReader reader;
    std::uint8_t buf[16384];
    try {
        for (;;) {
            std::optional<proto::Frame> frame;
            while (!(frame = reader.next())) {
                const std::size_t n = sock.recv_some(buf, sizeof(buf));
                if (n == 0) return; // peer closed or shutdown drained
                reader.feed(buf, n);
            }
            if (!handle_frame(st, sock, *frame)) return;
        }
    } catch (const proto::ProtocolError& e) {
        st.log(2, std::string("closing connection: ") + e.what());
        try {
            send_error(sock, proto::ErrorCode::Malformed, e.what());
        } catch (...) {
        }
    } catch (const net::NetError& e) {
        st.log(2, std::string("connection dropped: ") + e.what());
    } catch (const std::exception& e) {
        st.log(1, std::string("internal error: ") + e.what());
        try {
            send_error(sock, proto::ErrorCode::Internal, e.what());
        } catch (...) {
        }
    }
}

void connection_entry(Server::State& st, net::Socket sock) {
    const int fd = sock.fd();
    serve_connection(st, sock);
    std::lock_guard lk(st.conn_mu);
    st.open_fds.erase(fd);
}

void accept_loop(Server::State& st) {
    for (;;) {
        pollfd fds[2] = {{st.listener.fd(), POLLIN, 0}, {st.wake_pipe[0], POLLIN, 0}};
        if (::poll(fds, 2, -1) < 0) {
            if (errno == EINTR) continue;
            return;
        }
        if (fds[1].revents != 0) return;
        if ((fds[0].revents & POLLIN) == 0) continue;
        int cfd = ::accept4(st.listener.fd(), nullptr, nullptr, SOCK_CLOEXEC);
        if (cfd < 0) {
            if (errno == EINTR || errno == ECONNABORTED) continue;
            return;
        }
        int one = 1;
        ::setsockopt(cfd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
        std::lock_guard lk(st.conn_mu);
        st.open_fds.insert(cfd);
        st.conn_threads.emplace_back(connection_entry, std::ref(st), net::Socket(cfd));
    }
}

net::Socket bind_listener(const std::string& host, int port, int* bound_port) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = AI_PASSIVE;
    addrinfo* res = nullptr;
    int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res);
    if (rc != 0) throw net::NetError("resolve " + host + ": " + gai_strerror(rc));

    net::NetError last("bind: no addresses");
    for (addrinfo* ai = res; ai; ai = ai->ai_next) {
        int fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
        if (fd < 0) continue;
        net::Socket s(fd);
        int one = 1;
        ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        if (::bind(fd, ai->ai_addr, ai->ai_addrlen) < 0 || ::listen(fd, 64) < 0) {
            last = net::NetError("bind " + host + ":" + std::to_string(port) + ": " +
                                 std::strerror(errno));
            continue;
        }
        sockaddr_storage ss{};
        socklen_t len = sizeof(ss);
        ::getsockname(fd, reinterpret_cast<sockaddr*>(&ss), &len);
        if (ss.ss_family == AF_INET)
            *bound_port = ntohs(reinterpret_cast<sockaddr_in*>(&ss)->sin_port);
        else
            *bound_port = ntohs(reinterpret_cast<sockaddr_in6*>(&ss)->sin6_port);
        ::freeaddrinfo(res);
        return s;
    }
    ::freeaddrinfo(res);
    throw last;
}

} // namespace

Server::Server(ServerConfig cfg) : st_(std::make_unique<State>()) {
    if (cfg.max_concurrency < 1) throw ValueError("max_concurrency must be >= 1");
    if (cfg.weights_path.empty()) throw ValueError("weights_path is required");
    st_->cfg = std::move(cfg);
}

Server::~Server() {
    try {
        stop();
    } catch (...) {
    }
}

void Server::load_and_warm() {
    State& st = *st_;
    if (st.loaded) return;
    for (int i = 0; i < st.cfg.max_concurrency; ++i) {
        Worker w;
        w.model = models::load_model(st.cfg.weights_path);
        if (w.model.class_count < 2) throw ValueError("model has fewer than 2 classes");
        if (w.model.net.input_shape.size() != 3)
            throw ValueError("model input is not CHW");
        Tensor dummy({1, w.model.net.input_shape[0], w.model.net.input_shape[1],
                      w.model.net.input_shape[2]});
        models::predict_probs(w.model, dummy);

        if (!st.cfg.feature_head_path.empty()) {
            w.head = models::load_model(st.cfg.feature_head_path);
            if (w.head->net.input_shape.size() != 1 || w.head->net.input_shape[0] < 1)
                throw ValueError("feature head input is not a flat vector");
            if (w.head->class_count != w.model.class_count)
                throw ValueError("feature head class count differs from model");
            Tensor fdummy({1, w.head->net.input_shape[0]});
            models::predict_probs(*w.head, fdummy);
        }
        st.workers.push_back(std::move(w));
    }
    st.class_count = static_cast<std::uint16_t>(st.workers[0].model.class_count);
    if (st.workers[0].head) {
        st.feature_len = static_cast<std::uint16_t>(st.workers[0].head->net.input_shape[0]);
        st.edge_hash = st.workers[0].head->meta.value("edge_hash", std::uint64_t{0});
    }
    st.gate = std::make_unique<ComputeGate>(st.cfg.max_concurrency);
    st.loaded = true;
    st.log(1, "warm: " + std::to_string(st.workers.size()) + " model instance(s) ready");
}

void Server::start() {
    State& st = *st_;
    if (st.running.load()) throw ValueError("server already running");
    load_and_warm();
    st.listener = bind_listener(st.cfg.host, st.cfg.port, &st.bound_port);
    if (::pipe2(st.wake_pipe, O_CLOEXEC) != 0) throw net::NetError("pipe2 failed");
    st.running.store(true);
    st.accept_thread = std::thread(accept_loop, std::ref(st));
    st.log(1, "listening on " + st.cfg.host + ":" + std::to_string(st.bound_port));
}

void Server::stop() {
    State& st = *st_;
    if (!st.running.exchange(false)) return;
    // wake the accept loop, then drain: reads are shut down so handlers see
    // EOF after finishing the request they already parsed
    (void)!::write(st.wake_pipe[1], "x", 1);
    st.accept_thread.join();
    st.listener.close();
    {
        std::lock_guard lk(st.conn_mu);
        for (int fd : st.open_fds) ::shutdown(fd, SHUT_RD);
    }
    std::vector<std::thread> threads;
    {
        std::lock_guard lk(st.conn_mu);
        threads.swap(st.conn_threads);
    }
    for (std::thread& t : threads) t.join();
    ::close(st.wake_pipe[0]);
    ::close(st.wake_pipe[1]);
    st.wake_pipe[0] = st.wake_pipe[1] = -1;
    st.log(1, "stopped after " + std::to_string(st.served.load()) + " request(s)");
}

bool Server::running() const { return st_->running.load(); }

int Server::port() const { return st_->bound_port; }

std::uint64_t Server::requests_served() const { return st_->served.load(); }

} // namespace cjade::server
