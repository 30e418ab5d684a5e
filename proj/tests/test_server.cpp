#include "doctest.h"

#include "cjade/image.hpp"
#include "cjade/io.hpp"
#include "cjade/models.hpp"
#include "cjade/net.hpp"
#include "cjade/protocol.hpp"
#include "cjade/server.hpp"

#include <atomic>
#include <cstdio>
#include <thread>

using namespace cjade;

namespace {

// small-input models keep forward passes cheap; identity of the weights does
// not matter for transport tests, only determinism
struct ServerRig {
    std::string weights = "/tmp/cjade_test_server_large.cjw";
    std::string head_weights = "/tmp/cjade_test_server_head.cjw";
    models::ModelArtifact large;
    models::ModelArtifact edge;
    models::ModelArtifact head;

    explicit ServerRig(int input_size = 32, int classes = 4, int feature_len = 64) {
        large = models::build_large(classes, input_size, 11);
        edge = models::build_lightweight(classes, input_size, 12);
        head = models::build_feature_head(feature_len, classes, 13);
        head.meta["edge_hash"] = edge.meta_hash();
        models::save_model(large, weights);
        models::save_model(head, head_weights);
    }

    server::ServerConfig config() const {
        server::ServerConfig cfg;
        cfg.weights_path = weights;
        cfg.feature_head_path = head_weights;
        return cfg;
    }
};

Tensor noise_image(int channels, int size, std::uint64_t seed) {
    Tensor img({channels, size, size});
    Rng rng(seed);
    for (auto& v : img.data) v = static_cast<float>(rng.next_double());
    return img;
}

std::vector<float> row0(const Tensor& t) {
    std::vector<float> out(static_cast<std::size_t>(t.shape[1]));
    for (int c = 0; c < t.shape[1]; ++c) out[static_cast<std::size_t>(c)] = t.at2(0, c);
    return out;
}

void check_close(const std::vector<float>& a, const std::vector<float>& b, float tol = 1e-5f) {
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(0).scale(1).epsilon(tol));
}

} // namespace

TEST_CASE("ping answers pong and hello advertises the service") {
    ServerRig rig;
    server::Server srv(rig.config());
    srv.start();

    net::RemoteCloud cloud("127.0.0.1", srv.port());
    CHECK(cloud.ping());

    proto::HelloPayload h = cloud.hello();
    CHECK(h.class_count == 4);
    CHECK(h.feature_len == 64);
    CHECK(h.edge_model_hash == rig.edge.meta_hash());

    srv.stop();
    CHECK_FALSE(srv.running());
}

TEST_CASE("remote classification equals in-process evaluation for every payload kind") {
    ServerRig rig;
    server::Server srv(rig.config());
    srv.start();

    net::RemoteCloud cloud("127.0.0.1", srv.port());

    SUBCASE("full image goes through multiscale") {
        Tensor img = noise_image(3, 32, 21);
        cascade::CloudRequest req;
        req.kind = cascade::PayloadKind::FullImage;
        req.image = img;
        cascade::CloudReply reply = cloud.classify(req, 10000);
        REQUIRE(reply.ok);
        check_close(reply.probs, row0(nn::softmax_rows(models::multiscale_forward(rig.large, img))));
        CHECK(reply.bytes_sent > img.data.size() * 4);
        CHECK(reply.bytes_received > 0);
    }

    SUBCASE("roi crops are resized to the model input") {
        Tensor crop = noise_image(3, 9, 22);
        cascade::CloudRequest req;
        req.kind = cascade::PayloadKind::Roi;
        req.image = crop;
        req.box = {2, 3, 9, 9};
        cascade::CloudReply reply = cloud.classify(req, 10000);
        REQUIRE(reply.ok);
        Tensor resized = img::resize_bilinear(crop, 32, 32);
        check_close(reply.probs, row0(nn::softmax_rows(models::multiscale_forward(rig.large, resized))));
    }

    SUBCASE("features go through the head after quantization") {
        Tensor img = noise_image(3, 32, 23);
        std::vector<float> feats = cascade::edge_features(rig.edge, img);
        REQUIRE(feats.size() == 64);

        cascade::CloudRequest req;
        req.kind = cascade::PayloadKind::Features;
        req.features = feats;
        cloud.set_expected_edge_hash(rig.edge.meta_hash());
        cascade::CloudReply reply = cloud.classify(req, 10000);
        REQUIRE(reply.ok);

        // the oracle sees the same quantization loss the server does
        std::vector<float> deq = proto::dequantize_features(proto::quantize_features(feats));
        Tensor in({1, 64});
        in.data = deq;
        check_close(reply.probs, row0(models::predict_probs(rig.head, in)));
    }

    srv.stop();
}

TEST_CASE("feature payloads are refused when no head is configured") {
    ServerRig rig;
    server::ServerConfig cfg = rig.config();
    cfg.feature_head_path.clear();
    server::Server srv(cfg);
    srv.start();

    net::RemoteCloud cloud("127.0.0.1", srv.port());
    CHECK(cloud.hello().feature_len == 0);

    cascade::CloudRequest req;
    req.kind = cascade::PayloadKind::Features;
    req.features.assign(64, 0.5f);
    cascade::CloudReply reply = cloud.classify(req, 10000);
    CHECK_FALSE(reply.ok);
    CHECK(reply.error.find("feature") != std::string::npos);

    srv.stop();
}

TEST_CASE("client side pins the feature space to the edge model hash") {
    ServerRig rig;
    server::Server srv(rig.config());
    srv.start();

    net::RemoteCloud cloud("127.0.0.1", srv.port());
    cloud.set_expected_edge_hash(rig.edge.meta_hash() ^ 1);
    cascade::CloudRequest req;
    req.kind = cascade::PayloadKind::Features;
    req.features.assign(64, 0.5f);
    cascade::CloudReply reply = cloud.classify(req, 10000);
    CHECK_FALSE(reply.ok);
    CHECK(reply.error.find("pinned") != std::string::npos);

    srv.stop();
}

TEST_CASE("wrong feature length answers a malformed error without closing") {
    ServerRig rig;
    server::Server srv(rig.config());
    srv.start();

    net::RemoteCloud cloud("127.0.0.1", srv.port());
    cascade::CloudRequest req;
    req.kind = cascade::PayloadKind::Features;
    req.features.assign(32, 0.25f);
    cascade::CloudReply reply = cloud.classify(req, 10000);
    CHECK_FALSE(reply.ok);
    CHECK(reply.error.find("length") != std::string::npos);

    // same connection still serves
    CHECK(cloud.ping());

    srv.stop();
}

TEST_CASE("fifty concurrent requests on four slots all come back with their own id") {
    ServerRig rig;
    server::ServerConfig cfg = rig.config();
    cfg.max_concurrency = 4;
    server::Server srv(cfg);
    srv.start();

    std::atomic<int> ok{0};
    std::vector<std::thread> clients;
    for (int t = 0; t < 10; ++t) {
        clients.emplace_back([&, t] {
            net::RemoteCloud cloud("127.0.0.1", srv.port());
            for (int i = 0; i < 5; ++i) {
                cascade::CloudRequest req;
                req.kind = cascade::PayloadKind::FullImage;
                req.image = noise_image(3, 32, static_cast<std::uint64_t>(t * 100 + i));
                cascade::CloudReply reply = cloud.classify(req, 30000);
                // RemoteCloud fails the reply on any id mismatch
                if (reply.ok) ++ok;
            }
        });
    }
    for (auto& c : clients) c.join();
    CHECK(ok.load() == 50);
    CHECK(srv.requests_served() == 50);

    srv.stop();
}

TEST_CASE("server survives garbage bytes and keeps serving") {
    ServerRig rig;
    server::Server srv(rig.config());
    srv.start();

    Rng rng(77);
    for (int conn = 0; conn < 8; ++conn) {
        net::Socket s = net::connect_tcp("127.0.0.1", srv.port(), 2000);
        std::vector<std::uint8_t> junk(512);
        for (auto& b : junk) b = static_cast<std::uint8_t>(rng.next_u64());
        if (conn % 2 == 0) junk[0] = 0xC1, junk[1] = 0x0D; // valid magic, corrupt rest
        try {
            s.send_all(junk.data(), junk.size());
            std::uint8_t buf[256];
            s.wait_readable(500);
            (void)s.recv_some(buf, sizeof(buf));
        } catch (const net::NetError&) {
            // reset by the server is an acceptable outcome
        }
    }

    net::RemoteCloud cloud("127.0.0.1", srv.port());
    CHECK(cloud.ping());
    srv.stop();
}

TEST_CASE("malformed payload answers an error frame then the connection closes") {
    ServerRig rig;
    server::Server srv(rig.config());
    srv.start();

    net::Socket s = net::connect_tcp("127.0.0.1", srv.port(), 2000);
    // classify request truncated to just the id: valid frame, bad payload
    std::vector<std::uint8_t> body(8, 0);
    net::send_frame(s, proto::MsgType::ClassifyReq, body);

    proto::FrameReader reader;
    std::optional<proto::Frame> f = net::recv_frame(s, reader, 5000);
    REQUIRE(f.has_value());
    CHECK(f->type == proto::MsgType::Error);
    CHECK(proto::decode_error(f->payload).code == proto::ErrorCode::Malformed);

    // server closes after the error frame
    std::uint8_t buf[64];
    CHECK(s.wait_readable(5000));
    CHECK(s.recv_some(buf, sizeof(buf)) == 0);

    srv.stop();
}

TEST_CASE("a tiny compute budget times out with the typed error") {
    ServerRig rig;
    server::ServerConfig cfg = rig.config();
    cfg.compute_timeout_ms = 1e-9;
    server::Server srv(cfg);
    srv.start();

    net::RemoteCloud cloud("127.0.0.1", srv.port());
    cascade::CloudRequest req;
    req.kind = cascade::PayloadKind::FullImage;
    req.image = noise_image(3, 32, 5);
    cascade::CloudReply reply = cloud.classify(req, 10000);
    CHECK_FALSE(reply.ok);
    CHECK(reply.error.find("timeout") != std::string::npos);

    srv.stop();
}

TEST_CASE("startup fails loudly on missing or corrupt weights") {
    ServerRig rig;

    server::ServerConfig missing = rig.config();
    missing.weights_path = "/tmp/cjade_test_server_nope.cjw";
    CHECK_THROWS(server::Server(missing).load_and_warm());

    // flip one payload byte: the weight file checksum must catch it
    std::vector<std::uint8_t> bytes = io::read_file(rig.weights);
    bytes[bytes.size() / 2] ^= 0x40;
    const std::string corrupt_path = "/tmp/cjade_test_server_corrupt.cjw";
    io::write_file(corrupt_path, bytes);
    server::ServerConfig corrupt = rig.config();
    corrupt.weights_path = corrupt_path;
    CHECK_THROWS_AS(server::Server(corrupt).load_and_warm(), io::ChecksumMismatch);

    CHECK_THROWS_AS(server::Server(server::ServerConfig{}), ValueError);
    server::ServerConfig bad = rig.config();
    bad.max_concurrency = 0;
    CHECK_THROWS_AS(server::Server{bad}, ValueError);
    std::remove(corrupt_path.c_str());
}

TEST_CASE("stop finishes the request already in flight") {
    ServerRig rig;
    server::Server srv(rig.config());
    srv.start();

    net::Socket s = net::connect_tcp("127.0.0.1", srv.port(), 2000);
    proto::ClassifyRequestPayload p;
    p.request_id = 31;
    p.kind = cascade::PayloadKind::FullImage;
    p.image = noise_image(3, 32, 6);
    net::send_frame(s, proto::MsgType::ClassifyReq, proto::encode_classify_request(p));

    // stop while the request is likely mid-compute; the reply must still land
    std::thread stopper([&] { srv.stop(); });
    proto::FrameReader reader;
    std::optional<proto::Frame> f = net::recv_frame(s, reader, 10000);
    stopper.join();
    REQUIRE(f.has_value());
    CHECK(f->type == proto::MsgType::ClassifyResp);
    CHECK(proto::decode_classify_response(f->payload).request_id == 31);
}
