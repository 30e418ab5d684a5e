#include "cjade/protocol.hpp"

#include "cjade/common.hpp"

#include <cmath>
#include <cstring>

#include "doctest.h"

using namespace cjade;
using namespace cjade::proto;

namespace {

std::vector<std::uint8_t> random_payload(Rng& rng, std::size_t max_len) {
    std::vector<std::uint8_t> p(rng.next_below(max_len + 1));
    for (auto& b : p) b = static_cast<std::uint8_t>(rng.next_u64() & 0xFF);
    return p;
}

Tensor random_image(Rng& rng, int c, int h, int w) {
    Tensor t({c, h, w});
    for (auto& v : t.data) v = rng.uniform(0.0f, 1.0f);
    return t;
}

} // namespace

TEST_CASE("ping frame matches pinned bytes") {
    const std::vector<std::uint8_t> expected = {0xC1, 0x0D, 0x01, 0x05, 0x00, 0x00,
                                                0x00, 0x00, 0xD5, 0xA5, 0x45, 0xB1};
    auto frame = encode_frame(MsgType::Ping, {});
    CHECK(frame == expected);

    std::size_t consumed = 0;
    Frame f = decode_frame(frame.data(), frame.size(), &consumed);
    CHECK(f.type == MsgType::Ping);
    CHECK(f.payload.empty());
    CHECK(consumed == frame.size());
}

TEST_CASE("ten thousand random frames round-trip") {
    Rng rng(2024);
    for (int i = 0; i < 10000; ++i) {
        auto type = static_cast<MsgType>(1 + rng.next_below(6));
        auto payload = random_payload(rng, 2048);
        auto bytes = encode_frame(type, payload);
        REQUIRE(bytes.size() == kFrameOverhead + payload.size());

        std::size_t consumed = 0;
        Frame f = decode_frame(bytes.data(), bytes.size(), &consumed);
        REQUIRE(consumed == bytes.size());
        REQUIRE(f.type == type);
        REQUIRE(f.payload == payload);
    }
}

TEST_CASE("every single-byte mutation is rejected") {
    Rng rng(7);
    auto payload = random_payload(rng, 0);
    payload = std::vector<std::uint8_t>(32);
    for (auto& b : payload) b = static_cast<std::uint8_t>(rng.next_u64() & 0xFF);
    auto bytes = encode_frame(MsgType::ClassifyReq, payload);

    for (std::size_t pos = 0; pos < bytes.size(); ++pos) {
        for (int delta = 1; delta < 256; ++delta) {
            auto bad = bytes;
            bad[pos] ^= static_cast<std::uint8_t>(delta);
            CHECK_THROWS_AS(decode_frame(bad.data(), bad.size(), nullptr), ProtocolError);
        }
    }
}

TEST_CASE("every truncation asks for more bytes") {
    auto bytes = encode_frame(MsgType::Hello, {1, 2, 3, 4, 5});
    for (std::size_t len = 0; len < bytes.size(); ++len)
        CHECK_THROWS_AS(decode_frame(bytes.data(), len, nullptr), NeedMoreBytes);
}

TEST_CASE("oversize declared length rejected before buffering") {
    std::vector<std::uint8_t> header = {kMagic0, kMagic1, kVersion, 0x02, 0xFF, 0xFF, 0xFF, 0xFF};
    CHECK_THROWS_AS(decode_frame(header.data(), header.size(), nullptr), OversizeFrame);
    CHECK_THROWS_AS(encode_frame(MsgType::Ping, std::vector<std::uint8_t>(kMaxPayload + 1)), OversizeFrame);
}

TEST_CASE("frame reader reassembles one byte at a time") {
    Rng rng(99);
    std::vector<Frame> sent;
    std::vector<std::uint8_t> wire;
    for (int i = 0; i < 3; ++i) {
        Frame f{static_cast<MsgType>(1 + rng.next_below(6)), random_payload(rng, 300)};
        auto bytes = encode_frame(f.type, f.payload);
        wire.insert(wire.end(), bytes.begin(), bytes.end());
        sent.push_back(std::move(f));
    }

    FrameReader reader;
    std::vector<Frame> got;
    for (std::uint8_t b : wire) {
        reader.feed(&b, 1);
        while (auto f = reader.next()) got.push_back(std::move(*f));
    }
    REQUIRE(got.size() == sent.size());
    for (std::size_t i = 0; i < sent.size(); ++i) CHECK(got[i] == sent[i]);
    CHECK(!reader.next().has_value());
    CHECK(reader.buffered() == 0);
    CHECK(!reader.failed());
}

TEST_CASE("empty reader reports nothing") {
    FrameReader reader;
    CHECK(!reader.next().has_value());
    CHECK(!reader.failed());
}

TEST_CASE("corrupt frame fails the stream permanently") {
    auto a = encode_frame(MsgType::Ping, {});
    auto b = encode_frame(MsgType::Pong, {9, 9});
    b[b.size() - 3] ^= 0x10;

    FrameReader reader;
    reader.feed(a.data(), a.size());
    reader.feed(b.data(), b.size());

    auto first = reader.next();
    REQUIRE(first.has_value());
    CHECK(first->type == MsgType::Ping);

    CHECK_THROWS_AS(reader.next(), CorruptFrame);
    CHECK(reader.failed());
    CHECK_THROWS_AS(reader.next(), ProtocolError);
}

TEST_CASE("decoder is total on random garbage") {
    Rng rng(555);
    for (int i = 0; i < 5000; ++i) {
        auto junk = random_payload(rng, 64);
        try {
            std::size_t consumed = 0;
            Frame f = decode_frame(junk.data(), junk.size(), &consumed);
            CHECK(consumed <= junk.size());
            (void)f;
        } catch (const ProtocolError&) {
        }
    }
}

TEST_CASE("payload decoders are total on random garbage") {
    Rng rng(556);
    for (int i = 0; i < 5000; ++i) {
        auto junk = random_payload(rng, 96);
        try {
            (void)decode_classify_request(junk);
        } catch (const ProtocolError&) {
        }
        try {
            (void)decode_classify_response(junk);
        } catch (const ProtocolError&) {
        }
        try {
            (void)decode_error(junk);
        } catch (const ProtocolError&) {
        }
        try {
            (void)decode_hello(junk);
        } catch (const ProtocolError&) {
        }
    }
}

TEST_CASE("bad version and bad type are rejected after integrity check") {
    auto make_with = [](std::uint8_t version, std::uint8_t type) {
        std::vector<std::uint8_t> raw = {kMagic0, kMagic1, version, type, 0, 0, 0, 0};
        // recompute a valid checksum so only the field check can fire
        std::uint32_t crc = 0xFFFFFFFFu;
        for (std::uint8_t byte : raw) {
            crc ^= byte;
            for (int k = 0; k < 8; ++k) crc = (crc & 1) ? 0xEDB88320u ^ (crc >> 1) : (crc >> 1);
        }
        crc ^= 0xFFFFFFFFu;
        for (int i = 0; i < 4; ++i) raw.push_back(static_cast<std::uint8_t>((crc >> (8 * i)) & 0xFF));
        return raw;
    };

    auto good = make_with(kVersion, 0x05);
    CHECK(decode_frame(good.data(), good.size(), nullptr).type == MsgType::Ping);

    auto bad_version = make_with(2, 0x05);
    CHECK_THROWS_AS(decode_frame(bad_version.data(), bad_version.size(), nullptr), ProtocolError);
    CHECK_THROWS_WITH(decode_frame(bad_version.data(), bad_version.size(), nullptr),
                      doctest::Contains("version"));

    auto bad_type = make_with(kVersion, 0x07);
    CHECK_THROWS_WITH(decode_frame(bad_type.data(), bad_type.size(), nullptr), doctest::Contains("type"));

    auto zero_type = make_with(kVersion, 0x00);
    CHECK_THROWS_AS(decode_frame(zero_type.data(), zero_type.size(), nullptr), ProtocolError);
}

TEST_CASE("quantization maps the documented example") {
    auto qf = quantize_features({-1.0f, 0.0f, 1.0f});
    CHECK(qf.q == std::vector<std::uint8_t>{0, 128, 255});
    CHECK(qf.scale == doctest::Approx(2.0f / 255.0f).epsilon(1e-7));

    auto back = dequantize_features(qf);
    CHECK(back[0] == doctest::Approx(-1.0f).epsilon(1e-6));
    CHECK(back[2] == doctest::Approx(1.0f).epsilon(1e-6));
    CHECK(std::fabs(back[1]) <= qf.scale * 0.5f + 1e-9f);
}

TEST_CASE("all-zero features survive quantization exactly") {
    auto qf = quantize_features(std::vector<float>(64, 0.0f));
    CHECK(qf.scale == 1.0f);
    for (auto b : qf.q) CHECK(b == 128);
    auto back = dequantize_features(qf);
    for (float v : back) CHECK(v == 0.0f);
}

TEST_CASE("quantization error stays within half a step") {
    Rng rng(31);
    for (int trial = 0; trial < 1000; ++trial) {
        std::size_t len = 1 + rng.next_below(256);
        float range = std::exp(rng.uniform(-6.0f, 10.0f));
        std::vector<float> v(len);
        for (auto& x : v) x = rng.uniform(-range, range);

        auto qf = quantize_features(v);
        auto back = dequantize_features(qf);
        REQUIRE(back.size() == v.size());
        float bound = qf.scale * 0.5f * 1.0001f;
        for (std::size_t i = 0; i < v.size(); ++i) REQUIRE(std::fabs(back[i] - v[i]) <= bound);
    }
}

TEST_CASE("quantization rejects unusable input") {
    CHECK_THROWS_AS(quantize_features({0.0f, std::nanf("")}), ValueError);
    CHECK_THROWS_AS(quantize_features({2e6f}), ValueError);
    CHECK_THROWS_AS(dequantize_features({{1, 2, 3}, 0.0f}), MalformedPayload);
    CHECK_THROWS_AS(dequantize_features({{1, 2, 3}, -1.0f}), MalformedPayload);
}

TEST_CASE("classify request round-trips for every payload kind") {
    Rng rng(404);

    ClassifyRequestPayload full;
    full.request_id = 0xDEADBEEFCAFE0001ULL;
    full.kind = cascade::PayloadKind::FullImage;
    full.image = random_image(rng, 3, 32, 32);
    auto full_bytes = encode_classify_request(full);
    CHECK(full_bytes.size() == 8 + 1 + 6 + 3 * 32 * 32 * 4);
    CHECK(decode_classify_request(full_bytes) == full);

    ClassifyRequestPayload roi;
    roi.request_id = 2;
    roi.kind = cascade::PayloadKind::Roi;
    roi.image = random_image(rng, 3, 8, 8);
    roi.box = {4, 5, 8, 8};
    auto roi_bytes = encode_classify_request(roi);
    CHECK(roi_bytes.size() == 8 + 1 + 6 + 3 * 8 * 8 * 4 + 8);
    CHECK(decode_classify_request(roi_bytes) == roi);

    std::vector<float> feats(128);
    for (auto& f : feats) f = rng.uniform(-3.0f, 3.0f);
    ClassifyRequestPayload fp;
    fp.request_id = 3;
    fp.kind = cascade::PayloadKind::Features;
    fp.features = quantize_features(feats);
    auto feat_bytes = encode_classify_request(fp);
    CHECK(feat_bytes.size() == 8 + 1 + 2 + 4 + 128);
    CHECK(decode_classify_request(feat_bytes) == fp);

    CHECK(feat_bytes.size() < roi_bytes.size());
    CHECK(roi_bytes.size() < full_bytes.size());
}

TEST_CASE("classify request rejects structural lies") {
    Rng rng(405);
    ClassifyRequestPayload roi;
    roi.kind = cascade::PayloadKind::Roi;
    roi.image = random_image(rng, 3, 8, 8);
    roi.box = {0, 0, 9, 8};
    CHECK_THROWS_AS(encode_classify_request(roi), ValueError);

    roi.box = {0, 0, 8, 8};
    auto bytes = encode_classify_request(roi);
    bytes.push_back(0);
    CHECK_THROWS_AS(decode_classify_request(bytes), MalformedPayload);

    bytes.pop_back();
    bytes[8] = 7;
    CHECK_THROWS_AS(decode_classify_request(bytes), MalformedPayload);
}

TEST_CASE("classify response round-trips and validates probabilities") {
    ClassifyResponsePayload m;
    m.request_id = 77;
    m.probs = {0.1f, 0.2f, 0.3f, 0.4f};
    m.compute_us = 12345;
    auto bytes = encode_classify_response(m);
    CHECK(bytes.size() == 8 + 2 + 4 * 4 + 4);
    CHECK(decode_classify_response(bytes) == m);

    ClassifyResponsePayload bad = m;
    bad.probs = {0.1f, 0.2f};
    CHECK_THROWS_AS(encode_classify_response(bad), MalformedPayload);
    bad.probs = {};
    CHECK_THROWS_AS(encode_classify_response(bad), MalformedPayload);
}

TEST_CASE("error and hello payloads round-trip") {
    ErrorPayload e{ErrorCode::Timeout, "cloud busy"};
    auto eb = encode_error(e);
    CHECK(decode_error(eb) == e);
    eb[0] = 99;
    CHECK_THROWS_AS(decode_error(eb), MalformedPayload);

    HelloPayload h{10, 128, 0x1122334455667788ULL};
    auto hb = encode_hello(h);
    CHECK(hb.size() == 12);
    CHECK(decode_hello(hb) == h);
    hb.pop_back();
    CHECK_THROWS_AS(decode_hello(hb), MalformedPayload);
    CHECK_THROWS_AS(encode_hello(HelloPayload{0, 128, 1}), ValueError);
}

TEST_CASE("consumed length lets frames chain") {
    auto a = encode_frame(MsgType::Hello, {1});
    auto b = encode_frame(MsgType::Pong, {2, 3});
    std::vector<std::uint8_t> wire = a;
    wire.insert(wire.end(), b.begin(), b.end());

    std::size_t consumed = 0;
    Frame fa = decode_frame(wire.data(), wire.size(), &consumed);
    CHECK(fa.type == MsgType::Hello);
    CHECK(consumed == a.size());

    Frame fb = decode_frame(wire.data() + consumed, wire.size() - consumed, &consumed);
    CHECK(fb.type == MsgType::Pong);
    CHECK(consumed == b.size());
}
