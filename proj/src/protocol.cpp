#include "cjade/protocol.hpp"

#include "cjade/common.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>

namespace cjade::proto {

namespace {

std::uint32_t crc32_ieee(const std::uint8_t* data, std::size_t len) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : (c >> 1);
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::vector<std::uint8_t>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

std::uint32_t peek_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

struct Cursor {
    const std::uint8_t* p;
    std::size_t n;
    std::size_t off = 0;

    void need(std::size_t k) const {
        if (n - off < k) throw MalformedPayload("payload truncated");
    }
    std::uint8_t u8() {
        need(1);
        return p[off++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(p[off] | (p[off + 1] << 8));
        off += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = peek_u32(p + off);
        off += 4;
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t lo = u32();
        std::uint64_t hi = u32();
        return lo | (hi << 32);
    }
    float f32() { return std::bit_cast<float>(u32()); }
    void bytes(std::uint8_t* dst, std::size_t k) {
        need(k);
        if (k > 0) std::memcpy(dst, p + off, k);
        off += k;
    }
    void done() const {
        if (off != n) throw MalformedPayload("trailing bytes in payload");
    }
};

bool valid_msg_type(std::uint8_t t) {
    return t >= static_cast<std::uint8_t>(MsgType::Hello) && t <= static_cast<std::uint8_t>(MsgType::Pong);
}

std::uint16_t checked_u16(std::int64_t v, const char* what) {
    if (v < 0 || v > 0xFFFF) throw ValueError(std::string(what) + " out of u16 range: " + std::to_string(v));
    return static_cast<std::uint16_t>(v);
}

void put_image_dims(std::vector<std::uint8_t>& out, const Tensor& image) {
    if (image.ndim() != 3) throw ShapeError("image payload expects CHW, got " + image.shape_str());
    std::uint16_t c = checked_u16(image.shape[0], "image channels");
    std::uint16_t h = checked_u16(image.shape[1], "image height");
    std::uint16_t w = checked_u16(image.shape[2], "image width");
    if (c == 0 || h == 0 || w == 0) throw ValueError("image payload has empty dimension");
    put_u16(out, w);
    put_u16(out, h);
    put_u16(out, c);
}

void put_pixels(std::vector<std::uint8_t>& out, const Tensor& image) {
    for (float v : image.data) put_f32(out, v);
}

Tensor read_image_dims(Cursor& cur) {
    int w = cur.u16();
    int h = cur.u16();
    int c = cur.u16();
    if (c == 0 || h == 0 || w == 0) throw MalformedPayload("image payload has empty dimension");
    // bound allocation by bytes actually present before building the tensor
    cur.need(static_cast<std::uint64_t>(c) * h * w * 4);
    return Tensor({c, h, w});
}

void read_pixels(Cursor& cur, Tensor& img) {
    std::uint64_t count = static_cast<std::uint64_t>(img.numel());
    cur.need(count * 4);
    for (std::size_t i = 0; i < count; ++i) img.data[i] = cur.f32();
}

void check_probs(const std::vector<float>& probs) {
    if (probs.empty() || probs.size() > 0xFFFF) throw MalformedPayload("probs count out of range");
    double sum = 0.0;
    for (float x : probs) {
        if (!std::isfinite(x) || x < -1e-6f) throw MalformedPayload("probs contain invalid value");
        sum += x;
    }
    if (std::fabs(sum - 1.0) > 1e-5) throw MalformedPayload("probs do not sum to 1");
}

} // namespace

std::vector<std::uint8_t> encode_frame(MsgType type, const std::vector<std::uint8_t>& payload) {
    if (payload.size() > kMaxPayload) throw OversizeFrame("payload exceeds 16 MiB limit");
    if (!valid_msg_type(static_cast<std::uint8_t>(type))) throw ProtocolError("unknown message type");
    std::vector<std::uint8_t> out;
    out.reserve(kFrameOverhead + payload.size());
    out.push_back(kMagic0);
    out.push_back(kMagic1);
    out.push_back(kVersion);
    out.push_back(static_cast<std::uint8_t>(type));
    put_u32(out, static_cast<std::uint32_t>(payload.size()));
    out.insert(out.end(), payload.begin(), payload.end());
    put_u32(out, crc32_ieee(out.data(), out.size()));
    return out;
}

Frame decode_frame(const std::uint8_t* data, std::size_t len, std::size_t* consumed) {
    if (consumed) *consumed = 0;
    if (len < kHeaderSize) throw NeedMoreBytes("incomplete frame header");
    if (data[0] != kMagic0 || data[1] != kMagic1) throw ProtocolError("bad magic");
    std::uint32_t plen = peek_u32(data + 4);
    if (plen > kMaxPayload) throw OversizeFrame("declared payload exceeds 16 MiB limit");
    std::size_t total = kHeaderSize + static_cast<std::size_t>(plen) + 4;
    if (len < total) throw NeedMoreBytes("incomplete frame body");
    std::uint32_t expect = peek_u32(data + kHeaderSize + plen);
    std::uint32_t actual = crc32_ieee(data, kHeaderSize + plen);
    if (expect != actual) throw CorruptFrame("crc mismatch");
    if (data[2] != kVersion) throw ProtocolError("unsupported protocol version");
    if (!valid_msg_type(data[3])) throw ProtocolError("unknown message type");
    Frame f;
    f.type = static_cast<MsgType>(data[3]);
    f.payload.assign(data + kHeaderSize, data + kHeaderSize + plen);
    if (consumed) *consumed = total;
    return f;
}

void FrameReader::feed(const std::uint8_t* data, std::size_t len) {
    if (pos_ == buf_.size()) {
        buf_.clear();
        pos_ = 0;
    } else if (pos_ >= 4096) {
        buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(pos_));
        pos_ = 0;
    }
    buf_.insert(buf_.end(), data, data + len);
}

std::optional<Frame> FrameReader::next() {
    if (failed_) throw ProtocolError("stream previously failed");
    try {
        std::size_t consumed = 0;
        Frame f = decode_frame(buf_.data() + pos_, buf_.size() - pos_, &consumed);
        pos_ += consumed;
        return f;
    } catch (const NeedMoreBytes&) {
        return std::nullopt;
    } catch (...) {
        failed_ = true;
        throw;
    }
}

QuantizedFeatures quantize_features(const std::vector<float>& v) {
    float maxabs = 0.0f;
    for (float x : v) {
        if (!std::isfinite(x)) throw ValueError("features contain non-finite value");
        maxabs = std::max(maxabs, std::fabs(x));
    }
    if (maxabs > 1e6f) throw ValueError("feature magnitude too large to quantize");
    QuantizedFeatures out;
    out.q.resize(v.size());
    if (maxabs == 0.0f) {
        out.scale = 1.0f;
        std::fill(out.q.begin(), out.q.end(), static_cast<std::uint8_t>(128));
        return out;
    }
    out.scale = maxabs * 2.0f / 255.0f;
    for (std::size_t i = 0; i < v.size(); ++i) {
        // (v + max)/scale evaluated as (v/max)*127.5 + 127.5 so the midpoint ties exactly
        float q = std::nearbyint((v[i] / maxabs) * 127.5f + 127.5f);
        out.q[i] = static_cast<std::uint8_t>(std::clamp(q, 0.0f, 255.0f));
    }
    return out;
}

std::vector<float> dequantize_features(const QuantizedFeatures& qf) {
    if (!(qf.scale > 0.0f) || !std::isfinite(qf.scale)) throw MalformedPayload("invalid feature scale");
    // all-mid pattern only arises from an all-zero source: any nonzero max pins a code to 0 or 255
    bool all_mid = std::all_of(qf.q.begin(), qf.q.end(), [](std::uint8_t b) { return b == 128; });
    std::vector<float> v(qf.q.size());
    if (all_mid) return v;
    for (std::size_t i = 0; i < qf.q.size(); ++i) v[i] = (static_cast<float>(qf.q[i]) - 127.5f) * qf.scale;
    return v;
}

bool ClassifyRequestPayload::operator==(const ClassifyRequestPayload& o) const {
    if (request_id != o.request_id || kind != o.kind) return false;
    switch (kind) {
    case cascade::PayloadKind::Features:
        return features == o.features;
    case cascade::PayloadKind::Roi:
        if (box.x != o.box.x || box.y != o.box.y || box.width != o.box.width || box.height != o.box.height)
            return false;
        [[fallthrough]];
    case cascade::PayloadKind::FullImage:
        return image.shape == o.image.shape && image.data == o.image.data;
    }
    return false;
}

std::vector<std::uint8_t> encode_classify_request(const ClassifyRequestPayload& m) {
    std::vector<std::uint8_t> out;
    put_u64(out, m.request_id);
    out.push_back(static_cast<std::uint8_t>(m.kind));
    switch (m.kind) {
    case cascade::PayloadKind::FullImage:
        put_image_dims(out, m.image);
        put_pixels(out, m.image);
        break;
    case cascade::PayloadKind::Roi: {
        if (m.image.ndim() != 3) throw ShapeError("roi payload expects CHW, got " + m.image.shape_str());
        if (m.box.width != m.image.shape[2] || m.box.height != m.image.shape[1])
            throw ValueError("roi box size does not match crop");
        put_image_dims(out, m.image);
        put_u16(out, checked_u16(m.box.x, "roi x"));
        put_u16(out, checked_u16(m.box.y, "roi y"));
        put_u16(out, checked_u16(m.box.width, "roi width"));
        put_u16(out, checked_u16(m.box.height, "roi height"));
        put_pixels(out, m.image);
        break;
    }
    case cascade::PayloadKind::Features: {
        if (m.features.q.size() > 0xFFFF) throw ValueError("feature vector too long");
        if (!(m.features.scale > 0.0f) || !std::isfinite(m.features.scale))
            throw ValueError("invalid feature scale");
        put_u16(out, static_cast<std::uint16_t>(m.features.q.size()));
        put_f32(out, m.features.scale);
        out.insert(out.end(), m.features.q.begin(), m.features.q.end());
        break;
    }
    default:
        throw ValueError("unknown payload kind");
    }
    return out;
}

ClassifyRequestPayload decode_classify_request(const std::vector<std::uint8_t>& payload) {
    Cursor cur{payload.data(), payload.size()};
    ClassifyRequestPayload m;
    m.request_id = cur.u64();
    std::uint8_t kind = cur.u8();
    if (kind > static_cast<std::uint8_t>(cascade::PayloadKind::Features))
        throw MalformedPayload("unknown payload kind");
    m.kind = static_cast<cascade::PayloadKind>(kind);
    switch (m.kind) {
    case cascade::PayloadKind::FullImage:
        m.image = read_image_dims(cur);
        read_pixels(cur, m.image);
        break;
    case cascade::PayloadKind::Roi:
        m.image = read_image_dims(cur);
        m.box.x = cur.u16();
        m.box.y = cur.u16();
        m.box.width = cur.u16();
        m.box.height = cur.u16();
        if (m.box.width != m.image.shape[2] || m.box.height != m.image.shape[1])
            throw MalformedPayload("roi box size does not match crop");
        read_pixels(cur, m.image);
        break;
    case cascade::PayloadKind::Features: {
        std::size_t len = cur.u16();
        m.features.scale = cur.f32();
        if (!(m.features.scale > 0.0f) || !std::isfinite(m.features.scale))
            throw MalformedPayload("invalid feature scale");
        m.features.q.resize(len);
        cur.bytes(m.features.q.data(), len);
        break;
    }
    }
    cur.done();
    return m;
}

std::vector<std::uint8_t> encode_classify_response(const ClassifyResponsePayload& m) {
    check_probs(m.probs);
    std::vector<std::uint8_t> out;
    put_u64(out, m.request_id);
    put_u16(out, static_cast<std::uint16_t>(m.probs.size()));
    for (float p : m.probs) put_f32(out, p);
    put_u32(out, m.compute_us);
    return out;
}

ClassifyResponsePayload decode_classify_response(const std::vector<std::uint8_t>& payload) {
    Cursor cur{payload.data(), payload.size()};
    ClassifyResponsePayload m;
    m.request_id = cur.u64();
    std::size_t count = cur.u16();
    cur.need(count * 4);
    m.probs.resize(count);
    for (std::size_t i = 0; i < count; ++i) m.probs[i] = cur.f32();
    m.compute_us = cur.u32();
    cur.done();
    check_probs(m.probs);
    return m;
}

std::vector<std::uint8_t> encode_error(const ErrorPayload& m) {
    if (m.message.size() > 0xFFFF) throw ValueError("error message too long");
    std::vector<std::uint8_t> out;
    put_u16(out, static_cast<std::uint16_t>(m.code));
    put_u16(out, static_cast<std::uint16_t>(m.message.size()));
    out.insert(out.end(), m.message.begin(), m.message.end());
    return out;
}

ErrorPayload decode_error(const std::vector<std::uint8_t>& payload) {
    Cursor cur{payload.data(), payload.size()};
    ErrorPayload m;
    std::uint16_t code = cur.u16();
    if (code < static_cast<std::uint16_t>(ErrorCode::Malformed) ||
        code > static_cast<std::uint16_t>(ErrorCode::FeatureHashMismatch))
        throw MalformedPayload("unknown error code");
    m.code = static_cast<ErrorCode>(code);
    std::size_t len = cur.u16();
    cur.need(len);
    m.message.assign(reinterpret_cast<const char*>(cur.p + cur.off), len);
    cur.off += len;
    cur.done();
    return m;
}

std::vector<std::uint8_t> encode_hello(const HelloPayload& m) {
    // feature_len 0 advertises that Features payloads are unsupported
    if (m.class_count == 0) throw ValueError("hello payload needs a class count");
    std::vector<std::uint8_t> out;
    put_u16(out, m.class_count);
    put_u16(out, m.feature_len);
    put_u64(out, m.edge_model_hash);
    return out;
}

HelloPayload decode_hello(const std::vector<std::uint8_t>& payload) {
    Cursor cur{payload.data(), payload.size()};
    HelloPayload m;
    m.class_count = cur.u16();
    m.feature_len = cur.u16();
    m.edge_model_hash = cur.u64();
    cur.done();
    if (m.class_count == 0) throw MalformedPayload("hello payload needs a class count");
    return m;
}

} // namespace cjade::proto
