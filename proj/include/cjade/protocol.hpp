#pragma once

#include "cjade/cascade.hpp"
#include "cjade/tensor.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cjade::proto {

inline constexpr std::uint8_t kMagic0 = 0xC1;
inline constexpr std::uint8_t kMagic1 = 0x0D;
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::uint32_t kMaxPayload = 16u * 1024u * 1024u;
inline constexpr std::size_t kHeaderSize = 8;
inline constexpr std::size_t kFrameOverhead = 12;

enum class MsgType : std::uint8_t {
    Hello = 0x01,
    ClassifyReq = 0x02,
    ClassifyResp = 0x03,
    Error = 0x04,
    Ping = 0x05,
    Pong = 0x06,
};

struct ProtocolError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CorruptFrame : ProtocolError {
    using ProtocolError::ProtocolError;
};
struct OversizeFrame : ProtocolError {
    using ProtocolError::ProtocolError;
};
// resumable: the input is a valid prefix, feed more bytes and retry
struct NeedMoreBytes : ProtocolError {
    using ProtocolError::ProtocolError;
};
struct MalformedPayload : ProtocolError {
    using ProtocolError::ProtocolError;
};

struct Frame {
    MsgType type = MsgType::Ping;
    std::vector<std::uint8_t> payload;

    bool operator==(const Frame&) const = default;
};

std::vector<std::uint8_t> encode_frame(MsgType type, const std::vector<std::uint8_t>& payload);
Frame decode_frame(const std::uint8_t* data, std::size_t len, std::size_t* consumed);

// single-consumer incremental reader; a corrupt frame permanently fails the stream
class FrameReader {
  public:
    void feed(const std::uint8_t* data, std::size_t len);
    std::optional<Frame> next();
    bool failed() const { return failed_; }
    std::size_t buffered() const { return buf_.size() - pos_; }

  private:
    std::vector<std::uint8_t> buf_;
    std::size_t pos_ = 0;
    bool failed_ = false;
};

struct QuantizedFeatures {
    std::vector<std::uint8_t> q;
    float scale = 1.0f;

    bool operator==(const QuantizedFeatures&) const = default;
};

QuantizedFeatures quantize_features(const std::vector<float>& v);
std::vector<float> dequantize_features(const QuantizedFeatures& qf);

struct ClassifyRequestPayload {
    std::uint64_t request_id = 0;
    cascade::PayloadKind kind = cascade::PayloadKind::FullImage;
    Tensor image;
    cascade::RoiBox box;
    QuantizedFeatures features;

    bool operator==(const ClassifyRequestPayload& o) const;
};

struct ClassifyResponsePayload {
    std::uint64_t request_id = 0;
    std::vector<float> probs;
    std::uint32_t compute_us = 0;

    bool operator==(const ClassifyResponsePayload&) const = default;
};

enum class ErrorCode : std::uint16_t {
    Malformed = 1,
    Timeout = 2,
    Unsupported = 3,
    Internal = 4,
    FeatureHashMismatch = 5,
};

struct ErrorPayload {
    ErrorCode code = ErrorCode::Internal;
    std::string message;

    bool operator==(const ErrorPayload&) const = default;
};

struct HelloPayload {
    std::uint16_t class_count = 0;
    std::uint16_t feature_len = 0;
    std::uint64_t edge_model_hash = 0;

    bool operator==(const HelloPayload&) const = default;
};

std::vector<std::uint8_t> encode_classify_request(const ClassifyRequestPayload& m);
ClassifyRequestPayload decode_classify_request(const std::vector<std::uint8_t>& payload);
std::vector<std::uint8_t> encode_classify_response(const ClassifyResponsePayload& m);
ClassifyResponsePayload decode_classify_response(const std::vector<std::uint8_t>& payload);
std::vector<std::uint8_t> encode_error(const ErrorPayload& m);
ErrorPayload decode_error(const std::vector<std::uint8_t>& payload);
std::vector<std::uint8_t> encode_hello(const HelloPayload& m);
HelloPayload decode_hello(const std::vector<std::uint8_t>& payload);

} // namespace cjade::proto
