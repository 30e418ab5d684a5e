#include "cjade/layers.hpp"

namespace cjade::nn {

const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv2d: return "Conv2d";
        case LayerKind::DepthwiseConv2d: return "DepthwiseConv2d";
        case LayerKind::PointwiseConv2d: return "PointwiseConv2d";
        case LayerKind::Dense: return "Dense";
        case LayerKind::ReLU: return "ReLU";
        case LayerKind::BatchNorm: return "BatchNorm";
        case LayerKind::MaxPool: return "MaxPool";
        case LayerKind::AvgPool: return "AvgPool";
        case LayerKind::GlobalAvgPool: return "GlobalAvgPool";
        case LayerKind::ResidualBlock: return "ResidualBlock";
        case LayerKind::ChannelAttention: return "ChannelAttention";
        case LayerKind::Softmax: return "Softmax";
    }
    return "?";
}

namespace {

void need_args(const LayerSpec& s, std::size_t n) {
    if (s.args.size() != n)
        throw ValueError(std::string(layer_kind_name(s.kind)) + ": expected " + std::to_string(n) +
                         " args, got " + std::to_string(s.args.size()));
}

void need_chw(const LayerSpec& s, const std::vector<int>& in) {
    if (in.size() != 3)
        throw ShapeError(std::string(layer_kind_name(s.kind)) + ": expected CHW input, got rank " +
                         std::to_string(in.size()));
}

int positive(const LayerSpec& s, int v, const char* what) {
    if (v < 1)
        throw ValueError(std::string(layer_kind_name(s.kind)) + ": " + what + " must be >= 1, got " +
                         std::to_string(v));
    return v;
}

std::vector<int> conv_like(const LayerSpec& s, const std::vector<int>& in, int in_ch, int out_ch,
                           int k, int stride, int pad) {
    need_chw(s, in);
    positive(s, in_ch, "in channels");
    positive(s, out_ch, "out channels");
    positive(s, k, "kernel");
    positive(s, stride, "stride");
    if (k % 2 == 0) throw ValueError(std::string(layer_kind_name(s.kind)) + ": kernel must be odd");
    if (pad < 0) throw ValueError(std::string(layer_kind_name(s.kind)) + ": pad must be >= 0");
    if (in[0] != in_ch)
        throw ShapeError(std::string(layer_kind_name(s.kind)) + ": expected " + std::to_string(in_ch) +
                         " input channels, got " + std::to_string(in[0]));
    const int oh = detail::conv_out_dim(in[1], k, stride, pad);
    const int ow = detail::conv_out_dim(in[2], k, stride, pad);
    if (oh < 1 || ow < 1)
        throw ShapeError(std::string(layer_kind_name(s.kind)) + ": kernel " + std::to_string(k) +
                         " does not fit input " + std::to_string(in[1]) + "x" + std::to_string(in[2]));
    return {out_ch, oh, ow};
}

std::vector<int> pool_like(const LayerSpec& s, const std::vector<int>& in, int k, int stride) {
    need_chw(s, in);
    positive(s, k, "window");
    positive(s, stride, "stride");
    const int oh = detail::conv_out_dim(in[1], k, stride, 0);
    const int ow = detail::conv_out_dim(in[2], k, stride, 0);
    if (oh < 1 || ow < 1)
        throw ShapeError(std::string(layer_kind_name(s.kind)) + ": window " + std::to_string(k) +
                         " does not fit input " + std::to_string(in[1]) + "x" + std::to_string(in[2]));
    return {in[0], oh, ow};
}

} // namespace

std::vector<int> infer_shape(const LayerSpec& s, const std::vector<int>& in) {
    switch (s.kind) {
        case LayerKind::Conv2d:
            need_args(s, 6);
            return conv_like(s, in, s.args[0], s.args[1], s.args[2], s.args[3], s.args[4]);
        case LayerKind::DepthwiseConv2d:
            need_args(s, 4);
            return conv_like(s, in, s.args[0], s.args[0], s.args[1], s.args[2], s.args[3]);
        case LayerKind::PointwiseConv2d: {
            need_args(s, 2);
            need_chw(s, in);
            positive(s, s.args[0], "in channels");
            positive(s, s.args[1], "out channels");
            if (in[0] != s.args[0])
                throw ShapeError("PointwiseConv2d: expected " + std::to_string(s.args[0]) +
                                 " input channels, got " + std::to_string(in[0]));
            return {s.args[1], in[1], in[2]};
        }
        case LayerKind::Dense: {
            need_args(s, 3);
            if (in.size() != 1)
                throw ShapeError("Dense: expected flat input, got rank " + std::to_string(in.size()));
            positive(s, s.args[0], "in features");
            positive(s, s.args[1], "out features");
            if (in[0] != s.args[0])
                throw ShapeError("Dense: expected " + std::to_string(s.args[0]) + " features, got " +
                                 std::to_string(in[0]));
            return {s.args[1]};
        }
        case LayerKind::ReLU:
            need_args(s, 0);
            return in;
        case LayerKind::BatchNorm: {
            need_args(s, 1);
            need_chw(s, in);
            positive(s, s.args[0], "channels");
            if (in[0] != s.args[0])
                throw ShapeError("BatchNorm: expected " + std::to_string(s.args[0]) +
                                 " channels, got " + std::to_string(in[0]));
            return in;
        }
        case LayerKind::MaxPool:
            need_args(s, 2);
            return pool_like(s, in, s.args[0], s.args[1]);
        case LayerKind::AvgPool:
            need_args(s, 2);
            return pool_like(s, in, s.args[0], s.args[1]);
        case LayerKind::GlobalAvgPool:
            need_args(s, 0);
            need_chw(s, in);
            return {in[0]};
        case LayerKind::ResidualBlock: {
            need_args(s, 2);
            need_chw(s, in);
            positive(s, s.args[0], "in channels");
            positive(s, s.args[1], "out channels");
            if (in[0] != s.args[0])
                throw ShapeError("ResidualBlock: expected " + std::to_string(s.args[0]) +
                                 " input channels, got " + std::to_string(in[0]));
            return {s.args[1], in[1], in[2]};
        }
        case LayerKind::ChannelAttention: {
            need_args(s, 2);
            need_chw(s, in);
            positive(s, s.args[0], "channels");
            positive(s, s.args[1], "reduction");
            if (in[0] != s.args[0])
                throw ShapeError("ChannelAttention: expected " + std::to_string(s.args[0]) +
                                 " channels, got " + std::to_string(in[0]));
            return in;
        }
        case LayerKind::Softmax:
            need_args(s, 0);
            if (in.size() != 1)
                throw ShapeError("Softmax: expected flat input, got rank " + std::to_string(in.size()));
            return in;
    }
    throw ValueError("unknown layer kind " + std::to_string(static_cast<int>(s.kind)));
}

std::vector<int> infer_chain(const std::vector<LayerSpec>& specs, const std::vector<int>& input_shape) {
    std::vector<int> cur = input_shape;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        try {
            cur = infer_shape(specs[i], cur);
        } catch (const std::runtime_error& e) {
            throw ShapeError("layer " + std::to_string(i) + ": " + e.what());
        }
    }
    return cur;
}

} // namespace cjade::nn
