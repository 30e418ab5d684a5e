#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cjade/tensor.hpp"

namespace cjade::nn {

enum class LayerKind : std::uint8_t {
    Conv2d = 1,
    DepthwiseConv2d = 2,
    PointwiseConv2d = 3,
    Dense = 4,
    ReLU = 5,
    BatchNorm = 6,
    MaxPool = 7,
    AvgPool = 8,
    GlobalAvgPool = 9,
    ResidualBlock = 10,
    ChannelAttention = 11,
    Softmax = 12,
};

const char* layer_kind_name(LayerKind k);

// Declarative layer description. `args` is a kind-specific fixed-order list,
// which keeps serialization and shape inference table-driven.
//
//   Conv2d           {in_ch, out_ch, k, stride, pad, bias}
//   DepthwiseConv2d  {ch, k, stride, pad}
//   PointwiseConv2d  {in_ch, out_ch}
//   Dense            {in, out, bias}
//   ReLU             {}
//   BatchNorm        {ch}
//   MaxPool          {k, stride}
//   AvgPool          {k, stride}
//   GlobalAvgPool    {}
//   ResidualBlock    {in_ch, out_ch}
//   ChannelAttention {ch, reduction}
//   Softmax          {}
struct LayerSpec {
    LayerKind kind;
    std::vector<std::int32_t> args;

    static LayerSpec conv2d(int in_ch, int out_ch, int k, int stride, int pad, bool bias = true) {
        return {LayerKind::Conv2d, {in_ch, out_ch, k, stride, pad, bias ? 1 : 0}};
    }
    static LayerSpec depthwise(int ch, int k, int stride, int pad) {
        return {LayerKind::DepthwiseConv2d, {ch, k, stride, pad}};
    }
    static LayerSpec pointwise(int in_ch, int out_ch) {
        return {LayerKind::PointwiseConv2d, {in_ch, out_ch}};
    }
    static LayerSpec dense(int in, int out, bool bias = true) {
        return {LayerKind::Dense, {in, out, bias ? 1 : 0}};
    }
    static LayerSpec relu() { return {LayerKind::ReLU, {}}; }
    static LayerSpec batchnorm(int ch) { return {LayerKind::BatchNorm, {ch}}; }
    static LayerSpec maxpool(int k = 2, int stride = 2) { return {LayerKind::MaxPool, {k, stride}}; }
    static LayerSpec avgpool(int k, int stride) { return {LayerKind::AvgPool, {k, stride}}; }
    static LayerSpec global_avgpool() { return {LayerKind::GlobalAvgPool, {}}; }
    static LayerSpec residual(int in_ch, int out_ch) {
        return {LayerKind::ResidualBlock, {in_ch, out_ch}};
    }
    static LayerSpec channel_attention(int ch, int reduction = 4) {
        return {LayerKind::ChannelAttention, {ch, reduction}};
    }
    static LayerSpec softmax() { return {LayerKind::Softmax, {}}; }

    bool operator==(const LayerSpec& o) const { return kind == o.kind && args == o.args; }
};

// Validates hyperparameters and computes the output shape (without the batch
// dim). Throws ShapeError with the layer kind in the message on any mismatch.
std::vector<int> infer_shape(const LayerSpec& spec, const std::vector<int>& in);

// Runs inference over the whole chain; throws on the first failing layer
// naming its index. Returns the final output shape.
std::vector<int> infer_chain(const std::vector<LayerSpec>& specs, const std::vector<int>& input_shape);

namespace detail {

inline int conv_out_dim(int in, int k, int stride, int pad) {
    const int padded = in + 2 * pad;
    if (padded < k) return 0;
    return (padded - k) / stride + 1;
}

// Valid output range [b, e) for a kernel tap so that the input index
// ox*stride + kx - pad stays inside [0, in_dim).
inline void tap_range(int out_dim, int in_dim, int stride, int pad, int kx, int& b, int& e) {
    int lo = pad - kx; // need ox*stride >= lo
    b = lo <= 0 ? 0 : (lo + stride - 1) / stride;
    int hi = in_dim - 1 + pad - kx; // need ox*stride <= hi
    e = hi < 0 ? 0 : std::min(out_dim, hi / stride + 1);
    if (b > e) b = e;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Runtime layers. Each layer owns its parameters and caches whatever the
// backward pass needs. T is float in production; the gradient-check tests
// instantiate the identical code with double.
// ---------------------------------------------------------------------------

template <typename T>
struct ParamRef {
    TensorT<T>* value;
    TensorT<T>* grad;
    bool prunable; // conv/dense weight matrices; not biases or norm params
    std::string name;
};

template <typename T>
class Layer {
public:
    virtual ~Layer() = default;
    virtual const LayerSpec& spec() const = 0;
    virtual TensorT<T> forward(const TensorT<T>& x, bool train) = 0;
    virtual TensorT<T> backward(const TensorT<T>& gy) = 0;
    virtual void collect_params(std::vector<ParamRef<T>>& out) { (void)out; }
    // persistent non-trainable state (batch-norm running stats)
    virtual void collect_buffers(std::vector<TensorT<T>*>& out) { (void)out; }
    virtual void init_params(Rng& rng) { (void)rng; }
};

template <typename T>
using LayerPtr = std::unique_ptr<Layer<T>>;

template <typename T>
void kaiming_uniform(TensorT<T>& w, int fan_in, Rng& rng) {
    float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
    for (auto& v : w.data) v = static_cast<T>(rng.uniform(-bound, bound));
}

// ----------------------------- Conv2d -------------------------------------

template <typename T>
class Conv2dLayer : public Layer<T> {
public:
    explicit Conv2dLayer(const LayerSpec& s)
        : spec_(s), in_ch_(s.args[0]), out_ch_(s.args[1]), k_(s.args[2]), stride_(s.args[3]),
          pad_(s.args[4]), has_bias_(s.args[5] != 0),
          weight_({out_ch_, in_ch_, k_, k_}), wgrad_({out_ch_, in_ch_, k_, k_}) {
        if (has_bias_) {
            bias_ = TensorT<T>({out_ch_});
            bgrad_ = TensorT<T>({out_ch_});
        }
    }

    const LayerSpec& spec() const override { return spec_; }

    void init_params(Rng& rng) override {
        kaiming_uniform(weight_, in_ch_ * k_ * k_, rng);
        if (has_bias_) bias_.zero();
    }

    TensorT<T> forward(const TensorT<T>& x, bool) override {
        if (x.ndim() != 4 || x.dim(1) != in_ch_)
            throw ShapeError("Conv2d: expected NCHW input with " + std::to_string(in_ch_) +
                             " channels, got " + x.shape_str());
        x_ = x;
        const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
        const int OH = detail::conv_out_dim(H, k_, stride_, pad_);
        const int OW = detail::conv_out_dim(W, k_, stride_, pad_);
        if (OH < 1 || OW < 1) throw ShapeError("Conv2d: kernel larger than padded input");
        TensorT<T> y({N, out_ch_, OH, OW});
        parallel_for_blocks(static_cast<std::int64_t>(N) * out_ch_, [&](std::int64_t b, std::int64_t e) {
            for (std::int64_t idx = b; idx < e; ++idx) {
                const int n = static_cast<int>(idx / out_ch_);
                const int co = static_cast<int>(idx % out_ch_);
                T* out0 = y.row4(n, co, 0);
                const T bv = has_bias_ ? bias_[co] : T(0);
                std::fill(out0, out0 + static_cast<std::size_t>(OH) * OW, bv);
                for (int ci = 0; ci < in_ch_; ++ci) {
                    for (int ky = 0; ky < k_; ++ky) {
                        int oyb, oye;
                        detail::tap_range(OH, H, stride_, pad_, ky, oyb, oye);
                        for (int kx = 0; kx < k_; ++kx) {
                            const T w = weight_.at4(co, ci, ky, kx);
                            int oxb, oxe;
                            detail::tap_range(OW, W, stride_, pad_, kx, oxb, oxe);
                            for (int oy = oyb; oy < oye; ++oy) {
                                const T* in_row = x.row4(n, ci, oy * stride_ + ky - pad_);
                                T* out_row = y.row4(n, co, oy);
                                if (stride_ == 1) {
                                    const T* in = in_row + kx - pad_;
                                    for (int ox = oxb; ox < oxe; ++ox) out_row[ox] += w * in[ox];
                                } else {
                                    for (int ox = oxb; ox < oxe; ++ox)
                                        out_row[ox] += w * in_row[ox * stride_ + kx - pad_];
                                }
                            }
                        }
                    }
                }
            }
        });
        return y;
    }

    TensorT<T> backward(const TensorT<T>& gy) override {
        const int N = x_.dim(0), H = x_.dim(2), W = x_.dim(3);
        const int OH = gy.dim(2), OW = gy.dim(3);
        // weight gradients, partitioned by output channel
        parallel_for_blocks(out_ch_, [&](std::int64_t b, std::int64_t e) {
            for (int co = static_cast<int>(b); co < static_cast<int>(e); ++co) {
                if (has_bias_) {
                    T acc = 0;
                    for (int n = 0; n < N; ++n) {
                        const T* g0 = gy.row4(n, co, 0);
                        for (std::int64_t i = 0; i < static_cast<std::int64_t>(OH) * OW; ++i) acc += g0[i];
                    }
                    bgrad_[co] += acc;
                }
                for (int ci = 0; ci < in_ch_; ++ci) {
                    for (int ky = 0; ky < k_; ++ky) {
                        int oyb, oye;
                        detail::tap_range(OH, H, stride_, pad_, ky, oyb, oye);
                        for (int kx = 0; kx < k_; ++kx) {
                            int oxb, oxe;
                            detail::tap_range(OW, W, stride_, pad_, kx, oxb, oxe);
                            T acc = 0;
                            for (int n = 0; n < N; ++n) {
                                for (int oy = oyb; oy < oye; ++oy) {
                                    const T* g_row = gy.row4(n, co, oy);
                                    const T* in_row = x_.row4(n, ci, oy * stride_ + ky - pad_);
                                    if (stride_ == 1) {
                                        const T* in = in_row + kx - pad_;
                                        for (int ox = oxb; ox < oxe; ++ox) acc += g_row[ox] * in[ox];
                                    } else {
                                        for (int ox = oxb; ox < oxe; ++ox)
                                            acc += g_row[ox] * in_row[ox * stride_ + kx - pad_];
                                    }
                                }
                            }
                            wgrad_.at4(co, ci, ky, kx) += acc;
                        }
                    }
                }
            }
        });
        // input gradients, partitioned by sample
        TensorT<T> gx(x_.shape);
        parallel_for_blocks(N, [&](std::int64_t b, std::int64_t e) {
            for (int n = static_cast<int>(b); n < static_cast<int>(e); ++n) {
                for (int co = 0; co < out_ch_; ++co) {
                    for (int ci = 0; ci < in_ch_; ++ci) {
                        for (int ky = 0; ky < k_; ++ky) {
                            int oyb, oye;
                            detail::tap_range(OH, H, stride_, pad_, ky, oyb, oye);
                            for (int kx = 0; kx < k_; ++kx) {
                                const T w = weight_.at4(co, ci, ky, kx);
                                int oxb, oxe;
                                detail::tap_range(OW, W, stride_, pad_, kx, oxb, oxe);
                                for (int oy = oyb; oy < oye; ++oy) {
                                    const T* g_row = gy.row4(n, co, oy);
                                    T* gx_row = gx.row4(n, ci, oy * stride_ + ky - pad_);
                                    if (stride_ == 1) {
                                        T* gxp = gx_row + kx - pad_;
                                        for (int ox = oxb; ox < oxe; ++ox) gxp[ox] += w * g_row[ox];
                                    } else {
                                        for (int ox = oxb; ox < oxe; ++ox)
                                            gx_row[ox * stride_ + kx - pad_] += w * g_row[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        return gx;
    }

    void collect_params(std::vector<ParamRef<T>>& out) override {
        out.push_back({&weight_, &wgrad_, true, "conv.weight"});
        if (has_bias_) out.push_back({&bias_, &bgrad_, false, "conv.bias"});
    }

    TensorT<T>& weight() { return weight_; }
    TensorT<T>& bias() { return bias_; }

private:
    LayerSpec spec_;
    int in_ch_, out_ch_, k_, stride_, pad_;
    bool has_bias_;
    TensorT<T> weight_, wgrad_, bias_, bgrad_;
    TensorT<T> x_;
};

// ------------------------ DepthwiseConv2d ---------------------------------

template <typename T>
class DepthwiseConv2dLayer : public Layer<T> {
public:
    explicit DepthwiseConv2dLayer(const LayerSpec& s)
        : spec_(s), ch_(s.args[0]), k_(s.args[1]), stride_(s.args[2]), pad_(s.args[3]),
          weight_({ch_, 1, k_, k_}), wgrad_({ch_, 1, k_, k_}) {}

    const LayerSpec& spec() const override { return spec_; }

    void init_params(Rng& rng) override { kaiming_uniform(weight_, k_ * k_, rng); }

    TensorT<T> forward(const TensorT<T>& x, bool) override {
        if (x.ndim() != 4 || x.dim(1) != ch_)
            throw ShapeError("DepthwiseConv2d: expected " + std::to_string(ch_) +
                             " channels, got " + x.shape_str());
        x_ = x;
        const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
        const int OH = detail::conv_out_dim(H, k_, stride_, pad_);
        const int OW = detail::conv_out_dim(W, k_, stride_, pad_);
        TensorT<T> y({N, ch_, OH, OW});
        parallel_for_blocks(static_cast<std::int64_t>(N) * ch_, [&](std::int64_t b, std::int64_t e) {
            for (std::int64_t idx = b; idx < e; ++idx) {
                const int n = static_cast<int>(idx / ch_);
                const int c = static_cast<int>(idx % ch_);
                for (int ky = 0; ky < k_; ++ky) {
                    int oyb, oye;
                    detail::tap_range(OH, H, stride_, pad_, ky, oyb, oye);
                    for (int kx = 0; kx < k_; ++kx) {
                        const T w = weight_.at4(c, 0, ky, kx);
                        int oxb, oxe;
                        detail::tap_range(OW, W, stride_, pad_, kx, oxb, oxe);
                        for (int oy = oyb; oy < oye; ++oy) {
                            const T* in_row = x.row4(n, c, oy * stride_ + ky - pad_);
                            T* out_row = y.row4(n, c, oy);
                            for (int ox = oxb; ox < oxe; ++ox)
                                out_row[ox] += w * in_row[ox * stride_ + kx - pad_];
                        }
                    }
                }
            }
        });
        return y;
    }

    TensorT<T> backward(const TensorT<T>& gy) override {
        const int N = x_.dim(0), H = x_.dim(2), W = x_.dim(3);
        const int OH = gy.dim(2), OW = gy.dim(3);
        TensorT<T> gx(x_.shape);
        parallel_for_blocks(ch_, [&](std::int64_t b, std::int64_t e) {
            for (int c = static_cast<int>(b); c < static_cast<int>(e); ++c) {
                for (int ky = 0; ky < k_; ++ky) {
                    int oyb, oye;
                    detail::tap_range(OH, H, stride_, pad_, ky, oyb, oye);
                    for (int kx = 0; kx < k_; ++kx) {
                        int oxb, oxe;
                        detail::tap_range(OW, W, stride_, pad_, kx, oxb, oxe);
                        T acc = 0;
                        const T w = weight_.at4(c, 0, ky, kx);
                        for (int n = 0; n < N; ++n) {
                            for (int oy = oyb; oy < oye; ++oy) {
                                const T* g_row = gy.row4(n, c, oy);
                                const T* in_row = x_.row4(n, c, oy * stride_ + ky - pad_);
                                T* gx_row = gx.row4(n, c, oy * stride_ + ky - pad_);
                                for (int ox = oxb; ox < oxe; ++ox) {
                                    acc += g_row[ox] * in_row[ox * stride_ + kx - pad_];
                                    gx_row[ox * stride_ + kx - pad_] += w * g_row[ox];
                                }
                            }
                        }
                        wgrad_.at4(c, 0, ky, kx) += acc;
                    }
                }
            }
        });
        return gx;
    }

    void collect_params(std::vector<ParamRef<T>>& out) override {
        out.push_back({&weight_, &wgrad_, true, "dwconv.weight"});
    }

    TensorT<T>& weight() { return weight_; }

private:
    LayerSpec spec_;
    int ch_, k_, stride_, pad_;
    TensorT<T> weight_, wgrad_;
    TensorT<T> x_;
};

// ------------------------ PointwiseConv2d ---------------------------------

template <typename T>
class PointwiseConv2dLayer : public Layer<T> {
public:
    explicit PointwiseConv2dLayer(const LayerSpec& s)
        : spec_(s), in_ch_(s.args[0]), out_ch_(s.args[1]),
          weight_({out_ch_, in_ch_, 1, 1}), wgrad_({out_ch_, in_ch_, 1, 1}) {}

    const LayerSpec& spec() const override { return spec_; }

    void init_params(Rng& rng) override { kaiming_uniform(weight_, in_ch_, rng); }

    TensorT<T> forward(const TensorT<T>& x, bool) override {
        if (x.ndim() != 4 || x.dim(1) != in_ch_)
            throw ShapeError("PointwiseConv2d: expected " + std::to_string(in_ch_) +
                             " channels, got " + x.shape_str());
        x_ = x;
        const int N = x.dim(0);
        const std::int64_t HW = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
        TensorT<T> y({N, out_ch_, x.dim(2), x.dim(3)});
        parallel_for_blocks(static_cast<std::int64_t>(N) * out_ch_, [&](std::int64_t b, std::int64_t e) {
            for (std::int64_t idx = b; idx < e; ++idx) {
                const int n = static_cast<int>(idx / out_ch_);
                const int co = static_cast<int>(idx % out_ch_);
                T* out = y.row4(n, co, 0);
                for (int ci = 0; ci < in_ch_; ++ci) {
                    const T w = weight_.at4(co, ci, 0, 0);
                    const T* in = x.row4(n, ci, 0);
                    for (std::int64_t i = 0; i < HW; ++i) out[i] += w * in[i];
                }
            }
        });
        return y;
    }

    TensorT<T> backward(const TensorT<T>& gy) override {
        const int N = x_.dim(0);
        const std::int64_t HW = static_cast<std::int64_t>(x_.dim(2)) * x_.dim(3);
        parallel_for_blocks(out_ch_, [&](std::int64_t b, std::int64_t e) {
            for (int co = static_cast<int>(b); co < static_cast<int>(e); ++co) {
                for (int ci = 0; ci < in_ch_; ++ci) {
                    T acc = 0;
                    for (int n = 0; n < N; ++n) {
                        const T* g = gy.row4(n, co, 0);
                        const T* in = x_.row4(n, ci, 0);
                        for (std::int64_t i = 0; i < HW; ++i) acc += g[i] * in[i];
                    }
                    wgrad_.at4(co, ci, 0, 0) += acc;
                }
            }
        });
        TensorT<T> gx(x_.shape);
        parallel_for_blocks(N, [&](std::int64_t b, std::int64_t e) {
            for (int n = static_cast<int>(b); n < static_cast<int>(e); ++n) {
                for (int co = 0; co < out_ch_; ++co) {
                    const T* g = gy.row4(n, co, 0);
                    for (int ci = 0; ci < in_ch_; ++ci) {
                        const T w = weight_.at4(co, ci, 0, 0);
                        T* gxp = gx.row4(n, ci, 0);
                        for (std::int64_t i = 0; i < HW; ++i) gxp[i] += w * g[i];
                    }
                }
            }
        });
        return gx;
    }

    void collect_params(std::vector<ParamRef<T>>& out) override {
        out.push_back({&weight_, &wgrad_, true, "pwconv.weight"});
    }

    TensorT<T>& weight() { return weight_; }

private:
    LayerSpec spec_;
    int in_ch_, out_ch_;
    TensorT<T> weight_, wgrad_;
    TensorT<T> x_;
};

// ------------------------------ Dense --------------------------------------

template <typename T>
class DenseLayer : public Layer<T> {
public:
    explicit DenseLayer(const LayerSpec& s)
        : spec_(s), in_(s.args[0]), out_(s.args[1]), has_bias_(s.args[2] != 0),
          weight_({out_, in_}), wgrad_({out_, in_}) {
        if (has_bias_) {
            bias_ = TensorT<T>({out_});
            bgrad_ = TensorT<T>({out_});
        }
    }

    const LayerSpec& spec() const override { return spec_; }

    void init_params(Rng& rng) override {
        kaiming_uniform(weight_, in_, rng);
        if (has_bias_) bias_.zero();
    }

    TensorT<T> forward(const TensorT<T>& x, bool) override {
        if (x.ndim() != 2 || x.dim(1) != in_)
            throw ShapeError("Dense: expected [N," + std::to_string(in_) + "], got " + x.shape_str());
        x_ = x;
        const int N = x.dim(0);
        TensorT<T> y({N, out_});
        for (int n = 0; n < N; ++n) {
            const T* xr = &x.at2(n, 0);
            for (int o = 0; o < out_; ++o) {
                const T* wr = &weight_.at2(o, 0);
                T acc = has_bias_ ? bias_[o] : T(0);
                for (int i = 0; i < in_; ++i) acc += wr[i] * xr[i];
                y.at2(n, o) = acc;
            }
        }
        return y;
    }

    TensorT<T> backward(const TensorT<T>& gy) override {
        const int N = x_.dim(0);
        TensorT<T> gx(x_.shape);
        for (int n = 0; n < N; ++n) {
            const T* xr = &x_.at2(n, 0);
            T* gxr = &gx.at2(n, 0);
            for (int o = 0; o < out_; ++o) {
                const T g = gy.at2(n, o);
                if (has_bias_) bgrad_[o] += g;
                T* wg = &wgrad_.at2(o, 0);
                const T* wr = &weight_.at2(o, 0);
                for (int i = 0; i < in_; ++i) {
                    wg[i] += g * xr[i];
                    gxr[i] += g * wr[i];
                }
            }
        }
        return gx;
    }

    void collect_params(std::vector<ParamRef<T>>& out) override {
        out.push_back({&weight_, &wgrad_, true, "dense.weight"});
        if (has_bias_) out.push_back({&bias_, &bgrad_, false, "dense.bias"});
    }

    TensorT<T>& weight() { return weight_; }
    TensorT<T>& bias() { return bias_; }

private:
    LayerSpec spec_;
    int in_, out_;
    bool has_bias_;
    TensorT<T> weight_, wgrad_, bias_, bgrad_;
    TensorT<T> x_;
};

// ------------------------------ ReLU ---------------------------------------

template <typename T>
class ReLULayer : public Layer<T> {
public:
    explicit ReLULayer(const LayerSpec& s) : spec_(s) {}
    const LayerSpec& spec() const override { return spec_; }

    TensorT<T> forward(const TensorT<T>& x, bool) override {
        TensorT<T> y = x;
        for (auto& v : y.data)
            if (v < T(0)) v = T(0);
        y_ = y;
        return y;
    }

    TensorT<T> backward(const TensorT<T>& gy) override {
        TensorT<T> gx = gy;
        for (std::size_t i = 0; i < gx.data.size(); ++i)
            if (y_.data[i] <= T(0)) gx.data[i] = T(0);
        return gx;
    }

private:
    LayerSpec spec_;
    TensorT<T> y_;
};

// ---------------------------- BatchNorm ------------------------------------

template <typename T>
class BatchNormLayer : public Layer<T> {
public:
    static constexpr float kEps = 1e-5f;
    static constexpr float kMomentum = 0.9f; // running = m*running + (1-m)*batch

    explicit BatchNormLayer(const LayerSpec& s)
        : spec_(s), ch_(s.args[0]), gamma_({ch_}), beta_({ch_}), ggrad_({ch_}), bgrad_({ch_}),
          run_mean_({ch_}), run_var_({ch_}) {
        gamma_.fill(T(1));
        run_var_.fill(T(1));
    }

    const LayerSpec& spec() const override { return spec_; }

    TensorT<T> forward(const TensorT<T>& x, bool train) override {
        if (x.ndim() != 4 || x.dim(1) != ch_)
            throw ShapeError("BatchNorm: expected NCHW with " + std::to_string(ch_) +
                             " channels, got " + x.shape_str());
        const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
        const std::int64_t M = static_cast<std::int64_t>(N) * H * W;
        TensorT<T> y(x.shape);
        if (train) {
            xhat_ = TensorT<T>(x.shape);
            invstd_ = TensorT<T>({ch_});
            mean_ = TensorT<T>({ch_});
            m_ = M;
            parallel_for_blocks(ch_, [&](std::int64_t b, std::int64_t e) {
                for (int c = static_cast<int>(b); c < static_cast<int>(e); ++c) {
                    T sum = 0, sq = 0;
                    for (int n = 0; n < N; ++n) {
                        const T* r = x.row4(n, c, 0);
                        for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i) {
                            sum += r[i];
                            sq += r[i] * r[i];
                        }
                    }
                    const T mean = sum / static_cast<T>(M);
                    T var = sq / static_cast<T>(M) - mean * mean;
                    if (var < T(0)) var = T(0);
                    const T inv = T(1) / std::sqrt(var + T(kEps));
                    mean_[c] = mean;
                    invstd_[c] = inv;
                    run_mean_[c] = T(kMomentum) * run_mean_[c] + T(1 - kMomentum) * mean;
                    run_var_[c] = T(kMomentum) * run_var_[c] + T(1 - kMomentum) * var;
                    for (int n = 0; n < N; ++n) {
                        const T* r = x.row4(n, c, 0);
                        T* xh = xhat_.row4(n, c, 0);
                        T* yr = y.row4(n, c, 0);
                        for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i) {
                            xh[i] = (r[i] - mean) * inv;
                            yr[i] = gamma_[c] * xh[i] + beta_[c];
                        }
                    }
                }
            });
        } else {
            parallel_for_blocks(ch_, [&](std::int64_t b, std::int64_t e) {
                for (int c = static_cast<int>(b); c < static_cast<int>(e); ++c) {
                    const T inv = T(1) / std::sqrt(run_var_[c] + T(kEps));
                    const T scale = gamma_[c] * inv;
                    const T shift = beta_[c] - run_mean_[c] * scale;
                    for (int n = 0; n < N; ++n) {
                        const T* r = x.row4(n, c, 0);
                        T* yr = y.row4(n, c, 0);
                        for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i)
                            yr[i] = scale * r[i] + shift;
                    }
                }
            });
        }
        return y;
    }

    TensorT<T> backward(const TensorT<T>& gy) override {
        const int N = gy.dim(0), H = gy.dim(2), W = gy.dim(3);
        const std::int64_t HW = static_cast<std::int64_t>(H) * W;
        TensorT<T> gx(gy.shape);
        parallel_for_blocks(ch_, [&](std::int64_t b, std::int64_t e) {
            for (int c = static_cast<int>(b); c < static_cast<int>(e); ++c) {
                T sum_g = 0, sum_gx = 0;
                for (int n = 0; n < N; ++n) {
                    const T* g = gy.row4(n, c, 0);
                    const T* xh = xhat_.row4(n, c, 0);
                    for (std::int64_t i = 0; i < HW; ++i) {
                        sum_g += g[i];
                        sum_gx += g[i] * xh[i];
                    }
                }
                ggrad_[c] += sum_gx;
                bgrad_[c] += sum_g;
                const T scale = gamma_[c] * invstd_[c] / static_cast<T>(m_);
                for (int n = 0; n < N; ++n) {
                    const T* g = gy.row4(n, c, 0);
                    const T* xh = xhat_.row4(n, c, 0);
                    T* gxr = gx.row4(n, c, 0);
                    for (std::int64_t i = 0; i < HW; ++i)
                        gxr[i] = scale * (static_cast<T>(m_) * g[i] - sum_g - xh[i] * sum_gx);
                }
            }
        });
        return gx;
    }

    void collect_params(std::vector<ParamRef<T>>& out) override {
        out.push_back({&gamma_, &ggrad_, false, "bn.gamma"});
        out.push_back({&beta_, &bgrad_, false, "bn.beta"});
    }

    void collect_buffers(std::vector<TensorT<T>*>& out) override {
        out.push_back(&run_mean_);
        out.push_back(&run_var_);
    }

    TensorT<T>& gamma() { return gamma_; }
    TensorT<T>& beta() { return beta_; }

private:
    LayerSpec spec_;
    int ch_;
    TensorT<T> gamma_, beta_, ggrad_, bgrad_;
    TensorT<T> run_mean_, run_var_;
    TensorT<T> xhat_, invstd_, mean_;
    std::int64_t m_ = 0;
};

// ----------------------------- Pooling -------------------------------------

template <typename T>
class MaxPoolLayer : public Layer<T> {
public:
    explicit MaxPoolLayer(const LayerSpec& s) : spec_(s), k_(s.args[0]), stride_(s.args[1]) {}
    const LayerSpec& spec() const override { return spec_; }

    TensorT<T> forward(const TensorT<T>& x, bool) override {
        const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const int OH = detail::conv_out_dim(H, k_, stride_, 0);
        const int OW = detail::conv_out_dim(W, k_, stride_, 0);
        if (OH < 1 || OW < 1) throw ShapeError("MaxPool: window larger than input " + x.shape_str());
        in_shape_ = x.shape;
        TensorT<T> y({N, C, OH, OW});
        argmax_.assign(static_cast<std::size_t>(y.numel()), 0);
        parallel_for_blocks(static_cast<std::int64_t>(N) * C, [&](std::int64_t b, std::int64_t e) {
            for (std::int64_t idx = b; idx < e; ++idx) {
                const int n = static_cast<int>(idx / C);
                const int c = static_cast<int>(idx % C);
                for (int oy = 0; oy < OH; ++oy) {
                    for (int ox = 0; ox < OW; ++ox) {
                        T best = x.at4(n, c, oy * stride_, ox * stride_);
                        std::int64_t best_i =
                            ((static_cast<std::int64_t>(n) * C + c) * H + oy * stride_) * W + ox * stride_;
                        for (int ky = 0; ky < k_; ++ky) {
                            for (int kx = 0; kx < k_; ++kx) {
                                const int iy = oy * stride_ + ky, ix = ox * stride_ + kx;
                                const T v = x.at4(n, c, iy, ix);
                                if (v > best) {
                                    best = v;
                                    best_i = ((static_cast<std::int64_t>(n) * C + c) * H + iy) * W + ix;
                                }
                            }
                        }
                        const std::int64_t oi = ((static_cast<std::int64_t>(n) * C + c) * OH + oy) * OW + ox;
                        y[oi] = best;
                        argmax_[static_cast<std::size_t>(oi)] = best_i;
                    }
                }
            }
        });
        return y;
    }

    TensorT<T> backward(const TensorT<T>& gy) override {
        TensorT<T> gx(in_shape_);
        for (std::int64_t i = 0; i < gy.numel(); ++i)
            gx[argmax_[static_cast<std::size_t>(i)]] += gy[i];
        return gx;
    }

private:
    LayerSpec spec_;
    int k_, stride_;
    std::vector<int> in_shape_;
    std::vector<std::int64_t> argmax_;
};

template <typename T>
class AvgPoolLayer : public Layer<T> {
public:
    explicit AvgPoolLayer(const LayerSpec& s) : spec_(s), k_(s.args[0]), stride_(s.args[1]) {}
    const LayerSpec& spec() const override { return spec_; }

    TensorT<T> forward(const TensorT<T>& x, bool) override {
        const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const int OH = detail::conv_out_dim(H, k_, stride_, 0);
        const int OW = detail::conv_out_dim(W, k_, stride_, 0);
        if (OH < 1 || OW < 1) throw ShapeError("AvgPool: window larger than input " + x.shape_str());
        in_shape_ = x.shape;
        TensorT<T> y({N, C, OH, OW});
        const T inv = T(1) / static_cast<T>(k_ * k_);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int oy = 0; oy < OH; ++oy)
                    for (int ox = 0; ox < OW; ++ox) {
                        T acc = 0;
                        for (int ky = 0; ky < k_; ++ky)
                            for (int kx = 0; kx < k_; ++kx)
                                acc += x.at4(n, c, oy * stride_ + ky, ox * stride_ + kx);
                        y.at4(n, c, oy, ox) = acc * inv;
                    }
        return y;
    }

    TensorT<T> backward(const TensorT<T>& gy) override {
        TensorT<T> gx(in_shape_);
        const int OH = gy.dim(2), OW = gy.dim(3);
        const T inv = T(1) / static_cast<T>(k_ * k_);
        for (int n = 0; n < gy.dim(0); ++n)
            for (int c = 0; c < gy.dim(1); ++c)
                for (int oy = 0; oy < OH; ++oy)
                    for (int ox = 0; ox < OW; ++ox) {
                        const T g = gy.at4(n, c, oy, ox) * inv;
                        for (int ky = 0; ky < k_; ++ky)
                            for (int kx = 0; kx < k_; ++kx)
                                gx.at4(n, c, oy * stride_ + ky, ox * stride_ + kx) += g;
                    }
        return gx;
    }

private:
    LayerSpec spec_;
    int k_, stride_;
    std::vector<int> in_shape_;
};

template <typename T>
class GlobalAvgPoolLayer : public Layer<T> {
public:
    explicit GlobalAvgPoolLayer(const LayerSpec& s) : spec_(s) {}
    const LayerSpec& spec() const override { return spec_; }

    TensorT<T> forward(const TensorT<T>& x, bool) override {
        if (x.ndim() != 4) throw ShapeError("GlobalAvgPool: expected NCHW, got " + x.shape_str());
        in_shape_ = x.shape;
        const int N = x.dim(0), C = x.dim(1);
        const std::int64_t HW = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
        TensorT<T> y({N, C});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const T* r = x.row4(n, c, 0);
                T acc = 0;
                for (std::int64_t i = 0; i < HW; ++i) acc += r[i];
                y.at2(n, c) = acc / static_cast<T>(HW);
            }
        return y;
    }

    TensorT<T> backward(const TensorT<T>& gy) override {
        TensorT<T> gx(in_shape_);
        const std::int64_t HW = static_cast<std::int64_t>(in_shape_[2]) * in_shape_[3];
        const T inv = T(1) / static_cast<T>(HW);
        for (int n = 0; n < in_shape_[0]; ++n)
            for (int c = 0; c < in_shape_[1]; ++c) {
                const T g = gy.at2(n, c) * inv;
                T* r = gx.row4(n, c, 0);
                for (std::int64_t i = 0; i < HW; ++i) r[i] = g;
            }
        return gx;
    }

private:
    LayerSpec spec_;
    std::vector<int> in_shape_;
};

// ----------------------------- Softmax -------------------------------------

template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& logits) {
    if (logits.ndim() != 2 || logits.dim(1) < 1)
        throw ShapeError("softmax: expected [N,C] with C >= 1, got " + logits.shape_str());
    const int N = logits.dim(0), C = logits.dim(1);
    TensorT<T> y(logits.shape);
    for (int n = 0; n < N; ++n) {
        const T* r = &logits.at2(n, 0);
        T mx = r[0];
        for (int c = 1; c < C; ++c) mx = std::max(mx, r[c]);
        T sum = 0;
        T* yr = &y.at2(n, 0);
        for (int c = 0; c < C; ++c) {
            yr[c] = std::exp(r[c] - mx);
            sum += yr[c];
        }
        for (int c = 0; c < C; ++c) yr[c] /= sum;
    }
    return y;
}

template <typename T>
class SoftmaxLayer : public Layer<T> {
public:
    explicit SoftmaxLayer(const LayerSpec& s) : spec_(s) {}
    const LayerSpec& spec() const override { return spec_; }

    TensorT<T> forward(const TensorT<T>& x, bool) override {
        y_ = softmax_rows(x);
        return y_;
    }

    TensorT<T> backward(const TensorT<T>& gy) override {
        const int N = y_.dim(0), C = y_.dim(1);
        TensorT<T> gx(y_.shape);
        for (int n = 0; n < N; ++n) {
            T dot = 0;
            for (int c = 0; c < C; ++c) dot += gy.at2(n, c) * y_.at2(n, c);
            for (int c = 0; c < C; ++c) gx.at2(n, c) = y_.at2(n, c) * (gy.at2(n, c) - dot);
        }
        return gx;
    }

private:
    LayerSpec spec_;
    TensorT<T> y_;
};

// -------------------------- ResidualBlock ----------------------------------

// conv3x3 -> BN -> ReLU -> conv3x3 -> BN, plus identity (or 1x1 conv + BN
// projection when channel counts differ), sum, ReLU.
template <typename T>
class ResidualBlockLayer : public Layer<T> {
public:
    explicit ResidualBlockLayer(const LayerSpec& s)
        : spec_(s), in_ch_(s.args[0]), out_ch_(s.args[1]),
          conv1_(LayerSpec::conv2d(in_ch_, out_ch_, 3, 1, 1, false)),
          bn1_(LayerSpec::batchnorm(out_ch_)),
          relu1_(LayerSpec::relu()),
          conv2_(LayerSpec::conv2d(out_ch_, out_ch_, 3, 1, 1, false)),
          bn2_(LayerSpec::batchnorm(out_ch_)) {
        if (in_ch_ != out_ch_) {
            proj_ = std::make_unique<Conv2dLayer<T>>(LayerSpec::conv2d(in_ch_, out_ch_, 1, 1, 0, false));
            proj_bn_ = std::make_unique<BatchNormLayer<T>>(LayerSpec::batchnorm(out_ch_));
        }
    }

    const LayerSpec& spec() const override { return spec_; }

    void init_params(Rng& rng) override {
        conv1_.init_params(rng);
        conv2_.init_params(rng);
        if (proj_) proj_->init_params(rng);
    }

    TensorT<T> forward(const TensorT<T>& x, bool train) override {
        TensorT<T> main = bn2_.forward(conv2_.forward(relu1_.forward(bn1_.forward(conv1_.forward(x, train), train), train), train), train);
        TensorT<T> skip = proj_ ? proj_bn_->forward(proj_->forward(x, train), train) : x;
        check_same_shape(main, skip, "ResidualBlock");
        TensorT<T> y(main.shape);
        mask_ = TensorT<T>(main.shape);
        for (std::int64_t i = 0; i < y.numel(); ++i) {
            T v = main[i] + skip[i];
            mask_[i] = v > T(0) ? T(1) : T(0);
            y[i] = v > T(0) ? v : T(0);
        }
        return y;
    }

    TensorT<T> backward(const TensorT<T>& gy) override {
        TensorT<T> g(gy.shape);
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] = gy[i] * mask_[i];
        TensorT<T> gmain = conv1_.backward(bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(g)))));
        TensorT<T> gskip = proj_ ? proj_->backward(proj_bn_->backward(g)) : g;
        for (std::int64_t i = 0; i < gmain.numel(); ++i) gmain[i] += gskip[i];
        return gmain;
    }

    void collect_params(std::vector<ParamRef<T>>& out) override {
        conv1_.collect_params(out);
        bn1_.collect_params(out);
        conv2_.collect_params(out);
        bn2_.collect_params(out);
        if (proj_) {
            proj_->collect_params(out);
            proj_bn_->collect_params(out);
        }
    }

    void collect_buffers(std::vector<TensorT<T>*>& out) override {
        bn1_.collect_buffers(out);
        bn2_.collect_buffers(out);
        if (proj_bn_) proj_bn_->collect_buffers(out);
    }

    Conv2dLayer<T>& conv1() { return conv1_; }
    Conv2dLayer<T>& conv2() { return conv2_; }

private:
    LayerSpec spec_;
    int in_ch_, out_ch_;
    Conv2dLayer<T> conv1_;
    BatchNormLayer<T> bn1_;
    ReLULayer<T> relu1_;
    Conv2dLayer<T> conv2_;
    BatchNormLayer<T> bn2_;
    std::unique_ptr<Conv2dLayer<T>> proj_;
    std::unique_ptr<BatchNormLayer<T>> proj_bn_;
    TensorT<T> mask_;
};

// ------------------------- ChannelAttention ---------------------------------

// Squeeze (global average) -> dense bottleneck -> sigmoid gates -> rescale.
template <typename T>
class ChannelAttentionLayer : public Layer<T> {
public:
    explicit ChannelAttentionLayer(const LayerSpec& s)
        : spec_(s), ch_(s.args[0]), red_(std::max(1, s.args[0] / std::max(1, s.args[1]))),
          fc1_(LayerSpec::dense(ch_, red_, true)), relu_(LayerSpec::relu()),
          fc2_(LayerSpec::dense(red_, ch_, true)) {}

    const LayerSpec& spec() const override { return spec_; }

    void init_params(Rng& rng) override {
        fc1_.init_params(rng);
        fc2_.init_params(rng);
    }

    TensorT<T> forward(const TensorT<T>& x, bool train) override {
        if (x.ndim() != 4 || x.dim(1) != ch_)
            throw ShapeError("ChannelAttention: expected " + std::to_string(ch_) +
                             " channels, got " + x.shape_str());
        x_ = x;
        const int N = x.dim(0);
        const std::int64_t HW = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
        TensorT<T> s({N, ch_});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < ch_; ++c) {
                const T* r = x.row4(n, c, 0);
                T acc = 0;
                for (std::int64_t i = 0; i < HW; ++i) acc += r[i];
                s.at2(n, c) = acc / static_cast<T>(HW);
            }
        TensorT<T> z = fc2_.forward(relu_.forward(fc1_.forward(s, train), train), train);
        gates_ = TensorT<T>({N, ch_});
        for (std::int64_t i = 0; i < z.numel(); ++i)
            gates_[i] = T(1) / (T(1) + std::exp(-z[i]));
        TensorT<T> y(x.shape);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < ch_; ++c) {
                const T g = gates_.at2(n, c);
                const T* r = x.row4(n, c, 0);
                T* yr = y.row4(n, c, 0);
                for (std::int64_t i = 0; i < HW; ++i) yr[i] = r[i] * g;
            }
        return y;
    }

    TensorT<T> backward(const TensorT<T>& gy) override {
        const int N = x_.dim(0);
        const std::int64_t HW = static_cast<std::int64_t>(x_.dim(2)) * x_.dim(3);
        // dL/dgate and the direct input term
        TensorT<T> dgate({N, ch_});
        TensorT<T> gx(x_.shape);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < ch_; ++c) {
                const T g = gates_.at2(n, c);
                const T* gr = gy.row4(n, c, 0);
                const T* xr = x_.row4(n, c, 0);
                T* gxr = gx.row4(n, c, 0);
                T acc = 0;
                for (std::int64_t i = 0; i < HW; ++i) {
                    acc += gr[i] * xr[i];
                    gxr[i] = gr[i] * g;
                }
                dgate.at2(n, c) = acc;
            }
        // through the sigmoid and the bottleneck
        TensorT<T> dz({N, ch_});
        for (std::int64_t i = 0; i < dz.numel(); ++i) {
            const T g = gates_[i];
            dz[i] = dgate[i] * g * (T(1) - g);
        }
        TensorT<T> ds = fc1_.backward(relu_.backward(fc2_.backward(dz)));
        // squeeze was a spatial mean
        const T inv = T(1) / static_cast<T>(HW);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < ch_; ++c) {
                const T d = ds.at2(n, c) * inv;
                T* gxr = gx.row4(n, c, 0);
                for (std::int64_t i = 0; i < HW; ++i) gxr[i] += d;
            }
        return gx;
    }

    void collect_params(std::vector<ParamRef<T>>& out) override {
        fc1_.collect_params(out);
        fc2_.collect_params(out);
    }

    DenseLayer<T>& fc2() { return fc2_; }

private:
    LayerSpec spec_;
    int ch_, red_;
    DenseLayer<T> fc1_;
    ReLULayer<T> relu_;
    DenseLayer<T> fc2_;
    TensorT<T> x_, gates_;
};

// ---------------------------------------------------------------------------

template <typename T>
LayerPtr<T> make_layer(const LayerSpec& s) {
    switch (s.kind) {
        case LayerKind::Conv2d: return std::make_unique<Conv2dLayer<T>>(s);
        case LayerKind::DepthwiseConv2d: return std::make_unique<DepthwiseConv2dLayer<T>>(s);
        case LayerKind::PointwiseConv2d: return std::make_unique<PointwiseConv2dLayer<T>>(s);
        case LayerKind::Dense: return std::make_unique<DenseLayer<T>>(s);
        case LayerKind::ReLU: return std::make_unique<ReLULayer<T>>(s);
        case LayerKind::BatchNorm: return std::make_unique<BatchNormLayer<T>>(s);
        case LayerKind::MaxPool: return std::make_unique<MaxPoolLayer<T>>(s);
        case LayerKind::AvgPool: return std::make_unique<AvgPoolLayer<T>>(s);
        case LayerKind::GlobalAvgPool: return std::make_unique<GlobalAvgPoolLayer<T>>(s);
        case LayerKind::ResidualBlock: return std::make_unique<ResidualBlockLayer<T>>(s);
        case LayerKind::ChannelAttention: return std::make_unique<ChannelAttentionLayer<T>>(s);
        case LayerKind::Softmax: return std::make_unique<SoftmaxLayer<T>>(s);
    }
    throw ValueError("unknown layer kind " + std::to_string(static_cast<int>(s.kind)));
}

} // namespace cjade::nn
