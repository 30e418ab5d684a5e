#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cjade/layers.hpp"

namespace cjade::nn {

// A plain sequential chain. Shapes are validated once at build time; the
// batch dimension is implicit everywhere.
template <typename T>
struct NetworkT {
    std::vector<LayerSpec> specs;
    std::vector<LayerPtr<T>> layers;
    std::vector<int> input_shape;  // CHW, no batch dim
    std::vector<int> output_shape;

    static NetworkT build(std::vector<LayerSpec> s, std::vector<int> in_shape, std::uint64_t init_seed) {
        NetworkT net;
        net.output_shape = infer_chain(s, in_shape);
        net.input_shape = std::move(in_shape);
        net.specs = std::move(s);
        net.layers.reserve(net.specs.size());
        for (std::size_t i = 0; i < net.specs.size(); ++i) {
            auto layer = make_layer<T>(net.specs[i]);
            Rng rng(mix_seed(init_seed, i));
            layer->init_params(rng);
            net.layers.push_back(std::move(layer));
        }
        return net;
    }

    TensorT<T> forward(const TensorT<T>& x, bool train) {
        TensorT<T> cur = x;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            try {
                cur = layers[i]->forward(cur, train);
            } catch (const std::runtime_error& e) {
                throw ShapeError("layer " + std::to_string(i) + ": " + e.what());
            }
        }
        return cur;
    }

    // Like forward but records every layer's output. taps[i] is the output of
    // layer i; used for feature extraction and saliency without re-running.
    TensorT<T> forward_collect(const TensorT<T>& x, std::vector<TensorT<T>>& taps) {
        taps.clear();
        taps.reserve(layers.size());
        TensorT<T> cur = x;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            cur = layers[i]->forward(cur, false);
            taps.push_back(cur);
        }
        return cur;
    }

    TensorT<T> backward(const TensorT<T>& gy) {
        TensorT<T> g = gy;
        for (std::size_t i = layers.size(); i-- > 0;) g = layers[i]->backward(g);
        return g;
    }

    std::vector<ParamRef<T>> params() {
        std::vector<ParamRef<T>> out;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            std::size_t before = out.size();
            layers[i]->collect_params(out);
            for (std::size_t j = before; j < out.size(); ++j)
                out[j].name = "L" + std::to_string(i) + "." + out[j].name;
        }
        return out;
    }

    std::vector<TensorT<T>*> buffers() {
        std::vector<TensorT<T>*> out;
        for (auto& l : layers) l->collect_buffers(out);
        return out;
    }

    void zero_grads() {
        for (auto& p : params()) p.grad->zero();
    }

    std::int64_t param_count() {
        std::int64_t n = 0;
        for (auto& p : params()) n += p.value->numel();
        return n;
    }
};

using Network = NetworkT<float>;

// Mean cross-entropy from raw logits via logsumexp. When dlogits is given it
// receives (softmax - onehot) / N.
template <typename T>
T cross_entropy_from_logits(const TensorT<T>& logits, const std::vector<int>& labels,
                            TensorT<T>* dlogits = nullptr) {
    if (logits.ndim() != 2) throw ShapeError("cross_entropy: expected [N,C], got " + logits.shape_str());
    const int N = logits.dim(0), C = logits.dim(1);
    if (static_cast<int>(labels.size()) != N)
        throw ValueError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(N) + " rows");
    if (dlogits) *dlogits = TensorT<T>(logits.shape);
    T total = 0;
    for (int n = 0; n < N; ++n) {
        if (labels[n] < 0 || labels[n] >= C)
            throw ValueError("cross_entropy: label " + std::to_string(labels[n]) + " out of range");
        const T* r = &logits.at2(n, 0);
        T mx = r[0];
        for (int c = 1; c < C; ++c) mx = std::max(mx, r[c]);
        T sum = 0;
        for (int c = 0; c < C; ++c) sum += std::exp(r[c] - mx);
        const T lse = mx + std::log(sum);
        total += lse - r[labels[n]];
        if (dlogits) {
            T* d = &dlogits->at2(n, 0);
            for (int c = 0; c < C; ++c) {
                const T p = std::exp(r[c] - lse);
                d[c] = (p - (c == labels[n] ? T(1) : T(0))) / static_cast<T>(N);
            }
        }
    }
    return total / static_cast<T>(N);
}

// SGD with classical momentum: v = mu*v + g; w -= lr*v.
template <typename T>
class SgdMomentum {
public:
    SgdMomentum(T lr, T momentum) : lr_(lr), mu_(momentum) {}

    void step(std::vector<ParamRef<T>>& params) {
        if (velocity_.empty())
            for (auto& p : params) velocity_.emplace_back(p.value->shape);
        if (velocity_.size() != params.size())
            throw ValueError("SgdMomentum: parameter set changed between steps");
        for (std::size_t i = 0; i < params.size(); ++i) {
            TensorT<T>& v = velocity_[i];
            TensorT<T>& w = *params[i].value;
            TensorT<T>& g = *params[i].grad;
            for (std::int64_t j = 0; j < w.numel(); ++j) {
                v[j] = mu_ * v[j] + g[j];
                w[j] -= lr_ * v[j];
            }
        }
    }

    void set_lr(T lr) { lr_ = lr; }
    T lr() const { return lr_; }

private:
    T lr_, mu_;
    std::vector<TensorT<T>> velocity_;
};

} // namespace cjade::nn
