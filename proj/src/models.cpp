#include "cjade/models.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <numeric>

#include "cjade/io.hpp"

namespace cjade::models {

using nn::LayerSpec;

namespace {

nlohmann::json make_meta(const std::string& name, const std::vector<int>& input, int classes,
                         std::uint64_t seed, const std::string& input_norm) {
    nlohmann::json meta;
    meta["name"] = name;
    meta["input"] = input;
    meta["input_norm"] = input_norm;
    meta["classes"] = classes;
    meta["seed"] = seed;
    meta["dataset_hash"] = std::string();
    meta["created"] = iso8601_now();
    return meta;
}

void dwsep_block(std::vector<LayerSpec>& specs, int in_ch, int out_ch, int stride) {
    specs.push_back(LayerSpec::depthwise(in_ch, 3, stride, 1));
    specs.push_back(LayerSpec::batchnorm(in_ch));
    specs.push_back(LayerSpec::relu());
    specs.push_back(LayerSpec::pointwise(in_ch, out_ch));
    specs.push_back(LayerSpec::batchnorm(out_ch));
    specs.push_back(LayerSpec::relu());
}

void check_build_args(int class_count, int input_size) {
    if (class_count < 2) throw ValueError("class count must be >= 2, got " + std::to_string(class_count));
    if (input_size != 32 && input_size != 64)
        throw ValueError("supported input sizes are 32 and 64, got " + std::to_string(input_size));
}

} // namespace

ModelArtifact build_lightweight(int class_count, int input_size, std::uint64_t init_seed) {
    check_build_args(class_count, input_size);
    std::vector<LayerSpec> specs;
    specs.push_back(LayerSpec::conv2d(3, 16, 3, 1, 1, false));
    specs.push_back(LayerSpec::batchnorm(16));
    specs.push_back(LayerSpec::relu());
    dwsep_block(specs, 16, 24, 2);
    dwsep_block(specs, 24, 32, 2);
    dwsep_block(specs, 32, 48, 2);
    dwsep_block(specs, 48, 64, 2);
    specs.push_back(LayerSpec::global_avgpool());
    specs.push_back(LayerSpec::dense(64, class_count, true));

    ModelArtifact m;
    m.net = nn::Network::build(specs, {3, input_size, input_size}, init_seed);
    m.class_count = class_count;
    m.meta = make_meta("lightweight", {3, input_size, input_size}, class_count, init_seed, "none");
    return m;
}

ModelArtifact build_large(int class_count, int input_size, std::uint64_t init_seed) {
    check_build_args(class_count, input_size);
    std::vector<LayerSpec> specs;
    // stride-2 stem halves the spatial size up front
    specs.push_back(LayerSpec::conv2d(3, 16, 3, 2, 1, false));
    specs.push_back(LayerSpec::batchnorm(16));
    specs.push_back(LayerSpec::relu());
    int ch = 16;
    for (int width : {32, 64, 128}) {
        specs.push_back(LayerSpec::residual(ch, width));
        specs.push_back(LayerSpec::residual(width, width));
        specs.push_back(LayerSpec::channel_attention(width, 4));
        specs.push_back(LayerSpec::maxpool(2, 2));
        ch = width;
    }
    specs.push_back(LayerSpec::global_avgpool());
    specs.push_back(LayerSpec::dense(128, class_count, true));

    ModelArtifact m;
    m.net = nn::Network::build(specs, {3, input_size, input_size}, init_seed);
    m.class_count = class_count;
    m.meta = make_meta("large", {3, input_size, input_size}, class_count, init_seed, "instance");
    return m;
}

ModelArtifact build_feature_head(int feature_len, int class_count, std::uint64_t init_seed) {
    if (feature_len < 1) throw ValueError("feature length must be positive");
    if (class_count < 2) throw ValueError("class count must be >= 2");
    std::vector<LayerSpec> specs = {
        LayerSpec::dense(feature_len, 64, true),
        LayerSpec::relu(),
        LayerSpec::dense(64, class_count, true),
    };
    ModelArtifact m;
    m.net = nn::Network::build(specs, {feature_len}, init_seed);
    m.class_count = class_count;
    m.meta = make_meta("feature_head", {feature_len}, class_count, init_seed, "none");
    return m;
}

bool uses_instance_norm(const ModelArtifact& m) {
    return m.meta.value("input_norm", std::string("none")) == "instance";
}

Tensor preprocess_input(const ModelArtifact& m, Tensor batch) {
    if (!uses_instance_norm(m)) return batch;
    if (batch.ndim() < 2) throw ShapeError("preprocess_input: expected N-leading batch, got " + batch.shape_str());
    const int n = batch.shape[0];
    const std::int64_t stride = n ? batch.numel() / n : 0;
    if (stride < 2) throw ShapeError("preprocess_input: sample too small to standardize");
    for (int i = 0; i < n; ++i) {
        float* p = batch.data.data() + static_cast<std::int64_t>(i) * stride;
        double sum = 0.0;
        for (std::int64_t j = 0; j < stride; ++j) sum += p[j];
        const double mean = sum / static_cast<double>(stride);
        double sq = 0.0;
        for (std::int64_t j = 0; j < stride; ++j) {
            const double d = p[j] - mean;
            sq += d * d;
        }
        const float inv = 1.0f / std::max(static_cast<float>(std::sqrt(sq / static_cast<double>(stride))), 1e-3f);
        const float mu = static_cast<float>(mean);
        for (std::int64_t j = 0; j < stride; ++j) p[j] = (p[j] - mu) * inv;
    }
    return batch;
}

Tensor predict_probs(ModelArtifact& m, const Tensor& batch) {
    Tensor logits = m.net.forward(preprocess_input(m, batch), false);
    return nn::softmax_rows(logits);
}

Tensor multiscale_forward(ModelArtifact& m, const Tensor& image, const std::vector<float>& scales) {
    if (image.ndim() != 3) throw ShapeError("multiscale_forward: expected CHW, got " + image.shape_str());
    if (scales.empty()) throw ValueError("multiscale_forward: need at least one scale");
    const int S = m.net.input_shape[1];
    // standardize once on the source image so every scale sees the same stats
    Tensor src = image;
    if (uses_instance_norm(m)) {
        Tensor one({1, image.shape[0], image.shape[1], image.shape[2]});
        one.data = image.data;
        src.data = preprocess_input(m, std::move(one)).data;
    }
    Tensor batch({static_cast<int>(scales.size()), src.shape[0], S, S});
    for (std::size_t si = 0; si < scales.size(); ++si) {
        const float sc = scales[si];
        if (sc <= 0.0f || sc > 1.0f) throw ValueError("multiscale_forward: scale outside (0,1]");
        const int target = std::max(1, static_cast<int>(std::lround(S * sc)));
        Tensor view = src;
        if (src.shape[1] != target || src.shape[2] != target)
            view = img::resize_bilinear(src, target, target);
        if (view.shape[1] != S || view.shape[2] != S) view = img::center_pad_crop(view, S, S);
        std::copy(view.data.begin(), view.data.end(),
                  batch.data.begin() + static_cast<std::int64_t>(si) * view.numel());
    }
    Tensor logits = m.net.forward(batch, false);
    Tensor mean({1, m.class_count});
    for (int c = 0; c < m.class_count; ++c) {
        float acc = 0;
        for (std::size_t si = 0; si < scales.size(); ++si) acc += logits.at2(static_cast<int>(si), c);
        mean.at2(0, c) = acc / static_cast<float>(scales.size());
    }
    return mean;
}

namespace {

// index of the layer whose output feeds the global average pool
int penultimate_tap(const nn::Network& net) {
    for (std::size_t i = 0; i < net.specs.size(); ++i)
        if (net.specs[i].kind == nn::LayerKind::GlobalAvgPool) return static_cast<int>(i);
    throw ValueError("model has no global average pool layer");
}

} // namespace

Tensor extract_features(ModelArtifact& m, const Tensor& batch) {
    const int gap = penultimate_tap(m.net);
    Tensor pre = preprocess_input(m, batch);
    std::vector<Tensor> taps;
    m.net.forward_collect(pre, taps);
    return taps[static_cast<std::size_t>(gap)];
}

int feature_length(const ModelArtifact& m) {
    const int gap = penultimate_tap(m.net);
    std::vector<int> shape = m.net.input_shape;
    for (int i = 0; i <= gap; ++i) shape = nn::infer_shape(m.net.specs[static_cast<std::size_t>(i)], shape);
    return shape[0];
}

Tensor saliency_map(ModelArtifact& m, const Tensor& image) {
    if (image.ndim() != 3) throw ShapeError("saliency_map: expected CHW, got " + image.shape_str());
    Tensor batch({1, image.shape[0], image.shape[1], image.shape[2]});
    batch.data = image.data;
    batch = preprocess_input(m, std::move(batch));
    std::vector<Tensor> taps;
    m.net.forward_collect(batch, taps);
    // deepest activation that still has enough spatial resolution to localize
    for (std::size_t i = taps.size(); i-- > 0;) {
        const Tensor& t = taps[i];
        if (t.ndim() == 4 && t.dim(2) >= 8 && t.dim(3) >= 8) {
            const int C = t.dim(1), H = t.dim(2), W = t.dim(3);
            Tensor map({H, W});
            for (int c = 0; c < C; ++c) {
                const float* r = t.data.data() + static_cast<std::size_t>(c) * H * W;
                for (int j = 0; j < H * W; ++j) map[j] += r[j];
            }
            for (int j = 0; j < H * W; ++j) map[j] /= static_cast<float>(C);
            return map;
        }
    }
    throw ValueError("model has no activation map with spatial extent >= 8");
}

namespace {

Tensor stack_batch(const std::vector<Sample>& samples, const std::vector<int>& order, std::size_t begin,
                   std::size_t end, std::vector<int>& labels) {
    const Tensor& first = samples[static_cast<std::size_t>(order[begin])].image;
    std::vector<int> shape = {static_cast<int>(end - begin)};
    shape.insert(shape.end(), first.shape.begin(), first.shape.end());
    Tensor batch(shape);
    labels.clear();
    const std::int64_t stride = first.numel();
    for (std::size_t i = begin; i < end; ++i) {
        const Sample& s = samples[static_cast<std::size_t>(order[i])];
        if (!s.image.same_shape(first)) throw ShapeError("training samples disagree in shape");
        std::copy(s.image.data.begin(), s.image.data.end(),
                  batch.data.begin() + static_cast<std::int64_t>(i - begin) * stride);
        labels.push_back(s.label);
    }
    return batch;
}

void check_dataset(const std::vector<Sample>& train_set, int class_count) {
    std::vector<int> counts(static_cast<std::size_t>(class_count), 0);
    for (const auto& s : train_set) {
        if (s.label < 0 || s.label >= class_count)
            throw ValueError("sample label " + std::to_string(s.label) + " outside class range");
        ++counts[static_cast<std::size_t>(s.label)];
    }
    int populated = 0;
    for (int c : counts)
        if (c >= 10) ++populated;
    if (populated < 2)
        throw ValueError("training needs at least 2 classes with at least 10 samples each");
}

} // namespace

float evaluate_accuracy(ModelArtifact& m, const std::vector<Sample>& samples) {
    if (samples.empty()) throw ValueError("cannot evaluate on an empty sample set");
    std::vector<int> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t correct = 0;
    const std::size_t bs = 64;
    for (std::size_t at = 0; at < samples.size(); at += bs) {
        const std::size_t end = std::min(samples.size(), at + bs);
        std::vector<int> labels;
        Tensor batch = stack_batch(samples, order, at, end, labels);
        Tensor probs = predict_probs(m, batch);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            int arg = 0;
            for (int c = 1; c < m.class_count; ++c)
                if (probs.at2(static_cast<int>(i), c) > probs.at2(static_cast<int>(i), arg)) arg = c;
            if (arg == labels[i]) ++correct;
        }
    }
    return static_cast<float>(correct) / static_cast<float>(samples.size());
}

std::vector<EpochLog> train(ModelArtifact& m, const std::vector<Sample>& train_set,
                            const std::vector<Sample>& val_set, const TrainConfig& cfg) {
    if (cfg.epochs < 0) throw ValueError("epochs must be >= 0");
    if (cfg.epochs > 0) check_dataset(train_set, m.class_count);
    nn::SgdMomentum<float> opt(cfg.lr, cfg.momentum);
    std::vector<EpochLog> log;
    std::vector<int> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    const int decay_at = cfg.epochs * 2 / 3;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (epoch == decay_at && decay_at > 0) opt.set_lr(cfg.lr * 0.1f);
        // deterministic shuffle keyed on (seed, epoch)
        Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(rng.next_below(i))]);

        double loss_sum = 0;
        std::size_t batches = 0;
        for (std::size_t at = 0; at < train_set.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(train_set.size(), at + static_cast<std::size_t>(cfg.batch_size));
            std::vector<int> labels;
            Tensor batch = preprocess_input(m, stack_batch(train_set, order, at, end, labels));
            if (cfg.input_noise > 0.0f) {
                Rng noise(mix_seed(mix_seed(cfg.seed, 0x1015Eull),
                                   (static_cast<std::uint64_t>(epoch) << 32) | at));
                for (auto& v : batch.data) v += cfg.input_noise * noise.normal();
            }
            m.net.zero_grads();
            Tensor logits = m.net.forward(batch, true);
            Tensor dlogits({1});
            loss_sum += nn::cross_entropy_from_logits(logits, labels, &dlogits);
            ++batches;
            m.net.backward(dlogits);
            auto params = m.net.params();
            opt.step(params);
        }
        EpochLog e;
        e.epoch = epoch;
        e.train_loss = batches ? static_cast<float>(loss_sum / static_cast<double>(batches)) : 0.0f;
        e.val_accuracy = val_set.empty() ? 0.0f : evaluate_accuracy(m, val_set);
        log.push_back(e);
        if (cfg.verbose)
            std::fprintf(stderr, "epoch %d loss %.4f val %.4f\n", e.epoch, e.train_loss, e.val_accuracy);
    }
    m.meta["seed"] = cfg.seed;
    m.meta["epochs"] = cfg.epochs;
    if (!log.empty()) m.meta["val_accuracy"] = log.back().val_accuracy;
    return log;
}

float weight_sparsity(ModelArtifact& m) {
    std::int64_t zeros = 0, total = 0;
    for (auto& p : m.net.params()) {
        if (!p.prunable) continue;
        total += p.value->numel();
        for (std::int64_t i = 0; i < p.value->numel(); ++i)
            if ((*p.value)[i] == 0.0f) ++zeros;
    }
    return total ? static_cast<float>(zeros) / static_cast<float>(total) : 0.0f;
}

PruneReport prune_magnitude(ModelArtifact& m, float target_sparsity, int finetune_epochs,
                            const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                            std::uint64_t seed) {
    if (target_sparsity < 0.0f || target_sparsity >= 1.0f)
        throw ValueError("target sparsity must be in [0,1)");
    PruneReport report;
    report.target_sparsity = target_sparsity;
    report.val_accuracy_before = val_set.empty() ? 0.0f : evaluate_accuracy(m, val_set);

    auto params = m.net.params();
    std::vector<float> magnitudes;
    for (auto& p : params) {
        if (!p.prunable) continue;
        report.params_before += p.value->numel();
        for (std::int64_t i = 0; i < p.value->numel(); ++i)
            magnitudes.push_back(std::abs((*p.value)[i]));
    }
    const std::int64_t to_zero =
        static_cast<std::int64_t>(std::llround(static_cast<double>(magnitudes.size()) * target_sparsity));
    if (to_zero > 0) {
        // global threshold = magnitude of the to_zero-th smallest weight
        std::nth_element(magnitudes.begin(), magnitudes.begin() + (to_zero - 1), magnitudes.end());
        const float threshold = magnitudes[static_cast<std::size_t>(to_zero - 1)];
        std::int64_t zeroed = 0;
        for (auto& p : params) {
            if (!p.prunable) continue;
            for (std::int64_t i = 0; i < p.value->numel(); ++i) {
                // strict comparison first, then ties up to the exact budget
                if (std::abs((*p.value)[i]) < threshold) {
                    (*p.value)[i] = 0.0f;
                    ++zeroed;
                }
            }
        }
        for (auto& p : params) {
            if (!p.prunable || zeroed >= to_zero) continue;
            for (std::int64_t i = 0; i < p.value->numel() && zeroed < to_zero; ++i) {
                if ((*p.value)[i] != 0.0f && std::abs((*p.value)[i]) == threshold) {
                    (*p.value)[i] = 0.0f;
                    ++zeroed;
                }
            }
        }
    }

    // frozen masks: positions that are zero now stay zero through fine-tuning
    std::vector<std::vector<char>> masks;
    for (auto& p : params) {
        std::vector<char> mask;
        if (p.prunable) {
            mask.resize(static_cast<std::size_t>(p.value->numel()));
            for (std::int64_t i = 0; i < p.value->numel(); ++i)
                mask[static_cast<std::size_t>(i)] = (*p.value)[i] == 0.0f ? 1 : 0;
        }
        masks.push_back(std::move(mask));
    }

    if (finetune_epochs > 0 && !train_set.empty()) {
        TrainConfig cfg;
        cfg.epochs = finetune_epochs;
        cfg.seed = seed;
        cfg.lr = 0.005f;
        nn::SgdMomentum<float> opt(cfg.lr, cfg.momentum);
        std::vector<int> order(train_set.size());
        std::iota(order.begin(), order.end(), 0);
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            Rng rng(mix_seed(seed, 0xf1eceull + static_cast<std::uint64_t>(epoch)));
            for (std::size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[static_cast<std::size_t>(rng.next_below(i))]);
            for (std::size_t at = 0; at < train_set.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
                const std::size_t end =
                    std::min(train_set.size(), at + static_cast<std::size_t>(cfg.batch_size));
                std::vector<int> labels;
                Tensor batch = preprocess_input(m, stack_batch(train_set, order, at, end, labels));
                m.net.zero_grads();
                Tensor dlogits({1});
                nn::cross_entropy_from_logits(m.net.forward(batch, true), labels, &dlogits);
                m.net.backward(dlogits);
                auto ps = m.net.params();
                opt.step(ps);
                for (std::size_t pi = 0; pi < ps.size(); ++pi) {
                    if (masks[pi].empty()) continue;
                    for (std::int64_t i = 0; i < ps[pi].value->numel(); ++i)
                        if (masks[pi][static_cast<std::size_t>(i)]) (*ps[pi].value)[i] = 0.0f;
                }
            }
        }
    }

    std::int64_t zeros = 0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        if (!params[pi].prunable) continue;
        std::int64_t layer_zeros = 0;
        for (std::int64_t i = 0; i < params[pi].value->numel(); ++i)
            if ((*params[pi].value)[i] == 0.0f) ++layer_zeros;
        zeros += layer_zeros;
        report.per_layer_sparsity.push_back(
            {params[pi].name,
             static_cast<float>(layer_zeros) / static_cast<float>(params[pi].value->numel())});
    }
    report.zeros_after = zeros;
    report.achieved_sparsity =
        report.params_before ? static_cast<float>(zeros) / static_cast<float>(report.params_before) : 0.0f;
    report.val_accuracy_after = val_set.empty() ? report.val_accuracy_before : evaluate_accuracy(m, val_set);
    m.meta["sparsity"] = report.achieved_sparsity;
    return report;
}

void save_model(ModelArtifact& m, const std::string& path) {
    io::write_file(path, io::serialize_weights(m.net, m.canonical_meta()));
}

ModelArtifact load_model(const std::string& path) {
    io::LoadedWeights w = io::parse_weights(io::read_file(path));
    nlohmann::json meta = nlohmann::json::parse(w.meta_json);
    if (!meta.contains("input") || !meta.contains("classes"))
        throw io::Malformed("weights meta lacks input shape or class count");
    std::vector<int> input = meta["input"].get<std::vector<int>>();
    ModelArtifact m;
    m.net = nn::Network::build(w.specs, input, 0);
    io::apply_weights(m.net, w);
    m.meta = std::move(meta);
    m.class_count = m.meta["classes"].get<int>();
    return m;
}

std::string iso8601_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

} // namespace cjade::models
