#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "cjade/image.hpp"
#include "cjade/network.hpp"

namespace cjade::models {

struct Sample {
    Tensor image; // CHW in [0,1]
    int label;
};

struct ModelArtifact {
    nn::Network net;
    nlohmann::json meta; // name, input, classes, seed, dataset_hash, created
    int class_count = 0;

    std::vector<int> input_chw() const { return net.input_shape; }
    std::string canonical_meta() const { return meta.dump(); }
    // stable identity of architecture + metadata, exchanged during handshake
    std::uint64_t meta_hash() const {
        const std::string m = canonical_meta();
        return fnv1a64(m.data(), m.size());
    }
};

// Lightweight classifier: stem conv (3->16) then four depthwise-separable
// blocks, each downsampling by stride 2, global average pool, dense head.
ModelArtifact build_lightweight(int class_count, int input_size, std::uint64_t init_seed);

// Large classifier: stem conv, three stages of two residual blocks with a
// channel-attention unit and max pool per stage, global average pool, dense
// head. Stage widths 32/64/128.
ModelArtifact build_large(int class_count, int input_size, std::uint64_t init_seed);

// Dense head over feature vectors, for classifying uploaded edge features.
ModelArtifact build_feature_head(int feature_len, int class_count, std::uint64_t init_seed);

// True when every input sample is standardized to zero mean / unit variance
// before the forward pass (the large model; shields it from global
// brightness and contrast shifts the raw-input edge model is exposed to).
bool uses_instance_norm(const ModelArtifact& m);

// Applies the artifact's declared input normalization to an N-leading batch.
// Identity for raw-input models.
Tensor preprocess_input(const ModelArtifact& m, Tensor batch);

// Batched logits -> softmax probabilities for NCHW or [N,F] input.
Tensor predict_probs(ModelArtifact& m, const Tensor& batch);

// Mean of logits over bilinear rescales {1.0, 0.75, 0.5} of one CHW image,
// each padded/cropped back to the model input size (edge replication, so a
// constant image is identical at every scale).
Tensor multiscale_forward(ModelArtifact& m, const Tensor& image,
                          const std::vector<float>& scales = {1.0f, 0.75f, 0.5f});

// Penultimate (global-average-pool) activations, [N, F].
Tensor extract_features(ModelArtifact& m, const Tensor& batch);
int feature_length(const ModelArtifact& m);

// Channel-mean of the deepest activation map that still has spatial extent
// >= 8, as a [H, W] tensor. Basis for region-of-interest selection.
Tensor saliency_map(ModelArtifact& m, const Tensor& image);

struct TrainConfig {
    int epochs = 5;
    std::uint64_t seed = 1;
    float lr = 0.05f;
    float momentum = 0.9f;
    int batch_size = 32;
    // stddev of seeded Gaussian noise added to (preprocessed) training inputs;
    // regularizer that buys robustness to the noisy evaluation conditions
    float input_noise = 0.0f;
    bool verbose = false;
};

struct EpochLog {
    int epoch;
    float train_loss;
    float val_accuracy;
};

// Deterministic SGD training; lr drops by 10x at 2/3 of the epochs. Returns
// the per-epoch log and records the final validation accuracy in meta.
std::vector<EpochLog> train(ModelArtifact& m, const std::vector<Sample>& train_set,
                            const std::vector<Sample>& val_set, const TrainConfig& cfg);

float evaluate_accuracy(ModelArtifact& m, const std::vector<Sample>& samples);

struct PruneReport {
    float target_sparsity = 0;
    float achieved_sparsity = 0;
    std::vector<std::pair<std::string, float>> per_layer_sparsity;
    std::int64_t params_before = 0;
    std::int64_t zeros_after = 0;
    float val_accuracy_before = 0;
    float val_accuracy_after = 0;
};

// Global unstructured magnitude pruning over conv/dense weights, mask frozen
// during fine-tuning.
PruneReport prune_magnitude(ModelArtifact& m, float target_sparsity, int finetune_epochs,
                            const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                            std::uint64_t seed);

void save_model(ModelArtifact& m, const std::string& path);
ModelArtifact load_model(const std::string& path);

// Fraction of exactly-zero entries among prunable weights.
float weight_sparsity(ModelArtifact& m);

std::string iso8601_now();

} // namespace cjade::models
