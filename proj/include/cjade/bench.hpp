#pragma once

#include "cjade/cascade.hpp"
#include "cjade/dataset.hpp"
#include "cjade/models.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace cjade::bench {

struct NetworkProfile {
    double latency_ms = 20.0; // one-way mean, charged to each direction
    double jitter_ms = 5.0;   // uniform in [-jitter, +jitter], seeded
    double bandwidth_bps = 2.0 * 1024.0 * 1024.0; // INFINITY disables the size term
    double drop = 0.0;        // probability an escalation round trip is severed
    std::uint64_t seed = 1;
};

void validate_profile(const NetworkProfile& p);
// bandwidth 0 in JSON stands for infinite (JSON has no Infinity literal)
nlohmann::json profile_to_json(const NetworkProfile& p);
NetworkProfile profile_from_json(const nlohmann::json& j);

// Wraps a transport with deterministic delay and drop decisions keyed by
// (profile seed, request index). Delays are bookkeeping on the reply, not
// wall-clock sleeps, so benchmarks stay fast and reproducible.
class SimulatedNetwork : public cascade::CloudTransport {
  public:
    SimulatedNetwork(cascade::CloudTransport& inner, NetworkProfile profile);
    cascade::CloudReply classify(const cascade::CloudRequest& request, double timeout_ms) override;
    void reset_index() { index_ = 0; }

  private:
    cascade::CloudTransport& inner_;
    NetworkProfile profile_;
    std::uint64_t index_ = 0;
};

// Per-image compute latency derived from operation counts at fixed
// desk-scale rates, so every reported number is host-independent. The rates
// are the calibration knob: they place one edge forward near 29 ms and a
// cloud multiscale pass near 92 ms, landing the cloud-only:edge-only latency
// ratio near 4.7x under the default network profile.
struct CostModel {
    double edge_mflops = 0;       // one lightweight forward
    double cloud_full_mflops = 0; // multiscale large forward
    double cloud_feat_mflops = 0; // feature head forward
    double edge_mflops_per_ms = 0.05;
    double cloud_mflops_per_ms = 1.66;

    double edge_ms() const { return edge_mflops / edge_mflops_per_ms; }
    double cloud_ms(cascade::PayloadKind kind) const {
        return (kind == cascade::PayloadKind::Features ? cloud_feat_mflops : cloud_full_mflops) /
               cloud_mflops_per_ms;
    }
};

// Operation count of one forward pass for a single sample, in MFLOPs.
double forward_mflops(const nn::Network& net);

// Penultimate features of the edge model with the wire's quantization loss
// applied, so a head trains on exactly what the server will decode.
std::vector<models::Sample> feature_samples(models::ModelArtifact& edge,
                                            const std::vector<models::Sample>& images);

CostModel build_cost_model(const models::ModelArtifact& light, const models::ModelArtifact& large,
                           const models::ModelArtifact& head);

// In-process stand-in for the classification server: identical compute paths
// and byte accounting (encoded request/response frame sizes), compute
// latency from the cost model, results memoized by payload content.
class LocalCloud : public cascade::CloudTransport {
  public:
    LocalCloud(models::ModelArtifact& large, models::ModelArtifact* head, CostModel cost);
    cascade::CloudReply classify(const cascade::CloudRequest& request, double timeout_ms) override;

  private:
    models::ModelArtifact& large_;
    models::ModelArtifact* head_;
    CostModel cost_;
    std::unordered_map<std::uint64_t, std::vector<float>> memo_;
};

struct BenchOptions {
    data::DatasetManifest manifest;
    NetworkProfile profile;
    std::uint64_t seed = 1;
    cascade::CascadePolicy policy; // the headline hybrid configuration
    std::vector<float> tau_grid = {0.0f, 0.5f, 0.6f, 0.7f, 0.8f,
                                   0.85f, 0.9f, 0.95f, 0.99f, 1.0f};
    int light_epochs = 12;
    int large_epochs = 3;
    float large_input_noise = 0.10f;
    int head_epochs = 8;
    std::string out_dir;   // "" writes no files
    std::string cache_dir; // "" always trains
    bool verbose = false;
};

struct ModeRow {
    std::string mode;      // edge | cloud | hybrid
    std::string condition; // overall | normal | low_light | ...
    int samples = 0;
    double accuracy_pct = 0;
    double mean_latency_ms = 0;
    double p95_latency_ms = 0;
    double mean_bytes = 0;
    double escalation_rate = 0;
    double edge_compute_ms = 0;
};

struct SweepPoint {
    float tau = 0;
    double accuracy_pct = 0;
    double mean_latency_ms = 0;
    double escalation_rate = 0;
    double mean_bytes = 0;
};

// per-payload-kind hybrid comparison at the headline threshold
struct PayloadRow {
    std::string payload;
    double accuracy_pct = 0;
    double escalation_rate = 0;
    double mean_escalated_bytes = 0; // wire bytes per escalated sample
    double mean_latency_ms = 0;
};

struct SampleOutcome {
    std::string mode;
    std::string condition;
    int index = 0;
    int label = 0;
    int predicted = 0;
    bool correct = false;
    bool escalated = false;
    std::string provenance;
    double edge_ms = 0, network_ms = 0, cloud_ms = 0, total_ms = 0;
    std::uint64_t bytes = 0;
};

struct BenchReport {
    std::uint64_t seed = 0;
    float tau = 0;
    std::string payload;
    NetworkProfile profile;
    CostModel cost;
    std::vector<ModeRow> rows;        // 3 modes x (overall + 4 conditions)
    std::vector<SweepPoint> sweep;
    std::vector<PayloadRow> payloads; // full_image, roi, features at the headline tau
    std::vector<SampleOutcome> raw;   // every evaluated sample of the mode rows

    const ModeRow& row(const std::string& mode, const std::string& condition) const;
    nlohmann::json to_json() const; // deterministic: no timestamps, no host data
    std::string to_text() const;    // aligned tables plus measured-host footnote
    std::string sweep_csv() const;
    std::string raw_jsonl() const;
};

// trained artifacts handed back for reuse (acceptance checks, serving)
struct BenchArtifacts {
    models::ModelArtifact light;
    models::ModelArtifact large;
    models::ModelArtifact head;
    data::DatasetSplits splits;
    CostModel cost;
};

// Trains or loads both models plus the feature head, evaluates the
// mode x condition grid, sweeps the threshold, and writes report.txt,
// report.json, raw.jsonl, and sweep.csv to out_dir when set.
BenchReport run_benchmark(const BenchOptions& opt, BenchArtifacts* artifacts = nullptr);

} // namespace cjade::bench
