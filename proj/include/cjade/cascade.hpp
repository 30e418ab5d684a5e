#pragma once

#include "cjade/models.hpp"
#include "cjade/tensor.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cjade::cascade {

enum class PayloadKind : int { FullImage = 0, Roi = 1, Features = 2 };
enum class FusionRule : int { CloudWins = 0, WeightedAverage = 1 };
enum class FallbackRule : int { EdgeResultFlagged = 0, Error = 1 };
enum class Provenance : int { Edge = 0, Cloud = 1, Fused = 2, FallbackEdge = 3 };
enum class GateDecision { Accept, Escalate };

const char* payload_kind_name(PayloadKind k);
PayloadKind payload_kind_from_name(const std::string& name);
const char* provenance_name(Provenance p);

// tau 0 never escalates and 1 always escalates on non-saturated probabilities
struct CascadePolicy {
    float tau = 0.85f;
    PayloadKind payload = PayloadKind::FullImage;
    float roi_margin = 0.1f;
    FusionRule fusion = FusionRule::CloudWins;
    float alpha = 1.0f;
    FallbackRule fallback = FallbackRule::EdgeResultFlagged;
    double timeout_ms = 1000.0;
};

void validate_policy(const CascadePolicy& p);

struct Timing {
    double edge_ms = 0.0;
    double network_ms = 0.0;
    double cloud_ms = 0.0;
    double total_ms = 0.0;
};

struct ClassificationResult {
    int label = 0;
    std::vector<float> probs;
    float confidence = 0.0f;
    Provenance provenance = Provenance::Edge;
    Timing timing;
    std::uint64_t bytes_sent = 0;
    std::uint64_t bytes_received = 0;
};

ClassificationResult result_from_probs(std::vector<float> probs, Provenance provenance);
void validate_result(const ClassificationResult& r);

struct RoiBox {
    int x = 0;
    int y = 0;
    int width = 0;
    int height = 0;
};

GateDecision gate(const std::vector<float>& probs, float tau);
std::pair<Tensor, RoiBox> extract_roi(const Tensor& image, const Tensor& activation, float margin);
std::vector<float> edge_features(models::ModelArtifact& m, const Tensor& image);
ClassificationResult fuse(const ClassificationResult& edge, const ClassificationResult& cloud,
                          FusionRule rule, float alpha);

struct CloudRequest {
    PayloadKind kind = PayloadKind::FullImage;
    Tensor image;
    std::vector<float> features;
    RoiBox box;
};

struct CloudReply {
    bool ok = false;
    std::string error;
    std::vector<float> probs;
    double network_ms = 0.0;
    double cloud_ms = 0.0;
    std::uint64_t bytes_sent = 0;
    std::uint64_t bytes_received = 0;
};

class CloudTransport {
  public:
    virtual ~CloudTransport() = default;
    virtual CloudReply classify(const CloudRequest& request, double timeout_ms) = 0;
};

struct EscalationError : std::runtime_error {
    ClassificationResult partial;
    EscalationError(const std::string& what, ClassificationResult p)
        : std::runtime_error(what), partial(std::move(p)) {}
};

ClassificationResult classify_cascaded(const Tensor& image, const CascadePolicy& policy,
                                       models::ModelArtifact& edge, CloudTransport* cloud);

} // namespace cjade::cascade
