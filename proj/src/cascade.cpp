#include "cjade/cascade.hpp"

#include "cjade/common.hpp"
#include "cjade/image.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace cjade::cascade {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

void check_probs(const std::vector<float>& probs) {
    if (probs.empty()) throw ValueError("probability vector is empty");
    float sum = 0.0f;
    for (float p : probs) {
        if (!(p >= -1e-6f)) throw ValueError("probabilities must be non-negative");
        sum += p;
    }
    if (std::abs(sum - 1.0f) > 1e-4f)
        throw ValueError("probabilities must sum to 1, got " + std::to_string(sum));
}

} // namespace

const char* payload_kind_name(PayloadKind k) {
    switch (k) {
        case PayloadKind::FullImage: return "full_image";
        case PayloadKind::Roi: return "roi";
        case PayloadKind::Features: return "features";
    }
    throw ValueError("unknown payload kind");
}

PayloadKind payload_kind_from_name(const std::string& name) {
    for (int i = 0; i < 3; ++i) {
        const auto k = static_cast<PayloadKind>(i);
        if (name == payload_kind_name(k)) return k;
    }
    throw ValueError("unknown payload kind name: " + name);
}

const char* provenance_name(Provenance p) {
    switch (p) {
        case Provenance::Edge: return "edge";
        case Provenance::Cloud: return "cloud";
        case Provenance::Fused: return "fused";
        case Provenance::FallbackEdge: return "fallback_edge";
    }
    throw ValueError("unknown provenance");
}

void validate_policy(const CascadePolicy& p) {
    if (!(p.tau >= 0.0f && p.tau <= 1.0f)) throw ValueError("tau must be within [0, 1]");
    if (!(p.alpha >= 0.0f && p.alpha <= 1.0f)) throw ValueError("alpha must be within [0, 1]");
    if (!(p.roi_margin >= 0.0f && p.roi_margin <= 1.0f))
        throw ValueError("roi margin must be within [0, 1]");
    if (!(p.timeout_ms > 0.0)) throw ValueError("timeout must be positive");
}

ClassificationResult result_from_probs(std::vector<float> probs, Provenance provenance) {
    check_probs(probs);
    ClassificationResult r;
    r.label = 0;
    for (std::size_t i = 1; i < probs.size(); ++i)
        if (probs[i] > probs[static_cast<std::size_t>(r.label)]) r.label = static_cast<int>(i);
    r.confidence = probs[static_cast<std::size_t>(r.label)];
    r.probs = std::move(probs);
    r.provenance = provenance;
    return r;
}

void validate_result(const ClassificationResult& r) {
    check_probs(r.probs);
    const auto max_it = std::max_element(r.probs.begin(), r.probs.end());
    if (r.confidence != *max_it) throw ValueError("confidence must equal the max probability");
    if (r.label != static_cast<int>(max_it - r.probs.begin()))
        throw ValueError("label must be the lowest argmax index");
}

GateDecision gate(const std::vector<float>& probs, float tau) {
    check_probs(probs);
    const float top = *std::max_element(probs.begin(), probs.end());
    return top >= tau ? GateDecision::Accept : GateDecision::Escalate;
}

std::pair<Tensor, RoiBox> extract_roi(const Tensor& image, const Tensor& activation, float margin) {
    if (image.ndim() != 3) throw ShapeError("expected CHW image, got " + image.shape_str());
    if (activation.ndim() != 2)
        throw ShapeError("expected HxW activation map, got " + activation.shape_str());
    if (!(margin >= 0.0f && margin <= 1.0f)) throw ValueError("margin must be within [0, 1]");
    const int h = image.dim(1), w = image.dim(2);
    const int mh = activation.dim(0), mw = activation.dim(1);
    if (h % mh != 0 || w % mw != 0)
        throw ShapeError("activation map " + activation.shape_str() +
                         " does not upscale to image " + image.shape_str());
    const int ky = h / mh, kx = w / mw;

    double mean = 0.0;
    for (float v : activation.data) mean += v;
    mean /= static_cast<double>(activation.data.size());
    double var = 0.0;
    for (float v : activation.data) var += (v - mean) * (v - mean);
    var /= static_cast<double>(activation.data.size());
    const double thr = mean + std::sqrt(var);

    int rmin = mh, rmax = -1, cmin = mw, cmax = -1;
    for (int r = 0; r < mh; ++r)
        for (int c = 0; c < mw; ++c)
            if (activation.data[static_cast<std::size_t>(r) * mw + c] >= thr) {
                rmin = std::min(rmin, r);
                rmax = std::max(rmax, r);
                cmin = std::min(cmin, c);
                cmax = std::max(cmax, c);
            }

    int y0 = 0, y1 = h, x0 = 0, x1 = w;
    if (rmax >= 0) {
        y0 = rmin * ky;
        y1 = (rmax + 1) * ky;
        x0 = cmin * kx;
        x1 = (cmax + 1) * kx;
        const int dy = static_cast<int>(std::floor(margin * static_cast<float>(h)));
        const int dx = static_cast<int>(std::floor(margin * static_cast<float>(w)));
        y0 = std::max(0, y0 - dy);
        y1 = std::min(h, y1 + dy);
        x0 = std::max(0, x0 - dx);
        x1 = std::min(w, x1 + dx);
    }
    RoiBox box{x0, y0, x1 - x0, y1 - y0};
    return {img::crop(image, y0, x0, y1, x1), box};
}

std::vector<float> edge_features(models::ModelArtifact& m, const Tensor& image) {
    if (image.ndim() != 3) throw ShapeError("expected CHW image, got " + image.shape_str());
    Tensor batch({1, image.dim(0), image.dim(1), image.dim(2)});
    batch.data = image.data;
    const Tensor feats = models::extract_features(m, batch);
    return {feats.data.begin(), feats.data.end()};
}

ClassificationResult fuse(const ClassificationResult& edge, const ClassificationResult& cloud,
                          FusionRule rule, float alpha) {
    if (edge.probs.size() != cloud.probs.size())
        throw ValueError("fuse: class counts differ, " + std::to_string(edge.probs.size()) +
                         " vs " + std::to_string(cloud.probs.size()));
    if (!(alpha >= 0.0f && alpha <= 1.0f)) throw ValueError("alpha must be within [0, 1]");
    std::vector<float> probs;
    if (rule == FusionRule::CloudWins) {
        probs = cloud.probs;
    } else {
        probs.resize(edge.probs.size());
        float sum = 0.0f;
        for (std::size_t i = 0; i < probs.size(); ++i) {
            probs[i] = alpha * cloud.probs[i] + (1.0f - alpha) * edge.probs[i];
            sum += probs[i];
        }
        for (auto& p : probs) p /= sum;
    }
    auto fused = result_from_probs(std::move(probs), Provenance::Fused);
    fused.timing.edge_ms = edge.timing.edge_ms + cloud.timing.edge_ms;
    fused.timing.network_ms = edge.timing.network_ms + cloud.timing.network_ms;
    fused.timing.cloud_ms = edge.timing.cloud_ms + cloud.timing.cloud_ms;
    fused.timing.total_ms = edge.timing.total_ms + cloud.timing.total_ms;
    fused.bytes_sent = edge.bytes_sent + cloud.bytes_sent;
    fused.bytes_received = edge.bytes_received + cloud.bytes_received;
    return fused;
}

ClassificationResult classify_cascaded(const Tensor& image, const CascadePolicy& policy,
                                       models::ModelArtifact& edge, CloudTransport* cloud) {
    validate_policy(policy);
    if (image.ndim() != 3) throw ShapeError("expected CHW image, got " + image.shape_str());
    const auto t0 = Clock::now();

    Tensor batch({1, image.dim(0), image.dim(1), image.dim(2)});
    batch.data = image.data;
    const Tensor prob_row = models::predict_probs(edge, batch);
    std::vector<float> probs(prob_row.data.begin(), prob_row.data.end());
    auto edge_result = result_from_probs(std::move(probs), Provenance::Edge);
    edge_result.timing.edge_ms = ms_since(t0);
    edge_result.timing.total_ms = edge_result.timing.edge_ms;

    if (gate(edge_result.probs, policy.tau) == GateDecision::Accept) {
        edge_result.timing.total_ms = ms_since(t0);
        return edge_result;
    }

    CloudRequest request;
    request.kind = policy.payload;
    switch (policy.payload) {
        case PayloadKind::FullImage:
            request.image = image;
            break;
        case PayloadKind::Roi: {
            const Tensor sal = models::saliency_map(edge, image);
            auto [crop, box] = extract_roi(image, sal, policy.roi_margin);
            request.image = std::move(crop);
            request.box = box;
            break;
        }
        case PayloadKind::Features:
            request.features = edge_features(edge, image);
            break;
    }

    CloudReply reply;
    if (cloud == nullptr) {
        reply.error = "no transport configured";
    } else {
        reply = cloud->classify(request, policy.timeout_ms);
    }
    if (!reply.ok) {
        if (policy.fallback == FallbackRule::EdgeResultFlagged) {
            edge_result.provenance = Provenance::FallbackEdge;
            edge_result.timing.total_ms = ms_since(t0);
            return edge_result;
        }
        edge_result.timing.total_ms = ms_since(t0);
        throw EscalationError("escalation failed: " + reply.error, edge_result);
    }

    auto cloud_result = result_from_probs(reply.probs, Provenance::Cloud);
    cloud_result.timing.network_ms = reply.network_ms;
    cloud_result.timing.cloud_ms = reply.cloud_ms;
    cloud_result.timing.total_ms = reply.network_ms + reply.cloud_ms;
    cloud_result.bytes_sent = reply.bytes_sent;
    cloud_result.bytes_received = reply.bytes_received;

    auto fused = fuse(edge_result, cloud_result, policy.fusion, policy.alpha);
    fused.timing.total_ms = ms_since(t0);
    return fused;
}

} // namespace cjade::cascade
