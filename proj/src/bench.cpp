#include "cjade/bench.hpp"

#include "cjade/image.hpp"
#include "cjade/io.hpp"
#include "cjade/protocol.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace cjade::bench {

void validate_profile(const NetworkProfile& p) {
    if (!(p.latency_ms >= 0)) throw ValueError("latency must be >= 0");
    if (!(p.jitter_ms >= 0)) throw ValueError("jitter must be >= 0");
    if (!(p.bandwidth_bps > 0)) throw ValueError("bandwidth must be > 0");
    if (!(p.drop >= 0 && p.drop <= 1)) throw ValueError("drop must be within [0, 1]");
}

nlohmann::json profile_to_json(const NetworkProfile& p) {
    validate_profile(p);
    return {{"latency_ms", p.latency_ms},
            {"jitter_ms", p.jitter_ms},
            {"bandwidth_bps", std::isinf(p.bandwidth_bps) ? 0.0 : p.bandwidth_bps},
            {"drop", p.drop},
            {"seed", p.seed}};
}

NetworkProfile profile_from_json(const nlohmann::json& j) {
    NetworkProfile p;
    p.latency_ms = j.value("latency_ms", p.latency_ms);
    p.jitter_ms = j.value("jitter_ms", p.jitter_ms);
    p.bandwidth_bps = j.value("bandwidth_bps", p.bandwidth_bps);
    if (p.bandwidth_bps == 0.0) p.bandwidth_bps = INFINITY;
    p.drop = j.value("drop", p.drop);
    p.seed = j.value("seed", p.seed);
    validate_profile(p);
    return p;
}

SimulatedNetwork::SimulatedNetwork(cascade::CloudTransport& inner, NetworkProfile profile)
    : inner_(inner), profile_(profile) {
    validate_profile(profile_);
}

cascade::CloudReply SimulatedNetwork::classify(const cascade::CloudRequest& request,
                                               double timeout_ms) {
    const std::uint64_t i = index_++;
    Rng rng(mix_seed(profile_.seed, i));
    const double up = profile_.latency_ms + profile_.jitter_ms * (2.0 * rng.next_double() - 1.0);
    const double down = profile_.latency_ms + profile_.jitter_ms * (2.0 * rng.next_double() - 1.0);
    const bool dropped = rng.next_double() < profile_.drop;
    if (dropped) {
        cascade::CloudReply reply;
        reply.error = "simulated network drop";
        return reply;
    }
    cascade::CloudReply reply = inner_.classify(request, timeout_ms);
    if (!reply.ok) return reply;
    double transfer = 0;
    if (!std::isinf(profile_.bandwidth_bps))
        transfer = 1000.0 *
                   (static_cast<double>(reply.bytes_sent) + static_cast<double>(reply.bytes_received)) /
                   profile_.bandwidth_bps;
    reply.network_ms += std::max(0.0, up) + std::max(0.0, down) + transfer;
    return reply;
}

namespace {

double spatial(const std::vector<int>& s) {
    return s.size() == 3 ? static_cast<double>(s[1]) * s[2] : 1.0;
}

double numel_of(const std::vector<int>& s) {
    double n = 1;
    for (int d : s) n *= d;
    return n;
}

double layer_flops(const nn::LayerSpec& spec, const std::vector<int>& in,
                   const std::vector<int>& out) {
    using nn::LayerKind;
    const auto& a = spec.args;
    switch (spec.kind) {
    case LayerKind::Conv2d:
        return (2.0 * a[0] * a[2] * a[2] + (a[5] ? 1.0 : 0.0)) * a[1] * spatial(out);
    case LayerKind::DepthwiseConv2d:
        return 2.0 * a[0] * a[1] * a[1] * spatial(out);
    case LayerKind::PointwiseConv2d:
        return 2.0 * a[0] * a[1] * spatial(out);
    case LayerKind::Dense:
        return 2.0 * a[0] * a[1] + (a[2] ? a[1] : 0.0);
    case LayerKind::ReLU:
        return numel_of(out);
    case LayerKind::BatchNorm:
        return 2.0 * numel_of(out);
    case LayerKind::MaxPool:
    case LayerKind::AvgPool:
        return static_cast<double>(a[0]) * a[0] * numel_of(out);
    case LayerKind::GlobalAvgPool:
        return numel_of(in);
    case LayerKind::ResidualBlock: {
        const double hw = spatial(in);
        const double i = a[0], o = a[1];
        double f = 18.0 * i * o * hw + 18.0 * o * o * hw; // two 3x3 convs
        f += 2.0 * (2.0 * o * hw) + 2.0 * (o * hw);       // norms and relus
        if (a[0] != a[1]) f += 2.0 * i * o * hw + 2.0 * o * hw; // projection
        f += 2.0 * o * hw;                                // add + relu
        return f;
    }
    case LayerKind::ChannelAttention: {
        const double hw = spatial(in);
        const double c = a[0], r = a[1];
        return 2.0 * c * hw + 4.0 * c * (c / r) + 2.0 * c;
    }
    case LayerKind::Softmax:
        return 3.0 * numel_of(out);
    }
    return 0;
}

} // namespace

double forward_mflops(const nn::Network& net) {
    std::vector<int> shape = net.input_shape;
    double flops = 0;
    for (const auto& spec : net.specs) {
        std::vector<int> out = nn::infer_shape(spec, shape);
        flops += layer_flops(spec, shape, out);
        shape = std::move(out);
    }
    return flops / 1e6;
}

CostModel build_cost_model(const models::ModelArtifact& light, const models::ModelArtifact& large,
                           const models::ModelArtifact& head) {
    CostModel c;
    c.edge_mflops = forward_mflops(light.net);
    c.cloud_full_mflops = 3.0 * forward_mflops(large.net); // multiscale batch
    c.cloud_feat_mflops = forward_mflops(head.net);
    return c;
}

LocalCloud::LocalCloud(models::ModelArtifact& large, models::ModelArtifact* head, CostModel cost)
    : large_(large), head_(head), cost_(cost) {}

cascade::CloudReply LocalCloud::classify(const cascade::CloudRequest& request, double) {
    cascade::CloudReply reply;
    proto::ClassifyRequestPayload p;
    p.request_id = 0; // ids do not change frame size; keeps the memo key stable
    p.kind = request.kind;
    if (request.kind == cascade::PayloadKind::Features) {
        if (head_ == nullptr) {
            reply.error = "no feature head configured";
            return reply;
        }
        p.features = proto::quantize_features(request.features);
    } else {
        p.image = request.image;
        if (request.kind == cascade::PayloadKind::Roi) p.box = request.box;
    }
    const std::vector<std::uint8_t> body = proto::encode_classify_request(p);
    reply.bytes_sent = body.size() + proto::kFrameOverhead;

    const std::uint64_t key = fnv1a64(body.data(), body.size());
    auto it = memo_.find(key);
    if (it == memo_.end()) {
        std::vector<float> probs;
        if (request.kind == cascade::PayloadKind::Features) {
            std::vector<float> feats = proto::dequantize_features(p.features);
            Tensor in({1, static_cast<int>(feats.size())});
            in.data = std::move(feats);
            Tensor pr = models::predict_probs(*head_, in);
            probs.assign(pr.data.begin(), pr.data.end());
        } else {
            const int S = large_.net.input_shape[1];
            Tensor image = request.image;
            if (request.kind == cascade::PayloadKind::Roi &&
                (image.shape[1] != S || image.shape[2] != S))
                image = img::resize_bilinear(image, S, S);
            Tensor pr = nn::softmax_rows(models::multiscale_forward(large_, image));
            probs.assign(pr.data.begin(), pr.data.end());
        }
        it = memo_.emplace(key, std::move(probs)).first;
    }
    reply.ok = true;
    reply.probs = it->second;
    reply.cloud_ms = cost_.cloud_ms(request.kind);
    const std::vector<std::uint8_t> resp =
        proto::encode_classify_response({0, reply.probs, 0});
    reply.bytes_received = resp.size() + proto::kFrameOverhead;
    return reply;
}

namespace {

struct CondSet {
    std::string name;
    std::vector<models::Sample> samples;
};

// the test split arrives with conditions already assigned round-robin
std::vector<CondSet> build_condition_sets(const std::vector<data::SampleRecord>& test) {
    std::vector<CondSet> out(data::kConditionCount);
    for (int ci = 0; ci < data::kConditionCount; ++ci)
        out[static_cast<std::size_t>(ci)].name =
            data::condition_name(static_cast<data::Condition>(ci));
    for (const auto& rec : test)
        out[static_cast<std::size_t>(rec.condition)].samples.push_back({rec.image, rec.label});
    return out;
}

int argmax_of(const std::vector<float>& v) {
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::vector<SampleOutcome> eval_cascade(const std::string& mode, const CondSet& cs,
                                        const cascade::CascadePolicy& policy,
                                        models::ModelArtifact& light,
                                        cascade::CloudTransport* transport,
                                        const CostModel& cost) {
    std::vector<SampleOutcome> out;
    out.reserve(cs.samples.size());
    for (std::size_t i = 0; i < cs.samples.size(); ++i) {
        const models::Sample& s = cs.samples[i];
        cascade::ClassificationResult r;
        try {
            r = cascade::classify_cascaded(s.image, policy, light, transport);
        } catch (const cascade::EscalationError& e) {
            r = e.partial; // transport failure is recorded, never fatal to the run
        }
        SampleOutcome o;
        o.mode = mode;
        o.condition = cs.name;
        o.index = static_cast<int>(i);
        o.label = s.label;
        o.predicted = r.label;
        o.correct = r.label == s.label;
        o.escalated = r.provenance != cascade::Provenance::Edge;
        o.provenance = cascade::provenance_name(r.provenance);
        // escalating a crop or a feature vector costs one extra edge pass
        // (saliency or feature extraction) on top of the gate forward
        o.edge_ms = cost.edge_ms();
        if (o.escalated && policy.payload != cascade::PayloadKind::FullImage)
            o.edge_ms += cost.edge_ms();
        o.network_ms = r.timing.network_ms;
        o.cloud_ms = r.timing.cloud_ms;
        o.total_ms = o.edge_ms + o.network_ms + o.cloud_ms;
        o.bytes = r.bytes_sent + r.bytes_received;
        out.push_back(std::move(o));
    }
    return out;
}

std::vector<SampleOutcome> eval_cloud_only(const CondSet& cs, cascade::CloudTransport& transport) {
    std::vector<SampleOutcome> out;
    out.reserve(cs.samples.size());
    for (std::size_t i = 0; i < cs.samples.size(); ++i) {
        const models::Sample& s = cs.samples[i];
        cascade::CloudRequest req;
        req.kind = cascade::PayloadKind::FullImage;
        req.image = s.image;
        cascade::CloudReply reply = transport.classify(req, 10000.0);
        SampleOutcome o;
        o.mode = "cloud";
        o.condition = cs.name;
        o.index = static_cast<int>(i);
        o.label = s.label;
        o.escalated = true;
        if (reply.ok) {
            o.predicted = argmax_of(reply.probs);
            o.provenance = "cloud";
            o.network_ms = reply.network_ms;
            o.cloud_ms = reply.cloud_ms;
            o.bytes = reply.bytes_sent + reply.bytes_received;
        } else {
            o.predicted = -1;
            o.provenance = "error";
        }
        o.correct = o.predicted == o.label;
        o.total_ms = o.network_ms + o.cloud_ms;
        out.push_back(std::move(o));
    }
    return out;
}

ModeRow aggregate(const std::string& mode, const std::string& condition,
                  const std::vector<const SampleOutcome*>& xs) {
    ModeRow row;
    row.mode = mode;
    row.condition = condition;
    row.samples = static_cast<int>(xs.size());
    if (xs.empty()) return row;
    std::vector<double> totals;
    totals.reserve(xs.size());
    double correct = 0, bytes = 0, escalated = 0, edge = 0, latency = 0;
    for (const SampleOutcome* o : xs) {
        correct += o->correct ? 1 : 0;
        bytes += static_cast<double>(o->bytes);
        escalated += o->escalated ? 1 : 0;
        edge += o->edge_ms;
        latency += o->total_ms;
        totals.push_back(o->total_ms);
    }
    const double n = static_cast<double>(xs.size());
    std::sort(totals.begin(), totals.end());
    row.accuracy_pct = 100.0 * correct / n;
    row.mean_latency_ms = latency / n;
    row.p95_latency_ms = totals[static_cast<std::size_t>(
        std::min<double>(std::ceil(0.95 * n), n) - 1)];
    row.mean_bytes = bytes / n;
    row.escalation_rate = escalated / n;
    row.edge_compute_ms = edge / n;
    return row;
}

void append_rows(std::vector<ModeRow>& rows, const std::string& mode,
                 const std::vector<CondSet>& conds,
                 const std::vector<std::vector<SampleOutcome>>& per_cond) {
    std::vector<const SampleOutcome*> all;
    std::vector<ModeRow> cond_rows;
    for (std::size_t k = 0; k < per_cond.size(); ++k) {
        std::vector<const SampleOutcome*> xs;
        for (const auto& o : per_cond[k]) {
            xs.push_back(&o);
            all.push_back(&o);
        }
        cond_rows.push_back(aggregate(mode, conds[k].name, xs));
    }
    rows.push_back(aggregate(mode, "overall", all));
    for (auto& r : cond_rows) rows.push_back(std::move(r));
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t recipe_hash(const BenchOptions& opt) {
    std::string s = hex64(data::manifest_hash(opt.manifest)) + "|" + std::to_string(opt.seed) +
                    "|" + std::to_string(opt.light_epochs) + "|" + std::to_string(opt.large_epochs) +
                    "|" + std::to_string(std::lround(opt.large_input_noise * 10000)) + "|" +
                    std::to_string(opt.head_epochs) + "|v1";
    return fnv1a64(s.data(), s.size());
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ValueError("cannot write " + path);
    f << text;
}

nlohmann::json row_json(const ModeRow& r) {
    return {{"mode", r.mode},
            {"condition", r.condition},
            {"samples", r.samples},
            {"accuracy_pct", r.accuracy_pct},
            {"mean_latency_ms", r.mean_latency_ms},
            {"p95_latency_ms", r.p95_latency_ms},
            {"mean_bytes", r.mean_bytes},
            {"escalation_rate", r.escalation_rate},
            {"edge_compute_ms", r.edge_compute_ms}};
}

} // namespace

std::vector<models::Sample> feature_samples(models::ModelArtifact& edge,
                                            const std::vector<models::Sample>& images) {
    std::vector<models::Sample> out;
    out.reserve(images.size());
    const int F = models::feature_length(edge);
    const std::size_t kBatch = 64;
    for (std::size_t at = 0; at < images.size(); at += kBatch) {
        const std::size_t end = std::min(images.size(), at + kBatch);
        Tensor batch({static_cast<int>(end - at), images[at].image.shape[0],
                      images[at].image.shape[1], images[at].image.shape[2]});
        for (std::size_t i = at; i < end; ++i)
            std::copy(images[i].image.data.begin(), images[i].image.data.end(),
                      batch.data.begin() +
                          static_cast<std::int64_t>(i - at) * images[at].image.numel());
        Tensor feats = models::extract_features(light, batch);
        for (std::size_t i = at; i < end; ++i) {
            std::vector<float> row(static_cast<std::size_t>(F));
            for (int f = 0; f < F; ++f) row[static_cast<std::size_t>(f)] =
                feats.at2(static_cast<int>(i - at), f);
            models::Sample s;
            s.image = Tensor({F});
            s.image.data = proto::dequantize_features(proto::quantize_features(row));
            s.label = images[i].label;
            out.push_back(std::move(s));
        }
    }
    return out;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ValueError("cannot write " + path);
    f << text;
}

nlohmann::json row_json(const ModeRow& r) {
    return {{"mode", r.mode},
            {"condition", r.condition},
            {"samples", r.samples},
            {"accuracy_pct", r.accuracy_pct},
            {"mean_latency_ms", r.mean_latency_ms},
            {"p95_latency_ms", r.p95_latency_ms},
            {"mean_bytes", r.mean_bytes},
            {"escalation_rate", r.escalation_rate},
            {"edge_compute_ms", r.edge_compute_ms}};
}

} // namespace

const ModeRow& BenchReport::row(const std::string& mode, const std::string& condition) const {
    for (const auto& r : rows)
        if (r.mode == mode && r.condition == condition) return r;
    throw ValueError("no report row for " + mode + "/" + condition);
}

nlohmann::json BenchReport::to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["tau"] = tau;
    j["payload"] = payload;
    j["profile"] = profile_to_json(profile);
    j["cost_model"] = {{"edge_mflops", cost.edge_mflops},
                       {"cloud_full_mflops", cost.cloud_full_mflops},
                       {"cloud_feat_mflops", cost.cloud_feat_mflops},
                       {"edge_mflops_per_ms", cost.edge_mflops_per_ms},
                       {"cloud_mflops_per_ms", cost.cloud_mflops_per_ms}};
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) j["rows"].push_back(row_json(r));
    j["sweep"] = nlohmann::json::array();
    for (const auto& p : sweep)
        j["sweep"].push_back({{"tau", p.tau},
                              {"accuracy_pct", p.accuracy_pct},
                              {"mean_latency_ms", p.mean_latency_ms},
                              {"escalation_rate", p.escalation_rate},
                              {"mean_bytes", p.mean_bytes}});
    j["payloads"] = nlohmann::json::array();
    for (const auto& p : payloads)
        j["payloads"].push_back({{"payload", p.payload},
                                 {"accuracy_pct", p.accuracy_pct},
                                 {"escalation_rate", p.escalation_rate},
                                 {"mean_escalated_bytes", p.mean_escalated_bytes},
                                 {"mean_latency_ms", p.mean_latency_ms}});
    return j;
}

std::string BenchReport::sweep_csv() const {
    std::string out = "tau,accuracy_pct,mean_latency_ms,escalation_rate,mean_bytes\n";
    char line[160];
    for (const auto& p : sweep) {
        std::snprintf(line, sizeof(line), "%.2f,%.6f,%.6f,%.6f,%.6f\n", static_cast<double>(p.tau),
                      p.accuracy_pct, p.mean_latency_ms, p.escalation_rate, p.mean_bytes);
        out += line;
    }
    return out;
}

std::string BenchReport::raw_jsonl() const {
    std::string out;
    for (const auto& o : raw) {
        nlohmann::json j = {{"mode", o.mode},
                            {"condition", o.condition},
                            {"index", o.index},
                            {"label", o.label},
                            {"predicted", o.predicted},
                            {"correct", o.correct},
                            {"escalated", o.escalated},
                            {"provenance", o.provenance},
                            {"edge_ms", o.edge_ms},
                            {"network_ms", o.network_ms},
                            {"cloud_ms", o.cloud_ms},
                            {"total_ms", o.total_ms},
                            {"bytes", o.bytes}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

std::string BenchReport::to_text() const {
    std::ostringstream os;
    char line[256];
    os << "MODE COMPARISON (full test grid, tau=" << tau << ", payload=" << payload << ")\n";
    std::snprintf(line, sizeof(line), "  %-8s %9s %10s %9s %11s %11s %10s\n", "mode", "acc_pct",
                  "mean_ms", "p95_ms", "bytes/img", "escalation", "edge_ms");
    os << line;
    for (const char* mode : {"edge", "cloud", "hybrid"}) {
        const ModeRow& r = row(mode, "overall");
        std::snprintf(line, sizeof(line), "  %-8s %9.2f %10.2f %9.2f %11.1f %11.3f %10.2f\n",
                      r.mode.c_str(), r.accuracy_pct, r.mean_latency_ms, r.p95_latency_ms,
                      r.mean_bytes, r.escalation_rate, r.edge_compute_ms);
        os << line;
    }
    os << "\nROBUSTNESS (accuracy % by condition)\n";
    std::snprintf(line, sizeof(line), "  %-8s %9s %10s %19s %16s\n", "mode", "normal", "low_light",
                  "complex_background", "different_angle");
    os << line;
    for (const char* mode : {"edge", "cloud", "hybrid"}) {
        std::snprintf(line, sizeof(line), "  %-8s %9.2f %10.2f %19.2f %16.2f\n", mode,
                      row(mode, "normal").accuracy_pct, row(mode, "low_light").accuracy_pct,
                      row(mode, "complex_background").accuracy_pct,
                      row(mode, "different_angle").accuracy_pct);
        os << line;
    }
    os << "\nTRANSMISSION (hybrid at tau=" << tau << ", per escalated sample)\n";
    std::snprintf(line, sizeof(line), "  %-12s %14s %9s %11s %10s\n", "payload", "wire_bytes",
                  "acc_pct", "escalation", "mean_ms");
    os << line;
    for (const auto& p : payloads) {
        std::snprintf(line, sizeof(line), "  %-12s %14.1f %9.2f %11.3f %10.2f\n",
                      p.payload.c_str(), p.mean_escalated_bytes, p.accuracy_pct, p.escalation_rate,
                      p.mean_latency_ms);
        os << line;
    }
    os << "\nTHRESHOLD SWEEP (payload=" << payload << ")\n";
    std::snprintf(line, sizeof(line), "  %-6s %9s %10s %11s %11s\n", "tau", "acc_pct", "mean_ms",
                  "escalation", "bytes/img");
    os << line;
    for (const auto& p : sweep) {
        std::snprintf(line, sizeof(line), "  %-6.2f %9.2f %10.2f %11.3f %11.1f\n",
                      static_cast<double>(p.tau), p.accuracy_pct, p.mean_latency_ms,
                      p.escalation_rate, p.mean_bytes);
        os << line;
    }
    os << "\nLatency and edge CPU-time figures derive from the deterministic\n"
          "operation-count cost model (report.json: cost_model), not wall-clock\n"
          "measurements, so reports are identical across hosts and runs.\n";
    return os.str();
}

BenchReport run_benchmark(const BenchOptions& opt, BenchArtifacts* artifacts) {
    data::validate_manifest(opt.manifest);
    validate_profile(opt.profile);
    cascade::validate_policy(opt.policy);
    if (opt.tau_grid.empty()) throw ValueError("tau grid must not be empty");

    const auto log = [&](const std::string& msg) {
        if (opt.verbose) std::cerr << "[bench] " << msg << "\n";
    };

    log("building dataset");
    data::DatasetSplits splits = data::build_dataset(opt.manifest);
    if (splits.test.empty()) throw ValueError("manifest leaves the test split empty");
    const int classes = opt.manifest.class_count;
    const int size = opt.manifest.image_size;

    std::string light_path, large_path, head_path;
    bool cache_hit = false;
    if (!opt.cache_dir.empty()) {
        std::filesystem::create_directories(opt.cache_dir);
        const std::string key = hex64(recipe_hash(opt));
        light_path = opt.cache_dir + "/light_" + key + ".cjw";
        large_path = opt.cache_dir + "/large_" + key + ".cjw";
        head_path = opt.cache_dir + "/head_" + key + ".cjw";
        cache_hit = std::filesystem::exists(light_path) && std::filesystem::exists(large_path) &&
                    std::filesystem::exists(head_path);
    }

    models::ModelArtifact light, large, head;
    if (cache_hit) {
        log("loading cached artifacts");
        light = models::load_model(light_path);
        large = models::load_model(large_path);
        head = models::load_model(head_path);
    } else {
        auto train_set = data::to_samples(
            data::materialize_training_set(splits.train, opt.manifest.master_seed));
        auto val_set = data::to_samples(splits.val);

        log("training lightweight model");
        light = models::build_lightweight(classes, size, mix_seed(opt.seed, 0x11));
        models::TrainConfig lc;
        lc.epochs = opt.light_epochs;
        lc.seed = mix_seed(opt.seed, 0x12);
        lc.verbose = opt.verbose;
        models::train(light, train_set, val_set, lc);

        log("training large model");
        large = models::build_large(classes, size, mix_seed(opt.seed, 0x21));
        models::TrainConfig gc;
        gc.epochs = opt.large_epochs;
        gc.input_noise = opt.large_input_noise;
        gc.seed = mix_seed(opt.seed, 0x22);
        gc.verbose = opt.verbose;
        models::train(large, train_set, val_set, gc);

        log("training feature head");
        auto head_train = feature_samples(light, train_set);
        auto head_val = feature_samples(light, val_set);
        head = models::build_feature_head(models::feature_length(light), classes,
                                          mix_seed(opt.seed, 0x31));
        models::TrainConfig hc;
        hc.epochs = opt.head_epochs;
        hc.seed = mix_seed(opt.seed, 0x32);
        models::train(head, head_train, head_val, hc);
        head.meta["edge_hash"] = light.meta_hash();

        if (!opt.cache_dir.empty()) {
            models::save_model(light, light_path);
            models::save_model(large, large_path);
            models::save_model(head, head_path);
        }
    }

    BenchReport report;
    report.seed = opt.seed;
    report.tau = opt.policy.tau;
    report.payload = cascade::payload_kind_name(opt.policy.payload);
    report.profile = opt.profile;
    report.cost = build_cost_model(light, large, head);

    LocalCloud local(large, &head, report.cost);
    SimulatedNetwork sim(local, opt.profile);
    std::vector<CondSet> conds = build_condition_sets(splits.test);

    log("evaluating edge-only");
    cascade::CascadePolicy edge_policy = opt.policy;
    edge_policy.tau = 0.0f; // never escalates
    std::vector<std::vector<SampleOutcome>> edge_out;
    for (const auto& cs : conds)
        edge_out.push_back(eval_cascade("edge", cs, edge_policy, light, nullptr, report.cost));

    log("evaluating cloud-only");
    std::vector<std::vector<SampleOutcome>> cloud_out;
    sim.reset_index();
    for (const auto& cs : conds) cloud_out.push_back(eval_cloud_only(cs, sim));

    log("evaluating hybrid payloads");
    std::vector<std::vector<SampleOutcome>> hybrid_out;
    for (const auto kind : {cascade::PayloadKind::FullImage, cascade::PayloadKind::Roi,
                            cascade::PayloadKind::Features}) {
        cascade::CascadePolicy p = opt.policy;
        p.payload = kind;
        sim.reset_index();
        std::vector<std::vector<SampleOutcome>> per_cond;
        for (const auto& cs : conds)
            per_cond.push_back(eval_cascade("hybrid", cs, p, light, &sim, report.cost));

        double correct = 0, latency = 0, esc = 0, esc_bytes = 0, n = 0;
        for (const auto& cond : per_cond)
            for (const auto& o : cond) {
                n += 1;
                correct += o.correct ? 1 : 0;
                latency += o.total_ms;
                if (o.escalated) {
                    esc += 1;
                    esc_bytes += static_cast<double>(o.bytes);
                }
            }
        PayloadRow pr;
        pr.payload = cascade::payload_kind_name(kind);
        pr.accuracy_pct = 100.0 * correct / n;
        pr.escalation_rate = esc / n;
        pr.mean_escalated_bytes = esc > 0 ? esc_bytes / esc : 0.0;
        pr.mean_latency_ms = latency / n;
        report.payloads.push_back(pr);

        if (kind == opt.policy.payload) hybrid_out = std::move(per_cond);
    }

    append_rows(report.rows, "edge", conds, edge_out);
    append_rows(report.rows, "cloud", conds, cloud_out);
    append_rows(report.rows, "hybrid", conds, hybrid_out);
    for (const auto* grid : {&edge_out, &cloud_out, &hybrid_out})
        for (const auto& cond : *grid)
            report.raw.insert(report.raw.end(), cond.begin(), cond.end());

    log("sweeping threshold");
    for (float tau : opt.tau_grid) {
        cascade::CascadePolicy p = opt.policy;
        p.tau = tau;
        sim.reset_index();
        std::vector<const SampleOutcome*> all;
        std::vector<std::vector<SampleOutcome>> per_cond;
        for (const auto& cs : conds)
            per_cond.push_back(eval_cascade("hybrid", cs, p, light, &sim, report.cost));
        for (const auto& cond : per_cond)
            for (const auto& o : cond) all.push_back(&o);
        ModeRow agg = aggregate("hybrid", "overall", all);
        report.sweep.push_back({tau, agg.accuracy_pct, agg.mean_latency_ms, agg.escalation_rate,
                                agg.mean_bytes});
    }

    if (!opt.out_dir.empty()) {
        std::filesystem::create_directories(opt.out_dir);
        write_text_file(opt.out_dir + "/report.json", report.to_json().dump(2) + "\n");
        write_text_file(opt.out_dir + "/report.txt", report.to_text());
        write_text_file(opt.out_dir + "/sweep.csv", report.sweep_csv());
        write_text_file(opt.out_dir + "/raw.jsonl", report.raw_jsonl());
        log("wrote " + opt.out_dir);
    }

    if (artifacts != nullptr) {
        artifacts->light = std::move(light);
        artifacts->large = std::move(large);
        artifacts->head = std::move(head);
        artifacts->splits = std::move(splits);
        artifacts->cost = report.cost;
    }
    return report;
}

} // namespace cjade::bench
