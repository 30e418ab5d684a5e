#pragma once

// Helpers shared by the command-line tools: address parsing, PPM image I/O,
// dataset sample references, and policy flag decoding.

#include "cjade/cascade.hpp"
#include "cjade/dataset.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

namespace cjade::tool {

struct HostPort {
    std::string host = "127.0.0.1";
    int port = 0;
};

inline HostPort parse_host_port(const std::string& s) {
    HostPort hp;
    const auto colon = s.rfind(':');
    if (colon == std::string::npos || colon + 1 == s.size())
        throw ValueError("expected HOST:PORT, got '" + s + "'");
    if (colon > 0) hp.host = s.substr(0, colon);
    hp.port = std::stoi(s.substr(colon + 1));
    if (hp.port < 0 || hp.port > 65535) throw ValueError("port out of range in '" + s + "'");
    return hp;
}

// binary PPM (P6), 8 bits per channel; the inspection dump format
inline void write_ppm(const std::string& path, const Tensor& chw) {
    if (chw.ndim() != 3 || chw.shape[0] != 3)
        throw ValueError("ppm export expects a 3xHxW tensor, got " + chw.shape_str());
    const int H = chw.shape[1], W = chw.shape[2];
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ValueError("cannot write " + path);
    f << "P6\n" << W << " " << H << "\n255\n";
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                const float v = chw.data[(static_cast<std::size_t>(c) * H + y) * W + x];
                const int q = static_cast<int>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
                f.put(static_cast<char>(q));
            }
    if (!f) throw ValueError("short write to " + path);
}

inline Tensor read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValueError("cannot read " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6") throw ValueError(path + " is not a binary PPM (P6) image");
    auto next_int = [&] {
        int v;
        // skip whitespace and '#' comment lines between header fields
        while (f >> std::ws && f.peek() == '#') f.ignore(1 << 16, '\n');
        if (!(f >> v)) throw ValueError(path + ": truncated PPM header");
        return v;
    };
    const int W = next_int(), H = next_int(), maxv = next_int();
    if (W < 1 || H < 1 || maxv != 255) throw ValueError(path + ": unsupported PPM header");
    f.ignore(1); // single whitespace byte after maxval
    Tensor chw({3, H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                const int b = f.get();
                if (b == EOF) throw ValueError(path + ": truncated PPM pixel data");
                chw.data[(static_cast<std::size_t>(c) * H + y) * W + x] =
                    static_cast<float>(b) / 255.0f;
            }
    return chw;
}

// "sample:class=C,index=I[,seed=S][,size=N]" regenerates a dataset image
// bit-exactly from the generator; anything else is treated as a PPM path
struct SampleRef {
    int class_id = 0;
    int index = 0;
    std::uint64_t seed = 1;
    int size = 32;
};

inline bool is_sample_ref(const std::string& s) { return s.rfind("sample:", 0) == 0; }

inline SampleRef parse_sample_ref(const std::string& s) {
    SampleRef ref;
    bool have_class = false, have_index = false;
    std::stringstream body(s.substr(7));
    std::string kv;
    while (std::getline(body, kv, ',')) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ValueError("bad sample ref field '" + kv + "'");
        const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
        if (key == "class") {
            ref.class_id = std::stoi(val);
            have_class = true;
        } else if (key == "index") {
            ref.index = std::stoi(val);
            have_index = true;
        } else if (key == "seed") {
            ref.seed = std::stoull(val);
        } else if (key == "size") {
            ref.size = std::stoi(val);
        } else {
            throw ValueError("unknown sample ref key '" + key + "'");
        }
    }
    if (!have_class || !have_index)
        throw ValueError("sample ref needs at least class= and index=");
    if (ref.class_id < 0 || ref.index < 0) throw ValueError("sample ref fields must be >= 0");
    return ref;
}

inline Tensor load_input(const std::string& spec) {
    if (!is_sample_ref(spec)) return read_ppm(spec);
    const SampleRef ref = parse_sample_ref(spec);
    const std::uint32_t ss = data::style_seed_of(ref.seed);
    const auto rec = data::generate_sample(
        ref.class_id, data::pack_sample_seed(ss, static_cast<std::uint32_t>(ref.index)), ref.size);
    return rec.image;
}

inline cascade::PayloadKind payload_from_flag(const std::string& s) {
    if (s == "image") return cascade::PayloadKind::FullImage; // alias for full_image
    return cascade::payload_kind_from_name(s);
}

// "cloud-wins" or "weighted:ALPHA"
inline void apply_fusion_flag(cascade::CascadePolicy& p, const std::string& s) {
    if (s == "cloud-wins") {
        p.fusion = cascade::FusionRule::CloudWins;
        return;
    }
    if (s.rfind("weighted:", 0) == 0) {
        p.fusion = cascade::FusionRule::WeightedAverage;
        p.alpha = std::stof(s.substr(9));
        return;
    }
    throw ValueError("fusion must be cloud-wins or weighted:ALPHA, got '" + s + "'");
}

inline void apply_fallback_flag(cascade::CascadePolicy& p, const std::string& s) {
    if (s == "edge") p.fallback = cascade::FallbackRule::EdgeResultFlagged;
    else if (s == "error") p.fallback = cascade::FallbackRule::Error;
    else throw ValueError("fallback must be edge or error, got '" + s + "'");
}

inline nlohmann::json result_json(const cascade::ClassificationResult& r, bool with_timing) {
    nlohmann::json j;
    j["label"] = r.label;
    j["confidence"] = r.confidence;
    j["probs"] = r.probs;
    j["provenance"] = cascade::provenance_name(r.provenance);
    j["escalated"] = r.provenance != cascade::Provenance::Edge;
    j["bytes"] = {{"sent", r.bytes_sent}, {"received", r.bytes_received}};
    if (with_timing)
        j["timing_ms"] = {{"edge", r.timing.edge_ms},
                          {"network", r.timing.network_ms},
                          {"cloud", r.timing.cloud_ms},
                          {"total", r.timing.total_ms}};
    return j;
}

} // namespace cjade::tool
