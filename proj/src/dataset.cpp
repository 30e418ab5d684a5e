#include "cjade/dataset.hpp"

#include "cjade/common.hpp"
#include "cjade/image.hpp"

#include <cmath>
#include <cstring>

namespace cjade::data {

namespace {

constexpr float kPi = 3.14159265358979323846f;

// low-resolution uniform grid upsampled to full size, values in [0,1]
Tensor value_noise(int h, int w, int grid, Rng& rng) {
    Tensor g({1, grid, grid});
    for (auto& v : g.data) v = rng.uniform(0.0f, 1.0f);
    return img::resize_bilinear(g, h, w);
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
    h -= std::floor(h);
    const float hh = h * 6.0f;
    const int sector = std::min(5, static_cast<int>(hh));
    const float f = hh - static_cast<float>(sector);
    const float p = v * (1.0f - s);
    const float q = v * (1.0f - s * f);
    const float t = v * (1.0f - s * (1.0f - f));
    switch (sector) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

void flip_horizontal(Tensor& img) {
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y) {
            float* row = img.data.data() + (static_cast<std::size_t>(ch) * h + y) * w;
            for (int x = 0; x < w / 2; ++x) std::swap(row[x], row[w - 1 - x]);
        }
}

struct HashChain {
    std::uint64_t h = 1469598103934665603ull;
    void absorb(const void* data, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
    }
};

} // namespace

const char* condition_name(Condition c) {
    switch (c) {
        case Condition::Normal: return "normal";
        case Condition::LowLight: return "low_light";
        case Condition::ComplexBackground: return "complex_background";
        case Condition::DifferentAngle: return "different_angle";
    }
    throw ValueError("unknown condition");
}

Condition condition_from_name(const std::string& name) {
    for (int i = 0; i < kConditionCount; ++i) {
        const auto c = static_cast<Condition>(i);
        if (name == condition_name(c)) return c;
    }
    throw ValueError("unknown condition name: " + name);
}

std::uint32_t style_seed_of(std::uint64_t master_seed) {
    return static_cast<std::uint32_t>(splitmix64(master_seed) >> 32);
}

std::uint64_t pack_sample_seed(std::uint32_t style_seed, std::uint32_t sample_index) {
    return (static_cast<std::uint64_t>(style_seed) << 32) | sample_index;
}

ClassStyle class_style(int class_id, std::uint32_t style_seed) {
    if (class_id < 0) throw ValueError("class id must be non-negative");
    // golden-ratio hue spacing keeps any class count distinct and well spread
    constexpr double kGolden = 0.61803398874989484820;
    const double offset =
        static_cast<double>(splitmix64(style_seed)) / 18446744073709551616.0;
    const double hue = offset + kGolden * static_cast<double>(class_id);
    ClassStyle s;
    s.base_hue = static_cast<float>(hue - std::floor(hue));
    Rng rng(mix_seed(style_seed, 0xC1A55 + static_cast<std::uint64_t>(class_id)));
    s.hue_jitter = rng.uniform(0.015f, 0.05f);
    s.vein_frequency = rng.uniform(2.0f, 6.0f);
    s.vein_contrast = rng.uniform(0.08f, 0.22f);
    s.gradient_strength = rng.uniform(0.10f, 0.30f);
    s.speckle_density = rng.uniform(0.004f, 0.02f);
    return s;
}

SampleRecord generate_sample(int class_id, std::uint64_t seed, int size) {
    const auto style_seed = static_cast<std::uint32_t>(seed >> 32);
    return generate_sample_with_style(class_style(class_id, style_seed), class_id, seed, size);
}

SampleRecord generate_sample_with_style(const ClassStyle& style, int class_id,
                                        std::uint64_t seed, int size) {
    if (size < 4) throw ValueError("sample size must be at least 4");
    Rng rng(mix_seed(seed, 0x9E11));
    // draw order is part of the format: angle, phase, turbulence, hue field, speckles
    const float theta = rng.uniform(0.0f, 2.0f * kPi);
    const float phase = rng.uniform(0.0f, 2.0f * kPi);
    const Tensor turb = value_noise(size, size, 5, rng);
    const Tensor huef = value_noise(size, size, 4, rng);

    const auto n = static_cast<std::size_t>(size) * static_cast<std::size_t>(size);
    std::vector<float> hue(n), sat(n), val(n);
    const float ct = std::cos(theta), st = std::sin(theta);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * size + x;
            const float xn = (static_cast<float>(x) + 0.5f) / static_cast<float>(size);
            const float yn = (static_cast<float>(y) + 0.5f) / static_cast<float>(size);
            const float tb = turb.data[i];
            const float vein = std::sin(2.0f * kPi * style.vein_frequency * (xn * ct + yn * st) +
                                        6.0f * (tb - 0.5f) + phase);
            const float rr = std::sqrt((xn - 0.5f) * (xn - 0.5f) + (yn - 0.5f) * (yn - 0.5f)) /
                             0.70710678f;
            hue[i] = style.base_hue + style.hue_jitter * (huef.data[i] - 0.5f) * 2.0f;
            sat[i] = 0.5f + 0.6f * style.hue_jitter * (tb - 0.5f);
            val[i] = 0.60f + style.gradient_strength * (0.7f - rr) + style.vein_contrast * vein;
        }
    for (std::size_t i = 0; i < n; ++i)
        if (rng.bernoulli(style.speckle_density))
            val[i] += rng.bernoulli(0.5) ? 0.28f : -0.28f;

    SampleRecord rec;
    rec.image = Tensor({3, size, size});
    rec.label = class_id;
    rec.condition = Condition::Normal;
    rec.seed = seed;
    float* r = rec.image.data.data();
    float* g = r + n;
    float* b = g + n;
    for (std::size_t i = 0; i < n; ++i) {
        hsv_to_rgb(hue[i], std::clamp(sat[i], 0.0f, 1.0f), std::clamp(val[i], 0.0f, 1.0f),
                   r[i], g[i], b[i]);
    }
    return rec;
}

SampleRecord perturb(const SampleRecord& rec, Condition condition, const PerturbParams& params) {
    if (rec.condition != Condition::Normal)
        throw ValueError("sample is already perturbed; conditions do not stack");
    if (rec.image.ndim() != 3) throw ShapeError("expected CHW image, got " + rec.image.shape_str());
    SampleRecord out;
    out.label = rec.label;
    out.seed = rec.seed;
    out.condition = condition;
    if (condition == Condition::Normal) {
        out.image = rec.image;
        return out;
    }
    Rng rng(mix_seed(rec.seed, 0xC0ED0 + static_cast<std::uint64_t>(condition)));
    switch (condition) {
        case Condition::LowLight: {
            out.image = rec.image;
            for (auto& v : out.image.data)
                v = std::clamp(v * params.low_light_factor + params.low_light_sigma * rng.normal(),
                               0.0f, 1.0f);
            break;
        }
        case Condition::ComplexBackground: {
            const int h = rec.image.dim(1), w = rec.image.dim(2);
            const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
            Tensor bg({3, h, w});
            for (int c = 0; c < 3; ++c) {
                const Tensor coarse = value_noise(h, w, 6, rng);
                const Tensor fine = value_noise(h, w, 12, rng);
                float* dst = bg.data.data() + static_cast<std::size_t>(c) * plane;
                for (std::size_t i = 0; i < plane; ++i)
                    dst[i] = 0.15f + 0.7f * (0.55f * coarse.data[i] + 0.45f * fine.data[i]);
            }
            const float cx = (static_cast<float>(w) - 1.0f) / 2.0f;
            const float cy = (static_cast<float>(h) - 1.0f) / 2.0f;
            const float rx = 0.38f * static_cast<float>(w);
            const float ry = 0.34f * static_cast<float>(h);
            out.image = Tensor({3, h, w});
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const float dx = (static_cast<float>(x) - cx) / rx;
                    const float dy = (static_cast<float>(y) - cy) / ry;
                    const float d = std::sqrt(dx * dx + dy * dy);
                    const float m = std::clamp((1.02f - d) / 0.12f, 0.0f, 1.0f);
                    const std::size_t i = static_cast<std::size_t>(y) * w + x;
                    for (int c = 0; c < 3; ++c)
                        out.image.data[c * plane + i] =
                            m * rec.image.data[c * plane + i] + (1.0f - m) * bg.data[c * plane + i];
                }
            break;
        }
        case Condition::DifferentAngle: {
            const float deg = rng.uniform(-params.max_rotation_deg, params.max_rotation_deg);
            out.image = img::rotate_bilinear(rec.image, deg);
            break;
        }
        default:
            throw ValueError("unknown condition");
    }
    return out;
}

void validate_manifest(const DatasetManifest& m) {
    if (m.class_count < 2 || m.class_count > 4096)
        throw ValueError("class count must be in [2, 4096]");
    if (m.samples_per_class < 1 || m.samples_per_class > 1000000)
        throw ValueError("samples per class must be in [1, 1000000]");
    if (m.image_size < 8 || m.image_size > 512)
        throw ValueError("image size must be in [8, 512]");
    if (m.generator_version != 1)
        throw ValueError("unsupported generator version " + std::to_string(m.generator_version));
    for (double f : {m.train_frac, m.val_frac, m.test_frac})
        if (!(f >= 0.0 && f <= 1.0)) throw ValueError("split fractions must be within [0, 1]");
    const double sum = m.train_frac + m.val_frac + m.test_frac;
    if (std::abs(sum - 1.0) > 1e-9)
        throw ValueError("split fractions must sum to 1, got " + std::to_string(sum));
}

namespace {

nlohmann::json manifest_params_json(const DatasetManifest& m) {
    return nlohmann::json{
        {"class_count", m.class_count},
        {"samples_per_class", m.samples_per_class},
        {"image_size", m.image_size},
        {"train_frac", m.train_frac},
        {"val_frac", m.val_frac},
        {"test_frac", m.test_frac},
        {"master_seed", m.master_seed},
        {"generator_version", m.generator_version},
    };
}

} // namespace

nlohmann::json manifest_to_json(const DatasetManifest& m) {
    auto j = manifest_params_json(m);
    j["content_hash"] = manifest_hash(m);
    return j;
}

std::uint64_t manifest_hash(const DatasetManifest& m) {
    const std::string text = manifest_params_json(m).dump();
    return fnv1a64(text.data(), text.size());
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    m.class_count = j.at("class_count").get<int>();
    m.samples_per_class = j.at("samples_per_class").get<int>();
    m.image_size = j.at("image_size").get<int>();
    m.train_frac = j.at("train_frac").get<double>();
    m.val_frac = j.at("val_frac").get<double>();
    m.test_frac = j.at("test_frac").get<double>();
    m.master_seed = j.at("master_seed").get<std::uint64_t>();
    m.generator_version = j.at("generator_version").get<int>();
    validate_manifest(m);
    if (j.contains("content_hash") && j.at("content_hash").get<std::uint64_t>() != manifest_hash(m))
        throw ValueError("manifest content hash does not match its parameters");
    return m;
}

DatasetSplits build_dataset(const DatasetManifest& m) {
    validate_manifest(m);
    const std::uint32_t ss = style_seed_of(m.master_seed);
    const int spc = m.samples_per_class;
    const int n_train = static_cast<int>(std::llround(spc * m.train_frac));
    const int n_val = static_cast<int>(std::llround(spc * m.val_frac));
    if (n_train + n_val > spc)
        throw ValueError("split fractions leave no room for the test split");

    std::vector<SampleRecord> all(static_cast<std::size_t>(m.class_count) * spc);
    parallel_for_blocks(static_cast<std::int64_t>(all.size()), [&](std::int64_t begin, std::int64_t end) {
        for (std::int64_t i = begin; i < end; ++i) {
            const int c = static_cast<int>(i / spc);
            all[static_cast<std::size_t>(i)] =
                generate_sample(c, pack_sample_seed(ss, static_cast<std::uint32_t>(i)), m.image_size);
        }
    });

    DatasetSplits out;
    for (int c = 0; c < m.class_count; ++c)
        for (int i = 0; i < spc; ++i) {
            auto& rec = all[static_cast<std::size_t>(c) * spc + i];
            if (i < n_train) out.train.push_back(std::move(rec));
            else if (i < n_train + n_val) out.val.push_back(std::move(rec));
            else out.test.push_back(std::move(rec));
        }

    // val and test cycle through all four conditions in class-major order
    for (auto* split : {&out.val, &out.test}) {
        auto& recs = *split;
        parallel_for_blocks(static_cast<std::int64_t>(recs.size()),
                            [&](std::int64_t begin, std::int64_t end) {
                                for (std::int64_t i = begin; i < end; ++i) {
                                    const auto cond = static_cast<Condition>(i % kConditionCount);
                                    recs[static_cast<std::size_t>(i)] =
                                        perturb(recs[static_cast<std::size_t>(i)], cond);
                                }
                            });
    }
    return out;
}

std::vector<SampleRecord> materialize_training_set(const std::vector<SampleRecord>& train,
                                                   std::uint64_t master_seed) {
    std::vector<SampleRecord> out = train;
    out.resize(train.size() * 2);
    parallel_for_blocks(static_cast<std::int64_t>(train.size()),
                        [&](std::int64_t begin, std::int64_t end) {
                            for (std::int64_t i = begin; i < end; ++i) {
                                const auto& rec = train[static_cast<std::size_t>(i)];
                                Rng rng(mix_seed(mix_seed(rec.seed, master_seed), 0xA46));
                                SampleRecord copy = rec;
                                if (rng.bernoulli(0.5)) flip_horizontal(copy.image);
                                const float scale = rng.uniform(0.9f, 1.1f);
                                for (auto& v : copy.image.data)
                                    v = std::clamp(v * scale, 0.0f, 1.0f);
                                out[train.size() + static_cast<std::size_t>(i)] = std::move(copy);
                            }
                        });
    return out;
}

std::vector<models::Sample> to_samples(const std::vector<SampleRecord>& records) {
    std::vector<models::Sample> out;
    out.reserve(records.size());
    for (const auto& rec : records) out.push_back({rec.image, rec.label});
    return out;
}

std::uint64_t split_content_hash(const std::vector<SampleRecord>& records) {
    HashChain chain;
    for (const auto& rec : records) {
        const std::int32_t label = rec.label;
        const std::int32_t cond = static_cast<std::int32_t>(rec.condition);
        chain.absorb(&label, sizeof(label));
        chain.absorb(&cond, sizeof(cond));
        chain.absorb(&rec.seed, sizeof(rec.seed));
        chain.absorb(rec.image.data.data(), rec.image.data.size() * sizeof(float));
    }
    return chain.h;
}

} // namespace cjade::data
