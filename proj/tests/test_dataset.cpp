#include "doctest.h"

#include "cjade/dataset.hpp"

#include <algorithm>
#include <set>

using namespace cjade;
using namespace cjade::data;

namespace {

DatasetManifest small_manifest() {
    DatasetManifest m;
    m.class_count = 4;
    m.samples_per_class = 20;
    m.image_size = 16;
    m.master_seed = 42;
    return m;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && a.data == b.data;
}

SampleRecord constant_record(float value, int size = 16) {
    SampleRecord rec;
    rec.image = Tensor({3, size, size});
    rec.image.fill(value);
    rec.label = 0;
    rec.seed = 99;
    return rec;
}

} // namespace

TEST_CASE("condition names round-trip") {
    for (int i = 0; i < kConditionCount; ++i) {
        const auto c = static_cast<Condition>(i);
        CHECK(condition_from_name(condition_name(c)) == c);
    }
    CHECK_THROWS_AS(condition_from_name("foggy"), ValueError);
}

TEST_CASE("class styles are pairwise distinct") {
    const auto ss = style_seed_of(7);
    std::vector<ClassStyle> styles;
    for (int c = 0; c < 10; ++c) styles.push_back(class_style(c, ss));
    for (std::size_t a = 0; a < styles.size(); ++a)
        for (std::size_t b = a + 1; b < styles.size(); ++b) {
            CHECK(styles[a].base_hue != styles[b].base_hue);
            CHECK(styles[a].vein_frequency != styles[b].vein_frequency);
        }
}

TEST_CASE("same class and seed regenerate bitwise-identical images") {
    const auto seed = pack_sample_seed(style_seed_of(3), 17);
    const auto a = generate_sample(2, seed, 32);
    const auto b = generate_sample(2, seed, 32);
    CHECK(bitwise_equal(a.image, b.image));
    CHECK(a.label == 2);
    CHECK(a.condition == Condition::Normal);
    CHECK(a.seed == seed);
}

TEST_CASE("zeroed texture parameters produce a constant image") {
    ClassStyle flat;
    flat.base_hue = 0.31f;
    const auto rec = generate_sample_with_style(flat, 0, 5, 16);
    const std::size_t plane = 16 * 16;
    for (int c = 0; c < 3; ++c) {
        const float first = rec.image.data[c * plane];
        for (std::size_t i = 0; i < plane; ++i) CHECK(rec.image.data[c * plane + i] == first);
    }
}

TEST_CASE("generated and perturbed pixels stay within the unit interval") {
    const auto ss = style_seed_of(11);
    for (int c = 0; c < 4; ++c) {
        const auto rec = generate_sample(c, pack_sample_seed(ss, static_cast<std::uint32_t>(c * 7)), 24);
        for (int k = 0; k < kConditionCount; ++k) {
            const auto p = perturb(rec, static_cast<Condition>(k));
            for (float v : p.image.data) {
                CHECK(v >= 0.0f);
                CHECK(v <= 1.0f);
            }
        }
    }
}

TEST_CASE("normal condition is a bitwise identity") {
    const auto rec = generate_sample(1, pack_sample_seed(style_seed_of(5), 0), 16);
    const auto same = perturb(rec, Condition::Normal);
    CHECK(bitwise_equal(rec.image, same.image));
    CHECK(same.condition == Condition::Normal);
}

TEST_CASE("low light with zero noise is pure brightness scaling") {
    const auto rec = constant_record(1.0f);
    PerturbParams p;
    p.low_light_sigma = 0.0f;
    const auto dim = perturb(rec, Condition::LowLight, p);
    for (float v : dim.image.data) CHECK(v == 0.4f);
}

TEST_CASE("zero-degree rotation bound reproduces the image") {
    const auto rec = generate_sample(0, pack_sample_seed(style_seed_of(9), 3), 32);
    PerturbParams p;
    p.max_rotation_deg = 0.0f;
    const auto rot = perturb(rec, Condition::DifferentAngle, p);
    for (std::size_t i = 0; i < rec.image.data.size(); ++i)
        CHECK(rot.image.data[i] == doctest::Approx(rec.image.data[i]).epsilon(1e-6));
}

TEST_CASE("background compositing keeps the center and replaces the corners") {
    const auto rec = constant_record(0.0f, 32);
    const auto comp = perturb(rec, Condition::ComplexBackground);
    const std::size_t plane = 32 * 32;
    for (int c = 0; c < 3; ++c) {
        CHECK(comp.image.data[c * plane + 15 * 32 + 15] == 0.0f);
        CHECK(comp.image.data[c * plane + 0] > 0.0f);
        CHECK(comp.image.data[c * plane + plane - 1] > 0.0f);
    }
}

TEST_CASE("conditions do not stack") {
    const auto rec = generate_sample(0, pack_sample_seed(style_seed_of(1), 0), 16);
    const auto dim = perturb(rec, Condition::LowLight);
    CHECK_THROWS_AS(perturb(dim, Condition::DifferentAngle), ValueError);
    CHECK_THROWS_AS(perturb(dim, Condition::Normal), ValueError);
}

TEST_CASE("splits are sized, stratified, and condition-balanced") {
    const auto m = small_manifest();
    const auto splits = build_dataset(m);
    CHECK(splits.train.size() == 56);
    CHECK(splits.val.size() == 12);
    CHECK(splits.test.size() == 12);

    for (const auto* split : {&splits.train, &splits.val, &splits.test}) {
        std::vector<int> per_class(4, 0);
        for (const auto& rec : *split) per_class[static_cast<std::size_t>(rec.label)]++;
        for (int c = 1; c < 4; ++c) CHECK(per_class[static_cast<std::size_t>(c)] == per_class[0]);
    }
    for (const auto& rec : splits.train) CHECK(rec.condition == Condition::Normal);
    for (const auto* split : {&splits.val, &splits.test}) {
        std::vector<int> per_cond(kConditionCount, 0);
        for (const auto& rec : *split) per_cond[static_cast<std::size_t>(rec.condition)]++;
        const auto [lo, hi] = std::minmax_element(per_cond.begin(), per_cond.end());
        CHECK(*hi - *lo <= 1);
    }
}

TEST_CASE("no sample appears in two splits") {
    const auto splits = build_dataset(small_manifest());
    std::set<std::uint64_t> seen;
    std::size_t total = 0;
    for (const auto* split : {&splits.train, &splits.val, &splits.test})
        for (const auto& rec : *split) {
            seen.insert(rec.seed);
            ++total;
        }
    CHECK(seen.size() == total);
}

TEST_CASE("dataset is a pure function of the manifest, at any worker count") {
    const auto m = small_manifest();
    set_worker_count(1);
    const auto a = build_dataset(m);
    set_worker_count(3);
    const auto b = build_dataset(m);
    set_worker_count(1);
    CHECK(split_content_hash(a.train) == split_content_hash(b.train));
    CHECK(split_content_hash(a.val) == split_content_hash(b.val));
    CHECK(split_content_hash(a.test) == split_content_hash(b.test));

    DatasetManifest other = m;
    other.master_seed = 43;
    const auto c = build_dataset(other);
    CHECK(split_content_hash(a.train) != split_content_hash(c.train));
}

TEST_CASE("a val record regenerates from its label, seed, and condition") {
    const auto m = small_manifest();
    const auto splits = build_dataset(m);
    const auto& rec = splits.val[7];
    const auto regen =
        perturb(generate_sample(rec.label, rec.seed, m.image_size), rec.condition);
    CHECK(bitwise_equal(rec.image, regen.image));
}

TEST_CASE("training materialization appends one augmented copy per record") {
    const auto splits = build_dataset(small_manifest());
    const auto a = materialize_training_set(splits.train, 42);
    const auto b = materialize_training_set(splits.train, 42);
    REQUIRE(a.size() == splits.train.size() * 2);
    CHECK(split_content_hash(a) == split_content_hash(b));
    bool any_differs = false;
    for (std::size_t i = 0; i < splits.train.size(); ++i) {
        CHECK(bitwise_equal(a[i].image, splits.train[i].image));
        const auto& copy = a[splits.train.size() + i];
        CHECK(copy.label == splits.train[i].label);
        if (!bitwise_equal(copy.image, splits.train[i].image)) any_differs = true;
        for (float v : copy.image.data) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
    CHECK(any_differs);
}

TEST_CASE("manifest validation rejects broken parameter sets") {
    DatasetManifest m = small_manifest();
    m.val_frac = 0.05;
    CHECK_THROWS_AS(validate_manifest(m), ValueError);
    m = small_manifest();
    m.class_count = 1;
    CHECK_THROWS_AS(validate_manifest(m), ValueError);
    m = small_manifest();
    m.generator_version = 2;
    CHECK_THROWS_AS(validate_manifest(m), ValueError);
    m = small_manifest();
    m.train_frac = -0.5;
    m.val_frac = 1.0;
    m.test_frac = 0.5;
    CHECK_THROWS_AS(validate_manifest(m), ValueError);
}

TEST_CASE("manifest json round-trips and detects parameter tampering") {
    const auto m = small_manifest();
    auto j = manifest_to_json(m);
    const auto back = manifest_from_json(j);
    CHECK(back.class_count == m.class_count);
    CHECK(back.samples_per_class == m.samples_per_class);
    CHECK(back.image_size == m.image_size);
    CHECK(back.master_seed == m.master_seed);
    CHECK(manifest_hash(back) == manifest_hash(m));

    j["samples_per_class"] = 21;
    CHECK_THROWS_AS(manifest_from_json(j), ValueError);
}

TEST_CASE("class mean colors separate under a nearest-centroid probe") {
    const auto ss = style_seed_of(1);
    const int classes = 10, per_class = 8;
    std::vector<std::array<float, 3>> means;
    std::vector<int> labels;
    for (int c = 0; c < classes; ++c)
        for (int i = 0; i < per_class; ++i) {
            const auto rec = generate_sample(
                c, pack_sample_seed(ss, static_cast<std::uint32_t>(c * per_class + i)), 32);
            const std::size_t plane = 32 * 32;
            std::array<float, 3> mean{};
            for (int ch = 0; ch < 3; ++ch) {
                double acc = 0.0;
                for (std::size_t k = 0; k < plane; ++k) acc += rec.image.data[ch * plane + k];
                mean[static_cast<std::size_t>(ch)] = static_cast<float>(acc / plane);
            }
            means.push_back(mean);
            labels.push_back(c);
        }
    std::vector<std::array<float, 3>> centroids(classes, {0, 0, 0});
    for (std::size_t i = 0; i < means.size(); i += 2)
        for (int ch = 0; ch < 3; ++ch)
            centroids[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(ch)] +=
                means[i][static_cast<std::size_t>(ch)] / (per_class / 2.0f);
    int hits = 0, tries = 0;
    for (std::size_t i = 1; i < means.size(); i += 2) {
        int best = -1;
        float best_d = 1e30f;
        for (int c = 0; c < classes; ++c) {
            float d = 0;
            for (int ch = 0; ch < 3; ++ch) {
                const float diff = means[i][static_cast<std::size_t>(ch)] -
                                   centroids[static_cast<std::size_t>(c)][static_cast<std::size_t>(ch)];
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        hits += best == labels[i] ? 1 : 0;
        ++tries;
    }
    CHECK(static_cast<float>(hits) / static_cast<float>(tries) >= 0.9f);
}
