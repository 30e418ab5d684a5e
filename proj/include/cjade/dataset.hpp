#pragma once

#include "cjade/models.hpp"
#include "cjade/tensor.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace cjade::data {

enum class Condition : int {
    Normal = 0,
    LowLight = 1,
    ComplexBackground = 2,
    DifferentAngle = 3,
};
inline constexpr int kConditionCount = 4;

const char* condition_name(Condition c);
Condition condition_from_name(const std::string& name);

// seed packs the 32-bit style seed (upper half) and the global sample index
// (lower half), so a record regenerates from (label, seed, condition) alone
struct SampleRecord {
    Tensor image;
    int label = 0;
    Condition condition = Condition::Normal;
    std::uint64_t seed = 0;
};

struct ClassStyle {
    float base_hue = 0.0f;
    float hue_jitter = 0.0f;
    float vein_frequency = 0.0f;
    float vein_contrast = 0.0f;
    float gradient_strength = 0.0f;
    float speckle_density = 0.0f;
};

std::uint32_t style_seed_of(std::uint64_t master_seed);
std::uint64_t pack_sample_seed(std::uint32_t style_seed, std::uint32_t sample_index);
ClassStyle class_style(int class_id, std::uint32_t style_seed);

SampleRecord generate_sample(int class_id, std::uint64_t seed, int size);
SampleRecord generate_sample_with_style(const ClassStyle& style, int class_id,
                                        std::uint64_t seed, int size);

struct PerturbParams {
    float low_light_factor = 0.4f;
    float low_light_sigma = 0.02f;
    float max_rotation_deg = 30.0f;
};

SampleRecord perturb(const SampleRecord& rec, Condition condition,
                     const PerturbParams& params = {});

struct DatasetManifest {
    int class_count = 10;
    int samples_per_class = 200;
    int image_size = 32;
    double train_frac = 0.7;
    double val_frac = 0.15;
    double test_frac = 0.15;
    std::uint64_t master_seed = 1;
    int generator_version = 1;
};

void validate_manifest(const DatasetManifest& m);
std::uint64_t manifest_hash(const DatasetManifest& m);
nlohmann::json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);

struct DatasetSplits {
    std::vector<SampleRecord> train;
    std::vector<SampleRecord> val;
    std::vector<SampleRecord> test;
};

DatasetSplits build_dataset(const DatasetManifest& m);

// appends one flipped/brightness-shifted copy per record; output order is
// all originals followed by all copies
std::vector<SampleRecord> materialize_training_set(const std::vector<SampleRecord>& train,
                                                   std::uint64_t master_seed);

std::vector<models::Sample> to_samples(const std::vector<SampleRecord>& records);
std::uint64_t split_content_hash(const std::vector<SampleRecord>& records);

} // namespace cjade::data
