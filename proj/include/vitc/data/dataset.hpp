#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vitc/numerics/tensor.hpp"

namespace vitc::data {

enum class Split : uint8_t { train = 0, val = 1, test = 2 };

const char* split_name(Split s);

// Images in [0,1], laid out [n, 3, img, img], with one label and split tag per
// sample. `mean`/`stdev` are per-channel statistics of the train split.
struct Dataset {
    int img = 0;
    int classes = 0;
    nn::Tensor images;
    std::vector<int32_t> labels;
    std::vector<Split> splits;
    std::array<float, 3> mean{0.0f, 0.0f, 0.0f};
    std::array<float, 3> stdev{1.0f, 1.0f, 1.0f};

    int64_t size() const { return static_cast<int64_t>(labels.size()); }
    std::vector<int64_t> indices(Split s) const;
    // Recomputes mean/stdev from the train split (all samples when it is empty).
    void compute_stats();
    // Throws IngestionError on inconsistent shapes, labels or pixel range.
    void validate() const;
    bool operator==(const Dataset&) const = default;
};

struct SynthOptions {
    double val_fraction = 0.1;
    double test_fraction = 0.1;
    double noise = 0.25;          // std of additive pixel noise
    double phase_jitter = 0.8;    // radians, uniform +-
    double angle_jitter = 0.12;   // radians, uniform +-
};

// Class-conditional oriented stripes: class k has its own orientation, spatial
// frequency, phase and colour mix; samples add jitter and Gaussian noise.
// Deterministic in `seed`. Throws ConfigError when classes < 2.
Dataset synth_generate(uint64_t seed, int64_t n, int img, int classes, const SynthOptions& options = {});

// Manifest: text header, then little-endian f32 images, i32 labels and u8
// split tags, guarded by an FNV-1a checksum of the payload.
std::string serialize_dataset(const Dataset& ds);
Dataset deserialize_dataset(const std::string& bytes);
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

struct Batch {
    nn::Tensor images;  // [b, 3, img, img], normalized with the dataset stats
    std::vector<int32_t> labels;
};

// Gathers samples by index. `flip` mirrors each image horizontally.
Batch make_batch(const Dataset& ds, const std::vector<int64_t>& index, bool normalize = true, bool flip = false);

// Splits `pool` into batches of at most `batch_size`; when `shuffle` is set the
// order is a permutation drawn from (seed, epoch). The last short batch is kept
// unless `drop_last`.
std::vector<std::vector<int64_t>> epoch_batches(const std::vector<int64_t>& pool, int batch_size, bool shuffle,
                                                uint64_t seed, int epoch, bool drop_last = false);

}  // namespace vitc::data
