#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "support/data_oracle.hpp"
#include "vitc/data/dataset.hpp"
#include "vitc/errors.hpp"
#include "vitc/model/vit.hpp"
#include "vitc/train/trainer.hpp"

using namespace vitc;
using namespace vitc::data;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("vitc_data_test_" + name);
}

void expect_ingestion_error(const std::string& bytes, const std::string& needle) {
    try {
        deserialize_dataset(bytes);
        FAIL() << "expected IngestionError containing '" << needle << "'";
    } catch (const IngestionError& e) {
        EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
}

}  // namespace

TEST(Synth, SameSeedGivesIdenticalDatasets) {
    const Dataset a = synth_generate(7, 120, 16, 4);
    const Dataset b = synth_generate(7, 120, 16, 4);
    EXPECT_TRUE(a == b);
    const Dataset c = synth_generate(8, 120, 16, 4);
    EXPECT_FALSE(a == c);
}

TEST(Synth, PixelsInRangeAndSplitsPartitionSamples) {
    const Dataset ds = synth_generate(3, 200, 16, 5);
    EXPECT_NO_THROW(ds.validate());
    for (int64_t i = 0; i < ds.images.numel(); ++i) {
        ASSERT_GE(ds.images[i], 0.0f);
        ASSERT_LE(ds.images[i], 1.0f);
    }
    std::set<int64_t> seen;
    for (Split s : {Split::train, Split::val, Split::test})
        for (int64_t i : ds.indices(s)) EXPECT_TRUE(seen.insert(i).second) << "sample " << i << " in two splits";
    EXPECT_EQ(int64_t(seen.size()), ds.size());
    EXPECT_EQ(ds.indices(Split::val).size(), 20u);
    EXPECT_EQ(ds.indices(Split::test).size(), 20u);
    for (int32_t y : ds.labels) EXPECT_LT(y, ds.classes);
}

TEST(Synth, FewerThanTwoClassesIsRejected) { EXPECT_THROW(synth_generate(1, 10, 16, 1), ConfigError); }

TEST(Synth, NearestCentroidBeatsSixtyPercent) {
    const Dataset ds = synth_generate(11, 2000, 32, 10);
    const double acc = oracle::centroid_accuracy(ds, ds.labels);
    EXPECT_GE(acc, 0.60) << "centroid accuracy " << acc;
}

TEST(Synth, ShuffledLabelsDropCentroidToChance) {
    const Dataset ds = synth_generate(11, 2000, 32, 10);
    std::vector<int32_t> shuffled = ds.labels;
    std::mt19937_64 rng(5);
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const double acc = oracle::centroid_accuracy(ds, shuffled);
    EXPECT_LT(acc, 0.2) << "centroid accuracy on shuffled labels " << acc;
}

// Control run: a small ViT trained on labels shuffled across samples cannot
// beat chance by much, while the same budget on true labels learns the task.
TEST(Synth, ShuffledLabelsDropViTAccuracyToChance) {
    ViTConfig cfg = ViTConfig::desk();
    cfg.depth = 2;
    Dataset ds = synth_generate(21, 1200, 32, 10);
    train::Schedule s = train::Schedule::desk_pretrain();
    s.epochs = 4;
    s.seed = 2;

    auto model = ViTModel::create(cfg, 4);
    train::pretrain(model, ds, s);
    const double real = train::evaluate(model, ds, ds.indices(Split::test));

    Dataset permuted = ds;
    std::mt19937_64 rng(9);
    std::shuffle(permuted.labels.begin(), permuted.labels.end(), rng);
    auto control = ViTModel::create(cfg, 4);
    train::pretrain(control, permuted, s);
    const double chance = train::evaluate(control, permuted, permuted.indices(Split::test));

    EXPECT_GE(real, 0.6) << "true-label accuracy " << real;
    EXPECT_LE(chance, 0.25) << "shuffled-label accuracy " << chance;
}

TEST(Manifest, RoundTripIsBitIdentical) {
    Dataset ds = synth_generate(5, 64, 16, 3);
    const auto path = temp_file("roundtrip.bin");
    save_dataset(ds, path);
    const Dataset back = load_dataset(path);
    EXPECT_TRUE(back == ds);
    EXPECT_EQ(serialize_dataset(back), serialize_dataset(ds));
    std::filesystem::remove(path);
}

TEST(Manifest, TruncatedPayloadNamesByteCounts) {
    const Dataset ds = synth_generate(5, 8, 8, 3);
    const std::string bytes = serialize_dataset(ds);
    const uint64_t payload = 8 * 3 * 8 * 8 * 4 + 8 * 4 + 8;
    expect_ingestion_error(bytes.substr(0, bytes.size() - 100),
                           "payload is " + std::to_string(payload - 100) + " bytes, expected " + std::to_string(payload));
}

TEST(Manifest, CorruptedPayloadFailsChecksum) {
    std::string bytes = serialize_dataset(synth_generate(5, 8, 8, 3));
    bytes[bytes.size() - 20] ^= 0x40;
    expect_ingestion_error(bytes, "checksum mismatch");
}

TEST(Manifest, HeaderErrors) {
    const std::string bytes = serialize_dataset(synth_generate(5, 4, 8, 2));
    expect_ingestion_error("NOT-A-DATASET\n", "bad magic");
    std::string unknown = bytes;
    unknown.insert(unknown.find("\nn ") + 1, "colour 3\n");
    expect_ingestion_error(unknown, "unknown header field 'colour'");
    std::string shape = bytes;
    shape.replace(shape.find("\nimg 8\n"), 7, "\nimg 9\n");
    expect_ingestion_error(shape, "layout needs");
}

TEST(Manifest, MissingFileIsIngestionError) {
    EXPECT_THROW(load_dataset(temp_file("does_not_exist.bin")), IngestionError);
}

TEST(Manifest, EmptyDatasetYieldsNoBatches) {
    Dataset ds = synth_generate(1, 0, 16, 2);
    EXPECT_EQ(ds.size(), 0);
    const Dataset back = deserialize_dataset(serialize_dataset(ds));
    EXPECT_EQ(back.size(), 0);
    EXPECT_TRUE(epoch_batches(back.indices(Split::train), 8, true, 1, 0).empty());
}

TEST(Batches, ShuffleIsAPermutationDeterminedBySeedAndEpoch) {
    std::vector<int64_t> pool(37);
    for (size_t i = 0; i < pool.size(); ++i) pool[i] = int64_t(i) * 2;
    const auto a = epoch_batches(pool, 8, true, 3, 1);
    EXPECT_EQ(a, epoch_batches(pool, 8, true, 3, 1));
    EXPECT_NE(a, epoch_batches(pool, 8, true, 3, 2));
    ASSERT_EQ(a.size(), 5u);
    EXPECT_EQ(a.back().size(), 5u);
    std::vector<int64_t> flat;
    for (const auto& b : a) flat.insert(flat.end(), b.begin(), b.end());
    std::sort(flat.begin(), flat.end());
    EXPECT_EQ(flat, pool);
    EXPECT_EQ(epoch_batches(pool, 8, true, 3, 1, true).size(), 4u);
}

TEST(Batches, NormalizationUsesTrainStatistics) {
    Dataset ds = synth_generate(2, 300, 8, 3);
    const auto train_idx = ds.indices(Split::train);
    const Batch b = make_batch(ds, train_idx);
    const int64_t px = 8 * 8;
    for (int c = 0; c < 3; ++c) {
        double sum = 0.0, sq = 0.0;
        for (int64_t i = 0; i < int64_t(train_idx.size()); ++i)
            for (int64_t p = 0; p < px; ++p) {
                const double x = b.images[(i * 3 + c) * px + p];
                sum += x;
                sq += x * x;
            }
        const double n = double(train_idx.size() * px);
        EXPECT_NEAR(sum / n, 0.0, 1e-4);
        EXPECT_NEAR(sq / n, 1.0, 1e-3);
    }
}

TEST(Batches, FlipMirrorsColumns) {
    Dataset ds = synth_generate(2, 4, 8, 2);
    const Batch plain = make_batch(ds, {1}, false, false);
    const Batch flipped = make_batch(ds, {1}, false, true);
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < 8; ++y)
            for (int64_t x = 0; x < 8; ++x)
                EXPECT_EQ(flipped.images[(c * 8 + y) * 8 + x], plain.images[(c * 8 + y) * 8 + (7 - x)]);
    EXPECT_THROW(make_batch(ds, {4}), IngestionError);
}
