#include "vitc/data/dataset.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "vitc/errors.hpp"
#include "vitc/util/hash.hpp"

namespace vitc::data {

static_assert(std::endian::native == std::endian::little, "manifest payload assumes a little-endian host");

using nn::Tensor;

namespace {

constexpr const char* kMagic = "VITC-DATASET 1";

[[noreturn]] void fail(const std::string& msg) { throw IngestionError("dataset: " + msg); }

std::string float_text(float v) {
    char buf[32];
    auto r = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, r.ptr);
}

float parse_float(const std::string& s, const std::string& line) {
    float v = 0.0f;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) fail("bad number in '" + line + "'");
    return v;
}

}  // namespace

const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

std::vector<int64_t> Dataset::indices(Split s) const {
    std::vector<int64_t> out;
    for (size_t i = 0; i < splits.size(); ++i)
        if (splits[i] == s) out.push_back(static_cast<int64_t>(i));
    return out;
}

void Dataset::compute_stats() {
    std::vector<int64_t> pool = indices(Split::train);
    if (pool.empty())
        for (int64_t i = 0; i < size(); ++i) pool.push_back(i);
    const int64_t plane = int64_t(img) * img;
    for (int c = 0; c < 3; ++c) {
        double s = 0.0, s2 = 0.0;
        for (int64_t i : pool) {
            const float* p = images.ptr() + (i * 3 + c) * plane;
            for (int64_t j = 0; j < plane; ++j) {
                s += p[j];
                s2 += double(p[j]) * p[j];
            }
        }
        const double n = double(pool.size()) * double(plane);
        const double m = n > 0 ? s / n : 0.0;
        const double var = n > 0 ? std::max(s2 / n - m * m, 0.0) : 1.0;
        mean[size_t(c)] = float(m);
        stdev[size_t(c)] = float(std::max(std::sqrt(var), 1e-6));
    }
}

void Dataset::validate() const {
    if (img <= 0 || classes < 1) fail("img and classes must be positive");
    const int64_t n = size();
    if (int64_t(splits.size()) != n) fail("split tags (" + std::to_string(splits.size()) + ") != labels (" + std::to_string(n) + ")");
    const nn::Shape want{n, 3, img, img};
    if (images.shape() != want) fail("image tensor shape does not match n=" + std::to_string(n) + ", img=" + std::to_string(img));
    for (int64_t i = 0; i < n; ++i) {
        const int32_t y = labels[size_t(i)];
        if (y < 0 || y >= classes) fail("label " + std::to_string(y) + " at sample " + std::to_string(i) + " outside [0, " + std::to_string(classes) + ")");
        if (uint8_t(splits[size_t(i)]) > 2) fail("bad split tag at sample " + std::to_string(i));
    }
    for (float v : images.data())
        if (!(v >= 0.0f && v <= 1.0f)) fail("pixel value outside [0,1]");
    for (float s : stdev)
        if (!(s > 0.0f)) fail("non-positive channel stdev");
}

Dataset synth_generate(uint64_t seed, int64_t n, int img, int classes, const SynthOptions& options) {
    if (classes < 2) throw ConfigError("synth_generate: need at least 2 classes");
    if (n < 0 || img <= 0) throw ConfigError("synth_generate: n must be >= 0 and img > 0");
    constexpr double pi = std::numbers::pi;

    struct ClassStyle {
        double angle, freq, phase;
        std::array<double, 3> colour;
    };
    std::vector<ClassStyle> style(static_cast<size_t>(classes));
    for (int k = 0; k < classes; ++k) {
        auto& s = style[size_t(k)];
        s.angle = pi * k / classes;
        s.freq = 2.0 + k % 3;  // cycles across the image
        s.phase = 2.0 * pi * std::fmod(0.37 * k, 1.0);
        for (int c = 0; c < 3; ++c) s.colour[size_t(c)] = 0.6 + 0.4 * std::cos(2.0 * pi * (double(k) / classes + c / 3.0));
    }

    Dataset ds;
    ds.img = img;
    ds.classes = classes;
    ds.images = Tensor::zeros({n, 3, img, img});
    ds.labels.resize(size_t(n));
    ds.splits.assign(size_t(n), Split::train);

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const int64_t plane = int64_t(img) * img;
    for (int64_t i = 0; i < n; ++i) {
        const int k = int(i % classes);
        ds.labels[size_t(i)] = k;
        const auto& s = style[size_t(k)];
        const double angle = s.angle + options.angle_jitter * unit(rng);
        const double phase = s.phase + options.phase_jitter * unit(rng);
        const double cx = std::cos(angle), cy = std::sin(angle);
        for (int c = 0; c < 3; ++c) {
            float* p = ds.images.ptr() + (i * 3 + c) * plane;
            for (int y = 0; y < img; ++y)
                for (int x = 0; x < img; ++x) {
                    const double t = 2.0 * pi * s.freq * (x * cx + y * cy) / img + phase;
                    const double v = 0.5 + 0.4 * s.colour[size_t(c)] * std::sin(t) + options.noise * gauss(rng);
                    p[y * img + x] = float(std::clamp(v, 0.0, 1.0));
                }
        }
    }

    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[size_t(i)] = i;
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = int64_t(std::floor(double(n) * options.val_fraction));
    const auto n_test = int64_t(std::floor(double(n) * options.test_fraction));
    for (int64_t j = 0; j < n_val + n_test && j < n; ++j)
        ds.splits[size_t(order[size_t(j)])] = j < n_val ? Split::val : Split::test;
    ds.compute_stats();
    return ds;
}

std::string serialize_dataset(const Dataset& ds) {
    ds.validate();
    const size_t n = size_t(ds.size());
    const size_t image_bytes = size_t(ds.images.numel()) * sizeof(float);
    const size_t label_bytes = n * sizeof(int32_t);
    std::string payload(image_bytes + label_bytes + n, '\0');
    if (image_bytes) std::memcpy(payload.data(), ds.images.ptr(), image_bytes);
    if (label_bytes) std::memcpy(payload.data() + image_bytes, ds.labels.data(), label_bytes);
    for (size_t i = 0; i < n; ++i) payload[image_bytes + label_bytes + i] = char(ds.splits[i]);

    std::ostringstream head;
    head << kMagic << '\n'
         << "n " << n << '\n'
         << "img " << ds.img << '\n'
         << "classes " << ds.classes << '\n'
         << "mean " << float_text(ds.mean[0]) << ' ' << float_text(ds.mean[1]) << ' ' << float_text(ds.mean[2]) << '\n'
         << "std " << float_text(ds.stdev[0]) << ' ' << float_text(ds.stdev[1]) << ' ' << float_text(ds.stdev[2]) << '\n'
         << "payload " << payload.size() << '\n'
         << "checksum " << hex64(fnv1a64(payload)) << '\n'
         << "end\n";
    return head.str() + payload;
}

Dataset deserialize_dataset(const std::string& bytes) {
    size_t pos = 0;
    auto next_line = [&]() -> std::string {
        const size_t end = bytes.find('\n', pos);
        if (end == std::string::npos) fail("unterminated header");
        std::string line = bytes.substr(pos, end - pos);
        pos = end + 1;
        return line;
    };
    if (next_line() != kMagic) fail("bad magic (expected '" + std::string(kMagic) + "')");

    std::map<std::string, std::vector<std::string>> fields;
    for (;;) {
        const std::string line = next_line();
        if (line == "end") break;
        std::istringstream is(line);
        std::string key, tok;
        is >> key;
        std::vector<std::string> values;
        while (is >> tok) values.push_back(tok);
        if (fields.count(key)) fail("duplicate header field '" + key + "'");
        fields[key] = values;
    }
    auto get = [&](const std::string& key, size_t count) -> const std::vector<std::string>& {
        auto it = fields.find(key);
        if (it == fields.end()) fail("missing header field '" + key + "'");
        if (it->second.size() != count) fail("field '" + key + "' expects " + std::to_string(count) + " value(s)");
        return it->second;
    };
    auto get_int = [&](const std::string& key) -> int64_t {
        const std::string& s = get(key, 1)[0];
        int64_t v = 0;
        auto r = std::from_chars(s.data(), s.data() + s.size(), v);
        if (r.ec != std::errc() || r.ptr != s.data() + s.size() || v < 0) fail("bad value for '" + key + "'");
        return v;
    };
    for (const auto& [key, _] : fields) {
        static const char* known[] = {"n", "img", "classes", "mean", "std", "payload", "checksum"};
        if (std::none_of(std::begin(known), std::end(known), [&](const char* k) { return key == k; }))
            fail("unknown header field '" + key + "'");
    }

    Dataset ds;
    const int64_t n = get_int("n");
    ds.img = int(get_int("img"));
    ds.classes = int(get_int("classes"));
    for (int c = 0; c < 3; ++c) {
        ds.mean[size_t(c)] = parse_float(get("mean", 3)[size_t(c)], "mean");
        ds.stdev[size_t(c)] = parse_float(get("std", 3)[size_t(c)], "std");
    }
    const auto declared = uint64_t(get_int("payload"));
    const std::string checksum = get("checksum", 1)[0];

    const uint64_t image_bytes = uint64_t(n) * 3 * uint64_t(ds.img) * uint64_t(ds.img) * sizeof(float);
    const uint64_t expected = image_bytes + uint64_t(n) * sizeof(int32_t) + uint64_t(n);
    if (declared != expected) fail("payload field says " + std::to_string(declared) + " bytes, layout needs " + std::to_string(expected));
    const uint64_t actual = bytes.size() - pos;
    if (actual != expected) fail("payload is " + std::to_string(actual) + " bytes, expected " + std::to_string(expected));
    const std::string_view payload(bytes.data() + pos, size_t(expected));
    if (hex64(fnv1a64(payload)) != checksum) fail("checksum mismatch (header " + checksum + ", payload " + hex64(fnv1a64(payload)) + ")");

    ds.images = Tensor::zeros({n, 3, ds.img, ds.img});
    ds.labels.resize(size_t(n));
    ds.splits.resize(size_t(n));
    if (image_bytes) std::memcpy(ds.images.ptr(), payload.data(), size_t(image_bytes));
    if (n) std::memcpy(ds.labels.data(), payload.data() + image_bytes, size_t(n) * sizeof(int32_t));
    for (int64_t i = 0; i < n; ++i) ds.splits[size_t(i)] = Split(uint8_t(payload[size_t(image_bytes) + size_t(n) * 4 + size_t(i)]));
    ds.validate();
    return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
    const std::string bytes = serialize_dataset(ds);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IngestionError("dataset: cannot open '" + path.string() + "' for writing");
    os.write(bytes.data(), std::streamsize(bytes.size()));
    if (!os) throw IngestionError("dataset: write to '" + path.string() + "' failed");
}

Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IngestionError("dataset: cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return deserialize_dataset(ss.str());
}

Batch make_batch(const Dataset& ds, const std::vector<int64_t>& index, bool normalize, bool flip) {
    const int64_t b = int64_t(index.size()), img = ds.img, plane = img * img;
    Batch out;
    out.images = Tensor::zeros({b, 3, img, img});
    out.labels.reserve(index.size());
    for (int64_t r = 0; r < b; ++r) {
        const int64_t i = index[size_t(r)];
        if (i < 0 || i >= ds.size()) throw IngestionError("dataset: sample index " + std::to_string(i) + " out of range");
        out.labels.push_back(ds.labels[size_t(i)]);
        for (int c = 0; c < 3; ++c) {
            const float* src = ds.images.ptr() + (i * 3 + c) * plane;
            float* dst = out.images.ptr() + (r * 3 + c) * plane;
            const float m = normalize ? ds.mean[size_t(c)] : 0.0f;
            const float inv = normalize ? 1.0f / ds.stdev[size_t(c)] : 1.0f;
            for (int64_t y = 0; y < img; ++y)
                for (int64_t x = 0; x < img; ++x) {
                    const int64_t sx = flip ? img - 1 - x : x;
                    dst[y * img + x] = (src[y * img + sx] - m) * inv;
                }
        }
    }
    return out;
}

std::vector<std::vector<int64_t>> epoch_batches(const std::vector<int64_t>& pool, int batch_size, bool shuffle,
                                                uint64_t seed, int epoch, bool drop_last) {
    if (batch_size < 1) throw ConfigError("epoch_batches: batch_size must be >= 1");
    std::vector<int64_t> order = pool;
    if (shuffle) {
        std::mt19937_64 rng(fnv1a64(&epoch, sizeof(epoch), seed ^ kFnvOffset));
        std::shuffle(order.begin(), order.end(), rng);
    }
    std::vector<std::vector<int64_t>> out;
    for (size_t i = 0; i < order.size(); i += size_t(batch_size)) {
        const size_t end = std::min(order.size(), i + size_t(batch_size));
        if (drop_last && end - i < size_t(batch_size)) break;
        out.emplace_back(order.begin() + std::ptrdiff_t(i), order.begin() + std::ptrdiff_t(end));
    }
    return out;
}

}  // namespace vitc::data
