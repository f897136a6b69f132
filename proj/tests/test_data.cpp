#include <gaptta/data.hpp>
#include <gaptta/error.hpp>
#include <gaptta/idx.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

using namespace gaptta;

namespace {

ErrorKind kind_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "expected an error";
    return ErrorKind::Io;
}

DatasetSpec small_spec() {
    DatasetSpec spec;
    spec.classes = 4;
    spec.input_dim = 8;
    spec.latent_dim = 6;
    spec.scale_ratio = 10.0;
    spec.train_count = 400;
    spec.test_count = 200;
    spec.seed = 9;
    return spec;
}

struct Pretrained {
    ModelState model;
    DatasetSplit data;
    PretrainReport report;
};

// The default blobs and architecture, trained with the default schedule.
const Pretrained& default_pretrained() {
    static const Pretrained p = [] {
        Pretrained out;
        out.data = make_dataset(DatasetSpec{});
        out.model = make_model(Architecture{}, 11);
        out.report = pretrain(out.model, out.data.train, out.data.test, PretrainConfig{});
        return out;
    }();
    return p;
}

std::string bytes_of(const ModelState& m) {
    std::ostringstream out;
    save_checkpoint(m, out);
    return out.str();
}

std::vector<std::uint8_t> idx_bytes(std::initializer_list<int> v) {
    std::vector<std::uint8_t> out;
    for (int x : v) out.push_back(static_cast<std::uint8_t>(x));
    return out;
}

}  // namespace

TEST(MakeDataset, DeterministicPerSeed) {
    const DatasetSplit a = make_dataset(small_spec());
    const DatasetSplit b = make_dataset(small_spec());
    EXPECT_EQ(a.train.inputs, b.train.inputs);
    EXPECT_EQ(a.train.labels, b.train.labels);
    EXPECT_EQ(a.test.inputs, b.test.inputs);
    DatasetSpec other = small_spec();
    other.seed = 10;
    EXPECT_NE(make_dataset(other).train.inputs, a.train.inputs);
    EXPECT_NE(a.train.inputs.row(0)[0], a.test.inputs.row(0)[0]);
}

TEST(MakeDataset, ClassBalanced) {
    const DatasetSplit d = make_dataset(small_spec());
    for (const Dataset* split : {&d.train, &d.test}) {
        std::map<int, std::size_t> hist;
        for (int y : split->labels) ++hist[y];
        ASSERT_EQ(hist.size(), 4u);
        for (const auto& [label, n] : hist) EXPECT_EQ(n, split->size() / 4) << label;
    }
}

TEST(MakeDataset, SeparatedMeansAreNearestMeanClassifiable) {
    DatasetSpec spec;
    spec.classes = 2;
    spec.input_dim = 5;
    spec.latent_dim = 5;
    spec.scale_ratio = 1.0;
    spec.warp = false;
    spec.spread = 0.05;
    spec.train_count = 500;
    spec.test_count = 500;
    Matrix means(2, 5, 0.0);
    means(0, 0) = 10.0;
    means(1, 0) = -10.0;
    spec.means = means;
    const DatasetSplit d = make_dataset(spec);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < d.test.size(); ++i) {
        double best = 1e300;
        int label = -1;
        for (int k = 0; k < 2; ++k) {
            double dist = 0;
            for (std::size_t j = 0; j < 5; ++j) {
                dist += std::pow(d.test.inputs(i, j) - means(static_cast<std::size_t>(k), j), 2);
            }
            if (dist < best) {
                best = dist;
                label = k;
            }
        }
        if (label == d.test.labels[i]) ++correct;
    }
    EXPECT_GE(static_cast<double>(correct) / static_cast<double>(d.test.size()), 0.99);
}

TEST(MakeDataset, RejectsDegenerateSpecs) {
    DatasetSpec spec = small_spec();
    spec.spread = 0.0;
    EXPECT_EQ(kind_of([&] { make_dataset(spec); }), ErrorKind::InvalidArgument);
    spec = small_spec();
    spec.classes = 1;
    EXPECT_EQ(kind_of([&] { make_dataset(spec); }), ErrorKind::InvalidArgument);
    spec = small_spec();
    spec.test_count = 0;
    EXPECT_EQ(kind_of([&] { make_dataset(spec); }), ErrorKind::InvalidArgument);
    spec = small_spec();
    spec.means = Matrix(4, 6, 1.0);
    EXPECT_EQ(kind_of([&] { make_dataset(spec); }), ErrorKind::InvalidArgument);
}

TEST(Corrupt, SeverityTable) {
    const double noise[] = {0.2, 0.4, 0.6, 0.8, 1.0};
    const double impulse[] = {0.02, 0.04, 0.08, 0.12, 0.16};
    const double dropout[] = {0.05, 0.10, 0.20, 0.30, 0.40};
    const double contrast[] = {0.8, 0.6, 0.5, 0.4, 0.3};
    const double window[] = {2, 3, 4, 5, 6};
    for (int s = 1; s <= 5; ++s) {
        EXPECT_EQ(severity_parameter(CorruptionKind::GaussianNoise, s), noise[s - 1]);
        EXPECT_EQ(severity_parameter(CorruptionKind::ImpulseNoise, s), impulse[s - 1]);
        EXPECT_EQ(severity_parameter(CorruptionKind::FeatureDropout, s), dropout[s - 1]);
        EXPECT_EQ(severity_parameter(CorruptionKind::ContrastScale, s), contrast[s - 1]);
        EXPECT_EQ(severity_parameter(CorruptionKind::SmoothingBlur, s), window[s - 1]);
    }
}

TEST(Corrupt, SeverityOutOfRangeRejected) {
    const Matrix x(4, 3, 1.0);
    EXPECT_EQ(kind_of([&] { corrupt(x, {CorruptionKind::GaussianNoise, 0, 1}); }), ErrorKind::InvalidArgument);
    EXPECT_EQ(kind_of([&] { corrupt(x, {CorruptionKind::GaussianNoise, 6, 1}); }), ErrorKind::InvalidArgument);
    EXPECT_EQ(kind_of([] { parse_corruption_kind("fog"); }), ErrorKind::InvalidArgument);
    for (CorruptionKind k : all_corruption_kinds()) EXPECT_EQ(parse_corruption_kind(to_string(k)), k);
}

TEST(Corrupt, DeterministicPerSeed) {
    const DatasetSplit d = make_dataset(small_spec());
    for (CorruptionKind k : all_corruption_kinds()) {
        const CorruptionSpec spec{k, 3, 17};
        EXPECT_EQ(corrupt(d.test.inputs, spec), corrupt(d.test.inputs, spec));
    }
    EXPECT_NE(corrupt(d.test.inputs, {CorruptionKind::GaussianNoise, 3, 17}),
              corrupt(d.test.inputs, {CorruptionKind::GaussianNoise, 3, 18}));
}

TEST(Corrupt, GaussianNoiseScaleMatchesInputStd) {
    DatasetSpec spec = small_spec();
    spec.test_count = 10000;
    const Matrix x = make_dataset(spec).test.inputs;
    const Matrix y = corrupt(x, {CorruptionKind::GaussianNoise, 5, 3});
    auto global_std = [](std::span<const double> v) {
        double mean = 0, sq = 0;
        for (double a : v) mean += a;
        mean /= static_cast<double>(v.size());
        for (double a : v) sq += (a - mean) * (a - mean);
        return std::sqrt(sq / static_cast<double>(v.size()));
    };
    Vector diff(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) diff[i] = y.values()[i] - x.values()[i];
    EXPECT_NEAR(global_std(diff) / global_std(x.values()), 1.0, 0.05);
}

TEST(Corrupt, OperatorsFollowTheirDefinitions) {
    const Matrix x{{1, 2, 3, 4, 5, 6}, {-1, 0, 1, 0, -1, 7}};
    const Matrix c = corrupt(x, {CorruptionKind::ContrastScale, 5, 1});
    double mean = 0;
    for (double v : x.values()) mean += v;
    mean /= static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(c.values()[i], mean + 0.3 * (x.values()[i] - mean));

    const Matrix b = corrupt(x, {CorruptionKind::SmoothingBlur, 1, 1});  // window 2
    EXPECT_DOUBLE_EQ(b(0, 0), 1.5);
    EXPECT_DOUBLE_EQ(b(0, 5), 6.0);
    EXPECT_DOUBLE_EQ(b(1, 4), 3.0);

    Matrix big(200, 50, 1.0);
    const Matrix dropped = corrupt(big, {CorruptionKind::FeatureDropout, 5, 4});
    const auto zeros = std::count(dropped.values().begin(), dropped.values().end(), 0.0);
    EXPECT_NEAR(static_cast<double>(zeros) / 10000.0, 0.40, 0.02);

    Matrix ramp(100, 100);
    for (std::size_t i = 0; i < ramp.size(); ++i) ramp.values()[i] = static_cast<double>(i % 97);
    const Matrix imp = corrupt(ramp, {CorruptionKind::ImpulseNoise, 5, 4});
    std::size_t changed = 0;
    for (std::size_t i = 0; i < ramp.size(); ++i) {
        const double v = imp.values()[i];
        if (v != ramp.values()[i]) {
            ++changed;
            EXPECT_TRUE(v == 0.0 || v == 96.0);
        }
    }
    EXPECT_NEAR(static_cast<double>(changed) / 10000.0, 0.16, 0.02);
}

TEST(MakeStream, BatchesCoverTheTestSet) {
    const DatasetSplit d = make_dataset(small_spec());  // 200 samples
    const auto stream = make_stream(d.test, std::nullopt, 64, 5);
    ASSERT_EQ(stream.size(), 4u);
    EXPECT_EQ(stream[3].size(), 8u);
    std::map<int, std::size_t> hist;
    for (std::size_t t = 0; t < stream.size(); ++t) {
        EXPECT_EQ(stream[t].index(), t);
        for (int y : stream[t].hidden_labels()) ++hist[y];
    }
    for (const auto& [label, n] : hist) EXPECT_EQ(n, 50u);

    // a single leftover sample is dropped
    const auto odd = make_stream(d.test, std::nullopt, 199, 5);
    ASSERT_EQ(odd.size(), 1u);
    EXPECT_EQ(odd[0].size(), 199u);
    EXPECT_EQ(kind_of([&] { make_stream(d.test, std::nullopt, 1, 5); }), ErrorKind::InvalidArgument);
}

TEST(MakeStream, RowsKeepTheirLabels) {
    const DatasetSplit d = make_dataset(small_spec());
    const auto stream = make_stream(d.test, std::nullopt, 32, 6);
    for (const auto& batch : stream) {
        for (std::size_t i = 0; i < batch.size(); ++i) {
            bool found = false;
            for (std::size_t n = 0; n < d.test.size() && !found; ++n) {
                found = std::equal(batch.inputs().row(i).begin(), batch.inputs().row(i).end(),
                                   d.test.inputs.row(n).begin()) &&
                        d.test.labels[n] == batch.hidden_labels()[i];
            }
            ASSERT_TRUE(found);
        }
    }
}

TEST(DatasetCache, RoundTrip) {
    const DatasetSplit d = make_dataset(small_spec());
    const auto path = std::filesystem::temp_directory_path() / "gaptta_test_dataset.cache";
    save_dataset(d.test, path);
    const Dataset back = load_dataset(path);
    EXPECT_EQ(back.inputs, d.test.inputs);
    EXPECT_EQ(back.labels, d.test.labels);
    std::filesystem::remove(path);
}

TEST(Idx, ParsesHeaderAndPayload) {
    const auto bytes = idx_bytes({0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 10, 20, 30, 255});
    const IdxArray a = parse_idx(bytes);
    EXPECT_EQ(a.type, IdxType::UnsignedByte);
    EXPECT_EQ(a.dims, (std::vector<std::uint32_t>{1, 2, 2}));
    EXPECT_EQ(a.values, (std::vector<double>{10, 20, 30, 255}));
}

TEST(Idx, MalformedInputsGiveDistinctErrors) {
    auto good = idx_bytes({0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3, 4});
    auto short_payload = good;
    short_payload.pop_back();
    auto long_payload = good;
    long_payload.push_back(9);
    auto bad_magic = good;
    bad_magic[1] = 1;
    auto bad_type = good;
    bad_type[2] = 0x0B;
    EXPECT_EQ(kind_of([&] { parse_idx(short_payload); }), ErrorKind::Length);
    EXPECT_EQ(kind_of([&] { parse_idx(long_payload); }), ErrorKind::Length);
    EXPECT_EQ(kind_of([&] { parse_idx(bad_magic); }), ErrorKind::Format);
    EXPECT_EQ(kind_of([&] { parse_idx(bad_type); }), ErrorKind::Unsupported);
    EXPECT_EQ(kind_of([&] { parse_idx(idx_bytes({0, 0, 8})); }), ErrorKind::Length);
    EXPECT_EQ(kind_of([&] { parse_idx(idx_bytes({0, 0, 8, 2, 0, 0})); }), ErrorKind::Length);
}

TEST(Idx, Float32BigEndian) {
    // 1.5f = 0x3FC00000, -2.0f = 0xC0000000
    const auto bytes = idx_bytes({0, 0, 0x0D, 1, 0, 0, 0, 2, 0x3F, 0xC0, 0, 0, 0xC0, 0, 0, 0});
    const IdxArray a = parse_idx(bytes);
    EXPECT_EQ(a.type, IdxType::Float32);
    EXPECT_EQ(a.values, (std::vector<double>{1.5, -2.0}));
}

TEST(Idx, RoundTripForSupportedTypes) {
    SeededRng rng(4);
    for (std::uint8_t type : {std::uint8_t{0x08}, std::uint8_t{0x0D}}) {
        std::vector<std::uint8_t> bytes{0, 0, type, 2, 0, 0, 0, 3, 0, 0, 0, 5};
        const std::size_t width = type == 0x08 ? 1 : 4;
        for (std::size_t i = 0; i < 15 * width; ++i) bytes.push_back(static_cast<std::uint8_t>(rng.below(256)));
        if (type == 0x0D) {
            // keep every float finite and non-NaN so the value survives a double round trip
            for (std::size_t i = 12; i < bytes.size(); i += 4) bytes[i] &= 0x3F;
        }
        EXPECT_EQ(serialize_idx(parse_idx(bytes)), bytes);
    }
}

TEST(Idx, FileReading) {
    const auto path = std::filesystem::temp_directory_path() / "gaptta_test.idx";
    const auto bytes = idx_bytes({0, 0, 8, 1, 0, 0, 0, 3, 7, 8, 9});
    {
        std::ofstream out(path, std::ios::binary);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    EXPECT_EQ(read_idx_file(path).values, (std::vector<double>{7, 8, 9}));
    std::filesystem::remove(path);
    EXPECT_EQ(kind_of([&] { read_idx_file(path); }), ErrorKind::Io);
}

TEST(Pretrain, DeterministicPerSeed) {
    const DatasetSplit d = make_dataset(small_spec());
    Architecture arch;
    arch.input_dim = 8;
    arch.hidden = {8};
    arch.embed_dim = 3;
    arch.classes = 4;
    PretrainConfig pc;
    pc.epochs = 2;
    ModelState a = make_model(arch, 1), b = make_model(arch, 1);
    pretrain(a, d.train, d.test, pc);
    pretrain(b, d.train, d.test, pc);
    EXPECT_EQ(bytes_of(a), bytes_of(b));
    EXPECT_EQ(a.norm_mode, NormMode::RunningStats);
}

TEST(Pretrain, DefaultBlobsLearnQuickly) {
    const Pretrained& p = default_pretrained();
    ASSERT_GE(p.report.epoch_loss.size(), 5u);
    EXPECT_LT(p.report.epoch_loss[4], p.report.epoch_loss[0]);
    EXPECT_GE(p.report.clean_test_accuracy, 0.95);
    EXPECT_EQ(p.report.clean_test_accuracy,
              evaluate_accuracy(p.model, p.data.test.inputs, p.data.test.labels, NormMode::RunningStats));
}

TEST(Pretrain, AccuracyDegradesWithSeverity) {
    const Pretrained& p = default_pretrained();
    for (CorruptionKind kind : {CorruptionKind::GaussianNoise, CorruptionKind::FeatureDropout}) {
        Vector acc;
        for (int s = 1; s <= 5; ++s) {
            double total = 0;
            for (std::uint64_t seed : {1u, 2u, 3u}) {
                const Matrix x = corrupt(p.data.test.inputs, {kind, s, seed});
                total += 100.0 * evaluate_accuracy(p.model, x, p.data.test.labels, NormMode::RunningStats);
            }
            acc.push_back(total / 3.0);
        }
        int inversions = 0;
        for (std::size_t s = 1; s < acc.size(); ++s) {
            if (acc[s] > acc[s - 1]) {
                ++inversions;
                EXPECT_LE(acc[s] - acc[s - 1], 0.5) << to_string(kind) << " severity " << s + 1;
            }
        }
        EXPECT_LE(inversions, 1) << to_string(kind);
    }
}

TEST(Pretrain, RejectsBadConfig) {
    const DatasetSplit d = make_dataset(small_spec());
    ModelState m = make_model(Architecture{8, {4}, 2, 4}, 1);
    PretrainConfig pc;
    pc.epochs = 0;
    EXPECT_EQ(kind_of([&] { pretrain(m, d.train, d.test, pc); }), ErrorKind::InvalidArgument);
    ModelState wrong = make_model(Architecture{9, {4}, 2, 4}, 1);
    EXPECT_EQ(kind_of([&] { pretrain(wrong, d.train, d.test, PretrainConfig{}); }), ErrorKind::Shape);
}
