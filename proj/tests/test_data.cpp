#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <unistd.h>

#include "chartnet/data.hpp"

using namespace chartnet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("chartnet_data_" + std::to_string(::getpid()) + "_" +
                                            ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

IdxData four_image_fixture() {
    IdxData d;
    d.count = 4;
    d.rows = d.cols = 28;
    d.pixels.resize(4 * 784);
    for (std::size_t i = 0; i < d.pixels.size(); ++i) d.pixels[i] = static_cast<unsigned char>((i * 7) % 256);
    d.labels = {3, 1, 4, 1};
    return d;
}

std::vector<unsigned char> bytes_of(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

} // namespace

TEST(Circle, OnUnitCircleWithOctantLabels) {
    const auto ds = gen_circle(1000, 0.0, 1);
    ASSERT_EQ(ds.size(), 1000u);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        EXPECT_NEAR(std::hypot(ds.inputs(i, 0), ds.inputs(i, 1)), 1.0, 1e-12);
        EXPECT_EQ(ds.labels[i], static_cast<int>(ds.meta(i, 0) / (std::numbers::pi / 4)));
    }
    EXPECT_EQ(ds.num_classes(), 8);
}

TEST(Circle, CentredAndSeeded) {
    const auto ds = gen_circle(10000, 0.1, 2);
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        mx += ds.inputs(i, 0);
        my += ds.inputs(i, 1);
    }
    EXPECT_LT(std::abs(mx / 10000), 0.05);
    EXPECT_LT(std::abs(my / 10000), 0.05);
    EXPECT_EQ(gen_circle(50, 0.1, 3).inputs, gen_circle(50, 0.1, 3).inputs);
    EXPECT_NE(gen_circle(50, 0.1, 3).inputs, gen_circle(50, 0.1, 4).inputs);
    EXPECT_THROW(gen_circle(50, -1.0, 0), DomainError);
}

TEST(Torus, SatisfiesTorusEquation) {
    const auto ds = gen_torus(2000, 2.0, 0.5, 5);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const double rho = std::hypot(ds.inputs(i, 0), ds.inputs(i, 1));
        EXPECT_NEAR(std::hypot(rho - 2.0, ds.inputs(i, 2)), 0.5, 1e-12);
        EXPECT_LE(std::abs(ds.inputs(i, 2)), 0.5);
        EXPECT_GE(ds.labels[i], 0);
        EXPECT_LT(ds.labels[i], 16);
    }
    EXPECT_EQ(gen_torus(20, 2, 1, 9).inputs, gen_torus(20, 2, 1, 9).inputs);
    EXPECT_THROW(gen_torus(20, 1.0, 1.0, 0), DomainError);
    EXPECT_THROW(gen_torus(20, 1.0, 0.0, 0), DomainError);
}

TEST(Clusters, BalancedLabels) {
    const auto ds = gen_clusters(40, 4, 3.0, 0.1, 1);
    std::map<int, int> counts;
    for (int l : ds.labels) ++counts[l];
    EXPECT_EQ(counts.size(), 4u);
    for (auto [l, c] : counts) EXPECT_EQ(c, 10);
    EXPECT_THROW(gen_clusters(3, 4, 1, 1, 0), DomainError);
}

TEST(Dataset, SubsetAndCsv) {
    const auto ds = gen_circle(16, 0.0, 1);
    const std::vector<std::size_t> idx{3, 1};
    const auto sub = ds.subset(idx);
    EXPECT_EQ(sub.size(), 2u);
    EXPECT_EQ(sub.labels[0], ds.labels[3]);
    EXPECT_EQ(sub.meta(1, 0), ds.meta(1, 0));
    std::stringstream ss;
    write_dataset_csv(ss, sub);
    std::string header;
    std::getline(ss, header);
    EXPECT_EQ(header, "label,theta,x0,x1");
}

TEST(Idx, LoadsFixture) {
    TempDir dir;
    write_idx(dir.file("img"), dir.file("lab"), four_image_fixture());
    const auto ds = load_idx(dir.file("img"), dir.file("lab"));
    EXPECT_EQ(ds.inputs.rows, 4u);
    EXPECT_EQ(ds.inputs.cols, 784u);
    for (double v : ds.inputs.data) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    EXPECT_EQ(ds.labels, (std::vector<int>{3, 1, 4, 1}));
    ASSERT_TRUE(ds.image.has_value());
    EXPECT_EQ(ds.image->width, 28u);
    EXPECT_EQ(load_idx(dir.file("img"), dir.file("lab"), 2).size(), 2u);
}

TEST(Idx, RoundTripBytes) {
    TempDir dir;
    write_idx(dir.file("img"), dir.file("lab"), four_image_fixture());
    const auto raw = read_idx_raw(dir.file("img"), dir.file("lab"));
    write_idx(dir.file("img2"), dir.file("lab2"), raw);
    EXPECT_EQ(bytes_of(dir.file("img")), bytes_of(dir.file("img2")));
    EXPECT_EQ(bytes_of(dir.file("lab")), bytes_of(dir.file("lab2")));
    EXPECT_EQ(bytes_of(dir.file("img")).size(), 16u + 4 * 784);
}

TEST(Idx, Errors) {
    TempDir dir;
    write_idx(dir.file("img"), dir.file("lab"), four_image_fixture());
    // swapped files: wrong magic, message names the expected one
    try {
        read_idx_raw(dir.file("lab"), dir.file("img"));
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("expected 0x00000803"), std::string::npos) << e.what();
    }
    auto bytes = bytes_of(dir.file("img"));
    bytes.resize(bytes.size() - 10);
    std::ofstream(dir.file("short"), std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    EXPECT_THROW(read_idx_raw(dir.file("short"), dir.file("lab")), FormatError);
    auto other = four_image_fixture();
    other.count = 3;
    other.pixels.resize(3 * 784);
    other.labels.resize(3);
    write_idx(dir.file("img3"), dir.file("lab3"), other);
    EXPECT_THROW(read_idx_raw(dir.file("img"), dir.file("lab3")), FormatError);
    EXPECT_THROW(read_idx_raw(dir.file("missing"), dir.file("lab")), FormatError);
}

TEST(Augment, IdentityPolicy) {
    std::mt19937_64 rng(1);
    const std::vector<double> x{0.1, 0.2, 0.3, 0.4};
    auto [a, b] = augment_pair(x, AugmentPolicy{}, ImageShape{2, 2}, rng);
    EXPECT_EQ(a, x);
    EXPECT_EQ(b, x);
}

TEST(Augment, JitterMoments) {
    std::mt19937_64 rng(2);
    AugmentPolicy p;
    p.jitter_sigma = 0.1;
    const std::vector<double> x{1.0, -2.0};
    double s0 = 0, s1 = 0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        auto v = augment(x, p, std::nullopt, rng);
        s0 += (v[0] - x[0]) * (v[0] - x[0]);
        s1 += (v[1] - x[1]) * (v[1] - x[1]);
    }
    EXPECT_NEAR(std::sqrt(s0 / draws), 0.1, 0.01);
    EXPECT_NEAR(std::sqrt(s1 / draws), 0.1, 0.01);
}

TEST(Augment, FlipIsAnInvolution) {
    std::mt19937_64 rng(3);
    AugmentPolicy p;
    p.flip_prob = 1.0;
    const ImageShape shape{2, 3};
    const std::vector<double> x{1, 2, 3, 4, 5, 6};
    const auto once = augment(x, p, shape, rng);
    EXPECT_EQ(once, (std::vector<double>{3, 2, 1, 6, 5, 4}));
    EXPECT_EQ(augment(once, p, shape, rng), x);
}

TEST(Augment, CropStaysInRangeAndIsSeeded) {
    AugmentPolicy p;
    p.crop = AugmentPolicy::Crop::random_resized;
    p.crop_min_scale = 0.3;
    const ImageShape shape{8, 8};
    std::vector<double> x(64);
    for (std::size_t i = 0; i < 64; ++i) x[i] = static_cast<double>(i % 8) / 7.0;
    std::mt19937_64 r1(4), r2(4);
    for (int t = 0; t < 20; ++t) {
        const auto a = augment(x, p, shape, r1);
        EXPECT_EQ(a, augment(x, p, shape, r2));
        ASSERT_EQ(a.size(), 64u);
        for (double v : a) {
            EXPECT_GE(v, -1e-12);
            EXPECT_LE(v, 1.0 + 1e-12);
        }
    }
    p.crop_min_scale = 0.0;
    EXPECT_THROW(p.validate(), DomainError);
}

TEST(PkSampler, BatchesHavePDistinctClassesTimesK) {
    const auto ds = gen_circle(512, 0.0, 1);
    PkSampler s(ds.labels, 8, 4, 7);
    EXPECT_EQ(s.batch_size(), 32u);
    for (int b = 0; b < 50; ++b) {
        const auto batch = s.next();
        ASSERT_EQ(batch.size(), 32u);
        std::map<int, int> counts;
        std::set<std::size_t> distinct(batch.begin(), batch.end());
        EXPECT_EQ(distinct.size(), 32u);
        for (auto i : batch) ++counts[ds.labels[i]];
        EXPECT_EQ(counts.size(), 8u);
        for (auto [l, c] : counts) EXPECT_EQ(c, 4);
    }
}

TEST(PkSampler, SmallCaseAndDeterminism) {
    const auto ds = gen_clusters(16, 4, 1.0, 0.1, 0);
    PkSampler a(ds.labels, 2, 2, 3), b(ds.labels, 2, 2, 3);
    for (int i = 0; i < 10; ++i) {
        const auto x = a.next();
        EXPECT_EQ(x.size(), 4u);
        std::set<int> labels;
        for (auto j : x) labels.insert(ds.labels[j]);
        EXPECT_EQ(labels.size(), 2u);
        EXPECT_EQ(x, b.next());
    }
}

TEST(PkSampler, InsufficientClasses) {
    const std::vector<int> labels{0, 0, 1, 1, 2};
    EXPECT_THROW(PkSampler(labels, 3, 2, 0), DomainError);
    EXPECT_NO_THROW(PkSampler(labels, 2, 2, 0));
}
