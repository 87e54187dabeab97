#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "kiunet/data.hpp"

using namespace kiunet;
using namespace kiunet::data;

namespace {

SynthConfig small_config(std::size_t count = 6, std::uint64_t seed = 11) {
    SynthConfig c;
    c.image_size = 32;
    c.count = count;
    c.seed = seed;
    c.min_radius = 1.5;
    c.max_radius = 4.0;
    return c;
}

bool same_values(const Tensor<float>& a, const Tensor<float>& b) {
    return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

}  // namespace

TEST(Synthetic, DeterministicAndIndependentOfCount) {
    auto [a, ma] = generate_synthetic(small_config(6));
    auto [b, mb] = generate_synthetic(small_config(6));
    auto [c, mc] = generate_synthetic(small_config(3));
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_TRUE(same_values(a[i].image, b[i].image));
        EXPECT_TRUE(same_values(a[i].mask, b[i].mask));
    }
    for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(same_values(a[i].image, c[i].image));
    EXPECT_EQ(ma.str(), mb.str());

    auto [d, md] = generate_synthetic(small_config(6, 12));
    EXPECT_FALSE(same_values(a[0].image, d[0].image));
}

TEST(Synthetic, MasksAreBinaryWithinBorderAndBounds) {
    const auto cfg = small_config(20);
    auto [samples, manifest] = generate_synthetic(cfg);
    ASSERT_EQ(samples.size(), 20u);
    const std::size_t n = cfg.image_size;
    for (const auto& s : samples) {
        EXPECT_EQ(s.image.shape(), (Shape{1, 1, n, n}));
        EXPECT_NO_THROW(validate_mask(s.mask, s.id));
        auto m = s.mask.values();
        std::size_t fg = 0;
        for (std::size_t y = 0; y < n; ++y) {
            for (std::size_t x = 0; x < n; ++x) {
                if (m[y * n + x] == 0.0f) continue;
                ++fg;
                EXPECT_GE(std::min(y, x), cfg.border) << s.id;
                EXPECT_LT(std::max(y, x), n - cfg.border) << s.id;
            }
        }
        const double frac = static_cast<double>(fg) / static_cast<double>(n * n);
        EXPECT_GE(frac, cfg.min_foreground);
        EXPECT_LE(frac, cfg.max_foreground);
        for (float v : s.image.values()) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
    }
    EXPECT_EQ(samples[3].id, "s00003");
    ASSERT_EQ(manifest.comments.size(), 1u);
    EXPECT_TRUE(manifest.comments[0].starts_with("generator synthetic image_size=32 count=20"));
}

TEST(Synthetic, InvalidConfigurationsAreRejected) {
    auto c = small_config();
    c.count = 0;
    EXPECT_THROW(generate_synthetic(c), ConfigError);
    c = small_config();
    c.min_radius = 5.0;
    c.max_radius = 4.0;
    EXPECT_THROW(generate_synthetic(c), ConfigError);
    c = small_config();
    c.max_background = 0.9;
    EXPECT_THROW(generate_synthetic(c), ConfigError);
}

TEST(Synthetic, ImpossibleLayoutsFailLoudly) {
    auto c = small_config(1);
    c.image_size = 8;
    c.min_radius = 6.0;
    c.max_radius = 6.0;
    EXPECT_THROW(generate_synthetic(c), GenerationError);
}

TEST(Manifest, RoundTripAndParseErrors) {
    auto [samples, m] = generate_synthetic(small_config(5));
    m = split(m, 0.6, 3);
    std::istringstream in(m.str());
    auto back = DatasetManifest::parse(in);
    EXPECT_EQ(back.str(), m.str());
    EXPECT_EQ(back.entries[2].image_path, "images/s00002.kiut");

    std::istringstream three_fields("a\tb\tc\n");
    EXPECT_THROW(DatasetManifest::parse(three_fields), FormatError);
    std::istringstream bad_split("a\tb\tc\tvalidation\n");
    EXPECT_THROW(DatasetManifest::parse(bad_split), FormatError);
    std::istringstream dup("a\tb\tc\ttrain\na\tb\tc\ttest\n");
    EXPECT_THROW(DatasetManifest::parse(dup), FormatError);
}

TEST(Split, FractionSeedAndErrors) {
    auto [samples, m] = generate_synthetic(small_config(10));
    auto s1 = split(m, 0.8, 1), s1b = split(m, 0.8, 1), s2 = split(m, 0.8, 2);
    EXPECT_EQ(s1.ids(Split::train).size(), 8u);
    EXPECT_EQ(s1.ids(Split::test).size(), 2u);
    EXPECT_EQ(s1.str(), s1b.str());
    EXPECT_NE(s1.ids(Split::test), s2.ids(Split::test));
    EXPECT_EQ(s1.comments.back(), "split seed=1 train_fraction=0.8");

    // Re-splitting replaces the earlier provenance line.
    auto again = split(s1, 0.5, 4);
    EXPECT_EQ(std::count_if(again.comments.begin(), again.comments.end(),
                            [](const std::string& c) { return c.starts_with("split "); }),
              1);

    EXPECT_THROW(split(m, 0.0, 1), ConfigError);
    EXPECT_THROW(split(m, 1.0, 1), ConfigError);
    EXPECT_THROW(split(m, 0.01, 1), ConfigError);
}

TEST(Pgm, RoundTripAndErrors) {
    testutil::TempDir dir("pgm");
    Tensor<float> t({1, 1, 2, 3}, std::vector<float>{0.0f, 1.0f, 0.5f, 0.25f, 2.0f, -1.0f});
    write_pgm(dir / "a.pgm", t);
    auto back = read_pgm(dir / "a.pgm");
    ASSERT_EQ(back.shape(), (Shape{1, 1, 2, 3}));
    const std::vector<float> expected{0.0f, 1.0f, 128.0f / 255.0f, 64.0f / 255.0f, 1.0f, 0.0f};
    for (std::size_t i = 0; i < 6; ++i) EXPECT_FLOAT_EQ(back.values()[i], expected[i]);

    {
        std::ofstream f(dir / "comment.pgm", std::ios::binary);
        f << "P5\n# made by hand\n2 1\n4\n";
        f.put(2);
        f.put(4);
    }
    auto c = read_pgm(dir / "comment.pgm");
    EXPECT_FLOAT_EQ(c.values()[0], 0.5f);
    EXPECT_FLOAT_EQ(c.values()[1], 1.0f);

    {
        std::ofstream f(dir / "ascii.pgm");
        f << "P2\n1 1\n255\n0\n";
    }
    EXPECT_THROW(read_pgm(dir / "ascii.pgm"), FormatError);
    {
        std::ofstream f(dir / "short.pgm", std::ios::binary);
        f << "P5\n4 4\n255\n";
        f.put(1);
    }
    EXPECT_THROW(read_pgm(dir / "short.pgm"), TruncatedFileError);
    EXPECT_THROW(read_pgm(dir / "none.pgm"), IoError);
    EXPECT_THROW(write_pgm(dir / "x.pgm", Tensor<float>({2, 1, 2, 2})), ShapeError);
}

TEST(Dataset, WriteThenLoadPreservesSamples) {
    testutil::TempDir dir("dataset");
    auto [samples, m] = generate_synthetic(small_config(5));
    m = split(m, 0.6, 9);
    write_dataset(dir.path(), samples, m);
    auto d = load_dataset(dir.path());
    EXPECT_EQ(d.train.size(), 3u);
    EXPECT_EQ(d.test.size(), 2u);
    EXPECT_TRUE(d.unassigned.empty());
    for (const auto& s : d.train) {
        const auto& orig = samples[std::stoul(s.id.substr(1))];
        EXPECT_TRUE(same_values(s.image, orig.image));
        EXPECT_TRUE(same_values(s.mask, orig.mask));
    }
}

TEST(Dataset, NonBinaryMaskIsRejected) {
    testutil::TempDir dir("nonbinary");
    auto [samples, m] = generate_synthetic(small_config(1));
    samples[0].mask.mutable_values()[40] = 0.5f;
    write_dataset(dir.path(), samples, m);
    EXPECT_THROW(load_dataset(dir.path()), NonBinaryMaskError);
    EXPECT_THROW(load_dataset(dir.path(), "other.tsv"), IoError);
}

TEST(Dataset, ShapeMismatchIsRejected) {
    testutil::TempDir dir("shape");
    io::save_tensor(dir / "i.kiut", Tensor<float>({1, 1, 4, 4}));
    io::save_tensor(dir / "m.kiut", Tensor<float>({1, 1, 4, 5}));
    EXPECT_THROW(load_sample(dir / "i.kiut", dir / "m.kiut", "x"), ShapeError);
}
