#include <gtest/gtest.h>

#include <algorithm>

#include "kiunet/metrics.hpp"
#include "kiunet/random.hpp"

using namespace kiunet;

namespace {

BinaryMask mask(std::size_t h, std::size_t w, std::vector<std::uint8_t> bits) { return {h, w, std::move(bits)}; }

BinaryMask random_mask(Rng& rng, std::size_t h, std::size_t w, double p) {
    BinaryMask m{h, w, std::vector<std::uint8_t>(h * w)};
    for (auto& b : m.bits) b = rng.uniform() < p ? 1 : 0;
    return m;
}

}  // namespace

TEST(Overlap, BoundaryCases) {
    const auto a = mask(2, 2, {1, 0, 1, 0});
    const auto empty = mask(2, 2, {0, 0, 0, 0});
    const auto complement = mask(2, 2, {0, 1, 0, 1});
    EXPECT_EQ(dice(a, a), 1.0);
    EXPECT_EQ(jaccard(a, a), 1.0);
    EXPECT_EQ(dice(a, complement), 0.0);
    EXPECT_EQ(jaccard(a, complement), 0.0);
    EXPECT_EQ(dice(empty, empty), 1.0);
    EXPECT_EQ(jaccard(empty, empty), 1.0);
    EXPECT_EQ(dice(a, empty), 0.0);
    EXPECT_THROW(dice(a, mask(1, 4, {1, 0, 1, 0})), ShapeError);
}

TEST(Overlap, KnownPartialOverlap) {
    const auto a = mask(1, 4, {1, 1, 1, 0});
    const auto b = mask(1, 4, {0, 1, 1, 1});
    EXPECT_DOUBLE_EQ(dice(a, b), 4.0 / 6.0);
    EXPECT_DOUBLE_EQ(jaccard(a, b), 2.0 / 4.0);
}

TEST(Overlap, DiceJaccardIdentityAndSymmetry) {
    Rng rng(42);
    for (int i = 0; i < 200; ++i) {
        const double p = rng.uniform(0.0, 0.6);
        auto a = random_mask(rng, 7, 9, p), b = random_mask(rng, 7, 9, rng.uniform(0.0, 0.6));
        const double d = dice(a, b), j = jaccard(a, b);
        EXPECT_NEAR(d, 2 * j / (1 + j), 1e-12);
        EXPECT_EQ(d, dice(b, a));
        EXPECT_GE(d, j);
    }
}

TEST(Binarize, ThresholdSemantics) {
    Tensor<double> p({1, 1, 1, 4}, std::vector<double>{0.2, 0.5, 0.50001, 0.9});
    auto m = binarize(p, 0.5);
    EXPECT_EQ(m.bits, (std::vector<std::uint8_t>{0, 1, 1, 1}));
    EXPECT_EQ(m.count(), 3u);
    EXPECT_THROW(binarize(p, 0.0), ConfigError);
    EXPECT_THROW(binarize(p, 1.0), ConfigError);
    EXPECT_THROW(binarize(Tensor<double>({2, 1, 1, 4}), 0.5), ShapeError);
}

TEST(MeanVariance, PopulationStatisticsIndependentOfOrder) {
    std::vector<double> v{1, 2, 3, 4};
    auto mv = mean_variance(v);
    EXPECT_DOUBLE_EQ(mv.mean, 2.5);
    EXPECT_DOUBLE_EQ(mv.variance, 1.25);
    Rng rng(3);
    std::vector<double> x(101);
    for (double& e : x) e = rng.uniform(0.0, 1.0);
    const auto ref = mean_variance(x);
    for (int k = 0; k < 5; ++k) {
        rng.shuffle(x);
        const auto again = mean_variance(x);
        EXPECT_EQ(again.mean, ref.mean);
        EXPECT_EQ(again.variance, ref.variance);
    }
    EXPECT_EQ(mean_variance({}).mean, 0.0);
}

TEST(Report, CsvAndFoldAggregation) {
    auto r1 = EvalReport::from_rows({{"a", 1.0, 1.0}, {"b", 0.5, 1.0 / 3.0}});
    EXPECT_DOUBLE_EQ(r1.dice.mean, 0.75);
    const std::string csv = r1.csv();
    EXPECT_EQ(csv.rfind("sample,dice,jaccard\na,1,1\nb,0.5,", 0), 0u);
    EXPECT_NE(csv.find("# summary n=2 dice_mean=0.75"), std::string::npos);

    auto r2 = EvalReport::from_rows({{"c", 0.25, 1.0 / 7.0}});
    std::vector<EvalReport> folds{r1, r2};
    auto agg = aggregate_folds(folds);
    EXPECT_EQ(agg.folds, 2u);
    EXPECT_DOUBLE_EQ(agg.dice.mean, 0.5);
    EXPECT_DOUBLE_EQ(agg.dice.variance, 0.0625);

    const std::string table = metrics_table({{"kiunet", agg}}, {290000});
    EXPECT_NE(table.find("DICE Acc (%)"), std::string::npos);
    EXPECT_NE(table.find("Jaccard Idx (%)"), std::string::npos);
    EXPECT_NE(table.find("50.00"), std::string::npos);
    EXPECT_NE(table.find("0.29M"), std::string::npos);
}
