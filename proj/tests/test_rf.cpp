#include <gtest/gtest.h>

#include "kiunet/receptive_field.hpp"
#include "oracles.hpp"

using namespace kiunet;
using rf::LayerDesc;
using rf::LayerTrace;
using rf::Rational;

namespace {

std::vector<std::pair<char, std::size_t>> oracle_layers(const LayerTrace& t) {
    std::vector<std::pair<char, std::size_t>> out;
    for (const auto& l : t.layers) {
        out.emplace_back(l.kind == rf::LayerKind::conv ? 'c' : 'p', static_cast<std::size_t>(l.kernel));
    }
    return out;
}

}  // namespace

TEST(AnalyticRf, UndercompleteDepthThree) {
    auto r = rf::analytic_rf(LayerTrace::encoder(Direction::undercomplete, 3));
    EXPECT_EQ(r.final_rf, Rational(22));
    EXPECT_EQ(r.final_jump, Rational(8));
    ASSERT_EQ(r.rows.size(), 6u);
    EXPECT_EQ(r.rows[0].rf, Rational(3));
    EXPECT_EQ(r.rows[1].rf, Rational(4));
    EXPECT_EQ(r.rows[2].rf, Rational(8));
}

TEST(AnalyticRf, OvercompleteShrinksTheJump) {
    auto r = rf::analytic_rf(LayerTrace::encoder(Direction::overcomplete, 3));
    EXPECT_EQ(r.final_rf, Rational(25, 4));
    EXPECT_EQ(r.final_jump, Rational(1, 8));
    EXPECT_LT(r.final_rf, rf::analytic_rf(LayerTrace::encoder(Direction::undercomplete, 3)).final_rf);
}

TEST(AnalyticRf, EmptyTraceIsRejected) {
    EXPECT_THROW(rf::analytic_rf(LayerTrace{}), ConfigError);
    EXPECT_THROW(rf::empirical_rf(LayerTrace{}, 16), ConfigError);
}

class ConvPoolStacks : public ::testing::TestWithParam<std::pair<std::size_t, std::int64_t>> {};

TEST_P(ConvPoolStacks, AnalyticEmpiricalAndIntervalAgree) {
    const auto [depth, kernel] = GetParam();
    const auto trace = LayerTrace::encoder(Direction::undercomplete, depth, kernel);
    const auto analytic = rf::analytic_rf(trace);
    ASSERT_EQ(analytic.final_rf.denominator(), 1);
    const auto expected = static_cast<std::size_t>(analytic.final_rf.numerator());

    EXPECT_EQ(oracle::rf_interval(oracle_layers(trace)), expected);

    const auto probe = rf::empirical_rf(trace, 64);
    ASSERT_FALSE(probe.touches_border);
    EXPECT_EQ(probe.height, expected);
    EXPECT_EQ(probe.width, expected);
}

INSTANTIATE_TEST_SUITE_P(DepthsAndKernels, ConvPoolStacks,
                         ::testing::Values(std::pair<std::size_t, std::int64_t>{1, 3},
                                           std::pair<std::size_t, std::int64_t>{2, 3},
                                           std::pair<std::size_t, std::int64_t>{3, 3},
                                           std::pair<std::size_t, std::int64_t>{2, 5},
                                           std::pair<std::size_t, std::int64_t>{3, 1}));

TEST(EmpiricalRf, MixedStackMatchesRecurrence) {
    LayerTrace t;
    t.layers = {LayerDesc::conv(3), LayerDesc::conv(3), LayerDesc::pool(), LayerDesc::conv(5), LayerDesc::pool(),
                LayerDesc::conv(3)};
    const auto analytic = rf::analytic_rf(t);
    const auto probe = rf::empirical_rf(t, 64, {3, 7});
    EXPECT_EQ(Rational(static_cast<std::int64_t>(probe.height)), analytic.final_rf);
    EXPECT_EQ(oracle::rf_interval(oracle_layers(t)), probe.width);
}

TEST(EmpiricalRf, OvercompleteFootprintIsSmaller) {
    const auto uc = rf::empirical_rf(LayerTrace::encoder(Direction::undercomplete, 3), 64);
    const auto oc = rf::empirical_rf(LayerTrace::encoder(Direction::overcomplete, 3), 64);
    EXPECT_LT(oc.height, uc.height);
    EXPECT_LT(oc.width, uc.width);
    EXPECT_FALSE(oc.touches_border);
    EXPECT_EQ(oc.height, 6u);
    EXPECT_EQ(uc.height, 22u);
}

TEST(EmpiricalRf, BorderClippingIsFlagged) {
    const auto probe = rf::empirical_rf(LayerTrace::encoder(Direction::undercomplete, 3), 16);
    EXPECT_TRUE(probe.touches_border);
}

TEST(RfReport, CsvAndTable) {
    auto r = rf::analytic_rf(LayerTrace::encoder(Direction::overcomplete, 2));
    EXPECT_EQ(r.csv(), "layer,kind,jump,rf\n1,conv3,1,3\n2,up2,1/2,4\n3,conv3,1/2,5\n4,up2,1/4,11/2\n");
    r.empirical = rf::Extent{6, 6, false};
    const std::string table = r.table();
    EXPECT_NE(table.find("final rf: 11/2 px"), std::string::npos);
    EXPECT_NE(table.find("empirical footprint: 6x6 px"), std::string::npos);
    EXPECT_NE(table.find("5.500"), std::string::npos);
}
