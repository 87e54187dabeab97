#include <gtest/gtest.h>

#include <algorithm>

#include "helpers.hpp"
#include "kiunet/data.hpp"
#include "kiunet/training.hpp"
#include "oracles.hpp"

using namespace kiunet;
using testutil::as_double;
using testutil::random_tensor;

namespace {

std::vector<data::Sample> tiny_dataset(std::size_t count, std::uint64_t seed) {
    data::SynthConfig cfg;
    cfg.image_size = 16;
    cfg.count = count;
    cfg.seed = seed;
    cfg.min_radius = 1.5;
    cfg.max_radius = 3.0;
    return data::generate_synthetic(cfg).first;
}

}  // namespace

TEST(Bce, MatchesOracleAndKnownValues) {
    Tensor<double> p({1, 1, 1, 2}, std::vector<double>{0.5, 0.5});
    Tensor<double> t({1, 1, 1, 2}, std::vector<double>{1.0, 0.0});
    EXPECT_NEAR(bce_loss(p, t).item(), std::log(2.0), 1e-15);

    Rng rng(1);
    auto q = random_tensor<double>({2, 1, 3, 3}, rng, 0.0, 1.0);
    std::vector<double> tv(18);
    for (double& v : tv) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    Tensor<double> target({2, 1, 3, 3}, tv);
    EXPECT_NEAR(bce_loss(q, target).item(), oracle::bce(as_double(q), tv), 1e-14);
}

TEST(Bce, ClampsAtTheExtremes) {
    Tensor<double> p({1, 1, 1, 2}, std::vector<double>{0.0, 1.0});
    Tensor<double> agree({1, 1, 1, 2}, std::vector<double>{0.0, 1.0});
    Tensor<double> disagree({1, 1, 1, 2}, std::vector<double>{1.0, 0.0});
    const double small = bce_loss(p, agree).item();
    EXPECT_GE(small, 0.0);
    EXPECT_LT(small, 1e-6);
    EXPECT_NEAR(bce_loss(p, disagree).item(), -std::log(kBceClampEps), 1e-9);
    EXPECT_THROW(bce_loss(p, Tensor<double>({1, 1, 2, 1})), ShapeError);
}

TEST(Bce, SaturatedPredictionStillGetsAGradient) {
    Tensor<double> p({1, 1, 1, 1}, 0.0);
    p.set_requires_grad(true);
    bce_loss(p, Tensor<double>({1, 1, 1, 1}, 1.0)).backward();
    EXPECT_LT(p.grad()[0], 0.0);
}

TEST(Adam, MatchesScalarOracleTrajectory) {
    TrainConfig cfg;
    cfg.learning_rate = 0.01;
    Tensor<double> w({1, 1, 1, 3}, std::vector<double>{0.5, -1.0, 2.0});
    w.set_requires_grad(true);
    std::vector<Tensor<double>> params{w};
    AdamState<double> state;
    Rng rng(2);
    std::vector<std::vector<double>> grads(3);
    for (int step = 0; step < 25; ++step) {
        w.zero_grad();
        std::vector<double> g{rng.normal(), rng.normal(), rng.normal()};
        for (std::size_t i = 0; i < 3; ++i) grads[i].push_back(g[i]);
        weighted_sum(w, g).backward();
        adam_step<double>(params, state, cfg);
    }
    const std::vector<double> start{0.5, -1.0, 2.0};
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_NEAR(w.values()[i], oracle::adam(start[i], grads[i], 0.01, 0.9, 0.999, 1e-8), 1e-12);
    }
    EXPECT_EQ(state.t, 25u);
}

TEST(Adam, RefusesParametersWithoutGradient) {
    Tensor<double> w({1, 1, 1, 1}, 1.0);
    w.set_requires_grad(true);
    std::vector<Tensor<double>> params{w};
    AdamState<double> state;
    EXPECT_THROW(adam_step<double>(params, state, TrainConfig{}), Error);
}

TEST(TrainConfig, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.learning_rate = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.threshold = 1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.adam_beta2 = 1.0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(EpochOrder, IsADeterministicPermutation) {
    auto a = epoch_order(50, 7, 1), b = epoch_order(50, 7, 1), c = epoch_order(50, 7, 2);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
    std::sort(c.begin(), c.end());
    for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(c[i], i);
}

TEST(Train, SameSeedGivesIdenticalHistoryAndWeights) {
    const auto samples = tiny_dataset(6, 3);
    std::span<const data::Sample> tr(samples.data(), 4), va(samples.data() + 4, 2);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.seed = 5;
    cfg.record_time = false;
    auto run = [&] {
        auto net = build_variant<float>(NetworkVariant::kiunet, {4, 8}, 2, cfg.seed);
        return train<float>(net, tr, va, cfg);
    };
    auto r1 = run(), r2 = run();
    EXPECT_EQ(r1.history.csv(), r2.history.csv());
    for (std::size_t i = 0; i < r1.final_checkpoint.size(); ++i) {
        auto a = r1.final_checkpoint[i].tensor.values(), b = r2.final_checkpoint[i].tensor.values();
        EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << r1.final_checkpoint[i].name;
    }
    EXPECT_EQ(r1.history.epochs.size(), 2u);
    EXPECT_TRUE(r1.history.epochs[1].val_dice.has_value());
    EXPECT_EQ(r1.history.epochs[0].seconds, 0.0);
}

TEST(Train, HistoryCsvFormat) {
    TrainHistory h;
    h.epochs.push_back({1, 0.5, 0.25, std::nullopt, 0.0});
    h.epochs.push_back({2, 0.125, std::nullopt, std::nullopt, 1.5});
    EXPECT_EQ(h.csv(),
              "epoch,train_loss,val_dice,val_jaccard,seconds\n"
              "1,0.5,0.25,,0\n"
              "2,0.125,,,1.5\n");
}

TEST(Train, LossDecreasesOnASmallSet) {
    const auto samples = tiny_dataset(4, 8);
    TrainConfig cfg;
    cfg.epochs = 8;
    cfg.learning_rate = 3e-3;
    cfg.record_time = false;
    auto net = build_variant<float>(NetworkVariant::uc_sk, {8, 16}, 2, 1);
    auto r = train<float>(net, samples, {}, cfg);
    EXPECT_LT(r.history.epochs.back().train_loss, r.history.epochs.front().train_loss);
    EXPECT_FALSE(r.best_epoch.has_value());
    EXPECT_FALSE(r.best_checkpoint.empty());
}

TEST(Train, BestCheckpointFollowsValidationDice) {
    const auto samples = tiny_dataset(6, 4);
    std::span<const data::Sample> tr(samples.data(), 4), va(samples.data() + 4, 2);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.record_time = false;
    auto net = build_variant<float>(NetworkVariant::uc_sk, {4, 8}, 2, 2);
    auto r = train<float>(net, tr, va, cfg);
    ASSERT_TRUE(r.best_epoch.has_value());
    double best = -1.0;
    std::size_t best_epoch = 0;
    for (const auto& e : r.history.epochs) {
        if (*e.val_dice > best) {
            best = *e.val_dice;
            best_epoch = e.epoch;
        }
    }
    EXPECT_EQ(*r.best_epoch, best_epoch);
}

TEST(Train, DivergenceIsReported) {
    const auto samples = tiny_dataset(2, 9);
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.learning_rate = 1e30;
    auto net = build_variant<float>(NetworkVariant::uc, {4, 8}, 2, 1);
    try {
        train<float>(net, samples, {}, cfg);
        FAIL() << "expected divergence";
    } catch (const TrainingDivergedError& e) {
        EXPECT_GE(e.epoch(), 1u);
        EXPECT_NE(std::string(e.what()).find("diverged"), std::string::npos);
    }
}

TEST(Evaluate, PerfectAndEmptyPredictions) {
    // A network whose head bias dominates predicts a constant mask.
    const auto samples = tiny_dataset(3, 5);
    auto net = build_variant<double>(NetworkVariant::uc, {4, 8}, 2, 0);
    for (auto& p : net.parameters()) {
        for (double& v : p.tensor.mutable_values()) v = 0.0;
        if (p.name == "head.bias") p.tensor.mutable_values()[0] = -50.0;
    }
    auto report = evaluate(net, samples, 0.5);
    ASSERT_EQ(report.rows.size(), 3u);
    for (const auto& r : report.rows) EXPECT_EQ(r.dice, 0.0);  // samples always have foreground
    EXPECT_EQ(report.dice.mean, 0.0);
}
