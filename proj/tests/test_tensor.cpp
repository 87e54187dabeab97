#include <gtest/gtest.h>

#include "helpers.hpp"
#include "kiunet/errors.hpp"
#include "kiunet/ops.hpp"
#include "kiunet/tensor.hpp"

using namespace kiunet;

TEST(Tensor, ConstructionChecksValueCount) {
    EXPECT_THROW(Tensor<double>(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    EXPECT_THROW(Tensor<float>(Shape{1, 0, 2, 2}), ShapeError);
    Tensor<float> t(Shape{2, 3, 4, 5}, 1.5f);
    EXPECT_EQ(t.numel(), 120u);
    EXPECT_EQ(t.at(1, 2, 3, 4), 1.5f);
    EXPECT_EQ(Tensor<double>::precision(), Precision::double_);
    EXPECT_EQ(Tensor<float>::precision(), Precision::single);
}

TEST(Tensor, OnlyLeavesAreMutable) {
    Tensor<double> a(Shape{1, 1, 2, 2}, 1.0);
    a.set_requires_grad(true);
    Tensor<double> b = relu(a);
    EXPECT_FALSE(b.is_leaf());
    EXPECT_EQ(b.op_kind(), OpKind::relu);
    EXPECT_THROW(b.mutable_values(), Error);
    EXPECT_THROW(b.set_requires_grad(false), Error);
    EXPECT_NO_THROW(a.mutable_values()[0] = 2.0);
}

TEST(Tensor, BackwardNeedsScalarOrSeed) {
    Tensor<double> a(Shape{1, 1, 2, 2}, 1.0);
    a.set_requires_grad(true);
    Tensor<double> b = relu(a);
    EXPECT_THROW(b.backward(), ShapeError);
    std::vector<double> wrong(3, 1.0);
    EXPECT_THROW(b.backward(wrong), ShapeError);
    Tensor<double> c(Shape{}, 1.0);
    EXPECT_THROW(c.backward(), Error);  // does not require grad
}

TEST(Tensor, SharedSubexpressionSumsGradients) {
    // y = sum(x + x) -> dy/dx = 2
    Tensor<double> x(Shape{1, 1, 1, 3}, std::vector<double>{1, -2, 3});
    x.set_requires_grad(true);
    Tensor<double> y = sum(add(x, x));
    y.backward();
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 2.0);
}

TEST(Tensor, DiamondGraphVisitsEachNodeOnce) {
    // r = relu(x); y = sum(r + r) with r shared -> grad 2 where x > 0
    Tensor<double> x(Shape{1, 1, 1, 4}, std::vector<double>{1, -1, 2, -2});
    x.set_requires_grad(true);
    Tensor<double> r = relu(x);
    sum(add(r, r)).backward();
    const std::vector<double> expected{2, 0, 2, 0};
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], expected[i]);
}

TEST(Tensor, LeafGradientsAccumulateAcrossBackwardCalls) {
    Tensor<double> x(Shape{1, 1, 1, 2}, std::vector<double>{1, 2});
    x.set_requires_grad(true);
    Tensor<double> y = sum(x);
    y.backward();
    y.backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
    x.zero_grad();
    EXPECT_FALSE(x.has_grad());
    y.backward();
    EXPECT_DOUBLE_EQ(x.grad()[1], 1.0);
}

TEST(Tensor, NoGradGuardSkipsRecording) {
    Tensor<double> x(Shape{1, 1, 1, 2}, 1.0);
    x.set_requires_grad(true);
    {
        NoGradGuard guard;
        Tensor<double> y = relu(x);
        EXPECT_FALSE(y.requires_grad());
        EXPECT_TRUE(y.is_leaf());
    }
    EXPECT_TRUE(relu(x).requires_grad());
}

TEST(Tensor, DetachCopiesValues) {
    Tensor<double> x(Shape{1, 1, 1, 2}, 1.0);
    x.set_requires_grad(true);
    Tensor<double> d = x.detach();
    EXPECT_FALSE(d.requires_grad());
    EXPECT_FALSE(d.same_storage(x));
    d.mutable_values()[0] = 5.0;
    EXPECT_DOUBLE_EQ(x.values()[0], 1.0);
}

TEST(Tensor, CastRoundTrip) {
    Tensor<double> x(Shape{1, 1, 1, 3}, std::vector<double>{0.5, -0.25, 3.0});
    Tensor<float> f = tensor_cast<float>(x);
    Tensor<double> back = tensor_cast<double>(f);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(back.values()[i], x.values()[i]);
}

TEST(Tensor, NonFiniteResultsAreRejected) {
    Tensor<float> big(Shape{1, 1, 1, 2}, 3e38f);
    EXPECT_THROW(add(big, big), NumericError);
}
