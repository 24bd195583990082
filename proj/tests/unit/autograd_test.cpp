#include <gtest/gtest.h>

#include "segkit/ops.hpp"
#include "test_util.hpp"

using namespace segkit;

TEST(Autograd, SharedSubexpressionAccumulates) {
  const Var x(Tensor(Shape{1}, 3.0), true);
  const Var y = ops::mul(x, x);       // x^2
  const Var z = ops::add(y, ops::mul(y, x));  // x^2 + x^3
  ops::sum(z).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 2 * 3.0 + 3 * 9.0);
}

TEST(Autograd, LeafGradientsAccumulateAcrossCalls) {
  Var x(Tensor(Shape{2}, 1.0), true);
  ops::sum(ops::scale(x, 2.0)).backward();
  ops::sum(ops::scale(x, 3.0)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
  x.zero_grad();
  EXPECT_TRUE(x.grad().empty() || x.grad()[0] == 0.0);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  const Var x(Tensor(Shape{2}, 1.0), true);
  Var y;
  {
    NoGradGuard g;
    EXPECT_FALSE(grad_enabled());
    y = ops::scale(x, 2.0);
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, DetachBlocksGradient) {
  const Var x(Tensor(Shape{1}, 2.0), true);
  ops::sum(ops::add(x, ops::detach(ops::mul(x, x)))).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
}

TEST(Autograd, BackwardNeedsScalar) {
  const Var x(Tensor(Shape{2}, 1.0), true);
  EXPECT_THROW(ops::scale(x, 2.0).backward(), std::exception);
}

TEST(Autograd, DeepChainDoesNotOverflowStack) {
  Var x(Tensor(Shape{1}, 1.0), true);
  Var y = x;
  for (int i = 0; i < 20000; ++i) y = ops::scale(y, 1.0);
  ops::sum(y).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
}
