#include <gtest/gtest.h>

#include "ptrojan/tensor.hpp"
#include "test_util.hpp"

using namespace ptrojan;
using ptrojan::testing::random_tensor;

TEST(Tensor, DataLengthMustMatchShape) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_EQ(Tensor({2, 3}).size(), 6u);
}

TEST(Tensor, MatmulAgainstNaiveTripleLoop) {
  // odd sizes exercise the partial row blocks and column strips
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {5, 7, 33}, {9, 64, 70}, {4, 3, 32}}) {
    const Tensor a = random_tensor(m, k, 1), b = random_tensor(k, n, 2);
    const Tensor c = kernels::matmul(a, b);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
        EXPECT_NEAR(c.at(i, j), s, 1e-12);
      }
  }
}

TEST(Tensor, MatmulSkipsZeroRowsWithoutChangingResult) {
  Tensor a = random_tensor(6, 5, 3);
  for (std::size_t j = 0; j < 5; ++j) a.at(2, j) = 0.0;
  const Tensor b = random_tensor(5, 40, 4);
  const Tensor c = kernels::matmul(a, b);
  for (std::size_t j = 0; j < 40; ++j) EXPECT_EQ(c.at(2, j), 0.0);
}

TEST(Tensor, TransposeTwiceIsIdentity) {
  const Tensor a = random_tensor(3, 7, 5);
  EXPECT_EQ(kernels::transpose(kernels::transpose(a)), a);
}
