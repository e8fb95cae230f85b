#include <doctest.h>

#include <cmath>
#include <vector>

#include "gcvs/common.hpp"
#include "gcvs/rng.hpp"

using gcvs::RngStream;

TEST_CASE("streams are deterministic and de-correlated") {
  RngStream a(42, 7), b(42, 7), c(42, 8);
  for (int i = 0; i < 100; ++i) {
    const auto va = a.next_u64();
    CHECK(va == b.next_u64());
  }
  int same = 0;
  RngStream a2(42, 7);
  for (int i = 0; i < 100; ++i) {
    if (a2.next_u64() == c.next_u64()) ++same;
  }
  CHECK(same == 0);
}

TEST_CASE("split streams do not depend on parent consumption") {
  RngStream parent(1, 0);
  const auto child_first = parent.split(3).next_u64();
  parent.next_u64();
  parent.next_u64();
  CHECK(parent.split(3).next_u64() == child_first);
  CHECK(parent.split(4).next_u64() != child_first);
}

TEST_CASE("uniform stays strictly inside (0,1) with the right moments") {
  RngStream rng(2024);
  double sum = 0.0, sum2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    CHECK(u > 0.0);
    CHECK(u < 1.0);
    sum += u;
    sum2 += u * u;
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  CHECK(std::fabs(mean - 0.5) < 0.005);
  CHECK(std::fabs(var - 1.0 / 12.0) < 0.005);
}

TEST_CASE("normal draws match the first two moments") {
  RngStream rng(7);
  double sum = 0.0, sum2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    sum += z;
    sum2 += z * z;
  }
  CHECK(std::fabs(sum / n) < 0.01);
  CHECK(std::fabs(sum2 / n - 1.0) < 0.02);
}

TEST_CASE("normal quantile hits reference values") {
  CHECK(gcvs::normal_quantile(0.975) == doctest::Approx(1.959963985).epsilon(1e-9));
  CHECK(gcvs::normal_quantile(0.95) == doctest::Approx(1.644853627).epsilon(1e-9));
  CHECK(gcvs::normal_quantile(0.5) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(gcvs::normal_quantile(0.025) ==
        doctest::Approx(-1.959963985).epsilon(1e-9));
  // round-trip far in the tail
  CHECK(gcvs::normal_quantile(1e-10) == doctest::Approx(-6.361340902).epsilon(1e-6));
}

TEST_CASE("below respects bounds and shuffle is deterministic") {
  RngStream rng(9);
  for (int i = 0; i < 1000; ++i) {
    CHECK(rng.below(10) < 10);
  }
  std::vector<int> v1{1, 2, 3, 4, 5, 6, 7, 8};
  std::vector<int> v2 = v1;
  RngStream s1(5, 1), s2(5, 1);
  s1.shuffle(v1);
  s2.shuffle(v2);
  CHECK(v1 == v2);
}
