#include "biprompt/core.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "biprompt/rng.hpp"

using namespace biprompt;

namespace {

Vec random_unit(SeededRng& rng, int d) {
  Vec v(d);
  for (double& x : v) x = rng.gaussian();
  return normalized(v);
}

Vec random_distribution(SeededRng& rng, int c) {
  Vec p(c);
  double sum = 0.0;
  for (double& x : p) {
    x = rng.uniform() + 1e-6;
    sum += x;
  }
  for (double& x : p) x /= sum;
  return p;
}

}  // namespace

TEST_CASE("cosine_similarity matches hand-evaluated cases") {
  Vec e1 = {1.0, 0.0};
  Vec e2 = {0.0, 1.0};
  Vec v = {0.6, 0.8};

  CHECK(cosine_similarity(e1, e1) == Catch::Approx(1.0));
  CHECK(cosine_similarity(e1, e2) == Catch::Approx(0.0).margin(1e-15));
  CHECK(cosine_similarity(e1, v) == Catch::Approx(0.6));
  CHECK(cosine_similarity(v, e1) == Catch::Approx(0.6));  // symmetry
}

TEST_CASE("cosine_similarity rejects bad inputs") {
  Vec a = {1.0, 0.0};
  Vec b = {1.0, 0.0, 0.0};
  Vec z = {0.0, 0.0};
  CHECK_THROWS_AS(cosine_similarity(a, b), InvalidInputError);
  CHECK_THROWS_AS(cosine_similarity(a, z), DegenerateInputError);
}

TEST_CASE("cosine_similarity ignores vector magnitude") {
  SeededRng rng(11);
  for (int i = 0; i < 50; ++i) {
    Vec a = random_unit(rng, 8);
    Vec b = random_unit(rng, 8);
    Vec a3(a);
    for (double& x : a3) x *= 3.7;
    CHECK(cosine_similarity(a3, b) == Catch::Approx(cosine_similarity(a, b)));
  }
}

TEST_CASE("predict is uniform when all similarities are equal") {
  Vec v = {1.0, 0.0, 0.0};
  // Prompts all at the same angle to v.
  std::vector<Vec> prompts = {{0.5, 0.5, std::sqrt(0.5)},
                              {0.5, std::sqrt(0.5), 0.5},
                              {0.5, -0.5, std::sqrt(0.5)}};
  auto p = predict(v, prompts, Temperature(17.0));
  for (double q : p) CHECK(q == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("predict matches the two-class closed form") {
  // Similarities (1, 0) at tau=1: softmax = (e/(e+1), 1/(e+1)).
  Vec v = {1.0, 0.0};
  std::vector<Vec> prompts = {{1.0, 0.0}, {0.0, 1.0}};
  auto p = predict(v, prompts, Temperature(1.0));
  double e = std::exp(1.0);
  CHECK(p[0] == Catch::Approx(e / (e + 1.0)).epsilon(1e-12));
  CHECK(p[1] == Catch::Approx(1.0 / (e + 1.0)).epsilon(1e-12));
  CHECK(p[0] == Catch::Approx(0.7311).margin(5e-5));
}

TEST_CASE("predict saturates at large tau") {
  Vec v = {1.0, 0.0};
  std::vector<Vec> prompts = {{1.0, 0.0}, {0.0, 1.0}};
  auto p = predict(v, prompts, Temperature(100.0));
  CHECK(std::abs(p[0] - 1.0) < 1e-9);
  CHECK(std::abs(p[1]) < 1e-9);
}

TEST_CASE("predict requires at least two classes") {
  Vec v = {1.0, 0.0};
  std::vector<Vec> one = {{1.0, 0.0}};
  CHECK_THROWS_AS(predict(v, one, Temperature(1.0)), InvalidTaskError);
}

TEST_CASE("predict output is a distribution with entries in (0,1)") {
  SeededRng rng(202);
  for (int trial = 0; trial < 200; ++trial) {
    int d = 3 + static_cast<int>(rng.uniform_int(13));
    int c = 2 + static_cast<int>(rng.uniform_int(7));
    Vec v = random_unit(rng, d);
    std::vector<Vec> prompts;
    for (int i = 0; i < c; ++i) prompts.push_back(random_unit(rng, d));
    auto p = predict(v, prompts, Temperature(0.1 + 30.0 * rng.uniform()));
    double sum = 0.0;
    for (double q : p) {
      CHECK(q > 0.0);
      CHECK(q < 1.0);
      sum += q;
    }
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
}

TEST_CASE("argmax of predict is invariant to tau") {
  SeededRng rng(303);
  for (int trial = 0; trial < 100; ++trial) {
    Vec v = random_unit(rng, 6);
    std::vector<Vec> prompts;
    for (int i = 0; i < 4; ++i) prompts.push_back(random_unit(rng, 6));
    int ref = argmax_lowest_tie(predict(v, prompts, Temperature(1.0)));
    for (double tau : {0.01, 0.5, 7.0, 100.0})
      CHECK(argmax_lowest_tie(predict(v, prompts, Temperature(tau))) == ref);
  }
}

TEST_CASE("predict is permutation-equivariant in the prompts") {
  SeededRng rng(404);
  Vec v = random_unit(rng, 5);
  std::vector<Vec> prompts;
  for (int i = 0; i < 5; ++i) prompts.push_back(random_unit(rng, 5));
  auto p = predict(v, prompts, Temperature(3.0));

  std::vector<int> perm = {3, 0, 4, 1, 2};
  std::vector<Vec> shuffled(prompts.size());
  for (std::size_t i = 0; i < perm.size(); ++i) shuffled[i] = prompts[perm[i]];
  auto q = predict(v, shuffled, Temperature(3.0));
  for (std::size_t i = 0; i < perm.size(); ++i)
    CHECK(q[i] == Catch::Approx(p[perm[i]]).epsilon(1e-12));
}

TEST_CASE("softmax is invariant to constant logit shifts") {
  SeededRng rng(505);
  for (int trial = 0; trial < 50; ++trial) {
    Vec logits(4);
    for (double& x : logits) x = rng.uniform(-5.0, 5.0);
    Vec shifted(logits);
    for (double& x : shifted) x += 123.456;
    auto a = softmax(logits);
    auto b = softmax(shifted);
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK(a[i] == Catch::Approx(b[i]).epsilon(1e-12));
  }
}

TEST_CASE("image constructor and validation enforce invariants") {
  CHECK_THROWS_AS(make_image(4, 32), InvalidInputError);
  auto img = make_image(8, 8, 0.5);
  CHECK_NOTHROW(validate_image(img));
  img.at(0, 0, 0) = 1.5;
  CHECK_THROWS_AS(validate_image(img), InvalidInputError);
  img.at(0, 0, 0) = -0.1;
  CHECK_THROWS_AS(validate_image(img), InvalidInputError);
}

TEST_CASE("temperature must be positive") {
  CHECK_THROWS_AS(Temperature(0.0), InvalidInputError);
  CHECK_THROWS_AS(Temperature(-1.0), InvalidInputError);
  CHECK(Temperature(2.5).tau == 2.5);
}

TEST_CASE("distribution helpers") {
  SeededRng rng(606);
  for (int i = 0; i < 20; ++i) CHECK(is_distribution(random_distribution(rng, 5)));
  CHECK_FALSE(is_distribution({0.5, 0.6}));
  CHECK_FALSE(is_distribution({-0.1, 1.1}));
  CHECK(argmax_lowest_tie({0.5, 0.5}) == 0);
  CHECK(argmax_lowest_tie({0.2, 0.5, 0.3}) == 1);
  CHECK(argmax_lowest_tie({0.7, 0.3}) == 0);
}
