#include "biprompt/debias.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "biprompt/core.hpp"
#include "biprompt/rng.hpp"

using namespace biprompt;

namespace {

Vec random_unit(SeededRng& rng, int d) {
  Vec v(d);
  for (double& x : v) x = rng.gaussian();
  return normalized(v);
}

AttentionMap constant_map(int h, int w, double value) {
  AttentionMap map;
  map.height = h;
  map.width = w;
  map.weights.assign(static_cast<std::size_t>(h) * w, value);
  return map;
}

ImageView random_image(SeededRng& rng, int h, int w) {
  ImageView img = make_image(h, w);
  for (double& v : img.pixels) v = rng.uniform();
  return img;
}

double mean_pairwise_cosine(const std::vector<Vec>& vs) {
  double acc = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < vs.size(); ++i)
    for (std::size_t j = i + 1; j < vs.size(); ++j) {
      acc += cosine_similarity(vs[i], vs[j]);
      ++n;
    }
  return acc / n;
}

}  // namespace

TEST_CASE("split_views matches the masking identities") {
  SeededRng rng(1);
  auto img = random_image(rng, 16, 16);

  auto [fg1, bg1] = split_views(img, constant_map(16, 16, 1.0));
  CHECK(fg1.pixels == img.pixels);
  for (double v : bg1.pixels) CHECK(v == 0.0);
  CHECK(fg1.tag == ViewTag::Foreground);
  CHECK(bg1.tag == ViewTag::Background);

  auto [fg5, bg5] = split_views(img, constant_map(16, 16, 0.5));
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    CHECK(fg5.pixels[i] == Catch::Approx(img.pixels[i] / 2.0).margin(1e-15));
    CHECK(bg5.pixels[i] == Catch::Approx(img.pixels[i] / 2.0).margin(1e-15));
  }
}

TEST_CASE("split_views reconstructs the original image") {
  SeededRng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    auto img = random_image(rng, 16, 16);
    AttentionMap map = constant_map(16, 16, 0.0);
    for (double& v : map.weights) v = rng.uniform();
    auto [fg, bg] = split_views(img, map);
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
      CHECK(std::abs(fg.pixels[i] + bg.pixels[i] - img.pixels[i]) <= 1e-7);
  }
}

TEST_CASE("split_views rejects mismatched shapes") {
  SeededRng rng(3);
  auto img = random_image(rng, 16, 16);
  CHECK_THROWS_AS(split_views(img, constant_map(8, 16, 0.5)), InvalidInputError);
}

TEST_CASE("prompt normalization is the identity at alpha=1 with unit scale") {
  SeededRng rng(4);
  std::vector<Vec> base;
  for (int i = 0; i < 4; ++i) base.push_back(random_unit(rng, 8));
  PromptSet ps = make_prompt_set(base);
  ps.alpha_raw = 50.0;  // logistic(50) rounds to 1.0 in double precision
  auto out = normalize_prompts(ps);
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 8; ++i) CHECK(std::abs(out[c][i] - base[c][i]) <= 1e-12);
}

TEST_CASE("prompt normalization collapses to the centroid at alpha=0") {
  SeededRng rng(5);
  std::vector<Vec> base;
  for (int i = 0; i < 3; ++i) base.push_back(random_unit(rng, 6));
  auto out = normalize_prompts_with(base, 0.0, Vec(6, 1.0));
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t j = i + 1; j < out.size(); ++j)
      CHECK(cosine_similarity(out[i], out[j]) == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("prompt normalization matches the two-class hand evaluation") {
  // f1=(1,0), f2=(0,1), alpha=0.5: pre-normalization vectors (0.75,0.25)
  // and (0.25,0.75); their cosine is 0.375/0.625 = 0.6.
  std::vector<Vec> base = {{1.0, 0.0}, {0.0, 1.0}};
  auto out = normalize_prompts_with(base, 0.5, Vec(2, 1.0));
  Vec expected0 = normalized(Vec{0.75, 0.25});
  CHECK(out[0][0] == Catch::Approx(expected0[0]).epsilon(1e-12));
  CHECK(out[0][1] == Catch::Approx(expected0[1]).epsilon(1e-12));
  CHECK(cosine_similarity(out[0], out[1]) == Catch::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("mean pairwise cosine is non-decreasing as alpha falls") {
  SeededRng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Vec> base;
    for (int i = 0; i < 5; ++i) base.push_back(random_unit(rng, 12));
    double prev = mean_pairwise_cosine(normalize_prompts_with(base, 1.0, Vec(12, 1.0)));
    for (double alpha : {0.8, 0.6, 0.4, 0.2, 0.05, 0.0}) {
      double cur = mean_pairwise_cosine(normalize_prompts_with(base, alpha, Vec(12, 1.0)));
      CHECK(cur >= prev - 1e-12);
      prev = cur;
    }
    CHECK(prev == Catch::Approx(1.0).margin(1e-9));
  }
}

TEST_CASE("prompt normalization keeps outputs unit-norm under scale") {
  SeededRng rng(7);
  std::vector<Vec> base;
  for (int i = 0; i < 3; ++i) base.push_back(random_unit(rng, 10));
  Vec scale(10);
  for (double& v : scale) v = 0.2 + 2.0 * rng.uniform();
  auto out = normalize_prompts_with(base, 0.7, scale);
  for (const auto& v : out) CHECK(std::abs(norm(v) - 1.0) < 1e-12);
}

TEST_CASE("prompt normalization reports degenerate collapse") {
  // Antipodal prompts have a zero centroid, so alpha=0 collapses everything.
  std::vector<Vec> base = {{1.0, 0.0}, {-1.0, 0.0}};
  CHECK_THROWS_AS(normalize_prompts_with(base, 0.0, Vec(2, 1.0)), DegenerateCollapseError);
}

TEST_CASE("make_prompt_set validates inputs and initializes alpha") {
  SeededRng rng(8);
  std::vector<Vec> base = {random_unit(rng, 4), random_unit(rng, 4)};
  PromptSet ps = make_prompt_set(base, 0.9);
  CHECK(ps.alpha() == Catch::Approx(0.9).epsilon(1e-12));
  CHECK(ps.scale == Vec(4, 1.0));
  CHECK_THROWS_AS(make_prompt_set({base[0]}), InvalidTaskError);
  std::vector<Vec> bad = {Vec{1.0, 1.0}, Vec{0.0, 1.0}};
  CHECK_THROWS_AS(make_prompt_set(bad), InvalidInputError);
}

TEST_CASE("random_erase honors patch counts") {
  SeededRng rng(9);
  ImageView img = make_image(32, 32, 0.5);

  auto none = random_erase(img, 8, 0, 123);
  CHECK(none.pixels == img.pixels);
  CHECK(none.tag == ViewTag::RandomErased);

  auto all = random_erase(img, 8, 64, 123);
  for (double v : all.pixels) CHECK(v == 0.0);

  auto four = random_erase(img, 8, 4, 123);
  int zero_positions = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      bool z = four.at(0, y, x) == 0.0 && four.at(1, y, x) == 0.0 && four.at(2, y, x) == 0.0;
      zero_positions += z ? 1 : 0;
      if (!z)
        for (int c = 0; c < 3; ++c) CHECK(four.at(c, y, x) == 0.5);
    }
  CHECK(zero_positions == 4 * (32 / 8) * (32 / 8));
}

TEST_CASE("random_erase is reproducible and seed-sensitive") {
  SeededRng rng(10);
  auto img = random_image(rng, 32, 32);
  auto a = random_erase(img, 8, 4, 777);
  auto b = random_erase(img, 8, 4, 777);
  REQUIRE(a.pixels == b.pixels);
  auto c = random_erase(img, 8, 4, 778);
  CHECK(a.pixels != c.pixels);
}

TEST_CASE("random_erase center-crops to the grid") {
  SeededRng rng(11);
  auto img = random_image(rng, 35, 35);
  auto out = random_erase(img, 8, 0, 1);
  CHECK(out.height == 32);
  CHECK(out.width == 32);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) REQUIRE(out.at(c, y, x) == img.at(c, y + 1, x + 1));
}

TEST_CASE("random_erase rejects impossible requests") {
  ImageView img = make_image(32, 32, 0.5);
  CHECK_THROWS_AS(random_erase(img, 8, 65, 1), InvalidInputError);
  CHECK_THROWS_AS(random_erase(img, 8, -1, 1), InvalidInputError);
  CHECK_THROWS_AS(random_erase(img, 0, 0, 1), InvalidInputError);
  CHECK_THROWS_AS(random_erase(img, 33, 1, 1), InvalidInputError);
}

TEST_CASE("prompt state round-trips through the binary format") {
  SeededRng rng(12);
  std::vector<Vec> base = {random_unit(rng, 6), random_unit(rng, 6), random_unit(rng, 6)};
  PromptSet ps = make_prompt_set(base, 0.9);
  ps.alpha_raw = 0.31;
  for (double& v : ps.scale) v = 0.5 + rng.uniform();

  auto path = (std::filesystem::temp_directory_path() / "biprompt_state_test.bin").string();
  save_prompt_state(ps, path);
  PromptState state = load_prompt_state(path);
  std::remove(path.c_str());

  PromptSet fresh = make_prompt_set(base, 0.9);
  apply_prompt_state(fresh, state);
  CHECK(fresh.alpha_raw == ps.alpha_raw);
  CHECK(fresh.scale == ps.scale);

  // A different base must be rejected by the digest check.
  std::vector<Vec> other = {random_unit(rng, 6), random_unit(rng, 6), random_unit(rng, 6)};
  PromptSet mismatched = make_prompt_set(other, 0.9);
  CHECK_THROWS_AS(apply_prompt_state(mismatched, state), InvalidInputError);
}
