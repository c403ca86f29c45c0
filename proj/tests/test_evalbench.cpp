#include "biprompt/evalbench.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>
#include <map>

#include "biprompt/rng.hpp"

using namespace biprompt;

namespace {

// Independent CMI oracle via the entropy identity
// I(S;Y|C) = H(S,C) + H(Y,C) - H(S,Y,C) - H(C), plug-in counts throughout.
double cmi_entropy_oracle(const std::vector<int>& s, const std::vector<int>& y,
                          const std::vector<int>& c) {
  const double n = static_cast<double>(s.size());
  auto entropy = [n](const std::map<std::vector<int>, int>& counts) {
    double h = 0.0;
    for (const auto& [key, cnt] : counts) {
      double p = cnt / n;
      h -= p * std::log(p);
    }
    return h;
  };
  std::map<std::vector<int>, int> sc, yc, syc, cc;
  for (std::size_t i = 0; i < s.size(); ++i) {
    sc[{s[i], c[i]}] += 1;
    yc[{y[i], c[i]}] += 1;
    syc[{s[i], y[i], c[i]}] += 1;
    cc[{c[i]}] += 1;
  }
  return entropy(sc) + entropy(yc) - entropy(syc) - entropy(cc);
}

GroupedExample tiny_example(int cls, int spur) {
  GroupedExample ex;
  ex.image = make_image(8, 8, 0.5);
  ex.class_label = cls;
  ex.spurious_label = spur;
  return ex;
}

}  // namespace

TEST_CASE("rho pins the alignment rate of generated datasets") {
  BiasSpec spec;
  spec.noise = 0.0;

  spec.rho = 1.0;
  for (const auto& ex : generate_dataset(spec, 200)) CHECK(ex.spurious_label == ex.class_label);

  spec.rho = 0.0;
  for (const auto& ex : generate_dataset(spec, 200)) CHECK(ex.spurious_label != ex.class_label);

  spec.rho = 0.9;
  auto data = generate_dataset(spec, 10000);
  int aligned = 0;
  for (const auto& ex : data) aligned += ex.spurious_label == ex.class_label ? 1 : 0;
  double frac = aligned / 10000.0;
  CHECK(frac > 0.88);
  CHECK(frac < 0.92);
}

TEST_CASE("generation is deterministic given the seed") {
  BiasSpec spec;
  auto a = generate_dataset(spec, 50);
  auto b = generate_dataset(spec, 50);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].class_label == b[i].class_label);
    CHECK(a[i].spurious_label == b[i].spurious_label);
    REQUIRE(a[i].image.pixels == b[i].image.pixels);
  }
}

TEST_CASE("generated images carry the declared geometry") {
  BiasSpec spec;
  spec.noise = 0.0;
  auto data = generate_dataset(spec, 10);
  const int mid = spec.image_size / 2;
  for (const auto& ex : data) {
    CHECK_NOTHROW(validate_image(ex.image));
    // Center pixel belongs to the class patch, corners to the border band,
    // and the ring between them stays at the base level.
    bool center_marked = false;
    for (int c = 0; c < kImageChannels; ++c)
      center_marked |= std::abs(ex.image.at(c, mid, mid) - spec.base_level) > 0.05;
    CHECK(center_marked);
    double corner = ex.image.at(1, 0, 0);
    CHECK((corner == spec.texture_low || corner == spec.texture_high));
    CHECK(ex.image.at(0, spec.border_width + 1, spec.border_width + 1) == spec.base_level);
  }
}

TEST_CASE("bias spec validation rejects bad configurations") {
  BiasSpec spec;
  spec.rho = 1.5;
  CHECK_THROWS_AS(validate_bias_spec(spec), InvalidInputError);
  spec = BiasSpec{};
  spec.num_spurious = 3;
  CHECK_THROWS_AS(validate_bias_spec(spec), InvalidInputError);
  spec = BiasSpec{};
  spec.patch_size = 30;
  CHECK_THROWS_AS(validate_bias_spec(spec), InvalidInputError);
  spec = BiasSpec{};
  CHECK_THROWS_AS(generate_dataset(spec, 3), InvalidInputError);
}

TEST_CASE("average accuracy counts correct predictions") {
  std::vector<GroupedExample> ex = {tiny_example(0, 0), tiny_example(1, 1), tiny_example(0, 1),
                                    tiny_example(1, 0)};
  CHECK(average_accuracy({0, 1, 0, 1}, ex) == 1.0);
  CHECK(average_accuracy({1, 0, 1, 0}, ex) == 0.0);
  CHECK(average_accuracy({0, 1, 0, 0}, ex) == 0.75);
  CHECK_THROWS_AS(average_accuracy({0, 1}, ex), InvalidInputError);
  CHECK_THROWS_AS(average_accuracy({}, {}), InvalidInputError);
}

TEST_CASE("worst-group accuracy selects the minimum with lowest-id ties") {
  std::vector<GroupedExample> ex;
  std::vector<int> preds;
  // Group (0,0): 2/2, (0,1): 0/1, (1,0): 1/1, (1,1): 1/1.
  ex.push_back(tiny_example(0, 0)); preds.push_back(0);
  ex.push_back(tiny_example(0, 0)); preds.push_back(0);
  ex.push_back(tiny_example(0, 1)); preds.push_back(1);
  ex.push_back(tiny_example(1, 0)); preds.push_back(1);
  ex.push_back(tiny_example(1, 1)); preds.push_back(1);

  auto wg = worst_group_accuracy(preds, ex, 2);
  CHECK(wg.accuracy == 0.0);
  CHECK(wg.group_id == 1);  // class 0, spurious 1

  // All perfect: worst is 1.0 and the lowest group id wins the tie.
  auto perfect = worst_group_accuracy({0, 0, 0, 1, 1}, ex, 2);
  CHECK(perfect.accuracy == 1.0);
  CHECK(perfect.group_id == 0);

  // Two groups tied at 0.5: lower id reported.
  std::vector<GroupedExample> ex2 = {tiny_example(0, 0), tiny_example(0, 0), tiny_example(1, 1),
                                     tiny_example(1, 1)};
  auto tie = worst_group_accuracy({0, 1, 1, 0}, ex2, 2);
  CHECK(tie.accuracy == 0.5);
  CHECK(tie.group_id == 0);

  CHECK_THROWS_AS(worst_group_accuracy({}, {}), InvalidInputError);
}

TEST_CASE("CMI is zero when predictions mirror the causal label") {
  std::vector<int> cls = {0, 0, 1, 1, 0, 1, 0, 1};
  std::vector<int> spur = {0, 1, 0, 1, 1, 0, 0, 1};
  CHECK(std::abs(conditional_mutual_information(spur, cls, cls)) < 1e-12);
}

TEST_CASE("CMI matches the hand-built single-class table") {
  // Within the only class, predictions equal the spurious label, S=2
  // balanced: contribution log 2.
  std::vector<int> cls = {0, 0, 0, 0};
  std::vector<int> spur = {0, 1, 0, 1};
  CHECK(conditional_mutual_information(spur, spur, cls) ==
        Catch::Approx(std::log(2.0)).epsilon(1e-12));

  // Adding a second class whose predictions ignore the spurious label
  // halves the weight of that contribution.
  std::vector<int> cls2 = {0, 0, 0, 0, 1, 1, 1, 1};
  std::vector<int> spur2 = {0, 1, 0, 1, 0, 1, 0, 1};
  std::vector<int> preds2 = {0, 1, 0, 1, 7, 7, 7, 7};
  CHECK(conditional_mutual_information(spur2, preds2, cls2) ==
        Catch::Approx(0.5 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("CMI of a single example is zero") {
  CHECK(conditional_mutual_information({3}, {1}, {0}) == 0.0);
  CHECK_THROWS_AS(conditional_mutual_information({}, {}, {}), InvalidInputError);
  CHECK_THROWS_AS(conditional_mutual_information({1}, {1, 2}, {1}), InvalidInputError);
}

TEST_CASE("CMI equals the entropy-identity oracle on random inputs") {
  SeededRng rng(1001);
  for (int trial = 0; trial < 50; ++trial) {
    int n = 1 + static_cast<int>(rng.uniform_int(1000));
    int cs = 2 + static_cast<int>(rng.uniform_int(4));
    int ss = 2 + static_cast<int>(rng.uniform_int(4));
    int ys = 2 + static_cast<int>(rng.uniform_int(4));
    std::vector<int> s(n), y(n), c(n);
    for (int i = 0; i < n; ++i) {
      c[i] = static_cast<int>(rng.uniform_int(cs));
      s[i] = static_cast<int>(rng.uniform_int(ss));
      y[i] = rng.uniform() < 0.5 ? s[i] : static_cast<int>(rng.uniform_int(ys));
    }
    double plug_in = conditional_mutual_information(s, y, c);
    double oracle = cmi_entropy_oracle(s, y, c);
    CHECK(std::abs(plug_in - oracle) < 1e-12);
    CHECK(plug_in >= -1e-12);
  }
}

TEST_CASE("CMI is invariant to relabeling the spurious alphabet") {
  SeededRng rng(2002);
  int n = 400;
  std::vector<int> s(n), y(n), c(n);
  for (int i = 0; i < n; ++i) {
    c[i] = static_cast<int>(rng.uniform_int(3));
    s[i] = static_cast<int>(rng.uniform_int(3));
    y[i] = rng.uniform() < 0.6 ? s[i] : static_cast<int>(rng.uniform_int(3));
  }
  std::vector<int> perm = {2, 0, 1};
  std::vector<int> s2(n);
  for (int i = 0; i < n; ++i) s2[i] = perm[s[i]];
  CHECK(conditional_mutual_information(s, y, c) ==
        Catch::Approx(conditional_mutual_information(s2, y, c)).epsilon(1e-12));
}

TEST_CASE("dataset export/import round-trips labels and pixels") {
  BiasSpec spec;
  spec.seed = 77;
  auto data = generate_dataset(spec, 12);
  auto dir = (std::filesystem::temp_directory_path() / "biprompt_ds_test").string();
  std::filesystem::remove_all(dir);
  export_dataset(data, dir);
  auto loaded = import_dataset(dir);
  REQUIRE(loaded.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(loaded[i].class_label == data[i].class_label);
    CHECK(loaded[i].spurious_label == data[i].spurious_label);
    REQUIRE(loaded[i].image.pixels.size() == data[i].image.pixels.size());
    for (std::size_t p = 0; p < data[i].image.pixels.size(); ++p)
      CHECK(std::abs(loaded[i].image.pixels[p] - data[i].image.pixels[p]) <= 0.5 / 255.0 + 1e-9);
  }
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(import_dataset(dir), InvalidInputError);
}
