#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"

#include "lico/errors.hpp"
#include "lico/saliency.hpp"

using namespace lico;

namespace {

Image noise_image(std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  Image img(16, 16, 3);
  for (auto& p : img.pixels) p = dist(rng);
  return img;
}

bool same_values(const BasicTensor<float>& a, const BasicTensor<float>& b) {
  return std::equal(a.data().begin(), a.data().end(), b.data().begin(), b.data().end());
}

// Per layer: do the weights of `a` and `b` coincide exactly?
std::vector<bool> unchanged_layers(const ImageBranch<float>& a, const ImageBranch<float>& b) {
  std::vector<bool> out;
  for (std::size_t l = 0; l < a.convs().size(); ++l)
    out.push_back(same_values(a.convs()[l].weight, b.convs()[l].weight) &&
                  same_values(a.convs()[l].bias, b.convs()[l].bias));
  out.push_back(same_values(a.head().weight, b.head().weight) && same_values(a.head().bias, b.head().bias));
  return out;
}

}  // namespace

TEST_CASE("Grad-CAM arithmetic on a single map") {
  const std::vector<double> act{1, 2, 3, 4}, ones{1, 1, 1, 1};
  auto cam = cam_from_gradients(act, ones, 1, 4);
  min_max_normalize(cam);
  CHECK(cam[0] == doctest::Approx(0.0));
  CHECK(cam[1] == doctest::Approx(1.0 / 3.0));
  CHECK(cam[2] == doctest::Approx(2.0 / 3.0));
  CHECK(cam[3] == doctest::Approx(1.0));

  const std::vector<double> minus{-1, -1, -1, -1};
  auto dead = cam_from_gradients(act, minus, 1, 4);
  min_max_normalize(dead);
  for (const double v : dead) CHECK(v == 0.0);

  // Channel weights are spatial means of the gradient.
  const std::vector<double> two_act{1, 0, 0, 1, 0, 1, 1, 0};
  const std::vector<double> two_grad{2, 0, 0, 0, 0, 0, 0, 4};
  const auto mixed = cam_from_gradients(two_act, two_grad, 2, 4);
  CHECK(mixed == std::vector<double>{0.5, 1.0, 1.0, 0.5});
  CHECK_THROWS_AS(cam_from_gradients(act, ones, 2, 4), ShapeError);
}

TEST_CASE("bilinear upsampling") {
  SUBCASE("constants stay constant") {
    const auto up = upsample_bilinear(std::vector<double>(4, 0.3), 2, 2, 16, 16);
    for (const double v : up) CHECK(v == doctest::Approx(0.3).epsilon(1e-12));
  }
  SUBCASE("half-pixel centres") {
    const auto up = upsample_bilinear(std::vector<double>{0, 1, 2, 3}, 2, 2, 4, 4);
    // Source coordinates -0.25, 0.25, 0.75, 1.25 clamp to 0, 0.25, 0.75, 1.
    const double cx[] = {0.0, 0.25, 0.75, 1.0};
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) CHECK(up[y * 4 + x] == doctest::Approx(2.0 * cx[y] + cx[x]).epsilon(1e-12));
  }
  SUBCASE("a single peak stays in its cell") {
    for (std::size_t cell = 0; cell < 16; ++cell) {
      std::vector<double> coarse(16, 0.0);
      coarse[cell] = 1.0;
      const auto fine = upsample_bilinear(coarse, 4, 4, 16, 16);
      const auto fm = static_cast<std::size_t>(std::max_element(fine.begin(), fine.end()) - fine.begin());
      CHECK((fm / 16) / 4 == cell / 4);
      CHECK((fm % 16) / 4 == cell % 4);
    }
  }
  SUBCASE("values stay within the coarse range") {
    Rng rng(5);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    for (int k = 0; k < 200; ++k) {
      std::vector<double> coarse(16);
      for (auto& v : coarse) v = dist(rng);
      const auto fine = upsample_bilinear(coarse, 4, 4, 16, 16);
      const auto [clo, chi] = std::minmax_element(coarse.begin(), coarse.end());
      for (const double v : fine) CHECK((v >= *clo - 1e-12 && v <= *chi + 1e-12));
    }
  }
  CHECK_THROWS_AS(upsample_bilinear(std::vector<double>(3), 2, 2, 4, 4), ShapeError);
}

TEST_CASE("Grad-CAM maps stay in bounds") {
  EncoderConfig cfg;
  for (std::uint64_t k = 0; k < 1000; ++k) {
    const ImageBranch<float> model(cfg, k / 10);
    const auto map = grad_cam(model, noise_image(1000 + k), k % cfg.num_classes);
    REQUIRE(map.values.size() == 256);
    const auto [lo, hi] = std::minmax_element(map.values.begin(), map.values.end());
    const bool all_zero = *hi == 0.0;
    CHECK((all_zero || (*lo == 0.0 && *hi == 1.0)));
    for (const double v : map.values) CHECK(std::isfinite(v));
  }
}

TEST_CASE("Grad-CAM ignores a positive rescaling of the target row") {
  EncoderConfig cfg;
  const ImageBranch<float> model(cfg, 3);
  const auto img = noise_image(4);
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    const auto before = grad_cam(model, img, c);
    auto scaled = model.clone();
    auto w = scaled.head().weight.mutable_data();
    const std::size_t n = cfg.feature_channels();
    for (std::size_t j = 0; j < n; ++j) w[c * n + j] *= 3.7f;
    const auto after = grad_cam(scaled, img, c);
    for (std::size_t i = 0; i < 256; ++i) CHECK(std::abs(after.values[i] - before.values[i]) < 1e-5);
  }
  CHECK_THROWS_AS(grad_cam(model, img, cfg.num_classes), DomainError);
}

TEST_CASE("layer randomization") {
  EncoderConfig cfg;
  const ImageBranch<float> model(cfg, 9);
  const auto snapshot = model.clone();
  const std::size_t top = model.layer_count() - 1;

  SUBCASE("independent randomization of the head touches only the head") {
    const auto r = randomize_layer(model, top, RandomizationMode::independent, 1);
    const auto same = unchanged_layers(model, r);
    for (std::size_t l = 0; l < top; ++l) CHECK(same[l]);
    CHECK_FALSE(same[top]);
  }
  SUBCASE("cascading from the bottom re-draws every layer") {
    const auto r = randomize_layer(model, 0, RandomizationMode::cascading, 1);
    for (const bool s : unchanged_layers(model, r)) CHECK_FALSE(s);
  }
  SUBCASE("cascading from a middle layer keeps the layers below") {
    const auto r = randomize_layer(model, 1, RandomizationMode::cascading, 1);
    const auto same = unchanged_layers(model, r);
    CHECK(same[0]);
    for (std::size_t l = 1; l <= top; ++l) CHECK_FALSE(same[l]);
    // Shared layers get the same draw in both modes.
    const auto ind = randomize_layer(model, 1, RandomizationMode::independent, 1);
    CHECK(same_values(ind.convs()[1].weight, r.convs()[1].weight));
  }
  SUBCASE("same seed, same result; the original is untouched") {
    const auto a = randomize_layer(model, 0, RandomizationMode::cascading, 7);
    const auto b = randomize_layer(model, 0, RandomizationMode::cascading, 7);
    for (const bool s : unchanged_layers(a, b)) CHECK(s);
    for (const bool s : unchanged_layers(model, snapshot)) CHECK(s);
  }
  SUBCASE("re-drawn biases are zero") {
    const auto r = randomize_layer(model, 0, RandomizationMode::cascading, 2);
    for (const auto& conv : r.convs())
      for (const float b : conv.bias.data()) CHECK(b == 0.0f);
  }
  CHECK_THROWS_AS(randomize_layer(model, top + 1, RandomizationMode::independent, 1), DomainError);
}

TEST_CASE("rank correlation") {
  CHECK(average_ranks(std::vector<double>{3.0, 1.0, 3.0, 2.0}) == std::vector<double>{3.5, 1.0, 3.5, 2.0});
  const std::vector<double> a{0.1, 0.5, 0.3, 0.9};
  CHECK(spearman(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  const std::vector<double> rev{0.9, 0.5, 0.7, 0.1};
  CHECK(spearman(a, rev) == doctest::Approx(-1.0).epsilon(1e-12));
  // Monotone transforms leave it unchanged.
  std::vector<double> cubed;
  for (const double v : a) cubed.push_back(v * v * v + 2.0);
  CHECK(spearman(a, cubed) == doctest::Approx(1.0).epsilon(1e-12));
  // Zero-variance inputs.
  const std::vector<double> flat(4, 0.0), flat2(4, 1.0);
  CHECK(spearman(flat, flat) == 1.0);
  CHECK(spearman(flat, flat2) == 0.0);
  CHECK(spearman(flat, a) == 0.0);
  CHECK_THROWS_AS(spearman(a, std::vector<double>{1.0}), ShapeError);
}

TEST_CASE("Grad-CAM is deterministic") {
  EncoderConfig cfg;
  const ImageBranch<float> model(cfg, 12);
  const auto img = noise_image(13);
  CHECK(grad_cam(model, img, 2).values == grad_cam(model, img, 2).values);
}
