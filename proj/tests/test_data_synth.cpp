#include <set>
#include <vector>

#include "doctest.h"

#include "lico/data_synth.hpp"
#include "lico/errors.hpp"

using namespace lico;

namespace {

ShapesSpec small(std::size_t per_class = 40) {
  ShapesSpec s;
  s.per_class_count = per_class;
  return s;
}

}  // namespace

TEST_CASE("generation is deterministic in the spec") {
  const auto a = generate(small());
  const auto b = generate(small());
  CHECK(a.train == b.train);
  CHECK(a.eval == b.eval);
  auto other = small();
  other.seed = 1;
  const auto c = generate(other);
  CHECK(c.train.front().image != a.train.front().image);
}

TEST_CASE("counts, labels and split") {
  const auto spec = small(250);
  const auto d = generate(spec);
  CHECK(d.train.size() + d.eval.size() == 1500);
  std::vector<std::size_t> per_class(6, 0);
  std::set<std::size_t> train_ids, eval_ids;
  for (const auto& s : d.train) {
    ++per_class.at(s.label);
    train_ids.insert(s.index);
    CHECK_FALSE(is_eval_index(s.index));
  }
  for (const auto& s : d.eval) {
    ++per_class.at(s.label);
    eval_ids.insert(s.index);
    CHECK(is_eval_index(s.index));
  }
  for (const auto n : per_class) CHECK(n == 250);
  CHECK(train_ids.size() == d.train.size());
  CHECK(eval_ids.size() == d.eval.size());
  for (const auto id : eval_ids) CHECK(train_ids.count(id) == 0);
  // The hash split is close to 80/20.
  const double frac = double(d.eval.size()) / 1500.0;
  CHECK(frac > 0.17);
  CHECK(frac < 0.23);
}

TEST_CASE("masks, boxes and pixel ranges") {
  const auto spec = small();
  const auto d = generate(spec);
  for (const auto* split : {&d.train, &d.eval})
    for (const auto& s : *split) {
      REQUIRE(s.mask.size() == 256);
      REQUIRE(s.image.pixels.size() == 768);
      std::size_t count = 0;
      int x0 = 16, y0 = 16, x1 = -1, y1 = -1;
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
          if (!s.mask[std::size_t(y * 16 + x)]) continue;
          ++count;
          CHECK(s.box.contains(x, y));
          x0 = std::min(x0, x), y0 = std::min(y0, y), x1 = std::max(x1, x), y1 = std::max(y1, y);
        }
      CHECK(count > 0);
      // The box is tight.
      CHECK(s.box == Box{x0, y0, x1, y1});
      const int side = std::max(s.box.x1 - s.box.x0, s.box.y1 - s.box.y0) + 1;
      CHECK(side <= int(spec.max_object));
      for (const float p : s.image.pixels) CHECK((p >= 0.0f && p <= 1.0f));
    }
}

TEST_CASE("object colour differs from the background") {
  const auto d = generate(small(10));
  for (const auto& s : d.train) {
    const auto& color = small().colors[s.label % 2].rgb;
    double obj[3] = {0, 0, 0};
    double n = 0;
    for (std::size_t p = 0; p < 256; ++p) {
      if (!s.mask[p]) continue;
      n += 1;
      for (std::size_t ch = 0; ch < 3; ++ch) obj[ch] += s.image.pixels[p * 3 + ch];
    }
    // Dominant channel of the mean object colour matches the class colour.
    const auto dominant = [](const auto& v) { return std::max_element(v, v + 3) - v; };
    const double mean[3] = {obj[0] / n, obj[1] / n, obj[2] / n};
    CHECK(dominant(mean) == dominant(color.data()));
  }
}

TEST_CASE("class semantics") {
  const auto classes = class_semantics(ShapesSpec{});
  REQUIRE(classes.size() == 6);
  CHECK(classes[0].name == "red square");
  CHECK(classes[1].name == "blue square");
  CHECK(classes[5].name == "blue triangle");
  CHECK(classes[0].shape_group == classes[1].shape_group);
  CHECK(classes[0].color_group == classes[2].color_group);
  CHECK(classes[0].color_group != classes[1].color_group);
  CHECK(classes[0].groups() == std::vector<std::size_t>{0, 3});
}

TEST_CASE("invalid specs") {
  auto bad = [](auto mutate) {
    ShapesSpec s;
    mutate(s);
    CHECK_THROWS_AS(generate(s), DomainError);
  };
  bad([](ShapesSpec& s) { s.max_object = 20; });
  bad([](ShapesSpec& s) { s.min_object = 9, s.max_object = 8; });
  bad([](ShapesSpec& s) { s.per_class_count = 0; });
  bad([](ShapesSpec& s) { s.kinds = {ShapeKind::circle}, s.colors.resize(1); });
  bad([](ShapesSpec& s) { s.colors[0].group = 7; });
  bad([](ShapesSpec& s) { s.noise_std = -1.0; });
}
