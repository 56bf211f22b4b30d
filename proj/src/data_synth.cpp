#include "lico/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "lico/errors.hpp"
#include "lico/rng.hpp"

namespace lico {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

bool inside_shape(ShapeKind kind, std::size_t size, std::size_t r, std::size_t c) {
  const double s = static_cast<double>(size);
  const double y = static_cast<double>(r) + 0.5;
  const double x = static_cast<double>(c) + 0.5;
  switch (kind) {
    case ShapeKind::square:
      return true;
    case ShapeKind::circle: {
      const double dy = y - s / 2.0;
      const double dx = x - s / 2.0;
      return dx * dx + dy * dy <= (s / 2.0) * (s / 2.0);
    }
    case ShapeKind::triangle: {
      // Apex at the top centre, base along the bottom row.
      const double half_width = (y / s) * (s / 2.0);
      return std::abs(x - s / 2.0) <= half_width + 1e-9;
    }
  }
  return false;
}

Sample make_sample(const ShapesSpec& spec, std::size_t label, std::size_t index) {
  const std::size_t n = spec.image_size;
  const ShapeKind kind = spec.kinds[label / spec.colors.size()];
  const ColorSpec& color = spec.colors[label % spec.colors.size()];
  Rng rng = derive_rng(spec.seed, streams::kData, index);
  std::uniform_int_distribution<std::size_t> size_dist(spec.min_object, spec.max_object);
  const std::size_t size = size_dist(rng);
  std::uniform_int_distribution<std::size_t> pos_dist(0, n - size);
  const std::size_t top = pos_dist(rng);
  const std::size_t left = pos_dist(rng);
  std::uniform_real_distribution<double> bg_dist(0.35, 0.65);
  const double background = bg_dist(rng);
  std::uniform_real_distribution<double> gain_dist(0.85, 1.1);
  const double gain = gain_dist(rng);
  std::normal_distribution<double> noise(0.0, spec.noise_std);

  Sample s;
  s.index = index;
  s.label = label;
  s.image = Image(n, n, 3);
  s.mask.assign(n * n, 0);
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c)
      if (inside_shape(kind, size, r, c)) s.mask[(top + r) * n + left + c] = 1;

  int x0 = static_cast<int>(n), y0 = static_cast<int>(n), x1 = -1, y1 = -1;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const bool object = s.mask[r * n + c] != 0;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double base = object ? gain * color.rgb[ch] : background;
        const double sigma_scale = object ? 0.5 : 1.0;
        const double v = base + sigma_scale * noise(rng);
        s.image.at(r, c, ch) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
      if (object) {
        x0 = std::min(x0, static_cast<int>(c));
        y0 = std::min(y0, static_cast<int>(r));
        x1 = std::max(x1, static_cast<int>(c));
        y1 = std::max(y1, static_cast<int>(r));
      }
    }
  }
  s.box = Box{x0, y0, x1, y1};
  return s;
}

}  // namespace

const char* to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::square: return "square";
    case ShapeKind::circle: return "circle";
    case ShapeKind::triangle: return "triangle";
  }
  return "?";
}

void ShapesSpec::validate() const {
  if (num_classes() < 2) throw DomainError("shapes spec needs at least 2 classes");
  if (image_size == 0) throw DomainError("image size must be positive");
  if (min_object < 2 || min_object > max_object) {
    throw DomainError("object size range must satisfy 2 <= min <= max");
  }
  if (max_object > image_size) throw DomainError("object larger than the image");
  if (per_class_count == 0) throw DomainError("per-class count must be positive");
  if (!(noise_std >= 0.0)) throw DomainError("noise std must be non-negative");
  for (const auto& c : colors) {
    if (c.group >= color_groups.size()) throw DomainError("color '" + c.name + "' has no group");
  }
}

bool is_eval_index(std::uint64_t index) { return splitmix64(index) % 5 == 0; }

std::vector<ClassInfo> class_semantics(const ShapesSpec& spec) {
  spec.validate();
  std::vector<ClassInfo> out;
  for (std::size_t k = 0; k < spec.kinds.size(); ++k) {
    for (const auto& color : spec.colors) {
      ClassInfo info;
      info.name = color.name + " " + to_string(spec.kinds[k]);
      info.shape_group = k;
      info.color_group = spec.kinds.size() + color.group;
      out.push_back(std::move(info));
    }
  }
  return out;
}

Dataset generate(const ShapesSpec& spec) {
  spec.validate();
  Dataset data;
  data.classes = class_semantics(spec);
  for (std::size_t label = 0; label < spec.num_classes(); ++label) {
    for (std::size_t j = 0; j < spec.per_class_count; ++j) {
      const std::size_t index = label * spec.per_class_count + j;
      auto sample = make_sample(spec, label, index);
      (is_eval_index(index) ? data.eval : data.train).push_back(std::move(sample));
    }
  }
  return data;
}

}  // namespace lico
