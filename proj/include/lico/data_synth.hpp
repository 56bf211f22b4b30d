#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "lico/image.hpp"

namespace lico {

enum class ShapeKind { square, circle, triangle };

const char* to_string(ShapeKind kind);

struct ColorSpec {
  std::string name;
  std::array<float, 3> rgb{};
  std::size_t group = 0;  // index into ShapesSpec::color_groups
};

/// Parameters of the synthetic shapes set. Classes are every (kind, color)
/// combination, ordered kind-major.
struct ShapesSpec {
  std::size_t image_size = 16;
  std::vector<ShapeKind> kinds{ShapeKind::square, ShapeKind::circle, ShapeKind::triangle};
  std::vector<ColorSpec> colors{{"red", {0.85f, 0.15f, 0.1f}, 0}, {"blue", {0.1f, 0.25f, 0.85f}, 1}};
  std::vector<std::string> color_groups{"warm", "cool"};
  /// Samples generated per class before the train/eval split.
  std::size_t per_class_count = 250;
  std::size_t min_object = 7;
  std::size_t max_object = 11;
  double noise_std = 0.08;
  std::uint64_t seed = 0;

  std::size_t num_classes() const { return kinds.size() * colors.size(); }
  /// DomainError when the spec cannot produce valid samples.
  void validate() const;
};

struct ClassInfo {
  std::string name;  // e.g. "red square"
  std::size_t shape_group = 0;
  std::size_t color_group = 0;  // offset by the number of kinds

  std::vector<std::size_t> groups() const { return {shape_group, color_group}; }
};

struct Sample {
  std::size_t index = 0;  // position in generation order
  Image image;
  std::size_t label = 0;
  Box box;                      // tight inclusive bounds of the object
  std::vector<std::uint8_t> mask;  // H*W object mask

  bool operator==(const Sample&) const = default;
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> eval;
  std::vector<ClassInfo> classes;
};

/// Deterministic in spec (seed included); an 80/20 train/eval split by a hash
/// of the sample index.
Dataset generate(const ShapesSpec& spec);

/// Class names and group ids; group count is kinds + color groups.
std::vector<ClassInfo> class_semantics(const ShapesSpec& spec);

/// True when generation index `index` lands in the eval split.
bool is_eval_index(std::uint64_t index);

}  // namespace lico
