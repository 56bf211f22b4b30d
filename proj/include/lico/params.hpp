#pragma once

#include <string>
#include <vector>

#include "lico/tensor.hpp"

namespace lico {

enum class ParamGroup { image, mapping, context, temperature };

/// A trainable tensor handle plus the metadata the optimizer needs.
template <class Real>
struct NamedParam {
  std::string name;
  BasicTensor<Real> tensor;
  ParamGroup group = ParamGroup::image;
};

template <class Real>
using ParamList = std::vector<NamedParam<Real>>;

inline const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::image: return "image";
    case ParamGroup::mapping: return "mapping";
    case ParamGroup::context: return "context";
    case ParamGroup::temperature: return "temperature";
  }
  return "?";
}

}  // namespace lico
