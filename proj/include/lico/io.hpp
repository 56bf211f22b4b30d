#pragma once

// File formats: LICOCKPT checkpoints, LICOEMB1 class embeddings, saliency
// exports (ASCII PGM and LICOSAL1 raw floats), box lists and feature CSVs.
// All multi-byte integers and floats are little-endian.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "lico/image.hpp"
#include "lico/tensor.hpp"

namespace lico::io {

inline constexpr char kCheckpointMagic[8] = {'L', 'I', 'C', 'O', 'C', 'K', 'P', 'T'};
inline constexpr char kEmbeddingMagic[8] = {'L', 'I', 'C', 'O', 'E', 'M', 'B', '1'};
inline constexpr char kSaliencyMagic[8] = {'L', 'I', 'C', 'O', 'S', 'A', 'L', '1'};
inline constexpr std::uint32_t kFormatVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_checkpoint(const std::string& path, const NamedTensors& tensors);
NamedTensors read_checkpoint(const std::string& path);

struct EmbeddingTable {
  std::vector<std::string> names;
  Tensor rows;  // num_classes x d, unit-norm rows after loading
};

void write_embeddings(const std::string& path, const EmbeddingTable& table);
/// Normalizes rows to unit L2 norm when they are not already.
EmbeddingTable read_embeddings(const std::string& path);
/// Human-readable description of the LICOEMB1 layout.
std::string embedding_format_description();

/// Row-major H x W map with values in [0, 1].
struct SaliencyImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> values;
};

/// ASCII P2, maxval 255, values rounded from [0, 1].
void write_pgm(const std::string& path, const SaliencyImage& map);
SaliencyImage read_pgm(const std::string& path);
void write_saliency_raw(const std::string& path, const SaliencyImage& map);
SaliencyImage read_saliency_raw(const std::string& path);

struct BoxRecord {
  std::size_t image_id = 0;
  std::size_t label = 0;
  Box box;

  bool operator==(const BoxRecord&) const = default;
};

/// Lines of "image_id class x0 y0 x1 y1".
void write_box_list(const std::string& path, const std::vector<BoxRecord>& boxes);
std::vector<BoxRecord> read_box_list(const std::string& path);

/// CSV with header "label,f0,...,f{n-1}", floats with 9 significant digits.
void write_feature_csv(const std::string& path, const std::vector<std::size_t>& labels,
                       const std::vector<std::vector<float>>& features);
std::pair<std::vector<std::size_t>, std::vector<std::vector<float>>> read_feature_csv(
    const std::string& path);

}  // namespace lico::io
