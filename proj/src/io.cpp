#include "lico/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "lico/errors.hpp"

namespace lico::io {

namespace {

class Writer {
 public:
  explicit Writer(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw FormatError("cannot open '" + path + "' for writing");
  }

  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), n); }

  template <class T>
  void le(T value) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(value);
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(u >> (8 * i));
    bytes(buf, sizeof(T));
  }

  void f32(float value) { le(std::bit_cast<std::uint32_t>(value)); }

  void finish() {
    out_.flush();
    if (!out_) throw FormatError("write to '" + path_ + "' failed");
  }

 private:
  std::string path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw FormatError("cannot open '" + path + "'");
  }

  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw FormatError("'" + path_ + "' is truncated");
    }
  }

  template <class T>
  T le() {
    unsigned char buf[sizeof(T)];
    bytes(buf, sizeof(T));
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u |= static_cast<std::make_unsigned_t<T>>(buf[i]) << (8 * i);
    }
    return static_cast<T>(u);
  }

  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }

  void magic(const char (&expected)[8]) {
    char got[8];
    bytes(got, 8);
    if (std::memcmp(got, expected, 8) != 0) {
      throw FormatError("'" + path_ + "' does not start with magic " + std::string(expected, 8));
    }
  }

  void version() {
    const auto v = le<std::uint32_t>();
    if (v != kFormatVersion) {
      throw FormatError("'" + path_ + "' has unsupported version " + std::to_string(v));
    }
  }

  void expect_end() {
    if (in_.peek() != std::char_traits<char>::eof()) {
      throw FormatError("'" + path_ + "' has trailing bytes");
    }
  }

 private:
  std::string path_;
  std::ifstream in_;
};

void write_name(Writer& w, const std::string& name) {
  if (name.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw FormatError("name too long: " + name.substr(0, 32) + "...");
  }
  w.le(static_cast<std::uint16_t>(name.size()));
  w.bytes(name.data(), name.size());
}

std::string read_name(Reader& r) {
  const auto len = r.le<std::uint16_t>();
  std::string name(len, '\0');
  r.bytes(name.data(), len);
  return name;
}

void check_map(const SaliencyImage& map) {
  if (map.values.size() != map.height * map.width) {
    throw ShapeError("saliency map has " + std::to_string(map.values.size()) + " values for " +
                     std::to_string(map.height) + "x" + std::to_string(map.width));
  }
}

}  // namespace

void write_checkpoint(const std::string& path, const NamedTensors& tensors) {
  Writer w(path);
  w.bytes(kCheckpointMagic, 8);
  w.le(kFormatVersion);
  w.le(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    write_name(w, name);
    if (t.rank() > std::numeric_limits<std::uint8_t>::max()) throw FormatError("rank too large");
    w.le(static_cast<std::uint8_t>(t.rank()));
    for (const auto e : t.shape()) w.le(static_cast<std::uint32_t>(e));
    for (const float v : t.data()) w.f32(v);
  }
  w.finish();
}

NamedTensors read_checkpoint(const std::string& path) {
  Reader r(path);
  r.magic(kCheckpointMagic);
  r.version();
  const auto count = r.le<std::uint32_t>();
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = read_name(r);
    const auto rank = r.le<std::uint8_t>();
    Shape shape(rank);
    for (auto& e : shape) e = r.le<std::uint32_t>();
    std::vector<float> data(shape_size(shape));
    for (auto& v : data) v = r.f32();
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  r.expect_end();
  return out;
}

void write_embeddings(const std::string& path, const EmbeddingTable& table) {
  if (table.rows.rank() != 2 || table.rows.dim(0) != table.names.size()) {
    throw ShapeError("embedding table needs one row per class name");
  }
  Writer w(path);
  w.bytes(kEmbeddingMagic, 8);
  w.le(kFormatVersion);
  w.le(static_cast<std::uint32_t>(table.rows.dim(0)));
  w.le(static_cast<std::uint32_t>(table.rows.dim(1)));
  for (const auto& n : table.names) write_name(w, n);
  for (const float v : table.rows.data()) w.f32(v);
  w.finish();
}

EmbeddingTable read_embeddings(const std::string& path) {
  Reader r(path);
  r.magic(kEmbeddingMagic);
  r.version();
  const auto classes = r.le<std::uint32_t>();
  const auto dim = r.le<std::uint32_t>();
  if (classes == 0 || dim == 0) throw FormatError("'" + path + "' declares an empty table");
  EmbeddingTable table;
  for (std::uint32_t i = 0; i < classes; ++i) table.names.push_back(read_name(r));
  std::vector<float> data(static_cast<std::size_t>(classes) * dim);
  for (auto& v : data) v = r.f32();
  r.expect_end();
  for (std::size_t c = 0; c < classes; ++c) {
    double acc = 0.0;
    for (std::size_t j = 0; j < dim; ++j) acc += static_cast<double>(data[c * dim + j]) * data[c * dim + j];
    if (!(acc > 0.0) || !std::isfinite(acc)) {
      throw FormatError("embedding row for '" + table.names[c] + "' has no direction");
    }
    const double norm = std::sqrt(acc);
    if (std::abs(norm - 1.0) <= 1e-7) continue;
    for (std::size_t j = 0; j < dim; ++j) {
      data[c * dim + j] = static_cast<float>(data[c * dim + j] / norm);
    }
  }
  table.rows = Tensor({classes, dim}, std::move(data));
  return table;
}

std::string embedding_format_description() {
  return "LICOEMB1 class-embedding file (all integers and floats little-endian)\n"
         "  bytes 0..7   magic \"LICOEMB1\"\n"
         "  u32          version = 1\n"
         "  u32          num_classes\n"
         "  u32          d (embedding width)\n"
         "  num_classes x { u16 byte length, UTF-8 class name }\n"
         "  num_classes x d f32, row-major; rows are L2-normalized on load\n";
}

void write_pgm(const std::string& path, const SaliencyImage& map) {
  check_map(map);
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out << "P2\n" << map.width << ' ' << map.height << "\n255\n";
  for (std::size_t y = 0; y < map.height; ++y) {
    for (std::size_t x = 0; x < map.width; ++x) {
      const double v = std::clamp(static_cast<double>(map.values[y * map.width + x]), 0.0, 1.0);
      out << (x ? " " : "") << static_cast<int>(std::lround(v * 255.0));
    }
    out << '\n';
  }
  if (!out) throw FormatError("write to '" + path + "' failed");
}

SaliencyImage read_pgm(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::string magic;
  int maxval = 0;
  SaliencyImage map;
  in >> magic >> map.width >> map.height >> maxval;
  if (magic != "P2" || !in || maxval <= 0) throw FormatError("'" + path + "' is not an ASCII PGM");
  map.values.resize(map.width * map.height);
  for (auto& v : map.values) {
    int p = 0;
    if (!(in >> p)) throw FormatError("'" + path + "' is truncated");
    v = static_cast<float>(p) / static_cast<float>(maxval);
  }
  return map;
}

void write_saliency_raw(const std::string& path, const SaliencyImage& map) {
  check_map(map);
  Writer w(path);
  w.bytes(kSaliencyMagic, 8);
  w.le(static_cast<std::uint32_t>(map.height));
  w.le(static_cast<std::uint32_t>(map.width));
  for (const float v : map.values) w.f32(v);
  w.finish();
}

SaliencyImage read_saliency_raw(const std::string& path) {
  Reader r(path);
  r.magic(kSaliencyMagic);
  SaliencyImage map;
  map.height = r.le<std::uint32_t>();
  map.width = r.le<std::uint32_t>();
  map.values.resize(map.height * map.width);
  for (auto& v : map.values) v = r.f32();
  r.expect_end();
  return map;
}

void write_box_list(const std::string& path, const std::vector<BoxRecord>& boxes) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  for (const auto& b : boxes) {
    out << b.image_id << ' ' << b.label << ' ' << b.box.x0 << ' ' << b.box.y0 << ' ' << b.box.x1
        << ' ' << b.box.y1 << '\n';
  }
  if (!out) throw FormatError("write to '" + path + "' failed");
}

std::vector<BoxRecord> read_box_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::vector<BoxRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    BoxRecord b;
    std::string extra;
    if (!(ls >> b.image_id >> b.label >> b.box.x0 >> b.box.y0 >> b.box.x1 >> b.box.y1) ||
        (ls >> extra) || b.box.x1 < b.box.x0 || b.box.y1 < b.box.y0) {
      throw FormatError(path + ":" + std::to_string(line_no) + ": malformed box line");
    }
    out.push_back(b);
  }
  return out;
}

void write_feature_csv(const std::string& path, const std::vector<std::size_t>& labels,
                       const std::vector<std::vector<float>>& features) {
  if (labels.size() != features.size()) throw ShapeError("feature CSV: label/row count mismatch");
  const std::size_t width = features.empty() ? 0 : features.front().size();
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out << "label";
  for (std::size_t j = 0; j < width; ++j) out << ",f" << j;
  out << '\n' << std::setprecision(9);
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].size() != width) throw ShapeError("feature CSV: ragged rows");
    out << labels[i];
    for (const float v : features[i]) out << ',' << v;
    out << '\n';
  }
  if (!out) throw FormatError("write to '" + path + "' failed");
}

std::pair<std::vector<std::size_t>, std::vector<std::vector<float>>> read_feature_csv(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line.rfind("label", 0) != 0) {
    throw FormatError("'" + path + "' lacks the label header");
  }
  std::pair<std::vector<std::size_t>, std::vector<std::vector<float>>> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');
    out.first.push_back(std::stoul(cell));
    std::vector<float> row;
    while (std::getline(ls, cell, ',')) row.push_back(std::stof(cell));
    out.second.push_back(std::move(row));
  }
  return out;
}

}  // namespace lico::io
