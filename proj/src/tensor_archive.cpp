#include "propedit/tensor_archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "propedit/errors.hpp"

namespace propedit {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename T>
void put_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!in) throw ArgumentError("truncated tensor file");
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

std::vector<std::uint32_t> shape_of(const Eigen::MatrixXd& m, int rank) {
  if (rank == 1) {
    if (m.cols() != 1) throw ArgumentError("rank-1 tensor must be a column vector");
    return {static_cast<std::uint32_t>(m.rows())};
  }
  return {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
}

}  // namespace

void TensorArchive::add(std::string name, Eigen::MatrixXd value, int rank) {
  for (auto& e : entries) {
    if (e.name == name) {
      e.value = std::move(value);
      e.rank = rank;
      return;
    }
  }
  entries.push_back({std::move(name), std::move(value), rank});
}

const Eigen::MatrixXd& TensorArchive::get(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e.value;
  }
  throw LookupError("tensor not in archive: " + name);
}

bool TensorArchive::contains(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return true;
  }
  return false;
}

void write_tensor_file(const fs::path& file, const Eigen::MatrixXd& value, int rank,
                       DType dtype) {
  if (rank != 1 && rank != 2) throw ArgumentError("tensor rank must be 1 or 2");
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw ArgumentError("cannot open for writing: " + file.string());
  auto shape = shape_of(value, rank);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(dtype));
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(rank));
  for (auto s : shape) put_le<std::uint32_t>(out, s);
  for (Eigen::Index r = 0; r < value.rows(); ++r) {
    for (Eigen::Index c = 0; c < value.cols(); ++c) {
      if (dtype == DType::Float64) {
        put_le<double>(out, value(r, c));
      } else {
        put_le<float>(out, static_cast<float>(value(r, c)));
      }
    }
  }
  if (!out) throw ArgumentError("write failed: " + file.string());
}

std::pair<Eigen::MatrixXd, int> read_tensor_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw LookupError("missing tensor file: " + file.string());
  auto dtype = static_cast<DType>(get_le<std::uint8_t>(in));
  int rank = get_le<std::uint8_t>(in);
  if (dtype != DType::Float32 && dtype != DType::Float64) {
    throw ArgumentError("unknown dtype code in " + file.string());
  }
  if (rank > 2) throw ArgumentError("unsupported tensor rank in " + file.string());
  Eigen::Index rows = 1, cols = 1;
  if (rank >= 1) rows = get_le<std::uint32_t>(in);
  if (rank == 2) cols = get_le<std::uint32_t>(in);
  Eigen::MatrixXd value(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      value(r, c) = dtype == DType::Float64 ? get_le<double>(in)
                                            : static_cast<double>(get_le<float>(in));
    }
  }
  return {std::move(value), rank == 0 ? 1 : rank};
}

void write_archive(const fs::path& dir, const TensorArchive& archive, DType dtype) {
  fs::create_directories(dir);
  json tensors = json::array();
  for (const auto& e : archive.entries) {
    std::string file = e.name + ".tensor";
    write_tensor_file(dir / file, e.value, e.rank, dtype);
    tensors.push_back({{"name", e.name},
                       {"file", file},
                       {"dtype", dtype == DType::Float64 ? "f64" : "f32"},
                       {"shape", shape_of(e.value, e.rank)}});
  }
  json manifest = {{"format", "propedit-named-tensors"},
                   {"version", 1},
                   {"tensors", tensors},
                   {"meta", archive.meta}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << "\n";
}

TensorArchive read_archive(const fs::path& dir) {
  auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw LookupError("missing archive manifest: " + manifest_path.string());
  json manifest = json::parse(in);
  TensorArchive archive;
  archive.meta = manifest.value("meta", json::object());
  for (const auto& t : manifest.at("tensors")) {
    auto [value, rank] = read_tensor_file(dir / t.at("file").get<std::string>());
    archive.entries.push_back({t.at("name").get<std::string>(), std::move(value), rank});
  }
  return archive;
}

}  // namespace propedit
