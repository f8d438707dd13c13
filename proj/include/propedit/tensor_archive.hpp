#pragma once

// Named-tensor archive: a directory holding one binary file per tensor plus
// a manifest.json. Each tensor file is
//
//   u8 dtype | u8 rank | u32 shape[rank] | payload (row-major)
//
// with every multi-byte field little-endian. dtype 1 = float32, 2 = float64.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

namespace propedit {

enum class DType : std::uint8_t { Float32 = 1, Float64 = 2 };

struct ArchiveEntry {
  std::string name;
  Eigen::MatrixXd value;
  // Rank written to disk. 1 stores a column vector as shape [rows].
  int rank = 2;
};

struct TensorArchive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<ArchiveEntry> entries;

  void add(std::string name, Eigen::MatrixXd value, int rank = 2);
  const Eigen::MatrixXd& get(const std::string& name) const;
  bool contains(const std::string& name) const;
};

// Writes `archive` into `dir` (created if missing). Existing tensor files of
// the same names are overwritten.
void write_archive(const std::filesystem::path& dir, const TensorArchive& archive,
                   DType dtype = DType::Float64);

// Throws LookupError if the directory or manifest is missing.
TensorArchive read_archive(const std::filesystem::path& dir);

// Low-level single-file codec, exposed for tests and tooling.
void write_tensor_file(const std::filesystem::path& file, const Eigen::MatrixXd& value,
                       int rank, DType dtype);
std::pair<Eigen::MatrixXd, int> read_tensor_file(const std::filesystem::path& file);

}  // namespace propedit
