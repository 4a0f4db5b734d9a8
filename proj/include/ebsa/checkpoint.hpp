#pragma once

// Flat binary container of named float64 arrays.
//
//   bytes 0..7    magic "EBSAARR1"
//   bytes 8..15   header length H, uint64 little-endian
//   next H bytes  UTF-8 JSON header:
//                 {"arrays":[{"name":..,"shape":[rows,cols],"offset":..}, ...],
//                  "meta":{...}}
//                 offset is in bytes from the start of the data section
//   data section  row-major little-endian IEEE-754 doubles, arrays back to back

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ebsa/matrix.hpp"

namespace ebsa {

class ArrayFile {
 public:
  void add(std::string name, Matrix value);
  bool has(const std::string& name) const;
  const Matrix& get(const std::string& name) const;
  const std::vector<std::pair<std::string, Matrix>>& arrays() const { return arrays_; }

  nlohmann::json& meta() { return meta_; }
  const nlohmann::json& meta() const { return meta_; }

  void save(const std::filesystem::path& path) const;
  static ArrayFile load(const std::filesystem::path& path);

 private:
  nlohmann::json meta_ = nlohmann::json::object();
  std::vector<std::pair<std::string, Matrix>> arrays_;
};

}  // namespace ebsa
