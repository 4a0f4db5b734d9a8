#include "ebsa/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "ebsa/error.hpp"

namespace ebsa {

namespace {

constexpr char kMagic[8] = {'E', 'B', 'S', 'A', 'A', 'R', 'R', '1'};

static_assert(std::endian::native == std::endian::little, "container layout assumes little-endian host");

}  // namespace

void ArrayFile::add(std::string name, Matrix value) {
  if (has(name)) throw UsageError("ArrayFile: duplicate array '" + name + "'");
  arrays_.emplace_back(std::move(name), std::move(value));
}

bool ArrayFile::has(const std::string& name) const {
  for (const auto& [n, _] : arrays_)
    if (n == name) return true;
  return false;
}

const Matrix& ArrayFile::get(const std::string& name) const {
  for (const auto& [n, m] : arrays_)
    if (n == name) return m;
  throw IoError("ArrayFile: missing array '" + name + "'");
}

void ArrayFile::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : arrays_) {
    header["arrays"].push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}});
    offset += m.size() * sizeof(double);
  }
  header["meta"] = meta_;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [_, m] : arrays_) {
    out.write(reinterpret_cast<const char*>(m.data().data()),
              static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

ArrayFile ArrayFile::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw IoError("'" + path.string() + "' is not an array container");
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated header in '" + path.string() + "'");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad header in '" + path.string() + "': " + e.what());
  }
  const std::streamoff data_start = in.tellg();

  ArrayFile file;
  file.meta_ = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header.at("arrays")) {
    const auto rows = entry.at("shape").at(0).get<std::size_t>();
    const auto cols = entry.at("shape").at(1).get<std::size_t>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    std::vector<double> values(rows * cols);
    in.seekg(data_start + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw IoError("truncated array '" + entry.at("name").get<std::string>() + "'");
    file.arrays_.emplace_back(entry.at("name").get<std::string>(), Matrix(rows, cols, std::move(values)));
  }
  return file;
}

}  // namespace ebsa
