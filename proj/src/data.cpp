#include "ebsa/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include "ebsa/error.hpp"

namespace ebsa {

void DomainBatch::validate() const {
  if (features.rows() != labels.size() || domains.size() != labels.size()) {
    throw ShapeError("DomainBatch: " + std::to_string(features.rows()) + " feature rows, " +
                     std::to_string(labels.size()) + " labels, " + std::to_string(domains.size()) + " domain ids");
  }
}

DomainBatch DomainBatch::concat(std::span<const DomainBatch> parts) {
  DomainBatch out;
  std::vector<Matrix> feats;
  for (const auto& p : parts) {
    if (p.empty()) continue;
    feats.push_back(p.features);
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    out.domains.insert(out.domains.end(), p.domains.begin(), p.domains.end());
  }
  out.features = vstack(feats);
  return out;
}

DomainBatch DomainBatch::select(std::span<const std::size_t> rows) const {
  DomainBatch out;
  out.features = features.select_rows(rows);
  for (auto r : rows) {
    out.labels.push_back(labels[r]);
    out.domains.push_back(domains[r]);
  }
  return out;
}

void DomainDataset::validate(std::size_t num_classes) const {
  if (features.rows() != labels.size()) {
    throw ShapeError("dataset " + std::to_string(domain) + ": " + std::to_string(features.rows()) +
                     " rows vs " + std::to_string(labels.size()) + " labels");
  }
  if (!features.all_finite()) throw InvariantError("dataset " + std::to_string(domain) + ": non-finite feature");
  for (int y : labels) {
    if (y < 0 || (num_classes > 0 && static_cast<std::size_t>(y) >= num_classes)) {
      throw InvariantError("dataset " + std::to_string(domain) + ": label " + std::to_string(y) + " out of range");
    }
  }
}

DomainBatch DomainDataset::as_batch() const {
  return {features, labels, std::vector<int>(labels.size(), domain)};
}

void BenchmarkSpec::validate() const {
  if (num_classes < 2) throw UsageError("benchmark: need at least 2 classes");
  if (dim < 2) throw UsageError("benchmark: need at least 2 dimensions");
  if (per_class == 0) throw UsageError("benchmark: per_class must be positive");
  if (source_angles.empty()) throw UsageError("benchmark: no source angles");
  for (double s : source_angles)
    for (double t : target_angles)
      if (s == t) throw UsageError("benchmark: angle " + std::to_string(s) + " is both source and target");
  if (!(radius > 0) || !(cluster_std >= 0) || !(nuisance_std >= 0)) {
    throw UsageError("benchmark: radius must be positive and noise scales nonnegative");
  }
}

std::vector<std::vector<double>> class_means(const BenchmarkSpec& spec) {
  // Evenly spaced on the circle with a seed-dependent phase.
  Rng rng(derive_seed(spec.geometry_seed, 0x6765'6f6d));
  const double phase = 2.0 * std::numbers::pi * rng.uniform();
  std::vector<std::vector<double>> means;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    const double a = phase + 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(spec.num_classes);
    means.push_back({spec.radius * std::cos(a), spec.radius * std::sin(a)});
  }
  return means;
}

void rotate_plane(Matrix& features, double angle_deg) {
  if (features.cols() < 2) throw ShapeError("rotate_plane: need at least two columns");
  const double a = angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  for (std::size_t r = 0; r < features.rows(); ++r) {
    const double x = features(r, 0), y = features(r, 1);
    features(r, 0) = c * x - s * y;
    features(r, 1) = s * x + c * y;
  }
}

DomainDataset generate_domain(const BenchmarkSpec& spec, double angle_deg, std::size_t per_class,
                              std::uint64_t seed) {
  spec.validate();
  const auto means = class_means(spec);
  Rng rng(seed);
  DomainDataset ds;
  ds.domain = static_cast<int>(std::lround(angle_deg));
  ds.angle = angle_deg;
  ds.features = Matrix(per_class * spec.num_classes, spec.dim);
  std::size_t r = 0;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i, ++r) {
      ds.features(r, 0) = means[c][0] + spec.cluster_std * rng.normal();
      ds.features(r, 1) = means[c][1] + spec.cluster_std * rng.normal();
      for (std::size_t k = 2; k < spec.dim; ++k) ds.features(r, k) = spec.nuisance_std * rng.normal();
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  rotate_plane(ds.features, angle_deg);
  return ds;
}

Benchmark generate_rotated_benchmark(const BenchmarkSpec& spec, std::uint64_t seed) {
  spec.validate();
  Benchmark b;
  b.class_means = class_means(spec);
  auto angle_key = [](double a) { return static_cast<std::uint64_t>(std::llround(a * 1000.0)); };
  for (double a : spec.source_angles) {
    b.sources.push_back(generate_domain(spec, a, spec.per_class, derive_seed(seed, 1, angle_key(a))));
    if (spec.validation_per_class > 0) {
      b.validation.push_back(
          generate_domain(spec, a, spec.validation_per_class, derive_seed(seed, 2, angle_key(a))));
    }
  }
  for (double a : spec.target_angles) {
    b.targets.push_back(generate_domain(spec, a, spec.per_class, derive_seed(seed, 3, angle_key(a))));
  }
  return b;
}

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T>
T parse_field(std::string_view field, std::size_t line_no, const std::string& what) {
  T value{};
  while (!field.empty() && (field.back() == '\r' || field.back() == ' ')) field.remove_suffix(1);
  while (!field.empty() && field.front() == ' ') field.remove_prefix(1);
  auto res = std::from_chars(field.data(), field.data() + field.size(), value);
  if (res.ec != std::errc{} || res.ptr != field.data() + field.size()) {
    throw IoError("line " + std::to_string(line_no) + ": cannot parse " + what + " '" + std::string(field) + "'");
  }
  return value;
}

}  // namespace

void save_feature_csv(const std::filesystem::path& path, std::span<const DomainDataset> datasets) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  const std::size_t d = datasets.empty() ? 0 : datasets.front().dim();
  out << "domain,label";
  for (std::size_t k = 0; k < d; ++k) out << ",f" << k;
  out << '\n';
  for (const auto& ds : datasets) {
    if (ds.dim() != d && ds.size() > 0) throw ShapeError("save_feature_csv: datasets differ in dimension");
    for (std::size_t r = 0; r < ds.size(); ++r) {
      out << ds.domain << ',' << ds.labels[r];
      for (double v : ds.features.row(r)) out << ',' << format_double(v);
      out << '\n';
    }
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void save_feature_csv(const std::filesystem::path& path, const DomainDataset& dataset) {
  save_feature_csv(path, std::span<const DomainDataset>(&dataset, 1));
}

std::vector<DomainDataset> load_feature_csv_domains(const std::filesystem::path& path, const FeatureSchema& schema) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw IoError("'" + path.string() + "': missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_commas(line);
  if (header.size() < 2 || header[0] != "domain" || header[1] != "label") {
    throw IoError("'" + path.string() + "': header must start with domain,label");
  }
  const std::size_t dim = header.size() - 2;
  for (std::size_t k = 0; k < dim; ++k) {
    if (header[k + 2] != "f" + std::to_string(k)) {
      throw IoError("'" + path.string() + "': header column " + std::to_string(k + 2) + " should be f" +
                    std::to_string(k));
    }
  }
  if (schema.dim != 0 && schema.dim != dim) {
    throw ShapeError("'" + path.string() + "': file has " + std::to_string(dim) + " features, expected " +
                     std::to_string(schema.dim));
  }

  std::vector<DomainDataset> out;
  std::map<int, std::size_t> index;
  std::vector<std::vector<double>> values;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_commas(line);
    if (fields.size() != dim + 2) {
      throw IoError("line " + std::to_string(line_no) + ": expected " + std::to_string(dim + 2) + " fields, got " +
                    std::to_string(fields.size()));
    }
    const int domain = parse_field<int>(fields[0], line_no, "domain");
    const int label = parse_field<int>(fields[1], line_no, "label");
    if (label < 0) throw IoError("line " + std::to_string(line_no) + ": negative label");
    auto [it, inserted] = index.emplace(domain, out.size());
    if (inserted) {
      out.push_back(DomainDataset{domain, static_cast<double>(domain), Matrix(), {}});
      values.emplace_back();
    }
    auto& vals = values[it->second];
    for (std::size_t k = 0; k < dim; ++k) {
      const double v = parse_field<double>(fields[k + 2], line_no, "feature");
      if (!std::isfinite(v)) throw IoError("line " + std::to_string(line_no) + ": non-finite feature");
      vals.push_back(v);
    }
    out[it->second].labels.push_back(label);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].features = Matrix(out[i].labels.size(), dim, std::move(values[i]));
  }
  return out;
}

DomainDataset load_feature_csv(const std::filesystem::path& path, const FeatureSchema& schema) {
  auto all = load_feature_csv_domains(path, schema);
  if (all.empty()) {
    // Header-only file: recover the dimension from the header.
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    const std::size_t cols = split_commas(header).size();
    return DomainDataset{0, 0.0, Matrix(0, cols - 2), {}};
  }
  if (all.size() > 1) {
    throw IoError("'" + path.string() + "' mixes " + std::to_string(all.size()) + " domains");
  }
  return std::move(all.front());
}

BatchStream::BatchStream(const DomainDataset& ds, std::size_t batch_size, std::uint64_t seed)
    : ds_(&ds), batch_size_(batch_size), rng_(seed) {
  if (batch_size == 0) throw UsageError("batch size must be >= 1");
  order_.resize(ds.size());
  reshuffle();
}

void BatchStream::reshuffle() {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::shuffle(order_.begin(), order_.end(), rng_.engine());
  cursor_ = 0;
}

DomainBatch BatchStream::next() {
  if (order_.empty()) return DomainBatch{Matrix(0, ds_->dim()), {}, {}};
  if (cursor_ >= order_.size()) {
    ++epoch_;
    reshuffle();
  }
  const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
  std::span<const std::size_t> rows(order_.data() + cursor_, end - cursor_);
  cursor_ = end;
  return ds_->as_batch().select(rows);
}

std::vector<DomainBatch> batch_iter(const DomainDataset& ds, std::size_t batch_size, std::uint64_t seed) {
  BatchStream stream(ds, batch_size, seed);
  std::vector<DomainBatch> out;
  std::size_t seen = 0;
  while (seen < ds.size()) {
    out.push_back(stream.next());
    seen += out.back().size();
  }
  return out;
}

DomainBatch sample_batch(const DomainDataset& ds, std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t take = std::min(n, idx.size());
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + rng.index(idx.size() - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(take);
  DomainBatch out;
  out.features = ds.features.select_rows(idx);
  for (auto r : idx) {
    out.labels.push_back(ds.labels[r]);
    out.domains.push_back(ds.domain);
  }
  return out;
}

}  // namespace ebsa
