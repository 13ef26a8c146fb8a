// Copyright (C) 2026 the mgd authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mgd/core.hpp"

namespace mgd {

// Raw little-endian float64 payload with a JSON sidecar header at
// "<path>.json" describing the shape.
struct FieldFile {
  std::vector<Eigen::Index> dims;
  Vector data;  // row-major flattened

  Eigen::Index total() const {
    Eigen::Index t = 1;
    for (auto d : dims) t *= d;
    return t;
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "FieldFile payloads are little-endian; big-endian hosts are unsupported");

inline std::string sidecar_path(const std::string& path) { return path + ".json"; }

}  // namespace detail

inline void write_field_file(const std::string& path, const std::vector<Eigen::Index>& dims,
                             const Eigen::Ref<const Vector>& data) {
  Eigen::Index total = 1;
  for (auto d : dims) {
    if (d < 1) throw ConfigError("field dimensions must be positive");
    total *= d;
  }
  if (total != data.size()) throw ConfigError("field payload does not match dims");

  std::ofstream payload(path, std::ios::binary | std::ios::trunc);
  if (!payload) throw DataError("cannot open for writing: " + path);
  payload.write(reinterpret_cast<const char*>(data.data()),
                static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(total)));
  if (!payload) throw DataError("short write: " + path);
  payload.close();

  nlohmann::json header;
  header["dims"] = dims;
  header["dtype"] = "f64";
  header["endianness"] = "little";
  header["layout"] = "row-major";
  std::ofstream sidecar(detail::sidecar_path(path), std::ios::trunc);
  if (!sidecar) throw DataError("cannot open for writing: " + detail::sidecar_path(path));
  sidecar << header.dump(2) << "\n";
}

inline FieldFile read_field_file(const std::string& path) {
  std::ifstream sidecar(detail::sidecar_path(path));
  if (!sidecar) throw DataError("missing sidecar header: " + detail::sidecar_path(path));
  nlohmann::json header;
  try {
    sidecar >> header;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed sidecar header: " + std::string(e.what()));
  }
  if (header.value("dtype", "") != "f64" || header.value("endianness", "") != "little" ||
      header.value("layout", "") != "row-major") {
    throw DataError("unsupported field file header: " + detail::sidecar_path(path));
  }
  FieldFile field;
  for (const auto& d : header.at("dims")) {
    const auto v = d.get<long long>();
    if (v < 1) throw DataError("non-positive dimension in " + detail::sidecar_path(path));
    field.dims.push_back(static_cast<Eigen::Index>(v));
  }
  if (field.dims.empty()) throw DataError("empty dims in " + detail::sidecar_path(path));

  std::ifstream payload(path, std::ios::binary | std::ios::ate);
  if (!payload) throw DataError("cannot open field payload: " + path);
  const auto bytes = static_cast<std::uint64_t>(payload.tellg());
  const auto expected = sizeof(double) * static_cast<std::uint64_t>(field.total());
  if (bytes != expected) {
    throw DataError("field payload size mismatch for " + path + ": have " +
                    std::to_string(bytes) + " bytes, header implies " + std::to_string(expected));
  }
  payload.seekg(0);
  field.data.resize(field.total());
  payload.read(reinterpret_cast<char*>(field.data.data()),
               static_cast<std::streamsize>(expected));
  if (!payload) throw DataError("short read: " + path);
  return field;
}

// Single numeric column, one value per line; blank lines are skipped.
// Non-numeric content is an error carrying the line number.
inline Vector read_csv_column(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open: " + path);
  std::vector<double> values;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    // Trim and take the first field.
    std::size_t start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos) continue;
    std::size_t comma = line.find(',', start);
    std::string field = line.substr(start, comma == std::string::npos ? std::string::npos
                                                                      : comma - start);
    char* end = nullptr;
    const double v = std::strtod(field.c_str(), &end);
    if (end == field.c_str()) {
      if (line_no == 1) continue;  // tolerate a header row
      throw DataError("non-numeric value at " + path + ":" + std::to_string(line_no));
    }
    values.push_back(v);
  }
  if (values.empty()) throw DataError("no numeric rows in " + path);
  return Eigen::Map<Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header) : out_(path) {
    if (!out_) throw DataError("cannot open for writing: " + path);
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (i) out_ << ',';
      out_ << header[i];
    }
    out_ << '\n';
    out_.precision(17);
  }

  template <class... Ts>
  void row(const Ts&... fields) {
    bool first = true;
    ((out_ << (first ? "" : ","), first = false, out_ << fields), ...);
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

}  // namespace mgd
