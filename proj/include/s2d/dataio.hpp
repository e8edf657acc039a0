#pragma once

// Representation datasets (binary and JSON-lines), token datasets and
// steering-state files.
//
// Binary layout, little-endian:
//   "S2DR" | u32 version=1 | u32 dim | u64 count | count x (u8 label, dim x f32)

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "fsutil.hpp"
#include "log.hpp"
#include "observer.hpp"
#include "sphere.hpp"
#include "trainer.hpp"

namespace s2d {

struct RepresentationRecord {
  int label = 0;
  Vector f;
};

struct RepresentationDataset {
  int dim = 0;
  std::vector<RepresentationRecord> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }

  /// Record vectors as unit directions, file order.
  std::vector<UnitVector> directions() const {
    std::vector<UnitVector> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(UnitVector::from_normalized(r.f));
    return out;
  }
};

inline constexpr std::uint32_t kReprVersion = 1;
inline constexpr std::size_t kBinaryHeaderBytes = 20;

namespace detail {

inline void check_record(const RepresentationRecord& r, int dim, const std::string& where) {
  if (r.label != 0 && r.label != 1) throw FormatError(where + ": label must be 0 or 1");
  if (r.f.size() != dim)
    throw FormatError(where + ": vector has " + std::to_string(r.f.size()) + " entries, expected " +
                      std::to_string(dim));
  if (!r.f.allFinite()) throw FormatError(where + ": non-finite value");
}

/// Loader policy: renormalize past 1e-6 deviation from unit norm, warn past 1e-3.
inline void normalize_loaded(Vector& f, const std::string& where) {
  const double n = f.norm();
  const double dev = std::abs(n - 1.0);
  if (dev <= 1e-6) return;
  if (!(n > 0.0)) throw FormatError(where + ": zero vector");
  if (dev > 1e-3) warn(where + ": vector norm " + std::to_string(n) + " renormalized");
  f /= n;
}

template <class T>
void put_le(std::string& out, T x) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(const unsigned char* p) {
  T x = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) x |= static_cast<T>(p[i]) << (8 * i);
  return x;
}

} // namespace detail

inline std::string encode_binary(const RepresentationDataset& ds) {
  if (ds.dim < 1) throw FormatError("binary: dim must be >= 1");
  std::string out;
  out.reserve(kBinaryHeaderBytes + ds.size() * (1 + 4 * static_cast<std::size_t>(ds.dim)));
  out.append("S2DR", 4);
  detail::put_le<std::uint32_t>(out, kReprVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.dim));
  detail::put_le<std::uint64_t>(out, ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& r = ds.records[i];
    detail::check_record(r, ds.dim, "record " + std::to_string(i));
    out.push_back(static_cast<char>(r.label));
    for (int k = 0; k < ds.dim; ++k)
      detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(r.f[k])));
  }
  return out;
}

inline RepresentationDataset decode_binary(std::string_view bytes, const std::string& name = "binary") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  if (n < kBinaryHeaderBytes)
    throw FormatError(name + ": truncated header at byte offset " + std::to_string(n) + " (need 20 bytes)");
  if (std::memcmp(p, "S2DR", 4) != 0) throw FormatError(name + ": bad magic at byte offset 0");
  const auto version = detail::get_le<std::uint32_t>(p + 4);
  if (version != kReprVersion)
    throw FormatError(name + ": unsupported version " + std::to_string(version) + " at byte offset 4");
  const auto dim = detail::get_le<std::uint32_t>(p + 8);
  if (dim < 1 || dim > (1u << 24)) throw FormatError(name + ": invalid dim at byte offset 8");
  const auto count = detail::get_le<std::uint64_t>(p + 12);
  const std::size_t rec = 1 + 4 * static_cast<std::size_t>(dim);

  RepresentationDataset ds;
  ds.dim = static_cast<int>(dim);
  ds.records.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(count, (n - kBinaryHeaderBytes) / rec + 1)));
  std::size_t off = kBinaryHeaderBytes;
  for (std::uint64_t i = 0; i < count; ++i, off += rec) {
    if (off + rec > n)
      throw FormatError(name + ": truncated record " + std::to_string(i) + " at byte offset " + std::to_string(off));
    RepresentationRecord r;
    r.label = p[off];
    if (r.label != 0 && r.label != 1)
      throw FormatError(name + ": record " + std::to_string(i) + " has label " + std::to_string(r.label) +
                        " at byte offset " + std::to_string(off));
    r.f.resize(ds.dim);
    for (int k = 0; k < ds.dim; ++k)
      r.f[k] = static_cast<double>(std::bit_cast<float>(detail::get_le<std::uint32_t>(p + off + 1 + 4 * k)));
    const std::string where = name + ": record " + std::to_string(i);
    if (!r.f.allFinite()) throw FormatError(where + " has a non-finite value at byte offset " + std::to_string(off));
    detail::normalize_loaded(r.f, where);
    ds.records.push_back(std::move(r));
  }
  if (off != n) throw FormatError(name + ": trailing bytes at byte offset " + std::to_string(off));
  return ds;
}

inline void write_binary(const RepresentationDataset& ds, const std::filesystem::path& path) {
  write_file_atomic(path, encode_binary(ds));
}

inline RepresentationDataset read_binary(const std::filesystem::path& path) {
  return decode_binary(read_file(path), path.string());
}

inline std::string encode_jsonl(const RepresentationDataset& ds) {
  std::string out = nlohmann::json{{"format", "s2d-repr"}, {"version", kReprVersion}, {"dim", ds.dim}}.dump() + "\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& r = ds.records[i];
    detail::check_record(r, ds.dim, "record " + std::to_string(i));
    out += nlohmann::json{{"label", r.label}, {"f", std::vector<double>(r.f.data(), r.f.data() + r.f.size())}}.dump();
    out += '\n';
  }
  return out;
}

inline RepresentationDataset decode_jsonl(const std::string& text, const std::string& name = "jsonl") {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::optional<RepresentationDataset> ds;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = name + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(where + ": " + e.what());
    }
    try {
      if (!ds) {
        if (j.at("format").get<std::string>() != "s2d-repr") throw FormatError(where + ": header format is not s2d-repr");
        if (j.at("version").get<std::uint32_t>() != kReprVersion) throw FormatError(where + ": unsupported version");
        const int dim = j.at("dim").get<int>();
        if (dim < 1) throw FormatError(where + ": dim must be >= 1");
        ds = RepresentationDataset{dim, {}};
        continue;
      }
      RepresentationRecord r;
      r.label = j.at("label").get<int>();
      const auto& f = j.at("f");
      if (!f.is_array() || static_cast<int>(f.size()) != ds->dim)
        throw FormatError(where + ": 'f' must hold " + std::to_string(ds->dim) + " numbers");
      r.f.resize(ds->dim);
      for (int k = 0; k < ds->dim; ++k) r.f[k] = f[static_cast<std::size_t>(k)].get<double>();
      detail::check_record(r, ds->dim, where);
      detail::normalize_loaded(r.f, where);
      ds->records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
  }
  if (!ds) throw FormatError(name + ": missing header line");
  return *ds;
}

inline void write_jsonl(const RepresentationDataset& ds, const std::filesystem::path& path) {
  write_file_atomic(path, encode_jsonl(ds));
}

inline RepresentationDataset read_jsonl(const std::filesystem::path& path) {
  return decode_jsonl(read_file(path), path.string());
}

/// Dispatches on the leading magic bytes.
inline RepresentationDataset read_representations(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() >= 4 && bytes.compare(0, 4, "S2DR") == 0) return decode_binary(bytes, path.string());
  return decode_jsonl(bytes, path.string());
}

/// Steered representations of a token dataset under `v`, labels preserved.
inline RepresentationDataset represent_tokens(const TokenDataset& data, const Observer& obs, const SteeringVector& v,
                                              const ExtractionConfig& cfg) {
  RepresentationDataset ds{obs.dim(), {}};
  ds.records.reserve(data.size());
  for (const auto& item : data) ds.records.push_back({item.label, obs.steered_repr(item.x, v, cfg).coords()});
  return ds;
}

// Token dataset, JSON lines:
//   {"format":"s2d-tokens","version":1,"vocab":V[,"pad_id":P]}
//   {"label":0|1,"ids":[...]}
// Padding ids are stripped on load.

struct TokenDatasetFile {
  int vocab = 0;
  TokenDataset items;
  std::optional<std::uint32_t> pad_id;
};

inline std::string encode_tokens(const TokenDatasetFile& file) {
  nlohmann::json header{{"format", "s2d-tokens"}, {"version", 1}, {"vocab", file.vocab}};
  if (file.pad_id) header["pad_id"] = *file.pad_id;
  std::string out = header.dump() + "\n";
  for (const auto& it : file.items) out += nlohmann::json{{"label", it.label}, {"ids", it.x.ids}}.dump() + "\n";
  return out;
}

inline TokenDatasetFile decode_tokens(const std::string& text, const std::string& name = "tokens") {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::optional<TokenDatasetFile> file;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = name + ":" + std::to_string(lineno);
    try {
      const auto j = nlohmann::json::parse(line);
      if (!file) {
        if (j.at("format").get<std::string>() != "s2d-tokens") throw FormatError(where + ": header format is not s2d-tokens");
        if (j.at("version").get<int>() != 1) throw FormatError(where + ": unsupported version");
        file = TokenDatasetFile{j.at("vocab").get<int>(), {}, std::nullopt};
        if (file->vocab < 1) throw FormatError(where + ": vocab must be >= 1");
        if (j.contains("pad_id")) file->pad_id = j["pad_id"].get<std::uint32_t>();
        continue;
      }
      LabeledSeq item{{j.at("ids").get<std::vector<std::uint32_t>>()}, j.at("label").get<int>()};
      if (file->pad_id) std::erase(item.x.ids, *file->pad_id);
      if (item.label != 0 && item.label != 1) throw FormatError(where + ": label must be 0 or 1");
      if (item.x.empty()) throw FormatError(where + ": empty token sequence");
      for (auto id : item.x.ids)
        if (id >= static_cast<std::uint32_t>(file->vocab)) throw FormatError(where + ": token id out of vocabulary");
      file->items.push_back(std::move(item));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
  }
  if (!file) throw FormatError(name + ": missing header line");
  return *file;
}

inline void write_tokens(const TokenDatasetFile& file, const std::filesystem::path& path) {
  write_file_atomic(path, encode_tokens(file));
}

inline TokenDatasetFile read_tokens(const std::filesystem::path& path) {
  return decode_tokens(read_file(path), path.string());
}

/// True when the file starts with a token-dataset header.
inline bool is_token_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::string first;
  if (!std::getline(in, first)) return false;
  return first.find("\"s2d-tokens\"") != std::string::npos;
}

// Steering state: {"format":"s2d-state","version":1,"dim","kappa","v","mu0","mu1","step"}

inline nlohmann::json state_to_json(const SteeringState& s, double kappa) {
  auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  return {{"format", "s2d-state"},         {"version", 1},
          {"dim", s.v.size()},             {"kappa", kappa},
          {"v", vec(s.v)},                 {"mu0", vec(s.mu0_hat.coords())},
          {"mu1", vec(s.mu1_hat.coords())}, {"step", s.step}};
}

struct LoadedState {
  SteeringState state;
  double kappa;
};

inline LoadedState state_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "s2d-state") throw FormatError("state: wrong format tag");
    if (j.at("version").get<int>() != 1) throw FormatError("state: unsupported version");
    const int d = j.at("dim").get<int>();
    auto vec = [&](const char* key) {
      const auto x = j.at(key).get<std::vector<double>>();
      if (static_cast<int>(x.size()) != d) throw FormatError(std::string("state: '") + key + "' has wrong length");
      return Vector(Eigen::Map<const Vector>(x.data(), d));
    };
    SteeringState s{vec("v"), UnitVector::from_normalized(vec("mu0")), UnitVector::from_normalized(vec("mu1")),
                    j.at("step").get<std::size_t>(), {}};
    return {std::move(s), j.at("kappa").get<double>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("state: ") + e.what());
  }
}

inline void write_state(const SteeringState& s, double kappa, const std::filesystem::path& path) {
  write_file_atomic(path, state_to_json(s, kappa).dump(2) + "\n");
}

inline LoadedState read_state(const std::filesystem::path& path) {
  try {
    return state_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

} // namespace s2d
