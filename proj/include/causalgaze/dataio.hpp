#pragma once

// Graph records and their on-disk form.
//
// CGZ1 record file (all integers little-endian):
//   "CGZ1" | u16 version=1 | u32 L | u32 d | u32 layer_index | u8 label
//   | 3 zero bytes | L*d f32 hidden (row-major) | L*L f32 attention (row-major)
//
// Tokens and model metadata live in a JSON manifest next to the records:
//   {"records": [{"id", "file", "tokens", "model_id", "layer_index", "split"}]}

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalgaze/error.hpp"
#include "causalgaze/tensor.hpp"

namespace causalgaze::dataio {

namespace fs = std::filesystem;

enum class Label : std::uint8_t { Fact = 0, Hallucination = 1, Unknown = 255 };

constexpr bool is_known(Label l) noexcept { return l == Label::Fact || l == Label::Hallucination; }
constexpr std::size_t class_index(Label l) noexcept { return l == Label::Hallucination ? 1 : 0; }

struct RecordMeta {
  std::string model_id;
  std::uint32_t layer_index = 0;
};

/// One sample: hidden states (L x d) and causal attention (L x L) at one layer.
struct GraphRecord {
  std::string sample_id;
  std::vector<std::string> tokens;  // empty until a manifest attaches them
  Tensor hidden;
  Tensor attention;
  Label label = Label::Unknown;
  RecordMeta meta;

  std::size_t length() const noexcept { return attention.rows(); }
  std::size_t dim() const noexcept { return hidden.cols(); }
};

/// Attention row-sum tolerance.
inline constexpr double kRowSumTolerance = 1e-2;

struct Violation {
  std::string kind;  // "shape", "tokens", "non-finite hidden", "mask violation", "row-sum", ...
  std::string field;
  std::size_t row = 0;
  std::size_t col = 0;
  std::string detail;

  std::string describe() const {
    return kind + " in " + field + " at [" + std::to_string(row) + "," + std::to_string(col) +
           "]: " + detail;
  }
  bool operator==(const Violation&) const = default;
};

/// Every invariant breach in the record; empty iff the record is legal.
inline std::vector<Violation> validate(const GraphRecord& r) {
  std::vector<Violation> out;
  const std::size_t L = r.attention.rows();
  if (L == 0 || r.hidden.cols() == 0) {
    out.push_back({"shape", "attention", 0, 0, "L and d must be at least 1"});
    return out;
  }
  if (r.attention.cols() != L) {
    out.push_back({"shape", "attention", 0, 0, "attention is " + r.attention.shape_string() + ", not square"});
    return out;
  }
  if (r.hidden.rows() != L) {
    out.push_back({"shape", "hidden", 0, 0,
                   "hidden has " + std::to_string(r.hidden.rows()) + " rows, attention has " + std::to_string(L)});
    return out;
  }
  if (!r.tokens.empty() && r.tokens.size() != L) {
    out.push_back({"tokens", "tokens", 0, 0,
                   std::to_string(r.tokens.size()) + " tokens for L=" + std::to_string(L)});
  }
  for (std::size_t i = 0; i < r.hidden.rows(); ++i)
    for (std::size_t j = 0; j < r.hidden.cols(); ++j)
      if (!std::isfinite(r.hidden(i, j)))
        out.push_back({"non-finite hidden", "hidden", i, j, "value is not finite"});
  for (std::size_t i = 0; i < L; ++i) {
    double sum = 0.0;
    bool row_finite = true;
    for (std::size_t j = 0; j < L; ++j) {
      const double a = r.attention(i, j);
      if (!std::isfinite(a)) {
        out.push_back({"non-finite attention", "attention", i, j, "value is not finite"});
        row_finite = false;
        continue;
      }
      if (j > i && a != 0.0) {
        out.push_back({"mask violation", "attention", i, j, "entry above the diagonal is " + std::to_string(a)});
      }
      if (a < 0.0) out.push_back({"negative attention", "attention", i, j, "value " + std::to_string(a) + " < 0"});
      if (j <= i) sum += a;
    }
    if (row_finite && std::abs(sum - 1.0) > kRowSumTolerance) {
      out.push_back({"row-sum", "attention", i, 0,
                     "causal row sum " + std::to_string(sum) + " outside [1-1e-2, 1+1e-2]"});
    }
  }
  if (r.label != Label::Fact && r.label != Label::Hallucination && r.label != Label::Unknown) {
    out.push_back({"label", "label", 0, 0, "label byte " + std::to_string(static_cast<int>(r.label))});
  }
  return out;
}

/// Rounds every element to the nearest f32, i.e. what a file round-trip yields.
inline Tensor quantize_f32(Tensor t) {
  for (auto& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  return t;
}

namespace detail {

inline void put_u16(std::string& b, std::uint16_t v) {
  b.push_back(static_cast<char>(v & 0xFF));
  b.push_back(static_cast<char>(v >> 8));
}
inline void put_u32(std::string& b, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) b.push_back(static_cast<char>((v >> s) & 0xFF));
}
inline void put_u64(std::string& b, std::uint64_t v) {
  for (int s = 0; s < 64; s += 8) b.push_back(static_cast<char>((v >> s) & 0xFF));
}
inline void put_f32(std::string& b, double v) { put_u32(b, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
inline void put_f64(std::string& b, double v) { put_u64(b, std::bit_cast<std::uint64_t>(v)); }

/// Bounds-checked little-endian reader over a byte buffer.
class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

  void need(std::size_t n, std::string_view what) const {
    if (remaining() < n) {
      throw FormatError("truncated: need " + std::to_string(n) + " bytes for " + std::string(what) +
                        ", " + std::to_string(remaining()) + " left");
    }
  }
  std::uint64_t uint(std::size_t width, std::string_view what) {
    need(width, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += width;
    return v;
  }
  double f32(std::string_view what) {
    return static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(uint(4, what))));
  }
  double f64(std::string_view what) { return std::bit_cast<double>(uint(8, what)); }
  std::string_view take(std::size_t n, std::string_view what) {
    need(n, what);
    std::string_view s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failure on " + path.string());
  return ss.str();
}

inline void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failure on " + path.string());
}

}  // namespace detail

inline constexpr std::string_view kRecordMagic = "CGZ1";
inline constexpr std::uint16_t kRecordVersion = 1;

inline std::string encode_record(const GraphRecord& r) {
  if (auto v = validate(r); !v.empty()) {
    throw FormatError("refusing to write invalid record '" + r.sample_id + "': " + v.front().describe());
  }
  const std::size_t L = r.length();
  const std::size_t d = r.dim();
  std::string b;
  b.reserve(22 + 4 * (L * d + L * L));
  b.append(kRecordMagic);
  detail::put_u16(b, kRecordVersion);
  detail::put_u32(b, static_cast<std::uint32_t>(L));
  detail::put_u32(b, static_cast<std::uint32_t>(d));
  detail::put_u32(b, r.meta.layer_index);
  b.push_back(static_cast<char>(static_cast<std::uint8_t>(r.label)));
  b.append(3, '\0');
  for (double v : r.hidden.data()) detail::put_f32(b, v);
  for (double v : r.attention.data()) detail::put_f32(b, v);
  return b;
}

/// Parses CGZ1 bytes without checking the record invariants.
inline GraphRecord decode_record_unchecked(std::string_view bytes) {
  detail::Reader rd(bytes);
  if (bytes.size() < 4 || bytes.substr(0, 4) != kRecordMagic) throw FormatError("unrecognized format: bad magic");
  rd.take(4, "magic");
  const auto version = rd.uint(2, "version");
  if (version != kRecordVersion) throw FormatError("unrecognized format: unsupported version " + std::to_string(version));
  const auto L = rd.uint(4, "L");
  const auto d = rd.uint(4, "d");
  GraphRecord r;
  r.meta.layer_index = static_cast<std::uint32_t>(rd.uint(4, "layer_index"));
  const auto label = rd.uint(1, "label");
  if (label != 0 && label != 1 && label != 255) throw FormatError("invalid label byte " + std::to_string(label));
  r.label = static_cast<Label>(label);
  rd.take(3, "padding");
  if (L == 0 || d == 0) throw FormatError("header declares L=" + std::to_string(L) + ", d=" + std::to_string(d));
  const std::uint64_t payload = 4 * (L * d + L * L);
  if (rd.remaining() < payload) {
    throw FormatError("truncated: header declares L=" + std::to_string(L) + ", d=" + std::to_string(d) +
                      " (" + std::to_string(payload) + " payload bytes) but only " +
                      std::to_string(rd.remaining()) + " remain");
  }
  if (rd.remaining() > payload) {
    throw FormatError("trailing bytes: " + std::to_string(rd.remaining() - payload) + " beyond declared payload");
  }
  r.hidden = Tensor(L, d);
  for (auto& v : r.hidden.data()) v = rd.f32("hidden");
  r.attention = Tensor(L, L);
  for (auto& v : r.attention.data()) v = rd.f32("attention");
  return r;
}

inline GraphRecord decode_record(std::string_view bytes) {
  GraphRecord r = decode_record_unchecked(bytes);
  if (auto v = validate(r); !v.empty()) throw FormatError("invalid record: " + v.front().describe());
  return r;
}

inline void save_record(const GraphRecord& record, const fs::path& path) {
  detail::write_file(path, encode_record(record));
}

/// Loads and validates a CGZ1 file; sample_id defaults to the file stem.
inline GraphRecord load_record(const fs::path& path) {
  GraphRecord r = decode_record(detail::read_file(path));
  r.sample_id = path.stem().string();
  return r;
}

// ---- datasets ---------------------------------------------------------------

enum class Split : std::uint8_t { Train, Val, Test };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val" || s == "validation") return Split::Val;
  if (s == "test") return Split::Test;
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

struct Dataset {
  std::vector<GraphRecord> records;
  std::map<std::string, Split> splits;
  nlohmann::json generator;  // generating configuration, null for real data
  std::vector<std::string> warnings;

  const GraphRecord* find(std::string_view id) const {
    for (const auto& r : records)
      if (r.sample_id == id) return &r;
    return nullptr;
  }

  std::vector<const GraphRecord*> in_split(Split s) const {
    std::vector<const GraphRecord*> out;
    for (const auto& r : records) {
      auto it = splits.find(r.sample_id);
      if (it != splits.end() && it->second == s) out.push_back(&r);
    }
    return out;
  }

  std::size_t count(Split s) const { return in_split(s).size(); }
};

inline constexpr std::string_view kManifestName = "manifest.json";

/// Resolves a dataset argument: a manifest file, or a directory holding one.
inline fs::path manifest_path(const fs::path& p) {
  return fs::is_directory(p) ? p / kManifestName : p;
}

inline Dataset load_manifest(const fs::path& path_or_dir) {
  const fs::path path = manifest_path(path_or_dir);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + path.string() + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("records") || !j["records"].is_array()) {
    throw FormatError("manifest " + path.string() + ": missing 'records' array");
  }
  Dataset ds;
  if (j.contains("config")) ds.generator = j["config"];
  const fs::path base = path.parent_path();
  std::set<std::string> seen;
  for (const auto& e : j["records"]) {
    try {
      const std::string id = e.at("id").get<std::string>();
      const Split split = parse_split(e.at("split").get<std::string>());
      if (auto it = ds.splits.find(id); it != ds.splits.end()) {
        if (it->second != split) throw FormatError("duplicate split assignment for '" + id + "'");
        throw FormatError("duplicate sample_id '" + id + "'");
      }
      const fs::path file = base / e.at("file").get<std::string>();
      if (!fs::exists(file)) throw IoError("missing record file " + file.string() + " for '" + id + "'");
      GraphRecord r = load_record(file);
      r.sample_id = id;
      if (e.contains("tokens")) r.tokens = e["tokens"].get<std::vector<std::string>>();
      if (e.contains("model_id")) r.meta.model_id = e["model_id"].get<std::string>();
      if (e.contains("layer_index") && e["layer_index"].get<std::uint32_t>() != r.meta.layer_index) {
        throw FormatError("layer_index mismatch between manifest and file for '" + id + "'");
      }
      if (auto v = validate(r); !v.empty()) throw FormatError("record '" + id + "': " + v.front().describe());
      ds.splits.emplace(id, split);
      ds.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError("manifest " + path.string() + ": malformed record entry: " + ex.what());
    }
  }
  if (j.contains("counts") && j["counts"].is_object()) {
    for (auto [name, declared] : j["counts"].items()) {
      const std::size_t actual = ds.count(parse_split(name));
      if (declared.get<std::size_t>() != actual) {
        ds.warnings.push_back("split " + name + " declares " + std::to_string(declared.get<std::size_t>()) +
                              " records, manifest lists " + std::to_string(actual));
      }
    }
  }
  return ds;
}

/// Writes every record as <id>.cgz plus manifest.json into dir.
inline fs::path save_dataset(const Dataset& ds, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json records = nlohmann::json::array();
  std::map<std::string, std::size_t> counts;
  for (const auto& r : ds.records) {
    const std::string file = r.sample_id + ".cgz";
    save_record(r, dir / file);
    auto it = ds.splits.find(r.sample_id);
    if (it == ds.splits.end()) throw ConfigError("record '" + r.sample_id + "' has no split");
    ++counts[std::string(split_name(it->second))];
    records.push_back({{"id", r.sample_id},
                       {"file", file},
                       {"tokens", r.tokens},
                       {"model_id", r.meta.model_id},
                       {"layer_index", r.meta.layer_index},
                       {"split", split_name(it->second)}});
  }
  nlohmann::json j;
  j["records"] = std::move(records);
  j["counts"] = counts;
  if (!ds.generator.is_null()) j["config"] = ds.generator;
  const fs::path path = dir / kManifestName;
  detail::write_file(path, j.dump(2) + "\n");
  return path;
}

}  // namespace causalgaze::dataio
