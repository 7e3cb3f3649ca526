#pragma once

// Checkpoint container, little-endian:
//   "CGZK" | u16 version=1 | u16 reserved=0 | u32 json length | JSON config
//   u32 tensor count | per tensor: u16 name length, name, u32 rows, u32 cols, rows*cols f64
// Tensors appear in parameter declaration order.

#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "causalgaze/dataio.hpp"
#include "causalgaze/error.hpp"
#include "causalgaze/params.hpp"

namespace causalgaze::checkpoint {

inline constexpr std::string_view kMagic = "CGZK";
inline constexpr std::uint16_t kVersion = 1;

struct Checkpoint {
  detector::DetectorParams params;
  nlohmann::json meta;  // resolved run configuration and anything else the writer attached
};

/// `meta` is stored alongside the detector config under "run".
inline std::string encode(const detector::DetectorParams& params, const nlohmann::json& meta = {}) {
  using dataio::detail::put_u16;
  using dataio::detail::put_u32;
  nlohmann::ordered_json header;
  header["detector"] = nlohmann::json(params.config);
  header["run"] = meta;
  const std::string js = header.dump();
  std::string b(kMagic);
  put_u16(b, kVersion);
  put_u16(b, 0);
  put_u32(b, static_cast<std::uint32_t>(js.size()));
  b += js;
  put_u32(b, static_cast<std::uint32_t>(params.tensor_count()));
  params.for_each([&](const std::string& name, const Tensor& t, bool) {
    put_u16(b, static_cast<std::uint16_t>(name.size()));
    b += name;
    put_u32(b, static_cast<std::uint32_t>(t.rows()));
    put_u32(b, static_cast<std::uint32_t>(t.cols()));
    for (double v : t.data()) dataio::detail::put_f64(b, v);
  });
  return b;
}

inline Checkpoint decode(std::string_view bytes) {
  dataio::detail::Reader rd(bytes);
  if (bytes.substr(0, kMagic.size()) != kMagic) throw FormatError("unrecognized format: not a checkpoint");
  rd.take(4, "magic");
  const auto version = rd.uint(2, "version");
  if (version != kVersion) throw FormatError("unrecognized format: checkpoint version " + std::to_string(version));
  rd.uint(2, "reserved");
  const auto js_len = rd.uint(4, "config length");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(rd.take(js_len, "config"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  Checkpoint ck;
  detector::DetectorConfig cfg;
  try {
    cfg = header.at("detector").get<detector::DetectorConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  ck.meta = header.value("run", nlohmann::json{});
  ck.params = detector::init_params(cfg);
  const auto count = rd.uint(4, "tensor count");
  if (count != ck.params.tensor_count()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, config implies " +
                      std::to_string(ck.params.tensor_count()));
  }
  ck.params.for_each([&](const std::string& name, Tensor& t, bool) {
    const auto n = rd.uint(2, "name length");
    const std::string_view got = rd.take(n, "name");
    if (got != name) throw FormatError("checkpoint tensor '" + std::string(got) + "' where '" + name + "' expected");
    const auto rows = rd.uint(4, "rows");
    const auto cols = rd.uint(4, "cols");
    if (rows != t.rows() || cols != t.cols()) {
      throw FormatError("checkpoint tensor " + name + " is " + std::to_string(rows) + "x" + std::to_string(cols) +
                        ", expected " + t.shape_string());
    }
    for (auto& v : t.data()) v = rd.f64(name);
    if (!t.all_finite()) throw FormatError("checkpoint tensor " + name + " holds non-finite values");
  });
  if (rd.remaining() != 0) throw FormatError("trailing bytes after checkpoint tensors");
  return ck;
}

inline void save(const detector::DetectorParams& params, const std::filesystem::path& path,
                 const nlohmann::json& meta = {}) {
  dataio::detail::write_file(path, encode(params, meta));
}

inline Checkpoint load(const std::filesystem::path& path) { return decode(dataio::detail::read_file(path)); }

}  // namespace causalgaze::checkpoint
