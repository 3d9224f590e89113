#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "defusion/common.hpp"
#include "defusion/params.hpp"

namespace defusion {

// Checkpoint layout: an 8-byte little-endian header length, a JSON header
// listing every parameter (name, shape, dtype, byte offset into the payload,
// byte count), then the concatenated raw little-endian IEEE-754 payloads.
// Round-trips are bit-exact.

namespace detail {

template <class Real>
const char* dtype_name() {
  if constexpr (std::is_same_v<Real, double>) return "f64";
  else return "f32";
}

template <class Real>
void append_le(std::vector<unsigned char>& out, Real value) {
  using Bits = std::conditional_t<sizeof(Real) == 8, std::uint64_t, std::uint32_t>;
  Bits bits;
  std::memcpy(&bits, &value, sizeof(Real));
  for (size_t b = 0; b < sizeof(Real); ++b)
    out.push_back(static_cast<unsigned char>((bits >> (8 * b)) & 0xff));
}

template <class Real>
Real read_le(const unsigned char* p) {
  using Bits = std::conditional_t<sizeof(Real) == 8, std::uint64_t, std::uint32_t>;
  Bits bits = 0;
  for (size_t b = 0; b < sizeof(Real); ++b)
    bits |= static_cast<Bits>(p[b]) << (8 * b);
  Real value;
  std::memcpy(&value, &bits, sizeof(Real));
  return value;
}

}  // namespace detail

template <class Real>
void save_checkpoint(const std::string& path, const ParamList<Real>& params) {
  nlohmann::ordered_json header;
  header["format"] = "defusion-checkpoint";
  header["version"] = 1;
  header["dtype"] = detail::dtype_name<Real>();
  auto entries = nlohmann::ordered_json::array();
  std::vector<unsigned char> payload;
  std::uint64_t offset = 0;
  for (const auto& p : params) {
    const std::uint64_t nbytes = p.tensor.data().size() * sizeof(Real);
    nlohmann::ordered_json e;
    e["name"] = p.name;
    e["shape"] = p.tensor.shape();
    e["dtype"] = detail::dtype_name<Real>();
    e["offset"] = offset;
    e["nbytes"] = nbytes;
    entries.push_back(std::move(e));
    for (Real v : p.tensor.data()) detail::append_le(payload, v);
    offset += nbytes;
  }
  header["params"] = std::move(entries);

  const std::string header_text = header.dump();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(strcat_msg("checkpoint: cannot write '", path, "'"));
  const std::uint64_t hlen = header_text.size();
  unsigned char lenbuf[8];
  for (int b = 0; b < 8; ++b)
    lenbuf[b] = static_cast<unsigned char>((hlen >> (8 * b)) & 0xff);
  f.write(reinterpret_cast<const char*>(lenbuf), 8);
  f.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size()));
  if (!f) throw IoError(strcat_msg("checkpoint: write failed for '", path, "'"));
}

/// Loads values into an existing parameter list. Every checkpoint entry must
/// match a parameter with identical name, shape, and dtype, and vice versa.
template <class Real>
void load_checkpoint(const std::string& path, ParamList<Real>& params) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(strcat_msg("checkpoint: cannot open '", path, "'"));
  unsigned char lenbuf[8];
  f.read(reinterpret_cast<char*>(lenbuf), 8);
  if (!f) throw IoError(strcat_msg("checkpoint: truncated header in '", path, "'"));
  std::uint64_t hlen = 0;
  for (int b = 0; b < 8; ++b)
    hlen |= static_cast<std::uint64_t>(lenbuf[b]) << (8 * b);
  std::string header_text(hlen, '\0');
  f.read(header_text.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw IoError(strcat_msg("checkpoint: truncated header in '", path, "'"));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(strcat_msg("checkpoint: bad header in '", path, "': ", e.what()));
  }
  if (header.value("format", "") != std::string("defusion-checkpoint") ||
      header.value("version", 0) != 1)
    throw IoError(strcat_msg("checkpoint: unknown format/version in '", path, "'"));

  std::vector<unsigned char> payload(std::istreambuf_iterator<char>(f), {});
  const auto& entries = header.at("params");
  if (entries.size() != params.size())
    throw ConfigError(strcat_msg("checkpoint: has ", entries.size(),
                                 " params, model expects ", params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& e = entries[i];
    auto& p = params[i];
    if (e.at("name").get<std::string>() != p.name)
      throw ConfigError(strcat_msg("checkpoint: param ", i, " is '",
                                   e.at("name").get<std::string>(),
                                   "', model expects '", p.name, "'"));
    const Shape shape = e.at("shape").get<Shape>();
    if (shape != p.tensor.shape())
      throw ConfigError(strcat_msg("checkpoint: '", p.name, "' has shape ",
                                   shape_str(shape), ", model expects ",
                                   shape_str(p.tensor.shape())));
    if (e.at("dtype").get<std::string>() != detail::dtype_name<Real>())
      throw ConfigError(strcat_msg("checkpoint: '", p.name, "' has dtype ",
                                   e.at("dtype").get<std::string>(),
                                   ", model expects ",
                                   detail::dtype_name<Real>()));
    const std::uint64_t offset = e.at("offset").get<std::uint64_t>();
    const std::uint64_t nbytes = e.at("nbytes").get<std::uint64_t>();
    if (offset + nbytes > payload.size())
      throw IoError(strcat_msg("checkpoint: payload too short for '", p.name, "'"));
    auto& data = p.tensor.data();
    for (size_t j = 0; j < data.size(); ++j)
      data[j] = detail::read_le<Real>(payload.data() + offset + j * sizeof(Real));
  }
}

}  // namespace defusion
