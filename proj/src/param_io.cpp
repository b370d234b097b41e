#include "evtforce/param_io.hpp"

#include <algorithm>
#include <numeric>

#include "evtforce/binary_io.hpp"

namespace evtforce {

EncodedParameters encode_parameters(const std::vector<ParameterRecord>& params) {
  EncodedParameters out;
  out.index = nlohmann::json::object();
  for (const auto& p : params) {
    const std::size_t expected = std::accumulate(p.shape.begin(), p.shape.end(), std::size_t{1},
                                                 std::multiplies<>());
    if (expected != p.values.size()) {
      throw ParameterIoError("parameter '" + p.name + "' has " + std::to_string(p.values.size()) +
                             " values for its shape");
    }
    if (out.index.contains(p.name)) throw ParameterIoError("duplicate parameter '" + p.name + "'");
    out.index[p.name] = {{"shape", p.shape}, {"offset", out.blob.size()}};
    for (float v : p.values) binary::put_f32(out.blob, v);
  }
  return out;
}

std::vector<ParameterRecord> decode_parameters(std::string_view blob, const nlohmann::json& index) {
  if (!index.is_object()) throw ParameterIoError("parameter index must be a JSON object");
  std::vector<ParameterRecord> records;
  std::size_t covered = 0;
  for (const auto& [name, entry] : index.items()) {
    ParameterRecord rec;
    rec.name = name;
    std::size_t offset = 0;
    try {
      rec.shape = entry.at("shape").get<std::vector<std::size_t>>();
      offset = entry.at("offset").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw ParameterIoError("bad index entry for '" + name + "': " + e.what());
    }
    const std::size_t n = std::accumulate(rec.shape.begin(), rec.shape.end(), std::size_t{1},
                                          std::multiplies<>());
    if (offset % 4 != 0 || offset > blob.size() || (blob.size() - offset) / 4 < n) {
      throw ParameterIoError("parameter '" + name + "' lies outside the blob");
    }
    binary::Reader in(blob.substr(offset, n * 4));
    rec.values.resize(n);
    for (auto& v : rec.values) v = *in.get_f32();
    covered += n * 4;
    records.push_back(std::move(rec));
  }
  if (covered != blob.size()) throw ParameterIoError("blob size does not match parameter index");
  std::sort(records.begin(), records.end(), [&](const auto& a, const auto& b) {
    return index[a.name]["offset"].template get<std::size_t>() <
           index[b.name]["offset"].template get<std::size_t>();
  });
  return records;
}

}  // namespace evtforce
