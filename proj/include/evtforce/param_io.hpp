#pragma once

// Parameter serialization: one flat little-endian float32 blob holding every
// named parameter back to back, plus a JSON index {name: {shape, offset}}
// with byte offsets into the blob.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace evtforce {

struct ParameterRecord {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> values;
};

struct EncodedParameters {
  std::string blob;
  nlohmann::json index;
};

class ParameterIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

EncodedParameters encode_parameters(const std::vector<ParameterRecord>& params);

/// Records in blob order. Throws ParameterIoError on any inconsistency
/// between index and blob.
std::vector<ParameterRecord> decode_parameters(std::string_view blob, const nlohmann::json& index);

}  // namespace evtforce
