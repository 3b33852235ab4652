#pragma once

// Named parameter blobs: a JSON manifest (<stem>.json) next to a flat file of
// little-endian 64-bit floats (<stem>.bin).

#include <filesystem>
#include <map>
#include <span>
#include <string>

#include <json.hpp>

#include "cpsprompt/autodiff.hpp"

namespace cpsp::io {

struct Checkpoint {
  nlohmann::json meta;
  std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const std::filesystem::path& stem, std::span<const ad::Parameter* const> params,
                     const nlohmann::json& meta = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& stem);

// Copies blobs into matching parameters; a missing name or a shape mismatch is
// a DataError.
void restore(const Checkpoint& ckpt, std::span<ad::Parameter* const> params);

// Raw little-endian f64 streams, shared with the dataset dump.
void write_f64(std::ostream& os, std::span<const double> values);
void read_f64(std::istream& is, std::span<double> values);

}  // namespace cpsp::io
