#include "cpsprompt/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>

#include "cpsprompt/errors.hpp"

namespace cpsp::io {

namespace fs = std::filesystem;
using nlohmann::json;

void write_f64(std::ostream& os, std::span<const double> values) {
  std::array<char, 8> buf;
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    os.write(buf.data(), 8);
  }
}

void read_f64(std::istream& is, std::span<double> values) {
  std::array<unsigned char, 8> buf;
  for (double& v : values) {
    if (!is.read(reinterpret_cast<char*>(buf.data()), 8)) throw DataError("truncated f64 stream");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    v = std::bit_cast<double>(bits);
  }
}

void save_checkpoint(const fs::path& stem, std::span<const ad::Parameter* const> params, const json& meta) {
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  json manifest{{"format", "cpsp-checkpoint"}, {"version", 1}, {"meta", meta}, {"blobs", json::array()}};
  fs::path bin = stem;
  bin += ".bin";
  std::ofstream out(bin, std::ios::binary);
  if (!out) throw DataError("cannot write " + bin.string());
  std::size_t offset = 0;
  for (const auto* p : params) {
    manifest["blobs"].push_back(
        {{"name", p->name}, {"group", ad::group_name(p->group)}, {"shape", p->value.shape()}, {"offset", offset}});
    write_f64(out, p->value.data());
    offset += p->numel();
  }
  fs::path man = stem;
  man += ".json";
  std::ofstream(man) << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const fs::path& stem) {
  fs::path man = stem, bin = stem;
  man += ".json";
  bin += ".bin";
  std::ifstream min(man);
  if (!min) throw DataError("missing checkpoint manifest " + man.string());
  json manifest;
  try {
    manifest = json::parse(min);
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "cpsp-checkpoint") throw DataError("not a checkpoint: " + man.string());
  std::ifstream bin_in(bin, std::ios::binary);
  if (!bin_in) throw DataError("missing checkpoint data " + bin.string());
  Checkpoint ck;
  ck.meta = manifest.value("meta", json::object());
  for (const auto& blob : manifest.at("blobs")) {
    Tensor t(blob.at("shape").get<Shape>());
    bin_in.seekg(static_cast<std::streamoff>(blob.at("offset").get<std::size_t>() * 8));
    read_f64(bin_in, t.data());
    ck.tensors.emplace(blob.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

void restore(const Checkpoint& ckpt, std::span<ad::Parameter* const> params) {
  for (auto* p : params) {
    auto it = ckpt.tensors.find(p->name);
    if (it == ckpt.tensors.end()) throw DataError("checkpoint lacks parameter " + p->name);
    if (it->second.shape() != p->value.shape()) {
      throw DataError("checkpoint shape mismatch for " + p->name + ": " + shape_str(it->second.shape()) + " vs " +
                      shape_str(p->value.shape()));
    }
    p->value = it->second;
  }
}

}  // namespace cpsp::io
