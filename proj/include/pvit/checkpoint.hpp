#pragma once

// Binary checkpoints:
//   "PVIT" | u32 version | u32 length + UTF-8 JSON header |
//   per tensor: u32 name length, name, u32 rank, u32 dims[rank], f32 values
// All integers and floats little-endian; tensors in the model's declared order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pvit/errors.hpp"
#include "pvit/model.hpp"
#include "pvit/prior.hpp"
#include "pvit/tensor.hpp"

namespace pvit {

inline constexpr char kCheckpointMagic[4] = {'P', 'V', 'I', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json header;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(std::vector<char> bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{static_cast<unsigned char>(bytes_[pos_ + i])} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }
  const std::string& path() const { return path_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("checkpoint '" + path_ + "' is truncated");
  }
  std::vector<char> bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename Params>
void write_checkpoint(const std::string& path, const nlohmann::json& header, const Params& params) {
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  const std::string h = header.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  for (const auto& [name, t] : params) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t->shape.size()));
    for (auto d : t->shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t->data) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write checkpoint '" + path + "'");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open checkpoint '" + path + "'");
  detail::ByteReader r({std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()}, path);
  if (r.str(4) != std::string(kCheckpointMagic, 4)) {
    throw FormatError("'" + path + "' is not a checkpoint (bad magic)");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint '" + path + "' has unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  try {
    ck.header = nlohmann::json::parse(r.str(r.u32()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint '" + path + "': malformed header: " + e.what());
  }
  while (!r.done()) {
    std::string name = r.str(r.u32());
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u32();
    std::vector<double> data(shape_size(shape));
    for (auto& v : data) v = static_cast<double>(std::bit_cast<float>(r.u32()));
    try {
      ck.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    } catch (const ShapeError& e) {
      throw FormatError("checkpoint '" + path + "': " + e.what());
    }
  }
  return ck;
}

namespace detail {

template <typename Params>
void assign_tensors(const Checkpoint& ck, const Params& params, const std::string& path) {
  if (ck.tensors.size() != params.size()) {
    throw FormatError("checkpoint '" + path + "' holds " + std::to_string(ck.tensors.size()) +
                      " tensors, model declares " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = params[i];
    const auto& [ck_name, ck_t] = ck.tensors[i];
    if (ck_name != name || ck_t.shape != t->shape) {
      throw FormatError("checkpoint '" + path + "': tensor " + std::to_string(i) + " is '" + ck_name +
                        "' " + shape_string(ck_t.shape) + ", expected '" + name + "' " +
                        shape_string(t->shape));
    }
    t->data = ck_t.data;
  }
}

}  // namespace detail

inline void save_pvit(const std::string& path, const PViTModel& model, std::uint64_t trained_steps = 0) {
  nlohmann::json header = model.config();
  header["kind"] = "pvit";
  header["trained_steps"] = trained_steps;
  write_checkpoint(path, header, model.parameters());
}

struct LoadedPViT {
  PViTModel model;
  std::uint64_t trained_steps = 0;
};

inline LoadedPViT load_pvit(const std::string& path) {
  Checkpoint ck = read_checkpoint(path);
  if (ck.header.value("kind", std::string()) != "pvit") {
    throw FormatError("checkpoint '" + path + "' does not hold a PViT model");
  }
  PViTConfig cfg;
  try {
    cfg = ck.header.get<PViTConfig>();
    cfg.validate();
  } catch (const std::exception& e) {
    throw FormatError("checkpoint '" + path + "': bad config: " + e.what());
  }
  LoadedPViT out{PViTModel(cfg), ck.header.value("trained_steps", std::uint64_t{0})};
  detail::assign_tensors(ck, out.model.parameters(), path);
  return out;
}

inline void save_prior(const std::string& path, const PriorMlp& mlp) {
  nlohmann::json header = mlp.config();
  header["kind"] = "prior-mlp";
  write_checkpoint(path, header, mlp.parameters());
}

inline PriorMlp load_prior(const std::string& path) {
  Checkpoint ck = read_checkpoint(path);
  if (ck.header.value("kind", std::string()) != "prior-mlp") {
    throw FormatError("checkpoint '" + path + "' does not hold a prior MLP");
  }
  MlpConfig cfg;
  try {
    cfg = ck.header.get<MlpConfig>();
  } catch (const std::exception& e) {
    throw FormatError("checkpoint '" + path + "': bad config: " + e.what());
  }
  PriorMlp mlp(cfg);
  detail::assign_tensors(ck, mlp.parameters(), path);
  return mlp;
}

}  // namespace pvit
