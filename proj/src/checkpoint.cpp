#include "met/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace met {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace {
constexpr char kMagic[8] = {'M', 'E', 'T', 'C', 'K', 'P', 'T', '1'};
}

std::string dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

Dtype dtype_from_name(const std::string& s) {
  if (s == "f64") return Dtype::f64;
  if (s == "f32") return Dtype::f32;
  throw std::invalid_argument("unknown dtype: " + s);
}

void atomic_write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::create_directories(path.parent_path().empty()
                                          ? std::filesystem::path(".")
                                          : path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& path,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors,
                     const CheckpointMeta& meta, Dtype storage) {
  nlohmann::json header;
  header["format_version"] = 1;
  header["nonlinearity"] = meta.nonlinearity;
  header["meta"] = meta.extra;
  nlohmann::json entries = nlohmann::json::array();
  const size_t elem = storage == Dtype::f32 ? sizeof(float) : sizeof(double);
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = t->shape();
    e["dtype"] = dtype_name(storage);
    e["offset"] = offset;
    e["nbytes"] = static_cast<uint64_t>(t->numel()) * elem;
    offset += static_cast<uint64_t>(t->numel()) * elem;
    entries.push_back(std::move(e));
  }
  header["tensors"] = std::move(entries);

  const std::string hdr = header.dump();
  std::string bytes;
  bytes.reserve(sizeof(kMagic) + 8 + hdr.size() + offset);
  bytes.append(kMagic, sizeof(kMagic));
  const uint64_t hlen = hdr.size();
  bytes.append(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  bytes.append(hdr);
  for (const auto& [name, t] : tensors) {
    if (storage == Dtype::f64) {
      bytes.append(reinterpret_cast<const char*>(t->data()),
                   static_cast<size_t>(t->numel()) * sizeof(double));
    } else {
      for (int64_t i = 0; i < t->numel(); ++i) {
        const float f = static_cast<float>((*t)[i]);
        bytes.append(reinterpret_cast<const char*>(&f), sizeof(f));
      }
    }
  }
  atomic_write_file(path, bytes);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path.string());
  }
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path.string());
  std::string hdr(hlen, '\0');
  in.read(hdr.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path.string());
  nlohmann::json header = nlohmann::json::parse(hdr);

  LoadedCheckpoint ckpt;
  ckpt.meta.nonlinearity = header.at("nonlinearity").get<std::string>();
  ckpt.meta.extra = header.value("meta", nlohmann::json::object());
  const std::streampos payload_start = in.tellg();
  for (const auto& e : header.at("tensors")) {
    const std::string name = e.at("name").get<std::string>();
    const std::vector<int64_t> shape = e.at("shape").get<std::vector<int64_t>>();
    const Dtype dt = dtype_from_name(e.at("dtype").get<std::string>());
    const uint64_t offset = e.at("offset").get<uint64_t>();
    const uint64_t nbytes = e.at("nbytes").get<uint64_t>();
    Tensor t(shape);
    in.seekg(payload_start + static_cast<std::streamoff>(offset));
    if (dt == Dtype::f64) {
      if (nbytes != static_cast<uint64_t>(t.numel()) * sizeof(double)) {
        throw std::runtime_error("payload size mismatch for tensor " + name);
      }
      in.read(reinterpret_cast<char*>(t.data()),
              static_cast<std::streamsize>(nbytes));
    } else {
      if (nbytes != static_cast<uint64_t>(t.numel()) * sizeof(float)) {
        throw std::runtime_error("payload size mismatch for tensor " + name);
      }
      std::vector<float> buf(static_cast<size_t>(t.numel()));
      in.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(nbytes));
      for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(buf[static_cast<size_t>(i)]);
    }
    if (!in) throw std::runtime_error("truncated payload for tensor " + name);
    ckpt.storage[name] = dt;
    ckpt.tensors.emplace(name, std::move(t));
  }
  return ckpt;
}

}  // namespace met
