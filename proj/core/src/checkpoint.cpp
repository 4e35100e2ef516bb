#include "sod/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "sod/graph.hpp"

namespace sod {

namespace {

constexpr char kMagic[8] = {'S', 'O', 'D', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  put_u32(os, static_cast<std::uint32_t>(v));
  put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw CheckpointError("truncated checkpoint");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& is) {
  std::uint64_t lo = get_u32(is);
  std::uint64_t hi = get_u32(is);
  return lo | (hi << 32);
}

void put_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  put_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (int d = 0; d < t.rank(); ++d) put_u32(os, static_cast<std::uint32_t>(t.dim(d)));
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.data().size() * sizeof(real)));
}

void get_tensor(std::istream& is, const std::string& want_name, Tensor& into) {
  std::uint32_t nl = get_u32(is);
  std::string name(nl, '\0');
  if (!is.read(name.data(), nl)) throw CheckpointError("truncated checkpoint");
  if (name != want_name)
    throw CheckpointError("tensor order mismatch: found '" + name + "', expected '" + want_name +
                          "'");
  std::uint32_t rank = get_u32(is);
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<int>(get_u32(is));
  if (shape != into.shape())
    throw CheckpointError("tensor '" + name + "' has shape " + shape_str(shape) +
                          ", spec requires " + shape_str(into.shape()));
  if (!is.read(reinterpret_cast<char*>(into.data().data()),
               static_cast<std::streamsize>(into.data().size() * sizeof(real))))
    throw CheckpointError("truncated checkpoint");
}

}  // namespace

void save_checkpoint(Model& model, const std::string& path) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write " + tmp);
    os.write(kMagic, sizeof(kMagic));
    put_u32(os, kVersion);
    put_u32(os, static_cast<std::uint32_t>(sizeof(real)));
    std::string spec_text = emit_spec(model.spec);
    put_u64(os, spec_text.size());
    os.write(spec_text.data(), static_cast<std::streamsize>(spec_text.size()));
    put_u64(os, model.anchors.size());
    os.write(reinterpret_cast<const char*>(model.anchors.data()),
             static_cast<std::streamsize>(model.anchors.size() * sizeof(real)));
    auto params = model.parameters();
    auto bufs = model.buffers();
    put_u32(os, static_cast<std::uint32_t>(params.size() + bufs.size()));
    for (auto& [name, t] : params) put_tensor(os, name, t);
    for (auto& [name, t] : bufs) put_tensor(os, name, t);
    if (!os) throw CheckpointError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw CheckpointError("cannot move checkpoint into place at " + path);
  }
}

Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path);
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError(path + " is not a checkpoint file");
  std::uint32_t version = get_u32(is);
  if (version != kVersion)
    throw CheckpointError("checkpoint format version " + std::to_string(version) +
                          " unsupported (expected " + std::to_string(kVersion) + ")");
  std::uint32_t scalar = get_u32(is);
  if (scalar != sizeof(real))
    throw CheckpointError("checkpoint scalar width " + std::to_string(scalar) +
                          " does not match build (" + std::to_string(sizeof(real)) + ")");
  std::uint64_t spec_len = get_u64(is);
  std::string spec_text(spec_len, '\0');
  if (!is.read(spec_text.data(), static_cast<std::streamsize>(spec_len)))
    throw CheckpointError("truncated checkpoint");
  GraphSpec spec;
  try {
    spec = parse_spec(spec_text);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("embedded spec invalid: ") + e.what());
  }
  Model model = Model::build(spec, 0);
  std::uint64_t na = get_u64(is);
  model.anchors.resize(na);
  if (na &&
      !is.read(reinterpret_cast<char*>(model.anchors.data()),
               static_cast<std::streamsize>(na * sizeof(real))))
    throw CheckpointError("truncated checkpoint");
  auto params = model.parameters();
  auto bufs = model.buffers();
  std::uint32_t count = get_u32(is);
  if (count != params.size() + bufs.size())
    throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors, spec requires " +
                          std::to_string(params.size() + bufs.size()));
  for (auto& [name, t] : params) get_tensor(is, name, t);
  for (auto& [name, t] : bufs) get_tensor(is, name, t);
  return model;
}

}  // namespace sod
