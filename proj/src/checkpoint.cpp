#include "echodx/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace echodx {

namespace {

constexpr char kMagic[4] = {'R', '2', '1', 'D'};

void put_list(std::ostream& out, const std::vector<std::size_t>& values) {
  binary::put_u32(out, static_cast<std::uint32_t>(values.size()));
  for (auto v : values) binary::put_u32(out, static_cast<std::uint32_t>(v));
}

std::vector<std::size_t> get_list(std::istream& in) {
  const auto n = binary::get_u32(in, "checkpoint config");
  if (n > 64) throw IoError("checkpoint config list too long");
  std::vector<std::size_t> values(n);
  for (auto& v : values) v = binary::get_u32(in, "checkpoint config");
  return values;
}

}  // namespace

void write_checkpoint(std::ostream& out, const Network& net) {
  const auto& cfg = net.config();
  out.write(kMagic, 4);
  binary::put_u32(out, kCheckpointVersion);
  put_list(out, cfg.stage_channels);
  put_list(out, cfg.blocks_per_stage);
  binary::put_u32(out, static_cast<std::uint32_t>(cfg.stem_midplane));
  binary::put_u32(out, static_cast<std::uint32_t>(cfg.num_classes));
  for (auto e : cfg.input_shape) binary::put_u32(out, static_cast<std::uint32_t>(e));
  out.put(cfg.linear ? 1 : 0);

  const auto state = net.state();  // std::map: sorted by name
  binary::put_u32(out, static_cast<std::uint32_t>(state.size()));
  for (const auto& [name, tensor] : state) {
    binary::put_u32(out, static_cast<std::uint32_t>(name.size()));
    binary::put_bytes(out, name);
    write_ect(out, tensor);
  }
}

Network read_checkpoint(std::istream& in) {
  const auto magic = binary::get_bytes(in, 4, "checkpoint magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw BadMagicError("not an R21D checkpoint");
  const auto version = binary::get_u32(in, "checkpoint version");
  if (version != kCheckpointVersion)
    throw UnsupportedVersionError("unsupported checkpoint version " + std::to_string(version));

  NetworkConfig cfg;
  cfg.stage_channels = get_list(in);
  cfg.blocks_per_stage = get_list(in);
  cfg.stem_midplane = binary::get_u32(in, "checkpoint config");
  cfg.num_classes = binary::get_u32(in, "checkpoint config");
  for (auto& e : cfg.input_shape) e = binary::get_u32(in, "checkpoint config");
  cfg.linear = binary::get_u8(in, "checkpoint config") != 0;
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint carries an invalid config: ") + e.what());
  }

  auto net = Network::build(cfg, 0);
  const auto expected = net.state();
  const auto count = binary::get_u32(in, "checkpoint entry count");
  if (count != expected.size())
    throw CheckpointShapeError("checkpoint has " + std::to_string(count) + " tensors, config implies " +
                               std::to_string(expected.size()));
  NamedTensors state;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = binary::get_u32(in, "checkpoint entry name");
    if (len > 4096) throw IoError("checkpoint entry name too long");
    auto name = binary::get_bytes(in, len, "checkpoint entry name");
    Tensor t;
    try {
      t = read_ect(in);
    } catch (const BadMagicError&) {
      throw IoError("corrupt tensor entry '" + name + "'");
    }
    auto it = expected.find(name);
    if (it == expected.end()) throw CheckpointShapeError("unexpected checkpoint tensor '" + name + "'");
    if (it->second.shape() != t.shape())
      throw CheckpointShapeError("tensor '" + name + "' has shape " + shape_string(t.shape()) + ", config implies " +
                                 shape_string(it->second.shape()));
    state.emplace(std::move(name), std::move(t));
  }
  net.load_state(state);
  return net;
}

void checkpoint_save(const Network& net, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  write_checkpoint(out, net);
  if (!out) throw IoError("write failed: " + path.string());
}

Network checkpoint_load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  return read_checkpoint(in);
}

}  // namespace echodx
