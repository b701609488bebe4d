#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "pami/error.hpp"
#include "pami/trainer.hpp"

namespace pami {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'P', 'A', 'M', 'I', 'C', 'K', 'P', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* b) {
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_floats(std::ostream& os, const std::vector<float>& v) {
  for (float x : v) put_u32(os, std::bit_cast<std::uint32_t>(x));
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  json table = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, values] : c.params) {
    const auto vel = c.velocity.find(name);
    if (vel == c.velocity.end() || vel->second.size() != values.size())
      throw Error("bad-shape", "velocity for " + name + " is missing or mis-sized");
    const auto shape = c.shapes.count(name) ? c.shapes.at(name) : std::vector<int>{static_cast<int>(values.size())};
    table.push_back({{"name", name}, {"shape", shape}, {"count", values.size()}, {"offset", offset}});
    offset += 2 * values.size();
  }
  const json header = {{"format", "pami-checkpoint"},
                       {"version", 1},
                       {"iteration", c.iteration},
                       {"config", json::parse(c.config.to_json())},
                       {"sampler_state", c.sampler_state},
                       {"episodes_drawn", c.episodes_drawn},
                       {"layout", "per tensor: params then momentum, float32 little-endian"},
                       {"tensors", table}};
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("io", "cannot open " + path.string());
  os.write(kMagic, sizeof kMagic);
  put_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, values] : c.params) {
    put_floats(os, values);
    put_floats(os, c.velocity.at(name));
  }
  if (!os) throw Error("io", "write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("io", "cannot open checkpoint " + path.string());
  char magic[8];
  unsigned char len[4];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw Error("io", path.string() + " is not a checkpoint");
  if (!is.read(reinterpret_cast<char*>(len), 4)) throw Error("io", "truncated checkpoint header");
  std::string text(get_u32(len), '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(text.size()))) throw Error("io", "truncated checkpoint header");
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw Error("io", std::string("malformed checkpoint header: ") + e.what());
  }
  Checkpoint c;
  c.iteration = header.at("iteration").get<int>();
  c.config.merge_json(header.at("config").dump());
  c.sampler_state = header.at("sampler_state").get<std::string>();
  c.episodes_drawn = header.at("episodes_drawn").get<std::uint64_t>();
  std::vector<unsigned char> raw;
  auto read_block = [&](std::size_t n) {
    raw.resize(n * 4);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
      throw Error("io", "truncated checkpoint payload");
    std::vector<float> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = std::bit_cast<float>(get_u32(raw.data() + 4 * i));
    return v;
  };
  for (const auto& t : header.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const auto n = t.at("count").get<std::size_t>();
    c.shapes[name] = t.at("shape").get<std::vector<int>>();
    c.params[name] = read_block(n);
    c.velocity[name] = read_block(n);
  }
  return c;
}

}  // namespace pami
