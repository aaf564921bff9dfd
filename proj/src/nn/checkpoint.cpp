#include "diffmm/nn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <vector>

#include "diffmm/rng.hpp"

namespace diffmm::nn {

namespace {

constexpr char kMagic[8] = {'D', 'I', 'F', 'F', 'M', 'M', 'C', 'K'};

void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

struct Parsed {
  nlohmann::json header;
  std::string payload;
};

Parsed parse_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw DataError(path.string() + ": not a checkpoint file");
  }
  const auto version = static_cast<std::uint32_t>(get_le(u + 8, 4));
  if (version != kCheckpointVersion) {
    throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint64_t hlen = get_le(u + 12, 8);
  if (hlen > bytes.size() - 20) throw DataError(path.string() + ": truncated header");
  Parsed p;
  try {
    p.header = nlohmann::json::parse(bytes.substr(20, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": bad checkpoint header: " + e.what());
  }
  p.payload = bytes.substr(20 + hlen);
  const auto& meta = p.header.at("meta");
  const std::string stored = p.header.value("config_hash", "");
  const std::string actual = config_hash(meta.contains("config") ? meta["config"] : nlohmann::json());
  if (stored != actual) {
    throw DataError(path.string() + ": config hash mismatch (stored " + stored + ", computed " +
                    actual + ")");
  }
  return p;
}

}  // namespace

std::string config_hash(const nlohmann::json& config) {
  const std::uint64_t h = fnv1a64(config.dump());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                     const ParameterSet<T>& params) {
  nlohmann::json header;
  header["meta"] = meta;
  header["config_hash"] = config_hash(meta.contains("config") ? meta["config"] : nlohmann::json());
  header["parameters"] = nlohmann::json::array();
  std::string payload;
  for (const auto& p : params) {
    header["parameters"].push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
    for (Index i = 0; i < p.value.size(); ++i) {
      put_le(payload, std::bit_cast<std::uint32_t>(static_cast<float>(p.value.data()[i])), 4);
    }
  }
  const std::string h = header.dump();
  std::string out(kMagic, 8);
  put_le(out, kCheckpointVersion, 4);
  put_le(out, h.size(), 8);
  out += h;
  out += payload;
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write checkpoint " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("failed writing checkpoint " + path.string());
}

nlohmann::json read_checkpoint_meta(const std::filesystem::path& path) {
  return parse_file(path).header.at("meta");
}

template <typename T>
nlohmann::json load_checkpoint(const std::filesystem::path& path, ParameterSet<T>& params) {
  Parsed file = parse_file(path);
  const auto* u = reinterpret_cast<const unsigned char*>(file.payload.data());
  std::size_t offset = 0;
  std::set<std::string> seen;
  for (const auto& entry : file.header.at("parameters")) {
    const std::string name = entry.at("name");
    const Index rows = entry.at("rows"), cols = entry.at("cols");
    Parameter<T>* p = params.find(name);
    if (!p) throw DataError(path.string() + ": unexpected parameter " + name);
    if (p->value.rows() != rows || p->value.cols() != cols) {
      throw DataError(path.string() + ": parameter " + name + " has shape " + shape_str(rows, cols) +
                      ", model expects " + shape_of(p->value));
    }
    const auto n = static_cast<std::size_t>(rows * cols);
    if (offset + 4 * n > file.payload.size()) throw DataError(path.string() + ": truncated payload");
    for (std::size_t i = 0; i < n; ++i) {
      const auto bits = static_cast<std::uint32_t>(get_le(u + offset + 4 * i, 4));
      p->value.data()[i] = static_cast<T>(std::bit_cast<float>(bits));
    }
    offset += 4 * n;
    seen.insert(name);
  }
  if (offset != file.payload.size()) throw DataError(path.string() + ": trailing bytes in payload");
  for (const auto& p : params) {
    if (!seen.contains(p.name)) throw DataError(path.string() + ": missing parameter " + p.name);
  }
  return file.header.at("meta");
}

template void save_checkpoint(const std::filesystem::path&, const nlohmann::json&,
                              const ParameterSet<float>&);
template void save_checkpoint(const std::filesystem::path&, const nlohmann::json&,
                              const ParameterSet<double>&);
template nlohmann::json load_checkpoint(const std::filesystem::path&, ParameterSet<float>&);
template nlohmann::json load_checkpoint(const std::filesystem::path&, ParameterSet<double>&);

}  // namespace diffmm::nn
