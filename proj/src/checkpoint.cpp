#include "flipdistill/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "flipdistill/errors.hpp"
#include "flipdistill/rng.hpp"

namespace flipdistill {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'F', 'D', 'C', 'K', 'P', 'T', '\0', '\1'};

template <class T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_bytes(std::ofstream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  explicit Reader(std::ifstream& is) : is_(is) {}

  template <class T>
  T get(const char* what) {
    T v{};
    if (!is_.read(reinterpret_cast<char*>(&v), sizeof(T))) throw ParseError(std::string("checkpoint truncated reading ") + what);
    return v;
  }

  std::string get_bytes(const char* what, std::uint32_t limit) {
    const auto n = get<std::uint32_t>(what);
    if (n > limit) throw ParseError(std::string("checkpoint field too long: ") + what);
    std::string s(n, '\0');
    if (n && !is_.read(s.data(), n)) throw ParseError(std::string("checkpoint truncated reading ") + what);
    return s;
  }

 private:
  std::ifstream& is_;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& params,
                     const std::string& config_text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint64_t>(os, fnv1a64(config_text));
  put_bytes(os, config_text);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_bytes(os, p.name);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) put<std::uint64_t>(os, d);
    auto v = p.tensor.values();
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint not found: " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw ParseError("not a checkpoint file: " + path.string());
  }
  Reader r(is);
  Checkpoint c;
  c.version = r.get<std::uint32_t>("version");
  if (c.version != kCheckpointVersion) throw ParseError("unsupported checkpoint version " + std::to_string(c.version));
  c.config_hash = r.get<std::uint64_t>("hash");
  c.config_text = r.get_bytes("config", 1u << 20);
  if (fnv1a64(c.config_text) != c.config_hash) throw ParseError("checkpoint config text does not match its hash");
  const auto count = r.get<std::uint32_t>("count");
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.get_bytes("name", 4096);
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) throw ParseError("implausible tensor rank in " + t.name);
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.shape.push_back(r.get<std::uint64_t>("dim"));
      n *= t.shape.back();
    }
    if (n > (1u << 28)) throw ParseError("implausible tensor size in " + t.name);
    t.values.resize(n);
    if (!is.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
      throw ParseError("checkpoint truncated in tensor " + t.name);
    }
    c.tensors.push_back(std::move(t));
  }
  return c;
}

void load_into(const Checkpoint& ckpt, const std::vector<NamedTensor>& params, std::uint64_t expected_hash) {
  if (ckpt.config_hash != expected_hash) {
    throw ConfigError("checkpoint config hash mismatch (checkpoint " + std::to_string(ckpt.config_hash) +
                      ", expected " + std::to_string(expected_hash) + ")");
  }
  for (const auto& p : params) {
    auto it = std::find_if(ckpt.tensors.begin(), ckpt.tensors.end(), [&](const StoredTensor& t) { return t.name == p.name; });
    if (it == ckpt.tensors.end()) throw ConfigError("checkpoint has no tensor named " + p.name);
    if (it->shape != p.tensor.shape()) {
      throw ConfigError("checkpoint tensor " + p.name + " has shape " + shape_str(it->shape) + ", model expects " +
                        shape_str(p.tensor.shape()));
    }
    Tensor handle = p.tensor;
    auto dst = handle.mutable_values();
    std::copy(it->values.begin(), it->values.end(), dst.begin());
  }
}

std::vector<std::vector<double>> snapshot(const std::vector<NamedTensor>& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

void restore(const std::vector<NamedTensor>& params, const std::vector<std::vector<double>>& values) {
  if (params.size() != values.size()) throw ContractError("restore: snapshot size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor handle = params[i].tensor;
    auto dst = handle.mutable_values();
    if (dst.size() != values[i].size()) throw ContractError("restore: tensor size mismatch for " + params[i].name);
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

}  // namespace flipdistill
