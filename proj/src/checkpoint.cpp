#include "smil/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace smil {

namespace {

constexpr char kMagic[4] = {'S', 'M', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  const std::size_t at = out.size();
  out.resize(at + 4);
  std::memcpy(out.data() + at, &v, 4);
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  const std::size_t at = out.size();
  out.resize(at + 8);
  std::memcpy(out.data() + at, &v, 8);
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t& at) {
  if (at + 4 > in.size()) {
    throw std::runtime_error("truncated checkpoint");
  }
  std::uint32_t v;
  std::memcpy(&v, in.data() + at, 4);
  at += 4;
  return v;
}

std::uint64_t get_u64(const std::vector<std::uint8_t>& in, std::size_t& at) {
  if (at + 8 > in.size()) {
    throw std::runtime_error("truncated checkpoint");
  }
  std::uint64_t v;
  std::memcpy(&v, in.data() + at, 8);
  at += 8;
  return v;
}

std::string get_str(const std::vector<std::uint8_t>& in, std::size_t& at) {
  const std::uint32_t len = get_u32(in, at);
  if (at + len > in.size()) {
    throw std::runtime_error("truncated checkpoint");
  }
  std::string s(reinterpret_cast<const char*>(in.data() + at), len);
  at += len;
  return s;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, kVersion);
  put_u64(out, ckpt.step);
  put_u32(out, static_cast<std::uint32_t>(ckpt.config_json.size()));
  out.insert(out.end(), ckpt.config_json.begin(), ckpt.config_json.end());
  put_u32(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, tensor] : ckpt.params) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<std::uint32_t>(tensor.shape.size()));
    for (int extent : tensor.shape) {
      put_u32(out, static_cast<std::uint32_t>(extent));
    }
    const std::size_t at = out.size();
    out.resize(at + tensor.data.size() * 4);
    std::memcpy(out.data() + at, tensor.data.data(), tensor.data.size() * 4);
  }
  return out;
}

Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw std::runtime_error("bad magic in checkpoint");
  }
  std::size_t at = 4;
  Checkpoint ckpt;
  ckpt.version = get_u32(bytes, at);
  if (ckpt.version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(ckpt.version));
  }
  ckpt.step = get_u64(bytes, at);
  ckpt.config_json = get_str(bytes, at);
  const std::uint32_t n_params = get_u32(bytes, at);
  for (std::uint32_t p = 0; p < n_params; ++p) {
    std::string name = get_str(bytes, at);
    const std::uint32_t ndim = get_u32(bytes, at);
    std::vector<int> shape;
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      shape.push_back(static_cast<int>(get_u32(bytes, at)));
      n *= static_cast<std::size_t>(shape.back());
    }
    if (at + n * 4 > bytes.size()) {
      throw std::runtime_error("truncated checkpoint in parameter '" + name + "'");
    }
    Tensor t(shape);
    std::memcpy(t.data.data(), bytes.data() + at, n * 4);
    at += n * 4;
    ckpt.params.emplace_back(std::move(name), std::move(t));
  }
  if (at != bytes.size()) {
    throw std::runtime_error("trailing bytes in checkpoint");
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, MilModel& model, const RunConfig& config,
                     std::uint64_t step) {
  nlohmann::json meta;
  meta["run"] = nlohmann::json::parse(run_config_to_json(config));
  meta["shape"] = {{"n_classes", model.config.n_classes},
                   {"patch_channels", model.config.embedder.patch_channels},
                   {"patch_h", model.config.embedder.patch_h},
                   {"patch_w", model.config.embedder.patch_w}};

  Checkpoint ckpt;
  ckpt.step = step;
  ckpt.config_json = meta.dump(2);
  for (const auto& p : model.parameters()) {
    ckpt.params.emplace_back(p.name, *p.value);
  }
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot write checkpoint " + path.string());
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

LoadedModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open checkpoint " + path.string());
  }
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  Checkpoint ckpt = parse_checkpoint(bytes);

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(ckpt.config_json);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("malformed checkpoint config: ") + e.what());
  }
  LoadedModel loaded{MilModel{}, parse_run_config(meta.at("run").dump()), ckpt.step};
  const auto& shape = meta.at("shape");
  loaded.config.model.n_classes = shape.at("n_classes").get<int>();
  loaded.config.model.embedder.patch_channels = shape.at("patch_channels").get<int>();
  loaded.config.model.embedder.patch_h = shape.at("patch_h").get<int>();
  loaded.config.model.embedder.patch_w = shape.at("patch_w").get<int>();
  loaded.model = MilModel(loaded.config.model);

  auto refs = loaded.model.parameters();
  require(refs.size() == ckpt.params.size(), "checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < refs.size(); ++i) {
    require(refs[i].name == ckpt.params[i].first,
            "checkpoint parameter name mismatch: " + refs[i].name + " vs " +
                ckpt.params[i].first);
    require(refs[i].value->shape == ckpt.params[i].second.shape,
            "checkpoint parameter shape mismatch for " + refs[i].name);
    refs[i].value->data = ckpt.params[i].second.data;
  }
  return loaded;
}

}  // namespace smil
