#include "smil/data.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace smil {

namespace {

static_assert(std::endian::native == std::endian::little,
              "bag serialization assumes a little-endian host");

constexpr char kMagic[4] = {'S', 'M', 'I', 'L'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  const std::size_t at = out.size();
  out.resize(at + 4);
  std::memcpy(out.data() + at, &v, 4);
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t& at,
                      const std::string& what) {
  if (at + 4 > in.size()) {
    throw std::runtime_error("truncated bag file while reading " + what);
  }
  std::uint32_t v;
  std::memcpy(&v, in.data() + at, 4);
  at += 4;
  return v;
}

}  // namespace

Split split_from_name(const std::string& name) {
  for (Split s : {Split::train, Split::validation, Split::test}) {
    if (name == split_name(s)) {
      return s;
    }
  }
  throw std::runtime_error("unknown split '" + name + "'");
}

std::vector<std::size_t> BagDataset::split_indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < bags.size(); ++i) {
    if (bags[i].split == s) {
      out.push_back(i);
    }
  }
  return out;
}

std::vector<std::int64_t> BagDataset::class_counts(Split s) const {
  std::vector<std::int64_t> counts(class_names.size(), 0);
  for (const auto& bag : bags) {
    if (bag.split == s) {
      ++counts[static_cast<std::size_t>(bag.label)];
    }
  }
  return counts;
}

std::vector<std::uint8_t> serialize_bag(const BagRecord& bag) {
  require(bag.patches.ndim() == 4 && bag.patches.shape[0] >= 1,
          "serialize_bag: patches must be a non-empty [k, c, ph, pw] tensor");
  const int k = bag.patches.shape[0];
  require(static_cast<int>(bag.locations.size()) == k,
          "serialize_bag: location count does not match instance count");
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(k));
  put_u32(out, static_cast<std::uint32_t>(bag.patches.shape[1]));
  put_u32(out, static_cast<std::uint32_t>(bag.patches.shape[2]));
  put_u32(out, static_cast<std::uint32_t>(bag.patches.shape[3]));
  put_u32(out, static_cast<std::uint32_t>(bag.full_h));
  put_u32(out, static_cast<std::uint32_t>(bag.full_w));
  for (const auto& loc : bag.locations) {
    require(loc.row >= 0 && loc.row < bag.full_h && loc.col >= 0 && loc.col < bag.full_w,
            "serialize_bag: location out of bounds");
    put_u32(out, static_cast<std::uint32_t>(loc.row));
    put_u32(out, static_cast<std::uint32_t>(loc.col));
  }
  const std::size_t at = out.size();
  out.resize(at + bag.patches.data.size() * 4);
  std::memcpy(out.data() + at, bag.patches.data.data(), bag.patches.data.size() * 4);
  return out;
}

BagRecord parse_bag(const std::vector<std::uint8_t>& bytes, const std::string& id, int label,
                    Split split) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw std::runtime_error("bad magic in bag file for '" + id + "'");
  }
  std::size_t at = 4;
  const std::uint32_t version = get_u32(bytes, at, "version");
  if (version != kVersion) {
    throw std::runtime_error("unsupported bag file version " + std::to_string(version) +
                             " (expected " + std::to_string(kVersion) + ")");
  }
  const std::uint32_t k = get_u32(bytes, at, "instance count");
  const std::uint32_t c = get_u32(bytes, at, "channels");
  const std::uint32_t ph = get_u32(bytes, at, "patch height");
  const std::uint32_t pw = get_u32(bytes, at, "patch width");
  const std::uint32_t full_h = get_u32(bytes, at, "full height");
  const std::uint32_t full_w = get_u32(bytes, at, "full width");
  if (k == 0) {
    throw std::runtime_error("bag file for '" + id + "' holds no instances");
  }

  BagRecord bag;
  bag.id = id;
  bag.label = label;
  bag.split = split;
  bag.full_h = static_cast<int>(full_h);
  bag.full_w = static_cast<int>(full_w);
  bag.locations.resize(k);
  for (std::uint32_t i = 0; i < k; ++i) {
    const std::uint32_t row = get_u32(bytes, at, "location row");
    const std::uint32_t col = get_u32(bytes, at, "location col");
    if (row >= full_h || col >= full_w) {
      throw std::runtime_error("location (" + std::to_string(row) + "," + std::to_string(col) +
                               ") out of bounds in bag '" + id + "'");
    }
    bag.locations[i] = {static_cast<int>(row), static_cast<int>(col)};
  }
  const std::size_t n_floats =
      static_cast<std::size_t>(k) * c * ph * pw;
  if (at + n_floats * 4 != bytes.size()) {
    throw std::runtime_error("truncated bag file for '" + id + "': expected " +
                             std::to_string(at + n_floats * 4) + " bytes, got " +
                             std::to_string(bytes.size()));
  }
  bag.patches = Tensor({static_cast<int>(k), static_cast<int>(c), static_cast<int>(ph),
                        static_cast<int>(pw)});
  std::memcpy(bag.patches.data.data(), bytes.data() + at, n_floats * 4);
  return bag;
}

void write_dataset(const std::filesystem::path& dir, const BagDataset& dataset) {
  require(!dataset.class_names.empty(), "write_dataset: class names missing");
  std::filesystem::create_directories(dir);

  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["seed"] = dataset.seed;
  manifest["task"] = dataset.task;
  manifest["class_names"] = dataset.class_names;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& bag : dataset.bags) {
    require(bag.label >= 0 && bag.label < dataset.n_classes(),
            "write_dataset: label out of range for bag '" + bag.id + "'");
    const std::string file = bag.id + ".smil";
    const auto bytes = serialize_bag(bag);
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw std::runtime_error("cannot write bag file " + (dir / file).string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    entries.push_back({{"id", bag.id},
                       {"file", file},
                       {"label", bag.label},
                       {"split", split_name(bag.split)}});
  }
  manifest["bags"] = entries;
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  if (!mf) {
    throw std::runtime_error("cannot write manifest in " + dir.string());
  }
  mf << manifest.dump(2) << "\n";
}

BagDataset read_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream mf(manifest_path);
  if (!mf) {
    throw std::runtime_error("missing manifest: " + manifest_path.string());
  }
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  if (!manifest.contains("version") || manifest["version"].get<int>() != 1) {
    throw std::runtime_error("unsupported manifest version in " + manifest_path.string());
  }

  BagDataset dataset;
  dataset.class_names = manifest.at("class_names").get<std::vector<std::string>>();
  dataset.seed = manifest.value("seed", std::uint64_t{0});
  dataset.task = manifest.value("task", std::string{});
  for (const auto& entry : manifest.at("bags")) {
    const std::string id = entry.at("id").get<std::string>();
    const std::string file = entry.at("file").get<std::string>();
    const int label = entry.at("label").get<int>();
    if (label < 0 || label >= dataset.n_classes()) {
      throw std::runtime_error("label out of range for bag '" + id + "' in manifest");
    }
    const Split split = split_from_name(entry.at("split").get<std::string>());

    std::ifstream in(dir / file, std::ios::binary);
    if (!in) {
      throw std::runtime_error("missing bag file " + (dir / file).string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    dataset.bags.push_back(parse_bag(bytes, id, label, split));
  }
  return dataset;
}

}  // namespace smil
