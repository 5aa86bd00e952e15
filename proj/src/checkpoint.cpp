#include "prunecam/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "json.hpp"
#include "prunecam/errors.hpp"

namespace prunecam::model {

namespace {

constexpr char kMagic[4] = {'P', 'R', 'N', 'E'};
constexpr uint32_t kVersion = 1;

using Json = nlohmann::ordered_json;

uint32_t blob_crc(const std::vector<float>& blob) {
  return static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(blob.data()),
            static_cast<uInt>(blob.size() * sizeof(float))));
}

struct TensorRef {
  std::string name;
  const std::vector<float>* values;
  Shape shape;
};

std::vector<TensorRef> tensor_table(ResidualNet& net) {
  std::vector<TensorRef> refs;
  for (auto& p : net.named_parameters())
    refs.push_back({p.name, &p.tensor.data(), p.tensor.shape()});
  for (auto& b : net.named_buffers())
    refs.push_back({b.name, b.values, {static_cast<int>(b.values->size())}});
  return refs;
}

}  // namespace

std::vector<uint8_t> checkpoint_bytes(const ResidualNet& net,
                                      const prune::PruneMask& masks) {
  auto& mutable_net = const_cast<ResidualNet&>(net);
  auto refs = tensor_table(mutable_net);

  std::vector<float> blob;
  Json tensors = Json::array();
  for (const auto& r : refs) {
    Json t;
    t["name"] = r.name;
    t["shape"] = r.shape;
    t["offset"] = blob.size();
    blob.insert(blob.end(), r.values->begin(), r.values->end());
    tensors.push_back(std::move(t));
  }

  Json header;
  header["format"] = "prunecam-checkpoint";
  const auto& cfg = net.config();
  header["config"] = {{"stage_channels", cfg.stage_channels},
                      {"blocks_per_stage", cfg.blocks_per_stage},
                      {"num_classes", cfg.num_classes},
                      {"dropout_p", cfg.dropout_p},
                      {"input_size", cfg.input_size}};
  header["tensors"] = std::move(tensors);
  Json jmasks = Json::object();
  for (const auto& [layer, bits] : masks.active)
    jmasks[layer] = std::vector<int>(bits.begin(), bits.end());
  header["masks"] = std::move(jmasks);
  header["blob_elems"] = blob.size();
  header["blob_crc32"] = blob_crc(blob);

  const std::string hs = header.dump();
  std::vector<uint8_t> out;
  out.reserve(16 + hs.size() + blob.size() * sizeof(float));
  out.insert(out.end(), kMagic, kMagic + 4);
  const uint32_t version = kVersion;
  out.insert(out.end(), reinterpret_cast<const uint8_t*>(&version),
             reinterpret_cast<const uint8_t*>(&version) + 4);
  const uint64_t hlen = hs.size();
  out.insert(out.end(), reinterpret_cast<const uint8_t*>(&hlen),
             reinterpret_cast<const uint8_t*>(&hlen) + 8);
  out.insert(out.end(), hs.begin(), hs.end());
  out.insert(out.end(), reinterpret_cast<const uint8_t*>(blob.data()),
             reinterpret_cast<const uint8_t*>(blob.data()) +
                 blob.size() * sizeof(float));
  return out;
}

std::pair<ResidualNet, prune::PruneMask> checkpoint_from_bytes(
    const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw ConfigError("checkpoint: bad magic (expected \"PRNE\")");
  uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kVersion)
    throw ConfigError("checkpoint: version " + std::to_string(version) +
                      " unsupported (expected " + std::to_string(kVersion) + ")");
  uint64_t hlen;
  std::memcpy(&hlen, bytes.data() + 8, 8);
  if (bytes.size() < 16 + hlen)
    throw ConfigError("checkpoint: truncated header at offset " +
                      std::to_string(bytes.size()) + " (need " +
                      std::to_string(16 + hlen) + ")");
  Json header;
  try {
    header = Json::parse(bytes.begin() + 16, bytes.begin() + 16 + hlen);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("checkpoint: unparseable header: ") + e.what());
  }

  NetConfig cfg;
  const auto& jc = header.at("config");
  const auto sc = jc.at("stage_channels").get<std::vector<int>>();
  const auto bp = jc.at("blocks_per_stage").get<std::vector<int>>();
  if (sc.size() != 4 || bp.size() != 4)
    throw ConfigError("checkpoint: config arrays must have 4 entries");
  std::copy(sc.begin(), sc.end(), cfg.stage_channels.begin());
  std::copy(bp.begin(), bp.end(), cfg.blocks_per_stage.begin());
  cfg.num_classes = jc.at("num_classes").get<int>();
  cfg.dropout_p = jc.at("dropout_p").get<float>();
  cfg.input_size = jc.at("input_size").get<int>();

  const uint64_t blob_elems = header.at("blob_elems").get<uint64_t>();
  const size_t blob_off = 16 + hlen;
  if (bytes.size() != blob_off + blob_elems * sizeof(float))
    throw ConfigError("checkpoint: truncated blob, file has " +
                      std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(blob_off + blob_elems * sizeof(float)));
  std::vector<float> blob(blob_elems);
  std::memcpy(blob.data(), bytes.data() + blob_off, blob_elems * sizeof(float));
  const uint32_t expect_crc = header.at("blob_crc32").get<uint32_t>();
  if (blob_crc(blob) != expect_crc)
    throw ConfigError("checkpoint: blob checksum mismatch at offset " +
                      std::to_string(blob_off));

  ResidualNet net = ResidualNet::build(cfg, 0);
  auto refs = tensor_table(net);
  std::map<std::string, TensorRef*> by_name;
  for (auto& r : refs) by_name[r.name] = &r;

  for (const auto& jt : header.at("tensors")) {
    const std::string name = jt.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw ConfigError("checkpoint: unknown layer name '" + name + "'");
    const uint64_t off = jt.at("offset").get<uint64_t>();
    auto* dst = const_cast<std::vector<float>*>(it->second->values);
    if (off + dst->size() > blob.size())
      throw ConfigError("checkpoint: tensor '" + name + "' overruns blob");
    std::copy(blob.begin() + off, blob.begin() + off + dst->size(),
              dst->begin());
  }

  prune::PruneMask masks;
  for (const auto& [layer, bits] : header.at("masks").items()) {
    const auto v = bits.get<std::vector<int>>();
    masks.active[layer] = std::vector<uint8_t>(v.begin(), v.end());
  }
  return {std::move(net), std::move(masks)};
}

void save_checkpoint(const ResidualNet& net, const prune::PruneMask& masks,
                     const std::filesystem::path& path) {
  const auto bytes = checkpoint_bytes(net, masks);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot write " + tmp);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

std::pair<ResidualNet, prune::PruneMask> load_checkpoint(
    const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw MissingArtifactError("load_checkpoint: missing " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  return checkpoint_from_bytes(bytes);
}

}  // namespace prunecam::model
