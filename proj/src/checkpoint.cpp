#include "efi/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "efi/errors.hpp"

namespace efi {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'E', 'F', 'I', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& buf, std::string path) : buf_(buf), path_(std::move(path)) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint16_t u16() {
    const char* p = take(2);
    return static_cast<std::uint16_t>(static_cast<std::uint8_t>(p[0]) |
                                      (static_cast<std::uint8_t>(p[1]) << 8));
  }
  std::uint32_t u32() {
    const char* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(p[i])) << (8 * i);
    return v;
  }
  std::string bytes(std::size_t n) { return std::string(take(n), n); }
  const char* take(std::size_t n) {
    if (pos_ + n > buf_.size()) throw LoadError(path_ + ": truncated checkpoint");
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }

 private:
  const std::string& buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

json layer_to_json(const EncoderLayer& l) {
  if (l.kind == EncoderLayer::Kind::conv) {
    return json{{"type", "conv"},
                {"out", l.conv.out_channels},
                {"k", {l.conv.kh, l.conv.kw}},
                {"s", {l.conv.sh, l.conv.sw}}};
  }
  return json{{"type", "pool"}, {"w", {l.pool.wh, l.pool.ww}}, {"s", {l.pool.sh, l.pool.sw}}};
}

EncoderLayer layer_from_json(const json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "conv") {
    return EncoderLayer::make_conv(j.at("out").get<int>(), j.at("k")[0].get<int>(),
                                   j.at("k")[1].get<int>(), j.at("s")[0].get<int>(),
                                   j.at("s")[1].get<int>());
  }
  if (type == "pool") {
    return EncoderLayer::make_pool(j.at("w")[0].get<int>(), j.at("w")[1].get<int>(),
                                   j.at("s")[0].get<int>(), j.at("s")[1].get<int>());
  }
  throw LoadError("unknown encoder layer type '" + type + "'");
}

json arch_json(const ArchitectureConfig& cfg) {
  json layers = json::array();
  for (const auto& l : cfg.encoder) layers.push_back(layer_to_json(l));
  return json{{"preset", cfg.preset},
              {"input", {cfg.in_channels, cfg.in_height, cfg.in_width}},
              {"encoder", layers},
              {"latent_dim", cfg.latent_dim},
              {"codebook_size", cfg.codebook_size},
              {"classifier_hidden", cfg.classifier_hidden},
              {"num_classes", cfg.num_classes}};
}

ArchitectureConfig arch_from(const json& j) {
  ArchitectureConfig cfg;
  cfg.preset = j.at("preset").get<std::string>();
  cfg.in_channels = j.at("input")[0].get<int>();
  cfg.in_height = j.at("input")[1].get<int>();
  cfg.in_width = j.at("input")[2].get<int>();
  for (const auto& l : j.at("encoder")) cfg.encoder.push_back(layer_from_json(l));
  cfg.latent_dim = j.at("latent_dim").get<int>();
  cfg.codebook_size = j.at("codebook_size").get<int>();
  cfg.classifier_hidden = j.at("classifier_hidden").get<int>();
  cfg.num_classes = j.at("num_classes").get<int>();
  return cfg;
}

}  // namespace

std::string to_string(CheckpointView view) {
  switch (view) {
    case CheckpointView::full: return "full";
    case CheckpointView::edge: return "edge";
    case CheckpointView::cloud: return "cloud";
  }
  return "full";
}

std::string arch_to_json(const ArchitectureConfig& cfg) { return arch_json(cfg).dump(); }

ArchitectureConfig arch_from_json(const std::string& text) {
  try {
    return arch_from(json::parse(text));
  } catch (const json::exception& e) {
    throw LoadError(std::string("bad architecture JSON: ") + e.what());
  }
}

void save_checkpoint(const Model& model, const std::string& path, const CheckpointMeta& meta,
                     CheckpointView view) {
  std::vector<std::string> names;
  if (view == CheckpointView::full || view == CheckpointView::edge) {
    for (auto& n : model.encoder_param_names()) names.push_back(n);
  }
  if (view == CheckpointView::full || view == CheckpointView::cloud) {
    for (auto& n : model.decoder_param_names()) names.push_back(n);
    for (auto& n : model.classifier_param_names()) names.push_back(n);
  }
  names.push_back("codebook");

  json j;
  j["config"] = arch_json(model.config());
  j["view"] = to_string(view);
  j["epoch"] = meta.epoch;
  j["loss_r"] = meta.loss_r;
  j["loss_c"] = meta.loss_c;
  j["loss_e"] = meta.loss_e;
  const std::string meta_str = j.dump();

  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(meta_str.size()));
  out += meta_str;
  put_u32(out, static_cast<std::uint32_t>(names.size()));
  for (const auto& name : names) {
    const Tensor& t = model.param(name)->value;
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
  }
  for (const auto& name : names) {
    const Tensor& t = model.param(name)->value;
    out.append(reinterpret_cast<const char*>(t.data()), static_cast<std::size_t>(t.numel()) * 4);
  }

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw LoadError("cannot write " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw LoadError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw LoadError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LoadError("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(buf, path);

  const std::string magic = r.bytes(4);
  if (magic != std::string(kMagic, 4)) throw LoadError(path + ": bad magic bytes");
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw LoadError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t meta_len = r.u32();
  json meta_json;
  try {
    meta_json = json::parse(r.bytes(meta_len));
  } catch (const json::exception& e) {
    throw LoadError(path + ": bad metadata JSON: " + e.what());
  }

  LoadedCheckpoint ck;
  ck.config = arch_from_json(meta_json.at("config").get<std::string>());
  ck.meta.view = meta_json.at("view").get<std::string>();
  ck.meta.epoch = meta_json.at("epoch").get<int>();
  ck.meta.loss_r = meta_json.at("loss_r").get<double>();
  ck.meta.loss_c = meta_json.at("loss_c").get<double>();
  ck.meta.loss_e = meta_json.at("loss_e").get<double>();

  const std::uint32_t count = r.u32();
  std::vector<std::pair<std::string, Shape>> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16();
    std::string name = r.bytes(name_len);
    const int rank = r.u8();
    if (rank > 8) throw LoadError(path + ": implausible tensor rank");
    Shape shape(static_cast<std::size_t>(rank));
    for (int d = 0; d < rank; ++d) {
      const std::uint32_t dim = r.u32();
      if (dim > (1u << 28)) throw LoadError(path + ": implausible tensor dimension");
      shape[static_cast<std::size_t>(d)] = static_cast<int>(dim);
    }
    entries.emplace_back(std::move(name), std::move(shape));
  }
  for (auto& [name, shape] : entries) {
    const std::int64_t n = shape_numel(shape);
    std::vector<float> data(static_cast<std::size_t>(n));
    const char* p = r.take(static_cast<std::size_t>(n) * 4);
    std::memcpy(data.data(), p, static_cast<std::size_t>(n) * 4);
    Tensor t(shape, std::move(data));
    t.ensure_finite(path + ": tensor '" + name + "'");
    if (!ck.tensors.emplace(name, std::move(t)).second) {
      throw LoadError(path + ": duplicate tensor '" + name + "'");
    }
  }
  return ck;
}

}  // namespace efi
