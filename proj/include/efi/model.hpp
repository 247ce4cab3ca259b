#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "efi/autograd.hpp"
#include "efi/quantizer.hpp"
#include "efi/tensor.hpp"

namespace efi {

// ---------------------------------------------------------------------------
// architecture description

struct ConvSpec {
  int out_channels = 0;
  int kh = 0, kw = 0;
  int sh = 1, sw = 1;
};

struct PoolSpec {
  int wh = 0, ww = 0;
  int sh = 1, sw = 1;
};

struct EncoderLayer {
  enum class Kind { conv, pool };
  Kind kind = Kind::conv;
  ConvSpec conv;
  PoolSpec pool;

  static EncoderLayer make_conv(int out_channels, int kh, int kw, int sh, int sw) {
    EncoderLayer l;
    l.kind = Kind::conv;
    l.conv = {out_channels, kh, kw, sh, sw};
    return l;
  }
  static EncoderLayer make_pool(int wh, int ww, int sh, int sw) {
    EncoderLayer l;
    l.kind = Kind::pool;
    l.pool = {wh, ww, sh, sw};
    return l;
  }
};

struct ArchitectureConfig {
  std::string preset = "custom";
  int in_channels = 0;
  int in_height = 0;  // subcarriers
  int in_width = 0;   // time steps
  std::vector<EncoderLayer> encoder;
  int latent_dim = 256;    // D
  int codebook_size = 256; // K
  int classifier_hidden = 128;
  int num_classes = 6;
};

// The network used in the full-size experiments: 3x114x500 in, four conv
// layers plus two pools down to (96,6,6), projected to D channels.
inline ArchitectureConfig paper_arch(int codebook_size = 256, int latent_dim = 256) {
  ArchitectureConfig c;
  c.preset = "paper";
  c.in_channels = 3;
  c.in_height = 114;
  c.in_width = 500;
  c.encoder = {
      EncoderLayer::make_conv(32, 15, 23, 9, 9),
      EncoderLayer::make_conv(32, 3, 7, 1, 1),
      EncoderLayer::make_pool(1, 2, 1, 2),
      EncoderLayer::make_conv(64, 3, 7, 1, 1),
      EncoderLayer::make_conv(96, 3, 7, 1, 1),
      EncoderLayer::make_pool(1, 2, 1, 2),
  };
  c.latent_dim = latent_dim;
  c.codebook_size = codebook_size;
  return c;
}

// Reduced 3x30x100 geometry for fast tests and CPU training runs.
inline ArchitectureConfig desk_arch(int codebook_size = 256, int latent_dim = 256) {
  ArchitectureConfig c;
  c.preset = "desk";
  c.in_channels = 3;
  c.in_height = 30;
  c.in_width = 100;
  c.encoder = {
      EncoderLayer::make_conv(8, 3, 10, 3, 5),
      EncoderLayer::make_conv(8, 3, 4, 1, 1),
      EncoderLayer::make_pool(1, 2, 1, 2),
      EncoderLayer::make_conv(16, 3, 3, 1, 1),
      EncoderLayer::make_conv(24, 3, 3, 1, 1),
      EncoderLayer::make_pool(1, 2, 1, 2),
  };
  c.latent_dim = latent_dim;
  c.codebook_size = codebook_size;
  return c;
}

inline ArchitectureConfig arch_preset(const std::string& name, int codebook_size = 256,
                                      int latent_dim = 256) {
  if (name == "paper") return paper_arch(codebook_size, latent_dim);
  if (name == "desk") return desk_arch(codebook_size, latent_dim);
  throw ConfigError("unknown architecture preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// symbolic shape propagation

struct ShapeTrace {
  std::vector<std::array<int, 3>> encoder;  // shape after each encoder layer
  std::array<int, 3> pre_projection{};      // (C_enc, h, w)
  std::array<int, 3> latent{};              // (D, h, w)
  int latent_positions = 0;                 // M = h*w
  std::vector<std::array<int, 3>> decoder;  // shape after each decoder layer
  std::array<int, 3> output{};
};

// Mirrored decoder layer list: reversed encoder with conv out-channel counts
// replaced by the corresponding encoder input widths.
inline std::vector<EncoderLayer> mirror_decoder_layers(const ArchitectureConfig& cfg) {
  std::vector<EncoderLayer> dec;
  int ch = cfg.in_channels;
  std::vector<int> conv_in_channels;
  for (const auto& l : cfg.encoder) {
    if (l.kind == EncoderLayer::Kind::conv) {
      conv_in_channels.push_back(ch);
      ch = l.conv.out_channels;
    }
  }
  std::size_t conv_idx = conv_in_channels.size();
  for (auto it = cfg.encoder.rbegin(); it != cfg.encoder.rend(); ++it) {
    if (it->kind == EncoderLayer::Kind::pool) {
      dec.push_back(EncoderLayer::make_pool(it->pool.wh, it->pool.ww, it->pool.sh, it->pool.sw));
    } else {
      --conv_idx;
      dec.push_back(EncoderLayer::make_conv(conv_in_channels[conv_idx], it->conv.kh, it->conv.kw,
                                            it->conv.sh, it->conv.sw));
    }
  }
  return dec;
}

inline ShapeTrace propagate_shapes(const ArchitectureConfig& cfg) {
  if (cfg.in_channels <= 0 || cfg.in_height <= 0 || cfg.in_width <= 0) {
    throw ConfigError("input shape must be positive, got (" + std::to_string(cfg.in_channels) +
                      "," + std::to_string(cfg.in_height) + "," + std::to_string(cfg.in_width) + ")");
  }
  if (cfg.latent_dim <= 0 || cfg.codebook_size <= 0) {
    throw ConfigError("latent_dim and codebook_size must be positive");
  }
  ShapeTrace t;
  int c = cfg.in_channels, h = cfg.in_height, w = cfg.in_width;
  int idx = 0;
  for (const auto& l : cfg.encoder) {
    ++idx;
    if (l.kind == EncoderLayer::Kind::conv) {
      const auto& cv = l.conv;
      if (cv.out_channels <= 0 || cv.kh <= 0 || cv.kw <= 0 || cv.sh <= 0 || cv.sw <= 0) {
        throw ConfigError("encoder layer " + std::to_string(idx) + ": invalid conv spec");
      }
      if (h < cv.kh || w < cv.kw) {
        throw ConfigError("encoder layer " + std::to_string(idx) + " (conv " +
                          std::to_string(cv.out_channels) + "x(" + std::to_string(cv.kh) + "," +
                          std::to_string(cv.kw) + ")): kernel larger than input (" +
                          std::to_string(h) + "," + std::to_string(w) + ")");
      }
      c = cv.out_channels;
      h = (h - cv.kh) / cv.sh + 1;
      w = (w - cv.kw) / cv.sw + 1;
    } else {
      const auto& p = l.pool;
      if (p.wh <= 0 || p.ww <= 0 || p.sh <= 0 || p.sw <= 0) {
        throw ConfigError("encoder layer " + std::to_string(idx) + ": invalid pool spec");
      }
      if (h < p.wh || w < p.ww) {
        throw ConfigError("encoder layer " + std::to_string(idx) +
                          " (pool): window larger than input (" + std::to_string(h) + "," +
                          std::to_string(w) + ")");
      }
      h = (h - p.wh) / p.sh + 1;
      w = (w - p.ww) / p.sw + 1;
    }
    t.encoder.push_back({c, h, w});
  }
  t.pre_projection = {c, h, w};
  t.latent = {cfg.latent_dim, h, w};
  t.latent_positions = h * w;

  // walk the mirrored decoder and demand exact inversion stage by stage
  std::vector<std::array<int, 3>> enc_inputs;
  enc_inputs.push_back({cfg.in_channels, cfg.in_height, cfg.in_width});
  for (std::size_t i = 0; i + 1 < t.encoder.size(); ++i) enc_inputs.push_back(t.encoder[i]);

  auto dec_layers = mirror_decoder_layers(cfg);
  int dc = c, dh = h, dw = w;
  idx = 0;
  for (const auto& l : dec_layers) {
    const auto expect = enc_inputs[enc_inputs.size() - 1 - static_cast<std::size_t>(idx)];
    ++idx;
    if (l.kind == EncoderLayer::Kind::conv) {
      dc = l.conv.out_channels;
      dh = (dh - 1) * l.conv.sh + l.conv.kh;
      dw = (dw - 1) * l.conv.sw + l.conv.kw;
    } else {
      dh = (dh - 1) * l.pool.sh + l.pool.wh;
      dw = (dw - 1) * l.pool.sw + l.pool.ww;
    }
    if (dc != expect[0] || dh != expect[1] || dw != expect[2]) {
      throw ConfigError("decoder layer " + std::to_string(idx) + " produces (" +
                        std::to_string(dc) + "," + std::to_string(dh) + "," + std::to_string(dw) +
                        ") but the mirrored encoder stage requires (" + std::to_string(expect[0]) +
                        "," + std::to_string(expect[1]) + "," + std::to_string(expect[2]) +
                        "); strides must divide their stage exactly");
    }
    t.decoder.push_back({dc, dh, dw});
  }
  t.output = {dc, dh, dw};
  return t;
}

// ---------------------------------------------------------------------------
// model: parameters plus graph builders

template <typename S>
struct EncodeResultT {
  NodeRef<S> e_c_grid;       // (B,D,h,w), differentiable
  TensorT<S> e_c_rows;       // (B*M, D), detached copy
  std::vector<int> indices;  // B*M
  TensorT<S> e_d_rows;       // (B*M, D)
  TensorT<S> e_d_grid;       // (B,D,h,w)
};

template <typename S>
TensorT<S> latent_grid_to_rows(const TensorT<S>& grid) {
  const int b = grid.dim(0), d = grid.dim(1), h = grid.dim(2), w = grid.dim(3);
  const int m = h * w;
  TensorT<S> rows({b * m, d});
  for (int n = 0; n < b; ++n) {
    for (int p = 0; p < m; ++p) {
      S* dst = rows.data() + (static_cast<std::int64_t>(n) * m + p) * d;
      const S* src = grid.data() + static_cast<std::int64_t>(n) * d * m + p;
      for (int j = 0; j < d; ++j) dst[j] = src[static_cast<std::int64_t>(j) * m];
    }
  }
  return rows;
}

template <typename S>
TensorT<S> latent_rows_to_grid(const TensorT<S>& rows, int b, int d, int h, int w) {
  const int m = h * w;
  TensorT<S> grid({b, d, h, w});
  for (int n = 0; n < b; ++n) {
    for (int p = 0; p < m; ++p) {
      const S* src = rows.data() + (static_cast<std::int64_t>(n) * m + p) * d;
      S* dst = grid.data() + static_cast<std::int64_t>(n) * d * m + p;
      for (int j = 0; j < d; ++j) dst[static_cast<std::int64_t>(j) * m] = src[j];
    }
  }
  return grid;
}

template <typename S>
class ModelT {
 public:
  ModelT() = default;
  ModelT(ArchitectureConfig cfg, std::map<std::string, TensorT<S>> tensors)
      : config_(std::move(cfg)), trace_(propagate_shapes(config_)) {
    decoder_layers_ = mirror_decoder_layers(config_);
    for (auto& [name, t] : tensors) params_.emplace(name, make_param(std::move(t)));
  }

  const ArchitectureConfig& config() const { return config_; }
  const ShapeTrace& trace() const { return trace_; }
  const std::map<std::string, NodeRef<S>>& params() const { return params_; }

  NodeRef<S> param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ProtocolError("model is missing parameter '" + name + "'");
    return it->second;
  }
  bool has_param(const std::string& name) const { return params_.count(name) != 0; }

  NodeRef<S> codebook() const { return param("codebook"); }

  std::vector<std::string> encoder_param_names() const {
    std::vector<std::string> names;
    int ci = 0;
    for (std::size_t i = 0; i < config_.encoder.size(); ++i) {
      if (config_.encoder[i].kind == EncoderLayer::Kind::conv) {
        names.push_back("enc.conv" + std::to_string(ci) + ".w");
        names.push_back("enc.conv" + std::to_string(ci) + ".b");
        ++ci;
      }
    }
    names.push_back("proj.w");
    names.push_back("proj.b");
    return names;
  }

  std::vector<std::string> decoder_param_names() const {
    std::vector<std::string> names = {"invproj.w", "invproj.b"};
    int ci = 0;
    for (const auto& l : decoder_layers_) {
      if (l.kind == EncoderLayer::Kind::conv) {
        names.push_back("dec.convt" + std::to_string(ci) + ".w");
        names.push_back("dec.convt" + std::to_string(ci) + ".b");
        ++ci;
      }
    }
    return names;
  }

  std::vector<std::string> classifier_param_names() const {
    return {"cls.fc0.w", "cls.fc0.b", "cls.fc1.w", "cls.fc1.b"};
  }

  bool has_encoder() const { return has_all(encoder_param_names()); }
  bool has_decoder() const { return has_all(decoder_param_names()); }
  bool has_classifier() const { return has_all(classifier_param_names()); }

  std::vector<NodeRef<S>> named(const std::vector<std::string>& names) const {
    std::vector<NodeRef<S>> out;
    out.reserve(names.size());
    for (const auto& n : names) out.push_back(param(n));
    return out;
  }

  // (B,C,H,W) -> projected latent grid (B,D,h,w)
  NodeRef<S> encoder_forward(NodeRef<S> x) const {
    check_input(x->value);
    NodeRef<S> cur = std::move(x);
    int ci = 0;
    for (const auto& l : config_.encoder) {
      if (l.kind == EncoderLayer::Kind::conv) {
        const std::string base = "enc.conv" + std::to_string(ci++);
        cur = conv2d(cur, param(base + ".w"), l.conv.sh, l.conv.sw);
        cur = bias_channels(cur, param(base + ".b"));
        cur = relu(cur);
      } else {
        cur = maxpool2d_with_argmax(cur, l.pool.wh, l.pool.ww, l.pool.sh, l.pool.sw).first;
      }
    }
    cur = conv2d(cur, param("proj.w"), 1, 1);
    cur = bias_channels(cur, param("proj.b"));
    return cur;
  }

  EncodeResultT<S> encode(const TensorT<S>& x_batch) const {
    EncodeResultT<S> r;
    r.e_c_grid = encoder_forward(make_const(x_batch));
    const auto& g = r.e_c_grid->value;
    r.e_c_rows = latent_grid_to_rows(g);
    auto [idx, quant] = quantize_nearest(r.e_c_rows, codebook()->value);
    r.indices = std::move(idx);
    r.e_d_rows = std::move(quant);
    r.e_d_grid = latent_rows_to_grid(r.e_d_rows, g.dim(0), g.dim(1), g.dim(2), g.dim(3));
    return r;
  }

  // latent grid (B,D,h,w) -> reconstruction (B,C,H,W)
  NodeRef<S> decoder_forward(NodeRef<S> latent) const {
    check_latent(latent->value);
    NodeRef<S> cur = conv_transpose2d(latent, param("invproj.w"), 1, 1);
    cur = bias_channels(cur, param("invproj.b"));
    cur = relu(cur);
    int ci = 0;
    for (const auto& l : decoder_layers_) {
      if (l.kind == EncoderLayer::Kind::conv) {
        const std::string base = "dec.convt" + std::to_string(ci++);
        cur = conv_transpose2d(cur, param(base + ".w"), l.conv.sh, l.conv.sw);
        cur = bias_channels(cur, param(base + ".b"));
        cur = relu(cur);
      } else {
        cur = max_unpool2d_fixed(cur, l.pool.wh, l.pool.ww, l.pool.sh, l.pool.sw);
      }
    }
    return cur;
  }

  TensorT<S> decode(const TensorT<S>& latent_grid) const {
    NoGradGuard ng;
    return decoder_forward(make_const(latent_grid))->value;
  }

  // flattened latent -> dense(hidden) -> relu -> dense(T)
  NodeRef<S> classifier_logits(NodeRef<S> latent) const {
    auto hidden = classifier_hidden(latent);
    return dense(hidden, param("cls.fc1.w"), param("cls.fc1.b"));
  }

  NodeRef<S> classifier_hidden(NodeRef<S> latent) const {
    check_latent(latent->value);
    const int b = latent->value.dim(0);
    auto flat = reshape(latent, {b, config_.latent_dim * trace_.latent_positions});
    return relu(dense(flat, param("cls.fc0.w"), param("cls.fc0.b")));
  }

  // class probabilities (B,T) for a dequantized latent grid
  TensorT<S> classify(const TensorT<S>& latent_grid) const {
    NoGradGuard ng;
    return softmax(classifier_logits(make_const(latent_grid))->value);
  }

 private:
  bool has_all(const std::vector<std::string>& names) const {
    for (const auto& n : names) {
      if (!has_param(n)) return false;
    }
    return true;
  }

  void check_input(const TensorT<S>& x) const {
    const bool ok = (x.rank() == 4 && x.dim(1) == config_.in_channels &&
                     x.dim(2) == config_.in_height && x.dim(3) == config_.in_width);
    if (!ok) {
      throw InputError("encoder input " + shape_str(x.shape()) + " does not match (B," +
                       std::to_string(config_.in_channels) + "," +
                       std::to_string(config_.in_height) + "," + std::to_string(config_.in_width) +
                       ")");
    }
  }

  void check_latent(const TensorT<S>& z) const {
    const bool ok = (z.rank() == 4 && z.dim(1) == trace_.latent[0] &&
                     z.dim(2) == trace_.latent[1] && z.dim(3) == trace_.latent[2]);
    if (!ok) {
      throw InputError("latent grid " + shape_str(z.shape()) + " does not match (B," +
                       std::to_string(trace_.latent[0]) + "," + std::to_string(trace_.latent[1]) +
                       "," + std::to_string(trace_.latent[2]) + ")");
    }
  }

  ArchitectureConfig config_;
  ShapeTrace trace_;
  std::vector<EncoderLayer> decoder_layers_;
  std::map<std::string, NodeRef<S>> params_;
};

using Model = ModelT<float>;

template <typename T, typename F>
ModelT<T> convert_model(const ModelT<F>& src) {
  std::map<std::string, TensorT<T>> tensors;
  for (const auto& [name, node] : src.params()) {
    tensors.emplace(name, node->value.template cast<T>());
  }
  return ModelT<T>(src.config(), std::move(tensors));
}

// ---------------------------------------------------------------------------
// initialization

namespace detail {

template <typename S>
TensorT<S> kaiming_uniform(const Shape& shape, std::int64_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  TensorT<S> t(shape);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(dist(rng));
  return t;
}

}  // namespace detail

// Kaiming-uniform fan-in weights, zero biases, uniform [-1/K,1/K] codebook.
inline Model build_from_config(const ArchitectureConfig& cfg, std::uint64_t seed) {
  const ShapeTrace trace = propagate_shapes(cfg);
  std::mt19937_64 rng(seed);
  std::map<std::string, Tensor> t;

  int ci_count = 0;
  int ch = cfg.in_channels;
  for (const auto& l : cfg.encoder) {
    if (l.kind != EncoderLayer::Kind::conv) continue;
    const std::string base = "enc.conv" + std::to_string(ci_count++);
    const auto& cv = l.conv;
    t.emplace(base + ".w",
              detail::kaiming_uniform<float>({cv.out_channels, ch, cv.kh, cv.kw},
                                             static_cast<std::int64_t>(ch) * cv.kh * cv.kw, rng));
    t.emplace(base + ".b", Tensor({cv.out_channels}));
    ch = cv.out_channels;
  }
  const int enc_out = trace.pre_projection[0];
  t.emplace("proj.w", detail::kaiming_uniform<float>({cfg.latent_dim, enc_out, 1, 1}, enc_out, rng));
  t.emplace("proj.b", Tensor({cfg.latent_dim}));

  t.emplace("invproj.w",
            detail::kaiming_uniform<float>({cfg.latent_dim, enc_out, 1, 1}, cfg.latent_dim, rng));
  t.emplace("invproj.b", Tensor({enc_out}));
  int dci = 0;
  int dch = enc_out;
  for (const auto& l : mirror_decoder_layers(cfg)) {
    if (l.kind != EncoderLayer::Kind::conv) continue;
    const std::string base = "dec.convt" + std::to_string(dci++);
    const auto& cv = l.conv;
    // fan-in of a transposed conv is the input channel count times the
    // kernel footprint it spreads from
    t.emplace(base + ".w",
              detail::kaiming_uniform<float>({dch, cv.out_channels, cv.kh, cv.kw},
                                             static_cast<std::int64_t>(dch) * cv.kh * cv.kw, rng));
    t.emplace(base + ".b", Tensor({cv.out_channels}));
    dch = cv.out_channels;
  }

  const int flat = cfg.latent_dim * trace.latent_positions;
  t.emplace("cls.fc0.w", detail::kaiming_uniform<float>({cfg.classifier_hidden, flat}, flat, rng));
  t.emplace("cls.fc0.b", Tensor({cfg.classifier_hidden}));
  t.emplace("cls.fc1.w", detail::kaiming_uniform<float>({cfg.num_classes, cfg.classifier_hidden},
                                                        cfg.classifier_hidden, rng));
  t.emplace("cls.fc1.b", Tensor({cfg.num_classes}));

  std::uniform_int_distribution<std::uint64_t> seed_dist;
  t.emplace("codebook", codebook_init<float>(cfg.codebook_size, cfg.latent_dim, seed_dist(rng)).entries);

  return Model(cfg, std::move(t));
}

}  // namespace efi
