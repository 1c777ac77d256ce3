#pragma once

#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pef/blocks.hpp"
#include "pef/ops.hpp"
#include "pef/tensor.hpp"

namespace pef {

enum class Variant { Deit, Xcit, ConvBaseline, Vab };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Deit: return "deit";
    case Variant::Xcit: return "xcit";
    case Variant::ConvBaseline: return "conv-baseline";
    case Variant::Vab: return "vab";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& s) {
  if (s == "deit") return Variant::Deit;
  if (s == "xcit") return Variant::Xcit;
  if (s == "conv-baseline" || s == "conv") return Variant::ConvBaseline;
  if (s == "vab") return Variant::Vab;
  throw ValueError("unknown encoder variant: " + s);
}

struct ModelConfig {
  int width = 192;           // W, pixels
  int height = 256;          // H, pixels
  int patch = 16;            // p
  int d_model = 192;
  int n_heads = 4;
  Variant variant = Variant::Deit;
  int encoder_depth = 4;
  int decoder_depth = 6;
  int queries = 100;         // M
  int joints = 17;           // K
  int vab_extra_depth = 3;   // extra token-attention layers for vab
  bool memory_pos = true;    // add patch position embedding to cross-attn keys
  std::uint64_t seed = 0;

  static constexpr int conv_stride = 16;  // total stride of the conv stem

  void validate() const {
    if (width <= 0 || height <= 0 || patch <= 0)
      throw ValueError("model: dimensions must be positive");
    if (variant == Variant::ConvBaseline) {
      if (width % conv_stride != 0 || height % conv_stride != 0)
        throw ValueError("model: image size not divisible by conv stride");
    } else if (width % patch != 0 || height % patch != 0) {
      throw ValueError("model: image size not divisible by patch size");
    }
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
      throw ValueError("model: n_heads must divide d_model");
    if (queries < joints) throw ValueError("model: queries < joints");
    if (decoder_depth < 1) throw ValueError("model: decoder depth < 1");
    if (encoder_depth < 0) throw ValueError("model: encoder depth < 0");
  }

  // token grid (non-CLS)
  int grid_rows() const {
    return height / (variant == Variant::ConvBaseline ? conv_stride : patch);
  }
  int grid_cols() const {
    return width / (variant == Variant::ConvBaseline ? conv_stride : patch);
  }
  int tokens() const { return grid_rows() * grid_cols(); }

  std::map<std::string, std::string> to_kv() const {
    return {
        {"model.width", std::to_string(width)},
        {"model.height", std::to_string(height)},
        {"model.patch", std::to_string(patch)},
        {"model.d_model", std::to_string(d_model)},
        {"model.n_heads", std::to_string(n_heads)},
        {"model.variant", variant_name(variant)},
        {"model.encoder_depth", std::to_string(encoder_depth)},
        {"model.decoder_depth", std::to_string(decoder_depth)},
        {"model.queries", std::to_string(queries)},
        {"model.joints", std::to_string(joints)},
        {"model.vab_extra_depth", std::to_string(vab_extra_depth)},
        {"model.memory_pos", memory_pos ? "1" : "0"},
        {"model.seed", std::to_string(seed)},
    };
  }

  static ModelConfig from_kv(const std::map<std::string, std::string>& kv) {
    ModelConfig c;
    auto get = [&](const char* key, const std::string& fallback) {
      auto it = kv.find(key);
      return it == kv.end() ? fallback : it->second;
    };
    c.width = std::stoi(get("model.width", "192"));
    c.height = std::stoi(get("model.height", "256"));
    c.patch = std::stoi(get("model.patch", "16"));
    c.d_model = std::stoi(get("model.d_model", "192"));
    c.n_heads = std::stoi(get("model.n_heads", "4"));
    c.variant = variant_from_name(get("model.variant", "deit"));
    c.encoder_depth = std::stoi(get("model.encoder_depth", "4"));
    c.decoder_depth = std::stoi(get("model.decoder_depth", "6"));
    c.queries = std::stoi(get("model.queries", "100"));
    c.joints = std::stoi(get("model.joints", "17"));
    c.vab_extra_depth = std::stoi(get("model.vab_extra_depth", "3"));
    c.memory_pos = get("model.memory_pos", "1") != "0";
    c.seed = std::stoull(get("model.seed", "0"));
    return c;
  }
};

// M query outputs: class logits over K+1 classes (index K = non-object)
// and sigmoid-squashed (x, y) in (0,1).
template <class Real>
struct PredictionSet {
  Tensor<Real> logits;  // (M, K+1)
  Tensor<Real> coords;  // (M, 2)
};

// Three-layer head MLP, hidden width d, gelu between layers.
template <class Real>
struct HeadMlp {
  Linear<Real> l1, l2, l3;

  template <class Rng>
  void init(int d, int out, Rng& rng) {
    l1.init(d, d, rng);
    l2.init(d, d, rng);
    l3.init(d, out, rng);
  }

  Tensor<Real> operator()(const Tensor<Real>& x) const {
    return l3(gelu(l2(gelu(l1(x)))));
  }

  void visit(const std::string& prefix, const ParamVisitor<Real>& fn) {
    l1.visit(prefix + ".l1", fn);
    l2.visit(prefix + ".l2", fn);
    l3.visit(prefix + ".l3", fn);
  }
};

// One stage of the conv baseline stem: depthwise 3x3 stride 2 followed by
// a pointwise (1x1) channel projection and gelu.
template <class Real>
struct ConvStage {
  Tensor<Real> dw_kernel, dw_bias;
  Linear<Real> pointwise;
  int in_ch = 0, out_ch = 0;

  template <class Rng>
  void init(int in, int out, Rng& rng) {
    in_ch = in;
    out_ch = out;
    dw_kernel = Tensor<Real>::randn({in, 3, 3}, rng, Real(0.1), true);
    dw_bias = Tensor<Real>::zeros({in}, true);
    pointwise.init(in, out, rng);
  }

  // x is (H, W, in_ch); returns (H/2, W/2, out_ch)
  Tensor<Real> operator()(const Tensor<Real>& x) const {
    Tensor<Real> y = dwconv3x3(x, dw_kernel, dw_bias, 2);
    const int h = y.dim(0), w = y.dim(1);
    y = pointwise(reshape(y, {h * w, in_ch}));
    return gelu(reshape(y, {h, w, out_ch}));
  }

  void visit(const std::string& prefix, const ParamVisitor<Real>& fn) {
    fn(prefix + ".dw_kernel", dw_kernel);
    fn(prefix + ".dw_bias", dw_bias);
    pointwise.visit(prefix + ".pw", fn);
  }
};

template <class Real>
class PoseModel {
 public:
  PoseModel() = default;

  explicit PoseModel(const ModelConfig& config) : cfg_(config) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    const int d = cfg_.d_model;
    const int n = cfg_.tokens();
    const GridShape grid{cfg_.grid_rows(), cfg_.grid_cols()};

    if (cfg_.variant == Variant::ConvBaseline) {
      const int chans[5] = {3, 32, 64, 128, 128};
      for (int s = 0; s < 4; ++s) stages_[s].init(chans[s], chans[s + 1], rng);
      conv_proj_.init(128, d, rng);
    } else {
      embed_.init(3 * cfg_.patch * cfg_.patch, d, rng);
    }
    cls_ = Tensor<Real>::randn({1, d}, rng, Real(0.02), true);
    pos_ = Tensor<Real>::randn({n + 1, d}, rng, Real(0.02), true);

    const EncoderVariant enc_var = cfg_.variant == Variant::Xcit
                                       ? EncoderVariant::ChannelAttention
                                       : EncoderVariant::TokenAttention;
    if (cfg_.variant != Variant::ConvBaseline) {
      encoder_.resize(static_cast<std::size_t>(cfg_.encoder_depth));
      for (auto& layer : encoder_)
        layer.init(d, cfg_.n_heads, enc_var, rng, grid, true);
    }
    if (cfg_.variant == Variant::Vab) {
      vab_extra_.resize(static_cast<std::size_t>(cfg_.vab_extra_depth));
      for (auto& layer : vab_extra_)
        layer.init(d, cfg_.n_heads, EncoderVariant::TokenAttention, rng);
    }
    enc_ln_.init(d);

    query_pos_ = Tensor<Real>::randn({cfg_.queries, d}, rng, Real(0.02), true);
    decoder_.resize(static_cast<std::size_t>(cfg_.decoder_depth));
    for (auto& layer : decoder_) layer.init(d, cfg_.n_heads, rng);
    dec_ln_.init(d);

    class_head_.init(d, cfg_.joints + 1, rng);
    coord_head_.init(d, 2, rng);
  }

  const ModelConfig& config() const { return cfg_; }

  // Patch tokens -> embedded sequence with CLS prepended and position
  // embedding added. Rejects a token count that does not match the
  // configured grid (no interpolation).
  Tensor<Real> embed_and_position(const Tensor<Real>& patch_tokens) const {
    if (patch_tokens.dim(0) != cfg_.tokens())
      throw ShapeError("embed: token count does not match configured grid");
    Tensor<Real> t = embed_(patch_tokens);
    t = concat_rows(cls_, t);
    return add(t, pos_);
  }

  Tensor<Real> encode_memory(const Tensor<Real>& image) const {
    Tensor<Real> x;
    if (cfg_.variant == Variant::ConvBaseline) {
      Tensor<Real> f = image;
      for (const auto& stage : stages_) f = stage(f);
      const int h = f.dim(0), w = f.dim(1);
      Tensor<Real> tok = conv_proj_(reshape(f, {h * w, 128}));
      x = add(concat_rows(cls_, tok), pos_);
    } else {
      if (image.dim(0) != cfg_.height || image.dim(1) != cfg_.width)
        throw ShapeError("forward: image size does not match config");
      x = embed_and_position(patchify(image, cfg_.patch));
      for (const auto& layer : encoder_) x = layer(x);
      for (const auto& layer : vab_extra_) x = layer(x);
    }
    return enc_ln_(x);
  }

  PredictionSet<Real> decode(const Tensor<Real>& memory) const {
    if (memory.dim(0) != cfg_.tokens() + 1)
      throw ShapeError("decode: memory must have N+1 tokens");
    Tensor<Real> x = Tensor<Real>::zeros({cfg_.queries, cfg_.d_model});
    const Tensor<Real>* mem_pos = cfg_.memory_pos ? &pos_ : nullptr;
    for (const auto& layer : decoder_)
      x = layer(x, memory, query_pos_, mem_pos);
    x = dec_ln_(x);
    PredictionSet<Real> out;
    out.logits = class_head_(x);
    out.coords = sigmoid(coord_head_(x));
    return out;
  }

  PredictionSet<Real> forward(const Tensor<Real>& image) const {
    return decode(encode_memory(image));
  }

  void visit(const ParamVisitor<Real>& fn) {
    if (cfg_.variant == Variant::ConvBaseline) {
      for (int s = 0; s < 4; ++s)
        stages_[s].visit("encoder.stage" + std::to_string(s), fn);
      conv_proj_.visit("encoder.proj", fn);
    } else {
      embed_.visit("encoder.embed", fn);
    }
    fn("encoder.cls", cls_);
    fn("encoder.pos", pos_);
    for (std::size_t i = 0; i < encoder_.size(); ++i)
      encoder_[i].visit("encoder.layer" + std::to_string(i), fn);
    for (std::size_t i = 0; i < vab_extra_.size(); ++i)
      vab_extra_[i].visit("encoder.extra" + std::to_string(i), fn);
    enc_ln_.visit("encoder.final_ln", fn);
    fn("decoder.query_pos", query_pos_);
    for (std::size_t i = 0; i < decoder_.size(); ++i)
      decoder_[i].visit("decoder.layer" + std::to_string(i), fn);
    dec_ln_.visit("decoder.final_ln", fn);
    class_head_.visit("decoder.class_head", fn);
    coord_head_.visit("decoder.coord_head", fn);
  }

  std::vector<std::pair<std::string, Tensor<Real>>> named_params() {
    std::vector<std::pair<std::string, Tensor<Real>>> out;
    visit([&](const std::string& name, Tensor<Real>& t) {
      out.emplace_back(name, t);
    });
    return out;
  }

  std::size_t param_count() {
    std::size_t n = 0;
    visit([&](const std::string&, Tensor<Real>& t) { n += t.size(); });
    return n;
  }

 private:
  ModelConfig cfg_;
  Linear<Real> embed_;
  ConvStage<Real> stages_[4];
  Linear<Real> conv_proj_;
  Tensor<Real> cls_, pos_;
  std::vector<EncoderLayer<Real>> encoder_;
  std::vector<EncoderLayer<Real>> vab_extra_;
  LayerNorm<Real> enc_ln_;
  Tensor<Real> query_pos_;
  std::vector<DecoderLayer<Real>> decoder_;
  LayerNorm<Real> dec_ln_;
  HeadMlp<Real> class_head_, coord_head_;
};

}  // namespace pef
