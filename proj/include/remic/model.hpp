#ifndef REMIC_MODEL_HPP
#define REMIC_MODEL_HPP

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "remic/config_io.hpp"
#include "remic/data.hpp"
#include "remic/ops.hpp"
#include "remic/serialize.hpp"

namespace remic {

struct ModelConfig {
  int num_domains = 3;
  int image_size = 32;
  int content_channels = 64;  // full-scale setting: 256
  int num_res_blocks = 2;     // full-scale setting: 4
  int num_disc_scales = 2;    // full-scale setting: 3
  int style_dim = 8;
  int mlp_hidden = 256;
  int num_classes = 0;             // 0 = no segmentation head, 1 = binary sigmoid
  bool shared_seg_encoder = true;  // true: joint content encoder, false: separate copy
  bool seg_from_completed = true;  // segment content of completed images vs zero-filled input
  double eps = 1e-5;
  double leaky_slope = 0.2;
  uint64_t init_seed = 1;

  int base_channels() const { return content_channels / 4; }
  int min_disc_image_size() const { return 16 << (num_disc_scales - 1); }

  void validate() const {
    if (num_domains < 2) throw std::invalid_argument("ModelConfig: need >= 2 domains");
    if (image_size % 4 != 0 || image_size < 16)
      throw std::invalid_argument("ModelConfig: image size must be >= 16 and divisible by 4");
    if (content_channels % 4 != 0 || content_channels < 4)
      throw std::invalid_argument("ModelConfig: content channels must be a positive multiple of 4");
    if (num_res_blocks < 1) throw std::invalid_argument("ModelConfig: need >= 1 residual block");
    if (num_disc_scales < 1) throw std::invalid_argument("ModelConfig: need >= 1 discriminator scale");
    if (style_dim < 1) throw std::invalid_argument("ModelConfig: style dim must be >= 1");
    if (mlp_hidden < 1) throw std::invalid_argument("ModelConfig: mlp hidden width must be >= 1");
    if (num_classes < 0) throw std::invalid_argument("ModelConfig: negative class count");
    if (image_size < min_disc_image_size())
      throw std::invalid_argument(
          "ModelConfig: image too small for 4 stride-2 convs at the coarsest "
          "discriminator scale (need >= " + std::to_string(min_disc_image_size()) + ")");
    // The style encoder applies five stride-2 reductions in total.
    if (image_size / 4 < 4)
      throw std::invalid_argument("ModelConfig: image too small for the style encoder trunk");
  }

  void to_kv(KvFile& kv) const {
    kv.set_int("model.num_domains", num_domains);
    kv.set_int("model.image_size", image_size);
    kv.set_int("model.content_channels", content_channels);
    kv.set_int("model.num_res_blocks", num_res_blocks);
    kv.set_int("model.num_disc_scales", num_disc_scales);
    kv.set_int("model.style_dim", style_dim);
    kv.set_int("model.mlp_hidden", mlp_hidden);
    kv.set_int("model.num_classes", num_classes);
    kv.set_bool("model.shared_seg_encoder", shared_seg_encoder);
    kv.set_bool("model.seg_from_completed", seg_from_completed);
    kv.set_double("model.eps", eps);
    kv.set_double("model.leaky_slope", leaky_slope);
    kv.set_int("model.init_seed", static_cast<int64_t>(init_seed));
  }

  static ModelConfig from_kv(const KvFile& kv) {
    ModelConfig c;
    c.num_domains = static_cast<int>(kv.get_int("model.num_domains", c.num_domains));
    c.image_size = static_cast<int>(kv.get_int("model.image_size", c.image_size));
    c.content_channels =
        static_cast<int>(kv.get_int("model.content_channels", c.content_channels));
    c.num_res_blocks = static_cast<int>(kv.get_int("model.num_res_blocks", c.num_res_blocks));
    c.num_disc_scales = static_cast<int>(kv.get_int("model.num_disc_scales", c.num_disc_scales));
    c.style_dim = static_cast<int>(kv.get_int("model.style_dim", c.style_dim));
    c.mlp_hidden = static_cast<int>(kv.get_int("model.mlp_hidden", c.mlp_hidden));
    c.num_classes = static_cast<int>(kv.get_int("model.num_classes", c.num_classes));
    c.shared_seg_encoder = kv.get_bool("model.shared_seg_encoder", c.shared_seg_encoder);
    c.seg_from_completed = kv.get_bool("model.seg_from_completed", c.seg_from_completed);
    c.eps = kv.get_double("model.eps", c.eps);
    c.leaky_slope = kv.get_double("model.leaky_slope", c.leaky_slope);
    c.init_seed = static_cast<uint64_t>(kv.get_int("model.init_seed", 1));
    c.validate();
    return c;
  }

  bool operator==(const ModelConfig& o) const {
    return num_domains == o.num_domains && image_size == o.image_size &&
           content_channels == o.content_channels && num_res_blocks == o.num_res_blocks &&
           num_disc_scales == o.num_disc_scales && style_dim == o.style_dim &&
           mlp_hidden == o.mlp_hidden && num_classes == o.num_classes &&
           shared_seg_encoder == o.shared_seg_encoder &&
           seg_from_completed == o.seg_from_completed && eps == o.eps &&
           leaky_slope == o.leaky_slope && init_seed == o.init_seed;
  }
};

template <typename T>
struct ContentCode {
  Tensor4<T> features;  // (1, C_c, H/4, W/4)
};

template <typename T>
struct StyleCode {
  std::vector<T> v;  // style_dim entries
};

struct StylePolicy {
  enum class Kind { fixed, sample, encoded };
  Kind kind = Kind::fixed;
  double value = 0.5;
  uint64_t seed = 0;

  static StylePolicy fixed(double v = 0.5) { return {Kind::fixed, v, 0}; }
  static StylePolicy sampled(uint64_t seed) { return {Kind::sample, 0.0, seed}; }
  static StylePolicy encoded() { return {Kind::encoded, 0.0, 0}; }
};

// ---------------------------------------------------------------------------
// Parameter records. visit() enumerates (name, tensor) pairs in a fixed order
// that defines the checkpoint layout, the Adam state layout and the parameter
// count.
// ---------------------------------------------------------------------------

template <typename T>
using ParamVisitor = std::function<void(const std::string&, Tensor4<T>&)>;

template <typename T>
struct ConvP {
  Tensor4<T> w, b;
  void visit(const std::string& p, const ParamVisitor<T>& f) {
    f(p + "/w", w);
    f(p + "/b", b);
  }
};

template <typename T>
struct ResBlockP {
  ConvP<T> c1, c2;
  void visit(const std::string& p, const ParamVisitor<T>& f) {
    c1.visit(p + "/c1", f);
    c2.visit(p + "/c2", f);
  }
};

template <typename T>
struct ContentEncoderP {
  ConvP<T> down1, down2, down3;
  std::vector<ResBlockP<T>> blocks;
  void visit(const std::string& p, const ParamVisitor<T>& f) {
    down1.visit(p + "/down1", f);
    down2.visit(p + "/down2", f);
    down3.visit(p + "/down3", f);
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit(p + "/res" + std::to_string(i), f);
  }
};

template <typename T>
struct StyleEncoderP {
  ConvP<T> down1, down2, down3, extra1, extra2, fc;
  void visit(const std::string& p, const ParamVisitor<T>& f) {
    down1.visit(p + "/down1", f);
    down2.visit(p + "/down2", f);
    down3.visit(p + "/down3", f);
    extra1.visit(p + "/extra1", f);
    extra2.visit(p + "/extra2", f);
    fc.visit(p + "/fc", f);
  }
};

template <typename T>
struct GeneratorP {
  std::vector<ResBlockP<T>> blocks;
  ConvP<T> up1, up2, out;
  void visit(const std::string& p, const ParamVisitor<T>& f) {
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit(p + "/res" + std::to_string(i), f);
    up1.visit(p + "/up1", f);
    up2.visit(p + "/up2", f);
    out.visit(p + "/out", f);
  }
};

template <typename T>
struct MlpP {
  ConvP<T> fc1, fc2, fc3;
  void visit(const std::string& p, const ParamVisitor<T>& f) {
    fc1.visit(p + "/fc1", f);
    fc2.visit(p + "/fc2", f);
    fc3.visit(p + "/fc3", f);
  }
};

template <typename T>
struct DiscriminatorP {
  ConvP<T> c1, c2, c3, c4, out;
  void visit(const std::string& p, const ParamVisitor<T>& f) {
    c1.visit(p + "/c1", f);
    c2.visit(p + "/c2", f);
    c3.visit(p + "/c3", f);
    c4.visit(p + "/c4", f);
    out.visit(p + "/out", f);
  }
};

template <typename T>
struct SegmentorP {
  std::optional<ContentEncoderP<T>> encoder;  // present iff the encoder is not shared
  std::vector<ResBlockP<T>> blocks;
  ConvP<T> up1, up2, out;
  void visit(const std::string& p, const ParamVisitor<T>& f) {
    if (encoder) encoder->visit(p + "/encoder", f);
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit(p + "/res" + std::to_string(i), f);
    up1.visit(p + "/up1", f);
    up2.visit(p + "/up2", f);
    out.visit(p + "/out", f);
  }
};

template <typename T>
struct ModelParams {
  ContentEncoderP<T> content;
  std::vector<StyleEncoderP<T>> styles;
  std::vector<GeneratorP<T>> gens;
  std::vector<MlpP<T>> mlps;
  std::vector<DiscriminatorP<T>> discs;
  std::optional<SegmentorP<T>> seg;

  void visit(const ParamVisitor<T>& f) {
    content.visit("content", f);
    for (size_t i = 0; i < styles.size(); ++i)
      styles[i].visit("style" + std::to_string(i), f);
    for (size_t i = 0; i < gens.size(); ++i) gens[i].visit("gen" + std::to_string(i), f);
    for (size_t i = 0; i < mlps.size(); ++i) mlps[i].visit("mlp" + std::to_string(i), f);
    for (size_t i = 0; i < discs.size(); ++i) discs[i].visit("disc" + std::to_string(i), f);
    if (seg) seg->visit("seg", f);
  }

  size_t parameter_count() {
    size_t n = 0;
    visit([&n](const std::string&, Tensor4<T>& t) { n += t.size(); });
    return n;
  }
};

// Bound (on-tape) mirrors of the parameter records.
template <typename T>
struct ConvV {
  Var<T> w, b;
};
template <typename T>
struct ResBlockV {
  ConvV<T> c1, c2;
};
template <typename T>
struct ContentEncoderV {
  ConvV<T> down1, down2, down3;
  std::vector<ResBlockV<T>> blocks;
};
template <typename T>
struct StyleEncoderV {
  ConvV<T> down1, down2, down3, extra1, extra2, fc;
};
template <typename T>
struct GeneratorV {
  std::vector<ResBlockV<T>> blocks;
  ConvV<T> up1, up2, out;
};
template <typename T>
struct MlpV {
  ConvV<T> fc1, fc2, fc3;
};
template <typename T>
struct DiscriminatorV {
  ConvV<T> c1, c2, c3, c4, out;
};
template <typename T>
struct SegmentorV {
  std::optional<ContentEncoderV<T>> encoder;
  std::vector<ResBlockV<T>> blocks;
  ConvV<T> up1, up2, out;
};

// Pairs each on-tape Var with the parameter tensor it was bound from, so an
// optimizer can route gradients back. One instance per network group.
template <typename T>
struct BoundGroup {
  std::string name;
  std::vector<std::pair<Var<T>, Tensor4<T>*>> entries;
};

template <typename T>
struct ContentForwardResult {
  Var<T> content;    // (1, C_c, H/4, W/4)
  Var<T> skip_full;  // (1, base, H, W)
  Var<T> skip_half;  // (1, 2*base, H/2, W/2)
};

template <typename T>
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build_params();
    initialize_params();
  }

  const ModelConfig& config() const { return cfg_; }
  ModelParams<T>& params() { return params_; }
  const ModelParams<T>& params() const { return params_; }

  // -------------------------------------------------------------------------
  // Binding: place parameter tensors on a tape as leaves. `group`, when given,
  // collects (Var, tensor) pairs for the optimizer.
  // -------------------------------------------------------------------------

  ConvV<T> bind(Tape<T>& t, ConvP<T>& p, bool rg, BoundGroup<T>* group) const {
    ConvV<T> v{t.leaf(p.w, rg), t.leaf(p.b, rg)};
    if (group) {
      group->entries.emplace_back(v.w, &p.w);
      group->entries.emplace_back(v.b, &p.b);
    }
    return v;
  }

  ContentEncoderV<T> bind_content_encoder(Tape<T>& t, ContentEncoderP<T>& p, bool rg,
                                          BoundGroup<T>* group = nullptr) const {
    ContentEncoderV<T> v;
    v.down1 = bind(t, p.down1, rg, group);
    v.down2 = bind(t, p.down2, rg, group);
    v.down3 = bind(t, p.down3, rg, group);
    for (auto& b : p.blocks)
      v.blocks.push_back(ResBlockV<T>{bind(t, b.c1, rg, group), bind(t, b.c2, rg, group)});
    return v;
  }

  StyleEncoderV<T> bind_style_encoder(Tape<T>& t, int domain, bool rg,
                                      BoundGroup<T>* group = nullptr) {
    StyleEncoderP<T>& p = params_.styles.at(domain);
    StyleEncoderV<T> v;
    v.down1 = bind(t, p.down1, rg, group);
    v.down2 = bind(t, p.down2, rg, group);
    v.down3 = bind(t, p.down3, rg, group);
    v.extra1 = bind(t, p.extra1, rg, group);
    v.extra2 = bind(t, p.extra2, rg, group);
    v.fc = bind(t, p.fc, rg, group);
    return v;
  }

  GeneratorV<T> bind_generator(Tape<T>& t, int domain, bool rg,
                               BoundGroup<T>* group = nullptr) {
    GeneratorP<T>& p = params_.gens.at(domain);
    GeneratorV<T> v;
    for (auto& b : p.blocks)
      v.blocks.push_back(ResBlockV<T>{bind(t, b.c1, rg, group), bind(t, b.c2, rg, group)});
    v.up1 = bind(t, p.up1, rg, group);
    v.up2 = bind(t, p.up2, rg, group);
    v.out = bind(t, p.out, rg, group);
    return v;
  }

  MlpV<T> bind_mlp(Tape<T>& t, int domain, bool rg, BoundGroup<T>* group = nullptr) {
    MlpP<T>& p = params_.mlps.at(domain);
    return MlpV<T>{bind(t, p.fc1, rg, group), bind(t, p.fc2, rg, group),
                   bind(t, p.fc3, rg, group)};
  }

  DiscriminatorV<T> bind_discriminator(Tape<T>& t, int domain, bool rg,
                                       BoundGroup<T>* group = nullptr) {
    DiscriminatorP<T>& p = params_.discs.at(domain);
    return DiscriminatorV<T>{bind(t, p.c1, rg, group), bind(t, p.c2, rg, group),
                             bind(t, p.c3, rg, group), bind(t, p.c4, rg, group),
                             bind(t, p.out, rg, group)};
  }

  SegmentorV<T> bind_segmentor(Tape<T>& t, bool rg, BoundGroup<T>* group = nullptr) {
    if (!params_.seg) throw std::runtime_error("Model: no segmentation head configured");
    SegmentorP<T>& p = *params_.seg;
    SegmentorV<T> v;
    if (p.encoder) v.encoder = bind_content_encoder(t, *p.encoder, rg, group);
    for (auto& b : p.blocks)
      v.blocks.push_back(ResBlockV<T>{bind(t, b.c1, rg, group), bind(t, b.c2, rg, group)});
    v.up1 = bind(t, p.up1, rg, group);
    v.up2 = bind(t, p.up2, rg, group);
    v.out = bind(t, p.out, rg, group);
    return v;
  }

  // -------------------------------------------------------------------------
  // Graph-level forward passes.
  // -------------------------------------------------------------------------

  // Zero-fills invisible domains in [0,1] space, then maps to [-1,1]. An
  // all-zero visible image is therefore indistinguishable from a missing one.
  Tensor4<T> pack_input(const Sample& sample, const std::vector<uint8_t>& visibility) const {
    sample.validate();
    if (static_cast<int>(visibility.size()) != cfg_.num_domains ||
        sample.num_domains() != cfg_.num_domains)
      throw std::invalid_argument("Model: sample domain count mismatch");
    const int h = sample.height(), w = sample.width();
    if (h % 4 != 0 || w % 4 != 0)
      throw std::invalid_argument("Model: image size must be divisible by 4, got " +
                                  std::to_string(h) + "x" + std::to_string(w));
    Tensor4<T> packed(1, cfg_.num_domains, h, w);
    for (int d = 0; d < cfg_.num_domains; ++d) {
      const Tensor4f& img = sample.images[static_cast<size_t>(d)];
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          packed(0, d, y, x) = visibility[static_cast<size_t>(d)]
                                   ? T(2) * static_cast<T>(img(0, 0, y, x)) - T(1)
                                   : T(-1);
    }
    return packed;
  }

  Tensor4<T> to_signed(const Tensor4f& img01) const {
    Tensor4<T> out(img01.shape[0], img01.shape[1], img01.shape[2], img01.shape[3]);
    for (size_t i = 0; i < img01.size(); ++i)
      out.data[i] = T(2) * static_cast<T>(img01.data[i]) - T(1);
    return out;
  }

  Tensor4f to_unit(const Tensor4<T>& img_signed) const {
    Tensor4f out(img_signed.shape[0], img_signed.shape[1], img_signed.shape[2],
                 img_signed.shape[3]);
    for (size_t i = 0; i < img_signed.size(); ++i)
      out.data[i] = static_cast<float>((img_signed.data[i] + T(1)) / T(2));
    return out;
  }

  ContentForwardResult<T> content_forward(Tape<T>&, const ContentEncoderV<T>& v,
                                          Var<T> packed) const {
    const T eps = static_cast<T>(cfg_.eps);
    const int base = cfg_.base_channels();
    Var<T> h1 = relu(instance_norm(
        conv2d(packed, v.down1.w, v.down1.b, ConvSpec{cfg_.num_domains, base, 7, 1, 3, true}),
        eps));
    Var<T> h2 = relu(instance_norm(
        conv2d(h1, v.down2.w, v.down2.b, ConvSpec{base, 2 * base, 4, 2, 1, true}), eps));
    Var<T> h3 = relu(instance_norm(
        conv2d(h2, v.down3.w, v.down3.b, ConvSpec{2 * base, 4 * base, 4, 2, 1, true}), eps));
    for (const auto& b : v.blocks) {
      ResBlockVars<T> rv{b.c1.w, b.c1.b, b.c2.w, b.c2.b};
      h3 = residual_block(h3, rv, NormMode::instance, eps);
    }
    return ContentForwardResult<T>{h3, h1, h2};
  }

  // Style path: the content-encoder trunk shape without any normalization,
  // two extra stride-2 convs, global average pooling and a projection.
  Var<T> style_forward(Tape<T>&, const StyleEncoderV<T>& v, Var<T> image) const {
    const int base = cfg_.base_channels();
    Var<T> h = relu(conv2d(image, v.down1.w, v.down1.b, ConvSpec{1, base, 7, 1, 3, true}));
    h = relu(conv2d(h, v.down2.w, v.down2.b, ConvSpec{base, 2 * base, 4, 2, 1, true}));
    h = relu(conv2d(h, v.down3.w, v.down3.b, ConvSpec{2 * base, 4 * base, 4, 2, 1, true}));
    h = relu(conv2d(h, v.extra1.w, v.extra1.b, ConvSpec{4 * base, 4 * base, 4, 2, 1, true}));
    h = relu(conv2d(h, v.extra2.w, v.extra2.b, ConvSpec{4 * base, 4 * base, 4, 2, 1, true}));
    h = global_avg_pool(h);
    return fully_connected(h, v.fc.w, v.fc.b);
  }

  // MLP from a style code to the per-layer AdaIN parameters, laid out as
  // [gamma1, beta1, gamma2, beta2] per residual block. gamma = 1 + raw output,
  // so a zero MLP output is the identity affine.
  Var<T> mlp_forward(Tape<T>&, const MlpV<T>& v, Var<T> style) const {
    Var<T> h = relu(fully_connected(style, v.fc1.w, v.fc1.b));
    h = relu(fully_connected(h, v.fc2.w, v.fc2.b));
    return fully_connected(h, v.fc3.w, v.fc3.b);
  }

  Var<T> generate_forward(Tape<T>& t, const GeneratorV<T>& g, const MlpV<T>& m,
                          Var<T> content, Var<T> style) const {
    const T eps = static_cast<T>(cfg_.eps);
    const int cc = cfg_.content_channels;
    const Tensor4<T>& cv = content.value();
    if (cv.batch() != 1 || cv.channels() != cc)
      throw std::invalid_argument("generate: content code must be (1, " + std::to_string(cc) +
                                  ", H/4, W/4), got " + cv.shape_str());
    Var<T> adain_params = mlp_forward(t, m, style);
    Var<T> h = content;
    for (size_t i = 0; i < g.blocks.size(); ++i) {
      const int off = static_cast<int>(i) * 4 * cc;
      AdainStats<T> st;
      st.gamma1 = add_const(slice_channels(adain_params, off, off + cc), T(1));
      st.beta1 = slice_channels(adain_params, off + cc, off + 2 * cc);
      st.gamma2 = add_const(slice_channels(adain_params, off + 2 * cc, off + 3 * cc), T(1));
      st.beta2 = slice_channels(adain_params, off + 3 * cc, off + 4 * cc);
      ResBlockVars<T> rv{g.blocks[i].c1.w, g.blocks[i].c1.b, g.blocks[i].c2.w,
                         g.blocks[i].c2.b};
      h = residual_block(h, rv, NormMode::adain, eps, &st);
    }
    h = nearest_upsample2x(h);
    h = relu(conv2d(h, g.up1.w, g.up1.b, ConvSpec{cc, cc / 2, 5, 1, 2, true}));
    h = nearest_upsample2x(h);
    h = relu(conv2d(h, g.up2.w, g.up2.b, ConvSpec{cc / 2, cc / 4, 5, 1, 2, true}));
    h = conv2d(h, g.out.w, g.out.b, ConvSpec{cc / 4, 1, 7, 1, 3, true});
    return tanh_op(h);  // [-1, 1]
  }

  // One patch classifier applied at num_disc_scales pyramid levels.
  std::vector<Var<T>> discriminate_forward(Tape<T>&, const DiscriminatorV<T>& d,
                                           Var<T> image) const {
    const Tensor4<T>& iv = image.value();
    if (iv.height() < cfg_.min_disc_image_size() || iv.width() < cfg_.min_disc_image_size())
      throw std::invalid_argument(
          "discriminate: image too small for 4 stride-2 convs at the coarsest scale "
          "(need >= " + std::to_string(cfg_.min_disc_image_size()) + ", got " +
          iv.shape_str() + ")");
    const T slope = static_cast<T>(cfg_.leaky_slope);
    const int base = cfg_.base_channels();
    std::vector<Var<T>> maps;
    Var<T> level = image;
    for (int s = 0; s < cfg_.num_disc_scales; ++s) {
      if (s > 0) level = downsample_avg2x(level);
      Var<T> h = leaky_relu(
          conv2d(level, d.c1.w, d.c1.b, ConvSpec{1, base, 4, 2, 1, true}), slope);
      h = leaky_relu(conv2d(h, d.c2.w, d.c2.b, ConvSpec{base, 2 * base, 4, 2, 1, true}), slope);
      h = leaky_relu(conv2d(h, d.c3.w, d.c3.b, ConvSpec{2 * base, 4 * base, 4, 2, 1, true}),
                     slope);
      h = leaky_relu(conv2d(h, d.c4.w, d.c4.b, ConvSpec{4 * base, 8 * base, 4, 2, 1, true}),
                     slope);
      maps.push_back(conv2d(h, d.out.w, d.out.b, ConvSpec{8 * base, 1, 1, 1, 0, true}));
    }
    return maps;
  }

  // U-shaped decoder over the content code with encoder skip connections.
  // Output: per-class probabilities, softmax for L >= 2 and sigmoid for L = 1.
  Var<T> segment_forward(Tape<T>&, const SegmentorV<T>& sv, Var<T> content,
                         Var<T> skip_full, Var<T> skip_half) const {
    if (!skip_full.valid() || !skip_half.valid())
      throw std::invalid_argument("segment: missing skip features from the encoder pass");
    const T eps = static_cast<T>(cfg_.eps);
    const int cc = cfg_.content_channels;
    const int base = cfg_.base_channels();
    Var<T> h = content;
    for (const auto& b : sv.blocks) {
      ResBlockVars<T> rv{b.c1.w, b.c1.b, b.c2.w, b.c2.b};
      h = residual_block(h, rv, NormMode::instance, eps);
    }
    h = nearest_upsample2x(h);
    h = concat_channels<T>({h, skip_half});
    h = relu(instance_norm(
        conv2d(h, sv.up1.w, sv.up1.b, ConvSpec{cc + 2 * base, cc / 2, 5, 1, 2, true}), eps));
    h = nearest_upsample2x(h);
    h = concat_channels<T>({h, skip_full});
    h = relu(instance_norm(
        conv2d(h, sv.up2.w, sv.up2.b, ConvSpec{cc / 2 + base, cc / 4, 5, 1, 2, true}), eps));
    h = conv2d(h, sv.out.w, sv.out.b,
               ConvSpec{cc / 4, std::max(cfg_.num_classes, 1), 7, 1, 3, true});
    return cfg_.num_classes >= 2 ? softmax_channels(h) : sigmoid_op(h);
  }

  // -------------------------------------------------------------------------
  // Inference wrappers (no gradients).
  // -------------------------------------------------------------------------

  struct EncodeResult {
    ContentCode<T> code;
    Tensor4<T> skip_full, skip_half;
  };

  EncodeResult encode_content(const Sample& sample) {
    Tape<T> t;
    auto enc = bind_content_encoder(t, params_.content, false);
    Var<T> packed = t.leaf(pack_input(sample, sample.visibility));
    auto res = content_forward(t, enc, packed);
    return EncodeResult{ContentCode<T>{res.content.value()}, res.skip_full.value(),
                        res.skip_half.value()};
  }

  StyleCode<T> encode_style(const Tensor4f& image01, int domain) {
    check_domain(domain);
    Tape<T> t;
    auto sv = bind_style_encoder(t, domain, false);
    Var<T> img = t.leaf(to_signed(image01));
    Var<T> code = style_forward(t, sv, img);
    StyleCode<T> out;
    out.v = code.value().data;
    return out;
  }

  // Returns the generated image in [0,1].
  Tensor4f generate(const ContentCode<T>& content, const StyleCode<T>& style, int domain) {
    check_domain(domain);
    if (static_cast<int>(style.v.size()) != cfg_.style_dim)
      throw std::invalid_argument("generate: style code must have " +
                                  std::to_string(cfg_.style_dim) + " entries");
    Tape<T> t;
    auto gv = bind_generator(t, domain, false);
    auto mv = bind_mlp(t, domain, false);
    Tensor4<T> sc(1, cfg_.style_dim, 1, 1);
    sc.data = style.v;
    Var<T> img = generate_forward(t, gv, mv, t.leaf(content.features), t.leaf(sc));
    return to_unit(img.value());
  }

  std::vector<Tensor4<T>> discriminate(const Tensor4f& image01, int domain) {
    check_domain(domain);
    Tape<T> t;
    auto dv = bind_discriminator(t, domain, false);
    auto maps = discriminate_forward(t, dv, t.leaf(to_signed(image01)));
    std::vector<Tensor4<T>> out;
    for (const auto& m : maps) out.push_back(m.value());
    return out;
  }

  // Segments a sample (visible domains as flagged; invisible zero-filled).
  Tensor4f segment_probs(const Sample& sample) {
    if (!params_.seg) throw std::runtime_error("Model: no segmentation head configured");
    Tape<T> t;
    auto sv = bind_segmentor(t, false);
    Var<T> packed = t.leaf(pack_input(sample, sample.visibility));
    ContentForwardResult<T> enc;
    if (sv.encoder) {
      enc = content_forward(t, *sv.encoder, packed);
    } else {
      auto shared = bind_content_encoder(t, params_.content, false);
      enc = content_forward(t, shared, packed);
    }
    Var<T> probs = segment_forward(t, sv, enc.content, enc.skip_full, enc.skip_half);
    return cast_tensor<float>(probs.value());
  }

  Tensor4i segment_labels(const Sample& sample) {
    Tensor4f probs = segment_probs(sample);
    const int h = probs.height(), w = probs.width();
    Tensor4i labels(1, 1, h, w);
    if (cfg_.num_classes == 1) {
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) labels(0, 0, y, x) = probs(0, 0, y, x) >= 0.5f ? 1 : 0;
    } else {
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          int best = 0;
          float bv = probs(0, 0, y, x);
          for (int c = 1; c < probs.channels(); ++c)
            if (probs(0, c, y, x) > bv) {
              bv = probs(0, c, y, x);
              best = c;
            }
          labels(0, 0, y, x) = best;
        }
    }
    return labels;
  }

  StyleCode<T> style_from_policy(const StylePolicy& policy, const Sample& sample,
                                 int domain) {
    check_domain(domain);
    StyleCode<T> s;
    switch (policy.kind) {
      case StylePolicy::Kind::fixed:
        s.v.assign(static_cast<size_t>(cfg_.style_dim), static_cast<T>(policy.value));
        return s;
      case StylePolicy::Kind::sample: {
        Rng rng(mix_seed(policy.seed, static_cast<uint64_t>(domain)));
        s.v.resize(static_cast<size_t>(cfg_.style_dim));
        for (auto& v : s.v) v = static_cast<T>(rng.normal());
        return s;
      }
      case StylePolicy::Kind::encoded: {
        if (!sample.visibility[static_cast<size_t>(domain)])
          throw std::invalid_argument(
              "complete_missing: encoded style requested for missing domain " +
              std::to_string(domain));
        return encode_style(sample.images[static_cast<size_t>(domain)], domain);
      }
    }
    throw std::logic_error("style_from_policy: unreachable");
  }

  // Full n-to-n completion: one content encoding from the visible domains,
  // then one generated image per domain. Output images are in [0,1].
  std::vector<Tensor4f> complete_missing(const Sample& sample, const StylePolicy& policy) {
    EncodeResult enc = encode_content(sample);
    std::vector<Tensor4f> out;
    for (int d = 0; d < cfg_.num_domains; ++d) {
      StyleCode<T> s = style_from_policy(policy, sample, d);
      out.push_back(generate(enc.code, s, d));
    }
    return out;
  }

  // -------------------------------------------------------------------------
  // Checkpoint payload (parameters as float32, plus the config echo).
  // -------------------------------------------------------------------------

  void save_params(BlobWriter& blob) {
    KvFile kv;
    cfg_.to_kv(kv);
    blob.add_text("config", kv.serialize());
    params_.visit([&blob](const std::string& name, Tensor4<T>& t) {
      blob.add_tensor("param/" + name, cast_tensor<float>(t));
    });
  }

  void load_params(const BlobReader& blob) {
    const ModelConfig stored = ModelConfig::from_kv(KvFile::parse_string(blob.text("config")));
    if (!(stored == cfg_))
      throw std::runtime_error("checkpoint: config mismatch with the running model");
    params_.visit([&blob](const std::string& name, Tensor4<T>& t) {
      Tensor4f loaded = blob.tensor("param/" + name);
      if (loaded.shape != t.shape)
        throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
      t = cast_tensor<T>(loaded);
    });
  }

  static Model<T> from_checkpoint(const BlobReader& blob) {
    Model<T> m(ModelConfig::from_kv(KvFile::parse_string(blob.text("config"))));
    m.load_params(blob);
    return m;
  }

 private:
  void check_domain(int domain) const {
    if (domain < 0 || domain >= cfg_.num_domains)
      throw std::invalid_argument("Model: invalid domain index " + std::to_string(domain));
  }

  static ConvP<T> make_conv(int out, int in, int k) {
    return ConvP<T>{Tensor4<T>::zeros(out, in, k, k), Tensor4<T>::zeros(1, out, 1, 1)};
  }

  ContentEncoderP<T> make_content_encoder() const {
    const int base = cfg_.base_channels();
    ContentEncoderP<T> p;
    p.down1 = make_conv(base, cfg_.num_domains, 7);
    p.down2 = make_conv(2 * base, base, 4);
    p.down3 = make_conv(4 * base, 2 * base, 4);
    for (int i = 0; i < cfg_.num_res_blocks; ++i)
      p.blocks.push_back(ResBlockP<T>{make_conv(4 * base, 4 * base, 3),
                                      make_conv(4 * base, 4 * base, 3)});
    return p;
  }

  void build_params() {
    const int base = cfg_.base_channels();
    const int cc = cfg_.content_channels;
    params_.content = make_content_encoder();
    for (int d = 0; d < cfg_.num_domains; ++d) {
      StyleEncoderP<T> s;
      s.down1 = make_conv(base, 1, 7);
      s.down2 = make_conv(2 * base, base, 4);
      s.down3 = make_conv(4 * base, 2 * base, 4);
      s.extra1 = make_conv(4 * base, 4 * base, 4);
      s.extra2 = make_conv(4 * base, 4 * base, 4);
      s.fc = make_conv(cfg_.style_dim, 4 * base, 1);
      params_.styles.push_back(std::move(s));

      GeneratorP<T> g;
      for (int i = 0; i < cfg_.num_res_blocks; ++i)
        g.blocks.push_back(ResBlockP<T>{make_conv(cc, cc, 3), make_conv(cc, cc, 3)});
      g.up1 = make_conv(cc / 2, cc, 5);
      g.up2 = make_conv(cc / 4, cc / 2, 5);
      g.out = make_conv(1, cc / 4, 7);
      params_.gens.push_back(std::move(g));

      MlpP<T> m;
      const int adain_dim = cfg_.num_res_blocks * 4 * cc;
      m.fc1 = make_conv(cfg_.mlp_hidden, cfg_.style_dim, 1);
      m.fc2 = make_conv(cfg_.mlp_hidden, cfg_.mlp_hidden, 1);
      m.fc3 = make_conv(adain_dim, cfg_.mlp_hidden, 1);
      params_.mlps.push_back(std::move(m));

      DiscriminatorP<T> dd;
      dd.c1 = make_conv(base, 1, 4);
      dd.c2 = make_conv(2 * base, base, 4);
      dd.c3 = make_conv(4 * base, 2 * base, 4);
      dd.c4 = make_conv(8 * base, 4 * base, 4);
      dd.out = make_conv(1, 8 * base, 1);
      params_.discs.push_back(std::move(dd));
    }
    if (cfg_.num_classes >= 1) {
      SegmentorP<T> seg;
      if (!cfg_.shared_seg_encoder) seg.encoder = make_content_encoder();
      for (int i = 0; i < cfg_.num_res_blocks; ++i)
        seg.blocks.push_back(ResBlockP<T>{make_conv(cc, cc, 3), make_conv(cc, cc, 3)});
      seg.up1 = make_conv(cc / 2, cc + 2 * base, 5);
      seg.up2 = make_conv(cc / 4, cc / 2 + base, 5);
      seg.out = make_conv(std::max(cfg_.num_classes, 1), cc / 4, 7);
      params_.seg = std::move(seg);
    }
  }

  // Kaiming-style fan-in init with a fixed seed; zero biases.
  void initialize_params() {
    Rng rng(cfg_.init_seed);
    params_.visit([&rng](const std::string& name, Tensor4<T>& t) {
      const bool is_bias = name.size() >= 2 && name.compare(name.size() - 2, 2, "/b") == 0;
      if (is_bias) {
        std::fill(t.data.begin(), t.data.end(), T(0));
        return;
      }
      const int fan_in = t.channels() * t.height() * t.width();
      const double std_dev = std::sqrt(2.0 / fan_in);
      for (auto& v : t.data) v = static_cast<T>(rng.normal() * std_dev);
    });
  }

  ModelConfig cfg_;
  ModelParams<T> params_;
};

}  // namespace remic

#endif
