#ifndef REMIC_TRAINER_HPP
#define REMIC_TRAINER_HPP

#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "remic/losses.hpp"
#include "remic/model.hpp"

namespace remic {

enum class SegMode { off, separate, joint };

inline SegMode parse_seg_mode(const std::string& s) {
  if (s == "off") return SegMode::off;
  if (s == "separate") return SegMode::separate;
  if (s == "joint") return SegMode::joint;
  throw std::invalid_argument("unknown seg mode '" + s + "'");
}

inline std::string seg_mode_name(SegMode m) {
  switch (m) {
    case SegMode::off: return "off";
    case SegMode::separate: return "separate";
    case SegMode::joint: return "joint";
  }
  return "?";
}

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 1;
  int64_t iterations = 2000;
  LossWeights weights;
  MaskSpec mask_mode;  // defaults to uniform_k
  bool multi_sample = false;
  SegMode seg_mode = SegMode::off;
  uint64_t seed = 1;
  int64_t checkpoint_every = 0;  // 0 = final checkpoint only

  void validate() const {
    if (lr <= 0) throw std::invalid_argument("TrainConfig: lr must be > 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw std::invalid_argument("TrainConfig: betas must lie in [0, 1)");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch size must be >= 1");
    if (iterations < 0) throw std::invalid_argument("TrainConfig: negative iteration count");
    weights.validate();
  }

  void to_kv(KvFile& kv) const {
    kv.set_double("train.lr", lr);
    kv.set_double("train.beta1", beta1);
    kv.set_double("train.beta2", beta2);
    kv.set_double("train.adam_eps", adam_eps);
    kv.set_int("train.batch_size", batch_size);
    kv.set_int("train.iterations", iterations);
    kv.set_double("train.lambda_adv", weights.adv);
    kv.set_double("train.lambda_x_cyc", weights.x_cyc);
    kv.set_double("train.lambda_c_cyc", weights.c_cyc);
    kv.set_double("train.lambda_s_cyc", weights.s_cyc);
    kv.set_double("train.lambda_rec", weights.rec);
    kv.set_double("train.lambda_seg", weights.seg);
    kv.set_string("train.mask_mode", mask_mode.to_string());
    kv.set_bool("train.multi_sample", multi_sample);
    kv.set_string("train.seg_mode", seg_mode_name(seg_mode));
    kv.set_int("train.seed", static_cast<int64_t>(seed));
    kv.set_int("train.checkpoint_every", checkpoint_every);
  }

  static TrainConfig from_kv(const KvFile& kv) {
    TrainConfig c;
    c.lr = kv.get_double("train.lr", c.lr);
    c.beta1 = kv.get_double("train.beta1", c.beta1);
    c.beta2 = kv.get_double("train.beta2", c.beta2);
    c.adam_eps = kv.get_double("train.adam_eps", c.adam_eps);
    c.batch_size = static_cast<int>(kv.get_int("train.batch_size", c.batch_size));
    c.iterations = kv.get_int("train.iterations", c.iterations);
    c.weights.adv = kv.get_double("train.lambda_adv", c.weights.adv);
    c.weights.x_cyc = kv.get_double("train.lambda_x_cyc", c.weights.x_cyc);
    c.weights.c_cyc = kv.get_double("train.lambda_c_cyc", c.weights.c_cyc);
    c.weights.s_cyc = kv.get_double("train.lambda_s_cyc", c.weights.s_cyc);
    c.weights.rec = kv.get_double("train.lambda_rec", c.weights.rec);
    c.weights.seg = kv.get_double("train.lambda_seg", c.weights.seg);
    c.mask_mode = MaskSpec::parse(kv.get_string("train.mask_mode", "uniform-k"));
    c.multi_sample = kv.get_bool("train.multi_sample", c.multi_sample);
    c.seg_mode = parse_seg_mode(kv.get_string("train.seg_mode", "off"));
    c.seed = static_cast<uint64_t>(kv.get_int("train.seed", 1));
    c.checkpoint_every = kv.get_int("train.checkpoint_every", 0);
    c.validate();
    return c;
  }
};

// Standard bias-corrected Adam on one parameter tensor.
template <typename T>
void adam_step(Tensor4<T>& param, const Tensor4<T>& grad, Tensor4<T>& m, Tensor4<T>& v,
               int64_t t, const TrainConfig& cfg) {
  check_same_shape(param, grad, "adam_step");
  check_same_shape(param, m, "adam_step moments");
  check_same_shape(param, v, "adam_step moments");
  if (t < 1) throw std::invalid_argument("adam_step: step counter must be >= 1");
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T lr = static_cast<T>(cfg.lr);
  const T eps = static_cast<T>(cfg.adam_eps);
  const T bc1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
  const T bc2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
  for (size_t i = 0; i < param.size(); ++i) {
    m.data[i] = b1 * m.data[i] + (T(1) - b1) * grad.data[i];
    v.data[i] = b2 * v.data[i] + (T(1) - b2) * grad.data[i] * grad.data[i];
    const T mhat = m.data[i] / bc1;
    const T vhat = v.data[i] / bc2;
    param.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

struct LossRecord {
  int64_t iteration = 0;
  std::vector<double> d_loss;  // per-domain discriminator objective
  std::vector<double> adv_g;   // per-domain generator-side adversarial term
  std::vector<double> x_cyc;   // per-domain image consistency (0 when masked)
  std::vector<double> s_cyc;   // per-domain style consistency
  std::vector<double> rec;     // per-domain reconstruction
  double c_cyc = 0.0;
  std::optional<double> seg;
  std::vector<double> x_cyc_cross;  // multi-sample swap reconstructions, 2 per shared domain
  double total_d = 0.0;
  double total_g = 0.0;
  double wall_ms = 0.0;

  bool finite() const {
    auto ok = [](double v) { return std::isfinite(v); };
    for (const auto* vec : {&d_loss, &adv_g, &x_cyc, &s_cyc, &rec, &x_cyc_cross})
      for (double v : *vec)
        if (!ok(v)) return false;
    if (seg && !ok(*seg)) return false;
    return ok(c_cyc) && ok(total_d) && ok(total_g);
  }

  std::string to_log_line() const {
    std::ostringstream os;
    os.precision(6);
    os << "iter=" << iteration;
    auto dump = [&os](const char* key, const std::vector<double>& vs) {
      for (size_t i = 0; i < vs.size(); ++i) os << " " << key << i << "=" << vs[i];
    };
    dump("d", d_loss);
    dump("adv", adv_g);
    dump("xcyc", x_cyc);
    dump("scyc", s_cyc);
    dump("rec", rec);
    os << " ccyc=" << c_cyc;
    if (seg) os << " seg=" << *seg;
    dump("xswap", x_cyc_cross);
    os << " total_d=" << total_d << " total_g=" << total_g << " wall_ms=" << wall_ms;
    return os.str();
  }

  std::string breakdown() const { return to_log_line(); }
};

template <typename T>
class Trainer {
 public:
  Trainer(Model<T>& model, TrainConfig cfg)
      : model_(model), cfg_(std::move(cfg)), rng_(cfg_.seed) {
    cfg_.validate();
    const ModelConfig& mc = model_.config();
    if (cfg_.seg_mode != SegMode::off) {
      if (mc.num_classes < 1)
        throw std::invalid_argument("Trainer: seg mode requires a model with a segmentation head");
      if (cfg_.seg_mode == SegMode::joint && !mc.shared_seg_encoder)
        throw std::invalid_argument("Trainer: joint seg mode needs the shared content encoder");
      if (cfg_.seg_mode == SegMode::separate && mc.shared_seg_encoder)
        throw std::invalid_argument("Trainer: separate seg mode needs its own content encoder");
    }
  }

  const TrainConfig& config() const { return cfg_; }
  int64_t iteration() const { return iter_; }
  Model<T>& model() { return model_; }

  // One full iteration on samples drawn from the pool. Draw order per batch
  // item: sample index (+ partner index), visibility mask (+ partner mask).
  LossRecord step(const std::vector<Sample>& pool) {
    if (pool.empty()) throw std::invalid_argument("Trainer: empty training pool");
    std::vector<Item> items;
    for (int b = 0; b < cfg_.batch_size; ++b) {
      Item it;
      it.a = &pool[static_cast<size_t>(rng_.uniform_int(static_cast<int>(pool.size())))];
      if (cfg_.multi_sample)
        it.b = &pool[static_cast<size_t>(rng_.uniform_int(static_cast<int>(pool.size())))];
      it.mask_a = sample_visibility(model_.config().num_domains, cfg_.mask_mode, rng_);
      if (cfg_.multi_sample)
        it.mask_b = sample_visibility(model_.config().num_domains, cfg_.mask_mode, rng_);
      items.push_back(it);
    }
    return iterate(items);
  }

  // Test-level entry points with explicit masking.
  LossRecord train_iteration(const Sample& sample, const VisibilityMask& mask) {
    Item it;
    it.a = &sample;
    it.mask_a = mask;
    return iterate({it});
  }

  LossRecord multi_sample_iteration(const Sample& a, const VisibilityMask& mask_a,
                                    const Sample& b, const VisibilityMask& mask_b) {
    Item it;
    it.a = &a;
    it.mask_a = mask_a;
    it.b = &b;
    it.mask_b = mask_b;
    return iterate({it});
  }

  // The two halves of one iteration, exposed so the parameter-isolation
  // contract (D step leaves E/G untouched and vice versa) stays testable.
  LossRecord discriminator_step(const Sample& sample, const VisibilityMask& mask) {
    Item it;
    it.a = &sample;
    it.mask_a = mask;
    LossRecord rec = blank_record();
    d_step({it}, rec);
    return rec;
  }

  LossRecord generator_step(const Sample& sample, const VisibilityMask& mask) {
    Item it;
    it.a = &sample;
    it.mask_a = mask;
    LossRecord rec = blank_record();
    g_step({it}, rec);
    return rec;
  }

  void save_checkpoint(const std::string& path) {
    BlobWriter blob;
    KvFile kv;
    model_.config().to_kv(kv);
    cfg_.to_kv(kv);
    blob.add_text("config", kv.serialize());
    model_.params().visit([&blob](const std::string& name, Tensor4<T>& t) {
      blob.add_tensor("param/" + name, cast_tensor<float>(t));
    });
    for (auto& [group, state] : opt_) {
      blob.add_text("opt/" + group + "/t", std::to_string(state.t));
      for (size_t i = 0; i < state.m.size(); ++i) {
        blob.add_tensor("opt/" + group + "/" + std::to_string(i) + "/m",
                        cast_tensor<float>(state.m[i]));
        blob.add_tensor("opt/" + group + "/" + std::to_string(i) + "/v",
                        cast_tensor<float>(state.v[i]));
      }
    }
    blob.add_text("iteration", std::to_string(iter_));
    blob.add_text("rng", rng_.state());
    blob.write(path);
  }

  // Restores parameters, optimizer moments, the step counter and the RNG, so
  // a resumed run replays the uninterrupted trajectory bit for bit.
  void load_checkpoint(const std::string& path) {
    BlobReader blob(path);
    const KvFile kv = KvFile::parse_string(blob.text("config"));
    const ModelConfig stored_model = ModelConfig::from_kv(kv);
    if (!(stored_model == model_.config()))
      throw std::runtime_error(path + ": checkpoint model config mismatch");
    model_.load_params(blob);
    opt_.clear();
    for (const auto& name : blob.names()) {
      if (name.rfind("opt/", 0) != 0) continue;
      const size_t slash = name.find('/', 4);
      const std::string group = name.substr(4, slash - 4);
      const std::string rest = name.substr(slash + 1);
      AdamState& st = opt_[group];
      if (rest == "t") {
        st.t = std::stoll(blob.text(name));
      } else {
        const size_t sep = rest.find('/');
        const size_t idx = static_cast<size_t>(std::stoul(rest.substr(0, sep)));
        auto& dst = rest.substr(sep + 1) == "m" ? st.m : st.v;
        if (dst.size() <= idx) dst.resize(idx + 1);
        dst[idx] = cast_tensor<T>(blob.tensor(name));
      }
    }
    iter_ = std::stoll(blob.text("iteration"));
    rng_.set_state(blob.text("rng"));
  }

  struct Item {
    const Sample* a = nullptr;
    VisibilityMask mask_a;
    const Sample* b = nullptr;
    VisibilityMask mask_b;
  };

 private:
  struct AdamState {
    int64_t t = 0;
    std::vector<Tensor4<T>> m, v;
  };

  // Applies Adam to one bound group, treating unreached parameters as having
  // zero gradient. Aborts on non-finite gradients, naming the group.
  void update_group(Tape<T>& tape, BoundGroup<T>& group) {
    AdamState& st = opt_[group.name];
    if (st.m.empty()) {
      for (auto& [var, tensor] : group.entries) {
        const auto& sh = tensor->shape;
        st.m.push_back(Tensor4<T>::zeros(sh[0], sh[1], sh[2], sh[3]));
        st.v.push_back(Tensor4<T>::zeros(sh[0], sh[1], sh[2], sh[3]));
      }
    }
    if (st.m.size() != group.entries.size())
      throw std::runtime_error("Trainer: optimizer state out of sync for group " + group.name);
    ++st.t;
    for (size_t i = 0; i < group.entries.size(); ++i) {
      auto& [var, tensor] = group.entries[i];
      const auto& sh = tensor->shape;
      Tensor4<T> zero_grad;
      const Tensor4<T>* g = nullptr;
      try {
        g = &tape.grad_of(var);
      } catch (const std::runtime_error&) {
        zero_grad = Tensor4<T>::zeros(sh[0], sh[1], sh[2], sh[3]);
        g = &zero_grad;
      }
      if (!g->all_finite())
        throw std::runtime_error("Trainer: non-finite gradient in parameter group '" +
                                 group.name + "' at iteration " + std::to_string(iter_ + 1));
      adam_step(*tensor, *g, st.m[i], st.v[i], st.t, cfg_);
    }
  }

  Tensor4<T> sample_prior_style() {
    Tensor4<T> s(1, model_.config().style_dim, 1, 1);
    for (auto& v : s.data) v = static_cast<T>(rng_.normal());
    return s;
  }

  LossRecord blank_record() const {
    const int n = model_.config().num_domains;
    LossRecord rec;
    rec.iteration = iter_ + 1;
    rec.d_loss.assign(static_cast<size_t>(n), 0.0);
    rec.adv_g.assign(static_cast<size_t>(n), 0.0);
    rec.x_cyc.assign(static_cast<size_t>(n), 0.0);
    rec.s_cyc.assign(static_cast<size_t>(n), 0.0);
    rec.rec.assign(static_cast<size_t>(n), 0.0);
    return rec;
  }

  LossRecord iterate(const std::vector<Item>& items) {
    const auto t_start = std::chrono::steady_clock::now();
    LossRecord rec = blank_record();
    d_step(items, rec);
    g_step(items, rec);
    ++iter_;
    rec.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t_start)
                      .count();
    return rec;
  }

  void d_step(const std::vector<Item>& items, LossRecord& rec) {
    const int n = model_.config().num_domains;
    const double inv_b = 1.0 / static_cast<double>(items.size());
    // Fake images are produced without recording gradients (detached), then a
    // fresh graph scores real vs fake per domain.
    {
      Tape<T> tape;
      std::vector<BoundGroup<T>> d_groups;
      std::vector<DiscriminatorV<T>> d_vars;
      for (int d = 0; d < n; ++d) {
        d_groups.push_back(BoundGroup<T>{"disc" + std::to_string(d), {}});
        d_vars.push_back(model_.bind_discriminator(tape, d, true, &d_groups.back()));
      }
      std::vector<Var<T>> per_domain_losses;
      std::vector<T> per_domain_weights;
      for (const Item& it : items) {
        // Detached generation pass.
        Tape<T> fwd;
        auto enc = model_.bind_content_encoder(fwd, model_.params().content, false);
        auto content = model_.content_forward(fwd, enc,
                                              fwd.leaf(model_.pack_input(*it.a, it.mask_a.flags)));
        std::vector<Tensor4<T>> fakes;
        for (int d = 0; d < n; ++d) {
          auto gv = model_.bind_generator(fwd, d, false);
          auto mv = model_.bind_mlp(fwd, d, false);
          Var<T> style = fwd.leaf(sample_prior_style());
          fakes.push_back(model_.generate_forward(fwd, gv, mv, content.content, style).value());
        }
        for (int d = 0; d < n; ++d) {
          auto real_maps = model_.discriminate_forward(
              tape, d_vars[static_cast<size_t>(d)],
              tape.leaf(model_.to_signed(it.a->images[static_cast<size_t>(d)])));
          auto fake_maps = model_.discriminate_forward(
              tape, d_vars[static_cast<size_t>(d)], tape.leaf(fakes[static_cast<size_t>(d)]));
          Var<T> dl = adversarial_loss_d(real_maps, fake_maps);
          rec.d_loss[static_cast<size_t>(d)] += static_cast<double>(dl.value().data[0]) * inv_b;
          per_domain_losses.push_back(dl);
          per_domain_weights.push_back(static_cast<T>(cfg_.weights.adv * inv_b));
        }
      }
      Var<T> total_d = weighted_sum(per_domain_losses, per_domain_weights);
      rec.total_d = static_cast<double>(total_d.value().data[0]);
      if (!std::isfinite(rec.total_d))
        throw std::runtime_error("Trainer: non-finite discriminator loss; breakdown: " +
                                 rec.breakdown());
      tape.backward(total_d);
      for (auto& g : d_groups) update_group(tape, g);
    }
  }

  void g_step(const std::vector<Item>& items, LossRecord& rec) {
    const int n = model_.config().num_domains;
    const double inv_b = 1.0 / static_cast<double>(items.size());
    {
      Tape<T> tape;
      BoundGroup<T> content_group{"content", {}};
      auto enc = model_.bind_content_encoder(tape, model_.params().content, true, &content_group);
      std::vector<BoundGroup<T>> style_groups, gen_groups;
      std::vector<StyleEncoderV<T>> style_vars;
      std::vector<GeneratorV<T>> gen_vars;
      std::vector<MlpV<T>> mlp_vars;
      std::vector<DiscriminatorV<T>> disc_vars;
      for (int d = 0; d < n; ++d) {
        style_groups.push_back(BoundGroup<T>{"style" + std::to_string(d), {}});
        style_vars.push_back(model_.bind_style_encoder(tape, d, true, &style_groups.back()));
        gen_groups.push_back(BoundGroup<T>{"gen" + std::to_string(d), {}});
        gen_vars.push_back(model_.bind_generator(tape, d, true, &gen_groups.back()));
        mlp_vars.push_back(model_.bind_mlp(tape, d, true, &gen_groups.back()));
        disc_vars.push_back(model_.bind_discriminator(tape, d, false));
      }
      BoundGroup<T> seg_group{"seg", {}};
      std::optional<SegmentorV<T>> seg_vars;
      if (cfg_.seg_mode != SegMode::off)
        seg_vars = model_.bind_segmentor(tape, true, &seg_group);

      TotalLossTerms<Var<T>> terms;
      std::vector<Var<T>> c_cyc_list, seg_list, swap_terms;
      std::vector<T> swap_weights;

      for (const Item& it : items) {
        const Sample& a = *it.a;
        std::vector<Var<T>> reals;
        for (int d = 0; d < n; ++d)
          reals.push_back(tape.leaf(model_.to_signed(a.images[static_cast<size_t>(d)])));

        auto content = model_.content_forward(tape, enc,
                                              tape.leaf(model_.pack_input(a, it.mask_a.flags)));

        // Eq. 1 over visible domains: reconstruct from encoded styles.
        for (int d = 0; d < n; ++d) {
          if (!it.mask_a.flags[static_cast<size_t>(d)]) continue;
          Var<T> style = model_.style_forward(tape, style_vars[static_cast<size_t>(d)],
                                              reals[static_cast<size_t>(d)]);
          Var<T> recon = model_.generate_forward(tape, gen_vars[static_cast<size_t>(d)],
                                                 mlp_vars[static_cast<size_t>(d)],
                                                 content.content, style);
          Var<T> l = image_consistency_loss(recon, reals[static_cast<size_t>(d)]);
          rec.x_cyc[static_cast<size_t>(d)] += static_cast<double>(l.value().data[0]) * inv_b;
          terms.x_cyc.push_back(l);
        }

        // Prior-style generation for Eqs. 2-5 and the completed sample.
        std::vector<Var<T>> gen_imgs, prior_styles;
        for (int d = 0; d < n; ++d) {
          Var<T> style = tape.leaf(sample_prior_style());
          prior_styles.push_back(style);
          gen_imgs.push_back(model_.generate_forward(tape, gen_vars[static_cast<size_t>(d)],
                                                     mlp_vars[static_cast<size_t>(d)],
                                                     content.content, style));
        }
        for (int d = 0; d < n; ++d) {
          Var<T> rl = reconstruction_loss(gen_imgs[static_cast<size_t>(d)],
                                          reals[static_cast<size_t>(d)]);
          rec.rec[static_cast<size_t>(d)] += static_cast<double>(rl.value().data[0]) * inv_b;
          terms.rec.push_back(rl);

          auto fake_maps = model_.discriminate_forward(tape, disc_vars[static_cast<size_t>(d)],
                                                       gen_imgs[static_cast<size_t>(d)]);
          Var<T> ag = adversarial_loss_g(fake_maps);
          rec.adv_g[static_cast<size_t>(d)] += static_cast<double>(ag.value().data[0]) * inv_b;
          terms.adv.push_back(ag);
        }

        // Eq. 2: re-encode the full set of generated images.
        auto re_enc = model_.content_forward(tape, enc, concat_channels(gen_imgs));
        Var<T> cl = content_consistency_loss(re_enc.content, content.content);
        rec.c_cyc += static_cast<double>(cl.value().data[0]) * inv_b;
        c_cyc_list.push_back(cl);

        // Eq. 3: re-encode styles of the generated images.
        for (int d = 0; d < n; ++d) {
          Var<T> s2 = model_.style_forward(tape, style_vars[static_cast<size_t>(d)],
                                           gen_imgs[static_cast<size_t>(d)]);
          Var<T> sl = style_consistency_loss(s2, prior_styles[static_cast<size_t>(d)]);
          rec.s_cyc[static_cast<size_t>(d)] += static_cast<double>(sl.value().data[0]) * inv_b;
          terms.s_cyc.push_back(sl);
        }

        // Eq. 6 on the configured content source.
        if (cfg_.seg_mode != SegMode::off) {
          if (!a.seg_mask)
            throw std::invalid_argument("Trainer: seg mode enabled but sample '" + a.id +
                                        "' carries no mask");
          Var<T> probs;
          if (model_.config().seg_from_completed) {
            // Completed sample: real where visible, generated where missing.
            std::vector<Var<T>> channels;
            for (int d = 0; d < n; ++d) {
              Var<T> ch = it.mask_a.flags[static_cast<size_t>(d)]
                              ? reals[static_cast<size_t>(d)]
                              : gen_imgs[static_cast<size_t>(d)];
              // The separate-encoder variant trains the segmentation path in
              // isolation, so generated inputs are detached there.
              if (cfg_.seg_mode == SegMode::separate &&
                  !it.mask_a.flags[static_cast<size_t>(d)])
                ch = tape.leaf(ch.value());
              channels.push_back(ch);
            }
            Var<T> completed = concat_channels(channels);
            ContentForwardResult<T> seg_enc =
                seg_vars->encoder ? model_.content_forward(tape, *seg_vars->encoder, completed)
                                  : model_.content_forward(tape, enc, completed);
            probs = model_.segment_forward(tape, *seg_vars, seg_enc.content,
                                           seg_enc.skip_full, seg_enc.skip_half);
          } else if (seg_vars->encoder) {
            auto seg_enc = model_.content_forward(
                tape, *seg_vars->encoder, tape.leaf(model_.pack_input(a, it.mask_a.flags)));
            probs = model_.segment_forward(tape, *seg_vars, seg_enc.content, seg_enc.skip_full,
                                           seg_enc.skip_half);
          } else {
            probs = model_.segment_forward(tape, *seg_vars, content.content, content.skip_full,
                                           content.skip_half);
          }
          Var<T> target = tape.leaf(onehot_target(*a.seg_mask));
          Var<T> dl = dice_loss(probs, target);
          if (!rec.seg) rec.seg = 0.0;
          *rec.seg += static_cast<double>(dl.value().data[0]) * inv_b;
          seg_list.push_back(dl);
        }

        // Multi-sample style swap: reconstruct each sample from its own
        // content and the partner's encoded style, for domains visible in
        // both. Adds swap reconstruction and swap style-consistency terms.
        if (it.b != nullptr) {
          const Sample& b = *it.b;
          auto content_b = model_.content_forward(
              tape, enc, tape.leaf(model_.pack_input(b, it.mask_b.flags)));
          for (int d = 0; d < n; ++d) {
            if (!it.mask_a.flags[static_cast<size_t>(d)] ||
                !it.mask_b.flags[static_cast<size_t>(d)])
              continue;
            Var<T> real_b = tape.leaf(model_.to_signed(b.images[static_cast<size_t>(d)]));
            Var<T> style_a = model_.style_forward(tape, style_vars[static_cast<size_t>(d)],
                                                  reals[static_cast<size_t>(d)]);
            Var<T> style_b =
                model_.style_forward(tape, style_vars[static_cast<size_t>(d)], real_b);

            Var<T> cross_a = model_.generate_forward(tape, gen_vars[static_cast<size_t>(d)],
                                                     mlp_vars[static_cast<size_t>(d)],
                                                     content.content, style_b);
            Var<T> cross_b = model_.generate_forward(tape, gen_vars[static_cast<size_t>(d)],
                                                     mlp_vars[static_cast<size_t>(d)],
                                                     content_b.content, style_a);
            Var<T> la = image_consistency_loss(cross_a, reals[static_cast<size_t>(d)]);
            Var<T> lb = image_consistency_loss(cross_b, real_b);
            rec.x_cyc_cross.push_back(static_cast<double>(la.value().data[0]));
            rec.x_cyc_cross.push_back(static_cast<double>(lb.value().data[0]));
            swap_terms.push_back(la);
            swap_terms.push_back(lb);
            swap_weights.push_back(static_cast<T>(cfg_.weights.x_cyc * inv_b));
            swap_weights.push_back(static_cast<T>(cfg_.weights.x_cyc * inv_b));

            Var<T> re_a = model_.style_forward(tape, style_vars[static_cast<size_t>(d)], cross_a);
            Var<T> re_b = model_.style_forward(tape, style_vars[static_cast<size_t>(d)], cross_b);
            swap_terms.push_back(style_consistency_loss(re_a, style_b));
            swap_terms.push_back(style_consistency_loss(re_b, style_a));
            swap_weights.push_back(static_cast<T>(cfg_.weights.s_cyc * inv_b));
            swap_weights.push_back(static_cast<T>(cfg_.weights.s_cyc * inv_b));
          }
        }
      }

      terms.c_cyc = mean_of(c_cyc_list);
      if (!seg_list.empty()) terms.seg = mean_of(seg_list);
      Var<T> total = total_loss(terms, batch_scaled_weights(inv_b), !seg_list.empty());
      if (!swap_terms.empty()) {
        std::vector<Var<T>> with_swap = swap_terms;
        std::vector<T> w = swap_weights;
        with_swap.push_back(total);
        w.push_back(T(1));
        total = weighted_sum(with_swap, w);
      }
      rec.total_g = static_cast<double>(total.value().data[0]);
      if (!rec.finite() || !std::isfinite(rec.total_g))
        throw std::runtime_error("Trainer: non-finite generator objective; breakdown: " +
                                 rec.breakdown());
      tape.backward(total);

      update_group(tape, content_group);
      for (auto& g : style_groups) update_group(tape, g);
      for (auto& g : gen_groups) update_group(tape, g);
      if (cfg_.seg_mode != SegMode::off) update_group(tape, seg_group);
    }
  }

  LossWeights batch_scaled_weights(double inv_b) const {
    LossWeights w = cfg_.weights;
    w.adv *= inv_b;
    w.x_cyc *= inv_b;
    w.s_cyc *= inv_b;
    w.rec *= inv_b;
    // c_cyc and seg terms are already batch means (mean_of above).
    return w;
  }

  Tensor4<T> onehot_target(const Tensor4i& mask) const {
    const int classes = std::max(model_.config().num_classes, 1);
    Tensor4<T> out(1, classes, mask.height(), mask.width());
    for (int y = 0; y < mask.height(); ++y)
      for (int x = 0; x < mask.width(); ++x) {
        const int32_t l = mask(0, 0, y, x);
        if (l < 0 || l >= std::max(classes, 2))
          throw std::invalid_argument("Trainer: mask label " + std::to_string(l) +
                                      " outside {0.." + std::to_string(classes - 1) + "}");
        if (classes == 1) {
          out(0, 0, y, x) = static_cast<T>(l);  // binary sigmoid mode
        } else {
          out(0, l, y, x) = T(1);
        }
      }
    return out;
  }

  Model<T>& model_;
  TrainConfig cfg_;
  Rng rng_;
  int64_t iter_ = 0;
  std::map<std::string, AdamState> opt_;
};

}  // namespace remic

#endif
