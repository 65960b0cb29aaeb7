#include <cmath>
#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "remic/losses.hpp"
#include "remic/model.hpp"
#include "test_util.hpp"

using namespace remic;
using namespace remic::testutil;

namespace {

ModelConfig desk_config() { return ModelConfig{}; }

Sample random_sample(int n, int size, uint64_t seed, int num_classes = 0) {
  Rng rng(seed);
  Sample s;
  s.id = "t" + std::to_string(seed);
  s.visibility.assign(static_cast<size_t>(n), 1);
  for (int d = 0; d < n; ++d) s.images.push_back(random_tensor_f(1, 1, size, size, rng));
  if (num_classes >= 2) {
    Tensor4i m(1, 1, size, size);
    for (auto& v : m.data) v = rng.uniform_int(num_classes);
    s.seg_mask = m;
  }
  return s;
}

}  // namespace

TEST_CASE("content code shape contracts") {
  SUBCASE("desk configuration") {
    Model<float> m(desk_config());
    Sample s = random_sample(3, 32, 41);
    auto enc = m.encode_content(s);
    CHECK(enc.code.features.shape == std::array<int, 4>{1, 64, 8, 8});
    CHECK(enc.skip_full.shape == std::array<int, 4>{1, 16, 32, 32});
    CHECK(enc.skip_half.shape == std::array<int, 4>{1, 32, 16, 16});
  }
  SUBCASE("full configuration, 256x256") {
    ModelConfig cfg;
    cfg.num_domains = 4;
    cfg.image_size = 256;
    cfg.content_channels = 256;
    cfg.num_res_blocks = 4;
    cfg.num_disc_scales = 3;
    Model<float> m(cfg);
    Sample s = random_sample(4, 256, 42);
    auto enc = m.encode_content(s);
    CHECK(enc.code.features.shape == std::array<int, 4>{1, 256, 64, 64});

    // Multi-scale score maps: 4 stride-2 convs per scale.
    auto maps = m.discriminate(s.images[0], 0);
    REQUIRE(maps.size() == 3);
    CHECK(maps[0].shape == std::array<int, 4>{1, 1, 16, 16});
    CHECK(maps[1].shape == std::array<int, 4>{1, 1, 8, 8});
    CHECK(maps[2].shape == std::array<int, 4>{1, 1, 4, 4});

    // Determinism of scoring.
    auto maps2 = m.discriminate(s.images[0], 0);
    for (size_t i = 0; i < maps.size(); ++i)
      CHECK(maps[i].data == maps2[i].data);

    // 64x64 is the smallest size all three scales accept.
    Sample small = random_sample(4, 64, 43);
    CHECK(m.discriminate(small.images[0], 0).size() == 3);
    Sample too_small = random_sample(4, 32, 44);
    CHECK_THROWS_AS(m.discriminate(too_small.images[0], 0), std::invalid_argument);
  }
}

TEST_CASE("zero-filled missing domains are indistinguishable from zero images") {
  Model<float> m(desk_config());
  Sample s = random_sample(3, 32, 45);
  s.images[0] = Tensor4f::zeros(1, 1, 32, 32);

  std::vector<uint8_t> only_zero_visible{1, 0, 0};
  Tensor4f packed = m.pack_input(s, only_zero_visible);
  for (float v : packed.data) CHECK(v == -1.0f);

  // Same packed input, same code.
  Sample s2 = s;
  s2.visibility = only_zero_visible;
  auto a = m.encode_content(s2);
  s2.images[1] = random_sample(3, 32, 46).images[1];  // hidden channel may differ freely
  auto b = m.encode_content(s2);
  CHECK(a.code.features.data == b.code.features.data);
}

TEST_CASE("content encoder rejects sizes not divisible by 4") {
  Model<float> m(desk_config());
  Sample s = random_sample(3, 30, 47);
  CHECK_THROWS_AS(m.encode_content(s), std::invalid_argument);
}

TEST_CASE("style codes are 8-dim, finite, and informative") {
  Model<float> m(desk_config());
  Rng rng(48);
  double total_dist = 0.0;
  for (int pair = 0; pair < 100; ++pair) {
    Tensor4f a = random_tensor_f(1, 1, 32, 32, rng);
    Tensor4f b = random_tensor_f(1, 1, 32, 32, rng);
    auto sa = m.encode_style(a, 0);
    auto sb = m.encode_style(b, 0);
    REQUIRE(sa.v.size() == 8);
    double d = 0;
    for (size_t i = 0; i < sa.v.size(); ++i) d += std::abs(sa.v[i] - sb.v[i]);
    total_dist += d;
  }
  CHECK(total_dist / 100.0 > 0.0);

  auto zero_code = m.encode_style(Tensor4f::zeros(1, 1, 32, 32), 1);
  for (float v : zero_code.v) CHECK(std::isfinite(v));
  auto zero_code2 = m.encode_style(Tensor4f::zeros(1, 1, 32, 32), 1);
  CHECK(zero_code.v == zero_code2.v);

  CHECK_THROWS_AS(m.encode_style(Tensor4f::zeros(1, 1, 32, 32), 3), std::invalid_argument);
}

TEST_CASE("generation output contract") {
  Model<float> m(desk_config());
  Sample s = random_sample(3, 32, 49);
  auto enc = m.encode_content(s);

  StyleCode<float> style;
  style.v.assign(8, 0.5f);
  Tensor4f img = m.generate(enc.code, style, 0);
  CHECK(img.shape == std::array<int, 4>{1, 1, 32, 32});
  CHECK(img.all_finite());
  for (float v : img.data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }

  StyleCode<float> other;
  other.v.assign(8, -1.0f);
  Tensor4f img2 = m.generate(enc.code, other, 0);
  double gap = 0;
  for (size_t i = 0; i < img.size(); ++i) gap += std::abs(img.data[i] - img2.data[i]);
  CHECK(gap > 0.0);

  StyleCode<float> bad;
  bad.v.assign(4, 0.5f);
  CHECK_THROWS_AS(m.generate(enc.code, bad, 0), std::invalid_argument);
}

TEST_CASE("zeroed style MLP degenerates AdaIN to plain instance norm") {
  Model<float> m(desk_config());
  // Zero the last MLP layer of domain 0: every AdaIN gets gamma=1, beta=0.
  auto& fc3 = m.params().mlps[0].fc3;
  std::fill(fc3.w.data.begin(), fc3.w.data.end(), 0.0f);
  std::fill(fc3.b.data.begin(), fc3.b.data.end(), 0.0f);

  Sample s = random_sample(3, 32, 50);
  auto enc = m.encode_content(s);
  StyleCode<float> s1, s2;
  s1.v.assign(8, 0.9f);
  s2.v.assign(8, -0.3f);
  Tensor4f a = m.generate(enc.code, s1, 0);
  Tensor4f b = m.generate(enc.code, s2, 0);
  CHECK(a.all_finite());
  CHECK(a.data == b.data);  // style can no longer influence the output
}

TEST_CASE("segmentation probabilities are normalized") {
  ModelConfig cfg = desk_config();
  cfg.num_classes = 3;
  Model<float> m(cfg);
  Sample s = random_sample(3, 32, 51, 3);
  Tensor4f probs = m.segment_probs(s);
  CHECK(probs.shape == std::array<int, 4>{1, 3, 32, 32});
  double min_sum = 2, max_sum = 0, entropy = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      double sum = 0, h = 0;
      for (int c = 0; c < 3; ++c) {
        const double p = probs(0, c, y, x);
        sum += p;
        if (p > 0) h -= p * std::log(p);
      }
      min_sum = std::min(min_sum, sum);
      max_sum = std::max(max_sum, sum);
      entropy += h;
    }
  CHECK(std::abs(min_sum - 1.0) < 1e-6);
  CHECK(std::abs(max_sum - 1.0) < 1e-6);
  // Untrained head stays close to uniform on average.
  CHECK(entropy / (32.0 * 32.0) > 0.5 * std::log(3.0));
}

TEST_CASE("binary segmentation uses a sigmoid map") {
  ModelConfig cfg = desk_config();
  cfg.num_classes = 1;
  Model<float> m(cfg);
  Sample s = random_sample(3, 32, 52);
  Tensor4f probs = m.segment_probs(s);
  CHECK(probs.shape == std::array<int, 4>{1, 1, 32, 32});
  for (float v : probs.data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("complete_missing covers every policy") {
  ModelConfig cfg = desk_config();
  cfg.num_domains = 4;
  Model<float> m(cfg);
  Sample s = random_sample(4, 32, 53);
  s.visibility = {0, 1, 0, 0};  // 1-to-n completion

  auto completed = m.complete_missing(s, StylePolicy::fixed(0.5));
  REQUIRE(completed.size() == 4);
  for (const auto& img : completed)
    CHECK(img.shape == std::array<int, 4>{1, 1, 32, 32});

  auto completed2 = m.complete_missing(s, StylePolicy::fixed(0.5));
  for (int d = 0; d < 4; ++d) CHECK(completed[d].data == completed2[d].data);

  CHECK_THROWS_AS(m.complete_missing(s, StylePolicy::encoded()), std::invalid_argument);

  Sample all = random_sample(4, 32, 54);
  auto recon = m.complete_missing(all, StylePolicy::encoded());
  CHECK(recon.size() == 4);

  auto sampled = m.complete_missing(s, StylePolicy::sampled(9));
  auto sampled2 = m.complete_missing(s, StylePolicy::sampled(9));
  for (int d = 0; d < 4; ++d) CHECK(sampled[d].data == sampled2[d].data);
}

TEST_CASE("parameter count of the default desk configuration is pinned") {
  Model<float> m(desk_config());
  CHECK(m.params().parameter_count() == 2466510);
}

TEST_CASE("checkpoint round trip is bit exact and config checked") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "remic_model_test";
  fs::create_directories(dir);
  const std::string path = (dir / "model.ckpt").string();

  Model<float> m(desk_config());
  BlobWriter blob;
  m.save_params(blob);
  blob.write(path);

  BlobReader reader(path);
  Model<float> loaded = Model<float>::from_checkpoint(reader);
  bool equal = true;
  loaded.params().visit([&](const std::string& name, Tensor4f& t) {
    Tensor4f* other = nullptr;
    m.params().visit([&](const std::string& n2, Tensor4f& t2) {
      if (n2 == name) other = &t2;
    });
    REQUIRE(other != nullptr);
    equal = equal && (t.data == other->data);
  });
  CHECK(equal);

  ModelConfig other_cfg = desk_config();
  other_cfg.content_channels = 32;
  Model<float> wrong(other_cfg);
  CHECK_THROWS_AS(wrong.load_params(reader), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("end-to-end gradients of the generation path match finite differences") {
  ModelConfig cfg;
  cfg.num_domains = 2;
  cfg.image_size = 16;
  cfg.content_channels = 8;
  cfg.num_res_blocks = 1;
  cfg.num_disc_scales = 1;
  cfg.mlp_hidden = 8;
  Model<double> model(cfg);
  Sample s = random_sample(2, 16, 55);

  // Scalar objective touching content encoder, style encoder, MLP, generator.
  auto run = [&](Tape<double>& t) {
    BoundGroup<double> all;
    auto enc = model.bind_content_encoder(t, model.params().content, true, &all);
    auto sty = model.bind_style_encoder(t, 0, true, &all);
    auto gen = model.bind_generator(t, 0, true, &all);
    auto mlp = model.bind_mlp(t, 0, true, &all);
    Var<double> packed = t.leaf(model.pack_input(s, s.visibility));
    auto c = model.content_forward(t, enc, packed);
    Var<double> style = model.style_forward(t, sty, t.leaf(model.to_signed(s.images[0])));
    Var<double> fake = model.generate_forward(t, gen, mlp, c.content, style);
    Var<double> real = t.leaf(model.to_signed(s.images[0]));
    Var<double> loss = l1_mean(fake, real);
    return std::make_pair(loss, all);
  };

  Tape<double> tape;
  auto [loss, bound] = run(tape);
  tape.backward(loss);

  // Every parameter gradient must exist and be finite.
  size_t checked = 0;
  for (auto& [var, tensor] : bound.entries) {
    const Tensor4d& g = var.grad();
    CHECK(g.all_finite());
    checked += g.size();
  }
  CHECK(checked == model.params().parameter_count() -
                       [&] {
                         // style1/gen1/mlp1/disc* params were not bound
                         size_t rest = 0;
                         model.params().styles[1].visit("s", [&](const std::string&, Tensor4d& t) { rest += t.size(); });
                         model.params().gens[1].visit("g", [&](const std::string&, Tensor4d& t) { rest += t.size(); });
                         model.params().mlps[1].visit("m", [&](const std::string&, Tensor4d& t) { rest += t.size(); });
                         for (auto& d : model.params().discs)
                           d.visit("d", [&](const std::string&, Tensor4d& t) { rest += t.size(); });
                         return rest;
                       }());

  // Finite-difference spot checks across parameter groups.
  Rng pick(56);
  const double h = 1e-4;
  int spots = 0;
  for (size_t gi = 0; gi < bound.entries.size(); gi += 2) {
    auto& [var, tensor] = bound.entries[gi];
    const size_t j = static_cast<size_t>(pick.uniform_int(static_cast<int>(tensor->size())));
    const double analytic = var.grad().data[j];
    const double orig = tensor->data[j];
    tensor->data[j] = orig + h;
    Tape<double> tp;
    const double fp = run(tp).first.value().data[0];
    tensor->data[j] = orig - h;
    Tape<double> tm;
    const double fm = run(tm).first.value().data[0];
    tensor->data[j] = orig;
    const double fd = (fp - fm) / (2 * h);
    const double rel = std::abs(fd - analytic) / std::max({1.0, std::abs(fd), std::abs(analytic)});
    CHECK(rel < 1e-3);
    ++spots;
  }
  CHECK(spots >= 15);
}

TEST_CASE("discriminator and segmentation paths differentiate") {
  ModelConfig cfg;
  cfg.num_domains = 2;
  cfg.image_size = 16;
  cfg.content_channels = 8;
  cfg.num_res_blocks = 1;
  cfg.num_disc_scales = 1;
  cfg.mlp_hidden = 8;
  cfg.num_classes = 2;
  Model<double> model(cfg);
  Sample s = random_sample(2, 16, 57, 2);

  Tape<double> t;
  BoundGroup<double> dg, sg;
  auto disc = model.bind_discriminator(t, 0, true, &dg);
  auto segv = model.bind_segmentor(t, true, &sg);
  auto encv = model.bind_content_encoder(t, model.params().content, true, &sg);

  auto maps = model.discriminate_forward(t, disc, t.leaf(model.to_signed(s.images[0])));
  Var<double> d_loss = adversarial_loss_d<double>(
      {maps}, {t.leaf(Tensor4d::zeros(1, 1, maps[0].value().height(), maps[0].value().width()))});

  auto enc = model.content_forward(t, encv, t.leaf(model.pack_input(s, s.visibility)));
  Var<double> probs = model.segment_forward(t, segv, enc.content, enc.skip_full, enc.skip_half);
  Tensor4d onehot(1, 2, 16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      const int l = (*s.seg_mask)(0, 0, y, x);
      onehot(0, l, y, x) = 1.0;
    }
  Var<double> seg_l = dice_loss(probs, t.leaf(onehot));
  Var<double> total = weighted_sum<double>({d_loss, seg_l}, {1.0, 1.0});
  t.backward(total);

  for (auto& [var, tensor] : dg.entries) CHECK(var.grad().all_finite());
  for (auto& [var, tensor] : sg.entries) CHECK(var.grad().all_finite());
}
