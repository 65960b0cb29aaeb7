#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "remic/eval.hpp"
#include "test_util.hpp"

using namespace remic;
using namespace remic::testutil;
namespace fs = std::filesystem;

namespace {

std::vector<Sample> synth_samples(int count, int n = 3, int size = 32, uint64_t seed = 7,
                                  int classes = 2, int offset = 0) {
  SynthConfig c;
  c.num_domains = n;
  c.image_size = size;
  c.num_train = count + offset;
  c.num_test = 1;
  c.num_classes = classes;
  c.seed = seed;
  std::vector<Sample> out;
  for (int i = 0; i < count; ++i) out.push_back(generate_synthetic_sample(c, offset + i));
  return out;
}

}  // namespace

TEST_CASE("image metrics on identical inputs") {
  Rng rng(70);
  Tensor4f a = random_tensor_f(1, 1, 16, 16, rng);
  CHECK(mae(a, a) == 0.0);
  CHECK(nrmse(a, a) == 0.0);
  CHECK(psnr(a, a, 1.0) == 100.0);
  CHECK(ssim(a, a, 1.0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("PSNR of a uniform 0.1 offset is 20 dB") {
  Rng rng(71);
  Tensor4f b = random_tensor_f(1, 1, 16, 16, rng, 0.0, 0.8);
  Tensor4f a = b;
  for (auto& v : a.data) v += 0.1f;
  CHECK(psnr(a, b, 1.0) == doctest::Approx(20.0).epsilon(0.00005));
  // MSE is symmetric, so PSNR with a shared range is too.
  CHECK(psnr(a, b, 1.0) == doctest::Approx(psnr(b, a, 1.0)));
  CHECK(mae(a, b) == doctest::Approx(mae(b, a)));
}

TEST_CASE("SSIM of two constant images matches the closed form") {
  Tensor4f a = Tensor4f::full(1, 1, 16, 16, 0.2f);
  Tensor4f b = Tensor4f::full(1, 1, 16, 16, 0.6f);
  // Evaluate the closed form at the actual stored (float-quantized) values.
  const double mu1 = static_cast<double>(0.2f), mu2 = static_cast<double>(0.6f);
  const double c1 = 0.01 * 0.01;
  const double closed = (2 * mu1 * mu2 + c1) / (mu1 * mu1 + mu2 * mu2 + c1);
  CHECK(std::abs(ssim(a, b, 1.0) - closed) < 1e-9);
}

TEST_CASE("SSIM stays in range and detects differences") {
  Rng rng(72);
  for (int i = 0; i < 5; ++i) {
    Tensor4f a = random_tensor_f(1, 1, 16, 16, rng);
    Tensor4f b = random_tensor_f(1, 1, 16, 16, rng);
    const double v = ssim(a, b, 1.0);
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
    CHECK(v < 1.0 - 1e-9);
  }
  Tensor4f small = Tensor4f::zeros(1, 1, 8, 8);
  CHECK_THROWS_AS(ssim(small, small, 1.0), std::invalid_argument);
}

TEST_CASE("NRMSE rejects an all-zero ground truth") {
  Tensor4f a = Tensor4f::full(1, 1, 16, 16, 0.3f);
  Tensor4f z = Tensor4f::zeros(1, 1, 16, 16);
  CHECK_THROWS_WITH_AS(nrmse(a, z), doctest::Contains("undefined"), std::invalid_argument);
}

TEST_CASE("dice score hand counts") {
  Tensor4i a(1, 1, 2, 4), b(1, 1, 2, 4);
  // pred has 4 foreground pixels, target 2, overlap 2.
  a.data = {1, 1, 1, 1, 0, 0, 0, 0};
  b.data = {1, 1, 0, 0, 0, 0, 0, 0};
  DiceResult r = dice_score(a, b, 2);
  CHECK(r.per_class[1] == doctest::Approx(2.0 * 2 / (4 + 2)));
  CHECK(r.mean == doctest::Approx(2.0 / 3));

  DiceResult same = dice_score(b, b, 2);
  CHECK(same.per_class[0] == 1.0);
  CHECK(same.per_class[1] == 1.0);

  Tensor4i c(1, 1, 2, 4);
  c.data = {0, 0, 1, 1, 0, 0, 0, 0};  // disjoint from b's foreground
  CHECK(dice_score(c, b, 2).per_class[1] == 0.0);

  // empty-empty class counts as 1
  Tensor4i z(1, 1, 2, 4);
  DiceResult zz = dice_score(z, z, 3);
  CHECK(zz.per_class[1] == 1.0);
  CHECK(zz.per_class[2] == 1.0);

  Tensor4i bad(1, 1, 2, 4);
  bad.data = {0, 0, 0, 5, 0, 0, 0, 0};
  CHECK_THROWS_AS(dice_score(bad, b, 2), std::invalid_argument);
}

TEST_CASE("dice score is invariant under simultaneous pixel permutation") {
  Rng rng(73);
  Tensor4i a(1, 1, 4, 4), b(1, 1, 4, 4);
  for (auto& v : a.data) v = rng.uniform_int(3);
  for (auto& v : b.data) v = rng.uniform_int(3);
  Tensor4i ap = a, bp = b;
  std::vector<int> perm(16);
  for (int i = 0; i < 16; ++i) perm[static_cast<size_t>(i)] = i;
  for (int i = 15; i > 0; --i)
    std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(rng.uniform_int(i + 1))]);
  for (int i = 0; i < 16; ++i) {
    ap.data[static_cast<size_t>(i)] = a.data[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    bp.data[static_cast<size_t>(i)] = b.data[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  }
  DiceResult r1 = dice_score(a, b, 3), r2 = dice_score(ap, bp, 3);
  for (int l = 0; l < 3; ++l) CHECK(r1.per_class[static_cast<size_t>(l)] ==
                                    doctest::Approx(r2.per_class[static_cast<size_t>(l)]));
}

TEST_CASE("imputation baselines") {
  auto samples = synth_samples(6);
  Sample s = samples[0];
  s.visibility = {1, 0, 1};

  SUBCASE("zero filling") {
    Sample z = impute_zero(s);
    CHECK(z.images[0].data == s.images[0].data);
    CHECK(z.images[2].data == s.images[2].data);
    for (float v : z.images[1].data) CHECK(v == 0.0f);
  }

  SUBCASE("average of one visible domain copies it") {
    Sample one = samples[1];
    one.visibility = {0, 1, 0};
    Sample a = impute_average(one);
    CHECK(a.images[0].data == one.images[1].data);
    CHECK(a.images[2].data == one.images[1].data);
  }

  SUBCASE("average of two visible domains is the pixel mean") {
    Sample a = impute_average(s);
    for (size_t i = 0; i < a.images[1].size(); ++i)
      CHECK(a.images[1].data[i] ==
            doctest::Approx((s.images[0].data[i] + s.images[2].data[i]) / 2));
  }

  SUBCASE("nearest neighbor self-retrieval") {
    Sample probe = samples[3];
    probe.visibility = {1, 1, 0};
    Sample filled = impute_nn(probe, samples);
    CHECK(filled.images[2].data == samples[3].images[2].data);
    CHECK_THROWS_AS(impute_nn(probe, {}), std::invalid_argument);
  }
}

TEST_CASE("single-missing protocol with the oracle and zero baselines") {
  auto test_set = synth_samples(4);

  MetricsReport oracle = run_protocol_single_missing(oracle_completer(), test_set, 0, 3,
                                                     nullptr, "oracle");
  CHECK(oracle.per_domain[0].count == 4);
  CHECK(oracle.per_domain[1].count == 0);
  CHECK(oracle.per_domain[0].nrmse == 0.0);
  CHECK(oracle.per_domain[0].ssim == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(oracle.per_domain[0].psnr == 100.0);

  MetricsReport zero = run_protocol_single_missing(zero_completer(), test_set, 1, 3,
                                                   nullptr, "baseline:zero");
  CHECK(std::abs(zero.per_domain[1].nrmse - 1.0) < 1e-12);
}

TEST_CASE("random-k protocol determinism and validation") {
  auto test_set = synth_samples(4);
  Model<float> model{ModelConfig{}};
  Completer c = model_completer(model, StylePolicy::fixed(0.5));

  MetricsReport r1 = run_protocol_random_k(c, test_set, 2, 9, 3, RandomKScope::all_outputs,
                                           RandomKEnum::sampled, nullptr, "model");
  MetricsReport r2 = run_protocol_random_k(c, test_set, 2, 9, 3, RandomKScope::all_outputs,
                                           RandomKEnum::sampled, nullptr, "model");
  for (int d = 0; d < 3; ++d) {
    CHECK(r1.per_domain[static_cast<size_t>(d)].nrmse ==
          r2.per_domain[static_cast<size_t>(d)].nrmse);
    CHECK(r1.per_domain[static_cast<size_t>(d)].ssim ==
          r2.per_domain[static_cast<size_t>(d)].ssim);
  }

  CHECK_THROWS_AS(run_protocol_random_k(c, test_set, 0, 9, 3, RandomKScope::all_outputs,
                                        RandomKEnum::sampled, nullptr, "model"),
                  std::invalid_argument);
  CHECK_THROWS_AS(run_protocol_random_k(c, test_set, 3, 9, 3, RandomKScope::all_outputs,
                                        RandomKEnum::sampled, nullptr, "model"),
                  std::invalid_argument);
}

TEST_CASE("exhaustive random-k equals the mean of the single-missing reports") {
  auto test_set = synth_samples(4);
  Model<float> model{ModelConfig{}};
  Completer c = model_completer(model, StylePolicy::fixed(0.5));

  MetricsReport rk = run_protocol_random_k(c, test_set, 2, 0, 3, RandomKScope::missing_only,
                                           RandomKEnum::exhaustive, nullptr, "model");
  std::vector<MetricsReport> singles;
  for (int d = 0; d < 3; ++d)
    singles.push_back(run_protocol_single_missing(c, test_set, d, 3, nullptr, "model"));
  MetricsReport merged = merge_reports_mean(singles);

  for (int d = 0; d < 3; ++d) {
    const auto& a = rk.per_domain[static_cast<size_t>(d)];
    const auto& b = merged.per_domain[static_cast<size_t>(d)];
    CHECK(std::abs(a.nrmse - b.nrmse) < 1e-9);
    CHECK(std::abs(a.ssim - b.ssim) < 1e-9);
    CHECK(std::abs(a.psnr - b.psnr) < 1e-9);
    CHECK(std::abs(a.mae - b.mae) < 1e-9);
  }
}

TEST_CASE("report kv round trip") {
  auto test_set = synth_samples(3);
  MetricsReport r = run_protocol_single_missing(zero_completer(), test_set, 0, 3, nullptr,
                                                "baseline:zero");
  const fs::path dir = fs::temp_directory_path() / "remic_eval_test";
  fs::create_directories(dir);
  const std::string path = (dir / "report.kv").string();
  r.write_kv(path);
  MetricsReport back = MetricsReport::read_kv(path);
  CHECK(back.protocol == r.protocol);
  CHECK(back.config_echo == r.config_echo);
  CHECK(back.sample_count == r.sample_count);
  CHECK(back.per_domain[0].nrmse == doctest::Approx(r.per_domain[0].nrmse));
  CHECK(back.per_domain[1].count == 0);
  CHECK(back.has_dice == r.has_dice);
  fs::remove_all(dir);
}

TEST_CASE("report table formatting matches the golden fixture") {
  MetricsReport a;
  a.protocol = "single-missing:0";
  a.config_echo = "baseline:zero";
  a.num_domains = 3;
  a.sample_count = 16;
  a.per_domain.assign(3, {});
  a.per_domain[0] = {0.25, 1.0, 10.1234, 0.4567, 16};

  MetricsReport b;
  b.protocol = "random-k:2";
  b.config_echo = "model";
  b.num_domains = 3;
  b.sample_count = 16;
  b.per_domain.assign(3, {});
  b.per_domain[0] = {0.0187, 0.2008, 28.5508, 0.9618, 16};
  b.per_domain[1] = {0.0153, 0.2375, 29.1628, 0.9521, 16};
  b.per_domain[2] = {0.019, 0.2481, 27.4829, 0.9457, 16};
  b.has_dice = true;
  b.dice_mean = 0.765;
  b.dice_per_class = {0.99, 0.765};
  b.dice_count = 16;

  const std::string table = format_report_table({a, b});
  const std::string golden_path = std::string(REMIC_TEST_DIR) + "/golden/report_table.txt";
  std::ifstream in(golden_path, std::ios::binary);
  REQUIRE(in.good());
  std::string golden((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(table == golden);
}

TEST_CASE("protocol runners accept dice evaluation from a seg model") {
  ModelConfig mc;
  mc.num_classes = 2;
  Model<float> model(mc);
  auto test_set = synth_samples(2);
  MetricsReport r = run_protocol_single_missing(model_completer(model, StylePolicy::fixed(0.5)),
                                                test_set, 0, 3, &model, "model+seg");
  CHECK(r.has_dice);
  CHECK(r.dice_count == 2);
  CHECK(r.dice_per_class.size() == 2);
  CHECK(r.dice_mean >= 0.0);
  CHECK(r.dice_mean <= 1.0);
}
