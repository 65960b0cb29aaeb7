#include "remic/eval.hpp"

#include <algorithm>
#include <cmath>

#include "remic/config_io.hpp"

namespace remic {

namespace {

std::vector<Tensor4f> completed_images(const Sample& completed) {
  return completed.images;
}

}  // namespace

Sample impute_zero(const Sample& sample) {
  sample.validate();
  Sample out = sample;
  for (int d = 0; d < sample.num_domains(); ++d)
    if (!sample.visibility[static_cast<size_t>(d)])
      out.images[static_cast<size_t>(d)] =
          Tensor4f::zeros(1, 1, sample.height(), sample.width());
  out.visibility.assign(static_cast<size_t>(sample.num_domains()), 1);
  return out;
}

Sample impute_average(const Sample& sample) {
  sample.validate();
  const int h = sample.height(), w = sample.width();
  Tensor4f avg(1, 1, h, w);
  int visible = 0;
  for (int d = 0; d < sample.num_domains(); ++d) {
    if (!sample.visibility[static_cast<size_t>(d)]) continue;
    ++visible;
    const Tensor4f& img = sample.images[static_cast<size_t>(d)];
    for (size_t i = 0; i < avg.size(); ++i) avg.data[i] += img.data[i];
  }
  for (auto& v : avg.data) v /= static_cast<float>(visible);
  Sample out = sample;
  for (int d = 0; d < sample.num_domains(); ++d)
    if (!sample.visibility[static_cast<size_t>(d)]) out.images[static_cast<size_t>(d)] = avg;
  out.visibility.assign(static_cast<size_t>(sample.num_domains()), 1);
  return out;
}

Sample impute_nn(const Sample& sample, const std::vector<Sample>& train_set) {
  sample.validate();
  if (train_set.empty())
    throw std::invalid_argument("impute_nn: empty training set");
  // Summed per-domain Euclidean distance over the visible domains.
  double best = 0;
  int best_idx = -1;
  for (size_t t = 0; t < train_set.size(); ++t) {
    const Sample& cand = train_set[t];
    if (cand.num_domains() != sample.num_domains())
      throw std::invalid_argument("impute_nn: training sample domain count mismatch");
    double dist = 0;
    for (int d = 0; d < sample.num_domains(); ++d) {
      if (!sample.visibility[static_cast<size_t>(d)]) continue;
      if (!cand.visibility[static_cast<size_t>(d)])
        throw std::invalid_argument("impute_nn: training set must contain complete samples");
      const Tensor4f& a = sample.images[static_cast<size_t>(d)];
      const Tensor4f& b = cand.images[static_cast<size_t>(d)];
      check_same_shape(a, b, "impute_nn");
      double ss = 0;
      for (size_t i = 0; i < a.size(); ++i) {
        const double diff = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        ss += diff * diff;
      }
      dist += std::sqrt(ss);
    }
    if (best_idx < 0 || dist < best) {
      best = dist;
      best_idx = static_cast<int>(t);
    }
  }
  Sample out = sample;
  for (int d = 0; d < sample.num_domains(); ++d)
    if (!sample.visibility[static_cast<size_t>(d)])
      out.images[static_cast<size_t>(d)] =
          train_set[static_cast<size_t>(best_idx)].images[static_cast<size_t>(d)];
  out.visibility.assign(static_cast<size_t>(sample.num_domains()), 1);
  return out;
}

Completer zero_completer() {
  return [](const Sample& s) { return completed_images(impute_zero(s)); };
}

Completer average_completer() {
  return [](const Sample& s) { return completed_images(impute_average(s)); };
}

Completer nn_completer(const std::vector<Sample>& train_set) {
  const std::vector<Sample>* train = &train_set;
  return [train](const Sample& s) { return completed_images(impute_nn(s, *train)); };
}

Completer model_completer(Model<float>& model, const StylePolicy& policy) {
  Model<float>* m = &model;
  StylePolicy p = policy;
  return [m, p](const Sample& s) { return m->complete_missing(s, p); };
}

Completer oracle_completer() {
  return [](const Sample& s) { return s.images; };
}

namespace {

void accumulate_domain(DomainAggregate& agg, const Tensor4f& completed,
                       const Tensor4f& truth) {
  agg.mae += mae(completed, truth);
  agg.nrmse += nrmse(completed, truth);
  agg.psnr += psnr(completed, truth, 1.0);
  agg.ssim += ssim(completed, truth, 1.0);
  agg.count += 1;
}

void finalize(MetricsReport& report) {
  for (auto& agg : report.per_domain) {
    if (agg.count == 0) continue;
    agg.mae /= agg.count;
    agg.nrmse /= agg.count;
    agg.psnr /= agg.count;
    agg.ssim /= agg.count;
  }
  if (report.dice_count > 0) {
    for (auto& v : report.dice_per_class) v /= report.dice_count;
    report.dice_mean /= report.dice_count;
  }
}

// Dice of the supplied segmentation-capable model on the completed sample
// (real where visible, completed where missing).
void accumulate_dice(MetricsReport& report, Model<float>& seg_model, const Sample& original,
                     const Sample& masked, const std::vector<Tensor4f>& completed) {
  if (!original.seg_mask) return;
  Sample fed = original;
  fed.visibility.assign(static_cast<size_t>(original.num_domains()), 1);
  for (int d = 0; d < original.num_domains(); ++d)
    if (!masked.visibility[static_cast<size_t>(d)])
      fed.images[static_cast<size_t>(d)] = completed[static_cast<size_t>(d)];
  const int classes = std::max(seg_model.config().num_classes, 1) == 1
                          ? 2
                          : seg_model.config().num_classes;
  Tensor4i pred = seg_model.segment_labels(fed);
  DiceResult dr = dice_score(pred, *original.seg_mask, classes);
  report.has_dice = true;
  if (report.dice_per_class.empty()) report.dice_per_class.assign(dr.per_class.size(), 0.0);
  for (size_t i = 0; i < dr.per_class.size(); ++i) report.dice_per_class[i] += dr.per_class[i];
  report.dice_mean += dr.mean;
  report.dice_count += 1;
}

}  // namespace

MetricsReport run_protocol_single_missing(const Completer& completer,
                                          const std::vector<Sample>& test_set,
                                          int missing_index, int num_domains,
                                          Model<float>* seg_model,
                                          const std::string& config_echo) {
  if (missing_index < 0 || missing_index >= num_domains)
    throw std::invalid_argument("single-missing: domain index out of range");
  if (test_set.empty()) throw std::invalid_argument("single-missing: empty test set");
  MetricsReport report;
  report.protocol = "single-missing:" + std::to_string(missing_index);
  report.config_echo = config_echo;
  report.num_domains = num_domains;
  report.sample_count = static_cast<long>(test_set.size());
  report.per_domain.assign(static_cast<size_t>(num_domains), {});

  for (const Sample& s : test_set) {
    Sample masked = s;
    masked.visibility.assign(static_cast<size_t>(num_domains), 1);
    masked.visibility[static_cast<size_t>(missing_index)] = 0;
    std::vector<Tensor4f> completed = completer(masked);
    accumulate_domain(report.per_domain[static_cast<size_t>(missing_index)],
                      completed[static_cast<size_t>(missing_index)],
                      s.images[static_cast<size_t>(missing_index)]);
    if (seg_model) accumulate_dice(report, *seg_model, s, masked, completed);
  }
  finalize(report);
  return report;
}

MetricsReport run_protocol_random_k(const Completer& completer,
                                    const std::vector<Sample>& test_set, int k,
                                    uint64_t seed, int num_domains, RandomKScope scope,
                                    RandomKEnum enumeration, Model<float>* seg_model,
                                    const std::string& config_echo) {
  if (k < 1 || k > num_domains - 1)
    throw std::invalid_argument("random-k: k must lie in [1, N-1]");
  if (test_set.empty()) throw std::invalid_argument("random-k: empty test set");
  MetricsReport report;
  report.protocol = "random-k:" + std::to_string(k) +
                    (enumeration == RandomKEnum::exhaustive ? ":exhaustive" : "");
  report.config_echo = config_echo;
  report.num_domains = num_domains;
  report.sample_count = static_cast<long>(test_set.size());
  report.per_domain.assign(static_cast<size_t>(num_domains), {});

  Rng rng(seed);
  MaskSpec spec;
  spec.mode = MaskMode::fixed_k;
  spec.k = k;

  for (const Sample& s : test_set) {
    std::vector<std::vector<uint8_t>> subsets;
    if (enumeration == RandomKEnum::sampled) {
      subsets.push_back(sample_visibility(num_domains, spec, rng).flags);
    } else {
      for (int bits = 0; bits < (1 << num_domains); ++bits) {
        if (__builtin_popcount(static_cast<unsigned>(bits)) != k) continue;
        std::vector<uint8_t> flags(static_cast<size_t>(num_domains), 0);
        for (int d = 0; d < num_domains; ++d) flags[static_cast<size_t>(d)] = (bits >> d) & 1;
        subsets.push_back(flags);
      }
    }
    for (const auto& flags : subsets) {
      Sample masked = s;
      masked.visibility = flags;
      std::vector<Tensor4f> completed = completer(masked);
      for (int d = 0; d < num_domains; ++d) {
        if (scope == RandomKScope::missing_only && flags[static_cast<size_t>(d)]) continue;
        accumulate_domain(report.per_domain[static_cast<size_t>(d)],
                          completed[static_cast<size_t>(d)], s.images[static_cast<size_t>(d)]);
      }
      if (seg_model) accumulate_dice(report, *seg_model, s, masked, completed);
    }
  }
  finalize(report);
  return report;
}

MetricsReport merge_reports_mean(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("merge_reports_mean: no reports");
  MetricsReport out;
  out.protocol = "merged";
  out.config_echo = reports[0].config_echo;
  out.num_domains = reports[0].num_domains;
  out.sample_count = reports[0].sample_count;
  out.per_domain.assign(static_cast<size_t>(out.num_domains), {});
  for (const auto& r : reports) {
    if (r.num_domains != out.num_domains)
      throw std::invalid_argument("merge_reports_mean: domain count mismatch");
    for (int d = 0; d < out.num_domains; ++d) {
      const auto& src = r.per_domain[static_cast<size_t>(d)];
      if (src.count == 0) continue;
      auto& dst = out.per_domain[static_cast<size_t>(d)];
      dst.mae += src.mae;
      dst.nrmse += src.nrmse;
      dst.psnr += src.psnr;
      dst.ssim += src.ssim;
      dst.count += 1;  // one contributing report
    }
  }
  for (auto& agg : out.per_domain) {
    if (agg.count == 0) continue;
    agg.mae /= agg.count;
    agg.nrmse /= agg.count;
    agg.psnr /= agg.count;
    agg.ssim /= agg.count;
  }
  return out;
}

}  // namespace remic
