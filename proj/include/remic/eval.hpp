#ifndef REMIC_EVAL_HPP
#define REMIC_EVAL_HPP

#include <functional>
#include <string>
#include <vector>

#include "remic/data.hpp"
#include "remic/metrics.hpp"
#include "remic/model.hpp"

namespace remic {

// Maps a masked sample to N completed images in [0,1]. Baseline completers
// return the real image for visible domains; the model resynthesizes all N.
using Completer = std::function<std::vector<Tensor4f>(const Sample&)>;

// Imputation baselines on one sample. Each returns a fully visible sample
// whose missing domains were filled in.
Sample impute_zero(const Sample& sample);
Sample impute_average(const Sample& sample);
Sample impute_nn(const Sample& sample, const std::vector<Sample>& train_set);

Completer zero_completer();
Completer average_completer();
Completer nn_completer(const std::vector<Sample>& train_set);
Completer model_completer(Model<float>& model, const StylePolicy& policy);
// Returns the ground-truth images; upper-bound reference for protocol tests.
Completer oracle_completer();

struct DomainAggregate {
  double mae = 0, nrmse = 0, psnr = 0, ssim = 0;
  long count = 0;
};

struct MetricsReport {
  std::string protocol;
  std::string config_echo;
  int num_domains = 0;
  long sample_count = 0;
  std::vector<DomainAggregate> per_domain;
  bool has_dice = false;
  std::vector<double> dice_per_class;
  double dice_mean = 0;
  long dice_count = 0;

  void write_kv(const std::string& path) const;
  static MetricsReport read_kv(const std::string& path);
  std::string to_text() const;
};

enum class RandomKScope { all_outputs, missing_only };
enum class RandomKEnum { sampled, exhaustive };

// Per test sample: mask domain `missing_index`, complete, score the completion
// on that domain (and Dice over the completed sample when a segmentation-
// capable model is supplied).
MetricsReport run_protocol_single_missing(const Completer& completer,
                                          const std::vector<Sample>& test_set,
                                          int missing_index, int num_domains,
                                          Model<float>* seg_model,
                                          const std::string& config_echo);

// Per test sample: visible k-subsets (one seeded draw, or all subsets when
// exhaustive), complete, score generated outputs per domain. `scope` selects
// whether visible-domain outputs are included in the aggregates.
MetricsReport run_protocol_random_k(const Completer& completer,
                                    const std::vector<Sample>& test_set, int k,
                                    uint64_t seed, int num_domains, RandomKScope scope,
                                    RandomKEnum enumeration, Model<float>* seg_model,
                                    const std::string& config_echo);

// Equal-weight per-domain mean across reports (domains absent from a report
// do not contribute).
MetricsReport merge_reports_mean(const std::vector<MetricsReport>& reports);

// Aligned table over several reports, one row per report, one column per
// domain, cells NRMSE / SSIM / PSNR.
std::string format_report_table(const std::vector<MetricsReport>& reports);

}  // namespace remic

#endif
