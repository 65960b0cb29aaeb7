#ifndef REMIC_METRICS_HPP
#define REMIC_METRICS_HPP

#include <vector>

#include "remic/tensor.hpp"

namespace remic {

// Image fidelity metrics, computed in double precision. `b` is ground truth
// where the definition is asymmetric (NRMSE normalizes by ground truth only).
double mae(const Tensor4f& a, const Tensor4f& b);
double nrmse(const Tensor4f& a, const Tensor4f& b);

// 10 * log10(range^2 / MSE), capped at 100 dB when MSE < range^2 * 1e-10.
double psnr(const Tensor4f& a, const Tensor4f& b, double data_range = 1.0);

// Mean local SSIM, 11x11 Gaussian window sigma 1.5, K1 = 0.01, K2 = 0.03,
// window restricted to fully-valid positions.
double ssim(const Tensor4f& a, const Tensor4f& b, double data_range = 1.0);

struct DiceResult {
  std::vector<double> per_class;  // length L
  double mean = 0.0;              // over foreground classes (class 0 excluded when L >= 2)
};

// Hard-label overlap 2|P & T| / (|P| + |T|) per class; an empty-empty class
// counts as 1.
DiceResult dice_score(const Tensor4i& pred, const Tensor4i& target, int num_classes);

}  // namespace remic

#endif
