#include "remic/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace remic {

double mae(const Tensor4f& a, const Tensor4f& b) {
  check_same_shape(a, b, "mae");
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i)
    s += std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]));
  return s / static_cast<double>(a.size());
}

double nrmse(const Tensor4f& a, const Tensor4f& b) {
  check_same_shape(a, b, "nrmse");
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    num += d * d;
    den += static_cast<double>(b.data[i]) * static_cast<double>(b.data[i]);
  }
  if (den == 0.0)
    throw std::invalid_argument("nrmse: all-zero ground truth leaves the normalization undefined");
  return std::sqrt(num) / std::sqrt(den);
}

double psnr(const Tensor4f& a, const Tensor4f& b, double data_range) {
  check_same_shape(a, b, "psnr");
  if (data_range <= 0) throw std::invalid_argument("psnr: data range must be positive");
  double mse = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  const double r2 = data_range * data_range;
  if (mse < r2 * 1e-10) return 100.0;
  return 10.0 * std::log10(r2 / mse);
}

double ssim(const Tensor4f& a, const Tensor4f& b, double data_range) {
  check_same_shape(a, b, "ssim");
  if (data_range <= 0) throw std::invalid_argument("ssim: data range must be positive");
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5;
  const int h = a.height(), w = a.width();
  if (h < kWin || w < kWin)
    throw std::invalid_argument("ssim: image smaller than the 11x11 window");

  // Normalized Gaussian window.
  double win[kWin][kWin];
  double wsum = 0.0;
  for (int y = 0; y < kWin; ++y)
    for (int x = 0; x < kWin; ++x) {
      const double dy = y - kWin / 2, dx = x - kWin / 2;
      win[y][x] = std::exp(-(dx * dx + dy * dy) / (2.0 * kSigma * kSigma));
      wsum += win[y][x];
    }
  for (int y = 0; y < kWin; ++y)
    for (int x = 0; x < kWin; ++x) win[y][x] /= wsum;

  const double c1 = (0.01 * data_range) * (0.01 * data_range);
  const double c2 = (0.03 * data_range) * (0.03 * data_range);

  double total = 0.0;
  long count = 0;
  for (int bi = 0; bi < a.batch(); ++bi)
    for (int ci = 0; ci < a.channels(); ++ci)
      for (int y = 0; y + kWin <= h; ++y)
        for (int x = 0; x + kWin <= w; ++x) {
          double mu1 = 0, mu2 = 0, s11 = 0, s22 = 0, s12 = 0;
          for (int wy = 0; wy < kWin; ++wy)
            for (int wx = 0; wx < kWin; ++wx) {
              const double g = win[wy][wx];
              const double va = a(bi, ci, y + wy, x + wx);
              const double vb = b(bi, ci, y + wy, x + wx);
              mu1 += g * va;
              mu2 += g * vb;
              s11 += g * va * va;
              s22 += g * vb * vb;
              s12 += g * va * vb;
            }
          const double var1 = s11 - mu1 * mu1;
          const double var2 = s22 - mu2 * mu2;
          const double cov = s12 - mu1 * mu2;
          const double val = ((2 * mu1 * mu2 + c1) * (2 * cov + c2)) /
                             ((mu1 * mu1 + mu2 * mu2 + c1) * (var1 + var2 + c2));
          total += val;
          ++count;
        }
  return total / static_cast<double>(count);
}

DiceResult dice_score(const Tensor4i& pred, const Tensor4i& target, int num_classes) {
  check_same_shape(pred, target, "dice_score");
  if (num_classes < 1) throw std::invalid_argument("dice_score: need >= 1 class");
  std::vector<long> p_count(num_classes, 0), t_count(num_classes, 0), i_count(num_classes, 0);
  for (size_t i = 0; i < pred.size(); ++i) {
    const int32_t pl = pred.data[i], tl = target.data[i];
    if (pl < 0 || pl >= num_classes || tl < 0 || tl >= num_classes)
      throw std::invalid_argument("dice_score: label outside {0.." +
                                  std::to_string(num_classes - 1) + "}");
    ++p_count[pl];
    ++t_count[tl];
    if (pl == tl) ++i_count[pl];
  }
  DiceResult res;
  res.per_class.resize(num_classes);
  for (int l = 0; l < num_classes; ++l) {
    const long denom = p_count[l] + t_count[l];
    res.per_class[l] = denom == 0 ? 1.0 : 2.0 * static_cast<double>(i_count[l]) / denom;
  }
  const int first_fg = num_classes >= 2 ? 1 : 0;
  double s = 0.0;
  for (int l = first_fg; l < num_classes; ++l) s += res.per_class[l];
  res.mean = s / (num_classes - first_fg);
  return res;
}

}  // namespace remic
