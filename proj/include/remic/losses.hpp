#ifndef REMIC_LOSSES_HPP
#define REMIC_LOSSES_HPP

#include <optional>
#include <stdexcept>
#include <vector>

#include "remic/ops.hpp"

namespace remic {

struct LossWeights {
  double adv = 1.0;
  double x_cyc = 10.0;
  double c_cyc = 1.0;
  double s_cyc = 1.0;
  double rec = 20.0;
  double seg = 1.0;

  void validate() const {
    if (adv < 0 || x_cyc < 0 || c_cyc < 0 || s_cyc < 0 || rec < 0 || seg < 0)
      throw std::invalid_argument("LossWeights: negative weight");
  }
};

// Mean L1 between a reconstruction G_i(E^c(x), E^s_i(x_i)) and the real image.
template <typename T>
Var<T> image_consistency_loss(Var<T> reconstructed, Var<T> real) {
  return l1_mean(reconstructed, real);
}

// Mean L1 between the re-encoded content of generated images and the original
// content code.
template <typename T>
Var<T> content_consistency_loss(Var<T> re_encoded, Var<T> content) {
  return l1_mean(re_encoded, content);
}

// Mean L1 between the re-encoded style of a generated image and the style it
// was generated from.
template <typename T>
Var<T> style_consistency_loss(Var<T> re_encoded, Var<T> style) {
  return l1_mean(re_encoded, style);
}

// Least-squares GAN, discriminator side: mean over scales of
// mean (D(x) - 1)^2 + mean D(x~)^2. Fake score maps must come from a forward
// pass whose generator inputs are constants (detached).
template <typename T>
Var<T> adversarial_loss_d(const std::vector<Var<T>>& real_scores,
                          const std::vector<Var<T>>& fake_scores) {
  if (real_scores.empty() || fake_scores.empty() ||
      real_scores.size() != fake_scores.size())
    throw std::invalid_argument("adversarial_loss_d: empty or mismatched scale lists");
  std::vector<Var<T>> per_scale;
  for (size_t i = 0; i < real_scores.size(); ++i) {
    Var<T> r = mse_vs_const(real_scores[i], T(1));
    Var<T> f = mse_vs_const(fake_scores[i], T(0));
    per_scale.push_back(weighted_sum<T>({r, f}, {T(1), T(1)}));
  }
  return mean_of(per_scale);
}

// Generator side: mean over scales of mean (D(x~) - 1)^2.
template <typename T>
Var<T> adversarial_loss_g(const std::vector<Var<T>>& fake_scores) {
  if (fake_scores.empty())
    throw std::invalid_argument("adversarial_loss_g: empty scale list");
  std::vector<Var<T>> per_scale;
  for (const auto& f : fake_scores) per_scale.push_back(mse_vs_const(f, T(1)));
  return mean_of(per_scale);
}

// Mean L1 between a prior-style generation and the ground-truth image.
template <typename T>
Var<T> reconstruction_loss(Var<T> generated, Var<T> real) {
  return l1_mean(generated, real);
}

// 1 - (1/L) sum_l [ 2 sum_p y_hat*y / (sum_p y_hat^2 + sum_p y^2 + eps) ].
// pred and target are (B, L, H, W); the class sums run over batch and space.
template <typename T>
Var<T> dice_loss(Var<T> pred_probs, Var<T> target_onehot, T smooth = T(1e-6)) {
  const Tensor4<T>& pv = pred_probs.value();
  const Tensor4<T>& tv = target_onehot.value();
  check_same_shape(pv, tv, "dice_loss");
  const int classes = pv.channels();
  if (classes < 1) throw std::invalid_argument("dice_loss: class count must be >= 1");
  const int bs = pv.batch(), plane = pv.plane();

  std::vector<T> num(classes, T(0)), den(classes, T(0));
  for (int l = 0; l < classes; ++l) {
    for (int b = 0; b < bs; ++b) {
      const size_t off = (static_cast<size_t>(b) * classes + l) * plane;
      const T* pp = pv.data.data() + off;
      const T* tp = tv.data.data() + off;
      for (int i = 0; i < plane; ++i) {
        num[l] += pp[i] * tp[i];
        den[l] += pp[i] * pp[i] + tp[i] * tp[i];
      }
    }
    den[l] += smooth;
  }
  Tensor4<T> out(1, 1, 1, 1);
  T acc = T(0);
  for (int l = 0; l < classes; ++l) acc += T(2) * num[l] / den[l];
  out.data[0] = T(1) - acc / T(classes);

  const bool need = pred_probs.requires_grad() || target_onehot.requires_grad();
  Var<T> out_var = pred_probs.tape->output(std::move(out), need);
  if (need) {
    Tape<T>* tape = pred_probs.tape;
    tape->record([tape, pred_probs, target_onehot, out_var, num, den, classes,
                  bs, plane]() {
      const T g = tape->grad(out_var).data[0];
      const Tensor4<T>& pv2 = tape->value(pred_probs);
      const Tensor4<T>& tv2 = tape->value(target_onehot);
      for (int l = 0; l < classes; ++l) {
        const T d = den[l];
        for (int b = 0; b < bs; ++b) {
          const size_t off = (static_cast<size_t>(b) * classes + l) * plane;
          const T* pp = pv2.data.data() + off;
          const T* tp = tv2.data.data() + off;
          if (pred_probs.requires_grad()) {
            T* gp = tape->grad(pred_probs).data.data() + off;
            for (int i = 0; i < plane; ++i)
              gp[i] += g * (-T(1) / T(classes)) *
                       (T(2) * tp[i] * d - T(2) * num[l] * T(2) * pp[i]) / (d * d);
          }
          if (target_onehot.requires_grad()) {
            T* gt = tape->grad(target_onehot).data.data() + off;
            for (int i = 0; i < plane; ++i)
              gt[i] += g * (-T(1) / T(classes)) *
                       (T(2) * pp[i] * d - T(2) * num[l] * T(2) * tp[i]) / (d * d);
          }
        }
      }
    });
  }
  return out_var;
}

// Scalar-side view of one training step's objective components. Per-domain
// lists carry one entry per contributing domain; a masked domain simply has
// no image-consistency entry.
template <typename S>
struct TotalLossTerms {
  std::vector<S> adv;
  std::vector<S> x_cyc;
  std::vector<S> s_cyc;
  std::vector<S> rec;
  S c_cyc{};
  std::optional<S> seg;
};

inline double total_loss(const TotalLossTerms<double>& t, const LossWeights& w,
                         bool include_seg) {
  w.validate();
  double total = 0.0;
  for (double v : t.adv) total += w.adv * v;
  for (double v : t.x_cyc) total += w.x_cyc * v;
  for (double v : t.s_cyc) total += w.s_cyc * v;
  for (double v : t.rec) total += w.rec * v;
  total += w.c_cyc * t.c_cyc;
  if (include_seg) {
    if (!t.seg) throw std::invalid_argument("total_loss: include_seg without a seg term");
    total += w.seg * *t.seg;
  }
  return total;
}

// Graph version: identical arithmetic, producing a differentiable scalar.
template <typename T>
Var<T> total_loss(const TotalLossTerms<Var<T>>& t, const LossWeights& w,
                  bool include_seg) {
  w.validate();
  std::vector<Var<T>> terms;
  std::vector<T> weights;
  auto push = [&](const std::vector<Var<T>>& vs, double lambda) {
    for (const auto& v : vs) {
      terms.push_back(v);
      weights.push_back(static_cast<T>(lambda));
    }
  };
  push(t.adv, w.adv);
  push(t.x_cyc, w.x_cyc);
  push(t.s_cyc, w.s_cyc);
  push(t.rec, w.rec);
  terms.push_back(t.c_cyc);
  weights.push_back(static_cast<T>(w.c_cyc));
  if (include_seg) {
    if (!t.seg) throw std::invalid_argument("total_loss: include_seg without a seg term");
    terms.push_back(*t.seg);
    weights.push_back(static_cast<T>(w.seg));
  }
  return weighted_sum(terms, weights);
}

}  // namespace remic

#endif
