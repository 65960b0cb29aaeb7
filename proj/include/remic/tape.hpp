#ifndef REMIC_TAPE_HPP
#define REMIC_TAPE_HPP

#include <deque>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "remic/tensor.hpp"

namespace remic {

template <typename T>
class Tape;

// Handle to a value recorded on a tape. Cheap to copy; the tape owns storage.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor4<T>& value() const;
  const Tensor4<T>& grad() const;
  bool requires_grad() const;
};

// Define-by-run reverse-mode tape. Forward ops push values eagerly and record
// backward closures; backward() replays the closures in reverse. One logical
// training step owns one tape (single-writer), so there is no locking.
template <typename T>
class Tape {
 public:
  Var<T> leaf(Tensor4<T> v, bool requires_grad = false) {
    return push(std::move(v), requires_grad);
  }

  // Used by ops to register their output.
  Var<T> output(Tensor4<T> v, bool requires_grad) {
    return push(std::move(v), requires_grad);
  }

  void record(std::function<void()> fn) { backops_.push_back(std::move(fn)); }

  const Tensor4<T>& value(const Var<T>& v) const {
    return slot(v).value;
  }

  // Gradient buffer, allocated to zeros on first touch.
  Tensor4<T>& grad(const Var<T>& v) {
    Slot& s = slot(v);
    if (!s.grad_alloc) {
      const auto& sh = s.value.shape;
      s.grad = Tensor4<T>::zeros(sh[0], sh[1], sh[2], sh[3]);
      s.grad_alloc = true;
    }
    return s.grad;
  }

  const Tensor4<T>& grad_of(const Var<T>& v) const {
    const Slot& s = slot(v);
    if (!s.grad_alloc)
      throw std::runtime_error("Tape: gradient requested for a tensor without one (not reached by backward)");
    return s.grad;
  }

  bool requires_grad(const Var<T>& v) const { return slot(v).requires_grad; }

  void backward(const Var<T>& out) {
    const Tensor4<T>& v = value(out);
    if (v.size() != 1)
      throw std::invalid_argument("Tape::backward: implicit seed needs a scalar output, got " +
                                  v.shape_str());
    Tensor4<T> seed(1, 1, 1, 1);
    seed.data[0] = T(1);
    backward(out, seed);
  }

  void backward(const Var<T>& out, const Tensor4<T>& seed) {
    check_same_shape(value(out), seed, "Tape::backward seed");
    if (ran_backward_)
      throw std::runtime_error("Tape::backward: tape already consumed");
    ran_backward_ = true;
    grad(out) = seed;
    for (auto it = backops_.rbegin(); it != backops_.rend(); ++it) (*it)();
  }

  size_t num_slots() const { return slots_.size(); }

 private:
  struct Slot {
    Tensor4<T> value;
    Tensor4<T> grad;
    bool requires_grad = false;
    bool grad_alloc = false;
  };

  Var<T> push(Tensor4<T> v, bool requires_grad) {
    slots_.push_back(Slot{std::move(v), {}, requires_grad, false});
    return Var<T>{this, static_cast<int>(slots_.size()) - 1};
  }

  Slot& slot(const Var<T>& v) {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(slots_.size()))
      throw std::invalid_argument("Tape: variable does not belong to this graph");
    return slots_[static_cast<size_t>(v.id)];
  }
  const Slot& slot(const Var<T>& v) const {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(slots_.size()))
      throw std::invalid_argument("Tape: variable does not belong to this graph");
    return slots_[static_cast<size_t>(v.id)];
  }

  // deque keeps references to slot values stable while ops push outputs.
  std::deque<Slot> slots_;
  std::vector<std::function<void()>> backops_;
  bool ran_backward_ = false;
};

template <typename T>
const Tensor4<T>& Var<T>::value() const {
  if (!valid()) throw std::runtime_error("Var: empty handle");
  return tape->value(*this);
}

template <typename T>
const Tensor4<T>& Var<T>::grad() const {
  if (!valid()) throw std::runtime_error("Var: empty handle");
  return tape->grad_of(*this);
}

template <typename T>
bool Var<T>::requires_grad() const {
  if (!valid()) throw std::runtime_error("Var: empty handle");
  return tape->requires_grad(*this);
}

}  // namespace remic

#endif
