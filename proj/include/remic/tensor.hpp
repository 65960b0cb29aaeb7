#ifndef REMIC_TENSOR_HPP
#define REMIC_TENSOR_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace remic {

// Dense row-major (batch, channel, height, width) array. The single value
// container used everywhere: feature maps, parameters, 1x1x1x1 scalars.
template <typename T>
struct Tensor4 {
  std::array<int, 4> shape{0, 0, 0, 0};
  std::vector<T> data;

  Tensor4() = default;
  Tensor4(int b, int c, int h, int w)
      : shape{b, c, h, w},
        data(static_cast<size_t>(b) * c * h * w, T(0)) {
    if (b <= 0 || c <= 0 || h <= 0 || w <= 0)
      throw std::invalid_argument("Tensor4: non-positive dimension in " +
                                  shape_str());
  }

  static Tensor4 zeros(int b, int c, int h, int w) { return Tensor4(b, c, h, w); }

  static Tensor4 full(int b, int c, int h, int w, T v) {
    Tensor4 t(b, c, h, w);
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  int batch() const { return shape[0]; }
  int channels() const { return shape[1]; }
  int height() const { return shape[2]; }
  int width() const { return shape[3]; }
  size_t size() const { return data.size(); }
  int plane() const { return shape[2] * shape[3]; }

  T& operator()(int b, int c, int y, int x) {
    return data[((static_cast<size_t>(b) * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }
  T operator()(int b, int c, int y, int x) const {
    return data[((static_cast<size_t>(b) * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }

  bool same_shape(const Tensor4& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(" << shape[0] << ", " << shape[1] << ", " << shape[2] << ", "
       << shape[3] << ")";
    return os.str();
  }
};

using Tensor4f = Tensor4<float>;
using Tensor4d = Tensor4<double>;
using Tensor4i = Tensor4<int32_t>;

template <typename T>
void check_same_shape(const Tensor4<T>& a, const Tensor4<T>& b,
                      const char* where) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(where) + ": shape mismatch " +
                                a.shape_str() + " vs " + b.shape_str());
}

template <typename To, typename From>
Tensor4<To> cast_tensor(const Tensor4<From>& t) {
  Tensor4<To> out(t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
  for (size_t i = 0; i < t.data.size(); ++i)
    out.data[i] = static_cast<To>(t.data[i]);
  return out;
}

}  // namespace remic

#endif
