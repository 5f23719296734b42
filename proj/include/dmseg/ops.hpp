#pragma once

#include <cmath>
#include <vector>

#include "dmseg/gemm.hpp"
#include "dmseg/math.hpp"
#include "dmseg/tensor.hpp"

namespace dmseg {

enum class Activation { Relu, Silu, Softplus, Sigmoid };

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw InvalidInput(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                       to_string(b.shape()));
  }
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  auto ai = a.impl_ptr(), bi = b.impl_ptr();
  return detail::make_result(a.shape(), std::move(out), "add", {&a, &b}, [ai, bi](const std::vector<T>& g) {
    for (auto* gi : {detail::grad_of(ai), detail::grad_of(bi)}) {
      if (!gi) continue;
      for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  auto ai = a.impl_ptr(), bi = b.impl_ptr();
  return detail::make_result(a.shape(), std::move(out), "sub", {&a, &b}, [ai, bi](const std::vector<T>& g) {
    if (auto* ga = detail::grad_of(ai))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (auto* gb = detail::grad_of(bi))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto ai = a.impl_ptr(), bi = b.impl_ptr();
  return detail::make_result(a.shape(), std::move(out), "mul", {&a, &b}, [ai, bi](const std::vector<T>& g) {
    if (auto* ga = detail::grad_of(ai))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bi->data[i];
    if (auto* gb = detail::grad_of(bi))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * ai->data[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.values());
  for (auto& v : out) v *= s;
  auto ai = a.impl_ptr();
  return detail::make_result(a.shape(), std::move(out), "scale", {&a}, [ai, s](const std::vector<T>& g) {
    if (auto* ga = detail::grad_of(ai))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * s;
  });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T{-1});
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> out(a.values());
  for (auto& v : out) v = std::exp(v);
  auto ai = a.impl_ptr();
  auto result = detail::make_result(a.shape(), std::vector<T>(out), "exp", {&a},
                                    [ai, out](const std::vector<T>& g) {
                                      if (auto* ga = detail::grad_of(ai))
                                        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * out[i];
                                    });
  return result;
}

template <typename T>
Tensor<T> activation(const Tensor<T>& a, Activation kind) {
  const auto& x = a.values();
  std::vector<T> out(x.size());
  switch (kind) {
    case Activation::Relu:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
      break;
    case Activation::Silu:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = math::silu(x[i]);
      break;
    case Activation::Softplus:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = math::softplus(x[i]);
      break;
    case Activation::Sigmoid:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = math::sigmoid(x[i]);
      break;
  }
  auto ai = a.impl_ptr();
  return detail::make_result(a.shape(), std::move(out), "activation", {&a}, [ai, kind](const std::vector<T>& g) {
    auto* ga = detail::grad_of(ai);
    if (!ga) return;
    const auto& xv = ai->data;
    switch (kind) {
      case Activation::Relu:
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += xv[i] > T{0} ? g[i] : T{0};
        break;
      case Activation::Silu:
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T s = math::sigmoid(xv[i]);
          (*ga)[i] += g[i] * s * (T{1} + xv[i] * (T{1} - s));
        }
        break;
      case Activation::Softplus:
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * math::sigmoid(xv[i]);
        break;
      case Activation::Sigmoid:
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T s = math::sigmoid(xv[i]);
          (*ga)[i] += g[i] * s * (T{1} - s);
        }
        break;
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return activation(a, Activation::Relu);
}
template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  return activation(a, Activation::Silu);
}
template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  return activation(a, Activation::Softplus);
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s{0};
  for (auto v : a.values()) s += v;
  auto ai = a.impl_ptr();
  return detail::make_result(Shape{1}, std::vector<T>{s}, "sum", {&a}, [ai](const std::vector<T>& g) {
    if (auto* ga = detail::grad_of(ai))
      for (auto& v : *ga) v += g[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw InvalidInput("reshape " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  auto ai = a.impl_ptr();
  return detail::make_result(std::move(shape), a.values(), "reshape", {&a}, [ai](const std::vector<T>& g) {
    if (auto* ga = detail::grad_of(ai))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
  });
}

namespace detail {

// outer = prod(shape[:axis]), inner = prod(shape[axis+1:])
inline std::pair<index_t, index_t> split_at(const Shape& s, std::size_t axis) {
  index_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, inner};
}

}  // namespace detail

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw InvalidInput("concat of zero tensors");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw InvalidInput("concat axis out of range");
  index_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != shape.size()) throw InvalidInput("concat rank mismatch");
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i != axis && p.dim(i) != shape[i]) {
        throw InvalidInput("concat shape mismatch " + to_string(p.shape()) + " vs " + to_string(shape));
      }
    }
    total += p.dim(axis);
  }
  shape[axis] = total;
  auto [outer, inner] = detail::split_at(shape, axis);
  std::vector<T> out(static_cast<std::size_t>(numel(shape)));
  index_t offset = 0;
  std::vector<index_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const index_t block = p.dim(axis) * inner;
    const auto& src = p.values();
    for (index_t o = 0; o < outer; ++o)
      std::copy_n(src.begin() + o * block, block, out.begin() + o * total * inner + offset * inner);
    offset += p.dim(axis);
  }
  std::vector<std::shared_ptr<TensorImpl<T>>> impls;
  for (const auto& p : parts) impls.push_back(p.impl_ptr());
  const index_t outer_c = outer, inner_c = inner;
  return detail::make_result_multi<T>(
      shape, std::move(out), "concat", parts, [impls, offsets, outer_c, inner_c, total, axis](const std::vector<T>& g) {
        for (std::size_t k = 0; k < impls.size(); ++k) {
          auto* gi = detail::grad_of(impls[k]);
          if (!gi) continue;
          const index_t block = impls[k]->shape[axis] * inner_c;
          for (index_t o = 0; o < outer_c; ++o) {
            const T* src = g.data() + o * total * inner_c + offsets[k] * inner_c;
            T* dst = gi->data() + o * block;
            for (index_t i = 0; i < block; ++i) dst[i] += src[i];
          }
        }
      });
}

// Sub-range [start, start+length) along `axis`.
template <typename T>
Tensor<T> narrow(const Tensor<T>& a, std::size_t axis, index_t start, index_t length) {
  if (axis >= a.rank() || start < 0 || length <= 0 || start + length > a.dim(axis)) {
    throw InvalidInput("narrow out of range on " + to_string(a.shape()));
  }
  Shape shape = a.shape();
  const index_t full = shape[axis];
  shape[axis] = length;
  auto [outer, inner] = detail::split_at(shape, axis);
  std::vector<T> out(static_cast<std::size_t>(numel(shape)));
  const auto& src = a.values();
  for (index_t o = 0; o < outer; ++o)
    std::copy_n(src.begin() + (o * full + start) * inner, length * inner, out.begin() + o * length * inner);
  auto ai = a.impl_ptr();
  const index_t outer_c = outer, inner_c = inner;
  return detail::make_result(shape, std::move(out), "narrow", {&a},
                             [ai, outer_c, inner_c, full, start, length](const std::vector<T>& g) {
                               auto* ga = detail::grad_of(ai);
                               if (!ga) return;
                               for (index_t o = 0; o < outer_c; ++o) {
                                 const T* s = g.data() + o * length * inner_c;
                                 T* d = ga->data() + (o * full + start) * inner_c;
                                 for (index_t i = 0; i < length * inner_c; ++i) d[i] += s[i];
                               }
                             });
}

// out[i] = a[source[i]] for a permutation (or any index map) `source`.
template <typename T>
Tensor<T> gather(const Tensor<T>& a, Shape shape, std::shared_ptr<const std::vector<index_t>> source,
                 const char* name = "gather") {
  if (static_cast<index_t>(source->size()) != numel(shape)) throw InvalidInput("gather: index map size");
  std::vector<T> out(source->size());
  const auto& src = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[static_cast<std::size_t>((*source)[i])];
  auto ai = a.impl_ptr();
  return detail::make_result(std::move(shape), std::move(out), name, {&a}, [ai, source](const std::vector<T>& g) {
    if (auto* ga = detail::grad_of(ai))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[static_cast<std::size_t>((*source)[i])] += g[i];
  });
}

// Affine map over the last dimension: y = x W^T + b, weight [out, in].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias = nullptr) {
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(x.rank() - 1) != weight.dim(1)) {
    throw InvalidInput("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                       to_string(weight.shape()));
  }
  const index_t out_f = weight.dim(0), in_f = weight.dim(1);
  if (bias && (bias->rank() != 1 || bias->dim(0) != out_f)) throw InvalidInput("linear: bias shape");
  const index_t rows = x.numel() / in_f;
  Shape shape = x.shape();
  shape.back() = out_f;
  std::vector<T> out(static_cast<std::size_t>(rows * out_f), T{0});
  if (bias) {
    for (index_t r = 0; r < rows; ++r) std::copy_n(bias->values().begin(), out_f, out.begin() + r * out_f);
  }
  // out[r, :] += x[r, i] * W^T[i, :], summed over i in ascending order.
  const auto wt = gemm::transpose(weight.values().data(), out_f, in_f);
  gemm::gemm_nn_acc(rows, out_f, in_f, x.values().data(), in_f, wt.data(), out_f, out.data(), out_f);
  auto xi = x.impl_ptr(), wi = weight.impl_ptr();
  auto bi = bias ? bias->impl_ptr() : nullptr;
  auto backward = [xi, wi, bi, rows, out_f, in_f](const std::vector<T>& g) {
    if (auto* gx = detail::grad_of(xi)) {
      gemm::gemm_nn_acc(rows, in_f, out_f, g.data(), out_f, wi->data.data(), in_f, gx->data(), in_f);
    }
    if (auto* gw = detail::grad_of(wi)) {
      // gW[o, i] += sum_r g[r, o] x[r, i]
      gemm::gemm_tn_acc(out_f, in_f, rows, g.data(), out_f, xi->data.data(), in_f, gw->data(), in_f);
    }
    if (bi) {
      if (auto* gb = detail::grad_of(bi))
        for (index_t r = 0; r < rows; ++r)
          for (index_t o = 0; o < out_f; ++o) (*gb)[o] += g[r * out_f + o];
    }
  };
  if (bias) return detail::make_result(shape, std::move(out), "linear", {&x, &weight, bias}, backward);
  return detail::make_result(shape, std::move(out), "linear", {&x, &weight}, backward);
}

}  // namespace dmseg
