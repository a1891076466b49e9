#include "lga/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "lga/kernels.hpp"

namespace lga {

namespace {

// Maps flat indices of an output shape onto a right-aligned broadcast input.
class BroadcastIndexer {
 public:
  BroadcastIndexer(const Shape& out, const Shape& in) : out_(out), strides_(out.size(), 0) {
    const std::size_t offset = out.size() - in.size();
    std::size_t stride = 1;
    for (std::size_t i = in.size(); i-- > 0;) {
      strides_[offset + i] = in[i] == 1 ? 0 : stride;
      stride *= in[i];
    }
  }

  // Calls f(out_index, in_index) for every output element, in order.
  template <typename F>
  void for_each(F&& f) const {
    const std::size_t rank = out_.size();
    std::vector<std::size_t> idx(rank, 0);
    const std::size_t total = numel(out_);
    std::size_t in = 0;
    for (std::size_t o = 0; o < total; ++o) {
      f(o, in);
      for (std::size_t ax = rank; ax-- > 0;) {
        ++idx[ax];
        in += strides_[ax];
        if (idx[ax] < out_[ax]) break;
        in -= strides_[ax] * idx[ax];
        idx[ax] = 0;
      }
    }
  }

 private:
  Shape out_;
  std::vector<std::size_t> strides_;
};

// True when `in` equals a suffix of `out`, so in[i % size(in)] addresses it.
bool is_suffix(const Shape& out, const Shape& in) {
  if (in.size() > out.size()) return false;
  return std::equal(in.begin(), in.end(), out.end() - static_cast<std::ptrdiff_t>(in.size()));
}

// Sums a gradient of shape `out` down to the broadcast input shape `in`.
template <typename T>
void reduce_into(const Tensor<T>& grad_out, Tensor<T>& grad_in) {
  const Shape& out = grad_out.shape();
  const Shape& in = grad_in.shape();
  auto g = grad_out.data();
  auto d = grad_in.data();
  if (out == in) {
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  } else if (is_suffix(out, in)) {
    const std::size_t n = d.size();
    for (std::size_t i = 0; i < g.size(); ++i) d[i % n] += g[i];
  } else {
    BroadcastIndexer(out, in).for_each([&](std::size_t o, std::size_t i) { d[i] += g[o]; });
  }
}

template <typename T, typename F>
Tensor<T> broadcast_apply(const Tensor<T>& a, const Tensor<T>& b, F f) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  Tensor<T> out(out_shape);
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  if (a.shape() == out_shape && b.shape() == out_shape) {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(x[i], y[i]);
  } else if (a.shape() == out_shape && is_suffix(out_shape, b.shape())) {
    const std::size_t n = y.size();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(x[i], y[i % n]);
  } else {
    BroadcastIndexer ia(out_shape, a.shape());
    BroadcastIndexer ib(out_shape, b.shape());
    std::vector<std::size_t> bmap(o.size());
    ib.for_each([&](std::size_t oi, std::size_t bi) { bmap[oi] = bi; });
    ia.for_each([&](std::size_t oi, std::size_t ai) { o[oi] = f(x[ai], y[bmap[oi]]); });
  }
  return out;
}

// Gathers values of `src` (broadcast input) aligned to output flat indices.
template <typename T>
Tensor<T> expand_to(const Tensor<T>& src, const Shape& out_shape) {
  if (src.shape() == out_shape) return src;
  Tensor<T> out(out_shape);
  auto o = out.data();
  auto s = src.data();
  BroadcastIndexer(out_shape, src.shape()).for_each([&](std::size_t oi, std::size_t si) { o[oi] = s[si]; });
  return out;
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t axis = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.axis = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

void check_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Graph<T>& g = a.graph();
  Tensor<T> out = broadcast_apply(a.value(), b.value(), [](T x, T y) { return x + y; });
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(
      std::move(out), {ia, ib},
      [ia, ib](Graph<T>& gr, std::size_t self) {
        const Tensor<T>& go = gr.grad_buffer(self);
        if (gr.requires_grad(ia)) reduce_into(go, gr.grad_buffer(ia));
        if (gr.requires_grad(ib)) reduce_into(go, gr.grad_buffer(ib));
      },
      "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return add(a, scale(b, T(-1)));
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Graph<T>& g = a.graph();
  Tensor<T> out = broadcast_apply(a.value(), b.value(), [](T x, T y) { return x * y; });
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(
      std::move(out), {ia, ib},
      [ia, ib](Graph<T>& gr, std::size_t self) {
        const Tensor<T>& go = gr.grad_buffer(self);
        const Shape& os = go.shape();
        if (gr.requires_grad(ia)) {
          Tensor<T> bx = expand_to(gr.value(ib), os);
          for (std::size_t i = 0; i < bx.size(); ++i) bx[i] *= go[i];
          reduce_into(bx, gr.grad_buffer(ia));
        }
        if (gr.requires_grad(ib)) {
          Tensor<T> ax = expand_to(gr.value(ia), os);
          for (std::size_t i = 0; i < ax.size(); ++i) ax[i] *= go[i];
          reduce_into(ax, gr.grad_buffer(ib));
        }
      },
      "mul");
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= factor;
  const std::size_t ia = a.id();
  return a.graph().record(
      std::move(out), {ia},
      [ia, factor](Graph<T>& gr, std::size_t self) {
        const Tensor<T>& go = gr.grad_buffer(self);
        auto d = gr.grad_buffer(ia).data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * go[i];
      },
      "scale");
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2 || sa[sa.size() - 1] != sb[sb.size() - 2]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::size_t m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  const Shape ba(sa.begin(), sa.end() - 2);
  const Shape bb(sb.begin(), sb.end() - 2);
  Shape batch;
  try {
    batch = broadcast_shapes(ba, bb);
  } catch (const DimensionError&) {
    throw DimensionError("matmul: batch dimensions of " + shape_str(sa) + " and " + shape_str(sb) +
                         " do not broadcast");
  }
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);

  const T* pa = a.value().data().data();
  const T* pb = b.value().data().data();
  T* pc = out.data().data();

  // Per output batch: offsets (in matrices) of the a and b operands.
  auto pairs = std::make_shared<std::vector<std::pair<std::size_t, std::size_t>>>();
  const bool flat = bb.empty();
  if (flat) {
    kernels::gemm(false, false, numel(ba) * m, n, k, T(1), pa, k, pb, n, T(0), pc, n);
  } else {
    const std::size_t nb = numel(batch);
    pairs->resize(nb);
    std::vector<std::size_t> amap(nb), bmap(nb);
    BroadcastIndexer(batch, ba.empty() ? Shape{1} : ba).for_each([&](std::size_t o, std::size_t i) { amap[o] = i; });
    BroadcastIndexer(batch, bb).for_each([&](std::size_t o, std::size_t i) { bmap[o] = i; });
    if (ba.empty()) std::fill(amap.begin(), amap.end(), 0);
    for (std::size_t o = 0; o < nb; ++o) {
      (*pairs)[o] = {amap[o], bmap[o]};
      kernels::gemm(false, false, m, n, k, T(1), pa + amap[o] * m * k, k, pb + bmap[o] * k * n, n, T(0),
                    pc + o * m * n, n);
    }
  }

  const std::size_t ia = a.id(), ib = b.id();
  const std::size_t rows = numel(ba) * m;
  return a.graph().record(
      std::move(out), {ia, ib},
      [ia, ib, m, n, k, flat, rows, pairs](Graph<T>& gr, std::size_t self) {
        const T* go = gr.grad_buffer(self).data().data();
        const T* va = gr.value(ia).data().data();
        const T* vb = gr.value(ib).data().data();
        const bool need_a = gr.requires_grad(ia);
        const bool need_b = gr.requires_grad(ib);
        T* ga = need_a ? gr.grad_buffer(ia).data().data() : nullptr;
        T* gb = need_b ? gr.grad_buffer(ib).data().data() : nullptr;
        if (flat) {
          if (need_a) kernels::gemm(false, true, rows, k, n, T(1), go, n, vb, n, T(1), ga, k);
          if (need_b) kernels::gemm(true, false, k, n, rows, T(1), va, k, go, n, T(1), gb, n);
          return;
        }
        for (std::size_t o = 0; o < pairs->size(); ++o) {
          const auto [ai, bi] = (*pairs)[o];
          if (need_a) {
            kernels::gemm(false, true, m, k, n, T(1), go + o * m * n, n, vb + bi * k * n, n, T(1), ga + ai * m * k, k);
          }
          if (need_b) {
            kernels::gemm(true, false, k, n, m, T(1), va + ai * m * k, k, go + o * m * n, n, T(1), gb + bi * k * n, n);
          }
        }
      },
      "matmul");
}

namespace {

template <typename T>
Tensor<T> permute_tensor(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const Shape& s = x.shape();
  const std::size_t rank = s.size();
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = s[axes[i]];
  std::vector<std::size_t> in_strides(rank);
  std::size_t stride = 1;
  for (std::size_t i = rank; i-- > 0;) {
    in_strides[i] = stride;
    stride *= s[i];
  }
  // Input stride walked by each output axis.
  std::vector<std::size_t> walk(rank);
  for (std::size_t i = 0; i < rank; ++i) walk[i] = in_strides[axes[i]];
  Tensor<T> out(out_shape);
  auto o = out.data();
  auto in = x.data();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  // The innermost axis is copied in a tight loop.
  const std::size_t last = out_shape[rank - 1];
  const std::size_t last_stride = walk[rank - 1];
  for (std::size_t base = 0; base < o.size(); base += last) {
    for (std::size_t j = 0; j < last; ++j) o[base + j] = in[src + j * last_stride];
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      ++idx[ax];
      src += walk[ax];
      if (idx[ax] < out_shape[ax]) break;
      src -= walk[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  return out;
}

}  // namespace

template <typename T>
Var<T> permute(Var<T> a, const std::vector<std::size_t>& axes) {
  const Shape& s = a.shape();
  if (axes.size() != s.size()) throw DimensionError("permute: axes rank mismatch for " + shape_str(s));
  std::vector<std::size_t> inverse(axes.size(), axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= axes.size() || inverse[axes[i]] != axes.size()) {
      throw DimensionError("permute: invalid axis permutation for " + shape_str(s));
    }
    inverse[axes[i]] = i;
  }
  const std::size_t ia = a.id();
  return a.graph().record(
      permute_tensor(a.value(), axes), {ia},
      [ia, inverse](Graph<T>& gr, std::size_t self) {
        Tensor<T> back = permute_tensor(gr.grad_buffer(self), inverse);
        auto d = gr.grad_buffer(ia).data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += back[i];
      },
      "permute");
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const std::size_t r = a.shape().size();
  if (r < 2) throw DimensionError("transpose: rank < 2 for " + shape_str(a.shape()));
  std::vector<std::size_t> axes(r);
  for (std::size_t i = 0; i < r; ++i) axes[i] = i;
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(a, axes);
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (numel(shape) != a.value().size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  const std::size_t ia = a.id();
  return a.graph().record(
      a.value().reshaped(std::move(shape)), {ia},
      [ia](Graph<T>& gr, std::size_t self) {
        const Tensor<T>& go = gr.grad_buffer(self);
        auto d = gr.grad_buffer(ia).data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i];
      },
      "reshape");
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  check_axis(s0, axis, "concat");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  std::vector<std::size_t> ids, widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
    if (!ok) throw DimensionError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(s0));
    out_shape[axis] += s[axis];
    ids.push_back(p.id());
    widths.push_back(s[axis]);
  }
  const AxisSplit sp = split_at(out_shape, axis);
  Tensor<T> out(out_shape);
  T* o = out.data().data();
  std::size_t at = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const T* src = parts[p].value().data().data();
    const std::size_t w = widths[p] * sp.inner;
    for (std::size_t r = 0; r < sp.outer; ++r) {
      std::copy(src + r * w, src + (r + 1) * w, o + r * sp.axis * sp.inner + at);
    }
    at += w;
  }
  return parts[0].graph().record(
      std::move(out), ids,
      [ids, widths, sp](Graph<T>& gr, std::size_t self) {
        const T* go = gr.grad_buffer(self).data().data();
        std::size_t at = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
          const std::size_t w = widths[p] * sp.inner;
          if (gr.requires_grad(ids[p])) {
            T* d = gr.grad_buffer(ids[p]).data().data();
            for (std::size_t r = 0; r < sp.outer; ++r) {
              const T* src = go + r * sp.axis * sp.inner + at;
              for (std::size_t j = 0; j < w; ++j) d[r * w + j] += src[j];
            }
          }
          at += w;
        }
      },
      "concat");
}

template <typename T>
Var<T> pad(Var<T> a, std::size_t axis, std::size_t before, std::size_t after) {
  const Shape& s = a.shape();
  check_axis(s, axis, "pad");
  Shape out_shape = s;
  out_shape[axis] += before + after;
  const AxisSplit in = split_at(s, axis);
  const std::size_t out_axis = out_shape[axis];
  Tensor<T> out(out_shape);
  const T* src = a.value().data().data();
  T* o = out.data().data();
  const std::size_t w = in.axis * in.inner;
  for (std::size_t r = 0; r < in.outer; ++r) {
    std::copy(src + r * w, src + (r + 1) * w, o + (r * out_axis + before) * in.inner);
  }
  const std::size_t ia = a.id();
  return a.graph().record(
      std::move(out), {ia},
      [ia, in, out_axis, before, w](Graph<T>& gr, std::size_t self) {
        const T* go = gr.grad_buffer(self).data().data();
        T* d = gr.grad_buffer(ia).data().data();
        for (std::size_t r = 0; r < in.outer; ++r) {
          const T* src = go + (r * out_axis + before) * in.inner;
          for (std::size_t j = 0; j < w; ++j) d[r * w + j] += src[j];
        }
      },
      "pad");
}

template <typename T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = a.shape();
  check_axis(s, axis, "slice");
  if (length == 0 || start + length > s[axis]) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") outside axis of " + shape_str(s));
  }
  Shape out_shape = s;
  out_shape[axis] = length;
  const AxisSplit in = split_at(s, axis);
  Tensor<T> out(out_shape);
  const T* src = a.value().data().data();
  T* o = out.data().data();
  const std::size_t w = length * in.inner;
  for (std::size_t r = 0; r < in.outer; ++r) {
    const T* from = src + (r * in.axis + start) * in.inner;
    std::copy(from, from + w, o + r * w);
  }
  const std::size_t ia = a.id();
  return a.graph().record(
      std::move(out), {ia},
      [ia, in, start, w](Graph<T>& gr, std::size_t self) {
        const T* go = gr.grad_buffer(self).data().data();
        T* d = gr.grad_buffer(ia).data().data();
        for (std::size_t r = 0; r < in.outer; ++r) {
          T* to = d + (r * in.axis + start) * in.inner;
          for (std::size_t j = 0; j < w; ++j) to[j] += go[r * w + j];
        }
      },
      "slice");
}

template <typename T>
Var<T> embedding(Var<T> table, std::span<const std::int32_t> ids, const Shape& index_shape) {
  const Shape& ts = table.shape();
  if (ts.size() != 2) throw DimensionError("embedding: table must be [vocab, d], got " + shape_str(ts));
  if (numel(index_shape) != ids.size()) {
    throw DimensionError("embedding: " + std::to_string(ids.size()) + " ids for index shape " +
                         shape_str(index_shape));
  }
  const std::size_t vocab = ts[0], d = ts[1];
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  Shape out_shape = index_shape;
  out_shape.push_back(d);
  Tensor<T> out(out_shape);
  const T* src = table.value().data().data();
  T* o = out.data().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy(src + ids[i] * d, src + (ids[i] + 1) * d, o + i * d);
  }
  const std::size_t it = table.id();
  auto saved = std::make_shared<std::vector<std::int32_t>>(ids.begin(), ids.end());
  return table.graph().record(
      std::move(out), {it},
      [it, saved, d](Graph<T>& gr, std::size_t self) {
        const T* go = gr.grad_buffer(self).data().data();
        T* dt = gr.grad_buffer(it).data().data();
        for (std::size_t i = 0; i < saved->size(); ++i) {
          kernels::axpy(T(1), go + i * d, dt + (*saved)[i] * d, d);
        }
      },
      "embedding");
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias) {
  const Shape& s = x.shape();
  const std::size_t d = s.back();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()) +
                         " do not match last axis of " + shape_str(s));
  }
  const std::size_t rows = x.value().size() / d;
  Tensor<T> out(s);
  auto xhat = std::make_shared<std::vector<T>>(x.value().size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  const T* px = x.value().data().data();
  const auto g = gain.value().data();
  const auto b = bias.value().data();
  T* po = out.data().data();
  std::vector<T> ones(d, T(1)), zeros(d, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    std::span<const T> row(px + r * d, d);
    std::span<T> xh(xhat->data() + r * d, d);
    (*rstd)[r] = kernels::layer_norm_row<T>(row, ones, zeros, xh);
    for (std::size_t i = 0; i < d; ++i) po[r * d + i] = xh[i] * g[i] + b[i];
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.graph().record(
      std::move(out), {ix, ig, ib},
      [ix, ig, ib, xhat, rstd, rows, d](Graph<T>& gr, std::size_t self) {
        const T* go = gr.grad_buffer(self).data().data();
        const T* g = gr.value(ig).data().data();
        if (gr.requires_grad(ig) || gr.requires_grad(ib)) {
          T* dg = gr.requires_grad(ig) ? gr.grad_buffer(ig).data().data() : nullptr;
          T* db = gr.requires_grad(ib) ? gr.grad_buffer(ib).data().data() : nullptr;
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < d; ++i) {
              if (dg) dg[i] += go[r * d + i] * (*xhat)[r * d + i];
              if (db) db[i] += go[r * d + i];
            }
          }
        }
        if (!gr.requires_grad(ix)) return;
        T* dx = gr.grad_buffer(ix).data().data();
        std::vector<T> dxh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* xh = xhat->data() + r * d;
          T m1 = 0, m2 = 0;
          for (std::size_t i = 0; i < d; ++i) {
            dxh[i] = go[r * d + i] * g[i];
            m1 += dxh[i];
            m2 += dxh[i] * xh[i];
          }
          m1 /= T(d);
          m2 /= T(d);
          const T rs = (*rstd)[r];
          for (std::size_t i = 0; i < d; ++i) dx[r * d + i] += rs * (dxh[i] - m1 - xh[i] * m2);
        }
      },
      "layer_norm");
}

template <typename T>
Var<T> gelu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = kernels::gelu(v);
  const std::size_t ix = x.id();
  return x.graph().record(
      std::move(out), {ix},
      [ix](Graph<T>& gr, std::size_t self) {
        const Tensor<T>& go = gr.grad_buffer(self);
        const Tensor<T>& xv = gr.value(ix);
        auto d = gr.grad_buffer(ix).data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i] * kernels::gelu_grad(xv[i]);
      },
      "gelu");
}

template <typename T>
Var<T> softmax_masked(Var<T> logits, const Mask& mask) {
  const Shape& s = logits.shape();
  const Shape& ms = mask.shape();
  const std::size_t n = s.back();
  if (ms.size() > s.size() || ms.back() != n) {
    throw DimensionError("softmax_masked: mask " + shape_str(ms) + " does not fit logits " + shape_str(s));
  }
  const Shape lead(s.begin(), s.end() - 1);
  const Shape mlead(ms.begin(), ms.end() - 1);
  const Shape out_lead = broadcast_shapes(lead.empty() ? Shape{1} : lead, mlead.empty() ? Shape{1} : mlead);
  if (numel(out_lead) != numel(lead.empty() ? Shape{1} : lead)) {
    throw DimensionError("softmax_masked: mask " + shape_str(ms) + " does not broadcast to " + shape_str(s));
  }
  const std::size_t rows = logits.value().size() / n;
  std::vector<std::size_t> mrow(rows, 0);
  if (!mlead.empty() && !lead.empty()) {
    BroadcastIndexer(lead, mlead).for_each([&](std::size_t o, std::size_t i) { mrow[o] = i; });
  }
  Tensor<T> out(s);
  const T* x = logits.value().data().data();
  const std::uint8_t* m = mask.data().data();
  T* o = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * n;
    const std::uint8_t* mr = m + mrow[r] * n;
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (mr[j]) {
        mx = std::max(mx, xr[j]);
        any = true;
      }
    }
    if (!any) throw DegenerateError("softmax_masked: row " + std::to_string(r) + " is fully masked");
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const T e = mr[j] ? std::exp(xr[j] - mx) : T(0);
      o[r * n + j] = e;
      total += e;
    }
    for (std::size_t j = 0; j < n; ++j) o[r * n + j] /= total;
  }
  const std::size_t il = logits.id();
  return logits.graph().record(
      std::move(out), {il},
      [il, n, rows](Graph<T>& gr, std::size_t self) {
        const T* go = gr.grad_buffer(self).data().data();
        const T* p = gr.value(self).data().data();
        T* dx = gr.grad_buffer(il).data().data();
        for (std::size_t r = 0; r < rows; ++r) {
          T dotp = 0;
          for (std::size_t j = 0; j < n; ++j) dotp += p[r * n + j] * go[r * n + j];
          for (std::size_t j = 0; j < n; ++j) dx[r * n + j] += p[r * n + j] * (go[r * n + j] - dotp);
        }
      },
      "softmax_masked");
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::int32_t> targets, std::span<const std::uint8_t> keep) {
  const Shape& s = logits.shape();
  const std::size_t vocab = s.back();
  const std::size_t rows = logits.value().size() / vocab;
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " + shape_str(s));
  }
  if (!keep.empty() && keep.size() != rows) {
    throw DimensionError("cross_entropy: ignore mask length " + std::to_string(keep.size()) + " for " +
                         std::to_string(rows) + " rows");
  }
  const T* x = logits.value().data().data();
  std::size_t count = 0;
  double total = 0;
  auto probs = std::make_shared<std::vector<T>>(logits.value().size(), T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    if (!keep.empty() && !keep[r]) continue;
    const auto t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
    const T* xr = x + r * vocab;
    const T mx = *std::max_element(xr, xr + vocab);
    T z = 0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(xr[j] - mx);
    for (std::size_t j = 0; j < vocab; ++j) (*probs)[r * vocab + j] = std::exp(xr[j] - mx) / z;
    total += static_cast<double>(std::log(z) + mx - xr[t]);
    ++count;
  }
  if (count == 0) throw DegenerateError("cross_entropy: every position is ignored");
  auto kept = std::make_shared<std::vector<std::uint8_t>>(keep.begin(), keep.end());
  auto tgt = std::make_shared<std::vector<std::int32_t>>(targets.begin(), targets.end());
  const std::size_t il = logits.id();
  return logits.graph().record(
      Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(count))), {il},
      [il, probs, kept, tgt, rows, vocab, count](Graph<T>& gr, std::size_t self) {
        const T go = gr.grad_buffer(self)[0] / T(count);
        T* dx = gr.grad_buffer(il).data().data();
        for (std::size_t r = 0; r < rows; ++r) {
          if (!kept->empty() && !(*kept)[r]) continue;
          for (std::size_t j = 0; j < vocab; ++j) dx[r * vocab + j] += go * (*probs)[r * vocab + j];
          dx[r * vocab + (*tgt)[r]] -= go;
        }
      },
      "cross_entropy");
}

template <typename T>
Var<T> sum(Var<T> a) {
  T total = 0;
  for (auto v : a.value().data()) total += v;
  const std::size_t ia = a.id();
  return a.graph().record(
      Tensor<T>::scalar(total), {ia},
      [ia](Graph<T>& gr, std::size_t self) {
        const T go = gr.grad_buffer(self)[0];
        for (auto& d : gr.grad_buffer(ia).data()) d += go;
      },
      "sum");
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / T(a.value().size()));
}

#define LGA_INSTANTIATE_OPS(T)                                                                           \
  template Var<T> add(Var<T>, Var<T>);                                                                   \
  template Var<T> sub(Var<T>, Var<T>);                                                                   \
  template Var<T> mul(Var<T>, Var<T>);                                                                   \
  template Var<T> scale(Var<T>, T);                                                                      \
  template Var<T> matmul(Var<T>, Var<T>);                                                                \
  template Var<T> permute(Var<T>, const std::vector<std::size_t>&);                                      \
  template Var<T> transpose(Var<T>);                                                                     \
  template Var<T> reshape(Var<T>, Shape);                                                                \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                                       \
  template Var<T> pad(Var<T>, std::size_t, std::size_t, std::size_t);                                    \
  template Var<T> slice(Var<T>, std::size_t, std::size_t, std::size_t);                                  \
  template Var<T> embedding(Var<T>, std::span<const std::int32_t>, const Shape&);                        \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>);                                                    \
  template Var<T> gelu(Var<T>);                                                                          \
  template Var<T> softmax_masked(Var<T>, const Mask&);                                                   \
  template Var<T> cross_entropy(Var<T>, std::span<const std::int32_t>, std::span<const std::uint8_t>); \
  template Var<T> sum(Var<T>);                                                                           \
  template Var<T> mean(Var<T>);

LGA_INSTANTIATE_OPS(float)
LGA_INSTANTIATE_OPS(double)

}  // namespace lga
