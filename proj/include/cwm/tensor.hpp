#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
// Single-threaded by design: evaluation and gradient accumulation run in a
// fixed order so identical seeds give bit-identical results.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

namespace cwm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a, const Shape& b) {
    throw std::invalid_argument("cwm: " + op + ": incompatible shapes " + shape_str(a) +
                                " and " + shape_str(b));
}

template <typename T>
struct NodeT {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated by backward()
    bool requires_grad = false;
    std::vector<std::shared_ptr<NodeT>> parents;
    std::function<void(NodeT&)> backprop;
    const char* op = "leaf";

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

template <typename T>
class TensorT {
public:
    using Scalar = T;

    TensorT() : node_(nullptr) {}

    explicit TensorT(Shape shape, T fill = T(0), bool requires_grad = false)
        : node_(std::make_shared<NodeT<T>>()) {
        check_shape(shape);
        node_->shape = std::move(shape);
        node_->value.assign(shape_numel(node_->shape), fill);
        node_->requires_grad = requires_grad;
    }

    TensorT(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<NodeT<T>>()) {
        check_shape(shape);
        if (data.size() != shape_numel(shape))
            throw std::invalid_argument("cwm: tensor data size " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static TensorT scalar(T v, bool requires_grad = false) {
        return TensorT(Shape{1}, std::vector<T>{v}, requires_grad);
    }

    bool valid() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<const T> data() const { return {node_->value.data(), node_->value.size()}; }
    // In-place mutation is reserved for leaf updates (optimizer steps, loading).
    std::span<T> data_mut() { return {node_->value.data(), node_->value.size()}; }

    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    std::span<const T> grad() const {
        if (!has_grad())
            throw std::runtime_error("cwm: tensor has no gradient (not a traversed leaf?)");
        return {node_->grad.data(), node_->grad.size()};
    }

    T item() const {
        if (numel() != 1) throw std::invalid_argument("cwm: item() on non-scalar " + shape_str(shape()));
        return node_->value[0];
    }

    TensorT detach() const {
        TensorT out(node_->shape, node_->value, false);
        return out;
    }

    std::shared_ptr<NodeT<T>> node() const { return node_; }

    static TensorT from_node(std::shared_ptr<NodeT<T>> n) {
        TensorT t;
        t.node_ = std::move(n);
        return t;
    }

private:
    static void check_shape(const Shape& s) {
        for (std::size_t d : s)
            if (d == 0) throw std::invalid_argument("cwm: zero extent in shape " + shape_str(s));
    }

    std::shared_ptr<NodeT<T>> node_;
};

using TensorF = TensorT<float>;
using TensorD = TensorT<double>;

namespace detail {

template <typename T>
std::shared_ptr<NodeT<T>> make_op_node(const char* op, Shape shape,
                                       std::initializer_list<TensorT<T>> inputs) {
    auto n = std::make_shared<NodeT<T>>();
    n->op = op;
    n->shape = std::move(shape);
    n->value.resize(shape_numel(n->shape));
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in.requires_grad();
    n->requires_grad = rg;
    if (rg)
        for (const auto& in : inputs) n->parents.push_back(in.node());
    return n;
}

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

// C (m x n), optionally accumulating, from op(A) * op(B).
template <typename T>
void gemm(T* c, const T* a, const T* b, std::size_t m, std::size_t n, std::size_t k,
          bool ta, bool tb, bool accumulate) {
    ECMap<T> A(a, ta ? k : m, ta ? m : k);
    ECMap<T> B(b, tb ? n : k, tb ? k : n);
    EMap<T> C(c, m, n);
    if (!ta && !tb) {
        if (accumulate) C.noalias() += A * B; else C.noalias() = A * B;
    } else if (ta && !tb) {
        if (accumulate) C.noalias() += A.transpose() * B; else C.noalias() = A.transpose() * B;
    } else if (!ta && tb) {
        if (accumulate) C.noalias() += A * B.transpose(); else C.noalias() = A * B.transpose();
    } else {
        if (accumulate) C.noalias() += A.transpose() * B.transpose();
        else C.noalias() = A.transpose() * B.transpose();
    }
}

// Broadcast layout: rhs shape must equal a trailing suffix of lhs shape, or be
// a scalar. Returns the repeat count (lhs numel / rhs numel).
template <typename T>
std::size_t broadcast_repeats(const char* op, const TensorT<T>& a, const TensorT<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (b.numel() == 1) return a.numel();
    if (sb.size() > sa.size()) shape_error(op, sa, sb);
    for (std::size_t i = 0; i < sb.size(); ++i)
        if (sb[sb.size() - 1 - i] != sa[sa.size() - 1 - i]) shape_error(op, sa, sb);
    return a.numel() / b.numel();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (with trailing-suffix broadcast of the rhs)
// ---------------------------------------------------------------------------

template <typename T, typename FwdFn, typename BwdFn>
TensorT<T> binary_broadcast_op(const char* name, const TensorT<T>& a, const TensorT<T>& b,
                               FwdFn fwd, BwdFn bwd) {
    const std::size_t reps = detail::broadcast_repeats(name, a, b);
    const std::size_t bn = b.numel();
    auto n = detail::make_op_node<T>(name, a.shape(), {a, b});
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = n->value.data();
    for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < bn; ++i) po[r * bn + i] = fwd(pa[r * bn + i], pb[i]);
    if (n->requires_grad) {
        auto an = a.node();
        auto bn_node = b.node();
        n->backprop = [an, bn_node, reps, bn, bwd](NodeT<T>& out) {
            const bool ga = an->requires_grad;
            const bool gb = bn_node->requires_grad;
            if (ga) an->ensure_grad();
            if (gb) bn_node->ensure_grad();
            for (std::size_t r = 0; r < reps; ++r)
                for (std::size_t i = 0; i < bn; ++i) {
                    const std::size_t j = r * bn + i;
                    T da, db;
                    bwd(an->value[j], bn_node->value[i], out.grad[j], da, db);
                    if (ga) an->grad[j] += da;
                    if (gb) bn_node->grad[i] += db;
                }
        };
    }
    return TensorT<T>::from_node(n);
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_broadcast_op<T>(
        "add", a, b, [](T x, T y) { return x + y; },
        [](T, T, T g, T& da, T& db) { da = g; db = g; });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_broadcast_op<T>(
        "sub", a, b, [](T x, T y) { return x - y; },
        [](T, T, T g, T& da, T& db) { da = g; db = -g; });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_broadcast_op<T>(
        "mul", a, b, [](T x, T y) { return x * y; },
        [](T x, T y, T g, T& da, T& db) { da = g * y; db = g * x; });
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T s) {
    auto n = detail::make_op_node<T>("scale", a.shape(), {a});
    const T* pa = a.data().data();
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = pa[i] * s;
    if (n->requires_grad) {
        auto an = a.node();
        n->backprop = [an, s](NodeT<T>& out) {
            an->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i) an->grad[i] += out.grad[i] * s;
        };
    }
    return TensorT<T>::from_node(n);
}

template <typename T>
TensorT<T> operator+(const TensorT<T>& a, const TensorT<T>& b) { return add(a, b); }
template <typename T>
TensorT<T> operator-(const TensorT<T>& a, const TensorT<T>& b) { return sub(a, b); }
template <typename T>
TensorT<T> operator*(const TensorT<T>& a, const TensorT<T>& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Matrix multiply: 2D x 2D, batched 3D x 3D, and 3D x 2D (shared rhs)
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b, bool trans_a = false,
                  bool trans_b = false) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();

    auto dims2 = [](const Shape& s, bool tr, std::size_t off) {
        return std::pair<std::size_t, std::size_t>{s[off + (tr ? 1 : 0)], s[off + (tr ? 0 : 1)]};
    };

    if (sa.size() == 2 && sb.size() == 2) {
        auto [m, k] = dims2(sa, trans_a, 0);
        auto [k2, nn] = dims2(sb, trans_b, 0);
        if (k != k2) shape_error("matmul", sa, sb);
        auto n = detail::make_op_node<T>("matmul", Shape{m, nn}, {a, b});
        detail::gemm(n->value.data(), a.data().data(), b.data().data(), m, nn, k, trans_a,
                     trans_b, false);
        if (n->requires_grad) {
            auto an = a.node();
            auto bn = b.node();
            n->backprop = [an, bn, m, nn, k, trans_a, trans_b](NodeT<T>& out) {
                const T* g = out.grad.data();
                if (an->requires_grad) {
                    an->ensure_grad();
                    // dA = g * op(B)^T   (or op(B) * g^T when A was transposed)
                    if (!trans_a)
                        detail::gemm(an->grad.data(), g, bn->value.data(), m, k, nn, false,
                                     !trans_b, true);
                    else
                        detail::gemm(an->grad.data(), bn->value.data(), g, k, m, nn, trans_b,
                                     true, true);
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    if (!trans_b)
                        detail::gemm(bn->grad.data(), an->value.data(), g, k, nn, m, !trans_a,
                                     false, true);
                    else
                        detail::gemm(bn->grad.data(), g, an->value.data(), nn, k, m, true,
                                     trans_a, true);
                }
            };
        }
        return TensorT<T>::from_node(n);
    }

    if (sa.size() == 3 && sb.size() == 2) {
        // (B,M,K) x (K,N): flatten the batch into rows.
        if (trans_a) throw std::invalid_argument("cwm: matmul: trans_a unsupported for 3D x 2D");
        auto [k2, nn] = dims2(sb, trans_b, 0);
        if (sa[2] != k2) shape_error("matmul", sa, sb);
        const std::size_t bsz = sa[0], m = sa[1], k = sa[2];
        auto n = detail::make_op_node<T>("matmul", Shape{bsz, m, nn}, {a, b});
        detail::gemm(n->value.data(), a.data().data(), b.data().data(), bsz * m, nn, k, false,
                     trans_b, false);
        if (n->requires_grad) {
            auto an = a.node();
            auto bn = b.node();
            n->backprop = [an, bn, bsz, m, nn, k, trans_b](NodeT<T>& out) {
                const T* g = out.grad.data();
                if (an->requires_grad) {
                    an->ensure_grad();
                    detail::gemm(an->grad.data(), g, bn->value.data(), bsz * m, k, nn, false,
                                 !trans_b, true);
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    if (!trans_b)
                        detail::gemm(bn->grad.data(), an->value.data(), g, k, nn, bsz * m, true,
                                     false, true);
                    else
                        detail::gemm(bn->grad.data(), g, an->value.data(), nn, k, bsz * m, true,
                                     false, true);
                }
            };
        }
        return TensorT<T>::from_node(n);
    }

    if (sa.size() == 3 && sb.size() == 3) {
        if (sa[0] != sb[0]) shape_error("matmul", sa, sb);
        auto [m, k] = dims2(sa, trans_a, 1);
        auto [k2, nn] = dims2(sb, trans_b, 1);
        if (k != k2) shape_error("matmul", sa, sb);
        const std::size_t bsz = sa[0];
        auto n = detail::make_op_node<T>("matmul", Shape{bsz, m, nn}, {a, b});
        const std::size_t stra = sa[1] * sa[2], strb = sb[1] * sb[2], stro = m * nn;
        for (std::size_t i = 0; i < bsz; ++i)
            detail::gemm(n->value.data() + i * stro, a.data().data() + i * stra,
                         b.data().data() + i * strb, m, nn, k, trans_a, trans_b, false);
        if (n->requires_grad) {
            auto an = a.node();
            auto bn = b.node();
            n->backprop = [an, bn, bsz, m, nn, k, stra, strb, stro, trans_a,
                           trans_b](NodeT<T>& out) {
                if (an->requires_grad) an->ensure_grad();
                if (bn->requires_grad) bn->ensure_grad();
                for (std::size_t i = 0; i < bsz; ++i) {
                    const T* g = out.grad.data() + i * stro;
                    if (an->requires_grad) {
                        T* da = an->grad.data() + i * stra;
                        const T* bv = bn->value.data() + i * strb;
                        if (!trans_a) detail::gemm(da, g, bv, m, k, nn, false, !trans_b, true);
                        else detail::gemm(da, bv, g, k, m, nn, trans_b, true, true);
                    }
                    if (bn->requires_grad) {
                        T* db = bn->grad.data() + i * strb;
                        const T* av = an->value.data() + i * stra;
                        if (!trans_b) detail::gemm(db, av, g, k, nn, m, !trans_a, false, true);
                        else detail::gemm(db, g, av, nn, k, m, true, trans_a, true);
                    }
                }
            };
        }
        return TensorT<T>::from_node(n);
    }

    shape_error("matmul", sa, sb);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        shape_error("reshape", a.shape(), new_shape);
    auto n = detail::make_op_node<T>("reshape", std::move(new_shape), {a});
    std::copy(a.data().begin(), a.data().end(), n->value.begin());
    if (n->requires_grad) {
        auto an = a.node();
        n->backprop = [an](NodeT<T>& out) {
            an->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i) an->grad[i] += out.grad[i];
        };
    }
    return TensorT<T>::from_node(n);
}

namespace detail {
inline std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}
}  // namespace detail

template <typename T>
TensorT<T> transpose(const TensorT<T>& a, const std::vector<std::size_t>& perm) {
    const Shape& sa = a.shape();
    if (perm.size() != sa.size())
        throw std::invalid_argument("cwm: transpose: perm rank " + std::to_string(perm.size()) +
                                    " vs tensor rank " + std::to_string(sa.size()));
    Shape out_shape(sa.size());
    std::vector<bool> seen(sa.size(), false);
    for (std::size_t i = 0; i < perm.size(); ++i) {
        if (perm[i] >= sa.size() || seen[perm[i]])
            throw std::invalid_argument("cwm: transpose: invalid permutation");
        seen[perm[i]] = true;
        out_shape[i] = sa[perm[i]];
    }
    auto n = detail::make_op_node<T>("transpose", out_shape, {a});
    const auto in_str = detail::strides_of(sa);
    // source stride per output dim; odometer iteration avoids per-element
    // index arithmetic, and a unit inner stride turns rows into memcpy
    std::vector<std::size_t> sstr(out_shape.size());
    for (std::size_t d = 0; d < out_shape.size(); ++d) sstr[d] = in_str[perm[d]];

    const std::size_t rank = out_shape.size();
    const std::size_t inner = out_shape[rank - 1];
    const std::size_t inner_stride = sstr[rank - 1];
    const std::size_t rows = a.numel() / inner;

    auto walk = [rank, inner, inner_stride, rows, out_shape, sstr](const T* src_base, T* dst,
                                                                   bool accumulate, T* acc_dst) {
        std::vector<std::size_t> idx(rank, 0);
        std::size_t src = 0;
        for (std::size_t row = 0; row < rows; ++row) {
            if (!accumulate) {
                T* out_row = dst + row * inner;
                if (inner_stride == 1) {
                    std::copy(src_base + src, src_base + src + inner, out_row);
                } else {
                    std::size_t s = src;
                    for (std::size_t i = 0; i < inner; ++i, s += inner_stride)
                        out_row[i] = src_base[s];
                }
            } else {
                const T* in_row = src_base + row * inner;
                std::size_t s = src;
                for (std::size_t i = 0; i < inner; ++i, s += inner_stride)
                    acc_dst[s] += in_row[i];
            }
            // odometer over the outer dims
            for (std::size_t d = rank - 1; d-- > 0;) {
                ++idx[d];
                src += sstr[d];
                if (idx[d] < out_shape[d]) break;
                src -= out_shape[d] * sstr[d];
                idx[d] = 0;
            }
        }
    };

    walk(a.data().data(), n->value.data(), false, nullptr);
    if (n->requires_grad) {
        auto an = a.node();
        n->backprop = [an, walk](NodeT<T>& out) {
            an->ensure_grad();
            walk(out.grad.data(), nullptr, true, an->grad.data());
        };
    }
    return TensorT<T>::from_node(n);
}

// ---------------------------------------------------------------------------
// Gather / scatter along one axis (integer indices)
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void axis_split(const TensorT<T>& a, std::size_t axis, std::size_t& outer, std::size_t& n,
                std::size_t& inner) {
    const Shape& s = a.shape();
    if (axis >= s.size())
        throw std::invalid_argument("cwm: axis " + std::to_string(axis) + " out of range for " +
                                    shape_str(s));
    outer = 1;
    inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    n = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

template <typename T>
TensorT<T> gather_axis(const TensorT<T>& a, std::size_t axis,
                       const std::vector<std::size_t>& indices) {
    std::size_t outer, cnt, inner;
    detail::axis_split(a, axis, outer, cnt, inner);
    if (indices.empty()) throw std::invalid_argument("cwm: gather_axis: empty index list");
    for (std::size_t ix : indices)
        if (ix >= cnt)
            throw std::invalid_argument("cwm: gather_axis: index " + std::to_string(ix) +
                                        " out of range [0," + std::to_string(cnt) + ")");
    Shape out_shape = a.shape();
    out_shape[axis] = indices.size();
    auto n = detail::make_op_node<T>("gather", out_shape, {a});
    const T* pa = a.data().data();
    T* po = n->value.data();
    const std::size_t k = indices.size();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < k; ++j)
            std::copy(pa + (o * cnt + indices[j]) * inner, pa + (o * cnt + indices[j] + 1) * inner,
                      po + (o * k + j) * inner);
    if (n->requires_grad) {
        auto an = a.node();
        n->backprop = [an, indices, outer, cnt, inner](NodeT<T>& out) {
            an->ensure_grad();
            const std::size_t k = indices.size();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t j = 0; j < k; ++j) {
                    T* dst = an->grad.data() + (o * cnt + indices[j]) * inner;
                    const T* src = out.grad.data() + (o * k + j) * inner;
                    for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                }
        };
    }
    return TensorT<T>::from_node(n);
}

// Returns base with base[..., indices[j], ...] replaced by rows[..., j, ...].
// Indices must be distinct.
template <typename T>
TensorT<T> scatter_axis(const TensorT<T>& base, std::size_t axis,
                        const std::vector<std::size_t>& indices, const TensorT<T>& rows) {
    std::size_t outer, cnt, inner;
    detail::axis_split(base, axis, outer, cnt, inner);
    Shape expect = base.shape();
    expect[axis] = indices.size();
    if (rows.shape() != expect) shape_error("scatter_axis", rows.shape(), expect);
    {
        std::vector<bool> seen(cnt, false);
        for (std::size_t ix : indices) {
            if (ix >= cnt)
                throw std::invalid_argument("cwm: scatter_axis: index out of range");
            if (seen[ix]) throw std::invalid_argument("cwm: scatter_axis: duplicate index");
            seen[ix] = true;
        }
    }
    auto n = detail::make_op_node<T>("scatter", base.shape(), {base, rows});
    std::copy(base.data().begin(), base.data().end(), n->value.begin());
    const T* pr = rows.data().data();
    const std::size_t k = indices.size();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < k; ++j)
            std::copy(pr + (o * k + j) * inner, pr + (o * k + j + 1) * inner,
                      n->value.data() + (o * cnt + indices[j]) * inner);
    if (n->requires_grad) {
        auto bn = base.node();
        auto rn = rows.node();
        n->backprop = [bn, rn, indices, outer, cnt, inner](NodeT<T>& out) {
            const std::size_t k = indices.size();
            if (bn->requires_grad) {
                bn->ensure_grad();
                std::vector<bool> replaced(cnt, false);
                for (std::size_t ix : indices) replaced[ix] = true;
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t r = 0; r < cnt; ++r) {
                        if (replaced[r]) continue;
                        T* dst = bn->grad.data() + (o * cnt + r) * inner;
                        const T* src = out.grad.data() + (o * cnt + r) * inner;
                        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                    }
            }
            if (rn->requires_grad) {
                rn->ensure_grad();
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t j = 0; j < k; ++j) {
                        T* dst = rn->grad.data() + (o * k + j) * inner;
                        const T* src = out.grad.data() + (o * cnt + indices[j]) * inner;
                        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                    }
            }
        };
    }
    return TensorT<T>::from_node(n);
}

// ---------------------------------------------------------------------------
// Nonlinearities and reductions
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> softmax_last(const TensorT<T>& a) {
    const Shape& s = a.shape();
    if (s.empty()) throw std::invalid_argument("cwm: softmax_last: rank-0 input");
    const std::size_t d = s.back();
    const std::size_t rows = a.numel() / d;
    auto n = detail::make_op_node<T>("softmax", s, {a});
    const T* pa = a.data().data();
    T* po = n->value.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = pa + r * d;
        T* y = po + r * d;
        T mx = x[0];
        for (std::size_t i = 1; i < d; ++i) mx = std::max(mx, x[i]);
        T sum = T(0);
        for (std::size_t i = 0; i < d; ++i) {
            y[i] = std::exp(x[i] - mx);
            sum += y[i];
        }
        const T inv = T(1) / sum;
        for (std::size_t i = 0; i < d; ++i) y[i] *= inv;
    }
    if (n->requires_grad) {
        auto an = a.node();
        n->backprop = [an, rows, d](NodeT<T>& out) {
            an->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* y = out.value.data() + r * d;
                const T* g = out.grad.data() + r * d;
                T dot = T(0);
                for (std::size_t i = 0; i < d; ++i) dot += y[i] * g[i];
                T* da = an->grad.data() + r * d;
                for (std::size_t i = 0; i < d; ++i) da[i] += y[i] * (g[i] - dot);
            }
        };
    }
    return TensorT<T>::from_node(n);
}

// Layer normalization over the last axis with affine parameters.
// Zero-variance convention: rows with variance < 1e-12 normalize to zero.
template <typename T>
TensorT<T> layernorm_last(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                          T eps = T(1e-6)) {
    const Shape& s = x.shape();
    const std::size_t d = s.back();
    if (gamma.shape() != Shape{d}) shape_error("layernorm gamma", gamma.shape(), Shape{d});
    if (beta.shape() != Shape{d}) shape_error("layernorm beta", beta.shape(), Shape{d});
    const std::size_t rows = x.numel() / d;
    auto n = detail::make_op_node<T>("layernorm", s, {x, gamma, beta});
    std::vector<T> xhat(x.numel());
    std::vector<T> inv_sigma(rows);
    const T* px = x.data().data();
    const T* pg = gamma.data().data();
    const T* pb = beta.data().data();
    T* po = n->value.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = px + r * d;
        T mu = T(0);
        for (std::size_t i = 0; i < d; ++i) mu += xr[i];
        mu /= T(d);
        T var = T(0);
        for (std::size_t i = 0; i < d; ++i) {
            const T c = xr[i] - mu;
            var += c * c;
        }
        var /= T(d);
        if (var < T(1e-12)) {
            inv_sigma[r] = T(0);
            for (std::size_t i = 0; i < d; ++i) {
                xhat[r * d + i] = T(0);
                po[r * d + i] = pb[i];
            }
        } else {
            const T is = T(1) / std::sqrt(var + eps);
            inv_sigma[r] = is;
            for (std::size_t i = 0; i < d; ++i) {
                const T h = (xr[i] - mu) * is;
                xhat[r * d + i] = h;
                po[r * d + i] = h * pg[i] + pb[i];
            }
        }
    }
    if (n->requires_grad) {
        auto xn = x.node();
        auto gn = gamma.node();
        auto bn = beta.node();
        auto xh = std::make_shared<std::vector<T>>(std::move(xhat));
        auto is = std::make_shared<std::vector<T>>(std::move(inv_sigma));
        n->backprop = [xn, gn, bn, xh, is, rows, d](NodeT<T>& out) {
            if (xn->requires_grad) xn->ensure_grad();
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            const T* pg = gn->value.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* g = out.grad.data() + r * d;
                const T* h = xh->data() + r * d;
                if (gn->requires_grad)
                    for (std::size_t i = 0; i < d; ++i) gn->grad[i] += g[i] * h[i];
                if (bn->requires_grad)
                    for (std::size_t i = 0; i < d; ++i) bn->grad[i] += g[i];
                if (!xn->requires_grad) continue;
                const T isr = (*is)[r];
                if (isr == T(0)) continue;  // constant row: d(out)/d(x) == 0
                T sum_gg = T(0), sum_ggh = T(0);
                for (std::size_t i = 0; i < d; ++i) {
                    const T gg = g[i] * pg[i];
                    sum_gg += gg;
                    sum_ggh += gg * h[i];
                }
                const T inv_d = T(1) / T(d);
                T* dx = xn->grad.data() + r * d;
                for (std::size_t i = 0; i < d; ++i) {
                    const T gg = g[i] * pg[i];
                    dx[i] += isr * (gg - inv_d * sum_gg - h[i] * inv_d * sum_ggh);
                }
            }
        };
    }
    return TensorT<T>::from_node(n);
}

// GELU, tanh approximation. The tanh pass is vectorized through Eigen and
// cached for the backward rule.
template <typename T>
TensorT<T> gelu(const TensorT<T>& a) {
    auto n = detail::make_op_node<T>("gelu", a.shape(), {a});
    const T c0 = T(0.7978845608028654);  // sqrt(2/pi)
    const T c1 = T(0.044715);
    const std::size_t cnt = n->value.size();
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    Eigen::Map<const Arr> x(a.data().data(), cnt);
    auto tanh_u = std::make_shared<std::vector<T>>(cnt);
    Eigen::Map<Arr> t(tanh_u->data(), cnt);
    t = (c0 * (x + c1 * x.cube())).tanh();
    Eigen::Map<Arr> y(n->value.data(), cnt);
    y = T(0.5) * x * (T(1) + t);
    if (n->requires_grad) {
        auto an = a.node();
        n->backprop = [an, tanh_u, c0, c1, cnt](NodeT<T>& out) {
            an->ensure_grad();
            Eigen::Map<const Arr> x(an->value.data(), cnt);
            Eigen::Map<const Arr> t(tanh_u->data(), cnt);
            Eigen::Map<const Arr> g(out.grad.data(), cnt);
            Eigen::Map<Arr> dx(an->grad.data(), cnt);
            dx += g * (T(0.5) * (T(1) + t) +
                       T(0.5) * x * (T(1) - t.square()) * (c0 * (T(1) + T(3) * c1 * x.square())));
        };
    }
    return TensorT<T>::from_node(n);
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& a) {
    auto n = detail::make_op_node<T>("sigmoid", a.shape(), {a});
    const T* pa = a.data().data();
    for (std::size_t i = 0; i < n->value.size(); ++i) {
        const T x = pa[i];
        n->value[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                                : std::exp(x) / (T(1) + std::exp(x));
    }
    if (n->requires_grad) {
        auto an = a.node();
        n->backprop = [an](NodeT<T>& out) {
            an->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i) {
                const T y = out.value[i];
                an->grad[i] += out.grad[i] * y * (T(1) - y);
            }
        };
    }
    return TensorT<T>::from_node(n);
}

template <typename T>
TensorT<T> log(const TensorT<T>& a) {
    auto n = detail::make_op_node<T>("log", a.shape(), {a});
    const T* pa = a.data().data();
    for (std::size_t i = 0; i < n->value.size(); ++i) {
        if (!(pa[i] > T(0)))
            throw std::domain_error("cwm: log: non-positive input " + std::to_string(pa[i]));
        n->value[i] = std::log(pa[i]);
    }
    if (n->requires_grad) {
        auto an = a.node();
        n->backprop = [an](NodeT<T>& out) {
            an->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i)
                an->grad[i] += out.grad[i] / an->value[i];
        };
    }
    return TensorT<T>::from_node(n);
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& a) {
    auto n = detail::make_op_node<T>("sum", Shape{1}, {a});
    T s = T(0);
    for (T v : a.data()) s += v;
    n->value[0] = s;
    if (n->requires_grad) {
        auto an = a.node();
        n->backprop = [an](NodeT<T>& out) {
            an->ensure_grad();
            for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += out.grad[0];
        };
    }
    return TensorT<T>::from_node(n);
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& a) {
    return scale(sum_all(a), T(1) / T(a.numel()));
}

// Mean squared error over all elements.
template <typename T>
TensorT<T> mse(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape()) shape_error("mse", a.shape(), b.shape());
    auto n = detail::make_op_node<T>("mse", Shape{1}, {a, b});
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    const std::size_t cnt = a.numel();
    T s = T(0);
    for (std::size_t i = 0; i < cnt; ++i) {
        const T d = pa[i] - pb[i];
        s += d * d;
    }
    n->value[0] = s / T(cnt);
    if (n->requires_grad) {
        auto an = a.node();
        auto bn = b.node();
        n->backprop = [an, bn, cnt](NodeT<T>& out) {
            const T c = out.grad[0] * T(2) / T(cnt);
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (std::size_t i = 0; i < cnt; ++i) {
                const T d = c * (an->value[i] - bn->value[i]);
                if (an->requires_grad) an->grad[i] += d;
                if (bn->requires_grad) bn->grad[i] -= d;
            }
        };
    }
    return TensorT<T>::from_node(n);
}

// Numerically stable mean binary cross-entropy on logits.
template <typename T>
TensorT<T> sigmoid_bce(const TensorT<T>& logits, const TensorT<T>& targets) {
    if (logits.shape() != targets.shape())
        shape_error("sigmoid_bce", logits.shape(), targets.shape());
    auto n = detail::make_op_node<T>("sigmoid_bce", Shape{1}, {logits, targets});
    const T* pz = logits.data().data();
    const T* py = targets.data().data();
    const std::size_t cnt = logits.numel();
    T s = T(0);
    for (std::size_t i = 0; i < cnt; ++i) {
        const T z = pz[i];
        s += std::max(z, T(0)) - z * py[i] + std::log1p(std::exp(-std::abs(z)));
    }
    n->value[0] = s / T(cnt);
    if (n->requires_grad) {
        auto zn = logits.node();
        auto yn = targets.node();
        n->backprop = [zn, yn, cnt](NodeT<T>& out) {
            const T c = out.grad[0] / T(cnt);
            if (zn->requires_grad) {
                zn->ensure_grad();
                for (std::size_t i = 0; i < cnt; ++i) {
                    const T z = zn->value[i];
                    const T sig = z >= T(0) ? T(1) / (T(1) + std::exp(-z))
                                            : std::exp(z) / (T(1) + std::exp(z));
                    zn->grad[i] += c * (sig - yn->value[i]);
                }
            }
            if (yn->requires_grad) {
                yn->ensure_grad();
                for (std::size_t i = 0; i < cnt; ++i) yn->grad[i] += -c * zn->value[i];
            }
        };
    }
    return TensorT<T>::from_node(n);
}

// ---------------------------------------------------------------------------
// Reverse-mode backward pass
// ---------------------------------------------------------------------------

template <typename T>
void backward(const TensorT<T>& loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("cwm: backward: loss must be scalar, got " +
                                    shape_str(loss.shape()));
    if (!loss.requires_grad())
        throw std::invalid_argument("cwm: backward: loss does not require grad");

    // Iterative post-order DFS over the recorded graph.
    std::vector<NodeT<T>*> order;
    std::vector<std::pair<NodeT<T>*, std::size_t>> stack;
    std::unordered_set<NodeT<T>*> seen;
    stack.push_back({loss.node().get(), 0});
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodeT<T>* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (NodeT<T>* n : order) n->grad.assign(n->value.size(), T(0));
    loss.node()->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop(**it);
}

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

template <typename T, typename Rng>
TensorT<T> xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng,
                          bool requires_grad = true) {
    const T limit = std::sqrt(T(6) / T(fan_in + fan_out));
    std::uniform_real_distribution<T> dist(-limit, limit);
    std::vector<T> data(shape_numel(shape));
    for (T& v : data) v = dist(rng);
    return TensorT<T>(std::move(shape), std::move(data), requires_grad);
}

}  // namespace cwm
