#pragma once

// Reverse-mode autodiff over dense 64-bit float tensors. Graphs are built
// dynamically: every op returns a Var (shared node) holding its output value
// and a closure that scatters upstream gradient into its inputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "densefew/errors.hpp"

namespace densefew {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

struct Tensor {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<double> grad;  // empty unless populated by backward

    Tensor() = default;
    Tensor(Shape s, std::vector<double> v, bool rg = false)
        : shape(std::move(s)), values(std::move(v)), requires_grad(rg) {
        if (numel(shape) != static_cast<std::int64_t>(values.size()))
            throw ShapeError("tensor value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s, bool rg = false) {
        std::vector<double> v(static_cast<std::size_t>(numel(s)), 0.0);
        return Tensor(std::move(s), std::move(v), rg);
    }

    std::int64_t size() const { return static_cast<std::int64_t>(values.size()); }
};

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor t;
    std::vector<Var> inputs;
    std::function<void(Node&)> backprop;  // adds into inputs' grad buffers
    const char* op = "leaf";
    bool needs_grad = false;  // true if this node or any ancestor requires grad
    // scratch for fused ops that need forward byproducts during backward
    std::vector<double> aux;
    std::vector<std::int64_t> iaux;

    void ensure_grad() {
        if (t.grad.size() != t.values.size()) t.grad.assign(t.values.size(), 0.0);
    }
};

inline Var leaf(Tensor t) {
    auto n = std::make_shared<Node>();
    n->needs_grad = t.requires_grad;
    n->t = std::move(t);
    return n;
}

inline Var constant(Shape s, std::vector<double> v) { return leaf(Tensor(std::move(s), std::move(v), false)); }
inline Var scalar_const(double x) { return constant({1}, {x}); }

// Trainable leaf.
inline Var param(Shape s, std::vector<double> v) { return leaf(Tensor(std::move(s), std::move(v), true)); }

inline Var make_node(const char* op, Shape shape, std::vector<Var> inputs,
                     std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->op = op;
    n->t.shape = std::move(shape);
    n->t.values.resize(static_cast<std::size_t>(numel(n->t.shape)));
    n->inputs = std::move(inputs);
    for (const auto& in : n->inputs)
        if (in->needs_grad) n->needs_grad = true;
    if (n->needs_grad) n->backprop = std::move(backprop);
    return n;
}

// ---------------------------------------------------------------------------
// elementwise binary ops, with scalar broadcast when one operand has numel 1

namespace detail {

enum class Broadcast { None, LeftScalar, RightScalar };

inline Broadcast binary_broadcast(const char* op, const Var& a, const Var& b) {
    if (a->t.shape == b->t.shape) return Broadcast::None;
    if (a->t.size() == 1) return Broadcast::LeftScalar;
    if (b->t.size() == 1) return Broadcast::RightScalar;
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a->t.shape) +
                     " and " + shape_str(b->t.shape));
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
    auto bc = detail::binary_broadcast("add", a, b);
    Shape out = bc == detail::Broadcast::LeftScalar ? b->t.shape : a->t.shape;
    auto n = make_node("add", out, {a, b}, [bc](Node& self) {
        Node& A = *self.inputs[0];
        Node& B = *self.inputs[1];
        if (A.needs_grad) {
            A.ensure_grad();
            if (bc == detail::Broadcast::LeftScalar)
                for (double g : self.t.grad) A.t.grad[0] += g;
            else
                for (std::size_t i = 0; i < self.t.grad.size(); ++i) A.t.grad[i] += self.t.grad[i];
        }
        if (B.needs_grad) {
            B.ensure_grad();
            if (bc == detail::Broadcast::RightScalar)
                for (double g : self.t.grad) B.t.grad[0] += g;
            else
                for (std::size_t i = 0; i < self.t.grad.size(); ++i) B.t.grad[i] += self.t.grad[i];
        }
    });
    const auto& av = a->t.values;
    const auto& bv = b->t.values;
    auto& ov = n->t.values;
    for (std::size_t i = 0; i < ov.size(); ++i)
        ov[i] = av[bc == detail::Broadcast::LeftScalar ? 0 : i] +
                bv[bc == detail::Broadcast::RightScalar ? 0 : i];
    return n;
}

inline Var sub(const Var& a, const Var& b) {
    auto bc = detail::binary_broadcast("sub", a, b);
    Shape out = bc == detail::Broadcast::LeftScalar ? b->t.shape : a->t.shape;
    auto n = make_node("sub", out, {a, b}, [bc](Node& self) {
        Node& A = *self.inputs[0];
        Node& B = *self.inputs[1];
        if (A.needs_grad) {
            A.ensure_grad();
            if (bc == detail::Broadcast::LeftScalar)
                for (double g : self.t.grad) A.t.grad[0] += g;
            else
                for (std::size_t i = 0; i < self.t.grad.size(); ++i) A.t.grad[i] += self.t.grad[i];
        }
        if (B.needs_grad) {
            B.ensure_grad();
            if (bc == detail::Broadcast::RightScalar)
                for (double g : self.t.grad) B.t.grad[0] -= g;
            else
                for (std::size_t i = 0; i < self.t.grad.size(); ++i) B.t.grad[i] -= self.t.grad[i];
        }
    });
    const auto& av = a->t.values;
    const auto& bv = b->t.values;
    auto& ov = n->t.values;
    for (std::size_t i = 0; i < ov.size(); ++i)
        ov[i] = av[bc == detail::Broadcast::LeftScalar ? 0 : i] -
                bv[bc == detail::Broadcast::RightScalar ? 0 : i];
    return n;
}

inline Var mul(const Var& a, const Var& b) {
    auto bc = detail::binary_broadcast("mul", a, b);
    Shape out = bc == detail::Broadcast::LeftScalar ? b->t.shape : a->t.shape;
    auto n = make_node("mul", out, {a, b}, [bc](Node& self) {
        Node& A = *self.inputs[0];
        Node& B = *self.inputs[1];
        const auto& av = A.t.values;
        const auto& bv = B.t.values;
        if (A.needs_grad) {
            A.ensure_grad();
            for (std::size_t i = 0; i < self.t.grad.size(); ++i) {
                double g = self.t.grad[i] * bv[bc == detail::Broadcast::RightScalar ? 0 : i];
                A.t.grad[bc == detail::Broadcast::LeftScalar ? 0 : i] += g;
            }
        }
        if (B.needs_grad) {
            B.ensure_grad();
            for (std::size_t i = 0; i < self.t.grad.size(); ++i) {
                double g = self.t.grad[i] * av[bc == detail::Broadcast::LeftScalar ? 0 : i];
                B.t.grad[bc == detail::Broadcast::RightScalar ? 0 : i] += g;
            }
        }
    });
    const auto& av = a->t.values;
    const auto& bv = b->t.values;
    auto& ov = n->t.values;
    for (std::size_t i = 0; i < ov.size(); ++i)
        ov[i] = av[bc == detail::Broadcast::LeftScalar ? 0 : i] *
                bv[bc == detail::Broadcast::RightScalar ? 0 : i];
    return n;
}

inline Var div(const Var& a, const Var& b) {
    auto bc = detail::binary_broadcast("div", a, b);
    Shape out = bc == detail::Broadcast::LeftScalar ? b->t.shape : a->t.shape;
    auto n = make_node("div", out, {a, b}, [bc](Node& self) {
        Node& A = *self.inputs[0];
        Node& B = *self.inputs[1];
        const auto& av = A.t.values;
        const auto& bv = B.t.values;
        if (A.needs_grad) {
            A.ensure_grad();
            for (std::size_t i = 0; i < self.t.grad.size(); ++i) {
                double d = bv[bc == detail::Broadcast::RightScalar ? 0 : i];
                A.t.grad[bc == detail::Broadcast::LeftScalar ? 0 : i] += self.t.grad[i] / d;
            }
        }
        if (B.needs_grad) {
            B.ensure_grad();
            for (std::size_t i = 0; i < self.t.grad.size(); ++i) {
                double num = av[bc == detail::Broadcast::LeftScalar ? 0 : i];
                double d = bv[bc == detail::Broadcast::RightScalar ? 0 : i];
                B.t.grad[bc == detail::Broadcast::RightScalar ? 0 : i] -=
                    self.t.grad[i] * num / (d * d);
            }
        }
    });
    const auto& av = a->t.values;
    const auto& bv = b->t.values;
    auto& ov = n->t.values;
    for (std::size_t i = 0; i < ov.size(); ++i)
        ov[i] = av[bc == detail::Broadcast::LeftScalar ? 0 : i] /
                bv[bc == detail::Broadcast::RightScalar ? 0 : i];
    return n;
}

inline Var scale(const Var& a, double k) {
    auto n = make_node("scale", a->t.shape, {a}, [k](Node& self) {
        Node& A = *self.inputs[0];
        A.ensure_grad();
        for (std::size_t i = 0; i < self.t.grad.size(); ++i) A.t.grad[i] += k * self.t.grad[i];
    });
    for (std::size_t i = 0; i < n->t.values.size(); ++i) n->t.values[i] = k * a->t.values[i];
    return n;
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// elementwise unary

inline Var sigmoid(const Var& a) {
    auto n = make_node("sigmoid", a->t.shape, {a}, [](Node& self) {
        Node& A = *self.inputs[0];
        A.ensure_grad();
        for (std::size_t i = 0; i < self.t.grad.size(); ++i) {
            double y = self.t.values[i];
            A.t.grad[i] += self.t.grad[i] * y * (1.0 - y);
        }
    });
    for (std::size_t i = 0; i < n->t.values.size(); ++i)
        n->t.values[i] = 1.0 / (1.0 + std::exp(-a->t.values[i]));
    return n;
}

inline Var exp_(const Var& a) {
    auto n = make_node("exp", a->t.shape, {a}, [](Node& self) {
        Node& A = *self.inputs[0];
        A.ensure_grad();
        for (std::size_t i = 0; i < self.t.grad.size(); ++i)
            A.t.grad[i] += self.t.grad[i] * self.t.values[i];
    });
    for (std::size_t i = 0; i < n->t.values.size(); ++i) n->t.values[i] = std::exp(a->t.values[i]);
    return n;
}

inline Var log_(const Var& a) {
    for (double v : a->t.values)
        if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
    auto n = make_node("log", a->t.shape, {a}, [](Node& self) {
        Node& A = *self.inputs[0];
        A.ensure_grad();
        for (std::size_t i = 0; i < self.t.grad.size(); ++i)
            A.t.grad[i] += self.t.grad[i] / A.t.values[i];
    });
    for (std::size_t i = 0; i < n->t.values.size(); ++i) n->t.values[i] = std::log(a->t.values[i]);
    return n;
}

inline Var sqrt_(const Var& a) {
    for (double v : a->t.values)
        if (v < 0.0) throw DomainError("sqrt: negative input " + std::to_string(v));
    auto n = make_node("sqrt", a->t.shape, {a}, [](Node& self) {
        Node& A = *self.inputs[0];
        A.ensure_grad();
        for (std::size_t i = 0; i < self.t.grad.size(); ++i)
            A.t.grad[i] += self.t.grad[i] * 0.5 / self.t.values[i];
    });
    for (std::size_t i = 0; i < n->t.values.size(); ++i) n->t.values[i] = std::sqrt(a->t.values[i]);
    return n;
}

// swish-1: x * sigmoid(x)
inline Var swish1(const Var& a) {
    auto n = make_node("swish1", a->t.shape, {a}, [](Node& self) {
        Node& A = *self.inputs[0];
        A.ensure_grad();
        for (std::size_t i = 0; i < self.t.grad.size(); ++i) {
            double s = self.aux[i];
            double x = A.t.values[i];
            A.t.grad[i] += self.t.grad[i] * (s + x * s * (1.0 - s));
        }
    });
    n->aux.resize(n->t.values.size());
    for (std::size_t i = 0; i < n->t.values.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-a->t.values[i]));
        n->aux[i] = s;
        n->t.values[i] = a->t.values[i] * s;
    }
    return n;
}

// ---------------------------------------------------------------------------
// reductions / reshaping

inline Var sum(const Var& a) {
    auto n = make_node("sum", {1}, {a}, [](Node& self) {
        Node& A = *self.inputs[0];
        A.ensure_grad();
        for (std::size_t i = 0; i < A.t.grad.size(); ++i) A.t.grad[i] += self.t.grad[0];
    });
    double acc = 0.0;
    for (double v : a->t.values) acc += v;
    n->t.values[0] = acc;
    return n;
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a->t.size())); }

inline Var reshape(const Var& a, Shape s) {
    if (numel(s) != a->t.size())
        throw ShapeError("reshape: cannot view " + shape_str(a->t.shape) + " as " + shape_str(s));
    auto n = make_node("reshape", std::move(s), {a}, [](Node& self) {
        Node& A = *self.inputs[0];
        A.ensure_grad();
        for (std::size_t i = 0; i < self.t.grad.size(); ++i) A.t.grad[i] += self.t.grad[i];
    });
    n->t.values = a->t.values;
    return n;
}

// i-th slice along the first dimension
inline Var select(const Var& a, std::int64_t i) {
    if (a->t.shape.empty()) throw ShapeError("select: rank-0 input");
    std::int64_t n0 = a->t.shape[0];
    if (i < 0 || i >= n0) throw IndexError("select: index " + std::to_string(i) + " out of " + std::to_string(n0));
    Shape out(a->t.shape.begin() + 1, a->t.shape.end());
    if (out.empty()) out = {1};
    std::int64_t stride = numel(out);
    auto n = make_node("select", out, {a}, [i, stride](Node& self) {
        Node& A = *self.inputs[0];
        A.ensure_grad();
        for (std::int64_t j = 0; j < stride; ++j) A.t.grad[i * stride + j] += self.t.grad[j];
    });
    std::copy(a->t.values.begin() + i * stride, a->t.values.begin() + (i + 1) * stride,
              n->t.values.begin());
    return n;
}

// stack equally-shaped vars along a new leading dimension
inline Var stack(const std::vector<Var>& parts) {
    if (parts.empty()) throw ArgumentError("stack: empty input list");
    Shape inner = parts[0]->t.shape;
    for (const auto& p : parts)
        if (p->t.shape != inner)
            throw ShapeError("stack: mismatched part shapes " + shape_str(inner) + " vs " +
                             shape_str(p->t.shape));
    Shape out;
    out.push_back(static_cast<std::int64_t>(parts.size()));
    out.insert(out.end(), inner.begin(), inner.end());
    std::int64_t stride = numel(inner);
    auto n = make_node("stack", out, parts, [stride](Node& self) {
        for (std::size_t p = 0; p < self.inputs.size(); ++p) {
            Node& A = *self.inputs[p];
            if (!A.needs_grad) continue;
            A.ensure_grad();
            for (std::int64_t j = 0; j < stride; ++j)
                A.t.grad[j] += self.t.grad[static_cast<std::int64_t>(p) * stride + j];
        }
    });
    for (std::size_t p = 0; p < parts.size(); ++p)
        std::copy(parts[p]->t.values.begin(), parts[p]->t.values.end(),
                  n->t.values.begin() + static_cast<std::int64_t>(p) * stride);
    return n;
}

// depth-wise (last-dimension) concatenation
inline Var concat_lastdim(const Var& a, const Var& b) {
    const Shape& sa = a->t.shape;
    const Shape& sb = b->t.shape;
    if (sa.size() != sb.size() || sa.empty())
        throw ShapeError("concat: rank mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    for (std::size_t i = 0; i + 1 < sa.size(); ++i)
        if (sa[i] != sb[i])
            throw ShapeError("concat: leading dims differ " + shape_str(sa) + " vs " + shape_str(sb));
    Shape out = sa;
    std::int64_t ca = sa.back(), cb = sb.back();
    out.back() = ca + cb;
    std::int64_t rows = numel(sa) / ca;
    auto n = make_node("concat", out, {a, b}, [ca, cb, rows](Node& self) {
        Node& A = *self.inputs[0];
        Node& B = *self.inputs[1];
        if (A.needs_grad) A.ensure_grad();
        if (B.needs_grad) B.ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* g = self.t.grad.data() + r * (ca + cb);
            if (A.needs_grad)
                for (std::int64_t j = 0; j < ca; ++j) A.t.grad[r * ca + j] += g[j];
            if (B.needs_grad)
                for (std::int64_t j = 0; j < cb; ++j) B.t.grad[r * cb + j] += g[ca + j];
        }
    });
    for (std::int64_t r = 0; r < rows; ++r) {
        double* o = n->t.values.data() + r * (ca + cb);
        std::copy(a->t.values.begin() + r * ca, a->t.values.begin() + (r + 1) * ca, o);
        std::copy(b->t.values.begin() + r * cb, b->t.values.begin() + (r + 1) * cb, o + ca);
    }
    return n;
}

// channels [from, to) along the last dimension
inline Var slice_lastdim(const Var& a, std::int64_t from, std::int64_t to) {
    const Shape& s = a->t.shape;
    if (s.empty()) throw ShapeError("slice: rank-0 input");
    std::int64_t c = s.back();
    if (from < 0 || to > c || from >= to)
        throw IndexError("slice: range [" + std::to_string(from) + "," + std::to_string(to) +
                         ") out of " + std::to_string(c));
    Shape out = s;
    out.back() = to - from;
    std::int64_t rows = numel(s) / c;
    std::int64_t w = to - from;
    auto n = make_node("slice", out, {a}, [from, c, rows, w](Node& self) {
        Node& A = *self.inputs[0];
        A.ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < w; ++j)
                A.t.grad[r * c + from + j] += self.t.grad[r * w + j];
    });
    for (std::int64_t r = 0; r < rows; ++r)
        std::copy(a->t.values.begin() + r * c + from, a->t.values.begin() + r * c + to,
                  n->t.values.begin() + r * w);
    return n;
}

// ---------------------------------------------------------------------------
// linear algebra / convolution / pooling

inline Var matmul(const Var& a, const Var& b) {
    const Shape& sa = a->t.shape;
    const Shape& sb = b->t.shape;
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
        throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
    std::int64_t m = sa[0], k = sa[1], p = sb[1];
    auto n = make_node("matmul", {m, p}, {a, b}, [m, k, p](Node& self) {
        Node& A = *self.inputs[0];
        Node& B = *self.inputs[1];
        if (A.needs_grad) {
            A.ensure_grad();
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < p; ++j) {
                    double g = self.t.grad[i * p + j];
                    for (std::int64_t q = 0; q < k; ++q) A.t.grad[i * k + q] += g * B.t.values[q * p + j];
                }
        }
        if (B.needs_grad) {
            B.ensure_grad();
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < p; ++j) {
                    double g = self.t.grad[i * p + j];
                    for (std::int64_t q = 0; q < k; ++q) B.t.grad[q * p + j] += g * A.t.values[i * k + q];
                }
        }
    });
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < p; ++j) {
            double acc = 0.0;
            for (std::int64_t q = 0; q < k; ++q) acc += a->t.values[i * k + q] * b->t.values[q * p + j];
            n->t.values[i * p + j] = acc;
        }
    return n;
}

// x: {n, h, w, c_in}; kernel: {kh, kw, c_in, c_out}; explicit zero padding.
inline Var conv2d(const Var& x, const Var& kernel, std::int64_t stride = 1, std::int64_t pad = 0) {
    const Shape& sx = x->t.shape;
    const Shape& sk = kernel->t.shape;
    if (sx.size() != 4 || sk.size() != 4)
        throw ShapeError("conv2d: expected rank-4 input and kernel, got " + shape_str(sx) + " and " +
                         shape_str(sk));
    if (sx[3] != sk[2])
        throw ShapeError("conv2d: input channels " + shape_str(sx) + " vs kernel " + shape_str(sk));
    std::int64_t n = sx[0], h = sx[1], w = sx[2], ci = sx[3];
    std::int64_t kh = sk[0], kw = sk[1], co = sk[3];
    std::int64_t ho = (h + 2 * pad - kh) / stride + 1;
    std::int64_t wo = (w + 2 * pad - kw) / stride + 1;
    if (ho < 1 || wo < 1)
        throw ShapeError("conv2d: kernel " + shape_str(sk) + " larger than padded input " + shape_str(sx));
    auto node = make_node("conv2d", {n, ho, wo, co}, {x, kernel},
                          [n, h, w, ci, kh, kw, co, ho, wo, stride, pad](Node& self) {
        Node& X = *self.inputs[0];
        Node& K = *self.inputs[1];
        bool gx = X.needs_grad, gk = K.needs_grad;
        if (gx) X.ensure_grad();
        if (gk) K.ensure_grad();
        for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t oy = 0; oy < ho; ++oy)
                for (std::int64_t ox = 0; ox < wo; ++ox) {
                    const double* g = self.t.grad.data() + ((b * ho + oy) * wo + ox) * co;
                    for (std::int64_t ky = 0; ky < kh; ++ky) {
                        std::int64_t iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) continue;
                        for (std::int64_t kx = 0; kx < kw; ++kx) {
                            std::int64_t ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= w) continue;
                            const double* xv = X.t.values.data() + ((b * h + iy) * w + ix) * ci;
                            double* xg = gx ? X.t.grad.data() + ((b * h + iy) * w + ix) * ci : nullptr;
                            for (std::int64_t q = 0; q < ci; ++q) {
                                const double* kv = K.t.values.data() + ((ky * kw + kx) * ci + q) * co;
                                double* kg = gk ? K.t.grad.data() + ((ky * kw + kx) * ci + q) * co : nullptr;
                                double acc = 0.0;
                                for (std::int64_t oc = 0; oc < co; ++oc) {
                                    if (gk) kg[oc] += g[oc] * xv[q];
                                    acc += g[oc] * kv[oc];
                                }
                                if (gx) xg[q] += acc;
                            }
                        }
                    }
                }
    });
    // forward: inner loops over input channels then output channels keep
    // kernel reads contiguous
    std::fill(node->t.values.begin(), node->t.values.end(), 0.0);
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t oy = 0; oy < ho; ++oy)
            for (std::int64_t ox = 0; ox < wo; ++ox) {
                double* out = node->t.values.data() + ((b * ho + oy) * wo + ox) * co;
                for (std::int64_t ky = 0; ky < kh; ++ky) {
                    std::int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (std::int64_t kx = 0; kx < kw; ++kx) {
                        std::int64_t ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= w) continue;
                        const double* xv = x->t.values.data() + ((b * h + iy) * w + ix) * ci;
                        const double* kv = kernel->t.values.data() + (ky * kw + kx) * ci * co;
                        for (std::int64_t q = 0; q < ci; ++q) {
                            double xq = xv[q];
                            const double* kr = kv + q * co;
                            for (std::int64_t oc = 0; oc < co; ++oc) out[oc] += xq * kr[oc];
                        }
                    }
                }
            }
    return node;
}

// 2x2 max-pool, stride 2; on ties the gradient goes to the first maximal
// element in row-major order
inline Var maxpool2x2(const Var& x) {
    const Shape& s = x->t.shape;
    if (s.size() != 4) throw ShapeError("maxpool2x2: expected rank-4 input, got " + shape_str(s));
    std::int64_t n = s[0], h = s[1], w = s[2], c = s[3];
    if (h < 2 || w < 2) throw ShapeError("maxpool2x2: spatial size too small " + shape_str(s));
    std::int64_t ho = h / 2, wo = w / 2;
    auto node = make_node("maxpool2x2", {n, ho, wo, c}, {x}, [](Node& self) {
        Node& X = *self.inputs[0];
        X.ensure_grad();
        for (std::size_t i = 0; i < self.t.grad.size(); ++i)
            X.t.grad[static_cast<std::size_t>(self.iaux[i])] += self.t.grad[i];
    });
    node->iaux.resize(node->t.values.size());
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t oy = 0; oy < ho; ++oy)
            for (std::int64_t ox = 0; ox < wo; ++ox)
                for (std::int64_t q = 0; q < c; ++q) {
                    std::int64_t best_idx = -1;
                    double best = 0.0;
                    for (std::int64_t dy = 0; dy < 2; ++dy)
                        for (std::int64_t dx = 0; dx < 2; ++dx) {
                            std::int64_t idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + q;
                            double v = x->t.values[idx];
                            if (best_idx < 0 || v > best) {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    std::int64_t oidx = ((b * ho + oy) * wo + ox) * c + q;
                    node->t.values[oidx] = best;
                    node->iaux[oidx] = best_idx;
                }
    return node;
}

// {n, h, w, c} -> {n, c}
inline Var global_avg_pool(const Var& x) {
    const Shape& s = x->t.shape;
    if (s.size() != 4) throw ShapeError("global_avg_pool: expected rank-4 input, got " + shape_str(s));
    std::int64_t n = s[0], r = s[1] * s[2], c = s[3];
    auto node = make_node("gap", {n, c}, {x}, [n, r, c](Node& self) {
        Node& X = *self.inputs[0];
        X.ensure_grad();
        double inv = 1.0 / static_cast<double>(r);
        for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t k = 0; k < r; ++k)
                for (std::int64_t q = 0; q < c; ++q)
                    X.t.grad[(b * r + k) * c + q] += self.t.grad[b * c + q] * inv;
    });
    std::fill(node->t.values.begin(), node->t.values.end(), 0.0);
    for (std::int64_t b = 0; b < n; ++b) {
        for (std::int64_t k = 0; k < r; ++k)
            for (std::int64_t q = 0; q < c; ++q)
                node->t.values[b * c + q] += x->t.values[(b * r + k) * c + q];
        for (std::int64_t q = 0; q < c; ++q) node->t.values[b * c + q] /= static_cast<double>(r);
    }
    return node;
}

// {n, h, w, c} -> {n, c}; first-maximum tie rule as maxpool
inline Var global_max_pool(const Var& x) {
    const Shape& s = x->t.shape;
    if (s.size() != 4) throw ShapeError("global_max_pool: expected rank-4 input, got " + shape_str(s));
    std::int64_t n = s[0], r = s[1] * s[2], c = s[3];
    auto node = make_node("gmp", {n, c}, {x}, [](Node& self) {
        Node& X = *self.inputs[0];
        X.ensure_grad();
        for (std::size_t i = 0; i < self.t.grad.size(); ++i)
            X.t.grad[static_cast<std::size_t>(self.iaux[i])] += self.t.grad[i];
    });
    node->iaux.resize(node->t.values.size());
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t q = 0; q < c; ++q) {
            std::int64_t best_idx = b * r * c + q;
            double best = x->t.values[best_idx];
            for (std::int64_t k = 1; k < r; ++k) {
                std::int64_t idx = (b * r + k) * c + q;
                if (x->t.values[idx] > best) {
                    best = x->t.values[idx];
                    best_idx = idx;
                }
            }
            node->t.values[b * c + q] = best;
            node->iaux[b * c + q] = best_idx;
        }
    return node;
}

// ---------------------------------------------------------------------------
// classifier math

// softmax over the last dimension, with max subtraction
inline Var softmax_lastdim(const Var& x) {
    const Shape& s = x->t.shape;
    if (s.empty() || s.back() < 1) throw ArgumentError("softmax: empty input");
    std::int64_t m = s.back();
    std::int64_t rows = numel(s) / m;
    auto node = make_node("softmax", s, {x}, [m, rows](Node& self) {
        Node& X = *self.inputs[0];
        X.ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* y = self.t.values.data() + r * m;
            const double* g = self.t.grad.data() + r * m;
            double dot = 0.0;
            for (std::int64_t j = 0; j < m; ++j) dot += g[j] * y[j];
            for (std::int64_t j = 0; j < m; ++j) X.t.grad[r * m + j] += y[j] * (g[j] - dot);
        }
    });
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* in = x->t.values.data() + r * m;
        double* out = node->t.values.data() + r * m;
        double mx = in[0];
        for (std::int64_t j = 1; j < m; ++j) mx = std::max(mx, in[j]);
        double z = 0.0;
        for (std::int64_t j = 0; j < m; ++j) {
            out[j] = std::exp(in[j] - mx);
            z += out[j];
        }
        for (std::int64_t j = 0; j < m; ++j) out[j] /= z;
    }
    return node;
}

inline Var softmax(const Var& x) { return softmax_lastdim(x); }

inline constexpr double kCrossEntropyEps = 1e-12;

// probs: {..., m} rows of probabilities; labels: one class index per row.
// Probabilities are clamped at 1e-12 before the log.
inline Var cross_entropy_sum(const Var& probs, const std::vector<std::int64_t>& labels) {
    const Shape& s = probs->t.shape;
    std::int64_t m = s.back();
    std::int64_t rows = numel(s) / m;
    if (static_cast<std::int64_t>(labels.size()) != rows)
        throw ArgumentError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                            std::to_string(rows) + " rows");
    for (auto y : labels)
        if (y < 0 || y >= m)
            throw IndexError("cross_entropy: label " + std::to_string(y) + " out of " + std::to_string(m));
    auto node = make_node("cross_entropy", {1}, {probs}, [m, labels](Node& self) {
        Node& P = *self.inputs[0];
        P.ensure_grad();
        for (std::size_t r = 0; r < labels.size(); ++r) {
            double p = std::max(P.t.values[static_cast<std::int64_t>(r) * m + labels[r]], kCrossEntropyEps);
            P.t.grad[static_cast<std::int64_t>(r) * m + labels[r]] -= self.t.grad[0] / p;
        }
    });
    double acc = 0.0;
    for (std::size_t r = 0; r < labels.size(); ++r)
        acc -= std::log(std::max(probs->t.values[static_cast<std::int64_t>(r) * m + labels[r]],
                                 kCrossEntropyEps));
    node->t.values[0] = acc;
    return node;
}

inline Var cross_entropy(const Var& probs, std::int64_t label) {
    return cross_entropy_sum(probs, std::vector<std::int64_t>{label});
}

// Scaled cosine similarity logits. fm: {r, d} rows of embeddings; weights:
// {c, d}; tau: {1}. Output {r, c} with out[k][j] = tau * <fm_k, w_j> /
// (|fm_k| |w_j|). A zero-norm row on either side is a domain error.
inline Var cosine_logits(const Var& fm, const Var& weights, const Var& tau) {
    const Shape& sf = fm->t.shape;
    const Shape& sw = weights->t.shape;
    if (sf.size() != 2 || sw.size() != 2)
        throw ShapeError("cosine_logits: expected rank-2 operands, got " + shape_str(sf) + " and " +
                         shape_str(sw));
    if (sf[1] != sw[1])
        throw ShapeError("cosine_logits: depth mismatch " + shape_str(sf) + " vs " + shape_str(sw));
    if (tau->t.size() != 1) throw ShapeError("cosine_logits: tau must be scalar");
    std::int64_t r = sf[0], d = sf[1], c = sw[0];
    std::vector<double> fn(r), wn(c);
    for (std::int64_t k = 0; k < r; ++k) {
        double acc = 0.0;
        for (std::int64_t q = 0; q < d; ++q) acc += fm->t.values[k * d + q] * fm->t.values[k * d + q];
        fn[k] = std::sqrt(acc);
        if (fn[k] == 0.0) throw DomainError("cosine_logits: zero-norm embedding at location " + std::to_string(k));
    }
    for (std::int64_t j = 0; j < c; ++j) {
        double acc = 0.0;
        for (std::int64_t q = 0; q < d; ++q)
            acc += weights->t.values[j * d + q] * weights->t.values[j * d + q];
        wn[j] = std::sqrt(acc);
        if (wn[j] == 0.0) throw DomainError("cosine_logits: zero-norm weight row " + std::to_string(j));
    }
    auto node = make_node("cosine_logits", {r, c}, {fm, weights, tau}, [r, d, c](Node& self) {
        Node& F = *self.inputs[0];
        Node& W = *self.inputs[1];
        Node& T = *self.inputs[2];
        const double* fn = self.aux.data();
        const double* wn = self.aux.data() + r;
        const double* cosv = self.aux.data() + r + c;  // raw cosine per (k, j)
        double tau = T.t.values[0];
        if (F.needs_grad) F.ensure_grad();
        if (W.needs_grad) W.ensure_grad();
        if (T.needs_grad) T.ensure_grad();
        for (std::int64_t k = 0; k < r; ++k) {
            const double* x = F.t.values.data() + k * d;
            for (std::int64_t j = 0; j < c; ++j) {
                double g = self.t.grad[k * c + j];
                if (g == 0.0) continue;
                const double* wrow = W.t.values.data() + j * d;
                double cs = cosv[k * c + j];
                if (T.needs_grad) T.t.grad[0] += g * cs;
                if (F.needs_grad) {
                    double* fg = F.t.grad.data() + k * d;
                    double a = g * tau / (fn[k] * wn[j]);
                    double b = g * tau * cs / (fn[k] * fn[k]);
                    for (std::int64_t q = 0; q < d; ++q) fg[q] += a * wrow[q] - b * x[q];
                }
                if (W.needs_grad) {
                    double* wg = W.t.grad.data() + j * d;
                    double a = g * tau / (fn[k] * wn[j]);
                    double b = g * tau * cs / (wn[j] * wn[j]);
                    for (std::int64_t q = 0; q < d; ++q) wg[q] += a * x[q] - b * wrow[q];
                }
            }
        }
    });
    node->aux.resize(r + c + r * c);
    std::copy(fn.begin(), fn.end(), node->aux.begin());
    std::copy(wn.begin(), wn.end(), node->aux.begin() + r);
    double tv = tau->t.values[0];
    for (std::int64_t k = 0; k < r; ++k)
        for (std::int64_t j = 0; j < c; ++j) {
            double acc = 0.0;
            for (std::int64_t q = 0; q < d; ++q)
                acc += fm->t.values[k * d + q] * weights->t.values[j * d + q];
            double cs = acc / (fn[k] * wn[j]);
            node->aux[r + c + k * c + j] = cs;
            node->t.values[k * c + j] = tv * cs;
        }
    return node;
}

// Negative squared Euclidean distance logits: x {d} vs rows of P {c, d}.
inline Var neg_sq_euclid_logits(const Var& x, const Var& protos) {
    const Shape& sx = x->t.shape;
    const Shape& sp = protos->t.shape;
    if (sp.size() != 2 || numel(sx) != sp[1])
        throw ShapeError("neg_sq_euclid: shapes " + shape_str(sx) + " vs " + shape_str(sp));
    std::int64_t c = sp[0], d = sp[1];
    auto node = make_node("neg_sq_euclid", {c}, {x, protos}, [c, d](Node& self) {
        Node& X = *self.inputs[0];
        Node& P = *self.inputs[1];
        if (X.needs_grad) X.ensure_grad();
        if (P.needs_grad) P.ensure_grad();
        for (std::int64_t j = 0; j < c; ++j) {
            double g = self.t.grad[j];
            for (std::int64_t q = 0; q < d; ++q) {
                double diff = X.t.values[q] - P.t.values[j * d + q];
                if (X.needs_grad) X.t.grad[q] += -2.0 * g * diff;
                if (P.needs_grad) P.t.grad[j * d + q] += 2.0 * g * diff;
            }
        }
    });
    for (std::int64_t j = 0; j < c; ++j) {
        double acc = 0.0;
        for (std::int64_t q = 0; q < d; ++q) {
            double diff = x->t.values[q] - protos->t.values[j * d + q];
            acc += diff * diff;
        }
        node->t.values[j] = -acc;
    }
    return node;
}

// ---------------------------------------------------------------------------
// backward pass

inline void topo_order(const Var& root, std::vector<Node*>& order) {
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->needs_grad && !seen.count(child)) {
                seen.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

// Seeds the scalar loss with gradient 1 and propagates to every reachable
// leaf that requires grad. Gradients accumulate; call zero_grad between steps.
inline void backward(const Var& loss) {
    if (loss->t.size() != 1)
        throw ArgumentError("backward: loss must be scalar, got shape " + shape_str(loss->t.shape));
    if (!loss->needs_grad) return;
    std::vector<Node*> order;
    topo_order(loss, order);
    loss->ensure_grad();
    loss->t.grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backprop && node->t.grad.size() == node->t.values.size()) node->backprop(*node);
    }
}

inline void zero_grad(const Var& v) { std::fill(v->t.grad.begin(), v->t.grad.end(), 0.0); }

// ---------------------------------------------------------------------------
// finite differences

// Central-difference gradient of `loss` with respect to the entries of `x`.
// `loss` must re-evaluate the full forward pass reading the current x.
inline std::vector<double> finite_diff_grad(const std::function<double()>& loss,
                                            std::vector<double>& x, double h = 1e-5) {
    if (!(h > 0.0)) throw ArgumentError("finite_diff_grad: step must be positive");
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        double saved = x[i];
        x[i] = saved + h;
        double up = loss();
        x[i] = saved - h;
        double down = loss();
        x[i] = saved;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace densefew
