#pragma once

// Dense row-major tensors with reverse-mode differentiation, sized for
// desk-scale experiments: single thread, fixed summation order, values
// stored as doubles with an optional global round-to-f32 mode so that
// runs are bit-reproducible in either width.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace mcdm {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error(m) {}
};
struct GradError : std::runtime_error {
    explicit GradError(const std::string& m) : std::runtime_error(m) {}
};

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

// ---------------------------------------------------------------------------
// Global precision switch: one mode for the whole process, not per tensor.
// In f32 mode every stored value is rounded through float after each op, so
// buffers are exactly representable in 32 bits; f64 keeps full doubles and is
// what gradient checks run under.
// ---------------------------------------------------------------------------

enum class Precision { f32, f64 };

inline Precision& precision_mode() {
    static Precision p = Precision::f32;
    return p;
}

struct PrecisionGuard {
    Precision saved;
    explicit PrecisionGuard(Precision p) : saved(precision_mode()) { precision_mode() = p; }
    ~PrecisionGuard() { precision_mode() = saved; }
};

inline void quantize_inplace(std::vector<double>& v) {
    if (precision_mode() == Precision::f32) {
        for (double& x : v) x = static_cast<double>(static_cast<float>(x));
    }
}

// ---------------------------------------------------------------------------
// Gradient taping switch.
// ---------------------------------------------------------------------------

inline bool& grad_enabled() {
    static bool on = true;
    return on;
}

struct NoGradGuard {
    bool saved;
    NoGradGuard() : saved(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = saved; }
};

// ---------------------------------------------------------------------------
// Allocation meter: counts live bytes of tensor buffers created while a
// meter is installed. Used by the attention/memory benchmarks.
// ---------------------------------------------------------------------------

struct AllocMeter {
    int64_t current = 0;
    int64_t peak = 0;
    void add(int64_t b) {
        current += b;
        peak = std::max(peak, current);
    }
    void sub(int64_t b) { current -= b; }
};

inline AllocMeter*& active_meter() {
    static thread_local AllocMeter* m = nullptr;
    return m;
}

struct MeterScope {
    AllocMeter* saved;
    explicit MeterScope(AllocMeter* m) : saved(active_meter()) { active_meter() = m; }
    ~MeterScope() { active_meter() = saved; }
};

// ---------------------------------------------------------------------------
// Counter-based RNG.
//
// Stream element i is splitmix64_finalize(seed ^ rotl(GOLDEN * (i+1), 31)),
// a stateless bijective hash of (seed, counter). Identical seeds give
// identical integer streams on every platform; the derived doubles match
// wherever IEEE-754 and the platform libm (log/cos for normals) agree.
// ---------------------------------------------------------------------------

struct Rng {
    uint64_t seed = 0;
    uint64_t counter = 0;

    explicit Rng(uint64_t s = 0) : seed(s) {}

    static uint64_t mix(uint64_t seed, uint64_t ctr) {
        uint64_t z = seed ^ (0x9E3779B97F4A7C15ULL * (ctr + 1));
        z ^= z >> 30;
        z *= 0xBF58476D1CE4E5B9ULL;
        z ^= z >> 27;
        z *= 0x94D049BB133111EBULL;
        z ^= z >> 31;
        return z;
    }

    // Independent stream for a named purpose; forking never perturbs the
    // parent counter.
    Rng fork(uint64_t tag) const {
        Rng r(mix(seed, 0xF00D0000ULL + tag));
        return r;
    }

    uint64_t next_u64() { return mix(seed, counter++); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // standard normal via Box-Muller; consumes two counter slots
    double normal() {
        uint64_t a = next_u64(), b = next_u64();
        double u1 = (static_cast<double>(a >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
        double u2 = static_cast<double>(b >> 11) * 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }
};

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

class Tensor;
using BackwardFn = std::function<void(const Tensor& self)>;

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily during backward
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward;
    AllocMeter* meter = nullptr;  // meter that charged this buffer, if any
    int64_t metered = 0;

    Node(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (AllocMeter* m = active_meter()) {
            meter = m;
            metered = static_cast<int64_t>(data.size() * sizeof(double));
            m->add(metered);
        }
    }
    ~Node() {
        if (meter) meter->sub(metered);
    }
    std::vector<double>& grad_ref() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= s[static_cast<size_t>(i)];
    }
    return st;
}

}  // namespace detail

class Tensor {
  public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape.empty()) throw ShapeError("empty shape");
        for (int64_t d : shape)
            if (d < 1) throw ShapeError("non-positive dim in shape " + shape_str(shape));
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("shape " + shape_str(shape) + " does not match buffer of " +
                             std::to_string(data.size()) + " values");
        quantize_inplace(data);
        Tensor t;
        t.node_ = std::make_shared<detail::Node>(std::move(shape), std::move(data));
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return from(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0),
                    requires_grad);
    }
    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return from(std::move(shape), std::vector<double>(static_cast<size_t>(n), v),
                    requires_grad);
    }
    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t ndim() const { return static_cast<int64_t>(node_->shape.size()); }
    int64_t dim(int64_t i) const {
        if (i < 0) i += ndim();
        return node_->shape[static_cast<size_t>(i)];
    }
    int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }
    std::span<const double> data() const { return node_->data; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const char* op() const { return node_->op; }

    double item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }
    double at(std::initializer_list<int64_t> idx) const {
        auto st = detail::row_major_strides(shape());
        int64_t flat = 0;
        size_t k = 0;
        for (int64_t i : idx) flat += i * st[k++];
        return node_->data[static_cast<size_t>(flat)];
    }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    std::span<const double> grad() const {
        if (!has_grad()) throw GradError("tensor has no gradient");
        return node_->grad;
    }
    void zero_grad() {
        if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    // In-place access for leaf tensors only (parameter init and optimizer
    // steps); taped intermediates stay immutable.
    std::vector<double>& mutable_data() {
        if (!node_->parents.empty())
            throw GradError("mutable_data() on non-leaf tensor (op " + std::string(node_->op) +
                            ")");
        return node_->data;
    }

    Tensor detach() const {
        Tensor t;
        t.node_ = std::make_shared<detail::Node>(node_->shape, node_->data);
        return t;
    }

    void backward() const;

    // internal: op construction
    static Tensor make_op(const char* name, Shape shape, std::vector<double> data,
                          std::vector<Tensor> parents, BackwardFn fn) {
        bool need = false;
        if (grad_enabled())
            for (const Tensor& p : parents)
                if (p.requires_grad()) need = true;
        quantize_inplace(data);
        Tensor t;
        t.node_ = std::make_shared<detail::Node>(std::move(shape), std::move(data));
        t.node_->op = name;
        if (need) {
            t.node_->requires_grad = true;
            for (Tensor& p : parents) t.node_->parents.push_back(p.node_);
            t.node_->backward = std::move(fn);
        }
        return t;
    }

    std::shared_ptr<detail::Node> node_;
};

// ---------------------------------------------------------------------------
// Broadcasting helpers (numpy-style, right aligned)
// ---------------------------------------------------------------------------

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    size_t n = std::max(a.size(), b.size());
    Shape out(n, 1);
    for (size_t i = 0; i < n; ++i) {
        int64_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
        int64_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// per-out-dim element strides into src; 0 where src is broadcast
inline std::vector<int64_t> bcast_strides(const Shape& src, const Shape& out) {
    auto st = row_major_strides(src);
    std::vector<int64_t> r(out.size(), 0);
    size_t off = out.size() - src.size();
    for (size_t i = 0; i < src.size(); ++i) r[off + i] = src[i] == 1 ? 0 : st[i];
    return r;
}

// Iterate the flat index space of `out`, producing source offsets for two
// broadcast operands. F(flat_out, off_a, off_b).
template <class F>
void for_each_bcast2(const Shape& out, const Shape& a, const Shape& b, F&& f) {
    auto sa = bcast_strides(a, out);
    auto sb = bcast_strides(b, out);
    size_t nd = out.size();
    std::vector<int64_t> idx(nd, 0);
    int64_t total = shape_numel(out);
    int64_t oa = 0, ob = 0;
    for (int64_t flat = 0; flat < total; ++flat) {
        f(flat, oa, ob);
        for (int64_t d = static_cast<int64_t>(nd) - 1; d >= 0; --d) {
            size_t ud = static_cast<size_t>(d);
            ++idx[ud];
            oa += sa[ud];
            ob += sb[ud];
            if (idx[ud] < out[ud]) break;
            oa -= sa[ud] * out[ud];
            ob -= sb[ud] * out[ud];
            idx[ud] = 0;
        }
    }
}

// Sum `src` (shaped like `out`) into `dst` shaped `dst_shape` by reversing a
// broadcast. Used by elementwise backward passes.
inline void reduce_into(const std::vector<double>& src, const Shape& out, std::vector<double>& dst,
                        const Shape& dst_shape) {
    auto sd = bcast_strides(dst_shape, out);
    size_t nd = out.size();
    std::vector<int64_t> idx(nd, 0);
    int64_t total = shape_numel(out);
    int64_t od = 0;
    for (int64_t flat = 0; flat < total; ++flat) {
        dst[static_cast<size_t>(od)] += src[static_cast<size_t>(flat)];
        for (int64_t d = static_cast<int64_t>(nd) - 1; d >= 0; --d) {
            size_t ud = static_cast<size_t>(d);
            ++idx[ud];
            od += sd[ud];
            if (idx[ud] < out[ud]) break;
            od -= sd[ud] * out[ud];
            idx[ud] = 0;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

namespace detail {

template <class FwdF>
Tensor ew_binary(const char* name, const Tensor& a, const Tensor& b, FwdF f, BackwardFn bw) {
    Shape out = broadcast_shape(a.shape(), b.shape());
    std::vector<double> data(static_cast<size_t>(shape_numel(out)));
    const auto& ad = a.node_->data;
    const auto& bd = b.node_->data;
    for_each_bcast2(out, a.shape(), b.shape(), [&](int64_t o, int64_t oa, int64_t ob) {
        data[static_cast<size_t>(o)] =
            f(ad[static_cast<size_t>(oa)], bd[static_cast<size_t>(ob)]);
    });
    return Tensor::make_op(name, std::move(out), std::move(data), {a, b}, std::move(bw));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(
        "add", a, b, [](double x, double y) { return x + y; },
        [a, b](const Tensor& self) {
            const auto& g = self.node_->grad;
            if (a.requires_grad())
                detail::reduce_into(g, self.shape(), a.node_->grad_ref(), a.shape());
            if (b.requires_grad())
                detail::reduce_into(g, self.shape(), b.node_->grad_ref(), b.shape());
        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(
        "sub", a, b, [](double x, double y) { return x - y; },
        [a, b](const Tensor& self) {
            const auto& g = self.node_->grad;
            if (a.requires_grad())
                detail::reduce_into(g, self.shape(), a.node_->grad_ref(), a.shape());
            if (b.requires_grad()) {
                std::vector<double> neg(g.size());
                for (size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
                detail::reduce_into(neg, self.shape(), b.node_->grad_ref(), b.shape());
            }
        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(
        "mul", a, b, [](double x, double y) { return x * y; },
        [a, b](const Tensor& self) {
            const auto& g = self.node_->grad;
            const auto& ad = a.node_->data;
            const auto& bd = b.node_->data;
            std::vector<double> tmp(g.size());
            if (a.requires_grad()) {
                detail::for_each_bcast2(self.shape(), a.shape(), b.shape(),
                                        [&](int64_t o, int64_t, int64_t ob) {
                                            tmp[static_cast<size_t>(o)] =
                                                g[static_cast<size_t>(o)] *
                                                bd[static_cast<size_t>(ob)];
                                        });
                detail::reduce_into(tmp, self.shape(), a.node_->grad_ref(), a.shape());
            }
            if (b.requires_grad()) {
                detail::for_each_bcast2(self.shape(), a.shape(), b.shape(),
                                        [&](int64_t o, int64_t oa, int64_t) {
                                            tmp[static_cast<size_t>(o)] =
                                                g[static_cast<size_t>(o)] *
                                                ad[static_cast<size_t>(oa)];
                                        });
                detail::reduce_into(tmp, self.shape(), b.node_->grad_ref(), b.shape());
            }
        });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(
        "div", a, b, [](double x, double y) { return x / y; },
        [a, b](const Tensor& self) {
            const auto& g = self.node_->grad;
            const auto& ad = a.node_->data;
            const auto& bd = b.node_->data;
            std::vector<double> tmp(g.size());
            if (a.requires_grad()) {
                detail::for_each_bcast2(self.shape(), a.shape(), b.shape(),
                                        [&](int64_t o, int64_t, int64_t ob) {
                                            tmp[static_cast<size_t>(o)] =
                                                g[static_cast<size_t>(o)] /
                                                bd[static_cast<size_t>(ob)];
                                        });
                detail::reduce_into(tmp, self.shape(), a.node_->grad_ref(), a.shape());
            }
            if (b.requires_grad()) {
                detail::for_each_bcast2(
                    self.shape(), a.shape(), b.shape(), [&](int64_t o, int64_t oa, int64_t ob) {
                        double y = bd[static_cast<size_t>(ob)];
                        tmp[static_cast<size_t>(o)] =
                            -g[static_cast<size_t>(o)] * ad[static_cast<size_t>(oa)] / (y * y);
                    });
                detail::reduce_into(tmp, self.shape(), b.node_->grad_ref(), b.shape());
            }
        });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

template <class FwdF, class GradF>
Tensor ew_unary(const char* name, const Tensor& x, FwdF f, GradF dfdx_from_in_out) {
    std::vector<double> data(x.node_->data.size());
    for (size_t i = 0; i < data.size(); ++i) data[i] = f(x.node_->data[i]);
    return Tensor::make_op(name, x.shape(), std::move(data), {x},
                           [x, dfdx_from_in_out](const Tensor& self) {
                               if (!x.requires_grad()) return;
                               auto& gx = x.node_->grad_ref();
                               const auto& g = self.node_->grad;
                               const auto& in = x.node_->data;
                               const auto& out = self.node_->data;
                               for (size_t i = 0; i < g.size(); ++i)
                                   gx[i] += g[i] * dfdx_from_in_out(in[i], out[i]);
                           });
}

}  // namespace detail

inline Tensor neg(const Tensor& x) {
    return detail::ew_unary(
        "neg", x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}
inline Tensor operator-(const Tensor& x) { return neg(x); }

inline Tensor exp(const Tensor& x) {
    return detail::ew_unary(
        "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}
inline Tensor log(const Tensor& x) {
    return detail::ew_unary(
        "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}
inline Tensor sqrt(const Tensor& x) {
    return detail::ew_unary(
        "sqrt", x, [](double v) { return std::sqrt(v); },
        [](double, double y) { return 0.5 / y; });
}
inline Tensor tanh(const Tensor& x) {
    return detail::ew_unary(
        "tanh", x, [](double v) { return std::tanh(v); },
        [](double, double y) { return 1.0 - y * y; });
}
inline Tensor gelu(const Tensor& x) {
    return detail::ew_unary(
        "gelu", x,
        [](double v) { return 0.5 * v * (1.0 + std::erf(v * 0.7071067811865475244)); },
        [](double v, double) {
            double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
            double pdf = std::exp(-0.5 * v * v) * 0.3989422804014326779;
            return cdf + v * pdf;
        });
}
inline Tensor square(const Tensor& x) {
    return detail::ew_unary(
        "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor mul_scalar(const Tensor& x, double c) {
    return detail::ew_unary(
        "mul_scalar", x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}
inline Tensor add_scalar(const Tensor& x, double c) {
    return detail::ew_unary(
        "add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}
inline Tensor operator*(const Tensor& x, double c) { return mul_scalar(x, c); }
inline Tensor operator*(double c, const Tensor& x) { return mul_scalar(x, c); }
inline Tensor operator+(const Tensor& x, double c) { return add_scalar(x, c); }
inline Tensor operator-(const Tensor& x, double c) { return add_scalar(x, -c); }

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    Shape old = x.shape();
    return Tensor::make_op("reshape", std::move(shape),
                           std::vector<double>(x.node_->data), {x}, [x](const Tensor& self) {
                               if (!x.requires_grad()) return;
                               auto& gx = x.node_->grad_ref();
                               const auto& g = self.node_->grad;
                               for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                           });
}

inline Tensor permute(const Tensor& x, std::vector<int64_t> axes) {
    size_t nd = x.shape().size();
    if (axes.size() != nd) throw ShapeError("permute axes rank mismatch");
    Shape out(nd);
    for (size_t i = 0; i < nd; ++i) out[i] = x.shape()[static_cast<size_t>(axes[i])];
    auto in_st = detail::row_major_strides(x.shape());
    std::vector<int64_t> gather(nd);
    for (size_t i = 0; i < nd; ++i) gather[i] = in_st[static_cast<size_t>(axes[i])];

    auto apply = [nd, out, gather](const std::vector<double>& src, std::vector<double>& dst) {
        std::vector<int64_t> idx(nd, 0);
        int64_t off = 0;
        int64_t total = shape_numel(out);
        for (int64_t flat = 0; flat < total; ++flat) {
            dst[static_cast<size_t>(flat)] = src[static_cast<size_t>(off)];
            for (int64_t d = static_cast<int64_t>(nd) - 1; d >= 0; --d) {
                size_t ud = static_cast<size_t>(d);
                ++idx[ud];
                off += gather[ud];
                if (idx[ud] < out[ud]) break;
                off -= gather[ud] * out[ud];
                idx[ud] = 0;
            }
        }
    };

    std::vector<double> data(static_cast<size_t>(x.numel()));
    apply(x.node_->data, data);
    return Tensor::make_op(
        "permute", std::move(out), std::move(data), {x}, [x, nd, gather](const Tensor& self) {
            if (!x.requires_grad()) return;
            auto& gx = x.node_->grad_ref();
            const auto& g = self.node_->grad;
            const Shape& os = self.shape();
            std::vector<int64_t> idx(nd, 0);
            int64_t off = 0;
            int64_t total = shape_numel(os);
            for (int64_t flat = 0; flat < total; ++flat) {
                gx[static_cast<size_t>(off)] += g[static_cast<size_t>(flat)];
                for (int64_t d = static_cast<int64_t>(nd) - 1; d >= 0; --d) {
                    size_t ud = static_cast<size_t>(d);
                    ++idx[ud];
                    off += gather[ud];
                    if (idx[ud] < os[ud]) break;
                    off -= gather[ud] * os[ud];
                    idx[ud] = 0;
                }
            }
        });
}

inline Tensor transpose_last(const Tensor& x) {
    std::vector<int64_t> axes(x.shape().size());
    std::iota(axes.begin(), axes.end(), 0);
    std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
    return permute(x, std::move(axes));
}

inline Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t len) {
    const Shape& s = x.shape();
    if (axis < 0) axis += static_cast<int64_t>(s.size());
    if (start < 0 || len < 1 || start + len > s[static_cast<size_t>(axis)])
        throw ShapeError("slice out of range on " + shape_str(s));
    Shape out = s;
    out[static_cast<size_t>(axis)] = len;

    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
    int64_t in_axis = s[static_cast<size_t>(axis)];

    std::vector<double> data(static_cast<size_t>(outer * len * inner));
    const auto& src = x.node_->data;
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(&data[static_cast<size_t>(o * len * inner)],
                    &src[static_cast<size_t>((o * in_axis + start) * inner)],
                    static_cast<size_t>(len * inner) * sizeof(double));

    return Tensor::make_op("slice", std::move(out), std::move(data), {x},
                           [x, outer, inner, len, in_axis, start](const Tensor& self) {
                               if (!x.requires_grad()) return;
                               auto& gx = x.node_->grad_ref();
                               const auto& g = self.node_->grad;
                               for (int64_t o = 0; o < outer; ++o)
                                   for (int64_t i = 0; i < len * inner; ++i)
                                       gx[static_cast<size_t>((o * in_axis + start) * inner + i)] +=
                                           g[static_cast<size_t>(o * len * inner + i)];
                           });
}

inline Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    Shape s0 = parts[0].shape();
    if (axis < 0) axis += static_cast<int64_t>(s0.size());
    int64_t total_axis = 0;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size()) throw ShapeError("concat rank mismatch");
        for (size_t i = 0; i < s.size(); ++i)
            if (static_cast<int64_t>(i) != axis && s[i] != s0[i])
                throw ShapeError("concat shape mismatch " + shape_str(s0) + " vs " + shape_str(s));
        total_axis += s[static_cast<size_t>(axis)];
    }
    Shape out = s0;
    out[static_cast<size_t>(axis)] = total_axis;

    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s0.size(); ++i) inner *= s0[i];

    std::vector<double> data(static_cast<size_t>(shape_numel(out)));
    int64_t pos = 0;
    for (const Tensor& p : parts) {
        int64_t la = p.shape()[static_cast<size_t>(axis)];
        const auto& src = p.node_->data;
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(&data[static_cast<size_t>((o * total_axis + pos) * inner)],
                        &src[static_cast<size_t>(o * la * inner)],
                        static_cast<size_t>(la * inner) * sizeof(double));
        pos += la;
    }

    std::vector<Tensor> save = parts;
    return Tensor::make_op("concat", std::move(out), std::move(data), parts,
                           [save, outer, inner, total_axis, axis](const Tensor& self) {
                               const auto& g = self.node_->grad;
                               int64_t pos = 0;
                               for (const Tensor& p : save) {
                                   int64_t la = p.shape()[static_cast<size_t>(axis)];
                                   if (p.requires_grad()) {
                                       auto& gp = p.node_->grad_ref();
                                       for (int64_t o = 0; o < outer; ++o)
                                           for (int64_t i = 0; i < la * inner; ++i)
                                               gp[static_cast<size_t>(o * la * inner + i)] +=
                                                   g[static_cast<size_t>(
                                                       (o * total_axis + pos) * inner + i)];
                                   }
                                   pos += la;
                               }
                           });
}

inline Tensor stack(const std::vector<Tensor>& parts) {
    std::vector<Tensor> expanded;
    expanded.reserve(parts.size());
    for (const Tensor& p : parts) {
        Shape s = p.shape();
        s.insert(s.begin(), 1);
        expanded.push_back(reshape(p, std::move(s)));
    }
    return concat(expanded, 0);
}

inline Tensor broadcast_to(const Tensor& x, const Shape& shape) {
    Shape check = detail::broadcast_shape(x.shape(), shape);
    if (check != shape)
        throw ShapeError("cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    const auto& xd = x.node_->data;
    detail::for_each_bcast2(shape, x.shape(), x.shape(), [&](int64_t o, int64_t oa, int64_t) {
        data[static_cast<size_t>(o)] = xd[static_cast<size_t>(oa)];
    });
    return Tensor::make_op("broadcast_to", shape, std::move(data), {x}, [x](const Tensor& self) {
        if (!x.requires_grad()) return;
        detail::reduce_into(self.node_->grad, self.shape(), x.node_->grad_ref(), x.shape());
    });
}

// ---------------------------------------------------------------------------
// Reductions. Summation runs left to right over the flattened lane so the
// result is bit-reproducible.
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.node_->data) acc += v;
    return Tensor::make_op("sum", {1}, {acc}, {x}, [x](const Tensor& self) {
        if (!x.requires_grad()) return;
        auto& gx = x.node_->grad_ref();
        double g = self.node_->grad[0];
        for (double& v : gx) v += g;
    });
}

inline Tensor sum(const Tensor& x, int64_t axis, bool keepdim = false) {
    const Shape& s = x.shape();
    if (axis < 0) axis += static_cast<int64_t>(s.size());
    int64_t outer = 1, inner = 1, n = s[static_cast<size_t>(axis)];
    for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];

    Shape out = s;
    if (keepdim)
        out[static_cast<size_t>(axis)] = 1;
    else
        out.erase(out.begin() + axis);
    if (out.empty()) out = {1};

    std::vector<double> data(static_cast<size_t>(outer * inner), 0.0);
    const auto& src = x.node_->data;
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t k = 0; k < n; ++k)
            for (int64_t i = 0; i < inner; ++i)
                data[static_cast<size_t>(o * inner + i)] +=
                    src[static_cast<size_t>((o * n + k) * inner + i)];

    return Tensor::make_op("sum_axis", std::move(out), std::move(data), {x},
                           [x, outer, inner, n](const Tensor& self) {
                               if (!x.requires_grad()) return;
                               auto& gx = x.node_->grad_ref();
                               const auto& g = self.node_->grad;
                               for (int64_t o = 0; o < outer; ++o)
                                   for (int64_t k = 0; k < n; ++k)
                                       for (int64_t i = 0; i < inner; ++i)
                                           gx[static_cast<size_t>((o * n + k) * inner + i)] +=
                                               g[static_cast<size_t>(o * inner + i)];
                           });
}

inline Tensor mean(const Tensor& x) { return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel())); }

inline Tensor mean(const Tensor& x, int64_t axis, bool keepdim = false) {
    int64_t ax = axis < 0 ? axis + x.ndim() : axis;
    double inv = 1.0 / static_cast<double>(x.shape()[static_cast<size_t>(ax)]);
    return mul_scalar(sum(x, axis, keepdim), inv);
}

// ---------------------------------------------------------------------------
// softmax along an axis, max-subtracted for stability; fused backward.
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& x, int64_t axis) {
    const Shape& s = x.shape();
    if (axis < 0) axis += static_cast<int64_t>(s.size());
    if (axis < 0 || axis >= static_cast<int64_t>(s.size()))
        throw ShapeError("softmax axis out of range for " + shape_str(s));
    int64_t outer = 1, inner = 1, n = s[static_cast<size_t>(axis)];
    for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];

    std::vector<double> data(x.node_->data.size());
    const auto& src = x.node_->data;
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            double m = -std::numeric_limits<double>::infinity();
            for (int64_t k = 0; k < n; ++k)
                m = std::max(m, src[static_cast<size_t>((o * n + k) * inner + i)]);
            double z = 0.0;
            for (int64_t k = 0; k < n; ++k) {
                size_t at = static_cast<size_t>((o * n + k) * inner + i);
                data[at] = std::exp(src[at] - m);
                z += data[at];
            }
            for (int64_t k = 0; k < n; ++k) data[static_cast<size_t>((o * n + k) * inner + i)] /= z;
        }

    return Tensor::make_op(
        "softmax", s, std::move(data), {x}, [x, outer, inner, n](const Tensor& self) {
            if (!x.requires_grad()) return;
            auto& gx = x.node_->grad_ref();
            const auto& g = self.node_->grad;
            const auto& y = self.node_->data;
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t i = 0; i < inner; ++i) {
                    double dot = 0.0;
                    for (int64_t k = 0; k < n; ++k) {
                        size_t at = static_cast<size_t>((o * n + k) * inner + i);
                        dot += g[at] * y[at];
                    }
                    for (int64_t k = 0; k < n; ++k) {
                        size_t at = static_cast<size_t>((o * n + k) * inner + i);
                        gx[at] += y[at] * (g[at] - dot);
                    }
                }
        });
}

// ---------------------------------------------------------------------------
// matmul: [.., p, q] x [.., q, r] -> [.., p, r], batch dims broadcast.
// C[i,j] accumulates over k in ascending order.
// ---------------------------------------------------------------------------

namespace detail {

inline void mm_nn(const double* A, const double* B, double* C, int64_t p, int64_t q, int64_t r) {
    for (int64_t i = 0; i < p; ++i)
        for (int64_t k = 0; k < q; ++k) {
            double a = A[i * q + k];
            const double* brow = B + k * r;
            double* crow = C + i * r;
            for (int64_t j = 0; j < r; ++j) crow[j] += a * brow[j];
        }
}
// C[i,j] += sum_k A[i,k] * B[j,k]
inline void mm_nt(const double* A, const double* B, double* C, int64_t p, int64_t q, int64_t r) {
    for (int64_t i = 0; i < p; ++i)
        for (int64_t j = 0; j < r; ++j) {
            double acc = 0.0;
            const double* arow = A + i * q;
            const double* brow = B + j * q;
            for (int64_t k = 0; k < q; ++k) acc += arow[k] * brow[k];
            C[i * r + j] += acc;
        }
}
// C[i,j] += sum_k A[k,i] * B[k,j]
inline void mm_tn(const double* A, const double* B, double* C, int64_t p, int64_t q, int64_t r) {
    for (int64_t k = 0; k < q; ++k) {
        const double* arow = A + k * p;
        const double* brow = B + k * r;
        for (int64_t i = 0; i < p; ++i) {
            double a = arow[i];
            double* crow = C + i * r;
            for (int64_t j = 0; j < r; ++j) crow[j] += a * brow[j];
        }
    }
}

struct MatmulPlan {
    Shape out;
    Shape batch;                 // broadcast batch dims
    std::vector<int64_t> a_off;  // per-batch element offsets
    std::vector<int64_t> b_off;
    int64_t p, q, r;
};

inline MatmulPlan matmul_plan(const Shape& as, const Shape& bs) {
    if (as.size() < 2 || bs.size() < 2)
        throw ShapeError("matmul needs rank >= 2, got " + shape_str(as) + " and " + shape_str(bs));
    MatmulPlan pl{};
    pl.p = as[as.size() - 2];
    pl.q = as[as.size() - 1];
    int64_t q2 = bs[bs.size() - 2];
    pl.r = bs[bs.size() - 1];
    if (pl.q != q2)
        throw ShapeError("matmul inner dim mismatch: " + shape_str(as) + " x " + shape_str(bs));
    Shape abatch(as.begin(), as.end() - 2), bbatch(bs.begin(), bs.end() - 2);
    pl.batch = broadcast_shape(abatch, bbatch);
    pl.out = pl.batch;
    pl.out.push_back(pl.p);
    pl.out.push_back(pl.r);

    int64_t nb = shape_numel(pl.batch);
    if (pl.batch.empty()) nb = 1;
    pl.a_off.resize(static_cast<size_t>(nb));
    pl.b_off.resize(static_cast<size_t>(nb));
    auto sa = bcast_strides(abatch, pl.batch);
    auto sb = bcast_strides(bbatch, pl.batch);
    size_t nd = pl.batch.size();
    std::vector<int64_t> idx(nd, 0);
    int64_t oa = 0, ob = 0;
    for (int64_t f = 0; f < nb; ++f) {
        pl.a_off[static_cast<size_t>(f)] = oa * pl.p * pl.q;
        pl.b_off[static_cast<size_t>(f)] = ob * pl.q * pl.r;
        for (int64_t d = static_cast<int64_t>(nd) - 1; d >= 0; --d) {
            size_t ud = static_cast<size_t>(d);
            ++idx[ud];
            oa += sa[ud];
            ob += sb[ud];
            if (idx[ud] < pl.batch[ud]) break;
            oa -= sa[ud] * pl.batch[ud];
            ob -= sb[ud] * pl.batch[ud];
            idx[ud] = 0;
        }
    }
    return pl;
}

}  // namespace detail

inline Tensor matmul(const Tensor& A, const Tensor& B) {
    auto pl = detail::matmul_plan(A.shape(), B.shape());
    int64_t nb = static_cast<int64_t>(pl.a_off.size());
    std::vector<double> data(static_cast<size_t>(nb * pl.p * pl.r), 0.0);
    const auto& ad = A.node_->data;
    const auto& bd = B.node_->data;
    for (int64_t f = 0; f < nb; ++f)
        detail::mm_nn(&ad[static_cast<size_t>(pl.a_off[static_cast<size_t>(f)])],
                      &bd[static_cast<size_t>(pl.b_off[static_cast<size_t>(f)])],
                      &data[static_cast<size_t>(f * pl.p * pl.r)], pl.p, pl.q, pl.r);

    return Tensor::make_op(
        "matmul", pl.out, std::move(data), {A, B}, [A, B, pl, nb](const Tensor& self) {
            const auto& g = self.node_->grad;
            const auto& ad = A.node_->data;
            const auto& bd = B.node_->data;
            if (A.requires_grad()) {
                auto& ga = A.node_->grad_ref();
                for (int64_t f = 0; f < nb; ++f)
                    detail::mm_nt(&g[static_cast<size_t>(f * pl.p * pl.r)],
                                  &bd[static_cast<size_t>(pl.b_off[static_cast<size_t>(f)])],
                                  &ga[static_cast<size_t>(pl.a_off[static_cast<size_t>(f)])], pl.p,
                                  pl.r, pl.q);
            }
            if (B.requires_grad()) {
                auto& gb = B.node_->grad_ref();
                for (int64_t f = 0; f < nb; ++f)
                    detail::mm_tn(&ad[static_cast<size_t>(pl.a_off[static_cast<size_t>(f)])],
                                  &g[static_cast<size_t>(f * pl.p * pl.r)],
                                  &gb[static_cast<size_t>(pl.b_off[static_cast<size_t>(f)])], pl.q,
                                  pl.p, pl.r);
            }
        });
}

// ---------------------------------------------------------------------------
// RNG-backed factories
// ---------------------------------------------------------------------------

enum class Dist { uniform, normal };

inline Tensor rng_tensor(Rng& rng, const Shape& shape, Dist dist, bool requires_grad = false) {
    if (shape.empty()) throw ShapeError("empty shape");
    for (int64_t d : shape)
        if (d < 1) throw ShapeError("empty shape");
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    for (double& v : data) v = dist == Dist::uniform ? rng.uniform() : rng.normal();
    return Tensor::from(shape, std::move(data), requires_grad);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

inline void Tensor::backward() const {
    if (!node_) throw GradError("backward on empty tensor");
    if (numel() != 1)
        throw GradError("backward requires a scalar loss, got shape " + shape_str(shape()));
    if (!node_->requires_grad) throw GradError("backward on tensor that requires no grad");

    // post-order DFS
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            detail::Node* p = n->parents[i++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->grad_ref()[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (!n->backward) continue;
        Tensor self;
        // non-owning view onto n; the graph keeps it alive for the duration
        self.node_ = std::shared_ptr<detail::Node>(n, [](detail::Node*) {});
        n->backward(self);
        for (auto& p : n->parents) {
            for (double v : p->grad)
                if (std::isnan(v))
                    throw GradError(std::string("NaN gradient produced by op '") + n->op + "'");
        }
    }
}

// ---------------------------------------------------------------------------
// grad_check: analytic gradient vs central finite differences, run in f64.
// Relative error uses max(1, |a|, |n|) in the denominator so tiny gradients
// are compared absolutely.
// ---------------------------------------------------------------------------

inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps = 1e-6) {
    PrecisionGuard pg(Precision::f64);
    Tensor xv = Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()),
                             /*requires_grad=*/true);
    Tensor y = f(xv);
    if (y.numel() != 1) throw GradError("grad_check target must return a scalar");
    y.backward();
    std::vector<double> analytic(xv.grad().begin(), xv.grad().end());

    std::vector<double> base(x.data().begin(), x.data().end());
    double worst = 0.0;
    for (size_t i = 0; i < base.size(); ++i) {
        auto probe = [&](double delta) {
            std::vector<double> v = base;
            v[i] += delta;
            NoGradGuard ng;
            return f(Tensor::from(x.shape(), std::move(v))).item();
        };
        double num = (probe(eps) - probe(-eps)) / (2.0 * eps);
        double a = analytic[i];
        double rel = std::abs(a - num) / std::max({1.0, std::abs(a), std::abs(num)});
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace mcdm
