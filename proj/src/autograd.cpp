#include "schvpp/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <unordered_set>

#include <Eigen/Core>

#include "schvpp/error.hpp"

namespace schvpp {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
Tensor<T>& Node<T>::grad_buffer() {
    if (grad.data.empty()) grad = Tensor<T>(value.shape);
    return grad;
}

template <typename T>
void Node<T>::accumulate(std::span<const T> g) {
    auto& buf = grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) buf.data[i] += g[i];
}

template <typename T>
Tensor<T> Var<T>::grad() const {
    if (!node_ || node_->grad.data.empty()) return Tensor<T>(shape());
    return node_->grad;
}

template <typename T>
Var<T> constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var<T>(std::move(n));
}

template <typename T>
Var<T> leaf(Tensor<T> value, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var<T>(std::move(n));
}

namespace {

template <typename T>
Var<T> make_node(Tensor<T> value, std::initializer_list<const Var<T>*> parents,
                 std::function<void(Node<T>&)> bw) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    for (const Var<T>* p : parents) n->requires_grad = n->requires_grad || p->requires_grad();
    if (n->requires_grad) {
        for (const Var<T>* p : parents) n->parents.push_back(p->shared());
        n->backward = std::move(bw);
    }
    return Var<T>(std::move(n));
}

template <typename T>
bool wants(const Node<T>* n) {
    return n->requires_grad;
}

void require_rank(const Shape& s, std::size_t r, const char* what) {
    if (s.size() != r)
        throw InvalidArgument(std::string(what) + ": expected rank " + std::to_string(r) + ", got shape " +
                              shape_str(s));
}

template <typename T>
void run_backward(Node<T>* root) {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node<T>* p = n->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && !n->grad.data.empty()) n->backward(*n);
    }
}

} // namespace

template <typename T>
void backward(const Var<T>& root) {
    if (root.value().numel() != 1) throw InvalidArgument("backward: root must be a scalar");
    backward(root, Tensor<T>(root.shape(), T(1)));
}

template <typename T>
void backward(const Var<T>& root, const Tensor<T>& seed) {
    require_same_shape(root.shape(), seed.shape, "backward seed");
    if (!root.requires_grad()) return;
    root.node()->accumulate(seed.span());
    run_backward(root.node());
}

namespace {
thread_local KinkProbe* active_probe = nullptr;
} // namespace

KinkProbe::KinkProbe() : previous_(active_probe) {
    active_probe = this;
}

KinkProbe::~KinkProbe() {
    active_probe = previous_;
}

KinkProbe* KinkProbe::active() {
    return active_probe;
}

void KinkProbe::record(std::span<const bool> positive) {
    // FNV-1a over the branch pattern, chained across calls.
    std::uint64_t h = signature_ ^ 0xcbf29ce484222325ULL;
    for (bool b : positive) h = (h ^ std::uint64_t(b)) * 0x100000001b3ULL;
    signature_ = (h ^ positive.size()) * 0x100000001b3ULL;
}

namespace ops {

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
    Node<T>* pa = a.node();
    Node<T>* pb = b.node();
    return make_node<T>(std::move(out), {&a, &b}, [pa, pb](Node<T>& self) {
        if (wants(pa)) pa->accumulate(self.grad.span());
        if (wants(pb)) pb->accumulate(self.grad.span());
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "sub");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
    Node<T>* pa = a.node();
    Node<T>* pb = b.node();
    return make_node<T>(std::move(out), {&a, &b}, [pa, pb](Node<T>& self) {
        if (wants(pa)) pa->accumulate(self.grad.span());
        if (wants(pb)) {
            auto& g = pb->grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "mul");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
    Node<T>* pa = a.node();
    Node<T>* pb = b.node();
    return make_node<T>(std::move(out), {&a, &b}, [pa, pb](Node<T>& self) {
        if (wants(pa)) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * pb->value[i];
        }
        if (wants(pb)) {
            auto& g = pb->grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * pa->value[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * s;
    Node<T>* pa = a.node();
    return make_node<T>(std::move(out), {&a}, [pa, s](Node<T>& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * s;
    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    if (shape_numel(shape) != a.value().numel())
        throw InvalidArgument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    Tensor<T> out = a.value().reshaped(std::move(shape));
    Node<T>* pa = a.node();
    return make_node<T>(std::move(out), {&a}, [pa](Node<T>& self) { pa->accumulate(self.grad.span()); });
}

template <typename T>
Var<T> prelu(const Var<T>& x, const Var<T>& slope) {
    if (slope.value().numel() != 1) throw InvalidArgument("prelu: slope must hold one value");
    const T a = slope.value()[0];
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const T v = x.value()[i];
        out[i] = v > T(0) ? v : a * v;
    }
    if (KinkProbe* probe = KinkProbe::active()) {
        std::unique_ptr<bool[]> side(new bool[x.value().numel()]);
        for (std::size_t i = 0; i < x.value().numel(); ++i) side[i] = x.value()[i] > T(0);
        probe->record({side.get(), x.value().numel()});
    }
    Node<T>* px = x.node();
    Node<T>* ps = slope.node();
    return make_node<T>(std::move(out), {&x, &slope}, [px, ps](Node<T>& self) {
        const T a = ps->value[0];
        const auto& xv = px->value;
        if (wants(px)) {
            auto& g = px->grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * (xv[i] > T(0) ? T(1) : a);
        }
        if (wants(ps)) {
            double acc = 0;
            for (std::size_t i = 0; i < xv.numel(); ++i)
                if (!(xv[i] > T(0))) acc += double(self.grad[i]) * double(xv[i]);
            ps->grad_buffer()[0] += T(acc);
        }
    });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const T v = x.value()[i];
        out[i] = T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
    }
    Node<T>* px = x.node();
    return make_node<T>(std::move(out), {&x}, [px](Node<T>& self) {
        auto& g = px->grad_buffer();
        const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
        for (std::size_t i = 0; i < g.numel(); ++i) {
            const T v = px->value[i];
            const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
            const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
            g[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const T v = x.value()[i];
        if (v >= T(0)) {
            out[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            out[i] = e / (T(1) + e);
        }
    }
    Node<T>* px = x.node();
    return make_node<T>(std::move(out), {&x}, [px](Node<T>& self) {
        auto& g = px->grad_buffer();
        for (std::size_t i = 0; i < g.numel(); ++i) {
            const T y = self.value[i];
            g[i] += self.grad[i] * y * (T(1) - y);
        }
    });
}

namespace {

struct ConvGeom {
    std::size_t cin, h, w, cout, k, stride, pad, ho, wo;
};

/// Output columns [lo, hi) whose input column ox * stride + kx - pad is inside the row.
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeom& g, std::size_t kx) {
    const std::size_t lo = kx >= g.pad ? 0 : (g.pad - kx + g.stride - 1) / g.stride;
    if (g.w + g.pad <= kx) return {0, 0};
    const std::size_t hi = std::min(g.wo, (g.w - 1 + g.pad - kx) / g.stride + 1);
    return {std::min(lo, hi), hi};
}

/// Columns for output rows [y0, y1); `cols` is [cin*k*k, (y1-y0)*wo].
template <typename T>
void im2col(const T* x, const ConvGeom& g, std::size_t y0, std::size_t y1, T* cols) {
    const std::size_t n = (y1 - y0) * g.wo;
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ky = 0; ky < g.k; ++ky)
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                T* row = cols + ((c * g.k + ky) * g.k + kx) * n;
                const auto [lo, hi] = valid_columns(g, kx);
                for (std::size_t oy = y0; oy < y1; ++oy) {
                    const long iy = long(oy * g.stride + ky) - long(g.pad);
                    T* dst = row + (oy - y0) * g.wo;
                    if (iy < 0 || iy >= long(g.h)) {
                        std::fill(dst, dst + g.wo, T(0));
                        continue;
                    }
                    std::fill(dst, dst + lo, T(0));
                    std::fill(dst + hi, dst + g.wo, T(0));
                    if (hi == lo) continue;
                    const T* src = x + (c * g.h + std::size_t(iy)) * g.w + (lo * g.stride + kx - g.pad);
                    if (g.stride == 1) {
                        std::copy(src, src + (hi - lo), dst + lo);
                    } else {
                        for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[(ox - lo) * g.stride];
                    }
                }
            }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, std::size_t y0, std::size_t y1, T* dx) {
    const std::size_t n = (y1 - y0) * g.wo;
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ky = 0; ky < g.k; ++ky)
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const T* row = cols + ((c * g.k + ky) * g.k + kx) * n;
                const auto [lo, hi] = valid_columns(g, kx);
                for (std::size_t oy = y0; oy < y1; ++oy) {
                    const long iy = long(oy * g.stride + ky) - long(g.pad);
                    if (iy < 0 || iy >= long(g.h) || hi == lo) continue;
                    T* dst = dx + (c * g.h + std::size_t(iy)) * g.w + (lo * g.stride + kx - g.pad);
                    const T* src = row + (oy - y0) * g.wo;
                    for (std::size_t ox = lo; ox < hi; ++ox) dst[(ox - lo) * g.stride] += src[ox];
                }
            }
}

/// Output rows per im2col band, sized so one band of columns stays in cache.
inline std::size_t band_rows(const ConvGeom& g) {
    const std::size_t budget = (std::size_t(1) << 20) / sizeof(float);
    const std::size_t per_row = g.cin * g.k * g.k * g.wo;
    return std::clamp<std::size_t>(budget / std::max<std::size_t>(per_row, 1), 1, g.ho);
}

} // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride, std::size_t pad) {
    require_rank(x.shape(), 3, "conv2d input");
    require_rank(w.shape(), 4, "conv2d weight");
    ConvGeom g{};
    g.cin = x.dim(0);
    g.h = x.dim(1);
    g.w = x.dim(2);
    g.cout = w.dim(0);
    g.k = w.dim(2);
    g.stride = stride;
    g.pad = pad;
    if (w.dim(1) != g.cin || w.dim(3) != g.k)
        throw InvalidArgument("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                              shape_str(x.shape()));
    if (b.value().numel() != g.cout) throw InvalidArgument("conv2d: bias size mismatch");
    if (stride == 0 || g.h + 2 * pad < g.k || g.w + 2 * pad < g.k)
        throw InvalidArgument("conv2d: kernel larger than padded input");
    g.ho = (g.h + 2 * pad - g.k) / stride + 1;
    g.wo = (g.w + 2 * pad - g.k) / stride + 1;

    const std::size_t kk = g.cin * g.k * g.k;
    const std::size_t n = g.ho * g.wo;
    const bool pointwise = g.k == 1 && stride == 1 && pad == 0;

    Tensor<T> out(Shape{g.cout, g.ho, g.wo});
    {
        MatMap<T> y(out.ptr(), long(g.cout), long(n));
        ConstMatMap<T> wm(w.value().ptr(), long(g.cout), long(kk));
        if (pointwise) {
            y.noalias() = wm * ConstMatMap<T>(x.value().ptr(), long(kk), long(n));
        } else {
            const std::size_t band = band_rows(g);
            AlignedVector<T> cols(kk * band * g.wo);
            for (std::size_t y0 = 0; y0 < g.ho; y0 += band) {
                const std::size_t y1 = std::min(g.ho, y0 + band), m = (y1 - y0) * g.wo;
                im2col(x.value().ptr(), g, y0, y1, cols.data());
                y.middleCols(long(y0 * g.wo), long(m)).noalias() = wm * ConstMatMap<T>(cols.data(), long(kk), long(m));
            }
        }
        for (std::size_t o = 0; o < g.cout; ++o) y.row(long(o)).array() += b.value()[o];
    }

    Node<T>* px = x.node();
    Node<T>* pw = w.node();
    Node<T>* pb = b.node();
    return make_node<T>(std::move(out), {&x, &w, &b}, [px, pw, pb, g, kk, n, pointwise](Node<T>& self) {
        ConstMatMap<T> dy(self.grad.ptr(), long(g.cout), long(n));
        ConstMatMap<T> wm(pw->value.ptr(), long(g.cout), long(kk));
        if (wants(pb)) {
            auto& db = pb->grad_buffer();
            for (std::size_t o = 0; o < g.cout; ++o) {
                T acc = T(0);
                for (long k = 0; k < dy.cols(); ++k) acc += dy(long(o), k);
                db[o] += acc;
            }
        }
        if (pointwise) {
            ConstMatMap<T> xm(px->value.ptr(), long(kk), long(n));
            if (wants(pw)) {
                MatMap<T> dw(pw->grad_buffer().ptr(), long(g.cout), long(kk));
                dw.noalias() += dy * xm.transpose();
            }
            if (wants(px)) {
                MatMap<T> dx(px->grad_buffer().ptr(), long(kk), long(n));
                dx.noalias() += wm.transpose() * dy;
            }
            return;
        }
        const std::size_t band = band_rows(g);
        AlignedVector<T> cols(kk * band * g.wo);
        RowMat<T> dcols;
        for (std::size_t y0 = 0; y0 < g.ho; y0 += band) {
            const std::size_t y1 = std::min(g.ho, y0 + band), m = (y1 - y0) * g.wo;
            const auto dy_band = dy.middleCols(long(y0 * g.wo), long(m));
            if (wants(pw)) {
                im2col(px->value.ptr(), g, y0, y1, cols.data());
                MatMap<T> dw(pw->grad_buffer().ptr(), long(g.cout), long(kk));
                dw.noalias() += dy_band * ConstMatMap<T>(cols.data(), long(kk), long(m)).transpose();
            }
            if (wants(px)) {
                dcols.noalias() = wm.transpose() * dy_band;
                col2im_add(dcols.data(), g, y0, y1, px->grad_buffer().ptr());
            }
        }
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    require_rank(w.shape(), 2, "linear weight");
    const std::size_t cout = w.dim(0);
    const std::size_t cin = w.dim(1);
    const bool vector_in = x.shape().size() == 1;
    if (!vector_in) require_rank(x.shape(), 2, "linear input");
    const std::size_t rows = vector_in ? 1 : x.dim(0);
    const std::size_t xin = vector_in ? x.dim(0) : x.dim(1);
    if (xin != cin) throw InvalidArgument("linear: input width " + std::to_string(xin) + " vs weight " + shape_str(w.shape()));
    if (b.value().numel() != cout) throw InvalidArgument("linear: bias size mismatch");

    Tensor<T> out(vector_in ? Shape{cout} : Shape{rows, cout});
    MatMap<T> y(out.ptr(), long(rows), long(cout));
    y.noalias() = ConstMatMap<T>(x.value().ptr(), long(rows), long(cin)) *
                  ConstMatMap<T>(w.value().ptr(), long(cout), long(cin)).transpose();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < cout; ++o) y(long(r), long(o)) += b.value()[o];

    Node<T>* px = x.node();
    Node<T>* pw = w.node();
    Node<T>* pb = b.node();
    return make_node<T>(std::move(out), {&x, &w, &b}, [px, pw, pb, rows, cin, cout](Node<T>& self) {
        ConstMatMap<T> dy(self.grad.ptr(), long(rows), long(cout));
        if (wants(px)) {
            MatMap<T> dx(px->grad_buffer().ptr(), long(rows), long(cin));
            dx.noalias() += dy * ConstMatMap<T>(pw->value.ptr(), long(cout), long(cin));
        }
        if (wants(pw)) {
            MatMap<T> dw(pw->grad_buffer().ptr(), long(cout), long(cin));
            dw.noalias() += dy.transpose() * ConstMatMap<T>(px->value.ptr(), long(rows), long(cin));
        }
        if (wants(pb)) {
            auto& db = pb->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t o = 0; o < cout; ++o) db[o] += dy(long(r), long(o));
        }
    });
}

template <typename T>
Var<T> layer_norm_rows(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
    require_rank(x.shape(), 2, "layer_norm input");
    const std::size_t rows = x.dim(0);
    const std::size_t c = x.dim(1);
    if (gamma.value().numel() != c || beta.value().numel() != c)
        throw InvalidArgument("layer_norm: affine size mismatch");

    Tensor<T> out(x.shape());
    AlignedVector<T> xhat(rows * c);
    AlignedVector<T> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = x.value().ptr() + r * c;
        double mean = 0;
        for (std::size_t j = 0; j < c; ++j) mean += row[j];
        mean /= double(c);
        double var = 0;
        for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= double(c);
        inv_std[r] = T(1.0 / std::sqrt(var + double(eps)));
        for (std::size_t j = 0; j < c; ++j) {
            const T xh = T((row[j] - mean)) * inv_std[r];
            xhat[r * c + j] = xh;
            out[r * c + j] = gamma.value()[j] * xh + beta.value()[j];
        }
    }

    Node<T>* px = x.node();
    Node<T>* pg = gamma.node();
    Node<T>* pbt = beta.node();
    return make_node<T>(std::move(out), {&x, &gamma, &beta},
                        [px, pg, pbt, rows, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
                            if (wants(pg) || wants(pbt)) {
                                auto& dg = pg->grad_buffer();
                                auto& db = pbt->grad_buffer();
                                for (std::size_t r = 0; r < rows; ++r)
                                    for (std::size_t j = 0; j < c; ++j) {
                                        dg[j] += self.grad[r * c + j] * xhat[r * c + j];
                                        db[j] += self.grad[r * c + j];
                                    }
                            }
                            if (!wants(px)) return;
                            auto& dx = px->grad_buffer();
                            for (std::size_t r = 0; r < rows; ++r) {
                                double m1 = 0, m2 = 0;
                                for (std::size_t j = 0; j < c; ++j) {
                                    const double dxh = double(self.grad[r * c + j]) * pg->value[j];
                                    m1 += dxh;
                                    m2 += dxh * xhat[r * c + j];
                                }
                                m1 /= double(c);
                                m2 /= double(c);
                                for (std::size_t j = 0; j < c; ++j) {
                                    const double dxh = double(self.grad[r * c + j]) * pg->value[j];
                                    dx[r * c + j] += T(double(inv_std[r]) * (dxh - m1 - xhat[r * c + j] * m2));
                                }
                            }
                        });
}

template <typename T>
Var<T> softmax_all(const Var<T>& x) {
    const auto& v = x.value();
    if (v.numel() == 0) throw InvalidArgument("softmax_all: empty input");
    const T mx = *std::max_element(v.data.begin(), v.data.end());
    Tensor<T> out(v.shape);
    double total = 0;
    for (std::size_t i = 0; i < v.numel(); ++i) {
        const double e = std::exp(double(v[i] - mx));
        out[i] = T(e);
        total += e;
    }
    for (auto& o : out.data) o = T(double(o) / total);
    Node<T>* px = x.node();
    return make_node<T>(std::move(out), {&x}, [px](Node<T>& self) {
        double dot = 0;
        for (std::size_t i = 0; i < self.value.numel(); ++i) dot += double(self.grad[i]) * self.value[i];
        auto& g = px->grad_buffer();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += T(self.value[i] * (self.grad[i] - dot));
    });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    require_rank(x.shape(), 3, "global_avg_pool");
    const std::size_t c = x.dim(0);
    const std::size_t hw = x.dim(1) * x.dim(2);
    Tensor<T> out(Shape{c});
    for (std::size_t k = 0; k < c; ++k) {
        double acc = 0;
        const T* p = x.value().ptr() + k * hw;
        for (std::size_t i = 0; i < hw; ++i) acc += p[i];
        out[k] = T(acc / double(hw));
    }
    Node<T>* px = x.node();
    return make_node<T>(std::move(out), {&x}, [px, c, hw](Node<T>& self) {
        auto& g = px->grad_buffer();
        for (std::size_t k = 0; k < c; ++k) {
            const T d = self.grad[k] / T(hw);
            for (std::size_t i = 0; i < hw; ++i) g[k * hw + i] += d;
        }
    });
}

template <typename T>
Var<T> channel_dot(const Var<T>& q, const Var<T>& k) {
    require_rank(k.shape(), 3, "channel_dot key");
    const std::size_t c = k.dim(0);
    const std::size_t hw = k.dim(1) * k.dim(2);
    if (q.value().numel() != c) throw InvalidArgument("channel_dot: query length does not match key channels");
    Tensor<T> out(Shape{k.dim(1), k.dim(2)});
    for (std::size_t ch = 0; ch < c; ++ch) {
        const T qc = q.value()[ch];
        const T* kp = k.value().ptr() + ch * hw;
        for (std::size_t i = 0; i < hw; ++i) out[i] += qc * kp[i];
    }
    Node<T>* pq = q.node();
    Node<T>* pk = k.node();
    return make_node<T>(std::move(out), {&q, &k}, [pq, pk, c, hw](Node<T>& self) {
        if (wants(pq)) {
            auto& g = pq->grad_buffer();
            for (std::size_t ch = 0; ch < c; ++ch) {
                double acc = 0;
                const T* kp = pk->value.ptr() + ch * hw;
                for (std::size_t i = 0; i < hw; ++i) acc += double(self.grad[i]) * kp[i];
                g[ch] += T(acc);
            }
        }
        if (wants(pk)) {
            auto& g = pk->grad_buffer();
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < hw; ++i) g[ch * hw + i] += pq->value[ch] * self.grad[i];
        }
    });
}

template <typename T>
Var<T> mul_channel(const Var<T>& x, const Var<T>& v) {
    require_rank(x.shape(), 3, "mul_channel");
    const std::size_t c = x.dim(0);
    const std::size_t hw = x.dim(1) * x.dim(2);
    if (v.value().numel() != c) throw InvalidArgument("mul_channel: vector length does not match channels");
    Tensor<T> out(x.shape());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = x.value()[ch * hw + i] * v.value()[ch];
    Node<T>* px = x.node();
    Node<T>* pv = v.node();
    return make_node<T>(std::move(out), {&x, &v}, [px, pv, c, hw](Node<T>& self) {
        if (wants(px)) {
            auto& g = px->grad_buffer();
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < hw; ++i) g[ch * hw + i] += self.grad[ch * hw + i] * pv->value[ch];
        }
        if (wants(pv)) {
            auto& g = pv->grad_buffer();
            for (std::size_t ch = 0; ch < c; ++ch) {
                double acc = 0;
                for (std::size_t i = 0; i < hw; ++i) acc += double(self.grad[ch * hw + i]) * px->value[ch * hw + i];
                g[ch] += T(acc);
            }
        }
    });
}

template <typename T>
Var<T> mul_spatial(const Var<T>& x, const Var<T>& m) {
    require_rank(x.shape(), 3, "mul_spatial");
    const std::size_t c = x.dim(0);
    const std::size_t hw = x.dim(1) * x.dim(2);
    if (m.shape() != Shape{x.dim(1), x.dim(2)})
        throw InvalidArgument("mul_spatial: map " + shape_str(m.shape()) + " vs feature " + shape_str(x.shape()));
    Tensor<T> out(x.shape());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = x.value()[ch * hw + i] * m.value()[i];
    Node<T>* px = x.node();
    Node<T>* pm = m.node();
    return make_node<T>(std::move(out), {&x, &m}, [px, pm, c, hw](Node<T>& self) {
        if (wants(px)) {
            auto& g = px->grad_buffer();
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < hw; ++i) g[ch * hw + i] += self.grad[ch * hw + i] * pm->value[i];
        }
        if (wants(pm)) {
            auto& g = pm->grad_buffer();
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < hw; ++i) g[i] += self.grad[ch * hw + i] * px->value[ch * hw + i];
        }
    });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    require_rank(a.shape(), 3, "concat_channels");
    require_rank(b.shape(), 3, "concat_channels");
    if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
        throw InvalidArgument("concat_channels: spatial size mismatch " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
    Tensor<T> out(Shape{a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
    std::copy(a.value().data.begin(), a.value().data.end(), out.data.begin());
    std::copy(b.value().data.begin(), b.value().data.end(), out.data.begin() + long(a.value().numel()));
    Node<T>* pa = a.node();
    Node<T>* pb = b.node();
    return make_node<T>(std::move(out), {&a, &b}, [pa, pb](Node<T>& self) {
        const std::size_t na = pa->value.numel();
        if (wants(pa)) pa->accumulate(std::span<const T>(self.grad.ptr(), na));
        if (wants(pb)) pb->accumulate(std::span<const T>(self.grad.ptr() + na, pb->value.numel()));
    });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t end) {
    require_rank(x.shape(), 3, "slice_channels");
    if (begin >= end || end > x.dim(0)) throw InvalidArgument("slice_channels: bad channel range");
    const std::size_t hw = x.dim(1) * x.dim(2);
    Tensor<T> out(Shape{end - begin, x.dim(1), x.dim(2)});
    std::copy_n(x.value().ptr() + begin * hw, out.numel(), out.ptr());
    Node<T>* px = x.node();
    return make_node<T>(std::move(out), {&x}, [px, begin, hw](Node<T>& self) {
        auto& g = px->grad_buffer();
        for (std::size_t i = 0; i < self.grad.numel(); ++i) g[begin * hw + i] += self.grad[i];
    });
}

template <typename T>
Var<T> grid_to_rows(const Var<T>& x) {
    require_rank(x.shape(), 3, "grid_to_rows");
    const std::size_t c = x.dim(0);
    const std::size_t n = x.dim(1) * x.dim(2);
    Tensor<T> out(Shape{n, c});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < n; ++p) out[p * c + ch] = x.value()[ch * n + p];
    Node<T>* px = x.node();
    return make_node<T>(std::move(out), {&x}, [px, c, n](Node<T>& self) {
        auto& g = px->grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < n; ++p) g[ch * n + p] += self.grad[p * c + ch];
    });
}

template <typename T>
Var<T> rows_to_grid(const Var<T>& x, std::size_t h, std::size_t w) {
    require_rank(x.shape(), 2, "rows_to_grid");
    const std::size_t n = x.dim(0);
    const std::size_t c = x.dim(1);
    if (n != h * w) throw InvalidArgument("rows_to_grid: row count does not match grid");
    Tensor<T> out(Shape{c, h, w});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < n; ++p) out[ch * n + p] = x.value()[p * c + ch];
    Node<T>* px = x.node();
    return make_node<T>(std::move(out), {&x}, [px, c, n](Node<T>& self) {
        auto& g = px->grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < n; ++p) g[p * c + ch] += self.grad[ch * n + p];
    });
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::vector<std::size_t> index) {
    require_rank(x.shape(), 2, "gather_rows");
    const std::size_t n = x.dim(0);
    const std::size_t c = x.dim(1);
    Tensor<T> out(Shape{index.size(), c});
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= n) throw OutOfRange("gather_rows: index out of range");
        std::copy_n(x.value().ptr() + index[i] * c, c, out.ptr() + i * c);
    }
    Node<T>* px = x.node();
    return make_node<T>(std::move(out), {&x}, [px, c, index = std::move(index)](Node<T>& self) {
        auto& g = px->grad_buffer();
        for (std::size_t i = 0; i < index.size(); ++i)
            for (std::size_t j = 0; j < c; ++j) g[index[i] * c + j] += self.grad[i * c + j];
    });
}

namespace {

// Offset in the [C*r*r, h, w] tensor that feeds output element (c, oy, ox)
// of the [C, h*r, w*r] tensor.
struct ShuffleMap {
    std::size_t c, h, w, r;
    std::size_t source(std::size_t ch, std::size_t oy, std::size_t ox) const {
        const std::size_t dy = oy % r, dx = ox % r;
        const std::size_t in_c = (ch * r + dy) * r + dx;
        return (in_c * h + oy / r) * w + ox / r;
    }
};

} // namespace

template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, std::size_t r) {
    require_rank(x.shape(), 3, "pixel_shuffle");
    if (r == 0 || x.dim(0) % (r * r) != 0)
        throw InvalidArgument("pixel_shuffle: channels " + std::to_string(x.dim(0)) + " not divisible by r^2");
    const ShuffleMap m{x.dim(0) / (r * r), x.dim(1), x.dim(2), r};
    Tensor<T> out(Shape{m.c, m.h * r, m.w * r});
    std::size_t o = 0;
    for (std::size_t ch = 0; ch < m.c; ++ch)
        for (std::size_t oy = 0; oy < m.h * r; ++oy)
            for (std::size_t ox = 0; ox < m.w * r; ++ox) out[o++] = x.value()[m.source(ch, oy, ox)];
    Node<T>* px = x.node();
    return make_node<T>(std::move(out), {&x}, [px, m](Node<T>& self) {
        auto& g = px->grad_buffer();
        std::size_t o = 0;
        for (std::size_t ch = 0; ch < m.c; ++ch)
            for (std::size_t oy = 0; oy < m.h * m.r; ++oy)
                for (std::size_t ox = 0; ox < m.w * m.r; ++ox) g[m.source(ch, oy, ox)] += self.grad[o++];
    });
}

template <typename T>
Var<T> pixel_unshuffle(const Var<T>& x, std::size_t r) {
    require_rank(x.shape(), 3, "pixel_unshuffle");
    if (r == 0 || x.dim(1) % r != 0 || x.dim(2) % r != 0)
        throw InvalidArgument("pixel_unshuffle: spatial size not divisible by r");
    const ShuffleMap m{x.dim(0), x.dim(1) / r, x.dim(2) / r, r};
    Tensor<T> out(Shape{m.c * r * r, m.h, m.w});
    std::size_t o = 0;
    for (std::size_t ch = 0; ch < m.c; ++ch)
        for (std::size_t oy = 0; oy < m.h * r; ++oy)
            for (std::size_t ox = 0; ox < m.w * r; ++ox) out[m.source(ch, oy, ox)] = x.value()[o++];
    Node<T>* px = x.node();
    return make_node<T>(std::move(out), {&x}, [px, m](Node<T>& self) {
        auto& g = px->grad_buffer();
        std::size_t o = 0;
        for (std::size_t ch = 0; ch < m.c; ++ch)
            for (std::size_t oy = 0; oy < m.h * m.r; ++oy)
                for (std::size_t ox = 0; ox < m.w * m.r; ++ox) g[o++] += self.grad[m.source(ch, oy, ox)];
    });
}

namespace {

struct AttnGeom {
    std::size_t n, c, heads, d, t, windows;
};

AttnGeom attention_geometry(const Shape& qkv, std::size_t heads, std::size_t t) {
    require_rank(qkv, 2, "window_attention");
    if (qkv[1] % 3 != 0) throw InvalidArgument("window_attention: qkv width must be 3*C");
    AttnGeom g{qkv[0], qkv[1] / 3, heads, 0, t, 0};
    if (heads == 0 || g.c % heads != 0)
        throw InvalidArgument("window_attention: channels " + std::to_string(g.c) + " not divisible by heads " +
                              std::to_string(heads));
    if (t == 0 || g.n % t != 0) throw InvalidArgument("window_attention: token count not a multiple of window size");
    g.d = g.c / heads;
    g.windows = g.n / t;
    return g;
}

// probs has layout [windows, heads, t, t].
template <typename T>
void attention_probs(const T* qkv, const AttnGeom& g, T* probs) {
    const T scale = T(1) / std::sqrt(T(g.d));
    const std::size_t stride = 3 * g.c;
    std::vector<double> row(g.t);
    for (std::size_t win = 0; win < g.windows; ++win)
        for (std::size_t h = 0; h < g.heads; ++h) {
            T* p = probs + (win * g.heads + h) * g.t * g.t;
            for (std::size_t i = 0; i < g.t; ++i) {
                const T* q = qkv + (win * g.t + i) * stride + h * g.d;
                double mx = -INFINITY;
                for (std::size_t j = 0; j < g.t; ++j) {
                    const T* k = qkv + (win * g.t + j) * stride + g.c + h * g.d;
                    double s = 0;
                    for (std::size_t e = 0; e < g.d; ++e) s += double(q[e]) * k[e];
                    row[j] = s * scale;
                    mx = std::max(mx, row[j]);
                }
                double total = 0;
                for (std::size_t j = 0; j < g.t; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    total += row[j];
                }
                for (std::size_t j = 0; j < g.t; ++j) p[i * g.t + j] = T(row[j] / total);
            }
        }
}

} // namespace

template <typename T>
Tensor<T> window_attention_probs(const Tensor<T>& qkv, std::size_t heads, std::size_t tokens_per_window) {
    const AttnGeom g = attention_geometry(qkv.shape, heads, tokens_per_window);
    Tensor<T> probs(Shape{g.windows, g.heads, g.t, g.t});
    attention_probs(qkv.ptr(), g, probs.ptr());
    return probs;
}

template <typename T>
Var<T> window_attention(const Var<T>& qkv, std::size_t heads, std::size_t tokens_per_window) {
    const AttnGeom g = attention_geometry(qkv.shape(), heads, tokens_per_window);
    AlignedVector<T> probs(g.windows * g.heads * g.t * g.t);
    attention_probs(qkv.value().ptr(), g, probs.data());
    const std::size_t stride = 3 * g.c;
    Tensor<T> out(Shape{g.n, g.c});
    for (std::size_t win = 0; win < g.windows; ++win)
        for (std::size_t h = 0; h < g.heads; ++h) {
            const T* p = probs.data() + (win * g.heads + h) * g.t * g.t;
            for (std::size_t i = 0; i < g.t; ++i) {
                T* o = out.ptr() + (win * g.t + i) * g.c + h * g.d;
                for (std::size_t j = 0; j < g.t; ++j) {
                    const T* v = qkv.value().ptr() + (win * g.t + j) * stride + 2 * g.c + h * g.d;
                    const T pij = p[i * g.t + j];
                    for (std::size_t e = 0; e < g.d; ++e) o[e] += pij * v[e];
                }
            }
        }
    Node<T>* pq = qkv.node();
    return make_node<T>(std::move(out), {&qkv}, [pq, g, probs = std::move(probs)](Node<T>& self) {
        const T scale = T(1) / std::sqrt(T(g.d));
        const std::size_t stride = 3 * g.c;
        const T* x = pq->value.ptr();
        T* dx = pq->grad_buffer().ptr();
        AlignedVector<T> dp(g.t * g.t);
        for (std::size_t win = 0; win < g.windows; ++win)
            for (std::size_t h = 0; h < g.heads; ++h) {
                const T* p = probs.data() + (win * g.heads + h) * g.t * g.t;
                auto q_at = [&](std::size_t i) { return (win * g.t + i) * stride + h * g.d; };
                auto k_at = [&](std::size_t i) { return (win * g.t + i) * stride + g.c + h * g.d; };
                auto v_at = [&](std::size_t i) { return (win * g.t + i) * stride + 2 * g.c + h * g.d; };
                auto o_at = [&](std::size_t i) { return (win * g.t + i) * g.c + h * g.d; };
                // dV = P^T dO ; dP = dO V^T
                for (std::size_t i = 0; i < g.t; ++i) {
                    const T* dout = self.grad.ptr() + o_at(i);
                    for (std::size_t j = 0; j < g.t; ++j) {
                        const T pij = p[i * g.t + j];
                        T* dv = dx + v_at(j);
                        const T* v = x + v_at(j);
                        double acc = 0;
                        for (std::size_t e = 0; e < g.d; ++e) {
                            dv[e] += pij * dout[e];
                            acc += double(dout[e]) * v[e];
                        }
                        dp[i * g.t + j] = T(acc);
                    }
                }
                // dS = P * (dP - rowsum(dP * P)); dQ = dS K * scale; dK = dS^T Q * scale
                for (std::size_t i = 0; i < g.t; ++i) {
                    double dot = 0;
                    for (std::size_t j = 0; j < g.t; ++j) dot += double(dp[i * g.t + j]) * p[i * g.t + j];
                    for (std::size_t j = 0; j < g.t; ++j) {
                        const T ds = T(p[i * g.t + j] * (dp[i * g.t + j] - dot)) * scale;
                        T* dq = dx + q_at(i);
                        T* dk = dx + k_at(j);
                        const T* q = x + q_at(i);
                        const T* k = x + k_at(j);
                        for (std::size_t e = 0; e < g.d; ++e) {
                            dq[e] += ds * k[e];
                            dk[e] += ds * q[e];
                        }
                    }
                }
            }
    });
}

template <typename T>
Var<T> charbonnier(const Var<T>& a, const Var<T>& b, T eps) {
    require_same_shape(a.shape(), b.shape(), "charbonnier");
    if (!(eps > T(0))) throw InvalidArgument("charbonnier: eps must be positive");
    const std::size_t n = a.value().numel();
    if (n == 0) throw InvalidArgument("charbonnier: empty input");
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = double(a.value()[i]) - double(b.value()[i]);
        acc += std::sqrt(d * d + double(eps) * double(eps));
    }
    Tensor<T> out(Shape{1}, T(acc / double(n)));
    Node<T>* pa = a.node();
    Node<T>* pb = b.node();
    return make_node<T>(std::move(out), {&a, &b}, [pa, pb, eps, n](Node<T>& self) {
        const double up = double(self.grad[0]) / double(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double d = double(pa->value[i]) - double(pb->value[i]);
            const double g = up * d / std::sqrt(d * d + double(eps) * double(eps));
            if (wants(pa)) pa->grad_buffer()[i] += T(g);
            if (wants(pb)) pb->grad_buffer()[i] -= T(g);
        }
    });
}

template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& w) {
    require_same_shape(x.shape(), w.shape, "weighted_sum");
    double acc = 0;
    for (std::size_t i = 0; i < w.numel(); ++i) acc += double(x.value()[i]) * w[i];
    Tensor<T> out(Shape{1}, T(acc));
    Node<T>* px = x.node();
    return make_node<T>(std::move(out), {&x}, [px, w](Node<T>& self) {
        auto& g = px->grad_buffer();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[0] * w[i];
    });
}

template <typename T>
Var<T> sum_scalars(std::span<const Var<T>> terms) {
    if (terms.empty()) throw InvalidArgument("sum_scalars: no terms");
    double acc = 0;
    bool track = false;
    for (const auto& t : terms) {
        if (t.value().numel() != 1) throw InvalidArgument("sum_scalars: term is not a scalar");
        acc += t.value()[0];
        track = track || t.requires_grad();
    }
    auto n = std::make_shared<Node<T>>();
    n->value = Tensor<T>(Shape{1}, T(acc));
    if (track) {
        n->requires_grad = true;
        std::vector<Node<T>*> raw;
        for (const auto& t : terms) {
            n->parents.push_back(t.shared());
            raw.push_back(t.node());
        }
        n->backward = [raw](Node<T>& self) {
            for (Node<T>* p : raw)
                if (wants(p)) p->grad_buffer()[0] += self.grad[0];
        };
    }
    return Var<T>(std::move(n));
}

} // namespace ops

#define SCHVPP_INSTANTIATE(T)                                                                             \
    template struct Node<T>;                                                                              \
    template class Var<T>;                                                                                \
    template Var<T> constant(Tensor<T>);                                                                  \
    template Var<T> leaf(Tensor<T>, bool);                                                                \
    template void backward(const Var<T>&);                                                                \
    template void backward(const Var<T>&, const Tensor<T>&);                                              \
    template Var<T> ops::add(const Var<T>&, const Var<T>&);                                               \
    template Var<T> ops::sub(const Var<T>&, const Var<T>&);                                               \
    template Var<T> ops::mul(const Var<T>&, const Var<T>&);                                               \
    template Var<T> ops::scale(const Var<T>&, T);                                                         \
    template Var<T> ops::reshape(const Var<T>&, Shape);                                                   \
    template Var<T> ops::prelu(const Var<T>&, const Var<T>&);                                             \
    template Var<T> ops::gelu(const Var<T>&);                                                             \
    template Var<T> ops::sigmoid(const Var<T>&);                                                          \
    template Var<T> ops::conv2d(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, std::size_t);   \
    template Var<T> ops::linear(const Var<T>&, const Var<T>&, const Var<T>&);                             \
    template Var<T> ops::layer_norm_rows(const Var<T>&, const Var<T>&, const Var<T>&, T);                 \
    template Var<T> ops::softmax_all(const Var<T>&);                                                      \
    template Var<T> ops::global_avg_pool(const Var<T>&);                                                  \
    template Var<T> ops::channel_dot(const Var<T>&, const Var<T>&);                                       \
    template Var<T> ops::mul_channel(const Var<T>&, const Var<T>&);                                       \
    template Var<T> ops::mul_spatial(const Var<T>&, const Var<T>&);                                       \
    template Var<T> ops::concat_channels(const Var<T>&, const Var<T>&);                                   \
    template Var<T> ops::slice_channels(const Var<T>&, std::size_t, std::size_t);                         \
    template Var<T> ops::grid_to_rows(const Var<T>&);                                                     \
    template Var<T> ops::rows_to_grid(const Var<T>&, std::size_t, std::size_t);                           \
    template Var<T> ops::gather_rows(const Var<T>&, std::vector<std::size_t>);                            \
    template Var<T> ops::pixel_shuffle(const Var<T>&, std::size_t);                                      \
    template Var<T> ops::pixel_unshuffle(const Var<T>&, std::size_t);                                     \
    template Var<T> ops::window_attention(const Var<T>&, std::size_t, std::size_t);                       \
    template Tensor<T> ops::window_attention_probs(const Tensor<T>&, std::size_t, std::size_t);           \
    template Var<T> ops::charbonnier(const Var<T>&, const Var<T>&, T);                                    \
    template Var<T> ops::weighted_sum(const Var<T>&, const Tensor<T>&);                                   \
    template Var<T> ops::sum_scalars(std::span<const Var<T>>);

SCHVPP_INSTANTIATE(float)
SCHVPP_INSTANTIATE(double)

} // namespace schvpp
