#include "catair/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace catair {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MMap = Eigen::Map<RowMat>;
using CMap = Eigen::Map<const RowMat>;

namespace {

thread_local bool g_grad_enabled = true;

Var make_node(Tensor value, const std::vector<Var>& parents,
              std::function<void(Node&)> bw) {
    bool any = false;
    if (g_grad_enabled)
        for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return Var(std::move(value));
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(bw);
    return Var::wrap(n);
}

bool wants(const std::shared_ptr<Node>& n) { return n && n->requires_grad; }

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a.val().same_shape(b.val()))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.val().shape_str() +
                         " vs " + b.val().shape_str());
}

// dst[y][x] = src[y+oy][x+ox] when in bounds, else 0. Layout [B,H,W,C].
Tensor shifted(const Tensor& src, int oy, int ox) {
    const int b = src.dim(0), h = src.dim(1), w = src.dim(2), c = src.dim(3);
    Tensor dst(src.shape());
    const int x0 = std::max(0, -ox), x1 = std::min(w, w - ox);
    if (x1 <= x0) return dst;
    const size_t seg = static_cast<size_t>(x1 - x0) * c;
    for (int bi = 0; bi < b; ++bi) {
        for (int y = 0; y < h; ++y) {
            const int sy = y + oy;
            if (sy < 0 || sy >= h) continue;
            const Real* s = src.data() + ((static_cast<size_t>(bi) * h + sy) * w + (x0 + ox)) * c;
            Real* d = dst.data() + ((static_cast<size_t>(bi) * h + y) * w + x0) * c;
            std::copy(s, s + seg, d);
        }
    }
    return dst;
}

struct ResizeAxis {
    std::vector<int> i0, i1;
    std::vector<Real> f;  // weight of i1
};

ResizeAxis resize_axis(int in, int out) {
    ResizeAxis a;
    a.i0.resize(out);
    a.i1.resize(out);
    a.f.resize(out);
    const Real scale = static_cast<Real>(in) / out;
    for (int o = 0; o < out; ++o) {
        const Real s = (o + Real(0.5)) * scale - Real(0.5);
        const Real fl = std::floor(s);
        int lo = static_cast<int>(fl);
        a.f[o] = s - fl;
        a.i0[o] = std::clamp(lo, 0, in - 1);
        a.i1[o] = std::clamp(lo + 1, 0, in - 1);
    }
    return a;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

void backward(const Var& root, bool release_graph) {
    if (!root.defined() || !root.requires_grad())
        throw ShapeError("backward: root does not require grad");
    if (root.val().numel() != 1)
        throw ShapeError("backward: root must be a scalar, got " + root.val().shape_str());

    std::vector<std::shared_ptr<Node>> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<std::shared_ptr<Node>, size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& top = stack.back();
        Node* n = top.first.get();
        if (top.second < n->parents.size()) {
            auto p = n->parents[top.second++];
            if (p->requires_grad && seen.insert(p.get()).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(top.first);
            stack.pop_back();
        }
    }

    root.node()->ensure_grad().fill(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = it->get();
        if (n->backward_fn && n->grad.defined()) n->backward_fn(*n);
        if (release_graph && !n->parents.empty()) {
            if (n != root.node().get()) n->value = Tensor();
            n->grad = Tensor();
            n->backward_fn = nullptr;
        }
    }
    if (release_graph)
        for (auto& n : order) n->parents.clear();
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out(a.val().shape());
    for (int i = 0; i < out.numel(); ++i) out[i] = a.val()[i] + b.val()[i];
    return make_node(std::move(out), {a, b}, [](Node& self) {
        for (int k = 0; k < 2; ++k) {
            auto& p = self.parents[k];
            if (!wants(p)) continue;
            Tensor& g = p->ensure_grad();
            for (int i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a.val().shape());
    for (int i = 0; i < out.numel(); ++i) out[i] = a.val()[i] - b.val()[i];
    return make_node(std::move(out), {a, b}, [](Node& self) {
        if (wants(self.parents[0])) {
            Tensor& g = self.parents[0]->ensure_grad();
            for (int i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (wants(self.parents[1])) {
            Tensor& g = self.parents[1]->ensure_grad();
            for (int i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.val().shape());
    for (int i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * b.val()[i];
    return make_node(std::move(out), {a, b}, [](Node& self) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        if (wants(self.parents[0])) {
            Tensor& g = self.parents[0]->ensure_grad();
            for (int i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (wants(self.parents[1])) {
            Tensor& g = self.parents[1]->ensure_grad();
            for (int i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

Var neg(const Var& x) { return mul_scalar(x, -1); }

Var add_scalar(const Var& x, Real s) {
    Tensor out(x.val().shape());
    for (int i = 0; i < out.numel(); ++i) out[i] = x.val()[i] + s;
    return make_node(std::move(out), {x}, [](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
}

Var mul_scalar(const Var& x, Real s) {
    Tensor out(x.val().shape());
    for (int i = 0; i < out.numel(); ++i) out[i] = x.val()[i] * s;
    return make_node(std::move(out), {x}, [s](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * s;
    });
}

Var rsub_scalar(Real s, const Var& x) {
    Tensor out(x.val().shape());
    for (int i = 0; i < out.numel(); ++i) out[i] = s - x.val()[i];
    return make_node(std::move(out), {x}, [](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    });
}

Var abs_op(const Var& x) {
    Tensor out(x.val().shape());
    for (int i = 0; i < out.numel(); ++i) out[i] = std::abs(x.val()[i]);
    return make_node(std::move(out), {x}, [](Node& self) {
        const Tensor& xv = self.parents[0]->value;
        Tensor& g = self.parents[0]->ensure_grad();
        for (int i = 0; i < g.numel(); ++i) {
            const Real s = xv[i] > 0 ? Real(1) : (xv[i] < 0 ? Real(-1) : Real(0));
            g[i] += self.grad[i] * s;
        }
    });
}

Var square(const Var& x) {
    Tensor out(x.val().shape());
    for (int i = 0; i < out.numel(); ++i) out[i] = x.val()[i] * x.val()[i];
    return make_node(std::move(out), {x}, [](Node& self) {
        const Tensor& xv = self.parents[0]->value;
        Tensor& g = self.parents[0]->ensure_grad();
        for (int i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * 2 * xv[i];
    });
}

Var exp_op(const Var& x) {
    Tensor out(x.val().shape());
    for (int i = 0; i < out.numel(); ++i) out[i] = std::exp(x.val()[i]);
    return make_node(std::move(out), {x}, [](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * self.value[i];
    });
}

Var sigmoid(const Var& x) {
    Tensor out(x.val().shape());
    for (int i = 0; i < out.numel(); ++i) {
        const Real v = x.val()[i];
        out[i] = v >= 0 ? 1 / (1 + std::exp(-v)) : std::exp(v) / (1 + std::exp(v));
    }
    return make_node(std::move(out), {x}, [](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int i = 0; i < g.numel(); ++i) {
            const Real y = self.value[i];
            g[i] += self.grad[i] * y * (1 - y);
        }
    });
}

Var gelu(const Var& x) {
    static const Real inv_sqrt2 = Real(0.7071067811865475244);
    Tensor out(x.val().shape());
    for (int i = 0; i < out.numel(); ++i) {
        const Real v = x.val()[i];
        out[i] = Real(0.5) * v * (1 + std::erf(v * inv_sqrt2));
    }
    return make_node(std::move(out), {x}, [](Node& self) {
        static const Real inv_sqrt_2pi = Real(0.3989422804014326779);
        const Tensor& xv = self.parents[0]->value;
        Tensor& g = self.parents[0]->ensure_grad();
        for (int i = 0; i < g.numel(); ++i) {
            const Real v = xv[i];
            const Real cdf = Real(0.5) * (1 + std::erf(v * inv_sqrt2));
            const Real pdf = inv_sqrt_2pi * std::exp(Real(-0.5) * v * v);
            g[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

Var mean_all(const Var& x) {
    Real s = 0;
    for (int i = 0; i < x.val().numel(); ++i) s += x.val()[i];
    const int n = x.val().numel();
    return make_node(Tensor::scalar(s / n), {x}, [n](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        const Real gs = self.grad[0] / n;
        for (int i = 0; i < g.numel(); ++i) g[i] += gs;
    });
}

// ------------------------------------------------------------ shape plumbing

Var reshape(const Var& x, std::vector<int> shape) {
    Tensor out = x.val().reshaped(std::move(shape));
    return make_node(std::move(out), {x}, [](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
}

Var concat_channels(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat_channels: empty input");
    const auto& s0 = xs[0].val().shape();
    int ctotal = 0;
    std::vector<int> offs;
    for (const auto& x : xs) {
        const auto& s = x.val().shape();
        if (s.size() != s0.size())
            throw ShapeError("concat_channels: rank mismatch");
        for (size_t i = 0; i + 1 < s.size(); ++i)
            if (s[i] != s0[i]) throw ShapeError("concat_channels: leading dims differ");
        offs.push_back(ctotal);
        ctotal += s.back();
    }
    std::vector<int> oshape(s0);
    oshape.back() = ctotal;
    Tensor out(oshape);
    int rows = out.numel() / ctotal;
    for (size_t k = 0; k < xs.size(); ++k) {
        const Tensor& t = xs[k].val();
        const int c = t.shape().back();
        for (int r = 0; r < rows; ++r)
            std::copy(t.data() + static_cast<size_t>(r) * c,
                      t.data() + static_cast<size_t>(r) * c + c,
                      out.data() + static_cast<size_t>(r) * ctotal + offs[k]);
    }
    return make_node(std::move(out), xs, [offs, ctotal, rows](Node& self) {
        for (size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = self.parents[k];
            if (!wants(p)) continue;
            Tensor& g = p->ensure_grad();
            const int c = g.shape().back();
            for (int r = 0; r < rows; ++r) {
                const Real* src = self.grad.data() + static_cast<size_t>(r) * ctotal + offs[k];
                Real* dst = g.data() + static_cast<size_t>(r) * c;
                for (int i = 0; i < c; ++i) dst[i] += src[i];
            }
        }
    });
}

Var slice_channels(const Var& x, int c0, int c1) {
    const auto& s = x.val().shape();
    const int c = s.back();
    if (c0 < 0 || c1 > c || c0 >= c1)
        throw ShapeError("slice_channels: bad range");
    std::vector<int> oshape(s);
    oshape.back() = c1 - c0;
    Tensor out(oshape);
    const int rows = out.numel() / (c1 - c0);
    for (int r = 0; r < rows; ++r)
        std::copy(x.val().data() + static_cast<size_t>(r) * c + c0,
                  x.val().data() + static_cast<size_t>(r) * c + c1,
                  out.data() + static_cast<size_t>(r) * (c1 - c0));
    return make_node(std::move(out), {x}, [c0, c1, c, rows](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int r = 0; r < rows; ++r) {
            const Real* src = self.grad.data() + static_cast<size_t>(r) * (c1 - c0);
            Real* dst = g.data() + static_cast<size_t>(r) * c + c0;
            for (int i = 0; i < c1 - c0; ++i) dst[i] += src[i];
        }
    });
}

Var concat_dim0(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat_dim0: empty input");
    const auto& s0 = xs[0].val().shape();
    int total = 0;
    for (const auto& x : xs) {
        const auto& s = x.val().shape();
        if (s.size() != s0.size()) throw ShapeError("concat_dim0: rank mismatch");
        for (size_t i = 1; i < s.size(); ++i)
            if (s[i] != s0[i]) throw ShapeError("concat_dim0: trailing dims differ");
        total += s[0];
    }
    std::vector<int> oshape(s0);
    oshape[0] = total;
    Tensor out(oshape);
    size_t off = 0;
    for (const auto& x : xs) {
        std::copy(x.val().data(), x.val().data() + x.val().numel(), out.data() + off);
        off += x.val().numel();
    }
    return make_node(std::move(out), xs, [](Node& self) {
        size_t off = 0;
        for (auto& p : self.parents) {
            const int n = p->value.numel();
            if (wants(p)) {
                Tensor& g = p->ensure_grad();
                for (int i = 0; i < n; ++i) g[i] += self.grad[static_cast<int>(off) + i];
            }
            off += n;
        }
    });
}

Var slice_batch(const Var& x, int b0, int b1) {
    const auto& s = x.val().shape();
    if (b0 < 0 || b1 > s[0] || b0 >= b1) throw ShapeError("slice_batch: bad range");
    std::vector<int> oshape(s);
    oshape[0] = b1 - b0;
    const int row = x.val().numel() / s[0];
    Tensor out(oshape);
    std::copy(x.val().data() + static_cast<size_t>(b0) * row,
              x.val().data() + static_cast<size_t>(b1) * row, out.data());
    return make_node(std::move(out), {x}, [b0, row](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        const int n = self.grad.numel();
        Real* dst = g.data() + static_cast<size_t>(b0) * row;
        for (int i = 0; i < n; ++i) dst[i] += self.grad[i];
    });
}

Var transpose_last2(const Var& x) {
    const auto& s = x.val().shape();
    if (s.size() < 2) throw ShapeError("transpose_last2: rank < 2");
    const int r = s[s.size() - 2], k = s.back();
    const int n = x.val().numel() / (r * k);
    std::vector<int> oshape(s);
    std::swap(oshape[oshape.size() - 2], oshape.back());
    Tensor out(oshape);
    for (int i = 0; i < n; ++i) {
        const Real* src = x.val().data() + static_cast<size_t>(i) * r * k;
        Real* dst = out.data() + static_cast<size_t>(i) * r * k;
        for (int a = 0; a < r; ++a)
            for (int b = 0; b < k; ++b) dst[static_cast<size_t>(b) * r + a] = src[static_cast<size_t>(a) * k + b];
    }
    return make_node(std::move(out), {x}, [n, r, k](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int i = 0; i < n; ++i) {
            const Real* src = self.grad.data() + static_cast<size_t>(i) * r * k;
            Real* dst = g.data() + static_cast<size_t>(i) * r * k;
            for (int b = 0; b < k; ++b)
                for (int a = 0; a < r; ++a) dst[static_cast<size_t>(a) * k + b] += src[static_cast<size_t>(b) * r + a];
        }
    });
}

Var split_heads(const Var& x, int heads) {
    const auto& s = x.val().shape();
    if (s.size() != 3) throw ShapeError("split_heads: expected [B,T,C]");
    const int b = s[0], t = s[1], c = s[2];
    if (c % heads != 0) throw ShapeError("split_heads: channels not divisible by heads");
    const int d = c / heads;
    Tensor out({b * heads, t, d});
    for (int bi = 0; bi < b; ++bi)
        for (int hi = 0; hi < heads; ++hi)
            for (int ti = 0; ti < t; ++ti) {
                const Real* src = x.val().data() + (static_cast<size_t>(bi) * t + ti) * c + hi * d;
                Real* dst = out.data() + (static_cast<size_t>(bi * heads + hi) * t + ti) * d;
                std::copy(src, src + d, dst);
            }
    return make_node(std::move(out), {x}, [b, t, c, heads, d](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int bi = 0; bi < b; ++bi)
            for (int hi = 0; hi < heads; ++hi)
                for (int ti = 0; ti < t; ++ti) {
                    const Real* src = self.grad.data() + (static_cast<size_t>(bi * heads + hi) * t + ti) * d;
                    Real* dst = g.data() + (static_cast<size_t>(bi) * t + ti) * c + hi * d;
                    for (int i = 0; i < d; ++i) dst[i] += src[i];
                }
    });
}

Var merge_heads(const Var& x, int heads) {
    const auto& s = x.val().shape();
    if (s.size() != 3) throw ShapeError("merge_heads: expected [B*h,T,D]");
    if (s[0] % heads != 0) throw ShapeError("merge_heads: batch not divisible by heads");
    const int b = s[0] / heads, t = s[1], d = s[2];
    Tensor out({b, t, heads * d});
    for (int bi = 0; bi < b; ++bi)
        for (int hi = 0; hi < heads; ++hi)
            for (int ti = 0; ti < t; ++ti) {
                const Real* src = x.val().data() + (static_cast<size_t>(bi * heads + hi) * t + ti) * d;
                Real* dst = out.data() + (static_cast<size_t>(bi) * t + ti) * heads * d + hi * d;
                std::copy(src, src + d, dst);
            }
    return make_node(std::move(out), {x}, [b, t, d, heads](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int bi = 0; bi < b; ++bi)
            for (int hi = 0; hi < heads; ++hi)
                for (int ti = 0; ti < t; ++ti) {
                    const Real* src = self.grad.data() + (static_cast<size_t>(bi) * t + ti) * heads * d + hi * d;
                    Real* dst = g.data() + (static_cast<size_t>(bi * heads + hi) * t + ti) * d;
                    for (int i = 0; i < d; ++i) dst[i] += src[i];
                }
    });
}

// ------------------------------------------------------------ linear algebra

Var dense_lastdim(const Var& x, const Var& w, const Var& b) {
    const int cin = x.val().shape().back();
    if (w.val().rank() != 2 || w.val().dim(1) != cin)
        throw ShapeError("dense_lastdim: weight " + w.val().shape_str() +
                         " does not match input " + x.val().shape_str());
    const int cout = w.val().dim(0);
    const int n = x.val().numel() / cin;
    std::vector<int> oshape(x.val().shape());
    oshape.back() = cout;
    Tensor out(oshape);
    {
        MMap o(out.data(), n, cout);
        CMap xm(x.val().data(), n, cin), wm(w.val().data(), cout, cin);
        o.noalias() = xm * wm.transpose();
        if (b.defined()) {
            CMap bm(b.val().data(), 1, cout);
            o.rowwise() += bm.row(0);
        }
    }
    std::vector<Var> parents = b.defined() ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_node(std::move(out), parents, [n, cin, cout](Node& self) {
        CMap g(self.grad.data(), n, cout);
        const Tensor& xv = self.parents[0]->value;
        const Tensor& wv = self.parents[1]->value;
        if (wants(self.parents[0])) {
            MMap gx(self.parents[0]->ensure_grad().data(), n, cin);
            gx.noalias() += g * CMap(wv.data(), cout, cin);
        }
        if (wants(self.parents[1])) {
            MMap gw(self.parents[1]->ensure_grad().data(), cout, cin);
            gw.noalias() += g.transpose() * CMap(xv.data(), n, cin);
        }
        if (self.parents.size() > 2 && wants(self.parents[2])) {
            MMap gb(self.parents[2]->ensure_grad().data(), 1, cout);
            gb.row(0) += g.colwise().sum();
        }
    });
}

Var dense_lastdim(const Var& x, const Var& w) { return dense_lastdim(x, w, Var()); }

Var matmul2d(const Var& a, const Var& b) {
    if (a.val().rank() != 2 || b.val().rank() != 2 || a.val().dim(1) != b.val().dim(0))
        throw ShapeError("matmul2d: bad shapes " + a.val().shape_str() + " x " + b.val().shape_str());
    const int r = a.val().dim(0), k = a.val().dim(1), c = b.val().dim(1);
    Tensor out({r, c});
    MMap(out.data(), r, c).noalias() =
        CMap(a.val().data(), r, k) * CMap(b.val().data(), k, c);
    return make_node(std::move(out), {a, b}, [r, k, c](Node& self) {
        CMap g(self.grad.data(), r, c);
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        if (wants(self.parents[0]))
            MMap(self.parents[0]->ensure_grad().data(), r, k).noalias() +=
                g * CMap(bv.data(), k, c).transpose();
        if (wants(self.parents[1]))
            MMap(self.parents[1]->ensure_grad().data(), k, c).noalias() +=
                CMap(av.data(), r, k).transpose() * g;
    });
}

Var bmm(const Var& a, const Var& b) {
    const auto& sa = a.val().shape();
    const auto& sb = b.val().shape();
    if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1])
        throw ShapeError("bmm: bad shapes " + a.val().shape_str() + " x " + b.val().shape_str());
    const int n = sa[0], r = sa[1], k = sa[2], m = sb[2];
    Tensor out({n, r, m});
    for (int i = 0; i < n; ++i)
        MMap(out.data() + static_cast<size_t>(i) * r * m, r, m).noalias() =
            CMap(a.val().data() + static_cast<size_t>(i) * r * k, r, k) *
            CMap(b.val().data() + static_cast<size_t>(i) * k * m, k, m);
    return make_node(std::move(out), {a, b}, [n, r, k, m](Node& self) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        for (int i = 0; i < n; ++i) {
            CMap g(self.grad.data() + static_cast<size_t>(i) * r * m, r, m);
            if (wants(self.parents[0]))
                MMap(self.parents[0]->ensure_grad().data() + static_cast<size_t>(i) * r * k, r, k)
                    .noalias() += g * CMap(bv.data() + static_cast<size_t>(i) * k * m, k, m).transpose();
            if (wants(self.parents[1]))
                MMap(self.parents[1]->ensure_grad().data() + static_cast<size_t>(i) * k * m, k, m)
                    .noalias() += CMap(av.data() + static_cast<size_t>(i) * r * k, r, k).transpose() * g;
        }
    });
}

Var softmax_lastdim(const Var& x) {
    const int c = x.val().shape().back();
    const int rows = x.val().numel() / c;
    Tensor out(x.val().shape());
    for (int r = 0; r < rows; ++r) {
        const Real* src = x.val().data() + static_cast<size_t>(r) * c;
        Real* dst = out.data() + static_cast<size_t>(r) * c;
        Real mx = src[0];
        for (int i = 1; i < c; ++i) mx = std::max(mx, src[i]);
        Real sum = 0;
        for (int i = 0; i < c; ++i) {
            dst[i] = std::exp(src[i] - mx);
            sum += dst[i];
        }
        const Real inv = 1 / sum;
        for (int i = 0; i < c; ++i) dst[i] *= inv;
    }
    return make_node(std::move(out), {x}, [rows, c](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int r = 0; r < rows; ++r) {
            const Real* y = self.value.data() + static_cast<size_t>(r) * c;
            const Real* gy = self.grad.data() + static_cast<size_t>(r) * c;
            Real* gx = g.data() + static_cast<size_t>(r) * c;
            Real dot = 0;
            for (int i = 0; i < c; ++i) dot += gy[i] * y[i];
            for (int i = 0; i < c; ++i) gx[i] += y[i] * (gy[i] - dot);
        }
    });
}

Var scale_per_head(const Var& x, const Var& s, int heads) {
    const auto& sh = x.val().shape();
    if (sh[0] % heads != 0 || s.val().numel() != heads)
        throw ShapeError("scale_per_head: bad head layout");
    const int n = sh[0];
    const int row = x.val().numel() / n;
    Tensor out(x.val().shape());
    for (int i = 0; i < n; ++i) {
        const Real f = s.val()[i % heads];
        const Real* src = x.val().data() + static_cast<size_t>(i) * row;
        Real* dst = out.data() + static_cast<size_t>(i) * row;
        for (int j = 0; j < row; ++j) dst[j] = src[j] * f;
    }
    return make_node(std::move(out), {x, s}, [n, row, heads](Node& self) {
        const Tensor& xv = self.parents[0]->value;
        const Tensor& sv = self.parents[1]->value;
        if (wants(self.parents[0])) {
            Tensor& g = self.parents[0]->ensure_grad();
            for (int i = 0; i < n; ++i) {
                const Real f = sv[i % heads];
                for (int j = 0; j < row; ++j)
                    g[i * row + j] += self.grad[i * row + j] * f;
            }
        }
        if (wants(self.parents[1])) {
            Tensor& g = self.parents[1]->ensure_grad();
            for (int i = 0; i < n; ++i) {
                Real acc = 0;
                for (int j = 0; j < row; ++j)
                    acc += self.grad[i * row + j] * xv[i * row + j];
                g[i % heads] += acc;
            }
        }
    });
}

// -------------------------------------------------------------- convolutions

Var conv2d(const Var& x, const Var& w, const Var& b) {
    const auto& sx = x.val().shape();
    const auto& sw = w.val().shape();
    if (sx.size() != 4 || sw.size() != 4 || sw[1] != sx[3] || sw[2] != sw[3] || sw[2] % 2 == 0)
        throw ShapeError("conv2d: bad shapes " + x.val().shape_str() + ", " + w.val().shape_str());
    const int bn = sx[0], h = sx[1], wd = sx[2], cin = sx[3];
    const int cout = sw[0], k = sw[2], p = k / 2;
    const int n = bn * h * wd;
    Tensor out({bn, h, wd, cout});
    {
        MMap o(out.data(), n, cout);
        if (b.defined()) {
            CMap bm(b.val().data(), 1, cout);
            o.rowwise() = bm.row(0);
        } else {
            o.setZero();
        }
        RowMat tap(cout, cin);
        for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx) {
                for (int co = 0; co < cout; ++co)
                    for (int ci = 0; ci < cin; ++ci)
                        tap(co, ci) = w.val().at(co, ci, dy, dx);
                Tensor xs = (dy == p && dx == p) ? x.val() : shifted(x.val(), dy - p, dx - p);
                o.noalias() += CMap(xs.data(), n, cin) * tap.transpose();
            }
    }
    std::vector<Var> parents = b.defined() ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_node(std::move(out), parents, [bn, h, wd, cin, cout, k, p, n](Node& self) {
        const Tensor& xv = self.parents[0]->value;
        const Tensor& wv = self.parents[1]->value;
        CMap g(self.grad.data(), n, cout);
        const bool want_x = wants(self.parents[0]);
        const bool want_w = wants(self.parents[1]);
        RowMat tap(cout, cin);
        for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx) {
                for (int co = 0; co < cout; ++co)
                    for (int ci = 0; ci < cin; ++ci)
                        tap(co, ci) = wv.at(co, ci, dy, dx);
                if (want_x) {
                    Tensor gs = (dy == p && dx == p) ? self.grad : shifted(self.grad, -(dy - p), -(dx - p));
                    MMap gx(self.parents[0]->ensure_grad().data(), n, cin);
                    gx.noalias() += CMap(gs.data(), n, cout) * tap;
                }
                if (want_w) {
                    Tensor xs = (dy == p && dx == p) ? xv : shifted(xv, dy - p, dx - p);
                    RowMat gtap = g.transpose() * CMap(xs.data(), n, cin);
                    Tensor& gw = self.parents[1]->ensure_grad();
                    for (int co = 0; co < cout; ++co)
                        for (int ci = 0; ci < cin; ++ci)
                            gw.at(co, ci, dy, dx) += gtap(co, ci);
                }
            }
        if (self.parents.size() > 2 && wants(self.parents[2])) {
            MMap gb(self.parents[2]->ensure_grad().data(), 1, cout);
            gb.row(0) += g.colwise().sum();
        }
    });
}

Var dwconv(const Var& x, const Var& w, const Var& b) {
    const auto& sx = x.val().shape();
    const auto& sw = w.val().shape();
    if (sx.size() != 4 || sw.size() != 3 || sw[0] != sx[3] || sw[1] != sw[2] || sw[1] % 2 == 0)
        throw ShapeError("dwconv: bad shapes " + x.val().shape_str() + ", " + w.val().shape_str());
    const int c = sx[3], k = sw[1], p = k / 2;
    const int rows = x.val().numel() / c;
    Tensor out(sx);
    if (b.defined())
        for (int r = 0; r < rows; ++r)
            for (int i = 0; i < c; ++i) out[r * c + i] = b.val()[i];
    for (int dy = 0; dy < k; ++dy)
        for (int dx = 0; dx < k; ++dx) {
            Tensor xs = (dy == p && dx == p) ? x.val() : shifted(x.val(), dy - p, dx - p);
            const Real* wt = w.val().data() + (static_cast<size_t>(0) * k + dy) * k + dx;
            for (int r = 0; r < rows; ++r) {
                const Real* src = xs.data() + static_cast<size_t>(r) * c;
                Real* dst = out.data() + static_cast<size_t>(r) * c;
                for (int i = 0; i < c; ++i) dst[i] += wt[static_cast<size_t>(i) * k * k] * src[i];
            }
        }
    std::vector<Var> parents = b.defined() ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_node(std::move(out), parents, [c, k, p, rows](Node& self) {
        const Tensor& xv = self.parents[0]->value;
        const Tensor& wv = self.parents[1]->value;
        const bool want_x = wants(self.parents[0]);
        const bool want_w = wants(self.parents[1]);
        for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx) {
                if (want_x) {
                    Tensor gs = (dy == p && dx == p) ? self.grad : shifted(self.grad, -(dy - p), -(dx - p));
                    Tensor& gx = self.parents[0]->ensure_grad();
                    const Real* wt = wv.data() + static_cast<size_t>(dy) * k + dx;
                    for (int r = 0; r < rows; ++r) {
                        const Real* src = gs.data() + static_cast<size_t>(r) * c;
                        Real* dst = gx.data() + static_cast<size_t>(r) * c;
                        for (int i = 0; i < c; ++i) dst[i] += wt[static_cast<size_t>(i) * k * k] * src[i];
                    }
                }
                if (want_w) {
                    Tensor xs = (dy == p && dx == p) ? xv : shifted(xv, dy - p, dx - p);
                    Tensor& gw = self.parents[1]->ensure_grad();
                    std::vector<Real> acc(static_cast<size_t>(c), 0);
                    for (int r = 0; r < rows; ++r) {
                        const Real* gsrc = self.grad.data() + static_cast<size_t>(r) * c;
                        const Real* src = xs.data() + static_cast<size_t>(r) * c;
                        for (int i = 0; i < c; ++i) acc[i] += gsrc[i] * src[i];
                    }
                    for (int i = 0; i < c; ++i) gw.at(i, dy, dx) += acc[i];
                }
            }
        if (self.parents.size() > 2 && wants(self.parents[2])) {
            Tensor& gb = self.parents[2]->ensure_grad();
            for (int r = 0; r < rows; ++r)
                for (int i = 0; i < c; ++i) gb[i] += self.grad[r * c + i];
        }
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Real eps) {
    const int c = x.val().shape().back();
    if (gamma.val().numel() != c || beta.val().numel() != c)
        throw ShapeError("layer_norm: affine params do not match channels");
    const int rows = x.val().numel() / c;
    Tensor out(x.val().shape());
    for (int r = 0; r < rows; ++r) {
        const Real* src = x.val().data() + static_cast<size_t>(r) * c;
        Real* dst = out.data() + static_cast<size_t>(r) * c;
        Real mu = 0;
        for (int i = 0; i < c; ++i) mu += src[i];
        mu /= c;
        Real var = 0;
        for (int i = 0; i < c; ++i) var += (src[i] - mu) * (src[i] - mu);
        var /= c;
        const Real istd = 1 / std::sqrt(var + eps);
        for (int i = 0; i < c; ++i)
            dst[i] = gamma.val()[i] * ((src[i] - mu) * istd) + beta.val()[i];
    }
    return make_node(std::move(out), {x, gamma, beta}, [rows, c, eps](Node& self) {
        const Tensor& xv = self.parents[0]->value;
        const Tensor& gv = self.parents[1]->value;
        std::vector<Real> xhat(static_cast<size_t>(c));
        for (int r = 0; r < rows; ++r) {
            const Real* src = xv.data() + static_cast<size_t>(r) * c;
            const Real* gy = self.grad.data() + static_cast<size_t>(r) * c;
            Real mu = 0;
            for (int i = 0; i < c; ++i) mu += src[i];
            mu /= c;
            Real var = 0;
            for (int i = 0; i < c; ++i) var += (src[i] - mu) * (src[i] - mu);
            var /= c;
            const Real istd = 1 / std::sqrt(var + eps);
            for (int i = 0; i < c; ++i) xhat[i] = (src[i] - mu) * istd;
            if (wants(self.parents[1])) {
                Tensor& gg = self.parents[1]->ensure_grad();
                for (int i = 0; i < c; ++i) gg[i] += gy[i] * xhat[i];
            }
            if (wants(self.parents[2])) {
                Tensor& gb = self.parents[2]->ensure_grad();
                for (int i = 0; i < c; ++i) gb[i] += gy[i];
            }
            if (wants(self.parents[0])) {
                Tensor& gx = self.parents[0]->ensure_grad();
                Real m1 = 0, m2 = 0;
                for (int i = 0; i < c; ++i) {
                    const Real d = gy[i] * gv[i];
                    m1 += d;
                    m2 += d * xhat[i];
                }
                m1 /= c;
                m2 /= c;
                Real* dst = gx.data() + static_cast<size_t>(r) * c;
                for (int i = 0; i < c; ++i)
                    dst[i] += istd * (gy[i] * gv[i] - m1 - xhat[i] * m2);
            }
        }
    });
}

// ------------------------------------------------------ spatial rearrangement

Var pixel_unshuffle2(const Var& x) {
    const auto& s = x.val().shape();
    if (s.size() != 4 || s[1] % 2 || s[2] % 2)
        throw ShapeError("pixel_unshuffle2: bad shape " + x.val().shape_str());
    const int b = s[0], h = s[1], w = s[2], c = s[3];
    Tensor out({b, h / 2, w / 2, 4 * c});
    for (int bi = 0; bi < b; ++bi)
        for (int y = 0; y < h / 2; ++y)
            for (int xw = 0; xw < w / 2; ++xw)
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx)
                        for (int ci = 0; ci < c; ++ci)
                            out.at(bi, y, xw, ci * 4 + dy * 2 + dx) =
                                x.val().at(bi, 2 * y + dy, 2 * xw + dx, ci);
    return make_node(std::move(out), {x}, [b, h, w, c](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int bi = 0; bi < b; ++bi)
            for (int y = 0; y < h / 2; ++y)
                for (int xw = 0; xw < w / 2; ++xw)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx)
                            for (int ci = 0; ci < c; ++ci)
                                g.at(bi, 2 * y + dy, 2 * xw + dx, ci) +=
                                    self.grad.at(bi, y, xw, ci * 4 + dy * 2 + dx);
    });
}

Var pixel_shuffle2(const Var& x) {
    const auto& s = x.val().shape();
    if (s.size() != 4 || s[3] % 4)
        throw ShapeError("pixel_shuffle2: channels not divisible by 4");
    const int b = s[0], h = s[1], w = s[2], c = s[3] / 4;
    Tensor out({b, 2 * h, 2 * w, c});
    for (int bi = 0; bi < b; ++bi)
        for (int y = 0; y < h; ++y)
            for (int xw = 0; xw < w; ++xw)
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx)
                        for (int ci = 0; ci < c; ++ci)
                            out.at(bi, 2 * y + dy, 2 * xw + dx, ci) =
                                x.val().at(bi, y, xw, ci * 4 + dy * 2 + dx);
    return make_node(std::move(out), {x}, [b, h, w, c](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int bi = 0; bi < b; ++bi)
            for (int y = 0; y < h; ++y)
                for (int xw = 0; xw < w; ++xw)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx)
                            for (int ci = 0; ci < c; ++ci)
                                g.at(bi, y, xw, ci * 4 + dy * 2 + dx) +=
                                    self.grad.at(bi, 2 * y + dy, 2 * xw + dx, ci);
    });
}

Var bilinear_resize(const Var& x, int out_h, int out_w) {
    const auto& s = x.val().shape();
    if (s.size() != 4) throw ShapeError("bilinear_resize: expected [B,H,W,C]");
    const int b = s[0], h = s[1], w = s[2], c = s[3];
    const ResizeAxis ay = resize_axis(h, out_h), ax = resize_axis(w, out_w);
    Tensor out({b, out_h, out_w, c});
    for (int bi = 0; bi < b; ++bi)
        for (int oy = 0; oy < out_h; ++oy)
            for (int ox = 0; ox < out_w; ++ox) {
                const Real fy = ay.f[oy], fx = ax.f[ox];
                const Real* r00 = &x.val().at(bi, ay.i0[oy], ax.i0[ox], 0);
                const Real* r01 = &x.val().at(bi, ay.i0[oy], ax.i1[ox], 0);
                const Real* r10 = &x.val().at(bi, ay.i1[oy], ax.i0[ox], 0);
                const Real* r11 = &x.val().at(bi, ay.i1[oy], ax.i1[ox], 0);
                Real* dst = &out.at(bi, oy, ox, 0);
                for (int ci = 0; ci < c; ++ci)
                    dst[ci] = (1 - fy) * ((1 - fx) * r00[ci] + fx * r01[ci]) +
                              fy * ((1 - fx) * r10[ci] + fx * r11[ci]);
            }
    return make_node(std::move(out), {x}, [b, out_h, out_w, c, ay, ax](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int bi = 0; bi < b; ++bi)
            for (int oy = 0; oy < out_h; ++oy)
                for (int ox = 0; ox < out_w; ++ox) {
                    const Real fy = ay.f[oy], fx = ax.f[ox];
                    const Real* src = &self.grad.at(bi, oy, ox, 0);
                    Real* r00 = &g.at(bi, ay.i0[oy], ax.i0[ox], 0);
                    Real* r01 = &g.at(bi, ay.i0[oy], ax.i1[ox], 0);
                    Real* r10 = &g.at(bi, ay.i1[oy], ax.i0[ox], 0);
                    Real* r11 = &g.at(bi, ay.i1[oy], ax.i1[ox], 0);
                    for (int ci = 0; ci < c; ++ci) {
                        r00[ci] += (1 - fy) * (1 - fx) * src[ci];
                        r01[ci] += (1 - fy) * fx * src[ci];
                        r10[ci] += fy * (1 - fx) * src[ci];
                        r11[ci] += fy * fx * src[ci];
                    }
                }
    });
}

Var avgpool_tiles(const Var& x, int q) {
    const auto& s = x.val().shape();
    if (s.size() != 4 || s[1] % q || s[2] % q)
        throw ShapeError("avgpool_tiles: map " + x.val().shape_str() +
                         " not divisible by tile " + std::to_string(q));
    const int b = s[0], h = s[1], w = s[2], c = s[3];
    const Real inv = Real(1) / (q * q);
    Tensor out({b, h / q, w / q, c});
    for (int bi = 0; bi < b; ++bi)
        for (int py = 0; py < h / q; ++py)
            for (int px = 0; px < w / q; ++px)
                for (int dy = 0; dy < q; ++dy)
                    for (int dx = 0; dx < q; ++dx) {
                        const Real* src = &x.val().at(bi, py * q + dy, px * q + dx, 0);
                        Real* dst = &out.at(bi, py, px, 0);
                        for (int ci = 0; ci < c; ++ci) dst[ci] += src[ci] * inv;
                    }
    return make_node(std::move(out), {x}, [b, h, w, c, q, inv](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int bi = 0; bi < b; ++bi)
            for (int py = 0; py < h / q; ++py)
                for (int px = 0; px < w / q; ++px)
                    for (int dy = 0; dy < q; ++dy)
                        for (int dx = 0; dx < q; ++dx) {
                            const Real* src = &self.grad.at(bi, py, px, 0);
                            Real* dst = &g.at(bi, py * q + dy, px * q + dx, 0);
                            for (int ci = 0; ci < c; ++ci) dst[ci] += src[ci] * inv;
                        }
    });
}

Var gap_hw(const Var& x) {
    const auto& s = x.val().shape();
    if (s.size() != 4) throw ShapeError("gap_hw: expected [B,H,W,C]");
    const int b = s[0], hw = s[1] * s[2], c = s[3];
    const Real inv = Real(1) / hw;
    Tensor out({b, c});
    for (int bi = 0; bi < b; ++bi)
        for (int i = 0; i < hw; ++i) {
            const Real* src = x.val().data() + (static_cast<size_t>(bi) * hw + i) * c;
            Real* dst = out.data() + static_cast<size_t>(bi) * c;
            for (int ci = 0; ci < c; ++ci) dst[ci] += src[ci] * inv;
        }
    return make_node(std::move(out), {x}, [b, hw, c, inv](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int bi = 0; bi < b; ++bi)
            for (int i = 0; i < hw; ++i) {
                const Real* src = self.grad.data() + static_cast<size_t>(bi) * c;
                Real* dst = g.data() + (static_cast<size_t>(bi) * hw + i) * c;
                for (int ci = 0; ci < c; ++ci) dst[ci] += src[ci] * inv;
            }
    });
}

Var scale_channels(const Var& x, const Var& s) {
    const auto& sx = x.val().shape();
    const auto& ss = s.val().shape();
    if (sx.size() != 4 || ss.size() != 2 || ss[0] != sx[0] || ss[1] != sx[3])
        throw ShapeError("scale_channels: bad shapes " + x.val().shape_str() + ", " +
                         s.val().shape_str());
    const int b = sx[0], hw = sx[1] * sx[2], c = sx[3];
    Tensor out(sx);
    for (int bi = 0; bi < b; ++bi)
        for (int i = 0; i < hw; ++i) {
            const Real* src = x.val().data() + (static_cast<size_t>(bi) * hw + i) * c;
            const Real* sc = s.val().data() + static_cast<size_t>(bi) * c;
            Real* dst = out.data() + (static_cast<size_t>(bi) * hw + i) * c;
            for (int ci = 0; ci < c; ++ci) dst[ci] = src[ci] * sc[ci];
        }
    return make_node(std::move(out), {x, s}, [b, hw, c](Node& self) {
        const Tensor& xv = self.parents[0]->value;
        const Tensor& sv = self.parents[1]->value;
        if (wants(self.parents[0])) {
            Tensor& g = self.parents[0]->ensure_grad();
            for (int bi = 0; bi < b; ++bi)
                for (int i = 0; i < hw; ++i)
                    for (int ci = 0; ci < c; ++ci)
                        g[(bi * hw + i) * c + ci] +=
                            self.grad[(bi * hw + i) * c + ci] * sv[bi * c + ci];
        }
        if (wants(self.parents[1])) {
            Tensor& g = self.parents[1]->ensure_grad();
            for (int bi = 0; bi < b; ++bi)
                for (int i = 0; i < hw; ++i)
                    for (int ci = 0; ci < c; ++ci)
                        g[bi * c + ci] +=
                            self.grad[(bi * hw + i) * c + ci] * xv[(bi * hw + i) * c + ci];
        }
    });
}

// -------------------------------------------------------------- patch plumbing

Var map_to_patches(const Var& x, int q) {
    const auto& s = x.val().shape();
    if (s.size() != 4 || s[1] % q || s[2] % q)
        throw ShapeError("map_to_patches: map " + x.val().shape_str() +
                         " not divisible by patch " + std::to_string(q));
    const int b = s[0], h = s[1], w = s[2], c = s[3];
    const int ph = h / q, pw = w / q;
    Tensor out({b, ph * pw, q * q, c});
    for (int bi = 0; bi < b; ++bi)
        for (int py = 0; py < ph; ++py)
            for (int px = 0; px < pw; ++px)
                for (int dy = 0; dy < q; ++dy)
                    for (int dx = 0; dx < q; ++dx)
                        std::copy(&x.val().at(bi, py * q + dy, px * q + dx, 0),
                                  &x.val().at(bi, py * q + dy, px * q + dx, 0) + c,
                                  &out.at(bi, py * pw + px, dy * q + dx, 0));
    return make_node(std::move(out), {x}, [b, ph, pw, q, c](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int bi = 0; bi < b; ++bi)
            for (int py = 0; py < ph; ++py)
                for (int px = 0; px < pw; ++px)
                    for (int dy = 0; dy < q; ++dy)
                        for (int dx = 0; dx < q; ++dx) {
                            const Real* src = &self.grad.at(bi, py * pw + px, dy * q + dx, 0);
                            Real* dst = &g.at(bi, py * q + dy, px * q + dx, 0);
                            for (int ci = 0; ci < c; ++ci) dst[ci] += src[ci];
                        }
    });
}

Var patches_to_map(const Var& x, int h, int w, int q) {
    const auto& s = x.val().shape();
    if (s.size() != 4 || s[1] != (h / q) * (w / q) || s[2] != q * q || h % q || w % q)
        throw ShapeError("patches_to_map: bad shapes");
    const int b = s[0], c = s[3], ph = h / q, pw = w / q;
    Tensor out({b, h, w, c});
    for (int bi = 0; bi < b; ++bi)
        for (int py = 0; py < ph; ++py)
            for (int px = 0; px < pw; ++px)
                for (int dy = 0; dy < q; ++dy)
                    for (int dx = 0; dx < q; ++dx)
                        std::copy(&x.val().at(bi, py * pw + px, dy * q + dx, 0),
                                  &x.val().at(bi, py * pw + px, dy * q + dx, 0) + c,
                                  &out.at(bi, py * q + dy, px * q + dx, 0));
    return make_node(std::move(out), {x}, [b, ph, pw, q, c](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int bi = 0; bi < b; ++bi)
            for (int py = 0; py < ph; ++py)
                for (int px = 0; px < pw; ++px)
                    for (int dy = 0; dy < q; ++dy)
                        for (int dx = 0; dx < q; ++dx) {
                            const Real* src = &self.grad.at(bi, py * q + dy, px * q + dx, 0);
                            Real* dst = &g.at(bi, py * pw + px, dy * q + dx, 0);
                            for (int ci = 0; ci < c; ++ci) dst[ci] += src[ci];
                        }
    });
}

Var extract_windows(const Var& x, int q, int wq) {
    const auto& s = x.val().shape();
    if (s.size() != 4 || s[1] % q || s[2] % q || wq < q)
        throw ShapeError("extract_windows: bad arguments");
    const int b = s[0], h = s[1], w = s[2], c = s[3];
    const int ph = h / q, pw = w / q;
    const int pb = (wq - q + 1) / 2;  // ceil((wq-q)/2)
    Tensor out({b, ph * pw, wq * wq, c});
    for (int bi = 0; bi < b; ++bi)
        for (int py = 0; py < ph; ++py)
            for (int px = 0; px < pw; ++px)
                for (int wy = 0; wy < wq; ++wy)
                    for (int wx = 0; wx < wq; ++wx) {
                        const int sy = py * q - pb + wy, sx = px * q - pb + wx;
                        if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                        std::copy(&x.val().at(bi, sy, sx, 0), &x.val().at(bi, sy, sx, 0) + c,
                                  &out.at(bi, py * pw + px, wy * wq + wx, 0));
                    }
    return make_node(std::move(out), {x}, [b, h, w, c, ph, pw, q, wq, pb](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int bi = 0; bi < b; ++bi)
            for (int py = 0; py < ph; ++py)
                for (int px = 0; px < pw; ++px)
                    for (int wy = 0; wy < wq; ++wy)
                        for (int wx = 0; wx < wq; ++wx) {
                            const int sy = py * q - pb + wy, sx = px * q - pb + wx;
                            if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                            const Real* src = &self.grad.at(bi, py * pw + px, wy * wq + wx, 0);
                            Real* dst = &g.at(bi, sy, sx, 0);
                            for (int ci = 0; ci < c; ++ci) dst[ci] += src[ci];
                        }
    });
}

Var gather_dim1(const Var& x, std::vector<int> idx) {
    const auto& s = x.val().shape();
    if (s.size() != 4) throw ShapeError("gather_dim1: expected [B,P,S,C]");
    const int b = s[0], p = s[1], row = s[2] * s[3];
    for (int i : idx)
        if (i < 0 || i >= p) throw ShapeError("gather_dim1: index out of range");
    const int n = static_cast<int>(idx.size());
    Tensor out({b, n, s[2], s[3]});
    for (int bi = 0; bi < b; ++bi)
        for (int j = 0; j < n; ++j)
            std::copy(x.val().data() + (static_cast<size_t>(bi) * p + idx[j]) * row,
                      x.val().data() + (static_cast<size_t>(bi) * p + idx[j]) * row + row,
                      out.data() + (static_cast<size_t>(bi) * n + j) * row);
    return make_node(std::move(out), {x}, [b, p, row, idx = std::move(idx)](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        const int n = static_cast<int>(idx.size());
        for (int bi = 0; bi < b; ++bi)
            for (int j = 0; j < n; ++j) {
                const Real* src = self.grad.data() + (static_cast<size_t>(bi) * n + j) * row;
                Real* dst = g.data() + (static_cast<size_t>(bi) * p + idx[j]) * row;
                for (int i = 0; i < row; ++i) dst[i] += src[i];
            }
    });
}

Var scatter_merge_dim1(int p, std::vector<int> idx_a, const Var& a,
                       std::vector<int> idx_b, const Var& b) {
    const Var& ref = a.defined() ? a : b;
    if (!ref.defined()) throw ShapeError("scatter_merge_dim1: both inputs empty");
    const auto& s = ref.val().shape();
    const int bn = s[0], row = s[2] * s[3];
    const int na = static_cast<int>(idx_a.size()), nb = static_cast<int>(idx_b.size());
    if (na + nb != p) throw ShapeError("scatter_merge_dim1: indices do not cover all rows");
    if ((a.defined() && a.val().dim(1) != na) || (b.defined() && b.val().dim(1) != nb))
        throw ShapeError("scatter_merge_dim1: index/input size mismatch");
    std::vector<char> hit(static_cast<size_t>(p), 0);
    for (int i : idx_a) hit[static_cast<size_t>(i)]++;
    for (int i : idx_b) hit[static_cast<size_t>(i)]++;
    for (int i = 0; i < p; ++i)
        if (hit[static_cast<size_t>(i)] != 1)
            throw ShapeError("scatter_merge_dim1: indices not a partition");
    Tensor out({bn, p, s[2], s[3]});
    for (int bi = 0; bi < bn; ++bi) {
        for (int j = 0; j < na; ++j)
            std::copy(a.val().data() + (static_cast<size_t>(bi) * na + j) * row,
                      a.val().data() + (static_cast<size_t>(bi) * na + j) * row + row,
                      out.data() + (static_cast<size_t>(bi) * p + idx_a[j]) * row);
        for (int j = 0; j < nb; ++j)
            std::copy(b.val().data() + (static_cast<size_t>(bi) * nb + j) * row,
                      b.val().data() + (static_cast<size_t>(bi) * nb + j) * row + row,
                      out.data() + (static_cast<size_t>(bi) * p + idx_b[j]) * row);
    }
    std::vector<Var> parents;
    if (a.defined()) parents.push_back(a);
    if (b.defined()) parents.push_back(b);
    const bool has_a = a.defined(), has_b = b.defined();
    return make_node(std::move(out), parents,
                     [bn, p, row, has_a, has_b, idx_a = std::move(idx_a),
                      idx_b = std::move(idx_b)](Node& self) {
        int pi = 0;
        if (has_a) {
            auto& pa = self.parents[pi++];
            if (wants(pa)) {
                Tensor& g = pa->ensure_grad();
                const int na = static_cast<int>(idx_a.size());
                for (int bi = 0; bi < bn; ++bi)
                    for (int j = 0; j < na; ++j) {
                        const Real* src = self.grad.data() + (static_cast<size_t>(bi) * p + idx_a[j]) * row;
                        Real* dst = g.data() + (static_cast<size_t>(bi) * na + j) * row;
                        for (int i = 0; i < row; ++i) dst[i] += src[i];
                    }
            }
        }
        if (has_b) {
            auto& pb = self.parents[pi];
            if (wants(pb)) {
                Tensor& g = pb->ensure_grad();
                const int nb = static_cast<int>(idx_b.size());
                for (int bi = 0; bi < bn; ++bi)
                    for (int j = 0; j < nb; ++j) {
                        const Real* src = self.grad.data() + (static_cast<size_t>(bi) * p + idx_b[j]) * row;
                        Real* dst = g.data() + (static_cast<size_t>(bi) * nb + j) * row;
                        for (int i = 0; i < row; ++i) dst[i] += src[i];
                    }
            }
        }
    });
}

Var broadcast_mul_patch(const Var& h, const Var& x) {
    const auto& sh = h.val().shape();
    const auto& sx = x.val().shape();
    if (sh.size() != 2 || sx.size() != 4 || sh[0] != sx[0] || sh[1] != sx[1])
        throw ShapeError("broadcast_mul_patch: bad shapes " + h.val().shape_str() + ", " +
                         x.val().shape_str());
    const int b = sx[0], p = sx[1], row = sx[2] * sx[3];
    Tensor out(sx);
    for (int bi = 0; bi < b; ++bi)
        for (int pi = 0; pi < p; ++pi) {
            const Real f = h.val().at(bi, pi);
            const Real* src = x.val().data() + (static_cast<size_t>(bi) * p + pi) * row;
            Real* dst = out.data() + (static_cast<size_t>(bi) * p + pi) * row;
            for (int i = 0; i < row; ++i) dst[i] = src[i] * f;
        }
    return make_node(std::move(out), {h, x}, [b, p, row](Node& self) {
        const Tensor& hv = self.parents[0]->value;
        const Tensor& xv = self.parents[1]->value;
        if (wants(self.parents[0])) {
            Tensor& g = self.parents[0]->ensure_grad();
            for (int bi = 0; bi < b; ++bi)
                for (int pi = 0; pi < p; ++pi) {
                    const Real* gs = self.grad.data() + (static_cast<size_t>(bi) * p + pi) * row;
                    const Real* xs = xv.data() + (static_cast<size_t>(bi) * p + pi) * row;
                    Real acc = 0;
                    for (int i = 0; i < row; ++i) acc += gs[i] * xs[i];
                    g.at(bi, pi) += acc;
                }
        }
        if (wants(self.parents[1])) {
            Tensor& g = self.parents[1]->ensure_grad();
            for (int bi = 0; bi < b; ++bi)
                for (int pi = 0; pi < p; ++pi) {
                    const Real f = hv.at(bi, pi);
                    const Real* gs = self.grad.data() + (static_cast<size_t>(bi) * p + pi) * row;
                    Real* dst = g.data() + (static_cast<size_t>(bi) * p + pi) * row;
                    for (int i = 0; i < row; ++i) dst[i] += gs[i] * f;
                }
        }
    });
}

Var hard_threshold_st(const Var& x) {
    Tensor out(x.val().shape());
    for (int i = 0; i < out.numel(); ++i) out[i] = x.val()[i] > Real(0.5) ? Real(1) : Real(0);
    return make_node(std::move(out), {x}, [](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
}

}  // namespace catair
