// Reverse-mode automatic differentiation over Tensor values. Each op builds a
// node holding the forward result and a closure that pushes cotangents into
// its parents; backward() walks the DAG once in reverse topological order.
// The graph is rebuilt per step (dynamic tape), parameters are leaves that
// accumulate into Parameter::grad.
#pragma once

#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "qptad/tensor.hpp"

namespace qptad {

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

    void zero_grad() { grad.fill(0.0); }
};

// Minimum distance any forward pass came to a non-differentiable kink
// (relu/abs zero crossings, min/max ties, clamp edges, interpolation cell
// boundaries). Finite-difference checks consult this to skip draws whose
// gradients a central difference cannot resolve.
inline thread_local double tl_kink_margin = std::numeric_limits<double>::infinity();
inline void reset_kink_margin() { tl_kink_margin = std::numeric_limits<double>::infinity(); }
inline double kink_margin() { return tl_kink_margin; }
inline void note_kink(double dist) {
    if (dist < tl_kink_margin) tl_kink_margin = dist;
}

// Test hook: when set, one backward rule (relu) is deliberately wrong so the
// gradient checker's failure path can be exercised end to end.
inline thread_local bool tl_corrupt_backward = false;

namespace detail {

struct Node {
    Tensor val;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> back;  // empty for leaves without side effects

    bool has_grad() const { return !grad.v.empty(); }
    const Tensor& grad_or_zero() {
        if (!has_grad()) grad = Tensor(val.shape);
        return grad;
    }
};

inline void accumulate(Node& n, const Tensor& g) {
    if (!n.requires_grad) return;
    if (!n.has_grad()) {
        n.grad = g;
    } else {
        for (size_t i = 0; i < g.numel(); ++i) n.grad.v[i] += g.v[i];
    }
}

}  // namespace detail

class Var {
  public:
    using Node = detail::Node;

    Var() = default;

    static Var constant(Tensor t) {
        Var v;
        v.n_ = std::make_shared<Node>();
        v.n_->val = std::move(t);
        return v;
    }
    static Var scalar(double x) { return constant(Tensor::scalar(x)); }

    // Leaf bound to a Parameter: backward lands in p.grad.
    static Var param(Parameter& p) {
        Var v;
        v.n_ = std::make_shared<Node>();
        v.n_->val = p.value;
        v.n_->requires_grad = true;
        Parameter* pp = &p;
        v.n_->back = [pp](Node& self) {
            if (!self.has_grad()) return;
            for (size_t i = 0; i < self.grad.numel(); ++i) pp->grad.v[i] += self.grad.v[i];
        };
        return v;
    }

    // Leaf that keeps its gradient on the node (for checking d/d-input).
    static Var input(Tensor t) {
        Var v;
        v.n_ = std::make_shared<Node>();
        v.n_->val = std::move(t);
        v.n_->requires_grad = true;
        return v;
    }

    bool defined() const { return n_ != nullptr; }
    const Tensor& value() const { return n_->val; }
    const Shape& shape() const { return n_->val.shape; }
    bool requires_grad() const { return n_->requires_grad; }
    const Tensor& grad() const {
        if (!n_->has_grad()) n_->grad = Tensor(n_->val.shape);
        return n_->grad;
    }

    std::shared_ptr<Node> node() const { return n_; }

    static Var make(Tensor val, std::vector<Var> parents, std::function<void(Node&)> back) {
        Var v;
        v.n_ = std::make_shared<Node>();
        v.n_->val = std::move(val);
        for (auto& p : parents) {
            v.n_->requires_grad = v.n_->requires_grad || p.n_->requires_grad;
            v.n_->parents.push_back(p.n_);
        }
        if (v.n_->requires_grad) v.n_->back = std::move(back);
        return v;
    }

    // Seeds d(self)/d(self) = 1 and runs every backward rule once, children
    // before parents. Only defined for scalar outputs.
    void backward() const {
        if (n_->val.numel() != 1) throw std::invalid_argument("backward(): output is not a scalar");
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        std::vector<std::pair<Node*, size_t>> stack{{n_.get(), 0}};
        seen.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                Node* p = node->parents[idx++].get();
                if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        n_->grad = Tensor::scalar(1.0);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* node = *it;
            if (node->back && node->has_grad()) node->back(*node);
        }
    }

  private:
    std::shared_ptr<Node> n_;
};

namespace detail {
inline Node& P(Node& self, size_t i) { return *self.parents[i]; }
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / arithmetic ops
// ---------------------------------------------------------------------------

inline Var operator+(const Var& a, const Var& b) {
    return Var::make(add(a.value(), b.value()), {a, b}, [](detail::Node& s) {
        detail::accumulate(detail::P(s, 0), s.grad);
        detail::accumulate(detail::P(s, 1), s.grad);
    });
}

inline Var operator-(const Var& a, const Var& b) {
    return Var::make(sub(a.value(), b.value()), {a, b}, [](detail::Node& s) {
        detail::accumulate(detail::P(s, 0), s.grad);
        Tensor g = s.grad;
        for (double& x : g.v) x = -x;
        detail::accumulate(detail::P(s, 1), g);
    });
}

inline Var operator*(const Var& a, const Var& b) {
    return Var::make(mul(a.value(), b.value()), {a, b}, [](detail::Node& s) {
        detail::accumulate(detail::P(s, 0), mul(s.grad, detail::P(s, 1).val));
        detail::accumulate(detail::P(s, 1), mul(s.grad, detail::P(s, 0).val));
    });
}

inline Var vscale(const Var& a, double c) {
    return Var::make(scale(a.value(), c), {a},
                     [c](detail::Node& s) { detail::accumulate(detail::P(s, 0), scale(s.grad, c)); });
}

inline Var operator-(const Var& a) { return vscale(a, -1.0); }

inline Var vdiv(const Var& a, const Var& b) {
    Tensor out = a.value();
    for (size_t i = 0; i < out.numel(); ++i) out.v[i] /= b.value().v[i];
    require_finite(out, "vdiv");
    return Var::make(std::move(out), {a, b}, [](detail::Node& s) {
        const Tensor& bv = detail::P(s, 1).val;
        Tensor ga = s.grad;
        for (size_t i = 0; i < ga.numel(); ++i) ga.v[i] /= bv.v[i];
        detail::accumulate(detail::P(s, 0), ga);
        Tensor gb = s.grad;
        const Tensor& av = detail::P(s, 0).val;
        for (size_t i = 0; i < gb.numel(); ++i) gb.v[i] *= -av.v[i] / (bv.v[i] * bv.v[i]);
        detail::accumulate(detail::P(s, 1), gb);
    });
}

// tensor times scalar variable
inline Var scale_by(const Var& x, const Var& s) {
    if (s.value().numel() != 1) throw std::invalid_argument("scale_by: scale must be a scalar");
    const double c = s.value().item();
    return Var::make(scale(x.value(), c), {x, s}, [c](detail::Node& self) {
        detail::accumulate(detail::P(self, 0), scale(self.grad, c));
        double acc = 0.0;
        const Tensor& xv = detail::P(self, 0).val;
        for (size_t i = 0; i < xv.numel(); ++i) acc += self.grad.v[i] * xv.v[i];
        detail::accumulate(detail::P(self, 1), Tensor::scalar(acc));
    });
}

inline Var vrelu(const Var& a) {
    for (double x : a.value().v) note_kink(std::abs(x));
    return Var::make(relu(a.value()), {a}, [](detail::Node& s) {
        Tensor g = s.grad;
        const Tensor& x = detail::P(s, 0).val;
        const double scale = tl_corrupt_backward ? 1.01 : 1.0;
        for (size_t i = 0; i < g.numel(); ++i) g.v[i] = x.v[i] > 0.0 ? g.v[i] * scale : 0.0;
        detail::accumulate(detail::P(s, 0), g);
    });
}

inline Var vabs(const Var& a) {
    for (double x : a.value().v) note_kink(std::abs(x));
    Tensor out = a.value();
    for (double& x : out.v) x = std::abs(x);
    return Var::make(std::move(out), {a}, [](detail::Node& s) {
        Tensor g = s.grad;
        const Tensor& x = detail::P(s, 0).val;
        for (size_t i = 0; i < g.numel(); ++i) g.v[i] = x.v[i] > 0.0 ? g.v[i] : (x.v[i] < 0.0 ? -g.v[i] : 0.0);
        detail::accumulate(detail::P(s, 0), g);
    });
}

inline Var vsigmoid(const Var& a) {
    Tensor out = a.value();
    for (double& x : out.v) x = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    Tensor saved = out;
    return Var::make(std::move(out), {a}, [saved](detail::Node& s) {
        Tensor g = s.grad;
        for (size_t i = 0; i < g.numel(); ++i) g.v[i] *= saved.v[i] * (1.0 - saved.v[i]);
        detail::accumulate(detail::P(s, 0), g);
    });
}

inline Var vsoftplus(const Var& a) {
    Tensor out = a.value();
    for (double& x : out.v) x = x > 30.0 ? x : std::log1p(std::exp(x));
    return Var::make(std::move(out), {a}, [](detail::Node& s) {
        Tensor g = s.grad;
        const Tensor& x = detail::P(s, 0).val;
        for (size_t i = 0; i < g.numel(); ++i) {
            const double xi = x.v[i];
            const double sig = xi >= 0.0 ? 1.0 / (1.0 + std::exp(-xi)) : std::exp(xi) / (1.0 + std::exp(xi));
            g.v[i] *= sig;
        }
        detail::accumulate(detail::P(s, 0), g);
    });
}

inline Var vexp(const Var& a) {
    Tensor out = a.value();
    for (double& x : out.v) x = std::exp(x);
    require_finite(out, "vexp");
    Tensor saved = out;
    return Var::make(std::move(out), {a}, [saved](detail::Node& s) {
        detail::accumulate(detail::P(s, 0), mul(s.grad, saved));
    });
}

// phi1(z) = (exp(z) - 1) / z, the first phi-function of exponential
// integrators; phi1(0) = 1. Series branch keeps small |z| stable.
inline double phi1(double z) {
    if (std::abs(z) < 0.25) {
        double term = 1.0, sum = 1.0;
        for (int k = 1; k < 16; ++k) {
            term *= z / (k + 1);
            sum += term;
        }
        return sum;
    }
    return std::expm1(z) / z;
}

inline double phi1_deriv(double z) {
    if (std::abs(z) < 0.25) {
        // d/dz sum z^k/(k+1)! = sum k z^{k-1}/(k+1)!
        double sum = 0.0, zpow = 1.0;
        double fact = 1.0;  // (k+1)! running, 1! before the loop
        for (int k = 1; k < 16; ++k) {
            fact *= (k + 1);
            sum += k * zpow / fact;
            zpow *= z;
        }
        return sum;
    }
    return (std::exp(z) * (z - 1.0) + 1.0) / (z * z);
}

inline Var vphi1(const Var& a) {
    Tensor out = a.value();
    for (double& x : out.v) x = phi1(x);
    return Var::make(std::move(out), {a}, [](detail::Node& s) {
        Tensor g = s.grad;
        const Tensor& x = detail::P(s, 0).val;
        for (size_t i = 0; i < g.numel(); ++i) g.v[i] *= phi1_deriv(x.v[i]);
        detail::accumulate(detail::P(s, 0), g);
    });
}

inline Var vclamp(const Var& a, double lo, double hi) {
    Tensor out = a.value();
    for (double& x : out.v) {
        note_kink(std::abs(x - lo));
        note_kink(std::abs(x - hi));
        x = std::clamp(x, lo, hi);
    }
    return Var::make(std::move(out), {a}, [lo, hi](detail::Node& s) {
        Tensor g = s.grad;
        const Tensor& x = detail::P(s, 0).val;
        for (size_t i = 0; i < g.numel(); ++i)
            if (x.v[i] <= lo || x.v[i] >= hi) g.v[i] = 0.0;
        detail::accumulate(detail::P(s, 0), g);
    });
}

inline Var vminimum(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "vminimum");
    Tensor out = a.value();
    for (size_t i = 0; i < out.numel(); ++i) {
        note_kink(std::abs(a.value().v[i] - b.value().v[i]));
        out.v[i] = std::min(a.value().v[i], b.value().v[i]);
    }
    return Var::make(std::move(out), {a, b}, [](detail::Node& s) {
        const Tensor& av = detail::P(s, 0).val;
        const Tensor& bv = detail::P(s, 1).val;
        Tensor ga(av.shape), gb(bv.shape);
        for (size_t i = 0; i < av.numel(); ++i)
            (av.v[i] <= bv.v[i] ? ga.v[i] : gb.v[i]) = s.grad.v[i];
        detail::accumulate(detail::P(s, 0), ga);
        detail::accumulate(detail::P(s, 1), gb);
    });
}

inline Var vmaximum(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "vmaximum");
    Tensor out = a.value();
    for (size_t i = 0; i < out.numel(); ++i) {
        note_kink(std::abs(a.value().v[i] - b.value().v[i]));
        out.v[i] = std::max(a.value().v[i], b.value().v[i]);
    }
    return Var::make(std::move(out), {a, b}, [](detail::Node& s) {
        const Tensor& av = detail::P(s, 0).val;
        const Tensor& bv = detail::P(s, 1).val;
        Tensor ga(av.shape), gb(bv.shape);
        for (size_t i = 0; i < av.numel(); ++i)
            (av.v[i] >= bv.v[i] ? ga.v[i] : gb.v[i]) = s.grad.v[i];
        detail::accumulate(detail::P(s, 0), ga);
        detail::accumulate(detail::P(s, 1), gb);
    });
}

// ---------------------------------------------------------------------------
// Linear algebra / shaping
// ---------------------------------------------------------------------------

inline Var vmatmul(const Var& a, const Var& b) {
    return Var::make(matmul(a.value(), b.value()), {a, b}, [](detail::Node& s) {
        detail::accumulate(detail::P(s, 0), matmul(s.grad, transpose2d(detail::P(s, 1).val)));
        detail::accumulate(detail::P(s, 1), matmul(transpose2d(detail::P(s, 0).val), s.grad));
    });
}

inline Var vlinear(const Var& x, const Var& W, const Var& b) {
    return Var::make(linear(x.value(), W.value(), b.value()), {x, W, b}, [](detail::Node& s) {
        const Tensor& xv = detail::P(s, 0).val;
        const Tensor& Wv = detail::P(s, 1).val;
        const int in = Wv.shape[0], out = Wv.shape[1];
        const int rows = xv.nrows_flat();
        // dX = G W^T
        Tensor gx(xv.shape);
        for (int r = 0; r < rows; ++r)
            for (int p = 0; p < in; ++p) {
                double acc = 0.0;
                const double* grow = &s.grad.v[static_cast<size_t>(r) * out];
                const double* wrow = &Wv.v[static_cast<size_t>(p) * out];
                for (int j = 0; j < out; ++j) acc += grow[j] * wrow[j];
                gx.v[static_cast<size_t>(r) * in + p] = acc;
            }
        detail::accumulate(detail::P(s, 0), gx);
        // dW = X^T G
        Tensor gw(Wv.shape);
        for (int r = 0; r < rows; ++r) {
            const double* xrow = &xv.v[static_cast<size_t>(r) * in];
            const double* grow = &s.grad.v[static_cast<size_t>(r) * out];
            for (int p = 0; p < in; ++p) {
                if (xrow[p] == 0.0) continue;
                double* wrow = &gw.v[static_cast<size_t>(p) * out];
                for (int j = 0; j < out; ++j) wrow[j] += xrow[p] * grow[j];
            }
        }
        detail::accumulate(detail::P(s, 1), gw);
        // db = column sums of G
        Tensor gb({out});
        for (int r = 0; r < rows; ++r)
            for (int j = 0; j < out; ++j) gb.v[j] += s.grad.v[static_cast<size_t>(r) * out + j];
        detail::accumulate(detail::P(s, 2), gb);
    });
}

inline Var vtranspose(const Var& a) {
    return Var::make(transpose2d(a.value()), {a}, [](detail::Node& s) {
        detail::accumulate(detail::P(s, 0), transpose2d(s.grad));
    });
}

inline Var vreshape(const Var& a, Shape shape) {
    if (Tensor::numel_of(shape) != a.value().numel())
        throw std::invalid_argument("vreshape: size mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
    Tensor out = a.value();
    out.shape = shape;
    return Var::make(std::move(out), {a}, [](detail::Node& s) {
        Tensor g = s.grad;
        g.shape = detail::P(s, 0).val.shape;
        detail::accumulate(detail::P(s, 0), g);
    });
}

inline Var vconcat_last(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.nrows_flat() != bv.nrows_flat())
        throw std::invalid_argument("vconcat_last: row mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
    const int rows = av.nrows_flat(), ka = av.cols(), kb = bv.cols();
    Shape out_shape = av.shape;
    out_shape.back() = ka + kb;
    Tensor out(out_shape);
    for (int r = 0; r < rows; ++r) {
        std::copy_n(&av.v[static_cast<size_t>(r) * ka], ka, &out.v[static_cast<size_t>(r) * (ka + kb)]);
        std::copy_n(&bv.v[static_cast<size_t>(r) * kb], kb, &out.v[static_cast<size_t>(r) * (ka + kb) + ka]);
    }
    return Var::make(std::move(out), {a, b}, [rows, ka, kb](detail::Node& s) {
        Tensor ga(detail::P(s, 0).val.shape), gb(detail::P(s, 1).val.shape);
        for (int r = 0; r < rows; ++r) {
            std::copy_n(&s.grad.v[static_cast<size_t>(r) * (ka + kb)], ka, &ga.v[static_cast<size_t>(r) * ka]);
            std::copy_n(&s.grad.v[static_cast<size_t>(r) * (ka + kb) + ka], kb, &gb.v[static_cast<size_t>(r) * kb]);
        }
        detail::accumulate(detail::P(s, 0), ga);
        detail::accumulate(detail::P(s, 1), gb);
    });
}

inline Var vrow(const Var& a, int i) {
    const Tensor& av = a.value();
    if (av.rank() != 2 || i < 0 || i >= av.shape[0])
        throw std::invalid_argument("vrow: bad row " + std::to_string(i) + " for " + shape_str(av.shape));
    const int n = av.shape[1];
    Tensor out({n});
    std::copy_n(&av.v[static_cast<size_t>(i) * n], n, &out.v[0]);
    return Var::make(std::move(out), {a}, [i, n](detail::Node& s) {
        Tensor g(detail::P(s, 0).val.shape);
        std::copy_n(&s.grad.v[0], n, &g.v[static_cast<size_t>(i) * n]);
        detail::accumulate(detail::P(s, 0), g);
    });
}

inline Var vcol(const Var& a, int j) {
    const Tensor& av = a.value();
    if (av.rank() != 2 || j < 0 || j >= av.shape[1])
        throw std::invalid_argument("vcol: bad column " + std::to_string(j) + " for " + shape_str(av.shape));
    const int m = av.shape[0], n = av.shape[1];
    Tensor out({m});
    for (int r = 0; r < m; ++r) out.v[r] = av.v[static_cast<size_t>(r) * n + j];
    return Var::make(std::move(out), {a}, [j, m, n](detail::Node& s) {
        Tensor g(detail::P(s, 0).val.shape);
        for (int r = 0; r < m; ++r) g.v[static_cast<size_t>(r) * n + j] = s.grad.v[r];
        detail::accumulate(detail::P(s, 0), g);
    });
}

inline Var vcols(const Var& a, int c0, int c1) {
    const Tensor& av = a.value();
    if (av.rank() != 2 || c0 < 0 || c1 > av.shape[1] || c0 >= c1)
        throw std::invalid_argument("vcols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) + ") for " +
                                    shape_str(av.shape));
    const int m = av.shape[0], n = av.shape[1], k = c1 - c0;
    Tensor out({m, k});
    for (int r = 0; r < m; ++r)
        std::copy_n(&av.v[static_cast<size_t>(r) * n + c0], k, &out.v[static_cast<size_t>(r) * k]);
    return Var::make(std::move(out), {a}, [c0, m, n, k](detail::Node& s) {
        Tensor g(detail::P(s, 0).val.shape);
        for (int r = 0; r < m; ++r)
            std::copy_n(&s.grad.v[static_cast<size_t>(r) * k], k, &g.v[static_cast<size_t>(r) * n + c0]);
        detail::accumulate(detail::P(s, 0), g);
    });
}

inline Var velem(const Var& a, int r, int c) {
    const Tensor& av = a.value();
    if (av.rank() > 2 || (av.rank() == 1 && r != 0))
        throw std::invalid_argument("velem: bad index for " + shape_str(av.shape));
    const int n = av.cols();
    Tensor out = Tensor::scalar(av.at2(r, c));
    return Var::make(std::move(out), {a}, [r, c, n](detail::Node& s) {
        Tensor g(detail::P(s, 0).val.shape);
        g.v[static_cast<size_t>(r) * n + c] = s.grad.v[0];
        detail::accumulate(detail::P(s, 0), g);
    });
}

inline Var vstack_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw std::invalid_argument("vstack_rows: empty");
    const int n = static_cast<int>(rows[0].value().numel());
    Tensor out({static_cast<int>(rows.size()), n});
    for (size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].value().numel() != static_cast<size_t>(n))
            throw std::invalid_argument("vstack_rows: ragged rows");
        std::copy_n(&rows[r].value().v[0], n, &out.v[r * n]);
    }
    return Var::make(std::move(out), rows, [n](detail::Node& s) {
        for (size_t r = 0; r < s.parents.size(); ++r) {
            Tensor g(detail::P(s, r).val.shape);
            std::copy_n(&s.grad.v[r * n], n, &g.v[0]);
            detail::accumulate(detail::P(s, r), g);
        }
    });
}

// stack columns: each entry is a length-m vector, result [m x n]
inline Var vstack_cols(const std::vector<Var>& cols) {
    if (cols.empty()) throw std::invalid_argument("vstack_cols: empty");
    const int m = static_cast<int>(cols[0].value().numel());
    const int n = static_cast<int>(cols.size());
    Tensor out({m, n});
    for (int j = 0; j < n; ++j) {
        if (cols[j].value().numel() != static_cast<size_t>(m))
            throw std::invalid_argument("vstack_cols: ragged columns");
        for (int r = 0; r < m; ++r) out.v[static_cast<size_t>(r) * n + j] = cols[j].value().v[r];
    }
    return Var::make(std::move(out), cols, [m, n](detail::Node& s) {
        for (int j = 0; j < n; ++j) {
            Tensor g(detail::P(s, j).val.shape);
            for (int r = 0; r < m; ++r) g.v[r] = s.grad.v[static_cast<size_t>(r) * n + j];
            detail::accumulate(detail::P(s, j), g);
        }
    });
}

inline Var vtile_rows(const Var& v, int t) {
    const int n = static_cast<int>(v.value().numel());
    Tensor out({t, n});
    for (int r = 0; r < t; ++r) std::copy_n(&v.value().v[0], n, &out.v[static_cast<size_t>(r) * n]);
    return Var::make(std::move(out), {v}, [t, n](detail::Node& s) {
        Tensor g(detail::P(s, 0).val.shape);
        for (int r = 0; r < t; ++r)
            for (int j = 0; j < n; ++j) g.v[j] += s.grad.v[static_cast<size_t>(r) * n + j];
        detail::accumulate(detail::P(s, 0), g);
    });
}

inline Var vouter(const Var& u, const Var& v) {
    const int m = static_cast<int>(u.value().numel());
    const int n = static_cast<int>(v.value().numel());
    Tensor out({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.v[static_cast<size_t>(i) * n + j] = u.value().v[i] * v.value().v[j];
    return Var::make(std::move(out), {u, v}, [m, n](detail::Node& s) {
        const Tensor& uv = detail::P(s, 0).val;
        const Tensor& vv = detail::P(s, 1).val;
        Tensor gu(uv.shape), gv(vv.shape);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                const double g = s.grad.v[static_cast<size_t>(i) * n + j];
                gu.v[i] += g * vv.v[j];
                gv.v[j] += g * uv.v[i];
            }
        detail::accumulate(detail::P(s, 0), gu);
        detail::accumulate(detail::P(s, 1), gv);
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var vsum(const Var& a) {
    double acc = 0.0;
    for (double x : a.value().v) acc += x;
    return Var::make(Tensor::scalar(acc), {a}, [](detail::Node& s) {
        Tensor g(detail::P(s, 0).val.shape, s.grad.v[0]);
        detail::accumulate(detail::P(s, 0), g);
    });
}

inline Var vmean(const Var& a) { return vscale(vsum(a), 1.0 / static_cast<double>(a.value().numel())); }

inline Var vreduce_min(const Var& a) {
    const Tensor& av = a.value();
    size_t best = 0;
    for (size_t i = 1; i < av.numel(); ++i)
        if (av.v[i] < av.v[best]) best = i;
    for (size_t i = 0; i < av.numel(); ++i)
        if (i != best) note_kink(std::abs(av.v[i] - av.v[best]));
    return Var::make(Tensor::scalar(av.v[best]), {a}, [best](detail::Node& s) {
        Tensor g(detail::P(s, 0).val.shape);
        g.v[best] = s.grad.v[0];
        detail::accumulate(detail::P(s, 0), g);
    });
}

inline Var vreduce_max(const Var& a) {
    const Tensor& av = a.value();
    size_t best = 0;
    for (size_t i = 1; i < av.numel(); ++i)
        if (av.v[i] > av.v[best]) best = i;
    for (size_t i = 0; i < av.numel(); ++i)
        if (i != best) note_kink(std::abs(av.v[i] - av.v[best]));
    return Var::make(Tensor::scalar(av.v[best]), {a}, [best](detail::Node& s) {
        Tensor g(detail::P(s, 0).val.shape);
        g.v[best] = s.grad.v[0];
        detail::accumulate(detail::P(s, 0), g);
    });
}

// ---------------------------------------------------------------------------
// Neural primitives
// ---------------------------------------------------------------------------

inline Var vsoftmax(const Var& a) {
    Tensor out = softmax_lastdim(a.value());
    Tensor saved = out;
    return Var::make(std::move(out), {a}, [saved](detail::Node& s) {
        const int k = saved.cols();
        const int rows = saved.nrows_flat();
        Tensor g(saved.shape);
        for (int r = 0; r < rows; ++r) {
            const double* srow = &saved.v[static_cast<size_t>(r) * k];
            const double* grow = &s.grad.v[static_cast<size_t>(r) * k];
            double dot = 0.0;
            for (int j = 0; j < k; ++j) dot += grow[j] * srow[j];
            double* orow = &g.v[static_cast<size_t>(r) * k];
            for (int j = 0; j < k; ++j) orow[j] = srow[j] * (grow[j] - dot);
        }
        detail::accumulate(detail::P(s, 0), g);
    });
}

inline Var vlayer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
    const Tensor& xv = x.value();
    const int d = xv.cols();
    const int rows = xv.nrows_flat();
    Tensor xhat(xv.shape);
    Tensor inv_std({std::max(rows, 1)});
    Tensor out(xv.shape);
    for (int r = 0; r < rows; ++r) {
        const double* row = &xv.v[static_cast<size_t>(r) * d];
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += row[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std.v[r] = inv;
        for (int j = 0; j < d; ++j) {
            const double xh = (row[j] - mean) * inv;
            xhat.v[static_cast<size_t>(r) * d + j] = xh;
            out.v[static_cast<size_t>(r) * d + j] = xh * gain.value().v[j] + bias.value().v[j];
        }
    }
    require_finite(out, "vlayer_norm");
    return Var::make(std::move(out), {x, gain, bias}, [xhat, inv_std, d, rows](detail::Node& s) {
        const Tensor& gv = detail::P(s, 1).val;
        Tensor gx(detail::P(s, 0).val.shape);
        Tensor ggain(gv.shape), gbias(gv.shape);
        for (int r = 0; r < rows; ++r) {
            const double* xh = &xhat.v[static_cast<size_t>(r) * d];
            const double* go = &s.grad.v[static_cast<size_t>(r) * d];
            double mean_dxh = 0.0, mean_dxh_xh = 0.0;
            for (int j = 0; j < d; ++j) {
                const double dxh = go[j] * gv.v[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[j];
                ggain.v[j] += go[j] * xh[j];
                gbias.v[j] += go[j];
            }
            mean_dxh /= d;
            mean_dxh_xh /= d;
            double* gxr = &gx.v[static_cast<size_t>(r) * d];
            for (int j = 0; j < d; ++j) {
                const double dxh = go[j] * gv.v[j];
                gxr[j] = inv_std.v[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        detail::accumulate(detail::P(s, 0), gx);
        detail::accumulate(detail::P(s, 1), ggain);
        detail::accumulate(detail::P(s, 2), gbias);
    });
}

// Linear interpolation into seq [T x D] at scalar time t. Gradients flow into
// both the sequence rows and the sampling time.
inline Var vinterp(const Var& seq, const Var& t) {
    if (t.value().numel() != 1) throw std::invalid_argument("vinterp: t must be a scalar");
    const Tensor& sv = seq.value();
    const int T = sv.shape[0], D = sv.shape[1];
    const double tv = t.value().item();
    Tensor out = interp_sample(sv, tv);
    if (T >= 2) {
        note_kink(std::abs(tv - 0.0));
        note_kink(std::abs(tv - static_cast<double>(T - 1)));
        if (tv > 0.0 && tv < T - 1) {
            const double frac = tv - std::floor(tv);
            note_kink(std::min(frac, 1.0 - frac));
        }
    }
    return Var::make(std::move(out), {seq, t}, [T, D, tv](detail::Node& s) {
        Tensor gseq(detail::P(s, 0).val.shape);
        double gt = 0.0;
        if (T == 1) {
            for (int j = 0; j < D; ++j) gseq.v[j] = s.grad.v[j];
        } else {
            const double tc = std::clamp(tv, 0.0, static_cast<double>(T - 1));
            const int k = std::min(static_cast<int>(std::floor(tc)), T - 2);
            const double lam = tc - k;
            const Tensor& seqv = detail::P(s, 0).val;
            const bool inside = tv > 0.0 && tv < static_cast<double>(T - 1);
            for (int j = 0; j < D; ++j) {
                const double g = s.grad.v[j];
                gseq.v[static_cast<size_t>(k) * D + j] += (1.0 - lam) * g;
                gseq.v[static_cast<size_t>(k + 1) * D + j] += lam * g;
                if (inside)
                    gt += g * (seqv.v[static_cast<size_t>(k + 1) * D + j] - seqv.v[static_cast<size_t>(k) * D + j]);
            }
        }
        detail::accumulate(detail::P(s, 0), gseq);
        detail::accumulate(detail::P(s, 1), Tensor::scalar(gt));
    });
}

// Time-varying diagonal state-space scan. Ax, Bu: [T x N], C: [N].
//   h_t = Ax_t (*) h_{t-1} + Bu_t,   y_t = C . h_t
// LTI callers tile a constant row; selective callers pass per-step rows.
inline Var vssm_scan(const Var& Ax, const Var& Bu, const Var& C) {
    const Tensor& av = Ax.value();
    const Tensor& bv = Bu.value();
    const Tensor& cv = C.value();
    if (av.rank() != 2 || !av.same_shape(bv) || cv.numel() != static_cast<size_t>(av.shape[1]))
        throw std::invalid_argument("vssm_scan: shapes " + shape_str(av.shape) + ", " + shape_str(bv.shape) + ", " +
                                    shape_str(cv.shape));
    const int T = av.shape[0], N = av.shape[1];
    Tensor h({T, N});
    Tensor y({T});
    std::vector<double> state(N, 0.0);
    for (int t = 0; t < T; ++t) {
        double yt = 0.0;
        for (int n = 0; n < N; ++n) {
            state[n] = av.v[static_cast<size_t>(t) * N + n] * state[n] + bv.v[static_cast<size_t>(t) * N + n];
            h.v[static_cast<size_t>(t) * N + n] = state[n];
            yt += cv.v[n] * state[n];
        }
        y.v[t] = yt;
    }
    require_finite(y, "vssm_scan");
    return Var::make(std::move(y), {Ax, Bu, C}, [h, T, N](detail::Node& s) {
        const Tensor& av = detail::P(s, 0).val;
        const Tensor& cv = detail::P(s, 2).val;
        Tensor gA(av.shape), gB(av.shape), gC(cv.shape);
        std::vector<double> lam(N, 0.0);
        for (int t = T - 1; t >= 0; --t) {
            const double gy = s.grad.v[t];
            for (int n = 0; n < N; ++n) {
                const double ht = h.v[static_cast<size_t>(t) * N + n];
                gC.v[n] += gy * ht;
                lam[n] += gy * cv.v[n];
                const double hprev = t > 0 ? h.v[static_cast<size_t>(t - 1) * N + n] : 0.0;
                gA.v[static_cast<size_t>(t) * N + n] = lam[n] * hprev;
                gB.v[static_cast<size_t>(t) * N + n] = lam[n];
                lam[n] *= av.v[static_cast<size_t>(t) * N + n];
            }
        }
        detail::accumulate(detail::P(s, 0), gA);
        detail::accumulate(detail::P(s, 1), gB);
        detail::accumulate(detail::P(s, 2), gC);
    });
}

// Mean binary cross-entropy with logits against constant targets, computed in
// the max(x,0) - x t + log(1 + exp(-|x|)) form.
inline Var vbce_with_logits(const Var& logits, const Tensor& targets) {
    require_same_shape(logits.value(), targets, "vbce_with_logits");
    const Tensor& xv = logits.value();
    double acc = 0.0;
    for (size_t i = 0; i < xv.numel(); ++i) {
        const double x = xv.v[i], t = targets.v[i];
        acc += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
    }
    acc /= static_cast<double>(xv.numel());
    Tensor tgt = targets;
    return Var::make(Tensor::scalar(acc), {logits}, [tgt](detail::Node& s) {
        const Tensor& xv = detail::P(s, 0).val;
        const double g0 = s.grad.v[0] / static_cast<double>(xv.numel());
        Tensor g(xv.shape);
        for (size_t i = 0; i < xv.numel(); ++i) {
            const double x = xv.v[i];
            const double sig = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            g.v[i] = g0 * (sig - tgt.v[i]);
        }
        detail::accumulate(detail::P(s, 0), g);
    });
}

}  // namespace qptad
