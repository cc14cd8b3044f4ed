// Dense row-major double tensors and the handful of math kernels the rest of
// the library is built on. Everything here is deterministic and checks its
// outputs for NaN/Inf so numerical problems surface at the op that caused them.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace qptad {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

struct Tensor {
    Shape shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)) {
        for (int e : shape)
            if (e <= 0) throw std::invalid_argument("Tensor: non-positive extent in " + shape_str(shape));
        v.assign(numel_of(shape), fill);
    }
    Tensor(Shape s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
        if (v.size() != numel_of(shape))
            throw std::invalid_argument("Tensor: data size " + std::to_string(v.size()) +
                                        " does not match shape " + shape_str(shape));
    }

    static size_t numel_of(const Shape& s) {
        size_t n = 1;
        for (int e : s) n *= static_cast<size_t>(e);
        return n;
    }
    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor scalar(double x) { return Tensor({1}, {x}); }

    size_t numel() const { return v.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    int rows() const { return rank() >= 2 ? shape[rank() - 2] : 1; }
    int cols() const { return rank() >= 1 ? shape[rank() - 1] : 1; }
    // Number of length-`cols()` rows when the tensor is viewed as [..., K].
    int nrows_flat() const { return static_cast<int>(numel()) / std::max(1, cols()); }

    double& at(size_t i) { return v[i]; }
    double at(size_t i) const { return v[i]; }
    double& at2(int r, int c) { return v[static_cast<size_t>(r) * cols() + c]; }
    double at2(int r, int c) const { return v[static_cast<size_t>(r) * cols() + c]; }

    double item() const {
        if (numel() != 1) throw std::invalid_argument("item(): tensor has " + std::to_string(numel()) + " elements");
        return v[0];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(double x) { std::fill(v.begin(), v.end(), x); }
};

inline bool all_finite(const Tensor& t) {
    for (double x : t.v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline void require_finite(const Tensor& t, const char* who) {
    if (!all_finite(t)) throw std::runtime_error(std::string(who) + ": non-finite value in result");
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(who) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                                    shape_str(b.shape));
}

// ---------------------------------------------------------------------------
// Elementwise and matrix kernels. These are the forward routines; the autodiff
// layer wraps them with backward rules.
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (size_t i = 0; i < out.numel(); ++i) out.v[i] += b.v[i];
    require_finite(out, "add");
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a;
    for (size_t i = 0; i < out.numel(); ++i) out.v[i] -= b.v[i];
    require_finite(out, "sub");
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a;
    for (size_t i = 0; i < out.numel(); ++i) out.v[i] *= b.v[i];
    require_finite(out, "mul");
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out = a;
    for (double& x : out.v) x *= c;
    require_finite(out, "scale");
    return out;
}

// a: [m x k], b: [k x n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape) + " vs " +
                                    shape_str(b.shape));
    const int m = a.shape[0], k = a.shape[1], n = b.shape[0] ? b.shape[1] : 0;
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
        const double* arow = &a.v[static_cast<size_t>(i) * k];
        double* orow = &out.v[static_cast<size_t>(i) * n];
        for (int p = 0; p < k; ++p) {
            const double aik = arow[p];
            if (aik == 0.0) continue;
            const double* brow = &b.v[static_cast<size_t>(p) * n];
            for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    }
    require_finite(out, "matmul");
    return out;
}

inline Tensor transpose2d(const Tensor& a) {
    if (a.rank() != 2) throw std::invalid_argument("transpose2d: rank != 2, got " + shape_str(a.shape));
    const int m = a.shape[0], n = a.shape[1];
    Tensor out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at2(j, i) = a.at2(i, j);
    return out;
}

// y = x W + b, broadcast over leading extents of x. x: [.. x I], W: [I x O], b: [O].
inline Tensor linear(const Tensor& x, const Tensor& W, const Tensor& b) {
    if (W.rank() != 2)
        throw std::invalid_argument("linear: weight must be 2-D, got " + shape_str(W.shape));
    const int in = W.shape[0], out_dim = W.shape[1];
    if (x.cols() != in)
        throw std::invalid_argument("linear: input " + shape_str(x.shape) + " does not match weight " +
                                    shape_str(W.shape));
    if (b.numel() != static_cast<size_t>(out_dim))
        throw std::invalid_argument("linear: bias " + shape_str(b.shape) + " does not match weight " +
                                    shape_str(W.shape));
    const int rows = x.nrows_flat();
    Shape out_shape = x.shape;
    out_shape.back() = out_dim;
    Tensor out(out_shape);
    for (int r = 0; r < rows; ++r) {
        const double* xr = &x.v[static_cast<size_t>(r) * in];
        double* yr = &out.v[static_cast<size_t>(r) * out_dim];
        for (int j = 0; j < out_dim; ++j) yr[j] = b.v[j];
        for (int p = 0; p < in; ++p) {
            const double xv = xr[p];
            if (xv == 0.0) continue;
            const double* wrow = &W.v[static_cast<size_t>(p) * out_dim];
            for (int j = 0; j < out_dim; ++j) yr[j] += xv * wrow[j];
        }
    }
    require_finite(out, "linear");
    return out;
}

inline Tensor relu(const Tensor& x) {
    Tensor out = x;
    for (double& v : out.v) v = v > 0.0 ? v : 0.0;
    return out;
}

// Numerically stabilized softmax over the last extent.
inline Tensor softmax_lastdim(const Tensor& x) {
    const int k = x.cols();
    if (k < 1) throw std::invalid_argument("softmax: empty last extent");
    Tensor out = x;
    const int rows = x.nrows_flat();
    for (int r = 0; r < rows; ++r) {
        double* row = &out.v[static_cast<size_t>(r) * k];
        double mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < k; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int j = 0; j < k; ++j) row[j] /= sum;
    }
    require_finite(out, "softmax");
    return out;
}

// Normalizes each length-D row to zero mean / unit variance (biased variance,
// eps-smoothed), then applies gain and bias.
inline Tensor layer_norm_lastdim(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const int d = x.cols();
    if (d < 1) throw std::invalid_argument("layer_norm: empty last extent");
    if (gain.numel() != static_cast<size_t>(d) || bias.numel() != static_cast<size_t>(d))
        throw std::invalid_argument("layer_norm: gain/bias " + shape_str(gain.shape) + "/" + shape_str(bias.shape) +
                                    " do not match row width " + std::to_string(d));
    Tensor out = x;
    const int rows = x.nrows_flat();
    for (int r = 0; r < rows; ++r) {
        double* row = &out.v[static_cast<size_t>(r) * d];
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += row[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < d; ++j) row[j] = (row[j] - mean) * inv * gain.v[j] + bias.v[j];
    }
    require_finite(out, "layer_norm");
    return out;
}

// Linear interpolation between adjacent rows of seq [T x D] at continuous
// time t (feature-grid units). t outside [0, T-1] clamps to the boundary row.
inline Tensor interp_sample(const Tensor& seq, double t) {
    if (seq.rank() != 2 || seq.shape[0] < 1)
        throw std::invalid_argument("interp_sample: need a non-empty [T x D] sequence, got " + shape_str(seq.shape));
    const int T = seq.shape[0], D = seq.shape[1];
    Tensor out({D});
    if (T == 1) {
        std::copy_n(&seq.v[0], D, &out.v[0]);
        return out;
    }
    const double tc = std::clamp(t, 0.0, static_cast<double>(T - 1));
    int k = std::min(static_cast<int>(std::floor(tc)), T - 2);
    const double lam = tc - k;
    const double* r0 = &seq.v[static_cast<size_t>(k) * D];
    const double* r1 = &seq.v[static_cast<size_t>(k + 1) * D];
    for (int j = 0; j < D; ++j) out.v[j] = (1.0 - lam) * r0[j] + lam * r1[j];
    require_finite(out, "interp_sample");
    return out;
}

}  // namespace qptad
