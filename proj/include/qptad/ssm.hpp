// Continuous-time linear state-space parameters, their zero-order-hold
// discretization, and the two equivalent execution paths of the discrete
// system: the recurrent scan and the structured convolution kernel.
#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "qptad/tensor.hpp"

namespace qptad {

// One single-input single-output channel: dh/dt = A h + B u, y = C h,
// stepped with size delta.
struct SsmParams {
    Tensor A;  // [N x N]
    Tensor B;  // [N x 1]
    Tensor C;  // [1 x N]
    double delta = 0.1;

    int state_dim() const { return A.rank() == 2 ? A.shape[0] : 0; }

    void validate() const {
        const int n = state_dim();
        if (n < 1 || A.shape[1] != n) throw std::invalid_argument("SsmParams: A must be square, got " + shape_str(A.shape));
        if (B.numel() != static_cast<size_t>(n))
            throw std::invalid_argument("SsmParams: B " + shape_str(B.shape) + " does not match state dim " + std::to_string(n));
        if (C.numel() != static_cast<size_t>(n))
            throw std::invalid_argument("SsmParams: C " + shape_str(C.shape) + " does not match state dim " + std::to_string(n));
        if (!(delta > 0.0)) throw std::invalid_argument("SsmParams: delta must be positive, got " + std::to_string(delta));
        if (!all_finite(A) || !all_finite(B) || !all_finite(C)) throw std::invalid_argument("SsmParams: non-finite entries");
    }
};

struct DiscreteSsm {
    Tensor A_x;  // [N x N] = exp(delta A)
    Tensor B_x;  // [N]     = (delta A)^{-1} (exp(delta A) - I) delta B
};

namespace detail_ssm {
inline double frobenius(const Tensor& m) {
    double s = 0.0;
    for (double x : m.v) s += x * x;
    return std::sqrt(s);
}
}  // namespace detail_ssm

// Zero-order-hold discretization. Both results are built from the power
// series of exp(delta A) so a singular (or zero) A needs no inversion:
//   A_x = sum_{k>=0} (dA)^k / k!
//   B_x = sum_{k>=1} (dA)^{k-1} / k! * (delta B)
// The series stops when a term's norm falls below 1e-15 or after 30 terms.
inline DiscreteSsm discretize(const SsmParams& p) {
    p.validate();
    const int n = p.state_dim();
    Tensor dA = scale(p.A, p.delta);

    Tensor A_x({n, n});
    for (int i = 0; i < n; ++i) A_x.at2(i, i) = 1.0;

    Tensor dB({n});
    for (int i = 0; i < n; ++i) dB.v[i] = p.delta * p.B.v[i];
    Tensor B_x = dB;  // k = 1 term: (dA)^0 / 1! * dB

    Tensor term = A_x;  // (dA)^k / k!, starting at k = 0
    double last_term_norm = 0.0;
    for (int k = 1; k <= 30; ++k) {
        term = scale(matmul(term, dA), 1.0 / k);
        A_x = add(A_x, term);
        if (k < 30) {
            // B_x term for k+1: (dA)^k / (k+1)! * dB == term / (k+1) * dB
            Tensor bterm({n});
            for (int i = 0; i < n; ++i) {
                double acc = 0.0;
                for (int j = 0; j < n; ++j) acc += term.at2(i, j) * dB.v[j];
                bterm.v[i] = acc / (k + 1);
            }
            B_x = add(B_x, bterm);
        }
        last_term_norm = detail_ssm::frobenius(term);
        if (last_term_norm < 1e-15) break;
    }

    if (!all_finite(A_x) || !all_finite(B_x) ||
        last_term_norm > 1e-9 * std::max(1.0, detail_ssm::frobenius(A_x)))
        throw std::runtime_error("discretize: series did not converge (delta too large for this A?)");
    return {std::move(A_x), std::move(B_x)};
}

// Recurrent path: h_t = A_x h_{t-1} + B_x u_t, y_t = C h_t, h_0 = 0.
inline std::vector<double> scan(const DiscreteSsm& d, const Tensor& C, const std::vector<double>& u) {
    if (u.empty()) throw std::invalid_argument("scan: empty input sequence");
    const int n = d.A_x.shape[0];
    std::vector<double> h(n, 0.0), hn(n, 0.0), y(u.size());
    for (size_t t = 0; t < u.size(); ++t) {
        for (int i = 0; i < n; ++i) {
            double acc = d.B_x.v[i] * u[t];
            for (int j = 0; j < n; ++j) acc += d.A_x.at2(i, j) * h[j];
            hn[i] = acc;
        }
        std::swap(h, hn);
        double yt = 0.0;
        for (int i = 0; i < n; ++i) yt += C.v[i] * h[i];
        y[t] = yt;
    }
    return y;
}

// Convolution kernel K[k] = C A_x^k B_x, k = 0..T-1, built by iterating
// v <- A_x v instead of forming matrix powers.
inline std::vector<double> kernel(const DiscreteSsm& d, const Tensor& C, int T) {
    if (T < 1) throw std::invalid_argument("kernel: T must be >= 1");
    const int n = d.A_x.shape[0];
    std::vector<double> v(d.B_x.v.begin(), d.B_x.v.end()), vn(n);
    std::vector<double> K(T);
    for (int k = 0; k < T; ++k) {
        double acc = 0.0;
        for (int i = 0; i < n; ++i) acc += C.v[i] * v[i];
        K[k] = acc;
        if (k + 1 < T) {
            for (int i = 0; i < n; ++i) {
                double s = 0.0;
                for (int j = 0; j < n; ++j) s += d.A_x.at2(i, j) * v[j];
                vn[i] = s;
            }
            std::swap(v, vn);
        }
    }
    return K;
}

// Causal convolution: y[i] = sum_{k=0..i} K[k] u[i-k]; y[0] depends only on u[0].
inline std::vector<double> conv_apply(const std::vector<double>& u, const std::vector<double>& K) {
    if (u.size() != K.size())
        throw std::invalid_argument("conv_apply: length mismatch " + std::to_string(u.size()) + " vs " +
                                    std::to_string(K.size()));
    const size_t T = u.size();
    std::vector<double> y(T, 0.0);
    for (size_t i = 0; i < T; ++i) {
        double acc = 0.0;
        for (size_t k = 0; k <= i; ++k) acc += K[k] * u[i - k];
        y[i] = acc;
    }
    return y;
}

}  // namespace qptad
