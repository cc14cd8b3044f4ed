// Query-vector sequence modeling: Mamba blocks (one diagonal SISO state-space
// channel per feature dimension, scanned along the query axis) followed by
// multi-head self-attention. Composition order is fixed: M Mamba blocks, then
// attention with a residual and layer norm.
#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "qptad/autodiff.hpp"
#include "qptad/layers.hpp"
#include "qptad/ssm.hpp"

namespace qptad {

struct MambaMhsaConfig {
    int M = 2;          // number of Mamba blocks
    int heads = 8;      // attention heads
    int D = 256;        // channel width
    int N_state = 8;    // state dimension per channel
    bool selective = false;  // input-dependent step size (scan-only path)

    void validate() const {
        if (M < 1) throw std::invalid_argument("MambaMhsaConfig: M must be >= 1, got " + std::to_string(M));
        if (D < 1 || heads < 1 || D % heads != 0)
            throw std::invalid_argument("MambaMhsaConfig: D (" + std::to_string(D) + ") must be divisible by heads (" +
                                        std::to_string(heads) + ")");
        if (N_state < 1) throw std::invalid_argument("MambaMhsaConfig: N_state must be >= 1");
    }
};

// One Mamba block: out = Q + SSM(Q), where SSM runs an independent diagonal
// state-space channel over the query axis for every feature dimension. The
// step size is softplus-parameterized so it stays positive; in selective mode
// it additionally depends on the channel's input at each position.
struct MambaBlock {
    int D = 0, N = 0;
    bool selective = false;
    Parameter a_diag;     // [D x N], negative diagonal of the state matrix
    Parameter b_in;       // [D x N]
    Parameter c_out;      // [D x N]
    Parameter delta_raw;  // [D x 1], delta = softplus(raw)
    Parameter delta_w;    // [D x 1], selective input weight

    MambaBlock() = default;
    MambaBlock(const std::string& name, const MambaMhsaConfig& cfg, Rng& rng)
        : D(cfg.D), N(cfg.N_state), selective(cfg.selective) {
        Tensor a({D, N});
        for (int d = 0; d < D; ++d)
            for (int k = 0; k < N; ++k) a.at2(d, k) = -(1.0 + k);
        a_diag = Parameter(name + ".a_diag", std::move(a));
        b_in = Parameter(name + ".b_in", random_normal({D, N}, 0.5, rng));
        c_out = Parameter(name + ".c_out", random_normal({D, N}, 0.5, rng));
        // softplus(raw) == 0.1
        delta_raw = Parameter(name + ".delta_raw", Tensor({D, 1}, std::log(std::expm1(0.1))));
        delta_w = Parameter(name + ".delta_w", Tensor({D, 1}));
    }

    Var operator()(const Var& Q) const {
        const int T = Q.value().shape[0];
        Var a = Var::param(const_cast<Parameter&>(a_diag));
        Var b = Var::param(const_cast<Parameter&>(b_in));
        Var c = Var::param(const_cast<Parameter&>(c_out));
        Var raw = Var::param(const_cast<Parameter&>(delta_raw));
        Var dw = Var::param(const_cast<Parameter&>(delta_w));
        Var ones_t = Var::constant(Tensor({T}, 1.0));

        std::vector<Var> out_cols;
        out_cols.reserve(D);
        for (int d = 0; d < D; ++d) {
            Var u = vcol(Q, d);        // [T]
            Var a_row = vrow(a, d);    // [N]
            Var b_row = vrow(b, d);
            Var c_row = vrow(c, d);
            Var raw_d = velem(raw, d, 0);

            Var y;
            if (!selective) {
                Var delta = vsoftplus(raw_d);                 // scalar
                Var m = scale_by(a_row, delta);               // delta * a
                Var ax_row = vexp(m);                         // [N]
                Var bx_row = vphi1(m) * scale_by(b_row, delta);
                Var bu = vouter(u, bx_row);                   // [T x N]
                y = vssm_scan(vtile_rows(ax_row, T), bu, c_row);
            } else {
                Var s = scale_by(u, velem(dw, d, 0)) + scale_by(ones_t, raw_d);
                Var delta = vsoftplus(s);                     // [T]
                Var m = vouter(delta, a_row);                 // [T x N]
                Var ax = vexp(m);
                Var bx = vphi1(m) * vouter(delta, b_row);
                Var bu = bx * vouter(u, Var::constant(Tensor({N}, 1.0)));
                y = vssm_scan(ax, bu, c_row);
            }
            out_cols.push_back(u + y);
        }
        return vstack_cols(out_cols);
    }

    // Discrete parameters of one channel in the time-invariant mode; lets the
    // recurrent path be cross-checked against the kernel/convolution path.
    DiscreteSsm channel_discrete(int d) const {
        SsmParams p;
        p.A = Tensor({N, N});
        for (int k = 0; k < N; ++k) p.A.at2(k, k) = a_diag.value.at2(d, k);
        p.B = Tensor({N, 1});
        for (int k = 0; k < N; ++k) p.B.v[k] = b_in.value.at2(d, k);
        p.C = Tensor({1, N});
        for (int k = 0; k < N; ++k) p.C.v[k] = c_out.value.at2(d, k);
        double raw = delta_raw.value.at2(d, 0);
        p.delta = raw > 30.0 ? raw : std::log1p(std::exp(raw));
        return discretize(p);
    }

    Tensor channel_readout(int d) const {
        Tensor c({1, N});
        for (int k = 0; k < N; ++k) c.v[k] = c_out.value.at2(d, k);
        return c;
    }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&a_diag);
        out.push_back(&b_in);
        out.push_back(&c_out);
        out.push_back(&delta_raw);
        out.push_back(&delta_w);
    }
};

// Scaled dot-product self-attention over the query axis with learned
// Q/K/V/output projections, a residual connection, and layer norm:
//   out = LN(Q + W_O concat_h(softmax(Q_h K_h^T / sqrt(d_h)) V_h)).
// No positional encoding, so the op is permutation-equivariant.
struct MultiHeadSelfAttention {
    int D = 0, heads = 0;
    LinearLayer wq, wk, wv, wo;
    LayerNormLayer norm;

    MultiHeadSelfAttention() = default;
    MultiHeadSelfAttention(const std::string& name, int d, int h, Rng& rng)
        : D(d),
          heads(h),
          wq(name + ".wq", d, d, rng),
          wk(name + ".wk", d, d, rng),
          wv(name + ".wv", d, d, rng),
          wo(name + ".wo", d, d, rng, 0.0),  // zero output projection: block starts as LN(Q)
          norm(name + ".norm", d) {
        if (d % h != 0)
            throw std::invalid_argument("MultiHeadSelfAttention: D (" + std::to_string(d) +
                                        ") not divisible by heads (" + std::to_string(h) + ")");
    }

    Var operator()(const Var& Q) const {
        const int dh = D / heads;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        Var q = wq(Q), k = wk(Q), v = wv(Q);
        Var merged;
        for (int h = 0; h < heads; ++h) {
            Var qh = vcols(q, h * dh, (h + 1) * dh);
            Var kh = vcols(k, h * dh, (h + 1) * dh);
            Var vh = vcols(v, h * dh, (h + 1) * dh);
            Var attn = vsoftmax(vscale(vmatmul(qh, vtranspose(kh)), inv_sqrt));
            Var oh = vmatmul(attn, vh);
            merged = h == 0 ? oh : vconcat_last(merged, oh);
        }
        return norm(Q + wo(merged));
    }

    void collect(std::vector<Parameter*>& out) {
        wq.collect(out);
        wk.collect(out);
        wv.collect(out);
        wo.collect(out);
        norm.collect(out);
    }
};

// M Mamba blocks followed by self-attention.
struct MambaMhsa {
    MambaMhsaConfig cfg;
    std::vector<MambaBlock> blocks;
    MultiHeadSelfAttention attn;

    MambaMhsa() = default;
    MambaMhsa(const std::string& name, const MambaMhsaConfig& c, Rng& rng) : cfg(c) {
        cfg.validate();
        for (int m = 0; m < cfg.M; ++m) blocks.emplace_back(name + ".mamba" + std::to_string(m), cfg, rng);
        attn = MultiHeadSelfAttention(name + ".mhsa", cfg.D, cfg.heads, rng);
    }

    Var operator()(const Var& Q) const {
        Var x = Q;
        for (const auto& b : blocks) x = b(x);
        return attn(x);
    }

    void collect(std::vector<Parameter*>& out) {
        for (auto& b : blocks) b.collect(out);
        attn.collect(out);
    }
};

}  // namespace qptad
