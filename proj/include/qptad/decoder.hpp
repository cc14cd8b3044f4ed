// The stacked action decoder. Each layer runs Mamba-MHSA over the query
// vectors, samples point-level features around each query point through
// deformable offsets, mixes them across frames and channels with
// query-generated dynamic projections, then refines the query points with
// span-scaled offsets and a coordinate FFN. A shared sigmoid multi-label head
// decodes class scores; (min, max) of a query's points give its interval.
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "qptad/autodiff.hpp"
#include "qptad/layers.hpp"
#include "qptad/pipeline.hpp"
#include "qptad/seqblocks.hpp"

namespace qptad {

struct DecoderConfig {
    int L = 4;              // decoder layers
    int N_q = 48;           // queries
    int N_s = 30;           // points per query
    int D = 256;            // channel width
    int D_prime = 64;       // channel-mix bottleneck
    int num_classes = 17;
    int D_in = 1024;        // raw feature width before input projection
    double init_spread = 0.05;   // query-point spread around the midpoint, fraction of T'
    double score_thresh = 0.1;   // decode threshold before NMS
    MambaMhsaConfig mamba;

    void validate() const {
        if (L < 1) throw std::invalid_argument("DecoderConfig: L must be >= 1, got " + std::to_string(L));
        if (N_q < 1) throw std::invalid_argument("DecoderConfig: N_q must be >= 1, got " + std::to_string(N_q));
        if (N_s < 2) throw std::invalid_argument("DecoderConfig: N_s must be >= 2, got " + std::to_string(N_s));
        if (D_prime < 1) throw std::invalid_argument("DecoderConfig: D_prime must be >= 1");
        if (num_classes < 1) throw std::invalid_argument("DecoderConfig: num_classes must be >= 1");
        if (D_in < 1) throw std::invalid_argument("DecoderConfig: D_in must be >= 1");
        if (mamba.D != D)
            throw std::invalid_argument("DecoderConfig: mamba channel width " + std::to_string(mamba.D) +
                                        " != decoder width " + std::to_string(D));
        mamba.validate();
    }
};

// Mutable per-layer decoder state: N_q x N_s point timestamps on the feature
// grid plus the N_q x D query vectors.
struct QueryState {
    Tensor points;   // [N_q x N_s]
    Tensor vectors;  // [N_q x D]
};

struct RawPrediction {
    Var points;        // [N_q x N_s]
    Var class_logits;  // [N_q x K]
    int layer_index = 0;
};

// All query points start at the midpoint of the window, with a fixed
// symmetric spread across the N_s points so the span-scaled update of
// refine_points has a nonzero span to work with. spread_frac = 0 collapses
// to the pure midpoint.
inline Tensor init_points(int n_q, int n_s, int t_grid, double spread_frac) {
    if (t_grid < 2) throw std::invalid_argument("init_points: T' must be >= 2, got " + std::to_string(t_grid));
    Tensor p({n_q, n_s});
    const double mid = t_grid / 2.0;
    const double half = spread_frac * t_grid;
    for (int i = 0; i < n_q; ++i)
        for (int j = 0; j < n_s; ++j) {
            const double frac = n_s > 1 ? static_cast<double>(j) / (n_s - 1) : 0.5;
            p.at2(i, j) = mid + half * (2.0 * frac - 1.0);
        }
    return p;
}

// Span-scaled point update: per query, s = max(points) - min(points)
// (floored at s_min) and new_t = t + dt * s * 0.5. Short spans move less.
inline Tensor refine_points(const Tensor& points, const Tensor& dt, double s_min = 1.0) {
    require_same_shape(points, dt, "refine_points");
    const int n_q = points.shape[0], n_s = points.shape[1];
    Tensor out = points;
    for (int i = 0; i < n_q; ++i) {
        double lo = points.at2(i, 0), hi = points.at2(i, 0);
        for (int j = 1; j < n_s; ++j) {
            lo = std::min(lo, points.at2(i, j));
            hi = std::max(hi, points.at2(i, j));
        }
        const double s = std::max(hi - lo, s_min);
        for (int j = 0; j < n_s; ++j) out.at2(i, j) += dt.at2(i, j) * s * 0.5;
    }
    return out;
}

inline double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

struct DecoderLayer {
    MambaMhsa seq;
    LinearLayer offset_proj;  // D -> 4 deformable time offsets per query
    LinearLayer weight_proj;  // D -> 4 sampling weights (softmax) per query
    LinearLayer theta_f;      // D -> N_s * N_s frame-mix generator
    LinearLayer theta_c1;     // D -> D * D' channel-mix generator
    LinearLayer theta_c2;     // D -> D' * D channel-mix generator
    LayerNormLayer norm_f, norm_c1, norm_c2;
    LinearLayer mix_out;      // N_s * 2D -> D, zero-initialized (residual identity)
    LinearLayer refine_proj;  // D -> N_s point offsets, zero-initialized
    FeedForward point_ffn;    // N_s -> N_s -> N_s, second layer zero-initialized

    DecoderLayer() = default;
    DecoderLayer(const std::string& name, const DecoderConfig& cfg, Rng& rng)
        : seq(name + ".seq", cfg.mamba, rng),
          offset_proj(name + ".offset_proj", cfg.D, 4, rng, 0.0),
          weight_proj(name + ".weight_proj", cfg.D, 4, rng, 0.0),
          theta_f(name + ".theta_f", cfg.D, cfg.N_s * cfg.N_s, rng),
          theta_c1(name + ".theta_c1", cfg.D, cfg.D * cfg.D_prime, rng),
          theta_c2(name + ".theta_c2", cfg.D, cfg.D_prime * cfg.D, rng),
          norm_f(name + ".norm_f", cfg.N_s),
          norm_c1(name + ".norm_c1", cfg.D_prime),
          norm_c2(name + ".norm_c2", cfg.D),
          mix_out(name + ".mix_out", cfg.N_s * 2 * cfg.D, cfg.D, rng, 0.0),
          refine_proj(name + ".refine_proj", cfg.D, cfg.N_s, rng, 0.0),
          point_ffn(name + ".point_ffn", cfg.N_s, cfg.N_s, cfg.N_s, rng, 0.0) {}

    void collect(std::vector<Parameter*>& out) {
        seq.collect(out);
        offset_proj.collect(out);
        weight_proj.collect(out);
        theta_f.collect(out);
        theta_c1.collect(out);
        theta_c2.collect(out);
        norm_f.collect(out);
        norm_c1.collect(out);
        norm_c2.collect(out);
        mix_out.collect(out);
        refine_proj.collect(out);
        point_ffn.collect(out);
    }
};

struct ActionDecoder {
    DecoderConfig cfg;
    Parameter query_embed;  // [N_q x D]
    LinearLayer input_proj;
    std::vector<DecoderLayer> layers;
    FeedForward class_head;  // D -> D -> K, shared across layers

    ActionDecoder() = default;
    ActionDecoder(const DecoderConfig& c, Rng rng) : cfg(c) {
        cfg.validate();
        query_embed = Parameter("query_embed", random_normal({cfg.N_q, cfg.D}, 0.3, rng));
        input_proj = LinearLayer("input_proj", cfg.D_in, cfg.D, rng);
        for (int l = 0; l < cfg.L; ++l) layers.emplace_back("layer" + std::to_string(l), cfg, rng);
        class_head = FeedForward("class_head", cfg.D, cfg.D, cfg.num_classes, rng);
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        out.push_back(&query_embed);
        input_proj.collect(out);
        for (auto& l : layers) l.collect(out);
        class_head.collect(out);
        return out;
    }

    QueryState init_queries(int t_grid) const {
        return {init_points(cfg.N_q, cfg.N_s, t_grid, cfg.init_spread), query_embed.value};
    }

    // Deformable point-level extraction for one query: four offset sub-points
    // around each query point, feature-read by interpolation and combined
    // with softmax weights. Offsets and weights are functions of the query
    // vector alone, shared across its N_s points.
    Var extract_query_features(const Var& feats, const Var& points, const Var& q_i, int i,
                               const DecoderLayer& layer) const {
        Var dp = layer.offset_proj(q_i);             // [4]
        Var w = vsoftmax(layer.weight_proj(q_i));    // [4]
        std::vector<Var> rows;
        rows.reserve(cfg.N_s);
        for (int p = 0; p < cfg.N_s; ++p) {
            Var t_ip = velem(points, i, p);
            Var acc;
            for (int j = 0; j < 4; ++j) {
                Var sample = vinterp(feats, t_ip + velem(dp, 0, j));
                Var weighted = scale_by(sample, velem(w, 0, j));
                acc = j == 0 ? weighted : acc + weighted;
            }
            rows.push_back(acc);
        }
        return vstack_rows(rows);  // [N_s x D]
    }

    // Frame/channel dynamic mixing for one query; ends in a residual update
    // so zeroed mix_out leaves the query vector unchanged.
    Var mix_query(const Var& X_i, const Var& q_i, const DecoderLayer& layer) const {
        Var tf = vreshape(layer.theta_f(q_i), {cfg.N_s, cfg.N_s});
        Var tc1 = vreshape(layer.theta_c1(q_i), {cfg.D, cfg.D_prime});
        Var tc2 = vreshape(layer.theta_c2(q_i), {cfg.D_prime, cfg.D});
        Var xf = vrelu(layer.norm_f(vmatmul(vtranspose(X_i), tf)));    // [D x N_s]
        Var xc = vrelu(layer.norm_c1(vmatmul(X_i, tc1)));              // [N_s x D']
        xc = vrelu(layer.norm_c2(vmatmul(xc, tc2)));                   // [N_s x D]
        Var cat = vconcat_last(vtranspose(xf), xc);                    // [N_s x 2D]
        return q_i + layer.mix_out(vreshape(cat, {cfg.N_s * 2 * cfg.D}));
    }

    // Graph version of refine_points.
    Var refine(const Var& points, const Var& dt, double s_min = 1.0) const {
        std::vector<Var> rows;
        rows.reserve(cfg.N_q);
        for (int i = 0; i < cfg.N_q; ++i) {
            Var row = vrow(points, i);
            Var span = vreduce_max(row) - vreduce_min(row);
            Var s_eff = vmaximum(span, Var::scalar(s_min));
            rows.push_back(row + scale_by(vrow(dt, i), vscale(s_eff, 0.5)));
        }
        return vstack_rows(rows);
    }

    // One RawPrediction per layer (deep supervision); inference reads the last.
    std::vector<RawPrediction> forward(const Tensor& window_feats) const {
        if (window_feats.rank() != 2 || window_feats.shape[1] != cfg.D_in)
            throw std::invalid_argument("decoder: features " + shape_str(window_feats.shape) + " do not match D_in " +
                                        std::to_string(cfg.D_in));
        const int t_grid = window_feats.shape[0];
        Var feats = input_proj(Var::constant(window_feats));  // [T' x D]
        Var Q = Var::param(const_cast<Parameter&>(query_embed));
        Var P = Var::constant(init_points(cfg.N_q, cfg.N_s, t_grid, cfg.init_spread));

        std::vector<RawPrediction> preds;
        preds.reserve(cfg.L);
        for (int l = 0; l < cfg.L; ++l) {
            const DecoderLayer& layer = layers[l];
            Q = layer.seq(Q);
            std::vector<Var> q_rows;
            q_rows.reserve(cfg.N_q);
            for (int i = 0; i < cfg.N_q; ++i) {
                Var q_i = vrow(Q, i);
                Var X_i = extract_query_features(feats, P, q_i, i, layer);
                q_rows.push_back(mix_query(X_i, q_i, layer));
            }
            Q = vstack_rows(q_rows);
            Var dt = layer.refine_proj(Q);  // [N_q x N_s]
            P = refine(P, dt);
            P = P + layer.point_ffn(P);     // coordinate FFN with residual
            P = vclamp(P, -static_cast<double>(t_grid), 2.0 * t_grid);
            preds.push_back({P, class_head(Q), l});
        }
        return preds;
    }
};

// Converts one layer's raw prediction into scored action instances in global
// frame coordinates: interval = (min, max) of the query's points clamped to
// the window, class = argmax of the per-class sigmoids.
inline std::vector<ActionInstance> decode_instances(const Tensor& points, const Tensor& class_logits,
                                                    const WindowSpec& window, double score_thresh) {
    const int n_q = points.shape[0], n_s = points.shape[1], k = class_logits.shape[1];
    std::vector<ActionInstance> out;
    for (int i = 0; i < n_q; ++i) {
        double lo = points.at2(i, 0), hi = points.at2(i, 0);
        for (int j = 1; j < n_s; ++j) {
            lo = std::min(lo, points.at2(i, j));
            hi = std::max(hi, points.at2(i, j));
        }
        lo = std::clamp(lo, 0.0, static_cast<double>(window.grid_len()));
        hi = std::clamp(hi, 0.0, static_cast<double>(window.grid_len()));
        int best = 0;
        for (int c = 1; c < k; ++c)
            if (class_logits.at2(i, c) > class_logits.at2(i, best)) best = c;
        const double score = sigmoid(class_logits.at2(i, best));
        if (score < score_thresh) continue;
        ActionInstance inst;
        inst.start_frame = window.start_frame + grid_to_frames(lo, window.stride);
        inst.end_frame = window.start_frame + grid_to_frames(hi, window.stride);
        inst.class_id = best;
        inst.score = score;
        if (inst.end_frame > inst.start_frame) out.push_back(inst);
    }
    return out;
}

}  // namespace qptad
