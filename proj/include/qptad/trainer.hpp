// Set-prediction training: minimum-cost bipartite matching between query
// predictions and ground truth, the composite BCE + L1 + tIoU loss with deep
// supervision, AdamW with the halved-every-10-epochs schedule, and the
// checkpoint format.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "qptad/decoder.hpp"
#include "qptad/pipeline.hpp"

namespace qptad {

struct MatchCostWeights {
    double lambda_cls = 2.0;
    double lambda_l1 = 5.0;
    double lambda_iou = 2.0;

    void validate() const {
        if (lambda_cls < 0 || lambda_l1 < 0 || lambda_iou < 0)
            throw std::invalid_argument("MatchCostWeights: weights must be non-negative");
        if (lambda_cls == 0 && lambda_l1 == 0 && lambda_iou == 0)
            throw std::invalid_argument("MatchCostWeights: at least one weight must be positive");
    }
};

struct MatchResult {
    std::vector<std::pair<int, int>> pairs;  // (query index, ground-truth index)
    double total_cost = 0.0;
};

struct TrainSchedule {
    double initial_lr = 1e-4;
    int halving_period = 10;  // epochs
    int total_epochs = 50;
    int batch_size = 1;

    void validate() const {
        if (!(initial_lr > 0) || halving_period < 1 || total_epochs < 1 || batch_size < 1)
            throw std::invalid_argument("TrainSchedule: all fields must be positive");
    }

    double lr_at_epoch(int epoch) const {
        return initial_lr * std::pow(0.5, static_cast<double>(epoch / halving_period));
    }
};

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

// Matching cost between one decoded query and one ground-truth instance;
// boundary terms are normalized by the window length.
inline double pair_cost(double pred_start, double pred_end, const std::vector<double>& class_scores,
                        const ActionInstance& gt, const MatchCostWeights& w, double beta) {
    const double cls_term = 1.0 - class_scores[gt.class_id];
    const double l1_term = (std::abs(pred_start - gt.start_frame) + std::abs(pred_end - gt.end_frame)) / beta;
    const double iou_term = 1.0 - interval_iou(pred_start, pred_end, gt.start_frame, gt.end_frame);
    return w.lambda_cls * cls_term + w.lambda_l1 * l1_term + w.lambda_iou * iou_term;
}

// Minimum-total-cost one-to-one assignment covering min(rows, cols) pairs,
// via shortest augmenting paths with potentials (O(n^2 m)).
inline MatchResult hungarian_match(const Tensor& cost) {
    if (cost.rank() != 2) throw std::invalid_argument("hungarian_match: cost must be 2-D");
    if (!all_finite(cost)) throw std::invalid_argument("hungarian_match: non-finite costs");
    const int rows = cost.shape[0], cols = cost.shape[1];
    MatchResult result;
    if (rows == 0 || cols == 0) return result;

    // solve with n <= m; transpose bookkeeping if queries are the short side
    const bool transposed = rows > cols;
    const int n = transposed ? cols : rows;
    const int m = transposed ? rows : cols;
    auto at = [&](int i, int j) { return transposed ? cost.at2(j, i) : cost.at2(i, j); };

    const double INF = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<int> assigned(m + 1, 0);  // assigned[j] = row occupying column j (1-based)
    std::vector<int> way(m + 1, 0);
    for (int i = 1; i <= n; ++i) {
        assigned[0] = i;
        int j0 = 0;
        std::vector<double> minv(m + 1, INF);
        std::vector<bool> used(m + 1, false);
        do {
            used[j0] = true;
            const int i0 = assigned[j0];
            double delta = INF;
            int j1 = -1;
            for (int j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[assigned[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (assigned[j0] != 0);
        do {
            const int j1 = way[j0];
            assigned[j0] = assigned[j1];
            j0 = j1;
        } while (j0);
    }

    for (int j = 1; j <= m; ++j) {
        if (assigned[j] == 0) continue;
        const int i = assigned[j] - 1;
        if (transposed)
            result.pairs.emplace_back(j - 1, i);
        else
            result.pairs.emplace_back(i, j - 1);
    }
    std::sort(result.pairs.begin(), result.pairs.end());
    for (const auto& [q, g] : result.pairs) result.total_cost += cost.at2(q, g);
    return result;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// (start, end) spans in window-local frames plus per-class sigmoid scores,
// decoded from one layer's raw prediction with values detached.
struct DecodedQueries {
    std::vector<double> start, end;
    std::vector<std::vector<double>> scores;
};

inline DecodedQueries decode_for_matching(const RawPrediction& pred, int stride) {
    const Tensor& pts = pred.points.value();
    const Tensor& logits = pred.class_logits.value();
    const int n_q = pts.shape[0], n_s = pts.shape[1], k = logits.shape[1];
    DecodedQueries d;
    d.start.resize(n_q);
    d.end.resize(n_q);
    d.scores.assign(n_q, std::vector<double>(k));
    for (int i = 0; i < n_q; ++i) {
        double lo = pts.at2(i, 0), hi = pts.at2(i, 0);
        for (int j = 1; j < n_s; ++j) {
            lo = std::min(lo, pts.at2(i, j));
            hi = std::max(hi, pts.at2(i, j));
        }
        d.start[i] = grid_to_frames(lo, stride);
        d.end[i] = grid_to_frames(hi, stride);
        for (int c = 0; c < k; ++c) d.scores[i][c] = sigmoid(logits.at2(i, c));
    }
    return d;
}

inline MatchResult match_layer(const RawPrediction& pred, const std::vector<ActionInstance>& gt,
                               const MatchCostWeights& w, double beta, int stride) {
    const DecodedQueries d = decode_for_matching(pred, stride);
    const int n_q = static_cast<int>(d.start.size());
    const int n_g = static_cast<int>(gt.size());
    if (n_g == 0) return {};
    Tensor cost({n_q, n_g});
    for (int i = 0; i < n_q; ++i)
        for (int g = 0; g < n_g; ++g) cost.at2(i, g) = pair_cost(d.start[i], d.end[i], d.scores[i], gt[g], w, beta);
    return hungarian_match(cost);
}

struct LossBreakdown {
    Var total;  // scalar, backward-capable
    double classification = 0.0;
    double l1 = 0.0;
    double iou = 0.0;

    double value() const { return total.value().item(); }
};

// Deep-supervised loss: per layer, BCE with logits over all queries and
// classes (matched queries target their ground-truth class, everything else
// zero) plus per matched pair the normalized-boundary L1 and 1 - tIoU terms,
// averaged over matched pairs.
inline LossBreakdown compute_loss(const std::vector<RawPrediction>& preds,
                                  const std::vector<ActionInstance>& gt,
                                  const std::vector<MatchResult>& matches, const MatchCostWeights& w, double beta,
                                  int stride) {
    if (preds.size() != matches.size())
        throw std::invalid_argument("compute_loss: one match per decoder layer expected");
    LossBreakdown out;
    Var total;
    for (size_t l = 0; l < preds.size(); ++l) {
        const RawPrediction& pred = preds[l];
        const int n_q = pred.class_logits.value().shape[0];
        const int k = pred.class_logits.value().shape[1];

        Tensor targets({n_q, k});
        for (const auto& [q, g] : matches[l].pairs) targets.at2(q, gt[g].class_id) = 1.0;
        // summed over classes, averaged over queries, so the handful of
        // positive targets is not washed out by the background entries
        Var bce = vscale(vbce_with_logits(pred.class_logits, targets), static_cast<double>(k));
        out.classification += bce.value().item();
        Var layer_loss = bce;

        if (!matches[l].pairs.empty()) {
            const double inv_pairs = 1.0 / static_cast<double>(matches[l].pairs.size());
            Var l1_sum, iou_sum;
            for (const auto& [q, g] : matches[l].pairs) {
                Var row = vrow(pred.points, q);
                // grid -> frames -> window-normalized
                Var s = vscale(vreduce_min(row), static_cast<double>(stride) / beta);
                Var e = vscale(vreduce_max(row), static_cast<double>(stride) / beta);
                const double gs = gt[g].start_frame / beta, ge = gt[g].end_frame / beta;
                Var l1 = vabs(s - Var::scalar(gs)) + vabs(e - Var::scalar(ge));
                Var inter = vrelu(vminimum(e, Var::scalar(ge)) - vmaximum(s, Var::scalar(gs)));
                Var uni = (e - s) + Var::scalar(ge - gs) - inter;
                Var one_minus_iou = Var::scalar(1.0) - vdiv(inter, uni);
                l1_sum = l1_sum.defined() ? l1_sum + l1 : l1;
                iou_sum = iou_sum.defined() ? iou_sum + one_minus_iou : one_minus_iou;
            }
            l1_sum = vscale(l1_sum, inv_pairs);
            iou_sum = vscale(iou_sum, inv_pairs);
            out.l1 += l1_sum.value().item();
            out.iou += iou_sum.value().item();
            layer_loss = layer_loss + vscale(l1_sum, w.lambda_l1) + vscale(iou_sum, w.lambda_iou);
        }
        total = total.defined() ? total + layer_loss : layer_loss;
    }
    out.total = total;
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Adam with decoupled weight decay and global gradient-norm clipping.
struct AdamW {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 1e-4;
    double clip_norm = 1.0;  // 0 disables clipping
    long step_count = 0;
    std::vector<Tensor> m, v;

    void attach(const std::vector<Parameter*>& params) {
        m.clear();
        v.clear();
        for (const Parameter* p : params) {
            m.emplace_back(p->value.shape);
            v.emplace_back(p->value.shape);
        }
        step_count = 0;
    }

    double global_grad_norm(const std::vector<Parameter*>& params) const {
        double sq = 0.0;
        for (const Parameter* p : params)
            for (double g : p->grad.v) sq += g * g;
        return std::sqrt(sq);
    }

    void step(const std::vector<Parameter*>& params, double lr) {
        if (m.size() != params.size()) throw std::logic_error("AdamW: attach() before step()");
        double scale = 1.0;
        if (clip_norm > 0.0) {
            const double norm = global_grad_norm(params);
            if (norm > clip_norm) scale = clip_norm / norm;
        }
        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        for (size_t i = 0; i < params.size(); ++i) {
            Parameter& p = *params[i];
            for (size_t j = 0; j < p.value.numel(); ++j) {
                const double g = p.grad.v[j] * scale;
                m[i].v[j] = beta1 * m[i].v[j] + (1.0 - beta1) * g;
                v[i].v[j] = beta2 * v[i].v[j] + (1.0 - beta2) * g * g;
                const double mhat = m[i].v[j] / bc1;
                const double vhat = v[i].v[j] / bc2;
                p.value.v[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p.value.v[j]);
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Training step
// ---------------------------------------------------------------------------

struct TrainStepResult {
    double total = 0.0, classification = 0.0, l1 = 0.0, iou = 0.0;
    double grad_norm = 0.0;
};

// forward -> per-layer matching -> loss -> backward -> clipped AdamW update.
// A non-finite loss rejects the step (no parameter change) and reports the
// offending component.
inline TrainStepResult train_step(ActionDecoder& model, AdamW& opt, const std::vector<Parameter*>& params,
                                  const Tensor& window_feats, const std::vector<ActionInstance>& gt,
                                  const MatchCostWeights& weights, double beta, int stride, double lr) {
    const std::vector<RawPrediction> preds = model.forward(window_feats);
    std::vector<MatchResult> matches;
    matches.reserve(preds.size());
    for (const auto& p : preds) matches.push_back(match_layer(p, gt, weights, beta, stride));
    const LossBreakdown loss = compute_loss(preds, gt, matches, weights, beta, stride);

    TrainStepResult r;
    r.total = loss.value();
    r.classification = loss.classification;
    r.l1 = loss.l1;
    r.iou = loss.iou;
    if (!std::isfinite(r.classification)) throw std::runtime_error("train_step: non-finite classification loss");
    if (!std::isfinite(r.l1)) throw std::runtime_error("train_step: non-finite boundary L1 loss");
    if (!std::isfinite(r.iou)) throw std::runtime_error("train_step: non-finite tIoU loss");
    if (!std::isfinite(r.total)) throw std::runtime_error("train_step: non-finite total loss");

    for (Parameter* p : params) p->zero_grad();
    loss.total.backward();
    r.grad_norm = opt.global_grad_norm(params);
    opt.step(params, lr);
    return r;
}

// ---------------------------------------------------------------------------
// Checkpoints: u32 param count, then per parameter u32 name length, name
// bytes, u32 rank, u32 extents, little-endian f64 payload.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::vector<Parameter*>& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    detail_io::put_u32(os, static_cast<uint32_t>(params.size()));
    for (const Parameter* p : params) {
        detail_io::put_u32(os, static_cast<uint32_t>(p->name.size()));
        os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        detail_io::put_u32(os, static_cast<uint32_t>(p->value.shape.size()));
        for (int e : p->value.shape) detail_io::put_u32(os, static_cast<uint32_t>(e));
        for (double d : p->value.v) {
            uint64_t bits;
            std::memcpy(&bits, &d, 8);
            for (int i = 0; i < 8; ++i) os.put(static_cast<char>((bits >> (8 * i)) & 0xFF));
        }
    }
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline void load_checkpoint(const std::vector<Parameter*>& params, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    uint32_t count = 0;
    if (!detail_io::get_u32(is, count)) throw std::runtime_error("load_checkpoint: truncated header");
    std::map<std::string, std::pair<Shape, std::vector<double>>> stored;
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = 0;
        if (!detail_io::get_u32(is, name_len)) throw std::runtime_error("load_checkpoint: truncated entry");
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw std::runtime_error("load_checkpoint: truncated name");
        uint32_t rank = 0;
        if (!detail_io::get_u32(is, rank)) throw std::runtime_error("load_checkpoint: truncated shape");
        Shape shape(rank);
        size_t numel = 1;
        for (uint32_t r = 0; r < rank; ++r) {
            uint32_t e = 0;
            if (!detail_io::get_u32(is, e)) throw std::runtime_error("load_checkpoint: truncated shape");
            shape[r] = static_cast<int>(e);
            numel *= e;
        }
        std::vector<double> data(numel);
        for (size_t j = 0; j < numel; ++j) {
            unsigned char b[8];
            if (!is.read(reinterpret_cast<char*>(b), 8))
                throw std::runtime_error("load_checkpoint: truncated payload for " + name);
            uint64_t bits = 0;
            for (int k = 0; k < 8; ++k) bits |= static_cast<uint64_t>(b[k]) << (8 * k);
            std::memcpy(&data[j], &bits, 8);
        }
        stored[name] = {std::move(shape), std::move(data)};
    }
    for (Parameter* p : params) {
        auto it = stored.find(p->name);
        if (it == stored.end()) throw std::runtime_error("load_checkpoint: missing parameter " + p->name);
        if (it->second.first != p->value.shape)
            throw std::runtime_error("load_checkpoint: shape mismatch for " + p->name + ": file " +
                                     shape_str(it->second.first) + " vs model " + shape_str(p->value.shape));
        p->value.v = it->second.second;
        stored.erase(it);
    }
    if (!stored.empty()) throw std::runtime_error("load_checkpoint: unknown parameter " + stored.begin()->first);
}

}  // namespace qptad
