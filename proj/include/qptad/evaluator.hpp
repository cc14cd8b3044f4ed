// Detection metric: greedy score-ordered matching of predictions to ground
// truth under a tIoU threshold (with class agreement by default), pooled
// precision/recall/F1 across videos on the 0-100 scale.
#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "qptad/pipeline.hpp"

namespace qptad {

struct EvalConfig {
    double tiou_threshold = 0.5;
    bool require_class_match = true;
    double report_scale = 100.0;

    void validate() const {
        if (!(tiou_threshold > 0.0 && tiou_threshold <= 1.0))
            throw std::invalid_argument("EvalConfig: tiou_threshold must be in (0,1], got " +
                                        std::to_string(tiou_threshold));
    }
};

struct ClassCounts {
    long tp = 0, fp = 0, fn = 0;
};

struct EvalReport {
    long tp = 0, fp = 0, fn = 0;
    double precision = 0.0, recall = 0.0, f1 = 0.0;  // on report_scale
    std::map<int, ClassCounts> per_class;
};

inline double tiou(const ActionInstance& a, const ActionInstance& b) {
    return interval_iou(a.start_frame, a.end_frame, b.start_frame, b.end_frame);
}

// 2PR/(P+R), 0 when both are 0.
inline double f1_score(double precision, double recall) {
    const double denom = precision + recall;
    return denom > 0.0 ? 2.0 * precision * recall / denom : 0.0;
}

// Greedy matching: predictions in descending score order each consume the
// unmatched ground-truth instance of highest tIoU (>= threshold, same class
// when required). Unmatched predictions are FP, unconsumed ground truth FN.
inline ClassCounts match_detections(std::vector<ActionInstance> preds, const std::vector<ActionInstance>& gts,
                                    const EvalConfig& cfg, std::map<int, ClassCounts>* per_class = nullptr) {
    cfg.validate();
    std::sort(preds.begin(), preds.end(), [](const ActionInstance& a, const ActionInstance& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.start_frame != b.start_frame) return a.start_frame < b.start_frame;
        return a.class_id < b.class_id;
    });
    std::vector<bool> used(gts.size(), false);
    ClassCounts counts;
    for (const ActionInstance& p : preds) {
        int best = -1;
        double best_iou = 0.0;
        for (size_t g = 0; g < gts.size(); ++g) {
            if (used[g]) continue;
            if (cfg.require_class_match && gts[g].class_id != p.class_id) continue;
            const double iou = tiou(p, gts[g]);
            if (iou >= cfg.tiou_threshold && iou > best_iou) {
                best_iou = iou;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0) {
            used[best] = true;
            ++counts.tp;
            if (per_class) ++(*per_class)[gts[best].class_id].tp;
        } else {
            ++counts.fp;
            if (per_class) ++(*per_class)[p.class_id].fp;
        }
    }
    for (size_t g = 0; g < gts.size(); ++g)
        if (!used[g]) {
            ++counts.fn;
            if (per_class) ++(*per_class)[gts[g].class_id].fn;
        }
    return counts;
}

inline EvalReport finalize_report(long tp, long fp, long fn, std::map<int, ClassCounts> per_class, double scale) {
    EvalReport r;
    r.tp = tp;
    r.fp = fp;
    r.fn = fn;
    const double p = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    const double rec = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    r.precision = scale * p;
    r.recall = scale * rec;
    r.f1 = scale * f1_score(p, rec);
    r.per_class = std::move(per_class);
    return r;
}

// Pooled (micro-averaged) counts over videos. Prediction and ground-truth
// video id sets must coincide; a mismatch is rejected with the symmetric
// difference listed.
inline EvalReport evaluate_corpus(const std::vector<VideoAnnotation>& preds, const std::vector<VideoAnnotation>& gts,
                                  const EvalConfig& cfg) {
    cfg.validate();
    std::map<std::string, const VideoAnnotation*> pred_by_id, gt_by_id;
    for (const auto& v : preds) pred_by_id[v.video_id] = &v;
    for (const auto& v : gts) gt_by_id[v.video_id] = &v;
    std::vector<std::string> only_pred, only_gt;
    for (const auto& [id, _] : pred_by_id)
        if (!gt_by_id.count(id)) only_pred.push_back(id);
    for (const auto& [id, _] : gt_by_id)
        if (!pred_by_id.count(id)) only_gt.push_back(id);
    if (!only_pred.empty() || !only_gt.empty()) {
        std::ostringstream os;
        os << "evaluate_corpus: video id mismatch;";
        if (!only_pred.empty()) {
            os << " only in predictions:";
            for (const auto& id : only_pred) os << " " << id;
        }
        if (!only_gt.empty()) {
            os << " only in ground truth:";
            for (const auto& id : only_gt) os << " " << id;
        }
        throw std::invalid_argument(os.str());
    }

    long tp = 0, fp = 0, fn = 0;
    std::map<int, ClassCounts> per_class;
    for (const auto& [id, gt] : gt_by_id) {
        const ClassCounts c = match_detections(pred_by_id[id]->instances, gt->instances, cfg, &per_class);
        tp += c.tp;
        fp += c.fp;
        fn += c.fn;
    }
    return finalize_report(tp, fp, fn, std::move(per_class), cfg.report_scale);
}

inline nlohmann::json report_to_json(const EvalReport& r) {
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [cls, c] : r.per_class) {
        const double p = (c.tp + c.fp) > 0 ? static_cast<double>(c.tp) / (c.tp + c.fp) : 0.0;
        const double rec = (c.tp + c.fn) > 0 ? static_cast<double>(c.tp) / (c.tp + c.fn) : 0.0;
        per_class[std::to_string(cls)] = {{"tp", c.tp},           {"fp", c.fp},
                                          {"fn", c.fn},           {"precision", 100.0 * p},
                                          {"recall", 100.0 * rec}, {"f1", 100.0 * f1_score(p, rec)}};
    }
    return {{"tp", r.tp},          {"fp", r.fp},       {"fn", r.fn},
            {"precision", r.precision}, {"recall", r.recall}, {"f1", r.f1},
            {"per_class", per_class}};
}

}  // namespace qptad
