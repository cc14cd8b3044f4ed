// Data plumbing around the model: per-timestep feature sequences on the
// stride-4 grid, action instances, sliding windows, window-level label
// assignment, cross-window merging with temporal NMS, the binary feature file
// format, JSON annotations, and the synthetic dataset generator.
#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "qptad/rng.hpp"
#include "qptad/tensor.hpp"

namespace qptad {

struct FeatureSequence {
    std::string video_id;
    Tensor data;       // [T' x D_in]
    int fps = 10;      // video frame rate the features were extracted at
    int stride = 4;    // video frames per feature timestep

    int timesteps() const { return data.rank() == 2 ? data.shape[0] : 0; }
    int feature_dim() const { return data.rank() == 2 ? data.shape[1] : 0; }
    int num_frames() const { return timesteps() * stride; }
};

// Half-open [start_frame, end_frame) interval with a class; score is 1 for
// ground truth.
struct ActionInstance {
    double start_frame = 0.0;
    double end_frame = 0.0;
    int class_id = 0;
    double score = 1.0;

    double length() const { return end_frame - start_frame; }
};

struct VideoAnnotation {
    std::string video_id;
    int fps = 10;
    int num_frames = 0;
    std::vector<ActionInstance> instances;
};

struct WindowSpec {
    std::string video_id;
    int start_frame = 0;
    int beta = 128;    // window length in frames
    int stride = 4;    // frames per feature step

    int grid_begin() const { return start_frame / stride; }
    int grid_len() const { return beta / stride; }
};

// ---------------------------------------------------------------------------
// Coordinate maps and windowing
// ---------------------------------------------------------------------------

inline double frames_to_grid(double frame, int stride = 4) { return frame / stride; }
inline double grid_to_frames(double grid, int stride = 4) { return grid * stride; }

// Enumerates window start frames: 0, s, 2s, ... with s = beta*(1-overlap);
// if the last window falls short of T_frames it is shifted left to end there
// exactly. Videos shorter than beta get a single (zero-padded) window.
inline std::vector<int> make_window_starts(int t_frames, int beta, double overlap_ratio) {
    if (overlap_ratio < 0.0 || overlap_ratio >= 1.0)
        throw std::invalid_argument("make_windows: overlap ratio must be in [0,1), got " + std::to_string(overlap_ratio));
    if (beta < 1) throw std::invalid_argument("make_windows: beta must be positive");
    std::vector<int> starts;
    if (t_frames < beta) {
        starts.push_back(0);
        return starts;
    }
    const int step = std::max(1, static_cast<int>(std::lround(beta * (1.0 - overlap_ratio))));
    for (int s = 0; s + beta <= t_frames; s += step) starts.push_back(s);
    if (starts.back() + beta < t_frames) starts.push_back(t_frames - beta);
    return starts;
}

inline std::vector<WindowSpec> make_windows(const std::string& video_id, int t_frames, int beta, double overlap_ratio,
                                            int stride = 4) {
    if (beta % stride != 0)
        throw std::invalid_argument("make_windows: beta (" + std::to_string(beta) + ") not divisible by stride (" +
                                    std::to_string(stride) + ")");
    std::vector<WindowSpec> out;
    for (int s : make_window_starts(t_frames, beta, overlap_ratio)) out.push_back({video_id, s, beta, stride});
    return out;
}

// Rows [grid_begin, grid_begin + grid_len) of the sequence, zero-padded past
// the end. Window starts are stride-aligned when they come from make_windows
// on T' * stride frames.
inline Tensor window_features(const FeatureSequence& seq, const WindowSpec& w) {
    if (w.start_frame % w.stride != 0)
        throw std::invalid_argument("window_features: start frame " + std::to_string(w.start_frame) +
                                    " not aligned to stride " + std::to_string(w.stride));
    const int g0 = w.grid_begin(), len = w.grid_len(), d = seq.feature_dim();
    Tensor out({len, d});
    for (int i = 0; i < len; ++i) {
        const int src = g0 + i;
        if (src < 0 || src >= seq.timesteps()) continue;
        std::copy_n(&seq.data.v[static_cast<size_t>(src) * d], d, &out.v[static_cast<size_t>(i) * d]);
    }
    return out;
}

// Window-local ground truth: an instance is kept when the window covers at
// least half of it, or it covers at least three quarters of the window. Kept
// instances are clipped and re-based to window-local frames.
inline std::vector<ActionInstance> assign_labels(const std::vector<ActionInstance>& annotations, const WindowSpec& w) {
    std::vector<ActionInstance> out;
    const double w0 = w.start_frame, w1 = w.start_frame + w.beta;
    for (const ActionInstance& a : annotations) {
        const double ov = std::max(0.0, std::min(a.end_frame, w1) - std::max(a.start_frame, w0));
        if (ov <= 0.0) continue;
        if (ov >= 0.5 * a.length() || ov >= 0.75 * w.beta) {
            ActionInstance local = a;
            local.start_frame = std::max(a.start_frame, w0) - w0;
            local.end_frame = std::min(a.end_frame, w1) - w0;
            out.push_back(local);
        }
    }
    return out;
}

inline double interval_iou(double s1, double e1, double s2, double e2) {
    const double inter = std::max(0.0, std::min(e1, e2) - std::max(s1, s2));
    const double uni = (e1 - s1) + (e2 - s2) - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

// Concatenated per-window predictions -> video-level list: per-class temporal
// NMS (suppress same-class instances with tIoU above the threshold, keeping
// the higher score), result sorted by score descending.
inline std::vector<ActionInstance> merge_predictions(std::vector<ActionInstance> preds, double nms_tiou = 0.5) {
    std::sort(preds.begin(), preds.end(), [](const ActionInstance& a, const ActionInstance& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.class_id != b.class_id) return a.class_id < b.class_id;
        if (a.start_frame != b.start_frame) return a.start_frame < b.start_frame;
        return a.end_frame < b.end_frame;
    });
    std::vector<ActionInstance> kept;
    for (const ActionInstance& p : preds) {
        bool suppressed = false;
        for (const ActionInstance& k : kept) {
            if (k.class_id == p.class_id &&
                interval_iou(k.start_frame, k.end_frame, p.start_frame, p.end_frame) > nms_tiou) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(p);
    }
    return kept;
}

// ---------------------------------------------------------------------------
// Feature file format: "MGFT", u16 version=1, u32 T', u32 D_in, u16 fps,
// u16 stride, then T'*D_in little-endian f32, row-major by timestep.
// ---------------------------------------------------------------------------

namespace detail_io {
inline void put_u16(std::ostream& os, uint16_t x) {
    const unsigned char b[2] = {static_cast<unsigned char>(x & 0xFF), static_cast<unsigned char>(x >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}
inline void put_u32(std::ostream& os, uint32_t x) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((x >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline bool get_u16(std::istream& is, uint16_t& x) {
    unsigned char b[2];
    if (!is.read(reinterpret_cast<char*>(b), 2)) return false;
    x = static_cast<uint16_t>(b[0] | (b[1] << 8));
    return true;
}
inline bool get_u32(std::istream& is, uint32_t& x) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
    x = 0;
    for (int i = 0; i < 4; ++i) x |= static_cast<uint32_t>(b[i]) << (8 * i);
    return true;
}
}  // namespace detail_io

inline void write_features(const FeatureSequence& seq, const std::string& path) {
    if (seq.timesteps() < 1) throw std::invalid_argument("write_features: empty sequence");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_features: cannot open " + path);
    os.write("MGFT", 4);
    detail_io::put_u16(os, 1);
    detail_io::put_u32(os, static_cast<uint32_t>(seq.timesteps()));
    detail_io::put_u32(os, static_cast<uint32_t>(seq.feature_dim()));
    detail_io::put_u16(os, static_cast<uint16_t>(seq.fps));
    detail_io::put_u16(os, static_cast<uint16_t>(seq.stride));
    for (double d : seq.data.v) {
        const float f = static_cast<float>(d);
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        detail_io::put_u32(os, bits);
    }
    if (!os) throw std::runtime_error("write_features: write failed for " + path);
}

inline FeatureSequence read_features(const std::string& path, const std::string& video_id = "") {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_features: cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "MGFT", 4) != 0)
        throw std::runtime_error("read_features: bad magic in " + path);
    uint16_t version = 0, fps = 0, stride = 0;
    uint32_t t = 0, d = 0;
    if (!detail_io::get_u16(is, version) || !detail_io::get_u32(is, t) || !detail_io::get_u32(is, d) ||
        !detail_io::get_u16(is, fps) || !detail_io::get_u16(is, stride))
        throw std::runtime_error("read_features: truncated header in " + path);
    if (version != 1) throw std::runtime_error("read_features: unsupported version " + std::to_string(version));
    if (t < 1 || d < 1 || stride < 1)
        throw std::runtime_error("read_features: invalid dimensions (T'=" + std::to_string(t) +
                                 ", D=" + std::to_string(d) + ", stride=" + std::to_string(stride) + ") in " + path);
    FeatureSequence seq;
    seq.video_id = video_id;
    seq.fps = fps;
    seq.stride = stride;
    seq.data = Tensor({static_cast<int>(t), static_cast<int>(d)});
    for (size_t i = 0; i < seq.data.numel(); ++i) {
        uint32_t bits;
        if (!detail_io::get_u32(is, bits)) throw std::runtime_error("read_features: truncated payload in " + path);
        float f;
        std::memcpy(&f, &bits, 4);
        if (!std::isfinite(f)) throw std::runtime_error("read_features: non-finite value in " + path);
        seq.data.v[i] = static_cast<double>(f);
    }
    return seq;
}

// ---------------------------------------------------------------------------
// Annotation / prediction files: JSON list of
//   {video_id, fps, num_frames, instances: [{start_frame, end_frame,
//    class_id[, score]}]}
// ---------------------------------------------------------------------------

inline void write_annotations(const std::vector<VideoAnnotation>& videos, const std::string& path, bool with_scores) {
    nlohmann::json root = nlohmann::json::array();
    for (const auto& v : videos) {
        nlohmann::json inst = nlohmann::json::array();
        for (const auto& a : v.instances) {
            nlohmann::json j{{"start_frame", a.start_frame}, {"end_frame", a.end_frame}, {"class_id", a.class_id}};
            if (with_scores) j["score"] = a.score;
            inst.push_back(std::move(j));
        }
        root.push_back({{"video_id", v.video_id}, {"fps", v.fps}, {"num_frames", v.num_frames}, {"instances", inst}});
    }
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_annotations: cannot open " + path);
    os << root.dump(2) << "\n";
}

inline std::vector<VideoAnnotation> read_annotations(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("read_annotations: cannot open " + path);
    nlohmann::json root = nlohmann::json::parse(is);
    std::vector<VideoAnnotation> out;
    for (const auto& jv : root) {
        VideoAnnotation v;
        v.video_id = jv.at("video_id").get<std::string>();
        v.fps = jv.at("fps").get<int>();
        v.num_frames = jv.at("num_frames").get<int>();
        for (const auto& ji : jv.at("instances")) {
            ActionInstance a;
            a.start_frame = ji.at("start_frame").get<double>();
            a.end_frame = ji.at("end_frame").get<double>();
            a.class_id = ji.at("class_id").get<int>();
            a.score = ji.value("score", 1.0);
            if (!(a.end_frame > a.start_frame))
                throw std::runtime_error("read_annotations: empty instance in " + v.video_id);
            v.instances.push_back(a);
        }
        out.push_back(std::move(v));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic data: deterministic per seed. Background is Gaussian noise; each
// instance of class c adds a bump on channel c whose temporal profile depends
// on the class; one shared channel (K, when present) carries a class-agnostic
// envelope that marks instance extent.
// ---------------------------------------------------------------------------

struct SynthConfig {
    int num_videos = 4;
    int num_classes = 17;
    double noise_level = 0.1;
    int feature_dim = 32;
    int min_grid_len = 96;
    int max_grid_len = 144;
    int min_instances = 8;
    int max_instances = 14;
    int fps = 10;
    int stride = 4;
};

struct SynthDataset {
    std::vector<FeatureSequence> features;
    std::vector<VideoAnnotation> annotations;
};

inline SynthDataset synth_generate(uint64_t seed, const SynthConfig& cfg) {
    if (cfg.num_classes > cfg.feature_dim)
        throw std::invalid_argument("synth_generate: K (" + std::to_string(cfg.num_classes) +
                                    ") must be <= D_in (" + std::to_string(cfg.feature_dim) + ")");
    SynthDataset ds;
    Rng root(seed);
    for (int v = 0; v < cfg.num_videos; ++v) {
        Rng rng = root.child("video", static_cast<uint64_t>(v));
        const int tgrid = static_cast<int>(rng.uniform_int(cfg.min_grid_len, cfg.max_grid_len));
        FeatureSequence seq;
        seq.video_id = "synth_" + std::to_string(v);
        seq.fps = cfg.fps;
        seq.stride = cfg.stride;
        seq.data = Tensor({tgrid, cfg.feature_dim});
        if (cfg.noise_level > 0.0)
            for (double& x : seq.data.v) x = rng.normal(0.0, cfg.noise_level);

        VideoAnnotation ann;
        ann.video_id = seq.video_id;
        ann.fps = cfg.fps;
        ann.num_frames = tgrid * cfg.stride;

        const int n_inst = static_cast<int>(rng.uniform_int(cfg.min_instances, cfg.max_instances));
        int cursor = static_cast<int>(rng.uniform_int(2, 8));
        for (int i = 0; i < n_inst; ++i) {
            // 2..80 grid steps; exponential tail puts most mass on the short
            // durations typical of micro-gestures
            const double u = rng.uniform();
            const int len = 2 + std::min(78, static_cast<int>(std::floor(-6.0 * std::log(1.0 - u))));
            if (cursor + len + 2 > tgrid) break;
            const int cls = static_cast<int>(rng.uniform_int(0, cfg.num_classes - 1));
            const double amp = 2.0;
            const int shape_pow = 1 + cls % 3;
            for (int g = cursor; g < cursor + len; ++g) {
                const double x = (g - cursor + 0.5) / len;
                const double envelope = std::sin(3.141592653589793 * x);
                seq.data.at2(g, cls) += amp * std::pow(envelope, shape_pow);
                if (cfg.feature_dim > cfg.num_classes) seq.data.at2(g, cfg.num_classes) += envelope;
            }
            ActionInstance a;
            a.start_frame = static_cast<double>(cursor * cfg.stride);
            a.end_frame = static_cast<double>((cursor + len) * cfg.stride);
            a.class_id = cls;
            ann.instances.push_back(a);
            cursor += len + static_cast<int>(rng.uniform_int(2, 12));
        }
        ds.features.push_back(std::move(seq));
        ds.annotations.push_back(std::move(ann));
    }
    return ds;
}

}  // namespace qptad
