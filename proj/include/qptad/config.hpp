// Run configuration: one flat JSON object whose keys mirror the config fields
// of the library types. Unknown keys are rejected so typos fail loudly
// instead of silently running defaults.
#pragma once

#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "qptad/decoder.hpp"
#include "qptad/evaluator.hpp"
#include "qptad/pipeline.hpp"
#include "qptad/trainer.hpp"

namespace qptad {

struct RunConfig {
    // decoder
    int L = 4;
    int N_q = 48;
    int N_s = 30;
    int D = 256;
    int D_prime = 0;  // 0 = derive D/4
    int num_classes = 17;
    int D_in = 1024;
    double init_spread = 0.05;
    double score_thresh = 0.1;
    // mamba-mhsa
    int M = 2;
    int heads = 8;
    int N_state = 8;
    bool selective = false;
    // schedule
    double initial_lr = 1e-4;
    int halving_period = 10;
    int total_epochs = 50;
    int batch_size = 1;
    long max_steps = 0;  // 0 = run the full schedule
    // matching / loss
    double lambda_cls = 2.0;
    double lambda_l1 = 5.0;
    double lambda_iou = 2.0;
    // evaluation
    double tiou_threshold = 0.5;
    bool require_class_match = true;
    // windowing
    int beta = 128;
    double overlap_train = 0.75;
    double overlap_infer = 0.0;
    double nms_tiou = 0.5;
    int fps = 10;
    int stride = 4;
    // synthetic data
    int num_videos = 4;
    double noise_level = 0.1;
    // paths (optional; command-line flags take precedence)
    std::string data_dir;
    std::string out_dir;
    std::string features_dir;
    std::string checkpoint;
    // randomness
    uint64_t seed = 42;

    DecoderConfig decoder_config() const {
        DecoderConfig c;
        c.L = L;
        c.N_q = N_q;
        c.N_s = N_s;
        c.D = D;
        c.D_prime = D_prime > 0 ? D_prime : std::max(1, D / 4);
        c.num_classes = num_classes;
        c.D_in = D_in;
        c.init_spread = init_spread;
        c.score_thresh = score_thresh;
        c.mamba.M = M;
        c.mamba.heads = heads;
        c.mamba.D = D;
        c.mamba.N_state = N_state;
        c.mamba.selective = selective;
        return c;
    }

    TrainSchedule schedule() const {
        TrainSchedule s;
        s.initial_lr = initial_lr;
        s.halving_period = halving_period;
        s.total_epochs = total_epochs;
        s.batch_size = batch_size;
        return s;
    }

    MatchCostWeights match_weights() const { return {lambda_cls, lambda_l1, lambda_iou}; }

    EvalConfig eval_config() const {
        EvalConfig e;
        e.tiou_threshold = tiou_threshold;
        e.require_class_match = require_class_match;
        return e;
    }

    SynthConfig synth_config() const {
        SynthConfig s;
        s.num_videos = num_videos;
        s.num_classes = num_classes;
        s.noise_level = noise_level;
        s.feature_dim = D_in;
        s.fps = fps;
        s.stride = stride;
        return s;
    }

    void validate() const {
        decoder_config().validate();
        schedule().validate();
        match_weights().validate();
        eval_config().validate();
        if (beta < stride || beta % stride != 0)
            throw std::invalid_argument("config: beta (" + std::to_string(beta) + ") must be a positive multiple of stride (" +
                                        std::to_string(stride) + ")");
        if (overlap_train < 0.0 || overlap_train >= 1.0 || overlap_infer < 0.0 || overlap_infer >= 1.0)
            throw std::invalid_argument("config: overlap ratios must lie in [0, 1)");
        if (!(nms_tiou > 0.0 && nms_tiou <= 1.0))
            throw std::invalid_argument("config: nms_tiou must lie in (0, 1]");
        if (num_videos < 0) throw std::invalid_argument("config: num_videos must be >= 0");
        if (noise_level < 0.0) throw std::invalid_argument("config: noise_level must be >= 0");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{
            {"L", L},
            {"N_q", N_q},
            {"N_s", N_s},
            {"D", D},
            {"D_prime", D_prime > 0 ? D_prime : std::max(1, D / 4)},
            {"num_classes", num_classes},
            {"D_in", D_in},
            {"init_spread", init_spread},
            {"score_thresh", score_thresh},
            {"M", M},
            {"heads", heads},
            {"N_state", N_state},
            {"selective", selective},
            {"initial_lr", initial_lr},
            {"halving_period", halving_period},
            {"total_epochs", total_epochs},
            {"batch_size", batch_size},
            {"max_steps", max_steps},
            {"lambda_cls", lambda_cls},
            {"lambda_l1", lambda_l1},
            {"lambda_iou", lambda_iou},
            {"tiou_threshold", tiou_threshold},
            {"require_class_match", require_class_match},
            {"beta", beta},
            {"overlap_train", overlap_train},
            {"overlap_infer", overlap_infer},
            {"nms_tiou", nms_tiou},
            {"fps", fps},
            {"stride", stride},
            {"num_videos", num_videos},
            {"noise_level", noise_level},
            {"data_dir", data_dir},
            {"out_dir", out_dir},
            {"features_dir", features_dir},
            {"checkpoint", checkpoint},
            {"seed", seed},
        };
    }

    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig c;
        for (const auto& [key, value] : j.items()) {
            if (key == "L") c.L = value.get<int>();
            else if (key == "N_q") c.N_q = value.get<int>();
            else if (key == "N_s") c.N_s = value.get<int>();
            else if (key == "D") c.D = value.get<int>();
            else if (key == "D_prime") c.D_prime = value.get<int>();
            else if (key == "num_classes") c.num_classes = value.get<int>();
            else if (key == "D_in") c.D_in = value.get<int>();
            else if (key == "init_spread") c.init_spread = value.get<double>();
            else if (key == "score_thresh") c.score_thresh = value.get<double>();
            else if (key == "M") c.M = value.get<int>();
            else if (key == "heads") c.heads = value.get<int>();
            else if (key == "N_state") c.N_state = value.get<int>();
            else if (key == "selective") c.selective = value.get<bool>();
            else if (key == "initial_lr") c.initial_lr = value.get<double>();
            else if (key == "halving_period") c.halving_period = value.get<int>();
            else if (key == "total_epochs") c.total_epochs = value.get<int>();
            else if (key == "batch_size") c.batch_size = value.get<int>();
            else if (key == "max_steps") c.max_steps = value.get<long>();
            else if (key == "lambda_cls") c.lambda_cls = value.get<double>();
            else if (key == "lambda_l1") c.lambda_l1 = value.get<double>();
            else if (key == "lambda_iou") c.lambda_iou = value.get<double>();
            else if (key == "tiou_threshold") c.tiou_threshold = value.get<double>();
            else if (key == "require_class_match") c.require_class_match = value.get<bool>();
            else if (key == "beta") c.beta = value.get<int>();
            else if (key == "overlap_train") c.overlap_train = value.get<double>();
            else if (key == "overlap_infer") c.overlap_infer = value.get<double>();
            else if (key == "nms_tiou") c.nms_tiou = value.get<double>();
            else if (key == "fps") c.fps = value.get<int>();
            else if (key == "stride") c.stride = value.get<int>();
            else if (key == "num_videos") c.num_videos = value.get<int>();
            else if (key == "noise_level") c.noise_level = value.get<double>();
            else if (key == "data_dir") c.data_dir = value.get<std::string>();
            else if (key == "out_dir") c.out_dir = value.get<std::string>();
            else if (key == "features_dir") c.features_dir = value.get<std::string>();
            else if (key == "checkpoint") c.checkpoint = value.get<std::string>();
            else if (key == "seed") c.seed = value.get<uint64_t>();
            else throw std::invalid_argument("config: unknown key \"" + key + "\"");
        }
        return c;
    }

    static RunConfig load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("config: cannot open " + path);
        return from_json(nlohmann::json::parse(is));
    }
};

}  // namespace qptad
