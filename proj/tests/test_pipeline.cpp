#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "qptad/pipeline.hpp"

using namespace qptad;
namespace fs = std::filesystem;

namespace {
struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("qptad_test_" + std::to_string(::getpid()) + "_" +
                                            std::to_string(reinterpret_cast<uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

std::vector<char> slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}
}  // namespace

TEST_CASE("window enumeration matches the documented cases") {
    CHECK(make_window_starts(128, 128, 0.0) == std::vector<int>{0});
    CHECK(make_window_starts(256, 128, 0.0) == std::vector<int>{0, 128});
    CHECK(make_window_starts(192, 128, 0.75) == std::vector<int>{0, 32, 64});
    // short video: one zero-padded window
    CHECK(make_window_starts(50, 128, 0.0) == std::vector<int>{0});
    // uneven tail: the last window is shifted left to end at T
    CHECK(make_window_starts(200, 128, 0.0) == std::vector<int>{0, 72});
    CHECK_THROWS_AS(make_window_starts(100, 128, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(make_windows("v", 128, 127, 0.0, 4), std::invalid_argument);
}

TEST_CASE("windows cover every frame") {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const int beta = 16 + 4 * static_cast<int>(rng.uniform_int(0, 40));
        const int t = 1 + static_cast<int>(rng.uniform_int(0, 999));
        const double ov = rng.uniform(0.0, 0.9);
        auto starts = make_window_starts(t, beta, ov);
        // enumeration oracle: walk the frames and confirm some window holds each
        std::vector<bool> covered(t, false);
        for (int s : starts)
            for (int f = s; f < s + beta && f < t; ++f) covered[f] = true;
        for (int f = 0; f < t; ++f) {
            INFO("t=" << t << " beta=" << beta << " ov=" << ov << " frame=" << f);
            REQUIRE(covered[f]);
        }
        // with overlap 0 and beta | T, the windows tile the range exactly
        if (t % beta == 0) {
            auto exact = make_window_starts(t, beta, 0.0);
            CHECK(exact.size() == static_cast<size_t>(t / beta));
            for (size_t i = 0; i < exact.size(); ++i) CHECK(exact[i] == static_cast<int>(i) * beta);
        }
    }
}

TEST_CASE("frame and grid coordinates round trip") {
    CHECK(frames_to_grid(128.0) == 32.0);
    CHECK(grid_to_frames(0.0) == 0.0);
    Rng rng(5);
    for (int i = 0; i < 1000; ++i) {
        const double f = rng.uniform(-1000.0, 1000.0);
        CHECK(grid_to_frames(frames_to_grid(f)) == f);
    }
}

TEST_CASE("global to window-local coordinates round trip") {
    Rng rng(7);
    for (int i = 0; i < 1000; ++i) {
        const WindowSpec w{"v", 4 * static_cast<int>(rng.uniform_int(0, 500)), 128, 4};
        const double global = w.start_frame + rng.uniform(0.0, 128.0);
        const double local = global - w.start_frame;
        CHECK(local + w.start_frame == global);
    }
}

TEST_CASE("window feature extraction pads past the end") {
    FeatureSequence seq;
    seq.data = Tensor({10, 3});
    for (int t = 0; t < 10; ++t)
        for (int j = 0; j < 3; ++j) seq.data.at2(t, j) = t;
    WindowSpec w{"v", 16, 32, 4};  // grid rows 4..11, rows 10+ missing
    Tensor x = window_features(seq, w);
    REQUIRE(x.shape == Shape{8, 3});
    for (int i = 0; i < 6; ++i) CHECK(x.at2(i, 0) == 4.0 + i);
    CHECK(x.at2(6, 0) == 0.0);
    CHECK(x.at2(7, 0) == 0.0);
    CHECK_THROWS_AS(window_features(seq, WindowSpec{"v", 2, 32, 4}), std::invalid_argument);
}

TEST_CASE("label assignment keeps, clips and drops correctly") {
    WindowSpec w{"v", 100, 128, 4};
    // fully inside: kept, re-based
    auto kept = assign_labels({{120.0, 160.0, 2, 1.0}}, w);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].start_frame == 20.0);
    CHECK(kept[0].end_frame == 60.0);

    // long instance with only 10% of itself inside a window: dropped
    // window [100, 228), instance [188, 588) -> overlap 40 = 10% of 400
    CHECK(assign_labels({{188.0, 588.0, 0, 1.0}}, w).empty());

    // instance spanning the whole window: kept, clipped to [0, beta)
    auto spanning = assign_labels({{0.0, 1000.0, 1, 1.0}}, w);
    REQUIRE(spanning.size() == 1);
    CHECK(spanning[0].start_frame == 0.0);
    CHECK(spanning[0].end_frame == 128.0);
}

TEST_CASE("merging keeps disjoint instances and suppresses same-class overlaps") {
    std::vector<ActionInstance> disjoint{{0, 10, 0, 0.9}, {20, 30, 0, 0.8}, {40, 50, 1, 0.7}};
    CHECK(merge_predictions(disjoint).size() == 3);

    std::vector<ActionInstance> overlapping{{0.0, 100.0, 3, 0.8}, {5.0, 95.0, 3, 0.6}};
    CHECK(interval_iou(0.0, 100.0, 5.0, 95.0) > 0.85);
    auto merged = merge_predictions(overlapping);
    REQUIRE(merged.size() == 1);
    CHECK(merged[0].score == 0.8);

    std::vector<ActionInstance> two_classes{{0.0, 100.0, 3, 0.8}, {0.0, 100.0, 4, 0.6}};
    CHECK(merge_predictions(two_classes).size() == 2);
}

TEST_CASE("merged output never contains same-class pairs above the threshold") {
    Rng rng(11);
    std::vector<ActionInstance> preds;
    for (int i = 0; i < 200; ++i) {
        const double s = rng.uniform(0.0, 500.0);
        preds.push_back({s, s + rng.uniform(4.0, 80.0), static_cast<int>(rng.uniform_int(0, 3)), rng.uniform()});
    }
    auto merged = merge_predictions(preds);
    for (size_t i = 0; i < merged.size(); ++i)
        for (size_t j = i + 1; j < merged.size(); ++j)
            if (merged[i].class_id == merged[j].class_id)
                CHECK(interval_iou(merged[i].start_frame, merged[i].end_frame, merged[j].start_frame,
                                   merged[j].end_frame) <= 0.5);
    // sorted by score descending
    for (size_t i = 1; i < merged.size(); ++i) CHECK(merged[i - 1].score >= merged[i].score);
}

TEST_CASE("feature files round trip byte-losslessly") {
    TempDir dir;
    Rng rng(13);
    FeatureSequence seq;
    seq.video_id = "v0";
    seq.fps = 10;
    seq.stride = 4;
    seq.data = Tensor({20, 7});
    for (double& v : seq.data.v) v = static_cast<double>(static_cast<float>(rng.normal()));

    const std::string p1 = dir.file("a.mgft"), p2 = dir.file("b.mgft");
    write_features(seq, p1);
    FeatureSequence back = read_features(p1, "v0");
    CHECK(back.data.shape == seq.data.shape);
    CHECK(back.data.v == seq.data.v);
    CHECK(back.fps == 10);
    CHECK(back.stride == 4);
    write_features(back, p2);
    CHECK(slurp(p1) == slurp(p2));
}

TEST_CASE("feature file rejections are distinct") {
    TempDir dir;
    const std::string path = dir.file("bad.mgft");

    {
        std::ofstream os(path, std::ios::binary);
        os << "NOPE";
    }
    CHECK_THROWS_WITH(read_features(path), Catch::Matchers::ContainsSubstring("bad magic"));

    {
        std::ofstream os(path, std::ios::binary);
        os << "MGFT";
        detail_io::put_u16(os, 1);
        detail_io::put_u32(os, 4);
        detail_io::put_u32(os, 2);
        detail_io::put_u16(os, 10);
        detail_io::put_u16(os, 4);
        detail_io::put_u32(os, 0x3F800000u);  // one float instead of eight
    }
    CHECK_THROWS_WITH(read_features(path), Catch::Matchers::ContainsSubstring("truncated payload"));

    {
        std::ofstream os(path, std::ios::binary);
        os << "MGFT";
        detail_io::put_u16(os, 1);
        detail_io::put_u32(os, 1);
        detail_io::put_u32(os, 1);
        detail_io::put_u16(os, 10);
        detail_io::put_u16(os, 4);
        detail_io::put_u32(os, 0x7FC00000u);  // NaN payload
    }
    CHECK_THROWS_WITH(read_features(path), Catch::Matchers::ContainsSubstring("non-finite"));

    {
        std::ofstream os(path, std::ios::binary);
        os << "MGFT";
        detail_io::put_u16(os, 1);
        detail_io::put_u32(os, 0);  // empty sequence violates T' >= 1
        detail_io::put_u32(os, 2);
        detail_io::put_u16(os, 10);
        detail_io::put_u16(os, 4);
    }
    CHECK_THROWS_WITH(read_features(path), Catch::Matchers::ContainsSubstring("invalid dimensions"));

    CHECK_THROWS_WITH(read_features(dir.file("missing.mgft")), Catch::Matchers::ContainsSubstring("cannot open"));
}

TEST_CASE("annotation files round trip") {
    TempDir dir;
    std::vector<VideoAnnotation> videos(2);
    videos[0] = {"a", 10, 400, {{0.0, 40.0, 3, 1.0}, {100.0, 180.0, 7, 1.0}}};
    videos[1] = {"b", 10, 320, {}};
    const std::string path = dir.file("ann.json");
    write_annotations(videos, path, false);
    auto back = read_annotations(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].video_id == "a");
    CHECK(back[0].num_frames == 400);
    REQUIRE(back[0].instances.size() == 2);
    CHECK(back[0].instances[1].class_id == 7);
    CHECK(back[0].instances[1].score == 1.0);
    CHECK(back[1].instances.empty());
}

TEST_CASE("synthetic generation is deterministic per seed") {
    SynthConfig cfg;
    cfg.num_videos = 2;
    SynthDataset a = synth_generate(7, cfg);
    SynthDataset b = synth_generate(7, cfg);
    REQUIRE(a.features.size() == 2);
    for (size_t i = 0; i < a.features.size(); ++i) {
        CHECK(a.features[i].data.v == b.features[i].data.v);
        CHECK(a.annotations[i].instances.size() == b.annotations[i].instances.size());
    }
    SynthDataset c = synth_generate(8, cfg);
    CHECK(a.features[0].data.v != c.features[0].data.v);
}

TEST_CASE("noise-free synthesis is exactly the class templates") {
    SynthConfig cfg;
    cfg.num_videos = 1;
    cfg.noise_level = 0.0;
    SynthDataset ds = synth_generate(21, cfg);
    const FeatureSequence& seq = ds.features[0];
    const VideoAnnotation& ann = ds.annotations[0];
    REQUIRE(!ann.instances.empty());

    std::vector<bool> inside(seq.timesteps(), false);
    for (const auto& inst : ann.instances) {
        const int g0 = static_cast<int>(inst.start_frame) / cfg.stride;
        const int g1 = static_cast<int>(inst.end_frame) / cfg.stride;
        double peak = 0.0;
        for (int g = g0; g < g1; ++g) {
            inside[g] = true;
            peak = std::max(peak, seq.data.at2(g, inst.class_id));
        }
        CHECK(peak > 0.5);  // the class bump is present on its channel
    }
    for (int g = 0; g < seq.timesteps(); ++g) {
        if (inside[g]) continue;
        for (int j = 0; j < cfg.feature_dim; ++j) CHECK(seq.data.at2(g, j) == 0.0);
    }
}

TEST_CASE("synthetic annotations respect the instance invariants") {
    SynthConfig cfg;
    cfg.num_videos = 4;
    SynthDataset ds = synth_generate(33, cfg);
    for (const auto& ann : ds.annotations) {
        for (const auto& inst : ann.instances) {
            CHECK(inst.end_frame > inst.start_frame);
            CHECK(inst.class_id >= 0);
            CHECK(inst.class_id < cfg.num_classes);
            CHECK(inst.start_frame >= 0.0);
            CHECK(inst.end_frame <= ann.num_frames);
            const double len = (inst.end_frame - inst.start_frame) / cfg.stride;
            CHECK(len >= 2.0);
            CHECK(len <= 80.0);
        }
    }
    SynthConfig bad;
    bad.num_classes = 64;
    bad.feature_dim = 32;
    CHECK_THROWS_AS(synth_generate(1, bad), std::invalid_argument);
}
