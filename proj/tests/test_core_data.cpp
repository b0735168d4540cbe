#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "neurocarve/fmri_data.hpp"
#include "neurocarve/image.hpp"
#include "neurocarve/rng.hpp"
#include "test_helpers.hpp"

using namespace ncarve;
using test_helpers::read_bytes;
using test_helpers::temp_path;
using test_helpers::write_bytes;

namespace {

FmriTrial random_trial(uint64_t seed, int frames = 8, int h = 16, int w = 16) {
    Rng rng(seed);
    FmriTrial t;
    t.subject_id = static_cast<uint32_t>(rng.uniform_index(10));
    t.object_id = "obj_" + std::to_string(rng.uniform_index(1000));
    t.category = "cat_" + std::to_string(rng.uniform_index(5));
    t.caption = rng.uniform() < 0.5 ? "" : "a small test object";
    for (int f = 0; f < frames; ++f) {
        FmriFrame frame(h, w);
        for (auto& v : frame.grid) v = rng.normal();
        t.frames.push_back(frame);
    }
    return t;
}

}  // namespace

TEST_CASE("f3d: valid 10-frame file loads with expected shape") {
    FmriTrial t = random_trial(1, 10, 256, 256);
    const std::string p = temp_path("trial10.f3d");
    save_trial(t, p);
    const FmriTrial loaded = load_trial(p);
    REQUIRE(loaded.frames.size() == 10);
    for (const auto& f : loaded.frames) {
        REQUIRE(f.height == 256);
        REQUIRE(f.width == 256);
    }
    REQUIRE(loaded.object_id == t.object_id);
    REQUIRE(loaded.category == t.category);
    REQUIRE(loaded.subject_id == t.subject_id);
}

TEST_CASE("f3d: bad magic rejected") {
    const std::string p = temp_path("badmagic.f3d");
    write_bytes(p, "XXXX............................");
    REQUIRE_THROWS_AS(load_trial(p), BadMagic);
}

TEST_CASE("f3d: truncated payload rejected") {
    FmriTrial t = random_trial(2, 8, 8, 8);
    const std::string p = temp_path("trunc.f3d");
    save_trial(t, p);
    const std::string bytes = read_bytes(p);
    write_bytes(p, bytes.substr(0, bytes.size() - 7));
    REQUIRE_THROWS_AS(load_trial(p), TruncatedPayload);
}

TEST_CASE("f3d: non-finite values rejected") {
    FmriTrial t = random_trial(3, 8, 4, 4);
    t.frames[2].grid[5] = std::numeric_limits<double>::quiet_NaN();
    const std::string p = temp_path("nonfinite.f3d");
    save_trial(t, p);
    REQUIRE_THROWS_AS(load_trial(p), NonFiniteValue);
}

TEST_CASE("f3d: save(load(p)) is byte-identical on random trials") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        FmriTrial t = random_trial(100 + seed, seed % 2 ? 8 : 10, 12, 9);
        const std::string p1 = temp_path("rt1.f3d");
        const std::string p2 = temp_path("rt2.f3d");
        save_trial(t, p1);
        save_trial(load_trial(p1), p2);
        REQUIRE(read_bytes(p1) == read_bytes(p2));
    }
}

TEST_CASE("zscore: identical frames map to zero") {
    std::vector<FmriFrame> frames(4, FmriFrame(4, 4));
    for (auto& f : frames)
        for (size_t i = 0; i < f.grid.size(); ++i) f.grid[i] = 0.1 * static_cast<double>(i) + 0.3;
    const auto out = zscore_per_voxel(frames);
    for (const auto& f : out)
        for (double v : f.grid) REQUIRE(v == 0.0);
}

TEST_CASE("zscore: two frames give +-1/sqrt(2) by the sample-std convention") {
    std::vector<FmriFrame> frames(2, FmriFrame(1, 1));
    frames[0].grid[0] = 3.0;
    frames[1].grid[0] = 7.0;
    // mean 5, sample sd = sqrt(((3-5)^2+(7-5)^2)/1) = sqrt(8) -> z = -+2/sqrt(8)
    const auto out = zscore_per_voxel(frames);
    REQUIRE(out[0].grid[0] == Catch::Approx(-2.0 / std::sqrt(8.0)).epsilon(1e-12));
    REQUIRE(out[1].grid[0] == Catch::Approx(2.0 / std::sqrt(8.0)).epsilon(1e-12));
}

TEST_CASE("zscore: output mean 0 and std 1 per voxel") {
    Rng rng(7);
    std::vector<FmriFrame> frames(8, FmriFrame(6, 5));
    for (auto& f : frames)
        for (auto& v : f.grid) v = rng.normal() * 3.0 + 1.0;
    const auto out = zscore_per_voxel(frames);
    const size_t npix = out.front().grid.size();
    for (size_t p = 0; p < npix; ++p) {
        double mean = 0;
        for (const auto& f : out) mean += f.grid[p];
        mean /= static_cast<double>(out.size());
        double ss = 0;
        for (const auto& f : out) ss += (f.grid[p] - mean) * (f.grid[p] - mean);
        const double sd = std::sqrt(ss / static_cast<double>(out.size() - 1));
        REQUIRE(std::fabs(mean) < 1e-9);
        REQUIRE(std::fabs(sd - 1.0) < 1e-9);
    }
    REQUIRE_THROWS_AS(zscore_per_voxel({FmriFrame(2, 2)}), TooFewFrames);
}

TEST_CASE("select_frames: inference windows use floor((n-count)/2)") {
    REQUIRE(select_frame_indices(10, FrameSelect::Infer, 6, 0) ==
            std::vector<int>{2, 3, 4, 5, 6, 7});
    REQUIRE(select_frame_indices(8, FrameSelect::Infer, 6, 0) ==
            std::vector<int>{1, 2, 3, 4, 5, 6});
    // deterministic across calls
    REQUIRE(select_frame_indices(10, FrameSelect::Infer, 6, 1) ==
            select_frame_indices(10, FrameSelect::Infer, 6, 2));
}

TEST_CASE("select_frames: train with count == n returns all frames in order") {
    const auto idx = select_frame_indices(8, FrameSelect::Train, 8, 42);
    REQUIRE(idx == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
}

TEST_CASE("select_frames: train sampling is order-preserving and seeded") {
    const auto a = select_frame_indices(10, FrameSelect::Train, 6, 5);
    const auto b = select_frame_indices(10, FrameSelect::Train, 6, 5);
    REQUIRE(a == b);
    REQUIRE(std::is_sorted(a.begin(), a.end()));
    std::set<int> uniq(a.begin(), a.end());
    REQUIRE(uniq.size() == 6);
    FmriTrial t = random_trial(11, 8, 4, 4);
    REQUIRE_THROWS_AS(select_frames(t, FrameSelect::Train, 9, 0), CountTooLarge);
}

namespace {

RoiAtlas tiny_atlas() {
    RoiAtlas a;
    a.height = 4;
    a.width = 4;
    a.labels = {0, 1, 1, 0,
                2, 2, 0, 0,
                0, 0, 3, 0,
                0, 0, 0, 0};
    a.names = {{1, "V1"}, {2, "V2"}, {3, "MT"}};
    return a;
}

}  // namespace

TEST_CASE("roi_mask_vector: all-rois selection has one value per nonzero cell") {
    const RoiAtlas atlas = tiny_atlas();
    FmriFrame f(4, 4);
    for (size_t i = 0; i < f.grid.size(); ++i) f.grid[i] = static_cast<double>(i);
    const auto v = roi_mask_vector(f, atlas);
    REQUIRE(v.size() == 5);
    REQUIRE(v == std::vector<double>{1, 2, 4, 5, 10});  // scan order
}

TEST_CASE("roi_mask_vector: unknown roi id rejected") {
    const RoiAtlas atlas = tiny_atlas();
    FmriFrame f(4, 4);
    REQUIRE_THROWS_AS(roi_mask_vector(f, atlas, std::set<uint16_t>{9}), UnknownRoiId);
}

TEST_CASE("roi_mask_vector: single-cell roi yields that value") {
    const RoiAtlas atlas = tiny_atlas();
    FmriFrame f(4, 4);
    f.grid[10] = 0.77;
    const auto v = roi_mask_vector(f, atlas, std::set<uint16_t>{3});
    REQUIRE(v.size() == 1);
    REQUIRE(v[0] == 0.77);
}

TEST_CASE("atlas round trip") {
    const RoiAtlas atlas = tiny_atlas();
    const std::string p = temp_path("atlas.roi");
    save_atlas(atlas, p);
    const RoiAtlas loaded = load_atlas(p);
    REQUIRE(loaded.labels == atlas.labels);
    REQUIRE(loaded.names == atlas.names);
    const std::string p2 = temp_path("atlas2.roi");
    save_atlas(loaded, p2);
    REQUIRE(read_bytes(p) == read_bytes(p2));
}

namespace {

DatasetIndex synthetic_index(int categories, int objects_per_cat) {
    DatasetIndex idx;
    for (int c = 0; c < categories; ++c)
        for (int o = 0; o < objects_per_cat; ++o) {
            TrialRef r;
            r.path = "none";
            r.subject_id = 1;
            r.category = "cat" + std::to_string(c);
            r.object_id = r.category + "_obj" + std::to_string(o);
            idx.trials.push_back(r);
        }
    return idx;
}

}  // namespace

TEST_CASE("make_split: core policy gives 100/8 per category") {
    const DatasetIndex idx = synthetic_index(13, 108);
    const DatasetIndex out = make_split(idx, SplitPolicy::core(3));
    REQUIRE(out.splits.at("default").train.size() == 1300);
    REQUIRE(out.splits.at("default").test.size() == 104);
}

TEST_CASE("make_split: objaverse policy gives 2709/432") {
    const DatasetIndex idx = synthetic_index(2, 1571);  // 3142 objects
    const DatasetIndex out = make_split(idx, SplitPolicy::objaverse(5));
    REQUIRE(out.splits.at("default").train.size() == 2709);
    REQUIRE(out.splits.at("default").test.size() == 432);
}

TEST_CASE("make_split: fractional(1.0) puts everything in train") {
    const DatasetIndex idx = synthetic_index(3, 10);
    const DatasetIndex out = make_split(idx, SplitPolicy::fractional(1.0, 0));
    REQUIRE(out.splits.at("default").train.size() == 30);
    REQUIRE(out.splits.at("default").test.empty());
}

TEST_CASE("make_split: disjoint, union covers input for fractional, seed-stable") {
    const DatasetIndex idx = synthetic_index(4, 25);
    const DatasetIndex a = make_split(idx, SplitPolicy::fractional(0.8, 9));
    const DatasetIndex b = make_split(idx, SplitPolicy::fractional(0.8, 9));
    const auto& sa = a.splits.at("default");
    REQUIRE(sa.train == b.splits.at("default").train);
    REQUIRE(sa.test == b.splits.at("default").test);
    std::set<std::string> inter;
    std::set_intersection(sa.train.begin(), sa.train.end(), sa.test.begin(), sa.test.end(),
                          std::inserter(inter, inter.begin()));
    REQUIRE(inter.empty());
    REQUIRE(sa.train.size() + sa.test.size() == 100);
    REQUIRE_THROWS_AS(make_split(synthetic_index(1, 50), SplitPolicy::core(0)),
                      InsufficientObjects);
}

TEST_CASE("manifest json round trip") {
    DatasetIndex idx = synthetic_index(2, 3);
    idx = make_split(idx, SplitPolicy::fractional(0.5, 1));
    const std::string p = temp_path("manifest.json");
    save_manifest(idx, p);
    const DatasetIndex loaded = load_manifest(p);
    REQUIRE(loaded.trials.size() == idx.trials.size());
    REQUIRE(loaded.splits.at("default").train == idx.splits.at("default").train);
    REQUIRE(loaded.splits.at("default").test == idx.splits.at("default").test);
}

TEST_CASE("ppm: 1x1 pure red pixel") {
    const std::string p = temp_path("red.ppm");
    write_bytes(p, std::string("P6\n1 1\n255\n") + '\xff' + '\x00' + '\x00');
    const Image img = load_ppm(p);
    REQUIRE(img.width == 1);
    REQUIRE(img.height == 1);
    REQUIRE(img.at(0, 0, 0) == 1.0f);
    REQUIRE(img.at(0, 0, 1) == 0.0f);
    REQUIRE(img.at(0, 0, 2) == 0.0f);
}

TEST_CASE("ppm: save(load(p)) byte-identical") {
    Rng rng(19);
    Image img(7, 5);
    for (auto& v : img.pix) v = static_cast<float>(rng.uniform());
    const std::string p1 = temp_path("a.ppm");
    const std::string p2 = temp_path("b.ppm");
    save_ppm(img, p1);
    save_ppm(load_ppm(p1), p2);
    REQUIRE(read_bytes(p1) == read_bytes(p2));
}

TEST_CASE("ppm: ascii P3 rejected") {
    const std::string p = temp_path("ascii.ppm");
    write_bytes(p, "P3\n1 1\n255\n255 0 0\n");
    REQUIRE_THROWS_AS(load_ppm(p), UnsupportedFormat);
}
