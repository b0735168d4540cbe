#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "neurocarve/errors.hpp"
#include "neurocarve/rng.hpp"

// On-disk containers and preprocessing for fMRI trials.
//
//   F3D1  trial container: u32 subject_id, frame_count, height, width,
//         metadata_length (all little endian), then a UTF-8 JSON metadata
//         blob, then frame_count*height*width float32 activations.
//   ROI1  atlas container: u32 height, width, u16 labels row-major,
//         then a UTF-8 TSV id->name table.
//
// Writers emit canonical bytes (sorted JSON keys, fixed header layout) so a
// save/load/save cycle is byte identical.

namespace ncarve {

struct FmriFrame {
    int height = 0;
    int width = 0;
    std::vector<double> grid;  // row-major, z-scored BOLD units

    FmriFrame() = default;
    FmriFrame(int h, int w, double fill = 0.0)
        : height(h), width(w), grid(static_cast<size_t>(h) * w, fill) {}

    double& at(int x, int y) { return grid[static_cast<size_t>(y) * width + x]; }
    double at(int x, int y) const { return grid[static_cast<size_t>(y) * width + x]; }
};

struct FmriTrial {
    uint32_t subject_id = 0;
    std::string object_id;
    std::string category;
    std::string caption;  // may be empty
    std::vector<FmriFrame> frames;  // temporal order, immutable once loaded
};

struct RoiAtlas {
    int height = 0;
    int width = 0;
    std::vector<uint16_t> labels;          // 0 = background
    std::map<uint16_t, std::string> names;  // id -> ROI name

    uint16_t label_at(int x, int y) const {
        return labels[static_cast<size_t>(y) * width + x];
    }
    std::set<uint16_t> label_set() const {
        std::set<uint16_t> s;
        for (uint16_t v : labels)
            if (v != 0) s.insert(v);
        return s;
    }
};

struct TrialRef {
    std::string path;
    uint32_t subject_id = 0;
    std::string object_id;
    std::string category;
    std::string caption;
};

struct SplitSets {
    std::set<std::string> train;  // object_ids
    std::set<std::string> test;
};

struct DatasetIndex {
    std::vector<TrialRef> trials;
    std::map<std::string, SplitSets> splits;
};

// ---------------------------------------------------------------- binary io

namespace detail {

inline void write_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (in.gcount() != 4) throw TruncatedPayload("u32");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void write_u16(std::ostream& out, uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    out.write(reinterpret_cast<const char*>(b), 2);
}

inline uint16_t read_u16(std::istream& in) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    if (in.gcount() != 2) throw TruncatedPayload("u16");
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

inline void write_f32(std::ostream& out, float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    write_u32(out, u);
}

inline float read_f32(std::istream& in) {
    uint32_t u = read_u32(in);
    float v;
    std::memcpy(&v, &u, 4);
    return v;
}

}  // namespace detail

// ------------------------------------------------------------------ trials

inline FmriTrial load_trial(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw TruncatedPayload("cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4) throw TruncatedPayload(path);
    if (std::memcmp(magic, "F3D1", 4) != 0) throw BadMagic(path);
    FmriTrial t;
    t.subject_id = detail::read_u32(in);
    const uint32_t frame_count = detail::read_u32(in);
    const uint32_t height = detail::read_u32(in);
    const uint32_t width = detail::read_u32(in);
    const uint32_t meta_len = detail::read_u32(in);
    if (frame_count != 8 && frame_count != 10)
        throw DimMismatch("frame count must be 8 or 10, got " + std::to_string(frame_count));
    if (height == 0 || width == 0) throw DimMismatch("zero frame dims");
    std::string meta(meta_len, '\0');
    in.read(meta.data(), meta_len);
    if (static_cast<uint32_t>(in.gcount()) != meta_len) throw TruncatedPayload(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        throw TruncatedPayload("bad metadata JSON: " + std::string(e.what()));
    }
    t.object_id = j.value("object_id", "");
    t.category = j.value("category", "");
    t.caption = j.value("caption", "");
    t.frames.reserve(frame_count);
    for (uint32_t f = 0; f < frame_count; ++f) {
        FmriFrame frame(static_cast<int>(height), static_cast<int>(width));
        for (size_t i = 0; i < frame.grid.size(); ++i) {
            const float v = detail::read_f32(in);
            if (!std::isfinite(v)) throw NonFiniteValue(path);
            frame.grid[i] = v;
        }
        t.frames.push_back(std::move(frame));
    }
    return t;
}

inline void save_trial(const FmriTrial& t, const std::string& path) {
    if (t.frames.empty()) throw DimMismatch("trial has no frames");
    const int h = t.frames.front().height;
    const int w = t.frames.front().width;
    for (const auto& f : t.frames)
        if (f.height != h || f.width != w) throw DimMismatch("ragged frame dims");
    // nlohmann objects serialize with sorted keys, which makes the blob canonical
    nlohmann::json j;
    j["caption"] = t.caption;
    j["category"] = t.category;
    j["object_id"] = t.object_id;
    const std::string meta = j.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw TruncatedPayload("cannot open for write " + path);
    out.write("F3D1", 4);
    detail::write_u32(out, t.subject_id);
    detail::write_u32(out, static_cast<uint32_t>(t.frames.size()));
    detail::write_u32(out, static_cast<uint32_t>(h));
    detail::write_u32(out, static_cast<uint32_t>(w));
    detail::write_u32(out, static_cast<uint32_t>(meta.size()));
    out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    for (const auto& f : t.frames)
        for (double v : f.grid) detail::write_f32(out, static_cast<float>(v));
}

// ------------------------------------------------------------------- atlas

inline RoiAtlas load_atlas(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw TruncatedPayload("cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4) throw TruncatedPayload(path);
    if (std::memcmp(magic, "ROI1", 4) != 0) throw BadMagic(path);
    RoiAtlas a;
    a.height = static_cast<int>(detail::read_u32(in));
    a.width = static_cast<int>(detail::read_u32(in));
    if (a.height <= 0 || a.width <= 0) throw DimMismatch("zero atlas dims");
    a.labels.resize(static_cast<size_t>(a.height) * a.width);
    for (auto& v : a.labels) v = detail::read_u16(in);
    std::string table((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    size_t pos = 0;
    while (pos < table.size()) {
        size_t eol = table.find('\n', pos);
        if (eol == std::string::npos) eol = table.size();
        const std::string line = table.substr(pos, eol - pos);
        pos = eol + 1;
        if (line.empty()) continue;
        const size_t tab = line.find('\t');
        if (tab == std::string::npos) throw TruncatedPayload("bad name-table line");
        a.names[static_cast<uint16_t>(std::stoul(line.substr(0, tab)))] = line.substr(tab + 1);
    }
    for (uint16_t v : a.labels)
        if (v != 0 && a.names.find(v) == a.names.end())
            throw UnknownRoiId("label " + std::to_string(v) + " missing from name table");
    return a;
}

inline void save_atlas(const RoiAtlas& a, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw TruncatedPayload("cannot open for write " + path);
    out.write("ROI1", 4);
    detail::write_u32(out, static_cast<uint32_t>(a.height));
    detail::write_u32(out, static_cast<uint32_t>(a.width));
    for (uint16_t v : a.labels) detail::write_u16(out, v);
    for (const auto& [id, name] : a.names)
        out << id << '\t' << name << '\n';
}

// ---------------------------------------------------------------- manifest

inline DatasetIndex load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw TruncatedPayload("cannot open " + path);
    nlohmann::json j;
    in >> j;
    DatasetIndex idx;
    for (const auto& tj : j.at("trials")) {
        TrialRef r;
        r.path = tj.at("path").get<std::string>();
        r.subject_id = tj.at("subject_id").get<uint32_t>();
        r.object_id = tj.at("object_id").get<std::string>();
        r.category = tj.at("category").get<std::string>();
        r.caption = tj.value("caption", "");
        idx.trials.push_back(std::move(r));
    }
    if (j.contains("splits")) {
        for (auto it = j["splits"].begin(); it != j["splits"].end(); ++it) {
            SplitSets s;
            for (const auto& o : it.value().at("train")) s.train.insert(o.get<std::string>());
            for (const auto& o : it.value().at("test")) s.test.insert(o.get<std::string>());
            idx.splits[it.key()] = std::move(s);
        }
    }
    // split members must exist among the trials
    std::set<std::string> known;
    for (const auto& t : idx.trials) known.insert(t.object_id);
    for (const auto& [name, s] : idx.splits) {
        for (const auto& o : s.train)
            if (!known.count(o)) throw DimMismatch("split object missing: " + o);
        for (const auto& o : s.test)
            if (!known.count(o)) throw DimMismatch("split object missing: " + o);
    }
    return idx;
}

inline void save_manifest(const DatasetIndex& idx, const std::string& path) {
    nlohmann::json j;
    j["trials"] = nlohmann::json::array();
    for (const auto& t : idx.trials) {
        nlohmann::json tj;
        tj["path"] = t.path;
        tj["subject_id"] = t.subject_id;
        tj["object_id"] = t.object_id;
        tj["category"] = t.category;
        tj["caption"] = t.caption;
        j["trials"].push_back(tj);
    }
    j["splits"] = nlohmann::json::object();
    for (const auto& [name, s] : idx.splits) {
        j["splits"][name]["train"] = s.train;
        j["splits"][name]["test"] = s.test;
    }
    std::ofstream out(path);
    out << j.dump(2) << '\n';
}

// ----------------------------------------------------------- preprocessing

// Per-voxel z-scoring across frames; sample std (divisor n-1). Voxels whose
// std is zero (up to rounding noise of identical inputs) map to 0.
inline std::vector<FmriFrame> zscore_per_voxel(const std::vector<FmriFrame>& frames) {
    if (frames.size() < 2) throw TooFewFrames("need at least 2 frames");
    const size_t n = frames.size();
    const size_t npix = frames.front().grid.size();
    for (const auto& f : frames)
        if (f.grid.size() != npix) throw DimMismatch("ragged frame dims");
    std::vector<FmriFrame> out(frames);
    for (size_t p = 0; p < npix; ++p) {
        double mean = 0;
        for (const auto& f : frames) mean += f.grid[p];
        mean /= static_cast<double>(n);
        double ss = 0;
        for (const auto& f : frames) {
            const double d = f.grid[p] - mean;
            ss += d * d;
        }
        const double sd = std::sqrt(ss / static_cast<double>(n - 1));
        if (sd <= 1e-12 * (1.0 + std::fabs(mean))) {
            for (auto& f : out) f.grid[p] = 0.0;
        } else {
            for (auto& f : out) f.grid[p] = (f.grid[p] - mean) / sd;
        }
    }
    return out;
}

enum class FrameSelect { Train, Infer };

// Train: `count` frames sampled without replacement, temporal order kept.
// Infer: the contiguous middle window starting at floor((n-count)/2).
inline std::vector<FmriFrame> select_frames(const FmriTrial& trial, FrameSelect mode,
                                            int count = 6, uint64_t seed = 0) {
    const int n = static_cast<int>(trial.frames.size());
    if (count > n) throw CountTooLarge(std::to_string(count) + " > " + std::to_string(n));
    std::vector<FmriFrame> out;
    out.reserve(static_cast<size_t>(count));
    if (mode == FrameSelect::Infer) {
        const int start = (n - count) / 2;
        for (int i = start; i < start + count; ++i) out.push_back(trial.frames[i]);
    } else {
        Rng rng(seed);
        for (size_t i : rng.sample_indices(static_cast<size_t>(n), static_cast<size_t>(count)))
            out.push_back(trial.frames[i]);
    }
    return out;
}

// Same selection, but returning frame positions; analyses need the indices.
inline std::vector<int> select_frame_indices(int n, FrameSelect mode, int count, uint64_t seed) {
    if (count > n) throw CountTooLarge(std::to_string(count) + " > " + std::to_string(n));
    std::vector<int> out;
    if (mode == FrameSelect::Infer) {
        const int start = (n - count) / 2;
        for (int i = start; i < start + count; ++i) out.push_back(i);
    } else {
        Rng rng(seed);
        for (size_t i : rng.sample_indices(static_cast<size_t>(n), static_cast<size_t>(count)))
            out.push_back(static_cast<int>(i));
    }
    return out;
}

// Values at positions whose atlas label is in roi_ids, row-major scan order.
// An empty optional selects every nonzero label.
inline std::vector<double> roi_mask_vector(const FmriFrame& frame, const RoiAtlas& atlas,
                                           const std::optional<std::set<uint16_t>>& roi_ids = std::nullopt) {
    if (frame.height != atlas.height || frame.width != atlas.width)
        throw DimMismatch("frame dims do not match atlas dims");
    if (roi_ids) {
        for (uint16_t id : *roi_ids)
            if (atlas.names.find(id) == atlas.names.end())
                throw UnknownRoiId("roi id " + std::to_string(id));
    }
    std::vector<double> out;
    for (size_t i = 0; i < frame.grid.size(); ++i) {
        const uint16_t lab = atlas.labels[i];
        if (lab == 0) continue;
        if (!roi_ids || roi_ids->count(lab)) out.push_back(frame.grid[i]);
    }
    return out;
}

// ------------------------------------------------------------------ splits

struct SplitPolicy {
    enum Kind { Core, Objaverse, Fractional } kind = Fractional;
    double fraction = 0.8;  // Fractional only
    uint64_t seed = 0;

    static SplitPolicy core(uint64_t seed) { return {Core, 0.0, seed}; }
    static SplitPolicy objaverse(uint64_t seed) { return {Objaverse, 0.0, seed}; }
    static SplitPolicy fractional(double p, uint64_t seed) { return {Fractional, p, seed}; }
};

// Core: per category 100 train / 8 test. Objaverse: 2709 train / 432 test
// over all objects. Fractional: per-category proportion p to train.
inline DatasetIndex make_split(const DatasetIndex& index, const SplitPolicy& policy,
                               const std::string& split_name = "default") {
    // unique objects, grouped by category, in sorted order for determinism
    std::map<std::string, std::vector<std::string>> by_cat;
    {
        std::set<std::string> seen;
        for (const auto& t : index.trials) {
            if (seen.insert(t.object_id).second) by_cat[t.category].push_back(t.object_id);
        }
        for (auto& [cat, objs] : by_cat) std::sort(objs.begin(), objs.end());
    }
    DatasetIndex out = index;
    SplitSets split;
    Rng rng(policy.seed);
    switch (policy.kind) {
        case SplitPolicy::Core: {
            for (auto& [cat, objs] : by_cat) {
                if (objs.size() < 108)
                    throw InsufficientObjects("category " + cat + " has " +
                                              std::to_string(objs.size()) + " objects, need 108");
                auto shuffled = objs;
                rng.shuffle(shuffled);
                for (size_t i = 0; i < 100; ++i) split.train.insert(shuffled[i]);
                for (size_t i = 100; i < 108; ++i) split.test.insert(shuffled[i]);
            }
            break;
        }
        case SplitPolicy::Objaverse: {
            std::vector<std::string> all;
            for (auto& [cat, objs] : by_cat) all.insert(all.end(), objs.begin(), objs.end());
            std::sort(all.begin(), all.end());
            if (all.size() < 2709 + 432)
                throw InsufficientObjects("need 3141 objects, have " + std::to_string(all.size()));
            rng.shuffle(all);
            for (size_t i = 0; i < 2709; ++i) split.train.insert(all[i]);
            for (size_t i = 2709; i < 2709 + 432; ++i) split.test.insert(all[i]);
            break;
        }
        case SplitPolicy::Fractional: {
            if (policy.fraction < 0.0 || policy.fraction > 1.0)
                throw InsufficientObjects("fraction outside [0,1]");
            for (auto& [cat, objs] : by_cat) {
                auto shuffled = objs;
                rng.shuffle(shuffled);
                const size_t ntrain =
                    static_cast<size_t>(std::llround(policy.fraction * static_cast<double>(objs.size())));
                for (size_t i = 0; i < shuffled.size(); ++i)
                    (i < ntrain ? split.train : split.test).insert(shuffled[i]);
            }
            break;
        }
    }
    out.splits[split_name] = std::move(split);
    return out;
}

}  // namespace ncarve
