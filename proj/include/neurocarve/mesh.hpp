#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "neurocarve/errors.hpp"
#include "neurocarve/rng.hpp"

namespace ncarve {

struct Vec3 {
    double x = 0, y = 0, z = 0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3& operator+=(const Vec3& o) {
        x += o.x;
        y += o.y;
        z += o.z;
        return *this;
    }
    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const {
        const double n = norm();
        return n > 0 ? Vec3{x / n, y / n, z / n} : Vec3{0, 0, 0};
    }
};

// Indexed triangle mesh with optional per-vertex colors (empty = absent).
struct TriangleMesh {
    std::vector<Vec3> vertices;
    std::vector<Vec3> colors;  // rgb in [0,1]; empty or size == vertices.size()
    std::vector<std::array<int, 3>> faces;

    bool has_colors() const { return !colors.empty(); }
};

struct PointCloud {
    std::vector<Vec3> points;
};

// ------------------------------------------------------------------ OBJ io

// Subset parser: "v x y z [r g b]" and "f i j k ..." (fan triangulated,
// slash-qualified and negative indices supported). Anything else is ignored.
inline TriangleMesh parse_obj(const std::string& text) {
    TriangleMesh mesh;
    bool any_color = false;
    std::vector<bool> colored;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ls(line);
        std::string tag;
        if (!(ls >> tag) || tag[0] == '#') continue;
        if (tag == "v") {
            std::vector<double> vals;
            double v;
            while (ls >> v) vals.push_back(v);
            if (vals.size() != 3 && vals.size() != 6)
                throw MalformedLine("line " + std::to_string(lineno) + ": " + line);
            mesh.vertices.push_back({vals[0], vals[1], vals[2]});
            if (vals.size() == 6) {
                mesh.colors.resize(mesh.vertices.size(), {0.5, 0.5, 0.5});
                mesh.colors.back() = {vals[3], vals[4], vals[5]};
                any_color = true;
            } else if (any_color) {
                mesh.colors.resize(mesh.vertices.size(), {0.5, 0.5, 0.5});
            }
        } else if (tag == "f") {
            std::vector<int> raw;
            std::string tok;
            while (ls >> tok) {
                const size_t slash = tok.find('/');
                const std::string head = slash == std::string::npos ? tok : tok.substr(0, slash);
                int i;
                try {
                    i = std::stoi(head);
                } catch (const std::exception&) {
                    throw MalformedLine("line " + std::to_string(lineno) + ": " + line);
                }
                if (i == 0) throw MalformedLine("OBJ indices are 1-based");
                raw.push_back(i);
            }
            if (raw.size() < 3)
                throw MalformedLine("line " + std::to_string(lineno) + ": face needs 3+ indices");
            std::vector<int> idx;
            for (int i : raw) {
                // negative indices count back from the current vertex list
                int resolved = i > 0 ? i - 1 : static_cast<int>(mesh.vertices.size()) + i;
                if (resolved < 0 || resolved >= static_cast<int>(mesh.vertices.size()))
                    throw IndexOutOfRange("line " + std::to_string(lineno) + ": index " +
                                          std::to_string(i));
                idx.push_back(resolved);
            }
            for (size_t k = 2; k < idx.size(); ++k)
                mesh.faces.push_back({idx[0], idx[static_cast<int>(k) - 1], idx[k]});
        }
        // vn / vt / o / g / usemtl / ... ignored
    }
    if (any_color) mesh.colors.resize(mesh.vertices.size(), {0.5, 0.5, 0.5});
    return mesh;
}

inline std::string write_obj(const TriangleMesh& mesh) {
    std::string out;
    char buf[256];
    for (size_t i = 0; i < mesh.vertices.size(); ++i) {
        const Vec3& v = mesh.vertices[i];
        if (mesh.has_colors()) {
            const Vec3& c = mesh.colors[i];
            std::snprintf(buf, sizeof buf, "v %.17g %.17g %.17g %.17g %.17g %.17g\n",
                          v.x, v.y, v.z, c.x, c.y, c.z);
        } else {
            std::snprintf(buf, sizeof buf, "v %.17g %.17g %.17g\n", v.x, v.y, v.z);
        }
        out += buf;
    }
    for (const auto& f : mesh.faces) {
        std::snprintf(buf, sizeof buf, "f %d %d %d\n", f[0] + 1, f[1] + 1, f[2] + 1);
        out += buf;
    }
    return out;
}

inline TriangleMesh load_obj(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw TruncatedPayload("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_obj(ss.str());
}

inline void save_obj(const TriangleMesh& mesh, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw TruncatedPayload("cannot open for write " + path);
    out << write_obj(mesh);
}

// ------------------------------------------------------------- operations

// Center the bounding box at the origin and scale the longest extent to 1.
inline TriangleMesh normalize_mesh(const TriangleMesh& mesh) {
    if (mesh.vertices.empty()) throw EmptyMesh();
    Vec3 lo = mesh.vertices.front(), hi = mesh.vertices.front();
    for (const auto& v : mesh.vertices) {
        lo = {std::min(lo.x, v.x), std::min(lo.y, v.y), std::min(lo.z, v.z)};
        hi = {std::max(hi.x, v.x), std::max(hi.y, v.y), std::max(hi.z, v.z)};
    }
    const Vec3 extent = hi - lo;
    const double longest = std::max({extent.x, extent.y, extent.z});
    if (longest <= 0) throw DegenerateExtent();
    const Vec3 center = (lo + hi) * 0.5;
    TriangleMesh out = mesh;
    for (auto& v : out.vertices) v = (v - center) * (1.0 / longest);
    return out;
}

inline double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
    return 0.5 * (b - a).cross(c - a).norm();
}

// Uniform surface sampling: triangles by area, positions by the sqrt
// barycentric construction.
inline PointCloud sample_surface(const TriangleMesh& mesh, size_t n, uint64_t seed) {
    std::vector<double> cumarea;
    cumarea.reserve(mesh.faces.size());
    double total = 0;
    for (const auto& f : mesh.faces) {
        total += triangle_area(mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
        cumarea.push_back(total);
    }
    if (total <= 0) throw NoArea();
    Rng rng(seed);
    PointCloud pc;
    pc.points.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        const double r = rng.uniform() * total;
        const size_t fi = static_cast<size_t>(
            std::lower_bound(cumarea.begin(), cumarea.end(), r) - cumarea.begin());
        const auto& f = mesh.faces[std::min(fi, mesh.faces.size() - 1)];
        const double r1 = std::sqrt(rng.uniform());
        const double r2 = rng.uniform();
        const Vec3& a = mesh.vertices[f[0]];
        const Vec3& b = mesh.vertices[f[1]];
        const Vec3& c = mesh.vertices[f[2]];
        pc.points.push_back(a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2));
    }
    return pc;
}

}  // namespace ncarve
