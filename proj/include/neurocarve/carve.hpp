#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "neurocarve/camera.hpp"
#include "neurocarve/errors.hpp"
#include "neurocarve/image.hpp"
#include "neurocarve/mesh.hpp"
#include "neurocarve/rasterize.hpp"
#include "neurocarve/view_grid.hpp"

// Multi-view images -> textured mesh by visual-hull carving over the unit
// cube [-0.5, 0.5]^3. A deterministic stand-in for a learned sparse-view
// reconstructor: conservative by construction and unable to recover
// concavities, which bounds the fidelity of everything downstream.

namespace ncarve {

struct Silhouette {
    int width = 0, height = 0;
    std::vector<uint8_t> mask;

    Silhouette() = default;
    Silhouette(int w, int h) : width(w), height(h), mask(static_cast<size_t>(w) * h, 0) {}
    bool at(int x, int y) const { return mask[static_cast<size_t>(y) * width + x] != 0; }
    void set(int x, int y, bool v) { mask[static_cast<size_t>(y) * width + x] = v ? 1 : 0; }
    size_t count() const {
        size_t n = 0;
        for (uint8_t v : mask) n += v;
        return n;
    }
};

// Foreground wherever any channel deviates from white by more than the
// threshold.
inline Silhouette silhouette_from_view(const Image& view, double threshold = 0.02) {
    Silhouette s(view.width, view.height);
    for (int y = 0; y < view.height; ++y)
        for (int x = 0; x < view.width; ++x) {
            double dev = 0;
            for (int c = 0; c < 3; ++c)
                dev = std::max(dev, std::fabs(1.0 - static_cast<double>(view.at(x, y, c))));
            s.set(x, y, dev > threshold);
        }
    return s;
}

inline Silhouette dilate1(const Silhouette& in) {
    Silhouette out(in.width, in.height);
    for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < in.width; ++x) {
            bool v = false;
            for (int dy = -1; dy <= 1 && !v; ++dy)
                for (int dx = -1; dx <= 1 && !v; ++dx) {
                    const int nx = x + dx, ny = y + dy;
                    if (nx >= 0 && nx < in.width && ny >= 0 && ny < in.height && in.at(nx, ny))
                        v = true;
                }
            out.set(x, y, v);
        }
    return out;
}

struct OccupancyGrid {
    int R = 64;
    std::vector<uint8_t> occ;  // index (z*R + y)*R + x

    explicit OccupancyGrid(int resolution = 64)
        : R(resolution), occ(static_cast<size_t>(resolution) * resolution * resolution, 0) {
        if (resolution < 8) throw ShapeMismatch("occupancy resolution must be >= 8");
    }
    bool at(int x, int y, int z) const {
        return occ[(static_cast<size_t>(z) * R + y) * R + x] != 0;
    }
    void set(int x, int y, int z, bool v) {
        occ[(static_cast<size_t>(z) * R + y) * R + x] = v ? 1 : 0;
    }
    Vec3 center(int x, int y, int z) const {
        const double r = static_cast<double>(R);
        return {(x + 0.5) / r - 0.5, (y + 0.5) / r - 0.5, (z + 0.5) / r - 0.5};
    }
    size_t count() const {
        size_t n = 0;
        for (uint8_t v : occ) n += v;
        return n;
    }
};

// A voxel survives iff its center projects inside the 1-px-dilated
// silhouette in all six views and lies inside every view frustum.
inline OccupancyGrid carve(const std::array<Silhouette, 6>& silhouettes,
                           const std::vector<CameraPose>& poses, int R = 64) {
    if (poses.size() != 6) throw PoseCountMismatch(std::to_string(poses.size()));
    std::array<Silhouette, 6> dilated;
    std::array<CameraView, 6> cams;
    for (int v = 0; v < 6; ++v) {
        dilated[static_cast<size_t>(v)] = dilate1(silhouettes[static_cast<size_t>(v)]);
        cams[static_cast<size_t>(v)] =
            make_camera_view(poses[static_cast<size_t>(v)], silhouettes[static_cast<size_t>(v)].width,
                             silhouettes[static_cast<size_t>(v)].height);
    }
    OccupancyGrid grid(R);
    for (int z = 0; z < R; ++z)
        for (int y = 0; y < R; ++y)
            for (int x = 0; x < R; ++x) {
                const Vec3 p = grid.center(x, y, z);
                bool keep = true;
                for (int v = 0; v < 6 && keep; ++v) {
                    const auto pr = cams[static_cast<size_t>(v)].project(p);
                    const int px = static_cast<int>(std::floor(pr.px));
                    const int py = static_cast<int>(std::floor(pr.py));
                    if (pr.depth <= 0 || px < 0 || py < 0 ||
                        px >= dilated[static_cast<size_t>(v)].width ||
                        py >= dilated[static_cast<size_t>(v)].height ||
                        !dilated[static_cast<size_t>(v)].at(px, py))
                        keep = false;
                }
                if (keep) grid.set(x, y, z, true);
            }
    return grid;
}

// Two triangles per exposed voxel face with outward winding. Vertices are
// merged per face-connected solid wedge around each lattice corner (not per
// lattice point), which splits diagonal voxel pinches into separate shells
// and keeps every edge on exactly two triangles.
inline TriangleMesh extract_surface(const OccupancyGrid& grid) {
    if (grid.count() == 0) throw EmptyGrid();
    const int R = grid.R;
    TriangleMesh mesh;
    auto occupied = [&](int x, int y, int z) {
        if (x < 0 || y < 0 || z < 0 || x >= R || y >= R || z >= R) return false;
        return grid.at(x, y, z);
    };

    // wedge tag: among the eight voxels incident to lattice corner L, the
    // face-adjacency component containing v, labeled by its smallest member
    auto wedge_tag = [&](const std::array<int, 3>& L, const std::array<int, 3>& v) {
        std::array<std::array<int, 3>, 8> cell;
        std::array<bool, 8> solid{};
        int start = -1;
        for (int i = 0; i < 8; ++i) {
            cell[static_cast<size_t>(i)] = {L[0] - 1 + (i & 1), L[1] - 1 + ((i >> 1) & 1),
                                            L[2] - 1 + ((i >> 2) & 1)};
            const auto& c = cell[static_cast<size_t>(i)];
            solid[static_cast<size_t>(i)] = occupied(c[0], c[1], c[2]);
            if (c == v) start = i;
        }
        std::array<bool, 8> seen{};
        seen[static_cast<size_t>(start)] = true;
        std::vector<int> stack{start};
        int tag = start;
        while (!stack.empty()) {
            const int cur = stack.back();
            stack.pop_back();
            tag = std::min(tag, cur);
            for (int bit = 0; bit < 3; ++bit) {
                const int nb = cur ^ (1 << bit);
                if (!seen[static_cast<size_t>(nb)] && solid[static_cast<size_t>(nb)]) {
                    seen[static_cast<size_t>(nb)] = true;
                    stack.push_back(nb);
                }
            }
        }
        return tag;
    };

    std::map<std::array<int, 4>, int> vert_index;
    auto vertex = [&](const std::array<int, 3>& L, const std::array<int, 3>& v) {
        const std::array<int, 4> key{L[0], L[1], L[2], wedge_tag(L, v)};
        auto it = vert_index.find(key);
        if (it != vert_index.end()) return it->second;
        const int idx = static_cast<int>(mesh.vertices.size());
        const double r = static_cast<double>(R);
        mesh.vertices.push_back({L[0] / r - 0.5, L[1] / r - 0.5, L[2] / r - 0.5});
        vert_index[key] = idx;
        return idx;
    };

    auto quad = [&](const std::array<int, 3>& v, const std::array<int, 3>& a,
                    const std::array<int, 3>& b, const std::array<int, 3>& c,
                    const std::array<int, 3>& d) {
        const int ia = vertex(a, v);
        const int ib = vertex(b, v);
        const int ic = vertex(c, v);
        const int id = vertex(d, v);
        mesh.faces.push_back({ia, ib, ic});
        mesh.faces.push_back({ia, ic, id});
    };

    for (int z = 0; z < R; ++z)
        for (int y = 0; y < R; ++y)
            for (int x = 0; x < R; ++x) {
                if (!grid.at(x, y, z)) continue;
                const std::array<int, 3> v{x, y, z};
                const int X = x + 1, Y = y + 1, Z = z + 1;
                if (!occupied(x + 1, y, z))  // +x
                    quad(v, {X, y, z}, {X, Y, z}, {X, Y, Z}, {X, y, Z});
                if (!occupied(x - 1, y, z))  // -x
                    quad(v, {x, y, z}, {x, y, Z}, {x, Y, Z}, {x, Y, z});
                if (!occupied(x, y + 1, z))  // +y
                    quad(v, {x, Y, z}, {x, Y, Z}, {X, Y, Z}, {X, Y, z});
                if (!occupied(x, y - 1, z))  // -y
                    quad(v, {x, y, z}, {X, y, z}, {X, y, Z}, {x, y, Z});
                if (!occupied(x, y, z + 1))  // +z
                    quad(v, {x, y, Z}, {X, y, Z}, {X, Y, Z}, {x, Y, Z});
                if (!occupied(x, y, z - 1))  // -z
                    quad(v, {x, y, z}, {x, Y, z}, {X, Y, z}, {X, y, z});
            }
    return mesh;
}

// Vertex colors back-projected from the view whose ray best aligns with the
// vertex normal, depth-tested against the mesh's own rendering. Vertices no
// view colors inherit the mean of colored neighbors, then mid-gray.
inline TriangleMesh texture_mesh(const TriangleMesh& mesh, const std::array<Image, 6>& views,
                                 const std::vector<CameraPose>& poses, double voxel_width,
                                 double white_threshold = 0.02) {
    if (poses.size() != 6) throw PoseCountMismatch(std::to_string(poses.size()));
    TriangleMesh out = mesh;
    out.colors.assign(mesh.vertices.size(), {0.5, 0.5, 0.5});
    if (mesh.vertices.empty()) return out;

    // area-weighted vertex normals
    std::vector<Vec3> normals(mesh.vertices.size());
    for (const auto& f : mesh.faces) {
        const Vec3 n = (mesh.vertices[f[1]] - mesh.vertices[f[0]])
                           .cross(mesh.vertices[f[2]] - mesh.vertices[f[0]]);
        for (int k = 0; k < 3; ++k) normals[static_cast<size_t>(f[k])] += n;
    }
    for (auto& n : normals) n = n.normalized();

    std::array<RasterResult, 6> self_depth;
    std::array<CameraView, 6> cams;
    std::array<Silhouette, 6> fg;
    for (int v = 0; v < 6; ++v) {
        self_depth[static_cast<size_t>(v)] =
            rasterize(mesh, poses[static_cast<size_t>(v)], views[static_cast<size_t>(v)].width,
                      views[static_cast<size_t>(v)].height);
        cams[static_cast<size_t>(v)] =
            make_camera_view(poses[static_cast<size_t>(v)], views[static_cast<size_t>(v)].width,
                             views[static_cast<size_t>(v)].height);
        fg[static_cast<size_t>(v)] =
            silhouette_from_view(views[static_cast<size_t>(v)], white_threshold);
    }

    const double depth_tol = 1.5 * voxel_width;
    std::vector<char> colored(mesh.vertices.size(), 0);
    for (size_t vi = 0; vi < mesh.vertices.size(); ++vi) {
        const Vec3& p = mesh.vertices[vi];
        int best_view = -1;
        double best_align = -2.0;
        for (int v = 0; v < 6; ++v) {
            const auto pr = cams[static_cast<size_t>(v)].project(p);
            const int px = static_cast<int>(std::floor(pr.px));
            const int py = static_cast<int>(std::floor(pr.py));
            if (pr.depth <= 0 || px < 0 || py < 0 ||
                px >= views[static_cast<size_t>(v)].width ||
                py >= views[static_cast<size_t>(v)].height)
                continue;
            if (!fg[static_cast<size_t>(v)].at(px, py)) continue;
            const double d_self = self_depth[static_cast<size_t>(v)].depth_at(px, py);
            if (!(pr.depth <= d_self + depth_tol)) continue;  // occluded
            const double align = normals[vi].dot(cams[static_cast<size_t>(v)].ray_toward_eye(p));
            if (align > best_align) {
                best_align = align;
                best_view = v;
            }
        }
        if (best_view >= 0) {
            const auto pr = cams[static_cast<size_t>(best_view)].project(p);
            const int px = static_cast<int>(std::floor(pr.px));
            const int py = static_cast<int>(std::floor(pr.py));
            const Image& img = views[static_cast<size_t>(best_view)];
            out.colors[vi] = {std::clamp<double>(img.at(px, py, 0), 0.0, 1.0),
                              std::clamp<double>(img.at(px, py, 1), 0.0, 1.0),
                              std::clamp<double>(img.at(px, py, 2), 0.0, 1.0)};
            colored[vi] = 1;
        }
    }

    // flood remaining vertices from colored neighbors along mesh edges
    std::vector<std::vector<int>> adj(mesh.vertices.size());
    for (const auto& f : mesh.faces)
        for (int k = 0; k < 3; ++k) {
            adj[static_cast<size_t>(f[k])].push_back(f[(k + 1) % 3]);
            adj[static_cast<size_t>(f[k])].push_back(f[(k + 2) % 3]);
        }
    bool changed = true;
    while (changed) {
        changed = false;
        std::vector<char> next_colored = colored;
        for (size_t vi = 0; vi < mesh.vertices.size(); ++vi) {
            if (colored[vi]) continue;
            Vec3 acc{0, 0, 0};
            int n = 0;
            for (int nb : adj[vi])
                if (colored[static_cast<size_t>(nb)]) {
                    acc += out.colors[static_cast<size_t>(nb)];
                    ++n;
                }
            if (n > 0) {
                out.colors[vi] = acc * (1.0 / n);
                next_colored[vi] = 1;
                changed = true;
            }
        }
        colored = std::move(next_colored);
    }
    return out;  // never-reached vertices keep mid-gray
}

struct ReconConfig {
    int resolution = 64;
    double white_threshold = 0.02;
    double camera_radius = 4.5;
    double camera_fov = 30.0;
};

// Full pipeline: split grid -> silhouettes -> carve -> surface -> texture ->
// normalize. Deterministic for a given grid image.
inline TriangleMesh reconstruct(const Image& grid_image, const ReconConfig& cfg = {}) {
    const auto views = split_grid(grid_image);
    const auto poses = six_view_poses(cfg.camera_radius, cfg.camera_fov);
    std::array<Silhouette, 6> sils;
    for (int v = 0; v < 6; ++v)
        sils[static_cast<size_t>(v)] =
            silhouette_from_view(views[static_cast<size_t>(v)], cfg.white_threshold);
    const OccupancyGrid grid = carve(sils, poses, cfg.resolution);
    if (grid.count() == 0) throw EmptyReconstruction();
    TriangleMesh surf = extract_surface(grid);
    surf = texture_mesh(surf, views, poses, 1.0 / cfg.resolution, cfg.white_threshold);
    return normalize_mesh(surf);
}

}  // namespace ncarve
