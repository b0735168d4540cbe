#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <set>

#include "neurocarve/carve.hpp"
#include "neurocarve/pointcloud_metrics.hpp"
#include "neurocarve/rng.hpp"

using namespace ncarve;

namespace {

TriangleMesh centered_cube(double half, Vec3 color = {0.5, 0.5, 0.5}, bool with_colors = false) {
    TriangleMesh m;
    for (int i = 0; i < 8; ++i)
        m.vertices.push_back(
            {i & 1 ? half : -half, i & 2 ? half : -half, i & 4 ? half : -half});
    if (with_colors) m.colors.assign(8, color);
    const int quads[6][4] = {{0, 1, 3, 2}, {4, 6, 7, 5}, {0, 4, 5, 1},
                             {2, 3, 7, 6}, {0, 2, 6, 4}, {1, 5, 7, 3}};
    for (const auto& q : quads) {
        m.faces.push_back({q[0], q[1], q[2]});
        m.faces.push_back({q[0], q[2], q[3]});
    }
    return m;
}

TriangleMesh uv_sphere(double radius, int stacks = 12, int slices = 18) {
    TriangleMesh m;
    for (int i = 0; i <= stacks; ++i) {
        const double phi = M_PI * i / stacks;
        for (int j = 0; j < slices; ++j) {
            const double theta = 2.0 * M_PI * j / slices;
            m.vertices.push_back({radius * std::sin(phi) * std::cos(theta),
                                  radius * std::sin(phi) * std::sin(theta),
                                  radius * std::cos(phi)});
        }
    }
    auto vid = [&](int i, int j) { return i * slices + (j % slices); };
    for (int i = 0; i < stacks; ++i)
        for (int j = 0; j < slices; ++j) {
            m.faces.push_back({vid(i, j), vid(i + 1, j), vid(i + 1, j + 1)});
            m.faces.push_back({vid(i, j), vid(i + 1, j + 1), vid(i, j + 1)});
        }
    return m;
}

Image render_grid(const TriangleMesh& mesh, int view_px = 64) {
    const auto poses = six_view_poses();
    std::array<Image, 6> views;
    for (int v = 0; v < 6; ++v)
        views[static_cast<size_t>(v)] = rasterize(mesh, poses[static_cast<size_t>(v)], view_px, view_px).color;
    return compose_grid(views);
}

// occupied voxel lookup tolerant of out-of-range coordinates
bool occ_at(const OccupancyGrid& g, int x, int y, int z) {
    if (x < 0 || y < 0 || z < 0 || x >= g.R || y >= g.R || z >= g.R) return false;
    return g.at(x, y, z);
}

bool is_watertight(const TriangleMesh& m) {
    std::map<std::pair<int, int>, int> edges;
    for (const auto& f : m.faces)
        for (int k = 0; k < 3; ++k) {
            int a = f[k], b = f[(k + 1) % 3];
            if (a > b) std::swap(a, b);
            edges[{a, b}]++;
        }
    for (const auto& [e, n] : edges)
        if (n != 2) return false;
    return true;
}

}  // namespace

TEST_CASE("silhouette_from_view: background, single pixel, render consistency") {
    Image white(8, 8, 1.0f);
    REQUIRE(silhouette_from_view(white).count() == 0);

    Image one_red(8, 8, 1.0f);
    one_red.at(3, 5, 1) = 0.0f;
    one_red.at(3, 5, 2) = 0.0f;
    const Silhouette s = silhouette_from_view(one_red);
    REQUIRE(s.count() == 1);
    REQUIRE(s.at(3, 5));

    // rasterizer mask is contained in the (1px dilated) silhouette of its
    // own rendering
    const auto mesh = centered_cube(0.4, {0.8, 0.2, 0.2}, true);
    const auto r = rasterize(mesh, six_view_poses()[1], 48, 48);
    const Silhouette rendered = dilate1(silhouette_from_view(r.color));
    for (int y = 0; y < 48; ++y)
        for (int x = 0; x < 48; ++x)
            if (r.mask_at(x, y)) REQUIRE(rendered.at(x, y));
}

TEST_CASE("carve: empty silhouettes produce empty occupancy") {
    std::array<Silhouette, 6> sils;
    for (auto& s : sils) s = Silhouette(32, 32);
    const OccupancyGrid g = carve(sils, six_view_poses(), 16);
    REQUIRE(g.count() == 0);
    REQUIRE_THROWS_AS(carve(sils, std::vector<CameraPose>(5), 16), PoseCountMismatch);
}

TEST_CASE("carve: full silhouettes produce exactly the frustum intersection") {
    std::array<Silhouette, 6> sils;
    for (auto& s : sils) {
        s = Silhouette(24, 24);
        for (auto& m : s.mask) m = 1;
    }
    const auto poses = six_view_poses();
    const int R = 12;
    const OccupancyGrid g = carve(sils, poses, R);
    // per-voxel projection oracle
    std::array<CameraView, 6> cams;
    for (int v = 0; v < 6; ++v) cams[static_cast<size_t>(v)] = make_camera_view(poses[static_cast<size_t>(v)], 24, 24);
    for (int z = 0; z < R; ++z)
        for (int y = 0; y < R; ++y)
            for (int x = 0; x < R; ++x) {
                const Vec3 p = g.center(x, y, z);
                bool inside = true;
                for (int v = 0; v < 6 && inside; ++v) {
                    const auto pr = cams[static_cast<size_t>(v)].project(p);
                    inside = pr.depth > 0 && pr.px >= 0 && pr.px < 24 && pr.py >= 0 && pr.py < 24;
                }
                REQUIRE(g.at(x, y, z) == inside);
            }
    REQUIRE(g.count() > 0);
}

TEST_CASE("carve: rendered cube recovers a high-IoU voxelization") {
    const auto mesh = centered_cube(0.5, {0.7, 0.3, 0.2}, true);
    const auto poses = six_view_poses();
    std::array<Silhouette, 6> sils;
    for (int v = 0; v < 6; ++v)
        sils[static_cast<size_t>(v)] =
            silhouette_from_view(rasterize(mesh, poses[static_cast<size_t>(v)], 64, 64).color);
    const int R = 64;
    const OccupancyGrid g = carve(sils, poses, R);
    // voxelization oracle: every voxel center is inside the unit cube
    size_t inter = 0, uni = 0;
    for (int z = 0; z < R; ++z)
        for (int y = 0; y < R; ++y)
            for (int x = 0; x < R; ++x) {
                const bool gt = true;  // all centers lie inside [-0.5,0.5]^3
                const bool carved = g.at(x, y, z);
                inter += gt && carved;
                uni += gt || carved;
            }
    const double iou = static_cast<double>(inter) / static_cast<double>(uni);
    REQUIRE(iou >= 0.9);
}

TEST_CASE("visual hull conservativeness: interior sphere voxels stay occupied") {
    const auto mesh = uv_sphere(0.45);
    const auto poses = six_view_poses();
    std::array<Silhouette, 6> sils;
    for (int v = 0; v < 6; ++v)
        sils[static_cast<size_t>(v)] =
            silhouette_from_view(rasterize(mesh, poses[static_cast<size_t>(v)], 64, 64).color);
    const int R = 32;
    const OccupancyGrid g = carve(sils, poses, R);
    const double margin = 2.0 / R;
    for (int z = 0; z < R; ++z)
        for (int y = 0; y < R; ++y)
            for (int x = 0; x < R; ++x) {
                const Vec3 p = g.center(x, y, z);
                if (p.norm() <= 0.45 - margin) REQUIRE(g.at(x, y, z));
            }
}

TEST_CASE("extract_surface: single voxel gives a cube of 12 triangles, 8 vertices") {
    OccupancyGrid g(8);
    g.set(3, 4, 5, true);
    const TriangleMesh m = extract_surface(g);
    REQUIRE(m.vertices.size() == 8);
    REQUIRE(m.faces.size() == 12);
    REQUIRE(is_watertight(m));
    REQUIRE_THROWS_AS(extract_surface(OccupancyGrid(8)), EmptyGrid);
}

TEST_CASE("extract_surface: 2x1x1 block exposes 10 faces = 20 triangles") {
    OccupancyGrid g(8);
    g.set(2, 3, 3, true);
    g.set(3, 3, 3, true);
    const TriangleMesh m = extract_surface(g);
    REQUIRE(m.faces.size() == 20);
    REQUIRE(m.vertices.size() == 12);
    REQUIRE(is_watertight(m));
}

TEST_CASE("extract_surface: every face borders exactly one occupied voxel") {
    Rng rng(5);
    OccupancyGrid g(12);
    // random blob: union of 3 balls, then keep everything (no need for
    // connectivity in this containment check)
    for (int b = 0; b < 3; ++b) {
        const int cx = 3 + static_cast<int>(rng.uniform_index(6));
        const int cy = 3 + static_cast<int>(rng.uniform_index(6));
        const int cz = 3 + static_cast<int>(rng.uniform_index(6));
        for (int z = 0; z < 12; ++z)
            for (int y = 0; y < 12; ++y)
                for (int x = 0; x < 12; ++x)
                    if ((x - cx) * (x - cx) + (y - cy) * (y - cy) + (z - cz) * (z - cz) <= 6)
                        g.set(x, y, z, true);
    }
    const TriangleMesh m = extract_surface(g);
    const double vox = 1.0 / 12.0;
    for (const auto& f : m.faces) {
        const Vec3 c = (m.vertices[f[0]] + m.vertices[f[1]] + m.vertices[f[2]]) * (1.0 / 3.0);
        const Vec3 n = (m.vertices[f[1]] - m.vertices[f[0]])
                           .cross(m.vertices[f[2]] - m.vertices[f[0]])
                           .normalized();
        auto voxel_of = [&](const Vec3& p) {
            return std::array<int, 3>{static_cast<int>(std::floor((p.x + 0.5) * 12)),
                                      static_cast<int>(std::floor((p.y + 0.5) * 12)),
                                      static_cast<int>(std::floor((p.z + 0.5) * 12))};
        };
        const auto inside = voxel_of(c - n * (0.5 * vox));
        const auto outside = voxel_of(c + n * (0.5 * vox));
        REQUIRE(occ_at(g, inside[0], inside[1], inside[2]));
        REQUIRE_FALSE(occ_at(g, outside[0], outside[1], outside[2]));
    }
}

TEST_CASE("extract_surface: watertight on random 6-connected blobs") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(100 + seed);
        OccupancyGrid g(10);
        // grow a connected blob by random walk from the center
        int x = 5, y = 5, z = 5;
        g.set(x, y, z, true);
        for (int step = 0; step < 60; ++step) {
            const int dir = static_cast<int>(rng.uniform_index(6));
            const int dx[] = {1, -1, 0, 0, 0, 0};
            const int dy[] = {0, 0, 1, -1, 0, 0};
            const int dz[] = {0, 0, 0, 0, 1, -1};
            x = std::clamp(x + dx[dir], 1, 8);
            y = std::clamp(y + dy[dir], 1, 8);
            z = std::clamp(z + dz[dir], 1, 8);
            g.set(x, y, z, true);
        }
        REQUIRE(is_watertight(extract_surface(g)));
    }
}

TEST_CASE("texture_mesh: uniformly red object colors nearly all vertices red") {
    const auto gt = centered_cube(0.4, {0.9, 0.05, 0.05}, true);
    const auto poses = six_view_poses();
    std::array<Image, 6> views;
    std::array<Silhouette, 6> sils;
    for (int v = 0; v < 6; ++v) {
        views[static_cast<size_t>(v)] = rasterize(gt, poses[static_cast<size_t>(v)], 64, 64).color;
        sils[static_cast<size_t>(v)] = silhouette_from_view(views[static_cast<size_t>(v)]);
    }
    const int R = 32;
    const OccupancyGrid g = carve(sils, poses, R);
    const TriangleMesh surf = extract_surface(g);
    const TriangleMesh textured = texture_mesh(surf, views, poses, 1.0 / R);
    REQUIRE(textured.colors.size() == textured.vertices.size());
    size_t close = 0;
    for (const auto& c : textured.colors) {
        REQUIRE(c.x >= 0.0);
        REQUIRE(c.x <= 1.0);
        REQUIRE(c.y >= 0.0);
        REQUIRE(c.y <= 1.0);
        if (std::fabs(c.x - 0.9) < 0.1 && std::fabs(c.y - 0.05) < 0.1) ++close;
    }
    REQUIRE(static_cast<double>(close) / textured.colors.size() >= 0.95);
}

TEST_CASE("texture_mesh: no covering view leaves everything mid-gray") {
    OccupancyGrid g(8);
    g.set(4, 4, 4, true);
    const TriangleMesh surf = extract_surface(g);
    std::array<Image, 6> views;
    for (auto& v : views) v = Image(16, 16, 1.0f);  // all white
    const TriangleMesh textured = texture_mesh(surf, views, six_view_poses(), 1.0 / 8);
    for (const auto& c : textured.colors) {
        REQUIRE(c.x == 0.5);
        REQUIRE(c.y == 0.5);
        REQUIRE(c.z == 0.5);
    }
}

TEST_CASE("reconstruct: cube round trip has low chamfer; empty grid rejected") {
    const auto gt = normalize_mesh(centered_cube(0.5, {0.2, 0.4, 0.9}, true));
    const Image grid = render_grid(gt, 64);
    ReconConfig cfg;
    cfg.resolution = 64;
    const TriangleMesh recon = reconstruct(grid, cfg);
    const PointCloud a = sample_surface(recon, 4096, 1);
    const PointCloud b = sample_surface(gt, 4096, 2);
    REQUIRE(chamfer(a, b) < 0.01);

    REQUIRE_THROWS_AS(reconstruct(Image(24, 16, 1.0f), ReconConfig{.resolution = 8}),
                      EmptyReconstruction);
}

TEST_CASE("reconstruct: deterministic for identical grids") {
    const auto gt = centered_cube(0.35, {0.1, 0.8, 0.3}, true);
    const Image grid = render_grid(gt, 32);
    ReconConfig cfg;
    cfg.resolution = 16;
    const TriangleMesh a = reconstruct(grid, cfg);
    const TriangleMesh b = reconstruct(grid, cfg);
    REQUIRE(a.vertices.size() == b.vertices.size());
    REQUIRE(a.faces == b.faces);
    for (size_t i = 0; i < a.vertices.size(); ++i) {
        REQUIRE(a.vertices[i].x == b.vertices[i].x);
        REQUIRE(a.colors[i].x == b.colors[i].x);
    }
}
