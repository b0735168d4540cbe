#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "neurocarve/camera.hpp"
#include "neurocarve/errors.hpp"
#include "neurocarve/image.hpp"
#include "neurocarve/mesh.hpp"

namespace ncarve {

struct RasterResult {
    Image color;                 // white background
    std::vector<double> depth;   // camera-space distance; +inf where uncovered
    std::vector<uint8_t> mask;   // 1 where a triangle covers the pixel center
    int width = 0, height = 0;

    bool mask_at(int x, int y) const { return mask[static_cast<size_t>(y) * width + x] != 0; }
    double depth_at(int x, int y) const { return depth[static_cast<size_t>(y) * width + x]; }
};

inline double edge_fn(double ax, double ay, double bx, double by, double px, double py) {
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

// Z-buffered software rasterizer. Pixel centers at (x+0.5, y+0.5), inclusive
// point-in-triangle test, colors interpolated with screen-space barycentrics,
// depth with perspective-correct 1/z. Ties on depth keep the lower face index.
inline RasterResult rasterize(const TriangleMesh& mesh, const CameraPose& pose,
                              int width, int height) {
    double bound = 0;
    for (const auto& v : mesh.vertices) bound = std::max(bound, v.norm());
    if (pose.radius <= bound)
        throw DegenerateCamera("camera radius inside mesh bounding sphere");

    RasterResult r;
    r.width = width;
    r.height = height;
    r.color = Image(width, height, 1.0f);
    r.depth.assign(static_cast<size_t>(width) * height, std::numeric_limits<double>::infinity());
    r.mask.assign(static_cast<size_t>(width) * height, 0);

    const CameraView cam = make_camera_view(pose, width, height);
    const Vec3 gray{0.5, 0.5, 0.5};

    for (size_t fi = 0; fi < mesh.faces.size(); ++fi) {
        const auto& f = mesh.faces[fi];
        CameraView::Projected p[3];
        bool behind = false;
        for (int k = 0; k < 3; ++k) {
            p[k] = cam.project(mesh.vertices[f[k]]);
            if (p[k].depth <= 1e-9) behind = true;
        }
        if (behind) continue;

        const double area2 = edge_fn(p[0].px, p[0].py, p[1].px, p[1].py, p[2].px, p[2].py);
        if (area2 == 0.0) continue;
        const double sgn = area2 > 0 ? 1.0 : -1.0;
        const double inv_area = 1.0 / std::fabs(area2);

        const double minx = std::min({p[0].px, p[1].px, p[2].px});
        const double maxx = std::max({p[0].px, p[1].px, p[2].px});
        const double miny = std::min({p[0].py, p[1].py, p[2].py});
        const double maxy = std::max({p[0].py, p[1].py, p[2].py});
        const int x0 = std::max(0, static_cast<int>(std::floor(minx - 0.5)));
        const int x1 = std::min(width - 1, static_cast<int>(std::ceil(maxx - 0.5)));
        const int y0 = std::max(0, static_cast<int>(std::floor(miny - 0.5)));
        const int y1 = std::min(height - 1, static_cast<int>(std::ceil(maxy - 0.5)));

        const Vec3 c0 = mesh.has_colors() ? mesh.colors[f[0]] : gray;
        const Vec3 c1 = mesh.has_colors() ? mesh.colors[f[1]] : gray;
        const Vec3 c2 = mesh.has_colors() ? mesh.colors[f[2]] : gray;

        for (int y = y0; y <= y1; ++y) {
            const double py = y + 0.5;
            for (int x = x0; x <= x1; ++x) {
                const double px = x + 0.5;
                const double e0 = sgn * edge_fn(p[1].px, p[1].py, p[2].px, p[2].py, px, py);
                const double e1 = sgn * edge_fn(p[2].px, p[2].py, p[0].px, p[0].py, px, py);
                const double e2 = sgn * edge_fn(p[0].px, p[0].py, p[1].px, p[1].py, px, py);
                if (e0 < 0 || e1 < 0 || e2 < 0) continue;
                const double w0 = e0 * inv_area;
                const double w1 = e1 * inv_area;
                const double w2 = e2 * inv_area;
                const double inv_z = w0 / p[0].depth + w1 / p[1].depth + w2 / p[2].depth;
                const double z = 1.0 / inv_z;
                const size_t idx = static_cast<size_t>(y) * width + x;
                if (z < r.depth[idx]) {
                    r.depth[idx] = z;
                    r.mask[idx] = 1;
                    r.color.at(x, y, 0) = static_cast<float>(w0 * c0.x + w1 * c1.x + w2 * c2.x);
                    r.color.at(x, y, 1) = static_cast<float>(w0 * c0.y + w1 * c1.y + w2 * c2.y);
                    r.color.at(x, y, 2) = static_cast<float>(w0 * c0.z + w1 * c1.z + w2 * c2.z);
                }
            }
        }
    }
    return r;
}

}  // namespace ncarve
