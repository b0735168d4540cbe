#pragma once

#include <cmath>
#include <vector>

#include "neurocarve/errors.hpp"
#include "neurocarve/mesh.hpp"

namespace ncarve {

// Orbit camera looking at the origin. Z is up; azimuth is measured in the
// XY plane from +X, elevation above that plane. The default radius keeps a
// normalized object (half-diagonal 0.866) fully inside a 30-degree frustum:
// tan(15 deg) = 0.268 > 0.866 / (4.5 - 0.866).
struct CameraPose {
    double elevation_deg = 0;
    double azimuth_deg = 0;
    double radius = 4.5;
    double fov_deg = 30.0;
};

// The six-view convention: elevations alternate 20 / -10 degrees, azimuths
// start at 30 degrees and step by 60.
inline std::vector<CameraPose> six_view_poses(double radius = 4.5, double fov_deg = 30.0) {
    std::vector<CameraPose> poses;
    poses.reserve(6);
    for (int i = 0; i < 6; ++i) {
        CameraPose p;
        p.elevation_deg = (i % 2 == 0) ? 20.0 : -10.0;
        p.azimuth_deg = 30.0 + 60.0 * i;
        p.radius = radius;
        p.fov_deg = fov_deg;
        poses.push_back(p);
    }
    return poses;
}

// Precomputed basis for projecting world points into a pixel grid.
struct CameraView {
    Vec3 eye, right, up, forward;
    double focal_px = 0;  // vertical fov drives the focal length
    double cx = 0, cy = 0;
    int width = 0, height = 0;

    // returns (pixel x, pixel y, camera-space depth along the view axis)
    struct Projected {
        double px, py, depth;
    };
    Projected project(const Vec3& p) const {
        const Vec3 d = p - eye;
        const double depth = forward.dot(d);
        const double xc = right.dot(d);
        const double yc = up.dot(d);
        return {cx + focal_px * xc / depth, cy - focal_px * yc / depth, depth};
    }

    Vec3 ray_toward_eye(const Vec3& p) const { return (eye - p).normalized(); }
};

inline CameraView make_camera_view(const CameraPose& pose, int width, int height) {
    const double el = pose.elevation_deg * M_PI / 180.0;
    const double az = pose.azimuth_deg * M_PI / 180.0;
    CameraView v;
    v.eye = {pose.radius * std::cos(el) * std::cos(az),
             pose.radius * std::cos(el) * std::sin(az),
             pose.radius * std::sin(el)};
    v.forward = (Vec3{0, 0, 0} - v.eye).normalized();
    const Vec3 world_up{0, 0, 1};
    v.right = v.forward.cross(world_up).normalized();
    v.up = v.right.cross(v.forward);
    v.width = width;
    v.height = height;
    v.cx = width * 0.5;
    v.cy = height * 0.5;
    v.focal_px = (height * 0.5) / std::tan(pose.fov_deg * M_PI / 360.0);
    return v;
}

}  // namespace ncarve
