#pragma once

#include <array>
#include <vector>

#include "neurocarve/camera.hpp"
#include "neurocarve/errors.hpp"
#include "neurocarve/image.hpp"

namespace ncarve {

// Six posed views tiled into a 3x2 grid image (row-major view order).
struct ViewGrid {
    Image image;  // width = 3w, height = 2h
    std::vector<CameraPose> poses;
};

inline Image compose_grid(const std::array<Image, 6>& views) {
    const int w = views[0].width, h = views[0].height;
    for (const auto& v : views)
        if (v.width != w || v.height != h) throw DimMismatch("view sizes differ");
    Image grid(3 * w, 2 * h);
    for (int i = 0; i < 6; ++i) {
        const int ox = (i % 3) * w;
        const int oy = (i / 3) * h;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c)
                    grid.at(ox + x, oy + y, c) = views[i].at(x, y, c);
    }
    return grid;
}

inline std::array<Image, 6> split_grid(const Image& grid) {
    if (grid.width % 3 != 0 || grid.height % 2 != 0)
        throw DimMismatch("grid dims must divide 3x2");
    const int w = grid.width / 3, h = grid.height / 2;
    std::array<Image, 6> views;
    for (int i = 0; i < 6; ++i) {
        views[i] = Image(w, h);
        const int ox = (i % 3) * w;
        const int oy = (i / 3) * h;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c)
                    views[i].at(x, y, c) = grid.at(ox + x, oy + y, c);
    }
    return views;
}

}  // namespace ncarve
