#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "neurocarve/errors.hpp"

namespace ncarve {

// RGB raster, values in [0,1], row-major, channel-interleaved.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<float> pix;  // size = width * height * 3

    Image() = default;
    Image(int w, int h, float fill = 0.0f)
        : width(w), height(h), pix(static_cast<size_t>(w) * h * 3, fill) {}

    float& at(int x, int y, int c) {
        return pix[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
    float at(int x, int y, int c) const {
        return pix[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
    size_t size() const { return pix.size(); }
    bool same_dims(const Image& o) const {
        return width == o.width && height == o.height;
    }
};

namespace detail {

inline int ppm_next_token(std::istream& in, std::string& tok) {
    tok.clear();
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {  // comment runs to end of line
            while ((c = in.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (!std::isspace(c)) break;
    }
    if (c == EOF) return -1;
    tok.push_back(static_cast<char>(c));
    while ((c = in.get()) != EOF && !std::isspace(c)) tok.push_back(static_cast<char>(c));
    return 0;
}

}  // namespace detail

// Binary PPM (P6, maxval 255). Bytes map to [0,1] as v/255.
inline Image load_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw TruncatedPayload("cannot open " + path);
    std::string tok;
    if (detail::ppm_next_token(in, tok) != 0) throw TruncatedPayload(path);
    if (tok != "P6") throw UnsupportedFormat("expected P6, got '" + tok + "'");
    int dims[3];
    for (int i = 0; i < 3; ++i) {
        if (detail::ppm_next_token(in, tok) != 0) throw TruncatedPayload(path);
        try {
            dims[i] = std::stoi(tok);
        } catch (const std::exception&) {
            throw UnsupportedFormat("bad PPM header token '" + tok + "'");
        }
    }
    if (dims[0] <= 0 || dims[1] <= 0) throw UnsupportedFormat("non-positive dims");
    if (dims[2] != 255) throw UnsupportedFormat("only maxval 255 supported");
    // exactly one whitespace byte separates header and payload; token reader
    // already consumed it
    Image img(dims[0], dims[1]);
    const size_t n = static_cast<size_t>(dims[0]) * dims[1] * 3;
    std::vector<unsigned char> buf(n);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n) throw TruncatedPayload(path);
    for (size_t i = 0; i < n; ++i) img.pix[i] = static_cast<float>(buf[i]) / 255.0f;
    return img;
}

inline void save_ppm(const Image& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw TruncatedPayload("cannot open for write " + path);
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> buf(img.pix.size());
    for (size_t i = 0; i < img.pix.size(); ++i) {
        float v = std::clamp(img.pix[i], 0.0f, 1.0f);
        buf[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
}

// Box-filter (area average) resize; exact for integer ratios and well defined
// for fractional ones, e.g. 512 -> 320.
inline Image resize_area(const Image& src, int nw, int nh) {
    if (nw <= 0 || nh <= 0) throw DimMismatch("resize to non-positive dims");
    Image dst(nw, nh);
    const double sx = static_cast<double>(src.width) / nw;
    const double sy = static_cast<double>(src.height) / nh;
    for (int y = 0; y < nh; ++y) {
        const double y0 = y * sy, y1 = (y + 1) * sy;
        const int iy0 = static_cast<int>(std::floor(y0));
        const int iy1 = std::min(src.height, static_cast<int>(std::ceil(y1)));
        for (int x = 0; x < nw; ++x) {
            const double x0 = x * sx, x1 = (x + 1) * sx;
            const int ix0 = static_cast<int>(std::floor(x0));
            const int ix1 = std::min(src.width, static_cast<int>(std::ceil(x1)));
            double acc[3] = {0, 0, 0};
            double area = 0;
            for (int yy = iy0; yy < iy1; ++yy) {
                const double hy = std::min<double>(y1, yy + 1) - std::max<double>(y0, yy);
                for (int xx = ix0; xx < ix1; ++xx) {
                    const double wx = std::min<double>(x1, xx + 1) - std::max<double>(x0, xx);
                    const double w = hy * wx;
                    for (int c = 0; c < 3; ++c) acc[c] += w * src.at(xx, yy, c);
                    area += w;
                }
            }
            for (int c = 0; c < 3; ++c)
                dst.at(x, y, c) = static_cast<float>(acc[c] / area);
        }
    }
    return dst;
}

}  // namespace ncarve
