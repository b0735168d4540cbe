#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "neurocarve/errors.hpp"
#include "neurocarve/image.hpp"
#include "neurocarve/rng.hpp"

namespace ncarve {

inline double psnr(const Image& x, const Image& y, double peak = 1.0) {
    if (!x.same_dims(y)) throw DimMismatch("psnr dims");
    double mse = 0;
    for (size_t i = 0; i < x.pix.size(); ++i) {
        const double d = static_cast<double>(x.pix[i]) - static_cast<double>(y.pix[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(x.pix.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

// Mean local SSIM over 11x11 Gaussian windows (sigma 1.5), K1=0.01 K2=0.03,
// peak 1.0; computed per channel on all fully interior windows, averaged.
inline double ssim(const Image& x, const Image& y) {
    if (!x.same_dims(y)) throw DimMismatch("ssim dims");
    constexpr int W = 11;
    if (x.width < W || x.height < W) throw TooSmall("ssim needs >= 11x11");
    constexpr double C1 = 0.01 * 0.01;
    constexpr double C2 = 0.03 * 0.03;

    double win[W * W];
    {
        const double sigma = 1.5;
        double sum = 0;
        for (int dy = 0; dy < W; ++dy)
            for (int dx = 0; dx < W; ++dx) {
                const double rx = dx - (W - 1) / 2.0, ry = dy - (W - 1) / 2.0;
                win[dy * W + dx] = std::exp(-(rx * rx + ry * ry) / (2 * sigma * sigma));
                sum += win[dy * W + dx];
            }
        for (double& w : win) w /= sum;
    }

    double total = 0;
    for (int c = 0; c < 3; ++c) {
        double acc = 0;
        long count = 0;
        for (int y0 = 0; y0 + W <= x.height; ++y0) {
            for (int x0 = 0; x0 + W <= x.width; ++x0) {
                double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
                for (int dy = 0; dy < W; ++dy)
                    for (int dx = 0; dx < W; ++dx) {
                        const double w = win[dy * W + dx];
                        const double a = x.at(x0 + dx, y0 + dy, c);
                        const double b = y.at(x0 + dx, y0 + dy, c);
                        mx += w * a;
                        my += w * b;
                        sxx += w * a * a;
                        syy += w * b * b;
                        sxy += w * a * b;
                    }
                const double vx = sxx - mx * mx;
                const double vy = syy - my * my;
                const double cov = sxy - mx * my;
                acc += ((2 * mx * my + C1) * (2 * cov + C2)) /
                       ((mx * mx + my * my + C1) * (vx + vy + C2));
                ++count;
            }
        }
        total += acc / static_cast<double>(count);
    }
    return total / 3.0;
}

// Fixed random 3-scale conv stack standing in for a learned perceptual net.
// Each scale halves resolution; feature vectors are unit-normalized across
// channels per location before comparison. Deterministic given the seed and
// explicitly not comparable to any published LPIPS number.
class PerceptualExtractor {
public:
    static constexpr int kScales = 3;
    static constexpr int kChannels = 8;
    static constexpr int kKernel = 3;

    explicit PerceptualExtractor(uint64_t seed = 29) {
        Rng rng(mix_seed(seed, 0x77cf));
        for (int s = 0; s < kScales; ++s) {
            const int cin = s == 0 ? 3 : kChannels;
            weights_[s].resize(static_cast<size_t>(kChannels) * cin * kKernel * kKernel);
            const double scale = std::sqrt(2.0 / (cin * kKernel * kKernel));
            for (auto& w : weights_[s]) w = rng.normal() * scale;
        }
    }

    struct FeatureMap {
        int width = 0, height = 0, channels = 0;
        std::vector<double> data;  // [c][y][x]
        double at(int c, int x, int y) const {
            return data[(static_cast<size_t>(c) * height + y) * width + x];
        }
        double& at(int c, int x, int y) {
            return data[(static_cast<size_t>(c) * height + y) * width + x];
        }
    };

    std::vector<FeatureMap> features(const Image& img) const {
        FeatureMap cur;
        cur.width = img.width;
        cur.height = img.height;
        cur.channels = 3;
        cur.data.resize(static_cast<size_t>(3) * img.width * img.height);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < img.height; ++y)
                for (int x = 0; x < img.width; ++x) cur.at(c, x, y) = img.at(x, y, c);

        std::vector<FeatureMap> out;
        for (int s = 0; s < kScales; ++s) {
            FeatureMap next = conv_stride2(cur, weights_[s], kChannels);
            out.push_back(normalize_channels(next));
            cur = std::move(next);
        }
        return out;
    }

private:
    static FeatureMap conv_stride2(const FeatureMap& in, const std::vector<double>& w,
                                   int cout) {
        FeatureMap out;
        out.width = std::max(1, in.width / 2);
        out.height = std::max(1, in.height / 2);
        out.channels = cout;
        out.data.assign(static_cast<size_t>(cout) * out.width * out.height, 0.0);
        const int pad = kKernel / 2;
        for (int oc = 0; oc < cout; ++oc) {
            for (int oy = 0; oy < out.height; ++oy) {
                for (int ox = 0; ox < out.width; ++ox) {
                    double acc = 0;
                    for (int ic = 0; ic < in.channels; ++ic)
                        for (int ky = 0; ky < kKernel; ++ky)
                            for (int kx = 0; kx < kKernel; ++kx) {
                                const int iy = oy * 2 + ky - pad;
                                const int ix = ox * 2 + kx - pad;
                                if (iy < 0 || iy >= in.height || ix < 0 || ix >= in.width)
                                    continue;
                                acc += w[((static_cast<size_t>(oc) * in.channels + ic) * kKernel + ky) *
                                             kKernel +
                                         kx] *
                                       in.at(ic, ix, iy);
                            }
                    out.at(oc, ox, oy) = std::tanh(acc);
                }
            }
        }
        return out;
    }

    static FeatureMap normalize_channels(const FeatureMap& in) {
        FeatureMap out = in;
        for (int y = 0; y < in.height; ++y)
            for (int x = 0; x < in.width; ++x) {
                double n2 = 0;
                for (int c = 0; c < in.channels; ++c) n2 += in.at(c, x, y) * in.at(c, x, y);
                const double inv = 1.0 / std::sqrt(n2 + 1e-10);
                for (int c = 0; c < in.channels; ++c) out.at(c, x, y) = in.at(c, x, y) * inv;
            }
        return out;
    }

    std::vector<double> weights_[kScales];
};

// Mean squared distance between multi-scale feature maps.
inline double perceptual_distance(const Image& x, const Image& y,
                                  const PerceptualExtractor& fx) {
    if (!x.same_dims(y)) throw DimMismatch("perceptual dims");
    const auto fa = fx.features(x);
    const auto fb = fx.features(y);
    double total = 0;
    for (size_t s = 0; s < fa.size(); ++s) {
        double acc = 0;
        for (size_t i = 0; i < fa[s].data.size(); ++i) {
            const double d = fa[s].data[i] - fb[s].data[i];
            acc += d * d;
        }
        total += acc / static_cast<double>(fa[s].data.size());
    }
    return total / static_cast<double>(fa.size());
}

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw DimMismatch("cosine dims");
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double denom = std::sqrt(na) * std::sqrt(nb);
    return denom > 0 ? dot / denom : 0.0;
}

// N-way top-K retrieval accuracy by cosine similarity. Each trial draws n-1
// distractors without replacement; similarity ties count against the
// candidate.
inline double nway_topk(const std::vector<double>& recon_feature,
                        const std::vector<std::vector<double>>& gt_features,
                        size_t correct_index, int n, int k, int trials, uint64_t seed) {
    if (correct_index >= gt_features.size()) throw NotEnoughCandidates("bad correct_index");
    if (n < 2 || static_cast<size_t>(n) > gt_features.size())
        throw NotEnoughCandidates("n out of range");
    if (k < 1 || k >= n) throw NotEnoughCandidates("k out of range");

    std::vector<size_t> pool;
    for (size_t i = 0; i < gt_features.size(); ++i)
        if (i != correct_index) pool.push_back(i);

    std::vector<double> sims(gt_features.size());
    for (size_t i = 0; i < gt_features.size(); ++i)
        sims[i] = cosine_similarity(recon_feature, gt_features[i]);
    const double sim_correct = sims[correct_index];

    Rng rng(seed);
    int hits = 0;
    std::vector<size_t> order(pool.size());
    for (int t = 0; t < trials; ++t) {
        for (size_t i = 0; i < pool.size(); ++i) order[i] = pool[i];
        rng.shuffle(order);
        int beaten_by = 0;
        for (int d = 0; d < n - 1; ++d)
            if (sims[order[d]] >= sim_correct) ++beaten_by;
        if (beaten_by < k) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(trials);
}

}  // namespace ncarve
