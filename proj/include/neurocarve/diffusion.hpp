#pragma once

#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "neurocarve/autodiff.hpp"
#include "neurocarve/encoder.hpp"
#include "neurocarve/errors.hpp"
#include "neurocarve/image.hpp"
#include "neurocarve/nn.hpp"
#include "neurocarve/rng.hpp"

// Pixel-space DDPM over 3x2 view-grid images, conditioned on the encoder's
// [c_f ; F_f] token sequence through cross-attention. LoRA adapters sit on
// the Q and V projections of every attention block; when adapters are
// enabled the base Q/V weights are frozen.

namespace ncarve {

// Linear beta schedule, defined by the canonical 1e-4 -> 0.02 ramp at
// T_ref = 1000 and respaced exactly onto T steps: alpha_bar values are
// subsampled from the reference cumulative product, so the terminal signal
// ratio sqrt(alpha_bar_T) < 0.1 holds at any step count and the betas stay
// in (0,1).
struct NoiseSchedule {
    int T = 100;
    std::vector<double> betas;       // index 0 = timestep 1
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    static NoiseSchedule linear(int T = 100, double beta_start_ref = 1e-4,
                                double beta_end_ref = 0.02, int T_ref = 1000) {
        if (T < 1 || T > T_ref) throw BadTimestep("need 1 <= T <= T_ref");
        std::vector<double> ref_bar(static_cast<size_t>(T_ref) + 1, 1.0);
        for (int k = 1; k <= T_ref; ++k) {
            const double beta =
                beta_start_ref + (beta_end_ref - beta_start_ref) *
                                     static_cast<double>(k - 1) / static_cast<double>(T_ref - 1);
            ref_bar[static_cast<size_t>(k)] = ref_bar[static_cast<size_t>(k - 1)] * (1.0 - beta);
        }
        NoiseSchedule s;
        s.T = T;
        double prev_bar = 1.0;
        for (int t = 1; t <= T; ++t) {
            const int k = static_cast<int>(std::llround(
                static_cast<double>(t) * static_cast<double>(T_ref) / static_cast<double>(T)));
            const double bar = ref_bar[static_cast<size_t>(k)];
            const double beta = 1.0 - bar / prev_bar;
            if (beta <= 0.0 || beta >= 1.0) throw BadTimestep("beta outside (0,1)");
            s.betas.push_back(beta);
            s.alphas.push_back(1.0 - beta);
            s.alpha_bars.push_back(bar);
            prev_bar = bar;
        }
        return s;
    }

    double beta(int t) const { return betas[check(t)]; }
    double alpha(int t) const { return alphas[check(t)]; }
    double alpha_bar(int t) const { return alpha_bars[check(t)]; }

private:
    size_t check(int t) const {
        if (t < 1 || t > T) throw BadTimestep("t=" + std::to_string(t));
        return static_cast<size_t>(t - 1);
    }
};

// q(V_t | V_0) sample: sqrt(ab_t) V_0 + sqrt(1 - ab_t) eps
inline Eigen::ArrayXd forward_diffuse(const Eigen::ArrayXd& v0, int t,
                                      const Eigen::ArrayXd& eps, const NoiseSchedule& s) {
    if (eps.size() != v0.size()) throw ShapeMismatch("forward_diffuse noise shape");
    const double ab = s.alpha_bar(t);
    return std::sqrt(ab) * v0 + std::sqrt(1.0 - ab) * eps;
}

inline Image forward_diffuse(const Image& v0, int t, const Eigen::ArrayXd& eps,
                             const NoiseSchedule& s) {
    Eigen::ArrayXd flat(v0.pix.size());
    for (size_t i = 0; i < v0.pix.size(); ++i) flat[static_cast<long>(i)] = v0.pix[i];
    const Eigen::ArrayXd out = forward_diffuse(flat, t, eps, s);
    Image img(v0.width, v0.height);
    for (size_t i = 0; i < img.pix.size(); ++i)
        img.pix[i] = static_cast<float>(out[static_cast<long>(i)]);
    return img;
}

// --------------------------------------------------------- image <-> tensor

inline ad::Tensor image_to_chw(const Image& img) {
    ad::Tensor t({1, 3, img.height, img.width});
    const long hw = static_cast<long>(img.height) * img.width;
    for (long p = 0; p < hw; ++p)
        for (long c = 0; c < 3; ++c) t.data[c * hw + p] = img.pix[static_cast<size_t>(3 * p + c)];
    return t;
}

inline Image chw_to_image(const ad::Tensor& t, bool clamp01 = true) {
    const long H = t.shape[t.shape.size() - 2], W = t.shape.back();
    Image img(static_cast<int>(W), static_cast<int>(H));
    const long hw = H * W;
    for (long p = 0; p < hw; ++p)
        for (long c = 0; c < 3; ++c) {
            double v = t.data[c * hw + p];
            if (clamp01) v = std::clamp(v, 0.0, 1.0);
            img.pix[static_cast<size_t>(3 * p + c)] = static_cast<float>(v);
        }
    return img;
}

// ---------------------------------------------------------------- denoiser

struct DenoiserConfig {
    int width = 96;   // 3 x view size
    int height = 64;  // 2 x view size
    int base_channels = 32;
    std::vector<int> channel_mults = {1, 2};
    int groups = 8;
    int heads = 4;
    int time_dim = 64;
    int cond_dim = 128;    // encoder embed_dim
    int cond_tokens = 17;  // 1 + M
    long lora_rank = 64;
    double lora_alpha = 64.0;

    void validate() const {
        const int L = static_cast<int>(channel_mults.size());
        if (L < 1) throw ShapeMismatch("need at least one level");
        const int div = 1 << (L - 1);
        if (width % div != 0 || height % div != 0)
            throw ShapeMismatch("grid dims must divide the downsampling factor");
        for (int m : channel_mults)
            if ((base_channels * m) % groups != 0) throw ShapeMismatch("channels % groups");
        if (time_dim % 2 != 0) throw ShapeMismatch("time_dim must be even");
    }

    nlohmann::json to_json() const {
        return {{"width", width},           {"height", height},
                {"base_channels", base_channels}, {"channel_mults", channel_mults},
                {"groups", groups},         {"heads", heads},
                {"time_dim", time_dim},     {"cond_dim", cond_dim},
                {"cond_tokens", cond_tokens}, {"lora_rank", lora_rank},
                {"lora_alpha", lora_alpha}};
    }
    static DenoiserConfig from_json(const nlohmann::json& j) {
        DenoiserConfig c;
        c.width = j.at("width");
        c.height = j.at("height");
        c.base_channels = j.at("base_channels");
        c.channel_mults = j.at("channel_mults").get<std::vector<int>>();
        c.groups = j.at("groups");
        c.heads = j.at("heads");
        c.time_dim = j.at("time_dim");
        c.cond_dim = j.at("cond_dim");
        c.cond_tokens = j.at("cond_tokens");
        c.lora_rank = j.at("lora_rank");
        c.lora_alpha = j.at("lora_alpha");
        return c;
    }
};

inline ad::Tensor sinusoidal_time_embedding(const std::vector<int>& ts, int dim) {
    const long n = static_cast<long>(ts.size());
    ad::Tensor out({n, dim});
    const int half = dim / 2;
    for (long i = 0; i < n; ++i)
        for (int k = 0; k < half; ++k) {
            const double freq =
                std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
            out.data[i * dim + 2 * k] = std::sin(ts[static_cast<size_t>(i)] * freq);
            out.data[i * dim + 2 * k + 1] = std::cos(ts[static_cast<size_t>(i)] * freq);
        }
    return out;
}

namespace diff_detail {

struct Conv {
    int w = -1, b = -1;
    long cin = 0, cout = 0, k = 3, stride = 1, pad = 1;

    static Conv create(nn::ParamStore& ps, const std::string& name, long cin, long cout,
                       Rng& rng, long k = 3, long stride = 1, long pad = 1) {
        Conv c;
        c.cin = cin;
        c.cout = cout;
        c.k = k;
        c.stride = stride;
        c.pad = pad;
        const double std_dev = std::sqrt(2.0 / static_cast<double>(cin * k * k));
        c.w = ps.add(name + ".w", nn::trunc_normal({cout, cin * k * k}, rng, std_dev));
        c.b = ps.add(name + ".b", ad::Tensor({cout}));
        return c;
    }

    ad::VarId operator()(nn::Binding& bind, ad::VarId x, long H, long W) const {
        return bind.tape->conv2d(x, bind(w), bind(b), cin, H, W, cout, k, k, stride, pad);
    }
};

struct GroupNormP {
    int gamma = -1, beta = -1;
    long channels = 0, groups = 0;

    static GroupNormP create(nn::ParamStore& ps, const std::string& name, long channels,
                             long groups) {
        GroupNormP g;
        g.channels = channels;
        g.groups = groups;
        g.gamma = ps.add(name + ".gamma", ad::Tensor::full({channels}, 1.0));
        g.beta = ps.add(name + ".beta", ad::Tensor({channels}));
        return g;
    }

    ad::VarId operator()(nn::Binding& bind, ad::VarId x, long H, long W) const {
        return bind.tape->group_norm(x, bind(gamma), bind(beta), channels, H, W, groups);
    }
};

struct ResBlock {
    GroupNormP gn1, gn2;
    Conv conv1, conv2, skip;
    nn::Linear temb;
    bool has_skip = false;
    long cin = 0, cout = 0;

    static ResBlock create(nn::ParamStore& ps, const std::string& name, long cin, long cout,
                           long groups, long time_dim, Rng& rng) {
        ResBlock r;
        r.cin = cin;
        r.cout = cout;
        r.gn1 = GroupNormP::create(ps, name + ".gn1", cin, groups);
        r.conv1 = Conv::create(ps, name + ".conv1", cin, cout, rng);
        r.temb = nn::Linear::create(ps, name + ".temb", time_dim, cout, rng);
        r.gn2 = GroupNormP::create(ps, name + ".gn2", cout, groups);
        r.conv2 = Conv::create(ps, name + ".conv2", cout, cout, rng);
        if (cin != cout) {
            r.skip = Conv::create(ps, name + ".skip", cin, cout, rng, 1, 1, 0);
            r.has_skip = true;
        }
        return r;
    }

    ad::VarId operator()(nn::Binding& bind, ad::VarId x, ad::VarId t_emb, long H,
                         long W) const {
        ad::Tape& t = *bind.tape;
        ad::VarId h = gn1(bind, x, H, W);
        h = t.silu(h);
        h = conv1(bind, h, H, W);
        h = t.add_nc(h, temb(bind, t_emb), cout, H, W);
        h = gn2(bind, h, H, W);
        h = t.silu(h);
        h = conv2(bind, h, H, W);
        ad::VarId s = has_skip ? skip(bind, x, H, W) : x;
        return t.add(s, h);
    }
};

// self-attention over spatial tokens; LoRA on Q and V
struct SelfAttn {
    GroupNormP gn;
    nn::LoraLinear q, v;
    nn::Linear k, o;
    long channels = 0;
    int heads = 0;

    static SelfAttn create(nn::ParamStore& ps, const std::string& name, long c, long groups,
                           int heads, Rng& rng, long lora_rank, double lora_alpha) {
        SelfAttn a;
        a.channels = c;
        a.heads = heads;
        a.gn = GroupNormP::create(ps, name + ".gn", c, groups);
        const bool base_trainable = lora_rank == 0;
        a.q = nn::LoraLinear::create(ps, name + ".q", c, c, rng, lora_rank, lora_alpha,
                                     base_trainable);
        a.k = nn::Linear::create(ps, name + ".k", c, c, rng);
        a.v = nn::LoraLinear::create(ps, name + ".v", c, c, rng, lora_rank, lora_alpha,
                                     base_trainable);
        a.o = nn::Linear::create(ps, name + ".o", c, c, rng);
        return a;
    }

    // per-sample loop: batched GN, then attention sample by sample
    ad::VarId operator()(nn::Binding& bind, ad::VarId x, long N, long H, long W) const {
        ad::Tape& t = *bind.tape;
        ad::VarId g = gn(bind, x, H, W);
        std::vector<ad::VarId> outs;
        for (long i = 0; i < N; ++i) {
            ad::VarId xi = t.select_batch(g, i, channels * H * W);
            ad::VarId tok = t.chw_to_tokens(xi, channels, H, W);
            ad::VarId attn = t.mha(q(bind, tok), k(bind, tok), v(bind, tok), heads);
            outs.push_back(t.tokens_to_chw(o(bind, attn), channels, H, W));
        }
        return t.add(x, t.stack_batch(outs));
    }
};

// cross-attention: queries from spatial tokens, keys/values from the
// conditioning sequence; LoRA on Q and V
struct CrossAttn {
    GroupNormP gn;
    nn::LoraLinear q, v;
    nn::Linear k, o;
    long channels = 0;
    int heads = 0;

    static CrossAttn create(nn::ParamStore& ps, const std::string& name, long c,
                            long cond_dim, long groups, int heads, Rng& rng, long lora_rank,
                            double lora_alpha) {
        CrossAttn a;
        a.channels = c;
        a.heads = heads;
        a.gn = GroupNormP::create(ps, name + ".gn", c, groups);
        const bool base_trainable = lora_rank == 0;
        a.q = nn::LoraLinear::create(ps, name + ".q", c, c, rng, lora_rank, lora_alpha,
                                     base_trainable);
        a.k = nn::Linear::create(ps, name + ".k", cond_dim, c, rng);
        a.v = nn::LoraLinear::create(ps, name + ".v", cond_dim, c, rng, lora_rank,
                                     lora_alpha, base_trainable);
        a.o = nn::Linear::create(ps, name + ".o", c, c, rng);
        return a;
    }

    ad::VarId operator()(nn::Binding& bind, ad::VarId x, const std::vector<ad::VarId>& conds,
                         long N, long H, long W) const {
        ad::Tape& t = *bind.tape;
        ad::VarId g = gn(bind, x, H, W);
        std::vector<ad::VarId> outs;
        for (long i = 0; i < N; ++i) {
            ad::VarId xi = t.select_batch(g, i, channels * H * W);
            ad::VarId tok = t.chw_to_tokens(xi, channels, H, W);
            ad::VarId attn = t.mha(q(bind, tok), k(bind, conds[static_cast<size_t>(i)]),
                                   v(bind, conds[static_cast<size_t>(i)]), heads);
            outs.push_back(t.tokens_to_chw(o(bind, attn), channels, H, W));
        }
        return t.add(x, t.stack_batch(outs));
    }
};

}  // namespace diff_detail

class Denoiser {
public:
    Denoiser(const DenoiserConfig& cfg, uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(mix_seed(seed, 0xd1ff));
        const long levels = static_cast<long>(cfg_.channel_mults.size());
        time_fc1_ = nn::Linear::create(ps_, "time.fc1", cfg_.time_dim, cfg_.time_dim, rng);
        time_fc2_ = nn::Linear::create(ps_, "time.fc2", cfg_.time_dim, cfg_.time_dim, rng);
        conv_in_ = diff_detail::Conv::create(ps_, "conv_in", 3, ch(0), rng);
        for (long l = 0; l < levels; ++l) {
            down_res_.push_back(diff_detail::ResBlock::create(
                ps_, "down" + std::to_string(l) + ".res", ch(l), ch(l), cfg_.groups,
                cfg_.time_dim, rng));
            if (l > 0)
                down_cross_.push_back(diff_detail::CrossAttn::create(
                    ps_, "down" + std::to_string(l) + ".cross", ch(l), cfg_.cond_dim,
                    cfg_.groups, cfg_.heads, rng, cfg_.lora_rank, cfg_.lora_alpha));
            if (l + 1 < levels)
                downsample_.push_back(diff_detail::Conv::create(
                    ps_, "down" + std::to_string(l) + ".ds", ch(l), ch(l + 1), rng, 3, 2, 1));
        }
        const long cm = ch(levels - 1);
        mid_res1_ = diff_detail::ResBlock::create(ps_, "mid.res1", cm, cm, cfg_.groups,
                                                  cfg_.time_dim, rng);
        mid_self_ = diff_detail::SelfAttn::create(ps_, "mid.self", cm, cfg_.groups, cfg_.heads,
                                                  rng, cfg_.lora_rank, cfg_.lora_alpha);
        mid_cross_ = diff_detail::CrossAttn::create(ps_, "mid.cross", cm, cfg_.cond_dim,
                                                    cfg_.groups, cfg_.heads, rng,
                                                    cfg_.lora_rank, cfg_.lora_alpha);
        mid_res2_ = diff_detail::ResBlock::create(ps_, "mid.res2", cm, cm, cfg_.groups,
                                                  cfg_.time_dim, rng);
        for (long l = levels - 2; l >= 0; --l) {
            upsample_.push_back(diff_detail::Conv::create(
                ps_, "up" + std::to_string(l) + ".us", ch(l + 1), ch(l), rng));
            up_res_.push_back(diff_detail::ResBlock::create(
                ps_, "up" + std::to_string(l) + ".res", ch(l), ch(l), cfg_.groups,
                cfg_.time_dim, rng));
        }
        head_gn_ = diff_detail::GroupNormP::create(ps_, "head.gn", ch(0), cfg_.groups);
        head_conv_ = diff_detail::Conv::create(ps_, "head.conv", ch(0), 3, rng);
    }

    const DenoiserConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }
    bool trained() const { return trained_; }
    void set_trained(bool v) { trained_ = v; }

    // x: [N,3,H,W] (leaf), ts: one timestep per sample, conds: one [1+M, cond_dim]
    // token var per sample
    ad::VarId predict(nn::Binding& bind, ad::VarId x, const std::vector<int>& ts,
                      const std::vector<ad::VarId>& conds) const {
        ad::Tape& t = *bind.tape;
        const long N = static_cast<long>(ts.size());
        if (conds.size() != ts.size()) throw ShapeMismatch("conds vs timesteps");
        for (ad::VarId c : conds)
            if (t.val(c).rows() != cfg_.cond_tokens || t.val(c).cols() != cfg_.cond_dim)
                throw ShapeMismatch("conditioning sequence shape");
        if (t.val(x).shape != std::vector<long>{N, 3, cfg_.height, cfg_.width})
            throw ShapeMismatch("denoiser input shape");

        ad::VarId temb = t.leaf(sinusoidal_time_embedding(ts, cfg_.time_dim), false);
        temb = time_fc2_(bind, t.silu(time_fc1_(bind, temb)));  // [N, time_dim]

        const long levels = static_cast<long>(cfg_.channel_mults.size());
        long H = cfg_.height, W = cfg_.width;
        ad::VarId h = conv_in_(bind, x, H, W);
        std::vector<ad::VarId> skips;
        std::vector<std::pair<long, long>> dims;
        for (long l = 0; l < levels; ++l) {
            h = down_res_[static_cast<size_t>(l)](bind, h, temb, H, W);
            if (l > 0) h = down_cross_[static_cast<size_t>(l - 1)](bind, h, conds, N, H, W);
            skips.push_back(h);
            dims.push_back({H, W});
            if (l + 1 < levels) {
                h = downsample_[static_cast<size_t>(l)](bind, h, H, W);
                H = (H + 1) / 2;
                W = (W + 1) / 2;
            }
        }
        h = mid_res1_(bind, h, temb, H, W);
        h = mid_self_(bind, h, N, H, W);
        h = mid_cross_(bind, h, conds, N, H, W);
        h = mid_res2_(bind, h, temb, H, W);
        for (long l = levels - 2; l >= 0; --l) {
            const size_t ui = static_cast<size_t>(levels - 2 - l);
            h = t.upsample_nearest2(h, ch(l + 1), H, W);
            H = dims[static_cast<size_t>(l)].first;
            W = dims[static_cast<size_t>(l)].second;
            h = upsample_[ui](bind, h, H, W);
            h = t.add(h, skips[static_cast<size_t>(l)]);
            h = up_res_[ui](bind, h, temb, H, W);
        }
        h = head_gn_(bind, h, H, W);
        h = t.silu(h);
        return head_conv_(bind, h, H, W);  // [N,3,H,W]
    }

    // numeric single-sample prediction used by the sampler
    ad::Tensor predict_noise(const ad::Tensor& x_t, int timestep, const ad::Tensor& cond) const {
        ad::Tape t;
        nn::Binding bind(t, const_cast<nn::ParamStore&>(ps_));
        ad::VarId x = t.leaf(x_t, false);
        ad::VarId c = t.leaf(cond, false);
        return t.val(predict(bind, x, {timestep}, {c}));
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw TruncatedPayload("cannot open for write " + path);
        out.write("MVD1", 4);
        nlohmann::json j = cfg_.to_json();
        j["trained"] = trained_;
        const std::string cfg = j.dump();
        detail::write_u32(out, static_cast<uint32_t>(cfg.size()));
        out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
        nn::write_named_tensors(out, ps_);
    }

    static Denoiser load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw TruncatedPayload("cannot open " + path);
        char magic[4];
        in.read(magic, 4);
        if (in.gcount() != 4 || std::memcmp(magic, "MVD1", 4) != 0) throw BadMagic(path);
        const uint32_t len = detail::read_u32(in);
        std::string cfg(len, '\0');
        in.read(cfg.data(), len);
        const nlohmann::json j = nlohmann::json::parse(cfg);
        Denoiser d(DenoiserConfig::from_json(j), 0);
        d.trained_ = j.value("trained", false);
        nn::read_named_tensors(in, d.ps_);
        return d;
    }

private:
    long ch(long level) const {
        return cfg_.base_channels * cfg_.channel_mults[static_cast<size_t>(level)];
    }

    DenoiserConfig cfg_;
    nn::ParamStore ps_;
    nn::Linear time_fc1_, time_fc2_;
    diff_detail::Conv conv_in_, head_conv_;
    std::vector<diff_detail::ResBlock> down_res_, up_res_;
    std::vector<diff_detail::CrossAttn> down_cross_;
    std::vector<diff_detail::Conv> downsample_, upsample_;
    diff_detail::ResBlock mid_res1_, mid_res2_;
    diff_detail::SelfAttn mid_self_;
    diff_detail::CrossAttn mid_cross_;
    diff_detail::GroupNormP head_gn_;
    bool trained_ = false;
};

// ------------------------------------------------------------------ losses

struct DiffusionItem {
    ad::Tensor x0;    // [1,3,H,W]
    ad::Tensor cond;  // [1+M, cond_dim]
    uint64_t key = 0;  // identity for the per-item noise stream
};

using NoisePredictor =
    std::function<ad::Tensor(const ad::Tensor& x_t, int t, const ad::Tensor& cond)>;

// MSE between the injected noise and the prediction at per-item seeded
// uniform timesteps. Seeds are keyed to item identity, so reordering the
// batch cannot change the loss.
inline double diffusion_loss(const std::vector<DiffusionItem>& batch, const NoiseSchedule& s,
                             const NoisePredictor& predict, uint64_t seed) {
    if (batch.empty()) throw EmptyBatch("diffusion_loss");
    double total = 0;
    for (const auto& item : batch) {
        Rng rng(mix_seed(seed, item.key));
        const int t = 1 + static_cast<int>(rng.uniform_index(static_cast<uint64_t>(s.T)));
        Eigen::ArrayXd eps(item.x0.numel());
        for (long i = 0; i < eps.size(); ++i) eps[i] = rng.normal();
        ad::Tensor xt = item.x0;
        xt.data = forward_diffuse(item.x0.data, t, eps, s);
        const ad::Tensor pred = predict(xt, t, item.cond);
        total += (pred.data - eps).square().mean();
    }
    return total / static_cast<double>(batch.size());
}

inline double diffusion_loss(const std::vector<DiffusionItem>& batch, const NoiseSchedule& s,
                             const Denoiser& d, uint64_t seed) {
    return diffusion_loss(
        batch, s,
        [&d](const ad::Tensor& xt, int t, const ad::Tensor& cond) {
            return d.predict_noise(xt, t, cond);
        },
        seed);
}

// Eq-level total: L = L_c + L_Dmv
inline double total_loss(double l_c, double l_dmv) {
    if (!std::isfinite(l_c) || !std::isfinite(l_dmv)) throw NonFinite("total_loss");
    return l_c + l_dmv;
}

// ---------------------------------------------------------------- sampling

// Ancestral DDPM sampling; consumes exactly T denoiser evaluations. Output
// clamped to [0,1].
inline Image sample_multiview(const ad::Tensor& cond, const NoiseSchedule& s, const Denoiser& d,
                              uint64_t seed, int* eval_count = nullptr) {
    if (!d.trained()) throw UntrainedWeights("denoiser checkpoint is not trained");
    const long numel = 3L * d.config().height * d.config().width;
    Rng rng(mix_seed(seed, 0x5a3b1eULL));
    ad::Tensor x({1, 3, d.config().height, d.config().width});
    for (long i = 0; i < numel; ++i) x.data[i] = rng.normal();
    int evals = 0;
    for (int t = s.T; t >= 1; --t) {
        const ad::Tensor eps_hat = d.predict_noise(x, t, cond);
        ++evals;
        const double ab = s.alpha_bar(t);
        const double a = s.alpha(t);
        x.data = (x.data - s.beta(t) / std::sqrt(1.0 - ab) * eps_hat.data) / std::sqrt(a);
        if (t > 1) {
            const double ab_prev = s.alpha_bar(t - 1);
            const double post_var = (1.0 - ab_prev) / (1.0 - ab) * s.beta(t);
            const double sigma = std::sqrt(post_var);
            for (long i = 0; i < numel; ++i) x.data[i] += sigma * rng.normal();
        }
    }
    if (eval_count) *eval_count = evals;
    return chw_to_image(x, true);
}

// ---------------------------------------------------------------- training

struct GeneratorTrainItem {
    std::string trial_path;
    std::string grid_path;
    std::string caption;
    uint64_t key = 0;
};

struct GeneratorTrainConfig {
    int batch_size = 4;
    long steps = 500;
    int frames = 6;
    bool joint = true;        // Eq.-9 joint training; false freezes the encoder
    bool zscore_frames = false;
    nn::OptimizerConfig opt{0.02, 0.9, 1e-4, 500, 0.05};
};

struct GeneratorTrainStats {
    std::vector<double> ldm_history;
    std::vector<double> lc_history;
};

// Single-stage training of denoiser (+ encoder when joint). LoRA-enabled
// attention keeps its base Q/V tensors frozen via the trainable flags.
inline GeneratorTrainStats train_generator(Denoiser& den, NeuroEncoder& enc,
                                           const std::vector<GeneratorTrainItem>& items,
                                           const GeneratorTrainConfig& cfg,
                                           const NoiseSchedule& schedule, uint64_t seed) {
    if (items.empty()) throw EmptyDataset("generator training set is empty");
    const int d_embed = enc.config().embed_dim;
    if (den.config().cond_dim != d_embed ||
        den.config().cond_tokens != enc.config().agg_tokens + 1)
        throw ShapeMismatch("denoiser conditioning dims do not match encoder");
    const ImageEmbedder img_embed(d_embed, mix_seed(seed, 0xc17));
    const TextEmbedder txt_embed(d_embed, mix_seed(seed, 0xc18));

    nn::SgdM den_opt(den.params());
    nn::SgdM enc_opt(enc.params());
    nn::OptimizerConfig ocfg = cfg.opt;
    ocfg.total_steps = cfg.steps;

    GeneratorTrainStats stats;
    std::vector<size_t> order(items.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng order_rng(mix_seed(seed, 0x0dde7));
    order_rng.shuffle(order);
    size_t cursor = 0;
    uint64_t epoch = 0;

    const long H = den.config().height, W = den.config().width;
    for (long step = 0; step < cfg.steps; ++step) {
        ad::Tape tape;
        nn::Binding den_bind(tape, den.params());
        nn::Binding enc_bind(tape, enc.params());

        const long B = std::min<long>(cfg.batch_size, static_cast<long>(items.size()));
        std::vector<ad::VarId> xts, conds, cf_rows;
        std::vector<int> ts;
        ad::Tensor eps_all({B, 3, H, W});
        ad::Tensor cv({B, d_embed}), ct({B, d_embed});
        for (long bi = 0; bi < B; ++bi) {
            if (cursor >= order.size()) {
                cursor = 0;
                ++epoch;
                Rng r(mix_seed(seed, mix_seed(0x0dde7, epoch)));
                r.shuffle(order);
            }
            const size_t item_idx = order[cursor++];
            const GeneratorTrainItem& item = items[item_idx];
            FmriTrial trial = load_trial(item.trial_path);
            const std::vector<FmriFrame> frames =
                cfg.zscore_frames ? zscore_per_voxel(trial.frames) : trial.frames;
            const uint64_t item_seed =
                mix_seed(seed, mix_seed(static_cast<uint64_t>(step), item.key));
            const auto picks = select_frame_indices(static_cast<int>(frames.size()),
                                                    FrameSelect::Train, cfg.frames,
                                                    mix_seed(item_seed, 1));
            std::vector<ad::VarId> cls, toks;
            for (int fi : picks) {
                const FrameEncoding fe =
                    enc.encode_frame(enc_bind, frames[static_cast<size_t>(fi)]);
                cls.push_back(fe.class_tap);
                toks.push_back(fe.tokens_final);
            }
            ad::VarId cfv = enc.mean_class(tape, cls);      // [1, d]
            ad::VarId ffv = enc.aggregate(enc_bind, toks);  // [M, d]
            conds.push_back(tape.concat_rows({cfv, ffv}));
            cf_rows.push_back(cfv);

            // GT grid -> x_t with per-item seeded (t, eps)
            const Image grid = load_ppm(item.grid_path);
            if (grid.width != W || grid.height != H)
                throw ShapeMismatch("grid dims do not match denoiser config");
            const ad::Tensor x0 = image_to_chw(grid);
            Rng noise_rng(mix_seed(item_seed, 3));
            const int t = 1 + static_cast<int>(
                                  noise_rng.uniform_index(static_cast<uint64_t>(schedule.T)));
            ts.push_back(t);
            Eigen::ArrayXd eps(x0.numel());
            for (long i = 0; i < eps.size(); ++i) eps[i] = noise_rng.normal();
            eps_all.data.segment(bi * x0.numel(), x0.numel()) = eps;
            ad::Tensor xt = x0;
            xt.data = forward_diffuse(x0.data, t, eps, schedule);
            xts.push_back(tape.leaf(xt, false));

            const auto views = split_grid(grid);
            Rng view_rng(mix_seed(item_seed, 2));
            cv.data.segment(bi * d_embed, d_embed) =
                img_embed.embed(views[view_rng.uniform_index(6)]).data;
            ct.data.segment(bi * d_embed, d_embed) = txt_embed.embed(item.caption).data;
        }

        ad::VarId x_batch = tape.stack_batch(xts);
        ad::VarId eps_hat = den.predict(den_bind, x_batch, ts, conds);
        ad::VarId l_dmv = tape.mse_to_const(eps_hat, eps_all);
        ad::VarId loss = l_dmv;
        double lc_val = 0;
        if (cfg.joint) {
            ad::VarId cf = tape.concat_rows(cf_rows);
            ad::VarId lt = enc.log_temp(enc_bind);
            ad::VarId l_c = contrastive_total(
                tape, clip_loss(tape, cf, tape.leaf(cv, false), lt),
                clip_loss(tape, cf, tape.leaf(ct, false), lt));
            lc_val = tape.val(l_c).data[0];
            loss = tape.add(l_c, l_dmv);
        }
        const double ldm_val = tape.val(l_dmv).data[0];
        if (!std::isfinite(tape.val(loss).data[0]))
            throw DivergedLoss("step " + std::to_string(step));
        stats.ldm_history.push_back(ldm_val);
        stats.lc_history.push_back(lc_val);

        tape.backward(loss);
        std::vector<ad::Tensor> den_grads;
        for (size_t p = 0; p < den.params().size(); ++p)
            den_grads.push_back(den_bind.grad_of(static_cast<int>(p)));
        den_opt.step(den.params(), den_grads, ocfg, step);
        if (cfg.joint) {
            std::vector<ad::Tensor> enc_grads;
            for (size_t p = 0; p < enc.params().size(); ++p)
                enc_grads.push_back(enc_bind.grad_of(static_cast<int>(p)));
            enc_opt.step(enc.params(), enc_grads, ocfg, step);
            auto& ltv = enc.params()[enc.log_temp_param()].value.data[0];
            ltv = std::clamp(ltv, std::log(1.0 / 100.0), std::log(100.0));
        }
    }
    den.set_trained(true);
    return stats;
}

}  // namespace ncarve
