#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "neurocarve/autodiff.hpp"
#include "neurocarve/errors.hpp"
#include "neurocarve/fmri_data.hpp"
#include "neurocarve/image.hpp"
#include "neurocarve/nn.hpp"
#include "neurocarve/rng.hpp"
#include "neurocarve/view_grid.hpp"

// Multi-frame fMRI encoder. Frames pass independently through a ViT-style
// transformer; the class token is read out at an intermediate (tap) block and
// averaged across frames, while the final-block patch tokens of all frames
// are fused by a cross-attention aggregation module into a fixed-length token
// sequence. The class path trains contrastively against toy image/text
// embedders; the token sequence conditions the multi-view generator.

namespace ncarve {

struct EncoderConfig {
    int input_size = 256;
    int patch_size = 16;
    int embed_dim = 128;
    int depth = 8;
    int heads = 4;
    int tap_layer = 4;  // 1-based block index whose class token is read out
    int agg_tokens = 16;
    int max_frames = 10;
    int mlp_ratio = 4;
    double temperature_init = 0.07;

    void validate() const {
        if (input_size % patch_size != 0) throw ShapeMismatch("input_size % patch_size != 0");
        if (embed_dim % heads != 0) throw ShapeMismatch("embed_dim % heads != 0");
        if (tap_layer < 1 || tap_layer > depth) throw ShapeMismatch("tap_layer out of range");
        if (agg_tokens < 1 || max_frames < 1) throw ShapeMismatch("bad encoder config");
    }
    int patches_per_side() const { return input_size / patch_size; }
    int n_patches() const { return patches_per_side() * patches_per_side(); }

    nlohmann::json to_json() const {
        return {{"input_size", input_size},   {"patch_size", patch_size},
                {"embed_dim", embed_dim},     {"depth", depth},
                {"heads", heads},             {"tap_layer", tap_layer},
                {"agg_tokens", agg_tokens},   {"max_frames", max_frames},
                {"mlp_ratio", mlp_ratio},     {"temperature_init", temperature_init}};
    }
    static EncoderConfig from_json(const nlohmann::json& j) {
        EncoderConfig c;
        c.input_size = j.at("input_size");
        c.patch_size = j.at("patch_size");
        c.embed_dim = j.at("embed_dim");
        c.depth = j.at("depth");
        c.heads = j.at("heads");
        c.tap_layer = j.at("tap_layer");
        c.agg_tokens = j.at("agg_tokens");
        c.max_frames = j.at("max_frames");
        c.mlp_ratio = j.at("mlp_ratio");
        c.temperature_init = j.at("temperature_init");
        return c;
    }
};

namespace enc_detail {

struct TransformerBlock {
    nn::LayerNormP ln1, ln2;
    nn::Linear q, k, v, o, fc1, fc2;

    static TransformerBlock create(nn::ParamStore& ps, const std::string& name, long d,
                                   long mlp_hidden, Rng& rng) {
        TransformerBlock b;
        b.ln1 = nn::LayerNormP::create(ps, name + ".ln1", d);
        b.q = nn::Linear::create(ps, name + ".q", d, d, rng);
        b.k = nn::Linear::create(ps, name + ".k", d, d, rng);
        b.v = nn::Linear::create(ps, name + ".v", d, d, rng);
        b.o = nn::Linear::create(ps, name + ".o", d, d, rng);
        b.ln2 = nn::LayerNormP::create(ps, name + ".ln2", d);
        b.fc1 = nn::Linear::create(ps, name + ".fc1", d, mlp_hidden, rng);
        b.fc2 = nn::Linear::create(ps, name + ".fc2", mlp_hidden, d, rng);
        return b;
    }

    ad::VarId operator()(nn::Binding& bind, ad::VarId x, int heads) const {
        ad::Tape& t = *bind.tape;
        ad::VarId n1 = ln1(bind, x);
        ad::VarId attn = t.mha(q(bind, n1), k(bind, n1), v(bind, n1), heads);
        x = t.add(x, o(bind, attn));
        ad::VarId n2 = ln2(bind, x);
        ad::VarId h = fc2(bind, t.gelu(fc1(bind, n2)));
        return t.add(x, h);
    }
};

}  // namespace enc_detail

struct FrameEncoding {
    ad::VarId class_tap = -1;    // [1, d] class token at the tap block
    ad::VarId tokens_tap = -1;   // [P, d] patch tokens at the tap block
    ad::VarId tokens_final = -1; // [P, d] patch tokens after the final norm
};

class NeuroEncoder {
public:
    NeuroEncoder(const EncoderConfig& cfg, uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(mix_seed(seed, 0xe4c0de));
        const long d = cfg_.embed_dim;
        const long patch_dim = static_cast<long>(cfg_.patch_size) * cfg_.patch_size;
        patch_proj_ = nn::Linear::create(ps_, "patch_proj", patch_dim, d, rng);
        class_token_ = ps_.add("class_token", nn::trunc_normal({1, d}, rng));
        pos_emb_ = ps_.add("pos_emb", nn::trunc_normal({cfg_.n_patches() + 1, d}, rng));
        for (int i = 0; i < cfg_.depth; ++i)
            blocks_.push_back(enc_detail::TransformerBlock::create(
                ps_, "block" + std::to_string(i), d, d * cfg_.mlp_ratio, rng));
        final_ln_ = nn::LayerNormP::create(ps_, "final_ln", d);

        temporal_emb_ = ps_.add("temporal_emb", nn::trunc_normal({cfg_.max_frames, d}, rng));
        agg_queries_ = ps_.add("agg_queries", nn::trunc_normal({cfg_.agg_tokens, d}, rng));
        agg_lnq_ = nn::LayerNormP::create(ps_, "agg.lnq", d);
        agg_lnkv_ = nn::LayerNormP::create(ps_, "agg.lnkv", d);
        agg_q_ = nn::Linear::create(ps_, "agg.q", d, d, rng);
        agg_k_ = nn::Linear::create(ps_, "agg.k", d, d, rng);
        agg_v_ = nn::Linear::create(ps_, "agg.v", d, d, rng);
        agg_o_ = nn::Linear::create(ps_, "agg.o", d, d, rng);
        agg_ln2_ = nn::LayerNormP::create(ps_, "agg.ln2", d);
        agg_fc1_ = nn::Linear::create(ps_, "agg.fc1", d, d * cfg_.mlp_ratio, rng);
        agg_fc2_ = nn::Linear::create(ps_, "agg.fc2", d * cfg_.mlp_ratio, d, rng);

        log_temp_ = ps_.add("log_temp", ad::Tensor::scalar(std::log(cfg_.temperature_init)));
    }

    const EncoderConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }

    // flatten non-overlapping patches, row-major patch order, row-major pixels
    ad::Tensor patchify(const FmriFrame& frame) const {
        if (frame.height != cfg_.input_size || frame.width != cfg_.input_size)
            throw ShapeMismatch("frame dims do not match encoder config");
        const int ps = cfg_.patch_size;
        const int side = cfg_.patches_per_side();
        ad::Tensor out({static_cast<long>(side) * side, static_cast<long>(ps) * ps});
        long r = 0;
        for (int py = 0; py < side; ++py)
            for (int px = 0; px < side; ++px, ++r)
                for (int y = 0; y < ps; ++y)
                    for (int x = 0; x < ps; ++x)
                        out.data[r * ps * ps + y * ps + x] =
                            frame.at(px * ps + x, py * ps + y);
        return out;
    }

    FrameEncoding encode_frame(nn::Binding& bind, const FmriFrame& frame) const {
        ad::Tape& t = *bind.tape;
        const long P = cfg_.n_patches();
        ad::VarId patches = t.leaf(patchify(frame), false);
        ad::VarId x = patch_proj_(bind, patches);                     // [P, d]
        x = t.concat_rows({bind(class_token_), x});                   // [P+1, d]
        x = t.add(x, bind(pos_emb_));
        FrameEncoding out;
        for (int i = 0; i < cfg_.depth; ++i) {
            x = blocks_[static_cast<size_t>(i)](bind, x, cfg_.heads);
            if (i + 1 == cfg_.tap_layer) {
                out.class_tap = t.slice_rows(x, 0, 1);
                out.tokens_tap = t.slice_rows(x, 1, P);
            }
        }
        x = final_ln_(bind, x);
        out.tokens_final = t.slice_rows(x, 1, P);
        return out;
    }

    // M learned queries cross-attend over the concatenation of all frames'
    // final tokens; each frame's tokens carry a learned temporal embedding.
    ad::VarId aggregate(nn::Binding& bind, const std::vector<ad::VarId>& frame_tokens) const {
        if (frame_tokens.empty()) throw EmptyList("aggregate needs >= 1 frame");
        if (static_cast<int>(frame_tokens.size()) > cfg_.max_frames)
            throw TooManyFrames(std::to_string(frame_tokens.size()));
        ad::Tape& t = *bind.tape;
        std::vector<ad::VarId> stamped;
        for (size_t i = 0; i < frame_tokens.size(); ++i) {
            ad::VarId emb = t.slice_rows(bind(temporal_emb_), static_cast<long>(i), 1);
            stamped.push_back(t.add_rowvec(frame_tokens[i], t.reshape(emb, {cfg_.embed_dim})));
        }
        ad::VarId kv = t.concat_rows(stamped);  // [N*P, d]
        ad::VarId q0 = bind(agg_queries_);      // [M, d]
        ad::VarId qn = agg_lnq_(bind, q0);
        ad::VarId kvn = agg_lnkv_(bind, kv);
        ad::VarId attn = t.mha(agg_q_(bind, qn), agg_k_(bind, kvn), agg_v_(bind, kvn),
                               cfg_.heads);
        ad::VarId x = t.add(q0, agg_o_(bind, attn));
        ad::VarId h = agg_fc2_(bind, t.gelu(agg_fc1_(bind, agg_ln2_(bind, x))));
        return t.add(x, h);  // [M, d]
    }

    ad::VarId mean_class(ad::Tape& t, const std::vector<ad::VarId>& class_tokens) const {
        if (class_tokens.empty()) throw EmptyList("mean_class needs >= 1 token");
        return t.mean_rows(t.concat_rows(class_tokens));
    }

    ad::VarId log_temp(nn::Binding& bind) const { return bind(log_temp_); }
    int log_temp_param() const { return log_temp_; }

    // conditioning sequence [c_f ; F_f] for the generator, numeric
    struct Features {
        ad::Tensor class_feat;  // [1, d]
        ad::Tensor tokens;      // [M, d]
        ad::Tensor cond() const {
            ad::Tensor out({tokens.rows() + 1, tokens.cols()});
            out.data.segment(0, tokens.cols()) = class_feat.data;
            out.data.segment(tokens.cols(), tokens.numel()) = tokens.data;
            return out;
        }
    };

    Features features(const std::vector<FmriFrame>& frames) const {
        ad::Tape t;
        nn::Binding bind(t, const_cast<nn::ParamStore&>(ps_));
        std::vector<ad::VarId> cls, toks;
        for (const auto& f : frames) {
            const FrameEncoding fe = encode_frame(bind, f);
            cls.push_back(fe.class_tap);
            toks.push_back(fe.tokens_final);
        }
        Features out;
        out.class_feat = t.val(mean_class(t, cls));
        out.tokens = t.val(aggregate(bind, toks));
        return out;
    }

    // tap-layer patch tokens for CAM probes, numeric [P, d]
    ad::Tensor tap_tokens(const FmriFrame& frame) const {
        ad::Tape t;
        nn::Binding bind(t, const_cast<nn::ParamStore&>(ps_));
        return t.val(encode_frame(bind, frame).tokens_tap);
    }

    // ------------------------------------------------------------ checkpoint

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw TruncatedPayload("cannot open for write " + path);
        out.write("NAE1", 4);
        const std::string cfg = cfg_.to_json().dump();
        detail::write_u32(out, static_cast<uint32_t>(cfg.size()));
        out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
        nn::write_named_tensors(out, ps_);
    }

    static NeuroEncoder load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw TruncatedPayload("cannot open " + path);
        char magic[4];
        in.read(magic, 4);
        if (in.gcount() != 4 || std::memcmp(magic, "NAE1", 4) != 0) throw BadMagic(path);
        const uint32_t len = detail::read_u32(in);
        std::string cfg(len, '\0');
        in.read(cfg.data(), len);
        NeuroEncoder enc(EncoderConfig::from_json(nlohmann::json::parse(cfg)), 0);
        nn::read_named_tensors(in, enc.ps_);
        return enc;
    }

private:
    EncoderConfig cfg_;
    nn::ParamStore ps_;
    nn::Linear patch_proj_;
    int class_token_ = -1, pos_emb_ = -1;
    std::vector<enc_detail::TransformerBlock> blocks_;
    nn::LayerNormP final_ln_;
    int temporal_emb_ = -1, agg_queries_ = -1;
    nn::LayerNormP agg_lnq_, agg_lnkv_, agg_ln2_;
    nn::Linear agg_q_, agg_k_, agg_v_, agg_o_, agg_fc1_, agg_fc2_;
    int log_temp_ = -1;
};

// plain-vector mean of class tokens (the Eq.-level arithmetic, usable
// outside any graph)
inline std::vector<double> mean_class_token(const std::vector<std::vector<double>>& tokens) {
    if (tokens.empty()) throw EmptyList("mean_class_token");
    std::vector<double> out(tokens.front().size(), 0.0);
    for (const auto& t : tokens) {
        if (t.size() != out.size()) throw DimMismatch("token dims differ");
        for (size_t i = 0; i < out.size(); ++i) out[i] += t[i];
    }
    for (auto& v : out) v /= static_cast<double>(tokens.size());
    return out;
}

// ------------------------------------------------------------ toy embedders

namespace enc_detail {

// Seeded dense projection followed by L2 normalization. The trailing input
// element is reserved as a constant bias so no input maps to the zero vector.
class RandomProjection {
public:
    RandomProjection(int out_dim, int in_dim, uint64_t seed) : out_dim_(out_dim), in_dim_(in_dim) {
        Rng rng(seed);
        proj_.resize(static_cast<size_t>(out_dim) * in_dim);
        const double scale = 1.0 / std::sqrt(static_cast<double>(in_dim));
        for (auto& w : proj_) w = rng.normal() * scale;
    }

    ad::Tensor apply(const std::vector<double>& v) const {
        ad::Tensor out({1, static_cast<long>(out_dim_)});
        for (int o = 0; o < out_dim_; ++o) {
            double acc = 0;
            for (int i = 0; i < in_dim_; ++i)
                acc += proj_[static_cast<size_t>(o) * in_dim_ + i] * v[static_cast<size_t>(i)];
            out.data[o] = acc;
        }
        out.data /= std::sqrt(out.data.square().sum());
        return out;
    }

private:
    int out_dim_, in_dim_;
    std::vector<double> proj_;
};

}  // namespace enc_detail

// Seeded random projection of an 8x8 area-downsampled image, L2-normalized.
// Stands in for a pretrained vision tower; deterministic and training-free.
class ImageEmbedder {
public:
    ImageEmbedder(int embed_dim, uint64_t seed)
        : proj_(embed_dim, kInputDim, mix_seed(seed, 0x136bedULL)) {}

    ad::Tensor embed(const Image& img) const {
        const Image small = resize_area(img, 8, 8);
        std::vector<double> v(kInputDim, 1.0);  // last element stays 1 as a bias
        for (int i = 0; i < 192; ++i)
            v[static_cast<size_t>(i)] = static_cast<double>(small.pix[static_cast<size_t>(i)]);
        return proj_.apply(v);
    }

private:
    static constexpr int kInputDim = 8 * 8 * 3 + 1;
    enc_detail::RandomProjection proj_;
};

// Seeded hashed bag-of-tokens projection of caption text, L2-normalized.
class TextEmbedder {
public:
    TextEmbedder(int embed_dim, uint64_t seed)
        : proj_(embed_dim, kBuckets + 1, mix_seed(seed, 0x7e47bedULL)) {}

    ad::Tensor embed(const std::string& caption) const {
        std::vector<double> counts(kBuckets + 1, 0.0);
        counts[kBuckets] = 1.0;  // bias bucket keeps empty captions nonzero
        std::string tok;
        auto flush = [&]() {
            if (tok.empty()) return;
            counts[fnv1a(tok) % kBuckets] += 1.0;
            tok.clear();
        };
        for (char c : caption) {
            if (std::isalnum(static_cast<unsigned char>(c)))
                tok.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
            else
                flush();
        }
        flush();
        return proj_.apply(counts);
    }

private:
    static uint64_t fnv1a(const std::string& s) {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        return h;
    }
    static constexpr int kBuckets = 512;
    enc_detail::RandomProjection proj_;
};

// ------------------------------------------------------------------ losses

// Symmetric InfoNCE over cosine logits divided by the temperature.
inline ad::VarId clip_loss(ad::Tape& t, ad::VarId a, ad::VarId b, ad::VarId log_temp) {
    if (t.val(a).shape != t.val(b).shape) throw DimMismatch("clip_loss batch shapes");
    ad::VarId logits = t.matmul_nt(t.l2norm_rows(a), t.l2norm_rows(b));
    return t.sym_ce_diag(t.scale_by_negexp(logits, log_temp));
}

// L_c = L_fv + L_ft
inline ad::VarId contrastive_total(ad::Tape& t, ad::VarId l_fv, ad::VarId l_ft) {
    return t.add(l_fv, l_ft);
}

// ---------------------------------------------------------------- training

struct EncoderTrainItem {
    std::string trial_path;
    std::string grid_path;  // six-view PPM grid of the same object
    std::string caption;
};

struct EncoderTrainConfig {
    int batch_size = 16;
    long steps = 400;
    int frames = 6;
    bool zscore_frames = false;
    nn::OptimizerConfig opt{0.05, 0.9, 1e-4, 400, 0.05};
};

struct TrainStats {
    std::vector<double> loss_history;
};

inline TrainStats train_encoder(NeuroEncoder& enc, const std::vector<EncoderTrainItem>& items,
                                const EncoderTrainConfig& cfg, uint64_t seed) {
    if (items.empty()) throw EmptyDataset("encoder training set is empty");
    const int d = enc.config().embed_dim;
    const ImageEmbedder img_embed(d, mix_seed(seed, 0xc17));
    const TextEmbedder txt_embed(d, mix_seed(seed, 0xc18));
    nn::SgdM opt(enc.params());
    nn::OptimizerConfig ocfg = cfg.opt;
    ocfg.total_steps = cfg.steps;

    TrainStats stats;
    std::vector<size_t> order(items.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    size_t cursor = 0;
    uint64_t epoch = 0;
    Rng order_rng(mix_seed(seed, 0x07de7));
    order_rng.shuffle(order);

    for (long step = 0; step < cfg.steps; ++step) {
        ad::Tape tape;
        nn::Binding bind(tape, enc.params());
        std::vector<ad::VarId> cf_rows;
        const long B = std::min<long>(cfg.batch_size, static_cast<long>(items.size()));
        ad::Tensor cv({B, d}), ct({B, d});
        for (long bi = 0; bi < B; ++bi) {
            if (cursor >= order.size()) {
                cursor = 0;
                ++epoch;
                Rng r(mix_seed(seed, mix_seed(0x07de7, epoch)));
                r.shuffle(order);
            }
            const size_t item_idx = order[cursor++];
            const EncoderTrainItem& item = items[item_idx];
            FmriTrial trial = load_trial(item.trial_path);
            const std::vector<FmriFrame> frames =
                cfg.zscore_frames ? zscore_per_voxel(trial.frames) : trial.frames;
            const uint64_t item_seed =
                mix_seed(seed, mix_seed(static_cast<uint64_t>(step), item_idx));
            const auto picks = select_frame_indices(static_cast<int>(frames.size()),
                                                    FrameSelect::Train, cfg.frames,
                                                    mix_seed(item_seed, 1));

            std::vector<ad::VarId> cls;
            for (int fi : picks) {
                const FrameEncoding fe = enc.encode_frame(bind, frames[static_cast<size_t>(fi)]);
                cls.push_back(fe.class_tap);
            }
            cf_rows.push_back(enc.mean_class(tape, cls));

            const Image grid = load_ppm(item.grid_path);
            const auto views = split_grid(grid);
            Rng view_rng(mix_seed(item_seed, 2));
            const ad::Tensor v = img_embed.embed(views[view_rng.uniform_index(6)]);
            const ad::Tensor tx = txt_embed.embed(item.caption);
            cv.data.segment(bi * d, d) = v.data;
            ct.data.segment(bi * d, d) = tx.data;
        }
        ad::VarId cf = tape.concat_rows(cf_rows);  // [B, d]
        ad::VarId lt = enc.log_temp(bind);
        ad::VarId l_fv = clip_loss(tape, cf, tape.leaf(cv, false), lt);
        ad::VarId l_ft = clip_loss(tape, cf, tape.leaf(ct, false), lt);
        ad::VarId loss = contrastive_total(tape, l_fv, l_ft);
        const double loss_val = tape.val(loss).data[0];
        if (!std::isfinite(loss_val)) throw DivergedLoss("step " + std::to_string(step));
        stats.loss_history.push_back(loss_val);

        tape.backward(loss);
        std::vector<ad::Tensor> grads;
        grads.reserve(enc.params().size());
        for (size_t p = 0; p < enc.params().size(); ++p)
            grads.push_back(bind.grad_of(static_cast<int>(p)));
        opt.step(enc.params(), grads, ocfg, step);
        // keep the temperature in its clamp range
        auto& ltv = enc.params()[enc.log_temp_param()].value.data[0];
        ltv = std::clamp(ltv, std::log(1.0 / 100.0), std::log(100.0));
    }
    return stats;
}

}  // namespace ncarve
