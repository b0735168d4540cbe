#pragma once

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "neurocarve/autodiff.hpp"
#include "neurocarve/errors.hpp"
#include "neurocarve/fmri_data.hpp"  // little-endian io helpers
#include "neurocarve/rng.hpp"

namespace ncarve::nn {

using ad::Tape;
using ad::Tensor;
using ad::VarId;

// Persistent named parameters; models own one store, bind it into a fresh
// tape per forward pass.
struct ParamStore {
    struct Entry {
        std::string name;
        Tensor value;
        bool trainable = true;
    };
    std::vector<Entry> entries;

    int add(const std::string& name, Tensor t, bool trainable = true) {
        entries.push_back({name, std::move(t), trainable});
        return static_cast<int>(entries.size()) - 1;
    }
    Entry& operator[](int i) { return entries[static_cast<size_t>(i)]; }
    const Entry& operator[](int i) const { return entries[static_cast<size_t>(i)]; }
    size_t size() const { return entries.size(); }

    int find(const std::string& name) const {
        for (size_t i = 0; i < entries.size(); ++i)
            if (entries[i].name == name) return static_cast<int>(i);
        return -1;
    }

    bool all_finite() const {
        for (const auto& e : entries)
            if (!e.value.data.isFinite().all()) return false;
        return true;
    }
};

struct Binding {
    Tape* tape = nullptr;
    ParamStore* store = nullptr;
    std::vector<VarId> ids;

    Binding(Tape& t, ParamStore& s) : tape(&t), store(&s), ids(s.size(), -1) {}

    VarId operator()(int param) {
        if (ids[static_cast<size_t>(param)] < 0)
            ids[static_cast<size_t>(param)] =
                tape->leaf((*store)[param].value, (*store)[param].trainable);
        return ids[static_cast<size_t>(param)];
    }

    // post-backward gradient for a parameter; zeros if it never entered the graph
    Tensor grad_of(int param) const {
        const VarId id = ids[static_cast<size_t>(param)];
        if (id < 0) return Tensor((*store)[param].value.shape);
        return tape->grad(id);
    }
};

// ------------------------------------------------------------------- inits

inline Tensor trunc_normal(const std::vector<long>& shape, Rng& rng, double std_dev = 0.02) {
    Tensor t(shape);
    for (long i = 0; i < t.numel(); ++i) {
        double z;
        do {
            z = rng.normal();
        } while (std::fabs(z) > 2.0);
        t.data[i] = z * std_dev;
    }
    return t;
}

// ------------------------------------------------------------------ layers

struct Linear {
    int w = -1, b = -1;
    long in = 0, out = 0;

    static Linear create(ParamStore& ps, const std::string& name, long in, long out,
                         Rng& rng, double std_dev = 0.02, bool trainable = true) {
        Linear l;
        l.in = in;
        l.out = out;
        l.w = ps.add(name + ".w", trunc_normal({in, out}, rng, std_dev), trainable);
        l.b = ps.add(name + ".b", Tensor({out}), trainable);
        return l;
    }

    VarId operator()(Binding& bind, VarId x) const {
        return bind.tape->add_rowvec(bind.tape->matmul(x, bind(w)), bind(b));
    }
};

struct LayerNormP {
    int gamma = -1, beta = -1;

    static LayerNormP create(ParamStore& ps, const std::string& name, long dim) {
        LayerNormP l;
        l.gamma = ps.add(name + ".gamma", Tensor::full({dim}, 1.0));
        l.beta = ps.add(name + ".beta", Tensor({dim}));
        return l;
    }

    VarId operator()(Binding& bind, VarId x) const {
        return bind.tape->layer_norm(x, bind(gamma), bind(beta));
    }
};

// Linear with an optional low-rank adapter: y = xW + b + (alpha/r) x A B.
// A is seeded-normal, B starts at zero; the base weight can be frozen so only
// the adapter trains.
struct LoraLinear {
    Linear base;
    int A = -1, B = -1;
    long rank = 0;
    double alpha = 0;

    static LoraLinear create(ParamStore& ps, const std::string& name, long in, long out,
                             Rng& rng, long lora_rank, double lora_alpha,
                             bool base_trainable) {
        LoraLinear l;
        l.base = Linear::create(ps, name, in, out, rng, 0.02, base_trainable);
        l.rank = lora_rank;
        l.alpha = lora_alpha;
        if (lora_rank > 0) {
            l.A = ps.add(name + ".lora_a", trunc_normal({in, lora_rank}, rng, 0.02));
            l.B = ps.add(name + ".lora_b", Tensor({lora_rank, out}));
        }
        return l;
    }

    bool enabled() const { return rank > 0; }

    VarId operator()(Binding& bind, VarId x) const {
        VarId y = base(bind, x);
        if (enabled()) {
            VarId u = bind.tape->matmul(x, bind(A));
            VarId v = bind.tape->matmul(u, bind(B));
            y = bind.tape->add(y, bind.tape->scale(v, alpha / static_cast<double>(rank)));
        }
        return y;
    }
};

// Plain (graph-free) low-rank adapted matmul: y = x W + (alpha/r) x A B.
// The base weight is never touched.
struct LoraAdapter {
    Tensor A;  // [d, r]
    Tensor B;  // [r, d_out], zero at init
    double alpha = 1.0;
};

inline Tensor lora_linear(const Tensor& x, const Tensor& w, const LoraAdapter* adapter) {
    if (x.cols() != w.rows()) throw ShapeMismatch("lora_linear x/W dims");
    const long m = x.rows(), k = x.cols(), n = w.cols();
    Tensor y({m, n});
    ad::mat(y, m, n) = ad::cmat(x, m, k) * ad::cmat(w, k, n);
    if (adapter) {
        const long r = adapter->A.cols();
        if (r < 1 || adapter->A.rows() != k || adapter->B.rows() != r ||
            adapter->B.cols() != n)
            throw RankDimMismatch("adapter dims inconsistent with W");
        ad::MatRM u = ad::cmat(x, m, k) * ad::cmat(adapter->A, k, r);
        ad::mat(y, m, n) +=
            (adapter->alpha / static_cast<double>(r)) * (u * ad::cmat(adapter->B, r, n));
    }
    return y;
}

// --------------------------------------------------------------- optimizer

// Gradient descent with momentum, decoupled weight decay and cosine decay of
// the learning rate. lr == 0 must leave the weights bit-identical.
struct OptimizerConfig {
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    long total_steps = 1000;
    double min_lr_frac = 0.01;
};

class SgdM {
public:
    explicit SgdM(const ParamStore& ps) : velocity_(ps.size()) {}

    double lr_at(const OptimizerConfig& cfg, long step) const {
        const double t = cfg.total_steps > 1
                             ? static_cast<double>(step) / static_cast<double>(cfg.total_steps - 1)
                             : 0.0;
        const double cosine = 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, t)));
        return cfg.lr * (cfg.min_lr_frac + (1.0 - cfg.min_lr_frac) * cosine);
    }

    void step(ParamStore& ps, const std::vector<Tensor>& grads, const OptimizerConfig& cfg,
              long step_idx) {
        const double lr = lr_at(cfg, step_idx);
        for (size_t i = 0; i < ps.size(); ++i) {
            auto& e = ps.entries[i];
            if (!e.trainable) continue;
            if (velocity_[i].size() == 0) velocity_[i] = Eigen::ArrayXd::Zero(e.value.numel());
            velocity_[i] = cfg.momentum * velocity_[i] + grads[i].data;
            if (lr != 0.0) {
                e.value.data -= lr * velocity_[i];
                if (cfg.weight_decay != 0.0) e.value.data -= lr * cfg.weight_decay * e.value.data;
            }
        }
    }

private:
    std::vector<Eigen::ArrayXd> velocity_;
};

// ------------------------------------------------------------ checkpoint io

inline void write_named_tensors(std::ostream& out, const ParamStore& ps) {
    detail::write_u32(out, static_cast<uint32_t>(ps.size()));
    for (const auto& e : ps.entries) {
        detail::write_u32(out, static_cast<uint32_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        detail::write_u32(out, static_cast<uint32_t>(e.value.shape.size()));
        for (long d : e.value.shape) detail::write_u32(out, static_cast<uint32_t>(d));
        for (long i = 0; i < e.value.numel(); ++i)
            detail::write_f32(out, static_cast<float>(e.value.data[i]));
    }
}

inline void read_named_tensors(std::istream& in, ParamStore& ps) {
    const uint32_t count = detail::read_u32(in);
    if (count != ps.size()) throw ShapeMismatch("checkpoint tensor count");
    for (auto& e : ps.entries) {
        const uint32_t name_len = detail::read_u32(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (name != e.name) throw ShapeMismatch("checkpoint tensor name: " + name);
        const uint32_t ndim = detail::read_u32(in);
        std::vector<long> shape(ndim);
        for (auto& d : shape) d = static_cast<long>(detail::read_u32(in));
        if (shape != e.value.shape) throw ShapeMismatch("checkpoint tensor shape: " + name);
        for (long i = 0; i < e.value.numel(); ++i)
            e.value.data[i] = static_cast<double>(detail::read_f32(in));
    }
}

// -------------------------------------------------------- finite differences

// Max relative error between analytic gradients and central finite
// differences over sampled entries of every trainable parameter. make_loss
// must be a pure function of the parameter store.
template <class MakeLoss>
double finite_diff_max_rel_error(ParamStore& ps, MakeLoss make_loss, int entries_per_param,
                                 uint64_t seed, double h = 1e-4) {
    Tape tape;
    Binding bind(tape, ps);
    const VarId loss = make_loss(tape, bind);
    tape.backward(loss);

    std::vector<Tensor> analytic;
    analytic.reserve(ps.size());
    for (size_t i = 0; i < ps.size(); ++i) analytic.push_back(bind.grad_of(static_cast<int>(i)));

    auto eval = [&]() {
        Tape t2;
        Binding b2(t2, ps);
        return t2.val(make_loss(t2, b2)).data[0];
    };

    Rng rng(seed);
    double max_rel = 0;
    for (size_t p = 0; p < ps.size(); ++p) {
        if (!ps.entries[p].trainable) continue;
        const long n = ps.entries[p].value.numel();
        const int count = std::min<long>(entries_per_param, n);
        for (int c = 0; c < count; ++c) {
            const long idx = static_cast<long>(rng.uniform_index(static_cast<uint64_t>(n)));
            const double orig = ps.entries[p].value.data[idx];
            ps.entries[p].value.data[idx] = orig + h;
            const double up = eval();
            ps.entries[p].value.data[idx] = orig - h;
            const double dn = eval();
            ps.entries[p].value.data[idx] = orig;
            const double fd = (up - dn) / (2.0 * h);
            const double an = analytic[p].data[idx];
            const double rel = std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1e-6});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace ncarve::nn
