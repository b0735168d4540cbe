#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "neurocarve/autodiff.hpp"
#include "neurocarve/nn.hpp"
#include "neurocarve/rng.hpp"

using namespace ncarve;
using ad::Tape;
using ad::Tensor;
using ad::VarId;
using nn::Binding;
using nn::ParamStore;

namespace {

Tensor random_tensor(std::vector<long> shape, uint64_t seed, double scale = 0.5) {
    Tensor t(std::move(shape));
    Rng rng(seed);
    for (long i = 0; i < t.numel(); ++i) t.data[i] = rng.normal() * scale;
    return t;
}

}  // namespace

TEST_CASE("autodiff: dense path (matmul, bias, gelu, layer_norm) matches finite differences") {
    ParamStore ps;
    ps.add("a", random_tensor({3, 4}, 1));
    ps.add("b", random_tensor({4, 5}, 2));
    ps.add("bias", random_tensor({5}, 3));
    ps.add("gamma", Tensor::full({5}, 1.0));
    ps.add("beta", random_tensor({5}, 4, 0.1));

    auto loss_fn = [](Tape& t, Binding& bind) {
        VarId x = t.matmul(bind(0), bind(1));
        x = t.add_rowvec(x, bind(2));
        x = t.gelu(x);
        x = t.layer_norm(x, bind(3), bind(4));
        x = t.mul(x, x);
        return t.mean_all(x);
    };
    REQUIRE(nn::finite_diff_max_rel_error(ps, loss_fn, 8, 7) < 1e-5);
}

TEST_CASE("autodiff: softmax, l2norm, silu, sub, scale chains") {
    ParamStore ps;
    ps.add("x", random_tensor({4, 6}, 10));
    ps.add("y", random_tensor({4, 6}, 11));

    auto loss_fn = [](Tape& t, Binding& bind) {
        VarId a = t.row_softmax(bind(0));
        VarId b = t.l2norm_rows(bind(1));
        VarId c = t.sub(a, b);
        c = t.silu(c);
        c = t.scale(c, 1.7);
        return t.mean_all(t.mul(c, c));
    };
    REQUIRE(nn::finite_diff_max_rel_error(ps, loss_fn, 10, 13) < 1e-5);
}

TEST_CASE("autodiff: multi-head attention core matches finite differences") {
    ParamStore ps;
    ps.add("q", random_tensor({5, 8}, 20));
    ps.add("k", random_tensor({7, 8}, 21));
    ps.add("v", random_tensor({7, 8}, 22));

    auto loss_fn = [](Tape& t, Binding& bind) {
        VarId o = t.mha(bind(0), bind(1), bind(2), 2);
        return t.mean_all(t.mul(o, o));
    };
    REQUIRE(nn::finite_diff_max_rel_error(ps, loss_fn, 12, 31) < 1e-5);
}

TEST_CASE("autodiff: attention rows sum to one") {
    Tape t;
    const VarId q = t.leaf(random_tensor({4, 8}, 40), false);
    const VarId k = t.leaf(random_tensor({6, 8}, 41), false);
    const VarId s = t.matmul_nt(q, k);
    const VarId sm = t.row_softmax(s);
    for (long i = 0; i < 4; ++i) {
        double row = 0;
        for (long j = 0; j < 6; ++j) row += t.val(sm).data[i * 6 + j];
        REQUIRE(row == Catch::Approx(1.0).margin(1e-6));
    }
}

TEST_CASE("autodiff: conv2d + group_norm + add_nc stack matches finite differences") {
    ParamStore ps;
    ps.add("x", random_tensor({2, 3, 6, 5}, 30));
    ps.add("w", random_tensor({4, 3 * 3 * 3}, 31, 0.2));
    ps.add("b", random_tensor({4}, 32, 0.1));
    ps.add("gamma", Tensor::full({4}, 1.0));
    ps.add("beta", random_tensor({4}, 33, 0.1));
    ps.add("emb", random_tensor({2, 4}, 34, 0.3));

    auto loss_fn = [](Tape& t, Binding& bind) {
        // 6x5 input, k3 s2 p1 -> 3x3
        VarId y = t.conv2d(bind(0), bind(1), bind(2), 3, 6, 5, 4, 3, 3, 2, 1);
        y = t.add_nc(y, bind(5), 4, 3, 3);
        y = t.group_norm(y, bind(3), bind(4), 4, 3, 3, 2);
        y = t.silu(y);
        return t.mean_all(t.mul(y, y));
    };
    REQUIRE(nn::finite_diff_max_rel_error(ps, loss_fn, 10, 37) < 1e-5);
}

TEST_CASE("autodiff: upsample, token reshapes, stack/select, concat, slice") {
    ParamStore ps;
    ps.add("x", random_tensor({1, 2, 3, 3}, 50));
    ps.add("y", random_tensor({1, 2, 6, 6}, 51));

    auto loss_fn = [](Tape& t, Binding& bind) {
        VarId up = t.upsample_nearest2(bind(0), 2, 3, 3);
        VarId s = t.add(up, bind(1));
        VarId tok = t.chw_to_tokens(s, 2, 6, 6);
        VarId head = t.slice_rows(tok, 0, 10);
        VarId tail = t.slice_rows(tok, 10, 26);
        VarId cat = t.concat_rows({head, tail});
        VarId back = t.tokens_to_chw(cat, 2, 6, 6);
        VarId b0 = t.select_batch(back, 0, 2 * 6 * 6);
        VarId st = t.stack_batch({b0, b0});
        return t.mean_all(t.mul(st, st));
    };
    REQUIRE(nn::finite_diff_max_rel_error(ps, loss_fn, 10, 53) < 1e-5);
}

TEST_CASE("autodiff: sym_ce_diag and scale_by_negexp match finite differences") {
    ParamStore ps;
    ps.add("a", random_tensor({4, 8}, 60));
    ps.add("b", random_tensor({4, 8}, 61));
    ps.add("log_temp", Tensor::scalar(std::log(0.07)));

    auto loss_fn = [](Tape& t, Binding& bind) {
        VarId an = t.l2norm_rows(bind(0));
        VarId bn = t.l2norm_rows(bind(1));
        VarId logits = t.matmul_nt(an, bn);
        logits = t.scale_by_negexp(logits, bind(2));
        return t.sym_ce_diag(logits);
    };
    REQUIRE(nn::finite_diff_max_rel_error(ps, loss_fn, 16, 67) < 1e-5);
}

TEST_CASE("autodiff: mse and mean_rows gradient distribute correctly") {
    ParamStore ps;
    ps.add("x", random_tensor({5, 3}, 70));
    const Tensor target = random_tensor({1, 3}, 71);

    auto loss_fn = [&target](Tape& t, Binding& bind) {
        VarId m = t.mean_rows(bind(0));
        return t.mse_to_const(m, target);
    };
    REQUIRE(nn::finite_diff_max_rel_error(ps, loss_fn, 15, 73) < 1e-5);

    // gradient of the mean distributes 1/N to each row
    Tape t;
    Binding bind(t, ps);
    VarId m = t.mean_rows(bind(0));
    VarId loss = t.sum_all(m);
    t.backward(loss);
    const Tensor g = bind.grad_of(0);
    for (long i = 0; i < g.numel(); ++i) REQUIRE(g.data[i] == Catch::Approx(0.2).margin(1e-12));
}

TEST_CASE("autodiff: constant-zero loss yields zero gradients") {
    ParamStore ps;
    ps.add("x", random_tensor({4, 4}, 80));
    Tape t;
    Binding bind(t, ps);
    VarId z = t.scale(bind(0), 0.0);
    VarId loss = t.sum_all(z);
    t.backward(loss);
    const Tensor g = bind.grad_of(0);
    for (long i = 0; i < g.numel(); ++i) REQUIRE(g.data[i] == 0.0);
}

TEST_CASE("autodiff: frozen leaves receive no gradient") {
    ParamStore ps;
    ps.add("w", random_tensor({3, 3}, 90), /*trainable=*/false);
    ps.add("x", random_tensor({2, 3}, 91));
    Tape t;
    Binding bind(t, ps);
    VarId y = t.matmul(bind(1), bind(0));
    t.backward(t.mean_all(t.mul(y, y)));
    REQUIRE(bind.grad_of(0).data.abs().sum() == 0.0);
    REQUIRE(bind.grad_of(1).data.abs().sum() > 0.0);
}

TEST_CASE("optimizer: lr 0 leaves weights bitwise unchanged") {
    ParamStore ps;
    ps.add("w", random_tensor({8}, 100));
    const Eigen::ArrayXd before = ps[0].value.data;
    nn::SgdM opt(ps);
    nn::OptimizerConfig cfg;
    cfg.lr = 0.0;
    std::vector<Tensor> grads = {random_tensor({8}, 101)};
    for (int s = 0; s < 5; ++s) opt.step(ps, grads, cfg, s);
    for (long i = 0; i < 8; ++i) REQUIRE(ps[0].value.data[i] == before[i]);
}

TEST_CASE("optimizer: cosine decay endpoints and descent on a quadratic") {
    ParamStore ps;
    ps.add("w", Tensor::full({2}, 3.0));
    nn::SgdM opt(ps);
    nn::OptimizerConfig cfg;
    cfg.lr = 0.1;
    cfg.momentum = 0.0;
    cfg.weight_decay = 0.0;
    cfg.total_steps = 100;
    REQUIRE(opt.lr_at(cfg, 0) == Catch::Approx(0.1));
    REQUIRE(opt.lr_at(cfg, 99) == Catch::Approx(0.1 * cfg.min_lr_frac));
    // minimize |w|^2
    for (int s = 0; s < 100; ++s) {
        std::vector<Tensor> grads(1);
        grads[0] = Tensor({2}, 2.0 * ps[0].value.data);
        opt.step(ps, grads, cfg, s);
    }
    REQUIRE(ps[0].value.data.abs().maxCoeff() < 1e-3);
}

TEST_CASE("lora linear: zero-init B is exactly the base forward; alpha scales linearly") {
    Rng rng(7);
    ParamStore ps_plain, ps_lora;
    Rng r1(42), r2(42);
    const auto plain = nn::Linear::create(ps_plain, "lin", 6, 4, r1);
    auto lora = nn::LoraLinear::create(ps_lora, "lin", 6, 4, r2, 2, 8.0, false);

    const Tensor x = random_tensor({3, 6}, 8);
    auto run_plain = [&]() {
        Tape t;
        Binding b(t, ps_plain);
        return t.val(plain(b, t.leaf(x, false)));
    };
    auto run_lora = [&]() {
        Tape t;
        Binding b(t, ps_lora);
        return t.val(lora(b, t.leaf(x, false)));
    };
    const Tensor y0 = run_plain();
    const Tensor y1 = run_lora();
    for (long i = 0; i < y0.numel(); ++i) REQUIRE(y0.data[i] == y1.data[i]);  // bitwise

    // make B nonzero, then doubling alpha doubles the adapter contribution
    ps_lora[ps_lora.find("lin.lora_b")].value = random_tensor({2, 4}, 9);
    const Tensor ya = run_lora();
    lora.alpha = 16.0;
    const Tensor yb = run_lora();
    for (long i = 0; i < ya.numel(); ++i) {
        const double contrib_a = ya.data[i] - y0.data[i];
        const double contrib_b = yb.data[i] - y0.data[i];
        REQUIRE(contrib_b == Catch::Approx(2.0 * contrib_a).margin(1e-12));
    }
}

TEST_CASE("lora linear: hand-evaluated rank-1 case") {
    // r=1, A=e1, B=e1^T, alpha=1, x=e1, W=0 -> y = e1
    ParamStore ps;
    Rng rng(1);
    auto lora = nn::LoraLinear::create(ps, "l", 3, 3, rng, 1, 1.0, false);
    ps[ps.find("l.w")].value = Tensor({3, 3});
    ps[ps.find("l.b")].value = Tensor({3});
    Tensor a({3, 1});
    a.data[0] = 1.0;
    ps[ps.find("l.lora_a")].value = a;
    Tensor b({1, 3});
    b.data[0] = 1.0;
    ps[ps.find("l.lora_b")].value = b;
    Tensor x({1, 3});
    x.data[0] = 1.0;
    Tape t;
    Binding bind(t, ps);
    const Tensor y = t.val(lora(bind, t.leaf(x, false)));
    REQUIRE(y.data[0] == 1.0);
    REQUIRE(y.data[1] == 0.0);
    REQUIRE(y.data[2] == 0.0);
}

TEST_CASE("checkpoint tensors: round trip through float32") {
    ParamStore ps;
    ps.add("a", random_tensor({3, 4}, 110));
    ps.add("b", random_tensor({7}, 111), false);
    std::stringstream buf;
    nn::write_named_tensors(buf, ps);

    ParamStore ps2;
    ps2.add("a", Tensor({3, 4}));
    ps2.add("b", Tensor({7}), false);
    nn::read_named_tensors(buf, ps2);
    for (size_t e = 0; e < ps.size(); ++e)
        for (long i = 0; i < ps[static_cast<int>(e)].value.numel(); ++i)
            REQUIRE(ps2[static_cast<int>(e)].value.data[i] ==
                    static_cast<double>(static_cast<float>(ps[static_cast<int>(e)].value.data[i])));
}
