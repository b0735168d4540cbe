#pragma once

#include <cassert>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "neurocarve/errors.hpp"

// Reverse-mode autodiff on dynamically shaped double tensors. A Tape owns
// the nodes of one forward pass; backward() replays the recorded closures in
// reverse creation order. Parameters live outside the tape and are bound as
// leaves per pass, so a fresh tape per training step is the expected usage.
//
// Everything is double precision; gradients are validated against central
// finite differences in the test suite, which is the reason for the handful
// of fused ops (attention, conv, norms) with hand-written adjoints.

namespace ncarve::ad {

struct Tensor {
    std::vector<long> shape;
    Eigen::ArrayXd data;

    Tensor() = default;
    explicit Tensor(std::vector<long> s) : shape(std::move(s)) {
        data = Eigen::ArrayXd::Zero(numel_of(shape));
    }
    Tensor(std::vector<long> s, Eigen::ArrayXd d) : shape(std::move(s)), data(std::move(d)) {}

    static long numel_of(const std::vector<long>& s) {
        long n = 1;
        for (long d : s) n *= d;
        return n;
    }
    long numel() const { return data.size(); }
    long rows() const { return shape.empty() ? 1 : shape[0]; }
    long cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double& operator()(long i) { return data[i]; }
    double operator()(long i) const { return data[i]; }

    static Tensor zeros(std::vector<long> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<long> s, double v) {
        Tensor t(std::move(s));
        t.data.setConstant(v);
        return t;
    }
    static Tensor scalar(double v) { return Tensor({1}, Eigen::ArrayXd::Constant(1, v)); }
};

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapC = Eigen::Map<const MatRM>;

inline MapC cmat(const Tensor& t, long r, long c) { return MapC(t.data.data(), r, c); }
inline MapC mat(const Tensor& t, long r, long c) { return MapC(t.data.data(), r, c); }
inline MapM mat(Tensor& t, long r, long c) { return MapM(t.data.data(), r, c); }

using VarId = int;

class Tape {
public:
    struct Node {
        Tensor val;
        Tensor grad;
        bool requires_grad = false;
        std::function<void()> back;  // accumulate into parent grads
    };

    VarId leaf(Tensor value, bool requires_grad) {
        Node n;
        n.val = std::move(value);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<VarId>(nodes_.size()) - 1;
    }

    const Tensor& val(VarId id) const { return nodes_[id].val; }
    Tensor& grad(VarId id) { return nodes_[id].grad; }
    bool requires_grad(VarId id) const { return nodes_[id].requires_grad; }
    size_t size() const { return nodes_.size(); }

    void backward(VarId loss) {
        if (loss < 0 || static_cast<size_t>(loss) >= nodes_.size())
            throw GraphNotRecorded("loss node out of range");
        if (nodes_[loss].val.numel() != 1) throw ShapeMismatch("loss must be scalar");
        for (auto& n : nodes_) {
            n.grad = Tensor(n.val.shape);  // zero
        }
        nodes_[loss].grad.data[0] = 1.0;
        for (int i = loss; i >= 0; --i) {
            if (nodes_[i].back && nodes_[i].requires_grad) nodes_[i].back();
        }
        ran_backward_ = true;
    }

    bool ran_backward() const { return ran_backward_; }

    // ------------------------------------------------------------- simple ops

    VarId add(VarId a, VarId b) {
        check_same_shape(a, b, "add");
        VarId out = make(nodes_[a].val.shape, nodes_[a].val.data + nodes_[b].val.data,
                         {a, b});
        nodes_[out].back = [this, a, b, out] {
            acc(a, nodes_[out].grad.data);
            acc(b, nodes_[out].grad.data);
        };
        return out;
    }

    VarId sub(VarId a, VarId b) {
        check_same_shape(a, b, "sub");
        VarId out = make(nodes_[a].val.shape, nodes_[a].val.data - nodes_[b].val.data,
                         {a, b});
        nodes_[out].back = [this, a, b, out] {
            acc(a, nodes_[out].grad.data);
            acc(b, -nodes_[out].grad.data);
        };
        return out;
    }

    VarId mul(VarId a, VarId b) {
        check_same_shape(a, b, "mul");
        VarId out = make(nodes_[a].val.shape, nodes_[a].val.data * nodes_[b].val.data,
                         {a, b});
        nodes_[out].back = [this, a, b, out] {
            acc(a, nodes_[out].grad.data * nodes_[b].val.data);
            acc(b, nodes_[out].grad.data * nodes_[a].val.data);
        };
        return out;
    }

    VarId scale(VarId a, double c) {
        VarId out = make(nodes_[a].val.shape, nodes_[a].val.data * c, {a});
        nodes_[out].back = [this, a, out, c] { acc(a, nodes_[out].grad.data * c); };
        return out;
    }

    // y = x * exp(-s), s a scalar node (used for temperature-scaled logits)
    VarId scale_by_negexp(VarId x, VarId s) {
        if (nodes_[s].val.numel() != 1) throw ShapeMismatch("scale_by_negexp scalar");
        const double f = std::exp(-nodes_[s].val.data[0]);
        VarId out = make(nodes_[x].val.shape, nodes_[x].val.data * f, {x, s});
        nodes_[out].back = [this, x, s, out, f] {
            acc(x, nodes_[out].grad.data * f);
            Eigen::ArrayXd ds(1);
            ds[0] = -(nodes_[out].grad.data * nodes_[x].val.data).sum() * f;
            acc(s, ds);
        };
        return out;
    }

    // bias broadcast over rows: X[m,n] + b[n]
    VarId add_rowvec(VarId x, VarId b) {
        const long m = nodes_[x].val.rows(), n = nodes_[x].val.cols();
        if (nodes_[b].val.numel() != n) throw ShapeMismatch("add_rowvec");
        Tensor out(nodes_[x].val.shape);
        MapM o = mat(out, m, n);
        o = mat(nodes_[x].val, m, n);
        o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(nodes_[b].val.data.data(), n);
        VarId id = make_tensor(std::move(out), {x, b});
        nodes_[id].back = [this, x, b, id, m, n] {
            acc(x, nodes_[id].grad.data);
            Eigen::RowVectorXd gb = mat(nodes_[id].grad, m, n).colwise().sum();
            acc(b, Eigen::ArrayXd(Eigen::Map<Eigen::ArrayXd>(gb.data(), n)));
        };
        return id;
    }

    VarId matmul(VarId a, VarId b) {
        const long m = nodes_[a].val.rows(), k = nodes_[a].val.cols();
        const long k2 = nodes_[b].val.rows(), n = nodes_[b].val.cols();
        if (k != k2) throw ShapeMismatch("matmul inner dims");
        Tensor out({m, n});
        mat(out, m, n) = mat(nodes_[a].val, m, k) * mat(nodes_[b].val, k, n);
        VarId id = make_tensor(std::move(out), {a, b});
        nodes_[id].back = [this, a, b, id, m, k, n] {
            MapC go = cmat(nodes_[id].grad, m, n);
            if (nodes_[a].requires_grad) {
                Tensor ga({m, k});
                mat(ga, m, k) = go * mat(nodes_[b].val, k, n).transpose();
                acc(a, ga.data);
            }
            if (nodes_[b].requires_grad) {
                Tensor gb({k, n});
                mat(gb, k, n) = mat(nodes_[a].val, m, k).transpose() * go;
                acc(b, gb.data);
            }
        };
        return id;
    }

    // a [m,k] x b[n,k]^T -> [m,n]
    VarId matmul_nt(VarId a, VarId b) {
        const long m = nodes_[a].val.rows(), k = nodes_[a].val.cols();
        const long n = nodes_[b].val.rows();
        if (nodes_[b].val.cols() != k) throw ShapeMismatch("matmul_nt dims");
        Tensor out({m, n});
        mat(out, m, n) = mat(nodes_[a].val, m, k) * mat(nodes_[b].val, n, k).transpose();
        VarId id = make_tensor(std::move(out), {a, b});
        nodes_[id].back = [this, a, b, id, m, k, n] {
            MapC go = cmat(nodes_[id].grad, m, n);
            if (nodes_[a].requires_grad) {
                Tensor ga({m, k});
                mat(ga, m, k) = go * mat(nodes_[b].val, n, k);
                acc(a, ga.data);
            }
            if (nodes_[b].requires_grad) {
                Tensor gb({n, k});
                mat(gb, n, k) = go.transpose() * mat(nodes_[a].val, m, k);
                acc(b, gb.data);
            }
        };
        return id;
    }

    VarId concat_rows(const std::vector<VarId>& parts) {
        if (parts.empty()) throw EmptyList("concat_rows");
        const long n = nodes_[parts[0]].val.cols();
        long m = 0;
        for (VarId p : parts) {
            if (nodes_[p].val.cols() != n) throw ShapeMismatch("concat_rows cols");
            m += nodes_[p].val.rows();
        }
        Tensor out({m, n});
        long r = 0;
        for (VarId p : parts) {
            const long pr = nodes_[p].val.rows();
            mat(out, m, n).middleRows(r, pr) = mat(nodes_[p].val, pr, n);
            r += pr;
        }
        VarId id = make_tensor(std::move(out), parts);
        nodes_[id].back = [this, parts, id, m, n] {
            long r2 = 0;
            for (VarId p : parts) {
                const long pr = nodes_[p].val.rows();
                if (nodes_[p].requires_grad) {
                    Tensor g({pr, n});
                    mat(g, pr, n) = mat(nodes_[id].grad, m, n).middleRows(r2, pr);
                    acc(p, g.data);
                }
                r2 += pr;
            }
        };
        return id;
    }

    VarId slice_rows(VarId x, long r0, long count) {
        const long m = nodes_[x].val.rows(), n = nodes_[x].val.cols();
        if (r0 < 0 || r0 + count > m) throw ShapeMismatch("slice_rows range");
        Tensor out({count, n});
        mat(out, count, n) = mat(nodes_[x].val, m, n).middleRows(r0, count);
        VarId id = make_tensor(std::move(out), {x});
        nodes_[id].back = [this, x, id, r0, count, m, n] {
            Tensor g({m, n});
            mat(g, m, n).middleRows(r0, count) = mat(nodes_[id].grad, count, n);
            acc(x, g.data);
        };
        return id;
    }

    VarId mean_rows(VarId x) {
        const long m = nodes_[x].val.rows(), n = nodes_[x].val.cols();
        Tensor out({1, n});
        mat(out, 1, n) = mat(nodes_[x].val, m, n).colwise().mean();
        VarId id = make_tensor(std::move(out), {x});
        nodes_[id].back = [this, x, id, m, n] {
            Tensor g({m, n});
            mat(g, m, n) = (1.0 / m) * mat(nodes_[id].grad, 1, n).replicate(m, 1);
            acc(x, g.data);
        };
        return id;
    }

    VarId mean_all(VarId x) {
        const long n = nodes_[x].val.numel();
        VarId id = make({1}, Eigen::ArrayXd::Constant(1, nodes_[x].val.data.mean()), {x});
        nodes_[id].back = [this, x, id, n] {
            acc(x, Eigen::ArrayXd::Constant(n, nodes_[id].grad.data[0] / n));
        };
        return id;
    }

    VarId sum_all(VarId x) {
        const long n = nodes_[x].val.numel();
        VarId id = make({1}, Eigen::ArrayXd::Constant(1, nodes_[x].val.data.sum()), {x});
        nodes_[id].back = [this, x, id, n] {
            acc(x, Eigen::ArrayXd::Constant(n, nodes_[id].grad.data[0]));
        };
        return id;
    }

    VarId gelu(VarId x) {
        const Eigen::ArrayXd& v = nodes_[x].val.data;
        Eigen::ArrayXd y(v.size());
        for (long i = 0; i < v.size(); ++i)
            y[i] = 0.5 * v[i] * (1.0 + std::erf(v[i] * M_SQRT1_2));
        VarId id = make(nodes_[x].val.shape, std::move(y), {x});
        nodes_[id].back = [this, x, id] {
            const Eigen::ArrayXd& v2 = nodes_[x].val.data;
            Eigen::ArrayXd d(v2.size());
            for (long i = 0; i < v2.size(); ++i) {
                const double cdf = 0.5 * (1.0 + std::erf(v2[i] * M_SQRT1_2));
                const double pdf = std::exp(-0.5 * v2[i] * v2[i]) / std::sqrt(2.0 * M_PI);
                d[i] = cdf + v2[i] * pdf;
            }
            acc(x, nodes_[id].grad.data * d);
        };
        return id;
    }

    VarId silu(VarId x) {
        const Eigen::ArrayXd& v = nodes_[x].val.data;
        Eigen::ArrayXd sig = 1.0 / (1.0 + (-v).exp());
        VarId id = make(nodes_[x].val.shape, v * sig, {x});
        nodes_[id].back = [this, x, id, sig] {
            const Eigen::ArrayXd& v2 = nodes_[x].val.data;
            acc(x, nodes_[id].grad.data * (sig * (1.0 + v2 * (1.0 - sig))));
        };
        return id;
    }

    // row-wise softmax over the last dim of a [m,n] tensor
    VarId row_softmax(VarId x) {
        const long m = nodes_[x].val.rows(), n = nodes_[x].val.cols();
        Tensor out({m, n});
        for (long i = 0; i < m; ++i) {
            Eigen::ArrayXd row = nodes_[x].val.data.segment(i * n, n);
            row -= row.maxCoeff();
            row = row.exp();
            out.data.segment(i * n, n) = row / row.sum();
        }
        VarId id = make_tensor(std::move(out), {x});
        nodes_[id].back = [this, x, id, m, n] {
            Eigen::ArrayXd g(m * n);
            for (long i = 0; i < m; ++i) {
                const auto s = nodes_[id].val.data.segment(i * n, n);
                const auto go = nodes_[id].grad.data.segment(i * n, n);
                const double dot = (go * s).sum();
                g.segment(i * n, n) = s * (go - dot);
            }
            acc(x, g);
        };
        return id;
    }

    // row-wise L2 normalization
    VarId l2norm_rows(VarId x) {
        const long m = nodes_[x].val.rows(), n = nodes_[x].val.cols();
        Tensor out({m, n});
        std::vector<double> norms(static_cast<size_t>(m));
        for (long i = 0; i < m; ++i) {
            const auto row = nodes_[x].val.data.segment(i * n, n);
            norms[static_cast<size_t>(i)] = std::sqrt(row.square().sum() + 1e-24);
            out.data.segment(i * n, n) = row / norms[static_cast<size_t>(i)];
        }
        VarId id = make_tensor(std::move(out), {x});
        nodes_[id].back = [this, x, id, m, n, norms] {
            Eigen::ArrayXd g(m * n);
            for (long i = 0; i < m; ++i) {
                const auto y = nodes_[id].val.data.segment(i * n, n);
                const auto go = nodes_[id].grad.data.segment(i * n, n);
                const double dot = (go * y).sum();
                g.segment(i * n, n) = (go - y * dot) / norms[static_cast<size_t>(i)];
            }
            acc(x, g);
        };
        return id;
    }

    // per-row layer norm with learned gamma/beta of size n
    VarId layer_norm(VarId x, VarId gamma, VarId beta, double eps = 1e-5) {
        const long m = nodes_[x].val.rows(), n = nodes_[x].val.cols();
        if (nodes_[gamma].val.numel() != n || nodes_[beta].val.numel() != n)
            throw ShapeMismatch("layer_norm params");
        Tensor out({m, n});
        Tensor xhat({m, n});
        std::vector<double> inv_std(static_cast<size_t>(m));
        for (long i = 0; i < m; ++i) {
            const auto row = nodes_[x].val.data.segment(i * n, n);
            const double mu = row.mean();
            const double var = (row - mu).square().sum() / n;
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[static_cast<size_t>(i)] = is;
            xhat.data.segment(i * n, n) = (row - mu) * is;
            out.data.segment(i * n, n) =
                xhat.data.segment(i * n, n) * nodes_[gamma].val.data + nodes_[beta].val.data;
        }
        VarId id = make_tensor(std::move(out), {x, gamma, beta});
        auto xh = std::make_shared<Tensor>(std::move(xhat));
        nodes_[id].back = [this, x, gamma, beta, id, m, n, inv_std, xh] {
            Eigen::ArrayXd ggamma = Eigen::ArrayXd::Zero(n);
            Eigen::ArrayXd gbeta = Eigen::ArrayXd::Zero(n);
            Eigen::ArrayXd gx(m * n);
            for (long i = 0; i < m; ++i) {
                const auto go = nodes_[id].grad.data.segment(i * n, n);
                const auto xhr = xh->data.segment(i * n, n);
                ggamma += go * xhr;
                gbeta += go;
                const Eigen::ArrayXd dxhat = go * nodes_[gamma].val.data;
                const double mean_dxhat = dxhat.mean();
                const double mean_dxhat_xhat = (dxhat * xhr).mean();
                gx.segment(i * n, n) =
                    inv_std[static_cast<size_t>(i)] * (dxhat - mean_dxhat - xhr * mean_dxhat_xhat);
            }
            acc(x, gx);
            acc(gamma, ggamma);
            acc(beta, gbeta);
        };
        return id;
    }

    // fused multi-head attention core (no projections): softmax(QK^T/sqrt(dh))V
    VarId mha(VarId q, VarId k, VarId v, int heads) {
        const long nq = nodes_[q].val.rows(), d = nodes_[q].val.cols();
        const long nk = nodes_[k].val.rows();
        if (nodes_[k].val.cols() != d || nodes_[v].val.cols() != d ||
            nodes_[v].val.rows() != nk)
            throw ShapeMismatch("mha dims");
        if (d % heads != 0) throw ShapeMismatch("mha head split");
        const long dh = d / heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

        Tensor out({nq, d});
        auto softmaxes = std::make_shared<std::vector<MatRM>>();
        softmaxes->reserve(static_cast<size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            MatRM qs = mat(nodes_[q].val, nq, d).middleCols(h * dh, dh);
            MatRM ks = mat(nodes_[k].val, nk, d).middleCols(h * dh, dh);
            MatRM vs = mat(nodes_[v].val, nk, d).middleCols(h * dh, dh);
            MatRM scores = qs * ks.transpose() * scale;
            for (long i = 0; i < nq; ++i) {
                Eigen::ArrayXd row = scores.row(i).array();
                row -= row.maxCoeff();
                row = row.exp();
                scores.row(i) = (row / row.sum()).matrix();
            }
            mat(out, nq, d).middleCols(h * dh, dh) = scores * vs;
            softmaxes->push_back(std::move(scores));
        }
        VarId id = make_tensor(std::move(out), {q, k, v});
        nodes_[id].back = [this, q, k, v, id, heads, nq, nk, d, dh, scale, softmaxes] {
            Tensor gq({nq, d}), gk({nk, d}), gv({nk, d});
            for (int h = 0; h < heads; ++h) {
                const MatRM& s = (*softmaxes)[static_cast<size_t>(h)];
                MatRM go = mat(nodes_[id].grad, nq, d).middleCols(h * dh, dh);
                MatRM qs = mat(nodes_[q].val, nq, d).middleCols(h * dh, dh);
                MatRM ks = mat(nodes_[k].val, nk, d).middleCols(h * dh, dh);
                MatRM vs = mat(nodes_[v].val, nk, d).middleCols(h * dh, dh);
                MatRM ds = go * vs.transpose();  // [nq, nk]
                mat(gv, nk, d).middleCols(h * dh, dh) = s.transpose() * go;
                // softmax backward per row
                MatRM dz(nq, nk);
                for (long i = 0; i < nq; ++i) {
                    const Eigen::ArrayXd srow = s.row(i).array();
                    const Eigen::ArrayXd dsrow = ds.row(i).array();
                    const double dot = (srow * dsrow).sum();
                    dz.row(i) = (srow * (dsrow - dot)).matrix();
                }
                mat(gq, nq, d).middleCols(h * dh, dh) = dz * ks * scale;
                mat(gk, nk, d).middleCols(h * dh, dh) = dz.transpose() * qs * scale;
            }
            acc(q, gq.data);
            acc(k, gk.data);
            acc(v, gv.data);
        };
        return id;
    }

    // symmetric InfoNCE over a square logit matrix with diagonal targets
    VarId sym_ce_diag(VarId logits) {
        const long n = nodes_[logits].val.rows();
        if (nodes_[logits].val.cols() != n) throw ShapeMismatch("sym_ce_diag square");
        MapC l = cmat(nodes_[logits].val, n, n);
        auto row_sm = std::make_shared<MatRM>(n, n);
        auto col_sm = std::make_shared<MatRM>(n, n);
        double loss = 0;
        for (long i = 0; i < n; ++i) {
            Eigen::ArrayXd row = l.row(i).array();
            const double mx = row.maxCoeff();
            const Eigen::ArrayXd ex = (row - mx).exp();
            loss += -(l(i, i) - mx) + std::log(ex.sum());
            row_sm->row(i) = (ex / ex.sum()).matrix();
        }
        for (long j = 0; j < n; ++j) {
            Eigen::ArrayXd col = l.col(j).array();
            const double mx = col.maxCoeff();
            const Eigen::ArrayXd ex = (col - mx).exp();
            loss += -(l(j, j) - mx) + std::log(ex.sum());
            col_sm->col(j) = (ex / ex.sum()).matrix();
        }
        loss *= 0.5 / static_cast<double>(n);
        VarId id = make({1}, Eigen::ArrayXd::Constant(1, loss), {logits});
        nodes_[id].back = [this, logits, id, n, row_sm, col_sm] {
            const double g = nodes_[id].grad.data[0] * 0.5 / static_cast<double>(n);
            Tensor gl({n, n});
            MapM m = mat(gl, n, n);
            m = (*row_sm + *col_sm) * g;
            for (long i = 0; i < n; ++i) m(i, i) -= 2.0 * g;
            acc(logits, gl.data);
        };
        return id;
    }

    // mean squared error against a constant target
    VarId mse_to_const(VarId pred, const Tensor& target) {
        if (nodes_[pred].val.numel() != target.numel()) throw ShapeMismatch("mse dims");
        const long n = nodes_[pred].val.numel();
        const Eigen::ArrayXd diff = nodes_[pred].val.data - target.data;
        VarId id = make({1}, Eigen::ArrayXd::Constant(1, diff.square().mean()), {pred});
        nodes_[id].back = [this, pred, id, diff, n] {
            acc(pred, nodes_[id].grad.data[0] * 2.0 / n * diff);
        };
        return id;
    }

    // ------------------------------------------------------------ conv / 4d

    // X [N,C,H,W], weight [OC, C*kh*kw], bias [OC]; stride s, zero padding p
    VarId conv2d(VarId x, VarId w, VarId b, long C, long H, long W, long OC, long kh,
                 long kw, long stride, long pad) {
        const long N = nodes_[x].val.numel() / (C * H * W);
        const long OH = (H + 2 * pad - kh) / stride + 1;
        const long OW = (W + 2 * pad - kw) / stride + 1;
        if (nodes_[w].val.numel() != OC * C * kh * kw) throw ShapeMismatch("conv2d weight");
        if (nodes_[b].val.numel() != OC) throw ShapeMismatch("conv2d bias");

        const long K = C * kh * kw, P = OH * OW;
        Tensor out({N, OC, OH, OW});
        auto cols = std::make_shared<std::vector<MatRM>>();
        cols->reserve(static_cast<size_t>(N));
        MapC wm = cmat(nodes_[w].val, OC, K);
        for (long s = 0; s < N; ++s) {
            MatRM col = MatRM::Zero(K, P);
            const double* xp = nodes_[x].val.data.data() + s * C * H * W;
            for (long c = 0; c < C; ++c)
                for (long ky = 0; ky < kh; ++ky)
                    for (long kx = 0; kx < kw; ++kx) {
                        const long krow = (c * kh + ky) * kw + kx;
                        for (long oy = 0; oy < OH; ++oy) {
                            const long iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= H) continue;
                            for (long ox = 0; ox < OW; ++ox) {
                                const long ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= W) continue;
                                col(krow, oy * OW + ox) = xp[(c * H + iy) * W + ix];
                            }
                        }
                    }
            MatRM y = wm * col;  // [OC, P]
            y.colwise() += Eigen::Map<const Eigen::VectorXd>(nodes_[b].val.data.data(), OC);
            Eigen::Map<MatRM>(out.data.data() + s * OC * P, OC, P) = y;
            cols->push_back(std::move(col));
        }
        VarId id = make_tensor(std::move(out), {x, w, b});
        nodes_[id].back = [this, x, w, b, id, N, C, H, W, OC, kh, kw, stride, pad, OH, OW,
                           K, P, cols] {
            Tensor gw({OC, K});
            Eigen::ArrayXd gb = Eigen::ArrayXd::Zero(OC);
            Tensor gx({N, C, H, W});
            MapM gwm = mat(gw, OC, K);
            MapC wm = cmat(nodes_[w].val, OC, K);
            for (long s = 0; s < N; ++s) {
                MapC gy(nodes_[id].grad.data.data() + s * OC * P, OC, P);
                gwm += gy * (*cols)[static_cast<size_t>(s)].transpose();
                gb += gy.rowwise().sum().array();
                if (nodes_[x].requires_grad) {
                    MatRM gcol = wm.transpose() * gy;  // [K, P]
                    double* gxp = gx.data.data() + s * C * H * W;
                    for (long c = 0; c < C; ++c)
                        for (long ky = 0; ky < kh; ++ky)
                            for (long kx = 0; kx < kw; ++kx) {
                                const long krow = (c * kh + ky) * kw + kx;
                                for (long oy = 0; oy < OH; ++oy) {
                                    const long iy = oy * stride + ky - pad;
                                    if (iy < 0 || iy >= H) continue;
                                    for (long ox = 0; ox < OW; ++ox) {
                                        const long ix = ox * stride + kx - pad;
                                        if (ix < 0 || ix >= W) continue;
                                        gxp[(c * H + iy) * W + ix] += gcol(krow, oy * OW + ox);
                                    }
                                }
                            }
                }
            }
            acc(x, gx.data);
            acc(w, gw.data);
            acc(b, gb);
        };
        return id;
    }

    // group norm over [N,C,H,W] with G groups; gamma/beta per channel
    VarId group_norm(VarId x, VarId gamma, VarId beta, long C, long H, long W, long G,
                     double eps = 1e-5) {
        const long N = nodes_[x].val.numel() / (C * H * W);
        if (C % G != 0) throw ShapeMismatch("group_norm groups");
        const long cg = C / G, gsz = cg * H * W;
        Tensor out({N, C, H, W});
        auto xhat = std::make_shared<Tensor>(Tensor({N, C, H, W}));
        auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(N * G));
        for (long s = 0; s < N; ++s)
            for (long g = 0; g < G; ++g) {
                const long off = s * C * H * W + g * gsz;
                const auto seg = nodes_[x].val.data.segment(off, gsz);
                const double mu = seg.mean();
                const double var = (seg - mu).square().sum() / gsz;
                const double is = 1.0 / std::sqrt(var + eps);
                (*inv_std)[static_cast<size_t>(s * G + g)] = is;
                xhat->data.segment(off, gsz) = (seg - mu) * is;
                for (long c = 0; c < cg; ++c) {
                    const long ch = g * cg + c;
                    out.data.segment(off + c * H * W, H * W) =
                        xhat->data.segment(off + c * H * W, H * W) * nodes_[gamma].val.data[ch] +
                        nodes_[beta].val.data[ch];
                }
            }
        VarId id = make_tensor(std::move(out), {x, gamma, beta});
        nodes_[id].back = [this, x, gamma, beta, id, N, C, H, W, G, cg, gsz, xhat, inv_std] {
            Eigen::ArrayXd ggamma = Eigen::ArrayXd::Zero(C);
            Eigen::ArrayXd gbeta = Eigen::ArrayXd::Zero(C);
            Tensor gx({N, C, H, W});
            for (long s = 0; s < N; ++s)
                for (long g = 0; g < G; ++g) {
                    const long off = s * C * H * W + g * gsz;
                    Eigen::ArrayXd dxhat(gsz);
                    for (long c = 0; c < cg; ++c) {
                        const long ch = g * cg + c;
                        const auto go = nodes_[id].grad.data.segment(off + c * H * W, H * W);
                        const auto xh = xhat->data.segment(off + c * H * W, H * W);
                        ggamma[ch] += (go * xh).sum();
                        gbeta[ch] += go.sum();
                        dxhat.segment(c * H * W, H * W) = go * nodes_[gamma].val.data[ch];
                    }
                    const auto xh_all = xhat->data.segment(off, gsz);
                    const double mean_dxhat = dxhat.mean();
                    const double mean_dxhat_xhat = (dxhat * xh_all).mean();
                    gx.data.segment(off, gsz) =
                        (*inv_std)[static_cast<size_t>(s * G + g)] *
                        (dxhat - mean_dxhat - xh_all * mean_dxhat_xhat);
                }
            acc(x, gx.data);
            acc(gamma, ggamma);
            acc(beta, gbeta);
        };
        return id;
    }

    // per-sample per-channel bias: X[N,C,H,W] + e[N,C] (timestep embedding path)
    VarId add_nc(VarId x, VarId e, long C, long H, long W) {
        const long N = nodes_[x].val.numel() / (C * H * W);
        if (nodes_[e].val.numel() != N * C) throw ShapeMismatch("add_nc dims");
        Tensor out = nodes_[x].val;
        for (long s = 0; s < N; ++s)
            for (long c = 0; c < C; ++c)
                out.data.segment((s * C + c) * H * W, H * W) += nodes_[e].val.data[s * C + c];
        VarId id = make_tensor(std::move(out), {x, e});
        nodes_[id].back = [this, x, e, id, N, C, H, W] {
            acc(x, nodes_[id].grad.data);
            Eigen::ArrayXd ge(N * C);
            for (long s = 0; s < N; ++s)
                for (long c = 0; c < C; ++c)
                    ge[s * C + c] = nodes_[id].grad.data.segment((s * C + c) * H * W, H * W).sum();
            acc(e, ge);
        };
        return id;
    }

    VarId upsample_nearest2(VarId x, long C, long H, long W) {
        const long N = nodes_[x].val.numel() / (C * H * W);
        Tensor out({N, C, 2 * H, 2 * W});
        for (long s = 0; s < N; ++s)
            for (long c = 0; c < C; ++c) {
                const double* src = nodes_[x].val.data.data() + (s * C + c) * H * W;
                double* dst = out.data.data() + (s * C + c) * 4 * H * W;
                for (long y = 0; y < H; ++y)
                    for (long xx = 0; xx < W; ++xx) {
                        const double v = src[y * W + xx];
                        dst[(2 * y) * 2 * W + 2 * xx] = v;
                        dst[(2 * y) * 2 * W + 2 * xx + 1] = v;
                        dst[(2 * y + 1) * 2 * W + 2 * xx] = v;
                        dst[(2 * y + 1) * 2 * W + 2 * xx + 1] = v;
                    }
            }
        VarId id = make_tensor(std::move(out), {x});
        nodes_[id].back = [this, x, id, N, C, H, W] {
            Tensor g({N, C, H, W});
            for (long s = 0; s < N; ++s)
                for (long c = 0; c < C; ++c) {
                    const double* src = nodes_[id].grad.data.data() + (s * C + c) * 4 * H * W;
                    double* dst = g.data.data() + (s * C + c) * H * W;
                    for (long y = 0; y < H; ++y)
                        for (long xx = 0; xx < W; ++xx)
                            dst[y * W + xx] = src[(2 * y) * 2 * W + 2 * xx] +
                                              src[(2 * y) * 2 * W + 2 * xx + 1] +
                                              src[(2 * y + 1) * 2 * W + 2 * xx] +
                                              src[(2 * y + 1) * 2 * W + 2 * xx + 1];
                }
            acc(x, g.data);
        };
        return id;
    }

    // reshape is free: same storage order, new logical shape
    VarId reshape(VarId x, std::vector<long> shape) {
        if (Tensor::numel_of(shape) != nodes_[x].val.numel())
            throw ShapeMismatch("reshape numel");
        Tensor out(shape, nodes_[x].val.data);
        VarId id = make_tensor(std::move(out), {x});
        nodes_[id].back = [this, x, id] { acc(x, nodes_[id].grad.data); };
        return id;
    }

    // [1,C,H,W] -> [H*W, C] token layout and back
    VarId chw_to_tokens(VarId x, long C, long H, long W) {
        Tensor out({H * W, C});
        for (long c = 0; c < C; ++c)
            for (long p = 0; p < H * W; ++p)
                out.data[p * C + c] = nodes_[x].val.data[c * H * W + p];
        VarId id = make_tensor(std::move(out), {x});
        nodes_[id].back = [this, x, id, C, H, W] {
            Tensor g({1, C, H, W});
            for (long c = 0; c < C; ++c)
                for (long p = 0; p < H * W; ++p)
                    g.data[c * H * W + p] = nodes_[id].grad.data[p * C + c];
            acc(x, g.data);
        };
        return id;
    }

    VarId tokens_to_chw(VarId x, long C, long H, long W) {
        Tensor out({1, C, H, W});
        for (long c = 0; c < C; ++c)
            for (long p = 0; p < H * W; ++p)
                out.data[c * H * W + p] = nodes_[x].val.data[p * C + c];
        VarId id = make_tensor(std::move(out), {x});
        nodes_[id].back = [this, x, id, C, H, W] {
            Tensor g({H * W, C});
            for (long c = 0; c < C; ++c)
                for (long p = 0; p < H * W; ++p)
                    g.data[p * C + c] = nodes_[id].grad.data[c * H * W + p];
            acc(x, g.data);
        };
        return id;
    }

    VarId select_batch(VarId x, long i, long stride) {
        const long N = nodes_[x].val.numel() / stride;
        if (i < 0 || i >= N) throw ShapeMismatch("select_batch index");
        std::vector<long> shape = nodes_[x].val.shape;
        shape[0] = 1;
        Tensor out(shape, nodes_[x].val.data.segment(i * stride, stride));
        VarId id = make_tensor(std::move(out), {x});
        nodes_[id].back = [this, x, id, i, stride] {
            Tensor g(nodes_[x].val.shape);
            g.data.segment(i * stride, stride) = nodes_[id].grad.data;
            acc(x, g.data);
        };
        return id;
    }

    VarId stack_batch(const std::vector<VarId>& parts) {
        if (parts.empty()) throw EmptyList("stack_batch");
        const long stride = nodes_[parts[0]].val.numel();
        std::vector<long> shape = nodes_[parts[0]].val.shape;
        shape[0] = static_cast<long>(parts.size());
        Tensor out(shape);
        for (size_t i = 0; i < parts.size(); ++i) {
            if (nodes_[parts[i]].val.numel() != stride) throw ShapeMismatch("stack_batch");
            out.data.segment(static_cast<long>(i) * stride, stride) = nodes_[parts[i]].val.data;
        }
        VarId id = make_tensor(std::move(out), parts);
        nodes_[id].back = [this, parts, id, stride] {
            for (size_t i = 0; i < parts.size(); ++i)
                acc(parts[i],
                    Eigen::ArrayXd(nodes_[id].grad.data.segment(static_cast<long>(i) * stride,
                                                                stride)));
        };
        return id;
    }

private:
    void check_same_shape(VarId a, VarId b, const char* what) const {
        if (nodes_[a].val.shape != nodes_[b].val.shape)
            throw ShapeMismatch(std::string(what) + ": shapes differ");
    }

    VarId make(std::vector<long> shape, Eigen::ArrayXd data, const std::vector<VarId>& parents) {
        Node n;
        n.val = Tensor(std::move(shape), std::move(data));
        for (VarId p : parents) n.requires_grad |= nodes_[p].requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<VarId>(nodes_.size()) - 1;
    }

    VarId make_tensor(Tensor t, const std::vector<VarId>& parents) {
        Node n;
        n.val = std::move(t);
        for (VarId p : parents) n.requires_grad |= nodes_[p].requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<VarId>(nodes_.size()) - 1;
    }

    void acc(VarId p, const Eigen::ArrayXd& g) {
        if (!nodes_[p].requires_grad) return;
        nodes_[p].grad.data += g;
    }

    std::vector<Node> nodes_;
    bool ran_backward_ = false;
};

}  // namespace ncarve::ad
