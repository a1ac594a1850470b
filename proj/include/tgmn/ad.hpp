#pragma once

#include "tgmn/common.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace tgmn {

/// Trainable tensor: value plus accumulated gradient, owned outside any tape
/// so it survives across mini-batches. Register on a tape with Tape::param.
struct Param {
    Mat value;
    Mat grad;
    std::string name;

    Param() = default;
    Param(Mat v, std::string n) : value(std::move(v)), name(std::move(n)) {
        grad = Mat::Zero(value.rows(), value.cols());
    }

    void zero_grad() { grad.setZero(); }
};

/// Reverse-mode autodiff over dense double matrices. One tape per forward
/// pass: build the graph with the op methods, call backward(loss) once, read
/// accumulated gradients out of the registered Params, then discard the tape.
///
/// Row vectors broadcast down columns in add_rowvec; "blocked" ops treat a
/// (B*N) x d matrix as B stacked N x d per-sample blocks.
class Tape {
public:
    struct Var {
        int id = -1;
        bool valid() const { return id >= 0; }
    };

    Var constant(Mat v) { return push(std::move(v), false, {}); }

    Var param(Param& p) {
        Var out = push(p.value, true, {});
        int id = out.id;
        nodes_[id].back = [id, &p](Tape& t) { p.grad += t.nodes_[id].grad; };
        return out;
    }

    const Mat& value(Var v) const { return node(v).value; }

    /// Gradient of the loss w.r.t. this variable; empty matrix when the node
    /// never received gradient (not on the path to the loss).
    const Mat& grad(Var v) const { return node(v).grad; }

    /// Register a node computed outside the standard op set. `back` receives
    /// the tape and the output var; it must route grad(out) into the inputs
    /// with accumulate().
    Var custom(Mat value, const std::vector<Var>& inputs,
               std::function<void(Tape&, Var)> back) {
        bool needs = false;
        for (auto in : inputs) needs = needs || node(in).needs_grad;
        Var out = push(std::move(value), needs, inputs);
        if (needs)
            nodes_[out.id].back = [back = std::move(back), out](Tape& t) { back(t, out); };
        return out;
    }

    /// Add `g` into the gradient of `v` (no-op for constants).
    template <typename Expr>
    void accumulate(Var v, const Expr& g) {
        Node& n = node(v);
        if (!n.needs_grad) return;
        if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
        n.grad += g;
    }

    // ---- elementwise & structural ops ----

    Var add(Var a, Var b) {
        check_same_shape(a, b, "add");
        Var out = make(node(a).value + node(b).value, {a, b});
        bind(out, [this, a, b, out](Tape& t) {
            t.accumulate(a, t.grad(out));
            t.accumulate(b, t.grad(out));
        });
        return out;
    }

    Var sub(Var a, Var b) {
        check_same_shape(a, b, "sub");
        Var out = make(node(a).value - node(b).value, {a, b});
        bind(out, [a, b, out](Tape& t) {
            t.accumulate(a, t.grad(out));
            t.accumulate(b, -t.grad(out));
        });
        return out;
    }

    Var cwise_mul(Var a, Var b) {
        check_same_shape(a, b, "cwise_mul");
        Var out = make(node(a).value.cwiseProduct(node(b).value), {a, b});
        bind(out, [a, b, out](Tape& t) {
            t.accumulate(a, t.grad(out).cwiseProduct(t.value(b)));
            t.accumulate(b, t.grad(out).cwiseProduct(t.value(a)));
        });
        return out;
    }

    /// alpha * a + beta (elementwise affine with scalar coefficients).
    Var affine(Var a, double alpha, double beta) {
        Var out = make(((alpha * node(a).value).array() + beta).matrix(), {a});
        bind(out, [a, out, alpha](Tape& t) { t.accumulate(a, alpha * t.grad(out)); });
        return out;
    }

    Var scale(Var a, double alpha) { return affine(a, alpha, 0.0); }

    Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
        const Mat& A = node(a).value;
        const Mat& B = node(b).value;
        auto inner_a = trans_a ? A.rows() : A.cols();
        auto inner_b = trans_b ? B.cols() : B.rows();
        require(inner_a == inner_b, "matmul: inner dimensions disagree");
        Mat v;
        if (!trans_a && !trans_b) v = A * B;
        else if (trans_a && !trans_b) v = A.transpose() * B;
        else if (!trans_a && trans_b) v = A * B.transpose();
        else v = A.transpose() * B.transpose();
        Var out = make(std::move(v), {a, b});
        bind(out, [a, b, out, trans_a, trans_b](Tape& t) {
            const Mat& G = t.grad(out);
            const Mat& A_ = t.value(a);
            const Mat& B_ = t.value(b);
            if (!trans_a && !trans_b) {
                t.accumulate(a, G * B_.transpose());
                t.accumulate(b, A_.transpose() * G);
            } else if (trans_a && !trans_b) {
                t.accumulate(a, B_ * G.transpose());
                t.accumulate(b, A_ * G);
            } else if (!trans_a && trans_b) {
                t.accumulate(a, G * B_);
                t.accumulate(b, G.transpose() * A_);
            } else {
                t.accumulate(a, B_.transpose() * G.transpose());
                t.accumulate(b, G.transpose() * A_.transpose());
            }
        });
        return out;
    }

    /// a + row vector broadcast down the rows; bias must be 1 x cols.
    Var add_rowvec(Var a, Var bias) {
        require(node(bias).value.rows() == 1 && node(bias).value.cols() == node(a).value.cols(),
                "add_rowvec: bias must be 1 x cols(a)");
        Var out = make(node(a).value.rowwise() + node(bias).value.row(0), {a, bias});
        bind(out, [a, bias, out](Tape& t) {
            t.accumulate(a, t.grad(out));
            t.accumulate(bias, t.grad(out).colwise().sum());
        });
        return out;
    }

    Var relu(Var a) {
        Var out = make(node(a).value.cwiseMax(0.0), {a});
        bind(out, [a, out](Tape& t) {
            t.accumulate(
                a, t.grad(out).cwiseProduct((t.value(a).array() > 0.0).cast<double>().matrix()));
        });
        return out;
    }

    Var tanh_(Var a) {
        Var out = make(node(a).value.array().tanh().matrix(), {a});
        bind(out, [a, out](Tape& t) {
            const Mat& y = t.value(out);
            t.accumulate(a, t.grad(out).cwiseProduct((1.0 - y.array().square()).matrix()));
        });
        return out;
    }

    Var sigmoid_(Var a) {
        Mat y = (1.0 / (1.0 + (-node(a).value.array()).exp())).matrix();
        Var out = make(std::move(y), {a});
        bind(out, [a, out](Tape& t) {
            const Mat& s = t.value(out);
            t.accumulate(a, t.grad(out).cwiseProduct((s.array() * (1.0 - s.array())).matrix()));
        });
        return out;
    }

    /// Row-wise tempered softmax: y_ij = exp(x_ij/tau) / sum_k exp(x_ik/tau).
    Var softmax_rows(Var a, double tau = 1.0) {
        require(tau > 0.0, "softmax_rows: tau must be positive");
        const Mat& X = node(a).value;
        Mat y(X.rows(), X.cols());
        for (Eigen::Index r = 0; r < X.rows(); ++r) {
            Eigen::ArrayXd row = X.row(r).transpose().array() / tau;
            row -= row.maxCoeff();
            Eigen::ArrayXd e = row.exp();
            y.row(r) = (e / e.sum()).matrix().transpose();
        }
        Var out = make(std::move(y), {a});
        bind(out, [a, out, tau](Tape& t) {
            const Mat& Y = t.value(out);
            const Mat& G = t.grad(out);
            Vec dot = (G.array() * Y.array()).rowwise().sum().matrix();
            Mat dx = (Y.array() * (G.array().colwise() - dot.array())).matrix() / tau;
            t.accumulate(a, dx);
        });
        return out;
    }

    /// Scale row i of a by scalar w(i); w is (rows x 1).
    Var row_scale(Var a, Var w) {
        require(node(w).value.cols() == 1 && node(w).value.rows() == node(a).value.rows(),
                "row_scale: w must be rows(a) x 1");
        Var out = make((node(a).value.array().colwise() * node(w).value.col(0).array()).matrix(),
                       {a, w});
        bind(out, [a, w, out](Tape& t) {
            const Mat& G = t.grad(out);
            t.accumulate(a, (G.array().colwise() * t.value(w).col(0).array()).matrix());
            t.accumulate(w, (G.array() * t.value(a).array()).rowwise().sum().matrix());
        });
        return out;
    }

    /// Left-multiply each of the B stacked N-row blocks of x by the same
    /// N x N matrix p: out.block(b) = P * x.block(b).
    Var block_lmul(Var p, Var x, Eigen::Index batch, Eigen::Index n) {
        require(node(p).value.rows() == n && node(p).value.cols() == n,
                "block_lmul: p must be n x n");
        require(node(x).value.rows() == batch * n, "block_lmul: x rows must equal batch*n");
        const Mat& P = node(p).value;
        const Mat& X = node(x).value;
        Mat y(X.rows(), X.cols());
        for (Eigen::Index b = 0; b < batch; ++b)
            y.middleRows(b * n, n).noalias() = P * X.middleRows(b * n, n);
        Var out = make(std::move(y), {p, x});
        bind(out, [p, x, out, batch, n](Tape& t) {
            const Mat& G = t.grad(out);
            const Mat& P_ = t.value(p);
            const Mat& X_ = t.value(x);
            Mat dx(X_.rows(), X_.cols());
            Mat dp = Mat::Zero(n, n);
            for (Eigen::Index b = 0; b < batch; ++b) {
                dx.middleRows(b * n, n).noalias() = P_.transpose() * G.middleRows(b * n, n);
                dp.noalias() += G.middleRows(b * n, n) * X_.middleRows(b * n, n).transpose();
            }
            t.accumulate(x, dx);
            t.accumulate(p, dp);
        });
        return out;
    }

    /// Flatten each N x d block into one row: (B*N) x d -> B x (N*d), with
    /// block row r occupying columns [r*d, (r+1)*d).
    Var rows_to_cols(Var x, Eigen::Index batch, Eigen::Index n) {
        const Mat& X = node(x).value;
        require(X.rows() == batch * n, "rows_to_cols: rows must equal batch*n");
        auto d = X.cols();
        Mat y(batch, n * d);
        for (Eigen::Index b = 0; b < batch; ++b)
            for (Eigen::Index r = 0; r < n; ++r) y.block(b, r * d, 1, d) = X.row(b * n + r);
        Var out = make(std::move(y), {x});
        bind(out, [x, out, batch, n, d](Tape& t) {
            const Mat& G = t.grad(out);
            Mat dx(batch * n, d);
            for (Eigen::Index b = 0; b < batch; ++b)
                for (Eigen::Index r = 0; r < n; ++r) dx.row(b * n + r) = G.block(b, r * d, 1, d);
            t.accumulate(x, dx);
        });
        return out;
    }

    /// Mean over each N-row block: (B*N) x d -> B x d.
    Var block_mean_rows(Var x, Eigen::Index batch, Eigen::Index n) {
        const Mat& X = node(x).value;
        require(X.rows() == batch * n, "block_mean_rows: rows must equal batch*n");
        Mat y(batch, X.cols());
        for (Eigen::Index b = 0; b < batch; ++b)
            y.row(b) = X.middleRows(b * n, n).colwise().mean();
        Var out = make(std::move(y), {x});
        bind(out, [x, out, batch, n](Tape& t) {
            const Mat& G = t.grad(out);
            Mat dx(batch * n, G.cols());
            for (Eigen::Index b = 0; b < batch; ++b)
                dx.middleRows(b * n, n) = (G.row(b) / static_cast<double>(n)).replicate(n, 1);
            t.accumulate(x, dx);
        });
        return out;
    }

    Var concat_cols(Var a, Var b) {
        const Mat& A = node(a).value;
        const Mat& B = node(b).value;
        require(A.rows() == B.rows(), "concat_cols: row counts differ");
        auto ca = A.cols();  // read before make(): push may reallocate nodes_
        Mat y(A.rows(), A.cols() + B.cols());
        y << A, B;
        Var out = make(std::move(y), {a, b});
        bind(out, [a, b, out, ca](Tape& t) {
            const Mat& G = t.grad(out);
            t.accumulate(a, G.leftCols(ca));
            t.accumulate(b, G.rightCols(G.cols() - ca));
        });
        return out;
    }

    Var slice_cols(Var a, Eigen::Index c0, Eigen::Index width) {
        const Mat& A = node(a).value;
        require(c0 >= 0 && width >= 1 && c0 + width <= A.cols(), "slice_cols: range out of bounds");
        Var out = make(A.middleCols(c0, width), {a});
        bind(out, [a, out, c0, width](Tape& t) {
            Mat dx = Mat::Zero(t.value(a).rows(), t.value(a).cols());
            dx.middleCols(c0, width) = t.grad(out);
            t.accumulate(a, dx);
        });
        return out;
    }

    /// Embedding-style lookup: out row r = m.row(idx[r]); scatter-add on the
    /// way back.
    Var gather_rows(Var m, std::vector<Eigen::Index> idx) {
        const Mat& M = node(m).value;
        for (auto i : idx) require(i >= 0 && i < M.rows(), "gather_rows: index out of range");
        Mat y(static_cast<Eigen::Index>(idx.size()), M.cols());
        for (std::size_t r = 0; r < idx.size(); ++r) y.row(static_cast<Eigen::Index>(r)) = M.row(idx[r]);
        Var out = make(std::move(y), {m});
        bind(out, [m, out, idx = std::move(idx)](Tape& t) {
            const Mat& G = t.grad(out);
            Mat dm = Mat::Zero(t.value(m).rows(), t.value(m).cols());
            for (std::size_t r = 0; r < idx.size(); ++r)
                dm.row(idx[r]) += G.row(static_cast<Eigen::Index>(r));
            t.accumulate(m, dm);
        });
        return out;
    }

    /// Masked mean binary cross-entropy. probs, labels, mask all (n x 1);
    /// probabilities are clamped to [eps, 1-eps] before the logs, and the
    /// clamp is treated as identity in the backward pass (its saturation zone
    /// is only reachable when the upstream sigmoid is itself saturated).
    Var bce_mean(Var probs, const Mat& labels, const Mat& mask, double eps = 1e-7) {
        const Mat& P = node(probs).value;
        require(P.cols() == 1 && labels.cols() == 1 && mask.cols() == 1,
                "bce_mean: inputs must be column vectors");
        require(P.rows() == labels.rows() && P.rows() == mask.rows(),
                "bce_mean: row counts differ");
        double cnt = mask.sum();
        require(cnt > 0, "bce_mean: mask selects no predictions");
        Eigen::ArrayXd pc = P.col(0).array().max(eps).min(1.0 - eps);
        Eigen::ArrayXd y = labels.col(0).array();
        Eigen::ArrayXd per = -(y * pc.log() + (1.0 - y) * (1.0 - pc).log());
        Mat v(1, 1);
        v(0, 0) = (per * mask.col(0).array()).sum() / cnt;
        Var out = make(std::move(v), {probs});
        bind(out, [probs, out, labels, mask, eps, cnt](Tape& t) {
            double g = t.grad(out)(0, 0);
            Eigen::ArrayXd pc = t.value(probs).col(0).array().max(eps).min(1.0 - eps);
            Eigen::ArrayXd y = labels.col(0).array();
            Mat dp = (g / cnt * mask.col(0).array() * (pc - y) / (pc * (1.0 - pc))).matrix();
            t.accumulate(probs, dp);
        });
        return out;
    }

    /// Run reverse accumulation from a scalar loss node. One shot per tape.
    void backward(Var loss) {
        Node& l = node(loss);
        require(l.value.rows() == 1 && l.value.cols() == 1, "backward: loss must be 1x1");
        require(!ran_backward_, "backward: tape already used");
        ran_backward_ = true;
        if (!l.needs_grad) return;  // loss doesn't depend on any param
        l.grad = Mat::Ones(1, 1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.needs_grad && n.grad.size() != 0 && n.back) n.back(*this);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Mat value;
        Mat grad;
        bool needs_grad = false;
        std::function<void(Tape&)> back;
    };

    std::vector<Node> nodes_;
    bool ran_backward_ = false;

    Node& node(Var v) {
        require(v.valid() && v.id < static_cast<int>(nodes_.size()), "tape: invalid var");
        return nodes_[static_cast<std::size_t>(v.id)];
    }
    const Node& node(Var v) const {
        require(v.valid() && v.id < static_cast<int>(nodes_.size()), "tape: invalid var");
        return nodes_[static_cast<std::size_t>(v.id)];
    }

    Var push(Mat v, bool needs_grad, const std::vector<Var>& inputs) {
        require_finite(v, "tape node");
        bool needs = needs_grad;
        for (auto in : inputs) needs = needs || node(in).needs_grad;
        Node n;
        n.value = std::move(v);
        n.needs_grad = needs;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    Var make(Mat v, const std::vector<Var>& inputs) { return push(std::move(v), false, inputs); }

    void bind(Var v, std::function<void(Tape&)> back) {
        if (node(v).needs_grad) node(v).back = std::move(back);
    }

    void check_same_shape(Var a, Var b, const char* op) {
        require(node(a).value.rows() == node(b).value.rows() &&
                    node(a).value.cols() == node(b).value.cols(),
                std::string(op) + ": shape mismatch");
    }
};

using Var = Tape::Var;

}  // namespace tgmn
