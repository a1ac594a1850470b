#pragma once

#include "tgmn/ad.hpp"
#include "tgmn/common.hpp"

#include <cmath>
#include <utility>
#include <vector>

namespace tgmn {

/// Softmax with temperature over raw scores; shared by addressing and the
/// sequence-relevancy weights. tau in (0,1]: lower is sharper.
inline Vec tempered_softmax(const Vec& scores, double tau) {
    require(tau > 0.0 && tau <= 1.0, "tempered_softmax: tau must be in (0,1]");
    require(scores.size() >= 1, "tempered_softmax: empty scores");
    Eigen::ArrayXd a = scores.array() / tau;
    a -= a.maxCoeff();
    Eigen::ArrayXd e = a.exp();
    return (e / e.sum()).matrix();
}

/// Relevancy of the current question to each memory slot: softmax over the
/// question-key / KC-key dot products.
inline Vec address(const Mat& kc_keys, const Vec& question_key, double tau) {
    require(kc_keys.cols() == question_key.size(), "address: key dimension mismatch");
    if (!question_key.allFinite()) throw numeric_error("address: non-finite question key");
    return tempered_softmax(kc_keys * question_key, tau);
}

/// Attention-style adjacency over memory slots: row-wise softmax of
/// M_q M_k' / sqrt(d_k). Rows are query slots; row-stochastic by
/// construction.
inline Mat adjacency(const Mat& M_q, const Mat& kc_keys) {
    require(M_q.cols() == kc_keys.cols(), "adjacency: d_q must equal d_k");
    require(M_q.rows() == kc_keys.rows(), "adjacency: slot counts differ");
    double scale = 1.0 / std::sqrt(static_cast<double>(kc_keys.cols()));
    Mat logits = M_q * kc_keys.transpose() * scale;
    Mat A(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r)
        A.row(r) = tempered_softmax(logits.row(r).transpose(), 1.0).transpose();
    return A;
}

/// Binary mask of A_hat = A + I: entries at or above the mask_quantile
/// cutoff survive; self-loops always survive. The cutoff is the empirical
/// quantile over all N*N entries of A_hat.
inline Mat adjacency_mask(const Mat& A_hat, double mask_quantile) {
    require(mask_quantile > 0.0 && mask_quantile < 1.0,
            "adjacency_mask: quantile must be in (0,1)");
    require(A_hat.rows() == A_hat.cols(), "adjacency_mask: square matrix required");
    std::vector<double> entries(A_hat.data(), A_hat.data() + A_hat.size());
    double cut = quantile(std::move(entries), mask_quantile);
    Mat mask = (A_hat.array() >= cut).cast<double>().matrix();
    for (Eigen::Index i = 0; i < A_hat.rows(); ++i) mask(i, i) = 1.0;
    return mask;
}

/// Degree-normalized propagation matrix: soft values of A_hat scaled by
/// D^(-1/2) on both sides, where the degrees count the *masked* edges. The
/// mask shapes normalization only; soft values all propagate.
inline Mat propagation_from_mask(const Mat& A_hat, const Mat& mask) {
    require(A_hat.rows() == A_hat.cols() && mask.rows() == A_hat.rows() &&
                mask.cols() == A_hat.cols(),
            "propagation_from_mask: shape mismatch");
    Vec inv_sqrt_deg = mask.rowwise().sum().array().rsqrt().matrix();
    require_finite(inv_sqrt_deg.transpose(), "propagation degrees");
    return ((A_hat.array().colwise() * inv_sqrt_deg.array()).rowwise() *
            inv_sqrt_deg.transpose().array())
        .matrix();
}

inline Mat propagation_matrix(const Mat& A, double mask_quantile) {
    Mat A_hat = A + Mat::Identity(A.rows(), A.cols());
    return propagation_from_mask(A_hat, adjacency_mask(A_hat, mask_quantile));
}

/// Two-phase graph convolution stack: H^0 = w (.) M_v, then each layer
/// H^(j+1) = relu(prop * (w (.) H^j) * W_j). Returns every layer including
/// the input, so callers can inspect intermediate activations.
inline std::vector<Mat> gcn_layers(const Mat& prop, const Vec& w, const Mat& M_v,
                                   const std::vector<Mat>& weights) {
    require(w.size() == M_v.rows(), "gcn_layers: relevancy length must match slot count");
    require(prop.rows() == M_v.rows() && prop.cols() == M_v.rows(),
            "gcn_layers: propagation shape mismatch");
    std::vector<Mat> hs;
    hs.reserve(weights.size() + 1);
    hs.push_back((M_v.array().colwise() * w.array()).matrix());
    for (const auto& W : weights) {
        require(W.rows() == M_v.cols() && W.cols() == M_v.cols(),
                "gcn_layers: layer weight must be d_v x d_v");
        const Mat& h = hs.back();
        Mat scaled = (h.array().colwise() * w.array()).matrix();
        hs.push_back((prop * scaled * W).cwiseMax(0.0));
    }
    return hs;
}

/// Row-major flatten: node i's features occupy [i*d, (i+1)*d).
inline Vec flatten_rows(const Mat& H) {
    Vec out(H.size());
    for (Eigen::Index r = 0; r < H.rows(); ++r)
        out.segment(r * H.cols(), H.cols()) = H.row(r).transpose();
    return out;
}

/// Read head over the final GCN layer: r = tanh(flatten(H) * W_r + b_r).
inline Vec read_head(const Mat& H_last, const Mat& W_r, const Mat& b_r) {
    Vec flat = flatten_rows(H_last);
    require(W_r.rows() == flat.size(), "read_head: W_r must be (N*d_v) x d_v");
    require(b_r.rows() == 1 && b_r.cols() == W_r.cols(), "read_head: b_r must be 1 x d_v");
    return (flat.transpose() * W_r + b_r).array().tanh().matrix().transpose();
}

/// Mean-pool alternative: r = tanh(mean_rows(H) * W_m + b_m). Keeps the head
/// O(d_v^2) for large slot counts.
inline Vec read_head_meanpool(const Mat& H_last, const Mat& W_m, const Mat& b_m) {
    require(W_m.rows() == H_last.cols(), "read_head_meanpool: W_m must be d_v x d_v");
    Eigen::RowVectorXd mean = H_last.colwise().mean();
    return (mean * W_m + b_m).array().tanh().matrix().transpose();
}

/// Erase/add gates from the status-augmented summary u.
inline std::pair<Vec, Vec> update_gates(const Vec& u, const Mat& W_e, const Mat& b_e,
                                        const Mat& W_z, const Mat& b_z) {
    require(W_e.rows() == u.size() && W_z.rows() == u.size(),
            "update_gates: gate weight rows must match dim(u)");
    Vec e = (1.0 / (1.0 + (-(u.transpose() * W_e + b_e).array()).exp())).matrix().transpose();
    Vec z = (u.transpose() * W_z + b_z).array().tanh().matrix().transpose();
    return {e, z};
}

/// Gated value update: row i becomes M(i) (.) (1 - w_i e) + w_i z. Rows with
/// zero relevancy are bit-identical afterwards.
inline Mat update_memory(const Mat& M_v, const Vec& w, const Vec& e, const Vec& z) {
    require(w.size() == M_v.rows(), "update_memory: relevancy length mismatch");
    require(e.size() == M_v.cols() && z.size() == M_v.cols(),
            "update_memory: gate dimension mismatch");
    Mat out(M_v.rows(), M_v.cols());
    for (Eigen::Index i = 0; i < M_v.rows(); ++i) {
        if (w(i) == 0.0) {
            out.row(i) = M_v.row(i);
        } else {
            out.row(i) = M_v.row(i).cwiseProduct((1.0 - w(i) * e.array()).matrix().transpose()) +
                         w(i) * z.transpose();
        }
    }
    return out;
}

/// Forgetting step: row i scaled by (1-gamma)^(1-w_i); fully attended rows
/// keep their values, ignored rows shrink by the full factor.
inline Mat decay_memory(const Mat& M_v, const Vec& w, double gamma) {
    require(gamma > 0.0 && gamma <= 1.0, "decay_memory: gamma must be in (0,1]");
    require(w.size() == M_v.rows(), "decay_memory: relevancy length mismatch");
    Vec factors(w.size());
    for (Eigen::Index i = 0; i < w.size(); ++i)
        factors(i) = std::pow(1.0 - gamma, 1.0 - w(i));
    return (M_v.array().colwise() * factors.array()).matrix();
}

// ---- tape-side builders (batched; a (B*N) x d_v matrix holds B students) ----

/// Adjacency on the tape: gradient flows into M_q.
inline Var adjacency_t(Tape& t, Var M_q, const Mat& kc_keys) {
    double scale = 1.0 / std::sqrt(static_cast<double>(kc_keys.cols()));
    Var logits = t.scale(t.matmul(M_q, t.constant(kc_keys), false, true), scale);
    return t.softmax_rows(logits, 1.0);
}

/// Propagation on the tape. The binary mask (and therefore the degree
/// normalization) is computed from the adjacency *values* and held constant;
/// gradients flow through the soft entries of A_hat only.
inline Var propagation_t(Tape& t, Var A, double mask_quantile) {
    const Mat& A_val = t.value(A);
    Mat A_hat_val = A_val + Mat::Identity(A_val.rows(), A_val.cols());
    Mat mask = adjacency_mask(A_hat_val, mask_quantile);
    Vec s = mask.rowwise().sum().array().rsqrt().matrix();
    Mat scaling = s * s.transpose();
    Var A_hat = t.add(A, t.constant(Mat::Identity(A_val.rows(), A_val.cols())));
    return t.cwise_mul(A_hat, t.constant(scaling));
}

/// Same, but with a caller-supplied frozen mask (used by gradient checks to
/// pin the non-differentiable branch).
inline Var propagation_t_frozen(Tape& t, Var A, const Mat& mask) {
    const Mat& A_val = t.value(A);
    Vec s = mask.rowwise().sum().array().rsqrt().matrix();
    Mat scaling = s * s.transpose();
    Var A_hat = t.add(A, t.constant(Mat::Identity(A_val.rows(), A_val.cols())));
    return t.cwise_mul(A_hat, t.constant(scaling));
}

/// Batched gated update as one fused node. M_v is (B*N) x d_v, w_flat is the
/// per-row relevancy (B*N), e and z are B x d_v (one gate pair per student).
/// Row (b,i) becomes M(b,i) (.) (1 - w e_b) + w z_b with w = w_flat(b*N+i).
inline Var memory_update_t(Tape& t, Var M_v, const Vec& w_flat, Var e, Var z, Eigen::Index B,
                           Eigen::Index N) {
    const Mat& M = t.value(M_v);
    const Mat& E = t.value(e);
    const Mat& Z = t.value(z);
    require(M.rows() == B * N && w_flat.size() == B * N, "memory_update_t: row count mismatch");
    require(E.rows() == B && Z.rows() == B && E.cols() == M.cols() && Z.cols() == M.cols(),
            "memory_update_t: gate shapes must be B x d_v");
    Mat out(M.rows(), M.cols());
    for (Eigen::Index b = 0; b < B; ++b)
        for (Eigen::Index i = 0; i < N; ++i) {
            Eigen::Index r = b * N + i;
            double w = w_flat(r);
            out.row(r) = M.row(r).cwiseProduct(
                             (1.0 - w * E.row(b).array()).matrix()) +
                         w * Z.row(b);
        }
    auto back = [M_v, e, z, w_flat, B, N](Tape& tt, Var out_var) {
        const Mat& G = tt.grad(out_var);
        const Mat& M_ = tt.value(M_v);
        const Mat& E_ = tt.value(e);
        Mat dM(M_.rows(), M_.cols());
        Mat dE = Mat::Zero(B, E_.cols());
        Mat dZ = Mat::Zero(B, E_.cols());
        for (Eigen::Index b = 0; b < B; ++b)
            for (Eigen::Index i = 0; i < N; ++i) {
                Eigen::Index r = b * N + i;
                double w = w_flat(r);
                dM.row(r) = G.row(r).cwiseProduct((1.0 - w * E_.row(b).array()).matrix());
                dE.row(b) -= w * G.row(r).cwiseProduct(M_.row(r));
                dZ.row(b) += w * G.row(r);
            }
        tt.accumulate(M_v, dM);
        tt.accumulate(e, dE);
        tt.accumulate(z, dZ);
    };
    return t.custom(std::move(out), {M_v, e, z}, back);
}

/// Per-row decay factors for a batched memory: (1-gamma)^(1-w) for rows of
/// active students, exactly 1 for inactive ones (their state must not move).
inline Vec decay_factor_rows(const Vec& w_flat, double gamma, const std::vector<bool>& active,
                             Eigen::Index B, Eigen::Index N) {
    require(gamma > 0.0 && gamma <= 1.0, "decay_factor_rows: gamma must be in (0,1]");
    require(w_flat.size() == B * N, "decay_factor_rows: row count mismatch");
    require(static_cast<Eigen::Index>(active.size()) == B, "decay_factor_rows: active size");
    Vec f(B * N);
    for (Eigen::Index b = 0; b < B; ++b)
        for (Eigen::Index i = 0; i < N; ++i)
            f(b * N + i) = active[b] ? std::pow(1.0 - gamma, 1.0 - w_flat(b * N + i)) : 1.0;
    return f;
}

}  // namespace tgmn
