#pragma once

#include "tgmn/ad.hpp"
#include "tgmn/rng.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace tgmn {

/// Adam optimizer over a fixed set of parameters. step() consumes the
/// accumulated gradients and zeroes them.
class Adam {
public:
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    Adam() = default;
    explicit Adam(std::vector<Param*> params, double learning_rate = 1e-3)
        : lr(learning_rate), params_(std::move(params)) {
        for (auto* p : params_) {
            m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
        }
    }

    std::int64_t steps() const { return t_; }

    void step() {
        ++t_;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Param& p = *params_[i];
            if (!p.grad.allFinite())
                throw numeric_error("adam: non-finite gradient in " + p.name);
            m_[i] = beta1 * m_[i] + (1.0 - beta1) * p.grad;
            v_[i] = (beta2 * v_[i].array() + (1.0 - beta2) * p.grad.array().square()).matrix();
            p.value.array() -=
                lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps);
            p.zero_grad();
        }
    }

private:
    std::vector<Param*> params_;
    std::vector<Mat> m_, v_;
    std::int64_t t_ = 0;
};

/// Dense layer parameters; apply as x * W + b with x row-major batches.
struct Linear {
    Param W;  // in x out
    Param b;  // 1 x out

    Linear() = default;
    Linear(Eigen::Index in, Eigen::Index out, double sigma, Rng& rng, const std::string& name)
        : W(rng.normal_matrix(in, out, 0.0, sigma), name + ".W"),
          b(Mat::Zero(1, out), name + ".b") {}

    std::vector<Param*> params() { return {&W, &b}; }
};

inline Var apply_linear(Tape& t, Linear& lin, Var x) {
    return t.add_rowvec(t.matmul(x, t.param(lin.W)), t.param(lin.b));
}

/// Inverted-dropout mask: entries are 0 with probability p, else 1/(1-p), so
/// the expected activation is unchanged. Multiply it in as a constant.
inline Mat dropout_mask(Rng& rng, Eigen::Index rows, Eigen::Index cols, double p) {
    require(p >= 0.0 && p < 1.0, "dropout_mask: p must be in [0,1)");
    Mat m(rows, cols);
    double keep = 1.0 - p;
    for (Eigen::Index c = 0; c < cols; ++c)
        for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
    return m;
}

/// One GRU layer's weights, gate rows ordered (reset, update, candidate):
///   r = sigma(x W_ir' + b_ir + h W_hr' + b_hr)
///   z = sigma(x W_iz' + b_iz + h W_hz' + b_hz)
///   n = tanh(x W_in' + b_in + r o (h W_hn' + b_hn))
///   h' = (1 - z) o n + z o h
struct GruLayer {
    Param w_ih;  // 3H x I
    Param w_hh;  // 3H x H
    Param b_ih;  // 1 x 3H
    Param b_hh;  // 1 x 3H

    GruLayer() = default;
    GruLayer(Eigen::Index input, Eigen::Index hidden, double sigma, Rng& rng,
             const std::string& name)
        : w_ih(rng.normal_matrix(3 * hidden, input, 0.0, sigma), name + ".w_ih"),
          w_hh(rng.normal_matrix(3 * hidden, hidden, 0.0, sigma), name + ".w_hh"),
          b_ih(Mat::Zero(1, 3 * hidden), name + ".b_ih"),
          b_hh(Mat::Zero(1, 3 * hidden), name + ".b_hh") {}
};

struct GruStack {
    std::vector<GruLayer> layers;
    Eigen::Index hidden = 0;

    GruStack() = default;
    GruStack(Eigen::Index input, Eigen::Index hidden_dim, int num_layers, double sigma, Rng& rng,
             const std::string& name)
        : hidden(hidden_dim) {
        require(num_layers >= 1, "GruStack: need at least one layer");
        for (int l = 0; l < num_layers; ++l)
            layers.emplace_back(l == 0 ? input : hidden_dim, hidden_dim, sigma, rng,
                                name + ".l" + std::to_string(l));
    }

    std::vector<Param*> params() {
        std::vector<Param*> out;
        for (auto& l : layers) {
            out.push_back(&l.w_ih);
            out.push_back(&l.w_hh);
            out.push_back(&l.b_ih);
            out.push_back(&l.b_hh);
        }
        return out;
    }
};

/// Per-tape handles for a GRU's weights; register once, step many times.
struct GruVars {
    struct LayerVars {
        Var w_ih, w_hh, b_ih, b_hh;
    };
    std::vector<LayerVars> layers;
    Eigen::Index hidden = 0;
};

inline GruVars register_gru(Tape& t, GruStack& gru) {
    GruVars vars;
    vars.hidden = gru.hidden;
    for (auto& l : gru.layers)
        vars.layers.push_back(
            {t.param(l.w_ih), t.param(l.w_hh), t.param(l.b_ih), t.param(l.b_hh)});
    return vars;
}

/// Fused single-layer GRU cell: one tape node instead of ~20, with the gate
/// activations cached for the hand-derived backward pass. x is B x I, h is
/// B x H; returns B x H.
inline Var gru_cell(Tape& t, Var x, Var h, const GruVars::LayerVars& w) {
    const Mat& X = t.value(x);
    const Mat& Hprev = t.value(h);
    const Mat& Wih = t.value(w.w_ih);
    const Mat& Whh = t.value(w.w_hh);
    const auto H = Hprev.cols();
    require(Wih.rows() == 3 * H && Whh.rows() == 3 * H && Whh.cols() == H,
            "gru_cell: weight shapes disagree with hidden size");
    require(Wih.cols() == X.cols(), "gru_cell: input width disagrees with w_ih");
    require(X.rows() == Hprev.rows(), "gru_cell: batch sizes disagree");

    Mat gi = (X * Wih.transpose()).rowwise() + t.value(w.b_ih).row(0);
    Mat gh = (Hprev * Whh.transpose()).rowwise() + t.value(w.b_hh).row(0);

    Mat r = (1.0 / (1.0 + (-(gi.leftCols(H) + gh.leftCols(H))).array().exp())).matrix();
    Mat z = (1.0 / (1.0 + (-(gi.middleCols(H, H) + gh.middleCols(H, H))).array().exp())).matrix();
    Mat hn = gh.rightCols(H);
    Mat n = (gi.rightCols(H) + r.cwiseProduct(hn)).array().tanh().matrix();
    Mat out_val =
        ((1.0 - z.array()) * n.array() + z.array() * Hprev.array()).matrix();

    auto back = [x, h, w, r, z, n, hn, H](Tape& tt, Var out) {
        const Mat& G = tt.grad(out);
        const Mat& X_ = tt.value(x);
        const Mat& Hp = tt.value(h);
        Mat dz = (G.array() * (Hp.array() - n.array()) * z.array() * (1.0 - z.array())).matrix();
        Mat dn = (G.array() * (1.0 - z.array()) * (1.0 - n.array().square())).matrix();
        Mat dr = (dn.array() * hn.array() * r.array() * (1.0 - r.array())).matrix();

        Mat dgi(G.rows(), 3 * H), dgh(G.rows(), 3 * H);
        dgi << dr, dz, dn;
        dgh << dr, dz, (dn.array() * r.array()).matrix();

        tt.accumulate(x, dgi * tt.value(w.w_ih));
        tt.accumulate(h, (G.array() * z.array()).matrix() + dgh * tt.value(w.w_hh));
        tt.accumulate(w.w_ih, dgi.transpose() * X_);
        tt.accumulate(w.w_hh, dgh.transpose() * Hp);
        tt.accumulate(w.b_ih, dgi.colwise().sum());
        tt.accumulate(w.b_hh, dgh.colwise().sum());
    };
    return t.custom(std::move(out_val), {x, h, w.w_ih, w.w_hh, w.b_ih, w.b_hh}, back);
}

/// Advance a stacked GRU one time step. `state` holds one B x H var per
/// layer and is replaced with the new states; returns the top layer output.
/// `inter_layer_masks` (optional, size layers-1) applies dropout to each
/// layer's output before it feeds the next layer.
inline Var gru_step(Tape& t, const GruVars& vars, Var x, std::vector<Var>& state,
                    const std::vector<Var>* inter_layer_masks = nullptr) {
    require(state.size() == vars.layers.size(), "gru_step: state/layer count mismatch");
    if (inter_layer_masks)
        require(inter_layer_masks->size() + 1 == vars.layers.size(),
                "gru_step: need layers-1 dropout masks");
    Var input = x;
    for (std::size_t l = 0; l < vars.layers.size(); ++l) {
        state[l] = gru_cell(t, input, state[l], vars.layers[l]);
        input = state[l];
        if (inter_layer_masks && l + 1 < vars.layers.size())
            input = t.cwise_mul(input, (*inter_layer_masks)[l]);
    }
    return input;
}

}  // namespace tgmn
