#pragma once

// Short-term sequence context: relevancy of the current question to the
// questions seen earlier in the window, and a recurrent summary of the
// relevancy-weighted past update vectors. The recurrent state is rebuilt from
// scratch for every target question (the window is short), which keeps the
// per-question context independent of evaluation order.

#include "tgmn/nn.hpp"
#include "tgmn/tgm.hpp"

#include <vector>

namespace tgmn {

// Rolling per-student history inside one window. Lists stay aligned: entry i
// is the key of the i-th question answered in this window plus the update
// vector it produced. Callers clear() at window boundaries.
struct WindowState {
    std::vector<Vec> past_question_keys;
    std::vector<Vec> past_update_vectors;

    void push(Vec question_key, Vec update_vector) {
        past_question_keys.push_back(std::move(question_key));
        past_update_vectors.push_back(std::move(update_vector));
    }
    void clear() {
        past_question_keys.clear();
        past_update_vectors.clear();
    }
    [[nodiscard]] std::size_t size() const { return past_question_keys.size(); }
};

// Tempered softmax of the current question key against each earlier key in
// the window. Empty history yields an empty vector.
inline Vec sequence_relevancy(const Vec& question_key, const std::vector<Vec>& past_question_keys,
                              double tau) {
    if (past_question_keys.empty()) return Vec(0);
    Vec scores(static_cast<Eigen::Index>(past_question_keys.size()));
    for (std::size_t i = 0; i < past_question_keys.size(); ++i) {
        const Vec& k = past_question_keys[i];
        if (k.size() != question_key.size())
            throw argument_error("sequence_relevancy: key dimension mismatch at position " +
                                 std::to_string(i));
        scores(static_cast<Eigen::Index>(i)) = k.dot(question_key);
    }
    return tempered_softmax(scores, tau);
}

// One gated-recurrence step for a single vector. Gate blocks are ordered
// (reset, update, candidate) to match the batched training kernel exactly.
inline Vec gru_layer_forward(const GruLayer& layer, const Vec& x, const Vec& h) {
    const Eigen::Index H = layer.w_hh.value.cols();
    if (x.size() != layer.w_ih.value.cols())
        throw argument_error("gru_layer_forward: input size mismatch");
    if (h.size() != H) throw argument_error("gru_layer_forward: hidden size mismatch");
    Vec gi = layer.w_ih.value * x + layer.b_ih.value.transpose();
    Vec gh = layer.w_hh.value * h + layer.b_hh.value.transpose();
    Vec r = (1.0 / (1.0 + (-(gi.segment(0, H) + gh.segment(0, H))).array().exp())).matrix();
    Vec z = (1.0 / (1.0 + (-(gi.segment(H, H) + gh.segment(H, H))).array().exp())).matrix();
    Vec n = (gi.segment(2 * H, H).array() + r.array() * gh.segment(2 * H, H).array())
                .tanh()
                .matrix();
    return ((1.0 - z.array()) * n.array() + z.array() * h.array()).matrix();
}

// Runs the stacked recurrence over a whole input sequence from zero initial
// state and returns the final top-layer hidden vector. `dropout_masks` (one
// per inter-layer gap) rescales layer outputs during training; pass empty for
// inference. An empty sequence returns the zero initial state.
inline Vec gru_forward(const GruStack& core, const std::vector<Vec>& inputs,
                       const std::vector<Vec>& dropout_masks = {}) {
    if (!dropout_masks.empty() && dropout_masks.size() + 1 != core.layers.size())
        throw argument_error("gru_forward: need one dropout mask per inter-layer gap");
    const Eigen::Index H = core.hidden;
    std::vector<Vec> state(core.layers.size(), Vec::Zero(H));
    for (const Vec& x : inputs) {
        Vec cur = x;
        for (std::size_t l = 0; l < core.layers.size(); ++l) {
            state[l] = gru_layer_forward(core.layers[l], cur, state[l]);
            cur = state[l];
            if (!dropout_masks.empty() && l + 1 < core.layers.size())
                cur = cur.cwiseProduct(dropout_masks[l]);
        }
    }
    return state.back();
}

// Short-term context vector: recurrence over the relevancy-scaled update
// vectors o(i)·U(i) in window order.
inline Vec sequence_context(const Vec& o, const std::vector<Vec>& update_vectors,
                            const GruStack& core, const std::vector<Vec>& dropout_masks = {}) {
    if (o.size() != static_cast<Eigen::Index>(update_vectors.size()))
        throw argument_error("sequence_context: relevancy/update-vector length mismatch");
    std::vector<Vec> scaled;
    scaled.reserve(update_vectors.size());
    for (std::size_t i = 0; i < update_vectors.size(); ++i)
        scaled.push_back(o(static_cast<Eigen::Index>(i)) * update_vectors[i]);
    return gru_forward(core, scaled, dropout_masks);
}

// Tape-side equivalent for training: consumes pre-scaled inputs (each a B×d
// batch row-block) and returns the final top-layer hidden Var. A zero
// constant is returned for an empty sequence.
inline Var sequence_context_t(Tape& t, const GruVars& core, const std::vector<Var>& scaled_inputs,
                              Eigen::Index batch,
                              const std::vector<Var>* dropout_masks = nullptr) {
    std::vector<Var> state;
    state.reserve(core.layers.size());
    for (std::size_t l = 0; l < core.layers.size(); ++l)
        state.push_back(t.constant(Mat::Zero(batch, core.hidden)));
    Var out = state.back();
    for (Var x : scaled_inputs) out = gru_step(t, core, x, state, dropout_masks);
    return out;
}

}  // namespace tgmn
