#pragma once

// One full interaction step of the knowledge-tracing model: embed the
// question, address the memory slots, propagate and read the value memory,
// summarize the recent window, predict the answer, then fold the observed
// answer back into the memory (gated update plus decay). Also exposes the
// training loss and a versioned text checkpoint.

#include "tgmn/matrix_io.hpp"
#include "tgmn/pretrain.hpp"
#include "tgmn/seqctx.hpp"
#include "tgmn/tgm.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace tgmn {

// Dimensions plus the feature switches that the ablation variants toggle.
// Everything here is immutable over a training run and travels with the
// checkpoint.
struct ModelHyper {
    Eigen::Index num_kcs = 0;        // N: memory slots, one per knowledge component
    Eigen::Index num_questions = 0;  // L
    Eigen::Index d_k = 512;          // key width (question and KC keys, M_q columns)
    Eigen::Index d_v = 512;          // value width (M_v columns, GRU hidden)
    Eigen::Index window = 15;        // S: interactions per short-term window
    double gamma = 0.02;             // forgetting rate
    double tau = 1.0;                // addressing temperature
    double mask_quantile = 0.25;     // adjacency binarization cut
    int gcn_layers = 2;
    int gru_layers = 2;
    bool use_sequence_context = true;   // off: h is the zero vector
    bool use_decay = true;              // off: the forgetting step never runs
    bool use_status_encoding = true;    // off: u = m (no status row added)
    bool mean_pool_read = false;        // read head over pooled rows instead of the flatten

    [[nodiscard]] Eigen::Index d_m() const { return 2 * d_v; }

    void validate() const {
        require(num_kcs > 0 && num_questions > 0, "model: node counts must be positive");
        require(d_k > 0 && d_v > 0, "model: dimensions must be positive");
        require(window >= 1, "model: window must hold at least one interaction");
        require(gamma > 0.0 && gamma <= 1.0, "model: gamma must be in (0,1]");
        require(tau > 0.0 && tau <= 1.0, "model: tau must be in (0,1]");
        require(mask_quantile > 0.0 && mask_quantile < 1.0,
                "model: mask quantile must be in (0,1)");
        require(gcn_layers >= 1 && gru_layers >= 1, "model: need at least one layer per stack");
    }
};

// The four-row status table added to the mastery vector when encoding an
// observed interaction: row 2*predicted + actual. Rows follow the sinusoidal
// position-encoding recipe, entry (p, 2i) = sin(p / 10000^(2i/dim)) and
// (p, 2i+1) = cos of the same angle, so they are deterministic, pairwise
// distinct, and never trained.
inline Mat status_matrix(Eigen::Index dim) {
    require(dim >= 2, "status_matrix: dimension too small");
    Mat rows(4, dim);
    for (Eigen::Index p = 0; p < 4; ++p) {
        for (Eigen::Index i = 0; 2 * i < dim; ++i) {
            double angle = static_cast<double>(p) /
                           std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(dim));
            rows(p, 2 * i) = std::sin(angle);
            if (2 * i + 1 < dim) rows(p, 2 * i + 1) = std::cos(angle);
        }
    }
    return rows;
}

// All tensors of one model. Question/KC keys come out of pretraining and stay
// frozen, as does the status table; everything else is learnable and appears
// in params() exactly once.
struct ModelParameters {
    ModelHyper hyper;
    Mat question_keys;  // L x d_k, frozen
    Mat kc_keys;        // N x d_k, frozen
    Mat A_status;       // 4 x d_m, frozen
    Param M_q;          // N x d_k
    std::vector<Param> gcn_weights;  // gcn_layers of d_v x d_v
    Param W_r, b_r;                  // read head: (N*d_v or d_v) x d_v, 1 x d_v
    GruStack gru;                    // input d_m, hidden d_v
    Param W_p, b_p;                  // prediction head: d_m x 1, 1 x 1
    Param W_e, b_e;                  // erase gate: d_m x d_v, 1 x d_v
    Param W_z, b_z;                  // add gate: d_m x d_v, 1 x d_v

    std::vector<Param*> params() {
        std::vector<Param*> out{&M_q};
        for (auto& w : gcn_weights) out.push_back(&w);
        out.push_back(&W_r);
        out.push_back(&b_r);
        for (auto* p : gru.params()) out.push_back(p);
        for (auto* p : {&W_p, &b_p, &W_e, &b_e, &W_z, &b_z}) out.push_back(p);
        return out;
    }
};

inline ModelParameters init_model(const KeyEmbeddings& keys, ModelHyper hyper, double sigma,
                                  Rng& rng) {
    hyper.num_questions = keys.question_keys.rows();
    hyper.num_kcs = keys.kc_keys.rows();
    hyper.d_k = keys.d_k();
    hyper.validate();
    require(keys.question_keys.cols() == keys.kc_keys.cols(),
            "init_model: question/KC key widths differ");
    require(sigma > 0.0, "init_model: sigma must be positive");

    ModelParameters p;
    p.hyper = hyper;
    p.question_keys = keys.question_keys;
    p.kc_keys = keys.kc_keys;
    p.A_status = status_matrix(hyper.d_m());
    p.M_q = Param(rng.normal_matrix(hyper.num_kcs, hyper.d_k, 0.0, sigma), "M_q");
    for (int j = 0; j < hyper.gcn_layers; ++j)
        p.gcn_weights.emplace_back(rng.normal_matrix(hyper.d_v, hyper.d_v, 0.0, sigma),
                                   "gcn." + std::to_string(j));
    Eigen::Index read_rows = hyper.mean_pool_read ? hyper.d_v : hyper.num_kcs * hyper.d_v;
    p.W_r = Param(rng.normal_matrix(read_rows, hyper.d_v, 0.0, sigma), "W_r");
    p.b_r = Param(Mat::Zero(1, hyper.d_v), "b_r");
    p.gru = GruStack(hyper.d_m(), hyper.d_v, hyper.gru_layers, sigma, rng, "gru");
    p.W_p = Param(rng.normal_matrix(hyper.d_m(), 1, 0.0, sigma), "W_p");
    p.b_p = Param(Mat::Zero(1, 1), "b_p");
    p.W_e = Param(rng.normal_matrix(hyper.d_m(), hyper.d_v, 0.0, sigma), "W_e");
    p.b_e = Param(Mat::Zero(1, hyper.d_v), "b_e");
    p.W_z = Param(rng.normal_matrix(hyper.d_m(), hyper.d_v, 0.0, sigma), "W_z");
    p.b_z = Param(Mat::Zero(1, hyper.d_v), "b_z");
    return p;
}

// Per-student mutable state: the value memory plus the short-term window.
struct StudentState {
    Mat M_v;  // N x d_v
    WindowState window;
};

inline StudentState fresh_student(const ModelParameters& params) {
    StudentState s;
    // The memory starts inert; the first gated update writes the first
    // nonzero rows and decay has nothing to forget before that.
    s.M_v = Mat::Zero(params.hyper.num_kcs, params.hyper.d_v);
    return s;
}

// Long-term (memory read) and short-term (window summary) halves of the
// mastery vector m = concat(r, h).
struct MasteryState {
    Vec r, h;

    [[nodiscard]] Vec m() const {
        Vec out(r.size() + h.size());
        out << r, h;
        return out;
    }
};

struct StepDiagnostics {
    Mat adjacency;                   // N x N row-stochastic attention
    double relevancy_entropy = 0.0;  // entropy of w over the slots
    double memory_norm_before = 0.0;
    double memory_norm_after = 0.0;
    bool decay_applied = false;
};

struct StepOutput {
    double prob = 0.0;  // predicted correct-answer probability, strictly in (0,1)
    Vec u;              // status-encoded mastery appended to the window
    Vec w;              // slot relevancy of the current question
    MasteryState mastery;
    StepDiagnostics diagnostics;
};

enum class StepMode { train, eval };

inline double predict_answer(const ModelParameters& params, const Vec& m) {
    require(m.size() == params.W_p.value.rows(), "predict_answer: mastery dimension mismatch");
    return sigmoid((m.transpose() * params.W_p.value)(0) + params.b_p.value(0, 0));
}

// Status row for an observed interaction: predicted-correct bit then actual
// bit, row index 2*pred + actual.
inline Vec status_encoding(const ModelParameters& params, int pred_binary, int actual) {
    require((pred_binary == 0 || pred_binary == 1) && (actual == 0 || actual == 1),
            "status_encoding: arguments must be binary");
    return params.A_status.row(2 * pred_binary + actual).transpose();
}

// Mean binary cross-entropy with probabilities clamped to [1e-7, 1-1e-7].
inline double bce_loss(const std::vector<double>& probs, const std::vector<int>& labels) {
    if (probs.empty() || probs.size() != labels.size())
        throw argument_error("bce_loss: need aligned non-empty probabilities and labels");
    constexpr double eps = 1e-7;
    double total = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        double p = std::clamp(probs[i], eps, 1.0 - eps);
        double a = static_cast<double>(labels[i]);
        total -= a * std::log(p) + (1.0 - a) * std::log(1.0 - p);
    }
    return total / static_cast<double>(probs.size());
}

// One interaction: predict from the pre-update state, then fold the observed
// answer into the window and the value memory (teacher forcing: the observed
// answer drives the update in both modes). The prediction is causal: it
// depends on the question, prior interactions, and parameters only, never on
// the current answer. In train mode, optional inter-layer dropout masks are
// forwarded to the window summary; eval mode ignores them.
inline StepOutput step(const ModelParameters& params, StudentState& state, Eigen::Index q_t,
                       int a_t, StepMode mode, const std::vector<Vec>& dropout_masks = {}) {
    const ModelHyper& hy = params.hyper;
    if (q_t < 0 || q_t >= hy.num_questions)
        throw argument_error("step: unknown question id " + std::to_string(q_t) + " (model has " +
                             std::to_string(hy.num_questions) + " questions)");
    require(a_t == 0 || a_t == 1, "step: answer must be binary");
    require(state.M_v.rows() == hy.num_kcs && state.M_v.cols() == hy.d_v,
            "step: student memory shape mismatch");

    // A full window ends the short-term context; the next interaction starts
    // a fresh one with zero history.
    if (static_cast<Eigen::Index>(state.window.size()) >= hy.window) state.window.clear();

    StepOutput out;
    out.diagnostics.memory_norm_before = state.M_v.norm();

    // Long-term read: address the slots, propagate the weighted memory over
    // the slot graph, read the final layer.
    Vec k_q = params.question_keys.row(q_t).transpose();
    out.w = address(params.kc_keys, k_q, hy.tau);
    out.diagnostics.relevancy_entropy = 0.0;
    for (Eigen::Index i = 0; i < out.w.size(); ++i)
        if (out.w(i) > 0.0) out.diagnostics.relevancy_entropy -= out.w(i) * std::log(out.w(i));

    Mat A = adjacency(params.M_q.value, params.kc_keys);
    out.diagnostics.adjacency = A;
    Mat prop = propagation_matrix(A, hy.mask_quantile);
    std::vector<Mat> weights;
    weights.reserve(params.gcn_weights.size());
    for (const auto& w : params.gcn_weights) weights.push_back(w.value);
    Mat H_last = gcn_layers(prop, out.w, state.M_v, weights).back();
    out.mastery.r = hy.mean_pool_read
                        ? read_head_meanpool(H_last, params.W_r.value, params.b_r.value)
                        : read_head(H_last, params.W_r.value, params.b_r.value);

    // Short-term summary over the window prefix.
    if (hy.use_sequence_context) {
        Vec o = sequence_relevancy(k_q, state.window.past_question_keys, hy.tau);
        static const std::vector<Vec> no_masks;
        const std::vector<Vec>& masks = mode == StepMode::train ? dropout_masks : no_masks;
        out.mastery.h = sequence_context(o, state.window.past_update_vectors, params.gru, masks);
    } else {
        out.mastery.h = Vec::Zero(hy.d_v);
    }

    Vec m = out.mastery.m();
    out.prob = predict_answer(params, m);

    // Everything below observes a_t; the prediction above is already fixed.
    int pred_binary = out.prob >= 0.5 ? 1 : 0;
    out.u = hy.use_status_encoding ? Vec(status_encoding(params, pred_binary, a_t) + m) : m;
    state.window.push(k_q, out.u);

    auto [e, z] = update_gates(out.u, params.W_e.value, params.b_e.value, params.W_z.value,
                               params.b_z.value);
    state.M_v = update_memory(state.M_v, out.w, e, z);
    if (hy.use_decay) {
        state.M_v = decay_memory(state.M_v, out.w, hy.gamma);
        out.diagnostics.decay_applied = true;
    }
    out.diagnostics.memory_norm_after = state.M_v.norm();
    return out;
}

// ---- checkpointing -------------------------------------------------------
//
// Versioned text container: a header line, `meta key value` lines, then
// named matrices in the shared matrix format, closed by `end`. Doubles use
// the shortest round-tripping rendering, so save/load reproduces predictions
// bit-exactly.

inline constexpr int checkpoint_version = 1;
inline constexpr const char* checkpoint_magic = "TGMN-CHECKPOINT";

namespace detail {

inline std::vector<std::pair<std::string, const Mat*>> checkpoint_matrices(
    const ModelParameters& p) {
    std::vector<std::pair<std::string, const Mat*>> out = {
        {"question_keys", &p.question_keys}, {"kc_keys", &p.kc_keys}, {"M_q", &p.M_q.value},
        {"W_r", &p.W_r.value},               {"b_r", &p.b_r.value},   {"W_p", &p.W_p.value},
        {"b_p", &p.b_p.value},               {"W_e", &p.W_e.value},   {"b_e", &p.b_e.value},
        {"W_z", &p.W_z.value},               {"b_z", &p.b_z.value},
    };
    for (std::size_t j = 0; j < p.gcn_weights.size(); ++j)
        out.emplace_back("gcn." + std::to_string(j), &p.gcn_weights[j].value);
    for (std::size_t l = 0; l < p.gru.layers.size(); ++l) {
        const GruLayer& gl = p.gru.layers[l];
        std::string stem = "gru.l" + std::to_string(l) + ".";
        out.emplace_back(stem + "w_ih", &gl.w_ih.value);
        out.emplace_back(stem + "w_hh", &gl.w_hh.value);
        out.emplace_back(stem + "b_ih", &gl.b_ih.value);
        out.emplace_back(stem + "b_hh", &gl.b_hh.value);
    }
    return out;
}

}  // namespace detail

inline void save_checkpoint(const ModelParameters& params, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("save_checkpoint: cannot open " + path.string());
    const ModelHyper& hy = params.hyper;
    out << checkpoint_magic << ' ' << checkpoint_version << '\n';
    out << "meta N " << hy.num_kcs << '\n';
    out << "meta L " << hy.num_questions << '\n';
    out << "meta d_k " << hy.d_k << '\n';
    out << "meta d_v " << hy.d_v << '\n';
    out << "meta S " << hy.window << '\n';
    out << "meta gamma " << format_double(hy.gamma) << '\n';
    out << "meta tau " << format_double(hy.tau) << '\n';
    out << "meta mask_quantile " << format_double(hy.mask_quantile) << '\n';
    out << "meta gcn_layers " << hy.gcn_layers << '\n';
    out << "meta gru_layers " << hy.gru_layers << '\n';
    out << "meta sequence_context " << (hy.use_sequence_context ? 1 : 0) << '\n';
    out << "meta decay " << (hy.use_decay ? 1 : 0) << '\n';
    out << "meta status_encoding " << (hy.use_status_encoding ? 1 : 0) << '\n';
    out << "meta mean_pool_read " << (hy.mean_pool_read ? 1 : 0) << '\n';
    for (const auto& [name, mat] : detail::checkpoint_matrices(params)) {
        out << "matrix " << name << '\n';
        write_matrix(out, *mat);
    }
    out << "end\n";
    if (!out) throw data_error("save_checkpoint: write failed for " + path.string());
}

inline ModelParameters load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("load_checkpoint: cannot open " + path.string());

    std::string line;
    if (!std::getline(in, line)) throw format_error("load_checkpoint: empty file");
    {
        std::istringstream hdr(line);
        std::string magic;
        int version = -1;
        if (!(hdr >> magic >> version) || magic != checkpoint_magic)
            throw format_error("load_checkpoint: not a checkpoint file (header '" + line + "')");
        if (version != checkpoint_version)
            throw format_error("load_checkpoint: file version " + std::to_string(version) +
                               " but this build reads version " +
                               std::to_string(checkpoint_version));
    }

    std::map<std::string, std::string> meta;
    std::map<std::string, Mat> mats;
    bool closed = false;
    while (std::getline(in, line)) {
        if (line == "end") {
            closed = true;
            break;
        }
        std::istringstream ls(line);
        std::string kind, name;
        if (!(ls >> kind >> name))
            throw format_error("load_checkpoint: bad line '" + line + "'");
        if (kind == "meta") {
            std::string value;
            if (!(ls >> value))
                throw format_error("load_checkpoint: meta '" + name + "' has no value");
            if (!meta.emplace(name, value).second)
                throw format_error("load_checkpoint: duplicate meta '" + name + "'");
        } else if (kind == "matrix") {
            Mat m = read_matrix(in, name);
            if (!mats.emplace(name, std::move(m)).second)
                throw format_error("load_checkpoint: duplicate matrix '" + name + "'");
        } else {
            throw format_error("load_checkpoint: unknown entry kind '" + kind + "'");
        }
    }
    if (!closed) throw format_error("load_checkpoint: truncated file (missing end marker)");

    const auto meta_str = [&](const char* key) {
        auto it = meta.find(key);
        if (it == meta.end())
            throw format_error(std::string("load_checkpoint: missing meta '") + key + "'");
        return it->second;
    };
    const auto meta_int = [&](const char* key) {
        return parse_long(meta_str(key), std::string("meta ") + key);
    };
    const auto meta_dbl = [&](const char* key) {
        return parse_double(meta_str(key), std::string("meta ") + key);
    };

    ModelHyper hy;
    hy.num_kcs = meta_int("N");
    hy.num_questions = meta_int("L");
    hy.d_k = meta_int("d_k");
    hy.d_v = meta_int("d_v");
    hy.window = meta_int("S");
    hy.gamma = meta_dbl("gamma");
    hy.tau = meta_dbl("tau");
    hy.mask_quantile = meta_dbl("mask_quantile");
    hy.gcn_layers = static_cast<int>(meta_int("gcn_layers"));
    hy.gru_layers = static_cast<int>(meta_int("gru_layers"));
    hy.use_sequence_context = meta_int("sequence_context") != 0;
    hy.use_decay = meta_int("decay") != 0;
    hy.use_status_encoding = meta_int("status_encoding") != 0;
    hy.mean_pool_read = meta_int("mean_pool_read") != 0;
    hy.validate();

    const auto take = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
        auto it = mats.find(name);
        if (it == mats.end())
            throw format_error("load_checkpoint: missing matrix '" + name + "'");
        if (it->second.rows() != rows || it->second.cols() != cols)
            throw format_error("load_checkpoint: matrix '" + name + "' is " +
                               std::to_string(it->second.rows()) + "x" +
                               std::to_string(it->second.cols()) + ", manifest implies " +
                               std::to_string(rows) + "x" + std::to_string(cols));
        Mat m = std::move(it->second);
        mats.erase(it);
        return m;
    };

    ModelParameters p;
    p.hyper = hy;
    p.question_keys = take("question_keys", hy.num_questions, hy.d_k);
    p.kc_keys = take("kc_keys", hy.num_kcs, hy.d_k);
    p.A_status = status_matrix(hy.d_m());
    p.M_q = Param(take("M_q", hy.num_kcs, hy.d_k), "M_q");
    for (int j = 0; j < hy.gcn_layers; ++j) {
        std::string name = "gcn." + std::to_string(j);
        p.gcn_weights.emplace_back(take(name, hy.d_v, hy.d_v), name);
    }
    Eigen::Index read_rows = hy.mean_pool_read ? hy.d_v : hy.num_kcs * hy.d_v;
    p.W_r = Param(take("W_r", read_rows, hy.d_v), "W_r");
    p.b_r = Param(take("b_r", 1, hy.d_v), "b_r");
    p.gru.hidden = hy.d_v;
    for (int l = 0; l < hy.gru_layers; ++l) {
        std::string stem = "gru.l" + std::to_string(l) + ".";
        Eigen::Index input = l == 0 ? hy.d_m() : hy.d_v;
        GruLayer gl;
        gl.w_ih = Param(take(stem + "w_ih", 3 * hy.d_v, input), stem + "w_ih");
        gl.w_hh = Param(take(stem + "w_hh", 3 * hy.d_v, hy.d_v), stem + "w_hh");
        gl.b_ih = Param(take(stem + "b_ih", 1, 3 * hy.d_v), stem + "b_ih");
        gl.b_hh = Param(take(stem + "b_hh", 1, 3 * hy.d_v), stem + "b_hh");
        p.gru.layers.push_back(std::move(gl));
    }
    p.W_p = Param(take("W_p", hy.d_m(), 1), "W_p");
    p.b_p = Param(take("b_p", 1, 1), "b_p");
    p.W_e = Param(take("W_e", hy.d_m(), hy.d_v), "W_e");
    p.b_e = Param(take("b_e", 1, hy.d_v), "b_e");
    p.W_z = Param(take("W_z", hy.d_m(), hy.d_v), "W_z");
    p.b_z = Param(take("b_z", 1, hy.d_v), "b_z");
    if (!mats.empty())
        throw format_error("load_checkpoint: unexpected matrix '" + mats.begin()->first + "'");
    return p;
}

// Guard for running a checkpoint against a dataset with different node
// counts; names the offending field.
inline void check_compatible(const ModelParameters& params, Eigen::Index num_questions,
                             Eigen::Index num_kcs) {
    if (params.hyper.num_questions != num_questions)
        throw schema_error("checkpoint/dataset mismatch: question_keys rows (L): checkpoint " +
                           std::to_string(params.hyper.num_questions) + ", dataset " +
                           std::to_string(num_questions));
    if (params.hyper.num_kcs != num_kcs)
        throw schema_error("checkpoint/dataset mismatch: kc_keys rows (N): checkpoint " +
                           std::to_string(params.hyper.num_kcs) + ", dataset " +
                           std::to_string(num_kcs));
}

}  // namespace tgmn
