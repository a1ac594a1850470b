#pragma once

// Key-embedding pretraining. Node keys for questions and knowledge components
// are learned by regressing the hop distance between same-type node pairs on
// the bipartite graph: the regression target is an affine function of the
// cosine similarity between the two keys, so nodes that are close in the
// graph end up with similar keys. Both node types train jointly (alternating
// mini-batches) and the resulting key matrices are frozen for all downstream
// use, where they are consumed by dot-product addressing.

#include "tgmn/kcgraph.hpp"
#include "tgmn/matrix_io.hpp"
#include "tgmn/nn.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace tgmn {

enum class InputMode { onehot, text_vectors };

struct PretrainConfig {
    Eigen::Index d_k = 512;
    Eigen::Index hidden = 512;
    int epochs = 100;
    double lr = 1e-3;
    Eigen::Index batch_size = 32;
    std::uint64_t seed = 0;
    InputMode input_mode = InputMode::onehot;
    // text_vectors mode: one feature row per node, in node-id order.
    Mat question_features;
    Mat kc_features;
};

// Three-layer feed-forward encoder for one node type plus the fixed pair
// readout. In one-hot mode the first layer never materializes the identity
// input: the pre-activation for node i is just row i of the weight matrix
// (plus bias), which is also how mini-batches are gathered during training.
//
// The pair readout maps the cosine similarity of two keys to a hop estimate,
// hops ~= bias - cos(key_a, key_b), and is never trained: the trainer pins
// the bias above the largest training label, so the shortest-hop pairs can
// only fit the target by saturating their cosine toward one. Training also
// touches only the first layer of the encoder; the deeper layers stay at
// initialization. Together these keep pairs that never appear in training
// (e.g. across disconnected graph components) at their initialization-level
// similarity while trained pairs tighten, which is what makes key-space
// distance track graph distance.
struct NodeEncoder {
    InputMode mode = InputMode::onehot;
    Mat features;  // text mode only
    Linear f1, f2, f3;
    Linear head;  // fixed 1 -> 1 affine readout applied to the pair cosine

    NodeEncoder() = default;
    NodeEncoder(InputMode m, Eigen::Index node_count, Mat text_features, Eigen::Index hidden,
                Eigen::Index d_k, Rng& rng, const std::string& name)
        : mode(m), features(std::move(text_features)) {
        Eigen::Index input_dim = mode == InputMode::onehot ? node_count : features.cols();
        require(input_dim > 0, "NodeEncoder: empty input dimension");
        double sigma = 1.0 / std::sqrt(static_cast<double>(input_dim));
        f1 = Linear(input_dim, hidden, sigma, rng, name + ".f1");
        f2 = Linear(hidden, hidden, 1.0 / std::sqrt(static_cast<double>(hidden)), rng,
                    name + ".f2");
        f3 = Linear(hidden, d_k, 1.0 / std::sqrt(static_cast<double>(hidden)), rng, name + ".f3");
        head.W = Param(Mat::Constant(1, 1, -1.0), name + ".head.W");
        head.b = Param(Mat::Constant(1, 1, 2.0), name + ".head.b");  // trainer sets 1 + max hop
    }

    // The parameters the pair task actually optimizes (first layer only; see
    // the struct comment for why the rest stays frozen).
    std::vector<Param*> trainable_params() { return f1.params(); }

    // Deterministic forward pass producing the key for every node.
    [[nodiscard]] Mat encode_all() const {
        Mat h1 = mode == InputMode::onehot
                     ? Mat(f1.W.value.rowwise() + f1.b.value.row(0))
                     : Mat((features * f1.W.value).rowwise() + f1.b.value.row(0));
        Mat h2 = ((h1.cwiseMax(0.0) * f2.W.value).rowwise() + f2.b.value.row(0)).cwiseMax(0.0);
        return (h2 * f3.W.value).rowwise() + f3.b.value.row(0);
    }
};

// Scalar hop estimate for a key pair: the fixed affine readout of their
// cosine similarity. Exactly symmetric in its arguments.
inline double predict_hops(const NodeEncoder& encoder, const Vec& key_a, const Vec& key_b) {
    if (key_a.size() != key_b.size())
        throw argument_error("predict_hops: key dimension mismatch");
    double denom = std::max(key_a.norm() * key_b.norm(), 1e-30);
    double cos_ab = key_a.dot(key_b) / denom;
    return encoder.head.W.value(0, 0) * cos_ab + encoder.head.b.value(0, 0);
}

struct KeyEmbeddings {
    Mat question_keys;  // L x d_k
    Mat kc_keys;        // N x d_k

    [[nodiscard]] Eigen::Index d_k() const { return kc_keys.cols(); }
};

struct PretrainResult {
    KeyEmbeddings keys;
    std::vector<double> epoch_mse;  // mean over both pair tasks, one per epoch
    NodeEncoder enc_q, enc_c;       // trained encoders, kept for hop probing
};

namespace detail {

inline void check_features(const Mat& features, std::size_t node_count, const char* what) {
    if (features.rows() == static_cast<Eigen::Index>(node_count)) return;
    std::string missing;
    for (auto i = static_cast<std::size_t>(std::max<Eigen::Index>(features.rows(), 0));
         i < node_count; ++i) {
        if (!missing.empty()) missing += ",";
        missing += std::to_string(i);
    }
    throw data_error(std::string("pretrain: ") + what + " feature rows (" +
                     std::to_string(features.rows()) + ") do not cover all " +
                     std::to_string(node_count) + " nodes; missing ids: " +
                     (missing.empty() ? "(extra rows supplied)" : missing));
}

// Row-wise cosine similarity between two equally-shaped batches, as a tape op
// with a hand-rolled backward pass (B x d, B x d -> B x 1).
inline Var cosine_rows(Tape& t, Var a, Var b) {
    Mat A = t.value(a), B = t.value(b);
    Mat c(A.rows(), 1);
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
        double na = A.row(i).norm(), nb = B.row(i).norm();
        c(i, 0) = A.row(i).dot(B.row(i)) / std::max(na * nb, 1e-30);
    }
    return t.custom(c, {a, b}, [a, b, A, B, c](Tape& tp, Var out) {
        const Mat& G = tp.grad(out);
        Mat dA = Mat::Zero(A.rows(), A.cols()), dB = dA;
        for (Eigen::Index i = 0; i < A.rows(); ++i) {
            double na = std::max(A.row(i).norm(), 1e-15);
            double nb = std::max(B.row(i).norm(), 1e-15);
            double g = G(i, 0), ci = c(i, 0);
            dA.row(i) = g * (B.row(i) / (na * nb) - ci * A.row(i) / (na * na));
            dB.row(i) = g * (A.row(i) / (na * nb) - ci * B.row(i) / (nb * nb));
        }
        tp.accumulate(a, dA);
        tp.accumulate(b, dB);
    });
}

// Batched key computation on the training tape. One-hot first layers are a
// row gather of the weight matrix; text mode gathers feature rows first.
// Only the first layer participates as a parameter; the deeper layers enter
// as constants (see NodeEncoder).
inline Var encode_batch(Tape& t, NodeEncoder& enc, const std::vector<Eigen::Index>& ids) {
    Var h1 = enc.mode == InputMode::onehot
                 ? t.add_rowvec(t.gather_rows(t.param(enc.f1.W), ids), t.param(enc.f1.b))
                 : t.add_rowvec(t.matmul(t.gather_rows(t.constant(enc.features), ids),
                                         t.param(enc.f1.W)),
                                t.param(enc.f1.b));
    Var h2 = t.relu(t.add_rowvec(t.matmul(t.relu(h1), t.constant(enc.f2.W.value)),
                                 t.constant(enc.f2.b.value)));
    return t.add_rowvec(t.matmul(h2, t.constant(enc.f3.W.value)), t.constant(enc.f3.b.value));
}

// Mean squared error between the pair hop estimates and hop labels for one
// mini-batch; returns the 1x1 loss node.
inline Var pair_mse(Tape& t, NodeEncoder& enc, const std::vector<HopPair>& pairs,
                    const std::vector<std::size_t>& order, std::size_t begin, std::size_t end) {
    std::vector<Eigen::Index> ids_a, ids_b;
    Mat labels(static_cast<Eigen::Index>(end - begin), 1);
    for (std::size_t i = begin; i < end; ++i) {
        const HopPair& p = pairs[order[i]];
        ids_a.push_back(p.node_a);
        ids_b.push_back(p.node_b);
        labels(static_cast<Eigen::Index>(i - begin), 0) = static_cast<double>(p.hops);
    }
    Var cos_ab = cosine_rows(t, encode_batch(t, enc, ids_a), encode_batch(t, enc, ids_b));
    Var pred = t.add(t.scale(cos_ab, enc.head.W.value(0, 0)),
                     t.constant(Mat::Constant(labels.rows(), 1, enc.head.b.value(0, 0))));
    Var diff = t.sub(pred, t.constant(labels));
    Var sq = t.cwise_mul(diff, diff);
    double inv_n = 1.0 / static_cast<double>(end - begin);
    return t.matmul(t.constant(Mat::Constant(1, labels.rows(), inv_n)), sq);
}

}  // namespace detail

// Joint pretraining over question-pair and KC-pair hop regression. Returns
// every node's key (frozen thereafter) plus the per-epoch training MSE.
inline PretrainResult pretrain_embeddings(const BipartiteGraph& graph,
                                          const std::vector<HopPair>& pairs_q,
                                          const std::vector<HopPair>& pairs_c,
                                          const PretrainConfig& config) {
    require(config.d_k > 0 && config.hidden > 0, "pretrain: dimensions must be positive");
    require(config.epochs >= 0, "pretrain: epochs must be non-negative");
    require(config.batch_size > 0, "pretrain: batch size must be positive");
    for (const auto& p : pairs_q)
        require(p.node_type == NodeType::question && p.node_a < graph.num_questions &&
                    p.node_b < graph.num_questions,
                "pretrain: question pair outside graph");
    for (const auto& p : pairs_c)
        require(p.node_type == NodeType::kc && p.node_a < graph.num_kcs &&
                    p.node_b < graph.num_kcs,
                "pretrain: KC pair outside graph");
    if (config.input_mode == InputMode::text_vectors) {
        detail::check_features(config.question_features,
                               static_cast<std::size_t>(graph.num_questions), "question");
        detail::check_features(config.kc_features, static_cast<std::size_t>(graph.num_kcs), "KC");
    }

    Rng rng(config.seed);
    Rng init_rng = rng.split("pretrain-init");
    Rng shuffle_rng = rng.split("pretrain-batches");
    NodeEncoder enc_q(config.input_mode, graph.num_questions, config.question_features,
                      config.hidden, config.d_k, init_rng, "enc_q");
    NodeEncoder enc_c(config.input_mode, graph.num_kcs, config.kc_features, config.hidden,
                      config.d_k, init_rng, "enc_c");

    // Pin each readout bias one above the task's largest label so the closest
    // pairs are fit by driving their cosine into saturation.
    const auto pin_readout = [](NodeEncoder& enc, const std::vector<HopPair>& pairs) {
        std::int32_t max_hop = 1;
        for (const auto& p : pairs) max_hop = std::max(max_hop, p.hops);
        enc.head.b.value(0, 0) = 1.0 + static_cast<double>(max_hop);
    };
    pin_readout(enc_q, pairs_q);
    pin_readout(enc_c, pairs_c);

    // Separate optimizers keep the two tasks' moment estimates independent:
    // a step for one node type must not drift the other's parameters.
    Adam opt_q(enc_q.trainable_params(), config.lr);
    Adam opt_c(enc_c.trainable_params(), config.lr);

    const auto batches_of = [&](std::size_t n) {
        auto b = static_cast<std::size_t>(config.batch_size);
        return (n + b - 1) / b;
    };

    PretrainResult result;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::vector<std::size_t> order_q(pairs_q.size()), order_c(pairs_c.size());
        std::iota(order_q.begin(), order_q.end(), std::size_t{0});
        std::iota(order_c.begin(), order_c.end(), std::size_t{0});
        shuffle_rng.shuffle(order_q);
        shuffle_rng.shuffle(order_c);

        double sq_err = 0.0;
        std::size_t count = 0;
        std::size_t nb = std::max(batches_of(pairs_q.size()), batches_of(pairs_c.size()));
        for (std::size_t b = 0; b < nb; ++b) {
            // Alternate the two tasks inside every slot so neither starves.
            for (int task = 0; task < 2; ++task) {
                NodeEncoder& enc = task == 0 ? enc_q : enc_c;
                Adam& opt = task == 0 ? opt_q : opt_c;
                const auto& pairs = task == 0 ? pairs_q : pairs_c;
                const auto& order = task == 0 ? order_q : order_c;
                std::size_t begin = b * static_cast<std::size_t>(config.batch_size);
                if (begin >= pairs.size()) continue;
                std::size_t end =
                    std::min(pairs.size(), begin + static_cast<std::size_t>(config.batch_size));
                Tape t;
                Var loss = detail::pair_mse(t, enc, pairs, order, begin, end);
                sq_err += t.value(loss)(0, 0) * static_cast<double>(end - begin);
                count += end - begin;
                t.backward(loss);
                opt.step();
            }
        }
        result.epoch_mse.push_back(count > 0 ? sq_err / static_cast<double>(count) : 0.0);
    }

    result.keys.question_keys = enc_q.encode_all();
    result.keys.kc_keys = enc_c.encode_all();
    require_finite(result.keys.question_keys, "pretrained question keys");
    require_finite(result.keys.kc_keys, "pretrained KC keys");
    result.enc_q = std::move(enc_q);
    result.enc_c = std::move(enc_c);
    return result;
}

// The two key matrices travel as a pair of plain matrix files sharing a stem.
inline std::filesystem::path question_keys_path(const std::filesystem::path& stem) {
    auto p = stem;
    p += ".qkeys";
    return p;
}
inline std::filesystem::path kc_keys_path(const std::filesystem::path& stem) {
    auto p = stem;
    p += ".ckeys";
    return p;
}

inline void export_keys(const KeyEmbeddings& keys, const std::filesystem::path& stem) {
    require(keys.question_keys.cols() == keys.kc_keys.cols(),
            "export_keys: question/KC key dimensions differ");
    for (auto&& [path, mat] :
         {std::pair<std::filesystem::path, const Mat*>{question_keys_path(stem),
                                                       &keys.question_keys},
          std::pair<std::filesystem::path, const Mat*>{kc_keys_path(stem), &keys.kc_keys}}) {
        std::ofstream out(path);
        if (!out) throw data_error("export_keys: cannot open " + path.string());
        write_matrix(out, *mat);
        if (!out) throw data_error("export_keys: write failed for " + path.string());
    }
}

inline KeyEmbeddings load_keys(const std::filesystem::path& stem) {
    KeyEmbeddings keys;
    for (auto&& [path, mat] :
         {std::pair<std::filesystem::path, Mat*>{question_keys_path(stem), &keys.question_keys},
          std::pair<std::filesystem::path, Mat*>{kc_keys_path(stem), &keys.kc_keys}}) {
        std::ifstream in(path);
        if (!in) throw data_error("load_keys: cannot open " + path.string());
        *mat = read_matrix(in, path.string());
    }
    if (keys.question_keys.cols() != keys.kc_keys.cols())
        throw format_error("load_keys: question/KC key dimensions differ between files");
    return keys;
}

}  // namespace tgmn
