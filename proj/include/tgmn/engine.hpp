#pragma once

// Mini-batched training and evaluation for the memory-network answer model.
//
// Students in a batch advance in lockstep through tumbling windows of
// hyper.window steps; each window is one reverse-mode tape. The incoming
// per-student memories enter that tape as a constant snapshot, so gradients
// are truncated at window boundaries (full-history backpropagation through
// a whole batch is available behind TrainConfig::full_bptt). Within a
// window the step math is exactly the single-student step(): slot addressing
// and window relevancy come from the frozen keys and are constants; the
// short-term context is re-run from scratch over the window prefix for every
// target step; the observed answer (teacher forcing) drives the status rows,
// the gated write, and the decay, while the prediction itself never sees it.
//
// Students whose sequences end early stay in the batch as padding rows:
// their loss rows are masked out, their write relevancy is zeroed so the
// gated update leaves their memory untouched, and their decay factor is
// pinned to one. Padding rows only ever influence themselves, so the active
// rows are bit-for-bit independent of how much padding sits beside them.

#include "tgmn/datasets.hpp"
#include "tgmn/metrics.hpp"
#include "tgmn/nn.hpp"
#include "tgmn/seqctx.hpp"
#include "tgmn/tgm.hpp"
#include "tgmn/tgmn_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace tgmn {

struct TrainConfig {
    int epochs = 100;
    Eigen::Index batch_size = 32;
    double lr = 1e-3;
    double dropout = 0.2;    // recurrent dropout between stacked GRU layers, training only
    std::uint64_t seed = 0;
    bool full_bptt = false;  // default: truncate gradients at window boundaries
    int patience = 0;        // epochs without validation improvement before stopping (0 = off)
    double stop_auc = 0.0;   // stop once validation AUC reaches this (0 = off)
    bool verbose = false;    // one progress line per epoch on stderr
};

struct EpochStats {
    int epoch = 0;            // 1-based
    double train_loss = 0.0;  // teacher-forced BCE, every (student, step) cell weighted equally
    double val_loss = std::numeric_limits<double>::quiet_NaN();
    double val_auc = std::numeric_limits<double>::quiet_NaN();
    double val_accuracy = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
    std::vector<EpochStats> history;
    int best_epoch = 0;  // 1-based; 0 when no validation set was given
    double best_val_auc = std::numeric_limits<double>::quiet_NaN();
    bool stopped_early = false;
};

struct EvalResult {
    std::vector<double> probs;  // pooled over students: window-major, then step, then student
    std::vector<int> labels;
    BinaryMetrics metrics;
};

inline std::vector<const StudentLog*> select_students(const CanonicalDataset& ds,
                                                      const std::vector<std::int64_t>& ids) {
    std::map<std::int64_t, const StudentLog*> by_id;
    for (const auto& s : ds.students) by_id.emplace(s.student_id, &s);
    std::vector<const StudentLog*> out;
    out.reserve(ids.size());
    for (auto id : ids) {
        auto it = by_id.find(id);
        if (it == by_id.end())
            throw argument_error("select_students: unknown student id " + std::to_string(id));
        out.push_back(it->second);
    }
    return out;
}

namespace detail {

/// Per-tape handles for every learnable tensor plus the propagation matrix,
/// which depends only on M_q and is therefore built once per tape. The
/// optional frozen mask pins the adjacency cut (gradient checks perturb
/// parameters, and the quantile cut is not differentiable).
struct ModelVars {
    Var M_q;
    std::vector<Var> gcn;
    Var W_r, b_r, W_p, b_p, W_e, b_e, W_z, b_z;
    GruVars gru;
    Var propagation;
};

inline ModelVars register_model(Tape& t, ModelParameters& p, const Mat* frozen_mask = nullptr) {
    ModelVars v;
    v.M_q = t.param(p.M_q);
    v.gcn.reserve(p.gcn_weights.size());
    for (auto& w : p.gcn_weights) v.gcn.push_back(t.param(w));
    v.W_r = t.param(p.W_r);
    v.b_r = t.param(p.b_r);
    v.W_p = t.param(p.W_p);
    v.b_p = t.param(p.b_p);
    v.W_e = t.param(p.W_e);
    v.b_e = t.param(p.b_e);
    v.W_z = t.param(p.W_z);
    v.b_z = t.param(p.b_z);
    v.gru = register_gru(t, p.gru);
    Var A = adjacency_t(t, v.M_q, p.kc_keys);
    v.propagation = frozen_mask ? propagation_t_frozen(t, A, *frozen_mask)
                                : propagation_t(t, A, p.hyper.mask_quantile);
    return v;
}

struct WindowOutcome {
    Var memory;    // (B*N) x d_v end-of-window memory node
    Var loss;      // 1x1, every active cell weighted equally; valid iff has_loss
    bool has_loss = false;
    Eigen::Index cells = 0;     // active (student, step) cells in the loss
    double loss_value = 0.0;
    std::vector<double> probs;  // one entry per active cell, step-major then batch order
    std::vector<int> labels;
};

/// Advance one tumbling window for a batch of students on the given tape.
/// `start` is the global interaction index of the window's first step;
/// `memory` is the (B*N) x d_v incoming memory node (a constant snapshot for
/// truncated backpropagation, a live node under full_bptt). Every window
/// starts with an empty short-term history, mirroring the single-student
/// window reset.
inline WindowOutcome window_forward(Tape& t, const ModelVars& vars, const ModelParameters& params,
                                    const std::vector<const StudentLog*>& batch, std::size_t start,
                                    Eigen::Index steps, Var memory, StepMode mode,
                                    const std::vector<Var>* gru_masks = nullptr) {
    const ModelHyper& hy = params.hyper;
    const auto B = static_cast<Eigen::Index>(batch.size());
    const Eigen::Index N = hy.num_kcs, d_v = hy.d_v, d_m = hy.d_m();
    require(B >= 1, "window_forward: empty batch");
    require(steps >= 1 && steps <= hy.window, "window_forward: bad step count");
    {
        const Mat& mem0 = t.value(memory);
        require(mem0.rows() == B * N && mem0.cols() == d_v,
                "window_forward: memory must be (B*N) x d_v");
    }

    WindowOutcome out;
    std::vector<Var> u_vars;                     // one B x d_m node per completed step
    std::vector<std::vector<Vec>> past_keys(B);  // per-student question keys this window
    std::vector<Var> losses;
    std::vector<double> counts;

    for (Eigen::Index s = 0; s < steps; ++s) {
        const std::size_t g = start + static_cast<std::size_t>(s);

        std::vector<bool> active(static_cast<std::size_t>(B));
        std::vector<Eigen::Index> qs(static_cast<std::size_t>(B), 0);
        std::vector<int> as(static_cast<std::size_t>(B), 0);
        Eigen::Index n_active = 0;
        for (Eigen::Index b = 0; b < B; ++b) {
            const auto& log = *batch[static_cast<std::size_t>(b)];
            if (g < log.interactions.size()) {
                const Interaction& it = log.interactions[g];
                if (it.question < 0 || it.question >= hy.num_questions)
                    throw argument_error("window_forward: unknown question id " +
                                         std::to_string(it.question) + " for student " +
                                         std::to_string(log.student_id));
                require(it.answer == 0 || it.answer == 1,
                        "window_forward: answers must be binary");
                active[static_cast<std::size_t>(b)] = true;
                qs[static_cast<std::size_t>(b)] = it.question;
                as[static_cast<std::size_t>(b)] = it.answer;
                ++n_active;
            }
        }
        require(n_active > 0, "window_forward: no active students at step");

        // Slot addressing from the frozen keys; padding rows reuse question 0
        // so every row stays bounded, and their write relevancy is zeroed.
        std::vector<Vec> kq(static_cast<std::size_t>(B));
        Mat w_read(B * N, 1);
        Vec w_vec(B * N), w_write(B * N);
        for (Eigen::Index b = 0; b < B; ++b) {
            kq[static_cast<std::size_t>(b)] =
                params.question_keys.row(qs[static_cast<std::size_t>(b)]).transpose();
            Vec w = address(params.kc_keys, kq[static_cast<std::size_t>(b)], hy.tau);
            w_read.col(0).segment(b * N, N) = w;
            w_vec.segment(b * N, N) = w;
            w_write.segment(b * N, N) = active[static_cast<std::size_t>(b)] ? w : Vec::Zero(N);
        }

        // Long-term read: relevancy-weighted memory through the slot graph.
        Var wr = t.constant(w_read);
        Var H = t.row_scale(memory, wr);
        for (Var W_j : vars.gcn)
            H = t.relu(t.matmul(t.block_lmul(vars.propagation, t.row_scale(H, wr), B, N), W_j));
        Var r = hy.mean_pool_read
                    ? t.tanh_(t.add_rowvec(t.matmul(t.block_mean_rows(H, B, N), vars.W_r),
                                           vars.b_r))
                    : t.tanh_(t.add_rowvec(t.matmul(t.rows_to_cols(H, B, N), vars.W_r), vars.b_r));

        // Short-term context: rerun the recurrent summary over the window
        // prefix, rescaled by this target's relevancy to each past step.
        Var h;
        if (hy.use_sequence_context && s > 0) {
            Mat ocols = Mat::Zero(B, s);
            for (Eigen::Index b = 0; b < B; ++b) {
                if (!active[static_cast<std::size_t>(b)]) continue;
                Vec o = sequence_relevancy(kq[static_cast<std::size_t>(b)],
                                           past_keys[static_cast<std::size_t>(b)], hy.tau);
                ocols.row(b) = o.transpose();
            }
            std::vector<Var> scaled;
            scaled.reserve(static_cast<std::size_t>(s));
            for (Eigen::Index i = 0; i < s; ++i)
                scaled.push_back(t.row_scale(u_vars[static_cast<std::size_t>(i)],
                                             t.constant(Mat(ocols.col(i)))));
            h = sequence_context_t(t, vars.gru, scaled, B,
                                   mode == StepMode::train ? gru_masks : nullptr);
        } else {
            h = t.constant(Mat::Zero(B, d_v));
        }

        Var m = t.concat_cols(r, h);
        Var probs = t.sigmoid_(t.add_rowvec(t.matmul(m, vars.W_p), vars.b_p));
        Mat pv = t.value(probs);  // copy: later pushes may reallocate node storage

        Mat labels(B, 1), mask(B, 1);
        for (Eigen::Index b = 0; b < B; ++b) {
            labels(b, 0) = as[static_cast<std::size_t>(b)];
            mask(b, 0) = active[static_cast<std::size_t>(b)] ? 1.0 : 0.0;
        }
        losses.push_back(t.bce_mean(probs, labels, mask));
        counts.push_back(static_cast<double>(n_active));
        out.cells += n_active;
        for (Eigen::Index b = 0; b < B; ++b)
            if (active[static_cast<std::size_t>(b)]) {
                out.probs.push_back(pv(b, 0));
                out.labels.push_back(as[static_cast<std::size_t>(b)]);
            }

        // Everything below observes the answer; the prediction is fixed.
        Var u = m;
        if (hy.use_status_encoding) {
            Mat status(B, d_m);
            for (Eigen::Index b = 0; b < B; ++b) {
                int pred = pv(b, 0) >= 0.5 ? 1 : 0;
                status.row(b) = params.A_status.row(2 * pred + as[static_cast<std::size_t>(b)]);
            }
            u = t.add(m, t.constant(status));
        }
        u_vars.push_back(u);
        for (Eigen::Index b = 0; b < B; ++b)
            past_keys[static_cast<std::size_t>(b)].push_back(kq[static_cast<std::size_t>(b)]);

        Var e = t.sigmoid_(t.add_rowvec(t.matmul(u, vars.W_e), vars.b_e));
        Var z = t.tanh_(t.add_rowvec(t.matmul(u, vars.W_z), vars.b_z));
        memory = memory_update_t(t, memory, w_write, e, z, B, N);
        if (hy.use_decay)
            memory = t.row_scale(
                memory, t.constant(Mat(decay_factor_rows(w_vec, hy.gamma, active, B, N))));
    }

    if (!losses.empty()) {
        double total = 0.0;
        for (double c : counts) total += c;
        Var L = t.scale(losses[0], counts[0] / total);
        for (std::size_t i = 1; i < losses.size(); ++i)
            L = t.add(L, t.scale(losses[i], counts[i] / total));
        out.loss = L;
        out.has_loss = true;
        out.loss_value = t.value(L)(0, 0);
    }
    out.memory = memory;
    return out;
}

inline std::string batch_label(const std::vector<const StudentLog*>& batch) {
    std::string ids;
    for (std::size_t i = 0; i < batch.size() && i < 8; ++i) {
        if (i) ids += ", ";
        ids += std::to_string(batch[i]->student_id);
    }
    if (batch.size() > 8) ids += ", ...";
    return ids;
}

}  // namespace detail

/// Score a set of students with teacher forcing: every prediction is made
/// before its answer is revealed, then the observed answer updates the
/// memory, exactly as in training. Parameters are taken non-const because
/// tape registration needs mutable gradient slots, but no backward pass runs
/// and no value is modified.
inline EvalResult evaluate_model(ModelParameters& params,
                                 const std::vector<const StudentLog*>& students,
                                 Eigen::Index batch_size = 32) {
    require(batch_size >= 1, "evaluate_model: batch_size must be >= 1");
    require(!students.empty(), "evaluate_model: no students to score");
    const ModelHyper& hy = params.hyper;
    EvalResult out;
    for (std::size_t i0 = 0; i0 < students.size(); i0 += static_cast<std::size_t>(batch_size)) {
        std::vector<const StudentLog*> batch(
            students.begin() + static_cast<std::ptrdiff_t>(i0),
            students.begin() +
                static_cast<std::ptrdiff_t>(
                    std::min(i0 + static_cast<std::size_t>(batch_size), students.size())));
        std::size_t max_len = 0;
        for (const auto* s : batch) max_len = std::max(max_len, s->interactions.size());
        const auto B = static_cast<Eigen::Index>(batch.size());
        Mat mv = Mat::Zero(B * hy.num_kcs, hy.d_v);
        for (std::size_t start = 0; start < max_len;
             start += static_cast<std::size_t>(hy.window)) {
            auto steps = static_cast<Eigen::Index>(
                std::min(static_cast<std::size_t>(hy.window), max_len - start));
            Tape t;
            auto vars = detail::register_model(t, params);
            auto o = detail::window_forward(t, vars, params, batch, start, steps, t.constant(mv),
                                            StepMode::eval);
            mv = t.value(o.memory);
            out.probs.insert(out.probs.end(), o.probs.begin(), o.probs.end());
            out.labels.insert(out.labels.end(), o.labels.begin(), o.labels.end());
        }
    }
    require(!out.probs.empty(), "evaluate_model: students have no interactions");
    out.metrics = binary_metrics(out.probs, out.labels);
    return out;
}

inline EvalResult evaluate_model(ModelParameters& params, const CanonicalDataset& ds,
                                 const std::vector<std::int64_t>& ids,
                                 Eigen::Index batch_size = 32) {
    check_compatible(params, ds.num_questions, ds.num_kcs);
    auto students = select_students(ds, ids);
    return evaluate_model(params, students, batch_size);
}

/// Fit the answer model with Adam over shuffled student mini-batches. When a
/// validation set is given, the parameters left in `params` afterwards are
/// those of the best validation epoch (AUC first, loss as the tie-breaker
/// when AUC is undefined), and early stopping honours patience/stop_auc.
inline TrainResult train_model(ModelParameters& params, const CanonicalDataset& ds,
                               const std::vector<std::int64_t>& train_ids,
                               const std::vector<std::int64_t>& val_ids,
                               const TrainConfig& cfg) {
    require(cfg.epochs >= 1, "train_model: epochs must be >= 1");
    require(cfg.batch_size >= 1, "train_model: batch_size must be >= 1");
    require(cfg.lr >= 0.0, "train_model: learning rate must be non-negative");
    require(cfg.dropout >= 0.0 && cfg.dropout < 1.0, "train_model: dropout must be in [0,1)");
    require(cfg.patience >= 0 && cfg.stop_auc >= 0.0 && cfg.stop_auc <= 1.0,
            "train_model: bad early-stopping settings");
    check_compatible(params, ds.num_questions, ds.num_kcs);
    auto train_students = select_students(ds, train_ids);
    auto val_students = select_students(ds, val_ids);
    require(!train_students.empty(), "train_model: empty training set");
    std::size_t total_cells = 0;
    for (const auto* s : train_students) total_cells += s->interactions.size();
    require(total_cells > 0, "train_model: training students have no interactions");

    const ModelHyper& hy = params.hyper;
    const Eigen::Index N = hy.num_kcs, d_v = hy.d_v;
    const auto S = static_cast<std::size_t>(hy.window);
    const int gaps = hy.gru_layers - 1;

    Adam opt(params.params(), cfg.lr);
    Rng root(cfg.seed);
    Rng shuffle_rng = root.split("train-shuffle");
    Rng dropout_rng = root.split("train-dropout");

    TrainResult result;
    std::optional<ModelParameters> best;
    double best_auc = std::numeric_limits<double>::quiet_NaN();
    double best_loss = std::numeric_limits<double>::infinity();
    int since_best = 0;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<const StudentLog*> order = train_students;
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0, cell_sum = 0.0;
        for (std::size_t i0 = 0; i0 < order.size(); i0 += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<const StudentLog*> batch(
                order.begin() + static_cast<std::ptrdiff_t>(i0),
                order.begin() + static_cast<std::ptrdiff_t>(std::min(
                                    i0 + static_cast<std::size_t>(cfg.batch_size), order.size())));
            std::size_t max_len = 0;
            for (const auto* s : batch) max_len = std::max(max_len, s->interactions.size());
            if (max_len == 0) continue;
            const auto B = static_cast<Eigen::Index>(batch.size());

            auto make_masks = [&](Tape& t) {
                std::vector<Var> ms;
                if (cfg.dropout > 0.0)
                    for (int gap = 0; gap < gaps; ++gap)
                        ms.push_back(t.constant(dropout_mask(dropout_rng, B, d_v, cfg.dropout)));
                return ms;
            };
            auto bad_loss = [&](std::size_t start) {
                return numeric_error("train_model: non-finite training loss at epoch " +
                                     std::to_string(epoch) + ", window starting at step " +
                                     std::to_string(start) + " (students " +
                                     detail::batch_label(batch) + ")");
            };

            if (!cfg.full_bptt) {
                Mat mv = Mat::Zero(B * N, d_v);
                for (std::size_t start = 0; start < max_len; start += S) {
                    auto steps = static_cast<Eigen::Index>(std::min(S, max_len - start));
                    Tape t;
                    auto vars = detail::register_model(t, params);
                    auto masks = make_masks(t);
                    auto o = detail::window_forward(t, vars, params, batch, start, steps,
                                                    t.constant(mv), StepMode::train,
                                                    masks.empty() ? nullptr : &masks);
                    mv = t.value(o.memory);
                    if (!o.has_loss) continue;
                    if (!std::isfinite(o.loss_value)) throw bad_loss(start);
                    t.backward(o.loss);
                    opt.step();
                    loss_sum += o.loss_value * static_cast<double>(o.cells);
                    cell_sum += static_cast<double>(o.cells);
                }
            } else {
                Tape t;
                auto vars = detail::register_model(t, params);
                Var mem = t.constant(Mat::Zero(B * N, d_v));
                std::vector<Var> losses;
                std::vector<double> counts;
                double batch_cells = 0.0;
                for (std::size_t start = 0; start < max_len; start += S) {
                    auto steps = static_cast<Eigen::Index>(std::min(S, max_len - start));
                    auto masks = make_masks(t);
                    auto o = detail::window_forward(t, vars, params, batch, start, steps, mem,
                                                    StepMode::train,
                                                    masks.empty() ? nullptr : &masks);
                    mem = o.memory;
                    if (!o.has_loss) continue;
                    if (!std::isfinite(o.loss_value)) throw bad_loss(start);
                    losses.push_back(o.loss);
                    counts.push_back(static_cast<double>(o.cells));
                    batch_cells += static_cast<double>(o.cells);
                }
                if (!losses.empty()) {
                    Var L = t.scale(losses[0], counts[0] / batch_cells);
                    for (std::size_t i = 1; i < losses.size(); ++i)
                        L = t.add(L, t.scale(losses[i], counts[i] / batch_cells));
                    double lv = t.value(L)(0, 0);
                    t.backward(L);
                    opt.step();
                    loss_sum += lv * batch_cells;
                    cell_sum += batch_cells;
                }
            }
        }

        EpochStats st;
        st.epoch = epoch;
        st.train_loss = loss_sum / cell_sum;
        bool improved = false;
        if (!val_students.empty()) {
            auto ev = evaluate_model(params, val_students, cfg.batch_size);
            st.val_loss = ev.metrics.loss;
            st.val_auc = ev.metrics.auc;
            st.val_accuracy = ev.metrics.accuracy;
            if (!best) improved = true;
            else if (std::isfinite(st.val_auc) && std::isfinite(best_auc))
                improved = st.val_auc > best_auc;
            else if (std::isfinite(st.val_auc)) improved = true;
            else if (!std::isfinite(best_auc)) improved = st.val_loss < best_loss;
            if (improved) {
                best = params;
                best_auc = st.val_auc;
                best_loss = st.val_loss;
                result.best_epoch = epoch;
                since_best = 0;
            } else {
                ++since_best;
            }
        }
        result.history.push_back(st);
        if (cfg.verbose) {
            std::cerr << "epoch " << epoch << "/" << cfg.epochs << "  train_loss "
                      << st.train_loss;
            if (!val_students.empty())
                std::cerr << "  val_loss " << st.val_loss << "  val_auc " << st.val_auc
                          << "  val_acc " << st.val_accuracy;
            std::cerr << '\n';
        }
        if (!val_students.empty()) {
            if (cfg.stop_auc > 0.0 && std::isfinite(st.val_auc) && st.val_auc >= cfg.stop_auc) {
                result.stopped_early = true;
                break;
            }
            if (cfg.patience > 0 && since_best >= cfg.patience) {
                result.stopped_early = true;
                break;
            }
        }
    }

    if (best) {
        params = std::move(*best);
        result.best_val_auc = best_auc;
    }
    return result;
}

}  // namespace tgmn
