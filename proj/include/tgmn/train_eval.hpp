#pragma once

#include "tgmn/config.hpp"
#include "tgmn/datasets.hpp"
#include "tgmn/engine.hpp"
#include "tgmn/metrics.hpp"
#include "tgmn/pretrain.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace tgmn {

/// Stable per-purpose seed derivation, so a fold's shuffle stream can never
/// collide with its init stream and runs stay reproducible from one number.
inline std::uint64_t derive_seed(std::uint64_t seed, const std::string& label) {
    return fnv1a(label, 0xcbf29ce484222325ull ^ seed);
}

// ---- history files ---------------------------------------------------------

struct HistoryRow {
    int epoch = 0;
    std::string split;  // "train" or "val"
    double loss = std::numeric_limits<double>::quiet_NaN();
    double auc = std::numeric_limits<double>::quiet_NaN();
    double accuracy = std::numeric_limits<double>::quiet_NaN();
};

inline std::vector<HistoryRow> history_rows(const TrainResult& r) {
    std::vector<HistoryRow> rows;
    for (const auto& e : r.history) {
        rows.push_back({e.epoch, "train", e.train_loss, std::numeric_limits<double>::quiet_NaN(),
                        std::numeric_limits<double>::quiet_NaN()});
        if (std::isfinite(e.val_loss))
            rows.push_back({e.epoch, "val", e.val_loss, e.val_auc, e.val_accuracy});
    }
    return rows;
}

inline void write_history_csv(const std::filesystem::path& path,
                              const std::vector<HistoryRow>& rows) {
    std::ofstream out(path);
    if (!out) throw data_error("history: cannot write " + path.string());
    out << "epoch,split,loss,auc,accuracy\n";
    out.precision(17);
    for (const auto& r : rows)
        out << r.epoch << ',' << r.split << ',' << r.loss << ',' << r.auc << ',' << r.accuracy
            << '\n';
    if (!out) throw data_error("history: write failed for " + path.string());
}

inline std::vector<HistoryRow> read_history_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw data_error("history: cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "epoch,split,loss,auc,accuracy")
        throw format_error("history: bad header in " + path.string());
    std::vector<HistoryRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string field;
        HistoryRow r;
        try {
            std::getline(ls, field, ',');
            r.epoch = std::stoi(field);
            std::getline(ls, r.split, ',');
            std::getline(ls, field, ',');
            r.loss = std::stod(field);
            std::getline(ls, field, ',');
            r.auc = std::stod(field);
            std::getline(ls, field, ',');
            r.accuracy = std::stod(field);
        } catch (const std::exception&) {
            throw format_error("history: bad row '" + line + "' in " + path.string());
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

/// First epoch whose validation AUC reaches `target`; 0 if never reached.
inline int epochs_to_auc(const TrainResult& r, double target) {
    for (const auto& e : r.history)
        if (std::isfinite(e.val_auc) && e.val_auc >= target) return e.epoch;
    return 0;
}

// ---- fold protocol ---------------------------------------------------------

/// Split ids into (train, validation) with `fraction` of the students held
/// out for model selection — at least one student on each side.
inline std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>> carve_validation(
    std::vector<std::int64_t> ids, double fraction, Rng rng) {
    require(ids.size() >= 2, "carve_validation: need at least two students");
    require(fraction > 0.0 && fraction < 1.0, "carve_validation: fraction must be in (0,1)");
    rng.shuffle(ids);
    auto n_val = static_cast<std::size_t>(
        std::llround(fraction * static_cast<double>(ids.size())));
    n_val = std::max<std::size_t>(1, std::min(n_val, ids.size() - 1));
    std::vector<std::int64_t> val(ids.end() - static_cast<std::ptrdiff_t>(n_val), ids.end());
    ids.resize(ids.size() - n_val);
    return {std::move(ids), std::move(val)};
}

/// Hard guarantee that no student leaks between the three splits and that
/// together they cover exactly the dataset. Checked on every fold of every
/// run; a violation is a protocol bug, not a recoverable condition.
inline void assert_fold_hygiene(const CanonicalDataset& ds,
                                const std::vector<std::int64_t>& train_ids,
                                const std::vector<std::int64_t>& val_ids,
                                const std::vector<std::int64_t>& test_ids) {
    std::set<std::int64_t> seen;
    std::size_t total = 0;
    for (const auto* ids : {&train_ids, &val_ids, &test_ids}) {
        total += ids->size();
        seen.insert(ids->begin(), ids->end());
    }
    require(seen.size() == total, "fold hygiene: a student id appears in two splits");
    require(seen.size() == ds.students.size(), "fold hygiene: splits do not cover the dataset");
    for (const auto& s : ds.students)
        require(seen.count(s.student_id) == 1, "fold hygiene: unknown or missing student id");
}

// ---- key pretraining --------------------------------------------------------

inline PretrainConfig pretrain_config(const RunConfig& cfg, std::uint64_t seed) {
    PretrainConfig pc;
    pc.d_k = cfg.d_k;
    pc.hidden = cfg.pretrain_hidden;
    pc.epochs = cfg.pretrain_epochs;
    pc.lr = cfg.learning_rate;
    pc.batch_size = cfg.batch_size;
    pc.seed = seed;
    return pc;
}

/// Pairs beyond this graph distance carry little gradient signal and the
/// bipartite membership graphs here are tiny, so sampling stops at 6 hops.
inline constexpr std::int32_t pretrain_max_hops = 6;

/// One-call key pipeline: build the question-KC graph, sample same-type node
/// pairs, and fit the hop regression. Text-mode feature matrices ride in via
/// `features_q`/`features_c`; one-hot mode ignores them.
inline PretrainResult pretrain_keys(const CanonicalDataset& ds, const RunConfig& cfg,
                                    std::uint64_t seed,
                                    InputMode mode = InputMode::onehot, Mat features_q = {},
                                    Mat features_c = {}) {
    auto graph = build_bipartite(ds);
    auto pairs_q = sample_hop_pairs(graph, NodeType::question, cfg.pretrain_pairs,
                                    pretrain_max_hops, derive_seed(seed, "pairs-q"));
    auto pairs_c = sample_hop_pairs(graph, NodeType::kc, cfg.pretrain_pairs, pretrain_max_hops,
                                    derive_seed(seed, "pairs-c"));
    auto pcfg = pretrain_config(cfg, derive_seed(seed, "pretrain"));
    pcfg.input_mode = mode;
    pcfg.question_features = std::move(features_q);
    pcfg.kc_features = std::move(features_c);
    return pretrain_embeddings(graph, pairs_q, pairs_c, pcfg);
}

// ---- cross-validation ------------------------------------------------------

struct FoldOutcome {
    int fold = 0;
    std::vector<std::int64_t> train_ids, val_ids, test_ids;
    TrainResult train;
    EvalResult test;
};

struct CrossValOutcome {
    std::uint64_t seed = 0;
    FoldSplit split;
    std::vector<FoldOutcome> folds;
    BinaryMetrics pooled;  // over every test interaction of every fold
};

/// k-fold student-level cross-validation of one configuration with one seed.
/// Each fold holds its own students out for testing, carves 5% of the
/// remaining students for validation-based model selection, trains from a
/// fresh initialization, and evaluates the best-validation parameters on the
/// fold's test students. Every random choice derives from `seed`.
inline CrossValOutcome cross_validate(
    const CanonicalDataset& ds, const KeyEmbeddings& keys, const RunConfig& cfg,
    std::uint64_t seed, const std::function<void(const FoldOutcome&)>& on_fold = {}) {
    validate_run_config(cfg);
    require(keys.question_keys.rows() == ds.num_questions,
            "cross_validate: question keys do not match the dataset");
    require(keys.kc_keys.rows() == ds.num_kcs,
            "cross_validate: KC keys do not match the dataset");
    require(keys.d_k() == static_cast<Eigen::Index>(cfg.d_k),
            "cross_validate: key width does not match config d_k");

    CrossValOutcome out;
    out.seed = seed;
    out.split = make_folds(ds, cfg.folds, derive_seed(seed, "folds"));

    std::vector<double> pooled_probs;
    std::vector<int> pooled_labels;
    for (int f = 0; f < cfg.folds; ++f) {
        FoldOutcome fo;
        fo.fold = f;
        fo.test_ids = out.split.students_in_fold(f);
        auto rest = out.split.students_not_in_fold(f);
        auto tag = std::to_string(f);
        std::tie(fo.train_ids, fo.val_ids) =
            carve_validation(std::move(rest), 0.05, Rng(derive_seed(seed, "val-fold-" + tag)));
        assert_fold_hygiene(ds, fo.train_ids, fo.val_ids, fo.test_ids);

        auto hy = model_hyper(cfg, ds.num_questions, ds.num_kcs);
        Rng init_rng(derive_seed(seed, "init-fold-" + tag));
        auto params = init_model(keys, hy, cfg.sigma_init, init_rng);
        auto tc = train_config(cfg, derive_seed(seed, "train-fold-" + tag));
        fo.train = train_model(params, ds, fo.train_ids, fo.val_ids, tc);
        fo.test = evaluate_model(params, ds, fo.test_ids, cfg.batch_size);

        pooled_probs.insert(pooled_probs.end(), fo.test.probs.begin(), fo.test.probs.end());
        pooled_labels.insert(pooled_labels.end(), fo.test.labels.begin(), fo.test.labels.end());
        if (on_fold) on_fold(fo);
        out.folds.push_back(std::move(fo));
    }
    out.pooled = binary_metrics(pooled_probs, pooled_labels);
    return out;
}

// ---- experiments over seeds -------------------------------------------------

struct ExperimentResult {
    RunConfig config;
    std::vector<CrossValOutcome> per_seed;
    MeanStd auc, accuracy, loss;  // over the per-seed pooled metrics
};

inline ExperimentResult run_experiment(
    const CanonicalDataset& ds, const KeyEmbeddings& keys, const RunConfig& cfg,
    const std::function<void(std::uint64_t seed, const FoldOutcome&)>& on_fold = {}) {
    ExperimentResult r;
    r.config = cfg;
    std::vector<double> aucs, accs, losses;
    for (auto seed : cfg.seeds) {
        auto cb = on_fold ? std::function<void(const FoldOutcome&)>(
                                [&, seed](const FoldOutcome& fo) { on_fold(seed, fo); })
                          : std::function<void(const FoldOutcome&)>();
        auto cv = cross_validate(ds, keys, cfg, seed, cb);
        aucs.push_back(cv.pooled.auc);
        accs.push_back(cv.pooled.accuracy);
        losses.push_back(cv.pooled.loss);
        r.per_seed.push_back(std::move(cv));
    }
    r.auc = mean_stddev(aucs);
    r.accuracy = mean_stddev(accs);
    r.loss = mean_stddev(losses);
    return r;
}

// ---- manifests ---------------------------------------------------------------

inline nlohmann::json metrics_json(const BinaryMetrics& m) {
    // NaN (e.g. AUC of a single-class fold) serializes as null.
    return {{"loss", m.loss},
            {"auc", m.auc},
            {"accuracy", m.accuracy},
            {"count", m.count},
            {"positives", m.positives}};
}

inline nlohmann::json mean_std_json(const MeanStd& ms) {
    return {{"mean", ms.mean}, {"std", ms.stddev}};
}

inline nlohmann::json manifest_json(const ExperimentResult& r) {
    nlohmann::json j;
    j["config"] = config_to_json(r.config);
    j["config_hash"] = config_hash(r.config);
    j["auc"] = mean_std_json(r.auc);
    j["accuracy"] = mean_std_json(r.accuracy);
    j["loss"] = mean_std_json(r.loss);
    j["per_seed"] = nlohmann::json::array();
    for (const auto& cv : r.per_seed) {
        nlohmann::json s;
        s["seed"] = cv.seed;
        s["pooled"] = metrics_json(cv.pooled);
        s["folds"] = nlohmann::json::array();
        for (const auto& fo : cv.folds) {
            s["folds"].push_back({{"fold", fo.fold},
                                  {"test", metrics_json(fo.test.metrics)},
                                  {"best_epoch", fo.train.best_epoch},
                                  {"best_val_auc", fo.train.best_val_auc},
                                  {"train_students", fo.train_ids.size()},
                                  {"val_students", fo.val_ids.size()},
                                  {"test_students", fo.test_ids.size()}});
        }
        j["per_seed"].push_back(std::move(s));
    }
    return j;
}

// ---- ablation table -----------------------------------------------------------

struct AblationEntry {
    std::string variant;
    std::vector<double> seed_aucs, seed_accuracies;  // pooled metrics, one per seed
    MeanStd auc, accuracy;
    std::vector<CrossValOutcome> per_seed;
};

/// Run the variant table with shared seeds and shared fold assignments (the
/// splits depend only on the dataset, fold count, and seed — never on the
/// variant). Entries come back in the order requested.
inline std::vector<AblationEntry> run_ablation(
    const CanonicalDataset& ds, const KeyEmbeddings& keys, const RunConfig& cfg,
    const std::vector<std::string>& variants,
    const std::function<void(const std::string& variant, std::uint64_t seed,
                             const FoldOutcome&)>& on_fold = {}) {
    require(!variants.empty(), "run_ablation: no variants requested");
    for (const auto& v : variants) variant_from_name(v);  // rejects unknown names

    std::vector<AblationEntry> table;
    for (const auto& v : variants) {
        RunConfig vcfg = cfg;
        vcfg.variant = v;
        auto cb = on_fold
                      ? std::function<void(std::uint64_t, const FoldOutcome&)>(
                            [&, v](std::uint64_t seed, const FoldOutcome& fo) {
                                on_fold(v, seed, fo);
                            })
                      : std::function<void(std::uint64_t, const FoldOutcome&)>();
        auto res = run_experiment(ds, keys, vcfg, cb);
        AblationEntry e;
        e.variant = v;
        for (const auto& cv : res.per_seed) {
            e.seed_aucs.push_back(cv.pooled.auc);
            e.seed_accuracies.push_back(cv.pooled.accuracy);
        }
        e.auc = res.auc;
        e.accuracy = res.accuracy;
        e.per_seed = std::move(res.per_seed);
        table.push_back(std::move(e));
    }
    return table;
}

/// Ablation manifest: per-variant means and, when a Base row with spread is
/// present, Welch t-tests of each variant's seed AUCs against Base.
inline nlohmann::json ablation_json(const RunConfig& cfg,
                                    const std::vector<AblationEntry>& table) {
    nlohmann::json j;
    j["config"] = config_to_json(cfg);
    j["config_hash"] = config_hash(cfg);
    j["variants"] = nlohmann::json::array();
    const AblationEntry* base = nullptr;
    for (const auto& e : table)
        if (e.variant == "Base") base = &e;
    for (const auto& e : table) {
        nlohmann::json row;
        row["variant"] = e.variant;
        row["auc"] = mean_std_json(e.auc);
        row["accuracy"] = mean_std_json(e.accuracy);
        row["seed_aucs"] = e.seed_aucs;
        row["seed_accuracies"] = e.seed_accuracies;
        if (base != nullptr && base != &e && e.seed_aucs.size() >= 2) {
            try {
                auto w = welch_t_test(e.seed_aucs, base->seed_aucs);
                row["vs_base"] = {{"t", w.t}, {"df", w.df}, {"p", w.p}};
            } catch (const argument_error&) {
                row["vs_base"] = nullptr;  // degenerate spread, no meaningful test
            }
        }
        j["variants"].push_back(std::move(row));
    }
    return j;
}

inline void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw data_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw data_error("write failed for " + path.string());
}

/// Plot-ready ablation bars: one row per variant with mean and spread.
inline void write_ablation_csv(const std::filesystem::path& path,
                               const std::vector<AblationEntry>& table) {
    std::ofstream out(path);
    if (!out) throw data_error("cannot write " + path.string());
    out << "variant,auc_mean,auc_std,accuracy_mean,accuracy_std,seeds\n";
    out.precision(17);
    for (const auto& e : table)
        out << e.variant << ',' << e.auc.mean << ',' << e.auc.stddev << ',' << e.accuracy.mean
            << ',' << e.accuracy.stddev << ',' << e.seed_aucs.size() << '\n';
    if (!out) throw data_error("write failed for " + path.string());
}

}  // namespace tgmn
