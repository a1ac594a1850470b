#pragma once

#include "tgmn/common.hpp"
#include "tgmn/matrix_io.hpp"
#include "tgmn/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tgmn {

struct Interaction {
    std::int32_t question = 0;
    std::int8_t answer = 0;
    std::int64_t order = 0;

    bool operator==(const Interaction&) const = default;
};

struct StudentLog {
    std::int64_t student_id = 0;
    std::vector<Interaction> interactions;

    bool operator==(const StudentLog&) const = default;
};

/// Per-student ordered exercise logs plus the question->KC mapping.
/// Question ids are dense in [0, num_questions), KC ids in [0, num_kcs).
struct CanonicalDataset {
    std::vector<StudentLog> students;
    std::vector<std::vector<std::int32_t>> question_kcs;  // sorted, per question
    std::int32_t num_questions = 0;
    std::int32_t num_kcs = 0;

    bool operator==(const CanonicalDataset&) const = default;

    std::size_t total_interactions() const {
        std::size_t n = 0;
        for (const auto& s : students) n += s.interactions.size();
        return n;
    }

    void validate() const {
        require(num_questions > 0 && num_kcs > 0, "dataset: empty question or KC set");
        require(static_cast<std::size_t>(num_questions) == question_kcs.size(),
                "dataset: question_kcs size mismatch");
        for (std::int32_t q = 0; q < num_questions; ++q) {
            require(!question_kcs[q].empty(),
                    "dataset: question " + std::to_string(q) + " has no KCs");
            for (auto kc : question_kcs[q])
                require(kc >= 0 && kc < num_kcs, "dataset: KC id out of range");
        }
        for (const auto& s : students) {
            require(!s.interactions.empty(), "dataset: empty student log");
            std::int64_t prev = -1;
            for (const auto& it : s.interactions) {
                require(it.question >= 0 && it.question < num_questions,
                        "dataset: question id out of range");
                require(it.answer == 0 || it.answer == 1, "dataset: answer not in {0,1}");
                require(it.order > prev, "dataset: order not strictly increasing");
                prev = it.order;
            }
        }
    }
};

/// Original-id -> dense-id remapping tables kept from ingestion.
struct IdMaps {
    std::vector<std::string> students;   // dense id -> original
    std::vector<std::string> questions;
    std::vector<std::string> kcs;
};

struct IngestSchema {
    std::string student_col;
    std::string question_col;
    std::string kc_col;       // multi-valued, separated by kc_sep
    std::string answer_col;
    std::string order_col;    // optional; empty = use file row order
    char kc_sep = '|';
    char delimiter = ',';
};

struct IngestResult {
    CanonicalDataset dataset;
    IdMaps idmaps;
    std::size_t rows_total = 0;
    std::size_t rows_rejected_answer = 0;
    std::size_t rows_rejected_no_kc = 0;

    std::size_t rows_rejected() const { return rows_rejected_answer + rows_rejected_no_kc; }
};

namespace detail {

/// RFC-4180-ish CSV: quoted fields may contain the delimiter, doubled quotes,
/// and newlines. Returns one record; false at end of input.
inline bool read_csv_record(std::istream& in, char delim, std::vector<std::string>& out) {
    out.clear();
    int c = in.get();
    if (c == EOF) return false;
    std::string field;
    bool quoted = false;
    while (true) {
        if (c == EOF) break;
        char ch = static_cast<char>(c);
        if (quoted) {
            if (ch == '"') {
                int next = in.peek();
                if (next == '"') {
                    field.push_back('"');
                    in.get();
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(ch);
            }
        } else if (ch == '"' && field.empty()) {
            quoted = true;
        } else if (ch == delim) {
            out.push_back(std::move(field));
            field.clear();
        } else if (ch == '\n') {
            break;
        } else if (ch != '\r') {
            field.push_back(ch);
        }
        c = in.get();
    }
    out.push_back(std::move(field));
    return true;
}

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

/// Accepts an answer cell only when it denotes exactly 0 or 1.
inline std::optional<std::int8_t> parse_answer(const std::string& raw) {
    std::string s = trim(raw);
    if (s.empty()) return std::nullopt;
    double v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) return std::nullopt;
    if (v == 0.0) return std::int8_t{0};
    if (v == 1.0) return std::int8_t{1};
    return std::nullopt;
}

}  // namespace detail

/// Maps original string ids to dense integers in first-appearance order.
class DenseIdMapper {
public:
    std::int32_t get(const std::string& key) {
        auto it = index_.find(key);
        if (it != index_.end()) return it->second;
        auto id = static_cast<std::int32_t>(originals_.size());
        index_.emplace(key, id);
        originals_.push_back(key);
        return id;
    }
    const std::vector<std::string>& originals() const { return originals_; }
    std::size_t size() const { return originals_.size(); }

private:
    std::unordered_map<std::string, std::int32_t> index_;
    std::vector<std::string> originals_;
};

/// Ingest a raw KT log export into the canonical dense-id form.
/// Rows with answers outside {0,1} or with zero KCs are dropped and counted.
inline IngestResult ingest_csv(const std::string& path, const IngestSchema& schema) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open: " + path);

    std::vector<std::string> header;
    if (!detail::read_csv_record(in, schema.delimiter, header))
        throw format_error(path + ": empty file");

    auto col = [&](const std::string& name, bool required) -> int {
        if (name.empty()) {
            if (required) throw schema_error(path + ": schema column name is empty");
            return -1;
        }
        for (std::size_t i = 0; i < header.size(); ++i)
            if (detail::trim(header[i]) == name) return static_cast<int>(i);
        if (required) throw schema_error(path + ": missing column '" + name + "'");
        return -1;
    };

    const int ci_student = col(schema.student_col, true);
    const int ci_question = col(schema.question_col, true);
    const int ci_kc = col(schema.kc_col, true);
    const int ci_answer = col(schema.answer_col, true);
    const int ci_order = schema.order_col.empty() ? -1 : col(schema.order_col, true);

    struct RawRow {
        std::int32_t student, question;
        std::int8_t answer;
        double timestamp;
        std::size_t file_row;
    };

    DenseIdMapper students, questions, kcs;
    std::vector<RawRow> rows;
    std::vector<std::vector<std::int32_t>> question_kcs;
    IngestResult result;

    std::vector<std::string> rec;
    std::size_t file_row = 0;
    while (detail::read_csv_record(in, schema.delimiter, rec)) {
        ++file_row;
        if (rec.size() == 1 && detail::trim(rec[0]).empty()) {
            --file_row;  // blank trailing line, not a data row
            continue;
        }
        ++result.rows_total;
        auto cell = [&](int idx) -> std::string {
            return idx >= 0 && static_cast<std::size_t>(idx) < rec.size() ? rec[idx] : "";
        };

        auto answer = detail::parse_answer(cell(ci_answer));
        if (!answer) {
            ++result.rows_rejected_answer;
            continue;
        }

        std::vector<std::int32_t> row_kcs;
        {
            std::string kc_field = cell(ci_kc);
            std::string tok;
            std::istringstream ss(kc_field);
            while (std::getline(ss, tok, schema.kc_sep)) {
                tok = detail::trim(tok);
                if (!tok.empty()) row_kcs.push_back(kcs.get(tok));
            }
            std::sort(row_kcs.begin(), row_kcs.end());
            row_kcs.erase(std::unique(row_kcs.begin(), row_kcs.end()), row_kcs.end());
        }
        if (row_kcs.empty()) {
            ++result.rows_rejected_no_kc;
            continue;
        }

        std::string student_key = detail::trim(cell(ci_student));
        std::string question_key = detail::trim(cell(ci_question));
        if (student_key.empty() || question_key.empty()) {
            ++result.rows_rejected_no_kc;  // treat as unattributable, same bucket as invalid
            continue;
        }

        double ts = 0;
        if (ci_order >= 0) {
            std::string raw = detail::trim(cell(ci_order));
            ts = raw.empty() ? 0.0 : parse_double(raw, path + ": order column");
        }

        std::int32_t q = questions.get(question_key);
        if (static_cast<std::size_t>(q) >= question_kcs.size()) question_kcs.resize(q + 1);
        for (auto kc : row_kcs)
            if (!std::binary_search(question_kcs[q].begin(), question_kcs[q].end(), kc)) {
                question_kcs[q].insert(
                    std::upper_bound(question_kcs[q].begin(), question_kcs[q].end(), kc), kc);
            }

        rows.push_back({students.get(student_key), q, *answer, ts, file_row});
    }

    if (rows.empty()) throw data_error(path + ": no valid rows after filtering");

    // Stable order: timestamp (when mapped) then file row.
    std::stable_sort(rows.begin(), rows.end(), [&](const RawRow& a, const RawRow& b) {
        if (a.student != b.student) return a.student < b.student;
        if (ci_order >= 0 && a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
        return a.file_row < b.file_row;
    });

    CanonicalDataset ds;
    ds.num_questions = static_cast<std::int32_t>(questions.size());
    ds.num_kcs = static_cast<std::int32_t>(kcs.size());
    ds.question_kcs = std::move(question_kcs);
    ds.students.resize(students.size());
    for (std::size_t s = 0; s < students.size(); ++s)
        ds.students[s].student_id = static_cast<std::int64_t>(s);
    for (const auto& r : rows) {
        auto& log = ds.students[static_cast<std::size_t>(r.student)];
        log.interactions.push_back(
            {r.question, r.answer, static_cast<std::int64_t>(log.interactions.size())});
    }
    ds.validate();

    result.dataset = std::move(ds);
    result.idmaps = {students.originals(), questions.originals(), kcs.originals()};
    return result;
}

struct SyntheticConfig {
    std::int64_t interactions_per_student = 50;
    double ability_sd = 2.6;
    double difficulty_sd = 0.85;
    double mastery_init_mean = -0.4;
    double mastery_init_sd = 0.25;
    double mastery_gain = 0.08;
    double mastery_cap = 3.0;
    double mastery_decay = 0.99;  // applied per step to unpracticed KCs
};

/// Desk-scale stand-in generator: one-parameter IRT with per-KC mastery that
/// grows with practice and drifts back toward zero when unpracticed;
/// correct-answer probability = logistic(ability + mastery - difficulty).
/// Every question is guaranteed to be practiced at least once so the
/// interaction log alone determines the full question universe.
inline CanonicalDataset generate_synthetic(std::int64_t num_students, std::int64_t num_questions,
                                           std::int64_t num_kcs, std::uint64_t seed,
                                           const SyntheticConfig& cfg = {}) {
    require(num_students >= 1 && num_questions >= 1 && num_kcs >= 1,
            "generate_synthetic: counts must be >= 1");
    require(cfg.interactions_per_student >= 1, "generate_synthetic: interactions must be >= 1");
    require(num_students * cfg.interactions_per_student >= num_questions,
            "generate_synthetic: too few interactions to practice every question");

    Rng root(seed);
    Rng structure = root.split(1);
    Rng irt = root.split(2);

    CanonicalDataset ds;
    ds.num_questions = static_cast<std::int32_t>(num_questions);
    ds.num_kcs = static_cast<std::int32_t>(num_kcs);
    ds.question_kcs.resize(num_questions);

    // 1-3 KCs per question, distinct, uniform.
    std::vector<std::int32_t> kc_pool(num_kcs);
    std::iota(kc_pool.begin(), kc_pool.end(), 0);
    for (std::int64_t q = 0; q < num_questions; ++q) {
        auto max_k = static_cast<std::uint64_t>(std::min<std::int64_t>(3, num_kcs));
        auto k = 1 + structure.integer(max_k);
        structure.shuffle(kc_pool);
        ds.question_kcs[q].assign(kc_pool.begin(), kc_pool.begin() + static_cast<long>(k));
        std::sort(ds.question_kcs[q].begin(), ds.question_kcs[q].end());
    }
    // Keep every KC attached to at least one question so the bipartite graph
    // has no isolated concept nodes.
    {
        std::vector<bool> used(num_kcs, false);
        for (const auto& ks : ds.question_kcs)
            for (auto kc : ks) used[kc] = true;
        for (std::int32_t kc = 0; kc < num_kcs; ++kc)
            if (!used[kc]) {
                auto q = static_cast<std::size_t>(kc % num_questions);
                ds.question_kcs[q].insert(
                    std::upper_bound(ds.question_kcs[q].begin(), ds.question_kcs[q].end(), kc),
                    kc);
            }
    }

    std::vector<double> difficulty(num_questions);
    for (auto& d : difficulty) d = irt.normal(0.0, cfg.difficulty_sd);

    // Phase 1: draw every student's question sequence, then patch unpracticed
    // questions into slots whose question occurs more than once.
    std::vector<std::vector<std::int32_t>> sequences(num_students);
    std::vector<std::int64_t> practice_count(num_questions, 0);
    for (auto& seq : sequences) {
        seq.resize(cfg.interactions_per_student);
        for (auto& q : seq) {
            q = static_cast<std::int32_t>(irt.integer(static_cast<std::uint64_t>(num_questions)));
            ++practice_count[q];
        }
    }
    for (std::int32_t q = 0; q < num_questions; ++q) {
        while (practice_count[q] == 0) {
            auto s = irt.integer(static_cast<std::uint64_t>(num_students));
            auto t = irt.integer(static_cast<std::uint64_t>(cfg.interactions_per_student));
            auto& slot = sequences[s][t];
            if (practice_count[slot] < 2) continue;  // keep that question covered
            --practice_count[slot];
            slot = q;
            ++practice_count[q];
        }
    }

    // Phase 2: simulate mastery and answers over the fixed sequences.
    ds.students.resize(num_students);
    std::size_t correct = 0, total = 0;
    for (std::int64_t s = 0; s < num_students; ++s) {
        auto& log = ds.students[s];
        log.student_id = s;
        double ability = irt.normal(0.0, cfg.ability_sd);
        std::vector<double> mastery(num_kcs);
        for (auto& m : mastery) m = irt.normal(cfg.mastery_init_mean, cfg.mastery_init_sd);

        for (std::int64_t t = 0; t < cfg.interactions_per_student; ++t) {
            auto q = sequences[s][t];
            const auto& q_kcs = ds.question_kcs[q];
            double m_avg = 0;
            for (auto kc : q_kcs) m_avg += mastery[kc];
            m_avg /= static_cast<double>(q_kcs.size());

            double p = sigmoid(ability + m_avg - difficulty[q]);
            auto a = static_cast<std::int8_t>(irt.bernoulli(p) ? 1 : 0);
            log.interactions.push_back({q, a, t});
            correct += a;
            ++total;

            for (std::int32_t kc = 0; kc < num_kcs; ++kc) {
                bool practiced = std::binary_search(q_kcs.begin(), q_kcs.end(), kc);
                if (practiced)
                    mastery[kc] = std::min(cfg.mastery_cap, mastery[kc] + cfg.mastery_gain);
                else
                    mastery[kc] *= cfg.mastery_decay;
            }
        }
    }

    ds.validate();
    if (total >= 500) {
        double rate = static_cast<double>(correct) / static_cast<double>(total);
        if (rate < 0.3 || rate > 0.9)
            throw numeric_error("generate_synthetic: marginal correct rate " +
                                std::to_string(rate) + " outside [0.3, 0.9]");
    }
    return ds;
}

/// Student-level k-fold partition. Fold sizes differ by at most one and the
/// assignment is a pure function of (dataset students, k, seed).
struct FoldSplit {
    int k = 0;
    std::map<std::int64_t, int> assignments;
    std::uint64_t seed = 0;

    std::vector<std::int64_t> students_in_fold(int fold) const {
        std::vector<std::int64_t> out;
        for (const auto& [sid, f] : assignments)
            if (f == fold) out.push_back(sid);
        return out;
    }
    std::vector<std::int64_t> students_not_in_fold(int fold) const {
        std::vector<std::int64_t> out;
        for (const auto& [sid, f] : assignments)
            if (f != fold) out.push_back(sid);
        return out;
    }
};

inline FoldSplit make_folds(const CanonicalDataset& ds, int k, std::uint64_t seed) {
    require(k >= 2, "make_folds: k must be >= 2");
    require(static_cast<std::size_t>(k) <= ds.students.size(),
            "make_folds: k exceeds number of students");
    std::vector<std::int64_t> ids;
    ids.reserve(ds.students.size());
    for (const auto& s : ds.students) ids.push_back(s.student_id);
    std::sort(ids.begin(), ids.end());
    Rng rng(seed);
    rng.shuffle(ids);
    FoldSplit split;
    split.k = k;
    split.seed = seed;
    for (std::size_t i = 0; i < ids.size(); ++i)
        split.assignments[ids[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
    return split;
}

/// Fixed-length window of a student's log. Windows tile the log in order;
/// the last one may be short.
struct Window {
    std::int64_t student_id = 0;
    std::vector<Interaction> interactions;
    std::size_t window_index = 0;
};

inline std::vector<Window> window_sequences(const CanonicalDataset& ds, int S) {
    require(S >= 1, "window_sequences: S must be >= 1");
    std::vector<Window> out;
    for (const auto& s : ds.students) {
        std::size_t w = 0;
        for (std::size_t start = 0; start < s.interactions.size(); start += S, ++w) {
            Window win;
            win.student_id = s.student_id;
            win.window_index = w;
            auto end = std::min(start + static_cast<std::size_t>(S), s.interactions.size());
            win.interactions.assign(s.interactions.begin() + static_cast<long>(start),
                                    s.interactions.begin() + static_cast<long>(end));
            out.push_back(std::move(win));
        }
    }
    return out;
}

/// Canonical CSV: header `student_id,order,question_id,kc_ids,answer`;
/// kc_ids is |-separated dense integers. UTF-8, LF line endings.
inline void write_canonical(const CanonicalDataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("cannot open for writing: " + path);
    out << "student_id,order,question_id,kc_ids,answer\n";
    for (const auto& s : ds.students)
        for (const auto& it : s.interactions) {
            out << s.student_id << ',' << it.order << ',' << it.question << ',';
            const auto& kcs = ds.question_kcs[it.question];
            for (std::size_t i = 0; i < kcs.size(); ++i) {
                if (i) out << '|';
                out << kcs[i];
            }
            out << ',' << static_cast<int>(it.answer) << '\n';
        }
    if (!out) throw data_error("write failed: " + path);
}

inline CanonicalDataset load_canonical(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open: " + path);
    std::string line;
    if (!std::getline(in, line)) throw format_error(path + ": empty file");
    if (line != "student_id,order,question_id,kc_ids,answer")
        throw format_error(path + ": unexpected header '" + line + "'");

    CanonicalDataset ds;
    std::map<std::int64_t, StudentLog> logs;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::string ctx = path + ":" + std::to_string(lineno);
        std::vector<std::string_view> cells;
        {
            std::string_view sv(line);
            while (true) {
                auto pos = sv.find(',');
                cells.push_back(sv.substr(0, pos));
                if (pos == std::string_view::npos) break;
                sv.remove_prefix(pos + 1);
            }
        }
        if (cells.size() != 5) throw format_error(ctx + ": expected 5 fields");
        auto sid = parse_long(cells[0], ctx);
        auto order = parse_long(cells[1], ctx);
        auto q = static_cast<std::int32_t>(parse_long(cells[2], ctx));
        auto ans = parse_long(cells[4], ctx);
        if (ans != 0 && ans != 1) throw format_error(ctx + ": answer not in {0,1}");

        std::vector<std::int32_t> kcs;
        {
            std::string_view sv(cells[3]);
            while (!sv.empty()) {
                auto pos = sv.find('|');
                kcs.push_back(static_cast<std::int32_t>(parse_long(sv.substr(0, pos), ctx)));
                if (pos == std::string_view::npos) break;
                sv.remove_prefix(pos + 1);
            }
        }
        if (kcs.empty()) throw format_error(ctx + ": empty kc_ids");
        std::sort(kcs.begin(), kcs.end());

        if (static_cast<std::size_t>(q) >= ds.question_kcs.size())
            ds.question_kcs.resize(q + 1);
        if (ds.question_kcs[q].empty())
            ds.question_kcs[q] = kcs;
        else if (ds.question_kcs[q] != kcs)
            throw format_error(ctx + ": question " + std::to_string(q) +
                               " has inconsistent kc_ids across rows");

        auto& log = logs[sid];
        log.student_id = sid;
        log.interactions.push_back({q, static_cast<std::int8_t>(ans), order});
        ds.num_kcs = std::max(ds.num_kcs, kcs.back() + 1);
    }
    if (logs.empty()) throw format_error(path + ": no data rows");
    ds.num_questions = static_cast<std::int32_t>(ds.question_kcs.size());
    for (std::int32_t q = 0; q < ds.num_questions; ++q)
        if (ds.question_kcs[q].empty())
            throw format_error(path + ": question id " + std::to_string(q) +
                               " never appears; dense question ids must be contiguous");
    for (auto& [sid, log] : logs) {
        std::stable_sort(log.interactions.begin(), log.interactions.end(),
                         [](const Interaction& a, const Interaction& b) { return a.order < b.order; });
        ds.students.push_back(std::move(log));
    }
    ds.validate();
    return ds;
}

inline void write_idmaps(const IdMaps& maps, const std::string& path) {
    nlohmann::json j;
    j["students"] = maps.students;
    j["questions"] = maps.questions;
    j["kcs"] = maps.kcs;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("cannot open for writing: " + path);
    out << j.dump(2) << '\n';
}

inline IdMaps load_idmaps(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw format_error(path + ": " + e.what());
    }
    IdMaps maps;
    maps.students = j.at("students").get<std::vector<std::string>>();
    maps.questions = j.at("questions").get<std::vector<std::string>>();
    maps.kcs = j.at("kcs").get<std::vector<std::string>>();
    return maps;
}

}  // namespace tgmn
