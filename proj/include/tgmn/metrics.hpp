#pragma once

// Pooled binary-classification metrics (rank-based AUC, thresholded accuracy,
// clamped log loss) plus Welch's unequal-variance t-test for comparing fold
// scores between model variants.

#include "tgmn/common.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace tgmn {

namespace detail {

inline void check_aligned(const std::vector<double>& scores, const std::vector<int>& labels,
                          const char* who) {
    if (scores.empty() || scores.size() != labels.size())
        throw argument_error(std::string(who) + ": need aligned non-empty scores and labels");
    for (int y : labels)
        if (y != 0 && y != 1) throw argument_error(std::string(who) + ": labels must be binary");
}

}  // namespace detail

/// Area under the ROC curve by the rank-sum route: midranks over score ties,
/// then the Mann-Whitney U statistic normalized by the number of
/// positive/negative pairs. Equals the fraction of correctly ordered pairs
/// with ties counted half, and is invariant under any strictly increasing
/// transform of the scores.
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    detail::check_aligned(scores, labels, "roc_auc");
    std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (int y : labels) n_pos += static_cast<std::size_t>(y);
    std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0)
        throw argument_error("roc_auc: undefined when only one class is present");
    for (double s : scores)
        if (!std::isfinite(s)) throw numeric_error("roc_auc: non-finite score");

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
        double midrank = static_cast<double>(i + 1 + j) / 2.0;  // 1-based ranks i+1 .. j
        for (std::size_t k = i; k < j; ++k)
            if (labels[idx[k]] == 1) rank_sum_pos += midrank;
        i = j;
    }
    double np = static_cast<double>(n_pos);
    double u = rank_sum_pos - np * (np + 1.0) / 2.0;
    return u / (np * static_cast<double>(n_neg));
}

/// Share of correct thresholded predictions; a score equal to the threshold
/// rounds up to the positive class.
inline double accuracy(const std::vector<double>& scores, const std::vector<int>& labels,
                       double threshold = 0.5) {
    detail::check_aligned(scores, labels, "accuracy");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < scores.size(); ++i)
        correct += (scores[i] >= threshold ? 1 : 0) == labels[i];
    return static_cast<double>(correct) / static_cast<double>(scores.size());
}

/// Mean binary cross-entropy with probabilities clamped to [eps, 1-eps],
/// matching the training objective's clamp.
inline double log_loss(const std::vector<double>& probs, const std::vector<int>& labels,
                       double eps = 1e-7) {
    detail::check_aligned(probs, labels, "log_loss");
    double total = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        double p = std::clamp(probs[i], eps, 1.0 - eps);
        total += labels[i] == 1 ? -std::log(p) : -std::log1p(-p);
    }
    return total / static_cast<double>(probs.size());
}

/// Loss/AUC/accuracy over one pooled set of predictions. AUC is NaN when the
/// pool is single-class (the strict roc_auc above throws instead).
struct BinaryMetrics {
    double loss = 0.0;
    double auc = std::numeric_limits<double>::quiet_NaN();
    double accuracy = 0.0;
    std::size_t count = 0;
    std::size_t positives = 0;
};

inline BinaryMetrics binary_metrics(const std::vector<double>& probs,
                                    const std::vector<int>& labels) {
    detail::check_aligned(probs, labels, "binary_metrics");
    BinaryMetrics m;
    m.count = probs.size();
    for (int y : labels) m.positives += static_cast<std::size_t>(y);
    m.loss = log_loss(probs, labels);
    m.accuracy = accuracy(probs, labels);
    if (m.positives > 0 && m.positives < m.count) m.auc = roc_auc(probs, labels);
    return m;
}

struct WelchResult {
    double t = 0.0;
    double df = 0.0;
    double p = 1.0;  // two-sided
};

/// Welch's t-test for unequal variances with the Welch-Satterthwaite degrees
/// of freedom. Each group needs at least two samples and nonzero variance;
/// a constant sample makes the statistic meaningless, so it is rejected
/// loudly rather than mapped to a limit value.
inline WelchResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2)
        throw argument_error("welch_t_test: need at least two samples per group");
    auto moments = [](const std::vector<double>& x) {
        double n = static_cast<double>(x.size());
        double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
        double ss = 0.0;
        for (double v : x) ss += (v - mean) * (v - mean);
        return std::pair<double, double>{mean, ss / (n - 1.0)};
    };
    auto [ma, va] = moments(a);
    auto [mb, vb] = moments(b);
    if (!std::isfinite(ma) || !std::isfinite(mb) || !std::isfinite(va) || !std::isfinite(vb))
        throw numeric_error("welch_t_test: non-finite sample moments");
    double na = static_cast<double>(a.size());
    double nb = static_cast<double>(b.size());
    double sea = va / na, seb = vb / nb;
    double se2 = sea + seb;

    if (va == 0.0 || vb == 0.0)
        throw argument_error("welch_t_test: sample variance is zero");

    WelchResult r;
    r.t = (ma - mb) / std::sqrt(se2);
    r.df = se2 * se2 / (sea * sea / (na - 1.0) + seb * seb / (nb - 1.0));
    boost::math::students_t dist(r.df);
    r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
    return r;
}

struct MeanStd {
    double mean = 0.0;
    double stddev = 0.0;  // sample standard deviation; 0 for a single value
};

inline MeanStd mean_stddev(const std::vector<double>& xs) {
    require(!xs.empty(), "mean_stddev: empty sample");
    MeanStd out;
    double n = static_cast<double>(xs.size());
    out.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    if (xs.size() < 2) return out;
    double ss = 0.0;
    for (double v : xs) ss += (v - out.mean) * (v - out.mean);
    out.stddev = std::sqrt(ss / (n - 1.0));
    return out;
}

}  // namespace tgmn
