#include "refdet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "refdet/errors.hpp"

namespace refdet {

namespace {

void check_lengths(size_t a, size_t b) {
    if (a != b) throw DataError("metrics: scores and labels differ in length");
    if (a == 0) throw DataError("metrics: empty input");
}

std::pair<int, int> class_counts(const std::vector<uint8_t>& labels) {
    int pos = 0;
    for (const uint8_t l : labels) pos += (l != 0);
    return {pos, static_cast<int>(labels.size()) - pos};
}

} // namespace

double auroc(const std::vector<double>& scores, const std::vector<uint8_t>& labels) {
    check_lengths(scores.size(), labels.size());
    const auto [n_pos, n_neg] = class_counts(labels);
    if (n_pos == 0 || n_neg == 0)
        throw NumericError("auroc undefined: only one class present");

    const size_t n = scores.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    // Average ranks over tie groups (1-based ranks).
    std::vector<double> rank(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + 1 + j + 1);
        for (size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }

    double rank_sum_pos = 0.0;
    for (size_t k = 0; k < n; ++k)
        if (labels[k] != 0) rank_sum_pos += rank[k];

    const double u = rank_sum_pos - 0.5 * n_pos * (n_pos + 1.0);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

std::vector<uint8_t> point_adjust(const std::vector<uint8_t>& preds,
                                  const std::vector<uint8_t>& labels) {
    if (preds.size() != labels.size())
        throw DataError("point_adjust: preds and labels differ in length");
    std::vector<uint8_t> adjusted = preds;
    const size_t n = labels.size();
    size_t i = 0;
    while (i < n) {
        if (labels[i] == 0) {
            ++i;
            continue;
        }
        size_t j = i;
        while (j + 1 < n && labels[j + 1] != 0) ++j;
        bool hit = false;
        for (size_t k = i; k <= j && !hit; ++k) hit = preds[k] != 0;
        if (hit)
            for (size_t k = i; k <= j; ++k) adjusted[k] = 1;
        i = j + 1;
    }
    return adjusted;
}

double f1_binary(const std::vector<uint8_t>& preds, const std::vector<uint8_t>& labels) {
    if (preds.size() != labels.size())
        throw DataError("f1: preds and labels differ in length");
    long tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] && labels[i]) ++tp;
        else if (preds[i] && !labels[i]) ++fp;
        else if (!preds[i] && labels[i]) ++fn;
    }
    if (tp == 0) return 0.0;
    const double precision = static_cast<double>(tp) / (tp + fp);
    const double recall = static_cast<double>(tp) / (tp + fn);
    return 2.0 * precision * recall / (precision + recall);
}

double f1_point_adjusted(const std::vector<double>& scores,
                         const std::vector<uint8_t>& labels, double threshold) {
    check_lengths(scores.size(), labels.size());
    const auto [n_pos, n_neg] = class_counts(labels);
    if (n_pos == 0 || n_neg == 0)
        throw NumericError("f1_point_adjusted undefined: only one class present");
    std::vector<uint8_t> preds(scores.size());
    for (size_t i = 0; i < scores.size(); ++i) preds[i] = scores[i] >= threshold ? 1 : 0;
    return f1_binary(point_adjust(preds, labels), labels);
}

BestF1 best_f1_sweep(const std::vector<double>& scores, const std::vector<uint8_t>& labels) {
    check_lengths(scores.size(), labels.size());
    std::vector<double> candidates = scores;
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

    BestF1 best{-1.0, 0.0};
    for (const double thr : candidates) {
        const double f1 = f1_point_adjusted(scores, labels, thr);
        if (f1 > best.f1) best = {f1, thr}; // strict >: ties keep the lowest threshold
    }
    return best;
}

EvalReport make_report(const std::string& dataset_id, const std::string& metric,
                       const std::vector<double>& scores, const std::vector<uint8_t>& labels) {
    check_lengths(scores.size(), labels.size());
    EvalReport r;
    r.dataset_id = dataset_id;
    r.metric = metric;
    r.n_samples = static_cast<int>(scores.size());

    double sum[2] = {0, 0}, sum2[2] = {0, 0};
    int cnt[2] = {0, 0};
    for (size_t i = 0; i < scores.size(); ++i) {
        const int c = labels[i] ? 1 : 0;
        sum[c] += scores[i];
        sum2[c] += scores[i] * scores[i];
        ++cnt[c];
    }
    r.n_anomalies = cnt[1];
    auto finish = [&](int c, double& mean, double& std) {
        if (cnt[c] == 0) return;
        mean = sum[c] / cnt[c];
        const double var = std::max(0.0, sum2[c] / cnt[c] - mean * mean);
        std = std::sqrt(var);
    };
    finish(0, r.normal_mean, r.normal_std);
    finish(1, r.anomaly_mean, r.anomaly_std);

    if (metric == "auroc") {
        r.value = auroc(scores, labels);
    } else if (metric == "f1_pa") {
        const BestF1 best = best_f1_sweep(scores, labels);
        r.value = best.f1;
        r.threshold = best.threshold;
    } else {
        throw ConfigError("unknown metric: " + metric);
    }
    return r;
}

} // namespace refdet
