#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace refdet {

/// Evaluation summary for one dataset.
struct EvalReport {
    std::string dataset_id;
    std::string metric;      // "auroc" or "f1_pa"
    double value = 0.0;
    double threshold = 0.0;  // only meaningful for f1_pa (best-F1 sweep)
    double normal_mean = 0.0, normal_std = 0.0;
    double anomaly_mean = 0.0, anomaly_std = 0.0;
    int n_samples = 0;
    int n_anomalies = 0;
};

/// Area under the ROC curve via the rank statistic, ties get average ranks.
/// Throws NumericError unless both classes are present.
double auroc(const std::vector<double>& scores, const std::vector<uint8_t>& labels);

/// Segment-level prediction adjustment: within each maximal run of true
/// anomalous points, one hit marks the whole run as detected.
std::vector<uint8_t> point_adjust(const std::vector<uint8_t>& preds,
                                  const std::vector<uint8_t>& labels);

/// F1 of thresholded scores after point adjustment. Zero true positives
/// yields F1 = 0.
double f1_point_adjusted(const std::vector<double>& scores,
                         const std::vector<uint8_t>& labels, double threshold);

/// Plain F1 over binary predictions (no adjustment).
double f1_binary(const std::vector<uint8_t>& preds, const std::vector<uint8_t>& labels);

struct BestF1 {
    double f1 = 0.0;
    double threshold = 0.0;
};

/// Evaluates f1_point_adjusted at every distinct score; ties resolved toward
/// the lowest threshold.
BestF1 best_f1_sweep(const std::vector<double>& scores, const std::vector<uint8_t>& labels);

/// Fills the score-distribution summary fields of a report.
EvalReport make_report(const std::string& dataset_id, const std::string& metric,
                       const std::vector<double>& scores, const std::vector<uint8_t>& labels);

} // namespace refdet
