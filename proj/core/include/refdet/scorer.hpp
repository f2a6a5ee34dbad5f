#pragma once

#include <vector>

#include "refdet/ingest.hpp"
#include "refdet/model.hpp"
#include "refdet/trainer.hpp"

namespace refdet {

/// Discrepancy between pooled representations: (1 - cos(h_ref, h_x)) / 2,
/// clamped into [0,1] against rounding. Throws on zero-norm input.
double discrepancy(const MatD& h_ref, const MatD& h_x);

struct Detection {
    double score = 0.0;
    bool flagged = false;
};

/// Inference-time scoring against a frozen reference set. Read-only over the
/// loaded parameters; safe to share across threads.
class Scorer {
public:
    Scorer(const ModelConfig& cfg, const ParamStore<float>& params);

    /// Pooled reference representation h_R from the causal prefix
    /// [prompt; e_ref; REF]. Under causal attention this equals the h_R of any
    /// full sequence extending that prefix, so it is computed once per
    /// reference set and reused across targets.
    MatD reference_representation(const std::vector<Sample>& refs) const;

    double score_one(const std::vector<Sample>& refs, const Sample& target) const;

    /// Scores every target against one reference set; h_R is computed once.
    /// Output order matches input order.
    std::vector<double> score_batch(const std::vector<Sample>& refs,
                                    const std::vector<Sample>& targets) const;

    Detection detect(const std::vector<Sample>& refs, const Sample& target,
                     double threshold) const;

    const ModelConfig& config() const { return cfg_; }

private:
    MatD target_representation(const MatD& h_ref_unused, const std::vector<Sample>& refs,
                               const Sample& target) const;

    ModelConfig cfg_;
    const ParamStore<float>& params_;
};

/// Frozen per-task reference selection: K train normals drawn once with a
/// seed derived from the dataset id.
std::vector<Sample> choose_reference_set(const DatasetHandle& handle, int k, uint64_t seed);

} // namespace refdet
