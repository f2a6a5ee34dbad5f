#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "refdet/ingest.hpp"
#include "refdet/model.hpp"
#include "refdet/rng.hpp"

namespace refdet {

/// K normal samples from one task: the in-context definition of normality.
struct ReferenceSet {
    std::vector<Sample> samples;
    std::string dataset_id;
};

enum class NegativeKind { Simple, Hard };

/// One contrastive training unit.
struct Triplet {
    ReferenceSet refs;
    Sample positive;
    Sample negative;
    NegativeKind kind = NegativeKind::Simple;
    std::string debug_id;
};

/// Training hyperparameters.
struct TrainConfig {
    int k = 5;
    double alpha = 0.5;
    double ratio_simple = 8.0;
    double ratio_hard = 2.0;
    int epochs = 5;
    int steps_per_epoch = 200;
    double learning_rate = 1e-3;
    int batch_time = 16;
    int batch_tab = 64;
    int batch_log = 8;
    uint64_t seed = 1;
    double grad_clip = 1.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    /// Effective-size floor for time-series datasets in the scheduler,
    /// expressed in train samples.
    double time_size_floor = 250.0;
    /// Fixed number of gradient-accumulation slots. The batch is partitioned
    /// across slots and reduced in slot order, so results are independent of
    /// how many OS threads actually run.
    int grad_slots = 8;
    /// Use the margin loss exactly as printed (sign-flipped); ablation only.
    bool printed_loss_form = false;
    bool universal = true;
    Modality task_modality = Modality::Tabular; // used when universal == false

    void validate() const;
    int batch_for(Modality m) const {
        switch (m) {
            case Modality::TimeSeries: return batch_time;
            case Modality::Tabular: return batch_tab;
            case Modality::Log: return batch_log;
        }
        return 1;
    }
};

/// Draws training datasets: modality uniform (universal mode) or fixed
/// (task-specific), then dataset proportional to effective size within the
/// modality. Time-series sizes are floored to avoid under-sampling.
class SamplingScheduler {
public:
    SamplingScheduler(const std::vector<const DatasetHandle*>& datasets,
                      const TrainConfig& cfg);

    Modality draw_modality(Rng& rng) const;
    /// Index into the registered dataset list.
    int draw_dataset_of(Modality m, Rng& rng) const;

    /// Selection probability of each registered dataset given its modality was
    /// drawn; zero entries for other modalities. Sums to 1 per modality.
    std::vector<double> probabilities(Modality m) const;
    const std::vector<Modality>& present_modalities() const { return modalities_; }

private:
    struct Entry {
        int index;
        double effective_size;
    };
    std::vector<const DatasetHandle*> datasets_;
    std::vector<Modality> modalities_;
    std::vector<std::vector<Entry>> per_modality_; // parallel to modalities_
    bool universal_;
    Modality fixed_modality_;
};

/// Builds triplets from eligible datasets (>= K+1 train normals). Hard
/// negatives fall back to synthetic perturbations when a dataset has no
/// labeled train anomalies; simple negatives fall back to hard ones when the
/// modality holds a single dataset.
class TripletSampler {
public:
    TripletSampler(std::vector<const DatasetHandle*> datasets, const TrainConfig& cfg);

    const std::vector<const DatasetHandle*>& eligible() const { return eligible_; }
    const SamplingScheduler& scheduler() const { return *scheduler_; }

    /// Draws one triplet from the dataset at `eligible_index`.
    Triplet sample(int eligible_index, Rng& rng) const;

    /// Full batch: one modality draw, then `batch_for(modality)` triplets.
    std::vector<Triplet> sample_batch(Rng& rng) const;

private:
    Sample synthetic_hard_negative(const DatasetHandle& d, Rng& rng) const;

    TrainConfig cfg_;
    std::vector<const DatasetHandle*> eligible_;
    std::optional<SamplingScheduler> scheduler_;
    mutable std::vector<bool> warned_simple_fallback_; // per modality enum value
};

/// Margin loss on plain vectors (1 x d rows). The graph version lives in
/// BoundModel::margin_loss; this one backs unit tests and diagnostics.
double contrastive_margin_loss(const MatD& h_ref, const MatD& h_pos, const MatD& h_neg,
                               double alpha, bool printed_form = false);

/// Adam accumulator state, one slot per parameter tensor. Parameters absent
/// from a step's graphs keep their moments and step count untouched.
struct AdamState {
    std::vector<MatF> m, v;
    std::vector<long> t;
};

struct EpochStats {
    int epoch = 0;
    int steps = 0;
    double mean_loss = 0.0;
    double min_loss = 0.0;
    double max_loss = 0.0;
};

struct TrainerSnapshot {
    ParamStore<float> params;
    AdamState adam;
    std::string rng_state;
    int epochs_done = 0;
};

/// Owns the optimization loop: batch sampling, slot-parallel forward/backward,
/// gradient clipping, Adam updates, epoch accounting.
class Trainer {
public:
    Trainer(const ModelConfig& mcfg, const TrainConfig& tcfg,
            std::vector<const DatasetHandle*> datasets);

    void restore(const TrainerSnapshot& snap);
    TrainerSnapshot snapshot() const;

    std::vector<Triplet> sample_batch() { return sampler_.sample_batch(rng_); }

    /// One optimization step over a batch sharing a modality. Returns the mean
    /// loss. Throws NumericError (no update applied) when any triplet's loss
    /// is non-finite, naming the offending triplets.
    double train_step(const std::vector<Triplet>& batch);

    EpochStats run_epoch();

    /// Runs the remaining epochs; invokes the callback after each.
    std::vector<EpochStats> fit(const std::function<void(const EpochStats&)>& on_epoch = {});

    const ParamStore<float>& params() const { return params_; }
    const AdamState& adam() const { return adam_; }
    const TripletSampler& sampler() const { return sampler_; }
    const ModelConfig& model_config() const { return mcfg_; }
    const TrainConfig& train_config() const { return tcfg_; }
    int epochs_done() const { return epochs_done_; }

private:
    ModelConfig mcfg_;
    TrainConfig tcfg_;
    std::vector<const DatasetHandle*> datasets_;
    TripletSampler sampler_;
    ParamStore<float> params_;
    AdamState adam_;
    Rng rng_;
    int epochs_done_ = 0;
};

} // namespace refdet
