#include "refdet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <iostream>
#include <limits>
#include <set>
#include <thread>

#include "refdet/errors.hpp"

namespace refdet {

void TrainConfig::validate() const {
    if (k < 1) throw ConfigError("reference size K must be >= 1");
    if (!(alpha > 0.0)) throw ConfigError("margin alpha must be positive");
    if (!(ratio_simple > 0.0) || !(ratio_hard > 0.0))
        throw ConfigError("negative-kind ratio weights must be positive");
    if (epochs < 0 || steps_per_epoch < 0) throw ConfigError("negative epoch/step count");
    if (batch_time < 1 || batch_tab < 1 || batch_log < 1)
        throw ConfigError("batch sizes must be >= 1");
    if (grad_slots < 1) throw ConfigError("grad_slots must be >= 1");
    if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be >= 0");
}

// ---- scheduler ---------------------------------------------------------------

SamplingScheduler::SamplingScheduler(const std::vector<const DatasetHandle*>& datasets,
                                     const TrainConfig& cfg)
    : datasets_(datasets), universal_(cfg.universal), fixed_modality_(cfg.task_modality) {
    for (const Modality m : {Modality::TimeSeries, Modality::Tabular, Modality::Log}) {
        std::vector<Entry> entries;
        for (size_t i = 0; i < datasets.size(); ++i) {
            if (datasets[i]->modality != m) continue;
            double size = datasets[i]->size_points;
            if (m == Modality::TimeSeries) size = std::max(size, cfg.time_size_floor);
            entries.push_back({static_cast<int>(i), size});
        }
        if (!entries.empty()) {
            modalities_.push_back(m);
            per_modality_.push_back(std::move(entries));
        }
    }
    if (modalities_.empty()) throw DataError("scheduler: no datasets registered");
    if (!universal_) {
        const bool present =
            std::find(modalities_.begin(), modalities_.end(), fixed_modality_) !=
            modalities_.end();
        if (!present)
            throw DataError("scheduler: no datasets of the requested modality " +
                            to_string(fixed_modality_));
    }
}

Modality SamplingScheduler::draw_modality(Rng& rng) const {
    if (!universal_) return fixed_modality_;
    return modalities_[rng.uniform_index(modalities_.size())];
}

int SamplingScheduler::draw_dataset_of(Modality m, Rng& rng) const {
    for (size_t k = 0; k < modalities_.size(); ++k) {
        if (modalities_[k] != m) continue;
        const auto& entries = per_modality_[k];
        double total = 0.0;
        for (const Entry& e : entries) total += e.effective_size;
        const double u = rng.uniform() * total;
        double acc = 0.0;
        for (const Entry& e : entries) {
            acc += e.effective_size;
            if (u < acc) return e.index;
        }
        return entries.back().index;
    }
    throw DataError("scheduler: modality not registered: " + to_string(m));
}

std::vector<double> SamplingScheduler::probabilities(Modality m) const {
    std::vector<double> probs(datasets_.size(), 0.0);
    for (size_t k = 0; k < modalities_.size(); ++k) {
        if (modalities_[k] != m) continue;
        double total = 0.0;
        for (const Entry& e : per_modality_[k]) total += e.effective_size;
        for (const Entry& e : per_modality_[k])
            probs[static_cast<size_t>(e.index)] = e.effective_size / total;
    }
    return probs;
}

// ---- triplet construction -------------------------------------------------------

TripletSampler::TripletSampler(std::vector<const DatasetHandle*> datasets,
                               const TrainConfig& cfg)
    : cfg_(cfg), warned_simple_fallback_(3, false) {
    cfg_.validate();
    for (const DatasetHandle* d : datasets) {
        if (static_cast<int>(d->train_normals.size()) >= cfg.k + 1) {
            eligible_.push_back(d);
        } else {
            std::cerr << "[trainer] dataset " << d->dataset_id << " excluded: only "
                      << d->train_normals.size() << " train normals for K=" << cfg.k << "\n";
        }
    }
    if (eligible_.empty())
        throw DataError("no dataset has at least K+1 train normals (K=" +
                        std::to_string(cfg.k) + ")");
    scheduler_.emplace(eligible_, cfg_);
}

Sample TripletSampler::synthetic_hard_negative(const DatasetHandle& d, Rng& rng) const {
    const Sample& base = d.train_normals[rng.uniform_index(d.train_normals.size())];
    Sample neg = base;
    neg.label = 1;
    switch (d.modality) {
        case Modality::TimeSeries: {
            const int t = static_cast<int>(rng.uniform_index(neg.matrix.rows()));
            const int c = static_cast<int>(rng.uniform_index(neg.matrix.cols()));
            double sigma = c < static_cast<int>(d.stats.channel_std.size())
                               ? d.stats.channel_std[c]
                               : 0.0;
            if (sigma <= 0.0) sigma = 1.0;
            const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
            neg.matrix(t, c) += sign * 6.0 * sigma;
            break;
        }
        case Modality::Tabular: {
            const Sample& other = d.train_normals[rng.uniform_index(d.train_normals.size())];
            const int f = static_cast<int>(neg.matrix.cols());
            const int n_swap = std::max(1, static_cast<int>(std::ceil(0.3 * f)));
            for (const int j : rng.sample_without_replacement(f, n_swap))
                neg.matrix(0, j) = other.matrix(0, j);
            break;
        }
        case Modality::Log: {
            const int w = static_cast<int>(neg.ids.size());
            const int n_swap = std::max(1, static_cast<int>(std::ceil(0.3 * w)));
            const int inventory = std::max(1, d.stats.inventory_size);
            for (const int j : rng.sample_without_replacement(w, n_swap))
                neg.ids[static_cast<size_t>(j)] =
                    static_cast<int32_t>(rng.uniform_index(inventory));
            break;
        }
    }
    return neg;
}

Triplet TripletSampler::sample(int eligible_index, Rng& rng) const {
    const DatasetHandle& src = *eligible_.at(static_cast<size_t>(eligible_index));
    const int n = static_cast<int>(src.train_normals.size());

    Triplet t;
    t.refs.dataset_id = src.dataset_id;
    const std::vector<int> ref_idx = rng.sample_without_replacement(n, cfg_.k);
    const std::set<int> ref_set(ref_idx.begin(), ref_idx.end());
    for (const int i : ref_idx) t.refs.samples.push_back(src.train_normals[i]);

    int pos_idx;
    do {
        pos_idx = static_cast<int>(rng.uniform_index(n));
    } while (ref_set.contains(pos_idx));
    t.positive = src.train_normals[pos_idx];

    bool want_simple =
        rng.uniform() * (cfg_.ratio_simple + cfg_.ratio_hard) < cfg_.ratio_simple;
    std::vector<const DatasetHandle*> others;
    for (const DatasetHandle* d : eligible_)
        if (d->modality == src.modality && d->dataset_id != src.dataset_id)
            others.push_back(d);
    if (want_simple && others.empty()) {
        const size_t mi = static_cast<size_t>(src.modality);
        if (!warned_simple_fallback_[mi]) {
            warned_simple_fallback_[mi] = true;
            std::cerr << "[trainer] modality " << to_string(src.modality)
                      << " has a single dataset; simple negatives replaced by hard ones\n";
        }
        want_simple = false;
    }

    if (want_simple) {
        const DatasetHandle& other = *others[rng.uniform_index(others.size())];
        t.negative = other.train_normals[rng.uniform_index(other.train_normals.size())];
        t.kind = NegativeKind::Simple;
    } else {
        if (!src.train_anomalies.empty()) {
            t.negative = src.train_anomalies[rng.uniform_index(src.train_anomalies.size())];
        } else {
            t.negative = synthetic_hard_negative(src, rng);
        }
        t.kind = NegativeKind::Hard;
    }

    t.debug_id = src.dataset_id + "#pos" + std::to_string(pos_idx) +
                 (t.kind == NegativeKind::Simple ? "#simple" : "#hard");
    return t;
}

std::vector<Triplet> TripletSampler::sample_batch(Rng& rng) const {
    const Modality m = scheduler_->draw_modality(rng);
    const int batch = cfg_.batch_for(m);
    std::vector<Triplet> out;
    out.reserve(static_cast<size_t>(batch));
    for (int b = 0; b < batch; ++b) {
        const int global_idx = scheduler_->draw_dataset_of(m, rng);
        out.push_back(sample(global_idx, rng));
    }
    return out;
}

// ---- loss (scalar form) -----------------------------------------------------------

double contrastive_margin_loss(const MatD& h_ref, const MatD& h_pos, const MatD& h_neg,
                               double alpha, bool printed_form) {
    auto cosine = [](const MatD& a, const MatD& b) {
        const double na = a.norm(), nb = b.norm();
        if (!(na > 0.0) || !(nb > 0.0))
            throw NumericError("cosine similarity undefined for zero-norm vector");
        return a.row(0).dot(b.row(0)) / (na * nb);
    };
    const double s_pos = cosine(h_ref, h_pos);
    const double s_neg = cosine(h_ref, h_neg);
    const double diff = printed_form ? s_pos - s_neg : s_neg - s_pos;
    return std::max(diff + alpha, 0.0);
}

// ---- trainer ------------------------------------------------------------------------

Trainer::Trainer(const ModelConfig& mcfg, const TrainConfig& tcfg,
                 std::vector<const DatasetHandle*> datasets)
    : mcfg_(mcfg), tcfg_(tcfg), datasets_(std::move(datasets)),
      sampler_(datasets_, tcfg_), rng_(derive_seed(tcfg.seed, "train")) {
    mcfg_.validate();
    Rng init_rng(derive_seed(tcfg.seed, "init"));
    params_ = init_model_params<float>(mcfg_, init_rng);
    adam_.m.resize(static_cast<size_t>(params_.count()));
    adam_.v.resize(static_cast<size_t>(params_.count()));
    adam_.t.assign(static_cast<size_t>(params_.count()), 0);
    for (int i = 0; i < params_.count(); ++i) {
        adam_.m[static_cast<size_t>(i)] =
            MatF::Zero(params_.at(i).rows(), params_.at(i).cols());
        adam_.v[static_cast<size_t>(i)] =
            MatF::Zero(params_.at(i).rows(), params_.at(i).cols());
    }
}

void Trainer::restore(const TrainerSnapshot& snap) {
    if (snap.params.count() != params_.count())
        throw IntegrityError("snapshot parameter count mismatch");
    for (int i = 0; i < params_.count(); ++i) {
        if (snap.params.at(i).rows() != params_.at(i).rows() ||
            snap.params.at(i).cols() != params_.at(i).cols())
            throw IntegrityError("snapshot shape mismatch for " + params_.name(i));
    }
    params_ = snap.params;
    adam_ = snap.adam;
    rng_.deserialize(snap.rng_state);
    epochs_done_ = snap.epochs_done;
}

TrainerSnapshot Trainer::snapshot() const {
    return TrainerSnapshot{params_, adam_, rng_.serialize(), epochs_done_};
}

double Trainer::train_step(const std::vector<Triplet>& batch) {
    if (batch.empty()) throw DataError("train_step: empty batch");
    for (const Triplet& t : batch)
        if (t.positive.modality != batch[0].positive.modality)
            throw DataError("train_step: batch mixes modalities");

    const int n_params = params_.count();
    const int slots = tcfg_.grad_slots;
    const int B = static_cast<int>(batch.size());

    struct SlotAccum {
        std::vector<MatF> grads; // zero-size until touched
        double loss_sum = 0.0;
        std::vector<std::string> bad_triplets;
        std::exception_ptr error;
    };
    std::vector<SlotAccum> accums(static_cast<size_t>(slots));
    for (SlotAccum& a : accums) a.grads.resize(static_cast<size_t>(n_params));

    auto run_slot = [&](int slot) {
        SlotAccum& acc = accums[static_cast<size_t>(slot)];
        try {
            Tape<float> tape;
            for (int i = slot; i < B; i += slots) {
                tape.clear();
                BoundModel<float> bm(mcfg_, params_, tape, /*track_grads=*/true);
                const Triplet& t = batch[static_cast<size_t>(i)];
                const NodeId e_ref = bm.encode_reference_set(t.refs.samples);
                const NodeId e_pos = bm.encode_sample(t.positive);
                const NodeId e_neg = bm.encode_sample(t.negative);
                const auto [seq, anchors] = bm.assemble_train(e_ref, e_pos, e_neg);
                const NodeId hidden = bm.forward(seq);
                const NodeId loss = bm.margin_loss(
                    bm.hidden_at(hidden, anchors.ref), bm.hidden_at(hidden, anchors.tgt),
                    bm.hidden_at(hidden, anchors.neg), static_cast<float>(tcfg_.alpha),
                    tcfg_.printed_loss_form);
                const double lv = static_cast<double>(tape.value(loss)(0, 0));
                if (!std::isfinite(lv)) {
                    acc.bad_triplets.push_back(t.debug_id);
                    continue;
                }
                acc.loss_sum += lv;
                tape.backward(loss);
                for (int pi = 0; pi < n_params; ++pi) {
                    const NodeId leaf = bm.leaf_if_bound(pi);
                    if (!leaf.valid()) continue;
                    const MatF& g = tape.grad(leaf);
                    if (g.size() == 0) continue;
                    MatF& dst = acc.grads[static_cast<size_t>(pi)];
                    if (dst.size() == 0) dst = g;
                    else dst += g;
                }
            }
        } catch (...) {
            acc.error = std::current_exception();
        }
    };

    const int hw = static_cast<int>(std::thread::hardware_concurrency());
    const int n_threads = std::max(1, std::min(slots, hw > 0 ? hw : 1));
    if (n_threads == 1) {
        for (int s = 0; s < slots; ++s) run_slot(s);
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<size_t>(n_threads));
        for (int w = 0; w < n_threads; ++w)
            pool.emplace_back([&, w] {
                for (int s = w; s < slots; s += n_threads) run_slot(s);
            });
        for (std::thread& th : pool) th.join();
    }

    std::vector<std::string> bad;
    for (SlotAccum& a : accums) {
        if (a.error) std::rethrow_exception(a.error);
        bad.insert(bad.end(), a.bad_triplets.begin(), a.bad_triplets.end());
    }
    if (!bad.empty()) {
        std::string joined;
        for (const std::string& b : bad) joined += (joined.empty() ? "" : ", ") + b;
        throw NumericError("non-finite loss; step aborted; offending triplets: " + joined);
    }

    // Reduce in slot order (fixed summation order, thread-count independent).
    double loss_sum = 0.0;
    std::vector<MatF> grad(static_cast<size_t>(n_params));
    for (const SlotAccum& a : accums) {
        loss_sum += a.loss_sum;
        for (int pi = 0; pi < n_params; ++pi) {
            const MatF& g = a.grads[static_cast<size_t>(pi)];
            if (g.size() == 0) continue;
            MatF& dst = grad[static_cast<size_t>(pi)];
            if (dst.size() == 0) dst = g;
            else dst += g;
        }
    }
    const float inv_b = 1.0f / static_cast<float>(B);
    double norm_sq = 0.0;
    for (MatF& g : grad) {
        if (g.size() == 0) continue;
        g *= inv_b;
        norm_sq += static_cast<double>(g.cast<double>().squaredNorm());
    }
    const double norm = std::sqrt(norm_sq);
    const float clip_scale =
        (tcfg_.grad_clip > 0.0 && norm > tcfg_.grad_clip)
            ? static_cast<float>(tcfg_.grad_clip / norm)
            : 1.0f;

    const float lr = static_cast<float>(tcfg_.learning_rate);
    const float b1 = static_cast<float>(tcfg_.adam_beta1);
    const float b2 = static_cast<float>(tcfg_.adam_beta2);
    const float eps = static_cast<float>(tcfg_.adam_eps);
    for (int pi = 0; pi < n_params; ++pi) {
        MatF& g = grad[static_cast<size_t>(pi)];
        if (g.size() == 0) continue; // parameter untouched this step
        if (clip_scale != 1.0f) g *= clip_scale;
        auto& m = adam_.m[static_cast<size_t>(pi)];
        auto& v = adam_.v[static_cast<size_t>(pi)];
        long& t = adam_.t[static_cast<size_t>(pi)];
        t += 1;
        m = b1 * m + (1.0f - b1) * g;
        v = (b2 * v.array() + (1.0f - b2) * g.array().square()).matrix();
        const float mc = 1.0f - std::pow(b1, static_cast<float>(t));
        const float vc = 1.0f - std::pow(b2, static_cast<float>(t));
        params_.at(pi).array() -=
            lr * (m.array() / mc) / ((v.array() / vc).sqrt() + eps);
    }
    return loss_sum / B;
}

EpochStats Trainer::run_epoch() {
    EpochStats st;
    st.epoch = epochs_done_ + 1;
    st.steps = tcfg_.steps_per_epoch;
    double sum = 0.0;
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (int s = 0; s < tcfg_.steps_per_epoch; ++s) {
        const double loss = train_step(sample_batch());
        sum += loss;
        lo = std::min(lo, loss);
        hi = std::max(hi, loss);
    }
    st.mean_loss = tcfg_.steps_per_epoch > 0 ? sum / tcfg_.steps_per_epoch : 0.0;
    st.min_loss = tcfg_.steps_per_epoch > 0 ? lo : 0.0;
    st.max_loss = tcfg_.steps_per_epoch > 0 ? hi : 0.0;
    epochs_done_ += 1;
    return st;
}

std::vector<EpochStats> Trainer::fit(const std::function<void(const EpochStats&)>& on_epoch) {
    std::vector<EpochStats> stats;
    while (epochs_done_ < tcfg_.epochs) {
        stats.push_back(run_epoch());
        if (on_epoch) on_epoch(stats.back());
    }
    return stats;
}

} // namespace refdet
