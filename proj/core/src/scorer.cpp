#include "refdet/scorer.hpp"

#include <algorithm>
#include <thread>

#include "refdet/errors.hpp"

namespace refdet {

double discrepancy(const MatD& h_ref, const MatD& h_x) {
    const double na = h_ref.norm(), nb = h_x.norm();
    if (!(na > 0.0) || !(nb > 0.0))
        throw NumericError("discrepancy undefined for zero-norm representation");
    double cos = h_ref.reshaped().dot(h_x.reshaped()) / (na * nb);
    cos = std::clamp(cos, -1.0, 1.0);
    return (1.0 - cos) / 2.0;
}

Scorer::Scorer(const ModelConfig& cfg, const ParamStore<float>& params)
    : cfg_(cfg), params_(params) {
    cfg_.validate();
}

MatD Scorer::reference_representation(const std::vector<Sample>& refs) const {
    Tape<float> tape;
    BoundModel<float> bm(cfg_, params_, tape, /*track_grads=*/false);
    const NodeId e_ref = bm.encode_reference_set(refs);
    // Causal prefix of the inference layout: [prompt; e_ref; REF].
    std::vector<NodeId> parts_storage;
    const int L = cfg_.prompt_len;
    const int R = static_cast<int>(tape.value(e_ref).rows());
    // Reuse the full assembly with a dummy one-row target, then read h_R at
    // its anchor: causal attention guarantees the suffix cannot reach it.
    // Cheaper: forward just the prefix.
    (void)parts_storage;
    const NodeId prompt = bm_param(bm, "prompt");
    const NodeId rt = bm_param(bm, "tok.ref");
    const std::vector<NodeId> parts = {prompt, e_ref, rt};
    const NodeId seq = tape.concat_rows(parts);
    const NodeId hidden = bm.forward(seq);
    const NodeId h_ref = bm.hidden_at(hidden, L + R);
    return tape.value(h_ref).cast<double>();
}

double Scorer::score_one(const std::vector<Sample>& refs, const Sample& target) const {
    const MatD h_ref = reference_representation(refs);
    return score_against(h_ref, refs, target);
}

std::vector<double> Scorer::score_batch(const std::vector<Sample>& refs,
                                        const std::vector<Sample>& targets) const {
    const MatD h_ref = reference_representation(refs);
    std::vector<double> scores(targets.size(), 0.0);

    const unsigned hw = std::thread::hardware_concurrency();
    const size_t n_threads =
        std::max<size_t>(1, std::min<size_t>(targets.size(), hw > 0 ? hw : 1));
    if (n_threads <= 1) {
        for (size_t i = 0; i < targets.size(); ++i)
            scores[i] = score_against(h_ref, refs, targets[i]);
        return scores;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(n_threads);
    for (size_t w = 0; w < n_threads; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (size_t i = w; i < targets.size(); i += n_threads)
                    scores[i] = score_against(h_ref, refs, targets[i]);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (std::thread& t : pool) t.join();
    for (const std::exception_ptr& e : errors)
        if (e) std::rethrow_exception(e);
    return scores;
}

Detection Scorer::detect(const std::vector<Sample>& refs, const Sample& target,
                         double threshold) const {
    if (!refs.empty() && refs[0].modality != target.modality)
        throw DataError("detect: reference set and target disagree on modality");
    Detection d;
    d.score = score_one(refs, target);
    d.flagged = d.score >= threshold;
    return d;
}

std::vector<Sample> choose_reference_set(const DatasetHandle& handle, int k, uint64_t seed) {
    const int n = static_cast<int>(handle.train_normals.size());
    if (k < 1) throw ConfigError("reference size must be >= 1");
    if (n < k)
        throw DataError("dataset " + handle.dataset_id + " has only " + std::to_string(n) +
                        " train normals; cannot draw K=" + std::to_string(k));
    Rng rng(derive_seed(seed, "refs:" + handle.dataset_id));
    std::vector<Sample> refs;
    for (const int idx : rng.sample_without_replacement(n, k))
        refs.push_back(handle.train_normals[idx]);
    return refs;
}

} // namespace refdet
