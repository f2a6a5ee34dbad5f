#pragma once

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "refdet/errors.hpp"
#include "refdet/ingest.hpp"
#include "refdet/rng.hpp"
#include "refdet/tape.hpp"
#include "refdet/tensor.hpp"

namespace refdet {

/// Architecture hyperparameters shared by the encoders and the backbone.
struct ModelConfig {
    int d_model = 128;

    // time branch: instance norm + 1-D convolution stack
    int patch_len = 16;
    int d_raw = 1;
    int time_conv_layers = 1;
    int conv_kernel = 3;

    // tabular branch: two-layer perceptron
    int f_prime = 8;
    int tab_hidden = 0; // 0 -> 2 * d_model

    // log branch: template-id embedding table + shallow bidirectional encoder
    int window = 16;
    int inventory_size = 16; // train-time inventory; one rare bucket appended
    int log_layers = 2;
    int log_heads = 4;

    // backbone: causal pre-norm transformer with learned absolute positions
    int layers = 4;
    int heads = 4;
    int prompt_len = 8;
    int max_ref_count = 16; // sizes the position table for reference-size sweeps

    double ln_eps = 1e-5;
    double instance_norm_eps = 1e-5;

    int hidden_tab() const { return tab_hidden > 0 ? tab_hidden : 2 * d_model; }

    /// N^(M): embedding rows one sample contributes.
    int tokens_per_sample(Modality m) const {
        switch (m) {
            case Modality::TimeSeries: return patch_len;
            case Modality::Tabular: return 1;
            case Modality::Log: return window;
        }
        return 0;
    }

    /// Longest training sequence the position table must cover:
    /// [prompt; K_max * N; REF; N; TGT; N; NEG].
    int max_seq_len() const {
        const int n = std::max(patch_len, std::max(window, 1));
        return prompt_len + max_ref_count * n + 1 + n + 1 + n + 1;
    }

    void validate() const {
        if (d_model < 1) throw ConfigError("d_model must be positive");
        if (heads < 1 || d_model % heads != 0)
            throw ConfigError("backbone heads must divide d_model");
        if (log_heads < 1 || d_model % log_heads != 0)
            throw ConfigError("log encoder heads must divide d_model");
        if (patch_len < 1 || d_raw < 1) throw ConfigError("invalid time-branch shape");
        if (f_prime < 1) throw ConfigError("f_prime must be positive");
        if (window < 1) throw ConfigError("window must be positive");
        if (inventory_size < 1) throw ConfigError("inventory_size must be positive");
        if (conv_kernel < 1 || conv_kernel % 2 == 0)
            throw ConfigError("conv kernel must be odd");
        if (time_conv_layers < 1) throw ConfigError("need at least one conv layer");
        if (layers < 0 || log_layers < 0) throw ConfigError("negative layer count");
        if (prompt_len < 1) throw ConfigError("prompt_len must be >= 1");
        if (max_ref_count < 1) throw ConfigError("max_ref_count must be >= 1");
    }
};

/// Instruction block prepended to every sequence. Toy mode uses learned
/// vectors; a pretrained adapter would tokenize the instruction text instead.
struct PromptBlock {
    enum class Source { LearnedVectors, TokenizedText };
    Source source = Source::LearnedVectors;
    int length = 8;
    std::string text; // used by TokenizedText adapters only
};

/// Contract for an external representation backbone: assembled sequence in,
/// same-shape final-layer hidden states out. The toy backbone implements this
/// shape contract; a pretrained decoder can be substituted behind it.
class BackboneAdapter {
public:
    virtual ~BackboneAdapter() = default;
    virtual MatF forward(const MatF& sequence) = 0;
};

/// Named dense parameter tensors, iterable in a stable order.
template <typename T>
class ParamStore {
public:
    int add(const std::string& name, int rows, int cols) {
        if (index_.contains(name)) throw ConfigError("duplicate parameter: " + name);
        index_[name] = static_cast<int>(names_.size());
        names_.push_back(name);
        values_.push_back(Mat<T>::Zero(rows, cols));
        return static_cast<int>(names_.size()) - 1;
    }

    int find(const std::string& name) const {
        const auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }

    Mat<T>& at(const std::string& name) { return values_[find(name)]; }
    const Mat<T>& at(const std::string& name) const { return values_[find(name)]; }
    Mat<T>& at(int idx) { return values_[idx]; }
    const Mat<T>& at(int idx) const { return values_[idx]; }
    const std::string& name(int idx) const { return names_[idx]; }

    int count() const { return static_cast<int>(values_.size()); }

    size_t total_scalars() const {
        size_t n = 0;
        for (const auto& v : values_) n += static_cast<size_t>(v.size());
        return n;
    }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (int i = 0; i < count(); ++i) {
            out.add(names_[i], static_cast<int>(values_[i].rows()),
                    static_cast<int>(values_[i].cols()));
            out.at(i) = values_[i].template cast<U>();
        }
        return out;
    }

private:
    std::vector<std::string> names_;
    std::vector<Mat<T>> values_;
    std::unordered_map<std::string, int> index_;
};

namespace detail {

template <typename T>
void add_block_params(ParamStore<T>& s, const std::string& prefix, int d) {
    s.add(prefix + ".ln1.g", 1, d);
    s.add(prefix + ".ln1.b", 1, d);
    for (const char* w : {"wq", "wk", "wv", "wo"}) s.add(prefix + ".attn." + w, d, d);
    for (const char* b : {"bq", "bk", "bv", "bo"}) s.add(prefix + ".attn." + b, 1, d);
    s.add(prefix + ".ln2.g", 1, d);
    s.add(prefix + ".ln2.b", 1, d);
    s.add(prefix + ".ffn.w1", d, 4 * d);
    s.add(prefix + ".ffn.b1", 1, 4 * d);
    s.add(prefix + ".ffn.w2", 4 * d, d);
    s.add(prefix + ".ffn.b2", 1, d);
}

} // namespace detail

/// Builds the full learnable-parameter set. Weights are N(0, 0.02); norms are
/// identity; biases zero. The backbone position table starts at zero so
/// positions beyond the trained sequence length contribute nothing when the
/// reference set is enlarged at inference time.
template <typename T>
ParamStore<T> init_model_params(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    const int d = cfg.d_model;
    const T w_std = T(0.02);
    ParamStore<T> s;

    auto randomize = [&](const std::string& name) {
        Mat<T>& m = s.at(name);
        m = random_normal<T>(static_cast<int>(m.rows()), static_cast<int>(m.cols()), w_std, rng);
    };
    auto ones = [&](const std::string& name) { s.at(name).setOnes(); };

    s.add("prompt", cfg.prompt_len, d);
    randomize("prompt");
    for (const char* t : {"tok.ref", "tok.tgt", "tok.neg"}) {
        s.add(t, 1, d);
        randomize(t);
    }

    // time branch
    for (int l = 0; l < cfg.time_conv_layers; ++l) {
        const int in = l == 0 ? cfg.d_raw : d;
        const std::string p = "enc.time.conv" + std::to_string(l);
        s.add(p + ".w", d, in * cfg.conv_kernel);
        s.add(p + ".b", 1, d);
        randomize(p + ".w");
    }

    // tabular branch
    s.add("enc.tab.fc1.w", cfg.f_prime, cfg.hidden_tab());
    s.add("enc.tab.fc1.b", 1, cfg.hidden_tab());
    s.add("enc.tab.fc2.w", cfg.hidden_tab(), d);
    s.add("enc.tab.fc2.b", 1, d);
    randomize("enc.tab.fc1.w");
    randomize("enc.tab.fc2.w");

    // log branch (+1 row: rare bucket for unseen templates)
    s.add("enc.log.embed", cfg.inventory_size + 1, d);
    s.add("enc.log.pos", cfg.window, d);
    randomize("enc.log.embed");
    randomize("enc.log.pos");
    for (int l = 0; l < cfg.log_layers; ++l) {
        const std::string p = "enc.log.blk" + std::to_string(l);
        detail::add_block_params(s, p, d);
        for (const char* w : {"wq", "wk", "wv", "wo"}) randomize(p + ".attn." + w);
        randomize(p + ".ffn.w1");
        randomize(p + ".ffn.w2");
        ones(p + ".ln1.g");
        ones(p + ".ln2.g");
    }
    if (cfg.log_layers > 0) {
        s.add("enc.log.lnf.g", 1, d);
        s.add("enc.log.lnf.b", 1, d);
        ones("enc.log.lnf.g");
    }

    // backbone
    s.add("bb.pos", cfg.max_seq_len(), d); // zero-init, see above
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = "bb.blk" + std::to_string(l);
        detail::add_block_params(s, p, d);
        for (const char* w : {"wq", "wk", "wv", "wo"}) randomize(p + ".attn." + w);
        randomize(p + ".ffn.w1");
        randomize(p + ".ffn.w2");
        ones(p + ".ln1.g");
        ones(p + ".ln2.g");
    }
    if (cfg.layers > 0) {
        s.add("bb.lnf.g", 1, d);
        s.add("bb.lnf.b", 1, d);
        ones("bb.lnf.g");
    }
    return s;
}

/// Per-channel instance normalization over a patch: zero mean, unit variance
/// per column, epsilon-guarded so constant channels map to zero.
inline MatD instance_normalize(const MatD& patch, double eps) {
    MatD out(patch.rows(), patch.cols());
    for (Eigen::Index c = 0; c < patch.cols(); ++c) {
        const double mean = patch.col(c).mean();
        const double var = (patch.col(c).array() - mean).square().mean();
        out.col(c) = (patch.col(c).array() - mean) / std::sqrt(var + eps);
    }
    return out;
}

/// Anchor positions of the special tokens inside an assembled sequence.
struct Anchors {
    int ref = -1;
    int tgt = -1;
    int neg = -1; // -1 on inference sequences
};

/// A model bound to one tape: parameters become leaves on first use, graph
/// builders compose encoders, sequence assembly, the causal backbone, and the
/// training loss. One BoundModel per tape per thread.
template <typename T>
class BoundModel {
public:
    BoundModel(const ModelConfig& cfg, const ParamStore<T>& params, Tape<T>& tape,
               bool track_grads)
        : cfg_(cfg), params_(params), tape_(tape), track_(track_grads),
          leaves_(static_cast<size_t>(params.count()), NodeId{}) {}

    /// Leaf node of parameter i, or invalid if this graph never touched it.
    NodeId leaf_if_bound(int idx) const { return leaves_[static_cast<size_t>(idx)]; }

    /// Named parameter as a tape leaf (bound on first use).
    NodeId param_leaf(const std::string& name) { return param(name); }

    // ---- modality-aware encoder ------------------------------------------

    NodeId encode_time(const MatD& patch) {
        if (patch.rows() != cfg_.patch_len || patch.cols() != cfg_.d_raw)
            throw DataError("encode_time: patch shape " + shape_str(patch) +
                            " does not match configured " + std::to_string(cfg_.patch_len) +
                            "x" + std::to_string(cfg_.d_raw));
        if (!patch.allFinite()) throw DataError("encode_time: non-finite input");
        const MatD normed = instance_normalize(patch, cfg_.instance_norm_eps);
        NodeId h = tape_.leaf(normed.cast<T>(), false);
        for (int l = 0; l < cfg_.time_conv_layers; ++l) {
            const std::string p = "enc.time.conv" + std::to_string(l);
            h = tape_.im2col(h, cfg_.conv_kernel);
            h = tape_.matmul_nt(h, param(p + ".w"));
            h = tape_.add_rowvec(h, param(p + ".b"));
            if (l + 1 < cfg_.time_conv_layers) h = tape_.gelu(h);
        }
        return h;
    }

    NodeId encode_tab(const MatD& row) {
        if (row.rows() != 1 || row.cols() != cfg_.f_prime)
            throw DataError("encode_tab: expected 1x" + std::to_string(cfg_.f_prime) +
                            " row, got " + shape_str(row));
        if (!row.allFinite()) throw DataError("encode_tab: non-finite input");
        NodeId h = tape_.leaf(row.cast<T>(), false);
        h = tape_.add_rowvec(tape_.matmul(h, param("enc.tab.fc1.w")), param("enc.tab.fc1.b"));
        h = tape_.gelu(h);
        h = tape_.add_rowvec(tape_.matmul(h, param("enc.tab.fc2.w")), param("enc.tab.fc2.b"));
        return h;
    }

    NodeId encode_log(const std::vector<int32_t>& ids) {
        if (static_cast<int>(ids.size()) != cfg_.window)
            throw DataError("encode_log: expected window of " + std::to_string(cfg_.window) +
                            " ids, got " + std::to_string(ids.size()));
        std::vector<int> mapped(ids.size());
        for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0) throw DataError("encode_log: negative template id");
            // ids past the train inventory share the rare bucket (last row)
            mapped[i] = std::min<int>(ids[i], cfg_.inventory_size);
        }
        NodeId h = tape_.gather_rows(param("enc.log.embed"), std::move(mapped));
        h = tape_.add(h, tape_.slice_rows(param("enc.log.pos"), 0, cfg_.window));
        for (int l = 0; l < cfg_.log_layers; ++l)
            h = transformer_block(h, "enc.log.blk" + std::to_string(l), cfg_.log_heads,
                                  /*causal=*/false);
        if (cfg_.log_layers > 0)
            h = tape_.layer_norm(h, param("enc.log.lnf.g"), param("enc.log.lnf.b"),
                                 static_cast<T>(cfg_.ln_eps));
        return h;
    }

    NodeId encode_sample(const Sample& s) {
        switch (s.modality) {
            case Modality::TimeSeries: return encode_time(s.matrix);
            case Modality::Tabular: return encode_tab(s.matrix);
            case Modality::Log: return encode_log(s.ids);
        }
        throw DataError("encode_sample: unknown modality");
    }

    /// Encodes K reference samples and concatenates them in selection order.
    NodeId encode_reference_set(std::span<const Sample> refs) {
        if (refs.empty()) throw DataError("reference set must hold at least one sample");
        for (const Sample& s : refs)
            if (s.modality != refs[0].modality || s.dataset_id != refs[0].dataset_id)
                throw DataError("reference set mixes modalities or datasets");
        std::vector<NodeId> parts;
        parts.reserve(refs.size());
        for (const Sample& s : refs) parts.push_back(encode_sample(s));
        return refs.size() == 1 ? parts[0] : tape_.concat_rows(parts);
    }

    // ---- prompt-guided representation module -----------------------------

    /// Inference layout: [prompt; e_ref; REF; e_tgt; TGT].
    std::pair<NodeId, Anchors> assemble_inference(NodeId e_ref, NodeId e_tgt) {
        check_width(e_ref, "reference block");
        check_width(e_tgt, "target block");
        const int L = cfg_.prompt_len;
        const int R = static_cast<int>(tape_.value(e_ref).rows());
        const int N = static_cast<int>(tape_.value(e_tgt).rows());
        const std::vector<NodeId> parts = {param("prompt"), e_ref, param("tok.ref"), e_tgt,
                                           param("tok.tgt")};
        Anchors a;
        a.ref = L + R;
        a.tgt = L + R + 1 + N;
        return {tape_.concat_rows(parts), a};
    }

    /// Training layout: [prompt; e_ref; REF; e_pos; TGT; e_neg; NEG]; the
    /// positive sample sits at the TGT slot so inference is a strict prefix.
    std::pair<NodeId, Anchors> assemble_train(NodeId e_ref, NodeId e_pos, NodeId e_neg) {
        check_width(e_ref, "reference block");
        check_width(e_pos, "positive block");
        check_width(e_neg, "negative block");
        Anchors a;
        const int L = cfg_.prompt_len;
        const int R = static_cast<int>(tape_.value(e_ref).rows());
        const int N = static_cast<int>(tape_.value(e_pos).rows());
        const int M = static_cast<int>(tape_.value(e_neg).rows());
        const std::vector<NodeId> parts = {param("prompt"), e_ref,  param("tok.ref"),
                                           e_pos,           param("tok.tgt"), e_neg,
                                           param("tok.neg")};
        a.ref = L + R;
        a.tgt = L + R + 1 + N;
        a.neg = L + R + 1 + N + 1 + M;
        return {tape_.concat_rows(parts), a};
    }

    /// Causal backbone. Zero layers is the exact identity (debug mode).
    NodeId forward(NodeId seq) {
        const int S = static_cast<int>(tape_.value(seq).rows());
        check_width(seq, "sequence");
        if (cfg_.layers == 0) return seq;
        if (S > cfg_.max_seq_len())
            throw ConfigError("sequence length " + std::to_string(S) +
                              " exceeds position table (" + std::to_string(cfg_.max_seq_len()) +
                              "); raise max_ref_count");
        NodeId x = tape_.add(seq, tape_.slice_rows(param("bb.pos"), 0, S));
        for (int l = 0; l < cfg_.layers; ++l)
            x = transformer_block(x, "bb.blk" + std::to_string(l), cfg_.heads, /*causal=*/true);
        x = tape_.layer_norm(x, param("bb.lnf.g"), param("bb.lnf.b"),
                             static_cast<T>(cfg_.ln_eps));
        if (!tape_.value(x).allFinite())
            throw NumericError("backbone forward produced non-finite hidden states");
        return x;
    }

    /// Final-layer hidden state at one anchor position (1 x d_model).
    NodeId hidden_at(NodeId hidden, int pos) {
        const auto rows = tape_.value(hidden).rows();
        if (pos < 0 || pos >= rows)
            throw DataError("anchor position " + std::to_string(pos) + " out of range 0.." +
                            std::to_string(rows - 1));
        return tape_.slice_rows(hidden, pos, 1);
    }

    /// Margin loss over cosine similarities. The corrected form rewards
    /// s(ref,pos) > s(ref,neg) + alpha; the printed form flips the sign and is
    /// kept for ablation only.
    NodeId margin_loss(NodeId h_ref, NodeId h_pos, NodeId h_neg, T alpha, bool printed_form) {
        const NodeId s_pos = tape_.cosine(h_ref, h_pos);
        const NodeId s_neg = tape_.cosine(h_ref, h_neg);
        const NodeId diff = printed_form ? tape_.sub(s_pos, s_neg) : tape_.sub(s_neg, s_pos);
        return tape_.relu(tape_.add_const(diff, alpha));
    }

    Tape<T>& tape() { return tape_; }
    const ModelConfig& config() const { return cfg_; }

private:
    NodeId param(const std::string& name) {
        const int idx = params_.find(name);
        NodeId& leaf = leaves_[static_cast<size_t>(idx)];
        if (!leaf.valid()) leaf = tape_.leaf(params_.at(idx), track_);
        return leaf;
    }

    void check_width(NodeId n, const char* what) {
        if (tape_.value(n).cols() != cfg_.d_model)
            throw DataError(std::string(what) + " width " +
                            std::to_string(tape_.value(n).cols()) + " != d_model " +
                            std::to_string(cfg_.d_model));
    }

    NodeId transformer_block(NodeId x, const std::string& p, int heads, bool causal) {
        const T eps = static_cast<T>(cfg_.ln_eps);
        const int d = cfg_.d_model;
        const int dh = d / heads;

        NodeId xn = tape_.layer_norm(x, param(p + ".ln1.g"), param(p + ".ln1.b"), eps);
        NodeId q = tape_.add_rowvec(tape_.matmul(xn, param(p + ".attn.wq")),
                                    param(p + ".attn.bq"));
        NodeId k = tape_.add_rowvec(tape_.matmul(xn, param(p + ".attn.wk")),
                                    param(p + ".attn.bk"));
        NodeId v = tape_.add_rowvec(tape_.matmul(xn, param(p + ".attn.wv")),
                                    param(p + ".attn.bv"));
        std::vector<NodeId> head_out;
        head_out.reserve(static_cast<size_t>(heads));
        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
        for (int h = 0; h < heads; ++h) {
            const NodeId qh = tape_.slice_cols(q, h * dh, dh);
            const NodeId kh = tape_.slice_cols(k, h * dh, dh);
            const NodeId vh = tape_.slice_cols(v, h * dh, dh);
            if (causal) {
                head_out.push_back(tape_.causal_attention(qh, kh, vh, inv_sqrt));
            } else {
                const NodeId logits = tape_.scale(tape_.matmul_nt(qh, kh), inv_sqrt);
                const NodeId attn = tape_.softmax_rows(logits, /*causal=*/false);
                head_out.push_back(tape_.matmul(attn, vh));
            }
        }
        NodeId o = heads == 1 ? head_out[0] : tape_.concat_cols(head_out);
        o = tape_.add_rowvec(tape_.matmul(o, param(p + ".attn.wo")), param(p + ".attn.bo"));
        x = tape_.add(x, o);

        NodeId yn = tape_.layer_norm(x, param(p + ".ln2.g"), param(p + ".ln2.b"), eps);
        NodeId f = tape_.add_rowvec(tape_.matmul(yn, param(p + ".ffn.w1")),
                                    param(p + ".ffn.b1"));
        f = tape_.gelu(f);
        f = tape_.add_rowvec(tape_.matmul(f, param(p + ".ffn.w2")), param(p + ".ffn.b2"));
        return tape_.add(x, f);
    }

    const ModelConfig& cfg_;
    const ParamStore<T>& params_;
    Tape<T>& tape_;
    bool track_;
    std::vector<NodeId> leaves_;
};

} // namespace refdet
