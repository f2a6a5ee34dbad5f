#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "refdet/errors.hpp"
#include "refdet/tensor.hpp"

namespace refdet {

/// Handle to a value recorded on a Tape.
struct NodeId {
    int32_t v = -1;
    bool valid() const { return v >= 0; }
};

/// Reverse-mode autodiff over dense matrices. Values are recorded in
/// topological order as ops are applied; backward() replays the tape in
/// reverse accumulating gradients. Templated on the scalar type so the same
/// graph code runs at 32-bit for training and 64-bit for finite-difference
/// verification.
///
/// A Tape is single-threaded; training parallelism uses one tape per worker.
template <typename T>
class Tape {
public:
    Tape() = default;

    /// Record an input value. Gradients are tracked only when requested
    /// (parameters yes, data no) and propagate to downstream nodes.
    NodeId leaf(Mat<T> value, bool needs_grad = false) {
        return push(std::move(value), needs_grad, {});
    }

    const Mat<T>& value(NodeId id) const { return nodes_[check(id)].value; }

    /// Gradient of the last backward() root with respect to this node.
    /// Zero-sized if the node was not reached or does not track gradients.
    const Mat<T>& grad(NodeId id) const { return nodes_[check(id)].grad; }

    size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    // ---- elementwise / broadcast -----------------------------------------

    NodeId add(NodeId a, NodeId b) {
        const Mat<T>& va = value(a);
        const Mat<T>& vb = value(b);
        require(va.rows() == vb.rows() && va.cols() == vb.cols(), "add: shape mismatch");
        return push(va + vb, tracked(a) || tracked(b), [a, b](Tape& t, const Mat<T>& g) {
            t.accumulate(a, g);
            t.accumulate(b, g);
        });
    }

    NodeId sub(NodeId a, NodeId b) {
        const Mat<T>& va = value(a);
        const Mat<T>& vb = value(b);
        require(va.rows() == vb.rows() && va.cols() == vb.cols(), "sub: shape mismatch");
        return push(va - vb, tracked(a) || tracked(b), [a, b](Tape& t, const Mat<T>& g) {
            t.accumulate(a, g);
            t.accumulate(b, -g);
        });
    }

    /// a (N x C) + bias (1 x C) broadcast over rows.
    NodeId add_rowvec(NodeId a, NodeId bias) {
        const Mat<T>& va = value(a);
        const Mat<T>& vb = value(bias);
        require(vb.rows() == 1 && vb.cols() == va.cols(), "add_rowvec: bias shape");
        Mat<T> out = va;
        out.rowwise() += vb.row(0);
        return push(std::move(out), tracked(a) || tracked(bias),
                    [a, bias](Tape& t, const Mat<T>& g) {
                        t.accumulate(a, g);
                        t.accumulate(bias, g.colwise().sum());
                    });
    }

    NodeId scale(NodeId a, T c) {
        return push(value(a) * c, tracked(a),
                    [a, c](Tape& t, const Mat<T>& g) { t.accumulate(a, g * c); });
    }

    NodeId add_const(NodeId a, T c) {
        return push(value(a).array() + c, tracked(a),
                    [a](Tape& t, const Mat<T>& g) { t.accumulate(a, g); });
    }

    NodeId relu(NodeId a) {
        const Mat<T>& x = value(a);
        Mat<T> out = x.cwiseMax(T(0));
        return push(std::move(out), tracked(a), [a](Tape& t, const Mat<T>& g) {
            const Mat<T>& x = t.value(a);
            Mat<T> dx = ((x.array() > T(0)).template cast<T>() * g.array()).matrix();
            t.accumulate(a, dx);
        });
    }

    /// Exact GELU: x * Phi(x) with the Gaussian CDF.
    NodeId gelu(NodeId a) {
        const Mat<T>& x = value(a);
        Mat<T> out(x.rows(), x.cols());
        for (Eigen::Index i = 0; i < x.size(); ++i)
            out.data()[i] = gelu_fwd(x.data()[i]);
        return push(std::move(out), tracked(a), [a](Tape& t, const Mat<T>& g) {
            const Mat<T>& x = t.value(a);
            Mat<T> dx(x.rows(), x.cols());
            for (Eigen::Index i = 0; i < x.size(); ++i)
                dx.data()[i] = g.data()[i] * gelu_bwd(x.data()[i]);
            t.accumulate(a, dx);
        });
    }

    // ---- linear algebra ----------------------------------------------------

    /// Matrix product. The forward pass runs row by row so that a given output
    /// row is computed identically whatever the total row count; sequence
    /// prefixes therefore reproduce bit-exactly under causal models.
    NodeId matmul(NodeId a, NodeId b) {
        const Mat<T>& va = value(a);
        const Mat<T>& vb = value(b);
        require(va.cols() == vb.rows(), "matmul: inner dimension mismatch");
        Mat<T> out(va.rows(), vb.cols());
        for (Eigen::Index i = 0; i < va.rows(); ++i)
            out.row(i).noalias() = va.row(i) * vb;
        return push(std::move(out), tracked(a) || tracked(b),
                    [a, b](Tape& t, const Mat<T>& g) {
                        t.accumulate(a, g * t.value(b).transpose());
                        t.accumulate(b, t.value(a).transpose() * g);
                    });
    }

    /// a * b^T without materializing the transpose; row-stable like matmul.
    NodeId matmul_nt(NodeId a, NodeId b) {
        const Mat<T>& va = value(a);
        const Mat<T>& vb = value(b);
        require(va.cols() == vb.cols(), "matmul_nt: inner dimension mismatch");
        Mat<T> out(va.rows(), vb.rows());
        for (Eigen::Index i = 0; i < va.rows(); ++i)
            for (Eigen::Index j = 0; j < vb.rows(); ++j)
                out(i, j) = va.row(i).dot(vb.row(j));
        return push(std::move(out), tracked(a) || tracked(b),
                    [a, b](Tape& t, const Mat<T>& g) {
                        t.accumulate(a, g * t.value(b));
                        t.accumulate(b, g.transpose() * t.value(a));
                    });
    }

    /// Fused scaled-dot-product attention with a strict causal mask: output
    /// row i mixes value rows 0..i under softmax(q_i . k_j * scale). Row i
    /// never reads past position i, so hidden-state prefixes are bit-exact
    /// regardless of suffix content or length.
    NodeId causal_attention(NodeId q, NodeId k, NodeId v, T scale) {
        const Mat<T>& vq = value(q);
        const Mat<T>& vk = value(k);
        const Mat<T>& vv = value(v);
        const Eigen::Index s = vq.rows(), dh = vq.cols();
        require(vk.rows() == s && vv.rows() == s, "causal_attention: row mismatch");
        require(vk.cols() == dh && vv.cols() == dh, "causal_attention: width mismatch");
        Mat<T> probs = Mat<T>::Zero(s, s);
        Mat<T> out = Mat<T>::Zero(s, dh);
        for (Eigen::Index i = 0; i < s; ++i) {
            T mx = -std::numeric_limits<T>::infinity();
            for (Eigen::Index j = 0; j <= i; ++j) {
                const T l = vq.row(i).dot(vk.row(j)) * scale;
                probs(i, j) = l;
                mx = std::max(mx, l);
            }
            T denom = T(0);
            for (Eigen::Index j = 0; j <= i; ++j) {
                probs(i, j) = std::exp(probs(i, j) - mx);
                denom += probs(i, j);
            }
            for (Eigen::Index j = 0; j <= i; ++j) {
                probs(i, j) /= denom;
                out.row(i) += probs(i, j) * vv.row(j);
            }
        }
        const NodeId probs_node = push(std::move(probs), false, {});
        return push(std::move(out), tracked(q) || tracked(k) || tracked(v),
                    [q, k, v, scale, probs_node](Tape& t, const Mat<T>& g) {
                        const Mat<T>& a = t.value(probs_node);
                        const Mat<T>& vq = t.value(q);
                        const Mat<T>& vk = t.value(k);
                        const Mat<T>& vv = t.value(v);
                        const Eigen::Index s = a.rows(), dh = vq.cols();
                        Mat<T> dq = Mat<T>::Zero(s, dh);
                        Mat<T> dk = Mat<T>::Zero(s, dh);
                        Mat<T> dv = Mat<T>::Zero(s, dh);
                        for (Eigen::Index i = 0; i < s; ++i) {
                            // d(probs) then softmax backward restricted to 0..i
                            Eigen::Array<T, 1, Eigen::Dynamic> da(i + 1);
                            for (Eigen::Index j = 0; j <= i; ++j) {
                                da(j) = g.row(i).dot(vv.row(j));
                                dv.row(j) += a(i, j) * g.row(i);
                            }
                            const T dot = (da * a.row(i).head(i + 1).array()).sum();
                            for (Eigen::Index j = 0; j <= i; ++j) {
                                const T dl = a(i, j) * (da(j) - dot) * scale;
                                dq.row(i) += dl * vk.row(j);
                                dk.row(j) += dl * vq.row(i);
                            }
                        }
                        t.accumulate(q, dq);
                        t.accumulate(k, dk);
                        t.accumulate(v, dv);
                    });
    }

    // ---- shape ---------------------------------------------------------------

    NodeId concat_rows(std::span<const NodeId> parts) {
        require(!parts.empty(), "concat_rows: empty");
        Eigen::Index rows = 0;
        const Eigen::Index cols = value(parts[0]).cols();
        bool any_grad = false;
        for (const NodeId p : parts) {
            require(value(p).cols() == cols, "concat_rows: column mismatch");
            rows += value(p).rows();
            any_grad = any_grad || tracked(p);
        }
        Mat<T> out(rows, cols);
        Eigen::Index r = 0;
        for (const NodeId p : parts) {
            out.middleRows(r, value(p).rows()) = value(p);
            r += value(p).rows();
        }
        std::vector<NodeId> ps(parts.begin(), parts.end());
        return push(std::move(out), any_grad, [ps](Tape& t, const Mat<T>& g) {
            Eigen::Index r = 0;
            for (const NodeId p : ps) {
                const Eigen::Index n = t.value(p).rows();
                t.accumulate(p, g.middleRows(r, n));
                r += n;
            }
        });
    }

    NodeId concat_cols(std::span<const NodeId> parts) {
        require(!parts.empty(), "concat_cols: empty");
        Eigen::Index cols = 0;
        const Eigen::Index rows = value(parts[0]).rows();
        bool any_grad = false;
        for (const NodeId p : parts) {
            require(value(p).rows() == rows, "concat_cols: row mismatch");
            cols += value(p).cols();
            any_grad = any_grad || tracked(p);
        }
        Mat<T> out(rows, cols);
        Eigen::Index c = 0;
        for (const NodeId p : parts) {
            out.middleCols(c, value(p).cols()) = value(p);
            c += value(p).cols();
        }
        std::vector<NodeId> ps(parts.begin(), parts.end());
        return push(std::move(out), any_grad, [ps](Tape& t, const Mat<T>& g) {
            Eigen::Index c = 0;
            for (const NodeId p : ps) {
                const Eigen::Index n = t.value(p).cols();
                t.accumulate(p, g.middleCols(c, n));
                c += n;
            }
        });
    }

    NodeId slice_rows(NodeId a, int first, int count) {
        const Mat<T>& va = value(a);
        require(first >= 0 && count >= 1 && first + count <= va.rows(),
                "slice_rows: range out of bounds");
        return push(va.middleRows(first, count), tracked(a),
                    [a, first, count](Tape& t, const Mat<T>& g) {
                        Mat<T> full = Mat<T>::Zero(t.value(a).rows(), t.value(a).cols());
                        full.middleRows(first, count) = g;
                        t.accumulate(a, full);
                    });
    }

    NodeId slice_cols(NodeId a, int first, int count) {
        const Mat<T>& va = value(a);
        require(first >= 0 && count >= 1 && first + count <= va.cols(),
                "slice_cols: range out of bounds");
        return push(va.middleCols(first, count), tracked(a),
                    [a, first, count](Tape& t, const Mat<T>& g) {
                        Mat<T> full = Mat<T>::Zero(t.value(a).rows(), t.value(a).cols());
                        full.middleCols(first, count) = g;
                        t.accumulate(a, full);
                    });
    }

    /// Embedding lookup: one output row per id. Backward scatter-adds into the
    /// table, so repeated ids accumulate.
    NodeId gather_rows(NodeId table, std::vector<int> ids) {
        const Mat<T>& tab = value(table);
        for (const int id : ids)
            require(id >= 0 && id < tab.rows(), "gather_rows: id out of range");
        Mat<T> out(static_cast<Eigen::Index>(ids.size()), tab.cols());
        for (size_t i = 0; i < ids.size(); ++i) out.row(i) = tab.row(ids[i]);
        return push(std::move(out), tracked(table),
                    [table, ids = std::move(ids)](Tape& t, const Mat<T>& g) {
                        Mat<T> full = Mat<T>::Zero(t.value(table).rows(), t.value(table).cols());
                        for (size_t i = 0; i < ids.size(); ++i) full.row(ids[i]) += g.row(i);
                        t.accumulate(table, full);
                    });
    }

    /// Unfold for 1-D convolution over rows with same padding (zero pad).
    /// Input N x C -> output N x (C*k); column block j holds the input shifted
    /// by (j - k/2) rows.
    NodeId im2col(NodeId a, int kernel) {
        const Mat<T>& x = value(a);
        require(kernel >= 1 && kernel % 2 == 1, "im2col: kernel must be odd");
        const int n = static_cast<int>(x.rows());
        const int c = static_cast<int>(x.cols());
        const int half = kernel / 2;
        Mat<T> out = Mat<T>::Zero(n, static_cast<Eigen::Index>(c) * kernel);
        for (int j = 0; j < kernel; ++j) {
            const int shift = j - half;
            for (int t = 0; t < n; ++t) {
                const int src = t + shift;
                if (src >= 0 && src < n) out.block(t, j * c, 1, c) = x.row(src);
            }
        }
        return push(std::move(out), tracked(a),
                    [a, kernel, n, c, half](Tape& t, const Mat<T>& g) {
                        Mat<T> dx = Mat<T>::Zero(n, c);
                        for (int j = 0; j < kernel; ++j) {
                            const int shift = j - half;
                            for (int r = 0; r < n; ++r) {
                                const int src = r + shift;
                                if (src >= 0 && src < n)
                                    dx.row(src) += g.block(r, j * c, 1, c);
                            }
                        }
                        t.accumulate(a, dx);
                    });
    }

    // ---- normalization / attention ------------------------------------------

    /// Row-wise layer norm with affine parameters (gain, bias are 1 x C).
    NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, T eps) {
        const Mat<T>& vx = value(x);
        const Mat<T>& vg = value(gain);
        const Mat<T>& vb = value(bias);
        require(vg.rows() == 1 && vg.cols() == vx.cols(), "layer_norm: gain shape");
        require(vb.rows() == 1 && vb.cols() == vx.cols(), "layer_norm: bias shape");
        const Eigen::Index n = vx.rows(), c = vx.cols();
        Mat<T> xhat(n, c);
        Mat<T> inv_sigma(n, 1);
        for (Eigen::Index i = 0; i < n; ++i) {
            const T mu = vx.row(i).mean();
            const T var = (vx.row(i).array() - mu).square().mean();
            const T is = T(1) / std::sqrt(var + eps);
            inv_sigma(i, 0) = is;
            xhat.row(i) = (vx.row(i).array() - mu) * is;
        }
        Mat<T> out =
            ((xhat.array().rowwise() * vg.row(0).array()).rowwise() + vb.row(0).array()).matrix();
        // keep xhat/inv_sigma alive for backward via aux nodes
        const NodeId xhat_node = push(std::move(xhat), false, {});
        const NodeId is_node = push(std::move(inv_sigma), false, {});
        return push(std::move(out), tracked(x) || tracked(gain) || tracked(bias),
                    [x, gain, bias, xhat_node, is_node](Tape& t, const Mat<T>& g) {
                        const Mat<T>& xh = t.value(xhat_node);
                        const Mat<T>& is = t.value(is_node);
                        const Mat<T>& vg = t.value(gain);
                        t.accumulate(gain, (g.array() * xh.array()).colwise().sum().matrix());
                        t.accumulate(bias, g.colwise().sum());
                        const Eigen::Index n = xh.rows(), c = xh.cols();
                        Mat<T> dx(n, c);
                        for (Eigen::Index i = 0; i < n; ++i) {
                            Eigen::Array<T, 1, Eigen::Dynamic> dxhat =
                                g.row(i).array() * vg.row(0).array();
                            const T m1 = dxhat.mean();
                            const T m2 = (dxhat * xh.row(i).array()).mean();
                            dx.row(i) =
                                (is(i, 0) * (dxhat - m1 - xh.row(i).array() * m2)).matrix();
                        }
                        t.accumulate(x, dx);
                    });
    }

    /// Row-wise softmax. When causal is set the matrix must be square and row
    /// i is restricted to columns 0..i (the rest are exact zeros).
    NodeId softmax_rows(NodeId a, bool causal) {
        const Mat<T>& x = value(a);
        if (causal) require(x.rows() == x.cols(), "softmax_rows: causal mask needs square input");
        const Eigen::Index n = x.rows(), c = x.cols();
        Mat<T> out = Mat<T>::Zero(n, c);
        for (Eigen::Index i = 0; i < n; ++i) {
            const Eigen::Index lim = causal ? i + 1 : c;
            const T m = x.row(i).head(lim).maxCoeff();
            Eigen::Array<T, 1, Eigen::Dynamic> e = (x.row(i).head(lim).array() - m).exp();
            out.row(i).head(lim) = (e / e.sum()).matrix();
        }
        const NodeId out_probe = push(out, false, {}); // retain probabilities for backward
        return push(std::move(out), tracked(a), [a, causal, out_probe](Tape& t, const Mat<T>& g) {
            const Mat<T>& y = t.value(out_probe);
            const Eigen::Index n = y.rows(), c = y.cols();
            Mat<T> dx = Mat<T>::Zero(n, c);
            for (Eigen::Index i = 0; i < n; ++i) {
                const Eigen::Index lim = causal ? i + 1 : c;
                const T dot = (g.row(i).head(lim).array() * y.row(i).head(lim).array()).sum();
                dx.row(i).head(lim) =
                    (y.row(i).head(lim).array() * (g.row(i).head(lim).array() - dot)).matrix();
            }
            t.accumulate(a, dx);
        });
    }

    // ---- reductions ------------------------------------------------------------

    NodeId mean_all(NodeId a) {
        const Mat<T>& x = value(a);
        Mat<T> out(1, 1);
        out(0, 0) = x.mean();
        return push(std::move(out), tracked(a), [a](Tape& t, const Mat<T>& g) {
            const Mat<T>& x = t.value(a);
            const T w = g(0, 0) / static_cast<T>(x.size());
            t.accumulate(a, Mat<T>::Constant(x.rows(), x.cols(), w));
        });
    }

    /// Cosine similarity of two 1 x C vectors -> 1 x 1.
    NodeId cosine(NodeId a, NodeId b) {
        const Mat<T>& va = value(a);
        const Mat<T>& vb = value(b);
        require(va.rows() == 1 && vb.rows() == 1 && va.cols() == vb.cols(),
                "cosine: expects equal-width row vectors");
        const T na = va.norm();
        const T nb = vb.norm();
        if (!(na > T(0)) || !(nb > T(0)))
            throw NumericError("cosine similarity undefined for zero-norm vector");
        const T s = (va.row(0).dot(vb.row(0))) / (na * nb);
        Mat<T> out(1, 1);
        out(0, 0) = s;
        return push(std::move(out), tracked(a) || tracked(b),
                    [a, b, na, nb, s](Tape& t, const Mat<T>& g) {
                        const Mat<T>& va = t.value(a);
                        const Mat<T>& vb = t.value(b);
                        const T w = g(0, 0);
                        t.accumulate(a, w * (vb / (na * nb) - (s / (na * na)) * va));
                        t.accumulate(b, w * (va / (na * nb) - (s / (nb * nb)) * vb));
                    });
    }

    /// Backpropagate from a scalar (1 x 1) root.
    void backward(NodeId root) {
        Node& r = nodes_[check(root)];
        require(r.value.rows() == 1 && r.value.cols() == 1, "backward: root must be scalar");
        for (Node& n : nodes_) n.grad.resize(0, 0);
        r.grad = Mat<T>::Constant(1, 1, T(1));
        for (int32_t i = root.v; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.back && n.grad.size() > 0) n.back(*this, n.grad);
        }
    }

private:
    using BackFn = std::function<void(Tape&, const Mat<T>&)>;

    struct Node {
        Mat<T> value;
        Mat<T> grad; // empty until touched by backward
        bool needs_grad = false;
        BackFn back;
    };

    static void require(bool ok, const char* msg) {
        if (!ok) throw DataError(std::string("tape: ") + msg);
    }

    int32_t check(NodeId id) const {
        require(id.valid() && id.v < static_cast<int32_t>(nodes_.size()), "invalid node id");
        return id.v;
    }

    bool tracked(NodeId id) const { return nodes_[check(id)].needs_grad; }

    NodeId push(Mat<T> value, bool needs_grad, BackFn back) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        if (needs_grad) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return NodeId{static_cast<int32_t>(nodes_.size()) - 1};
    }

    /// Add g to the gradient buffer of `id` (no-op for untracked nodes).
    template <typename Expr>
    void accumulate(NodeId id, const Expr& g) {
        Node& n = nodes_[check(id)];
        if (!n.needs_grad) return;
        if (n.grad.size() == 0) n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
        n.grad += g;
    }

    static T gelu_fwd(T x) {
        return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
    }
    static T gelu_bwd(T x) {
        const T phi = std::exp(T(-0.5) * x * x) /
                      std::sqrt(T(2) * std::numbers::pi_v<T>);
        return T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>)) + x * phi;
    }

    std::vector<Node> nodes_;
};

} // namespace refdet
