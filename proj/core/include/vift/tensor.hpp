#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vift/rng.hpp"

namespace vift {

// Checked mode: ops reject NaN/Inf at their boundaries. Off by default.
inline bool& checked_mode_flag() {
    static bool flag = false;
    return flag;
}
inline void set_checked_mode(bool on) { checked_mode_flag() = on; }
inline bool checked_mode() { return checked_mode_flag(); }

namespace detail {
inline std::uint64_t next_graph_epoch() {
    static std::uint64_t counter = 0;
    return ++counter;
}
}  // namespace detail

template <typename T>
struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until backward touches it
    bool requires_grad = false;
    std::uint64_t graph_epoch = 0;
    int id = -1;
};

// Value-semantics handle to a node in (at most) one recording graph at a
// time. Immutable after forward recording by convention; read-only sharing
// across threads is safe, mutation requires exclusive access.
template <typename T>
class Tensor {
public:
    using Node = TensorNode<T>;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, T fill = T(0)) {
        node_ = std::make_shared<Node>();
        node_->shape = std::move(shape);
        node_->value.assign(count(node_->shape), fill);
    }

    Tensor(std::vector<std::size_t> shape, std::vector<T> data) {
        node_ = std::make_shared<Node>();
        if (count(shape) != data.size()) {
            throw std::invalid_argument("tensor: shape/data size mismatch");
        }
        node_->shape = std::move(shape);
        node_->value = std::move(data);
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t size() const { return node_->value.size(); }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t rows() const { return node_->shape.at(0); }
    std::size_t cols() const { return node_->shape.at(1); }

    std::vector<T>& value() { return node_->value; }
    const std::vector<T>& value() const { return node_->value; }
    T* data() { return node_->value.data(); }
    const T* data() const { return node_->value.data(); }

    T item() const {
        if (size() != 1) throw std::invalid_argument("tensor: item() on non-scalar");
        return node_->value[0];
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    // Grad buffer, zero-initialized on first access.
    std::vector<T>& grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
        return node_->grad;
    }
    const std::vector<T>& grad() const { return node_->grad; }
    void zero_grad() {
        if (node_) node_->grad.assign(node_->value.size(), T(0));
    }
    void drop_grad() {
        if (node_) node_->grad.clear();
    }

    int node_id() const { return node_ ? node_->id : -1; }
    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& shared_node() const { return node_; }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }

private:
    std::shared_ptr<Node> node_;
};

// Reverse-mode tape. Records ops in forward order, which is already a
// topological order of the DAG; backward() walks the record in reverse.
// Single-threaded per graph.
template <typename T>
class Graph {
public:
    struct OpRecord {
        const char* name;
        std::vector<int> inputs;
        int output;
        std::function<void()> backward;
    };

    Graph() : epoch_(detail::next_graph_epoch()) {}

    // Bind a tensor's node to this graph, assigning a fresh id if it was
    // created outside or recorded on an older graph.
    int touch(const Tensor<T>& t) {
        auto* n = t.node();
        if (n->graph_epoch != epoch_) {
            n->graph_epoch = epoch_;
            n->id = next_id_++;
        }
        return n->id;
    }

    void record(const char* name, std::initializer_list<Tensor<T>> inputs, const Tensor<T>& output,
                std::function<void()> backward) {
        OpRecord rec;
        rec.name = name;
        for (const auto& in : inputs) rec.inputs.push_back(touch(in));
        rec.output = touch(output);
        rec.backward = std::move(backward);
        ops_.push_back(std::move(rec));
    }

    const std::vector<OpRecord>& ops() const { return ops_; }
    std::uint64_t epoch() const { return epoch_; }

    // Root must be scalar. Seeds d(root)/d(root) = 1 and accumulates
    // gradients into every requires_grad node reachable from it.
    void backward(Tensor<T>& root) {
        if (root.size() != 1) throw std::invalid_argument("backward: root must be scalar");
        root.grad()[0] += T(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
            if (it->backward) it->backward();
        }
    }

private:
    std::vector<OpRecord> ops_;
    std::uint64_t epoch_;
    int next_id_ = 0;
};

namespace detail {

template <typename T>
inline void check_finite(const char* op, const Tensor<T>& t) {
    if (!checked_mode()) return;
    for (const T v : t.value()) {
        if (!std::isfinite(static_cast<double>(v))) {
            throw std::runtime_error(std::string("checked mode: non-finite value in ") + op);
        }
    }
}

template <typename T>
inline bool wants_grad(const Graph<T>* g, std::initializer_list<Tensor<T>> inputs) {
    if (!g) return false;
    for (const auto& in : inputs) {
        if (in.requires_grad()) return true;
    }
    return false;
}

// Marks the output as grad-carrying and records the backward closure.
template <typename T>
inline void finish_op(Graph<T>* g, const char* name, std::initializer_list<Tensor<T>> inputs,
                      Tensor<T>& out, std::function<void()> backward) {
    check_finite(name, out);
    if (!wants_grad(g, inputs)) return;
    out.set_requires_grad(true);
    g->record(name, inputs, out, std::move(backward));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops. All take the recording graph as first argument; pass nullptr
// for inference (no tape, no grads). Accumulation runs in double regardless
// of T.
// ---------------------------------------------------------------------------

// [m x k] * [k x n] -> [m x n]
template <typename T>
Tensor<T> matmul(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner dimensions disagree");
    }
    detail::check_finite("matmul.a", a);
    detail::check_finite("matmul.b", b);
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor<T> out({m, n});
    const T* pa = a.data();
    const T* pb = b.data();
    T* pc = out.data();
    std::vector<double> row(n);
    for (std::size_t i = 0; i < m; ++i) {
        row.assign(n, 0.0);
        for (std::size_t p = 0; p < k; ++p) {
            const double av = static_cast<double>(pa[i * k + p]);
            const T* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += av * static_cast<double>(brow[j]);
        }
        for (std::size_t j = 0; j < n; ++j) pc[i * n + j] = static_cast<T>(row[j]);
    }
    detail::finish_op(g, "matmul", {a, b}, out, [a, b, out]() mutable {
        const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
        const auto& go = out.grad();
        if (a.requires_grad()) {
            auto& ga = a.grad();
            const T* pb = b.data();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        acc += static_cast<double>(go[i * n + j]) * static_cast<double>(pb[p * n + j]);
                    }
                    ga[i * k + p] += static_cast<T>(acc);
                }
            }
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            const T* pa = a.data();
            for (std::size_t p = 0; p < k; ++p) {
                for (std::size_t j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < m; ++i) {
                        acc += static_cast<double>(pa[i * k + p]) * static_cast<double>(go[i * n + j]);
                    }
                    gb[p * n + j] += static_cast<T>(acc);
                }
            }
        }
    });
    return out;
}

// a * b^T: [m x k] * [n x k] -> [m x n]. Used for the tied output head.
template <typename T>
Tensor<T> matmul_nt(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols()) {
        throw std::invalid_argument("matmul_nt: inner dimensions disagree");
    }
    detail::check_finite("matmul_nt.a", a);
    detail::check_finite("matmul_nt.b", b);
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor<T> out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = b.data() + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += static_cast<double>(arow[p]) * static_cast<double>(brow[p]);
            out.data()[i * n + j] = static_cast<T>(acc);
        }
    }
    detail::finish_op(g, "matmul_nt", {a, b}, out, [a, b, out]() mutable {
        const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
        const auto& go = out.grad();
        if (a.requires_grad()) {
            auto& ga = a.grad();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        acc += static_cast<double>(go[i * n + j]) * static_cast<double>(b.data()[j * k + p]);
                    }
                    ga[i * k + p] += static_cast<T>(acc);
                }
            }
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            for (std::size_t j = 0; j < n; ++j) {
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < m; ++i) {
                        acc += static_cast<double>(go[i * n + j]) * static_cast<double>(a.data()[i * k + p]);
                    }
                    gb[j * k + p] += static_cast<T>(acc);
                }
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> add(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("add: shape mismatch");
    detail::check_finite("add.a", a);
    detail::check_finite("add.b", b);
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    detail::finish_op(g, "add", {a, b}, out, [a, b, out]() mutable {
        const auto& go = out.grad();
        if (a.requires_grad()) {
            auto& ga = a.grad();
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
        }
    });
    return out;
}

// [m x n] + [n], the only broadcast the model needs.
template <typename T>
Tensor<T> add_row_bias(Graph<T>* g, const Tensor<T>& x, const Tensor<T>& bias) {
    if (x.ndim() != 2 || bias.ndim() != 1 || bias.dim(0) != x.cols()) {
        throw std::invalid_argument("add_row_bias: shape mismatch");
    }
    detail::check_finite("add_row_bias.x", x);
    const std::size_t m = x.rows(), n = x.cols();
    Tensor<T> out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out.data()[i * n + j] = x.data()[i * n + j] + bias.data()[j];
    }
    detail::finish_op(g, "add_row_bias", {x, bias}, out, [x, bias, out]() mutable {
        const std::size_t m = x.rows(), n = x.cols();
        const auto& go = out.grad();
        if (x.requires_grad()) {
            auto& gx = x.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
        }
        if (bias.requires_grad()) {
            auto& gb = bias.grad();
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t i = 0; i < m; ++i) acc += static_cast<double>(go[i * n + j]);
                gb[j] += static_cast<T>(acc);
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> scale(Graph<T>* g, const Tensor<T>& x, T factor) {
    detail::check_finite("scale.x", x);
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] * factor;
    detail::finish_op(g, "scale", {x}, out, [x, out, factor]() mutable {
        auto& gx = x.grad();
        const auto& go = out.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * factor;
    });
    return out;
}

namespace detail {
// tanh-approximation constants, kept in double and truncated once.
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluK = 0.044715;
}  // namespace detail

template <typename T>
Tensor<T> gelu(Graph<T>* g, const Tensor<T>& x) {
    detail::check_finite("gelu.x", x);
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = static_cast<double>(x.data()[i]);
        const double t = std::tanh(detail::kGeluC * (v + detail::kGeluK * v * v * v));
        out.data()[i] = static_cast<T>(0.5 * v * (1.0 + t));
    }
    detail::finish_op(g, "gelu", {x}, out, [x, out]() mutable {
        auto& gx = x.grad();
        const auto& go = out.grad();
        for (std::size_t i = 0; i < go.size(); ++i) {
            const double v = static_cast<double>(x.data()[i]);
            const double u = detail::kGeluC * (v + detail::kGeluK * v * v * v);
            const double t = std::tanh(u);
            const double du = detail::kGeluC * (1.0 + 3.0 * detail::kGeluK * v * v);
            const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
            gx[i] += static_cast<T>(static_cast<double>(go[i]) * d);
        }
    });
    return out;
}

inline constexpr double kRmsNormEps = 1e-5;

// Each trailing d-vector scaled to unit RMS, then multiplied by gain[d].
template <typename T>
Tensor<T> rms_norm(Graph<T>* g, const Tensor<T>& x, const Tensor<T>& gain) {
    if (x.ndim() == 0 || gain.ndim() != 1 || x.shape().back() != gain.dim(0)) {
        throw std::invalid_argument("rms_norm: gain width must match trailing dim");
    }
    detail::check_finite("rms_norm.x", x);
    const std::size_t d = gain.dim(0);
    const std::size_t rows = x.size() / d;
    Tensor<T> out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.data() + r * d;
        T* yr = out.data() + r * d;
        double ms = 0.0;
        for (std::size_t j = 0; j < d; ++j) ms += static_cast<double>(xr[j]) * static_cast<double>(xr[j]);
        const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + kRmsNormEps);
        for (std::size_t j = 0; j < d; ++j) {
            yr[j] = static_cast<T>(static_cast<double>(xr[j]) * inv * static_cast<double>(gain.data()[j]));
        }
    }
    detail::finish_op(g, "rms_norm", {x, gain}, out, [x, gain, out]() mutable {
        const std::size_t d = gain.dim(0);
        const std::size_t rows = x.size() / d;
        const auto& go = out.grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* xr = x.data() + r * d;
            const T* gor = go.data() + r * d;
            double ms = 0.0;
            for (std::size_t j = 0; j < d; ++j) ms += static_cast<double>(xr[j]) * static_cast<double>(xr[j]);
            const double rms2 = ms / static_cast<double>(d) + kRmsNormEps;
            const double inv = 1.0 / std::sqrt(rms2);
            if (x.requires_grad()) {
                double dot = 0.0;  // sum_i go_i * gain_i * x_i
                for (std::size_t j = 0; j < d; ++j) {
                    dot += static_cast<double>(gor[j]) * static_cast<double>(gain.data()[j]) *
                           static_cast<double>(xr[j]);
                }
                const double c = dot * inv * inv * inv / static_cast<double>(d);
                auto& gx = x.grad();
                for (std::size_t j = 0; j < d; ++j) {
                    const double dj = static_cast<double>(gor[j]) * static_cast<double>(gain.data()[j]) * inv -
                                      static_cast<double>(xr[j]) * c;
                    gx[r * d + j] += static_cast<T>(dj);
                }
            }
            if (gain.requires_grad()) {
                auto& gg = gain.grad();
                for (std::size_t j = 0; j < d; ++j) {
                    gg[j] += static_cast<T>(static_cast<double>(gor[j]) * static_cast<double>(xr[j]) * inv);
                }
            }
        }
    });
    return out;
}

// Row-wise softmax with max subtraction. Stable for |x| up to at least 1e4.
template <typename T>
Tensor<T> softmax_rows(Graph<T>* g, const Tensor<T>& x) {
    if (x.ndim() != 2) throw std::invalid_argument("softmax_rows: expects 2-d input");
    detail::check_finite("softmax_rows.x", x);
    const std::size_t m = x.rows(), n = x.cols();
    Tensor<T> out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const T* xr = x.data() + i * n;
        T* yr = out.data() + i * n;
        double mx = static_cast<double>(xr[0]);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, static_cast<double>(xr[j]));
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double e = std::exp(static_cast<double>(xr[j]) - mx);
            yr[j] = static_cast<T>(e);
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < n; ++j) yr[j] = static_cast<T>(static_cast<double>(yr[j]) * inv);
    }
    detail::finish_op(g, "softmax_rows", {x}, out, [x, out]() mutable {
        const std::size_t m = x.rows(), n = x.cols();
        auto& gx = x.grad();
        const auto& go = out.grad();
        for (std::size_t i = 0; i < m; ++i) {
            const T* pr = out.data() + i * n;
            const T* gr = go.data() + i * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(gr[j]) * static_cast<double>(pr[j]);
            for (std::size_t j = 0; j < n; ++j) {
                gx[i * n + j] += static_cast<T>(static_cast<double>(pr[j]) * (static_cast<double>(gr[j]) - dot));
            }
        }
    });
    return out;
}

// Gather rows of table by id: [V x d], ids[n] -> [n x d].
template <typename T>
Tensor<T> embedding(Graph<T>* g, const Tensor<T>& table, const std::vector<int>& ids) {
    if (table.ndim() != 2) throw std::invalid_argument("embedding: table must be 2-d");
    const std::size_t v = table.rows(), d = table.cols();
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= v) throw std::invalid_argument("embedding: id out of range");
    }
    Tensor<T> out({ids.size(), d});
    for (std::size_t t = 0; t < ids.size(); ++t) {
        const T* src = table.data() + static_cast<std::size_t>(ids[t]) * d;
        std::copy(src, src + d, out.data() + t * d);
    }
    detail::finish_op(g, "embedding", {table}, out, [table, out, ids]() mutable {
        const std::size_t d = table.cols();
        auto& gt = table.grad();
        const auto& go = out.grad();
        for (std::size_t t = 0; t < ids.size(); ++t) {
            T* dst = gt.data() + static_cast<std::size_t>(ids[t]) * d;
            const T* src = go.data() + t * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
    return out;
}

// [m1 x n] ++ [m2 x n] -> [(m1+m2) x n]
template <typename T>
Tensor<T> concat_rows(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols()) {
        throw std::invalid_argument("concat_rows: column mismatch");
    }
    const std::size_t n = a.cols();
    Tensor<T> out({a.rows() + b.rows(), n});
    std::copy(a.data(), a.data() + a.size(), out.data());
    std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
    detail::finish_op(g, "concat_rows", {a, b}, out, [a, b, out]() mutable {
        const auto& go = out.grad();
        if (a.requires_grad()) {
            auto& ga = a.grad();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            const std::size_t off = a.size();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[off + i];
        }
    });
    return out;
}

// Fused multi-head scaled-dot-product attention with a causal mask.
// q: [Tq x d], k/v: [Tk x d], Tk = Tq + offset; query row i attends to key
// rows j <= i + offset. offset is the cached-prefix length during
// incremental decoding and 0 for full-sequence training passes.
template <typename T>
Tensor<T> multihead_causal_attention(Graph<T>* g, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                     std::size_t n_heads, std::size_t offset) {
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2) {
        throw std::invalid_argument("attention: expects 2-d q/k/v");
    }
    const std::size_t tq = q.rows(), tk = k.rows(), d = q.cols();
    if (k.cols() != d || v.cols() != d || v.rows() != tk) throw std::invalid_argument("attention: shape mismatch");
    if (tk != tq + offset) throw std::invalid_argument("attention: key length must be query length + offset");
    if (n_heads == 0 || d % n_heads != 0) throw std::invalid_argument("attention: heads must divide width");
    detail::check_finite("attention.q", q);
    detail::check_finite("attention.k", k);
    detail::check_finite("attention.v", v);
    const std::size_t hd = d / n_heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(hd));

    // Probabilities are kept for the backward closure: [heads][tq x tk],
    // masked entries stay exactly zero.
    auto probs = std::make_shared<std::vector<std::vector<double>>>(n_heads, std::vector<double>(tq * tk, 0.0));
    Tensor<T> out({tq, d});
    for (std::size_t h = 0; h < n_heads; ++h) {
        auto& p = (*probs)[h];
        for (std::size_t i = 0; i < tq; ++i) {
            const std::size_t limit = i + offset;  // inclusive
            const T* qi = q.data() + i * d + h * hd;
            double mx = -1e300;
            // scores land in p first, then get normalized in place
            for (std::size_t j = 0; j <= limit; ++j) {
                const T* kj = k.data() + j * d + h * hd;
                double s = 0.0;
                for (std::size_t c = 0; c < hd; ++c) {
                    s += static_cast<double>(qi[c]) * static_cast<double>(kj[c]);
                }
                s *= sc;
                p[i * tk + j] = s;
                mx = std::max(mx, s);
            }
            double sum = 0.0;
            for (std::size_t j = 0; j <= limit; ++j) {
                const double e = std::exp(p[i * tk + j] - mx);
                p[i * tk + j] = e;
                sum += e;
            }
            const double inv = 1.0 / sum;
            T* oi = out.data() + i * d + h * hd;
            for (std::size_t c = 0; c < hd; ++c) oi[c] = T(0);
            for (std::size_t j = 0; j <= limit; ++j) {
                p[i * tk + j] *= inv;
                const double pij = p[i * tk + j];
                const T* vj = v.data() + j * d + h * hd;
                for (std::size_t c = 0; c < hd; ++c) {
                    oi[c] = static_cast<T>(static_cast<double>(oi[c]) + pij * static_cast<double>(vj[c]));
                }
            }
        }
    }
    detail::check_finite("attention.out", out);
    if (!detail::wants_grad(g, {q, k, v})) return out;
    out.set_requires_grad(true);
    g->record("attention", {q, k, v}, out, [q, k, v, out, probs, n_heads, offset, sc]() mutable {
        const std::size_t tq = q.rows(), tk = k.rows(), d = q.cols();
        const std::size_t hd = d / n_heads;
        const auto& go = out.grad();
        auto& gq = q.grad();
        auto& gk = k.grad();
        auto& gv = v.grad();
        for (std::size_t h = 0; h < n_heads; ++h) {
            const auto& p = (*probs)[h];
            for (std::size_t i = 0; i < tq; ++i) {
                const std::size_t limit = i + offset;
                const T* goi = go.data() + i * d + h * hd;
                // dP and the softmax reduction
                double dot = 0.0;
                std::vector<double> dp(limit + 1);
                for (std::size_t j = 0; j <= limit; ++j) {
                    const T* vj = v.data() + j * d + h * hd;
                    double acc = 0.0;
                    for (std::size_t c = 0; c < hd; ++c) {
                        acc += static_cast<double>(goi[c]) * static_cast<double>(vj[c]);
                    }
                    dp[j] = acc;
                    dot += acc * p[i * tk + j];
                }
                for (std::size_t j = 0; j <= limit; ++j) {
                    const double pij = p[i * tk + j];
                    const double ds = pij * (dp[j] - dot);  // dL/dS_ij (pre-scale)
                    const T* kj = k.data() + j * d + h * hd;
                    const T* qi = q.data() + i * d + h * hd;
                    for (std::size_t c = 0; c < hd; ++c) {
                        gq[i * d + h * hd + c] += static_cast<T>(ds * sc * static_cast<double>(kj[c]));
                        gk[j * d + h * hd + c] += static_cast<T>(ds * sc * static_cast<double>(qi[c]));
                        gv[j * d + h * hd + c] += static_cast<T>(pij * static_cast<double>(goi[c]));
                    }
                }
            }
        }
    });
    return out;
}

// Mean negative log-likelihood over unmasked positions.
// logits: [t x v]; targets/mask: length t; mask picks the positions whose
// target token contributes to the loss (response tokens only).
template <typename T>
Tensor<T> cross_entropy(Graph<T>* g, const Tensor<T>& logits, const std::vector<int>& targets,
                        const std::vector<std::uint8_t>& mask) {
    if (logits.ndim() != 2) throw std::invalid_argument("cross_entropy: logits must be 2-d");
    const std::size_t t = logits.rows(), v = logits.cols();
    if (targets.size() != t || mask.size() != t) throw std::invalid_argument("cross_entropy: length mismatch");
    detail::check_finite("cross_entropy.logits", logits);
    std::size_t n_active = 0;
    double total = 0.0;
    for (std::size_t i = 0; i < t; ++i) {
        if (!mask[i]) continue;
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
            throw std::invalid_argument("cross_entropy: target out of range");
        }
        const T* row = logits.data() + i * v;
        double mx = static_cast<double>(row[0]);
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double sum = 0.0;
        for (std::size_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
        const double lse = mx + std::log(sum);
        total += lse - static_cast<double>(row[static_cast<std::size_t>(targets[i])]);
        ++n_active;
    }
    if (n_active == 0) throw std::invalid_argument("cross_entropy: all positions masked");
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n_active)));
    detail::finish_op(g, "cross_entropy", {logits}, out, [logits, out, targets, mask, n_active]() mutable {
        const std::size_t t = logits.rows(), v = logits.cols();
        auto& gl = logits.grad();
        const double gr = static_cast<double>(out.grad()[0]) / static_cast<double>(n_active);
        for (std::size_t i = 0; i < t; ++i) {
            if (!mask[i]) continue;
            const T* row = logits.data() + i * v;
            double mx = static_cast<double>(row[0]);
            for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
            double sum = 0.0;
            for (std::size_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
            const double inv = 1.0 / sum;
            for (std::size_t j = 0; j < v; ++j) {
                const double p = std::exp(static_cast<double>(row[j]) - mx) * inv;
                const double delta = (static_cast<std::size_t>(targets[i]) == j) ? 1.0 : 0.0;
                gl[i * v + j] += static_cast<T>(gr * (p - delta));
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Gradient verification: central differences on a sampled coordinate subset.
// Run with T = double for tight tolerances.
// ---------------------------------------------------------------------------
template <typename T>
struct GradCheckReport {
    T max_rel_error = T(0);
    std::size_t coords_checked = 0;
};

template <typename T>
GradCheckReport<T> grad_check(const std::function<Tensor<T>(Graph<T>*)>& loss_fn, std::vector<Tensor<T>> params,
                              T eps, Rng& rng, std::size_t max_coords_per_param = 24) {
    if (!(eps > T(0))) throw std::invalid_argument("grad_check: eps must be positive");
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    Graph<T> graph;
    Tensor<T> loss = loss_fn(&graph);
    graph.backward(loss);

    GradCheckReport<T> report;
    for (auto& p : params) {
        const std::vector<T> analytic = p.grad();
        std::vector<std::size_t> coords;
        if (p.size() <= max_coords_per_param) {
            for (std::size_t i = 0; i < p.size(); ++i) coords.push_back(i);
        } else {
            for (std::size_t s = 0; s < max_coords_per_param; ++s) coords.push_back(rng.index(p.size()));
        }
        for (std::size_t c : coords) {
            const T saved = p.value()[c];
            p.value()[c] = saved + eps;
            const T up = loss_fn(nullptr).item();
            p.value()[c] = saved - eps;
            const T down = loss_fn(nullptr).item();
            p.value()[c] = saved;
            const T numeric = (up - down) / (T(2) * eps);
            const T a = analytic.empty() ? T(0) : analytic[c];
            const T denom = std::max({T(1), std::abs(a), std::abs(numeric)});
            report.max_rel_error = std::max(report.max_rel_error, std::abs(a - numeric) / denom);
            ++report.coords_checked;
        }
        p.zero_grad();
    }
    return report;
}

}  // namespace vift
