// SPDX-License-Identifier: Apache-2.0
//
// Dense 64-bit tensors with tape-based reverse-mode differentiation.
//
// Tensors are cheap handles over shared storage. Operations are plain value
// computations unless an input is attached to a Tape, in which case the op
// also records an adjoint rule. One backward sweep over the tape yields the
// gradients of a scalar loss with respect to every watched leaf.

#pragma once

#include <algorithm>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "dsmoe/common.hpp"

namespace dsmoe {

class Tape;

namespace detail {

struct TensorStorage {
    std::vector<int64_t> shape;
    std::vector<double> values;
    std::vector<double> grad;  // populated for watched leaves after a backward pass
    bool requires_grad = false;
    Tape* tape = nullptr;  // non-null while attached to a live tape
    int node = -1;
};

inline int64_t numel_of(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

}  // namespace detail

class Tensor {
public:
    Tensor() : s_(std::make_shared<detail::TensorStorage>()) {
        s_->shape = {0};
    }

    static Tensor zeros(std::vector<int64_t> shape) {
        return with_values(std::move(shape), {});
    }

    static Tensor full(std::vector<int64_t> shape, double v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.s_->values.begin(), t.s_->values.end(), v);
        return t;
    }

    static Tensor from(std::vector<int64_t> shape, std::vector<double> values) {
        for (int64_t d : shape) {
            require(d >= 0, ErrorKind::Dimension, "negative dimension in shape " + shape_string(shape));
        }
        int64_t n = detail::numel_of(shape);
        require(static_cast<size_t>(n) == values.size(), ErrorKind::Dimension,
                "shape " + shape_string(shape) + " expects " + std::to_string(n) + " values, got " +
                    std::to_string(values.size()));
        Tensor t;
        t.s_->shape = std::move(shape);
        t.s_->values = std::move(values);
        return t;
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    const std::vector<int64_t>& shape() const { return s_->shape; }
    int64_t dim(size_t i) const { return s_->shape.at(i); }
    size_t rank() const { return s_->shape.size(); }
    int64_t numel() const { return static_cast<int64_t>(s_->values.size()); }

    const std::vector<double>& values() const { return s_->values; }
    std::vector<double>& values() { return s_->values; }

    double item() const {
        require(numel() == 1, ErrorKind::Contract, "item() on tensor with " + std::to_string(numel()) + " elements");
        return s_->values[0];
    }

    double at(int64_t i) const { return s_->values.at(static_cast<size_t>(i)); }
    double at(int64_t i, int64_t j) const {
        require(rank() == 2, ErrorKind::Contract, "2-index access on rank-" + std::to_string(rank()) + " tensor");
        return s_->values[static_cast<size_t>(i * dim(1) + j)];
    }

    bool requires_grad() const { return s_->requires_grad; }
    bool has_grad() const { return !s_->grad.empty(); }
    const std::vector<double>& grad() const {
        require(has_grad(), ErrorKind::Contract, "gradient not populated; run a backward pass first");
        return s_->grad;
    }
    void clear_grad() { s_->grad.clear(); }

    // Deep copy, detached from any tape.
    Tensor clone() const {
        Tensor t;
        t.s_->shape = s_->shape;
        t.s_->values = s_->values;
        return t;
    }

    bool attached() const { return s_->tape != nullptr; }

    // A vector is rank 1, or rank 2 with a unit leading dimension.
    bool is_vector() const {
        return rank() == 1 || (rank() == 2 && dim(0) == 1);
    }

    std::shared_ptr<detail::TensorStorage> storage() const { return s_; }

private:
    static Tensor with_values(std::vector<int64_t> shape, std::vector<double>) {
        Tensor t;
        int64_t n = detail::numel_of(shape);
        t.s_->shape = std::move(shape);
        t.s_->values.assign(static_cast<size_t>(n), 0.0);
        return t;
    }

    std::shared_ptr<detail::TensorStorage> s_;
};

// Per-leaf gradients plus a reachability flag; a leaf the loss does not
// depend on gets an all-zero gradient and reached = false.
struct GradientResult {
    std::vector<Tensor> grads;
    std::vector<bool> reached;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    ~Tape() {
        for (auto& node : nodes_) {
            if (node.out && node.out->tape == this) {
                node.out->tape = nullptr;
                node.out->node = -1;
            }
        }
    }

    // Marks a tensor as a differentiable leaf of this tape.
    void watch(Tensor& t) {
        auto s = t.storage();
        require(s->tape == nullptr, ErrorKind::Contract, "tensor is already attached to a tape");
        s->requires_grad = true;
        attach(s);
    }

    // Extension point for ops: attaches `out` and registers its adjoint rule.
    // The rule receives the adjoint buffer of `out` and must accumulate into
    // the parents' buffers via grad_buffer(). Creation order is the
    // topological order used by the reverse sweep, so parents must already
    // be recorded (or be constants).
    void record(const Tensor& out, const std::vector<Tensor>&,
                std::function<void(Tape&, const double*)> backward) {
        attach(out.storage(), std::move(backward));
    }

    // Adjoint accumulation buffer for a tensor attached to this tape, or
    // nullptr for constants. Lazily allocated and zero-initialized.
    double* grad_buffer(const detail::TensorStorage* s) {
        if (s->tape != this || s->node < 0) return nullptr;
        auto& buf = adjoints_[static_cast<size_t>(s->node)];
        if (buf.empty()) buf.assign(s->values.size(), 0.0);
        return buf.data();
    }

    bool consumed() const { return consumed_; }
    size_t size() const { return nodes_.size(); }

    // Reverse sweep from a scalar loss. Populates grad on every watched leaf
    // and returns gradients for the requested ones. Single use per tape.
    GradientResult gradients(const Tensor& loss, const std::vector<Tensor>& wrt) {
        require(!consumed_, ErrorKind::Contract, "tape already consumed by a previous backward pass");
        require(loss.numel() == 1, ErrorKind::Contract,
                "loss must be scalar, got shape " + shape_string(loss.shape()));
        auto ls = loss.storage();
        require(ls->tape == this, ErrorKind::Contract, "loss is not recorded on this tape");
        consumed_ = true;

        adjoints_.assign(nodes_.size(), {});
        adjoints_[static_cast<size_t>(ls->node)] = {1.0};

        for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
            auto& buf = adjoints_[static_cast<size_t>(id)];
            if (buf.empty()) continue;
            auto& node = nodes_[static_cast<size_t>(id)];
            if (node.backward) node.backward(*this, buf.data());
        }

        // copy leaf adjoints into the leaves' grad fields
        for (auto& node : nodes_) {
            if (!node.out || !node.out->requires_grad) continue;
            auto& buf = adjoints_[static_cast<size_t>(node.out->node)];
            if (buf.empty()) {
                node.out->grad.assign(node.out->values.size(), 0.0);
            } else {
                node.out->grad = buf;
            }
        }

        GradientResult result;
        for (const auto& t : wrt) {
            auto s = t.storage();
            require(s->tape == this && s->requires_grad, ErrorKind::Contract,
                    "requested gradient for a tensor that is not a watched leaf of this tape");
            auto& buf = adjoints_[static_cast<size_t>(s->node)];
            bool reached = !buf.empty();
            Tensor g = Tensor::from(s->shape, reached ? buf : std::vector<double>(s->values.size(), 0.0));
            result.grads.push_back(std::move(g));
            result.reached.push_back(reached);
        }
        adjoints_.clear();
        return result;
    }

private:
    struct Node {
        std::shared_ptr<detail::TensorStorage> out;
        std::function<void(Tape&, const double*)> backward;
    };

    void attach(std::shared_ptr<detail::TensorStorage> s,
                std::function<void(Tape&, const double*)> backward = {}) {
        s->tape = this;
        s->node = static_cast<int>(nodes_.size());
        nodes_.push_back(Node{std::move(s), std::move(backward)});
    }

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> adjoints_;
    bool consumed_ = false;
};

namespace detail {

// Returns the tape shared by the inputs, or nullptr when all are constants.
inline Tape* tape_of(std::initializer_list<const Tensor*> tensors) {
    Tape* tape = nullptr;
    for (const Tensor* t : tensors) {
        Tape* tt = t->storage()->tape;
        if (!tt) continue;
        require(tape == nullptr || tape == tt, ErrorKind::Contract, "operation mixes tensors from different tapes");
        tape = tt;
    }
    return tape;
}

inline void check_finite(const Tensor& t, const char* op) {
    require(all_finite(t.values()), ErrorKind::Numeric, std::string(op) + " produced non-finite values");
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(), ErrorKind::Dimension,
            std::string(op) + ": shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

// Numerically stable softmax of a plain vector; the single implementation
// shared by the tensor op and the routing code so both produce identical
// bits.
inline std::vector<double> softmax_values(std::span<const double> logits) {
    require(!logits.empty(), ErrorKind::Domain, "softmax of empty vector");
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    require(std::isfinite(mx), ErrorKind::Numeric, "softmax over non-finite logits");
    std::vector<double> out(logits.size());
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out = Tensor::from(a.shape(), a.values());
    auto& ov = out.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] += bv[i];
    detail::check_finite(out, "add");
    if (Tape* tape = detail::tape_of({&a, &b})) {
        auto as = a.storage();
        auto bs = b.storage();
        tape->record(out, {a, b}, [as, bs](Tape& t, const double* g) {
            size_t n = as->values.size();
            if (double* ga = t.grad_buffer(as.get()))
                for (size_t i = 0; i < n; ++i) ga[i] += g[i];
            if (double* gb = t.grad_buffer(bs.get()))
                for (size_t i = 0; i < n; ++i) gb[i] += g[i];
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor out = Tensor::from(a.shape(), a.values());
    auto& ov = out.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] -= bv[i];
    detail::check_finite(out, "sub");
    if (Tape* tape = detail::tape_of({&a, &b})) {
        auto as = a.storage();
        auto bs = b.storage();
        tape->record(out, {a, b}, [as, bs](Tape& t, const double* g) {
            size_t n = as->values.size();
            if (double* ga = t.grad_buffer(as.get()))
                for (size_t i = 0; i < n; ++i) ga[i] += g[i];
            if (double* gb = t.grad_buffer(bs.get()))
                for (size_t i = 0; i < n; ++i) gb[i] -= g[i];
        });
    }
    return out;
}

// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor out = Tensor::from(a.shape(), a.values());
    auto& ov = out.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] *= bv[i];
    detail::check_finite(out, "mul");
    if (Tape* tape = detail::tape_of({&a, &b})) {
        auto as = a.storage();
        auto bs = b.storage();
        tape->record(out, {a, b}, [as, bs](Tape& t, const double* g) {
            size_t n = as->values.size();
            if (double* ga = t.grad_buffer(as.get()))
                for (size_t i = 0; i < n; ++i) ga[i] += g[i] * bs->values[i];
            if (double* gb = t.grad_buffer(bs.get()))
                for (size_t i = 0; i < n; ++i) gb[i] += g[i] * as->values[i];
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out = Tensor::from(a.shape(), a.values());
    for (double& v : out.values()) v *= c;
    detail::check_finite(out, "scale");
    if (Tape* tape = detail::tape_of({&a})) {
        auto as = a.storage();
        tape->record(out, {a}, [as, c](Tape& t, const double* g) {
            if (double* ga = t.grad_buffer(as.get()))
                for (size_t i = 0; i < as->values.size(); ++i) ga[i] += c * g[i];
        });
    }
    return out;
}

// Product of a 1-element tensor with an arbitrary tensor.
inline Tensor mul_scalar(const Tensor& s, const Tensor& a) {
    require(s.numel() == 1, ErrorKind::Dimension, "mul_scalar: first operand must have one element");
    double c = s.values()[0];
    Tensor out = Tensor::from(a.shape(), a.values());
    for (double& v : out.values()) v *= c;
    detail::check_finite(out, "mul_scalar");
    if (Tape* tape = detail::tape_of({&s, &a})) {
        auto ss = s.storage();
        auto as = a.storage();
        tape->record(out, {s, a}, [ss, as](Tape& t, const double* g) {
            if (double* gs = t.grad_buffer(ss.get())) {
                double acc = 0.0;
                for (size_t i = 0; i < as->values.size(); ++i) acc += g[i] * as->values[i];
                gs[0] += acc;
            }
            if (double* ga = t.grad_buffer(as.get())) {
                double c = ss->values[0];
                for (size_t i = 0; i < as->values.size(); ++i) ga[i] += c * g[i];
            }
        });
    }
    return out;
}

inline Tensor silu(const Tensor& a) {
    Tensor out = Tensor::from(a.shape(), a.values());
    for (double& v : out.values()) v = v / (1.0 + std::exp(-v));
    detail::check_finite(out, "silu");
    if (Tape* tape = detail::tape_of({&a})) {
        auto as = a.storage();
        tape->record(out, {a}, [as](Tape& t, const double* g) {
            if (double* ga = t.grad_buffer(as.get())) {
                for (size_t i = 0; i < as->values.size(); ++i) {
                    double x = as->values[i];
                    double sig = 1.0 / (1.0 + std::exp(-x));
                    ga[i] += g[i] * sig * (1.0 + x * (1.0 - sig));
                }
            }
        });
    }
    return out;
}

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    Tensor out = Tensor::scalar(acc);
    detail::check_finite(out, "sum");
    if (Tape* tape = detail::tape_of({&a})) {
        auto as = a.storage();
        tape->record(out, {a}, [as](Tape& t, const double* g) {
            if (double* ga = t.grad_buffer(as.get()))
                for (size_t i = 0; i < as->values.size(); ++i) ga[i] += g[0];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, ErrorKind::Dimension,
            "matmul expects rank-2 tensors, got " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
    require(a.dim(1) == b.dim(0), ErrorKind::Dimension,
            "matmul inner dimensions disagree: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    const double* av = a.values().data();
    const double* bv = b.values().data();
    double* ov = out.values().data();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            double aip = av[i * k + p];
            const double* brow = bv + p * n;
            double* orow = ov + i * n;
            for (int64_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    detail::check_finite(out, "matmul");
    if (Tape* tape = detail::tape_of({&a, &b})) {
        auto as = a.storage();
        auto bs = b.storage();
        tape->record(out, {a, b}, [as, bs, m, k, n](Tape& t, const double* g) {
            if (double* ga = t.grad_buffer(as.get())) {
                // dA = dC * B^T
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        const double* grow = g + i * n;
                        const double* brow = bs->values.data() + p * n;
                        for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[i * k + p] += acc;
                    }
            }
            if (double* gb = t.grad_buffer(bs.get())) {
                // dB = A^T * dC
                for (int64_t i = 0; i < m; ++i) {
                    const double* arow = as->values.data() + i * k;
                    const double* grow = g + i * n;
                    for (int64_t p = 0; p < k; ++p) {
                        double aip = arow[p];
                        double* gbrow = gb + p * n;
                        for (int64_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    require(a.rank() == 2, ErrorKind::Dimension, "transpose expects rank 2, got " + shape_string(a.shape()));
    int64_t m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({n, m});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out.values()[static_cast<size_t>(j * m + i)] = a.at(i, j);
    if (Tape* tape = detail::tape_of({&a})) {
        auto as = a.storage();
        tape->record(out, {a}, [as, m, n](Tape& t, const double* g) {
            if (double* ga = t.grad_buffer(as.get()))
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Row and index ops
// ---------------------------------------------------------------------------

// Rows [start, start+len) of a rank-2 tensor.
inline Tensor slice_rows(const Tensor& a, int64_t start, int64_t len) {
    require(a.rank() == 2, ErrorKind::Dimension, "slice_rows expects rank 2, got " + shape_string(a.shape()));
    require(start >= 0 && len >= 0 && start + len <= a.dim(0), ErrorKind::Index,
            "slice_rows [" + std::to_string(start) + ", " + std::to_string(start + len) + ") out of range for " +
                shape_string(a.shape()));
    int64_t n = a.dim(1);
    std::vector<double> vals(a.values().begin() + start * n, a.values().begin() + (start + len) * n);
    Tensor out = Tensor::from({len, n}, std::move(vals));
    if (Tape* tape = detail::tape_of({&a})) {
        auto as = a.storage();
        tape->record(out, {a}, [as, start, len, n](Tape& t, const double* g) {
            if (double* ga = t.grad_buffer(as.get()))
                for (int64_t i = 0; i < len * n; ++i) ga[start * n + i] += g[i];
        });
    }
    return out;
}

inline Tensor row(const Tensor& a, int64_t i) { return slice_rows(a, i, 1); }

// Stacks 1xN rows into an MxN matrix.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
    require(!rows.empty(), ErrorKind::Dimension, "stack_rows of empty list");
    int64_t n = rows[0].numel();
    std::vector<double> vals;
    vals.reserve(static_cast<size_t>(n) * rows.size());
    for (const auto& r : rows) {
        require(r.numel() == n, ErrorKind::Dimension, "stack_rows: inconsistent row lengths");
        vals.insert(vals.end(), r.values().begin(), r.values().end());
    }
    Tensor out = Tensor::from({static_cast<int64_t>(rows.size()), n}, std::move(vals));
    std::vector<const Tensor*> ptrs;
    Tape* tape = nullptr;
    for (const auto& r : rows) {
        Tape* tt = r.storage()->tape;
        if (tt) {
            require(tape == nullptr || tape == tt, ErrorKind::Contract, "stack_rows mixes tapes");
            tape = tt;
        }
    }
    if (tape) {
        std::vector<std::shared_ptr<detail::TensorStorage>> parents;
        parents.reserve(rows.size());
        for (const auto& r : rows) parents.push_back(r.storage());
        tape->record(out, rows, [parents, n](Tape& t, const double* g) {
            for (size_t r = 0; r < parents.size(); ++r) {
                if (double* gp = t.grad_buffer(parents[r].get()))
                    for (int64_t j = 0; j < n; ++j) gp[j] += g[static_cast<int64_t>(r) * n + j];
            }
        });
    }
    return out;
}

// Gathers rows of `table` by index; duplicate ids accumulate gradient into
// the same row.
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
    require(table.rank() == 2, ErrorKind::Dimension, "gather_rows expects rank 2, got " + shape_string(table.shape()));
    int64_t rows_n = table.dim(0), d = table.dim(1);
    std::vector<double> vals;
    vals.reserve(ids.size() * static_cast<size_t>(d));
    for (int id : ids) {
        require(id >= 0 && id < rows_n, ErrorKind::Index,
                "gather_rows: id " + std::to_string(id) + " out of range [0, " + std::to_string(rows_n) + ")");
        vals.insert(vals.end(), table.values().begin() + id * d, table.values().begin() + (id + 1) * d);
    }
    Tensor out = Tensor::from({static_cast<int64_t>(ids.size()), d}, std::move(vals));
    if (Tape* tape = detail::tape_of({&table})) {
        auto ts = table.storage();
        tape->record(out, {table}, [ts, ids, d](Tape& t, const double* g) {
            if (double* gt = t.grad_buffer(ts.get())) {
                for (size_t r = 0; r < ids.size(); ++r) {
                    double* dst = gt + static_cast<int64_t>(ids[r]) * d;
                    const double* src = g + static_cast<int64_t>(r) * d;
                    for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                }
            }
        });
    }
    return out;
}

// Picks elements of a vector by index, preserving vector rank.
inline Tensor select(const Tensor& v, const std::vector<int>& indices) {
    require(v.is_vector(), ErrorKind::Dimension, "select expects a vector, got " + shape_string(v.shape()));
    int64_t n = v.numel();
    std::vector<double> vals;
    vals.reserve(indices.size());
    for (int i : indices) {
        require(i >= 0 && i < n, ErrorKind::Index,
                "select: index " + std::to_string(i) + " out of range [0, " + std::to_string(n) + ")");
        vals.push_back(v.values()[static_cast<size_t>(i)]);
    }
    std::vector<int64_t> shape = v.rank() == 1 ? std::vector<int64_t>{static_cast<int64_t>(indices.size())}
                                               : std::vector<int64_t>{1, static_cast<int64_t>(indices.size())};
    Tensor out = Tensor::from(std::move(shape), std::move(vals));
    if (Tape* tape = detail::tape_of({&v})) {
        auto vs = v.storage();
        tape->record(out, {v}, [vs, indices](Tape& t, const double* g) {
            if (double* gv = t.grad_buffer(vs.get()))
                for (size_t j = 0; j < indices.size(); ++j) gv[indices[j]] += g[j];
        });
    }
    return out;
}

inline Tensor element(const Tensor& v, int i) { return select(v, {i}); }

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

// Softmax over a vector (max-subtracted for stability).
inline Tensor softmax(const Tensor& logits) {
    require(logits.is_vector(), ErrorKind::Dimension, "softmax expects a vector, got " + shape_string(logits.shape()));
    require(logits.numel() >= 1, ErrorKind::Domain, "softmax of empty vector");
    std::vector<double> out_vals = detail::softmax_values(std::span<const double>(logits.values()));
    Tensor out = Tensor::from(logits.shape(), std::move(out_vals));
    if (Tape* tape = detail::tape_of({&logits})) {
        auto ls = logits.storage();
        auto os = out.storage();
        tape->record(out, {logits}, [ls, os](Tape& t, const double* g) {
            if (double* gl = t.grad_buffer(ls.get())) {
                const auto& y = os->values;
                double dot = 0.0;
                for (size_t i = 0; i < y.size(); ++i) dot += g[i] * y[i];
                for (size_t i = 0; i < y.size(); ++i) gl[i] += y[i] * (g[i] - dot);
            }
        });
    }
    return out;
}

// Row-wise softmax of a TxT score matrix restricted to the causal support
// j <= i; entries above the diagonal are exactly zero.
inline Tensor causal_row_softmax(const Tensor& scores) {
    require(scores.rank() == 2 && scores.dim(0) == scores.dim(1), ErrorKind::Dimension,
            "causal_row_softmax expects a square matrix, got " + shape_string(scores.shape()));
    int64_t n = scores.dim(0);
    Tensor out = Tensor::zeros({n, n});
    for (int64_t i = 0; i < n; ++i) {
        std::span<const double> rowv(scores.values().data() + i * n, static_cast<size_t>(i + 1));
        std::vector<double> p = detail::softmax_values(rowv);
        std::copy(p.begin(), p.end(), out.values().begin() + i * n);
    }
    if (Tape* tape = detail::tape_of({&scores})) {
        auto ss = scores.storage();
        auto os = out.storage();
        tape->record(out, {scores}, [ss, os, n](Tape& t, const double* g) {
            if (double* gs = t.grad_buffer(ss.get())) {
                for (int64_t i = 0; i < n; ++i) {
                    const double* y = os->values.data() + i * n;
                    const double* gr = g + i * n;
                    double dot = 0.0;
                    for (int64_t j = 0; j <= i; ++j) dot += gr[j] * y[j];
                    for (int64_t j = 0; j <= i; ++j) gs[i * n + j] += y[j] * (gr[j] - dot);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// RMS normalization: y_t = gain * x_t / sqrt(mean(x_t^2) + eps), per row.
// ---------------------------------------------------------------------------

inline Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6) {
    require(x.rank() == 2, ErrorKind::Dimension, "rms_norm expects rank 2, got " + shape_string(x.shape()));
    require(gain.numel() == x.dim(1), ErrorKind::Dimension,
            "rms_norm gain length " + std::to_string(gain.numel()) + " does not match feature dim " +
                std::to_string(x.dim(1)));
    int64_t rows_n = x.dim(0), d = x.dim(1);
    Tensor out = Tensor::zeros({rows_n, d});
    std::vector<double> inv_rms(static_cast<size_t>(rows_n));
    for (int64_t i = 0; i < rows_n; ++i) {
        const double* xr = x.values().data() + i * d;
        double ms = 0.0;
        for (int64_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
        ms = ms / static_cast<double>(d) + eps;
        double ir = 1.0 / std::sqrt(ms);
        inv_rms[static_cast<size_t>(i)] = ir;
        double* orow = out.values().data() + i * d;
        for (int64_t j = 0; j < d; ++j) orow[j] = gain.values()[static_cast<size_t>(j)] * xr[j] * ir;
    }
    detail::check_finite(out, "rms_norm");
    if (Tape* tape = detail::tape_of({&x, &gain})) {
        auto xs = x.storage();
        auto gs = gain.storage();
        tape->record(out, {x, gain}, [xs, gs, inv_rms, rows_n, d](Tape& t, const double* g) {
            double* gx = t.grad_buffer(xs.get());
            double* gg = t.grad_buffer(gs.get());
            for (int64_t i = 0; i < rows_n; ++i) {
                const double* xr = xs->values.data() + i * d;
                const double* gr = g + i * d;
                double ir = inv_rms[static_cast<size_t>(i)];
                if (gx) {
                    double dot = 0.0;  // sum_j g_j * gain_j * x_j
                    for (int64_t j = 0; j < d; ++j) dot += gr[j] * gs->values[static_cast<size_t>(j)] * xr[j];
                    double c = dot * ir * ir * ir / static_cast<double>(d);
                    for (int64_t j = 0; j < d; ++j)
                        gx[i * d + j] += gr[j] * gs->values[static_cast<size_t>(j)] * ir - c * xr[j];
                }
                if (gg) {
                    for (int64_t j = 0; j < d; ++j) gg[j] += gr[j] * xr[j] * ir;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cross entropy
// ---------------------------------------------------------------------------

// Mean of -log softmax(logits_t)[target_t] over positions with include[t]
// set. Fused forward/backward via log-sum-exp.
inline Tensor cross_entropy_masked(const Tensor& logits, const std::vector<int>& targets,
                                   const std::vector<bool>& include) {
    require(logits.rank() == 2, ErrorKind::Dimension,
            "cross_entropy expects rank-2 logits, got " + shape_string(logits.shape()));
    int64_t rows_n = logits.dim(0), v = logits.dim(1);
    require(targets.size() == static_cast<size_t>(rows_n), ErrorKind::Dimension,
            "cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows_n) + " rows");
    require(include.size() == static_cast<size_t>(rows_n), ErrorKind::Dimension,
            "cross_entropy: mask length mismatch");
    int64_t m = 0;
    for (bool b : include) m += b ? 1 : 0;
    require(m > 0, ErrorKind::Domain, "cross_entropy: no positions included by mask");

    double total = 0.0;
    for (int64_t t = 0; t < rows_n; ++t) {
        if (!include[static_cast<size_t>(t)]) continue;
        int y = targets[static_cast<size_t>(t)];
        require(y >= 0 && y < v, ErrorKind::Index,
                "cross_entropy: target " + std::to_string(y) + " out of range [0, " + std::to_string(v) + ")");
        const double* rowv = logits.values().data() + t * v;
        double mx = rowv[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, rowv[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < v; ++j) sum += std::exp(rowv[j] - mx);
        total += std::log(sum) - (rowv[y] - mx);
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(m));
    detail::check_finite(out, "cross_entropy");
    if (Tape* tape = detail::tape_of({&logits})) {
        auto ls = logits.storage();
        tape->record(out, {logits}, [ls, targets, include, rows_n, v, m](Tape& t, const double* g) {
            if (double* gl = t.grad_buffer(ls.get())) {
                double scale_g = g[0] / static_cast<double>(m);
                for (int64_t r = 0; r < rows_n; ++r) {
                    if (!include[static_cast<size_t>(r)]) continue;
                    const double* rowv = ls->values.data() + r * v;
                    std::vector<double> p = detail::softmax_values(std::span<const double>(rowv, static_cast<size_t>(v)));
                    double* grow = gl + r * v;
                    for (int64_t j = 0; j < v; ++j) grow[j] += scale_g * p[static_cast<size_t>(j)];
                    grow[targets[static_cast<size_t>(r)]] -= scale_g;
                }
            }
        });
    }
    return out;
}

inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    return cross_entropy_masked(logits, targets, std::vector<bool>(targets.size(), true));
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// Max over coordinates of |analytic - central difference| / (|central| + 1e-12).
// `f` must build a scalar loss from its input on the provided tape.
inline double grad_check(const std::function<Tensor(Tape&, Tensor&)>& f, const Tensor& x, double h = 1e-5) {
    Tensor probe = x.clone();
    Tape tape;
    tape.watch(probe);
    Tensor loss = f(tape, probe);
    require(loss.numel() == 1, ErrorKind::Contract, "grad_check: f must be scalar-valued");
    require(std::isfinite(loss.item()), ErrorKind::Numeric, "grad_check: f(x) is not finite");
    GradientResult res = tape.gradients(loss, {probe});
    const auto& analytic = res.grads[0].values();

    auto eval = [&](const Tensor& point) {
        Tensor p = point.clone();
        Tape scratch;
        scratch.watch(p);
        double v = f(scratch, p).item();
        require(std::isfinite(v), ErrorKind::Numeric, "grad_check: f evaluated to a non-finite value");
        return v;
    };

    double worst = 0.0;
    for (size_t i = 0; i < x.values().size(); ++i) {
        Tensor hi = x.clone();
        Tensor lo = x.clone();
        hi.values()[i] += h;
        lo.values()[i] -= h;
        double central = (eval(hi) - eval(lo)) / (2.0 * h);
        double err = std::abs(analytic[i] - central) / (std::abs(central) + 1e-12);
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace dsmoe
