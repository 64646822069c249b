#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "error.hpp"
#include "matrix.hpp"
#include "special.hpp"

namespace sphenic {

using NodeId = std::int32_t;

enum class Op : std::uint8_t {
    Input,
    Add,
    Sub,
    Mul,
    Neg,
    Scale,
    AddScalar,
    MatMul,
    Transpose,
    Relu,
    Exp,
    Log,
    Sigmoid,
    LGamma,
    Clamp,
    SumAll,
    MeanAll,
    AddRowVec,
    MulColVec,
    RowDot,
    RowL2Normalize,
    SoftmaxRows,
    LogSumExpRows,
    LogAddExp,
    ConvMaxPool,
    HStack,
    VStackRows,
    SliceCols,
    Reshape,
};

struct TapeNode {
    Op op = Op::Input;
    std::vector<NodeId> inputs;
    DenseMatrix value;
    DenseMatrix grad; // allocated lazily during backward
    bool needs_grad = false;
    std::vector<std::int64_t> iaux; // op-specific integers (strides, offsets, argmax cells)
    std::vector<double> daux;       // op-specific doubles (scalars, bounds, cached norms)
};

// Reverse-mode tape. Nodes are appended in construction order, which is a
// topological order of the DAG, so backward is a single reverse sweep.
// One tape per training session; it is not shareable across threads.
class Tape {
public:
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    const DenseMatrix& value(NodeId id) const { return at(id).value; }

    DenseMatrix grad_copy(NodeId id) const {
        const TapeNode& n = at(id);
        if (n.grad.empty()) return DenseMatrix(n.value.rows(), n.value.cols());
        return n.grad;
    }

    NodeId input(DenseMatrix m, bool requires_grad) {
        TapeNode n;
        n.op = Op::Input;
        n.value = std::move(m);
        n.needs_grad = requires_grad;
        return push(std::move(n));
    }

    NodeId constant(DenseMatrix m) { return input(std::move(m), false); }

    NodeId add(NodeId a, NodeId b) {
        check_same_shape(value(a), value(b), "add");
        DenseMatrix out = value(a);
        const auto& bv = value(b).data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
        return push(make(Op::Add, {a, b}, std::move(out)));
    }

    NodeId sub(NodeId a, NodeId b) {
        check_same_shape(value(a), value(b), "sub");
        DenseMatrix out = value(a);
        const auto& bv = value(b).data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
        return push(make(Op::Sub, {a, b}, std::move(out)));
    }

    NodeId mul(NodeId a, NodeId b) {
        check_same_shape(value(a), value(b), "mul");
        DenseMatrix out = value(a);
        const auto& bv = value(b).data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
        return push(make(Op::Mul, {a, b}, std::move(out)));
    }

    NodeId neg(NodeId a) {
        DenseMatrix out = value(a);
        for (auto& v : out.data()) v = -v;
        return push(make(Op::Neg, {a}, std::move(out)));
    }

    NodeId scale(NodeId a, double c) {
        DenseMatrix out = value(a);
        for (auto& v : out.data()) v *= c;
        TapeNode n = make(Op::Scale, {a}, std::move(out));
        n.daux = {c};
        return push(std::move(n));
    }

    NodeId add_scalar(NodeId a, double c) {
        DenseMatrix out = value(a);
        for (auto& v : out.data()) v += c;
        return push(make(Op::AddScalar, {a}, std::move(out)));
    }

    NodeId matmul(NodeId a, NodeId b) {
        return push(make(Op::MatMul, {a, b}, sphenic::matmul(value(a), value(b))));
    }

    NodeId transpose(NodeId a) {
        return push(make(Op::Transpose, {a}, sphenic::transpose(value(a))));
    }

    NodeId relu(NodeId a) {
        DenseMatrix out = value(a);
        for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
        return push(make(Op::Relu, {a}, std::move(out)));
    }

    NodeId exp(NodeId a) {
        DenseMatrix out = value(a);
        for (auto& v : out.data()) v = std::exp(v);
        return push(make(Op::Exp, {a}, std::move(out)));
    }

    NodeId log(NodeId a) {
        DenseMatrix out = value(a);
        for (auto& v : out.data()) {
            if (!(v > 0.0)) throw DomainError("log: nonpositive entry");
            v = std::log(v);
        }
        return push(make(Op::Log, {a}, std::move(out)));
    }

    NodeId sigmoid(NodeId a) {
        DenseMatrix out = value(a);
        for (auto& v : out.data()) v = sphenic::sigmoid(v);
        return push(make(Op::Sigmoid, {a}, std::move(out)));
    }

    NodeId lgamma(NodeId a) {
        DenseMatrix out = value(a);
        for (auto& v : out.data()) v = log_gamma(v);
        return push(make(Op::LGamma, {a}, std::move(out)));
    }

    NodeId clamp(NodeId a, double lo, double hi) {
        if (!(lo < hi)) throw DomainError("clamp: lo must be below hi");
        DenseMatrix out = value(a);
        for (auto& v : out.data()) v = v < lo ? lo : (v > hi ? hi : v);
        TapeNode n = make(Op::Clamp, {a}, std::move(out));
        n.daux = {lo, hi};
        return push(std::move(n));
    }

    NodeId sum_all(NodeId a) {
        double s = 0.0;
        for (double v : value(a).data()) s += v;
        DenseMatrix out(1, 1);
        out(0, 0) = s;
        return push(make(Op::SumAll, {a}, std::move(out)));
    }

    NodeId mean_all(NodeId a) {
        if (value(a).size() == 0) throw DimensionError("mean_all: empty input");
        double s = 0.0;
        for (double v : value(a).data()) s += v;
        DenseMatrix out(1, 1);
        out(0, 0) = s / static_cast<double>(value(a).size());
        return push(make(Op::MeanAll, {a}, std::move(out)));
    }

    // a: n x d, r: 1 x d, broadcast over rows.
    NodeId add_rowvec(NodeId a, NodeId r) {
        const DenseMatrix& av = value(a);
        const DenseMatrix& rv = value(r);
        if (rv.rows() != 1 || rv.cols() != av.cols())
            throw DimensionError("add_rowvec: " + av.shape_str() + " vs " + rv.shape_str());
        DenseMatrix out = av;
        for (std::size_t i = 0; i < av.rows(); ++i)
            for (std::size_t j = 0; j < av.cols(); ++j) out(i, j) += rv(0, j);
        return push(make(Op::AddRowVec, {a, r}, std::move(out)));
    }

    // a: n x d, c: n x 1, scales each row by the column entry.
    NodeId mul_colvec(NodeId a, NodeId c) {
        const DenseMatrix& av = value(a);
        const DenseMatrix& cv = value(c);
        if (cv.cols() != 1 || cv.rows() != av.rows())
            throw DimensionError("mul_colvec: " + av.shape_str() + " vs " + cv.shape_str());
        DenseMatrix out = av;
        for (std::size_t i = 0; i < av.rows(); ++i)
            for (std::size_t j = 0; j < av.cols(); ++j) out(i, j) *= cv(i, 0);
        return push(make(Op::MulColVec, {a, c}, std::move(out)));
    }

    // Row-wise dot product of equally shaped matrices; output n x 1.
    NodeId row_dot(NodeId a, NodeId b) {
        check_same_shape(value(a), value(b), "row_dot");
        const DenseMatrix& av = value(a);
        const DenseMatrix& bv = value(b);
        DenseMatrix out(av.rows(), 1);
        for (std::size_t i = 0; i < av.rows(); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < av.cols(); ++j) s += av(i, j) * bv(i, j);
            out(i, 0) = s;
        }
        return push(make(Op::RowDot, {a, b}, std::move(out)));
    }

    // Rows scaled to unit L2 norm; all-zero rows stay zero.
    NodeId row_l2_normalize(NodeId a) {
        const DenseMatrix& av = value(a);
        DenseMatrix out = av;
        TapeNode n;
        n.daux.resize(av.rows());
        for (std::size_t i = 0; i < av.rows(); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < av.cols(); ++j) s += av(i, j) * av(i, j);
            const double norm = std::sqrt(s);
            n.daux[i] = norm;
            if (norm > 0.0)
                for (std::size_t j = 0; j < av.cols(); ++j) out(i, j) /= norm;
        }
        n.op = Op::RowL2Normalize;
        n.inputs = {a};
        n.value = std::move(out);
        return push(std::move(n));
    }

    NodeId softmax_rows(NodeId a) {
        return push(make(Op::SoftmaxRows, {a}, sphenic::softmax_rows(value(a))));
    }

    // Stable log(sum_j exp(x_ij)); output n x 1.
    NodeId log_sum_exp_rows(NodeId a) {
        const DenseMatrix& av = value(a);
        if (av.cols() == 0) throw DimensionError("log_sum_exp_rows: empty rows");
        DenseMatrix out(av.rows(), 1);
        for (std::size_t i = 0; i < av.rows(); ++i) {
            double mx = av(i, 0);
            for (std::size_t j = 1; j < av.cols(); ++j) mx = std::max(mx, av(i, j));
            double s = 0.0;
            for (std::size_t j = 0; j < av.cols(); ++j) s += std::exp(av(i, j) - mx);
            out(i, 0) = mx + std::log(s);
        }
        return push(make(Op::LogSumExpRows, {a}, std::move(out)));
    }

    // Elementwise stable log(exp(a) + exp(b)).
    NodeId log_add_exp(NodeId a, NodeId b) {
        check_same_shape(value(a), value(b), "log_add_exp");
        const auto& av = value(a).data();
        const auto& bv = value(b).data();
        DenseMatrix out(value(a).rows(), value(a).cols());
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double mx = std::max(av[i], bv[i]);
            out[i] = mx + std::log1p(std::exp(std::min(av[i], bv[i]) - mx));
        }
        return push(make(Op::LogAddExp, {a, b}, std::move(out)));
    }

    // Single-kernel convolution, bias, ReLU, then non-overlapping max pool.
    // Ragged pooling edges are truncated. bias is a 1 x 1 node.
    NodeId conv2d_maxpool(NodeId img, NodeId kernel, NodeId bias, int stride, int pool) {
        const DenseMatrix& iv = value(img);
        const DenseMatrix& kv = value(kernel);
        const DenseMatrix& bv = value(bias);
        if (kv.rows() != kv.cols() || kv.rows() == 0)
            throw DimensionError("conv2d_maxpool: kernel must be square, got " + kv.shape_str());
        if (bv.rows() != 1 || bv.cols() != 1)
            throw DimensionError("conv2d_maxpool: bias must be 1x1, got " + bv.shape_str());
        if (stride < 1 || pool < 1) throw DomainError("conv2d_maxpool: stride and pool must be >= 1");
        const std::int64_t k = static_cast<std::int64_t>(kv.rows());
        const std::int64_t H = static_cast<std::int64_t>(iv.rows());
        const std::int64_t W = static_cast<std::int64_t>(iv.cols());
        if (H < k || W < k)
            throw DimensionError("conv2d_maxpool: image " + iv.shape_str() + " smaller than kernel " + kv.shape_str());
        const std::int64_t ch = (H - k) / stride + 1;
        const std::int64_t cw = (W - k) / stride + 1;
        const std::int64_t oh = ch / pool;
        const std::int64_t ow = cw / pool;
        if (oh == 0 || ow == 0)
            throw DimensionError("conv2d_maxpool: pool window exceeds conv output " +
                                 std::to_string(ch) + "x" + std::to_string(cw));
        DenseMatrix conv(static_cast<std::size_t>(ch), static_cast<std::size_t>(cw));
        for (std::int64_t ci = 0; ci < ch; ++ci)
            for (std::int64_t cj = 0; cj < cw; ++cj) {
                double s = bv(0, 0);
                for (std::int64_t m = 0; m < k; ++m)
                    for (std::int64_t n2 = 0; n2 < k; ++n2)
                        s += kv(m, n2) * iv(ci * stride + m, cj * stride + n2);
                conv(ci, cj) = s > 0.0 ? s : 0.0; // ReLU
            }
        TapeNode n;
        n.op = Op::ConvMaxPool;
        n.inputs = {img, kernel, bias};
        n.iaux = {stride, pool, k, ch, cw, oh, ow};
        DenseMatrix out(static_cast<std::size_t>(oh), static_cast<std::size_t>(ow));
        for (std::int64_t pi = 0; pi < oh; ++pi)
            for (std::int64_t pj = 0; pj < ow; ++pj) {
                double best = -1.0;
                std::int64_t bi = -1, bj = -1;
                for (std::int64_t di = 0; di < pool; ++di)
                    for (std::int64_t dj = 0; dj < pool; ++dj) {
                        const std::int64_t ci = pi * pool + di;
                        const std::int64_t cj = pj * pool + dj;
                        if (conv(ci, cj) > best) {
                            best = conv(ci, cj);
                            bi = ci;
                            bj = cj;
                        }
                    }
                out(pi, pj) = best;
                n.iaux.push_back(bi);
                n.iaux.push_back(bj);
            }
        n.value = std::move(out);
        return push(std::move(n));
    }

    NodeId hstack(const std::vector<NodeId>& parts) {
        if (parts.empty()) throw DimensionError("hstack: no inputs");
        const std::size_t rows = value(parts[0]).rows();
        std::size_t cols = 0;
        for (NodeId p : parts) {
            if (value(p).rows() != rows)
                throw DimensionError("hstack: row mismatch " + value(p).shape_str());
            cols += value(p).cols();
        }
        DenseMatrix out(rows, cols);
        TapeNode n;
        std::size_t off = 0;
        for (NodeId p : parts) {
            const DenseMatrix& pv = value(p);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < pv.cols(); ++j) out(i, off + j) = pv(i, j);
            n.iaux.push_back(static_cast<std::int64_t>(off));
            off += pv.cols();
        }
        n.op = Op::HStack;
        n.inputs = parts;
        n.value = std::move(out);
        return push(std::move(n));
    }

    NodeId vstack_rows(const std::vector<NodeId>& parts) {
        if (parts.empty()) throw DimensionError("vstack_rows: no inputs");
        const std::size_t cols = value(parts[0]).cols();
        std::size_t rows = 0;
        for (NodeId p : parts) {
            if (value(p).cols() != cols)
                throw DimensionError("vstack_rows: column mismatch " + value(p).shape_str());
            rows += value(p).rows();
        }
        DenseMatrix out(rows, cols);
        TapeNode n;
        std::size_t off = 0;
        for (NodeId p : parts) {
            const DenseMatrix& pv = value(p);
            for (std::size_t i = 0; i < pv.rows(); ++i)
                for (std::size_t j = 0; j < cols; ++j) out(off + i, j) = pv(i, j);
            n.iaux.push_back(static_cast<std::int64_t>(off));
            off += pv.rows();
        }
        n.op = Op::VStackRows;
        n.inputs = parts;
        n.value = std::move(out);
        return push(std::move(n));
    }

    NodeId slice_cols(NodeId a, std::size_t c0, std::size_t c1) {
        const DenseMatrix& av = value(a);
        if (c0 >= c1 || c1 > av.cols())
            throw DimensionError("slice_cols: bad range on " + av.shape_str());
        DenseMatrix out(av.rows(), c1 - c0);
        for (std::size_t i = 0; i < av.rows(); ++i)
            for (std::size_t j = c0; j < c1; ++j) out(i, j - c0) = av(i, j);
        TapeNode n = make(Op::SliceCols, {a}, std::move(out));
        n.iaux = {static_cast<std::int64_t>(c0), static_cast<std::int64_t>(c1)};
        return push(std::move(n));
    }

    NodeId reshape(NodeId a, std::size_t r, std::size_t c) {
        const DenseMatrix& av = value(a);
        if (r * c != av.size())
            throw DimensionError("reshape: size mismatch " + av.shape_str() + " -> " +
                                 std::to_string(r) + "x" + std::to_string(c));
        DenseMatrix out(r, c);
        out.data() = av.data();
        return push(make(Op::Reshape, {a}, std::move(out)));
    }

    // Seeds d(loss)/d(loss) = 1 and sweeps the tape once in reverse.
    void backward(NodeId loss) {
        TapeNode& ln = at(loss);
        if (ln.value.rows() != 1 || ln.value.cols() != 1)
            throw DimensionError("backward: loss must be 1x1, got " + ln.value.shape_str());
        if (!ln.needs_grad) return;
        grad_buf(loss)(0, 0) += 1.0;
        for (NodeId id = static_cast<NodeId>(nodes_.size()) - 1; id >= 0; --id) {
            TapeNode& n = nodes_[id];
            if (!n.needs_grad || n.grad.empty()) continue;
            backward_node(id, n);
        }
    }

private:
    std::vector<TapeNode> nodes_;

    TapeNode& at(NodeId id) {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
            throw ModelError("tape: bad node id " + std::to_string(id));
        return nodes_[static_cast<std::size_t>(id)];
    }
    const TapeNode& at(NodeId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
            throw ModelError("tape: bad node id " + std::to_string(id));
        return nodes_[static_cast<std::size_t>(id)];
    }

    TapeNode make(Op op, std::vector<NodeId> inputs, DenseMatrix value) {
        TapeNode n;
        n.op = op;
        n.inputs = std::move(inputs);
        n.value = std::move(value);
        return n;
    }

    NodeId push(TapeNode n) {
        if (n.op != Op::Input)
            for (NodeId in : n.inputs) n.needs_grad = n.needs_grad || at(in).needs_grad;
        if (!n.value.all_finite())
            throw DomainError("tape: non-finite value produced by op " +
                              std::to_string(static_cast<int>(n.op)));
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size()) - 1;
    }

    DenseMatrix& grad_buf(NodeId id) {
        TapeNode& n = at(id);
        if (n.grad.empty()) n.grad = DenseMatrix(n.value.rows(), n.value.cols());
        return n.grad;
    }

    bool wants(NodeId id) { return at(id).needs_grad; }

    void backward_node(NodeId id, TapeNode& n) {
        const DenseMatrix& g = n.grad;
        switch (n.op) {
        case Op::Input:
            break;
        case Op::Add: {
            for (int s = 0; s < 2; ++s)
                if (wants(n.inputs[s])) {
                    auto& d = grad_buf(n.inputs[s]);
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                }
            break;
        }
        case Op::Sub: {
            if (wants(n.inputs[0])) {
                auto& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
            }
            if (wants(n.inputs[1])) {
                auto& d = grad_buf(n.inputs[1]);
                for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
            }
            break;
        }
        case Op::Mul: {
            const auto& av = at(n.inputs[0]).value;
            const auto& bv = at(n.inputs[1]).value;
            if (wants(n.inputs[0])) {
                auto& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
            }
            if (wants(n.inputs[1])) {
                auto& d = grad_buf(n.inputs[1]);
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
            }
            break;
        }
        case Op::Neg: {
            if (wants(n.inputs[0])) {
                auto& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
            }
            break;
        }
        case Op::Scale: {
            if (wants(n.inputs[0])) {
                auto& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * n.daux[0];
            }
            break;
        }
        case Op::AddScalar: {
            if (wants(n.inputs[0])) {
                auto& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
            }
            break;
        }
        case Op::MatMul: {
            const auto& av = at(n.inputs[0]).value;
            const auto& bv = at(n.inputs[1]).value;
            if (wants(n.inputs[0])) {
                DenseMatrix da = sphenic::matmul(g, sphenic::transpose(bv));
                auto& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += da[i];
            }
            if (wants(n.inputs[1])) {
                DenseMatrix db = sphenic::matmul(sphenic::transpose(av), g);
                auto& d = grad_buf(n.inputs[1]);
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += db[i];
            }
            break;
        }
        case Op::Transpose: {
            if (wants(n.inputs[0])) {
                DenseMatrix gt = sphenic::transpose(g);
                auto& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += gt[i];
            }
            break;
        }
        case Op::Relu: {
            if (wants(n.inputs[0])) {
                auto& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (n.value[i] > 0.0) d[i] += g[i];
            }
            break;
        }
        case Op::Exp: {
            if (wants(n.inputs[0])) {
                auto& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * n.value[i];
            }
            break;
        }
        case Op::Log: {
            if (wants(n.inputs[0])) {
                const auto& xv = at(n.inputs[0]).value;
                auto& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] / xv[i];
            }
            break;
        }
        case Op::Sigmoid: {
            if (wants(n.inputs[0])) {
                auto& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i)
                    d[i] += g[i] * n.value[i] * (1.0 - n.value[i]);
            }
            break;
        }
        case Op::LGamma: {
            if (wants(n.inputs[0])) {
                const auto& xv = at(n.inputs[0]).value;
                auto& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * digamma(xv[i]);
            }
            break;
        }
        case Op::Clamp: {
            if (wants(n.inputs[0])) {
                const auto& xv = at(n.inputs[0]).value;
                auto& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (xv[i] > n.daux[0] && xv[i] < n.daux[1]) d[i] += g[i];
            }
            break;
        }
        case Op::SumAll: {
            if (wants(n.inputs[0])) {
                auto& d = grad_buf(n.inputs[0]);
                const double gv = g(0, 0);
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv;
            }
            break;
        }
        case Op::MeanAll: {
            if (wants(n.inputs[0])) {
                auto& d = grad_buf(n.inputs[0]);
                const double gv = g(0, 0) / static_cast<double>(d.size());
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv;
            }
            break;
        }
        case Op::AddRowVec: {
            if (wants(n.inputs[0])) {
                auto& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
            }
            if (wants(n.inputs[1])) {
                auto& d = grad_buf(n.inputs[1]);
                for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j) d(0, j) += g(i, j);
            }
            break;
        }
        case Op::MulColVec: {
            const auto& av = at(n.inputs[0]).value;
            const auto& cv = at(n.inputs[1]).value;
            if (wants(n.inputs[0])) {
                auto& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j) d(i, j) += g(i, j) * cv(i, 0);
            }
            if (wants(n.inputs[1])) {
                auto& d = grad_buf(n.inputs[1]);
                for (std::size_t i = 0; i < g.rows(); ++i) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < g.cols(); ++j) s += g(i, j) * av(i, j);
                    d(i, 0) += s;
                }
            }
            break;
        }
        case Op::RowDot: {
            const auto& av = at(n.inputs[0]).value;
            const auto& bv = at(n.inputs[1]).value;
            if (wants(n.inputs[0])) {
                auto& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < av.rows(); ++i)
                    for (std::size_t j = 0; j < av.cols(); ++j) d(i, j) += g(i, 0) * bv(i, j);
            }
            if (wants(n.inputs[1])) {
                auto& d = grad_buf(n.inputs[1]);
                for (std::size_t i = 0; i < av.rows(); ++i)
                    for (std::size_t j = 0; j < av.cols(); ++j) d(i, j) += g(i, 0) * av(i, j);
            }
            break;
        }
        case Op::RowL2Normalize: {
            if (wants(n.inputs[0])) {
                auto& d = grad_buf(n.inputs[0]);
                const DenseMatrix& y = n.value;
                for (std::size_t i = 0; i < y.rows(); ++i) {
                    const double norm = n.daux[i];
                    if (norm <= 0.0) continue;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
                    for (std::size_t j = 0; j < y.cols(); ++j)
                        d(i, j) += (g(i, j) - dot * y(i, j)) / norm;
                }
            }
            break;
        }
        case Op::SoftmaxRows: {
            if (wants(n.inputs[0])) {
                auto& d = grad_buf(n.inputs[0]);
                const DenseMatrix& y = n.value;
                for (std::size_t i = 0; i < y.rows(); ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
                    for (std::size_t j = 0; j < y.cols(); ++j)
                        d(i, j) += y(i, j) * (g(i, j) - dot);
                }
            }
            break;
        }
        case Op::LogSumExpRows: {
            if (wants(n.inputs[0])) {
                const auto& xv = at(n.inputs[0]).value;
                auto& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < xv.rows(); ++i)
                    for (std::size_t j = 0; j < xv.cols(); ++j)
                        d(i, j) += g(i, 0) * std::exp(xv(i, j) - n.value(i, 0));
            }
            break;
        }
        case Op::LogAddExp: {
            const auto& av = at(n.inputs[0]).value;
            const auto& bv = at(n.inputs[1]).value;
            if (wants(n.inputs[0])) {
                auto& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i)
                    d[i] += g[i] * std::exp(av[i] - n.value[i]);
            }
            if (wants(n.inputs[1])) {
                auto& d = grad_buf(n.inputs[1]);
                for (std::size_t i = 0; i < g.size(); ++i)
                    d[i] += g[i] * std::exp(bv[i] - n.value[i]);
            }
            break;
        }
        case Op::ConvMaxPool: {
            const auto& iv = at(n.inputs[0]).value;
            const auto& kv = at(n.inputs[1]).value;
            const std::int64_t stride = n.iaux[0];
            const std::int64_t k = n.iaux[2];
            const std::int64_t ow = n.iaux[6];
            const bool wimg = wants(n.inputs[0]);
            const bool wker = wants(n.inputs[1]);
            const bool wbias = wants(n.inputs[2]);
            for (std::size_t pi = 0; pi < n.value.rows(); ++pi)
                for (std::size_t pj = 0; pj < n.value.cols(); ++pj) {
                    const double gv = g(pi, pj);
                    if (gv == 0.0 || n.value(pi, pj) <= 0.0) continue; // ReLU gate
                    const std::size_t cell = 7 + 2 * (pi * static_cast<std::size_t>(ow) + pj);
                    const std::int64_t ci = n.iaux[cell];
                    const std::int64_t cj = n.iaux[cell + 1];
                    if (wbias) grad_buf(n.inputs[2])(0, 0) += gv;
                    for (std::int64_t m = 0; m < k; ++m)
                        for (std::int64_t n2 = 0; n2 < k; ++n2) {
                            const std::size_t ii = static_cast<std::size_t>(ci * stride + m);
                            const std::size_t jj = static_cast<std::size_t>(cj * stride + n2);
                            if (wker) grad_buf(n.inputs[1])(m, n2) += gv * iv(ii, jj);
                            if (wimg) grad_buf(n.inputs[0])(ii, jj) += gv * kv(m, n2);
                        }
                }
            break;
        }
        case Op::HStack: {
            for (std::size_t s = 0; s < n.inputs.size(); ++s) {
                if (!wants(n.inputs[s])) continue;
                auto& d = grad_buf(n.inputs[s]);
                const std::size_t off = static_cast<std::size_t>(n.iaux[s]);
                for (std::size_t i = 0; i < d.rows(); ++i)
                    for (std::size_t j = 0; j < d.cols(); ++j) d(i, j) += g(i, off + j);
            }
            break;
        }
        case Op::VStackRows: {
            for (std::size_t s = 0; s < n.inputs.size(); ++s) {
                if (!wants(n.inputs[s])) continue;
                auto& d = grad_buf(n.inputs[s]);
                const std::size_t off = static_cast<std::size_t>(n.iaux[s]);
                for (std::size_t i = 0; i < d.rows(); ++i)
                    for (std::size_t j = 0; j < d.cols(); ++j) d(i, j) += g(off + i, j);
            }
            break;
        }
        case Op::SliceCols: {
            if (wants(n.inputs[0])) {
                auto& d = grad_buf(n.inputs[0]);
                const std::size_t c0 = static_cast<std::size_t>(n.iaux[0]);
                for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j) d(i, c0 + j) += g(i, j);
            }
            break;
        }
        case Op::Reshape: {
            if (wants(n.inputs[0])) {
                auto& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
            }
            break;
        }
        }
    }
};

} // namespace sphenic
