#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "error.hpp"
#include "graph.hpp"
#include "io.hpp"
#include "matrix.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "special.hpp"

namespace sphenic {

struct ModelDims {
    std::size_t genes = 0;    // HVG count feeding the view GCNs
    std::size_t hidden = 128; // first GCN layer width
    std::size_t latent = 64;  // embedding width d
    int epi_resolution = 20;  // side of the topological images
    std::size_t attn_hidden = 16;
    std::size_t conv_kernels = 8;
    int conv_size = 3;
    int conv_stride = 2;
    int pool = 2;

    std::size_t conv_out() const {
        if (epi_resolution < conv_size)
            throw DimensionError("image resolution " + std::to_string(epi_resolution) +
                                 " too small for a " + std::to_string(conv_size) + "-wide kernel");
        return static_cast<std::size_t>((epi_resolution - conv_size) / conv_stride + 1);
    }
    std::size_t pooled_out() const {
        const std::size_t p = conv_out() / static_cast<std::size_t>(pool);
        if (p < 1) throw DimensionError("conv output smaller than the pooling window");
        return p;
    }
    std::size_t epe_flat() const { return conv_kernels * pooled_out() * pooled_out(); }
};

inline DenseMatrix glorot(std::size_t rows, std::size_t cols, Rng& rng) {
    DenseMatrix w(rows, cols);
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = (2.0 * rng.uniform() - 1.0) * limit;
    return w;
}

inline ParamSet init_params(const ModelDims& d, Rng& rng) {
    if (d.genes == 0) throw ModelError("model needs a positive gene count");
    ParamSet p;
    auto w = [&](const std::string& name, std::size_t r, std::size_t c) {
        p.push_back({name, glorot(r, c, rng)});
    };
    auto z = [&](const std::string& name, std::size_t r, std::size_t c) {
        p.push_back({name, DenseMatrix(r, c)});
    };
    for (const char* view : {"gcn_s", "gcn_x", "gcn_co"}) {
        w(std::string(view) + ".l1.W", d.genes, d.hidden);
        w(std::string(view) + ".l2.W", d.hidden, d.latent);
    }
    const auto k = static_cast<std::size_t>(d.conv_size);
    for (const char* mod : {"epe_s", "epe_x"}) {
        for (std::size_t kk = 0; kk < d.conv_kernels; ++kk)
            w(std::string(mod) + ".k" + std::to_string(kk), k, k);
        z(std::string(mod) + ".b", 1, d.conv_kernels);
        w(std::string(mod) + ".proj", d.epe_flat(), d.latent);
    }
    w("attn.W1", d.latent, d.attn_hidden);
    z("attn.b1", 1, d.attn_hidden);
    w("attn.W2", d.attn_hidden, 1);
    w("fuse.l1.W", d.latent, d.latent);
    z("fuse.l1.b", 1, d.latent);
    w("fuse.l2.W", d.latent, d.latent);
    z("fuse.l2.b", 1, d.latent);
    w("dec.l1.W", d.latent, d.hidden);
    z("dec.l1.b", 1, d.hidden);
    w("dec.l2.W", d.hidden, d.hidden);
    z("dec.l2.b", 1, d.hidden);
    w("dec.l3.W", d.hidden, d.hidden);
    z("dec.l3.b", 1, d.hidden);
    w("head.pi.W", d.hidden, d.genes);
    w("head.mu.W", d.hidden, d.genes);
    w("head.theta.W", d.hidden, d.genes);
    return p;
}

// tape bindings for one forward/backward pass
struct BoundParams {
    std::map<std::string, NodeId> nodes;
    std::vector<NodeId> order; // matches the ParamSet order for gradient export

    NodeId at(const std::string& name) const {
        const auto it = nodes.find(name);
        if (it == nodes.end()) throw ModelError("unknown parameter " + name);
        return it->second;
    }
};

inline BoundParams bind_params(Tape& tape, const ParamSet& params) {
    BoundParams b;
    for (const auto& [name, value] : params) {
        const NodeId id = tape.input(value, true);
        b.nodes.emplace(name, id);
        b.order.push_back(id);
    }
    return b;
}

// ---------------------------------------------------------------------------
// Graph convolutions
// ---------------------------------------------------------------------------

// D^{-1/2} (A + I) D^{-1/2} with binary adjacency from the edge list
inline DenseMatrix normalized_adjacency(const WeightedGraph& g) {
    const auto n = static_cast<std::size_t>(g.n);
    DenseMatrix a(n, n);
    for (const auto& e : g.edges) {
        a(static_cast<std::size_t>(e.u), static_cast<std::size_t>(e.v)) = 1.0;
        a(static_cast<std::size_t>(e.v), static_cast<std::size_t>(e.u)) = 1.0;
    }
    for (std::size_t i = 0; i < n; ++i) a(i, i) = 1.0;
    std::vector<double> dinv(n);
    for (std::size_t i = 0; i < n; ++i) {
        double deg = 0.0;
        for (std::size_t j = 0; j < n; ++j) deg += a(i, j);
        dinv[i] = 1.0 / std::sqrt(deg);
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a(i, j) *= dinv[i] * dinv[j];
    return a;
}

inline NodeId gcn_layer(Tape& t, NodeId a_hat, NodeId h, NodeId w) {
    return t.relu(t.matmul(a_hat, t.matmul(h, w)));
}

inline NodeId gcn_two_layer(Tape& t, NodeId a_hat, NodeId x, NodeId w1, NodeId w2) {
    return gcn_layer(t, a_hat, gcn_layer(t, a_hat, x, w1), w2);
}

struct CoViewOut {
    NodeId h_s_co;
    NodeId h_x_co;
    NodeId h_co;
};

// one weight stack propagated through both adjacencies, then averaged
inline CoViewOut co_view_forward(Tape& t, NodeId x, NodeId a_s_hat, NodeId a_x_hat, NodeId w1,
                                 NodeId w2) {
    CoViewOut out;
    out.h_s_co = gcn_two_layer(t, a_s_hat, x, w1, w2);
    out.h_x_co = gcn_two_layer(t, a_x_hat, x, w1, w2);
    out.h_co = t.scale(t.add(out.h_s_co, out.h_x_co), 0.5);
    return out;
}

// squared Frobenius distance between the row-normalized Gram matrices
inline NodeId consistency_loss(Tape& t, NodeId a, NodeId b) {
    const NodeId an = t.row_l2_normalize(a);
    const NodeId bn = t.row_l2_normalize(b);
    const NodeId ga = t.matmul(an, t.transpose(an));
    const NodeId gb = t.matmul(bn, t.transpose(bn));
    const NodeId diff = t.sub(ga, gb);
    return t.sum_all(t.mul(diff, diff));
}

// ---------------------------------------------------------------------------
// Topological feature extraction
// ---------------------------------------------------------------------------

// Per spot: each kernel runs conv(stride 2) + ReLU + 2x2 max-pool over the
// spot's image, the pooled maps flatten side by side, and a shared linear
// layer maps the concatenation to the latent width.
inline NodeId epe_forward(Tape& t, const DenseMatrix& image_stack, const ModelDims& dims,
                          const BoundParams& params, const std::string& prefix) {
    const auto P = static_cast<std::size_t>(dims.epi_resolution);
    if (image_stack.cols() != P * P)
        throw DimensionError("image stack is " + image_stack.shape_str() + ", expected cols " +
                             std::to_string(P * P));
    const std::size_t n = image_stack.rows();
    const std::size_t po = dims.pooled_out();
    std::vector<NodeId> kernels(dims.conv_kernels);
    for (std::size_t k = 0; k < dims.conv_kernels; ++k)
        kernels[k] = params.at(prefix + ".k" + std::to_string(k));
    const NodeId bias_row = params.at(prefix + ".b");
    std::vector<NodeId> biases(dims.conv_kernels);
    for (std::size_t k = 0; k < dims.conv_kernels; ++k)
        biases[k] = t.slice_cols(bias_row, k, k + 1);

    const NodeId stack_t = t.transpose(t.constant(image_stack));
    std::vector<NodeId> rows;
    rows.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const NodeId img = t.reshape(t.slice_cols(stack_t, i, i + 1), P, P);
        std::vector<NodeId> maps;
        maps.reserve(dims.conv_kernels);
        for (std::size_t k = 0; k < dims.conv_kernels; ++k)
            maps.push_back(t.reshape(
                t.conv2d_maxpool(img, kernels[k], biases[k], dims.conv_stride, dims.pool), 1,
                po * po));
        rows.push_back(t.hstack(maps));
    }
    return t.matmul(t.vstack_rows(rows), params.at(prefix + ".proj"));
}

// ---------------------------------------------------------------------------
// Attention fusion
// ---------------------------------------------------------------------------

struct FusionOut {
    NodeId h;       // n x latent fused embedding
    NodeId weights; // n x n_modalities, rows sum to 1
};

// shared two-layer scorer per modality, softmax across modalities per cell,
// weighted sum, then a two-layer MLP (ReLU then linear)
inline FusionOut attention_fusion(Tape& t, const std::vector<NodeId>& embeddings,
                                  const BoundParams& params) {
    if (embeddings.empty()) throw ModelError("attention needs at least one embedding");
    const NodeId w1 = params.at("attn.W1");
    const NodeId b1 = params.at("attn.b1");
    const NodeId w2 = params.at("attn.W2");
    std::vector<NodeId> scores;
    scores.reserve(embeddings.size());
    for (const NodeId e : embeddings)
        scores.push_back(t.matmul(t.relu(t.add_rowvec(t.matmul(e, w1), b1)), w2));
    FusionOut out;
    out.weights = t.softmax_rows(t.hstack(scores));
    NodeId mix = t.mul_colvec(embeddings[0], t.slice_cols(out.weights, 0, 1));
    for (std::size_t m = 1; m < embeddings.size(); ++m)
        mix = t.add(mix, t.mul_colvec(embeddings[m], t.slice_cols(out.weights, m, m + 1)));
    const NodeId l1 = t.relu(t.add_rowvec(t.matmul(mix, params.at("fuse.l1.W")), params.at("fuse.l1.b")));
    out.h = t.add_rowvec(t.matmul(l1, params.at("fuse.l2.W")), params.at("fuse.l2.b"));
    return out;
}

// ---------------------------------------------------------------------------
// Spatial-constraint contrastive loss
// ---------------------------------------------------------------------------

namespace detail {

// 0/1 selection matrix picking the listed rows
inline DenseMatrix selection(const std::vector<std::pair<int, int>>& pairs, bool second,
                             std::size_t n) {
    DenseMatrix s(pairs.size(), n);
    for (std::size_t r = 0; r < pairs.size(); ++r) {
        const int idx = second ? pairs[r].second : pairs[r].first;
        if (idx < 0 || static_cast<std::size_t>(idx) >= n)
            throw ModelError("contrastive pair index " + std::to_string(idx) + " out of range");
        s(r, static_cast<std::size_t>(idx)) = 1.0;
    }
    return s;
}

} // namespace detail

// Four bracketed sums, negated and averaged over cells: pull fused neighbors
// together, align fused rows with every view, push sampled non-neighbors
// apart, and a view-alignment term for those negatives. Cosine similarities
// come from L2-normalized rows (zero rows stay zero), the logistic sigmoid is
// clamped away from {0,1}, and both view sums run through log-sum-exp.
inline NodeId scdom_loss(Tape& t, NodeId h, const std::vector<NodeId>& views,
                         const std::vector<std::vector<int>>& neighbors,
                         const std::vector<std::vector<int>>& negatives) {
    const std::size_t n = t.value(h).rows();
    if (neighbors.size() != n || negatives.size() != n)
        throw ModelError("neighbor and negative lists must cover every cell");
    for (std::size_t i = 0; i < n; ++i)
        if (neighbors[i].empty())
            throw ModelError("cell " + std::to_string(i) + " has no neighbors");

    std::vector<std::pair<int, int>> np, kp;
    DenseMatrix neighbor_count(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        neighbor_count(i, 0) = static_cast<double>(neighbors[i].size());
        for (int j : neighbors[i]) np.push_back({static_cast<int>(i), j});
        for (int k : negatives[i]) kp.push_back({static_cast<int>(i), k});
    }

    const NodeId hn = t.row_l2_normalize(h);
    std::vector<NodeId> vn;
    vn.reserve(views.size());
    for (const NodeId v : views) vn.push_back(t.row_l2_normalize(v));

    const NodeId sel_ni = t.constant(detail::selection(np, false, n));
    const NodeId sel_nj = t.constant(detail::selection(np, true, n));
    const NodeId c_pos = t.row_dot(t.matmul(sel_ni, hn), t.matmul(sel_nj, hn));
    const NodeId term1 = t.sum_all(t.log(t.clamp(t.sigmoid(c_pos), 1e-7, 1.0 - 1e-7)));

    std::vector<NodeId> self_view;
    self_view.reserve(vn.size());
    for (const NodeId v : vn) self_view.push_back(t.row_dot(hn, v));
    const NodeId lse_self = t.log_sum_exp_rows(t.hstack(self_view)); // n x 1
    const NodeId term2 = t.sum_all(t.mul(t.constant(neighbor_count), lse_self));

    NodeId bracket = t.add(term1, term2);
    if (!kp.empty()) {
        const NodeId sel_ki = t.constant(detail::selection(kp, false, n));
        const NodeId sel_kk = t.constant(detail::selection(kp, true, n));
        const NodeId hi = t.matmul(sel_ki, hn);
        const NodeId c_neg = t.row_dot(hi, t.matmul(sel_kk, hn));
        const NodeId term3 =
            t.sum_all(t.log(t.clamp(t.sigmoid(t.neg(c_neg)), 1e-7, 1.0 - 1e-7)));
        const NodeId one_minus = t.add_scalar(t.neg(c_neg), 1.0);
        std::vector<NodeId> neg_view;
        neg_view.reserve(vn.size());
        for (const NodeId v : vn)
            neg_view.push_back(t.mul(one_minus, t.row_dot(hi, t.matmul(sel_kk, v))));
        const NodeId term4 = t.sum_all(t.log_sum_exp_rows(t.hstack(neg_view)));
        bracket = t.add(bracket, t.add(term3, term4));
    }
    return t.scale(t.neg(bracket), 1.0 / static_cast<double>(n));
}

// m uniform draws per cell from outside N_i and i itself
inline std::vector<std::vector<int>> sample_negatives(const std::vector<std::vector<int>>& neighbors,
                                                      std::size_t m, Rng& rng) {
    const std::size_t n = neighbors.size();
    std::vector<std::vector<int>> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<bool> banned(n, false);
        banned[i] = true;
        for (int j : neighbors[i]) banned[static_cast<std::size_t>(j)] = true;
        std::vector<int> pool;
        for (std::size_t k = 0; k < n; ++k)
            if (!banned[k]) pool.push_back(static_cast<int>(k));
        if (pool.empty()) continue; // everything is a neighbor, nothing to repel
        for (std::size_t s = 0; s < m; ++s)
            out[i].push_back(pool[rng.uniform_int(pool.size())]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// ZINB reconstruction
// ---------------------------------------------------------------------------

struct ZinbHeads {
    NodeId pi;    // dropout probability, sigmoid output
    NodeId mu;    // mean, size-factor scaled
    NodeId theta; // dispersion, clamped
};

inline ZinbHeads zinb_heads(Tape& t, NodeId h, const BoundParams& params,
                            const std::vector<double>& size_factors) {
    const std::size_t n = t.value(h).rows();
    if (size_factors.size() != n)
        throw DimensionError("size factor count " + std::to_string(size_factors.size()) +
                             " does not match " + std::to_string(n) + " rows");
    NodeId f = h;
    for (int layer = 1; layer <= 3; ++layer) {
        const std::string base = "dec.l" + std::to_string(layer);
        f = t.relu(t.add_rowvec(t.matmul(f, params.at(base + ".W")), params.at(base + ".b")));
    }
    DenseMatrix sf(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        if (!(size_factors[i] > 0.0)) throw ModelError("size factors must be positive");
        sf(i, 0) = size_factors[i];
    }
    ZinbHeads out;
    out.pi = t.sigmoid(t.matmul(f, params.at("head.pi.W")));
    out.mu = t.mul_colvec(t.exp(t.matmul(f, params.at("head.mu.W"))), t.constant(sf));
    out.theta = t.clamp(t.exp(t.matmul(f, params.at("head.theta.W"))), 1e-4, 1e4);
    return out;
}

// mean negative log-likelihood over all matrix entries; zero counts blend the
// dropout spike with NB(0) through a stable log-add-exp
inline NodeId zinb_nll(Tape& t, const DenseMatrix& counts, NodeId pi, NodeId mu, NodeId theta) {
    check_same_shape(counts, t.value(pi), "zinb_nll");
    check_same_shape(counts, t.value(mu), "zinb_nll");
    check_same_shape(counts, t.value(theta), "zinb_nll");
    DenseMatrix zero_mask(counts.rows(), counts.cols());
    DenseMatrix nonzero_mask(counts.rows(), counts.cols());
    DenseMatrix lgamma_x1(counts.rows(), counts.cols());
    for (std::size_t i = 0; i < counts.size(); ++i) {
        if (counts[i] < 0.0) throw DomainError("negative count in reconstruction target");
        zero_mask[i] = counts[i] == 0.0 ? 1.0 : 0.0;
        nonzero_mask[i] = 1.0 - zero_mask[i];
        lgamma_x1[i] = log_gamma(counts[i] + 1.0);
    }
    const NodeId x = t.constant(counts);
    const NodeId pic = t.clamp(pi, 1e-7, 1.0 - 1e-7);
    const NodeId log_pi = t.log(pic);
    const NodeId log_1mpi = t.log(t.add_scalar(t.neg(pic), 1.0));
    const NodeId mus = t.clamp(mu, 1e-12, 1e12); // armor against exp under/overflow upstream
    const NodeId log_theta_ratio = t.sub(t.log(theta), t.log(t.add(theta, mus)));
    const NodeId log_mu_ratio = t.sub(t.log(mus), t.log(t.add(theta, mus)));
    const NodeId nb_zero = t.mul(theta, log_theta_ratio);

    const NodeId nb_logpmf =
        t.add(t.sub(t.sub(t.lgamma(t.add(x, theta)), t.constant(lgamma_x1)), t.lgamma(theta)),
              t.add(nb_zero, t.mul(x, log_mu_ratio)));

    const NodeId ll_zero = t.log_add_exp(log_pi, t.add(log_1mpi, nb_zero));
    const NodeId ll_nonzero = t.add(log_1mpi, nb_logpmf);
    const NodeId ll = t.add(t.mul(t.constant(zero_mask), ll_zero),
                            t.mul(t.constant(nonzero_mask), ll_nonzero));
    return t.neg(t.mean_all(ll));
}

// scalar reference evaluation of the same likelihood
inline double zinb_log_pmf(double x, double pi, double mu, double theta) {
    if (x < 0.0 || x != std::floor(x)) throw DomainError("zinb_log_pmf needs a nonnegative integer");
    if (!(mu > 0.0) || !(theta > 0.0)) throw DomainError("zinb_log_pmf needs positive mu, theta");
    const double pc = std::min(1.0 - 1e-7, std::max(1e-7, pi));
    const double nb = log_gamma(x + theta) - log_gamma(x + 1.0) - log_gamma(theta) +
                      theta * (std::log(theta) - std::log(theta + mu)) +
                      x * (std::log(mu) - std::log(theta + mu));
    if (x == 0.0) {
        const double a = std::log(pc);
        const double b = std::log(1.0 - pc) + nb;
        const double hi = std::max(a, b);
        return hi + std::log(std::exp(a - hi) + std::exp(b - hi));
    }
    return std::log(1.0 - pc) + nb;
}

inline NodeId total_loss(Tape& t, NodeId rec, NodeId con, NodeId sco, double lambda1,
                         double lambda2) {
    return t.add(rec, t.add(t.scale(con, lambda1), t.scale(sco, lambda2)));
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_le(const std::string& s, std::size_t& off, int bytes) {
    if (off + static_cast<std::size_t>(bytes) > s.size()) throw IoError("checkpoint truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[off + static_cast<std::size_t>(i)]))
             << (8 * i);
    off += static_cast<std::size_t>(bytes);
    return v;
}

inline void put_u32(std::string& out, std::uint32_t v) { put_le(out, v, 4); }
inline void put_u64(std::string& out, std::uint64_t v) { put_le(out, v, 8); }
inline std::uint32_t get_u32(const std::string& s, std::size_t& off) {
    return static_cast<std::uint32_t>(get_le(s, off, 4));
}
inline std::uint64_t get_u64(const std::string& s, std::size_t& off) { return get_le(s, off, 8); }

} // namespace detail

// magic "SPHN1", then records of [u32 name length][name][u64 rows][u64 cols]
// [rows*cols little-endian doubles] until end of file
inline void save_checkpoint(const std::string& path, const ParamSet& params) {
    std::string out = "SPHN1";
    for (const auto& [name, value] : params) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_u64(out, value.rows());
        detail::put_u64(out, value.cols());
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double v = value[i];
            std::uint64_t bits;
            static_assert(sizeof(bits) == sizeof(double));
            std::memcpy(&bits, &v, sizeof(bits));
            detail::put_u64(out, bits);
        }
    }
    write_text_file(path, out);
}

inline ParamSet load_checkpoint(const std::string& path) {
    const std::string s = read_text_file(path);
    if (s.size() < 5 || s.compare(0, 5, "SPHN1") != 0)
        throw IoError(path + ": not a SPHN1 checkpoint");
    std::size_t off = 5;
    ParamSet out;
    while (off < s.size()) {
        const std::uint32_t name_len = detail::get_u32(s, off);
        if (off + name_len > s.size()) throw IoError("checkpoint truncated");
        std::string name = s.substr(off, name_len);
        off += name_len;
        const std::uint64_t rows = detail::get_u64(s, off);
        const std::uint64_t cols = detail::get_u64(s, off);
        DenseMatrix m(rows, cols);
        for (std::size_t i = 0; i < m.size(); ++i) {
            const std::uint64_t bits = detail::get_u64(s, off);
            double v;
            std::memcpy(&v, &bits, sizeof(v));
            m[i] = v;
        }
        out.push_back({std::move(name), std::move(m)});
    }
    return out;
}

} // namespace sphenic
