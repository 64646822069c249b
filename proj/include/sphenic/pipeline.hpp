#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "data.hpp"
#include "error.hpp"
#include "model.hpp"
#include "topology.hpp"

namespace sphenic {

struct TrainConfig {
    double lambda1 = 0.1;
    double lambda2 = 0.1;
    int epochs = 100;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    int k_clusters = 0; // 0 = take the label count from the slice
    int negatives_per_cell = 6;
    bool topo_on = true;
    bool scdom_on = true;
    int k_spatial = 6;
    int k_expression = 15;
    int pca_components = 50;
    std::size_t hidden = 128;
    std::size_t latent = 64;
    PreprocessConfig preprocess;
    TopoConfig topo;

    void validate() const {
        if (lambda1 < 0.0 || lambda2 < 0.0) throw ConfigError("loss weights must be nonnegative");
        if (epochs < 1) throw ConfigError("epochs must be at least 1");
        if (!(lr >= 0.0)) throw ConfigError("learning rate must be nonnegative");
        if (k_clusters != 0 && k_clusters < 2) throw ConfigError("cluster count must be at least 2");
        if (k_spatial < 1) throw ConfigError("spatial graph k must be positive");
        if (k_expression < 1) throw ConfigError("expression graph k must be positive");
        if (pca_components < 1) throw ConfigError("PCA component count must be positive");
        if (negatives_per_cell < 0) throw ConfigError("negative sample count must be nonnegative");
        if (hidden < 1 || latent < 1) throw ConfigError("layer widths must be positive");
    }
};

struct PreparedData {
    SpatialSlice slice;
    Preprocessed pre;
    WeightedGraph gs, gx;
    DenseMatrix a_s, a_x; // normalized adjacencies
    EpiResult epi;
    bool has_epi = false;
    std::vector<std::vector<int>> neighbors; // spatial graph adjacency, sorted
};

inline PreparedData prepare(const SpatialSlice& slice, const TrainConfig& cfg) {
    cfg.validate();
    PreparedData p;
    p.slice = slice;
    p.pre = preprocess(slice, cfg.preprocess);
    p.gs = build_spatial_graph(slice.coords, static_cast<std::size_t>(cfg.k_spatial));
    p.gx = build_expression_graph(p.pre.normalized, static_cast<std::size_t>(cfg.k_expression),
                                  static_cast<std::size_t>(cfg.pca_components), &slice.spot_ids);
    p.a_s = normalized_adjacency(p.gs);
    p.a_x = normalized_adjacency(p.gx);
    if (cfg.topo_on) {
        p.epi = epi_for_all_spots(slice.coords, p.gs, p.gx, cfg.topo);
        p.has_epi = true;
    }
    p.neighbors.assign(static_cast<std::size_t>(p.gs.n), {});
    for (const auto& e : p.gs.edges) {
        p.neighbors[static_cast<std::size_t>(e.u)].push_back(e.v);
        p.neighbors[static_cast<std::size_t>(e.v)].push_back(e.u);
    }
    for (auto& lst : p.neighbors) std::sort(lst.begin(), lst.end());
    return p;
}

inline ModelDims dims_for(const PreparedData& p, const TrainConfig& cfg) {
    ModelDims d;
    d.genes = p.pre.raw_hvg.cols();
    d.hidden = cfg.hidden;
    d.latent = cfg.latent;
    d.epi_resolution = cfg.topo.resolution;
    return d;
}

namespace detail {

struct ModelNodes {
    NodeId h_s, h_x;
    CoViewOut co;
    NodeId epe_s, epe_x;
    FusionOut fusion;
    ZinbHeads heads;
};

inline ModelNodes forward_nodes(Tape& t, const PreparedData& p, const TrainConfig& cfg,
                                const BoundParams& bound) {
    const ModelDims d = dims_for(p, cfg);
    const std::size_t n = p.pre.normalized.rows();
    ModelNodes m;
    const NodeId x = t.constant(p.pre.normalized);
    const NodeId as = t.constant(p.a_s);
    const NodeId ax = t.constant(p.a_x);
    m.h_s = gcn_two_layer(t, as, x, bound.at("gcn_s.l1.W"), bound.at("gcn_s.l2.W"));
    m.h_x = gcn_two_layer(t, ax, x, bound.at("gcn_x.l1.W"), bound.at("gcn_x.l2.W"));
    m.co = co_view_forward(t, x, as, ax, bound.at("gcn_co.l1.W"), bound.at("gcn_co.l2.W"));
    if (cfg.topo_on) {
        if (!p.has_epi) throw TrainError("prepared data has no topological images");
        m.epe_s = epe_forward(t, p.epi.spatial.images, d, bound, "epe_s");
        m.epe_x = epe_forward(t, p.epi.expression.images, d, bound, "epe_x");
    } else {
        m.epe_s = t.constant(DenseMatrix(n, d.latent));
        m.epe_x = t.constant(DenseMatrix(n, d.latent));
    }
    m.fusion = attention_fusion(t, {m.h_s, m.h_x, m.co.h_co, m.epe_s, m.epe_x}, bound);
    m.heads = zinb_heads(t, m.fusion.h, bound, p.pre.size_factors);
    return m;
}

struct LossNodes {
    ModelNodes model;
    NodeId rec, con, sco, total;
};

inline LossNodes loss_nodes(Tape& t, const PreparedData& p, const TrainConfig& cfg,
                            const BoundParams& bound,
                            const std::vector<std::vector<int>>& negatives) {
    LossNodes l;
    l.model = forward_nodes(t, p, cfg, bound);
    l.rec = zinb_nll(t, p.pre.raw_hvg, l.model.heads.pi, l.model.heads.mu, l.model.heads.theta);
    l.con = consistency_loss(t, l.model.co.h_s_co, l.model.co.h_x_co);
    if (cfg.scdom_on)
        l.sco = scdom_loss(t, l.model.fusion.h, {l.model.h_s, l.model.h_x, l.model.co.h_co},
                           p.neighbors, negatives);
    else
        l.sco = t.constant(DenseMatrix(1, 1));
    l.total = total_loss(t, l.rec, l.con, l.sco, cfg.lambda1, cfg.lambda2);
    return l;
}

} // namespace detail

struct ForwardState {
    DenseMatrix h;         // fused embedding, n x latent
    DenseMatrix mu;        // ZINB mean, n x genes
    DenseMatrix attention; // n x 5 modality weights
};

inline ForwardState compute_state(const PreparedData& p, const TrainConfig& cfg,
                                  const ParamSet& params) {
    Tape t;
    const BoundParams bound = bind_params(t, params);
    const auto m = detail::forward_nodes(t, p, cfg, bound);
    ForwardState s;
    s.h = t.value(m.fusion.h);
    s.mu = t.value(m.heads.mu);
    s.attention = t.value(m.fusion.weights);
    return s;
}

struct TrainResult {
    ParamSet params;
    ForwardState state;
    std::vector<double> loss_trace;
};

inline TrainResult train(const PreparedData& p, const TrainConfig& cfg) {
    cfg.validate();
    const ModelDims d = dims_for(p, cfg);
    const Rng root(cfg.seed);
    Rng init_rng = root.fork(1);
    TrainResult r;
    r.params = init_params(d, init_rng);
    AdamState adam;
    adam.cfg.lr = cfg.lr;
    const std::vector<std::vector<int>> no_negatives(p.neighbors.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::vector<int>> negatives = no_negatives;
        if (cfg.scdom_on && cfg.negatives_per_cell > 0) {
            Rng neg_rng = root.fork(1000 + static_cast<std::uint64_t>(epoch));
            negatives = sample_negatives(p.neighbors,
                                         static_cast<std::size_t>(cfg.negatives_per_cell), neg_rng);
        }
        try {
            Tape t;
            const BoundParams bound = bind_params(t, r.params);
            const auto l = detail::loss_nodes(t, p, cfg, bound, negatives);
            const double loss = t.value(l.total)(0, 0);
            if (!std::isfinite(loss))
                throw DomainError("loss is not finite");
            r.loss_trace.push_back(loss);
            t.backward(l.total);
            std::vector<DenseMatrix> grads;
            grads.reserve(bound.order.size());
            for (const NodeId id : bound.order) grads.push_back(t.grad_copy(id));
            adam_step(r.params, grads, adam);
        } catch (const DomainError& e) {
            throw TrainError("epoch " + std::to_string(epoch) + ": " + e.what());
        }
    }
    r.state = compute_state(p, cfg, r.params);
    return r;
}

// the denoised expression is the ZINB mean
inline const DenseMatrix& impute(const ForwardState& state) { return state.mu; }

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

struct ClusterResult {
    std::vector<int> labels;
    DenseMatrix centroids;
    double inertia = 0.0;
};

namespace detail {

inline double sq_dist(const DenseMatrix& x, std::size_t i, const DenseMatrix& c, std::size_t j) {
    double s = 0.0;
    for (std::size_t f = 0; f < x.cols(); ++f) {
        const double dd = x(i, f) - c(j, f);
        s += dd * dd;
    }
    return s;
}

inline ClusterResult kmeans_once(const DenseMatrix& x, std::size_t k, Rng& rng) {
    const std::size_t n = x.rows(), dim = x.cols();
    DenseMatrix cent(k, dim);
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    // k-means++ seeding: first uniform, then proportional to squared distance
    std::size_t first = rng.uniform_int(n);
    for (std::size_t f = 0; f < dim; ++f) cent(0, f) = x(first, f);
    for (std::size_t j = 1; j <= k; ++j) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], sq_dist(x, i, cent, j - 1));
            total += d2[i];
        }
        if (j == k) break;
        std::size_t pick = 0;
        if (total > 0.0) {
            const double target = rng.uniform() * total;
            double cum = 0.0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                cum += d2[i];
                if (cum > target) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = rng.uniform_int(n); // all remaining points coincide with centroids
        }
        for (std::size_t f = 0; f < dim; ++f) cent(j, f) = x(pick, f);
    }

    ClusterResult res;
    res.labels.assign(n, 0);
    double prev = std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < 300; ++iter) {
        // assignment, ties to the lowest centroid index
        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = sq_dist(x, i, cent, 0);
            std::size_t arg = 0;
            for (std::size_t j = 1; j < k; ++j) {
                const double dd = sq_dist(x, i, cent, j);
                if (dd < best) {
                    best = dd;
                    arg = j;
                }
            }
            res.labels[i] = static_cast<int>(arg);
            inertia += best;
        }
        res.inertia = inertia;
        // means, reseeding empty clusters at the farthest point
        DenseMatrix next(k, dim);
        std::vector<std::size_t> count(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto j = static_cast<std::size_t>(res.labels[i]);
            count[j] += 1;
            for (std::size_t f = 0; f < dim; ++f) next(j, f) += x(i, f);
        }
        for (std::size_t j = 0; j < k; ++j) {
            if (count[j] > 0) {
                for (std::size_t f = 0; f < dim; ++f) next(j, f) /= static_cast<double>(count[j]);
                continue;
            }
            std::size_t far = 0;
            double worst = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double dd = sq_dist(x, i, cent, static_cast<std::size_t>(res.labels[i]));
                if (dd > worst) {
                    worst = dd;
                    far = i;
                }
            }
            for (std::size_t f = 0; f < dim; ++f) next(j, f) = x(far, f);
        }
        cent = std::move(next);
        if (prev < std::numeric_limits<double>::infinity() &&
            std::fabs(prev - inertia) <= 1e-6 * std::max(prev, 1e-300))
            break;
        prev = inertia;
    }
    // final assignment against the last centroid update
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double best = sq_dist(x, i, cent, 0);
        std::size_t arg = 0;
        for (std::size_t j = 1; j < k; ++j) {
            const double dd = sq_dist(x, i, cent, j);
            if (dd < best) {
                best = dd;
                arg = j;
            }
        }
        res.labels[i] = static_cast<int>(arg);
        inertia += best;
    }
    res.inertia = inertia;
    res.centroids = std::move(cent);
    return res;
}

} // namespace detail

inline ClusterResult kmeans(const DenseMatrix& x, int k, int restarts, std::uint64_t seed) {
    if (k < 1) throw ConfigError("cluster count must be positive");
    if (restarts < 1) throw ConfigError("restart count must be positive");
    if (static_cast<std::size_t>(k) > x.rows())
        throw ConfigError("cannot form " + std::to_string(k) + " clusters from " +
                          std::to_string(x.rows()) + " points");
    const Rng root(seed);
    ClusterResult best;
    bool have = false;
    for (int r = 0; r < restarts; ++r) {
        Rng rng = root.fork(static_cast<std::uint64_t>(r));
        ClusterResult cur = detail::kmeans_once(x, static_cast<std::size_t>(k), rng);
        if (!have || cur.inertia < best.inertia) {
            best = std::move(cur);
            have = true;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Partition agreement metrics
// ---------------------------------------------------------------------------

namespace detail {

struct Contingency {
    std::vector<std::vector<double>> cells; // ra x rb counts
    std::vector<double> row, col;
    double n = 0.0;
    bool identical = false; // equal as partitions, i.e. a relabeling bijection
};

inline Contingency contingency(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size()) throw MetricError("label lists differ in length");
    if (a.size() < 2) throw MetricError("need at least two labeled points");
    std::map<int, std::size_t> ia, ib;
    for (const int v : a) ia.emplace(v, ia.size());
    for (const int v : b) ib.emplace(v, ib.size());
    Contingency c;
    c.cells.assign(ia.size(), std::vector<double>(ib.size(), 0.0));
    c.row.assign(ia.size(), 0.0);
    c.col.assign(ib.size(), 0.0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const std::size_t ra = ia[a[i]], rb = ib[b[i]];
        c.cells[ra][rb] += 1.0;
        c.row[ra] += 1.0;
        c.col[rb] += 1.0;
        c.n += 1.0;
    }
    c.identical = ia.size() == ib.size();
    if (c.identical)
        for (const auto& r : c.cells) {
            std::size_t nz = 0;
            for (const double v : r)
                if (v > 0.0) nz += 1;
            if (nz != 1) {
                c.identical = false;
                break;
            }
        }
    return c;
}

inline double comb2(double m) { return m * (m - 1.0) / 2.0; }

} // namespace detail

// pair-counting adjusted Rand index; degenerate normalizations fall back to
// 1 for identical partitions and 0 otherwise
inline double ari(const std::vector<int>& a, const std::vector<int>& b) {
    const auto c = detail::contingency(a, b);
    double index = 0.0, sum_a = 0.0, sum_b = 0.0;
    for (const auto& r : c.cells)
        for (const double v : r) index += detail::comb2(v);
    for (const double v : c.row) sum_a += detail::comb2(v);
    for (const double v : c.col) sum_b += detail::comb2(v);
    const double expected = sum_a * sum_b / detail::comb2(c.n);
    const double maximum = 0.5 * (sum_a + sum_b);
    if (maximum == expected) return c.identical ? 1.0 : 0.0;
    return (index - expected) / (maximum - expected);
}

// mutual information over the arithmetic mean of entropies; identical
// partitions are exactly 1, and a zero-entropy side that differs scores 0
inline double nmi(const std::vector<int>& a, const std::vector<int>& b) {
    const auto c = detail::contingency(a, b);
    if (c.identical) return 1.0;
    double ha = 0.0, hb = 0.0, mi = 0.0;
    for (const double v : c.row)
        if (v > 0.0) ha -= (v / c.n) * std::log(v / c.n);
    for (const double v : c.col)
        if (v > 0.0) hb -= (v / c.n) * std::log(v / c.n);
    if (ha <= 0.0 || hb <= 0.0) return 0.0;
    for (std::size_t i = 0; i < c.row.size(); ++i)
        for (std::size_t j = 0; j < c.col.size(); ++j) {
            const double v = c.cells[i][j];
            if (v > 0.0) mi += (v / c.n) * std::log((c.n * v) / (c.row[i] * c.col[j]));
        }
    return mi / (0.5 * (ha + hb));
}

// ---------------------------------------------------------------------------
// End-to-end orchestration
// ---------------------------------------------------------------------------

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (a + 1) + 0xbf58476d1ce4e5b9ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline int resolve_k(const SpatialSlice& slice, const TrainConfig& cfg) {
    if (cfg.k_clusters != 0) return cfg.k_clusters;
    if (!slice.has_labels)
        throw ConfigError("cluster count required when the slice carries no labels");
    const auto k = static_cast<int>(slice.label_names.size());
    if (k < 2) throw ConfigError("ground-truth labels contain fewer than two classes");
    return k;
}

struct PipelineResult {
    TrainResult trained;
    ClusterResult clusters;
    double ari_value = std::numeric_limits<double>::quiet_NaN();
    double nmi_value = std::numeric_limits<double>::quiet_NaN();
};

inline PipelineResult run_pipeline(const PreparedData& p, const TrainConfig& cfg) {
    PipelineResult r;
    r.trained = train(p, cfg);
    const int k = resolve_k(p.slice, cfg);
    r.clusters = kmeans(r.trained.state.h, k, 20, derive_seed(cfg.seed, 0x6b, 0x11));
    if (p.slice.has_labels) {
        r.ari_value = ari(p.slice.labels, r.clusters.labels);
        r.nmi_value = nmi(p.slice.labels, r.clusters.labels);
    }
    return r;
}

// one training run per grid cell, each under a seed derived from the cell
inline DenseMatrix sweep(const SpatialSlice& slice, const std::vector<double>& lambda1_grid,
                         const std::vector<double>& lambda2_grid, const TrainConfig& base) {
    if (lambda1_grid.empty() || lambda2_grid.empty())
        throw ConfigError("sweep grids must be nonempty");
    for (const auto& grid : {lambda1_grid, lambda2_grid})
        for (const double v : grid)
            if (!(v >= 1e-3 && v <= 1e3))
                throw ConfigError("sweep grid values must lie in [1e-3, 1e3]");
    if (!slice.has_labels) throw ConfigError("sweep needs ground-truth labels");
    const PreparedData p = prepare(slice, base);
    DenseMatrix table(lambda1_grid.size(), lambda2_grid.size());
    for (std::size_t i = 0; i < lambda1_grid.size(); ++i)
        for (std::size_t j = 0; j < lambda2_grid.size(); ++j) {
            TrainConfig cfg = base;
            cfg.lambda1 = lambda1_grid[i];
            cfg.lambda2 = lambda2_grid[j];
            cfg.seed = derive_seed(base.seed, i, j);
            table(i, j) = run_pipeline(p, cfg).ari_value;
        }
    return table;
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

inline void write_embeddings_tsv(const std::string& path, const std::vector<std::string>& ids,
                                 const DenseMatrix& h) {
    if (ids.size() != h.rows()) throw DimensionError("spot id count does not match embedding rows");
    std::string out = "spot_id";
    for (std::size_t j = 0; j < h.cols(); ++j) out += "\tdim" + std::to_string(j);
    out += "\n";
    for (std::size_t i = 0; i < h.rows(); ++i) {
        out += ids[i];
        for (std::size_t j = 0; j < h.cols(); ++j) out += "\t" + format_g17(h(i, j));
        out += "\n";
    }
    write_text_file(path, out);
}

inline void write_cluster_tsv(const std::string& path, const std::vector<std::string>& ids,
                              const std::vector<int>& labels) {
    if (ids.size() != labels.size()) throw DimensionError("spot id count does not match labels");
    std::string out = "spot_id\tcluster\n";
    for (std::size_t i = 0; i < ids.size(); ++i)
        out += ids[i] + "\t" + std::to_string(labels[i]) + "\n";
    write_text_file(path, out);
}

} // namespace sphenic
