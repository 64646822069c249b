#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "error.hpp"
#include "graph.hpp"
#include "io.hpp"
#include "matrix.hpp"
#include "rng.hpp"

namespace sphenic {

struct SpatialSlice {
    std::vector<std::string> spot_ids;
    std::vector<std::string> genes;
    DenseMatrix counts; // n_spots x n_genes, nonnegative integers at ingest
    DenseMatrix coords; // n_spots x 2
    bool has_labels = false;
    std::vector<int> labels; // dictionary codes, first-seen order
    std::vector<std::string> label_names;

    std::size_t n_spots() const { return spot_ids.size(); }
    std::size_t n_genes() const { return genes.size(); }
};

// ---------------------------------------------------------------------------
// TSV ingest / export
// ---------------------------------------------------------------------------

inline SpatialSlice load_slice(const std::string& counts_path, const std::string& coords_path,
                               const std::string& labels_path = "") {
    SpatialSlice slice;

    const std::vector<std::string> coord_lines = read_lines(coords_path);
    if (coord_lines.empty()) throw ParseError(coords_path + ": empty coordinates file");
    {
        const auto header = split_tab(coord_lines[0]);
        if (header.size() != 3)
            throw ParseError(coords_path + ": line 1: expected 3 columns (spot_id, x, y)");
    }
    std::unordered_map<std::string, std::size_t> spot_index;
    for (std::size_t li = 1; li < coord_lines.size(); ++li) {
        if (coord_lines[li].empty()) continue;
        const auto cells = split_tab(coord_lines[li]);
        if (cells.size() != 3)
            throw ParseError(coords_path + ": line " + std::to_string(li + 1) +
                             ": expected 3 columns");
        if (spot_index.count(cells[0]))
            throw IngestError(coords_path + ": duplicate spot id " + cells[0]);
        spot_index[cells[0]] = slice.spot_ids.size();
        slice.spot_ids.push_back(cells[0]);
    }
    const std::size_t n = slice.spot_ids.size();
    if (n == 0) throw IngestError(coords_path + ": no spots");
    slice.coords = DenseMatrix(n, 2);
    for (std::size_t li = 1, row = 0; li < coord_lines.size(); ++li) {
        if (coord_lines[li].empty()) continue;
        const auto cells = split_tab(coord_lines[li]);
        slice.coords(row, 0) = parse_double(cells[1], li + 1, "x coordinate");
        slice.coords(row, 1) = parse_double(cells[2], li + 1, "y coordinate");
        ++row;
    }

    const std::vector<std::string> count_lines = read_lines(counts_path);
    if (count_lines.empty()) throw ParseError(counts_path + ": empty counts file");
    {
        const auto header = split_tab(count_lines[0]);
        if (header.size() < 2) throw ParseError(counts_path + ": line 1: no gene columns");
        slice.genes.assign(header.begin() + 1, header.end());
    }
    const std::size_t g = slice.genes.size();
    slice.counts = DenseMatrix(n, g);
    std::vector<bool> filled(n, false);
    for (std::size_t li = 1; li < count_lines.size(); ++li) {
        if (count_lines[li].empty()) continue;
        const auto cells = split_tab(count_lines[li]);
        if (cells.size() != g + 1)
            throw ParseError(counts_path + ": line " + std::to_string(li + 1) + ": expected " +
                             std::to_string(g + 1) + " columns, got " + std::to_string(cells.size()));
        const auto it = spot_index.find(cells[0]);
        if (it == spot_index.end())
            throw IngestError("spot id " + cells[0] + " present in counts but missing from coordinates");
        if (filled[it->second]) throw IngestError(counts_path + ": duplicate spot id " + cells[0]);
        filled[it->second] = true;
        for (std::size_t j = 0; j < g; ++j) {
            const double v = parse_double(cells[j + 1], li + 1, "count");
            if (v < 0.0) throw IngestError(counts_path + ": line " + std::to_string(li + 1) +
                                           ": negative count for spot " + cells[0]);
            if (v != std::floor(v))
                throw ParseError(counts_path + ": line " + std::to_string(li + 1) +
                                 ": non-integer count '" + cells[j + 1] + "'");
            slice.counts(it->second, j) = v;
        }
    }
    for (std::size_t i = 0; i < n; ++i)
        if (!filled[i])
            throw IngestError("spot id " + slice.spot_ids[i] +
                              " present in coordinates but missing from counts");

    if (!labels_path.empty()) {
        const std::vector<std::string> label_lines = read_lines(labels_path);
        if (label_lines.empty()) throw ParseError(labels_path + ": empty labels file");
        std::unordered_map<std::string, std::string> by_spot;
        for (std::size_t li = 1; li < label_lines.size(); ++li) {
            if (label_lines[li].empty()) continue;
            const auto cells = split_tab(label_lines[li]);
            if (cells.size() != 2)
                throw ParseError(labels_path + ": line " + std::to_string(li + 1) +
                                 ": expected 2 columns");
            by_spot[cells[0]] = cells[1];
        }
        slice.labels.resize(n);
        std::unordered_map<std::string, int> codes;
        for (std::size_t i = 0; i < n; ++i) {
            const auto it = by_spot.find(slice.spot_ids[i]);
            if (it == by_spot.end())
                throw IngestError("spot id " + slice.spot_ids[i] + " missing from labels");
            auto cit = codes.find(it->second);
            if (cit == codes.end()) {
                cit = codes.emplace(it->second, static_cast<int>(slice.label_names.size())).first;
                slice.label_names.push_back(it->second);
            }
            slice.labels[i] = cit->second;
        }
        slice.has_labels = true;
    }
    return slice;
}

inline void write_counts_tsv(const std::string& path, const SpatialSlice& slice) {
    std::string out = "spot_id";
    for (const auto& gname : slice.genes) out += "\t" + gname;
    out += "\n";
    for (std::size_t i = 0; i < slice.n_spots(); ++i) {
        out += slice.spot_ids[i];
        for (std::size_t j = 0; j < slice.n_genes(); ++j)
            out += "\t" + format_g17(slice.counts(i, j));
        out += "\n";
    }
    write_text_file(path, out);
}

inline void write_coords_tsv(const std::string& path, const SpatialSlice& slice) {
    std::string out = "spot_id\tx\ty\n";
    for (std::size_t i = 0; i < slice.n_spots(); ++i)
        out += slice.spot_ids[i] + "\t" + format_g17(slice.coords(i, 0)) + "\t" +
               format_g17(slice.coords(i, 1)) + "\n";
    write_text_file(path, out);
}

inline void write_labels_tsv(const std::string& path, const SpatialSlice& slice) {
    if (!slice.has_labels) throw IoError("slice has no labels to write");
    std::string out = "spot_id\tlabel\n";
    for (std::size_t i = 0; i < slice.n_spots(); ++i)
        out += slice.spot_ids[i] + "\t" + slice.label_names[static_cast<std::size_t>(slice.labels[i])] +
               "\n";
    write_text_file(path, out);
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

struct PreprocessConfig {
    std::size_t n_hvg = 3000;
    double target_library = 0.0; // 0 = median library size
    bool log1p = true;
};

struct Preprocessed {
    DenseMatrix normalized; // n x h
    DenseMatrix raw_hvg;    // n x h, counts restricted to selected genes
    std::vector<double> size_factors;
    std::vector<std::size_t> hvg_indices;
    std::vector<std::string> hvg_genes;
};

inline double median_of(std::vector<double> v) {
    if (v.empty()) throw DomainError("median of empty vector");
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// Dispersion = variance / mean per gene; top genes kept in dispersion order.
// If fewer genes than requested are available the whole panel is kept.
inline Preprocessed preprocess(const SpatialSlice& slice, const PreprocessConfig& cfg) {
    const std::size_t n = slice.counts.rows();
    const std::size_t g = slice.counts.cols();
    if (n == 0 || g == 0) throw PreprocessError("empty counts matrix");

    std::vector<double> library(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < g; ++j) library[i] += slice.counts(i, j);
    std::string zero_spots;
    for (std::size_t i = 0; i < n; ++i)
        if (library[i] <= 0.0) zero_spots += (zero_spots.empty() ? "" : ", ") + slice.spot_ids[i];
    if (!zero_spots.empty())
        throw PreprocessError("all-zero spots cannot be normalized: " + zero_spots);

    std::vector<double> mean(g, 0.0), var(g, 0.0);
    for (std::size_t j = 0; j < g; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += slice.counts(i, j);
        mean[j] = s / static_cast<double>(n);
    }
    for (std::size_t j = 0; j < g; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = slice.counts(i, j) - mean[j];
            s += d * d;
        }
        var[j] = s / static_cast<double>(n);
    }

    std::vector<std::size_t> order(g);
    for (std::size_t j = 0; j < g; ++j) order[j] = j;
    std::vector<double> dispersion(g, 0.0);
    for (std::size_t j = 0; j < g; ++j) dispersion[j] = mean[j] > 0.0 ? var[j] / mean[j] : 0.0;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (dispersion[a] != dispersion[b]) return dispersion[a] > dispersion[b];
        return a < b;
    });

    std::size_t keep = std::min(cfg.n_hvg, g);
    std::size_t eligible = 0;
    for (std::size_t j = 0; j < g; ++j)
        if (var[j] > 0.0) ++eligible;
    keep = std::min(keep, std::max<std::size_t>(eligible, 0));
    if (keep < 2) throw PreprocessError("fewer than 2 genes with nonzero variance");

    Preprocessed out;
    out.hvg_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
    std::sort(out.hvg_indices.begin(), out.hvg_indices.end()); // keep original gene order
    for (std::size_t j : out.hvg_indices) out.hvg_genes.push_back(slice.genes[j]);

    const double target = cfg.target_library > 0.0 ? cfg.target_library : median_of(library);
    out.size_factors.resize(n);
    const double median_lib = median_of(library);
    for (std::size_t i = 0; i < n; ++i) out.size_factors[i] = library[i] / median_lib;

    out.raw_hvg = DenseMatrix(n, keep);
    out.normalized = DenseMatrix(n, keep);
    for (std::size_t i = 0; i < n; ++i) {
        const double scale = target / library[i];
        for (std::size_t jj = 0; jj < keep; ++jj) {
            const double raw = slice.counts(i, out.hvg_indices[jj]);
            out.raw_hvg(i, jj) = raw;
            const double scaled = raw * scale;
            out.normalized(i, jj) = cfg.log1p ? std::log1p(scaled) : scaled;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Neighborhood graphs
// ---------------------------------------------------------------------------

namespace detail {

// k nearest neighbors by the given pairwise distance, union-symmetrized:
// the edge stays if either endpoint selected the other.
template <class DistFn>
WeightedGraph knn_union_graph(std::size_t n, std::size_t k, DistFn&& dist) {
    if (k == 0) throw ConfigError("k must be positive");
    if (k >= n) throw ConfigError("k = " + std::to_string(k) + " must be below n = " + std::to_string(n));
    std::map<std::pair<int, int>, double> picked;
    std::vector<std::pair<double, std::size_t>> cand(n);
    for (std::size_t i = 0; i < n; ++i) {
        cand.clear();
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            cand.push_back({dist(i, j), j});
        }
        std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first < b.first;
            return a.second < b.second;
        });
        for (std::size_t t = 0; t < k; ++t) {
            const int u = static_cast<int>(std::min(i, cand[t].second));
            const int v = static_cast<int>(std::max(i, cand[t].second));
            picked.emplace(std::make_pair(u, v), cand[t].first);
        }
    }
    WeightedGraph gr;
    gr.n = static_cast<int>(n);
    for (const auto& [uv, w] : picked) gr.edges.push_back({uv.first, uv.second, w});
    return gr;
}

} // namespace detail

inline double euclidean(const DenseMatrix& coords, std::size_t i, std::size_t j) {
    const double dx = coords(i, 0) - coords(j, 0);
    const double dy = coords(i, 1) - coords(j, 1);
    return std::sqrt(dx * dx + dy * dy);
}

inline WeightedGraph build_spatial_graph(const DenseMatrix& coords, std::size_t k) {
    if (coords.cols() != 2) throw DimensionError("coordinates must be n x 2, got " + coords.shape_str());
    return detail::knn_union_graph(coords.rows(), k,
                                   [&](std::size_t i, std::size_t j) { return euclidean(coords, i, j); });
}

// Deterministic power iteration with deflation on the smaller Gram side.
// Columns of the input are mean-centered first. Output is n x ncomp_effective.
inline DenseMatrix pca_project(const DenseMatrix& X, std::size_t ncomp) {
    const std::size_t n = X.rows(), g = X.cols();
    if (n == 0 || g == 0) throw DimensionError("pca_project: empty input");
    DenseMatrix Xc = X;
    for (std::size_t j = 0; j < g; ++j) {
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i) m += Xc(i, j);
        m /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) Xc(i, j) -= m;
    }
    const bool gram_side = n <= g; // iterate on the smaller symmetric matrix
    const std::size_t dim = gram_side ? n : g;
    DenseMatrix S(dim, dim);
    if (gram_side) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i; j < n; ++j) {
                double s = 0.0;
                for (std::size_t t = 0; t < g; ++t) s += Xc(i, t) * Xc(j, t);
                S(i, j) = S(j, i) = s;
            }
    } else {
        for (std::size_t i = 0; i < g; ++i)
            for (std::size_t j = i; j < g; ++j) {
                double s = 0.0;
                for (std::size_t t = 0; t < n; ++t) s += Xc(t, i) * Xc(t, j);
                S(i, j) = S(j, i) = s;
            }
    }
    const std::size_t want = std::min(ncomp, dim);
    std::vector<std::vector<double>> vecs;
    double first_eig = 0.0;
    for (std::size_t c = 0; c < want; ++c) {
        std::vector<double> w(dim);
        for (std::size_t i = 0; i < dim; ++i)
            w[i] = 1.0 + 0.001 * static_cast<double>((i * 2654435761u + c * 97u) % 1000);
        double eig = 0.0;
        bool dead = false;
        for (int iter = 0; iter < 1000; ++iter) {
            std::vector<double> y(dim, 0.0);
            for (std::size_t i = 0; i < dim; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < dim; ++j) s += S(i, j) * w[j];
                y[i] = s;
            }
            // keep the iterate exactly orthogonal to accepted components so
            // clustered eigenvalues cannot leak earlier directions back in
            for (const auto& u : vecs) {
                double dot = 0.0;
                for (std::size_t i = 0; i < dim; ++i) dot += y[i] * u[i];
                for (std::size_t i = 0; i < dim; ++i) y[i] -= dot * u[i];
            }
            double norm = 0.0;
            for (double v : y) norm += v * v;
            norm = std::sqrt(norm);
            if (norm == 0.0) {
                dead = true;
                break;
            }
            for (auto& v : y) v /= norm;
            double delta = 0.0;
            for (std::size_t i = 0; i < dim; ++i) delta = std::max(delta, std::fabs(y[i] - w[i]));
            // Gram matrices are PSD so the iterate cannot oscillate in sign
            w = std::move(y);
            eig = norm;
            if (delta < 1e-13 && iter > 2) break;
        }
        if (dead) break;
        if (c == 0) first_eig = eig;
        if (eig <= 1e-12 || (first_eig > 0.0 && eig < 1e-12 * first_eig)) break; // rank exhausted
        // canonical sign: largest-magnitude entry positive
        std::size_t arg = 0;
        for (std::size_t i = 1; i < dim; ++i)
            if (std::fabs(w[i]) > std::fabs(w[arg])) arg = i;
        if (w[arg] < 0.0)
            for (auto& v : w) v = -v;
        vecs.push_back(w);
        for (std::size_t i = 0; i < dim; ++i)
            for (std::size_t j = 0; j < dim; ++j) S(i, j) -= eig * w[i] * w[j];
    }
    const std::size_t found = vecs.size();
    DenseMatrix proj(n, std::max<std::size_t>(found, 1));
    if (found == 0) return DenseMatrix(n, 1); // rank-0 input projects to zeros
    if (gram_side) {
        // eigvec u of X X^T: the score column is u * norm(X^T u) up to scale;
        // project through the principal axis v = X^T u / ||X^T u||.
        for (std::size_t c = 0; c < found; ++c) {
            std::vector<double> axis(g, 0.0);
            for (std::size_t t = 0; t < g; ++t) {
                double s = 0.0;
                for (std::size_t i = 0; i < n; ++i) s += Xc(i, t) * vecs[c][i];
                axis[t] = s;
            }
            double norm = 0.0;
            for (double v : axis) norm += v * v;
            norm = std::sqrt(norm);
            if (norm == 0.0) continue;
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0.0;
                for (std::size_t t = 0; t < g; ++t) s += Xc(i, t) * axis[t];
                proj(i, c) = s / norm;
            }
        }
    } else {
        for (std::size_t c = 0; c < found; ++c)
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0.0;
                for (std::size_t t = 0; t < g; ++t) s += Xc(i, t) * vecs[c][t];
                proj(i, c) = s;
            }
    }
    return proj;
}

inline double cosine_dissimilarity(const DenseMatrix& m, std::size_t i, std::size_t j) {
    double dot = 0.0, ni = 0.0, nj = 0.0;
    for (std::size_t t = 0; t < m.cols(); ++t) {
        dot += m(i, t) * m(j, t);
        ni += m(i, t) * m(i, t);
        nj += m(j, t) * m(j, t);
    }
    if (ni == 0.0 || nj == 0.0) return 1.0; // zero vector: treat as orthogonal
    double d = 1.0 - dot / (std::sqrt(ni) * std::sqrt(nj));
    return std::min(2.0, std::max(0.0, d));
}

inline WeightedGraph build_expression_graph(const DenseMatrix& normalized, std::size_t k,
                                            std::size_t pca_components,
                                            const std::vector<std::string>* spot_ids = nullptr) {
    DenseMatrix proj = pca_project(normalized, pca_components);
    for (std::size_t i = 0; i < proj.rows(); ++i) {
        double norm = 0.0;
        for (std::size_t j = 0; j < proj.cols(); ++j) norm += proj(i, j) * proj(i, j);
        if (norm == 0.0) {
            const std::string name = spot_ids ? (*spot_ids)[i] : std::to_string(i);
            throw GraphError("spot " + name + " projects to the zero vector; cosine undefined");
        }
    }
    return detail::knn_union_graph(proj.rows(), k, [&](std::size_t i, std::size_t j) {
        return cosine_dissimilarity(proj, i, j);
    });
}

inline double median_nn_distance(const DenseMatrix& coords) {
    const std::size_t n = coords.rows();
    if (n < 2) return 0.0;
    std::vector<double> nn(n);
    for (std::size_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) best = std::min(best, euclidean(coords, i, j));
        nn[i] = best;
    }
    return median_of(nn);
}

// ---------------------------------------------------------------------------
// Synthetic slices
// ---------------------------------------------------------------------------

struct SynthConfig {
    int domains = 3;
    int spots_per = 100;
    int genes = 200;
    std::uint64_t seed = 7;
    double pi = 0.1;                // zero-inflation probability
    double theta = 2.0;             // negative-binomial dispersion
    double spatial_spread = 1.0;    // per-domain point-cloud sigma
    double domain_radius = 10.0;    // domain centers sit on a circle of this radius
    double program_strength = 2.0;  // log-scale boost for domain marker genes
    double baseline_log_mean = 0.7;
    double baseline_log_sd = 0.4;
    double libsize_log_sd = 0.25;
};

inline SynthConfig synth_easy() { return SynthConfig{}; }

inline SynthConfig synth_noisy() {
    SynthConfig cfg;
    cfg.pi = 0.45;
    cfg.theta = 0.8;
    cfg.spatial_spread = 2.4;
    cfg.domain_radius = 4.0;
    cfg.program_strength = 0.8;
    return cfg;
}

struct SynthResult {
    SpatialSlice slice;
    DenseMatrix true_means; // n x g generative NB means (before zero inflation)
};

// Gaussian domain blobs with block marker programs; counts are
// zero-inflated gamma-Poisson draws, fully determined by cfg.seed.
inline SynthResult synth_slice(const SynthConfig& cfg) {
    if (cfg.domains < 1 || cfg.spots_per < 1 || cfg.genes < 2)
        throw ConfigError("synth_slice: domains and spots_per must be >= 1, genes >= 2");
    if (cfg.pi < 0.0 || cfg.pi >= 1.0) throw ConfigError("synth_slice: pi must lie in [0,1)");
    if (cfg.theta <= 0.0) throw ConfigError("synth_slice: theta must be positive");
    Rng rng(cfg.seed);
    const std::size_t n = static_cast<std::size_t>(cfg.domains) * static_cast<std::size_t>(cfg.spots_per);
    const std::size_t g = static_cast<std::size_t>(cfg.genes);

    std::vector<double> base_log(g);
    for (std::size_t j = 0; j < g; ++j)
        base_log[j] = cfg.baseline_log_mean + cfg.baseline_log_sd * rng.normal();

    const std::size_t block = std::max<std::size_t>(1, g / (2 * static_cast<std::size_t>(cfg.domains)));

    SynthResult res;
    res.slice.genes.resize(g);
    for (std::size_t j = 0; j < g; ++j) res.slice.genes[j] = "g" + std::to_string(j);
    res.slice.counts = DenseMatrix(n, g);
    res.slice.coords = DenseMatrix(n, 2);
    res.true_means = DenseMatrix(n, g);
    res.slice.labels.resize(n);
    res.slice.has_labels = true;
    for (int d = 0; d < cfg.domains; ++d) res.slice.label_names.push_back("domain" + std::to_string(d));

    const double tau = 6.283185307179586;
    std::size_t row = 0;
    for (int d = 0; d < cfg.domains; ++d) {
        const double cx = cfg.domains == 1 ? 0.0 : cfg.domain_radius * std::cos(tau * d / cfg.domains);
        const double cy = cfg.domains == 1 ? 0.0 : cfg.domain_radius * std::sin(tau * d / cfg.domains);
        for (int s = 0; s < cfg.spots_per; ++s, ++row) {
            res.slice.spot_ids.push_back("s" + std::to_string(row));
            res.slice.labels[row] = d;
            res.slice.coords(row, 0) = cx + cfg.spatial_spread * rng.normal();
            res.slice.coords(row, 1) = cy + cfg.spatial_spread * rng.normal();
            const double spot_scale = std::exp(cfg.libsize_log_sd * rng.normal());
            const std::size_t b0 = static_cast<std::size_t>(d) * block;
            for (std::size_t j = 0; j < g; ++j) {
                const bool marker = j >= b0 && j < b0 + block;
                const double mu = spot_scale * std::exp(base_log[j] + (marker ? cfg.program_strength : 0.0));
                res.true_means(row, j) = mu;
                double x = 0.0;
                if (rng.uniform() >= cfg.pi) {
                    const double lambda = rng.gamma(cfg.theta, mu / cfg.theta);
                    x = static_cast<double>(rng.poisson(lambda));
                }
                res.slice.counts(row, j) = x;
            }
        }
    }
    return res;
}

} // namespace sphenic
