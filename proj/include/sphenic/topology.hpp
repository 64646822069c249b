#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <queue>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "data.hpp"
#include "error.hpp"
#include "graph.hpp"
#include "io.hpp"
#include "matrix.hpp"
#include "special.hpp"

namespace sphenic {

enum class PointClass { ordinary, extended };

struct DiagramPoint {
    double birth;
    double death;
    int dim; // 0 or 1
    PointClass cls;
};

struct ExtendedPersistenceDiagram {
    std::vector<DiagramPoint> points;
};

// canonical ordering so diagrams compare as multisets
inline std::vector<std::tuple<int, int, double, double>>
sorted_point_tuples(const ExtendedPersistenceDiagram& d) {
    std::vector<std::tuple<int, int, double, double>> out;
    out.reserve(d.points.size());
    for (const auto& p : d.points)
        out.push_back({p.dim, p.cls == PointClass::extended ? 1 : 0, p.birth, p.death});
    std::sort(out.begin(), out.end());
    return out;
}

namespace detail {

inline std::vector<int> xor_sorted(const std::vector<int>& a, const std::vector<int>& b) {
    std::vector<int> out;
    out.reserve(a.size() + b.size());
    std::size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] < b[j])
            out.push_back(a[i++]);
        else if (b[j] < a[i])
            out.push_back(b[j++]);
        else {
            ++i;
            ++j;
        }
    }
    while (i < a.size()) out.push_back(a[i++]);
    while (j < b.size()) out.push_back(b[j++]);
    return out;
}

struct LocalEdge {
    int u, v; // local vertex indices, u < v
    double w;
};

// Z/2 column reduction of one connected component's cone filtration.
//
// The filtration lists the component's cells in ascending order (value,
// dimension, index), then a cone apex, then coned copies of vertices and
// edges in descending order of their removal values. Coned copies of
// triangles are 3-cells; they can only affect dim-2 pairs, which this
// diagram drops, so they are omitted.
//
// Pair classes: ascending/ascending = ordinary; ascending birth with a
// coned death = extended (death reports the base cell's descending value);
// the apex pair and the single unpaired oldest vertex merge into the one
// extended dim-0 point per component. Pairs internal to the cone represent
// relative classes and are not reported.
inline void reduce_component(int nv, const std::vector<LocalEdge>& edges, bool fill_triangles,
                             ExtendedPersistenceDiagram& out) {
    const int ne = static_cast<int>(edges.size());

    std::vector<double> vasc(nv, 0.0), vdesc(nv, 0.0);
    std::vector<bool> touched(nv, false);
    for (const auto& e : edges) {
        for (int end : {e.u, e.v}) {
            if (!touched[end]) {
                vasc[end] = e.w;
                vdesc[end] = e.w;
                touched[end] = true;
            } else {
                vasc[end] = std::min(vasc[end], e.w);
                vdesc[end] = std::max(vdesc[end], e.w);
            }
        }
    }

    std::vector<std::array<int, 3>> tris; // edge index triples
    std::vector<double> tasc;
    if (fill_triangles) {
        std::map<std::pair<int, int>, int> eidx;
        for (int k = 0; k < ne; ++k) eidx[{edges[k].u, edges[k].v}] = k;
        std::vector<std::vector<int>> nbr(nv);
        for (const auto& e : edges) {
            nbr[e.u].push_back(e.v);
            nbr[e.v].push_back(e.u);
        }
        for (auto& l : nbr) std::sort(l.begin(), l.end());
        for (int k = 0; k < ne; ++k) {
            const int u = edges[k].u, v = edges[k].v;
            std::vector<int> common;
            std::set_intersection(nbr[u].begin(), nbr[u].end(), nbr[v].begin(), nbr[v].end(),
                                  std::back_inserter(common));
            for (int w : common) {
                if (w <= v) continue; // count each clique once, u < v < w
                const int e_uw = eidx.at({u, w});
                const int e_vw = eidx.at({v, w});
                tris.push_back({k, e_uw, e_vw});
                tasc.push_back(std::max({edges[k].w, edges[e_uw].w, edges[e_vw].w}));
            }
        }
    }
    const int nt = static_cast<int>(tris.size());

    // cell ids: [0,nv) vertices, [nv,nv+ne) edges, [nv+ne,nv+ne+nt) triangles,
    // then apex, coned vertices, coned edges
    const int n_asc = nv + ne + nt;
    const int id_omega = n_asc;
    const int id_cvert = n_asc + 1;
    const int id_cedge = id_cvert + nv;
    const int n_cells = id_cedge + ne;

    std::vector<int> order_asc(n_asc);
    for (int i = 0; i < n_asc; ++i) order_asc[i] = i;
    auto asc_key = [&](int id) -> std::tuple<double, int, int> {
        if (id < nv) return {vasc[id], 0, id};
        if (id < nv + ne) return {edges[static_cast<std::size_t>(id - nv)].w, 1, id - nv};
        return {tasc[static_cast<std::size_t>(id - nv - ne)], 2, id - nv - ne};
    };
    std::sort(order_asc.begin(), order_asc.end(),
              [&](int a, int b) { return asc_key(a) < asc_key(b); });

    std::vector<int> order_cone(nv + ne);
    for (int i = 0; i < nv + ne; ++i) order_cone[i] = i;
    auto cone_key = [&](int c) -> std::tuple<double, int, int> {
        if (c < nv) return {-vdesc[c], 0, c};
        return {-edges[static_cast<std::size_t>(c - nv)].w, 1, c - nv};
    };
    std::sort(order_cone.begin(), order_cone.end(),
              [&](int a, int b) { return cone_key(a) < cone_key(b); });

    std::vector<int> pos(n_cells, -1);
    {
        int p = 0;
        for (int id : order_asc) pos[id] = p++;
        pos[id_omega] = p++;
        for (int c : order_cone) pos[(c < nv ? id_cvert + c : id_cedge + (c - nv))] = p++;
    }

    // per-position metadata for classification
    enum Kind { kAsc = 0, kOmega = 1, kCone = 2 };
    std::vector<int> kind(n_cells), cdim(n_cells);
    std::vector<double> cval(n_cells, 0.0);
    std::vector<std::vector<int>> col(n_cells);
    auto at = [&](int id) -> int { return pos[id]; };
    for (int v = 0; v < nv; ++v) {
        const int p = at(v);
        kind[p] = kAsc;
        cdim[p] = 0;
        cval[p] = vasc[v];
    }
    for (int k = 0; k < ne; ++k) {
        const int p = at(nv + k);
        kind[p] = kAsc;
        cdim[p] = 1;
        cval[p] = edges[static_cast<std::size_t>(k)].w;
        col[p] = {at(edges[static_cast<std::size_t>(k)].u), at(edges[static_cast<std::size_t>(k)].v)};
        std::sort(col[p].begin(), col[p].end());
    }
    for (int k = 0; k < nt; ++k) {
        const int p = at(nv + ne + k);
        kind[p] = kAsc;
        cdim[p] = 2;
        cval[p] = tasc[static_cast<std::size_t>(k)];
        col[p] = {at(nv + tris[static_cast<std::size_t>(k)][0]),
                  at(nv + tris[static_cast<std::size_t>(k)][1]),
                  at(nv + tris[static_cast<std::size_t>(k)][2])};
        std::sort(col[p].begin(), col[p].end());
    }
    {
        const int p = at(id_omega);
        kind[p] = kOmega;
        cdim[p] = 0;
    }
    for (int v = 0; v < nv; ++v) {
        const int p = at(id_cvert + v);
        kind[p] = kCone;
        cdim[p] = 0;
        cval[p] = vdesc[v];
        col[p] = {at(v), at(id_omega)};
        std::sort(col[p].begin(), col[p].end());
    }
    for (int k = 0; k < ne; ++k) {
        const int p = at(id_cedge + k);
        kind[p] = kCone;
        cdim[p] = 1;
        cval[p] = edges[static_cast<std::size_t>(k)].w;
        col[p] = {at(nv + k), at(id_cvert + edges[static_cast<std::size_t>(k)].u),
                  at(id_cvert + edges[static_cast<std::size_t>(k)].v)};
        std::sort(col[p].begin(), col[p].end());
    }

    std::vector<int> pivot_owner(n_cells, -1);
    std::vector<std::pair<int, int>> pairs;
    for (int j = 0; j < n_cells; ++j) {
        auto& c = col[j];
        while (!c.empty()) {
            const int low = c.back();
            const int owner = pivot_owner[low];
            if (owner < 0) {
                pivot_owner[low] = j;
                pairs.push_back({low, j});
                break;
            }
            c = xor_sorted(c, col[owner]);
        }
    }

    double omega_death = 0.0;
    std::vector<bool> in_pair(n_cells, false);
    for (const auto& [i, j] : pairs) in_pair[static_cast<std::size_t>(i)] = in_pair[static_cast<std::size_t>(j)] = true;
    for (const auto& [i, j] : pairs) {
        if (kind[i] == kOmega) {
            omega_death = cval[j];
            continue;
        }
        if (kind[i] == kCone) continue; // relative class
        if (cdim[i] > 1) continue;
        if (kind[j] == kAsc)
            out.points.push_back({cval[i], cval[j], cdim[i], PointClass::ordinary});
        else
            out.points.push_back({cval[i], cval[j], cdim[i], PointClass::extended});
    }
    for (int p = 0; p < n_cells; ++p)
        if (!in_pair[p] && kind[p] == kAsc && cdim[p] == 0)
            out.points.push_back({cval[p], omega_death, 0, PointClass::extended});
}

struct ComponentSplit {
    std::vector<std::vector<int>> vertices;   // global ids per component
    std::vector<std::vector<LocalEdge>> edges; // local endpoints per component
};

inline ComponentSplit split_components(const WeightedGraph& g) {
    DisjointSet ds(g.n);
    for (const auto& e : g.edges) ds.unite(e.u, e.v);
    std::map<int, int> comp_of_root;
    ComponentSplit out;
    std::vector<int> local_id(static_cast<std::size_t>(g.n), -1);
    for (int v = 0; v < g.n; ++v) {
        const int r = ds.find(v);
        auto it = comp_of_root.find(r);
        if (it == comp_of_root.end()) {
            it = comp_of_root.emplace(r, static_cast<int>(out.vertices.size())).first;
            out.vertices.emplace_back();
            out.edges.emplace_back();
        }
        local_id[static_cast<std::size_t>(v)] = static_cast<int>(out.vertices[static_cast<std::size_t>(it->second)].size());
        out.vertices[static_cast<std::size_t>(it->second)].push_back(v);
    }
    for (const auto& e : g.edges) {
        const int c = comp_of_root.at(ds.find(e.u));
        out.edges[static_cast<std::size_t>(c)].push_back(
            {local_id[static_cast<std::size_t>(e.u)], local_id[static_cast<std::size_t>(e.v)], e.w});
    }
    return out;
}

} // namespace detail

// Textbook oracle: full cone-filtration column reduction, one cone per
// connected component. Costs grow cubically, hence the vertex cap.
inline ExtendedPersistenceDiagram brute_force_reduction(const WeightedGraph& g,
                                                        bool fill_triangles = true) {
    if (g.n > 12)
        throw TopologyError("reduction oracle capped at 12 vertices, got " + std::to_string(g.n));
    g.validate();
    ExtendedPersistenceDiagram out;
    const auto split = detail::split_components(g);
    for (std::size_t c = 0; c < split.vertices.size(); ++c)
        detail::reduce_component(static_cast<int>(split.vertices[c].size()), split.edges[c],
                                 fill_triangles, out);
    return out;
}

// Fast path. Dim-0 comes from a single ascending union-find sweep (elder
// rule, ties by vertex index) plus one extended point per component; any
// component containing a cycle delegates its dim-1 points to the reduction
// engine, which stays cheap because these graphs are small local windows.
inline ExtendedPersistenceDiagram extended_persistence(const WeightedGraph& g,
                                                       bool fill_triangles = true) {
    g.validate();
    ExtendedPersistenceDiagram out;
    if (g.n == 0) return out;
    const std::size_t n = static_cast<std::size_t>(g.n);

    std::vector<double> vasc(n, 0.0);
    std::vector<bool> touched(n, false);
    for (const auto& e : g.edges) {
        for (int end : {e.u, e.v}) {
            const auto idx = static_cast<std::size_t>(end);
            if (!touched[idx]) {
                vasc[idx] = e.w;
                touched[idx] = true;
            } else {
                vasc[idx] = std::min(vasc[idx], e.w);
            }
        }
    }

    // age = position among vertices sorted by (value, index)
    std::vector<int> by_age(n);
    for (std::size_t v = 0; v < n; ++v) by_age[v] = static_cast<int>(v);
    std::sort(by_age.begin(), by_age.end(), [&](int a, int b) {
        const auto ka = std::make_pair(vasc[static_cast<std::size_t>(a)], a);
        const auto kb = std::make_pair(vasc[static_cast<std::size_t>(b)], b);
        return ka < kb;
    });
    std::vector<int> age(n);
    for (std::size_t r = 0; r < n; ++r) age[static_cast<std::size_t>(by_age[r])] = static_cast<int>(r);

    std::vector<std::size_t> eorder(g.edges.size());
    for (std::size_t i = 0; i < eorder.size(); ++i) eorder[i] = i;
    std::sort(eorder.begin(), eorder.end(), [&](std::size_t a, std::size_t b) {
        if (g.edges[a].w != g.edges[b].w) return g.edges[a].w < g.edges[b].w;
        return a < b;
    });

    DisjointSet ds(g.n);
    std::vector<int> elder(n);
    std::vector<double> maxw(n, 0.0);
    std::vector<bool> has_cycle(n, false);
    for (std::size_t v = 0; v < n; ++v) elder[v] = static_cast<int>(v);
    for (std::size_t k : eorder) {
        const auto& e = g.edges[k];
        const int ru = ds.find(e.u), rv = ds.find(e.v);
        if (ru == rv) {
            has_cycle[static_cast<std::size_t>(ru)] = true;
            maxw[static_cast<std::size_t>(ru)] = e.w;
            continue;
        }
        const int eu = elder[static_cast<std::size_t>(ru)], ev = elder[static_cast<std::size_t>(rv)];
        const int older = age[static_cast<std::size_t>(eu)] < age[static_cast<std::size_t>(ev)] ? eu : ev;
        const int younger = older == eu ? ev : eu;
        out.points.push_back({vasc[static_cast<std::size_t>(younger)], e.w, 0, PointClass::ordinary});
        const bool cyc = has_cycle[static_cast<std::size_t>(ru)] || has_cycle[static_cast<std::size_t>(rv)];
        const int r = ds.unite(ru, rv);
        elder[static_cast<std::size_t>(r)] = older;
        maxw[static_cast<std::size_t>(r)] = e.w;
        has_cycle[static_cast<std::size_t>(r)] = cyc;
    }

    bool any_cycle = false;
    for (std::size_t v = 0; v < n; ++v) {
        if (ds.find(static_cast<int>(v)) == static_cast<int>(v)) {
            out.points.push_back({vasc[static_cast<std::size_t>(elder[v])], maxw[v], 0, PointClass::extended});
            any_cycle = any_cycle || has_cycle[v];
        }
    }

    if (any_cycle) {
        ExtendedPersistenceDiagram cyc_diag;
        const auto split = detail::split_components(g);
        for (std::size_t c = 0; c < split.vertices.size(); ++c) {
            if (split.edges[c].size() < split.vertices[c].size()) continue; // forest component
            detail::reduce_component(static_cast<int>(split.vertices[c].size()), split.edges[c],
                                     fill_triangles, cyc_diag);
        }
        for (const auto& p : cyc_diag.points)
            if (p.dim == 1) out.points.push_back(p);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Local filtrations
// ---------------------------------------------------------------------------

enum class LocalMode { spatial, expression };

struct LocalFiltration {
    WeightedGraph graph;
    std::vector<int> spots; // global spot ids of local vertices, ascending
};

// Window around one spot: vertices within spatial radius r of the seed (or
// within hop_cap hops of it in the spatial graph), edges induced from the
// chosen modality's graph. Expression edges additionally drop any pair whose
// spatial separation exceeds r, which is the spatial-constraint intersection.
inline LocalFiltration local_filtration(const DenseMatrix& coords, const WeightedGraph& gs,
                                        const WeightedGraph& gx, int seed_spot, LocalMode mode,
                                        double r, int hop_cap = 2, bool use_hops = false) {
    const int n = static_cast<int>(coords.rows());
    if (seed_spot < 0 || seed_spot >= n)
        throw TopologyError("seed spot " + std::to_string(seed_spot) + " out of range");
    if (!use_hops && !(r > 0.0)) throw TopologyError("local radius must be positive");
    if (use_hops && hop_cap < 1) throw TopologyError("hop cap must be at least 1");

    std::vector<int> member;
    if (use_hops) {
        std::vector<int> dist(static_cast<std::size_t>(n), -1);
        const auto adj = gs.adjacency();
        std::queue<int> q;
        dist[static_cast<std::size_t>(seed_spot)] = 0;
        q.push(seed_spot);
        while (!q.empty()) {
            const int v = q.front();
            q.pop();
            if (dist[static_cast<std::size_t>(v)] == hop_cap) continue;
            for (const auto& [u, w] : adj[static_cast<std::size_t>(v)]) {
                (void)w;
                if (dist[static_cast<std::size_t>(u)] < 0) {
                    dist[static_cast<std::size_t>(u)] = dist[static_cast<std::size_t>(v)] + 1;
                    q.push(u);
                }
            }
        }
        for (int v = 0; v < n; ++v)
            if (dist[static_cast<std::size_t>(v)] >= 0) member.push_back(v);
    } else {
        for (int v = 0; v < n; ++v)
            if (euclidean(coords, static_cast<std::size_t>(seed_spot), static_cast<std::size_t>(v)) <= r)
                member.push_back(v);
    }

    std::vector<int> local(static_cast<std::size_t>(n), -1);
    for (std::size_t i = 0; i < member.size(); ++i) local[static_cast<std::size_t>(member[i])] = static_cast<int>(i);

    LocalFiltration out;
    out.spots = member;
    out.graph.n = static_cast<int>(member.size());
    const WeightedGraph& src = mode == LocalMode::spatial ? gs : gx;
    for (const auto& e : src.edges) {
        const int lu = local[static_cast<std::size_t>(e.u)], lv = local[static_cast<std::size_t>(e.v)];
        if (lu < 0 || lv < 0) continue;
        if (mode == LocalMode::expression && std::isfinite(r) &&
            euclidean(coords, static_cast<std::size_t>(e.u), static_cast<std::size_t>(e.v)) > r)
            continue;
        out.graph.edges.push_back({std::min(lu, lv), std::max(lu, lv), e.w});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Persistence images
// ---------------------------------------------------------------------------

struct PersistenceImage {
    int resolution = 0;
    double birth_lo = 0.0, birth_hi = 0.0, death_lo = 0.0, death_hi = 0.0;
    double sigma_x = 0.0, sigma_y = 0.0;
    double weight_power = 1.0;
    DenseMatrix pixels; // rows = birth bins ascending, cols = death bins ascending
};

// Each point spreads an isotropic Gaussian integrated exactly over every
// pixel (normal-CDF differences), weighted by |birth - death|^p.
inline PersistenceImage persistence_image(const ExtendedPersistenceDiagram& epd, int resolution,
                                          double sigma_x, double sigma_y, double weight_power,
                                          double birth_lo, double birth_hi, double death_lo,
                                          double death_hi) {
    if (resolution < 1) throw ImageError("resolution must be at least 1");
    if (!(sigma_x > 0.0) || !(sigma_y > 0.0)) throw ImageError("sigma must be positive");
    if (birth_lo >= birth_hi || death_lo >= death_hi)
        throw ImageError("degenerate image bounds");
    PersistenceImage img;
    img.resolution = resolution;
    img.birth_lo = birth_lo;
    img.birth_hi = birth_hi;
    img.death_lo = death_lo;
    img.death_hi = death_hi;
    img.sigma_x = sigma_x;
    img.sigma_y = sigma_y;
    img.weight_power = weight_power;
    const auto P = static_cast<std::size_t>(resolution);
    img.pixels = DenseMatrix(P, P);
    const double dbx = (birth_hi - birth_lo) / resolution;
    const double ddy = (death_hi - death_lo) / resolution;
    std::vector<double> cb(P + 1), cd(P + 1);
    for (const auto& mu : epd.points) {
        const double f = std::pow(std::fabs(mu.birth - mu.death), weight_power);
        if (f == 0.0) continue;
        for (std::size_t i = 0; i <= P; ++i) {
            cb[i] = norm_cdf((birth_lo + dbx * static_cast<double>(i) - mu.birth) / sigma_x);
            cd[i] = norm_cdf((death_lo + ddy * static_cast<double>(i) - mu.death) / sigma_y);
        }
        for (std::size_t i = 0; i < P; ++i) {
            const double wb = cb[i + 1] - cb[i];
            for (std::size_t j = 0; j < P; ++j) img.pixels(i, j) += f * wb * (cd[j + 1] - cd[j]);
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// Per-spot image stacks
// ---------------------------------------------------------------------------

struct TopoConfig {
    double radius = 0.0; // 0 selects 2x the median nearest-neighbor distance
    int hop_cap = 2;
    bool use_hops = false;
    bool fill_triangles = true;
    bool global_mode = false; // one whole-slice diagram broadcast to every spot
    int resolution = 20;
    double sigma = 0.05;
    double weight_power = 1.0;
    double bound_lo = -0.1;
    double bound_hi = 1.1;
    int threads = 1;
};

struct EpiModality {
    std::vector<ExtendedPersistenceDiagram> diagrams; // raw values, one per spot
    DenseMatrix images;                               // n_spots x resolution^2, row-major pixels
    double norm_lo = 0.0, norm_hi = 1.0;              // affine map applied before imaging
};

struct EpiResult {
    EpiModality spatial;
    EpiModality expression;
    double radius_used = 0.0;
};

namespace detail {

inline void run_indexed(std::size_t count, int threads, const std::function<void(std::size_t)>& fn) {
    const int t = std::max(1, threads);
    if (t == 1 || count < 2) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    const std::size_t chunk = (count + static_cast<std::size_t>(t) - 1) / static_cast<std::size_t>(t);
    std::exception_ptr first_error;
    std::mutex err_mu;
    for (int w = 0; w < t; ++w) {
        const std::size_t lo = static_cast<std::size_t>(w) * chunk;
        const std::size_t hi = std::min(count, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&, lo, hi] {
            try {
                for (std::size_t i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

inline void normalize_and_image(EpiModality& m, const TopoConfig& cfg, int threads) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (const auto& d : m.diagrams)
        for (const auto& p : d.points) {
            lo = std::min({lo, p.birth, p.death});
            hi = std::max({hi, p.birth, p.death});
        }
    if (!(lo <= hi)) {
        lo = 0.0;
        hi = 1.0;
    }
    m.norm_lo = lo;
    m.norm_hi = hi;
    const double span = hi - lo;
    const auto P = static_cast<std::size_t>(cfg.resolution);
    m.images = DenseMatrix(m.diagrams.size(), P * P);
    run_indexed(m.diagrams.size(), threads, [&](std::size_t i) {
        ExtendedPersistenceDiagram norm;
        norm.points.reserve(m.diagrams[i].points.size());
        for (const auto& p : m.diagrams[i].points) {
            const double b = span > 0.0 ? (p.birth - lo) / span : 0.5;
            const double d = span > 0.0 ? (p.death - lo) / span : 0.5;
            norm.points.push_back({b, d, p.dim, p.cls});
        }
        PersistenceImage img =
            persistence_image(norm, cfg.resolution, cfg.sigma, cfg.sigma, cfg.weight_power,
                              cfg.bound_lo, cfg.bound_hi, cfg.bound_lo, cfg.bound_hi);
        for (std::size_t px = 0; px < P * P; ++px) m.images(i, px) = img.pixels[px];
    });
}

} // namespace detail

// Whole-slice pass: one local diagram per spot and modality, a shared
// min-max normalization per modality, then one image per diagram. The
// thread count changes wall time only, never the output bytes.
inline EpiResult epi_for_all_spots(const DenseMatrix& coords, const WeightedGraph& gs,
                                   const WeightedGraph& gx, const TopoConfig& cfg) {
    if (static_cast<int>(coords.rows()) != gs.n || gs.n != gx.n)
        throw DimensionError("coords/graph size mismatch: " + coords.shape_str() + " vs " +
                             std::to_string(gs.n) + " and " + std::to_string(gx.n));
    EpiResult out;
    const std::size_t n = coords.rows();
    out.radius_used = cfg.radius > 0.0 ? cfg.radius : 2.0 * median_nn_distance(coords);
    if (!(out.radius_used > 0.0)) out.radius_used = 1.0; // degenerate all-identical coords
    out.spatial.diagrams.resize(n);
    out.expression.diagrams.resize(n);

    if (cfg.global_mode) {
        WeightedGraph gx_masked;
        gx_masked.n = gx.n;
        for (const auto& e : gx.edges)
            if (euclidean(coords, static_cast<std::size_t>(e.u), static_cast<std::size_t>(e.v)) <=
                out.radius_used)
                gx_masked.edges.push_back(e);
        const ExtendedPersistenceDiagram ds = extended_persistence(gs, cfg.fill_triangles);
        const ExtendedPersistenceDiagram dx = extended_persistence(gx_masked, cfg.fill_triangles);
        for (std::size_t i = 0; i < n; ++i) {
            out.spatial.diagrams[i] = ds;
            out.expression.diagrams[i] = dx;
        }
    } else {
        detail::run_indexed(n, cfg.threads, [&](std::size_t i) {
            try {
                const LocalFiltration ls =
                    local_filtration(coords, gs, gx, static_cast<int>(i), LocalMode::spatial,
                                     out.radius_used, cfg.hop_cap, cfg.use_hops);
                out.spatial.diagrams[i] = extended_persistence(ls.graph, cfg.fill_triangles);
                const LocalFiltration lx =
                    local_filtration(coords, gs, gx, static_cast<int>(i), LocalMode::expression,
                                     out.radius_used, cfg.hop_cap, cfg.use_hops);
                out.expression.diagrams[i] = extended_persistence(lx.graph, cfg.fill_triangles);
            } catch (const std::exception& e) {
                throw TopologyError("spot " + std::to_string(i) + ": " + e.what());
            }
        });
    }
    detail::normalize_and_image(out.spatial, cfg, cfg.threads);
    detail::normalize_and_image(out.expression, cfg, cfg.threads);
    return out;
}

// TSV with columns birth, death, dim, class
inline std::string diagram_to_tsv(const ExtendedPersistenceDiagram& d) {
    std::string out = "birth\tdeath\tdim\tclass\n";
    for (const auto& p : d.points)
        out += format_g17(p.birth) + "\t" + format_g17(p.death) + "\t" + std::to_string(p.dim) +
               "\t" + (p.cls == PointClass::extended ? "extended" : "ordinary") + "\n";
    return out;
}

} // namespace sphenic
