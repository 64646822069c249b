#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <unistd.h>
#include <set>
#include <string>
#include <vector>

#include "sphenic/data.hpp"

using namespace sphenic;

namespace {

struct TmpDir {
    std::filesystem::path path;
    TmpDir() {
        path = std::filesystem::temp_directory_path() /
               ("sphenic_data_test_" + std::to_string(::getpid()));
        std::filesystem::create_directories(path);
    }
    ~TmpDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

SpatialSlice tiny_slice() {
    SpatialSlice s;
    s.spot_ids = {"a", "b", "c"};
    s.genes = {"g0", "g1"};
    s.counts = DenseMatrix::from_rows({{1, 2}, {3, 4}, {5, 6}});
    s.coords = DenseMatrix::from_rows({{0, 0}, {1, 0}, {0, 1}});
    return s;
}

// brute-force union kNN membership oracle
bool in_knn(const std::vector<std::vector<double>>& d, std::size_t i, std::size_t j, std::size_t k) {
    std::vector<std::pair<double, std::size_t>> cand;
    for (std::size_t t = 0; t < d.size(); ++t)
        if (t != i) cand.push_back({d[i][t], t});
    std::stable_sort(cand.begin(), cand.end());
    for (std::size_t t = 0; t < k; ++t)
        if (cand[t].second == j) return true;
    return false;
}

} // namespace

TEST_CASE("load_slice round-trips TSV fixtures and orders spots by the coords file") {
    TmpDir tmp;
    write_text_file(tmp.file("counts.tsv"),
                    "spot_id\tgA\tgB\tgC\n"
                    "s2\t7\t8\t9\n"
                    "s1\t1\t2\t3\n"
                    "s3\t4\t0\t6\n");
    write_text_file(tmp.file("coords.tsv"),
                    "spot_id\tx\ty\n"
                    "s1\t0.5\t1.5\n"
                    "s2\t2.5\t3.5\n"
                    "s3\t4.5\t5.5\n");
    write_text_file(tmp.file("labels.tsv"),
                    "spot_id\tlabel\n"
                    "s1\ttumor\n"
                    "s2\tstroma\n"
                    "s3\ttumor\n");

    SpatialSlice s = load_slice(tmp.file("counts.tsv"), tmp.file("coords.tsv"), tmp.file("labels.tsv"));
    REQUIRE(s.n_spots() == 3);
    REQUIRE(s.n_genes() == 3);
    CHECK(s.spot_ids == std::vector<std::string>{"s1", "s2", "s3"});
    CHECK(s.genes == std::vector<std::string>{"gA", "gB", "gC"});
    // counts rows reordered to coords order
    CHECK(s.counts(0, 0) == 1.0);
    CHECK(s.counts(1, 0) == 7.0);
    CHECK(s.counts(2, 2) == 6.0);
    CHECK(s.coords(1, 1) == 3.5);
    REQUIRE(s.has_labels);
    CHECK(s.label_names == std::vector<std::string>{"tumor", "stroma"}); // first-seen order
    CHECK(s.labels == std::vector<int>{0, 1, 0});
}

TEST_CASE("load_slice without labels disables them") {
    TmpDir tmp;
    write_text_file(tmp.file("counts.tsv"), "spot_id\tg\ns1\t1\ns2\t2\n");
    write_text_file(tmp.file("coords.tsv"), "spot_id\tx\ty\ns1\t0\t0\ns2\t1\t1\n");
    SpatialSlice s = load_slice(tmp.file("counts.tsv"), tmp.file("coords.tsv"));
    CHECK_FALSE(s.has_labels);
    CHECK(s.labels.empty());
}

TEST_CASE("load_slice ingest and parse errors") {
    TmpDir tmp;
    write_text_file(tmp.file("coords.tsv"), "spot_id\tx\ty\ns1\t0\t0\ns2\t1\t1\n");

    SECTION("spot in coords but not in counts") {
        write_text_file(tmp.file("counts.tsv"), "spot_id\tg\ns1\t1\n");
        CHECK_THROWS_MATCHES(load_slice(tmp.file("counts.tsv"), tmp.file("coords.tsv")), IngestError,
                             Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("s2")));
    }
    SECTION("spot in counts but not in coords") {
        write_text_file(tmp.file("counts.tsv"), "spot_id\tg\ns1\t1\ns2\t2\nghost\t3\n");
        CHECK_THROWS_MATCHES(load_slice(tmp.file("counts.tsv"), tmp.file("coords.tsv")), IngestError,
                             Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("ghost")));
    }
    SECTION("non-integer count reports the line number") {
        write_text_file(tmp.file("counts.tsv"), "spot_id\tg\ns1\t1\ns2\t2.5\n");
        CHECK_THROWS_MATCHES(load_slice(tmp.file("counts.tsv"), tmp.file("coords.tsv")), ParseError,
                             Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("line 3")));
    }
    SECTION("negative count rejected") {
        write_text_file(tmp.file("counts.tsv"), "spot_id\tg\ns1\t1\ns2\t-3\n");
        CHECK_THROWS_AS(load_slice(tmp.file("counts.tsv"), tmp.file("coords.tsv")), IngestError);
    }
    SECTION("unparseable coordinate reports the line number") {
        write_text_file(tmp.file("counts.tsv"), "spot_id\tg\ns1\t1\ns2\t2\n");
        write_text_file(tmp.file("bad_coords.tsv"), "spot_id\tx\ty\ns1\t0\t0\ns2\toops\t1\n");
        CHECK_THROWS_MATCHES(load_slice(tmp.file("counts.tsv"), tmp.file("bad_coords.tsv")), ParseError,
                             Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("line 3")));
    }
    SECTION("duplicate spot id rejected") {
        write_text_file(tmp.file("dup_coords.tsv"), "spot_id\tx\ty\ns1\t0\t0\ns1\t1\t1\n");
        write_text_file(tmp.file("counts.tsv"), "spot_id\tg\ns1\t1\n");
        CHECK_THROWS_AS(load_slice(tmp.file("counts.tsv"), tmp.file("dup_coords.tsv")), IngestError);
    }
    SECTION("labels missing a spot") {
        write_text_file(tmp.file("counts.tsv"), "spot_id\tg\ns1\t1\ns2\t2\n");
        write_text_file(tmp.file("labels.tsv"), "spot_id\tlabel\ns1\tA\n");
        CHECK_THROWS_MATCHES(
            load_slice(tmp.file("counts.tsv"), tmp.file("coords.tsv"), tmp.file("labels.tsv")),
            IngestError,
            Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("s2")));
    }
}

TEST_CASE("slice writers round-trip through the loader") {
    TmpDir tmp;
    SynthConfig cfg = synth_easy();
    cfg.domains = 2;
    cfg.spots_per = 5;
    cfg.genes = 7;
    SynthResult res = synth_slice(cfg);
    write_counts_tsv(tmp.file("c.tsv"), res.slice);
    write_coords_tsv(tmp.file("xy.tsv"), res.slice);
    write_labels_tsv(tmp.file("lab.tsv"), res.slice);
    SpatialSlice back = load_slice(tmp.file("c.tsv"), tmp.file("xy.tsv"), tmp.file("lab.tsv"));
    REQUIRE(back.n_spots() == res.slice.n_spots());
    REQUIRE(back.n_genes() == res.slice.n_genes());
    for (std::size_t i = 0; i < back.counts.size(); ++i) {
        CHECK(back.counts[i] == res.slice.counts[i]);
        // coords serialized with 17 significant digits reparse bit-identically
    }
    for (std::size_t i = 0; i < back.coords.size(); ++i)
        CHECK(back.coords[i] == res.slice.coords[i]);
    CHECK(back.labels == res.slice.labels);
}

TEST_CASE("preprocess size factors") {
    SECTION("equal libraries give unit size factors") {
        SpatialSlice s = tiny_slice();
        s.counts = DenseMatrix::from_rows({{2, 3}, {3, 2}, {2, 3}});
        PreprocessConfig cfg;
        cfg.n_hvg = 2;
        cfg.log1p = false;
        Preprocessed p = preprocess(s, cfg);
        for (double f : p.size_factors) CHECK(f == 1.0);
    }
    SECTION("spot with double the median library gets factor 2") {
        SpatialSlice s = tiny_slice();
        s.counts = DenseMatrix::from_rows({{1, 3}, {3, 1}, {6, 2}});
        PreprocessConfig cfg;
        cfg.n_hvg = 2;
        Preprocessed p = preprocess(s, cfg);
        CHECK(p.size_factors[0] == 1.0);
        CHECK(p.size_factors[1] == 1.0);
        CHECK(p.size_factors[2] == 2.0);
    }
}

TEST_CASE("preprocess HVG selection matches an independent dispersion oracle") {
    // 5 genes engineered with distinct dispersions
    SpatialSlice s;
    s.spot_ids = {"a", "b", "c", "d"};
    s.genes = {"g0", "g1", "g2", "g3", "g4"};
    s.coords = DenseMatrix(4, 2);
    s.counts = DenseMatrix::from_rows({{1, 10, 5, 2, 4},
                                       {1, 30, 5, 8, 4},
                                       {1, 10, 6, 2, 5},
                                       {1, 50, 5, 8, 3}});
    PreprocessConfig cfg;
    cfg.n_hvg = 3;
    Preprocessed p = preprocess(s, cfg);
    REQUIRE(p.hvg_indices.size() == 3);

    // independent moment computation
    std::vector<std::pair<double, std::size_t>> disp;
    for (std::size_t j = 0; j < 5; ++j) {
        double m = 0, v = 0;
        for (std::size_t i = 0; i < 4; ++i) m += s.counts(i, j);
        m /= 4;
        for (std::size_t i = 0; i < 4; ++i) v += (s.counts(i, j) - m) * (s.counts(i, j) - m);
        v /= 4;
        disp.push_back({m > 0 ? v / m : 0.0, j});
    }
    std::sort(disp.begin(), disp.end(), [](auto& a, auto& b) { return a.first > b.first; });
    std::set<std::size_t> expect{disp[0].second, disp[1].second, disp[2].second};
    std::set<std::size_t> got(p.hvg_indices.begin(), p.hvg_indices.end());
    CHECK(got == expect);
    // raw counts restricted to the same genes, original values
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t jj = 0; jj < 3; ++jj)
            CHECK(p.raw_hvg(i, jj) == s.counts(i, p.hvg_indices[jj]));
    CHECK(p.hvg_genes.size() == 3);
}

TEST_CASE("preprocess normalizes libraries to the target and applies log1p") {
    SpatialSlice s = tiny_slice();
    s.counts = DenseMatrix::from_rows({{1, 3}, {6, 2}, {5, 5}});
    PreprocessConfig cfg;
    cfg.n_hvg = 2;
    cfg.target_library = 100.0;
    cfg.log1p = false;
    Preprocessed p = preprocess(s, cfg);
    for (std::size_t i = 0; i < 3; ++i) {
        double lib = p.normalized(i, 0) + p.normalized(i, 1);
        CHECK_THAT(lib, Catch::Matchers::WithinAbs(100.0, 1e-9));
    }
    cfg.log1p = true;
    Preprocessed q = preprocess(s, cfg);
    for (std::size_t i = 0; i < p.normalized.size(); ++i)
        CHECK(q.normalized[i] == std::log1p(p.normalized[i]));
}

TEST_CASE("preprocess is idempotent on normalized input with log off") {
    Rng rng(41);
    SpatialSlice s;
    const std::size_t n = 12, g = 9;
    for (std::size_t i = 0; i < n; ++i) s.spot_ids.push_back("s" + std::to_string(i));
    for (std::size_t j = 0; j < g; ++j) s.genes.push_back("g" + std::to_string(j));
    s.coords = DenseMatrix(n, 2);
    s.counts = DenseMatrix(n, g);
    for (std::size_t i = 0; i < s.counts.size(); ++i)
        s.counts[i] = static_cast<double>(rng.uniform_int(40) + 1);
    PreprocessConfig cfg;
    cfg.n_hvg = g;
    cfg.log1p = false;
    Preprocessed once = preprocess(s, cfg);
    SpatialSlice s2 = s;
    s2.counts = once.normalized;
    Preprocessed twice = preprocess(s2, cfg);
    REQUIRE(twice.normalized.rows() == once.normalized.rows());
    REQUIRE(twice.normalized.cols() == once.normalized.cols());
    for (std::size_t i = 0; i < once.normalized.size(); ++i)
        CHECK_THAT(twice.normalized[i], Catch::Matchers::WithinRel(once.normalized[i], 1e-12));
    for (double f : twice.size_factors) CHECK_THAT(f, Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("preprocess rejects all-zero spots listing their ids") {
    SpatialSlice s = tiny_slice();
    s.counts = DenseMatrix::from_rows({{0, 0}, {3, 4}, {0, 0}});
    PreprocessConfig cfg;
    cfg.n_hvg = 2;
    CHECK_THROWS_MATCHES(preprocess(s, cfg), PreprocessError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("a") &&
                             Catch::Matchers::ContainsSubstring("c")));
}

TEST_CASE("preprocess caps the HVG count at the number of informative genes") {
    SpatialSlice s = tiny_slice();
    // gene 0 constant: zero variance, ineligible
    s.counts = DenseMatrix::from_rows({{5, 1}, {5, 9}, {5, 2}});
    s.genes = {"flat", "vary"};
    PreprocessConfig cfg;
    cfg.n_hvg = 2;
    CHECK_THROWS_AS(preprocess(s, cfg), PreprocessError); // only 1 eligible gene

    SpatialSlice t;
    t.spot_ids = {"a", "b"};
    t.genes = {"flat", "v1", "v2"};
    t.coords = DenseMatrix(2, 2);
    t.counts = DenseMatrix::from_rows({{5, 1, 8}, {5, 9, 2}});
    cfg.n_hvg = 3;
    Preprocessed p = preprocess(t, cfg);
    CHECK(p.hvg_indices == std::vector<std::size_t>{1, 2}); // flat gene dropped
}

TEST_CASE("build_spatial_graph fixtures") {
    SECTION("three collinear points, k=1") {
        DenseMatrix c = DenseMatrix::from_rows({{0, 0}, {1, 0}, {3, 0}});
        WeightedGraph g = build_spatial_graph(c, 1);
        g.validate();
        REQUIRE(g.edges.size() == 2);
        CHECK(g.edges[0].u == 0);
        CHECK(g.edges[0].v == 1);
        CHECK(g.edges[0].w == 1.0);
        CHECK(g.edges[1].u == 1);
        CHECK(g.edges[1].v == 2);
        CHECK(g.edges[1].w == 2.0);
    }
    SECTION("two points, k=1") {
        DenseMatrix c = DenseMatrix::from_rows({{0, 0}, {3, 4}});
        WeightedGraph g = build_spatial_graph(c, 1);
        REQUIRE(g.edges.size() == 1);
        CHECK(g.edges[0].w == 5.0);
    }
    SECTION("equilateral triangle, k=2 keeps all edges with equal weights") {
        const double h = std::sqrt(3.0) / 2.0;
        DenseMatrix c = DenseMatrix::from_rows({{0, 0}, {1, 0}, {0.5, h}});
        WeightedGraph g = build_spatial_graph(c, 2);
        REQUIRE(g.edges.size() == 3);
        for (const auto& e : g.edges) CHECK_THAT(e.w, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
    SECTION("duplicate coordinates allowed with zero-weight edge") {
        DenseMatrix c = DenseMatrix::from_rows({{1, 1}, {1, 1}, {5, 5}});
        WeightedGraph g = build_spatial_graph(c, 1);
        g.validate();
        bool has_zero = false;
        for (const auto& e : g.edges) has_zero |= (e.w == 0.0);
        CHECK(has_zero);
    }
    SECTION("k >= n rejected") {
        DenseMatrix c = DenseMatrix::from_rows({{0, 0}, {1, 1}});
        CHECK_THROWS_AS(build_spatial_graph(c, 2), ConfigError);
        CHECK_THROWS_AS(build_spatial_graph(c, 0), ConfigError);
    }
}

TEST_CASE("build_spatial_graph agrees with a brute-force union-kNN oracle") {
    Rng rng(1234);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 5 + rng.uniform_int(20);
        const std::size_t k = 1 + rng.uniform_int(4);
        DenseMatrix c(n, 2);
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = rng.uniform() * 10.0;
        WeightedGraph g = build_spatial_graph(c, k);
        g.validate();

        std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) d[i][j] = euclidean(c, i, j);

        std::set<std::pair<int, int>> got;
        for (const auto& e : g.edges) {
            got.insert({e.u, e.v});
            CHECK_THAT(e.w, Catch::Matchers::WithinAbs(d[e.u][e.v], 1e-12));
        }
        std::set<std::pair<int, int>> expect;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j)
                if (in_knn(d, i, j, k) || in_knn(d, j, i, k))
                    expect.insert({static_cast<int>(i), static_cast<int>(j)});
        CHECK(got == expect);
    }
}

TEST_CASE("pca_project preserves the Gram matrix when components cover the rank") {
    Rng rng(77);
    for (int trial = 0; trial < 8; ++trial) {
        const std::size_t n = 4 + rng.uniform_int(8);
        const std::size_t g = 4 + rng.uniform_int(8);
        const std::size_t rank = 2 + rng.uniform_int(2);
        // low-rank data: X = U V^T with random factors
        DenseMatrix U(n, rank), V(g, rank);
        for (std::size_t i = 0; i < U.size(); ++i) U[i] = rng.normal();
        for (std::size_t i = 0; i < V.size(); ++i) V[i] = rng.normal();
        DenseMatrix X = matmul(U, transpose(V));
        DenseMatrix P = pca_project(X, rank + 2);

        DenseMatrix Xc = X;
        for (std::size_t j = 0; j < Xc.cols(); ++j) {
            double m = 0;
            for (std::size_t i = 0; i < n; ++i) m += Xc(i, j);
            m /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) Xc(i, j) -= m;
        }
        DenseMatrix G1 = matmul(Xc, transpose(Xc));
        DenseMatrix G2 = matmul(P, transpose(P));
        double scale = 0.0;
        for (std::size_t i = 0; i < G1.size(); ++i) scale = std::max(scale, std::fabs(G1[i]));
        for (std::size_t i = 0; i < G1.size(); ++i)
            CHECK_THAT(G2[i], Catch::Matchers::WithinAbs(G1[i], 1e-7 * std::max(1.0, scale)));
    }
}

TEST_CASE("pca_project is deterministic and orders components by variance") {
    Rng rng(99);
    DenseMatrix X(30, 12);
    for (std::size_t i = 0; i < X.size(); ++i) X[i] = rng.normal();
    DenseMatrix P1 = pca_project(X, 5);
    DenseMatrix P2 = pca_project(X, 5);
    REQUIRE(P1.cols() == 5);
    for (std::size_t i = 0; i < P1.size(); ++i) CHECK(P1[i] == P2[i]);
    std::vector<double> colvar(P1.cols(), 0.0);
    for (std::size_t c = 0; c < P1.cols(); ++c)
        for (std::size_t i = 0; i < P1.rows(); ++i) colvar[c] += P1(i, c) * P1(i, c);
    for (std::size_t c = 1; c < colvar.size(); ++c) CHECK(colvar[c] <= colvar[c - 1] + 1e-9);
}

TEST_CASE("pca_project handles both tall and wide inputs") {
    Rng rng(31);
    DenseMatrix tall(20, 6), wide(6, 20);
    for (std::size_t i = 0; i < tall.size(); ++i) tall[i] = rng.normal();
    for (std::size_t i = 0; i < wide.size(); ++i) wide[i] = rng.normal();
    CHECK(pca_project(tall, 3).cols() == 3);
    CHECK(pca_project(wide, 3).cols() == 3);
    // requesting more components than the rank truncates
    DenseMatrix P = pca_project(wide, 10);
    CHECK(P.cols() <= 6);
}

TEST_CASE("expression graph cosine fixtures on mean-centered-safe data") {
    // rows sum to zero across the set, so PCA centering is a no-op
    DenseMatrix X = DenseMatrix::from_rows({{1, 0, 0, 0},
                                            {1, 0, 0, 0},
                                            {-1, 0, 0, 0},
                                            {-1, 0, 0, 0},
                                            {0, 1, 0, 0},
                                            {0, -1, 0, 0}});
    WeightedGraph g = build_expression_graph(X, 4, 4);
    g.validate();
    auto weight_of = [&](int u, int v) -> double {
        for (const auto& e : g.edges)
            if (e.u == std::min(u, v) && e.v == std::max(u, v)) return e.w;
        return -1.0;
    };
    REQUIRE(weight_of(0, 1) >= 0.0);
    CHECK_THAT(weight_of(0, 1), Catch::Matchers::WithinAbs(0.0, 1e-9)); // identical rows
    REQUIRE(weight_of(0, 2) >= 0.0);
    CHECK_THAT(weight_of(0, 2), Catch::Matchers::WithinAbs(2.0, 1e-9)); // opposite rows
    REQUIRE(weight_of(0, 4) >= 0.0);
    CHECK_THAT(weight_of(0, 4), Catch::Matchers::WithinAbs(1.0, 1e-9)); // orthogonal rows
    for (const auto& e : g.edges) {
        CHECK(e.w >= 0.0);
        CHECK(e.w <= 2.0);
    }
}

TEST_CASE("expression graph kNN set matches a brute-force cosine ranking") {
    // mean-zero rows in a 3-d subspace; full-rank projection preserves cosines
    DenseMatrix X = DenseMatrix::from_rows({{2, 1, 0, 0, 0},
                                            {-2, -1, 0, 0, 0},
                                            {0, 3, 1, 0, 0},
                                            {0, -3, -1, 0, 0},
                                            {1, 0, 2, 0, 0},
                                            {-1, 0, -2, 0, 0}});
    const std::size_t n = 6, k = 2;
    WeightedGraph g = build_expression_graph(X, k, 5);
    std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) d[i][j] = cosine_dissimilarity(X, i, j);
    std::set<std::pair<int, int>> expect;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (in_knn(d, i, j, k) || in_knn(d, j, i, k))
                expect.insert({static_cast<int>(i), static_cast<int>(j)});
    std::set<std::pair<int, int>> got;
    for (const auto& e : g.edges) {
        got.insert({e.u, e.v});
        CHECK_THAT(e.w, Catch::Matchers::WithinAbs(d[e.u][e.v], 1e-9));
    }
    CHECK(got == expect);
}

TEST_CASE("expression graph rejects spots projecting to the zero vector") {
    DenseMatrix X = DenseMatrix::from_rows({{1, 0}, {-1, 0}, {0, 0}});
    std::vector<std::string> ids{"a", "b", "dead"};
    CHECK_THROWS_MATCHES(build_expression_graph(X, 1, 2, &ids), GraphError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("dead")));
}

TEST_CASE("synth_slice determinism and label structure") {
    SynthConfig cfg = synth_easy();
    cfg.domains = 3;
    cfg.spots_per = 40;
    cfg.genes = 60;
    SynthResult a = synth_slice(cfg);
    SynthResult b = synth_slice(cfg);
    REQUIRE(a.slice.n_spots() == 120);
    for (std::size_t i = 0; i < a.slice.counts.size(); ++i) CHECK(a.slice.counts[i] == b.slice.counts[i]);
    for (std::size_t i = 0; i < a.slice.coords.size(); ++i) CHECK(a.slice.coords[i] == b.slice.coords[i]);
    CHECK(a.slice.labels == b.slice.labels);

    std::vector<int> tally(3, 0);
    for (int lab : a.slice.labels) ++tally[static_cast<std::size_t>(lab)];
    CHECK(tally == std::vector<int>{40, 40, 40});
    for (std::size_t i = 0; i < a.slice.counts.size(); ++i) {
        CHECK(a.slice.counts[i] >= 0.0);
        CHECK(a.slice.counts[i] == std::floor(a.slice.counts[i]));
    }
    SynthConfig other = cfg;
    other.seed = cfg.seed + 1;
    SynthResult c = synth_slice(other);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.slice.counts.size() && !any_diff; ++i)
        any_diff = a.slice.counts[i] != c.slice.counts[i];
    CHECK(any_diff);
}

TEST_CASE("synth_slice zero fraction matches the analytic zero-inflated NB probability") {
    for (bool noisy : {false, true}) {
        SynthConfig cfg = noisy ? synth_noisy() : synth_easy();
        cfg.domains = 3;
        cfg.spots_per = 100;
        cfg.genes = 200;
        SynthResult r = synth_slice(cfg);
        double realized = 0.0, analytic = 0.0;
        const std::size_t total = r.slice.counts.size();
        for (std::size_t i = 0; i < total; ++i) {
            if (r.slice.counts[i] == 0.0) realized += 1.0;
            const double mu = r.true_means[i];
            analytic += cfg.pi + (1.0 - cfg.pi) * std::pow(cfg.theta / (cfg.theta + mu), cfg.theta);
        }
        realized /= static_cast<double>(total);
        analytic /= static_cast<double>(total);
        INFO((noisy ? "noisy" : "easy") << " preset: realized " << realized << " analytic " << analytic);
        CHECK_THAT(realized, Catch::Matchers::WithinAbs(analytic, 0.05));
    }
}

TEST_CASE("nearest-centroid on noiseless log-means recovers the planted labels exactly") {
    SynthConfig cfg = synth_easy();
    cfg.domains = 4;
    cfg.spots_per = 50;
    cfg.genes = 160;
    SynthResult r = synth_slice(cfg);
    const std::size_t n = r.slice.n_spots(), g = r.slice.n_genes();
    DenseMatrix logm(n, g);
    for (std::size_t i = 0; i < logm.size(); ++i) logm[i] = std::log(r.true_means[i]);
    DenseMatrix centroid(4, g);
    std::vector<double> cnt(4, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto lab = static_cast<std::size_t>(r.slice.labels[i]);
        cnt[lab] += 1.0;
        for (std::size_t j = 0; j < g; ++j) centroid(lab, j) += logm(i, j);
    }
    for (std::size_t d = 0; d < 4; ++d)
        for (std::size_t j = 0; j < g; ++j) centroid(d, j) /= cnt[d];
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        double bestd = std::numeric_limits<double>::infinity();
        for (std::size_t d = 0; d < 4; ++d) {
            double s = 0.0;
            for (std::size_t j = 0; j < g; ++j) {
                const double diff = logm(i, j) - centroid(d, j);
                s += diff * diff;
            }
            if (s < bestd) {
                bestd = s;
                best = d;
            }
        }
        REQUIRE(static_cast<int>(best) == r.slice.labels[i]);
    }
}

TEST_CASE("synth_slice validates its configuration") {
    SynthConfig cfg;
    cfg.domains = 0;
    CHECK_THROWS_AS(synth_slice(cfg), ConfigError);
    cfg = SynthConfig{};
    cfg.pi = 1.0;
    CHECK_THROWS_AS(synth_slice(cfg), ConfigError);
    cfg = SynthConfig{};
    cfg.theta = 0.0;
    CHECK_THROWS_AS(synth_slice(cfg), ConfigError);
}

TEST_CASE("median helpers") {
    CHECK(median_of({3.0}) == 3.0);
    CHECK(median_of({4.0, 1.0, 3.0}) == 3.0);
    CHECK(median_of({4.0, 1.0, 3.0, 2.0}) == 2.5);
    CHECK_THROWS_AS(median_of({}), DomainError);

    DenseMatrix c = DenseMatrix::from_rows({{0, 0}, {1, 0}, {10, 0}, {10.5, 0}});
    // nn distances: 1, 1, 0.5, 0.5 -> median 0.75
    CHECK_THAT(median_nn_distance(c), Catch::Matchers::WithinAbs(0.75, 1e-12));
}
