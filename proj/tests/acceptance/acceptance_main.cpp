// End-to-end acceptance gate: ten independent checks, one line each.
// Exits 0 only if every check passes. Tolerances are pinned inline.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <unistd.h>
#include <vector>

#include "sphenic/config.hpp"
#include "sphenic/pipeline.hpp"

using namespace sphenic;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int idx, const std::string& name, bool pass, const std::string& detail) {
    std::printf("%s %2d. %s: %s\n", pass ? "PASS" : "FAIL", idx, name.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!pass) g_failures += 1;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

DenseMatrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo, double hi) {
    DenseMatrix m(r, c);
    for (auto& v : m.data()) v = lo + (hi - lo) * rng.uniform();
    return m;
}

// magnitudes bounded away from zero keep rows off the normalization kink
DenseMatrix margin_matrix(std::size_t r, std::size_t c, Rng& rng) {
    DenseMatrix m(r, c);
    for (auto& v : m.data()) {
        const double mag = 0.2 + rng.uniform();
        v = rng.uniform() < 0.5 ? -mag : mag;
    }
    return m;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa <= 0.0 || sbb <= 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

// ---------------------------------------------------------------------------
// 1. fast extended persistence equals the small-graph reduction oracle
// ---------------------------------------------------------------------------

void criterion_1() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(41);
    int mismatches = 0;
    for (int trial = 0; trial < 200; ++trial) {
        WeightedGraph g;
        g.n = 1 + static_cast<int>(rng.uniform_int(8));
        for (int u = 0; u < g.n; ++u)
            for (int v = u + 1; v < g.n; ++v)
                if (rng.uniform() < 0.45) g.edges.push_back({u, v, 0.05 + rng.uniform()});
        const bool fill = trial % 2 == 0;
        if (sorted_point_tuples(extended_persistence(g, fill)) !=
            sorted_point_tuples(brute_force_reduction(g, fill)))
            mismatches += 1;
    }
    const double dt = seconds_since(t0);
    report(1, "extended persistence vs reduction oracle",
           mismatches == 0 && dt < 30.0,
           std::to_string(200 - mismatches) + "/200 exact diagram matches in " + fmt(dt) + " s");
}

// ---------------------------------------------------------------------------
// 2. persistence images conserve weighted diagram mass
// ---------------------------------------------------------------------------

void criterion_2() {
    Rng rng(42);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        ExtendedPersistenceDiagram d;
        const std::size_t npts = 1 + rng.uniform_int(12);
        double expected = 0.0;
        for (std::size_t i = 0; i < npts; ++i) {
            const double b = rng.uniform(), de = rng.uniform();
            d.points.push_back({b, de, static_cast<int>(i % 2),
                                i % 3 == 0 ? PointClass::extended : PointClass::ordinary});
            expected += std::fabs(b - de);
        }
        // grid spans every point by 10 sigma, so truncation is negligible
        const PersistenceImage img = persistence_image(d, 20, 0.05, 0.05, 1.0, -0.6, 1.6, -0.6, 1.6);
        double mass = 0.0;
        for (std::size_t i = 0; i < img.pixels.size(); ++i) mass += img.pixels[i];
        worst = std::max(worst, std::fabs(mass - expected));
    }
    report(2, "persistence image mass conservation", worst < 1e-6,
           "max |pixel sum - weighted mass| = " + fmt(worst) + " over 50 diagrams (tol 1e-6)");
}

// ---------------------------------------------------------------------------
// 3. every differentiable loss matches central finite differences
// ---------------------------------------------------------------------------

struct FdCase {
    std::vector<std::vector<int>> neighbors, negatives;
    DenseMatrix counts;
};

FdCase random_fd_case(std::size_t n, std::size_t genes, Rng& rng) {
    FdCase c;
    c.neighbors.resize(n);
    c.negatives.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::set<int> nb;
        const std::size_t cnt = 1 + rng.uniform_int(2);
        while (nb.size() < cnt) {
            const int j = static_cast<int>(rng.uniform_int(n));
            if (j != static_cast<int>(i)) nb.insert(j);
        }
        c.neighbors[i].assign(nb.begin(), nb.end());
        std::set<int> ng;
        const std::size_t want = rng.uniform_int(3);
        for (int j = 0; j < static_cast<int>(n) && ng.size() < want; ++j)
            if (j != static_cast<int>(i) && !nb.count(j)) ng.insert(j);
        c.negatives[i].assign(ng.begin(), ng.end());
    }
    c.counts = DenseMatrix(n, genes);
    for (auto& v : c.counts.data()) v = std::floor(rng.uniform() * 7.0);
    c.counts(0, 0) = 0.0; // keep the zero-inflation branch active
    return c;
}

void criterion_3() {
    Rng rng(43);
    double w_con = 0.0, w_sco = 0.0, w_zinb = 0.0, w_tot = 0.0;
    const std::size_t n = 5, lat = 3, genes = 4;
    for (int trial = 0; trial < 50; ++trial) {
        const FdCase c = random_fd_case(n, genes, rng);

        ParamSet pc = {{"a", margin_matrix(n, lat, rng)}, {"b", margin_matrix(n, lat, rng)}};
        w_con = std::max(w_con, grad_check(
                                    [](Tape& t, const std::vector<NodeId>& ids) {
                                        return consistency_loss(t, ids[0], ids[1]);
                                    },
                                    pc, 1e-4, rng.fork(1000 + trial))
                                    .max_rel_err);

        ParamSet ps = {{"h", margin_matrix(n, lat, rng)},
                       {"v1", margin_matrix(n, lat, rng)},
                       {"v2", margin_matrix(n, lat, rng)}};
        w_sco = std::max(w_sco, grad_check(
                                    [&c](Tape& t, const std::vector<NodeId>& ids) {
                                        return scdom_loss(t, ids[0], {ids[1], ids[2]},
                                                          c.neighbors, c.negatives);
                                    },
                                    ps, 1e-4, rng.fork(2000 + trial))
                                    .max_rel_err);

        ParamSet pz = {{"rp", random_matrix(n, genes, rng, -1.5, 1.5)},
                       {"rm", random_matrix(n, genes, rng, -1.5, 1.5)},
                       {"rt", random_matrix(n, genes, rng, -1.5, 1.5)}};
        w_zinb = std::max(w_zinb, grad_check(
                                      [&c](Tape& t, const std::vector<NodeId>& ids) {
                                          return zinb_nll(t, c.counts, t.sigmoid(ids[0]),
                                                          t.exp(ids[1]), t.exp(ids[2]));
                                      },
                                      pz, 1e-4, rng.fork(3000 + trial))
                                      .max_rel_err);

        ParamSet pt = {{"h1", margin_matrix(n, lat, rng)},
                       {"h2", margin_matrix(n, lat, rng)},
                       {"h", margin_matrix(n, lat, rng)},
                       {"rp", random_matrix(n, genes, rng, -1.5, 1.5)},
                       {"rm", random_matrix(n, genes, rng, -1.5, 1.5)},
                       {"rt", random_matrix(n, genes, rng, -1.5, 1.5)}};
        w_tot = std::max(w_tot, grad_check(
                                    [&c](Tape& t, const std::vector<NodeId>& ids) {
                                        const NodeId rec =
                                            zinb_nll(t, c.counts, t.sigmoid(ids[3]),
                                                     t.exp(ids[4]), t.exp(ids[5]));
                                        const NodeId con = consistency_loss(t, ids[0], ids[1]);
                                        const NodeId sco = scdom_loss(t, ids[2], {ids[0], ids[1]},
                                                                      c.neighbors, c.negatives);
                                        return total_loss(t, rec, con, sco, 0.3, 0.7);
                                    },
                                    pt, 1e-4, rng.fork(4000 + trial))
                                    .max_rel_err);
    }
    const double worst = std::max({w_con, w_sco, w_zinb, w_tot});
    report(3, "gradient suite vs finite differences", worst < 1e-4,
           "max rel err: agreement " + fmt(w_con) + ", contrastive " + fmt(w_sco) +
               ", reconstruction " + fmt(w_zinb) + ", combined " + fmt(w_tot) +
               " over 50 instances each (tol 1e-4)");
}

// ---------------------------------------------------------------------------
// 4. the count likelihood is a proper distribution
// ---------------------------------------------------------------------------

void criterion_4() {
    Rng rng(44);
    double worst_sum = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const double mu = 0.5 + 7.5 * rng.uniform();
        const double theta = 0.5 + 5.5 * rng.uniform();
        double total = 0.0;
        for (int x = 0; x <= 2000; ++x) total += std::exp(zinb_log_pmf(x, 0.0, mu, theta));
        worst_sum = std::max(worst_sum, std::fabs(total - 1.0));
    }
    double worst_zero = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const double pi = 0.05 + 0.85 * rng.uniform();
        const double mu = 0.5 + 7.5 * rng.uniform();
        const double theta = 0.5 + 5.5 * rng.uniform();
        const double closed = pi + (1.0 - pi) * std::pow(theta / (theta + mu), theta);
        worst_zero = std::max(worst_zero,
                              std::fabs(std::exp(zinb_log_pmf(0.0, pi, mu, theta)) - closed));
    }
    report(4, "count likelihood normalization", worst_sum < 1e-8 && worst_zero < 1e-10,
           "max |pmf sum - 1| = " + fmt(worst_sum) + " (tol 1e-8), max zero-probability gap = " +
               fmt(worst_zero) + " (tol 1e-10), 20 draws each");
}

// ---------------------------------------------------------------------------
// 5. clustering metrics equal brute-force pair counting
// ---------------------------------------------------------------------------

double ari_pairs_oracle(const std::vector<int>& a, const std::vector<int>& b) {
    double ss = 0, sd = 0, ds = 0, dd = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = i + 1; j < a.size(); ++j) {
            const bool sa = a[i] == a[j], sb = b[i] == b[j];
            if (sa && sb) ss += 1;
            else if (sa) sd += 1;
            else if (sb) ds += 1;
            else dd += 1;
        }
    const double den = (ss + sd) * (sd + dd) + (ss + ds) * (ds + dd);
    if (den == 0.0) return (sd == 0.0 && ds == 0.0) ? 1.0 : 0.0;
    return 2.0 * (ss * dd - sd * ds) / den;
}

double nmi_oracle(const std::vector<int>& a, const std::vector<int>& b) {
    bool identical = true;
    for (std::size_t i = 0; i < a.size() && identical; ++i)
        for (std::size_t j = i + 1; j < a.size(); ++j)
            if ((a[i] == a[j]) != (b[i] == b[j])) {
                identical = false;
                break;
            }
    if (identical) return 1.0;
    const double n = static_cast<double>(a.size());
    std::map<int, double> ca, cb;
    std::map<std::pair<int, int>, double> cab;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ca[a[i]] += 1.0;
        cb[b[i]] += 1.0;
        cab[{a[i], b[i]}] += 1.0;
    }
    double ha = 0.0, hb = 0.0, mi = 0.0;
    for (const auto& [k, v] : ca) ha -= (v / n) * std::log(v / n);
    for (const auto& [k, v] : cb) hb -= (v / n) * std::log(v / n);
    if (ha <= 0.0 || hb <= 0.0) return 0.0;
    for (const auto& [k, v] : cab) mi += (v / n) * std::log(n * v / (ca[k.first] * cb[k.second]));
    return mi / (0.5 * (ha + hb));
}

void criterion_5() {
    Rng rng(45);
    double worst = 0.0;
    bool ones_exact = true;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + rng.uniform_int(29);
        std::vector<int> a(n), b(n);
        for (auto& v : a) v = static_cast<int>(rng.uniform_int(1 + rng.uniform_int(5)));
        for (auto& v : b) v = static_cast<int>(rng.uniform_int(1 + rng.uniform_int(5)));
        worst = std::max(worst, std::fabs(ari(a, b) - ari_pairs_oracle(a, b)));
        worst = std::max(worst, std::fabs(nmi(a, b) - nmi_oracle(a, b)));
        // an arbitrary relabeling of a is the identical partition
        std::vector<int> ra(n);
        for (std::size_t i = 0; i < n; ++i) ra[i] = a[i] * 13 + 5;
        ones_exact = ones_exact && ari(a, ra) == 1.0 && nmi(a, ra) == 1.0;
    }
    report(5, "partition metrics vs pair-count oracles", worst < 1e-12 && ones_exact,
           "max |metric - oracle| = " + fmt(worst) +
               " over 100 pairs (tol 1e-12); identical partitions exactly 1: " +
               (ones_exact ? "yes" : "no"));
}

// ---------------------------------------------------------------------------
// 6. the full pipeline recovers well-separated synthetic domains
// ---------------------------------------------------------------------------

void criterion_6() {
    const auto t0 = std::chrono::steady_clock::now();
    const SynthResult synth = synth_slice(synth_easy());
    TrainConfig cfg; // library defaults, 100 epochs
    const PreparedData p = prepare(synth.slice, cfg);
    int good = 0;
    std::string aris;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        cfg.seed = seed;
        const PipelineResult r = run_pipeline(p, cfg);
        if (r.ari_value >= 0.9 && r.nmi_value >= 0.9) good += 1;
        aris += (seed ? " " : "") + fmt(r.ari_value);
    }
    const double dt = seconds_since(t0);
    report(6, "end-to-end domain recovery", good >= 4 && dt < 600.0,
           std::to_string(good) + "/5 seeds reach ARI and NMI >= 0.9 (ARI: " + aris + ") in " +
               fmt(dt) + " s (budget 600 s)");
}

// ---------------------------------------------------------------------------
// 7. dropping both novel components does not help on noisy data
// ---------------------------------------------------------------------------

void criterion_7() {
    const SynthResult synth = synth_slice(synth_noisy());
    TrainConfig full;
    TrainConfig bare;
    bare.topo_on = false;
    bare.scdom_on = false;
    const PreparedData p_full = prepare(synth.slice, full);
    const PreparedData p_bare = prepare(synth.slice, bare);
    double mean_full = 0.0, mean_bare = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        full.seed = seed;
        bare.seed = seed;
        mean_full += run_pipeline(p_full, full).ari_value;
        mean_bare += run_pipeline(p_bare, bare).ari_value;
    }
    mean_full /= 5.0;
    mean_bare /= 5.0;
    report(7, "ablation ordering on noisy data", mean_full >= mean_bare,
           "mean ARI full = " + fmt(mean_full) + " vs without both components = " +
               fmt(mean_bare) + " over 5 seeds");
}

// ---------------------------------------------------------------------------
// 8. the loss weights barely move the result on easy data
// ---------------------------------------------------------------------------

void criterion_8() {
    const SynthResult synth = synth_slice(synth_easy());
    const std::vector<double> grid = {1e-3, 1e-2, 1e-1};
    TrainConfig base;
    const DenseMatrix table = sweep(synth.slice, grid, grid, base);
    double lo = table(0, 0), hi = table(0, 0);
    for (std::size_t i = 0; i < table.size(); ++i) {
        lo = std::min(lo, table[i]);
        hi = std::max(hi, table[i]);
    }
    report(8, "loss-weight insensitivity", hi - lo < 0.1,
           "ARI spread " + fmt(hi - lo) + " over the 3x3 grid (min " + fmt(lo) + ", max " +
               fmt(hi) + ", tol 0.1)");
}

// ---------------------------------------------------------------------------
// 9. the command-line run is byte-reproducible
// ---------------------------------------------------------------------------

int run_cli(const std::string& args) {
    const char* env = std::getenv("SPHENIC_CLI_PATH");
    const std::string cli = env != nullptr ? env : SPHENIC_CLI_PATH;
    const std::string cmd = cli + " " + args + " > /dev/null 2>&1";
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::map<std::string, std::string> dir_bytes(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file())
            out[fs::relative(e.path(), root).string()] = read_text_file(e.path().string());
    return out;
}

void criterion_9() {
    const fs::path base = fs::temp_directory_path() /
                          ("sphenic_accept_" + std::to_string(::getpid()));
    fs::remove_all(base);
    fs::create_directories(base);
    const std::string data = (base / "data").string();
    bool ok = run_cli("synth --domains 3 --spots-per 15 --genes 60 --seed 5 --out " + data) == 0;
    const std::string flags = " --counts " + data + "/counts.tsv --coords " + data +
                              "/coords.tsv --labels " + data +
                              "/labels.tsv --epochs 5 --seed 3 --out ";
    ok = ok && run_cli("run" + flags + (base / "r1").string()) == 0;
    ok = ok && run_cli("run" + flags + (base / "r2").string()) == 0;
    std::string detail = "CLI invocations failed";
    if (ok) {
        const auto b1 = dir_bytes(base / "r1");
        const auto b2 = dir_bytes(base / "r2");
        ok = b1 == b2 && !b1.empty();
        detail = std::to_string(b1.size()) + " files byte-identical across two runs: " +
                 (ok ? "yes" : "no");
    }
    fs::remove_all(base);
    report(9, "byte-reproducible command line", ok, detail);
}

// ---------------------------------------------------------------------------
// 10. imputation beats the corrupted raw counts
// ---------------------------------------------------------------------------

void criterion_10() {
    const SynthResult base = synth_slice(synth_easy());
    double mean_imp = 0.0, mean_raw = 0.0;
    std::string per_seed;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        SpatialSlice sl = base.slice;
        std::vector<std::pair<std::size_t, std::size_t>> nz;
        for (std::size_t i = 0; i < sl.counts.rows(); ++i)
            for (std::size_t j = 0; j < sl.counts.cols(); ++j)
                if (sl.counts(i, j) > 0.0) nz.push_back({i, j});
        Rng mask_rng(derive_seed(seed, 7, 77));
        // partial Fisher-Yates: the first 20% become the masked set
        const std::size_t m = nz.size() / 5;
        for (std::size_t i = 0; i < m; ++i)
            std::swap(nz[i], nz[i + mask_rng.uniform_int(nz.size() - i)]);
        for (std::size_t i = 0; i < m; ++i) sl.counts(nz[i].first, nz[i].second) = 0.0;

        TrainConfig cfg;
        cfg.seed = seed;
        const PreparedData p = prepare(sl, cfg);
        const TrainResult r = train(p, cfg);
        const DenseMatrix& imputed = impute(r.state);
        std::vector<double> vi, vr, vt;
        for (std::size_t i = 0; i < imputed.rows(); ++i)
            for (std::size_t jh = 0; jh < imputed.cols(); ++jh) {
                const std::size_t j = p.pre.hvg_indices[jh];
                vi.push_back(imputed(i, jh));
                vr.push_back(sl.counts(i, j));
                vt.push_back(base.true_means(i, j));
            }
        const double ci = pearson(vi, vt);
        const double cr = pearson(vr, vt);
        mean_imp += ci;
        mean_raw += cr;
        per_seed += (seed ? " " : "") + fmt(ci) + ">" + fmt(cr);
    }
    mean_imp /= 5.0;
    mean_raw /= 5.0;
    report(10, "imputation recovers masked structure", mean_imp > mean_raw,
           "mean corr(imputed, true means) = " + fmt(mean_imp) + " vs corr(masked raw, true) = " +
               fmt(mean_raw) + " over 5 seeds [" + per_seed + "]");
}

} // namespace

int main() {
    criterion_1();
    criterion_2();
    criterion_3();
    criterion_4();
    criterion_5();
    criterion_6();
    criterion_7();
    criterion_8();
    criterion_9();
    criterion_10();
    if (g_failures == 0) {
        std::printf("all 10 acceptance checks passed\n");
        return 0;
    }
    std::printf("%d acceptance check(s) failed\n", g_failures);
    return 1;
}
