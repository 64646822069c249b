#include <cctype>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sphenic/config.hpp"
#include "sphenic/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

// stage failures exit 1; configuration problems keep their own type and exit 2
struct StageFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <typename F>
auto stage(const std::string& name, F&& f) {
    try {
        return f();
    } catch (const sphenic::ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageFailure(name + ": " + e.what());
    }
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw sphenic::ConfigError(dir + ": cannot create output directory: " + ec.message());
}

std::string safe_name(const std::string& id) {
    std::string out = id;
    for (char& c : out)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '.' && c != '-')
            c = '_';
    return out;
}

void write_epi_tsv(const std::string& path, const std::vector<std::string>& ids,
                   const sphenic::DenseMatrix& images) {
    std::string out = "spot_id";
    for (std::size_t j = 0; j < images.cols(); ++j) out += "\tpx" + std::to_string(j);
    out += "\n";
    for (std::size_t i = 0; i < images.rows(); ++i) {
        out += ids[i];
        for (std::size_t j = 0; j < images.cols(); ++j)
            out += "\t" + sphenic::format_g17(images(i, j));
        out += "\n";
    }
    sphenic::write_text_file(path, out);
}

void write_topology_artifacts(const std::string& out_dir, const std::vector<std::string>& ids,
                              const sphenic::EpiResult& epi, int resolution) {
    write_epi_tsv(out_dir + "/epi_spatial.tsv", ids, epi.spatial.images);
    write_epi_tsv(out_dir + "/epi_expression.tsv", ids, epi.expression.images);
    ordered_json meta;
    meta["radius"] = epi.radius_used;
    meta["resolution"] = resolution;
    meta["spatial"] = {{"norm_lo", epi.spatial.norm_lo}, {"norm_hi", epi.spatial.norm_hi}};
    meta["expression"] = {{"norm_lo", epi.expression.norm_lo},
                          {"norm_hi", epi.expression.norm_hi}};
    sphenic::write_text_file(out_dir + "/epi_meta.json", meta.dump(2) + "\n");
    for (const char* mod : {"spatial", "expression"}) {
        const auto& diagrams =
            std::string(mod) == "spatial" ? epi.spatial.diagrams : epi.expression.diagrams;
        const std::string dir = out_dir + "/diagrams/" + mod;
        ensure_dir(dir);
        for (std::size_t i = 0; i < ids.size(); ++i)
            sphenic::write_text_file(dir + "/" + safe_name(ids[i]) + ".tsv",
                                     sphenic::diagram_to_tsv(diagrams[i]));
    }
}

struct CommonFlags {
    std::string counts, coords, labels, config_path, out;
    std::uint64_t seed = 0;
    int epochs = 0;
    double lambda1 = 0.0, lambda2 = 0.0;
    int k_clusters = 0;
    double radius = 0.0;
    int resolution = 0;
    std::vector<std::string> ablate;
    bool parallel = false;
};

void add_data_flags(CLI::App* cmd, CommonFlags& f, bool labels_required) {
    cmd->add_option("--counts", f.counts, "counts TSV (spot_id x genes)")->required();
    cmd->add_option("--coords", f.coords, "coordinates TSV (spot_id, x, y)")->required();
    auto* lab = cmd->add_option("--labels", f.labels, "ground-truth labels TSV");
    if (labels_required) lab->required();
    cmd->add_option("--config", f.config_path, "JSON config file");
    cmd->add_option("--out", f.out, "output directory");
    cmd->add_flag("--parallel", f.parallel, "spot-parallel topology (outputs unchanged)");
}

bool given(const CLI::App* cmd, const std::string& name) {
    const CLI::Option* opt = cmd->get_option_no_throw(name);
    return opt != nullptr && opt->count() > 0;
}

// flags beat the config file, which beats the built-in defaults
sphenic::RunConfig merge_config(const CLI::App* cmd, const CommonFlags& f) {
    sphenic::RunConfig cfg;
    if (!f.config_path.empty()) cfg = sphenic::load_config(f.config_path);
    if (given(cmd, "--seed")) cfg.train.seed = f.seed;
    if (given(cmd, "--epochs")) cfg.train.epochs = f.epochs;
    if (given(cmd, "--lambda1")) cfg.train.lambda1 = f.lambda1;
    if (given(cmd, "--lambda2")) cfg.train.lambda2 = f.lambda2;
    if (given(cmd, "--k-clusters")) cfg.train.k_clusters = f.k_clusters;
    if (given(cmd, "--radius")) cfg.train.topo.radius = f.radius;
    if (given(cmd, "--resolution")) cfg.train.topo.resolution = f.resolution;
    if (given(cmd, "--out")) cfg.out_dir = f.out;
    for (const auto& a : f.ablate) {
        if (a == "topo") cfg.train.topo_on = false;
        else if (a == "scdom") cfg.train.scdom_on = false;
        else throw sphenic::ConfigError("unknown ablation \"" + a + "\"");
    }
    if (f.parallel) {
        const unsigned hw = std::thread::hardware_concurrency();
        cfg.train.topo.threads = hw > 0 ? static_cast<int>(hw) : 4;
    }
    cfg.validate();
    return cfg;
}

sphenic::SpatialSlice load_input(const CommonFlags& f) {
    return stage("ingest", [&] { return sphenic::load_slice(f.counts, f.coords, f.labels); });
}

void write_metrics_json(const std::string& path, const sphenic::PipelineResult& r, int epochs) {
    ordered_json m;
    if (std::isfinite(r.ari_value)) m["ari"] = r.ari_value;
    else m["ari"] = nullptr;
    if (std::isfinite(r.nmi_value)) m["nmi"] = r.nmi_value;
    else m["nmi"] = nullptr;
    m["epochs"] = epochs;
    m["final_loss"] = r.trained.loss_trace.back();
    m["loss_trace"] = r.trained.loss_trace;
    sphenic::write_text_file(path, m.dump(2) + "\n");
}

int cmd_synth(const sphenic::SynthConfig& sc, const std::string& out) {
    const sphenic::SynthResult res = sphenic::synth_slice(sc);
    ensure_dir(out);
    stage("write", [&] {
        sphenic::write_counts_tsv(out + "/counts.tsv", res.slice);
        sphenic::write_coords_tsv(out + "/coords.tsv", res.slice);
        sphenic::write_labels_tsv(out + "/labels.tsv", res.slice);
        return 0;
    });
    std::cout << "wrote " << res.slice.n_spots() << " spots, " << res.slice.n_genes()
              << " genes to " << out << "\n";
    return 0;
}

int cmd_topo(const CLI::App* cmd, const CommonFlags& f) {
    sphenic::RunConfig cfg = merge_config(cmd, f);
    cfg.train.topo_on = true;
    const auto slice = load_input(f);
    const auto p = stage("prepare", [&] { return sphenic::prepare(slice, cfg.train); });
    ensure_dir(cfg.out_dir);
    stage("write", [&] {
        write_topology_artifacts(cfg.out_dir, slice.spot_ids, p.epi, cfg.train.topo.resolution);
        return 0;
    });
    std::cout << "wrote topological features for " << slice.n_spots() << " spots to "
              << cfg.out_dir << "\n";
    return 0;
}

int cmd_run(const CLI::App* cmd, const CommonFlags& f) {
    const sphenic::RunConfig cfg = merge_config(cmd, f);
    const auto slice = load_input(f);
    if (!slice.has_labels && cfg.train.k_clusters == 0)
        throw sphenic::ConfigError("--k-clusters is required when no labels are given");
    const auto p = stage("prepare", [&] { return sphenic::prepare(slice, cfg.train); });
    const auto r = stage("train", [&] { return sphenic::run_pipeline(p, cfg.train); });
    ensure_dir(cfg.out_dir);
    stage("write", [&] {
        sphenic::write_embeddings_tsv(cfg.out_dir + "/embeddings.tsv", slice.spot_ids,
                                      r.trained.state.h);
        sphenic::write_cluster_tsv(cfg.out_dir + "/labels.tsv", slice.spot_ids,
                                   r.clusters.labels);
        sphenic::save_checkpoint(cfg.out_dir + "/model.sphn", r.trained.params);
        write_metrics_json(cfg.out_dir + "/metrics.json", r, cfg.train.epochs);
        if (p.has_epi)
            write_topology_artifacts(cfg.out_dir, slice.spot_ids, p.epi,
                                     cfg.train.topo.resolution);
        return 0;
    });
    std::cout << "final loss " << r.trained.loss_trace.back();
    if (std::isfinite(r.ari_value)) std::cout << ", ari " << r.ari_value;
    if (std::isfinite(r.nmi_value)) std::cout << ", nmi " << r.nmi_value;
    std::cout << "; outputs in " << cfg.out_dir << "\n";
    return 0;
}

int cmd_sweep(const CLI::App* cmd, const CommonFlags& f, const std::vector<double>& grid1,
              const std::vector<double>& grid2) {
    const sphenic::RunConfig cfg = merge_config(cmd, f);
    const auto slice = load_input(f);
    const auto table =
        stage("sweep", [&] { return sphenic::sweep(slice, grid1, grid2, cfg.train); });
    ensure_dir(cfg.out_dir);
    stage("write", [&] {
        std::string out = "lambda1\\lambda2";
        for (const double l2 : grid2) out += "\t" + sphenic::format_g17(l2);
        out += "\n";
        for (std::size_t i = 0; i < table.rows(); ++i) {
            out += sphenic::format_g17(grid1[i]);
            for (std::size_t j = 0; j < table.cols(); ++j)
                out += "\t" + sphenic::format_g17(table(i, j));
            out += "\n";
        }
        sphenic::write_text_file(cfg.out_dir + "/sweep.tsv", out);
        return 0;
    });
    std::cout << "wrote " << table.rows() << "x" << table.cols() << " ARI grid to " << cfg.out_dir
              << "/sweep.tsv\n";
    return 0;
}

int cmd_impute(const CLI::App* cmd, const CommonFlags& f, const std::string& model_path) {
    const sphenic::RunConfig cfg = merge_config(cmd, f);
    const auto slice = load_input(f);
    const auto p = stage("prepare", [&] { return sphenic::prepare(slice, cfg.train); });
    sphenic::ForwardState state;
    bool trained = false;
    sphenic::ParamSet params;
    if (!model_path.empty()) {
        params = stage("load model", [&] { return sphenic::load_checkpoint(model_path); });
        state = stage("forward", [&] { return sphenic::compute_state(p, cfg.train, params); });
    } else {
        const auto r = stage("train", [&] { return sphenic::train(p, cfg.train); });
        state = r.state;
        params = r.params;
        trained = true;
    }
    ensure_dir(cfg.out_dir);
    stage("write", [&] {
        std::string out = "spot_id";
        for (const auto& g : p.pre.hvg_genes) out += "\t" + g;
        out += "\n";
        const sphenic::DenseMatrix& m = sphenic::impute(state);
        for (std::size_t i = 0; i < m.rows(); ++i) {
            out += slice.spot_ids[i];
            for (std::size_t j = 0; j < m.cols(); ++j)
                out += "\t" + sphenic::format_g17(m(i, j));
            out += "\n";
        }
        sphenic::write_text_file(cfg.out_dir + "/imputed.tsv", out);
        if (trained) sphenic::save_checkpoint(cfg.out_dir + "/model.sphn", params);
        return 0;
    });
    std::cout << "wrote denoised expression to " << cfg.out_dir << "/imputed.tsv\n";
    return 0;
}

int cmd_config(bool init, const std::string& check_path, const std::string& out) {
    if (init) {
        const std::string text = sphenic::default_config_text();
        if (out.empty()) std::cout << text;
        else {
            sphenic::write_text_file(out, text);
            std::cout << "wrote default config to " << out << "\n";
        }
        return 0;
    }
    sphenic::load_config(check_path);
    std::cout << check_path << ": ok\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"SPHENIC: spatial transcriptomics clustering with persistent-homology features"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "generate a synthetic labeled slice");
    sphenic::SynthConfig sc;
    std::string synth_out;
    synth->add_option("--domains", sc.domains, "number of spatial domains");
    synth->add_option("--spots-per", sc.spots_per, "spots per domain");
    synth->add_option("--genes", sc.genes, "gene count");
    synth->add_option("--seed", sc.seed, "generator seed");
    synth->add_option("--pi", sc.pi, "zero-inflation probability");
    synth->add_option("--theta", sc.theta, "negative-binomial dispersion");
    synth->add_option("--program-strength", sc.program_strength, "domain marker boost");
    synth->add_option("--spatial-spread", sc.spatial_spread, "domain point-cloud sigma");
    synth->add_option("--domain-radius", sc.domain_radius, "domain center circle radius");
    synth->add_option("--out", synth_out, "output directory")->required();

    CommonFlags topo_f;
    auto* topo = app.add_subcommand("topo", "compute persistence diagrams and images only");
    add_data_flags(topo, topo_f, false);
    topo->add_option("--radius", topo_f.radius, "local filtration radius (0 = auto)");
    topo->add_option("--resolution", topo_f.resolution, "persistence image resolution");

    CommonFlags run_f;
    auto* run = app.add_subcommand("run", "full pipeline: preprocess, train, cluster, score");
    add_data_flags(run, run_f, false);
    run->add_option("--seed", run_f.seed, "training seed");
    run->add_option("--epochs", run_f.epochs, "training epochs");
    run->add_option("--lambda1", run_f.lambda1, "consistency loss weight");
    run->add_option("--lambda2", run_f.lambda2, "contrastive loss weight");
    run->add_option("--k-clusters", run_f.k_clusters, "cluster count (0 = from labels)");
    run->add_option("--ablate", run_f.ablate, "drop a component (repeatable)")
        ->check(CLI::IsMember({"topo", "scdom"}));

    CommonFlags sweep_f;
    std::vector<double> grid1 = {1e-3, 1e-2, 1e-1};
    std::vector<double> grid2 = {1e-3, 1e-2, 1e-1};
    auto* sweepc = app.add_subcommand("sweep", "ARI grid over the two loss weights");
    add_data_flags(sweepc, sweep_f, true);
    sweepc->add_option("--seed", sweep_f.seed, "base seed");
    sweepc->add_option("--epochs", sweep_f.epochs, "training epochs per cell");
    sweepc->add_option("--lambda1", grid1, "consistency weight grid values");
    sweepc->add_option("--lambda2", grid2, "contrastive weight grid values");

    CommonFlags impute_f;
    std::string model_path;
    auto* impute = app.add_subcommand("impute", "write the denoised expression matrix");
    add_data_flags(impute, impute_f, false);
    impute->add_option("--seed", impute_f.seed, "training seed");
    impute->add_option("--epochs", impute_f.epochs, "training epochs");
    impute->add_option("--model", model_path, "reuse a saved checkpoint instead of training");

    auto* configc = app.add_subcommand("config", "emit or check a JSON config");
    bool init = false;
    std::string check_path, config_out;
    configc->add_flag("--init", init, "print the full default config");
    configc->add_option("--check", check_path, "validate an existing config file");
    configc->add_option("--out", config_out, "write --init output to this file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (synth->parsed()) return cmd_synth(sc, synth_out);
        if (topo->parsed()) return cmd_topo(topo, topo_f);
        if (run->parsed()) return cmd_run(run, run_f);
        if (sweepc->parsed()) return cmd_sweep(sweepc, sweep_f, grid1, grid2);
        if (impute->parsed()) return cmd_impute(impute, impute_f, model_path);
        if (configc->parsed()) {
            if (init && !check_path.empty())
                throw sphenic::ConfigError("config takes --init or --check, not both");
            if (!init && check_path.empty())
                throw sphenic::ConfigError("config needs --init or --check");
            return cmd_config(init, check_path, config_out);
        }
    } catch (const sphenic::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const StageFailure& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
