// protodensity: data generation, pretraining, training, evaluation,
// explanation, ablations, sweeps and gradient checks.
//
// Exit codes: 0 success, 1 validation error (bad config, arguments or paths),
// 2 runtime failure (non-finite loss, I/O).

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "protodensity/config.hpp"
#include "protodensity/errors.hpp"
#include "protodensity/eval.hpp"
#include "protodensity/gradcheck.hpp"
#include "protodensity/interp.hpp"
#include "protodensity/io.hpp"
#include "protodensity/training.hpp"

#ifndef PROTODENSITY_VERSION
#define PROTODENSITY_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using namespace protodensity;

namespace {

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
    std::size_t threads = 1;
    std::string command_line;
};

RunConfig resolve(const Common& common) {
    RunConfig cfg = common.config_path.empty() ? RunConfig{} : load_config(common.config_path);
    for (const std::string& o : common.overrides) apply_override(cfg, o);
    if (apply_seed_env(cfg)) std::cerr << "PROTODENSITY_SEED overrides the configured seeds\n";
    cfg.validate();
    return cfg;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string run_info(const Common& common, const RunConfig& cfg) {
    std::ostringstream os;
    os << "version = " << PROTODENSITY_VERSION << '\n'
       << "command = " << common.command_line << '\n'
       << "seed = " << cfg.train.seed << '\n'
       << "seeds = ";
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) os << (i ? "," : "") << cfg.seeds[i];
    os << "\nthreads = " << common.threads << '\n';
    return os.str();
}

/// Resolved config and run metadata, written before any work starts.
void echo_config(const fs::path& dir, const Common& common, const RunConfig& cfg) {
    ensure_dir(dir);
    write_text(dir / "config.txt", serialize_config(cfg));
    write_text(dir / "run.txt", run_info(common, cfg));
    std::cout << "resolved config: " << (dir / "config.txt").string() << '\n';
}

/// Same content as echo_config for single-file outputs: `<file>.config`.
void echo_sidecar(const fs::path& file, const Common& common, const RunConfig& cfg,
                  const std::string& extra = {}) {
    if (file.has_parent_path()) ensure_dir(file.parent_path());
    write_text(fs::path(file.string() + ".config"),
               run_info(common, cfg) + serialize_config(cfg) + extra);
}

Dataset open_dataset(const std::string& dir) {
    Dataset ds = load_dataset(dir);
    std::cout << "dataset " << dir << ": " << ds.train.size() << " train, " << ds.test.size()
              << " test, manifest hash " << ds.manifest_hash << '\n';
    return ds;
}

void add_config_options(CLI::App* cmd, Common& common, bool config_required = false) {
    auto* opt = cmd->add_option("--config", common.config_path, "Config file (key = value lines)")
                    ->check(CLI::ExistingFile);
    if (config_required) opt->required();
    cmd->add_option("--set", common.overrides, "Override a config key, e.g. --set loss.lambda3=0");
}

FeatureExtractor extractor_for(const std::string& path, const Dataset& ds, const RunConfig& cfg,
                               const fs::path& out) {
    if (!path.empty()) return load_extractor(path);
    std::cout << "no --extractor given; pretraining for " << cfg.pretrain.epochs << " epochs\n";
    const PretrainResult r = pretrain_extractor(ds, cfg.pretrain);
    save_extractor(out / "extractor", r.extractor);
    return r.extractor;
}

std::string pretrain_csv(const PretrainResult& r) {
    std::string out = "epoch,mse\n0," + format_double(r.initial_mse) + '\n';
    for (std::size_t i = 0; i < r.epoch_mse.size(); ++i) {
        out += std::to_string(i + 1) + ',' + format_double(r.epoch_mse[i]) + '\n';
    }
    return out;
}

std::string epoch_dir(std::size_t epoch) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "epoch_%04zu", epoch);
    return buf;
}

void save_run(const fs::path& dir, const RunResult& run) {
    save_model(dir / "model", run.model);
    write_text(dir / "history.csv", history_csv(run.history));
    write_text(dir / "steps.csv", steps_csv(run.history));
    write_text(dir / "projections.csv", projections_csv(run.history));
    write_text(dir / "eval.csv", eval_csv(run.eval));
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& common, const std::string& out) {
    const RunConfig cfg = resolve(common);
    const Manifest m = generate_dataset(cfg.scene, cfg.n_train, cfg.n_test, out);
    // Written after the samples so the config lives next to the manifest it produced.
    echo_config(out, common, cfg);
    std::cout << "wrote " << m.entries.size() << " samples to " << out << '\n';
    return 0;
}

int cmd_pretrain(const Common& common, const std::string& data, const std::string& out) {
    const RunConfig cfg = resolve(common);
    echo_config(out, common, cfg);
    const Dataset ds = open_dataset(data);
    const PretrainResult r = pretrain_extractor(ds, cfg.pretrain);
    save_extractor(out, r.extractor);
    write_text(fs::path(out) / "pretrain_history.csv", pretrain_csv(r));
    std::cout << "pretrain mse " << format_double(r.initial_mse) << " -> "
              << format_double(r.final_mse) << "; extractor checksum " << r.extractor.checksum()
              << '\n';
    return 0;
}

int cmd_train(const Common& common, const std::string& data, const std::string& extractor,
              const std::string& out_dir) {
    const RunConfig cfg = resolve(common);
    const fs::path out(out_dir);
    echo_config(out, common, cfg);
    const Dataset ds = open_dataset(data);
    CountModel model = CountModel::create(load_extractor(extractor), cfg.model, cfg.train.seed);
    TrainCallbacks cb;
    cb.on_projection = [&](std::size_t epoch, const CountModel& m) {
        save_model(out / "checkpoints" / epoch_dir(epoch), m);
    };
    TrainHistory hist;
    try {
        hist = train(model, ds, cfg.train, cb);
    } catch (const NumericError&) {
        save_model(out / "last_good", model);
        std::cerr << "last good parameters saved to " << (out / "last_good").string() << '\n';
        throw;
    }
    RunResult run{model, hist, ds.test.empty() ? EvalReport{} : mae(model, ds.test)};
    save_run(out, run);
    std::ostringstream summary;
    summary << "epochs = " << hist.epochs.size() << "\nstop_reason = " << hist.stop_reason
            << "\ntest_mae = " << format_double(run.eval.mae)
            << "\ntrain_mean_baseline_mae = "
            << (ds.test.empty() ? std::string("nan") : format_double(train_mean_baseline(ds)))
            << "\nmanifest_hash = " << ds.manifest_hash << '\n';
    write_text(out / "summary.txt", summary.str());
    std::cout << summary.str();
    return 0;
}

int cmd_eval(const Common& common, const std::string& model_dir, const std::string& data,
             const std::string& out, const std::string& split) {
    const RunConfig cfg = resolve(common);
    const Dataset ds = open_dataset(data);
    const CountModel model = load_model(model_dir);
    const auto& samples = split == "train" ? ds.train : ds.test;
    const EvalReport r = mae(model, samples);
    write_text(out, eval_csv(r));
    std::ostringstream extra;
    extra << "eval.model = " << model_dir << "\neval.split = " << split
          << "\neval.mae = " << format_double(r.mae)
          << "\neval.train_mean_baseline_mae = " << format_double(train_mean_baseline(ds))
          << "\neval.manifest_hash = " << ds.manifest_hash << '\n';
    echo_sidecar(out, common, cfg, extra.str());
    std::cout << "MAE " << format_double(r.mae) << " over " << r.images.size() << ' ' << split
              << " images\n";
    return 0;
}

struct ExplainArgs {
    std::string model, data, out;
    std::size_t global_k = 3;
    double percentile = 99.0;
    std::optional<std::uint64_t> image;
    std::string loc;
};

const Sample& find_sample(const Dataset& ds, std::uint64_t id) {
    for (const auto* split : {&ds.train, &ds.test})
        for (const Sample& s : *split)
            if (s.id == id) return s;
    throw ConfigError("--image: no sample with id " + std::to_string(id));
}

std::vector<PixelRect> rects(std::span<const PatchBox> boxes) {
    std::vector<PixelRect> out;
    for (const PatchBox& b : boxes) out.push_back({b.x0, b.y0, b.x1, b.y1});
    return out;
}

int cmd_explain(const Common& common, const ExplainArgs& a) {
    RunConfig cfg = resolve(common);
    cfg.top_k = a.global_k;
    cfg.percentile = a.percentile;
    cfg.validate();
    const fs::path out(a.out);
    echo_config(out, common, cfg);
    const Dataset ds = open_dataset(a.data);
    const CountModel model = load_model(a.model);

    const auto top = global_top_patches(model, ds.train, a.global_k, a.percentile);
    std::vector<PatchBox> flat;
    for (const auto& list : top) flat.insert(flat.end(), list.begin(), list.end());
    write_text(out / "global_patches.csv", boxes_csv(flat));
    ensure_dir(out / "previews");
    for (const auto& list : top) {
        for (std::size_t r = 0; r < list.size(); ++r) {
            const PatchBox& b = list[r];
            const Sample& s = find_sample(ds, b.image_id);
            write_pgm(out / "previews" /
                          ("proto" + std::to_string(b.prototype_id) + "_top" + std::to_string(r + 1) + ".pgm"),
                      s.image, rects(std::span<const PatchBox>(&b, 1)));
        }
    }
    std::cout << "global patches: " << (out / "global_patches.csv").string() << '\n';

    if (!a.image) {
        if (!a.loc.empty()) throw ConfigError("--loc requires --image");
        return 0;
    }
    const Sample& s = find_sample(ds, *a.image);
    const ForwardResult fr = forward(model, s.image);
    const std::size_t hf = fr.density.dim(0), wf = fr.density.dim(1);
    std::vector<PatchBox> image_boxes;
    ensure_dir(out / "maps");
    for (std::size_t i = 0; i < model.prototypes.k(); ++i) {
        Tensor sim({hf, wf});
        for (std::size_t h = 0; h < hf; ++h)
            for (std::size_t w = 0; w < wf; ++w) sim.at(h, w) = fr.similarities.at(i, h, w);
        const BinaryMask mask = percentile_threshold(sim, a.percentile);
        Tensor mask_t({hf, wf});
        for (std::size_t p = 0; p < mask.values.size(); ++p) mask_t[p] = mask.values[p];
        const auto boxes = boxes_from_mask(connected_components(mask), sim, s.id, i);
        const std::string stem = "proto" + std::to_string(i);
        write_pdtf(out / "maps" / (stem + "_similarity.pdtf"), sim);
        write_pdtf(out / "maps" / (stem + "_mask.pdtf"), mask_t);
        write_pgm(out / "maps" / (stem + "_boxes.pgm"), s.image, rects(boxes));
        image_boxes.insert(image_boxes.end(), boxes.begin(), boxes.end());
    }
    write_text(out / "image_boxes.csv", boxes_csv(image_boxes));
    write_pdtf(out / "maps" / "density.pdtf", fr.density);

    std::vector<Explanation> expl;
    if (!a.loc.empty()) {
        const auto parts = split(a.loc, ',');
        if (parts.size() != 2) throw ConfigError("--loc: expected H,W, got '" + a.loc + "'");
        const auto h = parse_int(parts[0], "--loc H"), w = parse_int(parts[1], "--loc W");
        if (h < 0 || w < 0 || static_cast<std::size_t>(h) >= hf || static_cast<std::size_t>(w) >= wf) {
            throw ConfigError("--loc: (" + a.loc + ") outside the " + std::to_string(hf) + "x" +
                              std::to_string(wf) + " density grid");
        }
        expl.push_back(explain_location(model, fr, static_cast<std::size_t>(h), static_cast<std::size_t>(w)));
    } else {
        for (std::size_t h = 0; h < hf; ++h)
            for (std::size_t w = 0; w < wf; ++w) expl.push_back(explain_location(model, fr, h, w));
    }
    write_text(out / "explanations.csv", explanations_csv(expl));
    std::cout << "image " << s.id << ": predicted count " << format_double(fr.count) << ", true "
              << s.count() << '\n';
    return 0;
}

std::vector<std::string> parse_variants(const std::string& text) {
    std::vector<std::string> out;
    for (const std::string& v : split(text, ',')) {
        const std::string t = trim(v);
        variant_loss(t, LossConfig{});
        out.push_back(t);
    }
    return out;
}

RunObserver save_observer(const fs::path& out) {
    return [out](const std::string& label, const RunResult& run) {
        save_run(out / "runs" / label, run);
        std::cout << label << ": MAE " << format_double(run.eval.mae) << " after "
                  << run.history.epochs.size() << " epochs (" << run.history.stop_reason << ")\n";
    };
}

struct HarnessArgs {
    std::string data, extractor, out, seeds, variants = "full,no_diversity,no_proto_feature";
    std::string k_values = "2,4,6,8", tau_values = "0,0.4,0.8";
};

std::vector<std::uint64_t> harness_seeds(const HarnessArgs& a, const RunConfig& cfg) {
    return a.seeds.empty() ? cfg.seeds : parse_seed_list(a.seeds, "--seeds");
}

int cmd_ablate(const Common& common, const HarnessArgs& a) {
    const RunConfig cfg = resolve(common);
    const auto variants = parse_variants(a.variants);
    const auto seeds = harness_seeds(a, cfg);
    const fs::path out(a.out);
    echo_config(out, common, cfg);
    const Dataset ds = open_dataset(a.data);
    const FeatureExtractor fx = extractor_for(a.extractor, ds, cfg, out);
    const auto reports = run_ablation(fx, ds, cfg.experiment(), variants, seeds, save_observer(out));
    write_text(out / "ablation.csv", ablation_csv(reports));
    const std::string table = ablation_table(reports);
    write_text(out / "ablation_table.txt", table);
    std::cout << table;
    return 0;
}

int cmd_sweep_k(const Common& common, const HarnessArgs& a) {
    const RunConfig cfg = resolve(common);
    const auto ks = parse_size_list(a.k_values, "--k");
    const auto seeds = harness_seeds(a, cfg);
    const fs::path out(a.out);
    echo_config(out, common, cfg);
    const Dataset ds = open_dataset(a.data);
    const FeatureExtractor fx = extractor_for(a.extractor, ds, cfg, out);
    const auto points = sweep_k(fx, ds, cfg.experiment(), ks, seeds, save_observer(out));
    write_text(out / "sweep_k.csv", sweep_k_csv(points));
    std::cout << sweep_k_csv(points);
    return 0;
}

int cmd_sweep_tau(const Common& common, const HarnessArgs& a) {
    const RunConfig cfg = resolve(common);
    const auto taus = parse_double_list(a.tau_values, "--tau");
    const auto seeds = harness_seeds(a, cfg);
    const fs::path out(a.out);
    echo_config(out, common, cfg);
    const Dataset ds = open_dataset(a.data);
    const FeatureExtractor fx = extractor_for(a.extractor, ds, cfg, out);
    const auto points = sweep_tau(fx, ds, cfg.experiment(), taus, seeds, save_observer(out));
    write_text(out / "sweep_tau.csv", sweep_tau_csv(points));
    write_text(out / "sweep_tau_patches.csv", sweep_tau_patches_csv(points));
    std::cout << sweep_tau_csv(points);
    return 0;
}

int cmd_gradcheck(const GradcheckOptions& opts, const std::vector<std::string>& components) {
    constexpr double kTolerance = 1e-5;
    const auto results = run_gradcheck_suite(opts, components);
    bool ok = true;
    std::printf("%-20s %9s  %s\n", "component", "instances", "max_rel_error");
    for (const GradcheckResult& r : results) {
        const bool pass = r.max_relative_error <= kTolerance;
        ok = ok && pass;
        std::printf("%-20s %9zu  %.3e %s\n", r.component.c_str(), r.instances, r.max_relative_error,
                    pass ? "ok" : "FAIL");
    }
    if (!ok) {
        std::fprintf(stderr, "gradcheck: relative error above %.0e\n", kTolerance);
        return 2;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prototype-based interpretable density estimation for cell counting"};
    app.set_version_flag("--version", std::string("protodensity ") + PROTODENSITY_VERSION);
    app.require_subcommand(1);

    Common common;
    for (int i = 0; i < argc; ++i) common.command_line += (i ? " " : "") + std::string(argv[i]);
    app.add_option("--threads", common.threads, "Cap on worker threads (runs are single-threaded)")
        ->check(CLI::PositiveNumber);

    std::string out, data, extractor, model_dir, split_name = "test";

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
    add_config_options(gen, common);
    gen->add_option("--out", out, "Dataset directory")->required();

    auto* pre = app.add_subcommand("pretrain", "Pretrain and freeze the feature extractor");
    add_config_options(pre, common);
    pre->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    pre->add_option("--out", out, "Extractor checkpoint directory")->required();

    auto* trn = app.add_subcommand("train", "Train the prototype model");
    add_config_options(trn, common);
    trn->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    trn->add_option("--extractor", extractor, "Pretrained extractor checkpoint")
        ->required()
        ->check(CLI::ExistingDirectory);
    trn->add_option("--out", out, "Run directory")->required();

    auto* evl = app.add_subcommand("eval", "Count MAE of a trained model");
    add_config_options(evl, common);
    evl->add_option("--model", model_dir, "Model checkpoint")->required()->check(CLI::ExistingDirectory);
    evl->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    evl->add_option("--out", out, "Report CSV")->required();
    evl->add_option("--split", split_name, "Split to evaluate")->check(CLI::IsMember({"train", "test"}));

    ExplainArgs ex;
    std::uint64_t image_id = 0;
    auto* xpl = app.add_subcommand("explain", "Global patches, boxes and per-location explanations");
    add_config_options(xpl, common);
    xpl->add_option("--model", ex.model, "Model checkpoint")->required()->check(CLI::ExistingDirectory);
    xpl->add_option("--data", ex.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    xpl->add_option("--out", ex.out, "Output directory")->required();
    xpl->add_option("--global-k", ex.global_k, "Patches per prototype")->check(CLI::PositiveNumber);
    xpl->add_option("--percentile", ex.percentile, "Similarity threshold percentile")
        ->check(CLI::Range(0.0, 100.0));
    auto* image_opt = xpl->add_option("--image", image_id, "Sample id to explain");
    xpl->add_option("--loc", ex.loc, "Density-grid location H,W (default: every location)");

    HarnessArgs ha;
    auto add_harness = [&](CLI::App* cmd, const std::string& default_out) {
        add_config_options(cmd, common);
        cmd->add_option("--data", ha.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
        cmd->add_option("--extractor", ha.extractor, "Pretrained extractor (default: pretrain once)")
            ->check(CLI::ExistingDirectory);
        cmd->add_option("--seeds", ha.seeds, "Comma-separated seeds (default: eval.seeds)");
        ha.out = default_out;
        cmd->add_option("--out", ha.out, "Output directory")->capture_default_str();
    };
    auto* abl = app.add_subcommand("ablate", "Loss ablations");
    add_harness(abl, "ablate_out");
    abl->add_option("--variants", ha.variants, "full,no_diversity,no_proto_feature")->capture_default_str();
    auto* swk = app.add_subcommand("sweep-k", "MAE versus number of prototypes");
    add_harness(swk, "sweep_k_out");
    swk->add_option("--k", ha.k_values, "Comma-separated even K values")->capture_default_str();
    auto* swt = app.add_subcommand("sweep-tau", "Patches and MAE versus diversity threshold");
    add_harness(swt, "sweep_tau_out");
    swt->add_option("--tau", ha.tau_values, "Comma-separated tau values")->capture_default_str();

    GradcheckOptions gopts;
    std::vector<std::string> components;
    auto* grd = app.add_subcommand("gradcheck", "Finite-difference check of every analytic gradient");
    grd->add_option("--instances", gopts.instances, "Random instances per component")
        ->check(CLI::PositiveNumber);
    grd->add_option("--seed", gopts.seed, "Instance seed");
    grd->add_option("--component", components, "Restrict to these components");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return 1;
    }

    try {
        if (*gen) return cmd_gen_data(common, out);
        if (*pre) return cmd_pretrain(common, data, out);
        if (*trn) return cmd_train(common, data, extractor, out);
        if (*evl) return cmd_eval(common, model_dir, data, out, split_name);
        if (*xpl) {
            if (image_opt->count()) ex.image = image_id;
            return cmd_explain(common, ex);
        }
        if (*abl) return cmd_ablate(common, ha);
        if (*swk) return cmd_sweep_k(common, ha);
        if (*swt) return cmd_sweep_tau(common, ha);
        if (*grd) return cmd_gradcheck(gopts, components);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
