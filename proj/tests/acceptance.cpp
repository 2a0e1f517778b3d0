// Acceptance suite: one PASS/FAIL line per criterion, followed by the
// training invariants measured on the same runs. Exit status is nonzero if
// any line fails. PROTODENSITY_CLI is the path of the built executable.
//
//   protodensity_acceptance [work_dir]

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "protodensity/errors.hpp"
#include "protodensity/eval.hpp"
#include "protodensity/gradcheck.hpp"
#include "protodensity/interp.hpp"
#include "protodensity/io.hpp"
#include "protodensity/losses.hpp"
#include "protodensity/ops.hpp"
#include "protodensity/training.hpp"

namespace fs = std::filesystem;
using namespace protodensity;

namespace {

int failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
    std::printf("%-28s %s  %s\n", name.c_str(), pass ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

double wall_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_text(e.path());
    return out;
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd =
        std::string("'") + PROTODENSITY_CLI + "' " + args + " > '" + log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// ---------------------------------------------------------------------------

void criterion1() {
    const double t0 = cpu_seconds();
    GradcheckOptions opts;
    opts.instances = 20;
    opts.h = 1e-6;
    const std::vector<std::string> comps{"density_loss", "proto_feature_loss", "diversity_loss",
                                         "total_loss", "model_count"};
    double worst = 0.0;
    std::string detail;
    bool ok = true;
    for (const GradcheckResult& r : run_gradcheck_suite(opts, comps)) {
        worst = std::max(worst, r.max_relative_error);
        ok = ok && r.instances >= 20 && r.max_relative_error <= 1e-5;
        detail += r.component + "=" + fmt("%.1e", r.max_relative_error) + " ";
    }
    const double cpu = cpu_seconds() - t0;
    report("1 gradient correctness", ok && cpu < 60.0,
           detail + "max=" + fmt("%.2e", worst) + " cpu=" + fmt("%.1fs", cpu));
}

void criterion2() {
    const double div_same = diversity_loss(Tensor({4, 5}, 0.7), 2, 2, 0.8, 0.8);
    Tensor ortho({4, 4});
    ortho.at(0, 0) = 1.0;
    ortho.at(1, 1) = 1.0;
    ortho.at(2, 2) = 2.0;
    ortho.at(3, 3) = 0.5;
    const double div_ortho = diversity_loss(ortho, 2, 2, 0.8, 0.8);

    // Prototypes copied from F' at the GT argmax (cell) and argmin (background).
    Rng rng(2, 1);
    ModelDims dims;
    dims.k_cell = dims.k_bg = 2;
    dims.d = 8;
    auto fx = FeatureExtractor::initialized(0);
    fx.set_trainable(false);
    CountModel m = CountModel::create(fx, dims, 0);
    Tensor image({1, 48, 48});
    for (double& v : image.data()) v = rng.uniform();
    Tensor gt({1, 6, 6});
    for (double& v : gt.data()) v = rng.uniform();
    const Tensor fp = process_features(m, extract_features(fx, image));
    const std::size_t hi = ops::argmax(gt.data()), lo = ops::argmin(gt.data());
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t c = 0; c < 8; ++c)
            m.prototypes.prototypes.value.at(i, c) = fp[c * 36 + (i < 2 ? hi : lo)];
    const Tensor phi = ops::distance_map(fp, m.prototypes.prototypes.value).reshaped({1, 4, 6, 6});
    const double pf = proto_feature_loss(phi, gt, 2, 2);

    const double s0 = ops::log_similarity(Tensor({1}, 0.0), 1e-4)[0];
    const bool ok = std::abs(div_same - 0.2) <= 1e-15 && div_ortho == 0.0 && pf == 0.0 &&
                    std::abs(s0 - std::log(1e4)) <= 1e-12;
    report("2 loss-value oracles", ok,
           "div(identical)=" + format_double(div_same) + " div(orthogonal)=" + format_double(div_ortho) +
               " proto_feature(copied)=" + format_double(pf) + " S(0)-log(1/eps)=" +
               fmt("%.1e", s0 - std::log(1e4)));
}

void criterion3() {
    Rng rng(3, 1);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        DotAnnotation a;
        const std::size_t n = rng.below(150);
        for (std::size_t i = 0; i < n; ++i) a.points.push_back({rng.uniform(0.0, 128.0), rng.uniform(0.0, 128.0)});
        const Tensor d = make_density_map(a, 128, 128, 8, rng.uniform(0.5, 3.0));
        worst = std::max(worst, std::abs(ops::sum(d) - static_cast<double>(n)));
    }
    ModelDims dims;
    auto fx = FeatureExtractor::initialized(1);
    fx.set_trainable(false);
    const CountModel m = CountModel::create(fx, dims, 1);
    bool exact = true;
    for (int trial = 0; trial < 20; ++trial) {
        Tensor img({1, 64, 64});
        for (double& v : img.data()) v = rng.uniform();
        const ForwardResult r = forward(m, img);
        exact = exact && r.count == ops::sum(r.density) && r.count == count(r.density);
    }
    report("3 mass conservation", worst <= 1e-7 && exact,
           "max|sum(gt)-n|=" + fmt("%.2e", worst) + " over 1000 annotations; count==sum(D) " +
               (exact ? "exact" : "MISMATCH"));
}

struct AblationRuns {
    Dataset dataset;
    std::vector<AblationReport> reports;
    std::map<std::string, RunResult> runs;  // by label
    std::map<std::string, double> seconds;
    std::uint64_t checksum_before = 0;
    double baseline = 0.0;
    double pretrain_seconds = 0.0;
};

AblationRuns run_default_ablation() {
    AblationRuns a;
    a.dataset = make_dataset(SceneConfig{}, 100, 50);
    a.baseline = train_mean_baseline(a.dataset);
    auto t0 = std::chrono::steady_clock::now();
    const FeatureExtractor fx = pretrain_extractor(a.dataset, PretrainConfig{}).extractor;
    a.pretrain_seconds = wall_since(t0);
    a.checksum_before = fx.checksum();
    std::printf("# pretrained extractor in %.0fs; train-mean baseline MAE %.4f\n", a.pretrain_seconds,
                a.baseline);
    const std::vector<std::string> variants{"full", "no_diversity", "no_proto_feature"};
    const std::vector<std::uint64_t> seeds{0, 1, 2};
    t0 = std::chrono::steady_clock::now();
    auto last = t0;
    a.reports = run_ablation(fx, a.dataset, ExperimentConfig{}, variants, seeds,
                             [&](const std::string& label, const RunResult& run) {
                                 const auto now = std::chrono::steady_clock::now();
                                 a.seconds[label] = std::chrono::duration<double>(now - last).count();
                                 last = now;
                                 a.runs.emplace(label, run);
                                 std::printf("# %s: MAE %.4f, %zu epochs, %.0fs\n", label.c_str(),
                                             run.eval.mae, run.history.epochs.size(), a.seconds[label]);
                                 std::fflush(stdout);
                             });
    std::printf("%s", ablation_table(a.reports).c_str());
    return a;
}

const AblationReport& find(const AblationRuns& a, const std::string& variant, std::uint64_t seed) {
    for (const AblationReport& r : a.reports)
        if (r.variant == variant && r.seed == seed) return r;
    throw std::logic_error("missing ablation report " + variant);
}

void criterion4(const AblationRuns& a) {
    int wins = 0;
    std::string detail;
    double seconds = a.pretrain_seconds;
    for (std::uint64_t seed : {0, 1, 2}) {
        const AblationReport& full = find(a, "full", seed);
        const AblationReport& nodiv = find(a, "no_diversity", seed);
        const bool win = full.distances.cell.min > nodiv.distances.cell.min &&
                         full.distances.background.min > nodiv.distances.background.min;
        wins += win ? 1 : 0;
        seconds += a.seconds.at("full_seed" + std::to_string(seed)) +
                   a.seconds.at("no_diversity_seed" + std::to_string(seed));
        detail += "s" + std::to_string(seed) + " cell " + fmt("%.4f", full.distances.cell.min) + ">" +
                  fmt("%.4f", nodiv.distances.cell.min) + " bg " +
                  fmt("%.4f", full.distances.background.min) + ">" +
                  fmt("%.4f", nodiv.distances.background.min) + "; ";
    }
    report("4 diversity ablation", wins == 3 && seconds < 1800.0,
           std::to_string(wins) + "/3 seeds; " + detail + "time=" + fmt("%.0fs", seconds));
}

void criterion5(const AblationRuns& a) {
    double cell = 0.0, bg_full = 0.0, bg_nopf = 0.0;
    for (std::uint64_t seed : {0, 1, 2}) {
        cell += find(a, "full", seed).localization.cell / 3.0;
        bg_full += find(a, "full", seed).localization.background / 3.0;
        bg_nopf += find(a, "no_proto_feature", seed).localization.background / 3.0;
    }
    const bool ok = cell >= 0.75 && (1.0 - bg_full) >= 0.75 && bg_nopf > bg_full;
    report("5 prototype-to-feature", ok,
           "full: cell on-cell " + fmt("%.3f", cell) + " (>=0.75), bg off-cell " + fmt("%.3f", 1.0 - bg_full) +
               " (>=0.75); bg on-cell full " + fmt("%.3f", bg_full) + " vs no_proto_feature " +
               fmt("%.3f", bg_nopf) + " (must increase)");
}

void criterion6(const AblationRuns& a) {
    bool ok = true;
    std::string detail = "bar=" + fmt("%.4f", 0.5 * a.baseline) + ";";
    for (std::uint64_t seed : {0, 1, 2}) {
        const std::string label = "full_seed" + std::to_string(seed);
        const double mae = find(a, "full", seed).mae, secs = a.seconds.at(label);
        ok = ok && mae < 0.5 * a.baseline && secs < 600.0;
        detail += " s" + std::to_string(seed) + " MAE " + fmt("%.4f", mae) + " in " + fmt("%.0fs", secs);
    }
    report("6 counting skill", ok, detail);
}

void training_properties(const AblationRuns& a) {
    bool lower = true, frozen = true, provenance = true, same_split = true;
    std::string detail;
    for (std::uint64_t seed : {0, 1, 2}) {
        const RunResult& run = a.runs.at("full_seed" + std::to_string(seed));
        const double last = run.history.epochs.back().loss.total, first = run.history.initial_loss.total;
        lower = lower && last < first;
        detail += "s" + std::to_string(seed) + " " + fmt("%.3f", first) + "->" + fmt("%.3f", last) + " ";
    }
    for (const auto& [label, run] : a.runs) {
        frozen = frozen && run.model.extractor.checksum() == a.checksum_before;
        provenance = provenance && run.model.provenance.size() == run.model.prototypes.k();
        for (const Provenance& p : run.model.provenance) {
            bool found = false;
            for (const Sample& s : a.dataset.train)
                found = found || (s.id == p.image_id && p.h < s.density_gt.dim(0) && p.w < s.density_gt.dim(1));
            provenance = provenance && found;
        }
    }
    for (const AblationReport& r : a.reports) same_split = same_split && r.manifest_hash == a.dataset.manifest_hash;
    report("property final<initial loss", lower, "last-epoch training loss, full: " + detail);
    report("property frozen extractor", frozen, "checksum unchanged across 9 training runs");
    report("property provenance", provenance, "every prototype resolves to a train image and location");
    report("property shared split", same_split, "one manifest hash across variants and seeds");
}

void criterion7(const Dataset& dataset) {
    auto fx = FeatureExtractor::initialized(7);
    fx.set_trainable(false);
    CountModel m = CountModel::create(fx, ModelDims{}, 7);
    const auto feats = cache_features(fx, dataset.train);
    double worst = 0.0;
    bool idempotent = true;
    std::size_t checked = 0;
    auto check = [&](const CountModel& model) {
        const Tensor& p = model.prototypes.prototypes.value;
        const std::size_t d = p.dim(1);
        for (std::size_t i = 0; i < p.dim(0); ++i) {
            double best = INFINITY;
            for (const Tensor& f : feats) {
                const Tensor fp = process_features(model, f);
                const std::size_t hw = fp.size() / d;
                for (std::size_t loc = 0; loc < hw; ++loc) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < d; ++c) s += std::pow(p.at(i, c) - fp[c * hw + loc], 2);
                    best = std::min(best, s);
                }
            }
            worst = std::max(worst, best);
        }
        CountModel again = model;
        project_prototypes(again, feats, dataset.train);
        idempotent = idempotent && again.prototypes.prototypes.value == model.prototypes.prototypes.value;
        ++checked;
    };
    TrainConfig tc;
    tc.max_epochs = 6;
    tc.projection_interval = 2;
    tc.patience = 0;
    TrainCallbacks cb;
    cb.on_projection = [&](std::size_t, const CountModel& model) { check(model); };
    train(m, dataset, tc, cb);
    report("7 projection exactness", worst <= 1e-12 && idempotent && checked == 3,
           std::to_string(checked) + " projections; max min-distance " + fmt("%.1e", worst) +
               (idempotent ? "; idempotent" : "; NOT idempotent"));
}

void criterion8(const AblationRuns& a) {
    Rng rng(8, 1);
    std::size_t pct_ok = 0, cc_ok = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const Tensor map = oracles::random_map(rng, 16, 16, trial);
        const double q = trial % 2 ? 99.0 : rng.uniform(0.1, 100.0);
        pct_ok += percentile_threshold(map, q).values == oracles::percentile_mask(map, q) ? 1 : 0;
        const BinaryMask mask = oracles::random_mask(rng, 16, 16, rng.uniform(0.05, 0.7));
        const ComponentLabels got = connected_components(mask);
        cc_ok += got.labels == oracles::flood_fill(mask) ? 1 : 0;
    }
    const CountModel& model = a.runs.at("full_seed0").model;
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const Sample& s = a.dataset.test[rng.below(a.dataset.test.size())];
        const std::size_t h = rng.below(16), w = rng.below(16);
        const Explanation e = explain_location(model, s.image, h, w);
        double sum = 0.0;
        for (const Contribution& c : e.contributions) sum += c.contribution;
        worst = std::max(worst, std::abs(sum - forward(model, s.image).density.at(h, w)));
    }
    report("8 interpretation oracles", pct_ok == 1000 && cc_ok == 1000 && worst <= 1e-9,
           "percentile " + std::to_string(pct_ok) + "/1000, components " + std::to_string(cc_ok) +
               "/1000, completeness max err " + fmt("%.1e", worst) + " at 100 locations");
}

void criterion9(const fs::path& work) {
    const Dataset ds = make_dataset(SceneConfig{}, 24, 8);
    PretrainConfig pc;
    pc.epochs = 1;
    const FeatureExtractor fx = pretrain_extractor(ds, pc).extractor;
    ExperimentConfig cfg;
    cfg.train.max_epochs = 10;
    cfg.train.projection_interval = 4;
    std::map<std::string, std::string> out[2];
    for (int r = 0; r < 2; ++r) {
        const fs::path dir = work / ("repro" + std::to_string(r));
        fs::remove_all(dir);
        TrainCallbacks cb;
        cb.on_projection = [&](std::size_t epoch, const CountModel& m) {
            save_model(dir / ("epoch_" + std::to_string(epoch)), m);
        };
        const RunResult run = run_experiment(fx, ds, cfg, 5, cb);
        save_model(dir / "final", run.model);
        write_text(dir / "history.csv", history_csv(run.history));
        write_text(dir / "steps.csv", steps_csv(run.history));
        write_text(dir / "projections.csv", projections_csv(run.history));
        out[r] = snapshot(dir);
    }
    std::size_t differing = 0;
    for (const auto& [name, bytes] : out[0]) differing += out[1].count(name) && out[1].at(name) == bytes ? 0 : 1;
    report("9 reproducibility", differing == 0 && out[0].size() == out[1].size() && out[0].size() > 3,
           std::to_string(out[0].size()) + " files compared, " + std::to_string(differing) + " differ");
}

/// Header matches and every row has its column count with finite numbers.
bool well_formed_csv(const fs::path& path, const std::string& header, std::size_t min_rows) {
    if (!fs::exists(path)) return false;
    std::istringstream in(read_text(path));
    std::string line;
    if (!std::getline(in, line) || line != header) return false;
    const std::size_t cols = split(header, ',').size();
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        const auto parts = split(line, ',');
        if (parts.size() != cols) return false;
        for (const std::string& p : parts) {
            try {
                if (!std::isfinite(parse_double(p, "csv"))) return false;
            } catch (const ConfigError&) {
                return false;
            }
        }
        ++rows;
    }
    return rows >= min_rows;
}

void criterion10(const fs::path& work) {
    const fs::path data = work / "sweep_data", fx = work / "sweep_fx", log = work / "cli.log";
    fs::remove_all(work / "sweep_k");
    fs::remove_all(work / "sweep_tau");
    const std::string set = " --set data.n_train=24 --set data.n_test=8 --set pretrain.epochs=1"
                            " --set train.max_epochs=20 --set train.projection_interval=10 --set eval.seeds=0";
    bool ok = run_cli("gen-data --out '" + data.string() + "'" + set, log) == 0 &&
              run_cli("pretrain --data '" + data.string() + "' --out '" + fx.string() + "'" + set, log) == 0;
    const int k_code = run_cli("sweep-k --data '" + data.string() + "' --extractor '" + fx.string() + "' --out '" +
                                   (work / "sweep_k").string() + "' --k 2,4,6,8" + set,
                               log);
    const int tau_code = run_cli("sweep-tau --data '" + data.string() + "' --extractor '" + fx.string() +
                                     "' --out '" + (work / "sweep_tau").string() + "' --tau 0,0.4,0.8" + set,
                                 log);
    ok = ok && k_code == 0 && tau_code == 0;
    const bool csvs = well_formed_csv(work / "sweep_k" / "sweep_k.csv", "k,seed,manifest_hash,mae", 4) &&
                      well_formed_csv(work / "sweep_tau" / "sweep_tau.csv", "tau,seed,manifest_hash,mae", 3) &&
                      well_formed_csv(work / "sweep_tau" / "sweep_tau_patches.csv",
                                      "tau,seed,prototype_id,rank,image_id,x0,y0,x1,y1,score", 3 * 8);
    // K = 2 leaves one prototype per group: the diversity term must be exactly zero throughout.
    bool k2_zero = false;
    double k2_mae = NAN;
    const fs::path k2 = work / "sweep_k" / "runs" / "k2_seed0" / "history.csv";
    if (fs::exists(k2)) {
        std::istringstream in(read_text(k2));
        std::string line;
        std::getline(in, line);
        k2_zero = true;
        std::size_t rows = 0;
        while (std::getline(in, line)) {
            k2_zero = k2_zero && parse_double(split(line, ',')[3], "diversity") == 0.0;
            ++rows;
        }
        k2_zero = k2_zero && rows == 20;
    }
    if (csvs) {
        std::istringstream in(read_text(work / "sweep_k" / "sweep_k.csv"));
        std::string line;
        std::getline(in, line);
        std::getline(in, line);
        k2_mae = parse_double(split(line, ',')[3], "mae");
    }
    report("10 harness coverage", ok && csvs && k2_zero,
           std::string("sweep-k exit ") + std::to_string(k_code) + ", sweep-tau exit " + std::to_string(tau_code) +
               ", CSVs " + (csvs ? "well-formed" : "MALFORMED") + ", K=2 diversity " +
               (k2_zero ? "0 at every epoch" : "NONZERO/missing") + ", K=2 MAE " + fmt("%.3f", k2_mae));
}

} // namespace

int main(int argc, char** argv) {
    const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "protodensity_acceptance";
    fs::create_directories(work);
    const auto t0 = std::chrono::steady_clock::now();
    try {
        criterion1();
        criterion2();
        criterion3();
        const AblationRuns ablation = run_default_ablation();
        criterion4(ablation);
        criterion5(ablation);
        criterion6(ablation);
        criterion7(ablation.dataset);
        criterion8(ablation);
        criterion9(work);
        criterion10(work);
        training_properties(ablation);
    } catch (const std::exception& e) {
        std::printf("acceptance aborted: %s\n", e.what());
        return 2;
    }
    std::printf("# %d failing line(s); total %.0fs\n", failures, wall_since(t0));
    return failures == 0 ? 0 : 1;
}
