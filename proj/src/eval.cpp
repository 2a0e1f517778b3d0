#include "protodensity/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "protodensity/errors.hpp"
#include "protodensity/io.hpp"

namespace protodensity {

EvalReport mae(const CountPredictor& predictor, std::span<const Sample> samples) {
    if (samples.empty()) throw ConfigError("mae: split is empty");
    EvalReport r;
    double total = 0.0;
    for (const Sample& s : samples) {
        const double truth = static_cast<double>(s.count());
        const double pred = predictor(s);
        r.images.push_back({s.id, truth, pred, std::abs(pred - truth)});
        total += r.images.back().abs_error;
    }
    r.mae = total / static_cast<double>(samples.size());
    return r;
}

EvalReport mae(const CountModel& model, std::span<const Sample> samples) {
    return mae([&](const Sample& s) { return forward(model, s.image).count; }, samples);
}

EvalReport mae(const CountModel& model, std::span<const Tensor> features,
               std::span<const Sample> samples) {
    if (features.size() != samples.size()) {
        throw DimensionError("mae: feature and sample counts differ");
    }
    // The predictor sees elements of `samples` itself, so the offset indexes features.
    return mae(
        [&](const Sample& s) {
            return forward_from_features(model, features[static_cast<std::size_t>(&s - samples.data())])
                .count;
        },
        samples);
}

double train_mean_baseline(const Dataset& dataset) {
    if (dataset.train.empty()) throw ConfigError("train_mean_baseline: training split is empty");
    double mean = 0.0;
    for (const Sample& s : dataset.train) mean += static_cast<double>(s.count());
    mean /= static_cast<double>(dataset.train.size());
    return mae([mean](const Sample&) { return mean; }, dataset.test).mae;
}

std::string eval_csv(const EvalReport& report) {
    std::string out = "id,true_count,predicted_count,abs_error\n";
    for (const ImageResult& r : report.images) {
        out += std::to_string(r.id) + ',' + format_double(r.true_count) + ',' +
               format_double(r.predicted_count) + ',' + format_double(r.abs_error) + '\n';
    }
    return out;
}

double median(std::span<const double> values) {
    if (values.empty()) throw DimensionError("median: no values");
    std::vector<double> v(values.begin(), values.end());
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

LocalizationRates localization_rates(const CountModel& model,
                                     const std::vector<std::vector<PatchBox>>& top,
                                     std::span<const Sample> samples) {
    const std::size_t K = model.prototypes.k(), k_cell = model.prototypes.k_cell;
    if (top.size() != K) throw DimensionError("localization_rates: one patch list per prototype");
    std::map<std::uint64_t, const Sample*> by_id;
    for (const Sample& s : samples) by_id[s.id] = &s;
    std::size_t cell_hits = 0, bg_hits = 0;
    for (std::size_t i = 0; i < K; ++i) {
        if (top[i].empty()) throw DimensionError("localization_rates: empty patch list");
        const PatchBox& b = top[i].front();
        const auto it = by_id.find(b.image_id);
        if (it == by_id.end()) {
            throw DimensionError("localization_rates: unknown image id " + std::to_string(b.image_id));
        }
        const Tensor& gt = it->second->density_gt;
        const bool above = gt.at(b.peak_h, b.peak_w) > median(gt.data());
        (i < k_cell ? cell_hits : bg_hits) += above ? 1 : 0;
    }
    return {static_cast<double>(cell_hits) / static_cast<double>(k_cell),
            static_cast<double>(bg_hits) / static_cast<double>(K - k_cell)};
}

RunResult run_experiment(const FeatureExtractor& extractor, const Dataset& dataset,
                         const ExperimentConfig& config, std::uint64_t seed,
                         const TrainCallbacks& callbacks) {
    if (!extractor.frozen()) throw ConfigError("run_experiment: extractor must be frozen");
    TrainConfig tc = config.train;
    tc.seed = seed;
    RunResult r{CountModel::create(extractor, config.dims, seed), {}, {}};
    r.history = train(r.model, dataset, tc, callbacks);
    r.eval = dataset.test.empty() ? EvalReport{} : mae(r.model, dataset.test);
    return r;
}

LossConfig variant_loss(const std::string& variant, const LossConfig& base) {
    LossConfig c = base;
    if (variant == "full") return c;
    if (variant == "no_diversity") {
        c.lambda3 = 0.0;
        return c;
    }
    if (variant == "no_proto_feature") {
        c.lambda2 = 0.0;
        return c;
    }
    throw ConfigError("ablation variant '" + variant +
                      "': expected full, no_diversity or no_proto_feature");
}

std::vector<AblationReport> run_ablation(const FeatureExtractor& extractor, const Dataset& dataset,
                                         const ExperimentConfig& base,
                                         std::span<const std::string> variants,
                                         std::span<const std::uint64_t> seeds,
                                         const RunObserver& observer) {
    for (const std::string& v : variants) variant_loss(v, base.train.loss);
    const auto train_features = cache_features(extractor, dataset.train);
    std::vector<AblationReport> out;
    for (const std::uint64_t seed : seeds) {
        for (const std::string& v : variants) {
            ExperimentConfig cfg = base;
            cfg.train.loss = variant_loss(v, base.train.loss);
            const RunResult run = run_experiment(extractor, dataset, cfg, seed);
            const auto top = global_top_patches(run.model, train_features, dataset.train,
                                                cfg.top_k, cfg.percentile);
            const Tensor& p = run.model.prototypes.prototypes.value;
            out.push_back({v, seed, dataset.manifest_hash, run.eval.mae,
                           intra_group_distances(p, cfg.dims.k_cell, cfg.dims.k_bg),
                           localization_rates(run.model, top, dataset.train),
                           run.history.epochs.size()});
            if (observer) observer(v + "_seed" + std::to_string(seed), run);
        }
    }
    return out;
}

std::string ablation_csv(std::span<const AblationReport> reports) {
    std::string out =
        "variant,seed,manifest_hash,mae,min_cell,avg_cell,min_bg,avg_bg,cell_rate,bg_rate,epochs\n";
    for (const AblationReport& r : reports) {
        out += r.variant + ',' + std::to_string(r.seed) + ',' + std::to_string(r.manifest_hash) +
               ',' + format_double(r.mae) + ',' + format_double(r.distances.cell.min) + ',' +
               format_double(r.distances.cell.mean) + ',' +
               format_double(r.distances.background.min) + ',' +
               format_double(r.distances.background.mean) + ',' +
               format_double(r.localization.cell) + ',' +
               format_double(r.localization.background) + ',' + std::to_string(r.epochs) + '\n';
    }
    return out;
}

std::string ablation_table(std::span<const AblationReport> reports) {
    struct Acc {
        double min_cell = 0, min_bg = 0, avg_cell = 0, avg_bg = 0;
        std::size_t n = 0;
    };
    std::vector<std::string> order;
    std::map<std::string, Acc> acc;
    for (const AblationReport& r : reports) {
        if (!acc.count(r.variant)) order.push_back(r.variant);
        Acc& a = acc[r.variant];
        a.min_cell += r.distances.cell.min;
        a.min_bg += r.distances.background.min;
        a.avg_cell += r.distances.cell.mean;
        a.avg_bg += r.distances.background.mean;
        ++a.n;
    }
    std::ostringstream os;
    auto cell = [&](double v, std::size_t n) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%10.4f", v / static_cast<double>(n));
        return std::string(buf);
    };
    os << "                    |      Minimum          |      Average\n"
       << "variant             |   Cell     Background |   Cell     Background\n"
       << "--------------------+-----------------------+----------------------\n";
    for (const std::string& v : order) {
        const Acc& a = acc[v];
        char name[24];
        std::snprintf(name, sizeof name, "%-20s", v.c_str());
        os << name << '|' << cell(a.min_cell, a.n) << ' ' << cell(a.min_bg, a.n) << "  |"
           << cell(a.avg_cell, a.n) << ' ' << cell(a.avg_bg, a.n) << '\n';
    }
    return os.str();
}

std::vector<SweepPoint> sweep_k(const FeatureExtractor& extractor, const Dataset& dataset,
                                const ExperimentConfig& base, std::span<const std::size_t> k_values,
                                std::span<const std::uint64_t> seeds, const RunObserver& observer) {
    for (const std::size_t k : k_values) {
        if (k < 2 || k % 2) {
            throw ConfigError("sweep-k: K = " + std::to_string(k) + " is not an even value >= 2");
        }
    }
    std::vector<SweepPoint> out;
    for (const std::size_t k : k_values) {
        for (const std::uint64_t seed : seeds) {
            ExperimentConfig cfg = base;
            cfg.dims.k_cell = cfg.dims.k_bg = k / 2;
            const RunResult run = run_experiment(extractor, dataset, cfg, seed);
            out.push_back({static_cast<double>(k), seed, dataset.manifest_hash, run.eval.mae, {}});
            if (observer) observer("k" + std::to_string(k) + "_seed" + std::to_string(seed), run);
        }
    }
    return out;
}

std::vector<SweepPoint> sweep_tau(const FeatureExtractor& extractor, const Dataset& dataset,
                                  const ExperimentConfig& base, std::span<const double> tau_values,
                                  std::span<const std::uint64_t> seeds,
                                  const RunObserver& observer) {
    for (const double tau : tau_values) {
        if (!(tau >= -1.0 && tau <= 1.0)) {
            throw ConfigError("sweep-tau: tau = " + format_double(tau) + " outside [-1, 1]");
        }
    }
    const auto train_features = cache_features(extractor, dataset.train);
    std::vector<SweepPoint> out;
    for (const double tau : tau_values) {
        for (const std::uint64_t seed : seeds) {
            ExperimentConfig cfg = base;
            cfg.train.loss.tau_cell = cfg.train.loss.tau_bg = tau;
            const RunResult run = run_experiment(extractor, dataset, cfg, seed);
            out.push_back({tau, seed, dataset.manifest_hash, run.eval.mae,
                           global_top_patches(run.model, train_features, dataset.train, cfg.top_k,
                                              cfg.percentile)});
            if (observer) observer("tau" + format_double(tau) + "_seed" + std::to_string(seed), run);
        }
    }
    return out;
}

namespace {

std::string sweep_csv(const char* key, std::span<const SweepPoint> points) {
    std::string out = std::string(key) + ",seed,manifest_hash,mae\n";
    for (const SweepPoint& p : points) {
        out += format_double(p.value) + ',' + std::to_string(p.seed) + ',' +
               std::to_string(p.manifest_hash) + ',' + format_double(p.mae) + '\n';
    }
    return out;
}

} // namespace

std::string sweep_k_csv(std::span<const SweepPoint> points) { return sweep_csv("k", points); }

std::string sweep_tau_csv(std::span<const SweepPoint> points) { return sweep_csv("tau", points); }

std::string sweep_tau_patches_csv(std::span<const SweepPoint> points) {
    std::string out = "tau,seed,prototype_id,rank,image_id,x0,y0,x1,y1,score\n";
    for (const SweepPoint& p : points) {
        for (const auto& list : p.patches) {
            for (std::size_t r = 0; r < list.size(); ++r) {
                const PatchBox& b = list[r];
                out += format_double(p.value) + ',' + std::to_string(p.seed) + ',' +
                       std::to_string(b.prototype_id) + ',' + std::to_string(r + 1) + ',' +
                       std::to_string(b.image_id) + ',' + std::to_string(b.x0) + ',' +
                       std::to_string(b.y0) + ',' + std::to_string(b.x1) + ',' +
                       std::to_string(b.y1) + ',' + format_double(b.score) + '\n';
            }
        }
    }
    return out;
}

} // namespace protodensity
