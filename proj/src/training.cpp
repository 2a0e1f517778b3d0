#include "protodensity/training.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "protodensity/errors.hpp"
#include "protodensity/io.hpp"
#include "protodensity/ops.hpp"
#include "protodensity/rng.hpp"

namespace protodensity {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void AdamConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate: must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1: must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2: must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("train.adam_epsilon: must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay: must be non-negative");
}

void adam_update(Tensor& value, const Tensor& grad, AdamMoments& mom, std::size_t t,
                 const AdamConfig& c, bool decay) {
    require_same_shape(value, grad, "adam_update");
    if (t == 0) throw ConfigError("adam_update: step index is 1-based");
    if (mom.m.shape() != value.shape()) mom.m = Tensor(value.shape());
    if (mom.v.shape() != value.shape()) mom.v = Tensor(value.shape());
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
    auto x = value.data();
    auto g = grad.data();
    auto m = mom.m.data();
    auto v = mom.v.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1, vhat = v[i] / bc2;
        double step = mhat / (std::sqrt(vhat) + c.epsilon);
        if (decay) step += c.weight_decay * x[i];
        x[i] -= c.learning_rate * step;
    }
}

Adam::Adam(AdamConfig config) : config_(config) { config_.validate(); }

void Adam::add(Parameter& param, bool decay) { slots_.push_back({&param, decay, {}}); }

void Adam::step() {
    ++t_;
    for (Slot& s : slots_) {
        if (!s.param->trainable) continue;
        adam_update(s.param->value, s.param->grad, s.moments, t_, config_, s.decay);
    }
}

void Adam::zero_grad() {
    for (Slot& s : slots_) s.param->zero_grad();
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

void PretrainConfig::validate() const {
    if (epochs == 0) throw ConfigError("pretrain.epochs: must be at least 1");
    if (!(learning_rate > 0.0)) throw ConfigError("pretrain.learning_rate: must be positive");
    if (batch_size == 0) throw ConfigError("pretrain.batch_size: must be at least 1");
}

namespace {

struct TempHead {
    Parameter weight;  // [1 x 64]
    Parameter bias;    // [1]
};

ad::Var pretrain_prediction(ad::Tape& tape, FeatureExtractor& fx, TempHead& head,
                            const Tensor& image) {
    ad::Var f = ad::extract_features(tape, fx, tape.constant(image));
    ad::Var d = ad::conv1x1(f, tape.parameter(head.weight), tape.parameter(head.bias));
    const Shape& s = d.value().shape();
    return ad::reshape(d, {s[1], s[2]});
}

double pretrain_mse(FeatureExtractor& fx, TempHead& head, std::span<const Sample> samples) {
    double total = 0.0;
    for (const Sample& s : samples) {
        ad::Tape tape;
        ad::Var pred = pretrain_prediction(tape, fx, head, s.image);
        total += ad::density_loss(pred, tape.constant(s.density_gt)).value().item();
    }
    return total / static_cast<double>(samples.size());
}

std::vector<std::size_t> shuffled_order(std::size_t n, Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    return order;
}

} // namespace

PretrainResult pretrain_extractor(const Dataset& dataset, const PretrainConfig& config) {
    config.validate();
    if (dataset.train.empty()) throw ConfigError("pretrain: training split is empty");

    PretrainResult r;
    FeatureExtractor fx = FeatureExtractor::initialized(config.seed);
    TempHead head;
    {
        Rng init(config.seed, 0x68656164ull);
        Tensor w({1, FeatureExtractor::kOutChannels});
        const double bound = 1.0 / std::sqrt(static_cast<double>(FeatureExtractor::kOutChannels));
        for (double& v : w.data()) v = init.uniform(-bound, bound);
        head.weight = Parameter(std::move(w));
        head.bias = Parameter(Tensor({1}));
    }

    AdamConfig ac;
    ac.learning_rate = config.learning_rate;
    ac.weight_decay = 0.0;
    Adam opt(ac);
    for (std::size_t b = 0; b < 3; ++b) {
        opt.add(fx.weight[b], false);
        opt.add(fx.bias[b], false);
    }
    opt.add(head.weight, false);
    opt.add(head.bias, false);

    const std::span<const Sample> train(dataset.train);
    r.initial_mse = pretrain_mse(fx, head, train);
    Rng rng(config.seed, 0x70726574ull);
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto order = shuffled_order(train.size(), rng);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const double inv = 1.0 / static_cast<double>(end - start);
            opt.zero_grad();
            double batch_loss = 0.0;
            // One tape per sample keeps peak memory at a single image's graph.
            for (std::size_t j = start; j < end; ++j) {
                const Sample& s = train[order[j]];
                ad::Tape tape;
                ad::Var pred = pretrain_prediction(tape, fx, head, s.image);
                ad::Var loss = ad::scale(ad::density_loss(pred, tape.constant(s.density_gt)), inv);
                batch_loss += loss.value().item();
                tape.backward(loss);
            }
            if (!std::isfinite(batch_loss)) {
                throw NumericError("pretrain: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(batches));
            }
            opt.step();
            epoch_loss += batch_loss;
            ++batches;
        }
        r.epoch_mse.push_back(epoch_loss / static_cast<double>(batches));
    }
    r.final_mse = pretrain_mse(fx, head, train);
    fx.set_trainable(false);
    r.extractor = std::move(fx);
    return r;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    adam.validate();
    if (batch_size == 0) throw ConfigError("train.batch_size: must be at least 1");
    if (max_epochs == 0) throw ConfigError("train.max_epochs: must be at least 1");
    if (projection_interval == 0) throw ConfigError("train.projection_interval: must be at least 1");
    if (!(min_delta >= 0.0)) throw ConfigError("train.min_delta: must be non-negative");
    loss.validate();
}

std::string steps_csv(const TrainHistory& h) {
    std::string out = loss_csv_header() + '\n';
    for (std::size_t i = 0; i < h.steps.size(); ++i) out += loss_csv_row(i + 1, h.steps[i]) + '\n';
    return out;
}

std::string history_csv(const TrainHistory& h) {
    std::string out = "epoch,density,proto_feature,diversity,total,val_mae\n";
    for (const EpochRecord& e : h.epochs) {
        out += loss_csv_row(e.epoch, e.loss) + ',' + format_double(e.val_mae) + '\n';
    }
    return out;
}

std::string projections_csv(const TrainHistory& h) {
    std::string out = "epoch,prototype_id,image_id,h,w,distance_before\n";
    for (const ProjectionEvent& ev : h.projections) {
        for (const Provenance& p : ev.records) {
            out += std::to_string(ev.epoch) + ',' + std::to_string(p.prototype_id) + ',' +
                   std::to_string(p.image_id) + ',' + std::to_string(p.h) + ',' +
                   std::to_string(p.w) + ',' + format_double(p.distance_before) + '\n';
        }
    }
    return out;
}

std::vector<Tensor> cache_features(const FeatureExtractor& fx, std::span<const Sample> samples) {
    std::vector<Tensor> out;
    out.reserve(samples.size());
    for (const Sample& s : samples) out.push_back(extract_features(fx, s.image));
    return out;
}

namespace {

void require_aligned(std::span<const Tensor> features, std::span<const Sample> samples,
                     const char* what) {
    if (features.size() != samples.size()) {
        throw DimensionError(std::string(what) + ": " + std::to_string(features.size()) +
                             " feature maps for " + std::to_string(samples.size()) + " samples");
    }
}

ad::LossVars batch_loss(ad::Tape& tape, CountModel& model, std::span<const Tensor> features,
                        std::span<const Sample> samples, std::span<const std::size_t> batch,
                        const LossConfig& config) {
    const ad::ModelVars vars = ad::bind(tape, model);
    std::vector<ad::Var> preds, gts, dists;
    preds.reserve(batch.size());
    gts.reserve(batch.size());
    dists.reserve(batch.size());
    for (const std::size_t i : batch) {
        const ad::TapeForward f = ad::forward_from_features(vars, tape.constant(features[i]),
                                                            model.prototypes.epsilon);
        preds.push_back(f.density);
        dists.push_back(f.distances);
        gts.push_back(tape.constant(samples[i].density_gt));
    }
    return ad::total_loss(ad::stack(preds), ad::stack(gts), ad::stack(dists), vars.prototypes,
                          model.prototypes.k_cell, model.prototypes.k_bg, config);
}

double split_mae(const CountModel& model, std::span<const Tensor> features,
                 std::span<const Sample> samples) {
    double total = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const double pred = forward_from_features(model, features[i]).count;
        total += std::abs(pred - static_cast<double>(samples[i].count()));
    }
    return total / static_cast<double>(samples.size());
}

struct Snapshot {
    Tensor processing_weight, processing_bias, prototypes, theta;

    static Snapshot of(const CountModel& m) {
        return {m.processing.weight.value, m.processing.bias.value, m.prototypes.prototypes.value,
                m.head.theta.value};
    }
    void restore(CountModel& m) const {
        m.processing.weight.value = processing_weight;
        m.processing.bias.value = processing_bias;
        m.prototypes.prototypes.value = prototypes;
        m.head.theta.value = theta;
    }
};

LossReport mean_report(const std::vector<LossReport>& steps, std::size_t from) {
    LossReport r;
    const double n = static_cast<double>(steps.size() - from);
    for (std::size_t i = from; i < steps.size(); ++i) {
        r.density += steps[i].density;
        r.proto_feature += steps[i].proto_feature;
        r.diversity += steps[i].diversity;
        r.total += steps[i].total;
    }
    r.density /= n;
    r.proto_feature /= n;
    r.diversity /= n;
    r.total /= n;
    return r;
}

bool finite(const LossReport& r) {
    return std::isfinite(r.density) && std::isfinite(r.proto_feature) &&
           std::isfinite(r.diversity) && std::isfinite(r.total);
}

std::string describe(const LossReport& r) {
    return "density=" + format_double(r.density) + " proto_feature=" + format_double(r.proto_feature) +
           " diversity=" + format_double(r.diversity) + " total=" + format_double(r.total);
}

} // namespace

LossReport evaluate_loss(const CountModel& model, std::span<const Tensor> features,
                         std::span<const Sample> samples, const LossConfig& config) {
    require_aligned(features, samples, "evaluate_loss");
    if (samples.empty()) throw ConfigError("evaluate_loss: no samples");
    // The tape binds parameters by reference; a copy keeps the caller's model untouched.
    CountModel copy = model;
    std::vector<std::size_t> all(samples.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    ad::Tape tape;
    return batch_loss(tape, copy, features, samples, all, config).report();
}

std::vector<Provenance> project_prototypes(CountModel& model, std::span<const Tensor> features,
                                           std::span<const Sample> samples) {
    require_aligned(features, samples, "project_prototypes");
    if (samples.empty()) throw ConfigError("project_prototypes: dataset is empty");
    Tensor& p = model.prototypes.prototypes.value;
    const std::size_t k = p.dim(0), d = p.dim(1);

    std::vector<Provenance> best(k);
    std::vector<double> best_dist(k, std::numeric_limits<double>::infinity());
    std::vector<std::vector<double>> best_vec(k, std::vector<double>(d));
    for (std::size_t n = 0; n < samples.size(); ++n) {
        const Tensor processed = process_features(model, features[n]);
        const Tensor phi = ops::distance_map(processed, p);
        const std::size_t hf = phi.dim(1), wf = phi.dim(2);
        for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t h = 0; h < hf; ++h) {
                for (std::size_t w = 0; w < wf; ++w) {
                    const double dist = phi.at(i, h, w);
                    if (!(dist < best_dist[i])) continue;
                    best_dist[i] = dist;
                    best[i] = {i, samples[n].id, h, w, dist};
                    for (std::size_t c = 0; c < d; ++c) best_vec[i][c] = processed.at(c, h, w);
                }
            }
        }
    }
    for (std::size_t i = 0; i < k; ++i) {
        if (!std::isfinite(best_dist[i])) {
            throw NumericError("project_prototypes: no finite distance for prototype " +
                               std::to_string(i));
        }
        for (std::size_t c = 0; c < d; ++c) p.at(i, c) = best_vec[i][c];
    }
    model.provenance = best;
    return best;
}

std::vector<Provenance> project_prototypes(CountModel& model, const Dataset& dataset) {
    const auto features = cache_features(model.extractor, dataset.train);
    return project_prototypes(model, features, dataset.train);
}

void refit_head(CountModel& model, std::span<const Tensor> features,
                std::span<const Sample> samples) {
    require_aligned(features, samples, "refit_head");
    if (samples.empty()) throw ConfigError("refit_head: no samples");
    const std::size_t k = model.prototypes.k();
    Tensor gram({k, k});
    Tensor rhs({k});
    for (std::size_t n = 0; n < samples.size(); ++n) {
        const ForwardResult r = forward_from_features(model, features[n]);
        const std::size_t hw = r.density.size();
        const auto s = r.similarities.data();
        const auto gt = samples[n].density_gt.data();
        for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = i; j < k; ++j) {
                double acc = 0.0;
                for (std::size_t p = 0; p < hw; ++p) acc += s[i * hw + p] * s[j * hw + p];
                gram.at(i, j) += acc;
            }
            double acc = 0.0;
            for (std::size_t p = 0; p < hw; ++p) acc += s[i * hw + p] * gt[p];
            rhs[i] += acc;
        }
    }
    // Small ridge keeps duplicate similarity channels solvable.
    double trace = 0.0;
    for (std::size_t i = 0; i < k; ++i) trace += gram.at(i, i);
    const double ridge = 1e-10 * trace / static_cast<double>(k) + 1e-300;
    for (std::size_t i = 0; i < k; ++i) {
        gram.at(i, i) += ridge;
        for (std::size_t j = 0; j < i; ++j) gram.at(i, j) = gram.at(j, i);
    }
    // Cholesky: gram = L L^T.
    Tensor l({k, k});
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double acc = gram.at(i, j);
            for (std::size_t c = 0; c < j; ++c) acc -= l.at(i, c) * l.at(j, c);
            if (i == j) {
                if (!(acc > 0.0)) throw NumericError("refit_head: similarity Gram matrix is singular");
                l.at(i, i) = std::sqrt(acc);
            } else {
                l.at(i, j) = acc / l.at(j, j);
            }
        }
    }
    Tensor y({k});
    for (std::size_t i = 0; i < k; ++i) {
        double acc = rhs[i];
        for (std::size_t c = 0; c < i; ++c) acc -= l.at(i, c) * y[c];
        y[i] = acc / l.at(i, i);
    }
    Tensor& theta = model.head.theta.value;
    for (std::size_t i = k; i-- > 0;) {
        double acc = y[i];
        for (std::size_t c = i + 1; c < k; ++c) acc -= l.at(c, i) * theta[c];
        theta[i] = acc / l.at(i, i);
    }
}

TrainHistory train(CountModel& model, const Dataset& dataset, const TrainConfig& config,
                   const TrainCallbacks& callbacks) {
    config.validate();
    if (!model.extractor.frozen()) {
        throw ConfigError("train: a pretrained, frozen extractor is required");
    }
    if (dataset.train.empty()) throw ConfigError("train: training split is empty");
    const std::uint64_t extractor_sum = model.extractor.checksum();

    const std::span<const Sample> train_split(dataset.train);
    const std::span<const Sample> val_split(dataset.test);
    const auto train_features = cache_features(model.extractor, train_split);
    const auto val_features = cache_features(model.extractor, val_split);

    Adam opt(config.adam);
    opt.add(model.processing.weight, true);
    opt.add(model.processing.bias, false);
    opt.add(model.prototypes.prototypes, false);
    opt.add(model.head.theta, true);

    TrainHistory hist;
    hist.initial_loss = evaluate_loss(model, train_features, train_split, config.loss);

    auto project = [&](std::size_t epoch) {
        hist.projections.push_back({epoch, project_prototypes(model, train_features, train_split)});
        if (config.refit_head) refit_head(model, train_features, train_split);
        if (callbacks.on_projection) callbacks.on_projection(epoch, model);
    };

    Rng rng(config.seed, 0x747261696eull);
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t stale = 0;
    std::size_t last_epoch = 0;
    hist.stop_reason = "max_epochs";
    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        const auto order = shuffled_order(train_split.size(), rng);
        const std::size_t first_step = hist.steps.size();
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const Snapshot good = Snapshot::of(model);
            opt.zero_grad();
            ad::Tape tape;
            const ad::LossVars loss =
                batch_loss(tape, model, train_features, train_split,
                           std::span<const std::size_t>(order).subspan(start, end - start),
                           config.loss);
            const LossReport report = loss.report();
            if (!finite(report)) {
                good.restore(model);
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", step " + std::to_string(hist.steps.size() + 1) + " (" +
                                   describe(report) + "); model restored to last good parameters");
            }
            tape.backward(loss.total);
            opt.step();
            hist.steps.push_back(report);
        }
        EpochRecord rec{epoch, mean_report(hist.steps, first_step),
                        std::numeric_limits<double>::quiet_NaN()};
        if (!val_split.empty()) rec.val_mae = split_mae(model, val_features, val_split);
        hist.epochs.push_back(rec);
        last_epoch = epoch;

        if (epoch % config.projection_interval == 0) project(epoch);

        if (config.patience > 0 && !val_split.empty()) {
            if (rec.val_mae < best_val - config.min_delta) {
                best_val = rec.val_mae;
                stale = 0;
            } else if (++stale >= config.patience) {
                hist.stop_reason = "early_stop";
                break;
            }
        }
    }
    if (hist.projections.empty() || hist.projections.back().epoch != last_epoch) project(last_epoch);
    hist.final_loss = evaluate_loss(model, train_features, train_split, config.loss);

    if (model.extractor.checksum() != extractor_sum) {
        throw NumericError("train: extractor parameters changed during training");
    }
    return hist;
}

} // namespace protodensity
