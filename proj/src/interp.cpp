#include "protodensity/interp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "protodensity/errors.hpp"
#include "protodensity/io.hpp"
#include "protodensity/ops.hpp"
#include "protodensity/training.hpp"

namespace protodensity {

namespace {

// Accepts [H x W] or [1 x H x W].
std::pair<std::size_t, std::size_t> map_dims(const Tensor& map, const char* what) {
    if (map.rank() == 2) return {map.dim(0), map.dim(1)};
    if (map.rank() == 3 && map.dim(0) == 1) return {map.dim(1), map.dim(2)};
    throw DimensionError(std::string(what) + ": expected [H x W] map, got " +
                         shape_string(map.shape()));
}

std::size_t find_root(std::vector<std::size_t>& parent, std::size_t x) {
    while (parent[x] != x) {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    return x;
}

void unite(std::vector<std::size_t>& parent, std::size_t a, std::size_t b) {
    a = find_root(parent, a);
    b = find_root(parent, b);
    if (a == b) return;
    if (a < b) parent[b] = a;
    else parent[a] = b;
}

} // namespace

std::size_t BinaryMask::count() const {
    return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
}

double percentile_value(std::span<const double> values, double q) {
    if (values.empty()) throw DimensionError("percentile: empty map");
    if (!(q > 0.0 && q <= 100.0)) throw ConfigError("percentile: q must lie in (0, 100]");
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(sorted.size());
    auto rank = static_cast<std::size_t>(std::ceil(q * n / 100.0));
    rank = std::clamp<std::size_t>(rank, 1, sorted.size());
    return sorted[rank - 1];
}

BinaryMask percentile_threshold(const Tensor& map, double q) {
    const auto [h, w] = map_dims(map, "percentile_threshold");
    const double t = percentile_value(map.data(), q);
    BinaryMask mask{h, w, std::vector<std::uint8_t>(map.size())};
    for (std::size_t i = 0; i < map.size(); ++i) mask.values[i] = map[i] >= t ? 1 : 0;
    return mask;
}

ComponentLabels connected_components(const BinaryMask& mask) {
    const std::size_t H = mask.height, W = mask.width;
    if (mask.values.size() != H * W) {
        throw DimensionError("connected_components: mask holds " +
                             std::to_string(mask.values.size()) + " values for " +
                             std::to_string(H) + "x" + std::to_string(W));
    }
    std::vector<std::size_t> parent(H * W);
    std::iota(parent.begin(), parent.end(), std::size_t{0});
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t w = 0; w < W; ++w) {
            if (!mask.at(h, w)) continue;
            const std::size_t i = h * W + w;
            // Already-visited neighbours: W, NW, N, NE.
            if (w > 0 && mask.at(h, w - 1)) unite(parent, i, i - 1);
            if (h > 0) {
                if (w > 0 && mask.at(h - 1, w - 1)) unite(parent, i, i - W - 1);
                if (mask.at(h - 1, w)) unite(parent, i, i - W);
                if (w + 1 < W && mask.at(h - 1, w + 1)) unite(parent, i, i - W + 1);
            }
        }
    }
    ComponentLabels out{H, W, std::vector<std::size_t>(H * W, 0), 0};
    std::vector<std::size_t> label_of_root(H * W, 0);
    for (std::size_t i = 0; i < H * W; ++i) {
        if (!mask.values[i]) continue;
        const std::size_t r = find_root(parent, i);
        if (label_of_root[r] == 0) label_of_root[r] = ++out.count;
        out.labels[i] = label_of_root[r];
    }
    return out;
}

std::vector<PatchBox> boxes_from_mask(const ComponentLabels& labels, const Tensor& similarity,
                                      std::uint64_t image_id, std::size_t prototype_id,
                                      std::size_t scale) {
    const auto [H, W] = map_dims(similarity, "boxes_from_mask");
    if (H != labels.height || W != labels.width) {
        throw DimensionError("boxes_from_mask: labels " + std::to_string(labels.height) + "x" +
                             std::to_string(labels.width) + " vs similarity " +
                             shape_string(similarity.shape()));
    }
    if (scale == 0) throw ConfigError("boxes_from_mask: scale must be positive");
    struct Extent {
        std::size_t h0 = std::numeric_limits<std::size_t>::max(), w0 = h0, h1 = 0, w1 = 0;
        double score = -std::numeric_limits<double>::infinity();
        std::size_t ph = 0, pw = 0;
    };
    std::vector<Extent> ext(labels.count);
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t w = 0; w < W; ++w) {
            const std::size_t l = labels.at(h, w);
            if (l == 0) continue;
            Extent& e = ext[l - 1];
            e.h0 = std::min(e.h0, h);
            e.h1 = std::max(e.h1, h);
            e.w0 = std::min(e.w0, w);
            e.w1 = std::max(e.w1, w);
            const double s = similarity[h * W + w];
            if (s > e.score) {
                e.score = s;
                e.ph = h;
                e.pw = w;
            }
        }
    }
    std::vector<PatchBox> boxes;
    boxes.reserve(ext.size());
    for (const Extent& e : ext) {
        boxes.push_back({image_id, prototype_id, scale * e.w0, scale * e.h0,
                         scale * (e.w1 + 1) - 1, scale * (e.h1 + 1) - 1, e.score, e.ph, e.pw});
    }
    std::stable_sort(boxes.begin(), boxes.end(),
                     [](const PatchBox& a, const PatchBox& b) { return a.score > b.score; });
    return boxes;
}

std::vector<std::vector<PatchBox>> global_top_patches(const CountModel& model,
                                                      std::span<const Tensor> features,
                                                      std::span<const Sample> samples,
                                                      std::size_t k, double percentile) {
    if (features.size() != samples.size()) {
        throw DimensionError("global_top_patches: feature and sample counts differ");
    }
    if (samples.empty()) throw ConfigError("global_top_patches: dataset is empty");
    if (k == 0) throw ConfigError("global_top_patches: k must be at least 1");
    const std::size_t K = model.prototypes.k();
    std::vector<std::vector<PatchBox>> best(K);
    for (std::size_t n = 0; n < samples.size(); ++n) {
        const ForwardResult r = forward_from_features(model, features[n]);
        const std::size_t hf = r.similarities.dim(1), wf = r.similarities.dim(2);
        for (std::size_t i = 0; i < K; ++i) {
            Tensor s({hf, wf});
            std::copy_n(r.similarities.data().begin() + static_cast<std::ptrdiff_t>(i * hf * wf),
                        hf * wf, s.data().begin());
            const auto boxes = boxes_from_mask(connected_components(percentile_threshold(s, percentile)),
                                               s, samples[n].id, i, FeatureExtractor::kDownsample);
            best[i].push_back(boxes.front());
        }
    }
    for (auto& list : best) {
        std::stable_sort(list.begin(), list.end(),
                         [](const PatchBox& a, const PatchBox& b) { return a.score > b.score; });
        if (list.size() > k) list.resize(k);
    }
    return best;
}

std::vector<std::vector<PatchBox>> global_top_patches(const CountModel& model,
                                                      std::span<const Sample> samples,
                                                      std::size_t k, double percentile) {
    const auto features = cache_features(model.extractor, samples);
    return global_top_patches(model, features, samples, k, percentile);
}

Explanation explain_location(const CountModel& model, const ForwardResult& r, std::size_t h,
                             std::size_t w) {
    const std::size_t hf = r.density.dim(0), wf = r.density.dim(1);
    if (h >= hf || w >= wf) {
        throw DimensionError("explain_location: (" + std::to_string(h) + "," + std::to_string(w) +
                             ") outside the " + std::to_string(hf) + "x" + std::to_string(wf) +
                             " density grid");
    }
    Explanation e{h, w, {}, r.density.at(h, w)};
    const Tensor& theta = model.head.theta.value;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double s = r.similarities.at(i, h, w);
        e.contributions.push_back({i, theta[i], s, theta[i] * s});
    }
    return e;
}

Explanation explain_location(const CountModel& model, const Tensor& image, std::size_t h,
                             std::size_t w) {
    return explain_location(model, forward(model, image), h, w);
}

namespace {

GroupStats group_stats(const Tensor& p, std::size_t begin, std::size_t end) {
    GroupStats g;
    if (end - begin < 2) {
        g.min = g.mean = std::numeric_limits<double>::quiet_NaN();
        return g;
    }
    const std::size_t d = p.dim(1);
    double total = 0.0;
    g.min = std::numeric_limits<double>::infinity();
    for (std::size_t i = begin; i < end; ++i) {
        for (std::size_t j = i + 1; j < end; ++j) {
            double sq = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double diff = p.at(i, c) - p.at(j, c);
                sq += diff * diff;
            }
            const double dist = std::sqrt(sq);
            g.min = std::min(g.min, dist);
            total += dist;
            ++g.pairs;
        }
    }
    g.mean = total / static_cast<double>(g.pairs);
    return g;
}

} // namespace

GroupDistanceStats intra_group_distances(const Tensor& prototypes, std::size_t k_cell,
                                         std::size_t k_bg) {
    require_rank(prototypes, 2, "intra_group_distances");
    if (prototypes.dim(0) != k_cell + k_bg) {
        throw DimensionError("intra_group_distances: " + std::to_string(prototypes.dim(0)) +
                             " prototypes, k_cell + k_bg = " + std::to_string(k_cell + k_bg));
    }
    return {group_stats(prototypes, 0, k_cell), group_stats(prototypes, k_cell, k_cell + k_bg)};
}

std::string boxes_csv(std::span<const PatchBox> boxes) {
    std::string out = "prototype_id,image_id,x0,y0,x1,y1,score\n";
    for (const PatchBox& b : boxes) {
        out += std::to_string(b.prototype_id) + ',' + std::to_string(b.image_id) + ',' +
               std::to_string(b.x0) + ',' + std::to_string(b.y0) + ',' + std::to_string(b.x1) +
               ',' + std::to_string(b.y1) + ',' + format_double(b.score) + '\n';
    }
    return out;
}

std::string explanations_csv(std::span<const Explanation> explanations) {
    std::string out = "h,w,prototype_id,theta,similarity,contribution\n";
    for (const Explanation& e : explanations) {
        for (const Contribution& c : e.contributions) {
            out += std::to_string(e.h) + ',' + std::to_string(e.w) + ',' +
                   std::to_string(c.prototype_id) + ',' + format_double(c.theta) + ',' +
                   format_double(c.similarity) + ',' + format_double(c.contribution) + '\n';
        }
    }
    return out;
}

} // namespace protodensity
