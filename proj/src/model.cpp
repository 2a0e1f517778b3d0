#include "protodensity/model.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include "protodensity/errors.hpp"
#include "protodensity/io.hpp"
#include "protodensity/ops.hpp"
#include "protodensity/rng.hpp"

namespace protodensity {

namespace fs = std::filesystem;

namespace {

Tensor uniform_tensor(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

void require_divisible(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != FeatureExtractor::kChannels[0]) {
        throw DimensionError("extract_features: expected [1 x H x W] image, got " +
                             shape_string(image.shape()));
    }
    if (image.dim(1) % FeatureExtractor::kDownsample || image.dim(2) % FeatureExtractor::kDownsample) {
        throw DimensionError("extract_features: H and W must be divisible by 8, got " +
                             shape_string(image.shape()));
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Extractor
// ---------------------------------------------------------------------------

FeatureExtractor FeatureExtractor::initialized(std::uint64_t seed) {
    FeatureExtractor fx;
    Rng rng(seed, 0x65787472ull);
    for (std::size_t b = 0; b < 3; ++b) {
        const std::size_t cin = kChannels[b], cout = kChannels[b + 1];
        const double bound = std::sqrt(6.0 / static_cast<double>(cin * 9));
        fx.weight[b] = Parameter(uniform_tensor({cout, cin, 3, 3}, rng, -bound, bound));
        fx.bias[b] = Parameter(Tensor({cout}));
    }
    return fx;
}

void FeatureExtractor::set_trainable(bool trainable) {
    for (std::size_t b = 0; b < 3; ++b) {
        weight[b].trainable = trainable;
        bias[b].trainable = trainable;
    }
}

bool FeatureExtractor::frozen() const {
    for (std::size_t b = 0; b < 3; ++b)
        if (weight[b].trainable || bias[b].trainable) return false;
    return true;
}

std::uint64_t FeatureExtractor::checksum() const {
    std::uint64_t h = protodensity::checksum({});
    for (std::size_t b = 0; b < 3; ++b) {
        h = protodensity::checksum(weight[b].value.data(), h);
        h = protodensity::checksum(bias[b].value.data(), h);
    }
    return h;
}

Tensor extract_features(const FeatureExtractor& fx, const Tensor& image) {
    require_divisible(image);
    Tensor x = image;
    for (std::size_t b = 0; b < 3; ++b) {
        x = ops::maxpool2(ops::relu(ops::conv3x3(x, fx.weight[b].value, &fx.bias[b].value)));
    }
    return x;
}

namespace ad {

Var extract_features(Tape& tape, FeatureExtractor& fx, Var image) {
    require_divisible(image.value());
    Var x = image;
    for (std::size_t b = 0; b < 3; ++b) {
        x = maxpool2(relu(conv3x3(x, tape.parameter(fx.weight[b]), tape.parameter(fx.bias[b]))));
    }
    return x;
}

ModelVars bind(Tape& tape, CountModel& model) {
    return {tape.parameter(model.processing.weight), tape.parameter(model.processing.bias),
            tape.parameter(model.prototypes.prototypes), tape.parameter(model.head.theta)};
}

TapeForward forward_from_features(const ModelVars& vars, Var features, double epsilon) {
    TapeForward out;
    out.processed = sigmoid(conv1x1(features, vars.processing_weight, vars.processing_bias));
    out.distances = distance_map(out.processed, vars.prototypes);
    out.similarities = log_similarity(out.distances, epsilon);
    const std::size_t k = vars.theta.value().size();
    Var head = reshape(vars.theta, {1, k});
    const Shape& s = out.similarities.value().shape();
    out.density = reshape(conv1x1(out.similarities, head), {s[1], s[2]});
    return out;
}

} // namespace ad

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

void ModelDims::validate() const {
    if (k_cell == 0) throw ConfigError("model.k_cell: must be at least 1");
    if (k_bg == 0) throw ConfigError("model.k_bg: must be at least 1");
    if (d == 0) throw ConfigError("model.d: must be positive");
    if (d_in == 0) throw ConfigError("model.d_in: must be positive");
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("model.epsilon: must lie in (0, 1)");
}

ModelDims CountModel::dims() const {
    return {prototypes.k_cell, prototypes.k_bg, processing.weight.value.dim(0),
            processing.weight.value.dim(1), prototypes.epsilon};
}

CountModel CountModel::create(FeatureExtractor extractor, const ModelDims& dims,
                              std::uint64_t seed) {
    dims.validate();
    CountModel m;
    m.extractor = std::move(extractor);
    Rng rng(seed, 0x70726f746full);
    const double bound = 1.0 / std::sqrt(static_cast<double>(dims.d_in));
    m.processing.weight = Parameter(uniform_tensor({dims.d, dims.d_in}, rng, -bound, bound));
    m.processing.bias = Parameter(Tensor({dims.d}));
    m.prototypes.prototypes = Parameter(uniform_tensor({dims.k(), dims.d}, rng, 0.0, 1.0));
    m.prototypes.k_cell = dims.k_cell;
    m.prototypes.k_bg = dims.k_bg;
    m.prototypes.epsilon = dims.epsilon;
    const double head_bound = 1.0 / std::sqrt(static_cast<double>(dims.k()));
    m.head.theta = Parameter(uniform_tensor({dims.k()}, rng, -head_bound, head_bound));
    return m;
}

Tensor process_features(const CountModel& model, const Tensor& features) {
    return ops::sigmoid(
        ops::conv1x1(features, model.processing.weight.value, &model.processing.bias.value));
}

Tensor similarity_map(const CountModel& model, const Tensor& distances) {
    return ops::log_similarity(distances, model.prototypes.epsilon);
}

Tensor predict_density(const CountModel& model, const Tensor& similarities) {
    const Tensor& theta = model.head.theta.value;
    require_rank(similarities, 3, "predict_density");
    if (similarities.dim(0) != theta.size()) {
        throw DimensionError("predict_density: " + std::to_string(similarities.dim(0)) +
                             " similarity channels for " + std::to_string(theta.size()) +
                             " head weights");
    }
    const Tensor head = theta.reshaped({1, theta.size()});
    return ops::conv1x1(similarities, head).reshaped({similarities.dim(1), similarities.dim(2)});
}

double count(const Tensor& density) { return ops::sum(density); }

ForwardResult forward_from_features(const CountModel& model, const Tensor& features) {
    ForwardResult r;
    r.processed = process_features(model, features);
    r.distances = ops::distance_map(r.processed, model.prototypes.prototypes.value);
    r.similarities = similarity_map(model, r.distances);
    r.density = predict_density(model, r.similarities);
    r.count = count(r.density);
    r.features = features;
    return r;
}

ForwardResult forward(const CountModel& model, const Tensor& image) {
    return forward_from_features(model, extract_features(model.extractor, image));
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kFormat = "protodensity-model/1";

std::map<std::string, std::string> read_kv(const fs::path& path) {
    std::map<std::string, std::string> kv;
    std::istringstream in(read_text(path));
    std::string line;
    while (std::getline(in, line)) {
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw IoError(path.string() + ": expected key = value");
        kv[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return kv;
}

const std::string& need(const std::map<std::string, std::string>& kv, const std::string& key,
                        const fs::path& path) {
    auto it = kv.find(key);
    if (it == kv.end()) throw IoError(path.string() + ": missing key " + key);
    return it->second;
}

Tensor load_shaped(const fs::path& path, const Shape& expected) {
    Tensor t = read_pdtf(path);
    if (t.shape() != expected) {
        throw DimensionError(path.string() + ": shape " + shape_string(t.shape()) + ", expected " +
                             shape_string(expected));
    }
    return t;
}

void write_extractor_tensors(const fs::path& dir, const FeatureExtractor& fx) {
    for (std::size_t b = 0; b < 3; ++b) {
        const std::string n = std::to_string(b + 1);
        write_pdtf(dir / ("extractor.conv" + n + ".weight.pdtf"), fx.weight[b].value);
        write_pdtf(dir / ("extractor.conv" + n + ".bias.pdtf"), fx.bias[b].value);
    }
}

FeatureExtractor read_extractor_tensors(const fs::path& dir,
                                        const std::map<std::string, std::string>& kv,
                                        const fs::path& manifest) {
    if (need(kv, "extractor.channels", manifest) != "1,16,32,64") {
        throw DimensionError(manifest.string() + ": unsupported extractor.channels " +
                             kv.at("extractor.channels"));
    }
    FeatureExtractor fx;
    for (std::size_t b = 0; b < 3; ++b) {
        const std::string n = std::to_string(b + 1);
        const std::size_t cin = FeatureExtractor::kChannels[b];
        const std::size_t cout = FeatureExtractor::kChannels[b + 1];
        fx.weight[b] = Parameter(load_shaped(dir / ("extractor.conv" + n + ".weight.pdtf"),
                                             {cout, cin, 3, 3}), false);
        fx.bias[b] = Parameter(load_shaped(dir / ("extractor.conv" + n + ".bias.pdtf"), {cout}),
                               false);
    }
    const std::string expected = need(kv, "extractor.checksum", manifest);
    if (std::to_string(fx.checksum()) != expected) {
        throw IoError(manifest.string() + ": extractor checksum mismatch");
    }
    return fx;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string extractor_header(const FeatureExtractor& fx) {
    return "extractor.channels = 1,16,32,64\nextractor.checksum = " + std::to_string(fx.checksum()) +
           "\ndownsample = 8\n";
}

} // namespace

void save_extractor(const fs::path& dir, const FeatureExtractor& fx) {
    ensure_dir(dir);
    write_extractor_tensors(dir, fx);
    write_text(dir / "model.txt",
               std::string("format = ") + kFormat + "\nkind = extractor\n" + extractor_header(fx));
}

FeatureExtractor load_extractor(const fs::path& dir) {
    const fs::path manifest = dir / "model.txt";
    const auto kv = read_kv(manifest);
    if (need(kv, "format", manifest) != kFormat) throw IoError(manifest.string() + ": bad format");
    return read_extractor_tensors(dir, kv, manifest);
}

void save_model(const fs::path& dir, const CountModel& m) {
    ensure_dir(dir);
    write_extractor_tensors(dir, m.extractor);
    write_pdtf(dir / "processing.weight.pdtf", m.processing.weight.value);
    write_pdtf(dir / "processing.bias.pdtf", m.processing.bias.value);
    write_pdtf(dir / "prototypes.pdtf", m.prototypes.prototypes.value);
    write_pdtf(dir / "head.theta.pdtf", m.head.theta.value);
    const ModelDims d = m.dims();
    std::ostringstream os;
    os << "format = " << kFormat << "\nkind = model\n"
       << "k_cell = " << d.k_cell << "\nk_bg = " << d.k_bg << "\nd = " << d.d
       << "\nd_in = " << d.d_in << "\nepsilon = " << format_double(d.epsilon) << '\n'
       << extractor_header(m.extractor);
    write_text(dir / "model.txt", os.str());
    std::string prov = "prototype_id,image_id,h,w,distance_before\n";
    for (const Provenance& p : m.provenance) {
        prov += std::to_string(p.prototype_id) + ',' + std::to_string(p.image_id) + ',' +
                std::to_string(p.h) + ',' + std::to_string(p.w) + ',' +
                format_double(p.distance_before) + '\n';
    }
    write_text(dir / "provenance.csv", prov);
}

CountModel load_model(const fs::path& dir) {
    const fs::path manifest = dir / "model.txt";
    const auto kv = read_kv(manifest);
    if (need(kv, "format", manifest) != kFormat) throw IoError(manifest.string() + ": bad format");
    if (need(kv, "kind", manifest) != "model") {
        throw ConfigError(manifest.string() + ": kind is '" + kv.at("kind") +
                          "', expected a trained model");
    }
    auto count_key = [&](const char* key) {
        return static_cast<std::size_t>(parse_int(need(kv, key, manifest), key));
    };
    ModelDims d;
    d.k_cell = count_key("k_cell");
    d.k_bg = count_key("k_bg");
    d.d = count_key("d");
    d.d_in = count_key("d_in");
    d.epsilon = parse_double(need(kv, "epsilon", manifest), "epsilon");
    d.validate();

    CountModel m;
    m.extractor = read_extractor_tensors(dir, kv, manifest);
    if (d.d_in != FeatureExtractor::kOutChannels) {
        throw DimensionError(manifest.string() + ": d_in " + std::to_string(d.d_in) +
                             " does not match extractor output channels");
    }
    m.processing.weight = Parameter(load_shaped(dir / "processing.weight.pdtf", {d.d, d.d_in}));
    m.processing.bias = Parameter(load_shaped(dir / "processing.bias.pdtf", {d.d}));
    m.prototypes.prototypes = Parameter(load_shaped(dir / "prototypes.pdtf", {d.k(), d.d}));
    m.prototypes.k_cell = d.k_cell;
    m.prototypes.k_bg = d.k_bg;
    m.prototypes.epsilon = d.epsilon;
    m.head.theta = Parameter(load_shaped(dir / "head.theta.pdtf", {d.k()}));

    std::istringstream in(read_text(dir / "provenance.csv"));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        const auto c = split(line, ',');
        if (c.size() != 5) throw IoError((dir / "provenance.csv").string() + ": expected 5 columns");
        Provenance p;
        p.prototype_id = static_cast<std::size_t>(parse_int(c[0], "prototype_id"));
        p.image_id = static_cast<std::uint64_t>(parse_int(c[1], "image_id"));
        p.h = static_cast<std::size_t>(parse_int(c[2], "h"));
        p.w = static_cast<std::size_t>(parse_int(c[3], "w"));
        p.distance_before = parse_double(c[4], "distance_before");
        if (p.prototype_id >= d.k()) {
            throw DimensionError((dir / "provenance.csv").string() + ": prototype id " +
                                 std::to_string(p.prototype_id) + " out of range");
        }
        m.provenance.push_back(p);
    }
    return m;
}

} // namespace protodensity
