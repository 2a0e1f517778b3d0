#include "protodensity/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "protodensity/errors.hpp"
#include "protodensity/io.hpp"
#include "protodensity/rng.hpp"

namespace protodensity {

namespace fs = std::filesystem;

std::string to_string(ArtifactKind kind) {
    switch (kind) {
        case ArtifactKind::Blob: return "blob";
        case ArtifactKind::Streak: return "streak";
        case ArtifactKind::Gradient: return "gradient";
    }
    return "?";
}

ArtifactKind artifact_kind_from_string(const std::string& name) {
    if (name == "blob") return ArtifactKind::Blob;
    if (name == "streak") return ArtifactKind::Streak;
    if (name == "gradient") return ArtifactKind::Gradient;
    throw ConfigError("scene.artifact_kinds: unknown kind '" + name + "'");
}

void SceneConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
        throw ConfigError("scene." + field + ": " + why);
    };
    if (downsample == 0) fail("downsample", "must be positive");
    if (height == 0 || height % downsample) fail("height", "must be a positive multiple of downsample");
    if (width == 0 || width % downsample) fail("width", "must be a positive multiple of downsample");
    if (cell_count_min > cell_count_max) fail("cell_count_min", "exceeds cell_count_max");
    if (!(cell_radius_min > 0.0)) fail("cell_radius_min", "must be positive");
    if (cell_radius_min > cell_radius_max) fail("cell_radius_min", "exceeds cell_radius_max");
    if (!(cell_intensity_min > 0.0 && cell_intensity_max <= 1.0))
        fail("cell_intensity_min", "intensities must lie in (0, 1]");
    if (cell_intensity_min > cell_intensity_max)
        fail("cell_intensity_min", "exceeds cell_intensity_max");
    if (artifact_count_min > artifact_count_max)
        fail("artifact_count_min", "exceeds artifact_count_max");
    if (artifact_count_max > 0 && artifact_kinds.empty())
        fail("artifact_kinds", "empty while artifacts are requested");
    if (!(noise_std >= 0.0)) fail("noise_std", "must be non-negative");
    if (!(density_sigma > 0.0)) fail("density_sigma", "must be positive");
}

std::vector<std::pair<std::string, std::string>> scene_config_entries(const SceneConfig& c) {
    std::string kinds;
    for (std::size_t i = 0; i < c.artifact_kinds.size(); ++i) {
        if (i) kinds += ',';
        kinds += to_string(c.artifact_kinds[i]);
    }
    return {
        {"height", std::to_string(c.height)},
        {"width", std::to_string(c.width)},
        {"cell_count_min", std::to_string(c.cell_count_min)},
        {"cell_count_max", std::to_string(c.cell_count_max)},
        {"cell_radius_min", format_double(c.cell_radius_min)},
        {"cell_radius_max", format_double(c.cell_radius_max)},
        {"cell_intensity_min", format_double(c.cell_intensity_min)},
        {"cell_intensity_max", format_double(c.cell_intensity_max)},
        {"artifact_count_min", std::to_string(c.artifact_count_min)},
        {"artifact_count_max", std::to_string(c.artifact_count_max)},
        {"artifact_kinds", kinds},
        {"noise_std", format_double(c.noise_std)},
        {"allow_overlap", c.allow_overlap ? "true" : "false"},
        {"seed", std::to_string(c.seed)},
        {"downsample", std::to_string(c.downsample)},
        {"density_sigma", format_double(c.density_sigma)},
    };
}

namespace {

std::size_t to_count(const std::string& key, const std::string& value) {
    const long long v = parse_int(value, "scene." + key);
    if (v < 0) throw ConfigError("scene." + key + ": must be non-negative");
    return static_cast<std::size_t>(v);
}

bool to_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError(key + ": expected true/false, got '" + value + "'");
}

} // namespace

bool set_scene_field(SceneConfig& c, const std::string& key, const std::string& value) {
    const std::string what = "scene." + key;
    if (key == "height") c.height = to_count(key, value);
    else if (key == "width") c.width = to_count(key, value);
    else if (key == "cell_count_min") c.cell_count_min = to_count(key, value);
    else if (key == "cell_count_max") c.cell_count_max = to_count(key, value);
    else if (key == "cell_radius_min") c.cell_radius_min = parse_double(value, what);
    else if (key == "cell_radius_max") c.cell_radius_max = parse_double(value, what);
    else if (key == "cell_intensity_min") c.cell_intensity_min = parse_double(value, what);
    else if (key == "cell_intensity_max") c.cell_intensity_max = parse_double(value, what);
    else if (key == "artifact_count_min") c.artifact_count_min = to_count(key, value);
    else if (key == "artifact_count_max") c.artifact_count_max = to_count(key, value);
    else if (key == "artifact_kinds") {
        c.artifact_kinds.clear();
        for (const std::string& k : split(value, ','))
            if (!k.empty()) c.artifact_kinds.push_back(artifact_kind_from_string(k));
    } else if (key == "noise_std") c.noise_std = parse_double(value, what);
    else if (key == "allow_overlap") c.allow_overlap = to_bool(what, value);
    else if (key == "seed") c.seed = to_count(key, value);
    else if (key == "downsample") c.downsample = to_count(key, value);
    else if (key == "density_sigma") c.density_sigma = parse_double(value, what);
    else return false;
    return true;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace {

// Gaussian bumps are evaluated within this many sigmas of their centre.
constexpr double kSupport = 6.0;

void add_gaussian(Tensor& image, double cx, double cy, double sigma, double amplitude) {
    const std::size_t h = image.dim(1), w = image.dim(2);
    const double reach = kSupport * sigma;
    const auto lo = [](double v) { return static_cast<std::size_t>(std::max(0.0, std::floor(v))); };
    const std::size_t y0 = lo(cy - reach), x0 = lo(cx - reach);
    const std::size_t y1 = std::min<std::size_t>(h, static_cast<std::size_t>(std::max(0.0, std::ceil(cy + reach))));
    const std::size_t x1 = std::min<std::size_t>(w, static_cast<std::size_t>(std::max(0.0, std::ceil(cx + reach))));
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (std::size_t y = y0; y < y1; ++y) {
        const double dy = (static_cast<double>(y) + 0.5) - cy;
        for (std::size_t x = x0; x < x1; ++x) {
            const double dx = (static_cast<double>(x) + 0.5) - cx;
            image.at(0, y, x) += amplitude * std::exp(-(dx * dx + dy * dy) * inv);
        }
    }
}

void add_streak(Tensor& image, Rng& rng) {
    const double hgt = static_cast<double>(image.dim(1)), wid = static_cast<double>(image.dim(2));
    const double ax = rng.uniform(0.0, wid), ay = rng.uniform(0.0, hgt);
    const double angle = rng.uniform(0.0, std::numbers::pi);
    const double length = rng.uniform(20.0, 60.0);
    const double width = rng.uniform(0.6, 1.0);
    const double amplitude = rng.uniform(0.3, 0.7);
    const double ux = std::cos(angle), uy = std::sin(angle);
    const double inv = 1.0 / (2.0 * width * width);
    for (std::size_t y = 0; y < image.dim(1); ++y) {
        for (std::size_t x = 0; x < image.dim(2); ++x) {
            const double px = static_cast<double>(x) + 0.5 - ax;
            const double py = static_cast<double>(y) + 0.5 - ay;
            const double t = std::clamp(px * ux + py * uy, 0.0, length);
            const double dx = px - t * ux, dy = py - t * uy;
            const double d2 = dx * dx + dy * dy;
            if (d2 < 36.0 * width * width) image.at(0, y, x) += amplitude * std::exp(-d2 * inv);
        }
    }
}

void add_gradient(Tensor& image, Rng& rng) {
    const double hgt = static_cast<double>(image.dim(1)), wid = static_cast<double>(image.dim(2));
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double amplitude = rng.uniform(0.05, 0.2);
    const double ux = std::cos(angle), uy = std::sin(angle);
    const double span = std::abs(ux) * wid + std::abs(uy) * hgt;
    const double offset = std::min(0.0, ux * wid) + std::min(0.0, uy * hgt);
    for (std::size_t y = 0; y < image.dim(1); ++y) {
        for (std::size_t x = 0; x < image.dim(2); ++x) {
            const double proj = (static_cast<double>(x) + 0.5) * ux + (static_cast<double>(y) + 0.5) * uy;
            image.at(0, y, x) += amplitude * (proj - offset) / span;
        }
    }
}

} // namespace

RenderedScene render_scene(const SceneConfig& config, std::uint64_t index) {
    config.validate();
    Rng rng(config.seed, index);
    const double hgt = static_cast<double>(config.height);
    const double wid = static_cast<double>(config.width);
    Tensor image({1, config.height, config.width});

    const auto n_artifacts = static_cast<std::size_t>(rng.between(
        static_cast<std::int64_t>(config.artifact_count_min),
        static_cast<std::int64_t>(config.artifact_count_max)));
    for (std::size_t a = 0; a < n_artifacts; ++a) {
        const ArtifactKind kind = config.artifact_kinds[rng.below(config.artifact_kinds.size())];
        switch (kind) {
            case ArtifactKind::Blob: {
                const double cx = rng.uniform(0.0, wid), cy = rng.uniform(0.0, hgt);
                const double sigma = rng.uniform(6.0, 14.0);
                add_gaussian(image, cx, cy, sigma, rng.uniform(0.1, 0.35));
                break;
            }
            case ArtifactKind::Streak: add_streak(image, rng); break;
            case ArtifactKind::Gradient: add_gradient(image, rng); break;
        }
    }

    const auto n_cells = static_cast<std::size_t>(
        rng.between(static_cast<std::int64_t>(config.cell_count_min),
                    static_cast<std::int64_t>(config.cell_count_max)));
    RenderedScene scene;
    std::vector<double> radii;
    scene.annotation.points.reserve(n_cells);
    for (std::size_t c = 0; c < n_cells; ++c) {
        const double radius = rng.uniform(config.cell_radius_min, config.cell_radius_max);
        const double intensity = rng.uniform(config.cell_intensity_min, config.cell_intensity_max);
        Point p{rng.uniform(0.0, wid), rng.uniform(0.0, hgt)};
        if (!config.allow_overlap) {
            constexpr int kAttempts = 10000;
            int attempt = 0;
            auto clashes = [&](const Point& cand) {
                for (std::size_t j = 0; j < radii.size(); ++j) {
                    const Point& q = scene.annotation.points[j];
                    const double sep = 3.0 * (radius + radii[j]);
                    if ((cand.x - q.x) * (cand.x - q.x) + (cand.y - q.y) * (cand.y - q.y) < sep * sep)
                        return true;
                }
                return false;
            };
            while (clashes(p)) {
                if (++attempt >= kAttempts) {
                    throw ConfigError("scene.cell_count_max: cannot place " +
                                      std::to_string(n_cells) + " non-overlapping cells");
                }
                p = {rng.uniform(0.0, wid), rng.uniform(0.0, hgt)};
            }
        }
        add_gaussian(image, p.x, p.y, radius, intensity);
        scene.annotation.points.push_back(p);
        radii.push_back(radius);
    }

    if (config.noise_std > 0.0) {
        for (double& v : image.data()) v += config.noise_std * rng.normal();
    }
    for (double& v : image.data()) v = std::clamp(v, 0.0, 1.0);
    scene.image = std::move(image);
    return scene;
}

Tensor make_density_map(const DotAnnotation& annotation, std::size_t height, std::size_t width,
                        std::size_t downsample, double sigma) {
    if (downsample == 0 || height % downsample || width % downsample) {
        throw ConfigError("density map: downsample " + std::to_string(downsample) +
                          " must divide " + std::to_string(height) + "x" + std::to_string(width));
    }
    if (!(sigma > 0.0)) throw ConfigError("density map: sigma must be positive");
    const std::size_t oh = height / downsample, ow = width / downsample;
    const double s = static_cast<double>(downsample);
    Tensor density({oh, ow});
    Tensor kernel({oh, ow});
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (std::size_t k = 0; k < annotation.points.size(); ++k) {
        const Point& p = annotation.points[k];
        if (!(p.x >= 0.0 && p.x < static_cast<double>(width) && p.y >= 0.0 &&
              p.y < static_cast<double>(height))) {
            throw DomainError("density map: point " + std::to_string(k) + " (" +
                              format_double(p.x) + ", " + format_double(p.y) +
                              ") outside " + std::to_string(width) + "x" +
                              std::to_string(height));
        }
        const double cx = p.x / s, cy = p.y / s;
        double total = 0.0;
        for (std::size_t h = 0; h < oh; ++h) {
            const double dy = static_cast<double>(h) + 0.5 - cy;
            for (std::size_t w = 0; w < ow; ++w) {
                const double dx = static_cast<double>(w) + 0.5 - cx;
                const double v = std::exp(-(dx * dx + dy * dy) * inv);
                kernel.at(h, w) = v;
                total += v;
            }
        }
        for (std::size_t i = 0; i < density.size(); ++i) density[i] += kernel[i] / total;
    }
    return density;
}

Sample make_sample(const SceneConfig& config, std::uint64_t index) {
    RenderedScene scene = render_scene(config, index);
    Sample s;
    s.id = index;
    s.density_gt = make_density_map(scene.annotation, config.height, config.width,
                                    config.downsample, config.density_sigma);
    s.image = std::move(scene.image);
    s.annotation = std::move(scene.annotation);
    return s;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

void write_annotation_csv(const fs::path& path, const DotAnnotation& annotation) {
    std::string out = "x,y\n";
    for (const Point& p : annotation.points) {
        out += format_double(p.x);
        out += ',';
        out += format_double(p.y);
        out += '\n';
    }
    write_text(path, out);
}

DotAnnotation read_annotation_csv(const fs::path& path) {
    std::istringstream in(read_text(path));
    std::string line;
    if (!std::getline(in, line) || trim(line) != "x,y") {
        throw IoError(path.string() + ": expected header 'x,y'");
    }
    DotAnnotation ann;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        const auto cols = split(line, ',');
        if (cols.size() != 2) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected 2 columns");
        }
        try {
            ann.points.push_back({parse_double(cols[0], "x"), parse_double(cols[1], "y")});
        } catch (const ConfigError& e) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return ann;
}

namespace {

std::string sample_stem(std::uint64_t id) {
    std::string s = std::to_string(id);
    return std::string(s.size() < 6 ? 6 - s.size() : 0, '0') + s;
}

const char* split_name(Split s) { return s == Split::Train ? "train" : "test"; }

ManifestEntry entry_for(const Sample& sample, Split split) {
    const std::string stem = sample_stem(sample.id);
    return {sample.id, split, "images/" + stem + ".pdtf", "annotations/" + stem + ".csv",
            "density/" + stem + ".pdtf", sample.count()};
}

} // namespace

ManifestEntry save_sample(const fs::path& root, const Sample& sample, Split split) {
    const ManifestEntry e = entry_for(sample, split);
    std::error_code ec;
    for (const char* sub : {"images", "annotations", "density"}) {
        fs::create_directories(root / sub, ec);
        if (ec) throw IoError("cannot create " + (root / sub).string() + ": " + ec.message());
    }
    write_pdtf(root / e.image, sample.image);
    write_annotation_csv(root / e.annotation, sample.annotation);
    write_pdtf(root / e.density, sample.density_gt);
    return e;
}

Sample load_sample(const fs::path& root, const ManifestEntry& entry) {
    Sample s;
    s.id = entry.id;
    s.image = read_pdtf(root / entry.image);
    s.annotation = read_annotation_csv(root / entry.annotation);
    s.density_gt = read_pdtf(root / entry.density);
    if (s.count() != entry.count) {
        throw IoError((root / entry.annotation).string() + ": " + std::to_string(s.count()) +
                      " points, manifest says " + std::to_string(entry.count));
    }
    return s;
}

std::string serialize_manifest(const Manifest& m) {
    std::ostringstream os;
    os << "# protodensity dataset manifest\n";
    os << "format = protodensity-dataset/1\n";
    for (const auto& [k, v] : scene_config_entries(m.config)) os << "scene." << k << " = " << v << '\n';
    os << "n_train = " << m.n_train << '\n';
    os << "n_test = " << m.n_test << '\n';
    os << "[samples]\n";
    os << "id,split,image,annotation,density,count\n";
    for (const ManifestEntry& e : m.entries) {
        os << e.id << ',' << split_name(e.split) << ',' << e.image << ',' << e.annotation << ','
           << e.density << ',' << e.count << '\n';
    }
    return os.str();
}

Manifest parse_manifest(const std::string& text) {
    Manifest m;
    std::istringstream in(text);
    std::string line;
    bool in_table = false, saw_header = false, saw_format = false;
    std::size_t lineno = 0;
    auto fail = [&](const std::string& why) {
        throw IoError("manifest line " + std::to_string(lineno) + ": " + why);
    };
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t == "[samples]") {
            in_table = true;
            continue;
        }
        if (in_table) {
            if (!saw_header) {
                if (t != "id,split,image,annotation,density,count") fail("bad sample table header");
                saw_header = true;
                continue;
            }
            const auto cols = split(t, ',');
            if (cols.size() != 6) fail("expected 6 columns");
            ManifestEntry e{};
            e.id = static_cast<std::uint64_t>(parse_int(cols[0], "id"));
            if (cols[1] == "train") e.split = Split::Train;
            else if (cols[1] == "test") e.split = Split::Test;
            else fail("unknown split '" + cols[1] + "'");
            e.image = cols[2];
            e.annotation = cols[3];
            e.density = cols[4];
            e.count = static_cast<std::size_t>(parse_int(cols[5], "count"));
            m.entries.push_back(std::move(e));
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) fail("expected key = value");
        const std::string key = trim(t.substr(0, eq)), value = trim(t.substr(eq + 1));
        if (key == "format") {
            if (value != "protodensity-dataset/1") fail("unsupported format '" + value + "'");
            saw_format = true;
        } else if (key == "n_train") {
            m.n_train = static_cast<std::size_t>(parse_int(value, key));
        } else if (key == "n_test") {
            m.n_test = static_cast<std::size_t>(parse_int(value, key));
        } else if (key.rfind("scene.", 0) == 0) {
            if (!set_scene_field(m.config, key.substr(6), value)) fail("unknown key " + key);
        } else {
            fail("unknown key " + key);
        }
    }
    if (!saw_format) throw IoError("manifest: missing format line");
    if (m.entries.size() != m.n_train + m.n_test) {
        throw IoError("manifest: sample table has " + std::to_string(m.entries.size()) +
                      " rows, expected " + std::to_string(m.n_train + m.n_test));
    }
    m.config.validate();
    return m;
}

Manifest generate_dataset(const SceneConfig& config, std::size_t n_train, std::size_t n_test,
                          const fs::path& out_dir) {
    config.validate();
    if (n_train == 0) throw ConfigError("data.n_train: must be positive");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    Manifest m;
    m.config = config;
    m.n_train = n_train;
    m.n_test = n_test;
    for (std::uint64_t i = 0; i < n_train + n_test; ++i) {
        const Sample s = make_sample(config, i);
        m.entries.push_back(save_sample(out_dir, s, i < n_train ? Split::Train : Split::Test));
    }
    write_text(out_dir / "manifest.txt", serialize_manifest(m));
    return m;
}

Dataset load_dataset(const fs::path& dir) {
    Dataset ds;
    ds.root = dir;
    const std::string text = read_text(dir / "manifest.txt");
    try {
        ds.manifest = parse_manifest(text);
    } catch (const std::exception& e) {
        throw IoError((dir / "manifest.txt").string() + ": " + e.what());
    }
    ds.manifest_hash = fnv1a(text);
    for (const ManifestEntry& e : ds.manifest.entries) {
        (e.split == Split::Train ? ds.train : ds.test).push_back(load_sample(dir, e));
    }
    return ds;
}

Dataset make_dataset(const SceneConfig& config, std::size_t n_train, std::size_t n_test) {
    config.validate();
    Dataset ds;
    ds.manifest.config = config;
    ds.manifest.n_train = n_train;
    ds.manifest.n_test = n_test;
    for (std::uint64_t i = 0; i < n_train + n_test; ++i) {
        Sample s = make_sample(config, i);
        const Split sp = i < n_train ? Split::Train : Split::Test;
        ds.manifest.entries.push_back(entry_for(s, sp));
        (sp == Split::Train ? ds.train : ds.test).push_back(std::move(s));
    }
    ds.manifest_hash = fnv1a(serialize_manifest(ds.manifest));
    return ds;
}

} // namespace protodensity
