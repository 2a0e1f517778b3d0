#include "protodensity/config.hpp"

#include <charconv>
#include <cstdlib>
#include <functional>
#include <sstream>

#include "protodensity/errors.hpp"
#include "protodensity/io.hpp"

namespace protodensity {

namespace {

std::uint64_t to_u64(const std::string& text, const std::string& key) {
    const std::string t = trim(text);
    std::uint64_t v = 0;
    const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size()) {
        throw ConfigError(key + ": expected a non-negative integer, got '" + t + "'");
    }
    return v;
}

std::size_t to_size(const std::string& text, const std::string& key) {
    return static_cast<std::size_t>(to_u64(text, key));
}

bool to_bool(const std::string& text, const std::string& key) {
    const std::string t = trim(text);
    if (t == "true" || t == "1") return true;
    if (t == "false" || t == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + t + "'");
}

std::string bool_str(bool b) { return b ? "true" : "false"; }

template <typename T>
std::string join(const std::vector<T>& values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out += ',';
        if constexpr (std::is_floating_point_v<T>) out += format_double(values[i]);
        else out += std::to_string(values[i]);
    }
    return out;
}

struct Field {
    const char* key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

std::string to_text(std::size_t v) { return std::to_string(v); }
std::string to_text(double v) { return format_double(v); }
std::string to_text(bool v) { return bool_str(v); }

void from_text(const std::string& text, const std::string& key, std::size_t& out) {
    out = to_size(text, key);
}
void from_text(const std::string& text, const std::string& key, double& out) {
    out = parse_double(text, key);
}
void from_text(const std::string& text, const std::string& key, bool& out) {
    out = to_bool(text, key);
}

/// `member` maps a config to the field it names.
template <typename Member>
Field field(const char* key, Member member) {
    return {key, [member](const RunConfig& c) { return to_text(member(const_cast<RunConfig&>(c))); },
            [member](RunConfig& c, const std::string& v, const std::string& k) {
                from_text(v, k, member(c));
            }};
}

#define PD_FIELD(KEY, MEMBER) field(KEY, [](RunConfig& c) -> auto& { return c.MEMBER; })

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        PD_FIELD("data.n_train", n_train),
        PD_FIELD("data.n_test", n_test),
        PD_FIELD("pretrain.epochs", pretrain.epochs),
        PD_FIELD("pretrain.learning_rate", pretrain.learning_rate),
        PD_FIELD("pretrain.batch_size", pretrain.batch_size),
        PD_FIELD("pretrain.seed", pretrain.seed),
        PD_FIELD("model.k_cell", model.k_cell),
        PD_FIELD("model.k_bg", model.k_bg),
        PD_FIELD("model.d", model.d),
        PD_FIELD("model.epsilon", model.epsilon),
        Field{"model.downsample", [](const RunConfig&) { return std::string("8"); },
              [](RunConfig&, const std::string& v, const std::string& k) {
                  if (to_size(v, k) != FeatureExtractor::kDownsample) {
                      throw ConfigError(k + ": the extractor downsamples by exactly 8");
                  }
              }},
        PD_FIELD("train.learning_rate", train.adam.learning_rate),
        PD_FIELD("train.beta1", train.adam.beta1),
        PD_FIELD("train.beta2", train.adam.beta2),
        PD_FIELD("train.adam_epsilon", train.adam.epsilon),
        PD_FIELD("train.weight_decay", train.adam.weight_decay),
        PD_FIELD("train.batch_size", train.batch_size),
        PD_FIELD("train.max_epochs", train.max_epochs),
        PD_FIELD("train.projection_interval", train.projection_interval),
        PD_FIELD("train.patience", train.patience),
        PD_FIELD("train.min_delta", train.min_delta),
        PD_FIELD("train.seed", train.seed),
        PD_FIELD("train.refit_head", train.refit_head),
        PD_FIELD("loss.lambda1", train.loss.lambda1),
        PD_FIELD("loss.lambda2", train.loss.lambda2),
        PD_FIELD("loss.lambda3", train.loss.lambda3),
        PD_FIELD("loss.tau_cell", train.loss.tau_cell),
        PD_FIELD("loss.tau_bg", train.loss.tau_bg),
        PD_FIELD("loss.raw_dot_product", train.loss.raw_dot_product),
        PD_FIELD("interp.top_k", top_k),
        PD_FIELD("interp.percentile", percentile),
        Field{"eval.seeds", [](const RunConfig& c) { return join(c.seeds); },
              [](RunConfig& c, const std::string& v, const std::string& k) {
                  c.seeds = parse_seed_list(v, k);
              }},
    };
    return table;
}

#undef PD_FIELD

template <typename T, typename Parse>
std::vector<T> parse_list(const std::string& text, const std::string& what, Parse parse) {
    std::vector<T> out;
    for (const std::string& part : split(text, ',')) {
        const std::string t = trim(part);
        if (t.empty()) throw ConfigError(what + ": empty list element in '" + text + "'");
        out.push_back(parse(t));
    }
    if (out.empty()) throw ConfigError(what + ": list is empty");
    return out;
}

} // namespace

void RunConfig::validate() const {
    scene.validate();
    if (n_train == 0) throw ConfigError("data.n_train: must be at least 1");
    pretrain.validate();
    model.validate();
    if (model.d_in != FeatureExtractor::kOutChannels) {
        throw ConfigError("model.d_in: must equal the extractor's 64 output channels");
    }
    train.validate();
    if (top_k == 0) throw ConfigError("interp.top_k: must be at least 1");
    if (!(percentile > 0.0 && percentile <= 100.0)) {
        throw ConfigError("interp.percentile: must lie in (0, 100]");
    }
    if (seeds.empty()) throw ConfigError("eval.seeds: at least one seed required");
    if (scene.downsample != FeatureExtractor::kDownsample) {
        throw ConfigError("scene.downsample: must be 8 to match the extractor");
    }
}

ExperimentConfig RunConfig::experiment() const { return {model, train, top_k, percentile}; }

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
    if (key.rfind("scene.", 0) == 0) {
        if (!set_scene_field(config.scene, key.substr(6), trim(value))) {
            throw ConfigError("unknown config key '" + key + "'");
        }
        return;
    }
    for (const Field& f : fields()) {
        if (key == f.key) {
            f.set(config, trim(value), key);
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

void apply_override(RunConfig& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("override '" + assignment + "': expected key=value");
    }
    set_config_value(config, trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void apply_config_text(RunConfig& config, const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.find('=') == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        }
        apply_override(config, t);
    }
}

RunConfig load_config(const std::filesystem::path& path) {
    RunConfig c;
    apply_config_text(c, read_text(path));
    return c;
}

bool apply_seed_env(RunConfig& config) {
    const char* env = std::getenv("PROTODENSITY_SEED");
    if (env == nullptr || *env == '\0') return false;
    const std::uint64_t seed = to_u64(env, "PROTODENSITY_SEED");
    config.pretrain.seed = seed;
    config.train.seed = seed;
    config.seeds = {seed};
    return true;
}

std::string serialize_config(const RunConfig& config) {
    std::ostringstream os;
    for (const auto& [k, v] : scene_config_entries(config.scene)) os << "scene." << k << " = " << v << '\n';
    for (const Field& f : fields()) os << f.key << " = " << f.get(config) << '\n';
    return os.str();
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text, const std::string& what) {
    return parse_list<std::uint64_t>(text, what, [&](const std::string& t) { return to_u64(t, what); });
}

std::vector<std::size_t> parse_size_list(const std::string& text, const std::string& what) {
    return parse_list<std::size_t>(text, what, [&](const std::string& t) { return to_size(t, what); });
}

std::vector<double> parse_double_list(const std::string& text, const std::string& what) {
    return parse_list<double>(text, what, [&](const std::string& t) { return parse_double(t, what); });
}

} // namespace protodensity
