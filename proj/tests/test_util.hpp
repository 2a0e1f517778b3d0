#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>

#include "protodensity/datagen.hpp"
#include "protodensity/rng.hpp"
#include "protodensity/tensor.hpp"

namespace testutil {

using namespace protodensity;

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Small scenes (32x32 input, 4x4 density grid) for fast end-to-end tests.
inline SceneConfig tiny_scene(std::uint64_t seed = 0) {
    SceneConfig c;
    c.height = 32;
    c.width = 32;
    c.cell_count_min = 1;
    c.cell_count_max = 6;
    c.artifact_count_max = 1;
    c.seed = seed;
    return c;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("protodensity_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace testutil
