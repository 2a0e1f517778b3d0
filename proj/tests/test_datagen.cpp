#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "protodensity/datagen.hpp"
#include "protodensity/errors.hpp"
#include "protodensity/io.hpp"
#include "test_util.hpp"

using namespace protodensity;

namespace {

double total(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v;
    return s;
}

DotAnnotation random_points(Rng& rng, std::size_t n, double h, double w) {
    DotAnnotation a;
    for (std::size_t i = 0; i < n; ++i) a.points.push_back({rng.uniform(0.0, w), rng.uniform(0.0, h)});
    return a;
}

} // namespace

TEST_CASE("empty scene renders black with no annotation") {
    SceneConfig c;
    c.cell_count_min = c.cell_count_max = 0;
    c.artifact_count_min = c.artifact_count_max = 0;
    c.noise_std = 0.0;
    const RenderedScene s = render_scene(c, 3);
    CHECK(s.annotation.points.empty());
    for (double v : s.image.data()) CHECK(v == 0.0);
}

TEST_CASE("rendering is deterministic in seed and index") {
    const SceneConfig c;
    const RenderedScene a = render_scene(c, 11), b = render_scene(c, 11);
    CHECK(a.image == b.image);
    REQUIRE(a.annotation.points.size() == b.annotation.points.size());
    for (std::size_t i = 0; i < a.annotation.points.size(); ++i) {
        CHECK(a.annotation.points[i].x == b.annotation.points[i].x);
        CHECK(a.annotation.points[i].y == b.annotation.points[i].y);
    }
    CHECK_FALSE(render_scene(c, 12).image == a.image);
}

TEST_CASE("fixed cell count lands inside the image") {
    SceneConfig c;
    c.cell_count_min = c.cell_count_max = 40;
    const RenderedScene s = render_scene(c, 0);
    CHECK(s.annotation.points.size() == 40);
    for (const Point& p : s.annotation.points) {
        CHECK(p.x >= 0.0);
        CHECK(p.x < 128.0);
        CHECK(p.y >= 0.0);
        CHECK(p.y < 128.0);
    }
    for (double v : s.image.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("density map examples") {
    const Tensor empty = make_density_map({}, 128, 128, 8, 1.0);
    for (double v : empty.data()) CHECK(v == 0.0);
    Rng rng(8);
    const Tensor one = make_density_map(random_points(rng, 1, 128, 128), 128, 128, 8, 1.0);
    CHECK(one.shape() == Shape{16, 16});
    CHECK(std::abs(total(one) - 1.0) <= 1e-9);
    CHECK(std::abs(total(make_density_map(random_points(rng, 57, 128, 128), 128, 128, 8, 1.0)) - 57.0) <=
          1e-7);
    CHECK_THROWS_AS(make_density_map(random_points(rng, 1, 128, 128), 128, 124, 8, 1.0), ConfigError);
    DotAnnotation outside;
    outside.points.push_back({128.0, 3.0});
    CHECK_THROWS_AS(make_density_map(outside, 128, 128, 8, 1.0), DomainError);
}

TEST_CASE("density mass is conserved for 1000 random annotations") {
    Rng rng(9);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = rng.below(120);
        const double sigma = rng.uniform(0.3, 4.0);
        const Tensor d = make_density_map(random_points(rng, n, 64, 96), 64, 96, 8, sigma);
        worst = std::max(worst, std::abs(total(d) - static_cast<double>(n)));
    }
    CHECK(worst <= 1e-7);
}

TEST_CASE("annotated centers are local maxima when cells do not overlap") {
    SceneConfig c;
    c.allow_overlap = false;
    c.cell_count_min = 5;
    c.cell_count_max = 15;
    c.artifact_count_min = c.artifact_count_max = 0;
    c.noise_std = 0.0;
    for (std::uint64_t idx = 0; idx < 10; ++idx) {
        const RenderedScene s = render_scene(c, idx);
        for (const Point& p : s.annotation.points) {
            const auto px = static_cast<std::ptrdiff_t>(p.x), py = static_cast<std::ptrdiff_t>(p.y);
            const double centre = s.image.at(0, static_cast<std::size_t>(py), static_cast<std::size_t>(px));
            // The brightest pixel within 2 px of the dot is adjacent to it.
            double best = -1.0;
            std::ptrdiff_t bx = 0, by = 0;
            for (std::ptrdiff_t y = py - 2; y <= py + 2; ++y)
                for (std::ptrdiff_t x = px - 2; x <= px + 2; ++x) {
                    if (y < 0 || x < 0 || y >= 128 || x >= 128) continue;
                    const double v = s.image.at(0, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
                    if (v > best) best = v, bx = x, by = y;
                }
            CHECK(std::abs(bx - px) <= 1);
            CHECK(std::abs(by - py) <= 1);
            CHECK(centre > 0.0);
        }
    }
}

TEST_CASE("scene config validation names the field") {
    SceneConfig c;
    c.height = 130;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("scene.height"), ConfigError);
    SceneConfig d;
    d.cell_count_min = 9;
    d.cell_count_max = 3;
    CHECK_THROWS_WITH_AS(d.validate(), doctest::Contains("scene.cell_count_min"), ConfigError);
    CHECK_THROWS_AS(artifact_kind_from_string("smudge"), ConfigError);
}

TEST_CASE("scene config entries round trip") {
    SceneConfig c = testutil::tiny_scene(42);
    c.artifact_kinds = {ArtifactKind::Streak};
    c.allow_overlap = false;
    SceneConfig back;
    for (const auto& [k, v] : scene_config_entries(c)) CHECK(set_scene_field(back, k, v));
    CHECK(scene_config_entries(back) == scene_config_entries(c));
    CHECK_FALSE(set_scene_field(back, "no_such_key", "1"));
}

TEST_CASE("generated dataset regenerates bit-identically from its manifest") {
    const auto dir = testutil::scratch_dir("datagen");
    const SceneConfig c = testutil::tiny_scene(5);
    generate_dataset(c, 4, 2, dir / "a");
    const Dataset ds = load_dataset(dir / "a");
    CHECK(ds.train.size() == 4);
    CHECK(ds.test.size() == 2);
    CHECK(ds.test.front().id == 4);

    const Manifest& m = ds.manifest;
    generate_dataset(m.config, m.n_train, m.n_test, dir / "b");
    const Dataset again = load_dataset(dir / "b");
    CHECK(again.manifest_hash == ds.manifest_hash);
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
        CHECK(again.train[i].image == ds.train[i].image);
        CHECK(again.train[i].density_gt == ds.train[i].density_gt);
        CHECK(read_text(dir / "a" / m.entries[i].image) == read_text(dir / "b" / m.entries[i].image));
    }

    // On-disk and in-memory datasets agree.
    const Dataset mem = make_dataset(c, 4, 2);
    CHECK(mem.manifest_hash == ds.manifest_hash);
    CHECK(mem.train[2].image == ds.train[2].image);
    CHECK(mem.train[2].count() == ds.train[2].count());
}

TEST_CASE("manifest parse errors are reported") {
    CHECK_THROWS_AS(parse_manifest("garbage\n"), IoError);
    CHECK_THROWS_AS(load_dataset("/nonexistent/dataset"), IoError);
    const Dataset mem = make_dataset(testutil::tiny_scene(), 2, 1);
    const Manifest back = parse_manifest(serialize_manifest(mem.manifest));
    CHECK(serialize_manifest(back) == serialize_manifest(mem.manifest));
}

TEST_CASE("annotation csv round trip") {
    const auto dir = testutil::scratch_dir("annot");
    DotAnnotation a;
    a.points = {{1.25, 2.5}, {0.1, 100.0 / 3.0}};
    write_annotation_csv(dir / "a.csv", a);
    const DotAnnotation b = read_annotation_csv(dir / "a.csv");
    REQUIRE(b.points.size() == 2);
    CHECK(b.points[1].y == a.points[1].y);
    write_text(dir / "bad.csv", "x,y\n1\n");
    CHECK_THROWS_AS(read_annotation_csv(dir / "bad.csv"), IoError);
}
