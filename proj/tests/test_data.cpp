#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "toco/data.hpp"
#include "toco/png_io.hpp"

using namespace toco;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("toco_test_data_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

LabelMap grid(int h, int w, std::vector<std::uint8_t> v) {
    LabelMap m(h, w);
    m.labels = std::move(v);
    return m;
}

}  // namespace

TEST_CASE("generation is deterministic per seed and per index") {
    ShapesConfig cfg;
    const auto a = gen_shapes_dataset(5, cfg, 11);
    const auto b = gen_shapes_dataset(5, cfg, 11);
    CHECK(a == b);
    const auto one = gen_shapes_dataset(1, cfg, 11);
    CHECK(one[0] == a[0]);
    CHECK_FALSE(gen_shapes_dataset(1, cfg, 12)[0] == a[0]);
}

TEST_CASE("image labels hold exactly the classes present in the mask") {
    for (int classes : {2, 3, 6}) {
        ShapesConfig cfg;
        cfg.classes = classes;
        cfg.size = 32 + 16 * (classes % 3);
        for (const auto& s : gen_shapes_dataset(200, cfg, std::uint64_t(classes))) {
            REQUIRE(s.has_evaluation_mask());
            const LabelMap& m = s.evaluation_mask();
            REQUIRE(m.height == cfg.size);
            REQUIRE(s.image.height == cfg.size);
            REQUIRE(s.image_labels.size() == std::size_t(classes));
            std::vector<std::uint8_t> seen(std::size_t(classes), 0);
            for (auto l : m.labels) {
                REQUIRE((l == 0 || (l >= 1 && l <= classes)));
                if (l) seen[std::size_t(l - 1)] = 1;
            }
            REQUIRE(seen == s.image_labels);
            REQUIRE(std::accumulate(seen.begin(), seen.end(), 0) >= 1);
            REQUIRE(s.instances.size() >= 1);
            REQUIRE(s.instances.size() <= 3);
            for (float v : s.image.data) {
                REQUIRE(v >= 0.f);
                REQUIRE(v <= 1.f);
            }
        }
    }
}

TEST_CASE("class frequencies follow the sampling distribution") {
    for (const std::vector<double>& weights : {std::vector<double>{}, std::vector<double>{0.5, 0.3, 0.2}}) {
        ShapesConfig cfg;
        cfg.class_weights = weights;
        std::vector<double> expect = weights.empty() ? std::vector<double>(3, 1.0 / 3) : weights;
        std::vector<double> count(3, 0.0);
        double total = 0;
        for (const auto& s : gen_shapes_dataset(1000, cfg, 5)) {
            for (int k : s.instances) {
                count[std::size_t(k)] += 1;
                total += 1;
            }
        }
        for (int k = 0; k < 3; ++k) {
            INFO("class " << k);
            CHECK(std::abs(count[std::size_t(k)] / total - expect[std::size_t(k)]) <= 0.05);
        }
    }
}

TEST_CASE("evaluation mask access is guarded") {
    Sample s(Image(3, 2, 2), {1}, std::nullopt);
    CHECK_FALSE(s.has_evaluation_mask());
    CHECK_THROWS(s.evaluation_mask());
    const TrainingView v = s.training_view();
    CHECK(v.image == &s.image);
    CHECK(v.labels == &s.image_labels);
}

TEST_CASE("export then load reproduces the samples") {
    ShapesConfig cfg;
    cfg.size = 48;
    auto samples = gen_shapes_dataset(6, cfg, 3);
    const fs::path root = scratch("roundtrip");
    export_dataset(samples, root);
    const auto loaded = load_dir_dataset(root, 3);
    REQUIRE(loaded.size() == samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        CHECK(loaded[i].image == samples[i].image);
        CHECK(loaded[i].image_labels == samples[i].image_labels);
        CHECK(loaded[i].evaluation_mask() == samples[i].evaluation_mask());
    }
    fs::remove_all(root);
}

TEST_CASE("labels are derived from masks when the labels file is absent") {
    auto samples = gen_shapes_dataset(3, ShapesConfig{}, 4);
    const fs::path root = scratch("nolabels");
    export_dataset(samples, root);
    fs::remove(root / "labels.txt");
    const auto loaded = load_dir_dataset(root, 3);
    REQUIRE(loaded.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(loaded[i].image_labels == samples[i].image_labels);
    fs::remove_all(root);
}

TEST_CASE("directory loader errors") {
    SUBCASE("empty directory") {
        const fs::path root = scratch("empty");
        CHECK(load_dir_dataset(root, 3).empty());
        fs::remove_all(root);
    }
    SUBCASE("unknown palette index names the file") {
        auto samples = gen_shapes_dataset(2, ShapesConfig{}, 6);
        const fs::path root = scratch("palette");
        export_dataset(samples, root);
        fs::path mask;
        for (const auto& e : fs::directory_iterator(root / "masks")) mask = e.path();
        LabelMap bad = samples[0].evaluation_mask();
        bad.labels[0] = 9;
        write_png(mask, to_raster(bad));
        try {
            load_dir_dataset(root, 3);
            FAIL("expected DatasetError");
        } catch (const DatasetError& e) {
            CHECK(std::string(e.what()).find(mask.filename().string()) != std::string::npos);
        }
        fs::remove_all(root);
    }
    SUBCASE("corrupt image names the file") {
        auto samples = gen_shapes_dataset(1, ShapesConfig{}, 6);
        const fs::path root = scratch("corrupt");
        export_dataset(samples, root);
        fs::path img;
        for (const auto& e : fs::directory_iterator(root / "images")) img = e.path();
        std::ofstream(img, std::ios::binary) << "not a png";
        try {
            load_dir_dataset(root, 3);
            FAIL("expected DatasetError");
        } catch (const DatasetError& e) {
            CHECK(std::string(e.what()).find(img.filename().string()) != std::string::npos);
        }
        fs::remove_all(root);
    }
}

TEST_CASE("miou examples") {
    const LabelMap gt = grid(2, 2, {0, 1, 1, 255});
    SUBCASE("perfect prediction") {
        const auto r = miou({gt}, {gt}, 2);
        CHECK(r.miou == 1.0);
        CHECK(r.per_class_iou == std::vector<double>{1.0, 1.0});
    }
    SUBCASE("disjoint class") {
        const auto r = miou({grid(2, 2, {1, 0, 0, 0})}, {gt}, 2);
        CHECK(r.per_class_iou[0] == 0.0);
        CHECK(r.per_class_iou[1] == 0.0);
    }
    SUBCASE("4x4 two-class grid against a hand count") {
        // gt:   0 0 1 1     pred: 0 1 1 1
        //       0 0 1 1           0 0 1 0
        //       0 0 1 1           0 0 1 1
        //       I I 1 1           1 0 1 1
        const LabelMap g = grid(4, 4, {0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 255, 255, 1, 1});
        const LabelMap p = grid(4, 4, {0, 1, 1, 1, 0, 0, 1, 0, 0, 0, 1, 1, 1, 0, 1, 1});
        // class 0: TP 5, FN 1, FP 1 -> 5/7 ; class 1: TP 7, FN 1, FP 1 -> 7/9
        const auto r = miou({p}, {g}, 2);
        CHECK(r.per_class_iou[0] == doctest::Approx(5.0 / 7.0));
        CHECK(r.per_class_iou[1] == doctest::Approx(7.0 / 9.0));
        CHECK(r.miou == doctest::Approx((5.0 / 7.0 + 7.0 / 9.0) / 2));
    }
    SUBCASE("classes with empty union are skipped") {
        const auto r = miou({grid(1, 2, {0, 0})}, {grid(1, 2, {0, 0})}, 4);
        CHECK(r.valid == std::vector<bool>{true, false, false, false});
        CHECK(r.miou == 1.0);
    }
    SUBCASE("a prediction outside the class range is a miss") {
        const auto r = miou({grid(1, 2, {255, 1})}, {grid(1, 2, {1, 1})}, 2);
        CHECK(r.per_class_iou[1] == 0.5);
    }
    SUBCASE("mismatches") {
        CHECK_THROWS_AS(miou({gt}, {}, 2), std::invalid_argument);
        CHECK_THROWS_AS(miou({grid(1, 4, {0, 0, 0, 0})}, {gt}, 2), std::invalid_argument);
    }
}

TEST_CASE("miou matches a brute-force oracle, ignores pixel order and relabelling") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
        const int K = 2 + int(rng() % 4);
        const int n = 1 + int(rng() % 16);
        LabelMap p(1, n), g(1, n);
        for (int i = 0; i < n; ++i) {
            p.labels[std::size_t(i)] = std::uint8_t(rng() % std::uint64_t(K));
            g.labels[std::size_t(i)] = rng() % 6 == 0 ? 255 : std::uint8_t(rng() % std::uint64_t(K));
        }
        double sum = 0;
        int valid = 0;
        for (int k = 0; k < K; ++k) {
            int inter = 0, uni = 0;
            for (int i = 0; i < n; ++i) {
                if (g.labels[std::size_t(i)] == 255) continue;
                const bool a = p.labels[std::size_t(i)] == k, b = g.labels[std::size_t(i)] == k;
                inter += a && b;
                uni += a || b;
            }
            if (uni) {
                sum += double(inter) / uni;
                ++valid;
            }
        }
        const double ref = valid ? sum / valid : 0.0;
        const double got = miou({p}, {g}, K).miou;
        REQUIRE(std::abs(got - ref) < 1e-12);
        REQUIRE(got >= 0.0);
        REQUIRE(got <= 1.0);

        std::vector<int> perm(static_cast<std::size_t>(n));
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<int> relabel(static_cast<std::size_t>(K));
        std::iota(relabel.begin(), relabel.end(), 0);
        std::shuffle(relabel.begin(), relabel.end(), rng);
        LabelMap pp(1, n), gg(1, n);
        for (int i = 0; i < n; ++i) {
            const auto pl = p.labels[std::size_t(perm[std::size_t(i)])];
            const auto gl = g.labels[std::size_t(perm[std::size_t(i)])];
            pp.labels[std::size_t(i)] = std::uint8_t(relabel[pl]);
            gg.labels[std::size_t(i)] = gl == 255 ? 255 : std::uint8_t(relabel[gl]);
        }
        REQUIRE(std::abs(miou({pp}, {gg}, K).miou - got) < 1e-12);
    }
}

TEST_CASE("png round trips") {
    const fs::path root = scratch("png");
    Raster rgb{3, 2, 3, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 250, 251, 255}};
    write_png(root / "a.png", rgb);
    const Raster back = read_png(root / "a.png");
    CHECK(back.pixels == rgb.pixels);
    CHECK(back.channels == 3);
    const LabelMap l = grid(2, 2, {0, 3, 255, 1});
    CHECK(to_label_map(to_raster(l)) == l);
    CHECK_THROWS_AS(read_png(root / "missing.png"), IoError);
    fs::remove_all(root);
}
