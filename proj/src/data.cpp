#include "toco/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include "toco/png_io.hpp"

namespace toco {

const LabelMap& Sample::evaluation_mask() const {
    if (!mask_) throw DatasetError("sample has no ground-truth mask");
    return *mask_;
}

namespace {

constexpr int kMaxShapeClasses = 6;

constexpr std::array<std::array<float, 3>, kMaxShapeClasses> kClassColors{{
    {0.85f, 0.35f, 0.30f},  // circle
    {0.35f, 0.80f, 0.35f},  // triangle
    {0.30f, 0.45f, 0.85f},  // rectangle
    {0.85f, 0.80f, 0.30f},  // diamond
    {0.75f, 0.35f, 0.80f},  // ring
    {0.30f, 0.80f, 0.80f},  // cross
}};

struct Placed {
    double cx, cy, r;
};

bool inside(int kind, double dx, double dy, double r, double aspect) {
    switch (kind) {
        case 0: return dx * dx + dy * dy <= r * r;
        case 1: {
            // upright triangle, apex at -r, base at +0.8r
            if (dy < -r || dy > 0.8 * r) return false;
            const double half = r * (dy + r) / (1.8 * r);
            return std::abs(dx) <= half;
        }
        case 2: return std::abs(dx) <= r * aspect && std::abs(dy) <= r * (1.6 - aspect);
        case 3: return std::abs(dx) + std::abs(dy) <= r;
        case 4: {
            const double d2 = dx * dx + dy * dy;
            return d2 <= r * r && d2 >= 0.25 * r * r;
        }
        default: return (std::abs(dx) <= 0.35 * r && std::abs(dy) <= r) || (std::abs(dy) <= 0.35 * r && std::abs(dx) <= r);
    }
}

float quantise(float v) {
    return float(std::lround(std::clamp(v, 0.f, 1.f) * 255.f)) / 255.f;
}

Sample generate_one(const ShapesConfig& cfg, std::uint64_t seed, int index) {
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(index)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int S = cfg.size;

    Image img(3, S, S);
    // Textured background: coarse colour field, bilinearly interpolated, plus pixel noise.
    const int g = S / 8 + 2;
    std::array<double, 3> base;
    for (auto& b : base) b = 0.3 + 0.3 * u(rng);
    std::vector<double> coarse(std::size_t(3) * g * g);
    for (auto& v : coarse) v = 0.24 * u(rng) - 0.12;
    for (int y = 0; y < S; ++y) {
        const double fy = double(y) / S * (g - 1);
        const int y0 = std::min(int(fy), g - 2);
        const double ty = fy - y0;
        for (int x = 0; x < S; ++x) {
            const double fx = double(x) / S * (g - 1);
            const int x0 = std::min(int(fx), g - 2);
            const double tx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                auto at = [&](int yy, int xx) { return coarse[(std::size_t(c) * g + yy) * g + xx]; };
                const double field = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
                                     ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
                img.at(c, y, x) = float(base[c] + field + 0.08 * u(rng) - 0.04);
            }
        }
    }

    std::vector<double> weights = cfg.class_weights;
    if (weights.empty()) weights.assign(std::size_t(cfg.classes), 1.0);
    std::discrete_distribution<int> pick_class(weights.begin(), weights.end());
    std::uniform_int_distribution<int> pick_count(cfg.min_shapes, cfg.max_shapes);

    LabelMap mask(S, S);
    std::vector<int> instances;
    std::vector<Placed> placed;
    const int count = pick_count(rng);
    for (int s = 0; s < count; ++s) {
        const int kind = pick_class(rng);
        const double r = S / 5.5 + u(rng) * (S / 3.0 - S / 5.5);
        const double aspect = 0.6 + 0.4 * u(rng);
        std::array<float, 3> color;
        for (int c = 0; c < 3; ++c) color[std::size_t(c)] = kClassColors[std::size_t(kind)][std::size_t(c)] + float(0.24 * u(rng) - 0.12);
        bool ok = false;
        double cx = 0, cy = 0;
        for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
            cx = r + u(rng) * (S - 2 * r);
            cy = r + u(rng) * (S - 2 * r);
            ok = std::all_of(placed.begin(), placed.end(), [&](const Placed& p) {
                return std::hypot(p.cx - cx, p.cy - cy) >= 0.6 * (p.r + r);
            });
        }
        if (!ok) continue;
        placed.push_back({cx, cy, r});
        instances.push_back(kind);
        for (int y = 0; y < S; ++y) {
            for (int x = 0; x < S; ++x) {
                if (!inside(kind, x + 0.5 - cx, y + 0.5 - cy, r, aspect)) continue;
                mask.at(y, x) = LabelMap::foreground(kind);
                for (int c = 0; c < 3; ++c) img.at(c, y, x) = color[std::size_t(c)] + float(0.06 * u(rng) - 0.03);
            }
        }
    }
    for (float& v : img.data) v = quantise(v);

    std::vector<std::uint8_t> labels(std::size_t(cfg.classes), 0);
    for (auto l : mask.labels) {
        if (LabelMap::is_foreground(l)) labels[std::size_t(LabelMap::class_of(l))] = 1;
    }
    Sample out(std::move(img), std::move(labels), std::move(mask));
    out.instances = std::move(instances);
    return out;
}

}  // namespace

std::vector<Sample> gen_shapes_dataset(int n, const ShapesConfig& cfg, std::uint64_t seed) {
    if (cfg.classes < 2 || cfg.classes > kMaxShapeClasses) {
        throw std::invalid_argument("gen_shapes_dataset: classes must lie in [2, 6]");
    }
    if (cfg.size < 32) throw std::invalid_argument("gen_shapes_dataset: size must be >= 32");
    if (!cfg.class_weights.empty() && cfg.class_weights.size() != std::size_t(cfg.classes)) {
        throw std::invalid_argument("gen_shapes_dataset: one weight per class required");
    }
    if (cfg.min_shapes < 1 || cfg.max_shapes < cfg.min_shapes) throw std::invalid_argument("gen_shapes_dataset: bad shape count range");
    std::vector<Sample> out;
    out.reserve(std::size_t(std::max(n, 0)));
    for (int i = 0; i < n; ++i) out.push_back(generate_one(cfg, seed, i));
    return out;
}

namespace {

std::string sample_id(std::size_t i) {
    std::ostringstream os;
    os.width(5);
    os.fill('0');
    os << i;
    return os.str();
}

}  // namespace

void export_dataset(const std::vector<Sample>& samples, const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    std::ofstream labels(root / "labels.txt");
    if (!labels) throw IoError("cannot write " + (root / "labels.txt").string());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto id = sample_id(i);
        write_png(root / "images" / (id + ".png"), to_raster(samples[i].image));
        if (samples[i].has_evaluation_mask()) {
            write_png(root / "masks" / (id + ".png"), to_raster(samples[i].evaluation_mask()));
        }
        labels << id;
        for (std::size_t k = 0; k < samples[i].image_labels.size(); ++k) {
            if (samples[i].image_labels[k]) labels << ' ' << (k + 1);
        }
        labels << '\n';
    }
}

std::vector<Sample> load_dir_dataset(const std::filesystem::path& root, int classes) {
    namespace fs = std::filesystem;
    std::vector<Sample> out;
    if (!fs::exists(root)) throw DatasetError("dataset directory does not exist: " + root.string());
    const fs::path images = root / "images";
    if (!fs::exists(images)) return out;

    std::map<std::string, std::vector<std::uint8_t>> listed;
    const fs::path labels_file = root / "labels.txt";
    if (fs::exists(labels_file)) {
        std::ifstream in(labels_file);
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            std::istringstream ls(line);
            std::string id;
            if (!(ls >> id)) continue;
            std::vector<std::uint8_t> v(std::size_t(classes), 0);
            int k;
            while (ls >> k) {
                if (k < 1 || k > classes) {
                    throw DatasetError(labels_file.string() + ":" + std::to_string(line_no) + ": class id " +
                                       std::to_string(k) + " outside [1, " + std::to_string(classes) + "]");
                }
                v[std::size_t(k - 1)] = 1;
            }
            if (!ls.eof()) throw DatasetError(labels_file.string() + ":" + std::to_string(line_no) + ": malformed line");
            listed[id] = std::move(v);
        }
    }

    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(images)) {
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        const std::string id = f.stem().string();
        Image img;
        try {
            img = to_image(read_png(f));
        } catch (const IoError& e) {
            throw DatasetError(e.what());
        }
        std::optional<LabelMap> mask;
        const fs::path mask_path = root / "masks" / (id + ".png");
        if (fs::exists(mask_path)) {
            try {
                mask = to_label_map(read_png(mask_path));
            } catch (const IoError& e) {
                throw DatasetError(e.what());
            }
            for (auto l : mask->labels) {
                if (l != LabelMap::kBackground && l != LabelMap::kIgnore && l > classes) {
                    throw DatasetError(mask_path.string() + ": unknown palette index " + std::to_string(int(l)));
                }
            }
            if (mask->height != img.height || mask->width != img.width) {
                throw DatasetError(mask_path.string() + ": mask size differs from image");
            }
        }
        std::vector<std::uint8_t> labels;
        if (auto it = listed.find(id); it != listed.end()) {
            labels = it->second;
        } else if (mask) {
            labels.assign(std::size_t(classes), 0);
            for (auto l : mask->labels) {
                if (LabelMap::is_foreground(l)) labels[std::size_t(LabelMap::class_of(l))] = 1;
            }
        } else {
            throw DatasetError(f.string() + ": no image-level labels and no mask to derive them from");
        }
        out.emplace_back(std::move(img), std::move(labels), std::move(mask));
    }
    return out;
}

IoUReport miou(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts, int class_count) {
    if (preds.size() != gts.size()) throw std::invalid_argument("miou: prediction/ground-truth count mismatch");
    const std::size_t K = std::size_t(class_count);
    std::vector<std::uint64_t> tp(K, 0), fp(K, 0), fn(K, 0);
    for (std::size_t n = 0; n < preds.size(); ++n) {
        const auto& p = preds[n];
        const auto& g = gts[n];
        if (p.height != g.height || p.width != g.width) throw std::invalid_argument("miou: shape mismatch");
        for (std::size_t i = 0; i < g.size(); ++i) {
            const auto gl = g.labels[i];
            if (gl == LabelMap::kIgnore) continue;
            if (gl >= K) throw std::invalid_argument("miou: ground-truth label out of range");
            const auto pl = p.labels[i];
            if (pl == gl) {
                ++tp[gl];
            } else {
                ++fn[gl];
                if (pl < K) ++fp[pl];
            }
        }
    }
    IoUReport r;
    r.per_class_iou.assign(K, 0.0);
    r.valid.assign(K, false);
    double total = 0;
    int valid = 0;
    for (std::size_t k = 0; k < K; ++k) {
        const auto uni = tp[k] + fp[k] + fn[k];
        if (uni == 0) continue;
        r.valid[k] = true;
        r.per_class_iou[k] = double(tp[k]) / double(uni);
        total += r.per_class_iou[k];
        ++valid;
    }
    r.miou = valid ? total / valid : 0.0;
    return r;
}

}  // namespace toco
