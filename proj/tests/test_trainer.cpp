#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "support.hpp"
#include "toco/checkpoint.hpp"
#include "toco/png_io.hpp"
#include "toco/trainer.hpp"

using namespace toco;
using namespace toco::test;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config() {
    TrainConfig cfg = desk_preset();
    cfg.vit = VitConfig{32, 8, 2, 8, 2, 2, 1, 3};
    cfg.classes = 2;
    cfg.batch_size = 2;
    cfg.train_samples = 4;
    cfg.eval_samples = 2;
    cfg.crops.n_crops = 2;
    cfg.crops.local_size = 16;
    cfg.proj_hidden = 6;
    cfg.proj_dim = 4;
    cfg.decoder_width = 4;
    cfg.par.iters = 2;
    cfg.schedule = ScheduleConfig{1e-2, 1e-4, 2, 6, 0.9};
    return cfg;
}

std::vector<Sample> tiny_data(const TrainConfig& cfg, std::uint64_t seed = 1) {
    ShapesConfig s;
    s.classes = cfg.classes;
    s.size = cfg.vit.image_size;
    return gen_shapes_dataset(cfg.train_samples, s, seed);
}

std::vector<TrainingView> views(const std::vector<Sample>& data, const std::vector<std::size_t>& idx) {
    std::vector<TrainingView> out;
    for (std::size_t i : idx) out.push_back(data[i].training_view());
    return out;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("toco_test_trainer_" + name);
    fs::remove_all(p);
    return p;
}

template <typename T>
std::vector<Matrix<T>> snapshot(ToCoModel<T>& m) {
    std::vector<Matrix<T>> out;
    for (auto& [name, p] : m.named_params()) out.push_back(p->value);
    return out;
}

}  // namespace

TEST_CASE("config validation") {
    CHECK_NOTHROW(desk_preset().validate());
    CHECK_NOTHROW(paper_preset().validate());
    auto bad = [](auto mutate) {
        TrainConfig c = desk_preset();
        mutate(c);
        return c;
    };
    CHECK_THROWS_AS(bad([](TrainConfig& c) { c.beta_low = 0.8; }).validate(), std::invalid_argument);
    CHECK_THROWS_AS(bad([](TrainConfig& c) { c.beta_high = 1.0; }).validate(), std::invalid_argument);
    CHECK_THROWS_AS(bad([](TrainConfig& c) { c.lambda.ctc = -0.1; }).validate(), std::invalid_argument);
    CHECK_THROWS_AS(bad([](TrainConfig& c) { c.schedule.warmup_iters = c.schedule.total_iters; }).validate(),
                    std::invalid_argument);
    CHECK_THROWS_AS(preset("huge"), std::invalid_argument);
}

TEST_CASE("full-scale preset snapshot") {
    const TrainConfig p = paper_preset();
    CHECK(p.beta_low == 0.25);
    CHECK(p.beta_high == 0.7);
    CHECK(p.tau == 0.5);
    CHECK(p.rho == 0.9);
    CHECK(p.lambda.ptc == 0.2);
    CHECK(p.lambda.ctc == 0.5);
    CHECK(p.lambda.seg == 0.1);
    CHECK(p.schedule.lr_max == 6e-5);
    CHECK(p.schedule.lr_floor == 1e-6);
    CHECK(p.schedule.warmup_iters == 1500);
    CHECK(p.schedule.total_iters == 20000);
    CHECK(p.schedule.power == 0.9);
    CHECK(p.ptc_mode == SimilarityMode::Abs);
    CHECK(p.vit.depth == 12);
    CHECK(p.vit.patch_size == 16);
    CHECK(p.vit.aux_block == 10);
    CHECK(p.crops.local_size == 96);
    CHECK(p.classes == 20);
}

TEST_CASE("config JSON round trip and partial overrides") {
    TrainConfig c = desk_preset();
    c.seed = 123456789012345ull;
    c.ptc_mode = SimilarityMode::Relu;
    c.lambda = {0.3, 0.0, 0.7};
    c.par.dilations = {1, 3};
    c.vit.aux_block = 4;
    nlohmann::json j = c;
    TrainConfig back = paper_preset();
    from_json(j, back);
    CHECK(nlohmann::json(back) == j);

    TrainConfig partial = desk_preset();
    from_json(nlohmann::json::parse(R"({"lambda_ptc": 0.0, "ptc_mode": "raw", "total_iters": 50})"), partial);
    CHECK(partial.lambda.ptc == 0.0);
    CHECK(partial.lambda.ctc == desk_preset().lambda.ctc);
    CHECK(partial.ptc_mode == SimilarityMode::Raw);
    CHECK(partial.schedule.total_iters == 50);
    CHECK(partial.schedule.warmup_iters == desk_preset().schedule.warmup_iters);

    const fs::path dir = scratch("cfg");
    fs::create_directories(dir);
    save_config(dir / "c.json", c);
    CHECK(nlohmann::json(load_config(dir / "c.json", desk_preset())) == j);
    CHECK_THROWS_AS(load_config(dir / "missing.json", desk_preset()), IoError);
    fs::remove_all(dir);
}

TEST_CASE("batch indices walk seeded permutations epoch by epoch") {
    std::set<std::size_t> first_epoch;
    for (int it = 0; it < 5; ++it) {
        for (std::size_t i : batch_indices(10, 2, it, 3)) first_epoch.insert(i);
    }
    CHECK(first_epoch.size() == 10);
    CHECK(batch_indices(10, 4, 7, 3) == batch_indices(10, 4, 7, 3));
    CHECK(batch_indices(10, 10, 0, 3) != batch_indices(10, 10, 1, 3));
    // A batch straddling an epoch boundary: tail of epoch 0 then head of epoch 1.
    const auto e0 = batch_indices(5, 5, 0, 9), e1 = batch_indices(5, 5, 1, 9);
    const auto mid = batch_indices(5, 3, 1, 9);
    CHECK(mid == std::vector<std::size_t>{e0[3], e0[4], e1[0]});
    CHECK_THROWS_AS(batch_indices(0, 2, 0, 0), std::invalid_argument);
}

TEST_CASE("metrics rows") {
    CHECK(metrics_header() == "iteration,lr,l_cls,l_cls_aux,l_ptc,l_ctc,l_seg,total");
    CHECK(metrics_row(3, 0.5, LossBreakdown{1, 2, 0.25, 0, 0, 3.05}) == "3,0.5,1,2,0.25,0,0,3.05");
}

TEST_CASE("with every lambda zero a step is exactly two-head classification training") {
    TrainConfig cfg = tiny_config();
    cfg.lambda = {0, 0, 0};
    cfg.augment.enabled = false;
    const auto data = tiny_data(cfg);

    auto state = TrainState<double>::init(cfg);
    auto ref = TrainState<double>::init(cfg);
    for (int step = 0; step < 3; ++step) {
        const auto batch = views(data, batch_indices(data.size(), cfg.batch_size, step, cfg.seed));
        const LossBreakdown l = train_step<double>(batch, state, cfg);

        // Reference: classification losses only, written out directly.
        auto params = ref.model.trainable();
        for (auto* p : params) p->zero_grad();
        Tape<double> tape;
        auto vit = bind(tape, ref.model.vit, true);
        Var<double> wh = tape.parameter(ref.model.head.weight);
        Var<double> wa = tape.parameter(ref.model.aux_head.weight);
        std::vector<Var<double>> terms;
        double cls = 0, aux = 0;
        for (const auto& v : batch) {
            VitGraph<double> g = forward(vit, *v.image);
            Var<double> a = cls_loss(gmp_classify(g.final_tokens(), wh), *v.labels);
            Var<double> b = cls_loss(gmp_classify(g.patch_tokens[std::size_t(cfg.vit.aux_block - 1)], wa), *v.labels);
            cls += a.scalar();
            aux += b.scalar();
            terms.push_back(add(a, b));
        }
        Var<double> total = terms[0];
        for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
        tape.backward(scale(total, 1.0 / double(batch.size())));
        ref.optimizer.step(params, lr_schedule(step, cfg.schedule));

        CHECK(l.l_cls == doctest::Approx(cls / 2).epsilon(1e-13));
        CHECK(l.l_cls_aux == doctest::Approx(aux / 2).epsilon(1e-13));
        CHECK(l.l_ptc == 0.0);
        CHECK(l.l_ctc == 0.0);
        CHECK(l.l_seg == 0.0);
        CHECK(l.total == l.l_cls + l.l_cls_aux);
        const auto a = snapshot(state.model), b = snapshot(ref.model);
        double gap = 0;
        for (std::size_t i = 0; i < a.size(); ++i) gap = std::max(gap, (a[i] - b[i]).cwiseAbs().maxCoeff());
        CHECK(gap < 1e-12);
    }
}

TEST_CASE("disabled branches leave the loss trace untouched by their settings") {
    TrainConfig a = tiny_config();
    a.lambda = {0, 0, 0};
    TrainConfig b = a;
    b.crops.n_crops = 5;
    b.tau = 0.1;
    b.par.iters = 7;
    b.ptc_mode = SimilarityMode::Raw;
    const auto data = tiny_data(a);
    auto sa = TrainState<float>::init(a), sb = TrainState<float>::init(b);
    for (int step = 0; step < 3; ++step) {
        const auto batch = views(data, batch_indices(data.size(), a.batch_size, step, a.seed));
        CHECK(metrics_row(step, 0, train_step<float>(batch, sa, a)) == metrics_row(step, 0, train_step<float>(batch, sb, b)));
    }
}

TEST_CASE("AdamW matches a scalar replay on a depth-1 model") {
    TrainConfig cfg = tiny_config();
    cfg.vit.depth = 1;
    cfg.vit.aux_block = 1;
    cfg.weight_decay = 0.05;
    const auto data = tiny_data(cfg);
    auto state = TrainState<double>::init(cfg);

    auto params = state.model.trainable();
    std::vector<Md> value, m, v;
    for (auto* p : params) {
        value.push_back(p->value);
        m.push_back(Md::Zero(p->value.rows(), p->value.cols()));
        v.push_back(Md::Zero(p->value.rows(), p->value.cols()));
    }
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2, eps = cfg.adam_eps, wd = cfg.weight_decay;
    for (int step = 0; step < 3; ++step) {
        const auto batch = views(data, batch_indices(data.size(), cfg.batch_size, step, cfg.seed));
        train_step<double>(batch, state, cfg);
        const double lr = lr_schedule(step, cfg.schedule);
        CHECK(state.last_lr == lr);
        double gap = 0;
        for (std::size_t i = 0; i < params.size(); ++i) {
            const Md& g = params[i]->grad;  // left in place by the step
            for (Eigen::Index k = 0; k < g.size(); ++k) {
                double& mk = m[i].data()[k];
                double& vk = v[i].data()[k];
                double& pk = value[i].data()[k];
                mk = b1 * mk + (1 - b1) * g.data()[k];
                vk = b2 * vk + (1 - b2) * g.data()[k] * g.data()[k];
                const double mh = mk / (1 - std::pow(b1, step + 1));
                const double vh = vk / (1 - std::pow(b2, step + 1));
                pk = pk * (1 - lr * wd) - lr * mh / (std::sqrt(vh) + eps);
            }
            gap = std::max(gap, (params[i]->value - value[i]).cwiseAbs().maxCoeff());
        }
        CHECK(gap < 1e-14);
    }
    CHECK(state.optimizer.steps() == 3);
    CHECK(state.iteration == 3);
}

TEST_CASE("the global head follows the local head by EMA and gets no optimiser update") {
    TrainConfig cfg = tiny_config();
    cfg.lambda = {0.2, 0.5, 0.1};
    const auto data = tiny_data(cfg);
    auto state = TrainState<double>::init(cfg);
    auto g0 = state.model.global_proj.named_params();
    auto l0 = state.model.local_proj.named_params();
    for (std::size_t i = 0; i < g0.size(); ++i) CHECK(g0[i].second->value == l0[i].second->value);

    std::vector<Md> before;
    for (auto& [n, p] : state.model.global_proj.named_params()) before.push_back(p->value);
    const auto batch = views(data, batch_indices(data.size(), cfg.batch_size, 0, cfg.seed));
    train_step<double>(batch, state, cfg);
    auto g = state.model.global_proj.named_params();
    auto l = state.model.local_proj.named_params();
    for (std::size_t i = 0; i < g.size(); ++i) {
        INFO(g[i].first);
        CHECK(g[i].second->grad.isZero(0.0));
        const Md expect = cfg.rho * before[i] + (1 - cfg.rho) * l[i].second->value;
        CHECK((g[i].second->value - expect).cwiseAbs().maxCoeff() < 1e-15);
    }
    const auto trainable = state.model.trainable();
    for (auto& [n, p] : state.model.global_proj.named_params()) {
        CHECK(std::find(trainable.begin(), trainable.end(), p) == trainable.end());
    }
}

TEST_CASE("full-objective steps are deterministic and report the weighted total") {
    TrainConfig cfg = tiny_config();
    const auto data = tiny_data(cfg);
    auto a = TrainState<float>::init(cfg), b = TrainState<float>::init(cfg);
    for (int step = 0; step < 3; ++step) {
        const auto batch = views(data, batch_indices(data.size(), cfg.batch_size, step, cfg.seed));
        const LossBreakdown la = train_step<float>(batch, a, cfg);
        const LossBreakdown lb = train_step<float>(batch, b, cfg);
        CHECK(metrics_row(step, 0, la) == metrics_row(step, 0, lb));
        CHECK(la.total == doctest::Approx(la.l_cls + la.l_cls_aux + 0.2 * la.l_ptc + 0.5 * la.l_ctc + 0.1 * la.l_seg));
        CHECK(std::isfinite(la.total));
    }
    const auto sa = snapshot(a.model), sb = snapshot(b.model);
    for (std::size_t i = 0; i < sa.size(); ++i) CHECK(sa[i] == sb[i]);
}

TEST_CASE("training run writes identical metrics for identical seeds") {
    TrainConfig cfg = tiny_config();
    cfg.checkpoint_every = 2;
    const auto data = tiny_data(cfg);
    const fs::path d1 = scratch("run1"), d2 = scratch("run2");
    TrainOptions o1, o2;
    o1.out_dir = d1;
    o2.out_dir = d2;
    train(cfg, data, o1);
    train(cfg, data, o2);
    const std::string m1 = slurp(d1 / "metrics.csv");
    CHECK(m1 == slurp(d2 / "metrics.csv"));
    CHECK(slurp(d1 / "final.bin") == slurp(d2 / "final.bin"));
    CHECK(fs::exists(d1 / "config.json"));
    CHECK(fs::exists(d1 / "ckpt_000002.json"));
    CHECK(fs::exists(d1 / "ckpt_000004.bin"));
    CHECK_FALSE(fs::exists(d1 / "ckpt_000006.json"));
    int lines = 0;
    for (char c : m1) lines += c == '\n';
    CHECK(lines == 1 + cfg.schedule.total_iters);

    TrainConfig other = cfg;
    other.seed = 1;
    const fs::path d3 = scratch("run3");
    TrainOptions o3;
    o3.out_dir = d3;
    o3.max_iters = 2;
    train(other, data, o3);
    CHECK(slurp(d3 / "metrics.csv") != m1);
    for (const auto& d : {d1, d2, d3}) fs::remove_all(d);
}

TEST_CASE("checkpoint round trip and failure modes") {
    TrainConfig cfg = tiny_config();
    cfg.seed = 5;
    auto state = TrainState<float>::init(cfg);
    for (auto& [name, p] : state.model.named_params()) p->value.array() += 0.125f;
    const fs::path dir = scratch("ckpt");
    fs::create_directories(dir);
    save_checkpoint(dir / "a", state.model, cfg, 17);

    LoadedCheckpoint ck = load_checkpoint(dir / "a");
    CHECK(ck.iteration == 17);
    CHECK(nlohmann::json(ck.config) == nlohmann::json(cfg));
    auto a = state.model.named_params();
    auto b = ck.model.named_params();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].first == b[i].first);
        CHECK(a[i].second->value == b[i].second->value);
    }

    CHECK_THROWS_AS(load_checkpoint(dir / "missing"), CheckpointError);

    const auto manifest = nlohmann::json::parse(slurp(dir / "a.json"));
    auto write_variant = [&](const std::string& name, nlohmann::json j, bool copy_bin = true) {
        std::ofstream(dir / (name + ".json")) << j.dump();
        if (copy_bin) fs::copy_file(dir / "a.bin", dir / (name + ".bin"), fs::copy_options::overwrite_existing);
        return dir / name;
    };
    {
        auto j = manifest;
        j["format"] = "something-else";
        CHECK_THROWS_AS(load_checkpoint(write_variant("fmt", j)), CheckpointError);
    }
    {
        auto j = manifest;
        j["tensors"][0]["shape"][0] = 999;
        CHECK_THROWS_AS(load_checkpoint(write_variant("shape", j)), CheckpointError);
    }
    {
        auto j = manifest;
        j["tensors"].erase(j["tensors"].begin() + 1);
        CHECK_THROWS_AS(load_checkpoint(write_variant("missing_tensor", j)), CheckpointError);
    }
    {
        auto j = manifest;
        auto extra = j["tensors"][0];
        extra["name"] = "bogus.weight";
        j["tensors"].push_back(extra);
        CHECK_THROWS_AS(load_checkpoint(write_variant("extra", j)), CheckpointError);
    }
    {
        write_variant("short", manifest, false);
        const std::string bin = slurp(dir / "a.bin");
        std::ofstream(dir / "short.bin", std::ios::binary) << bin.substr(0, bin.size() / 2);
        CHECK_THROWS_AS(load_checkpoint(dir / "short"), CheckpointError);
    }
    {
        auto j = manifest;
        j["config"]["vit"]["dim"] = 16;
        CHECK_THROWS_AS(load_checkpoint(write_variant("cfg", j)), CheckpointError);
    }
    fs::remove_all(dir);
}
