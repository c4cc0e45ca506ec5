#include <filesystem>
#include <fstream>

#include "catch_amalgamated.hpp"
#include "rawpipe/pipeline.hpp"
#include "test_util.hpp"

using namespace rawpipe;

namespace {

PipelineConfig small_cfg() {
    PipelineConfig cfg;
    cfg.net.num_classes = kSceneClasses;
    cfg.net.base_width = 4;
    cfg.net.depth = 2;
    cfg.ohem.min_kept = 8;
    cfg.ohem.hard_fraction = 0.5;
    return cfg;
}

LensParams defocus_lens(double waves, bool trainable = true) {
    LensParams lens;
    lens.identity = false;
    lens.focal_length_mm = 4.2;
    lens.f_number = 1.8;
    lens.fov_deg = 68.0;
    lens.grid_y = lens.grid_x = 1;
    lens.noll_max = 6;
    lens.coeffs = Tensor({1, 6});
    lens.coeffs.at(0, 3) = waves;
    lens.trainable = trainable;
    return lens;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("pipeline: all switches off reduces to segnet on the channel mean") {
    PipelineConfig cfg = small_cfg();
    cfg.ablation = AblationSwitches{false, false, false, false, false};
    Pipeline pipe(cfg, 7);

    Tensor x({32, 32, 3}, 0.4);  // constant gray
    Pipeline::ForwardOptions fo;
    fo.with_noise = false;
    auto out = pipe.forward(x, fo);
    REQUIRE(out.probs.shape() == std::vector<std::size_t>{32, 32, 5});

    // reference: same-seed segnet applied to the channel mean directly
    SegNet ref(cfg.net);
    ParamSet ref_params = ref.build(RngKey{}.fold(0x1417).fold(7));
    Tensor mono({32, 32}, 0.4);
    SegCtx ctx;
    Tensor expected = ref.forward(ref_params, mono, ctx);
    for (std::size_t i = 0; i < expected.size(); ++i) REQUIRE(out.probs[i] == expected[i]);
}

TEST_CASE("pipeline: composed stage oracles reproduce the RAW chain at b=16") {
    PipelineConfig cfg = small_cfg();
    cfg.lens = LensParams::identity_lens();
    cfg.sensor.exposure_gamma_init = std::log(0.25);  // alpha = 1
    cfg.sensor.bits = 16;
    cfg.ablation.noise_on = false;
    Pipeline pipe(cfg, 3);

    // exact one-hot green response so the mosaic is a pure channel pick
    Tensor& logits = pipe.params().value(kCfaResponseParam);
    for (int cls = 0; cls < 3; ++cls)
        for (int ch = 0; ch < 3; ++ch)
            logits.at(std::size_t(cls), std::size_t(ch)) = (cls == ch) ? inverse_softplus(1.0) : -800.0;

    // dyadic values with mean exactly 0.5; one saturated green pixel pins max
    const int H = 8, W = 8;
    Tensor x({H, W, 3}, 0.5);
    RngKey key = RngKey{}.fold(19);
    for (int y = 0; y < H; ++y)
        for (int xx = 0; xx + 1 < W; xx += 2) {
            const double d = double(1 + key.uniform_index(std::uint64_t(y * W + xx), 100)) / 256.0;
            x.at(std::size_t(y), std::size_t(xx), 1) = 0.5 + d;
            x.at(std::size_t(y), std::size_t(xx + 1), 1) = 0.5 - d;
        }
    x.at(0, 0, 1) = 1.0;
    x.at(0, 1, 1) = 0.0;
    REQUIRE(x.mean() == 0.5);

    Pipeline::ForwardOptions fo;
    fo.with_noise = false;
    auto out = pipe.forward(x, fo);
    const Tensor& raw_q = out.intermediates.at("sensor.quantize");

    // independent composition of the stage formulas
    const double alpha = exposure_gain(std::log(0.25));
    const double green_gain = softplus(inverse_softplus(1.0));
    Tensor expected({H, W});
    double mx = 0.0;
    for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
            const double xs = x.at(std::size_t(y), std::size_t(xx), 1);  // normalize is identity here
            const double xe = std::clamp(alpha * xs, 0.0, 1.0);
            const double r = (((y % 2) * 2 + (xx % 2)) == 1 || ((y % 2) * 2 + (xx % 2)) == 2)
                                 ? xe * green_gain
                                 : 0.0;
            expected.at(std::size_t(y), std::size_t(xx)) = r;
            mx = std::max(mx, r);
        }
    // Bayer RGGB: red and blue cells pick those channels (all 0.5 here)
    for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
            const int cell = (y % 2) * 2 + (xx % 2);
            if (cell == 0 || cell == 3) {
                const double xs = x.at(std::size_t(y), std::size_t(xx), cell == 0 ? 0 : 2);
                const double xe = std::clamp(alpha * xs, 0.0, 1.0);
                expected.at(std::size_t(y), std::size_t(xx)) = xe * green_gain;
                mx = std::max(mx, expected.at(std::size_t(y), std::size_t(xx)));
            }
        }
    double worst_vs_pipeline = 0.0, worst_vs_source = 0.0;
    for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
            const double q =
                std::floor(65536.0 * expected.at(std::size_t(y), std::size_t(xx)) / mx) / 65536.0;
            worst_vs_pipeline =
                std::max(worst_vs_pipeline,
                         std::fabs(q - raw_q.at(std::size_t(y), std::size_t(xx))));
            const int cell = (y % 2) * 2 + (xx % 2);
            const int src = (cell == 0) ? 0 : (cell == 3 ? 2 : 1);
            worst_vs_source = std::max(
                worst_vs_source, std::fabs(raw_q.at(std::size_t(y), std::size_t(xx)) -
                                           x.at(std::size_t(y), std::size_t(xx), std::size_t(src))));
        }
    CHECK(worst_vs_pipeline <= 1e-12);
    CHECK(worst_vs_source <= std::pow(2.0, -16.0) + 1e-9);
}

TEST_CASE("pipeline: same rng key gives bitwise identical probabilities") {
    PipelineConfig cfg = small_cfg();
    Pipeline pipe(cfg, 5);
    SceneSpec spec;
    spec.seed = 2;
    spec.h = spec.w = 32;
    Sample s = generate_scene(spec);
    Pipeline::ForwardOptions fo;
    fo.noise_key = RngKey{}.fold(123);
    auto a = pipe.forward(s.image, fo);
    auto b = pipe.forward(s.image, fo);
    fo.noise_key = RngKey{}.fold(124);
    auto c = pipe.forward(s.image, fo);
    bool same = true, differs = false;
    for (std::size_t i = 0; i < a.probs.size(); ++i) {
        same = same && a.probs[i] == b.probs[i];
        differs = differs || a.probs[i] != c.probs[i];
    }
    CHECK(same);
    CHECK(differs);
}

TEST_CASE("pipeline: optics_on=false is bit-exact independent of lens parameters") {
    PipelineConfig cfg = small_cfg();
    cfg.ablation.optics_on = false;
    cfg.lens = defocus_lens(0.5);
    Pipeline a(cfg, 11);
    cfg.lens = defocus_lens(1.7);
    Pipeline b(cfg, 11);
    SceneSpec spec;
    spec.seed = 6;
    spec.h = spec.w = 32;
    Sample s = generate_scene(spec);
    Pipeline::ForwardOptions fo;
    fo.with_noise = false;
    auto pa = a.forward(s.image, fo);
    auto pb = b.forward(s.image, fo);
    for (std::size_t i = 0; i < pa.probs.size(); ++i) REQUIRE(pa.probs[i] == pb.probs[i]);
}

TEST_CASE("pipeline: gradients reach every trainable group") {
    PipelineConfig cfg = small_cfg();
    cfg.lens = defocus_lens(0.5);
    cfg.pupil_samples = 32;
    cfg.kernel_size = 9;
    Pipeline pipe(cfg, 9);
    SceneSpec spec;
    spec.seed = 4;
    spec.h = spec.w = 32;
    Sample s = generate_scene(spec);

    Pipeline::ForwardOptions fo;
    fo.noise_key = RngKey{}.fold(55);
    auto r = pipe.compute_grads(s, fo, 0.6);

    auto group_norm = [&r](const std::string& group) {
        double n = 0.0;
        for (const auto& name : r.grads.names())
            if (r.grads.at(name).group == group) n += r.grads.value(name).dot(r.grads.value(name));
        return std::sqrt(n);
    };
    CHECK(group_norm("optics") > 0.0);
    CHECK(group_norm("sensor") > 0.0);
    CHECK(group_norm("network") > 0.0);
    CHECK(std::isfinite(r.losses.total));
}

TEST_CASE("pipeline: two-phase training freezes then trains the optics group") {
    namespace fs = std::filesystem;
    const fs::path out = fs::temp_directory_path() / "rawpipe_train_test";
    fs::remove_all(out);

    PipelineConfig cfg = small_cfg();
    cfg.lens = defocus_lens(0.6);
    cfg.pupil_samples = 32;
    cfg.kernel_size = 9;
    Pipeline pipe(cfg, 13);

    std::vector<Sample> data;
    for (std::uint64_t i = 0; i < 4; ++i) {
        SceneSpec spec;
        spec.seed = i;
        spec.h = spec.w = 32;
        data.push_back(generate_scene(spec));
    }

    TrainSchedule sched;
    sched.epochs = 4;
    sched.warmup_epochs = 2;
    sched.batch_size = 2;
    sched.seed = 1;
    sched.throttle = 0.1;
    auto result = train(pipe, data, {}, sched, out);
    REQUIRE_FALSE(result.aborted);
    REQUIRE(result.log.size() == 4);

    auto optics_blob = [&](int epoch) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "epoch_%04d", epoch);
        AdamW tmp;
        auto loaded = checkpoint::load(out / "checkpoints" / buf, &tmp);
        return loaded.params.value(kZernikeParam);
    };
    Tensor e0 = optics_blob(0), e2 = optics_blob(2), e4 = optics_blob(4);
    bool frozen_equal = true, later_moved = false;
    for (std::size_t i = 0; i < e0.size(); ++i) {
        frozen_equal = frozen_equal && e0[i] == e2[i];
        later_moved = later_moved || e2[i] != e4[i];
    }
    CHECK(frozen_equal);
    CHECK(later_moved);
    CHECK(fs::exists(out / "metrics.csv"));
    fs::remove_all(out);
}

TEST_CASE("pipeline: zero throttle pins the optics group after unfreezing") {
    namespace fs = std::filesystem;
    const fs::path out = fs::temp_directory_path() / "rawpipe_train_zero";
    fs::remove_all(out);
    PipelineConfig cfg = small_cfg();
    cfg.lens = defocus_lens(0.6);
    cfg.pupil_samples = 32;
    cfg.kernel_size = 9;
    Pipeline pipe(cfg, 13);
    std::vector<Sample> data;
    for (std::uint64_t i = 0; i < 2; ++i) {
        SceneSpec spec;
        spec.seed = i;
        spec.h = spec.w = 32;
        data.push_back(generate_scene(spec));
    }
    TrainSchedule sched;
    sched.epochs = 3;
    sched.warmup_epochs = 1;
    sched.batch_size = 2;
    sched.throttle = 0.0;
    auto result = train(pipe, data, {}, sched, out);
    REQUIRE_FALSE(result.aborted);
    AdamW tmp;
    auto first = checkpoint::load(out / "checkpoints" / "epoch_0000", &tmp);
    const Tensor& now = pipe.params().value(kZernikeParam);
    for (std::size_t i = 0; i < now.size(); ++i)
        REQUIRE(now[i] == first.params.value(kZernikeParam)[i]);
    fs::remove_all(out);
}

TEST_CASE("pipeline: tau_pi anneals to tau_end at the final epoch") {
    namespace fs = std::filesystem;
    const fs::path out = fs::temp_directory_path() / "rawpipe_train_tau";
    fs::remove_all(out);
    PipelineConfig cfg = small_cfg();
    Pipeline pipe(cfg, 2);
    std::vector<Sample> data;
    SceneSpec spec;
    spec.h = spec.w = 32;
    data.push_back(generate_scene(spec));
    TrainSchedule sched;
    sched.epochs = 5;
    sched.warmup_epochs = 1;
    sched.batch_size = 1;
    sched.tau_end = 0.05;
    auto result = train(pipe, data, {}, sched, out);
    REQUIRE_FALSE(result.aborted);
    CHECK(result.log.front().tau_pi == 1.0);
    CHECK(result.log.back().tau_pi == Catch::Approx(0.05).margin(1e-9));
    double prev = 1e9;
    for (const auto& m : result.log) {
        CHECK(m.tau_pi <= prev + 1e-12);
        prev = m.tau_pi;
    }
    fs::remove_all(out);
}

TEST_CASE("pipeline: training twice with the same seed is byte-identical") {
    namespace fs = std::filesystem;
    const fs::path out1 = fs::temp_directory_path() / "rawpipe_det_a";
    const fs::path out2 = fs::temp_directory_path() / "rawpipe_det_b";
    fs::remove_all(out1);
    fs::remove_all(out2);
    std::vector<Sample> data;
    for (std::uint64_t i = 0; i < 3; ++i) {
        SceneSpec spec;
        spec.seed = i;
        spec.h = spec.w = 32;
        data.push_back(generate_scene(spec));
    }
    TrainSchedule sched;
    sched.epochs = 2;
    sched.warmup_epochs = 0;
    sched.batch_size = 2;
    sched.seed = 77;
    {
        Pipeline pipe(small_cfg(), 21);
        train(pipe, data, {}, sched, out1);
    }
    {
        Pipeline pipe(small_cfg(), 21);
        train(pipe, data, {}, sched, out2);
    }
    CHECK(read_file(out1 / "metrics.csv") == read_file(out2 / "metrics.csv"));
    CHECK(read_file(out1 / "checkpoints" / "epoch_0002" / "tensors.f32") ==
          read_file(out2 / "checkpoints" / "epoch_0002" / "tensors.f32"));
    fs::remove_all(out1);
    fs::remove_all(out2);
}

TEST_CASE("pipeline: numeric failure aborts with the last good checkpoint retained") {
    namespace fs = std::filesystem;
    const fs::path out = fs::temp_directory_path() / "rawpipe_train_abort";
    fs::remove_all(out);
    PipelineConfig cfg = small_cfg();
    Pipeline pipe(cfg, 1);
    std::vector<Sample> data;
    SceneSpec spec;
    spec.h = spec.w = 32;
    Sample s = generate_scene(spec);
    s.image.fill(0.0);  // black frame trips the mean-0.5 normalization floor
    data.push_back(s);
    TrainSchedule sched;
    sched.epochs = 2;
    sched.warmup_epochs = 0;
    sched.batch_size = 1;
    auto result = train(pipe, data, {}, sched, out);
    CHECK(result.aborted);
    CHECK(fs::exists(result.last_checkpoint / "manifest.txt"));
    fs::remove_all(out);
}

TEST_CASE("pipeline: evaluate matches hand-computed metrics on a toy case") {
    PipelineConfig cfg = small_cfg();
    Pipeline pipe(cfg, 30);
    SceneSpec spec;
    spec.seed = 8;
    spec.h = spec.w = 32;
    std::vector<Sample> data{generate_scene(spec)};
    auto rep = evaluate(pipe, data);
    CHECK(rep.mean_iou >= 0.0);
    CHECK(rep.mean_iou <= 1.0);
    CHECK(rep.pixel_accuracy >= 0.0);
    CHECK(rep.pixel_accuracy <= 1.0);
    CHECK(rep.cm.total() == 32 * 32);

    // perfect predictions: evaluate the metric path directly
    ConfusionMatrix cm(2);
    LabelMap t(2, 2);
    t.v = {0, 0, 1, 1};
    accumulate(cm, t, t);
    CHECK(miou(cm).mean_iou == 1.0);
    CHECK(pixel_acc(cm) == 1.0);
}
