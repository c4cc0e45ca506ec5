#include <cstring>
#include <filesystem>
#include <fstream>

#include "catch_amalgamated.hpp"
#include "rawpipe/checkpoint.hpp"
#include "rawpipe/gradcheck.hpp"
#include "rawpipe/optim.hpp"
#include "rawpipe/rng.hpp"
#include "rawpipe/sensor.hpp"
#include "rawpipe/stage.hpp"

using namespace rawpipe;

namespace {

// y = a*x + b elementwise, with captured constants; exercises composition.
class AffineStage final : public Stage {
public:
    AffineStage(double a, double b) : a_(a), b_(b) {}
    std::string name() const override { return "test.affine"; }
    Tensor forward(const Tensor& in, const ParamSet&, std::any&) const override {
        Tensor out = in;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a_ * in[i] + b_;
        return out;
    }
    Tensor backward(const std::any&, const Tensor& cot, const ParamSet&,
                    ParamSet*) const override {
        Tensor g = cot;
        g.scale(a_);
        return g;
    }

private:
    double a_, b_;
};

class NanStage final : public Stage {
public:
    std::string name() const override { return "test.nan"; }
    Tensor forward(const Tensor& in, const ParamSet&, std::any&) const override {
        Tensor out = in;
        out[0] = std::nan("");
        return out;
    }
    Tensor backward(const std::any&, const Tensor& cot, const ParamSet&,
                    ParamSet*) const override {
        return cot;
    }
};

class Needs3dStage final : public Stage {
public:
    std::string name() const override { return "test.needs3d"; }
    Tensor forward(const Tensor& in, const ParamSet&, std::any&) const override {
        if (in.rank() != 3) throw ShapeError("expected rank-3 input");
        return in;
    }
    Tensor backward(const std::any&, const Tensor& cot, const ParamSet&,
                    ParamSet*) const override {
        return cot;
    }
};

}  // namespace

TEST_CASE("rng is a pure function of key and index") {
    RngKey k = RngKey{}.fold(7).fold(3);
    CHECK(k.gauss(5) == RngKey{}.fold(7).fold(3).gauss(5));
    CHECK(k.gauss(5) != k.gauss(6));
    CHECK(RngKey{}.fold(8).gauss(5) != k.gauss(5));
    double mean = 0.0, var = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) mean += k.gauss(std::uint64_t(i));
    mean /= n;
    for (int i = 0; i < n; ++i) {
        const double d = k.gauss(std::uint64_t(i)) - mean;
        var += d * d;
    }
    var /= n - 1;
    CHECK(std::fabs(mean) < 0.03);
    CHECK(var == Catch::Approx(1.0).margin(0.05));
}

TEST_CASE("forward_backward: identity stage") {
    Chain chain;
    chain.append(std::make_shared<IdentityStage>());
    ParamSet params;
    Tensor x = Tensor::from({2, 2}, {1.0, -2.0, 3.0, 0.5});
    Tensor cot = Tensor::from({2, 2}, {0.1, 0.2, 0.3, 0.4});
    auto r = chain.forward_backward(x, params, cot);
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(r.output[i] == x[i]);
        CHECK(r.input_grad[i] == cot[i]);
    }
}

TEST_CASE("forward_backward: scalar square has analytic derivative") {
    Chain chain;
    chain.append(std::make_shared<SquareStage>());
    ParamSet params;
    auto r = chain.forward_backward(Tensor::scalar(3.0), params, Tensor::scalar(1.0));
    CHECK(r.output.item() == 9.0);
    CHECK(r.input_grad.item() == 6.0);
}

TEST_CASE("forward_backward: random 2-stage composition matches finite differences") {
    Chain chain;
    chain.append(std::make_shared<SquareStage>());
    chain.append(std::make_shared<AffineStage>(0.7, -0.2));
    ParamSet params;
    RngKey key = RngKey{}.fold(11);
    Tensor x({4, 4});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.5 + 0.3 * key.gauss(i);
    Tensor v({4, 4});
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = key.fold(1).gauss(i);

    auto r = chain.forward_backward(x, params, v);
    const double h = 1e-5;
    for (std::size_t i = 0; i < x.size(); ++i) {
        Tensor xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        const double fd = (chain.forward(xp, params).dot(v) - chain.forward(xm, params).dot(v)) /
                          (2.0 * h);
        CHECK(detail::rel_err(r.input_grad[i], fd) < 1e-4);
    }
}

TEST_CASE("forward_backward equals manual stage chaining") {
    auto s1 = std::make_shared<SquareStage>();
    auto s2 = std::make_shared<AffineStage>(1.3, 0.1);
    Chain chain;
    chain.append(s1);
    chain.append(s2);
    ParamSet params;
    RngKey key = RngKey{}.fold(5);
    Tensor x({3, 3});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = key.gauss(i);
    Tensor v({3, 3});
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = key.fold(9).gauss(i);

    auto r = chain.forward_backward(x, params, v);

    std::any c1, c2;
    Tensor m1 = s1->forward(x, params, c1);
    Tensor m2 = s2->forward(m1, params, c2);
    Tensor g1 = s2->backward(c2, v, params, nullptr);
    Tensor g0 = s1->backward(c1, g1, params, nullptr);
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(std::fabs(r.output[i] - m2[i]) <= 1e-12);
        CHECK(std::fabs(r.input_grad[i] - g0[i]) <= 1e-12);
    }
}

TEST_CASE("forward_backward error paths name the stages involved") {
    ParamSet params;
    {
        Chain chain;
        chain.append(std::make_shared<SquareStage>());
        chain.append(std::make_shared<NanStage>());
        try {
            chain.forward(Tensor::from({2}, {1.0, 2.0}), params);
            FAIL("expected NumericError");
        } catch (const NumericError& e) {
            CHECK(std::string(e.what()).find("test.nan") != std::string::npos);
        }
    }
    {
        Chain chain;
        chain.append(std::make_shared<SquareStage>());
        chain.append(std::make_shared<Needs3dStage>());
        try {
            chain.forward(Tensor::from({2}, {1.0, 2.0}), params);
            FAIL("expected ShapeError");
        } catch (const ShapeError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("square") != std::string::npos);
            CHECK(msg.find("test.needs3d") != std::string::npos);
        }
    }
}

TEST_CASE("frozen parameters receive zero gradients from forward_backward") {
    ParamSet params;
    params.add(kGammaParam, Tensor::scalar(0.3), "sensor");
    params.at(kGammaParam).frozen = true;
    Chain chain;
    chain.append(std::make_shared<ExposureStage>());
    Tensor x({4, 4}, 0.1);
    Tensor v({4, 4}, 1.0);
    auto r = chain.forward_backward(x, params, v);
    CHECK(r.param_grads.value(kGammaParam)[0] == 0.0);
}

TEST_CASE("adamw: zero gradient and zero weight decay leave parameters unchanged") {
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    AdamW opt(cfg);
    ParamSet params;
    params.add("w", Tensor::from({3}, {1.0, -2.0, 0.25}), "network");
    ParamSet grads = params.zeros_like();
    Tensor before = params.value("w");
    for (int i = 0; i < 5; ++i) opt.step(params, grads, 1e-3);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(params.value("w")[i] == before[i]);
}

TEST_CASE("adamw: frozen parameter with nonzero gradient stays bitwise identical") {
    AdamW opt;
    ParamSet params;
    params.add("w", Tensor::from({2}, {0.5, -0.5}), "optics");
    params.at("w").frozen = true;
    params.add("u", Tensor::from({2}, {0.5, -0.5}), "network");
    ParamSet grads = params.zeros_like();
    grads.value("w") = Tensor::from({2}, {1.0, 2.0});
    grads.value("u") = Tensor::from({2}, {1.0, 2.0});
    Tensor before = params.value("w");
    for (int i = 0; i < 7; ++i) opt.step(params, grads, 2e-3);
    CHECK(std::memcmp(params.value("w").data(), before.data(), 2 * sizeof(double)) == 0);
    CHECK(params.value("u")[0] != 0.5);  // unfrozen twin did move
}

TEST_CASE("adamw: single-step scalar update matches the hand-executed recurrence") {
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.0;
    AdamW opt(cfg);
    ParamSet params;
    params.add("w", Tensor::scalar(1.0), "network");
    ParamSet grads = params.zeros_like();
    grads.value("w")[0] = 1.0;
    opt.step(params, grads, cfg.lr);
    // m=0.1, v=0.001; mhat=1, vhat=1; w -= 0.1 * 1/(1+1e-8)
    const double expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
    CHECK(params.value("w")[0] == Catch::Approx(expected).epsilon(1e-14));
}

TEST_CASE("adamw: weight decay is decoupled") {
    AdamWConfig cfg;
    cfg.lr = 0.01;
    cfg.weight_decay = 0.1;
    AdamW opt(cfg);
    ParamSet params;
    params.add("w", Tensor::scalar(2.0), "network");
    ParamSet grads = params.zeros_like();  // zero gradient: pure decay
    opt.step(params, grads, cfg.lr);
    CHECK(params.value("w")[0] == Catch::Approx(2.0 - 0.01 * 0.1 * 2.0).epsilon(1e-14));
}

TEST_CASE("cosine_lr endpoints, midpoint and monotonicity") {
    CHECK(cosine_lr(0, 100, 2e-3) == 2e-3);
    CHECK(cosine_lr(100, 100, 2e-3) == 0.0);
    CHECK(cosine_lr(50, 100, 2e-3) == Catch::Approx(1e-3).epsilon(1e-12));
    double prev = cosine_lr(0, 1000, 1.0);
    for (std::size_t s = 1; s <= 1000; ++s) {
        const double cur = cosine_lr(s, 1000, 1.0);
        CHECK(cur <= prev);
        prev = cur;
    }
    CHECK_THROWS_AS(cosine_lr(0, 0, 1.0), std::invalid_argument);
}

TEST_CASE("gradcheck: identity stage is exact up to fp cancellation") {
    IdentityStage st;
    ParamSet params;
    Tensor x({4, 4}, 0.5);
    auto rep = gradcheck(st, x, params);
    CHECK(rep.pass);
    // central differences carry ~ulp/h rounding; anything below 1e-9 is "zero"
    CHECK(rep.worst < 1e-9);
}

TEST_CASE("gradcheck: quantizer runs in STE-exempt mode") {
    QuantizeStage st(QuantConfig{8});
    ParamSet params;
    RngKey key = RngKey{}.fold(2);
    Tensor x({4, 4});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.1 + 0.8 * key.uniform(i);
    auto rep = gradcheck(st, x, params);
    CHECK(rep.pass);
    REQUIRE(rep.entries.size() == 1);
    CHECK(rep.entries[0].what.find("straight-through") != std::string::npos);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "rawpipe_ckpt_test";
    fs::remove_all(dir);

    ParamSet params;
    RngKey key = RngKey{}.fold(77);
    params.add("optics.zernike", randn({2, 6}, key), "optics", true, true);
    params.add("sensor.gamma", Tensor::scalar(0.25), "sensor");
    params.add("net.w", randn({3, 3, 3}, key.fold(1)), "network");

    AdamW opt;
    ParamSet grads = params.zeros_like();
    grads.value("net.w") = randn({3, 3, 3}, key.fold(2));
    grads.value("sensor.gamma")[0] = 0.5;
    opt.step(params, grads, 1e-3);

    checkpoint::save(dir / "a", params, &opt, 42);
    AdamW opt2;
    auto loaded = checkpoint::load(dir / "a", &opt2);
    CHECK(loaded.step == 42);
    CHECK(loaded.params.size() == params.size());
    CHECK(loaded.params.at("optics.zernike").frozen);
    CHECK(loaded.params.at("optics.zernike").group == "optics");

    checkpoint::save(dir / "b", loaded.params, &opt2, loaded.step);
    auto bytes = [](const fs::path& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    CHECK(bytes(dir / "a" / "manifest.txt") == bytes(dir / "b" / "manifest.txt"));
    CHECK(bytes(dir / "a" / "tensors.f32") == bytes(dir / "b" / "tensors.f32"));
    fs::remove_all(dir);
}
