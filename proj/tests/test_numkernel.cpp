#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cwm/checkpoint.hpp"
#include "cwm/optim.hpp"
#include "cwm/rng.hpp"
#include "cwm/tensor.hpp"
#include "gradcheck_util.hpp"

#include <cstdio>
#include <filesystem>
#include <random>

using namespace cwm;

TEST_CASE("matmul identity leaves operand unchanged") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<float> dist(-2.f, 2.f);
    std::vector<float> a(9);
    for (auto& v : a) v = dist(rng);
    TensorF A({3, 3}, a);
    TensorF I({3, 3}, std::vector<float>{1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto out = matmul(I, A);
    for (std::size_t i = 0; i < 9; ++i) CHECK(out.data()[i] == doctest::Approx(a[i]));
}

TEST_CASE("softmax of a constant row is uniform") {
    TensorF x({3}, std::vector<float>{0, 0, 0});
    auto y = softmax_last(x);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(y.data()[i] == doctest::Approx(1.0f / 3.0f));
}

TEST_CASE("layernorm of a constant vector is zero before affine") {
    TensorF x({4}, std::vector<float>{0.7f, 0.7f, 0.7f, 0.7f});
    TensorF gamma({4}, 1.0f);
    TensorF beta({4}, 0.0f);
    auto y = layernorm_last(x, gamma, beta);
    for (std::size_t i = 0; i < 4; ++i) CHECK(y.data()[i] == 0.0f);

    // with a nonzero beta the affine shift is all that remains
    TensorF beta2({4}, 0.25f);
    auto y2 = layernorm_last(x, gamma, beta2);
    for (std::size_t i = 0; i < 4; ++i) CHECK(y2.data()[i] == doctest::Approx(0.25f));
}

TEST_CASE("shape mismatch diagnostics name both shapes") {
    TensorF a({2, 3}, 1.0f);
    TensorF b({4, 5}, 1.0f);
    try {
        auto c = matmul(a, b);
        FAIL("expected shape error");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("(2,3)") != std::string::npos);
        CHECK(msg.find("(4,5)") != std::string::npos);
    }
}

TEST_CASE("backward of sum of squares") {
    TensorF x({2}, std::vector<float>{1, 2}, true);
    auto loss = sum_all(mul(x, x));
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0f));
    CHECK(x.grad()[1] == doctest::Approx(4.0f));
}

TEST_CASE("backward rejects non-scalar loss") {
    TensorF x({2}, std::vector<float>{1, 2}, true);
    auto y = mul(x, x);
    CHECK_THROWS_AS(backward(y), std::invalid_argument);
}

TEST_CASE("detached inputs receive no gradient") {
    TensorF x({2}, std::vector<float>{1, 2}, true);
    TensorF d = x.detach();
    auto loss = sum_all(mul(d, d));
    CHECK_FALSE(loss.requires_grad());
    CHECK_FALSE(d.has_grad());
}

TEST_CASE("gradcheck: random 3-layer MLP in float64 vs central differences") {
    std::mt19937_64 rng(42);
    auto randt = [&rng](Shape s) {
        std::uniform_real_distribution<double> dist(-0.8, 0.8);
        std::vector<double> d(shape_numel(s));
        for (auto& v : d) v = dist(rng);
        return TensorD(s, d, true);
    };
    TensorD x = randt({3, 5});
    TensorD w1 = randt({5, 6}), b1 = randt({6});
    TensorD w2 = randt({6, 4}), b2 = randt({4});
    TensorD w3 = randt({4, 2}), b3 = randt({2});
    TensorD target = randt({3, 2});
    target = target.detach();

    auto forward = [&](const TensorD& xx, const TensorD& ww1, const TensorD& bb1,
                       const TensorD& ww2, const TensorD& bb2, const TensorD& ww3,
                       const TensorD& bb3) {
        auto h1 = gelu(add(matmul(xx, ww1), bb1));
        auto h2 = gelu(add(matmul(h1, ww2), bb2));
        auto out = add(matmul(h2, ww3), bb3);
        return mse(out, target);
    };

    auto loss = forward(x, w1, b1, w2, b2, w3, b3);
    backward(loss);

    const double h = 1e-5;
    std::vector<TensorD*> leaves{&x, &w1, &b1, &w2, &b2, &w3, &b3};
    double max_rel = 0.0;
    for (TensorD* leaf : leaves) {
        for (std::size_t i = 0; i < leaf->numel(); ++i) {
            const double keep = leaf->data()[i];
            leaf->data_mut()[i] = keep + h;
            const double fp = forward(x, w1, b1, w2, b2, w3, b3).item();
            leaf->data_mut()[i] = keep - h;
            const double fm = forward(x, w1, b1, w2, b2, w3, b3).item();
            leaf->data_mut()[i] = keep;
            const double numeric = (fp - fm) / (2 * h);
            const double a = leaf->grad()[i];
            max_rel = std::max(max_rel,
                               std::abs(a - numeric) /
                                   std::max({1.0, std::abs(a), std::abs(numeric)}));
        }
    }
    CHECK(max_rel < 1e-5);
}

TEST_CASE("gradcheck: random op compositions, float64 and float32") {
    double worst64 = 0.0, worst32 = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto r64 = gradcheck::run_gradcheck<double>(seed, 1e-5);
        worst64 = std::max(worst64, r64.max_rel_err);
        auto r32 = gradcheck::run_gradcheck<float>(seed, 3e-3);
        worst32 = std::max(worst32, r32.max_rel_err);
    }
    CHECK(worst64 < 1e-5);
    CHECK(worst32 < 1e-3);
}

TEST_CASE("scatter_axis gradcheck") {
    auto build = [](const TensorD& base, const TensorD& rows) {
        auto s = scatter_axis(base, 0, {1, 3}, rows);
        return mean_all(mul(s, s));
    };
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> dist(-1, 1);
    std::vector<double> bd(8), rd(4);
    for (auto& v : bd) v = dist(rng);
    for (auto& v : rd) v = dist(rng);
    TensorD base({4, 2}, bd, true);
    TensorD rows({2, 2}, rd, true);
    auto loss = build(base, rows);
    backward(loss);
    const double h = 1e-6;
    for (std::size_t i = 0; i < 8; ++i) {
        auto bp = bd, bm = bd;
        bp[i] += h;
        bm[i] -= h;
        const double fp = build(TensorD({4, 2}, bp), TensorD({2, 2}, rd)).item();
        const double fm = build(TensorD({4, 2}, bm), TensorD({2, 2}, rd)).item();
        CHECK(base.grad()[i] == doctest::Approx((fp - fm) / (2 * h)).epsilon(1e-5));
    }
    for (std::size_t i = 0; i < 4; ++i) {
        auto rp = rd, rm = rd;
        rp[i] += h;
        rm[i] -= h;
        const double fp = build(TensorD({4, 2}, bd), TensorD({2, 2}, rp)).item();
        const double fm = build(TensorD({4, 2}, bd), TensorD({2, 2}, rm)).item();
        CHECK(rows.grad()[i] == doctest::Approx((fp - fm) / (2 * h)).epsilon(1e-5));
    }
}

TEST_CASE("batch-split gradient equals full-batch gradient") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> dist(-1, 1);
    std::vector<double> xd(8 * 3), td(8 * 2), wd(3 * 2);
    for (auto& v : xd) v = dist(rng);
    for (auto& v : td) v = dist(rng);
    for (auto& v : wd) v = dist(rng);

    auto grad_of = [&](std::size_t row0, std::size_t rows) {
        std::vector<double> xs(xd.begin() + row0 * 3, xd.begin() + (row0 + rows) * 3);
        std::vector<double> ts(td.begin() + row0 * 2, td.begin() + (row0 + rows) * 2);
        TensorD x({rows, 3}, xs);
        TensorD t({rows, 2}, ts);
        TensorD w({3, 2}, wd, true);
        auto loss = mse(gelu(matmul(x, w)), t);
        backward(loss);
        return std::vector<double>(w.grad().begin(), w.grad().end());
    };

    auto full = grad_of(0, 8);
    auto h1 = grad_of(0, 4);
    auto h2 = grad_of(4, 4);
    for (std::size_t i = 0; i < full.size(); ++i) {
        const double avg = 0.5 * (h1[i] + h2[i]);
        CHECK(std::abs(avg - full[i]) / std::max(1.0, std::abs(full[i])) < 1e-6);
    }
}

TEST_CASE("adamw: zero gradient and zero weight decay leave params unchanged") {
    TensorF w({3}, std::vector<float>{1, 2, 3}, true);
    auto loss = mse(mul(w, TensorF({3}, 0.0f)), TensorF({3}, 0.0f));
    backward(loss);
    OptimConfig cfg;
    cfg.base_lr = 0.1;
    cfg.weight_decay = 0.0;
    cfg.batch_size = 256;
    cfg.total_steps = 10;
    AdamW opt({w}, cfg);
    CHECK(opt.step());
    CHECK(w.data()[0] == 1.0f);
    CHECK(w.data()[1] == 2.0f);
    CHECK(w.data()[2] == 3.0f);
}

TEST_CASE("adamw: converges on 1-D quadratic") {
    TensorF w({1}, std::vector<float>{0.0f}, true);
    OptimConfig cfg;
    cfg.base_lr = 0.1;
    cfg.weight_decay = 0.0;
    cfg.batch_size = 256;
    cfg.warmup_steps = 0;
    cfg.total_steps = 500;
    AdamW opt({w}, cfg);
    TensorF target({1}, std::vector<float>{3.0f});
    for (int i = 0; i < 500; ++i) {
        auto loss = mse(w, target);
        backward(loss);
        REQUIRE(opt.step());
    }
    CHECK(std::abs(w.data()[0] - 3.0f) < 1e-2);
}

TEST_CASE("adamw: warmup lr is proportional to (step+1)/warmup_steps") {
    OptimConfig cfg;
    cfg.base_lr = 1.0;
    cfg.batch_size = 256;
    cfg.warmup_steps = 10;
    cfg.total_steps = 100;
    AdamWT<float> opt({}, cfg);
    CHECK(opt.lr_at(0) == doctest::Approx(0.1));
    CHECK(opt.lr_at(4) == doctest::Approx(0.5));
    CHECK(opt.lr_at(9) == doctest::Approx(1.0));
    // cosine tail
    CHECK(opt.lr_at(10) == doctest::Approx(1.0));
    CHECK(opt.lr_at(55) == doctest::Approx(0.5));
    CHECK(opt.lr_at(100) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("adamw: non-finite gradient rejects the step and keeps state") {
    TensorF w({2}, std::vector<float>{1, 2}, true);
    auto loss = mse(w, TensorF({2}, 0.0f));
    backward(loss);
    w.node()->grad[1] = std::numeric_limits<float>::quiet_NaN();
    OptimConfig cfg;
    cfg.total_steps = 5;
    AdamW opt({w}, cfg);
    CHECK_FALSE(opt.step());
    CHECK(opt.step_count() == 0);
    CHECK(w.data()[0] == 1.0f);
    CHECK(w.data()[1] == 2.0f);
}

TEST_CASE("determinism: identical seeds give bit-identical trajectories") {
    auto run = [](std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        TensorF w = xavier_uniform<float>({4, 4}, 4, 4, rng);
        TensorF x = xavier_uniform<float>({4, 4}, 4, 4, rng);
        x = x.detach();
        OptimConfig cfg;
        cfg.base_lr = 0.05;
        cfg.batch_size = 256;
        cfg.total_steps = 50;
        AdamW opt({w}, cfg);
        TensorF target({4, 4}, 0.3f);
        for (int i = 0; i < 50; ++i) {
            auto loss = mse(gelu(matmul(x, w)), target);
            backward(loss);
            REQUIRE(opt.step());
        }
        return std::vector<float>(w.data().begin(), w.data().end());
    };
    auto a = run(123), b = run(123);
    CHECK(a == b);  // exact bit equality
    auto c = run(124);
    CHECK(a != c);
}

TEST_CASE("checkpoint roundtrip is bit-exact") {
    const std::string dir = "test_ckpt_tmp";
    std::mt19937_64 rng(5);
    TensorF a = xavier_uniform<float>({3, 7}, 3, 7, rng);
    TensorF b = xavier_uniform<float>({11}, 11, 11, rng);
    save_checkpoint(dir, {{"alpha", a}, {"beta", b}}, "deadbeef01");
    auto ck = load_checkpoint(dir);
    CHECK(ck.config_hash == "deadbeef01");
    REQUIRE(ck.tensors.size() == 2);
    CHECK(ck.tensors[0].first == "alpha");
    CHECK(ck.get("alpha").shape() == Shape{3, 7});
    for (std::size_t i = 0; i < a.numel(); ++i)
        CHECK(ck.get("alpha").data()[i] == a.data()[i]);
    for (std::size_t i = 0; i < b.numel(); ++i)
        CHECK(ck.get("beta").data()[i] == b.data()[i]);
    CHECK_THROWS(ck.get("gamma"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("mix64 is stable and order-independent") {
    CHECK(mix64(1, 2) == mix64(1, 2));
    CHECK(mix64(1, 2) != mix64(2, 1));
    CHECK(mix64(0, 0) != mix64(0, 1));
}
