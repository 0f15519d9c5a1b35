#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cwm/optim.hpp"
#include "cwm/predictor.hpp"
#include "cwm/rng.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

using namespace cwm;

namespace {

PredictorConfig tiny_cfg() {
    PredictorConfig cfg;
    cfg.image_size = 32;
    cfg.patch_size = 8;
    cfg.encoder_dim = 96;
    cfg.encoder_depth = 2;
    cfg.encoder_heads = 3;
    cfg.decoder_dim = 48;
    cfg.decoder_depth = 1;
    cfg.decoder_heads = 3;
    cfg.mask_ratio = 0.875f;  // 16 patches -> 2 visible
    return cfg;
}

WorldConfig tiny_world(std::uint64_t seed) {
    WorldConfig wcfg;
    wcfg.canvas = 32;
    wcfg.max_sprites = 2;
    wcfg.min_size = 6;
    wcfg.max_size = 10;
    wcfg.max_speed = 4;
    wcfg.seed = seed;
    return wcfg;
}

std::vector<Frame> frames_skipping_placement(const WorldConfig& wcfg, std::uint64_t index) {
    for (;; ++index) {
        try {
            return render_episode_frames(wcfg, index);
        } catch (const PlacementError&) {
        }
    }
}

Frame random_frame(int size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> dist(0.f, 1.f);
    Frame f(size, size);
    for (auto& v : f.rgb) v = dist(rng);
    return f;
}

}  // namespace

TEST_CASE("patchify: counts, layout, exact roundtrip") {
    Frame f = random_frame(16, 1);
    const auto patches = patchify(f, 8);
    CHECK(patches.size() == 4u * 8 * 8 * 3);

    // patch (r,c) lives at flat index r*(W/8)+c
    const int pd = 8 * 8 * 3;
    for (int pr = 0; pr < 2; ++pr)
        for (int pc = 0; pc < 2; ++pc)
            CHECK(patches[std::size_t(pr * 2 + pc) * pd] == f.at(pr * 8, pc * 8, 0));

    const Frame back = unpatchify(patches, 16, 8);
    CHECK(back.rgb == f.rgb);

    Frame bad(15, 15);
    CHECK_THROWS_AS(patchify(bad, 8), std::invalid_argument);
}

TEST_CASE("visible-count rounding: round-half-to-even, clamped") {
    PredictorConfig cfg;
    cfg.image_size = 64;
    cfg.patch_size = 8;  // 64 patches
    cfg.mask_ratio = 0.90f;
    CHECK(cfg.visible_target_count() == 6);  // round(6.4) = 6

    cfg.mask_ratio = 0.925f;  // 4.8 -> 5
    CHECK(cfg.visible_target_count() == 5);

    cfg.mask_ratio = 0.90625f;  // exactly 6.0
    CHECK(cfg.visible_target_count() == 6);

    PredictorConfig half;
    half.image_size = 32;
    half.patch_size = 8;       // 16 patches
    half.mask_ratio = 0.90625f;  // 1.5 -> round-half-even = 2
    CHECK(half.visible_target_count() == 2);
    half.mask_ratio = 0.84375f;  // 2.5 -> 2
    CHECK(half.visible_target_count() == 2);

    half.mask_ratio = 0.999f;  // clamped at 1
    CHECK(half.visible_target_count() == 1);
}

TEST_CASE("sample_mask: partition, counts, seeded determinism") {
    PredictorConfig cfg;
    cfg.image_size = 64;
    cfg.patch_size = 8;
    cfg.mask_ratio = 0.90f;

    std::mt19937_64 rng(9);
    const PatchMask m = sample_mask(cfg, rng);
    CHECK(m.visible.size() == 6);
    CHECK(m.masked.size() == 58);
    std::vector<bool> seen(64, false);
    for (auto v : m.visible) seen[v] = true;
    for (auto v : m.masked) {
        CHECK_FALSE(seen[v]);
        seen[v] = true;
    }
    CHECK(std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }));

    std::mt19937_64 r1(33), r2(33);
    CHECK(sample_mask(cfg, r1).visible == sample_mask(cfg, r2).visible);
}

TEST_CASE("positional tables have unique rows; resize preserves corners and uniqueness") {
    PredictorConfig cfg = tiny_cfg();
    PredictorState st = PredictorState::init(cfg, 4);

    auto rows_distinct = [](const TensorF& t) {
        const std::size_t n = t.shape()[0], d = t.shape()[1];
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                double dist = 0;
                for (std::size_t k = 0; k < d; ++k) {
                    const double diff = t.data()[i * d + k] - t.data()[j * d + k];
                    dist += diff * diff;
                }
                if (dist < 1e-12) return false;
            }
        return true;
    };
    CHECK(rows_distinct(st.pos_enc));

    // same size: unchanged
    PredictorState same = st.resized(cfg.image_size);
    CHECK(std::equal(same.pos_enc.data().begin(), same.pos_enc.data().end(),
                     st.pos_enc.data().begin()));

    // 4x4 grid -> 8x8 grid: the four corners of each frame slot are exact
    PredictorState big = st.resized(cfg.image_size * 2);
    const int g = cfg.grid(), G = 2 * g, D = cfg.encoder_dim;
    for (int f = 0; f < cfg.n_frames(); ++f) {
        const auto corner_ok = [&](int ro, int co, int Ro, int Co) {
            const float* a = st.pos_enc.data().data() + ((std::size_t(f) * g + ro) * g + co) * D;
            const float* b = big.pos_enc.data().data() + ((std::size_t(f) * G + Ro) * G + Co) * D;
            for (int k = 0; k < D; ++k)
                if (std::abs(a[k] - b[k]) > 1e-6f) return false;
            return true;
        };
        CHECK(corner_ok(0, 0, 0, 0));
        CHECK(corner_ok(0, g - 1, 0, G - 1));
        CHECK(corner_ok(g - 1, 0, G - 1, 0));
        CHECK(corner_ok(g - 1, g - 1, G - 1, G - 1));
    }
    CHECK(rows_distinct(big.pos_enc));

    CHECK_THROWS_AS(st.resized(33), std::invalid_argument);
}

TEST_CASE("forward: untrained state returns finite full-frame output") {
    PredictorConfig cfg = tiny_cfg();
    PredictorState st = PredictorState::init(cfg, 11);
    std::mt19937_64 rng(12);
    const PatchMask mask = sample_mask(cfg, rng);
    const Frame ctx = random_frame(cfg.image_size, 2);
    const Frame tgt = random_frame(cfg.image_size, 3);
    const Frame pred = st.predict_frame({ctx}, tgt, mask);
    CHECK(pred.h == cfg.image_size);
    CHECK(pred.w == cfg.image_size);
    for (float v : pred.rgb) CHECK(std::isfinite(v));
}

TEST_CASE("forward: permuting visible token order leaves predictions unchanged") {
    PredictorConfig cfg = tiny_cfg();
    PredictorState st = PredictorState::init(cfg, 21);
    std::mt19937_64 rng(22);
    const PatchMask mask = sample_mask(cfg, rng);

    const std::size_t P = cfg.patches_per_frame(), pd = cfg.patch_dim();
    std::vector<float> buf(std::size_t(cfg.total_patches()) * pd);
    std::mt19937_64 vrng(5);
    std::uniform_real_distribution<float> dist(0.f, 1.f);
    for (auto& v : buf) v = dist(vrng);
    TensorF all({1, std::size_t(cfg.total_patches()), pd}, buf);

    std::vector<std::size_t> order(P);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t v : mask.visible) order.push_back(P + v);
    auto base = st.forward(all, mask);

    std::shuffle(order.begin(), order.end(), vrng);
    auto permuted = st.forward(all, mask, &order);

    REQUIRE(base.numel() == permuted.numel());
    for (std::size_t i = 0; i < base.numel(); ++i)
        CHECK(base.data()[i] == doctest::Approx(permuted.data()[i]).epsilon(5e-4));
}

TEST_CASE("masked_patch_mse: exactness, offsets, visible positions ignored") {
    PredictorConfig cfg = tiny_cfg();
    std::mt19937_64 rng(31);
    const PatchMask mask = sample_mask(cfg, rng);
    const std::size_t P = cfg.patches_per_frame(), pd = cfg.patch_dim();

    std::vector<float> t(P * pd);
    std::uniform_real_distribution<float> dist(0.f, 1.f);
    for (auto& v : t) v = dist(rng);
    TensorF target({1, P, pd}, t);

    CHECK(masked_patch_mse(target, target, mask.masked).item() == 0.0f);

    std::vector<float> shifted = t;
    for (auto& v : shifted) v += 0.1f;
    TensorF pred({1, P, pd}, shifted);
    CHECK(masked_patch_mse(pred, target, mask.masked).item() ==
          doctest::Approx(0.01).epsilon(1e-4));

    // perturbing a visible patch does not change the loss
    std::vector<float> vis_perturbed = shifted;
    for (std::size_t i = 0; i < pd; ++i) vis_perturbed[mask.visible[0] * pd + i] += 5.f;
    TensorF pred2({1, P, pd}, vis_perturbed);
    CHECK(masked_patch_mse(pred2, target, mask.masked).item() ==
          doctest::Approx(0.01).epsilon(1e-4));

    CHECK_THROWS_AS(masked_patch_mse(pred, target, {}), std::invalid_argument);
}

TEST_CASE("initial loss with the zero-initialized head equals mean target square") {
    PredictorConfig cfg = tiny_cfg();
    PredictorState st = PredictorState::init(cfg, 41);
    std::mt19937_64 rng(42);
    const PatchMask mask = sample_mask(cfg, rng);

    const WorldConfig wcfg = tiny_world(7);
    const auto frames = frames_skipping_placement(wcfg, 0);

    const std::size_t P = cfg.patches_per_frame(), pd = cfg.patch_dim();
    std::vector<float> buf(std::size_t(cfg.total_patches()) * pd, 0.f);
    auto ctx = patchify(frames[0], cfg.patch_size);
    std::copy(ctx.begin(), ctx.end(), buf.begin());
    auto tgt = patchify(frames[1], cfg.patch_size);
    for (std::size_t v : mask.visible)
        std::copy(tgt.begin() + v * pd, tgt.begin() + (v + 1) * pd,
                  buf.begin() + P * pd + v * pd);

    TensorF all({1, std::size_t(cfg.total_patches()), pd}, buf);
    TensorF truth({1, P, pd}, tgt);
    const double loss = masked_patch_mse(st.forward(all, mask), truth, mask.masked).item();

    // zero head => prediction is identically zero on every patch
    double expect = 0.0;
    for (std::size_t m : mask.masked)
        for (std::size_t i = 0; i < pd; ++i) expect += double(tgt[m * pd + i]) * tgt[m * pd + i];
    expect /= double(mask.masked.size() * pd);
    CHECK(loss == doctest::Approx(expect).epsilon(1e-5));
}

TEST_CASE("overfit sanity: 4-clip memorization reaches loss < 1e-3 within 2k steps") {
    PredictorConfig cfg = tiny_cfg();
    PredictorState st = PredictorState::init(cfg, 51);
    auto params = st.parameters();

    WorldConfig wcfg = tiny_world(99);
    wcfg.frames = 2;
    const std::size_t P = cfg.patches_per_frame(), pd = cfg.patch_dim();
    const std::size_t B = 4;

    std::mt19937_64 rng(52);
    const PatchMask mask = sample_mask(cfg, rng);  // one fixed mask: memorizable
    std::vector<float> batch(B * cfg.total_patches() * pd, 0.f);
    std::vector<float> target(B * P * pd, 0.f);
    for (std::size_t b = 0; b < B; ++b) {
        const auto frames = frames_skipping_placement(wcfg, b);
        auto ctx = patchify(frames[0], cfg.patch_size);
        auto tgt = patchify(frames[1], cfg.patch_size);
        float* sample = batch.data() + b * cfg.total_patches() * pd;
        std::copy(ctx.begin(), ctx.end(), sample);
        for (std::size_t v : mask.visible)
            std::copy(tgt.begin() + v * pd, tgt.begin() + (v + 1) * pd, sample + P * pd + v * pd);
        std::copy(tgt.begin(), tgt.end(), target.data() + b * P * pd);
    }
    TensorF all({B, std::size_t(cfg.total_patches()), pd}, batch);
    TensorF truth({B, P, pd}, target);

    OptimConfig ocfg;
    ocfg.base_lr = 0.064;  // effective 1e-3 at batch 4
    ocfg.batch_size = 4;
    ocfg.weight_decay = 0.0;
    ocfg.warmup_steps = 25;
    ocfg.total_steps = 2000;
    AdamW opt(params, ocfg);

    double loss_val = 1.0;
    for (int step = 0; step < 2000 && loss_val >= 1e-3; ++step) {
        auto loss = masked_patch_mse(st.forward(all, mask), truth, mask.masked);
        loss_val = loss.item();
        backward(loss);
        REQUIRE(opt.step());
    }
    CHECK(loss_val < 1e-3);
}

TEST_CASE("train smoke: one step runs end-to-end and writes a checkpoint") {
    PredictorConfig cfg = tiny_cfg();
    const WorldConfig wcfg = tiny_world(3);
    TrainConfig tcfg;
    tcfg.steps = 1;
    tcfg.batch_size = 2;
    tcfg.eval_every = 1;
    tcfg.holdout_episodes = 2;
    const std::string dir = "test_train_smoke";
    const TrainResult res = train_predictor(cfg, wcfg, tcfg, dir, "cafe01");
    CHECK_FALSE(res.aborted_nonfinite);
    CHECK(res.completed_steps == 1);
    CHECK(std::filesystem::exists(dir + "/checkpoint/manifest.json"));
    CHECK(std::filesystem::exists(dir + "/checkpoint/weights.bin"));
    CHECK(std::filesystem::exists(dir + "/loss.csv"));
    REQUIRE(!res.curve.empty());
    CHECK(res.curve.back().baseline_loss > 0.0);

    // checkpoint loads back into an identical state
    const PredictorState loaded = PredictorState::load(dir + "/checkpoint", cfg);
    const auto a = res.state.named_tensors();
    const auto b = loaded.named_tensors();
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].first == b[i].first);
        CHECK(std::equal(a[i].second.data().begin(), a[i].second.data().end(),
                         b[i].second.data().begin()));
    }

    // config mismatch is rejected
    PredictorConfig other = cfg;
    other.encoder_dim = 48;
    other.encoder_heads = 2;
    other.decoder_dim = 24;
    other.decoder_heads = 2;
    CHECK_THROWS(PredictorState::load(dir + "/checkpoint", other));
    std::filesystem::remove_all(dir);
}

TEST_CASE("identical seeds give byte-identical checkpoints") {
    PredictorConfig cfg = tiny_cfg();
    const WorldConfig wcfg = tiny_world(5);
    TrainConfig tcfg;
    tcfg.steps = 30;
    tcfg.batch_size = 2;
    tcfg.eval_every = 30;
    tcfg.holdout_episodes = 2;
    tcfg.seed = 17;

    const TrainResult r1 = train_predictor(cfg, wcfg, tcfg, "test_det_a", "h");
    const TrainResult r2 = train_predictor(cfg, wcfg, tcfg, "test_det_b", "h");

    auto read_bytes = [](const std::string& p) {
        std::ifstream is(p, std::ios::binary);
        return std::vector<char>((std::istreambuf_iterator<char>(is)),
                                 std::istreambuf_iterator<char>());
    };
    const auto a = read_bytes("test_det_a/checkpoint/weights.bin");
    const auto b = read_bytes("test_det_b/checkpoint/weights.bin");
    REQUIRE(!a.empty());
    CHECK(a == b);
    std::filesystem::remove_all("test_det_a");
    std::filesystem::remove_all("test_det_b");
}
