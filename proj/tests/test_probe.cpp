#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cwm/probe.hpp"
#include "cwm/rng.hpp"
#include "mock_models.hpp"

#include <cmath>
#include <random>

using namespace cwm;

// ---------------------------------------------------------------------------
// pool_by_segment
// ---------------------------------------------------------------------------

TEST_CASE("pool_by_segment: single cell, constant map, direct formula") {
    const int grid = 2, dim = 1;
    // features [[1,3],[5,7]] on a 2x2 grid (one value per cell)
    std::vector<float> F = {1, 3, 5, 7};

    Mask single(16, 16);  // cell (0,1): pixels rows 0-7, cols 8-15
    for (int r = 0; r < 8; ++r)
        for (int c = 8; c < 16; ++c) single.set(r, c, 1);
    auto pooled = pool_by_segment(F, grid, dim, {single});
    CHECK(pooled.vectors[0][0] == doctest::Approx(3.0));
    CHECK(pooled.presence[0] == 1.f);

    // diagonal mask {(0,0),(1,1)} -> (1+7)/2 = 4
    Mask diag(16, 16);
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) diag.set(r, c, 1);
    for (int r = 8; r < 16; ++r)
        for (int c = 8; c < 16; ++c) diag.set(r, c, 1);
    pooled = pool_by_segment(F, grid, dim, {diag});
    CHECK(pooled.vectors[0][0] == doctest::Approx(4.0));

    // constant feature map returns the constant for any non-empty mask
    std::vector<float> constant = {2.5, 2.5, 2.5, 2.5};
    pooled = pool_by_segment(constant, grid, dim, {diag, single});
    CHECK(pooled.vectors[0][0] == doctest::Approx(2.5));
    CHECK(pooled.vectors[1][0] == doctest::Approx(2.5));

    // empty mask: zero vector, presence 0
    Mask empty(16, 16);
    pooled = pool_by_segment(F, grid, dim, {empty});
    CHECK(pooled.vectors[0][0] == 0.f);
    CHECK(pooled.presence[0] == 0.f);
}

TEST_CASE("pool_by_segment is invariant to pixel enumeration order (mask content only)") {
    const int grid = 4, dim = 3;
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> dist(-1.f, 1.f);
    std::vector<float> F(grid * grid * dim);
    for (auto& v : F) v = dist(rng);

    Mask m(32, 32);
    for (int r = 4; r < 20; ++r)
        for (int c = 8; c < 24; ++c) m.set(r, c, 1);
    const auto a = pool_by_segment(F, grid, dim, {m});
    // identical mask built in a different order
    Mask m2(32, 32);
    for (int c = 23; c >= 8; --c)
        for (int r = 19; r >= 4; --r) m2.set(r, c, 1);
    const auto b = pool_by_segment(F, grid, dim, {m2});
    CHECK(a.vectors[0] == b.vectors[0]);
}

// ---------------------------------------------------------------------------
// train_probe
// ---------------------------------------------------------------------------

namespace {

void make_blobs(int n, int d, double sep, std::uint64_t seed,
                std::vector<std::vector<float>>& X, std::vector<int>& y) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (int i = 0; i < n; ++i) {
        const int label = i % 2;
        std::vector<float> x(d);
        for (int j = 0; j < d; ++j)
            x[j] = float(noise(rng) + (j < 2 ? (label ? sep : -sep) : 0.0));
        X.push_back(std::move(x));
        y.push_back(label);
    }
}

}  // namespace

TEST_CASE("train_probe: linearly separable data reaches 100% train accuracy") {
    std::vector<std::vector<float>> X;
    std::vector<int> y;
    make_blobs(60, 5, 4.0, 11, X, y);
    const ProbeModel m = train_probe(X, y, {1e-3, 1e-2, 1e-1, 1.0, 10.0});
    CHECK(evaluate_accuracy(m, X, y) == doctest::Approx(1.0));
    CHECK(m.cv_accuracy > 0.9);
}

TEST_CASE("train_probe: shuffled labels give chance-level CV accuracy") {
    std::vector<std::vector<float>> X;
    std::vector<int> y;
    make_blobs(200, 6, 3.0, 12, X, y);
    // destroy the signal
    std::mt19937_64 rng(13);
    std::shuffle(y.begin(), y.end(), rng);
    // keep 50/50 balance after the shuffle (parity labels stay balanced)
    const ProbeModel m = train_probe(X, y, {1e-1, 1.0});
    CHECK(std::abs(m.cv_accuracy - 0.5) < 0.07);

    // held-out accuracy on fresh shuffled data is also chance-like
    std::vector<std::vector<float>> X2;
    std::vector<int> y2;
    make_blobs(200, 6, 3.0, 14, X2, y2);
    std::shuffle(y2.begin(), y2.end(), rng);
    CHECK(std::abs(evaluate_accuracy(m, X2, y2) - 0.5) < 0.1);
}

TEST_CASE("train_probe: deterministic under identical inputs") {
    std::vector<std::vector<float>> X;
    std::vector<int> y;
    make_blobs(40, 4, 1.0, 15, X, y);
    const ProbeModel a = train_probe(X, y, {1e-2, 1e-1});
    const ProbeModel b = train_probe(X, y, {1e-2, 1e-1});
    CHECK(a.w == b.w);
    CHECK(a.b == b.b);
    CHECK(a.l2 == b.l2);
}

TEST_CASE("train_probe input validation") {
    std::vector<std::vector<float>> X = {{1.f}, {2.f}};
    CHECK_THROWS_AS(train_probe(X, {1, 1}, {0.1}), std::invalid_argument);  // single class
    CHECK_THROWS_AS(train_probe(X, {0, 1}, {}), std::invalid_argument);     // empty grid
    CHECK_THROWS_AS(train_probe({}, {}, {0.1}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

TEST_CASE("metrics: perfect predictions") {
    FlowField f(4, 4);
    f.set(1, 1, 2.f, -1.f);
    CHECK(*epe(f, f) == doctest::Approx(0.0));

    Mask m(4, 4);
    m.set(0, 0, 1);
    CHECK(iou(m, m) == doctest::Approx(1.0));
}

TEST_CASE("metrics: zero-flow prediction vs constant (0,4) ground truth has epe 4") {
    FlowField pred(8, 8);  // zeros, all defined
    FlowField gt(8, 8);
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) gt.set(r, c, 0.f, 4.f);
    CHECK(*epe(pred, gt) == doctest::Approx(4.0));
}

TEST_CASE("metrics: epe skips pixels undefined in either field; empty overlap reported") {
    FlowField pred(2, 2);
    FlowField gt(2, 2);
    gt.set(0, 0, 3.f, 4.f);  // error 5 at the one shared defined pixel
    pred.set_undefined(0, 1);
    gt.set_undefined(1, 0);
    gt.set_undefined(1, 1);
    CHECK(*epe(pred, gt) == doctest::Approx(5.0));

    FlowField all_undef(2, 2);
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) all_undef.set_undefined(r, c);
    CHECK_FALSE(epe(pred, all_undef).has_value());
}

TEST_CASE("metrics: disjoint masks have IoU 0; partial overlap counts") {
    Mask a(4, 4), b(4, 4);
    a.set(0, 0, 1);
    b.set(3, 3, 1);
    CHECK(iou(a, b) == doctest::Approx(0.0));
    b.set(0, 0, 1);
    CHECK(iou(a, b) == doctest::Approx(0.5));
    CHECK(iou(Mask(4, 4), Mask(4, 4)) == doctest::Approx(1.0));
}

// ---------------------------------------------------------------------------
// extract_features on a tiny real predictor
// ---------------------------------------------------------------------------

namespace {

PredictorConfig feat_cfg() {
    PredictorConfig cfg;
    cfg.image_size = 32;
    cfg.patch_size = 8;
    cfg.encoder_dim = 48;
    cfg.encoder_depth = 2;
    cfg.encoder_heads = 2;
    cfg.decoder_dim = 24;
    cfg.decoder_heads = 2;
    cfg.decoder_depth = 1;
    cfg.mask_ratio = 0.875f;
    return cfg;
}

WorldConfig feat_world() {
    WorldConfig w;
    w.canvas = 32;
    w.max_sprites = 2;
    w.min_size = 6;
    w.max_size = 10;
    w.max_speed = 3;
    w.frames = 8;
    w.seed = 21;
    return w;
}

Episode gen_ok(const WorldConfig& w, std::uint64_t index) {
    for (;; ++index) {
        try {
            return generate_episode(w, index);
        } catch (const PlacementError&) {
        }
    }
}

}  // namespace

TEST_CASE("extract_features: dimensions, monotone growth, determinism") {
    const PredictorConfig pcfg = feat_cfg();
    const PredictorState state = PredictorState::init(pcfg, 31);
    const PredictorModel model(state);
    const WorldConfig w = feat_world();
    const Episode ep = gen_ok(w, 0);

    ProbeFeatureConfig fc;
    fc.keypoints_per_pair = 2;
    fc.max_segments = 2;
    fc.movability_samples = 2;
    fc.seed = 5;

    const FeatureBundle bundle = extract_features(state, model, ep, fc);
    const int D = pcfg.encoder_dim;
    CHECK(bundle.base.size() == std::size_t(4) * D);  // compact: 4 frames x D
    CHECK(bundle.keypoints.size() == std::size_t(3) * 2 * (D + 1));
    CHECK(bundle.flow.size() == std::size_t(3) * 2 * 8 * 8 * 2);
    CHECK(bundle.segments.size() == std::size_t(2) * (D + 1));

    // flags strictly grow the concatenated dimension
    const auto d0 = bundle.concat({false, false, false}).size();
    const auto d1 = bundle.concat({true, false, false}).size();
    const auto d2 = bundle.concat({true, true, false}).size();
    const auto d3 = bundle.concat({true, true, true}).size();
    CHECK(d0 < d1);
    CHECK(d1 < d2);
    CHECK(d2 < d3);

    const FeatureBundle again = extract_features(state, model, ep, fc);
    CHECK(again.base == bundle.base);
    CHECK(again.keypoints == bundle.keypoints);
    CHECK(again.flow == bundle.flow);
    CHECK(again.segments == bundle.segments);

    // full grids when compact is off
    ProbeFeatureConfig full = fc;
    full.compact = false;
    const FeatureBundle big = extract_features(state, model, ep, full);
    CHECK(big.base.size() == std::size_t(4) * pcfg.patches_per_frame() * D);

    // too few observed frames is rejected
    WorldConfig short_w = w;
    short_w.observed = 2;
    const Episode short_ep = gen_ok(short_w, 0);
    CHECK_THROWS_AS(extract_features(state, model, short_ep, fc), std::invalid_argument);
}

TEST_CASE("run_probe_task: end-to-end on a tiny world, threaded equals serial") {
    const PredictorConfig pcfg = feat_cfg();
    const PredictorState state = PredictorState::init(pcfg, 41);

    ProbeRunConfig cfg;
    cfg.world = feat_world();
    cfg.n_train = 12;
    cfg.n_test = 8;
    cfg.l2_grid = {1e-1, 1.0};
    cfg.features.keypoints_per_pair = 1;
    cfg.features.max_segments = 1;
    cfg.features.movability_samples = 2;
    cfg.features.seed = 7;
    cfg.ablate_structures = true;
    cfg.threads = 1;

    const ProbeTaskResult serial = run_probe_task(state, ContactTask::OCD, cfg);
    REQUIRE(serial.rows.size() == 4);
    CHECK(serial.rows[0].name == "feat");
    CHECK(serial.rows[3].name == "feat+keypt+flow+seg");
    for (const auto& row : serial.rows) {
        CHECK(row.test_predictions.size() == 8);
        CHECK(row.test_accuracy >= 0.0);
        CHECK(row.test_accuracy <= 1.0);
    }

    cfg.threads = 2;
    const ProbeTaskResult threaded = run_probe_task(state, ContactTask::OCD, cfg);
    REQUIRE(threaded.rows.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(threaded.rows[i].test_accuracy == serial.rows[i].test_accuracy);
        CHECK(threaded.rows[i].test_predictions == serial.rows[i].test_predictions);
        CHECK(threaded.rows[i].chosen_l2 == serial.rows[i].chosen_l2);
    }
}
