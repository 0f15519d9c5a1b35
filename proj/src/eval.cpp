#include "cwm/eval.hpp"

#include "cwm/rng.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <thread>

namespace cwm {

namespace {

Episode holdout_episode(const WorldConfig& world, std::uint64_t base, std::uint64_t k) {
    for (std::uint64_t idx = base + k * 1000;; ++idx) {
        try {
            return generate_episode(world, idx);
        } catch (const PlacementError&) {
        }
    }
}

void parallel_for(int n, int threads, const std::function<void(int)>& body) {
    if (threads <= 1) {
        for (int i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<int> next{0};
    auto worker = [&]() {
        for (;;) {
            const int i = next.fetch_add(1);
            if (i >= n) break;
            body(i);
        }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
}

// interior = mask pixel whose 8 neighbors are all inside the mask
std::vector<std::pair<int, int>> interior_pixels(const Mask& m) {
    std::vector<std::pair<int, int>> out;
    for (int r = 1; r + 1 < m.h; ++r)
        for (int c = 1; c + 1 < m.w; ++c) {
            bool ok = true;
            for (int dr = -1; dr <= 1 && ok; ++dr)
                for (int dc = -1; dc <= 1 && ok; ++dc) ok = m.get(r + dr, c + dc) != 0;
            if (ok) out.emplace_back(r, c);
        }
    return out;
}

}  // namespace

ReconEvalResult eval_masked_reconstruction(const PredictorState& state, const WorldConfig& world,
                                           int n_episodes, std::uint64_t seed) {
    const PredictorState frozen = state.inference_clone();
    const PredictorConfig& cfg = frozen.cfg;
    const std::size_t P = cfg.patches_per_frame(), pd = cfg.patch_dim();
    const int n_ctx = cfg.n_context_frames;

    ReconEvalResult res;
    double model_acc = 0.0, base_acc = 0.0;
    for (int k = 0; k < n_episodes; ++k) {
        const Episode ep = holdout_episode(world, kHoldoutBase, std::uint64_t(k));
        std::mt19937_64 rng = make_rng(mix64(seed, 0xE0A1), std::uint64_t(k));
        const int t0 = std::uniform_int_distribution<int>(0, world.frames - n_ctx - 1)(rng);
        const PatchMask mask = sample_mask(cfg, rng);

        std::vector<float> buf(std::size_t(cfg.total_patches()) * pd, 0.f);
        for (int f = 0; f < n_ctx; ++f) {
            const auto patches = patchify(ep.frames[t0 + f], cfg.patch_size);
            std::copy(patches.begin(), patches.end(), buf.begin() + std::size_t(f) * P * pd);
        }
        const auto tgt = patchify(ep.frames[t0 + n_ctx], cfg.patch_size);
        const std::size_t base = std::size_t(n_ctx) * P * pd;
        for (std::size_t v : mask.visible)
            std::copy(tgt.begin() + v * pd, tgt.begin() + (v + 1) * pd, buf.begin() + base + v * pd);

        TensorF all({1, std::size_t(cfg.total_patches()), pd}, std::move(buf));
        const TensorF pred = frozen.forward(all, mask);
        TensorF truth({1, P, pd}, tgt);
        model_acc += masked_patch_mse(pred, truth, mask.masked).item();

        const auto last = patchify(ep.frames[t0 + n_ctx - 1], cfg.patch_size);
        double acc = 0.0;
        for (std::size_t m : mask.masked)
            for (std::size_t i = 0; i < pd; ++i) {
                const double d = double(last[m * pd + i]) - double(tgt[m * pd + i]);
                acc += d * d;
            }
        base_acc += acc / double(mask.masked.size() * pd);
    }
    res.model_mse = model_acc / n_episodes;
    res.baseline_mse = base_acc / n_episodes;
    res.episodes = n_episodes;
    return res;
}

ControlEvalResult eval_counterfactual_control(const PredictorState& state,
                                              const WorldConfig& world, int n_cases,
                                              std::uint64_t seed, int threads) {
    const PredictorModel model(state);
    const int ps = state.cfg.patch_size;
    const int g = state.cfg.grid();

    std::vector<int> passed(n_cases, 0);
    std::vector<double> ratios(n_cases, 0.0);
    parallel_for(n_cases, threads, [&](int k) {
        const Episode ep = holdout_episode(world, kHoldoutBase + (1ULL << 30), std::uint64_t(k));
        std::mt19937_64 rng = make_rng(mix64(seed, 0xC0DE), std::uint64_t(k));

        // pick a sprite and one of its fully-covered patches
        const auto& masks = ep.gt_masks[0];
        std::vector<std::pair<int, std::size_t>> patch_pool;  // (sprite, patch)
        for (std::size_t s = 0; s < masks.size(); ++s)
            for (int pr = 0; pr < g; ++pr)
                for (int pc = 0; pc < g; ++pc) {
                    int on = 0;
                    for (int i = 0; i < ps; ++i)
                        for (int j = 0; j < ps; ++j)
                            on += masks[s].get(pr * ps + i, pc * ps + j) ? 1 : 0;
                    if (on == ps * ps) patch_pool.emplace_back(int(s), std::size_t(pr) * g + pc);
                }
        if (patch_pool.empty()) {
            // degenerate scene; count as failure rather than skipping silently
            passed[k] = 0;
            return;
        }
        const auto [sprite, patch] =
            patch_pool[std::uniform_int_distribution<std::size_t>(0, patch_pool.size() - 1)(rng)];

        const auto mag = mean_motion_magnitude(model, ep.frames[0], {patch}, {},
                                               0.2 * state.cfg.image_size, 1,
                                               mix64(seed, 0xAC7 + k));
        double in_acc = 0.0, out_acc = 0.0;
        std::size_t in_n = 0, out_n = 0;
        const Mask& gt = ep.gt_masks[0][sprite];
        for (int pr = 0; pr < g; ++pr)
            for (int pc = 0; pc < g; ++pc)
                for (int i = 0; i < ps; ++i)
                    for (int j = 0; j < ps; ++j) {
                        const double v = mag[std::size_t(pr) * g + pc];
                        if (gt.get(pr * ps + i, pc * ps + j)) {
                            in_acc += v;
                            ++in_n;
                        } else {
                            out_acc += v;
                            ++out_n;
                        }
                    }
        const double mean_in = in_n ? in_acc / in_n : 0.0;
        const double mean_out = out_n ? out_acc / out_n : 0.0;
        ratios[k] = mean_out > 0 ? mean_in / mean_out : (mean_in > 0 ? 1e9 : 0.0);
        passed[k] = mean_in >= 2.0 * mean_out && mean_in > 0 ? 1 : 0;
    });

    ControlEvalResult res;
    res.cases = n_cases;
    for (int k = 0; k < n_cases; ++k) {
        res.passed += passed[k];
        res.mean_ratio += std::min(ratios[k], 100.0);
    }
    res.frac = double(res.passed) / double(n_cases);
    res.mean_ratio /= double(n_cases);
    return res;
}

FlowEvalResult eval_flow_epe(const PredictorState& state, const WorldConfig& world,
                             int n_episodes, int upscale, std::uint64_t seed, int threads) {
    const PredictorState scaled = state.resized(state.cfg.image_size * upscale);
    const PredictorModel model(scaled);

    std::vector<double> err_sum(n_episodes, 0.0);
    std::vector<std::size_t> err_n(n_episodes, 0);
    parallel_for(n_episodes, threads, [&](int k) {
        const Episode ep = holdout_episode(world, kHoldoutBase + (2ULL << 30), std::uint64_t(k));
        const Frame x1 = upscale_nearest(ep.frames[0], upscale);
        const Frame x2 = upscale_nearest(ep.frames[1], upscale);
        const FlowField big = flow_field(model, x1, x2, FlowMethod::Cosine);
        const FlowField flow = downscale_flow(big, upscale);

        const FlowField& gt = ep.gt_flow[0];
        for (int r = 0; r < gt.h; ++r)
            for (int c = 0; c < gt.w; ++c) {
                const std::size_t i = gt.idx(r, c);
                if (!gt.defined[i] || !flow.defined[i]) continue;
                if (gt.dr[i] == 0.f && gt.dc[i] == 0.f) continue;  // moving pixels only
                err_sum[k] += std::hypot(double(flow.dr[i]) - gt.dr[i],
                                         double(flow.dc[i]) - gt.dc[i]);
                ++err_n[k];
            }
    });
    (void)seed;

    FlowEvalResult res;
    res.episodes = n_episodes;
    double total = 0.0;
    for (int k = 0; k < n_episodes; ++k) {
        total += err_sum[k];
        res.pixels += err_n[k];
    }
    res.mean_epe = res.pixels ? total / double(res.pixels) : 0.0;
    return res;
}

SegmentEvalResult eval_segment_iou(const PredictorState& state, const WorldConfig& world,
                                   int n_queries, int upscale, std::uint64_t seed, int threads,
                                   const SegmentParams& params) {
    const PredictorState scaled = state.resized(state.cfg.image_size * upscale);
    const PredictorModel model(scaled);

    std::vector<double> ious(n_queries, 0.0);
    std::vector<std::size_t> inv_checks(n_queries, 0), inv_ok(n_queries, 0);
    parallel_for(n_queries, threads, [&](int k) {
        // fresh episode per query; query a random sprite's interior pixel
        const Episode ep = holdout_episode(world, kHoldoutBase + (3ULL << 30), std::uint64_t(k));
        std::mt19937_64 rng = make_rng(mix64(seed, 0x5E61), std::uint64_t(k));

        const auto& masks = ep.gt_masks[0];
        std::vector<std::pair<int, std::pair<int, int>>> candidates;
        for (std::size_t s = 0; s < masks.size(); ++s) {
            const auto interior = interior_pixels(masks[s]);
            if (!interior.empty()) {
                const auto px =
                    interior[std::uniform_int_distribution<std::size_t>(0, interior.size() - 1)(rng)];
                candidates.emplace_back(int(s), px);
            }
        }
        if (candidates.empty()) return;  // iou 0 recorded
        const auto [sprite, px] =
            candidates[std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng)];

        const Frame big = upscale_nearest(ep.frames[0], upscale);
        const SegmentResult seg = extract_segment(model, big, px.first * upscale,
                                                  px.second * upscale, mix64(seed, 0xE9 + k),
                                                  params);

        // downscale the (patch-aligned) mask to native pixels
        Mask mask(ep.canvas, ep.canvas);
        for (int r = 0; r < ep.canvas; ++r)
            for (int c = 0; c < ep.canvas; ++c)
                mask.set(r, c, seg.mask.get(r * upscale, c * upscale));
        ious[k] = iou(mask, ep.gt_masks[0][sprite]);

        // constructive invariants per iteration
        for (std::size_t t = 1; t < seg.motion_sets.size(); ++t) {
            const auto& mag = seg.magnitude_maps[t - 1];
            for (std::size_t m : seg.motion_sets[t]) {
                ++inv_checks[k];
                inv_ok[k] += mag[m] > params.threshold ? 1 : 0;
            }
            for (std::size_t s : seg.stop_sets[t]) {
                ++inv_checks[k];
                inv_ok[k] += mag[s] <= params.threshold ? 1 : 0;
            }
        }
    });

    SegmentEvalResult res;
    res.queries = n_queries;
    for (int k = 0; k < n_queries; ++k) {
        res.mean_iou += ious[k];
        res.invariant_checks += inv_checks[k];
        res.invariant_ok += inv_ok[k];
    }
    res.mean_iou /= double(n_queries);
    return res;
}

}  // namespace cwm
