#pragma once

// Held-out evaluations of a trained predictor on the sprite world: masked
// reconstruction vs the copy baseline, counterfactual motion control, dense
// cosine flow vs ground truth, and segment quality vs ground-truth masks.
// Episode indices live far above the training range so nothing is reused.

#include "cwm/predictor.hpp"
#include "cwm/probe.hpp"
#include "cwm/spriteworld.hpp"
#include "cwm/structures.hpp"

#include <cstdint>

namespace cwm {

inline constexpr std::uint64_t kHoldoutBase = 1ULL << 41;

struct ReconEvalResult {
    double model_mse = 0.0;
    double baseline_mse = 0.0;  // copy-first-frame on the same masked patches
    int episodes = 0;
};

ReconEvalResult eval_masked_reconstruction(const PredictorState& state, const WorldConfig& world,
                                           int n_episodes, std::uint64_t seed);

struct ControlEvalResult {
    int cases = 0;
    int passed = 0;       // mean |flow| inside the sprite >= 2x outside
    double frac = 0.0;
    double mean_ratio = 0.0;
};

ControlEvalResult eval_counterfactual_control(const PredictorState& state,
                                              const WorldConfig& world, int n_cases,
                                              std::uint64_t seed, int threads = 1);

struct FlowEvalResult {
    double mean_epe = 0.0;   // over moving, GT-defined pixels
    std::size_t pixels = 0;
    int episodes = 0;
};

// Dense cosine flow on transition 0->1 of held-out episodes, evaluated at
// `upscale` times the native resolution (position tables interpolated).
FlowEvalResult eval_flow_epe(const PredictorState& state, const WorldConfig& world,
                             int n_episodes, int upscale, std::uint64_t seed, int threads = 1);

struct SegmentEvalResult {
    double mean_iou = 0.0;
    int queries = 0;
    std::size_t invariant_checks = 0;
    std::size_t invariant_ok = 0;    // motion in previous segment, stops outside
};

SegmentEvalResult eval_segment_iou(const PredictorState& state, const WorldConfig& world,
                                   int n_queries, int upscale, std::uint64_t seed,
                                   int threads = 1, const SegmentParams& params = {});

}  // namespace cwm
