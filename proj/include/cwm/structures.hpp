#pragma once

// Counterfactual queries against a predictor: keypoints by reconstruction-
// error reduction, optical flow by perturbation tracing and by cosine
// matching of encoder embeddings, Spelke segments by thresholded
// counterfactual flow, movability maps, and multi-object discovery.

#include "cwm/counterfactual.hpp"
#include "cwm/image.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace cwm {

// ---------------------------------------------------------------------------
// Keypoints
// ---------------------------------------------------------------------------

enum class KeypointMode { GreedyArgmax, TopkEval };

struct Keypoint {
    int prow = 0, pcol = 0;  // patch location
    double mse_after = 0.0;  // full-frame MSE once this keypoint joined the action
};

struct KeypointSet {
    std::vector<Keypoint> points;
};

// Iteratively grows an action with patches of x2. GreedyArgmax adds the patch
// under the max-error location; TopkEval evaluates the top-k error candidates
// by re-prediction and keeps the one with minimum resulting MSE (ties: lowest
// row-major index).
KeypointSet extract_keypoints(const CounterfactualModel& model, const Frame& x1, const Frame& x2,
                              int iters, KeypointMode mode = KeypointMode::TopkEval,
                              int top_k = 4);

// ---------------------------------------------------------------------------
// Flow
// ---------------------------------------------------------------------------

struct FlowVector {
    double dr = 0.0, dc = 0.0;
    bool defined = false;
};

struct PerturbFlowParams {
    int iters = 4;        // action samples averaged
    int n_patches = 4;    // patches per action (contents from x2, zero offset)
    double delta = 0.2;   // bump amplitude
    double resp_threshold = 0.05;  // mean-absolute response below this: undefined
};

// Adds a small Gaussian bump at (r,c) of x1, predicts with actions sampled
// from x2, and locates the bump's image in the mean prediction.
FlowVector flow_perturbation(const CounterfactualModel& model, const Frame& x1, const Frame& x2,
                             int r, int c, std::uint64_t seed,
                             const PerturbFlowParams& params = {});

// 3x3 Gaussian bump added to all channels, clipped to [0,1].
Frame perturb_frame(const Frame& x, int r, int c, double delta);

// Finite-difference normalized perturbation response: per-pixel
// |prediction(perturbed) - x2| divided by the peak input perturbation.
// Throws if delta is so small the perturbed frame equals x1.
std::vector<float> perturbation_response(const CounterfactualModel& model, const Frame& x1,
                                         const Frame& x2, int r, int c, double delta);

// Cosine-similarity flow at patch resolution, indexed by the target (e2)
// grid: flow = target location - argmax-similarity source location, in
// pixels. Ties break toward the smallest displacement, then row-major order.
// Zero-norm embeddings are undefined.
FlowField flow_cosine(const std::vector<float>& e1, const std::vector<float>& e2, int grid,
                      int dim, int patch_size);

enum class FlowMethod { Perturbation, Cosine };

// Dense pixel flow for a frame pair. Cosine: one embedding per frame, patch
// flow upsampled nearest-neighbor (indexed by x2 positions, matching the
// world's ground-truth convention). Perturbation: one query per patch center,
// nearest-neighbor fill (indexed by x1 positions).
FlowField flow_field(const CounterfactualModel& model, const Frame& x1, const Frame& x2,
                     FlowMethod method, std::uint64_t seed = 0,
                     const PerturbFlowParams& params = {});

// Source-indexed cosine flow of x into y: for each patch of x, the
// displacement to its best match in y. Used by the segment queries, where the
// mask must label the object at its original location. With `mutual` set,
// matches that fail forward-backward consistency are undefined; this is how
// patches occluded by the counterfactual motion drop out instead of matching
// arbitrary content. `centered` subtracts each embedding's mean before the
// similarity so the floor acts on correlation rather than raw cosine (raw
// cosine saturates near 1 for non-centered embeddings).
FlowField flow_source_cosine(const CounterfactualModel& model, const Frame& x, const Frame& y,
                             bool mutual = false, double min_similarity = -2.0,
                             bool centered = false);

// Average displacement magnitude per patch over `actions` counterfactuals
// that move `motion` rigidly by a random offset within `radius` px while
// holding `stops` fixed. Shared by segments, affinities, and movability.
std::vector<double> mean_motion_magnitude(const CounterfactualModel& model, const Frame& x,
                                          const std::vector<std::size_t>& motion,
                                          const std::vector<std::size_t>& stops, double radius,
                                          int actions, std::uint64_t seed,
                                          double min_similarity = 0.5);

// ---------------------------------------------------------------------------
// Segments
// ---------------------------------------------------------------------------

struct SegmentParams {
    int iterations = 3;
    int actions_per_iter = 4;
    double radius_frac = 0.2;       // offset radius = radius_frac * image_size
    double threshold = 0.5;         // pixels of mean flow magnitude
    double min_similarity = 0.5;    // centered-cosine floor for a valid match
};

struct SegmentResult {
    Mask mask;                 // pixel mask (patch-aligned)
    int query_r = 0, query_c = 0;
    bool query_inside = false;
    bool empty_flag = false;   // nothing moved in iteration 1
    std::vector<std::vector<double>> magnitude_maps;     // per-iteration, patch-grid
    std::vector<std::vector<std::size_t>> motion_sets;   // per-iteration inputs
    std::vector<std::vector<std::size_t>> stop_sets;
};

SegmentResult extract_segment(const CounterfactualModel& model, const Frame& x, int r, int c,
                              std::uint64_t seed, const SegmentParams& params = {});

// Mean flow magnitude at pixel j = (jr,jc) under single-patch counterfactual
// motion at i = (ir,ic); equals the iteration-1 magnitude map of
// extract_segment at the same seed.
double spelke_affinity(const CounterfactualModel& model, const Frame& x, int ir, int ic, int jr,
                       int jc, std::uint64_t seed, const SegmentParams& params = {});

// ---------------------------------------------------------------------------
// Movability and discovery
// ---------------------------------------------------------------------------

struct MovabilityResult {
    SpatialDistribution dist;     // over patch locations
    std::vector<double> raw;      // unnormalized mean magnitudes
    bool all_zero_fallback = false;  // distribution fell back to uniform
};

MovabilityResult movability_map(const CounterfactualModel& model, const Frame& x, int m_samples,
                                std::uint64_t seed, double radius_frac = 0.2);

struct DiscoverParams {
    int max_objects = 3;
    int movability_samples = 16;
    double stop_mass_frac = 0.10;  // stop when remaining mass is below this
    SegmentParams segment;
};

std::vector<SegmentResult> discover_objects(const CounterfactualModel& model, const Frame& x,
                                            std::uint64_t seed, const DiscoverParams& params = {});

// Downsample a flow field computed at an upscaled resolution back to native
// pixels (displacements divide by the factor).
FlowField downscale_flow(const FlowField& flow, int factor);

}  // namespace cwm
