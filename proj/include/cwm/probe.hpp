#pragma once

// Dynamics-understanding evaluation: frozen-feature extraction with optional
// structure integration, logistic-regression probing with 5-fold CV over the
// regularization grid, and the accuracy / endpoint-error / IoU metrics.

#include "cwm/counterfactual.hpp"
#include "cwm/spriteworld.hpp"
#include "cwm/structures.hpp"

#include <optional>
#include <string>
#include <vector>

namespace cwm {

struct StructureFlags {
    bool keypoints = false;
    bool flow = false;
    bool segments = false;
};

struct ProbeFeatureConfig {
    int observed_frames = 4;
    int keypoints_per_pair = 5;
    KeypointMode keypoint_mode = KeypointMode::GreedyArgmax;  // probe-side default (cheap)
    int keypoint_topk = 4;
    bool compact = true;  // mean-pool patch grids before concatenation
    int max_segments = 3;
    int movability_samples = 8;
    SegmentParams segment;
    std::uint64_t seed = 0;
};

// Components stay separate so ablation rows can concatenate prefixes without
// re-extracting anything. Concatenation order (base | keypoints | flow |
// segments) is fixed; see FeatureBundle::concat.
struct FeatureBundle {
    std::vector<float> base;
    std::vector<float> keypoints;
    std::vector<float> flow;
    std::vector<float> segments;

    std::vector<float> concat(const StructureFlags& flags) const;
};

FeatureBundle extract_features(const PredictorState& state, const PredictorModel& model,
                               const Episode& ep, const ProbeFeatureConfig& cfg);

// Mask-pooled feature vectors: masks are majority-vote downsampled to the
// patch grid; empty masks give a zero vector with presence 0.
struct PooledSegments {
    std::vector<std::vector<float>> vectors;  // one per mask
    std::vector<float> presence;
};
PooledSegments pool_by_segment(const std::vector<float>& grid_features, int grid, int dim,
                               const std::vector<Mask>& masks);

// ---------------------------------------------------------------------------
// Logistic probe
// ---------------------------------------------------------------------------

struct ProbeModel {
    std::vector<double> w;
    double b = 0.0;
    double l2 = 0.0;
    bool converged = true;
    double cv_accuracy = 0.0;
    std::vector<double> feat_mean, feat_std;  // training standardization

    double score(const std::vector<float>& x) const;  // probability of class 1
    int predict(const std::vector<float>& x) const { return score(x) >= 0.5 ? 1 : 0; }
};

// Full-batch gradient descent (heavy-ball momentum) on the numkernel, to
// gradient norm < 1e-6 or 10k steps; regularization strength selected by
// 5-fold cross-validation over l2_grid, then refit on the full split.
ProbeModel train_probe(const std::vector<std::vector<float>>& X, const std::vector<int>& y,
                       const std::vector<double>& l2_grid);

double evaluate_accuracy(const ProbeModel& model, const std::vector<std::vector<float>>& X,
                         const std::vector<int>& y);

// Mean endpoint error over pixels defined in both fields; nullopt when no
// pixel is defined in both.
std::optional<double> epe(const FlowField& pred, const FlowField& gt);

// Intersection over union; two empty masks count as identical (1.0).
double iou(const Mask& a, const Mask& b);

// ---------------------------------------------------------------------------
// End-to-end toy OCP/OCD protocol
// ---------------------------------------------------------------------------

struct ProbeRunConfig {
    WorldConfig world;
    int n_train = 1000;
    int n_test = 1000;
    std::vector<double> l2_grid = {1e-3, 1e-2, 1e-1, 1.0, 10.0};
    ProbeFeatureConfig features;
    bool ablate_structures = false;  // emit the four-row structure ablation
    int threads = 1;
    std::uint64_t seed = 0;
};

struct ProbeRowResult {
    std::string name;  // "feat", "feat+keypt", "feat+keypt+flow", "feat+keypt+flow+seg"
    StructureFlags flags;
    double test_accuracy = 0.0;
    double cv_accuracy = 0.0;
    double chosen_l2 = 0.0;
    bool converged = true;
    std::vector<int> test_predictions;
};

struct ProbeTaskResult {
    ContactTask task;
    Split split;
    std::vector<ProbeRowResult> rows;  // one row, or four when ablating
};

ProbeTaskResult run_probe_task(const PredictorState& state, ContactTask task,
                               const ProbeRunConfig& cfg);

// Runs several tasks over one feature cache: episodes shared between the
// task splits are extracted once.
std::vector<ProbeTaskResult> run_probe_tasks(const PredictorState& state,
                                             const std::vector<ContactTask>& tasks,
                                             const ProbeRunConfig& cfg);

}  // namespace cwm
