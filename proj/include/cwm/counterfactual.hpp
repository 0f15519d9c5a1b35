#pragma once

// Actions and counterfactual prediction. An action is a sparse target frame
// built by copying patches of a base image to (possibly offset) locations.
// Offsets are drawn continuously, rounded to whole pixels, rasterized into
// the sparse frame, and re-patchified on the grid, so the predictor interface
// stays purely patch-based.

#include "cwm/image.hpp"
#include "cwm/predictor.hpp"

#include <json.hpp>

#include <cstdint>
#include <random>
#include <vector>

namespace cwm {

struct PasteOp {
    int src_prow = 0, src_pcol = 0;  // source patch, grid units
    int dst_y = 0, dst_x = 0;        // pixel origin of the pasted content
};

struct ActionEntry {
    int prow = 0, pcol = 0;          // grid cell (target patch location)
    std::vector<float> content;      // patch_size*patch_size*3 values
};

class Action {
public:
    Action() = default;
    Action(int image_size, int patch_size);

    int image_size() const { return image_size_; }
    int patch_size() const { return patch_size_; }
    bool empty() const { return ops_.empty(); }

    // Copies the base image's patch (src_prow, src_pcol) so that its top-left
    // lands on pixel (dst_y, dst_x); the location is clipped so the patch
    // stays fully inside the canvas. Later pastes overwrite earlier ones.
    void paste(const Frame& base, int src_prow, int src_pcol, int dst_y, int dst_x);

    // Zero-offset copy: holds the patch fixed in place (stop-motion).
    void paste_stop(const Frame& base, int prow, int pcol);

    const std::vector<PasteOp>& ops() const { return ops_; }

    // Derived views
    const Frame& sparse_frame() const { return raster_; }
    std::vector<std::size_t> visible_patches() const;  // sorted flat grid indices
    std::vector<ActionEntry> entries() const;

    nlohmann::json to_json(const std::string& base_ref) const;
    static Action from_json(const nlohmann::json& j, const Frame& base, int patch_size);

private:
    int image_size_ = 0, patch_size_ = 0;
    Frame raster_;
    Mask painted_;
    std::vector<PasteOp> ops_;
};

// Nonnegative weights over patch-grid locations, normalized to sum 1.
struct SpatialDistribution {
    int rows = 0, cols = 0;
    std::vector<double> w;

    static SpatialDistribution uniform(int rows, int cols);
    static SpatialDistribution from_weights(int rows, int cols, std::vector<double> weights);
    static SpatialDistribution one_hot(int rows, int cols, int r, int c);

    std::size_t support() const;
    // inverse-CDF draw; deterministic given the rng state
    std::pair<int, int> sample(std::mt19937_64& rng) const;
};

// The sampling operator: one shared offset per call, n distinct sources drawn
// from p without replacement, contents copied from x.
Action sample_action(const Frame& x, const SpatialDistribution& p, int n, double radius,
                     int patch_size, std::mt19937_64& rng);

// Single stop-motion entry at a patch location (source == target).
Action stop_motion_action(const Frame& x, int prow, int pcol, int patch_size);

// Interface between a trained predictor and the structure queries; mocks in
// tests implement the same surface.
class CounterfactualModel {
public:
    virtual ~CounterfactualModel() = default;
    virtual int image_size() const = 0;
    virtual int patch_size() const = 0;
    int grid() const { return image_size() / patch_size(); }

    // Composite next frame: action content at action locations, predictions
    // everywhere else. An empty action yields the unconditioned completion.
    virtual Frame predict(const Frame& context, const Action& action) const = 0;

    // Patch embeddings of a fully visible frame: grid*grid rows, embed_dim
    // columns, row-major over the patch grid.
    virtual std::vector<float> embed(const Frame& frame) const = 0;
    virtual int embed_dim() const = 0;
};

class PredictorModel final : public CounterfactualModel {
public:
    explicit PredictorModel(PredictorState state, int flow_layer = -1);

    int image_size() const override { return state_.cfg.image_size; }
    int patch_size() const override { return state_.cfg.patch_size; }
    Frame predict(const Frame& context, const Action& action) const override;
    std::vector<float> embed(const Frame& frame) const override;
    int embed_dim() const override { return state_.cfg.encoder_dim; }

    const PredictorState& state() const { return state_; }

private:
    PredictorState state_;  // detached
    int flow_layer_;
};

}  // namespace cwm
