#pragma once

// Masked frame-pair predictor: ViT encoder over visible patches (context
// frames fully visible, target frame sparsely visible), shallow decoder over
// encoder outputs + mask tokens, pixel reconstruction head. Temporal patch
// depth is one frame; sine-cosine positional embeddings are added to both
// encoder and decoder inputs.

#include "cwm/checkpoint.hpp"
#include "cwm/image.hpp"
#include "cwm/spriteworld.hpp"
#include "cwm/tensor.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace cwm {

struct PredictorConfig {
    int image_size = 64;
    int patch_size = 8;
    int n_context_frames = 1;
    int encoder_dim = 192;
    int encoder_depth = 6;
    int encoder_heads = 4;
    int decoder_dim = 96;
    int decoder_depth = 2;
    int decoder_heads = 4;
    int mlp_ratio = 4;
    float mask_ratio = 0.90f;

    int grid() const { return image_size / patch_size; }
    int patches_per_frame() const { return grid() * grid(); }
    int n_frames() const { return n_context_frames + 1; }
    int total_patches() const { return n_frames() * patches_per_frame(); }
    int patch_dim() const { return patch_size * patch_size * 3; }

    // round-half-to-even of patches*(1-mask_ratio), clamped to [1, patches-1]
    int visible_target_count() const;

    void validate() const;
};

struct PatchMask {
    int patches_per_frame = 0;
    int n_context = 0;
    std::vector<std::size_t> visible;  // target-frame patch indices, sorted
    std::vector<std::size_t> masked;   // complement, sorted
};

PatchMask sample_mask(const PredictorConfig& cfg, std::mt19937_64& rng);
PatchMask mask_from_visible(const PredictorConfig& cfg, std::vector<std::size_t> visible);

// Row-major patch decomposition: patch (r,c) -> flat index r*(W/ps)+c; pixel
// (i,j,ch) of a patch at offset (i*ps+j)*3+ch. Exact roundtrip.
std::vector<float> patchify(const Frame& frame, int patch_size);
Frame unpatchify(const std::vector<float>& patches, int image_size, int patch_size);

struct PredictorState {
    PredictorConfig cfg;

    TensorF patch_embed_w, patch_embed_b;
    struct Block {
        TensorF ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
        TensorF ln2_g, ln2_b, mlp1_w, mlp1_b, mlp2_w, mlp2_b;
    };
    std::vector<Block> enc_blocks;
    TensorF enc_norm_g, enc_norm_b;
    TensorF enc2dec_w, enc2dec_b;
    TensorF mask_token;  // zero-initialized
    std::vector<Block> dec_blocks;
    TensorF dec_norm_g, dec_norm_b;
    TensorF head_w, head_b;  // zero-initialized head
    TensorF pos_enc, pos_dec;  // fixed sine-cosine tables, not trained

    static PredictorState init(const PredictorConfig& cfg, std::uint64_t seed);

    std::vector<TensorF> parameters() const;
    std::vector<std::pair<std::string, TensorF>> named_tensors() const;

    void save(const std::string& dir, const std::string& config_hash) const;
    static PredictorState load(const std::string& dir, const PredictorConfig& cfg);

    // Detached copy for query workloads (no graph recording).
    PredictorState inference_clone() const;

    // Bilinear (aligned-corners) interpolation of the positional grids per
    // frame slot; the returned state runs at the new resolution.
    PredictorState resized(int new_image_size) const;

    // all_patches: (B, total_patches, patch_dim), context frames first. Output
    // is (B, patches_per_frame, patch_dim): the decoder's reconstruction of
    // every target patch (visible positions included, kept for diagnostics).
    TensorF forward(const TensorF& all_patches, const PatchMask& mask,
                    const std::vector<std::size_t>* visible_order_override = nullptr) const;

    // Single-sample convenience: full predicted target frame.
    Frame predict_frame(const std::vector<Frame>& context, const Frame& target_visible_source,
                        const PatchMask& mask) const;

    // Composite frame: ground-truth content at visible positions, predictions
    // elsewhere. This is what query modules consume.
    Frame predict_composite(const std::vector<Frame>& context,
                            const Frame& target_visible_source, const PatchMask& mask) const;

    // Final-encoder-layer embeddings (after the encoder norm) of one fully
    // visible frame placed in context slot 0. layer = -1 selects the last
    // layer; 0..depth-1 select intermediate block outputs (no final norm).
    std::vector<float> embed_frame(const Frame& frame, int layer = -1) const;

    // Final-encoder-layer embeddings of the target-frame tokens when the
    // encoder sees (context..., target) fully visible; the target tokens
    // attend to the context, so these features carry local motion.
    std::vector<float> embed_pair(const std::vector<Frame>& context, const Frame& target) const;
};

// Mean squared pixel error over masked target patches only.
TensorF masked_patch_mse(const TensorF& pred, const TensorF& target,
                         const std::vector<std::size_t>& masked);

struct TrainConfig {
    long steps = 5000;
    int batch_size = 8;
    double base_lr = 2.4e-2;  // effective lr = base_lr * batch_size / 256
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double warmup_frac = 40.0 / 3200.0;  // warmup epochs / total epochs
    long eval_every = 250;
    int holdout_episodes = 8;
    std::uint64_t seed = 0;
};

struct LossRow {
    long step = 0;
    double loss = 0.0;
    double holdout_loss = 0.0;
    double baseline_loss = 0.0;  // copy-first-frame baseline on the same masks
};

struct TrainResult {
    PredictorState state;
    std::vector<LossRow> curve;
    bool aborted_nonfinite = false;
    long completed_steps = 0;
};

// Deterministic under fixed seeds. Writes checkpoint + loss CSV into out_dir
// when it is non-empty (loss.csv, checkpoint/).
TrainResult train_predictor(const PredictorConfig& pcfg, const WorldConfig& wcfg,
                            const TrainConfig& tcfg, const std::string& out_dir = "",
                            const std::string& config_hash = "");

void write_loss_csv(const std::string& path, const std::vector<LossRow>& curve);

}  // namespace cwm
