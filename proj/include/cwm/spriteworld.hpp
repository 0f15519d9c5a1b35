#pragma once

// Deterministic synthetic sprite world: textured rectangles and discs moving
// with constant integer velocities over a static low-frequency noise
// background, elastic wall bounces, exact ground-truth flow, per-sprite
// visibility masks, and contact labels for the two query sprites (red and
// yellow, always sprites 0 and 1).

#include "cwm/image.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cwm {

enum class SpriteShape { Rectangle, Disc };

enum class ContactTask { OCD, OCP };  // detection (observed window) / prediction (future)

struct WorldConfig {
    int canvas = 64;
    int min_sprites = 2;  // query pair is always present
    int max_sprites = 3;
    int min_size = 10;
    int max_size = 16;
    int min_speed = 1;      // per-axis cap on |v|, px/frame; see also max_flow_norm
    int max_speed = 6;
    bool noise_background = true;  // false: solid background
    int frames = 16;
    int observed = 4;  // T_obs
    float texture_amp = 0.08f;
    float max_flow_norm = 0.f;  // when > 0, reject velocities with |v|_2 above this
    std::uint64_t seed = 0;
};

struct SpriteState {
    SpriteShape shape = SpriteShape::Rectangle;
    int size = 0;          // rect side / disc diameter
    int row = 0, col = 0;  // bounding-box top-left
    int vr = 0, vc = 0;
    std::array<float, 3> color{};
};

struct Episode {
    std::uint64_t index = 0;
    int canvas = 0;
    int observed = 0;
    std::vector<Frame> frames;
    std::vector<FlowField> gt_flow;             // [t]: transition t -> t+1, indexed by frame t+1
    std::vector<std::vector<Mask>> gt_masks;    // [t][sprite]: visible pixels after occlusion
    std::vector<std::vector<SpriteState>> states;  // [t][sprite]
    int first_contact = -1;  // first frame where the query pair overlaps, -1 if never
    bool contact_ocd = false;  // contact strictly before `observed`
    bool contact_ocp = false;  // no contact before `observed`, contact afterwards

    int label(ContactTask task) const {
        return (task == ContactTask::OCD ? contact_ocd : contact_ocp) ? 1 : 0;
    }
};

// Thrown when rejection sampling cannot place the sprites; callers skip the
// episode index.
struct PlacementError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Pure function of (config, index); the per-episode seed is mix64(seed, index).
Episode generate_episode(const WorldConfig& cfg, std::uint64_t index);

// Geometric overlap between two sprites (positive-area intersection).
bool sprites_overlap(const SpriteState& a, const SpriteState& b);

// Depth-ordered visibility masks for a sprite configuration.
std::vector<Mask> rasterize_masks(const std::vector<SpriteState>& sprites, int canvas);

// Label of episode `index` for `task` without rendering. nullopt when the
// placement fails or (for OCP) the pair touches inside the observed window.
std::optional<int> episode_label(const WorldConfig& cfg, std::uint64_t index, ContactTask task);

// Frames only (no flow / mask derivation); bit-identical to the frames of
// generate_episode(cfg, index). Training batches use this path.
std::vector<Frame> render_episode_frames(const WorldConfig& cfg, std::uint64_t index);

struct Split {
    std::vector<std::uint64_t> train, test;  // episode indices (disjoint)
    std::vector<int> train_labels, test_labels;
};

// 50/50 positive/negative balance per split via rejection over episode
// indices. For OCP, episodes whose query pair touches inside the observed
// window qualify for neither class and are skipped.
Split make_balanced_split(const WorldConfig& cfg, int n_train, int n_test, ContactTask task);

// Episode directory export/import: frame_%03d.ppm + episode.json + flow.bin.
void write_episode(const std::string& dir, const Episode& ep);
Episode read_episode(const std::string& dir);

}  // namespace cwm
