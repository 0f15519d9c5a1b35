#include "cwm/spriteworld.hpp"

#include "cwm/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

namespace cwm {

namespace {

constexpr std::array<float, 3> kRed{0.85f, 0.10f, 0.10f};
constexpr std::array<float, 3> kYellow{0.92f, 0.86f, 0.10f};
constexpr std::array<std::array<float, 3>, 5> kDistractorPalette{{
    {0.15f, 0.25f, 0.85f},
    {0.10f, 0.70f, 0.25f},
    {0.60f, 0.20f, 0.80f},
    {0.10f, 0.70f, 0.80f},
    {0.45f, 0.50f, 0.55f},
}};

struct DiscGeom {
    double cr, cc, radius;
};

DiscGeom disc_geom(const SpriteState& s) {
    return {s.row + (s.size - 1) / 2.0, s.col + (s.size - 1) / 2.0, s.size / 2.0};
}

bool disc_contains(const SpriteState& s, int r, int c) {
    const auto g = disc_geom(s);
    const double dr = r - g.cr, dc = c - g.cc;
    return dr * dr + dc * dc <= g.radius * g.radius;
}

bool sprite_contains(const SpriteState& s, int r, int c) {
    if (r < s.row || r >= s.row + s.size || c < s.col || c >= s.col + s.size) return false;
    return s.shape == SpriteShape::Rectangle || disc_contains(s, r, c);
}

// Bilinearly interpolated value-noise grid over [0,1]^2.
struct NoiseGrid {
    int n = 0;
    std::vector<float> values;  // n*n

    float sample(float u, float v) const {
        const float x = u * (n - 1), y = v * (n - 1);
        const int x0 = std::min(n - 2, std::max(0, static_cast<int>(x)));
        const int y0 = std::min(n - 2, std::max(0, static_cast<int>(y)));
        const float fx = x - x0, fy = y - y0;
        const float a = values[std::size_t(y0) * n + x0];
        const float b = values[std::size_t(y0) * n + x0 + 1];
        const float c = values[std::size_t(y0 + 1) * n + x0];
        const float d = values[std::size_t(y0 + 1) * n + x0 + 1];
        return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy;
    }
};

NoiseGrid make_noise_grid(int n, float lo, float hi, std::mt19937_64& rng) {
    NoiseGrid g;
    g.n = n;
    g.values.resize(std::size_t(n) * n);
    std::uniform_real_distribution<float> dist(lo, hi);
    for (auto& v : g.values) v = dist(rng);
    return g;
}

int reflect_axis(int pos, int lim, int& vel) {
    // Elastic wall bounce on [0, lim], exact in integers.
    while (pos < 0 || pos > lim) {
        if (pos < 0) {
            pos = -pos;
            vel = -vel;
        } else {
            pos = 2 * lim - pos;
            vel = -vel;
        }
    }
    return pos;
}

void advance(std::vector<SpriteState>& sprites, int canvas) {
    for (auto& st : sprites) {
        const int lim = canvas - st.size;
        st.row = reflect_axis(st.row + st.vr, lim, st.vr);
        st.col = reflect_axis(st.col + st.vc, lim, st.vc);
    }
}

struct WorldSample {
    NoiseGrid bg;      // noise background (5x5 grid)
    float solid = 0.f; // solid background level when noise is off
    std::vector<SpriteState> sprites;
    std::vector<NoiseGrid> textures;  // per-sprite luminance modulation
};

// All randomness of an episode happens here, in a fixed order, so that the
// label-only path and the full render path see identical worlds.
WorldSample sample_world(const WorldConfig& cfg, std::uint64_t index) {
    std::mt19937_64 rng = make_rng(cfg.seed, index);
    auto pick = [&rng](int lo, int hi) {
        return std::uniform_int_distribution<int>(lo, hi)(rng);
    };

    WorldSample ws;
    if (cfg.noise_background) {
        ws.bg = make_noise_grid(5, 0.25f, 0.75f, rng);
    } else {
        std::uniform_real_distribution<float> dist(0.3f, 0.7f);
        ws.solid = dist(rng);
    }

    const int n_sprites = pick(cfg.min_sprites, cfg.max_sprites);
    for (int s = 0; s < n_sprites; ++s) {
        SpriteState st;
        st.shape = pick(0, 1) == 0 ? SpriteShape::Rectangle : SpriteShape::Disc;
        st.size = pick(cfg.min_size, cfg.max_size);
        if (s == 0) st.color = kRed;
        else if (s == 1) st.color = kYellow;
        else st.color = kDistractorPalette[pick(0, int(kDistractorPalette.size()) - 1)];

        for (int attempt = 0;; ++attempt) {
            if (attempt >= 100) throw PlacementError("cwm: no admissible velocity");
            st.vr = pick(-cfg.max_speed, cfg.max_speed);
            st.vc = pick(-cfg.max_speed, cfg.max_speed);
            if (std::max(std::abs(st.vr), std::abs(st.vc)) < cfg.min_speed) continue;
            if (cfg.max_flow_norm > 0.f &&
                std::hypot(float(st.vr), float(st.vc)) > cfg.max_flow_norm)
                continue;
            break;
        }

        bool placed = false;
        for (int attempt = 0; attempt < 100; ++attempt) {
            st.row = pick(0, cfg.canvas - st.size);
            st.col = pick(0, cfg.canvas - st.size);
            bool clash = false;
            for (const auto& other : ws.sprites) clash = clash || sprites_overlap(st, other);
            if (!clash) {
                placed = true;
                break;
            }
        }
        if (!placed)
            throw PlacementError("cwm: sprite placement failed after 100 attempts (episode " +
                                 std::to_string(index) + ")");
        ws.sprites.push_back(st);
        ws.textures.push_back(make_noise_grid(3, -1.f, 1.f, rng));
    }
    return ws;
}

int first_contact_of(const WorldConfig& cfg, std::vector<SpriteState> sprites) {
    if (sprites.size() < 2) return -1;
    for (int t = 0; t < cfg.frames; ++t) {
        if (sprites_overlap(sprites[0], sprites[1])) return t;
        advance(sprites, cfg.canvas);
    }
    return -1;
}

// Painter order: distractors first, then yellow, then red, so the query pair
// is never hidden by scenery.
std::vector<int> paint_order(std::size_t n_sprites) {
    std::vector<int> order;
    for (int s = int(n_sprites) - 1; s >= 2; --s) order.push_back(s);
    if (n_sprites > 1) order.push_back(1);
    if (n_sprites > 0) order.push_back(0);
    return order;
}

std::vector<int> surface_map(const std::vector<SpriteState>& sprites, int canvas) {
    std::vector<int> surf(std::size_t(canvas) * canvas, -1);
    for (int s : paint_order(sprites.size())) {
        const SpriteState& st = sprites[s];
        for (int r = std::max(0, st.row); r < std::min(canvas, st.row + st.size); ++r)
            for (int c = std::max(0, st.col); c < std::min(canvas, st.col + st.size); ++c)
                if (sprite_contains(st, r, c)) surf[std::size_t(r) * canvas + c] = s;
    }
    return surf;
}

Frame render_background(const WorldConfig& cfg, const WorldSample& ws) {
    Frame background(cfg.canvas, cfg.canvas);
    if (cfg.noise_background) {
        for (int r = 0; r < cfg.canvas; ++r)
            for (int c = 0; c < cfg.canvas; ++c) {
                const float v =
                    ws.bg.sample(float(c) / (cfg.canvas - 1), float(r) / (cfg.canvas - 1));
                background.at(r, c, 0) = v;
                background.at(r, c, 1) = v;
                background.at(r, c, 2) = v;
            }
    } else {
        for (auto& x : background.rgb) x = ws.solid;
    }
    return background;
}

Frame render_sprites(const WorldConfig& cfg, const WorldSample& ws,
                     const std::vector<SpriteState>& sprites, const Frame& background) {
    Frame frame = background;
    const auto surf = surface_map(sprites, cfg.canvas);
    for (int s : paint_order(sprites.size())) {
        const SpriteState& st = sprites[s];
        for (int r = std::max(0, st.row); r < std::min(cfg.canvas, st.row + st.size); ++r)
            for (int c = std::max(0, st.col); c < std::min(cfg.canvas, st.col + st.size); ++c) {
                if (surf[std::size_t(r) * cfg.canvas + c] != s) continue;
                const float u = st.size > 1 ? float(c - st.col) / (st.size - 1) : 0.f;
                const float v = st.size > 1 ? float(r - st.row) / (st.size - 1) : 0.f;
                const float mod = cfg.texture_amp * ws.textures[s].sample(u, v);
                for (int ch = 0; ch < 3; ++ch)
                    frame.at(r, c, ch) = std::clamp(st.color[ch] + mod, 0.f, 1.f);
            }
    }
    return frame;
}

}  // namespace

bool sprites_overlap(const SpriteState& a, const SpriteState& b) {
    auto rects_overlap = [](const SpriteState& p, const SpriteState& q) {
        return p.row < q.row + q.size && q.row < p.row + p.size && p.col < q.col + q.size &&
               q.col < p.col + p.size;
    };
    if (a.shape == SpriteShape::Rectangle && b.shape == SpriteShape::Rectangle)
        return rects_overlap(a, b);
    if (a.shape == SpriteShape::Disc && b.shape == SpriteShape::Disc) {
        const auto ga = disc_geom(a), gb = disc_geom(b);
        const double dr = ga.cr - gb.cr, dc = ga.cc - gb.cc;
        const double rr = ga.radius + gb.radius;
        return dr * dr + dc * dc < rr * rr;
    }
    const SpriteState& rect = a.shape == SpriteShape::Rectangle ? a : b;
    const SpriteState& disc = a.shape == SpriteShape::Rectangle ? b : a;
    const auto g = disc_geom(disc);
    const double pr = std::clamp(g.cr, double(rect.row), double(rect.row + rect.size - 1));
    const double pc = std::clamp(g.cc, double(rect.col), double(rect.col + rect.size - 1));
    const double dr = g.cr - pr, dc = g.cc - pc;
    return dr * dr + dc * dc < g.radius * g.radius;
}

std::vector<Mask> rasterize_masks(const std::vector<SpriteState>& sprites, int canvas) {
    const auto surf = surface_map(sprites, canvas);
    std::vector<Mask> masks;
    for (std::size_t s = 0; s < sprites.size(); ++s) {
        Mask m(canvas, canvas);
        for (int r = 0; r < canvas; ++r)
            for (int c = 0; c < canvas; ++c)
                if (surf[std::size_t(r) * canvas + c] == int(s)) m.set(r, c, 1);
        masks.push_back(std::move(m));
    }
    return masks;
}

Episode generate_episode(const WorldConfig& cfg, std::uint64_t index) {
    WorldSample ws = sample_world(cfg, index);

    Episode ep;
    ep.index = index;
    ep.canvas = cfg.canvas;
    ep.observed = cfg.observed;

    const Frame background = render_background(cfg, ws);

    std::vector<SpriteState> sprites = ws.sprites;
    std::vector<std::vector<int>> surface;
    for (int t = 0; t < cfg.frames; ++t) {
        ep.states.push_back(sprites);
        ep.frames.push_back(render_sprites(cfg, ws, sprites, background));
        ep.gt_masks.push_back(rasterize_masks(sprites, cfg.canvas));
        surface.push_back(surface_map(sprites, cfg.canvas));

        if (ep.first_contact < 0 && sprites.size() >= 2 &&
            sprites_overlap(sprites[0], sprites[1]))
            ep.first_contact = t;

        if (t + 1 < cfg.frames) advance(sprites, cfg.canvas);
    }

    // Ground-truth flow for each transition, indexed by the *second* frame:
    // flow[q] is the displacement that carried the surface visible at q from
    // frame t to frame t+1; pixels whose content was not visible at t
    // (disocclusion) are undefined.
    for (int t = 0; t + 1 < cfg.frames; ++t) {
        FlowField flow(cfg.canvas, cfg.canvas);
        const auto& s0 = ep.states[t];
        const auto& s1 = ep.states[t + 1];
        for (int r = 0; r < cfg.canvas; ++r)
            for (int c = 0; c < cfg.canvas; ++c) {
                const int sid = surface[t + 1][std::size_t(r) * cfg.canvas + c];
                if (sid < 0) {
                    if (surface[t][std::size_t(r) * cfg.canvas + c] < 0) flow.set(r, c, 0.f, 0.f);
                    else flow.set_undefined(r, c);
                    continue;
                }
                const int dr = s1[sid].row - s0[sid].row;
                const int dc = s1[sid].col - s0[sid].col;
                const int sr = r - dr, sc = c - dc;
                if (sr < 0 || sr >= cfg.canvas || sc < 0 || sc >= cfg.canvas ||
                    surface[t][std::size_t(sr) * cfg.canvas + sc] != sid)
                    flow.set_undefined(r, c);
                else
                    flow.set(r, c, float(dr), float(dc));
            }
        ep.gt_flow.push_back(std::move(flow));
    }

    ep.contact_ocd = ep.first_contact >= 0 && ep.first_contact < cfg.observed;
    ep.contact_ocp = ep.first_contact >= cfg.observed;
    return ep;
}

std::vector<Frame> render_episode_frames(const WorldConfig& cfg, std::uint64_t index) {
    WorldSample ws = sample_world(cfg, index);
    const Frame background = render_background(cfg, ws);
    std::vector<Frame> frames;
    std::vector<SpriteState> sprites = ws.sprites;
    for (int t = 0; t < cfg.frames; ++t) {
        frames.push_back(render_sprites(cfg, ws, sprites, background));
        if (t + 1 < cfg.frames) advance(sprites, cfg.canvas);
    }
    return frames;
}

std::optional<int> episode_label(const WorldConfig& cfg, std::uint64_t index, ContactTask task) {
    WorldSample ws;
    try {
        ws = sample_world(cfg, index);
    } catch (const PlacementError&) {
        return std::nullopt;
    }
    const int fc = first_contact_of(cfg, ws.sprites);
    const bool ocd = fc >= 0 && fc < cfg.observed;
    const bool ocp = fc >= cfg.observed;
    if (task == ContactTask::OCP && ocd) return std::nullopt;
    return (task == ContactTask::OCD ? ocd : ocp) ? 1 : 0;
}

Split make_balanced_split(const WorldConfig& cfg, int n_train, int n_test, ContactTask task) {
    if (n_train < 2 || n_test < 2)
        throw std::invalid_argument("cwm: split sizes must be at least 2");
    if (n_train % 2 || n_test % 2)
        throw std::invalid_argument("cwm: split sizes must be even for a 50/50 balance");

    Split split;
    int train_pos = 0, train_neg = 0, test_pos = 0, test_neg = 0;
    const int want_train = n_train / 2, want_test = n_test / 2;
    const std::uint64_t budget = 200ULL * std::uint64_t(n_train + n_test) + 1000;

    for (std::uint64_t index = 0; index < budget; ++index) {
        if (train_pos == want_train && train_neg == want_train && test_pos == want_test &&
            test_neg == want_test)
            break;
        const auto label = episode_label(cfg, index, task);
        if (!label) continue;
        if (*label == 1) {
            if (train_pos < want_train) {
                split.train.push_back(index);
                split.train_labels.push_back(1);
                ++train_pos;
            } else if (test_pos < want_test) {
                split.test.push_back(index);
                split.test_labels.push_back(1);
                ++test_pos;
            }
        } else {
            if (train_neg < want_train) {
                split.train.push_back(index);
                split.train_labels.push_back(0);
                ++train_neg;
            } else if (test_neg < want_test) {
                split.test.push_back(index);
                split.test_labels.push_back(0);
                ++test_neg;
            }
        }
    }
    if (train_pos != want_train || train_neg != want_train || test_pos != want_test ||
        test_neg != want_test)
        throw std::runtime_error(
            "cwm: balanced split unreachable within budget (train " + std::to_string(train_pos) +
            "+/" + std::to_string(train_neg) + "-, test " + std::to_string(test_pos) + "+/" +
            std::to_string(test_neg) + "-)");
    return split;
}

void write_episode(const std::string& dir, const Episode& ep) {
    std::filesystem::create_directories(dir);
    char name[32];
    for (std::size_t t = 0; t < ep.frames.size(); ++t) {
        std::snprintf(name, sizeof(name), "frame_%03zu.ppm", t);
        write_ppm((std::filesystem::path(dir) / name).string(), ep.frames[t]);
    }
    write_flow_bin((std::filesystem::path(dir) / "flow.bin").string(), ep.gt_flow);

    nlohmann::json j;
    j["episode_index"] = ep.index;
    j["canvas"] = ep.canvas;
    j["frames"] = ep.frames.size();
    j["observed"] = ep.observed;
    j["labels"] = {{"ocd", ep.contact_ocd}, {"ocp", ep.contact_ocp},
                   {"first_contact", ep.first_contact}};
    nlohmann::json states = nlohmann::json::array();
    for (const auto& frame_states : ep.states) {
        nlohmann::json fs = nlohmann::json::array();
        for (const auto& s : frame_states)
            fs.push_back({{"shape", s.shape == SpriteShape::Rectangle ? "rect" : "disc"},
                          {"size", s.size},
                          {"row", s.row},
                          {"col", s.col},
                          {"vr", s.vr},
                          {"vc", s.vc},
                          {"color", s.color}});
        states.push_back(fs);
    }
    j["sprites"] = states;
    std::ofstream os(std::filesystem::path(dir) / "episode.json");
    if (!os) throw std::runtime_error("cwm: cannot write " + dir + "/episode.json");
    os << j.dump(2) << "\n";
}

Episode read_episode(const std::string& dir) {
    std::ifstream is(std::filesystem::path(dir) / "episode.json");
    if (!is) throw std::runtime_error("cwm: missing " + dir + "/episode.json");
    nlohmann::json j = nlohmann::json::parse(is);

    Episode ep;
    ep.index = j.at("episode_index");
    ep.canvas = j.at("canvas");
    ep.observed = j.at("observed");
    const std::size_t n_frames = j.at("frames");
    ep.first_contact = j.at("labels").at("first_contact");
    ep.contact_ocd = j.at("labels").at("ocd");
    ep.contact_ocp = j.at("labels").at("ocp");

    char name[32];
    for (std::size_t t = 0; t < n_frames; ++t) {
        std::snprintf(name, sizeof(name), "frame_%03zu.ppm", t);
        ep.frames.push_back(read_ppm((std::filesystem::path(dir) / name).string()));
    }
    ep.gt_flow =
        read_flow_bin((std::filesystem::path(dir) / "flow.bin").string(), ep.canvas, ep.canvas);

    for (const auto& fs : j.at("sprites")) {
        std::vector<SpriteState> states;
        for (const auto& s : fs) {
            SpriteState st;
            st.shape = s.at("shape") == "rect" ? SpriteShape::Rectangle : SpriteShape::Disc;
            st.size = s.at("size");
            st.row = s.at("row");
            st.col = s.at("col");
            st.vr = s.at("vr");
            st.vc = s.at("vc");
            auto col = s.at("color");
            st.color = {col[0], col[1], col[2]};
            states.push_back(st);
        }
        ep.states.push_back(std::move(states));
    }
    for (const auto& states : ep.states) ep.gt_masks.push_back(rasterize_masks(states, ep.canvas));
    return ep;
}

}  // namespace cwm
