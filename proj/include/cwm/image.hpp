#pragma once

// Small RGB frame / flow-field / mask value types shared by the world
// generator, the predictor, and the structure queries.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace cwm {

struct Frame {
    int h = 0, w = 0;
    std::vector<float> rgb;  // h*w*3 row-major, values in [0,1]

    Frame() = default;
    Frame(int h_, int w_, float fill = 0.f) : h(h_), w(w_), rgb(std::size_t(h_) * w_ * 3, fill) {}

    float& at(int r, int c, int ch) { return rgb[(std::size_t(r) * w + c) * 3 + ch]; }
    float at(int r, int c, int ch) const { return rgb[(std::size_t(r) * w + c) * 3 + ch]; }

    bool same_size(const Frame& o) const { return h == o.h && w == o.w; }
};

struct FlowField {
    int h = 0, w = 0;
    std::vector<float> dr, dc;         // displacement in pixels (rows, cols)
    std::vector<std::uint8_t> defined;

    FlowField() = default;
    FlowField(int h_, int w_)
        : h(h_), w(w_), dr(std::size_t(h_) * w_, 0.f), dc(std::size_t(h_) * w_, 0.f),
          defined(std::size_t(h_) * w_, 1) {}

    std::size_t idx(int r, int c) const { return std::size_t(r) * w + c; }
    void set(int r, int c, float drow, float dcol) {
        dr[idx(r, c)] = drow;
        dc[idx(r, c)] = dcol;
        defined[idx(r, c)] = 1;
    }
    void set_undefined(int r, int c) {
        dr[idx(r, c)] = 0.f;
        dc[idx(r, c)] = 0.f;
        defined[idx(r, c)] = 0;
    }
    float magnitude(int r, int c) const {
        return std::hypot(dr[idx(r, c)], dc[idx(r, c)]);
    }
};

struct Mask {
    int h = 0, w = 0;
    std::vector<std::uint8_t> on;

    Mask() = default;
    Mask(int h_, int w_) : h(h_), w(w_), on(std::size_t(h_) * w_, 0) {}

    std::uint8_t get(int r, int c) const { return on[std::size_t(r) * w + c]; }
    void set(int r, int c, std::uint8_t v) { on[std::size_t(r) * w + c] = v; }
    std::size_t count() const {
        std::size_t n = 0;
        for (auto v : on) n += v ? 1 : 0;
        return n;
    }
};

// --- PPM / PGM (binary, maxval 255) ---
void write_ppm(const std::string& path, const Frame& frame);
Frame read_ppm(const std::string& path);
void write_pgm(const std::string& path, const Mask& mask);

// --- flow.bin: little-endian float32 pairs (drow, dcol), NaN = undefined ---
// Multiple transitions are concatenated in time order.
void write_flow_bin(const std::string& path, const std::vector<FlowField>& fields);
std::vector<FlowField> read_flow_bin(const std::string& path, int h, int w);

// Color-wheel visualization. Undefined pixels render black.
Frame flow_to_color(const FlowField& flow);

// Nearest-neighbor resampling (used for running queries above native size).
Frame upscale_nearest(const Frame& f, int factor);

}  // namespace cwm
