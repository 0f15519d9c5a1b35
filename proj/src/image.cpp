#include "cwm/image.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace cwm {

namespace {

std::uint8_t to_byte(float v) {
    const float c = std::min(1.0f, std::max(0.0f, v));
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

void write_le_float(std::ofstream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    const unsigned char b[4] = {static_cast<unsigned char>(bits & 0xff),
                                static_cast<unsigned char>((bits >> 8) & 0xff),
                                static_cast<unsigned char>((bits >> 16) & 0xff),
                                static_cast<unsigned char>((bits >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

float read_le_float(const unsigned char* b) {
    const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) |
                               (static_cast<std::uint32_t>(b[1]) << 8) |
                               (static_cast<std::uint32_t>(b[2]) << 16) |
                               (static_cast<std::uint32_t>(b[3]) << 24);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace

void write_ppm(const std::string& path, const Frame& frame) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cwm: cannot write " + path);
    os << "P6\n" << frame.w << " " << frame.h << "\n255\n";
    std::vector<std::uint8_t> bytes(frame.rgb.size());
    for (std::size_t i = 0; i < frame.rgb.size(); ++i) bytes[i] = to_byte(frame.rgb[i]);
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
}

Frame read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cwm: cannot read " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    is >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255 || w <= 0 || h <= 0)
        throw std::runtime_error("cwm: unsupported PPM header in " + path);
    is.get();  // single whitespace after header
    Frame f(h, w);
    std::vector<std::uint8_t> bytes(std::size_t(h) * w * 3);
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!is) throw std::runtime_error("cwm: truncated PPM " + path);
    for (std::size_t i = 0; i < bytes.size(); ++i) f.rgb[i] = bytes[i] / 255.0f;
    return f;
}

void write_pgm(const std::string& path, const Mask& mask) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cwm: cannot write " + path);
    os << "P5\n" << mask.w << " " << mask.h << "\n255\n";
    std::vector<std::uint8_t> bytes(mask.on.size());
    for (std::size_t i = 0; i < mask.on.size(); ++i) bytes[i] = mask.on[i] ? 255 : 0;
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
}

void write_flow_bin(const std::string& path, const std::vector<FlowField>& fields) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cwm: cannot write " + path);
    const float nan = std::numeric_limits<float>::quiet_NaN();
    for (const auto& f : fields)
        for (int r = 0; r < f.h; ++r)
            for (int c = 0; c < f.w; ++c) {
                const std::size_t i = f.idx(r, c);
                if (f.defined[i]) {
                    write_le_float(os, f.dr[i]);
                    write_le_float(os, f.dc[i]);
                } else {
                    write_le_float(os, nan);
                    write_le_float(os, nan);
                }
            }
}

std::vector<FlowField> read_flow_bin(const std::string& path, int h, int w) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cwm: cannot read " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                     std::istreambuf_iterator<char>());
    const std::size_t per_field = std::size_t(h) * w * 2 * 4;
    if (per_field == 0 || bytes.size() % per_field != 0)
        throw std::runtime_error("cwm: flow.bin size does not match " + std::to_string(h) + "x" +
                                 std::to_string(w));
    std::vector<FlowField> out;
    for (std::size_t off = 0; off < bytes.size(); off += per_field) {
        FlowField f(h, w);
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) {
                const std::size_t p = off + (std::size_t(r) * w + c) * 8;
                const float dr = read_le_float(bytes.data() + p);
                const float dc = read_le_float(bytes.data() + p + 4);
                if (std::isnan(dr) || std::isnan(dc)) f.set_undefined(r, c);
                else f.set(r, c, dr, dc);
            }
        out.push_back(std::move(f));
    }
    return out;
}

Frame flow_to_color(const FlowField& flow) {
    float max_mag = 1e-6f;
    for (int r = 0; r < flow.h; ++r)
        for (int c = 0; c < flow.w; ++c)
            if (flow.defined[flow.idx(r, c)]) max_mag = std::max(max_mag, flow.magnitude(r, c));

    Frame img(flow.h, flow.w, 0.f);
    for (int r = 0; r < flow.h; ++r)
        for (int c = 0; c < flow.w; ++c) {
            const std::size_t i = flow.idx(r, c);
            if (!flow.defined[i]) continue;  // undefined stays black
            const float mag = flow.magnitude(r, c) / max_mag;
            const float ang = std::atan2(flow.dr[i], flow.dc[i]);  // (-pi, pi]
            // HSV with hue from angle, saturation from magnitude, value 1
            float hd = (ang / (2.f * float(M_PI)) + 0.5f) * 6.f;
            if (hd >= 6.f) hd -= 6.f;
            const int sector = static_cast<int>(hd);
            const float frac = hd - sector;
            const float p = 1.f - mag;
            const float q = 1.f - mag * frac;
            const float t = 1.f - mag * (1.f - frac);
            float rr, gg, bb;
            switch (sector) {
                case 0: rr = 1; gg = t; bb = p; break;
                case 1: rr = q; gg = 1; bb = p; break;
                case 2: rr = p; gg = 1; bb = t; break;
                case 3: rr = p; gg = q; bb = 1; break;
                case 4: rr = t; gg = p; bb = 1; break;
                default: rr = 1; gg = p; bb = q; break;
            }
            img.at(r, c, 0) = rr;
            img.at(r, c, 1) = gg;
            img.at(r, c, 2) = bb;
        }
    return img;
}

Frame upscale_nearest(const Frame& f, int factor) {
    if (factor <= 0) throw std::invalid_argument("cwm: upscale factor must be positive");
    if (factor == 1) return f;
    Frame out(f.h * factor, f.w * factor);
    for (int r = 0; r < out.h; ++r)
        for (int c = 0; c < out.w; ++c)
            for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = f.at(r / factor, c / factor, ch);
    return out;
}

}  // namespace cwm
