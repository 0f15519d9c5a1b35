#pragma once

// key=value configuration with [sections], flag overrides, canonicalization,
// and a stable 64-bit digest that artifacts embed so runs are self-describing.

#include "cwm/predictor.hpp"
#include "cwm/probe.hpp"
#include "cwm/spriteworld.hpp"

#include <map>
#include <string>

namespace cwm {

class RunConfig {
public:
    RunConfig() = default;

    static RunConfig load_file(const std::string& path);
    static RunConfig parse_text(const std::string& text);

    bool has(const std::string& key) const;  // keys are "section.key"
    std::string get(const std::string& key, const std::string& def) const;
    double get_num(const std::string& key, double def) const;
    long get_int(const std::string& key, long def) const;
    bool get_bool(const std::string& key, bool def) const;
    void set(const std::string& key, const std::string& value);
    void set_num(const std::string& key, double value);
    void set_int(const std::string& key, long value);

    // sorted "section.key=value" lines
    std::string canonical() const;
    // FNV-1a 64-bit hex digest of the canonical form
    std::string hash() const;
    void write(const std::string& path) const;

    PredictorConfig predictor() const;
    WorldConfig world() const;
    TrainConfig train() const;
    ProbeRunConfig probe() const;
    SegmentParams segment_params() const;

    // [query] section knobs
    int flow_upscale() const { return int(get_int("query.flow_upscale", 4)); }
    int segment_upscale() const { return int(get_int("query.segment_upscale", 2)); }

private:
    std::map<std::string, std::string> kv_;
};

}  // namespace cwm
