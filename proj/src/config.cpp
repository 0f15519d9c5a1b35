#include "cwm/config.hpp"

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cwm {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string num_str(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, end);
}

}  // namespace

RunConfig RunConfig::parse_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto comment = line.find_first_of("#;");
        if (comment != std::string::npos) line = line.substr(0, comment);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw std::invalid_argument("cwm: config line " + std::to_string(lineno) +
                                            ": unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("cwm: config line " + std::to_string(lineno) +
                                        ": expected key=value, got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw std::invalid_argument("cwm: config line " + std::to_string(lineno) +
                                        ": empty key");
        cfg.kv_[section.empty() ? key : section + "." + key] = value;
    }
    return cfg;
}

RunConfig RunConfig::load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("cwm: cannot read config file " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_text(buf.str());
}

bool RunConfig::has(const std::string& key) const { return kv_.count(key) > 0; }

std::string RunConfig::get(const std::string& key, const std::string& def) const {
    const auto it = kv_.find(key);
    return it == kv_.end() ? def : it->second;
}

double RunConfig::get_num(const std::string& key, double def) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    try {
        std::size_t pos = 0;
        const double v = std::stod(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("cwm: config key '" + key + "': '" + it->second +
                                    "' is not a number");
    }
}

long RunConfig::get_int(const std::string& key, long def) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    try {
        std::size_t pos = 0;
        const long v = std::stol(it->second, &pos);
        if (pos == it->second.size()) return v;
    } catch (const std::exception&) {
    }
    const double v = get_num(key, double(def));
    const long r = std::lround(v);
    if (double(r) != v)
        throw std::invalid_argument("cwm: config key '" + key + "' must be an integer");
    return r;
}

bool RunConfig::get_bool(const std::string& key, bool def) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
    if (it->second == "false" || it->second == "0" || it->second == "no") return false;
    throw std::invalid_argument("cwm: config key '" + key + "': '" + it->second +
                                "' is not a boolean");
}

void RunConfig::set(const std::string& key, const std::string& value) { kv_[key] = value; }
void RunConfig::set_num(const std::string& key, double value) { kv_[key] = num_str(value); }
void RunConfig::set_int(const std::string& key, long value) { kv_[key] = std::to_string(value); }

std::string RunConfig::canonical() const {
    std::string out;
    for (const auto& [k, v] : kv_) {  // std::map iterates sorted
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

std::string RunConfig::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : canonical()) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void RunConfig::write(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cwm: cannot write config to " + path);
    std::string last_section;
    for (const auto& [k, v] : kv_) {
        const auto dot = k.rfind('.');
        const std::string section = dot == std::string::npos ? "" : k.substr(0, dot);
        const std::string key = dot == std::string::npos ? k : k.substr(dot + 1);
        if (section != last_section) {
            os << "[" << section << "]\n";
            last_section = section;
        }
        os << key << " = " << v << "\n";
    }
}

PredictorConfig RunConfig::predictor() const {
    PredictorConfig p;
    p.image_size = int(get_int("predictor.image_size", p.image_size));
    p.patch_size = int(get_int("predictor.patch_size", p.patch_size));
    p.n_context_frames = int(get_int("predictor.n_context_frames", p.n_context_frames));
    p.encoder_dim = int(get_int("predictor.encoder_dim", p.encoder_dim));
    p.encoder_depth = int(get_int("predictor.encoder_depth", p.encoder_depth));
    p.encoder_heads = int(get_int("predictor.encoder_heads", p.encoder_heads));
    p.decoder_dim = int(get_int("predictor.decoder_dim", p.decoder_dim));
    p.decoder_depth = int(get_int("predictor.decoder_depth", p.decoder_depth));
    p.decoder_heads = int(get_int("predictor.decoder_heads", p.decoder_heads));
    p.mlp_ratio = int(get_int("predictor.mlp_ratio", p.mlp_ratio));
    p.mask_ratio = float(get_num("predictor.mask_ratio", p.mask_ratio));
    p.validate();
    return p;
}

WorldConfig RunConfig::world() const {
    WorldConfig w;
    w.canvas = int(get_int("world.canvas", w.canvas));
    w.min_sprites = int(get_int("world.min_sprites", w.min_sprites));
    w.max_sprites = int(get_int("world.max_sprites", w.max_sprites));
    w.min_size = int(get_int("world.min_size", w.min_size));
    w.max_size = int(get_int("world.max_size", w.max_size));
    w.min_speed = int(get_int("world.min_speed", w.min_speed));
    w.max_speed = int(get_int("world.max_speed", w.max_speed));
    w.noise_background = get_bool("world.noise_background", w.noise_background);
    w.frames = int(get_int("world.frames", w.frames));
    w.observed = int(get_int("world.observed", w.observed));
    w.texture_amp = float(get_num("world.texture_amp", w.texture_amp));
    w.max_flow_norm = float(get_num("world.max_flow_norm", w.max_flow_norm));
    w.seed = std::uint64_t(get_int("world.seed", long(w.seed)));
    if (w.canvas <= 0 || w.frames < 2 || w.observed < 1 || w.observed > w.frames ||
        w.min_sprites < 1 || w.max_sprites < w.min_sprites || w.min_size < 2 ||
        w.max_size < w.min_size || w.max_size > w.canvas || w.min_speed < 0 ||
        w.max_speed < w.min_speed)
        throw std::invalid_argument("cwm: invalid [world] configuration");
    return w;
}

TrainConfig RunConfig::train() const {
    TrainConfig t;
    t.steps = get_int("train.steps", t.steps);
    t.batch_size = int(get_int("train.batch_size", t.batch_size));
    t.base_lr = get_num("train.base_lr", t.base_lr);
    t.weight_decay = get_num("train.weight_decay", t.weight_decay);
    t.beta1 = get_num("train.beta1", t.beta1);
    t.beta2 = get_num("train.beta2", t.beta2);
    t.warmup_frac = get_num("train.warmup_frac", t.warmup_frac);
    t.eval_every = get_int("train.eval_every", t.eval_every);
    t.holdout_episodes = int(get_int("train.holdout_episodes", t.holdout_episodes));
    t.seed = std::uint64_t(get_int("train.seed", long(t.seed)));
    if (t.steps < 1 || t.batch_size < 1 || t.base_lr <= 0)
        throw std::invalid_argument("cwm: invalid [train] configuration");
    return t;
}

SegmentParams RunConfig::segment_params() const {
    SegmentParams s;
    s.iterations = int(get_int("segment.iterations", s.iterations));
    s.actions_per_iter = int(get_int("segment.actions_per_iter", s.actions_per_iter));
    s.radius_frac = get_num("segment.radius_frac", s.radius_frac);
    s.threshold = get_num("segment.threshold", s.threshold);
    s.min_similarity = get_num("segment.min_similarity", s.min_similarity);
    return s;
}

ProbeRunConfig RunConfig::probe() const {
    ProbeRunConfig p;
    p.world = world();
    p.n_train = int(get_int("probe.n_train", p.n_train));
    p.n_test = int(get_int("probe.n_test", p.n_test));
    p.features.observed_frames = int(get_int("probe.observed_frames", 4));
    p.features.keypoints_per_pair = int(get_int("probe.keypoints_per_pair", 5));
    p.features.keypoint_mode = get("probe.keypoint_mode", "greedy") == "topk"
                                   ? KeypointMode::TopkEval
                                   : KeypointMode::GreedyArgmax;
    p.features.compact = get_bool("probe.compact", true);
    p.features.max_segments = int(get_int("probe.max_segments", 3));
    p.features.movability_samples = int(get_int("probe.movability_samples", 8));
    p.features.segment = segment_params();
    p.features.seed = std::uint64_t(get_int("probe.feature_seed", 0));
    if (has("probe.l2_grid")) {
        p.l2_grid.clear();
        std::istringstream is(get("probe.l2_grid", ""));
        std::string tok;
        while (std::getline(is, tok, ','))
            p.l2_grid.push_back(std::stod(tok));
        if (p.l2_grid.empty())
            throw std::invalid_argument("cwm: probe.l2_grid must list at least one value");
    }
    return p;
}

}  // namespace cwm
