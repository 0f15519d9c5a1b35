#include "cwm/counterfactual.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cwm {

Action::Action(int image_size, int patch_size)
    : image_size_(image_size), patch_size_(patch_size), raster_(image_size, image_size, 0.f),
      painted_(image_size, image_size) {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
        throw std::invalid_argument("cwm: action: image size " + std::to_string(image_size) +
                                    " not divisible by patch size " + std::to_string(patch_size));
}

void Action::paste(const Frame& base, int src_prow, int src_pcol, int dst_y, int dst_x) {
    const int g = image_size_ / patch_size_;
    if (src_prow < 0 || src_prow >= g || src_pcol < 0 || src_pcol >= g)
        throw std::invalid_argument("cwm: action paste: source patch (" +
                                    std::to_string(src_prow) + "," + std::to_string(src_pcol) +
                                    ") out of grid");
    if (base.h != image_size_ || base.w != image_size_)
        throw std::invalid_argument("cwm: action paste: base frame size mismatch");
    // clip so the whole patch stays inside the canvas
    dst_y = std::clamp(dst_y, 0, image_size_ - patch_size_);
    dst_x = std::clamp(dst_x, 0, image_size_ - patch_size_);

    const int sy = src_prow * patch_size_, sx = src_pcol * patch_size_;
    for (int i = 0; i < patch_size_; ++i)
        for (int j = 0; j < patch_size_; ++j) {
            for (int ch = 0; ch < 3; ++ch)
                raster_.at(dst_y + i, dst_x + j, ch) = base.at(sy + i, sx + j, ch);
            painted_.set(dst_y + i, dst_x + j, 1);
        }
    ops_.push_back({src_prow, src_pcol, dst_y, dst_x});
}

void Action::paste_stop(const Frame& base, int prow, int pcol) {
    paste(base, prow, pcol, prow * patch_size_, pcol * patch_size_);
}

std::vector<std::size_t> Action::visible_patches() const {
    const int g = image_size_ / patch_size_;
    std::vector<bool> vis(std::size_t(g) * g, false);
    for (int r = 0; r < image_size_; ++r)
        for (int c = 0; c < image_size_; ++c)
            if (painted_.get(r, c)) vis[std::size_t(r / patch_size_) * g + c / patch_size_] = true;
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < vis.size(); ++i)
        if (vis[i]) out.push_back(i);
    return out;
}

std::vector<ActionEntry> Action::entries() const {
    const int g = image_size_ / patch_size_;
    std::vector<ActionEntry> out;
    for (std::size_t flat : visible_patches()) {
        ActionEntry e;
        e.prow = int(flat) / g;
        e.pcol = int(flat) % g;
        e.content.resize(std::size_t(patch_size_) * patch_size_ * 3);
        for (int i = 0; i < patch_size_; ++i)
            for (int j = 0; j < patch_size_; ++j)
                for (int ch = 0; ch < 3; ++ch)
                    e.content[(std::size_t(i) * patch_size_ + j) * 3 + ch] =
                        raster_.at(e.prow * patch_size_ + i, e.pcol * patch_size_ + j, ch);
        out.push_back(std::move(e));
    }
    return out;
}

nlohmann::json Action::to_json(const std::string& base_ref) const {
    nlohmann::json j;
    j["base"] = base_ref;
    j["image_size"] = image_size_;
    j["patch_size"] = patch_size_;
    nlohmann::json pastes = nlohmann::json::array();
    for (const auto& op : ops_) {
        const int dst_pr = (op.dst_y + patch_size_ / 2) / patch_size_;
        const int dst_pc = (op.dst_x + patch_size_ / 2) / patch_size_;
        pastes.push_back({{"src", {op.src_prow, op.src_pcol}},
                          {"dst", {dst_pr, dst_pc}},
                          {"dst_px", {op.dst_y, op.dst_x}}});
    }
    j["pastes"] = pastes;
    return j;
}

Action Action::from_json(const nlohmann::json& j, const Frame& base, int patch_size) {
    Action a(base.h, patch_size);
    for (const auto& p : j.at("pastes")) {
        const auto& src = p.at("src");
        if (p.contains("dst_px")) {
            const auto& px = p.at("dst_px");
            a.paste(base, src[0], src[1], px[0], px[1]);
        } else {
            const auto& dst = p.at("dst");
            a.paste(base, src[0], src[1], int(dst[0]) * patch_size, int(dst[1]) * patch_size);
        }
    }
    return a;
}

SpatialDistribution SpatialDistribution::uniform(int rows, int cols) {
    SpatialDistribution d;
    d.rows = rows;
    d.cols = cols;
    d.w.assign(std::size_t(rows) * cols, 1.0 / (double(rows) * cols));
    return d;
}

SpatialDistribution SpatialDistribution::from_weights(int rows, int cols,
                                                      std::vector<double> weights) {
    if (int(weights.size()) != rows * cols)
        throw std::invalid_argument("cwm: spatial distribution: weight count mismatch");
    double sum = 0.0;
    for (double v : weights) {
        if (v < 0.0 || !std::isfinite(v))
            throw std::invalid_argument("cwm: spatial distribution: negative or non-finite weight");
        sum += v;
    }
    if (sum <= 0.0)
        throw std::invalid_argument("cwm: spatial distribution: all-zero weights");
    for (double& v : weights) v /= sum;
    SpatialDistribution d;
    d.rows = rows;
    d.cols = cols;
    d.w = std::move(weights);
    return d;
}

SpatialDistribution SpatialDistribution::one_hot(int rows, int cols, int r, int c) {
    std::vector<double> w(std::size_t(rows) * cols, 0.0);
    w.at(std::size_t(r) * cols + c) = 1.0;
    return from_weights(rows, cols, std::move(w));
}

std::size_t SpatialDistribution::support() const {
    std::size_t n = 0;
    for (double v : w) n += v > 0.0 ? 1 : 0;
    return n;
}

std::pair<int, int> SpatialDistribution::sample(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    const double u = dist(rng);
    double acc = 0.0;
    std::size_t last_nonzero = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (w[i] <= 0.0) continue;
        acc += w[i];
        last_nonzero = i;
        if (u < acc) return {int(i) / cols, int(i) % cols};
    }
    return {int(last_nonzero) / cols, int(last_nonzero) % cols};
}

Action sample_action(const Frame& x, const SpatialDistribution& p, int n, double radius,
                     int patch_size, std::mt19937_64& rng) {
    if (n < 0) throw std::invalid_argument("cwm: sample_action: n must be >= 0");
    if (radius < 0.0) throw std::invalid_argument("cwm: sample_action: radius must be >= 0");
    if (std::size_t(n) > p.support())
        throw std::invalid_argument("cwm: sample_action: n = " + std::to_string(n) +
                                    " exceeds distribution support " +
                                    std::to_string(p.support()));
    if (p.rows != x.h / patch_size || p.cols != x.w / patch_size)
        throw std::invalid_argument("cwm: sample_action: distribution grid mismatch");

    Action a(x.h, patch_size);
    // one shared offset per call, drawn before the loop
    std::uniform_real_distribution<double> offd(-radius, radius);
    const double e1 = offd(rng), e2 = offd(rng);
    const int dy = int(std::lround(e1)), dx = int(std::lround(e2));

    SpatialDistribution remaining = p;
    for (int i = 0; i < n; ++i) {
        const auto [pr, pc] = remaining.sample(rng);
        // remove the chosen source and renormalize (without replacement)
        remaining.w[std::size_t(pr) * remaining.cols + pc] = 0.0;
        double sum = 0.0;
        for (double v : remaining.w) sum += v;
        if (sum > 0.0)
            for (double& v : remaining.w) v /= sum;
        a.paste(x, pr, pc, pr * patch_size + dy, pc * patch_size + dx);
    }
    return a;
}

Action stop_motion_action(const Frame& x, int prow, int pcol, int patch_size) {
    Action a(x.h, patch_size);
    a.paste_stop(x, prow, pcol);
    return a;
}

PredictorModel::PredictorModel(PredictorState state, int flow_layer)
    : state_(state.inference_clone()), flow_layer_(flow_layer) {}

Frame PredictorModel::predict(const Frame& context, const Action& action) const {
    if (context.h != state_.cfg.image_size || context.w != state_.cfg.image_size)
        throw std::invalid_argument("cwm: predict: frame size " + std::to_string(context.h) +
                                    " does not match model size " +
                                    std::to_string(state_.cfg.image_size));
    const std::vector<Frame> ctx(std::size_t(state_.cfg.n_context_frames), context);
    const PatchMask mask = mask_from_visible(
        state_.cfg, action.empty() ? std::vector<std::size_t>{} : action.visible_patches());
    return state_.predict_composite(ctx, action.sparse_frame(), mask);
}

std::vector<float> PredictorModel::embed(const Frame& frame) const {
    return state_.embed_frame(frame, flow_layer_);
}

}  // namespace cwm
