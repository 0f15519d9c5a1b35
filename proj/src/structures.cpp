#include "cwm/structures.hpp"

#include "cwm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace cwm {

namespace {

double frame_mse(const Frame& a, const Frame& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.rgb.size(); ++i) {
        const double d = double(a.rgb[i]) - double(b.rgb[i]);
        acc += d * d;
    }
    return acc / double(a.rgb.size());
}

// Per-patch MSE map between two frames, row-major over the patch grid.
std::vector<double> patch_error_map(const Frame& a, const Frame& b, int patch_size) {
    const int g = a.h / patch_size;
    std::vector<double> err(std::size_t(g) * g, 0.0);
    for (int pr = 0; pr < g; ++pr)
        for (int pc = 0; pc < g; ++pc) {
            double acc = 0.0;
            for (int i = 0; i < patch_size; ++i)
                for (int j = 0; j < patch_size; ++j)
                    for (int ch = 0; ch < 3; ++ch) {
                        const double d = double(a.at(pr * patch_size + i, pc * patch_size + j, ch)) -
                                         double(b.at(pr * patch_size + i, pc * patch_size + j, ch));
                        acc += d * d;
                    }
            err[std::size_t(pr) * g + pc] = acc / double(patch_size * patch_size * 3);
        }
    return err;
}

Action action_from_patches(const Frame& x, const std::vector<std::size_t>& patches,
                           int patch_size) {
    Action a(x.h, patch_size);
    const int g = x.h / patch_size;
    for (std::size_t flat : patches)
        a.paste_stop(x, int(flat) / g, int(flat) % g);
    return a;
}

}  // namespace

// ---------------------------------------------------------------------------
// Keypoints
// ---------------------------------------------------------------------------

KeypointSet extract_keypoints(const CounterfactualModel& model, const Frame& x1, const Frame& x2,
                              int iters, KeypointMode mode, int top_k) {
    const int ps = model.patch_size();
    const int g = model.grid();
    const int total = g * g;
    if (iters < 0 || iters > total)
        throw std::invalid_argument("cwm: extract_keypoints: iters " + std::to_string(iters) +
                                    " exceeds patch count " + std::to_string(total));

    KeypointSet out;
    std::vector<std::size_t> chosen;  // action patches (contents from x2)
    for (int it = 0; it < iters; ++it) {
        const Action act = action_from_patches(x2, chosen, ps);
        const Frame pred = model.predict(x1, act);
        std::vector<double> err = patch_error_map(pred, x2, ps);
        for (std::size_t c : chosen) err[c] = -1.0;  // keypoints are distinct

        auto add_keypoint = [&](std::size_t flat, double mse_after) {
            chosen.push_back(flat);
            out.points.push_back({int(flat) / g, int(flat) % g, mse_after});
        };

        if (mode == KeypointMode::GreedyArgmax) {
            std::size_t best = 0;
            for (std::size_t i = 1; i < err.size(); ++i)
                if (err[i] > err[best]) best = i;
            // post-selection MSE: full-frame error once the patch joins the action
            auto with = chosen;
            with.push_back(best);
            const Frame pred2 = model.predict(x1, action_from_patches(x2, with, ps));
            add_keypoint(best, frame_mse(pred2, x2));
        } else {
            // top-k error candidates, each evaluated by re-prediction
            std::vector<std::size_t> order(err.size());
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(),
                             [&](std::size_t a, std::size_t b) { return err[a] > err[b]; });
            const int k = std::min<std::size_t>(top_k, err.size() - chosen.size());
            std::size_t best = order[0];
            double best_mse = std::numeric_limits<double>::infinity();
            std::vector<std::pair<std::size_t, double>> evals;
            for (int ci = 0; ci < k; ++ci) {
                const std::size_t cand = order[ci];
                if (err[cand] < 0) continue;
                auto with = chosen;
                with.push_back(cand);
                const Frame pred2 = model.predict(x1, action_from_patches(x2, with, ps));
                evals.emplace_back(cand, frame_mse(pred2, x2));
            }
            // minimum resulting MSE; ties -> lowest row-major index
            std::sort(evals.begin(), evals.end(), [](const auto& a, const auto& b) {
                if (a.second != b.second) return a.second < b.second;
                return a.first < b.first;
            });
            best = evals.front().first;
            best_mse = evals.front().second;
            add_keypoint(best, best_mse);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Perturbation flow
// ---------------------------------------------------------------------------

Frame perturb_frame(const Frame& x, int r, int c, double delta) {
    Frame out = x;
    for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
            const int rr = r + dr, cc = c + dc;
            if (rr < 0 || rr >= x.h || cc < 0 || cc >= x.w) continue;
            const float bump = float(delta * std::exp(-0.5 * double(dr * dr + dc * dc)));
            for (int ch = 0; ch < 3; ++ch)
                out.at(rr, cc, ch) = std::clamp(out.at(rr, cc, ch) + bump, 0.f, 1.f);
        }
    return out;
}

FlowVector flow_perturbation(const CounterfactualModel& model, const Frame& x1, const Frame& x2,
                             int r, int c, std::uint64_t seed, const PerturbFlowParams& params) {
    if (r < 0 || r >= x1.h || c < 0 || c >= x1.w)
        throw std::invalid_argument("cwm: flow_perturbation: pixel out of bounds");
    if (params.iters < 1 || params.delta <= 0.0)
        throw std::invalid_argument("cwm: flow_perturbation: iters must be >= 1 and delta > 0");

    const Frame x1p = perturb_frame(x1, r, c, params.delta);
    const int g = model.grid();
    const auto p = SpatialDistribution::uniform(g, g);

    Frame mean(x1.h, x1.w, 0.f);
    for (int it = 0; it < params.iters; ++it) {
        std::mt19937_64 rng = make_rng(mix64(seed, 0xF10u), std::uint64_t(it));
        const Action act = sample_action(x2, p, params.n_patches, 0.0, model.patch_size(), rng);
        const Frame pred = model.predict(x1p, act);
        for (std::size_t i = 0; i < mean.rgb.size(); ++i) mean.rgb[i] += pred.rgb[i];
    }
    for (auto& v : mean.rgb) v /= float(params.iters);

    // response = |mean prediction - x2|, channel-averaged
    double best = -1.0;
    int br = 0, bc = 0;
    for (int rr = 0; rr < x1.h; ++rr)
        for (int cc = 0; cc < x1.w; ++cc) {
            double resp = 0.0;
            for (int ch = 0; ch < 3; ++ch)
                resp += std::abs(double(mean.at(rr, cc, ch)) - double(x2.at(rr, cc, ch)));
            resp /= 3.0;
            if (resp > best) {
                best = resp;
                br = rr;
                bc = cc;
            }
        }
    FlowVector out;
    if (best < params.resp_threshold) return out;  // disocclusion: undefined
    out.defined = true;
    out.dr = br - r;
    out.dc = bc - c;
    return out;
}

std::vector<float> perturbation_response(const CounterfactualModel& model, const Frame& x1,
                                         const Frame& x2, int r, int c, double delta) {
    if (delta <= 0.0)
        throw std::invalid_argument("cwm: perturbation_response: delta must be > 0");
    const Frame x1p = perturb_frame(x1, r, c, delta);
    double denom = 0.0;
    for (int rr = 0; rr < x1.h; ++rr)
        for (int cc = 0; cc < x1.w; ++cc) {
            double d = 0.0;
            for (int ch = 0; ch < 3; ++ch)
                d += std::abs(double(x1p.at(rr, cc, ch)) - double(x1.at(rr, cc, ch)));
            denom = std::max(denom, d / 3.0);
        }
    if (denom == 0.0)
        throw std::invalid_argument(
            "cwm: perturbation_response: delta too small, perturbed frame equals input");

    const Frame pred = model.predict(x1p, Action(x1.h, model.patch_size()));
    std::vector<float> out(std::size_t(x1.h) * x1.w, 0.f);
    for (int rr = 0; rr < x1.h; ++rr)
        for (int cc = 0; cc < x1.w; ++cc) {
            double resp = 0.0;
            for (int ch = 0; ch < 3; ++ch)
                resp += std::abs(double(pred.at(rr, cc, ch)) - double(x2.at(rr, cc, ch)));
            out[std::size_t(rr) * x1.w + cc] = float(resp / 3.0 / denom);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Cosine flow
// ---------------------------------------------------------------------------

namespace {

struct Match {
    int src = -1;       // flat source index, -1 when undefined
    double sim = -2.0;  // cosine similarity of the match
};

// Best-similarity source in e1 for every patch of e2. Ties break toward the
// smallest displacement, then row-major order. Zero-norm rows are undefined.
std::vector<Match> cosine_match(const std::vector<float>& e1, const std::vector<float>& e2,
                                int grid, int dim) {
    if (e1.size() != e2.size() || e1.size() != std::size_t(grid) * grid * dim)
        throw std::invalid_argument("cwm: flow_cosine: embedding sizes do not match grid");

    std::vector<double> n1(std::size_t(grid) * grid), n2(std::size_t(grid) * grid);
    auto norms = [&](const std::vector<float>& e, std::vector<double>& n) {
        for (std::size_t i = 0; i < n.size(); ++i) {
            double acc = 0.0;
            for (int d = 0; d < dim; ++d) acc += double(e[i * dim + d]) * e[i * dim + d];
            n[i] = std::sqrt(acc);
        }
    };
    norms(e1, n1);
    norms(e2, n2);

    std::vector<Match> out(std::size_t(grid) * grid);
    for (int tr = 0; tr < grid; ++tr)
        for (int tc = 0; tc < grid; ++tc) {
            const std::size_t t = std::size_t(tr) * grid + tc;
            if (n2[t] == 0.0) continue;
            Match best;
            long best_disp2 = 0;
            for (int sr = 0; sr < grid; ++sr)
                for (int sc = 0; sc < grid; ++sc) {
                    const std::size_t s = std::size_t(sr) * grid + sc;
                    if (n1[s] == 0.0) continue;
                    double dot = 0.0;
                    for (int d = 0; d < dim; ++d)
                        dot += double(e1[s * dim + d]) * e2[t * dim + d];
                    const double sim = dot / (n1[s] * n2[t]);
                    const long disp2 = long(tr - sr) * (tr - sr) + long(tc - sc) * (tc - sc);
                    if (sim > best.sim || (sim == best.sim && disp2 < best_disp2)) {
                        best.sim = sim;
                        best.src = int(s);
                        best_disp2 = disp2;
                    }
                }
            out[t] = best;
        }
    return out;
}

}  // namespace

FlowField flow_cosine(const std::vector<float>& e1, const std::vector<float>& e2, int grid,
                      int dim, int patch_size) {
    const auto matches = cosine_match(e1, e2, grid, dim);
    FlowField flow(grid, grid);
    for (int tr = 0; tr < grid; ++tr)
        for (int tc = 0; tc < grid; ++tc) {
            const Match& m = matches[std::size_t(tr) * grid + tc];
            if (m.src < 0) flow.set_undefined(tr, tc);
            else
                flow.set(tr, tc, float((tr - m.src / grid) * patch_size),
                         float((tc - m.src % grid) * patch_size));
        }
    return flow;
}

namespace {

FlowField upsample_flow_patch_to_pixels(const FlowField& pf, int patch_size) {
    FlowField out(pf.h * patch_size, pf.w * patch_size);
    for (int r = 0; r < out.h; ++r)
        for (int c = 0; c < out.w; ++c) {
            const std::size_t s = pf.idx(r / patch_size, c / patch_size);
            if (pf.defined[s]) out.set(r, c, pf.dr[s], pf.dc[s]);
            else out.set_undefined(r, c);
        }
    return out;
}

}  // namespace

FlowField flow_field(const CounterfactualModel& model, const Frame& x1, const Frame& x2,
                     FlowMethod method, std::uint64_t seed, const PerturbFlowParams& params) {
    const int ps = model.patch_size();
    const int g = model.grid();
    if (method == FlowMethod::Cosine) {
        const auto e1 = model.embed(x1);
        const auto e2 = model.embed(x2);
        return upsample_flow_patch_to_pixels(flow_cosine(e1, e2, g, model.embed_dim(), ps), ps);
    }
    // perturbation method: one query per patch center, nearest-neighbor fill
    FlowField pf(g, g);
    for (int pr = 0; pr < g; ++pr)
        for (int pc = 0; pc < g; ++pc) {
            const int r = pr * ps + ps / 2, c = pc * ps + ps / 2;
            const FlowVector v = flow_perturbation(model, x1, x2, r, c,
                                                   mix64(seed, std::size_t(pr) * g + pc), params);
            if (v.defined) pf.set(pr, pc, float(v.dr), float(v.dc));
            else pf.set_undefined(pr, pc);
        }
    return upsample_flow_patch_to_pixels(pf, ps);
}

FlowField flow_source_cosine(const CounterfactualModel& model, const Frame& x, const Frame& y,
                             bool mutual, double min_similarity, bool centered) {
    const int g = model.grid();
    const int ps = model.patch_size();
    const int dim = model.embed_dim();
    auto ex = model.embed(x);
    auto ey = model.embed(y);
    if (centered) {
        auto center_rows = [dim](std::vector<float>& e) {
            for (std::size_t row = 0; row * dim < e.size(); ++row) {
                float mean = 0.f;
                for (int d = 0; d < dim; ++d) mean += e[row * dim + d];
                mean /= float(dim);
                for (int d = 0; d < dim; ++d) e[row * dim + d] -= mean;
            }
        };
        center_rows(ex);
        center_rows(ey);
    }
    // forward: best y location for each x patch; backward closes the cycle
    const auto fwd = cosine_match(ey, ex, g, dim);

    FlowField f(g, g);
    std::vector<Match> bwd;
    if (mutual) bwd = cosine_match(ex, ey, g, dim);
    for (int tr = 0; tr < g; ++tr)
        for (int tc = 0; tc < g; ++tc) {
            const std::size_t t = std::size_t(tr) * g + tc;
            const Match& m = fwd[t];
            if (m.src < 0 || m.sim < min_similarity) {
                f.set_undefined(tr, tc);
                continue;
            }
            if (mutual && std::size_t(bwd[m.src].src) != t) {
                f.set_undefined(tr, tc);
                continue;
            }
            f.set(tr, tc, float((m.src / g - tr) * ps), float((m.src % g - tc) * ps));
        }
    return f;
}

// ---------------------------------------------------------------------------
// Segments
// ---------------------------------------------------------------------------

namespace {

void center_rows(std::vector<float>& e, int dim) {
    for (std::size_t row = 0; row * dim < e.size(); ++row) {
        float mean = 0.f;
        for (int d = 0; d < dim; ++d) mean += e[row * dim + d];
        mean /= float(dim);
        for (int d = 0; d < dim; ++d) e[row * dim + d] -= mean;
    }
}

// x-indexed flow with mutual consistency + similarity floor, from
// precomputed base-frame embeddings (the base is embedded once per query).
FlowField matched_source_flow(const std::vector<float>& ex, const std::vector<float>& ey, int g,
                              int dim, int ps, double min_similarity) {
    const auto fwd = cosine_match(ey, ex, g, dim);
    const auto bwd = cosine_match(ex, ey, g, dim);
    FlowField f(g, g);
    for (int tr = 0; tr < g; ++tr)
        for (int tc = 0; tc < g; ++tc) {
            const std::size_t t = std::size_t(tr) * g + tc;
            const Match& m = fwd[t];
            if (m.src < 0 || m.sim < min_similarity || std::size_t(bwd[m.src].src) != t) {
                f.set_undefined(tr, tc);
                continue;
            }
            f.set(tr, tc, float((m.src / g - tr) * ps), float((m.src % g - tc) * ps));
        }
    return f;
}

}  // namespace

std::vector<double> mean_motion_magnitude(const CounterfactualModel& model, const Frame& x,
                                          const std::vector<std::size_t>& motion,
                                          const std::vector<std::size_t>& stops, double radius,
                                          int actions, std::uint64_t seed,
                                          double min_similarity) {
    const int ps = model.patch_size();
    const int g = model.grid();
    const int dim = model.embed_dim();
    std::vector<float> ex = model.embed(x);
    center_rows(ex, dim);

    std::vector<double> mean(std::size_t(g) * g, 0.0);
    for (int k = 0; k < actions; ++k) {
        std::mt19937_64 rng = make_rng(seed, std::uint64_t(k));
        std::uniform_real_distribution<double> offd(-radius, radius);
        const double e1 = offd(rng), e2 = offd(rng);
        const int dy = int(std::lround(e1)), dx = int(std::lround(e2));

        Action act(x.h, ps);
        for (std::size_t flat : motion)
            act.paste(x, int(flat) / g, int(flat) % g, (int(flat) / g) * ps + dy,
                      (int(flat) % g) * ps + dx);
        for (std::size_t flat : stops) act.paste_stop(x, int(flat) / g, int(flat) % g);

        const Frame pred = model.predict(x, act);
        std::vector<float> ey = model.embed(pred);
        center_rows(ey, dim);
        const FlowField flow = matched_source_flow(ex, ey, g, dim, ps, min_similarity);
        for (int pr = 0; pr < g; ++pr)
            for (int pc = 0; pc < g; ++pc) {
                const std::size_t i = flow.idx(pr, pc);
                if (flow.defined[i]) mean[std::size_t(pr) * g + pc] += flow.magnitude(pr, pc);
            }
    }
    for (auto& v : mean) v /= double(actions);
    return mean;
}

SegmentResult extract_segment(const CounterfactualModel& model, const Frame& x, int r, int c,
                              std::uint64_t seed, const SegmentParams& params) {
    if (r < 0 || r >= x.h || c < 0 || c >= x.w)
        throw std::invalid_argument("cwm: extract_segment: pixel out of bounds");
    const int ps = model.patch_size();
    const int g = model.grid();
    const double radius = params.radius_frac * model.image_size();

    SegmentResult res;
    res.query_r = r;
    res.query_c = c;
    res.mask = Mask(x.h, x.w);
    const std::size_t query_patch = std::size_t(r / ps) * g + c / ps;

    std::vector<std::size_t> motion{query_patch};
    std::vector<std::size_t> stops;
    std::vector<bool> seg(std::size_t(g) * g, false);

    for (int t = 0; t < params.iterations; ++t) {
        res.motion_sets.push_back(motion);
        res.stop_sets.push_back(stops);

        const auto mag = mean_motion_magnitude(model, x, motion, stops, radius,
                                               params.actions_per_iter, mix64(seed, t),
                                               params.min_similarity);
        res.magnitude_maps.push_back(mag);

        std::fill(seg.begin(), seg.end(), false);
        bool any = false;
        for (std::size_t i = 0; i < mag.size(); ++i)
            if (mag[i] > params.threshold) {
                seg[i] = true;
                any = true;
            }
        if (!any && t == 0) {
            res.empty_flag = true;  // no object moved
            return res;
        }
        if (t + 1 == params.iterations) break;

        // constructive invariant: next motion patches lie inside this segment,
        // next stop patches lie outside it
        std::vector<std::size_t> kept;
        for (std::size_t m : motion)
            if (seg[m]) kept.push_back(m);
        if (kept.empty() && any) {
            // motion lost the segment; restart from the strongest patch
            std::size_t best = 0;
            for (std::size_t i = 1; i < mag.size(); ++i)
                if (mag[i] > mag[best]) best = i;
            kept.push_back(best);
        }
        std::mt19937_64 grow_rng = make_rng(mix64(seed, 0x9e0u), std::uint64_t(t));
        std::vector<std::size_t> in_candidates;
        for (std::size_t i = 0; i < seg.size(); ++i)
            if (seg[i] && std::find(kept.begin(), kept.end(), i) == kept.end())
                in_candidates.push_back(i);
        if (!in_candidates.empty()) {
            std::uniform_int_distribution<std::size_t> d(0, in_candidates.size() - 1);
            kept.push_back(in_candidates[d(grow_rng)]);
        }
        motion = std::move(kept);

        std::vector<std::size_t> stop_kept;
        for (std::size_t s : stops)
            if (!seg[s]) stop_kept.push_back(s);
        std::vector<std::size_t> out_candidates;
        for (std::size_t i = 0; i < seg.size(); ++i)
            if (!seg[i] && std::find(stop_kept.begin(), stop_kept.end(), i) == stop_kept.end())
                out_candidates.push_back(i);
        if (!out_candidates.empty()) {
            std::uniform_int_distribution<std::size_t> d(0, out_candidates.size() - 1);
            stop_kept.push_back(out_candidates[d(grow_rng)]);
        }
        stops = std::move(stop_kept);
    }

    for (int pr = 0; pr < g; ++pr)
        for (int pc = 0; pc < g; ++pc)
            if (seg[std::size_t(pr) * g + pc])
                for (int i = 0; i < ps; ++i)
                    for (int j = 0; j < ps; ++j) res.mask.set(pr * ps + i, pc * ps + j, 1);
    res.query_inside = seg[query_patch];
    res.empty_flag = res.mask.count() == 0;
    return res;
}

double spelke_affinity(const CounterfactualModel& model, const Frame& x, int ir, int ic, int jr,
                       int jc, std::uint64_t seed, const SegmentParams& params) {
    if (ir < 0 || ir >= x.h || ic < 0 || ic >= x.w || jr < 0 || jr >= x.h || jc < 0 || jc >= x.w)
        throw std::invalid_argument("cwm: spelke_affinity: pixel out of bounds");
    const int ps = model.patch_size();
    const int g = model.grid();
    const std::size_t query_patch = std::size_t(ir / ps) * g + ic / ps;
    // matches extract_segment's iteration-1 sampling at the same seed
    const auto mag = mean_motion_magnitude(model, x, {query_patch}, {},
                                           params.radius_frac * model.image_size(),
                                           params.actions_per_iter, mix64(seed, 0),
                                           params.min_similarity);
    return mag[std::size_t(jr / ps) * g + jc / ps];
}

// ---------------------------------------------------------------------------
// Movability and discovery
// ---------------------------------------------------------------------------

MovabilityResult movability_map(const CounterfactualModel& model, const Frame& x, int m_samples,
                                std::uint64_t seed, double radius_frac) {
    if (m_samples < 1)
        throw std::invalid_argument("cwm: movability_map: m_samples must be >= 1");
    const int g = model.grid();
    MovabilityResult res;
    res.raw.assign(std::size_t(g) * g, 0.0);
    const double radius = radius_frac * model.image_size();
    for (int s = 0; s < m_samples; ++s) {
        std::mt19937_64 rng = make_rng(mix64(seed, 0x30Bu), std::uint64_t(s));
        std::uniform_int_distribution<int> d(0, g * g - 1);
        const std::size_t patch = std::size_t(d(rng));
        const auto mag =
            mean_motion_magnitude(model, x, {patch}, {}, radius, 1, mix64(seed, 0x31Bu + s));
        for (std::size_t i = 0; i < res.raw.size(); ++i) res.raw[i] += mag[i];
    }
    for (auto& v : res.raw) v /= double(m_samples);

    double sum = 0.0;
    for (double v : res.raw) sum += v;
    if (sum <= 0.0) {
        res.dist = SpatialDistribution::uniform(g, g);
        res.all_zero_fallback = true;
    } else {
        res.dist = SpatialDistribution::from_weights(g, g, res.raw);
    }
    return res;
}

std::vector<SegmentResult> discover_objects(const CounterfactualModel& model, const Frame& x,
                                            std::uint64_t seed, const DiscoverParams& params) {
    if (params.max_objects < 1)
        throw std::invalid_argument("cwm: discover_objects: max_objects must be >= 1");
    const int ps = model.patch_size();
    const int g = model.grid();

    const MovabilityResult mov =
        movability_map(model, x, params.movability_samples, mix64(seed, 0xD15C),
                       params.segment.radius_frac);
    std::vector<double> weights = mov.all_zero_fallback
                                      ? std::vector<double>(std::size_t(g) * g, 1.0)
                                      : mov.raw;
    const double initial_mass = std::accumulate(weights.begin(), weights.end(), 0.0);

    std::vector<SegmentResult> found;
    std::mt19937_64 rng = make_rng(seed, 0xD15C0);
    for (int round = 0; round < g * g && int(found.size()) < params.max_objects; ++round) {
        const double mass = std::accumulate(weights.begin(), weights.end(), 0.0);
        if (mass < params.stop_mass_frac * initial_mass || mass <= 0.0) break;

        const auto dist = SpatialDistribution::from_weights(g, g, weights);
        const auto [pr, pc] = dist.sample(rng);
        const int r = pr * ps + ps / 2, c = pc * ps + ps / 2;
        const SegmentResult seg =
            extract_segment(model, x, r, c, mix64(seed, 0x5E6 + round), params.segment);

        // zero the distribution under the segment, dilated by one patch
        weights[std::size_t(pr) * g + pc] = 0.0;
        if (!seg.empty_flag) {
            for (int qr = 0; qr < g; ++qr)
                for (int qc = 0; qc < g; ++qc) {
                    bool covered = false;
                    for (int dr = -1; dr <= 1 && !covered; ++dr)
                        for (int dc = -1; dc <= 1 && !covered; ++dc) {
                            const int nr = qr + dr, nc = qc + dc;
                            if (nr < 0 || nr >= g || nc < 0 || nc >= g) continue;
                            covered = seg.mask.get(nr * ps + ps / 2, nc * ps + ps / 2) != 0;
                        }
                    if (covered) weights[std::size_t(qr) * g + qc] = 0.0;
                }
            found.push_back(seg);
        }
    }
    return found;
}

FlowField downscale_flow(const FlowField& flow, int factor) {
    if (factor <= 0) throw std::invalid_argument("cwm: downscale_flow: factor must be positive");
    if (factor == 1) return flow;
    FlowField out(flow.h / factor, flow.w / factor);
    for (int r = 0; r < out.h; ++r)
        for (int c = 0; c < out.w; ++c) {
            const std::size_t s = flow.idx(r * factor, c * factor);
            if (flow.defined[s]) out.set(r, c, flow.dr[s] / factor, flow.dc[s] / factor);
            else out.set_undefined(r, c);
        }
    return out;
}

}  // namespace cwm
