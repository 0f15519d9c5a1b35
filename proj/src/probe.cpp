#include "cwm/probe.hpp"

#include "cwm/rng.hpp"
#include "cwm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <atomic>
#include <map>
#include <numeric>
#include <thread>

namespace cwm {

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

std::vector<float> FeatureBundle::concat(const StructureFlags& flags) const {
    std::vector<float> out = base;
    if (flags.keypoints) out.insert(out.end(), keypoints.begin(), keypoints.end());
    if (flags.flow) out.insert(out.end(), flow.begin(), flow.end());
    if (flags.segments) out.insert(out.end(), segments.begin(), segments.end());
    return out;
}

PooledSegments pool_by_segment(const std::vector<float>& grid_features, int grid, int dim,
                               const std::vector<Mask>& masks) {
    if (grid_features.size() != std::size_t(grid) * grid * dim)
        throw std::invalid_argument("cwm: pool_by_segment: feature grid size mismatch");
    PooledSegments out;
    for (const auto& mask : masks) {
        const int cell_h = mask.h / grid, cell_w = mask.w / grid;
        std::vector<float> pooled(dim, 0.f);
        std::size_t used = 0;
        for (int pr = 0; pr < grid; ++pr)
            for (int pc = 0; pc < grid; ++pc) {
                // majority vote inside the cell
                int on = 0;
                for (int i = 0; i < cell_h; ++i)
                    for (int j = 0; j < cell_w; ++j)
                        on += mask.get(pr * cell_h + i, pc * cell_w + j) ? 1 : 0;
                if (on * 2 < cell_h * cell_w) continue;
                const float* f = grid_features.data() + (std::size_t(pr) * grid + pc) * dim;
                for (int d = 0; d < dim; ++d) pooled[d] += f[d];
                ++used;
            }
        if (used == 0) {
            out.vectors.emplace_back(dim, 0.f);
            out.presence.push_back(0.f);
        } else {
            for (auto& v : pooled) v /= float(used);
            out.vectors.push_back(std::move(pooled));
            out.presence.push_back(1.f);
        }
    }
    return out;
}

FeatureBundle extract_features(const PredictorState& state, const PredictorModel& model,
                               const Episode& ep, const ProbeFeatureConfig& cfg) {
    const int T = cfg.observed_frames;
    if (int(ep.frames.size()) < T || ep.observed < T)
        throw std::invalid_argument("cwm: extract_features: episode has fewer than " +
                                    std::to_string(T) + " observed frames");
    const int P = state.cfg.patches_per_frame();
    const int D = state.cfg.encoder_dim;
    const int g = state.cfg.grid();
    const int ps = state.cfg.patch_size;
    const std::uint64_t seed = mix64(cfg.seed, ep.index);

    // per-frame grids: frame t embedded against its preceding frames (the
    // earliest frame repeats when history runs out)
    std::vector<std::vector<float>> grids;
    for (int t = 0; t < T; ++t) {
        std::vector<Frame> ctx;
        for (int f = state.cfg.n_context_frames; f >= 1; --f)
            ctx.push_back(ep.frames[std::max(0, t - f)]);
        grids.push_back(state.embed_pair(ctx, ep.frames[t]));
    }

    FeatureBundle bundle;
    for (int t = 0; t < T; ++t) {
        if (cfg.compact) {
            std::vector<float> mean(D, 0.f);
            for (int p = 0; p < P; ++p)
                for (int d = 0; d < D; ++d) mean[d] += grids[t][std::size_t(p) * D + d];
            for (auto& v : mean) v /= float(P);
            bundle.base.insert(bundle.base.end(), mean.begin(), mean.end());
        } else {
            bundle.base.insert(bundle.base.end(), grids[t].begin(), grids[t].end());
        }
    }

    // keypoints on consecutive observed pairs; features from the second
    // frame's grid at the keypoint locations
    std::vector<std::vector<Keypoint>> pair_keypoints;
    for (int t = 0; t + 1 < T; ++t) {
        const auto ks = extract_keypoints(model, ep.frames[t], ep.frames[t + 1],
                                          cfg.keypoints_per_pair, cfg.keypoint_mode,
                                          cfg.keypoint_topk);
        pair_keypoints.push_back(ks.points);
        for (int k = 0; k < cfg.keypoints_per_pair; ++k) {
            if (k < int(ks.points.size())) {
                const std::size_t flat = std::size_t(ks.points[k].prow) * g + ks.points[k].pcol;
                const float* f = grids[t + 1].data() + flat * D;
                bundle.keypoints.insert(bundle.keypoints.end(), f, f + D);
                bundle.keypoints.push_back(1.f);
            } else {
                bundle.keypoints.insert(bundle.keypoints.end(), D, 0.f);
                bundle.keypoints.push_back(0.f);
            }
        }
    }

    // flow patches (ps*ps*2 values) at the keypoint locations, cosine method
    for (int t = 0; t + 1 < T; ++t) {
        const FlowField flow = flow_field(model, ep.frames[t], ep.frames[t + 1],
                                          FlowMethod::Cosine);
        for (int k = 0; k < cfg.keypoints_per_pair; ++k) {
            if (k < int(pair_keypoints[t].size())) {
                const Keypoint& kp = pair_keypoints[t][k];
                for (int i = 0; i < ps; ++i)
                    for (int j = 0; j < ps; ++j) {
                        const int r = kp.prow * ps + i, c = kp.pcol * ps + j;
                        const std::size_t q = flow.idx(r, c);
                        bundle.flow.push_back(flow.defined[q] ? flow.dr[q] : 0.f);
                        bundle.flow.push_back(flow.defined[q] ? flow.dc[q] : 0.f);
                    }
            } else {
                bundle.flow.insert(bundle.flow.end(), std::size_t(ps) * ps * 2, 0.f);
            }
        }
    }

    // segments discovered on the first observed frame, pooled over its grid
    DiscoverParams dp;
    dp.max_objects = cfg.max_segments;
    dp.movability_samples = cfg.movability_samples;
    dp.segment = cfg.segment;
    const auto segs = discover_objects(model, ep.frames[0], mix64(seed, 0x5e6), dp);
    std::vector<Mask> masks;
    for (const auto& s : segs) masks.push_back(s.mask);
    while (int(masks.size()) < cfg.max_segments) masks.emplace_back(ep.canvas, ep.canvas);
    const PooledSegments pooled = pool_by_segment(grids[0], g, D, masks);
    for (int n = 0; n < cfg.max_segments; ++n) {
        bundle.segments.insert(bundle.segments.end(), pooled.vectors[n].begin(),
                               pooled.vectors[n].end());
        bundle.segments.push_back(pooled.presence[n]);
    }
    return bundle;
}

// ---------------------------------------------------------------------------
// Logistic probe
// ---------------------------------------------------------------------------

namespace {

struct FitResult {
    std::vector<double> w;
    double b = 0.0;
    bool converged = false;
};

// Full-batch gradient descent with heavy-ball momentum on the autodiff
// kernel. The step size comes from a power-iteration bound on the logistic
// Hessian; momentum 0.9.
FitResult fit_logistic(const std::vector<std::vector<double>>& X, const std::vector<int>& y,
                       double l2, long max_steps = 10000, double grad_tol = 1e-6) {
    const std::size_t n = X.size();
    const std::size_t d = X.empty() ? 0 : X[0].size();
    std::vector<double> xflat(n * d);
    for (std::size_t i = 0; i < n; ++i)
        std::copy(X[i].begin(), X[i].end(), xflat.begin() + i * d);
    std::vector<double> yflat(n);
    for (std::size_t i = 0; i < n; ++i) yflat[i] = double(y[i]);

    TensorD Xt({n, d}, std::move(xflat));
    TensorD Yt({n, 1}, std::move(yflat));

    // lambda_max(X^T X / n) via power iteration
    std::vector<double> v(d, 1.0 / std::sqrt(double(d)));
    double lam = 1.0;
    for (int it = 0; it < 20; ++it) {
        std::vector<double> xv(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            const double* row = Xt.data().data() + i * d;
            for (std::size_t j = 0; j < d; ++j) acc += row[j] * v[j];
            xv[i] = acc;
        }
        std::vector<double> xtxv(d, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = Xt.data().data() + i * d;
            for (std::size_t j = 0; j < d; ++j) xtxv[j] += row[j] * xv[i];
        }
        double norm = 0.0;
        for (double a : xtxv) norm += a * a;
        norm = std::sqrt(norm);
        if (norm == 0.0) break;
        lam = norm / double(n);
        for (std::size_t j = 0; j < d; ++j) v[j] = xtxv[j] / norm;
    }
    const double lr = 1.0 / (0.25 * lam * 1.1 + l2 + 1e-12);
    const double beta = 0.9;

    TensorD w({d, 1}, 0.0, true);
    TensorD b({1}, 0.0, true);
    std::vector<double> vw(d, 0.0);
    double vb = 0.0;

    FitResult res;
    for (long step = 0; step < max_steps; ++step) {
        auto logits = add(matmul(Xt, w), b);
        auto data_loss = sigmoid_bce(logits, Yt);
        auto reg = scale(sum_all(mul(w, w)), l2 / 2.0);
        auto loss = add(data_loss, reg);
        backward(loss);

        double gnorm = 0.0;
        for (double gv : w.grad()) gnorm += gv * gv;
        gnorm += b.grad()[0] * b.grad()[0];
        gnorm = std::sqrt(gnorm);
        if (gnorm < grad_tol) {
            res.converged = true;
            break;
        }
        auto wd = w.data_mut();
        auto gw = w.grad();
        for (std::size_t j = 0; j < d; ++j) {
            vw[j] = beta * vw[j] - lr * gw[j];
            wd[j] += vw[j];
        }
        vb = beta * vb - lr * b.grad()[0];
        b.data_mut()[0] += vb;
    }
    res.w.assign(w.data().begin(), w.data().end());
    res.b = b.data()[0];
    return res;
}

std::vector<std::vector<double>> standardize(const std::vector<std::vector<float>>& X,
                                             std::vector<double>& mean, std::vector<double>& std) {
    const std::size_t n = X.size(), d = X.empty() ? 0 : X[0].size();
    mean.assign(d, 0.0);
    std.assign(d, 0.0);
    for (const auto& row : X)
        for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
    for (auto& m : mean) m /= double(n);
    for (const auto& row : X)
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - mean[j];
            std[j] += c * c;
        }
    for (auto& s : std) {
        s = std::sqrt(s / double(n));
        if (s < 1e-12) s = 1.0;  // constant feature: dies after centering
    }
    std::vector<std::vector<double>> out(n, std::vector<double>(d));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i][j] = (X[i][j] - mean[j]) / std[j];
    return out;
}

double accuracy_of(const std::vector<double>& w, double b,
                   const std::vector<std::vector<double>>& X, const std::vector<int>& y) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < X.size(); ++i) {
        double z = b;
        for (std::size_t j = 0; j < w.size(); ++j) z += w[j] * X[i][j];
        correct += ((z >= 0.0 ? 1 : 0) == y[i]) ? 1 : 0;
    }
    return double(correct) / double(X.size());
}

}  // namespace

ProbeModel train_probe(const std::vector<std::vector<float>>& X, const std::vector<int>& y,
                       const std::vector<double>& l2_grid) {
    if (X.size() != y.size() || X.empty())
        throw std::invalid_argument("cwm: train_probe: bundle/label count mismatch");
    if (l2_grid.empty()) throw std::invalid_argument("cwm: train_probe: empty l2 grid");
    {
        int pos = 0;
        for (int l : y) pos += l;
        if (pos == 0 || pos == int(y.size()))
            throw std::invalid_argument("cwm: train_probe: labels are single-class");
    }

    ProbeModel model;
    const auto Xs = standardize(X, model.feat_mean, model.feat_std);
    const std::size_t n = Xs.size();

    // 5-fold CV: contiguous blocks
    const int folds = 5;
    double best_acc = -1.0;
    double best_l2 = l2_grid.front();
    for (double l2 : l2_grid) {
        double acc = 0.0;
        for (int f = 0; f < folds; ++f) {
            const std::size_t lo = f * n / folds, hi = (f + 1) * n / folds;
            std::vector<std::vector<double>> xtr, xva;
            std::vector<int> ytr, yva;
            for (std::size_t i = 0; i < n; ++i) {
                if (i >= lo && i < hi) {
                    xva.push_back(Xs[i]);
                    yva.push_back(y[i]);
                } else {
                    xtr.push_back(Xs[i]);
                    ytr.push_back(y[i]);
                }
            }
            const FitResult fit = fit_logistic(xtr, ytr, l2);
            acc += accuracy_of(fit.w, fit.b, xva, yva);
        }
        acc /= double(folds);
        if (acc > best_acc) {
            best_acc = acc;
            best_l2 = l2;
        }
    }

    const FitResult final_fit = fit_logistic(Xs, y, best_l2);
    model.w = final_fit.w;
    model.b = final_fit.b;
    model.l2 = best_l2;
    model.converged = final_fit.converged;
    model.cv_accuracy = best_acc;
    return model;
}

double ProbeModel::score(const std::vector<float>& x) const {
    if (x.size() != w.size())
        throw std::invalid_argument("cwm: probe score: feature dim " + std::to_string(x.size()) +
                                    " does not match model dim " + std::to_string(w.size()));
    double z = b;
    for (std::size_t j = 0; j < w.size(); ++j)
        z += w[j] * ((x[j] - feat_mean[j]) / feat_std[j]);
    return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

double evaluate_accuracy(const ProbeModel& model, const std::vector<std::vector<float>>& X,
                         const std::vector<int>& y) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < X.size(); ++i)
        correct += (model.predict(X[i]) == y[i]) ? 1 : 0;
    return double(correct) / double(X.size());
}

std::optional<double> epe(const FlowField& pred, const FlowField& gt) {
    if (pred.h != gt.h || pred.w != gt.w)
        throw std::invalid_argument("cwm: epe: field sizes differ");
    double acc = 0.0;
    std::size_t n = 0;
    for (int r = 0; r < pred.h; ++r)
        for (int c = 0; c < pred.w; ++c) {
            const std::size_t i = pred.idx(r, c);
            if (!pred.defined[i] || !gt.defined[i]) continue;
            acc += std::hypot(double(pred.dr[i]) - gt.dr[i], double(pred.dc[i]) - gt.dc[i]);
            ++n;
        }
    if (n == 0) return std::nullopt;
    return acc / double(n);
}

double iou(const Mask& a, const Mask& b) {
    if (a.h != b.h || a.w != b.w) throw std::invalid_argument("cwm: iou: mask sizes differ");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.on.size(); ++i) {
        const bool pa = a.on[i] != 0, pb = b.on[i] != 0;
        inter += (pa && pb) ? 1 : 0;
        uni += (pa || pb) ? 1 : 0;
    }
    if (uni == 0) return 1.0;  // both empty: identical
    return double(inter) / double(uni);
}

// ---------------------------------------------------------------------------
// End-to-end protocol
// ---------------------------------------------------------------------------

std::vector<ProbeTaskResult> run_probe_tasks(const PredictorState& state,
                                             const std::vector<ContactTask>& tasks,
                                             const ProbeRunConfig& cfg) {
    std::vector<ProbeTaskResult> results;
    for (ContactTask task : tasks) {
        ProbeTaskResult r;
        r.task = task;
        r.split = make_balanced_split(cfg.world, cfg.n_train, cfg.n_test, task);
        results.push_back(std::move(r));
    }

    // union of episode indices across every split: shared episodes are
    // extracted exactly once
    std::map<std::uint64_t, std::size_t> slot_of;
    for (const auto& r : results) {
        for (std::uint64_t i : r.split.train) slot_of.emplace(i, 0);
        for (std::uint64_t i : r.split.test) slot_of.emplace(i, 0);
    }
    std::vector<std::uint64_t> unique_indices;
    for (auto& [idx, slot] : slot_of) {
        slot = unique_indices.size();
        unique_indices.push_back(idx);
    }

    const PredictorModel model(state);
    const PredictorState frozen = state.inference_clone();
    std::vector<FeatureBundle> bundles(unique_indices.size());

    const int threads = std::max(1, cfg.threads);
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= unique_indices.size()) break;
            const Episode ep = generate_episode(cfg.world, unique_indices[i]);
            bundles[i] = extract_features(frozen, model, ep, cfg.features);
        }
    };
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    std::vector<std::pair<std::string, StructureFlags>> rows;
    if (cfg.ablate_structures) {
        rows = {{"feat", {false, false, false}},
                {"feat+keypt", {true, false, false}},
                {"feat+keypt+flow", {true, true, false}},
                {"feat+keypt+flow+seg", {true, true, true}}};
    } else {
        rows = {{"feat+keypt+flow+seg", {true, true, true}}};
    }

    for (auto& result : results) {
        for (const auto& [name, flags] : rows) {
            std::vector<std::vector<float>> xtr, xte;
            for (std::uint64_t i : result.split.train)
                xtr.push_back(bundles[slot_of.at(i)].concat(flags));
            for (std::uint64_t i : result.split.test)
                xte.push_back(bundles[slot_of.at(i)].concat(flags));

            const ProbeModel probe = train_probe(xtr, result.split.train_labels, cfg.l2_grid);

            ProbeRowResult row;
            row.name = name;
            row.flags = flags;
            row.cv_accuracy = probe.cv_accuracy;
            row.chosen_l2 = probe.l2;
            row.converged = probe.converged;
            for (const auto& x : xte) row.test_predictions.push_back(probe.predict(x));
            std::size_t correct = 0;
            for (std::size_t i = 0; i < xte.size(); ++i)
                correct += (row.test_predictions[i] == result.split.test_labels[i]) ? 1 : 0;
            row.test_accuracy = double(correct) / double(xte.size());
            result.rows.push_back(std::move(row));
        }
    }
    return results;
}

ProbeTaskResult run_probe_task(const PredictorState& state, ContactTask task,
                               const ProbeRunConfig& cfg) {
    return run_probe_tasks(state, {task}, cfg).front();
}

}  // namespace cwm
