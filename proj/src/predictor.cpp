#include "cwm/predictor.hpp"

#include "cwm/optim.hpp"
#include "cwm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace cwm {

// ---------------------------------------------------------------------------
// Config / mask / patchify
// ---------------------------------------------------------------------------

int PredictorConfig::visible_target_count() const {
    const int p = patches_per_frame();
    const double x = p * (1.0 - double(mask_ratio));
    const double fl = std::floor(x);
    const double frac = x - fl;
    int v;
    if (std::abs(frac - 0.5) < 1e-9)
        v = (static_cast<long long>(fl) % 2 == 0) ? int(fl) : int(fl) + 1;
    else
        v = frac > 0.5 ? int(fl) + 1 : int(fl);
    return std::clamp(v, 1, p - 1);
}

void PredictorConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
        throw std::invalid_argument("cwm: image_size " + std::to_string(image_size) +
                                    " not divisible by patch_size " + std::to_string(patch_size));
    if (n_context_frames < 1)
        throw std::invalid_argument("cwm: n_context_frames must be >= 1");
    if (!(mask_ratio > 0.f && mask_ratio < 1.f))
        throw std::invalid_argument("cwm: mask_ratio must lie in (0,1)");
    if (encoder_dim % (4 * encoder_heads) != 0 || decoder_dim % (4 * decoder_heads) != 0)
        throw std::invalid_argument(
            "cwm: encoder/decoder dims must be divisible by 4*heads (sincos + head split)");
    if (encoder_depth < 1 || decoder_depth < 1)
        throw std::invalid_argument("cwm: encoder/decoder depth must be >= 1");
}

PatchMask mask_from_visible(const PredictorConfig& cfg, std::vector<std::size_t> visible) {
    const std::size_t p = cfg.patches_per_frame();
    std::sort(visible.begin(), visible.end());
    PatchMask m;
    m.patches_per_frame = int(p);
    m.n_context = cfg.n_context_frames;
    m.visible = std::move(visible);
    std::vector<bool> vis(p, false);
    for (std::size_t v : m.visible) {
        if (v >= p) throw std::invalid_argument("cwm: visible patch index out of range");
        vis[v] = true;
    }
    for (std::size_t i = 0; i < p; ++i)
        if (!vis[i]) m.masked.push_back(i);
    return m;
}

PatchMask sample_mask(const PredictorConfig& cfg, std::mt19937_64& rng) {
    const int p = cfg.patches_per_frame();
    const int k = cfg.visible_target_count();
    // uniform choice without replacement (partial Fisher-Yates)
    std::vector<std::size_t> pool(p);
    std::iota(pool.begin(), pool.end(), 0);
    for (int i = 0; i < k; ++i) {
        std::uniform_int_distribution<int> dist(i, p - 1);
        std::swap(pool[i], pool[dist(rng)]);
    }
    return mask_from_visible(cfg, {pool.begin(), pool.begin() + k});
}

std::vector<float> patchify(const Frame& frame, int patch_size) {
    if (frame.h != frame.w || frame.h % patch_size != 0)
        throw std::invalid_argument("cwm: patchify: frame " + std::to_string(frame.h) + "x" +
                                    std::to_string(frame.w) + " not divisible by patch size " +
                                    std::to_string(patch_size));
    const int g = frame.h / patch_size;
    const int pd = patch_size * patch_size * 3;
    std::vector<float> out(std::size_t(g) * g * pd);
    for (int pr = 0; pr < g; ++pr)
        for (int pc = 0; pc < g; ++pc) {
            float* dst = out.data() + (std::size_t(pr) * g + pc) * pd;
            for (int i = 0; i < patch_size; ++i)
                for (int j = 0; j < patch_size; ++j)
                    for (int ch = 0; ch < 3; ++ch)
                        dst[(i * patch_size + j) * 3 + ch] =
                            frame.at(pr * patch_size + i, pc * patch_size + j, ch);
        }
    return out;
}

Frame unpatchify(const std::vector<float>& patches, int image_size, int patch_size) {
    const int g = image_size / patch_size;
    const int pd = patch_size * patch_size * 3;
    if (patches.size() != std::size_t(g) * g * pd)
        throw std::invalid_argument("cwm: unpatchify: patch buffer size mismatch");
    Frame f(image_size, image_size);
    for (int pr = 0; pr < g; ++pr)
        for (int pc = 0; pc < g; ++pc) {
            const float* src = patches.data() + (std::size_t(pr) * g + pc) * pd;
            for (int i = 0; i < patch_size; ++i)
                for (int j = 0; j < patch_size; ++j)
                    for (int ch = 0; ch < 3; ++ch)
                        f.at(pr * patch_size + i, pc * patch_size + j, ch) =
                            src[(i * patch_size + j) * 3 + ch];
        }
    return f;
}

// ---------------------------------------------------------------------------
// Positional tables
// ---------------------------------------------------------------------------

namespace {

void sincos_1d(double pos, int dim, float* out) {
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double omega = 1.0 / std::pow(10000.0, double(2 * i) / double(dim));
        out[i] = float(std::sin(pos * omega));
        out[half + i] = float(std::cos(pos * omega));
    }
}

// Per frame slot: concat(row sincos, col sincos) plus a temporal sincos of the
// frame index, which keeps every spatiotemporal position unique.
std::vector<float> make_pos_table(int n_frames, int grid, int dim) {
    std::vector<float> table(std::size_t(n_frames) * grid * grid * dim, 0.f);
    std::vector<float> tpart(dim);
    std::vector<float> rpart(dim / 2), cpart(dim / 2);
    for (int f = 0; f < n_frames; ++f) {
        sincos_1d(double(f), dim, tpart.data());
        for (int r = 0; r < grid; ++r)
            for (int c = 0; c < grid; ++c) {
                sincos_1d(double(r), dim / 2, rpart.data());
                sincos_1d(double(c), dim / 2, cpart.data());
                float* dst =
                    table.data() + ((std::size_t(f) * grid + r) * grid + c) * dim;
                for (int i = 0; i < dim / 2; ++i) dst[i] = rpart[i] + tpart[i];
                for (int i = 0; i < dim / 2; ++i) dst[dim / 2 + i] = cpart[i] + tpart[dim / 2 + i];
            }
    }
    return table;
}

TensorF resize_table(const TensorF& table, int n_frames, int old_grid, int new_grid) {
    const int dim = int(table.shape()[1]);
    std::vector<float> out(std::size_t(n_frames) * new_grid * new_grid * dim);
    const float* src = table.data().data();
    for (int f = 0; f < n_frames; ++f)
        for (int r = 0; r < new_grid; ++r)
            for (int c = 0; c < new_grid; ++c) {
                // aligned corners: endpoints map exactly onto endpoints
                const double sr = new_grid > 1
                                      ? double(r) * (old_grid - 1) / double(new_grid - 1)
                                      : 0.0;
                const double sc = new_grid > 1
                                      ? double(c) * (old_grid - 1) / double(new_grid - 1)
                                      : 0.0;
                const int r0 = std::min(old_grid - 2, std::max(0, int(sr)));
                const int c0 = std::min(old_grid - 2, std::max(0, int(sc)));
                const double fr = sr - r0, fc = sc - c0;
                float* dst = out.data() + ((std::size_t(f) * new_grid + r) * new_grid + c) * dim;
                const auto at = [&](int rr, int cc) {
                    return src + ((std::size_t(f) * old_grid + rr) * old_grid + cc) * dim;
                };
                const float* p00 = at(r0, c0);
                const float* p01 = at(r0, c0 + 1);
                const float* p10 = at(r0 + 1, c0);
                const float* p11 = at(r0 + 1, c0 + 1);
                for (int i = 0; i < dim; ++i)
                    dst[i] = float((p00[i] * (1 - fc) + p01[i] * fc) * (1 - fr) +
                                   (p10[i] * (1 - fc) + p11[i] * fc) * fr);
            }
    return TensorF({std::size_t(n_frames) * new_grid * new_grid, std::size_t(dim)},
                   std::move(out));
}

TensorF ones_vec(std::size_t d) { return TensorF({d}, 1.0f, true); }
TensorF zeros_vec(std::size_t d) { return TensorF({d}, 0.0f, true); }

PredictorState::Block init_block(int dim, int mlp_ratio, std::mt19937_64& rng) {
    PredictorState::Block b;
    const std::size_t d = dim, h = std::size_t(dim) * mlp_ratio;
    b.ln1_g = ones_vec(d);
    b.ln1_b = zeros_vec(d);
    b.qkv_w = xavier_uniform<float>({d, 3 * d}, d, 3 * d, rng);
    b.qkv_b = zeros_vec(3 * d);
    b.proj_w = xavier_uniform<float>({d, d}, d, d, rng);
    b.proj_b = zeros_vec(d);
    b.ln2_g = ones_vec(d);
    b.ln2_b = zeros_vec(d);
    b.mlp1_w = xavier_uniform<float>({d, h}, d, h, rng);
    b.mlp1_b = zeros_vec(h);
    b.mlp2_w = xavier_uniform<float>({h, d}, h, d, rng);
    b.mlp2_b = zeros_vec(d);
    return b;
}

TensorF vit_block(const TensorF& x, const PredictorState::Block& blk, int heads) {
    const std::size_t B = x.shape()[0], L = x.shape()[1], D = x.shape()[2];
    const std::size_t H = heads, Dh = D / H;

    auto h = layernorm_last(x, blk.ln1_g, blk.ln1_b);
    auto qkv = add(matmul(h, blk.qkv_w), blk.qkv_b);           // (B,L,3D)
    qkv = reshape(qkv, {B, L, 3, H, Dh});
    qkv = transpose(qkv, {2, 0, 3, 1, 4});                     // (3,B,H,L,Dh)
    qkv = reshape(qkv, {3, B * H, L, Dh});
    auto pick = [&](std::size_t which) {
        return reshape(gather_axis(qkv, 0, {which}), {B * H, L, Dh});
    };
    auto q = pick(0), k = pick(1), v = pick(2);

    auto attn = scale(matmul(q, k, false, true), 1.0f / std::sqrt(float(Dh)));
    attn = softmax_last(attn);                                 // (BH,L,L)
    auto o = matmul(attn, v);                                  // (BH,L,Dh)
    o = reshape(o, {B, H, L, Dh});
    o = transpose(o, {0, 2, 1, 3});
    o = reshape(o, {B, L, D});
    o = add(matmul(o, blk.proj_w), blk.proj_b);

    auto x1 = add(x, o);
    auto m = layernorm_last(x1, blk.ln2_g, blk.ln2_b);
    m = gelu(add(matmul(m, blk.mlp1_w), blk.mlp1_b));
    m = add(matmul(m, blk.mlp2_w), blk.mlp2_b);
    return add(x1, m);
}

void push_block(std::vector<std::pair<std::string, TensorF>>& out, const std::string& prefix,
                const PredictorState::Block& b) {
    out.emplace_back(prefix + ".ln1_g", b.ln1_g);
    out.emplace_back(prefix + ".ln1_b", b.ln1_b);
    out.emplace_back(prefix + ".qkv_w", b.qkv_w);
    out.emplace_back(prefix + ".qkv_b", b.qkv_b);
    out.emplace_back(prefix + ".proj_w", b.proj_w);
    out.emplace_back(prefix + ".proj_b", b.proj_b);
    out.emplace_back(prefix + ".ln2_g", b.ln2_g);
    out.emplace_back(prefix + ".ln2_b", b.ln2_b);
    out.emplace_back(prefix + ".mlp1_w", b.mlp1_w);
    out.emplace_back(prefix + ".mlp1_b", b.mlp1_b);
    out.emplace_back(prefix + ".mlp2_w", b.mlp2_w);
    out.emplace_back(prefix + ".mlp2_b", b.mlp2_b);
}

}  // namespace

// ---------------------------------------------------------------------------
// PredictorState
// ---------------------------------------------------------------------------

PredictorState PredictorState::init(const PredictorConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng = make_rng(seed, 0x9d1c70f);

    PredictorState st;
    st.cfg = cfg;
    const std::size_t pd = cfg.patch_dim(), D = cfg.encoder_dim, Dd = cfg.decoder_dim;

    st.patch_embed_w = xavier_uniform<float>({pd, D}, pd, D, rng);
    st.patch_embed_b = zeros_vec(D);
    for (int i = 0; i < cfg.encoder_depth; ++i)
        st.enc_blocks.push_back(init_block(cfg.encoder_dim, cfg.mlp_ratio, rng));
    st.enc_norm_g = ones_vec(D);
    st.enc_norm_b = zeros_vec(D);
    st.enc2dec_w = xavier_uniform<float>({D, Dd}, D, Dd, rng);
    st.enc2dec_b = zeros_vec(Dd);
    st.mask_token = TensorF({Dd}, 0.0f, true);
    for (int i = 0; i < cfg.decoder_depth; ++i)
        st.dec_blocks.push_back(init_block(cfg.decoder_dim, cfg.mlp_ratio, rng));
    st.dec_norm_g = ones_vec(Dd);
    st.dec_norm_b = zeros_vec(Dd);
    // zero-initialized head: the first prediction is identically zero
    st.head_w = TensorF({Dd, pd}, 0.0f, true);
    st.head_b = TensorF({pd}, 0.0f, true);

    st.pos_enc = TensorF({std::size_t(cfg.total_patches()), D},
                         make_pos_table(cfg.n_frames(), cfg.grid(), cfg.encoder_dim));
    st.pos_dec = TensorF({std::size_t(cfg.total_patches()), Dd},
                         make_pos_table(cfg.n_frames(), cfg.grid(), cfg.decoder_dim));
    return st;
}

std::vector<TensorF> PredictorState::parameters() const {
    std::vector<TensorF> out;
    for (const auto& [name, t] : named_tensors())
        if (name != "pos_enc" && name != "pos_dec") out.push_back(t);
    return out;
}

std::vector<std::pair<std::string, TensorF>> PredictorState::named_tensors() const {
    std::vector<std::pair<std::string, TensorF>> out;
    out.emplace_back("patch_embed.w", patch_embed_w);
    out.emplace_back("patch_embed.b", patch_embed_b);
    for (std::size_t i = 0; i < enc_blocks.size(); ++i)
        push_block(out, "enc." + std::to_string(i), enc_blocks[i]);
    out.emplace_back("enc_norm.g", enc_norm_g);
    out.emplace_back("enc_norm.b", enc_norm_b);
    out.emplace_back("enc2dec.w", enc2dec_w);
    out.emplace_back("enc2dec.b", enc2dec_b);
    out.emplace_back("mask_token", mask_token);
    for (std::size_t i = 0; i < dec_blocks.size(); ++i)
        push_block(out, "dec." + std::to_string(i), dec_blocks[i]);
    out.emplace_back("dec_norm.g", dec_norm_g);
    out.emplace_back("dec_norm.b", dec_norm_b);
    out.emplace_back("head.w", head_w);
    out.emplace_back("head.b", head_b);
    out.emplace_back("pos_enc", pos_enc);
    out.emplace_back("pos_dec", pos_dec);
    return out;
}

void PredictorState::save(const std::string& dir, const std::string& config_hash) const {
    save_checkpoint(dir, named_tensors(), config_hash);
}

PredictorState PredictorState::load(const std::string& dir, const PredictorConfig& cfg) {
    cfg.validate();
    const Checkpoint ck = load_checkpoint(dir);
    PredictorState st = PredictorState::init(cfg, 0);
    for (auto& [name, t] : st.named_tensors()) {
        if (!ck.has(name))
            throw std::runtime_error("cwm: checkpoint " + dir + " missing tensor '" + name +
                                     "' (config mismatch?)");
        const TensorF& src = ck.get(name);
        if (src.shape() != t.shape())
            throw std::runtime_error("cwm: checkpoint tensor '" + name + "' has shape " +
                                     shape_str(src.shape()) + " but config requires " +
                                     shape_str(t.shape()));
        std::copy(src.data().begin(), src.data().end(), t.data_mut().begin());
    }
    return st;
}

PredictorState PredictorState::inference_clone() const {
    PredictorState st;
    st.cfg = cfg;
    auto det = [](const TensorF& t) { return t.detach(); };
    st.patch_embed_w = det(patch_embed_w);
    st.patch_embed_b = det(patch_embed_b);
    for (const auto& b : enc_blocks)
        st.enc_blocks.push_back({det(b.ln1_g), det(b.ln1_b), det(b.qkv_w), det(b.qkv_b),
                                 det(b.proj_w), det(b.proj_b), det(b.ln2_g), det(b.ln2_b),
                                 det(b.mlp1_w), det(b.mlp1_b), det(b.mlp2_w), det(b.mlp2_b)});
    st.enc_norm_g = det(enc_norm_g);
    st.enc_norm_b = det(enc_norm_b);
    st.enc2dec_w = det(enc2dec_w);
    st.enc2dec_b = det(enc2dec_b);
    st.mask_token = det(mask_token);
    for (const auto& b : dec_blocks)
        st.dec_blocks.push_back({det(b.ln1_g), det(b.ln1_b), det(b.qkv_w), det(b.qkv_b),
                                 det(b.proj_w), det(b.proj_b), det(b.ln2_g), det(b.ln2_b),
                                 det(b.mlp1_w), det(b.mlp1_b), det(b.mlp2_w), det(b.mlp2_b)});
    st.dec_norm_g = det(dec_norm_g);
    st.dec_norm_b = det(dec_norm_b);
    st.head_w = det(head_w);
    st.head_b = det(head_b);
    st.pos_enc = pos_enc;
    st.pos_dec = pos_dec;
    return st;
}

PredictorState PredictorState::resized(int new_image_size) const {
    if (new_image_size <= 0 || new_image_size % cfg.patch_size != 0)
        throw std::invalid_argument("cwm: resized: image size " + std::to_string(new_image_size) +
                                    " not divisible by patch size " +
                                    std::to_string(cfg.patch_size));
    PredictorState st = *this;
    if (new_image_size == cfg.image_size) return st;
    const int old_grid = cfg.grid();
    const int new_grid = new_image_size / cfg.patch_size;
    st.cfg.image_size = new_image_size;
    st.pos_enc = resize_table(pos_enc, cfg.n_frames(), old_grid, new_grid);
    st.pos_dec = resize_table(pos_dec, cfg.n_frames(), old_grid, new_grid);
    return st;
}

TensorF PredictorState::forward(const TensorF& all_patches, const PatchMask& mask,
                                const std::vector<std::size_t>* visible_order_override) const {
    const std::size_t P = cfg.patches_per_frame();
    const std::size_t n_all = cfg.total_patches();
    const std::size_t n_ctx_tokens = std::size_t(cfg.n_context_frames) * P;
    if (all_patches.rank() != 3 || all_patches.shape()[1] != n_all ||
        all_patches.shape()[2] != std::size_t(cfg.patch_dim()))
        shape_error("predictor.forward", all_patches.shape(),
                    {0, n_all, std::size_t(cfg.patch_dim())});
    if (mask.patches_per_frame != int(P))
        throw std::invalid_argument("cwm: predictor.forward: mask does not match config");

    std::vector<std::size_t> vis_tokens;
    if (visible_order_override) {
        vis_tokens = *visible_order_override;
    } else {
        vis_tokens.resize(n_ctx_tokens);
        std::iota(vis_tokens.begin(), vis_tokens.end(), 0);
        for (std::size_t v : mask.visible) vis_tokens.push_back(n_ctx_tokens + v);
    }

    auto x = add(add(matmul(all_patches, patch_embed_w), patch_embed_b), pos_enc);
    x = gather_axis(x, 1, vis_tokens);
    for (const auto& blk : enc_blocks) x = vit_block(x, blk, cfg.encoder_heads);
    x = layernorm_last(x, enc_norm_g, enc_norm_b);
    x = add(matmul(x, enc2dec_w), enc2dec_b);

    const std::size_t B = all_patches.shape()[0];
    TensorF canvas({B, n_all, std::size_t(cfg.decoder_dim)}, 0.0f);
    auto dec_in = scatter_axis(add(canvas, mask_token), 1, vis_tokens, x);
    dec_in = add(dec_in, pos_dec);
    for (const auto& blk : dec_blocks) dec_in = vit_block(dec_in, blk, cfg.decoder_heads);
    dec_in = layernorm_last(dec_in, dec_norm_g, dec_norm_b);
    auto out = add(matmul(dec_in, head_w), head_b);

    std::vector<std::size_t> target_rows(P);
    std::iota(target_rows.begin(), target_rows.end(), n_ctx_tokens);
    return gather_axis(out, 1, target_rows);
}

Frame PredictorState::predict_frame(const std::vector<Frame>& context,
                                    const Frame& target_visible_source,
                                    const PatchMask& mask) const {
    if (int(context.size()) != cfg.n_context_frames)
        throw std::invalid_argument("cwm: predict_frame: expected " +
                                    std::to_string(cfg.n_context_frames) + " context frames, got " +
                                    std::to_string(context.size()));
    const std::size_t P = cfg.patches_per_frame();
    const std::size_t pd = cfg.patch_dim();
    std::vector<float> buf(std::size_t(cfg.total_patches()) * pd, 0.f);
    for (int f = 0; f < cfg.n_context_frames; ++f) {
        const auto patches = patchify(context[f], cfg.patch_size);
        std::copy(patches.begin(), patches.end(), buf.begin() + std::size_t(f) * P * pd);
    }
    const auto tgt = patchify(target_visible_source, cfg.patch_size);
    const std::size_t base = std::size_t(cfg.n_context_frames) * P * pd;
    for (std::size_t v : mask.visible)
        std::copy(tgt.begin() + v * pd, tgt.begin() + (v + 1) * pd, buf.begin() + base + v * pd);

    TensorF all({1, std::size_t(cfg.total_patches()), pd}, std::move(buf));
    const TensorF pred = forward(all, mask);
    std::vector<float> patches(pred.data().begin(), pred.data().end());
    return unpatchify(patches, cfg.image_size, cfg.patch_size);
}

Frame PredictorState::predict_composite(const std::vector<Frame>& context,
                                        const Frame& target_visible_source,
                                        const PatchMask& mask) const {
    Frame pred = predict_frame(context, target_visible_source, mask);
    auto patches = patchify(pred, cfg.patch_size);
    const auto truth = patchify(target_visible_source, cfg.patch_size);
    const std::size_t pd = cfg.patch_dim();
    for (std::size_t v : mask.visible)
        std::copy(truth.begin() + v * pd, truth.begin() + (v + 1) * pd,
                  patches.begin() + v * pd);
    return unpatchify(patches, cfg.image_size, cfg.patch_size);
}

std::vector<float> PredictorState::embed_frame(const Frame& frame, int layer) const {
    const std::size_t P = cfg.patches_per_frame();
    const std::size_t pd = cfg.patch_dim();
    auto patches = patchify(frame, cfg.patch_size);
    TensorF x3({1, P, pd}, std::move(patches));

    std::vector<std::size_t> slot0(P);
    std::iota(slot0.begin(), slot0.end(), 0);
    auto pos0 = gather_axis(pos_enc, 0, slot0);
    auto x = add(add(matmul(x3, patch_embed_w), patch_embed_b), pos0);
    const int last = int(enc_blocks.size()) - 1;
    const int upto = layer < 0 ? last : std::min(layer, last);
    for (int i = 0; i <= upto; ++i) x = vit_block(x, enc_blocks[i], cfg.encoder_heads);
    if (layer < 0) x = layernorm_last(x, enc_norm_g, enc_norm_b);
    return {x.data().begin(), x.data().end()};
}

std::vector<float> PredictorState::embed_pair(const std::vector<Frame>& context,
                                              const Frame& target) const {
    if (int(context.size()) != cfg.n_context_frames)
        throw std::invalid_argument("cwm: embed_pair: expected " +
                                    std::to_string(cfg.n_context_frames) + " context frames");
    const std::size_t P = cfg.patches_per_frame();
    const std::size_t pd = cfg.patch_dim();
    const std::size_t n_all = cfg.total_patches();
    std::vector<float> buf(n_all * pd);
    for (int f = 0; f < cfg.n_context_frames; ++f) {
        const auto patches = patchify(context[f], cfg.patch_size);
        std::copy(patches.begin(), patches.end(), buf.begin() + std::size_t(f) * P * pd);
    }
    const auto tgt = patchify(target, cfg.patch_size);
    std::copy(tgt.begin(), tgt.end(), buf.begin() + std::size_t(cfg.n_context_frames) * P * pd);

    TensorF x3({1, n_all, pd}, std::move(buf));
    auto x = add(add(matmul(x3, patch_embed_w), patch_embed_b), pos_enc);
    for (const auto& blk : enc_blocks) x = vit_block(x, blk, cfg.encoder_heads);
    x = layernorm_last(x, enc_norm_g, enc_norm_b);

    std::vector<std::size_t> tgt_rows(P);
    std::iota(tgt_rows.begin(), tgt_rows.end(), std::size_t(cfg.n_context_frames) * P);
    auto out = gather_axis(x, 1, tgt_rows);
    return {out.data().begin(), out.data().end()};
}

TensorF masked_patch_mse(const TensorF& pred, const TensorF& target,
                         const std::vector<std::size_t>& masked) {
    if (pred.shape() != target.shape()) shape_error("masked_patch_mse", pred.shape(),
                                                    target.shape());
    if (masked.empty())
        throw std::invalid_argument("cwm: masked_patch_mse: empty masked set");
    auto p = gather_axis(pred, 1, masked);
    auto t = gather_axis(target, 1, masked);
    return mse(p, t);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct HoldoutItem {
    std::vector<Frame> context;
    Frame target;
    PatchMask mask;
};

double eval_masked_mse(const PredictorState& st, const HoldoutItem& item) {
    const std::size_t P = st.cfg.patches_per_frame(), pd = st.cfg.patch_dim();
    std::vector<float> buf(std::size_t(st.cfg.total_patches()) * pd, 0.f);
    for (int f = 0; f < st.cfg.n_context_frames; ++f) {
        const auto patches = patchify(item.context[f], st.cfg.patch_size);
        std::copy(patches.begin(), patches.end(), buf.begin() + std::size_t(f) * P * pd);
    }
    const auto tgt = patchify(item.target, st.cfg.patch_size);
    const std::size_t base = std::size_t(st.cfg.n_context_frames) * P * pd;
    for (std::size_t v : item.mask.visible)
        std::copy(tgt.begin() + v * pd, tgt.begin() + (v + 1) * pd, buf.begin() + base + v * pd);
    TensorF all({1, std::size_t(st.cfg.total_patches()), pd}, std::move(buf));
    const TensorF pred = st.forward(all, item.mask);
    TensorF truth({1, P, pd}, tgt);
    return masked_patch_mse(pred, truth, item.mask.masked).item();
}

double eval_copy_baseline(const PredictorConfig& cfg, const HoldoutItem& item) {
    // copy-first-frame baseline: predict the target as the last context frame
    const auto last = patchify(item.context.back(), cfg.patch_size);
    const auto tgt = patchify(item.target, cfg.patch_size);
    const std::size_t pd = cfg.patch_dim();
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t m : item.mask.masked)
        for (std::size_t i = 0; i < pd; ++i) {
            const double d = double(last[m * pd + i]) - double(tgt[m * pd + i]);
            acc += d * d;
            ++n;
        }
    return acc / double(n);
}

std::vector<float> snapshot(const std::vector<TensorF>& params) {
    std::vector<float> out;
    for (const auto& p : params) out.insert(out.end(), p.data().begin(), p.data().end());
    return out;
}

void restore(std::vector<TensorF>& params, const std::vector<float>& snap) {
    std::size_t off = 0;
    for (auto& p : params) {
        std::copy(snap.begin() + off, snap.begin() + off + p.numel(), p.data_mut().begin());
        off += p.numel();
    }
}

}  // namespace

TrainResult train_predictor(const PredictorConfig& pcfg, const WorldConfig& wcfg,
                            const TrainConfig& tcfg, const std::string& out_dir,
                            const std::string& config_hash) {
    pcfg.validate();
    if (tcfg.steps < 1) throw std::invalid_argument("cwm: train: steps must be >= 1");
    if (wcfg.frames < pcfg.n_context_frames + 1)
        throw std::invalid_argument("cwm: train: world episodes shorter than context+target");

    TrainResult result;
    result.state = PredictorState::init(pcfg, tcfg.seed);
    auto params = result.state.parameters();

    OptimConfig ocfg;
    ocfg.base_lr = tcfg.base_lr;
    ocfg.weight_decay = tcfg.weight_decay;
    ocfg.beta1 = tcfg.beta1;
    ocfg.beta2 = tcfg.beta2;
    ocfg.batch_size = tcfg.batch_size;
    ocfg.total_steps = tcfg.steps;
    ocfg.warmup_steps = std::max<long>(1, std::lround(double(tcfg.steps) * tcfg.warmup_frac));
    AdamW opt(params, ocfg);

    const std::size_t P = pcfg.patches_per_frame(), pd = pcfg.patch_dim();
    const std::size_t n_all = pcfg.total_patches();
    const int n_ctx = pcfg.n_context_frames;

    // held-out episodes live far above any training index
    std::vector<HoldoutItem> holdout;
    for (int k = 0; k < tcfg.holdout_episodes; ++k) {
        std::mt19937_64 hrng = make_rng(mix64(tcfg.seed, 0xE7A1), k);
        Episode ep;
        std::uint64_t idx = (1ULL << 40) + std::uint64_t(k);
        for (;; ++idx) {
            try {
                ep = generate_episode(wcfg, idx);
                break;
            } catch (const PlacementError&) {
            }
        }
        HoldoutItem item;
        const int t0 = std::uniform_int_distribution<int>(0, wcfg.frames - n_ctx - 1)(hrng);
        for (int f = 0; f < n_ctx; ++f) item.context.push_back(ep.frames[t0 + f]);
        item.target = ep.frames[t0 + n_ctx];
        item.mask = sample_mask(pcfg, hrng);
        holdout.push_back(std::move(item));
    }

    auto eval_row = [&](long step, double train_loss) {
        LossRow row;
        row.step = step;
        row.loss = train_loss;
        double h = 0.0, b = 0.0;
        for (const auto& item : holdout) {
            h += eval_masked_mse(result.state, item);
            b += eval_copy_baseline(pcfg, item);
        }
        row.holdout_loss = h / double(holdout.size());
        row.baseline_loss = b / double(holdout.size());
        return row;
    };

    std::vector<float> last_good = snapshot(params);
    bool aborted = false;

    for (long step = 0; step < tcfg.steps; ++step) {
        std::mt19937_64 srng = make_rng(mix64(tcfg.seed, 0x57e9), std::uint64_t(step));
        const PatchMask mask = sample_mask(pcfg, srng);

        std::vector<float> batch(std::size_t(tcfg.batch_size) * n_all * pd, 0.f);
        std::vector<float> target(std::size_t(tcfg.batch_size) * P * pd, 0.f);
        for (int b = 0; b < tcfg.batch_size; ++b) {
            std::uint64_t idx = std::uint64_t(step) * tcfg.batch_size + b;
            std::vector<Frame> frames;
            for (;; ++idx) {
                try {
                    frames = render_episode_frames(wcfg, idx);
                    break;
                } catch (const PlacementError&) {
                }
            }
            const int t0 =
                std::uniform_int_distribution<int>(0, wcfg.frames - n_ctx - 1)(srng);
            float* sample = batch.data() + std::size_t(b) * n_all * pd;
            for (int f = 0; f < n_ctx; ++f) {
                const auto patches = patchify(frames[t0 + f], pcfg.patch_size);
                std::copy(patches.begin(), patches.end(), sample + std::size_t(f) * P * pd);
            }
            const auto tgt = patchify(frames[t0 + n_ctx], pcfg.patch_size);
            std::copy(tgt.begin(), tgt.end(), target.data() + std::size_t(b) * P * pd);
            const std::size_t base = std::size_t(n_ctx) * P * pd;
            for (std::size_t v : mask.visible)
                std::copy(tgt.begin() + v * pd, tgt.begin() + (v + 1) * pd,
                          sample + base + v * pd);
        }

        TensorF all({std::size_t(tcfg.batch_size), n_all, pd}, std::move(batch));
        TensorF truth({std::size_t(tcfg.batch_size), P, pd}, std::move(target));
        const TensorF pred = result.state.forward(all, mask);
        const TensorF loss = masked_patch_mse(pred, truth, mask.masked);
        const double loss_val = loss.item();

        if (!std::isfinite(loss_val)) {
            aborted = true;
            restore(params, last_good);
            break;
        }
        backward(loss);
        if (!opt.step()) {
            aborted = true;
            restore(params, last_good);
            break;
        }
        result.completed_steps = step + 1;

        if ((step + 1) % tcfg.eval_every == 0 || step + 1 == tcfg.steps) {
            result.curve.push_back(eval_row(step + 1, loss_val));
            last_good = snapshot(params);
            if (!out_dir.empty()) {
                std::filesystem::create_directories(out_dir);
                write_loss_csv((std::filesystem::path(out_dir) / "loss.csv").string(),
                               result.curve);
            }
        }
    }
    result.aborted_nonfinite = aborted;

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        result.state.save((std::filesystem::path(out_dir) / "checkpoint").string(), config_hash);
        write_loss_csv((std::filesystem::path(out_dir) / "loss.csv").string(), result.curve);
    }
    return result;
}

void write_loss_csv(const std::string& path, const std::vector<LossRow>& curve) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cwm: cannot write " + path);
    os << "step,loss,holdout_loss,baseline_loss\n";
    char buf[160];
    for (const auto& row : curve) {
        std::snprintf(buf, sizeof(buf), "%ld,%.8g,%.8g,%.8g\n", row.step, row.loss,
                      row.holdout_loss, row.baseline_loss);
        os << buf;
    }
}

}  // namespace cwm
