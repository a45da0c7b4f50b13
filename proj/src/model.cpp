// Copyright 2026 The PIDM Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "pidm/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "pidm/sim.hpp"

namespace pidm::model {
namespace {

constexpr double kInitStd = 0.02;

int gripper_dims() { return 2; }

// --- parameter registration --------------------------------------------------

class Registry {
public:
    Registry(ParamMap<float> &params, std::uint64_t seed) : params_(params), init_(seed) {}

    void weight(const std::string &name, Shape shape, bool decay) {
        params_[name] = {init_.truncated_normal<float>(std::move(shape), kInitStd), decay};
    }
    void fill(const std::string &name, Shape shape, float value) { params_[name] = {Tensor<float>(std::move(shape), value), false}; }

    void linear(const std::string &name, int in, int out) {
        weight(name + ".w", {in, out}, true);
        fill(name + ".b", {out}, 0.0f);
    }
    void norm(const std::string &name, int dim) {
        fill(name + ".g", {dim}, 1.0f);
        fill(name + ".b", {dim}, 0.0f);
    }
    void block(const std::string &name, int dim) {
        norm(name + ".ln1", dim);
        // Keys carry no bias.
        weight(name + ".attn.qkv.w", {dim, 3 * dim}, true);
        fill(name + ".attn.q.b", {dim}, 0.0f);
        fill(name + ".attn.v.b", {dim}, 0.0f);
        linear(name + ".attn.o", dim, dim);
        norm(name + ".ln2", dim);
        linear(name + ".mlp.fc", dim, 4 * dim);
        linear(name + ".mlp.proj", 4 * dim, dim);
    }

private:
    ParamMap<float> &params_;
    Initializer init_;
};

// --- building blocks ---------------------------------------------------------

template <typename T>
Var<T> linear(Binder<T> &p, const std::string &name, Var<T> x) {
    return add(matmul(x, p(name + ".w")), p(name + ".b"));
}

template <typename T>
Var<T> norm(Binder<T> &p, const std::string &name, Var<T> x) {
    return layer_norm(x, p(name + ".g"), p(name + ".b"));
}

template <typename T>
Var<T> mlp(Binder<T> &p, const std::string &name, Var<T> x) {
    return linear(p, name + ".proj", gelu(linear(p, name + ".fc", x)));
}

// Pre-norm transformer block over x [B, L, D].
template <typename T>
Var<T> block(Binder<T> &p, const std::string &name, Var<T> x, int heads, const MaskView *mask) {
    const std::int64_t D = x.dim(-1);
    const Var<T> qkv = matmul(norm(p, name + ".ln1", x), p(name + ".attn.qkv.w"));
    const Var<T> q = add(slice(qkv, -1, 0, D), p(name + ".attn.q.b"));
    const Var<T> v = add(slice(qkv, -1, 2 * D, 3 * D), p(name + ".attn.v.b"));
    const Var<T> a = attention(q, slice(qkv, -1, D, 2 * D), v, heads, mask);
    x = add(x, linear(p, name + ".attn.o", a));
    return add(x, mlp(p, name + ".mlp", norm(p, name + ".ln2", x)));
}

// Broadcasts table [R, D] to [N, R, D].
template <typename T>
Var<T> tile(Graph<T> &g, Var<T> table, std::int64_t count) {
    return add(g.constant(Tensor<T>({count, table.dim(0), table.dim(1)})), table);
}

template <typename T>
Var<T> state_tokens(Binder<T> &p, const ModelConfig &cfg, const Tensor<T> &states) {
    const std::int64_t rows = states.dim(0);
    const int arm = cfg.state_dim - gripper_dims();
    Tensor<T> arm_part({rows, arm}), grip_part({rows, gripper_dims()});
    for (std::int64_t r = 0; r < rows; ++r) {
        for (int c = 0; c < arm; ++c) arm_part.data[r * arm + c] = states.data[r * cfg.state_dim + c];
        for (int c = 0; c < gripper_dims(); ++c)
            grip_part.data[r * gripper_dims() + c] = states.data[r * cfg.state_dim + arm + c];
    }
    Graph<T> &g = p.graph();
    const Var<T> a = linear(p, "state.arm", g.constant(std::move(arm_part)));
    const Var<T> b = linear(p, "state.grip", g.constant(std::move(grip_part)));
    return linear(p, "state.out", concat<T>({a, b}, -1));
}

std::string block_name(const std::string &prefix, int i) { return prefix + ".l" + std::to_string(i); }

} // namespace

// --- configuration -------------------------------------------------------------

ModelConfig preset(const std::string &name) {
    ModelConfig c;
    c.preset = name;
    c.vocab = sim::instruction_vocabulary();
    if (name == "toy") return c;
    if (name == "tiny") {
        c.embed_dim = 16;
        c.layers = 1;
        c.heads = 1;
        c.latents = 1;
        c.resampler_dim = 16;
        c.resampler_layers = 1;
        c.resampler_heads = 1;
        c.decoder_dim = 16;
        c.decoder_layers = 1;
        c.decoder_heads = 1;
        c.action_hidden = 16;
        c.image_side = 8;
        c.patch = 4;
        c.history = 2;
        c.chunk = 3;
        return c;
    }
    if (name == "paper") {
        c.embed_dim = 384;
        c.layers = 24;
        c.heads = 12;
        c.latents = 9;
        c.resampler_dim = 768;
        c.resampler_layers = 3;
        c.resampler_heads = 8;
        c.decoder_dim = 384;
        c.decoder_layers = 2;
        c.decoder_heads = 16;
        c.action_hidden = 384;
        c.history = 7;
        c.chunk = 3;
        c.arm_dim = 6;
        c.state_dim = 8;
        return c;
    }
    throw Error("unknown preset '" + name + "' (expected tiny, toy or paper)");
}

void validate(const ModelConfig &c) {
    auto need = [](bool ok, const std::string &what) {
        if (!ok) throw Error("invalid model config: " + what);
    };
    need(c.embed_dim > 0 && c.layers >= 1 && c.heads > 0, "backbone sizes must be positive");
    need(c.embed_dim % c.heads == 0, "embed dim must be divisible by heads");
    need(c.resampler_dim > 0 && c.resampler_heads > 0 && c.resampler_dim % c.resampler_heads == 0,
         "resampler dim must be divisible by resampler heads");
    need(c.resampler_dim % 4 == 0 && c.decoder_dim % 4 == 0, "resampler and decoder dims must be divisible by 4");
    need(c.decoder_dim > 0 && c.decoder_heads > 0 && c.decoder_dim % c.decoder_heads == 0,
         "decoder dim must be divisible by decoder heads");
    need(c.resampler_layers >= 1 && c.decoder_layers >= 1, "resampler and decoder need at least one layer");
    need(c.patch > 0 && c.image_side > 0 && c.image_side % c.patch == 0, "patch size must divide image side");
    need(sim::kImageSide % c.image_side == 0, "image side must divide the rendered side 32");
    need(c.latents >= 1 && c.latents < c.patches_per_view(), "latents must be positive and below the patch count");
    need(c.history >= 1, "history m must be >= 1");
    need(c.chunk >= 1, "chunk n must be >= 1");
    need(c.views == 2, "exactly two views are supported");
    need(c.arm_dim >= 1 && c.state_dim > gripper_dims(), "arm and state dims too small");
    need(c.action_hidden > 0, "action hidden size must be positive");
    need(!c.vocab.empty(), "vocabulary is empty");
}

std::vector<std::string> architecture_mismatch(const ModelConfig &a, const ModelConfig &b) {
    std::vector<std::string> out;
    auto cmp = [&](const char *field, auto x, auto y) {
        if (x != y) {
            std::ostringstream s;
            s << field << " (" << x << " vs " << y << ")";
            out.push_back(s.str());
        }
    };
    cmp("embed dim", a.embed_dim, b.embed_dim);
    cmp("layers", a.layers, b.layers);
    cmp("heads", a.heads, b.heads);
    cmp("latents", a.latents, b.latents);
    cmp("resampler dim", a.resampler_dim, b.resampler_dim);
    cmp("resampler layers", a.resampler_layers, b.resampler_layers);
    cmp("resampler heads", a.resampler_heads, b.resampler_heads);
    cmp("decoder dim", a.decoder_dim, b.decoder_dim);
    cmp("decoder layers", a.decoder_layers, b.decoder_layers);
    cmp("decoder heads", a.decoder_heads, b.decoder_heads);
    cmp("action hidden", a.action_hidden, b.action_hidden);
    cmp("image side", a.image_side, b.image_side);
    cmp("patch", a.patch, b.patch);
    cmp("history", a.history, b.history);
    cmp("chunk", a.chunk, b.chunk);
    cmp("arm dim", a.arm_dim, b.arm_dim);
    cmp("state dim", a.state_dim, b.state_dim);
    if (a.vocab != b.vocab) out.push_back("vocab");
    return out;
}

// --- layout and mask -------------------------------------------------------------

int TokenLayout::group_offset(Group g) const {
    switch (g) {
    case Group::goal: return 0;
    case Group::img: return 1;
    case Group::state: return 1 + 2 * k;
    case Group::frs: return 2 + 2 * k;
    case Group::inv: return 4 + 2 * k;
    }
    return 0;
}

int TokenLayout::group_size(Group g) const {
    switch (g) {
    case Group::goal:
    case Group::state: return 1;
    case Group::img: return 2 * k;
    case Group::frs: return 2;
    case Group::inv: return n;
    }
    return 0;
}

int TokenLayout::index(int timestep, Group g, int offset) const {
    if (timestep < 0 || timestep >= m || offset < 0 || offset >= group_size(g)) throw Error("token slot out of range");
    return timestep * width() + group_offset(g) + offset;
}

TokenSlot TokenLayout::slot(int index) const {
    if (index < 0 || index >= length()) throw Error("token index out of range");
    const int t = index / width();
    const int r = index % width();
    for (Group g : {Group::inv, Group::frs, Group::state, Group::img, Group::goal})
        if (r >= group_offset(g)) return {t, g, r - group_offset(g)};
    return {};
}

TokenLayout layout(const ModelConfig &cfg) { return {cfg.history, cfg.latents, cfg.chunk}; }

AttentionMask build_mask(const ModelConfig &cfg) {
    const TokenLayout lay = layout(cfg);
    const int L = lay.length();
    const bool pre = cfg.mode == Mode::pretrain;
    AttentionMask mask{L, std::vector<std::uint8_t>(static_cast<std::size_t>(L) * L, 0)};
    auto is_input = [](Group g) { return g == Group::goal || g == Group::img || g == Group::state; };
    for (int q = 0; q < L; ++q) {
        const TokenSlot a = lay.slot(q);
        for (int k = 0; k < L; ++k) {
            const TokenSlot b = lay.slot(k);
            // Inputs are visible causally in finetuning and only within the
            // same timestep in pretraining.
            const bool input_visible = is_input(b.group) && (pre ? b.timestep == a.timestep : b.timestep <= a.timestep);
            bool ok = q == k || input_visible;
            if (a.group == Group::inv && b.group == Group::frs && b.timestep == a.timestep && !cfg.detach_frs) ok = true;
            mask.allowed[static_cast<std::size_t>(q) * L + k] = ok ? 1 : 0;
        }
    }
    return mask;
}

// --- parameters ------------------------------------------------------------------

ParamMap<float> init_params(const ModelConfig &c, std::uint64_t seed) {
    validate(c);
    ParamMap<float> params;
    Registry r(params, seed);
    const int d = c.embed_dim, dr = c.resampler_dim, dd = c.decoder_dim;
    const int P = c.patches_per_view();

    r.linear("img.patch", c.patch_values(), dr);
    r.weight("img.pos", {P, dr}, false);
    r.weight("img.view", {2, d}, false);
    r.weight("resampler.latents", {c.latents, dr}, false);
    for (int i = 0; i < c.resampler_layers; ++i) {
        const std::string b = block_name("resampler", i);
        r.norm(b + ".ln_media", dr);
        r.norm(b + ".ln_latent", dr);
        r.linear(b + ".attn.q", dr, dr);
        r.weight(b + ".attn.kv.w", {dr, 2 * dr}, true);
        r.fill(b + ".attn.v.b", {dr}, 0.0f);
        r.linear(b + ".attn.o", dr, dr);
        r.norm(b + ".ln_ff", dr);
        r.linear(b + ".mlp.fc", dr, 4 * dr);
        r.linear(b + ".mlp.proj", 4 * dr, dr);
    }
    r.norm("resampler.ln_out", dr);
    r.linear("img.out", dr, d);

    const int arm_state = c.state_dim - gripper_dims();
    r.linear("state.arm", arm_state, d);
    r.linear("state.grip", gripper_dims(), d);
    r.linear("state.out", 2 * d, d);
    r.weight("lang.embed", {c.vocab_size(), d}, false);
    r.linear("lang.proj", d, d);

    r.weight("readout.frs", {2, d}, false);
    r.weight("readout.inv", {c.chunk, d}, false);
    r.weight("pos.time", {c.history, d}, false);

    for (int i = 0; i < c.layers; ++i) r.block(block_name("backbone", i), d);
    r.norm("backbone.ln_f", d);

    r.linear("dec.in", d, dd);
    r.weight("dec.mask_token", {dd}, false);
    for (int i = 0; i < c.decoder_layers; ++i) r.block(block_name("dec", i), dd);
    r.norm("dec.ln_f", dd);
    r.linear("dec.head", dd, c.patch_values());

    r.linear("act.fc1", d, c.action_hidden);
    r.linear("act.fc2", c.action_hidden, c.action_hidden);
    r.linear("act.arm", c.action_hidden, c.arm_dim);
    r.linear("act.grip", c.action_hidden, 1);
    return params;
}

bool is_encoder_param(const std::string &name) {
    return name.starts_with("img.") || name.starts_with("resampler.") || name.starts_with("lang.");
}

bool is_image_decoder_param(const std::string &name) { return name.starts_with("dec."); }

// --- batching ----------------------------------------------------------------------

template <typename T>
std::vector<T> patchify(const std::uint8_t *image, int source_side, int side, int patch) {
    if (source_side % side != 0 || side % patch != 0) throw Error("patchify: sizes do not tile");
    const int f = source_side / side;
    const int grid = side / patch;
    std::vector<T> out(static_cast<std::size_t>(side) * side * 3);
    const double norm = 1.0 / (255.0 * f * f);
    std::size_t i = 0;
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx)
            for (int py = 0; py < patch; ++py)
                for (int px = 0; px < patch; ++px) {
                    const int y = gy * patch + py, x = gx * patch + px;
                    if (f == 1) {
                        const std::uint8_t *px_in = image + (y * source_side + x) * 3;
                        for (int ch = 0; ch < 3; ++ch) out[i++] = static_cast<T>(px_in[ch] * norm);
                        continue;
                    }
                    for (int ch = 0; ch < 3; ++ch) {
                        int acc = 0;
                        for (int sy = 0; sy < f; ++sy)
                            for (int sx = 0; sx < f; ++sx)
                                acc += image[((y * f + sy) * source_side + (x * f + sx)) * 3 + ch];
                        out[i++] = static_cast<T>(acc * norm);
                    }
                }
    return out;
}

template <typename T>
std::vector<T> unpatchify(std::span<const T> patches, int side, int patch) {
    const int grid = side / patch;
    if (patches.size() != static_cast<std::size_t>(side) * side * 3) throw Error("unpatchify: size mismatch");
    std::vector<T> out(patches.size());
    std::size_t i = 0;
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx)
            for (int py = 0; py < patch; ++py)
                for (int px = 0; px < patch; ++px)
                    for (int ch = 0; ch < 3; ++ch)
                        out[((gy * patch + py) * side + gx * patch + px) * 3 + ch] = patches[i++];
    return out;
}

template <typename T>
std::vector<T> word_weights(const ModelConfig &cfg, const std::string &instruction) {
    std::vector<T> w(cfg.vocab.size(), T(0));
    std::istringstream ss(instruction);
    std::string word;
    int count = 0;
    while (ss >> word) {
        const auto it = std::lower_bound(cfg.vocab.begin(), cfg.vocab.end(), word);
        if (it == cfg.vocab.end() || *it != word) throw Error("unknown instruction word '" + word + "'");
        w[static_cast<std::size_t>(it - cfg.vocab.begin())] += T(1);
        ++count;
    }
    if (count == 0) throw Error("empty instruction");
    for (auto &v : w) v /= static_cast<T>(count);
    return w;
}

template <typename T>
Batch<T> make_batch(const ModelConfig &cfg, const std::vector<data::TrainingWindow> &windows,
                    const BatchOptions &opts) {
    if (windows.empty()) throw Error("make_batch: no windows");
    const auto B = static_cast<std::int64_t>(windows.size());
    const int m = cfg.history, n = cfg.chunk, P = cfg.patches_per_view(), pv = cfg.patch_values();
    Batch<T> b;
    b.batch = static_cast<int>(B);
    b.m = m;
    b.n = n;
    b.mode = cfg.mode;
    b.has_targets = opts.targets;
    b.patches = Tensor<T>({B * m * 2, P, pv});
    b.states = Tensor<T>({B * m, cfg.state_dim});
    if (cfg.mode == Mode::pretrain) b.goal_states = Tensor<T>({B, cfg.state_dim});
    else b.word_weights = Tensor<T>({B, cfg.vocab_size()});
    if (opts.targets) {
        b.target_patches = Tensor<T>({B * m * 2, P, pv});
        b.target_arm = Tensor<T>({B * m * n, cfg.arm_dim});
        b.target_gripper = Tensor<T>({B * m * n, 1});
    }
    b.valid.assign(static_cast<std::size_t>(B * m), 0);

    const std::size_t image_values = static_cast<std::size_t>(P) * pv;
    for (std::int64_t i = 0; i < B; ++i) {
        const auto &w = windows[i];
        const Trajectory &tr = *w.traj;
        if (w.mode != cfg.mode) throw Error("make_batch: window mode " + data::mode_name(w.mode) +
                                            " does not match model mode " + data::mode_name(cfg.mode));
        if (w.m != m || w.n != n) throw Error("make_batch: window m/n differ from config");
        if (tr.state_dim != cfg.state_dim) throw Error("make_batch: trajectory state_dim differs from config");
        if (tr.height != sim::kImageSide || tr.width != sim::kImageSide || tr.views != 2)
            throw Error("make_batch: unexpected image geometry");
        if (opts.targets && tr.action_dim != cfg.arm_dim + 1)
            throw Error("make_batch: trajectory action_dim differs from arm_dim + 1");
        if (cfg.mode == Mode::pretrain) {
            std::copy(w.goal_state.begin(), w.goal_state.end(), b.goal_states.data.begin() + i * cfg.state_dim);
        } else {
            if (!w.instruction) throw Error("make_batch: finetune window without instruction");
            const auto ww = word_weights<T>(cfg, *w.instruction);
            std::copy(ww.begin(), ww.end(), b.word_weights.data.begin() + i * cfg.vocab_size());
        }
        for (int j = 0; j < m; ++j) {
            const std::int64_t row = i * m + j;
            const int tau = w.history[j];
            for (int v = 0; v < 2; ++v) {
                const auto px = patchify<T>(tr.image(tau, v), tr.height, cfg.image_side, cfg.patch);
                std::copy(px.begin(), px.end(), b.patches.data.begin() + (row * 2 + v) * image_values);
            }
            const float *s = tr.state(tau);
            std::copy(s, s + cfg.state_dim, b.states.data.begin() + row * cfg.state_dim);
            const bool valid = w.valid[j] && (!opts.last_only || j == m - 1);
            b.valid[row] = valid ? 1 : 0;
            if (!opts.targets || !valid) continue;
            for (int v = 0; v < 2; ++v) {
                const auto px = patchify<T>(tr.image(w.foresight_step(j), v), tr.height, cfg.image_side, cfg.patch);
                std::copy(px.begin(), px.end(), b.target_patches.data.begin() + (row * 2 + v) * image_values);
            }
            for (int s2 = 0; s2 < n; ++s2) {
                const float *a = tr.action(w.action_step(j) + s2);
                const std::int64_t r = row * n + s2;
                for (int c = 0; c < cfg.arm_dim; ++c) b.target_arm.data[r * cfg.arm_dim + c] = a[c];
                b.target_gripper.data[r] = a[cfg.arm_dim];
            }
        }
    }
    return b;
}

// --- network -----------------------------------------------------------------------

template <typename T>
Var<T> resample(const ModelConfig &cfg, Binder<T> &p, Var<T> media) {
    Graph<T> &g = p.graph();
    const std::int64_t N = media.dim(0), D = media.dim(2);
    Var<T> lat = tile(g, p("resampler.latents"), N);
    for (int i = 0; i < cfg.resampler_layers; ++i) {
        const std::string b = block_name("resampler", i);
        const Var<T> x = norm(p, b + ".ln_media", media);
        const Var<T> l = norm(p, b + ".ln_latent", lat);
        const Var<T> kv = matmul(concat<T>({x, l}, 1), p(b + ".attn.kv.w"));
        const Var<T> q = linear(p, b + ".attn.q", l);
        const Var<T> v = add(slice(kv, -1, D, 2 * D), p(b + ".attn.v.b"));
        const Var<T> a = attention(q, slice(kv, -1, 0, D), v, cfg.resampler_heads);
        lat = add(lat, linear(p, b + ".attn.o", a));
        lat = add(lat, mlp(p, b + ".mlp", norm(p, b + ".ln_ff", lat)));
    }
    return norm(p, "resampler.ln_out", lat);
}

template <typename T>
Var<T> tokenize(const ModelConfig &cfg, Binder<T> &p, const Batch<T> &batch) {
    Graph<T> &g = p.graph();
    const std::int64_t B = batch.batch, m = cfg.history, k = cfg.latents, d = cfg.embed_dim;
    const std::int64_t rows = B * m;
    const TokenLayout lay = layout(cfg);
    if (batch.m != cfg.history || batch.n != cfg.chunk) throw Error("tokenize: batch m/n differ from config");
    if (batch.mode != cfg.mode) throw Error("tokenize: batch mode differs from model mode");

    // Image tokens: shared patch embedding and resampler for both views.
    // Learned position offsets on top of fixed 2D sin-cos positions.
    const auto table = sincos_2d(cfg.image_side / cfg.patch, cfg.resampler_dim);
    Tensor<T> fixed({cfg.patches_per_view(), cfg.resampler_dim});
    std::transform(table.begin(), table.end(), fixed.data.begin(), [](double v) { return static_cast<T>(v); });
    const Var<T> pos = add(p("img.pos"), g.constant(std::move(fixed)));
    const Var<T> patches = add(linear(p, "img.patch", g.constant(batch.patches)), pos);
    Var<T> img = linear(p, "img.out", resample(cfg, p, patches)); // [rows*2, k, d]
    img = reshape(img, {rows, 2 * k, d});
    std::vector<std::int64_t> view_ids;
    for (int v = 0; v < 2; ++v)
        for (std::int64_t j = 0; j < k; ++j) view_ids.push_back(v);
    img = add(img, index_select(p("img.view"), std::span<const std::int64_t>(view_ids)));

    const Var<T> state = reshape(state_tokens(p, cfg, batch.states), {rows, 1, d});

    Var<T> goal;
    if (cfg.mode == Mode::pretrain) {
        goal = state_tokens(p, cfg, batch.goal_states);
    } else {
        if (batch.word_weights.size() == 0) throw Error("tokenize: instruction absent in finetune batch");
        goal = linear(p, "lang.proj", matmul(g.constant(batch.word_weights), p("lang.embed")));
    }
    std::vector<std::int64_t> per_row;
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t j = 0; j < m; ++j) per_row.push_back(b);
    goal = reshape(index_select(goal, std::span<const std::int64_t>(per_row)), {rows, 1, d});

    const Var<T> frs = tile(g, p("readout.frs"), rows);
    const Var<T> inv = tile(g, p("readout.inv"), rows);
    Var<T> seq = concat<T>({goal, img, state, frs, inv}, 1); // [rows, W, d]

    std::vector<std::int64_t> time_ids;
    for (std::int64_t t = 0; t < m; ++t)
        for (int w = 0; w < lay.width(); ++w) time_ids.push_back(t);
    const Var<T> time = reshape(index_select(p("pos.time"), std::span<const std::int64_t>(time_ids)),
                                {m, lay.width(), d});
    seq = add(reshape(seq, {B, m, lay.width(), d}), time);
    return reshape(seq, {B, m * lay.width(), d});
}

template <typename T>
Readouts<T> forward(const ModelConfig &cfg, Binder<T> &p, const Batch<T> &batch, const AttentionMask &mask,
                    const Tensor<T> *token_delta) {
    const TokenLayout lay = layout(cfg);
    if (mask.length != lay.length()) throw Error("forward: mask size does not match layout");
    const std::int64_t B = batch.batch, m = cfg.history, d = cfg.embed_dim, W = lay.width();
    Readouts<T> out;
    out.tokens = tokenize(cfg, p, batch);
    Var<T> x = out.tokens;
    if (token_delta != nullptr) x = add(x, p.graph().constant(*token_delta));
    const MaskView mv = mask.view();
    for (int i = 0; i < cfg.layers; ++i) x = block(p, block_name("backbone", i), x, cfg.heads, &mv);
    x = reshape(norm(p, "backbone.ln_f", x), {B * m, W, d});
    const int f0 = lay.group_offset(Group::frs), i0 = lay.group_offset(Group::inv);
    out.frs = reshape(slice(x, 1, f0, f0 + 2), {B, m, 2, d});
    out.inv = reshape(slice(x, 1, i0, i0 + cfg.chunk), {B, m, cfg.chunk, d});
    return out;
}

template <typename T>
ActionOutputs<T> decode_actions(const ModelConfig &, Binder<T> &p, Var<T> rows) {
    const Var<T> h = relu(linear(p, "act.fc2", relu(linear(p, "act.fc1", rows))));
    return {tanh(linear(p, "act.arm", h)), sigmoid(linear(p, "act.grip", h))};
}

std::vector<double> sincos_2d(int grid, int dim) {
    if (dim % 4 != 0) throw Error("sincos_2d: dim must be divisible by 4");
    const int quarter = dim / 4;
    std::vector<double> table(static_cast<std::size_t>(grid) * grid * dim);
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            double *row = table.data() + (static_cast<std::size_t>(gy) * grid + gx) * dim;
            for (int i = 0; i < quarter; ++i) {
                const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / quarter);
                row[i] = std::sin(gy * omega);
                row[quarter + i] = std::cos(gy * omega);
                row[2 * quarter + i] = std::sin(gx * omega);
                row[3 * quarter + i] = std::cos(gx * omega);
            }
        }
    return table;
}

template <typename T>
Var<T> decode_images(const ModelConfig &cfg, Binder<T> &p, Var<T> rows) {
    Graph<T> &g = p.graph();
    const std::int64_t N = rows.dim(0), dd = cfg.decoder_dim, P = cfg.patches_per_view();
    const Var<T> latent = reshape(linear(p, "dec.in", rows), {N, 1, dd});
    const auto table = sincos_2d(cfg.image_side / cfg.patch, cfg.decoder_dim);
    Tensor<T> pos({P, dd});
    std::transform(table.begin(), table.end(), pos.data.begin(), [](double v) { return static_cast<T>(v); });
    const Var<T> masks = tile(g, add(g.constant(std::move(pos)), p("dec.mask_token")), N);
    Var<T> x = concat<T>({latent, masks}, 1);
    for (int i = 0; i < cfg.decoder_layers; ++i) x = block(p, block_name("dec", i), x, cfg.decoder_heads, nullptr);
    x = slice(norm(p, "dec.ln_f", x), 1, 1, P + 1);
    return linear(p, "dec.head", x);
}

#define PIDM_INSTANTIATE_MODEL(T)                                                                                 \
    template std::vector<T> patchify<T>(const std::uint8_t *, int, int, int);                                    \
    template std::vector<T> unpatchify<T>(std::span<const T>, int, int);                                         \
    template std::vector<T> word_weights<T>(const ModelConfig &, const std::string &);                          \
    template Batch<T> make_batch<T>(const ModelConfig &, const std::vector<data::TrainingWindow> &,               \
                                    const BatchOptions &);                                                       \
    template Var<T> resample<T>(const ModelConfig &, Binder<T> &, Var<T>);                                       \
    template Var<T> tokenize<T>(const ModelConfig &, Binder<T> &, const Batch<T> &);                             \
    template Readouts<T> forward<T>(const ModelConfig &, Binder<T> &, const Batch<T> &, const AttentionMask &,  \
                                    const Tensor<T> *);                                                          \
    template ActionOutputs<T> decode_actions<T>(const ModelConfig &, Binder<T> &, Var<T>);                       \
    template Var<T> decode_images<T>(const ModelConfig &, Binder<T> &, Var<T>);

PIDM_INSTANTIATE_MODEL(float)
PIDM_INSTANTIATE_MODEL(double)

} // namespace pidm::model
