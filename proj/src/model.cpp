#include "defectgen/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "defectgen/kernels.hpp"
#include "defectgen/rng.hpp"

namespace defectgen {

using nlohmann::json;

ModelConfig ModelConfig::tiny_ae_defaults() {
    ModelConfig c;
    c.codec = "tiny-ae";
    c.latent_channels = 4;
    c.codec_downscale = 2;
    return c;
}

// ---------------------------------------------------------------- init ----

namespace {

void init_gaussian(Param& p, std::vector<int64_t> shape, std::mt19937_64& rng, double stddev) {
    p.init(std::move(shape));
    fill_gaussian(p.value, rng, stddev);
}

void init_linear(LinearLayer& l, int64_t in, int64_t out, std::mt19937_64& rng) {
    init_gaussian(l.w, {in, out}, rng, std::sqrt(2.0 / double(in)));
    l.b.init({out});
}

void init_conv(ConvLayer& c, int64_t ci, int64_t co, int64_t k, int64_t stride, int64_t pad,
               std::mt19937_64& rng, bool zero = false) {
    c.stride = stride;
    c.pad = pad;
    if (zero) {
        c.w.init({co, ci, k, k});
    } else {
        init_gaussian(c.w, {co, ci, k, k}, rng, std::sqrt(2.0 / double(ci * k * k)));
    }
    c.b.init({co});
}

void init_gn(GroupNormLayer& g, int64_t c, int64_t groups) {
    g.groups = groups;
    g.gamma.value = Tensor::full({c}, 1.0f);
    g.gamma.grad = Tensor({c});
    g.beta.init({c});
}

void init_lora(LoraLinear& l, int64_t in, int64_t out, const ModelConfig& cfg,
               std::mt19937_64& rng) {
    init_linear(l.base, in, out, rng);
    l.lora.rank = cfg.lora_rank;
    l.lora.scale = cfg.lora_alpha / double(cfg.lora_rank);
    l.lora.dropout = cfg.lora_dropout;
    init_gaussian(l.lora.down, {in, cfg.lora_rank}, rng, std::sqrt(1.0 / double(in)));
    l.lora.up.init({cfg.lora_rank, out});  // zero: fresh adapters are no-ops
}

void init_resblock(ResBlock& r, int64_t ci, int64_t co, int64_t time_dim, std::mt19937_64& rng) {
    init_gn(r.gn1, ci, 8);
    init_conv(r.conv1, ci, co, 3, 1, 1, rng);
    init_linear(r.temb, time_dim, co, rng);
    init_gn(r.gn2, co, 8);
    init_conv(r.conv2, co, co, 3, 1, 1, rng);
    if (ci != co) {
        r.skip.emplace();
        init_conv(*r.skip, ci, co, 1, 1, 0, rng);
    }
}

void init_attention(CrossAttention& a, int64_t c, const ModelConfig& cfg, std::mt19937_64& rng) {
    a.heads = cfg.heads;
    init_gn(a.norm, c, 8);
    init_lora(a.q, c, c, cfg, rng);
    init_lora(a.k, cfg.cond_dim, c, cfg, rng);
    init_lora(a.v, cfg.cond_dim, c, cfg, rng);
    init_lora(a.o, c, c, cfg, rng);
}

std::vector<std::string> build_vocab(const std::vector<std::string>& objects) {
    std::vector<std::string> v = {"<pad>", "a", "photo", "of", "with"};
    v.insert(v.end(), objects.begin(), objects.end());
    v.push_back("<v*>");
    return v;
}

int64_t token_id(const std::vector<std::string>& vocab, const std::string& word) {
    auto it = std::find(vocab.begin(), vocab.end(), word);
    if (it == vocab.end()) throw std::invalid_argument("unknown token: " + word);
    return it - vocab.begin();
}

}  // namespace

DenoiserModel make_model(const ModelConfig& cfg, const NoiseSchedule& sched) {
    if (cfg.codec != "identity" && cfg.codec != "tiny-ae")
        throw std::invalid_argument("unknown codec mode: " + cfg.codec);
    if (cfg.codec == "identity" && (cfg.latent_channels != 3 || cfg.codec_downscale != 1))
        throw std::invalid_argument("identity codec requires latent_channels=3, downscale=1");
    if (cfg.base_width % 8 != 0 || cfg.base_width % cfg.heads != 0)
        throw std::invalid_argument("base_width must be divisible by 8 and by heads");

    DenoiserModel m;
    m.cfg = cfg;
    m.sched = sched;
    m.vocab = build_vocab(cfg.object_names);

    auto rng = make_rng(cfg.init_seed, {uint64_t(Stream::init)});
    const int64_t W1 = cfg.base_width, W2 = 2 * cfg.base_width;

    if (cfg.codec == "tiny-ae") {
        m.codec.emplace();
        init_conv(m.codec->enc1, 3, 16, 3, 2, 1, rng);
        init_conv(m.codec->enc2, 16, cfg.latent_channels, 3, 1, 1, rng);
        init_conv(m.codec->dec1, cfg.latent_channels, 16, 3, 1, 1, rng);
        init_conv(m.codec->dec2, 16, 3, 3, 1, 1, rng);
    }

    const int64_t vocab_n = int64_t(m.vocab.size());
    init_gaussian(m.cond.table, {vocab_n, cfg.cond_dim}, rng, 0.5);
    init_gaussian(m.cond.pos, {cfg.seq_len, cfg.cond_dim}, rng, 0.1);
    init_linear(m.cond.token_mix, cfg.seq_len, cfg.seq_len, rng);
    init_linear(m.cond.mlp1, cfg.cond_dim, cfg.cond_dim, rng);
    init_linear(m.cond.mlp2, cfg.cond_dim, cfg.cond_dim, rng);

    auto& u = m.unet;
    init_conv(u.conv_in, cfg.input_channels(), W1, 3, 1, 1, rng);
    init_linear(u.time1, cfg.time_dim, cfg.time_dim, rng);
    init_linear(u.time2, cfg.time_dim, cfg.time_dim, rng);
    init_resblock(u.enc1_res, W1, W1, cfg.time_dim, rng);
    init_attention(u.enc1_attn, W1, cfg, rng);
    init_conv(u.down, W1, W2, 3, 2, 1, rng);
    init_resblock(u.enc2_res, W2, W2, cfg.time_dim, rng);
    init_attention(u.enc2_attn, W2, cfg, rng);
    init_resblock(u.mid_res, W2, W2, cfg.time_dim, rng);
    init_resblock(u.dec2_res, 2 * W2, W2, cfg.time_dim, rng);
    init_attention(u.dec2_attn, W2, cfg, rng);
    init_conv(u.up, W2, W1, 3, 1, 1, rng);
    init_resblock(u.dec1_res, 2 * W1, W1, cfg.time_dim, rng);
    init_attention(u.dec1_attn, W1, cfg, rng);
    init_gn(u.out_norm, W1, 8);
    init_conv(u.conv_out, W1, cfg.latent_channels, 3, 1, 1, rng, /*zero=*/true);
    return m;
}

// ---------------------------------------------------------------- visit ---

namespace {

using VisitCb = std::function<void(const std::string&, Param&, ParamGroup)>;

void visit_linear(const std::string& n, LinearLayer& l, ParamGroup g, const VisitCb& cb) {
    cb(n + ".w", l.w, g);
    cb(n + ".b", l.b, g);
}

void visit_conv(const std::string& n, ConvLayer& c, ParamGroup g, const VisitCb& cb) {
    cb(n + ".w", c.w, g);
    cb(n + ".b", c.b, g);
}

void visit_gn(const std::string& n, GroupNormLayer& gn, ParamGroup g, const VisitCb& cb) {
    cb(n + ".g", gn.gamma, g);
    cb(n + ".beta", gn.beta, g);
}

void visit_lora(const std::string& n, LoraLinear& l, const VisitCb& cb) {
    visit_linear(n, l.base, ParamGroup::backbone, cb);
    cb(n + ".lora_down", l.lora.down, ParamGroup::adapter);
    cb(n + ".lora_up", l.lora.up, ParamGroup::adapter);
}

void visit_resblock(const std::string& n, ResBlock& r, const VisitCb& cb) {
    visit_gn(n + ".gn1", r.gn1, ParamGroup::backbone, cb);
    visit_conv(n + ".conv1", r.conv1, ParamGroup::backbone, cb);
    visit_linear(n + ".temb", r.temb, ParamGroup::backbone, cb);
    visit_gn(n + ".gn2", r.gn2, ParamGroup::backbone, cb);
    visit_conv(n + ".conv2", r.conv2, ParamGroup::backbone, cb);
    if (r.skip) visit_conv(n + ".skip", *r.skip, ParamGroup::backbone, cb);
}

void visit_attention(const std::string& n, CrossAttention& a, const VisitCb& cb) {
    visit_gn(n + ".norm", a.norm, ParamGroup::backbone, cb);
    visit_lora(n + ".q", a.q, cb);
    visit_lora(n + ".k", a.k, cb);
    visit_lora(n + ".v", a.v, cb);
    visit_lora(n + ".o", a.o, cb);
}

}  // namespace

void visit_params(DenoiserModel& m, const VisitCb& cb) {
    if (m.codec) {
        visit_conv("codec.enc1", m.codec->enc1, ParamGroup::codec, cb);
        visit_conv("codec.enc2", m.codec->enc2, ParamGroup::codec, cb);
        visit_conv("codec.dec1", m.codec->dec1, ParamGroup::codec, cb);
        visit_conv("codec.dec2", m.codec->dec2, ParamGroup::codec, cb);
    }
    cb("cond.table", m.cond.table, ParamGroup::conditioner);
    cb("cond.pos", m.cond.pos, ParamGroup::conditioner);
    visit_linear("cond.token_mix", m.cond.token_mix, ParamGroup::conditioner, cb);
    visit_linear("cond.mlp1", m.cond.mlp1, ParamGroup::conditioner, cb);
    visit_linear("cond.mlp2", m.cond.mlp2, ParamGroup::conditioner, cb);

    auto& u = m.unet;
    visit_conv("unet.conv_in", u.conv_in, ParamGroup::backbone, cb);
    visit_linear("unet.time1", u.time1, ParamGroup::backbone, cb);
    visit_linear("unet.time2", u.time2, ParamGroup::backbone, cb);
    visit_resblock("unet.enc1.res", u.enc1_res, cb);
    visit_attention("unet.enc1.attn", u.enc1_attn, cb);
    visit_conv("unet.down", u.down, ParamGroup::backbone, cb);
    visit_resblock("unet.enc2.res", u.enc2_res, cb);
    visit_attention("unet.enc2.attn", u.enc2_attn, cb);
    visit_resblock("unet.mid.res", u.mid_res, cb);
    visit_resblock("unet.dec2.res", u.dec2_res, cb);
    visit_attention("unet.dec2.attn", u.dec2_attn, cb);
    visit_conv("unet.up", u.up, ParamGroup::backbone, cb);
    visit_resblock("unet.dec1.res", u.dec1_res, cb);
    visit_attention("unet.dec1.attn", u.dec1_attn, cb);
    visit_gn("unet.out_norm", u.out_norm, ParamGroup::backbone, cb);
    visit_conv("unet.conv_out", u.conv_out, ParamGroup::backbone, cb);
}

std::vector<ParamRef> named_params(DenoiserModel& m) {
    std::vector<ParamRef> out;
    visit_params(m, [&](const std::string& n, Param& p, ParamGroup g) {
        out.push_back({n, &p, g});
    });
    return out;
}

// -------------------------------------------------------------- prompts ---

int64_t v_star_position(PromptTemplate tpl) {
    return tpl == PromptTemplate::plain ? -1 : 3;
}

std::vector<int64_t> tokenize_prompt(const DenoiserModel& m, PromptTemplate tpl,
                                     const std::string& object_name) {
    std::vector<std::string> words;
    switch (tpl) {
        case PromptTemplate::defect:
            words = {"a", "photo", "of", "<v*>"};
            break;
        case PromptTemplate::object:
            words = {"a", object_name, "with", "<v*>"};
            break;
        case PromptTemplate::plain:
            words = {"a", "photo", "of", object_name};
            break;
    }
    std::vector<int64_t> ids(m.cfg.seq_len, 0);
    for (size_t i = 0; i < words.size(); ++i) ids[i] = token_id(m.vocab, words[i]);
    return ids;
}

PromptCondition embed_prompt(const DenoiserModel& m, PromptTemplate tpl,
                             const std::string& object_name) {
    PromptCondition pc;
    pc.token_ids = tokenize_prompt(m, tpl, object_name);
    pc.v_star_index = v_star_position(tpl);
    Tape tape;
    Binder bind(tape, [](ParamGroup) { return false; });
    auto& mm = const_cast<DenoiserModel&>(m);
    Var c = conditioner_forward(bind, mm, pc.token_ids, 1);
    pc.c = tape.val(c).reshaped({m.cfg.seq_len, m.cfg.cond_dim});
    return pc;
}

// ---------------------------------------------------------------- codec ---

namespace {

void check_model_range(const Tensor& t) {
    for (int64_t i = 0; i < t.size(); ++i)
        if (!(t[i] >= -1.0001f && t[i] <= 1.0001f))
            throw std::invalid_argument("image values outside model range [-1,1]");
}

Tensor conv_eval(const ConvLayer& c, const Tensor& x) {
    const int64_t N = x.shape[0];
    auto d = kernels::ConvDims::make(x.shape[1], x.shape[2], x.shape[3], c.w.value.shape[0],
                                     c.w.value.shape[2], c.w.value.shape[3], c.stride, c.pad);
    Tensor y({N, d.Co, d.OH, d.OW});
    std::vector<float> col(d.col_rows() * d.col_cols());
    kernels::conv2d_forward(x.data(), c.w.value.data(), c.b.value.data(), y.data(), N, d,
                            col.data());
    return y;
}

void silu_inplace(Tensor& t) {
    for (int64_t i = 0; i < t.size(); ++i) t[i] = t[i] / (1.0f + std::exp(-t[i]));
}

}  // namespace

Tensor encode_batch(const DenoiserModel& m, const Tensor& images) {
    check_model_range(images);
    if (m.cfg.codec == "identity") return images;
    Tensor h = conv_eval(m.codec->enc1, images);
    silu_inplace(h);
    return conv_eval(m.codec->enc2, h);
}

Tensor decode_batch(const DenoiserModel& m, const Tensor& latents) {
    if (m.cfg.codec == "identity") return latents;
    Tensor h = conv_eval(m.codec->dec1, latents);
    silu_inplace(h);
    const int64_t P = h.shape[0] * h.shape[1];
    Tensor up({h.shape[0], h.shape[1], 2 * h.shape[2], 2 * h.shape[3]});
    kernels::upsample_nearest2(h.data(), up.data(), P, h.shape[2], h.shape[3]);
    Tensor y = conv_eval(m.codec->dec2, up);
    for (auto& v : y.v) v = std::min(std::max(v, -1.0f), 1.0f);
    return y;
}

Tensor encode_image(const DenoiserModel& m, const Tensor& image) {
    Tensor batched = image.reshaped({1, image.shape[0], image.shape[1], image.shape[2]});
    Tensor z = encode_batch(m, batched);
    return z.reshaped({z.shape[1], z.shape[2], z.shape[3]});
}

Tensor decode_latent(const DenoiserModel& m, const Tensor& latent) {
    Tensor batched = latent.reshaped({1, latent.shape[0], latent.shape[1], latent.shape[2]});
    Tensor y = decode_batch(m, batched);
    return y.reshaped({y.shape[1], y.shape[2], y.shape[3]});
}

// --------------------------------------------------------- inpaint input ---

Tensor build_inpaint_input(const Tensor& x_t, const Tensor& b, const Tensor& mask_latent) {
    if (x_t.shape != b.shape) throw std::invalid_argument("inpaint input: x_t and b differ");
    const int64_t N = x_t.shape[0], C = x_t.shape[1], H = x_t.shape[2], W = x_t.shape[3];
    if (mask_latent.shape[0] != N || mask_latent.shape[1] != 1 || mask_latent.shape[2] != H ||
        mask_latent.shape[3] != W)
        throw std::invalid_argument("inpaint input: mask spatial mismatch");
    Tensor out({N, 2 * C + 1, H, W});
    const int64_t HW = H * W;
    for (int64_t n = 0; n < N; ++n) {
        std::copy(x_t.data() + n * C * HW, x_t.data() + (n + 1) * C * HW,
                  out.data() + n * (2 * C + 1) * HW);
        std::copy(b.data() + n * C * HW, b.data() + (n + 1) * C * HW,
                  out.data() + n * (2 * C + 1) * HW + C * HW);
        std::copy(mask_latent.data() + n * HW, mask_latent.data() + (n + 1) * HW,
                  out.data() + n * (2 * C + 1) * HW + 2 * C * HW);
    }
    return out;
}

Tensor mask_to_latent(const DenoiserModel& m, const Tensor& mask) {
    const int64_t f = m.cfg.codec_downscale;
    const int64_t H = mask.shape[0], W = mask.shape[1];
    if (H % f != 0 || W % f != 0)
        throw std::invalid_argument("mask size not divisible by codec downscale");
    Tensor out({1, 1, H / f, W / f});
    if (f == 1) {
        std::copy(mask.v.begin(), mask.v.end(), out.v.begin());
    } else {
        kernels::avgpool(mask.data(), out.data(), 1, H, W, f);
    }
    return out;
}

// ------------------------------------------------------------- forward ----

Var Binder::operator()(Param& p, ParamGroup g) {
    auto it = cache_.find(&p);
    if (it != cache_.end()) return it->second;
    Var v = trainable_(g) ? tape_.leaf(p.value, &p.grad) : tape_.constant(p.value);
    cache_.emplace(&p, v);
    return v;
}

namespace {

Var linear_fwd(Binder& bind, LinearLayer& l, Var x, ParamGroup g) {
    return bind.tape().linear(x, bind(l.w, g), bind(l.b, g));
}

Var conv_fwd(Binder& bind, ConvLayer& c, Var x, ParamGroup g) {
    return bind.tape().conv2d(x, bind(c.w, g), bind(c.b, g), c.stride, c.pad);
}

Var gn_fwd(Binder& bind, GroupNormLayer& g, Var x) {
    return bind.tape().groupnorm(x, bind(g.gamma, ParamGroup::backbone),
                                 bind(g.beta, ParamGroup::backbone), g.groups);
}

Var lora_fwd(Binder& bind, LoraLinear& l, Var x, bool adapters_enabled,
             const ForwardOpts& opts) {
    auto& t = bind.tape();
    Var y = linear_fwd(bind, l.base, x, ParamGroup::backbone);
    if (!adapters_enabled) return y;
    Var xin = x;
    if (opts.training && l.lora.dropout > 0.0 && opts.dropout_rng) {
        Tensor mask(t.val(x).shape);
        std::bernoulli_distribution keep(1.0 - l.lora.dropout);
        const float inv = float(1.0 / (1.0 - l.lora.dropout));
        for (int64_t i = 0; i < mask.size(); ++i)
            mask[i] = keep(*opts.dropout_rng) ? inv : 0.0f;
        xin = t.mul(x, t.constant(std::move(mask)));
    }
    Var a = t.linear(xin, bind(l.lora.down, ParamGroup::adapter), Var{});
    Var d = t.linear(a, bind(l.lora.up, ParamGroup::adapter), Var{});
    return t.add(y, t.scale(d, float(l.lora.scale)));
}

Var resblock_fwd(Binder& bind, ResBlock& r, Var x, Var temb) {
    auto& t = bind.tape();
    Var h = gn_fwd(bind, r.gn1, x);
    h = t.silu(h);
    h = conv_fwd(bind, r.conv1, h, ParamGroup::backbone);
    Var bias = linear_fwd(bind, r.temb, temb, ParamGroup::backbone);
    h = t.add_channel_bias(h, bias);
    h = gn_fwd(bind, r.gn2, h);
    h = t.silu(h);
    h = conv_fwd(bind, r.conv2, h, ParamGroup::backbone);
    Var s = r.skip ? conv_fwd(bind, *r.skip, x, ParamGroup::backbone) : x;
    return t.add(h, s);
}

Var attention_fwd(Binder& bind, CrossAttention& a, Var x, Var cond, bool adapters_enabled,
                  const ForwardOpts& opts, AttnCaptureVar* cap) {
    auto& t = bind.tape();
    const auto& xs = t.val(x).shape;
    const int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3], HW = H * W;
    const auto& cs = t.val(cond).shape;
    const int64_t L = cs[1], dc = cs[2];
    const int64_t heads = a.heads, dh = C / heads;

    Var h = gn_fwd(bind, a.norm, x);
    Var hl = t.transpose_12(t.reshape(h, {N, C, HW}));  // (N, HW, C)
    Var q = lora_fwd(bind, a.q, t.reshape(hl, {N * HW, C}), adapters_enabled, opts);
    Var cf = t.reshape(cond, {N * L, dc});
    Var k = lora_fwd(bind, a.k, cf, adapters_enabled, opts);
    Var v = lora_fwd(bind, a.v, cf, adapters_enabled, opts);

    Var qb = t.reshape(t.transpose_12(t.reshape(q, {N, HW, heads, dh})), {N * heads, HW, dh});
    Var kb = t.reshape(t.transpose_12(t.reshape(k, {N, L, heads, dh})), {N * heads, L, dh});
    Var vb = t.reshape(t.transpose_12(t.reshape(v, {N, L, heads, dh})), {N * heads, L, dh});

    Var scores = t.scale(t.bmm_nt(qb, kb), float(1.0 / std::sqrt(double(dh))));
    Var probs = t.softmax_last(scores);  // (N*heads, HW, L)
    if (cap) {
        cap->per_head = probs;
        cap->head_avg = t.mean_heads(probs, heads);
        cap->heads = heads;
        cap->h = H;
        cap->w = W;
    }
    Var oh = t.bmm_nn(probs, vb);
    Var of = t.reshape(t.transpose_12(t.reshape(oh, {N, heads, HW, dh})), {N * HW, C});
    Var o = lora_fwd(bind, a.o, of, adapters_enabled, opts);
    Var y = t.reshape(t.transpose_12(t.reshape(o, {N, HW, C})), {N, C, H, W});
    return t.add(y, x);
}

}  // namespace

Var conditioner_forward(Binder& bind, DenoiserModel& m, const std::vector<int64_t>& ids_flat,
                        int64_t n_samples) {
    auto& t = bind.tape();
    const int64_t L = m.cfg.seq_len, d = m.cfg.cond_dim;
    if (int64_t(ids_flat.size()) != n_samples * L)
        throw std::invalid_argument("conditioner: ids size mismatch");
    const auto G = ParamGroup::conditioner;
    Var e = t.gather_rows(bind(m.cond.table, G), ids_flat);       // (N*L, d)
    e = t.add_cycled_rows(e, bind(m.cond.pos, G));
    // mix across token positions
    Var e3 = t.reshape(e, {n_samples, L, d});
    Var et = t.reshape(t.transpose_12(e3), {n_samples * d, L});
    Var mixed = linear_fwd(bind, m.cond.token_mix, et, G);
    Var m3 = t.transpose_12(t.reshape(mixed, {n_samples, d, L}));  // (N, L, d)
    Var r = t.add(e3, t.silu(m3));
    // per-token channel mlp
    Var f = t.reshape(r, {n_samples * L, d});
    Var hidden = t.silu(linear_fwd(bind, m.cond.mlp1, f, G));
    Var out = linear_fwd(bind, m.cond.mlp2, hidden, G);
    return t.reshape(t.add(f, out), {n_samples, L, d});
}

Tensor sinusoidal_time_features(const std::vector<int64_t>& timesteps, int64_t dim) {
    const int64_t half = dim / 2;
    Tensor f({int64_t(timesteps.size()), dim});
    for (size_t n = 0; n < timesteps.size(); ++n)
        for (int64_t i = 0; i < half; ++i) {
            const double w = std::exp(-std::log(10000.0) * double(i) / double(half));
            f.v[n * dim + i] = float(std::sin(timesteps[n] * w));
            f.v[n * dim + half + i] = float(std::cos(timesteps[n] * w));
        }
    return f;
}

UnetOut unet_forward(Binder& bind, DenoiserModel& m, Var x_inpaint,
                     const std::vector<int64_t>& timesteps, Var cond, const ForwardOpts& opts) {
    auto& t = bind.tape();
    auto& u = m.unet;
    const auto& xs = t.val(x_inpaint).shape;
    if (xs[1] != m.cfg.input_channels())
        throw std::invalid_argument("unet: input channel mismatch");
    if (int64_t(timesteps.size()) != xs[0])
        throw std::invalid_argument("unet: timestep count mismatch");
    const bool ae = m.adapters_enabled;

    Var tf = t.constant(sinusoidal_time_features(timesteps, m.cfg.time_dim));
    Var temb = t.silu(linear_fwd(bind, u.time1, tf, ParamGroup::backbone));
    temb = linear_fwd(bind, u.time2, temb, ParamGroup::backbone);

    UnetOut out;
    Var h0 = conv_fwd(bind, u.conv_in, x_inpaint, ParamGroup::backbone);
    Var e1 = resblock_fwd(bind, u.enc1_res, h0, temb);
    e1 = attention_fwd(bind, u.enc1_attn, e1, cond, ae, opts, nullptr);
    Var d2 = conv_fwd(bind, u.down, e1, ParamGroup::backbone);
    Var e2 = resblock_fwd(bind, u.enc2_res, d2, temb);
    e2 = attention_fwd(bind, u.enc2_attn, e2, cond, ae, opts, nullptr);
    Var mid = resblock_fwd(bind, u.mid_res, e2, temb);

    Var cat2 = t.concat_channels(mid, e2);
    Var dd2 = resblock_fwd(bind, u.dec2_res, cat2, temb);
    AttnCaptureVar cap2;
    dd2 = attention_fwd(bind, u.dec2_attn, dd2, cond, ae, opts,
                        opts.capture_attention ? &cap2 : nullptr);
    if (opts.capture_attention) out.capture.push_back(cap2);

    Var up = conv_fwd(bind, u.up, t.upsample_nearest2(dd2), ParamGroup::backbone);
    Var cat1 = t.concat_channels(up, e1);
    Var dd1 = resblock_fwd(bind, u.dec1_res, cat1, temb);
    AttnCaptureVar cap1;
    dd1 = attention_fwd(bind, u.dec1_attn, dd1, cond, ae, opts,
                        opts.capture_attention ? &cap1 : nullptr);
    if (opts.capture_attention) out.capture.push_back(cap1);

    Var y = gn_fwd(bind, u.out_norm, dd1);
    y = t.silu(y);
    out.eps_pred = conv_fwd(bind, u.conv_out, y, ParamGroup::backbone);
    return out;
}

std::pair<Tensor, AttentionStack> predict_noise(DenoiserModel& m, const Tensor& x_inpaint,
                                                const std::vector<int64_t>& timesteps,
                                                const Tensor& cond, bool capture_attention) {
    Tape tape;
    Binder bind(tape, [](ParamGroup) { return false; });
    const int64_t N = x_inpaint.shape[0];
    Tensor cond_b = cond;
    if (cond.ndim() == 2) {
        cond_b = Tensor({N, cond.shape[0], cond.shape[1]});
        for (int64_t n = 0; n < N; ++n)
            std::copy(cond.v.begin(), cond.v.end(), cond_b.data() + n * cond.size());
    }
    ForwardOpts opts;
    opts.capture_attention = capture_attention;
    UnetOut out = unet_forward(bind, m, tape.constant(x_inpaint), timesteps,
                               tape.constant(cond_b), opts);
    AttentionStack stack;
    for (const auto& cap : out.capture) {
        AttentionMaps maps;
        const Tensor& p = tape.val(cap.per_head);  // (N*heads, HW, L)
        maps.probs = p.reshaped({N, cap.heads, p.shape[1], p.shape[2]});
        maps.h = cap.h;
        maps.w = cap.w;
        stack.push_back(std::move(maps));
    }
    return {tape.val(out.eps_pred), std::move(stack)};
}

// -------------------------------------------------------------- adapters ---

namespace {

template <class F>
void for_each_lora(DenoiserModel& m, F&& f) {
    for (CrossAttention* a : {&m.unet.enc1_attn, &m.unet.enc2_attn, &m.unet.dec2_attn,
                              &m.unet.dec1_attn}) {
        f(a->q);
        f(a->k);
        f(a->v);
        f(a->o);
    }
}

}  // namespace

void set_adapters_enabled(DenoiserModel& m, bool enabled) { m.adapters_enabled = enabled; }

void merge_adapters(DenoiserModel& m) {
    if (!m.adapters_enabled)
        throw std::logic_error("merge_adapters: adapters are disabled");
    for_each_lora(m, [](LoraLinear& l) {
        const int64_t in = l.lora.down.value.shape[0];
        const int64_t r = l.lora.down.value.shape[1];
        const int64_t out = l.lora.up.value.shape[1];
        for (int64_t i = 0; i < in; ++i)
            for (int64_t j = 0; j < out; ++j) {
                double acc = 0;
                for (int64_t k = 0; k < r; ++k)
                    acc += double(l.lora.down.value[i * r + k]) * double(l.lora.up.value[k * out + j]);
                l.base.w.value[i * out + j] =
                    float(double(l.base.w.value[i * out + j]) + l.lora.scale * acc);
            }
    });
}

int64_t adapter_param_count(const DenoiserModel& m) {
    int64_t n = 0;
    for_each_lora(const_cast<DenoiserModel&>(m), [&](LoraLinear& l) {
        n += l.lora.down.value.size() + l.lora.up.value.size();
    });
    return n;
}

// ------------------------------------------------------------ checkpoint ---

namespace {

constexpr char kMagic[4] = {'D', 'G', 'C', 'K'};
constexpr uint32_t kVersion = 1;

json config_to_json(const ModelConfig& c) {
    return json{{"image_size", c.image_size},
                {"codec", c.codec},
                {"latent_channels", c.latent_channels},
                {"codec_downscale", c.codec_downscale},
                {"codec_recon_bound", c.codec_recon_bound},
                {"base_width", c.base_width},
                {"cond_dim", c.cond_dim},
                {"heads", c.heads},
                {"time_dim", c.time_dim},
                {"seq_len", c.seq_len},
                {"lora_rank", c.lora_rank},
                {"lora_alpha", c.lora_alpha},
                {"lora_dropout", c.lora_dropout},
                {"object_names", c.object_names},
                {"init_seed", c.init_seed}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.image_size = j.at("image_size");
    c.codec = j.at("codec");
    c.latent_channels = j.at("latent_channels");
    c.codec_downscale = j.at("codec_downscale");
    c.codec_recon_bound = j.at("codec_recon_bound");
    c.base_width = j.at("base_width");
    c.cond_dim = j.at("cond_dim");
    c.heads = j.at("heads");
    c.time_dim = j.at("time_dim");
    c.seq_len = j.at("seq_len");
    c.lora_rank = j.at("lora_rank");
    c.lora_alpha = j.at("lora_alpha");
    c.lora_dropout = j.at("lora_dropout");
    c.object_names = j.at("object_names").get<std::vector<std::string>>();
    c.init_seed = j.at("init_seed");
    return c;
}

json schedule_to_json(const NoiseSchedule& s) {
    return json{{"T", s.T},
                {"kind", to_string(s.kind)},
                {"beta_start", s.params.beta_start},
                {"beta_end", s.params.beta_end},
                {"cosine_s", s.params.cosine_s},
                {"alpha_cum", s.alpha_cum}};
}

NoiseSchedule schedule_from_json(const json& j) {
    NoiseSchedule s;
    s.T = j.at("T");
    s.kind = schedule_kind_from_string(j.at("kind"));
    s.params.beta_start = j.at("beta_start");
    s.params.beta_end = j.at("beta_end");
    s.params.cosine_s = j.at("cosine_s");
    s.alpha_cum = j.at("alpha_cum").get<std::vector<double>>();
    return s;
}

}  // namespace

void save_model_checkpoint(const std::string& path, DenoiserModel& m,
                           const std::string& extra_meta_json,
                           const std::vector<std::pair<std::string, const Tensor*>>& extra_tensors) {
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    visit_params(m, [&](const std::string& n, Param& p, ParamGroup) {
        tensors.emplace_back(n, &p.value);
    });
    for (const auto& [n, t] : extra_tensors) tensors.emplace_back("extra." + n, t);

    json meta;
    meta["version"] = kVersion;
    meta["config"] = config_to_json(m.cfg);
    meta["schedule"] = schedule_to_json(m.sched);
    meta["adapters_enabled"] = m.adapters_enabled;
    meta["extra"] = json::parse(extra_meta_json);
    json tl = json::array();
    uint64_t offset = 0;
    for (const auto& [n, t] : tensors) {
        tl.push_back({{"name", n}, {"shape", t->shape}, {"offset", offset}});
        offset += uint64_t(t->size()) * sizeof(float);
    }
    meta["tensors"] = tl;
    const std::string meta_str = meta.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path);
    out.write(kMagic, 4);
    uint32_t ver = kVersion;
    out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
    uint64_t len = meta_str.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(meta_str.data(), std::streamsize(len));
    for (const auto& [n, t] : tensors)
        out.write(reinterpret_cast<const char*>(t->data()),
                  std::streamsize(t->size() * sizeof(float)));
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

ModelCheckpoint load_model_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path);
    char magic[4];
    in.read(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    uint32_t ver = 0;
    in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
    if (ver > kVersion) throw std::runtime_error("checkpoint version too new");
    uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string meta_str(len, '\0');
    in.read(meta_str.data(), std::streamsize(len));
    json meta = json::parse(meta_str);

    ModelCheckpoint ck{
        make_model(config_from_json(meta.at("config")), schedule_from_json(meta.at("schedule"))),
        meta.at("extra").dump(),
        {}};
    ck.model.adapters_enabled = meta.at("adapters_enabled");

    std::map<std::string, Param*> params;
    visit_params(ck.model, [&](const std::string& n, Param& p, ParamGroup) { params[n] = &p; });

    const std::streampos data_start = in.tellg();
    for (const auto& jt : meta.at("tensors")) {
        const std::string name = jt.at("name");
        const auto shape = jt.at("shape").get<std::vector<int64_t>>();
        const uint64_t offset = jt.at("offset");
        Tensor t(shape);
        in.seekg(data_start + std::streampos(offset));
        in.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.size() * sizeof(float)));
        if (!in) throw std::runtime_error("checkpoint payload truncated: " + path);
        if (name.rfind("extra.", 0) == 0) {
            ck.extra_tensors[name.substr(6)] = std::move(t);
        } else {
            auto it = params.find(name);
            if (it == params.end())
                throw std::runtime_error("checkpoint tensor has no matching parameter: " + name);
            if (it->second->value.shape != t.shape)
                throw std::runtime_error("checkpoint tensor shape mismatch: " + name);
            it->second->value = std::move(t);
        }
    }
    return ck;
}

bool models_bitwise_equal(DenoiserModel& a, DenoiserModel& b, ParamGroup only_group,
                          bool use_group_filter) {
    auto pa = named_params(a);
    auto pb = named_params(b);
    if (pa.size() != pb.size()) return false;
    for (size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].name != pb[i].name) return false;
        if (use_group_filter && pa[i].group != only_group) continue;
        const Tensor& ta = pa[i].p->value;
        const Tensor& tb = pb[i].p->value;
        if (ta.shape != tb.shape) return false;
        if (std::memcmp(ta.data(), tb.data(), size_t(ta.size()) * sizeof(float)) != 0)
            return false;
    }
    return true;
}

}  // namespace defectgen
