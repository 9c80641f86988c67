#ifndef DEFECTGEN_MODEL_HPP
#define DEFECTGEN_MODEL_HPP

#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "defectgen/schedule.hpp"
#include "defectgen/tape.hpp"
#include "defectgen/tensor.hpp"

namespace defectgen {

// Trainable stack: image codec, prompt conditioner with a dedicated defect
// token, and a two-level UNet denoiser with cross-attention in both halves.
// Low-rank adapters sit on the attention projections; decoder-layer
// cross-attention maps can be captured for the attention loss.

struct Param {
    Tensor value;
    Tensor grad;
    void init(std::vector<int64_t> shape) {
        value = Tensor(shape);
        grad = Tensor(std::move(shape));
    }
};

enum class ParamGroup { backbone, conditioner, adapter, codec };

struct ParamRef {
    std::string name;
    Param* p;
    ParamGroup group;
};

struct ModelConfig {
    int64_t image_size = 32;
    std::string codec = "identity";  // identity | tiny-ae
    int64_t latent_channels = 3;     // 4 in tiny-ae mode
    int64_t codec_downscale = 1;     // 2 in tiny-ae mode
    double codec_recon_bound = 0.02; // max reconstruction MSE after codec training
    int64_t base_width = 32;
    int64_t cond_dim = 32;
    int64_t heads = 4;
    int64_t time_dim = 64;
    int64_t seq_len = 8;
    int64_t lora_rank = 8;
    double lora_alpha = 16.0;        // effective scale is alpha / rank
    double lora_dropout = 0.1;
    std::vector<std::string> object_names = {"disc"};
    uint64_t init_seed = 1;

    int64_t latent_size() const { return image_size / codec_downscale; }
    int64_t input_channels() const { return 2 * latent_channels + 1; }
    static ModelConfig tiny_ae_defaults();
};

// ------------------------------------------------------------- layers ----

struct LinearLayer {
    Param w;  // (in, out)
    Param b;  // (out)
};

struct ConvLayer {
    Param w;  // (Co, Ci, kh, kw)
    Param b;  // (Co)
    int64_t stride = 1;
    int64_t pad = 1;
};

struct GroupNormLayer {
    Param gamma;
    Param beta;
    int64_t groups = 8;
};

struct LoraAdapter {
    Param down;  // (in, r)
    Param up;    // (r, out), zero-initialized so a fresh adapter is a no-op
    int64_t rank = 8;
    double scale = 2.0;  // alpha / rank
    double dropout = 0.1;
};

struct LoraLinear {
    LinearLayer base;
    LoraAdapter lora;
};

struct ResBlock {
    GroupNormLayer gn1, gn2;
    ConvLayer conv1, conv2;
    LinearLayer temb;                 // time features -> channel bias
    std::optional<ConvLayer> skip;    // 1x1 when channel count changes
};

struct CrossAttention {
    GroupNormLayer norm;
    LoraLinear q, k, v, o;
    int64_t heads = 4;
};

struct TinyAutoencoder {
    ConvLayer enc1, enc2, dec1, dec2;
};

struct Conditioner {
    Param table;     // (vocab, d)
    Param pos;       // (seq_len, d)
    LinearLayer token_mix;  // mixes across positions
    LinearLayer mlp1, mlp2;
};

struct MiniUnet {
    ConvLayer conv_in;
    LinearLayer time1, time2;
    ResBlock enc1_res;
    CrossAttention enc1_attn;
    ConvLayer down;
    ResBlock enc2_res;
    CrossAttention enc2_attn;
    ResBlock mid_res;
    ResBlock dec2_res;
    CrossAttention dec2_attn;
    ConvLayer up;
    ResBlock dec1_res;
    CrossAttention dec1_attn;
    GroupNormLayer out_norm;
    ConvLayer conv_out;
};

struct DenoiserModel {
    ModelConfig cfg;
    NoiseSchedule sched;
    std::optional<TinyAutoencoder> codec;  // absent in identity mode
    Conditioner cond;
    MiniUnet unet;
    bool adapters_enabled = true;
    std::vector<std::string> vocab;  // <pad>, words, object names, <v*>
};

DenoiserModel make_model(const ModelConfig& cfg, const NoiseSchedule& sched);

void visit_params(DenoiserModel& m,
                  const std::function<void(const std::string&, Param&, ParamGroup)>& cb);
std::vector<ParamRef> named_params(DenoiserModel& m);

// -------------------------------------------------------------- prompts ---

enum class PromptTemplate { defect, object, plain };

struct PromptCondition {
    Tensor c;                       // (seq_len, cond_dim)
    std::vector<int64_t> token_ids; // length seq_len
    int64_t v_star_index = -1;      // -1 when the template has no defect token
};

std::vector<int64_t> tokenize_prompt(const DenoiserModel& m, PromptTemplate tpl,
                                     const std::string& object_name);
int64_t v_star_position(PromptTemplate tpl);
PromptCondition embed_prompt(const DenoiserModel& m, PromptTemplate tpl,
                             const std::string& object_name);

// ---------------------------------------------------------------- codec ---

// identity mode passes through exactly; tiny-ae maps (3,S,S) <-> (latC,S/f,S/f)
Tensor encode_image(const DenoiserModel& m, const Tensor& image);
Tensor decode_latent(const DenoiserModel& m, const Tensor& latent);
Tensor encode_batch(const DenoiserModel& m, const Tensor& images);   // (N,3,S,S)
Tensor decode_batch(const DenoiserModel& m, const Tensor& latents);

// --------------------------------------------------------- inpaint input ---

// Channel concatenation (x_t, b, M). M may arrive at image resolution and is
// downscaled to the latent grid by area averaging.
Tensor build_inpaint_input(const Tensor& x_t, const Tensor& b, const Tensor& mask_latent);
Tensor mask_to_latent(const DenoiserModel& m, const Tensor& mask);  // (H,W) -> (1,1,hl,wl)

// ------------------------------------------------------------- forward ----

struct AttentionMaps {
    Tensor probs;   // (N, heads, HW, L): per-head maps, softmax over tokens
    int64_t h = 0, w = 0;
};
using AttentionStack = std::vector<AttentionMaps>;

// Capture handles on the tape (decoder layers only, head-averaged for the loss)
struct AttnCaptureVar {
    Var head_avg;   // (N, HW, L)
    Var per_head;   // (N*heads, HW, L)
    int64_t heads = 0, h = 0, w = 0;
};

struct ForwardOpts {
    bool training = false;
    std::mt19937_64* dropout_rng = nullptr;  // used when training and lora_dropout > 0
    bool capture_attention = false;
};

// Maps every Param to a tape node once; trainable params become leaves with
// their grad buffer as sink, the rest enter as constants.
class Binder {
  public:
    Binder(Tape& tape, std::function<bool(ParamGroup)> trainable)
        : tape_(tape), trainable_(std::move(trainable)) {}
    Var operator()(Param& p, ParamGroup g);
    Tape& tape() { return tape_; }

  private:
    Tape& tape_;
    std::function<bool(ParamGroup)> trainable_;
    std::unordered_map<const Param*, Var> cache_;
};

Var conditioner_forward(Binder& bind, DenoiserModel& m, const std::vector<int64_t>& ids_flat,
                        int64_t n_samples);

struct UnetOut {
    Var eps_pred;                         // (N, latC, hl, wl)
    std::vector<AttnCaptureVar> capture;  // decoder layers, shallowest last
};

UnetOut unet_forward(Binder& bind, DenoiserModel& m, Var x_inpaint,
                     const std::vector<int64_t>& timesteps, Var cond, const ForwardOpts& opts);

Tensor sinusoidal_time_features(const std::vector<int64_t>& timesteps, int64_t dim);

// Tensor-level entry point used by the sampler and tests.
std::pair<Tensor, AttentionStack> predict_noise(DenoiserModel& m, const Tensor& x_inpaint,
                                                const std::vector<int64_t>& timesteps,
                                                const Tensor& cond, bool capture_attention);

// -------------------------------------------------------------- adapters ---

void set_adapters_enabled(DenoiserModel& m, bool enabled);
// Folds scale * down * up into each base projection. Requires enabled adapters.
void merge_adapters(DenoiserModel& m);
int64_t adapter_param_count(const DenoiserModel& m);

// ------------------------------------------------------------ checkpoint ---

// Versioned container: JSON meta (config, schedule, user section) plus named
// float32 tensors. The trainer stores optimizer state through extra_tensors.
void save_model_checkpoint(const std::string& path, DenoiserModel& m,
                           const std::string& extra_meta_json = "{}",
                           const std::vector<std::pair<std::string, const Tensor*>>& extra_tensors = {});

struct ModelCheckpoint {
    DenoiserModel model;
    std::string extra_meta_json;
    std::map<std::string, Tensor> extra_tensors;
};
ModelCheckpoint load_model_checkpoint(const std::string& path);

bool models_bitwise_equal(DenoiserModel& a, DenoiserModel& b, ParamGroup only_group,
                          bool use_group_filter);

}  // namespace defectgen

#endif
