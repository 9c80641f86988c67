#include "defectgen/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "defectgen/kernels.hpp"

namespace defectgen {

void LossWeights::validate() const {
    if (lambda_def < 0 || lambda_obj < 0 || lambda_attn < 0)
        throw std::invalid_argument("loss weights must be nonnegative");
    if (lambda_def == 0 && lambda_obj == 0 && lambda_attn == 0)
        throw std::invalid_argument("at least one loss weight must be positive");
    if (alpha < 0 || alpha > 1) throw std::invalid_argument("alpha must be in [0,1]");
}

void BoxMaskParams::validate() const {
    if (n_boxes < 0) throw std::invalid_argument("n_boxes must be >= 0");
    if (!(min_side_frac > 0 && min_side_frac <= max_side_frac && max_side_frac <= 1.0))
        throw std::invalid_argument("box side fractions must satisfy 0 < min <= max <= 1");
}

Tensor random_box_mask(std::mt19937_64& rng, const BoxMaskParams& params, int64_t H, int64_t W) {
    params.validate();
    Tensor m({H, W});
    for (int64_t i = 0; i < params.n_boxes; ++i) {
        std::uniform_real_distribution<double> dw(params.min_side_frac * W,
                                                  params.max_side_frac * W);
        std::uniform_real_distribution<double> dh(params.min_side_frac * H,
                                                  params.max_side_frac * H);
        const int64_t bw = std::clamp<int64_t>(std::llround(dw(rng)), 1, W);
        const int64_t bh = std::clamp<int64_t>(std::llround(dh(rng)), 1, H);
        const int64_t x0 = std::uniform_int_distribution<int64_t>(0, W - bw)(rng);
        const int64_t y0 = std::uniform_int_distribution<int64_t>(0, H - bh)(rng);
        for (int64_t y = y0; y < y0 + bh; ++y)
            for (int64_t x = x0; x < x0 + bw; ++x) m.v[y * W + x] = 1.0f;
    }
    return m;
}

template <class T>
BasicTensor<T> adjusted_mask(const BasicTensor<T>& m, double alpha) {
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("adjusted_mask: alpha not in [0,1]");
    BasicTensor<T> out(m.shape);
    const T a = static_cast<T>(alpha);
    for (int64_t i = 0; i < m.size(); ++i) out[i] = m[i] + a * (T(1) - m[i]);
    return out;
}

namespace {

// expands (H,W) or (N,1,H,W) mask lookups over an (N,C,H,W) tensor
template <class T>
double masked_sq_mean(const BasicTensor<T>& eps, const BasicTensor<T>& eps_pred,
                      const BasicTensor<T>& mask) {
    if (!eps.same_shape(eps_pred)) throw std::invalid_argument("loss: shape mismatch");
    const int64_t N = eps.shape[0], C = eps.shape[1], HW = eps.shape[2] * eps.shape[3];
    const bool per_sample = mask.ndim() == 4;
    if (per_sample) {
        if (mask.shape[0] != N || mask.shape[1] != 1 || mask.shape[2] != eps.shape[2] ||
            mask.shape[3] != eps.shape[3])
            throw std::invalid_argument("loss: mask shape mismatch");
    } else if (mask.ndim() != 2 || mask.shape[0] != eps.shape[2] ||
               mask.shape[1] != eps.shape[3]) {
        throw std::invalid_argument("loss: mask shape mismatch");
    }
    double acc = 0;
    for (int64_t n = 0; n < N; ++n) {
        const T* mp = per_sample ? mask.data() + n * HW : mask.data();
        for (int64_t c = 0; c < C; ++c) {
            const T* a = eps.data() + (n * C + c) * HW;
            const T* b = eps_pred.data() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) {
                const double d = double(mp[i]) * (double(a[i]) - double(b[i]));
                acc += d * d;
            }
        }
    }
    return acc / double(eps.size());
}

}  // namespace

template <class T>
double defect_loss(const BasicTensor<T>& eps, const BasicTensor<T>& eps_pred,
                   const BasicTensor<T>& mask) {
    return masked_sq_mean(eps, eps_pred, mask);
}

template <class T>
double object_loss(const BasicTensor<T>& eps, const BasicTensor<T>& eps_pred,
                   const BasicTensor<T>& m_prime) {
    return masked_sq_mean(eps, eps_pred, m_prime);
}

double attention_loss(const AttentionStack& stack, int64_t v_star_index, const Tensor& mask) {
    if (stack.empty()) throw std::invalid_argument("attention_loss: empty capture stack");
    const int64_t H = mask.ndim() == 4 ? mask.shape[2] : mask.shape[0];
    const int64_t W = mask.ndim() == 4 ? mask.shape[3] : mask.shape[1];
    const int64_t N = stack[0].probs.shape[0];

    DTensor acc({N, 1, H, W});
    for (const auto& layer : stack) {
        const auto& p = layer.probs;  // (N, heads, HW, L)
        const int64_t heads = p.shape[1], HWl = p.shape[2], L = p.shape[3];
        if (v_star_index < 0 || v_star_index >= L)
            throw std::invalid_argument("attention_loss: no [V*] map at that index");
        if (HWl != layer.h * layer.w || p.shape[0] != N)
            throw std::invalid_argument("attention_loss: inconsistent capture shapes");
        DTensor avg({N, 1, layer.h, layer.w});
        for (int64_t n = 0; n < N; ++n)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t q = 0; q < HWl; ++q)
                    avg[n * HWl + q] += double(p.at(n, h, q, v_star_index)) / double(heads);
        DTensor up({N, 1, H, W});
        kernels::resize_bilinear(avg.data(), up.data(), N, layer.h, layer.w, H, W);
        for (int64_t i = 0; i < acc.size(); ++i) acc[i] += up[i] / double(stack.size());
    }

    const bool per_sample = mask.ndim() == 4;
    double loss = 0;
    for (int64_t n = 0; n < N; ++n) {
        const float* mp = per_sample ? mask.data() + n * H * W : mask.data();
        for (int64_t i = 0; i < H * W; ++i) {
            const double d = acc[n * H * W + i] - double(mp[i]);
            loss += d * d;
        }
    }
    return loss / double(N * H * W);
}

double combined_loss(double l_def, double l_obj, double l_attn, const LossWeights& w) {
    w.validate();
    if (!std::isfinite(l_def) || !std::isfinite(l_obj) || !std::isfinite(l_attn))
        throw std::domain_error("combined_loss: non-finite component");
    return w.lambda_def * l_def + w.lambda_obj * l_obj + w.lambda_attn * l_attn;
}

// ------------------------------------------------------------ tape forms ---

namespace {

template <class T>
Var bcast_masked_sq_mean(BasicTape<T>& t, Var eps, Var eps_pred, Var mask) {
    Var diff = t.sub(eps, eps_pred);
    Var md = t.mul_bcast1(diff, mask);
    return t.mean_all(t.mul(md, md));
}

}  // namespace

template <class T>
Var defect_loss_t(BasicTape<T>& t, Var eps, Var eps_pred, Var mask) {
    return bcast_masked_sq_mean(t, eps, eps_pred, mask);
}

template <class T>
Var object_loss_t(BasicTape<T>& t, Var eps, Var eps_pred, Var m_prime) {
    return bcast_masked_sq_mean(t, eps, eps_pred, m_prime);
}

template <class T>
Var attention_loss_t(BasicTape<T>& t, const std::vector<AttnCaptureVar>& capture,
                     int64_t v_star_index, Var mask) {
    if (capture.empty()) throw std::invalid_argument("attention_loss: empty capture stack");
    const auto& ms = t.val(mask).shape;  // (N,1,H,W)
    const int64_t N = ms[0], H = ms[2], W = ms[3];
    Var acc;
    for (const auto& cap : capture) {
        const int64_t L = t.val(cap.head_avg).shape.back();
        if (v_star_index < 0 || v_star_index >= L)
            throw std::invalid_argument("attention_loss: no [V*] map at that index");
        Var col = t.select_last(cap.head_avg, v_star_index);       // (N, HW)
        Var img = t.reshape(col, {N, 1, cap.h, cap.w});
        Var up = t.resize_bilinear(img, H, W);
        acc = acc.valid() ? t.add(acc, up) : up;
    }
    acc = t.scale(acc, T(1) / T(capture.size()));
    Var diff = t.sub(acc, mask);
    return t.mean_all(t.mul(diff, diff));
}

template <class T>
Var combined_loss_t(BasicTape<T>& t, Var l_def, Var l_obj, Var l_attn, const LossWeights& w) {
    w.validate();
    Var s = t.scale(l_def, T(w.lambda_def));
    s = t.add(s, t.scale(l_obj, T(w.lambda_obj)));
    return t.add(s, t.scale(l_attn, T(w.lambda_attn)));
}

// explicit instantiations
template BasicTensor<float> adjusted_mask(const BasicTensor<float>&, double);
template BasicTensor<double> adjusted_mask(const BasicTensor<double>&, double);
template double defect_loss(const BasicTensor<float>&, const BasicTensor<float>&,
                            const BasicTensor<float>&);
template double defect_loss(const BasicTensor<double>&, const BasicTensor<double>&,
                            const BasicTensor<double>&);
template double object_loss(const BasicTensor<float>&, const BasicTensor<float>&,
                            const BasicTensor<float>&);
template double object_loss(const BasicTensor<double>&, const BasicTensor<double>&,
                            const BasicTensor<double>&);
template Var defect_loss_t(BasicTape<float>&, Var, Var, Var);
template Var defect_loss_t(BasicTape<double>&, Var, Var, Var);
template Var object_loss_t(BasicTape<float>&, Var, Var, Var);
template Var object_loss_t(BasicTape<double>&, Var, Var, Var);
template Var attention_loss_t(BasicTape<float>&, const std::vector<AttnCaptureVar>&, int64_t, Var);
template Var attention_loss_t(BasicTape<double>&, const std::vector<AttnCaptureVar>&, int64_t,
                              Var);
template Var combined_loss_t(BasicTape<float>&, Var, Var, Var, const LossWeights&);
template Var combined_loss_t(BasicTape<double>&, Var, Var, Var, const LossWeights&);

}  // namespace defectgen
