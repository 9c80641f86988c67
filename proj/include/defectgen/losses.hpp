#ifndef DEFECTGEN_LOSSES_HPP
#define DEFECTGEN_LOSSES_HPP

#include <random>
#include <vector>

#include "defectgen/model.hpp"
#include "defectgen/tape.hpp"
#include "defectgen/tensor.hpp"

namespace defectgen {

// The three training loss terms, the random-box mask, and the adjusted mask.
// Every term is normalized by the mean over all elements so values are
// comparable across resolutions and batch sizes.

struct LossWeights {
    double lambda_def = 0.5;
    double lambda_obj = 0.2;
    double lambda_attn = 0.05;
    double alpha = 0.3;  // background weight inside the adjusted mask
    void validate() const;
};

struct BoxMaskParams {
    int64_t n_boxes = 30;
    double min_side_frac = 0.03;
    double max_side_frac = 0.25;
    void validate() const;
};

// Union of n axis-aligned boxes. Side lengths are uniform in
// [min_side_frac*S, max_side_frac*S] per axis, positions uniform over the
// placements that keep the box inside the image. Binary output (H,W).
Tensor random_box_mask(std::mt19937_64& rng, const BoxMaskParams& params, int64_t H, int64_t W);

// M' = M + alpha * (1 - M)
template <class T>
BasicTensor<T> adjusted_mask(const BasicTensor<T>& m, double alpha);

// ---- plain evaluations (double accumulation) ----

// mean over all elements of ||M (x) (eps - eps_pred)||^2; mask is (N,1,H,W)
// or (H,W) broadcast across the batch.
template <class T>
double defect_loss(const BasicTensor<T>& eps, const BasicTensor<T>& eps_pred,
                   const BasicTensor<T>& mask);
template <class T>
double object_loss(const BasicTensor<T>& eps, const BasicTensor<T>& eps_pred,
                   const BasicTensor<T>& m_prime);

// [V*] maps from captured decoder layers: average heads, resize each layer to
// the mask size, average layers, then mean squared difference to the mask.
double attention_loss(const AttentionStack& stack, int64_t v_star_index, const Tensor& mask);

double combined_loss(double l_def, double l_obj, double l_attn, const LossWeights& w);

// ---- tape versions used by the trainer (and the gradient suite) ----

template <class T>
Var defect_loss_t(BasicTape<T>& t, Var eps, Var eps_pred, Var mask);
template <class T>
Var object_loss_t(BasicTape<T>& t, Var eps, Var eps_pred, Var m_prime);
template <class T>
Var attention_loss_t(BasicTape<T>& t, const std::vector<AttnCaptureVar>& capture,
                     int64_t v_star_index, Var mask);
template <class T>
Var combined_loss_t(BasicTape<T>& t, Var l_def, Var l_obj, Var l_attn, const LossWeights& w);

}  // namespace defectgen

#endif
