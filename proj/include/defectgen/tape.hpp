#ifndef DEFECTGEN_TAPE_HPP
#define DEFECTGEN_TAPE_HPP

#include <cstdint>
#include <functional>
#include <vector>

#include "defectgen/tensor.hpp"

namespace defectgen {

// Handle into a tape. Valid only for the tape that created it.
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. One tape per training step: ops append nodes, backward()
// sweeps them in reverse creation order, then gradients of leaf nodes are
// accumulated into their registered sinks in creation order (deterministic).
//
// Constants never receive gradients, and nodes that no gradient can reach are
// skipped, so a frozen parameter entered as a constant costs nothing in the
// backward pass.
template <class T>
class BasicTape {
  public:
    using Tens = BasicTensor<T>;

    Var leaf(const Tens& value, Tens* grad_sink);
    Var constant(Tens value);

    const Tens& val(Var v) const { return nodes_[v.id].value; }
    const Tens& grad_of(Var v) const { return nodes_[v.id].grad; }
    bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
    int64_t node_count() const { return static_cast<int64_t>(nodes_.size()); }

    void backward(Var scalar_loss);

    // elementwise
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, T c);
    Var silu(Var a);

    // reductions
    Var mean_all(Var a);

    // dense / conv
    Var linear(Var x, Var w, Var b);  // x (R,K), w (K,N), b (N) or invalid Var
    Var conv2d(Var x, Var w, Var b, int64_t stride, int64_t pad);
    Var groupnorm(Var x, Var gamma, Var beta, int64_t groups, T eps = T(1e-5));

    // attention pieces
    Var softmax_last(Var x);                 // softmax over the last dim
    Var bmm_nn(Var a, Var b);                // (B,M,K)x(B,K,N)
    Var bmm_nt(Var a, Var b);                // (B,M,K)x(B,N,K)^T
    Var mean_heads(Var x, int64_t heads);    // (N*h,Q,L) -> (N,Q,L)
    Var select_last(Var x, int64_t index);   // (A,B,L) -> (A,B)

    // layout
    Var reshape(Var x, std::vector<int64_t> shape);
    Var transpose_12(Var x);                 // (A,B,C[,D]) -> (A,C,B[,D])
    Var concat_channels(Var a, Var b);       // along dim 1 of NCHW

    // spatial
    Var upsample_nearest2(Var x);
    Var avgpool(Var x, int64_t factor);
    Var resize_bilinear(Var x, int64_t H2, int64_t W2);

    // embeddings / broadcasts
    Var gather_rows(Var table, std::vector<int64_t> ids);
    Var add_cycled_rows(Var x, Var p);       // x (N*L,d) + p (L,d) tiled over N
    Var add_channel_bias(Var x, Var t);      // x (N,C,H,W) + t (N,C)
    Var mul_bcast1(Var x, Var m);            // x (N,C,H,W) * m (N,1,H,W)

    // fused losses
    Var focal_loss_mean(Var logits, Var target, T gamma, T balance);  // balance<0: unweighted
    Var softmax_xent_mean(Var logits, std::vector<int64_t> labels);

  private:
    struct Node {
        Tens value;
        Tens grad;
        bool needs_grad = false;
        Tens* sink = nullptr;
        std::function<void()> back;
    };

    std::vector<Node> nodes_;

    Var push(Tens value, bool needs_grad, std::function<void()> back);
    Tens& grad_acc(int32_t id);
    void add_grad(int32_t id, const Tens& g);
};

using Tape = BasicTape<float>;
using DTape = BasicTape<double>;

extern template class BasicTape<float>;
extern template class BasicTape<double>;

}  // namespace defectgen

#endif
