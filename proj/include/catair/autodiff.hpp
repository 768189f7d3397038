#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "catair/tensor.hpp"

namespace catair {

// Reverse-mode autodiff over a dynamically recorded tape. Each op returns a
// Var holding a Node; backward() walks the graph in reverse topological order.
// Under NoGradGuard no graph is recorded, so inference keeps nothing alive.

struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily, same shape as value
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    bool requires_grad = false;

    Tensor& ensure_grad() {
        if (!grad.defined()) grad = Tensor(value.shape());
        return grad;
    }
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false)
        : n_(std::make_shared<Node>()) {
        n_->value = std::move(value);
        n_->requires_grad = requires_grad;
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Tensor& val() const { return n_->value; }
    Tensor& val() { return n_->value; }
    const Tensor& grad() const { return n_->grad; }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    void zero_grad() { if (n_) n_->grad = Tensor(); }

    std::shared_ptr<Node> node() const { return n_; }

    static Var wrap(std::shared_ptr<Node> n) {
        Var v;
        v.n_ = std::move(n);
        return v;
    }

private:
    std::shared_ptr<Node> n_;
};

// Grad recording is on by default; NoGradGuard disables it for its scope.
bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    bool prev;
};

// Runs reverse-mode accumulation from a scalar root (shape [1]). When
// release_graph is set, interior values and grads are freed as soon as they
// are consumed, which bounds peak memory during training.
void backward(const Var& root, bool release_graph = false);

// ---- elementwise and reductions ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& x);
Var add_scalar(const Var& x, Real s);
Var mul_scalar(const Var& x, Real s);
Var rsub_scalar(Real s, const Var& x);  // s - x
Var abs_op(const Var& x);
Var square(const Var& x);
Var exp_op(const Var& x);
Var sigmoid(const Var& x);
Var gelu(const Var& x);  // exact erf form
Var mean_all(const Var& x);  // -> [1]

// ---- shape plumbing ----
Var reshape(const Var& x, std::vector<int> shape);
Var concat_channels(const std::vector<Var>& xs);          // last-dim concat
Var slice_channels(const Var& x, int c0, int c1);         // last-dim slice [c0, c1)
Var concat_dim0(const std::vector<Var>& xs);
Var slice_batch(const Var& x, int b0, int b1);            // dim-0 slice
Var transpose_last2(const Var& x);                        // [N,R,K] -> [N,K,R]
Var split_heads(const Var& x, int heads);                 // [B,T,C] -> [B*h,T,C/h]
Var merge_heads(const Var& x, int heads);                 // inverse of split_heads

// ---- linear algebra ----
// y[..., co] = sum_ci x[..., ci] * w[co, ci] + b[co]; w is [Cout, Cin].
Var dense_lastdim(const Var& x, const Var& w, const Var& b);
Var dense_lastdim(const Var& x, const Var& w);
Var matmul2d(const Var& a, const Var& b);                 // [R,K] x [K,C]
Var bmm(const Var& a, const Var& b);                      // [N,R,K] x [N,K,M]
Var softmax_lastdim(const Var& x);
Var scale_per_head(const Var& x, const Var& s, int heads);  // x[n,..] * s[n % h]

// ---- convolutions (zero "same" padding, odd kernel) ----
Var conv2d(const Var& x, const Var& w, const Var& b);     // w [Cout,Cin,k,k]
Var dwconv(const Var& x, const Var& w, const Var& b);     // w [C,k,k]
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Real eps = 1e-6);

// ---- spatial rearrangement ----
Var pixel_unshuffle2(const Var& x);                       // [B,H,W,C] -> [B,H/2,W/2,4C]
Var pixel_shuffle2(const Var& x);                         // [B,H,W,C] -> [B,2H,2W,C/4]
Var bilinear_resize(const Var& x, int out_h, int out_w);  // align_corners = false
Var avgpool_tiles(const Var& x, int q);                   // [B,H,W,C] -> [B,H/q,W/q,C]
Var gap_hw(const Var& x);                                 // [B,H,W,C] -> [B,C]
Var scale_channels(const Var& x, const Var& s);           // x[b,h,w,c] * s[b,c]

// ---- patch plumbing ----
// Patches are q x q tiles in row-major patch order; P = (H/q)*(W/q).
Var map_to_patches(const Var& x, int q);                  // [B,H,W,C] -> [B,P,q*q,C]
Var patches_to_map(const Var& x, int h, int w, int q);    // inverse
// K/V windows of size wq x wq centred on each patch with stride q; zero padded,
// pad_before = ceil((wq-q)/2), pad_after = floor((wq-q)/2).
Var extract_windows(const Var& x, int q, int wq);         // [B,H,W,C] -> [B,P,wq*wq,C]
Var gather_dim1(const Var& x, std::vector<int> idx);      // [B,P,S,C] -> [B,n,S,C]
// Merges two disjoint row sets back into dim 1 of size p.
Var scatter_merge_dim1(int p, std::vector<int> idx_a, const Var& a,
                       std::vector<int> idx_b, const Var& b);
Var broadcast_mul_patch(const Var& h, const Var& x);      // h [B,P] * x [B,P,S,C]

// Hard threshold at 0.5 with straight-through gradient.
Var hard_threshold_st(const Var& x);

}  // namespace catair
