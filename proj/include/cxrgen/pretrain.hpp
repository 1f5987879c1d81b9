#pragma once

#include <cstdint>
#include <vector>

#include "cxrgen/encoders.hpp"
#include "cxrgen/tensor.hpp"

namespace cxrgen {

// Next-token prediction loss for causal visual pre-training: project each
// encoded token through `head` (D -> D) and score it against the following
// target token.  Mean squared error over the (N-1)*D predicted coordinates.
// Callers pass detached targets so the loss cannot collapse the embedding.
// ContractError when fewer than two tokens are given.
Tensor ar_loss(const Tensor& encoded, const Tensor& head, const Tensor& targets);

// Symmetric in-batch contrastive loss on unit-norm rows: logits = img.txt^T /
// tau, cross entropy against the diagonal both row- and column-wise, averaged.
// tau is a learnable 1-element tensor.  ContractError on B < 2, a row whose
// norm deviates from 1 by more than 1e-6, or tau <= 0.
Tensor contrastive_loss(const Tensor& img_emb, const Tensor& txt_emb, const Tensor& tau);

// floor(mask_ratio * n) masked patches; ContractError when the mask would be
// empty or total.
std::int64_t mae_mask_count(std::int64_t n, double mask_ratio);

// Masked-reconstruction baseline: zero out a random floor(mask_ratio*N)
// subset of patches, encode the masked image (multi-directional mode), map
// tokens back to patch space with `head` ([D, P*P*3]), and take the mean
// squared error on the masked patches only.
Tensor mae_loss_baseline(const Tensor& image, double mask_ratio, VisionEncoder& enc,
                         const Tensor& head, Rng& rng);

// Linear warmup from 0 to peak = base_lr * batch / 256 over the warmup
// epochs, then cosine decay to 0 at the final step.
struct Schedule {
    double base_lr = 1.5e-4;
    std::int64_t warmup_epochs = 5;
    std::int64_t total_epochs = 100;
    std::int64_t steps_per_epoch = 1;
    std::int64_t batch = 256;

    double peak() const { return base_lr * static_cast<double>(batch) / 256.0; }
    std::int64_t total_steps() const { return total_epochs * steps_per_epoch; }

    // ContractError outside [0, total_steps()].
    double lr_at(std::int64_t step) const;
};

// Decoupled-weight-decay Adam over a fixed parameter list.  Gradients are
// read from each parameter's accumulated grad buffer; a non-finite gradient
// aborts the step (before any parameter moves) with the step index.
class AdamW {
  public:
    explicit AdamW(std::vector<Tensor> params, double weight_decay = 0.05);

    void step(double lr);
    void zero_grad();
    std::int64_t steps() const { return step_count_; }

    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay;

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    std::int64_t step_count_ = 0;
};

}  // namespace cxrgen
