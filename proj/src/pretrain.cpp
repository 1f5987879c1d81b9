#include "cxrgen/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cxrgen/errors.hpp"

namespace cxrgen {

Tensor ar_loss(const Tensor& encoded, const Tensor& head, const Tensor& targets) {
    if (encoded.rank() != 2 || encoded.dim(0) < 2) {
        throw ContractError("ar_loss: need at least two tokens to form a prediction");
    }
    if (targets.shape() != encoded.shape()) {
        throw ShapeError("ar_loss: targets must match the encoded token shape");
    }
    const std::int64_t n = encoded.dim(0);
    Tensor preds = matmul(slice_rows(encoded, 0, n - 1), head);
    Tensor diff = sub(preds, slice_rows(targets, 1, n - 1));
    return reduce_mean_all(mul(diff, diff));
}

Tensor contrastive_loss(const Tensor& img_emb, const Tensor& txt_emb, const Tensor& tau) {
    if (img_emb.rank() != 2 || txt_emb.shape() != img_emb.shape()) {
        throw ShapeError("contrastive_loss: embeddings must share a [B, E] shape");
    }
    const std::int64_t b = img_emb.dim(0), e = img_emb.dim(1);
    if (b < 2) throw ContractError("contrastive_loss: batch of " + std::to_string(b) + " has no negatives");
    if (tau.numel() != 1) throw ContractError("contrastive_loss: tau must be a single value");
    if (tau.data()[0] <= 0.0) throw ContractError("contrastive_loss: tau must be positive");
    for (const Tensor* emb : {&img_emb, &txt_emb}) {
        for (std::int64_t r = 0; r < b; ++r) {
            double norm = 0.0;
            for (std::int64_t j = 0; j < e; ++j) {
                const double v = emb->data()[static_cast<std::size_t>(r * e + j)];
                norm += v * v;
            }
            if (std::fabs(std::sqrt(norm) - 1.0) > 1e-6) {
                throw ContractError("contrastive_loss: row " + std::to_string(r) +
                                    " is not unit-norm");
            }
        }
    }
    Tensor logits = div(matmul(img_emb, transpose2d(txt_emb)), tau);
    std::vector<std::int64_t> diag(static_cast<std::size_t>(b));
    std::iota(diag.begin(), diag.end(), 0);
    Tensor row_ce = reduce_mean_all(cross_entropy_rows(logits, diag));
    Tensor col_ce = reduce_mean_all(cross_entropy_rows(transpose2d(logits), diag));
    return scale(add(row_ce, col_ce), 0.5);
}

std::int64_t mae_mask_count(std::int64_t n, double mask_ratio) {
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) {
        throw ContractError("mae_mask_count: mask_ratio must lie strictly inside (0, 1)");
    }
    const std::int64_t k = static_cast<std::int64_t>(std::floor(mask_ratio * static_cast<double>(n)));
    if (k <= 0 || k >= n) {
        throw ContractError("mae_mask_count: mask of " + std::to_string(k) + " out of " +
                            std::to_string(n) + " patches is degenerate");
    }
    return k;
}

Tensor mae_loss_baseline(const Tensor& image, double mask_ratio, VisionEncoder& enc,
                         const Tensor& head, Rng& rng) {
    Tensor patches = patchify(image, enc.cfg.patch);
    const std::int64_t n = patches.dim(0), pd = patches.dim(1);
    const std::int64_t k = mae_mask_count(n, mask_ratio);
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::vector<std::int64_t> masked(order.begin(), order.begin() + k);
    std::sort(masked.begin(), masked.end());

    Tensor keep = Tensor::full({n, pd}, 1.0);
    for (std::int64_t idx : masked) {
        std::fill_n(keep.data().data() + idx * pd, pd, 0.0);
    }
    Tensor tokens = embed_patches(mul(patches, keep), enc.proj, enc.pos);
    const GridShape grid{image.dim(0) / enc.cfg.patch, image.dim(1) / enc.cfg.patch};
    Tensor encoded = enc.forward_tokens(tokens, VisionMode::MultiDir, grid);
    Tensor recon = matmul(encoded, head);
    Tensor diff = sub(gather_rows(recon, masked), gather_rows(patches, masked));
    return reduce_mean_all(mul(diff, diff));
}

double Schedule::lr_at(std::int64_t step) const {
    const std::int64_t total = total_steps();
    const std::int64_t warm = warmup_epochs * steps_per_epoch;
    if (step < 0 || step > total) {
        throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total) + "]");
    }
    if (warm > 0 && step <= warm) {
        return peak() * static_cast<double>(step) / static_cast<double>(warm);
    }
    if (total == warm) return peak();
    const double u = static_cast<double>(step - warm) / static_cast<double>(total - warm);
    return peak() * 0.5 * (1.0 + std::cos(u * 3.14159265358979323846));
}

AdamW::AdamW(std::vector<Tensor> params, double weight_decay)
    : weight_decay(weight_decay), params_(std::move(params)) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    }
}

void AdamW::step(double lr) {
    const std::int64_t stepping = step_count_ + 1;
    for (Tensor& p : params_) {
        for (double g : p.grad()) {
            if (!std::isfinite(g)) {
                throw TrainingError("adamw_step: non-finite gradient at step " +
                                    std::to_string(stepping));
            }
        }
    }
    step_count_ = stepping;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& p = params_[pi];
        double* pv = p.data().data();
        const double* gv = p.grad().data();
        double* m = m_[pi].data();
        double* v = v_[pi].data();
        const std::int64_t n = p.numel();
        for (std::int64_t i = 0; i < n; ++i) {
            const double g = gv[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            pv[i] -= lr * weight_decay * pv[i] + lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

void AdamW::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

}  // namespace cxrgen
