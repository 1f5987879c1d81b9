#include "cxrgen/generator.hpp"

#include <cmath>

#include "cxrgen/errors.hpp"

namespace cxrgen {

// ---- decoder --------------------------------------------------------------

DecoderParams DecoderParams::init(const DecoderConfig& cfg, Rng& rng) {
    if (cfg.vocab < 5 || cfg.d < 1 || cfg.s < 1 || cfg.blocks < 1 || cfg.d_vision < 1 ||
        cfg.max_length < 2) {
        throw ContractError("DecoderParams: invalid config (vocab " + std::to_string(cfg.vocab) +
                            ", d " + std::to_string(cfg.d) + ", s " + std::to_string(cfg.s) +
                            ", blocks " + std::to_string(cfg.blocks) + ", d_vision " +
                            std::to_string(cfg.d_vision) + ", max_length " +
                            std::to_string(cfg.max_length) + ")");
    }
    DecoderParams p;
    p.cfg = cfg;
    p.embed = Tensor::randn({cfg.vocab, cfg.d}, rng, 0.02).set_requires_grad(true);
    p.mapper = Tensor::randn({cfg.d_vision, cfg.d}, rng,
                             1.0 / std::sqrt(static_cast<double>(cfg.d_vision)))
                   .set_requires_grad(true);
    p.blocks.reserve(static_cast<std::size_t>(cfg.blocks));
    for (std::int64_t k = 0; k < cfg.blocks; ++k) {
        p.blocks.push_back(MambaBlockParams::init(cfg.d, cfg.s, rng));
    }
    p.out_gain = Tensor::full({cfg.d}, 1.0).set_requires_grad(true);
    p.head = Tensor::zeros({cfg.d, cfg.vocab}).set_requires_grad(true);
    return p;
}

void DecoderParams::visit(const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("embed", embed);
    fn("mapper", mapper);
    for (std::size_t k = 0; k < blocks.size(); ++k) {
        blocks[k].visit("block" + std::to_string(k) + ".", fn);
    }
    fn("out_gain", out_gain);
    fn("head", head);
}

std::vector<Tensor> DecoderParams::all() {
    std::vector<Tensor> out;
    visit([&](const std::string&, Tensor& t) { out.push_back(t); });
    return out;
}

std::vector<Tensor> DecoderParams::decoder_weights() {
    std::vector<Tensor> out;
    visit([&](const std::string& name, Tensor& t) {
        if (name != "mapper") out.push_back(t);
    });
    return out;
}

Tensor decoder_logits(DecoderParams& p, const Tensor& rows) {
    if (rows.rank() != 2 || rows.dim(1) != p.cfg.d) {
        throw ShapeError("decoder_logits: rows " + shape_str(rows.shape()) +
                         " do not match decoder width " + std::to_string(p.cfg.d));
    }
    Tensor x = rows;
    for (MambaBlockParams& blk : p.blocks) x = mamba_block(x, blk);
    return matmul(rms_norm(x, p.out_gain), p.head);
}

std::vector<std::int64_t> prompt_ids(const DecoderConfig& cfg, const Vocab& vocab) {
    const std::vector<std::int64_t> ids = vocab.encode(cfg.prompt, /*add_bos_eos=*/false);
    for (std::int64_t id : ids) {
        if (id == Vocab::kUnk) {
            throw ContractError(
                "prompt_ids: prompt contains a word unknown to the vocabulary; build the "
                "vocabulary with the prompt text included");
        }
    }
    return ids;
}

std::vector<std::int64_t> strip_special(const std::vector<std::int64_t>& ids) {
    std::vector<std::int64_t> out;
    for (std::int64_t id : ids) {
        if (id == Vocab::kPad || id == Vocab::kEos) break;
        out.push_back(id);
    }
    return out;
}

Tensor sft_loss(DecoderParams& p, const Tensor& visual_tokens,
                const std::vector<std::int64_t>& prompt,
                const std::vector<std::int64_t>& report_ids) {
    if (visual_tokens.rank() != 2 || visual_tokens.dim(1) != p.cfg.d_vision) {
        throw ShapeError("sft_loss: visual tokens " + shape_str(visual_tokens.shape()) +
                         " do not match mapper input width " + std::to_string(p.cfg.d_vision));
    }
    if (report_ids.empty()) throw ContractError("sft_loss: empty report target");
    auto check_ids = [&](const std::vector<std::int64_t>& ids, const char* what, bool special_ok) {
        for (std::int64_t id : ids) {
            if (id < 0 || id >= p.cfg.vocab) {
                throw ContractError("sft_loss: " + std::string(what) + " id " + std::to_string(id) +
                                    " outside vocabulary of " + std::to_string(p.cfg.vocab));
            }
            if (!special_ok && (id == Vocab::kPad || id == Vocab::kBos || id == Vocab::kEos)) {
                throw ContractError("sft_loss: " + std::string(what) +
                                    " contains special token id " + std::to_string(id) +
                                    "; strip padding first");
            }
        }
    };
    check_ids(prompt, "prompt", true);
    check_ids(report_ids, "report", false);

    const std::int64_t t = static_cast<std::int64_t>(report_ids.size());
    std::vector<std::int64_t> in_ids;
    in_ids.reserve(static_cast<std::size_t>(t) + 1);
    in_ids.push_back(Vocab::kBos);
    in_ids.insert(in_ids.end(), report_ids.begin(), report_ids.end());

    std::vector<Tensor> parts;
    parts.push_back(matmul(visual_tokens, p.mapper));
    if (!prompt.empty()) parts.push_back(gather_rows(p.embed, prompt));
    parts.push_back(gather_rows(p.embed, in_ids));
    const Tensor rows = concat_rows(parts);

    const Tensor logits = decoder_logits(p, rows);
    const std::int64_t base = rows.dim(0) - (t + 1);  // row emitting the first report token
    std::vector<std::int64_t> targets(report_ids.begin(), report_ids.end());
    targets.push_back(Vocab::kEos);
    return reduce_mean_all(cross_entropy_rows(slice_rows(logits, base, t + 1), targets));
}

// ---- incremental decoding -------------------------------------------------

DecoderStepper::DecoderStepper(DecoderParams& p) : p_(&p) {
    NoGradGuard ng;
    a_eff_.reserve(p.blocks.size());
    h_.reserve(p.blocks.size());
    for (MambaBlockParams& blk : p.blocks) {
        a_eff_.push_back(scale(exp(blk.a_log), -1.0));
        h_.emplace_back(static_cast<std::size_t>(blk.d * blk.s), 0.0);
    }
}

std::vector<double> DecoderStepper::feed(const Tensor& row) {
    if (row.rank() != 2 || row.dim(0) != 1 || row.dim(1) != p_->cfg.d) {
        throw ShapeError("DecoderStepper: expected one row of width " +
                         std::to_string(p_->cfg.d) + ", got " + shape_str(row.shape()));
    }
    NoGradGuard ng;
    Tensor x = row;
    for (std::size_t k = 0; k < p_->blocks.size(); ++k) {
        MambaBlockParams& blk = p_->blocks[k];
        const std::int64_t d = blk.d, s = blk.s;
        Tensor xn = rms_norm(x, blk.norm_gain);
        Tensor u = matmul(xn, blk.w_in);
        Tensor delta = softplus(add(matmul(u, blk.w_delta), blk.delta_bias));
        Tensor b = matmul(u, blk.w_b);
        Tensor c = matmul(u, blk.w_c);
        auto bars = discretize(delta, a_eff_[k], b);

        // The scan step mirrors the full kernel's expression shapes so the
        // incremental path stays bitwise identical to decoder_logits.
        Tensor y_row = Tensor::zeros({1, d});
        {
            const double* pu = u.data().data();
            const double* pa = bars.first.data().data();
            const double* pb = bars.second.data().data();
            const double* pc = c.data().data();
            const double* pd = blk.d_skip.data().data();
            double* hs = h_[k].data();
            double* po = y_row.data().data();
            for (std::int64_t i = 0; i < d; ++i) {
                const std::int64_t base = i * s;
                const double uv = pu[i];
                const double* arow = pa + base;
                const double* brow = pb + base;
                double* hrow = hs + base;
                double y = 0.0;
                for (std::int64_t j = 0; j < s; ++j) {
                    hrow[j] = arow[j] * hrow[j] + brow[j] * uv;
                    y += pc[j] * hrow[j];
                }
                po[i] = y + pd[i] * uv;
            }
        }
        Tensor gate = silu(matmul(xn, blk.w_gate));
        Tensor projected = matmul(mul(y_row, gate), blk.w_out);
        x = add(x, swiglu(projected, blk.sw_in1, blk.sw_in2, blk.sw_out));
    }
    const Tensor logits = matmul(rms_norm(x, p_->out_gain), p_->head);
    return logits.data();
}

std::vector<double> log_softmax_vec(const std::vector<double>& logits) {
    if (logits.empty()) throw ContractError("log_softmax_vec: empty logits");
    double m = logits[0];
    for (double v : logits) m = std::max(m, v);
    double se = 0.0;
    for (double v : logits) se += std::exp(v - m);
    const double lse = m + std::log(se);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

std::vector<double> DecoderSource::step(std::int64_t tok) {
    NoGradGuard ng;
    last = stepper.feed(gather_rows(params->embed, {tok}));
    return last;
}

DecoderSource make_decoder_source(DecoderParams& p, const Tensor& visual_tokens,
                                  const std::vector<std::int64_t>& prompt) {
    if (visual_tokens.rank() != 2 || visual_tokens.dim(1) != p.cfg.d_vision) {
        throw ShapeError("make_decoder_source: visual tokens " + shape_str(visual_tokens.shape()) +
                         " do not match mapper input width " + std::to_string(p.cfg.d_vision));
    }
    NoGradGuard ng;
    DecoderSource src{&p, DecoderStepper(p), {}};
    const Tensor mapped = matmul(visual_tokens, p.mapper);
    for (std::int64_t r = 0; r < mapped.dim(0); ++r) {
        src.last = src.stepper.feed(slice_rows(mapped, r, 1));
    }
    for (std::int64_t id : prompt) {
        src.last = src.stepper.feed(gather_rows(p.embed, {id}));
    }
    src.last = src.stepper.feed(gather_rows(p.embed, {Vocab::kBos}));
    return src;
}

GenerationResult generate(DecoderParams& p, const Tensor& visual_tokens,
                          const std::vector<std::int64_t>& prompt, const Vocab& vocab,
                          std::int64_t beam_width) {
    if (beam_width < 1) {
        throw ContractError("generate: beam width must be at least 1, got " +
                            std::to_string(beam_width));
    }
    const DecoderSource src = make_decoder_source(p, visual_tokens, prompt);
    GenerationResult r = beam_width == 1
                             ? decode_greedy(src, Vocab::kEos, p.cfg.max_length)
                             : decode_beam(src, Vocab::kEos, p.cfg.max_length, beam_width);
    r.text = vocab.decode(r.ids);
    return r;
}

}  // namespace cxrgen
