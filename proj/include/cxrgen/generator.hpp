#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cxrgen/encoders.hpp"
#include "cxrgen/errors.hpp"
#include "cxrgen/ssm.hpp"
#include "cxrgen/tensor.hpp"

namespace cxrgen {

// ---- decoder --------------------------------------------------------------

struct DecoderConfig {
    std::int64_t vocab = 0;
    std::int64_t d = 128;
    std::int64_t s = 16;
    std::int64_t blocks = 4;
    std::int64_t d_vision = 128;   // width of incoming visual tokens
    std::int64_t max_length = 96;  // cap on generated report tokens
    std::string prompt =
        "Generate a comprehensive and detailed diagnosis report for this chest X-ray image.";
};

// Causal report decoder: token embeddings (order is carried by the causal
// scan, so there are no positional embeddings), a stack of Mamba blocks, a
// final rms-norm, and a linear vocabulary head.  The visual mapper projects
// vision-encoder tokens into the decoder width so they can lead the
// sequence.
struct DecoderParams {
    DecoderConfig cfg;
    Tensor embed;   // [V, D]
    Tensor mapper;  // [D_vision, D]
    std::vector<MambaBlockParams> blocks;
    Tensor out_gain;  // [D]
    Tensor head;      // [D, V]; zero at init => exactly uniform start

    static DecoderParams init(const DecoderConfig& cfg, Rng& rng);

    void visit(const std::function<void(const std::string&, Tensor&)>& fn);
    std::vector<Tensor> all();
    // Everything except the visual mapper: the set held fixed when the
    // decoder is frozen (the mapper and the vision encoder stay trainable).
    std::vector<Tensor> decoder_weights();
};

// Runs embedded rows [L, D] through the block stack, final norm, and head;
// returns per-position next-token logits [L, V].
Tensor decoder_logits(DecoderParams& p, const Tensor& rows);

// Tokenizes cfg.prompt with the vocabulary; ContractError if any prompt
// word is unknown (the vocabulary must be built with the prompt included).
std::vector<std::int64_t> prompt_ids(const DecoderConfig& cfg, const Vocab& vocab);

// Longest prefix of ids containing neither the pad nor the eos token
// (ingestion helper: everything after eos is padding by construction).
std::vector<std::int64_t> strip_special(const std::vector<std::int64_t>& ids);

// Teacher-forced loss for one sample.  The input sequence is
// [mapped visual tokens] ++ [prompt embeddings] ++ [bos, w1..wT embeddings];
// the loss is the mean negative log-likelihood of [w1..wT, eos] at the
// report positions only (visual and prompt rows are excluded).
// report_ids must be nonempty and free of pad/bos/eos (ContractError).
Tensor sft_loss(DecoderParams& p, const Tensor& visual_tokens,
                const std::vector<std::int64_t>& prompt, const std::vector<std::int64_t>& report_ids);

// ---- incremental decoding -------------------------------------------------

// O(L) decode loop: one embedded row in, next-token logits out, carrying
// the per-block scan states.  Feeding a sequence row-by-row reproduces
// decoder_logits row-for-row bitwise.
class DecoderStepper {
  public:
    explicit DecoderStepper(DecoderParams& p);

    // Processes one embedded row [1, D]; returns the logits row it induces.
    std::vector<double> feed(const Tensor& row);

  private:
    DecoderParams* p_;
    std::vector<Tensor> a_eff_;           // cached -exp(a_log) per block
    std::vector<std::vector<double>> h_;  // per block scan carry [D * S]
};

enum class StopReason { Eos, MaxLength };

struct GenerationResult {
    std::string text;
    std::vector<std::int64_t> ids;  // report tokens (eos excluded)
    std::vector<double> logprobs;   // one per emitted id, all <= 0
    StopReason stop = StopReason::MaxLength;
};

// Numerically-shifted log softmax of a logits row.
std::vector<double> log_softmax_vec(const std::vector<double>& logits);

// The model-backed token source for the decode drivers: start() gives the
// log-space-ready logits after the primed prefix, step(tok) commits a token
// and returns the next logits.  Copyable so beam search can branch.
struct DecoderSource {
    DecoderParams* params = nullptr;
    DecoderStepper stepper;
    std::vector<double> last;

    std::vector<double> start() const { return last; }
    std::vector<double> step(std::int64_t tok);
};

// Primes a stepper with [mapped visual] ++ [prompt] ++ [bos] rows.
DecoderSource make_decoder_source(DecoderParams& p, const Tensor& visual_tokens,
                                  const std::vector<std::int64_t>& prompt);

// Greedy decoding: argmax per step, ties broken toward the lowest token id;
// stops at eos (not emitted) or after max_length tokens.
template <typename Source>
GenerationResult decode_greedy(Source src, std::int64_t eos, std::int64_t max_length) {
    GenerationResult r;
    std::vector<double> dist = log_softmax_vec(src.start());
    for (;;) {
        if (static_cast<std::int64_t>(r.ids.size()) == max_length) {
            r.stop = StopReason::MaxLength;
            break;
        }
        std::int64_t best = 0;
        for (std::int64_t v = 1; v < static_cast<std::int64_t>(dist.size()); ++v) {
            if (dist[static_cast<std::size_t>(v)] > dist[static_cast<std::size_t>(best)]) best = v;
        }
        if (best == eos) {
            r.stop = StopReason::Eos;
            break;
        }
        r.ids.push_back(best);
        r.logprobs.push_back(dist[static_cast<std::size_t>(best)]);
        dist = log_softmax_vec(src.step(best));
    }
    return r;
}

// Beam search over summed log-probabilities, width k; candidates tie-break
// by lower token id then earlier beam.  A beam retires when eos is selected
// or max_length is reached; the final answer maximizes sum / token-count
// (the 1/len normalization, counting eos when it terminated the beam).
template <typename Source>
GenerationResult decode_beam(const Source& source, std::int64_t eos, std::int64_t max_length,
                             std::int64_t width) {
    if (width < 1) {
        throw ContractError("decode_beam: beam width must be at least 1, got " +
                            std::to_string(width));
    }
    struct Beam {
        Source src;
        std::vector<double> dist;
        std::vector<std::int64_t> ids;
        std::vector<double> lps;
        double sum = 0.0;
    };
    struct Done {
        std::vector<std::int64_t> ids;
        std::vector<double> lps;
        double norm = 0.0;
        StopReason stop = StopReason::Eos;
    };
    std::vector<Beam> live;
    live.push_back(Beam{source, log_softmax_vec(source.start()), {}, {}, 0.0});
    std::vector<Done> done;
    for (std::int64_t step = 0; !live.empty(); ++step) {
        if (step == max_length) {
            for (Beam& b : live) {
                done.push_back(Done{std::move(b.ids), std::move(b.lps),
                                    b.sum / static_cast<double>(std::max<std::size_t>(
                                                1, b.ids.size())),
                                    StopReason::MaxLength});
            }
            break;
        }
        struct Cand {
            double score;
            std::size_t beam;
            std::int64_t tok;
        };
        std::vector<Cand> cands;
        for (std::size_t bi = 0; bi < live.size(); ++bi) {
            const Beam& b = live[bi];
            for (std::int64_t v = 0; v < static_cast<std::int64_t>(b.dist.size()); ++v) {
                cands.push_back(Cand{b.sum + b.dist[static_cast<std::size_t>(v)], bi, v});
            }
        }
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.tok != b.tok) return a.tok < b.tok;
            return a.beam < b.beam;
        });
        const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(width),
                                                       cands.size());
        std::vector<Beam> next;
        for (std::size_t ci = 0; ci < keep; ++ci) {
            const Cand& c = cands[ci];
            const Beam& b = live[c.beam];
            if (c.tok == eos) {
                Done d;
                d.ids = b.ids;
                d.lps = b.lps;
                d.norm = c.score / static_cast<double>(b.ids.size() + 1);
                d.stop = StopReason::Eos;
                done.push_back(std::move(d));
            } else {
                Beam nb = b;
                nb.ids.push_back(c.tok);
                nb.lps.push_back(b.dist[static_cast<std::size_t>(c.tok)]);
                nb.sum = c.score;
                nb.dist = log_softmax_vec(nb.src.step(c.tok));
                next.push_back(std::move(nb));
            }
        }
        live = std::move(next);
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < done.size(); ++i) {
        if (done[i].norm > done[best].norm ||
            (done[i].norm == done[best].norm && done[i].ids < done[best].ids)) {
            best = i;
        }
    }
    GenerationResult r;
    r.ids = std::move(done[best].ids);
    r.logprobs = std::move(done[best].lps);
    r.stop = done[best].stop;
    return r;
}

// End-to-end generation from visual tokens: primes the prefix, decodes
// greedily (beam_width 1, the default) or with beam search, and
// detokenizes.  beam_width < 1 is a ContractError.
GenerationResult generate(DecoderParams& p, const Tensor& visual_tokens,
                          const std::vector<std::int64_t>& prompt, const Vocab& vocab,
                          std::int64_t beam_width = 1);

}  // namespace cxrgen
