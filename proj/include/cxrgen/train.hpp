#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cxrgen/checkpoint.hpp"
#include "cxrgen/config.hpp"
#include "cxrgen/data.hpp"
#include "cxrgen/encoders.hpp"
#include "cxrgen/generator.hpp"
#include "cxrgen/tensor.hpp"

namespace cxrgen {

// One per-epoch record: "epoch=3 split=train loss=0.123456 lr=0.0001 acc=-"
// (acc renders as "-" for phases that have no accuracy notion).
std::string format_epoch_record(std::int64_t epoch, const std::string& split, double loss,
                                double lr, double acc, bool has_acc);

// Collect a model's named parameters with shared storage handles.
std::vector<std::pair<std::string, Tensor>> named_params(VisionEncoder& enc,
                                                         const std::string& prefix);
std::vector<std::pair<std::string, Tensor>> named_params(TextEncoder& enc,
                                                         const std::string& prefix);
std::vector<std::pair<std::string, Tensor>> named_params(DecoderParams& dec,
                                                         const std::string& prefix);

VisionConfig vision_config_from(const RunConfig& cfg);
TextConfig text_config_from(const RunConfig& cfg);
DecoderConfig decoder_config_from(const RunConfig& cfg, std::int64_t vocab_size);

// Vocabulary over the training-split reports plus the instruction prompt
// (whose words must never map to unk).
Vocab build_corpus_vocab(const Dataset& ds, const std::string& prompt);

// ---- stage 1: causal next-token visual pre-training ------------------------

struct Stage1Run {
    VisionEncoder encoder;
    Tensor ar_head;                  // [D, D]
    std::vector<double> epoch_loss;  // mean training loss per epoch
    std::vector<double> lr_trace;    // lr used at every optimizer step
    std::vector<std::string> log;
    Checkpoint ckpt;
};

// Trains the causal encoder to predict each patch embedding from its
// predecessors.  Deterministic given cfg's seed; writes `ckpt_path` when
// nonempty.  ContractError on an empty training split.
Stage1Run run_stage1(const Dataset& ds, const RunConfig& cfg, const std::string& ckpt_path);

// ---- masked-reconstruction pre-training baseline ----------------------------

struct MaeRun {
    VisionEncoder encoder;
    Tensor recon_head;  // [D, P*P*3]
    std::vector<double> epoch_loss;
    std::vector<double> lr_trace;
    std::vector<std::string> log;
    Checkpoint ckpt;
};

MaeRun run_mae(const Dataset& ds, const RunConfig& cfg, const std::string& ckpt_path);

// ---- stage 2: image-report contrastive alignment ---------------------------

struct Stage2Run {
    VisionEncoder vision;
    TextEncoder text;
    Tensor tau;                      // learnable temperature, clamped to [0.01, 1]
    std::vector<double> epoch_loss;
    std::vector<double> retrieval;   // held-out top-1 accuracy per epoch
    std::vector<double> lr_trace;
    std::vector<std::string> log;
    Checkpoint ckpt;
};

// `init_ckpt` (usually the stage-1 artifact) preloads the vision tower when
// nonempty; a config-hash warning goes to stderr.  Both encoders, both
// pooled projections, and the temperature train jointly on in-batch
// negatives.  ContractError when the training split holds fewer than
// stage2.batch pairs.
Stage2Run run_stage2(const Dataset& ds, const Vocab& vocab, const RunConfig& cfg,
                     const std::string& init_ckpt, const std::string& ckpt_path);

// Fraction of val-batch images whose highest-similarity report is their own
// (diagonal argmax over image->text similarities).
double retrieval_top1(VisionEncoder& vision, TextEncoder& text, const Dataset& ds,
                      const Vocab& vocab, const std::vector<std::size_t>& indices);

// The held-out retrieval batch: the first `count` validation samples with
// pairwise-distinct label sets, so every pair is genuinely distinguishable.
// ContractError when the split cannot supply them.
std::vector<std::size_t> retrieval_eval_indices(const Dataset& ds, std::int64_t count);

// ---- stage 3: supervised report fine-tuning --------------------------------

struct SftRun {
    VisionEncoder vision;
    DecoderParams decoder;
    std::vector<double> epoch_loss;
    std::vector<double> val_nll;     // one entry per validation pass
    std::vector<double> lr_trace;
    std::vector<std::string> log;
    std::int64_t rejected_over_length = 0;  // targets dropped at ingestion
    Checkpoint ckpt;
};

// Fine-tunes vision encoder + visual mapper (and, during the warm phase, the
// decoder) on teacher-forced report NLL.  `init_ckpt` preloads the vision
// tower (stage-2, stage-1, or baseline artifact).  Reports longer than
// decoder.max_length-1 ids are rejected at ingestion and counted, never
// truncated.  ContractError when rejection empties the training split.
SftRun train_sft(const Dataset& ds, const Vocab& vocab, const RunConfig& cfg,
                 const std::string& init_ckpt, const std::string& ckpt_path);

// Mean teacher-forced NLL over a set of samples (no gradients).
double mean_sft_nll(VisionEncoder& vision, DecoderParams& decoder, const Dataset& ds,
                    const Vocab& vocab, const std::vector<std::int64_t>& prompt,
                    const std::vector<std::size_t>& indices);

}  // namespace cxrgen
