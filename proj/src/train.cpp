#include "cxrgen/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <set>

#include "cxrgen/errors.hpp"
#include "cxrgen/pretrain.hpp"
#include "cxrgen/rng.hpp"
#include "cxrgen/ssm.hpp"

namespace cxrgen {

namespace {

// Seed-stream tags keep every stage's random draws independent.
constexpr std::uint64_t kStage1Init = 0x51A6E101, kStage1Shuffle = 0x51A6E102;
constexpr std::uint64_t kMaeInit = 0x3AE00001, kMaeShuffle = 0x3AE00002, kMaeMask = 0x3AE00003;
constexpr std::uint64_t kStage2Init = 0x51A6E201, kStage2Shuffle = 0x51A6E202;
constexpr std::uint64_t kStage3Init = 0x51A6E301, kStage3Shuffle = 0x51A6E302;

std::string fmt_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

Schedule make_schedule(const RunConfig& cfg, const std::string& stage,
                       std::int64_t steps_per_epoch) {
    Schedule s;
    s.base_lr = cfg.getf(stage + ".lr_base");
    s.warmup_epochs = cfg.geti(stage + ".warmup_epochs");
    s.total_epochs = cfg.geti(stage + ".epochs");
    s.steps_per_epoch = steps_per_epoch;
    s.batch = cfg.geti(stage + ".batch");
    return s;
}

void preload_vision(VisionEncoder& enc, const RunConfig& cfg, const std::string& init_ckpt) {
    if (init_ckpt.empty()) return;
    const Checkpoint ck = load_checkpoint(init_ckpt);
    auto dst = named_params(enc, "vision.");
    const std::string warn = load_into(ck, cfg.fingerprint(), dst);
    if (!warn.empty()) std::cerr << warn << "\n";
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

std::string format_epoch_record(std::int64_t epoch, const std::string& split, double loss,
                                double lr, double acc, bool has_acc) {
    std::string out = "epoch=" + std::to_string(epoch) + " split=" + split +
                      " loss=" + fmt_g(loss) + " lr=" + fmt_g(lr) + " acc=";
    out += has_acc ? fmt_g(acc) : std::string("-");
    return out;
}

std::vector<std::pair<std::string, Tensor>> named_params(VisionEncoder& enc,
                                                         const std::string& prefix) {
    std::vector<std::pair<std::string, Tensor>> out;
    enc.visit(prefix, [&](const std::string& n, Tensor& t) { out.emplace_back(n, t); });
    return out;
}

std::vector<std::pair<std::string, Tensor>> named_params(TextEncoder& enc,
                                                         const std::string& prefix) {
    std::vector<std::pair<std::string, Tensor>> out;
    enc.visit(prefix, [&](const std::string& n, Tensor& t) { out.emplace_back(n, t); });
    return out;
}

std::vector<std::pair<std::string, Tensor>> named_params(DecoderParams& dec,
                                                         const std::string& prefix) {
    std::vector<std::pair<std::string, Tensor>> out;
    dec.visit([&](const std::string& n, Tensor& t) { out.emplace_back(prefix + n, t); });
    return out;
}

VisionConfig vision_config_from(const RunConfig& cfg) {
    VisionConfig vc;
    vc.image_size = cfg.geti("data.image_size");
    vc.patch = cfg.geti("vision.patch");
    vc.d = cfg.geti("vision.d");
    vc.s = cfg.geti("vision.s");
    vc.blocks = cfg.geti("vision.blocks");
    vc.embed_dim = cfg.geti("embed_dim");
    return vc;
}

TextConfig text_config_from(const RunConfig& cfg) {
    TextConfig tc;
    tc.d = cfg.geti("text.d");
    tc.s = cfg.geti("text.s");
    tc.blocks = cfg.geti("text.blocks");
    tc.embed_dim = cfg.geti("embed_dim");
    tc.max_len = cfg.geti("text.max_len");
    return tc;
}

DecoderConfig decoder_config_from(const RunConfig& cfg, std::int64_t vocab_size) {
    DecoderConfig dc;
    dc.vocab = vocab_size;
    dc.d = cfg.geti("decoder.d");
    dc.s = cfg.geti("decoder.s");
    dc.blocks = cfg.geti("decoder.blocks");
    dc.d_vision = cfg.geti("vision.d");
    dc.max_length = cfg.geti("decoder.max_length");
    dc.prompt = cfg.gets("decoder.prompt");
    return dc;
}

Vocab build_corpus_vocab(const Dataset& ds, const std::string& prompt) {
    std::vector<std::string> corpus;
    for (std::size_t i : split_indices(ds, kSplitTrain)) {
        corpus.push_back(ds.samples[i].report);
    }
    corpus.push_back(prompt);
    return Vocab::build(corpus);
}

// ---- stage 1 ----------------------------------------------------------------

Stage1Run run_stage1(const Dataset& ds, const RunConfig& cfg, const std::string& ckpt_path) {
    const auto train = split_indices(ds, kSplitTrain);
    if (train.empty()) throw ContractError("stage 1: training split is empty");

    const std::uint64_t seed = static_cast<std::uint64_t>(cfg.geti("seed"));
    const VisionConfig vc = vision_config_from(cfg);
    Rng init_rng(Rng::mix(seed, kStage1Init));

    Stage1Run run{VisionEncoder::init(vc, init_rng), Tensor(), {}, {}, {}, {}};
    run.ar_head = Tensor::randn({vc.d, vc.d}, init_rng, 1.0 / std::sqrt(static_cast<double>(vc.d)))
                      .set_requires_grad(true);

    const std::int64_t batch = cfg.geti("stage1.batch");
    const std::int64_t epochs = cfg.geti("stage1.epochs");
    const std::int64_t n = static_cast<std::int64_t>(train.size());
    const std::int64_t spe = (n + batch - 1) / batch;
    const Schedule sched = make_schedule(cfg, "stage1", spe);

    std::vector<Tensor> params = run.encoder.all();
    params.push_back(run.ar_head);
    AdamW opt(params, cfg.getf("stage1.weight_decay"));

    const GridShape grid{vc.side_patches(), vc.side_patches()};
    std::int64_t step = 0;
    for (std::int64_t e = 0; e < epochs; ++e) {
        auto order = train;
        Rng erng(Rng::mix(Rng::mix(seed, kStage1Shuffle), static_cast<std::uint64_t>(e)));
        erng.shuffle(order);

        double loss_sum = 0.0;
        double lr = 0.0;
        for (std::int64_t b0 = 0; b0 < n; b0 += batch) {
            const std::int64_t bn = std::min(batch, n - b0);
            opt.zero_grad();
            for (std::int64_t k = 0; k < bn; ++k) {
                Tape tape;
                const Tensor img = sample_image(ds, order[static_cast<std::size_t>(b0 + k)]);
                const Tensor emb = run.encoder.embed(img);
                const Tensor out = run.encoder.forward_tokens(emb, VisionMode::Causal, grid);
                const Tensor loss = ar_loss(out, run.ar_head, emb.detach());
                loss_sum += loss.item();
                Tape::backward(scale(loss, 1.0 / static_cast<double>(bn)));
            }
            lr = sched.lr_at(step);
            run.lr_trace.push_back(lr);
            opt.step(lr);
            ++step;
        }
        const double mean_loss = loss_sum / static_cast<double>(n);
        run.epoch_loss.push_back(mean_loss);
        run.log.push_back(format_epoch_record(e + 1, "train", mean_loss, lr, 0.0, false));
    }

    run.ckpt.config_hash = cfg.fingerprint();
    run.ckpt.step = step;
    run.ckpt.tensors = named_params(run.encoder, "vision.");
    run.ckpt.tensors.emplace_back("ar_head", run.ar_head);
    if (!ckpt_path.empty()) save_checkpoint(ckpt_path, run.ckpt);
    return run;
}

// ---- masked-reconstruction baseline ----------------------------------------

MaeRun run_mae(const Dataset& ds, const RunConfig& cfg, const std::string& ckpt_path) {
    const auto train = split_indices(ds, kSplitTrain);
    if (train.empty()) throw ContractError("masked pre-training: training split is empty");

    const std::uint64_t seed = static_cast<std::uint64_t>(cfg.geti("seed"));
    const VisionConfig vc = vision_config_from(cfg);
    Rng init_rng(Rng::mix(seed, kMaeInit));

    MaeRun run{VisionEncoder::init(vc, init_rng), Tensor(), {}, {}, {}, {}};
    run.recon_head = Tensor::randn({vc.d, vc.patch_dim()},
                                   init_rng, 1.0 / std::sqrt(static_cast<double>(vc.d)))
                         .set_requires_grad(true);

    const double mask_ratio = cfg.getf("mae.mask_ratio");
    const std::int64_t batch = cfg.geti("mae.batch");
    const std::int64_t epochs = cfg.geti("mae.epochs");
    const std::int64_t n = static_cast<std::int64_t>(train.size());
    const std::int64_t spe = (n + batch - 1) / batch;
    const Schedule sched = make_schedule(cfg, "mae", spe);

    std::vector<Tensor> params = run.encoder.all();
    params.push_back(run.recon_head);
    AdamW opt(params, cfg.getf("mae.weight_decay"));

    std::int64_t step = 0;
    for (std::int64_t e = 0; e < epochs; ++e) {
        auto order = train;
        Rng erng(Rng::mix(Rng::mix(seed, kMaeShuffle), static_cast<std::uint64_t>(e)));
        erng.shuffle(order);
        Rng mask_rng(Rng::mix(Rng::mix(seed, kMaeMask), static_cast<std::uint64_t>(e)));

        double loss_sum = 0.0;
        double lr = 0.0;
        for (std::int64_t b0 = 0; b0 < n; b0 += batch) {
            const std::int64_t bn = std::min(batch, n - b0);
            opt.zero_grad();
            for (std::int64_t k = 0; k < bn; ++k) {
                Tape tape;
                const Tensor img = sample_image(ds, order[static_cast<std::size_t>(b0 + k)]);
                const Tensor loss =
                    mae_loss_baseline(img, mask_ratio, run.encoder, run.recon_head, mask_rng);
                loss_sum += loss.item();
                Tape::backward(scale(loss, 1.0 / static_cast<double>(bn)));
            }
            lr = sched.lr_at(step);
            run.lr_trace.push_back(lr);
            opt.step(lr);
            ++step;
        }
        const double mean_loss = loss_sum / static_cast<double>(n);
        run.epoch_loss.push_back(mean_loss);
        run.log.push_back(format_epoch_record(e + 1, "train", mean_loss, lr, 0.0, false));
    }

    run.ckpt.config_hash = cfg.fingerprint();
    run.ckpt.step = step;
    run.ckpt.tensors = named_params(run.encoder, "vision.");
    run.ckpt.tensors.emplace_back("recon_head", run.recon_head);
    if (!ckpt_path.empty()) save_checkpoint(ckpt_path, run.ckpt);
    return run;
}

// ---- stage 2 ----------------------------------------------------------------

std::vector<std::size_t> retrieval_eval_indices(const Dataset& ds, std::int64_t count) {
    std::vector<std::size_t> out;
    std::set<std::uint32_t> seen;
    for (std::size_t i : split_indices(ds, kSplitVal)) {
        if (static_cast<std::int64_t>(out.size()) == count) break;
        if (seen.insert(ds.samples[i].labels).second) out.push_back(i);
    }
    if (static_cast<std::int64_t>(out.size()) < count) {
        throw ContractError("validation split cannot supply " + std::to_string(count) +
                            " samples with pairwise-distinct label sets (found " +
                            std::to_string(out.size()) + ")");
    }
    return out;
}

double retrieval_top1(VisionEncoder& vision, TextEncoder& text, const Dataset& ds,
                      const Vocab& vocab, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ContractError("retrieval eval: empty index set");
    NoGradGuard ng;
    std::vector<std::vector<double>> img_rows, txt_rows;
    for (std::size_t i : indices) {
        const Tensor img = sample_image(ds, i);
        img_rows.push_back(vision.pooled(vision.forward(img, VisionMode::MultiDir)).data());
        txt_rows.push_back(text.pooled_ids(vocab.encode(ds.samples[i].report, true)).data());
    }
    std::int64_t hits = 0;
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::size_t best = 0;
        double best_sim = -2.0;
        for (std::size_t j = 0; j < indices.size(); ++j) {
            const double sim = dot(img_rows[i], txt_rows[j]);
            if (sim > best_sim) {
                best_sim = sim;
                best = j;
            }
        }
        if (best == i) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(indices.size());
}

Stage2Run run_stage2(const Dataset& ds, const Vocab& vocab, const RunConfig& cfg,
                     const std::string& init_ckpt, const std::string& ckpt_path) {
    const auto train = split_indices(ds, kSplitTrain);
    const std::int64_t batch = cfg.geti("stage2.batch");
    if (static_cast<std::int64_t>(train.size()) < batch) {
        throw ContractError("stage 2: training split holds " + std::to_string(train.size()) +
                            " pairs but the batch needs " + std::to_string(batch));
    }

    const std::uint64_t seed = static_cast<std::uint64_t>(cfg.geti("seed"));
    Rng init_rng(Rng::mix(seed, kStage2Init));
    Stage2Run run{VisionEncoder::init(vision_config_from(cfg), init_rng),
                  TextEncoder::init(text_config_from(cfg), vocab.size(), init_rng),
                  Tensor::scalar(cfg.getf("stage2.tau_init")).set_requires_grad(true),
                  {}, {}, {}, {}, {}};
    preload_vision(run.vision, cfg, init_ckpt);

    const std::int64_t epochs = cfg.geti("stage2.epochs");
    const std::int64_t n = static_cast<std::int64_t>(train.size());
    const std::int64_t spe = n / batch;  // partial batches are dropped
    const Schedule sched = make_schedule(cfg, "stage2", spe);

    std::vector<Tensor> params = run.vision.all();
    for (Tensor& t : run.text.all()) params.push_back(t);
    params.push_back(run.tau);
    AdamW opt(params, cfg.getf("stage2.weight_decay"));

    std::vector<std::size_t> eval_batch;
    try {
        eval_batch = retrieval_eval_indices(ds, cfg.geti("stage2.eval_batch"));
    } catch (const ContractError&) {
        // Tiny corpora (unit tests) cannot fill the retrieval batch; train
        // without the per-epoch accuracy probe rather than refusing.
    }

    std::int64_t step = 0;
    for (std::int64_t e = 0; e < epochs; ++e) {
        auto order = train;
        Rng erng(Rng::mix(Rng::mix(seed, kStage2Shuffle), static_cast<std::uint64_t>(e)));
        erng.shuffle(order);

        double loss_sum = 0.0;
        double lr = 0.0;
        for (std::int64_t b = 0; b < spe; ++b) {
            opt.zero_grad();
            Tape tape;
            std::vector<Tensor> img_parts, txt_parts;
            for (std::int64_t k = 0; k < batch; ++k) {
                const std::size_t idx = order[static_cast<std::size_t>(b * batch + k)];
                const Tensor img = sample_image(ds, idx);
                img_parts.push_back(run.vision.pooled(run.vision.forward(img, VisionMode::MultiDir)));
                txt_parts.push_back(
                    run.text.pooled_ids(vocab.encode(ds.samples[idx].report, true)));
            }
            const Tensor loss =
                contrastive_loss(concat_rows(img_parts), concat_rows(txt_parts), run.tau);
            loss_sum += loss.item();
            Tape::backward(loss);
            lr = sched.lr_at(step);
            run.lr_trace.push_back(lr);
            opt.step(lr);
            ++step;
            run.tau.data()[0] = std::clamp(run.tau.data()[0], 0.01, 1.0);
        }
        const double mean_loss = loss_sum / static_cast<double>(std::max<std::int64_t>(1, spe));
        run.epoch_loss.push_back(mean_loss);
        run.log.push_back(format_epoch_record(e + 1, "train", mean_loss, lr, 0.0, false));
        if (!eval_batch.empty()) {
            const double acc = retrieval_top1(run.vision, run.text, ds, vocab, eval_batch);
            run.retrieval.push_back(acc);
            run.log.push_back(format_epoch_record(e + 1, "val", mean_loss, lr, acc, true));
        }
    }

    run.ckpt.config_hash = cfg.fingerprint();
    run.ckpt.step = step;
    run.ckpt.tensors = named_params(run.vision, "vision.");
    for (auto& nt : named_params(run.text, "text.")) run.ckpt.tensors.push_back(nt);
    run.ckpt.tensors.emplace_back("tau", run.tau);
    if (!ckpt_path.empty()) save_checkpoint(ckpt_path, run.ckpt);
    return run;
}

// ---- stage 3 ----------------------------------------------------------------

double mean_sft_nll(VisionEncoder& vision, DecoderParams& decoder, const Dataset& ds,
                    const Vocab& vocab, const std::vector<std::int64_t>& prompt,
                    const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ContractError("validation NLL: empty index set");
    NoGradGuard ng;
    double sum = 0.0;
    for (std::size_t i : indices) {
        const Tensor img = sample_image(ds, i);
        const Tensor vis = vision.forward(img, VisionMode::MultiDir);
        const std::vector<std::int64_t> target = vocab.encode(ds.samples[i].report, false);
        sum += sft_loss(decoder, vis, prompt, target).item();
    }
    return sum / static_cast<double>(indices.size());
}

SftRun train_sft(const Dataset& ds, const Vocab& vocab, const RunConfig& cfg,
                 const std::string& init_ckpt, const std::string& ckpt_path) {
    const std::uint64_t seed = static_cast<std::uint64_t>(cfg.geti("seed"));
    const DecoderConfig dc = decoder_config_from(cfg, vocab.size());
    Rng init_rng(Rng::mix(seed, kStage3Init));

    SftRun run{VisionEncoder::init(vision_config_from(cfg), init_rng),
               DecoderParams::init(dc, init_rng), {}, {}, {}, {}, 0, {}};
    preload_vision(run.vision, cfg, init_ckpt);

    const std::vector<std::int64_t> prompt = prompt_ids(dc, vocab);

    // Ingestion: encode every training target once; reject (never truncate)
    // reports whose id sequence cannot fit the generation cap with its eos.
    std::vector<std::size_t> train;
    std::vector<std::vector<std::int64_t>> targets;
    for (std::size_t i : split_indices(ds, kSplitTrain)) {
        std::vector<std::int64_t> ids = vocab.encode(ds.samples[i].report, false);
        if (static_cast<std::int64_t>(ids.size()) + 1 > dc.max_length) {
            ++run.rejected_over_length;
            continue;
        }
        train.push_back(i);
        targets.push_back(std::move(ids));
    }
    run.log.push_back("ingestion: rejected " + std::to_string(run.rejected_over_length) +
                      " over-length targets, kept " + std::to_string(train.size()));
    if (train.empty()) {
        throw ContractError("fine-tuning: every training target exceeds decoder.max_length " +
                            std::to_string(dc.max_length));
    }
    std::vector<std::size_t> val;
    for (std::size_t i : split_indices(ds, kSplitVal)) {
        const auto ids = vocab.encode(ds.samples[i].report, false);
        if (static_cast<std::int64_t>(ids.size()) + 1 <= dc.max_length) val.push_back(i);
    }

    const std::int64_t batch = cfg.geti("stage3.batch");
    const std::int64_t epochs = cfg.geti("stage3.epochs");
    const bool freeze = cfg.getb("stage3.freeze_decoder");
    const std::int64_t warm = std::min(cfg.geti("stage3.warm_epochs"), epochs);
    const std::int64_t n = static_cast<std::int64_t>(train.size());
    const std::int64_t spe = (n + batch - 1) / batch;
    const Schedule sched = make_schedule(cfg, "stage3", spe);
    const double val_frequency = cfg.getf("stage3.val_frequency");
    const std::int64_t val_interval =
        std::max<std::int64_t>(1, std::llround(static_cast<double>(spe) * val_frequency));

    // Warm phase: decoder trainable.  Frozen phase: only the vision tower and
    // the visual mapper move, mirroring a frozen language model.  Each phase
    // owns its optimizer, so moments restart at the boundary.
    std::vector<Tensor> warm_params = run.vision.all();
    for (Tensor& t : run.decoder.all()) warm_params.push_back(t);
    std::vector<Tensor> frozen_params = run.vision.all();
    frozen_params.push_back(run.decoder.mapper);

    const double wd = cfg.getf("stage3.weight_decay");
    AdamW warm_opt(warm_params, wd);
    AdamW frozen_opt(frozen_params, wd);

    std::int64_t step = 0;
    for (std::int64_t e = 0; e < epochs; ++e) {
        const bool frozen_phase = freeze && e >= warm;
        AdamW& opt = frozen_phase ? frozen_opt : warm_opt;

        std::vector<std::size_t> order(train.size());
        for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
        Rng erng(Rng::mix(Rng::mix(seed, kStage3Shuffle), static_cast<std::uint64_t>(e)));
        erng.shuffle(order);

        double loss_sum = 0.0;
        double lr = 0.0;
        std::int64_t batch_index = 0;
        for (std::int64_t b0 = 0; b0 < n; b0 += batch, ++batch_index) {
            const std::int64_t bn = std::min(batch, n - b0);
            opt.zero_grad();
            for (std::int64_t k = 0; k < bn; ++k) {
                const std::size_t slot = order[static_cast<std::size_t>(b0 + k)];
                Tape tape;
                const Tensor img = sample_image(ds, train[slot]);
                const Tensor vis = run.vision.forward(img, VisionMode::MultiDir);
                const Tensor loss = sft_loss(run.decoder, vis, prompt, targets[slot]);
                loss_sum += loss.item();
                Tape::backward(scale(loss, 1.0 / static_cast<double>(bn)));
            }
            lr = sched.lr_at(step);
            run.lr_trace.push_back(lr);
            opt.step(lr);
            ++step;

            const bool at_epoch_end = b0 + bn >= n;
            if (!val.empty() && !at_epoch_end && (batch_index + 1) % val_interval == 0) {
                const double nll = mean_sft_nll(run.vision, run.decoder, ds, vocab, prompt, val);
                run.val_nll.push_back(nll);
                run.log.push_back(format_epoch_record(e + 1, "val", nll, lr, 0.0, false));
            }
        }
        const double mean_loss = loss_sum / static_cast<double>(n);
        run.epoch_loss.push_back(mean_loss);
        run.log.push_back(format_epoch_record(e + 1, "train", mean_loss, lr, 0.0, false));
        if (!val.empty()) {
            const double nll = mean_sft_nll(run.vision, run.decoder, ds, vocab, prompt, val);
            run.val_nll.push_back(nll);
            run.log.push_back(format_epoch_record(e + 1, "val", nll, lr, 0.0, false));
        }
    }

    run.ckpt.config_hash = cfg.fingerprint();
    run.ckpt.step = step;
    run.ckpt.tensors = named_params(run.vision, "vision.");
    for (auto& nt : named_params(run.decoder, "decoder.")) run.ckpt.tensors.push_back(nt);
    if (!ckpt_path.empty()) save_checkpoint(ckpt_path, run.ckpt);
    return run;
}

}  // namespace cxrgen
