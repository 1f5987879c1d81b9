#include "cxrgen/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "cxrgen/checkpoint.hpp"
#include "cxrgen/errors.hpp"
#include "cxrgen/generator.hpp"
#include "cxrgen/pretrain.hpp"
#include "cxrgen/rng.hpp"
#include "cxrgen/ssm.hpp"
#include "cxrgen/tensor.hpp"
#include "json.hpp"

namespace cxrgen {
namespace {

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open for writing: " + path);
    out << text;
    if (!out) throw FormatError("write failed: " + path);
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
    std::ostringstream oss;
    for (const std::string& line : lines) oss << line << '\n';
    write_text(path, oss.str());
}

std::string fmt3(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%9.3f", v);
    return buf;
}

}  // namespace

// ---- leaderboard ----------------------------------------------------------

std::string leaderboard_table(const std::vector<BenchmarkRow>& rows) {
    if (rows.empty()) throw ContractError("leaderboard_table: rows must be nonempty");
    const char* headers[] = {"B4", "R", "M", "C", "P", "R", "F1", "Time(min)", "Param(M)"};
    std::size_t name_w = std::string("Algorithm").size();
    for (const BenchmarkRow& r : rows) name_w = std::max(name_w, r.name.size());

    std::ostringstream oss;
    oss << "Algorithm" << std::string(name_w - 9, ' ');
    for (const char* h : headers) {
        const std::string head(h);
        oss << "  " << std::string(9 - head.size(), ' ') << head;
    }
    oss << '\n';
    for (const BenchmarkRow& r : rows) {
        oss << r.name << std::string(name_w - r.name.size(), ' ');
        const MetricReport& m = r.metrics;
        const double vals[] = {m.b4,   m.rouge_l, m.meteor,   m.cider,          m.ce_p,
                               m.ce_r, m.ce_f1,   r.minutes,  r.params_millions};
        for (double v : vals) oss << "  " << fmt3(v);
        oss << '\n';
    }
    return oss.str();
}

std::string leaderboard_records(const std::vector<BenchmarkRow>& rows) {
    if (rows.empty()) throw ContractError("leaderboard_records: rows must be nonempty");
    std::ostringstream oss;
    for (const BenchmarkRow& r : rows) {
        nlohmann::ordered_json j;
        j["algorithm"] = r.name;
        j["b4"] = r.metrics.b4;
        j["rouge_l"] = r.metrics.rouge_l;
        j["meteor"] = r.metrics.meteor;
        j["cider"] = r.metrics.cider;
        j["ce_p"] = r.metrics.ce_p;
        j["ce_r"] = r.metrics.ce_r;
        j["ce_f1"] = r.metrics.ce_f1;
        j["time_min"] = r.minutes;
        j["param_m"] = r.params_millions;
        oss << j.dump() << '\n';
    }
    return oss.str();
}

void emit_leaderboard(const std::vector<BenchmarkRow>& rows, const std::string& table_path,
                      const std::string& records_path) {
    write_text(table_path, leaderboard_table(rows));
    write_text(records_path, leaderboard_records(rows));
}

// ---- gradient sweep -------------------------------------------------------

namespace {

Tensor leaf(const std::vector<std::int64_t>& shape, Rng& rng, double stddev = 1.0) {
    Tensor t = Tensor::randn(shape, rng, stddev);
    t.set_requires_grad(true);
    return t;
}

Tensor positive_leaf(const std::vector<std::int64_t>& shape, Rng& rng) {
    Tensor t = Tensor::randn(shape, rng);
    for (double& v : t.data()) v = std::abs(v) + 0.5;
    t.set_requires_grad(true);
    return t;
}

// Weighted-sum reduction of a tensor-to-tensor op: distinguishes permuted or
// rescaled gradients that a plain sum would hide.
double check_weighted(const std::function<Tensor(const Tensor&)>& op, const Tensor& point,
                      Rng& rng) {
    Tensor w;
    {
        NoGradGuard ng;
        w = Tensor::randn(op(point).shape(), rng);
    }
    return grad_check([&](const Tensor& x) { return reduce_sum_all(mul(op(x), w)); }, point);
}

}  // namespace

GradCheckReport gradcheck_suite(std::uint64_t seed, std::int64_t points) {
    if (points < 1) throw ContractError("gradcheck_suite: need at least 1 point");
    GradCheckReport rep;
    Rng rng(seed);

    std::uint64_t entry_index = 0;
    auto entry = [&](const std::string& name, const std::function<double(Rng&)>& one_point) {
        ++entry_index;
        double worst = 0.0;
        for (std::int64_t k = 0; k < points; ++k) {
            Rng point_rng = rng.fork(Rng::mix(entry_index, static_cast<std::uint64_t>(k) + 1));
            worst = std::max(worst, one_point(point_rng));
        }
        rep.entries.push_back({name, worst});
        rep.worst_rel = std::max(rep.worst_rel, worst);
    };

    // Elementwise arithmetic, both argument positions.
    entry("op: add", [](Rng& r) {
        Tensor other = Tensor::randn({3, 4}, r);
        double a = grad_check([&](const Tensor& x) { return reduce_sum_all(add(x, other)); },
                              leaf({3, 4}, r));
        double b = grad_check([&](const Tensor& x) { return reduce_sum_all(add(other, x)); },
                              leaf({3, 4}, r));
        return std::max(a, b);
    });
    entry("op: sub", [](Rng& r) {
        Tensor other = Tensor::randn({3, 4}, r);
        double a = grad_check([&](const Tensor& x) { return reduce_sum_all(sub(x, other)); },
                              leaf({3, 4}, r));
        double b = grad_check([&](const Tensor& x) { return reduce_sum_all(sub(other, x)); },
                              leaf({3, 4}, r));
        return std::max(a, b);
    });
    entry("op: mul", [](Rng& r) {
        Tensor other = Tensor::randn({3, 4}, r);
        double a = grad_check([&](const Tensor& x) { return reduce_sum_all(mul(x, other)); },
                              leaf({3, 4}, r));
        double b = grad_check([&](const Tensor& x) { return reduce_sum_all(mul(other, x)); },
                              leaf({3, 4}, r));
        return std::max(a, b);
    });
    entry("op: div", [](Rng& r) {
        Tensor other = Tensor::randn({3, 4}, r);
        Tensor denom = positive_leaf({3, 4}, r).detach();
        double a = grad_check([&](const Tensor& x) { return reduce_sum_all(div(x, denom)); },
                              leaf({3, 4}, r));
        double b = grad_check([&](const Tensor& x) { return reduce_sum_all(div(other, x)); },
                              positive_leaf({3, 4}, r));
        return std::max(a, b);
    });
    entry("op: matmul", [](Rng& r) {
        Tensor rhs = Tensor::randn({4, 2}, r);
        Tensor lhs = Tensor::randn({3, 4}, r);
        double a = grad_check([&](const Tensor& x) { return reduce_sum_all(matmul(x, rhs)); },
                              leaf({3, 4}, r));
        double b = grad_check([&](const Tensor& x) { return reduce_sum_all(matmul(lhs, x)); },
                              leaf({4, 2}, r));
        return std::max(a, b);
    });

    // Elementwise analytic functions.
    entry("op: exp", [](Rng& r) {
        return grad_check([](const Tensor& x) { return reduce_sum_all(exp(x)); }, leaf({3, 4}, r));
    });
    entry("op: log", [](Rng& r) {
        return grad_check([](const Tensor& x) { return reduce_sum_all(log(x)); },
                          positive_leaf({3, 4}, r));
    });
    entry("op: sqrt", [](Rng& r) {
        return grad_check([](const Tensor& x) { return reduce_sum_all(sqrt(x)); },
                          positive_leaf({3, 4}, r));
    });
    entry("op: silu", [](Rng& r) {
        return grad_check([](const Tensor& x) { return reduce_sum_all(silu(x)); }, leaf({3, 4}, r));
    });
    entry("op: sigmoid", [](Rng& r) {
        return grad_check([](const Tensor& x) { return reduce_sum_all(sigmoid(x)); },
                          leaf({3, 4}, r));
    });
    entry("op: softplus", [](Rng& r) {
        return grad_check([](const Tensor& x) { return reduce_sum_all(softplus(x)); },
                          leaf({3, 4}, r));
    });
    entry("op: tanh", [](Rng& r) {
        return grad_check([](const Tensor& x) { return reduce_sum_all(tanh(x)); }, leaf({3, 4}, r));
    });

    // Normalizations and row reductions.
    entry("op: rms_norm", [](Rng& r) {
        Tensor gain = Tensor::randn({4}, r);
        Tensor x0 = Tensor::randn({3, 4}, r);
        Rng wr = r.fork(7);
        double a = check_weighted([&](const Tensor& x) { return rms_norm(x, gain); },
                                  leaf({3, 4}, r), wr);
        Tensor g = leaf({4}, r);
        Tensor w;
        {
            NoGradGuard ng;
            w = Tensor::randn({3, 4}, wr);
        }
        double b = grad_check(
            [&](const Tensor& gg) { return reduce_sum_all(mul(rms_norm(x0, gg), w)); }, g);
        return std::max(a, b);
    });
    entry("op: softmax_rows", [](Rng& r) {
        Rng wr = r.fork(7);
        return check_weighted([](const Tensor& x) { return softmax_rows(x); }, leaf({3, 5}, r), wr);
    });
    entry("op: cross_entropy_rows", [](Rng& r) {
        return grad_check(
            [](const Tensor& x) { return reduce_mean_all(cross_entropy_rows(x, {1, 3, 0})); },
            leaf({3, 5}, r));
    });
    entry("op: l2_normalize_rows", [](Rng& r) {
        Rng wr = r.fork(7);
        return check_weighted([](const Tensor& x) { return l2_normalize_rows(x); },
                              leaf({3, 5}, r), wr);
    });
    entry("op: mean_rows", [](Rng& r) {
        Rng wr = r.fork(7);
        return check_weighted([](const Tensor& x) { return mean_rows(x); }, leaf({4, 3}, r), wr);
    });
    entry("op: reduce_sum_all", [](Rng& r) {
        return grad_check([](const Tensor& x) { return reduce_sum_all(x); }, leaf({3, 4}, r));
    });
    entry("op: reduce_mean_all", [](Rng& r) {
        return grad_check([](const Tensor& x) { return reduce_mean_all(x); }, leaf({3, 4}, r));
    });

    // Shape plumbing.
    entry("op: slice_rows", [](Rng& r) {
        Rng wr = r.fork(7);
        return check_weighted([](const Tensor& x) { return slice_rows(x, 1, 2); }, leaf({4, 3}, r),
                              wr);
    });
    entry("op: concat_rows", [](Rng& r) {
        Tensor other = Tensor::randn({2, 3}, r);
        Rng wr = r.fork(7);
        double a = check_weighted([&](const Tensor& x) { return concat_rows({x, other}); },
                                  leaf({3, 3}, r), wr);
        double b = check_weighted([&](const Tensor& x) { return concat_rows({other, x}); },
                                  leaf({3, 3}, r), wr);
        return std::max(a, b);
    });
    entry("op: reshape", [](Rng& r) {
        Rng wr = r.fork(7);
        return check_weighted([](const Tensor& x) { return reshape(x, {6, 2}); }, leaf({3, 4}, r),
                              wr);
    });
    entry("op: transpose2d", [](Rng& r) {
        Rng wr = r.fork(7);
        return check_weighted([](const Tensor& x) { return transpose2d(x); }, leaf({3, 4}, r), wr);
    });
    entry("op: gather_rows", [](Rng& r) {
        Rng wr = r.fork(7);
        return check_weighted([](const Tensor& x) { return gather_rows(x, {2, 0, 2, 1}); },
                              leaf({4, 3}, r), wr);
    });
    entry("op: scale", [](Rng& r) {
        return grad_check([](const Tensor& x) { return reduce_sum_all(scale(x, -1.7)); },
                          leaf({3, 4}, r));
    });
    entry("op: expand_last", [](Rng& r) {
        Rng wr = r.fork(7);
        return check_weighted([](const Tensor& x) { return expand_last(x, 3); }, leaf({4, 2}, r),
                              wr);
    });
    entry("op: batched_outer", [](Rng& r) {
        Tensor b = Tensor::randn({4, 2}, r);
        Tensor a = Tensor::randn({4, 3}, r);
        Rng wr = r.fork(7);
        double ga = check_weighted([&](const Tensor& x) { return batched_outer(x, b); },
                                   leaf({4, 3}, r), wr);
        double gb = check_weighted([&](const Tensor& x) { return batched_outer(a, x); },
                                   leaf({4, 2}, r), wr);
        return std::max(ga, gb);
    });

    // The recurrence kernel, every argument.
    entry("op: ssm_scan", [](Rng& r) {
        const std::int64_t L = 5, D = 3, S = 2;
        Tensor u = leaf({L, D}, r);
        Tensor a_bar = Tensor::randn({L, D, S}, r);
        for (double& v : a_bar.data()) v = 0.3 + 0.6 / (1.0 + std::exp(-v));
        a_bar.set_requires_grad(true);
        Tensor b_bar = leaf({L, D, S}, r, 0.5);
        Tensor c = leaf({L, S}, r, 0.5);
        Tensor d_skip = leaf({D}, r, 0.5);
        Tensor w;
        {
            NoGradGuard ng;
            w = Tensor::randn({L, D}, r);
        }
        return grad_check_params(
            [&]() { return reduce_sum_all(mul(ssm_scan(u, a_bar, b_bar, c, d_skip), w)); },
            {u, a_bar, b_bar, c, d_skip});
    });

    // A whole sequence-mixing block: discretization, gating, and the
    // feed-forward tail composed together.
    entry("block: sequence mixer", [](Rng& r) {
        MambaBlockParams p = MambaBlockParams::init(6, 2, r);
        for (Tensor& t : p.all())
            for (double& v : t.data()) v += 0.05 * r.normal();
        Tensor tokens = leaf({4, 6}, r, 0.7);
        Tensor w;
        {
            NoGradGuard ng;
            w = Tensor::randn({4, 6}, r);
        }
        std::vector<Tensor> params = p.all();
        params.push_back(tokens);
        Rng coord_rng = r.fork(11);
        return grad_check_params(
            [&]() { return reduce_sum_all(mul(mamba_block(tokens, p), w)); }, params, 1e-5, 2,
            &coord_rng);
    });

    // Composite losses, through the real models at toy width.
    const Dataset toy = generate_corpus(10, 417, 16);

    entry("loss: next-token regression", [&toy](Rng& r) {
        VisionConfig vc;
        vc.image_size = 16;
        vc.patch = 8;
        vc.d = 8;
        vc.s = 2;
        vc.blocks = 1;
        vc.embed_dim = 6;
        VisionEncoder enc = VisionEncoder::init(vc, r);
        for (MambaBlockParams& b : enc.blocks)
            for (double& v : b.sw_out.data()) v = 0.3 * r.normal();  // leave the identity init
        Tensor head = leaf({vc.d, vc.d}, r, 0.4);
        const Tensor img = sample_image(
            toy, static_cast<std::size_t>(r.below(static_cast<std::int64_t>(toy.samples.size()))));
        const GridShape grid{vc.side_patches(), vc.side_patches()};
        std::vector<Tensor> params = enc.all();
        params.push_back(head);
        // The regression target is a stop-gradient of the embedding: freeze it
        // at the evaluation point so the finite difference matches the
        // analytic gradient's constant-target semantics.
        Tensor target;
        {
            NoGradGuard ng;
            target = enc.embed(img);
        }
        Rng coord_rng = r.fork(11);
        return grad_check_params(
            [&]() {
                Tensor emb = enc.embed(img);
                Tensor out = enc.forward_tokens(emb, VisionMode::Causal, grid);
                return ar_loss(out, head, target);
            },
            params, 1e-5, 2, &coord_rng);
    });

    entry("loss: symmetric alignment", [](Rng& r) {
        Tensor a = leaf({3, 5}, r);
        Tensor b = leaf({3, 5}, r);
        Tensor tau = Tensor::scalar(0.2);
        tau.set_requires_grad(true);
        return grad_check_params(
            [&]() {
                return contrastive_loss(l2_normalize_rows(a), l2_normalize_rows(b), tau);
            },
            {a, b, tau});
    });

    entry("loss: report nll", [](Rng& r) {
        DecoderConfig dc;
        dc.vocab = 16;
        dc.d = 8;
        dc.s = 2;
        dc.blocks = 1;
        dc.d_vision = 6;
        dc.max_length = 12;
        DecoderParams p = DecoderParams::init(dc, r);
        for (MambaBlockParams& b : p.blocks)
            for (double& v : b.sw_out.data()) v = 0.3 * r.normal();  // leave the identity init
        for (double& v : p.head.data()) v = 0.3 * r.normal();
        for (double& v : p.out_gain.data()) v += 0.1 * r.normal();
        Tensor visual = leaf({3, dc.d_vision}, r, 0.7);
        const std::vector<std::int64_t> prompt = {5, 9};
        const std::vector<std::int64_t> report = {4, 11, 6};
        std::vector<Tensor> params = p.all();
        params.push_back(visual);
        Rng coord_rng = r.fork(11);
        return grad_check_params([&]() { return sft_loss(p, visual, prompt, report); }, params,
                                 1e-5, 2, &coord_rng);
    });

    entry("loss: masked reconstruction", [&toy](Rng& r) {
        VisionConfig vc;
        vc.image_size = 16;
        vc.patch = 8;
        vc.d = 8;
        vc.s = 2;
        vc.blocks = 1;
        vc.embed_dim = 6;
        VisionEncoder enc = VisionEncoder::init(vc, r);
        for (MambaBlockParams& b : enc.blocks)
            for (double& v : b.sw_out.data()) v = 0.3 * r.normal();  // leave the identity init
        Tensor head = leaf({vc.d, vc.patch_dim()}, r, 0.4);
        const Tensor img = sample_image(
            toy, static_cast<std::size_t>(r.below(static_cast<std::int64_t>(toy.samples.size()))));
        const std::uint64_t mask_seed = r.next_u64();
        std::vector<Tensor> params = enc.all();
        params.push_back(head);
        Rng coord_rng = r.fork(11);
        return grad_check_params(
            [&]() {
                Rng mask_rng(mask_seed);
                return mae_loss_baseline(img, 0.5, enc, head, mask_rng);
            },
            params, 1e-5, 2, &coord_rng);
    });

    return rep;
}

std::string gradcheck_table(const GradCheckReport& rep) {
    std::ostringstream oss;
    char buf[96];
    for (const GradCheckEntry& e : rep.entries) {
        std::snprintf(buf, sizeof(buf), "%-28s %11.3e\n", e.name.c_str(), e.worst_rel);
        oss << buf;
    }
    std::snprintf(buf, sizeof(buf), "worst relative error: %.3e\n", rep.worst_rel);
    oss << buf;
    return oss.str();
}

// ---- scan timing study ----------------------------------------------------

double fit_exponent(const std::vector<std::int64_t>& lengths, const std::vector<double>& ms) {
    if (lengths.size() != ms.size() || lengths.size() < 2)
        throw ContractError("fit_exponent: need matching lists of at least 2 timings");
    const std::size_t n = lengths.size();
    std::vector<double> xs(n), ys(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (lengths[i] < 1) throw ContractError("fit_exponent: lengths must be positive");
        xs[i] = std::log(static_cast<double>(lengths[i]));
        ys[i] = std::log(std::max(ms[i], 1e-4));  // clamp below timer resolution
    }
    double xbar = 0.0, ybar = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        xbar += xs[i];
        ybar += ys[i];
    }
    xbar /= static_cast<double>(n);
    ybar /= static_cast<double>(n);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        num += (xs[i] - xbar) * (ys[i] - ybar);
        den += (xs[i] - xbar) * (xs[i] - xbar);
    }
    return num / den;
}

namespace {

double best_of_three_ms(const std::function<void()>& f) {
    f();  // warm caches before timing
    double best = std::numeric_limits<double>::infinity();
    for (int rep = 0; rep < 3; ++rep) {
        const auto t0 = std::chrono::steady_clock::now();
        f();
        const auto t1 = std::chrono::steady_clock::now();
        best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return best;
}

}  // namespace

ScanBenchReport scan_bench(std::int64_t d, std::int64_t s,
                           const std::vector<std::int64_t>& lengths) {
    if (lengths.size() < 2) throw ContractError("scan_bench: need at least 2 lengths");
    ScanBenchReport rep;
    rep.lengths = lengths;
    Rng rng(90210);
    MambaBlockParams p = MambaBlockParams::init(d, s, rng);
    NoGradGuard ng;
    for (std::int64_t L : lengths) {
        Tensor tokens = Tensor::randn({L, d}, rng, 0.5);
        rep.scan_ms.push_back(best_of_three_ms([&]() { mamba_block(tokens, p); }));
        rep.attn_ms.push_back(best_of_three_ms([&]() { naive_attention(tokens); }));
    }
    rep.scan_exponent = fit_exponent(rep.lengths, rep.scan_ms);
    rep.attn_exponent = fit_exponent(rep.lengths, rep.attn_ms);
    return rep;
}

std::string scan_bench_table(const ScanBenchReport& rep) {
    std::ostringstream oss;
    char buf[96];
    oss << "     L    scan(ms)    attn(ms)\n";
    for (std::size_t i = 0; i < rep.lengths.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%6lld  %10.3f  %10.3f\n",
                      static_cast<long long>(rep.lengths[i]), rep.scan_ms[i], rep.attn_ms[i]);
        oss << buf;
    }
    std::snprintf(buf, sizeof(buf), "fitted exponents: scan %.2f, attention %.2f\n",
                  rep.scan_exponent, rep.attn_exponent);
    oss << buf;
    return oss.str();
}

// ---- generation over a split ----------------------------------------------

std::vector<GenerationRecord> generate_split(VisionEncoder& vision, DecoderParams& decoder,
                                             const Dataset& ds, const Vocab& vocab, int split,
                                             std::int64_t beam_width) {
    NoGradGuard ng;
    const std::vector<std::int64_t> prompt = prompt_ids(decoder.cfg, vocab);
    std::vector<GenerationRecord> out;
    for (std::size_t i : split_indices(ds, split)) {
        Tensor vis = vision.forward(sample_image(ds, i), VisionMode::MultiDir);
        GenerationResult r = generate(decoder, vis, prompt, vocab, beam_width);
        GenerationRecord rec;
        rec.id = i;
        rec.text = r.text;
        rec.stop = r.stop == StopReason::Eos ? "eos" : "max_length";
        double sum = 0.0;
        for (double lp : r.logprobs) sum += lp;
        rec.mean_logprob = r.logprobs.empty() ? 0.0 : sum / static_cast<double>(r.logprobs.size());
        rec.unk_count = static_cast<std::int64_t>(
            std::count(r.ids.begin(), r.ids.end(), static_cast<std::int64_t>(Vocab::kUnk)));
        out.push_back(std::move(rec));
    }
    return out;
}

std::string generation_records_text(const std::vector<GenerationRecord>& recs) {
    std::ostringstream oss;
    for (const GenerationRecord& r : recs) {
        nlohmann::ordered_json j;
        j["id"] = r.id;
        j["text"] = r.text;
        j["stop"] = r.stop;
        j["mean_logprob"] = r.mean_logprob;
        j["unk_count"] = r.unk_count;
        oss << j.dump() << '\n';
    }
    return oss.str();
}

std::vector<GenerationRecord> parse_generation_records(const std::string& text) {
    std::vector<GenerationRecord> out;
    std::istringstream iss(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(iss, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::ordered_json j = nlohmann::ordered_json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("id") || !j.contains("text") ||
            !j.contains("stop") || !j.contains("mean_logprob") || !j.contains("unk_count")) {
            throw FormatError("generation records: malformed record at line " +
                              std::to_string(line_no));
        }
        GenerationRecord r;
        r.id = j["id"].get<std::size_t>();
        r.text = j["text"].get<std::string>();
        r.stop = j["stop"].get<std::string>();
        r.mean_logprob = j["mean_logprob"].get<double>();
        r.unk_count = j["unk_count"].get<std::int64_t>();
        out.push_back(std::move(r));
    }
    return out;
}

// ---- the full benchmark ---------------------------------------------------

BenchArm bench_arm_from(const std::string& name) {
    if (name == "full") return BenchArm::Full;
    if (name == "arg-sft") return BenchArm::ArgSft;
    if (name == "mae-sft") return BenchArm::MaeSft;
    throw UsageError("bench.arm must be full, arg-sft, or mae-sft; got \"" + name + "\"");
}

namespace {

double million_params(VisionEncoder& vision, DecoderParams& decoder) {
    std::int64_t count = 0;
    for (const Tensor& t : vision.all()) count += t.numel();
    for (const Tensor& t : decoder.all()) count += t.numel();
    return static_cast<double>(count) / 1e6;
}

}  // namespace

BenchmarkResult run_benchmark(const RunConfig& cfg, const std::string& out_dir) {
    const auto t0 = std::chrono::steady_clock::now();
    const BenchArm arm = bench_arm_from(cfg.gets("bench.arm"));
    std::filesystem::create_directories(out_dir);
    const std::string data_dir = out_dir + "/data";

    const Dataset ds = generate_corpus(cfg.geti("data.count"),
                                       static_cast<std::uint64_t>(cfg.geti("seed")),
                                       cfg.geti("data.image_size"));
    save_dataset(ds, data_dir);
    const LabelTable table = LabelTable::builtin();
    write_text(data_dir + "/labels.tsv", table.to_tsv());
    Vocab vocab = build_corpus_vocab(ds, cfg.gets("decoder.prompt"));
    vocab.save(data_dir + "/vocab.txt");

    BenchmarkResult res;
    std::string sft_init;
    if (arm == BenchArm::MaeSft) {
        const std::string path = out_dir + "/mae.ckpt";
        MaeRun m = run_mae(ds, cfg, path);
        res.pretrain_epoch_loss = m.epoch_loss;
        write_lines(out_dir + "/mae.log", m.log);
        res.checkpoint_files.push_back(path);
        sft_init = path;
    } else {
        const std::string path = out_dir + "/stage1.ckpt";
        Stage1Run s1 = run_stage1(ds, cfg, path);
        res.pretrain_epoch_loss = s1.epoch_loss;
        write_lines(out_dir + "/stage1.log", s1.log);
        res.checkpoint_files.push_back(path);
        sft_init = path;
        if (arm == BenchArm::Full) {
            const std::string path2 = out_dir + "/stage2.ckpt";
            Stage2Run s2 = run_stage2(ds, vocab, cfg, sft_init, path2);
            res.retrieval = s2.retrieval;
            write_lines(out_dir + "/stage2.log", s2.log);
            res.checkpoint_files.push_back(path2);
            sft_init = path2;
        }
    }

    const std::string sft_path = out_dir + "/stage3.ckpt";
    SftRun sft = train_sft(ds, vocab, cfg, sft_init, sft_path);
    res.sft_epoch_loss = sft.epoch_loss;
    write_lines(out_dir + "/stage3.log", sft.log);
    res.checkpoint_files.push_back(sft_path);

    const std::vector<GenerationRecord> recs =
        generate_split(sft.vision, sft.decoder, ds, vocab, kSplitTest, cfg.geti("decoder.beam"));
    write_text(out_dir + "/generated.records", generation_records_text(recs));

    std::size_t clean = 0;
    std::vector<std::string> pred, gt;
    for (const GenerationRecord& r : recs) {
        if (r.unk_count == 0) ++clean;
        pred.push_back(r.text);
        gt.push_back(ds.samples[r.id].report);
    }
    res.no_unk_fraction =
        recs.empty() ? 1.0 : static_cast<double>(clean) / static_cast<double>(recs.size());

    const MetricReport report = evaluate_corpus(pred, gt, table);
    write_text(out_dir + "/metrics.record", report.to_record() + "\n");

    const auto t1 = std::chrono::steady_clock::now();
    BenchmarkRow row;
    row.name = cfg.gets("bench.name");
    row.metrics = report;
    row.minutes = std::chrono::duration<double>(t1 - t0).count() / 60.0;
    row.params_millions = million_params(sft.vision, sft.decoder);
    res.row = row;
    res.table = leaderboard_table({row});
    emit_leaderboard({row}, out_dir + "/leaderboard.txt", out_dir + "/leaderboard.records");
    return res;
}

}  // namespace cxrgen
