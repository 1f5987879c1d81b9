#include "cxrgen/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cxrgen/checkpoint.hpp"
#include "cxrgen/config.hpp"
#include "cxrgen/data.hpp"
#include "cxrgen/errors.hpp"
#include "cxrgen/generator.hpp"
#include "cxrgen/metrics.hpp"
#include "cxrgen/pipeline.hpp"
#include "cxrgen/rng.hpp"
#include "cxrgen/train.hpp"

namespace cxrgen {
namespace {

std::string usage_text() {
    std::ostringstream oss;
    oss << "usage: cxrgen <subcommand> [--config FILE] [--<key> <value> ...]\n"
        << "\n"
        << "subcommands:\n"
        << "  gen-data      generate a paired image/report corpus\n"
        << "  pretrain-ar   stage 1: causal next-token visual pre-training\n"
        << "  pretrain-mae  masked-reconstruction pre-training baseline\n"
        << "  pretrain-ctl  stage 2: image-report contrastive alignment\n"
        << "  finetune      stage 3: supervised report generation\n"
        << "  generate      decode reports for a dataset split from a checkpoint\n"
        << "  evaluate      score generation records against reference reports\n"
        << "  benchmark     corpus -> training -> generation -> evaluation -> leaderboard\n"
        << "  gradcheck     finite-difference sweep of every differentiable op\n"
        << "  scan-bench    timing study: recurrence scan vs quadratic attention\n"
        << "\n"
        << "configuration keys (command line > file > defaults):\n";
    for (const ConfigKey& k : RunConfig::known()) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "  --%-22s %s (default: %s)\n", k.name, k.help,
                      k.default_value);
        oss << buf;
    }
    return oss.str();
}

RunConfig parse_config(const std::vector<std::string>& args, std::size_t start) {
    std::vector<std::pair<std::string, std::string>> overrides;
    std::string config_file;
    for (std::size_t i = start; i < args.size(); i += 2) {
        const std::string& flag = args[i];
        if (flag.rfind("--", 0) != 0)
            throw UsageError("expected a --flag, got \"" + flag + "\"");
        const std::string key = flag.substr(2);
        if (i + 1 >= args.size()) throw UsageError("flag --" + key + " is missing its value");
        if (key == "config") {
            config_file = args[i + 1];
        } else {
            overrides.emplace_back(key, args[i + 1]);
        }
    }
    RunConfig cfg;
    if (!config_file.empty()) cfg.load_file(config_file);
    for (const auto& [key, value] : overrides) cfg.set(key, value);
    return cfg;
}

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

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::string out_root(const RunConfig& cfg) {
    const std::string root = cfg.gets("out_root");
    std::filesystem::create_directories(root);
    return root;
}

std::string data_dir(const RunConfig& cfg) {
    const std::string dir = cfg.gets("data.dir");
    return dir.empty() ? cfg.gets("out_root") + "/data" : dir;
}

std::string default_path(const std::string& configured, const RunConfig& cfg,
                         const std::string& leaf) {
    return configured.empty() ? out_root(cfg) + "/" + leaf : configured;
}

Vocab load_or_build_vocab(const Dataset& ds, const RunConfig& cfg) {
    const std::string path = data_dir(cfg) + "/vocab.txt";
    if (std::filesystem::exists(path)) return Vocab::load(path);
    return build_corpus_vocab(ds, cfg.gets("decoder.prompt"));
}

int split_from(const std::string& name) {
    if (name == "train") return kSplitTrain;
    if (name == "val") return kSplitVal;
    if (name == "test") return kSplitTest;
    throw UsageError("gen.split must be train, val, or test; got \"" + name + "\"");
}

int cmd_gen_data(const RunConfig& cfg, std::ostream& out) {
    const Dataset ds = generate_corpus(cfg.geti("data.count"),
                                       static_cast<std::uint64_t>(cfg.geti("seed")),
                                       cfg.geti("data.image_size"));
    const std::string dir = data_dir(cfg);
    save_dataset(ds, dir);
    write_text(dir + "/labels.tsv", LabelTable::builtin().to_tsv());
    const Vocab vocab = build_corpus_vocab(ds, cfg.gets("decoder.prompt"));
    vocab.save(dir + "/vocab.txt");
    out << "wrote " << ds.samples.size() << " samples ("
        << split_indices(ds, kSplitTrain).size() << " train / "
        << split_indices(ds, kSplitVal).size() << " val / "
        << split_indices(ds, kSplitTest).size() << " test), vocabulary of " << vocab.size()
        << " tokens, to " << dir << "\n";
    return 0;
}

int cmd_pretrain_ar(const RunConfig& cfg, std::ostream& out) {
    const Dataset ds = load_dataset(data_dir(cfg));
    const std::string path = default_path(cfg.gets("ckpt.out"), cfg, "stage1.ckpt");
    const Stage1Run run = run_stage1(ds, cfg, path);
    write_lines(out_root(cfg) + "/stage1.log", run.log);
    out << "stage 1 complete: first-epoch loss " << run.epoch_loss.front()
        << ", final-epoch loss " << run.epoch_loss.back() << ", checkpoint " << path << "\n";
    return 0;
}

int cmd_pretrain_mae(const RunConfig& cfg, std::ostream& out) {
    const Dataset ds = load_dataset(data_dir(cfg));
    const std::string path = default_path(cfg.gets("ckpt.out"), cfg, "mae.ckpt");
    const MaeRun run = run_mae(ds, cfg, path);
    write_lines(out_root(cfg) + "/mae.log", run.log);
    out << "masked pre-training complete: first-epoch loss " << run.epoch_loss.front()
        << ", final-epoch loss " << run.epoch_loss.back() << ", checkpoint " << path << "\n";
    return 0;
}

int cmd_pretrain_ctl(const RunConfig& cfg, std::ostream& out) {
    const Dataset ds = load_dataset(data_dir(cfg));
    const Vocab vocab = load_or_build_vocab(ds, cfg);
    const std::string path = default_path(cfg.gets("ckpt.out"), cfg, "stage2.ckpt");
    const Stage2Run run = run_stage2(ds, vocab, cfg, cfg.gets("ckpt.in"), path);
    write_lines(out_root(cfg) + "/stage2.log", run.log);
    out << "stage 2 complete: first-epoch loss " << run.epoch_loss.front()
        << ", final-epoch loss " << run.epoch_loss.back();
    if (!run.retrieval.empty()) out << ", retrieval top-1 " << run.retrieval.back();
    out << ", checkpoint " << path << "\n";
    return 0;
}

int cmd_finetune(const RunConfig& cfg, std::ostream& out) {
    const Dataset ds = load_dataset(data_dir(cfg));
    const Vocab vocab = load_or_build_vocab(ds, cfg);
    const std::string path = default_path(cfg.gets("ckpt.out"), cfg, "stage3.ckpt");
    const SftRun run = train_sft(ds, vocab, cfg, cfg.gets("ckpt.in"), path);
    write_lines(out_root(cfg) + "/stage3.log", run.log);
    out << "stage 3 complete: first-epoch loss " << run.epoch_loss.front()
        << ", final-epoch loss " << run.epoch_loss.back() << ", validation NLL "
        << run.val_nll.back() << ", rejected " << run.rejected_over_length
        << " over-length reports, checkpoint " << path << "\n";
    return 0;
}

int cmd_generate(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
    const Dataset ds = load_dataset(data_dir(cfg));
    const Vocab vocab = load_or_build_vocab(ds, cfg);
    const std::string ckpt_path = default_path(cfg.gets("gen.in"), cfg, "stage3.ckpt");

    Rng init_rng(0);
    VisionEncoder vision = VisionEncoder::init(vision_config_from(cfg), init_rng);
    DecoderParams decoder =
        DecoderParams::init(decoder_config_from(cfg, vocab.size()), init_rng);
    std::vector<std::pair<std::string, Tensor>> dst = named_params(vision, "vision.");
    for (auto& kv : named_params(decoder, "decoder.")) dst.push_back(std::move(kv));
    const Checkpoint ck = load_checkpoint(ckpt_path);
    const std::string warning = load_into(ck, cfg.fingerprint(), dst);
    if (!warning.empty()) err << warning << "\n";

    const int split = split_from(cfg.gets("gen.split"));
    const std::vector<GenerationRecord> recs =
        generate_split(vision, decoder, ds, vocab, split, cfg.geti("decoder.beam"));
    const std::string out_path = default_path(cfg.gets("gen.out"), cfg, "generated.records");
    write_text(out_path, generation_records_text(recs));

    std::size_t eos = 0;
    double mean_lp = 0.0;
    for (const GenerationRecord& r : recs) {
        if (r.stop == "eos") ++eos;
        mean_lp += r.mean_logprob;
    }
    if (!recs.empty()) mean_lp /= static_cast<double>(recs.size());
    out << "generated " << recs.size() << " reports for the " << cfg.gets("gen.split")
        << " split (" << eos << " stopped at eos), mean token log-prob " << mean_lp << ", to "
        << out_path << "\n";
    return 0;
}

int cmd_evaluate(const RunConfig& cfg, std::ostream& out) {
    const Dataset ds = load_dataset(data_dir(cfg));
    const std::string records_path = default_path(cfg.gets("gen.in"), cfg, "generated.records");
    const std::vector<GenerationRecord> recs = parse_generation_records(slurp(records_path));
    std::vector<std::string> pred, gt;
    for (const GenerationRecord& r : recs) {
        if (r.id >= ds.samples.size())
            throw ContractError("evaluate: record id " + std::to_string(r.id) +
                                " is outside the dataset of " +
                                std::to_string(ds.samples.size()) + " samples");
        pred.push_back(r.text);
        gt.push_back(ds.samples[r.id].report);
    }
    const std::string table_path = data_dir(cfg) + "/labels.tsv";
    const LabelTable table = std::filesystem::exists(table_path)
                                 ? LabelTable::from_tsv_file(table_path)
                                 : LabelTable::builtin();
    const MetricReport rep = evaluate_corpus(pred, gt, table);
    const std::string out_path = default_path(cfg.gets("eval.out"), cfg, "metrics.record");
    write_text(out_path, rep.to_record() + "\n");
    out << rep.to_record() << "\n";
    return 0;
}

int cmd_benchmark(const RunConfig& cfg, std::ostream& out) {
    const BenchmarkResult res = run_benchmark(cfg, out_root(cfg));
    out << res.table;
    out << "artifacts under " << out_root(cfg) << "\n";
    return 0;
}

int cmd_gradcheck(const RunConfig& cfg, std::ostream& out) {
    const GradCheckReport rep =
        gradcheck_suite(static_cast<std::uint64_t>(cfg.geti("seed")), 10);
    out << gradcheck_table(rep);
    return rep.passed(1e-4) ? 0 : 1;
}

int cmd_scan_bench(const RunConfig&, std::ostream& out) {
    const ScanBenchReport rep = scan_bench();
    out << scan_bench_table(rep);
    return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    try {
        if (args.empty()) throw UsageError("missing subcommand\n" + usage_text());
        const std::string& cmd = args[0];
        if (cmd == "help" || cmd == "--help" || cmd == "-h") {
            out << usage_text();
            return 0;
        }
        const RunConfig cfg = parse_config(args, 1);
        if (cmd == "gen-data") return cmd_gen_data(cfg, out);
        if (cmd == "pretrain-ar") return cmd_pretrain_ar(cfg, out);
        if (cmd == "pretrain-mae") return cmd_pretrain_mae(cfg, out);
        if (cmd == "pretrain-ctl") return cmd_pretrain_ctl(cfg, out);
        if (cmd == "finetune") return cmd_finetune(cfg, out);
        if (cmd == "generate") return cmd_generate(cfg, out, err);
        if (cmd == "evaluate") return cmd_evaluate(cfg, out);
        if (cmd == "benchmark") return cmd_benchmark(cfg, out);
        if (cmd == "gradcheck") return cmd_gradcheck(cfg, out);
        if (cmd == "scan-bench") return cmd_scan_bench(cfg, out);
        throw UsageError("unknown subcommand \"" + cmd + "\"\n" + usage_text());
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace cxrgen
