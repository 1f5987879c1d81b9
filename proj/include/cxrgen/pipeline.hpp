#pragma once
// End-to-end orchestration: the benchmark run (corpus -> training stages ->
// generation -> evaluation -> leaderboard) plus the self-check utilities the
// command line exposes (gradient sweep, scan timing study).

#include <cstdint>
#include <string>
#include <vector>

#include "cxrgen/config.hpp"
#include "cxrgen/data.hpp"
#include "cxrgen/metrics.hpp"
#include "cxrgen/train.hpp"

namespace cxrgen {

// ---- leaderboard ----------------------------------------------------------

// One leaderboard entry: algorithm name, evaluation metrics, wall-clock cost
// in minutes, and deployed generator size in millions of parameters.
struct BenchmarkRow {
    std::string name;
    MetricReport metrics;
    double minutes = 0.0;
    double params_millions = 0.0;
};

// Human-readable table with the fixed column order
//   Algorithm  B4  R  M  C  P  R  F1  Time(min)  Param(M)
// and three decimals everywhere. Pure function of the rows, so re-emission of
// identical rows is byte-identical. ContractError when rows is empty.
std::string leaderboard_table(const std::vector<BenchmarkRow>& rows);

// Machine-readable companion: one JSON record per row, keys in column order.
std::string leaderboard_records(const std::vector<BenchmarkRow>& rows);

// Writes both renderings to files.
void emit_leaderboard(const std::vector<BenchmarkRow>& rows, const std::string& table_path,
                      const std::string& records_path);

// ---- gradient sweep -------------------------------------------------------

struct GradCheckEntry {
    std::string name;
    double worst_rel = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double worst_rel = 0.0;  // max over entries
    bool passed(double tol = 1e-4) const { return worst_rel < tol; }
};

// Finite-difference verification of every differentiable primitive and each
// composite training loss (next-token regression, symmetric InfoNCE, report
// NLL, masked reconstruction), `points` random points per check.
GradCheckReport gradcheck_suite(std::uint64_t seed = 97, std::int64_t points = 10);

// One line per entry plus a worst-case summary line.
std::string gradcheck_table(const GradCheckReport& rep);

// ---- scan timing study ----------------------------------------------------

struct ScanBenchReport {
    std::vector<std::int64_t> lengths;
    std::vector<double> scan_ms;  // best-of-three wall-clock per length
    std::vector<double> attn_ms;
    double scan_exponent = 0.0;
    double attn_exponent = 0.0;
};

// Least-squares slope of log(time) against log(length).
double fit_exponent(const std::vector<std::int64_t>& lengths, const std::vector<double>& ms);

// Times one sequence-mixing block against the quadratic attention reference
// over the given lengths and fits both growth exponents.
ScanBenchReport scan_bench(std::int64_t d = 32, std::int64_t s = 8,
                           const std::vector<std::int64_t>& lengths = {128, 256, 512, 1024});

std::string scan_bench_table(const ScanBenchReport& rep);

// ---- generation over a split ----------------------------------------------

struct GenerationRecord {
    std::size_t id = 0;  // sample index within the dataset
    std::string text;
    std::string stop;  // "eos" | "max_length"
    double mean_logprob = 0.0;
    std::int64_t unk_count = 0;
};

std::vector<GenerationRecord> generate_split(VisionEncoder& vision, DecoderParams& decoder,
                                             const Dataset& ds, const Vocab& vocab, int split,
                                             std::int64_t beam_width);

// Line-delimited JSON records; parse is the exact inverse (FormatError on
// malformed input, with the offending line number).
std::string generation_records_text(const std::vector<GenerationRecord>& recs);
std::vector<GenerationRecord> parse_generation_records(const std::string& text);

// ---- the full benchmark ---------------------------------------------------

// Which training recipe the benchmark runs: the full three-stage pipeline,
// causal pre-training straight into fine-tuning, or the masked-reconstruction
// baseline into fine-tuning.
enum class BenchArm { Full, ArgSft, MaeSft };

// Accepts "full", "arg-sft", "mae-sft"; UsageError otherwise.
BenchArm bench_arm_from(const std::string& name);

struct BenchmarkResult {
    BenchmarkRow row;
    std::vector<double> pretrain_epoch_loss;  // causal (or masked) stage, per epoch
    std::vector<double> retrieval;            // alignment probe trace, full arm only
    std::vector<double> sft_epoch_loss;
    double no_unk_fraction = 1.0;  // generated reports free of unknown tokens
    std::vector<std::string> checkpoint_files;
    std::string table;  // single-row leaderboard rendering
};

// Generates the corpus, runs the arm selected by `bench.arm`, generates
// reports for the test split, evaluates them, and writes every artifact
// (dataset, label table, vocabulary, checkpoints, per-stage logs, generation
// records, metric record, leaderboard) under out_dir.
BenchmarkResult run_benchmark(const RunConfig& cfg, const std::string& out_dir);

}  // namespace cxrgen
