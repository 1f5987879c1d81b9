#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace cxrgen {

// ---- pathology label table ------------------------------------------------

inline constexpr int kNumLabels = 14;

// Keyword tables drive both report synthesis and rule-based label extraction,
// which keeps the clinical-efficacy metrics exact on the synthetic corpus.
struct LabelTable {
    std::array<std::string, kNumLabels> names;
    // Per label: token phrases whose consecutive appearance marks it present.
    std::array<std::vector<std::vector<std::string>>, kNumLabels> keywords;

    static const LabelTable& builtin();

    // name<TAB>phrase|phrase|... (one label per line, canonical order).
    std::string to_tsv() const;
    static LabelTable from_tsv_file(const std::string& path);  // FormatError on malformed input

    const std::vector<std::string>& primary(int label) const { return keywords[static_cast<std::size_t>(label)][0]; }
};

// Joins a phrase's tokens with single spaces ("pleural effusion").
std::string phrase_text(const std::vector<std::string>& phrase);

// Rule-based extraction: scan each "."-delimited sentence for keyword
// phrases; a hit is negative when a negation cue ("no", "without", "free of",
// "negative for", "clear of") starts at most 6 tokens before it in the same
// sentence.  A label is positive when any un-negated hit exists.
std::array<bool, kNumLabels> extract_labels(const std::string& text, const LabelTable& table);

// ---- text-generation metrics ----------------------------------------------

// Corpus BLEU-n: clipped modified n-gram precisions, uniform 1/n weights,
// brevity penalty exp(min(0, 1 - r/c)) with r summed from the closest
// reference length per sample.  Any zero precision gives 0 (no smoothing).
// ContractError on an empty or misaligned corpus.
double bleu(const std::vector<std::string>& candidates,
            const std::vector<std::vector<std::string>>& references, int n);

// Mean per-sample LCS F-measure (beta = 1); 0/0 counts as 0.
double rouge_l(const std::vector<std::string>& candidates,
               const std::vector<std::string>& references);

// Exact-match METEOR: leftmost-greedy alignment, Fmean = PR/(0.9P + 0.1R),
// chunk penalty 0.5*(chunks/matches)^3, corpus mean.
double meteor(const std::vector<std::string>& candidates,
              const std::vector<std::string>& references);

// CIDEr-D over n = 1..4: tf-idf vectors with candidate counts clipped at the
// reference count, cosine similarity, Gaussian length penalty (sigma = 6),
// times 10.  ContractError when the corpus has fewer than 2 samples.
double cider(const std::vector<std::string>& candidates,
             const std::vector<std::string>& references);

// ---- clinical efficacy ----------------------------------------------------

struct CEResult {
    double precision = 0.0;  // micro-averaged over (sample x label) decisions
    double recall = 0.0;
    double f1 = 0.0;
    double macro_precision = 0.0;  // example-based means, logged alongside
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
};

CEResult clinical_efficacy(const std::vector<std::string>& pred_reports,
                           const std::vector<std::string>& gt_reports, const LabelTable& table);

// ---- combined report ------------------------------------------------------

struct MetricReport {
    double b1 = 0, b2 = 0, b3 = 0, b4 = 0;
    double rouge_l = 0, meteor = 0, cider = 0;
    double ce_p = 0, ce_r = 0, ce_f1 = 0;
    std::int64_t n = 0;

    // One line, fixed key order: b1,b2,b3,b4,rouge_l,meteor,cider,ce_p,ce_r,ce_f1,n.
    std::string to_record() const;
};

MetricReport evaluate_corpus(const std::vector<std::string>& pred,
                             const std::vector<std::string>& gt, const LabelTable& table);

}  // namespace cxrgen
