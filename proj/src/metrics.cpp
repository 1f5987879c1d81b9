#include "cxrgen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

#include "cxrgen/encoders.hpp"
#include "cxrgen/errors.hpp"

namespace cxrgen {

// ---- label table ----------------------------------------------------------

namespace {

std::vector<std::vector<std::string>> phrases(std::initializer_list<const char*> list) {
    std::vector<std::vector<std::string>> out;
    for (const char* p : list) out.push_back(normalize_tokens(p));
    return out;
}

LabelTable make_builtin() {
    LabelTable t;
    t.names = {"enlarged cardiomediastinum", "cardiomegaly", "lung opacity", "lung lesion",
               "edema", "consolidation", "pneumonia", "atelectasis", "pneumothorax",
               "pleural effusion", "pleural thickening", "fracture", "support devices",
               "fibrosis"};
    t.keywords[0] = phrases({"enlarged cardiomediastinum", "widened mediastinum"});
    t.keywords[1] = phrases({"cardiomegaly", "enlarged heart"});
    t.keywords[2] = phrases({"lung opacity", "airspace opacity"});
    t.keywords[3] = phrases({"lung lesion", "pulmonary nodule"});
    t.keywords[4] = phrases({"edema", "vascular congestion"});
    t.keywords[5] = phrases({"consolidation", "consolidative change"});
    t.keywords[6] = phrases({"pneumonia", "infectious process"});
    t.keywords[7] = phrases({"atelectasis", "volume loss"});
    t.keywords[8] = phrases({"pneumothorax", "apical air collection"});
    t.keywords[9] = phrases({"pleural effusion", "pleural fluid", "costophrenic blunting"});
    t.keywords[10] = phrases({"pleural thickening", "pleural scarring"});
    t.keywords[11] = phrases({"fracture", "rib deformity"});
    t.keywords[12] =
        phrases({"support device", "support devices", "endotracheal tube", "central catheter",
                 "pacemaker"});
    t.keywords[13] = phrases({"fibrosis", "fibrotic change", "reticular scarring"});
    return t;
}

}  // namespace

const LabelTable& LabelTable::builtin() {
    static const LabelTable table = make_builtin();
    return table;
}

std::string phrase_text(const std::vector<std::string>& phrase) {
    std::string out;
    for (const std::string& tok : phrase) {
        if (!out.empty()) out += ' ';
        out += tok;
    }
    return out;
}

std::string LabelTable::to_tsv() const {
    std::string out;
    for (int i = 0; i < kNumLabels; ++i) {
        out += names[static_cast<std::size_t>(i)];
        out += '\t';
        const auto& ks = keywords[static_cast<std::size_t>(i)];
        for (std::size_t k = 0; k < ks.size(); ++k) {
            if (k) out += '|';
            out += phrase_text(ks[k]);
        }
        out += '\n';
    }
    return out;
}

LabelTable LabelTable::from_tsv_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("LabelTable: cannot open " + path);
    LabelTable t;
    std::string line;
    int row = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (row >= kNumLabels) throw FormatError("LabelTable: more than 14 label rows in " + path);
        const std::size_t tab = line.find('\t');
        if (tab == std::string::npos) {
            throw FormatError("LabelTable: missing tab separator in " + path);
        }
        t.names[static_cast<std::size_t>(row)] = line.substr(0, tab);
        std::stringstream rest(line.substr(tab + 1));
        std::string phrase;
        while (std::getline(rest, phrase, '|')) {
            const std::vector<std::string> toks = normalize_tokens(phrase);
            if (toks.empty()) throw FormatError("LabelTable: empty keyword phrase in " + path);
            t.keywords[static_cast<std::size_t>(row)].push_back(toks);
        }
        if (t.keywords[static_cast<std::size_t>(row)].empty()) {
            throw FormatError("LabelTable: label without keywords in " + path);
        }
        ++row;
    }
    if (row != kNumLabels) {
        throw FormatError("LabelTable: expected 14 label rows, found " + std::to_string(row) +
                          " in " + path);
    }
    return t;
}

// ---- label extraction -----------------------------------------------------

namespace {

const std::vector<std::vector<std::string>>& negation_cues() {
    static const std::vector<std::vector<std::string>> cues = {
        {"no"}, {"without"}, {"free", "of"}, {"negative", "for"}, {"clear", "of"}};
    return cues;
}

bool phrase_at(const std::vector<std::string>& toks, std::size_t pos,
               const std::vector<std::string>& phrase) {
    if (pos + phrase.size() > toks.size()) return false;
    for (std::size_t k = 0; k < phrase.size(); ++k) {
        if (toks[pos + k] != phrase[k]) return false;
    }
    return true;
}

}  // namespace

std::array<bool, kNumLabels> extract_labels(const std::string& text, const LabelTable& table) {
    std::array<bool, kNumLabels> out{};
    const std::vector<std::string> tokens = normalize_tokens(text);
    // Sentence boundaries at "." tokens.
    std::vector<std::pair<std::size_t, std::size_t>> sentences;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= tokens.size(); ++i) {
        if (i == tokens.size() || tokens[i] == ".") {
            if (i > start) sentences.emplace_back(start, i);
            start = i + 1;
        }
    }
    for (const auto& [s0, s1] : sentences) {
        // Cue start positions within this sentence.
        std::vector<std::size_t> cue_starts;
        for (std::size_t i = s0; i < s1; ++i) {
            for (const auto& cue : negation_cues()) {
                if (phrase_at(tokens, i, cue) && i + cue.size() <= s1) {
                    cue_starts.push_back(i);
                    break;
                }
            }
        }
        for (int label = 0; label < kNumLabels; ++label) {
            if (out[static_cast<std::size_t>(label)]) continue;
            for (const auto& phrase : table.keywords[static_cast<std::size_t>(label)]) {
                for (std::size_t i = s0; i + phrase.size() <= s1; ++i) {
                    if (!phrase_at(tokens, i, phrase)) continue;
                    bool negated = false;
                    for (std::size_t cs : cue_starts) {
                        if (cs < i && i - cs <= 6) {
                            negated = true;
                            break;
                        }
                    }
                    if (!negated) {
                        out[static_cast<std::size_t>(label)] = true;
                        break;
                    }
                }
                if (out[static_cast<std::size_t>(label)]) break;
            }
        }
    }
    return out;
}

// ---- n-gram machinery -----------------------------------------------------

namespace {

using TokenIds = std::vector<int>;

struct Interner {
    std::unordered_map<std::string, int> pool;
    TokenIds ids(const std::string& text) {
        TokenIds out;
        for (const std::string& tok : normalize_tokens(text)) {
            auto [it, fresh] = pool.emplace(tok, static_cast<int>(pool.size()));
            out.push_back(it->second);
        }
        return out;
    }
};

using GramCounts = std::map<TokenIds, std::int64_t>;

GramCounts count_ngrams(const TokenIds& toks, int n) {
    GramCounts counts;
    if (static_cast<int>(toks.size()) < n) return counts;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i) {
        ++counts[TokenIds(toks.begin() + static_cast<std::ptrdiff_t>(i),
                          toks.begin() + static_cast<std::ptrdiff_t>(i) + n)];
    }
    return counts;
}

void check_aligned(std::size_t cand, std::size_t ref, const char* who) {
    if (cand == 0) throw ContractError(std::string(who) + ": empty corpus");
    if (cand != ref) {
        throw ContractError(std::string(who) + ": " + std::to_string(cand) + " candidates vs " +
                            std::to_string(ref) + " references");
    }
}

}  // namespace

// ---- BLEU -----------------------------------------------------------------

double bleu(const std::vector<std::string>& candidates,
            const std::vector<std::vector<std::string>>& references, int n) {
    check_aligned(candidates.size(), references.size(), "bleu");
    if (n < 1 || n > 4) throw ContractError("bleu: order must be 1..4");
    Interner intern;
    std::vector<double> numer(static_cast<std::size_t>(n), 0.0);
    std::vector<double> denom(static_cast<std::size_t>(n), 0.0);
    double r_total = 0.0, c_total = 0.0;
    for (std::size_t s = 0; s < candidates.size(); ++s) {
        if (references[s].empty()) {
            throw ContractError("bleu: sample " + std::to_string(s) + " has no references");
        }
        const TokenIds cand = intern.ids(candidates[s]);
        std::vector<TokenIds> refs;
        refs.reserve(references[s].size());
        for (const std::string& ref : references[s]) refs.push_back(intern.ids(ref));

        const std::int64_t clen = static_cast<std::int64_t>(cand.size());
        std::int64_t best_ref = static_cast<std::int64_t>(refs[0].size());
        for (const TokenIds& ref : refs) {
            const std::int64_t rl = static_cast<std::int64_t>(ref.size());
            const std::int64_t cur = std::llabs(rl - clen), best = std::llabs(best_ref - clen);
            if (cur < best || (cur == best && rl < best_ref)) best_ref = rl;
        }
        c_total += static_cast<double>(clen);
        r_total += static_cast<double>(best_ref);

        for (int k = 1; k <= n; ++k) {
            const GramCounts cand_counts = count_ngrams(cand, k);
            GramCounts max_ref;
            for (const TokenIds& ref : refs) {
                for (const auto& [gram, cnt] : count_ngrams(ref, k)) {
                    auto& slot = max_ref[gram];
                    slot = std::max(slot, cnt);
                }
            }
            for (const auto& [gram, cnt] : cand_counts) {
                const auto it = max_ref.find(gram);
                const std::int64_t clip = it == max_ref.end() ? 0 : std::min(cnt, it->second);
                numer[static_cast<std::size_t>(k - 1)] += static_cast<double>(clip);
                denom[static_cast<std::size_t>(k - 1)] += static_cast<double>(cnt);
            }
        }
    }
    double log_sum = 0.0;
    for (int k = 0; k < n; ++k) {
        if (numer[static_cast<std::size_t>(k)] <= 0.0 || denom[static_cast<std::size_t>(k)] <= 0.0) {
            return 0.0;  // no smoothing: a silent order zeroes the score
        }
        log_sum += std::log(numer[static_cast<std::size_t>(k)] / denom[static_cast<std::size_t>(k)]);
    }
    if (c_total <= 0.0) return 0.0;
    const double bp = c_total >= r_total ? 1.0 : std::exp(1.0 - r_total / c_total);
    return bp * std::exp(log_sum / static_cast<double>(n));
}

// ---- ROUGE-L --------------------------------------------------------------

namespace {

std::int64_t lcs_length(const TokenIds& a, const TokenIds& b) {
    const std::size_t la = a.size(), lb = b.size();
    std::vector<std::int64_t> prev(lb + 1, 0), cur(lb + 1, 0);
    for (std::size_t i = 1; i <= la; ++i) {
        for (std::size_t j = 1; j <= lb; ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[lb];
}

}  // namespace

double rouge_l(const std::vector<std::string>& candidates,
               const std::vector<std::string>& references) {
    check_aligned(candidates.size(), references.size(), "rouge_l");
    Interner intern;
    double total = 0.0;
    for (std::size_t s = 0; s < candidates.size(); ++s) {
        const TokenIds cand = intern.ids(candidates[s]);
        const TokenIds ref = intern.ids(references[s]);
        const double l = static_cast<double>(lcs_length(cand, ref));
        const double p = cand.empty() ? 0.0 : l / static_cast<double>(cand.size());
        const double r = ref.empty() ? 0.0 : l / static_cast<double>(ref.size());
        total += (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
    }
    return total / static_cast<double>(candidates.size());
}

// ---- METEOR ---------------------------------------------------------------

double meteor(const std::vector<std::string>& candidates,
              const std::vector<std::string>& references) {
    check_aligned(candidates.size(), references.size(), "meteor");
    Interner intern;
    double total = 0.0;
    for (std::size_t s = 0; s < candidates.size(); ++s) {
        const TokenIds cand = intern.ids(candidates[s]);
        const TokenIds ref = intern.ids(references[s]);
        // Leftmost-greedy alignment: each candidate token takes the first
        // unmatched identical reference token.
        std::vector<bool> used(ref.size(), false);
        std::vector<std::pair<std::size_t, std::size_t>> matches;  // (cand pos, ref pos)
        for (std::size_t i = 0; i < cand.size(); ++i) {
            for (std::size_t j = 0; j < ref.size(); ++j) {
                if (!used[j] && ref[j] == cand[i]) {
                    used[j] = true;
                    matches.emplace_back(i, j);
                    break;
                }
            }
        }
        const double m = static_cast<double>(matches.size());
        if (m == 0.0 || cand.empty() || ref.empty()) continue;  // contributes 0
        std::int64_t chunks = 0;
        for (std::size_t k = 0; k < matches.size(); ++k) {
            const bool contiguous = k > 0 && matches[k].first == matches[k - 1].first + 1 &&
                                    matches[k].second == matches[k - 1].second + 1;
            if (!contiguous) ++chunks;
        }
        const double p = m / static_cast<double>(cand.size());
        const double r = m / static_cast<double>(ref.size());
        const double fmean = p * r / (0.9 * p + 0.1 * r);
        const double penalty = 0.5 * std::pow(static_cast<double>(chunks) / m, 3.0);
        total += fmean * (1.0 - penalty);
    }
    return total / static_cast<double>(candidates.size());
}

// ---- CIDEr-D --------------------------------------------------------------

double cider(const std::vector<std::string>& candidates,
             const std::vector<std::string>& references) {
    check_aligned(candidates.size(), references.size(), "cider");
    const std::size_t m_samples = candidates.size();
    if (m_samples < 2) throw ContractError("cider: idf needs a corpus of at least 2 samples");
    Interner intern;
    std::vector<TokenIds> cands, refs;
    cands.reserve(m_samples);
    refs.reserve(m_samples);
    for (std::size_t s = 0; s < m_samples; ++s) {
        cands.push_back(intern.ids(candidates[s]));
        refs.push_back(intern.ids(references[s]));
    }
    double total = 0.0;
    for (int n = 1; n <= 4; ++n) {
        // Document frequency over references.
        GramCounts df;
        for (const TokenIds& ref : refs) {
            for (const auto& [gram, cnt] : count_ngrams(ref, n)) ++df[gram];
        }
        const auto idf = [&](const TokenIds& gram) {
            const auto it = df.find(gram);
            const std::int64_t d = it == df.end() ? 0 : it->second;
            return std::log(static_cast<double>(m_samples) /
                            static_cast<double>(std::max<std::int64_t>(d, 1)));
        };
        for (std::size_t s = 0; s < m_samples; ++s) {
            const GramCounts cc = count_ngrams(cands[s], n);
            const GramCounts rc = count_ngrams(refs[s], n);
            const double tc = static_cast<double>(std::max<std::int64_t>(
                static_cast<std::int64_t>(cands[s].size()) - n + 1, 0));
            const double tr = static_cast<double>(std::max<std::int64_t>(
                static_cast<std::int64_t>(refs[s].size()) - n + 1, 0));
            if (tc <= 0.0 || tr <= 0.0) continue;  // zero-norm order contributes 0
            double dot = 0.0, cn = 0.0, rn = 0.0;
            for (const auto& [gram, cnt] : cc) {
                const double w = idf(gram);
                const double q = static_cast<double>(cnt) / tc * w;
                cn += q * q;
                const auto it = rc.find(gram);
                if (it != rc.end()) {
                    const double clipped =
                        static_cast<double>(std::min(cnt, it->second)) / tc * w;
                    dot += clipped * (static_cast<double>(it->second) / tr * w);
                }
            }
            for (const auto& [gram, cnt] : rc) {
                const double p = static_cast<double>(cnt) / tr * idf(gram);
                rn += p * p;
            }
            if (cn <= 0.0 || rn <= 0.0) continue;
            const double delta = static_cast<double>(cands[s].size()) -
                                 static_cast<double>(refs[s].size());
            const double penalty = std::exp(-delta * delta / (2.0 * 6.0 * 6.0));
            total += dot / (std::sqrt(cn) * std::sqrt(rn)) * penalty;
        }
    }
    return 10.0 * total / (4.0 * static_cast<double>(m_samples));
}

// ---- clinical efficacy ----------------------------------------------------

CEResult clinical_efficacy(const std::vector<std::string>& pred_reports,
                           const std::vector<std::string>& gt_reports, const LabelTable& table) {
    check_aligned(pred_reports.size(), gt_reports.size(), "clinical_efficacy");
    std::int64_t tp = 0, fp = 0, fn = 0;
    double macro_p = 0.0, macro_r = 0.0, macro_f = 0.0;
    for (std::size_t s = 0; s < pred_reports.size(); ++s) {
        const auto pv = extract_labels(pred_reports[s], table);
        const auto gv = extract_labels(gt_reports[s], table);
        std::int64_t stp = 0, sfp = 0, sfn = 0;
        for (int l = 0; l < kNumLabels; ++l) {
            const bool p = pv[static_cast<std::size_t>(l)], g = gv[static_cast<std::size_t>(l)];
            stp += p && g;
            sfp += p && !g;
            sfn += !p && g;
        }
        tp += stp;
        fp += sfp;
        fn += sfn;
        const double sp = stp + sfp > 0 ? static_cast<double>(stp) / static_cast<double>(stp + sfp) : 0.0;
        const double sr = stp + sfn > 0 ? static_cast<double>(stp) / static_cast<double>(stp + sfn) : 0.0;
        macro_p += sp;
        macro_r += sr;
        macro_f += (sp + sr) > 0.0 ? 2.0 * sp * sr / (sp + sr) : 0.0;
    }
    CEResult out;
    out.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    out.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    out.f1 = (out.precision + out.recall) > 0.0
                 ? 2.0 * out.precision * out.recall / (out.precision + out.recall)
                 : 0.0;
    const double n = static_cast<double>(pred_reports.size());
    out.macro_precision = macro_p / n;
    out.macro_recall = macro_r / n;
    out.macro_f1 = macro_f / n;
    return out;
}

// ---- combined -------------------------------------------------------------

std::string MetricReport::to_record() const {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "{\"b1\":%.6f,\"b2\":%.6f,\"b3\":%.6f,\"b4\":%.6f,\"rouge_l\":%.6f,"
                  "\"meteor\":%.6f,\"cider\":%.6f,\"ce_p\":%.6f,\"ce_r\":%.6f,\"ce_f1\":%.6f,"
                  "\"n\":%lld}",
                  b1, b2, b3, b4, rouge_l, meteor, cider, ce_p, ce_r, ce_f1,
                  static_cast<long long>(n));
    return buf;
}

MetricReport evaluate_corpus(const std::vector<std::string>& pred,
                             const std::vector<std::string>& gt, const LabelTable& table) {
    check_aligned(pred.size(), gt.size(), "evaluate_corpus");
    if (pred.size() < 2) {
        throw ContractError("evaluate_corpus: need at least 2 samples (idf is corpus-level)");
    }
    std::vector<std::vector<std::string>> refs;
    refs.reserve(gt.size());
    for (const std::string& g : gt) refs.push_back({g});
    MetricReport r;
    r.b1 = bleu(pred, refs, 1);
    r.b2 = bleu(pred, refs, 2);
    r.b3 = bleu(pred, refs, 3);
    r.b4 = bleu(pred, refs, 4);
    r.rouge_l = rouge_l(pred, gt);
    r.meteor = meteor(pred, gt);
    r.cider = cider(pred, gt);
    const CEResult ce = clinical_efficacy(pred, gt, table);
    r.ce_p = ce.precision;
    r.ce_r = ce.recall;
    r.ce_f1 = ce.f1;
    r.n = static_cast<std::int64_t>(pred.size());
    return r;
}

}  // namespace cxrgen
