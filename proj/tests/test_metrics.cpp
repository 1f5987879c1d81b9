#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "cxrgen/errors.hpp"
#include "cxrgen/metrics.hpp"
#include "cxrgen/rng.hpp"
#include "doctest.h"

using namespace cxrgen;

namespace {

std::vector<std::vector<std::string>> single_refs(const std::vector<std::string>& refs) {
    std::vector<std::vector<std::string>> out;
    for (const std::string& r : refs) out.push_back({r});
    return out;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("bleu: identity scores one at every order") {
    const std::vector<std::string> c = {"the heart is normal .", "no effusion is seen ."};
    for (int n = 1; n <= 4; ++n) {
        CHECK(bleu(c, single_refs(c), n) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("bleu: short candidate against a long reference") {
    // p1 = p2 = 1, brevity penalty exp(1 - 6/3) = e^-1.
    const double got = bleu({"the cat sat"}, {{"the cat sat on the mat"}}, 2);
    CHECK(got == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
    CHECK(got == doctest::Approx(0.367879).epsilon(1e-5));
}

TEST_CASE("bleu: disjoint vocabularies and silent orders give zero") {
    CHECK(bleu({"a b c d"}, {{"e f g h"}}, 1) == 0.0);
    CHECK(bleu({"a b c d"}, {{"e f g h"}}, 4) == 0.0);
    // Unigrams overlap but no bigram does: BLEU-2 is 0 without smoothing.
    CHECK(bleu({"a c"}, {{"a b c"}}, 2) == 0.0);
}

TEST_CASE("bleu: multiple references clip against the best and pick the closest length") {
    // Candidate length 3; references of lengths 3 and 6 -> r uses 3, BP = 1.
    const double got = bleu({"the cat sat"}, {{"the cat ran", "the cat sat on the mat"}}, 1);
    CHECK(got == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("bleu: contract violations") {
    CHECK_THROWS_AS(bleu({}, {}, 1), ContractError);
    CHECK_THROWS_AS(bleu({"a"}, {}, 1), ContractError);
    CHECK_THROWS_AS(bleu({"a"}, {{}}, 1), ContractError);
    CHECK_THROWS_AS(bleu({"a"}, {{"a"}}, 5), ContractError);
}

TEST_CASE("rouge-l oracles") {
    CHECK(rouge_l({"x y z"}, {"x y z"}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rouge_l({"a b c d"}, {"a c b d"}) == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(rouge_l({"a b"}, {"c d"}) == 0.0);
    CHECK(rouge_l({"x y z", "a b"}, {"x y z", "c d"}) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK_THROWS_AS(rouge_l({}, {}), ContractError);
}

TEST_CASE("meteor oracles") {
    // Identical 3-token sentences: 1 - 0.5 * (1/3)^3.
    CHECK(meteor({"a b c"}, {"a b c"}) == doctest::Approx(0.981481).epsilon(1e-5));
    CHECK(meteor({"a b c"}, {"a b c"}) ==
          doctest::Approx(1.0 - 0.5 / 27.0).epsilon(1e-12));
    CHECK(meteor({"a b"}, {"c d"}) == 0.0);
    // Reversed two-token sentence: two chunks, Fmean 1, penalty 0.5.
    CHECK(meteor({"b a"}, {"a b"}) == doctest::Approx(0.5).epsilon(1e-12));
    // The self-score formula holds for any length m.
    for (int m = 1; m <= 6; ++m) {
        std::string sent;
        for (int k = 0; k < m; ++k) {
            if (k) sent += ' ';
            sent += static_cast<char>('a' + k);
        }
        const double want = 1.0 - 0.5 * std::pow(1.0 / static_cast<double>(m), 3.0);
        CHECK(meteor({sent}, {sent}) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("cider: two-sample hand oracle") {
    // Candidate 1 matches its reference exactly at n = 1, 2 and has no
    // trigrams, so its score is 10 * (1 + 1 + 0 + 0) / 4 = 5.  Candidate 2
    // shares nothing with its reference.
    const double got = cider({"a b", "x y"}, {"a b", "c d"});
    CHECK(got == doctest::Approx(5.0 / 2.0).epsilon(1e-9));  // sample 2 scores 0
    // Two-token identities max out at 5; four-token identities reach 10.
    CHECK(cider({"a b", "c d"}, {"a b", "c d"}) == doctest::Approx(5.0).epsilon(1e-9));
    CHECK(cider({"a b c d", "e f g h"}, {"a b c d", "e f g h"}) ==
          doctest::Approx(10.0).epsilon(1e-9));
}

TEST_CASE("cider: identical references zero the idf and the score") {
    CHECK(cider({"a b", "a b"}, {"a b", "a b"}) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("cider: gaussian length penalty scales by exp(-2) at a 12-token gap") {
    // Sample 1: a 4-fold "x" candidate vs a 16-fold "x" reference -- every
    // tf-idf cosine is 1 at n = 1..4, leaving exactly the penalty exp(-144/72).
    std::string long_x = "x", long_y = "y";
    for (int k = 1; k < 16; ++k) {
        long_x += " x";
        long_y += " y";
    }
    const double got = cider({"x x x x", long_y}, {long_x, long_y});
    const double want = (10.0 * std::exp(-2.0) + 10.0) / 2.0;
    CHECK(got == doctest::Approx(want).epsilon(1e-9));
    CHECK_THROWS_AS(cider({"a"}, {"a"}), ContractError);
}

TEST_CASE("label extraction: negation and sentence scoping") {
    const LabelTable& t = LabelTable::builtin();
    auto v = extract_labels("no pleural effusion . small pneumothorax .", t);
    CHECK_FALSE(v[9]);
    CHECK(v[8]);
    for (int l = 0; l < kNumLabels; ++l) {
        if (l != 8) CHECK_FALSE(v[static_cast<std::size_t>(l)]);
    }

    auto none = extract_labels("", t);
    for (bool b : none) CHECK_FALSE(b);
    auto generic = extract_labels("no acute findings", t);
    for (bool b : generic) CHECK_FALSE(b);
}

TEST_CASE("label extraction: every cue form negates within its window") {
    const LabelTable& t = LabelTable::builtin();
    CHECK_FALSE(extract_labels("the study is without consolidation .", t)[5]);
    CHECK_FALSE(extract_labels("free of cardiomegaly .", t)[1]);
    CHECK_FALSE(extract_labels("negative for pneumonia .", t)[6]);
    CHECK_FALSE(extract_labels("lungs are clear of atelectasis .", t)[7]);
    CHECK_FALSE(extract_labels("without clear evidence of pleural effusion .", t)[9]);
}

TEST_CASE("label extraction: the negation window is six tokens") {
    const LabelTable& t = LabelTable::builtin();
    // Cue 6 tokens before the keyword start: still negated.
    CHECK_FALSE(extract_labels("no w1 w2 w3 w4 w5 edema .", t)[4]);
    // Seven tokens: out of the window, the hit stands.
    CHECK(extract_labels("no w1 w2 w3 w4 w5 w6 edema .", t)[4]);
    // Negation applies per sentence; a later positive sentence wins.
    CHECK(extract_labels("no consolidation . dense consolidation persists .", t)[5]);
    // A cue in a previous sentence does not leak forward.
    CHECK(extract_labels("no change . fibrosis is present .", t)[13]);
}

TEST_CASE("label extraction: alternate keyword phrases fire") {
    const LabelTable& t = LabelTable::builtin();
    CHECK(extract_labels("pleural fluid layering posteriorly .", t)[9]);
    CHECK(extract_labels("costophrenic blunting on the left .", t)[9]);
    CHECK(extract_labels("a widened mediastinum is noted .", t)[0]);
    CHECK(extract_labels("endotracheal tube in place .", t)[12]);
    CHECK(extract_labels("there is volume loss on the right .", t)[7]);
    // Shared-word phrases stay distinct: "pleural scarring" is thickening,
    // not effusion; "reticular scarring" is fibrosis.
    auto v = extract_labels("pleural scarring and reticular scarring .", t);
    CHECK(v[10]);
    CHECK(v[13]);
    CHECK_FALSE(v[9]);
}

TEST_CASE("clinical efficacy oracles") {
    const LabelTable& t = LabelTable::builtin();
    SUBCASE("identity with a positive present") {
        const std::vector<std::string> r = {"cardiomegaly is present .", "no edema ."};
        const CEResult ce = clinical_efficacy(r, r, t);
        CHECK(ce.precision == 1.0);
        CHECK(ce.recall == 1.0);
        CHECK(ce.f1 == 1.0);
    }
    SUBCASE("all-negative prediction against positives") {
        const CEResult ce = clinical_efficacy({"clear lungs ."}, {"pneumonia is seen ."}, t);
        CHECK(ce.precision == 0.0);
        CHECK(ce.recall == 0.0);
        CHECK(ce.f1 == 0.0);
    }
    SUBCASE("partial recall") {
        const CEResult ce = clinical_efficacy({"pleural effusion is present ."},
                                              {"pleural effusion and pneumothorax are present ."},
                                              t);
        CHECK(ce.precision == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(ce.recall == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(ce.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
        CHECK(ce.macro_precision == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(ce.macro_recall == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(ce.macro_f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    }
    SUBCASE("label-free corpus scores zero by convention") {
        const CEResult ce = clinical_efficacy({"unremarkable ."}, {"normal study ."}, t);
        CHECK(ce.precision == 0.0);
        CHECK(ce.recall == 0.0);
        CHECK(ce.f1 == 0.0);
    }
}

TEST_CASE("metrics normalize case before scoring") {
    CHECK(bleu({"The Heart"}, {{"the heart"}}, 2) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rouge_l({"A B"}, {"a b"}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(meteor({"A b"}, {"a B"}) == meteor({"a b"}, {"a b"}));
    CHECK(cider({"A b", "c d"}, {"a B", "c D"}) == cider({"a b", "c d"}, {"a b", "c d"}));
}

TEST_CASE("metrics are invariant to sample order") {
    std::vector<std::string> cand = {"cardiomegaly is present .", "no effusion .",
                                     "pneumonia in the right lung .", "clear lungs .",
                                     "fracture of the fifth rib ."};
    std::vector<std::string> ref = {"cardiomegaly persists .", "no pleural effusion .",
                                    "right lung pneumonia .", "the lungs are clear .",
                                    "an acute fracture is seen ."};
    const double b = bleu(cand, single_refs(ref), 2);
    const double r = rouge_l(cand, ref);
    const double m = meteor(cand, ref);
    const double c = cider(cand, ref);
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<std::int64_t> order(cand.size());
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        std::vector<std::string> pc, pr;
        for (std::int64_t i : order) {
            pc.push_back(cand[static_cast<std::size_t>(i)]);
            pr.push_back(ref[static_cast<std::size_t>(i)]);
        }
        CHECK(bleu(pc, single_refs(pr), 2) == doctest::Approx(b).epsilon(1e-12));
        CHECK(rouge_l(pc, pr) == doctest::Approx(r).epsilon(1e-12));
        CHECK(meteor(pc, pr) == doctest::Approx(m).epsilon(1e-12));
        CHECK(cider(pc, pr) == doctest::Approx(c).epsilon(1e-12));
    }
}

TEST_CASE("metrics are pure: repeated calls agree bitwise") {
    const std::vector<std::string> cand = {"edema and effusion .", "normal heart ."};
    const std::vector<std::string> ref = {"mild edema .", "the heart is normal ."};
    CHECK(bleu(cand, single_refs(ref), 4) == bleu(cand, single_refs(ref), 4));
    CHECK(rouge_l(cand, ref) == rouge_l(cand, ref));
    CHECK(meteor(cand, ref) == meteor(cand, ref));
    CHECK(cider(cand, ref) == cider(cand, ref));
}

TEST_CASE("combined evaluation and its serialized record") {
    const LabelTable& t = LabelTable::builtin();
    const std::vector<std::string> gt = {"cardiomegaly is present . a b c .",
                                         "no edema . d e f ."};
    MetricReport r = evaluate_corpus(gt, gt, t);
    CHECK(r.b1 == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.b4 == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.rouge_l == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.meteor < 1.0);  // the self-score chunk penalty keeps it below one
    CHECK(r.ce_p == 1.0);
    CHECK(r.ce_r == 1.0);
    CHECK(r.ce_f1 == 1.0);
    CHECK(r.n == 2);

    const std::string rec = r.to_record();
    CHECK(rec.find("\"b1\":1.000000") != std::string::npos);
    CHECK(rec.find("\"n\":2") != std::string::npos);
    // Fixed key order end to end.
    const char* keys[] = {"b1", "b2", "b3", "b4", "rouge_l", "meteor",
                          "cider", "ce_p", "ce_r", "ce_f1", "n"};
    std::size_t at = 0;
    for (const char* k : keys) {
        const std::size_t found = rec.find(std::string("\"") + k + "\":", at);
        REQUIRE(found != std::string::npos);
        at = found + 1;
    }
    CHECK_THROWS_AS(evaluate_corpus({"a"}, {"a"}, t), ContractError);
    CHECK_THROWS_AS(evaluate_corpus({}, {}, t), ContractError);
}

TEST_CASE("label table file round-trip") {
    const LabelTable& t = LabelTable::builtin();
    const std::string path = "/tmp/cxrgen_test_labels.tsv";
    {
        std::ofstream os(path);
        os << t.to_tsv();
    }
    const LabelTable loaded = LabelTable::from_tsv_file(path);
    CHECK(loaded.names == t.names);
    for (int l = 0; l < kNumLabels; ++l) {
        CHECK(loaded.keywords[static_cast<std::size_t>(l)] ==
              t.keywords[static_cast<std::size_t>(l)]);
    }
    {
        std::ofstream os(path);
        os << "only one line without a tab\n";
    }
    CHECK_THROWS_AS(LabelTable::from_tsv_file(path), FormatError);
    {
        std::ofstream os(path);  // 13 rows only
        os << t.to_tsv().substr(0, t.to_tsv().rfind("fibrosis"));
    }
    CHECK_THROWS_AS(LabelTable::from_tsv_file(path), FormatError);
    std::remove(path.c_str());
}

}  // TEST_SUITE
