#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cxrgen/metrics.hpp"
#include "cxrgen/rng.hpp"
#include "cxrgen/tensor.hpp"

namespace cxrgen {

// ---- procedural findings --------------------------------------------------

// Placement jitters for one pathology signature, all bounded so every
// signature stays inside the image: offsets +-0.02, radius +-0.01,
// intensity +-0.05 (fractions of the image side / nominal intensity).
struct FindingParams {
    double jx = 0.0;
    double jy = 0.0;
    double jr = 0.0;
    double ji = 0.0;
};

// A sample's pathology content: presence mask over the label table plus
// placement parameters.  Parameters are drawn for every label regardless of
// presence, so toggling one label never shifts another label's placement.
struct FindingSet {
    std::uint32_t mask = 0;
    std::array<FindingParams, kNumLabels> params{};

    bool has(int label) const { return (mask >> label) & 1u; }
};

// Draws placement parameters for all labels, then a finding count with
// distribution {0: 0.20, 1: 0.35, 2: 0.25, 3: 0.15, 4: 0.05} and that many
// distinct labels (without replacement).
FindingSet draw_findings(Rng& rng);

// ---- image synthesis ------------------------------------------------------

// Renders a [size, size, 3] chest-film-like image: dark background, two
// bright lung ellipses, a vertical spine band, one additive signature per
// present finding, Gaussian pixel noise (sigma = 0.02) from noise_seed,
// clamp to [0, 1], and quantization to the 8-bit grid k/255 (the canonical
// stored form, so rendering and byte storage round-trip exactly).
Tensor synth_image(const FindingSet& findings, std::int64_t size, std::uint64_t noise_seed);

// Maps a quantized image tensor to its canonical bytes (k for value k/255).
std::vector<std::uint8_t> quantize_image(const Tensor& image);

// Inverse of quantize_image: bytes -> [size, size, 3] tensor of k/255.
Tensor image_from_bytes(const std::vector<std::uint8_t>& pixels, std::int64_t size);

// ---- report synthesis -----------------------------------------------------

// Writes the paired report for a label mask: one template sentence per
// present label (3 phrasings each), negations for 2 seeded absent labels,
// and a fixed closing sentence; sentence order is seeded, the closing is
// always last.  Output is already normalized (lowercase, " . " separators)
// and satisfies extract_labels(synth_report(mask, s)) == mask for every
// mask with at most 4 labels: positive templates contain exactly their own
// label's keywords and no negation cues, negation sentences put the cue
// within the extractor's 6-token window.
std::string synth_report(std::uint32_t mask, std::uint64_t seed);

// ---- corpus ---------------------------------------------------------------

inline constexpr int kSplitTrain = 0;
inline constexpr int kSplitVal = 1;
inline constexpr int kSplitTest = 2;

// One paired sample: quantized pixels (size*size*3 bytes, row-major,
// channel-innermost), label mask, report text, split tag.
struct Sample {
    std::vector<std::uint8_t> pixels;
    std::uint32_t labels = 0;
    std::string report;
    std::uint8_t split = kSplitTrain;

    bool operator==(const Sample&) const = default;
};

struct Dataset {
    std::uint64_t seed = 0;
    std::int64_t image_size = 0;
    std::vector<Sample> samples;

    bool operator==(const Dataset&) const = default;
};

struct SplitSizes {
    std::int64_t train = 0;
    std::int64_t val = 0;
    std::int64_t test = 0;
};

// The 7:1:2 floor rule: (floor(0.7 n), floor(0.1 n), remainder), in exact
// integer arithmetic.
SplitSizes split_sizes(std::int64_t n);

// Generates n paired samples from the corpus seed (per-sample child seeds
// by index), assigns shuffled 7:1:2 splits, and stores quantized pixels.
// Reports depend on the label mask only (report seed derived from the mask),
// so equal label sets give identical reports within a corpus.
// n < 10 is a ContractError.
Dataset generate_corpus(std::int64_t n, std::uint64_t seed, std::int64_t image_size = 64);

// Indices of the samples carrying a given split tag, in dataset order.
std::vector<std::size_t> split_indices(const Dataset& ds, int split);

// Sample's image as a [size, size, 3] tensor of k/255 values.
Tensor sample_image(const Dataset& ds, std::size_t index);

// ---- serialization --------------------------------------------------------

// Directory layout: images.bin (magic "CXR0", version, H, W, count header,
// then count raw H*W*3 byte blocks), reports.jsonl (one record per sample:
// id, text, labels by name, split tag), manifest.json (schema version, seed,
// count, image size, split counts).  load(save(d)) == d bitwise.
// Malformed or truncated input raises FormatError naming found-vs-expected;
// nothing partial is ever returned.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace cxrgen
