#include "cxrgen/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "cxrgen/errors.hpp"
#include "json.hpp"

namespace cxrgen {

// ---- findings -------------------------------------------------------------

FindingSet draw_findings(Rng& rng) {
    FindingSet f;
    // Parameters are drawn for every label first, with a fixed number of
    // stream draws, so the presence mask never shifts another label's
    // placement (needed for clean add-one-finding diffs).
    for (auto& p : f.params) {
        p.jx = rng.uniform(-0.02, 0.02);
        p.jy = rng.uniform(-0.02, 0.02);
        p.jr = rng.uniform(-0.01, 0.01);
        p.ji = rng.uniform(-0.05, 0.05);
    }
    const double u = rng.uniform();
    const int count = u < 0.20 ? 0 : u < 0.55 ? 1 : u < 0.80 ? 2 : u < 0.95 ? 3 : 4;
    std::array<int, kNumLabels> order{};
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (int k = 0; k < count; ++k) f.mask |= 1u << order[static_cast<std::size_t>(k)];
    return f;
}

// ---- image synthesis ------------------------------------------------------

namespace {

constexpr double kBackground = 0.08;
constexpr double kLungValue = 0.55;
constexpr double kSpineValue = 0.35;

bool in_ellipse(double xn, double yn, double cx, double cy, double ax, double ay) {
    const double dx = (xn - cx) / ax;
    const double dy = (yn - cy) / ay;
    return dx * dx + dy * dy <= 1.0;
}

double seg_dist(double xn, double yn, double x0, double y0, double x1, double y1) {
    const double vx = x1 - x0;
    const double vy = y1 - y0;
    const double vv = vx * vx + vy * vy;
    double t = vv > 0.0 ? ((xn - x0) * vx + (yn - y0) * vy) / vv : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = xn - (x0 + t * vx);
    const double dy = yn - (y0 + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

// Additive luminance contribution of one pathology signature at a
// normalized image point.  Geometry keeps every signature inside the frame
// for all parameter jitters and large enough to clear the visibility floor
// (>= 1% of pixels changed by > 0.05 at 64x64).
double signature_delta(int label, const FindingParams& p, double xn, double yn) {
    switch (label) {
        case 0:  // widened mediastinal band
            return (xn >= 0.40 + p.jx && xn <= 0.60 + p.jx && yn >= 0.33 + p.jy &&
                    yn <= 0.62 + p.jy)
                       ? 0.30 + p.ji
                       : 0.0;
        case 1:  // enlarged cardiac ellipse, low central
            return in_ellipse(xn, yn, 0.56 + p.jx, 0.66 + p.jy, 0.17 + p.jr, 0.12) ? 0.35 + p.ji
                                                                                   : 0.0;
        case 2:  // hazy blob, upper left lung
            return in_ellipse(xn, yn, 0.30 + p.jx, 0.38 + p.jy, 0.09 + p.jr, 0.09 + p.jr)
                       ? 0.30 + p.ji
                       : 0.0;
        case 3:  // small dense nodule, upper right lung
            return in_ellipse(xn, yn, 0.70 + p.jx, 0.33 + p.jy, 0.065 + 0.5 * p.jr,
                              0.065 + 0.5 * p.jr)
                       ? 0.45 + p.ji
                       : 0.0;
        case 4: {  // faint haze over both lung centers
            const double d = 0.15 + 0.3 * p.ji;
            double s = 0.0;
            if (in_ellipse(xn, yn, 0.30 + p.jx, 0.46 + p.jy, 0.15 + p.jr, 0.15 + p.jr)) s += d;
            if (in_ellipse(xn, yn, 0.70 + p.jx, 0.46 + p.jy, 0.15 + p.jr, 0.15 + p.jr)) s += d;
            return s;
        }
        case 5:  // dense blob, left base
            return in_ellipse(xn, yn, 0.28 + p.jx, 0.60 + p.jy, 0.095 + p.jr, 0.095 + p.jr)
                       ? 0.40 + p.ji
                       : 0.0;
        case 6:  // blob, right mid zone
            return in_ellipse(xn, yn, 0.70 + p.jx, 0.58 + p.jy, 0.10 + p.jr, 0.10 + p.jr)
                       ? 0.28 + p.ji
                       : 0.0;
        case 7:  // horizontal band, left mid lung
            return (xn >= 0.16 + p.jx && xn <= 0.44 + p.jx && std::abs(yn - (0.52 + p.jy)) <= 0.022)
                       ? 0.35 + p.ji
                       : 0.0;
        case 8:  // dark crescent, right apex (air pocket darkens the film)
            return in_ellipse(xn, yn, 0.70 + p.jx, 0.26 + p.jy, 0.07 + p.jr, 0.07 + p.jr)
                       ? -(0.30 + p.ji)
                       : 0.0;
        case 9: {  // basal gradient, brightest at the bottom edge
            const double y0 = 0.68 + p.jy;
            if (yn <= y0) return 0.0;
            return (0.35 + p.ji) * (yn - y0) / (1.0 - y0);
        }
        case 10:  // thin bright stripe along the right lateral margin
            return (xn >= 0.875 + 0.5 * p.jx && xn <= 0.925 + 0.5 * p.jx && yn >= 0.25 + p.jy &&
                    yn <= 0.75 + p.jy)
                       ? 0.30 + p.ji
                       : 0.0;
        case 11:  // short bright oblique segment, left chest wall
            return seg_dist(xn, yn, 0.12 + p.jx, 0.28 + p.jy, 0.30 + p.jx, 0.36 + p.jy) <= 0.025
                       ? 0.50 + p.ji
                       : 0.0;
        case 12: {  // bright polyline descending from the neck (support line)
            const double my = 0.30 + 0.5 * p.jy;
            const double ey = 0.55 + 0.5 * p.jy;
            const double d1 = seg_dist(xn, yn, 0.52 + p.jx, 0.04, 0.50 + p.jx, my);
            const double d2 = seg_dist(xn, yn, 0.50 + p.jx, my, 0.45 + p.jx, ey);
            return std::min(d1, d2) <= 0.016 ? 0.50 + p.ji : 0.0;
        }
        case 13: {  // four thin streaks across the right lung
            if (xn < 0.60 + p.jx || xn > 0.82 + p.jx) return 0.0;
            for (int k = 0; k < 4; ++k) {
                const double yc = 0.34 + 0.07 * k + p.jy;
                if (std::abs(yn - yc) <= 0.010) return 0.22 + 0.5 * p.ji;
            }
            return 0.0;
        }
        default:
            return 0.0;
    }
}

}  // namespace

Tensor synth_image(const FindingSet& findings, std::int64_t size, std::uint64_t noise_seed) {
    if (size < 8) {
        throw ContractError("synth_image: image size must be at least 8, got " +
                            std::to_string(size));
    }
    const std::int64_t n = size * size;
    std::vector<double> lum(static_cast<std::size_t>(n));
    for (std::int64_t y = 0; y < size; ++y) {
        const double yn = (static_cast<double>(y) + 0.5) / static_cast<double>(size);
        for (std::int64_t x = 0; x < size; ++x) {
            const double xn = (static_cast<double>(x) + 0.5) / static_cast<double>(size);
            double v;
            if (in_ellipse(xn, yn, 0.30, 0.46, 0.17, 0.27) ||
                in_ellipse(xn, yn, 0.70, 0.46, 0.17, 0.27)) {
                v = kLungValue;
            } else if (std::abs(xn - 0.50) <= 0.03) {
                v = kSpineValue;
            } else {
                v = kBackground;
            }
            for (int l = 0; l < kNumLabels; ++l) {
                if (findings.has(l)) v += signature_delta(l, findings.params[static_cast<std::size_t>(l)], xn, yn);
            }
            lum[static_cast<std::size_t>(y * size + x)] = v;
        }
    }
    Rng noise(noise_seed);
    Tensor img = Tensor::zeros({size, size, 3});
    std::vector<double>& out = img.data();
    for (std::int64_t i = 0; i < n; ++i) {
        for (int c = 0; c < 3; ++c) {
            double v = lum[static_cast<std::size_t>(i)] + 0.02 * noise.normal();
            v = std::clamp(v, 0.0, 1.0);
            const long k = std::lround(v * 255.0);
            out[static_cast<std::size_t>(i * 3 + c)] = static_cast<double>(k) / 255.0;
        }
    }
    return img;
}

std::vector<std::uint8_t> quantize_image(const Tensor& image) {
    const std::vector<double>& v = image.data();
    std::vector<std::uint8_t> bytes(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double c = std::clamp(v[i], 0.0, 1.0);
        bytes[i] = static_cast<std::uint8_t>(std::lround(c * 255.0));
    }
    return bytes;
}

Tensor image_from_bytes(const std::vector<std::uint8_t>& pixels, std::int64_t size) {
    if (static_cast<std::int64_t>(pixels.size()) != size * size * 3) {
        throw ContractError("image_from_bytes: got " + std::to_string(pixels.size()) +
                            " bytes, expected " + std::to_string(size * size * 3));
    }
    Tensor img = Tensor::zeros({size, size, 3});
    std::vector<double>& out = img.data();
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        out[i] = static_cast<double>(pixels[i]) / 255.0;
    }
    return img;
}

// ---- report synthesis -----------------------------------------------------

namespace {

// Three phrasings per label.  Each sentence is pre-normalized, ends with
// " ." so the extractor's sentence split sees it whole, contains its own
// label's keyword phrases only, and never contains a negation cue.
const std::array<std::array<const char*, 3>, kNumLabels> kPositiveTemplates = {{
    {"the cardiomediastinal silhouette is enlarged with a widened mediastinum .",
     "there is an enlarged cardiomediastinum .",
     "the mediastinal contour shows an enlarged cardiomediastinum ."},
    {"cardiomegaly is present .", "moderate cardiomegaly is again demonstrated .",
     "the cardiac silhouette shows cardiomegaly ."},
    {"there is a patchy lung opacity on the right .", "a focal airspace opacity is demonstrated .",
     "a hazy lung opacity is present ."},
    {"a discrete lung lesion is identified .",
     "there is a rounded pulmonary nodule in the upper zone .",
     "a small lung lesion projects over the periphery ."},
    {"mild interstitial edema is present .", "there is vascular congestion with edema .",
     "diffuse edema is demonstrated ."},
    {"dense consolidation is present in the lower zone .", "there is focal consolidation .",
     "consolidative change is demonstrated ."},
    {"findings are most consistent with pneumonia .", "there is a pneumonia in the right base .",
     "an infectious process is favored ."},
    {"there is adjacent atelectasis .", "bandlike atelectasis is demonstrated at the base .",
     "volume loss is present on the right ."},
    {"a small apical pneumothorax is present .", "there is a pneumothorax on the left .",
     "an apical air collection is identified ."},
    {"a layering pleural effusion is present .", "there is a small pleural effusion .",
     "costophrenic blunting suggests pleural fluid ."},
    {"there is pleural thickening laterally .", "chronic pleural thickening is present .",
     "pleural scarring is demonstrated ."},
    {"an acute rib fracture is identified .", "there is a healed fracture .",
     "a displaced fracture is present ."},
    {"an endotracheal tube is in standard position .", "support devices are in place .",
     "a central catheter terminates in the cavoatrial junction ."},
    {"there is established fibrosis .", "reticular scarring reflects fibrosis .",
     "fibrotic change is demonstrated ."},
}};

const char* kClosingSentence = "the remainder of the examination is unremarkable .";

// Negation phrasings keep the cue within the extractor's 6-token window of
// the keyword.
std::string negation_sentence(int form, const std::string& keyword) {
    switch (form) {
        case 0:
            return "no " + keyword + " is seen .";
        case 1:
            return "the study is without " + keyword + " .";
        default:
            return "negative for " + keyword + " .";
    }
}

}  // namespace

std::string synth_report(std::uint32_t mask, std::uint64_t seed) {
    if (mask >> kNumLabels) {
        throw ContractError("synth_report: mask " + std::to_string(mask) +
                            " has bits beyond the " + std::to_string(kNumLabels) + "-label table");
    }
    const LabelTable& table = LabelTable::builtin();
    Rng rng(seed);
    std::vector<std::string> sentences;
    std::vector<int> absent;
    for (int l = 0; l < kNumLabels; ++l) {
        if ((mask >> l) & 1u) {
            const auto& forms = kPositiveTemplates[static_cast<std::size_t>(l)];
            sentences.emplace_back(forms[static_cast<std::size_t>(rng.below(3))]);
        } else {
            absent.push_back(l);
        }
    }
    rng.shuffle(absent);
    const std::size_t negations = std::min<std::size_t>(2, absent.size());
    for (std::size_t k = 0; k < negations; ++k) {
        const int form = static_cast<int>(rng.below(3));
        sentences.push_back(negation_sentence(form, phrase_text(table.primary(absent[k]))));
    }
    rng.shuffle(sentences);
    std::string out;
    for (const std::string& s : sentences) {
        out += s;
        out += ' ';
    }
    out += kClosingSentence;
    return out;
}

// ---- corpus ---------------------------------------------------------------

namespace {

// Stream tags for the independent child generators derived from the corpus
// seed.
constexpr std::uint64_t kNoiseStream = 0xA11CEull;
constexpr std::uint64_t kReportStream = 0x5EED5ull;
constexpr std::uint64_t kSplitStream = 0x5117ull;

}  // namespace

SplitSizes split_sizes(std::int64_t n) {
    if (n < 0) throw ContractError("split_sizes: negative n " + std::to_string(n));
    SplitSizes s;
    s.train = 7 * n / 10;
    s.val = n / 10;
    s.test = n - s.train - s.val;
    return s;
}

Dataset generate_corpus(std::int64_t n, std::uint64_t seed, std::int64_t image_size) {
    if (n < 10) {
        throw ContractError("generate_corpus: need at least 10 samples, got " + std::to_string(n));
    }
    Dataset ds;
    ds.seed = seed;
    ds.image_size = image_size;
    ds.samples.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        Rng sample_rng(Rng::mix(seed, static_cast<std::uint64_t>(i)));
        const FindingSet f = draw_findings(sample_rng);
        const std::uint64_t noise_seed =
            Rng::mix(Rng::mix(seed, kNoiseStream), static_cast<std::uint64_t>(i));
        const Tensor img = synth_image(f, image_size, noise_seed);
        Sample& s = ds.samples[static_cast<std::size_t>(i)];
        s.pixels = quantize_image(img);
        s.labels = f.mask;
        // The report seed depends on the label set, not the sample index, so
        // equal label sets map to identical text across the corpus.
        s.report = synth_report(f.mask, Rng::mix(Rng::mix(seed, kReportStream), f.mask));
    }
    const SplitSizes sz = split_sizes(n);
    std::vector<std::size_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng split_rng(Rng::mix(seed, kSplitStream));
    split_rng.shuffle(order);
    for (std::int64_t k = 0; k < n; ++k) {
        const std::uint8_t tag = k < sz.train                ? kSplitTrain
                                 : k < sz.train + sz.val     ? kSplitVal
                                                             : kSplitTest;
        ds.samples[order[static_cast<std::size_t>(k)]].split = tag;
    }
    return ds;
}

std::vector<std::size_t> split_indices(const Dataset& ds, int split) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        if (ds.samples[i].split == split) out.push_back(i);
    }
    return out;
}

Tensor sample_image(const Dataset& ds, std::size_t index) {
    if (index >= ds.samples.size()) {
        throw ContractError("sample_image: index " + std::to_string(index) + " out of range " +
                            std::to_string(ds.samples.size()));
    }
    return image_from_bytes(ds.samples[index].pixels, ds.image_size);
}

// ---- serialization --------------------------------------------------------

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

constexpr std::uint32_t kImagesMagic = 0x30525843u;  // file bytes "CXR0"
constexpr std::uint32_t kImagesVersion = 1;
constexpr std::int64_t kManifestVersion = 1;

const std::array<const char*, 3> kSplitNames = {"train", "val", "test"};

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& in, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw FormatError(std::string("images.bin: truncated header while reading ") + what);
    }
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(std::istream& in, const char* what) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) {
        throw FormatError(std::string("images.bin: truncated header while reading ") + what);
    }
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

std::string hex32(std::uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", v);
    return buf;
}

int split_tag_from_name(const std::string& name) {
    for (int t = 0; t < 3; ++t) {
        if (name == kSplitNames[static_cast<std::size_t>(t)]) return t;
    }
    throw FormatError("reports.jsonl: unknown split tag \"" + name + "\"");
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
    fs::create_directories(dir);
    const std::int64_t n = static_cast<std::int64_t>(ds.samples.size());
    const std::int64_t block = ds.image_size * ds.image_size * 3;

    {
        std::ofstream out(dir + "/images.bin", std::ios::binary);
        if (!out) throw FormatError("cannot open for writing: " + dir + "/images.bin");
        put_u32(out, kImagesMagic);
        put_u32(out, kImagesVersion);
        put_u32(out, static_cast<std::uint32_t>(ds.image_size));
        put_u32(out, static_cast<std::uint32_t>(ds.image_size));
        put_u64(out, static_cast<std::uint64_t>(n));
        for (const Sample& s : ds.samples) {
            if (static_cast<std::int64_t>(s.pixels.size()) != block) {
                throw ContractError("save_dataset: sample pixel block has " +
                                    std::to_string(s.pixels.size()) + " bytes, expected " +
                                    std::to_string(block));
            }
            out.write(reinterpret_cast<const char*>(s.pixels.data()),
                      static_cast<std::streamsize>(s.pixels.size()));
        }
        if (!out) throw FormatError("short write to " + dir + "/images.bin");
    }

    const LabelTable& table = LabelTable::builtin();
    {
        std::ofstream out(dir + "/reports.jsonl");
        if (!out) throw FormatError("cannot open for writing: " + dir + "/reports.jsonl");
        for (std::int64_t i = 0; i < n; ++i) {
            const Sample& s = ds.samples[static_cast<std::size_t>(i)];
            ordered_json rec;
            rec["id"] = i;
            rec["text"] = s.report;
            ordered_json labels = ordered_json::array();
            for (int l = 0; l < kNumLabels; ++l) {
                if ((s.labels >> l) & 1u) labels.push_back(table.names[static_cast<std::size_t>(l)]);
            }
            rec["labels"] = labels;
            rec["split"] = kSplitNames[s.split];
            out << rec.dump() << '\n';
        }
        if (!out) throw FormatError("short write to " + dir + "/reports.jsonl");
    }

    {
        const SplitSizes sz = split_sizes(n);
        ordered_json manifest;
        manifest["schema_version"] = kManifestVersion;
        manifest["seed"] = ds.seed;
        manifest["count"] = n;
        manifest["image_size"] = ds.image_size;
        manifest["splits"] = {{"train", sz.train}, {"val", sz.val}, {"test", sz.test}};
        std::ofstream out(dir + "/manifest.json");
        if (!out) throw FormatError("cannot open for writing: " + dir + "/manifest.json");
        out << manifest.dump(2) << '\n';
        if (!out) throw FormatError("short write to " + dir + "/manifest.json");
    }
}

Dataset load_dataset(const std::string& dir) {
    Dataset ds;

    ordered_json manifest;
    {
        std::ifstream in(dir + "/manifest.json");
        if (!in) throw FormatError("cannot open " + dir + "/manifest.json");
        try {
            manifest = ordered_json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("manifest.json: " + std::string(e.what()));
        }
    }
    std::int64_t count = 0;
    try {
        const std::int64_t version = manifest.at("schema_version").get<std::int64_t>();
        if (version != kManifestVersion) {
            throw FormatError("manifest.json: schema version mismatch: found " +
                              std::to_string(version) + " expected " +
                              std::to_string(kManifestVersion));
        }
        ds.seed = manifest.at("seed").get<std::uint64_t>();
        count = manifest.at("count").get<std::int64_t>();
        ds.image_size = manifest.at("image_size").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest.json: " + std::string(e.what()));
    }
    if (count < 0 || ds.image_size <= 0) {
        throw FormatError("manifest.json: invalid count " + std::to_string(count) +
                          " or image size " + std::to_string(ds.image_size));
    }

    const std::int64_t block = ds.image_size * ds.image_size * 3;
    ds.samples.resize(static_cast<std::size_t>(count));
    {
        std::ifstream in(dir + "/images.bin", std::ios::binary);
        if (!in) throw FormatError("cannot open " + dir + "/images.bin");
        const std::uint32_t magic = get_u32(in, "magic");
        if (magic != kImagesMagic) {
            throw FormatError("images.bin: magic mismatch: found " + hex32(magic) + " expected " +
                              hex32(kImagesMagic));
        }
        const std::uint32_t version = get_u32(in, "version");
        if (version != kImagesVersion) {
            throw FormatError("images.bin: version mismatch: found " + std::to_string(version) +
                              " expected " + std::to_string(kImagesVersion));
        }
        const std::uint32_t h = get_u32(in, "height");
        const std::uint32_t w = get_u32(in, "width");
        if (h != ds.image_size || w != ds.image_size) {
            throw FormatError("images.bin: image size mismatch: found " + std::to_string(h) + "x" +
                              std::to_string(w) + " expected " + std::to_string(ds.image_size) +
                              "x" + std::to_string(ds.image_size));
        }
        const std::uint64_t stored = get_u64(in, "count");
        if (stored != static_cast<std::uint64_t>(count)) {
            throw FormatError("images.bin: sample count mismatch: found " + std::to_string(stored) +
                              " expected " + std::to_string(count));
        }
        for (std::int64_t i = 0; i < count; ++i) {
            Sample& s = ds.samples[static_cast<std::size_t>(i)];
            s.pixels.resize(static_cast<std::size_t>(block));
            in.read(reinterpret_cast<char*>(s.pixels.data()), static_cast<std::streamsize>(block));
            if (in.gcount() != block) {
                throw FormatError("images.bin: truncated: sample " + std::to_string(i) + " has " +
                                  std::to_string(in.gcount()) + " of " + std::to_string(block) +
                                  " pixel bytes");
            }
        }
        if (in.peek() != std::char_traits<char>::eof()) {
            throw FormatError("images.bin: trailing data after " + std::to_string(count) +
                              " samples");
        }
    }

    const LabelTable& table = LabelTable::builtin();
    {
        std::ifstream in(dir + "/reports.jsonl");
        if (!in) throw FormatError("cannot open " + dir + "/reports.jsonl");
        std::string line;
        std::int64_t i = 0;
        while (std::getline(in, line)) {
            if (line.empty() && in.peek() == std::char_traits<char>::eof()) break;
            if (i >= count) {
                throw FormatError("reports.jsonl: more than " + std::to_string(count) + " records");
            }
            ordered_json rec;
            try {
                rec = ordered_json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw FormatError("reports.jsonl line " + std::to_string(i) + ": " +
                                  std::string(e.what()));
            }
            Sample& s = ds.samples[static_cast<std::size_t>(i)];
            try {
                const std::int64_t id = rec.at("id").get<std::int64_t>();
                if (id != i) {
                    throw FormatError("reports.jsonl line " + std::to_string(i) +
                                      ": id mismatch: found " + std::to_string(id) + " expected " +
                                      std::to_string(i));
                }
                s.report = rec.at("text").get<std::string>();
                s.labels = 0;
                for (const auto& name : rec.at("labels")) {
                    const std::string label_name = name.get<std::string>();
                    int found = -1;
                    for (int l = 0; l < kNumLabels; ++l) {
                        if (table.names[static_cast<std::size_t>(l)] == label_name) {
                            found = l;
                            break;
                        }
                    }
                    if (found < 0) {
                        throw FormatError("reports.jsonl line " + std::to_string(i) +
                                          ": unknown label \"" + label_name + "\"");
                    }
                    s.labels |= 1u << found;
                }
                s.split = static_cast<std::uint8_t>(
                    split_tag_from_name(rec.at("split").get<std::string>()));
            } catch (const nlohmann::json::exception& e) {
                throw FormatError("reports.jsonl line " + std::to_string(i) + ": " +
                                  std::string(e.what()));
            }
            ++i;
        }
        if (i != count) {
            throw FormatError("reports.jsonl: found " + std::to_string(i) + " records, expected " +
                              std::to_string(count));
        }
    }

    return ds;
}

}  // namespace cxrgen
