#include "cxrgen/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "cxrgen/errors.hpp"

namespace cxrgen {

// ---- patch pipeline -------------------------------------------------------

Tensor patchify(const Tensor& image, std::int64_t p) {
    if (image.rank() != 3 || image.dim(2) != 3) {
        throw ShapeError("patchify: image must be [H, W, 3]");
    }
    const std::int64_t h = image.dim(0), w = image.dim(1);
    if (p <= 0 || h % p != 0 || w % p != 0) {
        std::ostringstream os;
        os << "patchify: image " << h << "x" << w << " not divisible by patch size " << p;
        throw ContractError(os.str());
    }
    const std::int64_t hp = h / p, wp = w / p, n = hp * wp, pd = p * p * 3;
    Tensor out = Tensor::zeros({n, pd});
    const double* src = image.data().data();
    double* dst = out.data().data();
    for (std::int64_t pr = 0; pr < hp; ++pr) {
        for (std::int64_t pc = 0; pc < wp; ++pc) {
            double* patch = dst + (pr * wp + pc) * pd;
            for (std::int64_t dy = 0; dy < p; ++dy) {
                const double* row = src + ((pr * p + dy) * w + pc * p) * 3;
                std::copy_n(row, p * 3, patch + dy * p * 3);
            }
        }
    }
    return out;
}

Tensor unpatchify(const Tensor& patches, std::int64_t h, std::int64_t w, std::int64_t p) {
    if (p <= 0 || h % p != 0 || w % p != 0) {
        std::ostringstream os;
        os << "unpatchify: geometry " << h << "x" << w << " not divisible by patch size " << p;
        throw ContractError(os.str());
    }
    const std::int64_t hp = h / p, wp = w / p, n = hp * wp, pd = p * p * 3;
    if (patches.shape() != Shape{n, pd}) {
        throw ShapeError("unpatchify: patches do not match the requested geometry");
    }
    Tensor out = Tensor::zeros({h, w, 3});
    const double* src = patches.data().data();
    double* dst = out.data().data();
    for (std::int64_t pr = 0; pr < hp; ++pr) {
        for (std::int64_t pc = 0; pc < wp; ++pc) {
            const double* patch = src + (pr * wp + pc) * pd;
            for (std::int64_t dy = 0; dy < p; ++dy) {
                double* row = dst + ((pr * p + dy) * w + pc * p) * 3;
                std::copy_n(patch + dy * p * 3, p * 3, row);
            }
        }
    }
    return out;
}

Tensor embed_patches(const Tensor& patches, const Tensor& proj, const Tensor& pos) {
    const std::int64_t n = patches.dim(0);
    if (pos.rank() != 2 || pos.dim(0) < n) {
        throw ContractError("embed_patches: position table shorter than the patch count");
    }
    return add(matmul(patches, proj), slice_rows(pos, 0, n));
}

// ---- vision encoder -------------------------------------------------------

VisionEncoder VisionEncoder::init(const VisionConfig& cfg, Rng& rng) {
    if (cfg.image_size % cfg.patch != 0) {
        throw ContractError("VisionEncoder: image size not divisible by patch size");
    }
    VisionEncoder e;
    e.cfg = cfg;
    e.proj = Tensor::randn({cfg.patch_dim(), cfg.d}, rng,
                           1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())))
                 .set_requires_grad(true);
    e.pos = Tensor::randn({cfg.n_patches(), cfg.d}, rng, 0.02).set_requires_grad(true);
    e.blocks.reserve(static_cast<std::size_t>(cfg.blocks));
    for (std::int64_t k = 0; k < cfg.blocks; ++k) {
        e.blocks.push_back(MambaBlockParams::init(cfg.d, cfg.s, rng));
    }
    e.pool_proj = Tensor::randn({cfg.d, cfg.embed_dim}, rng,
                                1.0 / std::sqrt(static_cast<double>(cfg.d)))
                      .set_requires_grad(true);
    return e;
}

Tensor VisionEncoder::embed(const Tensor& image) {
    return embed_patches(patchify(image, cfg.patch), proj, pos);
}

Tensor VisionEncoder::forward_tokens(const Tensor& tokens, VisionMode mode, GridShape grid) {
    Tensor x = tokens;
    for (MambaBlockParams& b : blocks) {
        if (mode == VisionMode::Causal) {
            x = mamba_block(x, b);
        } else {
            x = mamba_block_directional(
                x, b,
                {ScanDir::RowForward, ScanDir::RowBackward, ScanDir::ColForward,
                 ScanDir::ColBackward},
                grid);
        }
    }
    return x;
}

Tensor VisionEncoder::forward(const Tensor& image, VisionMode mode) {
    const GridShape grid{image.dim(0) / cfg.patch, image.dim(1) / cfg.patch};
    return forward_tokens(embed(image), mode, grid);
}

Tensor VisionEncoder::pooled(const Tensor& tokens_out) {
    Tensor mean = reshape(mean_rows(tokens_out), {1, cfg.d});
    return l2_normalize_rows(matmul(mean, pool_proj));
}

void VisionEncoder::visit(const std::string& prefix,
                          const std::function<void(const std::string&, Tensor&)>& fn) {
    fn(prefix + "proj", proj);
    fn(prefix + "pos", pos);
    for (std::size_t k = 0; k < blocks.size(); ++k) {
        blocks[k].visit(prefix + "block" + std::to_string(k) + ".", fn);
    }
    fn(prefix + "pool_proj", pool_proj);
}

std::vector<Tensor> VisionEncoder::all() {
    std::vector<Tensor> out;
    visit("", [&](const std::string&, Tensor& t) { out.push_back(t); });
    return out;
}

// ---- text normalization and vocabulary ------------------------------------

std::vector<std::string> normalize_tokens(const std::string& text) {
    std::string cleaned;
    cleaned.reserve(text.size() + 8);
    for (char ch : text) {
        const unsigned char u = static_cast<unsigned char>(ch);
        if (ch == '.' || ch == ',' || ch == ':' || ch == ';') {
            cleaned += ' ';
            cleaned += ch;
            cleaned += ' ';
        } else if (std::isspace(u)) {
            cleaned += ' ';
        } else if (std::isalnum(u)) {
            cleaned += static_cast<char>(std::tolower(u));
        }
        // every other character (hyphens, quotes, ...) is dropped in place
    }
    std::vector<std::string> tokens;
    std::istringstream is(cleaned);
    std::string tok;
    while (is >> tok) tokens.push_back(tok);
    return tokens;
}

namespace {
const char* const kReserved[4] = {"<pad>", "<bos>", "<eos>", "<unk>"};
}

Vocab Vocab::build(const std::vector<std::string>& corpus) {
    if (corpus.empty()) throw ContractError("Vocab::build: empty corpus");
    std::map<std::string, std::int64_t> counts;  // ordered map fixes tie order
    for (const std::string& doc : corpus) {
        for (const std::string& tok : normalize_tokens(doc)) ++counts[tok];
    }
    if (counts.empty()) throw ContractError("Vocab::build: corpus has no tokens");
    std::vector<std::pair<std::string, std::int64_t>> entries(counts.begin(), counts.end());
    std::stable_sort(entries.begin(), entries.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    for (const char* r : kReserved) v.id_to_token.push_back(r);
    for (const auto& [tok, cnt] : entries) v.id_to_token.push_back(tok);
    for (std::size_t i = 0; i < v.id_to_token.size(); ++i) {
        v.token_to_id[v.id_to_token[i]] = static_cast<std::int64_t>(i);
    }
    return v;
}

std::int64_t Vocab::id(const std::string& token) const {
    const auto it = token_to_id.find(token);
    return it == token_to_id.end() ? kUnk : it->second;
}

std::vector<std::int64_t> Vocab::encode(const std::string& text, bool add_bos_eos) const {
    std::vector<std::int64_t> ids;
    if (add_bos_eos) ids.push_back(kBos);
    for (const std::string& tok : normalize_tokens(text)) ids.push_back(id(tok));
    if (add_bos_eos) ids.push_back(kEos);
    return ids;
}

std::string Vocab::decode(const std::vector<std::int64_t>& ids) const {
    std::string out;
    for (std::int64_t i : ids) {
        if (i < 0 || i >= size()) {
            throw ContractError("Vocab::decode: id " + std::to_string(i) + " out of range");
        }
        if (i == kPad || i == kBos || i == kEos) continue;
        if (!out.empty()) out += ' ';
        out += id_to_token[static_cast<std::size_t>(i)];
    }
    return out;
}

void Vocab::save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw FormatError("Vocab::save: cannot open " + path);
    for (const std::string& tok : id_to_token) os << tok << '\n';
    if (!os) throw FormatError("Vocab::save: write failed for " + path);
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("Vocab::load: cannot open " + path);
    Vocab v;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) throw FormatError("Vocab::load: blank line in " + path);
        if (v.token_to_id.count(line)) {
            throw FormatError("Vocab::load: duplicate token '" + line + "' in " + path);
        }
        v.token_to_id[line] = static_cast<std::int64_t>(v.id_to_token.size());
        v.id_to_token.push_back(line);
    }
    if (v.id_to_token.size() < 4) throw FormatError("Vocab::load: missing reserved tokens");
    for (int i = 0; i < 4; ++i) {
        if (v.id_to_token[static_cast<std::size_t>(i)] != kReserved[i]) {
            throw FormatError("Vocab::load: reserved token order broken in " + path);
        }
    }
    return v;
}

// ---- text encoder ---------------------------------------------------------

TextEncoder TextEncoder::init(const TextConfig& cfg, std::int64_t vocab_size, Rng& rng) {
    if (vocab_size < 4) throw ContractError("TextEncoder: vocabulary too small");
    TextEncoder e;
    e.cfg = cfg;
    e.vocab_size = vocab_size;
    e.embed = Tensor::randn({vocab_size, cfg.d}, rng, 0.02).set_requires_grad(true);
    e.pos = Tensor::randn({cfg.max_len, cfg.d}, rng, 0.02).set_requires_grad(true);
    e.blocks.reserve(static_cast<std::size_t>(cfg.blocks));
    for (std::int64_t k = 0; k < cfg.blocks; ++k) {
        e.blocks.push_back(MambaBlockParams::init(cfg.d, cfg.s, rng));
    }
    e.pool_proj = Tensor::randn({cfg.d, cfg.embed_dim}, rng,
                                1.0 / std::sqrt(static_cast<double>(cfg.d)))
                      .set_requires_grad(true);
    return e;
}

Tensor TextEncoder::forward_ids(const std::vector<std::int64_t>& ids) {
    const std::int64_t t = static_cast<std::int64_t>(ids.size());
    if (t == 0) throw ContractError("TextEncoder: empty id sequence");
    if (t > cfg.max_len) {
        throw ContractError("TextEncoder: sequence length " + std::to_string(t) +
                            " exceeds max_len " + std::to_string(cfg.max_len));
    }
    for (std::int64_t i : ids) {
        if (i < 0 || i >= vocab_size) throw ContractError("TextEncoder: id out of vocabulary");
    }
    Tensor x = add(gather_rows(embed, ids), slice_rows(pos, 0, t));
    for (MambaBlockParams& b : blocks) {
        x = mamba_block_directional(x, b, {ScanDir::RowForward, ScanDir::RowBackward}, {1, t});
    }
    return x;
}

Tensor TextEncoder::pooled_ids(const std::vector<std::int64_t>& ids) {
    Tensor mean = reshape(mean_rows(forward_ids(ids)), {1, cfg.d});
    return l2_normalize_rows(matmul(mean, pool_proj));
}

void TextEncoder::visit(const std::string& prefix,
                        const std::function<void(const std::string&, Tensor&)>& fn) {
    fn(prefix + "embed", embed);
    fn(prefix + "pos", pos);
    for (std::size_t k = 0; k < blocks.size(); ++k) {
        blocks[k].visit(prefix + "block" + std::to_string(k) + ".", fn);
    }
    fn(prefix + "pool_proj", pool_proj);
}

std::vector<Tensor> TextEncoder::all() {
    std::vector<Tensor> out;
    visit("", [&](const std::string&, Tensor& t) { out.push_back(t); });
    return out;
}

}  // namespace cxrgen
