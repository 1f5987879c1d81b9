#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "cxrgen/ssm.hpp"
#include "cxrgen/tensor.hpp"

namespace cxrgen {

// ---- patch pipeline -------------------------------------------------------

// [H, W, 3] image -> [N, P*P*3] patches in raster order, each patch flattened
// row-major with the channel innermost.  Pure data movement (not recorded on
// the tape); ContractError when H or W is not divisible by p.
Tensor patchify(const Tensor& image, std::int64_t p);

// Exact inverse of patchify for the given geometry.
Tensor unpatchify(const Tensor& patches, std::int64_t h, std::int64_t w, std::int64_t p);

// tokens = patches * proj + pos[:N]; proj [P*P*3, D], pos [N_max, D] with
// N <= N_max (smaller images use the position-table prefix).
Tensor embed_patches(const Tensor& patches, const Tensor& proj, const Tensor& pos);

// ---- vision encoder -------------------------------------------------------

enum class VisionMode { Causal, MultiDir };

struct VisionConfig {
    std::int64_t image_size = 64;  // square input, side length in pixels
    std::int64_t patch = 8;
    std::int64_t d = 128;       // token width
    std::int64_t s = 16;        // SSM state size per channel
    std::int64_t blocks = 4;
    std::int64_t embed_dim = 64;  // pooled projection width (shared with text)

    std::int64_t patch_dim() const { return patch * patch * 3; }
    std::int64_t side_patches() const { return image_size / patch; }
    std::int64_t n_patches() const { return side_patches() * side_patches(); }
};

// Patch embedding, a stack of Mamba blocks (single-direction in Causal mode,
// all four traversal directions in MultiDir mode), and a pooled projection
// head used for contrastive alignment.  The block parameters are shared
// between the two modes, so causal pre-training weights load unchanged into
// the multi-directional encoder.
struct VisionEncoder {
    VisionConfig cfg;
    Tensor proj;  // [P*P*3, D]
    Tensor pos;   // [N_max, D] learned absolute positions
    std::vector<MambaBlockParams> blocks;
    Tensor pool_proj;  // [D, E]

    static VisionEncoder init(const VisionConfig& cfg, Rng& rng);

    // Patchify + linear embed + positions; [N, D].  ContractError when the
    // image yields more patches than the position table holds.
    Tensor embed(const Tensor& image);

    // Full stack on an [H, W, 3] image; [N, D] output tokens.
    Tensor forward(const Tensor& image, VisionMode mode);

    // Block stack on pre-embedded tokens laid out on the given grid.
    Tensor forward_tokens(const Tensor& tokens, VisionMode mode, GridShape grid);

    // Mean over tokens -> linear projection -> unit L2 norm; [1, E].
    Tensor pooled(const Tensor& tokens_out);

    void visit(const std::string& prefix,
               const std::function<void(const std::string&, Tensor&)>& fn);
    std::vector<Tensor> all();
};

// ---- text side ------------------------------------------------------------

// Lowercase; ". , : ;" become standalone tokens; every other punctuation
// character is deleted in place (so hyphenated words fuse); split on blanks.
std::vector<std::string> normalize_tokens(const std::string& text);

struct Vocab {
    static constexpr std::int64_t kPad = 0, kBos = 1, kEos = 2, kUnk = 3;

    std::vector<std::string> id_to_token;  // reserved entries occupy ids 0..3
    std::unordered_map<std::string, std::int64_t> token_to_id;

    // All normalized tokens of the corpus, ordered by frequency (desc) then
    // lexicographically, after the four reserved entries.  ContractError on an
    // empty or token-free corpus.
    static Vocab build(const std::vector<std::string>& corpus);

    std::int64_t size() const { return static_cast<std::int64_t>(id_to_token.size()); }
    std::int64_t id(const std::string& token) const;  // kUnk when absent

    // Normalize then map; optionally wrap as [bos, ..., eos].
    std::vector<std::int64_t> encode(const std::string& text, bool add_bos_eos) const;

    // Tokens joined by single spaces; pad/bos/eos are skipped, unk renders
    // as its reserved string.  ContractError on an out-of-range id.
    std::string decode(const std::vector<std::int64_t>& ids) const;

    // One token per line, id order (reserved entries first).
    void save(const std::string& path) const;
    static Vocab load(const std::string& path);  // FormatError on malformed files
};

struct TextConfig {
    std::int64_t d = 128;
    std::int64_t s = 16;
    std::int64_t blocks = 2;
    std::int64_t embed_dim = 64;
    std::int64_t max_len = 160;  // longest encodable id sequence
};

// Token + position embedding into a short stack of bidirectional blocks
// (forward and reversed scans averaged), mean-pooled and projected to the
// shared contrastive space.
struct TextEncoder {
    TextConfig cfg;
    std::int64_t vocab_size = 0;
    Tensor embed;  // [V, D]
    Tensor pos;    // [max_len, D]
    std::vector<MambaBlockParams> blocks;
    Tensor pool_proj;  // [D, E]

    static TextEncoder init(const TextConfig& cfg, std::int64_t vocab_size, Rng& rng);

    Tensor forward_ids(const std::vector<std::int64_t>& ids);  // [T, D]
    Tensor pooled_ids(const std::vector<std::int64_t>& ids);   // [1, E], unit norm

    void visit(const std::string& prefix,
               const std::function<void(const std::string&, Tensor&)>& fn);
    std::vector<Tensor> all();
};

}  // namespace cxrgen
