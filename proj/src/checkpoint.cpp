#include "cxrgen/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cxrgen/errors.hpp"

namespace cxrgen {

namespace {

constexpr std::uint32_t kMagic = 0x30504B43;  // bytes "CKP0"
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof bits);
    put_u64(out, bits);
}

// Bounds-checked little-endian reader over an in-memory file image.
struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > buf.size()) {
            throw FormatError(std::string("checkpoint truncated while reading ") + what);
        }
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        }
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        }
        pos += 8;
        return v;
    }
    double f64(const char* what) {
        const std::uint64_t bits = u64(what);
        double d;
        std::memcpy(&d, &bits, sizeof d);
        return d;
    }
    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) return &t;
    }
    return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::string body;
    put_u32(body, kMagic);
    put_u32(body, kVersion);
    put_u64(body, ck.config_hash);
    put_u64(body, static_cast<std::uint64_t>(ck.step));
    put_u64(body, static_cast<std::uint64_t>(ck.tensors.size()));
    for (const auto& [name, t] : ck.tensors) {
        put_u32(body, static_cast<std::uint32_t>(name.size()));
        body.append(name);
        put_u32(body, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t a = 0; a < t.rank(); ++a) {
            put_u64(body, static_cast<std::uint64_t>(t.dim(a)));
        }
        for (double v : t.data()) put_f64(body, v);
    }
    put_u64(body, fnv1a64(body.data(), body.size()));

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("checkpoint save: cannot open " + tmp);
        out.write(body.data(), static_cast<std::streamsize>(body.size()));
        if (!out) throw FormatError("checkpoint save: short write to " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw FormatError("checkpoint save: cannot rename " + tmp + " to " + path);
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("checkpoint load: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string buf = ss.str();

    if (buf.size() < 8) throw FormatError("checkpoint truncated while reading checksum");
    const std::uint64_t stored = [&] {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[buf.size() - 8 + i]))
                 << (8 * i);
        }
        return v;
    }();
    const std::uint64_t actual = fnv1a64(buf.data(), buf.size() - 8);
    if (stored != actual) {
        std::ostringstream msg;
        msg << "checkpoint checksum mismatch in " << path << ": stored " << std::hex << stored
            << ", computed " << actual;
        throw FormatError(msg.str());
    }

    Reader r{buf};
    const std::uint32_t magic = r.u32("magic");
    if (magic != kMagic) {
        std::ostringstream msg;
        msg << "checkpoint magic mismatch: found 0x" << std::hex << magic << ", expected 0x"
            << kMagic;
        throw FormatError(msg.str());
    }
    const std::uint32_t version = r.u32("version");
    if (version != kVersion) {
        std::ostringstream msg;
        msg << "checkpoint version mismatch: found " << version << ", expected " << kVersion;
        throw FormatError(msg.str());
    }

    Checkpoint ck;
    ck.config_hash = r.u64("config hash");
    ck.step = static_cast<std::int64_t>(r.u64("step"));
    const std::uint64_t count = r.u64("tensor count");
    ck.tensors.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.u32("tensor name length");
        const std::string name = r.bytes(name_len, "tensor name");
        const std::uint32_t rank = r.u32("tensor rank");
        Shape shape;
        std::int64_t numel = 1;
        for (std::uint32_t a = 0; a < rank; ++a) {
            const std::int64_t d = static_cast<std::int64_t>(r.u64("tensor dimension"));
            shape.push_back(d);
            numel *= d;
        }
        std::vector<double> values(static_cast<std::size_t>(numel));
        for (std::int64_t k = 0; k < numel; ++k) {
            values[static_cast<std::size_t>(k)] = r.f64("tensor payload");
        }
        ck.tensors.emplace_back(name, Tensor::from(shape, std::move(values)));
    }
    if (r.pos != buf.size() - 8) {
        throw FormatError("checkpoint has trailing bytes after the last tensor");
    }
    return ck;
}

std::string load_into(const Checkpoint& ck, std::uint64_t expected_config_hash,
                      std::vector<std::pair<std::string, Tensor>>& dst) {
    // Validate everything before touching any destination: a failed load must
    // leave the model untouched.
    std::vector<const Tensor*> sources;
    sources.reserve(dst.size());
    for (const auto& [name, t] : dst) {
        const Tensor* src = ck.find(name);
        if (src == nullptr) {
            throw LoadError("checkpoint is missing tensor \"" + name + "\"");
        }
        if (src->shape() != t.shape()) {
            throw LoadError("checkpoint tensor \"" + name + "\" has shape " +
                            shape_str(src->shape()) + " but the model expects " +
                            shape_str(t.shape()));
        }
        sources.push_back(src);
    }
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i].second.data() = sources[i]->data();
    }
    if (ck.config_hash != expected_config_hash) {
        std::ostringstream msg;
        msg << "warning: checkpoint config hash " << std::hex << ck.config_hash
            << " differs from the current configuration hash " << expected_config_hash;
        return msg.str();
    }
    return std::string();
}

}  // namespace cxrgen
