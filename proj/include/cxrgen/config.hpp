#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace cxrgen {

enum class ConfigType { Int, Float, Bool, Text };

struct ConfigKey {
    const char* name;
    ConfigType type;
    const char* default_value;
    const char* help;
};

// Flat key=value run configuration.  Every key is declared up front with a
// desk-scale default; values are validated and canonicalized when set, so the
// fingerprint is independent of how a value was spelled.  Precedence is
// command line > config file > environment > defaults: the constructor bakes
// in defaults (plus the CXRGEN_OUT_ROOT environment override for out_root),
// then load_file() and set() layer on top in call order.
class RunConfig {
  public:
    RunConfig();

    static const std::vector<ConfigKey>& known();

    // UsageError on an unknown key or a value that does not parse as the
    // key's declared type.
    void set(const std::string& key, const std::string& value);

    // Lines of "key = value"; '#' starts a comment; blank lines are skipped.
    // FormatError on a line without '='; UsageError via set() for bad keys.
    void load_file(const std::string& path);

    std::int64_t geti(const std::string& key) const;
    double getf(const std::string& key) const;
    bool getb(const std::string& key) const;
    const std::string& gets(const std::string& key) const;

    // All keys in sorted order as "key=value\n" (a full human-readable dump).
    std::string canonical_text() const;

    // Hash over the model- and training-relevant keys only: artifact paths
    // and run selectors (out_root, data.dir, ckpt.*, gen.*, eval.out,
    // bench.*, threads) are excluded, so the chained stages of one training
    // run agree on the fingerprint stamped into their checkpoints.
    std::uint64_t fingerprint() const;

  private:
    const std::string& raw(const std::string& key) const;

    std::map<std::string, std::string> values_;
};

}  // namespace cxrgen
