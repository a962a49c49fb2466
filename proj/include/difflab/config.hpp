#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "difflab/types.hpp"

namespace difflab {

// Flat key = value run configuration. '#' starts a comment, later assignments
// win. Every getter records the resolved value (supplied or default) so the
// full effective config can be embedded in reports.
class RunConfig {
public:
    RunConfig() = default;

    static RunConfig from_text(const std::string& text);
    static RunConfig from_file(const std::string& path);

    void set(const std::string& key, const std::string& value);
    void merge(const RunConfig& overrides);

    bool has(const std::string& key) const;

    std::string get_string(const std::string& key, const std::string& def);
    int64_t get_int(const std::string& key, int64_t def);
    Real get_real(const std::string& key, Real def);
    bool get_bool(const std::string& key, bool def);
    uint64_t get_seed(const std::string& key, uint64_t def);

    std::string require_string(const std::string& key);

    // Enumerated string value; throws listing the allowed set.
    std::string get_choice(const std::string& key, const std::string& def,
                           const std::vector<std::string>& allowed);

    // Throws if any supplied key was never consumed by a getter, naming it.
    void ensure_all_consumed() const;

    // Resolved key/value pairs in first-access order.
    const std::vector<std::pair<std::string, std::string>>& resolved() const {
        return resolved_;
    }
    std::string resolved_text() const;

private:
    std::optional<std::string> lookup(const std::string& key);
    void record(const std::string& key, const std::string& value);

    std::map<std::string, std::string> values_;
    std::map<std::string, bool> consumed_;
    std::vector<std::pair<std::string, std::string>> resolved_;
};

} // namespace difflab
