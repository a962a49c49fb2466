#include "difflab/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace difflab {

namespace {

std::string trim(const std::string& s) {
    size_t b = 0;
    size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

} // namespace

RunConfig RunConfig::from_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected key = value, got '" + line + "'");
        }
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
        }
        cfg.set(key, value);
    }
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_text(buf.str());
}

void RunConfig::set(const std::string& key, const std::string& value) {
    values_[key] = value;
    consumed_[key] = false;
}

void RunConfig::merge(const RunConfig& overrides) {
    for (const auto& [k, v] : overrides.values_) set(k, v);
}

bool RunConfig::has(const std::string& key) const { return values_.count(key) > 0; }

std::optional<std::string> RunConfig::lookup(const std::string& key) {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    consumed_[key] = true;
    return it->second;
}

void RunConfig::record(const std::string& key, const std::string& value) {
    for (auto& kv : resolved_) {
        if (kv.first == key) {
            kv.second = value;
            return;
        }
    }
    resolved_.emplace_back(key, value);
}

std::string RunConfig::get_string(const std::string& key, const std::string& def) {
    auto v = lookup(key);
    std::string out = v ? *v : def;
    record(key, out);
    return out;
}

int64_t RunConfig::get_int(const std::string& key, int64_t def) {
    auto v = lookup(key);
    if (!v) {
        record(key, std::to_string(def));
        return def;
    }
    int64_t out = 0;
    auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || ptr != v->data() + v->size()) {
        throw std::invalid_argument("config key '" + key + "': expected integer, got '" + *v + "'");
    }
    record(key, std::to_string(out));
    return out;
}

Real RunConfig::get_real(const std::string& key, Real def) {
    auto v = lookup(key);
    if (!v) {
        record(key, std::to_string(def));
        return def;
    }
    char* end = nullptr;
    Real out = std::strtod(v->c_str(), &end);
    if (end != v->c_str() + v->size() || v->empty()) {
        throw std::invalid_argument("config key '" + key + "': expected number, got '" + *v + "'");
    }
    record(key, *v);
    return out;
}

bool RunConfig::get_bool(const std::string& key, bool def) {
    auto v = lookup(key);
    if (!v) {
        record(key, def ? "true" : "false");
        return def;
    }
    std::string s = *v;
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    bool out;
    if (s == "true" || s == "1" || s == "on" || s == "yes") {
        out = true;
    } else if (s == "false" || s == "0" || s == "off" || s == "no") {
        out = false;
    } else {
        throw std::invalid_argument("config key '" + key + "': expected boolean, got '" + *v + "'");
    }
    record(key, out ? "true" : "false");
    return out;
}

uint64_t RunConfig::get_seed(const std::string& key, uint64_t def) {
    auto v = lookup(key);
    if (!v) {
        record(key, std::to_string(def));
        return def;
    }
    uint64_t out = 0;
    auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || ptr != v->data() + v->size()) {
        throw std::invalid_argument("config key '" + key + "': expected unsigned integer, got '" + *v + "'");
    }
    record(key, std::to_string(out));
    return out;
}

std::string RunConfig::require_string(const std::string& key) {
    auto v = lookup(key);
    if (!v || v->empty()) {
        throw std::invalid_argument("config key '" + key + "' is required");
    }
    record(key, *v);
    return *v;
}

std::string RunConfig::get_choice(const std::string& key, const std::string& def,
                                  const std::vector<std::string>& allowed) {
    std::string v = get_string(key, def);
    if (std::find(allowed.begin(), allowed.end(), v) == allowed.end()) {
        std::string msg = "config key '" + key + "': '" + v + "' is not one of {";
        for (size_t i = 0; i < allowed.size(); ++i) {
            if (i) msg += ", ";
            msg += allowed[i];
        }
        msg += "}";
        throw std::invalid_argument(msg);
    }
    return v;
}

void RunConfig::ensure_all_consumed() const {
    for (const auto& [k, used] : consumed_) {
        if (!used) throw std::invalid_argument("unknown config key '" + k + "'");
    }
}

std::string RunConfig::resolved_text() const {
    std::string out;
    for (const auto& [k, v] : resolved_) {
        out += k;
        out += " = ";
        out += v;
        out += "\n";
    }
    return out;
}

} // namespace difflab
