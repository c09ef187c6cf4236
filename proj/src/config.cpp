#include "wsclip/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "wsclip/errors.hpp"

namespace wsclip {

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

KeyValueConfig KeyValueConfig::parse_string(const std::string& text) {
    KeyValueConfig kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        if (kv.entries_.count(key))
            throw ConfigError("config: duplicate key '" + key + "'");
        kv.entries_[key] = value;
    }
    return kv;
}

KeyValueConfig KeyValueConfig::parse_file(const std::string& path) {
    return parse_string(read_text_file(path));
}

bool KeyValueConfig::has(const std::string& key) const { return entries_.count(key) != 0; }

std::string KeyValueConfig::get_string(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw ConfigError("config: missing required key '" + key + "'");
    consumed_.insert(key);
    return it->second;
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
    consumed_.insert(key);
    auto it = entries_.find(key);
    return it == entries_.end() ? fallback : it->second;
}

std::int64_t KeyValueConfig::get_int(const std::string& key) const {
    const std::string v = get_string(key);
    try {
        size_t used = 0;
        const std::int64_t out = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' is not an integer: '" + v + "'");
    }
}

std::int64_t KeyValueConfig::get_int(const std::string& key, std::int64_t fallback) const {
    consumed_.insert(key);
    return has(key) ? get_int(key) : fallback;
}

double KeyValueConfig::get_double(const std::string& key) const {
    const std::string v = get_string(key);
    try {
        size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' is not a number: '" + v + "'");
    }
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
    consumed_.insert(key);
    return has(key) ? get_double(key) : fallback;
}

bool KeyValueConfig::get_bool(const std::string& key) const {
    const std::string v = get_string(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config: key '" + key + "' is not a boolean: '" + v + "'");
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
    consumed_.insert(key);
    return has(key) ? get_bool(key) : fallback;
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
    entries_[key] = value;
}

void KeyValueConfig::set_int(const std::string& key, std::int64_t value) {
    entries_[key] = std::to_string(value);
}

void KeyValueConfig::set_double(const std::string& key, double value) {
    entries_[key] = format_number(value);
}

void KeyValueConfig::set_bool(const std::string& key, bool value) {
    entries_[key] = value ? "true" : "false";
}

std::vector<std::string> KeyValueConfig::keys_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (auto it = entries_.lower_bound(prefix); it != entries_.end(); ++it) {
        if (it->first.compare(0, prefix.size(), prefix) != 0) break;
        out.push_back(it->first);
    }
    return out;
}

void KeyValueConfig::require_all_consumed() const {
    std::string unknown;
    for (const auto& [key, value] : entries_)
        if (!consumed_.count(key)) unknown += (unknown.empty() ? "" : ", ") + key;
    if (!unknown.empty()) throw ConfigError("config: unknown keys: " + unknown);
}

std::string KeyValueConfig::to_text() const {
    std::string out;
    for (const auto& [key, value] : entries_) out += key + " = " + value + "\n";
    return out;
}

std::string format_number(double v) {
    if (v == 0.0) return "0";
    const double av = std::abs(v);
    if (std::floor(v) == v && av < 1e15 && av >= 1.0) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.0f", v);
        return buf;
    }
    char buf[64];
    if (av < 1e-3 || av >= 1e15) {
        // scientific with a trimmed mantissa and bare exponent: 4e-4
        std::snprintf(buf, sizeof(buf), "%.12e", v);
        std::string s = buf;
        const size_t e = s.find('e');
        std::string mantissa = s.substr(0, e);
        const int exponent = std::stoi(s.substr(e + 1));
        while (!mantissa.empty() && mantissa.back() == '0') mantissa.pop_back();
        if (!mantissa.empty() && mantissa.back() == '.') mantissa.pop_back();
        return mantissa + "e" + std::to_string(exponent);
    }
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

void tower_to_kv(const std::string& prefix, const TowerConfig& cfg, KeyValueConfig& kv) {
    kv.set(prefix + "kind", to_string(cfg.kind));
    kv.set_int(prefix + "layers", cfg.layers);
    kv.set_int(prefix + "width", cfg.width);
    kv.set_int(prefix + "heads", cfg.heads);
    kv.set_int(prefix + "mlp_ratio", cfg.mlp_ratio);
    kv.set(prefix + "norm", to_string(cfg.norm_kind));
    kv.set_bool(prefix + "qkv_bias", cfg.qkv_bias);
    kv.set_int(prefix + "projection_dim", cfg.projection_dim);
    if (cfg.kind == TowerKind::vision) {
        kv.set_int(prefix + "patch_size", cfg.patch_size);
        kv.set_int(prefix + "resolution", cfg.input_resolution);
    } else {
        kv.set_int(prefix + "vocab_size", cfg.vocab_size);
        kv.set_int(prefix + "context_length", cfg.context_length);
    }
}

TowerConfig tower_from_kv(const std::string& prefix, const KeyValueConfig& kv, TowerKind kind) {
    TowerConfig cfg;
    cfg.kind = kind;
    const std::string stated = kv.get_string(prefix + "kind", to_string(kind));
    if (stated != to_string(kind))
        throw ConfigError("config: " + prefix + "kind is '" + stated + "', expected '" +
                          to_string(kind) + "'");
    cfg.layers = kv.get_int(prefix + "layers");
    cfg.width = kv.get_int(prefix + "width");
    cfg.heads = kv.get_int(prefix + "heads");
    cfg.mlp_ratio = kv.get_int(prefix + "mlp_ratio", 4);
    cfg.norm_kind = norm_kind_from_string(
        kv.get_string(prefix + "norm", kind == TowerKind::vision ? "rms" : "layer"));
    cfg.qkv_bias = kv.get_bool(prefix + "qkv_bias", true);
    cfg.projection_dim = kv.get_int(prefix + "projection_dim");
    if (kind == TowerKind::vision) {
        cfg.patch_size = kv.get_int(prefix + "patch_size");
        cfg.input_resolution = kv.get_int(prefix + "resolution");
    } else {
        cfg.vocab_size = kv.get_int(prefix + "vocab_size");
        cfg.context_length = kv.get_int(prefix + "context_length");
    }
    cfg.validate();
    return cfg;
}

void clip_to_kv(const ClipConfig& cfg, KeyValueConfig& kv) {
    tower_to_kv("vision.", cfg.vision, kv);
    tower_to_kv("text.", cfg.text, kv);
    kv.set_double("temperature", cfg.temperature);
    kv.set_bool("temperature_learnable", cfg.temperature_learnable);
}

ClipConfig clip_from_kv(const KeyValueConfig& kv) {
    ClipConfig cfg;
    cfg.vision = tower_from_kv("vision.", kv, TowerKind::vision);
    cfg.text = tower_from_kv("text.", kv, TowerKind::text);
    cfg.temperature = kv.get_double("temperature", 0.01);
    cfg.temperature_learnable = kv.get_bool("temperature_learnable", false);
    cfg.validate();
    return cfg;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw InputError("failed writing '" + path + "'");
}

}  // namespace wsclip
