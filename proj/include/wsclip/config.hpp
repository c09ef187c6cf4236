#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "wsclip/models.hpp"
#include "wsclip/optim.hpp"

namespace wsclip {

// Canonical `key = value` text configuration. '#' starts a comment, blank
// lines are ignored, keys are dotted paths. Readers track which keys they
// consumed so unknown keys can be rejected explicitly.
class KeyValueConfig {
   public:
    KeyValueConfig() = default;

    static KeyValueConfig parse_string(const std::string& text);
    static KeyValueConfig parse_file(const std::string& path);

    bool has(const std::string& key) const;

    std::string get_string(const std::string& key) const;
    std::string get_string(const std::string& key, const std::string& fallback) const;
    std::int64_t get_int(const std::string& key) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
    double get_double(const std::string& key) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key) const;
    bool get_bool(const std::string& key, bool fallback) const;

    void set(const std::string& key, const std::string& value);
    void set_int(const std::string& key, std::int64_t value);
    void set_double(const std::string& key, double value);
    void set_bool(const std::string& key, bool value);

    std::vector<std::string> keys_with_prefix(const std::string& prefix) const;

    // ConfigError naming every key that was never read.
    void require_all_consumed() const;

    // Sorted canonical serialization; parses back to an equal config.
    std::string to_text() const;

    const std::map<std::string, std::string>& entries() const { return entries_; }

   private:
    std::map<std::string, std::string> entries_;
    mutable std::set<std::string> consumed_;
};

// Compact decimal/scientific formatting used in config dumps and reports:
// 4e-4 stays "4e-4", 0.9 stays "0.9", integers lose the trailing ".0".
std::string format_number(double v);

// Tower / CLIP config serialization under a key prefix ("vision.", ...).
void tower_to_kv(const std::string& prefix, const TowerConfig& cfg, KeyValueConfig& kv);
TowerConfig tower_from_kv(const std::string& prefix, const KeyValueConfig& kv, TowerKind kind);
void clip_to_kv(const ClipConfig& cfg, KeyValueConfig& kv);
ClipConfig clip_from_kv(const KeyValueConfig& kv);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace wsclip
