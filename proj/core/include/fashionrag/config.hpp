#pragma once

#include <map>
#include <string>
#include <vector>

namespace fashionrag {

// Flat key=value configuration. Resolution order for every key:
// built-in profile default < config file < command-line override.
class Config {
public:
    static Config profile_defaults(const std::string& profile);  // "desk" or "full"
    static Config load_file(const std::string& path);            // '#' comments, blank lines ok
    static Config from_string(const std::string& text);          // same syntax as a file

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    void merge_from(const Config& other);  // other wins

    bool has(const std::string& key) const { return kv_.count(key) != 0; }
    std::string str(const std::string& key) const;
    std::string str_or(const std::string& key, const std::string& fallback) const;
    int64_t integer(const std::string& key) const;
    double real(const std::string& key) const;
    bool boolean(const std::string& key) const;

    std::string dump() const;  // sorted key=value lines
    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

// Profile name resolution: explicit argument > FASHIONRAG_PROFILE env > "desk".
std::string resolve_profile(const std::string& explicit_profile);

}  // namespace fashionrag
