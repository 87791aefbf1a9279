#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

#include "cvgl/trainer.hpp"

namespace cvgl {

// Flat key=value text; '#' starts a comment line.
class KeyValues {
public:
    static KeyValues parse(std::istream& is, const std::string& source = "<stream>");
    static KeyValues load(const std::filesystem::path& path);

    void set(const std::string& key, const std::string& value) { entries_[key] = value; }
    // Accepts "key=value".
    void set_assignment(const std::string& assignment);
    bool has(const std::string& key) const { return entries_.contains(key); }
    const std::string& get(const std::string& key) const;
    const std::map<std::string, std::string>& entries() const noexcept { return entries_; }
    void merge(const KeyValues& overrides);
    void write(std::ostream& os) const;

private:
    std::map<std::string, std::string> entries_;
};

// Applies recognised keys on top of `base`; unknown keys are a UsageError.
TrainConfig train_config_from(const KeyValues& kv, TrainConfig base = {});
KeyValues to_key_values(const TrainConfig& cfg);

} // namespace cvgl
