#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rsed/anchors.hpp"
#include "rsed/event.hpp"
#include "rsed/events.hpp"
#include "rsed/features.hpp"
#include "rsed/model.hpp"
#include "rsed/objective.hpp"
#include "rsed/refiner.hpp"

namespace rsed {

/// Flat key=value configuration with layered overrides:
/// defaults < preset file < config file < environment (RSED_*) < explicit sets.
class KvConfig {
public:
    void load_file(const std::filesystem::path& path);
    /// Environment keys map as RSED_TRAIN__BATCH_SIZE -> train.batch_size
    /// (double underscore separates path segments).
    void apply_environment(const char* prefix = "RSED_");
    void set(const std::string& key, const std::string& value);

    bool has(const std::string& key) const { return kv_.count(key) > 0; }
    std::string get_string(const std::string& key, const std::string& fallback) const;
    int get_int(const std::string& key, int fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    std::string serialize() const; // canonical sorted key=value lines
    std::uint64_t hash() const;
    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

struct TrainConfig {
    double lr_node = 1e-3;
    double lr_interval = 1e-3;
    double node_decay = 0.99;
    int node_decay_steps = 126;
    double interval_lr_min = 2e-4;
    int t_max = 0; // 0 -> epochs * steps_per_epoch, resolved at startup
    int epochs = 10;
    int batch_size = 4;
    std::uint64_t seed = 17;
    double grad_clip = 5.0;
    bool augment = false;
    double augment_prob = 0.5; // per clip
    int validate_every = 1;    // epochs
};

/// Everything a run needs, decoded from the layered key/value store.
struct PipelineConfig {
    FeatureConfig features;
    AnchorConfig anchors;
    ModelConfig model;
    RefinerConfig refiner;
    ObjectiveConfig objective;
    DecodeConfig decode;
    TrainConfig train;
    ClassVocabulary vocab = ClassVocabulary::default_respiratory();
    bool use_meta = false;

    static PipelineConfig from_kv(const KvConfig& kv);
    /// Hash over the architecture-determining fields (checkpoint compatibility).
    std::uint64_t architecture_hash() const;
};

} // namespace rsed
