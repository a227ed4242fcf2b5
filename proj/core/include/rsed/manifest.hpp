#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rsed/event.hpp"

namespace rsed {

struct ManifestRecord {
    std::string clip_id;
    std::filesystem::path audio;
    int sample_rate = 0;
    double duration_s = 0.0;
    std::vector<EventRecord> events;
    std::string position;
    std::string gender;
    std::string split = "train";
};

struct Manifest {
    std::vector<ManifestRecord> records;

    std::vector<std::string> position_vocab() const; // sorted distinct non-empty tokens
    std::vector<std::string> gender_vocab() const;
    std::vector<const ManifestRecord*> split(const std::string& tag) const;
};

/// Source-label to canonical-class mapping. A label mapped to the empty string
/// is explicitly dropped; unknown labels are a hard error at ingest.
class LabelMap {
public:
    LabelMap() = default;
    static LabelMap default_respiratory();
    static LabelMap from_file(const std::filesystem::path& path); // lines: source = target|drop

    void add(const std::string& source, const std::string& target) { map_[lower(source)] = target; }
    /// Returns canonical label, empty string for dropped, nullopt for unknown.
    std::optional<std::string> resolve(const std::string& source) const;

private:
    static std::string lower(const std::string& s);
    std::map<std::string, std::string> map_;
};

Manifest read_manifest(const std::filesystem::path& path, bool verify_paths = true);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

struct IngestStats {
    int clips = 0;
    int events = 0;
    int dropped_labels = 0;  // explicitly dropped by the label map
    int clipped_events = 0;  // clamped into [0, duration]
    int zero_length_dropped = 0;
};

/// Directory adapters. "sprsound" expects wav files with a same-stem .json
/// annotation ({event_annotation: [{start, end, type}]}, times in ms).
/// "hflung" expects wav files with a same-stem _label.txt
/// (lines "label start_s end_s"). "manifest" reads an existing manifest.jsonl.
Manifest ingest(const std::filesystem::path& dataset_dir, const std::string& adapter,
                const LabelMap& label_map, const ClassVocabulary& vocab,
                IngestStats* stats = nullptr);

} // namespace rsed
