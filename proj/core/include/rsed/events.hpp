#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rsed/event.hpp"
#include "rsed/refiner.hpp"

namespace rsed {

struct DecodeConfig {
    double conf_threshold = 0.5;
    double nms_iou = 0.4;
};

/// Collar tolerances for event matching: fixed onset window, offset window is
/// the larger of the fixed value and a fraction of the reference length.
struct CollarConfig {
    double onset_s = 0.2;
    double offset_s = 0.2;
    double offset_ratio = 0.1;
};

struct ClassMetrics {
    int n_ref = 0;
    int n_sys = 0;
    int tp = 0;
    int fp = 0;
    int fn = 0;
    double f1 = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double er = 0.0;
    int s = 0;
    int d = 0;
    int i = 0;
    double del = 0.0;
    double ins = 0.0;
};

struct EvalReport {
    std::map<std::string, ClassMetrics> per_class;
    ClassMetrics overall; // micro aggregation across classes
};

/// Thresholds + per-class greedy non-maximum suppression over refined anchors.
std::vector<EventRecord> decode(const std::vector<IntervalPrediction>& predictions,
                                const ClassVocabulary& vocab, const DecodeConfig& cfg);

/// True iff sys matches ref within the onset/offset collars.
bool collar_match(const EventRecord& ref, const EventRecord& sys, const CollarConfig& collar);

struct MatchCounts {
    int tp = 0;
    int fp = 0;
    int fn = 0;
};

/// Greedy one-to-one matching in onset order for same-class event lists.
MatchCounts match_events(std::vector<EventRecord> refs, std::vector<EventRecord> syss,
                         const CollarConfig& collar);

/// Event-based derived metrics from raw counts (n = reference event count).
ClassMetrics compute_metrics(int tp, int fp, int fn, int n);

/// One labelled event stream per clip id.
using EventMap = std::map<std::string, std::vector<EventRecord>>;

EvalReport evaluate_events(const EventMap& refs, const EventMap& syss,
                           const ClassVocabulary& vocab, const CollarConfig& collar = {});

// ---- JSON-lines event files: {clip_id, onset_s, offset_s, label, score?} ----
EventMap read_event_jsonl(const std::filesystem::path& path);
void write_event_jsonl(const std::filesystem::path& path, const EventMap& events);

/// Human-readable metric table (class rows + overall).
std::string format_report(const EvalReport& report);
/// Machine JSON form.
std::string report_to_json(const EvalReport& report);

} // namespace rsed
