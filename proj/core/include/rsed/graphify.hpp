#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rsed/event.hpp"
#include "rsed/features.hpp"

namespace rsed {

/// Per-frame class index: 0 = normal, 1..K = abnormal class id + 1.
using FrameLabels = std::vector<int>;

/// Chain graph for one clip: chunked spectrogram inputs, soft node labels,
/// consecutive-node edges, per-node timestamps.
struct ClipGraph {
    // chunk inputs, (n_nodes, channels, n_bands, group_frames) row-major
    std::vector<double> chunk_inputs;
    int n_nodes = 0;
    int channels = 0;
    int n_bands = 0;
    int group_frames = 0;

    std::vector<double> node_conf;  // in [0,1]
    std::vector<int> node_class;    // -1 or 0..C-1
    std::vector<std::pair<int, int>> edge_index; // (j, j+1) chain edges
    std::vector<int> edge_label;    // per edge, {0,1}
    std::vector<double> node_time;  // normalized center timestamp, [0,1]
    std::vector<double> meta_onehot; // (meta_dim) shared by all nodes; may be empty
    double duration_s = 0.0;
    std::string clip_id;
};

/// Concatenated clip graphs with index offsets; message passing never crosses
/// clip boundaries.
struct BatchGraph {
    std::vector<double> chunk_inputs;
    int n_nodes = 0;
    int channels = 0;
    int n_bands = 0;
    int group_frames = 0;

    std::vector<double> node_conf;
    std::vector<int> node_class;
    std::vector<std::pair<int, int>> edge_index; // offset into batch numbering
    std::vector<int> edge_label;
    std::vector<double> node_time;
    std::vector<int> batch;          // clip id per node, 0-based
    std::vector<int> node_offsets;   // per clip start index; size n_clips+1
    std::vector<double> durations;   // per clip, seconds
    std::vector<std::string> clip_ids;
    std::vector<double> meta_onehot; // (n_nodes, meta_dim) when meta_dim > 0
    int meta_dim = 0;

    int n_clips() const { return static_cast<int>(durations.size()); }
};

/// Marks frames whose center lies inside an event with the event's class + 1.
/// Overlapping events resolve to the later-starting one. Unknown labels throw.
FrameLabels frame_labels_from_events(const std::vector<EventRecord>& events,
                                     const std::vector<double>& frame_times,
                                     const ClassVocabulary& vocab);

/// Per-chunk soft confidence (abnormal fraction) and majority abnormal class;
/// ties break to the first appearing class, all-normal chunks get class -1.
void node_labels(const FrameLabels& frames, int group_frames,
                 std::vector<double>* node_conf, std::vector<int>* node_class);

/// Splits the stack into ceil(frames/w) chunks; the last chunk is padded by
/// repeating the final frame. Returns chunk tensor data and node timestamps.
void chunk(const SpectrogramStack& stack, int group_frames, std::size_t clip_samples,
           int hop_len, std::vector<double>* chunk_inputs, std::vector<double>* node_time,
           int* n_nodes);

/// Edge label per chain edge: 1 iff either endpoint is abnormal.
std::vector<int> edge_labels(const std::vector<int>& node_class);

/// Builds the full per-clip graph.
ClipGraph build_clip_graph(const SpectrogramStack& stack, const std::vector<EventRecord>& events,
                           const ClassVocabulary& vocab, int group_frames, int hop_len,
                           std::size_t clip_samples, const std::string& clip_id = {},
                           const std::vector<double>& meta_onehot = {});

/// Concatenates clip graphs with cumulative node offsets; batch ids 0-based.
BatchGraph collate(const std::vector<ClipGraph>& graphs);

/// Graph cache container (labels as integers, confidences as float32).
void save_graph_cache(const std::filesystem::path& path, const ClipGraph& graph,
                      std::uint64_t config_hash);
std::optional<ClipGraph> load_graph_cache(const std::filesystem::path& path,
                                          std::uint64_t config_hash);

} // namespace rsed
