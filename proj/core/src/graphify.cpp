#include "rsed/graphify.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace rsed {

FrameLabels frame_labels_from_events(const std::vector<EventRecord>& events,
                                     const std::vector<double>& frame_times,
                                     const ClassVocabulary& vocab) {
    FrameLabels labels(frame_times.size(), 0);
    // Later-starting events win on overlap: apply in onset order.
    std::vector<const EventRecord*> ordered;
    for (const auto& ev : events) ordered.push_back(&ev);
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const EventRecord* a, const EventRecord* b) {
                         return a->onset_s < b->onset_s;
                     });
    for (const EventRecord* ev : ordered) {
        const int cls = vocab.id_of(ev->label);
        if (cls < 0)
            throw std::runtime_error("frame_labels_from_events: unknown label '" + ev->label +
                                     "'");
        for (std::size_t f = 0; f < frame_times.size(); ++f)
            if (frame_times[f] >= ev->onset_s && frame_times[f] <= ev->offset_s)
                labels[f] = cls + 1;
    }
    return labels;
}

void node_labels(const FrameLabels& frames, int group_frames,
                 std::vector<double>* node_conf, std::vector<int>* node_class) {
    if (group_frames <= 0) throw std::invalid_argument("node_labels: bad group size");
    const int n_frames = static_cast<int>(frames.size());
    const int n_nodes = (n_frames + group_frames - 1) / group_frames;
    node_conf->assign(static_cast<std::size_t>(n_nodes), 0.0);
    node_class->assign(static_cast<std::size_t>(n_nodes), -1);
    for (int g = 0; g < n_nodes; ++g) {
        int abnormal = 0;
        std::vector<int> counts;
        std::vector<int> first_pos;
        for (int j = 0; j < group_frames; ++j) {
            // padded frames repeat the final real frame
            const int src = std::min(g * group_frames + j, n_frames - 1);
            const int f = frames[static_cast<std::size_t>(src)];
            if (f != 0) {
                ++abnormal;
                const int cls = f - 1;
                if (cls >= static_cast<int>(counts.size())) {
                    counts.resize(static_cast<std::size_t>(cls) + 1, 0);
                    first_pos.resize(static_cast<std::size_t>(cls) + 1, group_frames);
                }
                if (counts[static_cast<std::size_t>(cls)] == 0)
                    first_pos[static_cast<std::size_t>(cls)] = j;
                ++counts[static_cast<std::size_t>(cls)];
            }
        }
        (*node_conf)[static_cast<std::size_t>(g)] =
            static_cast<double>(abnormal) / group_frames;
        if (abnormal > 0) {
            int best = -1, best_count = -1, best_first = group_frames + 1;
            for (std::size_t c = 0; c < counts.size(); ++c) {
                if (counts[c] == 0) continue;
                if (counts[c] > best_count ||
                    (counts[c] == best_count && first_pos[c] < best_first)) {
                    best = static_cast<int>(c);
                    best_count = counts[c];
                    best_first = first_pos[c];
                }
            }
            (*node_class)[static_cast<std::size_t>(g)] = best;
        }
    }
}

void chunk(const SpectrogramStack& stack, int group_frames, std::size_t clip_samples,
           int hop_len, std::vector<double>* chunk_inputs, std::vector<double>* node_time,
           int* n_nodes) {
    if (stack.frames < 1) throw std::invalid_argument("chunk: empty spectrogram");
    const int w = group_frames;
    const int n = (stack.frames + w - 1) / w;
    *n_nodes = n;
    chunk_inputs->assign(
        static_cast<std::size_t>(n) * stack.channels * stack.n_bands * w, 0.0);
    node_time->assign(static_cast<std::size_t>(n), 0.0);
    for (int g = 0; g < n; ++g) {
        for (int c = 0; c < stack.channels; ++c)
            for (int b = 0; b < stack.n_bands; ++b)
                for (int j = 0; j < w; ++j) {
                    const int src = std::min(g * w + j, stack.frames - 1);
                    (*chunk_inputs)[((static_cast<std::size_t>(g) * stack.channels + c) *
                                         stack.n_bands +
                                     b) *
                                        w +
                                    j] = stack.at(c, b, src);
                }
        const double t = (static_cast<double>(g) + 0.5) * w * hop_len /
                         static_cast<double>(clip_samples);
        (*node_time)[static_cast<std::size_t>(g)] = std::clamp(t, 0.0, 1.0);
    }
}

std::vector<int> edge_labels(const std::vector<int>& node_class) {
    std::vector<int> labels;
    if (node_class.size() < 2) return labels;
    labels.resize(node_class.size() - 1);
    for (std::size_t j = 0; j + 1 < node_class.size(); ++j)
        labels[j] = (node_class[j] != -1 || node_class[j + 1] != -1) ? 1 : 0;
    return labels;
}

ClipGraph build_clip_graph(const SpectrogramStack& stack, const std::vector<EventRecord>& events,
                           const ClassVocabulary& vocab, int group_frames, int hop_len,
                           std::size_t clip_samples, const std::string& clip_id,
                           const std::vector<double>& meta_onehot) {
    ClipGraph g;
    g.channels = stack.channels;
    g.n_bands = stack.n_bands;
    g.group_frames = group_frames;
    g.duration_s = stack.source_duration_s;
    g.clip_id = clip_id;
    g.meta_onehot = meta_onehot;

    chunk(stack, group_frames, clip_samples, hop_len, &g.chunk_inputs, &g.node_time,
          &g.n_nodes);
    const FrameLabels frames = frame_labels_from_events(events, stack.frame_times, vocab);
    node_labels(frames, group_frames, &g.node_conf, &g.node_class);
    for (int j = 0; j + 1 < g.n_nodes; ++j) g.edge_index.emplace_back(j, j + 1);
    g.edge_label = edge_labels(g.node_class);
    return g;
}

BatchGraph collate(const std::vector<ClipGraph>& graphs) {
    if (graphs.empty()) throw std::invalid_argument("collate: empty graph list");
    BatchGraph b;
    b.channels = graphs[0].channels;
    b.n_bands = graphs[0].n_bands;
    b.group_frames = graphs[0].group_frames;
    b.meta_dim = static_cast<int>(graphs[0].meta_onehot.size());
    b.node_offsets.push_back(0);

    for (std::size_t i = 0; i < graphs.size(); ++i) {
        const ClipGraph& g = graphs[i];
        if (g.channels != b.channels || g.n_bands != b.n_bands ||
            g.group_frames != b.group_frames)
            throw std::invalid_argument("collate: chunk geometry mismatch");
        if (static_cast<int>(g.meta_onehot.size()) != b.meta_dim)
            throw std::invalid_argument("collate: meta dimension mismatch");
        const int offset = b.n_nodes;
        b.chunk_inputs.insert(b.chunk_inputs.end(), g.chunk_inputs.begin(),
                              g.chunk_inputs.end());
        b.node_conf.insert(b.node_conf.end(), g.node_conf.begin(), g.node_conf.end());
        b.node_class.insert(b.node_class.end(), g.node_class.begin(), g.node_class.end());
        b.node_time.insert(b.node_time.end(), g.node_time.begin(), g.node_time.end());
        for (const auto& e : g.edge_index)
            b.edge_index.emplace_back(e.first + offset, e.second + offset);
        b.edge_label.insert(b.edge_label.end(), g.edge_label.begin(), g.edge_label.end());
        for (int j = 0; j < g.n_nodes; ++j) {
            b.batch.push_back(static_cast<int>(i));
            for (int k = 0; k < b.meta_dim; ++k)
                b.meta_onehot.push_back(g.meta_onehot[static_cast<std::size_t>(k)]);
        }
        b.n_nodes += g.n_nodes;
        b.node_offsets.push_back(b.n_nodes);
        b.durations.push_back(g.duration_s);
        b.clip_ids.push_back(g.clip_id);
    }
    return b;
}

void save_graph_cache(const std::filesystem::path& path, const ClipGraph& graph,
                      std::uint64_t config_hash) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write graph cache: " + path.string());
    out.write("RSEDGR01", 8);
    out.write(reinterpret_cast<const char*>(&config_hash), 8);
    const std::int32_t dims[4] = {graph.n_nodes, graph.channels, graph.n_bands,
                                  graph.group_frames};
    out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    out.write(reinterpret_cast<const char*>(&graph.duration_s), 8);

    const auto write_f32 = [&](const std::vector<double>& v) {
        for (double d : v) {
            const float f = static_cast<float>(d);
            out.write(reinterpret_cast<const char*>(&f), 4);
        }
    };
    const auto write_i32 = [&](const std::vector<int>& v) {
        for (int d : v) {
            const std::int32_t f = d;
            out.write(reinterpret_cast<const char*>(&f), 4);
        }
    };
    // chunk inputs stay double for bit-stable training from cache
    out.write(reinterpret_cast<const char*>(graph.chunk_inputs.data()),
              static_cast<std::streamsize>(graph.chunk_inputs.size() * 8));
    write_f32(graph.node_conf);
    write_i32(graph.node_class);
    out.write(reinterpret_cast<const char*>(graph.node_time.data()),
              static_cast<std::streamsize>(graph.node_time.size() * 8));
    write_i32(graph.edge_label);
    const std::int32_t meta_dim = static_cast<std::int32_t>(graph.meta_onehot.size());
    out.write(reinterpret_cast<const char*>(&meta_dim), 4);
    write_f32(graph.meta_onehot);
    const std::int32_t id_len = static_cast<std::int32_t>(graph.clip_id.size());
    out.write(reinterpret_cast<const char*>(&id_len), 4);
    out.write(graph.clip_id.data(), id_len);
}

std::optional<ClipGraph> load_graph_cache(const std::filesystem::path& path,
                                          std::uint64_t config_hash) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "RSEDGR01", 8) != 0) return std::nullopt;
    std::uint64_t hash = 0;
    in.read(reinterpret_cast<char*>(&hash), 8);
    if (hash != config_hash) return std::nullopt;
    std::int32_t dims[4];
    in.read(reinterpret_cast<char*>(dims), sizeof(dims));
    ClipGraph g;
    g.n_nodes = dims[0];
    g.channels = dims[1];
    g.n_bands = dims[2];
    g.group_frames = dims[3];
    in.read(reinterpret_cast<char*>(&g.duration_s), 8);

    const auto read_f32 = [&](std::vector<double>& v, std::size_t n) {
        v.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            float f;
            in.read(reinterpret_cast<char*>(&f), 4);
            v[i] = f;
        }
    };
    const auto read_i32 = [&](std::vector<int>& v, std::size_t n) {
        v.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::int32_t f;
            in.read(reinterpret_cast<char*>(&f), 4);
            v[i] = f;
        }
    };
    const std::size_t n_nodes = static_cast<std::size_t>(g.n_nodes);
    g.chunk_inputs.resize(n_nodes * g.channels * g.n_bands * g.group_frames);
    in.read(reinterpret_cast<char*>(g.chunk_inputs.data()),
            static_cast<std::streamsize>(g.chunk_inputs.size() * 8));
    read_f32(g.node_conf, n_nodes);
    read_i32(g.node_class, n_nodes);
    g.node_time.resize(n_nodes);
    in.read(reinterpret_cast<char*>(g.node_time.data()),
            static_cast<std::streamsize>(g.node_time.size() * 8));
    read_i32(g.edge_label, n_nodes >= 1 ? n_nodes - 1 : 0);
    std::int32_t meta_dim = 0;
    in.read(reinterpret_cast<char*>(&meta_dim), 4);
    read_f32(g.meta_onehot, static_cast<std::size_t>(meta_dim));
    std::int32_t id_len = 0;
    in.read(reinterpret_cast<char*>(&id_len), 4);
    g.clip_id.resize(static_cast<std::size_t>(id_len));
    in.read(g.clip_id.data(), id_len);
    if (!in) return std::nullopt;
    for (int j = 0; j + 1 < g.n_nodes; ++j) g.edge_index.emplace_back(j, j + 1);
    return g;
}

} // namespace rsed
