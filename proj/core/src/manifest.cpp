#include "rsed/manifest.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "rsed/audio.hpp"

namespace rsed {

namespace fs = std::filesystem;

std::vector<std::string> Manifest::position_vocab() const {
    std::set<std::string> s;
    for (const auto& r : records)
        if (!r.position.empty()) s.insert(r.position);
    return {s.begin(), s.end()};
}

std::vector<std::string> Manifest::gender_vocab() const {
    std::set<std::string> s;
    for (const auto& r : records)
        if (!r.gender.empty()) s.insert(r.gender);
    return {s.begin(), s.end()};
}

std::vector<const ManifestRecord*> Manifest::split(const std::string& tag) const {
    std::vector<const ManifestRecord*> out;
    for (const auto& r : records)
        if (r.split == tag) out.push_back(&r);
    return out;
}

std::string LabelMap::lower(const std::string& s) {
    std::string out = s;
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    return out;
}

LabelMap LabelMap::default_respiratory() {
    LabelMap m;
    m.add("wheeze", "wheeze");
    m.add("rhonchi", "rhonchi");
    m.add("stridor", "stridor");
    m.add("crackle", "crackle");
    m.add("fine crackle", "crackle");
    m.add("coarse crackle", "crackle");
    m.add("wheeze & crackle", ""); // mixed events carry no single class
    m.add("wheeze+crackle", "");
    m.add("normal", "");
    m.add("i", ""); // breath-phase annotations
    m.add("e", "");
    return m;
}

LabelMap LabelMap::from_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open label map: " + path.string());
    LabelMap m;
    std::string line;
    while (std::getline(in, line)) {
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("label map: bad line '" + line + "'");
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r\n");
            const auto b = s.find_last_not_of(" \t\r\n");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        const std::string src = trim(line.substr(0, eq));
        std::string dst = trim(line.substr(eq + 1));
        if (dst == "drop") dst.clear();
        m.add(src, dst);
    }
    return m;
}

std::optional<std::string> LabelMap::resolve(const std::string& source) const {
    const auto it = map_.find(lower(source));
    if (it == map_.end()) return std::nullopt;
    return it->second;
}

Manifest read_manifest(const fs::path& path, bool verify_paths) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest: " + path.string());
    Manifest m;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error("manifest parse error at line " + std::to_string(line_no) +
                                     ": " + e.what());
        }
        ManifestRecord r;
        r.clip_id = j.at("clip_id").get<std::string>();
        r.audio = j.at("audio").get<std::string>();
        r.sample_rate = j.at("sample_rate").get<int>();
        r.duration_s = j.at("duration_s").get<double>();
        if (j.contains("events"))
            for (const auto& je : j.at("events")) {
                EventRecord e;
                e.onset_s = je.at("onset_s").get<double>();
                e.offset_s = je.at("offset_s").get<double>();
                e.label = je.at("label").get<std::string>();
                r.events.push_back(e);
            }
        r.position = j.value("position", "");
        r.gender = j.value("gender", "");
        r.split = j.value("split", "train");
        if (verify_paths && !fs::exists(r.audio))
            throw std::runtime_error("manifest: missing audio file " + r.audio.string());
        m.records.push_back(std::move(r));
    }
    return m;
}

void write_manifest(const fs::path& path, const Manifest& manifest) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest: " + path.string());
    for (const auto& r : manifest.records) {
        nlohmann::json j;
        j["clip_id"] = r.clip_id;
        j["audio"] = r.audio.string();
        j["sample_rate"] = r.sample_rate;
        j["duration_s"] = r.duration_s;
        nlohmann::json events = nlohmann::json::array();
        for (const auto& e : r.events) {
            nlohmann::json je;
            je["onset_s"] = e.onset_s;
            je["offset_s"] = e.offset_s;
            je["label"] = e.label;
            events.push_back(je);
        }
        j["events"] = events;
        j["position"] = r.position;
        j["gender"] = r.gender;
        j["split"] = r.split;
        out << j.dump() << "\n";
    }
}

namespace {

std::string split_from_path(const fs::path& p) {
    for (const auto& part : p) {
        std::string s = part.string();
        std::transform(s.begin(), s.end(), s.begin(),
                       [](unsigned char c) { return std::tolower(c); });
        if (s == "train" || s.rfind("train", 0) == 0) return "train";
        if (s == "val" || s == "valid" || s == "validation") return "val";
        if (s == "test" || s.rfind("test", 0) == 0) return "test";
    }
    return "train";
}

void parse_stem_tokens(const std::string& stem, std::string* position, std::string* gender) {
    std::stringstream ss(stem);
    std::string tok;
    while (std::getline(ss, tok, '_')) {
        std::string low = tok;
        std::transform(low.begin(), low.end(), low.begin(),
                       [](unsigned char c) { return std::tolower(c); });
        if (low.size() == 2 && low[0] == 'p' && std::isdigit(static_cast<unsigned char>(low[1])))
            *position = low;
        else if (low == "m" || low == "f")
            *gender = low;
    }
}

struct RawEvent {
    double onset = 0.0, offset = 0.0;
    std::string label;
};

void normalize_events(const std::vector<RawEvent>& raw, const LabelMap& map,
                      const ClassVocabulary& vocab, double duration, ManifestRecord* rec,
                      IngestStats* stats, std::vector<std::string>* unknown) {
    for (const auto& ev : raw) {
        const auto resolved = map.resolve(ev.label);
        if (!resolved) {
            unknown->push_back(ev.label);
            continue;
        }
        if (resolved->empty()) {
            if (stats) ++stats->dropped_labels;
            continue;
        }
        if (vocab.id_of(*resolved) < 0) {
            unknown->push_back(ev.label + " -> " + *resolved);
            continue;
        }
        EventRecord e;
        e.onset_s = ev.onset;
        e.offset_s = ev.offset;
        e.label = *resolved;
        if (e.onset_s < 0.0 || e.offset_s > duration) {
            e.onset_s = std::max(0.0, e.onset_s);
            e.offset_s = std::min(duration, e.offset_s);
            if (stats) ++stats->clipped_events;
        }
        if (!(e.offset_s > e.onset_s)) {
            if (stats) ++stats->zero_length_dropped;
            continue;
        }
        rec->events.push_back(e);
        if (stats) ++stats->events;
    }
}

} // namespace

Manifest ingest(const fs::path& dataset_dir, const std::string& adapter,
                const LabelMap& label_map, const ClassVocabulary& vocab, IngestStats* stats) {
    if (adapter == "manifest") {
        const fs::path p =
            fs::is_directory(dataset_dir) ? dataset_dir / "manifest.jsonl" : dataset_dir;
        return read_manifest(p);
    }
    if (!fs::is_directory(dataset_dir))
        throw std::runtime_error("ingest: not a directory: " + dataset_dir.string());

    std::vector<fs::path> wavs;
    for (const auto& entry : fs::recursive_directory_iterator(dataset_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".wav")
            wavs.push_back(entry.path());
    std::sort(wavs.begin(), wavs.end());
    if (wavs.empty()) throw std::runtime_error("ingest: no clips found in " + dataset_dir.string());

    Manifest m;
    std::vector<std::string> unknown;
    for (const auto& wav : wavs) {
        const AudioClip clip = read_wav(wav);
        ManifestRecord r;
        r.clip_id = wav.stem().string();
        r.audio = wav;
        r.sample_rate = clip.sample_rate;
        r.duration_s = clip.duration_s;
        r.split = split_from_path(fs::relative(wav, dataset_dir));
        parse_stem_tokens(wav.stem().string(), &r.position, &r.gender);

        std::vector<RawEvent> raw;
        if (adapter == "sprsound") {
            const fs::path ann = fs::path(wav).replace_extension(".json");
            if (fs::exists(ann)) {
                std::ifstream in(ann);
                nlohmann::json j;
                in >> j;
                if (j.contains("event_annotation"))
                    for (const auto& je : j.at("event_annotation")) {
                        RawEvent e;
                        // annotation times are milliseconds
                        e.onset = je.at("start").is_string()
                                      ? std::stod(je.at("start").get<std::string>()) / 1000.0
                                      : je.at("start").get<double>() / 1000.0;
                        e.offset = je.at("end").is_string()
                                       ? std::stod(je.at("end").get<std::string>()) / 1000.0
                                       : je.at("end").get<double>() / 1000.0;
                        e.label = je.at("type").get<std::string>();
                        raw.push_back(e);
                    }
            }
        } else if (adapter == "hflung") {
            fs::path ann = wav;
            ann.replace_filename(wav.stem().string() + "_label.txt");
            if (fs::exists(ann)) {
                std::ifstream in(ann);
                std::string line;
                while (std::getline(in, line)) {
                    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
                    std::stringstream ss(line);
                    RawEvent e;
                    if (!(ss >> e.label >> e.onset >> e.offset))
                        throw std::runtime_error("ingest: bad label line in " + ann.string() +
                                                 ": '" + line + "'");
                    raw.push_back(e);
                }
            }
        } else {
            throw std::runtime_error("ingest: unknown adapter '" + adapter + "'");
        }

        normalize_events(raw, label_map, vocab, r.duration_s, &r, stats, &unknown);
        m.records.push_back(std::move(r));
        if (stats) ++stats->clips;
    }

    if (!unknown.empty()) {
        std::sort(unknown.begin(), unknown.end());
        unknown.erase(std::unique(unknown.begin(), unknown.end()), unknown.end());
        std::string msg = "ingest: unmapped labels:";
        for (const auto& u : unknown) msg += " '" + u + "'";
        throw std::runtime_error(msg);
    }
    return m;
}

} // namespace rsed
