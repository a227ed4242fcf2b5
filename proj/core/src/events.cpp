#include "rsed/events.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "rsed/anchors.hpp"

namespace rsed {

std::vector<EventRecord> decode(const std::vector<IntervalPrediction>& predictions,
                                const ClassVocabulary& vocab, const DecodeConfig& cfg) {
    struct Candidate {
        double start, end, score;
        int cls;
    };
    std::vector<Candidate> cands;
    for (const auto& p : predictions) {
        const double score = 1.0 / (1.0 + std::exp(-p.conf_logit));
        if (score < cfg.conf_threshold) continue;
        if (!(p.end > p.start)) continue;
        cands.push_back({p.start, p.end, score, p.arg_class()});
    }
    // higher score first; ties resolve by onset then width for determinism
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.start != b.start) return a.start < b.start;
        return a.end < b.end;
    });

    std::vector<EventRecord> kept;
    for (const auto& c : cands) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (vocab.id_of(k.label) != c.cls) continue;
            if (interval_iou(c.start, c.end, k.onset_s, k.offset_s) >= cfg.nms_iou) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) {
            EventRecord e;
            e.onset_s = c.start;
            e.offset_s = c.end;
            e.label = vocab.name(c.cls);
            e.score = c.score;
            kept.push_back(e);
        }
    }
    std::sort(kept.begin(), kept.end(),
              [](const EventRecord& a, const EventRecord& b) { return a.onset_s < b.onset_s; });
    return kept;
}

bool collar_match(const EventRecord& ref, const EventRecord& sys, const CollarConfig& collar) {
    const double onset_ok = std::abs(sys.onset_s - ref.onset_s) <= collar.onset_s;
    const double offset_tol = std::max(collar.offset_s, collar.offset_ratio * ref.length());
    const double offset_ok = std::abs(sys.offset_s - ref.offset_s) <= offset_tol;
    return onset_ok && offset_ok;
}

MatchCounts match_events(std::vector<EventRecord> refs, std::vector<EventRecord> syss,
                         const CollarConfig& collar) {
    const auto by_onset = [](const EventRecord& a, const EventRecord& b) {
        return a.onset_s < b.onset_s;
    };
    std::stable_sort(refs.begin(), refs.end(), by_onset);
    std::stable_sort(syss.begin(), syss.end(), by_onset);

    std::vector<bool> used(syss.size(), false);
    int tp = 0;
    for (const auto& r : refs) {
        for (std::size_t j = 0; j < syss.size(); ++j) {
            if (used[j]) continue;
            if (collar_match(r, syss[j], collar)) {
                used[j] = true;
                ++tp;
                break;
            }
        }
    }
    MatchCounts c;
    c.tp = tp;
    c.fn = static_cast<int>(refs.size()) - tp;
    c.fp = static_cast<int>(syss.size()) - tp;
    return c;
}

ClassMetrics compute_metrics(int tp, int fp, int fn, int n) {
    ClassMetrics m;
    m.tp = tp;
    m.fp = fp;
    m.fn = fn;
    m.n_ref = n;
    m.n_sys = tp + fp;
    const int denom = 2 * tp + fp + fn;
    m.f1 = denom > 0 ? 2.0 * tp / denom : 0.0;
    m.precision = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    m.recall = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    m.s = std::min(fn, fp);
    m.d = std::max(0, fn - fp);
    m.i = std::max(0, fp - fn);
    if (n > 0) {
        m.er = static_cast<double>(m.s + m.d + m.i) / n;
        m.del = static_cast<double>(m.d) / n;
        m.ins = static_cast<double>(m.i) / n;
    } else if (fp == 0) {
        m.er = m.del = m.ins = 0.0;
    } else {
        m.er = m.ins = std::numeric_limits<double>::infinity();
        m.del = 0.0;
    }
    return m;
}

EvalReport evaluate_events(const EventMap& refs, const EventMap& syss,
                           const ClassVocabulary& vocab, const CollarConfig& collar) {
    // union of clip ids so unmatched sides still count
    std::vector<std::string> clip_ids;
    for (const auto& [id, _] : refs) clip_ids.push_back(id);
    for (const auto& [id, _] : syss)
        if (!refs.count(id)) clip_ids.push_back(id);
    std::sort(clip_ids.begin(), clip_ids.end());

    std::map<std::string, MatchCounts> counts;
    for (const auto& cls : vocab.names()) counts[cls] = MatchCounts{};

    for (const auto& id : clip_ids) {
        static const std::vector<EventRecord> kEmpty;
        const auto& r_all = refs.count(id) ? refs.at(id) : kEmpty;
        const auto& s_all = syss.count(id) ? syss.at(id) : kEmpty;
        for (const auto& cls : vocab.names()) {
            std::vector<EventRecord> r, s;
            for (const auto& e : r_all)
                if (e.label == cls) r.push_back(e);
            for (const auto& e : s_all)
                if (e.label == cls) s.push_back(e);
            const MatchCounts c = match_events(r, s, collar);
            counts[cls].tp += c.tp;
            counts[cls].fp += c.fp;
            counts[cls].fn += c.fn;
        }
    }

    EvalReport report;
    int tp = 0, fp = 0, fn = 0, n = 0;
    for (const auto& cls : vocab.names()) {
        const MatchCounts& c = counts[cls];
        const int n_ref = c.tp + c.fn;
        report.per_class[cls] = compute_metrics(c.tp, c.fp, c.fn, n_ref);
        tp += c.tp;
        fp += c.fp;
        fn += c.fn;
        n += n_ref;
    }
    report.overall = compute_metrics(tp, fp, fn, n);
    return report;
}

EventMap read_event_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open event file: " + path.string());
    EventMap events;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error("bad json at " + path.string() + ":" +
                                     std::to_string(line_no) + ": " + e.what());
        }
        EventRecord e;
        e.onset_s = j.at("onset_s").get<double>();
        e.offset_s = j.at("offset_s").get<double>();
        e.label = j.at("label").get<std::string>();
        if (j.contains("score")) e.score = j.at("score").get<double>();
        events[j.at("clip_id").get<std::string>()].push_back(e);
    }
    return events;
}

void write_event_jsonl(const std::filesystem::path& path, const EventMap& events) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write event file: " + path.string());
    for (const auto& [clip_id, list] : events) {
        for (const auto& e : list) {
            nlohmann::json j;
            j["clip_id"] = clip_id;
            j["onset_s"] = e.onset_s;
            j["offset_s"] = e.offset_s;
            j["label"] = e.label;
            if (e.has_score()) j["score"] = e.score;
            out << j.dump() << "\n";
        }
    }
}

namespace {

std::string fmt_metric(double v) {
    if (std::isinf(v)) return "inf";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

void metrics_to_json(nlohmann::json& j, const ClassMetrics& m) {
    j["n_ref"] = m.n_ref;
    j["n_sys"] = m.n_sys;
    j["tp"] = m.tp;
    j["fp"] = m.fp;
    j["fn"] = m.fn;
    j["f1"] = std::isinf(m.f1) ? nlohmann::json() : nlohmann::json(m.f1);
    j["precision"] = m.precision;
    j["recall"] = m.recall;
    j["er"] = std::isinf(m.er) ? nlohmann::json() : nlohmann::json(m.er);
    j["s"] = m.s;
    j["d"] = m.d;
    j["i"] = m.i;
    j["del"] = std::isinf(m.del) ? nlohmann::json() : nlohmann::json(m.del);
    j["ins"] = std::isinf(m.ins) ? nlohmann::json() : nlohmann::json(m.ins);
}

} // namespace

std::string format_report(const EvalReport& report) {
    std::ostringstream os;
    os << "label        Nref  Nsys    F1     Pre    Rec    ER     Del    Ins\n";
    const auto row = [&](const std::string& name, const ClassMetrics& m) {
        os << name;
        for (std::size_t i = name.size(); i < 12; ++i) os << ' ';
        char buf[160];
        std::snprintf(buf, sizeof(buf), " %5d %5d  %s %s %s %s %s %s\n", m.n_ref, m.n_sys,
                      fmt_metric(m.f1).c_str(), fmt_metric(m.precision).c_str(),
                      fmt_metric(m.recall).c_str(), fmt_metric(m.er).c_str(),
                      fmt_metric(m.del).c_str(), fmt_metric(m.ins).c_str());
        os << buf;
    };
    for (const auto& [cls, m] : report.per_class) row(cls, m);
    row("overall", report.overall);
    return os.str();
}

std::string report_to_json(const EvalReport& report) {
    nlohmann::json j;
    for (const auto& [cls, m] : report.per_class) metrics_to_json(j["per_class"][cls], m);
    metrics_to_json(j["overall"], report.overall);
    return j.dump(2);
}

} // namespace rsed
