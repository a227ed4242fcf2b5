#include "rsed/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

extern char** environ;

namespace rsed {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

} // namespace

void KvConfig::load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("bad config line " + std::to_string(line_no) + " in " +
                                     path.string());
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

void KvConfig::apply_environment(const char* prefix) {
    const std::string pre(prefix);
    for (char** e = environ; *e != nullptr; ++e) {
        const std::string entry(*e);
        if (entry.rfind(pre, 0) != 0) continue;
        const std::size_t eq = entry.find('=');
        if (eq == std::string::npos) continue;
        std::string key = entry.substr(pre.size(), eq - pre.size());
        std::string converted;
        for (std::size_t i = 0; i < key.size(); ++i) {
            if (key[i] == '_' && i + 1 < key.size() && key[i + 1] == '_') {
                converted += '.';
                ++i;
            } else {
                converted += static_cast<char>(std::tolower(static_cast<unsigned char>(key[i])));
            }
        }
        set(converted, entry.substr(eq + 1));
    }
}

void KvConfig::set(const std::string& key, const std::string& value) { kv_[key] = value; }

std::string KvConfig::get_string(const std::string& key, const std::string& fallback) const {
    const auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
}

int KvConfig::get_int(const std::string& key, int fallback) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    return std::stoi(it->second);
}

double KvConfig::get_double(const std::string& key, double fallback) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    return std::stod(it->second);
}

bool KvConfig::get_bool(const std::string& key, bool fallback) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    std::string v = it->second;
    std::transform(v.begin(), v.end(), v.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw std::runtime_error("config: bad boolean for key '" + key + "': " + it->second);
}

std::string KvConfig::serialize() const {
    std::ostringstream os;
    for (const auto& [k, v] : kv_) os << k << " = " << v << "\n";
    return os.str();
}

std::uint64_t KvConfig::hash() const {
    const std::string s = serialize();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

PipelineConfig PipelineConfig::from_kv(const KvConfig& kv) {
    PipelineConfig c;

    c.features.sample_rate = kv.get_int("features.sample_rate", c.features.sample_rate);
    c.features.n_fft = kv.get_int("features.n_fft", c.features.n_fft);
    c.features.win_len = kv.get_int("features.win_len", c.features.win_len);
    c.features.hop_len = kv.get_int("features.hop_len", c.features.hop_len);
    c.features.f_min = kv.get_double("features.f_min", c.features.f_min);
    c.features.f_max = kv.get_double("features.f_max", c.features.f_max);
    c.features.n_bands = kv.get_int("features.n_bands", c.features.n_bands);
    const std::string order = kv.get_string("features.channels", "mel,gamma,cqt");
    {
        c.features.channels.clear();
        std::stringstream ss(order);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (tok == "mel")
                c.features.channels.push_back(SpecChannel::Mel);
            else if (tok == "gamma")
                c.features.channels.push_back(SpecChannel::Gamma);
            else if (tok == "cqt")
                c.features.channels.push_back(SpecChannel::Cqt);
            else
                throw std::runtime_error("config: unknown spectrogram channel '" + tok + "'");
        }
    }

    {
        std::string vocab = kv.get_string("classes", "wheeze,rhonchi,stridor,crackle");
        std::vector<std::string> names;
        std::stringstream ss(vocab);
        std::string tok;
        while (std::getline(ss, tok, ',')) names.push_back(tok);
        c.vocab = ClassVocabulary(names);
    }

    for (int k = 0; k < 3; ++k) {
        const std::string key = "anchors.duration" + std::to_string(k + 1);
        c.anchors.durations[static_cast<std::size_t>(k)] =
            kv.get_double(key, c.anchors.durations[static_cast<std::size_t>(k)]);
        const std::string wkey = "anchors.weight" + std::to_string(k + 1);
        c.anchors.weights[static_cast<std::size_t>(k)] =
            kv.get_double(wkey, c.anchors.weights[static_cast<std::size_t>(k)]);
    }
    c.anchors.base_count = kv.get_int("anchors.base_count", c.anchors.base_count);
    c.anchors.iou_threshold = kv.get_double("anchors.iou_threshold", c.anchors.iou_threshold);

    c.model.group_frames = kv.get_int("model.group_frames", c.model.group_frames);
    c.model.n_bands = c.features.n_bands;
    c.model.n_basis = kv.get_int("model.n_basis", c.model.n_basis);
    c.model.conv_channels[0] = kv.get_int("model.conv1", c.model.conv_channels[0]);
    c.model.conv_channels[1] = kv.get_int("model.conv2", c.model.conv_channels[1]);
    c.model.conv_channels[2] = kv.get_int("model.conv3", c.model.conv_channels[2]);
    c.model.d_node = kv.get_int("model.d_node", c.model.d_node);
    c.model.leaky_slope = kv.get_double("model.leaky_slope", c.model.leaky_slope);
    c.model.time_gamma = kv.get_double("model.time_gamma", c.model.time_gamma);
    c.model.num_classes = c.vocab.size();
    const std::string emode = kv.get_string("model.edge_mode", "compressed");
    if (emode == "compressed")
        c.model.edge_mode = ModelConfig::EdgeMode::Compressed;
    else if (emode == "sequential")
        c.model.edge_mode = ModelConfig::EdgeMode::Sequential;
    else
        throw std::runtime_error("config: unknown edge mode '" + emode + "'");

    const std::string hmode = kv.get_string("refiner.head_mode", "integrated");
    if (hmode == "integrated")
        c.refiner.head_mode = RefinerConfig::HeadMode::Integrated;
    else if (hmode == "separate")
        c.refiner.head_mode = RefinerConfig::HeadMode::Separate;
    else
        throw std::runtime_error("config: unknown head mode '" + hmode + "'");
    c.refiner.bins = kv.get_int("refiner.bins", c.refiner.bins);
    c.refiner.offset_range = kv.get_double("refiner.offset_range", c.refiner.offset_range);
    c.refiner.smooth_kernel = kv.get_int("refiner.smooth_kernel", c.refiner.smooth_kernel);
    c.refiner.smooth_sigma = kv.get_double("refiner.smooth_sigma", c.refiner.smooth_sigma);
    c.refiner.gru_hidden = kv.get_int("refiner.gru_hidden", c.refiner.gru_hidden);
    c.refiner.mlp_hidden = kv.get_int("refiner.mlp_hidden", c.refiner.mlp_hidden);

    c.objective.weights.node_conf = kv.get_double("loss.w_node_conf", 1.0);
    c.objective.weights.node_cls = kv.get_double("loss.w_node_cls", 1.0);
    c.objective.weights.interval_conf = kv.get_double("loss.w_interval_conf", 1.0);
    c.objective.weights.interval_cls = kv.get_double("loss.w_interval_cls", 1.0);
    c.objective.weights.interval_loc = kv.get_double("loss.w_interval_loc", 1.0);
    const std::string iou_mode = kv.get_string("loss.loc_iou", "union");
    if (iou_mode == "union")
        c.objective.loc_iou_mode = ad::IouMode::Union;
    else if (iou_mode == "span")
        c.objective.loc_iou_mode = ad::IouMode::EnclosingSpan;
    else
        throw std::runtime_error("config: unknown loc iou mode '" + iou_mode + "'");

    c.decode.conf_threshold = kv.get_double("decode.conf_threshold", c.decode.conf_threshold);
    c.decode.nms_iou = kv.get_double("decode.nms_iou", c.decode.nms_iou);

    c.train.lr_node = kv.get_double("train.lr_node", c.train.lr_node);
    c.train.lr_interval = kv.get_double("train.lr_interval", c.train.lr_interval);
    c.train.node_decay = kv.get_double("train.node_decay", c.train.node_decay);
    c.train.node_decay_steps = kv.get_int("train.node_decay_steps", c.train.node_decay_steps);
    c.train.interval_lr_min = kv.get_double("train.interval_lr_min", c.train.interval_lr_min);
    c.train.t_max = kv.get_int("train.t_max", c.train.t_max);
    c.train.epochs = kv.get_int("train.epochs", c.train.epochs);
    c.train.batch_size = kv.get_int("train.batch_size", c.train.batch_size);
    c.train.seed = static_cast<std::uint64_t>(kv.get_int("train.seed", 17));
    c.train.grad_clip = kv.get_double("train.grad_clip", c.train.grad_clip);
    c.train.augment = kv.get_bool("train.augment", c.train.augment);
    c.train.augment_prob = kv.get_double("train.augment_prob", c.train.augment_prob);
    c.train.validate_every = kv.get_int("train.validate_every", c.train.validate_every);

    c.use_meta = kv.get_bool("use_meta", false);
    return c;
}

std::uint64_t PipelineConfig::architecture_hash() const {
    const std::uint64_t parts[4] = {features.hash(), anchors.hash(), model.hash(),
                                    refiner.hash()};
    std::uint64_t h = 1469598103934665603ull;
    for (std::uint64_t p : parts)
        for (int b = 0; b < 8; ++b) {
            h ^= (p >> (b * 8)) & 0xff;
            h *= 1099511628211ull;
        }
    return h;
}

} // namespace rsed
