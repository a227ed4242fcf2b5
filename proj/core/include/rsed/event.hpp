#pragma once

#include <string>
#include <vector>

namespace rsed {

/// An annotated or decoded sound event on a clip timeline.
struct EventRecord {
    double onset_s = 0.0;
    double offset_s = 0.0;
    std::string label;
    double score = -1.0;      // < 0 means "no score" (reference events)

    bool has_score() const { return score >= 0.0; }
    double length() const { return offset_s - onset_s; }
};

/// Canonical abnormal-class vocabulary. Index in this list is the class id.
class ClassVocabulary {
public:
    ClassVocabulary() = default;
    explicit ClassVocabulary(std::vector<std::string> names) : names_(std::move(names)) {}

    static ClassVocabulary default_respiratory() {
        return ClassVocabulary({"wheeze", "rhonchi", "stridor", "crackle"});
    }

    int size() const { return static_cast<int>(names_.size()); }
    const std::string& name(int id) const { return names_.at(static_cast<std::size_t>(id)); }
    const std::vector<std::string>& names() const { return names_; }

    /// Returns class id or -1 when the label is unknown.
    int id_of(const std::string& label) const {
        for (std::size_t i = 0; i < names_.size(); ++i)
            if (names_[i] == label) return static_cast<int>(i);
        return -1;
    }

private:
    std::vector<std::string> names_;
};

} // namespace rsed
