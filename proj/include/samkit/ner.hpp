// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "samkit/errors.hpp"

namespace samkit {

/// Collapse runs of whitespace to single spaces and trim the ends.
/// Spans stay case-sensitive.
inline std::string normalize_span(const std::string& raw) {
    std::string out;
    bool in_space = true;  // leading whitespace dropped
    for (char c : raw) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            in_space = true;
        } else {
            if (in_space && !out.empty()) out.push_back(' ');
            out.push_back(c);
            in_space = false;
        }
    }
    return out;
}

/// Type labels additionally fold to lowercase: "Person" and "person" are the
/// same label across instruction formats.
inline std::string normalize_type(const std::string& raw) {
    std::string out = normalize_span(raw);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

/// One extracted entity: exact surface form plus type label.
struct EntityMention {
    std::string span;
    std::string etype;

    bool operator==(const EntityMention&) const = default;
    auto operator<=>(const EntityMention&) const = default;
};

/// Deduplicated mention set for one instance.
struct PredictionSet {
    std::string instance_id;
    std::set<EntityMention> mentions;

    bool operator==(const PredictionSet&) const = default;
};

/// Tries to add (span, type) after normalization; returns false when either
/// side normalizes to the empty string.
inline bool add_mention(PredictionSet& set, const std::string& span, const std::string& etype) {
    EntityMention m{normalize_span(span), normalize_type(etype)};
    if (m.span.empty() || m.etype.empty()) return false;
    set.mentions.insert(std::move(m));
    return true;
}

enum class PredictionFormat { json, enumeration };

inline std::string to_string(PredictionFormat f) {
    return f == PredictionFormat::json ? "json" : "enumeration";
}

inline PredictionFormat prediction_format_from_string(const std::string& s) {
    if (s == "json") return PredictionFormat::json;
    if (s == "enumeration") return PredictionFormat::enumeration;
    throw ConfigError("unknown prediction format '" + s + "' (expected json or enumeration)");
}

namespace detail {

/// Extracts the first balanced top-level {...} block, honoring strings and
/// escapes, so prose around a model's JSON answer does not break parsing.
inline std::string first_json_object(const std::string& text) {
    const size_t start = text.find('{');
    if (start == std::string::npos) return {};
    int depth = 0;
    bool in_string = false, escaped = false;
    for (size_t i = start; i < text.size(); ++i) {
        const char c = text[i];
        if (in_string) {
            if (escaped) {
                escaped = false;
            } else if (c == '\\') {
                escaped = true;
            } else if (c == '"') {
                in_string = false;
            }
            continue;
        }
        if (c == '"') {
            in_string = true;
        } else if (c == '{') {
            ++depth;
        } else if (c == '}') {
            if (--depth == 0) return text.substr(start, i - start + 1);
        }
    }
    return {};
}

}  // namespace detail

/// Parses raw model output into a mention set. Never throws on content:
/// anything unparseable yields an empty (or partial) set plus warnings.
inline PredictionSet parse_prediction(const std::string& raw, PredictionFormat format,
                                      std::vector<std::string>* warnings = nullptr,
                                      const std::string& instance_id = "") {
    PredictionSet out;
    out.instance_id = instance_id;
    auto warn = [&](const std::string& msg) {
        if (warnings) warnings->push_back(msg);
    };

    if (format == PredictionFormat::json) {
        const std::string block = detail::first_json_object(raw);
        if (block.empty()) {
            warn("no JSON object found in output");
            return out;
        }
        nlohmann::json doc = nlohmann::json::parse(block, nullptr, false);
        if (doc.is_discarded() || !doc.is_object()) {
            warn("output is not a parseable JSON object");
            return out;
        }
        for (const auto& [key, value] : doc.items()) {
            if (!value.is_string()) {
                warn("non-string entity type for span '" + key + "' skipped");
                continue;
            }
            if (!add_mention(out, key, value.get<std::string>()))
                warn("empty span or type skipped");
        }
        if (out.mentions.empty() && doc.empty()) warn("JSON object contained no entities");
        return out;
    }

    // enumeration: each line "Type: span1, span2, ..."
    std::istringstream lines(raw);
    std::string line;
    bool any_line_parsed = false;
    while (std::getline(lines, line)) {
        const size_t colon = line.find(':');
        if (colon == std::string::npos) continue;
        const std::string etype = line.substr(0, colon);
        if (normalize_type(etype).empty()) continue;
        any_line_parsed = true;
        std::string rest = line.substr(colon + 1);
        size_t pos = 0;
        while (pos <= rest.size()) {
            const size_t comma = rest.find(',', pos);
            const std::string item =
                rest.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
            if (normalize_span(item).empty()) {
                if (comma == std::string::npos) break;
                pos = comma + 1;
                continue;
            }
            add_mention(out, item, etype);
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
    }
    if (!any_line_parsed && raw.find_first_not_of(" \t\r\n") != std::string::npos)
        warn("no 'Type: spans' lines found in output");
    return out;
}

/// Entity-level counts pooled over a corpus.
struct EvalReport {
    uint64_t tp = 0;
    uint64_t fp = 0;
    uint64_t fn = 0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;

    void finalize() {
        precision = (tp + fp) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
        recall = (tp + fn) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
        f1 = (precision + recall) == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"tp", tp},         {"fp", fp},
                              {"fn", fn},         {"precision", precision},
                              {"recall", recall}, {"f1", f1}};
    }
};

/// Micro-averaged F1: TP/FP/FN summed over all instances before computing
/// precision and recall. Exact (span, type) match only.
inline EvalReport micro_f1(const std::vector<PredictionSet>& predictions,
                           const std::vector<PredictionSet>& golds) {
    if (predictions.size() != golds.size())
        throw AlignmentError("predictions and golds differ in length: " +
                             std::to_string(predictions.size()) + " vs " +
                             std::to_string(golds.size()));
    EvalReport report;
    for (size_t i = 0; i < predictions.size(); ++i) {
        if (predictions[i].instance_id != golds[i].instance_id)
            throw AlignmentError("instance id mismatch at index " + std::to_string(i) + ": '" +
                                 predictions[i].instance_id + "' vs '" + golds[i].instance_id +
                                 "'");
        for (const EntityMention& m : predictions[i].mentions)
            golds[i].mentions.count(m) ? ++report.tp : ++report.fp;
        for (const EntityMention& m : golds[i].mentions)
            if (!predictions[i].mentions.count(m)) ++report.fn;
    }
    report.finalize();
    return report;
}

inline void check_same_instance(const PredictionSet& a, const PredictionSet& b) {
    if (a.instance_id != b.instance_id)
        throw AlignmentError("cannot ensemble predictions for different instances: '" +
                             a.instance_id + "' vs '" + b.instance_id + "'");
}

inline PredictionSet ensemble_union(const PredictionSet& a, const PredictionSet& b) {
    check_same_instance(a, b);
    PredictionSet out = a;
    out.mentions.insert(b.mentions.begin(), b.mentions.end());
    return out;
}

inline PredictionSet ensemble_intersection(const PredictionSet& a, const PredictionSet& b) {
    check_same_instance(a, b);
    PredictionSet out;
    out.instance_id = a.instance_id;
    for (const EntityMention& m : a.mentions)
        if (b.mentions.count(m)) out.mentions.insert(m);
    return out;
}

/// Keeps mentions appearing in at least `threshold` of the sets. threshold 1
/// is the union; threshold = |sets| is the intersection.
inline PredictionSet ensemble_vote(const std::vector<PredictionSet>& sets, size_t threshold) {
    if (sets.empty()) throw EmptyInput("ensemble_vote requires at least one prediction set");
    if (threshold < 1 || threshold > sets.size())
        throw InvalidValue("vote threshold must be in [1, " + std::to_string(sets.size()) + "]");
    for (size_t i = 1; i < sets.size(); ++i) check_same_instance(sets[0], sets[i]);

    std::map<EntityMention, size_t> counts;
    for (const PredictionSet& s : sets)
        for (const EntityMention& m : s.mentions) ++counts[m];
    PredictionSet out;
    out.instance_id = sets[0].instance_id;
    for (const auto& [mention, count] : counts)
        if (count >= threshold) out.mentions.insert(mention);
    return out;
}

// ---------------------------------------------------------------------------
// Corpus I/O
// ---------------------------------------------------------------------------

/// One labeled instance: text plus its gold mention set.
struct Instance {
    std::string instance_id;
    std::string text;
    PredictionSet gold;
};

namespace detail {

inline PredictionSet mentions_from_json(const nlohmann::json& doc, const std::string& path,
                                        size_t line_no) {
    PredictionSet set;
    if (!doc.contains("instance_id") || !doc["instance_id"].is_string())
        throw FormatError(path + " line " + std::to_string(line_no) +
                          ": missing string 'instance_id'");
    set.instance_id = doc["instance_id"].get<std::string>();
    if (doc.contains("mentions")) {
        if (!doc["mentions"].is_array())
            throw FormatError(path + " line " + std::to_string(line_no) +
                              ": 'mentions' must be an array");
        for (const auto& m : doc["mentions"]) {
            if (!m.is_object() || !m.contains("span") || !m.contains("type") ||
                !m["span"].is_string() || !m["type"].is_string())
                throw FormatError(path + " line " + std::to_string(line_no) +
                                  ": each mention needs string 'span' and 'type'");
            add_mention(set, m["span"].get<std::string>(), m["type"].get<std::string>());
        }
    }
    return set;
}

}  // namespace detail

/// Reads a JSON-lines dataset: {instance_id, text, mentions: [{span, type}]}.
inline std::vector<Instance> read_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset '" + path + "'");
    std::vector<Instance> out;
    std::set<std::string> seen;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        nlohmann::json doc = nlohmann::json::parse(line, nullptr, false);
        if (doc.is_discarded() || !doc.is_object())
            throw FormatError(path + " line " + std::to_string(line_no) + ": not a JSON object");
        Instance inst;
        inst.gold = detail::mentions_from_json(doc, path, line_no);
        inst.instance_id = inst.gold.instance_id;
        inst.text = doc.value("text", std::string{});
        if (!seen.insert(inst.instance_id).second)
            throw FormatError(path + " line " + std::to_string(line_no) +
                              ": duplicate instance_id '" + inst.instance_id + "'");
        out.push_back(std::move(inst));
    }
    return out;
}

/// Reads a JSON-lines predictions file: {instance_id, mentions, warnings?}.
inline std::vector<PredictionSet> read_predictions(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open predictions file '" + path + "'");
    std::vector<PredictionSet> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        nlohmann::json doc = nlohmann::json::parse(line, nullptr, false);
        if (doc.is_discarded() || !doc.is_object())
            throw FormatError(path + " line " + std::to_string(line_no) + ": not a JSON object");
        out.push_back(detail::mentions_from_json(doc, path, line_no));
    }
    return out;
}

/// Writes predictions as JSON-lines; per-instance warnings ride along when
/// present. Mentions are emitted in set order (deterministic).
inline void write_predictions(const std::vector<PredictionSet>& predictions,
                              const std::string& path,
                              const std::map<std::string, std::vector<std::string>>* warnings =
                                  nullptr) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    for (const PredictionSet& p : predictions) {
        nlohmann::json doc;
        doc["instance_id"] = p.instance_id;
        doc["mentions"] = nlohmann::json::array();
        for (const EntityMention& m : p.mentions)
            doc["mentions"].push_back({{"span", m.span}, {"type", m.etype}});
        if (warnings) {
            auto it = warnings->find(p.instance_id);
            if (it != warnings->end() && !it->second.empty()) doc["warnings"] = it->second;
        }
        out << doc.dump() << "\n";
    }
    if (!out) throw IoError("failed writing predictions to '" + path + "'");
}

/// Fixed-width, human-readable scoring summary for terminal output.
inline std::string format_eval_table(const std::map<std::string, EvalReport>& rows) {
    std::ostringstream out;
    const char* fmt_head = "%-24s %8s %8s %8s %10s %8s %8s\n";
    char buf[160];
    std::snprintf(buf, sizeof(buf), fmt_head, "system", "tp", "fp", "fn", "precision", "recall",
                  "f1");
    out << buf;
    out << std::string(80, '-') << "\n";
    for (const auto& [name, r] : rows) {
        std::snprintf(buf, sizeof(buf), "%-24s %8llu %8llu %8llu %10.4f %8.4f %8.4f\n",
                      name.c_str(), static_cast<unsigned long long>(r.tp),
                      static_cast<unsigned long long>(r.fp),
                      static_cast<unsigned long long>(r.fn), r.precision, r.recall, r.f1);
        out << buf;
    }
    return out.str();
}

}  // namespace samkit
