// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "samkit/embedding.hpp"
#include "samkit/errors.hpp"
#include "samkit/ner.hpp"
#include "samkit/rng.hpp"

namespace samkit {

/// One registered domain expert: its delta archive plus optional
/// precomputed domain embedding and cached selection scores.
struct ExpertRecord {
    std::string id;
    std::string domain_label;
    std::string delta_path;
    std::optional<std::string> embedding_path;
    std::optional<std::string> endpoint_url;  // per-expert routing, if any
    std::optional<Embedding> embedding;
    std::optional<float> similarity_score;
    std::optional<float> sampling_f1;
};

struct SelectionConfig {
    size_t m = 3;   // experts to select
    size_t k = 10;  // instances to sample for sampling evaluation
    uint64_t seed = 0;

    void validate(size_t num_experts) const {
        if (m < 1) throw ConfigError("m must be at least 1");
        if (m > num_experts)
            throw TooFewExperts("m = " + std::to_string(m) + " exceeds the " +
                                std::to_string(num_experts) + " registered experts");
        if (k < 1) throw ConfigError("k must be at least 1");
    }
};

enum class SelectionStrategy {
    domain_similarity,
    sampling_evaluation,
    eco_mode1,
    eco_mode2,
    eco_mode3,
};

inline std::string to_string(SelectionStrategy s) {
    switch (s) {
        case SelectionStrategy::domain_similarity: return "domain_similarity";
        case SelectionStrategy::sampling_evaluation: return "sampling_evaluation";
        case SelectionStrategy::eco_mode1: return "eco_mode1";
        case SelectionStrategy::eco_mode2: return "eco_mode2";
        case SelectionStrategy::eco_mode3: return "eco_mode3";
    }
    throw InternalError("unreachable selection strategy");
}

inline SelectionStrategy selection_strategy_from_string(const std::string& s) {
    if (s == "domain_similarity") return SelectionStrategy::domain_similarity;
    if (s == "sampling_evaluation") return SelectionStrategy::sampling_evaluation;
    if (s == "eco_mode1") return SelectionStrategy::eco_mode1;
    if (s == "eco_mode2") return SelectionStrategy::eco_mode2;
    if (s == "eco_mode3") return SelectionStrategy::eco_mode3;
    throw ConfigError("unknown selection strategy '" + s + "'");
}

/// Outcome of one selection strategy: the full descending ranking plus the
/// ids actually chosen (the first min(m, available) entries).
struct SelectionResult {
    SelectionStrategy strategy = SelectionStrategy::domain_similarity;
    std::vector<std::pair<std::string, float>> ranked;  // full ranking, best first
    std::vector<std::string> selected;

    nlohmann::json to_json() const {
        nlohmann::json ranking = nlohmann::json::array();
        for (const auto& [id, score] : ranked)
            ranking.push_back({{"id", id}, {"score", score}});
        return nlohmann::json{{"strategy", samkit::to_string(strategy)},
                              {"ranking", ranking},
                              {"selected", selected}};
    }
};

namespace detail {

/// Descending by score; ties broken by expert id ascending (determinism).
inline void sort_ranking(std::vector<std::pair<std::string, float>>& ranked) {
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
}

inline SelectionResult make_result(SelectionStrategy strategy,
                                   std::vector<std::pair<std::string, float>> ranked, size_t m) {
    SelectionResult r;
    r.strategy = strategy;
    sort_ranking(ranked);
    r.ranked = std::move(ranked);
    const size_t take = std::min(m, r.ranked.size());
    for (size_t i = 0; i < take; ++i) r.selected.push_back(r.ranked[i].first);
    return r;
}

}  // namespace detail

/// Domain-similarity selection: target centroid h_t against each expert's
/// domain embedding h_e, ranked by cosine similarity.
inline SelectionResult rank_by_domain_similarity(const std::vector<Embedding>& target_embeddings,
                                                 const std::vector<ExpertRecord>& experts,
                                                 size_t m) {
    if (experts.empty()) throw EmptyInput("no experts registered");
    if (m < 1) throw ConfigError("m must be at least 1");
    if (m > experts.size())
        throw TooFewExperts("m = " + std::to_string(m) + " exceeds the " +
                            std::to_string(experts.size()) + " registered experts");
    const Embedding h_t = centroid(target_embeddings);

    std::vector<std::pair<std::string, float>> ranked;
    ranked.reserve(experts.size());
    for (const ExpertRecord& e : experts) {
        if (!e.embedding)
            throw InvalidValue("expert '" + e.id + "' has no embedding for domain similarity");
        ranked.emplace_back(e.id, cosine_similarity(h_t, *e.embedding));
    }
    return detail::make_result(SelectionStrategy::domain_similarity, std::move(ranked), m);
}

/// Uniform sample of k instances without replacement (the whole corpus, in
/// order, when k covers it). Deterministic under seed.
template <typename T>
std::vector<T> sample_instances(const std::vector<T>& corpus, size_t k, uint64_t seed) {
    if (corpus.empty()) throw EmptyInput("cannot sample from an empty corpus");
    std::vector<T> out;
    for (size_t i : sample_indices(corpus.size(), k, seed)) out.push_back(corpus[i]);
    return out;
}

/// Majority-vote pseudo-labels: a mention survives iff predicted by a strict
/// majority (⌊n/2⌋+1) of experts. Shares the voting kernel with ensemble_vote.
inline PredictionSet build_pseudo_labels(const std::vector<PredictionSet>& per_expert,
                                         size_t n_experts) {
    if (per_expert.empty()) throw EmptyInput("no expert predictions to vote over");
    if (n_experts != per_expert.size())
        throw InvalidValue("n_experts = " + std::to_string(n_experts) + " but " +
                           std::to_string(per_expert.size()) + " prediction sets given");
    return ensemble_vote(per_expert, n_experts / 2 + 1);
}

/// Sampling-evaluation selection: pseudo-labels per instance by majority
/// vote, then each expert scored by corpus-level micro-F1 against them.
/// predictions[e][i] is expert e's prediction for sampled instance i.
inline SelectionResult rank_by_sampling_eval(
    const std::vector<ExpertRecord>& experts,
    const std::vector<std::vector<PredictionSet>>& predictions, size_t m) {
    if (experts.empty()) throw EmptyInput("no experts registered");
    if (predictions.size() != experts.size())
        throw AlignmentError("prediction rows (" + std::to_string(predictions.size()) +
                             ") do not match experts (" + std::to_string(experts.size()) + ")");
    if (m < 1) throw ConfigError("m must be at least 1");
    if (m > experts.size())
        throw TooFewExperts("m = " + std::to_string(m) + " exceeds the " +
                            std::to_string(experts.size()) + " registered experts");
    const size_t n_instances = predictions[0].size();
    if (n_instances == 0) throw EmptyInput("sampling evaluation needs at least one instance");
    for (size_t e = 1; e < predictions.size(); ++e)
        if (predictions[e].size() != n_instances)
            throw AlignmentError("expert '" + experts[e].id + "' predicted " +
                                 std::to_string(predictions[e].size()) + " of " +
                                 std::to_string(n_instances) + " instances");

    std::vector<PredictionSet> pseudo;
    pseudo.reserve(n_instances);
    for (size_t i = 0; i < n_instances; ++i) {
        std::vector<PredictionSet> column;
        column.reserve(experts.size());
        for (size_t e = 0; e < experts.size(); ++e) column.push_back(predictions[e][i]);
        pseudo.push_back(build_pseudo_labels(column, experts.size()));
    }

    std::vector<std::pair<std::string, float>> ranked;
    ranked.reserve(experts.size());
    for (size_t e = 0; e < experts.size(); ++e) {
        const EvalReport report = micro_f1(predictions[e], pseudo);
        ranked.emplace_back(experts[e].id, static_cast<float>(report.f1));
    }
    return detail::make_result(SelectionStrategy::sampling_evaluation, std::move(ranked), m);
}

/// Economic combination of the two strategies' results.
///   Mode 1: intersection of the two selected sets (DS order); may be < m.
///   Mode 2: min-max normalize each full score list, combine by mean, top-m.
///   Mode 3: interleave the rankings DS₁, SE₁, DS₂, SE₂, …, dedupe, take m.
inline SelectionResult eco_combine(const SelectionResult& ds, const SelectionResult& se, int mode,
                                   size_t m) {
    auto universe = [](const SelectionResult& r) {
        std::set<std::string> ids;
        for (const auto& [id, score] : r.ranked) ids.insert(id);
        return ids;
    };
    if (universe(ds) != universe(se))
        throw InvalidValue("eco_combine inputs rank different expert universes");
    if (m < 1) throw ConfigError("m must be at least 1");

    SelectionResult out;
    switch (mode) {
        case 1: {
            out.strategy = SelectionStrategy::eco_mode1;
            std::set<std::string> se_set(se.selected.begin(), se.selected.end());
            for (const std::string& id : ds.selected) {
                if (!se_set.count(id)) continue;
                out.selected.push_back(id);
                for (const auto& [rid, score] : ds.ranked)
                    if (rid == id) out.ranked.emplace_back(rid, score);
            }
            if (out.selected.empty())
                throw EmptyIntersection("mode 1 selected-set intersection is empty");
            return out;
        }
        case 2: {
            auto normalized = [](const SelectionResult& r) {
                float lo = r.ranked.front().second, hi = r.ranked.front().second;
                for (const auto& [id, s] : r.ranked) {
                    lo = std::min(lo, s);
                    hi = std::max(hi, s);
                }
                std::map<std::string, float> norm;
                for (const auto& [id, s] : r.ranked)
                    norm[id] = (hi == lo) ? 0.5f : (s - lo) / (hi - lo);
                return norm;
            };
            if (ds.ranked.empty()) throw EmptyInput("eco_combine needs non-empty rankings");
            const auto nds = normalized(ds);
            const auto nse = normalized(se);
            std::vector<std::pair<std::string, float>> combined;
            for (const auto& [id, s] : nds)
                combined.emplace_back(id, (s + nse.at(id)) / 2.0f);
            SelectionResult r = detail::make_result(SelectionStrategy::eco_mode2,
                                                    std::move(combined), m);
            return r;
        }
        case 3: {
            out.strategy = SelectionStrategy::eco_mode3;
            std::set<std::string> taken;
            for (size_t i = 0; i < std::max(ds.ranked.size(), se.ranked.size()); ++i) {
                for (const SelectionResult* src : {&ds, &se}) {
                    if (i >= src->ranked.size()) continue;
                    const auto& [id, score] = src->ranked[i];
                    if (taken.insert(id).second) out.ranked.emplace_back(id, score);
                }
            }
            const size_t take = std::min(m, out.ranked.size());
            for (size_t i = 0; i < take; ++i) out.selected.push_back(out.ranked[i].first);
            return out;
        }
        default:
            throw ConfigError("eco mode must be 1, 2, or 3");
    }
}

// ---------------------------------------------------------------------------
// Registry I/O
// ---------------------------------------------------------------------------

/// Registry file: JSON array of {id, domain_label, delta_path,
/// embedding_path?, endpoint_url?}. Unknown keys are tolerated.
inline std::vector<ExpertRecord> load_expert_registry(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open registry '" + path + "'");
    nlohmann::json doc = nlohmann::json::parse(in, nullptr, false);
    if (doc.is_discarded() || !doc.is_array())
        throw FormatError("registry '" + path + "' must be a JSON array");

    std::vector<ExpertRecord> out;
    std::set<std::string> ids;
    for (const auto& entry : doc) {
        if (!entry.is_object()) throw FormatError("registry entries must be objects");
        ExpertRecord rec;
        for (const char* key : {"id", "domain_label", "delta_path"})
            if (!entry.contains(key) || !entry[key].is_string() ||
                entry[key].get<std::string>().empty())
                throw FormatError("registry entry missing string field '" + std::string(key) +
                                  "'");
        rec.id = entry["id"].get<std::string>();
        rec.domain_label = entry["domain_label"].get<std::string>();
        rec.delta_path = entry["delta_path"].get<std::string>();
        if (entry.contains("embedding_path") && entry["embedding_path"].is_string())
            rec.embedding_path = entry["embedding_path"].get<std::string>();
        if (entry.contains("endpoint_url") && entry["endpoint_url"].is_string())
            rec.endpoint_url = entry["endpoint_url"].get<std::string>();
        if (!ids.insert(rec.id).second)
            throw FormatError("registry '" + path + "' has duplicate expert id '" + rec.id + "'");
        out.push_back(std::move(rec));
    }
    return out;
}

/// Loads each expert's embedding from its embedding_path. A file holding
/// several vectors contributes their centroid (Eq. 2 semantics).
inline void attach_expert_embeddings(std::vector<ExpertRecord>& experts) {
    for (ExpertRecord& e : experts) {
        if (e.embedding) continue;
        if (!e.embedding_path)
            throw ConfigError("expert '" + e.id +
                              "' has no embedding_path; domain similarity needs one");
        EmbeddingTable table = load_embeddings(*e.embedding_path);
        if (table.vectors.empty())
            throw FormatError("embeddings file '" + *e.embedding_path + "' is empty");
        e.embedding = table.vectors.size() == 1 ? table.vectors[0] : centroid(table.vectors);
    }
}

}  // namespace samkit
