// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "samkit/archive.hpp"
#include "samkit/client.hpp"
#include "samkit/embedding.hpp"
#include "samkit/errors.hpp"
#include "samkit/kmeans.hpp"
#include "samkit/merge.hpp"
#include "samkit/ner.hpp"
#include "samkit/rng.hpp"
#include "samkit/selection.hpp"
#include "samkit/tensor.hpp"

namespace samkit {

// ---------------------------------------------------------------------------
// Pipeline configuration
// ---------------------------------------------------------------------------

enum class EnsembleMode {
    set_union,
    intersection,
    ds_only,
    se_only,
    eco1,
    eco2,
    eco3,
};

inline std::string to_string(EnsembleMode m) {
    switch (m) {
        case EnsembleMode::set_union: return "union";
        case EnsembleMode::intersection: return "intersection";
        case EnsembleMode::ds_only: return "ds_only";
        case EnsembleMode::se_only: return "se_only";
        case EnsembleMode::eco1: return "eco1";
        case EnsembleMode::eco2: return "eco2";
        case EnsembleMode::eco3: return "eco3";
    }
    throw InternalError("unreachable ensemble mode");
}

inline EnsembleMode ensemble_mode_from_string(const std::string& s) {
    if (s == "union") return EnsembleMode::set_union;
    if (s == "intersection") return EnsembleMode::intersection;
    if (s == "ds_only") return EnsembleMode::ds_only;
    if (s == "se_only") return EnsembleMode::se_only;
    if (s == "eco1") return EnsembleMode::eco1;
    if (s == "eco2") return EnsembleMode::eco2;
    if (s == "eco3") return EnsembleMode::eco3;
    throw ConfigError("unknown ensemble mode '" + s + "'");
}

inline bool is_eco(EnsembleMode m) {
    return m == EnsembleMode::eco1 || m == EnsembleMode::eco2 || m == EnsembleMode::eco3;
}

inline int eco_mode_number(EnsembleMode m) {
    switch (m) {
        case EnsembleMode::eco1: return 1;
        case EnsembleMode::eco2: return 2;
        case EnsembleMode::eco3: return 3;
        default: throw InvalidValue("ensemble mode '" + to_string(m) + "' is not economic");
    }
}

enum class WeightingMode { uniform, mode1, mode2 };

inline std::string to_string(WeightingMode m) {
    switch (m) {
        case WeightingMode::uniform: return "uniform";
        case WeightingMode::mode1: return "mode1";
        case WeightingMode::mode2: return "mode2";
    }
    throw InternalError("unreachable weighting mode");
}

inline WeightingMode weighting_mode_from_string(const std::string& s) {
    if (s == "uniform") return WeightingMode::uniform;
    if (s == "mode1") return WeightingMode::mode1;
    if (s == "mode2") return WeightingMode::mode2;
    throw ConfigError("unknown weighting mode '" + s + "'");
}

/// One manifest for a full pipeline run. Loaded from JSON; CLI flags override
/// individual fields afterwards.
struct PipelineConfig {
    std::string registry_path;
    std::string base_model_path;     // optional: materialize base+delta models
    std::string target_corpus_path;
    std::string embeddings_file;     // target embeddings from a file...
    EndpointConfig endpoint;         // ...or from a live endpoint (base_url set)
    bool mock = false;               // ...or from the deterministic mock backend
    std::string mock_profiles_path;  // per-expert behavior profiles (mock mode)
    SelectionConfig selection;       // m = 3, k = 10 defaults
    MergeRecipe merge;
    EnsembleMode ensemble = EnsembleMode::set_union;
    WeightingMode weighting = WeightingMode::uniform;
    std::optional<std::size_t> n_splits;  // target-corpus clustering
    std::string output_dir = "out";
    std::uint64_t seed = 0;

    void validate() const {
        if (registry_path.empty()) throw ConfigError("config needs a registry path");
        if (target_corpus_path.empty()) {
            throw ConfigError("config needs a target corpus path");
        }
        if (output_dir.empty()) throw ConfigError("config needs an output directory");
        const bool file_source = !embeddings_file.empty();
        const bool live_source = mock || !endpoint.base_url.empty();
        if (file_source == live_source) {
            throw ConfigError(
                "config needs exactly one embeddings source: an embeddings file, "
                "a live endpoint, or mock mode");
        }
        if (mock && !endpoint.base_url.empty()) {
            throw ConfigError("mock mode and a live endpoint are mutually exclusive");
        }
        if (mock && mock_profiles_path.empty()) {
            throw ConfigError("mock mode needs a mock profiles file");
        }
        if (!mock && !endpoint.base_url.empty()) endpoint.validate();
        if (n_splits && *n_splits < 1) {
            throw ConfigError("n_splits must be at least 1 when given");
        }
        if (selection.m < 1) throw ConfigError("m must be at least 1");
        if (selection.k < 1) throw ConfigError("k must be at least 1");
    }

    nlohmann::json to_json() const {
        nlohmann::json doc{{"registry", registry_path},
                           {"target_corpus", target_corpus_path},
                           {"mock", mock},
                           {"selection", {{"m", selection.m}, {"k", selection.k}}},
                           {"merge", merge.to_json()},
                           {"ensemble", samkit::to_string(ensemble)},
                           {"weighting", samkit::to_string(weighting)},
                           {"output_dir", output_dir},
                           {"seed", seed}};
        if (!base_model_path.empty()) doc["base_model"] = base_model_path;
        if (!embeddings_file.empty()) doc["embeddings_file"] = embeddings_file;
        if (!endpoint.base_url.empty()) doc["endpoint"] = endpoint.to_json();
        if (!mock_profiles_path.empty()) doc["mock_profiles"] = mock_profiles_path;
        if (n_splits) doc["n_splits"] = *n_splits;
        return doc;
    }

    static PipelineConfig from_json(const nlohmann::json& doc) {
        if (!doc.is_object()) throw ConfigError("pipeline config must be a JSON object");
        static const std::vector<std::string> known = {
            "registry",   "base_model", "target_corpus", "embeddings_file",
            "endpoint",   "mock",       "mock_profiles", "selection",
            "merge",      "ensemble",   "weighting",     "n_splits",
            "output_dir", "seed"};
        for (const auto& [key, value] : doc.items()) {
            if (std::find(known.begin(), known.end(), key) == known.end()) {
                throw ConfigError("unknown pipeline config key '" + key + "'");
            }
        }
        PipelineConfig cfg;
        auto text = [&](const char* key, std::string& out) {
            if (!doc.contains(key)) return;
            if (!doc.at(key).is_string()) {
                throw ConfigError(std::string("config key '") + key +
                                  "' must be a string");
            }
            out = doc.at(key).get<std::string>();
        };
        text("registry", cfg.registry_path);
        text("base_model", cfg.base_model_path);
        text("target_corpus", cfg.target_corpus_path);
        text("embeddings_file", cfg.embeddings_file);
        text("mock_profiles", cfg.mock_profiles_path);
        text("output_dir", cfg.output_dir);
        if (doc.contains("endpoint")) {
            cfg.endpoint = EndpointConfig::from_json(doc.at("endpoint"));
        }
        if (doc.contains("mock")) {
            if (!doc.at("mock").is_boolean()) {
                throw ConfigError("config key 'mock' must be a boolean");
            }
            cfg.mock = doc.at("mock").get<bool>();
        }
        if (doc.contains("selection")) {
            const auto& sel = doc.at("selection");
            if (!sel.is_object()) throw ConfigError("'selection' must be an object");
            for (const auto& [key, value] : sel.items()) {
                if (key != "m" && key != "k") {
                    throw ConfigError("unknown selection key '" + key + "'");
                }
                if (!value.is_number_integer() || value.get<std::int64_t>() < 1) {
                    throw ConfigError("selection " + key + " must be a positive integer");
                }
            }
            if (sel.contains("m")) cfg.selection.m = sel.at("m").get<std::size_t>();
            if (sel.contains("k")) cfg.selection.k = sel.at("k").get<std::size_t>();
        }
        if (doc.contains("merge")) cfg.merge = MergeRecipe::from_json(doc.at("merge"));
        if (doc.contains("ensemble")) {
            if (!doc.at("ensemble").is_string()) {
                throw ConfigError("config key 'ensemble' must be a string");
            }
            cfg.ensemble = ensemble_mode_from_string(doc.at("ensemble").get<std::string>());
        }
        if (doc.contains("weighting")) {
            if (!doc.at("weighting").is_string()) {
                throw ConfigError("config key 'weighting' must be a string");
            }
            cfg.weighting =
                weighting_mode_from_string(doc.at("weighting").get<std::string>());
        }
        if (doc.contains("n_splits")) {
            const auto& v = doc.at("n_splits");
            if (!v.is_number_integer() || v.get<std::int64_t>() < 1) {
                throw ConfigError("n_splits must be a positive integer");
            }
            cfg.n_splits = v.get<std::size_t>();
        }
        if (doc.contains("seed")) {
            const auto& v = doc.at("seed");
            if (!v.is_number_unsigned() &&
                !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
                throw ConfigError("seed must be a non-negative integer");
            }
            cfg.seed = v.get<std::uint64_t>();
        }
        return cfg;
    }
};

inline PipelineConfig load_pipeline_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("config '" + path + "' is not valid JSON: " + e.what());
    }
    return PipelineConfig::from_json(doc);
}

// ---------------------------------------------------------------------------
// Shared stage plumbing
// ---------------------------------------------------------------------------

namespace detail {

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create output directory '" + dir + "': " + ec.message());
    }
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw IoError("failed writing '" + path + "'");
}

inline void write_json_file(const std::string& path, const nlohmann::json& doc) {
    write_text_file(path, doc.dump(2) + "\n");
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path + "' is not valid JSON: " + e.what());
    }
    return doc;
}

/// File-name prefix for a cluster's artifacts: "" without clustering,
/// "cluster<i>." with it. Keyed off whether clustering was requested, not how
/// many clusters survived, so select/merge/run always agree on names.
inline std::string cluster_prefix(const PipelineConfig& cfg, std::size_t cluster) {
    if (!cfg.n_splits || *cfg.n_splits <= 1) return "";
    return "cluster" + std::to_string(cluster) + ".";
}

}  // namespace detail

/// Instruction prompt for one target instance. The trailing marker is what
/// lets the deterministic mock backend identify the instance.
inline std::string build_ner_prompt(const Instance& inst) {
    return "Identify the named entities in the text below and reply with a JSON "
           "object mapping each entity span to its entity type.\n"
           "Text: " + inst.text + "\n" + format_instance_marker(inst.instance_id);
}

/// Everything the stages need in memory: registry, corpus, mock profiles.
struct PipelineContext {
    PipelineConfig cfg;
    std::vector<ExpertRecord> experts;
    std::vector<Instance> corpus;
    std::map<std::string, MockProfile> profiles;  // mock mode only

    const ExpertRecord& expert(const std::string& id) const {
        for (const auto& e : experts) {
            if (e.id == id) return e;
        }
        throw InternalError("expert '" + id + "' vanished from the registry");
    }
};

inline PipelineContext load_pipeline_context(const PipelineConfig& cfg) {
    cfg.validate();
    PipelineContext ctx;
    ctx.cfg = cfg;
    ctx.experts = load_expert_registry(cfg.registry_path);
    if (ctx.experts.empty()) {
        throw FormatError("registry '" + cfg.registry_path + "' lists no experts");
    }
    attach_expert_embeddings(ctx.experts);
    cfg.selection.validate(ctx.experts.size());
    ctx.corpus = read_dataset(cfg.target_corpus_path);
    if (ctx.corpus.empty()) {
        throw EmptyInput("target corpus '" + cfg.target_corpus_path + "' is empty");
    }
    if (cfg.mock) {
        ctx.profiles = load_mock_profiles(cfg.mock_profiles_path);
        for (const auto& e : ctx.experts) {
            if (!ctx.profiles.count(e.id)) {
                throw ConfigError("mock profiles file '" + cfg.mock_profiles_path +
                                  "' has no profile for expert '" + e.id + "'");
            }
        }
    }
    return ctx;
}

/// Per-instance embeddings for the target corpus, aligned with corpus order.
/// File sources align by instance_id when ids are present, by position
/// otherwise; endpoint/mock sources embed the instance texts.
inline std::vector<Embedding> target_embeddings(const PipelineContext& ctx) {
    const auto& cfg = ctx.cfg;
    if (!cfg.embeddings_file.empty()) {
        EmbeddingTable table = load_embeddings(cfg.embeddings_file);
        if (table.vectors.empty()) {
            throw FormatError("embeddings file '" + cfg.embeddings_file + "' is empty");
        }
        const bool has_ids = std::any_of(table.ids.begin(), table.ids.end(),
                                         [](const std::string& id) { return !id.empty(); });
        if (has_ids) {
            std::map<std::string, std::size_t> by_id;
            for (std::size_t i = 0; i < table.ids.size(); ++i) {
                if (table.ids[i].empty()) {
                    throw FormatError("embeddings file '" + cfg.embeddings_file +
                                      "' mixes labeled and unlabeled vectors");
                }
                by_id[table.ids[i]] = i;
            }
            std::vector<Embedding> out;
            out.reserve(ctx.corpus.size());
            for (const auto& inst : ctx.corpus) {
                auto it = by_id.find(inst.instance_id);
                if (it == by_id.end()) {
                    throw AlignmentError("embeddings file '" + cfg.embeddings_file +
                                         "' has no vector for instance '" +
                                         inst.instance_id + "'");
                }
                out.push_back(table.vectors[it->second]);
            }
            return out;
        }
        if (table.vectors.size() != ctx.corpus.size()) {
            throw AlignmentError(
                "embeddings file '" + cfg.embeddings_file + "' holds " +
                std::to_string(table.vectors.size()) + " vectors for " +
                std::to_string(ctx.corpus.size()) + " target instances");
        }
        return table.vectors;
    }
    std::vector<std::string> texts;
    texts.reserve(ctx.corpus.size());
    for (const auto& inst : ctx.corpus) texts.push_back(inst.text);
    if (cfg.mock) {
        MockBackend backend;  // embedding is profile-independent
        return backend.embed(texts);
    }
    InferenceClient client(cfg.endpoint);
    return client.embed(texts);
}

/// Runs one simulated or remote model over a set of instances and parses the
/// generations into prediction sets. Parse warnings are collected per
/// instance; transport failures abort.
inline std::vector<PredictionSet> predict_instances(
    const PipelineContext& ctx, const std::optional<MockProfile>& mock_profile,
    const std::optional<std::string>& endpoint_override,
    const std::vector<Instance>& instances,
    std::map<std::string, std::vector<std::string>>* warnings = nullptr) {
    std::vector<GenerationRequest> reqs;
    reqs.reserve(instances.size());
    for (const auto& inst : instances) {
        GenerationRequest req;
        req.prompt = build_ner_prompt(inst);
        reqs.push_back(std::move(req));
    }

    std::vector<BatchItem> items;
    if (ctx.cfg.mock) {
        if (!mock_profile) throw InternalError("mock prediction without a profile");
        MockBackend backend;
        backend.profile = *mock_profile;
        for (const auto& inst : instances) backend.instances[inst.instance_id] = inst;
        EndpointConfig mock_cfg;
        mock_cfg.mode = EndpointMode::mock;
        InferenceClient client(mock_cfg, std::move(backend));
        items = client.batch_generate(reqs);
    } else {
        EndpointConfig cfg = ctx.cfg.endpoint;
        if (endpoint_override) cfg.base_url = *endpoint_override;
        InferenceClient client(cfg);
        items = client.batch_generate(reqs);
    }

    std::vector<PredictionSet> out;
    out.reserve(instances.size());
    for (std::size_t i = 0; i < instances.size(); ++i) {
        if (!items[i].ok) {
            throw Error(items[i].error_kind, "inference on instance '" +
                                                 instances[i].instance_id +
                                                 "' failed: " + items[i].error_message);
        }
        std::vector<std::string> warn;
        out.push_back(parse_prediction(items[i].text, PredictionFormat::json, &warn,
                                       instances[i].instance_id));
        if (warnings && !warn.empty()) {
            auto& bucket = (*warnings)[instances[i].instance_id];
            bucket.insert(bucket.end(), warn.begin(), warn.end());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// select: rank experts per target (cluster) by both strategies
// ---------------------------------------------------------------------------

struct ClusterSelection {
    std::size_t cluster = 0;
    std::vector<std::size_t> members;  // corpus indices covered by this cluster
    std::vector<std::string> sampled_ids;
    SelectionResult ds;
    SelectionResult se;
    std::string ds_path;
    std::string se_path;
};

struct SelectOutcome {
    std::vector<ClusterSelection> clusters;
    std::vector<std::string> warnings;
};

inline SelectOutcome cmd_select(const PipelineConfig& cfg) {
    const auto ctx = load_pipeline_context(cfg);
    detail::ensure_dir(cfg.output_dir);
    const auto embeds = target_embeddings(ctx);

    std::vector<std::vector<std::size_t>> groups;
    if (cfg.n_splits && *cfg.n_splits > 1) {
        const auto assignment =
            cluster_split(embeds, *cfg.n_splits, derive_seed(cfg.seed, "cluster"));
        groups.assign(*cfg.n_splits, {});
        for (std::size_t i = 0; i < assignment.size(); ++i) {
            groups[assignment[i]].push_back(i);
        }
        groups.erase(std::remove_if(groups.begin(), groups.end(),
                                    [](const auto& g) { return g.empty(); }),
                     groups.end());
    } else {
        groups.resize(1);
        groups[0].resize(ctx.corpus.size());
        std::iota(groups[0].begin(), groups[0].end(), std::size_t{0});
    }

    SelectOutcome out;
    const auto fs_base = std::filesystem::path(cfg.output_dir);
    for (std::size_t g = 0; g < groups.size(); ++g) {
        ClusterSelection sel;
        sel.cluster = g;
        sel.members = groups[g];
        const std::string prefix = detail::cluster_prefix(cfg, g);

        std::vector<Embedding> member_embeds;
        std::vector<Instance> member_insts;
        member_embeds.reserve(sel.members.size());
        member_insts.reserve(sel.members.size());
        for (const std::size_t i : sel.members) {
            member_embeds.push_back(embeds[i]);
            member_insts.push_back(ctx.corpus[i]);
        }

        sel.ds = rank_by_domain_similarity(member_embeds, ctx.experts, cfg.selection.m);

        if (cfg.selection.k > member_insts.size()) {
            out.warnings.push_back(
                "k = " + std::to_string(cfg.selection.k) + " exceeds the " +
                std::to_string(member_insts.size()) +
                (groups.size() > 1 ? " instances in cluster " + std::to_string(g)
                                   : " target instances") +
                "; sampling evaluation uses all of them");
        }
        const auto sampled =
            sample_instances(member_insts, cfg.selection.k,
                             derive_seed(cfg.seed, "sample:" + std::to_string(g)));
        for (const auto& inst : sampled) sel.sampled_ids.push_back(inst.instance_id);

        std::vector<std::vector<PredictionSet>> predictions;
        predictions.reserve(ctx.experts.size());
        for (const auto& expert : ctx.experts) {
            std::optional<MockProfile> profile;
            if (cfg.mock) profile = ctx.profiles.at(expert.id);
            predictions.push_back(
                predict_instances(ctx, profile, expert.endpoint_url, sampled));
        }
        sel.se = rank_by_sampling_eval(ctx.experts, predictions, cfg.selection.m);

        std::vector<std::string> member_ids;
        for (const std::size_t i : sel.members) {
            member_ids.push_back(ctx.corpus[i].instance_id);
        }
        auto ds_doc = sel.ds.to_json();
        ds_doc["cluster"] = g;
        ds_doc["instance_ids"] = member_ids;
        auto se_doc = sel.se.to_json();
        se_doc["cluster"] = g;
        se_doc["instance_ids"] = member_ids;
        se_doc["sampled_instance_ids"] = sel.sampled_ids;

        sel.ds_path = (fs_base / (prefix + "ds_selection.json")).string();
        sel.se_path = (fs_base / (prefix + "se_selection.json")).string();
        detail::write_json_file(sel.ds_path, ds_doc);
        detail::write_json_file(sel.se_path, se_doc);
        out.clusters.push_back(std::move(sel));
    }
    return out;
}

// ---------------------------------------------------------------------------
// merge: build the task-specific merged delta archives
// ---------------------------------------------------------------------------

namespace detail {

inline SelectionResult selection_from_json(const nlohmann::json& doc,
                                           const std::string& path) {
    if (!doc.is_object() || !doc.contains("strategy") || !doc.contains("ranking") ||
        !doc.contains("selected")) {
        throw FormatError("selection file '" + path +
                          "' needs strategy, ranking, and selected fields");
    }
    SelectionResult r;
    r.strategy = selection_strategy_from_string(doc.at("strategy").get<std::string>());
    for (const auto& row : doc.at("ranking")) {
        if (!row.is_object() || !row.contains("id") || !row.contains("score")) {
            throw FormatError("selection file '" + path +
                              "' has a malformed ranking row");
        }
        r.ranked.emplace_back(row.at("id").get<std::string>(),
                              row.at("score").get<float>());
    }
    for (const auto& id : doc.at("selected")) {
        r.selected.push_back(id.get<std::string>());
    }
    if (r.selected.empty()) {
        throw FormatError("selection file '" + path + "' selects no experts");
    }
    return r;
}

/// Expert weights for one merge per the configured weighting mode. Mode 2
/// scales by each expert's selection score; uniform keeps the recipe's own
/// weights (usually empty, meaning 1.0 each).
inline std::vector<float> merge_weights(const PipelineConfig& cfg,
                                        const SelectionResult& selection) {
    switch (cfg.weighting) {
        case WeightingMode::uniform: return cfg.merge.weights;
        case WeightingMode::mode1: return weights_mode1(selection.selected.size());
        case WeightingMode::mode2: {
            std::map<std::string, float> score_by_id;
            for (const auto& [id, score] : selection.ranked) score_by_id[id] = score;
            std::vector<float> scores;
            scores.reserve(selection.selected.size());
            for (const auto& id : selection.selected) {
                auto it = score_by_id.find(id);
                if (it == score_by_id.end()) {
                    throw FormatError("selection ranks lack a score for expert '" + id +
                                      "'");
                }
                scores.push_back(it->second);
            }
            return weights_mode2(scores);
        }
    }
    throw InternalError("unreachable weighting mode");
}

}  // namespace detail

struct MergedModel {
    std::string name;  // "ds", "se", or "eco"
    std::vector<std::string> experts;
    std::vector<float> weights;  // resolved weights, empty = uniform 1.0
    std::string archive_path;
    std::string model_path;  // base + delta materialization, when base given
    MergeReport stats;
};

struct ClusterMerge {
    std::size_t cluster = 0;
    std::vector<MergedModel> models;
};

struct MergeOutcome {
    std::vector<ClusterMerge> clusters;
    std::string report_path;
};

/// Merges the selected experts' deltas for one model slot.
inline MergedModel merge_one_model(const PipelineContext& ctx,
                                   const SelectionResult& selection,
                                   const std::string& name,
                                   const std::string& archive_path,
                                   const std::string& model_path,
                                   std::uint64_t merge_seed) {
    MergedModel out;
    out.name = name;
    out.experts = selection.selected;
    out.archive_path = archive_path;

    MergeRecipe recipe = ctx.cfg.merge;
    recipe.weights = detail::merge_weights(ctx.cfg, selection);
    recipe.seed = merge_seed;
    out.weights = recipe.weights;

    std::vector<DeltaSet> deltas;
    deltas.reserve(selection.selected.size());
    for (const auto& id : selection.selected) {
        DeltaSet delta;
        delta.tensors = load_tensor_archive(ctx.expert(id).delta_path);
        delta.origin = id;
        deltas.push_back(std::move(delta));
    }

    auto [merged, stats] = merge(recipe, deltas);
    out.stats = std::move(stats);

    std::string experts_joined;
    for (const auto& id : selection.selected) {
        if (!experts_joined.empty()) experts_joined.push_back(',');
        experts_joined += id;
    }
    merged.tensors.metadata["experts"] = experts_joined;
    merged.tensors.metadata["method"] = to_string(recipe.method);
    save_tensor_archive(merged.tensors, archive_path);

    if (!model_path.empty()) {
        const TensorMap base = load_tensor_archive(ctx.cfg.base_model_path);
        // λ is already folded into the merged delta; apply it verbatim.
        TensorMap applied = apply_delta(base, merged, 1.0f);
        save_tensor_archive(applied, model_path);
        out.model_path = model_path;
    }
    return out;
}

/// Merge with explicit selection files, one (ds, se) pair per cluster.
inline MergeOutcome cmd_merge(
    const PipelineConfig& cfg,
    const std::vector<std::pair<std::string, std::string>>& selection_files) {
    const auto ctx = load_pipeline_context(cfg);
    detail::ensure_dir(cfg.output_dir);
    if (selection_files.empty()) {
        throw ConfigError("merge needs at least one pair of selection files");
    }

    MergeOutcome out;
    nlohmann::json report_models = nlohmann::json::array();
    const auto fs_base = std::filesystem::path(cfg.output_dir);
    for (std::size_t g = 0; g < selection_files.size(); ++g) {
        const std::string prefix = detail::cluster_prefix(cfg, g);
        const auto& [ds_path, se_path] = selection_files[g];
        const auto ds =
            detail::selection_from_json(detail::read_json_file(ds_path), ds_path);
        const auto se =
            detail::selection_from_json(detail::read_json_file(se_path), se_path);

        // A shared per-cluster seed keeps the DS and SE merges byte-identical
        // whenever their selections agree.
        const std::uint64_t merge_seed =
            derive_seed(cfg.seed, "merge:" + std::to_string(g));

        ClusterMerge cluster;
        cluster.cluster = g;
        auto path_of = [&](const std::string& stem, const char* ext) {
            return (fs_base / (prefix + stem + ext)).string();
        };
        if (is_eco(cfg.ensemble)) {
            const auto eco = eco_combine(ds, se, eco_mode_number(cfg.ensemble),
                                         cfg.selection.m);
            cluster.models.push_back(merge_one_model(
                ctx, eco, "eco", path_of("merged_eco", ".safetensors"),
                cfg.base_model_path.empty() ? "" : path_of("model_eco", ".safetensors"),
                merge_seed));
        } else {
            cluster.models.push_back(merge_one_model(
                ctx, ds, "ds", path_of("merged_ds", ".safetensors"),
                cfg.base_model_path.empty() ? "" : path_of("model_ds", ".safetensors"),
                merge_seed));
            cluster.models.push_back(merge_one_model(
                ctx, se, "se", path_of("merged_se", ".safetensors"),
                cfg.base_model_path.empty() ? "" : path_of("model_se", ".safetensors"),
                merge_seed));
        }
        for (const auto& model : cluster.models) {
            nlohmann::json entry{{"cluster", g},
                                 {"model", model.name},
                                 {"experts", model.experts},
                                 {"weights", model.weights},
                                 {"method", to_string(cfg.merge.method)},
                                 {"archive", model.archive_path},
                                 {"stats", model.stats.to_json()}};
            if (!model.model_path.empty()) entry["model_archive"] = model.model_path;
            report_models.push_back(std::move(entry));
        }
        out.clusters.push_back(std::move(cluster));
    }

    out.report_path = (fs_base / "merge_report.json").string();
    detail::write_json_file(out.report_path,
                            nlohmann::json{{"models", report_models}});
    return out;
}

/// Merge using the selection files cmd_select wrote under output_dir.
inline MergeOutcome cmd_merge(const PipelineConfig& cfg) {
    cfg.validate();
    const auto fs_base = std::filesystem::path(cfg.output_dir);
    std::vector<std::pair<std::string, std::string>> files;
    if (cfg.n_splits && *cfg.n_splits > 1) {
        for (std::size_t g = 0; g < *cfg.n_splits; ++g) {
            const auto ds = fs_base / ("cluster" + std::to_string(g) + ".ds_selection.json");
            const auto se = fs_base / ("cluster" + std::to_string(g) + ".se_selection.json");
            if (!std::filesystem::exists(ds)) break;  // trailing clusters were empty
            files.emplace_back(ds.string(), se.string());
        }
        if (files.empty()) {
            throw IoError("no cluster selection files under '" + cfg.output_dir +
                          "'; run select first");
        }
    } else {
        files.emplace_back((fs_base / "ds_selection.json").string(),
                           (fs_base / "se_selection.json").string());
    }
    return cmd_merge(cfg, files);
}

// ---------------------------------------------------------------------------
// run: select -> merge -> infer -> ensemble -> evaluate
// ---------------------------------------------------------------------------

struct RunOutcome {
    SelectOutcome selection;
    MergeOutcome merge;
    std::string predictions_path;
    std::map<std::string, EvalReport> eval;  // empty when the corpus has no gold
    std::string eval_path;
    std::string manifest_path;
};

inline RunOutcome cmd_run(const PipelineConfig& cfg) {
    const auto ctx = load_pipeline_context(cfg);
    detail::ensure_dir(cfg.output_dir);

    RunOutcome out;
    auto stage = [&](const char* name, auto&& fn) {
        try {
            return fn();
        } catch (const Error& e) {
            throw Error(e.kind(), std::string(name) + " stage failed: " + e.what());
        }
    };
    out.selection = stage("select", [&] { return cmd_select(cfg); });
    out.merge = stage("merge", [&] { return cmd_merge(cfg); });

    // Inference + ensembling, cluster by cluster; every prediction list is
    // stitched back into corpus order.
    std::vector<PredictionSet> final_preds(ctx.corpus.size());
    std::map<std::string, std::vector<PredictionSet>> system_preds;
    std::map<std::string, std::vector<std::string>> warnings;
    const bool eco = is_eco(cfg.ensemble);
    const std::vector<std::string> systems =
        eco ? std::vector<std::string>{"eco"} : std::vector<std::string>{"ds", "se"};
    for (const auto& name : systems) {
        system_preds[name].resize(ctx.corpus.size());
    }

    stage("inference", [&] {
        for (const auto& sel : out.selection.clusters) {
            std::vector<Instance> members;
            members.reserve(sel.members.size());
            for (const std::size_t i : sel.members) members.push_back(ctx.corpus[i]);

            auto combined_profile = [&](const SelectionResult& r) {
                std::vector<MockProfile> picked;
                picked.reserve(r.selected.size());
                for (const auto& id : r.selected) picked.push_back(ctx.profiles.at(id));
                return combine_mock_profiles(picked);
            };
            auto run_system = [&](const std::string& name, const SelectionResult& r) {
                std::optional<MockProfile> profile;
                if (cfg.mock) profile = combined_profile(r);
                const auto preds =
                    predict_instances(ctx, profile, std::nullopt, members, &warnings);
                for (std::size_t j = 0; j < sel.members.size(); ++j) {
                    system_preds[name][sel.members[j]] = preds[j];
                }
            };
            if (eco) {
                const auto combined = eco_combine(
                    sel.ds, sel.se, eco_mode_number(cfg.ensemble), cfg.selection.m);
                run_system("eco", combined);
            } else {
                if (cfg.ensemble != EnsembleMode::se_only) run_system("ds", sel.ds);
                if (cfg.ensemble != EnsembleMode::ds_only) run_system("se", sel.se);
            }
        }
        return 0;
    });

    stage("ensemble", [&] {
        for (std::size_t i = 0; i < ctx.corpus.size(); ++i) {
            switch (cfg.ensemble) {
                case EnsembleMode::set_union:
                    final_preds[i] =
                        ensemble_union(system_preds["ds"][i], system_preds["se"][i]);
                    break;
                case EnsembleMode::intersection:
                    final_preds[i] = ensemble_intersection(system_preds["ds"][i],
                                                           system_preds["se"][i]);
                    break;
                case EnsembleMode::ds_only:
                    final_preds[i] = system_preds["ds"][i];
                    break;
                case EnsembleMode::se_only:
                    final_preds[i] = system_preds["se"][i];
                    break;
                default:
                    final_preds[i] = system_preds["eco"][i];
                    break;
            }
        }
        return 0;
    });

    const auto fs_base = std::filesystem::path(cfg.output_dir);
    for (const auto& name : systems) {
        if (cfg.ensemble == EnsembleMode::ds_only && name == "se") continue;
        if (cfg.ensemble == EnsembleMode::se_only && name == "ds") continue;
        write_predictions(system_preds[name],
                          (fs_base / ("predictions_" + name + ".jsonl")).string(),
                          &warnings);
    }
    out.predictions_path = (fs_base / "predictions_final.jsonl").string();
    write_predictions(final_preds, out.predictions_path, &warnings);

    // Score against gold when the corpus carries any.
    bool has_gold = false;
    for (const auto& inst : ctx.corpus) {
        if (!inst.gold.mentions.empty()) {
            has_gold = true;
            break;
        }
    }
    if (has_gold) {
        std::vector<PredictionSet> golds;
        golds.reserve(ctx.corpus.size());
        for (const auto& inst : ctx.corpus) golds.push_back(inst.gold);
        for (const auto& name : systems) {
            if (cfg.ensemble == EnsembleMode::ds_only && name == "se") continue;
            if (cfg.ensemble == EnsembleMode::se_only && name == "ds") continue;
            out.eval[name] = micro_f1(system_preds[name], golds);
        }
        out.eval["final"] = micro_f1(final_preds, golds);
        nlohmann::json eval_doc;
        for (const auto& [name, report] : out.eval) eval_doc[name] = report.to_json();
        out.eval_path = (fs_base / "eval_report.json").string();
        detail::write_json_file(out.eval_path, eval_doc);
    }

    nlohmann::json manifest{
        {"config", cfg.to_json()},
        {"stage_seeds",
         {{"cluster", derive_seed(cfg.seed, "cluster")},
          {"sample:0", derive_seed(cfg.seed, "sample:0")},
          {"merge:0", derive_seed(cfg.seed, "merge:0")}}},
        {"experts", nlohmann::json::array()},
        {"instances", ctx.corpus.size()},
        {"predictions", out.predictions_path}};
    for (const auto& e : ctx.experts) manifest["experts"].push_back(e.id);
    if (!out.eval_path.empty()) manifest["eval_report"] = out.eval_path;
    out.manifest_path = (fs_base / "run_manifest.json").string();
    detail::write_json_file(out.manifest_path, manifest);
    return out;
}

// ---------------------------------------------------------------------------
// evaluate / ensemble file utilities
// ---------------------------------------------------------------------------

/// Scores a predictions file against a gold dataset, aligning by instance_id.
inline EvalReport evaluate_files(const std::string& predictions_path,
                                 const std::string& gold_path) {
    const auto preds = read_predictions(predictions_path);
    const auto dataset = read_dataset(gold_path);
    std::map<std::string, const Instance*> by_id;
    for (const auto& inst : dataset) by_id[inst.instance_id] = &inst;
    if (preds.size() != dataset.size()) {
        throw AlignmentError("predictions cover " + std::to_string(preds.size()) +
                             " instances but the gold dataset has " +
                             std::to_string(dataset.size()));
    }
    std::vector<PredictionSet> golds;
    golds.reserve(preds.size());
    for (const auto& p : preds) {
        auto it = by_id.find(p.instance_id);
        if (it == by_id.end()) {
            throw AlignmentError("gold dataset has no instance '" + p.instance_id + "'");
        }
        golds.push_back(it->second->gold);
    }
    return micro_f1(preds, golds);
}

/// Folds several prediction files into one. Inputs must list the same
/// instances in the same order.
inline std::vector<PredictionSet> ensemble_files(const std::vector<std::string>& paths,
                                                 const std::string& mode,
                                                 std::size_t threshold = 0) {
    if (paths.size() < 2) throw ConfigError("ensembling needs at least two inputs");
    std::vector<std::vector<PredictionSet>> all;
    all.reserve(paths.size());
    for (const auto& path : paths) all.push_back(read_predictions(path));
    for (std::size_t f = 1; f < all.size(); ++f) {
        if (all[f].size() != all[0].size()) {
            throw AlignmentError("'" + paths[f] + "' lists " +
                                 std::to_string(all[f].size()) + " instances but '" +
                                 paths[0] + "' lists " + std::to_string(all[0].size()));
        }
        for (std::size_t i = 0; i < all[f].size(); ++i) {
            if (all[f][i].instance_id != all[0][i].instance_id) {
                throw AlignmentError("instance order differs between '" + paths[0] +
                                     "' and '" + paths[f] + "' at index " +
                                     std::to_string(i));
            }
        }
    }

    std::vector<PredictionSet> out;
    out.reserve(all[0].size());
    for (std::size_t i = 0; i < all[0].size(); ++i) {
        std::vector<PredictionSet> column;
        column.reserve(all.size());
        for (const auto& file : all) column.push_back(file[i]);
        if (mode == "union") {
            out.push_back(ensemble_vote(column, 1));
        } else if (mode == "intersection") {
            out.push_back(ensemble_vote(column, column.size()));
        } else if (mode == "vote") {
            if (threshold < 1 || threshold > column.size()) {
                throw ConfigError("vote threshold must lie in [1, " +
                                  std::to_string(column.size()) + "]");
            }
            out.push_back(ensemble_vote(column, threshold));
        } else {
            throw ConfigError("unknown ensemble mode '" + mode +
                              "' (use union, intersection, or vote)");
        }
    }
    return out;
}

}  // namespace samkit
