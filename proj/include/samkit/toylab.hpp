// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "samkit/client.hpp"
#include "samkit/embedding.hpp"
#include "samkit/errors.hpp"
#include "samkit/merge.hpp"
#include "samkit/ner.hpp"
#include "samkit/parallel.hpp"
#include "samkit/rng.hpp"
#include "samkit/selection.hpp"
#include "samkit/tensor.hpp"

namespace samkit {

// ---------------------------------------------------------------------------
// Synthetic domains
// ---------------------------------------------------------------------------

struct SyntheticDomainSpec {
    std::string domain_id;
    std::vector<std::string> entity_types;
    std::map<std::string, std::vector<std::string>> lexicons;  // type -> spans
    std::vector<std::string> filler;
    std::size_t instances = 1;
    double entity_density = 1.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (domain_id.empty()) throw ConfigError("domain spec needs a domain_id");
        if (entity_types.empty()) {
            throw ConfigError("domain '" + domain_id + "' needs at least one entity type");
        }
        std::set<std::string> seen;
        for (const auto& etype : entity_types) {
            const auto norm = normalize_type(etype);
            if (norm.empty()) {
                throw ConfigError("domain '" + domain_id + "' has a blank entity type");
            }
            if (!seen.insert(norm).second) {
                throw ConfigError("domain '" + domain_id + "' repeats entity type '" +
                                  norm + "'");
            }
            const auto it = lexicons.find(norm);
            if (it == lexicons.end() || it->second.empty()) {
                throw ConfigError("domain '" + domain_id + "' has no lexicon for type '" +
                                  norm + "'");
            }
            for (const auto& span : it->second) {
                if (normalize_span(span).empty()) {
                    throw ConfigError("domain '" + domain_id + "' lexicon for '" + norm +
                                      "' holds a blank span");
                }
            }
        }
        if (filler.empty()) {
            throw ConfigError("domain '" + domain_id + "' needs a filler vocabulary");
        }
        for (const auto& w : filler) {
            if (normalize_span(w).empty()) {
                throw ConfigError("domain '" + domain_id + "' filler holds a blank token");
            }
        }
        if (instances < 1) {
            throw ConfigError("domain '" + domain_id + "' needs at least one instance");
        }
        if (!(entity_density >= 0.0) || !std::isfinite(entity_density)) {
            throw ConfigError("domain '" + domain_id +
                              "' entity_density must be finite and >= 0");
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json lex = nlohmann::json::object();
        for (const auto& [etype, spans] : lexicons) lex[etype] = spans;
        return nlohmann::json{{"domain_id", domain_id},
                              {"entity_types", entity_types},
                              {"lexicons", lex},
                              {"filler", filler},
                              {"instances", instances},
                              {"entity_density", entity_density},
                              {"seed", seed}};
    }

    static SyntheticDomainSpec from_json(const nlohmann::json& doc) {
        if (!doc.is_object()) throw ConfigError("domain spec must be a JSON object");
        SyntheticDomainSpec spec;
        if (!doc.contains("domain_id") || !doc.at("domain_id").is_string()) {
            throw ConfigError("domain spec needs a string domain_id");
        }
        spec.domain_id = doc.at("domain_id").get<std::string>();
        if (!doc.contains("entity_types") || !doc.at("entity_types").is_array()) {
            throw ConfigError("domain spec needs an entity_types array");
        }
        for (const auto& t : doc.at("entity_types")) {
            if (!t.is_string()) throw ConfigError("entity_types must hold strings");
            spec.entity_types.push_back(normalize_type(t.get<std::string>()));
        }
        if (!doc.contains("lexicons") || !doc.at("lexicons").is_object()) {
            throw ConfigError("domain spec needs a lexicons object");
        }
        for (const auto& [etype, spans] : doc.at("lexicons").items()) {
            if (!spans.is_array()) throw ConfigError("lexicon entries must be arrays");
            auto& bucket = spec.lexicons[normalize_type(etype)];
            for (const auto& s : spans) {
                if (!s.is_string()) throw ConfigError("lexicon spans must be strings");
                bucket.push_back(normalize_span(s.get<std::string>()));
            }
        }
        if (!doc.contains("filler") || !doc.at("filler").is_array()) {
            throw ConfigError("domain spec needs a filler array");
        }
        for (const auto& w : doc.at("filler")) {
            if (!w.is_string()) throw ConfigError("filler tokens must be strings");
            spec.filler.push_back(normalize_span(w.get<std::string>()));
        }
        if (doc.contains("instances")) {
            const auto& v = doc.at("instances");
            if (!v.is_number_unsigned() &&
                !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
                throw ConfigError("instances must be a non-negative integer");
            }
            spec.instances = v.get<std::size_t>();
        }
        if (doc.contains("entity_density")) {
            if (!doc.at("entity_density").is_number()) {
                throw ConfigError("entity_density must be a number");
            }
            spec.entity_density = doc.at("entity_density").get<double>();
        }
        if (doc.contains("seed")) {
            const auto& v = doc.at("seed");
            if (!v.is_number_unsigned() &&
                !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
                throw ConfigError("seed must be a non-negative integer");
            }
            spec.seed = v.get<std::uint64_t>();
        }
        spec.validate();
        return spec;
    }
};

struct ToyInstance {
    std::string instance_id;
    std::vector<std::string> tokens;
    PredictionSet gold;
};

struct ToyDataset {
    std::vector<ToyInstance> instances;
};

namespace detail {

inline std::vector<std::string> split_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::string token;
    for (const char c : text) {
        if (c == ' ' || c == '\t' || c == '\n') {
            if (!token.empty()) out.push_back(std::move(token)), token.clear();
        } else {
            token.push_back(c);
        }
    }
    if (!token.empty()) out.push_back(std::move(token));
    return out;
}

inline std::string join_tokens(const std::vector<std::string>& tokens,
                               std::size_t begin, std::size_t end) {
    std::string out;
    for (std::size_t i = begin; i < end; ++i) {
        if (i > begin) out.push_back(' ');
        out += tokens[i];
    }
    return out;
}

}  // namespace detail

inline std::string instance_text(const ToyInstance& inst) {
    return detail::join_tokens(inst.tokens, 0, inst.tokens.size());
}

// Seeded sentence generator: filler tokens with lexicon spans spliced in as
// contiguous blocks, gold mentions recorded exactly as inserted.
inline ToyDataset gen_synthetic_domain(const SyntheticDomainSpec& spec) {
    spec.validate();
    SplitMix64 rng(spec.seed);
    ToyDataset data;
    data.instances.reserve(spec.instances);
    for (std::size_t i = 0; i < spec.instances; ++i) {
        ToyInstance inst;
        inst.instance_id = spec.domain_id + "-" + std::to_string(i);
        inst.gold.instance_id = inst.instance_id;

        const std::size_t filler_count = 5 + rng.next_below(6);  // 5..10 tokens
        std::vector<std::string> fillers;
        fillers.reserve(filler_count);
        for (std::size_t f = 0; f < filler_count; ++f) {
            fillers.push_back(spec.filler[rng.next_below(spec.filler.size())]);
        }

        auto n_mentions =
            spec.entity_density > 0.0
                ? static_cast<std::size_t>(rng.next_poisson(spec.entity_density))
                : 0;
        // Mentions occupy distinct filler gaps so two spans never touch; this
        // keeps every gold mention recoverable by run-based decoding.
        n_mentions = std::min(n_mentions, filler_count + 1);
        std::vector<std::size_t> slots(filler_count + 1);
        std::iota(slots.begin(), slots.end(), std::size_t{0});
        shuffle(slots, rng);
        struct Block {
            std::size_t slot;
            std::vector<std::string> tokens;
            std::string span;
            std::string etype;
        };
        std::vector<Block> blocks;
        blocks.reserve(n_mentions);
        for (std::size_t j = 0; j < n_mentions; ++j) {
            const auto& etype =
                spec.entity_types[rng.next_below(spec.entity_types.size())];
            const auto norm_type = normalize_type(etype);
            const auto& lexicon = spec.lexicons.at(norm_type);
            const auto& span = lexicon[rng.next_below(lexicon.size())];
            Block b;
            b.slot = slots[j];
            b.tokens = detail::split_tokens(span);
            b.span = span;
            b.etype = norm_type;
            blocks.push_back(std::move(b));
        }
        std::stable_sort(blocks.begin(), blocks.end(),
                         [](const Block& a, const Block& b) { return a.slot < b.slot; });

        std::size_t next_block = 0;
        for (std::size_t f = 0; f <= filler_count; ++f) {
            while (next_block < blocks.size() && blocks[next_block].slot == f) {
                for (auto& tok : blocks[next_block].tokens) {
                    inst.tokens.push_back(std::move(tok));
                }
                add_mention(inst.gold, blocks[next_block].span, blocks[next_block].etype);
                ++next_block;
            }
            if (f < filler_count) inst.tokens.push_back(std::move(fillers[f]));
        }
        data.instances.push_back(std::move(inst));
    }
    return data;
}

// ---------------------------------------------------------------------------
// Toy tagger
// ---------------------------------------------------------------------------

constexpr std::size_t kToyFeatureDim = 2048;

struct ToyTagger {
    std::size_t feature_dim = kToyFeatureDim;
    std::vector<std::string> label_list;  // entity labels; outside/O is implicit last
    std::vector<float> W;                 // [feature_dim * num_classes], feature-major
    std::vector<float> b;                 // [num_classes]

    std::size_t num_classes() const { return label_list.size() + 1; }

    void validate() const {
        if (feature_dim < 1) throw InvalidValue("tagger feature_dim must be positive");
        if (label_list.empty()) throw InvalidValue("tagger needs at least one label");
        std::set<std::string> seen;
        for (const auto& label : label_list) {
            if (normalize_type(label) != label || label.empty()) {
                throw InvalidValue("tagger label '" + label +
                                   "' must be a normalized, non-empty type name");
            }
            if (!seen.insert(label).second) {
                throw InvalidValue("tagger label '" + label + "' repeats");
            }
        }
        if (W.size() != feature_dim * num_classes()) {
            throw ShapeMismatch("tagger W has " + std::to_string(W.size()) +
                                " values; expected " +
                                std::to_string(feature_dim * num_classes()));
        }
        if (b.size() != num_classes()) {
            throw ShapeMismatch("tagger b has " + std::to_string(b.size()) +
                                " values; expected " + std::to_string(num_classes()));
        }
        for (const float v : W) {
            if (!std::isfinite(v)) throw InvalidValue("tagger W holds a non-finite value");
        }
        for (const float v : b) {
            if (!std::isfinite(v)) throw InvalidValue("tagger b holds a non-finite value");
        }
    }

    bool operator==(const ToyTagger& other) const = default;
};

// Shared random initialization standing in for the common base checkpoint.
inline ToyTagger make_base_tagger(std::vector<std::string> label_list,
                                  std::uint64_t seed,
                                  std::size_t feature_dim = kToyFeatureDim) {
    ToyTagger t;
    t.feature_dim = feature_dim;
    t.label_list = std::move(label_list);
    SplitMix64 rng(derive_seed(seed, "toy-base"));
    t.W.resize(t.feature_dim * t.num_classes());
    for (float& v : t.W) v = static_cast<float>(rng.next_gaussian() * 0.01);
    t.b.assign(t.num_classes(), 0.0f);
    t.validate();
    return t;
}

namespace detail {

// Hashed character-trigram features with a one-token context window: each
// offset in {-1, 0, +1} contributes FNV-1a(tag + trigram) mod feature_dim for
// every trigram of the padded token, plus one whole-token hash per offset.
inline void token_features(const std::vector<std::string>& tokens, std::size_t i,
                           std::size_t feature_dim, std::vector<std::size_t>& out) {
    out.clear();
    static const char* kTags[3] = {"L:", "C:", "R:"};
    static const char* kWordTags[3] = {"LW:", "CW:", "RW:"};
    for (int offset = -1; offset <= 1; ++offset) {
        const char* tag = kTags[offset + 1];
        std::string padded;
        const auto j = static_cast<std::ptrdiff_t>(i) + offset;
        if (j < 0) {
            padded = "^<s>$";
        } else if (j >= static_cast<std::ptrdiff_t>(tokens.size())) {
            padded = "^</s>$";
        } else {
            padded = "^" + tokens[static_cast<std::size_t>(j)] + "$";
        }
        out.push_back(
            static_cast<std::size_t>(fnv1a(kWordTags[offset + 1] + padded) % feature_dim));
        if (padded.size() < 3) continue;
        for (std::size_t k = 0; k + 3 <= padded.size(); ++k) {
            const std::string gram = tag + padded.substr(k, 3);
            out.push_back(static_cast<std::size_t>(fnv1a(gram) % feature_dim));
        }
    }
}

// Token labels recovered from gold mentions: each mention's token sequence is
// matched against the sentence and labels every still-unlabeled occurrence.
inline std::vector<std::size_t> label_tokens(const std::vector<std::string>& tokens,
                                             const PredictionSet& gold,
                                             const std::vector<std::string>& label_list) {
    const std::size_t outside = label_list.size();
    std::vector<std::size_t> labels(tokens.size(), outside);
    for (const auto& mention : gold.mentions) {
        const auto label_it =
            std::find(label_list.begin(), label_list.end(), mention.etype);
        if (label_it == label_list.end()) continue;  // type outside this tagger's set
        const auto label =
            static_cast<std::size_t>(label_it - label_list.begin());
        const auto seq = split_tokens(mention.span);
        if (seq.empty() || seq.size() > tokens.size()) continue;
        for (std::size_t start = 0; start + seq.size() <= tokens.size(); ++start) {
            bool match = true;
            for (std::size_t k = 0; k < seq.size(); ++k) {
                if (tokens[start + k] != seq[k] || labels[start + k] != outside) {
                    match = false;
                    break;
                }
            }
            if (!match) continue;
            for (std::size_t k = 0; k < seq.size(); ++k) labels[start + k] = label;
        }
    }
    return labels;
}

}  // namespace detail

// Mini-batch SGD on per-token softmax cross-entropy. Deterministic under
// seed; epoch_losses (when given) receives the mean token loss per epoch.
inline ToyTagger train_toy_tagger(const ToyDataset& data, const ToyTagger& base,
                                  std::size_t epochs, float lr, std::uint64_t seed,
                                  std::vector<double>* epoch_losses = nullptr) {
    base.validate();
    if (!(lr > 0.0f) || !std::isfinite(lr)) {
        throw InvalidValue("learning rate must be finite and > 0");
    }
    ToyTagger tagger = base;
    if (epoch_losses) epoch_losses->clear();
    if (epochs == 0 || data.instances.empty()) return tagger;

    const std::size_t C = tagger.num_classes();
    constexpr std::size_t kBatchInstances = 8;

    // Pre-compute features and labels once; they do not change across epochs.
    std::vector<std::vector<std::vector<std::size_t>>> features(data.instances.size());
    std::vector<std::vector<std::size_t>> labels(data.instances.size());
    std::vector<std::size_t> scratch;
    for (std::size_t i = 0; i < data.instances.size(); ++i) {
        const auto& inst = data.instances[i];
        labels[i] = detail::label_tokens(inst.tokens, inst.gold, tagger.label_list);
        features[i].resize(inst.tokens.size());
        for (std::size_t t = 0; t < inst.tokens.size(); ++t) {
            detail::token_features(inst.tokens, t, tagger.feature_dim, scratch);
            features[i][t] = scratch;
        }
    }

    SplitMix64 rng(derive_seed(seed, "toy-train"));
    std::vector<std::size_t> order(data.instances.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> grad_w(tagger.feature_dim * C);
    std::vector<double> grad_b(C);
    std::vector<double> scores(C);

    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        shuffle(order, rng);
        double loss_sum = 0.0;
        std::size_t loss_tokens = 0;
        for (std::size_t batch_start = 0; batch_start < order.size();
             batch_start += kBatchInstances) {
            const auto batch_end =
                std::min(batch_start + kBatchInstances, order.size());
            std::fill(grad_w.begin(), grad_w.end(), 0.0);
            std::fill(grad_b.begin(), grad_b.end(), 0.0);
            std::size_t batch_tokens = 0;
            for (std::size_t bi = batch_start; bi < batch_end; ++bi) {
                const auto idx = order[bi];
                for (std::size_t t = 0; t < features[idx].size(); ++t) {
                    const auto& idxs = features[idx][t];
                    const auto y = labels[idx][t];
                    for (std::size_t c = 0; c < C; ++c) {
                        scores[c] = static_cast<double>(tagger.b[c]);
                    }
                    for (const auto f : idxs) {
                        const float* row = tagger.W.data() + f * C;
                        for (std::size_t c = 0; c < C; ++c) {
                            scores[c] += static_cast<double>(row[c]);
                        }
                    }
                    const double peak = *std::max_element(scores.begin(), scores.end());
                    double z = 0.0;
                    for (std::size_t c = 0; c < C; ++c) {
                        scores[c] = std::exp(scores[c] - peak);
                        z += scores[c];
                    }
                    loss_sum += -std::log(scores[y] / z);
                    ++loss_tokens;
                    ++batch_tokens;
                    for (std::size_t c = 0; c < C; ++c) {
                        const double g = scores[c] / z - (c == y ? 1.0 : 0.0);
                        grad_b[c] += g;
                        for (const auto f : idxs) grad_w[f * C + c] += g;
                    }
                }
            }
            if (batch_tokens == 0) continue;
            const double step = static_cast<double>(lr) / static_cast<double>(batch_tokens);
            for (std::size_t i = 0; i < grad_w.size(); ++i) {
                if (grad_w[i] != 0.0) {
                    tagger.W[i] =
                        static_cast<float>(static_cast<double>(tagger.W[i]) - step * grad_w[i]);
                }
            }
            for (std::size_t c = 0; c < C; ++c) {
                tagger.b[c] =
                    static_cast<float>(static_cast<double>(tagger.b[c]) - step * grad_b[c]);
            }
        }
        const double epoch_loss =
            loss_tokens ? loss_sum / static_cast<double>(loss_tokens) : 0.0;
        if (!std::isfinite(epoch_loss)) {
            throw DivergenceError("training loss became non-finite at epoch " +
                                  std::to_string(epoch) + "; lower the learning rate");
        }
        if (epoch_losses) epoch_losses->push_back(epoch_loss);
    }
    tagger.validate();
    return tagger;
}

// Per-token argmax decode; maximal runs of one non-O label become mentions.
inline PredictionSet tag(const ToyTagger& tagger, const std::vector<std::string>& tokens) {
    tagger.validate();
    PredictionSet out;
    const std::size_t C = tagger.num_classes();
    const std::size_t outside = C - 1;
    std::vector<std::size_t> predicted(tokens.size(), outside);
    std::vector<std::size_t> idxs;
    std::vector<double> scores(C);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        detail::token_features(tokens, t, tagger.feature_dim, idxs);
        for (std::size_t c = 0; c < C; ++c) scores[c] = static_cast<double>(tagger.b[c]);
        for (const auto f : idxs) {
            const float* row = tagger.W.data() + f * C;
            for (std::size_t c = 0; c < C; ++c) scores[c] += static_cast<double>(row[c]);
        }
        predicted[t] = static_cast<std::size_t>(
            std::max_element(scores.begin(), scores.end()) - scores.begin());
    }
    std::size_t run_start = 0;
    while (run_start < predicted.size()) {
        const auto label = predicted[run_start];
        std::size_t run_end = run_start + 1;
        while (run_end < predicted.size() && predicted[run_end] == label) ++run_end;
        if (label != outside) {
            add_mention(out, detail::join_tokens(tokens, run_start, run_end),
                        tagger.label_list[label]);
        }
        run_start = run_end;
    }
    return out;
}

inline std::vector<PredictionSet> predict_dataset(const ToyTagger& tagger,
                                                  const ToyDataset& data) {
    std::vector<PredictionSet> out;
    out.reserve(data.instances.size());
    for (const auto& inst : data.instances) {
        auto pred = tag(tagger, inst.tokens);
        pred.instance_id = inst.instance_id;
        out.push_back(std::move(pred));
    }
    return out;
}

inline std::vector<PredictionSet> dataset_gold(const ToyDataset& data) {
    std::vector<PredictionSet> out;
    out.reserve(data.instances.size());
    for (const auto& inst : data.instances) out.push_back(inst.gold);
    return out;
}

// ---------------------------------------------------------------------------
// Tagger <-> tensor bridge
// ---------------------------------------------------------------------------

inline std::string join_labels(const std::vector<std::string>& labels) {
    std::string out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (i) out.push_back(',');
        out += labels[i];
    }
    return out;
}

inline std::vector<std::string> split_labels(const std::string& joined) {
    std::vector<std::string> out;
    std::string item;
    for (const char c : joined) {
        if (c == ',') {
            out.push_back(item);
            item.clear();
        } else {
            item.push_back(c);
        }
    }
    if (!item.empty()) out.push_back(item);
    return out;
}

inline TensorMap tagger_to_tensors(const ToyTagger& tagger) {
    tagger.validate();
    TensorMap map;
    Tensor w;
    w.shape = {static_cast<std::int64_t>(tagger.feature_dim),
               static_cast<std::int64_t>(tagger.num_classes())};
    w.data = tagger.W;
    map.insert("w", std::move(w));
    Tensor b;
    b.shape = {static_cast<std::int64_t>(tagger.num_classes())};
    b.data = tagger.b;
    map.insert("b", std::move(b));
    map.metadata["labels"] = join_labels(tagger.label_list);
    map.metadata["feature_dim"] = std::to_string(tagger.feature_dim);
    return map;
}

inline ToyTagger tagger_from_tensors(const TensorMap& map,
                                     const std::vector<std::string>& label_list) {
    ToyTagger t;
    t.label_list = label_list;
    const auto& w = map.at("w");
    const auto& b = map.at("b");
    if (w.shape.size() != 2) {
        throw ShapeMismatch("tagger tensor 'w' must be 2-D");
    }
    t.feature_dim = static_cast<std::size_t>(w.shape[0]);
    const auto classes = static_cast<std::size_t>(w.shape[1]);
    if (classes != label_list.size() + 1) {
        throw ShapeMismatch("tagger tensor 'w' has " + std::to_string(classes) +
                            " columns; label list implies " +
                            std::to_string(label_list.size() + 1));
    }
    if (b.shape.size() != 1 || static_cast<std::size_t>(b.shape[0]) != classes) {
        throw ShapeMismatch("tagger tensor 'b' must be 1-D with one entry per class");
    }
    t.W = w.data;
    t.b = b.data;
    t.validate();
    return t;
}

inline ToyTagger tagger_from_tensors(const TensorMap& map) {
    const auto it = map.metadata.find("labels");
    if (it == map.metadata.end()) {
        throw FormatError("tagger archive lacks a 'labels' metadata entry");
    }
    return tagger_from_tensors(map, split_labels(it->second));
}

// Task vector of a fine-tuned toy tagger against the shared base.
inline DeltaSet export_delta(const ToyTagger& tagger, const ToyTagger& base) {
    tagger.validate();
    base.validate();
    if (tagger.label_list != base.label_list || tagger.feature_dim != base.feature_dim) {
        throw ShapeMismatch("tagger and base disagree on labels or feature_dim");
    }
    return compute_delta(tagger_to_tensors(tagger), tagger_to_tensors(base),
                         "toy-tagger");
}

inline ToyTagger apply_merged_delta(const ToyTagger& base, const DeltaSet& delta) {
    const auto merged = apply_delta(tagger_to_tensors(base), delta, 1.0f);
    return tagger_from_tensors(merged, base.label_list);
}

// ---------------------------------------------------------------------------
// Domain study
// ---------------------------------------------------------------------------

struct StudyConfig {
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    std::size_t epochs = 15;
    float lr = 0.1f;
    std::size_t m = 2;       // experts kept by each selection strategy
    std::size_t k = 8;       // target instances sampled for sampling evaluation
    std::size_t embed_texts = 64;  // per-domain texts pooled into its embedding
    MergeRecipe recipe;            // framework default: TIES, density 0.2, scale 1

    void validate(std::size_t num_sources) const {
        if (seeds.empty()) throw ConfigError("study needs at least one seed");
        if (epochs < 1) throw ConfigError("study needs at least one training epoch");
        if (!(lr > 0.0f) || !std::isfinite(lr)) {
            throw ConfigError("study learning rate must be finite and > 0");
        }
        if (m < 1 || m > num_sources) {
            throw ConfigError("study m must lie in [1, number of source domains]");
        }
        if (k < 1) throw ConfigError("study k must be at least 1");
        if (embed_texts < 1) throw ConfigError("study embed_texts must be at least 1");
    }

    static StudyConfig from_json(const nlohmann::json& doc) {
        if (!doc.is_object()) throw ConfigError("study config must be a JSON object");
        StudyConfig cfg;
        if (doc.contains("seeds")) {
            if (!doc.at("seeds").is_array()) throw ConfigError("seeds must be an array");
            cfg.seeds.clear();
            for (const auto& s : doc.at("seeds")) {
                if (!s.is_number_unsigned() &&
                    !(s.is_number_integer() && s.get<std::int64_t>() >= 0)) {
                    throw ConfigError("seeds must hold non-negative integers");
                }
                cfg.seeds.push_back(s.get<std::uint64_t>());
            }
        }
        if (doc.contains("epochs")) cfg.epochs = doc.at("epochs").get<std::size_t>();
        if (doc.contains("lr")) cfg.lr = doc.at("lr").get<float>();
        if (doc.contains("m")) cfg.m = doc.at("m").get<std::size_t>();
        if (doc.contains("k")) cfg.k = doc.at("k").get<std::size_t>();
        if (doc.contains("embed_texts")) {
            cfg.embed_texts = doc.at("embed_texts").get<std::size_t>();
        }
        if (doc.contains("recipe")) cfg.recipe = MergeRecipe::from_json(doc.at("recipe"));
        return cfg;
    }
};

struct StudyReport {
    std::vector<std::string> methods;  // row order
    std::vector<std::string> targets;  // column order
    std::vector<std::uint64_t> seeds;
    // per_seed[s][method][target] -> micro-F1
    std::vector<std::map<std::string, std::map<std::string, double>>> per_seed;
    std::map<std::string, std::map<std::string, double>> mean;

    nlohmann::json to_json() const {
        nlohmann::json runs = nlohmann::json::array();
        for (std::size_t s = 0; s < seeds.size(); ++s) {
            runs.push_back({{"seed", seeds[s]}, {"scores", per_seed[s]}});
        }
        return nlohmann::json{{"methods", methods},
                              {"targets", targets},
                              {"seeds", seeds},
                              {"per_seed", runs},
                              {"mean", mean}};
    }
};

inline std::string format_study_table(const StudyReport& report) {
    std::ostringstream out;
    out << std::left << std::setw(24) << "method";
    for (const auto& target : report.targets) {
        out << std::right << std::setw(12) << target;
    }
    out << std::right << std::setw(12) << "avg" << "\n";
    out << std::string(24 + 12 * (report.targets.size() + 1), '-') << "\n";
    for (const auto& method : report.methods) {
        out << std::left << std::setw(24) << method;
        double sum = 0.0;
        for (const auto& target : report.targets) {
            const double f1 = report.mean.at(method).at(target);
            sum += f1;
            out << std::right << std::setw(12) << std::fixed << std::setprecision(4)
                << f1;
        }
        out << std::right << std::setw(12) << std::fixed << std::setprecision(4)
            << (report.targets.empty() ? 0.0 : sum / report.targets.size());
        out << "\n";
    }
    return out.str();
}

namespace detail {

inline Embedding domain_embedding(const ToyDataset& data, std::size_t max_texts) {
    std::vector<Embedding> vecs;
    const auto n = std::min(max_texts, data.instances.size());
    vecs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        vecs.push_back(mock_embed_text(instance_text(data.instances[i])));
    }
    return centroid(vecs);
}

}  // namespace detail

// End-to-end desk-scale experiment: per-source experts plus a pooled-data
// baseline, evaluated on held-out targets against merge-all and the
// select-and-merge pipeline (both selection strategies and their union).
inline StudyReport run_domain_study(const std::vector<SyntheticDomainSpec>& domains,
                                    const std::vector<SyntheticDomainSpec>& held_out,
                                    const StudyConfig& config) {
    if (domains.size() < 3) {
        throw ConfigError("domain study needs at least three source domains");
    }
    if (held_out.size() < 2) {
        throw ConfigError("domain study needs at least two held-out domains");
    }
    for (const auto& spec : domains) spec.validate();
    for (const auto& spec : held_out) spec.validate();
    config.validate(domains.size());

    // Shared label space: the union of all source entity types, sorted.
    std::set<std::string> type_union;
    for (const auto& spec : domains) {
        for (const auto& t : spec.entity_types) type_union.insert(normalize_type(t));
    }
    const std::vector<std::string> label_list(type_union.begin(), type_union.end());

    StudyReport report;
    for (const auto& spec : domains) report.methods.push_back("expert:" + spec.domain_id);
    report.methods.insert(report.methods.end(),
                          {"data_merging", "model_merging", "sam_ds", "sam_se",
                           "sam_union"});
    for (const auto& spec : held_out) report.targets.push_back(spec.domain_id);
    report.seeds = config.seeds;
    report.per_seed.resize(config.seeds.size());

    parallel_for(config.seeds.size(), [&](std::size_t run) {
        const auto seed = config.seeds[run];
        auto& scores = report.per_seed[run];

        const auto base =
            make_base_tagger(label_list, derive_seed(seed, "base"));
        const auto base_map = tagger_to_tensors(base);

        // Train one expert per source domain plus the pooled-data baseline.
        std::vector<ToyDataset> source_data;
        std::vector<ToyTagger> experts;
        ToyDataset pooled;
        for (const auto& spec : domains) {
            auto respec = spec;
            respec.seed = derive_seed(seed, "gen:" + spec.domain_id);
            auto data = gen_synthetic_domain(respec);
            experts.push_back(train_toy_tagger(
                data, base, config.epochs, config.lr,
                derive_seed(seed, "train:" + spec.domain_id)));
            for (const auto& inst : data.instances) pooled.instances.push_back(inst);
            source_data.push_back(std::move(data));
        }
        const auto pooled_tagger =
            train_toy_tagger(pooled, base, config.epochs, config.lr,
                             derive_seed(seed, "train:pooled"));

        std::vector<DeltaSet> deltas;
        deltas.reserve(experts.size());
        for (std::size_t e = 0; e < experts.size(); ++e) {
            auto delta = export_delta(experts[e], base);
            delta.origin = domains[e].domain_id;
            deltas.push_back(std::move(delta));
        }
        const auto merged_all =
            apply_merged_delta(base, merge(config.recipe, deltas).first);

        std::vector<ExpertRecord> records;
        for (std::size_t e = 0; e < experts.size(); ++e) {
            ExpertRecord rec;
            rec.id = domains[e].domain_id;
            rec.domain_label = domains[e].domain_id;
            rec.delta_path = "";
            rec.embedding = detail::domain_embedding(source_data[e], config.embed_texts);
            records.push_back(std::move(rec));
        }

        auto merge_selected = [&](const std::vector<std::string>& ids) {
            std::vector<DeltaSet> chosen;
            for (const auto& id : ids) {
                for (std::size_t e = 0; e < deltas.size(); ++e) {
                    if (domains[e].domain_id == id) chosen.push_back(deltas[e]);
                }
            }
            return apply_merged_delta(base, merge(config.recipe, chosen).first);
        };

        for (const auto& target_spec : held_out) {
            auto respec = target_spec;
            respec.seed = derive_seed(seed, "gen:" + target_spec.domain_id);
            const auto target_data = gen_synthetic_domain(respec);
            const auto gold = dataset_gold(target_data);
            auto eval_tagger = [&](const ToyTagger& tagger) {
                return micro_f1(predict_dataset(tagger, target_data), gold).f1;
            };

            for (std::size_t e = 0; e < experts.size(); ++e) {
                scores["expert:" + domains[e].domain_id][target_spec.domain_id] =
                    eval_tagger(experts[e]);
            }
            scores["data_merging"][target_spec.domain_id] = eval_tagger(pooled_tagger);
            scores["model_merging"][target_spec.domain_id] = eval_tagger(merged_all);

            // Domain-similarity selection.
            std::vector<Embedding> target_embeddings;
            const auto n_texts =
                std::min(config.embed_texts, target_data.instances.size());
            for (std::size_t i = 0; i < n_texts; ++i) {
                target_embeddings.push_back(
                    mock_embed_text(instance_text(target_data.instances[i])));
            }
            const auto ds =
                rank_by_domain_similarity(target_embeddings, records, config.m);

            // Sampling-evaluation selection over k sampled target instances.
            const auto sampled = sample_instances(
                target_data.instances, config.k,
                derive_seed(seed, "sample:" + target_spec.domain_id));
            std::vector<std::vector<PredictionSet>> expert_preds(experts.size());
            for (std::size_t e = 0; e < experts.size(); ++e) {
                for (const auto& inst : sampled) {
                    auto pred = tag(experts[e], inst.tokens);
                    pred.instance_id = inst.instance_id;
                    expert_preds[e].push_back(std::move(pred));
                }
            }
            const auto se = rank_by_sampling_eval(records, expert_preds, config.m);

            const auto sam_ds_tagger = merge_selected(ds.selected);
            const auto sam_se_tagger = merge_selected(se.selected);
            const auto ds_preds = predict_dataset(sam_ds_tagger, target_data);
            const auto se_preds = predict_dataset(sam_se_tagger, target_data);
            scores["sam_ds"][target_spec.domain_id] = micro_f1(ds_preds, gold).f1;
            scores["sam_se"][target_spec.domain_id] = micro_f1(se_preds, gold).f1;
            std::vector<PredictionSet> union_preds;
            union_preds.reserve(ds_preds.size());
            for (std::size_t i = 0; i < ds_preds.size(); ++i) {
                union_preds.push_back(ensemble_union(ds_preds[i], se_preds[i]));
            }
            scores["sam_union"][target_spec.domain_id] = micro_f1(union_preds, gold).f1;
        }
    });

    for (const auto& method : report.methods) {
        for (const auto& target : report.targets) {
            double sum = 0.0;
            for (const auto& run : report.per_seed) sum += run.at(method).at(target);
            report.mean[method][target] = sum / static_cast<double>(report.seeds.size());
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Study file I/O and the built-in default study
// ---------------------------------------------------------------------------

struct StudySpec {
    std::vector<SyntheticDomainSpec> sources;
    std::vector<SyntheticDomainSpec> held_out;
    StudyConfig config;
};

inline StudySpec load_study_spec(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open study spec file: " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("study spec is not valid JSON: " + std::string(e.what()));
    }
    if (!doc.is_object() || !doc.contains("sources") || !doc.contains("held_out")) {
        throw FormatError("study spec needs 'sources' and 'held_out' arrays");
    }
    StudySpec spec;
    for (const auto& d : doc.at("sources")) {
        spec.sources.push_back(SyntheticDomainSpec::from_json(d));
    }
    for (const auto& d : doc.at("held_out")) {
        spec.held_out.push_back(SyntheticDomainSpec::from_json(d));
    }
    if (doc.contains("config")) spec.config = StudyConfig::from_json(doc.at("config"));
    return spec;
}

namespace detail {

inline SyntheticDomainSpec mix_domains(const std::string& id,
                                       const SyntheticDomainSpec& a,
                                       const SyntheticDomainSpec& b,
                                       std::size_t instances) {
    SyntheticDomainSpec out;
    out.domain_id = id;
    out.entity_types = a.entity_types;
    out.entity_types.insert(out.entity_types.end(), b.entity_types.begin(),
                            b.entity_types.end());
    out.lexicons = a.lexicons;
    for (const auto& [etype, spans] : b.lexicons) out.lexicons[etype] = spans;
    out.filler = a.filler;
    out.instances = instances;
    out.entity_density = (a.entity_density + b.entity_density) / 2.0;
    return out;
}

}  // namespace detail

// Four disjoint source domains over a shared filler vocabulary, plus two
// held-out targets that each mix a pair of sources.
inline StudySpec make_default_study(std::size_t train_instances = 400,
                                    std::size_t eval_instances = 150) {
    const std::vector<std::string> filler = {
        "the",    "a",     "report", "said",   "today", "while",  "after",
        "before", "about", "during", "new",    "old",   "local",  "annual",
        "meeting", "press", "notes",  "review", "again", "update", "brief"};

    SyntheticDomainSpec med;
    med.domain_id = "medical";
    med.entity_types = {"disease", "drug"};
    med.lexicons["disease"] = {"asthma",       "lung cancer",  "diabetes",
                               "influenza",    "hypertension", "migraine",
                               "skin rash",    "anemia",       "arthritis",
                               "bronchitis",   "heart failure", "pneumonia"};
    med.lexicons["drug"] = {"aspirin",      "ibuprofen",   "insulin",
                            "penicillin",   "morphine",    "statin",
                            "beta blocker", "antibiotic",  "paracetamol",
                            "antihistamine", "steroid",    "vaccine dose"};
    med.filler = filler;
    med.instances = train_instances;
    med.entity_density = 1.6;

    SyntheticDomainSpec fin;
    fin.domain_id = "finance";
    fin.entity_types = {"company", "currency"};
    fin.lexicons["company"] = {"acme corp",     "globex",         "initech",
                               "umbrella corp", "stark industries", "wayne enterprises",
                               "hooli",         "vandelay industries", "wonka factory",
                               "tyrell corp",   "cyberdyne systems",   "soylent corp"};
    fin.lexicons["currency"] = {"dollar",        "euro",        "yen",
                                "pound sterling", "franc",      "rupee",
                                "peso",          "krona",       "baht",
                                "dinar",         "zloty",       "forint"};
    fin.filler = filler;
    fin.instances = train_instances;
    fin.entity_density = 1.6;

    SyntheticDomainSpec geo;
    geo.domain_id = "geography";
    geo.entity_types = {"city", "river"};
    geo.lexicons["city"] = {"paris",    "berlin",   "madrid",  "lisbon",
                            "warsaw",   "oslo",     "helsinki", "vienna",
                            "prague",   "dublin",   "athens",   "brussels"};
    geo.lexicons["river"] = {"danube", "nile",  "amazon",  "volga",
                             "rhine",  "thames", "ganges", "mekong",
                             "loire",  "elbe",   "tiber",  "seine river"};
    geo.filler = filler;
    geo.instances = train_instances;
    geo.entity_density = 1.6;

    SyntheticDomainSpec sport;
    sport.domain_id = "sports";
    sport.entity_types = {"team", "athlete"};
    sport.lexicons["team"] = {"red sox",     "lakers",     "yankees",
                              "celtics",     "bruins",     "rangers",
                              "united fc",   "rovers fc",  "wanderers fc",
                              "athletic club", "city fc",  "harlequins"};
    sport.lexicons["athlete"] = {"serena",  "pele",     "jordan",  "federer",
                                 "bolt",    "biles",    "phelps",  "messi",
                                 "hamilton", "ronaldo", "osaka",   "nadal"};
    sport.filler = filler;
    sport.instances = train_instances;
    sport.entity_density = 1.6;

    StudySpec spec;
    spec.sources = {med, fin, geo, sport};
    spec.held_out = {
        detail::mix_domains("medfin", med, fin, eval_instances),
        detail::mix_domains("geosport", geo, sport, eval_instances),
    };
    return spec;
}

}  // namespace samkit
