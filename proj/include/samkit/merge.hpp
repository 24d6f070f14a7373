// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "samkit/errors.hpp"
#include "samkit/parallel.hpp"
#include "samkit/rng.hpp"
#include "samkit/tensor.hpp"

namespace samkit {

enum class MergeMethod { linear, task_arithmetic, ties, dare_linear, dare_ties };

inline std::string to_string(MergeMethod m) {
    switch (m) {
        case MergeMethod::linear: return "linear";
        case MergeMethod::task_arithmetic: return "task_arithmetic";
        case MergeMethod::ties: return "ties";
        case MergeMethod::dare_linear: return "dare_linear";
        case MergeMethod::dare_ties: return "dare_ties";
    }
    throw InternalError("unreachable merge method");
}

inline MergeMethod merge_method_from_string(const std::string& s) {
    if (s == "linear") return MergeMethod::linear;
    if (s == "task_arithmetic") return MergeMethod::task_arithmetic;
    if (s == "ties") return MergeMethod::ties;
    if (s == "dare_linear") return MergeMethod::dare_linear;
    if (s == "dare_ties") return MergeMethod::dare_ties;
    throw ConfigError("unknown merge method '" + s +
                      "' (expected linear, task_arithmetic, ties, dare_linear, dare_ties)");
}

/// Full description of one merge run: the method plus every knob it may
/// consume. Unused knobs are carried but ignored (e.g. density for linear).
struct MergeRecipe {
    MergeMethod method = MergeMethod::ties;
    float density = 0.2f;     // TIES: fraction of coordinates kept per expert
    float drop_rate = 0.5f;   // DARE: per-coordinate drop probability
    float scale = 1.0f;       // λ applied to the merged delta
    std::vector<float> weights;  // per-expert; empty means uniform 1.0
    uint64_t seed = 0;        // DARE randomness

    void validate(size_t num_deltas) const {
        if (!(density > 0.0f && density <= 1.0f))
            throw ConfigError("density must be in (0, 1]");
        if (!(drop_rate >= 0.0f && drop_rate < 1.0f))
            throw ConfigError("drop_rate must be in [0, 1)");
        if (!std::isfinite(scale)) throw ConfigError("scale must be finite");
        if (!weights.empty() && weights.size() != num_deltas)
            throw ConfigError("recipe has " + std::to_string(weights.size()) +
                              " weights for " + std::to_string(num_deltas) + " deltas");
        for (float w : weights)
            if (!(w > 0.0f) || !std::isfinite(w))
                throw ConfigError("expert weights must be positive and finite");
    }

    std::vector<float> effective_weights(size_t num_deltas) const {
        if (weights.empty()) return std::vector<float>(num_deltas, 1.0f);
        return weights;
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"method", samkit::to_string(method)}, {"density", density},
                              {"drop_rate", drop_rate},             {"scale", scale},
                              {"weights", weights},                 {"seed", seed}};
    }

    static MergeRecipe from_json(const nlohmann::json& doc) {
        if (!doc.is_object()) throw ConfigError("merge recipe must be a JSON object");
        static const std::vector<std::string> known = {"method", "density", "drop_rate",
                                                       "scale",  "weights", "seed"};
        for (const auto& [key, value] : doc.items())
            if (std::find(known.begin(), known.end(), key) == known.end())
                throw ConfigError("unknown merge recipe key '" + key + "'");

        MergeRecipe r;
        if (!doc.contains("method") || !doc["method"].is_string())
            throw ConfigError("merge recipe requires a string 'method'");
        r.method = merge_method_from_string(doc["method"].get<std::string>());
        auto number = [&](const char* key, float fallback) {
            if (!doc.contains(key)) return fallback;
            if (!doc[key].is_number()) throw ConfigError(std::string("recipe key '") + key + "' must be a number");
            return doc[key].get<float>();
        };
        r.density = number("density", r.density);
        r.drop_rate = number("drop_rate", r.drop_rate);
        r.scale = number("scale", r.scale);
        if (doc.contains("weights")) {
            if (!doc["weights"].is_array()) throw ConfigError("recipe 'weights' must be an array");
            for (const auto& w : doc["weights"]) {
                if (!w.is_number()) throw ConfigError("recipe 'weights' must contain numbers");
                r.weights.push_back(w.get<float>());
            }
        }
        if (doc.contains("seed")) {
            if (!doc["seed"].is_number_integer() ||
                (doc["seed"].is_number_integer() && !doc["seed"].is_number_unsigned() &&
                 doc["seed"].get<int64_t>() < 0))
                throw ConfigError("recipe 'seed' must be a non-negative integer");
            r.seed = doc["seed"].get<uint64_t>();
        }
        return r;
    }
};

/// Per-tensor diagnostics from a TIES merge.
struct TensorMergeStats {
    uint64_t total = 0;               // coordinates in the tensor
    uint64_t trimmed_per_expert = 0;  // coordinates zeroed by TRIM, per expert
    uint64_t sign_conflicts = 0;      // coordinates where kept values disagree in sign
    uint64_t zeroed_no_agreement = 0; // nonzero evidence but merged value 0
};

struct MergeReport {
    std::map<std::string, TensorMergeStats> tensors;

    nlohmann::json to_json() const {
        nlohmann::json out = nlohmann::json::object();
        for (const auto& [name, s] : tensors)
            out[name] = {{"total", s.total},
                         {"trimmed_per_expert", s.trimmed_per_expert},
                         {"sign_conflicts", s.sign_conflicts},
                         {"zeroed_no_agreement", s.zeroed_no_agreement}};
        return out;
    }
};

namespace detail {

inline void check_merge_inputs(const std::vector<DeltaSet>& deltas,
                               const std::vector<float>& weights) {
    if (deltas.empty()) throw EmptyInput("merge requires at least one delta");
    if (weights.size() != deltas.size())
        throw InvalidValue("got " + std::to_string(weights.size()) + " weights for " +
                           std::to_string(deltas.size()) + " deltas");
    for (float w : weights)
        if (!(w > 0.0f) || !std::isfinite(w))
            throw InvalidValue("expert weights must be positive and finite");
    for (size_t i = 1; i < deltas.size(); ++i)
        check_same_structure(deltas[0].tensors, deltas[i].tensors, "delta[0]",
                             "delta[" + std::to_string(i) + "]");
}

/// Output skeleton sharing the inputs' key set and shapes, zero-filled.
inline DeltaSet merge_skeleton(const DeltaSet& like, const std::string& origin) {
    DeltaSet out;
    out.origin = origin;
    for (const auto& [name, t] : like.tensors.entries) {
        Tensor z;
        z.shape = t.shape;
        z.data.assign(static_cast<size_t>(t.numel()), 0.0f);
        out.tensors.entries.emplace(name, std::move(z));
    }
    return out;
}

/// ⌈density·d⌉ with a relative guard so that f32 densities naming exact
/// fractions (1/3, 0.2, …) land on the mathematically intended count.
inline size_t trim_keep_count(float density, size_t d) {
    const double x = static_cast<double>(density) * static_cast<double>(d);
    const auto keep = static_cast<size_t>(std::ceil(x * (1.0 - 1e-6)));
    return std::clamp<size_t>(keep, 1, d);
}

/// TRIM stage: keep flags for the ⌈density·d⌉ largest-magnitude coordinates.
/// Boundary ties go to the lower coordinate index.
inline std::vector<char> trim_mask(const std::vector<float>& values, float density) {
    const size_t d = values.size();
    const size_t keep = trim_keep_count(density, d);
    std::vector<char> mask(d, 0);
    if (keep >= d) {
        std::fill(mask.begin(), mask.end(), 1);
        return mask;
    }
    std::vector<uint32_t> order(d);
    std::iota(order.begin(), order.end(), 0);
    auto ranks_before = [&](uint32_t a, uint32_t b) {
        const float ma = std::fabs(values[a]);
        const float mb = std::fabs(values[b]);
        if (ma != mb) return ma > mb;
        return a < b;
    };
    std::nth_element(order.begin(), order.begin() + static_cast<ptrdiff_t>(keep) - 1,
                     order.end(), ranks_before);
    for (size_t i = 0; i < keep; ++i) mask[order[i]] = 1;
    return mask;
}

}  // namespace detail

/// Weighted mean of the deltas: Σ wᵢ·δᵢ / Σ wᵢ.
inline DeltaSet merge_linear(const std::vector<DeltaSet>& deltas,
                             const std::vector<float>& weights) {
    detail::check_merge_inputs(deltas, weights);
    const double weight_sum = std::accumulate(weights.begin(), weights.end(), 0.0);
    DeltaSet out = detail::merge_skeleton(deltas[0], "merged:linear");

    std::vector<std::string> names;
    for (const auto& [name, t] : out.tensors.entries) names.push_back(name);
    parallel_for(names.size(), [&](size_t ni) {
        Tensor& dst = out.tensors.entries.at(names[ni]);
        std::vector<double> acc(dst.data.size(), 0.0);
        for (size_t e = 0; e < deltas.size(); ++e) {
            const Tensor& src = deltas[e].tensors.entries.at(names[ni]);
            const double w = weights[e];
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += w * src.data[i];
        }
        for (size_t i = 0; i < acc.size(); ++i)
            dst.data[i] = static_cast<float>(acc[i] / weight_sum);
    });
    return out;
}

/// Weighted sum scaled by λ: scale · Σ wᵢ·δᵢ (no normalization).
inline DeltaSet merge_task_arithmetic(const std::vector<DeltaSet>& deltas,
                                      const std::vector<float>& weights, float scale) {
    detail::check_merge_inputs(deltas, weights);
    if (!std::isfinite(scale)) throw InvalidValue("scale must be finite");
    DeltaSet out = detail::merge_skeleton(deltas[0], "merged:task_arithmetic");

    std::vector<std::string> names;
    for (const auto& [name, t] : out.tensors.entries) names.push_back(name);
    parallel_for(names.size(), [&](size_t ni) {
        Tensor& dst = out.tensors.entries.at(names[ni]);
        std::vector<double> acc(dst.data.size(), 0.0);
        for (size_t e = 0; e < deltas.size(); ++e) {
            const Tensor& src = deltas[e].tensors.entries.at(names[ni]);
            const double w = weights[e];
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += w * src.data[i];
        }
        for (size_t i = 0; i < acc.size(); ++i)
            dst.data[i] = static_cast<float>(scale * acc[i]);
    });
    return out;
}

/// TIES: trim each weighted delta to its largest-magnitude coordinates, elect
/// a per-coordinate sign from the trimmed sum, then average the experts that
/// agree with the elected sign. Sign ties resolve to zero.
inline std::pair<DeltaSet, MergeReport> ties_merge(const std::vector<DeltaSet>& deltas,
                                                   const std::vector<float>& weights,
                                                   float density, float scale) {
    detail::check_merge_inputs(deltas, weights);
    if (!(density > 0.0f && density <= 1.0f))
        throw InvalidValue("density must be in (0, 1]");
    if (!std::isfinite(scale)) throw InvalidValue("scale must be finite");

    DeltaSet out = detail::merge_skeleton(deltas[0], "merged:ties");
    MergeReport report;
    std::vector<std::string> names;
    for (const auto& [name, t] : out.tensors.entries) {
        names.push_back(name);
        report.tensors[name] = TensorMergeStats{};
    }

    parallel_for(names.size(), [&](size_t ni) {
        const std::string& name = names[ni];
        Tensor& dst = out.tensors.entries.at(name);
        TensorMergeStats& stats = report.tensors.at(name);
        const size_t d = dst.data.size();
        stats.total = d;
        stats.trimmed_per_expert = d - detail::trim_keep_count(density, d);

        // Stage 1: weighted copies, trimmed per expert.
        std::vector<std::vector<float>> trimmed(deltas.size());
        for (size_t e = 0; e < deltas.size(); ++e) {
            const Tensor& src = deltas[e].tensors.entries.at(name);
            std::vector<float> scaled(d);
            for (size_t i = 0; i < d; ++i) scaled[i] = weights[e] * src.data[i];
            const std::vector<char> mask = detail::trim_mask(scaled, density);
            for (size_t i = 0; i < d; ++i)
                if (!mask[i]) scaled[i] = 0.0f;
            trimmed[e] = std::move(scaled);
        }

        // Stages 2+3: elect sign, average the agreeing experts.
        for (size_t i = 0; i < d; ++i) {
            double sum = 0.0;
            bool has_pos = false, has_neg = false;
            for (size_t e = 0; e < deltas.size(); ++e) {
                const float v = trimmed[e][i];
                sum += v;
                if (v > 0.0f) has_pos = true;
                if (v < 0.0f) has_neg = true;
            }
            if (has_pos && has_neg) ++stats.sign_conflicts;
            const int sign = sum > 0.0 ? 1 : (sum < 0.0 ? -1 : 0);
            if (sign == 0) {
                if (has_pos || has_neg) ++stats.zeroed_no_agreement;
                dst.data[i] = 0.0f;
                continue;
            }
            double agree_sum = 0.0;
            size_t agree_count = 0;
            for (size_t e = 0; e < deltas.size(); ++e) {
                const float v = trimmed[e][i];
                if ((sign > 0 && v > 0.0f) || (sign < 0 && v < 0.0f)) {
                    agree_sum += v;
                    ++agree_count;
                }
            }
            dst.data[i] = static_cast<float>(scale * (agree_sum / agree_count));
        }
    });
    return {std::move(out), std::move(report)};
}

/// DARE preprocessing: drop each coordinate with probability drop_rate and
/// rescale survivors by 1/(1−drop_rate), so the delta stays unbiased. Each
/// tensor gets an independent stream derived from (seed, tensor name), making
/// the result independent of iteration order.
inline DeltaSet dare_preprocess(const DeltaSet& delta, float drop_rate, uint64_t seed) {
    if (!(drop_rate >= 0.0f && drop_rate < 1.0f))
        throw InvalidValue("drop_rate must be in [0, 1)");
    DeltaSet out;
    out.origin = delta.origin;
    out.tensors.metadata = delta.tensors.metadata;
    const float boost = 1.0f / (1.0f - drop_rate);
    for (const auto& [name, src] : delta.tensors.entries) {
        Tensor t;
        t.shape = src.shape;
        t.data.resize(src.data.size());
        SplitMix64 rng(derive_seed(seed, name));
        for (size_t i = 0; i < src.data.size(); ++i) {
            const bool dropped = rng.next_double() < static_cast<double>(drop_rate);
            t.data[i] = dropped ? 0.0f : src.data[i] * boost;
        }
        out.tensors.entries.emplace(name, std::move(t));
    }
    return out;
}

/// Recipe dispatch. DARE variants preprocess each expert's delta with a
/// per-expert seed (recipe seed XOR expert index) before the base method.
/// λ is applied exactly once, whichever path runs.
inline std::pair<DeltaSet, MergeReport> merge(const MergeRecipe& recipe,
                                              const std::vector<DeltaSet>& deltas) {
    if (deltas.empty()) throw EmptyInput("merge requires at least one delta");
    recipe.validate(deltas.size());
    const std::vector<float> weights = recipe.effective_weights(deltas.size());

    auto scaled = [&](DeltaSet&& d) {
        for (auto& [name, t] : d.tensors.entries)
            for (float& v : t.data) v *= recipe.scale;
        return std::move(d);
    };
    auto zero_report = [&](const DeltaSet& d) {
        MergeReport r;
        for (const auto& [name, t] : d.tensors.entries) {
            TensorMergeStats s;
            s.total = static_cast<uint64_t>(t.numel());
            r.tensors[name] = s;
        }
        return r;
    };
    auto dare_all = [&] {
        std::vector<DeltaSet> pre(deltas.size());
        parallel_for(deltas.size(), [&](size_t e) {
            pre[e] = dare_preprocess(deltas[e], recipe.drop_rate,
                                     recipe.seed ^ static_cast<uint64_t>(e));
        });
        return pre;
    };

    switch (recipe.method) {
        case MergeMethod::linear: {
            DeltaSet d = scaled(merge_linear(deltas, weights));
            MergeReport r = zero_report(d);
            return {std::move(d), std::move(r)};
        }
        case MergeMethod::task_arithmetic: {
            DeltaSet d = merge_task_arithmetic(deltas, weights, recipe.scale);
            MergeReport r = zero_report(d);
            return {std::move(d), std::move(r)};
        }
        case MergeMethod::ties:
            return ties_merge(deltas, weights, recipe.density, recipe.scale);
        case MergeMethod::dare_linear: {
            DeltaSet d = scaled(merge_linear(dare_all(), weights));
            MergeReport r = zero_report(d);
            return {std::move(d), std::move(r)};
        }
        case MergeMethod::dare_ties:
            return ties_merge(dare_all(), weights, recipe.density, recipe.scale);
    }
    throw InternalError("unreachable merge dispatch");
}

/// Rank-based weighting: (1.5, 1.0, 0.5) for three experts, generalized to a
/// linear ramp from 1.5 down to 0.5; a single expert gets weight 1.0.
inline std::vector<float> weights_mode1(size_t num_selected) {
    if (num_selected == 0) throw EmptyInput("weights_mode1 requires at least one expert");
    if (num_selected == 1) return {1.0f};
    std::vector<float> w(num_selected);
    const float step = 1.0f / static_cast<float>(num_selected - 1);
    for (size_t i = 0; i < num_selected; ++i)
        w[i] = 1.5f - step * static_cast<float>(i);
    return w;
}

/// Score-proportional weighting normalized by the median selected score
/// (even counts use the lower-middle value).
inline std::vector<float> weights_mode2(const std::vector<float>& scores) {
    if (scores.empty()) throw EmptyInput("weights_mode2 requires at least one score");
    for (float s : scores)
        if (!(s > 0.0f) || !std::isfinite(s))
            throw InvalidValue("weights_mode2 scores must be positive and finite");
    std::vector<float> sorted = scores;
    std::sort(sorted.begin(), sorted.end());
    const float median = sorted[(sorted.size() - 1) / 2];
    std::vector<float> w(scores.size());
    for (size_t i = 0; i < scores.size(); ++i) w[i] = scores[i] / median;
    return w;
}

}  // namespace samkit
