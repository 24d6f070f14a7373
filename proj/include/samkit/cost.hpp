// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <limits>
#include <string>

#include <json.hpp>

#include "samkit/errors.hpp"

namespace samkit {

// ---------------------------------------------------------------------------
// Parameter-count cost model
//
// Storage cost of serving one base checkpoint plus n low-rank expert deltas:
//   per-expert adapter parameters: 18·H·r·L
//   base model parameters:         (12·H² + 13·H)·L + V·H
//   normalized storage:            1 + n·18·H·r·L / base
// ---------------------------------------------------------------------------

struct CostQuery {
    std::uint64_t hidden_dim = 4096;    // H: model (hidden) dimension
    std::uint64_t lora_rank = 32;       // r: adapter rank; 0 means no adapter
    std::uint64_t layers = 32;          // L: transformer layer count
    std::uint64_t vocab_size = 128000;  // V: vocabulary size
    std::uint64_t num_experts = 1;      // n: expert deltas kept alongside the base

    // Dimensions must be positive; rank and expert count may be zero
    // (degenerate but well-defined: no adapter storage). The 2^32 ceiling
    // keeps every intermediate product inside 128-bit arithmetic.
    void validate() const {
        const std::uint64_t limit = std::uint64_t{1} << 32;
        auto check = [&](std::uint64_t v, const char* name, std::uint64_t lo) {
            if (v < lo) {
                throw ConfigError(std::string("cost query ") + name +
                                  " must be at least " + std::to_string(lo));
            }
            if (v > limit) {
                throw ConfigError(std::string("cost query ") + name +
                                  " exceeds the supported range (2^32)");
            }
        };
        check(hidden_dim, "hidden_dim", 1);
        check(lora_rank, "lora_rank", 0);
        check(layers, "layers", 1);
        check(vocab_size, "vocab_size", 1);
        check(num_experts, "num_experts", 0);
    }
};

namespace detail {

inline std::uint64_t narrow_count(unsigned __int128 v, const char* what) {
    if (v > static_cast<unsigned __int128>(std::numeric_limits<std::uint64_t>::max())) {
        throw InvalidValue(std::string(what) + " overflows a 64-bit parameter count");
    }
    return static_cast<std::uint64_t>(v);
}

inline std::string group_digits(std::uint64_t v) {
    std::string raw = std::to_string(v);
    std::string out;
    out.reserve(raw.size() + raw.size() / 3);
    std::size_t lead = raw.size() % 3 == 0 ? 3 : raw.size() % 3;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (i > 0 && (i - lead) % 3 == 0 && i >= lead) out.push_back(',');
        out.push_back(raw[i]);
    }
    return out;
}

}  // namespace detail

struct CostReport {
    CostQuery query;
    std::uint64_t per_expert_params = 0;  // 18·H·r·L
    std::uint64_t all_expert_params = 0;  // n · per-expert
    std::uint64_t base_params = 0;        // (12·H² + 13·H)·L + V·H
    double per_expert_overhead = 0.0;     // per-expert / base
    double normalized_storage = 1.0;      // 1 + all-experts / base
    // Widely quoted rule of thumb of 0.02 extra per expert, reported next to
    // the computed overhead so mismatched rank assumptions are visible.
    double nominal_normalized_storage = 1.0;  // 1 + 0.02·n

    nlohmann::json to_json() const {
        return nlohmann::json{
            {"query",
             {{"hidden_dim", query.hidden_dim},
              {"lora_rank", query.lora_rank},
              {"layers", query.layers},
              {"vocab_size", query.vocab_size},
              {"num_experts", query.num_experts}}},
            {"per_expert_params", per_expert_params},
            {"all_expert_params", all_expert_params},
            {"base_params", base_params},
            {"per_expert_overhead", per_expert_overhead},
            {"normalized_storage", normalized_storage},
            {"nominal_normalized_storage", nominal_normalized_storage}};
    }
};

inline CostReport compute_cost(const CostQuery& q) {
    q.validate();
    using u128 = unsigned __int128;
    const u128 H = q.hidden_dim;
    const u128 r = q.lora_rank;
    const u128 L = q.layers;
    const u128 V = q.vocab_size;
    const u128 n = q.num_experts;

    CostReport report;
    report.query = q;
    report.per_expert_params =
        detail::narrow_count(static_cast<u128>(18) * H * r * L, "per-expert params");
    report.all_expert_params =
        detail::narrow_count(n * static_cast<u128>(report.per_expert_params),
                             "all-expert params");
    report.base_params = detail::narrow_count(
        (static_cast<u128>(12) * H * H + static_cast<u128>(13) * H) * L + V * H,
        "base params");
    report.per_expert_overhead = static_cast<double>(report.per_expert_params) /
                                 static_cast<double>(report.base_params);
    report.normalized_storage = 1.0 + static_cast<double>(report.all_expert_params) /
                                          static_cast<double>(report.base_params);
    report.nominal_normalized_storage =
        1.0 + 0.02 * static_cast<double>(q.num_experts);
    return report;
}

inline std::string format_cost_report(const CostReport& r) {
    char buf[160];
    std::string out;
    out += "parameter storage cost\n";
    auto line = [&](const char* label, const std::string& value) {
        std::snprintf(buf, sizeof(buf), "  %-28s %s\n", label, value.c_str());
        out += buf;
    };
    line("hidden_dim (H)", std::to_string(r.query.hidden_dim));
    line("lora_rank (r)", std::to_string(r.query.lora_rank));
    line("layers (L)", std::to_string(r.query.layers));
    line("vocab_size (V)", std::to_string(r.query.vocab_size));
    line("num_experts (n)", std::to_string(r.query.num_experts));
    line("per-expert adapter params", detail::group_digits(r.per_expert_params) +
                                          "  (18*H*r*L)");
    line("all-expert adapter params", detail::group_digits(r.all_expert_params));
    line("base model params",
         detail::group_digits(r.base_params) + "  ((12*H^2 + 13*H)*L + V*H)");
    std::snprintf(buf, sizeof(buf), "  %-28s %.4f  (1 + n*18*H*r*L / base)\n",
                  "normalized storage", r.normalized_storage);
    out += buf;
    std::snprintf(buf, sizeof(buf),
                  "  %-28s %.4f  (computed overhead per expert: %.4f)\n",
                  "nominal 0.02/expert figure", r.nominal_normalized_storage,
                  r.per_expert_overhead);
    out += buf;
    return out;
}

}  // namespace samkit
