// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "samkit/embedding.hpp"
#include "samkit/errors.hpp"
#include "samkit/ner.hpp"
#include "samkit/parallel.hpp"
#include "samkit/rng.hpp"

namespace samkit {

// ---------------------------------------------------------------------------
// Endpoint configuration
// ---------------------------------------------------------------------------

enum class EndpointMode { generate_api, chat_compat, mock };

inline std::string to_string(EndpointMode mode) {
    switch (mode) {
        case EndpointMode::generate_api: return "generate_api";
        case EndpointMode::chat_compat: return "chat_compat";
        case EndpointMode::mock: return "mock";
    }
    throw InternalError("unhandled endpoint mode");
}

inline EndpointMode endpoint_mode_from_string(const std::string& s) {
    if (s == "generate_api") return EndpointMode::generate_api;
    if (s == "chat_compat") return EndpointMode::chat_compat;
    if (s == "mock") return EndpointMode::mock;
    throw ConfigError("unknown endpoint mode '" + s +
                      "' (expected generate_api, chat_compat, or mock)");
}

struct EndpointConfig {
    std::string base_url;
    EndpointMode mode = EndpointMode::generate_api;
    double timeout_s = 30.0;
    std::size_t max_concurrency = 8;
    std::size_t max_retries = 2;
    std::string auth_token;            // empty -> fall back to SAMKIT_AUTH_TOKEN
    std::uint64_t backoff_base_ms = 500;

    void validate() const {
        if (max_concurrency < 1) {
            throw ConfigError("endpoint max_concurrency must be at least 1");
        }
        if (!(timeout_s > 0.0) || !std::isfinite(timeout_s)) {
            throw ConfigError("endpoint timeout must be a positive number of seconds");
        }
        if (mode != EndpointMode::mock && base_url.empty()) {
            throw ConfigError("endpoint base_url must be set for HTTP modes");
        }
    }

    // auth_token is deliberately omitted: serialized configs end up in run
    // manifests, which must never carry credentials.
    nlohmann::json to_json() const {
        return nlohmann::json{{"base_url", base_url},
                              {"mode", samkit::to_string(mode)},
                              {"timeout_s", timeout_s},
                              {"max_concurrency", max_concurrency},
                              {"max_retries", max_retries},
                              {"backoff_base_ms", backoff_base_ms}};
    }

    static EndpointConfig from_json(const nlohmann::json& doc) {
        if (!doc.is_object()) throw ConfigError("endpoint config must be a JSON object");
        static const std::vector<std::string> known = {
            "base_url",    "mode",        "timeout_s",      "max_concurrency",
            "max_retries", "auth_token",  "backoff_base_ms"};
        for (const auto& [key, value] : doc.items()) {
            if (std::find(known.begin(), known.end(), key) == known.end()) {
                throw ConfigError("unknown endpoint config key '" + key + "'");
            }
        }
        EndpointConfig cfg;
        if (doc.contains("base_url")) {
            if (!doc.at("base_url").is_string()) {
                throw ConfigError("endpoint base_url must be a string");
            }
            cfg.base_url = doc.at("base_url").get<std::string>();
        }
        if (doc.contains("mode")) {
            if (!doc.at("mode").is_string()) {
                throw ConfigError("endpoint mode must be a string");
            }
            cfg.mode = endpoint_mode_from_string(doc.at("mode").get<std::string>());
        }
        auto number = [&](const char* key, double fallback) {
            if (!doc.contains(key)) return fallback;
            if (!doc.at(key).is_number()) {
                throw ConfigError(std::string("endpoint ") + key + " must be a number");
            }
            return doc.at(key).get<double>();
        };
        cfg.timeout_s = number("timeout_s", cfg.timeout_s);
        cfg.max_concurrency = static_cast<std::size_t>(
            number("max_concurrency", static_cast<double>(cfg.max_concurrency)));
        cfg.max_retries = static_cast<std::size_t>(
            number("max_retries", static_cast<double>(cfg.max_retries)));
        cfg.backoff_base_ms = static_cast<std::uint64_t>(
            number("backoff_base_ms", static_cast<double>(cfg.backoff_base_ms)));
        if (doc.contains("auth_token")) {
            if (!doc.at("auth_token").is_string()) {
                throw ConfigError("endpoint auth_token must be a string");
            }
            cfg.auth_token = doc.at("auth_token").get<std::string>();
        }
        return cfg;
    }
};

// Resolved bearer token: explicit config wins, then the SAMKIT_AUTH_TOKEN
// environment variable; empty means unauthenticated.
inline std::string resolve_auth_token(const EndpointConfig& cfg) {
    if (!cfg.auth_token.empty()) return cfg.auth_token;
    if (const char* env = std::getenv("SAMKIT_AUTH_TOKEN")) return env;
    return std::string{};
}

// ---------------------------------------------------------------------------
// Requests
// ---------------------------------------------------------------------------

struct GenerationRequest {
    std::string prompt;
    float temperature = 0.0f;
    std::size_t max_tokens = 256;
    std::vector<std::string> stop;

    void validate() const {
        if (!(temperature >= 0.0f) || !std::isfinite(temperature)) {
            throw InvalidValue("generation temperature must be finite and >= 0");
        }
        if (max_tokens < 1) {
            throw InvalidValue("generation max_tokens must be at least 1");
        }
    }
};

// ---------------------------------------------------------------------------
// Mock backend: a pure function of (profile, instance)
// ---------------------------------------------------------------------------

struct MockProfile {
    std::map<std::string, float> recall_by_type;  // absent type -> recall 0
    float spurious_rate = 0.0f;
    std::uint64_t seed = 0;

    void validate() const {
        for (const auto& [etype, p] : recall_by_type) {
            if (!(p >= 0.0f && p <= 1.0f)) {
                throw ConfigError("mock recall for type '" + etype +
                                  "' must lie in [0, 1]");
            }
        }
        if (!(spurious_rate >= 0.0f && spurious_rate <= 1.0f)) {
            throw ConfigError("mock spurious_rate must lie in [0, 1]");
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json recalls = nlohmann::json::object();
        for (const auto& [etype, p] : recall_by_type) recalls[etype] = p;
        return nlohmann::json{{"recall_by_type", recalls},
                              {"spurious_rate", spurious_rate},
                              {"seed", seed}};
    }

    static MockProfile from_json(const nlohmann::json& doc) {
        if (!doc.is_object()) throw ConfigError("mock profile must be a JSON object");
        MockProfile p;
        if (doc.contains("recall_by_type")) {
            const auto& recalls = doc.at("recall_by_type");
            if (!recalls.is_object()) {
                throw ConfigError("mock recall_by_type must be an object");
            }
            for (const auto& [etype, v] : recalls.items()) {
                if (!v.is_number()) {
                    throw ConfigError("mock recall for type '" + etype +
                                      "' must be a number");
                }
                p.recall_by_type[etype] = v.get<float>();
            }
        }
        if (doc.contains("spurious_rate")) {
            if (!doc.at("spurious_rate").is_number()) {
                throw ConfigError("mock spurious_rate must be a number");
            }
            p.spurious_rate = doc.at("spurious_rate").get<float>();
        }
        if (doc.contains("seed")) {
            const auto& v = doc.at("seed");
            if (!v.is_number_unsigned() &&
                !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
                throw ConfigError("mock profile seed must be a non-negative integer");
            }
            p.seed = v.get<std::uint64_t>();
        }
        p.validate();
        return p;
    }
};

// Profiles file: {"expert_id": {profile}, ...}
inline std::map<std::string, MockProfile> load_mock_profiles(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open mock profiles file: " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("mock profiles file is not valid JSON: " +
                          std::string(e.what()));
    }
    if (!doc.is_object()) {
        throw FormatError("mock profiles file must hold a JSON object keyed by expert id");
    }
    std::map<std::string, MockProfile> out;
    for (const auto& [id, body] : doc.items()) {
        try {
            out[id] = MockProfile::from_json(body);
        } catch (const ConfigError& e) {
            throw ConfigError("mock profile for expert '" + id + "': " + e.what());
        }
    }
    return out;
}

// A model built by merging experts behaves, in mock form, like the best of its
// members per type: per-type maximum recall, averaged spurious rate, and a
// seed folded from the member seeds so distinct combinations stay distinct.
inline MockProfile combine_mock_profiles(const std::vector<MockProfile>& members) {
    if (members.empty()) throw EmptyInput("cannot combine zero mock profiles");
    MockProfile out;
    double spurious_sum = 0.0;
    std::uint64_t seed = 0x9e3779b97f4a7c15ull;
    for (const auto& m : members) {
        m.validate();
        for (const auto& [etype, p] : m.recall_by_type) {
            auto it = out.recall_by_type.find(etype);
            if (it == out.recall_by_type.end()) {
                out.recall_by_type[etype] = p;
            } else {
                it->second = std::max(it->second, p);
            }
        }
        spurious_sum += static_cast<double>(m.spurious_rate);
        seed ^= m.seed + 0x9e3779b97f4a7c15ull + (seed << 6) + (seed >> 2);
    }
    out.spurious_rate =
        static_cast<float>(spurious_sum / static_cast<double>(members.size()));
    out.seed = seed;
    return out;
}

// Prompts carry an explicit instance marker so the mock backend can look up
// gold labels; real endpoints simply see it as part of the prompt text.
inline std::string format_instance_marker(const std::string& instance_id) {
    return "[instance: " + instance_id + "]";
}

inline std::optional<std::string> extract_instance_marker(const std::string& prompt) {
    static const std::string kPrefix = "[instance: ";
    const auto start = prompt.find(kPrefix);
    if (start == std::string::npos) return std::nullopt;
    const auto id_begin = start + kPrefix.size();
    const auto end = prompt.find(']', id_begin);
    if (end == std::string::npos) return std::nullopt;
    return prompt.substr(id_begin, end - id_begin);
}

// Deterministic prediction for one gold-labeled instance: keep each gold
// mention with probability recall_by_type[type] (absent -> 0), then with
// probability spurious_rate inject one synthetic mention. Draw order is the
// gold set's sorted order, so output depends only on (profile, instance).
inline std::string mock_predict(const MockProfile& profile, const Instance& instance) {
    profile.validate();
    SplitMix64 rng(derive_seed(profile.seed, instance.instance_id));
    nlohmann::json out = nlohmann::json::object();
    for (const auto& mention : instance.gold.mentions) {
        float recall = 0.0f;
        auto it = profile.recall_by_type.find(mention.etype);
        if (it != profile.recall_by_type.end()) recall = it->second;
        if (rng.next_double() < static_cast<double>(recall)) {
            out[mention.span] = mention.etype;
        }
    }
    if (rng.next_double() < static_cast<double>(profile.spurious_rate)) {
        const auto tag = 1 + rng.next_below(9999);
        out["spurious entity " + std::to_string(tag)] = "misc";
    }
    return out.dump();
}

constexpr std::size_t kMockEmbedDim = 32;

// Hash-derived unit vector: signed bag-of-token-hashes over lowercased
// alphanumeric tokens, L2-normalized. Same text -> same vector, always.
inline Embedding mock_embed_text(const std::string& text) {
    Embedding e;
    e.values.assign(kMockEmbedDim, 0.0f);
    std::string token;
    auto flush = [&]() {
        if (token.empty()) return;
        const std::uint64_t h = fnv1a(token);
        const auto idx = static_cast<std::size_t>(h % kMockEmbedDim);
        const float sign = ((h >> 32) & 1u) ? 1.0f : -1.0f;
        e.values[idx] += sign;
        token.clear();
    };
    for (const char c : text) {
        const auto uc = static_cast<unsigned char>(c);
        if (std::isalnum(uc)) {
            token.push_back(static_cast<char>(std::tolower(uc)));
        } else {
            flush();
        }
    }
    flush();
    double norm_sq = 0.0;
    for (const float v : e.values) norm_sq += static_cast<double>(v) * v;
    if (norm_sq <= 0.0) {
        e.values[0] = 1.0f;
        return e;
    }
    const auto inv = static_cast<float>(1.0 / std::sqrt(norm_sq));
    for (float& v : e.values) v *= inv;
    return e;
}

// In-process stand-in for an inference service. Generation resolves the
// instance marker in the prompt against a gold table and runs mock_predict;
// unknown or missing markers yield an empty prediction object.
struct MockBackend {
    MockProfile profile;
    std::map<std::string, Instance> instances;

    std::string generate_text(const std::string& prompt) const {
        const auto id = extract_instance_marker(prompt);
        if (!id) return "{}";
        const auto it = instances.find(*id);
        if (it == instances.end()) return "{}";
        return mock_predict(profile, it->second);
    }

    std::vector<Embedding> embed(const std::vector<std::string>& texts) const {
        std::vector<Embedding> out;
        out.reserve(texts.size());
        for (const auto& t : texts) out.push_back(mock_embed_text(t));
        return out;
    }
};

// ---------------------------------------------------------------------------
// Batch results
// ---------------------------------------------------------------------------

struct BatchItem {
    bool ok = false;
    std::string text;
    ErrorKind error_kind = ErrorKind::internal;
    std::string error_message;
};

// ---------------------------------------------------------------------------
// HTTP client
// ---------------------------------------------------------------------------

namespace detail {

struct ParsedUrl {
    std::string host_port;  // "http://host:port" for httplib::Client
    std::string path_prefix;
};

inline ParsedUrl parse_base_url(const std::string& base_url) {
    const auto scheme_end = base_url.find("://");
    if (scheme_end == std::string::npos) {
        throw ConfigError("endpoint base_url must include a scheme, e.g. http://host:port");
    }
    const auto path_start = base_url.find('/', scheme_end + 3);
    ParsedUrl out;
    if (path_start == std::string::npos) {
        out.host_port = base_url;
    } else {
        out.host_port = base_url.substr(0, path_start);
        out.path_prefix = base_url.substr(path_start);
    }
    while (!out.path_prefix.empty() && out.path_prefix.back() == '/') {
        out.path_prefix.pop_back();
    }
    return out;
}

// Extract the most useful message from a non-2xx body: an "error" field when
// the body parses as JSON, otherwise the (truncated) raw body.
inline std::string remote_message(const std::string& body) {
    const auto doc = nlohmann::json::parse(body, nullptr, false);
    if (doc.is_object() && doc.contains("error")) {
        const auto& err = doc.at("error");
        if (err.is_string()) return err.get<std::string>();
        if (err.is_object() && err.contains("message") &&
            err.at("message").is_string()) {
            return err.at("message").get<std::string>();
        }
        return err.dump();
    }
    if (body.size() > 200) return body.substr(0, 200) + "...";
    return body;
}

inline std::uint64_t jitter_seed() {
    const auto now = std::chrono::steady_clock::now().time_since_epoch().count();
    return static_cast<std::uint64_t>(now) ^
           fnv1a("backoff-jitter") ^
           static_cast<std::uint64_t>(
               std::hash<std::thread::id>{}(std::this_thread::get_id()));
}

}  // namespace detail

class InferenceClient {
public:
    explicit InferenceClient(EndpointConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        if (cfg_.mode == EndpointMode::mock) {
            throw ConfigError("mock endpoint mode requires a mock backend");
        }
        (void)detail::parse_base_url(cfg_.base_url);  // fail fast on bad URLs
    }

    InferenceClient(EndpointConfig cfg, MockBackend backend)
        : cfg_(std::move(cfg)), mock_(std::move(backend)) {
        cfg_.validate();
        if (cfg_.mode != EndpointMode::mock) {
            throw ConfigError("a mock backend requires endpoint mode 'mock'");
        }
    }

    const EndpointConfig& config() const { return cfg_; }

    std::string generate(const GenerationRequest& req) const {
        req.validate();
        if (mock_) return mock_->generate_text(req.prompt);
        nlohmann::json body;
        std::string path;
        if (cfg_.mode == EndpointMode::chat_compat) {
            path = "/v1/chat/completions";
            body = {{"model", "default"},
                    {"messages", nlohmann::json::array({nlohmann::json{
                                     {"role", "user"}, {"content", req.prompt}}})},
                    {"temperature", req.temperature},
                    {"max_tokens", req.max_tokens},
                    {"stop", req.stop}};
        } else {
            path = "/generate";
            body = {{"prompt", req.prompt},
                    {"temperature", req.temperature},
                    {"max_tokens", req.max_tokens},
                    {"stop", req.stop}};
        }
        const auto response = post_with_retries(path, body.dump());
        if (cfg_.mode == EndpointMode::chat_compat) {
            return extract_chat_text(response);
        }
        return extract_generate_text(response);
    }

    std::vector<BatchItem> batch_generate(
        const std::vector<GenerationRequest>& reqs) const {
        std::vector<BatchItem> out(reqs.size());
        parallel_for(
            reqs.size(),
            [&](std::size_t i) {
                try {
                    out[i].text = generate(reqs[i]);
                    out[i].ok = true;
                } catch (const Error& e) {
                    out[i].error_kind = e.kind();
                    out[i].error_message = e.what();
                } catch (const std::exception& e) {
                    out[i].error_kind = ErrorKind::internal;
                    out[i].error_message = e.what();
                }
            },
            cfg_.max_concurrency);
        return out;
    }

    std::vector<Embedding> embed(const std::vector<std::string>& texts) const {
        if (texts.empty()) throw EmptyInput("embed requires at least one text");
        if (mock_) return mock_->embed(texts);
        std::string path;
        nlohmann::json body;
        if (cfg_.mode == EndpointMode::chat_compat) {
            path = "/v1/embeddings";
            body = {{"model", "default"}, {"input", texts}};
        } else {
            path = "/embed";
            body = {{"texts", texts}};
        }
        const auto response = post_with_retries(path, body.dump());
        return extract_vectors(response, texts.size());
    }

private:
    EndpointConfig cfg_;
    std::optional<MockBackend> mock_;

    struct HttpResponse {
        int status = 0;
        std::string body;
    };

    HttpResponse post_with_retries(const std::string& path,
                                   const std::string& payload) const {
        const auto url = detail::parse_base_url(cfg_.base_url);
        const std::string full_path = url.path_prefix + path;
        const std::string token = resolve_auth_token(cfg_);
        SplitMix64 jitter(detail::jitter_seed());

        std::string last_failure = "no attempt made";
        const std::size_t attempts = cfg_.max_retries + 1;
        for (std::size_t attempt = 0; attempt < attempts; ++attempt) {
            if (attempt > 0) {
                const double factor = 0.5 + 0.5 * jitter.next_double();
                const double delay =
                    static_cast<double>(cfg_.backoff_base_ms) *
                    static_cast<double>(1ull << (attempt - 1)) * factor;
                std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(delay));
            }

            httplib::Client http(url.host_port);
            const auto timeout =
                std::chrono::duration<double>(cfg_.timeout_s);
            http.set_connection_timeout(timeout);
            http.set_read_timeout(timeout);
            http.set_write_timeout(timeout);
            httplib::Headers headers;
            if (!token.empty()) {
                headers.emplace("Authorization", "Bearer " + token);
            }

            auto res = http.Post(full_path, headers, payload, "application/json");
            if (!res) {
                last_failure = "transport error: " + httplib::to_string(res.error());
                continue;  // connection failures and timeouts are transient
            }
            if (res->status >= 200 && res->status < 300) {
                return HttpResponse{res->status, res->body};
            }
            if (res->status >= 500) {
                last_failure = "server returned status " + std::to_string(res->status);
                continue;  // 5xx is transient
            }
            throw RemoteError(res->status, detail::remote_message(res->body));
        }
        throw EndpointUnavailable("request to " + cfg_.base_url + full_path +
                                  " failed after " + std::to_string(attempts) +
                                  " attempt(s); last failure: " + last_failure);
    }

    static std::string extract_generate_text(const HttpResponse& response) {
        const auto doc = nlohmann::json::parse(response.body, nullptr, false);
        if (!doc.is_object() || !doc.contains("text") || !doc.at("text").is_string()) {
            throw RemoteError(response.status,
                              "response body lacks a string 'text' field");
        }
        return doc.at("text").get<std::string>();
    }

    static std::string extract_chat_text(const HttpResponse& response) {
        const auto doc = nlohmann::json::parse(response.body, nullptr, false);
        if (doc.is_object() && doc.contains("choices") && doc.at("choices").is_array() &&
            !doc.at("choices").empty()) {
            const auto& first = doc.at("choices").at(0);
            if (first.is_object() && first.contains("message")) {
                const auto& msg = first.at("message");
                if (msg.is_object() && msg.contains("content") &&
                    msg.at("content").is_string()) {
                    return msg.at("content").get<std::string>();
                }
            }
        }
        throw RemoteError(response.status,
                          "chat response lacks choices[0].message.content");
    }

    std::vector<Embedding> extract_vectors(const HttpResponse& response,
                                           std::size_t expected) const {
        const auto doc = nlohmann::json::parse(response.body, nullptr, false);
        nlohmann::json vectors;
        if (cfg_.mode == EndpointMode::chat_compat) {
            if (!doc.is_object() || !doc.contains("data") || !doc.at("data").is_array()) {
                throw RemoteError(response.status,
                                  "embeddings response lacks a 'data' array");
            }
            vectors = nlohmann::json::array();
            for (const auto& item : doc.at("data")) {
                if (!item.is_object() || !item.contains("embedding")) {
                    throw RemoteError(response.status,
                                      "embeddings item lacks an 'embedding' field");
                }
                vectors.push_back(item.at("embedding"));
            }
        } else {
            if (!doc.is_object() || !doc.contains("vectors") ||
                !doc.at("vectors").is_array()) {
                throw RemoteError(response.status,
                                  "embed response lacks a 'vectors' array");
            }
            vectors = doc.at("vectors");
        }
        if (vectors.size() != expected) {
            throw RemoteError(response.status,
                              "embed response has " + std::to_string(vectors.size()) +
                                  " vectors for " + std::to_string(expected) + " texts");
        }
        std::vector<Embedding> out;
        out.reserve(vectors.size());
        std::size_t dim = 0;
        for (const auto& vec : vectors) {
            if (!vec.is_array() || vec.empty()) {
                throw RemoteError(response.status,
                                  "embed response vector is not a non-empty array");
            }
            Embedding e;
            e.values.reserve(vec.size());
            for (const auto& v : vec) {
                if (!v.is_number()) {
                    throw RemoteError(response.status,
                                      "embed response vector holds a non-number");
                }
                const float value = v.get<float>();
                if (!std::isfinite(value)) {
                    throw RemoteError(response.status,
                                      "embed response vector holds a non-finite value");
                }
                e.values.push_back(value);
            }
            if (dim == 0) {
                dim = e.dim();
            } else if (e.dim() != dim) {
                throw RemoteError(response.status,
                                  "embed response mixes dimensions " +
                                      std::to_string(dim) + " and " +
                                      std::to_string(e.dim()));
            }
            out.push_back(std::move(e));
        }
        return out;
    }
};

}  // namespace samkit
