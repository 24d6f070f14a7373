// SPDX-License-Identifier: Apache-2.0
#include "samkit/client.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "samkit/errors.hpp"
#include "samkit/ner.hpp"

namespace {

using namespace samkit;

// Scripted HTTP server bound to an ephemeral port. Handlers are registered
// before the listener starts so the routing table is never mutated while
// requests are in flight.
class StubServer {
public:
    explicit StubServer(const std::function<void(httplib::Server&)>& setup) {
        setup(server_);
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }

    ~StubServer() {
        server_.stop();
        if (thread_.joinable()) thread_.join();
    }

    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

EndpointConfig http_config(const std::string& url) {
    EndpointConfig cfg;
    cfg.base_url = url;
    cfg.mode = EndpointMode::generate_api;
    cfg.timeout_s = 5.0;
    cfg.max_retries = 2;
    cfg.backoff_base_ms = 5;  // keep retry tests fast
    return cfg;
}

Instance make_instance(const std::string& id,
                       const std::vector<std::pair<std::string, std::string>>& gold) {
    Instance inst;
    inst.instance_id = id;
    inst.text = "text for " + id;
    for (const auto& [span, etype] : gold) add_mention(inst.gold, span, etype);
    return inst;
}

// ---------------------------------------------------------------------------
// Configuration validation
// ---------------------------------------------------------------------------

TEST(EndpointConfigTest, RejectsZeroConcurrency) {
    EndpointConfig cfg = http_config("http://localhost:1");
    cfg.max_concurrency = 0;
    EXPECT_THROW(InferenceClient{cfg}, ConfigError);
}

TEST(EndpointConfigTest, RejectsNonPositiveTimeout) {
    EndpointConfig cfg = http_config("http://localhost:1");
    cfg.timeout_s = 0.0;
    EXPECT_THROW(InferenceClient{cfg}, ConfigError);
    cfg.timeout_s = -1.0;
    EXPECT_THROW(InferenceClient{cfg}, ConfigError);
}

TEST(EndpointConfigTest, HttpModesRequireBaseUrl) {
    EndpointConfig cfg;
    cfg.mode = EndpointMode::generate_api;
    EXPECT_THROW(InferenceClient{cfg}, ConfigError);
}

TEST(EndpointConfigTest, BaseUrlMustCarryScheme) {
    EndpointConfig cfg = http_config("localhost:8000");
    EXPECT_THROW(InferenceClient{cfg}, ConfigError);
}

TEST(EndpointConfigTest, MockModeRequiresBackend) {
    EndpointConfig cfg;
    cfg.mode = EndpointMode::mock;
    EXPECT_THROW(InferenceClient{cfg}, ConfigError);
}

TEST(EndpointConfigTest, BackendRequiresMockMode) {
    EndpointConfig cfg = http_config("http://localhost:1");
    EXPECT_THROW(InferenceClient(cfg, MockBackend{}), ConfigError);
}

TEST(EndpointConfigTest, ModeNamesRoundTrip) {
    for (const auto mode : {EndpointMode::generate_api, EndpointMode::chat_compat,
                            EndpointMode::mock}) {
        EXPECT_EQ(endpoint_mode_from_string(to_string(mode)), mode);
    }
    EXPECT_THROW(endpoint_mode_from_string("grpc"), ConfigError);
}

TEST(GenerationRequestTest, RejectsNegativeTemperature) {
    EndpointConfig cfg;
    cfg.mode = EndpointMode::mock;
    InferenceClient client(cfg, MockBackend{});
    GenerationRequest req;
    req.prompt = "hello";
    req.temperature = -0.5f;
    EXPECT_THROW(client.generate(req), InvalidValue);
    req.temperature = 0.0f;
    req.max_tokens = 0;
    EXPECT_THROW(client.generate(req), InvalidValue);
}

// ---------------------------------------------------------------------------
// Mock profile + mock_predict
// ---------------------------------------------------------------------------

TEST(MockProfileTest, ValidatesProbabilities) {
    MockProfile p;
    p.recall_by_type["person"] = 1.5f;
    EXPECT_THROW(p.validate(), ConfigError);
    p.recall_by_type["person"] = -0.1f;
    EXPECT_THROW(p.validate(), ConfigError);
    p.recall_by_type["person"] = 0.5f;
    p.spurious_rate = 1.2f;
    EXPECT_THROW(p.validate(), ConfigError);
    p.spurious_rate = 0.2f;
    EXPECT_NO_THROW(p.validate());
}

TEST(MockPredictTest, PerfectOracleReproducesGold) {
    MockProfile p;
    p.recall_by_type = {{"person", 1.0f}, {"organization", 1.0f}};
    p.spurious_rate = 0.0f;
    p.seed = 123;
    const auto inst = make_instance(
        "i1", {{"Steve Jobs", "person"}, {"Apple", "organization"}});
    const auto raw = mock_predict(p, inst);
    const auto parsed = parse_prediction(raw, PredictionFormat::json);
    EXPECT_EQ(parsed.mentions, inst.gold.mentions);
}

TEST(MockPredictTest, NullProfileEmitsNothing) {
    MockProfile p;  // empty recall map: every type defaults to recall 0
    p.seed = 9;
    const auto inst = make_instance("i1", {{"Steve Jobs", "person"}});
    const auto parsed = parse_prediction(mock_predict(p, inst), PredictionFormat::json);
    EXPECT_TRUE(parsed.mentions.empty());
}

TEST(MockPredictTest, DeterministicAcrossCalls) {
    MockProfile p;
    p.recall_by_type = {{"person", 0.5f}, {"location", 0.7f}};
    p.spurious_rate = 0.5f;
    p.seed = 77;
    const auto inst = make_instance(
        "i42", {{"Ada", "person"}, {"Paris", "location"}, {"Bob", "person"}});
    const auto first = mock_predict(p, inst);
    for (int i = 0; i < 5; ++i) EXPECT_EQ(mock_predict(p, inst), first);
}

TEST(MockPredictTest, DifferentSeedsDiverge) {
    MockProfile a;
    a.recall_by_type = {{"t", 0.5f}};
    a.seed = 1;
    MockProfile b = a;
    b.seed = 2;
    Instance inst;
    inst.instance_id = "x";
    for (int i = 0; i < 64; ++i) {
        add_mention(inst.gold, "entity " + std::to_string(1000 + i), "t");
    }
    EXPECT_NE(mock_predict(a, inst), mock_predict(b, inst));
}

TEST(MockPredictTest, HalfRecallKeepsAboutHalf) {
    MockProfile p;
    p.recall_by_type = {{"t", 0.5f}};
    p.spurious_rate = 0.0f;
    p.seed = 2024;
    Instance inst;
    inst.instance_id = "mc";
    for (int i = 0; i < 1000; ++i) {
        add_mention(inst.gold, "entity " + std::to_string(1000 + i), "t");
    }
    ASSERT_EQ(inst.gold.mentions.size(), 1000u);
    const auto parsed = parse_prediction(mock_predict(p, inst), PredictionFormat::json);
    const double kept = static_cast<double>(parsed.mentions.size()) / 1000.0;
    EXPECT_GE(kept, 0.45);
    EXPECT_LE(kept, 0.55);
    for (const auto& m : parsed.mentions) {
        EXPECT_TRUE(inst.gold.mentions.count(m)) << m.span;
    }
}

TEST(MockPredictTest, SpuriousRateOneInjectsOneExtra) {
    MockProfile p;
    p.recall_by_type = {{"person", 1.0f}};
    p.spurious_rate = 1.0f;
    p.seed = 5;
    const auto inst = make_instance("i1", {{"Ada", "person"}});
    const auto parsed = parse_prediction(mock_predict(p, inst), PredictionFormat::json);
    ASSERT_EQ(parsed.mentions.size(), 2u);
    std::size_t spurious = 0;
    for (const auto& m : parsed.mentions) {
        if (m.etype == "misc") {
            ++spurious;
            EXPECT_EQ(m.span.rfind("spurious entity", 0), 0u);
        }
    }
    EXPECT_EQ(spurious, 1u);
}

TEST(MockProfileTest, JsonRoundTrip) {
    MockProfile p;
    p.recall_by_type = {{"person", 0.9f}, {"location", 0.4f}};
    p.spurious_rate = 0.1f;
    p.seed = 31;
    const auto back = MockProfile::from_json(p.to_json());
    EXPECT_EQ(back.recall_by_type, p.recall_by_type);
    EXPECT_FLOAT_EQ(back.spurious_rate, p.spurious_rate);
    EXPECT_EQ(back.seed, p.seed);
}

TEST(MockProfileTest, FromJsonRejectsBadShapes) {
    EXPECT_THROW(MockProfile::from_json(nlohmann::json::array()), ConfigError);
    EXPECT_THROW(MockProfile::from_json(nlohmann::json{{"recall_by_type", 3}}),
                 ConfigError);
    EXPECT_THROW(
        MockProfile::from_json(nlohmann::json{{"recall_by_type", {{"t", "high"}}}}),
        ConfigError);
    EXPECT_THROW(MockProfile::from_json(nlohmann::json{{"seed", -4}}), ConfigError);
    EXPECT_THROW(MockProfile::from_json(nlohmann::json{{"spurious_rate", 2.0}}),
                 ConfigError);
}

TEST(MockProfileTest, CombineTakesPerTypeMaxAndMeanSpurious) {
    MockProfile a;
    a.recall_by_type = {{"person", 0.8f}, {"organization", 0.2f}};
    a.spurious_rate = 0.1f;
    a.seed = 1;
    MockProfile b;
    b.recall_by_type = {{"organization", 0.9f}};
    b.spurious_rate = 0.3f;
    b.seed = 2;
    const auto merged = combine_mock_profiles({a, b});
    ASSERT_EQ(merged.recall_by_type.size(), 2u);
    EXPECT_FLOAT_EQ(merged.recall_by_type.at("person"), 0.8f);
    EXPECT_FLOAT_EQ(merged.recall_by_type.at("organization"), 0.9f);
    EXPECT_NEAR(merged.spurious_rate, 0.2f, 1e-6f);
    // Deterministic, and sensitive to membership.
    EXPECT_EQ(combine_mock_profiles({a, b}).seed, merged.seed);
    EXPECT_NE(combine_mock_profiles({a}).seed, merged.seed);
    EXPECT_THROW(combine_mock_profiles({}), EmptyInput);
}

TEST(MockProfileTest, LoadProfilesFile) {
    const std::string path =
        "/tmp/samkit_profiles_" + std::to_string(::getpid()) + ".json";
    {
        std::ofstream out(path);
        out << R"({"e1": {"recall_by_type": {"person": 0.9}, "spurious_rate": 0.05,
                   "seed": 11},
                   "e2": {"recall_by_type": {"location": 1.0}}})";
    }
    const auto profiles = load_mock_profiles(path);
    ASSERT_EQ(profiles.size(), 2u);
    EXPECT_FLOAT_EQ(profiles.at("e1").recall_by_type.at("person"), 0.9f);
    EXPECT_EQ(profiles.at("e1").seed, 11u);
    EXPECT_FLOAT_EQ(profiles.at("e2").spurious_rate, 0.0f);
    std::remove(path.c_str());
    EXPECT_THROW(load_mock_profiles(path), IoError);
}

TEST(MockProfileTest, LoadProfilesRejectsBadFiles) {
    const std::string path =
        "/tmp/samkit_profiles_bad_" + std::to_string(::getpid()) + ".json";
    {
        std::ofstream out(path);
        out << "[1, 2, 3]";
    }
    EXPECT_THROW(load_mock_profiles(path), FormatError);
    {
        std::ofstream out(path);
        out << R"({"e1": {"recall_by_type": {"person": 1.5}}})";
    }
    EXPECT_THROW(load_mock_profiles(path), ConfigError);
    std::remove(path.c_str());
}

// ---------------------------------------------------------------------------
// Instance markers + mock embeddings
// ---------------------------------------------------------------------------

TEST(MarkerTest, RoundTripsThroughPrompt) {
    const auto marker = format_instance_marker("doc-17");
    const std::string prompt = "Extract the entities.\n" + marker + "\nSome text.";
    const auto id = extract_instance_marker(prompt);
    ASSERT_TRUE(id.has_value());
    EXPECT_EQ(*id, "doc-17");
    EXPECT_FALSE(extract_instance_marker("no marker here").has_value());
    EXPECT_FALSE(extract_instance_marker("[instance: unterminated").has_value());
}

TEST(MockEmbedTest, DeterministicUnitVectors) {
    const auto a = mock_embed_text("acute lymphoblastic leukemia");
    const auto b = mock_embed_text("acute lymphoblastic leukemia");
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.dim(), kMockEmbedDim);
    double norm = 0.0;
    for (const float v : a.values) norm += static_cast<double>(v) * v;
    EXPECT_NEAR(norm, 1.0, 1e-5);
}

TEST(MockEmbedTest, DifferentTextsDiffer) {
    const auto a = mock_embed_text("stock prices fell sharply");
    const auto b = mock_embed_text("the patient presented with fever");
    EXPECT_NE(a, b);
}

TEST(MockEmbedTest, CaseAndPunctuationInsensitive) {
    EXPECT_EQ(mock_embed_text("Hello, World!"), mock_embed_text("hello world"));
}

TEST(MockEmbedTest, EmptyTextStillUnitVector) {
    const auto e = mock_embed_text("");
    EXPECT_EQ(e.dim(), kMockEmbedDim);
    EXPECT_FLOAT_EQ(e.values[0], 1.0f);
}

// ---------------------------------------------------------------------------
// Mock client
// ---------------------------------------------------------------------------

InferenceClient make_mock_client(MockProfile profile,
                                 std::vector<Instance> instances) {
    MockBackend backend;
    backend.profile = std::move(profile);
    for (auto& inst : instances) {
        backend.instances[inst.instance_id] = std::move(inst);
    }
    EndpointConfig cfg;
    cfg.mode = EndpointMode::mock;
    cfg.max_concurrency = 4;
    return InferenceClient(cfg, std::move(backend));
}

TEST(MockClientTest, GenerateResolvesMarkerToGold) {
    MockProfile p;
    p.recall_by_type = {{"person", 1.0f}};
    const auto inst = make_instance("i9", {{"Grace Hopper", "person"}});
    auto client = make_mock_client(p, {inst});
    GenerationRequest req;
    req.prompt = "Find entities. " + format_instance_marker("i9");
    const auto parsed = parse_prediction(client.generate(req), PredictionFormat::json);
    EXPECT_EQ(parsed.mentions, inst.gold.mentions);
}

TEST(MockClientTest, UnknownOrMissingMarkerYieldsEmptyObject) {
    auto client = make_mock_client(MockProfile{}, {});
    GenerationRequest req;
    req.prompt = "no marker";
    EXPECT_EQ(client.generate(req), "{}");
    req.prompt = format_instance_marker("ghost");
    EXPECT_EQ(client.generate(req), "{}");
}

TEST(MockClientTest, RepeatedCallsIdentical) {
    MockProfile p;
    p.recall_by_type = {{"person", 0.6f}};
    p.spurious_rate = 0.4f;
    p.seed = 99;
    const auto inst =
        make_instance("i1", {{"Ada", "person"}, {"Alan", "person"}});
    auto client = make_mock_client(p, {inst});
    GenerationRequest req;
    req.prompt = format_instance_marker("i1");
    const auto first = client.generate(req);
    for (int i = 0; i < 3; ++i) EXPECT_EQ(client.generate(req), first);
}

TEST(MockClientTest, BatchMatchesSequentialCalls) {
    MockProfile p;
    p.recall_by_type = {{"t", 0.5f}};
    p.seed = 4;
    std::vector<Instance> instances;
    std::vector<GenerationRequest> reqs;
    for (int i = 0; i < 40; ++i) {
        const std::string id = "inst" + std::to_string(i);
        instances.push_back(make_instance(
            id, {{"entity " + std::to_string(i), "t"},
                 {"other " + std::to_string(i), "t"}}));
        GenerationRequest req;
        req.prompt = format_instance_marker(id);
        reqs.push_back(req);
    }
    auto client = make_mock_client(p, instances);
    std::vector<std::string> sequential;
    for (const auto& req : reqs) sequential.push_back(client.generate(req));
    const auto batch = client.batch_generate(reqs);
    ASSERT_EQ(batch.size(), reqs.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        EXPECT_TRUE(batch[i].ok);
        EXPECT_EQ(batch[i].text, sequential[i]);
    }
}

TEST(MockClientTest, EmptyBatchYieldsEmptyResult) {
    auto client = make_mock_client(MockProfile{}, {});
    EXPECT_TRUE(client.batch_generate({}).empty());
}

TEST(MockClientTest, EmbedIsDeterministicAndAligned) {
    auto client = make_mock_client(MockProfile{}, {});
    const std::vector<std::string> texts = {"alpha beta", "gamma", "alpha beta"};
    const auto vecs = client.embed(texts);
    ASSERT_EQ(vecs.size(), 3u);
    EXPECT_EQ(vecs[0], vecs[2]);
    EXPECT_NE(vecs[0], vecs[1]);
    EXPECT_THROW(client.embed({}), EmptyInput);
}

// ---------------------------------------------------------------------------
// HTTP: success paths
// ---------------------------------------------------------------------------

TEST(HttpClientTest, GenerateSendsContractAndReadsText) {
    std::mutex mu;
    nlohmann::json seen;
    StubServer server([&](httplib::Server& s) {
        s.Post("/generate", [&](const httplib::Request& req, httplib::Response& res) {
            {
                std::lock_guard<std::mutex> lock(mu);
                seen = nlohmann::json::parse(req.body);
            }
            res.set_content(R"({"text": "hello from stub"})", "application/json");
        });
    });
    InferenceClient client(http_config(server.url()));
    GenerationRequest req;
    req.prompt = "List entities";
    req.temperature = 0.0f;
    req.max_tokens = 64;
    req.stop = {"\n\n"};
    EXPECT_EQ(client.generate(req), "hello from stub");
    std::lock_guard<std::mutex> lock(mu);
    EXPECT_EQ(seen.at("prompt"), "List entities");
    EXPECT_DOUBLE_EQ(seen.at("temperature").get<double>(), 0.0);
    EXPECT_EQ(seen.at("max_tokens"), 64);
    EXPECT_EQ(seen.at("stop"), nlohmann::json::array({"\n\n"}));
}

TEST(HttpClientTest, RespectsPathPrefixInBaseUrl) {
    StubServer server([&](httplib::Server& s) {
        s.Post("/api/v1/generate",
               [&](const httplib::Request&, httplib::Response& res) {
                   res.set_content(R"({"text": "prefixed"})", "application/json");
               });
    });
    InferenceClient client(http_config(server.url() + "/api/v1/"));
    GenerationRequest req;
    req.prompt = "x";
    EXPECT_EQ(client.generate(req), "prefixed");
}

TEST(HttpClientTest, ChatCompatMapsPromptToUserMessage) {
    std::mutex mu;
    nlohmann::json seen;
    StubServer server([&](httplib::Server& s) {
        s.Post("/v1/chat/completions",
               [&](const httplib::Request& req, httplib::Response& res) {
                   {
                       std::lock_guard<std::mutex> lock(mu);
                       seen = nlohmann::json::parse(req.body);
                   }
                   res.set_content(
                       R"({"choices": [{"message": {"content": "chat says hi"}}]})",
                       "application/json");
               });
    });
    auto cfg = http_config(server.url());
    cfg.mode = EndpointMode::chat_compat;
    InferenceClient client(cfg);
    GenerationRequest req;
    req.prompt = "Tag this sentence";
    EXPECT_EQ(client.generate(req), "chat says hi");
    std::lock_guard<std::mutex> lock(mu);
    ASSERT_EQ(seen.at("messages").size(), 1u);
    EXPECT_EQ(seen.at("messages").at(0).at("role"), "user");
    EXPECT_EQ(seen.at("messages").at(0).at("content"), "Tag this sentence");
}

TEST(HttpClientTest, SendsBearerTokenFromConfig) {
    std::mutex mu;
    std::string auth_seen = "unset";
    StubServer server([&](httplib::Server& s) {
        s.Post("/generate", [&](const httplib::Request& req, httplib::Response& res) {
            {
                std::lock_guard<std::mutex> lock(mu);
                auth_seen = req.get_header_value("Authorization");
            }
            res.set_content(R"({"text": "ok"})", "application/json");
        });
    });
    auto cfg = http_config(server.url());
    cfg.auth_token = "sekrit-token";
    InferenceClient client(cfg);
    GenerationRequest req;
    req.prompt = "x";
    client.generate(req);
    std::lock_guard<std::mutex> lock(mu);
    EXPECT_EQ(auth_seen, "Bearer sekrit-token");
}

TEST(HttpClientTest, FallsBackToEnvironmentToken) {
    std::mutex mu;
    std::string auth_seen = "unset";
    StubServer server([&](httplib::Server& s) {
        s.Post("/generate", [&](const httplib::Request& req, httplib::Response& res) {
            {
                std::lock_guard<std::mutex> lock(mu);
                auth_seen = req.get_header_value("Authorization");
            }
            res.set_content(R"({"text": "ok"})", "application/json");
        });
    });
    ::setenv("SAMKIT_AUTH_TOKEN", "env-token", 1);
    InferenceClient client(http_config(server.url()));
    GenerationRequest req;
    req.prompt = "x";
    client.generate(req);
    ::unsetenv("SAMKIT_AUTH_TOKEN");
    std::lock_guard<std::mutex> lock(mu);
    EXPECT_EQ(auth_seen, "Bearer env-token");
}

// ---------------------------------------------------------------------------
// HTTP: retries and failures
// ---------------------------------------------------------------------------

TEST(HttpClientTest, RetriesThroughTransientServerErrors) {
    std::atomic<int> calls{0};
    StubServer server([&](httplib::Server& s) {
        s.Post("/generate", [&](const httplib::Request&, httplib::Response& res) {
            const int n = ++calls;
            if (n <= 2) {
                res.status = 500;
                res.set_content(R"({"error": "boom"})", "application/json");
            } else {
                res.set_content(R"({"text": "recovered"})", "application/json");
            }
        });
    });
    auto cfg = http_config(server.url());
    cfg.max_retries = 2;
    InferenceClient client(cfg);
    GenerationRequest req;
    req.prompt = "x";
    EXPECT_EQ(client.generate(req), "recovered");
    EXPECT_EQ(calls.load(), 3);
}

TEST(HttpClientTest, ExhaustedRetriesRaiseEndpointUnavailable) {
    std::atomic<int> calls{0};
    StubServer server([&](httplib::Server& s) {
        s.Post("/generate", [&](const httplib::Request&, httplib::Response& res) {
            ++calls;
            res.status = 503;
            res.set_content(R"({"error": "overloaded"})", "application/json");
        });
    });
    auto cfg = http_config(server.url());
    cfg.max_retries = 1;
    InferenceClient client(cfg);
    GenerationRequest req;
    req.prompt = "x";
    EXPECT_THROW(client.generate(req), EndpointUnavailable);
    EXPECT_EQ(calls.load(), 2);  // one original try + one retry
}

TEST(HttpClientTest, ClientErrorsFailFastWithStatusAndMessage) {
    std::atomic<int> calls{0};
    StubServer server([&](httplib::Server& s) {
        s.Post("/generate", [&](const httplib::Request&, httplib::Response& res) {
            ++calls;
            res.status = 404;
            res.set_content(R"({"error": "no adapter mounted"})", "application/json");
        });
    });
    auto cfg = http_config(server.url());
    cfg.max_retries = 3;
    InferenceClient client(cfg);
    GenerationRequest req;
    req.prompt = "x";
    try {
        client.generate(req);
        FAIL() << "expected RemoteError";
    } catch (const RemoteError& e) {
        EXPECT_EQ(e.status(), 404);
        EXPECT_NE(std::string(e.what()).find("no adapter mounted"), std::string::npos);
    }
    EXPECT_EQ(calls.load(), 1);  // 4xx is permanent: no retries
}

TEST(HttpClientTest, MalformedSuccessBodyIsRemoteError) {
    StubServer server([&](httplib::Server& s) {
        s.Post("/generate", [&](const httplib::Request&, httplib::Response& res) {
            res.set_content("this is not json", "text/plain");
        });
    });
    InferenceClient client(http_config(server.url()));
    GenerationRequest req;
    req.prompt = "x";
    EXPECT_THROW(client.generate(req), RemoteError);
}

TEST(HttpClientTest, TimeoutBecomesEndpointUnavailable) {
    StubServer server([&](httplib::Server& s) {
        s.Post("/generate", [&](const httplib::Request&, httplib::Response& res) {
            std::this_thread::sleep_for(std::chrono::milliseconds(600));
            res.set_content(R"({"text": "too late"})", "application/json");
        });
    });
    auto cfg = http_config(server.url());
    cfg.timeout_s = 0.1;
    cfg.max_retries = 0;
    InferenceClient client(cfg);
    GenerationRequest req;
    req.prompt = "x";
    const auto start = std::chrono::steady_clock::now();
    EXPECT_THROW(client.generate(req), EndpointUnavailable);
    const auto elapsed = std::chrono::steady_clock::now() - start;
    EXPECT_LT(std::chrono::duration_cast<std::chrono::milliseconds>(elapsed).count(),
              3000);
}

TEST(HttpClientTest, ConnectionRefusedBecomesEndpointUnavailable) {
    auto cfg = http_config("http://127.0.0.1:1");
    cfg.timeout_s = 0.5;
    cfg.max_retries = 0;
    InferenceClient client(cfg);
    GenerationRequest req;
    req.prompt = "x";
    EXPECT_THROW(client.generate(req), EndpointUnavailable);
}

// ---------------------------------------------------------------------------
// HTTP: batch behavior
// ---------------------------------------------------------------------------

TEST(HttpClientTest, BatchResultsAlignUnderScrambledCompletion) {
    StubServer server([&](httplib::Server& s) {
        s.Post("/generate", [&](const httplib::Request& req, httplib::Response& res) {
            const auto body = nlohmann::json::parse(req.body);
            const auto prompt = body.at("prompt").get<std::string>();
            // Scramble completion order with a prompt-dependent delay.
            const auto delay = (fnv1a(prompt) % 4) * 15;
            std::this_thread::sleep_for(std::chrono::milliseconds(delay));
            res.set_content(nlohmann::json{{"text", "echo:" + prompt}}.dump(),
                            "application/json");
        });
    });
    auto cfg = http_config(server.url());
    cfg.max_concurrency = 6;
    InferenceClient client(cfg);
    std::vector<GenerationRequest> reqs(12);
    for (std::size_t i = 0; i < reqs.size(); ++i) {
        reqs[i].prompt = "p" + std::to_string(i);
    }
    const auto results = client.batch_generate(reqs);
    ASSERT_EQ(results.size(), 12u);
    for (std::size_t i = 0; i < results.size(); ++i) {
        ASSERT_TRUE(results[i].ok) << results[i].error_message;
        EXPECT_EQ(results[i].text, "echo:p" + std::to_string(i));
    }
}

TEST(HttpClientTest, OneFailingItemDoesNotAbortBatch) {
    StubServer server([&](httplib::Server& s) {
        s.Post("/generate", [&](const httplib::Request& req, httplib::Response& res) {
            const auto body = nlohmann::json::parse(req.body);
            const auto prompt = body.at("prompt").get<std::string>();
            if (prompt.find("poison") != std::string::npos) {
                res.status = 500;
                res.set_content(R"({"error": "injected fault"})", "application/json");
            } else {
                res.set_content(nlohmann::json{{"text", "ok:" + prompt}}.dump(),
                                "application/json");
            }
        });
    });
    auto cfg = http_config(server.url());
    cfg.max_retries = 1;
    InferenceClient client(cfg);
    std::vector<GenerationRequest> reqs(10);
    for (std::size_t i = 0; i < reqs.size(); ++i) {
        reqs[i].prompt = (i == 7) ? "poison pill" : "req" + std::to_string(i);
    }
    const auto results = client.batch_generate(reqs);
    ASSERT_EQ(results.size(), 10u);
    for (std::size_t i = 0; i < results.size(); ++i) {
        if (i == 7) {
            EXPECT_FALSE(results[i].ok);
            EXPECT_EQ(results[i].error_kind, ErrorKind::endpoint_unavailable);
            EXPECT_FALSE(results[i].error_message.empty());
        } else {
            ASSERT_TRUE(results[i].ok);
            EXPECT_EQ(results[i].text, "ok:req" + std::to_string(i));
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP: embeddings
// ---------------------------------------------------------------------------

TEST(HttpClientTest, EmbedParsesAlignedVectors) {
    StubServer server([&](httplib::Server& s) {
        s.Post("/embed", [&](const httplib::Request& req, httplib::Response& res) {
            const auto body = nlohmann::json::parse(req.body);
            nlohmann::json vectors = nlohmann::json::array();
            for (const auto& text : body.at("texts")) {
                const auto len = static_cast<double>(text.get<std::string>().size());
                vectors.push_back({len, 1.0});
            }
            res.set_content(nlohmann::json{{"vectors", vectors}}.dump(),
                            "application/json");
        });
    });
    InferenceClient client(http_config(server.url()));
    const auto vecs = client.embed({"ab", "abcd"});
    ASSERT_EQ(vecs.size(), 2u);
    EXPECT_FLOAT_EQ(vecs[0].values[0], 2.0f);
    EXPECT_FLOAT_EQ(vecs[1].values[0], 4.0f);
    EXPECT_FLOAT_EQ(vecs[0].values[1], 1.0f);
}

TEST(HttpClientTest, EmbedDimMismatchIsRemoteError) {
    StubServer server([&](httplib::Server& s) {
        s.Post("/embed", [&](const httplib::Request&, httplib::Response& res) {
            res.set_content(R"({"vectors": [[1.0, 2.0], [3.0]]})", "application/json");
        });
    });
    InferenceClient client(http_config(server.url()));
    EXPECT_THROW(client.embed({"a", "b"}), RemoteError);
}

TEST(HttpClientTest, EmbedCountMismatchIsRemoteError) {
    StubServer server([&](httplib::Server& s) {
        s.Post("/embed", [&](const httplib::Request&, httplib::Response& res) {
            res.set_content(R"({"vectors": [[1.0, 2.0]]})", "application/json");
        });
    });
    InferenceClient client(http_config(server.url()));
    EXPECT_THROW(client.embed({"a", "b"}), RemoteError);
}

TEST(HttpClientTest, EmbedNonFiniteValueIsRemoteError) {
    StubServer server([&](httplib::Server& s) {
        s.Post("/embed", [&](const httplib::Request&, httplib::Response& res) {
            res.set_content(R"({"vectors": [[1.0, "nan"]]})", "application/json");
        });
    });
    InferenceClient client(http_config(server.url()));
    EXPECT_THROW(client.embed({"a"}), RemoteError);
}

TEST(HttpClientTest, ChatCompatEmbeddings) {
    StubServer server([&](httplib::Server& s) {
        s.Post("/v1/embeddings", [&](const httplib::Request&, httplib::Response& res) {
            res.set_content(
                R"({"data": [{"embedding": [0.5, 0.5]}, {"embedding": [1.0, 0.0]}]})",
                "application/json");
        });
    });
    auto cfg = http_config(server.url());
    cfg.mode = EndpointMode::chat_compat;
    InferenceClient client(cfg);
    const auto vecs = client.embed({"a", "b"});
    ASSERT_EQ(vecs.size(), 2u);
    EXPECT_FLOAT_EQ(vecs[1].values[0], 1.0f);
}

}  // namespace
