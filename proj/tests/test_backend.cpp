#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <thread>

#include "semgrad/http_backend.hpp"
#include "support.hpp"

using namespace semgrad;

namespace {

ChatRequest req(const std::string &prompt, CallRole role = CallRole::forward) {
  return ChatRequest::user(role, "m", prompt);
}

struct CaptureWarnings {
  std::vector<std::string> seen;
  std::function<void(const std::string &)> saved;
  CaptureWarnings() : saved(warning_sink()) {
    warning_sink() = [this](const std::string &m) { seen.push_back(m); };
  }
  ~CaptureWarnings() { warning_sink() = saved; }
};

} // namespace

TEST(Hash, Sha256KnownVector) {
  EXPECT_EQ(sha256_hex("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Hash, CanonicalFormIsStable) {
  auto a = req("line1\r\nline2");
  auto b = req("line1\nline2");
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.canonical().dump(),
            R"({"role":"forward","model":"m","messages":[{"role":"user","content":"line1\nline2"}],"temperature":0.0,"max_tokens":1024})");
  EXPECT_EQ(a.hash(), sha256_hex(a.canonical().dump()));
  EXPECT_NE(a.hash(), req("line1\nline2", CallRole::backward).hash());
  EXPECT_EQ(ChatRequest::from_canonical(b.canonical()).hash(), b.hash());
}

TEST(Scripted, FirstMatchWinsAndErrorsOnMiss) {
  ScriptedBackend b;
  b.on("2+2", "4").on("2", "two");
  EXPECT_EQ(b.complete(req("what is 2+2?")).text, "4");
  EXPECT_EQ(b.complete(req("2 apples")).text, "two");
  auto r = b.complete(req("2+2"));
  EXPECT_EQ(r.provider, Provider::scripted);
  EXPECT_GE(r.input_tokens, 0);
  EXPECT_THROW(b.complete(req("nothing")), BackendError);
}

TEST(Scripted, SequencesRepeatTheLastResponse) {
  ScriptedBackend b;
  b.on_sequence("q", {"a", "b"});
  EXPECT_EQ(b.complete(req("q")).text, "a");
  EXPECT_EQ(b.complete(req("q")).text, "b");
  EXPECT_EQ(b.complete(req("q")).text, "b");
}

TEST(Scripted, RolesRegexAndRulesFile) {
  ScriptedBackend b;
  b.add_rules(nlohmann::json::parse(R"([
    {"match": "^opt", "regex": true, "role": "optimizer", "response": "O"},
    {"match": "", "role": "backward", "responses": ["B1", "B2"]},
    {"match": "x", "response": "F"}
  ])"));
  EXPECT_EQ(b.complete(req("opt x", CallRole::optimizer)).text, "O");
  EXPECT_EQ(b.complete(req("opt x", CallRole::forward)).text, "F");
  EXPECT_EQ(b.complete(req("y", CallRole::backward)).text, "B1");
  EXPECT_EQ(b.complete(req("y", CallRole::backward)).text, "B2");
}

TEST(Replay, RecordIsIdempotentAndReloads) {
  auto dir = support::fresh_dir("replay");
  auto path = (dir / "cache.jsonl").string();
  ScriptedBackend inner;
  inner.on("", "recorded answer");
  {
    ReplayCache cache(path);
    CachedBackend rec(cache, &inner, false);
    EXPECT_EQ(rec.complete(req("p")).text, "recorded answer");
    EXPECT_EQ(rec.complete(req("p")).provider, Provider::replay);
    EXPECT_FALSE(cache.record(req("p"), {"other", 0, 0, Provider::scripted}));
    EXPECT_EQ(cache.size(), 1u);
  }
  EXPECT_EQ(inner.calls(), 1u);
  ReplayCache again(path);
  CachedBackend strict(again, nullptr, true);
  auto r = strict.complete(req("p"));
  EXPECT_EQ(r.text, "recorded answer");
  EXPECT_EQ(r.provider, Provider::replay);
  try {
    strict.complete(req("unseen"));
    FAIL();
  } catch (const BackendError &e) {
    EXPECT_NE(std::string(e.what()).find(req("unseen").hash()), std::string::npos);
  }
}

TEST(Replay, CorruptLinesAreSkippedWithAWarning) {
  auto dir = support::fresh_dir("replay_corrupt");
  auto path = (dir / "cache.jsonl").string();
  {
    ReplayCache c(path);
    c.record(req("a"), {"A", 1, 1, Provider::scripted});
    c.record(req("b"), {"B", 1, 1, Provider::scripted});
  }
  std::ofstream(path, std::ios::app) << "{not json\n";
  CaptureWarnings w;
  ReplayCache c(path);
  EXPECT_EQ(c.size(), 2u);
  EXPECT_EQ(c.skipped_lines(), 1u);
  ASSERT_EQ(w.seen.size(), 1u);
  EXPECT_NE(w.seen[0].find(":3:"), std::string::npos);
}

TEST(Engines, RoleIsolationAndTokenPartition) {
  ScriptedBackend fwd, bwd;
  fwd.on("", "f f");
  bwd.on("", "b b b");
  EngineConfig cfg;
  Engines e(fwd, bwd, cfg);
  auto f = e.call(CallRole::forward, "one two");
  auto b = e.call(CallRole::backward, "one");
  auto o = e.call(CallRole::optimizer, "one two three");
  EXPECT_EQ(f.request.model, cfg.forward_model);
  EXPECT_EQ(b.request.model, cfg.backward_model);
  EXPECT_EQ(o.request.model, cfg.backward_model);
  EXPECT_EQ(f.response.text, "f f");
  EXPECT_EQ(o.response.text, "b b b");
  auto u = e.usage();
  EXPECT_EQ(u.forward, (TokenCount{2, 2}));
  EXPECT_EQ(u.backward, (TokenCount{1, 3}));
  EXPECT_EQ(u.optimizer, (TokenCount{3, 3}));
  EXPECT_EQ(u.total(), (TokenCount{6, 8}));
  EXPECT_EQ(token_usage_from_json(to_json(u)), u);
}

// ------------------------------------------------------------------ http

namespace {

struct LocalServer {
  httplib::Server server;
  std::thread thread;
  int port = 0;
  std::atomic<int> hits{0};
  std::atomic<int> failures_left{0};
  int fail_status = 500;
  std::string last_auth, last_body;

  LocalServer() {
    server.Post("/v1/chat/completions", [this](const httplib::Request &rq, httplib::Response &rs) {
      ++hits;
      last_auth = rq.get_header_value("Authorization");
      last_body = rq.body;
      if (failures_left > 0) {
        --failures_left;
        rs.status = fail_status;
        rs.set_content("{\"error\":\"busy\"}", "application/json");
        return;
      }
      rs.set_content(R"({"choices":[{"message":{"role":"assistant","content":"hello"}}],
                        "usage":{"prompt_tokens":7,"completion_tokens":2}})",
                     "application/json");
    });
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~LocalServer() {
    server.stop();
    thread.join();
  }
};

HttpConfig local_config(int port) {
  ::setenv("SEMGRAD_TEST_KEY", "secret", 1);
  HttpConfig c;
  c.base_url = "http://127.0.0.1:" + std::to_string(port) + "/v1";
  c.api_key_env = "SEMGRAD_TEST_KEY";
  c.timeout_seconds = 5;
  return c;
}

} // namespace

TEST(Http, SuccessfulCompletion) {
  LocalServer s;
  std::vector<std::chrono::milliseconds> slept;
  HttpBackend b(local_config(s.port), [&](auto d) { slept.push_back(d); });
  auto r = b.complete(ChatRequest::user(CallRole::forward, "gpt-x", "hi"));
  EXPECT_EQ(r.text, "hello");
  EXPECT_EQ(r.input_tokens, 7);
  EXPECT_EQ(r.output_tokens, 2);
  EXPECT_EQ(r.provider, Provider::http);
  EXPECT_EQ(s.last_auth, "Bearer secret");
  auto body = nlohmann::json::parse(s.last_body);
  EXPECT_EQ(body["model"], "gpt-x");
  EXPECT_EQ(body["temperature"], 0.0);
  EXPECT_EQ(body["max_tokens"], 1024);
  EXPECT_TRUE(slept.empty());
}

TEST(Http, RetriesWithBackoffThenSucceeds) {
  LocalServer s;
  s.failures_left = 3;
  std::vector<std::chrono::milliseconds> slept;
  HttpBackend b(local_config(s.port), [&](auto d) { slept.push_back(d); });
  EXPECT_EQ(b.complete(req("hi")).text, "hello");
  EXPECT_EQ(s.hits, 4);
  using std::chrono::seconds;
  EXPECT_EQ(slept, (std::vector<std::chrono::milliseconds>{seconds(1), seconds(2), seconds(4)}));
}

TEST(Http, GivesUpAfterThreeRetries) {
  LocalServer s;
  s.failures_left = 10;
  std::vector<std::chrono::milliseconds> slept;
  HttpBackend b(local_config(s.port), [&](auto d) { slept.push_back(d); });
  EXPECT_THROW(b.complete(req("hi")), BackendError);
  EXPECT_EQ(s.hits, 4);
}

TEST(Http, ClientErrorsAreNotRetried) {
  LocalServer s;
  s.failures_left = 10;
  s.fail_status = 401;
  std::vector<std::chrono::milliseconds> slept;
  HttpBackend b(local_config(s.port), [&](auto d) { slept.push_back(d); });
  EXPECT_THROW(b.complete(req("hi")), BackendError);
  EXPECT_EQ(s.hits, 1);
}

TEST(Http, MissingKeyFailsAtConstruction) {
  ::unsetenv("SEMGRAD_ABSENT_KEY");
  HttpConfig c;
  c.api_key_env = "SEMGRAD_ABSENT_KEY";
  EXPECT_THROW(HttpBackend{c}, BackendError);
}
