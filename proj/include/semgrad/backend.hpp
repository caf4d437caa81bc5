#pragma once

#include <array>
#include <cctype>
#include <cstdio>
#include <ctime>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

namespace semgrad {

class BackendError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Which engine a call belongs to. Forward calls go to the forward engine;
// backward and optimizer calls go to the backward engine.
enum class CallRole { forward, backward, optimizer };

inline const char *to_string(CallRole r) {
  switch (r) {
  case CallRole::forward: return "forward";
  case CallRole::backward: return "backward";
  case CallRole::optimizer: return "optimizer";
  }
  return "?";
}

inline CallRole call_role_from_string(const std::string &s) {
  if (s == "forward") return CallRole::forward;
  if (s == "backward") return CallRole::backward;
  if (s == "optimizer") return CallRole::optimizer;
  throw BackendError("unknown call role '" + s + "'");
}

struct ChatMessage {
  std::string role; // "system" | "user" | "assistant"
  std::string content;
};

inline std::string to_lf(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\r') {
      out += '\n';
      if (i + 1 < s.size() && s[i + 1] == '\n')
        ++i;
    } else {
      out += s[i];
    }
  }
  return out;
}

inline std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw BackendError("SHA-256 digest failed");
  std::ostringstream os;
  for (unsigned i = 0; i < len; ++i)
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

struct ChatRequest {
  CallRole role = CallRole::forward;
  std::string model;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  int max_tokens = 1024;

  static ChatRequest user(CallRole role, std::string model, std::string prompt,
                          double temperature = 0.0, int max_tokens = 1024) {
    return {role, std::move(model), {{"user", std::move(prompt)}}, temperature, max_tokens};
  }

  // Prompt text as seen by scripted matchers: message contents joined by LF.
  std::string prompt_text() const {
    std::string out;
    for (std::size_t i = 0; i < messages.size(); ++i) {
      if (i)
        out += '\n';
      out += messages[i].content;
    }
    return out;
  }

  // Canonical form: fixed field order, LF newlines, UTF-8.
  nlohmann::ordered_json canonical() const {
    nlohmann::ordered_json j;
    j["role"] = to_string(role);
    j["model"] = model;
    j["messages"] = nlohmann::ordered_json::array();
    for (auto &m : messages)
      j["messages"].push_back({{"role", m.role}, {"content", to_lf(m.content)}});
    j["temperature"] = temperature;
    j["max_tokens"] = max_tokens;
    return j;
  }

  std::string hash() const { return sha256_hex(canonical().dump()); }

  static ChatRequest from_canonical(const nlohmann::json &j) {
    ChatRequest r;
    r.role = call_role_from_string(j.at("role").get<std::string>());
    r.model = j.at("model").get<std::string>();
    for (auto &m : j.at("messages"))
      r.messages.push_back({m.at("role").get<std::string>(), m.at("content").get<std::string>()});
    r.temperature = j.at("temperature").get<double>();
    r.max_tokens = j.at("max_tokens").get<int>();
    return r;
  }
};

enum class Provider { http, scripted, replay };

inline const char *to_string(Provider p) {
  switch (p) {
  case Provider::http: return "http";
  case Provider::scripted: return "scripted";
  case Provider::replay: return "replay";
  }
  return "?";
}

struct ChatResponse {
  std::string text;
  long input_tokens = 0;
  long output_tokens = 0;
  Provider provider = Provider::scripted;
};

class Backend {
public:
  virtual ~Backend() = default;
  virtual ChatResponse complete(const ChatRequest &request) = 0;
};

// Whitespace-delimited word count; token estimate for offline providers.
inline long count_words(std::string_view s) {
  long n = 0;
  bool in_word = false;
  for (unsigned char c : s) {
    bool space = std::isspace(c) != 0;
    if (!space && !in_word)
      ++n;
    in_word = !space;
  }
  return n;
}

// Deterministic rule table. Rules are tried in order and the first match
// answers. A rule with a response sequence hands them out in order and then
// keeps repeating the last one.
class ScriptedBackend : public Backend {
public:
  using Generator = std::function<std::optional<std::string>(const ChatRequest &)>;

  struct Rule {
    std::string pattern;
    bool regex = false;
    std::vector<std::string> responses;
    Generator generator; // when set, replaces pattern matching
    std::optional<CallRole> role;
    std::size_t served = 0;
  };

  static Rule rule(std::string pattern, bool regex, std::vector<std::string> responses) {
    Rule r;
    r.pattern = std::move(pattern);
    r.regex = regex;
    r.responses = std::move(responses);
    return r;
  }

  ScriptedBackend &on(std::string substring, std::string response) {
    return add(rule(std::move(substring), false, {std::move(response)}));
  }
  ScriptedBackend &on_sequence(std::string substring, std::vector<std::string> responses) {
    return add(rule(std::move(substring), false, std::move(responses)));
  }
  ScriptedBackend &on_regex(std::string pattern, std::string response) {
    return add(rule(std::move(pattern), true, {std::move(response)}));
  }
  ScriptedBackend &on_role(CallRole role, std::vector<std::string> responses) {
    Rule r = rule({}, false, std::move(responses));
    r.role = role;
    return add(std::move(r));
  }
  ScriptedBackend &with(Generator g) {
    Rule r;
    r.generator = std::move(g);
    return add(std::move(r));
  }
  ScriptedBackend &add(Rule r) {
    std::lock_guard lock(mu_);
    rules_.push_back(std::move(r));
    return *this;
  }

  // Rules file: [{"match": "...", "regex": false, "role": "backward"?,
  //               "response": "..." | "responses": [...]}]
  ScriptedBackend &add_rules(const nlohmann::json &j) {
    for (auto &r : j) {
      Rule rule;
      rule.pattern = r.value("match", std::string{});
      rule.regex = r.value("regex", false);
      if (r.contains("role"))
        rule.role = call_role_from_string(r.at("role").get<std::string>());
      if (r.contains("responses"))
        rule.responses = r.at("responses").get<std::vector<std::string>>();
      else
        rule.responses = {r.at("response").get<std::string>()};
      if (rule.responses.empty())
        throw BackendError("scripted rule with no responses");
      add(std::move(rule));
    }
    return *this;
  }

  ChatResponse complete(const ChatRequest &request) override {
    const std::string prompt = request.prompt_text();
    std::lock_guard lock(mu_);
    ++calls_;
    for (auto &rule : rules_) {
      if (rule.role && *rule.role != request.role)
        continue;
      std::optional<std::string> text;
      if (rule.generator) {
        text = rule.generator(request);
      } else if (matches(rule, prompt)) {
        std::size_t i = std::min(rule.served, rule.responses.size() - 1);
        ++rule.served;
        text = rule.responses[i];
      }
      if (text)
        return {*text, count_words(prompt), count_words(*text), Provider::scripted};
    }
    throw BackendError("scripted backend: no rule matched request " + request.hash().substr(0, 12) +
                       " (" + to_string(request.role) + ")");
  }

  std::size_t calls() const {
    std::lock_guard lock(mu_);
    return calls_;
  }

private:
  static bool matches(const Rule &r, const std::string &prompt) {
    if (r.regex)
      return std::regex_search(prompt, std::regex(r.pattern));
    return prompt.find(r.pattern) != std::string::npos;
  }

  mutable std::mutex mu_;
  std::vector<Rule> rules_;
  std::size_t calls_ = 0;
};

// Warnings go through one replaceable sink (stderr by default).
inline std::function<void(const std::string &)> &warning_sink() {
  static std::function<void(const std::string &)> sink = [](const std::string &m) {
    std::fprintf(stderr, "warning: %s\n", m.c_str());
  };
  return sink;
}
inline void warn(const std::string &m) { warning_sink()(m); }

struct CacheEntry {
  std::string hash;
  nlohmann::ordered_json request;
  std::string response;
  long input_tokens = 0;
  long output_tokens = 0;
  std::string timestamp;
};

inline std::string utc_timestamp() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// Append-only JSONL record of request/response pairs keyed by request hash.
class ReplayCache {
public:
  ReplayCache() = default;
  explicit ReplayCache(std::string path) : path_(std::move(path)) { load(); }

  const std::string &path() const { return path_; }

  std::optional<CacheEntry> find(const std::string &hash) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find(hash);
    if (it == entries_.end())
      return std::nullopt;
    return it->second;
  }

  // Idempotent per hash. Returns false if the hash was already present.
  bool record(const ChatRequest &req, const ChatResponse &resp) {
    std::lock_guard lock(mu_);
    const std::string h = req.hash();
    if (entries_.count(h))
      return false;
    CacheEntry e{h, req.canonical(), resp.text, resp.input_tokens, resp.output_tokens,
                 utc_timestamp()};
    if (!path_.empty()) {
      std::ofstream out(path_, std::ios::app | std::ios::binary);
      if (!out)
        throw BackendError("cannot append to cache file " + path_);
      out << entry_json(e).dump() << '\n';
      if (!out)
        throw BackendError("write failed on cache file " + path_);
    }
    entries_.emplace(h, std::move(e));
    return true;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
  }

  std::size_t skipped_lines() const { return skipped_; }

private:
  static nlohmann::ordered_json entry_json(const CacheEntry &e) {
    nlohmann::ordered_json j;
    j["hash"] = e.hash;
    j["request"] = e.request;
    j["response"] = {{"text", e.response},
                     {"input_tokens", e.input_tokens},
                     {"output_tokens", e.output_tokens}};
    j["timestamp"] = e.timestamp;
    return j;
  }

  void load() {
    std::ifstream in(path_, std::ios::binary);
    if (!in)
      return; // created on first record
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty())
        continue;
      try {
        auto j = nlohmann::ordered_json::parse(line);
        CacheEntry e;
        e.hash = j.at("hash").get<std::string>();
        e.request = j.at("request");
        e.response = j.at("response").at("text").get<std::string>();
        e.input_tokens = j.at("response").value("input_tokens", 0L);
        e.output_tokens = j.at("response").value("output_tokens", 0L);
        e.timestamp = j.value("timestamp", std::string{});
        entries_.emplace(e.hash, std::move(e));
      } catch (const std::exception &ex) {
        ++skipped_;
        warn("cache " + path_ + ":" + std::to_string(lineno) + ": skipping corrupt line (" +
             ex.what() + ")");
      }
    }
  }

  std::string path_;
  mutable std::mutex mu_;
  std::map<std::string, CacheEntry> entries_;
  std::size_t skipped_ = 0;
};

// Serves from the cache; on a miss either fails (strict) or asks the inner
// provider and records the answer.
class CachedBackend : public Backend {
public:
  CachedBackend(ReplayCache &cache, Backend *inner, bool strict)
      : cache_(cache), inner_(inner), strict_(strict) {}

  ChatResponse complete(const ChatRequest &request) override {
    const std::string h = request.hash();
    if (auto e = cache_.find(h))
      return {e->response, e->input_tokens, e->output_tokens, Provider::replay};
    if (strict_ || !inner_)
      throw BackendError("replay miss for request " + h);
    ChatResponse r = inner_->complete(request);
    cache_.record(request, r);
    return r;
  }

private:
  ReplayCache &cache_;
  Backend *inner_;
  bool strict_;
};

struct TokenCount {
  long input = 0;
  long output = 0;
  friend bool operator==(const TokenCount &, const TokenCount &) = default;
};

struct TokenUsage {
  TokenCount forward, backward, optimizer;

  TokenCount &operator[](CallRole r) {
    return r == CallRole::forward ? forward : r == CallRole::backward ? backward : optimizer;
  }
  const TokenCount &operator[](CallRole r) const {
    return r == CallRole::forward ? forward : r == CallRole::backward ? backward : optimizer;
  }
  TokenCount total() const {
    return {forward.input + backward.input + optimizer.input,
            forward.output + backward.output + optimizer.output};
  }
  friend TokenUsage operator-(TokenUsage a, const TokenUsage &b) {
    for (CallRole r : {CallRole::forward, CallRole::backward, CallRole::optimizer}) {
      a[r].input -= b[r].input;
      a[r].output -= b[r].output;
    }
    return a;
  }
  friend bool operator==(const TokenUsage &, const TokenUsage &) = default;
};

inline nlohmann::json to_json(const TokenUsage &u) {
  nlohmann::json j;
  for (CallRole r : {CallRole::forward, CallRole::backward, CallRole::optimizer})
    j[to_string(r)] = {{"input", u[r].input}, {"output", u[r].output}};
  return j;
}

inline TokenUsage token_usage_from_json(const nlohmann::json &j) {
  TokenUsage u;
  for (CallRole r : {CallRole::forward, CallRole::backward, CallRole::optimizer}) {
    auto &t = j.at(to_string(r));
    u[r] = {t.at("input").get<long>(), t.at("output").get<long>()};
  }
  return u;
}

struct EngineConfig {
  std::string forward_model = "gpt-4o-mini-2024-07-18";
  std::string backward_model = "gpt-4-turbo-2024-04-09";
  double temperature = 0.0;
  int max_tokens = 1024;
};

// One completed call as seen by the engine.
struct CallResult {
  ChatRequest request;
  std::string request_hash;
  ChatResponse response;
};

// Routes calls to the forward engine (forward role) or the backward engine
// (backward and optimizer roles) and keeps per-role token totals.
class Engines {
public:
  Engines(Backend &forward, Backend &backward, EngineConfig cfg = {})
      : forward_(forward), backward_(backward), cfg_(std::move(cfg)) {}

  CallResult call(CallRole role, std::string prompt) {
    const bool fwd = role == CallRole::forward;
    auto req = ChatRequest::user(role, fwd ? cfg_.forward_model : cfg_.backward_model,
                                 std::move(prompt), cfg_.temperature, cfg_.max_tokens);
    ChatResponse resp = (fwd ? forward_ : backward_).complete(req);
    {
      std::lock_guard lock(mu_);
      usage_[role].input += resp.input_tokens;
      usage_[role].output += resp.output_tokens;
    }
    std::string h = req.hash();
    return {std::move(req), std::move(h), std::move(resp)};
  }

  TokenUsage usage() const {
    std::lock_guard lock(mu_);
    return usage_;
  }

  const EngineConfig &config() const { return cfg_; }

private:
  Backend &forward_;
  Backend &backward_;
  EngineConfig cfg_;
  mutable std::mutex mu_;
  TokenUsage usage_;
};

} // namespace semgrad
