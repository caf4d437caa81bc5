#pragma once

// OpenAI-compatible /chat/completions provider. Kept apart from backend.hpp
// because it pulls in cpp-httplib and OpenSSL.

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include <chrono>
#include <cstdlib>
#include <functional>
#include <semaphore>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "semgrad/backend.hpp"

namespace semgrad {

struct HttpConfig {
  std::string base_url = "https://api.openai.com/v1";
  std::string api_key_env = "OPENAI_API_KEY";
  int concurrency = 4;
  int timeout_seconds = 120;
  // Waits between attempts; one initial try plus one retry per entry.
  std::vector<std::chrono::milliseconds> backoff{std::chrono::seconds(1), std::chrono::seconds(2),
                                                 std::chrono::seconds(4)};
};

class HttpBackend : public Backend {
public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  // Throws BackendError when the API key variable is unset or empty.
  explicit HttpBackend(HttpConfig cfg, Sleeper sleep = default_sleep)
      : cfg_(std::move(cfg)), sleep_(std::move(sleep)), slots_(clamp(cfg_.concurrency)) {
    const char *key = std::getenv(cfg_.api_key_env.c_str());
    if (!key || !*key)
      throw BackendError("environment variable " + cfg_.api_key_env +
                         " is not set; the http backend needs an API key");
    api_key_ = key;
    split_url(cfg_.base_url, origin_, path_);
  }

  static nlohmann::json request_body(const ChatRequest &req) {
    nlohmann::json body;
    body["model"] = req.model;
    body["messages"] = nlohmann::json::array();
    for (auto &m : req.messages)
      body["messages"].push_back({{"role", m.role}, {"content", m.content}});
    body["temperature"] = req.temperature;
    body["max_tokens"] = req.max_tokens;
    return body;
  }

  static ChatResponse parse_response(const std::string &body) {
    auto j = nlohmann::json::parse(body);
    ChatResponse r;
    r.provider = Provider::http;
    r.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
    if (j.contains("usage")) {
      r.input_tokens = j["usage"].value("prompt_tokens", 0L);
      r.output_tokens = j["usage"].value("completion_tokens", 0L);
    }
    return r;
  }

  ChatResponse complete(const ChatRequest &req) override {
    slots_.acquire();
    struct Release {
      std::counting_semaphore<256> &s;
      ~Release() { s.release(); }
    } release{slots_};

    const std::string body = request_body(req).dump();
    std::string last_error;
    for (std::size_t attempt = 0; attempt <= cfg_.backoff.size(); ++attempt) {
      if (attempt > 0)
        sleep_(cfg_.backoff[attempt - 1]);
      try {
        httplib::Client cli(origin_);
        cli.set_connection_timeout(cfg_.timeout_seconds, 0);
        cli.set_read_timeout(cfg_.timeout_seconds, 0);
        cli.set_bearer_token_auth(api_key_);
        auto res = cli.Post(path_ + "/chat/completions", body, "application/json");
        if (!res) {
          last_error = "network error: " + httplib::to_string(res.error());
          continue;
        }
        if (res->status == 200)
          return parse_response(res->body);
        last_error = "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200);
        // Client errors other than rate limiting will not improve on retry.
        if (res->status >= 400 && res->status < 500 && res->status != 429)
          break;
      } catch (const nlohmann::json::exception &e) {
        last_error = std::string("malformed response: ") + e.what();
      }
    }
    throw BackendError("chat completion failed for request " + req.hash().substr(0, 12) + ": " +
                       last_error);
  }

private:
  static void default_sleep(std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }
  static std::ptrdiff_t clamp(int n) { return n < 1 ? 1 : (n > 256 ? 256 : n); }

  static void split_url(const std::string &url, std::string &origin, std::string &path) {
    auto scheme = url.find("://");
    auto slash = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
    if (slash == std::string::npos) {
      origin = url;
      path.clear();
    } else {
      origin = url.substr(0, slash);
      path = url.substr(slash);
    }
    while (!path.empty() && path.back() == '/')
      path.pop_back();
  }

  HttpConfig cfg_;
  Sleeper sleep_;
  std::counting_semaphore<256> slots_;
  std::string api_key_;
  std::string origin_;
  std::string path_;
};

} // namespace semgrad
