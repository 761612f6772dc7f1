#pragma once

// HTTP adapter for a logprob-scoring endpoint. One POST per label:
//
//   request:  {"model": <name>, "prompt": <rendered prompt>,
//              "continuation": " " + <verbalizer>}
//   response: {"token_logprobs": [ ... ]} with optional parallel
//             "tokens" array
//
// The continuation score is the sum of its token logprobs (or the first
// entry in first_token mode), and the label distribution is the softmax
// over the per-label scores. A response that does not carry usable
// logprobs for a label is a protocol error; the adapter never invents
// or renormalizes around a missing score. Connection failures and 5xx
// answers are retried with exponential backoff (250ms doubling) up to
// max_retries, then surface as TransportError.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <memory>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#define CPPHTTPLIB_NO_EXCEPTIONS 0
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "supcal/backend.hpp"
#include "supcal/common.hpp"
#include "supcal/core.hpp"

namespace supcal {

class HttpBackend : public Backend {
 public:
  HttpBackend(BackendConfig cfg, PromptTemplate tmpl)
      : cfg_(std::move(cfg)), tmpl_(std::move(tmpl)) {
    if (cfg_.endpoint_url.empty()) {
      throw ValueError("http backend needs backend.endpoint_url");
    }
    if (cfg_.max_retries < 0) throw ValueError("max_retries must be >= 0");
    const std::size_t scheme = cfg_.endpoint_url.find("://");
    if (scheme == std::string::npos) {
      throw ValueError("endpoint_url must include a scheme: " +
                       cfg_.endpoint_url);
    }
    const std::size_t path = cfg_.endpoint_url.find('/', scheme + 3);
    if (path == std::string::npos) {
      base_ = cfg_.endpoint_url;
      path_ = "/";
    } else {
      base_ = cfg_.endpoint_url.substr(0, path);
      path_ = cfg_.endpoint_url.substr(path);
    }
    if (!cfg_.auth_token_env_var.empty()) {
      const char* token = std::getenv(cfg_.auth_token_env_var.c_str());
      if (token) auth_token_ = token;
    }
    slots_ = std::make_unique<std::counting_semaphore<>>(
        std::max(1, cfg_.concurrency));
  }

  int num_classes() const override { return tmpl_.label_space.num_classes(); }

  ProbDist infer(std::string_view query_text,
                 const Context& ctx) const override {
    slots_->acquire();
    struct Release {
      std::counting_semaphore<>* s;
      ~Release() { s->release(); }
    } release{slots_.get()};

    const std::string prompt = render_prompt(tmpl_, ctx, query_text);
    const int n = num_classes();
    std::vector<double> scores(n);
    for (int c = 0; c < n; ++c) {
      scores[c] =
          score_continuation(prompt, " " + tmpl_.label_space.verbalizer(c));
    }
    // Softmax over label scores; subtracting the max keeps exp bounded.
    double zmax = scores[0];
    for (double v : scores) zmax = std::max(zmax, v);
    std::vector<double> p(n);
    double denom = 0.0;
    for (int c = 0; c < n; ++c) {
      p[c] = std::exp(scores[c] - zmax);
      denom += p[c];
    }
    for (double& v : p) v /= denom;
    return ProbDist(std::move(p));
  }

  std::vector<ProbDist> infer_batch(const std::vector<std::string>& queries,
                                    const Context& ctx) const override {
    const int workers = std::max(
        1, std::min<int>(cfg_.concurrency,
                         static_cast<int>(queries.size())));
    if (workers == 1) return Backend::infer_batch(queries, ctx);

    std::vector<ProbDist> out(queries.size());
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          while (true) {
            const std::size_t q = next.fetch_add(1);
            if (q >= queries.size()) break;
            out[q] = infer(queries[q], ctx);
          }
        } catch (...) {
          errors[w] = std::current_exception();
          next.store(queries.size());
        }
      });
    }
    for (std::thread& t : pool) t.join();
    for (const std::exception_ptr& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    return out;
  }

 private:
  double score_continuation(const std::string& prompt,
                            const std::string& continuation) const {
    nlohmann::json body{{"model", cfg_.model_name},
                        {"prompt", prompt},
                        {"continuation", continuation}};
    const std::string payload = body.dump();

    std::string last_failure = "no attempt made";
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(
            std::chrono::milliseconds(250LL << (attempt - 1)));
      }
      httplib::Client client(base_);
      client.set_connection_timeout(std::chrono::milliseconds(cfg_.timeout_ms));
      client.set_read_timeout(std::chrono::milliseconds(cfg_.timeout_ms));
      client.set_write_timeout(std::chrono::milliseconds(cfg_.timeout_ms));
      if (!auth_token_.empty()) {
        client.set_default_headers(
            {{"Authorization", "Bearer " + auth_token_}});
      }
      httplib::Result res = client.Post(path_, payload, "application/json");
      if (!res) {
        last_failure = "connection failed (" +
                       httplib::to_string(res.error()) + ")";
        continue;
      }
      if (res->status >= 500) {
        last_failure = "server returned " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) {
        throw ProtocolError("endpoint rejected the request with status " +
                            std::to_string(res->status) + ": " + res->body);
      }
      return parse_score(res->body);
    }
    throw TransportError("giving up on " + base_ + path_ + " after " +
                         std::to_string(cfg_.max_retries + 1) +
                         " attempt(s); last failure: " + last_failure);
  }

  double parse_score(const std::string& body) const {
    nlohmann::json j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      throw ProtocolError("response body is not a JSON object: " + body);
    }
    if (!j.contains("token_logprobs") || !j["token_logprobs"].is_array() ||
        j["token_logprobs"].empty()) {
      throw ProtocolError(
          "response lacks a non-empty token_logprobs array: " + body);
    }
    const nlohmann::json& lps = j["token_logprobs"];
    if (j.contains("tokens") &&
        (!j["tokens"].is_array() || j["tokens"].size() != lps.size())) {
      throw ProtocolError("tokens and token_logprobs lengths differ: " +
                          body);
    }
    for (const nlohmann::json& v : lps) {
      if (!v.is_number()) {
        throw ProtocolError("token_logprobs entries must be numbers: " +
                            body);
      }
    }
    if (cfg_.scoring == ScoringMode::first_token) {
      return lps[0].get<double>();
    }
    double sum = 0.0;
    for (const nlohmann::json& v : lps) sum += v.get<double>();
    return sum;
  }

  BackendConfig cfg_;
  PromptTemplate tmpl_;
  std::string base_;
  std::string path_;
  std::string auth_token_;
  mutable std::unique_ptr<std::counting_semaphore<>> slots_;
};

}  // namespace supcal
