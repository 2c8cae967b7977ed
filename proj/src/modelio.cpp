// SPDX-License-Identifier: Apache-2.0

#include "bamforge/modelio.hpp"

#include <atomic>
#include <cmath>
#include <future>
#include <istream>
#include <map>
#include <mutex>
#include <ostream>
#include <semaphore>
#include <thread>

#include <fmt/core.h>

#include "bamforge/process.hpp"
#include "httplib.h"

namespace bamforge {

using Kind = EndpointError::Kind;
using nlohmann::json;

void EndpointConfig::check() const {
  if (timeout.count() <= 0) throw EndpointError(Kind::Precondition, "endpoint timeout must be positive");
  if (retries < 0) throw EndpointError(Kind::Precondition, "endpoint retries must be >= 0");
  if (max_inflight == 0) throw EndpointError(Kind::Precondition, "endpoint max_inflight must be >= 1");
}

EndpointConfig parse_endpoint_spec(std::string_view spec) {
  EndpointConfig config;
  if (spec.starts_with("stub:")) {
    config.transport = Transport::Stub;
    config.address = std::string(spec.substr(5));
    if (config.address.empty() ||
        config.address.find_first_not_of("0123456789") != std::string::npos) {
      throw EndpointError(Kind::Precondition, fmt::format("bad stub seed in '{}'", spec));
    }
  } else if (spec.starts_with("cmd:")) {
    config.transport = Transport::Subprocess;
    config.address = std::string(spec.substr(4));
    if (split_command(config.address).empty()) {
      throw EndpointError(Kind::Precondition, fmt::format("empty command in '{}'", spec));
    }
  } else if (spec.starts_with("http://") || spec.starts_with("https://")) {
    config.transport = Transport::Http;
    config.address = std::string(spec);
  } else {
    throw EndpointError(Kind::Precondition,
                        fmt::format("endpoint '{}' is not stub:<seed>, cmd:<command> or an http URL", spec));
  }
  return config;
}

// ---------------------------------------------------------------------------
// ModelEndpoint

template <typename F>
auto ModelEndpoint::with_retries(F&& call) -> decltype(call()) {
  for (int attempt = 0;; ++attempt) {
    try {
      return call();
    } catch (const EndpointError& e) {
      if (e.kind() == Kind::Precondition || attempt >= retries_) throw;
    }
  }
}

double ModelEndpoint::loglikelihood(std::string_view context, std::string_view continuation) {
  if (continuation.empty()) {
    throw EndpointError(Kind::Precondition, "loglikelihood needs a non-empty continuation");
  }
  return with_retries([&] {
    const double value = do_loglikelihood(context, continuation);
    if (!std::isfinite(value)) {
      throw EndpointError(Kind::NonFinite, "endpoint returned a non-finite log-probability");
    }
    if (value > 0.0) {
      throw EndpointError(Kind::Malformed,
                          fmt::format("endpoint returned positive log-probability {}", value));
    }
    return value;
  });
}

Generation ModelEndpoint::generate(std::string_view prompt, std::uint32_t max_tokens) {
  if (max_tokens == 0) throw EndpointError(Kind::Precondition, "generate needs max_tokens >= 1");
  Generation out{with_retries([&] { return do_generate(prompt, max_tokens); }), false};
  if (out.text.size() > max_response_bytes_) {
    out.text.resize(max_response_bytes_);
    out.truncated = true;
  }
  // Keep at most max_tokens whitespace-separated tokens.
  auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  std::size_t pos = 0, tokens = 0;
  const std::size_t n = out.text.size();
  while (pos < n) {
    while (pos < n && is_space(out.text[pos])) ++pos;
    if (pos == n) break;
    if (tokens == max_tokens) {
      std::size_t end = pos;
      while (end > 0 && is_space(out.text[end - 1])) --end;
      out.text.resize(end);
      out.truncated = true;
      break;
    }
    while (pos < n && !is_space(out.text[pos])) ++pos;
    ++tokens;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stub

namespace {

std::uint64_t hash_seed(std::uint64_t seed) {
  std::byte le[8];
  for (int i = 0; i < 8; ++i) le[i] = static_cast<std::byte>((seed >> (8 * i)) & 0xffu);
  return fnv1a64(std::span<const std::byte>(le, 8));
}

class StubEndpoint final : public ModelEndpoint {
 public:
  explicit StubEndpoint(std::uint64_t seed) : ModelEndpoint(0, 1u << 20), seed_hash_(hash_seed(seed)) {}

 protected:
  double do_loglikelihood(std::string_view context, std::string_view continuation) override {
    const std::uint64_t h = fnv1a64(continuation, fnv1a64(context, seed_hash_));
    return -(static_cast<double>(h % 10000) / 1000.0 +
             0.1 * static_cast<double>(continuation.size()));
  }

  std::string do_generate(std::string_view prompt, std::uint32_t) override {
    const std::uint64_t h = fnv1a64(prompt, seed_hash_);
    return fmt::format("stub-{:016x} answer {}", h, h % 1000);
  }

 private:
  std::uint64_t seed_hash_;
};

// ---------------------------------------------------------------------------
// Wire transports

double parse_logprob(const json& response) {
  if (!response.value("ok", false)) {
    throw EndpointError(Kind::Remote, "model error: " + response.value("error", std::string("unknown")));
  }
  auto it = response.find("logprob");
  if (it == response.end()) throw EndpointError(Kind::Malformed, "response lacks 'logprob'");
  if (it->is_null()) throw EndpointError(Kind::NonFinite, "response logprob is null");
  if (!it->is_number()) throw EndpointError(Kind::Malformed, "response 'logprob' is not a number");
  return it->get<double>();
}

std::string parse_text(const json& response) {
  if (!response.value("ok", false)) {
    throw EndpointError(Kind::Remote, "model error: " + response.value("error", std::string("unknown")));
  }
  auto it = response.find("text");
  if (it == response.end() || !it->is_string()) {
    throw EndpointError(Kind::Malformed, "response lacks string 'text'");
  }
  return it->get<std::string>();
}

json loglikelihood_request(std::string_view context, std::string_view continuation) {
  return {{"op", "loglikelihood"}, {"context", context}, {"continuation", continuation}};
}

json generate_request(std::string_view prompt, std::uint32_t max_tokens) {
  return {{"op", "generate"}, {"prompt", prompt}, {"max_tokens", max_tokens}};
}

class SlotGuard {
 public:
  explicit SlotGuard(std::counting_semaphore<>& sem) : sem_(sem) { sem_.acquire(); }
  ~SlotGuard() { sem_.release(); }
  SlotGuard(const SlotGuard&) = delete;
  SlotGuard& operator=(const SlotGuard&) = delete;

 private:
  std::counting_semaphore<>& sem_;
};

class WireEndpoint : public ModelEndpoint {
 protected:
  explicit WireEndpoint(const EndpointConfig& config)
      : ModelEndpoint(config.retries, config.max_response_bytes),
        timeout_(config.timeout),
        slots_(static_cast<std::ptrdiff_t>(config.max_inflight)) {}

  virtual json call(json request) = 0;

  double do_loglikelihood(std::string_view context, std::string_view continuation) override {
    return parse_logprob(call(loglikelihood_request(context, continuation)));
  }
  std::string do_generate(std::string_view prompt, std::uint32_t max_tokens) override {
    return parse_text(call(generate_request(prompt, max_tokens)));
  }

  std::uint64_t next_id() { return next_id_.fetch_add(1); }

  std::chrono::milliseconds timeout_;
  std::counting_semaphore<> slots_;

 private:
  std::atomic<std::uint64_t> next_id_{1};
};

class SubprocessEndpoint final : public WireEndpoint {
 public:
  explicit SubprocessEndpoint(const EndpointConfig& config)
      : WireEndpoint(config), child_(split_command(config.address)) {
    reader_ = std::thread([this] { read_loop(); });
  }

  ~SubprocessEndpoint() override {
    child_.shutdown();
    reader_.join();
  }

 protected:
  json call(json request) override {
    SlotGuard slot(slots_);
    const std::uint64_t id = next_id();
    request["id"] = id;
    std::future<json> reply;
    {
      std::lock_guard lock(mu_);
      if (closed_) throw EndpointError(Kind::Transport, "model process has exited");
      reply = pending_[id].get_future();
    }
    bool sent;
    {
      std::lock_guard lock(write_mu_);
      sent = child_.write_all(request.dump() + "\n");
    }
    if (!sent) {
      forget(id);
      throw EndpointError(Kind::Transport, "cannot write to model process");
    }
    if (reply.wait_for(timeout_) != std::future_status::ready) {
      forget(id);
      throw EndpointError(Kind::Timeout,
                          fmt::format("model request {} timed out after {} ms", id, timeout_.count()));
    }
    return reply.get();
  }

 private:
  void forget(std::uint64_t id) {
    std::lock_guard lock(mu_);
    pending_.erase(id);
  }

  void read_loop() {
    while (auto line = child_.read_line()) {
      json response = json::parse(*line, nullptr, false);
      if (response.is_discarded() || !response.contains("id") ||
          !response["id"].is_number_unsigned()) {
        continue;
      }
      std::lock_guard lock(mu_);
      // Late replies to timed-out requests have no pending entry and are dropped.
      auto it = pending_.find(response["id"].get<std::uint64_t>());
      if (it == pending_.end()) continue;
      it->second.set_value(std::move(response));
      pending_.erase(it);
    }
    std::lock_guard lock(mu_);
    closed_ = true;
    for (auto& [id, promise] : pending_) {
      promise.set_exception(std::make_exception_ptr(
          EndpointError(Kind::Transport, "model process closed its output")));
    }
    pending_.clear();
  }

  ChildProcess child_;
  std::thread reader_;
  std::mutex mu_;
  std::mutex write_mu_;
  std::map<std::uint64_t, std::promise<json>> pending_;
  bool closed_ = false;
};

class HttpEndpoint final : public WireEndpoint {
 public:
  explicit HttpEndpoint(const EndpointConfig& config)
      : WireEndpoint(config), url_(config.address), token_(config.bearer_token) {}

 protected:
  json call(json request) override {
    SlotGuard slot(slots_);
    const std::uint64_t id = next_id();
    request["id"] = id;
    httplib::Client client(url_);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout_);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout_ - secs);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());
    client.set_write_timeout(secs.count(), usecs.count());
    httplib::Headers headers;
    if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
    auto res = client.Post("/v1/op", headers, request.dump(), "application/json");
    if (!res) {
      const auto err = res.error();
      const Kind kind = err == httplib::Error::Read || err == httplib::Error::ConnectionTimeout
                            ? Kind::Timeout
                            : Kind::Transport;
      throw EndpointError(kind, fmt::format("POST {}/v1/op failed: {}", url_, httplib::to_string(err)));
    }
    if (res->status != 200) {
      throw EndpointError(Kind::Remote, fmt::format("POST {}/v1/op returned HTTP {}", url_, res->status));
    }
    json response = json::parse(res->body, nullptr, false);
    if (response.is_discarded()) throw EndpointError(Kind::Malformed, "response body is not JSON");
    if (response.value("id", std::uint64_t{0}) != id) {
      throw EndpointError(Kind::Malformed, "response id does not match request");
    }
    return response;
  }

 private:
  std::string url_;
  std::string token_;
};

}  // namespace

std::unique_ptr<ModelEndpoint> make_stub(std::uint64_t seed) {
  return std::make_unique<StubEndpoint>(seed);
}

std::unique_ptr<ModelEndpoint> connect(const EndpointConfig& config) {
  config.check();
  switch (config.transport) {
    case Transport::Stub:
      return make_stub(std::stoull(config.address));
    case Transport::Subprocess:
      return std::make_unique<SubprocessEndpoint>(config);
    case Transport::Http:
      return std::make_unique<HttpEndpoint>(config);
  }
  throw EndpointError(Kind::Precondition, "unknown transport");
}

json handle_request(ModelEndpoint& model, const json& request) {
  json response{{"id", request.contains("id") ? request["id"] : json(nullptr)}};
  try {
    const std::string op = request.at("op").get<std::string>();
    if (op == "loglikelihood") {
      response["logprob"] = model.loglikelihood(request.value("context", std::string()),
                                                 request.at("continuation").get<std::string>());
    } else if (op == "generate") {
      response["text"] = model.generate(request.at("prompt").get<std::string>(),
                                        request.value("max_tokens", std::uint32_t{256}))
                             .text;
    } else {
      throw EndpointError(Kind::Precondition, fmt::format("unknown op '{}'", op));
    }
    response["ok"] = true;
  } catch (const std::exception& e) {
    response["ok"] = false;
    response["error"] = e.what();
  }
  return response;
}

void serve_lines(ModelEndpoint& model, std::istream& in, std::ostream& out) {
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json request = json::parse(line, nullptr, false);
    json response = request.is_discarded() || !request.is_object()
                        ? json{{"id", nullptr}, {"ok", false}, {"error", "request is not a JSON object"}}
                        : handle_request(model, request);
    out << response.dump() << '\n' << std::flush;
  }
}

}  // namespace bamforge
