// SPDX-License-Identifier: Apache-2.0
//
// Model endpoints: log-likelihood and generation behind one JSON-lines
// schema, carried over a child process's stdio or HTTP POST. make_stub()
// gives a deterministic in-process model for tests.
//
// Request:  {"id": u64, "op": "loglikelihood"|"generate", "context"?, "continuation"?,
//            "prompt"?, "max_tokens"?}
// Response: {"id": u64, "ok": bool, "logprob"?, "text"?, "error"?}

#pragma once

#include <chrono>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include "bamforge/hash.hpp"
#include "json.hpp"

namespace bamforge {

class EndpointError : public std::runtime_error {
 public:
  enum class Kind { Precondition, Timeout, Transport, Malformed, NonFinite, Remote };

  EndpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

enum class Transport { Stub, Subprocess, Http };

struct EndpointConfig {
  Transport transport = Transport::Stub;
  std::string address;  // stub seed, command line, or base URL
  std::chrono::milliseconds timeout{30000};
  int retries = 2;
  std::size_t max_inflight = 4;
  std::size_t max_response_bytes = 1u << 20;
  std::string bearer_token;

  void check() const;
};

/// "stub:<seed>", "cmd:<command line>", or an http(s):// URL.
EndpointConfig parse_endpoint_spec(std::string_view spec);

struct Generation {
  std::string text;
  bool truncated = false;
};

class ModelEndpoint {
 public:
  virtual ~ModelEndpoint() = default;

  /// Log-probability of `continuation` following `context`; finite and <= 0.
  double loglikelihood(std::string_view context, std::string_view continuation);

  /// Text capped at `max_tokens` whitespace-separated tokens and
  /// max_response_bytes; `truncated` reports either cap.
  Generation generate(std::string_view prompt, std::uint32_t max_tokens);

 protected:
  ModelEndpoint(int retries, std::size_t max_response_bytes)
      : retries_(retries), max_response_bytes_(max_response_bytes) {}

  virtual double do_loglikelihood(std::string_view context, std::string_view continuation) = 0;
  virtual std::string do_generate(std::string_view prompt, std::uint32_t max_tokens) = 0;

 private:
  template <typename F>
  auto with_retries(F&& call) -> decltype(call());

  int retries_;
  std::size_t max_response_bytes_;
};

/// Deterministic model. With H = FNV-1a-64 over seed (8 bytes LE) || context
/// || continuation, loglikelihood = -((H mod 10000) / 1000 + 0.1 * |continuation|).
/// generate returns "stub-<hex H'> answer <H' mod 1000>" with H' over
/// seed || prompt.
std::unique_ptr<ModelEndpoint> make_stub(std::uint64_t seed);

std::unique_ptr<ModelEndpoint> connect(const EndpointConfig& config);

/// Server side of the wire protocol: answers one request object.
nlohmann::json handle_request(ModelEndpoint& model, const nlohmann::json& request);

/// Reads requests line by line until EOF, writing one response per line.
void serve_lines(ModelEndpoint& model, std::istream& in, std::ostream& out);

}  // namespace bamforge
