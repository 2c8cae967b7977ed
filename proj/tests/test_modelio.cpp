// SPDX-License-Identifier: Apache-2.0

#include <atomic>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "bamforge/modelio.hpp"
#include "doctest.h"
#include "httplib.h"
#include "testing.hpp"

using namespace bamforge;
using Kind = EndpointError::Kind;
using nlohmann::json;

namespace {

Kind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const EndpointError& e) {
    return e.kind();
  }
  FAIL("expected an EndpointError");
  return Kind::Remote;
}

EndpointConfig subprocess(const std::string& args, int retries = 0,
                          std::chrono::milliseconds timeout = std::chrono::milliseconds(5000)) {
  auto config = parse_endpoint_spec("cmd:" + std::string(BAMFORGE_STUB_MODEL_PATH) + " " + args);
  config.retries = retries;
  config.timeout = timeout;
  return config;
}

// Local HTTP model server answering /v1/op from a stub.
class HttpStub {
 public:
  explicit HttpStub(std::uint64_t seed, std::string token = {}) : model_(make_stub(seed)) {
    server_.Post("/v1/op", [this, token](const httplib::Request& req, httplib::Response& res) {
      ++calls;
      if (!token.empty() && req.get_header_value("Authorization") != "Bearer " + token) {
        res.status = 401;
        return;
      }
      if (fail_next > 0) {
        --fail_next;
        res.status = 500;
        return;
      }
      const json request = json::parse(req.body);
      if (request.value("prompt", std::string()) == "slow") {
        std::this_thread::sleep_for(std::chrono::milliseconds(600));
      }
      json response = handle_request(*model_, request);
      if (request.value("prompt", std::string()) == "wrong-id") response["id"] = 999999;
      res.set_content(response.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~HttpStub() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

  std::atomic<int> calls{0};
  std::atomic<int> fail_next{0};

 private:
  std::unique_ptr<ModelEndpoint> model_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST_CASE("FNV-1a reference values") {
  // Published FNV-1a 64 test vectors.
  CHECK(testing::fnv1a_oracle("") == 0xcbf29ce484222325ull);
  CHECK(testing::fnv1a_oracle("a") == 0xaf63dc4c8601ec8cull);
  CHECK(testing::fnv1a_oracle("abc") == 0xe71fa2190541574bull);
  CHECK(fnv1a64(std::string_view("abc")) == 0xe71fa2190541574bull);
  CHECK(fnv1a64(std::string_view("bc"), fnv1a64(std::string_view("a"))) == 0xe71fa2190541574bull);
  CHECK(hex64(0xabcull) == "0000000000000abc");
}

TEST_CASE("stub model") {
  auto stub = make_stub(7);
  CHECK(stub->loglikelihood("q", "a") == testing::stub_loglikelihood_oracle(7, "q", "a"));
  CHECK(stub->loglikelihood("q", "a") == stub->loglikelihood("q", "a"));
  CHECK(kind_of([&] { stub->loglikelihood("q", ""); }) == Kind::Precondition);
  CHECK(stub->generate("x", 10).text == stub->generate("x", 10).text);
  CHECK(stub->generate("x", 10).text == testing::stub_generate_oracle(7, "x"));
  CHECK(kind_of([&] { stub->generate("x", 0); }) == Kind::Precondition);

  SUBCASE("values are negative and match the oracle") {
    std::mt19937_64 rng(53);
    for (int i = 0; i < 2000; ++i) {
      const std::uint64_t seed = rng();
      const std::string ctx = std::to_string(rng());
      const std::string cont = " " + std::to_string(rng() % 1000);
      auto m = make_stub(seed);
      const double v = m->loglikelihood(ctx, cont);
      REQUIRE(v < 0.0);
      REQUIRE(v == testing::stub_loglikelihood_oracle(seed, ctx, cont));
    }
  }
  SUBCASE("distinct prompts give distinct outputs") {
    std::set<std::string> seen;
    for (int i = 0; i < 1000; ++i) seen.insert(stub->generate("prompt " + std::to_string(i), 8).text);
    CHECK(seen.size() == 1000);
  }
  SUBCASE("token cap") {
    const auto g = stub->generate("x", 1);
    CHECK(g.truncated);
    CHECK(g.text.find(' ') == std::string::npos);
    CHECK(g.text.starts_with("stub-"));
    CHECK_FALSE(stub->generate("x", 3).truncated);
  }
}

TEST_CASE("stub matches pinned golden fixtures") {
  std::ifstream in(std::string(BAMFORGE_FIXTURE_DIR) + "/stub_golden.jsonl");
  REQUIRE(in);
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) {
    const json row = json::parse(line);
    auto m = make_stub(row["seed"].get<std::uint64_t>());
    if (row["op"] == "loglikelihood") {
      CHECK(m->loglikelihood(row["context"].get<std::string>(), row["continuation"].get<std::string>()) ==
            row["logprob"].get<double>());
    } else {
      CHECK(m->generate(row["prompt"].get<std::string>(), 16).text == row["text"].get<std::string>());
    }
    ++rows;
  }
  CHECK(rows == 9);
}

TEST_CASE("endpoint specs") {
  CHECK(parse_endpoint_spec("stub:42").transport == Transport::Stub);
  CHECK(parse_endpoint_spec("cmd:./model --x 'a b'").transport == Transport::Subprocess);
  CHECK(parse_endpoint_spec("http://localhost:8080").transport == Transport::Http);
  CHECK(kind_of([] { parse_endpoint_spec("stub:-1"); }) == Kind::Precondition);
  CHECK(kind_of([] { parse_endpoint_spec("cmd:  "); }) == Kind::Precondition);
  CHECK(kind_of([] { parse_endpoint_spec("ftp://x"); }) == Kind::Precondition);

  EndpointConfig bad;
  bad.timeout = std::chrono::milliseconds(0);
  CHECK(kind_of([&] { bad.check(); }) == Kind::Precondition);
  bad = {};
  bad.retries = -1;
  CHECK(kind_of([&] { connect(bad); }) == Kind::Precondition);

  auto stub = connect(parse_endpoint_spec("stub:9"));
  CHECK(stub->loglikelihood("c", "d") == testing::stub_loglikelihood_oracle(9, "c", "d"));
}

TEST_CASE("line server") {
  auto stub = make_stub(3);
  std::istringstream in(
      R"({"id":1,"op":"loglikelihood","context":"q","continuation":"a"})" "\n"
      R"({"id":2,"op":"generate","prompt":"p","max_tokens":1})" "\n"
      "not json\n"
      R"({"id":4,"op":"dance"})" "\n"
      R"({"id":5,"op":"loglikelihood","context":"q","continuation":""})" "\n");
  std::ostringstream out;
  serve_lines(*stub, in, out);
  std::istringstream lines(out.str());
  std::vector<json> r;
  for (std::string l; std::getline(lines, l);) r.push_back(json::parse(l));
  REQUIRE(r.size() == 5);
  CHECK(r[0]["id"] == 1);
  CHECK(r[0]["logprob"].get<double>() == testing::stub_loglikelihood_oracle(3, "q", "a"));
  CHECK(r[1]["text"].get<std::string>().find(' ') == std::string::npos);
  CHECK(r[2]["ok"] == false);
  CHECK(r[3]["ok"] == false);
  CHECK(r[4]["ok"] == false);
}

TEST_CASE("subprocess transport") {
  auto local = make_stub(7);

  SUBCASE("answers match the in-process stub, also under concurrency") {
    auto model = connect(subprocess("--seed 7"));
    CHECK(model->loglikelihood("Въпрос", " да") == local->loglikelihood("Въпрос", " да"));
    CHECK(model->generate("x", 16).text == testing::stub_generate_oracle(7, "x"));
    std::vector<std::thread> pool;
    std::atomic<int> mismatches{0};
    for (int t = 0; t < 4; ++t) {
      pool.emplace_back([&, t] {
        auto mine = make_stub(7);
        for (int i = 0; i < 50; ++i) {
          const std::string ctx = "t" + std::to_string(t) + "i" + std::to_string(i);
          if (model->loglikelihood(ctx, " z") != mine->loglikelihood(ctx, " z")) ++mismatches;
        }
      });
    }
    for (auto& th : pool) th.join();
    CHECK(mismatches == 0);
  }
  SUBCASE("a lost reply times out") {
    auto model = connect(subprocess("--seed 7 --drop-first 1", 0, std::chrono::milliseconds(200)));
    CHECK(kind_of([&] { model->loglikelihood("q", "a"); }) == Kind::Timeout);
    CHECK(model->loglikelihood("q", "a") == local->loglikelihood("q", "a"));
  }
  SUBCASE("a retry recovers with the same value") {
    auto model = connect(subprocess("--seed 7 --drop-first 2", 2, std::chrono::milliseconds(200)));
    CHECK(model->loglikelihood("q", "a") == local->loglikelihood("q", "a"));
  }
  SUBCASE("response cap") {
    auto config = subprocess("--seed 7");
    config.max_response_bytes = 10;
    const auto g = connect(config)->generate("x", 16);
    CHECK(g.truncated);
    CHECK(g.text == testing::stub_generate_oracle(7, "x").substr(0, 10));
  }
  SUBCASE("a process that exits is a transport error") {
    auto model = connect(parse_endpoint_spec("cmd:true"));
    CHECK(kind_of([&] { model->loglikelihood("q", "a"); }) == Kind::Transport);
  }
  SUBCASE("an echoing process is not a model") {
    auto model = connect(parse_endpoint_spec("cmd:cat"));
    CHECK(kind_of([&] { model->loglikelihood("q", "a"); }) == Kind::Remote);
  }
}

TEST_CASE("http transport") {
  HttpStub server(11, "s3cret");
  auto config = parse_endpoint_spec(server.url());
  config.bearer_token = "s3cret";
  config.retries = 0;
  config.timeout = std::chrono::milliseconds(2000);
  auto local = make_stub(11);

  SUBCASE("answers match the stub") {
    auto model = connect(config);
    CHECK(model->loglikelihood("q", "a") == local->loglikelihood("q", "a"));
    CHECK(model->generate("y", 16).text == testing::stub_generate_oracle(11, "y"));
  }
  SUBCASE("wrong token is rejected") {
    config.bearer_token = "nope";
    auto model = connect(config);
    CHECK(kind_of([&] { model->loglikelihood("q", "a"); }) == Kind::Remote);
  }
  SUBCASE("server errors are retried and the result is unchanged") {
    config.retries = 2;
    auto model = connect(config);
    server.fail_next = 2;
    CHECK(model->loglikelihood("q", "a") == local->loglikelihood("q", "a"));
    CHECK(server.calls == 3);
    server.fail_next = 3;
    CHECK(kind_of([&] { model->loglikelihood("q", "a"); }) == Kind::Remote);
  }
  SUBCASE("slow server times out") {
    config.timeout = std::chrono::milliseconds(150);
    auto model = connect(config);
    CHECK(kind_of([&] { model->generate("slow", 4); }) == Kind::Timeout);
  }
  SUBCASE("mismatched reply id") {
    auto model = connect(config);
    CHECK(kind_of([&] { model->generate("wrong-id", 4); }) == Kind::Malformed);
  }
  SUBCASE("nothing listening") {
    auto closed = parse_endpoint_spec("http://127.0.0.1:1");
    closed.retries = 0;
    closed.timeout = std::chrono::milliseconds(500);
    auto model = connect(closed);
    CHECK(kind_of([&] { model->loglikelihood("q", "a"); }) == Kind::Transport);
  }
}
