#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <cstdlib>

#include "valsteer/judge.hpp"

namespace valsteer {

namespace {

class HttpJudge final : public JudgeClient {
 public:
  explicit HttpJudge(HttpJudgeConfig config) : config_(std::move(config)) {
    VALSTEER_CHECK(!config_.base_url.empty(), ErrorCode::InvalidArgument, "judge base_url is not configured");
    VALSTEER_CHECK(!config_.model.empty(), ErrorCode::InvalidArgument, "judge model is not configured");
    // An empty api_key_env means the endpoint needs no token.
    if (!config_.api_key_env.empty()) {
      const char* token = std::getenv(config_.api_key_env.c_str());
      VALSTEER_CHECK(token != nullptr && *token != '\0', ErrorCode::InvalidArgument,
                     "environment variable " + config_.api_key_env + " holding the judge token is not set");
      token_ = token;
    }
  }

  std::string complete(const std::string& prompt) override {
    // One client per call keeps concurrent requests independent.
    httplib::Client client(config_.base_url);
    client.set_connection_timeout(config_.timeout_seconds, 0);
    client.set_read_timeout(config_.timeout_seconds, 0);
    httplib::Headers headers;
    if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
    const nlohmann::json body = {
        {"model", config_.model},
        {"temperature", 0},
        {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
    };
    const auto res = client.Post(config_.path, headers, body.dump(), "application/json");
    if (!res)
      throw Error(ErrorCode::EndpointUnreachable, "judge request failed: " + httplib::to_string(res.error()));
    if (res->status == 429) throw Error(ErrorCode::RateLimited, "judge endpoint rate limited the request");
    if (res->status < 200 || res->status >= 300)
      throw Error(ErrorCode::EndpointUnreachable, "judge endpoint returned HTTP " + std::to_string(res->status));
    try {
      const auto doc = nlohmann::json::parse(res->body);
      return doc.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::EndpointUnreachable, std::string("malformed judge response: ") + e.what());
    }
  }

 private:
  HttpJudgeConfig config_;
  std::string token_;
};

}  // namespace

HttpJudgeConfig http_judge_config_from_json(const nlohmann::json& doc) {
  HttpJudgeConfig c;
  try {
    c.base_url = doc.value("base_url", c.base_url);
    c.path = doc.value("path", c.path);
    c.model = doc.value("model", c.model);
    c.api_key_env = doc.value("api_key_env", c.api_key_env);
    c.timeout_seconds = doc.value("timeout_seconds", c.timeout_seconds);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("judge config: ") + e.what());
  }
  return c;
}

std::unique_ptr<JudgeClient> make_http_judge(const HttpJudgeConfig& config) {
  return std::make_unique<HttpJudge>(config);
}

}  // namespace valsteer
