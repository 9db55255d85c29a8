#pragma once

#include <chrono>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "valsteer/engine.hpp"
#include "valsteer/error.hpp"
#include "valsteer/probes.hpp"
#include "valsteer/steering.hpp"
#include "valsteer/taxonomy.hpp"

namespace valsteer {

struct EvalQuestion {
  ValueId value = ValueId::Achievement;
  std::string id;
  std::string prompt_text;
};

/// Line-delimited records {value, id, prompt_text}. Errors carry file:line.
std::vector<EvalQuestion> load_questions(const std::string& path);

enum class VerdictKind { Csr, Fr };

struct JudgeVerdict {
  VerdictKind kind = VerdictKind::Csr;
  std::optional<bool> label;  // yes/true; absent when parse_ok is false
  std::string raw_response;
  bool parse_ok = false;
};

/// The only definition printed with the CSR template; the others come from configuration.
inline constexpr std::string_view kAchievementDefinition =
    "personal success through demonstrating competence according to social standards";

/// Definitions keyed by value; achievement is pre-filled.
using ValueDefinitions = std::map<ValueId, std::string>;
ValueDefinitions default_definitions();
/// Reads {"<value>": "<definition>", ...} on top of the defaults.
ValueDefinitions definitions_from_json(const nlohmann::json& doc);
/// Throws MissingValue.
const std::string& definition_for(const ValueDefinitions& defs, ValueId value);

/// Throws InvalidArgument on empty or whitespace-only fields.
std::string build_csr_prompt(ValueId value, std::string_view definition, std::string_view question,
                             std::string_view answer);
std::string build_fr_prompt(std::string_view answer);

/// First label word in the response, case-insensitive.
std::optional<bool> parse_verdict(VerdictKind kind, std::string_view response);

/// Chat-completion style endpoint. Implementations must be safe to call from several threads.
/// Transient failures throw Error(EndpointUnreachable) or Error(RateLimited).
class JudgeClient {
 public:
  virtual ~JudgeClient() = default;
  virtual std::string complete(const std::string& prompt) = 0;
};

/// Deterministic stand-in: replies by prompt, or falls back to a constant.
class MockJudge final : public JudgeClient {
 public:
  explicit MockJudge(std::string fallback = "Yes") : fallback_(std::move(fallback)) {}

  void script(const std::string& prompt, std::string response);
  /// The next n calls fail with the given code before any reply is produced.
  void fail_next(std::size_t n, ErrorCode code);
  [[nodiscard]] std::size_t calls() const;

  std::string complete(const std::string& prompt) override;

 private:
  mutable std::mutex mu_;
  std::string fallback_;
  std::map<std::string, std::string> scripted_;
  std::size_t failures_left_ = 0;
  ErrorCode failure_code_ = ErrorCode::EndpointUnreachable;
  std::size_t calls_ = 0;
};

/// Replays a transcript: looks responses up by prompt hash.
class ReplayJudge final : public JudgeClient {
 public:
  explicit ReplayJudge(const std::string& transcript_path);
  std::string complete(const std::string& prompt) override;
  [[nodiscard]] std::size_t size() const noexcept { return responses_.size(); }

 private:
  std::map<std::string, std::string> responses_;
};

struct HttpJudgeConfig {
  std::string base_url;                                   // e.g. https://api.example.com
  std::string path = "/v1/chat/completions";
  std::string model;
  std::string api_key_env = "VALSTEER_JUDGE_API_KEY";     // name of the env var holding the token
  int timeout_seconds = 60;
};

HttpJudgeConfig http_judge_config_from_json(const nlohmann::json& doc);

/// Sends {model, temperature: 0, messages: [{role: user, content}]}. Throws InvalidArgument when
/// api_key_env names an unset variable.
std::unique_ptr<JudgeClient> make_http_judge(const HttpJudgeConfig& config);

/// Appends {prompt_hash, response, timestamp} lines. Thread-safe.
class TranscriptWriter {
 public:
  explicit TranscriptWriter(std::string path);
  void append(const std::string& prompt, const std::string& response);

 private:
  std::mutex mu_;
  std::string path_;
};

struct EvaluateOptions {
  unsigned max_retries = 3;
  std::chrono::milliseconds initial_backoff{500};
  unsigned concurrency = 1;
  std::function<void(std::chrono::milliseconds)> sleep;  // defaults to this_thread::sleep_for
  TranscriptWriter* transcript = nullptr;
};

struct EvaluationResult {
  std::vector<JudgeVerdict> verdicts;  // same order as the prompts
  std::size_t excluded = 0;
};

/// Throws EndpointUnreachable or RateLimited once retries are exhausted.
EvaluationResult evaluate(JudgeClient& client, VerdictKind kind, std::span<const std::string> prompts,
                          const EvaluateOptions& options = {});

/// Fraction of yes among parse_ok CSR verdicts. Throws NoValidVerdicts.
double csr_rate(std::span<const JudgeVerdict> verdicts);
/// Fraction of true among parse_ok FR verdicts. Throws NoValidVerdicts.
double fr_rate(std::span<const JudgeVerdict> verdicts);

struct ProxyResult {
  double rate = 0.0;
  std::size_t n = 0;
  std::uint32_t layer = 0;
  std::vector<double> scores;
};

/// Offline stand-in for the judge: generates with the plan (or unsteered when plan is null),
/// runs the steered forward pass over prompt + generation and thresholds the value's probe
/// score at the deepest kept layer at 0.5. Not comparable to judged CSR.
/// Throws NoKeptLayers.
ProxyResult proxy_csr(const ProbeSet& probes, ValueId value, const TransformerModel& model,
                      const Tokenizer& tokenizer, std::span<const EvalQuestion> questions, const SteeringPlan* plan,
                      const DecodeParams& params);

}  // namespace valsteer
