#pragma once

/**
 * Uniform sampling abstraction with two backends:
 *
 *  - Toy: in-process toy model, exactly reproducible from the seed.
 *  - Remote: chat-completions-compatible HTTP endpoint (POST
 *    /v1/chat/completions with model/messages/temperature/max_tokens/n),
 *    bounded in-flight concurrency, bounded retries with exponential
 *    backoff, API-reported token usage. Not seed-reproducible; manifests
 *    mark it.
 *
 * Token accounting: the remote backend records usage.completion_tokens
 * verbatim; when the usage field is missing it falls back to a whitespace
 * token count and flags the result as approximate so budgets are never
 * silently mixed. The toy backend counts sequence length.
 *
 * Credentials come from an environment variable (default UPFT_API_KEY) and
 * are never logged; endpoints that need no key work without it. Remote jobs
 * estimate their request count up front and refuse to exceed the configured
 * ceiling unless the override flag is set.
 */

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "upft/corpus.hpp"
#include "upft/errors.hpp"
#include "upft/rng.hpp"
#include "upft/toy_model.hpp"
#include "upft/vocab.hpp"

namespace upft {

enum class SamplerBackend { Toy, Remote };

struct RetryPolicy {
    int max_attempts = 3;
    int backoff_base_ms = 200;  // delay before attempt i+1 is base * 2^i
};

struct SamplerSpec {
    SamplerBackend backend = SamplerBackend::Toy;
    std::string model;  // Toy: checkpoint path; Remote: model identifier
    double temperature = 0.6;
    int max_tokens = 256;
    int n_per_request = 1;
    int timeout_ms = 30000;
    int max_in_flight = 4;
    RetryPolicy retry;
    std::string endpoint;  // Remote only, e.g. "http://127.0.0.1:8080"
    std::string api_key_env = "UPFT_API_KEY";
    std::uint64_t request_ceiling = 10000;
    bool override_cost_guard = false;

    void validate() const {
        if (max_tokens < 1) throw ValidationError("max_tokens must be >= 1");
        if (max_in_flight < 1) throw ValidationError("max_in_flight must be >= 1");
        if (n_per_request < 1) throw ValidationError("n_per_request must be >= 1");
        if (temperature < 0.0) throw ValidationError("temperature must be >= 0");
        if (retry.max_attempts < 1) throw ValidationError("retry.max_attempts must be >= 1");
        if (backend == SamplerBackend::Remote && endpoint.empty()) {
            throw ValidationError("remote sampler needs an endpoint URL");
        }
    }
};

enum class FinishReason { Length, Stop };

struct SampleResult {
    std::vector<TokenId> tokens;  // toy backend only
    std::string text;
    bool token_based = false;
    std::int64_t token_count = 0;
    bool approximate_count = false;
    FinishReason finish = FinishReason::Stop;
    double latency_ms = 0.0;
};

// Authoritative completion token count (API usage or toy sequence length).
inline std::int64_t count_tokens(const SampleResult& r) { return r.token_count; }

inline std::int64_t whitespace_token_count(std::string_view text) {
    std::int64_t n = 0;
    bool in_word = false;
    for (char c : text) {
        const bool ws = c == ' ' || c == '\t' || c == '\n' || c == '\r';
        if (!ws && !in_word) ++n;
        in_word = !ws;
    }
    return n;
}

// Per-call overrides of the spec defaults (prefix sampling asks for t
// tokens; rollouts override temperature).
struct SampleRequest {
    std::string prompt;
    int n = 1;
    std::uint64_t seed = 0;
    std::optional<int> max_tokens;
    std::optional<double> temperature;
};

class Sampler {
public:
    virtual ~Sampler() = default;
    virtual std::vector<SampleResult> sample(const SampleRequest& req) = 0;
    virtual bool deterministic() const = 0;
    virtual std::string identity() const = 0;

    std::vector<SampleResult> sample_completions(const std::string& prompt, int n,
                                                 std::uint64_t seed) {
        return sample({prompt, n, seed, std::nullopt, std::nullopt});
    }
};

// ============================================================================
// Toy backend
// ============================================================================

class ToySampler final : public Sampler {
public:
    ToySampler(SamplerSpec spec, std::shared_ptr<const ToyModel> model, Vocab vocab)
        : spec_(std::move(spec)), model_(std::move(model)), vocab_(std::move(vocab)) {
        spec_.validate();
    }

    ToySampler(SamplerSpec spec, ToyModel model)
        : ToySampler(std::move(spec),
                     std::make_shared<const ToyModel>(std::move(model)), Vocab()) {
        vocab_ = model_->vocab();
    }

    std::vector<SampleResult> sample(const SampleRequest& req) override {
        if (req.n < 0) throw ValidationError("n must be >= 0");
        const double temperature = req.temperature.value_or(spec_.temperature);
        const int max_tokens = req.max_tokens.value_or(spec_.max_tokens);
        const std::vector<TokenId> prompt = vocab_.tokenize(req.prompt);

        Rng seeds(req.seed);
        std::vector<SampleResult> out;
        out.reserve(static_cast<std::size_t>(req.n));
        for (int i = 0; i < req.n; ++i) {
            const auto start = std::chrono::steady_clock::now();
            Trajectory traj = upft::sample(*model_, prompt, temperature, max_tokens, seeds.next_u64());
            SampleResult r;
            r.tokens = std::move(traj.tokens);
            r.token_based = true;
            r.text = vocab_.render(r.tokens);
            r.token_count = static_cast<std::int64_t>(r.tokens.size());
            r.finish = !r.tokens.empty() && model_->end_token >= 0 &&
                               r.tokens.back() == model_->end_token
                           ? FinishReason::Stop
                           : FinishReason::Length;
            r.latency_ms = std::chrono::duration<double, std::milli>(
                               std::chrono::steady_clock::now() - start)
                               .count();
            out.push_back(std::move(r));
        }
        return out;
    }

    bool deterministic() const override { return true; }
    std::string identity() const override { return "toy:" + spec_.model; }

    const ToyModel& model() const { return *model_; }
    const Vocab& vocab() const { return vocab_; }

private:
    SamplerSpec spec_;
    std::shared_ptr<const ToyModel> model_;
    Vocab vocab_;
};

// ============================================================================
// Remote backend
// ============================================================================

inline int backoff_delay_ms(const RetryPolicy& policy, int attempt) {
    // attempt is 0-based: delay after the (attempt+1)-th failure
    int delay = policy.backoff_base_ms;
    for (int i = 0; i < attempt; ++i) delay *= 2;
    return delay;
}

class RemoteSampler final : public Sampler {
public:
    explicit RemoteSampler(SamplerSpec spec) : spec_(std::move(spec)) {
        spec_.validate();
        if (const char* key = std::getenv(spec_.api_key_env.c_str())) api_key_ = key;
    }

    std::vector<SampleResult> sample(const SampleRequest& req) override {
        if (req.n < 0) throw ValidationError("n must be >= 0");
        if (req.n == 0) return {};

        // split n over requests of at most n_per_request completions
        struct Slot {
            int n;
            std::vector<SampleResult> results;
        };
        std::vector<Slot> slots;
        for (int remaining = req.n; remaining > 0; remaining -= spec_.n_per_request) {
            slots.push_back({std::min(remaining, spec_.n_per_request), {}});
        }
        check_cost_guard(slots.size());

        const int workers = std::min<int>(spec_.max_in_flight, static_cast<int>(slots.size()));
        std::atomic<std::size_t> next{0};
        std::vector<std::string> errors(slots.size());
        auto run = [&] {
            for (std::size_t i = next.fetch_add(1); i < slots.size(); i = next.fetch_add(1)) {
                try {
                    slots[i].results = post_with_retries(req, slots[i].n);
                } catch (const std::exception& e) {
                    errors[i] = e.what();
                }
            }
        };
        if (workers <= 1) {
            run();
        } else {
            std::vector<std::thread> pool;
            pool.reserve(static_cast<std::size_t>(workers));
            for (int w = 0; w < workers; ++w) pool.emplace_back(run);
            for (auto& th : pool) th.join();
        }

        std::vector<SampleResult> out;
        out.reserve(static_cast<std::size_t>(req.n));
        for (std::size_t i = 0; i < slots.size(); ++i) {
            if (!errors[i].empty()) throw TransportError(errors[i]);
            for (auto& r : slots[i].results) out.push_back(std::move(r));
        }
        return out;
    }

    bool deterministic() const override { return false; }
    std::string identity() const override {
        return "remote:" + spec_.endpoint + "/" + spec_.model;
    }

private:
    void check_cost_guard(std::size_t request_count) const {
        if (!spec_.override_cost_guard && request_count > spec_.request_ceiling) {
            throw ResourceError("cost guard: " + std::to_string(request_count) +
                                " requests exceed the ceiling of " +
                                std::to_string(spec_.request_ceiling) +
                                " (pass the override flag to proceed)");
        }
    }

    std::vector<SampleResult> post_with_retries(const SampleRequest& req, int n) {
        nlohmann::ordered_json body;
        body["model"] = spec_.model;
        body["messages"] = nlohmann::json::array({{{"role", "user"}, {"content", req.prompt}}});
        body["temperature"] = req.temperature.value_or(spec_.temperature);
        body["max_tokens"] = req.max_tokens.value_or(spec_.max_tokens);
        body["n"] = n;
        const std::string payload = body.dump();

        std::string attempt_log;
        for (int attempt = 0; attempt < spec_.retry.max_attempts; ++attempt) {
            if (attempt > 0) {
                std::this_thread::sleep_for(
                    std::chrono::milliseconds(backoff_delay_ms(spec_.retry, attempt - 1)));
            }
            const auto start = std::chrono::steady_clock::now();
            httplib::Client client(spec_.endpoint);
            client.set_connection_timeout(0, spec_.timeout_ms * 1000);
            client.set_read_timeout(spec_.timeout_ms / 1000, (spec_.timeout_ms % 1000) * 1000);
            httplib::Headers headers;
            if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

            auto res = client.Post("/v1/chat/completions", headers, payload, "application/json");
            const double latency = std::chrono::duration<double, std::milli>(
                                       std::chrono::steady_clock::now() - start)
                                       .count();
            if (res && res->status == 200) {
                return parse_response(res->body, latency);
            }
            attempt_log += "attempt " + std::to_string(attempt + 1) + ": " +
                           (res ? "HTTP " + std::to_string(res->status)
                                : "transport error " + httplib::to_string(res.error())) +
                           "; ";
        }
        throw TransportError("remote sampling failed after " +
                             std::to_string(spec_.retry.max_attempts) + " attempts [" +
                             attempt_log + "]");
    }

    std::vector<SampleResult> parse_response(const std::string& body, double latency_ms) {
        nlohmann::json j = nlohmann::json::parse(body, nullptr, false);
        if (j.is_discarded() || !j.contains("choices") || !j["choices"].is_array()) {
            throw TransportError("protocol error: malformed completion response: " +
                                 body.substr(0, 200));
        }
        const bool has_usage = j.contains("usage") && j["usage"].contains("completion_tokens");
        const std::int64_t usage_tokens =
            has_usage ? j["usage"]["completion_tokens"].get<std::int64_t>() : 0;

        std::vector<SampleResult> out;
        for (const auto& choice : j["choices"]) {
            SampleResult r;
            if (choice.contains("message") && choice["message"].contains("content")) {
                r.text = choice["message"]["content"].get<std::string>();
            } else if (choice.contains("text")) {
                r.text = choice["text"].get<std::string>();
            } else {
                throw TransportError("protocol error: choice without content: " +
                                     body.substr(0, 200));
            }
            r.finish = choice.value("finish_reason", "stop") == "length" ? FinishReason::Length
                                                                         : FinishReason::Stop;
            if (has_usage) {
                // the API reports a single completion count per response;
                // attribute it to the batch's choices evenly
                r.token_count = usage_tokens / static_cast<std::int64_t>(j["choices"].size());
            } else {
                r.token_count = whitespace_token_count(r.text);
                r.approximate_count = true;
            }
            r.latency_ms = latency_ms;
            out.push_back(std::move(r));
        }
        if (out.empty()) {
            throw TransportError("protocol error: empty choices array: " + body.substr(0, 200));
        }
        return out;
    }

    SamplerSpec spec_;
    std::string api_key_;
};

// Builds the backend named by the spec; Toy loads spec.model as a checkpoint.
inline std::unique_ptr<Sampler> make_sampler(const SamplerSpec& spec) {
    spec.validate();
    if (spec.backend == SamplerBackend::Toy) {
        ToyModel m = load_model(spec.model);
        return std::make_unique<ToySampler>(spec, std::move(m));
    }
    return std::make_unique<RemoteSampler>(spec);
}

inline std::vector<SampleResult> sample_completions(const SamplerSpec& spec,
                                                    const std::string& prompt, int n,
                                                    std::uint64_t seed) {
    return make_sampler(spec)->sample_completions(prompt, n, seed);
}

}  // namespace upft
