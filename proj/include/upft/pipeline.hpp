#pragma once

/**
 * Dataset construction for the four self-training methods plus token-budget
 * accounting.
 *
 *  - UPFT: seeded by-question structure split; the p-fraction D_f gets one
 *    full unfiltered sample (plain prompt), the rest one prefix sample of
 *    at most t tokens paired with the prefix-task prompt.
 *  - SFT:  one full unfiltered sample per question, plain prompt.
 *  - RFT:  K samples, keep the correct subset, uniformly select one as a
 *    full example; questions with no correct sample are dropped and listed.
 *  - UPFT + label filter: K samples, uniformly select one correct sample,
 *    then treat it like UPFT (structure split; prefix truncation to t).
 *
 * Budgets count every sampled token (sampler-reported counts) and the
 * emitted target tokens for tuning, one dataset pass. Prefix targets never
 * get an end-of-sequence marker appended: a prefix is not a completed
 * answer, and the D_f mix exists to preserve full-response structure.
 * Output rows are ordered by question id so files are byte-stable.
 */

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "upft/corpus.hpp"
#include "upft/errors.hpp"
#include "upft/rng.hpp"
#include "upft/sampler.hpp"
#include "upft/toy_model.hpp"
#include "upft/vocab.hpp"

namespace upft {

// ============================================================================
// Configuration and record types
// ============================================================================

enum class Method { UPFT, SFT, RFT, UPFT_LABEL_FILTERED };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::UPFT: return "upft";
        case Method::SFT: return "sft";
        case Method::RFT: return "rft";
        case Method::UPFT_LABEL_FILTERED: return "upft-label-filtered";
    }
    return "?";
}

inline Method method_from_string(std::string_view s) {
    if (s == "upft") return Method::UPFT;
    if (s == "sft") return Method::SFT;
    if (s == "rft") return Method::RFT;
    if (s == "upft-label-filtered" || s == "upft_label_filtered") {
        return Method::UPFT_LABEL_FILTERED;
    }
    throw ValidationError("unknown method: " + std::string(s));
}

struct PipelineConfig {
    Method method = Method::UPFT;
    int prefix_len = 8;           // t
    double structure_ratio = 0.1; // p
    int n_samples = 16;           // K
    double temperature = 0.6;
    int max_sample_tokens = 256;
    std::uint64_t seed = 0;
    ExtractionScheme scheme = ExtractionScheme::Synthetic;

    void validate() const {
        if (prefix_len < 1) throw ValidationError("prefix_len must be >= 1");
        if (n_samples < 1) throw ValidationError("n_samples must be >= 1");
        if (structure_ratio < 0.0 || structure_ratio > 1.0) {
            throw ValidationError("structure_ratio must be in [0,1]");
        }
        if (max_sample_tokens < 1) throw ValidationError("max_sample_tokens must be >= 1");
        if (temperature < 0.0) throw ValidationError("temperature must be >= 0");
    }
};

enum class ExampleKind { Prefix, Full };

inline std::string to_string(ExampleKind k) {
    return k == ExampleKind::Prefix ? "Prefix" : "Full";
}

// Loss convention: target tokens only; prompts are never trained on.
struct TrainingExample {
    std::string question_id;
    std::string prompt;
    std::string target;
    ExampleKind kind = ExampleKind::Full;
};

struct TokenBudget {
    std::int64_t sampling_tokens = 0;
    std::int64_t tuning_tokens = 0;
    bool approximate = false;

    TokenBudget& operator+=(const TokenBudget& o) {
        sampling_tokens += o.sampling_tokens;
        tuning_tokens += o.tuning_tokens;
        approximate = approximate || o.approximate;
        return *this;
    }
};

struct DatasetManifest {
    std::string method;
    nlohmann::ordered_json config;
    std::string sampler_identity;
    bool sampler_deterministic = true;
    TokenBudget budget;
    std::int64_t n_examples = 0;
    std::int64_t n_prefix = 0;
    std::int64_t n_full = 0;
    std::vector<std::string> dropped_question_ids;  // no correct sample among K
    std::vector<std::string> failed_question_ids;   // sampler exhaustion
    bool partial = false;
};

struct DatasetBuild {
    std::vector<TrainingExample> examples;
    TokenBudget budget;
    DatasetManifest manifest;
};

// ============================================================================
// Template and structure split
// ============================================================================

// Question text followed by the exact prefix-task instruction sentence.
// Not idempotent: applying twice duplicates the suffix.
inline std::string apply_template(const Question& q) {
    return q.prompt_text + " " + std::string(kPrefixTaskInstruction);
}

// The D_f subset: a pure function of (question ids, p, seed), independent
// of input order, containing exactly round(p * N) ids.
inline std::set<std::string> structure_split(std::span<const Question> questions, double p,
                                             std::uint64_t seed) {
    std::vector<std::string> ids;
    ids.reserve(questions.size());
    for (const Question& q : questions) ids.push_back(q.id);
    std::sort(ids.begin(), ids.end());
    Rng rng(seed);
    rng.shuffle(std::span<std::string>(ids));
    const auto n_full = static_cast<std::size_t>(
        std::llround(p * static_cast<double>(ids.size())));
    return {ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(std::min(n_full, ids.size()))};
}

// ============================================================================
// Builders
// ============================================================================

namespace detail {

inline std::vector<const Question*> sorted_by_id(std::span<const Question> questions) {
    if (questions.empty()) throw ValidationError("dataset build needs at least one question");
    std::vector<const Question*> out;
    out.reserve(questions.size());
    for (const Question& q : questions) out.push_back(&q);
    std::sort(out.begin(), out.end(),
              [](const Question* a, const Question* b) { return a->id < b->id; });
    return out;
}

inline std::string truncate_words(const std::string& text, int t) {
    std::string out;
    int words = 0;
    std::size_t i = 0;
    while (i < text.size() && words < t) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j > i) {
            if (!out.empty()) out.push_back(' ');
            out += text.substr(i, j - i);
            ++words;
        }
        i = j;
    }
    return out;
}

struct Target {
    std::string text;
    std::int64_t tokens;
    bool approximate;
};

// Client-side prefix truncation: sampler-native tokens when present, else
// whitespace words (the toy backend's spaced rendering makes the two agree).
inline Target truncate_target(const SampleResult& r, int t) {
    if (r.token_based) {
        const auto keep = std::min<std::int64_t>(t, static_cast<std::int64_t>(r.tokens.size()));
        return {truncate_words(r.text, t), keep, false};
    }
    if (r.token_count <= t) return {r.text, r.token_count, r.approximate_count};
    return {truncate_words(r.text, t), t, r.approximate_count};
}

inline Target full_target(const SampleResult& r) {
    return {r.text, r.token_count, r.approximate_count};
}

inline Trajectory to_trajectory(const SampleResult& r, const std::string& qid, double temperature) {
    Trajectory traj;
    traj.question_id = qid;
    traj.text = r.text;  // correctness is judged on the rendered text
    traj.token_count = r.token_count;
    traj.sampling_temperature = temperature;
    return traj;
}

inline DatasetManifest init_manifest(const PipelineConfig& cfg, const Sampler& sampler) {
    DatasetManifest m;
    m.method = to_string(cfg.method);
    m.config = {{"method", to_string(cfg.method)},
                {"prefix_len", cfg.prefix_len},
                {"structure_ratio", cfg.structure_ratio},
                {"n_samples", cfg.n_samples},
                {"temperature", cfg.temperature},
                {"max_sample_tokens", cfg.max_sample_tokens},
                {"seed", cfg.seed},
                {"scheme", to_string(cfg.scheme)}};
    m.sampler_identity = sampler.identity();
    m.sampler_deterministic = sampler.deterministic();
    return m;
}

inline void finish_manifest(DatasetBuild& build) {
    build.manifest.budget = build.budget;
    build.manifest.n_examples = static_cast<std::int64_t>(build.examples.size());
    for (const TrainingExample& e : build.examples) {
        (e.kind == ExampleKind::Prefix ? build.manifest.n_prefix : build.manifest.n_full) += 1;
    }
    build.manifest.partial = !build.manifest.failed_question_ids.empty();
}

}  // namespace detail

// One example per question: a t-token prefix with the prefix-task prompt
// for D_p, one full unfiltered trace with the plain prompt for D_f.
inline DatasetBuild build_upft(std::span<const Question> questions, Sampler& sampler,
                               const PipelineConfig& cfg) {
    cfg.validate();
    if (cfg.method != Method::UPFT) throw ValidationError("build_upft needs method=upft");
    auto sorted = detail::sorted_by_id(questions);
    const std::set<std::string> full_ids = structure_split(questions, cfg.structure_ratio, cfg.seed);

    DatasetBuild build;
    build.manifest = detail::init_manifest(cfg, sampler);
    for (const Question* q : sorted) {
        const bool full = full_ids.count(q->id) > 0;
        SampleRequest req;
        req.prompt = q->prompt_text;
        req.n = 1;
        req.seed = hash64(q->id, cfg.seed);
        req.max_tokens = full ? cfg.max_sample_tokens : cfg.prefix_len;
        req.temperature = cfg.temperature;
        std::vector<SampleResult> rs;
        try {
            rs = sampler.sample(req);
        } catch (const TransportError&) {
            build.manifest.failed_question_ids.push_back(q->id);
            continue;
        }
        const SampleResult& r = rs.at(0);
        build.budget.sampling_tokens += count_tokens(r);
        build.budget.approximate = build.budget.approximate || r.approximate_count;

        detail::Target target =
            full ? detail::full_target(r) : detail::truncate_target(r, cfg.prefix_len);
        build.budget.tuning_tokens += target.tokens;
        build.budget.approximate = build.budget.approximate || target.approximate;
        build.examples.push_back({q->id, full ? q->prompt_text : apply_template(*q),
                                  std::move(target.text),
                                  full ? ExampleKind::Full : ExampleKind::Prefix});
    }
    detail::finish_manifest(build);
    return build;
}

// One full unfiltered sample per question; equals build_upft with p = 1
// modulo the manifest method tag.
inline DatasetBuild build_sft(std::span<const Question> questions, Sampler& sampler,
                              const PipelineConfig& cfg) {
    cfg.validate();
    if (cfg.method != Method::SFT) throw ValidationError("build_sft needs method=sft");
    auto sorted = detail::sorted_by_id(questions);

    DatasetBuild build;
    build.manifest = detail::init_manifest(cfg, sampler);
    for (const Question* q : sorted) {
        SampleRequest req;
        req.prompt = q->prompt_text;
        req.n = 1;
        req.seed = hash64(q->id, cfg.seed);
        req.max_tokens = cfg.max_sample_tokens;
        req.temperature = cfg.temperature;
        std::vector<SampleResult> rs;
        try {
            rs = sampler.sample(req);
        } catch (const TransportError&) {
            build.manifest.failed_question_ids.push_back(q->id);
            continue;
        }
        const SampleResult& r = rs.at(0);
        build.budget.sampling_tokens += count_tokens(r);
        detail::Target target = detail::full_target(r);
        build.budget.tuning_tokens += target.tokens;
        build.budget.approximate = build.budget.approximate || r.approximate_count;
        build.examples.push_back({q->id, q->prompt_text, std::move(target.text), ExampleKind::Full});
    }
    detail::finish_manifest(build);
    return build;
}

namespace detail {

// K samples, returns indices of the correct ones. Throws if any question
// lacks a reference answer (checked by the callers up front).
inline std::vector<std::size_t> correct_indices(const std::vector<SampleResult>& rs,
                                                const Question& q, const PipelineConfig& cfg) {
    std::vector<std::size_t> correct;
    for (std::size_t i = 0; i < rs.size(); ++i) {
        Trajectory traj = to_trajectory(rs[i], q.id, cfg.temperature);
        if (is_correct(traj, q, cfg.scheme)) correct.push_back(i);
    }
    return correct;
}

inline void require_reference_answers(std::span<const Question> questions, const char* op) {
    for (const Question& q : questions) {
        if (!q.reference_answer) {
            throw ValidationError(std::string(op) + " requires reference answers (question " +
                                  q.id + " has none)");
        }
    }
}

}  // namespace detail

// K samples per question, keep the correct subset, uniformly select one.
// Questions with zero correct samples are dropped and listed.
inline DatasetBuild build_rft(std::span<const Question> questions, Sampler& sampler,
                              const PipelineConfig& cfg) {
    cfg.validate();
    if (cfg.method != Method::RFT) throw ValidationError("build_rft needs method=rft");
    detail::require_reference_answers(questions, "build_rft");
    auto sorted = detail::sorted_by_id(questions);

    DatasetBuild build;
    build.manifest = detail::init_manifest(cfg, sampler);
    for (const Question* q : sorted) {
        SampleRequest req;
        req.prompt = q->prompt_text;
        req.n = cfg.n_samples;
        req.seed = hash64(q->id, cfg.seed);
        req.max_tokens = cfg.max_sample_tokens;
        req.temperature = cfg.temperature;
        std::vector<SampleResult> rs;
        try {
            rs = sampler.sample(req);
        } catch (const TransportError&) {
            build.manifest.failed_question_ids.push_back(q->id);
            continue;
        }
        for (const SampleResult& r : rs) {
            build.budget.sampling_tokens += count_tokens(r);
            build.budget.approximate = build.budget.approximate || r.approximate_count;
        }
        std::vector<std::size_t> correct = detail::correct_indices(rs, *q, cfg);
        if (correct.empty()) {
            build.manifest.dropped_question_ids.push_back(q->id);
            continue;
        }
        Rng pick(hash64(q->id + "#select", cfg.seed));
        const SampleResult& chosen = rs[correct[pick.next_below(correct.size())]];
        detail::Target target = detail::full_target(chosen);
        build.budget.tuning_tokens += target.tokens;
        build.examples.push_back({q->id, q->prompt_text, std::move(target.text), ExampleKind::Full});
    }
    detail::finish_manifest(build);
    return build;
}

// RFT-style selection of one correct sample, then the UPFT treatment:
// structure split, prefix truncation to t, prefix-task prompt for D_p.
inline DatasetBuild build_upft_label_filtered(std::span<const Question> questions, Sampler& sampler,
                                              const PipelineConfig& cfg) {
    cfg.validate();
    if (cfg.method != Method::UPFT_LABEL_FILTERED) {
        throw ValidationError("build_upft_label_filtered needs method=upft-label-filtered");
    }
    detail::require_reference_answers(questions, "build_upft_label_filtered");
    auto sorted = detail::sorted_by_id(questions);
    const std::set<std::string> full_ids = structure_split(questions, cfg.structure_ratio, cfg.seed);

    DatasetBuild build;
    build.manifest = detail::init_manifest(cfg, sampler);
    for (const Question* q : sorted) {
        SampleRequest req;
        req.prompt = q->prompt_text;
        req.n = cfg.n_samples;
        req.seed = hash64(q->id, cfg.seed);
        req.max_tokens = cfg.max_sample_tokens;
        req.temperature = cfg.temperature;
        std::vector<SampleResult> rs;
        try {
            rs = sampler.sample(req);
        } catch (const TransportError&) {
            build.manifest.failed_question_ids.push_back(q->id);
            continue;
        }
        for (const SampleResult& r : rs) {
            build.budget.sampling_tokens += count_tokens(r);
            build.budget.approximate = build.budget.approximate || r.approximate_count;
        }
        std::vector<std::size_t> correct = detail::correct_indices(rs, *q, cfg);
        if (correct.empty()) {
            build.manifest.dropped_question_ids.push_back(q->id);
            continue;
        }
        Rng pick(hash64(q->id + "#select", cfg.seed));
        const SampleResult& chosen = rs[correct[pick.next_below(correct.size())]];
        const bool full = full_ids.count(q->id) > 0;
        detail::Target target = full ? detail::full_target(chosen)
                                     : detail::truncate_target(chosen, cfg.prefix_len);
        build.budget.tuning_tokens += target.tokens;
        build.budget.approximate = build.budget.approximate || target.approximate;
        build.examples.push_back({q->id, full ? q->prompt_text : apply_template(*q),
                                  std::move(target.text),
                                  full ? ExampleKind::Full : ExampleKind::Prefix});
    }
    detail::finish_manifest(build);
    return build;
}

inline DatasetBuild build_dataset(std::span<const Question> questions, Sampler& sampler,
                                  const PipelineConfig& cfg) {
    switch (cfg.method) {
        case Method::UPFT: return build_upft(questions, sampler, cfg);
        case Method::SFT: return build_sft(questions, sampler, cfg);
        case Method::RFT: return build_rft(questions, sampler, cfg);
        case Method::UPFT_LABEL_FILTERED: return build_upft_label_filtered(questions, sampler, cfg);
    }
    throw ValidationError("unknown method");
}

// ============================================================================
// Budget comparison
// ============================================================================

struct BudgetRow {
    std::string method;
    TokenBudget budget;
    double sampling_ratio_vs_rft = 1.0;
    double tuning_ratio_vs_rft = 1.0;
};

// Per-method token spend with ratios against the RFT row when present.
inline std::vector<BudgetRow> budget_report(
    std::span<const std::pair<std::string, TokenBudget>> budgets) {
    if (budgets.empty()) throw ValidationError("budget_report needs at least one entry");
    std::optional<TokenBudget> rft;
    for (const auto& [method, budget] : budgets) {
        if (method == "rft") rft = budget;
    }
    std::vector<BudgetRow> rows;
    for (const auto& [method, budget] : budgets) {
        BudgetRow row{method, budget, 1.0, 1.0};
        if (rft && rft->sampling_tokens > 0) {
            row.sampling_ratio_vs_rft = static_cast<double>(budget.sampling_tokens) /
                                        static_cast<double>(rft->sampling_tokens);
        }
        if (rft && rft->tuning_tokens > 0) {
            row.tuning_ratio_vs_rft = static_cast<double>(budget.tuning_tokens) /
                                      static_cast<double>(rft->tuning_tokens);
        }
        rows.push_back(row);
    }
    return rows;
}

inline void write_budget_csv(std::ostream& os, std::span<const BudgetRow> rows) {
    os << "method,sampling_tokens,tuning_tokens,sampling_ratio_vs_rft,tuning_ratio_vs_rft,approximate\n";
    for (const BudgetRow& r : rows) {
        os << r.method << ',' << r.budget.sampling_tokens << ',' << r.budget.tuning_tokens << ','
           << r.sampling_ratio_vs_rft << ',' << r.tuning_ratio_vs_rft << ','
           << (r.budget.approximate ? 1 : 0) << '\n';
    }
}

// ============================================================================
// Serialization
// ============================================================================

inline nlohmann::ordered_json example_to_json(const TrainingExample& e, const PipelineConfig& cfg) {
    return {{"question_id", e.question_id},
            {"prompt", e.prompt},
            {"target", e.target},
            {"kind", to_string(e.kind)},
            {"method", to_string(cfg.method)},
            {"t", cfg.prefix_len},
            {"seed", cfg.seed}};
}

inline void write_dataset_jsonl(std::ostream& os, const DatasetBuild& build,
                                const PipelineConfig& cfg) {
    for (const TrainingExample& e : build.examples) {
        os << example_to_json(e, cfg).dump() << '\n';
    }
}

inline void write_dataset_jsonl(const std::string& path, const DatasetBuild& build,
                                const PipelineConfig& cfg) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open for writing: " + path);
    write_dataset_jsonl(os, build, cfg);
}

inline std::vector<TrainingExample> read_dataset_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open: " + path);
    std::vector<TrainingExample> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        TrainingExample e;
        e.question_id = j.at("question_id").get<std::string>();
        e.prompt = j.at("prompt").get<std::string>();
        e.target = j.at("target").get<std::string>();
        e.kind = j.at("kind").get<std::string>() == "Prefix" ? ExampleKind::Prefix
                                                             : ExampleKind::Full;
        out.push_back(std::move(e));
    }
    return out;
}

inline nlohmann::ordered_json manifest_to_json(const DatasetManifest& m) {
    nlohmann::ordered_json j;
    j["method"] = m.method;
    j["config"] = m.config;
    j["sampler"] = {{"identity", m.sampler_identity}, {"deterministic", m.sampler_deterministic}};
    j["budget"] = {{"sampling_tokens", m.budget.sampling_tokens},
                   {"tuning_tokens", m.budget.tuning_tokens},
                   {"approximate", m.budget.approximate}};
    j["n_examples"] = m.n_examples;
    j["n_prefix"] = m.n_prefix;
    j["n_full"] = m.n_full;
    j["dropped_question_ids"] = m.dropped_question_ids;
    j["failed_question_ids"] = m.failed_question_ids;
    j["partial"] = m.partial;
    return j;
}

// Tokenizes examples for toy training: loss on target tokens only; the
// prefix-task suffix is outside the toy alphabet and is stripped by the
// tokenizer.
inline std::vector<TrainItem> tokenize_examples(std::span<const TrainingExample> examples,
                                                const Vocab& vocab) {
    std::vector<TrainItem> items;
    items.reserve(examples.size());
    for (const TrainingExample& e : examples) {
        items.push_back(tokenize_train_item(vocab, e.question_id, e.prompt, e.target));
    }
    return items;
}

// train() over TrainingExample records (the toy-backend training entry).
inline ToyModel train_on_examples(const ToyModel& m, std::span<const TrainingExample> examples,
                                  const TrainHyper& hyper, const Vocab& vocab,
                                  std::vector<double>* step_losses = nullptr) {
    return train(m, tokenize_examples(examples, vocab), hyper, step_losses);
}

}  // namespace upft
