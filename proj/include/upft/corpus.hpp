#pragma once

/**
 * Question/trajectory data model, the synthetic step-wise arithmetic task,
 * answer extraction and correctness checking.
 *
 * Synthetic questions have the form "a1+a2-a3=?" (tight, '?' display-only)
 * with digit operands and step-wise evaluation mod `modulus`. The canonical
 * reference trace is the spaced derivation "a1 + a2 = c1 ; c1 - a3 = c2 ;
 * A c2 E". Reference traces exist for documentation, golden files and base
 * model pretraining; the self-training dataset builders never read them.
 */

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "upft/errors.hpp"
#include "upft/rng.hpp"
#include "upft/vocab.hpp"

namespace upft {

// ============================================================================
// Domain types
// ============================================================================

struct Question {
    std::string id;
    std::string prompt_text;
    std::optional<std::string> reference_answer;
    std::map<std::string, std::string> meta;
};

// A sampled solution. Toy-model samples carry token ids plus their canonical
// rendering; remote samples carry text only (token_count is then the
// sampler-reported count).
struct Trajectory {
    std::string question_id;
    std::vector<TokenId> tokens;
    std::string text;
    bool token_based = false;
    std::int64_t token_count = 0;
    std::optional<std::string> extracted_answer;
    std::optional<bool> correct;
    double sampling_temperature = 0.0;
};

struct SyntheticTaskSpec {
    int n_questions = 0;
    int n_steps = 0;
    int modulus = 10;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_questions < 1) throw ValidationError("n_questions must be positive");
        if (n_steps < 1) throw ValidationError("n_steps must be positive");
        // Step values appear as single tokens in traces, so they must be
        // single digits.
        if (modulus < 2 || modulus > 10) {
            throw ValidationError("modulus must be in [2,10], got " + std::to_string(modulus));
        }
    }
};

enum class ExtractionScheme { Synthetic, LastNumber, Boxed };

inline std::string to_string(ExtractionScheme s) {
    switch (s) {
        case ExtractionScheme::Synthetic: return "synthetic";
        case ExtractionScheme::LastNumber: return "last-number";
        case ExtractionScheme::Boxed: return "boxed";
    }
    return "?";
}

inline ExtractionScheme extraction_scheme_from_string(std::string_view s) {
    if (s == "synthetic") return ExtractionScheme::Synthetic;
    if (s == "last-number" || s == "last_number") return ExtractionScheme::LastNumber;
    if (s == "boxed") return ExtractionScheme::Boxed;
    throw ValidationError("unknown extraction scheme: " + std::string(s));
}

// ============================================================================
// Arithmetic chains
// ============================================================================

struct Chain {
    std::vector<int> operands;  // n_steps + 1 digits
    std::vector<char> ops;      // n_steps of '+' / '-'
};

// Left-to-right evaluation with a reduction after every step; values stay
// in [0, modulus).
inline int evaluate_chain(const Chain& chain, int modulus) {
    if (chain.operands.size() != chain.ops.size() + 1) {
        throw ValidationError("chain needs one more operand than ops");
    }
    int acc = chain.operands[0] % modulus;
    for (std::size_t i = 0; i < chain.ops.size(); ++i) {
        int b = chain.operands[i + 1];
        acc = chain.ops[i] == '+' ? acc + b : acc - b;
        acc = ((acc % modulus) + modulus) % modulus;
    }
    return acc;
}

inline std::string chain_prompt_text(const Chain& chain) {
    std::string out;
    out.push_back(static_cast<char>('0' + chain.operands[0]));
    for (std::size_t i = 0; i < chain.ops.size(); ++i) {
        out.push_back(chain.ops[i]);
        out.push_back(static_cast<char>('0' + chain.operands[i + 1]));
    }
    out += "=?";
    return out;
}

// Parses "3+4-2=?" back into operands and ops.
inline Chain parse_chain(std::string_view prompt) {
    Chain chain;
    bool want_digit = true;
    for (char c : prompt) {
        if (c == ' ') continue;
        if (c == '=' || c == '?') break;
        if (want_digit) {
            if (!std::isdigit(static_cast<unsigned char>(c))) {
                throw DataError("expected digit in chain prompt: " + std::string(prompt));
            }
            chain.operands.push_back(c - '0');
        } else {
            if (c != '+' && c != '-') {
                throw DataError("expected operator in chain prompt: " + std::string(prompt));
            }
            chain.ops.push_back(c);
        }
        want_digit = !want_digit;
    }
    if (chain.operands.empty() || chain.operands.size() != chain.ops.size() + 1) {
        throw DataError("malformed chain prompt: " + std::string(prompt));
    }
    return chain;
}

// Canonical derivation, single-spaced: "3 + 4 = 7 ; 7 - 2 = 5 ; A 5 E".
inline std::string canonical_trace(const Chain& chain, int modulus) {
    std::ostringstream out;
    int acc = chain.operands[0] % modulus;
    for (std::size_t i = 0; i < chain.ops.size(); ++i) {
        int b = chain.operands[i + 1];
        int next = chain.ops[i] == '+' ? acc + b : acc - b;
        next = ((next % modulus) + modulus) % modulus;
        out << acc << ' ' << chain.ops[i] << ' ' << b << " = " << next << " ; ";
        acc = next;
    }
    out << "A " << acc << " E";
    return out.str();
}

inline std::string canonical_trace(const Question& q) {
    auto it = q.meta.find("modulus");
    int modulus = it != q.meta.end() ? std::stoi(it->second) : 10;
    return canonical_trace(parse_chain(q.prompt_text), modulus);
}

// ============================================================================
// Synthetic corpus generation
// ============================================================================

// Pure function of the spec: identical specs yield byte-identical corpora.
inline std::vector<Question> generate_synthetic(const SyntheticTaskSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    std::vector<Question> out;
    out.reserve(static_cast<std::size_t>(spec.n_questions));
    for (int i = 0; i < spec.n_questions; ++i) {
        Chain chain;
        chain.operands.push_back(static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.modulus))));
        for (int s = 0; s < spec.n_steps; ++s) {
            chain.ops.push_back(rng.next_below(2) == 0 ? '+' : '-');
            chain.operands.push_back(static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.modulus))));
        }
        Question q;
        char idbuf[48];
        std::snprintf(idbuf, sizeof(idbuf), "synth-s%llu-q%06d",
                      static_cast<unsigned long long>(spec.seed), i);
        q.id = idbuf;
        q.prompt_text = chain_prompt_text(chain);
        q.reference_answer = std::to_string(evaluate_chain(chain, spec.modulus));
        q.meta = {{"source", "synthetic"},
                  {"steps", std::to_string(spec.n_steps)},
                  {"modulus", std::to_string(spec.modulus)}};
        out.push_back(std::move(q));
    }
    return out;
}

// ============================================================================
// Answer extraction and correctness
// ============================================================================

// Trim whitespace, drop a leading '+', strip leading zeros ("05" -> "5",
// "000" -> "0"). String comparison afterwards avoids float pitfalls.
inline std::string normalize_answer(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    s = s.substr(b, e - b);
    bool neg = false;
    if (!s.empty() && (s.front() == '+' || s.front() == '-')) {
        neg = s.front() == '-';
        s.remove_prefix(1);
    }
    while (s.size() > 1 && s.front() == '0') s.remove_prefix(1);
    if (s == "0") neg = false;
    std::string out(neg ? "-" : "");
    out += s;
    return out;
}

// Synthetic scheme over token ids: everything after the last answer marker
// up to (not including) the end marker, rendered tight.
inline std::optional<std::string> extract_answer_tokens(std::span<const TokenId> tokens,
                                                        const Vocab& vocab) {
    if (!vocab.contains('A')) return std::nullopt;
    const TokenId marker = vocab.id('A');
    const TokenId end = vocab.end_id();
    std::ptrdiff_t pos = -1;
    for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(tokens.size()) - 1; i >= 0; --i) {
        if (tokens[static_cast<std::size_t>(i)] == marker) {
            pos = i;
            break;
        }
    }
    if (pos < 0) return std::nullopt;
    std::string answer;
    for (std::size_t i = static_cast<std::size_t>(pos) + 1; i < tokens.size(); ++i) {
        if (end >= 0 && tokens[i] == end) break;
        answer.push_back(vocab.ch(tokens[i]));
    }
    if (answer.empty()) return std::nullopt;
    return answer;
}

namespace detail {

// Synthetic scheme over text: words after the last "A"/"ANS" word, joined
// tightly, up to an "E" word.
inline std::optional<std::string> extract_synthetic_text(std::string_view text) {
    std::vector<std::string_view> words;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j > i) words.push_back(text.substr(i, j - i));
        i = j;
    }
    std::ptrdiff_t marker = -1;
    for (std::ptrdiff_t w = static_cast<std::ptrdiff_t>(words.size()) - 1; w >= 0; --w) {
        if (words[static_cast<std::size_t>(w)] == "A" || words[static_cast<std::size_t>(w)] == "ANS") {
            marker = w;
            break;
        }
    }
    if (marker < 0) return std::nullopt;
    std::string answer;
    for (std::size_t w = static_cast<std::size_t>(marker) + 1; w < words.size(); ++w) {
        if (words[w] == "E") break;
        answer += words[w];
    }
    if (answer.empty()) return std::nullopt;
    return answer;
}

inline std::optional<std::string> extract_last_number(std::string_view text) {
    std::ptrdiff_t end = -1;
    for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(text.size()) - 1; i >= 0; --i) {
        if (std::isdigit(static_cast<unsigned char>(text[static_cast<std::size_t>(i)]))) {
            end = i;
            break;
        }
    }
    if (end < 0) return std::nullopt;
    std::ptrdiff_t begin = end;
    while (begin > 0 && std::isdigit(static_cast<unsigned char>(text[static_cast<std::size_t>(begin - 1)]))) {
        --begin;
    }
    std::string out(text.substr(static_cast<std::size_t>(begin),
                                static_cast<std::size_t>(end - begin + 1)));
    if (begin > 0 && text[static_cast<std::size_t>(begin - 1)] == '-') out.insert(out.begin(), '-');
    return out;
}

inline std::optional<std::string> extract_boxed(std::string_view text) {
    static constexpr std::string_view tag = "\\boxed{";
    std::size_t pos = text.rfind(tag);
    if (pos == std::string_view::npos) return std::nullopt;
    std::size_t i = pos + tag.size();
    int depth = 1;
    std::string content;
    while (i < text.size() && depth > 0) {
        char c = text[i++];
        if (c == '{') ++depth;
        if (c == '}') {
            --depth;
            if (depth == 0) break;
        }
        content.push_back(c);
    }
    if (depth != 0 || content.empty()) return std::nullopt;
    return content;
}

}  // namespace detail

// Absence is a value, not an error; empty trajectories yield absent.
inline std::optional<std::string> extract_answer(const Trajectory& traj, ExtractionScheme scheme,
                                                 const Vocab& vocab = Vocab::synthetic()) {
    if (traj.token_based) {
        if (scheme == ExtractionScheme::Synthetic) {
            return extract_answer_tokens(traj.tokens, vocab);
        }
        const std::string rendered = vocab.render_tight(traj.tokens);
        return scheme == ExtractionScheme::LastNumber ? detail::extract_last_number(rendered)
                                                      : detail::extract_boxed(rendered);
    }
    switch (scheme) {
        case ExtractionScheme::Synthetic: return detail::extract_synthetic_text(traj.text);
        case ExtractionScheme::LastNumber: return detail::extract_last_number(traj.text);
        case ExtractionScheme::Boxed: return detail::extract_boxed(traj.text);
    }
    return std::nullopt;
}

inline bool is_correct(const Trajectory& traj, const Question& q, ExtractionScheme scheme,
                       const Vocab& vocab = Vocab::synthetic()) {
    if (!q.reference_answer) {
        throw ValidationError("is_correct requires a reference answer (question " + q.id + ")");
    }
    auto answer = extract_answer(traj, scheme, vocab);
    if (!answer) return false;
    return normalize_answer(*answer) == normalize_answer(*q.reference_answer);
}

// ============================================================================
// JSONL corpus files
// ============================================================================

inline nlohmann::ordered_json question_to_json(const Question& q) {
    nlohmann::ordered_json j;
    j["id"] = q.id;
    j["prompt"] = q.prompt_text;
    if (q.reference_answer) j["answer"] = *q.reference_answer;
    j["meta"] = q.meta;
    return j;
}

inline Question question_from_json(const nlohmann::json& j) {
    Question q;
    q.id = j.at("id").get<std::string>();
    q.prompt_text = j.at("prompt").get<std::string>();
    if (q.prompt_text.empty()) throw DataError("question " + q.id + " has empty prompt");
    if (j.contains("answer") && !j["answer"].is_null()) {
        q.reference_answer = j["answer"].get<std::string>();
    }
    if (j.contains("meta")) {
        for (auto& [k, v] : j["meta"].items()) q.meta[k] = v.get<std::string>();
    }
    return q;
}

inline void write_questions_jsonl(std::ostream& os, std::span<const Question> questions) {
    for (const Question& q : questions) os << question_to_json(q).dump() << '\n';
}

inline void write_questions_jsonl(const std::string& path, std::span<const Question> questions) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open for writing: " + path);
    write_questions_jsonl(os, questions);
}

inline std::vector<Question> read_questions_jsonl(std::istream& is) {
    std::vector<Question> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            throw DataError("bad JSON at line " + std::to_string(lineno));
        }
        out.push_back(question_from_json(j));
    }
    std::unordered_set<std::string> seen;
    for (const Question& q : out) {
        if (!seen.insert(q.id).second) throw DataError("duplicate question id: " + q.id);
    }
    return out;
}

inline std::vector<Question> read_questions_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open: " + path);
    return read_questions_jsonl(is);
}

inline nlohmann::ordered_json trajectory_to_json(const Trajectory& t) {
    nlohmann::ordered_json j;
    j["question_id"] = t.question_id;
    if (t.token_based) j["tokens"] = t.tokens;
    j["text"] = t.text;
    j["token_count"] = t.token_count;
    if (t.extracted_answer) j["answer"] = *t.extracted_answer;
    if (t.correct) j["correct"] = *t.correct;
    j["temperature"] = t.sampling_temperature;
    return j;
}

inline Trajectory trajectory_from_json(const nlohmann::json& j) {
    Trajectory t;
    t.question_id = j.at("question_id").get<std::string>();
    if (j.contains("tokens")) {
        t.tokens = j["tokens"].get<std::vector<TokenId>>();
        t.token_based = true;
    }
    t.text = j.value("text", std::string());
    t.token_count = j.at("token_count").get<std::int64_t>();
    if (j.contains("answer")) t.extracted_answer = j["answer"].get<std::string>();
    if (j.contains("correct")) t.correct = j["correct"].get<bool>();
    t.sampling_temperature = j.value("temperature", 0.0);
    return t;
}

inline void write_trajectories_jsonl(const std::string& path, std::span<const Trajectory> trajs) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open for writing: " + path);
    for (const Trajectory& t : trajs) os << trajectory_to_json(t).dump() << '\n';
}

inline std::vector<Trajectory> read_trajectories_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open: " + path);
    std::vector<Trajectory> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        out.push_back(trajectory_from_json(nlohmann::json::parse(line)));
    }
    return out;
}

}  // namespace upft
