#pragma once

/**
 * Exact verification of the Bayesian bound chain on enumerable toy models:
 *
 *   log p(y|x) = log sum_r p(r|x) p(y|r,x)                (marginal)
 *             >= sum_r p(r|x) log p(y|r,x)                (Jensen bound)
 *              = sum_{r<t} p(r<t|x) L(r<t,x)              (prefix form, any t)
 *
 * where L(r<t,x) = sum_{r>=t} p(r>=t|r<t,x) log p(y|r,x) is the expected
 * log answer likelihood over continuations of the prefix. The prefix form
 * is an exact regrouping of the Jensen sum, so its value is t-invariant
 * under exact expectations; any apparent coverage/accuracy trade-off across
 * t comes from finite sampling, not from the bound itself. verify_bounds
 * checks both facts numerically.
 *
 * p(y|r,x) is not defined operationally by the underlying theory; two
 * realizations are provided and flagged in reports: the rejection-filter
 * indicator (answer match = 1, else 0, log 0 clamped and counted) and a
 * smoothed mode (1-eps / eps) that keeps every log finite.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "upft/corpus.hpp"
#include "upft/errors.hpp"
#include "upft/toy_model.hpp"
#include "upft/vocab.hpp"

namespace upft {

inline constexpr double kBoundTol = 1e-9;
inline constexpr double kLogClampFloor = -690.77552789821368;  // log(1e-300)
inline constexpr std::uint64_t kDefaultNodeBudget = 10'000'000;

// ============================================================================
// Trace enumeration
// ============================================================================

struct EnumeratedTrace {
    std::vector<TokenId> tokens;
    double log_prob;
    bool terminated;  // ended with the end marker (always true without one)
};

struct Enumeration {
    std::vector<EnumeratedTrace> traces;
    double total_mass = 0.0;      // probability of the terminated traces
    double uncovered_mass = 0.0;  // paths that hit max_len without the end marker
    std::uint64_t nodes = 0;
    int max_len = 0;

    // The complete enumerated distribution. Length-capped paths are kept as
    // (flagged) traces: sampling truncates the same way, and the bound sums
    // need a full distribution for Jensen's inequality to be meaningful.
    double all_mass() const { return total_mass + uncovered_mass; }
};

// Every complete path up to max_len with exact log-probabilities, in
// lexicographic token order. With an end marker, terminated means emitting
// it and uncovered_mass collects the length-capped remainder; without one,
// every length-max_len path is terminated. Guarded by a node budget
// (default 10^7).
inline Enumeration enumerate_traces(const ToyModel& m, std::span<const TokenId> prompt,
                                    int max_len, std::uint64_t node_budget = kDefaultNodeBudget) {
    if (max_len < 1) throw ValidationError("max_len must be >= 1");
    Enumeration out;
    out.max_len = max_len;

    std::vector<TokenId> history(prompt.begin(), prompt.end());
    std::vector<TokenId> trace;
    const bool has_end = m.end_token >= 0;

    auto dfs = [&](auto&& self, double log_prob) -> void {
        const std::vector<double> lp = next_token_log_probs(m, history);
        for (TokenId t = 0; t < m.vocab_size; ++t) {
            if (++out.nodes > node_budget) {
                throw ResourceError("enumeration budget exceeded: more than " +
                                    std::to_string(node_budget) + " paths for max_len " +
                                    std::to_string(max_len));
            }
            const double child_lp = log_prob + lp[static_cast<std::size_t>(t)];
            // Branches whose mass underflows to an exact zero contribute
            // nothing to any sum; dropping them keeps one-hot models
            // genuinely deterministic.
            if (std::exp(child_lp) == 0.0) continue;
            trace.push_back(t);
            if (has_end && t == m.end_token) {
                out.traces.push_back({trace, child_lp, true});
                out.total_mass += std::exp(child_lp);
            } else if (static_cast<int>(trace.size()) == max_len) {
                if (has_end) {
                    out.traces.push_back({trace, child_lp, false});
                    out.uncovered_mass += std::exp(child_lp);
                } else {
                    out.traces.push_back({trace, child_lp, true});
                    out.total_mass += std::exp(child_lp);
                }
            } else {
                history.push_back(t);
                self(self, child_lp);
                history.pop_back();
            }
            trace.pop_back();
        }
    };
    dfs(dfs, 0.0);
    return out;
}

// ============================================================================
// Answer likelihood p(y|r,x)
// ============================================================================

enum class AnswerLikelihood { Indicator, Smoothed };

struct AnswerModel {
    std::string target;  // y
    Vocab vocab = Vocab::synthetic();
    ExtractionScheme scheme = ExtractionScheme::Synthetic;
    AnswerLikelihood mode = AnswerLikelihood::Indicator;
    double epsilon = 0.1;

    bool matches(std::span<const TokenId> trace) const {
        std::optional<std::string> answer;
        if (scheme == ExtractionScheme::Synthetic) {
            answer = extract_answer_tokens(trace, vocab);
        } else {
            Trajectory t;
            t.token_based = true;
            t.tokens.assign(trace.begin(), trace.end());
            answer = extract_answer(t, scheme, vocab);
        }
        return answer && normalize_answer(*answer) == normalize_answer(target);
    }

    double prob(std::span<const TokenId> trace) const {
        const bool hit = matches(trace);
        if (mode == AnswerLikelihood::Indicator) return hit ? 1.0 : 0.0;
        return hit ? 1.0 - epsilon : epsilon;
    }
};

namespace detail {

inline double clamped_log(double p, int* clamp_events) {
    if (p <= 0.0) {
        ++*clamp_events;
        return kLogClampFloor;
    }
    return std::log(p);
}

}  // namespace detail

// ============================================================================
// Marginal, Jensen bound, prefix bound
// ============================================================================

struct MarginalResult {
    double log_prob;
    int clamp_events;
};

inline MarginalResult marginal_answer_log_prob(const Enumeration& en, const AnswerModel& am) {
    double sum = 0.0;
    for (const EnumeratedTrace& tr : en.traces) sum += std::exp(tr.log_prob) * am.prob(tr.tokens);
    int clamps = 0;
    const double value = detail::clamped_log(sum, &clamps);
    return {value, clamps};
}

inline MarginalResult marginal_answer_log_prob(const ToyModel& m, std::span<const TokenId> prompt,
                                               const AnswerModel& am, int max_len) {
    return marginal_answer_log_prob(enumerate_traces(m, prompt, max_len), am);
}

struct JensenResult {
    double value;
    int clamp_events;
};

inline JensenResult jensen_lower_bound(const Enumeration& en, const AnswerModel& am) {
    double sum = 0.0;
    int clamps = 0;
    for (const EnumeratedTrace& tr : en.traces) {
        sum += std::exp(tr.log_prob) * detail::clamped_log(am.prob(tr.tokens), &clamps);
    }
    return {sum, clamps};
}

inline JensenResult jensen_lower_bound(const ToyModel& m, std::span<const TokenId> prompt,
                                       const AnswerModel& am, int max_len) {
    return jensen_lower_bound(enumerate_traces(m, prompt, max_len), am);
}

struct PrefixTerm {
    double prior;         // p(r<t | x), summed over member traces
    double log_accuracy;  // L(r<t, x)
    int n_traces;
};

struct PrefixBoundResult {
    double value;
    int clamp_events;
    std::map<std::vector<TokenId>, PrefixTerm> per_prefix;
};

// Groups terminated traces by their first t tokens (shorter traces stand as
// their own prefix) and evaluates sum_prefix p(r<t|x) L(r<t,x).
inline PrefixBoundResult prefix_lower_bound(const Enumeration& en, const AnswerModel& am, int t) {
    if (t < 0) throw ValidationError("prefix length t must be >= 0");
    PrefixBoundResult out{0.0, 0, {}};

    struct Group {
        double prior = 0.0;
        double weighted_log = 0.0;  // sum p(r) log p(y|r)
        int n = 0;
    };
    std::map<std::vector<TokenId>, Group> groups;
    for (const EnumeratedTrace& tr : en.traces) {
        const std::size_t cut = std::min<std::size_t>(static_cast<std::size_t>(t), tr.tokens.size());
        std::vector<TokenId> prefix(tr.tokens.begin(),
                                    tr.tokens.begin() + static_cast<std::ptrdiff_t>(cut));
        Group& g = groups[std::move(prefix)];
        const double p = std::exp(tr.log_prob);
        g.prior += p;
        g.weighted_log += p * detail::clamped_log(am.prob(tr.tokens), &out.clamp_events);
        g.n += 1;
    }
    for (auto& [prefix, g] : groups) {
        const double log_acc = g.prior > 0.0 ? g.weighted_log / g.prior : 0.0;
        out.value += g.prior * log_acc;
        out.per_prefix.emplace(prefix, PrefixTerm{g.prior, log_acc, g.n});
    }
    return out;
}

inline PrefixBoundResult prefix_lower_bound(const ToyModel& m, std::span<const TokenId> prompt,
                                            const AnswerModel& am, int t, int max_len) {
    return prefix_lower_bound(enumerate_traces(m, prompt, max_len), am, t);
}

// ============================================================================
// Assembled report
// ============================================================================

struct BoundReport {
    double log_p_y_given_x = 0.0;
    double jensen_bound = 0.0;
    std::map<int, double> prefix_bound_by_t;
    std::map<int, std::map<std::vector<TokenId>, PrefixTerm>> per_prefix_by_t;
    int max_len = 0;
    std::size_t n_traces = 0;
    std::uint64_t nodes = 0;
    double total_mass = 0.0;
    double uncovered_mass = 0.0;
    int clamp_events = 0;
    // True when the marginal itself hit the clamp floor (answer unreachable).
    // The Jensen comparison is then -inf vs -inf and is not asserted.
    bool marginal_clamped = false;
    std::string likelihood_mode;
    std::string target;
    std::vector<std::string> violations;

    bool ok() const { return violations.empty(); }
};

namespace detail {

inline std::string prefix_label(const std::vector<TokenId>& prefix, const Vocab& vocab) {
    if (prefix.empty()) return "<empty>";
    if (vocab.size() > 0) {
        bool renderable = true;
        for (TokenId t : prefix) renderable = renderable && t < vocab.size();
        if (renderable) return vocab.render_tight(prefix);
    }
    std::string out;
    for (std::size_t i = 0; i < prefix.size(); ++i) {
        if (i) out.push_back(',');
        out += std::to_string(prefix[i]);
    }
    return out;
}

}  // namespace detail

// Computes all three quantities over a grid of t values and checks the
// report invariants. Violations are collected (not thrown) so the CLI can
// render a diagnostic before exiting non-zero.
inline BoundReport verify_bounds(const ToyModel& m, std::span<const TokenId> prompt,
                                 const AnswerModel& am, std::span<const int> t_grid, int max_len,
                                 std::uint64_t node_budget = kDefaultNodeBudget) {
    const Enumeration en = enumerate_traces(m, prompt, max_len, node_budget);

    BoundReport report;
    report.max_len = max_len;
    report.n_traces = en.traces.size();
    report.nodes = en.nodes;
    report.total_mass = en.total_mass;
    report.uncovered_mass = en.uncovered_mass;
    report.likelihood_mode = am.mode == AnswerLikelihood::Indicator ? "indicator" : "smoothed";
    report.target = am.target;

    const MarginalResult marginal = marginal_answer_log_prob(en, am);
    report.log_p_y_given_x = marginal.log_prob;
    const JensenResult jensen = jensen_lower_bound(en, am);
    report.jensen_bound = jensen.value;
    report.clamp_events = marginal.clamp_events + jensen.clamp_events;
    report.marginal_clamped = marginal.clamp_events > 0;

    if (!report.marginal_clamped && jensen.value > marginal.log_prob + kBoundTol) {
        report.violations.push_back("jensen_bound " + std::to_string(jensen.value) +
                                    " exceeds log p(y|x) " + std::to_string(marginal.log_prob));
    }

    for (int t : t_grid) {
        PrefixBoundResult pb = prefix_lower_bound(en, am, t);
        report.prefix_bound_by_t[t] = pb.value;

        // Per-trace clamps are shared with the Jensen pass; only count the
        // grouping pass once via the Jensen tally.
        const bool clamp_free = jensen.clamp_events == 0;
        if (clamp_free && std::abs(pb.value - jensen.value) > kBoundTol) {
            report.violations.push_back("prefix bound at t=" + std::to_string(t) + " (" +
                                        std::to_string(pb.value) + ") != jensen bound (" +
                                        std::to_string(jensen.value) + ")");
        }
        double prior_sum = 0.0;
        for (const auto& [prefix, term] : pb.per_prefix) prior_sum += term.prior;
        if (std::abs(prior_sum - en.all_mass()) > kBoundTol) {
            report.violations.push_back("prefix priors at t=" + std::to_string(t) + " sum to " +
                                        std::to_string(prior_sum) + ", expected enumerated mass " +
                                        std::to_string(en.all_mass()));
        }
        report.per_prefix_by_t[t] = std::move(pb.per_prefix);
    }

    // Partition refinement: each (t+1)-prefix group must sit inside exactly
    // one t-prefix group, i.e. truncating its key finds a group with at
    // least as many member traces.
    for (auto it = report.per_prefix_by_t.begin(); it != report.per_prefix_by_t.end(); ++it) {
        auto next = std::next(it);
        if (next == report.per_prefix_by_t.end() || next->first != it->first + 1) continue;
        for (const auto& [prefix, term] : next->second) {
            std::vector<TokenId> parent(prefix.begin(),
                                        prefix.begin() + std::min<std::ptrdiff_t>(
                                                             static_cast<std::ptrdiff_t>(prefix.size()),
                                                             it->first));
            auto found = it->second.find(parent);
            if (found == it->second.end() || found->second.n_traces < term.n_traces) {
                report.violations.push_back(
                    "prefix partition at t=" + std::to_string(next->first) +
                    " does not refine t=" + std::to_string(it->first) + " (prefix " +
                    detail::prefix_label(prefix, am.vocab) + ")");
            }
        }
    }
    return report;
}

// ============================================================================
// Serialization and re-validation
// ============================================================================

inline nlohmann::ordered_json bound_report_to_json(const BoundReport& r,
                                                   const Vocab& vocab = Vocab::synthetic()) {
    nlohmann::ordered_json j;
    j["target"] = r.target;
    j["likelihood_mode"] = r.likelihood_mode;
    j["log_p_y_given_x"] = r.log_p_y_given_x;
    j["jensen_bound"] = r.jensen_bound;
    nlohmann::ordered_json by_t = nlohmann::ordered_json::object();
    for (const auto& [t, v] : r.prefix_bound_by_t) by_t[std::to_string(t)] = v;
    j["prefix_bound_by_t"] = std::move(by_t);
    nlohmann::ordered_json terms = nlohmann::ordered_json::array();
    for (const auto& [t, prefixes] : r.per_prefix_by_t) {
        for (const auto& [prefix, term] : prefixes) {
            terms.push_back({{"t", t},
                             {"prefix", prefix},
                             {"prefix_text", detail::prefix_label(prefix, vocab)},
                             {"prior", term.prior},
                             {"log_accuracy", term.log_accuracy},
                             {"n_traces", term.n_traces}});
        }
    }
    j["per_prefix_terms"] = std::move(terms);
    j["enumeration"] = {{"max_len", r.max_len},
                        {"n_traces", r.n_traces},
                        {"nodes", r.nodes},
                        {"total_mass", r.total_mass},
                        {"uncovered_mass", r.uncovered_mass}};
    j["clamp_events"] = r.clamp_events;
    j["marginal_clamped"] = r.marginal_clamped;
    j["violations"] = r.violations;
    return j;
}

// Re-checks the arithmetic invariants of a serialized report. Used by the
// CLI to validate stored reports (a corrupted report must fail verification).
inline std::vector<std::string> validate_report_json(const nlohmann::json& j) {
    std::vector<std::string> violations;
    const double marginal = j.at("log_p_y_given_x").get<double>();
    const double jensen = j.at("jensen_bound").get<double>();
    const int clamps = j.value("clamp_events", 0);
    if (!j.value("marginal_clamped", false) && jensen > marginal + kBoundTol) {
        violations.push_back("jensen_bound exceeds log_p_y_given_x");
    }
    for (const auto& [t, v] : j.at("prefix_bound_by_t").items()) {
        if (clamps == 0 && std::abs(v.get<double>() - jensen) > kBoundTol) {
            violations.push_back("prefix_bound_by_t[" + t + "] != jensen_bound");
        }
    }
    if (j.contains("per_prefix_terms") && j.contains("enumeration")) {
        const double mass = j["enumeration"].value("total_mass", 1.0) +
                            j["enumeration"].value("uncovered_mass", 0.0);
        std::map<int, double> prior_sums;
        for (const auto& term : j["per_prefix_terms"]) {
            prior_sums[term.at("t").get<int>()] += term.at("prior").get<double>();
        }
        for (const auto& [t, sum] : prior_sums) {
            if (std::abs(sum - mass) > kBoundTol) {
                violations.push_back("prefix priors at t=" + std::to_string(t) +
                                     " do not sum to the enumerated mass");
            }
        }
    }
    return violations;
}

}  // namespace upft
