#pragma once

/**
 * Prefix self-consistency analyses: trie-based coverage statistics over
 * sampled trajectory sets (how many trajectories share each length-t
 * prefix) and rollout success-rate curves from positions along a correct
 * and an incorrect trajectory, with an exact enumeration oracle on the toy
 * model.
 *
 * Granularity: toy trajectories are analyzed at token level; text
 * trajectories from remote samplers at whitespace-word level. Trajectories
 * shorter than t stand as their own terminal prefix so N stays constant
 * across the curve.
 */

#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "upft/bounds.hpp"
#include "upft/corpus.hpp"
#include "upft/errors.hpp"
#include "upft/sampler.hpp"
#include "upft/toy_model.hpp"
#include "upft/vocab.hpp"

namespace upft {

// ============================================================================
// Prefix trie
// ============================================================================

class PrefixTrie {
public:
    struct Node {
        std::int64_t count = 0;     // trajectories passing through
        std::int64_t terminal = 0;  // trajectories ending exactly here
        std::map<std::uint32_t, std::unique_ptr<Node>> children;
    };

    Node& root() { return root_; }
    const Node& root() const { return root_; }
    std::int64_t size() const { return root_.count; }

    void insert(std::span<const std::uint32_t> keys) {
        Node* node = &root_;
        node->count += 1;
        for (std::uint32_t key : keys) {
            auto& child = node->children[key];
            if (!child) child = std::make_unique<Node>();
            node = child.get();
            node->count += 1;
        }
        node->terminal += 1;
    }

private:
    Node root_;
};

namespace detail {

// Trajectory -> analysis keys: token ids or interned whitespace words.
inline std::vector<std::uint32_t> trajectory_keys(const Trajectory& traj,
                                                  std::unordered_map<std::string, std::uint32_t>* interner) {
    std::vector<std::uint32_t> keys;
    if (traj.token_based) {
        keys.reserve(traj.tokens.size());
        for (TokenId t : traj.tokens) keys.push_back(static_cast<std::uint32_t>(t));
        return keys;
    }
    std::size_t i = 0;
    const std::string& text = traj.text;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j > i) {
            auto [it, fresh] = interner->try_emplace(text.substr(i, j - i),
                                                     static_cast<std::uint32_t>(interner->size()));
            keys.push_back(it->second);
        }
        i = j;
    }
    return keys;
}

}  // namespace detail

// All trajectories must answer the same question; duplicates raise counts.
inline PrefixTrie build_trie(std::span<const Trajectory> trajs) {
    if (trajs.empty()) throw ValidationError("build_trie needs at least one trajectory");
    for (const Trajectory& t : trajs) {
        if (t.question_id != trajs.front().question_id) {
            throw ValidationError("build_trie: mixed question ids ('" + trajs.front().question_id +
                                  "' vs '" + t.question_id + "')");
        }
    }
    PrefixTrie trie;
    std::unordered_map<std::string, std::uint32_t> interner;
    for (const Trajectory& t : trajs) {
        trie.insert(detail::trajectory_keys(t, &interner));
    }
    return trie;
}

// ============================================================================
// Coverage curve
// ============================================================================

struct CoverageStat {
    int t = 0;
    std::int64_t n_distinct_prefixes = 0;
    double avg_traj_per_prefix = 0.0;
};

// Distinct length-t prefixes (trajectories shorter than t contribute their
// full sequence) and the average trajectory count per prefix, N / distinct.
inline std::vector<CoverageStat> coverage_curve(const PrefixTrie& trie, std::span<const int> t_grid) {
    // per-depth tallies in one walk
    std::vector<std::int64_t> nodes_at_depth{1};  // root = the empty prefix
    std::vector<std::int64_t> terminals_at_depth;

    auto walk = [&](auto&& self, const PrefixTrie::Node& node, std::size_t depth) -> void {
        if (terminals_at_depth.size() <= depth) terminals_at_depth.resize(depth + 1, 0);
        terminals_at_depth[depth] += node.terminal > 0 ? 1 : 0;
        for (const auto& [key, child] : node.children) {
            if (nodes_at_depth.size() <= depth + 1) nodes_at_depth.resize(depth + 2, 0);
            nodes_at_depth[depth + 1] += 1;
            self(self, *child, depth + 1);
        }
    };
    walk(walk, trie.root(), 0);

    const double n = static_cast<double>(trie.size());
    std::vector<CoverageStat> out;
    out.reserve(t_grid.size());
    for (int t : t_grid) {
        if (t < 0) throw ValidationError("coverage t must be >= 0");
        std::int64_t distinct = static_cast<std::size_t>(t) < nodes_at_depth.size()
                                    ? nodes_at_depth[static_cast<std::size_t>(t)]
                                    : 0;
        // short trajectories: terminal nodes strictly above depth t
        for (std::size_t d = 0; d < std::min<std::size_t>(static_cast<std::size_t>(t),
                                                          terminals_at_depth.size());
             ++d) {
            distinct += terminals_at_depth[d];
        }
        out.push_back({t, distinct, distinct > 0 ? n / static_cast<double>(distinct) : 0.0});
    }
    return out;
}

// ============================================================================
// Rollout success
// ============================================================================

struct RolloutStats {
    int t = 0;
    int n_rollouts = 0;
    double success_rate_correct = 0.0;
    double stderr_correct = 0.0;
    double success_rate_incorrect = 0.0;
    double stderr_incorrect = 0.0;
};

struct RolloutCell {
    int t = 0;
    int n = 0;
    double rate = 0.0;
    double stderr_ = 0.0;
};

namespace detail {

inline std::string prefix_text_of(const Trajectory& traj, int t, const Vocab& vocab) {
    if (traj.token_based) {
        const std::size_t cut = std::min<std::size_t>(static_cast<std::size_t>(t), traj.tokens.size());
        return vocab.render(std::span<const TokenId>(traj.tokens.data(), cut));
    }
    // first t whitespace words
    std::string out;
    int words = 0;
    std::size_t i = 0;
    const std::string& text = traj.text;
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

}  // namespace detail

// Completes the first t tokens of traj n_rollouts times and reports the
// fraction judged correct. The judged sequence is prefix + completion.
inline RolloutCell rollout_success(Sampler& sampler, const Question& q, const Trajectory& traj,
                                   int t, int n_rollouts, double temperature, std::uint64_t seed,
                                   ExtractionScheme scheme, const Vocab& vocab = Vocab::synthetic(),
                                   std::optional<int> max_completion_tokens = std::nullopt) {
    if (t < 0) throw ValidationError("rollout t must be >= 0");
    const std::int64_t len = traj.token_based
                                 ? static_cast<std::int64_t>(traj.tokens.size())
                                 : whitespace_token_count(traj.text);
    if (t > len) throw ValidationError("rollout t exceeds trajectory length");
    if (!q.reference_answer) throw ValidationError("rollout needs a reference answer");
    if (n_rollouts < 1) throw ValidationError("n_rollouts must be >= 1");

    const std::string prefix_text = detail::prefix_text_of(traj, t, vocab);
    SampleRequest req;
    req.prompt = prefix_text.empty() ? q.prompt_text : q.prompt_text + " " + prefix_text;
    req.n = n_rollouts;
    req.seed = seed;
    req.temperature = temperature;
    req.max_tokens = max_completion_tokens;

    std::vector<SampleResult> completions = sampler.sample(req);
    int correct = 0;
    for (const SampleResult& c : completions) {
        Trajectory judged;
        judged.question_id = q.id;
        if (c.token_based && traj.token_based) {
            judged.token_based = true;
            judged.tokens.assign(traj.tokens.begin(),
                                 traj.tokens.begin() + std::min<std::ptrdiff_t>(
                                                           t, static_cast<std::ptrdiff_t>(traj.tokens.size())));
            judged.tokens.insert(judged.tokens.end(), c.tokens.begin(), c.tokens.end());
        } else {
            judged.text = prefix_text.empty() ? c.text : prefix_text + " " + c.text;
        }
        correct += is_correct(judged, q, scheme, vocab) ? 1 : 0;
    }
    const double rate = static_cast<double>(correct) / static_cast<double>(n_rollouts);
    return {t, n_rollouts, rate, std::sqrt(rate * (1.0 - rate) / n_rollouts)};
}

// The Fig.-2b-style curve: one correct and one incorrect trajectory probed
// over a grid of positions.
inline std::vector<RolloutStats> rollout_curve(Sampler& sampler, const Question& q,
                                               const Trajectory& correct_traj,
                                               const Trajectory& incorrect_traj,
                                               std::span<const int> t_grid, int n_rollouts,
                                               double temperature, std::uint64_t seed,
                                               ExtractionScheme scheme,
                                               const Vocab& vocab = Vocab::synthetic(),
                                               std::optional<int> max_completion_tokens = std::nullopt) {
    std::vector<RolloutStats> out;
    Rng seeds(seed);
    for (int t : t_grid) {
        RolloutStats row;
        row.t = t;
        row.n_rollouts = n_rollouts;
        RolloutCell c = rollout_success(sampler, q, correct_traj, t, n_rollouts, temperature,
                                        seeds.next_u64(), scheme, vocab, max_completion_tokens);
        RolloutCell i = rollout_success(sampler, q, incorrect_traj, t, n_rollouts, temperature,
                                        seeds.next_u64(), scheme, vocab, max_completion_tokens);
        row.success_rate_correct = c.rate;
        row.stderr_correct = c.stderr_;
        row.success_rate_incorrect = i.rate;
        row.stderr_incorrect = i.stderr_;
        out.push_back(row);
    }
    return out;
}

// Exact oracle for rollout_success on the toy model: sums p(continuation)
// over all enumerated continuations whose prefix+continuation is judged
// correct. Length-capped continuations are included, matching what
// truncated sampling produces.
inline double exact_success_prob(const ToyModel& m, const Question& q,
                                 std::span<const TokenId> prefix, int max_len,
                                 ExtractionScheme scheme, const Vocab& vocab = Vocab::synthetic(),
                                 std::uint64_t node_budget = kDefaultNodeBudget) {
    if (!q.reference_answer) throw ValidationError("exact_success_prob needs a reference answer");
    std::vector<TokenId> history = vocab.tokenize(q.prompt_text);
    history.insert(history.end(), prefix.begin(), prefix.end());

    Enumeration en = enumerate_traces(m, history, max_len, node_budget);
    double p = 0.0;
    for (const EnumeratedTrace& tr : en.traces) {
        Trajectory judged;
        judged.question_id = q.id;
        judged.token_based = true;
        judged.tokens.assign(prefix.begin(), prefix.end());
        judged.tokens.insert(judged.tokens.end(), tr.tokens.begin(), tr.tokens.end());
        if (is_correct(judged, q, scheme, vocab)) p += std::exp(tr.log_prob);
    }
    return p;
}

// ============================================================================
// CSV / JSON emission
// ============================================================================

inline void write_coverage_csv(std::ostream& os, std::span<const CoverageStat> stats) {
    os << "t,n_prefixes,avg_traj_per_prefix\n";
    for (const CoverageStat& s : stats) {
        os << s.t << ',' << s.n_distinct_prefixes << ',' << s.avg_traj_per_prefix << '\n';
    }
}

inline nlohmann::ordered_json coverage_to_json(std::span<const CoverageStat> stats) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const CoverageStat& s : stats) {
        arr.push_back({{"t", s.t},
                       {"n_prefixes", s.n_distinct_prefixes},
                       {"avg_traj_per_prefix", s.avg_traj_per_prefix}});
    }
    return arr;
}

inline void write_rollout_csv(std::ostream& os, std::span<const RolloutStats> stats) {
    os << "t,n_rollouts,rate_correct,stderr_correct,rate_incorrect,stderr_incorrect\n";
    for (const RolloutStats& s : stats) {
        os << s.t << ',' << s.n_rollouts << ',' << s.success_rate_correct << ','
           << s.stderr_correct << ',' << s.success_rate_incorrect << ',' << s.stderr_incorrect
           << '\n';
    }
}

inline nlohmann::ordered_json rollout_to_json(std::span<const RolloutStats> stats) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const RolloutStats& s : stats) {
        arr.push_back({{"t", s.t},
                       {"n_rollouts", s.n_rollouts},
                       {"rate_correct", s.success_rate_correct},
                       {"stderr_correct", s.stderr_correct},
                       {"rate_incorrect", s.success_rate_incorrect},
                       {"stderr_incorrect", s.stderr_incorrect}});
    }
    return arr;
}

}  // namespace upft
