#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <sstream>

#include "upft/consistency.hpp"

using namespace upft;
using Catch::Matchers::WithinAbs;

namespace {

constexpr TokenId kA = 0, k0 = 1, kE = 2, k1 = 3;

Trajectory token_traj(std::vector<TokenId> tokens, std::string qid = "q") {
    Trajectory t;
    t.question_id = std::move(qid);
    t.token_based = true;
    t.tokens = std::move(tokens);
    t.token_count = static_cast<std::int64_t>(t.tokens.size());
    return t;
}

Trajectory word_traj(std::string text, std::string qid = "q") {
    Trajectory t;
    t.question_id = std::move(qid);
    t.text = std::move(text);
    return t;
}

// Independent grouping oracle: bucket trajectories by their first
// min(t, len) analysis keys with a plain map.
std::int64_t oracle_distinct_prefixes(const std::vector<Trajectory>& trajs, int t) {
    std::map<std::vector<std::string>, int> groups;
    for (const Trajectory& traj : trajs) {
        std::vector<std::string> key;
        if (traj.token_based) {
            for (TokenId tok : traj.tokens) {
                if (static_cast<int>(key.size()) == t) break;
                key.push_back(std::to_string(tok));
            }
        } else {
            std::istringstream words(traj.text);
            std::string w;
            while (static_cast<int>(key.size()) < t && words >> w) key.push_back(w);
        }
        groups[key] += 1;
    }
    return static_cast<std::int64_t>(groups.size());
}

void force_next(ToyModel& m, std::vector<TokenId> history, std::vector<std::pair<TokenId, double>> dist) {
    const std::size_t row = detail::context_row(m, history);
    for (int j = 0; j < m.vocab_size; ++j) {
        m.logits[row * static_cast<std::size_t>(m.vocab_size) + static_cast<std::size_t>(j)] = -1000.0;
    }
    for (auto [t, p] : dist) {
        m.logits[row * static_cast<std::size_t>(m.vocab_size) + static_cast<std::size_t>(t)] =
            std::log(p);
    }
}

}  // namespace

TEST_CASE("identical trajectories form a single path", "[consistency]") {
    std::vector<Trajectory> trajs(5, token_traj({kA, k0, kE}));
    PrefixTrie trie = build_trie(trajs);
    REQUIRE(trie.size() == 5);
    REQUIRE(trie.root().count == 5);
    REQUIRE(trie.root().children.size() == 1);
    const auto& level1 = *trie.root().children.at(kA);
    REQUIRE(level1.count == 5);
    REQUIRE(level1.children.size() == 1);
}

TEST_CASE("divergence after a shared prefix branches the trie", "[consistency]") {
    std::vector<Trajectory> trajs{token_traj({k0, k1, k0, kA}), token_traj({k0, k1, k0, kE})};
    PrefixTrie trie = build_trie(trajs);
    const PrefixTrie::Node* node = &trie.root();
    for (TokenId t : {k0, k1, k0}) {
        REQUIRE(node->children.size() == 1);
        node = node->children.at(static_cast<std::uint32_t>(t)).get();
        REQUIRE(node->count == 2);
    }
    REQUIRE(node->children.size() == 2);
}

TEST_CASE("mixed question ids are rejected", "[consistency]") {
    std::vector<Trajectory> trajs{token_traj({k0}, "a"), token_traj({k1}, "b")};
    REQUIRE_THROWS_AS(build_trie(trajs), ValidationError);
}

TEST_CASE("node counts at each depth account for every trajectory", "[consistency]") {
    Rng rng(321);
    std::vector<Trajectory> trajs;
    for (int i = 0; i < 200; ++i) {
        std::vector<TokenId> tokens;
        const int len = 3 + static_cast<int>(rng.next_below(5));
        for (int j = 0; j < len; ++j) tokens.push_back(static_cast<TokenId>(rng.next_below(3)));
        trajs.push_back(token_traj(std::move(tokens)));
    }
    PrefixTrie trie = build_trie(trajs);

    // sum of counts at depth d plus terminals above = N, for every d
    for (int depth = 0; depth <= 8; ++depth) {
        std::int64_t passing = 0, ended_above = 0;
        auto walk = [&](auto&& self, const PrefixTrie::Node& node, int d) -> void {
            if (d == depth) {
                passing += node.count;
                return;
            }
            ended_above += node.terminal;
            for (const auto& [key, child] : node.children) self(self, *child, d + 1);
        };
        walk(walk, trie.root(), 0);
        REQUIRE(passing + ended_above == 200);
    }
}

TEST_CASE("coverage at t=0 is one prefix covering everything", "[consistency]") {
    std::vector<Trajectory> trajs(7, token_traj({k0, k1}));
    std::vector<int> grid{0};
    auto stats = coverage_curve(build_trie(trajs), grid);
    REQUIRE(stats[0].n_distinct_prefixes == 1);
    REQUIRE_THAT(stats[0].avg_traj_per_prefix, WithinAbs(7.0, 1e-12));
}

TEST_CASE("pairwise-distinct trajectories average 1.0 at full depth", "[consistency]") {
    std::vector<Trajectory> trajs;
    for (TokenId a = 0; a < 4; ++a) {
        for (TokenId b = 0; b < 4; ++b) trajs.push_back(token_traj({a, b}));
    }
    std::vector<int> grid{2, 3};
    auto stats = coverage_curve(build_trie(trajs), grid);
    REQUIRE(stats[0].n_distinct_prefixes == 16);
    REQUIRE_THAT(stats[0].avg_traj_per_prefix, WithinAbs(1.0, 1e-12));
    REQUIRE_THAT(stats[1].avg_traj_per_prefix, WithinAbs(1.0, 1e-12));
}

TEST_CASE("coverage equals the grouping oracle on 1000 random trajectories", "[consistency]") {
    Rng rng(777);
    std::vector<Trajectory> trajs;
    for (int i = 0; i < 1000; ++i) {
        std::vector<TokenId> tokens;
        const int len = 1 + static_cast<int>(rng.next_below(10));
        for (int j = 0; j < len; ++j) tokens.push_back(static_cast<TokenId>(rng.next_below(4)));
        trajs.push_back(token_traj(std::move(tokens)));
    }
    PrefixTrie trie = build_trie(trajs);
    std::vector<int> grid;
    for (int t = 0; t <= 12; ++t) grid.push_back(t);
    auto stats = coverage_curve(trie, grid);

    double prev_avg = 1e18;
    std::int64_t prev_distinct = 0;
    for (const CoverageStat& s : stats) {
        const std::int64_t want = oracle_distinct_prefixes(trajs, s.t);
        REQUIRE(s.n_distinct_prefixes == want);
        REQUIRE(s.avg_traj_per_prefix == 1000.0 / static_cast<double>(want));
        // partition refinement: averages never rise, distinct never falls
        REQUIRE(s.avg_traj_per_prefix <= prev_avg + 1e-12);
        REQUIRE(s.n_distinct_prefixes >= prev_distinct);
        prev_avg = s.avg_traj_per_prefix;
        prev_distinct = s.n_distinct_prefixes;
    }
}

TEST_CASE("word-level coverage for text trajectories", "[consistency]") {
    std::vector<Trajectory> trajs{
        word_traj("To determine the probability we count"),
        word_traj("To determine the probability we enumerate"),
        word_traj("To determine a ratio"),
        word_traj("Another opening entirely"),
    };
    std::vector<int> grid{0, 1, 2, 3, 4, 5, 6, 7};
    auto stats = coverage_curve(build_trie(trajs), grid);
    for (const CoverageStat& s : stats) {
        REQUIRE(s.n_distinct_prefixes == oracle_distinct_prefixes(trajs, s.t));
    }
    REQUIRE(stats[1].n_distinct_prefixes == 2);  // "To", "Another"
    REQUIRE(stats[4].n_distinct_prefixes == 3);
}

TEST_CASE("exact_success_prob: forced correct ending gives 1.0", "[consistency]") {
    // after the prefix "A 0" the model always emits E
    ToyModel m = make_uniform_model(4, 2, kE, "A0E1");
    force_next(m, {k1, kA, k0}, {{kE, 1.0}});
    Question q;
    q.id = "q";
    q.prompt_text = "1";  // tokenizes to {k1} in the mini alphabet
    q.reference_answer = "0";

    std::vector<TokenId> prefix{kA, k0};
    const double p = exact_success_prob(m, q, prefix, 3, ExtractionScheme::Synthetic, Vocab::mini(4));
    REQUIRE_THAT(p, WithinAbs(1.0, 1e-12));
}

TEST_CASE("exact_success_prob: 0.7/0.3 branch", "[consistency]") {
    ToyModel m = make_uniform_model(4, 2, kE, "A0E1");
    force_next(m, {k1, kA}, {{k0, 0.7}, {k1, 0.3}});
    force_next(m, {kA, k0}, {{kE, 1.0}});
    force_next(m, {kA, k1}, {{kE, 1.0}});
    Question q;
    q.id = "q";
    q.prompt_text = "1";
    q.reference_answer = "0";

    std::vector<TokenId> prefix{kA};
    const double p = exact_success_prob(m, q, prefix, 3, ExtractionScheme::Synthetic, Vocab::mini(4));
    REQUIRE_THAT(p, WithinAbs(0.7, 1e-9));
}

TEST_CASE("empty prefix equals the exponentiated indicator marginal", "[consistency]") {
    ToyModel m = make_random_model(3, 2, kE, 4321, 1.5, "A0E");
    Question q;
    q.id = "q";
    q.prompt_text = "0";
    q.reference_answer = "0";

    const double p = exact_success_prob(m, q, {}, 4, ExtractionScheme::Synthetic, Vocab::mini(3));
    AnswerModel am;
    am.target = "0";
    am.vocab = Vocab::mini(3);
    auto prompt = Vocab::mini(3).tokenize(q.prompt_text);
    MarginalResult mg = marginal_answer_log_prob(m, prompt, am, 4);
    REQUIRE_THAT(p, WithinAbs(std::exp(mg.log_prob), 1e-12));
}

TEST_CASE("rollout_success matches the exact oracle within 3 sigma", "[consistency]") {
    // deterministic given the fixed seeds; sigma uses the exact p
    ToyModel m = make_random_model(4, 2, kE, 9090, 1.2, "A0E1");
    Question q;
    q.id = "q";
    q.prompt_text = "1";
    q.reference_answer = "0";

    SamplerSpec spec;
    spec.backend = SamplerBackend::Toy;
    spec.temperature = 1.0;
    spec.max_tokens = 4;
    ToySampler sampler(spec, std::make_shared<const ToyModel>(m), Vocab::mini(4));

    int within = 0, cells = 0;
    for (std::uint64_t cell_seed = 0; cell_seed < 40; ++cell_seed) {
        Trajectory source = upft::sample(m, Vocab::mini(4).tokenize(q.prompt_text), 1.0, 4,
                                         10'000 + cell_seed);
        source.question_id = q.id;
        const int t = static_cast<int>(cell_seed % (source.tokens.size() + 1));
        std::span<const TokenId> prefix(source.tokens.data(), static_cast<std::size_t>(t));
        const double exact =
            exact_success_prob(m, q, prefix, 4, ExtractionScheme::Synthetic, Vocab::mini(4));

        const int n = 400;
        RolloutCell cell = rollout_success(sampler, q, source, t, n, 1.0, 777 + cell_seed,
                                           ExtractionScheme::Synthetic, Vocab::mini(4), 4);
        const double sigma = std::sqrt(exact * (1.0 - exact) / n);
        if (std::abs(cell.rate - exact) <= 3.0 * sigma + 1e-12) ++within;
        ++cells;
    }
    REQUIRE(cells == 40);
    REQUIRE(within >= 39);
}

TEST_CASE("rollout input validation", "[consistency]") {
    ToyModel m = make_uniform_model(4, 2, kE, "A0E1");
    SamplerSpec spec;
    ToySampler sampler(spec, std::make_shared<const ToyModel>(m), Vocab::mini(4));
    Question q;
    q.id = "q";
    q.prompt_text = "1";
    q.reference_answer = "0";
    Trajectory source = token_traj({kA, k0}, "q");

    REQUIRE_THROWS_AS(rollout_success(sampler, q, source, 5, 8, 0.6, 1,
                                      ExtractionScheme::Synthetic, Vocab::mini(4)),
                      ValidationError);
    Question no_ref = q;
    no_ref.reference_answer.reset();
    REQUIRE_THROWS_AS(rollout_success(sampler, no_ref, source, 1, 8, 0.6, 1,
                                      ExtractionScheme::Synthetic, Vocab::mini(4)),
                      ValidationError);
}

TEST_CASE("rollout curve emits CSV and JSON", "[consistency]") {
    ToyModel m = make_random_model(4, 2, kE, 1111, 1.0, "A0E1");
    SamplerSpec spec;
    spec.max_tokens = 4;
    ToySampler sampler(spec, std::make_shared<const ToyModel>(m), Vocab::mini(4));
    Question q;
    q.id = "q";
    q.prompt_text = "1";
    q.reference_answer = "0";

    Trajectory good = token_traj({kA, k0, kE}, "q");
    Trajectory bad = token_traj({kA, k1, kE}, "q");
    std::vector<int> grid{0, 1, 2};
    auto curve = rollout_curve(sampler, q, good, bad, grid, 16, 0.6, 5, ExtractionScheme::Synthetic,
                               Vocab::mini(4), 4);
    REQUIRE(curve.size() == 3);
    for (const RolloutStats& s : curve) {
        REQUIRE(s.success_rate_correct >= 0.0);
        REQUIRE(s.success_rate_correct <= 1.0);
        REQUIRE(s.success_rate_incorrect >= 0.0);
        REQUIRE(s.success_rate_incorrect <= 1.0);
    }
    std::ostringstream csv;
    write_rollout_csv(csv, curve);
    REQUIRE(csv.str().find("t,n_rollouts,rate_correct") == 0);
    REQUIRE(rollout_to_json(curve).size() == 3);

    std::ostringstream cov_csv;
    std::vector<Trajectory> trajs{good, bad};
    auto cov = coverage_curve(build_trie(trajs), grid);
    write_coverage_csv(cov_csv, cov);
    REQUIRE(cov_csv.str().find("t,n_prefixes,avg_traj_per_prefix") == 0);
    REQUIRE(coverage_to_json(cov).size() == 3);
}
