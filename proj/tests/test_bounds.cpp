#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "upft/bounds.hpp"
#include "upft/toy_model.hpp"

using namespace upft;
using Catch::Matchers::WithinAbs;

namespace {

// Forces the next-token distribution after `history` to be uniform over
// `allowed`. Logit -1000 underflows to an exact zero probability, so the
// masses here are exact binary fractions.
void force_next(ToyModel& m, std::vector<TokenId> history, std::vector<TokenId> allowed) {
    const std::size_t row = detail::context_row(m, history);
    for (int j = 0; j < m.vocab_size; ++j) {
        m.logits[row * static_cast<std::size_t>(m.vocab_size) + static_cast<std::size_t>(j)] = -1000.0;
    }
    for (TokenId t : allowed) {
        m.logits[row * static_cast<std::size_t>(m.vocab_size) + static_cast<std::size_t>(t)] = 0.0;
    }
}

// Mini alphabet "A0E1": ids A=0, '0'=1, E=2, '1'=3.
constexpr TokenId kA = 0, k0 = 1, kE = 2, k1 = 3;

// Emits "A 0 E" with probability one.
ToyModel always_a0e() {
    ToyModel m = make_uniform_model(4, 2, kE, "A0E1");
    force_next(m, {}, {kA});
    force_next(m, {kA}, {k0});
    force_next(m, {kA, k0}, {kE});
    return m;
}

// Two traces: "A 0 E" (correct for y=0) and "0 E", each probability 1/2.
ToyModel two_branch_half() {
    ToyModel m = make_uniform_model(4, 2, kE, "A0E1");
    force_next(m, {}, {kA, k0});
    force_next(m, {kA}, {k0});
    force_next(m, {kA, k0}, {kE});
    force_next(m, {k0}, {kE});
    return m;
}

AnswerModel mini_answer(std::string y, AnswerLikelihood mode = AnswerLikelihood::Indicator) {
    AnswerModel am;
    am.target = std::move(y);
    am.vocab = Vocab::mini(4);
    am.mode = mode;
    return am;
}

}  // namespace

TEST_CASE("deterministic model enumerates to a single unit-mass trace", "[bounds]") {
    ToyModel m = always_a0e();
    Enumeration en = enumerate_traces(m, {}, 5);
    REQUIRE(en.traces.size() == 1);
    REQUIRE(en.traces[0].tokens == std::vector<TokenId>{kA, k0, kE});
    REQUIRE(en.traces[0].log_prob == 0.0);
    REQUIRE(en.total_mass == 1.0);
    REQUIRE(en.uncovered_mass == 0.0);
}

TEST_CASE("uniform V=2 no end marker: 4 traces of mass 1/4", "[bounds]") {
    ToyModel m = make_uniform_model(2, 1);
    Enumeration en = enumerate_traces(m, {}, 2);
    REQUIRE(en.traces.size() == 4);
    for (const auto& tr : en.traces) {
        REQUIRE(tr.tokens.size() == 2);
        REQUIRE_THAT(std::exp(tr.log_prob), WithinAbs(0.25, 1e-15));
    }
    REQUIRE_THAT(en.total_mass, WithinAbs(1.0, 1e-12));
}

TEST_CASE("geometric end-marker mass: p(E)=1/2 per step, max_len=3 covers 7/8", "[bounds]") {
    // hand value: 1/2 + 1/4 + 1/8 = 0.875, uncovered 0.125
    ToyModel m = make_uniform_model(2, 1, 0);  // tokens {E, x}, uniform
    Enumeration en = enumerate_traces(m, {}, 3);
    std::size_t terminated = 0;
    for (const auto& tr : en.traces) terminated += tr.terminated;
    REQUIRE(terminated == 3);
    REQUIRE(en.traces.size() == 4);  // plus the one length-capped path "x x x"
    REQUIRE_THAT(en.total_mass, WithinAbs(0.875, 1e-12));
    REQUIRE_THAT(en.uncovered_mass, WithinAbs(0.125, 1e-12));
    REQUIRE_THAT(en.all_mass(), WithinAbs(1.0, 1e-12));
}

TEST_CASE("enumeration budget guard", "[bounds]") {
    ToyModel m = make_uniform_model(4, 1);
    REQUIRE_THROWS_AS(enumerate_traces(m, {}, 10, 500), ResourceError);
}

TEST_CASE("marginal: certain answer gives log 1 = 0", "[bounds]") {
    ToyModel m = always_a0e();
    MarginalResult r = marginal_answer_log_prob(m, {}, mini_answer("0"), 5);
    REQUIRE(r.log_prob == 0.0);
    REQUIRE(r.clamp_events == 0);
}

TEST_CASE("marginal: exact quarter-probability answer", "[bounds]") {
    // first token uniform {A, 0}; from A, answer digit uniform {0, 1}:
    // p("A 0 E") = 1/4 exactly
    ToyModel m = make_uniform_model(4, 2, kE, "A0E1");
    force_next(m, {}, {kA, k0});
    force_next(m, {kA}, {k0, k1});
    force_next(m, {kA, k0}, {kE});
    force_next(m, {kA, k1}, {kE});
    force_next(m, {k0}, {kE});
    MarginalResult r = marginal_answer_log_prob(m, {}, mini_answer("0"), 5);
    REQUIRE_THAT(r.log_prob, WithinAbs(std::log(0.25), 1e-12));
}

TEST_CASE("marginal: unreachable answer clamps", "[bounds]") {
    ToyModel m = always_a0e();
    MarginalResult r = marginal_answer_log_prob(m, {}, mini_answer("1"), 5);
    REQUIRE(r.log_prob == kLogClampFloor);
    REQUIRE(r.clamp_events == 1);
}

TEST_CASE("jensen equals marginal for a point mass", "[bounds]") {
    ToyModel m = always_a0e();
    Enumeration en = enumerate_traces(m, {}, 5);
    AnswerModel am = mini_answer("0");
    REQUIRE(jensen_lower_bound(en, am).value == marginal_answer_log_prob(en, am).log_prob);
}

TEST_CASE("hand-computed smoothed Jensen bound on the two-branch model", "[bounds]") {
    // priors (1/2, 1/2), answers (hit, miss), eps = 0.1:
    //   bound    = 0.5 ln 0.9 + 0.5 ln 0.1 = -1.20397280...
    //   marginal = ln(0.5*0.9 + 0.5*0.1)   = ln 0.5 = -0.69314718...
    ToyModel m = two_branch_half();
    Enumeration en = enumerate_traces(m, {}, 5);
    REQUIRE(en.traces.size() == 2);

    AnswerModel smoothed = mini_answer("0", AnswerLikelihood::Smoothed);
    JensenResult jb = jensen_lower_bound(en, smoothed);
    MarginalResult mg = marginal_answer_log_prob(en, smoothed);
    REQUIRE_THAT(jb.value, WithinAbs(0.5 * std::log(0.9) + 0.5 * std::log(0.1), 1e-12));
    REQUIRE_THAT(jb.value, WithinAbs(-1.2039728043259361, 1e-12));
    REQUIRE_THAT(mg.log_prob, WithinAbs(std::log(0.5), 1e-12));
    REQUIRE(jb.value <= mg.log_prob);
    REQUIRE(jb.clamp_events == 0);

    // indicator mode on the same model: the miss branch clamps
    AnswerModel indicator = mini_answer("0");
    JensenResult ji = jensen_lower_bound(en, indicator);
    REQUIRE(ji.clamp_events == 1);
    REQUIRE_THAT(ji.value, WithinAbs(0.5 * kLogClampFloor, 1e-9));
}

TEST_CASE("jensen <= marginal over random models, both modes", "[bounds]") {
    int checked = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const int v = 2 + static_cast<int>(seed % 3);
        const int k = 1 + static_cast<int>(seed % 2);
        const int max_len = 3 + static_cast<int>(seed % 3);
        ToyModel m = make_random_model(v, k, v >= 3 ? kE : -1, 1000 + seed, 2.0,
                                       std::string("A0E1").substr(0, static_cast<std::size_t>(v)));
        Enumeration en = enumerate_traces(m, {}, max_len);
        for (auto mode : {AnswerLikelihood::Indicator, AnswerLikelihood::Smoothed}) {
            AnswerModel am = mini_answer(seed % 2 ? "1" : "0", mode);
            am.vocab = Vocab::mini(v);
            JensenResult jb = jensen_lower_bound(en, am);
            MarginalResult mg = marginal_answer_log_prob(en, am);
            // with an unreachable answer both sides are -inf stand-ins;
            // the inequality is only meaningful for a finite marginal
            if (mg.clamp_events == 0) {
                REQUIRE(jb.value <= mg.log_prob + kBoundTol);
                ++checked;
            }
        }
    }
    REQUIRE(checked >= 150);
}

TEST_CASE("prefix bound collapses to jensen at t=0 and t>=max_len", "[bounds]") {
    ToyModel m = make_random_model(3, 2, kE, 404, 1.5, "A0E");
    Enumeration en = enumerate_traces(m, {}, 4);
    AnswerModel am = mini_answer("0", AnswerLikelihood::Smoothed);
    am.vocab = Vocab::mini(3);
    const double jensen = jensen_lower_bound(en, am).value;

    PrefixBoundResult t0 = prefix_lower_bound(en, am, 0);
    REQUIRE(t0.per_prefix.size() == 1);
    REQUIRE(t0.per_prefix.begin()->first.empty());
    REQUIRE_THAT(t0.value, WithinAbs(jensen, 1e-15));

    PrefixBoundResult tmax = prefix_lower_bound(en, am, 4);
    REQUIRE(tmax.per_prefix.size() == en.traces.size());
    REQUIRE_THAT(tmax.value, WithinAbs(jensen, kBoundTol));

    REQUIRE_THROWS_AS(prefix_lower_bound(en, am, -1), ValidationError);
}

TEST_CASE("prefix regrouping identity holds at every t", "[bounds]") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const int v = 2 + static_cast<int>(seed % 3);
        const int max_len = 4 + static_cast<int>(seed % 2);
        ToyModel m = make_random_model(v, 2, v >= 3 ? kE : -1, 7000 + seed, 2.5,
                                       std::string("A0E1").substr(0, static_cast<std::size_t>(v)));
        Enumeration en = enumerate_traces(m, {}, max_len);
        AnswerModel am = mini_answer("0", AnswerLikelihood::Smoothed);
        am.vocab = Vocab::mini(v);
        const double jensen = jensen_lower_bound(en, am).value;
        for (int t = 0; t <= max_len; ++t) {
            PrefixBoundResult pb = prefix_lower_bound(en, am, t);
            REQUIRE_THAT(pb.value, WithinAbs(jensen, kBoundTol));
            double prior_sum = 0.0;
            for (const auto& [prefix, term] : pb.per_prefix) {
                prior_sum += term.prior;
                REQUIRE(term.prior >= 0.0);
                REQUIRE(term.prior <= 1.0 + kBoundTol);
            }
            REQUIRE_THAT(prior_sum, WithinAbs(en.all_mass(), kBoundTol));
        }
    }
}

TEST_CASE("verify_bounds: deterministic correct model reports three zeros", "[bounds]") {
    ToyModel m = always_a0e();
    std::vector<int> grid{0, 1, 2};
    BoundReport r = verify_bounds(m, {}, mini_answer("0"), grid, 5);
    REQUIRE(r.ok());
    REQUIRE(r.log_p_y_given_x == 0.0);
    REQUIRE(r.jensen_bound == 0.0);
    for (int t : grid) REQUIRE_THAT(r.prefix_bound_by_t.at(t), WithinAbs(0.0, kBoundTol));
    REQUIRE(r.clamp_events == 0);
    REQUIRE(r.n_traces == 1);
}

TEST_CASE("verify_bounds flags clamps and keeps the report total", "[bounds]") {
    ToyModel m = two_branch_half();
    std::vector<int> grid{0, 1, 2, 3};
    BoundReport r = verify_bounds(m, {}, mini_answer("0"), grid, 5);
    REQUIRE(r.clamp_events > 0);
    REQUIRE(r.ok());  // clamped instances are excluded from the equality gate
    REQUIRE(r.jensen_bound <= r.log_p_y_given_x + kBoundTol);
}

TEST_CASE("verify_bounds suite over random models has zero violations", "[bounds]") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const int v = 2 + static_cast<int>(seed % 3);
        const int max_len = 4;
        ToyModel m = make_random_model(v, 2, v >= 3 ? kE : -1, 52000 + seed, 2.0,
                                       std::string("A0E1").substr(0, static_cast<std::size_t>(v)));
        std::vector<int> grid;
        for (int t = 0; t <= max_len; ++t) grid.push_back(t);
        AnswerModel am = mini_answer("0", AnswerLikelihood::Smoothed);
        am.vocab = Vocab::mini(v);
        BoundReport r = verify_bounds(m, {}, am, grid, max_len);
        INFO("seed " << seed);
        for (const auto& viol : r.violations) INFO(viol);
        REQUIRE(r.ok());
    }
}

TEST_CASE("report JSON round-trips its invariants and catches corruption", "[bounds]") {
    ToyModel m = two_branch_half();
    std::vector<int> grid{0, 1, 2};
    AnswerModel am = mini_answer("0", AnswerLikelihood::Smoothed);
    BoundReport r = verify_bounds(m, {}, am, grid, 5);
    REQUIRE(r.ok());

    nlohmann::ordered_json j = bound_report_to_json(r, Vocab::mini(4));
    REQUIRE(validate_report_json(j).empty());

    nlohmann::json corrupt = j;
    corrupt["jensen_bound"] = corrupt["log_p_y_given_x"].get<double>() + 1.0;
    auto violations = validate_report_json(corrupt);
    REQUIRE_FALSE(violations.empty());

    nlohmann::json skewed = j;
    skewed["prefix_bound_by_t"]["1"] = skewed["prefix_bound_by_t"]["1"].get<double>() - 0.5;
    REQUIRE_FALSE(validate_report_json(skewed).empty());
}
