#pragma once

/**
 * Tractable order-k tabular autoregressive model over token ids.
 *
 * p(next | context; logits) = softmax(logits[row(context)])[next], where
 * row(context) packs the last k token ids base (V+1); contexts shorter than
 * k are left-padded with the reserved pad id V (context-only, never
 * predicted). Exact log-probabilities, temperature sampling, greedy
 * decoding, analytic NLL gradients and SGD training.
 *
 * Checkpoint layout (little-endian):
 *   bytes 0..7   magic "UPFTTOY1"
 *   u32          vocab_size V
 *   u32          order k
 *   i32          end_token (-1 = none)
 *   u32          vocab_chars length, then that many bytes (may be 0)
 *   u64          logit entry count = (V+1)^k * V
 *   f64 * count  logits, row-major
 * load(save(m)) == m bit-exact.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "upft/corpus.hpp"
#include "upft/errors.hpp"
#include "upft/rng.hpp"
#include "upft/vocab.hpp"

namespace upft {

// Dense table guard: (V+1)^k * V entries must stay below this.
inline constexpr std::uint64_t kMaxLogitEntries = 40'000'000;

struct ToyModel {
    int vocab_size = 0;   // V: ids 0..V-1 are predictable tokens
    int order = 0;        // k: context length
    TokenId end_token = -1;
    std::string vocab_chars;      // optional id->char alphabet (self-describing checkpoints)
    std::vector<double> logits;   // (V+1)^k rows of V entries

    TokenId pad_id() const { return vocab_size; }

    std::uint64_t row_count() const {
        std::uint64_t rows = 1;
        for (int i = 0; i < order; ++i) rows *= static_cast<std::uint64_t>(vocab_size + 1);
        return rows;
    }

    Vocab vocab() const { return Vocab(vocab_chars); }

    bool operator==(const ToyModel& o) const = default;
};

// Zero logits: every row is the uniform distribution.
inline ToyModel make_uniform_model(int vocab_size, int order, TokenId end_token = -1,
                                   std::string vocab_chars = {}) {
    if (vocab_size < 1) throw ValidationError("vocab_size must be positive");
    if (order < 1) throw ValidationError("order must be positive");
    ToyModel m;
    m.vocab_size = vocab_size;
    m.order = order;
    m.end_token = end_token;
    m.vocab_chars = std::move(vocab_chars);
    const std::uint64_t entries = m.row_count() * static_cast<std::uint64_t>(vocab_size);
    if (entries > kMaxLogitEntries) {
        throw ResourceError("logit table too large: " + std::to_string(entries) + " entries (cap " +
                            std::to_string(kMaxLogitEntries) + "); reduce order or vocab");
    }
    m.logits.assign(entries, 0.0);
    return m;
}

// Seeded random logits in [-scale, scale].
inline ToyModel make_random_model(int vocab_size, int order, TokenId end_token, std::uint64_t seed,
                                  double scale = 2.0, std::string vocab_chars = {}) {
    ToyModel m = make_uniform_model(vocab_size, order, end_token, std::move(vocab_chars));
    Rng rng(seed);
    for (double& w : m.logits) w = (2.0 * rng.next_double() - 1.0) * scale;
    return m;
}

namespace detail {

inline std::size_t context_row(const ToyModel& m, std::span<const TokenId> history) {
    const std::uint64_t base = static_cast<std::uint64_t>(m.vocab_size) + 1;
    std::uint64_t idx = 0;
    const int k = m.order;
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(history.size());
    for (std::ptrdiff_t i = n - k; i < n; ++i) {
        TokenId t = i < 0 ? m.pad_id() : history[static_cast<std::size_t>(i)];
        if (t < 0 || t > m.vocab_size) {
            throw ValidationError("context token id out of range: " + std::to_string(t));
        }
        idx = idx * base + static_cast<std::uint64_t>(t);
    }
    return static_cast<std::size_t>(idx);
}

}  // namespace detail

// Log-probabilities for every next token given the trailing context.
inline std::vector<double> next_token_log_probs(const ToyModel& m,
                                                std::span<const TokenId> history) {
    const std::size_t row = detail::context_row(m, history);
    const int v = m.vocab_size;
    std::span<const double> w(m.logits.data() + row * static_cast<std::size_t>(v),
                              static_cast<std::size_t>(v));
    const double mx = *std::max_element(w.begin(), w.end());
    double z = 0.0;
    for (double x : w) z += std::exp(x - mx);
    const double log_z = mx + std::log(z);
    std::vector<double> out(static_cast<std::size_t>(v));
    for (int j = 0; j < v; ++j) out[static_cast<std::size_t>(j)] = w[static_cast<std::size_t>(j)] - log_z;
    return out;
}

inline double token_log_prob(const ToyModel& m, std::span<const TokenId> history, TokenId next) {
    if (next < 0 || next >= m.vocab_size) {
        throw ValidationError("next token id out of range: " + std::to_string(next));
    }
    return next_token_log_probs(m, history)[static_cast<std::size_t>(next)];
}

// Chain rule: sum of stepwise log-probs of `seq` conditioned on prompt + the
// tokens emitted so far. Empty seq gives 0.
inline double sequence_log_prob(const ToyModel& m, std::span<const TokenId> prompt,
                                std::span<const TokenId> seq) {
    std::vector<TokenId> history(prompt.begin(), prompt.end());
    history.reserve(prompt.size() + seq.size());
    double total = 0.0;
    for (TokenId t : seq) {
        total += token_log_prob(m, history, t);
        history.push_back(t);
    }
    return total;
}

namespace detail {

inline TokenId argmax_token(std::span<const double> log_probs) {
    // Ties break to the lowest id.
    TokenId best = 0;
    for (int j = 1; j < static_cast<int>(log_probs.size()); ++j) {
        if (log_probs[static_cast<std::size_t>(j)] > log_probs[static_cast<std::size_t>(best)]) {
            best = j;
        }
    }
    return best;
}

inline TokenId sample_token(const ToyModel& m, std::span<const TokenId> history,
                            double temperature, Rng& rng) {
    const std::size_t row = context_row(m, history);
    const int v = m.vocab_size;
    std::span<const double> w(m.logits.data() + row * static_cast<std::size_t>(v),
                              static_cast<std::size_t>(v));
    if (temperature == 0.0) {
        TokenId best = 0;
        for (int j = 1; j < v; ++j) {
            if (w[static_cast<std::size_t>(j)] > w[static_cast<std::size_t>(best)]) best = j;
        }
        return best;
    }
    // softmax(logits / tau), inverse-CDF draw from the raw rng stream
    std::vector<double> p(static_cast<std::size_t>(v));
    double mx = -1e300;
    for (int j = 0; j < v; ++j) mx = std::max(mx, w[static_cast<std::size_t>(j)] / temperature);
    double z = 0.0;
    for (int j = 0; j < v; ++j) {
        p[static_cast<std::size_t>(j)] = std::exp(w[static_cast<std::size_t>(j)] / temperature - mx);
        z += p[static_cast<std::size_t>(j)];
    }
    double u = rng.next_double() * z;
    double acc = 0.0;
    for (int j = 0; j < v; ++j) {
        acc += p[static_cast<std::size_t>(j)];
        if (u < acc) return j;
    }
    return v - 1;
}

}  // namespace detail

// Draws until the end marker is emitted (inclusive) or max_len tokens.
// Temperature 0 is greedy; identical seeds give identical trajectories.
inline Trajectory sample(const ToyModel& m, std::span<const TokenId> prompt, double temperature,
                         int max_len, std::uint64_t seed) {
    if (temperature < 0.0) throw ValidationError("temperature must be >= 0");
    if (max_len < 1) throw ValidationError("max_len must be >= 1");
    Rng rng(seed);
    std::vector<TokenId> history(prompt.begin(), prompt.end());
    Trajectory traj;
    traj.token_based = true;
    traj.sampling_temperature = temperature;
    for (int i = 0; i < max_len; ++i) {
        TokenId t = detail::sample_token(m, history, temperature, rng);
        traj.tokens.push_back(t);
        history.push_back(t);
        if (m.end_token >= 0 && t == m.end_token) break;
    }
    traj.token_count = static_cast<std::int64_t>(traj.tokens.size());
    return traj;
}

inline Trajectory greedy_decode(const ToyModel& m, std::span<const TokenId> prompt, int max_len) {
    return sample(m, prompt, 0.0, max_len, 0);
}

// ============================================================================
// Training
// ============================================================================

struct TrainItem {
    std::vector<TokenId> prompt;
    std::vector<TokenId> target;
    std::vector<std::uint8_t> loss_mask;  // empty = all target tokens in loss
};

enum class LrSchedule { ConstantWithWarmup };

struct TrainHyper {
    double learning_rate = 0.5;
    double warmup_ratio = 0.03;
    LrSchedule schedule = LrSchedule::ConstantWithWarmup;
    int epochs = 1;
    int batch_size = 1;
    int grad_accum_steps = 8;
    int max_length = 64;
    std::uint64_t seed = 0;

    void validate() const {
        // lr 0 is allowed: it must return the input model unchanged.
        if (learning_rate < 0.0) throw ValidationError("learning_rate must be >= 0");
        if (warmup_ratio < 0.0 || warmup_ratio > 1.0) throw ValidationError("warmup_ratio must be in [0,1]");
        if (epochs < 1) throw ValidationError("epochs must be positive");
        if (batch_size < 1) throw ValidationError("batch_size must be positive");
        if (grad_accum_steps < 1) throw ValidationError("grad_accum_steps must be positive");
        if (max_length < 1) throw ValidationError("max_length must be positive");
    }
};

namespace detail {

// Sparse gradient: touched rows only. Accumulation iterates items in order
// and applies rows in sorted order, so results are reproducible.
using SparseGrad = std::map<std::size_t, std::vector<double>>;

inline std::size_t accumulate_nll(const ToyModel& m, const TrainItem& item, double inv_n,
                                  double* loss, SparseGrad* grad) {
    std::vector<TokenId> history(item.prompt.begin(), item.prompt.end());
    history.reserve(item.prompt.size() + item.target.size());
    std::size_t counted = 0;
    for (std::size_t i = 0; i < item.target.size(); ++i) {
        const bool in_loss = item.loss_mask.empty() || item.loss_mask[i] != 0;
        const TokenId t = item.target[i];
        if (t < 0 || t >= m.vocab_size) {
            throw ValidationError("target token id out of range: " + std::to_string(t));
        }
        if (in_loss) {
            const std::size_t row = context_row(m, history);
            std::vector<double> lp = next_token_log_probs(m, history);
            *loss += -lp[static_cast<std::size_t>(t)] * inv_n;
            if (grad) {
                auto [it, fresh] = grad->try_emplace(row, static_cast<std::size_t>(m.vocab_size), 0.0);
                std::vector<double>& g = it->second;
                for (int j = 0; j < m.vocab_size; ++j) {
                    g[static_cast<std::size_t>(j)] += std::exp(lp[static_cast<std::size_t>(j)]) * inv_n;
                }
                g[static_cast<std::size_t>(t)] -= inv_n;
            }
            ++counted;
        }
        history.push_back(t);
    }
    return counted;
}

inline std::size_t count_loss_tokens(const TrainItem& item) {
    if (item.loss_mask.empty()) return item.target.size();
    std::size_t n = 0;
    for (std::uint8_t b : item.loss_mask) n += b != 0;
    return n;
}

}  // namespace detail

// Mean NLL over unmasked target tokens and its exact gradient, sparse form.
inline double nll_and_grad_sparse(const ToyModel& m, std::span<const TrainItem> batch,
                                  detail::SparseGrad* grad) {
    std::size_t n = 0;
    for (const TrainItem& item : batch) {
        if (!item.loss_mask.empty() && item.loss_mask.size() != item.target.size()) {
            throw ValidationError("loss_mask length must match target length");
        }
        n += detail::count_loss_tokens(item);
    }
    if (n == 0) throw ValidationError("batch has no unmasked target tokens");
    const double inv_n = 1.0 / static_cast<double>(n);
    double loss = 0.0;
    for (const TrainItem& item : batch) detail::accumulate_nll(m, item, inv_n, &loss, grad);
    return loss;
}

// Dense-table variant: grad has the same shape as m.logits
// (softmax-cross-entropy form).
inline std::pair<double, std::vector<double>> nll_and_grad(const ToyModel& m,
                                                           std::span<const TrainItem> batch) {
    detail::SparseGrad sparse;
    const double loss = nll_and_grad_sparse(m, batch, &sparse);
    std::vector<double> dense(m.logits.size(), 0.0);
    for (const auto& [row, g] : sparse) {
        std::copy(g.begin(), g.end(),
                  dense.begin() + static_cast<std::ptrdiff_t>(row * g.size()));
    }
    return {loss, std::move(dense)};
}

// SGD with linear warmup into a constant rate. Loss is computed on target
// tokens only; items whose target is fully cut by max_length are skipped.
// Identical seed and hyperparameters give identical final logits.
inline ToyModel train(const ToyModel& model, std::span<const TrainItem> examples,
                      const TrainHyper& hyper, std::vector<double>* step_losses = nullptr) {
    hyper.validate();
    ToyModel m = model;

    std::vector<TrainItem> items;
    items.reserve(examples.size());
    for (const TrainItem& e : examples) {
        TrainItem it = e;
        const std::size_t budget =
            it.prompt.size() >= static_cast<std::size_t>(hyper.max_length)
                ? 0
                : static_cast<std::size_t>(hyper.max_length) - it.prompt.size();
        if (it.target.size() > budget) {
            it.target.resize(budget);
            if (!it.loss_mask.empty()) it.loss_mask.resize(budget);
        }
        if (detail::count_loss_tokens(it) > 0) items.push_back(std::move(it));
    }
    if (items.empty()) throw ValidationError("no trainable examples (all empty after truncation)");

    const std::size_t micro_per_epoch =
        (items.size() + static_cast<std::size_t>(hyper.batch_size) - 1) /
        static_cast<std::size_t>(hyper.batch_size);
    const std::size_t steps_per_epoch =
        (micro_per_epoch + static_cast<std::size_t>(hyper.grad_accum_steps) - 1) /
        static_cast<std::size_t>(hyper.grad_accum_steps);
    const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(hyper.epochs);
    const std::size_t warmup_steps =
        static_cast<std::size_t>(hyper.warmup_ratio * static_cast<double>(total_steps));

    Rng rng(hyper.seed);
    std::vector<std::size_t> perm(items.size());
    std::iota(perm.begin(), perm.end(), 0);

    std::size_t opt_step = 0;
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(perm));
        std::size_t next = 0;
        while (next < perm.size()) {
            // one optimizer step: up to grad_accum_steps micro-batches
            detail::SparseGrad grad;
            double loss_sum = 0.0;
            int micros = 0;
            for (int a = 0; a < hyper.grad_accum_steps && next < perm.size(); ++a) {
                std::vector<TrainItem> micro;
                for (int b = 0; b < hyper.batch_size && next < perm.size(); ++b) {
                    micro.push_back(items[perm[next++]]);
                }
                loss_sum += nll_and_grad_sparse(m, micro, &grad);
                ++micros;
            }
            const double lr_factor =
                opt_step < warmup_steps
                    ? static_cast<double>(opt_step + 1) / static_cast<double>(warmup_steps)
                    : 1.0;
            const double scale = hyper.learning_rate * lr_factor / static_cast<double>(micros);
            for (const auto& [row, g] : grad) {
                double* w = m.logits.data() + row * static_cast<std::size_t>(m.vocab_size);
                for (int j = 0; j < m.vocab_size; ++j) {
                    w[j] -= scale * g[static_cast<std::size_t>(j)];
                }
            }
            if (step_losses) step_losses->push_back(loss_sum / static_cast<double>(micros));
            ++opt_step;
        }
    }
    return m;
}

// Tokenizes (prompt, target) string pairs, naming the offending record on
// vocabulary misses.
inline TrainItem tokenize_train_item(const Vocab& vocab, const std::string& record_name,
                                     std::string_view prompt, std::string_view target) {
    try {
        TrainItem item;
        item.prompt = vocab.tokenize(prompt);
        item.target = vocab.tokenize(target);
        return item;
    } catch (const DataError& e) {
        throw DataError("example " + record_name + ": " + e.what());
    }
}

// ============================================================================
// Checkpoints
// ============================================================================

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'U', 'P', 'F', 'T', 'T', 'O', 'Y', '1'};

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError("truncated checkpoint");
    return v;
}

}  // namespace detail

inline void save_model(const ToyModel& m, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path);
    os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.vocab_size));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.order));
    detail::write_pod<std::int32_t>(os, m.end_token);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.vocab_chars.size()));
    os.write(m.vocab_chars.data(), static_cast<std::streamsize>(m.vocab_chars.size()));
    detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(m.logits.size()));
    os.write(reinterpret_cast<const char*>(m.logits.data()),
             static_cast<std::streamsize>(m.logits.size() * sizeof(double)));
    if (!os) throw DataError("failed writing checkpoint: " + path);
}

inline ToyModel load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0) {
        throw DataError("not a toy model checkpoint: " + path);
    }
    ToyModel m;
    m.vocab_size = static_cast<int>(detail::read_pod<std::uint32_t>(is));
    m.order = static_cast<int>(detail::read_pod<std::uint32_t>(is));
    m.end_token = detail::read_pod<std::int32_t>(is);
    const auto vlen = detail::read_pod<std::uint32_t>(is);
    m.vocab_chars.resize(vlen);
    is.read(m.vocab_chars.data(), vlen);
    const auto entries = detail::read_pod<std::uint64_t>(is);
    const std::uint64_t expected =
        [&] {
            std::uint64_t rows = 1;
            for (int i = 0; i < m.order; ++i) rows *= static_cast<std::uint64_t>(m.vocab_size + 1);
            return rows * static_cast<std::uint64_t>(m.vocab_size);
        }();
    if (entries != expected) throw DataError("checkpoint entry count mismatch: " + path);
    m.logits.resize(entries);
    is.read(reinterpret_cast<char*>(m.logits.data()),
            static_cast<std::streamsize>(entries * sizeof(double)));
    if (!is) throw DataError("truncated checkpoint: " + path);
    return m;
}

}  // namespace upft
