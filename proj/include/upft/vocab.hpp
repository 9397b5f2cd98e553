#pragma once

/**
 * Character vocabulary for the synthetic arithmetic task.
 *
 * One character per token. The canonical alphabet has 16 symbols:
 * digits 0-9, the operators '+' and '-', '=', the step separator ';',
 * the answer marker 'A' and the end marker 'E'. The pad id used to
 * left-fill short contexts is vocab_size() (context-only, never emitted).
 *
 * Text round-trip: render() joins tokens with single spaces (the canonical
 * trace form, e.g. "3 + 4 = 7 ; A 7 E"); tokenize() ignores spaces, so
 * tokenize(render(ids)) == ids. '?' in question text is display-only and
 * is skipped, as is the prefix-task instruction suffix, which the toy
 * alphabet cannot express.
 */

#include <algorithm>
#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "upft/errors.hpp"

namespace upft {

using TokenId = std::int32_t;

// Instruction appended to prefix-mode prompts (see pipeline.hpp).
inline constexpr std::string_view kPrefixTaskInstruction =
    "Please provide the initial step towards resolving the question. "
    "This step may serve as a foundation but might not encompass the entire solution.";

// Drops a trailing prefix-task instruction (and the joining space) if present.
inline std::string_view strip_prefix_instruction(std::string_view text) {
    if (text.size() >= kPrefixTaskInstruction.size() &&
        text.substr(text.size() - kPrefixTaskInstruction.size()) == kPrefixTaskInstruction) {
        text.remove_suffix(kPrefixTaskInstruction.size());
        while (!text.empty() && text.back() == ' ') text.remove_suffix(1);
    }
    return text;
}

class Vocab {
public:
    Vocab() = default;

    explicit Vocab(std::string_view chars) : chars_(chars) {
        to_id_.fill(-1);
        for (std::size_t i = 0; i < chars_.size(); ++i) {
            to_id_[static_cast<unsigned char>(chars_[i])] = static_cast<TokenId>(i);
        }
    }

    // The 16-symbol arithmetic alphabet.
    static const Vocab& synthetic() {
        static const Vocab v("0123456789+-=;AE");
        return v;
    }

    // Tiny alphabets for enumerable test models: first `size` of "A0E1".
    // Every prefix contains the answer marker, so answer extraction is
    // exercised even at V=2.
    static Vocab mini(int size) {
        static constexpr std::string_view base = "A0E1";
        if (size < 1 || size > static_cast<int>(base.size())) {
            throw ValidationError("Vocab::mini size must be in [1,4], got " + std::to_string(size));
        }
        return Vocab(base.substr(0, static_cast<std::size_t>(size)));
    }

    int size() const { return static_cast<int>(chars_.size()); }
    TokenId pad_id() const { return static_cast<TokenId>(chars_.size()); }

    bool contains(char c) const { return to_id_[static_cast<unsigned char>(c)] >= 0; }

    TokenId id(char c) const {
        TokenId t = to_id_[static_cast<unsigned char>(c)];
        if (t < 0) throw DataError(std::string("character not in vocabulary: '") + c + "'");
        return t;
    }

    char ch(TokenId t) const {
        if (t < 0 || t >= size()) {
            throw ValidationError("token id out of range: " + std::to_string(t));
        }
        return chars_[static_cast<std::size_t>(t)];
    }

    // Id of the end marker 'E', or -1 when the alphabet has none.
    TokenId end_id() const {
        return contains('E') ? to_id_[static_cast<unsigned char>('E')] : -1;
    }

    // Maps text to token ids. Spaces and '?' are skipped; a trailing
    // prefix-task instruction is stripped. Unknown characters are a data
    // error naming the offender.
    std::vector<TokenId> tokenize(std::string_view text) const {
        text = strip_prefix_instruction(text);
        std::vector<TokenId> ids;
        ids.reserve(text.size());
        for (char c : text) {
            if (c == ' ' || c == '?') continue;
            TokenId t = to_id_[static_cast<unsigned char>(c)];
            if (t < 0) {
                throw DataError(std::string("character not in vocabulary: '") + c +
                                "' in \"" + std::string(text) + "\"");
            }
            ids.push_back(t);
        }
        return ids;
    }

    // Canonical single-space rendering.
    std::string render(std::span<const TokenId> ids) const {
        std::string out;
        out.reserve(ids.size() * 2);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i > 0) out.push_back(' ');
            out.push_back(ch(ids[i]));
        }
        return out;
    }

    // Compact rendering without separators (question form, e.g. "3+4-2=").
    std::string render_tight(std::span<const TokenId> ids) const {
        std::string out;
        out.reserve(ids.size());
        for (TokenId t : ids) out.push_back(ch(t));
        return out;
    }

private:
    std::string chars_;
    std::array<TokenId, 256> to_id_{};
};

}  // namespace upft
