#pragma once

#include <string>
#include <vector>

namespace mrlab::vocab {

// Fixed symbol table. The model's vocab size is configured independently
// (default 512); the table occupies the low token ids.
enum Token : int {
    PAD = 0,
    BOS = 1,
    EOS = 2,
    QUESTION = 3, // 'Q'
    ANSWER = 4,   // 'A', answer marker; generation starts after it
    HINT = 5,     // 'H', opens the hint slot
    SEP = 6,
    RULE = 7,
    POS = 8,
    D0 = 9, // digits 0..9 occupy 9..18
    OP_ADD = 19,
    OP_MUL = 20,
    OP_REV = 21,
    OP_SWP = 22,
    MOD = 23,
    FILLER0 = 24,  // family fillers w00..w15
    NEUTRAL0 = 40, // neutral fillers u0..u7
};

constexpr int kNumFillers = 16;
constexpr int kNumNeutral = 8;
constexpr int kSymbols = NEUTRAL0 + kNumNeutral; // 48

inline int digit(int d) { return D0 + d; }
inline bool is_digit(int tok) { return tok >= D0 && tok <= D0 + 9; }
inline int digit_value(int tok) { return tok - D0; }
inline bool is_filler(int tok) { return tok >= FILLER0 && tok < FILLER0 + kNumFillers; }
inline bool is_neutral(int tok) { return tok >= NEUTRAL0 && tok < NEUTRAL0 + kNumNeutral; }

std::string token_name(int tok);
std::string render(const std::vector<int>& toks);
std::vector<int> parse(const std::string& text);

// Prompt assembly shared by pretraining, curation, training and inference.
// Plain:      <bos> question A
// With hint:  <bos> question H hint A
std::vector<int> make_prompt(const std::vector<int>& question, const std::vector<int>& hint);

// Row span of the hint tokens inside make_prompt's output (teacher alignment
// reads the reflection-side states from exactly these rows).
struct Span {
    std::size_t start = 0;
    std::size_t len = 0;
};
Span hint_span(const std::vector<int>& question, const std::vector<int>& hint);

} // namespace mrlab::vocab
