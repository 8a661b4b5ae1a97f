#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cycgrid/world.hpp"

namespace cycgrid {

// Shared vocabulary, dense ids 0..36.
namespace tok {
constexpr int PAD = 0;
constexpr int BOS = 1;
constexpr int EOS = 2;
constexpr int SEP = 3;
constexpr int TASK_UND = 4;
constexpr int TASK_GEN = 5;
constexpr int BOX_SEP = 6;
constexpr int IMG_BASE = 7;     // IMG_0..IMG_6
constexpr int COORD_BASE = 14;  // COORD_0..COORD_16
constexpr int CLS_BASE = 31;    // CLS_1..CLS_6 (CLS_c = CLS_BASE + c - 1)
constexpr int VOCAB = 37;

inline int img(int cls) { return IMG_BASE + cls; }
inline int coord(int k) { return COORD_BASE + k; }
inline int cls(int c) { return CLS_BASE + c - 1; }
}  // namespace tok

constexpr int kContext = 320;
constexpr int kImageTokens = kGrid * kGrid;
// Decoded layouts are capped so the reward matcher (n ≤ 8) always applies.
constexpr int kMaxDecodedBoxes = 8;

const std::string& token_name(int id);
std::string vocab_tsv();
uint64_t vocab_hash();

enum class Direction { Und, Gen };
// Which output head scores a position's next-token distribution.
enum class Head { Layout, Image };

using TokenMask = std::array<bool, tok::VOCAB>;

struct TokenSeq {
    std::vector<int> ids;
    int prompt_len = 0;                 // ids[0..prompt_len) are prompt, rest are targets
    Head target_head = Head::Layout;    // head used for every target position

    int size() const { return static_cast<int>(ids.size()); }
    int num_targets() const { return size() - prompt_len; }
};

enum class DecodeMode { Strict, Lenient };

// Canonical box order used by encode_layout: (y0, x0, cls, x1, y1).
std::vector<BoxSpec> canonical_boxes(const Layout& layout);

std::vector<int> encode_layout(const Layout& layout);
Layout decode_layout(const std::vector<int>& seq, DecodeMode mode);

std::vector<int> encode_image(const GridImage& img);
GridImage decode_image(const std::vector<int>& seq);

TokenSeq build_sequence(Direction dir, const std::vector<int>& img_tokens,
                        const std::vector<int>& layout_tokens);

// Finite-state grammar for constrained decoding. One instance tracks a single
// in-progress output (a layout for Und, a 256-cell image for Gen).
class GrammarState {
public:
    static GrammarState layout_start();
    static GrammarState image_start();

    TokenMask allowed() const;
    void advance(int token);
    bool done() const { return done_; }
    Head head() const;

private:
    enum class S { Cls, X0, Y0, X1, Y1, BoxSep, ImgCell, Eos };
    S s_ = S::Cls;
    bool image_mode_ = false;
    int boxes_done_ = 0;
    int cells_done_ = 0;
    int cur_x0_ = 0, cur_y0_ = 0;
    bool done_ = false;
};

}  // namespace cycgrid
