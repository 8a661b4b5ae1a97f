#include "cycgrid/tokenizer.hpp"

#include <algorithm>
#include <stdexcept>

namespace cycgrid {

namespace {

std::vector<std::string> make_names() {
    std::vector<std::string> n(tok::VOCAB);
    n[tok::PAD] = "PAD";
    n[tok::BOS] = "BOS";
    n[tok::EOS] = "EOS";
    n[tok::SEP] = "SEP";
    n[tok::TASK_UND] = "TASK_UND";
    n[tok::TASK_GEN] = "TASK_GEN";
    n[tok::BOX_SEP] = "BOX_SEP";
    for (int c = 0; c <= kNumClasses; ++c) n[tok::img(c)] = "IMG_" + std::to_string(c);
    for (int k = 0; k <= kGrid; ++k) n[tok::coord(k)] = "COORD_" + std::to_string(k);
    for (int c = 1; c <= kNumClasses; ++c) n[tok::cls(c)] = "CLS_" + std::to_string(c);
    return n;
}

const std::vector<std::string>& names() {
    static const std::vector<std::string> n = make_names();
    return n;
}

}  // namespace

const std::string& token_name(int id) {
    return names().at(static_cast<size_t>(id));
}

std::string vocab_tsv() {
    std::string out;
    for (int i = 0; i < tok::VOCAB; ++i) out += std::to_string(i) + "\t" + token_name(i) + "\n";
    return out;
}

uint64_t vocab_hash() {
    // FNV-1a over the tsv table; stable ids are a checkpoint compatibility contract
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : vocab_tsv()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<BoxSpec> canonical_boxes(const Layout& layout) {
    std::vector<BoxSpec> boxes = layout.instances;
    std::sort(boxes.begin(), boxes.end(), [](const BoxSpec& a, const BoxSpec& b) {
        return std::tie(a.y0, a.x0, a.cls, a.x1, a.y1) < std::tie(b.y0, b.x0, b.cls, b.x1, b.y1);
    });
    return boxes;
}

std::vector<int> encode_layout(const Layout& layout) {
    std::vector<int> out;
    out.reserve(layout.instances.size() * 6);
    for (const auto& b : canonical_boxes(layout)) {
        if (b.cls < 1 || b.cls > kNumClasses || b.x0 < 0 || b.y0 < 0 || b.x1 > kGrid ||
            b.y1 > kGrid || b.x0 >= b.x1 || b.y0 >= b.y1)
            throw std::runtime_error("encode error: box out of range");
        out.push_back(tok::cls(b.cls));
        out.push_back(tok::coord(b.x0));
        out.push_back(tok::coord(b.y0));
        out.push_back(tok::coord(b.x1));
        out.push_back(tok::coord(b.y1));
        out.push_back(tok::BOX_SEP);
    }
    return out;
}

namespace {

bool is_coord(int t) { return t >= tok::COORD_BASE && t <= tok::COORD_BASE + kGrid; }
bool is_cls(int t) { return t >= tok::CLS_BASE && t < tok::CLS_BASE + kNumClasses; }

}  // namespace

Layout decode_layout(const std::vector<int>& seq, DecodeMode mode) {
    Layout out;
    size_t i = 0;
    while (i < seq.size()) {
        const bool group_fits = i + 6 <= seq.size();
        const bool well_formed = group_fits && is_cls(seq[i]) && is_coord(seq[i + 1]) &&
                                 is_coord(seq[i + 2]) && is_coord(seq[i + 3]) &&
                                 is_coord(seq[i + 4]) && seq[i + 5] == tok::BOX_SEP;
        if (well_formed) {
            BoxSpec b;
            b.cls = seq[i] - tok::CLS_BASE + 1;
            b.x0 = seq[i + 1] - tok::COORD_BASE;
            b.y0 = seq[i + 2] - tok::COORD_BASE;
            b.x1 = seq[i + 3] - tok::COORD_BASE;
            b.y1 = seq[i + 4] - tok::COORD_BASE;
            if (b.x1 > b.x0 && b.y1 > b.y0) {
                out.instances.push_back(b);
            } else if (mode == DecodeMode::Strict) {
                throw std::runtime_error("grammar error: degenerate box at position " +
                                         std::to_string(i));
            }
            i += 6;
            continue;
        }
        if (mode == DecodeMode::Strict)
            throw std::runtime_error("grammar error: malformed box group at position " +
                                     std::to_string(i));
        ++i;  // lenient: skip one token and rescan
    }
    return out;
}

std::vector<int> encode_image(const GridImage& img) {
    std::vector<int> out;
    out.reserve(kImageTokens);
    for (uint8_t c : img.cells) {
        if (c > kNumClasses) throw std::runtime_error("encode error: cell class out of range");
        out.push_back(tok::img(c));
    }
    return out;
}

GridImage decode_image(const std::vector<int>& seq) {
    if (seq.size() != kImageTokens)
        throw std::runtime_error("format error: image needs exactly 256 tokens, got " +
                                 std::to_string(seq.size()));
    GridImage img;
    for (size_t i = 0; i < seq.size(); ++i) {
        const int t = seq[i];
        if (t < tok::IMG_BASE || t > tok::IMG_BASE + kNumClasses)
            throw std::runtime_error("format error: non-image token at position " +
                                     std::to_string(i));
        img.cells[i] = static_cast<uint8_t>(t - tok::IMG_BASE);
    }
    return img;
}

TokenSeq build_sequence(Direction dir, const std::vector<int>& img_tokens,
                        const std::vector<int>& layout_tokens) {
    TokenSeq s;
    const auto& first = dir == Direction::Und ? img_tokens : layout_tokens;
    const auto& second = dir == Direction::Und ? layout_tokens : img_tokens;
    const size_t total = 2 + first.size() + 1 + second.size() + 1;
    if (total > kContext)
        throw std::runtime_error("length error: sequence of " + std::to_string(total) +
                                 " exceeds context " + std::to_string(kContext));
    s.ids.reserve(total);
    s.ids.push_back(tok::BOS);
    s.ids.push_back(dir == Direction::Und ? tok::TASK_UND : tok::TASK_GEN);
    s.ids.insert(s.ids.end(), first.begin(), first.end());
    s.ids.push_back(tok::SEP);
    s.prompt_len = static_cast<int>(s.ids.size());
    s.ids.insert(s.ids.end(), second.begin(), second.end());
    s.ids.push_back(tok::EOS);
    s.target_head = dir == Direction::Und ? Head::Layout : Head::Image;
    return s;
}

GrammarState GrammarState::layout_start() {
    return GrammarState{};
}

GrammarState GrammarState::image_start() {
    GrammarState g;
    g.image_mode_ = true;
    g.s_ = S::ImgCell;
    return g;
}

TokenMask GrammarState::allowed() const {
    TokenMask m{};
    switch (s_) {
        case S::Cls:
            if (boxes_done_ < kMaxDecodedBoxes)
                for (int c = 1; c <= kNumClasses; ++c) m[tok::cls(c)] = true;
            m[tok::EOS] = true;
            break;
        case S::X0:
            for (int k = 0; k < kGrid; ++k) m[tok::coord(k)] = true;
            break;
        case S::Y0:
            for (int k = 0; k < kGrid; ++k) m[tok::coord(k)] = true;
            break;
        case S::X1:
            for (int k = cur_x0_ + 1; k <= kGrid; ++k) m[tok::coord(k)] = true;
            break;
        case S::Y1:
            for (int k = cur_y0_ + 1; k <= kGrid; ++k) m[tok::coord(k)] = true;
            break;
        case S::BoxSep:
            m[tok::BOX_SEP] = true;
            break;
        case S::ImgCell:
            for (int c = 0; c <= kNumClasses; ++c) m[tok::img(c)] = true;
            break;
        case S::Eos:
            m[tok::EOS] = true;
            break;
    }
    return m;
}

void GrammarState::advance(int token) {
    if (done_) throw std::runtime_error("grammar error: advance past end");
    if (!allowed()[static_cast<size_t>(token)])
        throw std::runtime_error("grammar error: token " + token_name(token) +
                                 " not allowed in current state");
    switch (s_) {
        case S::Cls:
            if (token == tok::EOS) done_ = true;
            else s_ = S::X0;
            break;
        case S::X0:
            cur_x0_ = token - tok::COORD_BASE;
            s_ = S::Y0;
            break;
        case S::Y0:
            cur_y0_ = token - tok::COORD_BASE;
            s_ = S::X1;
            break;
        case S::X1:
            s_ = S::Y1;
            break;
        case S::Y1:
            s_ = S::BoxSep;
            break;
        case S::BoxSep:
            ++boxes_done_;
            s_ = S::Cls;
            break;
        case S::ImgCell:
            if (++cells_done_ == kImageTokens) s_ = S::Eos;
            break;
        case S::Eos:
            done_ = true;
            break;
    }
}

Head GrammarState::head() const {
    return image_mode_ ? Head::Image : Head::Layout;
}

}  // namespace cycgrid
