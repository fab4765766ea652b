#pragma once

#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "evmdoc/errors.hpp"
#include "evmdoc/opcodes.hpp"

namespace evmdoc {

struct RawBytecode {
    std::vector<uint8_t> bytes;
    std::string source_hex;  // original text, prefix and all
};

struct Instruction {
    uint32_t offset = 0;
    uint8_t opcode = 0;  // raw byte; mnemonic via opcode_info()
    std::vector<uint8_t> immediate;
    bool valid = true;

    std::string_view mnemonic() const { return opcode_info(opcode).mnemonic; }
    uint32_t size() const { return 1 + static_cast<uint32_t>(immediate.size()); }
    uint32_t next_offset() const { return offset + size(); }
};

inline int hex_digit(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
}

inline RawBytecode parse_hex(const std::string& text) {
    RawBytecode out;
    out.source_hex = text;
    size_t start = 0;
    if (text.size() >= 2 && text[0] == '0' && (text[1] == 'x' || text[1] == 'X')) {
        start = 2;
    }
    size_t digits = text.size() - start;
    if (digits % 2 != 0) {
        throw MalformedHex("odd number of hex digits (" + std::to_string(digits) + ")");
    }
    out.bytes.reserve(digits / 2);
    for (size_t i = start; i < text.size(); i += 2) {
        int hi = hex_digit(text[i]);
        int lo = hex_digit(text[i + 1]);
        if (hi < 0 || lo < 0) {
            throw MalformedHex(std::string("invalid hex digit '") +
                               text[hi < 0 ? i : i + 1] + "' at position " +
                               std::to_string(hi < 0 ? i : i + 1));
        }
        out.bytes.push_back(static_cast<uint8_t>(hi << 4 | lo));
    }
    return out;
}

// Linear sweep. Never throws: a PUSH running off the end keeps the bytes that
// are there and is marked valid=false, undefined bytes decode as INVALID with
// valid=false. Every input byte lands in exactly one instruction.
inline std::vector<Instruction> disassemble(const RawBytecode& code) {
    std::vector<Instruction> out;
    const auto& bytes = code.bytes;
    size_t pos = 0;
    while (pos < bytes.size()) {
        Instruction ins;
        ins.offset = static_cast<uint32_t>(pos);
        ins.opcode = bytes[pos];
        const OpcodeInfo& info = opcode_info(ins.opcode);
        ins.valid = info.defined;
        size_t want = info.immediate_len;
        size_t have = std::min(want, bytes.size() - pos - 1);
        ins.immediate.assign(bytes.begin() + pos + 1, bytes.begin() + pos + 1 + have);
        if (have < want) ins.valid = false;  // truncated PUSH
        pos += 1 + have;
        out.push_back(std::move(ins));
    }
    return out;
}

inline std::vector<uint8_t> reassemble(const std::vector<Instruction>& instructions) {
    std::vector<uint8_t> out;
    for (const auto& ins : instructions) {
        out.push_back(ins.opcode);
        out.insert(out.end(), ins.immediate.begin(), ins.immediate.end());
    }
    return out;
}

namespace detail {

// Validates one CBOR item starting at `pos`, advancing past it. Indefinite
// lengths are rejected; Solidity's metadata encoder never emits them.
inline bool cbor_skip_item(const std::vector<uint8_t>& b, size_t& pos, size_t end,
                           int depth) {
    if (depth > 8 || pos >= end) return false;
    uint8_t head = b[pos++];
    int major = head >> 5;
    uint8_t info = head & 0x1f;
    uint64_t len = 0;
    if (info < 24) {
        len = info;
    } else if (info <= 27) {
        size_t n = size_t{1} << (info - 24);
        if (pos + n > end) return false;
        for (size_t i = 0; i < n; ++i) len = len << 8 | b[pos++];
    } else {
        return false;
    }
    switch (major) {
        case 0:
        case 1:
            return true;  // integer, payload in the head
        case 2:
        case 3:
            if (len > end - pos) return false;
            pos += len;
            return true;
        case 4:
            for (uint64_t i = 0; i < len; ++i)
                if (!cbor_skip_item(b, pos, end, depth + 1)) return false;
            return true;
        case 5:
            for (uint64_t i = 0; i < 2 * len; ++i)
                if (!cbor_skip_item(b, pos, end, depth + 1)) return false;
            return true;
        case 6:
            return cbor_skip_item(b, pos, end, depth + 1);
        case 7:
            return info < 24 || (info >= 25 && info <= 27);
        default:
            return false;
    }
}

inline bool is_cbor_map(const std::vector<uint8_t>& b, size_t begin, size_t end) {
    if (begin >= end) return false;
    if ((b[begin] >> 5) != 5) return false;  // top item must be a map
    size_t pos = begin;
    if (!cbor_skip_item(b, pos, end, 0)) return false;
    return pos == end;  // trailer must be exactly one item
}

}  // namespace detail

// Solidity appends a CBOR metadata map followed by its 2-byte big-endian
// length; that trailer is data, not code. Strips it only when the CBOR
// structure validates, otherwise returns the input untouched.
inline RawBytecode strip_metadata(const RawBytecode& code) {
    const auto& b = code.bytes;
    if (b.size() < 2) return code;
    size_t trailer_len = size_t{b[b.size() - 2]} << 8 | b[b.size() - 1];
    if (trailer_len == 0 || b.size() < trailer_len + 2) return code;
    size_t begin = b.size() - 2 - trailer_len;
    if (!detail::is_cbor_map(b, begin, b.size() - 2)) return code;
    RawBytecode out;
    out.bytes.assign(b.begin(), b.begin() + begin);
    out.source_hex = code.source_hex;
    return out;
}

inline std::string to_hex(const std::vector<uint8_t>& bytes) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    s.reserve(bytes.size() * 2);
    for (uint8_t b : bytes) {
        s.push_back(digits[b >> 4]);
        s.push_back(digits[b & 0xf]);
    }
    return s;
}

// One instruction per line: OFFSET MNEMONIC [IMMEDIATE-HEX]
inline std::string render_listing(const std::vector<Instruction>& instructions) {
    std::ostringstream os;
    for (const auto& ins : instructions) {
        os << ins.offset << ' ' << ins.mnemonic();
        if (!ins.immediate.empty()) os << " 0x" << to_hex(ins.immediate);
        if (!ins.valid) os << " ; invalid";
        os << '\n';
    }
    return os.str();
}

}  // namespace evmdoc
