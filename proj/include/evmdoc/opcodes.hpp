#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace evmdoc {

// EVM instruction set as of the Constantinople/Petersburg fork (140 defined
// opcodes). Later additions (CHAINID, SELFBALANCE, BASEFEE, PUSH0, ...)
// deliberately decode as INVALID; extend the table if you need them.
struct OpcodeInfo {
    std::string_view mnemonic;
    uint8_t immediate_len = 0;  // nonzero only for PUSH1..PUSH32
    uint8_t stack_in = 0;
    uint8_t stack_out = 0;
    bool terminator = false;  // ends a basic block
    bool defined = false;     // false for bytes outside the instruction set
};

inline constexpr uint8_t OP_STOP = 0x00;
inline constexpr uint8_t OP_EQ = 0x14;
inline constexpr uint8_t OP_POP = 0x50;
inline constexpr uint8_t OP_JUMP = 0x56;
inline constexpr uint8_t OP_JUMPI = 0x57;
inline constexpr uint8_t OP_JUMPDEST = 0x5b;
inline constexpr uint8_t OP_PUSH1 = 0x60;
inline constexpr uint8_t OP_PUSH4 = 0x63;
inline constexpr uint8_t OP_PUSH32 = 0x7f;
inline constexpr uint8_t OP_DUP1 = 0x80;
inline constexpr uint8_t OP_DUP16 = 0x8f;
inline constexpr uint8_t OP_SWAP1 = 0x90;
inline constexpr uint8_t OP_SWAP16 = 0x9f;
inline constexpr uint8_t OP_RETURN = 0xf3;
inline constexpr uint8_t OP_REVERT = 0xfd;
inline constexpr uint8_t OP_INVALID = 0xfe;
inline constexpr uint8_t OP_SELFDESTRUCT = 0xff;

inline constexpr bool is_push(uint8_t op) { return op >= OP_PUSH1 && op <= OP_PUSH32; }
inline constexpr bool is_dup(uint8_t op) { return op >= OP_DUP1 && op <= OP_DUP16; }
inline constexpr bool is_swap(uint8_t op) { return op >= OP_SWAP1 && op <= OP_SWAP16; }

namespace detail {

inline constexpr std::array<std::string_view, 33> kPushNames = {
    "", "PUSH1", "PUSH2", "PUSH3", "PUSH4", "PUSH5", "PUSH6", "PUSH7", "PUSH8",
    "PUSH9", "PUSH10", "PUSH11", "PUSH12", "PUSH13", "PUSH14", "PUSH15", "PUSH16",
    "PUSH17", "PUSH18", "PUSH19", "PUSH20", "PUSH21", "PUSH22", "PUSH23", "PUSH24",
    "PUSH25", "PUSH26", "PUSH27", "PUSH28", "PUSH29", "PUSH30", "PUSH31", "PUSH32"};
inline constexpr std::array<std::string_view, 17> kDupNames = {
    "", "DUP1", "DUP2", "DUP3", "DUP4", "DUP5", "DUP6", "DUP7", "DUP8",
    "DUP9", "DUP10", "DUP11", "DUP12", "DUP13", "DUP14", "DUP15", "DUP16"};
inline constexpr std::array<std::string_view, 17> kSwapNames = {
    "", "SWAP1", "SWAP2", "SWAP3", "SWAP4", "SWAP5", "SWAP6", "SWAP7", "SWAP8",
    "SWAP9", "SWAP10", "SWAP11", "SWAP12", "SWAP13", "SWAP14", "SWAP15", "SWAP16"};
inline constexpr std::array<std::string_view, 5> kLogNames = {"LOG0", "LOG1", "LOG2",
                                                             "LOG3", "LOG4"};

inline std::array<OpcodeInfo, 256> build_opcode_table() {
    std::array<OpcodeInfo, 256> t{};
    for (auto& e : t) e = {"INVALID", 0, 0, 0, true, false};

    auto def = [&](uint8_t op, std::string_view name, uint8_t in, uint8_t out,
                   bool term = false) {
        t[op] = {name, 0, in, out, term, true};
    };

    def(0x00, "STOP", 0, 0, true);
    def(0x01, "ADD", 2, 1);
    def(0x02, "MUL", 2, 1);
    def(0x03, "SUB", 2, 1);
    def(0x04, "DIV", 2, 1);
    def(0x05, "SDIV", 2, 1);
    def(0x06, "MOD", 2, 1);
    def(0x07, "SMOD", 2, 1);
    def(0x08, "ADDMOD", 3, 1);
    def(0x09, "MULMOD", 3, 1);
    def(0x0a, "EXP", 2, 1);
    def(0x0b, "SIGNEXTEND", 2, 1);
    def(0x10, "LT", 2, 1);
    def(0x11, "GT", 2, 1);
    def(0x12, "SLT", 2, 1);
    def(0x13, "SGT", 2, 1);
    def(0x14, "EQ", 2, 1);
    def(0x15, "ISZERO", 1, 1);
    def(0x16, "AND", 2, 1);
    def(0x17, "OR", 2, 1);
    def(0x18, "XOR", 2, 1);
    def(0x19, "NOT", 1, 1);
    def(0x1a, "BYTE", 2, 1);
    def(0x1b, "SHL", 2, 1);
    def(0x1c, "SHR", 2, 1);
    def(0x1d, "SAR", 2, 1);
    def(0x20, "SHA3", 2, 1);
    def(0x30, "ADDRESS", 0, 1);
    def(0x31, "BALANCE", 1, 1);
    def(0x32, "ORIGIN", 0, 1);
    def(0x33, "CALLER", 0, 1);
    def(0x34, "CALLVALUE", 0, 1);
    def(0x35, "CALLDATALOAD", 1, 1);
    def(0x36, "CALLDATASIZE", 0, 1);
    def(0x37, "CALLDATACOPY", 3, 0);
    def(0x38, "CODESIZE", 0, 1);
    def(0x39, "CODECOPY", 3, 0);
    def(0x3a, "GASPRICE", 0, 1);
    def(0x3b, "EXTCODESIZE", 1, 1);
    def(0x3c, "EXTCODECOPY", 4, 0);
    def(0x3d, "RETURNDATASIZE", 0, 1);
    def(0x3e, "RETURNDATACOPY", 3, 0);
    def(0x3f, "EXTCODEHASH", 1, 1);
    def(0x40, "BLOCKHASH", 1, 1);
    def(0x41, "COINBASE", 0, 1);
    def(0x42, "TIMESTAMP", 0, 1);
    def(0x43, "NUMBER", 0, 1);
    def(0x44, "DIFFICULTY", 0, 1);
    def(0x45, "GASLIMIT", 0, 1);
    def(0x50, "POP", 1, 0);
    def(0x51, "MLOAD", 1, 1);
    def(0x52, "MSTORE", 2, 0);
    def(0x53, "MSTORE8", 2, 0);
    def(0x54, "SLOAD", 1, 1);
    def(0x55, "SSTORE", 2, 0);
    def(0x56, "JUMP", 1, 0, true);
    def(0x57, "JUMPI", 2, 0, true);
    def(0x58, "PC", 0, 1);
    def(0x59, "MSIZE", 0, 1);
    def(0x5a, "GAS", 0, 1);
    def(0x5b, "JUMPDEST", 0, 0);
    for (uint8_t n = 1; n <= 32; ++n) {
        t[0x5f + n] = {kPushNames[n], n, 0, 1, false, true};
    }
    for (uint8_t n = 1; n <= 16; ++n) {
        t[0x7f + n] = {kDupNames[n], 0, n, static_cast<uint8_t>(n + 1), false, true};
        t[0x8f + n] = {kSwapNames[n], 0, static_cast<uint8_t>(n + 1),
                       static_cast<uint8_t>(n + 1), false, true};
    }
    for (uint8_t n = 0; n <= 4; ++n) {
        t[0xa0 + n] = {kLogNames[n], 0, static_cast<uint8_t>(n + 2), 0, false, true};
    }
    def(0xf0, "CREATE", 3, 1);
    def(0xf1, "CALL", 7, 1);
    def(0xf2, "CALLCODE", 7, 1);
    def(0xf3, "RETURN", 2, 0, true);
    def(0xf4, "DELEGATECALL", 6, 1);
    def(0xf5, "CREATE2", 4, 1);
    def(0xfa, "STATICCALL", 6, 1);
    def(0xfd, "REVERT", 2, 0, true);
    def(0xfe, "INVALID", 0, 0, true);
    def(0xff, "SELFDESTRUCT", 1, 0, true);
    return t;
}

}  // namespace detail

inline const OpcodeInfo& opcode_info(uint8_t byte) {
    static const std::array<OpcodeInfo, 256> table = detail::build_opcode_table();
    return table[byte];
}

inline std::string_view mnemonic(uint8_t byte) { return opcode_info(byte).mnemonic; }

}  // namespace evmdoc
