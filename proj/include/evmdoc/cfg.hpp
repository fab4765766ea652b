#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "evmdoc/disasm.hpp"
#include "evmdoc/errors.hpp"

namespace evmdoc {

enum class Terminator {
    Jump,
    JumpI,
    Stop,
    Return,
    Revert,
    SelfDestruct,
    Invalid,
    FallThrough
};

enum class EdgeKind { Taken, FallThrough, Unconditional };

inline std::string_view to_string(Terminator t) {
    switch (t) {
        case Terminator::Jump: return "Jump";
        case Terminator::JumpI: return "JumpI";
        case Terminator::Stop: return "Stop";
        case Terminator::Return: return "Return";
        case Terminator::Revert: return "Revert";
        case Terminator::SelfDestruct: return "SelfDestruct";
        case Terminator::Invalid: return "Invalid";
        case Terminator::FallThrough: return "FallThrough";
    }
    return "?";
}

inline std::string_view to_string(EdgeKind k) {
    switch (k) {
        case EdgeKind::Taken: return "Taken";
        case EdgeKind::FallThrough: return "FallThrough";
        case EdgeKind::Unconditional: return "Unconditional";
    }
    return "?";
}

struct BasicBlock {
    int id = 0;
    uint32_t start_offset = 0;
    uint32_t end_offset = 0;  // one past the last byte
    std::vector<Instruction> instructions;
    Terminator terminator = Terminator::FallThrough;

    bool starts_with_jumpdest() const {
        return !instructions.empty() && instructions.front().opcode == OP_JUMPDEST;
    }
};

struct Edge {
    int src = 0;
    int dst = 0;
    EdgeKind kind = EdgeKind::FallThrough;

    friend bool operator<(const Edge& a, const Edge& b) {
        return std::tie(a.src, a.dst, a.kind) < std::tie(b.src, b.dst, b.kind);
    }
    friend bool operator==(const Edge& a, const Edge& b) {
        return a.src == b.src && a.dst == b.dst && a.kind == b.kind;
    }
};

struct JumpDiagnostic {
    int block = 0;
    std::string message;
};

struct ControlFlowGraph {
    std::vector<BasicBlock> blocks;  // for the full graph, ids are dense 0..n-1
    std::vector<Edge> edges;
    int entry = 0;
    std::vector<JumpDiagnostic> diagnostics;

    const BasicBlock* block_by_id(int id) const {
        for (const auto& b : blocks)
            if (b.id == id) return &b;
        return nullptr;
    }
    const BasicBlock* block_at_offset(uint32_t offset) const {
        for (const auto& b : blocks)
            if (b.start_offset == offset) return &b;
        return nullptr;
    }
};

struct FunctionSelector {
    bool fallback = true;
    uint32_t value = 0;

    static FunctionSelector make_fallback() { return {}; }
    static FunctionSelector make(uint32_t v) { return {false, v}; }

    std::string text() const {
        if (fallback) return "FALLBACK";
        static const char* digits = "0123456789abcdef";
        std::string s = "0x";
        for (int shift = 28; shift >= 0; shift -= 4)
            s.push_back(digits[(value >> shift) & 0xf]);
        return s;
    }
    friend bool operator==(const FunctionSelector& a, const FunctionSelector& b) {
        return a.fallback == b.fallback && (a.fallback || a.value == b.value);
    }
};

struct FunctionCfg {
    FunctionSelector selector;
    int entry = 0;
    ControlFlowGraph cfg;  // blocks reachable from entry, original ids kept
};

inline Terminator terminator_of(const Instruction& ins) {
    if (!opcode_info(ins.opcode).terminator) return Terminator::FallThrough;
    switch (ins.opcode) {
        case OP_JUMP: return Terminator::Jump;
        case OP_JUMPI: return Terminator::JumpI;
        case OP_STOP: return Terminator::Stop;
        case OP_RETURN: return Terminator::Return;
        case OP_REVERT: return Terminator::Revert;
        case OP_SELFDESTRUCT: return Terminator::SelfDestruct;
        default: return Terminator::Invalid;  // 0xfe and undefined bytes
    }
}

// Leaders: offset 0, every JUMPDEST, and the instruction after a terminator.
inline std::vector<BasicBlock> split_blocks(const std::vector<Instruction>& instructions) {
    if (instructions.empty()) throw EmptyCode("no instructions to split");
    std::set<uint32_t> leaders;
    leaders.insert(instructions.front().offset);
    for (const auto& ins : instructions) {
        if (ins.opcode == OP_JUMPDEST) leaders.insert(ins.offset);
        if (opcode_info(ins.opcode).terminator) leaders.insert(ins.next_offset());
    }
    std::vector<BasicBlock> blocks;
    BasicBlock cur;
    auto flush = [&]() {
        if (cur.instructions.empty()) return;
        cur.id = static_cast<int>(blocks.size());
        cur.start_offset = cur.instructions.front().offset;
        cur.end_offset = cur.instructions.back().next_offset();
        const Instruction& last = cur.instructions.back();
        cur.terminator = terminator_of(last);
        blocks.push_back(std::move(cur));
        cur = BasicBlock{};
    };
    for (const auto& ins : instructions) {
        if (leaders.count(ins.offset) && !cur.instructions.empty()) flush();
        cur.instructions.push_back(ins);
    }
    flush();
    return blocks;
}

namespace detail {

// Abstract stack slot: a known constant or Unknown. Anything below the
// tracked window behaves as Unknown.
struct AbstractValue {
    bool known = false;
    uint64_t value = 0;

    static AbstractValue unknown() { return {}; }
    static AbstractValue constant(uint64_t v) { return {true, v}; }
    friend bool operator==(const AbstractValue& a, const AbstractValue& b) {
        return a.known == b.known && (!a.known || a.value == b.value);
    }
};

// Bottom at front, top at back.
using AbstractStack = std::vector<AbstractValue>;

inline constexpr size_t kMaxTrackedDepth = 32;

inline void cap_depth(AbstractStack& s) {
    if (s.size() > kMaxTrackedDepth)
        s.erase(s.begin(), s.begin() + (s.size() - kMaxTrackedDepth));
}

inline AbstractValue pop_value(AbstractStack& s) {
    if (s.empty()) return AbstractValue::unknown();
    AbstractValue v = s.back();
    s.pop_back();
    return v;
}

inline void apply_instruction(const Instruction& ins, AbstractStack& s) {
    uint8_t op = ins.opcode;
    if (is_push(op)) {
        if (ins.valid && ins.immediate.size() <= 8) {
            uint64_t v = 0;
            for (uint8_t b : ins.immediate) v = v << 8 | b;
            s.push_back(AbstractValue::constant(v));
        } else {
            s.push_back(AbstractValue::unknown());
        }
    } else if (is_dup(op)) {
        size_t n = op - OP_DUP1 + 1;
        s.push_back(n <= s.size() ? s[s.size() - n] : AbstractValue::unknown());
    } else if (is_swap(op)) {
        size_t n = op - OP_SWAP1 + 1;
        while (s.size() < n + 1) s.insert(s.begin(), AbstractValue::unknown());
        std::swap(s[s.size() - 1], s[s.size() - 1 - n]);
    } else if (op == OP_POP) {
        pop_value(s);
    } else {
        const OpcodeInfo& info = opcode_info(op);
        for (int i = 0; i < info.stack_in; ++i) pop_value(s);
        for (int i = 0; i < info.stack_out; ++i) s.push_back(AbstractValue::unknown());
    }
    cap_depth(s);
}

// Join aligned at the top; depth mismatch drops the deeper bottom slots.
inline bool join_into(AbstractStack& dst, const AbstractStack& src) {
    size_t depth = std::min(dst.size(), src.size());
    AbstractStack joined(depth);
    for (size_t i = 0; i < depth; ++i) {
        const AbstractValue& a = dst[dst.size() - depth + i];
        const AbstractValue& b = src[src.size() - depth + i];
        joined[i] = (a == b) ? a : AbstractValue::unknown();
    }
    bool changed = joined != dst;
    dst = std::move(joined);
    return changed;
}

struct BlockOutcome {
    AbstractStack exit_stack;
    AbstractValue jump_target;  // for Jump/JumpI terminators, pre-pop top slot
};

inline BlockOutcome simulate_block(const BasicBlock& block, AbstractStack state) {
    BlockOutcome out;
    for (const auto& ins : block.instructions) {
        bool is_final = &ins == &block.instructions.back();
        if (is_final && (ins.opcode == OP_JUMP || ins.opcode == OP_JUMPI)) {
            out.jump_target =
                state.empty() ? AbstractValue::unknown() : state.back();
        }
        apply_instruction(ins, state);
    }
    out.exit_stack = std::move(state);
    return out;
}

}  // namespace detail

// Resolves jump edges by propagating constant PUSH values through a per-block
// abstract stack until the edge set and block-entry states stop changing.
// Unknown targets produce no edge and are reported in diagnostics.
inline ControlFlowGraph resolve_jumps(const std::vector<BasicBlock>& blocks) {
    using detail::AbstractStack;
    ControlFlowGraph g;
    g.blocks = blocks;
    if (g.blocks.empty()) throw EmptyCode("no blocks");
    g.entry = g.blocks.front().id;

    std::map<uint32_t, int> block_at;  // start offset -> id
    for (const auto& b : g.blocks) block_at[b.start_offset] = b.id;

    std::map<int, AbstractStack> entry_state;
    std::set<Edge> edges;
    std::vector<int> worklist{g.entry};
    entry_state[g.entry] = {};

    auto add_edge = [&](int src, int dst, EdgeKind kind,
                        const AbstractStack& exit_state) {
        bool fresh = edges.insert({src, dst, kind}).second;
        auto it = entry_state.find(dst);
        bool changed;
        if (it == entry_state.end()) {
            entry_state[dst] = exit_state;
            changed = true;
        } else {
            changed = detail::join_into(it->second, exit_state);
        }
        if (fresh || changed) worklist.push_back(dst);
    };

    size_t iterations = 0;
    const size_t iteration_cap = 256u * g.blocks.size() + 1024;
    while (!worklist.empty()) {
        if (++iterations > iteration_cap) {
            g.diagnostics.push_back({-1, "fixpoint iteration cap hit"});
            break;
        }
        int id = worklist.back();
        worklist.pop_back();
        const BasicBlock& block = g.blocks[id];
        detail::BlockOutcome out = detail::simulate_block(block, entry_state[id]);

        auto fall_through_to_next = [&]() {
            auto it = block_at.find(block.end_offset);
            if (it != block_at.end())
                add_edge(id, it->second, EdgeKind::FallThrough, out.exit_stack);
        };
        auto jump_edge_to = [&](EdgeKind kind) {
            if (!out.jump_target.known) return;
            auto it = block_at.find(static_cast<uint32_t>(out.jump_target.value));
            if (it == block_at.end()) return;
            if (!g.blocks[it->second].starts_with_jumpdest()) return;
            add_edge(id, it->second, kind, out.exit_stack);
        };

        switch (block.terminator) {
            case Terminator::Jump:
                jump_edge_to(EdgeKind::Unconditional);
                break;
            case Terminator::JumpI:
                jump_edge_to(EdgeKind::Taken);
                fall_through_to_next();
                break;
            case Terminator::FallThrough:
                fall_through_to_next();
                break;
            default:
                break;  // Stop/Return/Revert/SelfDestruct/Invalid end the path
        }
    }

    g.edges.assign(edges.begin(), edges.end());

    // Report jumps still unresolved (or invalid) under the final states.
    for (const auto& [id, state] : entry_state) {
        const BasicBlock& block = g.blocks[id];
        if (block.terminator != Terminator::Jump && block.terminator != Terminator::JumpI)
            continue;
        detail::BlockOutcome out = detail::simulate_block(block, state);
        if (!out.jump_target.known) {
            g.diagnostics.push_back({id, "unresolved jump target"});
        } else {
            auto it = block_at.find(static_cast<uint32_t>(out.jump_target.value));
            if (it == block_at.end() || !g.blocks[it->second].starts_with_jumpdest())
                g.diagnostics.push_back({id, "jump target is not a JUMPDEST"});
        }
    }
    return g;
}

namespace detail {

inline std::set<int> reachable_from(const ControlFlowGraph& g, int entry) {
    std::set<int> seen;
    std::vector<int> stack{entry};
    while (!stack.empty()) {
        int id = stack.back();
        stack.pop_back();
        if (!seen.insert(id).second) continue;
        for (const auto& e : g.edges)
            if (e.src == id && !seen.count(e.dst)) stack.push_back(e.dst);
    }
    return seen;
}

inline ControlFlowGraph subgraph(const ControlFlowGraph& g, int entry) {
    std::set<int> keep = reachable_from(g, entry);
    ControlFlowGraph sub;
    sub.entry = entry;
    for (const auto& b : g.blocks)
        if (keep.count(b.id)) sub.blocks.push_back(b);
    for (const auto& e : g.edges)
        if (keep.count(e.src) && keep.count(e.dst)) sub.edges.push_back(e);
    return sub;
}

// PUSH4 sel ... EQ ... JUMPI with a resolved Taken edge marks a dispatcher
// comparison; the Taken destination is the function entry.
inline std::optional<uint32_t> dispatch_selector(const BasicBlock& block) {
    if (block.terminator != Terminator::JumpI) return std::nullopt;
    std::optional<uint32_t> selector;
    bool eq_after_push = false;
    for (const auto& ins : block.instructions) {
        if (ins.opcode == OP_PUSH4 && ins.valid) {
            uint32_t v = 0;
            for (uint8_t b : ins.immediate) v = v << 8 | b;
            selector = v;
            eq_after_push = false;
        } else if (ins.opcode == OP_EQ && selector) {
            eq_after_push = true;
        }
    }
    if (selector && eq_after_push) return selector;
    return std::nullopt;
}

}  // namespace detail

inline std::vector<FunctionCfg> extract_functions(const ControlFlowGraph& g) {
    if (g.blocks.empty()) throw EmptyCode("empty graph");

    // Dispatcher spine: the fall-through chain from the entry block.
    std::vector<int> chain;
    std::set<int> on_chain;
    int cur = g.entry;
    while (on_chain.insert(cur).second) {
        chain.push_back(cur);
        const Edge* next = nullptr;
        for (const auto& e : g.edges)
            if (e.src == cur && e.kind == EdgeKind::FallThrough) next = &e;
        if (!next) break;
        cur = next->dst;
    }

    std::vector<FunctionCfg> functions;
    std::set<uint32_t> seen_selectors;
    int last_dispatch_pos = -1;
    for (size_t pos = 0; pos < chain.size(); ++pos) {
        const BasicBlock* block = g.block_by_id(chain[pos]);
        auto selector = detail::dispatch_selector(*block);
        if (!selector) continue;
        const Edge* taken = nullptr;
        for (const auto& e : g.edges)
            if (e.src == block->id && e.kind == EdgeKind::Taken) taken = &e;
        if (!taken) continue;
        last_dispatch_pos = static_cast<int>(pos);
        if (!seen_selectors.insert(*selector).second) continue;
        FunctionCfg fn;
        fn.selector = FunctionSelector::make(*selector);
        fn.entry = taken->dst;
        fn.cfg = detail::subgraph(g, taken->dst);
        functions.push_back(std::move(fn));
    }

    if (functions.empty()) {
        // No dispatcher: the whole reachable graph is the fallback.
        FunctionCfg fn;
        fn.selector = FunctionSelector::make_fallback();
        fn.entry = g.entry;
        fn.cfg = detail::subgraph(g, g.entry);
        functions.push_back(std::move(fn));
        return functions;
    }

    // Where execution lands after the last failed comparison.
    if (last_dispatch_pos >= 0 &&
        static_cast<size_t>(last_dispatch_pos) + 1 < chain.size()) {
        FunctionCfg fn;
        fn.selector = FunctionSelector::make_fallback();
        fn.entry = chain[last_dispatch_pos + 1];
        fn.cfg = detail::subgraph(g, fn.entry);
        functions.push_back(std::move(fn));
    }
    return functions;
}

// DFS linearization. Children ordered FallThrough, Taken, Unconditional, then
// by ascending target offset; each block's mnemonics appear exactly once and
// "->" separates consecutively visited blocks.
inline std::vector<std::string> serialize_cfg(const FunctionCfg& fn) {
    const ControlFlowGraph& g = fn.cfg;
    const BasicBlock* entry = g.block_by_id(fn.entry);
    if (!entry) throw EmptyCfg("function has no entry block");

    auto kind_rank = [](EdgeKind k) {
        switch (k) {
            case EdgeKind::FallThrough: return 0;
            case EdgeKind::Taken: return 1;
            case EdgeKind::Unconditional: return 2;
        }
        return 3;
    };

    std::vector<std::string> tokens;
    std::set<int> visited;
    std::vector<int> stack{fn.entry};
    while (!stack.empty()) {
        int id = stack.back();
        stack.pop_back();
        if (!visited.insert(id).second) continue;
        const BasicBlock* block = g.block_by_id(id);
        if (!tokens.empty()) tokens.emplace_back("->");
        for (const auto& ins : block->instructions)
            tokens.emplace_back(ins.mnemonic());

        std::vector<const Edge*> children;
        for (const auto& e : g.edges)
            if (e.src == id) children.push_back(&e);
        std::sort(children.begin(), children.end(),
                  [&](const Edge* a, const Edge* b) {
                      int ra = kind_rank(a->kind), rb = kind_rank(b->kind);
                      if (ra != rb) return ra < rb;
                      return g.block_by_id(a->dst)->start_offset <
                             g.block_by_id(b->dst)->start_offset;
                  });
        // Reverse so the highest-priority child is popped first.
        for (auto it = children.rbegin(); it != children.rend(); ++it)
            if (!visited.count((*it)->dst)) stack.push_back((*it)->dst);
    }
    return tokens;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
    std::string s;
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (i) s.push_back(' ');
        s += tokens[i];
    }
    return s;
}

inline std::string dump_cfg(const ControlFlowGraph& g) {
    std::ostringstream os;
    for (const auto& b : g.blocks)
        os << "BLOCK " << b.id << ' ' << b.start_offset << ".." << b.end_offset
           << ' ' << to_string(b.terminator) << '\n';
    for (const auto& e : g.edges)
        os << "EDGE " << e.src << ' ' << e.dst << ' ' << to_string(e.kind) << '\n';
    return os.str();
}

inline std::string to_dot(const ControlFlowGraph& g, const std::string& name = "cfg") {
    std::ostringstream os;
    os << "digraph \"" << name << "\" {\n  node [shape=box fontname=monospace];\n";
    for (const auto& b : g.blocks) {
        os << "  b" << b.id << " [label=\"#" << b.id << " @" << b.start_offset
           << "\\n";
        for (const auto& ins : b.instructions) {
            os << ins.mnemonic();
            if (!ins.immediate.empty()) os << " 0x" << to_hex(ins.immediate);
            os << "\\l";
        }
        os << "\"];\n";
    }
    for (const auto& e : g.edges) {
        os << "  b" << e.src << " -> b" << e.dst << " [label=\""
           << to_string(e.kind) << "\"];\n";
    }
    os << "}\n";
    return os.str();
}

}  // namespace evmdoc
