#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "evmdoc/errors.hpp"
#include "evmdoc/metrics.hpp"
#include "evmdoc/nn.hpp"
#include "evmdoc/vocab.hpp"

namespace evmdoc {

struct Hyperparams {
    Eigen::Index embed_dim = 256;
    Eigen::Index hidden_dim = 256;
    size_t enc_max_len = 200;
    size_t dec_max_len = 50;
    size_t batch = 32;
    Real dropout = 0.1;
    size_t epochs = 50;
    Real coverage_weight = 1.0;
    size_t beam_k = 5;
    size_t vocab_cap = 30000;
    uint64_t seed = 0;
    bool copy_enabled = true;
    bool coverage_enabled = true;
    Real base_lr = 5e-4;
    uint64_t warmup = 4000;

    void validate() const {
        if (embed_dim < 1 || hidden_dim < 1)
            throw ConfigError("model dimensions must be positive");
        if (enc_max_len < 2)
            throw ConfigError("enc_max_len must be at least 2");
        if (dec_max_len < 1 || batch < 1 || epochs < 1 || beam_k < 1 ||
            vocab_cap < 1)
            throw ConfigError("size hyperparameters must be positive");
        if (dropout < 0.0 || dropout >= 1.0)
            throw ConfigError("dropout must lie in [0, 1)");
        if (coverage_weight < 0.0)
            throw ConfigError("coverage_weight must be non-negative");
        if (base_lr <= 0.0 || warmup < 1)
            throw ConfigError("learning-rate schedule must be positive");
    }
};

inline nlohmann::json hyperparams_to_json(const Hyperparams& h) {
    return {{"embed_dim", h.embed_dim},
            {"hidden_dim", h.hidden_dim},
            {"enc_max_len", h.enc_max_len},
            {"dec_max_len", h.dec_max_len},
            {"batch", h.batch},
            {"dropout", h.dropout},
            {"epochs", h.epochs},
            {"coverage_weight", h.coverage_weight},
            {"beam_k", h.beam_k},
            {"vocab_cap", h.vocab_cap},
            {"seed", h.seed},
            {"copy_enabled", h.copy_enabled},
            {"coverage_enabled", h.coverage_enabled},
            {"base_lr", h.base_lr},
            {"warmup", h.warmup}};
}

inline Hyperparams hyperparams_from_json(const nlohmann::json& j) {
    Hyperparams h;
    h.embed_dim = j.at("embed_dim").get<Eigen::Index>();
    h.hidden_dim = j.at("hidden_dim").get<Eigen::Index>();
    h.enc_max_len = j.at("enc_max_len").get<size_t>();
    h.dec_max_len = j.at("dec_max_len").get<size_t>();
    h.batch = j.at("batch").get<size_t>();
    h.dropout = j.at("dropout").get<Real>();
    h.epochs = j.at("epochs").get<size_t>();
    h.coverage_weight = j.at("coverage_weight").get<Real>();
    h.beam_k = j.at("beam_k").get<size_t>();
    h.vocab_cap = j.at("vocab_cap").get<size_t>();
    h.seed = j.at("seed").get<uint64_t>();
    h.copy_enabled = j.at("copy_enabled").get<bool>();
    h.coverage_enabled = j.at("coverage_enabled").get<bool>();
    h.base_lr = j.at("base_lr").get<Real>();
    h.warmup = j.at("warmup").get<uint64_t>();
    return h;
}

// ---------------------------------------------------------------------------
// Parameters. Encoder states are [forward ; backward] concatenations of width
// 2*hidden; the attention working width equals hidden.

struct ModelParams {
    Eigen::Index embed_dim = 0, hidden_dim = 0, vocab_size = 0;

    Parameter embed;                      // V x E, one row per token
    Parameter enc_fwd_W, enc_fwd_b;       // forward encoder LSTM
    Parameter enc_bwd_W, enc_bwd_b;       // backward encoder LSTM
    Parameter dec1_W, dec1_b;             // decoder layer 1 (input: embedding)
    Parameter dec2_W, dec2_b;             // decoder layer 2 (input: layer-1 h)
    Parameter bridge_h1_W, bridge_h1_b;   // encoder summary -> initial states
    Parameter bridge_c1_W, bridge_c1_b;
    Parameter bridge_h2_W, bridge_h2_b;
    Parameter bridge_c2_W, bridge_c2_b;
    Parameter att_v, att_Weh, att_Wsh, att_Wcv, att_b;
    Parameter out_W, out_b;               // vocabulary projection over [s; c*]
    Parameter copy_wc, copy_ws, copy_wx, copy_b;

    static ModelParams make(Eigen::Index embed_dim, Eigen::Index hidden_dim,
                            Eigen::Index vocab_size) {
        if (embed_dim < 1 || hidden_dim < 1 || vocab_size < 1)
            throw ConfigError("model dimensions must be positive");
        ModelParams p;
        p.embed_dim = embed_dim;
        p.hidden_dim = hidden_dim;
        p.vocab_size = vocab_size;
        Eigen::Index E = embed_dim, H = hidden_dim, V = vocab_size;
        p.embed = Parameter("embed", V, E);
        p.enc_fwd_W = Parameter("enc_fwd_W", 4 * H, E + H);
        p.enc_fwd_b = Parameter("enc_fwd_b", 4 * H, 1);
        p.enc_bwd_W = Parameter("enc_bwd_W", 4 * H, E + H);
        p.enc_bwd_b = Parameter("enc_bwd_b", 4 * H, 1);
        p.dec1_W = Parameter("dec1_W", 4 * H, E + H);
        p.dec1_b = Parameter("dec1_b", 4 * H, 1);
        p.dec2_W = Parameter("dec2_W", 4 * H, H + H);
        p.dec2_b = Parameter("dec2_b", 4 * H, 1);
        p.bridge_h1_W = Parameter("bridge_h1_W", H, 2 * H);
        p.bridge_h1_b = Parameter("bridge_h1_b", H, 1);
        p.bridge_c1_W = Parameter("bridge_c1_W", H, 2 * H);
        p.bridge_c1_b = Parameter("bridge_c1_b", H, 1);
        p.bridge_h2_W = Parameter("bridge_h2_W", H, 2 * H);
        p.bridge_h2_b = Parameter("bridge_h2_b", H, 1);
        p.bridge_c2_W = Parameter("bridge_c2_W", H, 2 * H);
        p.bridge_c2_b = Parameter("bridge_c2_b", H, 1);
        p.att_v = Parameter("att_v", H, 1);
        p.att_Weh = Parameter("att_Weh", H, 2 * H);
        p.att_Wsh = Parameter("att_Wsh", H, H);
        p.att_Wcv = Parameter("att_Wcv", H, 1);
        p.att_b = Parameter("att_b", H, 1);
        p.out_W = Parameter("out_W", V, 3 * H);
        p.out_b = Parameter("out_b", V, 1);
        p.copy_wc = Parameter("copy_wc", 2 * H, 1);
        p.copy_ws = Parameter("copy_ws", H, 1);
        p.copy_wx = Parameter("copy_wx", E, 1);
        p.copy_b = Parameter("copy_b", 1, 1);
        return p;
    }

    std::vector<Parameter*> all() {
        return {&embed,       &enc_fwd_W,   &enc_fwd_b,   &enc_bwd_W,
                &enc_bwd_b,   &dec1_W,      &dec1_b,      &dec2_W,
                &dec2_b,      &bridge_h1_W, &bridge_h1_b, &bridge_c1_W,
                &bridge_c1_b, &bridge_h2_W, &bridge_h2_b, &bridge_c2_W,
                &bridge_c2_b, &att_v,       &att_Weh,     &att_Wsh,
                &att_Wcv,     &att_b,       &out_W,       &out_b,
                &copy_wc,     &copy_ws,     &copy_wx,     &copy_b};
    }

    std::vector<const Parameter*> all() const {
        auto mutable_list = const_cast<ModelParams*>(this)->all();
        return {mutable_list.begin(), mutable_list.end()};
    }

    // Uniform weights, zero biases; fully determined by the rng state.
    void init(std::mt19937_64& rng) {
        for (Parameter* p : all()) {
            if (p->name.size() > 2 &&
                p->name.compare(p->name.size() - 2, 2, "_b") == 0)
                continue;  // biases stay zero
            init_uniform(*p, rng);
        }
    }
};

// ---------------------------------------------------------------------------
// Input preparation: PAD tokens are dropped, over-long sequences keep their
// first enc_max_len tokens, and token strings stay aligned with positions so
// copy targets can be resolved.

struct ModelInput {
    std::vector<int> ids;
    std::vector<std::string> tokens;
};

inline ModelInput prepare_input(const Vocabulary& vocab,
                                const std::vector<std::string>& tokens,
                                size_t enc_max_len) {
    ModelInput out;
    for (const std::string& t : tokens) {
        int id = vocab.id_of(t);
        if (id == Vocabulary::kPad) continue;
        out.ids.push_back(id);
        out.tokens.push_back(t);
        if (out.ids.size() == enc_max_len) break;
    }
    return out;
}

// Extended id space: vocabulary ids plus one slot per distinct
// out-of-vocabulary input token, in order of first appearance.
struct ExtendedVocab {
    size_t base = 0;
    std::vector<int> ext_ids;  // per input position
    std::vector<std::string> oov_tokens;
    std::unordered_map<std::string, int> oov_index;

    size_t size() const { return base + oov_tokens.size(); }

    int oov_ext_id(const std::string& token) const {
        auto it = oov_index.find(token);
        return it == oov_index.end() ? -1
                                     : static_cast<int>(base) + it->second;
    }

    std::string token_of(const Vocabulary& vocab, int ext_id) const {
        if (ext_id < static_cast<int>(base))
            return vocab.token_of(static_cast<size_t>(ext_id));
        size_t idx = static_cast<size_t>(ext_id) - base;
        if (idx >= oov_tokens.size())
            throw ShapeError("extended token id out of range");
        return oov_tokens[idx];
    }
};

inline ExtendedVocab make_extended(const Vocabulary& vocab,
                                   const ModelInput& input) {
    ExtendedVocab ext;
    ext.base = vocab.size();
    ext.ext_ids.reserve(input.ids.size());
    for (size_t i = 0; i < input.ids.size(); ++i) {
        if (input.ids[i] != Vocabulary::kUnk) {
            ext.ext_ids.push_back(input.ids[i]);
            continue;
        }
        const std::string& tok = input.tokens[i];
        auto it = ext.oov_index.find(tok);
        int idx;
        if (it == ext.oov_index.end()) {
            idx = static_cast<int>(ext.oov_tokens.size());
            ext.oov_index.emplace(tok, idx);
            ext.oov_tokens.push_back(tok);
        } else {
            idx = it->second;
        }
        ext.ext_ids.push_back(static_cast<int>(ext.base) + idx);
    }
    return ext;
}

// ---------------------------------------------------------------------------
// Encoder: two LSTMs over the sequence and its reverse; position i exposes
// [forward_i ; backward_i]. A tanh bridge maps the final forward/backward
// states to the initial states of both decoder layers.

struct EncodeCache {
    std::vector<int> ids;
    std::vector<LstmCache> fwd;  // fwd[t] consumed ids[t]
    std::vector<LstmCache> bwd;  // bwd[j] consumed ids[L-1-j]
    Mat H;                       // L x 2H
    Vec summary;                 // [fwd.back().h ; bwd.back().h]
    Vec h1_0, c1_0, h2_0, c2_0;  // decoder initial states
};

inline EncodeCache encode(const ModelParams& p,
                          const std::vector<int>& input_ids,
                          size_t enc_max_len) {
    EncodeCache cache;
    for (int id : input_ids) {
        if (id == Vocabulary::kPad) continue;
        if (id < 0 || id >= p.vocab_size)
            throw ShapeError("encoder token id outside vocabulary");
        cache.ids.push_back(id);
        if (cache.ids.size() == enc_max_len) break;
    }
    if (cache.ids.empty()) throw EmptyInput("encoder input is empty");

    const Eigen::Index H = p.hidden_dim;
    const size_t L = cache.ids.size();
    Vec h = Vec::Zero(H), c = Vec::Zero(H);
    for (size_t t = 0; t < L; ++t) {
        Vec x = p.embed.value.row(cache.ids[t]).transpose();
        cache.fwd.push_back(lstm_forward(p.enc_fwd_W, p.enc_fwd_b, x, h, c));
        h = cache.fwd.back().h;
        c = cache.fwd.back().c;
    }
    h.setZero();
    c.setZero();
    for (size_t j = 0; j < L; ++j) {
        Vec x = p.embed.value.row(cache.ids[L - 1 - j]).transpose();
        cache.bwd.push_back(lstm_forward(p.enc_bwd_W, p.enc_bwd_b, x, h, c));
        h = cache.bwd.back().h;
        c = cache.bwd.back().c;
    }

    cache.H = Mat(L, 2 * H);
    for (size_t i = 0; i < L; ++i) {
        cache.H.row(i).head(H) = cache.fwd[i].h.transpose();
        cache.H.row(i).tail(H) = cache.bwd[L - 1 - i].h.transpose();
    }
    cache.summary = Vec(2 * H);
    cache.summary.head(H) = cache.fwd.back().h;
    cache.summary.tail(H) = cache.bwd.back().h;

    auto bridge = [&](const Parameter& W, const Parameter& b) {
        return tanh_v(W.value * cache.summary + b.value.col(0));
    };
    cache.h1_0 = bridge(p.bridge_h1_W, p.bridge_h1_b);
    cache.c1_0 = bridge(p.bridge_c1_W, p.bridge_c1_b);
    cache.h2_0 = bridge(p.bridge_h2_W, p.bridge_h2_b);
    cache.c2_0 = bridge(p.bridge_c2_W, p.bridge_c2_b);
    return cache;
}

// dH carries per-position gradients; the dh/dc arguments carry gradients into
// the decoder initial states produced by the bridge.
inline void encode_backward(ModelParams& p, const EncodeCache& cache,
                            const Mat& dH, const Vec& dh1_0, const Vec& dc1_0,
                            const Vec& dh2_0, const Vec& dc2_0) {
    const Eigen::Index H = p.hidden_dim;
    const size_t L = cache.ids.size();
    require_shape(dH.rows() == static_cast<Eigen::Index>(L) &&
                      dH.cols() == 2 * H,
                  "encode_backward dH shape");

    Vec dsummary = Vec::Zero(2 * H);
    auto bridge_back = [&](Parameter& W, Parameter& b, const Vec& state,
                           const Vec& dstate) {
        Vec dpre = dstate.cwiseProduct(
            (1.0 - state.array().square()).matrix());
        W.grad.noalias() += dpre * cache.summary.transpose();
        b.grad.col(0) += dpre;
        dsummary.noalias() += W.value.transpose() * dpre;
    };
    bridge_back(p.bridge_h1_W, p.bridge_h1_b, cache.h1_0, dh1_0);
    bridge_back(p.bridge_c1_W, p.bridge_c1_b, cache.c1_0, dc1_0);
    bridge_back(p.bridge_h2_W, p.bridge_h2_b, cache.h2_0, dh2_0);
    bridge_back(p.bridge_c2_W, p.bridge_c2_b, cache.c2_0, dc2_0);

    Vec dh = Vec::Zero(H), dc = Vec::Zero(H);
    for (size_t t = L; t-- > 0;) {
        dh += dH.row(t).head(H).transpose();
        if (t == L - 1) dh += dsummary.head(H);
        LstmGrad g = lstm_backward(p.enc_fwd_W, p.enc_fwd_b, cache.fwd[t], dh, dc);
        p.embed.grad.row(cache.ids[t]) += g.dx.transpose();
        dh = g.dh_prev;
        dc = g.dc_prev;
    }
    dh.setZero();
    dc.setZero();
    for (size_t j = L; j-- > 0;) {
        dh += dH.row(L - 1 - j).tail(H).transpose();
        if (j == L - 1) dh += dsummary.tail(H);
        LstmGrad g = lstm_backward(p.enc_bwd_W, p.enc_bwd_b, cache.bwd[j], dh, dc);
        p.embed.grad.row(cache.ids[L - 1 - j]) += g.dx.transpose();
        dh = g.dh_prev;
        dc = g.dc_prev;
    }
}

// ---------------------------------------------------------------------------
// One decoder step: two stacked LSTM layers, attention over the encoder
// states (optionally coverage-informed), a vocabulary distribution, and the
// copy-gate mixture over the extended id space.

struct DecodeStepCache {
    int embed_row = Vocabulary::kUnk;
    Vec x;                    // embedding actually fed (after dropout)
    Vec drop_x, drop_mid;     // dropout masks (ones at inference)
    LstmCache l1, l2;
    Vec s;                    // layer-2 hidden state
    Mat U;                    // L x H tanh activations of the attention net
    Vec a;                    // attention distribution over positions
    Vec cov_in;               // coverage before this step's update
    Vec cstar;                // context vector (2H)
    Vec P;                    // vocabulary distribution
    Real pcg = 0;             // copy-gate probability
    Vec Pstar;                // distribution over vocabulary + OOV slots
};

inline DecodeStepCache decode_step(const ModelParams& p, const Hyperparams& hp,
                                   const EncodeCache& enc,
                                   const ExtendedVocab& ext, int prev_ext_id,
                                   const Vec& h1, const Vec& c1, const Vec& h2,
                                   const Vec& c2, const Vec& cov, bool training,
                                   std::mt19937_64& rng) {
    const Eigen::Index H = p.hidden_dim;
    const Eigen::Index L = enc.H.rows();
    require_shape(cov.size() == L, "coverage length");
    require_shape(static_cast<Eigen::Index>(ext.ext_ids.size()) == L,
                  "extended ids misaligned with encoder positions");

    DecodeStepCache cache;
    cache.embed_row = (prev_ext_id >= 0 && prev_ext_id < p.vocab_size)
                          ? prev_ext_id
                          : Vocabulary::kUnk;
    Vec x_raw = p.embed.value.row(cache.embed_row).transpose();
    cache.drop_x = dropout_mask(p.embed_dim, hp.dropout, training, rng);
    cache.x = x_raw.cwiseProduct(cache.drop_x);

    cache.l1 = lstm_forward(p.dec1_W, p.dec1_b, cache.x, h1, c1);
    cache.drop_mid = dropout_mask(H, hp.dropout, training, rng);
    Vec mid = cache.l1.h.cwiseProduct(cache.drop_mid);
    cache.l2 = lstm_forward(p.dec2_W, p.dec2_b, mid, h2, c2);
    cache.s = cache.l2.h;
    cache.cov_in = cov;

    Vec base = p.att_Wsh.value * cache.s + p.att_b.value.col(0);
    Mat Upre = enc.H * p.att_Weh.value.transpose();
    Upre.rowwise() += base.transpose();
    if (hp.coverage_enabled)
        Upre.noalias() += cov * p.att_Wcv.value.col(0).transpose();
    cache.U = Upre.array().tanh().matrix();
    Vec e = cache.U * p.att_v.value.col(0);
    cache.a = softmax(e);
    cache.cstar = enc.H.transpose() * cache.a;

    Vec zcat(3 * H);
    zcat.head(H) = cache.s;
    zcat.tail(2 * H) = cache.cstar;
    Vec logits = p.out_W.value * zcat + p.out_b.value.col(0);
    cache.P = softmax(logits);

    cache.Pstar = Vec::Zero(ext.size());
    if (hp.copy_enabled) {
        Real pre = p.copy_wc.value.col(0).dot(cache.cstar) +
                   p.copy_ws.value.col(0).dot(cache.s) +
                   p.copy_wx.value.col(0).dot(cache.x) +
                   p.copy_b.value(0, 0);
        cache.pcg = sigmoid(pre);
        cache.Pstar.head(p.vocab_size) = (1.0 - cache.pcg) * cache.P;
        for (Eigen::Index i = 0; i < L; ++i)
            cache.Pstar[ext.ext_ids[i]] += cache.pcg * cache.a[i];
    } else {
        cache.pcg = 0.0;
        cache.Pstar.head(p.vocab_size) = cache.P;
    }
    if (!cache.Pstar.allFinite())
        throw NumericFault("decoder emitted a non-finite distribution");
    return cache;
}

// Gradients that flow from step t+1 (or from the loss) back into step t.
struct StepBackState {
    Vec dh1, dc1, dh2, dc2;
    Vec dcov;  // gradient w.r.t. this step's output coverage
};

inline StepBackState make_step_back_state(Eigen::Index hidden, Eigen::Index L) {
    StepBackState s;
    s.dh1 = Vec::Zero(hidden);
    s.dc1 = Vec::Zero(hidden);
    s.dh2 = Vec::Zero(hidden);
    s.dc2 = Vec::Zero(hidden);
    s.dcov = Vec::Zero(L);
    return s;
}

// cov_loss_w is the effective weight on sum_i min(a_i, cov_i) at this step
// (0 disables it); ties in the min go to the coverage side, matching a
// subgradient of the forward value.
inline StepBackState decode_step_backward(ModelParams& p, const Hyperparams& hp,
                                          const EncodeCache& enc,
                                          const ExtendedVocab& ext,
                                          const DecodeStepCache& cache,
                                          const Vec& dPstar,
                                          const StepBackState& from_future,
                                          Real cov_loss_w, Mat& dH_accum) {
    const Eigen::Index H = p.hidden_dim;
    const Eigen::Index L = enc.H.rows();
    require_shape(dPstar.size() == static_cast<Eigen::Index>(ext.size()),
                  "decode_step_backward dPstar length");

    Vec dP;
    Vec da = Vec::Zero(L);
    Real dpcg = 0;
    if (hp.copy_enabled) {
        dP = (1.0 - cache.pcg) * dPstar.head(p.vocab_size);
        dpcg = -cache.P.dot(dPstar.head(p.vocab_size));
        for (Eigen::Index i = 0; i < L; ++i) {
            Real dslot = dPstar[ext.ext_ids[i]];
            da[i] += cache.pcg * dslot;
            dpcg += cache.a[i] * dslot;
        }
    } else {
        dP = dPstar.head(p.vocab_size);
    }

    Vec dlogits = softmax_backward(cache.P, dP);
    Vec zcat(3 * H);
    zcat.head(H) = cache.s;
    zcat.tail(2 * H) = cache.cstar;
    p.out_W.grad.noalias() += dlogits * zcat.transpose();
    p.out_b.grad.col(0) += dlogits;
    Vec dzcat = p.out_W.value.transpose() * dlogits;
    Vec ds = dzcat.head(H);
    Vec dcstar = dzcat.tail(2 * H);

    Vec dx = Vec::Zero(p.embed_dim);
    if (hp.copy_enabled) {
        Real dpre = dpcg * cache.pcg * (1.0 - cache.pcg);
        p.copy_wc.grad.col(0) += dpre * cache.cstar;
        p.copy_ws.grad.col(0) += dpre * cache.s;
        p.copy_wx.grad.col(0) += dpre * cache.x;
        p.copy_b.grad(0, 0) += dpre;
        dcstar += dpre * p.copy_wc.value.col(0);
        ds += dpre * p.copy_ws.value.col(0);
        dx += dpre * p.copy_wx.value.col(0);
    }

    StepBackState out = make_step_back_state(H, L);
    if (cov_loss_w != 0.0) {
        for (Eigen::Index i = 0; i < L; ++i) {
            if (cache.a[i] < cache.cov_in[i])
                da[i] += cov_loss_w;
            else
                out.dcov[i] += cov_loss_w;
        }
    }
    // coverage recurrence cov_out = cov_in + a
    da += from_future.dcov;
    out.dcov += from_future.dcov;

    da.noalias() += enc.H * dcstar;
    dH_accum.noalias() += cache.a * dcstar.transpose();
    Vec de = softmax_backward(cache.a, da);
    p.att_v.grad.col(0).noalias() += cache.U.transpose() * de;
    Mat dU = de * p.att_v.value.col(0).transpose();
    Mat dUpre = dU.cwiseProduct((1.0 - cache.U.array().square()).matrix());
    p.att_Weh.grad.noalias() += dUpre.transpose() * enc.H;
    dH_accum.noalias() += dUpre * p.att_Weh.value;
    Vec dbase = dUpre.colwise().sum().transpose();
    p.att_Wsh.grad.noalias() += dbase * cache.s.transpose();
    p.att_b.grad.col(0) += dbase;
    ds.noalias() += p.att_Wsh.value.transpose() * dbase;
    if (hp.coverage_enabled) {
        p.att_Wcv.grad.col(0).noalias() += dUpre.transpose() * cache.cov_in;
        out.dcov.noalias() += dUpre * p.att_Wcv.value.col(0);
    }

    ds += from_future.dh2;
    LstmGrad g2 = lstm_backward(p.dec2_W, p.dec2_b, cache.l2, ds, from_future.dc2);
    Vec dh1 = g2.dx.cwiseProduct(cache.drop_mid) + from_future.dh1;
    LstmGrad g1 = lstm_backward(p.dec1_W, p.dec1_b, cache.l1, dh1, from_future.dc1);
    dx += g1.dx;
    Vec dx_raw = dx.cwiseProduct(cache.drop_x);
    p.embed.grad.row(cache.embed_row) += dx_raw.transpose();

    out.dh1 = g1.dh_prev;
    out.dc1 = g1.dc_prev;
    out.dh2 = g2.dh_prev;
    out.dc2 = g2.dc_prev;
    return out;
}

// ---------------------------------------------------------------------------
// Teacher-forced training loss for one example.

struct TrainingExample {
    std::vector<std::string> input_tokens;
    std::vector<std::string> gold_tokens;
};

struct ExampleForward {
    ModelInput input;
    EncodeCache enc;
    ExtendedVocab ext;
    std::vector<int> dec_inputs;  // vocabulary ids fed at each step
    std::vector<int> gold_ext;    // extended ids scored at each step
    std::vector<DecodeStepCache> steps;
    Real nll = 0, cov_loss = 0;

    Real total() const { return nll + cov_loss; }
};

inline ExampleForward example_forward(const ModelParams& p,
                                      const Hyperparams& hp,
                                      const Vocabulary& vocab,
                                      const TrainingExample& example,
                                      bool training, std::mt19937_64& rng) {
    ExampleForward out;
    out.input = prepare_input(vocab, example.input_tokens, hp.enc_max_len);
    out.enc = encode(p, out.input.ids, hp.enc_max_len);
    // encode applied the same strip/truncate rules, so positions line up
    out.ext = make_extended(vocab, out.input);

    const std::vector<std::string>& gold = example.gold_tokens;
    size_t T = std::min(gold.size() + 1, hp.dec_max_len);
    const Eigen::Index L = out.enc.H.rows();

    Vec h1 = out.enc.h1_0, c1 = out.enc.c1_0;
    Vec h2 = out.enc.h2_0, c2 = out.enc.c2_0;
    Vec cov = Vec::Zero(L);
    Real cov_w = (hp.coverage_enabled ? hp.coverage_weight : 0.0);
    for (size_t t = 0; t < T; ++t) {
        int prev = t == 0 ? Vocabulary::kStart
                          : vocab.id_of(gold[t - 1]);
        out.dec_inputs.push_back(prev);
        DecodeStepCache step = decode_step(p, hp, out.enc, out.ext, prev, h1,
                                           c1, h2, c2, cov, training, rng);
        int target;
        if (t == gold.size()) {
            target = Vocabulary::kEnd;
        } else {
            int id = vocab.id_of(gold[t]);
            if (id != Vocabulary::kUnk) {
                target = id;
            } else {
                int ext_id = out.ext.oov_ext_id(gold[t]);
                // copy mass is the only signal for OOV golds; fall back to
                // UNK when the token is absent from the input or unreachable
                if (hp.copy_enabled && ext_id >= 0 && step.Pstar[ext_id] > 0.0)
                    target = ext_id;
                else
                    target = Vocabulary::kUnk;
            }
        }
        out.gold_ext.push_back(target);
        out.nll += -std::log(std::max(step.Pstar[target], Real(1e-12)));
        if (cov_w != 0.0)
            out.cov_loss += cov_w * step.a.cwiseMin(cov).sum();

        h1 = step.l1.h;
        c1 = step.l1.c;
        h2 = step.l2.h;
        c2 = step.l2.c;
        cov += step.a;
        out.steps.push_back(std::move(step));
    }
    out.nll /= static_cast<Real>(T);
    return out;
}

// Accumulates scale * d(example loss)/d(params) into the gradients.
inline void example_backward(ModelParams& p, const Hyperparams& hp,
                             const ExampleForward& ex, Real scale) {
    const size_t T = ex.steps.size();
    const Eigen::Index L = ex.enc.H.rows();
    Mat dH = Mat::Zero(L, 2 * p.hidden_dim);
    StepBackState carry = make_step_back_state(p.hidden_dim, L);
    Real cov_w = (hp.coverage_enabled ? hp.coverage_weight * scale : 0.0);
    for (size_t t = T; t-- > 0;) {
        const DecodeStepCache& step = ex.steps[t];
        Vec dPstar = Vec::Zero(ex.ext.size());
        int g = ex.gold_ext[t];
        Real pval = step.Pstar[g];
        if (pval > 1e-12)
            dPstar[g] = -scale / (static_cast<Real>(T) * pval);
        carry = decode_step_backward(p, hp, ex.enc, ex.ext, step, dPstar,
                                     carry, cov_w, dH);
    }
    encode_backward(p, ex.enc, dH, carry.dh1, carry.dc1, carry.dh2, carry.dc2);
}

// ---------------------------------------------------------------------------
// Beam search. Hypotheses are ranked by length-normalized log-probability;
// emitting END finalizes a hypothesis and frees no slot (the live width
// shrinks as hypotheses finish).

struct GenerationResult {
    std::vector<std::string> tokens;  // END stripped; UNKs still literal
    std::vector<int> ext_ids;
    std::vector<Vec> attentions;      // one per emitted token
    Real score = 0;                   // normalized log-probability
};

namespace detail {

struct BeamHyp {
    std::vector<int> ext_ids;
    std::vector<Vec> atts;
    Vec h1, c1, h2, c2, cov;
    Real cum = 0;
    bool done = false;
    long done_order = std::numeric_limits<long>::max();
};

}  // namespace detail

inline GenerationResult beam_search(const ModelParams& p,
                                    const Hyperparams& hp,
                                    const Vocabulary& vocab,
                                    const std::vector<std::string>& input_tokens,
                                    size_t beam_k, size_t dec_max_len) {
    if (beam_k < 1) throw ConfigError("beam width must be at least 1");
    ModelInput input = prepare_input(vocab, input_tokens, hp.enc_max_len);
    EncodeCache enc = encode(p, input.ids, hp.enc_max_len);
    ExtendedVocab ext = make_extended(vocab, input);
    const Eigen::Index L = enc.H.rows();
    std::mt19937_64 rng(0);  // inference path draws nothing

    std::vector<detail::BeamHyp> live(1), done;
    live[0].h1 = enc.h1_0;
    live[0].c1 = enc.c1_0;
    live[0].h2 = enc.h2_0;
    live[0].c2 = enc.c2_0;
    live[0].cov = Vec::Zero(L);
    long done_counter = 0;

    struct Candidate {
        size_t parent;
        int token;
        Real cum;
    };

    for (size_t step = 0; step < dec_max_len && !live.empty(); ++step) {
        std::vector<DecodeStepCache> caches(live.size());
        std::vector<Candidate> cands;
        cands.reserve(live.size() * ext.size());
        for (size_t b = 0; b < live.size(); ++b) {
            int prev = live[b].ext_ids.empty() ? Vocabulary::kStart
                                               : live[b].ext_ids.back();
            caches[b] = decode_step(p, hp, enc, ext, prev, live[b].h1,
                                    live[b].c1, live[b].h2, live[b].c2,
                                    live[b].cov, false, rng);
            for (size_t w = 0; w < ext.size(); ++w) {
                Real logp =
                    std::log(std::max(caches[b].Pstar[w], Real(1e-12)));
                cands.push_back({b, static_cast<int>(w), live[b].cum + logp});
            }
        }
        size_t width = std::min(beam_k - done.size(), cands.size());
        std::partial_sort(cands.begin(), cands.begin() + width, cands.end(),
                          [](const Candidate& x, const Candidate& y) {
                              if (x.cum != y.cum) return x.cum > y.cum;
                              if (x.parent != y.parent)
                                  return x.parent < y.parent;
                              return x.token < y.token;
                          });
        std::vector<detail::BeamHyp> next;
        next.reserve(width);
        for (size_t ci = 0; ci < width; ++ci) {
            const Candidate& cand = cands[ci];
            detail::BeamHyp hyp = live[cand.parent];
            const DecodeStepCache& cache = caches[cand.parent];
            hyp.ext_ids.push_back(cand.token);
            hyp.atts.push_back(cache.a);
            hyp.cum = cand.cum;
            hyp.h1 = cache.l1.h;
            hyp.c1 = cache.l1.c;
            hyp.h2 = cache.l2.h;
            hyp.c2 = cache.l2.c;
            hyp.cov = cache.cov_in + cache.a;
            if (cand.token == Vocabulary::kEnd) {
                hyp.done = true;
                hyp.done_order = done_counter++;
                done.push_back(std::move(hyp));
            } else {
                next.push_back(std::move(hyp));
            }
        }
        live = std::move(next);
    }

    std::vector<detail::BeamHyp> pool = std::move(done);
    for (auto& h : live) pool.push_back(std::move(h));
    auto norm = [](const detail::BeamHyp& h) {
        return h.cum / static_cast<Real>(h.ext_ids.size());
    };
    const detail::BeamHyp* best = &pool.front();
    for (const auto& h : pool) {
        if (&h == best) continue;
        Real a = norm(h), b = norm(*best);
        bool wins;
        if (a != b)
            wins = a > b;
        else if (h.done_order != best->done_order)
            wins = h.done_order < best->done_order;
        else
            wins = h.ext_ids < best->ext_ids;
        if (wins) best = &h;
    }

    GenerationResult result;
    result.score = norm(*best);
    for (size_t i = 0; i < best->ext_ids.size(); ++i) {
        if (best->ext_ids[i] == Vocabulary::kEnd) break;
        result.ext_ids.push_back(best->ext_ids[i]);
        result.attentions.push_back(best->atts[i]);
        result.tokens.push_back(ext.token_of(vocab, best->ext_ids[i]));
    }
    return result;
}

// Replaces each emitted UNK with the input token under the argmax of that
// step's attention, skipping separator and padding positions.
inline std::vector<std::string> unk_replace(
    const std::vector<std::string>& tokens,
    const std::vector<Vec>& attentions,
    const std::vector<std::string>& input_tokens) {
    if (tokens.size() != attentions.size())
        throw ShapeError("attention history misaligned with output tokens");
    std::vector<std::string> out = tokens;
    for (size_t j = 0; j < out.size(); ++j) {
        if (out[j] != "[UNK]") continue;
        const Vec& a = attentions[j];
        if (a.size() != static_cast<Eigen::Index>(input_tokens.size()))
            throw ShapeError("attention length misaligned with input tokens");
        Eigen::Index best = -1;
        for (Eigen::Index i = 0; i < a.size(); ++i) {
            const std::string& tok = input_tokens[i];
            if (tok == "[SEP]" || tok == "[PAD]") continue;
            if (best < 0 || a[i] > a[best]) best = i;
        }
        if (best >= 0) out[j] = input_tokens[best];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training driver.

struct EpochMetrics {
    size_t epoch = 0;
    Real train_loss = 0;
    Real valid_loss = 0;
    Real valid_bleu4 = 0;  // percentage
};

struct TrainResult {
    ModelParams best;
    ModelParams last;
    std::vector<EpochMetrics> history;
    size_t best_epoch = 0;
    uint64_t steps = 0;
    bool aborted = false;
};

using TrainLogger = std::function<void(const nlohmann::json&)>;

inline std::vector<std::string> generate_tokens(
    const ModelParams& p, const Hyperparams& hp, const Vocabulary& vocab,
    const std::vector<std::string>& input_tokens, size_t beam_k) {
    GenerationResult gen =
        beam_search(p, hp, vocab, input_tokens, beam_k, hp.dec_max_len);
    ModelInput input = prepare_input(vocab, input_tokens, hp.enc_max_len);
    return unk_replace(gen.tokens, gen.attentions, input.tokens);
}

inline TrainResult train(const std::vector<TrainingExample>& train_set,
                         const std::vector<TrainingExample>& valid_set,
                         const Vocabulary& vocab, const Hyperparams& hp,
                         const TrainLogger& log = nullptr) {
    hp.validate();
    if (train_set.empty()) throw InsufficientData("training set is empty");

    std::mt19937_64 rng(hp.seed);
    TrainResult result;
    result.best = ModelParams::make(hp.embed_dim, hp.hidden_dim,
                                    static_cast<Eigen::Index>(vocab.size()));
    result.best.init(rng);
    result.last = result.best;
    ModelParams params = result.best;

    LrSchedule schedule{hp.base_lr, hp.warmup};
    std::vector<Parameter*> registry = params.all();
    uint64_t step = 0;
    Real best_bleu = -1.0;

    std::vector<size_t> order(train_set.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (size_t epoch = 1; epoch <= hp.epochs; ++epoch) {
        for (size_t i = order.size(); i-- > 1;) {
            size_t j = rng() % (i + 1);
            std::swap(order[i], order[j]);
        }
        Real epoch_loss = 0;
        size_t epoch_batches = 0;
        bool diverged = false;
        for (size_t start = 0; start < order.size() && !diverged;
             start += hp.batch) {
            size_t count = std::min(hp.batch, order.size() - start);
            Real scale = 1.0 / static_cast<Real>(count);
            Real batch_loss = 0;
            try {
                for (size_t k = 0; k < count; ++k) {
                    const TrainingExample& ex = train_set[order[start + k]];
                    ExampleForward fwd =
                        example_forward(params, hp, vocab, ex, true, rng);
                    batch_loss += scale * fwd.total();
                    example_backward(params, hp, fwd, scale);
                }
                if (!std::isfinite(batch_loss))
                    throw NumericFault("training loss diverged");
                clip_global_norm(registry, 5.0);
                adam_step(registry, ++step, schedule);
            } catch (const NumericFault&) {
                diverged = true;
                break;
            }
            epoch_loss += batch_loss;
            ++epoch_batches;
            if (log)
                log({{"event", "step"},
                     {"epoch", epoch},
                     {"step", step},
                     {"loss", batch_loss},
                     {"lr", schedule.lr(step)}});
        }
        if (diverged) {
            result.aborted = true;
            if (log) log({{"event", "abort"}, {"epoch", epoch}});
            break;
        }

        Real valid_loss = 0;
        Real valid_bleu = 0;
        if (!valid_set.empty()) {
            std::vector<TokenSeq> outputs, refs;
            for (const TrainingExample& ex : valid_set) {
                ExampleForward fwd =
                    example_forward(params, hp, vocab, ex, false, rng);
                valid_loss += fwd.total();
                outputs.push_back(generate_tokens(params, hp, vocab,
                                                  ex.input_tokens, hp.beam_k));
                refs.push_back(ex.gold_tokens);
            }
            valid_loss /= static_cast<Real>(valid_set.size());
            valid_bleu = evaluate(outputs, refs).bleu[3];
        }

        EpochMetrics metrics;
        metrics.epoch = epoch;
        metrics.train_loss =
            epoch_batches ? epoch_loss / static_cast<Real>(epoch_batches) : 0;
        metrics.valid_loss = valid_loss;
        metrics.valid_bleu4 = valid_bleu;
        result.history.push_back(metrics);
        if (log)
            log({{"event", "epoch"},
                 {"epoch", epoch},
                 {"train_loss", metrics.train_loss},
                 {"valid_loss", metrics.valid_loss},
                 {"valid_bleu4", metrics.valid_bleu4}});

        result.last = params;
        if (valid_bleu >= best_bleu) {  // later epochs win ties
            best_bleu = valid_bleu;
            result.best = params;
            result.best_epoch = epoch;
        }
    }
    result.steps = step;
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: a versioned named-tensor container holding parameter values
// and optimizer state, with the shape metadata and step counter in a JSON
// header. The vocabulary travels in its own sidecar file.

namespace detail {

constexpr char kCheckpointMagic[8] = {'N', 'T', 'C', 'K', '0', '0', '0', '1'};

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
void read_pod(std::istream& in, T& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw ConfigError("checkpoint file is truncated");
}

inline void write_mat(std::ostream& out, const Mat& m) {
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(sizeof(Real) * m.size()));
}

inline void read_mat(std::istream& in, Mat& m) {
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(Real) * m.size()));
    if (!in) throw ConfigError("checkpoint file is truncated");
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            const Hyperparams& hp, uint64_t step) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write checkpoint " + path);
    out.write(detail::kCheckpointMagic, sizeof detail::kCheckpointMagic);
    nlohmann::json meta = {{"embed_dim", params.embed_dim},
                           {"hidden_dim", params.hidden_dim},
                           {"vocab_size", params.vocab_size},
                           {"step", step},
                           {"hyperparams", hyperparams_to_json(hp)}};
    std::string meta_s = meta.dump();
    detail::write_pod(out, static_cast<uint64_t>(meta_s.size()));
    out.write(meta_s.data(), static_cast<std::streamsize>(meta_s.size()));

    auto tensors = params.all();
    detail::write_pod(out, static_cast<uint64_t>(tensors.size()));
    for (const Parameter* p : tensors) {
        detail::write_pod(out, static_cast<uint32_t>(p->name.size()));
        out.write(p->name.data(),
                  static_cast<std::streamsize>(p->name.size()));
        const char dtype[4] = {'f', '6', '4', '\0'};
        out.write(dtype, 4);
        detail::write_pod(out, static_cast<uint64_t>(p->value.rows()));
        detail::write_pod(out, static_cast<uint64_t>(p->value.cols()));
        detail::write_mat(out, p->value);
        detail::write_mat(out, p->adam_m);
        detail::write_mat(out, p->adam_v);
    }
    if (!out) throw ConfigError("failed writing checkpoint " + path);
}

inline ModelParams load_checkpoint(const std::string& path, Hyperparams& hp,
                                   uint64_t& step) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read checkpoint " + path);
    char magic[sizeof detail::kCheckpointMagic];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, detail::kCheckpointMagic, sizeof magic) != 0)
        throw ConfigError("not a recognized checkpoint: " + path);
    uint64_t meta_len = 0;
    detail::read_pod(in, meta_len);
    std::string meta_s(meta_len, '\0');
    in.read(meta_s.data(), static_cast<std::streamsize>(meta_len));
    if (!in) throw ConfigError("checkpoint file is truncated");
    nlohmann::json meta = nlohmann::json::parse(meta_s, nullptr, false);
    if (meta.is_discarded())
        throw ConfigError("checkpoint metadata is not valid JSON");
    hp = hyperparams_from_json(meta.at("hyperparams"));
    step = meta.at("step").get<uint64_t>();
    ModelParams params = ModelParams::make(
        meta.at("embed_dim").get<Eigen::Index>(),
        meta.at("hidden_dim").get<Eigen::Index>(),
        meta.at("vocab_size").get<Eigen::Index>());

    uint64_t count = 0;
    detail::read_pod(in, count);
    auto tensors = params.all();
    if (count != tensors.size())
        throw ConfigError("checkpoint tensor count mismatch");
    for (Parameter* p : tensors) {
        uint32_t name_len = 0;
        detail::read_pod(in, name_len);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        char dtype[4];
        in.read(dtype, 4);
        if (!in) throw ConfigError("checkpoint file is truncated");
        if (name != p->name)
            throw ConfigError("checkpoint tensor order mismatch: expected " +
                              p->name + ", found " + name);
        if (std::string(dtype, 3) != "f64")
            throw ConfigError("checkpoint dtype must be f64");
        uint64_t rows = 0, cols = 0;
        detail::read_pod(in, rows);
        detail::read_pod(in, cols);
        if (rows != static_cast<uint64_t>(p->value.rows()) ||
            cols != static_cast<uint64_t>(p->value.cols()))
            throw ConfigError("checkpoint tensor shape mismatch for " +
                              p->name);
        detail::read_mat(in, p->value);
        detail::read_mat(in, p->adam_m);
        detail::read_mat(in, p->adam_v);
    }
    return params;
}

}  // namespace evmdoc
