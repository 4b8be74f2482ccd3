// SPDX-License-Identifier: Apache-2.0
//
// dmimo-lab: edge-centric message-passing GNN mapping channel matrices to
// precoding matrices, trained unsupervised on the sum-rate objective with
// hand-derived gradients (no autodiff).
//
// Edge (m,k) carries an embedding; each layer computes
//   e' = LeakyReLU(W_self e + W_ap_agg mean_{k'!=k} e_{mk'}
//                           + W_ue_agg mean_{m'!=m} e_{m'k} + b)
// with the empty aggregation set mapped to the zero vector. A linear head
// maps the final embedding to (Re, Im) of the raw precoder, which is then
// normalized to the total power constraint.
//
// All reductions over edges use value-sorted summation so outputs are
// bit-identical under AP/UE permutations of the input.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmimo/channel.hpp"
#include "dmimo/errors.hpp"
#include "dmimo/numkit.hpp"
#include "dmimo/precoders.hpp"

namespace dmimo::gnn {

using numkit::CMatrix;
using numkit::cplx;
using numkit::RngStream;
using precoders::PrecodingMatrix;

// ---------------------------------------------------------------------------
// Model parameters
// ---------------------------------------------------------------------------

struct LayerParams {
    std::size_t in_dim = 0, out_dim = 0;
    // out_dim x in_dim, row-major
    std::vector<double> W_self, W_ap_agg, W_ue_agg;
    std::vector<double> b; // out_dim
};

struct HeadParams {
    std::size_t in_dim = 0;
    std::vector<double> W; // 2 x in_dim
    std::vector<double> b; // 2
};

struct GnnModel {
    std::size_t n_layers = 8;
    std::size_t hidden_dim = 64;
    double leaky_slope = 0.01;
    double input_scale = 1.0; // dataset-level channel normalization constant
    std::vector<LayerParams> layers;
    HeadParams head;

    static GnnModel init(std::size_t n_layers, std::size_t hidden_dim, double leaky_slope,
                         RngStream& rng) {
        if (n_layers < 1 || hidden_dim < 1)
            throw Error("GnnModel: need n_layers >= 1 and hidden_dim >= 1");
        GnnModel m;
        m.n_layers = n_layers;
        m.hidden_dim = hidden_dim;
        m.leaky_slope = leaky_slope;
        m.layers.resize(n_layers);
        for (std::size_t l = 0; l < n_layers; ++l) {
            auto& lp = m.layers[l];
            lp.in_dim = (l == 0) ? 2 : hidden_dim;
            lp.out_dim = hidden_dim;
            const double std_he = std::sqrt(2.0 / static_cast<double>(lp.in_dim));
            const std::size_t n = lp.out_dim * lp.in_dim;
            lp.W_self.resize(n);
            lp.W_ap_agg.resize(n);
            lp.W_ue_agg.resize(n);
            lp.b.assign(lp.out_dim, 0.0);
            for (auto& w : lp.W_self)
                w = std_he * rng.normal();
            for (auto& w : lp.W_ap_agg)
                w = std_he * rng.normal();
            for (auto& w : lp.W_ue_agg)
                w = std_he * rng.normal();
        }
        m.head.in_dim = hidden_dim;
        m.head.W.resize(2 * hidden_dim);
        m.head.b.assign(2, 0.0);
        for (auto& w : m.head.W)
            w = 1e-2 * rng.normal();
        return m;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& lp : layers)
            n += 3 * lp.out_dim * lp.in_dim + lp.out_dim;
        return n + head.W.size() + head.b.size();
    }
};

inline void flatten(const GnnModel& m, std::vector<double>& out) {
    out.clear();
    out.reserve(m.param_count());
    for (const auto& lp : m.layers) {
        out.insert(out.end(), lp.W_self.begin(), lp.W_self.end());
        out.insert(out.end(), lp.W_ap_agg.begin(), lp.W_ap_agg.end());
        out.insert(out.end(), lp.W_ue_agg.begin(), lp.W_ue_agg.end());
        out.insert(out.end(), lp.b.begin(), lp.b.end());
    }
    out.insert(out.end(), m.head.W.begin(), m.head.W.end());
    out.insert(out.end(), m.head.b.begin(), m.head.b.end());
}

inline void unflatten(GnnModel& m, const std::vector<double>& flat) {
    if (flat.size() != m.param_count())
        throw Error("unflatten: parameter vector size mismatch");
    std::size_t off = 0;
    auto take = [&](std::vector<double>& dst) {
        std::copy(flat.begin() + off, flat.begin() + off + dst.size(), dst.begin());
        off += dst.size();
    };
    for (auto& lp : m.layers) {
        take(lp.W_self);
        take(lp.W_ap_agg);
        take(lp.W_ue_agg);
        take(lp.b);
    }
    take(m.head.W);
    take(m.head.b);
}

// One (offset, length) range per freezable unit: each layer, then the head.
inline std::vector<std::pair<std::size_t, std::size_t>> block_ranges(const GnnModel& m) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    std::size_t off = 0;
    for (const auto& lp : m.layers) {
        const std::size_t len = 3 * lp.out_dim * lp.in_dim + lp.out_dim;
        out.emplace_back(off, len);
        off += len;
    }
    out.emplace_back(off, m.head.W.size() + m.head.b.size());
    return out;
}

inline bool identical(const GnnModel& a, const GnnModel& b) {
    if (a.n_layers != b.n_layers || a.hidden_dim != b.hidden_dim)
        return false;
    std::vector<double> fa, fb;
    flatten(a, fa);
    flatten(b, fb);
    return fa == fb && a.input_scale == b.input_scale && a.leaky_slope == b.leaky_slope;
}

// ---------------------------------------------------------------------------
// Dense helpers on flat row-major buffers
// ---------------------------------------------------------------------------

namespace detail {

// C (n x p) += A (n x d) * B^T, B given as p x d
inline void add_gemm_abt(double* C, const double* A, const double* B, std::size_t n,
                         std::size_t d, std::size_t p) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* a = A + i * d;
        double* c = C + i * p;
        for (std::size_t j = 0; j < p; ++j) {
            const double* brow = B + j * d;
            double s = 0.0;
            for (std::size_t t = 0; t < d; ++t)
                s += a[t] * brow[t];
            c[j] += s;
        }
    }
}

// C (n x d) += A (n x p) * B, B given as p x d
inline void add_gemm_ab(double* C, const double* A, const double* B, std::size_t n,
                        std::size_t p, std::size_t d) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* a = A + i * p;
        double* c = C + i * d;
        for (std::size_t j = 0; j < p; ++j) {
            const double coef = a[j];
            const double* brow = B + j * d;
            for (std::size_t t = 0; t < d; ++t)
                c[t] += coef * brow[t];
        }
    }
}

// C (p x d) += A^T * B with A (n x p), B (n x d)
inline void add_gemm_atb(double* C, const double* A, const double* B, std::size_t n,
                         std::size_t p, std::size_t d) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* a = A + i * p;
        const double* brow = B + i * d;
        for (std::size_t j = 0; j < p; ++j) {
            const double coef = a[j];
            double* c = C + j * d;
            for (std::size_t t = 0; t < d; ++t)
                c[t] += coef * brow[t];
        }
    }
}

// Permutation-stable small sum: insertion sort then accumulate ascending.
inline double sorted_sum_small(double* buf, std::size_t n) {
    for (std::size_t i = 1; i < n; ++i) {
        const double key = buf[i];
        std::size_t j = i;
        while (j > 0 && buf[j - 1] > key) {
            buf[j] = buf[j - 1];
            --j;
        }
        buf[j] = key;
    }
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        s += buf[i];
    return s;
}

// Exclusive mean over the K edges sharing an AP: out[(m,k),:] =
// mean_{k'!=k} E[(m,k'),:], zero when K == 1. `add` accumulates instead of
// overwriting (used for the adjoint, which has the same structure).
inline void agg_over_ues(const double* E, double* out, std::size_t M, std::size_t K,
                         std::size_t dim, bool add) {
    if (K == 1) {
        if (!add)
            std::fill(out, out + M * K * dim, 0.0);
        return;
    }
    const double inv = 1.0 / static_cast<double>(K - 1);
    std::vector<double> buf(K), tmp(K);
    for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t d = 0; d < dim; ++d) {
            for (std::size_t k = 0; k < K; ++k)
                buf[k] = E[(m * K + k) * dim + d];
            tmp = buf;
            const double total = sorted_sum_small(tmp.data(), K);
            for (std::size_t k = 0; k < K; ++k) {
                const double v = (total - buf[k]) * inv;
                double* o = out + (m * K + k) * dim + d;
                if (add)
                    *o += v;
                else
                    *o = v;
            }
        }
    }
}

// Exclusive mean over the M edges sharing a UE.
inline void agg_over_aps(const double* E, double* out, std::size_t M, std::size_t K,
                         std::size_t dim, bool add) {
    if (M == 1) {
        if (!add)
            std::fill(out, out + M * K * dim, 0.0);
        return;
    }
    const double inv = 1.0 / static_cast<double>(M - 1);
    std::vector<double> buf(M), tmp(M);
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t d = 0; d < dim; ++d) {
            for (std::size_t m = 0; m < M; ++m)
                buf[m] = E[(m * K + k) * dim + d];
            tmp = buf;
            const double total = sorted_sum_small(tmp.data(), M);
            for (std::size_t m = 0; m < M; ++m) {
                const double v = (total - buf[m]) * inv;
                double* o = out + (m * K + k) * dim + d;
                if (add)
                    *o += v;
                else
                    *o = v;
            }
        }
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct ForwardCache {
    std::size_t M = 0, K = 0;
    // E[0] is the scaled input (MK x 2); E[l] the post-activation of layer l.
    std::vector<std::vector<double>> E;
    std::vector<std::vector<double>> Z;    // pre-activations per layer
    std::vector<std::vector<double>> Aap;  // AP-side aggregate fed to layer l
    std::vector<std::vector<double>> Aue;  // UE-side aggregate fed to layer l
    std::vector<double> U;                 // head output, MK x 2
    std::vector<cplx> W_raw;
    double raw_norm2 = 0.0;
};

inline PrecodingMatrix forward(const GnnModel& model, const CMatrix& H, double P,
                               ForwardCache* cache = nullptr) {
    const std::size_t M = H.rows(), K = H.cols();
    if (M < 1 || K < 1)
        throw Error("gnn::forward: empty channel matrix");
    if (!H.all_finite())
        throw Error("gnn::forward: channel matrix has non-finite entries");
    const std::size_t E = M * K;
    const std::size_t D = model.hidden_dim;

    ForwardCache local;
    ForwardCache& c = cache ? *cache : local;
    c.M = M;
    c.K = K;
    // Outer vectors are resized only on shape changes so repeated calls with
    // one cache reuse the inner buffers.
    if (c.E.size() != model.n_layers + 1) {
        c.E.resize(model.n_layers + 1);
        c.Z.resize(model.n_layers);
        c.Aap.resize(model.n_layers);
        c.Aue.resize(model.n_layers);
    }

    c.E[0].resize(E * 2);
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t k = 0; k < K; ++k) {
            const std::size_t e = m * K + k;
            c.E[0][e * 2 + 0] = model.input_scale * H(m, k).real();
            c.E[0][e * 2 + 1] = model.input_scale * H(m, k).imag();
        }

    for (std::size_t l = 0; l < model.n_layers; ++l) {
        const auto& lp = model.layers[l];
        const std::size_t din = lp.in_dim, dout = lp.out_dim;
        const auto& X = c.E[l];
        auto& Aap = c.Aap[l];
        auto& Aue = c.Aue[l];
        Aap.resize(E * din);
        Aue.resize(E * din);
        detail::agg_over_ues(X.data(), Aap.data(), M, K, din, false);
        detail::agg_over_aps(X.data(), Aue.data(), M, K, din, false);

        auto& Z = c.Z[l];
        Z.resize(E * dout);
        for (std::size_t e = 0; e < E; ++e)
            std::copy(lp.b.begin(), lp.b.end(), Z.begin() + e * dout);
        detail::add_gemm_abt(Z.data(), X.data(), lp.W_self.data(), E, din, dout);
        detail::add_gemm_abt(Z.data(), Aap.data(), lp.W_ap_agg.data(), E, din, dout);
        detail::add_gemm_abt(Z.data(), Aue.data(), lp.W_ue_agg.data(), E, din, dout);

        auto& Y = c.E[l + 1];
        Y.resize(E * dout);
        const double slope = model.leaky_slope;
        for (std::size_t i = 0; i < Z.size(); ++i)
            Y[i] = Z[i] > 0.0 ? Z[i] : slope * Z[i];
    }

    c.U.assign(E * 2, 0.0);
    for (std::size_t e = 0; e < E; ++e) {
        c.U[e * 2 + 0] = model.head.b[0];
        c.U[e * 2 + 1] = model.head.b[1];
    }
    detail::add_gemm_abt(c.U.data(), c.E[model.n_layers].data(), model.head.W.data(), E, D, 2);

    c.W_raw.resize(E);
    std::vector<double> sq(E);
    for (std::size_t e = 0; e < E; ++e) {
        c.W_raw[e] = cplx{c.U[e * 2 + 0], c.U[e * 2 + 1]};
        sq[e] = std::norm(c.W_raw[e]);
    }
    c.raw_norm2 = numkit::sum_sorted(std::move(sq));
    if (!(c.raw_norm2 > 0.0))
        throw ZeroChannel("gnn::forward: degenerate head produced a zero precoder");

    const double scale = std::sqrt(P / c.raw_norm2);
    CMatrix W(M, K);
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t k = 0; k < K; ++k)
            W(m, k) = c.W_raw[m * K + k] * scale;
    return PrecodingMatrix{std::move(W), P};
}

// ---------------------------------------------------------------------------
// Loss and exact gradients
// ---------------------------------------------------------------------------

struct LossGrad {
    double loss = 0.0;           // -(1/B) sum_b sum_rate in bits/channel use
    std::vector<double> grad;    // same layout as flatten()
};

namespace detail {

struct GradAccum {
    // Same block layout as flatten(); filled by backward().
    std::vector<double> g;
};

// Gradient of r_nats = sum_k ln(1 + SINR_k) with respect to W (complex,
// d/dRe + j d/dIm), for the normalized precoder W.
inline std::vector<cplx> sumrate_grad_wrt_w(const CMatrix& H, const CMatrix& W, double sigma2,
                                            double* r_nats_out) {
    const std::size_t M = H.rows(), K = H.cols();
    std::vector<cplx> C(K * K);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t l = 0; l < K; ++l) {
            cplx s{0.0, 0.0};
            for (std::size_t m = 0; m < M; ++m)
                s += H(m, k) * W(m, l);
            C[k * K + l] = s;
        }
    double r_nats = 0.0;
    std::vector<cplx> GC(K * K);
    for (std::size_t k = 0; k < K; ++k) {
        const double S = std::norm(C[k * K + k]);
        double I = sigma2;
        for (std::size_t l = 0; l < K; ++l)
            if (l != k)
                I += std::norm(C[k * K + l]);
        r_nats += std::log(S + I) - std::log(I);
        const double mu_sig = 1.0 / (S + I);
        const double mu_int = mu_sig - 1.0 / I;
        for (std::size_t l = 0; l < K; ++l)
            GC[k * K + l] = 2.0 * (l == k ? mu_sig : mu_int) * C[k * K + l];
    }
    if (r_nats_out)
        *r_nats_out = r_nats;
    // GW = conj(H) * GC
    std::vector<cplx> GW(M * K, cplx{0.0, 0.0});
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t k = 0; k < K; ++k) {
            const cplx hc = std::conj(H(m, k));
            for (std::size_t l = 0; l < K; ++l)
                GW[m * K + l] += hc * GC[k * K + l];
        }
    return GW;
}

// Backpropagates d(r_nats)/dW through normalization, head and layers,
// accumulating parameter gradients (of +r_nats) into acc.
inline void backward(const GnnModel& model, const ForwardCache& c, const std::vector<cplx>& GW,
                     double P, GradAccum& acc) {
    const std::size_t M = c.M, K = c.K, E = M * K;
    const std::size_t D = model.hidden_dim;

    // Through W = sqrt(P) W_raw / n:  G_raw = s/n (GW - W_raw Re<W_raw,GW>/n^2)
    const double n2 = c.raw_norm2;
    const double n = std::sqrt(n2);
    const double s = std::sqrt(P);
    double ip = 0.0;
    for (std::size_t e = 0; e < E; ++e) {
        ip += c.W_raw[e].real() * GW[e].real() + c.W_raw[e].imag() * GW[e].imag();
    }
    std::vector<double> dU(E * 2);
    for (std::size_t e = 0; e < E; ++e) {
        const cplx g = (s / n) * (GW[e] - c.W_raw[e] * (ip / n2));
        dU[e * 2 + 0] = g.real();
        dU[e * 2 + 1] = g.imag();
    }

    // Head gradients and dE for the last layer.
    auto ranges = block_ranges(model);
    const std::size_t head_off = ranges.back().first;
    detail::add_gemm_atb(acc.g.data() + head_off, dU.data(), c.E[model.n_layers].data(), E, 2, D);
    double* dbh = acc.g.data() + head_off + 2 * D;
    for (std::size_t e = 0; e < E; ++e) {
        dbh[0] += dU[e * 2 + 0];
        dbh[1] += dU[e * 2 + 1];
    }
    std::vector<double> dE(E * D, 0.0);
    detail::add_gemm_ab(dE.data(), dU.data(), model.head.W.data(), E, 2, D);

    std::vector<double> dZ, dXprev, tmp;
    for (std::size_t li = model.n_layers; li-- > 0;) {
        const auto& lp = model.layers[li];
        const std::size_t din = lp.in_dim, dout = lp.out_dim;
        const auto& Z = c.Z[li];

        dZ.assign(E * dout, 0.0);
        const double slope = model.leaky_slope;
        for (std::size_t i = 0; i < dZ.size(); ++i)
            dZ[i] = dE[i] * (Z[i] > 0.0 ? 1.0 : slope);

        const std::size_t off = ranges[li].first;
        const std::size_t nmat = dout * din;
        double* gself = acc.g.data() + off;
        double* gap = gself + nmat;
        double* gue = gap + nmat;
        double* gb = gue + nmat;
        detail::add_gemm_atb(gself, dZ.data(), c.E[li].data(), E, dout, din);
        detail::add_gemm_atb(gap, dZ.data(), c.Aap[li].data(), E, dout, din);
        detail::add_gemm_atb(gue, dZ.data(), c.Aue[li].data(), E, dout, din);
        for (std::size_t e = 0; e < E; ++e)
            for (std::size_t o = 0; o < dout; ++o)
                gb[o] += dZ[e * dout + o];

        if (li == 0)
            break; // input features carry no trainable parameters

        dXprev.assign(E * din, 0.0);
        detail::add_gemm_ab(dXprev.data(), dZ.data(), lp.W_self.data(), E, dout, din);
        // Adjoint of the exclusive means: same exclusive-mean structure
        // applied to the backpropagated aggregate signal.
        tmp.assign(E * din, 0.0);
        detail::add_gemm_ab(tmp.data(), dZ.data(), lp.W_ap_agg.data(), E, dout, din);
        detail::agg_over_ues(tmp.data(), dXprev.data(), M, K, din, true);
        tmp.assign(E * din, 0.0);
        detail::add_gemm_ab(tmp.data(), dZ.data(), lp.W_ue_agg.data(), E, dout, din);
        detail::agg_over_aps(tmp.data(), dXprev.data(), M, K, din, true);
        dE.swap(dXprev);
    }
}

} // namespace detail

// Loss over a batch: -(1/B) sum_b sum_rate(H_b, forward(H_b), sigma2) in
// bits/channel use, with exact gradients for every parameter block.
inline LossGrad loss_and_grad(const GnnModel& model, const std::vector<const CMatrix*>& batch,
                              double P, double sigma2) {
    if (batch.empty())
        throw Error("loss_and_grad: empty batch");
    if (!(sigma2 > 0.0))
        throw Error("loss_and_grad: noise power must be positive");
    detail::GradAccum acc;
    acc.g.assign(model.param_count(), 0.0);
    double total_nats = 0.0;
    ForwardCache cache;
    for (const CMatrix* H : batch) {
        const PrecodingMatrix W = forward(model, *H, P, &cache);
        double r_nats = 0.0;
        std::vector<cplx> GW = detail::sumrate_grad_wrt_w(*H, W.W, sigma2, &r_nats);
        total_nats += r_nats;
        detail::backward(model, cache, GW, P, acc);
    }
    const double scale = -1.0 / (static_cast<double>(batch.size()) * std::log(2.0));
    LossGrad out;
    out.loss = scale * total_nats;
    out.grad = std::move(acc.g);
    for (auto& g : out.grad)
        g *= scale;
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    double learning_rate = 1e-3;
    std::uint64_t seed = 1;
    std::size_t n_train = 0; // 0 = use the whole training split
    std::vector<bool> freeze_mask; // n_layers + 1 flags (head last); empty = none
    double power = 1.0;
    double sigma2 = 1.0;

    void validate() const {
        if (epochs < 1)
            throw ConfigError("TrainConfig: epochs must be >= 1");
        if (batch_size < 1)
            throw ConfigError("TrainConfig: batch_size must be >= 1");
        if (!(learning_rate > 0.0))
            throw ConfigError("TrainConfig: learning_rate must be positive");
    }
};

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_sumrate = 0.0;
};

struct TrainResult {
    GnnModel model;
    std::vector<EpochLog> log;
    double initial_val_sumrate = 0.0;
    double best_val_sumrate = 0.0;
    std::size_t best_epoch = 0; // 0 = untrained model was never beaten
    bool all_frozen_warning = false;
};

inline double mean_sum_rate(const GnnModel& model, const std::vector<const CMatrix*>& set,
                            double P, double sigma2) {
    double acc = 0.0;
    for (const CMatrix* H : set)
        acc += precoders::sum_rate(*H, forward(model, *H, P), precoders::NoiseModel{sigma2});
    return acc / static_cast<double>(set.size());
}

namespace detail {

inline std::vector<const CMatrix*> channel_view(const std::vector<const channel::Sample*>& v) {
    std::vector<const CMatrix*> out;
    out.reserve(v.size());
    for (const auto* s : v)
        out.push_back(&s->ch.H);
    return out;
}

inline TrainResult train_impl(const GnnModel& start, const channel::ChannelDataset& ds,
                              const TrainConfig& cfg, bool compute_input_scale) {
    cfg.validate();
    auto train_set = detail::channel_view(ds.split_view(channel::Split::Train));
    auto val_set = detail::channel_view(ds.split_view(channel::Split::Val));
    if (train_set.empty())
        throw Error("train: empty training split");
    if (val_set.empty())
        throw Error("train: empty validation split");
    if (!cfg.freeze_mask.empty() && cfg.freeze_mask.size() != start.n_layers + 1)
        throw ConfigError("train: freeze_mask must have n_layers + 1 entries");

    TrainResult res;
    res.model = start;

    if (!cfg.freeze_mask.empty()) {
        bool all_frozen = true;
        for (bool f : cfg.freeze_mask)
            all_frozen = all_frozen && f;
        if (all_frozen) {
            std::fprintf(stderr, "gnn::train: warning: all layers frozen, returning model unchanged\n");
            res.all_frozen_warning = true;
            return res;
        }
    }

    RngStream rng(cfg.seed);

    if (cfg.n_train > 0 && cfg.n_train < train_set.size()) {
        std::vector<std::size_t> idx(train_set.size());
        for (std::size_t i = 0; i < idx.size(); ++i)
            idx[i] = i;
        RngStream sub = rng.substream("subset");
        sub.shuffle(idx);
        std::vector<const CMatrix*> picked;
        picked.reserve(cfg.n_train);
        for (std::size_t i = 0; i < cfg.n_train; ++i)
            picked.push_back(train_set[idx[i]]);
        train_set.swap(picked);
    }

    if (compute_input_scale) {
        double acc = 0.0;
        std::size_t n = 0;
        for (const CMatrix* H : train_set) {
            for (const auto& z : H->data())
                acc += std::norm(z);
            n += H->data().size();
        }
        const double rms = std::sqrt(acc / static_cast<double>(n));
        if (!(rms > 0.0))
            throw Error("train: training split has all-zero channels");
        res.model.input_scale = 1.0 / rms;
    }

    std::vector<double> flat;
    flatten(res.model, flat);
    const std::vector<double> initial_flat = flat;
    numkit::AdamState adam(flat.size(), cfg.learning_rate);
    const auto ranges = block_ranges(res.model);

    res.initial_val_sumrate = mean_sum_rate(res.model, val_set, cfg.power, cfg.sigma2);
    res.best_val_sumrate = res.initial_val_sumrate;
    res.best_epoch = 0;
    GnnModel best = res.model;

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;
    RngStream shuffle_rng = rng.substream("shuffle");

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        RngStream ep_rng = shuffle_rng.substream(epoch);
        ep_rng.shuffle(order);

        double loss_weighted = 0.0;
        std::size_t seen = 0;
        for (std::size_t pos = 0; pos < order.size(); pos += cfg.batch_size) {
            const std::size_t end = std::min(pos + cfg.batch_size, order.size());
            std::vector<const CMatrix*> batch;
            batch.reserve(end - pos);
            for (std::size_t i = pos; i < end; ++i)
                batch.push_back(train_set[order[i]]);
            LossGrad lg = loss_and_grad(res.model, batch, cfg.power, cfg.sigma2);
            loss_weighted += lg.loss * static_cast<double>(batch.size());
            seen += batch.size();
            if (!cfg.freeze_mask.empty())
                for (std::size_t bi = 0; bi < cfg.freeze_mask.size(); ++bi)
                    if (cfg.freeze_mask[bi])
                        std::fill(lg.grad.begin() + ranges[bi].first,
                                  lg.grad.begin() + ranges[bi].first + ranges[bi].second, 0.0);
            numkit::adam_step(adam, flat, lg.grad);
            if (!cfg.freeze_mask.empty())
                for (std::size_t bi = 0; bi < cfg.freeze_mask.size(); ++bi)
                    if (cfg.freeze_mask[bi])
                        std::copy(initial_flat.begin() + ranges[bi].first,
                                  initial_flat.begin() + ranges[bi].first + ranges[bi].second,
                                  flat.begin() + ranges[bi].first);
            unflatten(res.model, flat);
        }

        EpochLog el;
        el.epoch = epoch;
        el.train_loss = loss_weighted / static_cast<double>(seen);
        el.val_sumrate = mean_sum_rate(res.model, val_set, cfg.power, cfg.sigma2);
        res.log.push_back(el);
        if (el.val_sumrate > res.best_val_sumrate) {
            res.best_val_sumrate = el.val_sumrate;
            res.best_epoch = epoch;
            best = res.model;
        }
    }

    res.model = std::move(best);
    return res;
}

} // namespace detail

// Unsupervised training on the dataset's train split with validation-based
// checkpointing; returns the best-validation model. The input normalization
// constant is computed from the training split unless already trained in.
inline TrainResult train(const GnnModel& start, const channel::ChannelDataset& ds,
                         const TrainConfig& cfg) {
    return detail::train_impl(start, ds, cfg, /*compute_input_scale=*/true);
}

// Domain adaptation with partial freezing: frozen blocks stay bit-identical,
// the pretrained input scale is kept.
inline TrainResult fine_tune(const GnnModel& pretrained, const channel::ChannelDataset& ds,
                             const TrainConfig& cfg) {
    if (cfg.freeze_mask.empty())
        throw ConfigError("fine_tune: freeze_mask must be set");
    return detail::train_impl(pretrained, ds, cfg, /*compute_input_scale=*/false);
}

// Freeze message-passing layers [0, n_frozen) and tune the rest plus head.
inline std::vector<bool> default_freeze_mask(std::size_t n_layers, std::size_t n_frozen) {
    std::vector<bool> mask(n_layers + 1, false);
    for (std::size_t i = 0; i < std::min(n_frozen, n_layers); ++i)
        mask[i] = true;
    return mask;
}

// ---------------------------------------------------------------------------
// Serialization (versioned JSON, >= 17 significant digits)
// ---------------------------------------------------------------------------

namespace detail {

inline void append_double_17(std::string& out, double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out += buf;
}

inline void append_matrix(std::string& out, const std::vector<double>& a, std::size_t rows,
                          std::size_t cols) {
    out += '[';
    for (std::size_t r = 0; r < rows; ++r) {
        if (r)
            out += ',';
        out += '[';
        for (std::size_t c = 0; c < cols; ++c) {
            if (c)
                out += ',';
            append_double_17(out, a[r * cols + c]);
        }
        out += ']';
    }
    out += ']';
}

inline void append_vector(std::string& out, const std::vector<double>& a) {
    out += '[';
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (i)
            out += ',';
        append_double_17(out, a[i]);
    }
    out += ']';
}

inline std::vector<double> parse_matrix(const nlohmann::json& j, std::size_t rows,
                                        std::size_t cols, const std::string& what) {
    if (!j.is_array() || j.size() != rows)
        throw ParseError("load_model: " + what + ": expected " + std::to_string(rows) + " rows");
    std::vector<double> out;
    out.reserve(rows * cols);
    for (const auto& row : j) {
        if (!row.is_array() || row.size() != cols)
            throw ParseError("load_model: " + what + ": expected " + std::to_string(cols) +
                             " columns");
        for (const auto& v : row) {
            const double x = v.get<double>();
            if (!std::isfinite(x))
                throw ParseError("load_model: " + what + ": non-finite entry");
            out.push_back(x);
        }
    }
    return out;
}

} // namespace detail

inline void save_model(const GnnModel& m, const std::string& path) {
    std::string out;
    out.reserve(m.param_count() * 22 + 512);
    out += "{\"format\":\"dmimo-gnn\",\"version\":1,\"n_layers\":";
    out += std::to_string(m.n_layers);
    out += ",\"hidden_dim\":";
    out += std::to_string(m.hidden_dim);
    out += ",\"leaky_slope\":";
    detail::append_double_17(out, m.leaky_slope);
    out += ",\"input_scale\":";
    detail::append_double_17(out, m.input_scale);
    out += ",\"layers\":[";
    for (std::size_t l = 0; l < m.n_layers; ++l) {
        const auto& lp = m.layers[l];
        if (l)
            out += ',';
        out += "{\"W_self\":";
        detail::append_matrix(out, lp.W_self, lp.out_dim, lp.in_dim);
        out += ",\"W_ap_agg\":";
        detail::append_matrix(out, lp.W_ap_agg, lp.out_dim, lp.in_dim);
        out += ",\"W_ue_agg\":";
        detail::append_matrix(out, lp.W_ue_agg, lp.out_dim, lp.in_dim);
        out += ",\"b\":";
        detail::append_vector(out, lp.b);
        out += '}';
    }
    out += "],\"head\":{\"W\":";
    detail::append_matrix(out, m.head.W, 2, m.head.in_dim);
    out += ",\"b\":";
    detail::append_vector(out, m.head.b);
    out += "}}";

    std::ofstream f(path, std::ios::binary);
    if (!f)
        throw Error("save_model: cannot open '" + path + "' for writing");
    f << out << '\n';
    if (!f)
        throw Error("save_model: write to '" + path + "' failed");
}

inline GnnModel load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw Error("load_model: cannot open '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded())
        throw ParseError("load_model: malformed JSON in '" + path + "'");
    channel::detail::require_keys(
        j, {"format", "version", "n_layers", "hidden_dim", "leaky_slope", "input_scale", "layers", "head"},
        "load_model");
    if (j["format"] != "dmimo-gnn")
        throw ParseError("load_model: not a dmimo-gnn file");
    if (j["version"] != 1)
        throw ParseError("load_model: unsupported version");

    GnnModel m;
    m.n_layers = j["n_layers"].get<std::size_t>();
    m.hidden_dim = j["hidden_dim"].get<std::size_t>();
    m.leaky_slope = j["leaky_slope"].get<double>();
    m.input_scale = j["input_scale"].get<double>();
    if (m.n_layers < 1 || m.hidden_dim < 1 || !std::isfinite(m.leaky_slope) ||
        !std::isfinite(m.input_scale))
        throw ParseError("load_model: invalid model header");
    const auto& layers = j["layers"];
    if (!layers.is_array() || layers.size() != m.n_layers)
        throw ParseError("load_model: layer count does not match n_layers");
    m.layers.resize(m.n_layers);
    for (std::size_t l = 0; l < m.n_layers; ++l) {
        const auto& jl = layers[l];
        channel::detail::require_keys(jl, {"W_self", "W_ap_agg", "W_ue_agg", "b"},
                                      "load_model: layer " + std::to_string(l));
        auto& lp = m.layers[l];
        lp.in_dim = (l == 0) ? 2 : m.hidden_dim;
        lp.out_dim = m.hidden_dim;
        const std::string where = "layer " + std::to_string(l);
        lp.W_self = detail::parse_matrix(jl["W_self"], lp.out_dim, lp.in_dim, where + " W_self");
        lp.W_ap_agg =
            detail::parse_matrix(jl["W_ap_agg"], lp.out_dim, lp.in_dim, where + " W_ap_agg");
        lp.W_ue_agg =
            detail::parse_matrix(jl["W_ue_agg"], lp.out_dim, lp.in_dim, where + " W_ue_agg");
        const auto& jb = jl["b"];
        if (!jb.is_array() || jb.size() != lp.out_dim)
            throw ParseError("load_model: " + where + " bias size mismatch");
        lp.b.clear();
        for (const auto& v : jb) {
            const double x = v.get<double>();
            if (!std::isfinite(x))
                throw ParseError("load_model: " + where + " non-finite bias");
            lp.b.push_back(x);
        }
    }
    const auto& jh = j["head"];
    channel::detail::require_keys(jh, {"W", "b"}, "load_model: head");
    m.head.in_dim = m.hidden_dim;
    m.head.W = detail::parse_matrix(jh["W"], 2, m.hidden_dim, "head W");
    const auto& jhb = jh["b"];
    if (!jhb.is_array() || jhb.size() != 2)
        throw ParseError("load_model: head bias must have 2 entries");
    m.head.b.clear();
    for (const auto& v : jhb)
        m.head.b.push_back(v.get<double>());
    return m;
}

} // namespace dmimo::gnn
