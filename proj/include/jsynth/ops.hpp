#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "jsynth/tensor.hpp"

namespace jsynth {

enum class Mode { Train, Eval };

namespace detail {

// C[M,N] += A[M,K] * B[K,N], all row-major contiguous. Four output rows share
// one pass over each B row, which is what makes the conv layers tolerable on
// one core.
inline void gemm_accumulate(const double* A, const double* B, double* C, Dim M, Dim K, Dim N) {
    Dim i = 0;
    for (; i + 4 <= M; i += 4) {
        double* c0 = C + static_cast<std::size_t>((i + 0) * N);
        double* c1 = C + static_cast<std::size_t>((i + 1) * N);
        double* c2 = C + static_cast<std::size_t>((i + 2) * N);
        double* c3 = C + static_cast<std::size_t>((i + 3) * N);
        const double* a0 = A + static_cast<std::size_t>((i + 0) * K);
        const double* a1 = A + static_cast<std::size_t>((i + 1) * K);
        const double* a2 = A + static_cast<std::size_t>((i + 2) * K);
        const double* a3 = A + static_cast<std::size_t>((i + 3) * K);
        for (Dim k = 0; k < K; ++k) {
            const double v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
            const double* b = B + static_cast<std::size_t>(k * N);
            for (Dim j = 0; j < N; ++j) {
                const double bv = b[j];
                c0[j] += v0 * bv;
                c1[j] += v1 * bv;
                c2[j] += v2 * bv;
                c3[j] += v3 * bv;
            }
        }
    }
    for (; i < M; ++i) {
        double* c = C + static_cast<std::size_t>(i * N);
        const double* a = A + static_cast<std::size_t>(i * K);
        for (Dim k = 0; k < K; ++k) {
            const double av = a[k];
            const double* b = B + static_cast<std::size_t>(k * N);
            for (Dim j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C[M,K] += A[M,N] * B[K,N]^T. Tiled 4x2 so each pass over the long B rows
// feeds eight accumulators; B is the im2col matrix and dominates the traffic.
inline void gemm_abt_accumulate(const double* A, const double* B, double* C, Dim M, Dim N, Dim K) {
    Dim i = 0;
    for (; i + 4 <= M; i += 4) {
        const double* a0 = A + static_cast<std::size_t>((i + 0) * N);
        const double* a1 = A + static_cast<std::size_t>((i + 1) * N);
        const double* a2 = A + static_cast<std::size_t>((i + 2) * N);
        const double* a3 = A + static_cast<std::size_t>((i + 3) * N);
        Dim k = 0;
        for (; k + 2 <= K; k += 2) {
            const double* b0 = B + static_cast<std::size_t>((k + 0) * N);
            const double* b1 = B + static_cast<std::size_t>((k + 1) * N);
            double s00 = 0, s01 = 0, s10 = 0, s11 = 0, s20 = 0, s21 = 0, s30 = 0, s31 = 0;
            for (Dim j = 0; j < N; ++j) {
                const double v0 = b0[j], v1 = b1[j];
                s00 += a0[j] * v0;
                s01 += a0[j] * v1;
                s10 += a1[j] * v0;
                s11 += a1[j] * v1;
                s20 += a2[j] * v0;
                s21 += a2[j] * v1;
                s30 += a3[j] * v0;
                s31 += a3[j] * v1;
            }
            C[static_cast<std::size_t>((i + 0) * K + k)] += s00;
            C[static_cast<std::size_t>((i + 0) * K + k + 1)] += s01;
            C[static_cast<std::size_t>((i + 1) * K + k)] += s10;
            C[static_cast<std::size_t>((i + 1) * K + k + 1)] += s11;
            C[static_cast<std::size_t>((i + 2) * K + k)] += s20;
            C[static_cast<std::size_t>((i + 2) * K + k + 1)] += s21;
            C[static_cast<std::size_t>((i + 3) * K + k)] += s30;
            C[static_cast<std::size_t>((i + 3) * K + k + 1)] += s31;
        }
        for (; k < K; ++k) {
            const double* b = B + static_cast<std::size_t>(k * N);
            double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
            for (Dim j = 0; j < N; ++j) {
                const double v = b[j];
                s0 += a0[j] * v;
                s1 += a1[j] * v;
                s2 += a2[j] * v;
                s3 += a3[j] * v;
            }
            C[static_cast<std::size_t>((i + 0) * K + k)] += s0;
            C[static_cast<std::size_t>((i + 1) * K + k)] += s1;
            C[static_cast<std::size_t>((i + 2) * K + k)] += s2;
            C[static_cast<std::size_t>((i + 3) * K + k)] += s3;
        }
    }
    for (; i < M; ++i) {
        const double* a = A + static_cast<std::size_t>(i * N);
        double* c = C + static_cast<std::size_t>(i * K);
        for (Dim k = 0; k < K; ++k) {
            const double* b = B + static_cast<std::size_t>(k * N);
            double acc = 0.0;
            for (Dim j = 0; j < N; ++j) acc += a[j] * b[j];
            c[k] += acc;
        }
    }
}

// col[K, Ho*Wo] from one image x[C,H,W]; K = C*kh*kw, zero padding.
inline void im2col(const double* x, Dim C, Dim H, Dim W, Dim kh, Dim kw, Dim pad, Dim stride,
                   Dim Ho, Dim Wo, double* col) {
    const Dim M = Ho * Wo;
    for (Dim c = 0; c < C; ++c) {
        for (Dim i = 0; i < kh; ++i) {
            for (Dim j = 0; j < kw; ++j) {
                double* row = col + static_cast<std::size_t>(((c * kh + i) * kw + j) * M);
                for (Dim ho = 0; ho < Ho; ++ho) {
                    const Dim hi = ho * stride - pad + i;
                    double* dst = row + static_cast<std::size_t>(ho * Wo);
                    if (hi < 0 || hi >= H) {
                        std::fill(dst, dst + Wo, 0.0);
                        continue;
                    }
                    const double* src = x + static_cast<std::size_t>((c * H + hi) * W);
                    for (Dim wo = 0; wo < Wo; ++wo) {
                        const Dim wi = wo * stride - pad + j;
                        dst[wo] = (wi >= 0 && wi < W) ? src[wi] : 0.0;
                    }
                }
            }
        }
    }
}

// scatter-add of a col gradient back into one image gradient dx[C,H,W].
inline void col2im_add(const double* col, Dim C, Dim H, Dim W, Dim kh, Dim kw, Dim pad, Dim stride,
                       Dim Ho, Dim Wo, double* dx) {
    const Dim M = Ho * Wo;
    for (Dim c = 0; c < C; ++c) {
        for (Dim i = 0; i < kh; ++i) {
            for (Dim j = 0; j < kw; ++j) {
                const double* row = col + static_cast<std::size_t>(((c * kh + i) * kw + j) * M);
                for (Dim ho = 0; ho < Ho; ++ho) {
                    const Dim hi = ho * stride - pad + i;
                    if (hi < 0 || hi >= H) continue;
                    double* dst = dx + static_cast<std::size_t>((c * H + hi) * W);
                    const double* src = row + static_cast<std::size_t>(ho * Wo);
                    for (Dim wo = 0; wo < Wo; ++wo) {
                        const Dim wi = wo * stride - pad + j;
                        if (wi >= 0 && wi < W) dst[wi] += src[wo];
                    }
                }
            }
        }
    }
}

inline void require_4d(const Tensor& t, const char* op, const char* role) {
    if (t.rank() != 4)
        throw ShapeError(msg(op, ": ", role, " must be 4-D (N,C,H,W), got ",
                             shape_str(t.shape())));
}

}  // namespace detail

// ---- convolution -------------------------------------------------------------

inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, Dim padding,
                     Dim stride) {
    detail::require_4d(input, "conv2d", "input");
    if (weight.rank() != 4)
        throw ShapeError(detail::msg("conv2d: weight must be 4-D (Cout,Cin,kH,kW), got ",
                                     shape_str(weight.shape())));
    const Dim N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
    const Dim Cout = weight.dim(0), kH = weight.dim(2), kW = weight.dim(3);
    if (weight.dim(1) != Cin)
        throw ShapeError(detail::msg("conv2d: input channels ", Cin, " != weight channels ",
                                     weight.dim(1)));
    if (kH % 2 == 0 || kW % 2 == 0)
        throw ShapeError(detail::msg("conv2d: kernel dims must be odd, got ", kH, "x", kW));
    if (bias.rank() != 1 || bias.dim(0) != Cout)
        throw ShapeError(detail::msg("conv2d: bias must have shape (", Cout, "), got ",
                                     shape_str(bias.shape())));
    if (padding < 0 || stride < 1)
        throw ValueError(detail::msg("conv2d: padding ", padding, " / stride ", stride,
                                     " out of range"));
    const Dim numH = H + 2 * padding - kH;
    const Dim numW = W + 2 * padding - kW;
    if (numH < 0 || numW < 0 || numH % stride != 0 || numW % stride != 0)
        throw ShapeError(detail::msg("conv2d: spatial dims ", H, "x", W, " with kernel ", kH, "x",
                                     kW, ", padding ", padding, ", stride ", stride,
                                     " give non-integral output size"));
    const Dim Ho = numH / stride + 1;
    const Dim Wo = numW / stride + 1;
    const Dim K = Cin * kH * kW;
    const Dim M = Ho * Wo;

    Tensor out = Tensor::zeros({N, Cout, Ho, Wo});
    std::vector<double> col(static_cast<std::size_t>(K * M));
    for (Dim n = 0; n < N; ++n) {
        const double* x = input.values().data() + static_cast<std::size_t>(n * Cin * H * W);
        double* y = out.values().data() + static_cast<std::size_t>(n * Cout * M);
        for (Dim co = 0; co < Cout; ++co)
            std::fill(y + static_cast<std::size_t>(co * M), y + static_cast<std::size_t>((co + 1) * M),
                      bias.values()[static_cast<std::size_t>(co)]);
        detail::im2col(x, Cin, H, W, kH, kW, padding, stride, Ho, Wo, col.data());
        detail::gemm_accumulate(weight.values().data(), col.data(), y, Cout, K, M);
    }

    Tape* tape = active_tape();
    out.set_requires_grad(tape && detail::any_track(input, weight, bias));
    if (tape && out.requires_grad()) {
        tape->record(out, [input = input, weight = weight, bias = bias, out = out, N, Cin, H, W, Cout, kH, kW, padding, stride,
                           Ho, Wo, K, M]() mutable {
            std::vector<double> col(static_cast<std::size_t>(K * M));
            std::vector<double> wt;
            if (input.requires_grad()) {
                wt.resize(static_cast<std::size_t>(K * Cout));
                for (Dim co = 0; co < Cout; ++co)
                    for (Dim k = 0; k < K; ++k)
                        wt[static_cast<std::size_t>(k * Cout + co)] =
                            weight.values()[static_cast<std::size_t>(co * K + k)];
            }
            std::vector<double> dcol(input.requires_grad() ? static_cast<std::size_t>(K * M) : 0);
            for (Dim n = 0; n < N; ++n) {
                const double* gout = out.grad().data() + static_cast<std::size_t>(n * Cout * M);
                if (weight.requires_grad() || input.requires_grad()) {
                    const double* x =
                        input.values().data() + static_cast<std::size_t>(n * Cin * H * W);
                    detail::im2col(x, Cin, H, W, kH, kW, padding, stride, Ho, Wo, col.data());
                }
                if (weight.requires_grad())
                    detail::gemm_abt_accumulate(gout, col.data(), weight.grad().data(), Cout, M, K);
                if (bias.requires_grad()) {
                    for (Dim co = 0; co < Cout; ++co) {
                        double s = 0.0;
                        const double* g = gout + static_cast<std::size_t>(co * M);
                        for (Dim m = 0; m < M; ++m) s += g[m];
                        bias.grad()[static_cast<std::size_t>(co)] += s;
                    }
                }
                if (input.requires_grad()) {
                    std::fill(dcol.begin(), dcol.end(), 0.0);
                    detail::gemm_accumulate(wt.data(), gout, dcol.data(), K, Cout, M);
                    double* dx = input.grad().data() + static_cast<std::size_t>(n * Cin * H * W);
                    detail::col2im_add(dcol.data(), Cin, H, W, kH, kW, padding, stride, Ho, Wo, dx);
                }
            }
        });
    }
    return out;
}

// ---- pooling / resampling ------------------------------------------------------

// Non-overlapping max pooling; gradient goes to the first maximal cell of each
// window in row-major order.
inline Tensor max_pool2d(const Tensor& input, Dim window) {
    detail::require_4d(input, "max_pool2d", "input");
    if (window < 1) throw ValueError("max_pool2d: window must be >= 1");
    const Dim N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (H % window != 0 || W % window != 0)
        throw ShapeError(detail::msg("max_pool2d: spatial dims ", H, "x", W,
                                     " not divisible by window ", window));
    const Dim Ho = H / window, Wo = W / window;
    Tensor out = Tensor::zeros({N, C, Ho, Wo});
    std::vector<Dim> argmax(static_cast<std::size_t>(out.numel()));
    const auto& xv = input.values();
    auto& yv = out.values();
    Dim oi = 0;
    for (Dim nc = 0; nc < N * C; ++nc) {
        const double* plane = xv.data() + static_cast<std::size_t>(nc * H * W);
        for (Dim ho = 0; ho < Ho; ++ho) {
            for (Dim wo = 0; wo < Wo; ++wo) {
                double best = plane[static_cast<std::size_t>(ho * window * W + wo * window)];
                Dim best_idx = ho * window * W + wo * window;
                for (Dim i = 0; i < window; ++i) {
                    for (Dim j = 0; j < window; ++j) {
                        const Dim idx = (ho * window + i) * W + (wo * window + j);
                        const double v = plane[static_cast<std::size_t>(idx)];
                        if (v > best) {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                yv[static_cast<std::size_t>(oi)] = best;
                argmax[static_cast<std::size_t>(oi)] = nc * H * W + best_idx;
                ++oi;
            }
        }
    }
    Tape* tape = active_tape();
    out.set_requires_grad(tape && input.requires_grad());
    if (tape && out.requires_grad()) {
        tape->record(out, [input = input, out = out, argmax = std::move(argmax)]() mutable {
            auto& gx = input.grad();
            const auto& gy = out.grad();
            for (std::size_t i = 0; i < gy.size(); ++i)
                gx[static_cast<std::size_t>(argmax[i])] += gy[i];
        });
    }
    return out;
}

// Nearest-neighbour 2x upsampling; backward sums the four child gradients.
inline Tensor upsample_nearest2(const Tensor& input) {
    detail::require_4d(input, "upsample_nearest2", "input");
    const Dim N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    Tensor out = Tensor::zeros({N, C, 2 * H, 2 * W});
    const auto& xv = input.values();
    auto& yv = out.values();
    for (Dim nc = 0; nc < N * C; ++nc) {
        const double* src = xv.data() + static_cast<std::size_t>(nc * H * W);
        double* dst = yv.data() + static_cast<std::size_t>(nc * 4 * H * W);
        for (Dim h = 0; h < 2 * H; ++h) {
            const double* row = src + static_cast<std::size_t>((h / 2) * W);
            double* drow = dst + static_cast<std::size_t>(h * 2 * W);
            for (Dim w = 0; w < 2 * W; ++w) drow[w] = row[w / 2];
        }
    }
    Tape* tape = active_tape();
    out.set_requires_grad(tape && input.requires_grad());
    if (tape && out.requires_grad()) {
        tape->record(out, [input = input, out = out, N, C, H, W]() mutable {
            auto& gx = input.grad();
            const auto& gy = out.grad();
            for (Dim nc = 0; nc < N * C; ++nc) {
                double* d = gx.data() + static_cast<std::size_t>(nc * H * W);
                const double* g = gy.data() + static_cast<std::size_t>(nc * 4 * H * W);
                for (Dim h = 0; h < 2 * H; ++h) {
                    double* drow = d + static_cast<std::size_t>((h / 2) * W);
                    const double* grow = g + static_cast<std::size_t>(h * 2 * W);
                    for (Dim w = 0; w < 2 * W; ++w) drow[w / 2] += grow[w];
                }
            }
        });
    }
    return out;
}

// Channel concatenation; a's channels precede b's.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    detail::require_4d(a, "concat_channels", "a");
    detail::require_4d(b, "concat_channels", "b");
    for (int i : {0, 2, 3}) {
        if (a.dim(i) != b.dim(i))
            throw ShapeError(detail::msg("concat_channels: dim ", i, " mismatch, ", a.dim(i),
                                         " vs ", b.dim(i)));
    }
    const Dim N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    Tensor out = Tensor::zeros({N, Ca + Cb, H, W});
    const Dim plane = H * W;
    auto& yv = out.values();
    for (Dim n = 0; n < N; ++n) {
        std::copy_n(a.values().data() + static_cast<std::size_t>(n * Ca * plane), Ca * plane,
                    yv.data() + static_cast<std::size_t>(n * (Ca + Cb) * plane));
        std::copy_n(b.values().data() + static_cast<std::size_t>(n * Cb * plane), Cb * plane,
                    yv.data() + static_cast<std::size_t>((n * (Ca + Cb) + Ca) * plane));
    }
    Tape* tape = active_tape();
    out.set_requires_grad(tape && detail::any_track(a, b));
    if (tape && out.requires_grad()) {
        tape->record(out, [a = a, b = b, out = out, N, Ca, Cb, plane]() mutable {
            const auto& gy = out.grad();
            for (Dim n = 0; n < N; ++n) {
                if (a.requires_grad()) {
                    double* ga = a.grad().data() + static_cast<std::size_t>(n * Ca * plane);
                    const double* g = gy.data() + static_cast<std::size_t>(n * (Ca + Cb) * plane);
                    for (Dim i = 0; i < Ca * plane; ++i) ga[i] += g[i];
                }
                if (b.requires_grad()) {
                    double* gb = b.grad().data() + static_cast<std::size_t>(n * Cb * plane);
                    const double* g =
                        gy.data() + static_cast<std::size_t>((n * (Ca + Cb) + Ca) * plane);
                    for (Dim i = 0; i < Cb * plane; ++i) gb[i] += g[i];
                }
            }
        });
    }
    return out;
}

// ---- normalization / activations -----------------------------------------------

struct BatchNormState {
    Tensor running_mean;
    Tensor running_var;

    static BatchNormState init(Dim channels) {
        return {Tensor::zeros({channels}), Tensor::full({channels}, 1.0)};
    }
};

// Train mode normalizes with batch statistics over (N,H,W) per channel and
// updates running stats with EMA momentum; eval mode uses the running stats
// and leaves them untouched.
inline Tensor batch_norm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                           BatchNormState& state, Mode mode, double momentum = 0.1,
                           double eps = 1e-5) {
    detail::require_4d(input, "batch_norm2d", "input");
    const Dim N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (gamma.rank() != 1 || gamma.dim(0) != C || beta.rank() != 1 || beta.dim(0) != C)
        throw ShapeError(detail::msg("batch_norm2d: gamma/beta must have shape (", C, ")"));
    if (mode == Mode::Train && N < 2)
        throw ValueError("batch_norm2d: batch size must be >= 2 in train mode");

    const Dim plane = H * W;
    const double m = static_cast<double>(N * plane);
    std::vector<double> mu(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
    const auto& xv = input.values();

    if (mode == Mode::Train) {
        for (Dim c = 0; c < C; ++c) {
            double s = 0.0;
            for (Dim n = 0; n < N; ++n) {
                const double* p = xv.data() + static_cast<std::size_t>((n * C + c) * plane);
                for (Dim i = 0; i < plane; ++i) s += p[i];
            }
            mu[static_cast<std::size_t>(c)] = s / m;
        }
        for (Dim c = 0; c < C; ++c) {
            double s = 0.0;
            const double cmu = mu[static_cast<std::size_t>(c)];
            for (Dim n = 0; n < N; ++n) {
                const double* p = xv.data() + static_cast<std::size_t>((n * C + c) * plane);
                for (Dim i = 0; i < plane; ++i) {
                    const double d = p[i] - cmu;
                    s += d * d;
                }
            }
            const double var = s / m;
            invstd[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + eps);
            auto& rm = state.running_mean.values()[static_cast<std::size_t>(c)];
            auto& rv = state.running_var.values()[static_cast<std::size_t>(c)];
            rm = (1.0 - momentum) * rm + momentum * cmu;
            rv = (1.0 - momentum) * rv + momentum * var;
        }
    } else {
        for (Dim c = 0; c < C; ++c) {
            mu[static_cast<std::size_t>(c)] = state.running_mean.values()[static_cast<std::size_t>(c)];
            invstd[static_cast<std::size_t>(c)] =
                1.0 / std::sqrt(state.running_var.values()[static_cast<std::size_t>(c)] + eps);
        }
    }

    Tensor out = Tensor::zeros(input.shape());
    auto& yv = out.values();
    for (Dim n = 0; n < N; ++n) {
        for (Dim c = 0; c < C; ++c) {
            const double cmu = mu[static_cast<std::size_t>(c)];
            const double cis = invstd[static_cast<std::size_t>(c)];
            const double g = gamma.values()[static_cast<std::size_t>(c)];
            const double bt = beta.values()[static_cast<std::size_t>(c)];
            const double* p = xv.data() + static_cast<std::size_t>((n * C + c) * plane);
            double* q = yv.data() + static_cast<std::size_t>((n * C + c) * plane);
            for (Dim i = 0; i < plane; ++i) q[i] = (p[i] - cmu) * cis * g + bt;
        }
    }

    Tape* tape = active_tape();
    out.set_requires_grad(tape && detail::any_track(input, gamma, beta));
    if (tape && out.requires_grad()) {
        const bool train = (mode == Mode::Train);
        tape->record(out, [input = input, gamma = gamma, beta = beta, out = out, mu = std::move(mu), invstd = std::move(invstd),
                           N, C, plane, m, train]() mutable {
            const auto& gy = out.grad();
            const auto& xv = input.values();
            for (Dim c = 0; c < C; ++c) {
                const double cmu = mu[static_cast<std::size_t>(c)];
                const double cis = invstd[static_cast<std::size_t>(c)];
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (Dim n = 0; n < N; ++n) {
                    const double* g = gy.data() + static_cast<std::size_t>((n * C + c) * plane);
                    const double* p = xv.data() + static_cast<std::size_t>((n * C + c) * plane);
                    for (Dim i = 0; i < plane; ++i) {
                        sum_dy += g[i];
                        sum_dy_xhat += g[i] * (p[i] - cmu) * cis;
                    }
                }
                if (beta.requires_grad()) beta.grad()[static_cast<std::size_t>(c)] += sum_dy;
                if (gamma.requires_grad()) gamma.grad()[static_cast<std::size_t>(c)] += sum_dy_xhat;
                if (input.requires_grad()) {
                    const double gv = gamma.values()[static_cast<std::size_t>(c)];
                    auto& gx = input.grad();
                    for (Dim n = 0; n < N; ++n) {
                        const double* g = gy.data() + static_cast<std::size_t>((n * C + c) * plane);
                        const double* p = xv.data() + static_cast<std::size_t>((n * C + c) * plane);
                        double* d = gx.data() + static_cast<std::size_t>((n * C + c) * plane);
                        if (train) {
                            for (Dim i = 0; i < plane; ++i) {
                                const double xhat = (p[i] - cmu) * cis;
                                d[i] += (gv * cis / m) * (m * g[i] - sum_dy - xhat * sum_dy_xhat);
                            }
                        } else {
                            for (Dim i = 0; i < plane; ++i) d[i] += gv * cis * g[i];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Piecewise-linear activation; the backward factor at exactly 0 is 1.
inline Tensor leaky_relu(const Tensor& input, double slope) {
    if (!(slope > 0.0 && slope < 1.0))
        throw ValueError(detail::msg("leaky_relu: slope ", slope, " not in (0,1)"));
    std::vector<double> out(input.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = input.values()[i];
        out[i] = v >= 0.0 ? v : slope * v;
    }
    Tape* tape = active_tape();
    Tensor result = Tensor::from(input.shape(), std::move(out), tape && input.requires_grad());
    if (tape && result.requires_grad()) {
        tape->record(result, [input = input, result = result, slope]() mutable {
            auto& gx = input.grad();
            const auto& gy = result.grad();
            const auto& xv = input.values();
            for (std::size_t i = 0; i < gy.size(); ++i)
                gx[i] += gy[i] * (xv[i] >= 0.0 ? 1.0 : slope);
        });
    }
    return result;
}

inline Tensor sigmoid(const Tensor& input) {
    std::vector<double> out(input.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = input.values()[i];
        if (v >= 0.0) {
            out[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
            const double e = std::exp(v);
            out[i] = e / (1.0 + e);
        }
    }
    Tape* tape = active_tape();
    Tensor result = Tensor::from(input.shape(), std::move(out), tape && input.requires_grad());
    if (tape && result.requires_grad()) {
        tape->record(result, [input = input, result = result]() mutable {
            auto& gx = input.grad();
            const auto& gy = result.grad();
            const auto& s = result.values();
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * s[i] * (1.0 - s[i]);
        });
    }
    return result;
}

// ---- losses --------------------------------------------------------------------

constexpr double kBceClamp = 1e-7;

// Mean two-sided binary cross-entropy with prediction clamping.
inline Tensor bce_loss(const Tensor& prediction, const Tensor& target) {
    require_same_shape(prediction, target, "bce_loss");
    const auto& tv = target.values();
    for (double v : tv)
        if (v != 0.0 && v != 1.0)
            throw ValueError(detail::msg("bce_loss: target value ", v, " not in {0,1}"));
    const double n = static_cast<double>(prediction.numel());
    double loss = 0.0;
    for (std::size_t i = 0; i < tv.size(); ++i) {
        const double p = std::clamp(prediction.values()[i], kBceClamp, 1.0 - kBceClamp);
        loss -= tv[i] * std::log(p) + (1.0 - tv[i]) * std::log(1.0 - p);
    }
    loss /= n;
    Tape* tape = active_tape();
    Tensor result = Tensor::from(Shape{}, {loss}, tape && prediction.requires_grad());
    if (tape && result.requires_grad()) {
        tape->record(result, [prediction = prediction, target = target, result = result, n]() mutable {
            auto& gp = prediction.grad();
            const double g = result.grad()[0];
            const auto& tv = target.values();
            for (std::size_t i = 0; i < gp.size(); ++i) {
                const double p = std::clamp(prediction.values()[i], kBceClamp, 1.0 - kBceClamp);
                gp[i] += g * (p - tv[i]) / (p * (1.0 - p) * n);
            }
        });
    }
    return result;
}

// Mean squared difference over all elements.
inline Tensor l2_loss(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "l2_loss");
    const double n = static_cast<double>(a.numel());
    double loss = 0.0;
    for (std::size_t i = 0; i < a.values().size(); ++i) {
        const double d = a.values()[i] - b.values()[i];
        loss += d * d;
    }
    loss /= n;
    Tape* tape = active_tape();
    Tensor result = Tensor::from(Shape{}, {loss}, tape && detail::any_track(a, b));
    if (tape && result.requires_grad()) {
        tape->record(result, [a = a, b = b, result = result, n]() mutable {
            const double g = result.grad()[0];
            for (std::size_t i = 0; i < a.values().size(); ++i) {
                const double d = 2.0 * (a.values()[i] - b.values()[i]) / n * g;
                if (a.requires_grad()) a.grad()[i] += d;
                if (b.requires_grad()) b.grad()[i] -= d;
            }
        });
    }
    return result;
}

}  // namespace jsynth
