#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "patchflow/kernels.hpp"
#include "patchflow/rng.hpp"

using namespace patchflow;

namespace {
std::vector<float> randv(Rng& r, int n, float s = 1.f) {
    std::vector<float> v(n);
    for (auto& x : v) x = s * r.normalf();
    return v;
}
} // namespace

TEST_CASE("det_dot matches a double-precision dot") {
    Rng rng = Rng::for_stream(1, 0);
    for (int n : {1, 3, 7, 8, 9, 31, 64, 257}) {
        auto a = randv(rng, n), b = randv(rng, n);
        double ref = 0;
        for (int i = 0; i < n; ++i) ref += double(a[i]) * b[i];
        CHECK(kern::det_dot(a.data(), b.data(), n) ==
              doctest::Approx(ref).epsilon(1e-5));
    }
}

TEST_CASE("gemm_colB per element equals det_dot plus bias") {
    Rng rng = Rng::for_stream(2, 0);
    const int M = 5, K = 17, N = 7;
    auto A = randv(rng, M * K);
    auto Bcm = randv(rng, K * N);
    auto bias = randv(rng, N);
    std::vector<float> C(M * N);
    kern::gemm_colB(A.data(), Bcm.data(), C.data(), M, K, N, bias.data());
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
            const float ref = kern::det_dot(&A[i * K], &Bcm[j * K], K) + bias[j];
            CHECK(C[i * N + j] == ref); // bitwise: same kernel, same order
        }
    // null bias path
    kern::gemm_colB(A.data(), Bcm.data(), C.data(), M, K, N, nullptr);
    CHECK(C[0] == kern::det_dot(&A[0], &Bcm[0], K));
}

TEST_CASE("gemm_rowBT computes G * W^T and respects accumulate") {
    Rng rng = Rng::for_stream(3, 0);
    const int M = 4, N = 6, K = 5;
    auto G = randv(rng, M * N);
    auto Wrm = randv(rng, K * N); // [K, N]
    std::vector<float> dX(M * K, 0.f);
    kern::gemm_rowBT(G.data(), Wrm.data(), dX.data(), M, N, K, false);
    for (int i = 0; i < M; ++i)
        for (int k = 0; k < K; ++k) {
            double ref = 0;
            for (int j = 0; j < N; ++j) ref += double(G[i * N + j]) * Wrm[k * N + j];
            CHECK(dX[i * K + k] == doctest::Approx(ref).epsilon(1e-4));
        }
    auto once = dX;
    kern::gemm_rowBT(G.data(), Wrm.data(), dX.data(), M, N, K, true);
    for (int i = 0; i < M * K; ++i)
        CHECK(dX[i] == doctest::Approx(2.0 * once[i]).epsilon(1e-5));
}

TEST_CASE("accum_outer and accum_colsum match naive row-order loops") {
    Rng rng = Rng::for_stream(4, 0);
    const int M = 6, K = 3, N = 4;
    auto A = randv(rng, M * K);
    auto G = randv(rng, M * N);
    std::vector<float> dW(K * N, 0.5f), ref = dW;
    kern::accum_outer(A.data(), G.data(), dW.data(), M, K, N);
    for (int i = 0; i < M; ++i)
        for (int k = 0; k < K; ++k)
            for (int j = 0; j < N; ++j) ref[k * N + j] += A[i * K + k] * G[i * N + j];
    for (int i = 0; i < K * N; ++i) CHECK(dW[i] == doctest::Approx(ref[i]).epsilon(1e-5));

    std::vector<float> db(N, 1.f), dbr = db;
    kern::accum_colsum(G.data(), db.data(), M, N);
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) dbr[j] += G[i * N + j];
    for (int j = 0; j < N; ++j) CHECK(db[j] == doctest::Approx(dbr[j]).epsilon(1e-5));
}

TEST_CASE("rmsnorm_row normalizes and reports the divisor") {
    Rng rng = Rng::for_stream(5, 0);
    const int n = 13;
    auto x = randv(rng, n), w = randv(rng, n);
    std::vector<float> y(n);
    const float eps = 1e-6f;
    const float inv = kern::rmsnorm_row(x.data(), w.data(), y.data(), n, eps);
    double ms = 0;
    for (float v : x) ms += double(v) * v;
    const double rms = std::sqrt(ms / n + eps);
    for (int i = 0; i < n; ++i)
        CHECK(y[i] == doctest::Approx(x[i] * w[i] / rms).epsilon(1e-4));
    CHECK(double(inv) * rms == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("rope_row is identity at pos 0 and inverted by rope_row_inv") {
    Rng rng = Rng::for_stream(6, 0);
    const int heads = 2, hd = 8;
    auto x = randv(rng, heads * hd);
    auto y = x;
    kern::rope_row(y.data(), 0, heads, hd);
    CHECK(std::memcmp(x.data(), y.data(), x.size() * 4) == 0);

    y = x;
    kern::rope_row(y.data(), 37, heads, hd);
    CHECK(std::memcmp(x.data(), y.data(), x.size() * 4) != 0);
    kern::rope_row_inv(y.data(), 37, heads, hd);
    for (size_t i = 0; i < x.size(); ++i)
        CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-5));

    // rotation preserves the norm
    auto z = x;
    kern::rope_row(z.data(), 11, heads, hd);
    double n0 = 0, n1 = 0;
    for (size_t i = 0; i < x.size(); ++i) { n0 += double(x[i]) * x[i]; n1 += double(z[i]) * z[i]; }
    CHECK(n1 == doctest::Approx(n0).epsilon(1e-5));
}

TEST_CASE("softmax_row sums to one and keeps the argmax") {
    std::vector<float> x = {1.f, 3.f, -2.f, 3.5f, 0.f};
    auto y = x;
    kern::softmax_row(y.data(), (int)y.size());
    double s = 0;
    for (float v : y) { CHECK(v > 0.f); s += v; }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(std::max_element(y.begin(), y.end()) - y.begin() == 3);
    // large inputs stay finite
    std::vector<float> big = {1000.f, 999.f};
    kern::softmax_row(big.data(), 2);
    CHECK(std::isfinite(big[0]));
    CHECK(big[0] > big[1]);
}

TEST_CASE("attn_row with one key returns its value row") {
    Rng rng = Rng::for_stream(7, 0);
    const int heads = 2, hd = 4, dim = heads * hd;
    auto q = randv(rng, dim), K = randv(rng, dim), V = randv(rng, dim);
    std::vector<float> probs(heads), out(dim);
    kern::attn_row(q.data(), K.data(), V.data(), 1, heads, hd, probs.data(), out.data());
    CHECK(std::memcmp(out.data(), V.data(), dim * 4) == 0);
}

TEST_CASE("attn_row matches a naive per-head softmax attention") {
    Rng rng = Rng::for_stream(8, 0);
    const int heads = 2, hd = 3, dim = heads * hd, nk = 5;
    auto q = randv(rng, dim), K = randv(rng, nk * dim), V = randv(rng, nk * dim);
    std::vector<float> probs(heads * nk), out(dim);
    kern::attn_row(q.data(), K.data(), V.data(), nk, heads, hd, probs.data(), out.data());
    const double scl = 1.0 / std::sqrt(double(hd));
    for (int h = 0; h < heads; ++h) {
        std::vector<double> logit(nk);
        double mx = -1e300;
        for (int t = 0; t < nk; ++t) {
            double s = 0;
            for (int i = 0; i < hd; ++i)
                s += double(q[h * hd + i]) * K[t * dim + h * hd + i];
            logit[t] = s * scl;
            mx = std::max(mx, logit[t]);
        }
        double z = 0;
        for (int t = 0; t < nk; ++t) { logit[t] = std::exp(logit[t] - mx); z += logit[t]; }
        for (int i = 0; i < hd; ++i) {
            double o = 0;
            for (int t = 0; t < nk; ++t) o += logit[t] / z * V[t * dim + h * hd + i];
            CHECK(out[h * hd + i] == doctest::Approx(o).epsilon(1e-4));
        }
    }
}

TEST_CASE("fsq_apply snaps, clips, and is idempotent") {
    const float delta = 0.25f;
    const int L = 4;
    std::vector<float> x = {0.f, 0.1f, 0.13f, -0.37f, 0.99f, 5.f, -5.f, 1.f, -1.f, 0.124f};
    std::vector<float> y(x.size());
    kern::fsq_apply(x.data(), y.data(), (std::int64_t)x.size(), delta, L);
    std::vector<float> want = {0.f, 0.f, 0.25f, -0.25f, 1.f, 1.f, -1.f, 1.f, -1.f, 0.f};
    for (size_t i = 0; i < x.size(); ++i) CHECK(y[i] == want[i]);
    std::vector<float> z(x.size());
    kern::fsq_apply(y.data(), z.data(), (std::int64_t)y.size(), delta, L);
    CHECK(std::memcmp(y.data(), z.data(), y.size() * 4) == 0);
}

TEST_CASE("activation kernels match reference formulas") {
    Rng rng = Rng::for_stream(9, 0);
    auto x = randv(rng, 33, 2.f);
    std::vector<float> y(x.size());
    kern::silu(x.data(), y.data(), (std::int64_t)x.size());
    for (size_t i = 0; i < x.size(); ++i)
        CHECK(y[i] == doctest::Approx(x[i] / (1.0 + std::exp(-double(x[i])))).epsilon(1e-5));

    kern::tanh_v(x.data(), y.data(), (std::int64_t)x.size());
    for (size_t i = 0; i < x.size(); ++i)
        CHECK(y[i] == doctest::Approx(std::tanh(double(x[i]))).epsilon(1e-5));

    kern::sigmoid_v(x.data(), y.data(), (std::int64_t)x.size());
    for (size_t i = 0; i < x.size(); ++i)
        CHECK(y[i] == doctest::Approx(1.0 / (1.0 + std::exp(-double(x[i])))).epsilon(1e-5));
}

TEST_CASE("silu_grad matches central finite differences") {
    Rng rng = Rng::for_stream(10, 0);
    auto x = randv(rng, 17);
    std::vector<float> gy(x.size(), 1.f), gx(x.size(), 0.f);
    kern::silu_grad(x.data(), gy.data(), gx.data(), (std::int64_t)x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        const double h = 1e-4;
        const double xp = double(x[i]) + h, xm = double(x[i]) - h;
        auto f = [](double v) { return v / (1.0 + std::exp(-v)); };
        CHECK(gx[i] == doctest::Approx((f(xp) - f(xm)) / (2 * h)).epsilon(1e-3));
    }
    // accumulates rather than overwrites
    auto g2 = gx;
    kern::silu_grad(x.data(), gy.data(), gx.data(), (std::int64_t)x.size());
    for (size_t i = 0; i < x.size(); ++i)
        CHECK(gx[i] == doctest::Approx(2.0 * g2[i]).epsilon(1e-5));
}
