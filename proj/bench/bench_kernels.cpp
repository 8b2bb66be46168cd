// Timing comparison of the serial and OpenMP kernel variants, plus a bitwise
// equality check on every timed case.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <vector>

#include "ccat/kernels.hpp"
#include "ccat/rng.hpp"

using namespace ccat;

namespace {

double seconds(auto fn, int reps) {
    fn();  // warm-up
    auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(t1 - t0).count() / reps;
}

std::vector<float> randvec(int64_t n, Rng& rng) {
    std::vector<float> v(static_cast<size_t>(n));
    for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    return v;
}

void report(const char* name, double flops, double ts, double tp, bool equal) {
    std::printf("%-28s serial %8.2f ms (%6.2f GF/s)   omp %8.2f ms (%6.2f GF/s)   x%.2f   %s\n",
                name, ts * 1e3, flops / ts * 1e-9, tp * 1e3, flops / tp * 1e-9, ts / tp,
                equal ? "bitwise-equal" : "MISMATCH");
}

}  // namespace

int main() {
    Rng rng(42);

    {
        const int64_t M = 384, K = 384, N = 384;
        auto a = randvec(M * K, rng), b = randvec(K * N, rng);
        std::vector<float> cs(static_cast<size_t>(M * N)), cp(cs.size());
        double ts = seconds([&] { kernels::serial::matmul(a.data(), b.data(), cs.data(), M, K, N, false, false, false); }, 5);
        double tp = seconds([&] { kernels::omp::matmul(a.data(), b.data(), cp.data(), M, K, N, false, false, false); }, 5);
        report("matmul 384^3", 2.0 * M * K * N, ts, tp,
               std::memcmp(cs.data(), cp.data(), cs.size() * sizeof(float)) == 0);
    }
    {
        const int64_t B = 48, M = 64, K = 64, N = 64;
        auto a = randvec(B * M * K, rng), b = randvec(B * K * N, rng);
        std::vector<float> cs(static_cast<size_t>(B * M * N)), cp(cs.size());
        double ts = seconds([&] { kernels::serial::bmm(a.data(), b.data(), cs.data(), B, M, K, N, false, true, false); }, 5);
        double tp = seconds([&] { kernels::omp::bmm(a.data(), b.data(), cp.data(), B, M, K, N, false, true, false); }, 5);
        report("bmm 48x64^3 (tb)", 2.0 * B * M * K * N, ts, tp,
               std::memcmp(cs.data(), cp.data(), cs.size() * sizeof(float)) == 0);
    }
    {
        const int64_t Bt = 5, Cin = 32, H = 64, W = 64, Cout = 32, k = 3, pad = 1;
        auto x = randvec(Bt * Cin * H * W, rng), w = randvec(Cout * Cin * k * k, rng),
             bias = randvec(Cout, rng);
        std::vector<float> ys(static_cast<size_t>(Bt * Cout * H * W)), yp(ys.size());
        double ts = seconds([&] { kernels::serial::conv2d_fwd(x.data(), w.data(), bias.data(), ys.data(), Bt, Cin, H, W, Cout, k, pad); }, 3);
        double tp = seconds([&] { kernels::omp::conv2d_fwd(x.data(), w.data(), bias.data(), yp.data(), Bt, Cin, H, W, Cout, k, pad); }, 3);
        report("conv2d 5x32x64x64 k3", 2.0 * Bt * Cout * H * W * Cin * k * k, ts, tp,
               std::memcmp(ys.data(), yp.data(), ys.size() * sizeof(float)) == 0);

        auto dy = randvec(Bt * Cout * H * W, rng);
        std::vector<float> dxs(static_cast<size_t>(Bt * Cin * H * W), 0.f), dxp(dxs.size(), 0.f);
        ts = seconds([&] {
            std::fill(dxs.begin(), dxs.end(), 0.f);
            kernels::serial::conv2d_bwd_input(w.data(), dy.data(), dxs.data(), Bt, Cin, H, W, Cout, k, pad);
        }, 3);
        tp = seconds([&] {
            std::fill(dxp.begin(), dxp.end(), 0.f);
            kernels::omp::conv2d_bwd_input(w.data(), dy.data(), dxp.data(), Bt, Cin, H, W, Cout, k, pad);
        }, 3);
        report("conv2d bwd-input", 2.0 * Bt * Cout * H * W * Cin * k * k, ts, tp,
               std::memcmp(dxs.data(), dxp.data(), dxs.size() * sizeof(float)) == 0);

        std::vector<float> dws(static_cast<size_t>(Cout * Cin * k * k), 0.f), dwp(dws.size(), 0.f);
        std::vector<float> dbs(static_cast<size_t>(Cout), 0.f), dbp(dbs.size(), 0.f);
        ts = seconds([&] {
            std::fill(dws.begin(), dws.end(), 0.f);
            std::fill(dbs.begin(), dbs.end(), 0.f);
            kernels::serial::conv2d_bwd_weight(x.data(), dy.data(), dws.data(), dbs.data(), Bt, Cin, H, W, Cout, k, pad);
        }, 3);
        tp = seconds([&] {
            std::fill(dwp.begin(), dwp.end(), 0.f);
            std::fill(dbp.begin(), dbp.end(), 0.f);
            kernels::omp::conv2d_bwd_weight(x.data(), dy.data(), dwp.data(), dbp.data(), Bt, Cin, H, W, Cout, k, pad);
        }, 3);
        report("conv2d bwd-weight", 2.0 * Bt * Cout * H * W * Cin * k * k, ts, tp,
               std::memcmp(dws.data(), dwp.data(), dws.size() * sizeof(float)) == 0 &&
                   std::memcmp(dbs.data(), dbp.data(), dbs.size() * sizeof(float)) == 0);
    }
    return 0;
}
