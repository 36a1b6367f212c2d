#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "coma/attention.hpp"
#include "coma/rng.hpp"

using namespace coma;

namespace {

std::vector<double> rand_vec(RngStream& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

// Brute-force oracle for one DM-MSA branch: materializes K', V' by explicit
// window summation and computes the attention row by row. Shares nothing with
// the library path except the parameter values.
std::vector<double> oracle_branch(const std::vector<double>& Q, const std::vector<double>& K,
                                  const std::vector<double>& V, std::size_t v, std::size_t p,
                                  std::size_t C, std::size_t heads,
                                  const std::vector<double>& w, const std::vector<double>& b,
                                  std::size_t k) {
    const std::size_t g = p / k;
    const std::size_t nk = v * g * g;
    std::vector<double> kp(nk * C), vp(nk * C);
    for (std::size_t patch = 0; patch < v; ++patch)
        for (std::size_t wr = 0; wr < g; ++wr)
            for (std::size_t wc = 0; wc < g; ++wc)
                for (std::size_t co = 0; co < C; ++co) {
                    double acc_k = b[co], acc_v = b[co];
                    for (std::size_t ci = 0; ci < C; ++ci)
                        for (std::size_t dr = 0; dr < k; ++dr)
                            for (std::size_t dc = 0; dc < k; ++dc) {
                                const std::size_t row =
                                    patch * p * p + (wr * k + dr) * p + (wc * k + dc);
                                const double wv = w[((co * C + ci) * k + dr) * k + dc];
                                acc_k += wv * K[row * C + ci];
                                acc_v += wv * V[row * C + ci];
                            }
                    kp[(patch * g * g + wr * g + wc) * C + co] = acc_k;
                    vp[(patch * g * g + wr * g + wc) * C + co] = acc_v;
                }
    const std::size_t m = v * p * p;
    const std::size_t d = C / heads;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> out(m * C, 0.0);
    std::vector<double> scores(nk);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < nk; ++j) {
                double s = 0;
                for (std::size_t dd = 0; dd < d; ++dd)
                    s += Q[i * C + h * d + dd] * kp[j * C + h * d + dd];
                scores[j] = s * inv_sqrt_d;
            }
            double mx = scores[0];
            for (double s : scores) mx = std::max(mx, s);
            double denom = 0;
            for (auto& s : scores) {
                s = std::exp(s - mx);
                denom += s;
            }
            for (auto& s : scores) s /= denom;
            for (std::size_t dd = 0; dd < d; ++dd) {
                double acc = 0;
                for (std::size_t j = 0; j < nk; ++j) acc += scores[j] * vp[j * C + h * d + dd];
                out[i * C + h * d + dd] = acc;
            }
        }
    return out;
}

std::vector<double> oracle_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  std::size_t m, std::size_t k, std::size_t n) {
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0;
            for (std::size_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
            out[i * n + j] = acc;
        }
    return out;
}

AttentionParams<double> random_params(RngStream& rng, std::size_t C, std::size_t heads,
                                      std::size_t p, WindowOptions opts = {}) {
    AttentionParams<double> params;
    params.heads = heads;
    params.w_q = from_values<double>({C, C}, rand_vec(rng, C * C));
    params.w_k = from_values<double>({C, C}, rand_vec(rng, C * C));
    params.w_v = from_values<double>({C, C}, rand_vec(rng, C * C));
    params.w_out = from_values<double>({C, C}, rand_vec(rng, C * C));
    for (std::size_t k : window_set(p, opts)) {
        BranchConv<double> bc;
        bc.kernel = k;
        bc.w = from_values<double>({C, C, k, k}, rand_vec(rng, C * C * k * k));
        bc.b = from_values<double>({C}, rand_vec(rng, C));
        params.branches.push_back(std::move(bc));
    }
    return params;
}

Tensor<double> identity_matrix(std::size_t C) {
    std::vector<double> v(C * C, 0.0);
    for (std::size_t i = 0; i < C; ++i) v[i * C + i] = 1.0;
    return from_values<double>({C, C}, std::move(v));
}

}  // namespace

TEST_CASE("window_set") {
    REQUIRE(window_set(8) == std::vector<std::size_t>{8, 4, 2});
    REQUIRE(window_set(4) == std::vector<std::size_t>{4, 2});
    REQUIRE(window_set(2) == std::vector<std::size_t>{2});
    REQUIRE(window_set(1) == std::vector<std::size_t>{1});
    REQUIRE_THROWS_AS(window_set(6), configuration_error);
    WindowOptions no_full;
    no_full.include_full = false;
    REQUIRE(window_set(8, no_full) == std::vector<std::size_t>{4, 2});
    REQUIRE_THROWS_AS(window_set(2, no_full), configuration_error);
    WindowOptions with_unit;
    with_unit.include_unit = true;
    REQUIRE(window_set(4, with_unit) == std::vector<std::size_t>{4, 2, 1});
}

TEST_CASE("qkv_project") {
    RngStream rng(1, StreamId::test, 100);
    SECTION("identity weights pass X through") {
        AttentionParams<double> params;
        params.heads = 1;
        params.w_q = params.w_k = params.w_v = identity_matrix(4);
        auto x = from_values<double>({3, 4}, rand_vec(rng, 12));
        auto [q, k, v] = qkv_project(x, params);
        REQUIRE(q.values() == x.values());
        REQUIRE(k.values() == x.values());
        REQUIRE(v.values() == x.values());
    }
    SECTION("zero input gives zero projections") {
        AttentionParams<double> params;
        params.heads = 1;
        params.w_q = from_values<double>({4, 4}, rand_vec(rng, 16));
        params.w_k = from_values<double>({4, 4}, rand_vec(rng, 16));
        params.w_v = from_values<double>({4, 4}, rand_vec(rng, 16));
        auto x = zeros<double>({3, 4});
        auto [q, k, v] = qkv_project(x, params);
        for (double val : q.values()) REQUIRE(val == 0.0);
        for (double val : v.values()) REQUIRE(val == 0.0);
    }
    SECTION("random instance matches the direct product") {
        AttentionParams<double> params;
        params.heads = 1;
        params.w_q = from_values<double>({8, 8}, rand_vec(rng, 64));
        params.w_k = from_values<double>({8, 8}, rand_vec(rng, 64));
        params.w_v = from_values<double>({8, 8}, rand_vec(rng, 64));
        auto x = from_values<double>({4, 8}, rand_vec(rng, 32));
        auto [q, k, v] = qkv_project(x, params);
        auto want = oracle_matmul(x.values(), params.w_q.values(), 4, 8, 8);
        for (std::size_t i = 0; i < 32; ++i)
            REQUIRE(std::fabs(q.values()[i] - want[i]) < 1e-12);
    }
}

TEST_CASE("branch_attention single-key average") {
    // one visible patch, p=2, k=2, spatial-average channel-identity conv, one
    // head: softmax over a single key is 1, every query gets the V average
    const std::size_t C = 3;
    RngStream rng(2, StreamId::test, 101);
    auto q = from_values<double>({4, C}, rand_vec(rng, 4 * C));
    auto k = from_values<double>({4, C}, rand_vec(rng, 4 * C));
    auto v = from_values<double>({4, C}, rand_vec(rng, 4 * C));
    BranchConv<double> conv;
    conv.kernel = 2;
    std::vector<double> w(C * C * 4, 0.0);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < 4; ++i) w[(c * C + c) * 4 + i] = 0.25;
    conv.w = from_values<double>({C, C, 2, 2}, std::move(w));
    conv.b = zeros<double>({C});
    auto out = branch_attention(q, k, v, conv, 1, 1, 2);
    for (std::size_t row = 0; row < 4; ++row)
        for (std::size_t c = 0; c < C; ++c) {
            double avg = 0;
            for (std::size_t r2 = 0; r2 < 4; ++r2) avg += v.values()[r2 * C + c];
            avg /= 4.0;
            REQUIRE(out.values()[row * C + c] == Catch::Approx(avg).margin(1e-12));
        }
}

TEST_CASE("branch_attention with k=1 identity conv equals vanilla attention") {
    const std::size_t C = 8, heads = 2, v_cnt = 2, p = 2;
    RngStream rng(3, StreamId::test, 102);
    auto q = from_values<double>({v_cnt * p * p, C}, rand_vec(rng, v_cnt * p * p * C));
    auto k = from_values<double>({v_cnt * p * p, C}, rand_vec(rng, v_cnt * p * p * C));
    auto v = from_values<double>({v_cnt * p * p, C}, rand_vec(rng, v_cnt * p * p * C));
    BranchConv<double> conv;
    conv.kernel = 1;
    conv.w = reshape(identity_matrix(C), {C, C, 1, 1});
    conv.b = zeros<double>({C});
    auto via_branch = branch_attention(q, k, v, conv, heads, v_cnt, p);
    auto vanilla = multi_head_attention(q, k, v, heads);
    for (std::size_t i = 0; i < via_branch.numel(); ++i)
        REQUIRE(std::fabs(via_branch.values()[i] - vanilla.values()[i]) < 1e-6);
}

TEST_CASE("branch_attention random instance matches the brute-force oracle") {
    const std::size_t v_cnt = 2, p = 4, k = 2, C = 8, heads = 2;
    RngStream rng(4, StreamId::test, 103);
    const std::size_t m = v_cnt * p * p;
    auto q = from_values<double>({m, C}, rand_vec(rng, m * C));
    auto kk = from_values<double>({m, C}, rand_vec(rng, m * C));
    auto vv = from_values<double>({m, C}, rand_vec(rng, m * C));
    BranchConv<double> conv;
    conv.kernel = k;
    conv.w = from_values<double>({C, C, k, k}, rand_vec(rng, C * C * k * k));
    conv.b = from_values<double>({C}, rand_vec(rng, C));
    auto got = branch_attention(q, kk, vv, conv, heads, v_cnt, p);
    auto want = oracle_branch(q.values(), kk.values(), vv.values(), v_cnt, p, C, heads,
                              conv.w.values(), conv.b.values(), k);
    REQUIRE(got.numel() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i)
        REQUIRE(std::fabs(got.values()[i] - want[i]) < 1e-10);
}

TEST_CASE("branch descriptor counts") {
    // k = p collapses each patch to one key; general k gives (p/k)^2
    for (std::size_t p : {std::size_t{2}, std::size_t{4}, std::size_t{8}})
        for (std::size_t k : window_set(p)) {
            auto x = zeros<double>({3, 2, p, p});
            auto w = zeros<double>({2, 2, k, k});
            auto b = zeros<double>({2});
            auto y = conv2d(x, w, b, k, 0);
            REQUIRE(y.dim(2) == p / k);
            REQUIRE(y.dim(3) == p / k);
            if (k == p) REQUIRE(y.dim(2) * y.dim(3) == 1);
        }
}

TEST_CASE("larger windows are unions of smaller ones") {
    // window (wr,wc) at scale k covers the k'-windows (wr*k/k'+a, wc*k/k'+b)
    for (std::size_t p : {std::size_t{4}, std::size_t{8}})
        for (std::size_t k : window_set(p))
            for (std::size_t kp : window_set(p)) {
                if (kp >= k) continue;
                const std::size_t ratio = k / kp;
                for (std::size_t wr = 0; wr < p / k; ++wr)
                    for (std::size_t wc = 0; wc < p / k; ++wc) {
                        std::set<std::size_t> big;
                        for (std::size_t dr = 0; dr < k; ++dr)
                            for (std::size_t dc = 0; dc < k; ++dc)
                                big.insert((wr * k + dr) * p + (wc * k + dc));
                        std::set<std::size_t> small_union;
                        for (std::size_t a = 0; a < ratio; ++a)
                            for (std::size_t b = 0; b < ratio; ++b) {
                                const std::size_t sr = wr * ratio + a, sc = wc * ratio + b;
                                for (std::size_t dr = 0; dr < kp; ++dr)
                                    for (std::size_t dc = 0; dc < kp; ++dc)
                                        small_union.insert((sr * kp + dr) * p +
                                                           (sc * kp + dc));
                            }
                        REQUIRE(big == small_union);
                        REQUIRE(small_union.size() == ratio * ratio * kp * kp);
                    }
            }
}

TEST_CASE("dmmsa_forward") {
    RngStream rng(5, StreamId::test, 104);
    SECTION("single-branch set reduces to branch_attention times W_out") {
        const std::size_t C = 6, p = 2, v_cnt = 2;
        auto params = random_params(rng, C, 2, p);  // window_set(2) = {2}
        REQUIRE(params.branches.size() == 1);
        const std::size_t m = v_cnt * p * p;
        auto x = from_values<double>({m, C}, rand_vec(rng, m * C));
        auto got = dmmsa_forward(x, params, v_cnt, p);
        auto [q, k, v] = qkv_project(x, params);
        auto branch = branch_attention(q, k, v, params.branches[0], params.heads, v_cnt, p);
        auto want = matmul(branch, params.w_out);
        for (std::size_t i = 0; i < got.numel(); ++i)
            REQUIRE(got.values()[i] == Catch::Approx(want.values()[i]).margin(1e-14));
    }
    SECTION("zero branch convs produce zero output") {
        const std::size_t C = 4, p = 4, v_cnt = 1;
        auto params = random_params(rng, C, 1, p);
        params.w_out = identity_matrix(C);
        for (auto& br : params.branches) {
            br.w = zeros<double>({C, C, br.kernel, br.kernel});
            br.b = zeros<double>({C});
        }
        auto x = from_values<double>({v_cnt * p * p, C}, rand_vec(rng, v_cnt * p * p * C));
        auto got = dmmsa_forward(x, params, v_cnt, p);
        for (double val : got.values()) REQUIRE(val == 0.0);
    }
    SECTION("empty window set is a configuration error") {
        AttentionParams<double> params;
        params.heads = 1;
        params.w_q = params.w_k = params.w_v = params.w_out = identity_matrix(2);
        auto x = zeros<double>({4, 2});
        REQUIRE_THROWS_AS(dmmsa_forward(x, params, 1, 2), configuration_error);
    }
    SECTION("three-branch p=8 instance equals summed branch oracles") {
        const std::size_t C = 8, heads = 2, p = 8, v_cnt = 2;
        auto params = random_params(rng, C, heads, p);
        REQUIRE(params.branches.size() == 3);
        const std::size_t m = v_cnt * p * p;
        auto x = from_values<double>({m, C}, rand_vec(rng, m * C, -0.5, 0.5));
        auto got = dmmsa_forward(x, params, v_cnt, p);

        auto qv = oracle_matmul(x.values(), params.w_q.values(), m, C, C);
        auto kv = oracle_matmul(x.values(), params.w_k.values(), m, C, C);
        auto vv = oracle_matmul(x.values(), params.w_v.values(), m, C, C);
        std::vector<double> acc(m * C, 0.0);
        for (const auto& br : params.branches) {
            auto one = oracle_branch(qv, kv, vv, v_cnt, p, C, heads, br.w.values(),
                                     br.b.values(), br.kernel);
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += one[i];
        }
        auto want = oracle_matmul(acc, params.w_out.values(), m, C, C);
        for (std::size_t i = 0; i < want.size(); ++i)
            REQUIRE(std::fabs(got.values()[i] - want[i]) < 1e-10);
    }
}

TEST_CASE("dmmsa_forward is permutation-equivariant over visible patches") {
    const std::size_t C = 8, heads = 2, p = 4, v_cnt = 4;
    RngStream rng(6, StreamId::test, 105);
    auto params = random_params(rng, C, heads, p);
    const std::size_t m = v_cnt * p * p;
    auto x = from_values<double>({m, C}, rand_vec(rng, m * C));
    auto base = dmmsa_forward(x, params, v_cnt, p);

    const std::vector<std::size_t> perm{2, 0, 3, 1};
    std::vector<double> xp(m * C);
    for (std::size_t dst = 0; dst < v_cnt; ++dst)
        for (std::size_t i = 0; i < p * p * C; ++i)
            xp[dst * p * p * C + i] = x.values()[perm[dst] * p * p * C + i];
    auto permuted = dmmsa_forward(from_values<double>({m, C}, std::move(xp)), params, v_cnt, p);
    for (std::size_t dst = 0; dst < v_cnt; ++dst)
        for (std::size_t i = 0; i < p * p * C; ++i)
            REQUIRE(std::fabs(permuted.values()[dst * p * p * C + i] -
                              base.values()[perm[dst] * p * p * C + i]) < 1e-10);
}

TEST_CASE("attention probability rows sum to one") {
    RngStream rng(7, StreamId::test, 106);
    for (int trial = 0; trial < 20; ++trial) {
        auto scores = from_values<double>({6, 9}, rand_vec(rng, 54, -30.0, 30.0));
        auto probs = softmax(scores);
        for (std::size_t r = 0; r < 6; ++r) {
            double sum = 0;
            for (std::size_t c = 0; c < 9; ++c) sum += probs.values()[r * 9 + c];
            REQUIRE(std::fabs(sum - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("block_forward") {
    RngStream rng(8, StreamId::test, 107);
    const std::size_t C = 8, p = 2, v_cnt = 2, m = v_cnt * p * p;

    TransformerBlock<double> blk;
    blk.use_dmmsa = true;
    blk.grid_p = p;
    blk.ln1_g = full<double>({C}, 1.0);
    blk.ln1_b = zeros<double>({C});
    blk.ln2_g = full<double>({C}, 1.0);
    blk.ln2_b = zeros<double>({C});
    blk.attn = random_params(rng, C, 2, p);
    blk.mlp_w1 = from_values<double>({C, 4 * C}, rand_vec(rng, C * 4 * C));
    blk.mlp_b1 = zeros<double>({4 * C});
    blk.mlp_w2 = from_values<double>({4 * C, C}, rand_vec(rng, 4 * C * C));
    blk.mlp_b2 = zeros<double>({C});

    SECTION("zero output projections make the block an identity") {
        blk.attn.w_out = zeros<double>({C, C});
        blk.mlp_w2 = zeros<double>({4 * C, C});
        auto x = from_values<double>({m, C}, rand_vec(rng, m * C));
        auto y = block_forward(x, blk, v_cnt);
        REQUIRE(y.values() == x.values());
    }
    SECTION("shape preservation") {
        auto x = from_values<double>({m, C}, rand_vec(rng, m * C));
        auto y = block_forward(x, blk, v_cnt);
        REQUIRE(y.shape() == x.shape());
    }
}
