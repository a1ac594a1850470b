#include "tgmn/tgm.hpp"

#include "tgmn/nn.hpp"
#include "tgmn/rng.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

using namespace tgmn;

namespace {

double entropy(const Vec& p) {
    double h = 0;
    for (Eigen::Index i = 0; i < p.size(); ++i)
        if (p(i) > 0) h -= p(i) * std::log(p(i));
    return h;
}

Var scalarize(Tape& t, Var y, const Mat& proj) {
    Var p = t.cwise_mul(y, t.constant(proj));
    Var ones_row = t.constant(Mat::Ones(1, t.value(p).rows()));
    Var ones_col = t.constant(Mat::Ones(t.value(p).cols(), 1));
    return t.matmul(t.matmul(ones_row, p), ones_col);
}

void check_grads(std::vector<Param*> params, const std::function<Var(Tape&)>& build,
                 double eps = 1e-6, double tol = 1e-4) {
    for (auto* p : params) p->zero_grad();
    {
        Tape t;
        t.backward(build(t));
    }
    std::vector<Mat> analytic;
    for (auto* p : params) analytic.push_back(p->grad);
    auto value = [&]() {
        Tape t;
        return t.value(build(t))(0, 0);
    };
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Param& p = *params[pi];
        for (Eigen::Index r = 0; r < p.value.rows(); ++r)
            for (Eigen::Index c = 0; c < p.value.cols(); ++c) {
                double keep = p.value(r, c);
                p.value(r, c) = keep + eps;
                double lp = value();
                p.value(r, c) = keep - eps;
                double lm = value();
                p.value(r, c) = keep;
                double fd = (lp - lm) / (2 * eps);
                double got = analytic[pi](r, c);
                double denom = std::max({std::abs(fd), std::abs(got), 1e-8});
                INFO(p.name << "(" << r << "," << c << ") fd=" << fd << " grad=" << got);
                CHECK(std::abs(fd - got) / denom < tol);
            }
    }
}

}  // namespace

TEST_CASE("addressing: identical keys give the uniform vector") {
    Mat keys = Mat::Ones(5, 8) * 0.3;
    Vec q = Vec::Ones(8);
    Vec w = address(keys, q, 1.0);
    for (int i = 0; i < 5; ++i) CHECK(w(i) == Catch::Approx(0.2));
}

TEST_CASE("addressing: two-slot closed form") {
    // Dot products (ln 2, 0) at tau=1: softmax = (2/3, 1/3).
    Mat keys(2, 1);
    keys << std::log(2.0), 0.0;
    Vec q(1);
    q << 1.0;
    Vec w = address(keys, q, 1.0);
    CHECK(w(0) == Catch::Approx(2.0 / 3.0));
    CHECK(w(1) == Catch::Approx(1.0 / 3.0));
}

TEST_CASE("addressing: lower temperature reduces entropy") {
    Rng rng(5);
    Mat keys = rng.normal_matrix(6, 8, 0, 1);
    Vec q = rng.normal_matrix(8, 1, 0, 1).col(0);
    Vec w_warm = address(keys, q, 1.0);
    Vec w_sharp = address(keys, q, 0.1);
    CHECK(entropy(w_sharp) < entropy(w_warm));
}

TEST_CASE("addressing: normalization, positivity, and monotonicity hold broadly") {
    Rng rng(99);
    for (int iter = 0; iter < 1000; ++iter) {
        auto n = static_cast<Eigen::Index>(2 + rng.integer(8));
        auto d = static_cast<Eigen::Index>(1 + rng.integer(6));
        Mat keys = rng.normal_matrix(n, d, 0, 2);
        Vec q = rng.normal_matrix(d, 1, 0, 2).col(0);
        double tau = rng.uniform(0.05, 1.0);
        Vec w = address(keys, q, tau);
        CHECK(std::abs(w.sum() - 1.0) < 1e-6);
        CHECK(w.minCoeff() >= 0.0);  // extreme score gaps underflow to exactly 0
        CHECK(w.maxCoeff() > 0.0);
        Vec dots = keys * q;
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < n; ++j)
                if (dots(i) > dots(j)) {
                    CHECK(w(i) >= w(j));
                    // Strict ordering only where the smaller weight has not
                    // underflowed past double precision.
                    if (w(j) > 1e-12) CHECK(w(i) > w(j));
                }
    }
}

TEST_CASE("addressing rejects bad inputs") {
    Mat keys = Mat::Ones(3, 4);
    Vec q = Vec::Ones(4);
    CHECK_THROWS_AS(address(keys, Vec::Ones(5), 1.0), argument_error);
    CHECK_THROWS_AS(address(keys, q, 0.0), argument_error);
    CHECK_THROWS_AS(address(keys, q, 1.5), argument_error);
    Vec bad = q;
    bad(1) = std::nan("");
    CHECK_THROWS_AS(address(keys, bad, 1.0), numeric_error);
}

TEST_CASE("adjacency: zero queries give uniform rows; N=1 gives [[1]]") {
    Mat keys = Rng(1).normal_matrix(4, 6, 0, 1);
    Mat A = adjacency(Mat::Zero(4, 6), keys);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) CHECK(A(r, c) == Catch::Approx(0.25));

    Mat A1 = adjacency(Mat::Ones(1, 3), Mat::Ones(1, 3));
    CHECK(A1.rows() == 1);
    CHECK(A1(0, 0) == Catch::Approx(1.0));
}

TEST_CASE("adjacency matches a hand-rolled softmax oracle") {
    Rng rng(7);
    Mat M_q = rng.normal_matrix(5, 4, 0, 1);
    Mat keys = rng.normal_matrix(5, 4, 0, 1);
    Mat A = adjacency(M_q, keys);
    for (int r = 0; r < 5; ++r) {
        // Direct scalar computation of softmax(q_r . k_c / 2).
        double denom = 0;
        std::vector<double> ex(5);
        for (int c = 0; c < 5; ++c) {
            double dot = 0;
            for (int j = 0; j < 4; ++j) dot += M_q(r, j) * keys(c, j);
            ex[c] = std::exp(dot / 2.0);
            denom += ex[c];
        }
        double rowsum = 0;
        for (int c = 0; c < 5; ++c) {
            CHECK(A(r, c) == Catch::Approx(ex[c] / denom).margin(1e-9));
            rowsum += A(r, c);
        }
        CHECK(rowsum == Catch::Approx(1.0).margin(1e-6));
    }
}

TEST_CASE("propagation: single node normalizes by its self-loop only") {
    Mat A = Mat::Ones(1, 1);
    Mat prop = propagation_matrix(A, 0.25);
    CHECK(prop(0, 0) == Catch::Approx(2.0));  // A_hat=2, degree=1
}

TEST_CASE("propagation: uniform adjacency keeps every edge and divides by N") {
    Mat A = Mat::Constant(4, 4, 0.25);
    Mat prop = propagation_matrix(A, 0.25);
    Mat expect = (A + Mat::Identity(4, 4)) / 4.0;
    CHECK((prop - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("propagation: raising the cutoff never increases degree sums") {
    Rng rng(13);
    for (int iter = 0; iter < 50; ++iter) {
        auto n = static_cast<Eigen::Index>(2 + rng.integer(6));
        Mat A = adjacency(rng.normal_matrix(n, 5, 0, 2), rng.normal_matrix(n, 5, 0, 2));
        Mat A_hat = A + Mat::Identity(n, n);
        double deg_low = adjacency_mask(A_hat, 0.25).sum();
        double deg_high = adjacency_mask(A_hat, 0.75).sum();
        CHECK(deg_high <= deg_low);
        CHECK(adjacency_mask(A_hat, 0.75).rowwise().sum().minCoeff() >= 1.0);  // self-loops
    }
}

TEST_CASE("read: zero memory leaves only the head bias") {
    Rng rng(3);
    const Eigen::Index N = 4, d_v = 3;
    Mat prop = propagation_matrix(Mat::Constant(N, N, 1.0 / N), 0.25);
    Vec w = Vec::Constant(N, 1.0 / N);
    std::vector<Mat> gcn{rng.normal_matrix(d_v, d_v, 0, 1), rng.normal_matrix(d_v, d_v, 0, 1)};
    auto hs = gcn_layers(prop, w, Mat::Zero(N, d_v), gcn);
    CHECK(hs.back().cwiseAbs().maxCoeff() == 0.0);
    Mat W_r = rng.normal_matrix(N * d_v, d_v, 0, 1);
    Mat b_r = rng.normal_matrix(1, d_v, 0, 1);
    Vec r = read_head(hs.back(), W_r, b_r);
    for (Eigen::Index k = 0; k < d_v; ++k) CHECK(r(k) == Catch::Approx(std::tanh(b_r(0, k))));
}

TEST_CASE("read: one-hot relevancy with identity propagation isolates one row") {
    Rng rng(4);
    const Eigen::Index N = 5, d_v = 3;
    Mat M_v = rng.normal_matrix(N, d_v, 0, 1);
    Vec w = Vec::Zero(N);
    w(2) = 1.0;
    auto hs = gcn_layers(Mat::Identity(N, N), w, M_v, {});
    for (Eigen::Index i = 0; i < N; ++i)
        for (Eigen::Index j = 0; j < d_v; ++j)
            CHECK(hs[0](i, j) == (i == 2 ? M_v(i, j) : 0.0));
}

TEST_CASE("read path matches a scalar-loop reference") {
    Rng rng(21);
    for (int iter = 0; iter < 30; ++iter) {
        const auto N = static_cast<Eigen::Index>(1 + rng.integer(6));
        const auto d_v = static_cast<Eigen::Index>(1 + rng.integer(4));
        const int layers = static_cast<int>(1 + rng.integer(2));
        Mat A = adjacency(rng.normal_matrix(N, 4, 0, 1), rng.normal_matrix(N, 4, 0, 1));
        Mat prop = propagation_matrix(A, 0.25);
        Vec w = address(rng.normal_matrix(N, 4, 0, 1), rng.normal_matrix(4, 1, 0, 1).col(0), 1.0);
        Mat M_v = rng.normal_matrix(N, d_v, 0, 1);
        std::vector<Mat> gcn;
        for (int l = 0; l < layers; ++l) gcn.push_back(rng.normal_matrix(d_v, d_v, 0, 1));
        Mat W_r = rng.normal_matrix(N * d_v, d_v, 0, 1);
        Mat b_r = rng.normal_matrix(1, d_v, 0, 1);

        Vec got = read_head(gcn_layers(prop, w, M_v, gcn).back(), W_r, b_r);

        // Reference: plain index loops, no shared code with the implementation.
        std::vector<std::vector<double>> H(N, std::vector<double>(d_v));
        for (Eigen::Index i = 0; i < N; ++i)
            for (Eigen::Index j = 0; j < d_v; ++j) H[i][j] = w(i) * M_v(i, j);
        for (const auto& W : gcn) {
            std::vector<std::vector<double>> S(N, std::vector<double>(d_v, 0.0));
            for (Eigen::Index i = 0; i < N; ++i)
                for (Eigen::Index j = 0; j < d_v; ++j) S[i][j] = w(i) * H[i][j];
            std::vector<std::vector<double>> T(N, std::vector<double>(d_v, 0.0));
            for (Eigen::Index i = 0; i < N; ++i)
                for (Eigen::Index k = 0; k < N; ++k)
                    for (Eigen::Index j = 0; j < d_v; ++j) T[i][j] += prop(i, k) * S[k][j];
            for (Eigen::Index i = 0; i < N; ++i)
                for (Eigen::Index j = 0; j < d_v; ++j) {
                    double acc = 0;
                    for (Eigen::Index m = 0; m < d_v; ++m) acc += T[i][m] * W(m, j);
                    H[i][j] = std::max(acc, 0.0);
                }
        }
        for (Eigen::Index k = 0; k < d_v; ++k) {
            double acc = b_r(0, k);
            for (Eigen::Index i = 0; i < N; ++i)
                for (Eigen::Index j = 0; j < d_v; ++j) acc += H[i][j] * W_r(i * d_v + j, k);
            CHECK(got(k) == Catch::Approx(std::tanh(acc)).margin(1e-9));
        }
    }
}

TEST_CASE("mean-pool head works on the pooled features") {
    Rng rng(33);
    const Eigen::Index N = 4, d_v = 3;
    Mat H = rng.normal_matrix(N, d_v, 0, 1);
    Mat W_m = rng.normal_matrix(d_v, d_v, 0, 1);
    Mat b_m = rng.normal_matrix(1, d_v, 0, 1);
    Vec r = read_head_meanpool(H, W_m, b_m);
    Eigen::RowVectorXd mean = H.colwise().mean();
    for (Eigen::Index k = 0; k < d_v; ++k) {
        double acc = b_m(0, k);
        for (Eigen::Index j = 0; j < d_v; ++j) acc += mean(j) * W_m(j, k);
        CHECK(r(k) == Catch::Approx(std::tanh(acc)));
    }
}

TEST_CASE("update: zero relevancy leaves memory bit-identical") {
    Rng rng(8);
    Mat M_v = rng.normal_matrix(4, 3, 0, 1);
    Vec e = rng.uniform_matrix(3, 1, 0, 1).col(0);
    Vec z = rng.normal_matrix(3, 1, 0, 1).col(0);
    Mat out = update_memory(M_v, Vec::Zero(4), e, z);
    CHECK(checksum(out) == checksum(M_v));
}

TEST_CASE("update: full attention with e=1 replaces the row with z") {
    Rng rng(9);
    Mat M_v = rng.normal_matrix(4, 3, 0, 1);
    Vec w = Vec::Zero(4);
    w(1) = 1.0;
    Vec z = rng.normal_matrix(3, 1, 0, 1).col(0);
    Mat out = update_memory(M_v, w, Vec::Ones(3), z);
    CHECK((out.row(1).transpose() - z).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(out.row(0) == M_v.row(0));
}

TEST_CASE("update matches the elementwise reference loop") {
    Rng rng(10);
    for (int iter = 0; iter < 200; ++iter) {
        const Eigen::Index N = 4, d_v = 3;
        Mat M_v = rng.normal_matrix(N, d_v, 0, 1);
        Vec w = address(rng.normal_matrix(N, 3, 0, 1), rng.normal_matrix(3, 1, 0, 1).col(0), 1.0);
        Vec e = rng.uniform_matrix(d_v, 1, 0, 1).col(0);
        Vec z = rng.normal_matrix(d_v, 1, 0, 1).col(0);
        Mat got = update_memory(M_v, w, e, z);
        for (Eigen::Index i = 0; i < N; ++i)
            for (Eigen::Index j = 0; j < d_v; ++j)
                CHECK(got(i, j) ==
                      Catch::Approx(M_v(i, j) * (1.0 - w(i) * e(j)) + w(i) * z(j)).margin(1e-9));
    }
}

TEST_CASE("update gates have the right ranges and respond to u") {
    Rng rng(11);
    const Eigen::Index du = 6, d_v = 4;
    Mat W_e = rng.normal_matrix(du, d_v, 0, 1);
    Mat b_e = rng.normal_matrix(1, d_v, 0, 1);
    Mat W_z = rng.normal_matrix(du, d_v, 0, 1);
    Mat b_z = rng.normal_matrix(1, d_v, 0, 1);
    Vec u = rng.normal_matrix(du, 1, 0, 1).col(0);
    auto [e, z] = update_gates(u, W_e, b_e, W_z, b_z);
    CHECK(e.minCoeff() > 0.0);
    CHECK(e.maxCoeff() < 1.0);
    CHECK(z.minCoeff() > -1.0);
    CHECK(z.maxCoeff() < 1.0);
    auto [e2, z2] = update_gates(2.0 * u, W_e, b_e, W_z, b_z);
    CHECK_FALSE(e == e2);
    CHECK_FALSE(z == z2);
}

TEST_CASE("decay: attended rows persist, ignored rows shrink") {
    Mat M_v = Mat::Ones(3, 2);
    Vec w(3);
    w << 1.0, 0.0, 0.5;
    Mat out = decay_memory(M_v, w, 0.02);
    CHECK(out(0, 0) == 1.0);
    CHECK(out(1, 0) == Catch::Approx(0.98));
    CHECK(out(2, 0) == Catch::Approx(std::pow(0.98, 0.5)));
}

TEST_CASE("decay: ten applications equal the closed form") {
    Mat M_v = Mat::Ones(1, 1);
    Vec w = Vec::Zero(1);
    for (int i = 0; i < 10; ++i) M_v = decay_memory(M_v, w, 0.02);
    CHECK(M_v(0, 0) == Catch::Approx(std::pow(0.98, 10)).margin(1e-6));
}

TEST_CASE("decay is a contraction in every entry") {
    Rng rng(14);
    for (int iter = 0; iter < 100; ++iter) {
        Mat M_v = rng.normal_matrix(5, 4, 0, 2);
        Vec w = address(rng.normal_matrix(5, 3, 0, 1), rng.normal_matrix(3, 1, 0, 1).col(0), 0.5);
        Mat out = decay_memory(M_v, w, 0.02);
        for (Eigen::Index i = 0; i < 5; ++i)
            for (Eigen::Index j = 0; j < 4; ++j) CHECK(std::abs(out(i, j)) <= std::abs(M_v(i, j)));
    }
}

TEST_CASE("KC keys are never touched by the memory operations") {
    Rng rng(15);
    Mat keys = rng.normal_matrix(4, 6, 0, 1);
    auto before = checksum(keys);
    Mat M_q = rng.normal_matrix(4, 6, 0, 1);
    Mat M_v = rng.normal_matrix(4, 3, 0, 1);
    Vec q = rng.normal_matrix(6, 1, 0, 1).col(0);
    Vec w = address(keys, q, 1.0);
    Mat A = adjacency(M_q, keys);
    Mat prop = propagation_matrix(A, 0.25);
    auto hs = gcn_layers(prop, w, M_v, {rng.normal_matrix(3, 3, 0, 1)});
    M_v = update_memory(M_v, w, Vec::Constant(3, 0.5), Vec::Constant(3, 0.1));
    M_v = decay_memory(M_v, w, 0.02);
    CHECK(checksum(keys) == before);
    (void)hs;
}

TEST_CASE("tape adjacency and propagation agree with the plain versions") {
    Rng rng(16);
    const Eigen::Index N = 5, d = 4;
    Param M_q(rng.normal_matrix(N, d, 0, 1), "M_q");
    Mat keys = rng.normal_matrix(N, d, 0, 1);
    Tape t;
    Var A_var = adjacency_t(t, t.param(M_q), keys);
    Var prop_var = propagation_t(t, A_var, 0.25);
    Mat A_plain = adjacency(M_q.value, keys);
    Mat prop_plain = propagation_matrix(A_plain, 0.25);
    CHECK((t.value(A_var) - A_plain).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((t.value(prop_var) - prop_plain).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("batched memory update matches per-student plain updates") {
    Rng rng(17);
    const Eigen::Index B = 3, N = 4, d_v = 3;
    Mat M_v_all = rng.normal_matrix(B * N, d_v, 0, 1);
    Mat E = rng.uniform_matrix(B, d_v, 0, 1);
    Mat Z = rng.normal_matrix(B, d_v, 0, 1);
    Vec w_flat(B * N);
    for (Eigen::Index b = 0; b < B; ++b)
        w_flat.segment(b * N, N) =
            address(rng.normal_matrix(N, 3, 0, 1), rng.normal_matrix(3, 1, 0, 1).col(0), 1.0);

    Tape t;
    Var out = memory_update_t(t, t.constant(M_v_all), w_flat, t.constant(E), t.constant(Z), B, N);
    for (Eigen::Index b = 0; b < B; ++b) {
        Mat expect = update_memory(M_v_all.middleRows(b * N, N), w_flat.segment(b * N, N),
                                   E.row(b).transpose(), Z.row(b).transpose());
        CHECK((t.value(out).middleRows(b * N, N) - expect).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("batched memory update gradients match finite differences") {
    Rng rng(18);
    const Eigen::Index B = 2, N = 3, d_v = 3;
    Param M_v(rng.normal_matrix(B * N, d_v, 0, 1), "M_v");
    Param se(rng.normal_matrix(B, d_v, 0, 0.5), "se");  // pre-gate scores
    Param sz(rng.normal_matrix(B, d_v, 0, 0.5), "sz");
    Vec w_flat = rng.uniform_matrix(B * N, 1, 0, 1).col(0);
    Mat proj = rng.normal_matrix(B * N, d_v, 0, 1);
    check_grads({&M_v, &se, &sz}, [&](Tape& t) {
        Var e = t.sigmoid_(t.param(se));
        Var z = t.tanh_(t.param(sz));
        Var out = memory_update_t(t, t.param(M_v), w_flat, e, z, B, N);
        return scalarize(t, out, proj);
    });
}

TEST_CASE("decay factors freeze inactive students") {
    Vec w_flat(4);
    w_flat << 1.0, 0.0, 0.25, 0.75;
    Vec f = decay_factor_rows(w_flat, 0.02, {true, false}, 2, 2);
    CHECK(f(0) == 1.0);
    CHECK(f(1) == Catch::Approx(0.98));
    CHECK(f(2) == 1.0);
    CHECK(f(3) == 1.0);
}

TEST_CASE("gradients flow through address-read-update end to end") {
    // The differentiable path: M_q -> adjacency -> propagation (frozen mask),
    // M_v -> GCN -> read; update gates fed by the read vector. Relevancy w is
    // a constant (keys are frozen upstream).
    Rng rng(19);
    const Eigen::Index N = 4, d_v = 8, B = 1;
    Param M_q(rng.normal_matrix(N, d_v, 0, 0.7), "M_q");
    Param M_v(rng.normal_matrix(N, d_v, 0, 0.7), "M_v");
    Param W0(rng.normal_matrix(d_v, d_v, 0, 0.5), "W0");
    Param W1(rng.normal_matrix(d_v, d_v, 0, 0.5), "W1");
    Param W_r(rng.normal_matrix(N * d_v, d_v, 0, 0.3), "W_r");
    Param b_r(Mat::Zero(1, d_v), "b_r");
    Param W_e(rng.normal_matrix(d_v, d_v, 0, 0.5), "W_e");
    Param b_e(Mat::Zero(1, d_v), "b_e");
    Param W_z(rng.normal_matrix(d_v, d_v, 0, 0.5), "W_z");
    Param b_z(Mat::Zero(1, d_v), "b_z");
    Mat keys = rng.normal_matrix(N, d_v, 0, 1);
    Vec w = address(keys, rng.normal_matrix(d_v, 1, 0, 1).col(0), 1.0);
    Mat proj = rng.normal_matrix(N, d_v, 0, 1);

    // Freeze the mask once: the binarization is non-differentiable by design
    // and must not flip under finite-difference probing.
    Mat A0 = adjacency(M_q.value, keys);
    Mat mask = adjacency_mask(A0 + Mat::Identity(N, N), 0.25);

    check_grads(
        {&M_q, &M_v, &W0, &W1, &W_r, &b_r, &W_e, &b_e, &W_z, &b_z},
        [&](Tape& t) {
            Var A = adjacency_t(t, t.param(M_q), keys);
            Var prop = propagation_t_frozen(t, A, mask);
            Var w_c = t.constant(w);
            Var h = t.row_scale(t.param(M_v), w_c);
            h = t.relu(t.matmul(t.block_lmul(prop, t.row_scale(h, w_c), B, N), t.param(W0)));
            h = t.relu(t.matmul(t.block_lmul(prop, t.row_scale(h, w_c), B, N), t.param(W1)));
            Var flat = t.rows_to_cols(h, B, N);
            Var r = t.tanh_(t.add_rowvec(t.matmul(flat, t.param(W_r)), t.param(b_r)));
            Var e = t.sigmoid_(t.add_rowvec(t.matmul(r, t.param(W_e)), t.param(b_e)));
            Var z = t.tanh_(t.add_rowvec(t.matmul(r, t.param(W_z)), t.param(b_z)));
            Var m_new = memory_update_t(t, t.param(M_v), w, e, z, B, N);
            return scalarize(t, m_new, proj);
        },
        1e-5, 1e-4);
}
