#include "doctest.h"

#include <cmath>
#include <complex>
#include <limits>

#include "common.hpp"
#include "mimo.hpp"

using namespace semkb;
using namespace semkb::mimo;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

cmat random_cmat(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  cmat m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = cplx{rng.gaussian(), rng.gaussian()};
  return m;
}

cvec random_cvec(int n, std::uint64_t seed) {
  Rng rng(seed);
  cvec v(n);
  for (int i = 0; i < n; ++i) v(i) = cplx{rng.gaussian(), rng.gaussian()};
  return v;
}

// empirical autocorrelation magnitude at a lag, averaged over entries
double trace_autocorr(const ChannelTrace& trace, int lag) {
  cplx acc{0.0, 0.0};
  double power = 0.0;
  const auto len = static_cast<int>(trace.length());
  for (int t = 0; t + lag < len; ++t) {
    const cmat& a = trace.h(static_cast<std::size_t>(t));
    const cmat& b = trace.h(static_cast<std::size_t>(t + lag));
    acc += (a.array() * b.array().conjugate()).sum();
    power += a.squaredNorm();
  }
  return std::abs(acc) / power;
}

}  // namespace

TEST_CASE("generate_trace: pure LOS is constant over time") {
  ChannelModelParams params;
  params.n_r = 4;
  params.n_t = 4;
  params.doppler_hz = 0.0;
  params.k_factor_db = kInf;
  auto trace = generate_trace(params, 11, 16);
  REQUIRE(trace.length() == 16);
  trace.validate();
  for (std::size_t t = 1; t < trace.length(); ++t) CHECK(trace.h(t) == trace.h(0));
  // unit-modulus LOS entries
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) CHECK(std::abs(trace.h(0)(r, c)) == doctest::Approx(1.0));

  // LOS stays constant even with nonzero Doppler (no scatter component)
  params.doppler_hz = 50.0;
  auto moving = generate_trace(params, 11, 8);
  for (std::size_t t = 1; t < moving.length(); ++t) CHECK(moving.h(t) == moving.h(0));
}

TEST_CASE("generate_trace: Rayleigh trace decorrelates with lag") {
  ChannelModelParams params;
  params.n_r = 16;
  params.n_t = 16;
  params.doppler_hz = 50.0;
  params.k_factor_db = -kInf;  // K = 0
  auto trace = generate_trace(params, 7, 64);
  trace.validate();
  CHECK(trace_autocorr(trace, 1) > trace_autocorr(trace, 32));
  // lag-1 correlation should be close to 1 for 50 Hz at 1 ms sampling
  CHECK(trace_autocorr(trace, 1) > 0.9);
}

TEST_CASE("generate_trace: deterministic per (params, seed)") {
  ChannelModelParams params;
  params.n_r = 3;
  params.n_t = 5;
  auto a = generate_trace(params, 42, 10);
  auto b = generate_trace(params, 42, 10);
  REQUIRE(a.length() == b.length());
  for (std::size_t t = 0; t < a.length(); ++t) CHECK(a.h(t) == b.h(t));
  auto c = generate_trace(params, 43, 10);
  CHECK(a.h(0) != c.h(0));
}

TEST_CASE("generate_trace: per-entry mean power near 1") {
  ChannelModelParams params;
  params.n_r = 16;
  params.n_t = 16;
  params.doppler_hz = 50.0;

  for (double k_db : {10.0, -kInf}) {
    params.k_factor_db = k_db;
    auto trace = generate_trace(params, 5, 64);  // 16*16*64 = 16384 samples
    double power = 0.0;
    std::size_t count = 0;
    for (std::size_t t = 0; t < trace.length(); ++t) {
      power += trace.h(t).squaredNorm();
      count += static_cast<std::size_t>(trace.h(t).size());
    }
    CHECK(power / static_cast<double>(count) == doctest::Approx(1.0).epsilon(0.05));
  }
}

TEST_CASE("generate_trace: rejects bad configs") {
  ChannelModelParams params;
  CHECK_THROWS_AS(generate_trace(params, 1, 0), error);
  params.n_r = 0;
  CHECK_THROWS_AS(generate_trace(params, 1, 4), error);
  params.n_r = 2;
  params.path_count = 0;
  CHECK_THROWS_AS(generate_trace(params, 1, 4), error);
  params.path_count = 4;
  params.sample_interval_ms = 0.0;
  CHECK_THROWS_AS(generate_trace(params, 1, 4), error);
}

TEST_CASE("svd_decompose: identity matrix") {
  auto triple = svd_decompose(cmat::Identity(4, 4));
  for (int i = 0; i < 4; ++i) CHECK(triple.s(i) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK((triple.u * triple.v.adjoint() - cmat::Identity(4, 4)).norm() < 1e-9);
}

TEST_CASE("svd_decompose: reconstruction and unitarity on random matrices") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const cmat h = random_cmat(16, 16, 1000 + seed);
    const auto triple = svd_decompose(h);
    const double rel = (triple.u * triple.sigma() * triple.v.adjoint() - h).norm() / h.norm();
    CHECK(rel <= 1e-10);
    CHECK((triple.u * triple.u.adjoint() - cmat::Identity(16, 16)).norm() < 1e-9);
    CHECK((triple.v * triple.v.adjoint() - cmat::Identity(16, 16)).norm() < 1e-9);
    for (int i = 1; i < triple.s.size(); ++i) CHECK(triple.s(i - 1) >= triple.s(i));
  }
}

TEST_CASE("svd_decompose: zero row gives zero singular value") {
  cmat h = random_cmat(4, 4, 9);
  h.row(2).setZero();
  const auto triple = svd_decompose(h);
  CHECK(triple.s(triple.s.size() - 1) <= 1e-12);
}

TEST_CASE("svd_decompose: rejects non-finite input") {
  cmat h = cmat::Zero(2, 2);
  h(0, 0) = cplx{std::nan(""), 0.0};
  CHECK_THROWS_AS(svd_decompose(h), error);
}

TEST_CASE("precode: identity right singular vectors pass z through") {
  auto triple = svd_decompose(cmat::Identity(4, 4));
  PrecodeConfig cfg;
  cfg.d = 4;
  const cvec z = random_cvec(4, 2);
  const cvec x = precode(z, triple, cfg);
  CHECK(x.norm() == doctest::Approx(z.norm()));
  CHECK((triple.v.adjoint() * x - z).norm() < 1e-12);
}

TEST_CASE("precode: hand-computed single-stream case") {
  SvdTriple triple;
  triple.u = cmat::Identity(2, 2);
  triple.s = rvec::Ones(2);
  triple.v.resize(2, 2);
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  triple.v << cplx{inv_sqrt2, 0.0}, cplx{inv_sqrt2, 0.0},
      cplx{0.0, inv_sqrt2}, cplx{0.0, -inv_sqrt2};
  PrecodeConfig cfg;
  cfg.d = 1;
  cvec z(1);
  z << cplx{2.0, 0.0};
  const cvec x = precode(z, triple, cfg);
  CHECK(std::abs(x(0) - cplx{std::sqrt(2.0), 0.0}) < 1e-12);
  CHECK(std::abs(x(1) - cplx{0.0, std::sqrt(2.0)}) < 1e-12);
}

TEST_CASE("precode: zero input, energy preservation, shape errors") {
  const cmat h = random_cmat(6, 4, 21);
  const auto triple = svd_decompose(h);
  PrecodeConfig cfg;
  cfg.d = 3;
  CHECK(precode(cvec::Zero(3), triple, cfg).norm() == 0.0);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const cvec z = random_cvec(3, 100 + seed);
    CHECK(precode(z, triple, cfg).norm() == doctest::Approx(z.norm()).epsilon(1e-9));
  }
  CHECK_THROWS_AS(precode(cvec::Zero(2), triple, cfg), error);
  cfg.d = 5;  // exceeds min(N_r, N_t)
  CHECK_THROWS_AS(precode(cvec::Zero(5), triple, cfg), error);
}

TEST_CASE("transmit: noiseless sentinel and determinism") {
  const cmat h = random_cmat(4, 3, 31);
  const cvec x = random_cvec(3, 32);
  NoiseModel noiseless;
  noiseless.snr_db = kInf;
  CHECK((transmit(x, h, noiseless) - h * x).norm() == 0.0);

  NoiseModel noisy;
  noisy.snr_db = 10.0;
  noisy.rng_seed = 77;
  const cvec y1 = transmit(x, h, noisy);
  const cvec y2 = transmit(x, h, noisy);
  CHECK(y1 == y2);
  CHECK((y1 - h * x).norm() > 0.0);

  CHECK_THROWS_AS(transmit(random_cvec(4, 1), h, noisy), error);
}

TEST_CASE("transmit: empirical SNR matches configured SNR") {
  const cmat h = random_cmat(4, 4, 41);
  const cvec x = random_cvec(4, 42);
  const double snr_db = 12.0;
  const int draws = 100000;
  double noise_power = 0.0;
  for (int i = 0; i < draws; ++i) {
    NoiseModel noise;
    noise.snr_db = snr_db;
    noise.rng_seed = static_cast<std::uint64_t>(i);
    noise_power += (transmit(x, h, noise) - h * x).squaredNorm();
  }
  const double sigma2 = noise_power / (4.0 * draws);
  const double est_db = 10.0 * std::log10(x.squaredNorm() / (4.0 * sigma2));
  CHECK(std::abs(est_db - snr_db) <= 0.2);
}

TEST_CASE("detect: noiseless chain equals sigma-scaled streams") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const cmat h = random_cmat(6, 5, 200 + seed);
    const auto triple = svd_decompose(h);
    PrecodeConfig cfg;
    cfg.d = 4;
    const cvec z = random_cvec(4, 300 + seed);
    NoiseModel noiseless;
    noiseless.snr_db = kInf;
    const cvec y = transmit(precode(z, triple, cfg), h, noiseless);
    const cvec detected = detect(y, triple, cfg);
    for (int i = 0; i < cfg.d; ++i)
      CHECK(std::abs(detected(i) - triple.s(i) * z(i)) < 1e-9);

    cfg.equalize = true;
    const cvec recovered = detect(y, triple, cfg);
    CHECK((recovered - z).norm() < 1e-9);
  }
}

TEST_CASE("detect: zero input and rank-deficient equalization") {
  const cmat h = random_cmat(4, 4, 51);
  const auto triple = svd_decompose(h);
  PrecodeConfig cfg;
  cfg.d = 2;
  CHECK(detect(cvec::Zero(4), triple, cfg).norm() == 0.0);

  // rank-1 channel: second stream's singular value vanishes
  cmat rank1 = cmat::Zero(3, 3);
  rank1.row(0) = random_cvec(3, 52).transpose();
  const auto deficient = svd_decompose(rank1);
  PrecodeConfig eq;
  eq.d = 2;
  eq.equalize = true;
  std::vector<int> zeroed;
  const cvec out = detect(random_cvec(3, 53), deficient, eq, &zeroed);
  REQUIRE(zeroed.size() == 1);
  CHECK(zeroed[0] == 1);
  CHECK(out(1) == cplx{0.0, 0.0});
}

TEST_CASE("quantize_feedback: fine quantization is near-lossless") {
  const cmat v_d = random_cmat(16, 4, 61);
  // 16 bits per component
  const cmat q16 = quantize_feedback(v_d, 2 * 16 * 4 * 16);
  CHECK((q16 - v_d).norm() / v_d.norm() <= 1e-3);
}

TEST_CASE("quantize_feedback: one bit preserves sign pattern") {
  cmat v_d(2, 2);
  v_d << cplx{0.5, -0.5}, cplx{-0.5, 0.5}, cplx{0.5, 0.5}, cplx{-0.5, -0.5};
  const cmat q = quantize_feedback(v_d, 1);  // floors to 1 bit/component
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) {
      CHECK(std::signbit(q(r, c).real()) == std::signbit(v_d(r, c).real()));
      CHECK(std::signbit(q(r, c).imag()) == std::signbit(v_d(r, c).imag()));
    }
}

TEST_CASE("quantize_feedback: error non-increasing in bit budget") {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const cmat v_d = random_cmat(16, 4, 400 + seed);
    double prev = std::numeric_limits<double>::infinity();
    for (std::int64_t bits : {32, 64, 128, 256, 512, 1024, 4096}) {
      const double err = (quantize_feedback(v_d, bits) - v_d).norm();
      CHECK(err <= prev + 1e-12);
      prev = err;
    }
    CHECK((quantize_feedback(v_d, 128) - v_d).norm() >=
          (quantize_feedback(v_d, 512) - v_d).norm());
  }
}

TEST_CASE("quantize_feedback: rejects zero bit budget, handles zero matrix") {
  const cmat v_d = random_cmat(2, 2, 71);
  CHECK_THROWS_AS(quantize_feedback(v_d, 0), error);
  CHECK(quantize_feedback(cmat::Zero(3, 3), 64).norm() == 0.0);
}

TEST_CASE("channel trace validation and slicing") {
  ChannelModelParams params;
  params.n_r = 2;
  params.n_t = 2;
  auto trace = generate_trace(params, 3, 8);
  auto sub = trace.slice(2, 4);
  REQUIRE(sub.length() == 4);
  CHECK(sub.h(0) == trace.h(2));
  CHECK(sub.realizations[0].t_index == 2);
  CHECK_THROWS_AS(trace.slice(6, 4), error);

  trace.realizations[3].t_index = trace.realizations[2].t_index;
  CHECK_THROWS_AS(trace.validate(), error);
}
