#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "lpsac/lpsim.hpp"
#include "oracle.hpp"

using namespace lpsac;

namespace {

const FloatFormat kFp16 = FloatFormat::fp16();

bool same(double a, double b) {
  if (std::isnan(a) || std::isnan(b)) return std::isnan(a) && std::isnan(b);
  return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
}

double random_real(std::mt19937_64& rng) {
  // Mix of log-uniform magnitudes across and beyond the fp16 range and
  // values sitting exactly on fp16 rounding midpoints.
  switch (rng() % 4) {
    case 0: return oracle::log_uniform(rng, -30, 17);
    case 1: {
      const std::uint16_t h = static_cast<std::uint16_t>(rng() & 0x7bff);
      const double a = oracle::half_bits_to_double(h);
      const double b = oracle::half_bits_to_double(static_cast<std::uint16_t>(h + 1));
      return (rng() & 1 ? 1 : -1) * 0.5 * (a + b);
    }
    case 2: return std::uniform_real_distribution<double>(-70000, 70000)(rng);
    default: return std::bit_cast<double>(rng());
  }
}

}  // namespace

TEST(FloatFormat, DerivedConstants) {
  const auto c = format_constants(kFp16);
  EXPECT_EQ(c.max_finite, 65504.0);
  EXPECT_EQ(c.min_normal, std::ldexp(1.0, -14));
  EXPECT_EQ(c.min_subnormal, std::ldexp(1.0, -24));
  EXPECT_EQ(c.epsilon, std::ldexp(1.0, -10));
  EXPECT_EQ(kFp16.bias(), 15);

  const auto s = format_constants(FloatFormat{8, 23});
  EXPECT_EQ(s.max_finite, static_cast<double>(std::numeric_limits<float>::max()));
  EXPECT_EQ(s.min_normal, static_cast<double>(std::numeric_limits<float>::min()));
  EXPECT_EQ(s.min_subnormal, static_cast<double>(std::numeric_limits<float>::denorm_min()));
}

TEST(FloatFormat, ClosedFormConstantsForSweepFormats) {
  for (int m = 1; m <= 23; ++m) {
    const FloatFormat f{5, m};
    EXPECT_EQ(f.max_finite(), (2.0 - std::ldexp(1.0, -m)) * 32768.0);
    EXPECT_EQ(f.epsilon(), std::ldexp(1.0, -m));
  }
}

TEST(FloatFormat, ParseAndValidate) {
  EXPECT_EQ(FloatFormat::parse("e5m10"), kFp16);
  EXPECT_EQ(FloatFormat::parse("e8m23"), FloatFormat::fp32());
  const auto fz = FloatFormat::parse("e5m7fz");
  EXPECT_EQ(fz.significand_bits, 7);
  EXPECT_FALSE(fz.subnormals);
  EXPECT_EQ(fz.spec(), "e5m7fz");
  for (const char* bad : {"", "e5", "m10", "e5m", "e1m10", "e5m0", "e12m3", "e5m53", "e5m10x", "f5m10"}) {
    EXPECT_THROW(FloatFormat::parse(bad), FormatError) << bad;
  }
  for (const auto& f : {kFp16, FloatFormat::bf16(), FloatFormat{4, 3, false}}) {
    EXPECT_EQ(FloatFormat::parse(f.spec()), f);
  }
}

TEST(Quantize, SpecExamples) {
  EXPECT_EQ(quantize(kFp16, 1.0), 1.0);
  EXPECT_EQ(quantize(kFp16, 1.0 + std::ldexp(1.0, -11)), 1.0);
  EXPECT_EQ(quantize(kFp16, std::ldexp(1.0, -25)), 0.0);
  EXPECT_EQ(quantize(kFp16, 65520.0), INFINITY);
  EXPECT_EQ(quantize(kFp16, 65519.0), 65504.0);
  EXPECT_EQ(quantize(kFp16, -65520.0), -INFINITY);
  EXPECT_TRUE(std::isnan(quantize(kFp16, NAN)));
  EXPECT_TRUE(std::signbit(quantize(kFp16, -1e-30)));
  for (double x : {1.0 + std::ldexp(1.0, -11), std::ldexp(1.0, -25), 65520.0}) {
    EXPECT_TRUE(same(quantize(kFp16, x), oracle::half_round_trip(x))) << x;
  }
}

TEST(Quantize, QopExamples) {
  EXPECT_EQ(qop(kFp16, Op::Add, 2048, 1), 2048.0);
  EXPECT_EQ(qop(kFp16, Op::Add, 2048, 1), oracle::half_round_trip(2049.0));
  EXPECT_EQ(qop(kFp16, Op::Add, 3.0, 4.0), 7.0);
  EXPECT_EQ(qop(kFp16, Op::Mul, 1e-4, 1e-4), 0.0);
  EXPECT_EQ(qop(FloatFormat{5, 10, false}, Op::Mul, 1e-4, 1e-4), 0.0);
  EXPECT_EQ(qop(kFp16, Op::Sqrt, 4.0), 2.0);
  EXPECT_EQ(qop(kFp16, Op::Log, 1.0), 0.0);
  EXPECT_EQ(qop(kFp16, Op::Exp, 12.0), INFINITY);
  EXPECT_EQ(qop(kFp16, Op::Log1p, 0.0), 0.0);
  EXPECT_EQ(qop(kFp16, Op::Tanh, 20.0), 1.0);
  EXPECT_EQ(qop(kFp16, Op::Div, 1.0, 3.0), oracle::half_round_trip(1.0 / 3.0));
  EXPECT_EQ(qop(kFp16, Op::Sub, 1.0, 1.0), 0.0);
  EXPECT_TRUE(std::isnan(qop(kFp16, Op::Sub, INFINITY, INFINITY)));
}

TEST(Quantize, Fp16AgreesWithBitLevelOracle) {
  std::mt19937_64 rng(1234);
  const Quantizer q(kFp16);
  for (int i = 0; i < 100000; ++i) {
    const double x = random_real(rng);
    const double got = q(x);
    const double want = oracle::half_round_trip(x);
    ASSERT_TRUE(same(got, want) || (std::isnan(got) && std::isnan(want))) << "x=" << x;
  }
}

TEST(Quantize, EveryFp16ValueIsExact) {
  const Quantizer q(kFp16);
  for (std::uint32_t h = 0; h < 0x10000; ++h) {
    const double x = oracle::half_bits_to_double(static_cast<std::uint16_t>(h));
    if (std::isnan(x)) continue;
    ASSERT_TRUE(same(q(x), x)) << h;
  }
}

TEST(Quantize, GenericFormatsAgreeWithRintOracle) {
  std::mt19937_64 rng(99);
  for (int e : {3, 5, 8}) {
    for (int m : {1, 3, 5, 7, 10, 23}) {
      for (bool sub : {true, false}) {
        const FloatFormat f{e, m, sub};
        const Quantizer q(f);
        const double lo = -static_cast<double>(f.bias()) - m - 4;
        const double hi = f.bias() + 2;
        for (int i = 0; i < 5000; ++i) {
          const double x = oracle::log_uniform(rng, lo, hi);
          ASSERT_TRUE(same(q(x), oracle::round_to_format(x, e, m, sub))) << f.spec() << " x=" << x;
        }
      }
    }
  }
}

TEST(Quantize, Properties) {
  std::mt19937_64 rng(7);
  const std::vector<FloatFormat> formats = {kFp16, FloatFormat::bf16(), FloatFormat{5, 3}, FloatFormat{5, 6, false},
                                            FloatFormat::fp32()};
  for (const auto& f : formats) {
    const Quantizer q(f);
    for (int i = 0; i < 20000; ++i) {
      const double x = oracle::log_uniform(rng, -40, 40);
      const double y = oracle::log_uniform(rng, -40, 40);
      const double qx = q(x);
      EXPECT_TRUE(same(q(qx), qx)) << "idempotence " << f.spec();
      EXPECT_TRUE(same(q(-x), -qx)) << "sign symmetry " << f.spec();
      if (x <= y) {
        EXPECT_LE(qx, q(y)) << "monotonicity " << f.spec();
      }
      if (std::isfinite(qx)) {
        EXPECT_EQ(quantize(f, qx), qx) << "exactness " << f.spec();
      }
    }
  }
}

TEST(Quantize, WideningNeverIncreasesError) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 20000; ++i) {
    const double x = oracle::log_uniform(rng, -14, 15);
    double prev = INFINITY;
    for (int m = 3; m <= 23; ++m) {
      const double err = std::fabs(quantize(FloatFormat{5, m}, x) - x);
      ASSERT_LE(err, prev) << "x=" << x << " m=" << m;
      prev = err;
    }
  }
}

TEST(Quantize, SubnormalFlag) {
  const double x = std::ldexp(1.0, -20);
  EXPECT_EQ(quantize(kFp16, x), x);
  EXPECT_EQ(quantize(FloatFormat{5, 10, false}, x), 0.0);
  EXPECT_EQ(quantize(FloatFormat{5, 10, false}, std::ldexp(1.0, -14)), std::ldexp(1.0, -14));
}

TEST(Quantizer, WideIsIdentity) {
  std::mt19937_64 rng(3);
  const Quantizer w = Quantizer::wide();
  EXPECT_TRUE(w.is_wide());
  for (int i = 0; i < 1000; ++i) {
    const double x = std::bit_cast<double>(rng());
    EXPECT_TRUE(same(w(x), x));
  }
  EXPECT_EQ(w.describe(), "wide");
}

TEST(Quantizer, CoerceMapsNonFinite) {
  const Quantizer q(kFp16, true);
  EXPECT_EQ(q(NAN), 0.0);
  EXPECT_EQ(q(1e9), 65504.0);
  EXPECT_EQ(q(-INFINITY), -65504.0);
  EXPECT_EQ(q.exp(50.0), 65504.0);
  EXPECT_EQ(q.sub(INFINITY, INFINITY), 0.0);
  EXPECT_EQ(q(1.5), 1.5);
  EXPECT_EQ(q.describe(), "e5m10+coerce");
}

TEST(EmulatedScalar, ValuesStayRepresentable) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 2000; ++i) {
    const EmulatedScalar a(kFp16, oracle::log_uniform(rng, -10, 8));
    const EmulatedScalar b(kFp16, oracle::log_uniform(rng, -10, 8));
    for (const auto& r : {a + b, a - b, a * b, a / b}) {
      EXPECT_TRUE(same(quantize(kFp16, r.value()), r.value()));
    }
  }
  EXPECT_EQ((EmulatedScalar(kFp16, 2048) + EmulatedScalar(kFp16, 1)).value(), 2048.0);
}
