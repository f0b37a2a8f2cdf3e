// SPDX-License-Identifier: Apache-2.0
//
// Software emulation of reduced-precision binary floating-point formats.
//
// Every primitive computes in double precision and then rounds the result
// into the target format (round-to-nearest-even). Values are carried as
// doubles that are exactly representable in their format.

#pragma once

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>

namespace lpsac {

/// Thrown for malformed format descriptions ("e5m10", "e5m7fz", ...).
class FormatError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Rounding { NearestEven };

struct FormatConstants {
  double max_finite;
  double min_normal;
  double min_subnormal;
  double epsilon;
};

/// A binary floating-point format with a sign bit, `exponent_bits` of biased
/// exponent and `significand_bits` of stored fraction.
///
/// The double carrier bounds the formats that can be emulated: at most 11
/// exponent bits and 52 fraction bits.
struct FloatFormat {
  int exponent_bits = 5;
  int significand_bits = 10;
  bool subnormals = true;
  Rounding rounding = Rounding::NearestEven;

  static constexpr FloatFormat fp16() { return {5, 10, true, Rounding::NearestEven}; }
  static constexpr FloatFormat fp32() { return {8, 23, true, Rounding::NearestEven}; }
  static constexpr FloatFormat bf16() { return {8, 7, true, Rounding::NearestEven}; }
  static constexpr FloatFormat fp64() { return {11, 52, true, Rounding::NearestEven}; }

  constexpr int bias() const { return (1 << (exponent_bits - 1)) - 1; }

  double max_finite() const {
    return std::ldexp(2.0 - std::ldexp(1.0, -significand_bits), bias());
  }
  double min_normal() const { return std::ldexp(1.0, 1 - bias()); }
  double min_subnormal() const {
    return subnormals ? std::ldexp(1.0, 1 - bias() - significand_bits) : min_normal();
  }
  double epsilon() const { return std::ldexp(1.0, -significand_bits); }

  void validate() const {
    if (exponent_bits < 2 || exponent_bits > 11) {
      throw FormatError("exponent_bits must lie in [2, 11], got " +
                        std::to_string(exponent_bits));
    }
    if (significand_bits < 1 || significand_bits > 52) {
      throw FormatError("significand_bits must lie in [1, 52], got " +
                        std::to_string(significand_bits));
    }
  }

  /// Canonical textual form, e.g. "e5m10" or "e5m10fz" for flush-to-zero.
  std::string spec() const {
    std::string s = "e" + std::to_string(exponent_bits) + "m" + std::to_string(significand_bits);
    if (!subnormals) s += "fz";
    return s;
  }

  /// Parses "e<E>m<M>[fz]".
  static FloatFormat parse(std::string_view text) {
    auto fail = [&] { return FormatError("invalid format spec '" + std::string(text) + "'"); };
    if (text.size() < 4 || text[0] != 'e') throw fail();
    FloatFormat f;
    const char* p = text.data() + 1;
    const char* end = text.data() + text.size();
    auto r1 = std::from_chars(p, end, f.exponent_bits);
    if (r1.ec != std::errc{} || r1.ptr == end || *r1.ptr != 'm') throw fail();
    auto r2 = std::from_chars(r1.ptr + 1, end, f.significand_bits);
    if (r2.ec != std::errc{}) throw fail();
    std::string_view rest(r2.ptr, static_cast<std::size_t>(end - r2.ptr));
    if (rest == "fz") {
      f.subnormals = false;
    } else if (!rest.empty()) {
      throw fail();
    }
    f.validate();
    return f;
  }

  friend bool operator==(const FloatFormat&, const FloatFormat&) = default;
};

inline FormatConstants format_constants(const FloatFormat& fmt) {
  fmt.validate();
  return {fmt.max_finite(), fmt.min_normal(), fmt.min_subnormal(), fmt.epsilon()};
}

/// Rounds doubles into a fixed format. Holds the precomputed bit masks, so
/// construct once and reuse; the call operator is branch-free and inlines
/// into vectorized loops.
///
/// A default-constructed (or `wide()`) quantizer is the identity, which is
/// how double-precision reference runs share code with emulated runs.
/// `coerce` additionally maps NaN to 0 and +-inf to +-max_finite after every
/// rounding, the classic "numeric coercion" workaround.
class Quantizer {
 public:
  Quantizer() = default;

  explicit Quantizer(const FloatFormat& fmt, bool coerce = false)
      : wide_(false), coerce_(coerce), format_(fmt) {
    fmt.validate();
    const int shift = 52 - fmt.significand_bits;
    if (shift > 0) {
      half_minus_one_ = (std::int64_t{1} << (shift - 1)) - 1;
      lsb_mask_ = std::int64_t{1} << shift;
    }
    lsb_shift_ = shift;
    keep_mask_ = ~((std::int64_t{1} << shift) - 1);
    max_finite_ = fmt.max_finite();
    max_bits_ = std::bit_cast<std::int64_t>(max_finite_);
    min_normal_ = fmt.min_normal();
    min_normal_bits_ = std::bit_cast<std::int64_t>(min_normal_);
    // Adding 2^52 * min_subnormal rounds anything below it to a multiple of
    // min_subnormal with the FPU's own round-to-nearest-even.
    sub_magic_ = std::ldexp(1.0, 1 - fmt.bias() - fmt.significand_bits + 52);
    subnormal_mask_ = fmt.subnormals ? -1 : 0;
  }

  static Quantizer wide() { return Quantizer(); }

  bool is_wide() const { return wide_; }
  bool coerces() const { return coerce_; }
  const FloatFormat& format() const { return format_; }
  double max_finite() const { return wide_ ? std::numeric_limits<double>::max() : max_finite_; }
  double min_normal() const { return wide_ ? std::numeric_limits<double>::min() : min_normal_; }

  /// Human-readable description ("wide", "e5m10", "e5m10+coerce").
  std::string describe() const {
    if (wide_) return "wide";
    return coerce_ ? format_.spec() + "+coerce" : format_.spec();
  }

  double operator()(double x) const {
    if (wide_) return x;
    return round(x);
  }

  /// Rounding without the wide shortcut; callers that dispatch on
  /// `is_wide()` once per kernel use this in the inner loop.
  double round(double x) const {
    const double y = round_plain(x);
    return coerce_ ? coerce(y) : y;
  }

  /// round() without coercion. Free of branches, so loops calling it
  /// vectorize.
  double round_plain(double x) const {
    // Signed 64-bit compares on sign-cleared patterns keep every select
    // vectorizable.
    const auto bits = std::bit_cast<std::int64_t>(x);
    const std::int64_t sign = bits & kSignBit;
    const std::int64_t mag = bits ^ sign;

    const std::int64_t lsb = (mag & lsb_mask_) >> lsb_shift_;
    std::int64_t r = (mag + half_minus_one_ + lsb) & keep_mask_;
    r = r > max_bits_ ? kInfBits : r;

    const double a = std::bit_cast<double>(mag);
    const double sub = (a + sub_magic_) - sub_magic_;
    const std::int64_t flushed = r < min_normal_bits_ ? 0 : min_normal_bits_;
    const std::int64_t small = (std::bit_cast<std::int64_t>(sub) & subnormal_mask_) | (flushed & ~subnormal_mask_);
    r = mag < min_normal_bits_ ? small : r;

    r = mag > kInfBits ? mag : r;  // NaN payloads pass through
    return std::bit_cast<double>(r | sign);
  }

  double coerce(double y) const {
    y = y != y ? 0.0 : y;
    y = y > max_finite_ ? max_finite_ : y;
    y = y < -max_finite_ ? -max_finite_ : y;
    return y;
  }

  // Arithmetic primitives: compute in double, round into the format.
  double add(double a, double b) const { return (*this)(a + b); }
  double sub(double a, double b) const { return (*this)(a - b); }
  double mul(double a, double b) const { return (*this)(a * b); }
  double div(double a, double b) const { return (*this)(a / b); }
  double sqrt(double a) const { return (*this)(std::sqrt(a)); }
  double exp(double a) const { return (*this)(std::exp(a)); }
  double log(double a) const { return (*this)(std::log(a)); }
  double log1p(double a) const { return (*this)(std::log1p(a)); }
  double tanh(double a) const { return (*this)(std::tanh(a)); }

 private:
  static constexpr std::int64_t kSignBit = std::numeric_limits<std::int64_t>::min();
  static constexpr std::int64_t kInfBits = 0x7ff0000000000000LL;

  bool wide_ = true;
  bool coerce_ = false;
  FloatFormat format_ = FloatFormat::fp64();
  std::int64_t half_minus_one_ = 0;
  std::int64_t lsb_mask_ = 0;
  int lsb_shift_ = 0;
  std::int64_t keep_mask_ = -1;
  std::int64_t max_bits_ = 0;
  std::int64_t min_normal_bits_ = 0;
  double max_finite_ = std::numeric_limits<double>::max();
  double min_normal_ = std::numeric_limits<double>::min();
  double sub_magic_ = 0.0;
  std::int64_t subnormal_mask_ = -1;
};

/// Nearest value of `fmt` to `x` under round-to-nearest-even.
inline double quantize(const FloatFormat& fmt, double x) { return Quantizer(fmt)(x); }

enum class Op { Add, Sub, Mul, Div, Sqrt, Exp, Log, Log1p, Tanh };

/// Applies one primitive in double precision and rounds the result into
/// `fmt`. Unary ops ignore `b`.
inline double qop(const Quantizer& q, Op op, double a, double b = 0.0) {
  switch (op) {
    case Op::Add: return q.add(a, b);
    case Op::Sub: return q.sub(a, b);
    case Op::Mul: return q.mul(a, b);
    case Op::Div: return q.div(a, b);
    case Op::Sqrt: return q.sqrt(a);
    case Op::Exp: return q.exp(a);
    case Op::Log: return q.log(a);
    case Op::Log1p: return q.log1p(a);
    case Op::Tanh: return q.tanh(a);
  }
  return std::numeric_limits<double>::quiet_NaN();
}

inline double qop(const FloatFormat& fmt, Op op, double a, double b = 0.0) {
  return qop(Quantizer(fmt), op, a, b);
}

/// A value together with the format it is representable in.
class EmulatedScalar {
 public:
  EmulatedScalar(const FloatFormat& fmt, double x) : format_(fmt), value_(quantize(fmt, x)) {}

  double value() const { return value_; }
  const FloatFormat& format() const { return format_; }

  EmulatedScalar operator+(const EmulatedScalar& o) const { return {format_, value_ + o.value_}; }
  EmulatedScalar operator-(const EmulatedScalar& o) const { return {format_, value_ - o.value_}; }
  EmulatedScalar operator*(const EmulatedScalar& o) const { return {format_, value_ * o.value_}; }
  EmulatedScalar operator/(const EmulatedScalar& o) const { return {format_, value_ / o.value_}; }

 private:
  FloatFormat format_;
  double value_;
};

}  // namespace lpsac
