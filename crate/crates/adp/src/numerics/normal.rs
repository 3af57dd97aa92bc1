//! Standard normal CDF and quantile.
//!
//! `erf`/`erfc` use Cody's rational Chebyshev approximations (relative error
//! below 1e-15 in double precision); the quantile uses Wichura's AS 241
//! double-precision branch. Round-tripping `inv_std_normal_cdf` with
//! `std_normal_cdf` holds to better than 1e-9 over `[-6, 6]`.

use crate::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
// 1/sqrt(pi)
const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_286_95;

// Cody (1969) coefficient sets for erf on [0, 0.46875] ...
const ERF_A: [f64; 5] = [
    3.161_123_743_870_565_6e0,
    1.138_641_541_510_501_56e2,
    3.774_852_376_853_020_2e2,
    3.209_377_589_138_469_47e3,
    1.857_777_061_846_031_53e-1,
];
const ERF_B: [f64; 4] = [
    2.360_129_095_234_412_09e1,
    2.440_246_379_344_441_73e2,
    1.282_616_526_077_372_28e3,
    2.844_236_833_439_170_62e3,
];
// ... erfc on (0.46875, 4] ...
const ERF_C: [f64; 9] = [
    5.641_884_969_886_700_89e-1,
    8.883_149_794_388_375_94e0,
    6.611_919_063_714_162_95e1,
    2.986_351_381_974_001_31e2,
    8.819_522_212_417_690_9e2,
    1.712_047_612_634_070_58e3,
    2.051_078_377_826_071_47e3,
    1.230_339_354_797_997_25e3,
    2.153_115_354_744_038_46e-8,
];
const ERF_D: [f64; 8] = [
    1.574_492_611_070_983_47e1,
    1.176_939_508_913_124_99e2,
    5.371_811_018_620_098_58e2,
    1.621_389_574_566_690_19e3,
    3.290_799_235_733_459_63e3,
    4.362_619_090_143_247_16e3,
    3.439_367_674_143_721_64e3,
    1.230_339_354_803_749_42e3,
];
// ... and erfc on (4, inf).
const ERF_P: [f64; 6] = [
    3.053_266_349_612_323_44e-1,
    3.603_448_999_498_044_39e-1,
    1.257_817_261_112_292_46e-1,
    1.608_378_514_874_227_66e-2,
    6.587_491_615_298_378_03e-4,
    1.631_538_713_730_209_78e-2,
];
const ERF_Q: [f64; 5] = [
    2.568_520_192_289_822_42e0,
    1.872_952_849_923_460_47e0,
    5.279_051_029_514_284_12e-1,
    6.051_834_131_244_131_91e-2,
    2.335_204_976_268_691_85e-3,
];

/// Complementary error function for non-negative arguments.
fn erfc_nonneg(y: f64) -> f64 {
    debug_assert!(y >= 0.0);
    if y <= 0.46875 {
        return 1.0 - erf_small(y);
    }
    let result = if y <= 4.0 {
        let mut num = ERF_C[8] * y;
        let mut den = y;
        for i in 0..7 {
            num = (num + ERF_C[i]) * y;
            den = (den + ERF_D[i]) * y;
        }
        (num + ERF_C[7]) / (den + ERF_D[7])
    } else {
        if y >= 26.543 {
            return 0.0;
        }
        let z = 1.0 / (y * y);
        let mut num = ERF_P[5] * z;
        let mut den = z;
        for i in 0..4 {
            num = (num + ERF_P[i]) * z;
            den = (den + ERF_Q[i]) * z;
        }
        let r = z * (num + ERF_P[4]) / (den + ERF_Q[4]);
        (FRAC_1_SQRT_PI - r) / y
    };
    // split exp(-y^2) to preserve accuracy for large y
    let ysq = (y * 16.0).trunc() / 16.0;
    let del = (y - ysq) * (y + ysq);
    (-ysq * ysq).exp() * (-del).exp() * result
}

/// erf on |x| <= 0.46875.
fn erf_small(x: f64) -> f64 {
    let z = x * x;
    let mut num = ERF_A[4] * z;
    let mut den = z;
    for i in 0..3 {
        num = (num + ERF_A[i]) * z;
        den = (den + ERF_B[i]) * z;
    }
    x * (num + ERF_A[3]) / (den + ERF_B[3])
}

fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        2.0 - erfc_nonneg(-x)
    } else {
        erfc_nonneg(x)
    }
}

/// Standard normal CDF `phi(z)`.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

// AS 241 PPND16 coefficients.
const PPND_A: [f64; 8] = [
    3.387_132_872_796_366_608e0,
    1.331_416_678_917_843_774_5e2,
    1.971_590_950_306_551_442_7e3,
    1.373_169_376_550_946_110_9e4,
    4.592_195_393_154_987_149_7e4,
    6.726_577_092_700_870_069_9e4,
    3.343_057_558_358_812_810_5e4,
    2.509_080_928_730_122_677_7e3,
];
const PPND_B: [f64; 7] = [
    4.231_333_070_160_091_123_2e1,
    6.871_870_074_920_579_083e2,
    5.394_196_021_424_751_107_7e3,
    2.121_379_430_158_659_586_8e4,
    3.930_789_580_009_271_061_1e4,
    2.872_908_573_572_194_267_4e4,
    5.226_495_278_852_545_661e3,
];
const PPND_C: [f64; 8] = [
    1.423_437_110_749_683_577_3e0,
    4.630_337_846_156_545_295_9e0,
    5.769_497_221_460_691_405_5e0,
    3.647_848_324_763_204_605e0,
    1.270_458_252_452_368_382_6e0,
    2.417_807_251_774_506_117_7e-1,
    2.272_384_498_926_918_458_3e-2,
    7.745_450_142_783_414_076_4e-4,
];
const PPND_D: [f64; 7] = [
    2.053_191_626_637_758_821_87e0,
    1.676_384_830_183_803_849_4e0,
    6.897_673_349_851e-1,
    1.481_039_764_274_800_745_9e-1,
    1.519_866_656_361_645_719_66e-2,
    5.475_938_084_995_344_946e-4,
    1.050_750_071_644_416_843_23e-9,
];
const PPND_E: [f64; 8] = [
    6.657_904_643_501_103_777_2e0,
    5.463_784_911_164_114_369e0,
    1.784_826_539_917_291_335_8e0,
    2.965_605_718_285_048_912_4e-1,
    2.653_218_952_657_612_308_3e-2,
    1.242_660_947_388_078_443_6e-3,
    2.711_555_568_743_487_578_2e-5,
    2.010_334_399_292_288_132_65e-7,
];
const PPND_F: [f64; 7] = [
    5.998_322_065_558_879_378_7e-1,
    1.369_298_809_227_358_053_1e-1,
    1.487_536_129_085_061_485_25e-2,
    7.868_691_311_456_132_591e-4,
    1.846_318_317_510_054_681_77e-5,
    1.421_511_758_316_445_888_7e-7,
    2.044_263_103_389_939_785_64e-15,
];

fn poly8_over_poly7(num: &[f64; 8], den: &[f64; 7], r: f64) -> f64 {
    let mut n = num[7];
    for i in (0..7).rev() {
        n = n * r + num[i];
    }
    let mut d = den[6];
    for i in (0..6).rev() {
        d = d * r + den[i];
    }
    n / (d * r + 1.0)
}

/// Standard normal quantile `phi^{-1}(p)` for `p` in the open unit interval.
pub fn inv_std_normal_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "inverse normal CDF requires p in (0, 1), got {p}"
        )));
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let mut n = PPND_A[7];
        for i in (0..7).rev() {
            n = n * r + PPND_A[i];
        }
        let mut d = PPND_B[6];
        for i in (0..6).rev() {
            d = d * r + PPND_B[i];
        }
        return Ok(q * n / (d * r + 1.0));
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let value = if r <= 5.0 {
        r -= 1.6;
        poly8_over_poly7(&PPND_C, &PPND_D, r)
    } else {
        r -= 5.0;
        poly8_over_poly7(&PPND_E, &PPND_F, r)
    };
    Ok(if q < 0.0 { -value } else { value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Quadrature oracle for phi(z): trapezoid integration of the density
    /// from 0 to |z| with a fine fixed grid. Independent of the erf route.
    fn cdf_oracle(z: f64) -> f64 {
        let steps = 400_000usize;
        let a = z.abs();
        let h = a / steps as f64;
        let dens = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = 0.5 * (dens(0.0) + dens(a));
        for i in 1..steps {
            acc += dens(i as f64 * h);
        }
        let half = acc * h;
        if z >= 0.0 {
            0.5 + half
        } else {
            0.5 - half
        }
    }

    #[test]
    fn cdf_at_zero_is_half() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
    }

    #[test]
    fn cdf_matches_quadrature_oracle() {
        // frozen from the oracle above
        assert_abs_diff_eq!(std_normal_cdf(1.0), 0.841344746068543, epsilon = 1e-12);
        for &z in &[-3.0, -1.5, -0.3, 0.7, 2.0, 4.0] {
            assert_abs_diff_eq!(std_normal_cdf(z), cdf_oracle(z), epsilon = 1e-10);
        }
    }

    #[test]
    fn cdf_symmetry() {
        for &z in &[-5.0, -1.2, 0.0, 0.4, 3.3, 6.0] {
            assert_abs_diff_eq!(
                std_normal_cdf(z) + std_normal_cdf(-z),
                1.0,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn quantile_at_half_is_zero() {
        assert_eq!(inv_std_normal_cdf(0.5).unwrap(), 0.0);
    }

    #[test]
    fn quantile_round_trips_cdf() {
        assert_abs_diff_eq!(
            inv_std_normal_cdf(0.841344746068543).unwrap(),
            1.0,
            epsilon = 1e-9
        );
        let density = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut z = -6.0;
        while z <= 6.0 {
            let p = std_normal_cdf(z);
            let back = inv_std_normal_cdf(p).unwrap();
            // near p = 1 the double grid itself limits how much of z the
            // CDF value can encode; allow that quantization on top of 1e-9
            let ulp = f64::from_bits(p.to_bits() + 1) - p;
            let info_limit = ulp / density(z);
            assert_abs_diff_eq!(back, z, epsilon = 1e-9 + info_limit);
            z += 0.043;
        }
    }

    #[test]
    fn quantile_rejects_boundary() {
        assert!(inv_std_normal_cdf(0.0).is_err());
        assert!(inv_std_normal_cdf(1.0).is_err());
        assert!(inv_std_normal_cdf(-0.2).is_err());
    }

    #[test]
    fn known_quantiles() {
        assert_abs_diff_eq!(
            inv_std_normal_cdf(0.9).unwrap(),
            1.2815515655446004,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            inv_std_normal_cdf(0.975).unwrap(),
            1.959963984540054,
            epsilon = 1e-12
        );
    }

    #[test]
    fn cdf_is_monotone() {
        let mut prev = std_normal_cdf(-8.0);
        let mut z = -8.0;
        while z <= 8.0 {
            z += 0.05;
            let cur = std_normal_cdf(z);
            assert!(cur >= prev);
            prev = cur;
        }
    }
}
