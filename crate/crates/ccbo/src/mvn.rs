//! Univariate, bivariate and multivariate Gaussian probabilities.
//!
//! The bivariate case uses the Gauss–Legendre scheme of Genz's TVPACK; higher
//! dimensions use quasi-Monte-Carlo separation of variables with a seeded
//! random shift, after the method of Genz.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{CcboError, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / TWO_PI.sqrt()
}

/// Standard normal quantile (Wichura's AS 241, double precision).
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = q * (((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_813e4) * r
            + 6.726_577_092_700_87e4)
            * r
            + 4.592_195_393_154_987e4)
            * r
            + 1.373_169_376_550_946e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_5);
        let den = ((((((5.226_495_278_852_545_4e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return num / den;
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        let r = r - 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_7e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358)
            * r
            + 5.998_322_065_558_88e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

const GL6_W: [f64; 3] = [
    0.171_324_492_379_170_4e0,
    0.360_761_573_048_138_6e0,
    0.467_913_934_572_691_0e0,
];
const GL6_X: [f64; 3] = [
    -0.932_469_514_203_152_1e0,
    -0.661_209_386_466_264_5e0,
    -0.238_619_186_083_196_9e0,
];
const GL12_W: [f64; 6] = [
    0.471_753_363_865_118_3e-1,
    0.106_939_325_995_318_4e0,
    0.160_078_328_543_346_2e0,
    0.203_167_426_723_065_9e0,
    0.233_492_536_538_354_8e0,
    0.249_147_045_813_402_8e0,
];
const GL12_X: [f64; 6] = [
    -0.981_560_634_246_719_2e0,
    -0.904_117_256_370_474_9e0,
    -0.769_902_674_194_304_7e0,
    -0.587_317_954_286_617_5e0,
    -0.367_831_498_998_180_2e0,
    -0.125_233_408_511_468_9e0,
];
const GL20_W: [f64; 10] = [
    0.176_140_071_391_521_2e-1,
    0.406_014_298_003_869_4e-1,
    0.626_720_483_341_090_7e-1,
    0.832_767_415_767_047_5e-1,
    0.101_930_119_817_240_4e0,
    0.118_194_531_961_518_4e0,
    0.131_688_638_449_176_6e0,
    0.142_096_109_318_382_0e0,
    0.149_172_986_472_603_7e0,
    0.152_753_387_130_725_8e0,
];
const GL20_X: [f64; 10] = [
    -0.993_128_599_185_094_9e0,
    -0.963_971_927_277_913_8e0,
    -0.912_234_428_251_325_9e0,
    -0.839_116_971_822_218_8e0,
    -0.746_331_906_460_150_8e0,
    -0.636_053_680_726_515_0e0,
    -0.510_867_001_950_827_1e0,
    -0.373_706_088_715_419_5e0,
    -0.227_785_851_141_645_1e0,
    -0.765_265_211_334_973_4e-1,
];

/// P(X <= a, Y <= b) for standard bivariate normal variables with
/// correlation `rho` (Genz's BVND, reflected to lower orthants).
pub fn bvn_cdf(a: f64, b: f64, rho: f64) -> f64 {
    bvnd(-a, -b, rho).clamp(0.0, 1.0)
}

/// Upper-orthant probability P(X > a, Y > b), computed directly so deep
/// tails keep their magnitude instead of cancelling against 1.
pub fn bvn_upper(a: f64, b: f64, rho: f64) -> f64 {
    bvnd(a, b, rho).clamp(0.0, 1.0)
}

/// P(X > dh, Y > dk) for standard bivariate normals with correlation `r`.
fn bvnd(dh: f64, dk: f64, r: f64) -> f64 {
    if dh == f64::INFINITY || dk == f64::INFINITY {
        return 0.0;
    }
    if dh == f64::NEG_INFINITY {
        return normal_cdf(-dk);
    }
    if dk == f64::NEG_INFINITY {
        return normal_cdf(-dh);
    }
    let (xs, ws): (&[f64], &[f64]) = if r.abs() < 0.3 {
        (&GL6_X, &GL6_W)
    } else if r.abs() < 0.75 {
        (&GL12_X, &GL12_W)
    } else {
        (&GL20_X, &GL20_W)
    };
    let h = dh;
    let mut k = dk;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        if r.abs() > 0.0 {
            let hs = (h * h + k * k) / 2.0;
            let asr = r.asin();
            for i in 0..xs.len() {
                for &sign in &[-1.0f64, 1.0] {
                    let sn = (asr * (sign * xs[i] + 1.0) / 2.0).sin();
                    bvn += ws[i] * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
                }
            }
            bvn = bvn * asr / (2.0 * TWO_PI);
        }
        bvn + normal_cdf(-h) * normal_cdf(-k)
    } else {
        if r < 0.0 {
            k = -k;
            hk = -hk;
        }
        if r.abs() < 1.0 {
            let ass = (1.0 - r) * (1.0 + r);
            let mut a = ass.sqrt();
            let bs = (h - k) * (h - k);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 16.0;
            let asr = -(bs / ass + hk) / 2.0;
            if asr > -100.0 {
                bvn = a * asr.exp() * (1.0 - c * (bs - ass) * (1.0 - d * bs / 5.0) / 3.0
                    + c * d * ass * ass / 5.0);
            }
            if -hk < 100.0 {
                let b = bs.sqrt();
                let sp = TWO_PI.sqrt() * normal_cdf(-b / a);
                bvn -= (-hk / 2.0).exp() * sp * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
            }
            a /= 2.0;
            for i in 0..xs.len() {
                for &sign in &[-1.0f64, 1.0] {
                    let x = a * (sign * xs[i] + 1.0);
                    let xss = x * x;
                    let rs = (1.0 - xss).sqrt();
                    let asr1 = -(bs / xss + hk) / 2.0;
                    if asr1 > -100.0 {
                        let sp1 = 1.0 + c * xss * (1.0 + d * xss);
                        let ep = (-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs;
                        bvn += a * ws[i] * asr1.exp() * (ep - sp1);
                    }
                }
            }
            bvn = -bvn / TWO_PI;
        }
        if r > 0.0 {
            bvn + normal_cdf(-h.max(k))
        } else {
            let mut v = -bvn;
            if k > h {
                v += normal_cdf(k) - normal_cdf(h);
            }
            v
        }
    }
}

/// Result of a multivariate normal CDF evaluation. `clipped` is set when the
/// covariance had to be projected onto the PSD cone first.
#[derive(Debug, Clone, Copy)]
pub struct MvnCdf {
    pub p: f64,
    pub clipped: bool,
}

/// P(Y <= upper) for Y ~ N(mean, cov).
///
/// Dimension 1 uses the closed-form CDF, dimension 2 the deterministic
/// bivariate routine, higher dimensions seeded QMC separation of variables.
pub fn mvn_cdf(mean: &[f64], cov: &DMatrix<f64>, upper: &[f64], seed: u64) -> Result<MvnCdf> {
    let l = mean.len();
    if cov.nrows() != l || cov.ncols() != l || upper.len() != l {
        return Err(CcboError::ShapeMismatch(format!(
            "mvn_cdf: mean {}, cov {}x{}, upper {}",
            l,
            cov.nrows(),
            cov.ncols(),
            upper.len()
        )));
    }
    if l == 0 {
        return Ok(MvnCdf {
            p: 1.0,
            clipped: false,
        });
    }
    if l == 1 {
        let var = cov[(0, 0)];
        let clipped = var < 0.0;
        let sd = var.max(0.0).sqrt();
        let p = if sd > 0.0 {
            normal_cdf((upper[0] - mean[0]) / sd)
        } else if upper[0] >= mean[0] {
            1.0
        } else {
            0.0
        };
        return Ok(MvnCdf { p, clipped });
    }
    if l == 2 {
        let v0 = cov[(0, 0)];
        let v1 = cov[(1, 1)];
        let mut clipped = v0 < 0.0 || v1 < 0.0;
        let s0 = v0.max(0.0).sqrt();
        let s1 = v1.max(0.0).sqrt();
        if s0 == 0.0 || s1 == 0.0 {
            let p0 = marginal_indicator(mean[0], s0, upper[0]);
            let p1 = marginal_indicator(mean[1], s1, upper[1]);
            return Ok(MvnCdf { p: p0 * p1, clipped });
        }
        let mut rho = cov[(0, 1)] / (s0 * s1);
        if rho.abs() > 1.0 {
            clipped = clipped || rho.abs() > 1.0 + 1e-12;
            rho = rho.clamp(-1.0, 1.0);
        }
        let a = (upper[0] - mean[0]) / s0;
        let b = (upper[1] - mean[1]) / s1;
        return Ok(MvnCdf {
            p: bvn_cdf(a, b, rho),
            clipped,
        });
    }
    mvn_cdf_qmc(mean, cov, upper, seed)
}

fn marginal_indicator(mean: f64, sd: f64, upper: f64) -> f64 {
    if sd > 0.0 {
        normal_cdf((upper - mean) / sd)
    } else if upper >= mean {
        1.0
    } else {
        0.0
    }
}

fn psd_chol(cov: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if let Some(ch) = nalgebra::Cholesky::new(cov.clone()) {
        return (ch.unpack(), false);
    }
    // Project onto the PSD cone through the eigendecomposition.
    let eig = nalgebra::SymmetricEigen::new(cov.clone());
    let floor = 1e-12 * eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
    let clipped_vals = eig.eigenvalues.map(|v| v.max(floor));
    let rebuilt = &eig.eigenvectors
        * DMatrix::from_diagonal(&clipped_vals)
        * eig.eigenvectors.transpose();
    let ch = nalgebra::Cholesky::new(rebuilt)
        .expect("eigen-clipped matrix is PSD");
    (ch.unpack(), true)
}

// First primes, square-rooted, as Richtmyer QMC generators.
const QMC_PRIMES: [u64; 24] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
];

fn mvn_cdf_qmc(mean: &[f64], cov: &DMatrix<f64>, upper: &[f64], seed: u64) -> Result<MvnCdf> {
    let l = mean.len();
    let (chol, clipped) = psd_chol(cov);
    let b: Vec<f64> = (0..l).map(|i| upper[i] - mean[i]).collect();
    if l > QMC_PRIMES.len() {
        return Err(CcboError::ShapeMismatch(format!(
            "mvn_cdf supports up to {} dimensions, got {l}",
            QMC_PRIMES.len()
        )));
    }
    let gens: Vec<f64> = QMC_PRIMES[..l - 1].iter().map(|&p| (p as f64).sqrt()).collect();

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n_shifts = 10;
    let n_points = 2048usize;
    let mut total = 0.0;
    let mut y = vec![0.0f64; l - 1];
    for _ in 0..n_shifts {
        let shifts: Vec<f64> = (0..l - 1).map(|_| rng.random::<f64>()).collect();
        let mut acc = 0.0;
        for k in 0..n_points {
            let kf = (k + 1) as f64;
            let mut f = first_factor(&b, &chol);
            let mut e_prev = f;
            for i in 1..l {
                let z = (kf * gens[i - 1] + shifts[i - 1]).fract();
                y[i - 1] = normal_quantile((z * e_prev).clamp(1e-300, 1.0 - 1e-16));
                let mut s = 0.0;
                for j in 0..i {
                    s += chol[(i, j)] * y[j];
                }
                let e = if chol[(i, i)] > 1e-14 {
                    normal_cdf((b[i] - s) / chol[(i, i)])
                } else if b[i] - s >= 0.0 {
                    1.0
                } else {
                    0.0
                };
                f *= e;
                e_prev = e;
            }
            acc += f;
        }
        total += acc / n_points as f64;
    }
    Ok(MvnCdf {
        p: (total / n_shifts as f64).clamp(0.0, 1.0),
        clipped,
    })
}

#[inline]
fn first_factor(b: &[f64], chol: &DMatrix<f64>) -> f64 {
    if chol[(0, 0)] > 1e-14 {
        normal_cdf(b[0] / chol[(0, 0)])
    } else if b[0] >= 0.0 {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-10, 1e-4, 0.025, 0.3, 0.5, 0.7, 0.975, 1.0 - 1e-4] {
            assert_relative_eq!(normal_cdf(normal_quantile(p)), p, epsilon = 1e-12);
        }
        assert_relative_eq!(normal_quantile(0.95), 1.6448536269514722, epsilon = 1e-10);
    }

    #[test]
    fn univariate_fallback() {
        let cov = DMatrix::from_element(1, 1, 1.0);
        let r = mvn_cdf(&[0.0], &cov, &[1.6449], 0).unwrap();
        assert_relative_eq!(r.p, 0.95, epsilon = 1e-4);
    }

    #[test]
    fn independent_orthant() {
        let cov = DMatrix::identity(2, 2);
        let r = mvn_cdf(&[0.0, 0.0], &cov, &[0.0, 0.0], 0).unwrap();
        assert_relative_eq!(r.p, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn arcsine_orthant_formula() {
        // P(X<=0, Y<=0) = 1/4 + asin(rho)/(2 pi)
        for &rho in &[-0.95f64, -0.5, -0.1, 0.0, 0.3, 0.5, 0.8, 0.99] {
            let mut cov = DMatrix::identity(2, 2);
            cov[(0, 1)] = rho;
            cov[(1, 0)] = rho;
            let expect = 0.25 + rho.asin() / (2.0 * std::f64::consts::PI);
            let r = mvn_cdf(&[0.0, 0.0], &cov, &[0.0, 0.0], 0).unwrap();
            assert_relative_eq!(r.p, expect, epsilon = 5e-7);
        }
    }

    #[test]
    fn qmc_matches_product_rule_on_diagonal() {
        for l in 3..=5usize {
            let mut cov = DMatrix::zeros(l, l);
            let mut mean = vec![0.0; l];
            let mut upper = vec![0.0; l];
            let mut product = 1.0;
            for i in 0..l {
                cov[(i, i)] = 0.5 + i as f64 * 0.3;
                mean[i] = -0.2 + 0.1 * i as f64;
                upper[i] = 0.4 - 0.15 * i as f64;
                product *= normal_cdf((upper[i] - mean[i]) / cov[(i, i)].sqrt());
            }
            let r = mvn_cdf(&mean, &cov, &upper, 99).unwrap();
            assert!(!r.clipped);
            assert!(
                (r.p - product).abs() < 5e-4,
                "l={l}: {} vs {}",
                r.p,
                product
            );
        }
    }

    #[test]
    fn qmc_matches_bivariate_on_embedded_pair() {
        // 3-d with third variable independent: p = bvn * phi
        let mut cov = DMatrix::identity(3, 3);
        cov[(0, 1)] = 0.6;
        cov[(1, 0)] = 0.6;
        let upper = [0.3, -0.4, 0.8];
        let expect = bvn_cdf(0.3, -0.4, 0.6) * normal_cdf(0.8);
        let r = mvn_cdf(&[0.0; 3], &cov, &upper, 3).unwrap();
        assert!((r.p - expect).abs() < 5e-4);
    }

    #[test]
    fn non_psd_is_clipped_with_flag() {
        let mut cov = DMatrix::identity(3, 3);
        cov[(0, 1)] = 1.2;
        cov[(1, 0)] = 1.2;
        let r = mvn_cdf(&[0.0; 3], &cov, &[0.0; 3], 5).unwrap();
        assert!(r.clipped);
        assert!(r.p >= 0.0 && r.p <= 1.0);
    }

    #[test]
    fn monotone_in_upper() {
        let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(11);
        for _ in 0..50 {
            let rho: f64 = rand::Rng::random_range(&mut rng, -0.9..0.9);
            let mut cov = DMatrix::identity(2, 2);
            cov[(0, 1)] = rho;
            cov[(1, 0)] = rho;
            let a: f64 = rand::Rng::random_range(&mut rng, -2.0..2.0);
            let b: f64 = rand::Rng::random_range(&mut rng, -2.0..2.0);
            let base = mvn_cdf(&[0.0, 0.0], &cov, &[a, b], 0).unwrap().p;
            let up = mvn_cdf(&[0.0, 0.0], &cov, &[a + 0.3, b], 0).unwrap().p;
            let up2 = mvn_cdf(&[0.0, 0.0], &cov, &[a, b + 0.3], 0).unwrap().p;
            assert!(up >= base - 1e-12);
            assert!(up2 >= base - 1e-12);
        }
    }
}
