//! Cohort statistics: nearest-rank percentiles, rank AUC, Welch's t-test,
//! Pearson correlation and the maximum-Dice threshold sweep.

use crate::error::{Error, Result};

/// 1-based nearest rank `⌈q·n/100⌉`, clamped to `1..=n`.
pub fn nearest_rank(q: f64, n: usize) -> usize {
    let r = (q * n as f64 / 100.0 - 1e-9).ceil();
    (r.max(1.0) as usize).min(n)
}

/// Nearest-rank `q`-th percentile (`q` in percent).
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Input("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::Input(format!("percentile level {q} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    let k = nearest_rank(q, v.len()) - 1;
    let (_, x, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    Ok(*x)
}

/// Mann–Whitney estimate of `P(disease > healthy)`, ties counted ½.
pub fn auc(healthy: &[f64], disease: &[f64]) -> Result<f64> {
    if healthy.is_empty() || disease.is_empty() {
        return Err(Error::Input("auc needs two non-empty groups".into()));
    }
    let mut all: Vec<(f64, bool)> = healthy
        .iter()
        .map(|&v| (v, false))
        .chain(disease.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // average ranks over tie runs, doubled to stay integral
    let mut rank2_sum = 0u64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u64;
        rank2_sum += twice_avg * all[i..=j].iter().filter(|e| e.1).count() as u64;
        i = j + 1;
    }
    let (nh, nd) = (healthy.len() as u64, disease.len() as u64);
    let twice_u = rank2_sum - nd * (nd + 1);
    Ok(twice_u as f64 / (2 * nh * nd) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0))
}

/// Welch's unequal-variance t-test of `mean(a) − mean(b)`.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Degenerate("welch_t needs at least two values per group".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if !(se2 > 0.0) {
        return Err(Error::Degenerate("welch_t: both groups have zero variance".into()));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let p = reg_inc_beta(df / 2.0, 0.5, df / (df + t * t))?;
    Ok(WelchResult { t, df, p: p.min(1.0) })
}

/// Lanczos approximation (g = 7, 9 terms) of `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut s = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        s += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + s.ln()
}

/// Regularised incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !(0.0..=1.0).contains(&x) {
        return Err(Error::Input(format!("incomplete beta arguments a={a}, b={b}, x={x}")));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_cf(a, b, x)? / a)
    } else {
        Ok(1.0 - front * beta_cf(b, a, 1.0 - x)? / b)
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            return Ok(h);
        }
    }
    Err(Error::NonFinite(format!("incomplete beta did not converge for a={a}, b={b}, x={x}")))
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Degenerate(format!(
            "pearson needs equal lengths of at least 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::Degenerate("pearson: zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Maximum Dice between `{map > threshold}` and the ground truth over
/// `n_thresholds` nearest-rank quantile thresholds at levels
/// `100·i/(n_thresholds+1)`. Only voxels inside `region` (if given) count.
pub fn dice_max(map: &[f64], gt: &[bool], region: Option<&[bool]>, n_thresholds: usize) -> Result<f64> {
    if map.len() != gt.len() || region.is_some_and(|r| r.len() != map.len()) {
        return Err(Error::dim("dice_max: map, mask and region lengths differ"));
    }
    let idx: Vec<usize> = (0..map.len()).filter(|&i| region.is_none_or(|r| r[i])).collect();
    let g = idx.iter().filter(|&&i| gt[i]).count();
    if g == 0 {
        return Err(Error::Input("dice_max: empty ground truth".into()));
    }
    let mut sorted: Vec<f64> = idx.iter().map(|&i| map[i]).collect();
    sorted.sort_by(f64::total_cmp);
    let mut best = 0.0f64;
    for k in 1..=n_thresholds {
        let q = 100.0 * k as f64 / (n_thresholds + 1) as f64;
        let thr = sorted[nearest_rank(q, sorted.len()) - 1];
        let (mut a, mut inter) = (0usize, 0usize);
        for &i in &idx {
            if map[i] > thr {
                a += 1;
                inter += gt[i] as usize;
            }
        }
        best = best.max(2.0 * inter as f64 / (a + g) as f64);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn brute_auc(h: &[f64], d: &[f64]) -> f64 {
        let mut s = 0.0;
        for &a in h {
            for &b in d {
                if b > a {
                    s += 1.0;
                } else if b == a {
                    s += 0.5;
                }
            }
        }
        s / (h.len() * d.len()) as f64
    }

    #[test]
    fn percentile_examples() {
        let v: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 95.0).unwrap(), 19.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 20.0);
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(nearest_rank(95.0, 512), 487);
        assert!(percentile(&[], 50.0).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(auc(&[1.0, 2.0, 2.0], &[1.0, 2.0, 2.0]).unwrap(), 0.5);
        let mut rng = RngStream::new(1, 1);
        for _ in 0..50 {
            // coarse values force ties
            let h: Vec<f64> = (0..20).map(|_| (rng.normal() * 4.0).round()).collect();
            let d: Vec<f64> = (0..30).map(|_| (rng.normal() * 4.0 + 1.0).round()).collect();
            assert_eq!(auc(&h, &d).unwrap(), brute_auc(&h, &d));
        }
        assert!(auc(&[], &[1.0]).is_err());
    }

    #[test]
    fn welch_reference_values() {
        // (a, b, t, df, p) from 50-digit evaluation of the same f64 inputs
        let cases: Vec<(Vec<f64>, Vec<f64>, f64, f64, f64)> = vec![
            (
                vec![1.2, 2.4, 3.1, 4.8, 5.0],
                vec![2.2, 3.9, 4.4, 6.1, 7.3, 6.6],
                -1.674_452_435_429_254_967_3,
                8.992_864_471_852_346_507_3,
                0.128_391_964_788_951_833_95,
            ),
            (
                vec![1e-9, -1e-9, 1e-9, -1e-9],
                vec![1.0 + 1e-9, 1.0 - 1e-9, 1.0 + 1e-9, 1.0 - 1e-9],
                -1_224_744_854.717_165_561_1,
                5.999_999_999_999_995_551_4,
                2.000_000_163_375_499_409_6e-53,
            ),
            (
                (0..30).map(|i| 0.1 * i as f64).collect(),
                (0..25).map(|i| 0.1 * i as f64 + 0.5).collect(),
                -1.147_078_669_352_808_647_9,
                52.997_656_323_239_898_746,
                0.256_501_330_767_149_982_74,
            ),
            (
                vec![10.0, 11.0, 9.0, 10.5],
                vec![10.2, 9.8, 10.1, 10.3, 9.9],
                0.148_771_544_503_090_299_85,
                3.284_257_618_777_576_968_3,
                0.890_406_558_977_986_663_27,
            ),
        ];
        for (a, b, t, df, p) in cases {
            let r = welch_t(&a, &b).unwrap();
            assert!((r.t - t).abs() <= 1e-8 * t.abs(), "t {} vs {t}", r.t);
            assert!((r.df - df).abs() <= 1e-8 * df.abs(), "df {} vs {df}", r.df);
            assert!((r.p - p).abs() <= 1e-8 * p.abs(), "p {} vs {p}", r.p);
        }
    }

    #[test]
    fn welch_examples() {
        let a = [1.0, 2.0, 4.0, 7.0];
        let r = welch_t(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
        let b = [3.0, 3.5, 2.0, 8.0, 1.0];
        let (x, y) = (welch_t(&a, &b).unwrap(), welch_t(&b, &a).unwrap());
        assert_eq!(x.t, -y.t);
        assert_eq!(x.p, y.p);
        assert!(matches!(welch_t(&[1.0, 1.0], &[2.0, 2.0]), Err(Error::Degenerate(_))));
        assert!(matches!(welch_t(&[1.0], &[2.0, 3.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn incomplete_beta_matches_independent_library() {
        use statrs::function::beta::beta_reg;
        let mut rng = RngStream::new(2, 1);
        for _ in 0..200 {
            let a = rng.uniform_range(0.1, 40.0);
            let b = rng.uniform_range(0.1, 40.0);
            let x = rng.uniform();
            let ours = reg_inc_beta(a, b, x).unwrap();
            let theirs = beta_reg(a, b, x);
            assert!((ours - theirs).abs() < 1e-10 * theirs.abs().max(1e-300) + 1e-14, "a={a} b={b} x={x}");
        }
    }

    #[test]
    fn ln_gamma_matches_independent_library() {
        for x in [0.1, 0.5, 1.0, 1.5, 2.0, 7.3, 26.5, 150.0] {
            let r = statrs::function::gamma::ln_gamma(x);
            assert!((ln_gamma(x) - r).abs() < 1e-13 * r.abs().max(1.0), "{x}");
        }
    }

    #[test]
    fn pearson_examples() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.7).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        let z: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &z).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&x, &[1.0; 10]).is_err());
    }

    #[test]
    fn pearson_matches_one_pass_oracle() {
        let mut rng = RngStream::new(3, 1);
        let x: Vec<f64> = (0..40).map(|_| rng.normal()).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 0.5 * rng.normal()).collect();
        let n = 40.0;
        let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|a| a * a).sum();
        let oracle = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
        assert!((pearson(&x, &y).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn dice_examples() {
        let mut rng = RngStream::new(4, 1);
        let gt: Vec<bool> = (0..1000).map(|i| i % 17 == 0).collect();
        let map: Vec<f64> = gt.iter().map(|&g| g as u8 as f64).collect();
        assert_eq!(dice_max(&map, &gt, None, 99).unwrap(), 1.0);
        let noise: Vec<f64> = (0..1000).map(|_| rng.uniform()).collect();
        assert!(dice_max(&noise, &gt, None, 99).unwrap() < 0.5);
        assert!(dice_max(&noise, &[false; 1000], None, 99).is_err());
    }

    #[test]
    fn dice_matches_brute_force() {
        let mut rng = RngStream::new(5, 1);
        let map: Vec<f64> = (0..300).map(|_| rng.normal()).collect();
        let gt: Vec<bool> = map.iter().map(|v| v + 0.8 * rng.normal() > 1.0).collect();
        let mut sorted = map.clone();
        sorted.sort_by(f64::total_cmp);
        let mut best: f64 = 0.0;
        for k in 1usize..=99 {
            // rank = ceil(k·n/100) computed exactly in integers
            let rank = (k * 300).div_ceil(100);
            let thr = sorted[rank - 1];
            let a = map.iter().filter(|&&v| v > thr).count();
            let i = map.iter().zip(&gt).filter(|(v, g)| **v > thr && **g).count();
            let g = gt.iter().filter(|g| **g).count();
            best = best.max(2.0 * i as f64 / (a + g) as f64);
        }
        assert!((dice_max(&map, &gt, None, 99).unwrap() - best).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn auc_rank_invariance(seed in 0u64..500) {
            let mut rng = RngStream::new(seed, 6);
            let h: Vec<f64> = (0..15).map(|_| rng.normal()).collect();
            let d: Vec<f64> = (0..12).map(|_| rng.normal() + 0.5).collect();
            let f = |v: &f64| v.exp() * 3.0 + 1.0;
            let a = auc(&h, &d).unwrap();
            prop_assert_eq!(a, auc(&h.iter().map(f).collect::<Vec<_>>(), &d.iter().map(f).collect::<Vec<_>>()).unwrap());
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn dice_transform_invariance(seed in 0u64..200) {
            let mut rng = RngStream::new(seed, 7);
            let map: Vec<f64> = (0..400).map(|_| rng.normal()).collect();
            let gt: Vec<bool> = map.iter().map(|v| *v + rng.normal() > 1.2).collect();
            prop_assume!(gt.iter().any(|g| *g));
            let t: Vec<f64> = map.iter().map(|v| (2.0 * v).exp()).collect();
            prop_assert_eq!(dice_max(&map, &gt, None, 99).unwrap(), dice_max(&t, &gt, None, 99).unwrap());
        }

        #[test]
        fn percentile_matches_sort(seed in 0u64..500, n in 1usize..200, q in 0.0f64..100.0) {
            let mut rng = RngStream::new(seed, 8);
            let v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let mut s = v.clone();
            s.sort_by(f64::total_cmp);
            let rank = ((q * n as f64 / 100.0).ceil() as usize).clamp(1, n);
            prop_assert_eq!(percentile(&v, q).unwrap(), s[rank - 1]);
        }

        #[test]
        fn welch_p_in_unit_interval(seed in 0u64..300) {
            let mut rng = RngStream::new(seed, 9);
            let a: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..11).map(|_| rng.normal() * 2.0 + 0.3).collect();
            let r = welch_t(&a, &b).unwrap();
            prop_assert!(r.p > 0.0 && r.p <= 1.0);
        }

        #[test]
        fn pearson_bounded(seed in 0u64..300) {
            let mut rng = RngStream::new(seed, 10);
            let x: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
            let y: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
            let r = pearson(&x, &y).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }
}
