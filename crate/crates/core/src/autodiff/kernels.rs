//! Row kernels for the attention hot loop.
//!
//! Written as branch-free lane-parallel loops so that they vectorize; on
//! x86-64 an AVX-512 or AVX2 build of the same code is selected at runtime.
//! Fused multiply-adds are spelled out with `mul_add`, which rounds the same
//! way with or without hardware support, so every build gives equal results.

const LANES: usize = 8;

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
/// `1.5 · 2^52`: adding it rounds to an integer held in the low mantissa bits.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;
/// Below this the result is flushed to zero rather than going subnormal.
const EXP_FLOOR: f64 = -708.0;

/// `1/k!` for `k = 13, 12, …, 0`, the Horner order.
const INV_FACT: [f64; 14] = [
    1.0 / 6_227_020_800.0,
    1.0 / 479_001_600.0,
    1.0 / 39_916_800.0,
    1.0 / 3_628_800.0,
    1.0 / 362_880.0,
    1.0 / 40_320.0,
    1.0 / 5_040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    0.5,
    1.0,
    1.0,
];

/// `e^x` for `x ≤ 0`, accurate to about one ulp; `x < −708` gives 0.
#[inline(always)]
fn exp_nonpos(x: f64) -> f64 {
    let keep = if x >= EXP_FLOOR { 1.0 } else { 0.0 };
    let x = x.max(EXP_FLOOR);
    let t = x.mul_add(LOG2E, ROUND_MAGIC);
    let n = t - ROUND_MAGIC;
    let r = (-n).mul_add(LN2_LO, (-n).mul_add(LN2_HI, x));
    let mut p = INV_FACT[0];
    for &c in &INV_FACT[1..] {
        p = p.mul_add(r, c);
    }
    let k = t.to_bits().wrapping_sub(ROUND_MAGIC.to_bits());
    let scale = f64::from_bits(k.wrapping_add(1023) << 52);
    p * scale * keep
}

#[inline(always)]
fn max_body(row: &[f64]) -> f64 {
    let mut acc = [f64::NEG_INFINITY; LANES];
    let mut chunks = row.chunks_exact(LANES);
    for c in &mut chunks {
        for i in 0..LANES {
            acc[i] = if c[i] > acc[i] { c[i] } else { acc[i] };
        }
    }
    let mut m = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for &v in chunks.remainder() {
        m = m.max(v);
    }
    m
}

#[inline(always)]
fn exp_sum_body(row: &mut [f64], shift: f64) -> f64 {
    let mut acc = [0.0; LANES];
    let mut chunks = row.chunks_exact_mut(LANES);
    for c in &mut chunks {
        for i in 0..LANES {
            c[i] = exp_nonpos(c[i] - shift);
            acc[i] += c[i];
        }
    }
    let mut total = 0.0;
    for v in chunks.into_remainder() {
        *v = exp_nonpos(*v - shift);
        total += *v;
    }
    acc.iter().sum::<f64>() + total
}

#[inline(always)]
fn lane_sum(xs: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let mut chunks = xs.chunks_exact(LANES);
    for c in &mut chunks {
        for i in 0..LANES {
            acc[i] += c[i];
        }
    }
    acc.iter().sum::<f64>() + chunks.remainder().iter().sum::<f64>()
}

/// `row[tj·P + k] += t_part[tj] + plane[k]` with `P = plane.len()`.
#[inline(always)]
fn add_bias_body(row: &mut [f64], t_part: &[f64], plane: &[f64]) {
    for (chunk, &bt) in row.chunks_exact_mut(plane.len()).zip(t_part) {
        for (x, &b) in chunk.iter_mut().zip(plane) {
            *x += bt + b;
        }
    }
}

/// Reduces a gradient row laid out like [`add_bias`] into per-`tj` sums
/// (overwritten) and per-plane-position sums (accumulated).
#[inline(always)]
fn bias_grad_body(row: &[f64], t_sums: &mut [f64], plane_sums: &mut [f64]) {
    for (chunk, ts) in row.chunks_exact(plane_sums.len()).zip(t_sums.iter_mut()) {
        *ts = lane_sum(chunk);
        for (acc, &x) in plane_sums.iter_mut().zip(chunk) {
            *acc += x;
        }
    }
}

/// `ds ← p ∘ (ds − delta)`, the softmax backward for one row.
#[inline(always)]
fn softmax_grad_body(ds: &mut [f64], p: &[f64], delta: f64) {
    for (d, &pv) in ds.iter_mut().zip(p) {
        *d = pv * (*d - delta);
    }
}

macro_rules! dispatch {
    ($name:ident, $body:ident, ($($arg:ident: $ty:ty),*) -> $ret:ty) => {
        pub(crate) fn $name($($arg: $ty),*) -> $ret {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx512f,fma")]
                unsafe fn avx512($($arg: $ty),*) -> $ret {
                    $body($($arg),*)
                }
                #[target_feature(enable = "avx2,fma")]
                unsafe fn avx2($($arg: $ty),*) -> $ret {
                    $body($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx512f") && std::arch::is_x86_feature_detected!("fma") {
                    // SAFETY: the features were detected at runtime.
                    return unsafe { avx512($($arg),*) };
                }
                if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
                    // SAFETY: the features were detected at runtime.
                    return unsafe { avx2($($arg),*) };
                }
            }
            $body($($arg),*)
        }
    };
}

dispatch!(row_max, max_body, (row: &[f64]) -> f64);
dispatch!(exp_shifted_sum, exp_sum_body, (row: &mut [f64], shift: f64) -> f64);
dispatch!(add_bias, add_bias_body, (row: &mut [f64], t_part: &[f64], plane: &[f64]) -> ());
dispatch!(bias_grad, bias_grad_body, (row: &[f64], t_sums: &mut [f64], plane_sums: &mut [f64]) -> ());
dispatch!(softmax_grad, softmax_grad_body, (ds: &mut [f64], p: &[f64], delta: f64) -> ());

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_matches_std_to_a_few_ulp() {
        let mut worst: f64 = 0.0;
        for i in 0..200_000 {
            let x = -(i as f64) * 3.5e-3;
            let want = x.exp();
            worst = worst.max((exp_nonpos(x) - want).abs() / want);
        }
        assert!(worst < 4.0 * f64::EPSILON, "{worst:e}");
        assert_eq!(exp_nonpos(0.0), 1.0);
        assert_eq!(exp_nonpos(-800.0), 0.0);
        assert_eq!(exp_nonpos(f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn row_kernels_match_scalar_loops() {
        let row: Vec<f64> = (0..37).map(|i| ((i * 17) % 11) as f64 * 0.3 - 2.0).collect();
        let m = row_max(&row);
        assert_eq!(m, row.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let mut e = row.clone();
        let s = exp_shifted_sum(&mut e, m);
        let want: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        for (a, b) in e.iter().zip(&want) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON);
        }
        assert!((s - want.iter().sum::<f64>()).abs() < 1e-13);
    }

    #[test]
    fn bias_kernels_follow_the_tiled_layout() {
        let t_part = [1.0, 10.0];
        let plane = [0.5, 0.25, 0.125];
        let mut row = vec![0.0; 6];
        add_bias(&mut row, &t_part, &plane);
        assert_eq!(row, [1.5, 1.25, 1.125, 10.5, 10.25, 10.125]);
        let mut ts = [0.0; 2];
        let mut ps = [1.0; 3];
        bias_grad(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &mut ts, &mut ps);
        assert_eq!(ts, [6.0, 15.0]);
        assert_eq!(ps, [6.0, 8.0, 10.0]);
    }
}
