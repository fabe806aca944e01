//! Inner loop kernels with runtime CPU-feature dispatch. The generic bodies
//! are compiled twice: once for the baseline target and once with AVX2+FMA
//! enabled, where the autovectorizer widens them and fuses the multiplies.
//! Summation order is fixed by the code, so a given machine always produces
//! identical bits.

pub(crate) type AxpyFn = fn(&mut [f64], f64, &[f64]);
pub(crate) type DotFn = fn(&[f64], &[f64]) -> f64;
pub(crate) type SumFn = fn(&[f64]) -> f64;

#[derive(Clone, Copy)]
pub(crate) struct Ops {
    pub axpy: AxpyFn,
    pub dot: DotFn,
    pub sum: SumFn,
}

#[inline(always)]
fn axpy_body<const FMA: bool>(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        if FMA {
            *yi = a.mul_add(*xi, *yi);
        } else {
            *yi += a * xi;
        }
    }
}

#[inline(always)]
fn dot_body<const FMA: bool>(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut ai = a.chunks_exact(8);
    let mut bi = b.chunks_exact(8);
    for (a8, b8) in (&mut ai).zip(&mut bi) {
        for l in 0..8 {
            if FMA {
                acc[l] = a8[l].mul_add(b8[l], acc[l]);
            } else {
                acc[l] += a8[l] * b8[l];
            }
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ai.remainder().iter().zip(bi.remainder()) {
        s += x * y;
    }
    s
}

#[inline(always)]
fn sum_body(a: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut it = a.chunks_exact(8);
    for a8 in &mut it {
        for l in 0..8 {
            acc[l] += a8[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for x in it.remainder() {
        s += x;
    }
    s
}

fn axpy_scalar(y: &mut [f64], a: f64, x: &[f64]) {
    axpy_body::<false>(y, a, x)
}

fn dot_scalar(a: &[f64], b: &[f64]) -> f64 {
    dot_body::<false>(a, b)
}

fn sum_scalar(a: &[f64]) -> f64 {
    sum_body(a)
}

#[cfg(all(feature = "std", target_arch = "x86_64"))]
mod avx {
    use super::*;

    #[target_feature(enable = "avx2,fma")]
    unsafe fn axpy_inner(y: &mut [f64], a: f64, x: &[f64]) {
        axpy_body::<true>(y, a, x)
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn dot_inner(a: &[f64], b: &[f64]) -> f64 {
        dot_body::<true>(a, b)
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn sum_inner(a: &[f64]) -> f64 {
        sum_body(a)
    }

    // Callers only receive these through `detect()`, which checks the
    // features first.
    pub(super) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
        unsafe { axpy_inner(y, a, x) }
    }

    pub(super) fn dot(a: &[f64], b: &[f64]) -> f64 {
        unsafe { dot_inner(a, b) }
    }

    pub(super) fn sum(a: &[f64]) -> f64 {
        unsafe { sum_inner(a) }
    }
}

/// Best kernel set for the running CPU.
pub(crate) fn detect() -> Ops {
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            return Ops { axpy: avx::axpy, dot: avx::dot, sum: avx::sum };
        }
    }
    Ops { axpy: axpy_scalar, dot: dot_scalar, sum: sum_scalar }
}
