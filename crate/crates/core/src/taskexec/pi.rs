//! Hexadecimal digits of pi by BBP digit extraction.
//!
//! pi = Σ 16^-k (4/(8k+1) − 2/(8k+4) − 1/(8k+5) − 1/(8k+6)). The fractional
//! part of 16^d · pi is computed in 64-bit fixed point: the head of each
//! series uses modular exponentiation, the tail shifts. Each evaluation
//! yields eight digits; the head accumulates at most one unit of rounding
//! per term, far below the 32 bits kept as guard.

const DIGITS_PER_EVAL: u64 = 8;

fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    if m == 1 {
        return 0;
    }
    let mut result = 1u64;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            result = ((u128::from(result) * u128::from(base)) % u128::from(m)) as u64;
        }
        base = ((u128::from(base) * u128::from(base)) % u128::from(m)) as u64;
        exp >>= 1;
    }
    result
}

/// frac(Σ_k 16^(d-k) / (8k+j)) as a 64-bit binary fraction.
fn series(d: u64, j: u64) -> u64 {
    let mut sum = 0u64;
    for k in 0..=d {
        let m = 8 * k + j;
        let r = pow_mod(16, d - k, m);
        sum = sum.wrapping_add(((u128::from(r) << 64) / u128::from(m)) as u64);
    }
    let mut k = d + 1;
    loop {
        let shift = 4 * (k - d);
        if shift >= 64 {
            break;
        }
        let term = (1u64 << (64 - shift)) / (8 * k + j);
        if term == 0 {
            break;
        }
        sum = sum.wrapping_add(term);
        k += 1;
    }
    sum
}

/// Eight hex digits of pi starting at fractional position `d + 1`.
fn eight_digits(d: u64) -> u32 {
    let x = series(d, 1)
        .wrapping_mul(4)
        .wrapping_sub(series(d, 4).wrapping_mul(2))
        .wrapping_sub(series(d, 5))
        .wrapping_sub(series(d, 6));
    (x >> 32) as u32
}

/// Hex digits of pi's fractional part at 1-based positions
/// `[start, start + count)`, upper case.
pub fn pi_hex_digits(start: u64, count: u64) -> String {
    assert!(start >= 1, "positions are 1-based");
    let mut out = String::with_capacity(count as usize);
    let mut pos = start;
    let end = start + count;
    while pos < end {
        let block = format!("{:08X}", eight_digits(pos - 1));
        let take = (end - pos).min(DIGITS_PER_EVAL) as usize;
        out.push_str(&block[..take]);
        pos += take as u64;
    }
    out
}

/// Contiguous ranges of ⌈total / workers⌉ positions covering `[1, total]`.
pub fn split_spmd(total: u64, workers: u64) -> Vec<(u64, u64)> {
    let workers = workers.max(1);
    if total == 0 {
        return Vec::new();
    }
    let size = total.div_ceil(workers);
    (0..workers)
        .map(|i| i * size)
        .take_while(|&offset| offset < total)
        .map(|offset| (offset + 1, size.min(total - offset)))
        .collect()
}
