use std::f64::consts::PI;

/// Zero crossings of the sinc kernel on each side, at the narrower of the
/// two rates.
const ZERO_CROSSINGS: f64 = 16.0;

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Blackman window on `[-1, 1]`.
fn blackman(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        0.42 + 0.5 * (PI * u).cos() + 0.08 * (2.0 * PI * u).cos()
    }
}

/// Windowed-sinc polyphase resampling from `from` Hz to `to` Hz.
///
/// The rational ratio `to/from = up/down` is reduced by the gcd; the
/// `up` polyphase branches of the low-pass prototype are tabulated once.
/// The output has `ceil(len · to / from)` samples.
pub fn resample(samples: &[f32], from: u32, to: u32) -> Vec<f32> {
    assert!(from > 0 && to > 0, "sample rates must be positive");
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let g = gcd(from, to);
    let (up, down) = ((to / g) as usize, (from / g) as usize);
    // cutoff relative to the input Nyquist
    let scale = (to as f64 / from as f64).min(1.0);
    let half = (ZERO_CROSSINGS / scale).ceil() as isize;
    let taps = (2 * half) as usize;

    // table[p][j] weights input sample base + j - half + 1 for phase p/up
    let table: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            (0..taps)
                .map(|j| {
                    let tau = frac - (j as isize - half + 1) as f64;
                    scale * sinc(scale * tau) * blackman(tau / half as f64)
                })
                .collect()
        })
        .collect();

    let n_out = (samples.len() * up).div_ceil(down);
    let n_in = samples.len() as isize;
    (0..n_out)
        .map(|n| {
            let pos = n * down;
            let base = (pos / up) as isize;
            let phase = pos % up;
            let mut acc = 0.0;
            for (j, w) in table[phase].iter().enumerate() {
                let idx = base + j as isize - half + 1;
                if (0..n_in).contains(&idx) {
                    acc += w * samples[idx as usize] as f64;
                }
            }
            acc as f32
        })
        .collect()
}
