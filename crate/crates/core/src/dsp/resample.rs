use std::f64::consts::PI;

/// Zero crossings of the sinc kernel on each side of the centre tap.
const HALF_ZEROS: f64 = 16.0;
/// Cutoff as a fraction of the output Nyquist.
const ROLLOFF: f64 = 0.95;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Blackman window over `[-1, 1]`.
fn blackman(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let p = PI * (u + 1.0);
    0.42 - 0.5 * p.cos() + 0.08 * (2.0 * p).cos()
}

/// Band-limited resampling with a Blackman-windowed sinc kernel.
///
/// Output length is `round(len * to / from)`. Equal rates return the input.
pub fn resample(input: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to as f64 / from as f64;
    let out_len = (input.len() as f64 * ratio).round() as usize;
    // Kernel bandwidth relative to the input rate.
    let cutoff = ROLLOFF * ratio.min(1.0);
    let half_width = HALF_ZEROS / cutoff;
    let step = from as f64 / to as f64;

    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let t = n as f64 * step;
        let lo = (t - half_width).ceil().max(0.0) as usize;
        let hi = ((t + half_width).floor() as usize).min(input.len() - 1);
        let mut acc = 0.0;
        for (k, &x) in input.iter().enumerate().take(hi + 1).skip(lo) {
            let tau = t - k as f64;
            acc += x as f64 * cutoff * sinc(cutoff * tau) * blackman(tau / half_width);
        }
        out.push(acc as f32);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: u32, len: usize) -> Vec<f32> {
        (0..len)
            .map(|i| (2.0 * PI * freq * i as f64 / rate as f64).sin() as f32 * 0.5)
            .collect()
    }

    #[test]
    fn identity_when_rates_match() {
        let x = tone(440.0, 16_000, 1000);
        assert_eq!(resample(&x, 16_000, 16_000), x);
    }

    #[test]
    fn halving_length() {
        for n in [32_000, 32_001, 999] {
            let y = resample(&vec![0.0; n], 32_000, 16_000);
            assert_eq!(y.len(), (n as f64 / 2.0).round() as usize);
        }
    }

    #[test]
    fn passband_tone_survives_downsampling() {
        let x = tone(1000.0, 48_000, 48_000);
        let y = resample(&x, 48_000, 16_000);
        let expect = tone(1000.0, 16_000, 16_000);
        // Ignore the edges where the kernel runs off the signal.
        let err = y[200..15_800]
            .iter()
            .zip(&expect[200..15_800])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 5e-3, "max error {err}");
    }

    #[test]
    fn aliasing_tone_is_suppressed() {
        // 10 kHz is above the 8 kHz output Nyquist.
        let x = tone(10_000.0, 32_000, 32_000);
        let y = resample(&x, 32_000, 16_000);
        let rms = (y[500..15_500].iter().map(|v| (*v as f64).powi(2)).sum::<f64>()
            / 15_000.0)
            .sqrt();
        assert!(rms < 5e-3, "rms {rms}");
    }
}
