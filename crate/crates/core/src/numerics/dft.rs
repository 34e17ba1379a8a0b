//! Framed DFT magnitudes (no gradient).

use rustfft::{num_complex::Complex, FftPlanner};

use super::tensor::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Window {
    #[default]
    Rectangular,
    Hann,
}

impl Window {
    fn weights(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

/// Magnitudes of bins `0..=frame/2` for every full frame at stride `hop`.
pub fn dft_magnitude(signal: &[f64], frame: usize, hop: usize, window: Window) -> Result<Vec<Vec<f64>>> {
    if hop == 0 || frame < hop {
        return Err(invalid("dft_magnitude", format!("need frame >= hop >= 1, got {frame}/{hop}")));
    }
    if signal.len() < frame {
        return Err(invalid(
            "dft_magnitude",
            format!("signal of {} samples shorter than frame {frame}", signal.len()),
        ));
    }
    let w = window.weights(frame);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame);
    let n_frames = (signal.len() - frame) / hop + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); frame];
    let mut out = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let seg = &signal[f * hop..f * hop + frame];
        for ((b, &s), &wi) in buf.iter_mut().zip(seg).zip(&w) {
            *b = Complex::new(s * wi, 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..=frame / 2].iter().map(|c| c.norm()).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_signal_gives_zero_magnitudes() {
        let m = dft_magnitude(&[0.0; 128], 64, 32, Window::Rectangular).unwrap();
        assert_eq!(m.len(), 3);
        assert!(m.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn sinusoid_peaks_at_its_bin() {
        let bin = 5;
        let sig: Vec<f64> = (0..256)
            .map(|n| (std::f64::consts::TAU * bin as f64 * n as f64 / 64.0).sin())
            .collect();
        for window in [Window::Rectangular, Window::Hann] {
            for frame in dft_magnitude(&sig, 64, 32, window).unwrap() {
                let arg = frame
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0;
                assert_eq!(arg, bin);
            }
        }
    }

    #[test]
    fn constant_signal_is_pure_dc() {
        let m = dft_magnitude(&[2.0; 64], 64, 32, Window::Rectangular).unwrap();
        assert!((m[0][0] - 128.0).abs() < 1e-9);
        assert!(m[0][1..].iter().all(|&v| v < 1e-9));
    }

    #[test]
    fn short_signal_is_rejected() {
        assert!(dft_magnitude(&[0.0; 10], 64, 32, Window::Rectangular).is_err());
        assert!(dft_magnitude(&[0.0; 100], 16, 32, Window::Rectangular).is_err());
    }
}
