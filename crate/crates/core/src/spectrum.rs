//! Tabulated spectra (LED emission, dopant absorption) and the
//! emission-weighted effective absorption coefficient.

use thiserror::Error;

use crate::num::Real;

/// Relative LED emission bundled with the crate (approximate digitization).
pub const BUNDLED_LED_EMISSION: &str = include_str!("../data/led_emission_565_575nm.csv");
/// Absorption of 0.1 % pentacene in para-terphenyl, mm⁻¹ (approximate digitization).
pub const BUNDLED_PTC_PTP_ABSORPTION: &str = include_str!("../data/ptc_ptp_0p1pct_absorption.csv");

pub const CSV_HEADER: &str = "wavelength_nm,value";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectrumError {
    #[error("spectrum parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid spectrum: {0}")]
    Invalid(String),
    #[error("emission support [{lo}, {hi}] nm is not inside the absorption domain [{alo}, {ahi}] nm")]
    DomainMismatch { lo: f64, hi: f64, alo: f64, ahi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumKind {
    /// Relative spectral power, arbitrary units.
    Emission,
    /// Absorption coefficient in mm⁻¹.
    Absorption,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum<T> {
    samples: Vec<(T, T)>,
    kind: SpectrumKind,
}

impl<T: Real> Spectrum<T> {
    pub fn new(samples: Vec<(T, T)>, kind: SpectrumKind) -> Result<Self, SpectrumError> {
        if samples.len() < 2 {
            return Err(SpectrumError::Invalid("need at least two samples".into()));
        }
        if samples.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(SpectrumError::Invalid("wavelengths must be strictly increasing".into()));
        }
        if samples.iter().any(|s| !(s.1 >= T::zero()) || !s.1.is_finite()) {
            return Err(SpectrumError::Invalid("values must be finite and >= 0".into()));
        }
        let s = Self { samples, kind };
        if kind == SpectrumKind::Emission && !(s.integral() > T::zero()) {
            return Err(SpectrumError::Invalid("emission spectrum integrates to zero".into()));
        }
        Ok(s)
    }

    /// Parses the two-column `wavelength_nm,value` CSV format.
    pub fn from_csv(text: &str, kind: SpectrumKind) -> Result<Self, SpectrumError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            _ => {
                return Err(SpectrumError::Parse {
                    line: 1,
                    msg: format!("expected header `{CSV_HEADER}`"),
                })
            }
        }
        let mut samples = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split(',');
            let mut field = |name: &str| -> Result<T, SpectrumError> {
                let raw = cols.next().ok_or_else(|| SpectrumError::Parse {
                    line: i + 1,
                    msg: format!("missing {name}"),
                })?;
                raw.trim().parse::<f64>().map(T::lit).map_err(|e| SpectrumError::Parse {
                    line: i + 1,
                    msg: format!("{name}: {e}"),
                })
            };
            let w = field("wavelength")?;
            let v = field("value")?;
            if cols.next().is_some() {
                return Err(SpectrumError::Parse {
                    line: i + 1,
                    msg: "expected two columns".into(),
                });
            }
            samples.push((w, v));
        }
        Self::new(samples, kind)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for (w, v) in &self.samples {
            out.push_str(&format!("{},{}\n", w.to_f64_lossy(), v.to_f64_lossy()));
        }
        out
    }

    pub fn bundled_led() -> Self {
        Self::from_csv(BUNDLED_LED_EMISSION, SpectrumKind::Emission).expect("bundled LED spectrum")
    }

    pub fn bundled_ptc_ptp() -> Self {
        Self::from_csv(BUNDLED_PTC_PTP_ABSORPTION, SpectrumKind::Absorption)
            .expect("bundled absorption spectrum")
    }

    pub fn kind(&self) -> SpectrumKind {
        self.kind
    }

    pub fn samples(&self) -> &[(T, T)] {
        &self.samples
    }

    pub fn domain(&self) -> (T, T) {
        (self.samples[0].0, self.samples[self.samples.len() - 1].0)
    }

    /// Linear interpolation; zero outside the tabulated range.
    pub fn value_at(&self, wavelength: T) -> T {
        let s = &self.samples;
        let (lo, hi) = self.domain();
        if wavelength < lo || wavelength > hi {
            return T::zero();
        }
        let i = s.partition_point(|p| p.0 <= wavelength).clamp(1, s.len() - 1);
        let (w0, v0) = s[i - 1];
        let (w1, v1) = s[i];
        v0 + (v1 - v0) * (wavelength - w0) / (w1 - w0)
    }

    /// Trapezoidal integral over the tabulated range.
    pub fn integral(&self) -> T {
        self.samples
            .windows(2)
            .map(|w| T::lit(0.5) * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
            .sum()
    }

    /// Cumulative trapezoidal integral at each sample, normalized to end at 1.
    pub fn normalized_cdf(&self) -> Vec<T> {
        let mut acc = T::zero();
        let mut cdf = vec![T::zero()];
        for w in self.samples.windows(2) {
            acc += T::lit(0.5) * (w[1].0 - w[0].0) * (w[0].1 + w[1].1);
            cdf.push(acc);
        }
        let total = acc;
        cdf.iter().map(|c| *c / total).collect()
    }
}

/// Emission-weighted mean absorption coefficient, trapezoidal quadrature on the
/// union of both wavelength grids over the emission support.
pub fn effective_absorption<T: Real>(
    emission: &Spectrum<T>,
    absorption: &Spectrum<T>,
) -> Result<T, SpectrumError> {
    let (lo, hi) = emission.domain();
    let (alo, ahi) = absorption.domain();
    if lo < alo || hi > ahi {
        return Err(SpectrumError::DomainMismatch {
            lo: lo.to_f64_lossy(),
            hi: hi.to_f64_lossy(),
            alo: alo.to_f64_lossy(),
            ahi: ahi.to_f64_lossy(),
        });
    }
    let mut grid: Vec<T> = emission
        .samples
        .iter()
        .map(|s| s.0)
        .chain(absorption.samples.iter().map(|s| s.0).filter(|&w| w > lo && w < hi))
        .collect();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();

    let half = T::lit(0.5);
    let (mut num, mut den) = (T::zero(), T::zero());
    for w in grid.windows(2) {
        let (e0, e1) = (emission.value_at(w[0]), emission.value_at(w[1]));
        let (a0, a1) = (absorption.value_at(w[0]), absorption.value_at(w[1]));
        let dw = w[1] - w[0];
        num += half * dw * (e0 * a0 + e1 * a1);
        den += half * dw * (e0 + e1);
    }
    Ok(num / den)
}
