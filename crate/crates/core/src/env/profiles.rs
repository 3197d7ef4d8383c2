//! Daily exogenous profiles and their synthetic generator.
//!
//! Synthetic form (per day `d`, hour `h`, seeded ChaCha8 stream):
//! - uncontrollable load `uc_i(h) = base_i · (0.75 + 0.25·sin(2π(h − 9)/24) + 0.15·evening(h)) · (1 + 0.08·ε)`
//! - PV `cap · max(0, sin(π(h − 6)/12)) · cloud_d` for `6 < h < 18`, else 0
//! - wind `cap · clamp(0.45 + 0.2·sin(2π(h + 3)/24) + 0.1·ε, 0, 1)`
//! - price and grid intensity: bundled hourly curves `· (1 + 0.04·ε)`
//! - background load factor: bundled hourly curve `· (1 + 0.03·ε)`
//!
//! with `ε ~ N(0, 1)` drawn independently per entry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const HOURS: usize = 24;

/// Wholesale price, $/MWh.
pub const DEFAULT_PRICE: [f64; HOURS] = [
    42.0, 40.0, 38.0, 38.0, 40.0, 45.0, 55.0, 70.0, 82.0, 88.0, 90.0, 88.0, 84.0, 80.0, 82.0, 88.0, 110.0, 150.0,
    200.0, 235.0, 220.0, 165.0, 100.0, 55.0,
];
/// Grid-supply intensity, tCO₂/MWh: solar dip mid-day, gas-heavy evening peak.
pub const DEFAULT_PSI_GRID: [f64; HOURS] = [
    0.56, 0.55, 0.55, 0.55, 0.56, 0.58, 0.62, 0.60, 0.54, 0.49, 0.46, 0.45, 0.45, 0.46, 0.48, 0.52, 0.60, 0.72, 0.82,
    0.85, 0.80, 0.72, 0.64, 0.59,
];
/// Multiplier on nominal background bus loads.
pub const DEFAULT_BACKGROUND: [f64; HOURS] = [
    0.62, 0.58, 0.56, 0.55, 0.57, 0.63, 0.72, 0.82, 0.88, 0.90, 0.91, 0.92, 0.91, 0.89, 0.88, 0.89, 0.93, 0.98, 1.00,
    1.00, 0.96, 0.88, 0.78, 0.68,
];

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile: {0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One day of exogenous inputs, indexed `[series][hour]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayProfile {
    /// MW per agent.
    pub uc_load: Vec<Vec<f64>>,
    /// MW available per renewable unit (network order).
    pub res_cap: Vec<Vec<f64>>,
    /// $/MWh.
    pub price: Vec<f64>,
    /// tCO₂/MWh.
    pub psi_grid: Vec<f64>,
    /// Background load multiplier.
    pub background: Vec<f64>,
}

impl DayProfile {
    pub fn horizon(&self) -> usize {
        self.price.len()
    }

    pub fn validate(&self, n_agents: usize, n_res: usize, horizon: usize) -> Result<(), ProfileError> {
        let bad = |m: String| Err(ProfileError::Invalid(m));
        if self.uc_load.len() != n_agents {
            return bad(format!("{} agent load series for {n_agents} agents", self.uc_load.len()));
        }
        if self.res_cap.len() != n_res {
            return bad(format!("{} renewable series for {n_res} units", self.res_cap.len()));
        }
        let series = self
            .uc_load
            .iter()
            .chain(&self.res_cap)
            .chain([&self.price, &self.psi_grid, &self.background]);
        for s in series {
            if s.len() != horizon {
                return bad(format!("series of length {} for horizon {horizon}", s.len()));
            }
            if s.iter().any(|x| !x.is_finite()) {
                return bad("non-finite profile value".into());
            }
        }
        if self.uc_load.iter().chain(&self.res_cap).flatten().chain(&self.psi_grid).chain(&self.background).any(|&x| x < 0.0) {
            return bad("loads, capacities, intensities and multipliers must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResKind {
    Pv,
    Wind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Mean uncontrollable load per agent, MW.
    pub uc_base: Vec<f64>,
    /// Kind and nameplate (MW) per renewable unit.
    pub res: Vec<(ResKind, f64)>,
    pub price: Vec<f64>,
    pub psi_grid: Vec<f64>,
    pub background: Vec<f64>,
}

impl SynthSpec {
    pub fn with_defaults(uc_base: Vec<f64>, res: Vec<(ResKind, f64)>) -> Self {
        SynthSpec {
            uc_base,
            res,
            price: DEFAULT_PRICE.to_vec(),
            psi_grid: DEFAULT_PSI_GRID.to_vec(),
            background: DEFAULT_BACKGROUND.to_vec(),
        }
    }
}

fn noise(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Deterministic in `seed`; day `d` depends only on `(seed, d)`.
pub fn synthesize(spec: &SynthSpec, seed: u64, days: usize) -> Vec<DayProfile> {
    (0..days)
        .map(|d| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(d as u64 + 1);
            synth_day(spec, &mut rng)
        })
        .collect()
}

fn synth_day(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> DayProfile {
    let tau = std::f64::consts::TAU;
    let uc_load = spec
        .uc_base
        .iter()
        .map(|&base| {
            (0..HOURS)
                .map(|h| {
                    let hf = h as f64;
                    let evening = if (17..=21).contains(&h) { 1.0 } else { 0.0 };
                    let shape = 0.75 + 0.25 * (tau * (hf - 9.0) / 24.0).sin() + 0.15 * evening;
                    (base * shape * (1.0 + 0.08 * noise(rng))).max(0.0)
                })
                .collect()
        })
        .collect();
    let res_cap = spec
        .res
        .iter()
        .map(|&(kind, cap)| match kind {
            ResKind::Pv => {
                let cloud = (0.8 + 0.15 * noise(rng)).clamp(0.3, 1.0);
                (0..HOURS)
                    .map(|h| {
                        let hf = h as f64;
                        if h > 6 && h < 18 {
                            cap * (std::f64::consts::PI * (hf - 6.0) / 12.0).sin().max(0.0) * cloud
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
            ResKind::Wind => (0..HOURS)
                .map(|h| {
                    let hf = h as f64;
                    cap * (0.45 + 0.2 * (tau * (hf + 3.0) / 24.0).sin() + 0.1 * noise(rng)).clamp(0.0, 1.0)
                })
                .collect(),
        })
        .collect();
    let jitter = |base: &[f64], scale: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        base.iter().map(|&x| (x * (1.0 + scale * noise(rng))).max(0.0)).collect()
    };
    let price = jitter(&spec.price, 0.04, rng);
    let psi_grid = jitter(&spec.psi_grid, 0.04, rng);
    let background = jitter(&spec.background, 0.03, rng);
    DayProfile { uc_load, res_cap, price, psi_grid, background }
}

/// CSV header comment describing the generative form.
pub const SYNTH_HEADER: &str = "# synthetic profiles: uc = base*(0.75+0.25*sin(2pi(h-9)/24)+0.15*[17<=h<=21])*(1+0.08e); \
pv = cap*max(0,sin(pi(h-6)/12))*cloud for 6<h<18 else 0; wind = cap*clamp(0.45+0.2*sin(2pi(h+3)/24)+0.1e,0,1); \
price, psi_grid, background = bundled curve*(1+s*e), s = 0.04/0.04/0.03; e ~ N(0,1)";

/// One row per (day, hour): `day,hour,price,psi_grid,background,uc_0..,res_0..`.
pub fn write_csv(path: impl AsRef<Path>, days: &[DayProfile], header_comment: Option<&str>) -> Result<(), ProfileError> {
    let mut out = Vec::new();
    if let Some(c) = header_comment {
        out.extend_from_slice(c.as_bytes());
        out.push(b'\n');
    }
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let n_agents = days.first().map_or(0, |d| d.uc_load.len());
        let n_res = days.first().map_or(0, |d| d.res_cap.len());
        let mut head = vec!["day".to_string(), "hour".into(), "price".into(), "psi_grid".into(), "background".into()];
        head.extend((0..n_agents).map(|i| format!("uc_{i}")));
        head.extend((0..n_res).map(|r| format!("res_{r}")));
        w.write_record(&head)?;
        for (d, day) in days.iter().enumerate() {
            for h in 0..day.horizon() {
                let mut rec = vec![d.to_string(), h.to_string()];
                rec.extend([day.price[h], day.psi_grid[h], day.background[h]].iter().map(|x| x.to_string()));
                rec.extend(day.uc_load.iter().map(|s| s[h].to_string()));
                rec.extend(day.res_cap.iter().map(|s| s[h].to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<DayProfile>, ProfileError> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let head = rdr.headers()?.clone();
    let col = |name: &str| head.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| ProfileError::Invalid(format!("missing column {name}")));
    let (c_day, c_hour, c_price, c_psi, c_bg) = (need("day")?, need("hour")?, need("price")?, need("psi_grid")?, need("background")?);
    let uc_cols: Vec<usize> = (0..).map_while(|i| col(&format!("uc_{i}"))).collect();
    let res_cols: Vec<usize> = (0..).map_while(|i| col(&format!("res_{i}"))).collect();
    let mut days: Vec<DayProfile> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |c: usize| -> Result<f64, ProfileError> {
            rec[c].trim().parse().map_err(|_| ProfileError::Invalid(format!("bad number {:?}", &rec[c])))
        };
        let d = num(c_day)? as usize;
        let h = num(c_hour)? as usize;
        if d == days.len() {
            days.push(DayProfile {
                uc_load: vec![Vec::new(); uc_cols.len()],
                res_cap: vec![Vec::new(); res_cols.len()],
                price: Vec::new(),
                psi_grid: Vec::new(),
                background: Vec::new(),
            });
        }
        let day = days
            .get_mut(d)
            .filter(|day| day.price.len() == h)
            .ok_or_else(|| ProfileError::Invalid(format!("rows must be ordered by day then hour (day {d}, hour {h})")))?;
        day.price.push(num(c_price)?);
        day.psi_grid.push(num(c_psi)?);
        day.background.push(num(c_bg)?);
        for (s, &c) in day.uc_load.iter_mut().zip(&uc_cols) {
            s.push(num(c)?);
        }
        for (s, &c) in day.res_cap.iter_mut().zip(&res_cols) {
            s.push(num(c)?);
        }
    }
    Ok(days)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec::with_defaults(vec![0.01, 0.02], vec![(ResKind::Wind, 1.2), (ResKind::Pv, 1.0)])
    }

    #[test]
    fn deterministic_and_shaped() {
        let a = synthesize(&spec(), 0, 30);
        assert_eq!(a, synthesize(&spec(), 0, 30));
        assert_ne!(a, synthesize(&spec(), 1, 30));
        assert_eq!(a.len(), 30);
        for d in &a {
            d.validate(2, 2, HOURS).unwrap();
            for h in (0..=6).chain(18..24) {
                assert_eq!(d.res_cap[1][h], 0.0, "PV at night, hour {h}");
            }
            assert!(d.res_cap[1][12] > 0.0);
            assert!(d.res_cap[0].iter().all(|&w| (0.0..=1.2).contains(&w)));
        }
        // extending the horizon in days leaves earlier days unchanged
        assert_eq!(synthesize(&spec(), 0, 5)[..], a[..5]);
    }

    #[test]
    fn csv_round_trip() {
        let days = synthesize(&spec(), 3, 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        write_csv(&p, &days, Some(SYNTH_HEADER)).unwrap();
        let back = read_csv(&p).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in days.iter().zip(&back) {
            for (x, y) in a.price.iter().zip(&b.price) {
                assert!((x - y).abs() < 1e-12);
            }
            assert_eq!(a.uc_load[1].len(), b.uc_load[1].len());
        }
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 4 * HOURS);
    }

    #[test]
    fn validation_catches_length() {
        let mut d = synthesize(&spec(), 0, 1).remove(0);
        d.price.pop();
        assert!(d.validate(2, 2, HOURS).is_err());
    }
}
