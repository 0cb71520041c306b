//! Healthcare-seeking population generator. Each row is drawn by the
//! cascade X → A → Y → W → D with logistic conditionals.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ConfoundingSetting, SimConfig};
use crate::solvers::expit;

pub const P_FEMALE: f64 = 0.48;
pub const P_COMORBID: f64 = 0.23;

/// Distribution of the calendar-date covariate `x_t` (days): a normal
/// truncated to `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalendarSurrogate {
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for CalendarSurrogate {
    fn default() -> Self {
        Self {
            mean: 180.0,
            sd: 30.0,
            lower: 0.0,
            upper: 206.0,
        }
    }
}

impl CalendarSurrogate {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let normal = Normal::new(self.mean, self.sd).expect("sd must be positive and finite");
        loop {
            let v = normal.sample(rng);
            if v >= self.lower && v <= self.upper {
                return v;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationRow {
    pub x_f: bool,
    pub x_co: bool,
    pub x_t: f64,
    pub a: bool,
    pub y: bool,
    pub w: bool,
    pub d: bool,
}

#[inline]
fn b(v: bool) -> f64 {
    if v {
        1.0
    } else {
        0.0
    }
}

#[inline]
fn hinge(x: f64, knot: f64) -> f64 {
    if x >= knot {
        x - knot
    } else {
        0.0
    }
}

pub fn prob_exposure(setting: ConfoundingSetting, x_f: bool, x_co: bool, x_t: f64) -> f64 {
    let (f, co) = (b(x_f), b(x_co));
    let mut eta = 0.33f64.ln() + 3.0f64.ln() * f + 0.25f64.ln() * co + 1.01f64.ln() * x_t;
    if setting != ConfoundingSetting::MainEffects {
        eta += 4.0f64.ln() * f * co;
    }
    if setting == ConfoundingSetting::Splines {
        eta += 1.00f64.ln() * hinge(x_t, 90.0) + 0.97f64.ln() * hinge(x_t, 135.0);
    }
    expit(eta)
}

pub fn prob_infection(
    setting: ConfoundingSetting,
    beta_f: f64,
    a: bool,
    x_f: bool,
    x_co: bool,
    x_t: f64,
) -> f64 {
    let (f, co) = (b(x_f), b(x_co));
    let mut eta =
        0.15f64.ln() + beta_f * b(a) + 3.0f64.ln() * f + 4.0f64.ln() * co + 0.99f64.ln() * x_t;
    if setting != ConfoundingSetting::MainEffects {
        eta += 0.25f64.ln() * f * co;
    }
    if setting == ConfoundingSetting::Splines {
        eta += 1.00f64.ln() * hinge(x_t, 90.0) + 1.03f64.ln() * hinge(x_t, 135.0);
    }
    expit(eta)
}

pub fn prob_other_pathogen(x_f: bool, x_co: bool, x_t: f64) -> f64 {
    let eta = 0.10f64.ln()
        + 2.0f64.ln() * b(x_co)
        + 2.0f64.ln() * b(x_f)
        + 1.01f64.ln() * x_t
        + 0.99f64.ln() * hinge(x_t, 90.0)
        + 0.98f64.ln() * hinge(x_t, 180.0);
    expit(eta)
}

pub fn prob_symptomatic(y: bool, w: bool, x_f: bool, x_co: bool) -> f64 {
    let (y, w, f, co) = (b(y), b(w), b(x_f), b(x_co));
    let eta = 0.10f64.ln()
        + 2.0f64.ln() * co
        + 13.5f64.ln() * y
        + 1.08f64.ln() * y * f
        + 0.53f64.ln() * y * co
        + 4.0f64.ln() * w
        + 6.0f64.ln() * w * f
        + 0.53f64.ln() * w * co;
    expit(eta)
}

fn bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// Draws `cfg.population_size` rows.
pub fn generate_population<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Vec<PopulationRow> {
    (0..cfg.population_size)
        .map(|_| {
            let x_f = bernoulli(rng, P_FEMALE);
            let x_co = bernoulli(rng, P_COMORBID);
            let x_t = cfg.calendar.sample(rng);
            let a = bernoulli(rng, prob_exposure(cfg.setting, x_f, x_co, x_t));
            let y = bernoulli(rng, prob_infection(cfg.setting, cfg.beta_f, a, x_f, x_co, x_t));
            let w = bernoulli(rng, prob_other_pathogen(x_f, x_co, x_t));
            let d = bernoulli(rng, prob_symptomatic(y, w, x_f, x_co));
            PopulationRow {
                x_f,
                x_co,
                x_t,
                a,
                y,
                w,
                d,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_exposure_probability() {
        let p = prob_exposure(ConfoundingSetting::MainEffects, false, false, 0.0);
        assert!((p - 0.33 / 1.33).abs() < 1e-15);
        assert!((p - 0.2481).abs() < 1e-4);
    }

    #[test]
    fn interaction_terms_only_where_configured() {
        let main = prob_exposure(ConfoundingSetting::MainEffects, true, true, 50.0);
        let inter = prob_exposure(ConfoundingSetting::Interaction, true, true, 50.0);
        let eta = |p: f64| (p / (1.0 - p)).ln();
        assert!((eta(inter) - eta(main) - 4.0f64.ln()).abs() < 1e-12);
        // splines add nothing before the first knot
        let spl = prob_infection(ConfoundingSetting::Splines, 0.0, false, true, false, 80.0);
        let int = prob_infection(ConfoundingSetting::Interaction, 0.0, false, true, false, 80.0);
        assert!((spl - int).abs() < 1e-15);
        let spl = prob_infection(ConfoundingSetting::Splines, 0.0, false, true, false, 150.0);
        let int = prob_infection(ConfoundingSetting::Interaction, 0.0, false, true, false, 150.0);
        assert!((eta(spl) - eta(int) - 15.0 * 1.03f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn surrogate_respects_bounds() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let s = CalendarSurrogate::default();
        for _ in 0..2000 {
            let v = s.sample(&mut rng);
            assert!((s.lower..=s.upper).contains(&v));
        }
    }
}
