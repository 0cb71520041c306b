use rand::seq::index;
use rand::Rng;

use super::{PopulationRow, SamplingDesign};
use crate::data::{Covariate, Dataset, Observation, Schema};
use crate::error::{Error, Result};

/// Noncase quotas in tenths for the strata
/// (female no comorbidity, male no comorbidity, female comorbid, male comorbid).
pub const NONCASE_SHARES: [u64; 4] = [4, 1, 1, 4];

pub fn simulation_schema() -> Schema {
    Schema::new(vec![
        Covariate::binary("x_f"),
        Covariate::binary("x_co"),
        Covariate::continuous("x_t"),
    ])
}

/// Converts population rows into a fully observed dataset.
pub fn to_dataset(rows: &[PopulationRow]) -> Result<Dataset> {
    let obs = rows
        .iter()
        .map(|r| {
            let x = vec![f64::from(u8::from(r.x_f)), f64::from(u8::from(r.x_co)), r.x_t];
            Observation::observed(r.a, r.y, x)
        })
        .collect();
    Dataset::new(simulation_schema(), obs)
}

/// Uniform sample without replacement of `n` symptomatic (`d = 1`) rows,
/// kept in population order.
pub fn sample_phase_one<R: Rng + ?Sized>(
    pop: &[PopulationRow],
    n: usize,
    rng: &mut R,
) -> Result<Dataset> {
    let symptomatic: Vec<usize> = (0..pop.len()).filter(|&i| pop[i].d).collect();
    if symptomatic.len() < n {
        return Err(Error::InfeasibleDesign(format!(
            "only {} symptomatic rows available for a phase-one sample of {n}",
            symptomatic.len()
        )));
    }
    let mut picked: Vec<usize> = index::sample(rng, symptomatic.len(), n)
        .into_iter()
        .map(|k| symptomatic[k])
        .collect();
    picked.sort_unstable();
    let rows: Vec<PopulationRow> = picked.into_iter().map(|i| pop[i]).collect();
    to_dataset(&rows)
}

/// Stratum index used by the noncase quotas.
pub fn noncase_stratum(x_f: bool, x_co: bool) -> usize {
    match (x_f, x_co) {
        (true, false) => 0,
        (false, false) => 1,
        (true, true) => 2,
        (false, true) => 3,
    }
}

/// Splits `total` proportionally to `weights`, flooring and then handing
/// the leftover units to the largest remainders (lowest index on ties).
fn largest_remainder(total: u64, weights: &[u64; 4]) -> [u64; 4] {
    let sum: u64 = weights.iter().sum();
    let mut out = [0u64; 4];
    if sum == 0 {
        return out;
    }
    let mut rem = [0u128; 4];
    for k in 0..4 {
        let num = u128::from(total) * u128::from(weights[k]);
        out[k] = (num / u128::from(sum)) as u64;
        rem[k] = num % u128::from(sum);
    }
    let mut left = total - out.iter().sum::<u64>();
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&a, &b| rem[b].cmp(&rem[a]).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if weights[k] > 0 {
            out[k] += 1;
            left -= 1;
        }
    }
    out
}

/// Number of noncases to draw from each stratum. Quotas follow
/// [`NONCASE_SHARES`]; any stratum short of its quota gives up the
/// shortfall, which is spread over the other strata in proportion to their
/// remaining noncases.
pub fn allocate_noncases(required: usize, available: [usize; 4]) -> Result<[usize; 4]> {
    let total: usize = available.iter().sum();
    if total < required {
        return Err(Error::InfeasibleDesign(format!(
            "{required} noncases required but only {total} available"
        )));
    }
    let quota = largest_remainder(required as u64, &NONCASE_SHARES);
    let mut alloc = [0usize; 4];
    for k in 0..4 {
        alloc[k] = (quota[k] as usize).min(available[k]);
    }
    let shortfall = required - alloc.iter().sum::<usize>();
    if shortfall > 0 {
        let capacity = std::array::from_fn(|k| (available[k] - alloc[k]) as u64);
        let extra = largest_remainder(shortfall as u64, &capacity);
        for k in 0..4 {
            alloc[k] += extra[k] as usize;
        }
    }
    debug_assert!((0..4).all(|k| alloc[k] <= available[k]));
    Ok(alloc)
}

/// Assigns `Δ` under the design and masks the exposure of unsampled rows.
/// Biased designs keep every case and draw the required noncases within
/// strata.
pub fn apply_two_phase<R: Rng + ?Sized>(
    ds: &Dataset,
    design: SamplingDesign,
    rng: &mut R,
) -> Result<Dataset> {
    let Some(ratio) = design.noncase_ratio() else {
        return Ok(ds.clone());
    };
    let schema = ds.schema();
    let jf = schema.index_of("x_f")?;
    let jco = schema.index_of("x_co")?;
    let cases = ds.rows().iter().filter(|r| r.y).count();
    let mut by_stratum: [Vec<usize>; 4] = Default::default();
    for (i, r) in ds.rows().iter().enumerate() {
        if !r.y {
            by_stratum[noncase_stratum(r.x[jf] != 0.0, r.x[jco] != 0.0)].push(i);
        }
    }
    let available = std::array::from_fn(|k| by_stratum[k].len());
    let alloc = allocate_noncases(ratio * cases, available)?;

    let mut keep = vec![false; ds.n()];
    for (i, r) in ds.rows().iter().enumerate() {
        keep[i] = r.y;
    }
    for k in 0..4 {
        for pos in index::sample(rng, by_stratum[k].len(), alloc[k]) {
            keep[by_stratum[k][pos]] = true;
        }
    }
    let rows = ds
        .rows()
        .iter()
        .zip(keep)
        .map(|(r, keep)| {
            if keep {
                r.clone()
            } else {
                Observation::masked(r.y, r.x.clone())
            }
        })
        .collect();
    Dataset::new(schema.clone(), rows)
}
