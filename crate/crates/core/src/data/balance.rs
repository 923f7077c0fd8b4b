//! Minority oversampling by duplication and by SMOTE interpolation.

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

pub const DEFAULT_SMOTE_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Balancing {
    #[default]
    None,
    Ros,
    Smote,
}

impl Balancing {
    /// Applies the strategy to a training split.
    pub fn apply(self, ds: &Dataset, k: usize, rng: &mut RngStream) -> Result<Dataset> {
        match self {
            Balancing::None => Ok(ds.clone()),
            Balancing::Ros => ros_balance(ds, rng),
            Balancing::Smote => smote_balance(ds, k, rng),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Balancing::None => "none",
            Balancing::Ros => "ros",
            Balancing::Smote => "smote",
        }
    }
}

impl std::str::FromStr for Balancing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Balancing::None),
            "ros" => Ok(Balancing::Ros),
            "smote" => Ok(Balancing::Smote),
            other => Err(Error::Config(format!("unknown balancing '{other}' (none|ros|smote)"))),
        }
    }
}

/// Where a row of a balanced dataset came from, by index into the input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Origin {
    Original(usize),
    Duplicate(usize),
    Interpolated { base: usize, neighbor: usize, lambda: f64 },
}

fn members_by_class(ds: &Dataset) -> Result<Vec<Vec<usize>>> {
    let mut by_class = vec![Vec::new(); ds.n_classes()];
    for (i, &l) in ds.y.iter().enumerate() {
        by_class[l].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::EmptyDataset(format!(
            "class '{}' has no samples to oversample",
            ds.codec.name(c)?
        )));
    }
    Ok(by_class)
}

fn assemble(ds: &Dataset, origins: &[Origin]) -> Dataset {
    let w = ds.row_width();
    let mut data = Vec::with_capacity(origins.len() * w);
    let mut y = Vec::with_capacity(origins.len());
    for o in origins {
        match *o {
            Origin::Original(i) | Origin::Duplicate(i) => {
                data.extend_from_slice(ds.sample(i));
                y.push(ds.y[i]);
            }
            Origin::Interpolated { base, neighbor, lambda } => {
                let (x, z) = (ds.sample(base), ds.sample(neighbor));
                data.extend(x.iter().zip(z).map(|(a, b)| a + lambda * (b - a)));
                y.push(ds.y[base]);
            }
        }
    }
    Dataset {
        x: Tensor::new(vec![origins.len(), ds.seq_len(), ds.input_dim()], data).expect("sized"),
        y,
        codec: ds.codec.clone(),
    }
}

fn ros_origins(members: &[usize], need: usize, rng: &mut RngStream, out: &mut Vec<Origin>) {
    for _ in 0..need {
        out.push(Origin::Duplicate(members[rng.below(members.len())]));
    }
}

/// Duplicates minority rows (with replacement) until every class matches the
/// majority count. Originals come first, in input order.
pub fn ros_balance(ds: &Dataset, rng: &mut RngStream) -> Result<Dataset> {
    let by_class = members_by_class(ds)?;
    let target = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut origins: Vec<Origin> = (0..ds.len()).map(Origin::Original).collect();
    for members in &by_class {
        ros_origins(members, target - members.len(), rng, &mut origins);
    }
    Ok(assemble(ds, &origins))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `k` nearest same-class neighbours of `i` (ties by index).
fn neighbours(ds: &Dataset, members: &[usize], i: usize, k: usize) -> Vec<usize> {
    let xi = ds.sample(i);
    let mut d: Vec<(f64, usize)> = members
        .iter()
        .filter(|&&j| j != i)
        .map(|&j| (sq_dist(xi, ds.sample(j)), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.truncate(k);
    d.into_iter().map(|(_, j)| j).collect()
}

pub(crate) fn smote_with<F>(ds: &Dataset, k: usize, rng: &mut RngStream, mut lambda: F) -> Result<(Dataset, Vec<Origin>)>
where
    F: FnMut(&mut RngStream) -> f64,
{
    if k == 0 {
        return Err(Error::Config("SMOTE needs k >= 1".into()));
    }
    let by_class = members_by_class(ds)?;
    let target = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut origins: Vec<Origin> = (0..ds.len()).map(Origin::Original).collect();
    for (class, members) in by_class.iter().enumerate() {
        let need = target - members.len();
        if need == 0 {
            continue;
        }
        if members.len() == 1 {
            log::warn!(
                "class '{}' has a single sample; falling back to duplication",
                ds.codec.name(class)?
            );
            ros_origins(members, need, rng, &mut origins);
            continue;
        }
        let kk = k.min(members.len() - 1);
        let mut cache: Vec<Option<Vec<usize>>> = vec![None; members.len()];
        for _ in 0..need {
            let pick = rng.below(members.len());
            let base = members[pick];
            let nn = cache[pick].get_or_insert_with(|| neighbours(ds, members, base, kk));
            let neighbor = nn[rng.below(nn.len())];
            let lambda = lambda(rng);
            origins.push(Origin::Interpolated { base, neighbor, lambda });
        }
    }
    Ok((assemble(ds, &origins), origins))
}

/// SMOTE oversampling with provenance for every output row.
pub fn smote_balance_traced(ds: &Dataset, k: usize, rng: &mut RngStream) -> Result<(Dataset, Vec<Origin>)> {
    smote_with(ds, k, rng, |r| r.uniform())
}

/// Interpolates between a random minority row and one of its `k` nearest
/// same-class neighbours until every class matches the majority count.
pub fn smote_balance(ds: &Dataset, k: usize, rng: &mut RngStream) -> Result<Dataset> {
    Ok(smote_balance_traced(ds, k, rng)?.0)
}
