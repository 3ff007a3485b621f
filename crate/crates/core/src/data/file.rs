use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GroundTruth, PreferenceDataset, PreferenceSample, Provenance};
use crate::error::{Error, Result};
use crate::io::{read_versioned, write_json, Real};
use crate::linalg::Matrix;
use crate::mdp::{MarkovPolicy, TabularMdp};
use crate::scalar::Scalar;

pub const DATASET_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    f0: Vec<Real>,
    f1: Vec<Real>,
    o: u8,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpRecord {
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    initial_dist: Vec<Real>,
    transitions: Vec<Real>,
    features: Vec<Vec<Real>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthRecord {
    k: usize,
    frob_bound: Real,
    scale: Real,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    version: u64,
    d1: usize,
    d2: usize,
    n_users: usize,
    n_pairs: usize,
    seed: u64,
    config_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta_init: Option<Vec<Real>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delta_theta_star: Option<Vec<Real>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth: Option<TruthRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mdp: Option<MdpRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mu0: Option<Vec<Real>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mu1: Option<Vec<Real>>,
    samples: Vec<Vec<SampleRecord>>,
}

/// A dataset together with the instance that generated it.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle<T> {
    pub dataset: PreferenceDataset<T>,
    pub truth: GroundTruth<T>,
    pub mdp: TabularMdp<T>,
    pub mu0: MarkovPolicy<T>,
    pub mu1: MarkovPolicy<T>,
}

fn reals<T: Scalar>(xs: &[T]) -> Vec<Real> {
    xs.iter().map(|&x| Real::of(x)).collect()
}

fn unreal<T: Scalar>(xs: &[Real]) -> Vec<T> {
    xs.iter().map(|r| r.get()).collect()
}

fn matrix<T: Scalar>(rows: usize, cols: usize, xs: &[Real], field: &str) -> Result<Matrix<T>> {
    if xs.len() != rows * cols {
        return Err(Error::validation(field, format!("expected {} values, found {}", rows * cols, xs.len())));
    }
    Matrix::new(rows, cols, unreal(xs)).map_err(|e| Error::validation(field, e.to_string()))
}

fn base_file<T: Scalar>(ds: &PreferenceDataset<T>) -> DatasetFile {
    DatasetFile {
        version: DATASET_VERSION,
        d1: ds.d1,
        d2: ds.d2,
        n_users: ds.n_users(),
        n_pairs: ds.n_pairs(),
        seed: ds.provenance.seed,
        config_digest: ds.provenance.config_digest.clone(),
        theta_init: None,
        delta_theta_star: None,
        truth: None,
        mdp: None,
        mu0: None,
        mu1: None,
        samples: ds
            .per_user
            .iter()
            .map(|list| {
                list.iter().map(|s| SampleRecord { f0: reals(s.f0.as_slice()), f1: reals(s.f1.as_slice()), o: s.label }).collect()
            })
            .collect(),
    }
}

fn dataset_from<T: Scalar>(f: &DatasetFile) -> Result<PreferenceDataset<T>> {
    if f.samples.len() != f.n_users || f.n_users == 0 {
        return Err(Error::validation("samples", format!("expected {} users, found {}", f.n_users, f.samples.len())));
    }
    let mut per_user = Vec::with_capacity(f.n_users);
    for (i, list) in f.samples.iter().enumerate() {
        if list.len() != f.n_pairs {
            return Err(Error::validation(format!("samples[{i}]"), format!("expected {} pairs, found {}", f.n_pairs, list.len())));
        }
        let mut out = Vec::with_capacity(list.len());
        for (j, rec) in list.iter().enumerate() {
            let at = format!("samples[{i}][{j}]");
            let f0 = matrix(f.d1, f.d2, &rec.f0, &format!("{at}.f0"))?;
            let f1 = matrix(f.d1, f.d2, &rec.f1, &format!("{at}.f1"))?;
            out.push(PreferenceSample::new(i, f0, f1, rec.o).map_err(|e| Error::validation(at, e.to_string()))?);
        }
        per_user.push(out);
    }
    Ok(PreferenceDataset::new(f.d1, f.d2, per_user)?
        .with_provenance(Provenance { seed: f.seed, config_digest: f.config_digest.clone() }))
}

pub fn save_dataset<T: Scalar>(ds: &PreferenceDataset<T>, path: &Path) -> Result<()> {
    write_json(path, &base_file(ds))
}

/// Reads the samples of a dataset file; instance fields, if any, are ignored.
pub fn load_dataset<T: Scalar>(path: &Path) -> Result<PreferenceDataset<T>> {
    dataset_from(&read_versioned::<DatasetFile>(path, DATASET_VERSION)?)
}

pub fn save_bundle<T: Scalar>(bundle: &DatasetBundle<T>, path: &Path) -> Result<()> {
    let mut f = base_file(&bundle.dataset);
    let mdp = &bundle.mdp;
    f.theta_init = Some(reals(bundle.truth.theta_init.as_slice()));
    f.delta_theta_star = Some(reals(bundle.truth.delta_theta_star.as_slice()));
    f.truth = Some(TruthRecord {
        k: bundle.truth.k(),
        frob_bound: Real::of(bundle.truth.frob_bound),
        scale: Real::of(bundle.truth.scale),
    });
    f.mdp = Some(MdpRecord {
        n_states: mdp.n_states(),
        n_actions: mdp.n_actions(),
        horizon: mdp.horizon(),
        initial_dist: reals(mdp.initial_dist()),
        transitions: reals(mdp.transitions()),
        features: mdp.features().iter().map(|m| reals(m.as_slice())).collect(),
    });
    f.mu0 = Some(reals(bundle.mu0.as_slice()));
    f.mu1 = Some(reals(bundle.mu1.as_slice()));
    write_json(path, &f)
}

pub fn load_bundle<T: Scalar>(path: &Path) -> Result<DatasetBundle<T>> {
    let f: DatasetFile = read_versioned(path, DATASET_VERSION)?;
    let dataset = dataset_from(&f)?;
    let missing = |field: &str| Error::validation(field, "required for a dataset bundle");
    let theta_init = matrix(f.d1, f.d2, f.theta_init.as_deref().ok_or_else(|| missing("theta_init"))?, "theta_init")?;
    let delta = matrix(
        f.d1,
        f.n_users * f.d2,
        f.delta_theta_star.as_deref().ok_or_else(|| missing("delta_theta_star"))?,
        "delta_theta_star",
    )?;
    let t = f.truth.as_ref().ok_or_else(|| missing("truth"))?;
    let truth = GroundTruth::new(theta_init, delta, t.k, t.frob_bound.get(), t.scale.get())
        .map_err(|e| Error::validation("truth", e.to_string()))?;
    let m = f.mdp.as_ref().ok_or_else(|| missing("mdp"))?;
    let features = m
        .features
        .iter()
        .enumerate()
        .map(|(i, xs)| matrix(f.d1, f.d2, xs, &format!("mdp.features[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    let mdp = TabularMdp::new(m.n_states, m.n_actions, m.horizon, unreal(&m.initial_dist), unreal(&m.transitions), features)
        .map_err(|e| Error::validation("mdp", e.to_string()))?;
    let policy = |xs: Option<&Vec<Real>>, field: &str| -> Result<MarkovPolicy<T>> {
        let xs = xs.ok_or_else(|| missing(field))?;
        MarkovPolicy::new(m.n_states, m.n_actions, m.horizon, unreal(xs)).map_err(|e| Error::validation(field, e.to_string()))
    };
    let mu0 = policy(f.mu0.as_ref(), "mu0")?;
    let mu1 = policy(f.mu1.as_ref(), "mu1")?;
    Ok(DatasetBundle { dataset, truth, mdp, mu0, mu1 })
}
