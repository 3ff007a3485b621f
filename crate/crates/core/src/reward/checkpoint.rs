use std::path::Path;

use serde::{Deserialize, Serialize};

use super::head::{HeadSpec, RewardHead};
use super::model::{BaselineModel, BaselineParams, RewardModel, ShareMode, SharedLoraModel};
use crate::error::{Error, Result};
use crate::io::{read_versioned, write_json, MatrixRecord, Real};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u64 = 1;

/// Any trained reward model.
#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint<T> {
    Shared(SharedLoraModel<T>),
    Baseline(BaselineModel<T>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ModelTag {
    ShareLeft,
    ShareRight,
    LoraGlobal,
    LoraLocal,
    FullParam,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u64,
    share_mode: ModelTag,
    dims: (usize, usize),
    n_users: usize,
    head: HeadSpec,
    frob_bound: Real,
    theta_init: MatrixRecord,
    shared_factor: Vec<MatrixRecord>,
    user_factors: Vec<Vec<MatrixRecord>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn n_users(&self) -> usize {
        match self {
            Checkpoint::Shared(m) => m.n_users(),
            Checkpoint::Baseline(m) => m.n_users(),
        }
    }

    pub fn head(&self) -> &RewardHead<T> {
        match self {
            Checkpoint::Shared(m) => m.head(),
            Checkpoint::Baseline(m) => m.head(),
        }
    }

    pub fn delta_theta(&self, user: usize) -> Matrix<T> {
        match self {
            Checkpoint::Shared(m) => m.delta_theta(user),
            Checkpoint::Baseline(m) => m.delta_theta(user),
        }
    }

    pub fn theta(&self, user: usize) -> Matrix<T> {
        match self {
            Checkpoint::Shared(m) => m.theta(user),
            Checkpoint::Baseline(m) => m.theta(user),
        }
    }

    fn to_file(&self) -> CheckpointFile {
        let rec = MatrixRecord::from_matrix;
        let (tag, theta_init, head, bound, n_users, shared, users) = match self {
            Checkpoint::Shared(m) => (
                match m.share_mode {
                    ShareMode::ShareLeft => ModelTag::ShareLeft,
                    ShareMode::ShareRight => ModelTag::ShareRight,
                },
                &m.theta_init,
                m.head,
                m.frob_bound,
                m.n_users(),
                vec![rec(&m.shared_factor)],
                m.user_factors.iter().map(|u| vec![rec(u)]).collect(),
            ),
            Checkpoint::Baseline(m) => {
                let (tag, shared, users) = match &m.params {
                    BaselineParams::Global { b, w } => (ModelTag::LoraGlobal, vec![rec(b), rec(w)], Vec::new()),
                    BaselineParams::Local { pairs } => {
                        (ModelTag::LoraLocal, Vec::new(), pairs.iter().map(|(b, w)| vec![rec(b), rec(w)]).collect())
                    }
                    BaselineParams::Full { deltas } => (ModelTag::FullParam, Vec::new(), deltas.iter().map(|d| vec![rec(d)]).collect()),
                };
                (tag, &m.theta_init, m.head, m.frob_bound, m.n_users, shared, users)
            }
        };
        CheckpointFile {
            version: CHECKPOINT_VERSION,
            share_mode: tag,
            dims: theta_init.shape(),
            n_users,
            head: head.to_spec(),
            frob_bound: Real::of(bound),
            theta_init: rec(theta_init),
            shared_factor: shared,
            user_factors: users,
        }
    }

    fn from_file(f: CheckpointFile) -> Result<Self> {
        let theta_init: Matrix<T> = f.theta_init.to_matrix("theta_init")?;
        if theta_init.shape() != f.dims {
            return Err(Error::validation("dims", "does not match theta_init"));
        }
        let head = RewardHead::from_spec(&f.head).map_err(|e| Error::validation("head", e.to_string()))?;
        let bound = f.frob_bound.get();
        let shared = f
            .shared_factor
            .iter()
            .enumerate()
            .map(|(i, r)| r.to_matrix(&format!("shared_factor[{i}]")))
            .collect::<Result<Vec<Matrix<T>>>>()?;
        let users = f
            .user_factors
            .iter()
            .enumerate()
            .map(|(i, list)| {
                list.iter().enumerate().map(|(j, r)| r.to_matrix(&format!("user_factors[{i}][{j}]"))).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let arity = |shared_n: usize, user_n: usize, n_users: usize| {
            if shared.len() != shared_n || users.len() != n_users || users.iter().any(|u| u.len() != user_n) {
                Err(Error::validation("user_factors", "factor count does not match the model kind"))
            } else {
                Ok(())
            }
        };
        let users_expected = if f.share_mode == ModelTag::LoraGlobal { 0 } else { f.n_users };
        let model = match f.share_mode {
            ModelTag::ShareLeft | ModelTag::ShareRight => {
                arity(1, 1, users_expected)?;
                let mode = if f.share_mode == ModelTag::ShareLeft { ShareMode::ShareLeft } else { ShareMode::ShareRight };
                let users = users.into_iter().map(|mut u| u.remove(0)).collect();
                Checkpoint::Shared(SharedLoraModel::new(theta_init, mode, shared.into_iter().next().unwrap(), users, bound, head)?)
            }
            ModelTag::LoraGlobal => {
                arity(2, 0, users_expected)?;
                let mut it = shared.into_iter();
                let (b, w) = (it.next().unwrap(), it.next().unwrap());
                Checkpoint::Baseline(BaselineModel::new(theta_init, f.n_users, bound, head, BaselineParams::Global { b, w })?)
            }
            ModelTag::LoraLocal => {
                arity(0, 2, users_expected)?;
                let pairs = users
                    .into_iter()
                    .map(|u| {
                        let mut it = u.into_iter();
                        (it.next().unwrap(), it.next().unwrap())
                    })
                    .collect();
                Checkpoint::Baseline(BaselineModel::new(theta_init, f.n_users, bound, head, BaselineParams::Local { pairs })?)
            }
            ModelTag::FullParam => {
                arity(0, 1, users_expected)?;
                let deltas = users.into_iter().map(|mut u| u.remove(0)).collect();
                Checkpoint::Baseline(BaselineModel::new(theta_init, f.n_users, bound, head, BaselineParams::Full { deltas })?)
            }
        };
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("checkpoint values are finite")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(crate::io::parse_versioned(text, CHECKPOINT_VERSION)?)
    }
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    write_json(path, &ckpt.to_file())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::from_file(read_versioned(path, CHECKPOINT_VERSION)?)
}
