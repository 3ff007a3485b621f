use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::mpsc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_cell, Algo, ExperimentConfig};
use crate::error::{parse_error, Error, Result};

/// Column order of the sweep CSV.
pub const SWEEP_HEADER: [&str; 21] = [
    "seed",
    "N",
    "N_p",
    "k",
    "d1",
    "d2",
    "tail",
    "nu",
    "dist_b",
    "dk_ratio",
    "acc_share",
    "acc_local",
    "acc_global",
    "mean_value_gap",
    "zeta",
    "fw_gap_max",
    "ll_final",
    "wall_ms",
    "algo",
    "acc_model",
    "error",
];

/// One sweep cell. Inapplicable numbers are NaN; `error` is empty on success.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    #[serde(rename = "N")]
    pub n_users: usize,
    /// Training pairs per user.
    #[serde(rename = "N_p")]
    pub n_pairs: usize,
    pub k: usize,
    pub d1: usize,
    pub d2: usize,
    pub tail: f64,
    pub nu: f64,
    pub dist_b: f64,
    pub dk_ratio: f64,
    pub acc_share: f64,
    pub acc_local: f64,
    pub acc_global: f64,
    pub mean_value_gap: f64,
    pub zeta: f64,
    pub fw_gap_max: f64,
    pub ll_final: f64,
    pub wall_ms: f64,
    pub algo: Algo,
    pub acc_model: f64,
    pub error: String,
}

impl SweepRow {
    pub(crate) fn blank(cfg: &ExperimentConfig, seed: u64) -> Self {
        let n_test = (cfg.data.test_fraction * cfg.data.n_pairs as f64).round() as usize;
        let nan = f64::NAN;
        Self {
            seed,
            n_users: cfg.dims.n_users,
            n_pairs: cfg.data.n_pairs.saturating_sub(n_test),
            k: cfg.dims.k_model,
            d1: cfg.dims.d1,
            d2: cfg.dims.d2,
            tail: nan,
            nu: nan,
            dist_b: nan,
            dk_ratio: nan,
            acc_share: nan,
            acc_local: nan,
            acc_global: nan,
            mean_value_gap: nan,
            zeta: nan,
            fw_gap_max: nan,
            ll_final: nan,
            wall_ms: nan,
            algo: cfg.algo,
            acc_model: nan,
            error: String::new(),
        }
    }

    /// Fields as CSV cells, reals in shortest round-trip form.
    pub fn cells(&self) -> Vec<String> {
        let r = |x: f64| format!("{x:?}");
        vec![
            self.seed.to_string(),
            self.n_users.to_string(),
            self.n_pairs.to_string(),
            self.k.to_string(),
            self.d1.to_string(),
            self.d2.to_string(),
            r(self.tail),
            r(self.nu),
            r(self.dist_b),
            r(self.dk_ratio),
            r(self.acc_share),
            r(self.acc_local),
            r(self.acc_global),
            r(self.mean_value_gap),
            r(self.zeta),
            r(self.fw_gap_max),
            r(self.ll_final),
            r(self.wall_ms),
            self.algo.name().to_owned(),
            r(self.acc_model),
            self.error.clone(),
        ]
    }

    /// Bitwise comparison that treats NaN cells as equal.
    pub fn same_as(&self, other: &Self) -> bool {
        self.cells() == other.cells()
    }
}

/// Axes of the Cartesian grid. An empty axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub n_pairs: Vec<usize>,
    pub n_users: Vec<usize>,
    pub tail_energy: Vec<f64>,
    pub algo: Vec<Algo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub grid: GridSpec,
    /// Defaults to the base seed alone.
    pub seeds: Vec<u64>,
    pub threads: Option<usize>,
    /// Off by default; with it off, reruns are byte-identical.
    pub record_wall_ms: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { base: ExperimentConfig::default(), grid: GridSpec::default(), seeds: Vec::new(), threads: None, record_wall_ms: false }
    }
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(&mut serde_json::Deserializer::from_str(text)).map_err(parse_error)?;
        sweep_cells(&cfg)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Expanded cells in output order: `N_p`, then `N`, tail energy, algorithm,
/// and seed vary slowest to fastest.
pub fn sweep_cells(cfg: &SweepConfig) -> Result<Vec<ExperimentConfig>> {
    let b = &cfg.base;
    b.validate().map_err(|e| prefix("base", e))?;
    let seeds = axis(&cfg.seeds, b.seed);
    let mut cells = Vec::new();
    for &n_pairs in &axis(&cfg.grid.n_pairs, b.data.n_pairs) {
        for &n_users in &axis(&cfg.grid.n_users, b.dims.n_users) {
            for &tail in &axis(&cfg.grid.tail_energy, b.spectrum.tail_energy) {
                for &algo in &axis(&cfg.grid.algo, b.algo) {
                    for &seed in &seeds {
                        let mut c = b.clone();
                        c.data.n_pairs = n_pairs;
                        c.dims.n_users = n_users;
                        c.spectrum.tail_energy = tail;
                        c.algo = algo;
                        c.seed = seed;
                        c.validate().map_err(|e| prefix(&format!("grid[{}]", cells.len()), e))?;
                        cells.push(c);
                    }
                }
            }
        }
    }
    if cfg.threads == Some(0) {
        return Err(Error::validation("threads", "must be at least 1"));
    }
    Ok(cells)
}

fn prefix(at: &str, e: Error) -> Error {
    match e {
        Error::Validation { field, msg } => Error::validation(format!("{at}.{field}"), msg),
        other => other,
    }
}

/// Runs every cell on a bounded pool and appends rows to `out` in cell order
/// as soon as each prefix completes, flushing after every row. A failing cell
/// yields a row whose `error` column holds the message.
pub fn run_sweep(cfg: &SweepConfig, out: &Path) -> Result<Vec<SweepRow>> {
    let cells = sweep_cells(cfg)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cfg.threads {
        pool = pool.num_threads(t);
    }
    let pool = pool.build().map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let mut writer = csv::WriterBuilder::new().from_writer(File::create(out)?);
    writer.write_record(SWEEP_HEADER).map_err(csv_error)?;
    writer.flush()?;
    let timed = cfg.record_wall_ms;
    let (tx, rx) = mpsc::channel::<(usize, SweepRow)>();
    let mut rows = Vec::with_capacity(cells.len());
    let mut failure = None;
    std::thread::scope(|scope| {
        let cells = &cells;
        scope.spawn(move || {
            pool.install(|| {
                cells.par_iter().enumerate().for_each_with(tx, |tx, (i, c)| {
                    let row = match run_cell(c, timed) {
                        Ok(outcome) => outcome.row,
                        Err(e) => SweepRow { error: e.to_string(), ..SweepRow::blank(c, c.seed) },
                    };
                    let _ = tx.send((i, row));
                })
            })
        });
        let mut pending = BTreeMap::new();
        for (i, row) in rx {
            pending.insert(i, row);
            while let Some(row) = pending.remove(&rows.len()) {
                if failure.is_none() {
                    let written = writer.write_record(row.cells()).map_err(csv_error).and_then(|_| Ok(writer.flush()?));
                    failure = written.err();
                }
                rows.push(row);
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    writer.into_inner().map_err(|e| Error::Io(e.into_error()))?.flush()?;
    Ok(rows)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

/// Parses a sweep CSV, requiring the exact header.
pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    let header: Vec<String> = reader.headers().map_err(csv_error)?.iter().map(str::to_owned).collect();
    if header != SWEEP_HEADER {
        return Err(Error::validation("header", format!("expected {}", SWEEP_HEADER.join(","))));
    }
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::validation(format!("row {}", i + 1), e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip_through_csv() {
        let mut row = SweepRow::blank(&ExperimentConfig::default(), 7);
        row.dist_b = 0.1;
        row.nu = 1.0 / 3.0;
        row.ll_final = -1e-300;
        row.error = "bad, \"quoted\"\nline".into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        let mut w = csv::Writer::from_path(&path).unwrap();
        w.write_record(SWEEP_HEADER).unwrap();
        w.write_record(row.cells()).unwrap();
        drop(w);
        let back = read_sweep_csv(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert!(back[0].same_as(&row));
        assert_eq!(back[0].nu.to_bits(), row.nu.to_bits());
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("seed,N,N_p,k,d1,d2,tail,nu,dist_b,dk_ratio,acc_share,acc_local,acc_global,mean_value_gap,zeta,fw_gap_max,ll_final,wall_ms,"));
        assert!(text.contains(",0.1,") && text.contains(",NaN,"));
    }

    #[test]
    fn grid_expands_in_order() {
        let cfg = SweepConfig {
            grid: GridSpec { n_pairs: vec![10, 20], algo: vec![Algo::ShareLeft, Algo::Local], ..GridSpec::default() },
            seeds: vec![1, 2, 3],
            ..SweepConfig::default()
        };
        let cells = sweep_cells(&cfg).unwrap();
        assert_eq!(cells.len(), 12);
        assert_eq!((cells[0].data.n_pairs, cells[0].algo, cells[0].seed), (10, Algo::ShareLeft, 1));
        assert_eq!((cells[5].data.n_pairs, cells[5].algo, cells[5].seed), (10, Algo::Local, 3));
        assert_eq!(cells[6].data.n_pairs, 20);
    }

    #[test]
    fn grid_validation_names_the_cell() {
        let cfg = SweepConfig { grid: GridSpec { n_users: vec![16, 0], ..GridSpec::default() }, ..SweepConfig::default() };
        match sweep_cells(&cfg) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "grid[1].dims.n_users"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
