//! Forward diffusions: Euler–Maruyama ensembles, exit times and the
//! one-dimensional Skorohod reflection.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::io::{self, Csv, Field};
use crate::paths::{SamplePath, TimeGrid};
use crate::rng::NormalStream;
use crate::stats::{self, MeanSe};
use crate::{Error, Result};

/// `f(t, x, out)`.
pub type VecFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// `dX = b(t, X) dt + σ(t, X) dW`, `X_0 = x0`, with `d`-dimensional `X` and
/// `W`. `σ` is written row-major (`d × d`).
#[derive(Clone)]
pub struct SdeSpec {
    pub d: usize,
    pub x0: Vec<f64>,
    pub drift: VecFn,
    pub diffusion: VecFn,
    /// declared bound on `|b|` and on the Frobenius norm of `σ`
    pub bound: Option<f64>,
    /// absolute time of grid point 0 (the coefficients see `offset + t`)
    pub time_offset: f64,
    /// free-form description used to fingerprint exported ensembles
    pub label: String,
}

impl SdeSpec {
    pub fn new(
        x0: Vec<f64>,
        drift: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        diffusion: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        SdeSpec {
            d: x0.len(),
            x0,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            bound: None,
            time_offset: 0.0,
            label: String::from("custom"),
        }
    }

    /// `X = x0 + σ W` with scalar volatility.
    pub fn brownian(x0: Vec<f64>, sigma: f64) -> Self {
        let d = x0.len();
        let mut s = Self::new(
            x0,
            |_, _, o| o.iter_mut().for_each(|v| *v = 0.0),
            move |_, _, o| {
                o.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..d {
                    o[i * d + i] = sigma;
                }
            },
        );
        s.label = format!("brownian(d={d}, sigma={sigma})");
        s
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = Some(bound);
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn with_time_offset(mut self, t0: f64) -> Self {
        self.time_offset = t0;
        self
    }
}

/// Simulated paths: `x` is `paths × grid points × d`, `dw` is
/// `paths × cells × d`.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub d: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub time_offset: f64,
    pub label: String,
    x: Vec<f64>,
    dw: Vec<f64>,
}

impl PathEnsemble {
    /// Assembles an ensemble from raw arrays (e.g. deterministic paths).
    pub fn from_parts(grid: TimeGrid, d: usize, x: Vec<f64>, dw: Vec<f64>) -> Result<Self> {
        let len = grid.len();
        if d == 0 || x.len() % (len * d) != 0 {
            return Err(Error::DimensionMismatch("state array does not match grid".into()));
        }
        let n_paths = x.len() / (len * d);
        if dw.len() != n_paths * grid.cells() * d {
            return Err(Error::DimensionMismatch("increment array does not match grid".into()));
        }
        Ok(PathEnsemble {
            grid,
            d,
            n_paths,
            seed: 0,
            time_offset: 0.0,
            label: "external".into(),
            x,
            dw,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n_paths == 0
    }

    /// Whole path `p` (`grid points × d`).
    pub fn path(&self, p: usize) -> &[f64] {
        let n = self.grid.len() * self.d;
        &self.x[p * n..(p + 1) * n]
    }

    pub fn x(&self, p: usize, i: usize) -> &[f64] {
        let o = (p * self.grid.len() + i) * self.d;
        &self.x[o..o + self.d]
    }

    pub fn dw(&self, p: usize, i: usize) -> &[f64] {
        let o = (p * self.grid.cells() + i) * self.d;
        &self.dw[o..o + self.d]
    }

    pub fn states(&self) -> &[f64] {
        &self.x
    }

    /// Absolute time of grid point `i`.
    pub fn time(&self, i: usize) -> f64 {
        self.time_offset + self.grid.t(i)
    }

    pub fn sample_path(&self, p: usize) -> SamplePath {
        SamplePath::new(self.grid.clone(), self.d, self.path(p).to_vec()).unwrap()
    }

    /// Brownian path `p` (cumulative increments).
    pub fn brownian_path(&self, p: usize) -> SamplePath {
        let mut v = vec![0.0; self.grid.len() * self.d];
        for i in 0..self.grid.cells() {
            for c in 0..self.d {
                v[(i + 1) * self.d + c] = v[i * self.d + c] + self.dw(p, i)[c];
            }
        }
        SamplePath::new(self.grid.clone(), self.d, v).unwrap()
    }

    /// Fingerprint of the generating spec, grid and seed.
    pub fn spec_hash(&self) -> String {
        io::fingerprint(&format!(
            "{}|{:?}|{}|{}|{}",
            self.label,
            self.grid.points(),
            self.seed,
            self.n_paths,
            self.time_offset
        ))
    }

    /// Writes `<stem>.bin` (states, f64 little-endian, `paths × points × d`)
    /// with the sidecar `<stem>.json`.
    pub fn write_binary(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        io::write_f64_le(&dir.join(format!("{stem}.bin")), &self.x)?;
        let side = EnsembleSidecar {
            spec_hash: self.spec_hash(),
            label: self.label.clone(),
            grid: self.grid.points().to_vec(),
            time_offset: self.time_offset,
            seed: self.seed,
            shape: [self.n_paths, self.grid.len(), self.d],
            layout: "row-major: path, time, component".into(),
            format: "f64-le".into(),
            data_file: format!("{stem}.bin"),
        };
        let p = dir.join(format!("{stem}.json"));
        std::fs::write(&p, serde_json::to_string_pretty(&side)?)?;
        Ok(p)
    }

    /// CSV `path,t,x1..xd` of the selected paths.
    pub fn paths_csv(&self, selected: &[usize]) -> Csv {
        let mut h = vec!["path".to_string(), "t".to_string()];
        h.extend((1..=self.d).map(|i| format!("x{i}")));
        let mut csv = Csv::new(&h);
        for &p in selected {
            for i in 0..self.grid.len() {
                let mut row = vec![Field::from(p), Field::Num(self.time(i))];
                row.extend(self.x(p, i).iter().map(|v| Field::Num(*v)));
                csv.row(&row);
            }
        }
        csv
    }
}

/// JSON sidecar of an exported ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSidecar {
    pub spec_hash: String,
    pub label: String,
    pub grid: Vec<f64>,
    pub time_offset: f64,
    pub seed: u64,
    pub shape: [usize; 3],
    pub layout: String,
    pub format: String,
    pub data_file: String,
}

/// Reads the state tensor of an exported ensemble.
pub fn read_ensemble_states(sidecar: &Path) -> Result<(EnsembleSidecar, Vec<f64>)> {
    let side: EnsembleSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
    let dir = sidecar.parent().unwrap_or(Path::new("."));
    let data = io::read_f64_le(&dir.join(&side.data_file))?;
    if data.len() != side.shape.iter().product::<usize>() {
        return Err(Error::Format("ensemble data does not match sidecar shape".into()));
    }
    Ok((side, data))
}

fn simulate_path(spec: &SdeSpec, grid: &TimeGrid, seed: u64, p: usize, x: &mut [f64], dw: &mut [f64]) -> Result<()> {
    let d = spec.d;
    let mut rng = NormalStream::new(seed, p as u64);
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * d];
    x[..d].copy_from_slice(&spec.x0);
    for i in 0..grid.cells() {
        let t = spec.time_offset + grid.t(i);
        let h = grid.dt(i);
        let sq = h.sqrt();
        let (cur, next) = x.split_at_mut((i + 1) * d);
        let xi = &cur[i * d..];
        (spec.drift)(t, xi, &mut b);
        (spec.diffusion)(t, xi, &mut s);
        if let Some(bound) = spec.bound {
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ns = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            let obs = nb.max(ns);
            if obs > bound * (1.0 + 1e-12) {
                return Err(Error::BoundViolated { bound, observed: obs, path: p, step: i });
            }
        }
        let w = &mut dw[i * d..(i + 1) * d];
        for v in w.iter_mut() {
            *v = sq * rng.next();
        }
        for r in 0..d {
            let mut acc = xi[r] + b[r] * h;
            for c in 0..d {
                acc += s[r * d + c] * w[c];
            }
            if !acc.is_finite() {
                return Err(Error::NonFinite { path: p, step: i + 1 });
            }
            next[r] = acc;
        }
    }
    Ok(())
}

/// Euler–Maruyama ensemble. Path `p` draws its increments from stream `p`
/// of `seed`, so the ensemble does not depend on the thread count.
pub fn euler_maruyama(spec: &SdeSpec, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    if spec.x0.len() != spec.d || spec.d == 0 {
        return Err(Error::DimensionMismatch("initial state does not match dimension".into()));
    }
    if n_paths == 0 {
        return Err(Error::arg("need at least one path"));
    }
    let d = spec.d;
    let len = grid.len();
    let cells = grid.cells();
    let mut x = vec![0.0; n_paths * len * d];
    let mut dw = vec![0.0; n_paths * cells * d];
    // pair each path's state block with its increment block
    let mut blocks: Vec<(&mut [f64], &mut [f64])> =
        x.chunks_mut(len * d).zip(dw.chunks_mut(cells * d)).collect();
    crate::par::try_for_each_chunk_mut(&mut blocks, 64, |c, chunk| {
        for (k, (xp, wp)) in chunk.iter_mut().enumerate() {
            simulate_path(spec, grid, seed, c * 64 + k, xp, wp)?;
        }
        Ok(())
    })?;
    drop(blocks);
    Ok(PathEnsemble {
        grid: grid.clone(),
        d,
        n_paths,
        seed,
        time_offset: spec.time_offset,
        label: spec.label.clone(),
        x,
        dw,
    })
}

/// Regenerates path `p` of [`euler_maruyama`] on its own.
pub fn regenerate_path(spec: &SdeSpec, grid: &TimeGrid, seed: u64, p: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut x = vec![0.0; grid.len() * spec.d];
    let mut dw = vec![0.0; grid.cells() * spec.d];
    simulate_path(spec, grid, seed, p, &mut x, &mut dw)?;
    Ok((x, dw))
}

/// Localizing domain `D_n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// `{|x| <= n}` (Euclidean)
    Ball(f64),
    /// `[-n, n]^d`
    Cube(f64),
}

impl Domain {
    pub fn contains(&self, x: &[f64]) -> bool {
        match *self {
            Domain::Ball(n) => x.iter().map(|v| v * v).sum::<f64>().sqrt() <= n,
            Domain::Cube(n) => x.iter().all(|v| v.abs() <= n),
        }
    }

    /// Nearest point of the closed domain.
    pub fn project(&self, x: &[f64], out: &mut [f64]) {
        match *self {
            Domain::Ball(n) => {
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let s = if r > n { n / r } else { 1.0 };
                for (o, v) in out.iter_mut().zip(x) {
                    *o = v * s;
                }
            }
            Domain::Cube(n) => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = v.clamp(-n, n);
                }
            }
        }
    }
}

/// First grid index at which the path (rows of length `d`) leaves the
/// domain, or `None`. Only grid points are inspected.
pub fn exit_index(path: &[f64], d: usize, domain: Domain) -> Option<usize> {
    path.chunks(d).position(|x| !domain.contains(x))
}

/// `T_n = T ∧ inf{t : |X_t| > n}` on the grid, with the exit index if the
/// path leaves the ball.
pub fn exit_time(path: &SamplePath, n: f64) -> (Option<usize>, f64) {
    match exit_index(path.values(), path.dim(), Domain::Ball(n)) {
        Some(i) => (Some(i), path.grid().t(i)),
        None => (None, path.grid().horizon()),
    }
}

/// Monte Carlo estimate of `P{T_n < T}` from an ensemble.
pub fn exit_probability(ens: &PathEnsemble, domain: Domain) -> MeanSe {
    let hits: Vec<f64> = (0..ens.n_paths)
        .map(|p| f64::from(u8::from(exit_index(ens.path(p), ens.d, domain).is_some())))
        .collect();
    stats::mean_se(&hits)
}

/// One-dimensional path reflected into `[a, b]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReflectedPath {
    pub x: Vec<f64>,
    /// total local time `L = L^a + L^b`
    pub local_time: Vec<f64>,
    /// local time at `a` (pushes upward)
    pub lower: Vec<f64>,
    /// local time at `b` (pushes downward)
    pub upper: Vec<f64>,
}

/// Discrete Skorohod map: each step adds the increment and clips to
/// `[a, b]`; the clipped amount is added to the local time of that side.
pub fn reflect_1d(x0: f64, increments: &[f64], a: f64, b: f64) -> Result<ReflectedPath> {
    if !(a < b) {
        return Err(Error::arg(format!("empty reflection interval [{a}, {b}]")));
    }
    if !(a..=b).contains(&x0) {
        return Err(Error::arg(format!("start {x0} outside [{a}, {b}]")));
    }
    let n = increments.len() + 1;
    let mut x = Vec::with_capacity(n);
    let mut lo = Vec::with_capacity(n);
    let mut hi = Vec::with_capacity(n);
    x.push(x0);
    lo.push(0.0);
    hi.push(0.0);
    let (mut cur, mut la, mut lb) = (x0, 0.0, 0.0);
    for (i, dz) in increments.iter().enumerate() {
        if !dz.is_finite() {
            return Err(Error::NonFinite { path: 0, step: i });
        }
        let y = cur + dz;
        if y < a {
            la += a - y;
            cur = a;
        } else if y > b {
            lb += y - b;
            cur = b;
        } else {
            cur = y;
        }
        x.push(cur);
        lo.push(la);
        hi.push(lb);
    }
    let local_time = lo.iter().zip(&hi).map(|(p, q)| p + q).collect();
    Ok(ReflectedPath { x, local_time, lower: lo, upper: hi })
}

/// Reflected Brownian path `p` on `[a, b]` (generator `½Δ`), driven by
/// stream `p` of `seed`.
pub fn reflected_bm_path(grid: &TimeGrid, seed: u64, p: usize, a: f64, b: f64, x0: f64) -> Result<ReflectedPath> {
    let mut rng = NormalStream::new(seed, p as u64);
    let inc: Vec<f64> = (0..grid.cells()).map(|i| grid.dt(i).sqrt() * rng.next()).collect();
    reflect_1d(x0, &inc, a, b)
}
