//! Shapley attributions over rectangular regions of a flow observation, and
//! the attention-map pipeline: |phi| summed over outputs, broadcast to
//! pixels, Gaussian-smoothed, then averaged across agents.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::env::{EnvError, NavEnv};
use crate::flow::FlowImage;
use crate::net::{AgentCheckpoint, NetError};
use crate::ppo::agent_input;
use crate::world::{HitKind, RayHit, Vec2};

/// Largest feature count for which all coalitions are enumerated.
pub const MAX_EXHAUSTIVE: usize = 20;

pub const DEFAULT_REGION: usize = 8;
pub const DEFAULT_SIGMA: f64 = 4.0;
pub const DEFAULT_SAMPLES: usize = 4096;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0} features is too many for exhaustive enumeration (max {MAX_EXHAUSTIVE})")]
    TooManyFeatures(usize),
    #[error("too few samples: {got} < {need} for {features} features")]
    TooFewSamples { got: usize, need: usize, features: usize },
    #[error("singular regression system; features never separated from the last one: {0:?}")]
    Singular(Vec<usize>),
    #[error("inconsistent partitions: {0}")]
    Partition(String),
    #[error("need at least one agent")]
    NoAgents,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Maps each pixel to a rectangular region id, row-major over regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeaturePartition {
    pub width: usize,
    pub height: usize,
    pub region_w: usize,
    pub region_h: usize,
    pub cols: usize,
    pub rows: usize,
    ids: Vec<usize>,
}

impl FeaturePartition {
    pub fn new(width: usize, height: usize, region_w: usize, region_h: usize) -> Result<Self, ExplainError> {
        if width == 0 || height == 0 || region_w == 0 || region_h == 0 {
            return Err(ExplainError::Shape("empty image or region".into()));
        }
        let cols = width.div_ceil(region_w);
        let rows = height.div_ceil(region_h);
        let mut ids = vec![0; width * height];
        for j in 0..height {
            for i in 0..width {
                ids[j * width + i] = (j / region_h) * cols + i / region_w;
            }
        }
        Ok(Self {
            width,
            height,
            region_w,
            region_h,
            cols,
            rows,
            ids,
        })
    }

    pub fn square(width: usize, height: usize, region: usize) -> Result<Self, ExplainError> {
        Self::new(width, height, region, region)
    }

    pub fn count(&self) -> usize {
        self.cols * self.rows
    }

    pub fn region_of(&self, i: usize, j: usize) -> usize {
        self.ids[j * self.width + i]
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    fn check(&self, img: &FlowImage) -> Result<(), ExplainError> {
        if img.width != self.width || img.height != self.height {
            return Err(ExplainError::Shape(format!(
                "image {}x{} vs partition {}x{}",
                img.width, img.height, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Region values copied to every pixel of the region.
    pub fn broadcast(&self, region_values: &[f64]) -> Vec<f64> {
        self.ids.iter().map(|&r| region_values[r]).collect()
    }
}

/// Present regions come from `obs`, absent ones from `baseline`.
pub fn mask_observation(
    obs: &FlowImage,
    coalition: &[bool],
    baseline: &FlowImage,
    partition: &FeaturePartition,
) -> Result<FlowImage, ExplainError> {
    partition.check(obs)?;
    partition.check(baseline)?;
    if coalition.len() != partition.count() {
        return Err(ExplainError::Shape(format!(
            "coalition has {} entries, partition has {} regions",
            coalition.len(),
            partition.count()
        )));
    }
    Ok(masked(obs, coalition, baseline, partition))
}

fn masked(obs: &FlowImage, coalition: &[bool], baseline: &FlowImage, partition: &FeaturePartition) -> FlowImage {
    let mut out = baseline.clone();
    for (k, &r) in partition.ids.iter().enumerate() {
        if coalition[r] {
            out.magnitude[k] = obs.magnitude[k];
            out.dir_x[k] = obs.dir_x[k];
            out.dir_y[k] = obs.dir_y[k];
        }
    }
    out
}

fn mask_to_coalition(mask: u64, m: usize) -> Vec<bool> {
    (0..m).map(|j| mask >> j & 1 == 1).collect()
}

/// Attribution of `f(x) - f(baseline)` to each region, for each output.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapResult {
    /// `phi[j][k]`: region `j`, output `k`.
    pub phi: Vec<Vec<f64>>,
    pub base_value: Vec<f64>,
    pub full_value: Vec<f64>,
}

impl ShapResult {
    pub fn features(&self) -> usize {
        self.phi.len()
    }

    pub fn outputs(&self) -> usize {
        self.base_value.len()
    }

    /// Largest `|sum_j phi_jk - (f(x)_k - base_k)|` over outputs.
    pub fn efficiency_gap(&self) -> f64 {
        (0..self.outputs())
            .map(|k| {
                let s: f64 = self.phi.iter().map(|p| p[k]).sum();
                (s - (self.full_value[k] - self.base_value[k])).abs()
            })
            .fold(0.0, f64::max)
    }

    /// `sum_k |phi_jk|` per region.
    pub fn abs_sum(&self) -> Vec<f64> {
        self.phi.iter().map(|p| p.iter().map(|v| v.abs()).sum()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapMode {
    /// Enumerate when the region count allows it, otherwise sample.
    Auto,
    Exhaustive,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelShapOptions {
    pub n_samples: usize,
    pub mode: ShapMode,
}

impl Default for KernelShapOptions {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_SAMPLES,
            mode: ShapMode::Auto,
        }
    }
}

/// Shapley kernel weight of a coalition of size `s` out of `m`.
pub fn shapley_kernel(m: usize, s: usize) -> f64 {
    (m as f64 - 1.0) / (binomial(m, s) * s as f64 * (m - s) as f64)
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Weighted least squares over coalitions with the empty and full
/// coalitions imposed as constraints. The last region is eliminated with the
/// efficiency constraint, leaving an `(M-1)`-dimensional normal system.
struct Regression {
    m: usize,
    k: usize,
    ata: DMatrix<f64>,
    atb: Vec<DVector<f64>>,
}

impl Regression {
    fn new(m: usize, k: usize) -> Self {
        Self {
            m,
            k,
            ata: DMatrix::zeros(m - 1, m - 1),
            atb: vec![DVector::zeros(m - 1); k],
        }
    }

    fn add(&mut self, z: &[bool], w: f64, fz: &[f64], base: &[f64], delta: &[f64]) {
        let last = z[self.m - 1] as u8 as f64;
        let x: Vec<f64> = (0..self.m - 1).map(|j| z[j] as u8 as f64 - last).collect();
        for a in 0..self.m - 1 {
            if x[a] == 0.0 {
                continue;
            }
            for b in 0..self.m - 1 {
                self.ata[(a, b)] += w * x[a] * x[b];
            }
        }
        for k in 0..self.k {
            let y = fz[k] - base[k] - last * delta[k];
            for a in 0..self.m - 1 {
                self.atb[k][a] += w * x[a] * y;
            }
        }
    }

    fn solve(self, delta: &[f64]) -> Result<Vec<Vec<f64>>, ExplainError> {
        let m = self.m;
        let degenerate = || (0..m - 1).filter(|&j| self.ata[(j, j)] <= 0.0).collect::<Vec<_>>();
        let chol = self.ata.clone().cholesky();
        let lu = self.ata.clone().lu();
        let mut phi = vec![vec![0.0; self.k]; m];
        for k in 0..self.k {
            let sol = match &chol {
                Some(c) => c.solve(&self.atb[k]),
                None => lu
                    .solve(&self.atb[k])
                    .ok_or_else(|| ExplainError::Singular(degenerate()))?,
            };
            if sol.iter().any(|v| !v.is_finite()) {
                return Err(ExplainError::Singular(degenerate()));
            }
            let mut rest = delta[k];
            for j in 0..m - 1 {
                phi[j][k] = sol[j];
                rest -= sol[j];
            }
            phi[m - 1][k] = rest;
        }
        Ok(phi)
    }
}

/// KernelSHAP estimate of the Shapley values of `model` at `obs`.
pub fn kernel_shap<F, R>(
    model: &F,
    obs: &FlowImage,
    baseline: &FlowImage,
    partition: &FeaturePartition,
    opts: &KernelShapOptions,
    rng: &mut R,
) -> Result<ShapResult, ExplainError>
where
    F: Fn(&FlowImage) -> Vec<f64> + Sync,
    R: Rng + ?Sized,
{
    partition.check(obs)?;
    partition.check(baseline)?;
    let m = partition.count();
    let base = model(baseline);
    let full = model(obs);
    let k = base.len();
    let delta: Vec<f64> = (0..k).map(|i| full[i] - base[i]).collect();
    if m == 1 {
        return Ok(ShapResult {
            phi: vec![delta],
            base_value: base,
            full_value: full,
        });
    }

    let exhaustive = match opts.mode {
        ShapMode::Exhaustive => true,
        ShapMode::Sampled => false,
        ShapMode::Auto => m <= MAX_EXHAUSTIVE,
    };
    if exhaustive && m > MAX_EXHAUSTIVE {
        return Err(ExplainError::TooManyFeatures(m));
    }

    let mut reg = Regression::new(m, k);
    if exhaustive {
        let full_mask = (1u64 << m) - 1;
        let masks: Vec<u64> = (1..full_mask).collect();
        let values: Vec<Vec<f64>> = masks
            .par_iter()
            .map(|&mask| model(&masked(obs, &mask_to_coalition(mask, m), baseline, partition)))
            .collect();
        for (mask, fz) in masks.iter().zip(&values) {
            let z = mask_to_coalition(*mask, m);
            let s = mask.count_ones() as usize;
            reg.add(&z, shapley_kernel(m, s), fz, &base, &delta);
        }
    } else {
        let need = 2 * m + 2;
        if opts.n_samples < need {
            return Err(ExplainError::TooFewSamples {
                got: opts.n_samples,
                need,
                features: m,
            });
        }
        // Coalition sizes drawn in proportion to their total kernel mass;
        // each draw is paired with its complement.
        let size_w: Vec<f64> = (1..m).map(|s| (m as f64 - 1.0) / (s as f64 * (m - s) as f64)).collect();
        let total: f64 = size_w.iter().sum();
        let mut coalitions = Vec::with_capacity(opts.n_samples);
        while coalitions.len() + 2 <= opts.n_samples {
            let mut u = rng.random::<f64>() * total;
            let mut s = m - 1;
            for (i, w) in size_w.iter().enumerate() {
                if u < *w {
                    s = i + 1;
                    break;
                }
                u -= w;
            }
            let mut z = vec![false; m];
            for j in index::sample(rng, m, s) {
                z[j] = true;
            }
            let comp: Vec<bool> = z.iter().map(|b| !b).collect();
            coalitions.push(z);
            coalitions.push(comp);
        }
        let values: Vec<Vec<f64>> = coalitions
            .par_iter()
            .map(|z| model(&masked(obs, z, baseline, partition)))
            .collect();
        for (z, fz) in coalitions.iter().zip(&values) {
            reg.add(z, 1.0, fz, &base, &delta);
        }
    }
    Ok(ShapResult {
        phi: reg.solve(&delta)?,
        base_value: base,
        full_value: full,
    })
}

/// Classic Shapley values by enumerating every coalition.
pub fn exact_shapley<F>(
    model: &F,
    obs: &FlowImage,
    baseline: &FlowImage,
    partition: &FeaturePartition,
) -> Result<ShapResult, ExplainError>
where
    F: Fn(&FlowImage) -> Vec<f64> + Sync,
{
    partition.check(obs)?;
    partition.check(baseline)?;
    let m = partition.count();
    if m > MAX_EXHAUSTIVE {
        return Err(ExplainError::TooManyFeatures(m));
    }
    let n = 1usize << m;
    let table: Vec<Vec<f64>> = (0..n as u64)
        .into_par_iter()
        .map(|mask| model(&masked(obs, &mask_to_coalition(mask, m), baseline, partition)))
        .collect();
    let k = table[0].len();
    // |S|! (M - |S| - 1)! / M!
    let fact: Vec<f64> = (0..=m).scan(1.0, |acc, i| {
        if i > 0 {
            *acc *= i as f64;
        }
        Some(*acc)
    }).collect();
    let weight: Vec<f64> = (0..m).map(|s| fact[s] * fact[m - s - 1] / fact[m]).collect();
    let mut phi = vec![vec![0.0; k]; m];
    for (j, pj) in phi.iter_mut().enumerate() {
        let bit = 1usize << j;
        for s in 0..n {
            if s & bit != 0 {
                continue;
            }
            let w = weight[s.count_ones() as usize];
            for out in 0..k {
                pj[out] += w * (table[s | bit][out] - table[s][out]);
            }
        }
    }
    Ok(ShapResult {
        phi,
        base_value: table[0].clone(),
        full_value: table[n - 1].clone(),
    })
}

/// Separable Gaussian blur, kernel truncated at `ceil(3 sigma)` and
/// renormalized where it overhangs the border.
pub fn gaussian_smooth(grid: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    assert_eq!(grid.len(), width * height);
    assert!(sigma >= 0.0, "sigma must be non-negative");
    if sigma == 0.0 {
        return grid.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        for j in 0..height as isize {
            for i in 0..width as isize {
                let (mut acc, mut norm) = (0.0, 0.0);
                for d in -r..=r {
                    let (x, y) = if horizontal { (i + d, j) } else { (i, j + d) };
                    if x < 0 || y < 0 || x >= width as isize || y >= height as isize {
                        continue;
                    }
                    let w = kernel[(d + r) as usize];
                    acc += w * src[y as usize * width + x as usize];
                    norm += w;
                }
                dst[j as usize * width + i as usize] = acc / norm;
            }
        }
        dst
    };
    pass(&pass(grid, true), false)
}

/// Per-pixel non-negative attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub sigma: f64,
    pub agents: usize,
    pub timestep: usize,
}

impl AttentionMap {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

/// One agent's smoothed map: `sum_k |phi|` broadcast to pixels, blurred.
pub fn agent_attention(result: &ShapResult, partition: &FeaturePartition, sigma: f64) -> Result<Vec<f64>, ExplainError> {
    if result.features() != partition.count() {
        return Err(ExplainError::Partition(format!(
            "result has {} regions, partition has {}",
            result.features(),
            partition.count()
        )));
    }
    let px = partition.broadcast(&result.abs_sum());
    Ok(gaussian_smooth(&px, partition.width, partition.height, sigma))
}

/// Absolute values, smoothing, then the pixelwise mean over agents.
pub fn attention_pipeline(
    per_agent: &[ShapResult],
    partition: &FeaturePartition,
    sigma: f64,
    timestep: usize,
) -> Result<AttentionMap, ExplainError> {
    if per_agent.is_empty() {
        return Err(ExplainError::NoAgents);
    }
    let n = partition.width * partition.height;
    let mut acc = vec![0.0; n];
    for r in per_agent {
        for (a, v) in acc.iter_mut().zip(agent_attention(r, partition, sigma)?) {
            *a += v;
        }
    }
    let count = per_agent.len() as f64;
    acc.iter_mut().for_each(|a| *a /= count);
    Ok(AttentionMap {
        width: partition.width,
        height: partition.height,
        values: acc,
        sigma,
        agents: per_agent.len(),
        timestep,
    })
}

/// The explained model: policy mean as a function of the raw observation.
pub fn policy_mean_model(agent: &AgentCheckpoint) -> impl Fn(&FlowImage) -> Vec<f64> + Sync + '_ {
    move |img: &FlowImage| {
        let x: Vec<f64> = agent_input(agent, img).into_iter().map(f64::from).collect();
        agent.policy.net.forward(&x).expect("shape checked before explaining")
    }
}

#[derive(Debug, Clone)]
pub struct ExplainedStep {
    pub timestep: usize,
    pub position: Vec2,
    pub observation: FlowImage,
    pub column_hits: Vec<RayHit>,
    pub shap: Vec<ShapResult>,
    /// Smoothed map of each agent alone (`agents == 1`).
    pub per_agent: Vec<AttentionMap>,
    pub averaged: AttentionMap,
}

impl ExplainedStep {
    /// Distance to the closest obstacle seen in any column.
    pub fn nearest_obstacle(&self) -> Option<f64> {
        nearest_obstacle(&self.column_hits)
    }
}

fn nearest_obstacle(hits: &[RayHit]) -> Option<f64> {
    hits.iter()
        .filter(|h| h.kind == HitKind::Obstacle)
        .map(|h| h.distance)
        .min_by(f64::total_cmp)
}

#[derive(Debug, Clone)]
pub struct ExplainOptions {
    pub shap: KernelShapOptions,
    pub region_w: usize,
    pub region_h: usize,
    pub sigma: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub tunnel: Option<u32>,
    /// Only explain timesteps with an obstacle visible within this distance.
    pub near_obstacle: Option<f64>,
    /// Explain every `stride`-th eligible timestep.
    pub stride: usize,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        Self {
            shap: KernelShapOptions::default(),
            region_w: DEFAULT_REGION,
            region_h: DEFAULT_REGION,
            sigma: DEFAULT_SIGMA,
            max_steps: 200,
            seed: 0,
            tunnel: None,
            near_obstacle: None,
            stride: 1,
        }
    }
}

/// Roll out `agents[designated]` with its mean action and explain the
/// observations it acted on (all of them, or those selected by
/// `near_obstacle` and `stride`) with every agent's policy mean.
pub fn collect_explanations(
    agents: &[AgentCheckpoint],
    designated: usize,
    env: &mut NavEnv,
    opts: &ExplainOptions,
) -> Result<Vec<ExplainedStep>, ExplainError> {
    let first = agents.first().ok_or(ExplainError::NoAgents)?;
    if designated >= agents.len() {
        return Err(ExplainError::Shape(format!(
            "designated agent {designated} out of range for {} agents",
            agents.len()
        )));
    }
    for a in agents {
        if a.arch() != first.arch() {
            return Err(ExplainError::Partition(format!(
                "architecture mismatch: {:?} vs {:?}",
                a.arch(),
                first.arch()
            )));
        }
    }
    let cam = *env.camera();
    let arch = first.arch();
    if arch.width != cam.width_px || arch.height != cam.height_px {
        return Err(ExplainError::Shape(format!(
            "agents expect {}x{} images, camera renders {}x{}",
            arch.width, arch.height, cam.width_px, cam.height_px
        )));
    }
    let partition = FeaturePartition::new(cam.width_px, cam.height_px, opts.region_w, opts.region_h)?;
    let baseline = FlowImage::zeros(cam.width_px, cam.height_px);
    let pilot = &agents[designated];

    if opts.stride == 0 {
        return Err(ExplainError::Shape("stride must be positive".into()));
    }
    let (mut obs, mut state) = env.reset(opts.tunnel, opts.seed)?;
    let mut out = Vec::new();
    let mut eligible = 0usize;
    for t in 0..opts.max_steps {
        let hits = env.last_hits().to_vec();
        let near = match opts.near_obstacle {
            Some(limit) => nearest_obstacle(&hits).is_some_and(|d| d <= limit),
            None => true,
        };
        let explain_now = near && eligible % opts.stride == 0;
        eligible += near as usize;
        let x: Vec<f64> = agent_input(pilot, &obs).into_iter().map(f64::from).collect();
        let action = pilot.policy.forward(&x)?.mode();
        if !explain_now {
            let r = env.step(action)?;
            obs = r.observation;
            state = *env.state().expect("stepped");
            if r.terminated || r.truncated {
                break;
            }
            continue;
        }
        let mut shap = Vec::with_capacity(agents.len());
        for (a, agent) in agents.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ ((t as u64) << 20) ^ a as u64);
            let model = policy_mean_model(agent);
            shap.push(kernel_shap(&model, &obs, &baseline, &partition, &opts.shap, &mut rng)?);
        }
        let per_agent = shap
            .iter()
            .map(|r| attention_pipeline(std::slice::from_ref(r), &partition, opts.sigma, t))
            .collect::<Result<Vec<_>, _>>()?;
        let averaged = attention_pipeline(&shap, &partition, opts.sigma, t)?;
        out.push(ExplainedStep {
            timestep: t,
            position: state.position,
            observation: obs,
            column_hits: hits,
            shap,
            per_agent,
            averaged,
        });
        let r = env.step(action)?;
        obs = r.observation;
        state = *env.state().expect("stepped");
        if r.terminated || r.truncated {
            break;
        }
    }
    Ok(out)
}

/// Columns adjacent to an obstacle silhouette edge: wherever the surface
/// changes between an obstacle and anything else (or another obstacle).
pub fn obstacle_edge_columns(hits: &[RayHit]) -> Vec<usize> {
    let mut cols = Vec::new();
    for i in 0..hits.len().saturating_sub(1) {
        let (a, b) = (&hits[i], &hits[i + 1]);
        let any_obstacle = a.kind == HitKind::Obstacle || b.kind == HitKind::Obstacle;
        if any_obstacle && a.obstacle != b.obstacle {
            cols.push(i);
            cols.push(i + 1);
        }
    }
    cols.dedup();
    cols
}

/// Pixels whose column lies within `radius_px` columns of an edge column.
pub fn near_edge_mask(edges: &[usize], width: usize, height: usize, radius_px: usize) -> Vec<bool> {
    let near_col: Vec<bool> = (0..width)
        .map(|i| edges.iter().any(|&e| i.abs_diff(e) < radius_px))
        .collect();
    (0..width * height).map(|k| near_col[k % width]).collect()
}

/// `(mean over masked pixels, mean over the rest)`; `None` if either side is empty.
pub fn masked_means(values: &[f64], mask: &[bool]) -> Option<(f64, f64)> {
    let (mut a, mut na, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (v, m) in values.iter().zip(mask) {
        if *m {
            a += v;
            na += 1;
        } else {
            b += v;
            nb += 1;
        }
    }
    (na > 0 && nb > 0).then(|| (a / na as f64, b / nb as f64))
}
