//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use optiflow::net::{AgentCheckpoint, Arch, Network};
use optiflow::ppo::{self, minibatch_gradient, PreparedBatch, RolloutBuffer, StepEnd, TrainConfig, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Same layer types as the production network, small enough for full
/// finite-difference sweeps.
pub fn small_arch() -> Arch {
    Arch {
        in_channels: 3,
        height: 10,
        width: 12,
        conv_channels: 2,
        kernel: 4,
        stride: 2,
        hidden: 5,
    }
}

/// Straightforward nested loops over the documented parameter layout:
/// conv weights `[oc][ic][ky][kx]`, conv biases, dense weights
/// `[h][oc][oy][ox]`, dense biases, head weights `[o][h]`, head biases.
pub fn naive_forward(p: &[f64], a: &Arch, outputs: usize, x: &[f64]) -> Vec<f64> {
    let oh = (a.height - a.kernel) / a.stride + 1;
    let ow = (a.width - a.kernel) / a.stride + 1;
    let k = a.kernel;
    let n_cw = a.conv_channels * a.in_channels * k * k;
    let flat = a.conv_channels * oh * ow;
    let (cw, cb) = (&p[..n_cw], &p[n_cw..n_cw + a.conv_channels]);
    let mut off = n_cw + a.conv_channels;
    let hw = &p[off..off + a.hidden * flat];
    off += a.hidden * flat;
    let hb = &p[off..off + a.hidden];
    off += a.hidden;
    let ow_ = &p[off..off + outputs * a.hidden];
    off += outputs * a.hidden;
    let ob = &p[off..off + outputs];
    assert_eq!(off + outputs, p.len());

    let mut conv = vec![0.0; flat];
    for oc in 0..a.conv_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut z = cb[oc];
                for ic in 0..a.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let w = cw[((oc * a.in_channels + ic) * k + ky) * k + kx];
                            let yy = oy * a.stride + ky;
                            let xx = ox * a.stride + kx;
                            z += w * x[(ic * a.height + yy) * a.width + xx];
                        }
                    }
                }
                conv[(oc * oh + oy) * ow + ox] = if z > 0.0 { z } else { 0.0 };
            }
        }
    }
    let mut hidden = vec![0.0; a.hidden];
    for h in 0..a.hidden {
        let mut z = hb[h];
        for f in 0..flat {
            z += hw[h * flat + f] * conv[f];
        }
        hidden[h] = z.tanh();
    }
    (0..outputs)
        .map(|o| ob[o] + (0..a.hidden).map(|h| ow_[o * a.hidden + h] * hidden[h]).sum::<f64>())
        .collect()
}

/// Relative error with a floor so exact zeros compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences of `upstream . net(x)` against the analytic gradient,
/// over every parameter. Returns the worst relative error.
pub fn network_fd_error(net: &Network, x: &[f64], upstream: &[f64], h: f64) -> f64 {
    let cache = net.forward_cached(x).unwrap();
    let mut g = vec![0.0; net.len()];
    net.backward(&cache, upstream, &mut g).unwrap();
    let f = |n: &Network| -> f64 { n.forward(x).unwrap().iter().zip(upstream).map(|(o, u)| o * u).sum() };
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in 0..net.len() {
        let p0 = probe.params[i];
        probe.params[i] = p0 + h;
        let up = f(&probe);
        probe.params[i] = p0 - h;
        let dn = f(&probe);
        probe.params[i] = p0;
        worst = worst.max(rel_err(g[i], (up - dn) / (2.0 * h)));
    }
    worst
}

/// Random buffer whose stored log-probabilities sit near the current policy,
/// so ratios fall on both sides of the clipping range.
pub fn random_buffer(agent: &AgentCheckpoint, n: usize, seed: u64) -> RolloutBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = agent.arch().input_len();
    let mut buf = RolloutBuffer::with_capacity(n);
    for _ in 0..n {
        let input: Vec<f32> = (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let x: Vec<f64> = input.iter().map(|v| *v as f64).collect();
        let dist = agent.policy.forward(&x).unwrap();
        let action = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
        let log_prob = dist.log_prob(action) + rng.random_range(-0.4..0.4);
        let end = match rng.random_range(0..10) {
            0 => StepEnd::Terminated,
            1 => StepEnd::Truncated,
            _ => StepEnd::Continue,
        };
        buf.push(Transition {
            input,
            action,
            log_prob,
            reward: rng.random_range(-1.0..1.0),
            value: rng.random_range(-1.0..1.0),
            end,
            next_value: rng.random_range(-1.0..1.0),
        });
    }
    buf
}

/// Central differences of the total PPO loss against `minibatch_gradient`,
/// over every policy, log-std and value parameter.
pub fn ppo_fd_error(agent: &AgentCheckpoint, buffer: &RolloutBuffer, cfg: &TrainConfig, h: f64) -> f64 {
    let batch = PreparedBatch::new(buffer, cfg.gamma, cfg.gae_lambda).unwrap();
    let idx: Vec<usize> = (0..buffer.len()).collect();
    let (g, _) = minibatch_gradient(agent, &batch, &idx, cfg).unwrap();
    let loss = |a: &AgentCheckpoint| minibatch_gradient(a, &batch, &idx, cfg).unwrap().1.total;
    let mut probe = agent.clone();
    let mut worst: f64 = 0.0;
    let mut check = |probe: &mut AgentCheckpoint, get: &dyn Fn(&mut AgentCheckpoint) -> &mut f64, analytic: f64| {
        let p0 = *get(probe);
        *get(probe) = p0 + h;
        let up = loss(probe);
        *get(probe) = p0 - h;
        let dn = loss(probe);
        *get(probe) = p0;
        worst = worst.max(rel_err(analytic, (up - dn) / (2.0 * h)));
    };
    for i in 0..agent.policy.net.len() {
        check(&mut probe, &|a| &mut a.policy.net.params[i], g.policy[i]);
    }
    for k in 0..2 {
        check(&mut probe, &|a| &mut a.policy.log_std[k], g.log_std[k]);
    }
    for i in 0..agent.value.net.len() {
        check(&mut probe, &|a| &mut a.value.net.params[i], g.value[i]);
    }
    worst
}

/// Small agent with random (not orthogonal) weights, so every layer is active.
pub fn random_small_agent(seed: u64) -> AgentCheckpoint {
    let mut agent = ppo::init_agent(small_arch(), 1.0, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    for p in agent.policy.net.params.iter_mut().chain(agent.value.net.params.iter_mut()) {
        *p = rng.random_range(-0.5..0.5);
    }
    agent.policy.log_std = [rng.random_range(-1.0..0.0), rng.random_range(-1.0..0.0)];
    agent
}

/// `A_t = sum_l (gamma lambda)^l delta_{t+l}`, summed explicitly up to the
/// end of the episode segment containing `t`.
pub fn gae_oracle(buffer: &RolloutBuffer, gamma: f64, lambda: f64) -> Vec<f64> {
    let s = &buffer.steps;
    let n = s.len();
    let delta = |t: usize| -> f64 {
        let next = match s[t].end {
            StepEnd::Terminated => 0.0,
            StepEnd::Truncated => s[t].next_value,
            StepEnd::Continue if t + 1 == n => s[t].next_value,
            StepEnd::Continue => s[t + 1].value,
        };
        s[t].reward + gamma * next - s[t].value
    };
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            let mut w = 1.0;
            for u in t..n {
                total += w * delta(u);
                if s[u].end != StepEnd::Continue {
                    break;
                }
                w *= gamma * lambda;
            }
            total
        })
        .collect()
}

use optiflow::explain::FeaturePartition;
use optiflow::flow::FlowImage;

/// A cooperative game over `m` image regions: a random polynomial of the
/// per-region mean magnitudes with pairwise interactions and a saturating
/// term, with two outputs.
pub struct RandomGame {
    pub partition: FeaturePartition,
    pub obs: FlowImage,
    pub baseline: FlowImage,
    linear: Vec<[f64; 2]>,
    pairs: Vec<(usize, usize, [f64; 2])>,
    squash: Vec<f64>,
    /// Regions the model never reads.
    pub ignored: Vec<usize>,
}

impl RandomGame {
    /// Regions are 2x2 blocks in a `2m x 2` image.
    pub fn new(m: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let partition = FeaturePartition::new(2 * m, 2, 2, 2).unwrap();
        let mut obs = FlowImage::zeros(2 * m, 2);
        let mut baseline = FlowImage::zeros(2 * m, 2);
        for k in 0..obs.pixels() {
            obs.magnitude[k] = rng.random_range(0.0..3.0);
            obs.dir_x[k] = rng.random_range(-1.0..1.0);
            obs.dir_y[k] = rng.random_range(-1.0..1.0);
            baseline.magnitude[k] = rng.random_range(0.0..0.5);
        }
        let ignored: Vec<usize> = (0..m).filter(|_| m > 2 && rng.random_bool(0.2)).collect();
        let used = |j: usize| !ignored.contains(&j);
        let linear = (0..m)
            .map(|j| if used(j) { [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)] } else { [0.0; 2] })
            .collect();
        let mut pairs = Vec::new();
        for a in 0..m {
            for b in a + 1..m {
                if used(a) && used(b) && rng.random_bool(0.4) {
                    pairs.push((a, b, [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]));
                }
            }
        }
        let squash = (0..m).map(|j| if used(j) { rng.random_range(-0.7..0.7) } else { 0.0 }).collect();
        Self { partition, obs, baseline, linear, pairs, squash, ignored }
    }

    pub fn m(&self) -> usize {
        self.partition.count()
    }

    fn region_means(&self, img: &FlowImage) -> Vec<f64> {
        let m = self.m();
        let mut s = vec![0.0; m];
        for j in 0..img.height {
            for i in 0..img.width {
                s[self.partition.region_of(i, j)] += img.magnitude[j * img.width + i] / 4.0;
            }
        }
        s
    }

    pub fn eval(&self, img: &FlowImage) -> Vec<f64> {
        let s = self.region_means(img);
        let mut out = [0.0; 2];
        for (j, c) in self.linear.iter().enumerate() {
            out[0] += c[0] * s[j];
            out[1] += c[1] * s[j];
        }
        for (a, b, c) in &self.pairs {
            out[0] += c[0] * s[*a] * s[*b];
            out[1] += c[1] * s[*a] * s[*b];
        }
        let z: f64 = self.squash.iter().zip(&s).map(|(w, v)| w * v).sum();
        out[1] += 2.0 * z.tanh();
        out.to_vec()
    }

    /// Value of every coalition, indexed by bit mask.
    pub fn coalition_values(&self) -> Vec<Vec<f64>> {
        let m = self.m();
        (0..1u32 << m)
            .map(|mask| {
                let mut img = self.baseline.clone();
                for k in 0..img.pixels() {
                    let (i, j) = (k % img.width, k / img.width);
                    if mask >> self.partition.region_of(i, j) & 1 == 1 {
                        img.magnitude[k] = self.obs.magnitude[k];
                        img.dir_x[k] = self.obs.dir_x[k];
                        img.dir_y[k] = self.obs.dir_y[k];
                    }
                }
                self.eval(&img)
            })
            .collect()
    }
}

/// Shapley values from the subset formula over a table of coalition values.
pub fn shapley_oracle(values: &[Vec<f64>], m: usize) -> Vec<Vec<f64>> {
    let fact = |n: usize| (1..=n).map(|x| x as f64).product::<f64>();
    let outputs = values[0].len();
    let mut phi = vec![vec![0.0; outputs]; m];
    for (j, pj) in phi.iter_mut().enumerate() {
        for mask in 0..1usize << m {
            if mask >> j & 1 == 1 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let w = fact(s) * fact(m - s - 1) / fact(m);
            for k in 0..outputs {
                pj[k] += w * (values[mask | 1 << j][k] - values[mask][k]);
            }
        }
    }
    phi
}

use optiflow::env::{Action, NavEnv};

pub struct Played {
    pub rewards: Vec<f64>,
    pub xs: Vec<f64>,
    pub crashed: bool,
    pub last_terminated: bool,
}

/// Play uniformly random actions (forward-biased so episodes also reach the
/// exit) until the episode ends.
pub fn play_random(env: &mut NavEnv, tunnel: Option<u32>, seed: u64) -> Played {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, s0) = env.reset(tunnel, seed).unwrap();
    let bias = rng.random_range(-1.0..3.0);
    let lateral = rng.random_range(0.0..3.0);
    let mut out = Played { rewards: vec![], xs: vec![s0.position.x], crashed: false, last_terminated: false };
    loop {
        let a = Action::new(rng.random_range(-3.0..3.0) + bias, rng.random_range(-lateral..=lateral));
        let r = env.step(a).unwrap();
        out.rewards.push(r.reward);
        out.xs.push(r.info.position.x);
        if r.terminated || r.truncated {
            out.crashed = r.info.crashed;
            out.last_terminated = r.terminated;
            return out;
        }
    }
}
