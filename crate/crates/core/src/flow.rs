//! Flow matching on tokenizer latents with the linear interpolant
//! `z_t = (1 - t) z + t eps`, an MLP velocity model, and an Euler sampler that
//! integrates from noise at `t = 1` to data at `t = 0`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{derive_seed, rng_from_seed, SeededRng, Tensor};
use crate::trainer::{adamw_update, Checkpoint, OptimState, Schedule};

const TAG_INIT: u64 = 0x3001;
const TAG_BATCH: u64 = 0x3002;
const TAG_SAMPLE: u64 = 0x3003;

/// `(1 - t) z + t eps`.
pub fn interpolate(z: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::config(
            "interpolate",
            format!("t = {t} outside [0, 1]"),
        ));
    }
    if z.shape() != eps.shape() {
        return Err(Error::shape(
            "interpolate",
            format!("{:?} vs {:?}", z.shape(), eps.shape()),
        ));
    }
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &e)| (1.0 - t) * a + t * e)
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

/// Per-dimension affine standardization of flattened latents.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Statistics over the rows of `latents` flattened to `[M, dim]`.
    pub fn fit(latents: &Tensor) -> Result<Self> {
        let m = latents.shape().first().copied().unwrap_or(0);
        if m < 2 {
            return Err(Error::shape(
                "Standardizer::fit",
                "need at least two latents",
            ));
        }
        let dim = latents.numel() / m;
        let x = latents.data();
        let mut mean = vec![0.0; dim];
        for row in x.chunks_exact(dim) {
            for (a, v) in mean.iter_mut().zip(row) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= m as f64);
        let mut var = vec![0.0; dim];
        for row in x.chunks_exact(dim) {
            for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *a += (v - mu) * (v - mu);
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / m as f64).sqrt().max(1e-8))
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, t: &Tensor, op: &'static str) -> Result<usize> {
        let m = t.shape().first().copied().unwrap_or(0);
        if m == 0 || t.numel() != m * self.dim() {
            return Err(Error::shape(
                op,
                format!("{:?} does not flatten to rows of {}", t.shape(), self.dim()),
            ));
        }
        Ok(m)
    }

    /// `[M, ...]` to standardized `[M, dim]`.
    pub fn standardize(&self, latents: &Tensor) -> Result<Tensor> {
        let m = self.check(latents, "standardize")?;
        let d = self.dim();
        let data = latents
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        Tensor::new(vec![m, d], data)
    }

    /// Inverse of [`standardize`](Self::standardize), reshaped to `shape`.
    pub fn destandardize(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.check(x, "destandardize")?;
        let d = self.dim();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * self.std[i % d] + self.mean[i % d])
            .collect();
        Tensor::new(shape.to_vec(), data)
    }
}

/// Anything that predicts a velocity for states `x: [B, dim]` at time `t`.
pub trait VelocityField {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &Tensor, t: f64, labels: &[usize]) -> Result<Tensor>;
}

/// Constant field, for sampler checks.
pub struct ConstantVelocity(pub Vec<f64>);

impl VelocityField for ConstantVelocity {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn velocity(&self, x: &Tensor, _t: f64, _labels: &[usize]) -> Result<Tensor> {
        let b = x.shape()[0];
        Ok(Tensor::from_vec(vec![b, self.0.len()], self.0.repeat(b)))
    }
}

/// Exact marginal velocity `E[eps - z | z_t = x]` when the data is
/// `N(mean, var)` independently per dimension.
pub struct GaussianVelocity {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl VelocityField for GaussianVelocity {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn velocity(&self, x: &Tensor, t: f64, _labels: &[usize]) -> Result<Tensor> {
        let d = self.dim();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &xi)| {
                let (m, s2) = (self.mean[i % d], self.var[i % d]);
                let a = 1.0 - t;
                let gain = (t - a * s2) / (a * a * s2 + t * t);
                -m + gain * (xi - a * m)
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

/// Sinusoidal embedding of times `t` (scaled by 1000), `[B, width]`.
pub fn time_embedding(t: &[f64], width: usize) -> Tensor {
    let half = width / 2;
    let mut data = Vec::with_capacity(t.len() * width);
    for &ti in t {
        for i in 0..width {
            let f = (-(10000f64.ln()) * (i % half.max(1)) as f64 / half.max(1) as f64).exp();
            let a = 1000.0 * ti * f;
            data.push(if i < half { a.sin() } else { a.cos() });
        }
    }
    Tensor::from_vec(vec![t.len(), width], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub hidden: usize,
    /// Number of hidden layers (at least 1).
    pub depth: usize,
    pub time_dim: usize,
    pub num_classes: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            hidden: 256,
            depth: 3,
            time_dim: 32,
            num_classes: 4,
            steps: 3000,
            batch_size: 64,
            lr: 1e-3,
            warmup_steps: 100,
            seed: 0,
        }
    }
}

/// MLP velocity network on flattened latents, conditioned on time (input
/// concatenation) and class (embedding added to the first hidden layer).
#[derive(Clone, Debug)]
pub struct VelocityNet {
    pub dim: usize,
    pub time_dim: usize,
    pub input: Linear,
    pub class_embedding: ParamId,
    pub hidden: Vec<Linear>,
    pub output: Linear,
}

impl VelocityNet {
    pub fn new(
        dim: usize,
        cfg: &FlowConfig,
        params: &mut ParamStore,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if cfg.depth == 0 || cfg.hidden == 0 || cfg.time_dim < 2 || cfg.num_classes == 0 {
            return Err(Error::config(
                "VelocityModel",
                "depth, hidden width, class count must be positive and time_dim >= 2",
            ));
        }
        let input = Linear::new(
            "flow.input",
            dim + cfg.time_dim,
            cfg.hidden,
            true,
            params,
            rng,
        );
        let class_embedding = params.add(
            "flow.class_embedding",
            Tensor::trunc_normal(vec![cfg.num_classes, cfg.hidden], crate::nn::INIT_STD, rng),
        );
        let hidden = (1..cfg.depth)
            .map(|i| {
                Linear::new(
                    &format!("flow.hidden{i}"),
                    cfg.hidden,
                    cfg.hidden,
                    true,
                    params,
                    rng,
                )
            })
            .collect();
        let output = Linear::new("flow.output", cfg.hidden, dim, true, params, rng);
        Ok(VelocityNet {
            dim,
            time_dim: cfg.time_dim,
            input,
            class_embedding,
            hidden,
            output,
        })
    }

    /// `x: [B, dim]`, one time and label per row.
    pub fn forward_var(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: Var,
        t: &[f64],
        labels: &[usize],
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.dim || t.len() != s[0] || labels.len() != s[0] {
            return Err(Error::shape(
                "velocity",
                format!(
                    "x {:?}, {} times, {} labels for dim {}",
                    s,
                    t.len(),
                    labels.len(),
                    self.dim
                ),
            ));
        }
        let temb = tape.constant(time_embedding(t, self.time_dim));
        let inp = tape.concat(&[x, temb], 1)?;
        let h = self.input.forward(tape, binding, inp)?;
        let c = tape.gather_rows(binding.var(self.class_embedding), labels)?;
        let mut h = tape.add(h, c)?;
        h = tape.gelu(h);
        for layer in &self.hidden {
            let y = layer.forward(tape, binding, h)?;
            let y = tape.gelu(y);
            h = tape.add(h, y)?;
        }
        self.output.forward(tape, binding, h)
    }
}

/// `mean_b || v(z_t, t) - (eps - z) ||^2` on the tape, for standardized `z: [B, dim]`.
pub fn fm_loss_var(
    tape: &mut Tape,
    binding: &Binding,
    net: &VelocityNet,
    z: &Tensor,
    eps: &Tensor,
    t: &[f64],
    labels: &[usize],
) -> Result<Var> {
    let d = z.numel() / z.shape()[0].max(1);
    let (xt, target) = fm_pairs(z, eps, t)?;
    let x = tape.constant(xt);
    let v = net.forward_var(tape, binding, x, t, labels)?;
    let tv = tape.constant(target);
    let diff = tape.sub(v, tv)?;
    let sq = tape.square(diff)?;
    let m = tape.mean(sq);
    // mean over elements times dim = mean over rows of the squared norm
    Ok(tape.scale(m, d as f64))
}

/// Interpolated states and velocity targets for per-row times.
fn fm_pairs(z: &Tensor, eps: &Tensor, t: &[f64]) -> Result<(Tensor, Tensor)> {
    if z.shape() != eps.shape() || z.ndim() != 2 || z.shape()[0] != t.len() {
        return Err(Error::shape(
            "fm_loss",
            format!(
                "z {:?}, eps {:?}, {} times",
                z.shape(),
                eps.shape(),
                t.len()
            ),
        ));
    }
    if t.iter().any(|ti| !(0.0..=1.0).contains(ti)) {
        return Err(Error::config("fm_loss", "t outside [0, 1]"));
    }
    let d = z.shape()[1];
    let mut xt = Vec::with_capacity(z.numel());
    let mut target = Vec::with_capacity(z.numel());
    for (i, (zr, er)) in z.rows().zip(eps.rows()).enumerate() {
        for (&a, &e) in zr.iter().zip(er) {
            xt.push((1.0 - t[i]) * a + t[i] * e);
            target.push(e - a);
        }
    }
    Ok((
        Tensor::from_vec(vec![t.len(), d], xt),
        Tensor::from_vec(vec![t.len(), d], target),
    ))
}

/// Flow-matching loss of any field on standardized latents with explicit draws.
pub fn fm_loss_with(
    field: &dyn VelocityField,
    z: &Tensor,
    eps: &Tensor,
    t: &[f64],
    labels: &[usize],
) -> Result<f64> {
    let (xt, target) = fm_pairs(z, eps, t)?;
    let b = t.len();
    let mut total = 0.0;
    // the field is evaluated per row because each row has its own time
    for i in 0..b {
        let row = xt.select_leading(&[i]);
        let v = field.velocity(&row, t[i], &labels[i..i + 1])?;
        let tr = &target.data()[i * v.numel()..(i + 1) * v.numel()];
        total += v
            .data()
            .iter()
            .zip(tr)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / b as f64)
}

/// Flow-matching loss on raw latents `[B, ...]`, standardized with `stats`,
/// with `eps ~ N(0, I)` and `t ~ U(0, 1)` drawn from `seed`.
pub fn fm_loss(
    field: &dyn VelocityField,
    latents: &Tensor,
    labels: &[usize],
    stats: Option<&Standardizer>,
    seed: u64,
) -> Result<f64> {
    let stats = stats.ok_or_else(|| {
        Error::contract("fm_loss", "latent standardization statistics are required")
    })?;
    let z = stats.standardize(latents)?;
    let mut rng = rng_from_seed(seed);
    let eps = Tensor::randn(z.shape().to_vec(), 1.0, &mut rng);
    let t: Vec<f64> = (0..z.shape()[0])
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    fm_loss_with(field, &z, &eps, &t, labels)
}

/// Integrates `dx/dt = v(x, t)` from `t = 1` to `t = 0` with `steps` Euler
/// steps: `x <- x - dt v(x, t)`. Starts from `N(0, I)` seeded by `seed`;
/// returns `[labels.len(), dim]` in the field's (standardized) space.
pub fn euler_sample(
    field: &dyn VelocityField,
    steps: usize,
    labels: &[usize],
    seed: u64,
) -> Result<Tensor> {
    let mut rng = rng_from_seed(seed);
    let x = Tensor::randn(vec![labels.len(), field.dim()], 1.0, &mut rng);
    euler_integrate(field, x, steps, labels)
}

/// Euler integration from a given start `x` at `t = 1`.
pub fn euler_integrate(
    field: &dyn VelocityField,
    mut x: Tensor,
    steps: usize,
    labels: &[usize],
) -> Result<Tensor> {
    if steps < 1 {
        return Err(Error::config("euler_sample", "steps must be >= 1"));
    }
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let v = field.velocity(&x, t, labels)?;
        for (a, b) in x.data_mut().iter_mut().zip(v.data()) {
            *a -= dt * b;
        }
    }
    Ok(x)
}

/// Trained velocity network plus the latent statistics it was trained under.
#[derive(Clone, Debug)]
pub struct FlowModel {
    pub net: VelocityNet,
    pub params: ParamStore,
    pub stats: Standardizer,
    /// Shape of one latent, e.g. `[L, D]`.
    pub latent_shape: Vec<usize>,
    pub losses: Vec<f64>,
}

impl VelocityField for FlowModel {
    fn dim(&self) -> usize {
        self.net.dim
    }

    fn velocity(&self, x: &Tensor, t: f64, labels: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let ts = vec![t; x.shape()[0]];
        let v = self.net.forward_var(&mut tape, &binding, xv, &ts, labels)?;
        Ok(tape.value(v).clone())
    }
}

impl FlowModel {
    /// Samples latents of the original (de-standardized) shape.
    pub fn sample(&self, steps: usize, labels: &[usize], seed: u64) -> Result<Tensor> {
        let x = euler_sample(self, steps, labels, derive_seed(seed, TAG_SAMPLE))?;
        let mut shape = vec![labels.len()];
        shape.extend_from_slice(&self.latent_shape);
        self.stats.destandardize(&x, &shape)
    }
}

const STATS_MEAN: &str = "flow.stats.mean";
const STATS_STD: &str = "flow.stats.std";
const LATENT_SHAPE: &str = "flow.latent_shape";

impl FlowModel {
    /// Network parameters plus standardization statistics, in one checkpoint.
    pub fn to_checkpoint(&self, config_text: &str, seed: u64) -> Checkpoint {
        let mut params = self.params.clone();
        params.add(
            STATS_MEAN,
            Tensor::from_vec(vec![self.stats.dim()], self.stats.mean.clone()),
        );
        params.add(
            STATS_STD,
            Tensor::from_vec(vec![self.stats.dim()], self.stats.std.clone()),
        );
        let shape: Vec<f64> = self.latent_shape.iter().map(|&s| s as f64).collect();
        params.add(LATENT_SHAPE, Tensor::from_vec(vec![shape.len()], shape));
        let optim = OptimState::new(&params, 0.9, 0.95, 1e-8, 0.0);
        Checkpoint {
            config: config_text.to_string(),
            step: self.losses.len() as u64,
            seed,
            params,
            optim,
        }
    }

    /// Rebuilds a model saved by [`to_checkpoint`](Self::to_checkpoint) under
    /// the same flow configuration.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &FlowConfig) -> Result<Self> {
        let get = |name: &str| {
            ckpt.params
                .id(name)
                .map(|id| ckpt.params.get(id).data().to_vec())
                .ok_or_else(|| Error::format("load_flow", format!("checkpoint has no `{name}`")))
        };
        let mean = get(STATS_MEAN)?;
        let std = get(STATS_STD)?;
        let latent_shape: Vec<usize> = get(LATENT_SHAPE)?.iter().map(|&v| v as usize).collect();
        let mut params = ParamStore::new();
        let net = VelocityNet::new(mean.len(), cfg, &mut params, &mut rng_from_seed(0))?;
        for id in params.ids().collect::<Vec<_>>() {
            let name = params.name(id).to_string();
            let stored = ckpt
                .params
                .id(&name)
                .map(|sid| ckpt.params.get(sid))
                .filter(|t| t.shape() == params.get(id).shape())
                .ok_or_else(|| {
                    Error::format("load_flow", format!("`{name}` missing or mis-shaped"))
                })?;
            *params.get_mut(id) = stored.clone();
        }
        Ok(FlowModel {
            net,
            params,
            stats: Standardizer { mean, std },
            latent_shape,
            losses: Vec::new(),
        })
    }
}

/// Trains a velocity network on `latents: [M, ...]` with class `labels`.
pub fn train_flow(latents: &Tensor, labels: &[usize], cfg: &FlowConfig) -> Result<FlowModel> {
    let m = latents.shape().first().copied().unwrap_or(0);
    if m != labels.len() {
        return Err(Error::shape(
            "train_flow",
            format!("{m} latents, {} labels", labels.len()),
        ));
    }
    if labels.iter().any(|&l| l >= cfg.num_classes) {
        return Err(Error::config("train_flow", "label outside num_classes"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("train_flow", "batch size must be positive"));
    }
    let stats = Standardizer::fit(latents)?;
    let z = stats.standardize(latents)?;
    let dim = stats.dim();
    let mut params = ParamStore::new();
    let net = VelocityNet::new(
        dim,
        cfg,
        &mut params,
        &mut rng_from_seed(derive_seed(cfg.seed, TAG_INIT)),
    )?;
    let mut optim = OptimState::new(&params, 0.9, 0.95, 1e-8, 0.0);
    let schedule = Schedule::new(cfg.lr, 0.0, cfg.warmup_steps, cfg.steps)?;
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut rng = rng_from_seed(derive_seed(derive_seed(cfg.seed, TAG_BATCH), step));
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..m))
            .collect();
        let zb = z.select_leading(&idx);
        let lb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let eps = Tensor::randn(zb.shape().to_vec(), 1.0, &mut rng);
        let t: Vec<f64> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let loss = fm_loss_var(&mut tape, &binding, &net, &zb, &eps, &t, &lb)?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::numeric(
                "train_flow",
                format!("loss is {lv} at step {step}"),
            ));
        }
        losses.push(lv);
        let grads = tape.backward(loss)?;
        let g = binding.collect_grads(&tape, &grads);
        adamw_update(&mut params, &g, &mut optim, schedule.lr_at(step + 1)?)?;
    }
    Ok(FlowModel {
        net,
        params,
        stats,
        latent_shape: latents.shape()[1..].to_vec(),
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn interpolate_examples() {
        let mut rng = rng_from_seed(1);
        let z = Tensor::randn(vec![3, 2], 1.0, &mut rng);
        let e = Tensor::randn(vec![3, 2], 1.0, &mut rng);
        assert_eq!(interpolate(&z, &e, 0.0).unwrap(), z);
        assert_eq!(interpolate(&z, &e, 1.0).unwrap(), e);
        let half = interpolate(&Tensor::zeros(vec![1]), &Tensor::full(vec![1], 1.0), 0.5).unwrap();
        assert_eq!(half.data(), &[0.5]);
        assert!(interpolate(&z, &e, 1.5).is_err());
    }

    /// `v(x, t) = x / t` is the exact target when `z = 0`.
    struct ZeroDataTarget;

    impl VelocityField for ZeroDataTarget {
        fn dim(&self) -> usize {
            4
        }
        fn velocity(&self, x: &Tensor, t: f64, _l: &[usize]) -> Result<Tensor> {
            Ok(Tensor::from_vec(
                x.shape().to_vec(),
                x.data().iter().map(|v| v / t).collect(),
            ))
        }
    }

    #[test]
    fn fm_loss_examples() {
        let mut rng = rng_from_seed(2);
        let z = Tensor::zeros(vec![8, 4]);
        let eps = Tensor::randn(vec![8, 4], 1.0, &mut rng);
        let t: Vec<f64> = (0..8).map(|i| 0.1 + 0.1 * i as f64).collect();
        let labels = vec![0; 8];
        assert!(fm_loss_with(&ZeroDataTarget, &z, &eps, &t, &labels).unwrap() < 1e-24);

        // zero field on zero data: E ||eps||^2 = dim
        let n = 10_000;
        let zeros = ConstantVelocity(vec![0.0; 4]);
        let z = Tensor::zeros(vec![n, 4]);
        let eps = Tensor::randn(vec![n, 4], 1.0, &mut rng);
        let t = vec![0.5; n];
        let l = fm_loss_with(&zeros, &z, &eps, &t, &vec![0; n]).unwrap();
        assert!((l - 4.0).abs() < 0.4, "{l}");

        // duplicating the batch leaves the loss unchanged
        let z = Tensor::randn(vec![4, 4], 1.0, &mut rng);
        let e = Tensor::randn(vec![4, 4], 1.0, &mut rng);
        let t = vec![0.2, 0.4, 0.6, 0.8];
        let f = ConstantVelocity(vec![0.3, -0.1, 0.0, 1.0]);
        let a = fm_loss_with(&f, &z, &e, &t, &[0; 4]).unwrap();
        let dup: Vec<usize> = (0..8).map(|i| i % 4).collect();
        let b = fm_loss_with(
            &f,
            &z.select_leading(&dup),
            &e.select_leading(&dup),
            &[t.clone(), t].concat(),
            &[0; 8],
        )
        .unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn fm_loss_requires_stats() {
        let z = Tensor::zeros(vec![2, 4]);
        let f = ConstantVelocity(vec![0.0; 4]);
        assert!(matches!(
            fm_loss(&f, &z, &[0, 0], None, 1),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn net_loss_matches_field_loss() {
        let cfg = FlowConfig {
            hidden: 8,
            depth: 2,
            time_dim: 4,
            num_classes: 2,
            ..FlowConfig::default()
        };
        let mut params = ParamStore::new();
        let net = VelocityNet::new(3, &cfg, &mut params, &mut rng_from_seed(1)).unwrap();
        let mut rng = rng_from_seed(2);
        let z = Tensor::randn(vec![5, 3], 1.0, &mut rng);
        let e = Tensor::randn(vec![5, 3], 1.0, &mut rng);
        let t = [0.1, 0.3, 0.5, 0.7, 0.9];
        let labels = [0, 1, 0, 1, 1];
        let mut tape = Tape::new();
        let b = params.bind_frozen(&mut tape);
        let l = fm_loss_var(&mut tape, &b, &net, &z, &e, &t, &labels).unwrap();
        let model = FlowModel {
            net,
            params,
            stats: Standardizer {
                mean: vec![0.0; 3],
                std: vec![1.0; 3],
            },
            latent_shape: vec![3],
            losses: vec![],
        };
        let want = fm_loss_with(&model, &z, &e, &t, &labels).unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn euler_constant_field_is_exact() {
        let v0 = vec![0.5, -2.0, 3.0];
        let f = ConstantVelocity(v0.clone());
        let x1 = euler_sample(&f, 1, &[0, 0], 9).unwrap();
        let start = Tensor::randn(vec![2, 3], 1.0, &mut rng_from_seed(9));
        for steps in [1, 7, 100] {
            let x0 = euler_sample(&f, steps, &[0, 0], 9).unwrap();
            for (i, (&a, &s)) in x0.data().iter().zip(start.data()).enumerate() {
                assert!((a - (s - v0[i % 3])).abs() < 1e-12);
            }
        }
        // steps = 1 is one full jump
        for (i, (&a, &s)) in x1.data().iter().zip(start.data()).enumerate() {
            assert_eq!(a, s - v0[i % 3]);
        }
        assert!(euler_sample(&f, 0, &[0], 1).is_err());
    }

    #[test]
    fn gaussian_velocity_transports_noise_to_target() {
        let f = GaussianVelocity {
            mean: vec![1.5],
            var: vec![0.25],
        };
        let n = 10_000;
        let x = euler_sample(&f, 100, &vec![0; n], 4).unwrap();
        let mean = x.data().iter().sum::<f64>() / n as f64;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 1.5).abs() < 0.05, "{mean}");
        assert!((var - 0.25).abs() < 0.1, "{var}");
    }

    #[test]
    fn standardizer_round_trip() {
        let mut rng = rng_from_seed(3);
        let lat = Tensor::randn(vec![20, 2, 3], 4.0, &mut rng);
        let s = Standardizer::fit(&lat).unwrap();
        let z = s.standardize(&lat).unwrap();
        let back = s.destandardize(&z, &[20, 2, 3]).unwrap();
        assert!(back.max_abs_diff(&lat) < 1e-10);
    }

    #[test]
    fn training_reduces_loss() {
        let mut rng = rng_from_seed(5);
        let n = 256;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let data: Vec<f64> = labels
            .iter()
            .flat_map(|&l| {
                let c = if l == 0 { -2.0 } else { 2.0 };
                [c, -c]
            })
            .collect();
        let mut lat = Tensor::from_vec(vec![n, 2], data);
        let noise = Tensor::randn(vec![n, 2], 0.1, &mut rng);
        lat.data_mut()
            .iter_mut()
            .zip(noise.data())
            .for_each(|(a, b)| *a += b);
        let cfg = FlowConfig {
            hidden: 32,
            depth: 2,
            time_dim: 8,
            num_classes: 2,
            steps: 300,
            batch_size: 32,
            lr: 3e-3,
            warmup_steps: 10,
            seed: 1,
        };
        let model = train_flow(&lat, &labels, &cfg).unwrap();
        let early: f64 = model.losses[..20].iter().sum::<f64>() / 20.0;
        let late: f64 = model.losses[280..].iter().sum::<f64>() / 20.0;
        assert!(late < early, "{early} -> {late}");
        let s = model.sample(20, &[0, 1], 1).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s, model.sample(20, &[0, 1], 1).unwrap());
    }

    proptest! {
        #[test]
        fn interpolate_is_affine(
            z in prop::collection::vec(-3f64..3.0, 4),
            e in prop::collection::vec(-3f64..3.0, 4),
            a in -2f64..2.0, b in -2f64..2.0, t in 0f64..=1.0,
        ) {
            let zt = Tensor::from_vec(vec![4], z.clone());
            let et = Tensor::from_vec(vec![4], e.clone());
            let za = Tensor::from_vec(vec![4], z.iter().map(|x| a * x + b).collect());
            let ea = Tensor::from_vec(vec![4], e.iter().map(|x| a * x + b).collect());
            let lhs = interpolate(&za, &ea, t).unwrap();
            let rhs = interpolate(&zt, &et, t).unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - (a * r + b)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn flow_checkpoint_round_trip() {
        let mut rng = rng_from_seed(3);
        let latents = Tensor::randn(vec![32, 2, 3], 1.0, &mut rng);
        let labels: Vec<usize> = (0..32).map(|i| i % 2).collect();
        let cfg = FlowConfig {
            hidden: 8,
            depth: 2,
            time_dim: 4,
            num_classes: 2,
            steps: 5,
            batch_size: 4,
            warmup_steps: 1,
            ..FlowConfig::default()
        };
        let model = train_flow(&latents, &labels, &cfg).unwrap();
        let bytes = model.to_checkpoint("cfg", 0).to_bytes();
        let back =
            FlowModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), &cfg).unwrap();
        assert_eq!(back.stats, model.stats);
        assert_eq!(back.latent_shape, vec![2, 3]);
        assert_eq!(
            back.sample(3, &[0, 1], 9).unwrap(),
            model.sample(3, &[0, 1], 9).unwrap()
        );
    }
}
