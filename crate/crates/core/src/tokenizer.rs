//! Transformer tokenizer: image patches plus learnable 1-D latent tokens go
//! through the encoder, only the latent positions are kept; the decoder reads
//! learnable mask tokens next to the (projected) latents and regresses pixels
//! from the mask positions with a linear head.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{sincos_1d, sincos_2d, AttentionBlock, LayerNorm, Linear, Mlp, INIT_STD};
use crate::params::{Binding, ParamId, ParamStore};
use crate::quantizers::QuantizerKind;
use crate::tensor::{SeededRng, Tensor};

/// Floor added after the softplus of the GMM weight head.
pub const OMEGA_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square image side H.
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Number of latent tokens L.
    pub latent_tokens: usize,
    /// Latent dimension D.
    pub latent_dim: usize,
    /// Transformer width W.
    pub width: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub mlp_ratio: usize,
    /// Output width of the alignment projector; `None` builds no projector.
    pub align_dim: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            latent_tokens: 8,
            latent_dim: 16,
            width: 64,
            enc_depth: 2,
            dec_depth: 2,
            mlp_ratio: 4,
            align_dim: None,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of image / mask tokens N.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let op = "ModelConfig";
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::shape(
                op,
                format!(
                    "H={} not divisible by P={}",
                    self.image_size, self.patch_size
                ),
            ));
        }
        let n = self.num_patches();
        if self.latent_tokens == 0 || self.latent_tokens > n || n % self.latent_tokens != 0 {
            return Err(Error::config(
                op,
                format!("L={} must divide N={} (and be <= N)", self.latent_tokens, n),
            ));
        }
        if self.width == 0 || self.width % 4 != 0 {
            return Err(Error::config(
                op,
                format!("W={} must be a positive multiple of 4", self.width),
            ));
        }
        if self.latent_dim == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::config(op, "D, C and mlp_ratio must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TokenizerModel {
    pub config: ModelConfig,
    pub patch_embed: Linear,
    pub latent_tokens: ParamId,
    pub mask_tokens: ParamId,
    pub pos_2d: Tensor,
    pub pos_1d: Tensor,
    pub enc_blocks: Vec<AttentionBlock>,
    pub enc_norm: LayerNorm,
    pub enc_out: Linear,
    /// Log-variance head for the Gaussian (KL-VAE) baseline.
    pub logvar_head: Option<Linear>,
    /// Positive per-token weight head for GMMVQ.
    pub omega_head: Option<Linear>,
    pub dec_in: Linear,
    pub dec_blocks: Vec<AttentionBlock>,
    pub dec_norm: LayerNorm,
    pub pixel_head: Linear,
    pub projector: Option<Mlp>,
}

/// Encoder outputs on a tape.
pub struct Encoded {
    /// `[B, L, D]`; the Gaussian mean for the KL baseline.
    pub zhat: Var,
    pub logvar: Option<Var>,
    /// `[B, L]`, strictly positive.
    pub omega: Option<Var>,
}

fn inverse_softplus(y: f64) -> f64 {
    // ln(e^y - 1), stable for large y
    y + (-(-y).exp()).ln_1p()
}

impl TokenizerModel {
    /// Builds and registers all parameters. `temperature` seeds the GMM weight
    /// head so that its initial inverse temperature is `1 / temperature`.
    pub fn new(
        config: ModelConfig,
        kind: QuantizerKind,
        temperature: f64,
        params: &mut ParamStore,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let n = config.num_patches();
        let l = config.latent_tokens;
        let d = config.latent_dim;
        let hidden = w * config.mlp_ratio;

        let patch_embed = Linear::new("enc.patch_embed", config.patch_dim(), w, true, params, rng);
        let latent_tokens = params.add(
            "enc.latent_tokens",
            Tensor::trunc_normal(vec![l, w], INIT_STD, rng),
        );
        let enc_blocks = (0..config.enc_depth)
            .map(|i| AttentionBlock::new(&format!("enc.block{i}"), w, hidden, params, rng))
            .collect();
        let enc_norm = LayerNorm::new("enc.norm", w, params);
        let enc_out = Linear::new("enc.out", w, d, true, params, rng);
        let dec_in = Linear::new("dec.latent_in", d, w, true, params, rng);
        let mask_tokens = params.add(
            "dec.mask_tokens",
            Tensor::trunc_normal(vec![n, w], INIT_STD, rng),
        );
        let dec_blocks = (0..config.dec_depth)
            .map(|i| AttentionBlock::new(&format!("dec.block{i}"), w, hidden, params, rng))
            .collect();
        let dec_norm = LayerNorm::new("dec.norm", w, params);
        let pixel_head = Linear::new("dec.pixel_head", w, config.patch_dim(), true, params, rng);

        // Optional parts draw from their own streams so that the parameters
        // shared between variants (quantizer kinds, with or without a
        // projector) are initialized identically.
        let projector = config.align_dim.map(|f| {
            let mut proj_rng = rng.clone();
            proj_rng.set_stream(2);
            Mlp::new("align.projector", d, w, f, params, &mut proj_rng)
        });
        let mut head_rng = rng.clone();
        head_rng.set_stream(1);
        let logvar_head = (kind == QuantizerKind::GaussianKl)
            .then(|| Linear::new("enc.logvar", w, d, true, params, &mut head_rng));
        let omega_head = (kind == QuantizerKind::GmmVq).then(|| {
            let lin = Linear::new("enc.omega", w, 1, true, params, &mut head_rng);
            let b = inverse_softplus(1.0 / temperature - OMEGA_FLOOR);
            *params.get_mut(lin.bias.expect("bias")) = Tensor::full(vec![1], b);
            lin
        });

        Ok(TokenizerModel {
            pos_2d: sincos_2d(config.grid(), w),
            pos_1d: sincos_1d(l, w),
            config,
            patch_embed,
            latent_tokens,
            mask_tokens,
            enc_blocks,
            enc_norm,
            enc_out,
            logvar_head,
            omega_head,
            dec_in,
            dec_blocks,
            dec_norm,
            pixel_head,
            projector,
        })
    }

    fn check_images(&self, images: &Tensor) -> Result<usize> {
        let c = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != s[2] || s[3] != c.channels {
            return Err(Error::shape(
                "encode",
                format!("expected B x H x H x {}, got {:?}", c.channels, s),
            ));
        }
        if s[1] % c.patch_size != 0 {
            return Err(Error::shape(
                "encode",
                format!("H={} not divisible by P={}", s[1], c.patch_size),
            ));
        }
        if s[1] != c.image_size {
            return Err(Error::shape(
                "encode",
                format!("model expects H={}, got {}", c.image_size, s[1]),
            ));
        }
        Ok(s[0])
    }

    pub fn encode_var(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        images: &Tensor,
    ) -> Result<Encoded> {
        let b = self.check_images(images)?;
        let c = &self.config;
        let (n, l) = (c.num_patches(), c.latent_tokens);

        let patches = tape.constant(patchify(images, c.patch_size)?);
        let x = self.patch_embed.forward(tape, binding, patches)?;
        let pos2 = tape.constant(self.pos_2d.clone());
        let x = tape.add_suffix(x, pos2)?;

        let pos1 = tape.constant(self.pos_1d.clone());
        let lat = tape.add(binding.var(self.latent_tokens), pos1)?;
        let lat = tape.tile(lat, b)?;

        let mut h = tape.concat(&[x, lat], 1)?;
        for block in &self.enc_blocks {
            h = block.forward(tape, binding, h)?;
        }
        let h = self.enc_norm.forward(tape, binding, h)?;
        let h = tape.narrow(h, 1, n, l)?;
        let zhat = self.enc_out.forward(tape, binding, h)?;
        let logvar = match &self.logvar_head {
            Some(head) => Some(head.forward(tape, binding, h)?),
            None => None,
        };
        let omega = match &self.omega_head {
            Some(head) => {
                let raw = head.forward(tape, binding, h)?;
                let pos = tape.softplus(raw);
                let pos = tape.add_scalar(pos, OMEGA_FLOOR);
                Some(tape.reshape(pos, vec![b, l])?)
            }
            None => None,
        };
        Ok(Encoded {
            zhat,
            logvar,
            omega,
        })
    }

    /// `latents: [B, L, D]` to images `[B, H, H, C]`.
    pub fn decode_var(&self, tape: &mut Tape, binding: &Binding, latents: Var) -> Result<Var> {
        let c = &self.config;
        let s = tape.shape(latents).to_vec();
        if s.len() != 3 || s[1] != c.latent_tokens || s[2] != c.latent_dim {
            return Err(Error::shape(
                "decode",
                format!(
                    "expected B x {} x {}, got {:?}",
                    c.latent_tokens, c.latent_dim, s
                ),
            ));
        }
        let b = s[0];
        let n = c.num_patches();

        let z = self.dec_in.forward(tape, binding, latents)?;
        let pos1 = tape.constant(self.pos_1d.clone());
        let z = tape.add_suffix(z, pos1)?;

        let pos2 = tape.constant(self.pos_2d.clone());
        let m = tape.add(binding.var(self.mask_tokens), pos2)?;
        let m = tape.tile(m, b)?;

        let mut h = tape.concat(&[m, z], 1)?;
        for block in &self.dec_blocks {
            h = block.forward(tape, binding, h)?;
        }
        let h = self.dec_norm.forward(tape, binding, h)?;
        let h = tape.narrow(h, 1, 0, n)?;
        let patches = self.pixel_head.forward(tape, binding, h)?;
        let (index, shape) = unpatchify_index(b, c.image_size, c.patch_size, c.channels);
        tape.gather(patches, index, shape)
    }
}

/// `[B, H, H, C]` to `[B, N, P*P*C]`, patches in raster order, pixels in
/// `(dy, dx, c)` order within a patch.
pub fn patchify(images: &Tensor, p: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || p == 0 || s[1] % p != 0 || s[2] % p != 0 {
        return Err(Error::shape(
            "patchify",
            format!("cannot patchify {:?} with P={}", s, p),
        ));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(images.numel());
    let d = images.data();
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..p {
                    let y = py * p + dy;
                    let start = ((bi * h + y) * w + px * p) * c;
                    out.extend_from_slice(&d[start..start + p * c]);
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, p * p * c], out)
}

/// Gather indices that map patch rows back to an image batch.
fn unpatchify_index(b: usize, h: usize, p: usize, c: usize) -> (Vec<usize>, Vec<usize>) {
    let g = h / p;
    let pd = p * p * c;
    let n = g * g;
    let mut index = Vec::with_capacity(b * h * h * c);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..h {
                let patch = (y / p) * g + x / p;
                for ch in 0..c {
                    let within = ((y % p) * p + x % p) * c + ch;
                    index.push((bi * n + patch) * pd + within);
                }
            }
        }
    }
    (index, vec![b, h, h, c])
}

/// Eager encoder: `zhat: [B, L, D]`.
pub fn encode(images: &Tensor, model: &TokenizerModel, params: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let binding = params.bind_frozen(&mut tape);
    let enc = model.encode_var(&mut tape, &binding, images)?;
    Ok(tape.value(enc.zhat).clone())
}

/// Eager decoder: images `[B, H, H, C]`.
pub fn decode(latents: &Tensor, model: &TokenizerModel, params: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let binding = params.bind_frozen(&mut tape);
    let z = tape.constant(latents.clone());
    let x = model.decode_var(&mut tape, &binding, z)?;
    Ok(tape.value(x).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng_from_seed;

    fn small(l: usize, d: usize) -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            latent_tokens: l,
            latent_dim: d,
            width: 8,
            enc_depth: 1,
            dec_depth: 1,
            mlp_ratio: 2,
            align_dim: None,
        }
    }

    fn build(cfg: ModelConfig, seed: u64) -> (TokenizerModel, ParamStore) {
        let mut params = ParamStore::new();
        let mut rng = rng_from_seed(seed);
        let m =
            TokenizerModel::new(cfg, QuantizerKind::SoftVq, 0.07, &mut params, &mut rng).unwrap();
        (m, params)
    }

    #[test]
    fn patchify_roundtrip_through_unpatchify() {
        let mut rng = rng_from_seed(1);
        let img = Tensor::randn(vec![2, 8, 8, 3], 1.0, &mut rng);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[2, 4, 48]);
        let (idx, shape) = unpatchify_index(2, 8, 4, 3);
        let back: Vec<f64> = idx.iter().map(|&i| p.data()[i]).collect();
        assert_eq!(shape, vec![2, 8, 8, 3]);
        assert_eq!(back, img.data());
    }

    #[test]
    fn encode_decode_shapes() {
        let (m, params) = build(small(2, 3), 1);
        let mut rng = rng_from_seed(2);
        let x = Tensor::uniform(vec![3, 8, 8, 1], 0.0, 1.0, &mut rng);
        let z = encode(&x, &m, &params).unwrap();
        assert_eq!(z.shape(), &[3, 2, 3]);
        let y = decode(&z, &m, &params).unwrap();
        assert_eq!(y.shape(), &[3, 8, 8, 1]);
        assert_eq!(decode(&z, &m, &params).unwrap(), y);
    }

    #[test]
    fn identical_images_give_identical_latents() {
        let (m, params) = build(small(4, 3), 3);
        let mut rng = rng_from_seed(4);
        let one = Tensor::uniform(vec![1, 8, 8, 1], 0.0, 1.0, &mut rng);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let two = Tensor::from_vec(vec![2, 8, 8, 1], data);
        let z = encode(&two, &m, &params).unwrap();
        let rows: Vec<&[f64]> = z.data().chunks(12).collect();
        assert_eq!(rows[0], rows[1]);
    }

    #[test]
    fn zero_image_with_zero_patch_embed_is_reproducible() {
        let run = || {
            let (m, mut params) = build(small(2, 3), 9);
            *params.get_mut(m.patch_embed.weight) = Tensor::zeros(vec![16, 8]);
            let x = Tensor::zeros(vec![1, 8, 8, 1]);
            encode(&x, &m, &params).unwrap()
        };
        let a = run();
        assert!(a.is_finite());
        assert_eq!(a, run());
    }

    #[test]
    fn rejects_bad_shapes() {
        let (m, params) = build(small(2, 3), 1);
        let x = Tensor::zeros(vec![1, 6, 6, 1]);
        assert!(matches!(encode(&x, &m, &params), Err(Error::Shape { .. })));
        let z = Tensor::zeros(vec![1, 3, 3]);
        assert!(matches!(decode(&z, &m, &params), Err(Error::Shape { .. })));
        let mut cfg = small(3, 3);
        cfg.latent_tokens = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = small(2, 3);
        cfg.image_size = 10;
        assert!(matches!(cfg.validate(), Err(Error::Shape { .. })));
    }

    #[test]
    fn supported_grid_round_trip_shapes() {
        for h in [16, 32] {
            for p in [4, 8] {
                let n = (h / p) * (h / p);
                for l in [4, 8, 16, 32] {
                    for d in [8, 16, 32] {
                        let cfg = ModelConfig {
                            image_size: h,
                            patch_size: p,
                            channels: 1,
                            latent_tokens: l,
                            latent_dim: d,
                            width: 8,
                            enc_depth: 1,
                            dec_depth: 1,
                            mlp_ratio: 1,
                            align_dim: None,
                        };
                        if l > n || n % l != 0 {
                            assert!(cfg.validate().is_err());
                            continue;
                        }
                        let (m, params) = build(cfg, 5);
                        let x = Tensor::zeros(vec![1, h, h, 1]);
                        let z = encode(&x, &m, &params).unwrap();
                        assert_eq!(z.shape(), &[1, l, d]);
                        let y = decode(&z, &m, &params).unwrap();
                        assert_eq!(y.shape(), &[1, h, h, 1]);
                    }
                }
            }
        }
    }

    #[test]
    fn batch_equivariance() {
        let (m, params) = build(small(2, 3), 7);
        let mut rng = rng_from_seed(8);
        let x = Tensor::uniform(vec![3, 8, 8, 1], 0.0, 1.0, &mut rng);
        let perm = [2, 0, 1];
        let xp = x.select_leading(&perm);
        let z = encode(&x, &m, &params).unwrap();
        let zp = encode(&xp, &m, &params).unwrap();
        assert_eq!(z.select_leading(&perm), zp);
        let y = decode(&z, &m, &params).unwrap();
        let yp = decode(&zp, &m, &params).unwrap();
        assert_eq!(y.select_leading(&perm), yp);
    }

    #[test]
    fn omega_head_starts_at_inverse_temperature() {
        let mut params = ParamStore::new();
        let mut rng = rng_from_seed(1);
        let m = TokenizerModel::new(
            small(2, 3),
            QuantizerKind::GmmVq,
            0.07,
            &mut params,
            &mut rng,
        )
        .unwrap();
        let mut tape = Tape::new();
        let binding = params.bind_frozen(&mut tape);
        let x = Tensor::zeros(vec![1, 8, 8, 1]);
        let enc = m.encode_var(&mut tape, &binding, &x).unwrap();
        let w = tape.value(enc.omega.unwrap());
        for &v in w.data() {
            assert!(v > 0.0);
            assert!((v - 1.0 / 0.07).abs() < 0.5);
        }
    }
}
