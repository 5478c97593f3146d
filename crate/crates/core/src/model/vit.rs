use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BoundParams, Group, ModelConfig, ParamStore, PatchMask, Task};
use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Layer-norm epsilon. Small enough that normalized rows have unit variance
/// to ~1e-8 for any non-degenerate input.
pub const LN_EPS: f64 = 1e-10;

/// Vision transformer with per-block parallel adapters, a pixel-space mask
/// token, a task head and a linear reconstruction head.
///
/// Index tables for patchify/unpatchify, mask-token tiling and head slicing
/// are computed once per geometry.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    patchify: Vec<usize>,
    unpatchify: Vec<usize>,
    token_tile: Vec<usize>,
    head_cols: Vec<Vec<usize>>,
    head_rows: Vec<Vec<usize>>,
    mean_pool: Tensor,
}

/// Outputs of a student pass on a masked image.
#[derive(Clone, Copy, Debug)]
pub struct StudentPass {
    pub masked_input: Var,
    pub features: Var,
    pub logits: Var,
    pub reconstruction: Var,
}

fn adapter_names(block: usize) -> [String; 4] {
    [
        format!("blocks.{block}.adapter.down.weight"),
        format!("blocks.{block}.adapter.down.bias"),
        format!("blocks.{block}.adapter.up.weight"),
        format!("blocks.{block}.adapter.up.bias"),
    ]
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(&[fan_in, fan_out], data).expect("xavier shape")
}

/// Argmax per row of a `[rows, C]` tensor, ties resolved to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (s, p, g, ch) = (cfg.image_size, cfg.patch_size, cfg.grid(), cfg.channels);
        let n = cfg.num_patches();
        let pd = cfg.patch_dim();

        let pixel = |c: usize, y: usize, x: usize| (c * s + y) * s + x;
        let mut patchify = Vec::with_capacity(n * pd);
        for gy in 0..g {
            for gx in 0..g {
                for c in 0..ch {
                    for py in 0..p {
                        for px in 0..p {
                            patchify.push(pixel(c, gy * p + py, gx * p + px));
                        }
                    }
                }
            }
        }
        let mut unpatchify = vec![0; patchify.len()];
        for (k, &px) in patchify.iter().enumerate() {
            unpatchify[px] = k;
        }
        let mut token_tile = Vec::with_capacity(ch * s * s);
        for c in 0..ch {
            for y in 0..s {
                for x in 0..s {
                    token_tile.push((c * p + y % p) * p + x % p);
                }
            }
        }
        let (d, dh) = (cfg.embed_dim, cfg.head_dim());
        let head_cols = (0..cfg.heads)
            .map(|h| {
                (0..n)
                    .flat_map(|row| (0..dh).map(move |j| row * d + h * dh + j))
                    .collect()
            })
            .collect();
        let head_rows = (0..cfg.heads)
            .map(|h| (h * dh..(h + 1) * dh).collect())
            .collect();
        let mean_pool = Tensor::full(&[1, n], 1.0 / n as f64);
        Ok(Model {
            cfg,
            patchify,
            unpatchify,
            token_tile,
            head_cols,
            head_rows,
            mean_pool,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Fresh parameters: Xavier-uniform linear weights, zero biases, unit
    /// layer-norm gains, N(0, 0.02) positional embeddings, zero mask token
    /// and zero-initialized adapter up-projections.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let cfg = &self.cfg;
        let (d, n, pd, c) = (
            cfg.embed_dim,
            cfg.num_patches(),
            cfg.patch_dim(),
            cfg.num_classes,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut put = |name: String, t: Tensor, g: Group| {
            p.insert(name, t.with_requires_grad(true), g)
                .expect("unique names");
        };

        put(
            "patch_embed.weight".into(),
            xavier(&mut rng, pd, d),
            Group::Backbone,
        );
        put(
            "patch_embed.bias".into(),
            Tensor::zeros(&[d]),
            Group::Backbone,
        );
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let pos = (0..n * d).map(|_| normal.sample(&mut rng)).collect();
        put(
            "pos_embed".into(),
            Tensor::new(&[n, d], pos).expect("pos shape"),
            Group::Backbone,
        );

        for b in 0..cfg.depth {
            let pre = format!("blocks.{b}");
            for norm in ["norm1", "norm2"] {
                put(
                    format!("{pre}.{norm}.gamma"),
                    Tensor::full(&[d], 1.0),
                    Group::Backbone,
                );
                put(
                    format!("{pre}.{norm}.beta"),
                    Tensor::zeros(&[d]),
                    Group::Backbone,
                );
            }
            for proj in ["q", "k", "v", "o"] {
                put(
                    format!("{pre}.attn.{proj}.weight"),
                    xavier(&mut rng, d, d),
                    Group::Backbone,
                );
                put(
                    format!("{pre}.attn.{proj}.bias"),
                    Tensor::zeros(&[d]),
                    Group::Backbone,
                );
            }
            put(
                format!("{pre}.mlp.fc1.weight"),
                xavier(&mut rng, d, 4 * d),
                Group::Backbone,
            );
            put(
                format!("{pre}.mlp.fc1.bias"),
                Tensor::zeros(&[4 * d]),
                Group::Backbone,
            );
            put(
                format!("{pre}.mlp.fc2.weight"),
                xavier(&mut rng, 4 * d, d),
                Group::Backbone,
            );
            put(
                format!("{pre}.mlp.fc2.bias"),
                Tensor::zeros(&[d]),
                Group::Backbone,
            );
        }
        put(
            "norm.gamma".into(),
            Tensor::full(&[d], 1.0),
            Group::Backbone,
        );
        put("norm.beta".into(), Tensor::zeros(&[d]), Group::Backbone);

        put("head.weight".into(), xavier(&mut rng, d, c), Group::SegHead);
        put("head.bias".into(), Tensor::zeros(&[c]), Group::SegHead);
        put(
            "rec_head.weight".into(),
            xavier(&mut rng, d, pd),
            Group::RecHead,
        );
        put("rec_head.bias".into(), Tensor::zeros(&[pd]), Group::RecHead);
        // mid-gray; a black token is a marker the encoder learns to lean on
        put(
            "mask_token".into(),
            Tensor::full(&[cfg.channels, cfg.patch_size, cfg.patch_size], 0.5),
            Group::MaskToken,
        );

        self.insert_adapters(&mut p, rng.random())
            .expect("fresh store has no adapters");
        p
    }

    /// Adds (or replaces) every block's adapter with a freshly initialized one
    /// whose up-projection is zero, so the branch outputs exactly zero.
    pub fn insert_adapters(&self, params: &mut ParamStore, seed: u64) -> Result<()> {
        let (d, r) = (self.cfg.embed_dim, self.cfg.adapter_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fresh = params.subset(
            Group::ALL
                .into_iter()
                .filter(|g| *g != Group::Adapter)
                .collect(),
        );
        for b in 0..self.cfg.depth {
            let [dw, db, uw, ub] = adapter_names(b);
            let tensors = [
                (dw, xavier(&mut rng, d, r)),
                (db, Tensor::zeros(&[r])),
                (uw, Tensor::zeros(&[r, d])),
                (ub, Tensor::zeros(&[d])),
            ];
            for (name, t) in tensors {
                fresh.insert(name, t.with_requires_grad(true), Group::Adapter)?;
            }
        }
        *params = fresh;
        Ok(())
    }

    /// Puts an image on the tape as a constant after checking its geometry.
    pub fn image(&self, tape: &mut Tape, image: &Tensor) -> Result<Var> {
        if image.shape() != self.cfg.image_shape() {
            return Err(Error::shape(
                "image",
                format!(
                    "expected {:?}, got {:?}",
                    self.cfg.image_shape(),
                    image.shape()
                ),
            ));
        }
        Ok(tape.constant(image.clone()))
    }

    /// `x * (1 - M) + e * M` with `e` tiled over every masked patch.
    pub fn apply_mask(&self, tape: &mut Tape, x: Var, mask: &PatchMask, token: Var) -> Result<Var> {
        let shape = self.cfg.image_shape();
        let token_shape = [self.cfg.channels, self.cfg.patch_size, self.cfg.patch_size];
        if tape.shape(x) != shape || tape.shape(token) != token_shape {
            return Err(Error::shape(
                "apply_mask",
                format!("image {:?}, token {:?}", tape.shape(x), tape.shape(token)),
            ));
        }
        let m = mask.pixel_mask(&self.cfg)?;
        let keep: Vec<f64> = m.data().iter().map(|v| 1.0 - v).collect();
        let keep = tape.constant(Tensor::new(&shape, keep)?);
        let m = tape.constant(m);
        let tiled = tape.gather(token, &self.token_tile, &shape)?;
        let visible = tape.mul(x, keep)?;
        let filled = tape.mul(tiled, m)?;
        tape.add(visible, filled)
    }

    /// `[C, H, W]` image to `[num_patches, patch_dim]` rows.
    pub fn patchify(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = [self.cfg.num_patches(), self.cfg.patch_dim()];
        tape.gather(x, &self.patchify, &shape)
    }

    fn linear(&self, tape: &mut Tape, x: Var, p: &BoundParams, prefix: &str) -> Result<Var> {
        let w = p.get(&format!("{prefix}.weight"))?;
        let b = p.get(&format!("{prefix}.bias"))?;
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    fn norm(&self, tape: &mut Tape, x: Var, p: &BoundParams, prefix: &str) -> Result<Var> {
        let g = p.get(&format!("{prefix}.gamma"))?;
        let b = p.get(&format!("{prefix}.beta"))?;
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn attention(&self, tape: &mut Tape, x: Var, p: &BoundParams, pre: &str) -> Result<Var> {
        let (n, dh) = (self.cfg.num_patches(), self.cfg.head_dim());
        let q = self.linear(tape, x, p, &format!("{pre}.attn.q"))?;
        let k = self.linear(tape, x, p, &format!("{pre}.attn.k"))?;
        let v = self.linear(tape, x, p, &format!("{pre}.attn.v"))?;
        let wo = p.get(&format!("{pre}.attn.o.weight"))?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out: Option<Var> = None;
        for (cols, rows) in self.head_cols.iter().zip(&self.head_rows) {
            let qh = tape.gather(q, cols, &[n, dh])?;
            let kh = tape.gather(k, cols, &[n, dh])?;
            let vh = tape.gather(v, cols, &[n, dh])?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scalar_mul(scores, scale)?;
            let weights = tape.softmax_lastdim(scores)?;
            let ctx = tape.matmul(weights, vh)?;
            let wo_h = tape.gather_rows(wo, rows)?;
            let proj = tape.matmul(ctx, wo_h)?;
            out = Some(match out {
                Some(acc) => tape.add(acc, proj)?,
                None => proj,
            });
        }
        let bo = p.get(&format!("{pre}.attn.o.bias"))?;
        let out = out.expect("at least one head");
        tape.add(out, bo)
    }

    /// `s * up(relu(down(h)))` for one block; `h` is `[n, d]`.
    pub fn adapter_branch(
        &self,
        tape: &mut Tape,
        h: Var,
        p: &BoundParams,
        block: usize,
    ) -> Result<Var> {
        let pre = format!("blocks.{block}.adapter");
        let down = self.linear(tape, h, p, &format!("{pre}.down"))?;
        let act = tape.relu(down)?;
        let up = self.linear(tape, act, p, &format!("{pre}.up"))?;
        tape.scalar_mul(up, self.cfg.adapter_scale)
    }

    fn block(&self, tape: &mut Tape, x: Var, p: &BoundParams, b: usize) -> Result<Var> {
        let pre = format!("blocks.{b}");
        let a = self.norm(tape, x, p, &format!("{pre}.norm1"))?;
        let attn = self.attention(tape, a, p, &pre)?;
        let h = tape.add(x, attn)?;

        let m = self.norm(tape, h, p, &format!("{pre}.norm2"))?;
        let m = self.linear(tape, m, p, &format!("{pre}.mlp.fc1"))?;
        let m = tape.gelu(m)?;
        let m = self.linear(tape, m, p, &format!("{pre}.mlp.fc2"))?;
        let mut branch = m;
        if p.contains(&adapter_names(b)[0]) {
            let ad = self.adapter_branch(tape, h, p, b)?;
            branch = tape.add(branch, ad)?;
        }
        tape.add(h, branch)
    }

    /// Token features `[num_patches, embed_dim]`. Adapters are used when bound.
    pub fn encode(&self, tape: &mut Tape, x: Var, p: &BoundParams) -> Result<Var> {
        let patches = self.patchify(tape, x)?;
        let mut h = self.linear(tape, patches, p, "patch_embed")?;
        let pos = p.get("pos_embed")?;
        h = tape.add(h, pos)?;
        for b in 0..self.cfg.depth {
            h = self.block(tape, h, p, b).map_err(|e| {
                if e.is_non_finite() {
                    Error::BlockActivation {
                        block: b,
                        source: Box::new(e),
                    }
                } else {
                    e
                }
            })?;
        }
        self.norm(tape, h, p, "norm")
    }

    /// Per-patch class logits `[num_patches, C]`.
    pub fn seg_decode(&self, tape: &mut Tape, z: Var, p: &BoundParams) -> Result<Var> {
        if self.cfg.task != Task::Segmentation {
            return Err(Error::InvalidArgument(
                "seg_decode called on a classification model".into(),
            ));
        }
        self.linear(tape, z, p, "head")
    }

    /// Mean-pooled class logits `[C]`.
    pub fn clf_head(&self, tape: &mut Tape, z: Var, p: &BoundParams) -> Result<Var> {
        let logits = self.clf_logits(tape, z, p)?;
        tape.reshape(logits, &[self.cfg.num_classes])
    }

    fn clf_logits(&self, tape: &mut Tape, z: Var, p: &BoundParams) -> Result<Var> {
        if self.cfg.task != Task::Classification {
            return Err(Error::InvalidArgument(
                "clf_head called on a segmentation model".into(),
            ));
        }
        let pool = tape.constant(self.mean_pool.clone());
        let pooled = tape.matmul(pool, z)?;
        self.linear(tape, pooled, p, "head")
    }

    /// Task logits as `[label_count, C]` rows, ready for cross-entropy.
    pub fn task_logits(&self, tape: &mut Tape, z: Var, p: &BoundParams) -> Result<Var> {
        match self.cfg.task {
            Task::Segmentation => self.seg_decode(tape, z, p),
            Task::Classification => self.clf_logits(tape, z, p),
        }
    }

    /// Reconstructed image `[C, H, W]` from a per-token linear projection.
    pub fn rec_decode(&self, tape: &mut Tape, z: Var, p: &BoundParams) -> Result<Var> {
        let rows = self.linear(tape, z, p, "rec_head")?;
        tape.gather(rows, &self.unpatchify, &self.cfg.image_shape())
    }

    /// Masked student pass through encoder and both decoders.
    pub fn student_pass(
        &self,
        tape: &mut Tape,
        image: Var,
        mask: &PatchMask,
        p: &BoundParams,
    ) -> Result<StudentPass> {
        let token = p.get("mask_token")?;
        let masked_input = self.apply_mask(tape, image, mask, token)?;
        let features = self.encode(tape, masked_input, p)?;
        let logits = self.task_logits(tape, features, p)?;
        let reconstruction = self.rec_decode(tape, features, p)?;
        Ok(StudentPass {
            masked_input,
            features,
            logits,
            reconstruction,
        })
    }

    /// Task logits on an unmasked image, `[label_count, C]`.
    pub fn predict(&self, params: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let x = self.image(&mut tape, image)?;
        let z = self.encode(&mut tape, x, &p)?;
        let logits = self.task_logits(&mut tape, z, &p)?;
        Ok(tape.value(logits).clone())
    }

    pub fn predict_labels(&self, params: &ParamStore, image: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict(params, image)?))
    }
}
