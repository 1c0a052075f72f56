use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::cache::KVCache;
use crate::model::mask::SkipMask;
use crate::model::spec::ModelSpec;
use crate::model::{substream, ForwardOutput};

/// Row-major matrix with fixed-order matvec, so every forward pass performs
/// bit-identical arithmetic regardless of how tokens are chunked.
#[derive(Debug, Clone)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    /// Uniform init on [-sqrt(3/cols), sqrt(3/cols)]: variance 1/fan_in.
    pub(crate) fn seeded(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Self {
        let bound = (3.0 / cols as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound) as f32)
            .collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut acc = 0.0f32;
                for (w, v) in row.iter().zip(x) {
                    acc += w * v;
                }
                acc
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct AttnWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
}

#[derive(Debug, Clone)]
struct MlpWeights {
    w_up: Matrix,
    w_down: Matrix,
}

/// Small decoder-only transformer: single-head pre-norm blocks, sinusoidal
/// positions, untied output head. Weights are untrained; the model exists to
/// exercise decoding machinery, not to say anything.
#[derive(Debug, Clone)]
pub struct TinyTransformer {
    spec: ModelSpec,
    embedding: Matrix,
    head: Matrix,
    attn: Vec<AttnWeights>,
    mlp: Vec<MlpWeights>,
}

fn rms_norm(x: &[f32]) -> Vec<f32> {
    let mut sq = 0.0f32;
    for v in x {
        sq += v * v;
    }
    let inv = 1.0 / (sq / x.len() as f32 + 1e-6).sqrt();
    x.iter().map(|v| v * inv).collect()
}

impl TinyTransformer {
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.hidden_dim;
        let v = spec.vocab_size;
        let embedding = Matrix::seeded(&mut substream(spec.seed, 1), v, d);
        let head = Matrix::seeded(&mut substream(spec.seed, 2), v, d);
        let mut attn = Vec::with_capacity(spec.num_blocks);
        let mut mlp = Vec::with_capacity(spec.num_blocks);
        for block in 0..spec.num_blocks {
            let mut rng_a = substream(spec.seed, 100 + 2 * block as u64);
            attn.push(AttnWeights {
                wq: Matrix::seeded(&mut rng_a, d, d),
                wk: Matrix::seeded(&mut rng_a, d, d),
                wv: Matrix::seeded(&mut rng_a, d, d),
                wo: Matrix::seeded(&mut rng_a, d, d),
            });
            let mut rng_m = substream(spec.seed, 100 + 2 * block as u64 + 1);
            mlp.push(MlpWeights {
                w_up: Matrix::seeded(&mut rng_m, 2 * d, d),
                w_down: Matrix::seeded(&mut rng_m, d, 2 * d),
            });
        }
        Ok(Self {
            spec: spec.clone(),
            embedding,
            head,
            attn,
            mlp,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Test diagnostic: nudge every weight inside sublayer `i`. A skipped
    /// sublayer must be insensitive to this.
    pub fn perturb_sublayer(&mut self, i: usize, delta: f32) {
        let block = i / 2;
        let mats: Vec<&mut Matrix> = if i.is_multiple_of(2) {
            let w = &mut self.attn[block];
            vec![&mut w.wq, &mut w.wk, &mut w.wv, &mut w.wo]
        } else {
            let w = &mut self.mlp[block];
            vec![&mut w.w_up, &mut w.w_down]
        };
        for m in mats {
            for w in &mut m.data {
                *w += delta;
            }
        }
    }

    fn positional(&self, pos: usize) -> Vec<f32> {
        let d = self.spec.hidden_dim;
        let mut pe = vec![0.0f32; d];
        for i in 0..d / 2 {
            let freq = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[2 * i] = freq.sin() as f32;
            pe[2 * i + 1] = freq.cos() as f32;
        }
        pe
    }

    /// Process one token at the cache's current position. Pushes K/V for
    /// every block whose attention sublayer is live, then advances the cache.
    fn forward_one(
        &self,
        token: u32,
        mask: &SkipMask,
        cache: &mut KVCache,
    ) -> (Vec<f32>, Vec<f32>) {
        let pos = cache.len();
        let pe = self.positional(pos);
        let mut h: Vec<f32> = self
            .embedding
            .row(token as usize)
            .iter()
            .zip(&pe)
            .map(|(e, p)| e + p)
            .collect();

        for block in 0..self.spec.num_blocks {
            if !mask.is_skipped(2 * block) {
                let w = &self.attn[block];
                let x = rms_norm(&h);
                let q = w.wq.matvec(&x);
                let k = w.wk.matvec(&x);
                let v = w.wv.matvec(&x);
                cache.push(block, k, v);
                let ctx = cache.block(block);
                let scale = 1.0 / (self.spec.hidden_dim as f32).sqrt();
                let mut scores: Vec<f32> = ctx
                    .keys
                    .iter()
                    .map(|kj| {
                        let mut dot = 0.0f32;
                        for (a, b) in q.iter().zip(kj) {
                            dot += a * b;
                        }
                        dot * scale
                    })
                    .collect();
                let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0.0f32;
                for s in &mut scores {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let mut pooled = vec![0.0f32; self.spec.hidden_dim];
                for (s, vj) in scores.iter().zip(&ctx.values) {
                    let w = s / total;
                    for (acc, v) in pooled.iter_mut().zip(vj) {
                        *acc += w * v;
                    }
                }
                let out = w.wo.matvec(&pooled);
                for (hv, o) in h.iter_mut().zip(&out) {
                    *hv += o;
                }
            }
            if !mask.is_skipped(2 * block + 1) {
                let w = &self.mlp[block];
                let x = rms_norm(&h);
                let mut up = w.w_up.matvec(&x);
                for u in &mut up {
                    *u = u.max(0.0);
                }
                let down = w.w_down.matvec(&up);
                for (hv, d) in h.iter_mut().zip(&down) {
                    *hv += d;
                }
            }
        }
        cache.advance();
        let logits = self.head.matvec(&rms_norm(&h));
        // The residual stream itself, not its normalized image: with every
        // sublayer skipped this is exactly embedding + positional encoding.
        (logits, h)
    }

    pub fn forward(
        &self,
        tokens: &[u32],
        mask: &SkipMask,
        cache: &mut KVCache,
    ) -> Result<ForwardOutput> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("forward needs at least one token"));
        }
        if mask.len() != self.spec.num_sublayers() {
            return Err(Error::MaskLength {
                expected: self.spec.num_sublayers(),
                found: mask.len(),
            });
        }
        for &t in tokens {
            if t as usize >= self.spec.vocab_size {
                return Err(Error::InvalidSpec(format!(
                    "token {t} out of vocabulary (size {})",
                    self.spec.vocab_size
                )));
            }
        }
        cache.check_mask(mask)?;
        let mut logits = Vec::with_capacity(tokens.len());
        let mut last_hidden = Vec::new();
        for &t in tokens {
            let (l, h) = self.forward_one(t, mask, cache);
            logits.push(l);
            last_hidden = h;
        }
        Ok(ForwardOutput {
            logits,
            last_hidden,
        })
    }
}
