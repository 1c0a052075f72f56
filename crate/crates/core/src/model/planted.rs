use rand::Rng;

use crate::error::{Error, Result};
use crate::model::cache::KVCache;
use crate::model::mask::SkipMask;
use crate::model::spec::{Band, DomainLayout, ModelSpec, EOS_TOKEN};
use crate::model::tiny::Matrix;
use crate::model::{substream, ForwardOutput};

/// Test model with a known-optimal skip mask per domain.
///
/// The vocabulary splits into per-domain bands plus a shared band. Every
/// sublayer adds a fixed dense random shift to the hidden state; a sublayer
/// "gated" for a domain withholds its shift (exact identity) whenever the
/// current token lies in that domain's band or outside all domain bands.
/// Skipping exactly a domain's gated sublayers therefore reproduces the full
/// model bit for bit on that domain's text, while any mask that drops a
/// band-active sublayer leaves a deficit in the hidden state.
///
/// Two reserved hidden channels make that deficit legible to the decoding
/// head: channel 0 counts the applied band-active shifts (so it reads zero
/// exactly when nothing is missing) and channel 1 accumulates their costs,
/// attention-weighted the way the runtime prices sublayers. The full model
/// walks each band cyclically, one step per token; a deficient hidden state
/// diverges from that walk inside one contiguous stretch of each walk
/// period and proposes a shifted (wrong, still in-band) token there. The
/// stretch widens with the missing cost share, and because it is
/// contiguous the verifier's one bonus token per round cannot jump it: a
/// deficient draft has to crawl through the stretch one rejection at a
/// time, every period. Isolated wrong positions would not work — a single
/// recovered token lets the next round resume mid-window, so the penalty
/// would vanish into round-boundary luck. Acceptance therefore degrades
/// smoothly — and strictly — as a mask skips more of what the band needs,
/// instead of collapsing to a cliff or staying accidentally high.
///
/// The state is token-local: position never enters, which keeps the
/// construction exact under any chunking, and last-hidden vectors cluster
/// by domain because each band's tokens share a centroid.
#[derive(Debug, Clone)]
pub struct PlantedModel {
    spec: ModelSpec,
    layout: DomainLayout,
    /// gate_domain[i] = Some(d) if sublayer i is gated for domain d.
    gate_domain: Vec<Option<usize>>,
    base: Matrix,
    /// Row i = additive hidden shift of sublayer i (dense in channels 2..).
    shifts: Matrix,
    head: Matrix,
    /// (count, cost) of band-active sublayers per domain band.
    domain_profile: Vec<(f32, f32)>,
    /// Per domain, the seeded phase of the divergence stretch within the
    /// walk period, so the stretch does not sit at the same band offset in
    /// every domain.
    zone_offsets: Vec<u32>,
}

/// Relative sublayer costs: attention (even index) vs MLP (odd index),
/// matching the pricing the analytic objective applies at its default
/// attention/MLP ratio.
const ATTN_COST: f32 = 2.3;
const MLP_COST: f32 = 1.0;

/// Walk positions per divergence period. Deficient hidden states propose
/// wrong tokens on a contiguous stretch of each period, so any decode
/// longer than one period pays for the deficit no matter where it starts.
const ZONE_PERIOD: u32 = 14;

fn sublayer_cost(i: usize) -> f32 {
    if i.is_multiple_of(2) {
        ATTN_COST
    } else {
        MLP_COST
    }
}

fn band_len(layout: &DomainLayout, dom: usize) -> u32 {
    let range = layout.domain_range(dom);
    range.end - range.start
}

impl PlantedModel {
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let gates = spec
            .planted_gates
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec("planted backend requires planted_gates".into()))?;
        let layout = DomainLayout::new(spec.vocab_size, gates.len())?;
        let d = spec.hidden_dim;
        if d < 4 {
            return Err(Error::InvalidSpec(
                "planted backend needs hidden_dim >= 4 (two channels are reserved)".into(),
            ));
        }

        let mut gate_domain = vec![None; spec.num_sublayers()];
        for (&domain, sublayers) in gates {
            for &i in sublayers {
                if gate_domain[i].is_some() {
                    return Err(Error::InvalidSpec(format!(
                        "sublayer {i} gated for two domains"
                    )));
                }
                gate_domain[i] = Some(domain);
            }
        }

        let profile = |band: Band| -> (f32, f32) {
            let mut count = 0.0f32;
            let mut cost = 0.0f32;
            for (i, gate) in gate_domain.iter().enumerate() {
                let active = match gate {
                    None => true,
                    Some(g) => matches!(band, Band::Domain(b) if b != *g),
                };
                if active {
                    count += 1.0;
                    cost += sublayer_cost(i);
                }
            }
            (count, cost)
        };
        let domain_profile: Vec<(f32, f32)> = (0..layout.num_domains)
            .map(|dom| profile(Band::Domain(dom)))
            .collect();
        let outside_profile = profile(Band::Shared);

        let mut zone_rng = substream(spec.seed, 5);
        let zone_offsets: Vec<u32> = (0..layout.num_domains)
            .map(|dom| {
                let len = self::band_len(&layout, dom);
                zone_rng.random_range(0..ZONE_PERIOD.min(len))
            })
            .collect();

        // Group centroids: EOS, shared, then one per domain. Token vectors are
        // their group centroid plus small per-token noise, so hidden states
        // separate by domain with within-domain spread. Channels 0 and 1 are
        // primed with the negated active count/cost for the token's band; the
        // active shifts add those amounts back, so a complete forward pass
        // zeroes channel 0.
        let centroids = Matrix::seeded(&mut substream(spec.seed, 3), 2 + layout.num_domains, d);
        let noise = Matrix::seeded(&mut substream(spec.seed, 4), spec.vocab_size, d);
        let mut base = Matrix {
            rows: spec.vocab_size,
            cols: d,
            data: vec![0.0; spec.vocab_size * d],
        };
        for t in 0..spec.vocab_size {
            let band = layout.band_of(t as u32);
            let group = match band {
                Band::Eos => 0,
                Band::Shared | Band::Unassigned => 1,
                Band::Domain(dom) => 2 + dom,
            };
            let (count, cost) = match band {
                Band::Domain(dom) => domain_profile[dom],
                _ => outside_profile,
            };
            let row = &mut base.data[t * d..(t + 1) * d];
            row[0] = -count;
            row[1] = -cost;
            for (j, x) in row.iter_mut().enumerate().skip(2) {
                *x = centroids.row(group)[j] + 0.1 * noise.row(t)[j];
            }
        }

        let mut shifts = Matrix {
            rows: spec.num_sublayers(),
            cols: d,
            data: vec![0.0; spec.num_sublayers() * d],
        };
        for i in 0..spec.num_sublayers() {
            let dense = Matrix::seeded(&mut substream(spec.seed, 100 + i as u64), 1, d);
            let row = &mut shifts.data[i * d..(i + 1) * d];
            row[0] = 1.0;
            row[1] = sublayer_cost(i);
            for (j, x) in row.iter_mut().enumerate().skip(2) {
                *x = 0.25 * dense.row(0)[j];
            }
        }

        let head = Matrix::seeded(&mut substream(spec.seed, 2), spec.vocab_size, d);

        Ok(Self {
            spec: spec.clone(),
            layout,
            gate_domain,
            base,
            shifts,
            head,
            domain_profile,
            zone_offsets,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &DomainLayout {
        &self.layout
    }

    /// The mask that skips exactly the sublayers gated for `domain`.
    pub fn optimal_mask(&self, domain: usize) -> Result<SkipMask> {
        if domain >= self.layout.num_domains {
            return Err(Error::UnknownDomain(domain));
        }
        let indices: Vec<usize> = self
            .gate_domain
            .iter()
            .enumerate()
            .filter_map(|(i, g)| (*g == Some(domain)).then_some(i))
            .collect();
        SkipMask::from_indices(self.spec.num_sublayers(), &indices)
    }

    /// Test diagnostic: nudge sublayer `i`'s dense channels. A skipped
    /// sublayer must be insensitive to this. The two bookkeeping channels
    /// stay intact so the deficit accounting remains truthful.
    pub fn perturb_sublayer(&mut self, i: usize, delta: f32) {
        let d = self.spec.hidden_dim;
        for w in &mut self.shifts.data[i * d + 2..(i + 1) * d] {
            *w += delta;
        }
    }

    /// True if sublayer `i` computes on tokens of `band` in the unmasked model.
    fn active(&self, i: usize, band: Band) -> bool {
        match self.gate_domain[i] {
            None => true,
            Some(gated) => matches!(band, Band::Domain(d) if d != gated),
        }
    }

    fn hidden_for(&self, token: u32, mask: &SkipMask) -> Vec<f32> {
        let band = self.layout.band_of(token);
        let mut h: Vec<f32> = self.base.row(token as usize).to_vec();
        for i in 0..self.spec.num_sublayers() {
            if mask.is_skipped(i) || !self.active(i, band) {
                continue;
            }
            for (hv, s) in h.iter_mut().zip(self.shifts.row(i)) {
                *hv += s;
            }
        }
        h
    }

    /// Greedy continuation target encoded in the logits. The full model walks
    /// the band cyclically; a hidden state missing active shifts follows that
    /// walk except inside one contiguous divergence stretch per period,
    /// where it points at a shifted (always wrong, still in-band) token.
    /// Shared or terminal context resolves to EOS.
    fn target_token(&self, token: u32, h: &[f32]) -> u32 {
        let Band::Domain(dom) = self.layout.band_of(token) else {
            return EOS_TOKEN;
        };
        let range = self.layout.domain_range(dom);
        let len = range.end - range.start;
        let idx = token - range.start;
        let next = range.start + (idx + 1) % len;
        let missing = (-h[0]).round() as i64;
        if missing <= 0 {
            return next;
        }
        let (_, cost) = self.domain_profile[dom];
        let deficit = (-h[1]).max(0.0);
        let period = ZONE_PERIOD.min(len);
        // Contiguous stretch of walk positions that propose wrong tokens,
        // widening with the missing cost share. The floor of two keeps the
        // stretch wide enough that the verifier's bonus token can never
        // carry a draft across it in one round, so even the smallest
        // deficit forces a crawl once per period.
        let width =
            ((period as f32 * (deficit / cost).min(1.0)).ceil() + 1.0).min(period as f32) as u32;
        if (idx + self.zone_offsets[dom]) % period >= width {
            next
        } else {
            let shift = 1 + (missing - 1) as u32 % (len - 1);
            range.start + (idx + 1 + shift) % len
        }
    }

    fn logits_for(&self, token: u32, h: &[f32]) -> Vec<f32> {
        let mut logits = self.head.matvec(h);
        logits[self.target_token(token, h) as usize] += 1000.0;
        logits
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
            let h = self.hidden_for(t, mask);
            logits.push(self.logits_for(t, &h));
            cache.advance();
            last_hidden = h;
        }
        Ok(ForwardOutput {
            logits,
            last_hidden,
        })
    }
}
