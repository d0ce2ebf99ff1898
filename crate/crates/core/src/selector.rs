//! Multi-scale adaptive feature selection. At each block scale the
//! highest-scoring blocks go through linear attention and the rest through
//! a per-token inverted bottleneck; per-scale results are fused with split
//! attention.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Conv2d, ConvSpec, Init, Linear, ParamStore, Scope, Tensor, Var};

pub const DEFAULT_SCALES: [usize; 2] = [4, 8];
pub const DEFAULT_RETENTION: f64 = 0.3;
pub const IB_EXPANSION: usize = 4;
/// Added to the linear-attention normalizer so that a feature map that
/// underflows to zero yields 0 instead of 0/0. Vanishes against any normal value.
pub const ATTENTION_EPS: f64 = f64::MIN_POSITIVE;

/// Partition of an `H×W` plane into `S×S` windows, indexed row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGrid {
    pub scale: usize,
    pub h: usize,
    pub w: usize,
}

impl BlockGrid {
    pub fn new(scale: usize, h: usize, w: usize) -> Result<Self> {
        if !scale.is_power_of_two() || !h.is_multiple_of(scale) || !w.is_multiple_of(scale) {
            return Err(Error::invalid(
                "BlockGrid",
                format!("scale {scale} must be a power of two dividing {h}×{w}"),
            ));
        }
        Ok(BlockGrid { scale, h, w })
    }

    pub fn rows(&self) -> usize {
        self.h / self.scale
    }

    pub fn cols(&self) -> usize {
        self.w / self.scale
    }

    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block_of(&self, row: usize, col: usize) -> usize {
        (row / self.scale) * self.cols() + col / self.scale
    }

    /// Pixel offsets (`row * W + col`) of block `b` in raster order.
    pub fn pixels(&self, b: usize) -> impl Iterator<Item = usize> + '_ {
        let (br, bc) = (b / self.cols(), b % self.cols());
        let s = self.scale;
        (0..s * s).map(move |p| (br * s + p / s) * self.w + bc * s + p % s)
    }

    /// Per-block count of pixels with a positive eligibility value.
    pub fn coverage(&self, eligibility: &Tensor) -> Result<Vec<usize>> {
        if eligibility.shape() != [self.h, self.w] {
            return Err(Error::shape(
                "block_coverage",
                format!("mask {:?} for a {}×{} grid", eligibility.shape(), self.h, self.w),
            ));
        }
        let m = eligibility.data();
        Ok((0..self.len())
            .map(|b| self.pixels(b).filter(|&p| m[p] > 0.0).count())
            .collect())
    }

    /// Expands one value per block to an `H×W` map.
    pub fn materialize(&self, per_block: impl Fn(usize) -> f64) -> Tensor {
        Tensor::from_fn(&[self.h, self.w], |ix| per_block(self.block_of(ix[0], ix[1])))
    }
}

/// Outcome of top-k block selection at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMask {
    pub grid: BlockGrid,
    pub block_mask: Vec<bool>,
    pub retained_count: usize,
    pub eligible_count: usize,
}

impl SelectionMask {
    pub fn pixel_mask(&self) -> Tensor {
        self.grid.materialize(|b| if self.block_mask[b] { 1.0 } else { 0.0 })
    }

    pub fn selected_blocks(&self) -> Vec<usize> {
        (0..self.block_mask.len()).filter(|&b| self.block_mask[b]).collect()
    }
}

/// `ceil(k * n)` with a tolerance so that exact products are not rounded up.
pub fn retained_for(k: f64, n: usize) -> usize {
    ((k * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Keeps the `ceil(k * n_eligible)` best finite scores; ties go to the lower index.
pub fn topk_select(grid: BlockGrid, scores: &[f64], k: f64) -> Result<SelectionMask> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::invalid("topk_select", format!("retention {k} outside (0, 1]")));
    }
    if scores.len() != grid.len() {
        return Err(Error::shape(
            "topk_select",
            format!("{} scores for {} blocks", scores.len(), grid.len()),
        ));
    }
    let mut eligible: Vec<usize> = (0..scores.len()).filter(|&b| scores[b] > f64::NEG_INFINITY).collect();
    if eligible.is_empty() {
        return Err(Error::invalid("topk_select", "no eligible blocks"));
    }
    let n = eligible.len();
    let keep = retained_for(k, n).max(1);
    eligible.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut block_mask = vec![false; scores.len()];
    for &b in &eligible[..keep] {
        block_mask[b] = true;
    }
    Ok(SelectionMask {
        grid,
        block_mask,
        retained_count: keep,
        eligible_count: n,
    })
}

/// Removes the discarded blocks of `selection` from `mask_initial`, clamped to `[0, 1]`.
pub fn propagate_mask(mask_initial: &Tensor, selection: &SelectionMask) -> Result<Tensor> {
    let discarded = selection
        .grid
        .materialize(|b| if selection.block_mask[b] { 0.0 } else { 1.0 });
    mask_initial.zip_map(&discarded, |m, d| (m - d).clamp(0.0, 1.0))
}

/// Flat indices `c * H * W + p` for each listed pixel `p`, token-major.
fn token_index(pixels: &[usize], channels: usize, hw: usize) -> Rc<[usize]> {
    pixels
        .iter()
        .flat_map(|&p| (0..channels).map(move |c| c * hw + p))
        .collect()
}

/// Non-causal linear attention over a token set with a gated residual.
#[derive(Debug, Clone)]
pub struct LinearAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub gate: Linear,
}

impl LinearAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let lin = |store: &mut ParamStore, n: &str, gain: f64, rng: &mut R| {
            Linear::new(
                store,
                &format!("{name}.{n}"),
                channels,
                channels,
                true,
                Init::Scaled(gain),
                rng,
            )
        };
        LinearAttention {
            query: lin(store, "query", 1.0, rng),
            key: lin(store, "key", 1.0, rng),
            value: lin(store, "value", 1.0, rng),
            gate: lin(store, "gate", 0.5, rng),
        }
    }

    /// Attention term alone, `T×C`.
    pub fn attend<'t>(&self, s: Scope<'t, '_>, tokens: Var<'t>) -> Result<Var<'t>> {
        let q = self.query.forward(s, tokens)?.elu_plus_one();
        let k = self.key.forward(s, tokens)?.elu_plus_one();
        let v = self.value.forward(s, tokens)?;
        let kt = k.permute(&[1, 0])?;
        let num = q.matmul(kt.matmul(v)?)?;
        let den = q
            .matmul(k.sum_axis(0, true)?.permute(&[1, 0])?)?
            .add_scalar(ATTENTION_EPS);
        num.div(den)
    }

    /// `tokens + weight * gate(tokens) * attend(tokens)`; `weight` is `T×1` or absent.
    pub fn forward<'t>(&self, s: Scope<'t, '_>, tokens: Var<'t>, weight: Option<Var<'t>>) -> Result<Var<'t>> {
        if tokens.shape().first().copied().unwrap_or(0) == 0 {
            return Err(Error::invalid("mlla_enhance", "empty token set"));
        }
        let mut update = self.gate.forward(s, tokens)?.silu().mul(self.attend(s, tokens)?)?;
        if let Some(w) = weight {
            update = update.mul(w)?;
        }
        tokens.add(update)
    }
}

/// Per-token inverted bottleneck with residual.
#[derive(Debug, Clone)]
pub struct InvertedBottleneck {
    pub expand: Linear,
    pub project: Linear,
}

impl InvertedBottleneck {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let hidden = IB_EXPANSION * channels;
        InvertedBottleneck {
            expand: Linear::new(
                store,
                &format!("{name}.expand"),
                channels,
                hidden,
                true,
                Init::Scaled(1.0),
                rng,
            ),
            project: Linear::new(
                store,
                &format!("{name}.project"),
                hidden,
                channels,
                true,
                Init::Scaled(0.2),
                rng,
            ),
        }
    }

    pub fn forward<'t>(&self, s: Scope<'t, '_>, tokens: Var<'t>) -> Result<Var<'t>> {
        if tokens.shape().first().copied().unwrap_or(0) == 0 {
            return Ok(tokens);
        }
        let hidden = self.expand.forward(s, tokens)?.silu();
        tokens.add(self.project.forward(s, hidden)?)
    }
}

/// Softmax-over-scales channel weighting of per-scale outputs.
#[derive(Debug, Clone)]
pub struct SplitAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SplitAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let hidden = (channels / 2).max(1);
        SplitAttention {
            fc1: Linear::new(
                store,
                &format!("{name}.fc1"),
                channels,
                hidden,
                true,
                Init::Scaled(1.0),
                rng,
            ),
            fc2: Linear::new(
                store,
                &format!("{name}.fc2"),
                hidden,
                channels,
                true,
                Init::Scaled(1.0),
                rng,
            ),
        }
    }

    /// Per-channel weights, `n_scales×C`, each column summing to one.
    pub fn weights<'t>(&self, s: Scope<'t, '_>, outputs: &[Var<'t>]) -> Result<Var<'t>> {
        let mut logits = Vec::with_capacity(outputs.len());
        for u in outputs {
            let c = u.shape()[0];
            let pooled = u.mean_axis(2, false)?.mean_axis(1, false)?.reshape(&[1, c])?;
            logits.push(self.fc2.forward(s, self.fc1.forward(s, pooled)?.silu())?);
        }
        Var::concat(&logits, 0)?.softmax(0)
    }

    pub fn forward<'t>(&self, s: Scope<'t, '_>, outputs: &[Var<'t>]) -> Result<(Var<'t>, Var<'t>)> {
        let first = *outputs
            .first()
            .ok_or_else(|| Error::invalid("split_attention", "no scale outputs"))?;
        let c = first.shape()[0];
        let weights = self.weights(s, outputs)?;
        let mut acc: Option<Var<'t>> = None;
        for (i, u) in outputs.iter().enumerate() {
            let w = weights.narrow(0, i, 1)?.reshape(&[c, 1, 1])?;
            let term = w.mul(*u)?;
            acc = Some(match acc {
                Some(a) => a.add(term)?,
                None => term,
            });
        }
        Ok((acc.expect("at least one scale"), weights))
    }
}

/// Learned pieces of one scale.
#[derive(Debug, Clone)]
pub struct ScaleStage {
    pub scale: usize,
    pub scorer: Linear,
    pub attention: LinearAttention,
    pub bottleneck: InvertedBottleneck,
    /// 3×3 conv over `concat[enhanced, recovered]`, `2C -> C`.
    pub aggregator: Conv2d,
}

/// Result of one scale: the fused map plus the selection bookkeeping.
#[derive(Debug, Clone)]
pub struct ScaleResult<'t> {
    pub output: Var<'t>,
    pub enhanced: Var<'t>,
    pub recovered: Var<'t>,
    pub eligibility: Tensor,
    pub selection: Option<SelectionMask>,
}

impl ScaleStage {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        scale: usize,
        rng: &mut R,
    ) -> Self {
        let c = channels;
        let aggregator = Conv2d::new(
            store,
            &format!("{name}.aggregator"),
            2 * c,
            c,
            3,
            ConvSpec::same(3),
            true,
            Init::Scaled(0.05),
            rng,
        );
        let w = store.tensor_mut(aggregator.weight);
        for o in 0..c {
            for half in [o, c + o] {
                let v = w.at(&[o, half, 1, 1]);
                w.set(&[o, half, 1, 1], v + 1.0);
            }
        }
        ScaleStage {
            scale,
            scorer: Linear::new(store, &format!("{name}.scorer"), c, 1, true, Init::Scaled(1.0), rng),
            attention: LinearAttention::new(store, &format!("{name}.mlla"), c, rng),
            bottleneck: InvertedBottleneck::new(store, &format!("{name}.ib"), c, rng),
            aggregator,
        }
    }

    /// Differentiable block scores (`n_blocks×1`) and the plain copy with
    /// ineligible blocks set to `-inf`.
    pub fn score_blocks<'t>(
        &self,
        s: Scope<'t, '_>,
        feature: Var<'t>,
        eligibility: &Tensor,
    ) -> Result<(Var<'t>, Vec<f64>)> {
        let shape = feature.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let grid = BlockGrid::new(self.scale, h, w)?;
        let coverage = grid.coverage(eligibility)?;
        let area = self.scale * self.scale;
        let index: Rc<[usize]> = (0..c)
            .flat_map(|ch| {
                (0..grid.len()).flat_map(move |b| grid.pixels(b).map(move |p| ch * h * w + p).collect::<Vec<_>>())
            })
            .collect();
        let pooled = feature
            .gather(index, &[c, grid.len(), area])?
            .mean_axis(2, false)?
            .permute(&[1, 0])?;
        let scores = self.scorer.forward(s, pooled)?;
        let plain = scores
            .value()
            .data()
            .iter()
            .zip(&coverage)
            .map(|(&v, &cov)| if cov > 0 { v } else { f64::NEG_INFINITY })
            .collect();
        Ok((scores, plain))
    }

    pub fn forward<'t>(
        &self,
        s: Scope<'t, '_>,
        feature: Var<'t>,
        eligibility: &Tensor,
        k: f64,
    ) -> Result<ScaleResult<'t>> {
        let shape = feature.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let grid = BlockGrid::new(self.scale, h, w)?;
        let (scores, plain) = self.score_blocks(s, feature, eligibility)?;
        let selection = match topk_select(grid, &plain, k) {
            Ok(sel) => sel,
            Err(_) => {
                return Ok(ScaleResult {
                    output: feature,
                    enhanced: s.constant(Tensor::zeros(&shape)),
                    recovered: feature,
                    eligibility: eligibility.clone(),
                    selection: None,
                })
            }
        };
        let mut chosen = Vec::new();
        let mut chosen_blocks = Vec::new();
        let mut rest = Vec::new();
        for p in 0..h * w {
            let b = grid.block_of(p / w, p % w);
            if selection.block_mask[b] {
                chosen.push(p);
                chosen_blocks.push(b);
            } else {
                rest.push(p);
            }
        }
        let hw = h * w;
        let full = [c, h, w];

        let sel_index = token_index(&chosen, c, hw);
        let tokens = feature.gather(sel_index.clone(), &[chosen.len(), c])?;
        // Routing weight sigmoid(score) lets the scorer receive gradient.
        let weight = scores.sigmoid().gather(chosen_blocks.into(), &[chosen.len(), 1])?;
        let enhanced_tokens = self.attention.forward(s, tokens, Some(weight))?;
        let enhanced = enhanced_tokens.scatter(sel_index, &full)?;

        let recovered = if rest.is_empty() {
            s.constant(Tensor::zeros(&full))
        } else {
            let rest_index = token_index(&rest, c, hw);
            let rest_tokens = feature.gather(rest_index.clone(), &[rest.len(), c])?;
            self.bottleneck.forward(s, rest_tokens)?.scatter(rest_index, &full)?
        };
        let output = self.aggregator.forward(s, Var::concat(&[enhanced, recovered], 0)?)?;
        Ok(ScaleResult {
            output,
            enhanced,
            recovered,
            eligibility: eligibility.clone(),
            selection: Some(selection),
        })
    }
}

/// Everything `AdaptiveSelector::forward` produces.
#[derive(Debug, Clone)]
pub struct SelectorOutput<'t> {
    pub output: Var<'t>,
    pub scales: Vec<ScaleResult<'t>>,
    /// `n_scales×C` split-attention weights.
    pub weights: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct AdaptiveSelector {
    pub stages: Vec<ScaleStage>,
    pub split: SplitAttention,
    pub retention: f64,
    channels: usize,
}

impl AdaptiveSelector {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        scales: &[usize],
        retention: f64,
        rng: &mut R,
    ) -> Result<Self> {
        validate_scales(scales)?;
        if !(retention > 0.0 && retention <= 1.0) {
            return Err(Error::Config(format!("retention {retention} outside (0, 1]")));
        }
        let stages = scales
            .iter()
            .map(|&sc| ScaleStage::new(store, &format!("{name}.s{sc}"), channels, sc, rng))
            .collect();
        Ok(AdaptiveSelector {
            stages,
            split: SplitAttention::new(store, &format!("{name}.split"), channels, rng),
            retention,
            channels,
        })
    }

    pub fn scales(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.scale).collect()
    }

    pub fn forward<'t>(&self, s: Scope<'t, '_>, feature: Var<'t>) -> Result<SelectorOutput<'t>> {
        let shape = feature.shape();
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(Error::shape(
                "adpsel_forward",
                format!("expected {}×H×W, got {:?}", self.channels, shape),
            ));
        }
        let mut eligibility = Tensor::ones(&[shape[1], shape[2]]);
        let mut results = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let r = stage.forward(s, feature, &eligibility, self.retention)?;
            if let Some(sel) = &r.selection {
                eligibility = propagate_mask(&eligibility, sel)?;
            }
            results.push(r);
        }
        let outputs: Vec<_> = results.iter().map(|r| r.output).collect();
        let (output, weights) = self.split.forward(s, &outputs)?;
        Ok(SelectorOutput {
            output,
            scales: results,
            weights,
        })
    }
}

/// Scales must be distinct powers of two in increasing order.
pub fn validate_scales(scales: &[usize]) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::Config("at least one block scale is required".into()));
    }
    for (i, &sc) in scales.iter().enumerate() {
        if !sc.is_power_of_two() {
            return Err(Error::Config(format!("scale {sc} is not a power of two")));
        }
        if i > 0 && sc <= scales[i - 1] {
            return Err(Error::Config(format!(
                "scales {:?} must increase fine to coarse",
                scales
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, ParamId, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(23)
    }

    fn pin(store: &mut ParamStore, id: ParamId, f: impl Fn(&[usize]) -> f64) {
        let shape = store.tensor(id).shape().to_vec();
        store.set(id, Tensor::from_fn(&shape, f)).unwrap();
    }

    fn zero_linear(store: &mut ParamStore, l: &Linear) {
        pin(store, l.weight, |_| 0.0);
        if let Some(b) = l.bias {
            pin(store, b, |_| 0.0);
        }
    }

    #[test]
    fn topk_examples() {
        let g = BlockGrid::new(1, 2, 2).unwrap();
        let sel = topk_select(g, &[0.9, 0.1, 0.5, 0.7], 0.5).unwrap();
        assert_eq!(sel.selected_blocks(), vec![0, 3]);
        let sel = topk_select(g, &[0.9, 0.1, 0.5, 0.7], 1.0).unwrap();
        assert_eq!(sel.selected_blocks(), vec![0, 1, 2, 3]);
        let sel = topk_select(g, &[0.2; 4], 0.25).unwrap();
        assert_eq!(sel.selected_blocks(), vec![0]);
        let inf = f64::NEG_INFINITY;
        let sel = topk_select(g, &[inf, 0.1, inf, 0.0], 1.0).unwrap();
        assert_eq!(sel.selected_blocks(), vec![1, 3]);
        assert!(topk_select(g, &[inf; 4], 1.0).is_err());
        assert!(topk_select(g, &[0.0; 4], 0.0).is_err());
    }

    #[test]
    fn retained_count_is_exact_ceiling() {
        assert_eq!(retained_for(0.3, 10), 3);
        assert_eq!(retained_for(0.3, 11), 4);
        assert_eq!(retained_for(0.1, 30), 3);
        assert_eq!(retained_for(1.0, 7), 7);
    }

    #[test]
    fn propagate_mask_cases() {
        let g = BlockGrid::new(2, 4, 4).unwrap();
        let ones = Tensor::ones(&[4, 4]);
        let all = topk_select(g, &[1.0, 2.0, 3.0, 4.0], 1.0).unwrap();
        assert_eq!(propagate_mask(&ones, &all).unwrap(), ones);
        let half = topk_select(g, &[1.0, 2.0, 3.0, 4.0], 0.5).unwrap();
        assert_eq!(propagate_mask(&ones, &half).unwrap(), half.pixel_mask());
        let none = SelectionMask {
            block_mask: vec![false; 4],
            ..half.clone()
        };
        assert!(propagate_mask(&ones, &none).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn scores_follow_block_means() {
        let mut store = ParamStore::new();
        let stage = ScaleStage::new(&mut store, "st", 3, 2, &mut rng());
        pin(&mut store, stage.scorer.weight, |ix| if ix[0] == 0 { 1.0 } else { 0.0 });
        pin(&mut store, stage.scorer.bias.unwrap(), |_| 0.0);
        let x = Tensor::randn(&[3, 4, 6], 1.0, &mut rng());
        let mut elig = Tensor::ones(&[4, 6]);
        for p in [0, 1, 6, 7] {
            elig.data_mut()[p] = 0.0;
        }
        let tape = Tape::new();
        let s = Scope::new(&tape, &store);
        let (_, plain) = stage.score_blocks(s, s.constant(x.clone()), &elig).unwrap();
        assert_eq!(plain[0], f64::NEG_INFINITY);
        let g = BlockGrid::new(2, 4, 6).unwrap();
        for b in 1..g.len() {
            let mean = g.pixels(b).map(|p| x.data()[p]).sum::<f64>() / 4.0;
            assert!((plain[b] - mean).abs() < 1e-12);
        }
        let same = Tensor::ones(&[3, 4, 6]);
        let (_, plain) = stage.score_blocks(s, s.constant(same), &Tensor::ones(&[4, 6])).unwrap();
        assert!(plain.iter().all(|&v| v == plain[0]));
    }

    #[test]
    fn attention_single_and_two_token_cases() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let att = LinearAttention::new(&mut store, "a", 3, &mut r);
        let tape = Tape::new();
        let s = Scope::new(&tape, &store);
        let one = Tensor::randn(&[1, 3], 1.0, &mut r);
        let x = s.constant(one.clone());
        let v = att.value.forward(s, x).unwrap().value();
        assert!(att.attend(s, x).unwrap().value().max_abs_diff(&v) < 1e-12);
        let same = s.constant(Tensor::new(&[3, 3], one.data().repeat(3)).unwrap());
        let out = att.forward(s, same, None).unwrap().value();
        for t in 1..3 {
            assert_eq!(out.data()[t * 3..t * 3 + 3], out.data()[..3]);
        }
        assert!(att.forward(s, s.constant(Tensor::zeros(&[0, 3])), None).is_err());

        zero_linear(&mut store, &att.query);
        zero_linear(&mut store, &att.key);
        pin(
            &mut store,
            att.value.weight,
            |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 },
        );
        pin(&mut store, att.value.bias.unwrap(), |_| 0.0);
        let two = Tensor::randn(&[2, 3], 1.0, &mut r);
        let tape = Tape::new();
        let s = Scope::new(&tape, &store);
        let a = att.attend(s, s.constant(two.clone())).unwrap().value();
        for t in 0..2 {
            for c in 0..3 {
                let mean = 0.5 * (two.at(&[0, c]) + two.at(&[1, c]));
                assert!((a.at(&[t, c]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bottleneck_is_pointwise() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let ib = InvertedBottleneck::new(&mut store, "ib", 3, &mut r);
        let x = Tensor::randn(&[4, 3], 1.0, &mut r);
        let tape = Tape::new();
        let s = Scope::new(&tape, &store);
        let y = ib.forward(s, s.constant(x.clone())).unwrap().value();
        let perm = [2, 0, 3, 1];
        let px: Vec<f64> = perm.iter().flat_map(|&t| x.data()[t * 3..t * 3 + 3].to_vec()).collect();
        let py = ib
            .forward(s, s.constant(Tensor::new(&[4, 3], px).unwrap()))
            .unwrap()
            .value();
        for (i, &t) in perm.iter().enumerate() {
            assert_eq!(py.data()[i * 3..i * 3 + 3], y.data()[t * 3..t * 3 + 3]);
        }
        let empty = ib.forward(s, s.constant(Tensor::zeros(&[0, 3]))).unwrap();
        assert_eq!(empty.shape(), vec![0, 3]);
        zero_linear(&mut store, &ib.project);
        let tape = Tape::new();
        let s = Scope::new(&tape, &store);
        assert_eq!(*ib.forward(s, s.constant(x.clone())).unwrap().value(), x);
    }

    fn pin_passthrough(store: &mut ParamStore, sel: &AdaptiveSelector) {
        let c = sel.channels;
        for st in &sel.stages {
            zero_linear(store, &st.attention.gate);
            zero_linear(store, &st.bottleneck.project);
            pin(store, st.aggregator.weight, |ix| {
                if ix[2] == 1 && ix[3] == 1 && (ix[1] == ix[0] || ix[1] == ix[0] + c) {
                    1.0
                } else {
                    0.0
                }
            });
            pin(store, st.aggregator.bias.unwrap(), |_| 0.0);
        }
    }

    #[test]
    fn single_scale_passthrough() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let sel = AdaptiveSelector::new(&mut store, "as", 3, &[2], 1.0, &mut r).unwrap();
        pin_passthrough(&mut store, &sel);
        let x = Tensor::randn(&[3, 4, 4], 1.0, &mut r);
        let tape = Tape::new();
        let s = Scope::new(&tape, &store);
        let out = sel.forward(s, s.constant(x.clone())).unwrap();
        assert_eq!(*out.output.value(), x);
        assert!(out.scales[0].recovered.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equal_scale_outputs_pass_through_split_attention() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let split = SplitAttention::new(&mut store, "sp", 4, &mut r);
        let u = Tensor::randn(&[4, 3, 3], 1.0, &mut r);
        let tape = Tape::new();
        let s = Scope::new(&tape, &store);
        let (out, w) = split
            .forward(s, &[s.constant(u.clone()), s.constant(u.clone())])
            .unwrap();
        assert!(out.value().max_abs_diff(&u) < 1e-12);
        let w = w.value();
        for c in 0..4 {
            assert!((w.at(&[0, c]) + w.at(&[1, c]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn partition_and_mask_threading() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let sel = AdaptiveSelector::new(&mut store, "as", 3, &[2, 4], 0.3, &mut r).unwrap();
        let x = Tensor::randn(&[3, 8, 8], 1.0, &mut r);
        let tape = Tape::new();
        let s = Scope::new(&tape, &store);
        let out = sel.forward(s, s.constant(x)).unwrap();
        let first = out.scales[0].selection.as_ref().unwrap();
        assert_eq!(first.retained_count, 5);
        let second = out.scales[1].selection.as_ref().unwrap();
        assert!(second.eligible_count <= 4 && second.eligible_count >= 1);
        assert_eq!(second.retained_count, retained_for(0.3, second.eligible_count).max(1));
        let (e0, e1) = (&out.scales[0].eligibility, &out.scales[1].eligibility);
        assert!(e0.data().iter().zip(e1.data()).all(|(a, b)| b <= a));
    }

    #[test]
    fn rejects_bad_scales() {
        let mut store = ParamStore::new();
        let mut r = rng();
        assert!(AdaptiveSelector::new(&mut store, "a", 3, &[3], 0.3, &mut r).is_err());
        assert!(AdaptiveSelector::new(&mut store, "b", 3, &[8, 4], 0.3, &mut r).is_err());
        assert!(AdaptiveSelector::new(&mut store, "c", 3, &[4], 0.0, &mut r).is_err());
        let sel = AdaptiveSelector::new(&mut store, "d", 3, &[4], 0.5, &mut r).unwrap();
        let tape = Tape::new();
        let s = Scope::new(&tape, &store);
        assert!(sel.forward(s, s.constant(Tensor::zeros(&[3, 6, 6]))).is_err());
    }

    #[test]
    fn selector_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let sel = AdaptiveSelector::new(&mut store, "as", 2, &[2, 4], 0.3, &mut r).unwrap();
        let x = Tensor::randn(&[2, 8, 8], 1.0, &mut r);
        let err = grad_check(
            |tape, x| {
                let s = Scope::new(tape, &store);
                Ok(sel.forward(s, x)?.output.square().sum())
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
