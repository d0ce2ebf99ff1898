//! Dual-branch wavelet denoiser. A global branch runs four scans of the
//! subband tokens through selective recurrences; a local branch filters the
//! subbands with a nested wavelet convolution. The branch outputs are summed.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Conv2d, ConvSpec, Init, Linear, ParamId, ParamStore, Scope, Tensor, Var};
use crate::wavelet::{haar_iwt2d, haar_wt2d, subband_concat, subband_split, Band, SubbandSet};

pub const DEFAULT_STATE_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanKind {
    /// Whole bands in turn, HH, HL, LH, LL, each in raster order.
    Progressive,
    /// Raster over positions, emitting LL, LH, HL, HH at each.
    Interleaved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

const PROGRESSIVE_BANDS: [Band; 4] = [Band::HH, Band::HL, Band::LH, Band::LL];

fn band_slot(b: Band) -> usize {
    match b {
        Band::LL => 0,
        Band::LH => 1,
        Band::HL => 2,
        Band::HH => 3,
    }
}

/// A token ordering over the subbands of a `C×h×w` band set. Each token is
/// one `(band, row, col)` position carrying a `C`-vector.
#[derive(Debug, Clone)]
pub struct ScanOrder {
    pub kind: ScanKind,
    pub direction: Direction,
    channels: usize,
    h: usize,
    w: usize,
    tokens: Vec<(Band, usize, usize)>,
    index: Rc<[usize]>,
}

impl ScanOrder {
    pub fn new(kind: ScanKind, direction: Direction, channels: usize, h: usize, w: usize) -> Self {
        let mut tokens = Vec::with_capacity(4 * h * w);
        match kind {
            ScanKind::Progressive => {
                for b in PROGRESSIVE_BANDS {
                    for i in 0..h {
                        for j in 0..w {
                            tokens.push((b, i, j));
                        }
                    }
                }
            }
            ScanKind::Interleaved => {
                for i in 0..h {
                    for j in 0..w {
                        for b in Band::ALL {
                            tokens.push((b, i, j));
                        }
                    }
                }
            }
        }
        if direction == Direction::Reverse {
            tokens.reverse();
        }
        // Flat source offsets into the packed 4C×h×w layout, token-major.
        let mut index = Vec::with_capacity(tokens.len() * channels);
        for &(b, i, j) in &tokens {
            for c in 0..channels {
                index.push(((band_slot(b) * channels + c) * h + i) * w + j);
            }
        }
        ScanOrder {
            kind,
            direction,
            channels,
            h,
            w,
            tokens,
            index: index.into(),
        }
    }

    /// The four paths in aggregation order.
    pub fn paths(channels: usize, h: usize, w: usize) -> [ScanOrder; 4] {
        [
            ScanOrder::new(ScanKind::Progressive, Direction::Forward, channels, h, w),
            ScanOrder::new(ScanKind::Progressive, Direction::Reverse, channels, h, w),
            ScanOrder::new(ScanKind::Interleaved, Direction::Forward, channels, h, w),
            ScanOrder::new(ScanKind::Interleaved, Direction::Reverse, channels, h, w),
        ]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[(Band, usize, usize)] {
        &self.tokens
    }

    fn packed_shape(&self) -> [usize; 3] {
        [4 * self.channels, self.h, self.w]
    }

    fn check_packed(&self, shape: &[usize]) -> Result<()> {
        if shape != self.packed_shape() {
            return Err(Error::shape(
                "scan",
                format!("order built for {:?}, got {:?}", self.packed_shape(), shape),
            ));
        }
        Ok(())
    }

    /// Packed `4C×h×w` to the `L×C` token sequence.
    pub fn apply(&self, packed: &Tensor) -> Result<Tensor> {
        self.check_packed(packed.shape())?;
        let src = packed.data();
        let data = self.index.iter().map(|&i| src[i]).collect();
        Tensor::new(&[self.len(), self.channels], data)
    }

    /// `L×C` token sequence back to the packed layout.
    pub fn invert(&self, seq: &Tensor) -> Result<Tensor> {
        if seq.shape() != [self.len(), self.channels] {
            return Err(Error::shape(
                "inverse_scan",
                format!("expected {}×{}, got {:?}", self.len(), self.channels, seq.shape()),
            ));
        }
        let mut out = Tensor::zeros(&self.packed_shape());
        let od = out.data_mut();
        for (&i, &v) in self.index.iter().zip(seq.data()) {
            od[i] = v;
        }
        Ok(out)
    }

    pub fn scan_var<'t>(&self, packed: Var<'t>) -> Result<Var<'t>> {
        self.check_packed(&packed.shape())?;
        packed.gather(self.index.clone(), &[self.len(), self.channels])
    }

    pub fn unscan_var<'t>(&self, seq: Var<'t>) -> Result<Var<'t>> {
        if seq.shape() != [self.len(), self.channels] {
            return Err(Error::shape(
                "inverse_scan",
                format!("expected {}×{}, got {:?}", self.len(), self.channels, seq.shape()),
            ));
        }
        seq.scatter(self.index.clone(), &self.packed_shape())
    }
}

/// Tokens of one scan path paired with the order that produced them.
#[derive(Debug, Clone)]
pub struct ScanSequence<'t> {
    pub order: ScanOrder,
    pub values: Var<'t>,
}

impl<'t> ScanSequence<'t> {
    pub fn inverse(&self) -> Result<SubbandSet<'t>> {
        subband_split(self.order.unscan_var(self.values)?)
    }
}

fn scan_bands<'t>(bands: &SubbandSet<'t>, kind: ScanKind, direction: Direction) -> Result<ScanSequence<'t>> {
    let (c, h, w) = bands.dims();
    let order = ScanOrder::new(kind, direction, c, h, w);
    let values = order.scan_var(subband_concat(bands)?)?;
    Ok(ScanSequence { order, values })
}

pub fn progressive_scan<'t>(bands: &SubbandSet<'t>, direction: Direction) -> Result<ScanSequence<'t>> {
    scan_bands(bands, ScanKind::Progressive, direction)
}

pub fn interleaved_scan<'t>(bands: &SubbandSet<'t>, direction: Direction) -> Result<ScanSequence<'t>> {
    scan_bands(bands, ScanKind::Interleaved, direction)
}

/// Token-conditioned projections feeding the selective scan.
#[derive(Debug, Clone)]
pub struct SelectiveSsm {
    pub step: Linear,
    pub in_gate: Linear,
    pub out_gate: Linear,
    /// `decay = -exp(log_decay)`, shape `C×N`.
    pub log_decay: ParamId,
    pub skip: ParamId,
    pub state_dim: usize,
}

impl SelectiveSsm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        state_dim: usize,
        rng: &mut R,
    ) -> Self {
        let step = Linear::new(
            store,
            &format!("{name}.step"),
            channels,
            channels,
            true,
            Init::Scaled(0.1),
            rng,
        );
        // softplus(bias) = 0.05 at init
        let step_bias = (0.05f64.exp() - 1.0).ln();
        store
            .set(step.bias.expect("step bias"), Tensor::full(&[1, channels], step_bias))
            .expect("bias shape");
        let log_decay = Tensor::from_fn(&[channels, state_dim], |ix| ((ix[1] + 1) as f64).ln());
        SelectiveSsm {
            step,
            in_gate: Linear::new(
                store,
                &format!("{name}.in_gate"),
                channels,
                state_dim,
                true,
                Init::Scaled(0.5),
                rng,
            ),
            out_gate: Linear::new(
                store,
                &format!("{name}.out_gate"),
                channels,
                state_dim,
                true,
                Init::Scaled(0.5),
                rng,
            ),
            log_decay: store.add(format!("{name}.log_decay"), log_decay),
            skip: store.add(format!("{name}.skip"), Tensor::ones(&[channels])),
            state_dim,
        }
    }

    pub fn forward<'t>(&self, s: Scope<'t, '_>, seq: Var<'t>) -> Result<Var<'t>> {
        let shape = seq.shape();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::shape(
                "selective_ssm",
                format!("expected nonempty L×C, got {:?}", shape),
            ));
        }
        let step = self.step.forward(s, seq)?.softplus();
        let decay = s.param(self.log_decay).exp().neg();
        let b = self.in_gate.forward(s, seq)?;
        let c = self.out_gate.forward(s, seq)?;
        seq.selective_scan(step, decay, b, c, s.param(self.skip))
    }
}

/// Global (scan) and local (nested wavelet convolution) denoising branches.
#[derive(Debug, Clone)]
pub struct WaveletDenoiser {
    pub paths: [SelectiveSsm; 4],
    /// 1×1 map over the summed path outputs in packed subband layout.
    pub proj: Conv2d,
    /// Depthwise 3×3 on the inner `16C` decomposition.
    pub inner: Conv2d,
    /// Depthwise 3×3 on the packed `4C` subbands.
    pub outer: Conv2d,
    channels: usize,
}

impl WaveletDenoiser {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        state_dim: usize,
        rng: &mut R,
    ) -> Self {
        let c = channels;
        let paths = std::array::from_fn(|p| SelectiveSsm::new(store, &format!("{name}.ssm{p}"), c, state_dim, rng));
        let proj = Conv2d::new(
            store,
            &format!("{name}.proj"),
            4 * c,
            4 * c,
            1,
            ConvSpec::same(1),
            false,
            Init::Identity {
                scale: 0.25,
                noise: 0.01,
            },
            rng,
        );
        let dw = |store: &mut ParamStore, n: &str, ch: usize, rng: &mut R| {
            Conv2d::new(
                store,
                n,
                ch,
                ch,
                3,
                ConvSpec::depthwise(3, ch),
                true,
                Init::Scaled(0.1),
                rng,
            )
        };
        WaveletDenoiser {
            paths,
            proj,
            inner: dw(store, &format!("{name}.inner"), 16 * c, rng),
            outer: dw(store, &format!("{name}.outer"), 4 * c, rng),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn mamba_branch<'t>(&self, s: Scope<'t, '_>, bands: &SubbandSet<'t>) -> Result<Var<'t>> {
        let (c, h, w) = bands.dims();
        let packed = subband_concat(bands)?;
        let mut acc: Option<Var<'t>> = None;
        for (order, ssm) in ScanOrder::paths(c, h, w).iter().zip(&self.paths) {
            let y = ssm.forward(s, order.scan_var(packed)?)?;
            let back = order.unscan_var(y)?;
            acc = Some(match acc {
                Some(a) => a.add(back)?,
                None => back,
            });
        }
        let enhanced = self.proj.forward(s, acc.expect("four paths"))?;
        haar_iwt2d(&subband_split(enhanced)?)
    }

    pub fn conv_branch<'t>(&self, s: Scope<'t, '_>, bands: &SubbandSet<'t>) -> Result<Var<'t>> {
        let (_, h, w) = bands.dims();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "wavelet_conv_branch",
                format!("subbands are {h}×{w}; the nested transform needs even extents"),
            ));
        }
        let f_wt = subband_concat(bands)?;
        let inner = self.inner.forward(s, f_wt.haar_analysis()?)?.haar_synthesis()?;
        let skip = self.outer.forward(s, f_wt)?;
        inner.add(skip)?.haar_synthesis()
    }

    pub fn forward<'t>(&self, s: Scope<'t, '_>, feature: Var<'t>) -> Result<Var<'t>> {
        let shape = feature.shape();
        if shape.len() != 3 || !shape[1].is_multiple_of(4) || !shape[2].is_multiple_of(4) {
            return Err(Error::shape(
                "wtden_forward",
                format!("expected C×H×W with H, W divisible by 4, got {:?}", shape),
            ));
        }
        if shape[0] != self.channels {
            return Err(Error::shape(
                "wtden_forward",
                format!("feature has {} channels, denoiser expects {}", shape[0], self.channels),
            ));
        }
        let bands = haar_wt2d(feature)?;
        self.mamba_branch(s, &bands)?.add(self.conv_branch(s, &bands)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Tape};
    use crate::wavelet::haar_forward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn pin(store: &mut ParamStore, id: ParamId, f: impl Fn(&[usize]) -> f64) {
        let shape = store.tensor(id).shape().to_vec();
        store.set(id, Tensor::from_fn(&shape, f)).unwrap();
    }

    fn pin_ssm_identity(store: &mut ParamStore, ssm: &SelectiveSsm) {
        for l in [&ssm.in_gate, &ssm.out_gate] {
            pin(store, l.weight, |_| 0.0);
            pin(store, l.bias.unwrap(), |_| 0.0);
        }
        pin(store, ssm.skip, |_| 1.0);
    }

    #[test]
    fn progressive_order_starts_at_hh() {
        let o = ScanOrder::new(ScanKind::Progressive, Direction::Forward, 1, 2, 2);
        assert_eq!(o.tokens()[0], (Band::HH, 0, 0));
        assert_eq!(o.tokens()[4], (Band::HL, 0, 0));
        assert_eq!(o.tokens()[15], (Band::LL, 1, 1));
        let r = ScanOrder::new(ScanKind::Progressive, Direction::Reverse, 1, 2, 2);
        let mut f = o.tokens().to_vec();
        f.reverse();
        assert_eq!(r.tokens(), &f[..]);
    }

    #[test]
    fn interleaved_order_visits_all_bands_per_position() {
        let o = ScanOrder::new(ScanKind::Interleaved, Direction::Forward, 3, 4, 4);
        assert_eq!(
            &o.tokens()[..4],
            &[(Band::LL, 0, 0), (Band::LH, 0, 0), (Band::HL, 0, 0), (Band::HH, 0, 0)]
        );
        assert_eq!(o.len(), 4 * 4 * 4);
    }

    #[test]
    fn scans_round_trip_exactly() {
        let mut r = rng();
        let packed = Tensor::randn(&[8, 3, 5], 1.0, &mut r);
        for order in ScanOrder::paths(2, 3, 5) {
            let seq = order.apply(&packed).unwrap();
            assert_eq!(order.invert(&seq).unwrap(), packed);
        }
        let tape = Tape::new();
        let bands = subband_split(tape.constant(packed.clone())).unwrap();
        let seq = progressive_scan(&bands, Direction::Reverse).unwrap();
        let back = subband_concat(&seq.inverse().unwrap()).unwrap();
        assert_eq!(*back.value(), packed);
        let seq = interleaved_scan(&bands, Direction::Forward).unwrap();
        // First token row holds the LL(0,0) vector.
        assert_eq!(seq.values.value().at(&[0, 1]), packed.at(&[1, 0, 0]));
    }

    #[test]
    fn scan_values_follow_token_order() {
        let mut r = rng();
        let packed = Tensor::randn(&[12, 2, 2], 1.0, &mut r);
        let order = ScanOrder::new(ScanKind::Progressive, Direction::Forward, 3, 2, 2);
        let seq = order.apply(&packed).unwrap();
        for (t, &(b, i, j)) in order.tokens().iter().enumerate() {
            for c in 0..3 {
                assert_eq!(seq.at(&[t, c]), packed.at(&[band_slot(b) * 3 + c, i, j]));
            }
        }
    }

    #[test]
    fn ssm_zero_input_and_identity() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let ssm = SelectiveSsm::new(&mut store, "s", 3, 4, &mut r);
        let tape = Tape::new();
        let sc = Scope::new(&tape, &store);
        let y = ssm.forward(sc, sc.constant(Tensor::zeros(&[7, 3]))).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));

        pin_ssm_identity(&mut store, &ssm);
        let x = Tensor::randn(&[7, 3], 1.0, &mut r);
        let tape = Tape::new();
        let sc = Scope::new(&tape, &store);
        assert_eq!(*ssm.forward(sc, sc.constant(x.clone())).unwrap().value(), x);
    }

    /// Constant gates and step make the recurrence linear in the input, and
    /// a vanishing decay makes it memoryless.
    #[test]
    fn ssm_pinned_gates_linear_and_memoryless() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let ssm = SelectiveSsm::new(&mut store, "s", 2, 3, &mut r);
        for l in [&ssm.step, &ssm.in_gate, &ssm.out_gate] {
            pin(&mut store, l.weight, |_| 0.0);
        }
        pin(&mut store, ssm.in_gate.bias.unwrap(), |ix| 0.3 + ix[1] as f64 * 0.1);
        pin(&mut store, ssm.out_gate.bias.unwrap(), |ix| 1.0 - ix[1] as f64 * 0.2);
        let x = Tensor::randn(&[9, 2], 1.0, &mut r);
        let y = Tensor::randn(&[9, 2], 1.0, &mut r);
        let run = |store: &ParamStore, t: &Tensor| {
            let tape = Tape::new();
            let sc = Scope::new(&tape, store);
            (*ssm.forward(sc, sc.constant(t.clone())).unwrap().value()).clone()
        };
        let (a, b) = (1.7, -0.6);
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lin = run(&store, &x).zip_map(&run(&store, &y), |p, q| a * p + b * q).unwrap();
        assert!(run(&store, &mix).max_abs_diff(&lin) < 1e-9);

        pin(&mut store, ssm.log_decay, |_| 800f64.ln());
        let fwd = run(&store, &x);
        let mut rev_rows: Vec<f64> = Vec::new();
        for t in (0..9).rev() {
            rev_rows.extend_from_slice(&x.data()[t * 2..t * 2 + 2]);
        }
        let rev = run(&store, &Tensor::new(&[9, 2], rev_rows).unwrap());
        for t in 0..9 {
            for c in 0..2 {
                assert!((rev.at(&[8 - t, c]) - fwd.at(&[t, c])).abs() < 1e-12);
            }
        }
    }

    fn pinned_identity_denoiser(store: &mut ParamStore, c: usize) -> WaveletDenoiser {
        let d = WaveletDenoiser::new(store, "wd", c, 4, &mut rng());
        for p in &d.paths {
            pin_ssm_identity(store, p);
        }
        pin(store, d.proj.weight, |ix| if ix[0] == ix[1] { 0.25 } else { 0.0 });
        for conv in [&d.inner, &d.outer] {
            pin(
                store,
                conv.weight,
                |ix| if ix[2] == 1 && ix[3] == 1 { 1.0 } else { 0.0 },
            );
            pin(store, conv.bias.unwrap(), |_| 0.0);
        }
        d
    }

    #[test]
    fn pinned_branches_reduce_to_transforms() {
        let mut store = ParamStore::new();
        let d = pinned_identity_denoiser(&mut store, 2);
        let x = Tensor::randn(&[2, 8, 8], 1.0, &mut rng());
        let tape = Tape::new();
        let sc = Scope::new(&tape, &store);
        let bands = haar_wt2d(sc.constant(x.clone())).unwrap();
        let mam = d.mamba_branch(sc, &bands).unwrap().value();
        assert!(mam.max_abs_diff(&x) < 1e-12);
        let conv = d.conv_branch(sc, &bands).unwrap().value();
        assert!(conv.max_abs_diff(&x.scale(2.0)) < 1e-12);
        let out = d.forward(sc, sc.constant(x.clone())).unwrap().value();
        assert!(out.max_abs_diff(&x.scale(3.0)) < 1e-12);
        assert_eq!(haar_forward(&x).unwrap().shape(), &[8, 4, 4]);
    }

    #[test]
    fn zero_input_gives_zero_output_and_shapes() {
        let mut store = ParamStore::new();
        let d = WaveletDenoiser::new(&mut store, "wd", 8, DEFAULT_STATE_DIM, &mut rng());
        let tape = Tape::new();
        let sc = Scope::new(&tape, &store);
        let bands = haar_wt2d(sc.constant(Tensor::zeros(&[8, 16, 16]))).unwrap();
        assert_eq!(d.conv_branch(sc, &bands).unwrap().shape(), vec![8, 16, 16]);
        let out = d.forward(sc, sc.constant(Tensor::zeros(&[8, 16, 16]))).unwrap().value();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(d.forward(sc, sc.constant(Tensor::zeros(&[8, 6, 8]))).is_err());
    }

    #[test]
    fn denoiser_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let d = WaveletDenoiser::new(&mut store, "wd", 2, 3, &mut r);
        let x = Tensor::randn(&[2, 4, 4], 1.0, &mut r);
        let err = grad_check(
            |tape, x| {
                let sc = Scope::new(tape, &store);
                Ok(d.forward(sc, x)?.square().sum())
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
