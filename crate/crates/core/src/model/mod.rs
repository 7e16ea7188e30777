//! Recurrent acoustic models: unidirectional projected-LSTM stacks for online
//! recognition and bidirectional stacks for the offline teacher.
//!
//! A bidirectional layer runs a forward and a backward projected LSTM over its
//! input and combines them as `h_t = W_fw r→_t + W_bw r←_t + b`; the combined
//! sequence feeds the next layer. Every model ends in an affine map to `K+1`
//! logits followed by a row softmax.

pub mod lstm;

use std::fmt;

use crate::corpus::FeatureMatrix;
use crate::error::{Error, Result};
use crate::numerics::{log_softmax, matvec_acc, matvec_t_acc, outer_acc, uniform_fill, Matrix, Rng};

pub use lstm::LstmLayerParams;

/// Range of the uniform parameter initialization, `[-0.05, 0.05)`.
pub const DEFAULT_INIT_RANGE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Unidirectional,
    Bidirectional,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Unidirectional => "unidirectional",
            Direction::Bidirectional => "bidirectional",
        })
    }
}

/// Shape of a model. Every layer uses the same cell and projection sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ArchConfig {
    pub direction: Direction,
    pub input_dim: usize,
    pub layers: usize,
    pub cells: usize,
    pub projection: usize,
    /// Number of labels including blank.
    pub output_dim: usize,
}

impl ArchConfig {
    /// 2 layers of 64 cells projected to 32.
    pub fn desk(direction: Direction, input_dim: usize, output_dim: usize) -> Self {
        ArchConfig {
            direction,
            input_dim,
            layers: 2,
            cells: 64,
            projection: 32,
            output_dim,
        }
    }

    /// 5 layers of 1024 cells projected to 512.
    pub fn paper_scale(direction: Direction, input_dim: usize, output_dim: usize) -> Self {
        ArchConfig {
            direction,
            input_dim,
            layers: 5,
            cells: 1024,
            projection: 512,
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("layers", self.layers),
            ("cells", self.cells),
            ("projection", self.projection),
            ("output_dim", self.output_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::usage(format!("architecture {name} must be positive")));
        }
        if self.output_dim < 2 {
            return Err(Error::usage("output layer needs blank plus at least one label"));
        }
        Ok(())
    }
}

/// One bidirectional layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BlstmLayerParams {
    pub forward: LstmLayerParams,
    pub backward: LstmLayerParams,
    /// `P × P`
    pub w_fw: Matrix,
    /// `P × P`
    pub w_bw: Matrix,
    /// `1 × P`
    pub bias: Matrix,
}

impl BlstmLayerParams {
    fn zeros(input: usize, cells: usize, projection: usize) -> Self {
        BlstmLayerParams {
            forward: LstmLayerParams::zeros(input, cells, projection),
            backward: LstmLayerParams::zeros(input, cells, projection),
            w_fw: Matrix::zeros(projection, projection),
            w_bw: Matrix::zeros(projection, projection),
            bias: Matrix::zeros(1, projection),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layers {
    Uni(Vec<LstmLayerParams>),
    Bi(Vec<BlstmLayerParams>),
}

/// A full parameter set. Gradients and optimizer velocities use the same
/// type, so every block-wise operation works on all three.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: ArchConfig,
    pub layers: Layers,
    /// `(K+1) × P`
    pub w_out: Matrix,
    /// `1 × (K+1)`
    pub b_out: Matrix,
}

impl Model {
    /// All-zero parameters of the given shape.
    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let (c, p) = (arch.cells, arch.projection);
        let input_of = |l: usize| if l == 0 { arch.input_dim } else { p };
        let layers = match arch.direction {
            Direction::Unidirectional => Layers::Uni(
                (0..arch.layers)
                    .map(|l| LstmLayerParams::zeros(input_of(l), c, p))
                    .collect(),
            ),
            Direction::Bidirectional => Layers::Bi(
                (0..arch.layers)
                    .map(|l| BlstmLayerParams::zeros(input_of(l), c, p))
                    .collect(),
            ),
        };
        Ok(Model {
            arch,
            layers,
            w_out: Matrix::zeros(arch.output_dim, p),
            b_out: Matrix::zeros(1, arch.output_dim),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Model::zeros(self.arch).expect("shape already validated")
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// Named parameter blocks in a fixed order.
    pub fn named_blocks(&self) -> Vec<(String, &Matrix)> {
        const LSTM: [&str; 4] = ["w_in", "w_rec", "bias", "w_proj"];
        let mut out = Vec::new();
        match &self.layers {
            Layers::Uni(ls) => {
                for (i, l) in ls.iter().enumerate() {
                    for (name, m) in LSTM.iter().zip(l.blocks()) {
                        out.push((format!("layer{i}.{name}"), m));
                    }
                }
            }
            Layers::Bi(ls) => {
                for (i, l) in ls.iter().enumerate() {
                    for (dir, cell) in [("fwd", &l.forward), ("bwd", &l.backward)] {
                        for (name, m) in LSTM.iter().zip(cell.blocks()) {
                            out.push((format!("layer{i}.{dir}.{name}"), m));
                        }
                    }
                    out.push((format!("layer{i}.w_fw"), &l.w_fw));
                    out.push((format!("layer{i}.w_bw"), &l.w_bw));
                    out.push((format!("layer{i}.bias"), &l.bias));
                }
            }
        }
        out.push(("output.weight".into(), &self.w_out));
        out.push(("output.bias".into(), &self.b_out));
        out
    }

    /// Mutable blocks, in the same order as [`Model::named_blocks`].
    pub fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        match &mut self.layers {
            Layers::Uni(ls) => {
                for l in ls {
                    out.extend(l.blocks_mut());
                }
            }
            Layers::Bi(ls) => {
                for l in ls {
                    out.extend(l.forward.blocks_mut());
                    out.extend(l.backward.blocks_mut());
                    out.push(&mut l.w_fw);
                    out.push(&mut l.w_bw);
                    out.push(&mut l.bias);
                }
            }
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    pub fn blocks(&self) -> Vec<&Matrix> {
        self.named_blocks().into_iter().map(|(_, m)| m).collect()
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|m| m.as_slice().len()).sum()
    }

    /// Squared L2 norm over every block.
    pub fn sum_of_squares(&self) -> f64 {
        self.blocks().iter().map(|m| m.sum_of_squares()).sum()
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.blocks_mut() {
            m.scale(s);
        }
    }

    pub fn fill(&mut self, v: f64) {
        for m in self.blocks_mut() {
            m.fill(v);
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Model, scale: f64) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::usage("parameter sets have different architectures"));
        }
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.add_scaled(b, scale)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|m| m.is_finite())
    }

    /// Cheap digest of every parameter bit, used to detect stale caches.
    pub fn stamp(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for m in self.blocks() {
            for v in m.as_slice() {
                h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Replaces the output layer with a fresh uniform draw of a new size.
    pub fn replace_output_layer(&mut self, output_dim: usize, rng: &mut Rng, range: f64) -> Result<()> {
        if output_dim < 2 {
            return Err(Error::usage("output layer needs blank plus at least one label"));
        }
        self.arch.output_dim = output_dim;
        self.w_out = uniform_fill(rng, output_dim, self.arch.projection, -range, range)?;
        self.b_out = uniform_fill(rng, 1, output_dim, -range, range)?;
        Ok(())
    }

    /// Runs the network and keeps what [`Model::backward`] needs.
    pub fn forward(&self, features: &FeatureMatrix) -> Result<(PosteriorMatrix, ForwardCache)> {
        if features.dim() != self.arch.input_dim {
            return Err(Error::usage(format!(
                "feature dim {} does not match model input dim {}",
                features.dim(),
                self.arch.input_dim
            )));
        }
        let frames = features.frames();
        let mut layer_inputs = vec![features.matrix().clone()];
        let mut traces = Vec::new();
        match &self.layers {
            Layers::Uni(ls) => {
                for l in ls {
                    let tr = lstm::forward(l, layer_inputs.last().unwrap(), false);
                    layer_inputs.push(tr.out.clone());
                    traces.push(LayerTrace::Uni(tr));
                }
            }
            Layers::Bi(ls) => {
                for l in ls {
                    let input = layer_inputs.last().unwrap();
                    let fw = lstm::forward(&l.forward, input, false);
                    let bw = lstm::forward(&l.backward, input, true);
                    let mut combined = Matrix::zeros(frames, self.arch.projection);
                    for t in 0..frames {
                        let row = combined.row_mut(t);
                        row.copy_from_slice(l.bias.row(0));
                        matvec_acc(&l.w_fw, fw.out.row(t), row);
                        matvec_acc(&l.w_bw, bw.out.row(t), row);
                    }
                    layer_inputs.push(combined);
                    traces.push(LayerTrace::Bi(fw, bw));
                }
            }
        }
        let top = layer_inputs.last().unwrap();
        let mut logits = Matrix::zeros(frames, self.arch.output_dim);
        for t in 0..frames {
            let row = logits.row_mut(t);
            row.copy_from_slice(self.b_out.row(0));
            matvec_acc(&self.w_out, top.row(t), row);
        }
        let post = PosteriorMatrix::from_logits(logits)?;
        let cache = ForwardCache {
            stamp: self.stamp(),
            arch: self.arch,
            layer_inputs,
            traces,
        };
        Ok((post, cache))
    }

    /// Posteriors only.
    pub fn posteriors(&self, features: &FeatureMatrix) -> Result<PosteriorMatrix> {
        self.forward(features).map(|(p, _)| p)
    }

    /// Exact gradients of a loss given its gradient wrt the logits. Returns the
    /// parameter gradients and the gradient wrt the input features.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Matrix) -> Result<(Model, Matrix)> {
        let mut grads = self.zeros_like();
        let d_in = self.accumulate_backward(cache, d_logits, &mut grads, true)?;
        Ok((grads, d_in.expect("requested")))
    }

    /// Adds this utterance's parameter gradients into `grads`.
    pub fn accumulate_backward(
        &self,
        cache: &ForwardCache,
        d_logits: &Matrix,
        grads: &mut Model,
        want_feature_grad: bool,
    ) -> Result<Option<Matrix>> {
        if cache.arch != self.arch || cache.stamp != self.stamp() {
            return Err(Error::usage("forward cache does not belong to this model state"));
        }
        if grads.arch != self.arch {
            return Err(Error::usage("gradient buffer has a different architecture"));
        }
        let frames = cache.layer_inputs[0].rows();
        if d_logits.shape() != (frames, self.arch.output_dim) {
            return Err(Error::usage(format!(
                "logit gradient shape {:?}, expected {:?}",
                d_logits.shape(),
                (frames, self.arch.output_dim)
            )));
        }
        let n_layers = cache.traces.len();
        let top = &cache.layer_inputs[n_layers];
        let mut d_h = Matrix::zeros(frames, self.arch.projection);
        for t in 0..frames {
            let dl = d_logits.row(t);
            outer_acc(&mut grads.w_out, dl, top.row(t));
            for (b, v) in grads.b_out.row_mut(0).iter_mut().zip(dl) {
                *b += v;
            }
            matvec_t_acc(&self.w_out, dl, d_h.row_mut(t));
        }

        let mut d_feat = None;
        for l in (0..n_layers).rev() {
            let input = &cache.layer_inputs[l];
            let want_input = l > 0 || want_feature_grad;
            let d_input = match (&self.layers, &mut grads.layers, &cache.traces[l]) {
                (Layers::Uni(ps), Layers::Uni(gs), LayerTrace::Uni(tr)) => {
                    lstm::backward(&ps[l], input, tr, &d_h, &mut gs[l], want_input)
                }
                (Layers::Bi(ps), Layers::Bi(gs), LayerTrace::Bi(fw, bw)) => {
                    let (p, g) = (&ps[l], &mut gs[l]);
                    let proj = self.arch.projection;
                    let mut d_fw = Matrix::zeros(frames, proj);
                    let mut d_bw = Matrix::zeros(frames, proj);
                    for t in 0..frames {
                        let dh = d_h.row(t);
                        outer_acc(&mut g.w_fw, dh, fw.out.row(t));
                        outer_acc(&mut g.w_bw, dh, bw.out.row(t));
                        for (b, v) in g.bias.row_mut(0).iter_mut().zip(dh) {
                            *b += v;
                        }
                        matvec_t_acc(&p.w_fw, dh, d_fw.row_mut(t));
                        matvec_t_acc(&p.w_bw, dh, d_bw.row_mut(t));
                    }
                    let a = lstm::backward(&p.forward, input, fw, &d_fw, &mut g.forward, want_input);
                    let b = lstm::backward(&p.backward, input, bw, &d_bw, &mut g.backward, want_input);
                    match (a, b) {
                        (Some(mut a), Some(b)) => {
                            a.add_scaled(&b, 1.0)?;
                            Some(a)
                        }
                        _ => None,
                    }
                }
                _ => return Err(Error::usage("cache layout does not match the model")),
            };
            match d_input {
                Some(d) if l > 0 => d_h = d,
                other => d_feat = other,
            }
        }
        Ok(d_feat)
    }
}

/// Draws every parameter uniformly from `[-range, range)`.
pub fn init_model(arch: ArchConfig, rng: &mut Rng, range: f64) -> Result<Model> {
    let mut model = Model::zeros(arch)?;
    for m in model.blocks_mut() {
        let (r, c) = m.shape();
        *m = uniform_fill(rng, r, c, -range, range)?;
    }
    Ok(model)
}

#[derive(Clone, Debug)]
enum LayerTrace {
    Uni(lstm::LstmTrace),
    Bi(lstm::LstmTrace, lstm::LstmTrace),
}

/// Intermediate activations of one forward pass, tied to the parameter state
/// that produced them.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    stamp: u64,
    arch: ArchConfig,
    layer_inputs: Vec<Matrix>,
    traces: Vec<LayerTrace>,
}

/// Per-frame label distributions with the logits they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMatrix {
    logits: Matrix,
    log_probs: Matrix,
    probs: Matrix,
}

impl PosteriorMatrix {
    pub fn from_logits(logits: Matrix) -> Result<Self> {
        if logits.rows() == 0 || logits.cols() < 2 {
            return Err(Error::usage(format!("bad logit shape {:?}", logits.shape())));
        }
        let mut log_probs = Matrix::zeros(logits.rows(), logits.cols());
        for t in 0..logits.rows() {
            let lp = log_softmax(logits.row(t))?;
            log_probs.row_mut(t).copy_from_slice(&lp);
        }
        let mut probs = log_probs.clone();
        probs.as_mut_slice().iter_mut().for_each(|v| *v = v.exp());
        Ok(PosteriorMatrix {
            logits,
            log_probs,
            probs,
        })
    }

    /// Posteriors given directly as probabilities; logits are their logs.
    pub fn from_probs(probs: Matrix) -> Result<Self> {
        let mut logits = probs.clone();
        for v in logits.as_mut_slice() {
            if !(*v >= 0.0) {
                return Err(Error::usage("negative or NaN probability"));
            }
            *v = v.ln().max(-1e300);
        }
        Self::from_logits(logits)
    }

    pub fn frames(&self) -> usize {
        self.logits.rows()
    }

    /// `K+1`
    pub fn labels(&self) -> usize {
        self.logits.cols()
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn log_probs(&self) -> &Matrix {
        &self.log_probs
    }

    pub fn prob(&self, t: usize, k: usize) -> f64 {
        self.probs.get(t, k)
    }

    /// Mean per-frame entropy in nats.
    pub fn mean_entropy(&self) -> f64 {
        let total: f64 = (0..self.frames())
            .map(|t| {
                -self
                    .probs
                    .row(t)
                    .iter()
                    .zip(self.log_probs.row(t))
                    .map(|(p, lp)| p * lp)
                    .sum::<f64>()
            })
            .sum();
        total / self.frames() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(rng: &mut Rng, frames: usize, dim: usize) -> FeatureMatrix {
        FeatureMatrix::new(uniform_fill(rng, frames, dim, -1.0, 1.0).unwrap()).unwrap()
    }

    fn small(direction: Direction) -> ArchConfig {
        ArchConfig {
            direction,
            input_dim: 5,
            layers: 2,
            cells: 8,
            projection: 6,
            output_dim: 4,
        }
    }

    #[test]
    fn init_is_deterministic_and_in_range() {
        for dir in [Direction::Unidirectional, Direction::Bidirectional] {
            let a = init_model(small(dir), &mut Rng::new(11), DEFAULT_INIT_RANGE).unwrap();
            let b = init_model(small(dir), &mut Rng::new(11), DEFAULT_INIT_RANGE).unwrap();
            assert_eq!(a, b);
            for m in a.blocks() {
                assert!(m.as_slice().iter().all(|v| (-0.05..0.05).contains(v)));
            }
        }
    }

    #[test]
    fn paper_scale_architecture_constructs() {
        let arch = ArchConfig::paper_scale(Direction::Unidirectional, 80, 80);
        let m = Model::zeros(arch).unwrap();
        assert_eq!(m.blocks().len(), 5 * 4 + 2);
        assert!(ArchConfig { layers: 0, ..arch }.validate().is_err());
    }

    #[test]
    fn zero_parameters_give_uniform_posteriors() {
        let m = Model::zeros(small(Direction::Bidirectional)).unwrap();
        let f = features(&mut Rng::new(2), 7, 5);
        let p = m.posteriors(&f).unwrap();
        for t in 0..7 {
            for k in 0..4 {
                assert!((p.prob(t, k) - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn unidirectional_model_is_causal() {
        let mut rng = Rng::new(3);
        let m = init_model(small(Direction::Unidirectional), &mut rng, 0.5).unwrap();
        let f = features(&mut rng, 10, 5);
        let mut g = f.matrix().clone();
        for v in g.row_mut(5) {
            *v += 0.75;
        }
        let g = FeatureMatrix::new(g).unwrap();
        let (pa, pb) = (m.posteriors(&f).unwrap(), m.posteriors(&g).unwrap());
        for t in 0..5 {
            assert_eq!(pa.probs().row(t), pb.probs().row(t));
        }
        assert_ne!(pa.probs().row(5), pb.probs().row(5));
    }

    #[test]
    fn bidirectional_with_silent_backward_matches_unidirectional() {
        let mut rng = Rng::new(4);
        let bi_arch = small(Direction::Bidirectional);
        let mut bi = init_model(bi_arch, &mut rng, 0.4).unwrap();
        let mut uni = Model::zeros(ArchConfig {
            direction: Direction::Unidirectional,
            ..bi_arch
        })
        .unwrap();
        if let (Layers::Bi(bls), Layers::Uni(uls)) = (&mut bi.layers, &mut uni.layers) {
            for (b, u) in bls.iter_mut().zip(uls.iter_mut()) {
                b.w_bw.fill(0.0);
                b.bias.fill(0.0);
                // With W_fw = I the combined output is the forward half itself.
                let p = b.w_fw.rows();
                b.w_fw = Matrix::zeros(p, p);
                for i in 0..p {
                    b.w_fw.set(i, i, 1.0);
                }
                *u = b.forward.clone();
            }
        }
        uni.w_out = bi.w_out.clone();
        uni.b_out = bi.b_out.clone();
        let f = features(&mut rng, 9, 5);
        let (pb, pu) = (bi.posteriors(&f).unwrap(), uni.posteriors(&f).unwrap());
        for (a, b) in pb.probs().as_slice().iter().zip(pu.probs().as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn single_layer_bidirectional_folds_w_fw_into_output() {
        let mut rng = Rng::new(5);
        let arch = ArchConfig {
            layers: 1,
            ..small(Direction::Bidirectional)
        };
        let mut bi = init_model(arch, &mut rng, 0.4).unwrap();
        let Layers::Bi(ls) = &mut bi.layers else { unreachable!() };
        ls[0].w_bw.fill(0.0);
        ls[0].bias.fill(0.0);
        let fwd = ls[0].forward.clone();
        let w_fw = ls[0].w_fw.clone();
        let uni = Model {
            arch: ArchConfig {
                direction: Direction::Unidirectional,
                ..arch
            },
            layers: Layers::Uni(vec![fwd]),
            w_out: bi.w_out.matmul(&w_fw).unwrap(),
            b_out: bi.b_out.clone(),
        };
        let f = features(&mut rng, 8, 5);
        let (pb, pu) = (bi.posteriors(&f).unwrap(), uni.posteriors(&f).unwrap());
        for (a, b) in pb.probs().as_slice().iter().zip(pu.probs().as_slice()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn forward_rejects_dim_mismatch_and_stale_cache() {
        let mut rng = Rng::new(6);
        let mut m = init_model(small(Direction::Unidirectional), &mut rng, 0.1).unwrap();
        assert!(matches!(m.forward(&features(&mut rng, 3, 4)), Err(Error::Usage(_))));
        let (p, cache) = m.forward(&features(&mut rng, 3, 5)).unwrap();
        let d = Matrix::zeros(p.frames(), p.labels());
        assert!(m.backward(&cache, &d).is_ok());
        m.w_out.set(0, 0, 0.3);
        assert!(matches!(m.backward(&cache, &d), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = Rng::new(8);
        for dir in [Direction::Unidirectional, Direction::Bidirectional] {
            let m = init_model(small(dir), &mut rng, 0.3).unwrap();
            let (p, cache) = m.forward(&features(&mut rng, 6, 5)).unwrap();
            let (g, dx) = m.backward(&cache, &Matrix::zeros(p.frames(), p.labels())).unwrap();
            assert_eq!(g.sum_of_squares(), 0.0);
            assert_eq!(dx.sum_of_squares(), 0.0);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = Rng::new(9);
        let m = init_model(small(Direction::Bidirectional), &mut rng, 0.3).unwrap();
        let f = features(&mut rng, 6, 5);
        assert_eq!(m.posteriors(&f).unwrap(), m.posteriors(&f).unwrap());
    }
}
