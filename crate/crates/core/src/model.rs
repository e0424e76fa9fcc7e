//! Feature extractor G (two-layer tanh MLP with an L2-normalized output) and
//! linear classifier F, with hand-written reverse-mode gradients, SGD with
//! momentum, and a binary checkpoint format.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::prototype::PrototypeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn new(input_dim: usize, classes: usize) -> Self {
        ModelDims {
            input_dim,
            hidden_dim: 64,
            feature_dim: 16,
            classes,
        }
    }
}

/// Names of the parameter blocks, in storage order.
pub const PARAM_NAMES: [&str; 6] = [
    "extractor.w1",
    "extractor.b1",
    "extractor.w2",
    "extractor.b2",
    "classifier.weight",
    "classifier.bias",
];

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// G and F together, plus a version counter bumped on every parameter update.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub extractor: FeatureExtractor,
    pub classifier: LinearClassifier,
    version: u64,
}

#[derive(Debug, Clone)]
pub struct FeatureCache {
    version: u64,
    inputs: Matrix,
    hidden: Matrix,
    norms: Vec<f64>,
    /// Rows whose pre-normalization vector was zero and got nudged.
    nudged: Vec<bool>,
    features: Matrix,
}

impl FeatureCache {
    pub fn features(&self) -> &Matrix {
        &self.features
    }
}

#[derive(Debug, Clone)]
pub struct ProbCache {
    version: u64,
    features: Matrix,
    probs: Matrix,
}

impl ProbCache {
    pub fn probs(&self) -> &Matrix {
        &self.probs
    }
}

/// Gradient blocks laid out like [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            blocks: net
                .params()
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.data().iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(Matrix::is_finite)
    }

    pub fn scale(&self, s: f64) -> Gradients {
        Gradients {
            blocks: self.blocks.iter().map(|b| b.scale(s)).collect(),
        }
    }
}

fn col_sums_into(m: &Matrix, out: &mut Matrix) {
    for (o, s) in out.data_mut().iter_mut().zip(m.col_sums()) {
        *o += s;
    }
}

fn add_row_bias(m: &mut Matrix, bias: &Matrix) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

impl Network {
    /// Gaussian init scaled by fan-in; classifier starts at zero bias.
    pub fn new<R: Rng>(dims: ModelDims, rng: &mut R) -> Self {
        let mut gaussian = |rows: usize, cols: usize, fan_in: usize| {
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
            let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            Matrix::from_vec(rows, cols, data).expect("sized")
        };
        let w1 = gaussian(dims.hidden_dim, dims.input_dim, dims.input_dim);
        let w2 = gaussian(dims.feature_dim, dims.hidden_dim, dims.hidden_dim);
        let wc = gaussian(dims.classes, dims.feature_dim, dims.feature_dim);
        Network {
            extractor: FeatureExtractor {
                w1,
                b1: Matrix::zeros(1, dims.hidden_dim),
                w2,
                b2: Matrix::zeros(1, dims.feature_dim),
            },
            classifier: LinearClassifier {
                weight: wc,
                bias: Matrix::zeros(1, dims.classes),
            },
            version: 0,
        }
    }

    /// All-zero parameters, useful for degenerate-case tests.
    pub fn zeros(dims: ModelDims) -> Self {
        Network {
            extractor: FeatureExtractor {
                w1: Matrix::zeros(dims.hidden_dim, dims.input_dim),
                b1: Matrix::zeros(1, dims.hidden_dim),
                w2: Matrix::zeros(dims.feature_dim, dims.hidden_dim),
                b2: Matrix::zeros(1, dims.feature_dim),
            },
            classifier: LinearClassifier {
                weight: Matrix::zeros(dims.classes, dims.feature_dim),
                bias: Matrix::zeros(1, dims.classes),
            },
            version: 0,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input_dim: self.extractor.w1.cols(),
            hidden_dim: self.extractor.w1.rows(),
            feature_dim: self.extractor.w2.rows(),
            classes: self.classifier.weight.rows(),
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn params(&self) -> [&Matrix; 6] {
        [
            &self.extractor.w1,
            &self.extractor.b1,
            &self.extractor.w2,
            &self.extractor.b2,
            &self.classifier.weight,
            &self.classifier.bias,
        ]
    }

    /// Mutable parameter access. Counts as an update: cached forwards go stale.
    pub fn params_mut(&mut self) -> [&mut Matrix; 6] {
        self.version += 1;
        [
            &mut self.extractor.w1,
            &mut self.extractor.b1,
            &mut self.extractor.w2,
            &mut self.extractor.b2,
            &mut self.classifier.weight,
            &mut self.classifier.bias,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data().len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::shape("set_flat_params", self.param_count(), values.len()));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.data().len();
            p.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// G: unit-norm feature rows. A zero pre-normalization row is nudged by
    /// 1e-8 in every coordinate before normalizing and is treated as a
    /// constant by the backward pass.
    pub fn forward_features(&self, inputs: &Matrix) -> Result<(Matrix, FeatureCache)> {
        inputs.ensure_finite("network inputs")?;
        let ex = &self.extractor;
        if inputs.cols() != ex.w1.cols() {
            return Err(Error::shape("forward_features", ex.w1.cols(), inputs.cols()));
        }
        let mut hidden = inputs.matmul_t(&ex.w1)?;
        add_row_bias(&mut hidden, &ex.b1);
        let hidden = hidden.map(f64::tanh);
        let mut pre_norm = hidden.matmul_t(&ex.w2)?;
        add_row_bias(&mut pre_norm, &ex.b2);
        let mut norms = Vec::with_capacity(pre_norm.rows());
        let mut nudged = vec![false; pre_norm.rows()];
        let mut features = pre_norm.clone();
        for r in 0..pre_norm.rows() {
            let mut n = linalg::norm(pre_norm.row(r));
            if n < 1e-12 {
                log::debug!("zero feature vector at row {r}; perturbing before normalization");
                pre_norm.row_mut(r).iter_mut().for_each(|v| *v += 1e-8);
                features.row_mut(r).copy_from_slice(pre_norm.row(r));
                n = linalg::norm(pre_norm.row(r));
                nudged[r] = true;
            }
            features.row_mut(r).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        features.ensure_finite("features")?;
        let cache = FeatureCache {
            version: self.version,
            inputs: inputs.clone(),
            hidden,
            norms,
            nudged,
            features: features.clone(),
        };
        Ok((features, cache))
    }

    /// F: row-wise softmax of `W f + b`.
    pub fn forward_probs(&self, features: &Matrix) -> Result<(Matrix, ProbCache)> {
        let cl = &self.classifier;
        if features.cols() != cl.weight.cols() {
            return Err(Error::shape("forward_probs", cl.weight.cols(), features.cols()));
        }
        let mut logits = features.matmul_t(&cl.weight)?;
        add_row_bias(&mut logits, &cl.bias);
        let probs = linalg::row_softmax(&logits, 1.0)?;
        let cache = ProbCache {
            version: self.version,
            features: features.clone(),
            probs: probs.clone(),
        };
        Ok((probs, cache))
    }

    fn check_version(&self, cache_version: u64) -> Result<()> {
        if cache_version != self.version {
            return Err(Error::StaleCache {
                cache: cache_version,
                params: self.version,
            });
        }
        Ok(())
    }

    /// Backward through F. Accumulates classifier gradients and returns the
    /// gradient w.r.t. the input features.
    pub fn backward_probs(
        &self,
        cache: &ProbCache,
        grad_probs: &Matrix,
        grads: &mut Gradients,
    ) -> Result<Matrix> {
        self.check_version(cache.version)?;
        if grad_probs.shape() != cache.probs.shape() {
            return Err(Error::shape(
                "backward_probs",
                format!("{:?}", cache.probs.shape()),
                format!("{:?}", grad_probs.shape()),
            ));
        }
        let mut dlogits = Matrix::zeros(grad_probs.rows(), grad_probs.cols());
        for r in 0..grad_probs.rows() {
            let d = linalg::softmax_vjp(cache.probs.row(r), grad_probs.row(r), 1.0);
            dlogits.row_mut(r).copy_from_slice(&d);
        }
        grads.blocks[4].add_assign(&dlogits.t_matmul(&cache.features)?)?;
        col_sums_into(&dlogits, &mut grads.blocks[5]);
        dlogits.matmul(&self.classifier.weight)
    }

    /// Backward through the normalization and G, accumulating extractor gradients.
    pub fn backward_features(
        &self,
        cache: &FeatureCache,
        grad_features: &Matrix,
        grads: &mut Gradients,
    ) -> Result<()> {
        self.check_version(cache.version)?;
        if grad_features.shape() != cache.features.shape() {
            return Err(Error::shape(
                "backward_features",
                format!("{:?}", cache.features.shape()),
                format!("{:?}", grad_features.shape()),
            ));
        }
        let mut dz = Matrix::zeros(grad_features.rows(), grad_features.cols());
        for r in 0..dz.rows() {
            // Normalization has no derivative at the origin; a nudged row is
            // treated as a constant.
            if cache.nudged[r] {
                continue;
            }
            let f = cache.features.row(r);
            let g = grad_features.row(r);
            let fg = linalg::dot(f, g);
            let n = cache.norms[r];
            for (j, d) in dz.row_mut(r).iter_mut().enumerate() {
                *d = (g[j] - f[j] * fg) / n;
            }
        }
        grads.blocks[2].add_assign(&dz.t_matmul(&cache.hidden)?)?;
        col_sums_into(&dz, &mut grads.blocks[3]);
        let dh = dz.matmul(&self.extractor.w2)?;
        let mut da = dh;
        for (d, h) in da.data_mut().iter_mut().zip(cache.hidden.data()) {
            *d *= 1.0 - h * h;
        }
        grads.blocks[0].add_assign(&da.t_matmul(&cache.inputs)?)?;
        col_sums_into(&da, &mut grads.blocks[1]);
        Ok(())
    }

    /// Class predictions for a batch of raw inputs.
    pub fn predict(&self, inputs: &Matrix) -> Result<Vec<usize>> {
        let (f, _) = self.forward_features(inputs)?;
        let (p, _) = self.forward_probs(&f)?;
        Ok((0..p.rows()).map(|r| linalg::argmax(p.row(r))).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `η(t) = η₀·(1 + γ·t)^(−p)`.
    InverseDecay { gamma: f64, power: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::InverseDecay { gamma, power } => {
                base * (1.0 + gamma * step as f64).powf(-power)
            }
        }
    }
}

/// SGD with heavy-ball momentum: `v ← m·v + g; θ ← θ − η·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub schedule: LrSchedule,
    pub steps: usize,
    velocity: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(net: &Network, learning_rate: f64, momentum: f64) -> Self {
        OptimizerState {
            learning_rate,
            momentum,
            schedule: LrSchedule::Constant,
            steps: 0,
            velocity: Gradients::zeros_like(net).blocks,
        }
    }

    pub fn with_schedule(mut self, schedule: LrSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn velocity(&self) -> &[Matrix] {
        &self.velocity
    }

    /// Rejects non-finite gradients without touching parameters or state.
    pub fn sgd_step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("parameter gradient"));
        }
        if grads.blocks.len() != self.velocity.len() {
            return Err(Error::shape("sgd_step", self.velocity.len(), grads.blocks.len()));
        }
        for (v, g) in self.velocity.iter().zip(&grads.blocks) {
            if v.shape() != g.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("{:?}", v.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
        }
        let lr = self.schedule.rate(self.learning_rate, self.steps);
        // Update copies so an overflowing step leaves the network untouched.
        let mut next = net.clone();
        let mut velocity = self.velocity.clone();
        for ((p, v), g) in next
            .params_mut()
            .into_iter()
            .zip(velocity.iter_mut())
            .zip(&grads.blocks)
        {
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        if !next.params().iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite("parameters after update"));
        }
        *net = next;
        self.velocity = velocity;
        self.steps += 1;
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"PROMMCKP";
const FORMAT_VERSION: u32 = 1;

/// Serializes parameters (and optionally prototypes) to the checkpoint layout:
///
/// ```text
/// magic "PROMMCKP" | u32 format version | u32 input, hidden, feature, classes
/// | u8 has_prototypes | f64 blocks (w1, b1, w2, b2, weight, bias) row-major
/// | [f64 prototypes C×d, f64 momentum] | u32 CRC32 of everything before it
/// ```
///
/// All integers and floats are little-endian.
pub fn checkpoint_bytes(net: &Network, prototypes: Option<&PrototypeSet>) -> Vec<u8> {
    let dims = net.dims();
    let mut out = Vec::with_capacity(64 + 8 * net.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in [dims.input_dim, dims.hidden_dim, dims.feature_dim, dims.classes] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(u8::from(prototypes.is_some()));
    for p in net.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(ps) = prototypes {
        for v in ps.matrix().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&ps.momentum().to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let data = (0..rows * cols).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Matrix::from_vec(rows, cols, data)
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(Network, Option<PrototypeSet>)> {
    if bytes.len() < MAGIC.len() + 4 + 16 + 1 + 4 {
        return Err(Error::Checkpoint("checkpoint too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("CRC mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let dims = ModelDims {
        input_dim: r.u32()? as usize,
        hidden_dim: r.u32()? as usize,
        feature_dim: r.u32()? as usize,
        classes: r.u32()? as usize,
    };
    let has_prototypes = r.take(1)?[0] != 0;
    let mut net = Network::zeros(dims);
    for p in net.params_mut() {
        *p = r.matrix(p.rows(), p.cols())?;
    }
    net.version = 0;
    let prototypes = if has_prototypes {
        let m = r.matrix(dims.classes, dims.feature_dim)?;
        let momentum = r.f64()?;
        Some(PrototypeSet::from_matrix(m, momentum)?)
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok((net, prototypes))
}

pub fn save_checkpoint(path: &Path, net: &Network, prototypes: Option<&PrototypeSet>) -> Result<()> {
    fs::write(path, checkpoint_bytes(net, prototypes))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, Option<PrototypeSet>)> {
    parse_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::new(
            ModelDims {
                input_dim: 3,
                hidden_dim: 5,
                feature_dim: 4,
                classes: 3,
            },
            &mut rng,
        )
    }

    fn inputs() -> Matrix {
        Matrix::from_rows(&[vec![0.3, -1.2, 0.5], vec![1.0, 0.4, -0.7], vec![0.3, -1.2, 0.5]])
    }

    #[test]
    fn zero_feature_row_is_constant_in_backward() {
        let net = small_net(5);
        let x = Matrix::zeros(2, 3);
        let (f, cache) = net.forward_features(&x).unwrap();
        assert!((linalg::norm(f.row(0)) - 1.0).abs() < 1e-12);
        let mut grads = Gradients::zeros_like(&net);
        net.backward_features(&cache, &Matrix::filled(2, 4, 1.0), &mut grads).unwrap();
        assert!(grads.is_finite());
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn features_are_unit_norm_and_deterministic() {
        let net = small_net(1);
        let (f, _) = net.forward_features(&inputs()).unwrap();
        for r in 0..f.rows() {
            assert!((linalg::norm(f.row(r)) - 1.0).abs() < 1e-9);
        }
        assert_eq!(f.row(0), f.row(2));
    }

    #[test]
    fn zero_network_takes_perturbation_path() {
        let dims = ModelDims {
            input_dim: 2,
            hidden_dim: 3,
            feature_dim: 4,
            classes: 2,
        };
        let net = Network::zeros(dims);
        let (f, _) = net.forward_features(&Matrix::from_rows(&[vec![1.0, 2.0]])).unwrap();
        for v in f.row(0) {
            assert!((v - 0.5).abs() < 1e-12);
        }
        let (p, _) = net.forward_probs(&f).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn probs_examples() {
        let dims = ModelDims {
            input_dim: 2,
            hidden_dim: 2,
            feature_dim: 1,
            classes: 1,
        };
        let net = Network::zeros(dims);
        let (p, _) = net.forward_probs(&Matrix::from_rows(&[vec![1.0], vec![-1.0]])).unwrap();
        assert_eq!(p.data(), &[1.0, 1.0]);

        let mut net = Network::zeros(ModelDims {
            input_dim: 2,
            hidden_dim: 2,
            feature_dim: 3,
            classes: 3,
        });
        net.classifier.weight = Matrix::identity(3);
        let (p, _) = net.forward_probs(&Matrix::from_rows(&[vec![1.0, 0.0, 0.0]])).unwrap();
        let e = 1f64.exp();
        let expect = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        for (a, b) in p.row(0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    /// Scalar test loss: Σ w ⊙ probs + Σ v ⊙ features.
    fn probe_loss(net: &Network, x: &Matrix, wp: &Matrix, wf: &Matrix) -> f64 {
        let (f, _) = net.forward_features(x).unwrap();
        let (p, _) = net.forward_probs(&f).unwrap();
        linalg::frobenius_inner(&p, wp).unwrap() + linalg::frobenius_inner(&f, wf).unwrap()
    }

    fn probe_grads(net: &Network, x: &Matrix, wp: &Matrix, wf: &Matrix) -> Gradients {
        let mut grads = Gradients::zeros_like(net);
        let (f, fc) = net.forward_features(x).unwrap();
        let (_, pc) = net.forward_probs(&f).unwrap();
        let mut gf = net.backward_probs(&pc, wp, &mut grads).unwrap();
        gf.add_assign(wf).unwrap();
        net.backward_features(&fc, &gf, &mut grads).unwrap();
        grads
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = inputs();
        let wp = Matrix::from_rows(&[vec![0.3, -1.0, 0.2], vec![0.5, 0.1, -0.4], vec![1.0, 0.0, 0.7]]);
        let wf = Matrix::from_rows(&vec![vec![0.2, 0.1, -0.3, 0.4]; 3]);
        for seed in 0..5 {
            let net = small_net(seed);
            let analytic = probe_grads(&net, &x, &wp, &wf).flatten();
            let theta = net.flat_params();
            let report = check_gradient(
                |p| {
                    let mut n = net.clone();
                    n.set_flat_params(p).unwrap();
                    probe_loss(&n, &x, &wp, &wf)
                },
                &theta,
                &analytic,
                &GradCheckConfig::default(),
            );
            assert!(report.passed, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn backward_zero_and_linear() {
        let net = small_net(3);
        let x = inputs();
        let zero = probe_grads(&net, &x, &Matrix::zeros(3, 3), &Matrix::zeros(3, 4));
        assert!(zero.flatten().iter().all(|&v| v == 0.0));
        let wp = Matrix::from_rows(&vec![vec![0.3, -1.0, 0.2]; 3]);
        let wf = Matrix::from_rows(&vec![vec![0.2, 0.1, -0.3, 0.4]; 3]);
        let once = probe_grads(&net, &x, &wp, &wf).flatten();
        let twice = probe_grads(&net, &x, &wp.scale(2.0), &wf.scale(2.0)).flatten();
        for (a, b) in once.iter().zip(&twice) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = small_net(4);
        let (f, fc) = net.forward_features(&inputs()).unwrap();
        let (_, pc) = net.forward_probs(&f).unwrap();
        let mut opt = OptimizerState::new(&net, 0.1, 0.9);
        let grads = Gradients::zeros_like(&net);
        opt.sgd_step(&mut net, &grads).unwrap();
        let mut g = Gradients::zeros_like(&net);
        assert!(matches!(
            net.backward_probs(&pc, &Matrix::zeros(3, 3), &mut g),
            Err(Error::StaleCache { .. })
        ));
        assert!(net.backward_features(&fc, &Matrix::zeros(3, 4), &mut g).is_err());
    }

    #[test]
    fn sgd_recurrences() {
        let mut net = small_net(5);
        let before = net.flat_params();
        let mut opt = OptimizerState::new(&net, 1.0, 0.9);
        let zero = Gradients::zeros_like(&net);
        opt.sgd_step(&mut net, &zero).unwrap();
        assert_eq!(net.flat_params(), before);

        let g = Gradients::zeros_like(&net);
        let g = Gradients {
            blocks: g.blocks.iter().map(|b| Matrix::filled(b.rows(), b.cols(), 0.5)).collect(),
        };
        let mut plain = small_net(5);
        let mut sgd = OptimizerState::new(&plain, 0.1, 0.0);
        sgd.sgd_step(&mut plain, &g).unwrap();
        for (a, b) in plain.flat_params().iter().zip(&before) {
            assert!((a - (b - 0.05)).abs() < 1e-15);
        }

        let mut heavy = small_net(5);
        let mut opt = OptimizerState::new(&heavy, 1.0, 0.9);
        opt.sgd_step(&mut heavy, &g).unwrap();
        let after_one = heavy.flat_params();
        opt.sgd_step(&mut heavy, &g).unwrap();
        for (a, b) in heavy.flat_params().iter().zip(&after_one) {
            // second displacement is g + 0.9 g = 1.9 g
            assert!((b - a - 1.9 * 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut net = small_net(6);
        let before = net.clone();
        let mut g = Gradients::zeros_like(&net);
        g.blocks[2][(0, 0)] = f64::NAN;
        let mut opt = OptimizerState::new(&net, 0.1, 0.9);
        assert!(opt.sgd_step(&mut net, &g).is_err());
        assert_eq!(net.flat_params(), before.flat_params());
    }

    #[test]
    fn inverse_decay_schedule() {
        let s = LrSchedule::InverseDecay {
            gamma: 0.001,
            power: 0.75,
        };
        assert_eq!(s.rate(0.01, 0), 0.01);
        assert!((s.rate(0.01, 1000) - 0.01 * 2f64.powf(-0.75)).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.rate(0.3, 99), 0.3);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let net = small_net(7);
        let protos = PrototypeSet::from_matrix(
            Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 0.6, 0.8]]),
            0.9,
        )
        .unwrap();
        let bytes = checkpoint_bytes(&net, Some(&protos));
        assert_eq!(&bytes[..8], b"PROMMCKP");
        let (back, p) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(back.flat_params(), net.flat_params());
        assert_eq!(p.unwrap(), protos);

        let (_, none) = parse_checkpoint(&checkpoint_bytes(&net, None)).unwrap();
        assert!(none.is_none());

        let mut bad = bytes.clone();
        bad[40] ^= 0x01;
        assert!(parse_checkpoint(&bad).is_err());
        assert!(parse_checkpoint(&bytes[..bytes.len() - 9]).is_err());
    }
}
