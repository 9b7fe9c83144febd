use rand::Rng as _;

use crate::numkernel::{hconcat, Matrix, Tape, Var};
use crate::perfmodel::{EpisodeRecord, ModelConfig, Normalizer};
use crate::{Error, Result};

/// Fully connected layer `x W + b`, with `W: in x out` and `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    /// Uniform fan-in initialization in `[-1/sqrt(in), 1/sqrt(in)]`.
    pub fn init(input: usize, output: usize, rng: &mut crate::rng::Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let mut sample = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
        let weight = Matrix::from_vec(input, output, sample(input * output)).expect("shape");
        let bias = Matrix::from_vec(1, output, sample(output)).expect("shape");
        Self { weight, bias }
    }

    fn forward_plain(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.weight)?;
        let cols = out.cols();
        for r in 0..out.rows() {
            for c in 0..cols {
                out.set(r, c, out.get(r, c) + self.bias.get(0, c));
            }
        }
        Ok(out)
    }
}

/// ReLU multilayer perceptron with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn init(input: usize, hidden: &[usize], output: usize, rng: &mut crate::rng::Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for &h in hidden.iter().chain(std::iter::once(&output)) {
            layers.push(Dense::init(prev, h, rng));
            prev = h;
        }
        Self { layers }
    }

    pub fn forward_plain(&self, x: &Matrix) -> Result<Matrix> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_plain(&h)?;
            if i != last {
                h = h.map(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    /// `params` holds `(W, b)` per layer in order.
    fn forward_tracked<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        debug_assert_eq!(params.len(), 2 * self.layers.len());
        let tape = x.tape();
        let ones = tape.constant(Matrix::filled(x.shape().0, 1, 1.0));
        let last = self.layers.len() - 1;
        let mut h = x;
        for i in 0..self.layers.len() {
            let (w, b) = (params[2 * i], params[2 * i + 1]);
            h = h.matmul(&w)?.add(&ones.matmul(&b)?)?;
            if i != last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    fn param_count(&self) -> usize {
        2 * self.layers.len()
    }
}

/// Normalized network inputs for a batch of `B` records.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    /// `B x gain_dim`
    pub gains: Matrix,
    /// `B x task_dim`
    pub task: Matrix,
    /// `B x history_width`
    pub history: Matrix,
}

impl BatchInputs {
    pub fn len(&self) -> usize {
        self.gains.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Context encoder plus trunk. The trunk output row of each record reshapes
/// row-major into `Φ` of shape `metric_dim x basis_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisNetwork {
    pub config: ModelConfig,
    pub normalizer: Normalizer,
    pub encoder: Option<Mlp>,
    pub trunk: Mlp,
}

impl BasisNetwork {
    pub fn new(config: ModelConfig, normalizer: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        normalizer.validate()?;
        let mut rng = crate::rng::stream(seed, &[0x6e65_7477]);
        let encoder = config
            .use_context
            .then(|| Mlp::init(config.history_width(), &config.encoder_layers, config.encoded_dim, &mut rng));
        let trunk = Mlp::init(config.trunk_input_dim(), &config.trunk_layers, config.output_dim(), &mut rng);
        Ok(Self { config, normalizer, encoder, trunk })
    }

    fn check_history(&self, z_hist: &Matrix, u_hist: &Matrix) -> Result<()> {
        let c = &self.config;
        if !c.use_context {
            return Ok(());
        }
        if z_hist.shape() != (c.history_len, c.z_dim) || u_hist.shape() != (c.history_len, c.u_dim) {
            return Err(Error::InvalidInput(format!(
                "history shapes {:?}/{:?}, expected ({}, {})/({}, {})",
                z_hist.shape(),
                u_hist.shape(),
                c.history_len,
                c.z_dim,
                c.history_len,
                c.u_dim
            )));
        }
        Ok(())
    }

    fn check_finite(name: &str, values: &[f64]) -> Result<()> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value in {name}")));
        }
        Ok(())
    }

    fn normalized_history(&self, z_hist: &Matrix, u_hist: &Matrix) -> Result<Vec<f64>> {
        self.check_history(z_hist, u_hist)?;
        Self::check_finite("z history", z_hist.as_slice())?;
        Self::check_finite("u history", u_hist.as_slice())?;
        let mut row = vec![0.0; self.config.history_width()];
        if self.config.use_context {
            self.normalizer.history_row(z_hist, u_hist, &mut row);
        }
        Ok(row)
    }

    /// Context vector for a raw `(z, u)` history. Empty without a context encoder.
    pub fn encode_context(&self, z_hist: &Matrix, u_hist: &Matrix) -> Result<Vec<f64>> {
        let row = self.normalized_history(z_hist, u_hist)?;
        match &self.encoder {
            None => Ok(Vec::new()),
            Some(enc) => Ok(enc.forward_plain(&Matrix::row_vector(&row))?.into_vec()),
        }
    }

    /// Basis matrix `Φ` for one raw input.
    pub fn basis(&self, gains: &[f64], task: &[f64], z_hist: &Matrix, u_hist: &Matrix) -> Result<Matrix> {
        let mut out = self.basis_batch(&[gains.to_vec()], task, z_hist, u_hist)?;
        Ok(out.remove(0))
    }

    /// `Φ` for many candidate gains sharing one task and history. The context
    /// is encoded once and the trunk runs as a single batch.
    pub fn basis_batch(
        &self,
        gains: &[Vec<f64>],
        task: &[f64],
        z_hist: &Matrix,
        u_hist: &Matrix,
    ) -> Result<Vec<Matrix>> {
        let c = &self.config;
        if task.len() != c.task_dim {
            return Err(Error::InvalidInput(format!("task length {} != {}", task.len(), c.task_dim)));
        }
        Self::check_finite("task", task)?;
        let context = self.encode_context(z_hist, u_hist)?;
        let task_n = self.normalizer.task.normalize(task);
        let width = c.trunk_input_dim();
        let mut input = Matrix::zeros(gains.len(), width);
        for (i, g) in gains.iter().enumerate() {
            if g.len() != c.gain_dim {
                return Err(Error::InvalidInput(format!("gain length {} != {}", g.len(), c.gain_dim)));
            }
            Self::check_finite("gains", g)?;
            let row = &mut input.as_mut_slice()[i * width..(i + 1) * width];
            row[..context.len()].copy_from_slice(&context);
            self.normalizer.gain.normalize_into(g, &mut row[context.len()..context.len() + c.gain_dim]);
            row[context.len() + c.gain_dim..].copy_from_slice(&task_n);
        }
        let out = self.trunk.forward_plain(&input)?;
        (0..gains.len())
            .map(|i| Ok(Matrix::from_vec(c.metric_dim, c.basis_dim, out.row(i).to_vec())?))
            .collect()
    }

    /// Normalized inputs and targets for a set of records.
    pub fn prepare(&self, records: &[&EpisodeRecord]) -> Result<(BatchInputs, Matrix)> {
        let c = &self.config;
        let b = records.len();
        let mut gains = Matrix::zeros(b, c.gain_dim);
        let mut task = Matrix::zeros(b, c.task_dim);
        let mut history = Matrix::zeros(b, c.history_width());
        let mut targets = Matrix::zeros(b * c.metric_dim, 1);
        for (i, r) in records.iter().enumerate() {
            if r.gains.len() != c.gain_dim || r.task.len() != c.task_dim || r.metrics.len() != c.metric_dim {
                return Err(Error::InvalidInput("record dimensions do not match model config".into()));
            }
            Self::check_finite("metrics", &r.metrics)?;
            let hist = self.normalized_history(&r.z_hist, &r.u_hist)?;
            history.as_mut_slice()[i * hist.len()..(i + 1) * hist.len()].copy_from_slice(&hist);
            self.normalizer.gain.normalize_into(&r.gains, &mut gains.as_mut_slice()[i * c.gain_dim..(i + 1) * c.gain_dim]);
            self.normalizer.task.normalize_into(&r.task, &mut task.as_mut_slice()[i * c.task_dim..(i + 1) * c.task_dim]);
            self.normalizer.metric.normalize_into(
                &r.metrics,
                &mut targets.as_mut_slice()[i * c.metric_dim..(i + 1) * c.metric_dim],
            );
        }
        Ok((BatchInputs { gains, task, history }, targets))
    }

    /// Trunk output `B x (metric_dim * basis_dim)` without a tape.
    pub fn forward_plain(&self, inputs: &BatchInputs) -> Result<Matrix> {
        let b = inputs.len();
        let context = match &self.encoder {
            Some(enc) => enc.forward_plain(&inputs.history)?,
            None => Matrix::zeros(b, 0),
        };
        let x = Matrix::hconcat(&[&context, &inputs.gains, &inputs.task])?;
        self.trunk.forward_plain(&x)
    }

    /// Registers every weight and bias on `tape`: encoder layers first, then
    /// trunk layers, each as `(W, b)`.
    pub fn register<'t>(&self, tape: &'t Tape, tracked: bool) -> Vec<Var<'t>> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.trunk))
            .flat_map(|mlp| mlp.layers.iter())
            .flat_map(|layer| [layer.weight.clone(), layer.bias.clone()])
            .map(|m| if tracked { tape.param(m) } else { tape.constant(m) })
            .collect()
    }

    /// Mutable parameters in the order used by [`BasisNetwork::register`].
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.encoder
            .iter_mut()
            .chain(std::iter::once(&mut self.trunk))
            .flat_map(|mlp| mlp.layers.iter_mut())
            .flat_map(|layer| [&mut layer.weight, &mut layer.bias])
            .collect()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.trunk))
            .flat_map(|mlp| mlp.layers.iter())
            .flat_map(|layer| [&layer.weight, &layer.bias])
            .collect()
    }

    /// Differentiable trunk output for a batch.
    pub fn forward_tracked<'t>(&self, tape: &'t Tape, params: &[Var<'t>], inputs: &BatchInputs) -> Result<Var<'t>> {
        let enc_params = self.encoder.as_ref().map_or(0, Mlp::param_count);
        if params.len() != enc_params + self.trunk.param_count() {
            return Err(Error::InvalidInput("parameter list does not match network".into()));
        }
        let gains = tape.constant(inputs.gains.clone());
        let task = tape.constant(inputs.task.clone());
        let mut parts = Vec::with_capacity(3);
        if let Some(enc) = &self.encoder {
            let hist = tape.constant(inputs.history.clone());
            parts.push(enc.forward_tracked(&params[..enc_params], hist)?);
        }
        parts.push(gains);
        if self.config.task_dim > 0 {
            parts.push(task);
        }
        let x = hconcat(&parts)?;
        self.trunk.forward_tracked(&params[enc_params..], x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car_net() -> BasisNetwork {
        let cfg = ModelConfig::race_car(10);
        let norm = Normalizer::identity(6, 10, 3, 3, 3);
        BasisNetwork::new(cfg, norm, 11).unwrap()
    }

    fn random_history(seed: u64) -> (Matrix, Matrix) {
        let mut rng = crate::rng::stream(seed, &[]);
        let z = Matrix::from_vec(25, 3, (0..75).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let u = Matrix::from_vec(25, 3, (0..75).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        (z, u)
    }

    #[test]
    fn race_car_basis_shape() {
        let net = car_net();
        let (z, u) = random_history(1);
        let phi = net.basis(&[0.1; 6], &[0.0; 10], &z, &u).unwrap();
        assert_eq!(phi.shape(), (3, 5));
        assert!(phi.is_finite());
    }

    #[test]
    fn encode_context_is_deterministic() {
        let net = car_net();
        let (z, u) = random_history(2);
        let a = net.encode_context(&z, &u).unwrap();
        let b = net.encode_context(&z, &u).unwrap();
        assert_eq!(a.len(), 15);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_history_propagates_biases_only() {
        let net = car_net();
        let ctx = net.encode_context(&Matrix::zeros(25, 3), &Matrix::zeros(25, 3)).unwrap();
        let enc = net.encoder.as_ref().unwrap();
        let mut h = enc.layers[0].bias.clone();
        for (i, layer) in enc.layers.iter().enumerate().skip(1) {
            let _ = i;
            h = h.map(|v| v.max(0.0)).matmul(&layer.weight).unwrap().add(&layer.bias).unwrap();
        }
        for (a, b) in ctx.iter().zip(h.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn no_context_passes_through_empty() {
        let net = BasisNetwork::new(ModelConfig::branin(), Normalizer::identity(2, 0, 0, 0, 1), 3).unwrap();
        assert!(net.encoder.is_none());
        let empty = Matrix::zeros(0, 0);
        assert!(net.encode_context(&empty, &empty).unwrap().is_empty());
        assert_eq!(net.basis(&[1.0, 2.0], &[], &empty, &empty).unwrap().shape(), (1, 5));
    }

    #[test]
    fn wrong_history_length_is_rejected() {
        let net = car_net();
        let err = net.encode_context(&Matrix::zeros(24, 3), &Matrix::zeros(24, 3)).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn nan_input_is_rejected() {
        let net = car_net();
        let (z, u) = random_history(3);
        let mut g = vec![0.1; 6];
        g[2] = f64::NAN;
        assert!(net.basis(&g, &[0.0; 10], &z, &u).is_err());
    }

    #[test]
    fn tracked_and_plain_forward_agree() {
        let net = car_net();
        let mut rng = crate::rng::stream(9, &[]);
        let rec = |rng: &mut crate::rng::Rng| {
            let (z, u) = random_history(rng.random());
            EpisodeRecord {
                gains: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                task: (0..10).map(|_| rng.random_range(-1.0..1.0)).collect(),
                z_hist: z,
                u_hist: u,
                metrics: vec![0.0; 3],
                theta: vec![],
            }
        };
        let recs: Vec<_> = (0..4).map(|_| rec(&mut rng)).collect();
        let refs: Vec<_> = recs.iter().collect();
        let (inputs, _) = net.prepare(&refs).unwrap();
        let plain = net.forward_plain(&inputs).unwrap();
        let tape = Tape::new();
        let params = net.register(&tape, true);
        let tracked = net.forward_tracked(&tape, &params, &inputs).unwrap().value();
        assert!(plain.sub(&tracked).unwrap().max_abs() < 1e-12);
        let single = net.basis(&recs[1].gains, &recs[1].task, &recs[1].z_hist, &recs[1].u_hist).unwrap();
        assert!(single.as_slice().iter().zip(plain.row(1)).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn basis_is_continuous_in_gains() {
        let net = car_net();
        let (z, u) = random_history(4);
        let g = vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4];
        let base = net.basis(&g, &[0.1; 10], &z, &u).unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..8 {
            let eps = 10f64.powi(-k);
            let mut gp = g.clone();
            gp[0] += eps;
            let d = net.basis(&gp, &[0.1; 10], &z, &u).unwrap().sub(&base).unwrap().frobenius_norm();
            assert!(d <= prev + 1e-15, "eps={eps} d={d} prev={prev}");
            prev = d;
        }
        assert!(prev < 1e-6);
    }
}
