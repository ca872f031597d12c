//! Convolutional VAE expressed through the tape: encoder, reparameterized
//! sampler, decoder, and the closed-form reconstruction / KL predicates.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnStats, Bound, ParameterSet, Real, Tape, Var};
use crate::error::{Error, Result};

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

pub const DEFAULT_MU_BOUND: f64 = 4.0;
pub const DEFAULT_LOGVAR_BOUND: f64 = 6.0;

/// Squash applied to the mean head with scale `mu_bound`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MuSquash {
    /// `b * tanh(x / b)`, saturating at `±b`.
    Tanh,
    /// `b * asinh(x / b)`: linear near 0, logarithmic growth beyond `b`.
    #[default]
    Asinh,
}

/// Encoder/decoder shape. The decoder mirrors the encoder's dense stack and
/// ends in a logistic squash onto the image grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub latent_size: usize,
    /// Output channels of each conv -> batch-norm -> relu -> 2x2 pool block.
    pub conv_depths: Vec<usize>,
    pub kernel: usize,
    /// Hidden dense widths after the conv stack (reversed in the decoder).
    pub dense_widths: Vec<usize>,
    pub batch_norm: bool,
    /// Scale `b` of the mean-head squash; 0 disables.
    pub mu_bound: f64,
    pub mu_squash: MuSquash,
    /// Soft bound on the logvar head, same form.
    pub logvar_bound: f64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            height: 32,
            width: 32,
            channels: 1,
            latent_size: 16,
            conv_depths: vec![32, 16],
            kernel: 3,
            dense_widths: vec![128],
            batch_norm: true,
            mu_bound: DEFAULT_MU_BOUND,
            mu_squash: MuSquash::default(),
            logvar_bound: DEFAULT_LOGVAR_BOUND,
        }
    }
}

impl ArchitectureConfig {
    /// The large configuration: four conv blocks of depth 128/64/32/16,
    /// dense 2048/1000/250 and 30 latent dimensions.
    pub fn reference(height: usize, width: usize, channels: usize) -> Self {
        ArchitectureConfig {
            height,
            width,
            channels,
            latent_size: 30,
            conv_depths: vec![128, 64, 32, 16],
            kernel: 3,
            dense_widths: vec![2048, 1000, 250],
            batch_norm: true,
            mu_bound: DEFAULT_MU_BOUND,
            mu_squash: MuSquash::default(),
            logvar_bound: DEFAULT_LOGVAR_BOUND,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("image extents must be >= 1".into()));
        }
        if self.latent_size == 0 {
            return Err(Error::Config("latent size must be >= 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        let div = 1usize << self.conv_depths.len();
        if self.height % div != 0 || self.width % div != 0 {
            return Err(Error::Config(format!(
                "{}x{} images cannot be pooled {} times",
                self.height,
                self.width,
                self.conv_depths.len()
            )));
        }
        if self.conv_depths.iter().chain(&self.dense_widths).any(|&d| d == 0) {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        if [self.mu_bound, self.logvar_bound].iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::Config("head bounds must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }

    fn flat_features(&self) -> usize {
        let div = 1usize << self.conv_depths.len();
        let c = self.conv_depths.last().copied().unwrap_or(self.channels);
        c * (self.height / div) * (self.width / div)
    }
}

/// Image with values in `[0, 1]`, stored channel-major (`C x H x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape("image", "extents must be >= 1"));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape("image", format!("{} values for {height}x{width}x{channels}", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageTensor { height, width, channels, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

/// Diagonal Gaussian posterior: mean and log-variance per latent dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl LatentCode {
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mu.len() != logvar.len() || mu.is_empty() {
            return Err(Error::shape("latent_code", format!("mu {} vs logvar {}", mu.len(), logvar.len())));
        }
        if mu.iter().chain(&logvar).any(|v| !v.is_finite()) {
            return Err(Error::Domain("latent code has non-finite entries".into()));
        }
        Ok(LatentCode { mu, logvar })
    }

    /// The standard-normal prior code of length `n`.
    pub fn prior(n: usize) -> Self {
        LatentCode { mu: vec![0.0; n], logvar: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

fn check_dims(dims: &[usize], n: usize) -> Result<()> {
    if let Some(&d) = dims.iter().find(|&&d| d >= n) {
        return Err(Error::Domain(format!("latent index {d} out of range for size {n}")));
    }
    Ok(())
}

/// Restricts a code to `dims`, in the given order.
pub fn project(code: &LatentCode, dims: &[usize]) -> Result<LatentCode> {
    check_dims(dims, code.len())?;
    Ok(LatentCode {
        mu: dims.iter().map(|&d| code.mu[d]).collect(),
        logvar: dims.iter().map(|&d| code.logvar[d]).collect(),
    })
}

/// All indices of `0..n` not in `dims`, ascending.
pub fn complement(dims: &[usize], n: usize) -> Vec<usize> {
    (0..n).filter(|d| !dims.contains(d)).collect()
}

/// Reparameterized draw `mu + exp(logvar / 2) * noise`.
pub fn sample(code: &LatentCode, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != code.len() {
        return Err(Error::shape("sample", format!("noise {} vs latent {}", noise.len(), code.len())));
    }
    Ok(code
        .mu
        .iter()
        .zip(&code.logvar)
        .zip(noise)
        .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
        .collect())
}

/// Mean squared error over all pixels and channels.
pub fn rec_predicate(x: &ImageTensor, xhat: &ImageTensor) -> Result<f64> {
    if x.dims() != xhat.dims() {
        return Err(Error::shape("rec_predicate", format!("{:?} vs {:?}", x.dims(), xhat.dims())));
    }
    let sse: f64 = x.data.iter().zip(&xhat.data).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    Ok(sse / x.data.len() as f64)
}

fn kl_dim(mu_a: f64, lv_a: f64, mu_b: f64, lv_b: f64) -> f64 {
    (lv_b - lv_a) / 2.0 + (lv_a.exp() + (mu_a - mu_b).powi(2)) / (2.0 * lv_b.exp()) - 0.5
}

/// KL divergence of the code to the standard-normal prior, averaged over
/// `dims`.
pub fn klu(code: &LatentCode, dims: &[usize]) -> Result<f64> {
    if dims.is_empty() {
        return Err(Error::Domain("klu over an empty dimension set".into()));
    }
    check_dims(dims, code.len())?;
    let s: f64 = dims.iter().map(|&d| -code.logvar[d] / 2.0 + (code.logvar[d].exp() + code.mu[d].powi(2)) / 2.0 - 0.5).sum();
    Ok((s / dims.len() as f64).max(0.0))
}

/// KL divergence `KL(a || b)` between two diagonal Gaussians, averaged over
/// `dims`. Not symmetric.
pub fn klt(a: &LatentCode, b: &LatentCode, dims: &[usize]) -> Result<f64> {
    if dims.is_empty() {
        return Err(Error::Domain("klt over an empty dimension set".into()));
    }
    if a.len() != b.len() {
        return Err(Error::shape("klt", format!("{} vs {}", a.len(), b.len())));
    }
    check_dims(dims, a.len())?;
    let s: f64 = dims.iter().map(|&d| kl_dim(a.mu[d], a.logvar[d], b.mu[d], b.logvar[d])).sum();
    Ok((s / dims.len() as f64).max(0.0))
}

/// Graph form of [`rec_predicate`] for a batch: `[n, ...] x2 -> [n]`.
pub fn rec_graph<T: Real>(t: &mut Tape<T>, x: Var, xhat: Var) -> Result<Var> {
    let d = t.sub(x, xhat)?;
    let sq = t.square(d);
    t.mean_rows(sq)
}

/// Graph form of [`klu`] over all columns: `[n, d] x2 -> [n]`.
pub fn klu_graph<T: Real>(t: &mut Tape<T>, mu: Var, logvar: Var) -> Result<Var> {
    let half = T::lit(0.5);
    let a = t.scale(logvar, -half);
    let e = t.exp(logvar);
    let m2 = t.square(mu);
    let s = t.add(e, m2)?;
    let s = t.scale(s, half);
    let v = t.add(a, s)?;
    let v = t.add_const(v, -half);
    t.mean_rows(v)
}

/// Graph form of [`klt`] over all columns: `KL(a || b)`, `[n, d] x4 -> [n]`.
pub fn klt_graph<T: Real>(t: &mut Tape<T>, mu_a: Var, lv_a: Var, mu_b: Var, lv_b: Var) -> Result<Var> {
    let half = T::lit(0.5);
    let dlv = t.sub(lv_b, lv_a)?;
    let first = t.scale(dlv, half);
    // 0.5 * (exp(lv_a - lv_b) + (mu_a - mu_b)^2 * exp(-lv_b)), without forming exp(lv_b) alone
    let ratio = t.scale(dlv, T::lit(-1.0));
    let ratio = t.exp(ratio);
    let dm = t.sub(mu_a, mu_b)?;
    let dm2 = t.square(dm);
    let inv_b = t.scale(lv_b, T::lit(-1.0));
    let inv_b = t.exp(inv_b);
    let spread = t.mul(dm2, inv_b)?;
    let second = t.add(ratio, spread)?;
    let second = t.scale(second, half);
    let v = t.add(first, second)?;
    let v = t.add_const(v, -half);
    t.mean_rows(v)
}

/// `b * tanh(x / b)`, written as `2b * sigmoid(2x / b) - b`; identity for `b = 0`.
fn soft_compress<T: Real>(t: &mut Tape<T>, x: Var, b: f64) -> Var {
    if b <= 0.0 {
        return x;
    }
    let s = t.scale(x, T::lit(1.0 / b));
    let s = t.asinh(s);
    t.scale(s, T::lit(b))
}

fn soft_bound<T: Real>(t: &mut Tape<T>, x: Var, b: f64) -> Var {
    if b <= 0.0 {
        return x;
    }
    let s = t.scale(x, T::lit(2.0 / b));
    let s = t.sigmoid(s);
    let s = t.scale(s, T::lit(2.0 * b));
    t.add_const(s, T::lit(-b))
}

/// Whether batch norm uses batch statistics or the running buffers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Graph outputs of one encoder pass.
pub struct Encoded {
    pub mu: Var,
    pub logvar: Var,
    pub bn_stats: Vec<(usize, BnStats<f64>)>,
}

/// A VAE: architecture plus named parameters and batch-norm buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Vae<T> {
    arch: ArchitectureConfig,
    params: ParameterSet<T>,
}

fn init_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data: Vec<T> = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("init size")
}

impl<T: Real> Vae<T> {
    /// He-initialized network; biases zero, batch-norm affine at identity.
    pub fn new(arch: ArchitectureConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        let k = arch.kernel;
        let mut in_c = arch.channels;
        for (i, &out_c) in arch.conv_depths.iter().enumerate() {
            let fan_in = (in_c * k * k) as f64;
            p.insert_param(format!("enc.conv{i}.w"), init_tensor(&mut rng, &[out_c, in_c, k, k], (2.0 / fan_in).sqrt()))?;
            if arch.batch_norm {
                p.insert_param(format!("enc.bn{i}.gamma"), ArrayD::from_elem(IxDyn(&[out_c]), T::one()))?;
                p.insert_param(format!("enc.bn{i}.beta"), ArrayD::zeros(IxDyn(&[out_c])))?;
                p.insert_buffer(format!("enc.bn{i}.running_mean"), ArrayD::zeros(IxDyn(&[out_c])))?;
                p.insert_buffer(format!("enc.bn{i}.running_var"), ArrayD::from_elem(IxDyn(&[out_c]), T::one()))?;
            } else {
                p.insert_param(format!("enc.conv{i}.b"), ArrayD::zeros(IxDyn(&[out_c])))?;
            }
            in_c = out_c;
        }
        let mut width = arch.flat_features();
        for (i, &h) in arch.dense_widths.iter().enumerate() {
            p.insert_param(format!("enc.fc{i}.w"), init_tensor(&mut rng, &[width, h], (2.0 / width as f64).sqrt()))?;
            p.insert_param(format!("enc.fc{i}.b"), ArrayD::zeros(IxDyn(&[h])))?;
            width = h;
        }
        let n = arch.latent_size;
        p.insert_param("enc.out.w", init_tensor(&mut rng, &[width, 2 * n], (1.0 / width as f64).sqrt()))?;
        p.insert_param("enc.out.b", ArrayD::zeros(IxDyn(&[2 * n])))?;

        let mut width = n;
        for (i, &h) in arch.dense_widths.iter().rev().enumerate() {
            p.insert_param(format!("dec.fc{i}.w"), init_tensor(&mut rng, &[width, h], (2.0 / width as f64).sqrt()))?;
            p.insert_param(format!("dec.fc{i}.b"), ArrayD::zeros(IxDyn(&[h])))?;
            width = h;
        }
        p.insert_param("dec.out.w", init_tensor(&mut rng, &[width, arch.pixels()], (1.0 / width as f64).sqrt()))?;
        p.insert_param("dec.out.b", ArrayD::zeros(IxDyn(&[arch.pixels()])))?;
        Ok(Vae { arch, params: p })
    }

    /// Rebuilds a model from stored parameters, checking every expected
    /// tensor is present with the right shape.
    pub fn from_parts(arch: ArchitectureConfig, params: ParameterSet<T>) -> Result<Self> {
        let fresh = Vae::<T>::new(arch.clone(), 0)?;
        for (name, entry) in fresh.params.iter() {
            let got = params.get(name)?;
            if got.shape() != entry.value.shape() {
                return Err(Error::shape("checkpoint", format!("{name}: {:?} vs {:?}", got.shape(), entry.value.shape())));
            }
        }
        if params.len() != fresh.params.len() {
            return Err(Error::Contract("checkpoint holds unexpected tensors".into()));
        }
        Ok(Vae { arch, params })
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    pub fn latent_size(&self) -> usize {
        self.arch.latent_size
    }

    /// Packs images into an `[n, c, h, w]` constant.
    pub fn images_to_tensor(&self, images: &[&ImageTensor]) -> Result<ArrayD<T>> {
        let a = &self.arch;
        let mut data = Vec::with_capacity(images.len() * a.pixels());
        for img in images {
            if img.dims() != (a.height, a.width, a.channels) {
                return Err(Error::shape(
                    "encode",
                    format!("image {:?} vs configured {:?}", img.dims(), (a.height, a.width, a.channels)),
                ));
            }
            data.extend(img.data.iter().map(|&v| T::lit(v as f64)));
        }
        Ok(ArrayD::from_shape_vec(IxDyn(&[images.len(), a.channels, a.height, a.width]), data).expect("image batch"))
    }

    /// Encoder graph: `[n, c, h, w] -> (mu [n, latent], logvar [n, latent])`.
    pub fn encode_graph(&self, t: &mut Tape<T>, b: &Bound, x: Var, mode: Mode) -> Result<Encoded> {
        let mut h = x;
        let mut stats = Vec::new();
        for i in 0..self.arch.conv_depths.len() {
            let bias = match self.arch.batch_norm {
                true => t.constant(ArrayD::zeros(IxDyn(&[self.arch.conv_depths[i]]))),
                false => b.get(&format!("enc.conv{i}.b"))?,
            };
            h = t.conv2d(h, b.get(&format!("enc.conv{i}.w"))?, bias)?;
            if self.arch.batch_norm {
                let gamma = b.get(&format!("enc.bn{i}.gamma"))?;
                let beta = b.get(&format!("enc.bn{i}.beta"))?;
                let (y, s) = match mode {
                    Mode::Train => t.batch_norm(h, gamma, beta, None)?,
                    Mode::Eval => {
                        let m: Vec<T> = self.params.get(&format!("enc.bn{i}.running_mean"))?.iter().copied().collect();
                        let v: Vec<T> = self.params.get(&format!("enc.bn{i}.running_var"))?.iter().copied().collect();
                        t.batch_norm(h, gamma, beta, Some((&m, &v)))?
                    }
                };
                if let Some(s) = s {
                    let to64 = |v: &[T]| v.iter().map(|x| x.to_f64().unwrap_or(0.0)).collect();
                    stats.push((i, BnStats { mean: to64(&s.mean), var: to64(&s.var) }));
                }
                h = y;
            }
            h = t.relu(h);
            h = t.max_pool2(h)?;
        }
        let n = t.shape(h)[0];
        h = t.reshape(h, &[n, self.arch.flat_features()])?;
        for i in 0..self.arch.dense_widths.len() {
            h = t.dense(h, b.get(&format!("enc.fc{i}.w"))?, b.get(&format!("enc.fc{i}.b"))?)?;
            h = t.relu(h);
        }
        let out = t.dense(h, b.get("enc.out.w")?, b.get("enc.out.b")?)?;
        let latent = self.arch.latent_size;
        let mu_idx: Vec<usize> = (0..latent).collect();
        let lv_idx: Vec<usize> = (latent..2 * latent).collect();
        let mu = t.cols(out, &mu_idx)?;
        let mu = match self.arch.mu_squash {
            MuSquash::Tanh => soft_bound(t, mu, self.arch.mu_bound),
            MuSquash::Asinh => soft_compress(t, mu, self.arch.mu_bound),
        };
        let logvar = t.cols(out, &lv_idx)?;
        let logvar = soft_bound(t, logvar, self.arch.logvar_bound);
        Ok(Encoded { mu, logvar, bn_stats: stats })
    }

    /// Reparameterized sample `mu + exp(logvar / 2) * noise`.
    pub fn sample_graph(t: &mut Tape<T>, mu: Var, logvar: Var, noise: Var) -> Result<Var> {
        let half = t.scale(logvar, T::lit(0.5));
        let sigma = t.exp(half);
        let eps = t.mul(sigma, noise)?;
        t.add(mu, eps)
    }

    /// Decoder graph: `[n, latent] -> [n, c, h, w]` in `(0, 1)`.
    pub fn decode_graph(&self, t: &mut Tape<T>, b: &Bound, z: Var) -> Result<Var> {
        let zs = t.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.arch.latent_size {
            return Err(Error::shape("decode", format!("latent batch {zs:?} vs size {}", self.arch.latent_size)));
        }
        let mut h = z;
        for i in 0..self.arch.dense_widths.len() {
            h = t.dense(h, b.get(&format!("dec.fc{i}.w"))?, b.get(&format!("dec.fc{i}.b"))?)?;
            h = t.relu(h);
        }
        let logits = t.dense(h, b.get("dec.out.w")?, b.get("dec.out.b")?)?;
        let img = t.sigmoid(logits);
        let a = &self.arch;
        t.reshape(img, &[zs[0], a.channels, a.height, a.width])
    }

    /// Folds observed batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(usize, BnStats<f64>)]) -> Result<()> {
        let m = T::lit(BN_MOMENTUM);
        for (i, s) in stats {
            let rm = self.params.get_mut(&format!("enc.bn{i}.running_mean"))?;
            for (r, &v) in rm.iter_mut().zip(&s.mean) {
                *r = (T::one() - m) * *r + m * T::lit(v);
            }
            let rv = self.params.get_mut(&format!("enc.bn{i}.running_var"))?;
            for (r, &v) in rv.iter_mut().zip(&s.var) {
                *r = (T::one() - m) * *r + m * T::lit(v);
            }
        }
        Ok(())
    }

    /// Inference-mode encoding of a batch; order preserved.
    pub fn encode(&self, images: &[&ImageTensor]) -> Result<Vec<LatentCode>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(256) {
            let mut t = Tape::new();
            let b = t.bind(&self.params);
            let x = t.constant(self.images_to_tensor(chunk)?);
            let enc = self.encode_graph(&mut t, &b, x, Mode::Eval)?;
            t.check_finite()?;
            let (mu, lv) = (t.value(enc.mu), t.value(enc.logvar));
            for i in 0..chunk.len() {
                let row = |a: &ArrayD<T>| a.index_axis(ndarray::Axis(0), i).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
                out.push(LatentCode::new(row(mu), row(lv))?);
            }
        }
        Ok(out)
    }

    /// Decodes latent vectors into images; order preserved.
    pub fn decode(&self, zs: &[Vec<f64>]) -> Result<Vec<ImageTensor>> {
        let n = self.arch.latent_size;
        if let Some(z) = zs.iter().find(|z| z.len() != n) {
            return Err(Error::shape("decode", format!("latent vector of length {} vs {n}", z.len())));
        }
        let mut out = Vec::with_capacity(zs.len());
        for chunk in zs.chunks(256) {
            let mut t = Tape::new();
            let b = t.bind(&self.params);
            let data: Vec<T> = chunk.iter().flatten().map(|&v| T::lit(v)).collect();
            let z = t.constant(ArrayD::from_shape_vec(IxDyn(&[chunk.len(), n]), data).expect("latent batch"));
            let img = self.decode_graph(&mut t, &b, z)?;
            t.check_finite()?;
            let a = &self.arch;
            for row in t.value(img).outer_iter() {
                let data = row.iter().map(|v| v.to_f32().unwrap_or(0.0).clamp(0.0, 1.0)).collect();
                out.push(ImageTensor::new(a.height, a.width, a.channels, data)?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(mu: &[f64], lv: &[f64]) -> LatentCode {
        LatentCode::new(mu.to_vec(), lv.to_vec()).unwrap()
    }

    fn tiny_arch() -> ArchitectureConfig {
        ArchitectureConfig {
            height: 8,
            width: 8,
            channels: 1,
            latent_size: 4,
            conv_depths: vec![3],
            kernel: 3,
            dense_widths: vec![6],
            batch_norm: true,
            mu_bound: DEFAULT_MU_BOUND,
            mu_squash: MuSquash::default(),
            logvar_bound: DEFAULT_LOGVAR_BOUND,
        }
    }

    fn image(v: f32) -> ImageTensor {
        ImageTensor::new(8, 8, 1, (0..64).map(|i| (v + i as f32 / 128.0).min(1.0)).collect()).unwrap()
    }

    #[test]
    fn sample_examples() {
        let c = code(&[1.0, -2.0], &[0.7, -0.3]);
        assert_eq!(sample(&c, &[0.0, 0.0]).unwrap(), vec![1.0, -2.0]);
        let unit = code(&[1.0, -2.0], &[0.0, 0.0]);
        assert_eq!(sample(&unit, &[0.5, 0.25]).unwrap(), vec![1.5, -1.75]);
        assert!(sample(&c, &[0.0]).is_err());
    }

    #[test]
    fn rec_examples() {
        let ones = ImageTensor::new(2, 2, 1, vec![1.0; 4]).unwrap();
        let zeros = ImageTensor::new(2, 2, 1, vec![0.0; 4]).unwrap();
        assert_eq!(rec_predicate(&ones, &ones).unwrap(), 0.0);
        assert_eq!(rec_predicate(&ones, &zeros).unwrap(), 1.0);
        let half = ImageTensor::new(2, 2, 1, vec![0.25; 4]).unwrap();
        let quarter = ImageTensor::new(2, 2, 1, vec![0.125; 4]).unwrap();
        let a = rec_predicate(&zeros, &quarter).unwrap();
        let b = rec_predicate(&zeros, &half).unwrap();
        assert!((b - 4.0 * a).abs() < 1e-12);
        let other = ImageTensor::new(2, 1, 2, vec![0.0; 4]).unwrap();
        assert!(rec_predicate(&ones, &other).is_err());
    }

    #[test]
    fn kl_examples() {
        let all = [0usize];
        assert_eq!(klu(&code(&[0.0], &[0.0]), &all).unwrap(), 0.0);
        assert!((klu(&code(&[1.0], &[0.0]), &all).unwrap() - 0.5).abs() < 1e-12);
        assert!((klu(&code(&[0.0], &[2f64.ln()]), &all).unwrap() - 0.15343).abs() < 1e-5);

        let p = code(&[0.0], &[0.0]);
        assert_eq!(klt(&p, &p, &all).unwrap(), 0.0);
        assert!((klt(&p, &code(&[1.0], &[0.0]), &all).unwrap() - 0.5).abs() < 1e-12);
        assert!((klt(&p, &code(&[0.0], &[2f64.ln()]), &all).unwrap() - 0.09657).abs() < 1e-5);

        assert!(klu(&p, &[]).is_err());
        assert!(klt(&p, &p, &[]).is_err());
        assert!(klu(&p, &[1]).is_err());
    }

    #[test]
    fn klt_is_asymmetric() {
        let a = code(&[0.0], &[0.0]);
        let b = code(&[0.0], &[2f64.ln()]);
        let ab = klt(&a, &b, &[0]).unwrap();
        let ba = klt(&b, &a, &[0]).unwrap();
        assert!((ab - ba).abs() > 0.05, "{ab} vs {ba}");
    }

    #[test]
    fn project_examples() {
        let c = LatentCode::new((0..30).map(|i| i as f64).collect(), vec![0.0; 30]).unwrap();
        let all: Vec<usize> = (0..30).collect();
        assert_eq!(project(&c, &all).unwrap(), c);
        let three = project(&c, &[3]).unwrap();
        assert_eq!(three.mu, vec![3.0]);
        let comp = complement(&[3], 30);
        assert_eq!(comp.len(), 29);
        let mut union: Vec<usize> = comp.iter().copied().chain([3]).collect();
        union.sort_unstable();
        assert_eq!(union, all);
        assert!(project(&c, &[30]).is_err());
    }

    #[test]
    fn graph_predicates_match_closed_forms() {
        let mut t = Tape::<f64>::new();
        let a = code(&[0.3, -1.2, 0.5], &[0.1, -0.4, 0.9]);
        let b = code(&[-0.7, 0.2, 0.5], &[0.6, 0.0, -0.2]);
        let row = |c: &LatentCode, lv: bool| {
            ArrayD::from_shape_vec(IxDyn(&[1, 3]), if lv { c.logvar.clone() } else { c.mu.clone() }).unwrap()
        };
        let (ma, la, mb, lb) = (t.constant(row(&a, false)), t.constant(row(&a, true)), t.constant(row(&b, false)), t.constant(row(&b, true)));
        let dims = [0, 1, 2];
        let ku = klu_graph(&mut t, ma, la).unwrap();
        assert!((t.scalar(ku) - klu(&a, &dims).unwrap()).abs() < 1e-12);
        let kt = klt_graph(&mut t, ma, la, mb, lb).unwrap();
        assert!((t.scalar(kt) - klt(&a, &b, &dims).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_contracts() {
        let vae = Vae::<f32>::new(tiny_arch(), 3).unwrap();
        let imgs = [image(0.1), image(0.5), image(0.1)];
        let refs: Vec<&ImageTensor> = imgs.iter().collect();
        let codes = vae.encode(&refs).unwrap();
        assert_eq!(codes.len(), 3);
        assert!(codes.iter().all(|c| c.len() == 4));
        assert_eq!(codes[0], codes[2]);
        assert_ne!(codes[0], codes[1]);
        let single = vae.encode(&[&imgs[1]]).unwrap();
        assert_eq!(single[0], codes[1]);

        let zs = vec![vec![0.0; 4], vec![3.0, -3.0, 1.0, 0.5], vec![0.0; 4]];
        let out = vae.decode(&zs).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0], out[2]);
        assert!(out.iter().all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(vae.decode(&[vec![0.0; 3]]).is_err());

        let wrong = ImageTensor::new(4, 4, 1, vec![0.0; 16]).unwrap();
        assert!(matches!(vae.encode(&[&wrong]).unwrap_err(), Error::Shape { .. }));
    }

    #[test]
    fn architecture_validation() {
        let mut a = tiny_arch();
        a.height = 6;
        a.conv_depths = vec![2, 2];
        assert!(a.validate().is_err());
        let mut a = tiny_arch();
        a.kernel = 2;
        assert!(a.validate().is_err());
        assert!(ArchitectureConfig::default().validate().is_ok());
        assert!(ArchitectureConfig::reference(64, 64, 3).validate().is_ok());
    }
}
