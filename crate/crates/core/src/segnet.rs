//! The per-pixel classifier standing in for a segmentation backbone: a
//! two-layer perceptron (F -> Hd, tanh, Hd -> K) applied independently at
//! every pixel, with hand-derived forward/backward passes for the
//! cross-entropy loss and the negative-entropy regularizer.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax, ParamVector, ProbVector, EPS_CLAMP};

/// Sign applied to the entropy regularizer in the local objective.
///
/// `Plus` adds `lambda * H` (a confidence penalty, H being negative
/// entropy); `Minus` subtracts it. Exposed as a knob because the two forms
/// both appear in the problem statement this simulator follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RegSign {
    #[default]
    Plus,
    Minus,
}

impl RegSign {
    pub fn factor(self) -> f64 {
        match self {
            RegSign::Plus => 1.0,
            RegSign::Minus => -1.0,
        }
    }
}

/// Architecture of the per-pixel classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Per-pixel input feature dimension F.
    pub feature_dim: usize,
    /// Hidden layer width.
    pub hidden_dim: usize,
    /// Number of classes K.
    pub class_count: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 1 || self.hidden_dim < 1 || self.class_count < 2 {
            return Err(Error::InvalidConfig(format!(
                "model config needs F >= 1, Hd >= 1, K >= 2; got F={}, Hd={}, K={}",
                self.feature_dim, self.hidden_dim, self.class_count
            )));
        }
        Ok(())
    }

    /// Total parameter count d = F*Hd + Hd + Hd*K + K.
    pub fn param_count(&self) -> usize {
        let (f, h, k) = (self.feature_dim, self.hidden_dim, self.class_count);
        f * h + h + h * k + k
    }

    /// Xavier-uniform initialization drawn from the given seed.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let (f, h, k) = (self.feature_dim, self.hidden_dim, self.class_count);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(self.param_count());
        let lim1 = (6.0 / (f + h) as f64).sqrt();
        for _ in 0..(f * h + h) {
            values.push(rng.random_range(-lim1..lim1));
        }
        let lim2 = (6.0 / (h + k) as f64).sqrt();
        for _ in 0..(h * k + k) {
            values.push(rng.random_range(-lim2..lim2));
        }
        ParamVector::new(values).expect("uniform draws are finite")
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        Ok(())
    }
}

/// A batch of labeled pixels, typically the pixels of a handful of images.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Flattened features, `pixel_count * feature_dim` values.
    pub features: Vec<f64>,
    /// One label per pixel, each `< class_count`.
    pub labels: Vec<usize>,
    pub feature_dim: usize,
    /// Ids of the images the pixels came from.
    pub image_ids: Vec<u64>,
}

impl Batch {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        feature_dim: usize,
        class_count: usize,
        image_ids: Vec<u64>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if features.len() != labels.len() * feature_dim {
            return Err(Error::Dimension(format!(
                "expected {} feature values, got {}",
                labels.len() * feature_dim,
                features.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidLabel(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Batch {
            features,
            labels,
            feature_dim,
            image_ids,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.labels.len()
    }

    fn pixel(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }
}

// Parameter layout: w1 (Hd x F, row-major by hidden unit), b1 (Hd),
// w2 (K x Hd, row-major by class), b2 (K).
struct Layout {
    f: usize,
    h: usize,
    k: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl Layout {
    fn of(config: &ModelConfig) -> Self {
        let (f, h, k) = (config.feature_dim, config.hidden_dim, config.class_count);
        Layout {
            f,
            h,
            k,
            b1: f * h,
            w2: f * h + h,
            b2: f * h + h + h * k,
        }
    }
}

fn pixel_forward(lay: &Layout, p: &[f64], x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
    for hi in 0..lay.h {
        let mut acc = p[lay.b1 + hi];
        let row = &p[hi * lay.f..(hi + 1) * lay.f];
        for (w, xf) in row.iter().zip(x) {
            acc += w * xf;
        }
        hidden[hi] = acc.tanh();
    }
    for ki in 0..lay.k {
        let mut acc = p[lay.b2 + ki];
        let row = &p[lay.w2 + ki * lay.h..lay.w2 + (ki + 1) * lay.h];
        for (w, hv) in row.iter().zip(hidden.iter()) {
            acc += w * hv;
        }
        logits[ki] = acc;
    }
}

/// Per-pixel class probabilities for the whole batch.
pub fn forward(config: &ModelConfig, params: &ParamVector, batch: &Batch) -> Result<Vec<ProbVector>> {
    config.check_params(params)?;
    if batch.feature_dim != config.feature_dim {
        return Err(Error::Dimension(format!(
            "batch feature dim {} != model feature dim {}",
            batch.feature_dim, config.feature_dim
        )));
    }
    let lay = Layout::of(config);
    let p = params.as_slice();
    let mut hidden = vec![0.0; lay.h];
    let mut logits = vec![0.0; lay.k];
    let mut out = Vec::with_capacity(batch.pixel_count());
    for i in 0..batch.pixel_count() {
        pixel_forward(&lay, p, batch.pixel(i), &mut hidden, &mut logits);
        out.push(softmax(&logits)?);
    }
    Ok(out)
}

/// Mean cross-entropy: `-(1/n) sum_i log p_i[label_i]`.
pub fn cross_entropy(probs: &[ProbVector], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} prob vectors vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut acc = 0.0;
    for (p, &l) in probs.iter().zip(labels) {
        acc -= p.as_slice()[l].max(EPS_CLAMP).ln();
    }
    Ok(acc / probs.len() as f64)
}

/// Mean negative entropy: `(1/n) sum_i sum_k p_k log p_k`. Always in
/// `[-ln K, 0]`.
pub fn negative_entropy(probs: &[ProbVector]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut acc = 0.0;
    for p in probs {
        for &pk in p.as_slice() {
            let pk = pk.max(EPS_CLAMP);
            acc += pk * pk.ln();
        }
    }
    Ok(acc / probs.len() as f64)
}

/// The regularized local objective: `CE + sign * lambda * H`.
pub fn objective(
    config: &ModelConfig,
    params: &ParamVector,
    batch: &Batch,
    lambda: f64,
    sign: RegSign,
) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
    }
    let probs = forward(config, params, batch)?;
    let ce = cross_entropy(&probs, &batch.labels)?;
    let h = negative_entropy(&probs)?;
    Ok(ce + sign.factor() * lambda * h)
}

/// Exact analytic gradient of [`objective`] with respect to the parameters.
pub fn backward(
    config: &ModelConfig,
    params: &ParamVector,
    batch: &Batch,
    lambda: f64,
    sign: RegSign,
) -> Result<ParamVector> {
    if lambda < 0.0 {
        return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
    }
    config.check_params(params)?;
    if batch.feature_dim != config.feature_dim {
        return Err(Error::Dimension(format!(
            "batch feature dim {} != model feature dim {}",
            batch.feature_dim, config.feature_dim
        )));
    }
    let lay = Layout::of(config);
    let p = params.as_slice();
    let n = batch.pixel_count() as f64;
    let slam = sign.factor() * lambda;

    let mut grad = vec![0.0; params.len()];
    let mut hidden = vec![0.0; lay.h];
    let mut logits = vec![0.0; lay.k];
    let mut gz = vec![0.0; lay.k];

    for i in 0..batch.pixel_count() {
        let x = batch.pixel(i);
        pixel_forward(&lay, p, x, &mut hidden, &mut logits);
        let probs = softmax(&logits)?;
        let pr = probs.as_slice();
        let label = batch.labels[i];

        // d(CE)/dz_k = p_k - y_k.
        // d(H)/dz_k  = p_k * (log p_k - sum_j p_j log p_j).
        let h_pix: f64 = pr.iter().map(|&pk| pk * pk.max(EPS_CLAMP).ln()).sum();
        for ki in 0..lay.k {
            let pk = pr[ki];
            let ce_term = pk - if ki == label { 1.0 } else { 0.0 };
            let ent_term = pk * (pk.max(EPS_CLAMP).ln() - h_pix);
            gz[ki] = (ce_term + slam * ent_term) / n;
        }

        for ki in 0..lay.k {
            grad[lay.b2 + ki] += gz[ki];
            let row = &mut grad[lay.w2 + ki * lay.h..lay.w2 + (ki + 1) * lay.h];
            for (g, hv) in row.iter_mut().zip(hidden.iter()) {
                *g += gz[ki] * hv;
            }
        }
        for hi in 0..lay.h {
            let mut da = 0.0;
            for ki in 0..lay.k {
                da += p[lay.w2 + ki * lay.h + hi] * gz[ki];
            }
            let dpre = da * (1.0 - hidden[hi] * hidden[hi]);
            grad[lay.b1 + hi] += dpre;
            let row = &mut grad[hi * lay.f..(hi + 1) * lay.f];
            for (g, xf) in row.iter_mut().zip(x) {
                *g += dpre * xf;
            }
        }
    }
    ParamVector::new(grad)
}
