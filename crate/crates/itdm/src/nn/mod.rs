//! Feedforward models with exact manual backpropagation.
//!
//! A model is a feature extractor (dense or conv+pool layers, ReLU
//! activations) followed by a linear classifier. The backward pass accepts an
//! optional extra gradient at the feature layer, which is how the matching
//! loss reaches the extractor without a second autodiff graph: the trainer
//! backpropagates the cross-entropy gradient and the feature-space match
//! gradient in one pass.

mod conv;
mod optimizer;

pub use optimizer::Optimizer;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Architecture selector for [`build_model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Mlp,
    SmallCnn,
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchKind::Mlp => write!(f, "mlp"),
            ArchKind::SmallCnn => write!(f, "smallcnn"),
        }
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ArchKind::Mlp),
            "smallcnn" => Ok(ArchKind::SmallCnn),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture '{other}' (expected mlp|smallcnn)"
            ))),
        }
    }
}

/// Fully connected layer, weights `[in, out]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    w: Tensor,
    b: Tensor,
    relu: bool,
}

impl DenseLayer {
    fn he_init(input: usize, output: usize, relu: bool, rng: &mut Rng) -> Result<Self> {
        let scale = (2.0 / input as f64).sqrt();
        let w = Tensor::new(
            vec![input, output],
            rng.normal_vec(input * output)
                .into_iter()
                .map(|v| v * scale)
                .collect(),
        )?;
        Ok(DenseLayer {
            w,
            b: Tensor::zeros(vec![output]),
            relu,
        })
    }

    fn affine(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = x.matmul(&self.w)?;
        let out = self.b.len();
        for r in 0..z.dim(0) {
            let row = &mut z.data_mut()[r * out..(r + 1) * out];
            for (v, b) in row.iter_mut().zip(self.b.data()) {
                *v += b;
            }
        }
        Ok(z)
    }
}

/// 3x3 pad-1 convolution + ReLU + 2x2 max pool, NHWC, weights `[9*in_ch, out_ch]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvPoolLayer {
    w: Tensor,
    b: Tensor,
    in_ch: usize,
    out_ch: usize,
    in_h: usize,
    in_w: usize,
}

impl ConvPoolLayer {
    fn he_init(in_ch: usize, out_ch: usize, in_h: usize, in_w: usize, rng: &mut Rng) -> Result<Self> {
        if !in_h.is_multiple_of(2) || !in_w.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "conv+pool input {in_h}x{in_w} must have even sides"
            )));
        }
        let fan_in = 9 * in_ch;
        let scale = (2.0 / fan_in as f64).sqrt();
        let w = Tensor::new(
            vec![fan_in, out_ch],
            rng.normal_vec(fan_in * out_ch)
                .into_iter()
                .map(|v| v * scale)
                .collect(),
        )?;
        Ok(ConvPoolLayer {
            w,
            b: Tensor::zeros(vec![out_ch]),
            in_ch,
            out_ch,
            in_h,
            in_w,
        })
    }

    fn output_features(&self) -> usize {
        (self.in_h / 2) * (self.in_w / 2) * self.out_ch
    }

    fn input_features(&self) -> usize {
        self.in_h * self.in_w * self.in_ch
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Layer {
    Dense(DenseLayer),
    ConvPool(ConvPoolLayer),
}

impl Layer {
    fn input_features(&self) -> usize {
        match self {
            Layer::Dense(l) => l.w.dim(0),
            Layer::ConvPool(l) => l.input_features(),
        }
    }

    fn forward(&self, x: Tensor) -> Result<(Tensor, LayerCache)> {
        let m = x.dim(0);
        match self {
            Layer::Dense(l) => {
                let z = l.affine(&x)?;
                let mut a = z.clone();
                if l.relu {
                    for v in a.data_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                Ok((a, LayerCache::Dense { x, z }))
            }
            Layer::ConvPool(l) => {
                let (h, w, c) = (l.in_h, l.in_w, l.in_ch);
                let cols = Tensor::new(
                    vec![m * h * w, 9 * c],
                    conv::im2col_3x3(x.data(), m, h, w, c),
                )?;
                let mut z = cols.matmul(&l.w)?;
                let oc = l.out_ch;
                for r in 0..z.dim(0) {
                    let row = &mut z.data_mut()[r * oc..(r + 1) * oc];
                    for (v, b) in row.iter_mut().zip(l.b.data()) {
                        *v += b;
                    }
                }
                let mut activated = z.data().to_vec();
                for v in &mut activated {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                let (pooled, pool_src) = conv::maxpool2(&activated, m, h, w, oc);
                let out = Tensor::new(vec![m, l.output_features()], pooled)?;
                Ok((out, LayerCache::ConvPool { cols, z, pool_src }))
            }
        }
    }

    /// Reverse-mode step: accumulate parameter gradients into `pg` and return
    /// the gradient with respect to this layer's input.
    fn backward(&self, cache: &LayerCache, dout: &Tensor, pg: &mut ParamGrad) -> Result<Tensor> {
        match (self, cache) {
            (Layer::Dense(l), LayerCache::Dense { x, z }) => {
                let mut dz = dout.clone();
                if l.relu {
                    for (g, zv) in dz.data_mut().iter_mut().zip(z.data()) {
                        if *zv <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
                pg.dw = x.transposed()?.matmul(&dz)?;
                pg.db = column_sums(&dz)?;
                dz.matmul(&l.w.transposed()?)
            }
            (Layer::ConvPool(l), LayerCache::ConvPool { cols, z, pool_src }) => {
                let m = dout.dim(0);
                let unpooled = conv::maxpool2_backward(dout.data(), pool_src, z.len());
                let mut dz = Tensor::new(vec![m * l.in_h * l.in_w, l.out_ch], unpooled)?;
                for (g, zv) in dz.data_mut().iter_mut().zip(z.data()) {
                    if *zv <= 0.0 {
                        *g = 0.0;
                    }
                }
                pg.dw = cols.transposed()?.matmul(&dz)?;
                pg.db = column_sums(&dz)?;
                let dcols = dz.matmul(&l.w.transposed()?)?;
                let dinput = conv::col2im_3x3(dcols.data(), m, l.in_h, l.in_w, l.in_ch);
                Tensor::new(vec![m, l.input_features()], dinput)
            }
            _ => Err(Error::ShapeMismatch(
                "layer cache does not match layer kind".into(),
            )),
        }
    }
}

fn column_sums(t: &Tensor) -> Result<Tensor> {
    let m = t.dim(1);
    let mut out = vec![0.0; m];
    for row in t.data().chunks_exact(m) {
        for (acc, v) in out.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Tensor::new(vec![m], out)
}

/// Per-layer intermediate values for one forward pass.
#[derive(Debug, Clone)]
enum LayerCache {
    Dense {
        x: Tensor,
        z: Tensor,
    },
    ConvPool {
        cols: Tensor,
        z: Tensor,
        pool_src: Vec<usize>,
    },
}

/// Everything [`Model::backward`] needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    batch: usize,
    layers: Vec<LayerCache>,
    features: Tensor,
    logits: Tensor,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

/// Gradient of one weight/bias pair.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub dw: Tensor,
    pub db: Tensor,
}

/// Gradients for every parameter block of a [`Model`], in model order.
#[derive(Debug, Clone)]
pub struct GradientSet {
    layers: Vec<ParamGrad>,
    classifier: ParamGrad,
}

impl GradientSet {
    pub fn zeros_like(model: &Model) -> Self {
        let layers = model
            .extractor
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => ParamGrad {
                    dw: Tensor::zeros(d.w.shape().to_vec()),
                    db: Tensor::zeros(d.b.shape().to_vec()),
                },
                Layer::ConvPool(c) => ParamGrad {
                    dw: Tensor::zeros(c.w.shape().to_vec()),
                    db: Tensor::zeros(c.b.shape().to_vec()),
                },
            })
            .collect();
        GradientSet {
            layers,
            classifier: ParamGrad {
                dw: Tensor::zeros(model.classifier.w.shape().to_vec()),
                db: Tensor::zeros(model.classifier.b.shape().to_vec()),
            },
        }
    }

    /// Parameter-wise sum, shapes must be congruent.
    pub fn add_assign(&mut self, other: &GradientSet) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::ShapeMismatch(
                "gradient sets come from different models".into(),
            ));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.dw.add_scaled_assign(&b.dw, 1.0)?;
            a.db.add_scaled_assign(&b.db, 1.0)?;
        }
        self.classifier.dw.add_scaled_assign(&other.classifier.dw, 1.0)?;
        self.classifier.db.add_scaled_assign(&other.classifier.db, 1.0)?;
        Ok(())
    }

    pub fn classifier(&self) -> &ParamGrad {
        &self.classifier
    }

    pub fn layer(&self, i: usize) -> &ParamGrad {
        &self.layers[i]
    }

    /// All gradient tensors in the model's fixed parameter order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for pg in &self.layers {
            out.push(&pg.dw);
            out.push(&pg.db);
        }
        out.push(&self.classifier.dw);
        out.push(&self.classifier.db);
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for pg in &mut self.layers {
            out.push(&mut pg.dw);
            out.push(&mut pg.db);
        }
        out.push(&mut self.classifier.dw);
        out.push(&mut self.classifier.db);
        out
    }

    /// Flattened copy in parameter order; test plumbing.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    model: Model,
}

/// Feature extractor plus linear classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    extractor: Vec<Layer>,
    classifier: DenseLayer,
    feature_dim: usize,
    num_classes: usize,
    input_shape: Vec<usize>,
    #[serde(skip)]
    version: u64,
}

/// Build one of the two reference architectures.
///
/// `mlp`: dense(in, 64) ReLU, dense(64, d) ReLU.
/// `smallcnn` (input `[h, w]`, one channel): conv(1, 8) ReLU pool,
/// conv(8, 16) ReLU pool, dense(16*(h/4)*(w/4), d) ReLU.
/// Both end in a linear classifier dense(d, K). He-scaled initialization.
pub fn build_model(
    kind: ArchKind,
    input_shape: &[usize],
    feature_dim: usize,
    num_classes: usize,
    rng: &mut Rng,
) -> Result<Model> {
    if feature_dim == 0 || num_classes == 0 || input_shape.iter().product::<usize>() == 0 {
        return Err(Error::InvalidArgument(
            "model dims must be positive".into(),
        ));
    }
    let extractor = match kind {
        ArchKind::Mlp => {
            let input: usize = input_shape.iter().product();
            vec![
                Layer::Dense(DenseLayer::he_init(input, 64, true, rng)?),
                Layer::Dense(DenseLayer::he_init(64, feature_dim, true, rng)?),
            ]
        }
        ArchKind::SmallCnn => {
            let [h, w] = input_shape else {
                return Err(Error::InvalidArgument(format!(
                    "smallcnn expects a [rows, cols] input shape, got {input_shape:?}"
                )));
            };
            if !h.is_multiple_of(4) || !w.is_multiple_of(4) {
                return Err(Error::InvalidArgument(format!(
                    "smallcnn pools twice; input {h}x{w} must be divisible by 4"
                )));
            }
            let conv1 = ConvPoolLayer::he_init(1, 8, *h, *w, rng)?;
            let conv2 = ConvPoolLayer::he_init(8, 16, h / 2, w / 2, rng)?;
            let flat = conv2.output_features();
            vec![
                Layer::ConvPool(conv1),
                Layer::ConvPool(conv2),
                Layer::Dense(DenseLayer::he_init(flat, feature_dim, true, rng)?),
            ]
        }
    };
    let classifier = DenseLayer::he_init(feature_dim, num_classes, false, rng)?;
    Ok(Model {
        extractor,
        classifier,
        feature_dim,
        num_classes,
        input_shape: input_shape.to_vec(),
        version: 0,
    })
}

impl Model {
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_features(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.extractor.len() + 2);
        for layer in &self.extractor {
            match layer {
                Layer::Dense(l) => {
                    out.push(&l.w);
                    out.push(&l.b);
                }
                Layer::ConvPool(l) => {
                    out.push(&l.w);
                    out.push(&l.b);
                }
            }
        }
        out.push(&self.classifier.w);
        out.push(&self.classifier.b);
        out
    }

    pub(crate) fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.extractor.len() + 2);
        for layer in &mut self.extractor {
            match layer {
                Layer::Dense(l) => {
                    out.push(&mut l.w);
                    out.push(&mut l.b);
                }
                Layer::ConvPool(l) => {
                    out.push(&mut l.w);
                    out.push(&mut l.b);
                }
            }
        }
        out.push(&mut self.classifier.w);
        out.push(&mut self.classifier.b);
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameters flattened in the model's fixed order.
    pub fn params_flat(&self) -> Vec<f64> {
        self.param_tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Overwrite all parameters from a flat slice (inverse of
    /// [`Model::params_flat`]). Invalidates outstanding forward caches.
    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in self.param_tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        self.bump_version();
        self.check_finite()
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        for t in self.param_tensors() {
            t.check_finite("model parameters")?;
        }
        Ok(())
    }

    /// Deterministic forward pass. Returns the cache for backpropagation, the
    /// latent features `[m, d]` (post-activation output of the last extractor
    /// layer), and the classifier logits `[m, K]`.
    pub fn forward(&self, x: &Tensor) -> Result<(ForwardCache, Tensor, Tensor)> {
        let m = x.rows();
        if m == 0 {
            return Err(Error::EmptyInput("forward batch"));
        }
        if x.row_len() != self.input_features() {
            return Err(Error::ShapeMismatch(format!(
                "input rows have {} features, model expects {:?}",
                x.row_len(),
                self.input_shape
            )));
        }
        let mut cur = x.clone().reshape(vec![m, self.input_features()])?;
        let mut layer_caches = Vec::with_capacity(self.extractor.len());
        for layer in &self.extractor {
            if cur.dim(1) != layer.input_features() {
                return Err(Error::ShapeMismatch(format!(
                    "layer expects {} input features, got {}",
                    layer.input_features(),
                    cur.dim(1)
                )));
            }
            let (out, cache) = layer.forward(cur)?;
            layer_caches.push(cache);
            cur = out;
        }
        let features = cur;
        if features.dim(1) != self.feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "extractor produced {} features, classifier expects {}",
                features.dim(1),
                self.feature_dim
            )));
        }
        let logits = self.classifier.affine(&features)?;
        let cache = ForwardCache {
            version: self.version,
            batch: m,
            layers: layer_caches,
            features: features.clone(),
            logits: logits.clone(),
        };
        Ok((cache, features, logits))
    }

    /// Exact reverse-mode gradients for the scalar objective
    /// `<dlogits, logits> + <dfeatures_extra, features>` under the forward
    /// pass recorded in `cache`.
    ///
    /// With `dlogits` absent (the second-batch pass of the matching update)
    /// the classifier receives exactly zero gradient: only the extractor sees
    /// the feature-space signal.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: Option<&Tensor>,
        dfeatures_extra: Option<&Tensor>,
    ) -> Result<GradientSet> {
        if cache.version != self.version {
            return Err(Error::StaleCache {
                model: self.version,
                cache: cache.version,
            });
        }
        if dlogits.is_none() && dfeatures_extra.is_none() {
            return Err(Error::InvalidArgument(
                "backward needs dlogits and/or dfeatures_extra".into(),
            ));
        }
        let m = cache.batch;
        let mut grads = GradientSet::zeros_like(self);
        let mut dfeatures = Tensor::zeros(vec![m, self.feature_dim]);
        if let Some(dl) = dlogits {
            if dl.shape() != [m, self.num_classes] {
                return Err(Error::ShapeMismatch(format!(
                    "dlogits shape {:?}, expected [{m}, {}]",
                    dl.shape(),
                    self.num_classes
                )));
            }
            grads.classifier.dw = cache.features.transposed()?.matmul(dl)?;
            grads.classifier.db = column_sums(dl)?;
            dfeatures.add_scaled_assign(&dl.matmul(&self.classifier.w.transposed()?)?, 1.0)?;
        }
        if let Some(df) = dfeatures_extra {
            if df.shape() != [m, self.feature_dim] {
                return Err(Error::ShapeMismatch(format!(
                    "dfeatures_extra shape {:?}, expected [{m}, {}]",
                    df.shape(),
                    self.feature_dim
                )));
            }
            dfeatures.add_scaled_assign(df, 1.0)?;
        }
        let mut dcur = dfeatures;
        for (i, (layer, lc)) in self
            .extractor
            .iter()
            .zip(&cache.layers)
            .enumerate()
            .rev()
        {
            dcur = layer.backward(lc, &dcur, &mut grads.layers[i])?;
        }
        Ok(grads)
    }

    /// Write a versioned JSON checkpoint; numbers round-trip bit-exactly.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(
            std::io::BufWriter::new(file),
            &Checkpoint {
                format_version: CHECKPOINT_VERSION,
                model: self.clone(),
            },
        )?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                expected: CHECKPOINT_VERSION,
                found: ckpt.format_version,
            });
        }
        ckpt.model.check_finite()?;
        Ok(ckpt.model)
    }
}

/// Mean negative log-likelihood of the true classes under a max-subtracted
/// softmax, plus its logits gradient `(softmax - onehot) / m`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.ndim() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "logits must be 2-D, got {:?}",
            logits.shape()
        )));
    }
    let (m, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows vs {} labels",
            m,
            labels.len()
        )));
    }
    if m == 0 {
        return Err(Error::EmptyInput("softmax_cross_entropy"));
    }
    let mut dlogits = vec![0.0; m * k];
    let mut loss = 0.0;
    let inv_m = 1.0 / m as f64;
    for r in 0..m {
        let label = labels[r];
        if label >= k {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        // log p_true computed in log space; never hits ln(0).
        loss -= (row[label] - max) - denom.ln();
        let drow = &mut dlogits[r * k..(r + 1) * k];
        for (j, &v) in row.iter().enumerate() {
            drow[j] = (v - max).exp() / denom * inv_m;
        }
        drow[label] -= inv_m;
    }
    Ok((loss * inv_m, Tensor::new(vec![m, k], dlogits)?))
}

/// Index of the row maximum; ties resolve to the first occurrence.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
