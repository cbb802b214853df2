//! Synthetic labeled image domains with parameterized corruption shifts, and
//! the Gaussian-mixture oracle for the source-combination loss bound.
//!
//! Ten procedurally drawn glyph classes on 16×16×1 canvases stand in for a
//! real base dataset; eight corruption kinds at five severities generate
//! shifted domains with the same structure as the published corruption
//! benchmarks, at toy scale.

use crate::error::{PlutoError, Result};
use crate::pet::{Container, ContainerKind};
use crate::rng::{fnv1a, Rng};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const NUM_CLASSES: usize = 10;
pub const IMAGE_SIZE: usize = 16;

/// A labeled image dataset. Images are H×W×C tensors with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Deterministic head/tail split: first `n_train` samples train, the rest
    /// test.
    pub fn split(&self, n_train: usize) -> (Dataset, Dataset) {
        let n = n_train.min(self.len());
        let head = Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        };
        let tail = Dataset {
            images: self.images[n..].to_vec(),
            labels: self.labels[n..].to_vec(),
            classes: self.classes,
        };
        (head, tail)
    }
}

/// Corruption kinds; severity 0 is the identity for every kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    Identity,
    GaussianNoise,
    ShotNoise,
    Blur,
    Contrast,
    Brightness,
    Pixelate,
    Rotation,
}

impl Corruption {
    pub const ALL: [Corruption; 8] = [
        Corruption::Identity,
        Corruption::GaussianNoise,
        Corruption::ShotNoise,
        Corruption::Blur,
        Corruption::Contrast,
        Corruption::Brightness,
        Corruption::Pixelate,
        Corruption::Rotation,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Corruption::Identity => "identity",
            Corruption::GaussianNoise => "gaussian_noise",
            Corruption::ShotNoise => "shot_noise",
            Corruption::Blur => "blur",
            Corruption::Contrast => "contrast",
            Corruption::Brightness => "brightness",
            Corruption::Pixelate => "pixelate",
            Corruption::Rotation => "rotation",
        }
    }
}

/// One shifted domain: corruption kind, severity 0..=5, noise seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub corruption: Corruption,
    pub severity: u8,
    pub seed: u64,
}

impl DomainSpec {
    pub fn new(corruption: Corruption, severity: u8, seed: u64) -> Self {
        DomainSpec {
            corruption,
            severity,
            seed,
        }
    }

    /// "gaussian_noise:sev3" style label used through the module store.
    pub fn label(&self) -> String {
        format!("{}:sev{}", self.corruption.name(), self.severity)
    }
}

/// Mixture coefficients over source domains; must lie on the simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub lambdas: Vec<f64>,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(PlutoError::EmptyInput("mixture lambdas"));
        }
        if let Some(&bad) = self.lambdas.iter().find(|&&l| l < 0.0) {
            return Err(PlutoError::NegativeProbability { value: bad });
        }
        let sum: f64 = self.lambdas.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(PlutoError::NotNormalized { sum });
        }
        Ok(())
    }
}

/// An unlabeled test stream. Ground-truth labels ride along for metric
/// computation only, behind accessors that name that intent; adaptation code
/// paths receive just the images.
#[derive(Clone, Debug)]
pub struct TargetStream {
    images: Vec<Tensor>,
    hidden_labels: Vec<usize>,
    source_of: Vec<usize>,
}

impl TargetStream {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    /// Which mixture component each sample was drawn from (evaluation only).
    pub fn source_assignments(&self) -> &[usize] {
        &self.source_of
    }

    /// Labels for metric computation only; never feed these to adaptation.
    pub fn eval_labels(&self) -> &[usize] {
        &self.hidden_labels
    }

    /// Chunk into batches of `b` images plus parallel eval-label batches.
    pub fn batches(&self, b: usize) -> (Vec<Vec<Tensor>>, Vec<Vec<usize>>) {
        let mut imgs = Vec::new();
        let mut labs = Vec::new();
        for chunk in 0..self.len().div_ceil(b) {
            let lo = chunk * b;
            let hi = (lo + b).min(self.len());
            imgs.push(self.images[lo..hi].to_vec());
            labs.push(self.hidden_labels[lo..hi].to_vec());
        }
        (imgs, labs)
    }

    /// View as a labeled dataset, for evaluation-side accuracy checks.
    pub fn to_eval_dataset(&self) -> Dataset {
        Dataset {
            images: self.images.clone(),
            labels: self.hidden_labels.clone(),
            classes: NUM_CLASSES,
        }
    }
}

// ── base dataset ─────────────────────────────────────────────────────

/// `n` balanced samples of the ten glyph classes, deterministic per seed.
pub fn make_base_dataset(n: usize, seed: u64) -> Result<Dataset> {
    if n < NUM_CLASSES {
        return Err(PlutoError::InvalidArgument(format!(
            "need at least {NUM_CLASSES} samples, got {n}"
        )));
    }
    let root = Rng::new(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % NUM_CLASSES;
        let mut rng = root.derive(i as u64);
        images.push(draw_glyph(class, &mut rng));
        labels.push(class);
    }
    Ok(Dataset {
        images,
        labels,
        classes: NUM_CLASSES,
    })
}

fn draw_glyph(class: usize, rng: &mut Rng) -> Tensor {
    let s = IMAGE_SIZE as i64;
    // per-sample jitter: position, intensity, stroke thickness
    let dx = rng.below(5) as i64 - 2;
    let dy = rng.below(5) as i64 - 2;
    let fg = rng.uniform(0.55, 1.0);
    let thick = 1 + rng.below(2) as i64; // half-width 1 or 2
    let cx = s / 2 + dx;
    let cy = s / 2 + dy;

    let mut px = vec![0.0f64; (s * s) as usize];
    {
        let mut set = |x: i64, y: i64, v: f64| {
            if (0..s).contains(&x) && (0..s).contains(&y) {
                let idx = (y * s + x) as usize;
                if v > px[idx] {
                    px[idx] = v;
                }
            }
        };
        match class {
            // horizontal bar
            0 => {
                for y in cy - thick..=cy + thick {
                    for x in 2..s - 2 {
                        set(x, y, fg);
                    }
                }
            }
            // vertical bar
            1 => {
                for x in cx - thick..=cx + thick {
                    for y in 2..s - 2 {
                        set(x, y, fg);
                    }
                }
            }
            // plus
            2 => {
                for t in -5..=5 {
                    for w in -(thick - 1)..=(thick - 1) {
                        set(cx + t, cy + w, fg);
                        set(cx + w, cy + t, fg);
                    }
                }
            }
            // X: both diagonals
            3 => {
                for t in -5..=5 {
                    for w in 0..thick {
                        set(cx + t + w, cy + t, fg);
                        set(cx + t + w, cy - t, fg);
                    }
                }
            }
            // hollow square
            4 => {
                let r = 4 + rng.below(2) as i64;
                for t in -r..=r {
                    set(cx + t, cy - r, fg);
                    set(cx + t, cy + r, fg);
                    set(cx - r, cy + t, fg);
                    set(cx + r, cy + t, fg);
                }
            }
            // filled disc
            5 => {
                let r = 3 + rng.below(2) as i64;
                for y in -r..=r {
                    for x in -r..=r {
                        if x * x + y * y <= r * r {
                            set(cx + x, cy + y, fg);
                        }
                    }
                }
            }
            // ring
            6 => {
                let r = 4 + rng.below(2) as i64;
                for y in -(r + 1)..=(r + 1) {
                    for x in -(r + 1)..=(r + 1) {
                        let d2 = x * x + y * y;
                        if d2 <= r * r && d2 >= (r - 1) * (r - 1) {
                            set(cx + x, cy + y, fg);
                        }
                    }
                }
            }
            // filled triangle pointing up
            7 => {
                let h = 5 + rng.below(2) as i64;
                for row in 0..h {
                    let half = row;
                    for x in -half..=half {
                        set(cx + x, cy - h / 2 + row, fg);
                    }
                }
            }
            // checkerboard of 4×4 cells
            8 => {
                for y in 0..s {
                    for x in 0..s {
                        if ((x / 4) + (y / 4)) % 2 == 0 {
                            set(x, y, fg * 0.9);
                        }
                    }
                }
            }
            // diagonal gradient ramp
            _ => {
                for y in 0..s {
                    for x in 0..s {
                        let v = fg * (x + y) as f64 / (2 * (s - 1)) as f64;
                        set(x, y, v);
                    }
                }
            }
        }
    }

    // faint sensor noise so the base domain is not perfectly clean
    for v in px.iter_mut() {
        *v = (*v + 0.02 * rng.normal()).clamp(0.0, 1.0);
    }
    Tensor::from_vec(vec![IMAGE_SIZE, IMAGE_SIZE, 1], px).expect("glyph shape")
}

// ── corruption kernels ───────────────────────────────────────────────

const GAUSS_SIGMA: [f64; 5] = [0.04, 0.08, 0.13, 0.18, 0.26];
const SHOT_PHOTONS: [f64; 5] = [80.0, 45.0, 25.0, 14.0, 8.0];
const BLUR_SIGMA: [f64; 5] = [0.4, 0.7, 1.0, 1.4, 2.0];
const CONTRAST_FACTOR: [f64; 5] = [0.8, 0.65, 0.5, 0.35, 0.22];
const BRIGHTNESS_DELTA: [f64; 5] = [0.08, 0.15, 0.22, 0.3, 0.4];
const PIXELATE_BLOCK: [usize; 5] = [2, 2, 4, 4, 8];
const ROTATION_DEG: [f64; 5] = [4.0, 8.0, 12.0, 17.0, 24.0];

/// Apply `spec` to one image. Deterministic in (image, spec); severity 0
/// returns the input bit-exactly for every kind; outputs stay in [0, 1].
pub fn corrupt(image: &Tensor, spec: &DomainSpec) -> Result<Tensor> {
    if spec.severity > 5 {
        return Err(PlutoError::InvalidArgument(format!(
            "severity {} out of range 0..=5",
            spec.severity
        )));
    }
    if spec.severity == 0 || spec.corruption == Corruption::Identity {
        return Ok(image.clone());
    }
    let (h, w) = match image.shape() {
        [h, w, 1] => (*h, *w),
        other => {
            return Err(PlutoError::InvalidArgument(format!(
                "corrupt expects H×W×1 images, got {other:?}"
            )))
        }
    };
    let sev = spec.severity as usize - 1;
    // noise streams are keyed to both the domain seed and the image content,
    // so corrupt(image, spec) is a pure function
    let mut bytes = Vec::with_capacity(image.numel() * 8);
    for v in image.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut rng = Rng::new(spec.seed ^ fnv1a(&bytes));

    let src = image.data();
    let mut out = src.to_vec();
    match spec.corruption {
        Corruption::Identity => unreachable!("handled above"),
        Corruption::GaussianNoise => {
            let sigma = GAUSS_SIGMA[sev];
            for v in out.iter_mut() {
                *v += sigma * rng.normal();
            }
        }
        Corruption::ShotNoise => {
            let photons = SHOT_PHOTONS[sev];
            for v in out.iter_mut() {
                *v = rng.poisson(*v * photons) as f64 / photons;
            }
        }
        Corruption::Blur => {
            out = gaussian_blur(src, h, w, BLUR_SIGMA[sev]);
        }
        Corruption::Contrast => {
            let c = CONTRAST_FACTOR[sev];
            let mean = src.iter().sum::<f64>() / src.len() as f64;
            for v in out.iter_mut() {
                *v = (*v - mean) * c + mean;
            }
        }
        Corruption::Brightness => {
            let b = BRIGHTNESS_DELTA[sev];
            for v in out.iter_mut() {
                *v += b;
            }
        }
        Corruption::Pixelate => {
            let block = PIXELATE_BLOCK[sev];
            for by in (0..h).step_by(block) {
                for bx in (0..w).step_by(block) {
                    let mut sum = 0.0;
                    let mut count = 0.0;
                    for y in by..(by + block).min(h) {
                        for x in bx..(bx + block).min(w) {
                            sum += src[y * w + x];
                            count += 1.0;
                        }
                    }
                    let avg = sum / count;
                    for y in by..(by + block).min(h) {
                        for x in bx..(bx + block).min(w) {
                            out[y * w + x] = avg;
                        }
                    }
                }
            }
        }
        Corruption::Rotation => {
            let theta = ROTATION_DEG[sev].to_radians();
            let (sin_t, cos_t) = theta.sin_cos();
            let cx = (w as f64 - 1.0) / 2.0;
            let cy = (h as f64 - 1.0) / 2.0;
            for y in 0..h {
                for x in 0..w {
                    // inverse map target pixel back into the source frame
                    let rx = x as f64 - cx;
                    let ry = y as f64 - cy;
                    let sx = cos_t * rx + sin_t * ry + cx;
                    let sy = -sin_t * rx + cos_t * ry + cy;
                    out[y * w + x] = bilinear(src, h, w, sx, sy);
                }
            }
        }
    }
    for v in out.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::from_vec(image.shape().to_vec(), out)
}

fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for t in -radius..=radius {
        kernel.push((-0.5 * (t as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    // separable convolution with edge replication
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let sx = clamp(x as i64 + i as i64 - radius, w);
                acc += k * src[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let sy = clamp(y as i64 + i as i64 - radius, h);
                acc += k * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn bilinear(src: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    if x < -1.0 || y < -1.0 || x > w as f64 || y > h as f64 {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let sample = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            src[yi as usize * w + xi as usize]
        }
    };
    let v00 = sample(x0, y0);
    let v10 = sample(x0 + 1.0, y0);
    let v01 = sample(x0, y0 + 1.0);
    let v11 = sample(x0 + 1.0, y0 + 1.0);
    v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy
}

/// Map `corrupt` over a dataset, preserving labels.
pub fn make_domain(base: &Dataset, spec: &DomainSpec) -> Result<Dataset> {
    let images = base
        .images
        .iter()
        .map(|img| corrupt(img, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        images,
        labels: base.labels.clone(),
        classes: base.classes,
    })
}

/// Draw an `n`-sample target stream from the λ-mixture of `domains`.
///
/// Each sample picks component k with probability λ_k, then an element of
/// that domain uniformly with replacement. Hidden labels are retained for
/// evaluation only.
pub fn make_mixture_target(
    domains: &[Dataset],
    mixture: &MixtureSpec,
    n: usize,
    seed: u64,
) -> Result<TargetStream> {
    mixture.validate()?;
    if domains.len() != mixture.lambdas.len() {
        return Err(PlutoError::InvalidArgument(format!(
            "{} domains vs {} mixture coefficients",
            domains.len(),
            mixture.lambdas.len()
        )));
    }
    if domains.iter().any(|d| d.is_empty()) {
        return Err(PlutoError::EmptyInput("mixture component dataset"));
    }
    let mut rng = Rng::new(seed);
    let mut images = Vec::with_capacity(n);
    let mut hidden_labels = Vec::with_capacity(n);
    let mut source_of = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.categorical(&mixture.lambdas);
        let idx = rng.below(domains[k].len());
        images.push(domains[k].images[idx].clone());
        hidden_labels.push(domains[k].labels[idx]);
        source_of.push(k);
    }
    Ok(TargetStream {
        images,
        hidden_labels,
        source_of,
    })
}

// ── dataset persistence ──────────────────────────────────────────────

/// Pack a dataset into a container (kind "dataset": images as one f32
/// tensor, labels as a u16 array).
pub fn dataset_to_container(id: &str, domain_label: &str, data: &Dataset) -> Result<Container> {
    if data.is_empty() {
        return Err(PlutoError::EmptyInput("dataset_to_container"));
    }
    let shape = data.images[0].shape().to_vec();
    let mut flat = Vec::with_capacity(data.len() * data.images[0].numel());
    for img in &data.images {
        if img.shape() != shape.as_slice() {
            return Err(PlutoError::shapes("dataset image", img.shape(), &shape));
        }
        flat.extend_from_slice(img.data());
    }
    let mut full_shape = vec![data.len()];
    full_shape.extend_from_slice(&shape);
    let labels: Vec<u16> = data
        .labels
        .iter()
        .map(|&l| u16::try_from(l).map_err(|_| PlutoError::InvalidArgument("label > u16".into())))
        .collect::<Result<_>>()?;
    Ok(Container {
        id: id.to_string(),
        domain_label: domain_label.to_string(),
        kind: ContainerKind::Dataset,
        hyper: serde_json::json!({
            "n": data.len(),
            "classes": data.classes,
        }),
        meta: serde_json::json!({}),
        tensors: vec![("images".to_string(), Tensor::from_vec(full_shape, flat)?)],
        labels: Some(labels),
    })
}

/// Inverse of [`dataset_to_container`].
pub fn dataset_from_container(c: &Container) -> Result<Dataset> {
    if c.kind != ContainerKind::Dataset {
        return Err(PlutoError::BadHeader(format!(
            "container {} is not a dataset",
            c.id
        )));
    }
    let images_tensor = c.tensor("images")?;
    let labels = c
        .labels
        .as_ref()
        .ok_or_else(|| PlutoError::BadHeader("dataset without labels".into()))?;
    let shape = images_tensor.shape();
    if shape.len() < 2 {
        return Err(PlutoError::BadHeader("dataset images must be stacked".into()));
    }
    let n = shape[0];
    if labels.len() != n {
        return Err(PlutoError::BadHeader(format!(
            "{} labels for {} images",
            labels.len(),
            n
        )));
    }
    let per = shape[1..].to_vec();
    let stride: usize = per.iter().product();
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        images.push(Tensor::from_vec(
            per.clone(),
            images_tensor.data()[i * stride..(i + 1) * stride].to_vec(),
        )?);
    }
    let classes = c
        .hyper
        .get("classes")
        .and_then(|v| v.as_u64())
        .unwrap_or(NUM_CLASSES as u64) as usize;
    Ok(Dataset {
        images,
        labels: labels.iter().map(|&l| l as usize).collect(),
        classes,
    })
}

// ── Gaussian-mixture bound oracle ────────────────────────────────────

/// A one-dimensional two-class source problem with Gaussian class
/// conditionals and equal priors.
#[derive(Clone, Copy, Debug)]
pub struct GaussianSource {
    pub mu0: f64,
    pub sigma0: f64,
    pub mu1: f64,
    pub sigma1: f64,
}

fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

impl GaussianSource {
    /// Marginal density Q(x) = ½N(x|μ0,σ0²) + ½N(x|μ1,σ1²).
    pub fn density(&self, x: f64) -> f64 {
        0.5 * normal_pdf(x, self.mu0, self.sigma0) + 0.5 * normal_pdf(x, self.mu1, self.sigma1)
    }

    /// Bayes-optimal class-1 posterior under log-loss.
    pub fn posterior1(&self, x: f64) -> f64 {
        let p0 = 0.5 * normal_pdf(x, self.mu0, self.sigma0);
        let p1 = 0.5 * normal_pdf(x, self.mu1, self.sigma1);
        p1 / (p0 + p1)
    }
}

/// Outcome of one mixture-bound Monte Carlo check.
#[derive(Clone, Debug, Serialize)]
pub struct BoundReport {
    /// Loss of the density-ratio-weighted target predictor.
    pub lhs: f64,
    /// Loss of each source predictor under the target distribution.
    pub per_source: Vec<f64>,
    /// min_j per_source[j].
    pub rhs: f64,
    /// Standard error of the paired (lhs − rhs) difference.
    pub se: f64,
    pub draws: usize,
    pub holds: bool,
}

fn log_loss(p1: f64, y: usize) -> f64 {
    let p = p1.clamp(1e-12, 1.0 - 1e-12);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Monte Carlo check that the mixture-target predictor is at least as good
/// as the best single source under log-loss.
pub fn run_mixture_bound(
    sources: &[GaussianSource],
    mixture: &MixtureSpec,
    draws: usize,
    rng: &mut Rng,
) -> Result<BoundReport> {
    mixture.validate()?;
    if sources.len() != mixture.lambdas.len() {
        return Err(PlutoError::InvalidArgument(
            "sources vs lambdas length".to_string(),
        ));
    }
    let n_src = sources.len();
    let mut loss_t = Vec::with_capacity(draws);
    let mut loss_s = vec![Vec::with_capacity(draws); n_src];
    for _ in 0..draws {
        // draw (x, y) from the target joint: component k ~ λ, y ~ Bern(½)
        let k = rng.categorical(&mixture.lambdas);
        let y = usize::from(rng.next_f64() < 0.5);
        let src = &sources[k];
        let (mu, sigma) = if y == 1 {
            (src.mu1, src.sigma1)
        } else {
            (src.mu0, src.sigma0)
        };
        let x = mu + sigma * rng.normal();

        // density-ratio weights over sources at x
        let densities: Vec<f64> = sources.iter().map(|s| s.density(x)).collect();
        let denom: f64 = mixture
            .lambdas
            .iter()
            .zip(&densities)
            .map(|(l, q)| l * q)
            .sum();
        let mut theta_t = 0.0;
        for j in 0..n_src {
            let wj = mixture.lambdas[j] * densities[j] / denom;
            theta_t += wj * sources[j].posterior1(x);
        }
        loss_t.push(log_loss(theta_t, y));
        for j in 0..n_src {
            loss_s[j].push(log_loss(sources[j].posterior1(x), y));
        }
    }

    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let lhs = mean(&loss_t);
    let per_source: Vec<f64> = loss_s.iter().map(|l| mean(l)).collect();
    let best = crate::tensor::argmax_slice(&per_source.iter().map(|v| -v).collect::<Vec<_>>());
    let rhs = per_source[best];

    // paired standard error of the difference against the best source
    let diffs: Vec<f64> = loss_t
        .iter()
        .zip(&loss_s[best])
        .map(|(a, b)| a - b)
        .collect();
    let d_mean = mean(&diffs);
    let d_var = diffs.iter().map(|d| (d - d_mean) * (d - d_mean)).sum::<f64>()
        / (diffs.len() - 1) as f64;
    let se = (d_var / diffs.len() as f64).sqrt();
    Ok(BoundReport {
        lhs,
        per_source,
        rhs,
        se,
        draws,
        holds: d_mean <= 3.0 * se,
    })
}

/// Default oracle instance: two random distinct 1-D sources, λ = [½, ½],
/// 120k draws.
pub fn mixture_bound_oracle(seed: u64) -> BoundReport {
    let mut rng = Rng::new(seed);
    let sources = [random_source(&mut rng), random_source(&mut rng)];
    let mixture = MixtureSpec {
        lambdas: vec![0.5, 0.5],
    };
    run_mixture_bound(&sources, &mixture, 120_000, &mut rng).expect("valid oracle inputs")
}

fn random_source(rng: &mut Rng) -> GaussianSource {
    GaussianSource {
        mu0: rng.uniform(-2.5, -0.3),
        sigma0: rng.uniform(0.5, 1.5),
        mu1: rng.uniform(0.3, 2.5),
        sigma1: rng.uniform(0.5, 1.5),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_dataset_is_deterministic_and_balanced() {
        let a = make_base_dataset(103, 5).unwrap();
        let b = make_base_dataset(103, 5).unwrap();
        assert_eq!(a, b);

        let mut hist = [0usize; NUM_CLASSES];
        for &l in &a.labels {
            hist[l] += 1;
        }
        let lo = hist.iter().min().unwrap();
        let hi = hist.iter().max().unwrap();
        assert!(hi - lo <= 1, "histogram {hist:?}");
    }

    #[test]
    fn base_dataset_minimum_size() {
        assert!(make_base_dataset(NUM_CLASSES - 1, 0).is_err());
        let d = make_base_dataset(NUM_CLASSES, 0).unwrap();
        let mut seen = [false; NUM_CLASSES];
        for &l in &d.labels {
            seen[l] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn severity_zero_is_identity_for_all_kinds() {
        let base = make_base_dataset(NUM_CLASSES, 3).unwrap();
        for kind in Corruption::ALL {
            let spec = DomainSpec::new(kind, 0, 99);
            for img in &base.images {
                let out = corrupt(img, &spec).unwrap();
                assert_eq!(&out, img, "kind {kind:?}");
            }
        }
    }

    #[test]
    fn corrupt_is_deterministic() {
        let base = make_base_dataset(NUM_CLASSES, 4).unwrap();
        for kind in Corruption::ALL {
            let spec = DomainSpec::new(kind, 3, 7);
            let a = corrupt(&base.images[0], &spec).unwrap();
            let b = corrupt(&base.images[0], &spec).unwrap();
            assert_eq!(a, b, "kind {kind:?}");
        }
    }

    #[test]
    fn gaussian_noise_grows_with_severity() {
        let base = make_base_dataset(NUM_CLASSES, 6).unwrap();
        let img = &base.images[2];
        let delta = |sev: u8| {
            let spec = DomainSpec::new(Corruption::GaussianNoise, sev, 11);
            let out = corrupt(img, &spec).unwrap();
            out.data()
                .iter()
                .zip(img.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / img.numel() as f64
        };
        assert!(delta(5) > delta(1), "sev5 {} sev1 {}", delta(5), delta(1));
    }

    #[test]
    fn corrupted_pixels_stay_in_range() {
        let base = make_base_dataset(40, 8).unwrap();
        for kind in Corruption::ALL {
            let spec = DomainSpec::new(kind, 5, 13);
            for img in &base.images {
                let out = corrupt(img, &spec).unwrap();
                assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn make_domain_preserves_labels() {
        let base = make_base_dataset(30, 9).unwrap();
        let spec = DomainSpec::new(Corruption::Blur, 4, 2);
        let dom = make_domain(&base, &spec).unwrap();
        assert_eq!(dom.labels, base.labels);
        let identity = make_domain(&base, &DomainSpec::new(Corruption::Identity, 3, 2)).unwrap();
        assert_eq!(identity, base);
    }

    #[test]
    fn mixture_counts_concentrate() {
        let base = make_base_dataset(60, 10).unwrap();
        let d1 = make_domain(&base, &DomainSpec::new(Corruption::Blur, 3, 1)).unwrap();
        let d2 = make_domain(&base, &DomainSpec::new(Corruption::Contrast, 3, 1)).unwrap();
        let mix = MixtureSpec {
            lambdas: vec![0.5, 0.5],
        };
        let n = 1000;
        let stream = make_mixture_target(&[d1, d2], &mix, n, 21).unwrap();
        let count0 = stream
            .source_assignments()
            .iter()
            .filter(|&&k| k == 0)
            .count() as f64;
        let bound = 3.0 * ((n as f64) / 4.0).sqrt();
        assert!(
            (count0 - n as f64 / 2.0).abs() <= bound,
            "count {count0} outside ±{bound}"
        );
    }

    #[test]
    fn one_hot_mixture_draws_only_from_that_domain() {
        let base = make_base_dataset(30, 11).unwrap();
        let d1 = make_domain(&base, &DomainSpec::new(Corruption::Blur, 3, 1)).unwrap();
        let d2 = make_domain(&base, &DomainSpec::new(Corruption::Contrast, 3, 1)).unwrap();
        let mix = MixtureSpec {
            lambdas: vec![0.0, 1.0],
        };
        let stream = make_mixture_target(&[d1, d2], &mix, 200, 5).unwrap();
        assert!(stream.source_assignments().iter().all(|&k| k == 1));
    }

    #[test]
    fn mixture_rejects_bad_lambdas() {
        let base = make_base_dataset(10, 12).unwrap();
        let mix = MixtureSpec {
            lambdas: vec![0.7, 0.7],
        };
        assert!(make_mixture_target(&[base.clone(), base], &mix, 10, 0).is_err());
    }

    #[test]
    fn mixture_stream_is_deterministic() {
        let base = make_base_dataset(30, 13).unwrap();
        let d1 = make_domain(&base, &DomainSpec::new(Corruption::Blur, 2, 1)).unwrap();
        let d2 = make_domain(&base, &DomainSpec::new(Corruption::Pixelate, 2, 1)).unwrap();
        let mix = MixtureSpec {
            lambdas: vec![0.3, 0.7],
        };
        let a = make_mixture_target(&[d1.clone(), d2.clone()], &mix, 50, 17).unwrap();
        let b = make_mixture_target(&[d1, d2], &mix, 50, 17).unwrap();
        assert_eq!(a.images(), b.images());
        assert_eq!(a.eval_labels(), b.eval_labels());
    }

    #[test]
    fn dataset_container_roundtrip() {
        let data = make_base_dataset(15, 3).unwrap();
        let container = dataset_to_container("dataset:base", "identity:sev0", &data).unwrap();
        let bytes = crate::pet::serialize(&container);
        let back = dataset_from_container(&crate::pet::deserialize(&bytes).unwrap()).unwrap();
        assert_eq!(back.labels, data.labels);
        assert_eq!(back.classes, data.classes);
        assert_eq!(back.len(), data.len());
        // pixel values survive up to one f32 quantization
        for (a, b) in back.images.iter().zip(&data.images) {
            assert_eq!(a, &crate::pet::quantize_f32(b));
        }
    }

    #[test]
    fn bound_oracle_identical_sources_ties() {
        let s = GaussianSource {
            mu0: -1.0,
            sigma0: 1.0,
            mu1: 1.0,
            sigma1: 1.0,
        };
        let mix = MixtureSpec {
            lambdas: vec![0.5, 0.5],
        };
        let mut rng = Rng::new(3);
        let report = run_mixture_bound(&[s, s], &mix, 20_000, &mut rng).unwrap();
        // identical sources: density ratios are constant, predictors coincide
        assert!((report.lhs - report.rhs).abs() <= 3.0 * report.se.max(1e-15));
        assert!(report.holds);
    }

    #[test]
    fn bound_oracle_one_hot_recovers_single_source() {
        let mut rng = Rng::new(4);
        let a = random_source(&mut rng);
        let b = random_source(&mut rng);
        let mix = MixtureSpec {
            lambdas: vec![1.0, 0.0],
        };
        let report = run_mixture_bound(&[a, b], &mix, 20_000, &mut rng).unwrap();
        // the target predictor degenerates to source 0 exactly
        assert_eq!(report.lhs, report.per_source[0]);
    }

    #[test]
    fn bound_holds_on_random_configurations() {
        for seed in 0..5u64 {
            let report = mixture_bound_oracle(1000 + seed);
            assert!(
                report.holds,
                "seed {seed}: lhs {} rhs {} se {}",
                report.lhs, report.rhs, report.se
            );
        }
    }
}
