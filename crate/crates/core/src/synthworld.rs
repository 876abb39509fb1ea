//! Procedural 16x16 grayscale images built from Gaussian blobs.
//!
//! Eight classes: blob count in {1, 2, 3, 4} crossed with a layout in
//! {corners, diagonal}. The class fixes where each blob's center may fall;
//! radius and intensity are drawn per blob.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::nn::{Mlp, Trainable};
use crate::optim::Adam;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 16;
pub const NUM_PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;
pub const NUM_CLASSES: usize = 8;
pub const MAX_BLOBS: usize = 4;

pub const RADIUS_RANGE: (f64, f64) = (0.05, 0.3);
pub const INTENSITY_RANGE: (f64, f64) = (0.2, 1.0);
/// Half-width of the box around each layout anchor.
pub const CENTER_JITTER: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Corners,
    Diagonal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub intensity: f64,
}

impl Blob {
    fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.radius, self.intensity]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorVector {
    pub class: usize,
    pub blobs: Vec<Blob>,
}

pub fn class_count(class: usize) -> usize {
    class % 4 + 1
}

pub fn class_layout(class: usize) -> Layout {
    if class < 4 {
        Layout::Corners
    } else {
        Layout::Diagonal
    }
}

/// Expected center of blob `j` for a class; also the mean of the sampler.
pub fn layout_anchor(class: usize, j: usize) -> (f64, f64) {
    let n = class_count(class);
    match class_layout(class) {
        Layout::Corners => [(0.25, 0.25), (0.75, 0.25), (0.75, 0.75), (0.25, 0.75)][j],
        Layout::Diagonal => {
            let p = (j as f64 + 0.5) / n as f64;
            (p, p)
        }
    }
}

/// Upper end of the radius draw for a class; shrinks with blob count so
/// neighbouring blobs stay separable.
pub fn class_max_radius(class: usize) -> f64 {
    RADIUS_RANGE.1 / (class_count(class) as f64).sqrt()
}

impl FactorVector {
    pub fn validate(&self) -> Result<()> {
        if self.class >= NUM_CLASSES {
            return Err(Error::Invalid(format!("class {} out of range", self.class)));
        }
        if self.blobs.len() > MAX_BLOBS {
            return Err(Error::Invalid(format!("{} blobs exceeds {MAX_BLOBS}", self.blobs.len())));
        }
        for b in &self.blobs {
            let ok = (0.0..=1.0).contains(&b.cx)
                && (0.0..=1.0).contains(&b.cy)
                && (RADIUS_RANGE.0..=RADIUS_RANGE.1).contains(&b.radius)
                && (INTENSITY_RANGE.0..=INTENSITY_RANGE.1).contains(&b.intensity);
            if !ok {
                return Err(Error::Invalid(format!("blob out of range: {b:?}")));
            }
        }
        Ok(())
    }

    /// Layout consistency with the class id.
    pub fn is_consistent(&self) -> bool {
        self.blobs.len() == class_count(self.class)
            && self.blobs.iter().enumerate().all(|(j, b)| {
                let (ax, ay) = layout_anchor(self.class, j);
                (b.cx - ax).abs() <= CENTER_JITTER + 1e-12 && (b.cy - ay).abs() <= CENTER_JITTER + 1e-12
            })
    }

    /// Blob parameters sorted lexicographically and zero-padded to `MAX_BLOBS`.
    pub fn canonical(&self) -> [f64; 4 * MAX_BLOBS] {
        let mut blobs: Vec<[f64; 4]> = self.blobs.iter().map(Blob::as_array).collect();
        blobs.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut out = [0.0; 4 * MAX_BLOBS];
        for (j, b) in blobs.iter().enumerate() {
            out[4 * j..4 * j + 4].copy_from_slice(b);
        }
        out
    }
}

pub fn task_label(f: &FactorVector) -> usize {
    f.class
}

pub fn render(f: &FactorVector) -> Tensor {
    let mut px = vec![0.0; NUM_PIXELS];
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let (x, y) = (col as f64 / IMAGE_SIZE as f64, row as f64 / IMAGE_SIZE as f64);
            let v: f64 = f
                .blobs
                .iter()
                .map(|b| {
                    let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
                    b.intensity * (-d2 / (2.0 * b.radius * b.radius)).exp()
                })
                .sum();
            px[row * IMAGE_SIZE + col] = v.clamp(0.0, 1.0);
        }
    }
    Tensor::from_raw(vec![IMAGE_SIZE, IMAGE_SIZE], px)
}

pub fn sample_factors(class: usize, rng: &RngStream) -> Result<FactorVector> {
    if class >= NUM_CLASSES {
        return Err(Error::Invalid(format!("class {class} out of range")));
    }
    let mut r = rng.rng();
    let r_max = class_max_radius(class);
    let blobs = (0..class_count(class))
        .map(|j| {
            let (ax, ay) = layout_anchor(class, j);
            Blob {
                cx: r.gen_range(ax - CENTER_JITTER..ax + CENTER_JITTER),
                cy: r.gen_range(ay - CENTER_JITTER..ay + CENTER_JITTER),
                radius: r.gen_range(RADIUS_RANGE.0..r_max),
                intensity: r.gen_range(INTENSITY_RANGE.0..INTENSITY_RANGE.1),
            }
        })
        .collect();
    Ok(FactorVector { class, blobs })
}

pub fn factor_distance(a: &FactorVector, b: &FactorVector) -> f64 {
    a.canonical()
        .iter()
        .zip(b.canonical().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Images (as rows of a `[count, 256]` tensor) with their generating factors.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub factors: Vec<FactorVector>,
}

impl Dataset {
    /// Image `i` has class `i mod 8` and factors drawn from stream `[i]`.
    pub fn generate(count: usize, rng: &RngStream) -> Result<Dataset> {
        if count == 0 {
            return Err(Error::Invalid("dataset must be nonempty".into()));
        }
        let mut data = Vec::with_capacity(count * NUM_PIXELS);
        let mut factors = Vec::with_capacity(count);
        for i in 0..count {
            let f = sample_factors(i % NUM_CLASSES, &rng.child(i as u64))?;
            data.extend_from_slice(render(&f).data());
            factors.push(f);
        }
        Ok(Dataset { images: Tensor::from_raw(vec![count, NUM_PIXELS], data), factors })
    }

    pub fn from_factors(factors: Vec<FactorVector>) -> Result<Dataset> {
        if factors.is_empty() {
            return Err(Error::Invalid("dataset must be nonempty".into()));
        }
        let mut data = Vec::with_capacity(factors.len() * NUM_PIXELS);
        for f in &factors {
            f.validate()?;
            data.extend_from_slice(render(f).data());
        }
        Ok(Dataset { images: Tensor::from_raw(vec![factors.len(), NUM_PIXELS], data), factors })
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.factors.iter().map(task_label).collect()
    }

    /// Rows `idx` as a `[idx.len(), 256]` tensor.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * NUM_PIXELS);
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        Tensor::from_raw(vec![idx.len(), NUM_PIXELS], data)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset { images: self.batch(idx), factors: idx.iter().map(|&i| self.factors[i].clone()).collect() }
    }

    /// First `n` items for training, the rest held out.
    pub fn split(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Invalid(format!("cannot split {} items at {n}", self.len())));
        }
        let train: Vec<usize> = (0..n).collect();
        let held: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&train), self.subset(&held)))
    }

    /// Little-endian layout: `u32 H, u32 W, u32 count`, then `count * H * W`
    /// `f64` pixels, then per image `u32 class, u32 blob count` and
    /// `MAX_BLOBS` records of `f64 cx, cy, radius, intensity` (zero padded).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.images.len() * 8 + self.len() * (8 + 32 * MAX_BLOBS));
        out.extend_from_slice(&(IMAGE_SIZE as u32).to_le_bytes());
        out.extend_from_slice(&(IMAGE_SIZE as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for v in self.images.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for f in &self.factors {
            out.extend_from_slice(&(f.class as u32).to_le_bytes());
            out.extend_from_slice(&(f.blobs.len() as u32).to_le_bytes());
            for j in 0..MAX_BLOBS {
                let arr = f.blobs.get(j).map(Blob::as_array).unwrap_or([0.0; 4]);
                for v in arr {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = bytes;
        let h = read_u32(&mut r)? as usize;
        let w = read_u32(&mut r)? as usize;
        let count = read_u32(&mut r)? as usize;
        if h != IMAGE_SIZE || w != IMAGE_SIZE {
            return Err(Error::Format(format!("unsupported image size {h}x{w}")));
        }
        if count == 0 {
            return Err(Error::Format("empty dataset".into()));
        }
        let expected = count * NUM_PIXELS * 8 + count * (8 + 32 * MAX_BLOBS);
        if r.len() != expected {
            return Err(Error::Format(format!("dataset body is {} bytes, expected {expected}", r.len())));
        }
        let mut pixels = Vec::with_capacity(count * NUM_PIXELS);
        for _ in 0..count * NUM_PIXELS {
            pixels.push(read_f64(&mut r)?);
        }
        let mut factors = Vec::with_capacity(count);
        for _ in 0..count {
            let class = read_u32(&mut r)? as usize;
            let n = read_u32(&mut r)? as usize;
            let mut blobs = Vec::new();
            for j in 0..MAX_BLOBS {
                let v = [read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?];
                if j < n {
                    blobs.push(Blob { cx: v[0], cy: v[1], radius: v[2], intensity: v[3] });
                }
            }
            let f = FactorVector { class, blobs };
            f.validate()?;
            factors.push(f);
        }
        Ok(Dataset { images: Tensor::new(vec![count, NUM_PIXELS], pixels)?, factors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Dataset::from_bytes(&buf)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated dataset".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated dataset".into()))?;
    Ok(f64::from_le_bytes(b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairMode {
    SameClass,
    CrossClass,
}

impl PairMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PairMode::SameClass => "same",
            PairMode::CrossClass => "cross",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NearbyPair {
    pub anchor: usize,
    pub neighbor: usize,
    pub distance: f64,
    pub mode: PairMode,
}

/// For each anchor, its factor-space nearest neighbour under the class
/// constraint; pairs farther than `epsilon` are dropped.
pub fn sample_nearby_pairs(
    dataset: &Dataset,
    anchors: &[usize],
    epsilon: f64,
    mode: PairMode,
) -> Result<Vec<NearbyPair>> {
    if dataset.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::Invalid(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    let canon: Vec<_> = dataset.factors.iter().map(FactorVector::canonical).collect();
    let mut out = Vec::new();
    for &a in anchors {
        let ca = dataset.factors[a].class;
        let mut best: Option<(usize, f64)> = None;
        for (j, cj) in canon.iter().enumerate() {
            if j == a {
                continue;
            }
            let same = dataset.factors[j].class == ca;
            if same != (mode == PairMode::SameClass) {
                continue;
            }
            let d = canon[a].iter().zip(cj).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        if let Some((j, d)) = best {
            if d <= epsilon {
                out.push(NearbyPair { anchor: a, neighbor: j, distance: d, mode });
            }
        }
    }
    Ok(out)
}

/// Dense classifier standing in for the fixed downstream task model.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskClassifier {
    pub mlp: Mlp,
}

pub const CLASSIFIER_ACCURACY_FLOOR: f64 = 0.95;

impl TaskClassifier {
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.mlp.eval(images)
    }

    pub fn classify(&self, images: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    pub fn accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        if images.rows() != labels.len() {
            return Err(Error::shape("accuracy", format!("{} images, {} labels", images.rows(), labels.len())));
        }
        let pred = self.classify(images)?;
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
    }
}

/// Train on clean renders and require the accuracy floor on `heldout`.
pub fn train_task_classifier(
    train: &Dataset,
    heldout: &Dataset,
    steps: usize,
    rng: &RngStream,
) -> Result<TaskClassifier> {
    let mlp = Mlp::new("classifier", &[NUM_PIXELS, 128, NUM_CLASSES], 1.0, &rng.child(0));
    let mut model = Trainable { params: mlp.params.clone(), opt: Adam::new(1e-3) };
    let labels = train.labels();
    let batch = 64.min(train.len());
    for step in 0..steps {
        let mut r = rng.at(&[1, step as u64]).rng();
        let idx: Vec<usize> = (0..batch).map(|_| r.gen_range(0..train.len())).collect();
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut g = Graph::new();
        let vars = model.params.bind(&mut g);
        let x = g.input(train.batch(&idx));
        let logits = mlp.forward(&mut g, &vars, x)?;
        let loss = g.cross_entropy(logits, &y)?;
        let grads = g.backward(loss)?.collect(&vars);
        model.step(&grads)?;
    }
    let mut mlp = mlp;
    mlp.params = model.params;
    let clf = TaskClassifier { mlp };
    let acc = clf.accuracy(&heldout.images, &heldout.labels())?;
    if acc < CLASSIFIER_ACCURACY_FLOOR {
        return Err(Error::Gate(format!(
            "task classifier held-out accuracy {acc:.4} below {CLASSIFIER_ACCURACY_FLOOR}"
        )));
    }
    Ok(clf)
}

/// Uniform-noise images in [0, 1].
pub fn noise_images(count: usize, rng: &RngStream) -> Tensor {
    rng.uniform(&[count, NUM_PIXELS], 0.0, 1.0)
}

/// Write images as a plain (P2) portable graymap, tiled left to right.
pub fn write_pgm_strip<W: Write>(mut w: W, images: &[&[f64]]) -> Result<()> {
    let width = IMAGE_SIZE * images.len();
    writeln!(w, "P2")?;
    writeln!(w, "{width} {IMAGE_SIZE}")?;
    writeln!(w, "255")?;
    for row in 0..IMAGE_SIZE {
        let line: Vec<String> = images
            .iter()
            .flat_map(|img| {
                (0..IMAGE_SIZE).map(move |col| {
                    let v = img[row * IMAGE_SIZE + col].clamp(0.0, 1.0);
                    ((v * 255.0).round() as u8).to_string()
                })
            })
            .collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_blob(cx: f64) -> FactorVector {
        FactorVector { class: 4, blobs: vec![Blob { cx, cy: 0.5, radius: 0.1, intensity: 0.8 }] }
    }

    #[test]
    fn empty_render_is_black() {
        let img = render(&FactorVector { class: 0, blobs: vec![] });
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_blob_peaks_at_one() {
        let f = FactorVector { class: 4, blobs: vec![Blob { cx: 0.5, cy: 0.5, radius: 0.1, intensity: 1.0 }] };
        let img = render(&f);
        assert_eq!(img.data()[8 * IMAGE_SIZE + 8], 1.0);
    }

    #[test]
    fn overlapping_blobs_match_scalar_formula() {
        let blobs = vec![
            Blob { cx: 0.45, cy: 0.5, radius: 0.2, intensity: 0.5 },
            Blob { cx: 0.55, cy: 0.45, radius: 0.15, intensity: 0.4 },
        ];
        let img = render(&FactorVector { class: 5, blobs: blobs.clone() });
        let (x, y) = (0.5, 0.5);
        let expect: f64 = blobs
            .iter()
            .map(|b| b.intensity * (-((x - b.cx).powi(2) + (y - b.cy).powi(2)) / (2.0 * b.radius * b.radius)).exp())
            .sum::<f64>()
            .min(1.0);
        assert_eq!(img.data()[8 * IMAGE_SIZE + 8], expect);
    }

    #[test]
    fn sampler_is_deterministic_and_consistent() {
        for class in 0..NUM_CLASSES {
            let s = RngStream::new(3).child(class as u64);
            let a = sample_factors(class, &s).unwrap();
            assert_eq!(a, sample_factors(class, &s).unwrap());
            assert_eq!(a.blobs.len(), class_count(class));
            assert!(a.is_consistent());
            a.validate().unwrap();
        }
        assert_eq!(sample_factors(0, &RngStream::new(1)).unwrap().blobs.len(), 1);
        assert!(sample_factors(8, &RngStream::new(1)).is_err());
    }

    #[test]
    fn sampler_center_mean_matches_anchor() {
        let root = RngStream::new(11);
        for class in [0, 6] {
            let n = 10_000;
            let mean: f64 = (0..n)
                .map(|i| sample_factors(class, &root.at(&[class as u64, i])).unwrap().blobs[0].cx)
                .sum::<f64>()
                / n as f64;
            assert!((mean - layout_anchor(class, 0).0).abs() < 0.02, "class {class}: {mean}");
        }
    }

    #[test]
    fn distance_identity_and_shift() {
        let f = one_blob(0.5);
        assert_eq!(factor_distance(&f, &f), 0.0);
        let d = factor_distance(&one_blob(0.5), &one_blob(0.53));
        assert!((d - 0.03).abs() < 1e-15);
    }

    #[test]
    fn distance_ignores_blob_order() {
        let mut f = sample_factors(3, &RngStream::new(5)).unwrap();
        let g = f.clone();
        f.blobs.reverse();
        assert_eq!(factor_distance(&f, &g), 0.0);
    }

    #[test]
    fn duplicate_is_paired_at_zero_distance() {
        let base = Dataset::generate(16, &RngStream::new(2)).unwrap();
        let mut factors = base.factors.clone();
        factors.push(factors[3].clone());
        let ds = Dataset::from_factors(factors).unwrap();
        let pairs = sample_nearby_pairs(&ds, &[3], 1e-9, PairMode::SameClass).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].neighbor, 16);
        assert_eq!(pairs[0].distance, 0.0);
    }

    #[test]
    fn zero_epsilon_without_duplicates_is_empty() {
        let ds = Dataset::generate(64, &RngStream::new(2)).unwrap();
        let anchors: Vec<usize> = (0..64).collect();
        assert!(sample_nearby_pairs(&ds, &anchors, 0.0, PairMode::SameClass).unwrap().is_empty());
    }

    #[test]
    fn planted_neighbor_is_found() {
        let ds = Dataset::generate(200, &RngStream::new(9)).unwrap();
        let mut factors = ds.factors.clone();
        let mut planted = factors[5].clone();
        planted.blobs[0].cx += 0.01;
        factors.push(planted);
        let ds = Dataset::from_factors(factors).unwrap();
        // exhaustive oracle
        let best = (0..ds.len())
            .filter(|&j| j != 5 && ds.factors[j].class == ds.factors[5].class)
            .min_by(|&a, &b| {
                factor_distance(&ds.factors[5], &ds.factors[a]).total_cmp(&factor_distance(&ds.factors[5], &ds.factors[b]))
            })
            .unwrap();
        assert_eq!(best, 200);
        let pairs = sample_nearby_pairs(&ds, &[5], 0.15, PairMode::SameClass).unwrap();
        assert_eq!(pairs[0].neighbor, 200);
        assert!((pairs[0].distance - 0.01).abs() < 1e-12);
    }

    #[test]
    fn cross_class_pairs_differ_in_class() {
        let ds = Dataset::generate(64, &RngStream::new(4)).unwrap();
        let pairs = sample_nearby_pairs(&ds, &[0, 1, 2], 10.0, PairMode::CrossClass).unwrap();
        assert_eq!(pairs.len(), 3);
        for p in pairs {
            assert_ne!(ds.factors[p.anchor].class, ds.factors[p.neighbor].class);
        }
    }

    #[test]
    fn dataset_bytes_round_trip() {
        let ds = Dataset::generate(10, &RngStream::new(1)).unwrap();
        let bytes = ds.to_bytes();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), ds);
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn generation_is_reproducible() {
        let a = Dataset::generate(32, &RngStream::new(77)).unwrap();
        let b = Dataset::generate(32, &RngStream::new(77)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }
}
