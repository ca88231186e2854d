//! Synthetic task sequences and their on-disk format.
//!
//! Every class is a smooth random prototype (a coarse Gaussian grid,
//! bilinearly upsampled) observed under additive Gaussian noise. Each task
//! additionally applies its own intensity gain and offset, so tasks differ in
//! their input statistics as real downstream datasets do.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{argmax_rows, softmax_cross_entropy, Linear};
use crate::tensor::{decode_cft, encode_cft, DType, Tensor};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSequenceSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the prototype field.
    pub proto_scale: f64,
    /// Standard deviation of the per-pixel observation noise.
    pub noise_scale: f64,
    /// Side of the coarse grid the prototypes are upsampled from.
    pub field_grid: usize,
    /// Standard deviation of each task's additive intensity offset.
    pub task_offset_scale: f64,
    /// Standard deviation of each task's log intensity gain.
    pub task_gain_spread: f64,
    /// Classes in the pretext task used to pretrain a feature extractor; 0 disables it.
    pub pretext_classes: usize,
    pub pretext_train_per_class: usize,
    pub seed: u64,
}

impl Default for TaskSequenceSpec {
    /// The `synth-5` benchmark.
    fn default() -> Self {
        TaskSequenceSpec {
            num_tasks: 5,
            classes_per_task: 4,
            train_per_class: 100,
            test_per_class: 50,
            channels: 1,
            height: 16,
            width: 16,
            proto_scale: 1.0,
            noise_scale: 2.0,
            field_grid: 4,
            task_offset_scale: 1.0,
            task_gain_spread: 0.3,
            pretext_classes: 8,
            pretext_train_per_class: 100,
            seed: 0,
        }
    }
}

impl TaskSequenceSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_tasks", self.num_tasks),
            ("classes_per_task", self.classes_per_task),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("field_grid", self.field_grid),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Spec(format!("{name} must be at least 1")));
        }
        if self.pretext_classes > 0 && self.pretext_train_per_class == 0 {
            return Err(Error::Spec("pretext_train_per_class must be at least 1".into()));
        }
        for (name, v) in [
            ("proto_scale", self.proto_scale),
            ("noise_scale", self.noise_scale),
            ("task_offset_scale", self.task_offset_scale),
            ("task_gain_spread", self.task_gain_spread),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Spec(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// `(N, C, H, W)` inputs.
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub id: usize,
    pub classes: usize,
    pub train: Split,
    pub test: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    pub spec: TaskSequenceSpec,
    pub tasks: Vec<TaskDataset>,
    pub pretext: Option<TaskDataset>,
}

/// Low-frequency random field: Gaussian values on a `grid x grid` lattice,
/// bilinearly interpolated to `h x w`.
fn smooth_field(rng: &mut impl Rng, grid: usize, h: usize, w: usize, scale: f64) -> Vec<f64> {
    let lattice: Vec<f64> = (0..grid * grid).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
    let coord =
        |i: usize, n: usize| if n > 1 && grid > 1 { i as f64 * (grid - 1) as f64 / (n - 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let gy = coord(y, h);
        let (y0, fy) = (gy.floor() as usize, gy - gy.floor());
        let y1 = (y0 + 1).min(grid - 1);
        for x in 0..w {
            let gx = coord(x, w);
            let (x0, fx) = (gx.floor() as usize, gx - gx.floor());
            let x1 = (x0 + 1).min(grid - 1);
            let top = lattice[y0 * grid + x0] * (1.0 - fx) + lattice[y0 * grid + x1] * fx;
            let bottom = lattice[y1 * grid + x0] * (1.0 - fx) + lattice[y1 * grid + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

struct TaskDraw {
    dataset: TaskDataset,
    class_means: Tensor,
}

fn draw_task(
    spec: &TaskSequenceSpec,
    rng: &mut ChaCha8Rng,
    id: usize,
    classes: usize,
    train_per_class: usize,
    shifted: bool,
) -> Result<TaskDraw> {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let pixels = c * h * w;
    let (offset, gain) = if shifted {
        let offset = rng.sample::<f64, _>(StandardNormal) * spec.task_offset_scale;
        let gain = (rng.sample::<f64, _>(StandardNormal) * spec.task_gain_spread).exp();
        (offset, gain)
    } else {
        (0.0, 1.0)
    };
    let mut means = Vec::with_capacity(classes * pixels);
    for _ in 0..classes {
        for _ in 0..c {
            let field = smooth_field(rng, spec.field_grid, h, w, spec.proto_scale);
            means.extend(field.into_iter().map(|v| gain * v + offset));
        }
    }
    let sample = |per_class: usize, rng: &mut ChaCha8Rng| -> Result<Split> {
        let mut x = Vec::with_capacity(classes * per_class * pixels);
        let mut y = Vec::with_capacity(classes * per_class);
        for class in 0..classes {
            let mean = &means[class * pixels..(class + 1) * pixels];
            for _ in 0..per_class {
                x.extend(mean.iter().map(|&m| m + spec.noise_scale * rng.sample::<f64, _>(StandardNormal)));
                y.push(class);
            }
        }
        Ok(Split { x: Tensor::new(vec![classes * per_class, c, h, w], x)?, y })
    };
    let train = sample(train_per_class, rng)?;
    let test = sample(spec.test_per_class, rng)?;
    Ok(TaskDraw {
        dataset: TaskDataset { id, classes, train, test },
        class_means: Tensor::new(vec![classes, c, h, w], means)?,
    })
}

/// Generates a task sequence; a pure function of `spec`.
pub fn generate(spec: &TaskSequenceSpec) -> Result<TaskSequence> {
    generate_with_means(spec).map(|(seq, _)| seq)
}

/// As [`generate`], also returning each task's noiseless class means
/// `(classes, C, H, W)`.
pub fn generate_with_means(spec: &TaskSequenceSpec) -> Result<(TaskSequence, Vec<Tensor>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    let mut means = Vec::with_capacity(spec.num_tasks);
    for id in 0..spec.num_tasks {
        let draw = draw_task(spec, &mut rng, id, spec.classes_per_task, spec.train_per_class, true)?;
        tasks.push(draw.dataset);
        means.push(draw.class_means);
    }
    let pretext = if spec.pretext_classes > 0 {
        let mut prng = ChaCha8Rng::seed_from_u64(spec.seed);
        prng.set_stream(1);
        let draw = draw_task(spec, &mut prng, usize::MAX, spec.pretext_classes, spec.pretext_train_per_class, false)?;
        Some(draw.dataset)
    } else {
        None
    };
    Ok((TaskSequence { spec: spec.clone(), tasks, pretext }, means))
}

/// Accuracy of a softmax linear classifier on raw pixels, trained on the
/// task's train split and scored on its test split.
pub fn raw_linear_probe_accuracy(task: &TaskDataset, epochs: usize, lr: f64) -> Result<f64> {
    let flat = |s: &Split| -> Result<Tensor> {
        let n = s.len();
        s.x.clone().reshape(vec![n, s.x.len() / n])
    };
    let (xtr, xte) = (flat(&task.train)?, flat(&task.test)?);
    let mut head = Linear::zeros(xtr.shape()[1], task.classes);
    for _ in 0..epochs {
        let logits = head.forward(&xtr)?;
        let (_, grad) = softmax_cross_entropy(&logits, &task.train.y)?;
        let grads = head.backward(&xtr, &grad)?;
        head.sgd_step(&grads, lr)?;
    }
    let pred = argmax_rows(&head.forward(&xte)?)?;
    Ok(pred.iter().zip(&task.test.y).filter(|(p, y)| p == y).count() as f64 / task.test.len() as f64)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format_version: u32,
    spec: TaskSequenceSpec,
    tasks: Vec<TaskEntry>,
    pretext: Option<TaskEntry>,
    checksums: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskEntry {
    id: usize,
    classes: usize,
    train: usize,
    test: usize,
}

fn labels_tensor(y: &[usize]) -> Tensor {
    Tensor::from_vec(y.iter().map(|&v| v as f64).collect())
}

fn task_files(prefix: &str) -> [(String, &'static str, &'static str); 4] {
    [
        (format!("{prefix}.train.x.cft"), "train", "x"),
        (format!("{prefix}.train.y.cft"), "train", "y"),
        (format!("{prefix}.test.x.cft"), "test", "x"),
        (format!("{prefix}.test.y.cft"), "test", "y"),
    ]
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `manifest.json` plus `task<t>.{train,test}.{x,y}.cft` (and
/// `pretext.*` when present). Labels are stored as integral f64 values.
pub fn save_dataset(seq: &TaskSequence, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut checksums = BTreeMap::new();
    let mut write_task = |prefix: &str, task: &TaskDataset| -> Result<TaskEntry> {
        for (name, split, field) in task_files(prefix) {
            let s = if split == "train" { &task.train } else { &task.test };
            let tensor = if field == "x" { s.x.clone() } else { labels_tensor(&s.y) };
            let bytes = encode_cft(&tensor, DType::F64)?;
            checksums.insert(name.clone(), sha256_hex(&bytes));
            std::fs::write(dir.join(&name), bytes)?;
        }
        Ok(TaskEntry { id: task.id, classes: task.classes, train: task.train.len(), test: task.test.len() })
    };
    let mut tasks = Vec::new();
    for task in &seq.tasks {
        tasks.push(write_task(&format!("task{}", task.id), task)?);
    }
    let pretext = seq.pretext.as_ref().map(|p| write_task("pretext", p)).transpose()?;
    let manifest =
        DatasetManifest { format_version: DATASET_FORMAT_VERSION, spec: seq.spec.clone(), tasks, pretext, checksums };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn read_checked(dir: &Path, name: &str, checksums: &BTreeMap<String, String>) -> Result<Tensor> {
    let expected = checksums.get(name).ok_or_else(|| Error::Format(format!("manifest has no checksum for {name}")))?;
    let path = dir.join(name);
    let bytes = std::fs::read(&path).map_err(|e| Error::Format(format!("missing file {}: {e}", path.display())))?;
    if &sha256_hex(&bytes) != expected {
        return Err(Error::Format(format!("checksum mismatch for {}", path.display())));
    }
    decode_cft(&bytes).map(|(t, _)| t).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn labels_from(t: &Tensor, classes: usize) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && v >= 0.0 && (v as usize) < classes {
                Ok(v as usize)
            } else {
                Err(Error::Data(format!("label {v} is not an integer in [0, {classes})")))
            }
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<TaskSequence> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Format(format!("missing manifest {}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "dataset format version {} (this build reads {DATASET_FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let spec = &manifest.spec;
    let read_task = |prefix: &str, entry: &TaskEntry| -> Result<TaskDataset> {
        let [trx, try_, tex, tey] = task_files(prefix).map(|(n, _, _)| n);
        let split = |xn: &str, yn: &str, n: usize| -> Result<Split> {
            let x = read_checked(dir, xn, &manifest.checksums)?;
            let y = labels_from(&read_checked(dir, yn, &manifest.checksums)?, entry.classes)?;
            if x.shape() != [n, spec.channels, spec.height, spec.width] || y.len() != n {
                return Err(Error::Data(format!("{xn}: shape {:?} disagrees with manifest", x.shape())));
            }
            Ok(Split { x, y })
        };
        Ok(TaskDataset {
            id: entry.id,
            classes: entry.classes,
            train: split(&trx, &try_, entry.train)?,
            test: split(&tex, &tey, entry.test)?,
        })
    };
    let tasks = manifest.tasks.iter().map(|e| read_task(&format!("task{}", e.id), e)).collect::<Result<Vec<_>>>()?;
    let pretext = manifest.pretext.as_ref().map(|e| read_task("pretext", e)).transpose()?;
    Ok(TaskSequence { spec: manifest.spec.clone(), tasks, pretext })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaskSequenceSpec {
        TaskSequenceSpec {
            num_tasks: 2,
            classes_per_task: 3,
            train_per_class: 4,
            test_per_class: 2,
            height: 6,
            width: 5,
            pretext_classes: 2,
            pretext_train_per_class: 3,
            seed: 11,
            ..TaskSequenceSpec::default()
        }
    }

    #[test]
    fn zero_noise_gives_identical_samples() {
        let spec = TaskSequenceSpec { noise_scale: 0.0, ..small() };
        let seq = generate(&spec).unwrap();
        let t = &seq.tasks[0];
        let px = 6 * 5;
        for (i, &label) in t.train.y.iter().enumerate() {
            let first = t.train.y.iter().position(|&l| l == label).unwrap();
            assert_eq!(t.train.x.data()[i * px..(i + 1) * px], t.train.x.data()[first * px..(first + 1) * px]);
        }
    }

    #[test]
    fn labels_cover_classes() {
        let seq = generate(&small()).unwrap();
        for t in &seq.tasks {
            assert_eq!(t.train.len(), 12);
            assert_eq!(t.test.len(), 6);
            assert!(t.train.y.iter().all(|&y| y < 3));
        }
        assert_eq!(seq.pretext.as_ref().unwrap().classes, 2);
    }

    #[test]
    fn degenerate_spec_rejected() {
        let spec = TaskSequenceSpec { height: 0, ..small() };
        assert!(matches!(generate(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn unknown_spec_keys_rejected() {
        let err = serde_json::from_str::<TaskSequenceSpec>(r#"{"num_tasks": 2, "bogus": 1}"#);
        assert!(err.is_err());
    }

    #[test]
    fn save_load_identity_and_tamper_detection() {
        let seq = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&seq, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), seq);

        let victim = dir.path().join("task1.test.x.cft");
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("checksum")), "{err}");

        std::fs::remove_file(&victim).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    }
}
