//! Dataset plumbing: a bit-exact binary tensor format, synthetic
//! dataset generation with a planted class hierarchy, and plain-text
//! dataset manifests.
//!
//! # Tensor file format (`.sht`)
//!
//! All integers little-endian:
//!
//! ```text
//! magic   4 bytes  "SHT1"
//! version u32      1
//! rank    u32
//! dims    rank x u64
//! payload product(dims) x f32, row-major
//! ```
//!
//! Payload length is validated against the header before any allocation.
//! Tensors are stored as 32-bit floats and widened on load.
//!
//! # Manifest format
//!
//! A plain-text file, one record per line:
//!
//! ```text
//! hyperssm-dataset v1
//! spec.n_samples 64
//! spec.t_steps 8
//! ... (remaining spec fields, including the seed)
//! vocab ans_0 ans_1 ...
//! sample <index> <query_type> <label> <audio_path> <visual_path> <question_path>
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::fmt;
use std::fmt::Write as _;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::FeatureBundle;
use crate::real::Real;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"SHT1";
pub const TENSOR_VERSION: u32 = 1;
const MANIFEST_HEADER: &str = "hyperssm-dataset v1";

/// Number of question types the synthetic task draws from. The label of a
/// sample is `(child_class + query_type) % vocab_size`, so answering
/// requires both the audio/visual content and the question.
pub const N_QUERY_TYPES: usize = 4;

/// Errors from file formats, manifests, and generation.
#[derive(Debug)]
pub enum DataError {
    Io { path: PathBuf, source: io::Error },
    BadMagic { path: PathBuf, found: [u8; 4] },
    BadVersion { path: PathBuf, found: u32 },
    /// Header-declared payload size disagrees with the file size.
    Truncated {
        path: PathBuf,
        expected_bytes: u64,
        actual_bytes: u64,
    },
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    MissingFile { sample: usize, path: PathBuf },
    /// A sample's tensor fails the manifest's shape contract.
    SampleShape {
        sample: usize,
        path: PathBuf,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    /// A loaded tensor's shape disagrees with expectation (non-sample files).
    TensorShape {
        path: PathBuf,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    Invalid { detail: String },
    Numeric(Error),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Self::BadMagic { path, found } => {
                write!(f, "{}: bad magic {found:?}", path.display())
            }
            Self::BadVersion { path, found } => {
                write!(f, "{}: unsupported version {found}", path.display())
            }
            Self::Truncated {
                path,
                expected_bytes,
                actual_bytes,
            } => write!(
                f,
                "{}: payload length mismatch (expected {expected_bytes} bytes, file has {actual_bytes})",
                path.display()
            ),
            Self::Parse { path, line, detail } => {
                write!(f, "{}:{line}: {detail}", path.display())
            }
            Self::MissingFile { sample, path } => {
                write!(f, "sample {sample}: missing file {}", path.display())
            }
            Self::SampleShape {
                sample,
                path,
                expected,
                found,
            } => write!(
                f,
                "sample {sample}: {} has shape {found:?}, expected {expected:?}",
                path.display()
            ),
            Self::TensorShape {
                path,
                expected,
                found,
            } => write!(
                f,
                "{}: shape {found:?}, expected {expected:?}",
                path.display()
            ),
            Self::Invalid { detail } => write!(f, "{detail}"),
            Self::Numeric(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<Error> for DataError {
    fn from(e: Error) -> Self {
        Self::Numeric(e)
    }
}

pub type DataResult<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl Fn(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes a tensor in the binary format above (payload narrowed to f32).
pub fn write_tensor_file<F: Real>(path: &Path, x: &Tensor<F>) -> DataResult<()> {
    x.ensure_finite("write_tensor_file")?;
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = io::BufWriter::new(file);
    let mut emit = |bytes: &[u8]| w.write_all(bytes).map_err(io_err(path));
    emit(&TENSOR_MAGIC)?;
    emit(&TENSOR_VERSION.to_le_bytes())?;
    emit(&(x.rank() as u32).to_le_bytes())?;
    for &d in x.shape() {
        emit(&(d as u64).to_le_bytes())?;
    }
    for &v in x.data() {
        emit(&(v.as_f64() as f32).to_le_bytes())?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a tensor written by [`write_tensor_file`]. Magic, version, and the
/// payload length are all validated before the payload is allocated.
pub fn read_tensor_file<F: Real>(path: &Path) -> DataResult<Tensor<F>> {
    let mut file = std::fs::File::open(path).map_err(io_err(path))?;
    let file_len = file.metadata().map_err(io_err(path))?.len();

    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(io_err(path))?;
    if magic != TENSOR_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf).map_err(io_err(path))?;
    let version = u32::from_le_bytes(u32buf);
    if version != TENSOR_VERSION {
        return Err(DataError::BadVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    file.read_exact(&mut u32buf).map_err(io_err(path))?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    let mut dims = Vec::with_capacity(rank);
    let mut u64buf = [0u8; 8];
    for _ in 0..rank {
        file.read_exact(&mut u64buf).map_err(io_err(path))?;
        dims.push(u64::from_le_bytes(u64buf));
    }
    let numel = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| DataError::Invalid {
            detail: format!("{}: dimension product overflows", path.display()),
        })?;
    let header_bytes = 4 + 4 + 4 + 8 * rank as u64;
    let expected_bytes = header_bytes + 4 * numel;
    if file_len != expected_bytes {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected_bytes,
            actual_bytes: file_len,
        });
    }

    let mut payload = vec![0u8; (4 * numel) as usize];
    file.read_exact(&mut payload).map_err(io_err(path))?;
    let data = payload
        .chunks_exact(4)
        .map(|c| F::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let shape = dims.iter().map(|&d| d as usize).collect();
    Ok(Tensor::new(shape, data)?)
}

/// Generation recipe for a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    /// Timesteps per sample.
    pub t_steps: usize,
    pub d_audio: usize,
    pub d_visual: usize,
    pub d_question: usize,
    pub vocab_size: usize,
    pub n_parent_classes: usize,
    pub n_child_classes: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> DataResult<()> {
        let checks = [
            (self.n_samples >= 1, "n_samples must be at least 1"),
            (self.t_steps >= 1, "t_steps must be at least 1"),
            (self.d_audio >= 1, "d_audio must be at least 1"),
            (self.d_visual >= 1, "d_visual must be at least 1"),
            (self.d_question >= 1, "d_question must be at least 1"),
            (self.vocab_size >= 2, "vocab_size must be at least 2"),
            (self.n_parent_classes >= 1, "need at least one parent class"),
            (
                self.n_child_classes >= self.n_parent_classes,
                "n_child_classes must be at least n_parent_classes",
            ),
            (self.noise_std >= 0.0, "noise_std must be non-negative"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(DataError::Invalid { detail: msg.into() });
            }
        }
        Ok(())
    }
}

/// One manifest record.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestSample {
    pub index: usize,
    pub query_type: usize,
    pub label: usize,
    pub audio_path: String,
    pub visual_path: String,
    pub question_path: String,
}

/// A parsed dataset manifest, rooted at its directory.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub spec: SyntheticSpec,
    pub vocab: Vec<String>,
    pub samples: Vec<ManifestSample>,
    /// Directory all sample paths are relative to.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = String::new();
        let _ = writeln!(out, "{MANIFEST_HEADER}");
        let _ = writeln!(out, "spec.n_samples {}", s.n_samples);
        let _ = writeln!(out, "spec.t_steps {}", s.t_steps);
        let _ = writeln!(out, "spec.d_audio {}", s.d_audio);
        let _ = writeln!(out, "spec.d_visual {}", s.d_visual);
        let _ = writeln!(out, "spec.d_question {}", s.d_question);
        let _ = writeln!(out, "spec.vocab_size {}", s.vocab_size);
        let _ = writeln!(out, "spec.n_parent_classes {}", s.n_parent_classes);
        let _ = writeln!(out, "spec.n_child_classes {}", s.n_child_classes);
        let _ = writeln!(out, "spec.noise_std {}", s.noise_std);
        let _ = writeln!(out, "spec.seed {}", s.seed);
        let _ = writeln!(out, "vocab {}", self.vocab.join(" "));
        for smp in &self.samples {
            let _ = writeln!(
                out,
                "sample {} {} {} {} {} {}",
                smp.index, smp.query_type, smp.label, smp.audio_path, smp.visual_path, smp.question_path
            );
        }
        out
    }

    /// Writes the manifest as `file_name` inside its root directory.
    pub fn write(&self, file_name: &str) -> DataResult<PathBuf> {
        let path = self.root.join(file_name);
        std::fs::write(&path, self.to_text()).map_err(io_err(&path))?;
        Ok(path)
    }

    /// Splits into a head of `n_head` samples and the remaining tail;
    /// both halves keep the spec echo and share the sample files.
    pub fn split(&self, n_head: usize) -> DataResult<(DatasetManifest, DatasetManifest)> {
        if n_head == 0 || n_head >= self.samples.len() {
            return Err(DataError::Invalid {
                detail: format!(
                    "cannot split {} samples at {n_head}",
                    self.samples.len()
                ),
            });
        }
        let mut head = self.clone();
        let mut tail = self.clone();
        tail.samples = head.samples.split_off(n_head);
        Ok((head, tail))
    }

    /// Loads every sample, shape-checking each tensor against the spec
    /// echo. Errors name the offending sample.
    pub fn load_bundles<F: Real>(&self) -> DataResult<Vec<FeatureBundle<F>>> {
        let s = &self.spec;
        let mut bundles = Vec::with_capacity(self.samples.len());
        for smp in &self.samples {
            let load = |rel: &str, expected: &[usize]| -> DataResult<Tensor<F>> {
                let path = self.root.join(rel);
                if !path.exists() {
                    return Err(DataError::MissingFile {
                        sample: smp.index,
                        path,
                    });
                }
                let t = read_tensor_file(&path)?;
                if t.shape() != expected {
                    return Err(DataError::SampleShape {
                        sample: smp.index,
                        path,
                        expected: expected.to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
                Ok(t)
            };
            let audio = load(&smp.audio_path, &[s.t_steps, s.d_audio])?;
            let visual = load(&smp.visual_path, &[s.t_steps, s.d_visual])?;
            let question = load(&smp.question_path, &[s.d_question])?;
            if smp.label >= s.vocab_size {
                return Err(DataError::Invalid {
                    detail: format!("sample {}: label {} outside vocab", smp.index, smp.label),
                });
            }
            bundles.push(FeatureBundle {
                audio,
                visual,
                question,
                label: smp.label,
                query_type: smp.query_type,
            });
        }
        Ok(bundles)
    }
}

/// Parses a manifest file.
pub fn load_manifest(path: &Path) -> DataResult<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let parse_err = |line: usize, detail: String| DataError::Parse {
        path: path.to_path_buf(),
        line,
        detail,
    };

    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MANIFEST_HEADER => {}
        other => {
            return Err(parse_err(
                1,
                format!("expected header {MANIFEST_HEADER:?}, got {:?}", other.map(|(_, h)| h)),
            ))
        }
    }

    let mut spec = SyntheticSpec {
        n_samples: 0,
        t_steps: 0,
        d_audio: 0,
        d_visual: 0,
        d_question: 0,
        vocab_size: 0,
        n_parent_classes: 0,
        n_child_classes: 0,
        noise_std: 0.0,
        seed: 0,
    };
    let mut vocab = Vec::new();
    let mut samples = Vec::new();

    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let key = fields.next().expect("non-empty line has a first field");
        match key {
            "vocab" => vocab = fields.map(str::to_string).collect(),
            "sample" => {
                let mut next = |what: &str| {
                    fields
                        .next()
                        .ok_or_else(|| parse_err(lineno, format!("sample record missing {what}")))
                };
                let index = next("index")?
                    .parse()
                    .map_err(|_| parse_err(lineno, "bad sample index".into()))?;
                let query_type = next("query_type")?
                    .parse()
                    .map_err(|_| parse_err(lineno, "bad query type".into()))?;
                let label = next("label")?
                    .parse()
                    .map_err(|_| parse_err(lineno, "bad label".into()))?;
                samples.push(ManifestSample {
                    index,
                    query_type,
                    label,
                    audio_path: next("audio path")?.to_string(),
                    visual_path: next("visual path")?.to_string(),
                    question_path: next("question path")?.to_string(),
                });
            }
            key if key.starts_with("spec.") => {
                let value = fields
                    .next()
                    .ok_or_else(|| parse_err(lineno, format!("{key} missing value")))?;
                let set_usize = |slot: &mut usize| {
                    value
                        .parse()
                        .map(|v| *slot = v)
                        .map_err(|_| parse_err(lineno, format!("bad value for {key}")))
                };
                match key {
                    "spec.n_samples" => set_usize(&mut spec.n_samples)?,
                    "spec.t_steps" => set_usize(&mut spec.t_steps)?,
                    "spec.d_audio" => set_usize(&mut spec.d_audio)?,
                    "spec.d_visual" => set_usize(&mut spec.d_visual)?,
                    "spec.d_question" => set_usize(&mut spec.d_question)?,
                    "spec.vocab_size" => set_usize(&mut spec.vocab_size)?,
                    "spec.n_parent_classes" => set_usize(&mut spec.n_parent_classes)?,
                    "spec.n_child_classes" => set_usize(&mut spec.n_child_classes)?,
                    "spec.noise_std" => {
                        spec.noise_std = value
                            .parse()
                            .map_err(|_| parse_err(lineno, "bad noise_std".into()))?;
                    }
                    "spec.seed" => {
                        spec.seed = value
                            .parse()
                            .map_err(|_| parse_err(lineno, "bad seed".into()))?;
                    }
                    _ => return Err(parse_err(lineno, format!("unknown spec field {key}"))),
                }
            }
            _ => return Err(parse_err(lineno, format!("unknown record type {key}"))),
        }
    }
    Ok(DatasetManifest {
        spec,
        vocab,
        samples,
        root,
    })
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; uses two uniforms per sample, deterministic per rng state.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Mean amplitude offset distinguishing the two children of a prototype
/// pair; keeps their pooled features (weakly) separable.
const PAIR_MEAN_OFFSET: f64 = 0.08;
/// Amplitude ramp strength across time; the strong, temporal half of the
/// pair signature.
const PAIR_RAMP_SLOPE: f64 = 0.5;

/// Class prototypes with a planted two-level hierarchy. Children come in
/// pairs sharing one prototype direction: the pair members differ in a
/// temporal amplitude signature (rising vs falling ramp, see
/// [`amplitude_at`]) plus a small mean offset. Pair prototypes are their
/// parent's direction plus a bounded offset, so within-parent cosine
/// similarity exceeds across-parent similarity.
struct Prototypes {
    dim: usize,
    children: Vec<Vec<f64>>,
    parent_of: Vec<usize>,
}

/// Amplitude multiplier of child `c` at timestep `t`: a linear ramp over
/// the sample, rising for even children and falling for odd ones, with a
/// `1 +- PAIR_MEAN_OFFSET` mean. The temporal mean stays class-separable
/// while the ramp direction is only visible to sequence models.
fn amplitude_at(child: usize, t: usize, t_steps: usize) -> f64 {
    let direction = if child % 2 == 0 { 1.0 } else { -1.0 };
    let phase = if t_steps < 2 {
        0.0
    } else {
        2.0 * t as f64 / (t_steps - 1) as f64 - 1.0
    };
    1.0 + direction * (PAIR_MEAN_OFFSET + PAIR_RAMP_SLOPE * phase)
}

fn build_prototypes(spec: &SyntheticSpec, rng: &mut impl Rng) -> Prototypes {
    let dim = spec.n_child_classes.max(8);
    let parents: Vec<Vec<f64>> = (0..spec.n_parent_classes)
        .map(|_| {
            let mut p: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
            normalize(&mut p);
            p
        })
        .collect();
    let spread = 0.5;
    let n_pairs = spec.n_child_classes.div_ceil(2);
    let pair_protos: Vec<Vec<f64>> = (0..n_pairs)
        .map(|pair| {
            let parent = pair % spec.n_parent_classes;
            let mut offset: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
            normalize(&mut offset);
            let mut proto: Vec<f64> = parents[parent]
                .iter()
                .zip(&offset)
                .map(|(p, o)| p + spread * o)
                .collect();
            normalize(&mut proto);
            proto
        })
        .collect();
    let mut children = Vec::with_capacity(spec.n_child_classes);
    let mut parent_of = Vec::with_capacity(spec.n_child_classes);
    for c in 0..spec.n_child_classes {
        let pair = c / 2;
        children.push(pair_protos[pair].clone());
        parent_of.push(pair % spec.n_parent_classes);
    }
    Prototypes {
        dim,
        children,
        parent_of,
    }
}

fn mean_cosine(pairs: &[(usize, usize)], protos: &[Vec<f64>]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for &(i, j) in pairs {
        acc += protos[i].iter().zip(&protos[j]).map(|(a, b)| a * b).sum::<f64>();
    }
    acc / pairs.len() as f64
}

/// Generates a synthetic dataset under `out_dir`: tensors in `samples/`,
/// manifest as `manifest.txt`. Audio and visual features are distinct
/// random projections of a shared child-class prototype plus Gaussian
/// noise per timestep; the question feature encodes the query type; the
/// label is `(child + query_type) % vocab_size`. Fully reproducible from
/// the spec's seed.
pub fn generate_synthetic_dataset(
    spec: &SyntheticSpec,
    out_dir: &Path,
) -> DataResult<DatasetManifest> {
    spec.validate()?;
    let samples_dir = out_dir.join("samples");
    std::fs::create_dir_all(&samples_dir).map_err(io_err(&samples_dir))?;

    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = build_prototypes(spec, &mut rng);

    // Hierarchy signal holds by construction; assert it at generation time.
    let mut within = Vec::new();
    let mut across = Vec::new();
    for i in 0..spec.n_child_classes {
        for j in (i + 1)..spec.n_child_classes {
            if protos.parent_of[i] == protos.parent_of[j] {
                within.push((i, j));
            } else {
                across.push((i, j));
            }
        }
    }
    if !within.is_empty() && !across.is_empty() {
        let (w, a) = (mean_cosine(&within, &protos.children), mean_cosine(&across, &protos.children));
        if w <= a {
            return Err(DataError::Invalid {
                detail: format!(
                    "hierarchy signal violated: within-parent cosine {w} <= across-parent {a}"
                ),
            });
        }
    }

    // Fixed random projections per modality.
    let scale = 1.0 / (protos.dim as f64).sqrt();
    let proj_a: Vec<f64> = (0..protos.dim * spec.d_audio)
        .map(|_| standard_normal(&mut rng) * scale)
        .collect();
    let proj_v: Vec<f64> = (0..protos.dim * spec.d_visual)
        .map(|_| standard_normal(&mut rng) * scale)
        .collect();
    // Unit question embedding per query type.
    let q_emb: Vec<Vec<f64>> = (0..N_QUERY_TYPES)
        .map(|_| {
            let mut q: Vec<f64> = (0..spec.d_question).map(|_| standard_normal(&mut rng)).collect();
            normalize(&mut q);
            q
        })
        .collect();

    let project = |proto: &[f64], proj: &[f64], d_out: usize| -> Vec<f64> {
        (0..d_out)
            .map(|j| {
                proto
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| p * proj[i * d_out + j])
                    .sum()
            })
            .collect()
    };

    let mut samples = Vec::with_capacity(spec.n_samples);
    for idx in 0..spec.n_samples {
        let child = rng.gen_range(0..spec.n_child_classes);
        let query_type = rng.gen_range(0..N_QUERY_TYPES);
        let label = (child + query_type) % spec.vocab_size;

        let base_a = project(&protos.children[child], &proj_a, spec.d_audio);
        let base_v = project(&protos.children[child], &proj_v, spec.d_visual);
        let mut audio = Vec::with_capacity(spec.t_steps * spec.d_audio);
        let mut visual = Vec::with_capacity(spec.t_steps * spec.d_visual);
        for t in 0..spec.t_steps {
            let w = amplitude_at(child, t, spec.t_steps);
            audio.extend(
                base_a
                    .iter()
                    .map(|&b| w * b + spec.noise_std * standard_normal(&mut rng)),
            );
            visual.extend(
                base_v
                    .iter()
                    .map(|&b| w * b + spec.noise_std * standard_normal(&mut rng)),
            );
        }

        let audio_rel = format!("samples/s{idx:05}_a.sht");
        let visual_rel = format!("samples/s{idx:05}_v.sht");
        let question_rel = format!("samples/s{idx:05}_q.sht");
        write_tensor_file(
            &out_dir.join(&audio_rel),
            &Tensor::<f64>::new(vec![spec.t_steps, spec.d_audio], audio)?,
        )?;
        write_tensor_file(
            &out_dir.join(&visual_rel),
            &Tensor::<f64>::new(vec![spec.t_steps, spec.d_visual], visual)?,
        )?;
        write_tensor_file(
            &out_dir.join(&question_rel),
            &Tensor::<f64>::new(vec![spec.d_question], q_emb[query_type].clone())?,
        )?;
        samples.push(ManifestSample {
            index: idx,
            query_type,
            label,
            audio_path: audio_rel,
            visual_path: visual_rel,
            question_path: question_rel,
        });
    }

    let manifest = DatasetManifest {
        spec: spec.clone(),
        vocab: (0..spec.vocab_size).map(|i| format!("ans_{i}")).collect(),
        samples,
        root: out_dir.to_path_buf(),
    };
    manifest.write("manifest.txt")?;
    Ok(manifest)
}
