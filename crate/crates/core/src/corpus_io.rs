//! Synthetic corpora with causal branching, and the on-disk formats for corpora
//! and run configs.
//!
//! Corpus files are line-delimited JSON. The first line is a header
//! `{"version":1,"K":…,"D":…,"num_controls":…}`; each following line is one atom
//! `{"controls":[…],"frames":[[…];K],"weight":…}`. Floats use shortest round-trip
//! formatting, so save → load → save is byte-stable.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{Atom, ConditionedCorpus, ControlId};
use crate::error::{FloodError, Result};
use crate::tensor::Mat;

pub const CORPUS_FORMAT_VERSION: u32 = 1;

/// Displacement pattern a control draws within its segment, relative to the
/// state the previous segment ended in. `variants` scales the pattern; each
/// variant becomes a separate atom. Variants are equally likely unless
/// `variant_weights` says otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Motif {
    pub shape: MotifShape,
    #[serde(default = "default_variants")]
    pub variants: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant_weights: Option<Vec<f64>>,
}

impl Motif {
    pub fn new(shape: MotifShape, variants: Vec<f64>) -> Self {
        Self {
            shape,
            variants,
            variant_weights: None,
        }
    }

    fn weight(&self, i: usize) -> f64 {
        match &self.variant_weights {
            None => 1.0 / self.variants.len() as f64,
            Some(w) => w[i] / w.iter().sum::<f64>(),
        }
    }
}

fn default_variants() -> Vec<f64> {
    vec![1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotifShape {
    Constant { level: f64 },
    Ramp { slope: f64 },
    /// Feature `d` is phase-shifted by `d·π/2`, so two features trace a loop.
    Sinusoid { amplitude: f64, period: f64, phase: f64 },
    /// `scale · ratio^j` at segment offset `j`.
    Geometric { scale: f64, ratio: f64 },
    /// Explicit displacement per segment offset: `values[j][d]`.
    Table { values: Vec<Vec<f64>> },
}

impl MotifShape {
    fn displacement(&self, j: usize, d: usize) -> f64 {
        match *self {
            MotifShape::Constant { level } => level,
            MotifShape::Ramp { slope } => slope * (j + 1) as f64,
            MotifShape::Sinusoid {
                amplitude,
                period,
                phase,
            } => {
                let phi = phase + d as f64 * PI / 2.0;
                amplitude * ((2.0 * PI * (j + 1) as f64 / period + phi).sin() - phi.sin())
            }
            MotifShape::Geometric { scale, ratio } => scale * ratio.powi(j as i32),
            MotifShape::Table { ref values } => values[j][d],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MotifShape::Constant { .. } => "constant",
            MotifShape::Ramp { .. } => "ramp",
            MotifShape::Sinusoid { .. } => "sinusoid",
            MotifShape::Geometric { .. } => "geometric",
            MotifShape::Table { .. } => "table",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    #[serde(rename = "K")]
    pub frames: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub segment_length: usize,
    pub num_controls: u32,
    pub branching_depth: usize,
    #[serde(with = "motif_keys")]
    pub motifs: BTreeMap<ControlId, Motif>,
    #[serde(default = "default_true")]
    pub noise_free: bool,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default = "default_separation")]
    pub min_separation: f64,
    #[serde(default)]
    pub seed: u64,
}

/// TOML tables need string keys, so control ids are written as strings.
mod motif_keys {
    use std::collections::BTreeMap;

    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::{ControlId, Motif};

    pub fn serialize<S: Serializer>(map: &BTreeMap<ControlId, Motif>, s: S) -> Result<S::Ok, S::Error> {
        let keyed: BTreeMap<String, &Motif> = map.iter().map(|(k, v)| (k.to_string(), v)).collect();
        keyed.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<ControlId, Motif>, D::Error> {
        BTreeMap::<String, Motif>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                k.parse::<ControlId>()
                    .map(|k| (k, v))
                    .map_err(|_| D::Error::custom(format!("motif key {k:?} is not a control id")))
            })
            .collect()
    }
}

fn default_true() -> bool {
    true
}

fn default_jitter() -> f64 {
    0.05
}

fn default_separation() -> f64 {
    0.5
}

impl CorpusSpec {
    /// Two controls over one segment, two sign variants each: 4 atoms, 2 per track.
    pub fn standard_four_atom() -> Self {
        let mut motifs = BTreeMap::new();
        motifs.insert(
            0,
            Motif::new(
                MotifShape::Sinusoid {
                    amplitude: 1.0,
                    period: 10.0,
                    phase: 0.0,
                },
                vec![1.0, -1.0],
            ),
        );
        motifs.insert(
            1,
            Motif::new(
                MotifShape::Ramp { slope: 0.15 },
                vec![1.0, -1.0],
            ),
        );
        Self {
            frames: 10,
            dim: 2,
            segment_length: 10,
            num_controls: 2,
            branching_depth: 1,
            motifs,
            noise_free: true,
            jitter: default_jitter(),
            min_separation: default_separation(),
            seed: 0,
        }
    }

    /// Two controls switching once: 4 control tracks with one atom each.
    pub fn branching_tree() -> Self {
        let mut motifs = BTreeMap::new();
        motifs.insert(
            0,
            Motif::new(
                MotifShape::Sinusoid {
                    amplitude: 0.8,
                    period: 10.0,
                    phase: 0.0,
                },
                vec![1.0],
            ),
        );
        motifs.insert(
            1,
            Motif::new(
                MotifShape::Ramp { slope: -0.2 },
                vec![1.0],
            ),
        );
        Self {
            frames: 10,
            dim: 2,
            segment_length: 5,
            num_controls: 2,
            branching_depth: 2,
            motifs,
            noise_free: true,
            jitter: default_jitter(),
            min_separation: default_separation(),
            seed: 0,
        }
    }

    /// One control, five binary branch points: 32 sign-mirrored atoms. Each
    /// segment moves ±0.5 then ±1.5 from its start, so the first frame of a
    /// segment is hard to tell apart and the second settles it. A causal mask cannot use that later frame while denoising the first.
    pub fn sensitivity_engineered() -> Self {
        let mut motifs = BTreeMap::new();
        motifs.insert(
            0,
            Motif::new(
                MotifShape::Table {
                    values: vec![vec![0.5], vec![1.5]],
                },
                vec![1.0, -1.0],
            ),
        );
        Self {
            frames: 10,
            dim: 1,
            segment_length: 2,
            num_controls: 1,
            branching_depth: 5,
            motifs,
            noise_free: true,
            jitter: default_jitter(),
            min_separation: 0.0,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.segment_length == 0 || self.branching_depth == 0 {
            return Err(FloodError::invalid("D, segment_length and branching_depth must be >= 1"));
        }
        if self.frames != self.segment_length * self.branching_depth {
            return Err(FloodError::invalid(format!(
                "K = {} must equal segment_length × branching_depth = {}",
                self.frames,
                self.segment_length * self.branching_depth
            )));
        }
        if self.num_controls == 0 {
            return Err(FloodError::invalid("need at least one control"));
        }
        for c in 0..self.num_controls {
            match self.motifs.get(&c) {
                None => {
                    return Err(FloodError::invalid(format!(
                        "motif library has no entry for control {c}"
                    )))
                }
                Some(m) if m.variants.is_empty() => {
                    return Err(FloodError::invalid(format!("motif {c} has no variants")))
                }
                Some(Motif {
                    shape: MotifShape::Table { values },
                    ..
                }) if values.len() != self.segment_length || values.iter().any(|r| r.len() != self.dim) => {
                    return Err(FloodError::invalid(format!(
                        "table motif {c} must be segment_length x D"
                    )))
                }
                Some(m)
                    if m.variant_weights.as_ref().is_some_and(|w| {
                        w.len() != m.variants.len() || w.iter().any(|&v| !(v > 0.0 && v.is_finite()))
                    }) =>
                {
                    return Err(FloodError::invalid(format!(
                        "motif {c} needs one positive weight per variant"
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

fn mix_hash(mut h: u64, v: u64) -> u64 {
    // FNV-1a over the little-endian bytes
    for b in v.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Enumerates every control track of `branching_depth` segments and every
/// variant path through it. Frames are generated segment by segment from the
/// previous segment's end state, so atoms that share a control prefix share
/// the distribution of the corresponding frame prefix.
pub fn generate_tree_corpus(spec: &CorpusSpec) -> Result<ConditionedCorpus> {
    spec.validate()?;
    let nc = spec.num_controls as usize;
    let depth = spec.branching_depth;
    let seg = spec.segment_length;
    let mut atoms = Vec::new();
    for track_idx in 0..nc.pow(depth as u32) {
        let seg_controls: Vec<ControlId> = (0..depth)
            .map(|s| ((track_idx / nc.pow((depth - 1 - s) as u32)) % nc) as ControlId)
            .collect();
        let counts: Vec<usize> = seg_controls
            .iter()
            .map(|c| spec.motifs[c].variants.len())
            .collect();
        let paths: usize = counts.iter().product();
        for path_idx in 0..paths {
            let mut rem = path_idx;
            let mut choice = vec![0usize; depth];
            for s in (0..depth).rev() {
                choice[s] = rem % counts[s];
                rem /= counts[s];
            }
            let mut frames = Mat::zeros(spec.frames, spec.dim);
            let mut state = vec![0.0; spec.dim];
            let mut key = mix_hash(0xcbf2_9ce4_8422_2325, spec.seed);
            for s in 0..depth {
                let c = seg_controls[s];
                let motif = &spec.motifs[&c];
                let v = motif.variants[choice[s]];
                key = mix_hash(mix_hash(key, c as u64), choice[s] as u64);
                let mut jitter_rng = ChaCha8Rng::seed_from_u64(key);
                for j in 0..seg {
                    let row = frames.row_mut(s * seg + j);
                    for d in 0..spec.dim {
                        let mut val = state[d] + v * motif.shape.displacement(j, d);
                        if !spec.noise_free {
                            let e: f64 = StandardNormal.sample(&mut jitter_rng);
                            val += spec.jitter * e;
                        }
                        row[d] = val;
                    }
                }
                state.copy_from_slice(frames.row(s * seg + seg - 1));
            }
            let weight: f64 = (0..depth)
                .map(|s| spec.motifs[&seg_controls[s]].weight(choice[s]))
                .product();
            let controls = seg_controls
                .iter()
                .flat_map(|&c| std::iter::repeat(c).take(seg))
                .collect();
            atoms.push(Atom {
                controls,
                frames,
                weight,
            });
        }
    }
    let corpus = ConditionedCorpus::new(atoms, spec.num_controls)?;
    let sep = corpus.min_within_track_separation();
    if sep < spec.min_separation {
        return Err(FloodError::Validation(format!(
            "atoms of one track are only {sep:.4} apart (margin {})",
            spec.min_separation
        )));
    }
    Ok(corpus)
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    #[serde(rename = "K")]
    frames: usize,
    #[serde(rename = "D")]
    dim: usize,
    num_controls: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct AtomRecord {
    controls: Vec<ControlId>,
    frames: Vec<Vec<f64>>,
    weight: f64,
}

pub fn corpus_to_string(corpus: &ConditionedCorpus) -> String {
    let mut out = String::new();
    let header = Header {
        version: CORPUS_FORMAT_VERSION,
        frames: corpus.frames(),
        dim: corpus.dim(),
        num_controls: corpus.num_controls(),
    };
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for a in corpus.atoms() {
        let rec = AtomRecord {
            controls: a.controls.clone(),
            frames: a.frames.to_rows(),
            weight: a.weight,
        };
        out.push_str(&serde_json::to_string(&rec).expect("atom serializes"));
        out.push('\n');
    }
    out
}

pub fn save_corpus(corpus: &ConditionedCorpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| FloodError::io(path, e))?;
    f.write_all(corpus_to_string(corpus).as_bytes())
        .map_err(|e| FloodError::io(path, e))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<ConditionedCorpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| FloodError::io(path, e))?;
    parse_corpus(&text, path)
}

pub fn parse_corpus(text: &str, path: &Path) -> Result<ConditionedCorpus> {
    let perr = |line: usize, msg: String| FloodError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hl, htext) = lines.next().ok_or_else(|| perr(1, "empty corpus file".into()))?;
    let header: Header = serde_json::from_str(htext).map_err(|e| perr(hl + 1, e.to_string()))?;
    if header.version != CORPUS_FORMAT_VERSION {
        return Err(perr(
            hl + 1,
            format!("unsupported corpus version {}", header.version),
        ));
    }
    let mut atoms = Vec::new();
    for (i, l) in lines {
        let rec: AtomRecord = serde_json::from_str(l).map_err(|e| perr(i + 1, e.to_string()))?;
        if rec.frames.len() != header.frames || rec.controls.len() != header.frames {
            return Err(perr(
                i + 1,
                format!(
                    "atom has {} frames and {} controls, header says K = {}",
                    rec.frames.len(),
                    rec.controls.len(),
                    header.frames
                ),
            ));
        }
        if let Some(r) = rec.frames.iter().find(|r| r.len() != header.dim) {
            return Err(perr(
                i + 1,
                format!("frame has {} features, header says D = {}", r.len(), header.dim),
            ));
        }
        atoms.push(Atom {
            controls: rec.controls,
            frames: Mat::from_rows(&rec.frames),
            weight: rec.weight,
        });
    }
    if atoms.is_empty() {
        return Err(perr(hl + 1, "corpus has no atoms".into()));
    }
    ConditionedCorpus::new(atoms, header.num_controls)
}

/// Reads a TOML config file.
pub fn load_config<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| FloodError::io(path, e))?;
    toml::from_str(&text).map_err(|e| FloodError::Parse {
        path: path.to_path_buf(),
        line: e
            .span()
            .map(|s| text[..s.start].lines().count().max(1))
            .unwrap_or(0),
        msg: e.message().to_string(),
    })
}

pub fn save_config<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = toml::to_string(value).map_err(|e| FloodError::invalid(e.to_string()))?;
    fs::write(path, text).map_err(|e| FloodError::io(path, e))
}
