//! Deterministic multi-task synthetic corpus with participant-level labels
//! and splits.
//!
//! Each participant has one latent binary state `z ~ Bernoulli(p_positive)`,
//! which is the label of every record they contribute. For task `t`, a
//! record's feature sequence is
//!
//! ```text
//! x(l) = M_t * eta(l)                       (task style: colored noise)
//!      + offset_scale * o_t                 (constant task cue)
//!      + polarity_t * (2z-1) * snr_t * gate_t(l) * u_t   (label signal)
//!      + white_std * w(l)                   (white noise)
//! ```
//!
//! with `eta` an AR(1) latent sequence and `w` white Gaussian noise. The
//! pieces are chosen so the downstream comparisons have something real to
//! detect:
//!
//! * `u_t` mixes one shared direction with a task-specific one
//!   (`shared_mix`), so tasks carry transferable structure;
//! * `polarity_t` alternates sign across tasks by default, so a single
//!   shared adapter experiences destructive interference that per-task
//!   routing can avoid;
//! * `snr_t` follows a geometric ramp whose endpoints differ 4x, so
//!   single-task difficulty is ordered;
//! * `gate_t` concentrates the signal in a task-positioned burst whose
//!   location jitters per record (energy-normalized, so `snr_t` keeps its
//!   matched-filter meaning); locating the burst is the part of the
//!   problem that profits from training on all tasks at once;
//! * the last task draws its style matrix from a different family (sparse
//!   signs instead of Gaussian) and amplitude-modulates its signal, making
//!   it a structural outlier;
//! * `M_t` gives each task its own feature covariance, and the constant
//!   offset `o_t` marks task identity, which is what lets a router infer
//!   the task from content alone.
//!
//! Everything is a pure function of the config: participants use
//! independent, stream-indexed substreams of the master seed.

use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_participants: usize,
    pub n_tasks: usize,
    pub p_positive: f64,
    pub seq_len: usize,
    pub d_in: usize,
    /// Per-task signal-to-noise levels (length n_tasks, all positive).
    pub snr_schedule: Vec<f64>,
    /// Optional per-task seeds for the style/direction draws; derived from
    /// the master seed when absent.
    pub transform_seeds: Option<Vec<u64>>,
    /// Probability that a (participant, task) record exists.
    pub completion_rate: f64,
    /// Train/dev/test ratios; must sum to 1.
    pub split_ratios: [f64; 3],
    pub master_seed: u64,
    /// Weight of the shared direction inside each task's signal direction.
    pub shared_mix: f64,
    /// Alternate the sign of the label signal across tasks.
    pub polarity_conflicts: bool,
    /// Variance scale of the task-style (colored noise) component.
    pub style_var: f64,
    /// Standard deviation of the white noise component.
    pub white_std: f64,
    /// AR(1) coefficient of the latent temporal process.
    pub ar_rho: f64,
    /// Scale of the constant per-task offset cue.
    pub offset_scale: f64,
    /// Give the last task a structurally distinct transform family.
    pub outlier_last_task: bool,
    /// Fraction of the sequence the label signal occupies. Below 1.0 the
    /// signal concentrates in a task-positioned raised-cosine burst
    /// (energy-normalized, so `snr` keeps the same matched-filter meaning
    /// as the full-length gate); at 1.0 the signal covers every position.
    pub gate_width: f64,
    /// Per-record uniform jitter of the burst position, as a fraction of
    /// the sequence length. Ignored when gate_width is 1.0.
    pub gate_jitter: f64,
}

/// Default SNR ramp: geometric from `base` to `4 * base` across tasks.
/// Geometric signal-to-noise ramp from `base` to `base * ratio` across
/// tasks.
pub fn snr_ramp(n_tasks: usize, base: f64, ratio: f64) -> Vec<f64> {
    if n_tasks == 1 {
        return vec![base];
    }
    (0..n_tasks)
        .map(|t| base * ratio.powf(t as f64 / (n_tasks - 1) as f64))
        .collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_participants: 1223,
            n_tasks: 10,
            p_positive: 0.534,
            seq_len: 32,
            d_in: 16,
            snr_schedule: snr_ramp(10, 0.55, 4.0),
            transform_seeds: None,
            completion_rate: 1.0,
            split_ratios: [0.8, 0.1, 0.1],
            master_seed: 7,
            shared_mix: 0.6,
            polarity_conflicts: true,
            style_var: 1.0,
            white_std: 0.5,
            ar_rho: 0.8,
            offset_scale: 0.5,
            outlier_last_task: true,
            gate_width: 0.25,
            gate_jitter: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_participants == 0 || self.n_tasks == 0 || self.seq_len == 0 || self.d_in == 0 {
            return Err(Error::config("participants, tasks, seq_len and d_in must be positive"));
        }
        if !(self.p_positive > 0.0 && self.p_positive < 1.0) {
            return Err(Error::config(format!("p_positive {} not in (0,1)", self.p_positive)));
        }
        if self.snr_schedule.len() != self.n_tasks {
            return Err(Error::config(format!(
                "snr_schedule has {} entries for {} tasks",
                self.snr_schedule.len(),
                self.n_tasks
            )));
        }
        if self.snr_schedule.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("all SNR entries must be > 0"));
        }
        if let Some(seeds) = &self.transform_seeds {
            if seeds.len() != self.n_tasks {
                return Err(Error::config("transform_seeds length must equal n_tasks"));
            }
        }
        if !(0.0..=1.0).contains(&self.completion_rate) {
            return Err(Error::config("completion_rate must lie in [0,1]"));
        }
        let s: f64 = self.split_ratios.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.split_ratios.iter().any(|&r| r < 0.0) {
            return Err(Error::config(format!("split ratios {:?} must be >= 0 and sum to 1", self.split_ratios)));
        }
        if !(0.0..1.0).contains(&self.ar_rho.abs()) {
            return Err(Error::config("ar_rho must satisfy |rho| < 1"));
        }
        if !(self.gate_width > 0.0 && self.gate_width <= 1.0) {
            return Err(Error::config(format!("gate_width {} not in (0,1]", self.gate_width)));
        }
        if !(0.0..=1.0).contains(&self.gate_jitter) {
            return Err(Error::config(format!("gate_jitter {} not in [0,1]", self.gate_jitter)));
        }
        Ok(())
    }

    /// Stable hash of the full config (hex SHA-256 of its canonical JSON).
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex(&h.finalize())
    }

    fn task_seed(&self, t: usize) -> u64 {
        match &self.transform_seeds {
            Some(seeds) => seeds[t],
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
                rng.set_stream(1);
                let mut s = 0;
                for _ in 0..=t {
                    s = rng.gen::<u64>();
                }
                s
            }
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

#[derive(Debug, Clone)]
pub struct TaskRecord {
    pub participant_id: usize,
    pub task_id: usize,
    pub label: usize,
    pub features: Tensor,
}

#[derive(Debug, Clone)]
pub struct MultiTaskDataset {
    pub cfg: SynthConfig,
    pub records: Vec<TaskRecord>,
    /// Split assignment per participant id.
    pub split_of: Vec<Split>,
    /// Whether the participant completed all tasks.
    pub complete: Vec<bool>,
}

/// Per-task generation artifacts: style matrix, signal direction, offset,
/// and the base amplitude gate of the label signal over positions
/// (rotated per record when jitter is enabled).
struct TaskTransform {
    style: Vec<f64>,   // d_in x d_in
    u: Vec<f64>,       // unit signal direction
    offset: Vec<f64>,  // constant cue
    gate: Vec<f64>,    // seq_len amplitudes, sum of squares == seq_len
    polarity: f64,
    outlier: bool,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

fn build_transforms(cfg: &SynthConfig) -> Vec<TaskTransform> {
    let d = cfg.d_in;
    let mut shared_rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
    shared_rng.set_stream(0);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut shared: Vec<f64> = (0..d).map(|_| normal.sample(&mut shared_rng)).collect();
    normalize(&mut shared);

    (0..cfg.n_tasks)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.task_seed(t));
            rng.set_stream(2);
            let outlier = cfg.outlier_last_task && t + 1 == cfg.n_tasks;
            let style_std = (cfg.style_var / d as f64).sqrt();
            let style: Vec<f64> = if outlier {
                // Sparse sign family: entries in {-1, 0, +1}, scaled to match
                // the Gaussian family's per-dimension variance at density 1/3.
                let amp = (cfg.style_var / (d as f64 / 3.0)).sqrt();
                (0..d * d)
                    .map(|_| match rng.gen_range(0..3) {
                        0 => -amp,
                        1 => 0.0,
                        _ => amp,
                    })
                    .collect()
            } else {
                (0..d * d).map(|_| style_std * normal.sample(&mut rng)).collect()
            };
            let mut specific: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
            normalize(&mut specific);
            let mut u: Vec<f64> = shared
                .iter()
                .zip(&specific)
                .map(|(&s, &q)| cfg.shared_mix * s + (1.0 - cfg.shared_mix) * q)
                .collect();
            normalize(&mut u);
            let mut offset: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
            normalize(&mut offset);
            for o in offset.iter_mut() {
                *o *= cfg.offset_scale;
            }
            let polarity = if cfg.polarity_conflicts && t % 2 == 1 { -1.0 } else { 1.0 };
            let gate = base_gate(cfg, t, outlier);
            TaskTransform { style, u, offset, gate, polarity, outlier }
        })
        .collect()
}

/// Base amplitude gate of the label signal over positions, normalized so
/// the sum of squared amplitudes equals seq_len — a record's total signal
/// energy at a given `snr` is then independent of the gate shape, and
/// narrower gates only change how hard the signal is to locate.
fn base_gate(cfg: &SynthConfig, task: usize, outlier: bool) -> Vec<f64> {
    use std::f64::consts::PI;
    let len = cfg.seq_len;
    let mut g: Vec<f64> = if outlier {
        // Structurally distinct family: a global sinusoidal envelope
        // instead of a localized burst.
        (0..len).map(|l| 0.5 * (1.0 + (2.0 * PI * l as f64 / 8.0).sin())).collect()
    } else if cfg.gate_width >= 1.0 {
        return vec![1.0; len];
    } else {
        // Raised-cosine burst centered at a task-dependent position so
        // each task carries its signal in a different stretch of the
        // sequence.
        let w = ((cfg.gate_width * len as f64).round() as usize).clamp(1, len);
        let center = len as f64 * (task as f64 + 0.5) / cfg.n_tasks as f64;
        let start = (center - w as f64 / 2.0).round() as i64;
        let mut g = vec![0.0; len];
        for k in 0..w {
            let amp = (PI * (k as f64 + 0.5) / w as f64).sin().powi(2);
            g[(start + k as i64).rem_euclid(len as i64) as usize] = amp;
        }
        g
    };
    let energy: f64 = g.iter().map(|x| x * x).sum();
    let scale = (len as f64 / energy).sqrt();
    for x in g.iter_mut() {
        *x *= scale;
    }
    g
}

/// Generate the full corpus, including the participant-level split.
pub fn generate(cfg: &SynthConfig) -> Result<MultiTaskDataset> {
    cfg.validate()?;
    let transforms = build_transforms(cfg);
    let d = cfg.d_in;
    let len = cfg.seq_len;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut records = Vec::with_capacity(cfg.n_participants * cfg.n_tasks);
    let mut complete = vec![true; cfg.n_participants];

    for p in 0..cfg.n_participants {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
        rng.set_stream(10_000 + p as u64);
        let z = if rng.gen::<f64>() < cfg.p_positive { 1usize } else { 0usize };
        let sig_scale = 2.0 * z as f64 - 1.0;
        for (t, tr) in transforms.iter().enumerate() {
            if cfg.completion_rate < 1.0 && rng.gen::<f64>() >= cfg.completion_rate {
                complete[p] = false;
                continue;
            }
            let snr = cfg.snr_schedule[t];
            // Burst position jitter: rotate the task's gate by a uniform
            // per-record shift. The outlier's global envelope stays fixed.
            let max_shift = (cfg.gate_jitter * len as f64).round() as i64;
            let shift = if !tr.outlier && cfg.gate_width < 1.0 && max_shift > 0 {
                rng.gen_range(-max_shift..=max_shift)
            } else {
                0
            };
            let mut eta = vec![0.0; d];
            for e in eta.iter_mut() {
                *e = normal.sample(&mut rng);
            }
            let innov = (1.0 - cfg.ar_rho * cfg.ar_rho).sqrt();
            let mut data = Vec::with_capacity(len * d);
            for l in 0..len {
                if l > 0 {
                    for e in eta.iter_mut() {
                        *e = cfg.ar_rho * *e + innov * normal.sample(&mut rng);
                    }
                }
                let g = tr.gate[(l as i64 - shift).rem_euclid(len as i64) as usize];
                for i in 0..d {
                    // style row i dot eta
                    let mut style_i = 0.0;
                    let row = &tr.style[i * d..(i + 1) * d];
                    for (a, b) in row.iter().zip(&eta) {
                        style_i += a * b;
                    }
                    let val = style_i
                        + tr.offset[i]
                        + tr.polarity * sig_scale * snr * g * tr.u[i]
                        + cfg.white_std * normal.sample(&mut rng);
                    data.push(val);
                }
            }
            records.push(TaskRecord {
                participant_id: p,
                task_id: t,
                label: z,
                features: Tensor { shape: vec![len, d], data },
            });
        }
    }

    let mut ds = MultiTaskDataset { cfg: cfg.clone(), records, split_of: Vec::new(), complete };
    split(&mut ds, cfg.split_ratios, cfg.master_seed)?;
    Ok(ds)
}

/// Assign each participant to train/dev/test with floor-then-largest-
/// remainder sizing (ties broken toward the earlier split) and a seeded
/// shuffle. Errors if any split ends up empty.
pub fn split(ds: &mut MultiTaskDataset, ratios: [f64; 3], seed: u64) -> Result<()> {
    let n = ds.cfg.n_participants;
    let s: f64 = ratios.iter().sum();
    if (s - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::config(format!("split ratios {:?} must be >= 0 and sum to 1", ratios)));
    }
    let mut sizes = [0usize; 3];
    let mut remainders = [0.0f64; 3];
    let mut assigned = 0;
    for i in 0..3 {
        let exact = ratios[i] * n as f64;
        sizes[i] = exact.floor() as usize;
        remainders[i] = exact - exact.floor();
        assigned += sizes[i];
    }
    let mut order: Vec<usize> = vec![0, 1, 2];
    order.sort_by(|&a, &b| remainders[b].partial_cmp(&remainders[a]).unwrap().then(a.cmp(&b)));
    let mut leftover = n - assigned;
    for &i in &order {
        if leftover == 0 {
            break;
        }
        sizes[i] += 1;
        leftover -= 1;
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::config(format!(
            "split sizes {:?} from {} participants leave a split empty",
            sizes, n
        )));
    }

    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    ids.shuffle(&mut rng);
    let mut split_of = vec![Split::Train; n];
    for (i, &p) in ids.iter().enumerate() {
        split_of[p] = if i < sizes[0] {
            Split::Train
        } else if i < sizes[0] + sizes[1] {
            Split::Dev
        } else {
            Split::Test
        };
    }
    ds.split_of = split_of;
    Ok(())
}

impl MultiTaskDataset {
    /// Indices of the records belonging to a split. The test split keeps
    /// only participants that completed every task.
    pub fn records_in(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| {
                self.split_of[r.participant_id] == split
                    && (split != Split::Test || self.complete[r.participant_id])
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Participant counts per split.
    pub fn split_sizes(&self) -> [usize; 3] {
        let mut sizes = [0; 3];
        for s in &self.split_of {
            match s {
                Split::Train => sizes[0] += 1,
                Split::Dev => sizes[1] += 1,
                Split::Test => sizes[2] += 1,
            }
        }
        sizes
    }

    /// Structural invariants: per-participant label consistency, split
    /// partition, record sanity.
    pub fn assert_invariants(&self) -> Result<()> {
        let mut label_of: Vec<Option<usize>> = vec![None; self.cfg.n_participants];
        for r in &self.records {
            if r.task_id >= self.cfg.n_tasks {
                return Err(Error::index("dataset", format!("task id {}", r.task_id)));
            }
            match label_of[r.participant_id] {
                None => label_of[r.participant_id] = Some(r.label),
                Some(l) if l != r.label => {
                    return Err(Error::domain(
                        "dataset",
                        format!("participant {} has inconsistent labels", r.participant_id),
                    ));
                }
                _ => {}
            }
        }
        if self.split_of.len() != self.cfg.n_participants {
            return Err(Error::shape("dataset", "split assignment length mismatch"));
        }
        Ok(())
    }

    /// Write `dataset.csv` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir)?;
        let csv_path = dir.join("dataset.csv");
        let mut out = BufWriter::new(fs::File::create(&csv_path)?);
        let width = self.cfg.seq_len * self.cfg.d_in;
        write!(out, "participant_id,task_id,label,split,complete")?;
        for i in 0..width {
            write!(out, ",f{}", i)?;
        }
        writeln!(out)?;
        for r in &self.records {
            write!(
                out,
                "{},{},{},{},{}",
                r.participant_id,
                r.task_id,
                r.label,
                self.split_of[r.participant_id].tag(),
                self.complete[r.participant_id] as u8
            )?;
            for v in &r.features.data {
                write!(out, ",{}", v)?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        drop(out);

        let data_sha256 = sha256_file(&csv_path)?;
        let manifest = Manifest {
            format_version: 1,
            config: self.cfg.clone(),
            config_hash: self.cfg.config_hash(),
            data_sha256,
            n_records: self.records.len(),
            split_sizes: self.split_sizes(),
        };
        let mf = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest encode: {}", e)))?;
        fs::write(dir.join("manifest.json"), mf)?;
        Ok(manifest)
    }

    /// Load a saved dataset, validating both the config hash and the data
    /// file digest recorded in the manifest.
    pub fn load(dir: &Path) -> Result<MultiTaskDataset> {
        let manifest_raw = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest = serde_json::from_str(&manifest_raw)
            .map_err(|e| Error::Format(format!("manifest decode: {}", e)))?;
        if manifest.config.config_hash() != manifest.config_hash {
            return Err(Error::Format("manifest config hash mismatch".into()));
        }
        let csv_path = dir.join("dataset.csv");
        let digest = sha256_file(&csv_path)?;
        if digest != manifest.data_sha256 {
            return Err(Error::Format(format!(
                "dataset.csv digest {} does not match manifest {}",
                digest, manifest.data_sha256
            )));
        }
        let cfg = manifest.config.clone();
        let width = cfg.seq_len * cfg.d_in;
        let file = fs::File::open(&csv_path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("dataset.csv is empty".into()))??;
        let expected_cols = 5 + width;
        if header.split(',').count() != expected_cols {
            return Err(Error::Format(format!(
                "header has {} columns, expected {}",
                header.split(',').count(),
                expected_cols
            )));
        }
        let mut records = Vec::with_capacity(manifest.n_records);
        let mut split_of = vec![Split::Train; cfg.n_participants];
        let mut complete = vec![true; cfg.n_participants];
        for line in lines {
            let line = line?;
            let mut parts = line.split(',');
            let mut next = |name: &str| {
                parts
                    .next()
                    .ok_or_else(|| Error::Format(format!("missing column {}", name)))
            };
            let participant_id: usize = parse(next("participant_id")?)?;
            let task_id: usize = parse(next("task_id")?)?;
            let label: usize = parse(next("label")?)?;
            let split_tag = next("split")?;
            let complete_flag: u8 = parse(next("complete")?)?;
            if participant_id >= cfg.n_participants {
                return Err(Error::Format(format!("participant id {} out of range", participant_id)));
            }
            split_of[participant_id] = match split_tag {
                "train" => Split::Train,
                "dev" => Split::Dev,
                "test" => Split::Test,
                other => return Err(Error::Format(format!("unknown split tag '{}'", other))),
            };
            complete[participant_id] = complete_flag == 1;
            let mut data = Vec::with_capacity(width);
            for _ in 0..width {
                let v: f64 = parse(next("feature")?)?;
                data.push(v);
            }
            if parts.next().is_some() {
                return Err(Error::Format("row has extra columns".into()));
            }
            records.push(TaskRecord {
                participant_id,
                task_id,
                label,
                features: Tensor { shape: vec![cfg.seq_len, cfg.d_in], data },
            });
        }
        if records.len() != manifest.n_records {
            return Err(Error::Format(format!(
                "{} records in file, manifest says {}",
                records.len(),
                manifest.n_records
            )));
        }
        let ds = MultiTaskDataset { cfg, records, split_of, complete };
        ds.assert_invariants()?;
        Ok(ds)
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| Error::Format(format!("bad value '{}': {}", s, e)))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex(&h.finalize()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: SynthConfig,
    pub config_hash: String,
    pub data_sha256: String,
    pub n_records: usize,
    pub split_sizes: [usize; 3],
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_participants: 30,
            n_tasks: 3,
            seq_len: 6,
            d_in: 5,
            snr_schedule: snr_ramp(3, 0.5, 4.0),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = SynthConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.snr_schedule.len(), 10);
        let ratio = cfg.snr_schedule[9] / cfg.snr_schedule[0];
        assert!((ratio - 4.0).abs() < 1e-12);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = small_cfg();
        cfg.p_positive = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.snr_schedule = vec![0.5, 0.5];
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.snr_schedule = vec![0.5, 0.0, 0.5];
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.split_ratios = [0.5, 0.5, 0.5];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn full_completion_has_t_records_each() {
        let cfg = small_cfg();
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.records.len(), 30 * 3);
        ds.assert_invariants().unwrap();
        for p in 0..cfg.n_participants {
            let count = ds.records.iter().filter(|r| r.participant_id == p).count();
            assert_eq!(count, 3);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.features.data, y.features.data);
            assert_eq!(x.label, y.label);
        }
        let mut cfg2 = small_cfg();
        cfg2.master_seed += 1;
        let c = generate(&cfg2).unwrap();
        assert_ne!(a.records[0].features.data, c.records[0].features.data);
    }

    #[test]
    fn label_consistent_across_tasks() {
        let ds = generate(&small_cfg()).unwrap();
        for p in 0..30 {
            let labels: Vec<usize> = ds
                .records
                .iter()
                .filter(|r| r.participant_id == p)
                .map(|r| r.label)
                .collect();
            assert!(labels.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn default_positive_rate_near_target() {
        let ds = generate(&SynthConfig::default()).unwrap();
        let mut seen = vec![None; 1223];
        for r in &ds.records {
            seen[r.participant_id] = Some(r.label);
        }
        let positives: usize = seen.iter().map(|l| l.unwrap()).sum();
        let rate = positives as f64 / 1223.0;
        assert!((rate - 0.534).abs() <= 0.02, "positive rate {}", rate);
    }

    #[test]
    fn split_sizes_match_documented_rule() {
        let ds = generate(&SynthConfig::default()).unwrap();
        assert_eq!(ds.split_sizes(), [979, 122, 122]);
    }

    #[test]
    fn splits_partition_participants() {
        let ds = generate(&small_cfg()).unwrap();
        let sizes = ds.split_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), 30);
        assert!(sizes.iter().all(|&s| s > 0));
        // disjoint by construction (one tag per participant); check records route consistently
        for r in &ds.records {
            let s = ds.split_of[r.participant_id];
            let in_split = ds.records_in(s);
            assert!(in_split.iter().any(|&i| std::ptr::eq(&ds.records[i], r)));
        }
    }

    #[test]
    fn empty_split_is_configuration_error() {
        let mut cfg = small_cfg();
        cfg.n_participants = 5;
        cfg.split_ratios = [0.9, 0.05, 0.05];
        let err = generate(&cfg);
        assert!(err.is_err());
    }

    #[test]
    fn incomplete_participants_excluded_from_test_split() {
        let mut cfg = small_cfg();
        cfg.n_participants = 60;
        cfg.completion_rate = 0.6;
        let ds = generate(&cfg).unwrap();
        assert!(ds.complete.iter().any(|&c| !c), "some participant should be incomplete");
        for &i in &ds.records_in(Split::Test) {
            assert!(ds.complete[ds.records[i].participant_id]);
        }
        // train/dev keep incomplete participants' records
        let train_has_incomplete = ds
            .records_in(Split::Train)
            .iter()
            .any(|&i| !ds.complete[ds.records[i].participant_id]);
        assert!(train_has_incomplete);
    }

    #[test]
    fn snr_schedule_scales_signal() {
        // With noise silenced, feature magnitude along u_t tracks the SNR.
        let mut cfg = small_cfg();
        cfg.style_var = 0.0;
        cfg.white_std = 0.0;
        cfg.offset_scale = 0.0;
        cfg.outlier_last_task = false;
        cfg.polarity_conflicts = false;
        cfg.gate_width = 1.0; // constant gate so any single position carries the signal
        cfg.snr_schedule = vec![0.5, 1.0, 2.0];
        let ds = generate(&cfg).unwrap();
        let norm_of = |t: usize| -> f64 {
            let r = ds.records.iter().find(|r| r.task_id == t).unwrap();
            let row = r.features.row_slice(0);
            row.iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        let (n0, n1, n2) = (norm_of(0), norm_of(1), norm_of(2));
        assert!((n1 / n0 - 2.0).abs() < 1e-9, "norms {} {} {}", n0, n1, n2);
        assert!((n2 / n1 - 2.0).abs() < 1e-9, "norms {} {} {}", n0, n1, n2);
    }

    #[test]
    fn polarity_flips_signal_sign() {
        let mut cfg = small_cfg();
        cfg.style_var = 1e-12;
        cfg.white_std = 0.0;
        cfg.offset_scale = 0.0;
        cfg.outlier_last_task = false;
        cfg.shared_mix = 1.0; // identical direction for every task
        cfg.gate_width = 1.0; // constant gate so position 0 carries both signals
        cfg.snr_schedule = vec![1.0, 1.0, 1.0];
        cfg.polarity_conflicts = true;
        let ds = generate(&cfg).unwrap();
        let r0 = ds.records.iter().find(|r| r.task_id == 0).unwrap();
        let r1 = ds
            .records
            .iter()
            .find(|r| r.task_id == 1 && r.participant_id == r0.participant_id)
            .unwrap();
        let dot: f64 = r0
            .features
            .row_slice(0)
            .iter()
            .zip(r1.features.row_slice(0))
            .map(|(a, b)| a * b)
            .sum();
        assert!(dot < 0.0, "opposite polarity should anti-align, dot {}", dot);
    }

    #[test]
    fn gate_energy_independent_of_width() {
        // With noise silenced, a record's total signal energy is
        // snr^2 * seq_len regardless of how wide the burst is.
        for width in [0.125, 0.25, 0.5, 1.0] {
            let mut cfg = small_cfg();
            cfg.style_var = 0.0;
            cfg.white_std = 0.0;
            cfg.offset_scale = 0.0;
            cfg.outlier_last_task = false;
            cfg.polarity_conflicts = false;
            cfg.gate_width = width;
            cfg.snr_schedule = vec![0.5; cfg.n_tasks];
            let ds = generate(&cfg).unwrap();
            for r in &ds.records {
                let energy: f64 = r.features.data.iter().map(|v| v * v).sum();
                let expect = 0.25 * cfg.seq_len as f64;
                assert!(
                    (energy - expect).abs() < 1e-9,
                    "width {} energy {} expect {}",
                    width,
                    energy,
                    expect
                );
            }
        }
    }

    #[test]
    fn burst_positions_follow_task_and_jitter() {
        let mut cfg = small_cfg();
        cfg.style_var = 0.0;
        cfg.white_std = 0.0;
        cfg.offset_scale = 0.0;
        cfg.outlier_last_task = false;
        cfg.polarity_conflicts = false;
        cfg.snr_schedule = vec![1.0; cfg.n_tasks];
        cfg.gate_width = 0.25;
        cfg.gate_jitter = 0.0;
        let ds = generate(&cfg).unwrap();
        let peak_of = |r: &TaskRecord| -> usize {
            (0..cfg.seq_len)
                .max_by(|&a, &b| {
                    let ea: f64 = r.features.row_slice(a).iter().map(|v| v * v).sum();
                    let eb: f64 = r.features.row_slice(b).iter().map(|v| v * v).sum();
                    ea.partial_cmp(&eb).unwrap()
                })
                .unwrap()
        };
        // Without jitter every record of a task peaks at the same position,
        // and different tasks peak at different positions.
        let mut peaks = Vec::new();
        for t in 0..cfg.n_tasks {
            let task_peaks: Vec<usize> =
                ds.records.iter().filter(|r| r.task_id == t).map(|r| peak_of(r)).collect();
            assert!(task_peaks.windows(2).all(|w| w[0] == w[1]), "task {} peaks move", t);
            peaks.push(task_peaks[0]);
        }
        peaks.dedup();
        assert_eq!(peaks.len(), cfg.n_tasks, "tasks should peak at distinct positions");

        // With jitter the peak position varies across records of one task.
        cfg.gate_jitter = 0.25;
        let ds = generate(&cfg).unwrap();
        let jittered: std::collections::HashSet<usize> =
            ds.records.iter().filter(|r| r.task_id == 0).map(|r| peak_of(r)).collect();
        assert!(jittered.len() > 1, "jitter should move the burst");
    }

    #[test]
    fn save_load_round_trip_bit_exact() {
        let cfg = small_cfg();
        let ds = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = ds.save(dir.path()).unwrap();
        assert_eq!(manifest.n_records, ds.records.len());
        let loaded = MultiTaskDataset::load(dir.path()).unwrap();
        assert_eq!(loaded.records.len(), ds.records.len());
        for (a, b) in ds.records.iter().zip(&loaded.records) {
            assert_eq!(a.features.data, b.features.data, "features must round-trip bit-exactly");
            assert_eq!(a.label, b.label);
            assert_eq!(a.participant_id, b.participant_id);
        }
        assert_eq!(ds.split_of.len(), loaded.split_of.len());
        for (a, b) in ds.split_of.iter().zip(&loaded.split_of) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn load_detects_tampering() {
        let cfg = small_cfg();
        let ds = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let csv = dir.path().join("dataset.csv");
        let mut contents = fs::read_to_string(&csv).unwrap();
        contents.push_str("tampered\n");
        fs::write(&csv, contents).unwrap();
        match MultiTaskDataset::load(dir.path()) {
            Err(Error::Format(msg)) => assert!(msg.contains("digest")),
            other => panic!("expected digest mismatch, got {:?}", other.map(|_| ())),
        }
    }
}
