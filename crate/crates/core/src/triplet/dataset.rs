use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    check_invariants, gen_add_with, gen_drop_with, gen_inpaint_with, gen_replace_with, gen_superres_with, Clip,
    EditRegion, Result, TripletConfig, TripletError, TripletExample,
};
use crate::audio;
use crate::seed;
use crate::text::{Task, TemplateSet};

/// Relative weight of each task in a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMix {
    weights: Vec<(Task, f64)>,
}

impl TaskMix {
    pub fn uniform() -> Self {
        Self {
            weights: Task::ALL.iter().map(|&t| (t, 1.0)).collect(),
        }
    }

    pub fn new(weights: Vec<(Task, f64)>) -> Result<Self> {
        if weights.iter().any(|(_, w)| !(*w >= 0.0) || !w.is_finite()) {
            return Err(TripletError::Config("task weights must be finite and >= 0".into()));
        }
        if weights.iter().all(|(_, w)| *w == 0.0) {
            return Err(TripletError::Config("task mix has no positive weight".into()));
        }
        let mut seen = HashSet::new();
        if !weights.iter().all(|(t, _)| seen.insert(*t)) {
            return Err(TripletError::Config("task listed twice in mix".into()));
        }
        Ok(Self { weights })
    }

    /// Parse `add=2,drop=1,...`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut weights = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (task, w) = part
                .split_once('=')
                .ok_or_else(|| TripletError::Config(format!("bad task mix entry {part:?}")))?;
            let task: Task = task.parse()?;
            let w: f64 = w
                .trim()
                .parse()
                .map_err(|_| TripletError::Config(format!("bad weight in {part:?}")))?;
            weights.push((task, w));
        }
        Self::new(weights)
    }

    /// Exact integer counts summing to `total`, by largest remainder.
    pub fn counts(&self, total: usize) -> BTreeMap<Task, usize> {
        let sum: f64 = self.weights.iter().map(|(_, w)| w).sum();
        let quotas: Vec<(Task, f64)> = self
            .weights
            .iter()
            .map(|&(t, w)| (t, total as f64 * w / sum))
            .collect();
        let mut counts: BTreeMap<Task, usize> = quotas.iter().map(|&(t, q)| (t, q.floor() as usize)).collect();
        let assigned: usize = counts.values().sum();
        let mut order: Vec<(Task, f64)> = quotas.iter().map(|&(t, q)| (t, q - q.floor())).collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (t, _) in order.into_iter().take(total - assigned) {
            *counts.get_mut(&t).unwrap() += 1;
        }
        counts
    }
}

impl Default for TaskMix {
    fn default() -> Self {
        Self::uniform()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Planned {
    index: usize,
    task: Task,
    sources: Vec<usize>,
    seed: u64,
}

/// Choose source clips for every example, sequentially from the root seed.
fn plan(n_clips: usize, counts: &BTreeMap<Task, usize>, seed: u64) -> Result<Vec<Planned>> {
    let need = |task: Task, k: usize| -> Result<()> {
        if counts.get(&task).copied().unwrap_or(0) > 0 && n_clips < k {
            return Err(TripletError::Corpus(format!(
                "{task} needs {k} distinct clips but the corpus has {n_clips}"
            )));
        }
        Ok(())
    };
    if n_clips == 0 {
        return Err(TripletError::Corpus("corpus is empty".into()));
    }
    need(Task::Add, 2)?;
    need(Task::Drop, 2)?;
    need(Task::Replace, 3)?;

    let mut rng = seed::rng_for(seed, "dataset/plan");
    let mut singles: Vec<usize> = Vec::new();
    let mut used: HashSet<Vec<usize>> = HashSet::new();
    let mut out = Vec::new();
    for task in Task::ALL {
        for _ in 0..counts.get(&task).copied().unwrap_or(0) {
            let sources = match task {
                Task::Inpaint | Task::SuperResolution => {
                    if singles.is_empty() {
                        singles = (0..n_clips).collect();
                        singles.shuffle(&mut rng);
                    }
                    vec![singles.pop().unwrap()]
                }
                Task::Add | Task::Drop | Task::Replace => {
                    let k = if task == Task::Replace { 3 } else { 2 };
                    let mut pick = Vec::new();
                    for _ in 0..32 {
                        pick = rand::seq::index::sample(&mut rng, n_clips, k).into_vec();
                        let mut key = pick.clone();
                        key.insert(0, task as usize);
                        if used.insert(key) {
                            break;
                        }
                    }
                    pick
                }
            };
            let index = out.len();
            out.push(Planned {
                index,
                task,
                sources,
                seed: seed::derive_indexed(seed, "dataset/example", index as u64),
            });
        }
    }
    Ok(out)
}

fn generate(p: &Planned, clips: &[Clip], cfg: &TripletConfig, set: &TemplateSet) -> Result<TripletExample> {
    let c = |i: usize| &clips[p.sources[i]];
    match p.task {
        Task::Add => gen_add_with(c(0), c(1), p.seed, cfg, set),
        Task::Drop => gen_drop_with(c(0), c(1), p.seed, cfg, set),
        Task::Replace => gen_replace_with(c(0), c(1), c(2), p.seed, cfg, set),
        Task::Inpaint => gen_inpaint_with(c(0), p.seed, cfg, set),
        Task::SuperResolution => gen_superres_with(c(0), p.seed, cfg, set),
    }
}

/// Generate `total` examples in memory, split across tasks by `mix`.
/// Output is independent of the number of worker threads.
pub fn generate_examples(
    clips: &[Clip],
    mix: &TaskMix,
    total: usize,
    seed: u64,
    cfg: &TripletConfig,
) -> Result<Vec<TripletExample>> {
    cfg.validate()?;
    let set = TemplateSet::builtin();
    let planned = plan(clips.len(), &mix.counts(total), seed)?;
    planned.par_iter().map(|p| generate(p, clips, cfg, &set)).collect()
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub index: usize,
    pub task: Task,
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub edit_region: EditRegion,
    pub sources: Vec<String>,
    pub seed: u64,
    pub duration_s: f64,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub records: Vec<DatasetRecord>,
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "manifest.jsonl";

    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(Self::FILE_NAME) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| TripletError::Manifest(format!("cannot read {}: {e}", path.display())))?;
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| TripletError::Manifest(format!("{} line {}: {e}", path.display(), i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            records,
            base_dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub manifest: PathBuf,
    pub per_task: BTreeMap<Task, usize>,
    pub total: usize,
    pub total_duration_s: f64,
    /// Hex digest of the manifest bytes.
    pub digest: String,
}

/// Generate a dataset under `out_dir`: `audio/*.wav` and `manifest.jsonl`.
///
/// Every example is checked against [`check_invariants`] before it is
/// written, and the manifest is written last and atomically, so a failed run
/// never leaves a manifest behind.
pub fn build_dataset(
    clips: &[Clip],
    mix: &TaskMix,
    total: usize,
    seed: u64,
    cfg: &TripletConfig,
    out_dir: &Path,
) -> Result<DatasetSummary> {
    cfg.validate()?;
    let set = TemplateSet::builtin();
    let planned = plan(clips.len(), &mix.counts(total), seed)?;
    std::fs::create_dir_all(out_dir.join("audio"))?;
    let records = planned
        .par_iter()
        .map(|p| {
            let ex = generate(p, clips, cfg, &set)?;
            check_invariants(&ex)?;
            let stem = format!("audio/{:05}_{}", p.index, p.task);
            let input = format!("{stem}_in.wav");
            let output = format!("{stem}_out.wav");
            audio::write_wav(&out_dir.join(&input), &ex.input)?;
            audio::write_wav(&out_dir.join(&output), &ex.output)?;
            Ok(DatasetRecord {
                index: p.index,
                task: p.task,
                instruction: ex.instruction,
                input,
                output,
                edit_region: ex.edit_region,
                sources: ex.provenance.source_ids,
                seed: p.seed,
                duration_s: ex.output.duration_s(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        records,
        base_dir: out_dir.to_path_buf(),
    };
    let text = manifest.to_jsonl();
    let path = out_dir.join(DatasetManifest::FILE_NAME);
    crate::io::atomic_write(&path, text.as_bytes())?;
    let mut per_task = BTreeMap::new();
    for r in &manifest.records {
        *per_task.entry(r.task).or_insert(0) += 1;
    }
    Ok(DatasetSummary {
        manifest: path,
        per_task,
        total: manifest.records.len(),
        total_duration_s: manifest.records.iter().map(|r| r.duration_s).sum(),
        digest: seed::digest_hex(text.as_bytes()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triplet::synth_clips;

    #[test]
    fn counts_are_exact_and_proportional() {
        let mix = TaskMix::uniform();
        assert!(mix.counts(50).values().all(|&c| c == 10));
        let counts = mix.counts(7);
        assert_eq!(counts.values().sum::<usize>(), 7);
        assert!(counts.values().all(|&c| c == 1 || c == 2));

        let mix = TaskMix::parse("add=3, drop=1, inpaint=0").unwrap();
        let counts = mix.counts(40);
        assert_eq!(counts[&Task::Add], 30);
        assert_eq!(counts[&Task::Drop], 10);
        assert_eq!(counts[&Task::Inpaint], 0);
        assert!(TaskMix::parse("add=-1").is_err());
        assert!(TaskMix::parse("add=0").is_err());
        assert!(TaskMix::parse("paint=1").is_err());
    }

    #[test]
    fn plan_avoids_reuse_and_rejects_small_corpora() {
        let counts = TaskMix::uniform().counts(50);
        let p = plan(12, &counts, 3).unwrap();
        assert_eq!(p.len(), 50);
        let adds: Vec<&Planned> = p.iter().filter(|x| x.task == Task::Add).collect();
        let distinct: HashSet<&Vec<usize>> = adds.iter().map(|x| &x.sources).collect();
        assert_eq!(distinct.len(), adds.len());
        let singles: Vec<usize> = p.iter().filter(|x| x.task == Task::Inpaint).map(|x| x.sources[0]).collect();
        assert_eq!(singles.iter().collect::<HashSet<_>>().len(), singles.len());
        assert!(plan(2, &counts, 3).is_err());
        assert!(plan(0, &TaskMix::parse("inpaint=1").unwrap().counts(3), 3).is_err());
        assert!(plan(1, &TaskMix::parse("inpaint=1").unwrap().counts(3), 3).is_ok());
    }

    #[test]
    fn build_writes_checked_reproducible_datasets() {
        let clips = synth_clips(8, 1, 16_000);
        let cfg = TripletConfig {
            clip_s: 2.0,
            event_max_s: 1.0,
            ..TripletConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let s1 = build_dataset(&clips, &TaskMix::uniform(), 10, 5, &cfg, a.path()).unwrap();
        let s2 = build_dataset(&clips, &TaskMix::uniform(), 10, 5, &cfg, b.path()).unwrap();
        assert_eq!(s1.total, 10);
        assert!(s1.per_task.values().all(|&c| c == 2));
        assert_eq!(s1.digest, s2.digest);
        assert!((s1.total_duration_s - 20.0).abs() < 1e-9);
        let m = DatasetManifest::load(a.path()).unwrap();
        assert_eq!(m.records.len(), 10);
        for r in &m.records {
            let w = audio::read_wav(&m.resolve(&r.input), 16_000).unwrap();
            assert_eq!(w.len(), 32_000);
        }
        let c = tempfile::tempdir().unwrap();
        build_dataset(&clips, &TaskMix::uniform(), 10, 6, &cfg, c.path()).unwrap();
        assert_ne!(std::fs::read(c.path().join("manifest.jsonl")).unwrap(), std::fs::read(&s1.manifest).unwrap());
    }

    #[test]
    fn generation_does_not_depend_on_thread_count() {
        let clips = synth_clips(6, 2, 16_000);
        let cfg = TripletConfig {
            clip_s: 1.0,
            event_max_s: 0.5,
            ..TripletConfig::default()
        };
        let many = generate_examples(&clips, &TaskMix::uniform(), 10, 9, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let one = pool.install(|| generate_examples(&clips, &TaskMix::uniform(), 10, 9, &cfg).unwrap());
        assert_eq!(many, one);
    }
}
