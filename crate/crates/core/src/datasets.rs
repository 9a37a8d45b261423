//! Transition storage: the packed `[s; a; s']` representation, datasets and
//! their on-disk form, the replay buffer, and z-score normalization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Container, Dtype};
use crate::envsim::{Env, EnvSpec, Policy};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensornet::Tensor;

/// Segment layout of a packed transition vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionLayout {
    pub state_dim: usize,
    pub action_dim: usize,
}

impl TransitionLayout {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
        }
    }

    pub fn for_env(spec: &EnvSpec) -> Self {
        Self::new(spec.state_dim(), spec.action_dim())
    }

    pub fn len(&self) -> usize {
        2 * self.state_dim + self.action_dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Start offsets of the `s`, `a` and `s'` segments.
    pub fn offsets(&self) -> [usize; 3] {
        [0, self.state_dim, self.state_dim + self.action_dim]
    }

    /// Width of the conditioning prefix `[s; a]`.
    pub fn condition_len(&self) -> usize {
        self.state_dim + self.action_dim
    }

    pub fn pack(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<TransitionVector> {
        self.check(s, a, s_next)?;
        let mut data = Vec::with_capacity(self.len());
        data.extend_from_slice(s);
        data.extend_from_slice(a);
        data.extend_from_slice(s_next);
        Ok(TransitionVector { data, layout: *self })
    }

    pub fn check(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<()> {
        if s.len() != self.state_dim {
            return Err(Error::dim("transition state", self.state_dim, s.len()));
        }
        if a.len() != self.action_dim {
            return Err(Error::dim("transition action", self.action_dim, a.len()));
        }
        if s_next.len() != self.state_dim {
            return Err(Error::dim("transition next state", self.state_dim, s_next.len()));
        }
        Ok(())
    }
}

/// A packed transition `p = [s; a; s']`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionVector {
    data: Vec<f64>,
    layout: TransitionLayout,
}

impl TransitionVector {
    pub fn from_vec(layout: TransitionLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(Error::dim("transition vector", layout.len(), data.len()));
        }
        Ok(Self { data, layout })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn layout(&self) -> TransitionLayout {
        self.layout
    }

    pub fn state(&self) -> &[f64] {
        &self.data[..self.layout.state_dim]
    }

    pub fn action(&self) -> &[f64] {
        let [_, a, sn] = self.layout.offsets();
        &self.data[a..sn]
    }

    pub fn next_state(&self) -> &[f64] {
        &self.data[self.layout.offsets()[2]..]
    }

    pub fn unpack(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (
            self.state().to_vec(),
            self.action().to_vec(),
            self.next_state().to_vec(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
    pub r: Option<f64>,
    pub done: bool,
}

/// An ordered collection of transitions with consistent dims. Either every
/// transition carries a reward or none does.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    layout: TransitionLayout,
    has_rewards: bool,
    items: Vec<Transition>,
}

impl Dataset {
    pub fn new(layout: TransitionLayout, has_rewards: bool) -> Self {
        Self {
            layout,
            has_rewards,
            items: Vec::new(),
        }
    }

    pub fn layout(&self) -> TransitionLayout {
        self.layout
    }

    pub fn has_rewards(&self) -> bool {
        self.has_rewards
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.items
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        self.layout.check(&t.s, &t.a, &t.s_next)?;
        if t.r.is_some() != self.has_rewards {
            return Err(Error::InvalidArgument(format!(
                "reward presence {} does not match dataset (has_rewards = {})",
                t.r.is_some(),
                self.has_rewards
            )));
        }
        self.items.push(t);
        Ok(())
    }

    pub fn extend(&mut self, other: &Dataset) -> Result<()> {
        for t in other.transitions() {
            self.push(t.clone())?;
        }
        Ok(())
    }

    /// A reward-free copy, as required for target-domain demonstrations.
    pub fn without_rewards(&self) -> Dataset {
        Dataset {
            layout: self.layout,
            has_rewards: false,
            items: self
                .items
                .iter()
                .map(|t| Transition { r: None, ..t.clone() })
                .collect(),
        }
    }

    pub fn rewards(&self) -> Result<Vec<f64>> {
        if !self.has_rewards {
            return Err(Error::MissingRewards);
        }
        Ok(self.items.iter().map(|t| t.r.unwrap()).collect())
    }

    pub fn packed(&self, i: usize) -> TransitionVector {
        let t = &self.items[i];
        self.layout.pack(&t.s, &t.a, &t.s_next).unwrap()
    }

    /// All transitions packed into a `[len, 2S + A]` matrix.
    pub fn packed_matrix(&self) -> Tensor {
        let d = self.layout.len();
        let mut data = Vec::with_capacity(self.len() * d);
        for t in &self.items {
            data.extend_from_slice(&t.s);
            data.extend_from_slice(&t.a);
            data.extend_from_slice(&t.s_next);
        }
        Tensor::new(vec![self.len(), d], data).unwrap()
    }

    pub fn states(&self) -> Tensor {
        rows_of(self.items.iter().map(|t| t.s.as_slice()), self.layout.state_dim)
    }

    pub fn actions(&self) -> Tensor {
        rows_of(self.items.iter().map(|t| t.a.as_slice()), self.layout.action_dim)
    }

    pub fn next_states(&self) -> Tensor {
        rows_of(self.items.iter().map(|t| t.s_next.as_slice()), self.layout.state_dim)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "state_dim": self.layout.state_dim,
            "action_dim": self.layout.action_dim,
            "count": self.len(),
            "has_rewards": self.has_rewards,
        });
        let mut c = Container::new("dataset", meta);
        c.push("s", Dtype::F64, self.states());
        c.push("a", Dtype::F64, self.actions());
        c.push("s_next", Dtype::F64, self.next_states());
        if self.has_rewards {
            c.push_vec("r", &self.rewards()?);
        }
        let done: Vec<f64> = self.items.iter().map(|t| f64::from(u8::from(t.done))).collect();
        c.push_vec("done", &done);
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let c = Container::load(path)?;
        c.expect_kind("dataset")?;
        #[derive(Deserialize)]
        struct Meta {
            state_dim: usize,
            action_dim: usize,
            count: usize,
            has_rewards: bool,
        }
        let meta: Meta = serde_json::from_value(c.meta.clone())?;
        let layout = TransitionLayout::new(meta.state_dim, meta.action_dim);
        let s = c.get("s")?;
        let a = c.get("a")?;
        let sn = c.get("s_next")?;
        let done = c.get("done")?;
        let r = if meta.has_rewards { Some(c.get("r")?) } else { None };
        let check = |t: &Tensor, cols: usize, name: &str| -> Result<()> {
            if t.len() != meta.count * cols {
                return Err(Error::Format(format!(
                    "`{name}` holds {} values, expected {} x {cols}",
                    t.len(),
                    meta.count
                )));
            }
            Ok(())
        };
        check(s, meta.state_dim, "s")?;
        check(a, meta.action_dim, "a")?;
        check(sn, meta.state_dim, "s_next")?;
        check(done, 1, "done")?;
        if let Some(r) = r {
            check(r, 1, "r")?;
        }
        let mut ds = Dataset::new(layout, meta.has_rewards);
        let (sd, ad) = (meta.state_dim, meta.action_dim);
        for i in 0..meta.count {
            ds.items.push(Transition {
                s: s.data()[i * sd..(i + 1) * sd].to_vec(),
                a: a.data()[i * ad..(i + 1) * ad].to_vec(),
                s_next: sn.data()[i * sd..(i + 1) * sd].to_vec(),
                r: r.map(|r| r.data()[i]),
                done: done.data()[i] != 0.0,
            });
        }
        Ok(ds)
    }

    /// CSV with header `s_0..,a_0..,sn_0..,r,done`; `r` is empty when absent.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = Vec::new();
        header.extend((0..self.layout.state_dim).map(|i| format!("s_{i}")));
        header.extend((0..self.layout.action_dim).map(|i| format!("a_{i}")));
        header.extend((0..self.layout.state_dim).map(|i| format!("sn_{i}")));
        header.push("r".into());
        header.push("done".into());
        w.write_record(&header)?;
        for t in &self.items {
            let mut row: Vec<String> = Vec::with_capacity(header.len());
            row.extend(t.s.iter().chain(&t.a).chain(&t.s_next).map(|v| v.to_string()));
            row.push(t.r.map(|r| r.to_string()).unwrap_or_default());
            row.push(u8::from(t.done).to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn rows_of<'a>(rows: impl Iterator<Item = &'a [f64]>, cols: usize) -> Tensor {
    let data: Vec<f64> = rows.flat_map(|r| r.iter().copied()).collect();
    let n = data.len() / cols.max(1);
    Tensor::new(vec![n, cols], data).unwrap()
}

/// Roll `policy` in a fresh env for exactly `n_steps`, resetting at episode
/// end. Transitions carry the true environment reward.
pub fn collect_rollouts(
    spec: &EnvSpec,
    policy: &dyn Policy,
    n_steps: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    if n_steps == 0 {
        return Err(Error::Empty("collect_rollouts needs n_steps >= 1".into()));
    }
    let mut env = Env::new(spec.clone())?;
    let mut ds = Dataset::new(TransitionLayout::for_env(spec), true);
    env.reset(rng);
    for _ in 0..n_steps {
        let s = env.state().obs.clone();
        let a = policy.act(&s, rng);
        let out = env.step(&a)?;
        let a = a.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        ds.push(Transition {
            s,
            a,
            s_next: out.next,
            r: Some(out.reward),
            done: out.done,
        })?;
        if out.done {
            env.reset(rng);
        }
    }
    Ok(ds)
}

/// Per-dimension z-scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Normalizer {
    pub const STD_FLOOR: f64 = 1e-6;

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn from_stats(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::dim("normalizer stats", mean.len(), std.len()));
        }
        Ok(Self { mean, std })
    }

    /// Fit on the rows of one or more matrices with equal widths.
    pub fn fit(parts: &[&Tensor]) -> Result<Self> {
        let dim = parts.first().map(|p| p.cols()).unwrap_or(0);
        let n: usize = parts.iter().map(|p| p.rows()).sum();
        if n == 0 {
            return Err(Error::Empty("normalizer fit on zero rows".into()));
        }
        for p in parts {
            if p.cols() != dim {
                return Err(Error::dim("normalizer fit width", dim, p.cols()));
            }
        }
        let mut mean = vec![0.0; dim];
        for p in parts {
            for r in 0..p.rows() {
                for (m, v) in mean.iter_mut().zip(p.row(r)) {
                    *m += v;
                }
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; dim];
        for p in parts {
            for r in 0..p.rows() {
                for ((acc, v), m) in var.iter_mut().zip(p.row(r)).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let std = var
            .iter()
            .map(|v| (v / n as f64).sqrt().max(Self::STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn normalize_row(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    pub fn denormalize_row(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = *v * s + m;
        }
    }

    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut out = x.clone();
        for r in 0..out.rows() {
            self.normalize_row(out.row_mut(r));
        }
        Ok(out)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut out = x.clone();
        for r in 0..out.rows() {
            self.denormalize_row(out.row_mut(r));
        }
        Ok(out)
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::dim("normalizer input width", self.dim(), x.cols()));
        }
        Ok(())
    }

    /// Exact equality of the statistics, as required when a checkpoint's
    /// normalizer is compared against one recomputed from datasets.
    pub fn ensure_matches(&self, other: &Normalizer) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::NormalizerMismatch(format!(
                "dimension {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        for i in 0..self.dim() {
            if !close(self.mean[i], other.mean[i]) || !close(self.std[i], other.std[i]) {
                return Err(Error::NormalizerMismatch(format!(
                    "dimension {i}: mean {} vs {}, std {} vs {}",
                    self.mean[i], other.mean[i], self.std[i], other.std[i]
                )));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, c: &mut Container, prefix: &str) {
        c.push_vec(&format!("{prefix}.mean"), &self.mean);
        c.push_vec(&format!("{prefix}.std"), &self.std);
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        Self::from_stats(
            c.read_vec(&format!("{prefix}.mean"))?,
            c.read_vec(&format!("{prefix}.std"))?,
        )
    }
}

/// Where a stored buffer field came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Raw environment output.
    Source,
    /// Produced by the bridge translation or the reward model.
    Modulated,
    /// Produced by an analytic oracle standing in for a learned model.
    Oracle,
}

impl Provenance {
    fn code(self) -> f64 {
        match self {
            Provenance::Source => 0.0,
            Provenance::Modulated => 1.0,
            Provenance::Oracle => 2.0,
        }
    }

    fn from_code(v: f64) -> Result<Self> {
        match v as i64 {
            0 => Ok(Provenance::Source),
            1 => Ok(Provenance::Modulated),
            2 => Ok(Provenance::Oracle),
            _ => Err(Error::Format(format!("bad provenance code {v}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferRecord {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
    pub reward_from: Provenance,
    pub next_from: Provenance,
}

/// A sampled minibatch, one row per record.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub s: Tensor,
    pub a: Tensor,
    pub r: Vec<f64>,
    pub s_next: Tensor,
    pub done: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

/// Fixed-capacity FIFO ring of modulated transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    layout: TransitionLayout,
    capacity: usize,
    records: Vec<BufferRecord>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(layout: TransitionLayout, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be >= 1".into()));
        }
        Ok(Self {
            layout,
            capacity,
            records: Vec::new(),
            cursor: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn layout(&self) -> TransitionLayout {
        self.layout
    }

    /// Records in insertion order, oldest first.
    pub fn records(&self) -> impl Iterator<Item = &BufferRecord> {
        let (head, tail) = self.records.split_at(self.cursor % self.records.len().max(1));
        let wrapped = self.records.len() == self.capacity;
        let (first, second) = if wrapped { (tail, head) } else { (&self.records[..], &[][..]) };
        first.iter().chain(second.iter())
    }

    pub fn push(&mut self, rec: BufferRecord) -> Result<()> {
        self.layout.check(&rec.s, &rec.a, &rec.s_next)?;
        if self.records.len() < self.capacity {
            self.records.push(rec);
        } else {
            self.records[self.cursor] = rec;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    /// Uniform sampling with replacement.
    pub fn sample_indices(&self, batch: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        if self.records.is_empty() {
            return Err(Error::Empty("sample from an empty replay buffer".into()));
        }
        Ok((0..batch).map(|_| rng.index(self.records.len())).collect())
    }

    pub fn sample(&self, batch: usize, rng: &mut Rng) -> Result<Batch> {
        let idx = self.sample_indices(batch, rng)?;
        let (sd, ad) = (self.layout.state_dim, self.layout.action_dim);
        let mut s = Vec::with_capacity(batch * sd);
        let mut a = Vec::with_capacity(batch * ad);
        let mut sn = Vec::with_capacity(batch * sd);
        let mut r = Vec::with_capacity(batch);
        let mut done = Vec::with_capacity(batch);
        for &i in &idx {
            let rec = &self.records[i];
            s.extend_from_slice(&rec.s);
            a.extend_from_slice(&rec.a);
            sn.extend_from_slice(&rec.s_next);
            r.push(rec.r);
            done.push(f64::from(u8::from(rec.done)));
        }
        Ok(Batch {
            s: Tensor::new(vec![batch, sd], s)?,
            a: Tensor::new(vec![batch, ad], a)?,
            r,
            s_next: Tensor::new(vec![batch, sd], sn)?,
            done,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "state_dim": self.layout.state_dim,
            "action_dim": self.layout.action_dim,
            "capacity": self.capacity,
            "count": self.len(),
        });
        let mut c = Container::new("replay_buffer", meta);
        let ordered: Vec<&BufferRecord> = self.records().collect();
        let (sd, ad) = (self.layout.state_dim, self.layout.action_dim);
        c.push("s", Dtype::F64, rows_of(ordered.iter().map(|r| r.s.as_slice()), sd));
        c.push("a", Dtype::F64, rows_of(ordered.iter().map(|r| r.a.as_slice()), ad));
        c.push(
            "s_next",
            Dtype::F64,
            rows_of(ordered.iter().map(|r| r.s_next.as_slice()), sd),
        );
        c.push_vec("r", &ordered.iter().map(|r| r.r).collect::<Vec<_>>());
        let flags: Vec<f64> = ordered
            .iter()
            .flat_map(|r| [f64::from(u8::from(r.done)), r.reward_from.code(), r.next_from.code()])
            .collect();
        c.push_vec("flags", &flags);
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        c.expect_kind("replay_buffer")?;
        #[derive(Deserialize)]
        struct Meta {
            state_dim: usize,
            action_dim: usize,
            capacity: usize,
            count: usize,
        }
        let meta: Meta = serde_json::from_value(c.meta.clone())?;
        let layout = TransitionLayout::new(meta.state_dim, meta.action_dim);
        let mut buf = ReplayBuffer::new(layout, meta.capacity)?;
        let (s, a, sn, r, flags) = (
            c.get("s")?,
            c.get("a")?,
            c.get("s_next")?,
            c.get("r")?,
            c.get("flags")?,
        );
        if r.len() != meta.count || flags.len() != 3 * meta.count {
            return Err(Error::Format("replay buffer arrays disagree with count".into()));
        }
        let (sd, ad) = (meta.state_dim, meta.action_dim);
        for i in 0..meta.count {
            buf.push(BufferRecord {
                s: s.data()[i * sd..(i + 1) * sd].to_vec(),
                a: a.data()[i * ad..(i + 1) * ad].to_vec(),
                r: r.data()[i],
                s_next: sn.data()[i * sd..(i + 1) * sd].to_vec(),
                done: flags.data()[3 * i] != 0.0,
                reward_from: Provenance::from_code(flags.data()[3 * i + 1])?,
                next_from: Provenance::from_code(flags.data()[3 * i + 2])?,
            })?;
        }
        Ok(buf)
    }
}
