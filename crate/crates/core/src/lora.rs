//! Low-rank adapters and their task-primary grouping.
//!
//! A [`LoraModule`] adds `(α/r)·B·A·x` to the output of one projection. `A` is
//! `r × in`, `B` is `out × r` and starts at zero, so a fresh adapter is an
//! exact no-op.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Real};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::params::{cast_array, truncated_normal, Linear, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
    FfnIn,
    FfnOut,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
        Projection::FfnIn,
        Projection::FfnOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Key => "key",
            Projection::Value => "value",
            Projection::Output => "output",
            Projection::FfnIn => "ffn_in",
            Projection::FfnOut => "ffn_out",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ner,
    Tc,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Ner => "ner",
            Task::Tc => "tc",
        }
    }

    /// Parameter prefix of the task-primary group.
    pub fn group_name(self) -> String {
        format!("lora.{}", self.name())
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which layers carry adapters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    /// The final `n` layers.
    Last(usize),
    All,
    Explicit(BTreeSet<usize>),
}

impl LayerSelection {
    pub fn resolve(&self, num_layers: usize) -> Result<BTreeSet<usize>> {
        match self {
            LayerSelection::Last(n) => Ok((num_layers.saturating_sub(*n)..num_layers).collect()),
            LayerSelection::All => Ok((0..num_layers).collect()),
            LayerSelection::Explicit(set) => {
                if let Some(bad) = set.iter().find(|&&l| l >= num_layers) {
                    return Err(Error::config(format!(
                        "target layer {bad} outside [0, {num_layers})"
                    )));
                }
                Ok(set.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub target_projections: BTreeSet<Projection>,
    pub target_layers: LayerSelection,
    #[serde(default = "default_init_sigma")]
    pub init_sigma: f64,
}

fn default_init_sigma() -> f64 {
    0.02
}

fn tpl_projections() -> BTreeSet<Projection> {
    [
        Projection::Query,
        Projection::Key,
        Projection::FfnIn,
        Projection::FfnOut,
    ]
    .into_iter()
    .collect()
}

impl LoraSpec {
    /// Pre-finetuning task-primary adapters: r = 8, α = 16 on the last two
    /// layers.
    pub fn task_primary() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            target_projections: tpl_projections(),
            target_layers: LayerSelection::Last(2),
            init_sigma: default_init_sigma(),
        }
    }

    /// Downstream NER adaptation: r = 32, α = 64 on query, key and both MLP
    /// projections of every layer.
    pub fn ner_adaptation() -> Self {
        Self {
            rank: 32,
            alpha: 64.0,
            target_projections: tpl_projections(),
            target_layers: LayerSelection::All,
            init_sigma: default_init_sigma(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.rank < 1 {
            return Err(Error::config("LoRA rank must be >= 1"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config("LoRA alpha must be > 0"));
        }
        if !(self.init_sigma >= 0.0) {
            return Err(Error::config("LoRA init_sigma must be >= 0"));
        }
        self.target_layers.resolve(num_layers)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraModule<T> {
    /// `r × in`
    pub a: Array2<T>,
    /// `out × r`
    pub b: Array2<T>,
    pub alpha: f64,
    merged: bool,
}

/// Fresh adapter with `B = 0` and `A ~ N(0, σ²)` (truncated at 2σ).
pub fn lora_init<T: Real>(
    spec: &LoraSpec,
    in_dim: usize,
    out_dim: usize,
    seed: u64,
) -> Result<LoraModule<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LoraModule::init(spec, in_dim, out_dim, &mut rng)
}

impl<T: Real> LoraModule<T> {
    pub fn init(
        spec: &LoraSpec,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::shape("LoRA dims must be positive"));
        }
        if spec.rank < 1 {
            return Err(Error::config("LoRA rank must be >= 1"));
        }
        if spec.rank > in_dim.min(out_dim) {
            log::warn!(
                "LoRA rank {} exceeds min({in_dim}, {out_dim}); allowed but wasteful",
                spec.rank
            );
        }
        Ok(Self {
            a: truncated_normal(spec.rank, in_dim, spec.init_sigma, rng),
            b: Array2::zeros((out_dim, spec.rank)),
            alpha: spec.alpha,
            merged: false,
        })
    }

    pub fn from_factors(a: Array2<T>, b: Array2<T>, alpha: f64) -> Result<Self> {
        if a.nrows() != b.ncols() {
            return Err(Error::shape(format!(
                "A is {:?} but B is {:?}",
                a.dim(),
                b.dim()
            )));
        }
        Ok(Self {
            a,
            b,
            alpha,
            merged: false,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn scale(&self) -> T {
        T::lit(self.alpha / self.rank() as f64)
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    /// `(α/r)·B·A·x` for every row `x` of `x`.
    pub fn delta(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.a.t()).dot(&self.b.t()) * self.scale()
    }

    /// `y = Wx + (α/r)·B·A·x` given the base output `Wx`.
    pub fn forward(&self, base_output: &Array2<T>, x: &Array2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.in_dim()
            || base_output.ncols() != self.out_dim()
            || x.nrows() != base_output.nrows()
        {
            return Err(Error::shape(format!(
                "lora_forward: x {:?}, base {:?}, module {}→{}",
                x.dim(),
                base_output.dim(),
                self.in_dim(),
                self.out_dim()
            )));
        }
        Ok(base_output + &self.delta(x))
    }

    /// `(α/r)·B·A`, shaped like the base weight (`out × in`).
    pub fn delta_weight(&self) -> Array2<T> {
        self.b.dot(&self.a) * self.scale()
    }

    pub fn merged_weight(&self, base: &Array2<T>) -> Result<Array2<T>> {
        if base.dim() != (self.out_dim(), self.in_dim()) {
            return Err(Error::shape("merge: base weight shape"));
        }
        if self.b.iter().all(|v| *v == T::zero()) {
            return Ok(base.clone());
        }
        Ok(base + &self.delta_weight())
    }

    /// Folds the adapter into `linear.weight`; the module is then skipped by
    /// the encoder until [`Self::unmerge_from`].
    pub fn merge_into(&mut self, linear: &mut Linear<T>) -> Result<()> {
        if self.merged {
            return Err(Error::AlreadyMerged);
        }
        linear.weight = self.merged_weight(&linear.weight)?;
        self.merged = true;
        Ok(())
    }

    pub fn unmerge_from(&mut self, linear: &mut Linear<T>) -> Result<()> {
        if !self.merged {
            return Err(Error::NotMerged);
        }
        linear.weight = &linear.weight - &self.delta_weight();
        self.merged = false;
        Ok(())
    }

    /// Adds the adapter's delta for input node `x` to the tape.
    pub fn graph(&self, g: &mut Graph<T>, prefix: &str, x: NodeId) -> Result<NodeId> {
        let a = g.param(&format!("{prefix}.a"), &self.a);
        let b = g.param(&format!("{prefix}.b"), &self.b);
        let xa = g.matmul_bt(x, a)?;
        let xab = g.matmul_bt(xa, b)?;
        Ok(g.scale(xab, self.scale()))
    }

    pub fn cast<U: Real>(&self) -> LoraModule<U> {
        LoraModule {
            a: cast_array(&self.a),
            b: cast_array(&self.b),
            alpha: self.alpha,
            merged: self.merged,
        }
    }
}

/// Adapters keyed by `(layer, projection)` under one parameter prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGroup<T> {
    pub name: String,
    pub spec: LoraSpec,
    pub modules: BTreeMap<(usize, Projection), LoraModule<T>>,
}

impl<T: Real> AdapterGroup<T> {
    pub fn new(
        name: impl Into<String>,
        spec: &LoraSpec,
        cfg: &EncoderConfig,
        seed: u64,
    ) -> Result<Self> {
        Self::warm_started(name, spec, cfg, seed, None)
    }

    /// Like [`Self::new`], but modules that exist in `init_from` start from
    /// those factors. Ranks may differ: the warm factors fill the first rows
    /// of `A` and first columns of `B` (rescaled by the ratio of scales), so
    /// the module's delta equals the source delta exactly.
    pub fn warm_started(
        name: impl Into<String>,
        spec: &LoraSpec,
        cfg: &EncoderConfig,
        seed: u64,
        init_from: Option<&AdapterGroup<T>>,
    ) -> Result<Self> {
        spec.validate(cfg.num_layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut modules = BTreeMap::new();
        for layer in spec.target_layers.resolve(cfg.num_layers)? {
            for &proj in &spec.target_projections {
                let (out_dim, in_dim) = proj.dims(cfg);
                let mut m = LoraModule::init(spec, in_dim, out_dim, &mut rng)?;
                if let Some(src) = init_from.and_then(|g| g.module(layer, proj)) {
                    m = warm_module(spec, m, src)?;
                }
                modules.insert((layer, proj), m);
            }
        }
        Ok(Self {
            name: name.into(),
            spec: spec.clone(),
            modules,
        })
    }

    pub fn module(&self, layer: usize, proj: Projection) -> Option<&LoraModule<T>> {
        self.modules.get(&(layer, proj))
    }

    pub fn module_mut(&mut self, layer: usize, proj: Projection) -> Option<&mut LoraModule<T>> {
        self.modules.get_mut(&(layer, proj))
    }

    pub fn module_prefix(&self, layer: usize, proj: Projection) -> String {
        format!("{}.layers.{layer}.{}", self.name, proj.name())
    }

    pub fn layers(&self) -> BTreeSet<usize> {
        self.modules.keys().map(|(l, _)| *l).collect()
    }

    pub fn check_compatible(&self, cfg: &EncoderConfig) -> Result<()> {
        for (&(layer, proj), m) in &self.modules {
            if layer >= cfg.num_layers {
                return Err(Error::config(format!(
                    "{}: adapter on layer {layer} but encoder has {} layers",
                    self.name, cfg.num_layers
                )));
            }
            if (m.out_dim(), m.in_dim()) != proj.dims(cfg) {
                return Err(Error::shape(format!(
                    "{}: adapter {layer}.{proj} dims do not match encoder",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Folds every module into a copy of `params`.
    pub fn merged_encoder(&self, params: &EncoderParams<T>) -> Result<EncoderParams<T>> {
        let mut out = params.clone();
        let mut group = self.clone();
        for (&(layer, proj), m) in group.modules.iter_mut() {
            if !m.is_merged() {
                m.merge_into(out.layers[layer].projection_mut(proj))?;
            }
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> AdapterGroup<U> {
        AdapterGroup {
            name: self.name.clone(),
            spec: self.spec.clone(),
            modules: self.modules.iter().map(|(k, m)| (*k, m.cast())).collect(),
        }
    }
}

fn warm_module<T: Real>(
    spec: &LoraSpec,
    fresh: LoraModule<T>,
    src: &LoraModule<T>,
) -> Result<LoraModule<T>> {
    if src.in_dim() != fresh.in_dim() || src.out_dim() != fresh.out_dim() {
        return Err(Error::shape("warm-start adapter dims differ"));
    }
    let r_src = src.rank();
    if r_src > spec.rank {
        return Err(Error::config(format!(
            "cannot warm-start rank {} from rank {r_src}",
            spec.rank
        )));
    }
    let ratio = src.scale() / fresh.scale();
    let mut a = fresh.a;
    let mut b = fresh.b;
    for r in 0..r_src {
        a.row_mut(r).assign(&src.a.row(r));
        b.column_mut(r).assign(&(&src.b.column(r) * ratio));
    }
    LoraModule::from_factors(a, b, spec.alpha)
}

impl<T: Real> Parameters<T> for AdapterGroup<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array2<T>)) {
        for (&(layer, proj), m) in &self.modules {
            let p = self.module_prefix(layer, proj);
            f(&format!("{p}.a"), &m.a);
            f(&format!("{p}.b"), &m.b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<T>)) {
        let name = self.name.clone();
        for (&(layer, proj), m) in self.modules.iter_mut() {
            let p = format!("{name}.layers.{layer}.{}", proj.name());
            f(&format!("{p}.a"), &mut m.a);
            f(&format!("{p}.b"), &mut m.b);
        }
    }
}

/// One adapter group per task family, disjoint in parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskPrimaryAdapterSet<T> {
    pub groups: BTreeMap<Task, AdapterGroup<T>>,
}

/// Attaches a task-primary group for each of `tasks` to an encoder. The
/// backbone is not modified.
pub fn attach_task_primary<T: Real>(
    params: &EncoderParams<T>,
    spec: &LoraSpec,
    tasks: &[Task],
    seed: u64,
) -> Result<TaskPrimaryAdapterSet<T>> {
    let mut set = TaskPrimaryAdapterSet::default();
    for (i, &task) in tasks.iter().enumerate() {
        if set.groups.contains_key(&task) {
            continue;
        }
        let group = AdapterGroup::new(
            task.group_name(),
            spec,
            &params.config,
            seed.wrapping_add(1 + i as u64),
        )?;
        set.groups.insert(task, group);
    }
    set.check_disjoint()?;
    Ok(set)
}

impl<T: Real> TaskPrimaryAdapterSet<T> {
    pub fn group(&self, task: Task) -> Option<&AdapterGroup<T>> {
        self.groups.get(&task)
    }

    pub fn group_mut(&mut self, task: Task) -> Option<&mut AdapterGroup<T>> {
        self.groups.get_mut(&task)
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Fails if two groups would register the same parameter name.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for g in self.groups.values() {
            for n in g.param_names() {
                if !seen.insert(n.clone()) {
                    return Err(Error::config(format!(
                        "internal: parameter {n} registered by two adapter groups"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> TaskPrimaryAdapterSet<U> {
        TaskPrimaryAdapterSet {
            groups: self.groups.iter().map(|(k, g)| (*k, g.cast())).collect(),
        }
    }
}

impl<T: Real> Parameters<T> for TaskPrimaryAdapterSet<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array2<T>)) {
        for g in self.groups.values() {
            g.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<T>)) {
        for g in self.groups.values_mut() {
            g.visit_mut(f);
        }
    }
}
