//! Bottom-up enumeration over the grammar with observational-equivalence
//! pruning.

use std::collections::HashSet;
use std::fmt;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::Backend;
use crate::dataset::{Dataset, ImageRecord};
use crate::expr::{eval_weights, Expr, ExprError, TerminalKind};
use crate::metrics::{image_value, MetricKind};
use crate::syntax::print_expr;
use crate::trace::{Outcome, TierScore, TraceEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnaryRule {
    #[serde(rename = "ReLU", alias = "Relu")]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryRule {
    Add,
    TwoPlus,
    Mul,
}

impl UnaryRule {
    pub fn apply(self, e: &Expr) -> Expr {
        match self {
            UnaryRule::Relu => Expr::relu(e.clone()),
        }
    }
}

impl BinaryRule {
    pub fn apply(self, a: &Expr, b: &Expr) -> Expr {
        match self {
            BinaryRule::Add => Expr::add(a.clone(), b.clone()),
            BinaryRule::TwoPlus => Expr::two_plus(a.clone(), b.clone()),
            BinaryRule::Mul => Expr::mul(a.clone(), b.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub terminals: Vec<TerminalKind>,
    #[serde(default)]
    pub unary_rules: Vec<UnaryRule>,
    #[serde(default)]
    pub binary_rules: Vec<BinaryRule>,
}

impl GrammarConfig {
    fn with_terminals(terminals: Vec<TerminalKind>) -> Self {
        Self {
            terminals,
            unary_rules: vec![UnaryRule::Relu],
            binary_rules: vec![BinaryRule::Add, BinaryRule::TwoPlus, BinaryRule::Mul],
        }
    }

    /// Gradient terminals only: `Grads` and its `top_n` variants.
    pub fn g1() -> Self {
        Self::with_terminals(TerminalKind::ALL.iter().copied().filter(|k| k.top_n().is_some() || *k == TerminalKind::Grads).collect())
    }

    /// Every terminal.
    pub fn g2() -> Self {
        Self::with_terminals(TerminalKind::ALL.to_vec())
    }

    pub fn named(name: &str) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "G1" => Some(Self::g1()),
            "G2" => Some(Self::g2()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.terminals.is_empty() {
            return Err("grammar must enable at least one terminal".into());
        }
        let distinct: HashSet<_> = self.terminals.iter().collect();
        if distinct.len() != self.terminals.len() {
            return Err("grammar lists a terminal twice".into());
        }
        Ok(())
    }

    /// Raw yield count of one expansion of a pool of `n` expressions.
    pub fn yield_count(&self, n: usize) -> usize {
        self.unary_rules.len() * n + self.binary_rules.len() * n * n
    }
}

/// Lazily yields every unary rule over `pool`, then every binary rule over
/// the ordered cross product `pool x pool`.
pub fn expand_stream<'a>(pool: &'a [Expr], g: &'a GrammarConfig) -> impl Iterator<Item = Expr> + 'a {
    let unary = g
        .unary_rules
        .iter()
        .flat_map(move |r| pool.iter().map(move |e| r.apply(e)));
    let binary = g
        .binary_rules
        .iter()
        .flat_map(move |r| pool.iter().flat_map(move |a| pool.iter().map(move |b| r.apply(a, b))));
    unary.chain(binary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquivalenceMode {
    /// Equal (quantized) weight vectors on the equivalence records.
    #[default]
    #[serde(alias = "map")]
    MapEquality,
    /// Equal (quantized) metric values on the equivalence records.
    #[serde(alias = "metric")]
    MetricEquality,
}

fn default_tolerance() -> f64 {
    1e-6
}

fn default_per_class() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceConfig {
    #[serde(default)]
    pub mode: EquivalenceMode,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Records drawn per class.
    #[serde(default = "default_per_class")]
    pub per_class: usize,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        Self {
            mode: EquivalenceMode::MapEquality,
            tolerance: default_tolerance(),
            per_class: default_per_class(),
        }
    }
}

/// The probe records that decide observational equivalence.
#[derive(Debug, Clone)]
pub struct EquivalenceSet {
    pub records: Vec<ImageRecord>,
    pub mode: EquivalenceMode,
    pub tolerance: f64,
    /// Metric compared in [`EquivalenceMode::MetricEquality`].
    pub metric: Option<MetricKind>,
}

impl EquivalenceSet {
    /// Draws `cfg.per_class` records from each class (seeded), ordered by
    /// class.
    pub fn select(ds: &Dataset, cfg: &EquivalenceConfig, metric: MetricKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes().max(1)];
        for i in 0..ds.len() {
            let s = ds.stratum(i).min(by_class.len() - 1);
            by_class[s].push(i);
        }
        let mut records = Vec::new();
        for group in &mut by_class {
            group.shuffle(&mut rng);
            records.extend(group.iter().take(cfg.per_class.max(1)).map(|&i| ds.records[i].clone()));
        }
        Self {
            records,
            mode: cfg.mode,
            tolerance: cfg.tolerance,
            metric: Some(metric),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    /// First 16 bytes as lowercase hex.
    pub fn hex(&self) -> String {
        self.0[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.hex())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FingerprintError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("metric equality needs a metric")]
    NoMetric,
}

/// Quantization key of one value: a binary exponent and a rounded mantissa.
///
/// Values below 2 in magnitude round on an absolute grid of `tol`; larger
/// values are first divided by `2^e` (`e = floor(log2 |v|)`), so the grid
/// step stays within a factor of two of `tol * |v|`.
pub fn quantize(v: f64, tol: f64) -> (i32, i64) {
    let a = v.abs();
    let e = if a >= 2.0 { a.log2().floor() as i32 } else { 0 };
    let scaled = v / 2f64.powi(e);
    let q = (scaled / tol).round();
    // -0 and 0 share a key.
    (e, if q == 0.0 { 0 } else { q as i64 })
}

fn hash_keys(h: &mut Sha256, values: &[f64], tol: f64) {
    h.update((values.len() as u64).to_le_bytes());
    for &v in values {
        let (e, m) = quantize(v, tol);
        h.update(e.to_le_bytes());
        h.update(m.to_le_bytes());
    }
}

pub fn fingerprint(e: &Expr, eq: &EquivalenceSet, backend: Option<&dyn Backend>) -> Result<Fingerprint, FingerprintError> {
    let mut h = Sha256::new();
    match eq.mode {
        EquivalenceMode::MapEquality => {
            h.update(b"map");
            for rec in &eq.records {
                hash_keys(&mut h, eval_weights(e, rec)?.values(), eq.tolerance);
            }
        }
        EquivalenceMode::MetricEquality => {
            let metric = eq.metric.ok_or(FingerprintError::NoMetric)?;
            h.update(b"metric");
            for rec in &eq.records {
                match image_value(metric, e, rec, backend) {
                    Ok(v) => hash_keys(&mut h, &[v.value], eq.tolerance),
                    // Failures hash to a marker; they still separate
                    // expressions that fail from ones that do not.
                    Err(_) => h.update(b"fail"),
                }
            }
        }
    }
    Ok(Fingerprint(h.finalize().into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Keep(Fingerprint),
    Discard(Fingerprint),
}

/// Discards `e` when its fingerprint was seen before; otherwise records it.
pub fn elim_equiv(
    seen: &mut HashSet<Fingerprint>,
    e: &Expr,
    eq: &EquivalenceSet,
    backend: Option<&dyn Backend>,
) -> Result<Decision, FingerprintError> {
    let fp = fingerprint(e, eq, backend)?;
    Ok(if seen.insert(fp) {
        Decision::Keep(fp)
    } else {
        Decision::Discard(fp)
    })
}

/// Wall-clock limit shared by the producer and the evaluators.
#[derive(Debug, Clone, Copy)]
pub struct Deadline {
    start: Instant,
    limit: Duration,
}

impl Deadline {
    pub fn new(limit: Duration) -> Self {
        Self {
            start: Instant::now(),
            limit,
        }
    }

    pub fn expired(&self) -> bool {
        self.start.elapsed() >= self.limit
    }

    pub fn elapsed(&self) -> Duration {
        self.start.elapsed()
    }
}

/// What the search learns from the evaluator about one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub outcome: Outcome,
    pub tier_reached: Option<usize>,
    pub scores_per_tier: Vec<TierScore>,
    pub new_threshold: Option<f64>,
    pub relaxed: bool,
    pub note: Option<String>,
}

/// Scores candidates for [`bottom_up_search`].
///
/// `evaluate` may run on several threads at once; `commit` calls are
/// serialized and happen in trace order, so threshold updates belong there.
pub trait CandidateEvaluator: Sync {
    type Pending: Send;

    /// Scores `e`; `None` means the deadline passed mid-evaluation.
    fn evaluate(&self, e: &Expr, deadline: &Deadline) -> Option<Self::Pending>;

    fn commit(&self, e: &Expr, pending: Self::Pending) -> EvalReport;

    /// True once no candidate can possibly be accepted any more.
    fn saturated(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub grammar: GrammarConfig,
    pub budget: Duration,
    /// Stop after this many candidates have been handed to the evaluator.
    pub max_candidates: Option<usize>,
    pub max_generations: Option<usize>,
    pub workers: usize,
    /// Record elapsed milliseconds in the trace; off gives reproducible bytes.
    pub timing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Budget,
    MaxCandidates,
    /// The incumbent reached the metric's upper bound on every image.
    Saturated,
    /// An expansion produced nothing new, or the generation cap was hit.
    Exhausted,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStats {
    /// Raw candidates produced, terminals included.
    pub generated: usize,
    pub pruned: usize,
    /// Candidates whose fingerprint could not be computed.
    pub failed: usize,
    pub evaluated: usize,
    pub abandoned: usize,
    pub generations: usize,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub trace: Vec<TraceEntry>,
    pub stats: SearchStats,
    pub termination: Termination,
    /// Every kept expression, in admission order.
    pub pool: Vec<Expr>,
}

struct Sink {
    trace: Vec<TraceEntry>,
    abandoned: usize,
}

enum Stop {
    Budget,
    MaxCandidates,
    Saturated,
}

/// Runs the enumeration, streaming every kept candidate to `evaluator`.
///
/// The search never stops on a passing candidate; it keeps going until the
/// budget, the candidate cap, saturation or a fixpoint ends it.
pub fn bottom_up_search<E: CandidateEvaluator>(
    cfg: &SearchConfig,
    evaluator: &E,
    eq: &EquivalenceSet,
    backend: Option<&dyn Backend>,
) -> SearchResult {
    let deadline = Deadline::new(cfg.budget);
    let sink = Mutex::new(Sink {
        trace: Vec::new(),
        abandoned: 0,
    });
    let record = |e: &Expr, fp: Fingerprint, pending: Option<E::Pending>| {
        let mut s = sink.lock().expect("trace lock");
        let Some(p) = pending else {
            s.abandoned += 1;
            return;
        };
        let report = evaluator.commit(e, p);
        let seq = s.trace.len() as u64;
        s.trace.push(TraceEntry {
            seq,
            expr_text: print_expr(e),
            fingerprint_hex: fp.hex(),
            tier_reached: report.tier_reached,
            scores_per_tier: report.scores_per_tier,
            accepted: report.outcome == Outcome::Accepted,
            new_threshold: report.new_threshold,
            wall_ms: if cfg.timing {
                deadline.elapsed().as_millis() as u64
            } else {
                0
            },
            outcome: report.outcome,
            relaxed: report.relaxed,
            note: report.note,
        });
    };

    let mut stats = SearchStats::default();
    let mut pool: Vec<Expr> = Vec::new();
    let workers = cfg.workers.max(1);
    let stop = if workers == 1 {
        produce(cfg, eq, backend, evaluator, &deadline, &mut stats, &mut pool, |e, fp| {
            let pending = evaluator.evaluate(&e, &deadline);
            record(&e, fp, pending);
        })
    } else {
        let (tx, rx) = crossbeam_channel::bounded::<(Expr, Fingerprint)>(workers * 2);
        std::thread::scope(|s| {
            for _ in 0..workers {
                let rx = rx.clone();
                let record = &record;
                let deadline = &deadline;
                s.spawn(move || {
                    for (e, fp) in rx {
                        let pending = evaluator.evaluate(&e, deadline);
                        record(&e, fp, pending);
                    }
                });
            }
            drop(rx);
            let stop = produce(cfg, eq, backend, evaluator, &deadline, &mut stats, &mut pool, |e, fp| {
                // Receivers only disappear when every worker died.
                let _ = tx.send((e, fp));
            });
            drop(tx);
            stop
        })
    };
    let sink = sink.into_inner().expect("trace lock");
    stats.evaluated = sink.trace.len();
    stats.abandoned = sink.abandoned;
    SearchResult {
        trace: sink.trace,
        stats,
        termination: match stop {
            Some(Stop::Budget) => Termination::Budget,
            Some(Stop::MaxCandidates) => Termination::MaxCandidates,
            Some(Stop::Saturated) => Termination::Saturated,
            None => Termination::Exhausted,
        },
        pool,
    }
}

/// The single producer: yields, prunes and dispatches candidates in the
/// contract order. Returns why it stopped, `None` for a fixpoint.
#[allow(clippy::too_many_arguments)]
fn produce<E: CandidateEvaluator>(
    cfg: &SearchConfig,
    eq: &EquivalenceSet,
    backend: Option<&dyn Backend>,
    evaluator: &E,
    deadline: &Deadline,
    stats: &mut SearchStats,
    pool: &mut Vec<Expr>,
    mut dispatch: impl FnMut(Expr, Fingerprint),
) -> Option<Stop> {
    let mut seen = HashSet::new();
    let mut sent = 0usize;
    let mut step = |e: Expr, stats: &mut SearchStats, pool: &mut Vec<Expr>| -> Option<Stop> {
        if deadline.expired() {
            return Some(Stop::Budget);
        }
        if evaluator.saturated() {
            return Some(Stop::Saturated);
        }
        if cfg.max_candidates.is_some_and(|m| sent >= m) {
            return Some(Stop::MaxCandidates);
        }
        stats.generated += 1;
        match elim_equiv(&mut seen, &e, eq, backend) {
            Ok(Decision::Keep(fp)) => {
                pool.push(e.clone());
                sent += 1;
                dispatch(e, fp);
            }
            Ok(Decision::Discard(_)) => stats.pruned += 1,
            Err(_) => stats.failed += 1,
        }
        None
    };
    for &t in &cfg.grammar.terminals {
        if let Some(stop) = step(Expr::terminal(t), stats, pool) {
            return Some(stop);
        }
    }
    loop {
        if cfg.max_generations.is_some_and(|m| stats.generations >= m) {
            return None;
        }
        stats.generations += 1;
        let snapshot = pool.clone();
        for e in expand_stream(&snapshot, &cfg.grammar) {
            if let Some(stop) = step(e, stats, pool) {
                return Some(stop);
            }
        }
        if pool.len() == snapshot.len() {
            return None;
        }
    }
}
