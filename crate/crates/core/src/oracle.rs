//! Tiered acceptance of candidates, threshold evolution, and the synthesis
//! drivers built on [`bottom_up_search`].

use std::sync::Mutex;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Backend;
use crate::dataset::Dataset;
use crate::enumerate::{
    bottom_up_search, CandidateEvaluator, Deadline, EquivalenceConfig, EquivalenceSet, EvalReport, GrammarConfig,
    SearchConfig, SearchStats, Termination,
};
use crate::expr::{Expr, TerminalKind};
use crate::metrics::{check_capabilities, evaluate_metric, image_value, MetricError, MetricKind};
use crate::trace::{Outcome, TierScore, TraceEntry};

fn default_sizes() -> Vec<usize> {
    vec![100, 1000]
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierConfig {
    /// Sizes of the nested subsets. Sizes at or above the dataset size are
    /// dropped and the full set is always appended as the last tier.
    #[serde(default = "default_sizes")]
    pub subset_sizes: Vec<usize>,
    /// Defaults to the run seed.
    #[serde(default)]
    pub sampling_seed: Option<u64>,
    #[serde(default = "default_true")]
    pub stratified_by_class: bool,
}

impl Default for TierConfig {
    fn default() -> Self {
        Self {
            subset_sizes: default_sizes(),
            sampling_seed: None,
            stratified_by_class: true,
        }
    }
}

/// Nested evaluation subsets: tier `i` is `order[..sizes[i]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tiers {
    pub order: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl Tiers {
    pub fn build(ds: &Dataset, cfg: &TierConfig, seed: u64) -> Result<Self, String> {
        if cfg.subset_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err("tiers.subset_sizes must be strictly increasing".into());
        }
        if cfg.subset_sizes.contains(&0) {
            return Err("tiers.subset_sizes must be positive".into());
        }
        let n = ds.len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.sampling_seed.unwrap_or(seed));
        let order = if cfg.stratified_by_class {
            let classes = (0..n).map(|i| ds.stratum(i)).max().map_or(0, |m| m + 1);
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); classes];
            for i in 0..n {
                groups[ds.stratum(i)].push(i);
            }
            groups.iter_mut().for_each(|g| g.shuffle(&mut rng));
            // Round-robin over classes keeps every prefix balanced.
            let mut order = Vec::with_capacity(n);
            let longest = groups.iter().map(Vec::len).max().unwrap_or(0);
            for j in 0..longest {
                order.extend(groups.iter().filter_map(|g| g.get(j)));
            }
            order
        } else {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order
        };
        let mut sizes: Vec<usize> = cfg.subset_sizes.iter().copied().filter(|&s| s < n).collect();
        sizes.push(n);
        Ok(Self { order, sizes })
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }
}

/// The incumbent, in the search's higher-is-better orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdState {
    /// Best per-image scores, indexed like the dataset; `None` where the
    /// incumbent failed on an image.
    pub lambda_per_image: Vec<Option<f64>>,
    pub lambda_mean: f64,
    pub best_expr: Option<Expr>,
    /// Bumped on every update; lets a commit detect a stale evaluation.
    pub version: u64,
}

impl ThresholdState {
    pub fn new(n: usize) -> Self {
        Self {
            lambda_per_image: vec![None; n],
            lambda_mean: 0.0,
            best_expr: None,
            version: 0,
        }
    }

    /// Baseline for one image: the incumbent's score, else 0.
    fn baseline(&self, i: usize) -> f64 {
        self.lambda_per_image[i].unwrap_or(0.0)
    }

    /// True when the incumbent already sits at `upper` on every image.
    pub fn saturated(&self, upper: f64) -> bool {
        self.best_expr.is_some() && self.lambda_per_image.iter().all(|v| v.is_some_and(|v| v >= upper))
    }
}

/// Scores one tier: `images` are dataset indices, `scores` the candidate's
/// oriented per-image values (`None` = failed, never a win).
pub fn score_tier(images: &[usize], scores: &[Option<f64>], state: &ThresholdState) -> TierScore {
    let mut wins = 0;
    let (mut sum, mut inc_sum, mut n) = (0.0, 0.0, 0usize);
    for &i in images {
        if let Some(s) = scores[i] {
            let base = state.baseline(i);
            if s > base {
                wins += 1;
            }
            sum += s;
            inc_sum += base;
            n += 1;
        }
    }
    let n_f = n.max(1) as f64;
    TierScore {
        size: images.len(),
        wins,
        mean: if n == 0 { f64::NEG_INFINITY } else { sum / n_f },
        incumbent_mean: inc_sum / n_f,
    }
}

/// Result of [`evaluate_tiered`].
#[derive(Debug, Clone, PartialEq)]
pub enum TieredOutcome {
    Accepted {
        /// Oriented per-image scores over the whole dataset.
        scores: Vec<Option<f64>>,
        tiers: Vec<TierScore>,
        relaxed: bool,
    },
    Discarded {
        tier: usize,
        tiers: Vec<TierScore>,
    },
    Skipped {
        reason: String,
        tiers: Vec<TierScore>,
    },
    /// The deadline passed mid-evaluation.
    Abandoned,
}

/// What the oracle needs besides the candidate and the incumbent.
pub struct OracleContext<'a> {
    pub ds: &'a Dataset,
    pub metric: MetricKind,
    pub backend: Option<&'a dyn Backend>,
    pub tiers: Tiers,
}

impl OracleContext<'_> {
    fn tier_images(&self, i: usize) -> &[usize] {
        &self.tiers.order[..self.tiers.sizes[i]]
    }
}

/// Checks every tier of an already fully scored candidate against `state`.
fn judge(ctx: &OracleContext<'_>, scores: &[Option<f64>], state: &ThresholdState) -> Result<Vec<TierScore>, (usize, Vec<TierScore>)> {
    let relaxed = state.best_expr.is_none() && !ctx.metric.higher_is_better();
    let mut tiers = Vec::new();
    for i in 0..ctx.tiers.len() {
        let t = score_tier(ctx.tier_images(i), scores, state);
        let pass = if relaxed { t.mean.is_finite() } else { t.passes() };
        tiers.push(t);
        if !pass {
            return Err((i, tiers));
        }
    }
    Ok(tiers)
}

/// Runs `e` through the tiers in ascending order, stopping at the first
/// failed tier. Scores of earlier tiers are reused by later ones.
pub fn evaluate_tiered(e: &Expr, ctx: &OracleContext<'_>, state: &ThresholdState, deadline: Option<&Deadline>) -> TieredOutcome {
    let n = ctx.ds.len();
    let relaxed = state.best_expr.is_none() && !ctx.metric.higher_is_better();
    let mut scores: Vec<Option<f64>> = vec![None; n];
    let mut first_error: Option<String> = None;
    let mut done = 0;
    let mut tiers = Vec::new();
    for i in 0..ctx.tiers.len() {
        let images = ctx.tier_images(i);
        for &idx in &images[done..] {
            if deadline.is_some_and(Deadline::expired) {
                return TieredOutcome::Abandoned;
            }
            match image_value(ctx.metric, e, &ctx.ds.records[idx], ctx.backend) {
                Ok(v) => scores[idx] = Some(ctx.metric.orient(v.value)),
                Err(err) => {
                    if let MetricError::Capability(_) | MetricError::NoBackend(_) | MetricError::BadSteps { .. } = err {
                        return TieredOutcome::Skipped {
                            reason: err.to_string(),
                            tiers,
                        };
                    }
                    first_error.get_or_insert_with(|| err.to_string());
                }
            }
        }
        done = images.len();
        let t = score_tier(images, &scores, state);
        if !t.mean.is_finite() {
            return TieredOutcome::Skipped {
                reason: first_error.unwrap_or_else(|| "no image could be scored".into()),
                tiers,
            };
        }
        let pass = if relaxed { true } else { t.passes() };
        tiers.push(t);
        if !pass {
            return TieredOutcome::Discarded { tier: i, tiers };
        }
    }
    TieredOutcome::Accepted { scores, tiers, relaxed }
}

/// Installs an accepted candidate as the new incumbent.
pub fn update_threshold(state: &mut ThresholdState, e: &Expr, scores: Vec<Option<f64>>) {
    let valid: Vec<f64> = scores.iter().flatten().copied().collect();
    let mean = valid.iter().sum::<f64>() / valid.len().max(1) as f64;
    // Acceptance demands a strictly better mean on the full set.
    debug_assert!(state.best_expr.is_none() || mean > state.lambda_mean);
    state.lambda_per_image = scores;
    state.lambda_mean = mean;
    state.best_expr = Some(e.clone());
    state.version += 1;
}

/// [`CandidateEvaluator`] backed by [`evaluate_tiered`].
pub struct TieredEvaluator<'a> {
    pub ctx: OracleContext<'a>,
    pub state: Mutex<ThresholdState>,
}

pub struct Pending {
    outcome: TieredOutcome,
    version: u64,
}

impl<'a> TieredEvaluator<'a> {
    pub fn new(ctx: OracleContext<'a>) -> Self {
        let n = ctx.ds.len();
        Self {
            ctx,
            state: Mutex::new(ThresholdState::new(n)),
        }
    }

    pub fn into_state(self) -> ThresholdState {
        self.state.into_inner().expect("state lock")
    }
}

fn report(outcome: Outcome, tiers: Vec<TierScore>, new_threshold: Option<f64>, relaxed: bool, note: Option<String>) -> EvalReport {
    EvalReport {
        outcome,
        tier_reached: tiers.len().checked_sub(1),
        scores_per_tier: tiers,
        new_threshold,
        relaxed,
        note,
    }
}

impl CandidateEvaluator for TieredEvaluator<'_> {
    type Pending = Pending;

    fn evaluate(&self, e: &Expr, deadline: &Deadline) -> Option<Pending> {
        let snapshot = self.state.lock().expect("state lock").clone();
        match evaluate_tiered(e, &self.ctx, &snapshot, Some(deadline)) {
            TieredOutcome::Abandoned => None,
            outcome => Some(Pending {
                outcome,
                version: snapshot.version,
            }),
        }
    }

    fn commit(&self, e: &Expr, p: Pending) -> EvalReport {
        let mut state = self.state.lock().expect("state lock");
        match p.outcome {
            TieredOutcome::Accepted { scores, tiers, relaxed } => {
                let (tiers, relaxed) = if p.version == state.version {
                    (tiers, relaxed)
                } else {
                    // The incumbent moved while this candidate was scored.
                    match judge(&self.ctx, &scores, &state) {
                        Ok(t) => (t, state.best_expr.is_none() && !self.ctx.metric.higher_is_better()),
                        Err((_, t)) => {
                            return report(
                                Outcome::Discarded,
                                t,
                                None,
                                false,
                                Some("stale acceptance rejected by the newer incumbent".into()),
                            )
                        }
                    }
                };
                update_threshold(&mut state, e, scores);
                let note = relaxed.then(|| "first acceptance under the mean-only rule".to_string());
                report(Outcome::Accepted, tiers, Some(state.lambda_mean), relaxed, note)
            }
            TieredOutcome::Discarded { tiers, .. } => report(Outcome::Discarded, tiers, None, false, None),
            TieredOutcome::Skipped { reason, tiers } => report(Outcome::Skipped, tiers, None, false, Some(reason)),
            TieredOutcome::Abandoned => unreachable!("abandoned candidates are never committed"),
        }
    }

    fn saturated(&self) -> bool {
        self.state
            .lock()
            .expect("state lock")
            .saturated(self.ctx.metric.oriented_upper_bound())
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    pub metric: MetricKind,
    pub grammar: GrammarConfig,
    pub tiers: TierConfig,
    pub equivalence: EquivalenceConfig,
    pub budget: Duration,
    pub max_candidates: Option<usize>,
    pub max_generations: Option<usize>,
    pub workers: usize,
    pub seed: u64,
    pub timing: bool,
}

impl SynthesisConfig {
    pub fn new(metric: MetricKind, grammar: GrammarConfig, budget: Duration) -> Self {
        Self {
            metric,
            grammar,
            tiers: TierConfig::default(),
            equivalence: EquivalenceConfig::default(),
            budget,
            max_candidates: None,
            max_generations: None,
            workers: 1,
            seed: 0,
            timing: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("configuration field `{field}`: {message}")]
    Config { field: &'static str, message: String },
}

#[derive(Debug, Clone)]
pub struct SynthesisOutcome {
    pub best_expr: Option<Expr>,
    /// Mean of the best expression in the metric's own orientation.
    pub best_mean: Option<f64>,
    /// `(image_id, value)` of the best expression, own orientation.
    pub per_image: Vec<(String, f64)>,
    /// Mean per predicted class; `None` where the class has no scored image.
    pub per_class_means: Vec<Option<f64>>,
    pub trace: Vec<TraceEntry>,
    pub stats: SearchStats,
    pub termination: Termination,
    pub tier_sizes: Vec<usize>,
}

fn per_class_means(ds: &Dataset, per_image: &[Option<f64>]) -> Vec<Option<f64>> {
    let mut sums = vec![(0.0, 0usize); ds.num_classes()];
    for (rec, v) in ds.records.iter().zip(per_image) {
        if let (Some(v), Some(slot)) = (v, sums.get_mut(rec.predicted_class)) {
            slot.0 += v;
            slot.1 += 1;
        }
    }
    sums.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect()
}

/// Enumerates with tiered acceptance until the budget runs out and
/// returns the best expression found with the full trace.
pub fn run_synthesis(cfg: &SynthesisConfig, ds: &Dataset, backend: Option<&dyn Backend>) -> Result<SynthesisOutcome, OracleError> {
    cfg.grammar
        .validate()
        .map_err(|message| OracleError::Config { field: "grammar", message })?;
    if cfg.budget.is_zero() {
        return Err(OracleError::Config {
            field: "budget_secs",
            message: "budget must be > 0".into(),
        });
    }
    if !(cfg.equivalence.tolerance > 0.0) {
        return Err(OracleError::Config {
            field: "equivalence",
            message: "tolerance must be > 0".into(),
        });
    }
    check_capabilities(cfg.metric, ds, backend)?;
    let tiers = Tiers::build(ds, &cfg.tiers, cfg.seed).map_err(|message| OracleError::Config { field: "tiers", message })?;
    let tier_sizes = tiers.sizes.clone();
    let eq = EquivalenceSet::select(ds, &cfg.equivalence, cfg.metric, cfg.seed);
    let evaluator = TieredEvaluator::new(OracleContext {
        ds,
        metric: cfg.metric,
        backend,
        tiers,
    });
    let search = SearchConfig {
        grammar: cfg.grammar.clone(),
        budget: cfg.budget,
        max_candidates: cfg.max_candidates,
        max_generations: cfg.max_generations,
        workers: cfg.workers,
        timing: cfg.timing,
    };
    let result = bottom_up_search(&search, &evaluator, &eq, backend);
    let state = evaluator.into_state();
    let own = |v: f64| cfg.metric.orient(v);
    let per_image_own: Vec<Option<f64>> = state.lambda_per_image.iter().map(|v| v.map(own)).collect();
    let per_image = ds
        .records
        .iter()
        .zip(&per_image_own)
        .filter_map(|(r, v)| v.map(|v| (r.image_id.clone(), v)))
        .collect();
    Ok(SynthesisOutcome {
        best_mean: state.best_expr.as_ref().map(|_| own(state.lambda_mean)),
        per_class_means: if state.best_expr.is_some() {
            per_class_means(ds, &per_image_own)
        } else {
            vec![None; ds.num_classes()]
        },
        best_expr: state.best_expr,
        per_image,
        trace: result.trace,
        stats: result.stats,
        termination: result.termination,
        tier_sizes,
    })
}

#[derive(Debug, Clone)]
pub struct BranchResult {
    pub class: usize,
    pub expr: Expr,
    /// Images predicted as `class`.
    pub size: usize,
    /// Images of the partition the branch expression scored on.
    pub scored: usize,
    /// Branch mean in the metric's orientation.
    pub mean: Option<f64>,
    /// True when the branch fell back to `Grads` (empty partition or no
    /// acceptance).
    pub defaulted: bool,
    pub outcome: Option<SynthesisOutcome>,
}

#[derive(Debug, Clone)]
pub struct GuardedResult {
    pub guard: Expr,
    pub branches: Vec<BranchResult>,
    /// Size-weighted mean of the branch means.
    pub overall_mean: Option<f64>,
}

/// Synthesizes one expression per predicted class, each with an equal
/// share of the budget, and joins them in a root guard.
pub fn run_classwise(cfg: &SynthesisConfig, ds: &Dataset, backend: Option<&dyn Backend>) -> Result<GuardedResult, OracleError> {
    check_capabilities(cfg.metric, ds, backend)?;
    let n_classes = ds.num_classes();
    let mut branch_cfg = cfg.clone();
    branch_cfg.budget = cfg.budget / n_classes.max(1) as u32;
    let mut branches = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.records[i].predicted_class == class).collect();
        if idx.is_empty() {
            branches.push(BranchResult {
                class,
                expr: Expr::terminal(TerminalKind::Grads),
                size: 0,
                scored: 0,
                mean: None,
                defaulted: true,
                outcome: None,
            });
            continue;
        }
        let part = ds.subset(&idx);
        let outcome = run_synthesis(&branch_cfg, &part, backend)?;
        let (expr, defaulted) = match &outcome.best_expr {
            Some(e) => (e.clone(), false),
            None => (Expr::terminal(TerminalKind::Grads), true),
        };
        let (mean, scored) = if defaulted {
            let s = evaluate_metric(cfg.metric, &expr, &part, backend, cfg.workers)?;
            (s.value.is_finite().then_some(s.value), s.per_image.len())
        } else {
            (outcome.best_mean, outcome.per_image.len())
        };
        branches.push(BranchResult {
            class,
            expr,
            size: idx.len(),
            scored,
            mean,
            defaulted,
            outcome: Some(outcome),
        });
    }
    let (sum, n) = branches
        .iter()
        .filter_map(|b| b.mean.map(|m| (m * b.scored as f64, b.scored)))
        .fold((0.0, 0usize), |(s, n), (a, b)| (s + a, n + b));
    Ok(GuardedResult {
        guard: Expr::Guard(branches.iter().map(|b| (b.class, b.expr.clone())).collect()),
        overall_mean: (n > 0).then(|| sum / n as f64),
        branches,
    })
}
