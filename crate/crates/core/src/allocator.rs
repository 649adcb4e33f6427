//! Search for risk-minimizing allocations.
//!
//! Three strategies share one contract: exhaustive enumeration of the
//! feasible set, first-improvement local search with random restarts, and
//! the best of `k` uniformly drawn feasible allocations. Results are
//! deterministic for a given seed. Ties within [`TIE_TOL`] (relative) are
//! all reported and the lexicographically smallest `w` is chosen.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AllocError, Result};
use crate::model::{Allocation, CovariateMatrix, NigPrior};
use crate::risk::{RiskBreakdown, RiskEvaluator};

pub const TIE_TOL: f64 = 1e-12;
pub const DEFAULT_EXHAUSTIVE_LIMIT: usize = 22;
/// Largest `n` a bitmask enumeration can address.
const MASK_BITS: usize = 62;
const CHUNK: u64 = 1 << 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    #[default]
    Exhaustive,
    LocalSearch,
    BestOfK,
}

/// Arm-size restriction on feasible allocations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GroupSizeConstraint {
    #[default]
    Free,
    /// `n_C = n_T`, or `|n_C - n_T| = 1` when `n` is odd.
    Equal,
    Fixed { n_c: usize, n_t: usize },
}

impl GroupSizeConstraint {
    /// Admissible treatment-arm sizes for `n` units.
    pub fn treatment_sizes(&self, n: usize) -> Result<Vec<usize>> {
        match *self {
            GroupSizeConstraint::Free => Ok((0..=n).collect()),
            GroupSizeConstraint::Equal if n.is_multiple_of(2) => Ok(vec![n / 2]),
            GroupSizeConstraint::Equal => Ok(vec![n / 2, n / 2 + 1]),
            GroupSizeConstraint::Fixed { n_c, n_t } => {
                if n_c + n_t != n {
                    return Err(AllocError::InfeasibleConstraint(format!(
                        "arm sizes ({n_c}, {n_t}) do not sum to n = {n}"
                    )));
                }
                Ok(vec![n_t])
            }
        }
    }

    /// Whether `w -> 1 - w` maps the feasible set onto itself.
    fn swap_symmetric(&self, n: usize) -> bool {
        match *self {
            GroupSizeConstraint::Free | GroupSizeConstraint::Equal => true,
            GroupSizeConstraint::Fixed { n_c, n_t } => n_c == n_t && n_c + n_t == n,
        }
    }

    fn fixes_sizes(&self) -> bool {
        !matches!(self, GroupSizeConstraint::Free)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub mode: SearchMode,
    #[serde(default)]
    pub constraint: GroupSizeConstraint,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_exhaustive_limit")]
    pub exhaustive_limit: usize,
}

fn default_restarts() -> usize {
    20
}

fn default_k() -> usize {
    1000
}

fn default_exhaustive_limit() -> usize {
    DEFAULT_EXHAUSTIVE_LIMIT
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            mode: SearchMode::Exhaustive,
            constraint: GroupSizeConstraint::Free,
            restarts: default_restarts(),
            k: default_k(),
            rng_seed: 0,
            exhaustive_limit: DEFAULT_EXHAUSTIVE_LIMIT,
        }
    }
}

impl OptimizerConfig {
    pub fn exhaustive() -> Self {
        Self::default()
    }

    pub fn local_search(restarts: usize, rng_seed: u64) -> Self {
        Self {
            mode: SearchMode::LocalSearch,
            restarts,
            rng_seed,
            ..Self::default()
        }
    }

    pub fn best_of_k(k: usize, rng_seed: u64) -> Self {
        Self {
            mode: SearchMode::BestOfK,
            k,
            rng_seed,
            ..Self::default()
        }
    }

    pub fn with_constraint(mut self, constraint: GroupSizeConstraint) -> Self {
        self.constraint = constraint;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(AllocError::InvalidInput("restarts must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(AllocError::InvalidInput("k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub best_alloc: Allocation,
    pub best_risk: RiskBreakdown,
    /// Allocations whose risk was computed.
    pub evaluated: u64,
    /// Candidates skipped as infeasible (empty arm or singular design).
    pub skipped: u64,
    /// Every evaluated allocation within the tie tolerance of the best,
    /// lexicographically sorted; includes `best_alloc`.
    pub ties: Vec<Allocation>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace: Option<Vec<f64>>,
    /// Only one of each `{w, 1 - w}` pair was enumerated.
    pub label_swap_dedup: bool,
}

/// Lazily enumerates every feasible allocation of `n` units.
#[derive(Clone, Debug)]
pub struct AllocationEnumeration {
    n: usize,
    sizes: Vec<bool>,
    dedup: bool,
    next: u64,
    end: u64,
}

impl AllocationEnumeration {
    pub fn dedup_active(&self) -> bool {
        self.dedup
    }

    fn mask_at(&self, i: u64) -> u64 {
        if self.dedup {
            i << 1
        } else {
            i
        }
    }
}

impl Iterator for AllocationEnumeration {
    type Item = Allocation;

    fn next(&mut self) -> Option<Allocation> {
        while self.next < self.end {
            let mask = self.mask_at(self.next);
            self.next += 1;
            if self.sizes[mask.count_ones() as usize] {
                return Some(Allocation::from_mask(mask, self.n));
            }
        }
        None
    }
}

/// Enumerates the feasible allocations under `constraint`. With `dedup`,
/// only the member with `w[0] = 0` of each label-swap pair is produced,
/// when the constraint is swap-symmetric.
pub fn enumerate_allocations(
    n: usize,
    constraint: &GroupSizeConstraint,
    dedup: bool,
    limit: usize,
) -> Result<AllocationEnumeration> {
    if n > limit.min(MASK_BITS) {
        return Err(AllocError::TooLargeForExhaustive {
            n,
            limit: limit.min(MASK_BITS),
        });
    }
    let mut sizes = vec![false; n + 1];
    for t in constraint.treatment_sizes(n)? {
        sizes[t] = true;
    }
    let dedup = dedup && n > 0 && constraint.swap_symmetric(n);
    let end = if dedup { 1u64 << (n - 1) } else { 1u64 << n };
    Ok(AllocationEnumeration {
        n,
        sizes,
        dedup,
        next: 0,
        end,
    })
}

/// Minimizes the Bayes risk of allocating `x` under `prior`.
pub fn optimize(
    prior: &NigPrior,
    x: &CovariateMatrix,
    cfg: &OptimizerConfig,
    e_sigma2: f64,
) -> Result<OptimizationResult> {
    let eval = RiskEvaluator::for_prior(prior, x, e_sigma2)?;
    search(&eval, cfg)
}

/// [`optimize`] restricted to equal arm sizes.
pub fn optimize_equal_split(
    prior: &NigPrior,
    x: &CovariateMatrix,
    cfg: &OptimizerConfig,
    e_sigma2: f64,
) -> Result<OptimizationResult> {
    let cfg = cfg.clone().with_constraint(GroupSizeConstraint::Equal);
    optimize(prior, x, &cfg, e_sigma2)
}

/// Runs the configured search over allocations of the evaluator's batch.
pub fn search(eval: &RiskEvaluator, cfg: &OptimizerConfig) -> Result<OptimizationResult> {
    cfg.validate()?;
    let n = eval.n();
    let sizes = cfg.constraint.treatment_sizes(n)?;
    if eval.is_flat() && eval.label_symmetric() && sizes.iter().all(|&t| t == 0 || t == n) {
        return Err(AllocError::InfeasibleConstraint(
            "the flat prior needs both arms nonempty".into(),
        ));
    }
    match cfg.mode {
        SearchMode::Exhaustive => exhaustive(eval, cfg),
        SearchMode::LocalSearch => local_search(eval, cfg),
        SearchMode::BestOfK => best_of_k(eval, cfg),
    }
}

/// Outcome of evaluating one candidate.
enum Scored {
    Feasible(f64),
    Skipped,
}

fn score(eval: &RiskEvaluator, w: &[u8]) -> Result<Scored> {
    match eval.evaluate_slice(w) {
        Ok(r) => Ok(Scored::Feasible(r.risk)),
        Err(AllocError::EmptyArm { .. } | AllocError::DegenerateDesign { .. }) if eval.is_flat() => {
            Ok(Scored::Skipped)
        }
        Err(e) => Err(e),
    }
}

fn within_tie(risk: f64, best: f64) -> bool {
    risk <= best + TIE_TOL * best.abs()
}

/// Running minimum that keeps every candidate within the tie tolerance.
#[derive(Default)]
struct Leaderboard {
    best: Option<f64>,
    entries: Vec<(f64, Vec<u8>)>,
    evaluated: u64,
    skipped: u64,
}

impl Leaderboard {
    fn offer(&mut self, risk: f64, w: &[u8]) {
        match self.best {
            Some(b) if !within_tie(risk, b) => {}
            Some(b) if risk >= b => self.entries.push((risk, w.to_vec())),
            _ => {
                self.best = Some(risk);
                self.entries.retain(|(r, _)| within_tie(*r, risk));
                self.entries.push((risk, w.to_vec()));
            }
        }
    }

    fn merge(mut self, other: Leaderboard) -> Leaderboard {
        self.evaluated += other.evaluated;
        self.skipped += other.skipped;
        for (r, w) in other.entries {
            self.offer(r, &w);
        }
        self
    }

    fn finish(mut self, eval: &RiskEvaluator, label_swap_dedup: bool) -> Result<OptimizationResult> {
        let Some(best) = self.best else {
            return Err(AllocError::InfeasibleConstraint(
                "no evaluated allocation was feasible".into(),
            ));
        };
        self.entries.retain(|(r, _)| within_tie(*r, best));
        self.entries.sort_by(|a, b| a.1.cmp(&b.1));
        self.entries.dedup_by(|a, b| a.1 == b.1);
        let ties: Vec<Allocation> = self
            .entries
            .into_iter()
            .map(|(_, w)| Allocation::new(w).expect("0/1 vector"))
            .collect();
        let best_alloc = ties[0].clone();
        let best_risk = eval.evaluate(&best_alloc)?;
        Ok(OptimizationResult {
            best_alloc,
            best_risk,
            evaluated: self.evaluated,
            skipped: self.skipped,
            ties,
            trace: None,
            label_swap_dedup,
        })
    }
}

fn exhaustive(eval: &RiskEvaluator, cfg: &OptimizerConfig) -> Result<OptimizationResult> {
    let n = eval.n();
    let dedup = eval.label_symmetric();
    let enumeration = enumerate_allocations(n, &cfg.constraint, dedup, cfg.exhaustive_limit)?;
    let dedup = enumeration.dedup_active();
    let chunks = enumeration.end.div_ceil(CHUNK);
    let board = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<Leaderboard> {
            let mut board = Leaderboard::default();
            let mut w = vec![0u8; n];
            for i in c * CHUNK..((c + 1) * CHUNK).min(enumeration.end) {
                let mask = enumeration.mask_at(i);
                if !enumeration.sizes[mask.count_ones() as usize] {
                    continue;
                }
                for (bit, slot) in w.iter_mut().enumerate() {
                    *slot = ((mask >> bit) & 1) as u8;
                }
                match score(eval, &w)? {
                    Scored::Feasible(r) => {
                        board.evaluated += 1;
                        board.offer(r, &w);
                    }
                    Scored::Skipped => board.skipped += 1,
                }
            }
            Ok(board)
        })
        .try_reduce(Leaderboard::default, |a, b| Ok(a.merge(b)))?;
    board.finish(eval, dedup)
}

fn restart_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Uniform draw from allocations whose treatment size is in `sizes`.
fn draw(rng: &mut ChaCha8Rng, n: usize, sizes: &[usize], free: bool) -> Vec<u8> {
    if free {
        return (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
    }
    let weights: Vec<f64> = sizes.iter().map(|&t| binomial(n, t)).collect();
    let total: f64 = weights.iter().sum();
    let mut pick = rng.random::<f64>() * total;
    let mut n_t = *sizes.last().expect("nonempty size set");
    for (&t, &wt) in sizes.iter().zip(&weights) {
        if pick < wt {
            n_t = t;
            break;
        }
        pick -= wt;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut w = vec![0u8; n];
    for &i in &idx[..n_t] {
        w[i] = 1;
    }
    w
}

struct RestartOutcome {
    board: Leaderboard,
    trace: Vec<f64>,
    final_risk: Option<f64>,
}

fn local_search(eval: &RiskEvaluator, cfg: &OptimizerConfig) -> Result<OptimizationResult> {
    let n = eval.n();
    let sizes = cfg.constraint.treatment_sizes(n)?;
    let free = !cfg.constraint.fixes_sizes();
    let outcomes = (0..cfg.restarts as u64)
        .into_par_iter()
        .map(|r| run_restart(eval, n, &sizes, free, restart_rng(cfg.rng_seed, r)))
        .collect::<Result<Vec<_>>>()?;

    let mut winner: Option<(f64, usize)> = None;
    let mut board = Leaderboard::default();
    for (i, o) in outcomes.iter().enumerate() {
        if let Some(r) = o.final_risk {
            if winner.is_none_or(|(b, _)| r < b) {
                winner = Some((r, i));
            }
        }
    }
    let trace = winner.map(|(_, i)| outcomes[i].trace.clone());
    for o in outcomes {
        board = board.merge(o.board);
    }
    let mut result = board.finish(eval, false)?;
    result.trace = trace;
    Ok(result)
}

fn run_restart(
    eval: &RiskEvaluator,
    n: usize,
    sizes: &[usize],
    free: bool,
    mut rng: ChaCha8Rng,
) -> Result<RestartOutcome> {
    let mut board = Leaderboard::default();
    let attempts = 64 * (n + 1);
    let mut start = None;
    for _ in 0..attempts {
        let w = draw(&mut rng, n, sizes, free);
        match score(eval, &w)? {
            Scored::Feasible(r) => {
                board.evaluated += 1;
                start = Some((w, r));
                break;
            }
            Scored::Skipped => board.skipped += 1,
        }
    }
    let Some((mut w, mut current)) = start else {
        return Ok(RestartOutcome {
            board,
            trace: Vec::new(),
            final_risk: None,
        });
    };
    let mut trace = vec![current];
    loop {
        let (control, treated): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| w[i] == 0);
        let mut swaps: Vec<(usize, usize)> = control
            .iter()
            .flat_map(|&i| treated.iter().map(move |&j| (i, j)))
            .collect();
        swaps.shuffle(&mut rng);
        // Free sizes scan single flips first and fall back to swaps, which
        // escape optima where every flip moves to a worse arm size.
        let moves = if free {
            let mut flips: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
            flips.shuffle(&mut rng);
            flips.extend(swaps);
            flips
        } else {
            swaps
        };
        let mut improved = false;
        for (i, j) in moves {
            w[i] = 1 - w[i];
            if j != i {
                w[j] = 1 - w[j];
            }
            match score(eval, &w)? {
                Scored::Feasible(r) => {
                    board.evaluated += 1;
                    if r < current - TIE_TOL * current.abs() {
                        current = r;
                        trace.push(r);
                        improved = true;
                        break;
                    }
                }
                Scored::Skipped => board.skipped += 1,
            }
            w[i] = 1 - w[i];
            if j != i {
                w[j] = 1 - w[j];
            }
        }
        if !improved {
            break;
        }
    }
    board.offer(current, &w);
    Ok(RestartOutcome {
        board,
        trace,
        final_risk: Some(current),
    })
}

fn best_of_k(eval: &RiskEvaluator, cfg: &OptimizerConfig) -> Result<OptimizationResult> {
    let n = eval.n();
    let sizes = cfg.constraint.treatment_sizes(n)?;
    let free = !cfg.constraint.fixes_sizes();
    let mut rng = restart_rng(cfg.rng_seed, u64::MAX);
    let mut board = Leaderboard::default();
    let mut drawn = 0usize;
    let max_attempts = 64 * cfg.k + 1024;
    for _ in 0..max_attempts {
        if drawn == cfg.k {
            break;
        }
        let w = draw(&mut rng, n, &sizes, free);
        match score(eval, &w)? {
            Scored::Feasible(r) => {
                drawn += 1;
                board.evaluated += 1;
                board.offer(r, &w);
            }
            Scored::Skipped => board.skipped += 1,
        }
    }
    board.finish(eval, false)
}

/// Lexicographic order on allocation vectors.
pub fn lex_cmp(a: &Allocation, b: &Allocation) -> Ordering {
    a.as_slice().cmp(b.as_slice())
}
