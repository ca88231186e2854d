//! Numerical checks of the overparametrized linear model `y = vᵀ B x` with
//! `B: k x d`, `v: k` and `n` samples per task, `1 <= k < n < d`.
//!
//! The rotation distance `eps` uses the Frobenius-optimal (Procrustes)
//! rotation as a feasible point of the spectral-norm minimization, so the
//! emitted value is an upper bound on the true distance and the resulting
//! lower bound on the previous-task loss is conservative.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rank cutoff for singular values when extracting bases.
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearTask {
    /// `n x d`, one sample per row.
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearCLInstance {
    /// Initial feature extractor `k x d`.
    pub b: DMatrix<f64>,
    /// Generating heads, one per task (informational).
    pub heads: Vec<DVector<f64>>,
    pub tasks: Vec<LinearTask>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub k: usize,
    pub n: usize,
    pub d: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims { k: 3, n: 10, d: 50 }
    }
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        if 1 <= self.k && self.k < self.n && self.n < self.d {
            Ok(())
        } else {
            Err(Error::Setup(format!("dimensions must satisfy 1 <= k < n < d, got {:?}", self)))
        }
    }
}

impl LinearCLInstance {
    pub fn new(b: DMatrix<f64>, heads: Vec<DVector<f64>>, tasks: Vec<LinearTask>) -> Result<Self> {
        let (k, d) = b.shape();
        for (t, task) in tasks.iter().enumerate() {
            let (n, td) = task.x.shape();
            Dims { k, n, d }.validate()?;
            if td != d || task.y.len() != n {
                return Err(Error::Setup(format!(
                    "task {t} has x {:?} and {} targets for d = {d}",
                    task.x.shape(),
                    task.y.len()
                )));
            }
        }
        if heads.iter().any(|v| v.len() != k) {
            return Err(Error::Setup(format!("every head must have {k} entries")));
        }
        Ok(LinearCLInstance { b, heads, tasks })
    }

    pub fn dims(&self) -> Dims {
        let (k, d) = self.b.shape();
        Dims { k, n: self.tasks.first().map_or(0, |t| t.x.nrows()), d }
    }
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn gaussian_vector(rng: &mut impl Rng, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Samples with i.i.d. `N(0, 1/d)` entries, so rows have norm close to 1.
pub fn sample_inputs(rng: &mut impl Rng, dims: Dims) -> DMatrix<f64> {
    gaussian_matrix(rng, dims.n, dims.d, 1.0 / (dims.d as f64).sqrt())
}

/// Tasks realizable by a common extractor: `y_t = X_t B₀ᵀ v_t`.
pub fn realizable_instance(dims: Dims, tasks: usize, seed: u64) -> Result<LinearCLInstance> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = gaussian_matrix(&mut rng, dims.k, dims.d, 1.0);
    let mut heads = Vec::with_capacity(tasks);
    let mut data = Vec::with_capacity(tasks);
    for _ in 0..tasks {
        let v = gaussian_vector(&mut rng, dims.k, 1.0 / (dims.k as f64).sqrt());
        let x = sample_inputs(&mut rng, dims);
        let y = &x * (b.transpose() * &v);
        heads.push(v);
        data.push(LinearTask { x, y });
    }
    LinearCLInstance::new(b, heads, data)
}

/// Mean squared error `(1/n) ||X Bᵀ v - y||²`.
pub fn task_loss(task: &LinearTask, b: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let r = &task.x * (b.transpose() * v) - &task.y;
    r.norm_squared() / task.y.len() as f64
}

/// Gradients of [`task_loss`] with respect to `B` and `v`.
pub fn loss_gradients(task: &LinearTask, b: &DMatrix<f64>, v: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let scale = 2.0 / task.y.len() as f64;
    let r = &task.x * (b.transpose() * v) - &task.y;
    let xr = task.x.transpose() * r;
    let gb = (v * xr.transpose()) * scale;
    let gv = (b * xr) * scale;
    (gb, gv)
}

/// Minimum-norm least-squares head on frozen features `X Bᵀ`.
pub fn linear_probe(b: &DMatrix<f64>, task: &LinearTask) -> DVector<f64> {
    let features = &task.x * b.transpose();
    let svd = features.svd(true, true);
    let cutoff = RANK_TOL * svd.singular_values.max().max(f64::MIN_POSITIVE);
    svd.solve(&task.y, cutoff).expect("both factors requested")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub lr: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig { lr: 1.0, tol: 1e-10, max_iters: 200_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneResult {
    pub b: DMatrix<f64>,
    pub v: DVector<f64>,
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Loss after every accepted step, starting with the initial loss.
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent on `B` and `v` jointly. A step that would
/// increase the loss is rejected and the step size halved, so the accepted
/// loss sequence is non-increasing.
pub fn fine_tune(task: &LinearTask, b0: &DMatrix<f64>, v0: &DVector<f64>, cfg: FineTuneConfig) -> FineTuneResult {
    let (mut b, mut v) = (b0.clone(), v0.clone());
    let mut loss = task_loss(task, &b, &v);
    let mut losses = vec![loss];
    let mut lr = cfg.lr;
    let mut iterations = 0;
    while loss >= cfg.tol && iterations < cfg.max_iters && lr > 1e-300 {
        iterations += 1;
        let (gb, gv) = loss_gradients(task, &b, &v);
        let nb = &b - &gb * lr;
        let nv = &v - &gv * lr;
        let next = task_loss(task, &nb, &nv);
        if next > loss {
            lr *= 0.5;
            continue;
        }
        (b, v, loss) = (nb, nv, next);
        losses.push(loss);
    }
    FineTuneResult { b, v, loss, iterations, converged: loss < cfg.tol, losses }
}

/// `max_{||x|| <= 1} (vᵀBx - v_refᵀB_ref x)² = ||Bᵀv - B_refᵀv_ref||²`.
pub fn worst_case_loss(b: &DMatrix<f64>, v: &DVector<f64>, b_ref: &DMatrix<f64>, v_ref: &DVector<f64>) -> f64 {
    (b.transpose() * v - b_ref.transpose() * v_ref).norm_squared()
}

/// `||v_tᵀB_t - v_t'ᵀB_t||`: how far two heads on the same extractor diverge.
pub fn multi_head_relaxation(b_t: &DMatrix<f64>, v_t: &DVector<f64>, v_tp: &DVector<f64>) -> f64 {
    (b_t.transpose() * (v_t - v_tp)).norm()
}

/// Left singular vectors of `m` with singular value above the rank cutoff,
/// ordered by decreasing singular value.
fn column_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested");
    let s = &svd.singular_values;
    let top = s.max().max(f64::MIN_POSITIVE);
    let mut idx: Vec<usize> = (0..s.len()).filter(|&i| s[i] > RANK_TOL * top).collect();
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    DMatrix::from_columns(&idx.iter().map(|&i| u.column(i).into_owned()).collect::<Vec<_>>())
}

/// Orthonormal basis (as columns) of the row space of `m`.
pub fn row_space_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    column_basis(&m.transpose())
}

/// Orthonormal basis of the orthogonal complement of the column span of the
/// orthonormal `basis` in `R^d`: eigenvectors of `I - basis basisᵀ` with
/// eigenvalue one.
pub fn orthogonal_complement(basis: &DMatrix<f64>) -> DMatrix<f64> {
    let d = basis.nrows();
    let projector = DMatrix::identity(d, d) - basis * basis.transpose();
    let eig = projector.symmetric_eigen();
    let cols: Vec<_> =
        (0..d).filter(|&i| eig.eigenvalues[i] > 0.5).map(|i| eig.eigenvectors.column(i).into_owned()).collect();
    DMatrix::from_columns(&cols)
}

/// `max |QᵀQ - I|`.
pub fn gram_deviation(q: &DMatrix<f64>) -> f64 {
    let g = q.transpose() * q - DMatrix::identity(q.ncols(), q.ncols());
    g.amax()
}

/// `k`-th largest singular value (1-based), or 0 when there are fewer.
fn kth_singular_value(m: &DMatrix<f64>, k: usize) -> f64 {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.get(k - 1).copied().unwrap_or(0.0)
}

/// Frobenius-optimal rotation `U = P Qᵀ` from `B_prev B_*ᵀ = P Σ Qᵀ`,
/// evaluated as `||B_prev - U B_*||₂²`.
pub fn procrustes_eps(b_prev: &DMatrix<f64>, b_star: &DMatrix<f64>) -> f64 {
    let svd = (b_prev * b_star.transpose()).svd(true, true);
    let u = svd.u.expect("requested") * svd.v_t.expect("requested");
    let diff = b_prev - u * b_star;
    let top = diff.singular_values().max();
    top * top
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundComponents {
    pub sigma_k: f64,
    pub phi: f64,
    pub eps_hat: f64,
    pub bound: f64,
    /// `||B_*ᵀ v_*||`.
    pub w_star_norm: f64,
    /// Largest Gram deviation over the `S`, `S⊥` and `R` bases, and `|SᵀS⊥|`.
    pub basis_error: f64,
    #[serde(skip)]
    pub s: DMatrix<f64>,
    #[serde(skip)]
    pub s_perp: DMatrix<f64>,
    #[serde(skip)]
    pub r: DMatrix<f64>,
}

/// Lower bound on the worst-case previous-task loss after fine-tuning from
/// `(b_prev, v_prev)` on data `x`, where `(b_star, v_star)` fits both tasks.
pub fn loss_lower_bound(
    x: &DMatrix<f64>,
    b_prev: &DMatrix<f64>,
    v_prev: &DVector<f64>,
    b_star: &DMatrix<f64>,
    v_star: &DVector<f64>,
) -> Result<BoundComponents> {
    let k = b_prev.nrows();
    if b_star.shape() != b_prev.shape() || v_prev.len() != k || v_star.len() != k || x.ncols() != b_prev.ncols() {
        return Err(Error::Shape("bound arguments disagree in shape".into()));
    }
    let s = row_space_basis(x);
    let s_perp = orthogonal_complement(&s);
    let r = row_space_basis(b_prev);
    let sigma_k = kth_singular_value(&(r.transpose() * &s_perp), k);
    let vv = v_star.dot(v_star);
    let phi = ((v_prev.dot(v_star)).powi(2) - vv * vv).abs().sqrt();
    let w_star_norm = (b_star.transpose() * v_star).norm();
    let eps_hat = procrustes_eps(b_prev, b_star);
    let shrink = if w_star_norm > 0.0 { phi.min(phi * phi / w_star_norm) } else { phi };
    let bound = sigma_k / (k as f64).sqrt() * shrink / (1.0 + w_star_norm).powi(2) - eps_hat;
    let basis_error =
        gram_deviation(&s).max(gram_deviation(&s_perp)).max(gram_deviation(&r)).max((s.transpose() * &s_perp).amax());
    Ok(BoundComponents { sigma_k, phi, eps_hat, bound, w_star_norm, basis_error, s, s_perp, r })
}

/// Knobs of the randomized bound instances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSetup {
    /// Scale of the perturbation added to a rotated copy of `B_*` to form `B_prev`.
    pub perturbation: f64,
    pub sigma_floor: f64,
    pub fine_tune: FineTuneConfig,
}

impl Default for BoundSetup {
    fn default() -> Self {
        BoundSetup { perturbation: 0.05, sigma_floor: 1e-6, fine_tune: FineTuneConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub seed: u64,
    pub sigma_k: f64,
    pub phi: f64,
    pub eps_hat: f64,
    pub bound: f64,
    pub measured_sqrt_loss: f64,
    pub final_train_loss: f64,
    pub iterations: usize,
    pub precondition: bool,
    pub converged: bool,
    pub basis_error: f64,
    /// Meaningful only when `precondition && converged`.
    pub satisfied: bool,
}

impl BoundRecord {
    pub fn counted(&self) -> bool {
        self.precondition && self.converged
    }
}

/// Inputs of one bound instance.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundProblem {
    pub task: LinearTask,
    pub b_prev: DMatrix<f64>,
    pub v_prev: DVector<f64>,
    pub b_star: DMatrix<f64>,
    pub v_star: DVector<f64>,
}

/// `B_prev = Q B_* + δ G` with a random rotation `Q`, a random previous head,
/// and task data labelled by `(B_*, v_*)`.
pub fn bound_problem(dims: Dims, seed: u64, perturbation: f64) -> Result<BoundProblem> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b_star = gaussian_matrix(&mut rng, dims.k, dims.d, 2.0 / (dims.d as f64).sqrt());
    let v_star = gaussian_vector(&mut rng, dims.k, 1.0 / (dims.k as f64).sqrt());
    let q = gaussian_matrix(&mut rng, dims.k, dims.k, 1.0).qr().q();
    let b_prev = &q * &b_star + gaussian_matrix(&mut rng, dims.k, dims.d, perturbation / (dims.d as f64).sqrt());
    let v_prev = gaussian_vector(&mut rng, dims.k, 1.0 / (dims.k as f64).sqrt());
    let x = sample_inputs(&mut rng, dims);
    let y = &x * (b_star.transpose() * &v_star);
    Ok(BoundProblem { task: LinearTask { x, y }, b_prev, v_prev, b_star, v_star })
}

/// Fine-tunes from `(B_prev, v_prev)` and compares the measured previous-task
/// loss with the bound.
pub fn bound_solve(problem: &BoundProblem, seed: u64, setup: BoundSetup) -> Result<BoundRecord> {
    let BoundProblem { task, b_prev, v_prev, b_star, v_star } = problem;
    let comps = loss_lower_bound(&task.x, b_prev, v_prev, b_star, v_star)?;
    let ft = fine_tune(task, b_prev, v_prev, setup.fine_tune);
    let measured = worst_case_loss(&ft.b, &ft.v, b_star, v_star).sqrt();
    Ok(BoundRecord {
        seed,
        sigma_k: comps.sigma_k,
        phi: comps.phi,
        eps_hat: comps.eps_hat,
        bound: comps.bound,
        measured_sqrt_loss: measured,
        final_train_loss: ft.loss,
        iterations: ft.iterations,
        precondition: comps.sigma_k > setup.sigma_floor,
        converged: ft.converged,
        basis_error: comps.basis_error,
        satisfied: measured >= comps.bound,
    })
}

pub fn bound_instance(dims: Dims, seed: u64, setup: BoundSetup) -> Result<BoundRecord> {
    bound_solve(&bound_problem(dims, seed, setup.perturbation)?, seed, setup)
}

/// How each task's head is initialized before fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadStart {
    LinearProbe,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub head_start: HeadStart,
    /// `||B_t - B_0||_F` after each task.
    pub drift: Vec<f64>,
    /// Largest loss over tasks `t' < t` with their own stored heads, after each task.
    pub previous_task_loss: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub converged: bool,
}

impl ProbeReport {
    pub fn max_drift(&self) -> f64 {
        self.drift.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_previous_loss(&self) -> f64 {
        self.previous_task_loss.iter().copied().fold(0.0, f64::max)
    }
}

/// Sequential multi-head training: per task, initialize the head (by linear
/// probing or at random), fine-tune `(B, v)`, store the head, carry `B` on.
pub fn probe_experiment(
    inst: &LinearCLInstance,
    start: HeadStart,
    cfg: FineTuneConfig,
    seed: u64,
) -> Result<ProbeReport> {
    if start == HeadStart::LinearProbe {
        for (t, task) in inst.tasks.iter().enumerate() {
            let fit = task_loss(task, &inst.b, &linear_probe(&inst.b, task));
            if fit > cfg.tol {
                return Err(Error::Setup(format!(
                    "task {t} is not realizable by the initial extractor (loss {fit:e})"
                )));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = inst.b.nrows();
    let mut b = inst.b.clone();
    let mut heads: Vec<DVector<f64>> = Vec::new();
    let mut report = ProbeReport {
        head_start: start,
        drift: Vec::new(),
        previous_task_loss: Vec::new(),
        train_loss: Vec::new(),
        converged: true,
    };
    for task in &inst.tasks {
        let v0 = match start {
            HeadStart::LinearProbe => linear_probe(&b, task),
            HeadStart::Random => gaussian_vector(&mut rng, k, 1.0 / (k as f64).sqrt()),
        };
        let ft = fine_tune(task, &b, &v0, cfg);
        report.converged &= ft.converged;
        b = ft.b;
        heads.push(ft.v);
        report.train_loss.push(ft.loss);
        report.drift.push((&b - &inst.b).norm());
        let prev =
            inst.tasks.iter().zip(&heads).take(heads.len() - 1).map(|(t, v)| task_loss(t, &b, v)).fold(0.0, f64::max);
        report.previous_task_loss.push(prev);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadCheck {
    pub seed: u64,
    pub eps_mh: f64,
    /// `sqrt(L_t'(B_t, v_t'))`.
    pub own_head: f64,
    /// `sqrt(L_t'(B_t, v_t))`.
    pub new_head: f64,
    pub holds: bool,
}

/// Trains task `t'` then task `t` from a shared extractor and checks
/// `sqrt(L_t'(B_t, v_t')) >= sqrt(L_t'(B_t, v_t)) - eps_mh`.
pub fn multi_head_check(dims: Dims, seed: u64, cfg: FineTuneConfig) -> Result<MultiHeadCheck> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b0 = gaussian_matrix(&mut rng, dims.k, dims.d, 1.0);
    let fit = |b: &DMatrix<f64>, rng: &mut ChaCha8Rng| {
        let truth = gaussian_vector(rng, dims.d, 1.0);
        let x = sample_inputs(rng, dims);
        let task = LinearTask { y: &x * truth, x };
        let v = gaussian_vector(rng, dims.k, 1.0 / (dims.k as f64).sqrt());
        fine_tune(&task, b, &v, cfg)
    };
    let first = fit(&b0, &mut rng);
    let second = fit(&first.b, &mut rng);
    let eps_mh = multi_head_relaxation(&second.b, &second.v, &first.v);
    let own_head = worst_case_loss(&second.b, &first.v, &first.b, &first.v).sqrt();
    let new_head = worst_case_loss(&second.b, &second.v, &first.b, &first.v).sqrt();
    Ok(MultiHeadCheck { seed, eps_mh, own_head, new_head, holds: own_head >= new_head - eps_mh - 1e-12 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryConfig {
    pub dims: Dims,
    pub instances: usize,
    pub seed: u64,
    pub tasks: usize,
    pub setup: BoundSetup,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig { dims: Dims::default(), instances: 100, seed: 0, tasks: 5, setup: BoundSetup::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub config: TheoryConfig,
    pub instances: Vec<BoundRecord>,
    pub counted: usize,
    pub violations: usize,
    pub precondition_failed: usize,
    pub not_converged: usize,
    pub probe_linear: ProbeReport,
    pub probe_random_head: ProbeReport,
    pub multi_head: Vec<MultiHeadCheck>,
}

impl TheoryReport {
    /// True when every counted instance satisfies the bound, the probed run
    /// does not forget, and every multi-head check holds.
    pub fn all_hold(&self) -> bool {
        self.violations == 0
            && self.probe_linear.converged
            && self.probe_linear.max_drift() < 1e-8
            && self.probe_linear.max_previous_loss() < 1e-8
            && self.multi_head.iter().all(|m| m.holds)
    }

    /// `seed,sigma_k,phi,eps_hat,bound,measured_sqrt_loss,satisfied` per instance.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("seed,sigma_k,phi,eps_hat,bound,measured_sqrt_loss,precondition,converged,satisfied\n");
        for r in &self.instances {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.seed,
                r.sigma_k,
                r.phi,
                r.eps_hat,
                r.bound,
                r.measured_sqrt_loss,
                r.precondition,
                r.converged,
                r.satisfied
            ));
        }
        out
    }
}

pub fn theory_report(cfg: &TheoryConfig) -> Result<TheoryReport> {
    cfg.dims.validate()?;
    let instances = (0..cfg.instances as u64)
        .map(|i| bound_instance(cfg.dims, cfg.seed.wrapping_add(i), cfg.setup))
        .collect::<Result<Vec<_>>>()?;
    let counted = instances.iter().filter(|r| r.counted()).count();
    let violations = instances.iter().filter(|r| r.counted() && !r.satisfied).count();
    let precondition_failed = instances.iter().filter(|r| !r.precondition).count();
    let not_converged = instances.iter().filter(|r| !r.converged).count();
    let inst = realizable_instance(cfg.dims, cfg.tasks, cfg.seed)?;
    let ft = cfg.setup.fine_tune;
    let probe_linear = probe_experiment(&inst, HeadStart::LinearProbe, ft, cfg.seed)?;
    let probe_random_head = probe_experiment(&inst, HeadStart::Random, ft, cfg.seed)?;
    let multi_head =
        (0..10u64).map(|i| multi_head_check(cfg.dims, cfg.seed.wrapping_add(i), ft)).collect::<Result<Vec<_>>>()?;
    Ok(TheoryReport {
        config: cfg.clone(),
        instances,
        counted,
        violations,
        precondition_failed,
        not_converged,
        probe_linear,
        probe_random_head,
        multi_head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_targets_give_zero_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = Dims::default();
        let b = gaussian_matrix(&mut rng, 3, 50, 1.0);
        let task = LinearTask { x: sample_inputs(&mut rng, dims), y: DVector::zeros(10) };
        assert_eq!(linear_probe(&b, &task).norm(), 0.0);
    }

    #[test]
    fn realizable_probe_is_exact() {
        let inst = realizable_instance(Dims::default(), 2, 4).unwrap();
        for task in &inst.tasks {
            assert!(task_loss(task, &inst.b, &linear_probe(&inst.b, task)) < 1e-20);
        }
    }

    #[test]
    fn dims_ordering_enforced() {
        assert!(matches!(realizable_instance(Dims { k: 3, n: 60, d: 50 }, 1, 0), Err(Error::Setup(_))));
        assert!(matches!(Dims { k: 0, n: 2, d: 3 }.validate(), Err(Error::Setup(_))));
    }

    #[test]
    fn fine_tune_at_optimum_does_nothing() {
        let inst = realizable_instance(Dims::default(), 1, 2).unwrap();
        let v = linear_probe(&inst.b, &inst.tasks[0]);
        let ft = fine_tune(&inst.tasks[0], &inst.b, &v, FineTuneConfig::default());
        assert_eq!(ft.iterations, 0);
        assert_eq!(ft.b, inst.b);
    }

    #[test]
    fn worst_case_trivial() {
        let b = DMatrix::from_row_slice(2, 3, &[1., 2., 3., 4., 5., 6.]);
        let v = DVector::from_vec(vec![0.5, -1.0]);
        assert_eq!(worst_case_loss(&b, &v, &b, &v), 0.0);
        let z = DVector::zeros(2);
        assert_eq!(worst_case_loss(&b, &z, &b, &z), 0.0);
    }

    #[test]
    fn relaxation_trivial() {
        let b = DMatrix::from_row_slice(2, 3, &[1., 2., 3., 4., 5., 6.]);
        let v = DVector::from_vec(vec![0.5, -1.0]);
        assert_eq!(multi_head_relaxation(&b, &v, &v), 0.0);
        assert_eq!(multi_head_relaxation(&DMatrix::zeros(2, 3), &v, &DVector::zeros(2)), 0.0);
    }

    #[test]
    fn aligned_heads_give_nonpositive_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = Dims::default();
        let b = gaussian_matrix(&mut rng, 3, 50, 0.3);
        let v = gaussian_vector(&mut rng, 3, 1.0);
        let x = sample_inputs(&mut rng, dims);
        let c = loss_lower_bound(&x, &b, &v, &b, &v).unwrap();
        assert_eq!(c.phi, 0.0);
        assert!(c.bound <= 0.0);
    }

    #[test]
    fn rows_inside_data_span_fail_precondition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = sample_inputs(&mut rng, Dims::default());
        let b = gaussian_matrix(&mut rng, 3, 10, 1.0) * &x;
        let v = gaussian_vector(&mut rng, 3, 1.0);
        let c = loss_lower_bound(&x, &b, &v, &b, &(v.clone() * 2.0)).unwrap();
        assert!(c.sigma_k < 1e-10, "{}", c.sigma_k);
    }
}
