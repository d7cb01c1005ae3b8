//! Joint optimization of all per-view experts.
//!
//! The loss is the negated sum of per-view evidence lower bounds; since the
//! objective separates over views, each view's gradient block is computed
//! on its own reverse-mode tape (see [`graph`]) and the blocks are then
//! stitched into one flat vector for Adam. Minibatches are shuffled per
//! epoch from the config seed, so a fixed seed reproduces the entire run
//! bit for bit, regardless of how many threads compute the view blocks.

mod adam;
mod graph;

pub use adam::AdamConfig;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MultiViewDataset;
use crate::error::{Error, Result};
use crate::labels::TransformedLabels;
use crate::numerics::{DenseMatrix, RngStream};
use crate::svgp::{ExpertParams, KMM_BASE_JITTER};

use adam::AdamState;
use graph::{NodeId, Tape};

/// Learning-rate plan: linear decay from `lr_start` to `lr_end` across the
/// warmup epochs, then constant `lr_main`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_main: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            warmup_epochs: 10,
            lr_start: 0.01,
            lr_end: 0.003,
            lr_main: 0.003,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            if self.warmup_epochs == 1 {
                return self.lr_start;
            }
            let t = epoch as f64 / (self.warmup_epochs - 1) as f64;
            self.lr_start + (self.lr_end - self.lr_start) * t
        } else {
            self.lr_main
        }
    }
}

/// Which parameter groups receive updates. All on by default; switching a
/// group off freezes it exactly (its Adam moments never leave zero).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateMask {
    pub kernel: bool,
    pub inducing: bool,
    pub variational: bool,
}

impl Default for UpdateMask {
    fn default() -> Self {
        UpdateMask {
            kernel: true,
            inducing: true,
            variational: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub beta: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub update: UpdateMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 256,
            schedule: LrSchedule::default(),
            beta: 1.0,
            adam: AdamConfig::default(),
            seed: 0,
            update: UpdateMask::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        let s = &self.schedule;
        for (name, v) in [
            ("lr_start", s.lr_start),
            ("lr_end", s.lr_end),
            ("lr_main", s.lr_main),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidConfig("beta must be nonnegative".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::InvalidConfig("bad Adam hyperparameters".into()));
        }
        Ok(())
    }
}

/// Loss curve and timing of one training run. The trained parameters live
/// in the `ExpertParams` passed to [`train`], which are updated in place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full-training-set loss after each epoch.
    pub epoch_losses: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

/// Gradient of the loss w.r.t. one expert's parameters, mirroring the
/// layout of [`ExpertParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGradients {
    pub log_signal_variance: f64,
    pub log_lengthscales: Vec<f64>,
    pub z: DenseMatrix,
    pub m: DenseMatrix,
    /// Packed per-class factors, same layout as `PackedTri::values`.
    pub l_s: Vec<Vec<f64>>,
}

struct ViewLeaves {
    log_sv: NodeId,
    log_ls: NodeId,
    z: NodeId,
    m: NodeId,
    packed: Vec<NodeId>,
}

/// Build the per-view ELBO on a tape: the same composition as
/// `svgp::elbo_view`, but differentiable.
fn view_elbo_tape(
    expert: &ExpertParams,
    x_batch: &DenseMatrix,
    labels: &TransformedLabels,
    scale: f64,
    beta: f64,
) -> Result<(Tape, NodeId, ViewLeaves)> {
    let b = x_batch.rows();
    let c = expert.num_classes();
    let mm = expert.num_inducing();

    let mut t = Tape::new();
    let log_sv = t.leaf(DenseMatrix::scalar(expert.kernel.log_signal_variance));
    let log_ls = t.leaf(DenseMatrix::column(&expert.kernel.log_lengthscales));
    let z = t.leaf(expert.z.clone());
    let m = t.leaf(expert.m.clone());
    let packed: Vec<NodeId> = expert
        .l_s
        .iter()
        .map(|p| t.leaf(DenseMatrix::column(p.values())))
        .collect();
    let x = t.leaf(x_batch.clone());

    let kmm = t.gram_sym(z, log_ls, log_sv);
    // The optimizer sees the prior N(0, K_MM + delta I) with delta added
    // outright rather than left to the escalation ladder. The ladder's
    // succeed-at-zero branch flips discontinuously as the kernel parameters
    // move, and one flip next to a numerically singular K_MM turns the KL
    // into a wall (1/lambda_min spikes past 1e10). A fixed additive term
    // keeps the objective smooth and caps its curvature at 1/delta no matter
    // how short the lengthscales get.
    let eye = t.leaf(DenseMatrix::identity(mm).scaled(KMM_BASE_JITTER));
    let kmm_j = t.add(kmm, eye);
    let l = t.cholesky(kmm_j, KMM_BASE_JITTER)?;
    let kbm = t.gram_cross(x, z, log_ls, log_sv);
    let kmb = t.transpose(kbm);
    let w = t.tri_solve(l, kmb, false);
    let nyst = t.col_sq_norms(w);
    let tw = t.tri_solve(l, w, true);
    let sdiag = t.signal_diag(log_sv, b);
    let sld_l = t.sum_log_diag(l);

    let mut ell_terms = Vec::with_capacity(c);
    let mut kl_terms: Vec<(f64, NodeId)> = vec![(c as f64, sld_l)];
    for class in 0..c {
        let m_c = t.column_of(m, class);
        let wm = t.tri_solve(l, m_c, false);
        let mean_c = t.matmul(w, wm, true, false);
        let l_c = t.tri_from_packed(packed[class], mm, expert.l_s[class].diag_only());
        let u = t.matmul(l_c, tw, true, false);
        let svar = t.col_sq_norms(u);
        let with_prior = t.add(svar, sdiag);
        let raw_var = t.sub(with_prior, nyst);
        let var_c = t.max_scalar(raw_var, expert.var_floor);
        let y_c = DenseMatrix::column(&labels.y_tilde.col_to_vec(class));
        let s2_c = DenseMatrix::column(&labels.sigma2_tilde.col_to_vec(class));
        let ell_c = t.gauss_lik(mean_c, var_c, y_c, s2_c);
        ell_terms.push((1.0, ell_c));

        let ws = t.tri_solve_tri(l, l_c);
        let tr = t.frob_sq(ws);
        let quad = t.frob_sq(wm);
        let sld_c = t.sum_log_diag(l_c);
        kl_terms.push((0.5, tr));
        kl_terms.push((0.5, quad));
        kl_terms.push((-1.0, sld_c));
    }
    let ell = t.axpy_scalars(ell_terms, 0.0);
    let kl = t.axpy_scalars(kl_terms, -(c as f64) * (mm as f64) / 2.0);
    let elbo = t.axpy_scalars(vec![(scale, ell), (-beta, kl)], 0.0);
    Ok((
        t,
        elbo,
        ViewLeaves {
            log_sv,
            log_ls,
            z,
            m,
            packed,
        },
    ))
}

fn extract_gradients(
    mut adj: Vec<Option<DenseMatrix>>,
    leaves: &ViewLeaves,
    expert: &ExpertParams,
) -> ExpertGradients {
    let d = expert.input_dim();
    let mm = expert.num_inducing();
    let c = expert.num_classes();
    let take = |slot: &mut Option<DenseMatrix>, rows: usize, cols: usize| {
        slot.take().unwrap_or_else(|| DenseMatrix::zeros(rows, cols))
    };
    ExpertGradients {
        log_signal_variance: take(&mut adj[leaves.log_sv], 1, 1).as_scalar(),
        log_lengthscales: take(&mut adj[leaves.log_ls], d, 1).data().to_vec(),
        z: take(&mut adj[leaves.z], mm, d),
        m: take(&mut adj[leaves.m], mm, c),
        l_s: leaves
            .packed
            .iter()
            .enumerate()
            .map(|(cl, &id)| {
                take(&mut adj[id], expert.l_s[cl].values().len(), 1)
                    .data()
                    .to_vec()
            })
            .collect(),
    }
}

/// Value of the loss −Σ_v elbo_v on one aligned batch, plus its gradient
/// for every expert. View blocks are independent and computed in parallel;
/// the result does not depend on the thread schedule.
pub fn grad_loss(
    experts: &[ExpertParams],
    batch_views: &[DenseMatrix],
    batch_labels: &TransformedLabels,
    scale: f64,
    beta: f64,
) -> Result<(f64, Vec<ExpertGradients>)> {
    if experts.len() != batch_views.len() {
        return Err(Error::DimensionMismatch {
            context: "grad_loss".into(),
            expected: format!("{} views", experts.len()),
            got: format!("{} views", batch_views.len()),
        });
    }
    let b = batch_labels.len();
    if batch_views.iter().any(|v| v.rows() != b) {
        let mut sizes: Vec<usize> = batch_views.iter().map(DenseMatrix::rows).collect();
        sizes.push(b);
        return Err(Error::MismatchedBatch { sizes });
    }
    let per_view: Vec<(f64, ExpertGradients)> = experts
        .par_iter()
        .zip(batch_views.par_iter())
        .map(|(expert, x)| {
            let (tape, elbo, leaves) = view_elbo_tape(expert, x, batch_labels, scale, beta)?;
            let value = tape.value(elbo).as_scalar();
            let adj = tape.backward(elbo, -1.0);
            Ok((value, extract_gradients(adj, &leaves, expert)))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(per_view.len());
    for (elbo, g) in per_view {
        loss -= elbo;
        grads.push(g);
    }
    Ok((loss, grads))
}

fn param_len(e: &ExpertParams) -> usize {
    1 + e.input_dim()
        + e.num_inducing() * e.input_dim()
        + e.num_inducing() * e.num_classes()
        + e.l_s.iter().map(|p| p.values().len()).sum::<usize>()
}

fn pack_params(e: &ExpertParams, out: &mut Vec<f64>) {
    out.push(e.kernel.log_signal_variance);
    out.extend_from_slice(&e.kernel.log_lengthscales);
    out.extend_from_slice(e.z.data());
    out.extend_from_slice(e.m.data());
    for p in &e.l_s {
        out.extend_from_slice(p.values());
    }
}

fn unpack_params(e: &mut ExpertParams, src: &[f64]) {
    let mut at = 0;
    let mut grab = |n: usize| {
        let s = &src[at..at + n];
        at += n;
        s
    };
    e.kernel.log_signal_variance = grab(1)[0];
    let d = e.kernel.log_lengthscales.len();
    e.kernel.log_lengthscales.copy_from_slice(grab(d));
    let zn = e.z.rows() * e.z.cols();
    e.z.data_mut().copy_from_slice(grab(zn));
    let mn = e.m.rows() * e.m.cols();
    e.m.data_mut().copy_from_slice(grab(mn));
    for p in &mut e.l_s {
        let n = p.values().len();
        p.values_mut().copy_from_slice(grab(n));
    }
}

fn pack_grads(e: &ExpertParams, g: &ExpertGradients, mask: &UpdateMask, out: &mut Vec<f64>) {
    let zero_kernel = !mask.kernel;
    let zero_inducing = !mask.inducing;
    let zero_var = !mask.variational;
    let push = |out: &mut Vec<f64>, vals: &[f64], zero: bool| {
        if zero {
            out.extend(std::iter::repeat(0.0).take(vals.len()));
        } else {
            out.extend_from_slice(vals);
        }
    };
    push(out, &[g.log_signal_variance], zero_kernel);
    push(out, &g.log_lengthscales, zero_kernel);
    push(out, g.z.data(), zero_inducing);
    push(out, g.m.data(), zero_var);
    for (cl, p) in g.l_s.iter().enumerate() {
        debug_assert_eq!(p.len(), e.l_s[cl].values().len());
        push(out, p, zero_var);
    }
}

fn full_loss(
    dataset: &MultiViewDataset,
    labels: &TransformedLabels,
    experts: &[ExpertParams],
    beta: f64,
) -> Result<f64> {
    // Evaluated through the same tape the steps use (forward pass only), so
    // the reported loss is exactly the objective being minimized, including
    // the additive prior jitter.
    let mut loss = 0.0;
    for (expert, view) in experts.iter().zip(dataset.views()) {
        let (tape, node, _) = view_elbo_tape(expert, view, labels, 1.0, beta)?;
        loss -= tape.value(node).as_scalar();
    }
    Ok(loss)
}

/// Run minibatch training with Adam over every expert jointly. Parameters
/// are updated in place; the report carries the per-epoch full-set loss.
pub fn train(
    dataset: &MultiViewDataset,
    labels: &TransformedLabels,
    experts: &mut [ExpertParams],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.num_views() != experts.len() {
        return Err(Error::DimensionMismatch {
            context: "train".into(),
            expected: format!("{} experts", dataset.num_views()),
            got: format!("{}", experts.len()),
        });
    }
    if labels.len() != dataset.len() {
        return Err(Error::DimensionMismatch {
            context: "train labels".into(),
            expected: format!("{} rows", dataset.len()),
            got: format!("{}", labels.len()),
        });
    }
    for (v, (expert, view)) in experts.iter().zip(dataset.views()).enumerate() {
        expert.validate()?;
        if expert.input_dim() != view.cols() {
            return Err(Error::DimensionMismatch {
                context: format!("train view {v}"),
                expected: format!("{} features", expert.input_dim()),
                got: format!("{}", view.cols()),
            });
        }
    }

    let n = dataset.len();
    let total: usize = experts.iter().map(param_len).sum();
    let mut flat = Vec::with_capacity(total);
    for e in experts.iter() {
        pack_params(e, &mut flat);
    }
    let mut opt = AdamState::new(total);
    let shuffle_base = RngStream::new(cfg.seed, 0);

    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        epoch_seconds: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        let started = std::time::Instant::now();
        let lr = cfg.schedule.lr_at(epoch);
        let perm = shuffle_base.derive(epoch as u64).shuffled_indices(n);
        for chunk in perm.chunks(cfg.batch_size) {
            let batch_views: Vec<DenseMatrix> = dataset
                .views()
                .iter()
                .map(|v| v.gather_rows(chunk))
                .collect();
            let batch_labels = labels.gather(chunk);
            let scale = n as f64 / chunk.len() as f64;
            let (batch_loss, grads) =
                grad_loss(experts, &batch_views, &batch_labels, scale, cfg.beta)?;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let mut flat_grads = Vec::with_capacity(total);
            for (e, g) in experts.iter().zip(&grads) {
                pack_grads(e, g, &cfg.update, &mut flat_grads);
            }
            opt.step(&mut flat, &flat_grads, lr, &cfg.adam);
            let mut at = 0;
            for e in experts.iter_mut() {
                let len = param_len(e);
                unpack_params(e, &flat[at..at + len]);
                at += len;
            }
        }
        let loss = full_loss(dataset, labels, experts, cfg.beta)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        report.epoch_losses.push(loss);
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_moons_multiview, MoonsSpec, MultiViewDataset};
    use crate::kernel::{self, KernelParams};
    use crate::labels::transform_labels;
    use crate::numerics::{cholesky_psd, tri_solve};
    use crate::svgp::{elbo_view, q_f_marginals, PackedTri};

    fn random_expert(m: usize, d: usize, c: usize, seed: u64) -> ExpertParams {
        let raw = RngStream::new(seed, 0).std_normal(m * d);
        let z = DenseMatrix::from_vec(
            m,
            d,
            raw.iter()
                .enumerate()
                .map(|(i, v)| 0.4 * v + 1.3 * (i / d) as f64)
                .collect(),
        )
        .unwrap();
        let mut e = ExpertParams::init(KernelParams::unit(d), z, c, false).unwrap();
        // Move away from the KL = 0 point so every term is exercised.
        let mv = RngStream::new(seed, 1).std_normal(m * c);
        e.m.data_mut().copy_from_slice(&mv);
        for (cl, p) in e.l_s.iter_mut().enumerate() {
            let bump = RngStream::new(seed, 2 + cl as u64).std_normal(p.values().len());
            for (x, b) in p.values_mut().iter_mut().zip(bump) {
                *x += 0.2 * b;
            }
        }
        e.kernel.log_signal_variance = 0.3;
        for (i, l) in e.kernel.log_lengthscales.iter_mut().enumerate() {
            *l = 0.1 * (i as f64 + 1.0);
        }
        e
    }

    fn flat_loss(
        template: &[ExpertParams],
        views: &[DenseMatrix],
        labels: &TransformedLabels,
        scale: f64,
        beta: f64,
        flat: &[f64],
    ) -> f64 {
        let mut experts = template.to_vec();
        let mut at = 0;
        for e in experts.iter_mut() {
            let len = param_len(e);
            unpack_params(e, &flat[at..at + len]);
            at += len;
        }
        let mut loss = 0.0;
        for (e, x) in experts.iter().zip(views) {
            let (tape, node, _) = view_elbo_tape(e, x, labels, scale, beta).unwrap();
            loss -= tape.value(node).as_scalar();
        }
        loss
    }

    /// Same formulas as `svgp::elbo_view`, but with the training objective's
    /// additive prior jitter on K_MM, written out with dense primitives.
    fn dense_jittered_elbo(
        e: &ExpertParams,
        x: &DenseMatrix,
        labels: &TransformedLabels,
        scale: f64,
        beta: f64,
    ) -> f64 {
        let mats = kernel::gram(&e.kernel, x, &e.z).unwrap();
        let mut kj = mats.k_mm.clone();
        for i in 0..kj.rows() {
            kj.set(i, i, kj.get(i, i) + KMM_BASE_JITTER);
        }
        let f = cholesky_psd(&kj, 0.0).unwrap();
        let w = tri_solve(&f, &mats.k_nm.transpose(), false).unwrap();
        let nyst = w.col_sq_norms();
        let t = tri_solve(&f, &w, true).unwrap();
        let m_ind = e.num_inducing();
        let (mut ell, mut kl) = (0.0, 0.0);
        const LN_2PI: f64 = 1.8378770664093453;
        for class in 0..e.num_classes() {
            let m_c = DenseMatrix::column(&e.m.col_to_vec(class));
            let wm = tri_solve(&f, &m_c, false).unwrap();
            let mean_c = w.matmul_tn(&wm);
            let l_c = e.l_s[class].to_lower();
            let u = l_c.matmul_tn(&t);
            let svar = u.col_sq_norms();
            for i in 0..x.rows() {
                let var = (svar[i] + mats.k_nn_diag[i] - nyst[i]).max(e.var_floor);
                let y = labels.y_tilde.get(i, class);
                let s2 = labels.sigma2_tilde.get(i, class);
                let r = y - mean_c.get(i, 0);
                ell += -0.5 * (LN_2PI + s2.ln()) - (r * r + var) / (2.0 * s2);
            }
            let ws = tri_solve(&f, &l_c, false).unwrap();
            let logdet_s = 2.0 * (0..m_ind).map(|i| l_c.get(i, i).ln()).sum::<f64>();
            kl += 0.5
                * (ws.frob_sq() + wm.frob_sq() - m_ind as f64 + f.log_det() - logdet_s);
        }
        scale * ell - beta * kl
    }

    #[test]
    fn tape_elbo_matches_dense_reference() {
        let expert = random_expert(4, 2, 3, 5);
        let x = DenseMatrix::from_vec(6, 2, RngStream::new(6, 0).std_normal(12)).unwrap();
        let labels = transform_labels(&[0, 2, 1, 1, 0, 2], 3, 1e-3).unwrap();
        for (scale, beta) in [(1.0, 1.0), (3.5, 0.25), (1.0, 0.0)] {
            let reference = dense_jittered_elbo(&expert, &x, &labels, scale, beta);
            let (tape, node, _) = view_elbo_tape(&expert, &x, &labels, scale, beta).unwrap();
            let taped = tape.value(node).as_scalar();
            assert!(
                (reference - taped).abs() <= 1e-12 * reference.abs().max(1.0),
                "scale {scale} beta {beta}: {reference} vs {taped}"
            );
        }
    }

    #[test]
    fn tape_elbo_tracks_plain_elbo_up_to_prior_jitter() {
        // elbo_view factors K_MM through the escalation ladder (zero jitter
        // for this well-conditioned fixture) while the tape adds its jitter
        // outright, so the two agree only up to O(jitter) here. Anything
        // structural (sign, missing term, wrong scale) shows up as O(1).
        let expert = random_expert(4, 2, 3, 5);
        let x = DenseMatrix::from_vec(6, 2, RngStream::new(6, 0).std_normal(12)).unwrap();
        let labels = transform_labels(&[0, 2, 1, 1, 0, 2], 3, 1e-3).unwrap();
        for (scale, beta) in [(1.0, 1.0), (3.5, 0.25), (1.0, 0.0)] {
            let plain = elbo_view(&expert, &x, &labels, scale, beta).unwrap();
            let (tape, node, _) = view_elbo_tape(&expert, &x, &labels, scale, beta).unwrap();
            let taped = tape.value(node).as_scalar();
            assert!(
                (plain - taped).abs() <= 1e-2 * plain.abs().max(1.0),
                "scale {scale} beta {beta}: {plain} vs {taped}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Random tiny problem, every coordinate of every view.
        let n = 6;
        let experts = vec![random_expert(3, 2, 2, 11), random_expert(3, 2, 2, 12)];
        let views = vec![
            DenseMatrix::from_vec(n, 2, RngStream::new(13, 0).std_normal(2 * n)).unwrap(),
            DenseMatrix::from_vec(n, 2, RngStream::new(14, 0).std_normal(2 * n)).unwrap(),
        ];
        let labels = transform_labels(&[0, 1, 1, 0, 0, 1], 2, 1e-3).unwrap();
        let (scale, beta) = (2.0, 0.7);

        let (_, grads) = grad_loss(&experts, &views, &labels, scale, beta).unwrap();
        let mut flat_grad = Vec::new();
        for (e, g) in experts.iter().zip(&grads) {
            pack_grads(e, g, &UpdateMask::default(), &mut flat_grad);
        }

        let mut flat = Vec::new();
        for e in &experts {
            pack_params(e, &mut flat);
        }
        for i in 0..flat.len() {
            let h = 1e-5 * flat[i].abs().max(1.0);
            let mut p = flat.clone();
            p[i] = flat[i] + h;
            let hi = flat_loss(&experts, &views, &labels, scale, beta, &p);
            p[i] = flat[i] - h;
            let lo = flat_loss(&experts, &views, &labels, scale, beta, &p);
            let fd = (hi - lo) / (2.0 * h);
            let got = flat_grad[i];
            let rel = (got - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-4, "coordinate {i}: analytic {got}, fd {fd}, rel {rel}");
        }
    }

    fn spd_inverse(a: &DenseMatrix) -> DenseMatrix {
        let f = cholesky_psd(a, 0.0).unwrap();
        let w = tri_solve(&f, &DenseMatrix::identity(a.rows()), false).unwrap();
        tri_solve(&f, &w, true).unwrap()
    }

    #[test]
    fn variational_gradient_vanishes_at_collapsed_optimum() {
        // With kernel and Z fixed, the ELBO is maximized in closed form by
        //   S_c = (Kt^{-1} + A^T Sigma_c^{-1} A)^{-1},
        //   m_c = S_c A^T Sigma_c^{-1} y_c,
        // where Kt = K_MM + jitter I and A = K_NM Kt^{-1}. Planting those
        // values must zero the m and L_S gradient blocks exactly (up to
        // the linear algebra roundoff of computing them).
        let n = 8;
        let x = DenseMatrix::from_vec(n, 2, RngStream::new(81, 0).std_normal(2 * n)).unwrap();
        let lbl: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let labels = transform_labels(&lbl, 2, 1e-3).unwrap();
        let take: Vec<usize> = vec![0, 3, 5, 6];
        let mut expert =
            ExpertParams::init(KernelParams::unit(2), x.gather_rows(&take), 2, false).unwrap();

        let mats = kernel::gram(&expert.kernel, &x, &expert.z).unwrap();
        let mm = expert.num_inducing();
        let mut kt = mats.k_mm.clone();
        for i in 0..mm {
            kt.set(i, i, kt.get(i, i) + KMM_BASE_JITTER);
        }
        let f = cholesky_psd(&kt, 0.0).unwrap();
        // Columns of kt_inv_kmn are the per-point weight vectors a_i.
        let w = tri_solve(&f, &mats.k_nm.transpose(), false).unwrap();
        let kt_inv_kmn = tri_solve(&f, &w, true).unwrap();
        let kt_inv = spd_inverse(&kt);

        for class in 0..2 {
            let mut prec = kt_inv.clone();
            let mut rhs = vec![0.0; mm];
            for i in 0..n {
                let s2 = labels.sigma2_tilde.get(i, class);
                let y = labels.y_tilde.get(i, class);
                for r in 0..mm {
                    let ar = kt_inv_kmn.get(r, i);
                    rhs[r] += ar * y / s2;
                    for q in 0..mm {
                        prec.set(r, q, prec.get(r, q) + ar * kt_inv_kmn.get(q, i) / s2);
                    }
                }
            }
            let s_opt = spd_inverse(&prec);
            let l_opt = cholesky_psd(&s_opt, 0.0).unwrap().into_lower();
            expert.l_s[class] = PackedTri::from_lower(&l_opt, false);
            for r in 0..mm {
                let mut v = 0.0;
                for q in 0..mm {
                    v += s_opt.get(r, q) * rhs[q];
                }
                expert.m.set(r, class, v);
            }
        }

        let (_, grads) = grad_loss(
            std::slice::from_ref(&expert),
            std::slice::from_ref(&x),
            &labels,
            1.0,
            1.0,
        )
        .unwrap();
        let g = &grads[0];
        for v in g.m.data() {
            assert!(v.abs() < 1e-6, "m gradient {v} at collapsed optimum");
        }
        for p in &g.l_s {
            for v in p {
                assert!(v.abs() < 1e-6, "L_S gradient {v} at collapsed optimum");
            }
        }
    }

    #[test]
    fn view_blocks_are_independent() {
        let n = 5;
        let mut experts = vec![random_expert(3, 2, 2, 21), random_expert(3, 2, 2, 22)];
        let views = vec![
            DenseMatrix::from_vec(n, 2, RngStream::new(23, 0).std_normal(2 * n)).unwrap(),
            DenseMatrix::zeros(n, 2),
        ];
        let labels = transform_labels(&[0, 1, 0, 1, 0], 2, 1e-3).unwrap();
        let (_, before) = grad_loss(&experts, &views, &labels, 1.0, 1.0).unwrap();
        // Perturb view 1's parameters; view 2's block must not move at all.
        experts[0].kernel.log_signal_variance += 0.5;
        let bumped = experts[0].m.get(0, 0) + 2.0;
        experts[0].m.set(0, 0, bumped);
        let (_, after) = grad_loss(&experts, &views, &labels, 1.0, 1.0).unwrap();
        assert_eq!(before[1], after[1]);
        assert_ne!(before[0], after[0]);
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 0.01);
        assert!((s.lr_at(9) - 0.003).abs() < 1e-15);
        assert_eq!(s.lr_at(10), 0.003);
        assert_eq!(s.lr_at(29), 0.003);
        // Warmup is linear: midpoint sits halfway.
        let mid = s.lr_at(4) + s.lr_at(5);
        assert!((mid - (0.01 + 0.003)).abs() < 1e-12);
    }

    fn separable_dataset(n_per_class: usize, seed: u64) -> (MultiViewDataset, Vec<usize>) {
        let n = 2 * n_per_class;
        let draw = RngStream::new(seed, 0).std_normal(2 * n * 2);
        let mut v0 = Vec::with_capacity(2 * n);
        let mut v1 = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            // Interleave classes so a prefix of rows spans both clusters.
            let class = i % 2;
            let off = if class == 0 { -2.0 } else { 2.0 };
            v0.push(draw[4 * i] * 0.3 + off);
            v0.push(draw[4 * i + 1] * 0.3 - off);
            v1.push(draw[4 * i + 2] * 0.3 - off);
            v1.push(draw[4 * i + 3] * 0.3 + off);
            labels.push(class);
        }
        let ds = MultiViewDataset::new(
            vec![
                DenseMatrix::from_vec(n, 2, v0).unwrap(),
                DenseMatrix::from_vec(n, 2, v1).unwrap(),
            ],
            labels.clone(),
            2,
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        (ds, labels)
    }

    fn mean_argmax_accuracy(experts: &[ExpertParams], ds: &MultiViewDataset) -> f64 {
        // Cheap readout for fit quality: argmax of summed per-view means.
        let n = ds.len();
        let c = experts[0].num_classes();
        let mut sum = DenseMatrix::zeros(n, c);
        for (e, x) in experts.iter().zip(ds.views()) {
            sum.add_assign(&q_f_marginals(e, x).unwrap().mean);
        }
        let mut hits = 0;
        for i in 0..n {
            let row = sum.row(i);
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == ds.labels()[i] {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    }

    fn init_experts(ds: &MultiViewDataset, m: usize) -> Vec<ExpertParams> {
        ds.views()
            .iter()
            .map(|v| {
                let take: Vec<usize> = (0..m.min(v.rows())).collect();
                ExpertParams::init(
                    KernelParams::unit(v.cols()),
                    v.gather_rows(&take),
                    ds.num_classes(),
                    false,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (ds, _) = separable_dataset(10, 31);
        let labels = transform_labels(ds.labels(), 2, 1e-3).unwrap();
        let mut experts = init_experts(&ds, 4);
        let before = experts.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let report = train(&ds, &labels, &mut experts, &cfg).unwrap();
        assert!(report.epoch_losses.is_empty());
        assert!(report.epoch_seconds.is_empty());
        for (a, b) in experts.iter().zip(&before) {
            assert_eq!(a.kernel.log_signal_variance, b.kernel.log_signal_variance);
            assert_eq!(a.z, b.z);
            assert_eq!(a.m, b.m);
            for (pa, pb) in a.l_s.iter().zip(&b.l_s) {
                assert_eq!(pa.values(), pb.values());
            }
        }
    }

    #[test]
    fn fits_linearly_separable_data() {
        let (ds, _) = separable_dataset(20, 33);
        let labels = transform_labels(ds.labels(), 2, 1e-3).unwrap();
        let mut experts = init_experts(&ds, 8);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 16,
            seed: 3,
            ..TrainConfig::default()
        };
        let report = train(&ds, &labels, &mut experts, &cfg).unwrap();
        assert_eq!(report.epoch_losses.len(), 30);
        let acc = mean_argmax_accuracy(&experts, &ds);
        assert_eq!(acc, 1.0, "final training accuracy {acc}");
    }

    #[test]
    fn same_seed_reproduces_bitwise() {
        let (ds, _) = separable_dataset(12, 35);
        let labels = transform_labels(ds.labels(), 2, 1e-3).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            seed: 42,
            ..TrainConfig::default()
        };
        let run = || -> (TrainReport, Vec<ExpertParams>) {
            let mut experts = init_experts(&ds, 5);
            let report = train(&ds, &labels, &mut experts, &cfg).unwrap();
            (report, experts)
        };
        let (r1, e1) = run();
        let (r2, e2) = run();
        assert_eq!(r1.epoch_losses, r2.epoch_losses);
        for (a, b) in e1.iter().zip(&e2) {
            assert_eq!(a.z, b.z);
            assert_eq!(a.m, b.m);
            assert_eq!(a.kernel.log_signal_variance, b.kernel.log_signal_variance);
            assert_eq!(a.kernel.log_lengthscales, b.kernel.log_lengthscales);
            for (pa, pb) in a.l_s.iter().zip(&b.l_s) {
                assert_eq!(pa.values(), pb.values());
            }
        }
    }

    #[test]
    fn loss_decreases_on_moons() {
        let spec = MoonsSpec {
            n_per_class: 120,
            ..MoonsSpec::default()
        };
        let (ds, _) = make_moons_multiview(&spec, RngStream::new(70, 0));
        let labels = transform_labels(ds.labels(), 2, 1e-3).unwrap();
        let mut experts = init_experts(&ds, 24);
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 64,
            seed: 7,
            ..TrainConfig::default()
        };
        let report = train(&ds, &labels, &mut experts, &cfg).unwrap();
        assert!(
            report.epoch_losses[19] < report.epoch_losses[0],
            "loss did not trend down: {:?}",
            report.epoch_losses
        );
    }

    #[test]
    fn minibatch_scaling_is_unbiased() {
        // The scaled batch log-lik term is an unbiased estimator of the
        // full-set term; check the empirical mean over many random batches.
        let n = 12;
        let b = 4;
        let expert = random_expert(3, 2, 2, 41);
        let x = DenseMatrix::from_vec(n, 2, RngStream::new(42, 0).std_normal(2 * n)).unwrap();
        let lbl: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let labels = transform_labels(&lbl, 2, 1e-3).unwrap();

        let full = crate::svgp::expected_log_lik(&q_f_marginals(&expert, &x).unwrap(), &labels)
            .unwrap();
        let stream = RngStream::new(43, 0);
        let trials = 10_000;
        let mut acc = 0.0;
        for t in 0..trials {
            let perm = stream.derive(t).shuffled_indices(n);
            let idx = &perm[..b];
            let bx = x.gather_rows(idx);
            let bl = labels.gather(idx);
            let ell =
                crate::svgp::expected_log_lik(&q_f_marginals(&expert, &bx).unwrap(), &bl).unwrap();
            acc += ell * (n as f64 / b as f64);
        }
        let mean = acc / trials as f64;
        let rel = ((mean - full) / full).abs();
        assert!(rel < 0.02, "scaled batch mean {mean} vs full {full} (rel {rel})");
    }

    #[test]
    fn frozen_groups_do_not_move() {
        let (ds, _) = separable_dataset(10, 51);
        let labels = transform_labels(ds.labels(), 2, 1e-3).unwrap();
        let mut experts = init_experts(&ds, 4);
        let before = experts.clone();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            update: UpdateMask {
                kernel: false,
                inducing: false,
                variational: true,
            },
            ..TrainConfig::default()
        };
        train(&ds, &labels, &mut experts, &cfg).unwrap();
        for (a, b) in experts.iter().zip(&before) {
            assert_eq!(a.kernel.log_signal_variance, b.kernel.log_signal_variance);
            assert_eq!(a.kernel.log_lengthscales, b.kernel.log_lengthscales);
            assert_eq!(a.z, b.z);
            assert_ne!(a.m, b.m, "variational parameters should have moved");
        }
    }

    #[test]
    fn non_finite_input_aborts_with_epoch() {
        let (mut views, labels_raw) = {
            let (ds, l) = separable_dataset(8, 61);
            (ds.views().to_vec(), l)
        };
        views[0].set(0, 0, f64::NAN);
        let ds = MultiViewDataset::new(views, labels_raw, 2, vec!["a".into(), "b".into()])
            .unwrap();
        let labels = transform_labels(ds.labels(), 2, 1e-3).unwrap();
        // Build Z from rows past the poisoned one so setup succeeds and the
        // NaN is only met inside the training loop.
        let clean: Vec<usize> = (1..5).collect();
        let mut experts: Vec<ExpertParams> = ds
            .views()
            .iter()
            .map(|v| {
                ExpertParams::init(KernelParams::unit(2), v.gather_rows(&clean), 2, false)
                    .unwrap()
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        match train(&ds, &labels, &mut experts, &cfg) {
            Err(Error::NonFiniteLoss { epoch }) => assert_eq!(epoch, 0),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }
}
