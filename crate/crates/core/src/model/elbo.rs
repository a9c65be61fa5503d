//! Negative ELBO with the expectation over prototype assignments computed
//! exactly by enumerating every active prototype.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Real, Tensor, Var};
use crate::training::randint_task_input;

use super::{ModelError, Pgcm, Result, HARD_THRESHOLD};

/// Observed training data for a batch of `B` instances.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    /// `[B * n, D]`, instance-major.
    pub parts: Tensor<T>,
    /// `[B * n, k]` concept labels in {0, 1}.
    pub concepts: Tensor<T>,
    /// `B` task labels.
    pub task: Vec<usize>,
}

impl<T: Real> Batch<T> {
    pub fn instances(&self) -> usize {
        self.task.len()
    }
}

/// What the task head sees during the loss computation.
pub enum TaskSource<'a, T> {
    /// The observed concept labels.
    Observed,
    /// A caller-provided `[B, n * k]` hard input.
    Fixed(&'a Tensor<T>),
    /// Detached predicted hard concepts, each bit independently replaced by
    /// its label with probability `prob`.
    RandInt { prob: f64, rng: &'a mut ChaCha8Rng },
}

/// Scalar loss and its four weighted components; `total` is their sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms<T> {
    pub total: T,
    /// `lambda_kl * sum_i KL(q(s_i | x_i) || uniform)`.
    pub regularization: T,
    /// `-log p(y | c)`.
    pub task: T,
    /// `-sum_i E_q[log p(c_i | s_i)]`, positive-class weighted.
    pub concept: T,
    /// `-lambda_rec * sum_i E_q[log p(x_i | s_i)]`.
    pub reconstruction: T,
}

pub struct ElboVars<T> {
    pub total: Var,
    pub regularization: Var,
    pub task: Var,
    pub concept: Var,
    pub reconstruction: Var,
    /// `[B * n, k]` posterior predictive concepts (values only).
    pub concept_probs: Tensor<T>,
    /// `[B, n * k]` task head input actually used.
    pub task_input: Tensor<T>,
}

impl<T: Real> ElboVars<T> {
    pub fn terms(&self, g: &Graph<T>) -> ElboTerms<T> {
        ElboTerms {
            total: g.value(self.total).item(),
            regularization: g.value(self.regularization).item(),
            task: g.value(self.task).item(),
            concept: g.value(self.concept).item(),
            reconstruction: g.value(self.reconstruction).item(),
        }
    }
}

/// Smallest probability used when an override bit forces `log 0`.
const OVERRIDE_FLOOR: f64 = 1e-12;

impl<T: Real> Pgcm<T> {
    /// Binds every parameter as a differentiable leaf.
    pub fn bind_parameters(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.parameters().into_iter().map(|(_, t)| g.param(t)).collect()
    }

    /// Records the negative ELBO on `g`. `params` must follow
    /// [`Pgcm::parameters`] order; values are read from the graph, so they may
    /// differ from `self`. `selector_log_probs` (`[B * n, m_active]`) replaces
    /// the variational posterior when given.
    pub fn elbo_graph(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        batch: &Batch<T>,
        task_source: TaskSource<'_, T>,
        selector_log_probs: Option<&Tensor<T>>,
    ) -> Result<ElboVars<T>> {
        let cfg = &self.config;
        let (k, n, dim) = (cfg.concepts, cfg.parts, cfg.part_dim());
        let b = batch.instances();
        let rows = b * n;
        if b == 0 {
            return Err(ModelError::Input("empty batch".into()));
        }
        if batch.parts.shape() != [rows, dim] || batch.concepts.shape() != [rows, k] {
            return Err(ModelError::Input(format!(
                "batch shapes parts={:?} concepts={:?} for {b} instances",
                batch.parts.shape(),
                batch.concepts.shape()
            )));
        }
        if let Some(&y) = batch.task.iter().find(|&&y| y >= cfg.task_classes) {
            return Err(ModelError::Input(format!("task label {y} out of range")));
        }

        let nets = [&self.encoder, &self.image_decoder, &self.concept_decoder, &self.task_head];
        let mut offset = 0;
        let mut net_params = Vec::with_capacity(4);
        for net in nets {
            net_params.push(&params[offset..offset + net.num_tensors()]);
            offset += net.num_tensors();
        }
        let [enc_p, img_p, con_p, task_p] = [net_params[0], net_params[1], net_params[2], net_params[3]];
        let emb_params = &params[offset..];

        let active = self.bank.active();
        if active.is_empty() {
            return Err(ModelError::NoActivePrototypes);
        }
        let learned = self.bank.learned_active();
        if emb_params.len() != learned.len() {
            return Err(ModelError::Shape(format!(
                "{} embedding params for {} learned prototypes",
                emb_params.len(),
                learned.len()
            )));
        }
        let m = active.len();

        // image representations of the active prototypes, in active order
        let stored: Vec<usize> = active.iter().copied().filter(|j| !learned.contains(j)).collect();
        let decoded = if learned.is_empty() {
            None
        } else {
            let e = concat_all(g, emb_params)?;
            let mu = self.image_decoder.forward_graph(g, img_p, e)?;
            Some(g.sigmoid(mu))
        };
        let stored_var = if stored.is_empty() {
            None
        } else {
            let rows: Vec<&[T]> = stored
                .iter()
                .map(|&j| self.bank.entries[j].stored_image.as_deref().ok_or(ModelError::Input(format!("prototype {j} lacks an image"))))
                .collect::<Result<_>>()?;
            Some(g.constant(Tensor::stack_rows(&rows)?))
        };
        let images = match (decoded, stored_var) {
            (Some(d), None) => d,
            (None, Some(s)) => s,
            (Some(d), Some(s)) => {
                let both = g.concat_rows(d, s)?;
                let order: Vec<usize> = active
                    .iter()
                    .map(|j| match learned.binary_search(j) {
                        Ok(p) => p,
                        Err(_) => learned.len() + stored.binary_search(j).expect("stored entry"),
                    })
                    .collect();
                g.index_rows(both, &order)?
            }
            (None, None) => unreachable!("active set is non-empty"),
        };
        let effective = self.encoder.forward_graph(g, enc_p, images)?;

        // selector q(s_i | x_i)
        let x = g.constant(batch.parts.clone());
        let z = self.encoder.forward_graph(g, enc_p, x)?;
        let log_q = match selector_log_probs {
            Some(lq) => {
                if lq.shape() != [rows, m] {
                    return Err(ModelError::Shape(format!("selector override {:?}", lq.shape())));
                }
                g.constant(lq.clone())
            }
            None => {
                let logits = g.matmul_t(z, effective)?;
                g.log_softmax(logits)?
            }
        };
        let q = g.exp(log_q);

        // KL(q || uniform) = sum_j q_j (log q_j + log m)
        let shifted = g.add_scalar(log_q, T::lit((m as f64).ln()));
        let kl = g.mul(q, shifted)?;
        let kl = g.sum(kl);
        let regularization = g.scale(kl, T::lit(cfg.lambda_kl));

        // concept likelihood per (part, prototype)
        let concept_logits = self.concept_decoder.forward_graph(g, con_p, effective)?;
        let neg = g.scale(concept_logits, -T::one());
        let sp_neg = g.softplus(neg);
        let mut log_pi = g.scale(sp_neg, -T::one());
        let sp_pos = g.softplus(concept_logits);
        let mut log_not_pi = g.scale(sp_pos, -T::one());
        if active.iter().any(|&j| self.bank.entries[j].concept_override.is_some()) {
            let mut keep = Tensor::full(&[m, k], T::one());
            let mut fixed_pi = Tensor::zeros(&[m, k]);
            let mut fixed_not = Tensor::zeros(&[m, k]);
            let floor = T::lit(OVERRIDE_FLOOR);
            for (pos, &j) in active.iter().enumerate() {
                if let Some(bits) = &self.bank.entries[j].concept_override {
                    for (l, &bit) in bits.iter().enumerate() {
                        let p = if bit { T::one() } else { T::zero() };
                        keep.row_mut(pos)[l] = T::zero();
                        fixed_pi.row_mut(pos)[l] = p.max(floor).ln();
                        fixed_not.row_mut(pos)[l] = (T::one() - p).max(floor).ln();
                    }
                }
            }
            let keep = g.constant(keep);
            let fixed_pi = g.constant(fixed_pi);
            let fixed_not = g.constant(fixed_not);
            let kept = g.mul(log_pi, keep)?;
            log_pi = g.add(kept, fixed_pi)?;
            let kept = g.mul(log_not_pi, keep)?;
            log_not_pi = g.add(kept, fixed_not)?;
        }
        let mut pos_targets = batch.concepts.clone();
        for r in 0..rows {
            for (l, v) in pos_targets.row_mut(r).iter_mut().enumerate() {
                *v = *v * T::lit(cfg.pos_weights[l]);
            }
        }
        let neg_targets = batch.concepts.map(|c| T::one() - c);
        let pos_targets = g.constant(pos_targets);
        let neg_targets = g.constant(neg_targets);
        let ll_pos = g.matmul_t(pos_targets, log_pi)?;
        let ll_neg = g.matmul_t(neg_targets, log_not_pi)?;
        let ll = g.add(ll_pos, ll_neg)?;
        let weighted = g.mul(q, ll)?;
        let concept_ll = g.sum(weighted);
        let concept = g.scale(concept_ll, -T::one());

        // Gaussian reconstruction: ||x - mu||^2 / (2 sigma^2) + D/2 log(2 pi sigma^2)
        let dist = g.pairwise_sq_dist(x, images)?;
        let nll = g.scale(dist, T::lit(0.5 / cfg.sigma2));
        let log_norm = 0.5 * dim as f64 * (2.0 * std::f64::consts::PI * cfg.sigma2).ln();
        let nll = g.add_scalar(nll, T::lit(log_norm));
        let weighted = g.mul(q, nll)?;
        let recon = g.sum(weighted);
        let reconstruction = g.scale(recon, T::lit(cfg.lambda_rec));

        // task term on a constant input: gradients reach the task head only
        let pi = log_pi_to_probs(g.value(log_pi));
        let concept_probs = g.value(q).matmul(&pi, false)?;
        let task_input = match task_source {
            TaskSource::Observed => batch.concepts.clone().reshape(&[b, n * k])?,
            TaskSource::Fixed(t) => {
                if t.shape() != [b, n * k] {
                    return Err(ModelError::Shape(format!("task input {:?}", t.shape())));
                }
                t.clone()
            }
            TaskSource::RandInt { prob, rng } => {
                let threshold = T::lit(HARD_THRESHOLD);
                let predicted: Vec<bool> = concept_probs.data().iter().map(|&p| p > threshold).collect();
                let truth: Vec<bool> = batch.concepts.data().iter().map(|&c| c > T::lit(0.5)).collect();
                let mixed = randint_task_input(&predicted, &truth, prob, rng);
                let data = mixed.into_iter().map(|bit| if bit { T::one() } else { T::zero() }).collect();
                Tensor::new(vec![b, n * k], data)?
            }
        };
        let t_in = g.constant(task_input.clone());
        let task_logits = self.task_head.forward_graph(g, task_p, t_in)?;
        let task_log_probs = g.log_softmax(task_logits)?;
        let picked = g.gather(task_log_probs, &batch.task)?;
        let task_ll = g.sum(picked);
        let task = g.scale(task_ll, -T::one());

        let total = g.add(regularization, task)?;
        let total = g.add(total, concept)?;
        let total = g.add(total, reconstruction)?;
        Ok(ElboVars { total, regularization, task, concept, reconstruction, concept_probs, task_input })
    }

    /// Evaluates the negative ELBO terms without recording gradients.
    pub fn elbo(&self, batch: &Batch<T>, task_source: TaskSource<'_, T>) -> Result<ElboTerms<T>> {
        self.elbo_with_selector(batch, task_source, None)
    }

    /// As [`Pgcm::elbo`], with an explicit variational posterior.
    pub fn elbo_with_selector(
        &self,
        batch: &Batch<T>,
        task_source: TaskSource<'_, T>,
        selector_log_probs: Option<&Tensor<T>>,
    ) -> Result<ElboTerms<T>> {
        let mut g = Graph::new();
        let params: Vec<Var> = self.parameters().into_iter().map(|(_, t)| g.constant(t)).collect();
        let vars = self.elbo_graph(&mut g, &params, batch, task_source, selector_log_probs)?;
        Ok(vars.terms(&g))
    }
}

fn log_pi_to_probs<T: Real>(log_pi: &Tensor<T>) -> Tensor<T> {
    log_pi.map(|v| v.exp())
}

fn concat_all<T: Real>(g: &mut Graph<T>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.concat_rows(acc, v)?;
    }
    Ok(acc)
}
