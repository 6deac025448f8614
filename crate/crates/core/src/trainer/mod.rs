//! Training loop for the dual-teacher framework and its baselines.
//!
//! Every method is one wiring of the same three optional components around
//! the student: an inter-domain teacher (trained on translated source images,
//! distilled into the student), an intra-domain teacher (EMA of the student,
//! consistency on unlabeled target images) and a source-to-target translator.

mod method;
mod pseudo;
mod streams;

pub use method::{Method, SourceView, TrainConfig, TABLE1_SUITE, TABLE2_SUITE};
pub use pseudo::{generate_pseudo_labels, pseudo_label_from_probs, PseudoLabel};
pub use streams::{batches_per_pass, StreamCursor};

use serde::{Deserialize, Serialize};

use crate::align::Translator;
use crate::ema::EmaState;
use crate::error::{Error, Result};
use crate::float::Real;
use crate::losses::{consistency_loss_grad, kd_loss_grad, lambda_con, seg_loss_grad, student_total_loss};
use crate::metrics::{evaluate_model, MetricsRecord};
use crate::optim::Adam;
use crate::phantom::{DatasetBundle, DomainSample};
use crate::rng::{self, streams as rs, Rng};
use crate::segnet::{augment, perturb, softmax, softmax_backward, Network};
use crate::tensor::{Image, LabelMap, ProbMap, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub images: Vec<Image>,
    pub labels: Vec<LabelMap>,
    /// Per-image pixel masks; `None` means every pixel counts.
    pub masks: Option<Vec<Vec<bool>>>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn concat(mut self, other: LabeledBatch) -> LabeledBatch {
        assert!(self.masks.is_none() && other.masks.is_none());
        self.images.extend(other.images);
        self.labels.extend(other.labels);
        self
    }
}

/// Inputs of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBatches {
    /// Source images as the method sees them (translated where a translator
    /// is in use), already augmented.
    pub source: Option<LabeledBatch>,
    pub target: LabeledBatch,
    pub unlabeled: Option<Vec<Image>>,
    pub pseudo: Option<LabeledBatch>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub inter_seg: Option<f64>,
    pub seg: f64,
    pub kd: f64,
    pub con: f64,
    pub pseudo: f64,
    pub lambda_con: f64,
    /// `seg + lambda_kd * kd + lambda_con * con + pseudo`.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub method: Method,
    pub seed: u64,
    pub fold: usize,
    pub steps: usize,
    /// Step losses averaged over the epoch.
    pub losses: StepLosses,
    pub per_class_dice: Vec<f64>,
    pub mean_dice: f64,
    pub degenerate: usize,
}

impl EpochRecord {
    pub fn to_metrics(&self, n_images: usize) -> MetricsRecord {
        MetricsRecord {
            method: self.method.name().to_string(),
            seed: self.seed,
            fold: self.fold,
            n_images,
            per_class_dice: self.per_class_dice.clone(),
            mean_dice: self.mean_dice,
            degenerate: self.degenerate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestEpoch {
    pub epoch: usize,
    pub mean_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cursors {
    pub source: Option<StreamCursor>,
    pub target: StreamCursor,
    pub unlabeled: Option<StreamCursor>,
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub fold: usize,
    pub student: Network<T>,
    pub student_opt: Adam<T>,
    pub inter_teacher: Option<Network<T>>,
    pub inter_opt: Option<Adam<T>>,
    pub ema_state: Option<EmaState<T>>,
    pub translator: Option<Translator>,
    /// Completed epochs.
    pub epoch: usize,
    pub steps_per_epoch: usize,
    pub metrics_log: Vec<EpochRecord>,
    pub best: Option<BestEpoch>,
    pub cursors: Cursors,
    pub noise_rng: Rng,
    pub augment_rng: Rng,
    /// Scratch network holding the EMA weights for forward passes.
    ema_net: Option<Network<T>>,
    pseudo_labels: Option<Vec<PseudoLabel>>,
    /// Source images in the form the method consumes them.
    source_images: Vec<Image>,
}

fn missing_streams(method: Method, bundle: &DatasetBundle) -> Vec<&'static str> {
    let mut missing = Vec::new();
    if method.uses_source() && bundle.d_s.is_empty() {
        missing.push("d_s");
    }
    if bundle.d_t.is_empty() {
        missing.push("d_t");
    }
    if method.uses_unlabeled() && bundle.d_u.is_empty() {
        missing.push("d_u");
    }
    if bundle.val.is_empty() {
        missing.push("val");
    }
    missing
}

fn check_bundle(config: &TrainConfig, bundle: &DatasetBundle) -> Result<()> {
    bundle.validate_structure()?;
    let missing = missing_streams(config.method, bundle);
    if !missing.is_empty() {
        return Err(Error::config(format!(
            "method {} needs non-empty streams; empty: {}",
            config.method,
            missing.join(", ")
        )));
    }
    let classes = config.network.num_classes;
    for s in bundle.all_samples() {
        config.network.check_input_size(s.image.height, s.image.width)?;
        if let Some(c) = s.label.as_ref().and_then(|l| l.max_class()) {
            if c as usize >= classes {
                return Err(Error::config(format!(
                    "sample `{}` has class {c} but the network predicts {classes} classes",
                    s.id
                )));
            }
        }
    }
    Ok(())
}

fn images_of(samples: &[DomainSample]) -> Vec<&Image> {
    samples.iter().map(|s| &s.image).collect()
}

fn steps_per_epoch(config: &TrainConfig, bundle: &DatasetBundle) -> usize {
    let m = config.method;
    let mut steps = batches_per_pass(bundle.d_t.len(), config.batch_target);
    if m.uses_source() {
        steps = steps.max(batches_per_pass(bundle.d_s.len(), config.batch_source));
    }
    if m.uses_unlabeled() {
        steps = steps.max(batches_per_pass(bundle.d_u.len(), config.batch_unlabeled));
    }
    steps
}

/// Builds the components the method needs and nothing else.
pub fn make_method_state<T: Real>(config: &TrainConfig, bundle: &DatasetBundle) -> Result<TrainState<T>> {
    config.validate()?;
    check_bundle(config, bundle)?;
    let m = config.method;
    if !m.uses_source() && !bundle.d_s.is_empty() {
        log::warn!("{m} ignores the {} source samples", bundle.d_s.len());
    }
    if !m.uses_unlabeled() && !bundle.d_u.is_empty() {
        log::info!("{m} ignores the {} unlabeled samples", bundle.d_u.len());
    }

    let student = Network::<T>::build(&config.student_network())?;
    let n = student.params().total_count();
    let adam = |n| {
        let mut a = Adam::new(n, config.learning_rate);
        a.beta1 = config.adam_beta1;
        a.beta2 = config.adam_beta2;
        a
    };
    let student_opt = adam(n);
    let (inter_teacher, inter_opt) = if m.has_inter_teacher() {
        let t = Network::<T>::build(&config.inter_teacher_network())?;
        let o = adam(t.params().total_count());
        (Some(t), Some(o))
    } else {
        (None, None)
    };
    let (ema_state, ema_net) = if m.has_intra_teacher() {
        let e = EmaState::init_with_buffers(student.params(), student.buffers(), config.ema_alpha)?;
        (Some(e), Some(student.clone()))
    } else {
        (None, None)
    };
    let translator = if m.uses_translator() {
        let target: Vec<&Image> = images_of(&bundle.d_t).into_iter().chain(images_of(&bundle.d_u)).collect();
        Some(Translator::fit(&target, config.translator)?)
    } else {
        None
    };
    let source_images = if m.uses_source() {
        match &translator {
            Some(tr) => bundle.d_s.iter().map(|s| tr.translate(&s.image)).collect::<Result<_>>()?,
            None => bundle.d_s.iter().map(|s| s.image.clone()).collect(),
        }
    } else {
        Vec::new()
    };

    let steps = steps_per_epoch(config, bundle);
    let order = |stream: u64| rng::item_stream(config.seed, rs::DATA_ORDER, stream);
    let cursors = Cursors {
        source: m
            .uses_source()
            .then(|| StreamCursor::new(bundle.d_s.len(), config.batch_source, steps, order(0))),
        target: StreamCursor::new(bundle.d_t.len(), config.batch_target, steps, order(1)),
        unlabeled: m
            .uses_unlabeled()
            .then(|| StreamCursor::new(bundle.d_u.len(), config.batch_unlabeled, steps, order(2))),
    };

    Ok(TrainState {
        config: config.clone(),
        fold: bundle.fold_index,
        student,
        student_opt,
        inter_teacher,
        inter_opt,
        ema_state,
        translator,
        epoch: 0,
        steps_per_epoch: steps,
        metrics_log: Vec::new(),
        best: None,
        cursors,
        noise_rng: rng::stream(config.seed, rs::NOISE),
        augment_rng: rng::stream(config.seed, rs::AUGMENT),
        ema_net,
        pseudo_labels: None,
        source_images,
    })
}

fn to_f64<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

fn finite(phase: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence(format!("{phase} loss is {v}")))
    }
}

fn image_tensor<T: Real>(images: &[Image]) -> Result<Tensor<T>> {
    let refs: Vec<&Image> = images.iter().collect();
    Tensor::from_images(&refs)
}

/// One training-mode pass of `net` on `x`. `loss` maps the batch of
/// probability maps to the batch-mean loss and its gradient; the gradient is
/// scaled by `weight` and accumulated into `grads`. A zero weight skips the
/// backward pass, which would only add exact zeros.
fn accumulate<T: Real>(
    net: &mut Network<T>,
    x: &Tensor<T>,
    weight: f64,
    grads: &mut [T],
    loss: impl FnOnce(&Tensor<T>) -> Result<(f64, Tensor<T>)>,
) -> Result<f64> {
    let (logits, trace) = net.forward_train(x)?;
    let probs = softmax(&logits)?;
    let (value, mut gp) = loss(&probs)?;
    if weight != 0.0 && value.is_finite() {
        let w = T::lit(weight);
        gp.data.iter_mut().for_each(|g| *g *= w);
        let gl = softmax_backward(&probs, &gp)?;
        net.backward(&trace, &gl, grads)?;
    }
    Ok(value)
}

/// Batch mean of the per-image segmentation loss.
fn seg_batch<T: Real>(probs: &Tensor<T>, batch: &LabeledBatch, include_bg: bool) -> Result<(f64, Tensor<T>)> {
    let n = T::from_usize(batch.len()).unwrap();
    let mut total = T::zero();
    let mut maps = Vec::with_capacity(batch.len());
    for (i, label) in batch.labels.iter().enumerate() {
        let mask = batch.masks.as_ref().map(|m| m[i].as_slice());
        let lg = seg_loss_grad(&probs.prob_map(i), label, include_bg, mask)?;
        total += lg.value;
        let mut g = lg.grad;
        g.data.iter_mut().for_each(|v| *v /= n);
        maps.push(g);
    }
    Ok((to_f64(total / n), Tensor::from_prob_maps(&maps)?))
}

/// Batch mean of a two-distribution loss whose first argument is the student.
fn pair_batch<T: Real>(
    student: &Tensor<T>,
    other: &Tensor<T>,
    f: impl Fn(&ProbMap<T>, &ProbMap<T>) -> Result<(T, ProbMap<T>)>,
) -> Result<(f64, Tensor<T>)> {
    let n = T::from_usize(student.n).unwrap();
    let mut total = T::zero();
    let mut maps = Vec::with_capacity(student.n);
    for i in 0..student.n {
        let (v, mut g) = f(&student.prob_map(i), &other.prob_map(i))?;
        total += v;
        g.data.iter_mut().for_each(|x| *x /= n);
        maps.push(g);
    }
    Ok((to_f64(total / n), Tensor::from_prob_maps(&maps)?))
}

fn labeled(s: &DomainSample) -> &LabelMap {
    s.label.as_ref().expect("labeled stream checked at construction")
}

fn augment_batch<'a>(
    items: impl Iterator<Item = (&'a Image, &'a LabelMap)>,
    cfg: &crate::segnet::AugmentConfig,
    rng: &mut Rng,
) -> LabeledBatch {
    let (images, labels) = items.map(|(im, lb)| augment(im, lb, cfg, rng)).unzip();
    LabeledBatch {
        images,
        labels,
        masks: None,
    }
}

fn perturb_all(images: &[Image], sigma: f64, rng: &mut Rng) -> Result<Vec<Image>> {
    images.iter().map(|im| perturb(im, sigma, rng)).collect()
}

impl<T: Real> TrainState<T> {
    /// Current epoch number `t` (1-based) as seen by the ramp-up.
    pub fn current_epoch(&self) -> usize {
        self.epoch + 1
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn update_ema(&mut self) -> Result<()> {
        if let Some(ema) = &mut self.ema_state {
            ema.update_with_buffers(self.student.params(), Some(self.student.buffers()))?;
        }
        Ok(())
    }

    /// Intra-domain teacher as a network, for evaluation and inspection.
    pub fn intra_teacher_network(&self) -> Option<Network<T>> {
        let ema = self.ema_state.as_ref()?;
        let mut net = self.student.clone();
        net.set_params(&ema.teacher_params).ok()?;
        if ema.teacher_buffers.total_count() > 0 {
            net.set_buffers(&ema.teacher_buffers).ok()?;
        }
        Some(net)
    }

    /// One optimization step: inter-teacher phase, EMA phase, student phase
    /// (the EMA phase moves last when `ema_after_student` is set).
    pub fn train_step(&mut self, batches: &StepBatches) -> Result<StepLosses> {
        let cfg = self.config.clone();
        let m = cfg.method;
        let w = &cfg.loss_weights;
        let include_bg = w.dice_include_background;
        if batches.target.is_empty() {
            return Err(Error::Input("target batch is empty".into()));
        }
        let mut out = StepLosses::default();

        // Inter-domain teacher on translated source images.
        let mut x_st: Option<Tensor<T>> = None;
        if let Some(teacher) = &mut self.inter_teacher {
            let src = batches
                .source
                .as_ref()
                .filter(|b| !b.is_empty())
                .ok_or_else(|| Error::State("inter-domain teacher step needs a source batch".into()))?;
            let opt = self
                .inter_opt
                .as_mut()
                .ok_or_else(|| Error::State("inter-domain teacher has no optimizer".into()))?;
            let x = image_tensor::<T>(&src.images)?;
            let mut grads = vec![T::zero(); teacher.params().total_count()];
            let v = accumulate(teacher, &x, 1.0, &mut grads, |p| seg_batch(p, src, include_bg))?;
            out.inter_seg = Some(finite("inter-teacher segmentation", v)?);
            opt.step(&mut teacher.params_mut().values, &grads)?;
            x_st = Some(x);
        }

        if !cfg.ema_after_student {
            self.update_ema()?;
        }

        let mut grads = vec![T::zero(); self.student.params().total_count()];

        let labeled = match (m.student_source(), &batches.source) {
            (Some(_), Some(src)) => batches.target.clone().concat(src.clone()),
            (Some(_), None) => return Err(Error::State(format!("{m} needs a source batch"))),
            (None, _) => batches.target.clone(),
        };
        let x = image_tensor::<T>(&labeled.images)?;
        out.seg = finite(
            "student segmentation",
            accumulate(&mut self.student, &x, 1.0, &mut grads, |p| seg_batch(p, &labeled, include_bg))?,
        )?;

        if let Some(teacher) = &self.inter_teacher {
            let x = x_st.as_ref().expect("set in the inter-teacher phase");
            let p_teacher = softmax(&teacher.forward(x)?)?;
            let v = accumulate(&mut self.student, x, w.lambda_kd, &mut grads, |p| {
                pair_batch(p, &p_teacher, |s, t| {
                    let g = kd_loss_grad(t, s)?;
                    Ok((g.value, g.student))
                })
            })?;
            out.kd = finite("knowledge distillation", v)?;
        }

        out.lambda_con = lambda_con(self.current_epoch() as f64, w);
        if let Some(ema) = &self.ema_state {
            let u = batches
                .unlabeled
                .as_ref()
                .filter(|u| !u.is_empty())
                .ok_or_else(|| Error::State("consistency term needs an unlabeled batch".into()))?;
            let xs = image_tensor::<T>(&perturb_all(u, cfg.noise_sigma, &mut self.noise_rng)?)?;
            let xt = image_tensor::<T>(&perturb_all(u, cfg.noise_sigma, &mut self.noise_rng)?)?;
            let ema_net = self.ema_net.as_mut().expect("present with the EMA state");
            ema_net.params_mut().values.copy_from_slice(&ema.teacher_params.values);
            ema_net.buffers_mut().values.copy_from_slice(&ema.teacher_buffers.values);
            let p_teacher = softmax(&ema_net.forward(&xt)?)?;
            let v = accumulate(&mut self.student, &xs, out.lambda_con, &mut grads, |p| {
                pair_batch(p, &p_teacher, |s, t| {
                    let g = consistency_loss_grad(s, t)?;
                    Ok((g.value, g.student))
                })
            })?;
            out.con = finite("consistency", v)?;
        }

        if let Some(pl) = batches.pseudo.as_ref().filter(|b| !b.is_empty()) {
            let x = image_tensor::<T>(&pl.images)?;
            out.pseudo = finite(
                "pseudo-label segmentation",
                accumulate(&mut self.student, &x, 1.0, &mut grads, |p| seg_batch(p, pl, include_bg))?,
            )?;
        }

        out.total = student_total_loss(out.seg, out.kd, out.con, self.current_epoch() as f64, w)? + out.pseudo;
        self.student_opt.step(&mut self.student.params_mut().values, &grads)?;
        if let Some(name) = self.student.params().first_non_finite() {
            return Err(Error::Divergence(format!("student parameter `{name}` became non-finite")));
        }

        if cfg.ema_after_student {
            self.update_ema()?;
        }
        Ok(out)
    }

    fn draw_batches(&mut self, bundle: &DatasetBundle) -> StepBatches {
        let t_idx = self.cursors.target.next_batch();
        let s_idx = self.cursors.source.as_mut().map(|c| c.next_batch());
        let u_idx = self.cursors.unlabeled.as_mut().map(|c| c.next_batch());

        let cfg = &self.config.augment;
        let rng = &mut self.augment_rng;
        let target = augment_batch(t_idx.iter().map(|&i| (&bundle.d_t[i].image, labeled(&bundle.d_t[i]))), cfg, rng);
        let source = s_idx.map(|idx| {
            augment_batch(
                idx.iter().map(|&i| (&self.source_images[i], labeled(&bundle.d_s[i]))),
                cfg,
                rng,
            )
        });
        let unlabeled = u_idx
            .as_ref()
            .map(|idx| idx.iter().map(|&i| bundle.d_u[i].image.clone()).collect());
        let pseudo = match (&self.pseudo_labels, &u_idx) {
            (Some(pl), Some(idx)) => Some(LabeledBatch {
                images: idx.iter().map(|&i| pl[i].image.clone()).collect(),
                labels: idx.iter().map(|&i| pl[i].label.clone()).collect(),
                masks: Some(idx.iter().map(|&i| pl[i].mask.clone()).collect()),
            }),
            _ => None,
        };
        StepBatches {
            source,
            target,
            unlabeled,
            pseudo,
        }
    }

    /// Runs one epoch and validates the student.
    pub fn run_epoch(&mut self, bundle: &DatasetBundle) -> Result<EpochRecord> {
        if self.is_finished() {
            return Err(Error::State(format!("all {} epochs already ran", self.config.epochs)));
        }
        let t = self.current_epoch();
        self.pseudo_labels = if self.config.method.uses_pseudo_labels() && t > self.config.warmup() {
            let images: Vec<Image> = bundle.d_u.iter().map(|s| s.image.clone()).collect();
            Some(generate_pseudo_labels(&self.student, &images, self.config.pseudo_label_threshold)?)
        } else {
            None
        };

        self.cursors.target.start_epoch();
        for c in [&mut self.cursors.source, &mut self.cursors.unlabeled].into_iter().flatten() {
            c.start_epoch();
        }

        let mut sum = StepLosses::default();
        let mut inter_sum = 0.0;
        for _ in 0..self.steps_per_epoch {
            let batches = self.draw_batches(bundle);
            let l = self.train_step(&batches)?;
            sum.seg += l.seg;
            sum.kd += l.kd;
            sum.con += l.con;
            sum.pseudo += l.pseudo;
            sum.total += l.total;
            inter_sum += l.inter_seg.unwrap_or(0.0);
        }
        let k = self.steps_per_epoch as f64;
        let losses = StepLosses {
            inter_seg: self.inter_teacher.as_ref().map(|_| inter_sum / k),
            seg: sum.seg / k,
            kd: sum.kd / k,
            con: sum.con / k,
            pseudo: sum.pseudo / k,
            lambda_con: lambda_con(t as f64, &self.config.loss_weights),
            total: sum.total / k,
        };

        let val = evaluate_model(&self.student, &bundle.val)?;
        let record = EpochRecord {
            epoch: t,
            method: self.config.method,
            seed: self.config.seed,
            fold: self.fold,
            steps: self.steps_per_epoch,
            losses,
            per_class_dice: val.per_class_dice,
            mean_dice: val.mean_dice,
            degenerate: val.degenerate,
        };
        if self.best.is_none_or(|b| record.mean_dice > b.mean_dice) {
            self.best = Some(BestEpoch {
                epoch: t,
                mean_dice: record.mean_dice,
            });
        }
        self.epoch = t;
        self.metrics_log.push(record.clone());
        Ok(record)
    }

    /// Runs the remaining epochs, calling `observer` after each one.
    pub fn run(
        &mut self,
        bundle: &DatasetBundle,
        mut observer: impl FnMut(&TrainState<T>, &EpochRecord) -> Result<()>,
    ) -> Result<()> {
        while !self.is_finished() {
            let record = self.run_epoch(bundle)?;
            observer(self, &record)?;
        }
        Ok(())
    }

    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.metrics_log.last()
    }
}

/// Checks that the state carries the dual-teacher components, then steps.
pub fn train_step_dual_teacher<T: Real>(state: &mut TrainState<T>, batches: &StepBatches) -> Result<StepLosses> {
    let mut missing = Vec::new();
    if state.inter_teacher.is_none() {
        missing.push("inter-domain teacher");
    }
    if state.ema_state.is_none() {
        missing.push("intra-domain teacher");
    }
    if state.translator.is_none() {
        missing.push("translator");
    }
    if !missing.is_empty() {
        return Err(Error::State(format!("dual-teacher step without {}", missing.join(", "))));
    }
    if batches.source.as_ref().is_none_or(|b| b.is_empty()) || batches.unlabeled.as_ref().is_none_or(|u| u.is_empty()) {
        return Err(Error::Input("dual-teacher step needs source, target and unlabeled batches".into()));
    }
    state.train_step(batches)
}

/// Trains for `config.epochs` epochs entirely in memory.
pub fn train<T: Real>(config: &TrainConfig, bundle: &DatasetBundle) -> Result<TrainState<T>> {
    let mut state = make_method_state(config, bundle)?;
    state.run(bundle, |_, r| {
        log::info!("{} epoch {}: loss {:.4} dice {:.4}", r.method, r.epoch, r.losses.total, r.mean_dice);
        Ok(())
    })?;
    Ok(state)
}

impl<T: Real> TrainState<T> {
    pub fn snapshot(&self) -> StateSnapshot<T> {
        StateSnapshot {
            config: self.config.clone(),
            fold: self.fold,
            student: self.student.clone(),
            student_opt: self.student_opt.clone(),
            inter_teacher: self.inter_teacher.clone(),
            inter_opt: self.inter_opt.clone(),
            ema_state: self.ema_state.clone(),
            epoch: self.epoch,
            metrics_log: self.metrics_log.clone(),
            best: self.best,
            cursors: self.cursors.clone(),
            noise_rng: self.noise_rng.clone(),
            augment_rng: self.augment_rng.clone(),
        }
    }

    /// Inverse of [`TrainState::snapshot`]. The bundle must be the one the
    /// run started with; translator, translated images and cursors' data
    /// sizes are rebuilt from it.
    pub fn restore(snapshot: StateSnapshot<T>, bundle: &DatasetBundle) -> Result<Self> {
        let mut state = make_method_state::<T>(&snapshot.config, bundle)?;
        if snapshot.fold != bundle.fold_index {
            return Err(Error::State(format!(
                "snapshot is for fold {}, bundle is fold {}",
                snapshot.fold, bundle.fold_index
            )));
        }
        if snapshot.epoch > snapshot.config.epochs {
            return Err(Error::State("snapshot epoch exceeds the configured epochs".into()));
        }
        let same = |a: bool, what: &str| {
            if a {
                Ok(())
            } else {
                Err(Error::State(format!("snapshot {what} does not match the method")))
            }
        };
        same(snapshot.inter_teacher.is_some() == state.inter_teacher.is_some(), "inter-domain teacher")?;
        same(snapshot.ema_state.is_some() == state.ema_state.is_some(), "intra-domain teacher")?;
        same(
            snapshot.cursors.source.is_some() == state.cursors.source.is_some()
                && snapshot.cursors.unlabeled.is_some() == state.cursors.unlabeled.is_some(),
            "stream layout",
        )?;
        state.student.set_params(snapshot.student.params())?;
        state.student.set_buffers(snapshot.student.buffers())?;
        state.student_opt = snapshot.student_opt;
        if let (Some(dst), Some(src)) = (&mut state.inter_teacher, &snapshot.inter_teacher) {
            dst.set_params(src.params())?;
            dst.set_buffers(src.buffers())?;
        }
        state.inter_opt = snapshot.inter_opt;
        state.ema_state = snapshot.ema_state;
        state.epoch = snapshot.epoch;
        state.metrics_log = snapshot.metrics_log;
        state.best = snapshot.best;
        state.cursors = snapshot.cursors;
        state.noise_rng = snapshot.noise_rng;
        state.augment_rng = snapshot.augment_rng;
        Ok(state)
    }
}

/// Everything needed to continue a run at an epoch boundary.
#[derive(Debug, Clone)]
pub struct StateSnapshot<T> {
    pub config: TrainConfig,
    pub fold: usize,
    pub student: Network<T>,
    pub student_opt: Adam<T>,
    pub inter_teacher: Option<Network<T>>,
    pub inter_opt: Option<Adam<T>>,
    pub ema_state: Option<EmaState<T>>,
    pub epoch: usize,
    pub metrics_log: Vec<EpochRecord>,
    pub best: Option<BestEpoch>,
    pub cursors: Cursors,
    pub noise_rng: Rng,
    pub augment_rng: Rng,
}
