//! C ABI over the `dualteacher` crate.
//!
//! Objects cross the boundary as opaque handles created by `dt_*_new` /
//! `dt_*_generate` / `dt_*_load` and released by the matching `dt_*_free`.
//! Every fallible function returns a [`DtStatus`]; on failure the message is
//! available from [`dt_last_error_message`] on the same thread. Panics never
//! unwind into the caller; they surface as [`DtStatus::Panic`].
//!
//! Images are row-major `f64` arrays of `height * width` values in `[0, 1]`,
//! label maps row-major `u8` arrays, probability maps class-major `f64`
//! arrays of `classes * height * width` values.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dualteacher::align::{Translator, TranslatorKind};
use dualteacher::checkpoint::Checkpoint;
use dualteacher::ema::EmaState;
use dualteacher::losses::{consistency_loss_grad, kd_loss_grad, lambda_con, seg_loss_grad, LossWeights};
use dualteacher::metrics::{dice_coefficient, predict_labels};
use dualteacher::phantom::{generate_dataset, load_dataset, make_folds, save_dataset, DatasetBundle, PhantomSpec};
use dualteacher::segnet::{Network, NetworkConfig, ParamEntry, ParamVector};
use dualteacher::tensor::{Image, LabelMap, ProbMap};
use dualteacher::trainer::{make_method_state, Method, TrainConfig, TrainState};
use dualteacher::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Io = 4,
    State = 5,
    Divergence = 6,
    Panic = 7,
}

/// Labeled/unlabeled/validation splits of one fold.
pub struct DtDataset {
    bundle: DatasetBundle,
}

/// A training run in progress; owns a copy of its dataset.
pub struct DtTrainer {
    state: TrainState<f32>,
    bundle: DatasetBundle,
}

pub struct DtNetwork {
    net: Network<f64>,
}

/// Exponential moving average over a flat parameter vector.
pub struct DtEma {
    state: EmaState<f64>,
}

pub struct DtTranslator {
    translator: Translator,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> DtStatus {
    match err {
        Error::Config(_) | Error::Input(_) | Error::Format(_) | Error::Report(_) => DtStatus::InvalidArgument,
        Error::Dimension(_) => DtStatus::Dimension,
        Error::State(_) => DtStatus::State,
        Error::Divergence(_) => DtStatus::Divergence,
        Error::Io { .. } | Error::MissingFile { .. } => DtStatus::Io,
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (DtStatus, String)>) -> DtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DtStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(&format!("internal panic: {msg}"));
            DtStatus::Panic
        }
    }
}

trait OrStatus<T> {
    fn status(self) -> Result<T, (DtStatus, String)>;
}

impl<T> OrStatus<T> for dualteacher::Result<T> {
    fn status(self) -> Result<T, (DtStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(what: &str) -> (DtStatus, String) {
    (DtStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (DtStatus, String) {
    (DtStatus::InvalidArgument, msg.into())
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (DtStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (DtStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (DtStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (DtStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (DtStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), (DtStatus, String)> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn checked_area(h: usize, w: usize) -> Result<usize, (DtStatus, String)> {
    h.checked_mul(w)
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid(format!("invalid image size {h}x{w}")))
}

unsafe fn prob_map(p: *const f64, classes: usize, h: usize, w: usize, what: &str) -> Result<ProbMap<f64>, (DtStatus, String)> {
    let n = checked_area(h, w)?
        .checked_mul(classes)
        .ok_or_else(|| invalid("probability map too large"))?;
    ProbMap::new(classes, h, w, slice(p, n, what)?.to_vec()).status()
}

unsafe fn label_map(p: *const u8, h: usize, w: usize, what: &str) -> Result<LabelMap, (DtStatus, String)> {
    let n = checked_area(h, w)?;
    LabelMap::new(h, w, slice(p, n, what)?.to_vec()).status()
}

/// Message describing the most recent failure on this thread; empty after a
/// success. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn dt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

// ---- datasets ----

/// Generates a phantom dataset and keeps fold `fold_index`.
#[no_mangle]
pub unsafe extern "C" fn dt_dataset_generate(
    seed: u64,
    n_source: usize,
    n_target: usize,
    n_folds: usize,
    labeled_frac: f64,
    image_size: usize,
    num_classes: usize,
    fold_index: usize,
    out: *mut *mut DtDataset,
) -> DtStatus {
    guard(|| {
        let spec = PhantomSpec::new(image_size, num_classes, seed);
        spec.validate().status()?;
        let samples = generate_dataset(&spec, n_source, n_target).status()?;
        let mut folds = make_folds(&samples, n_folds, labeled_frac, seed).status()?;
        if fold_index >= folds.len() {
            return Err(invalid(format!("fold {fold_index} out of range ({} folds)", folds.len())));
        }
        let mut bundle = folds.swap_remove(fold_index);
        bundle.spec = Some(spec);
        write_out(out, DtDataset { bundle })
    })
}

#[no_mangle]
pub unsafe extern "C" fn dt_dataset_load(dir: *const c_char, out: *mut *mut DtDataset) -> DtStatus {
    guard(|| {
        let bundle = load_dataset(&path_arg(dir, "dir")?).status()?;
        write_out(out, DtDataset { bundle })
    })
}

#[no_mangle]
pub unsafe extern "C" fn dt_dataset_save(dataset: *const DtDataset, dir: *const c_char) -> DtStatus {
    guard(|| {
        let d = as_ref(dataset, "dataset")?;
        save_dataset(&d.bundle, &path_arg(dir, "dir")?).status().map(|_| ())
    })
}

/// Sizes of the labeled source, labeled target, unlabeled target and
/// validation splits. Any output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn dt_dataset_counts(
    dataset: *const DtDataset,
    n_source: *mut usize,
    n_target: *mut usize,
    n_unlabeled: *mut usize,
    n_val: *mut usize,
) -> DtStatus {
    guard(|| {
        let b = &as_ref(dataset, "dataset")?.bundle;
        for (p, v) in [
            (n_source, b.d_s.len()),
            (n_target, b.d_t.len()),
            (n_unlabeled, b.d_u.len()),
            (n_val, b.val.len()),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dt_dataset_free(dataset: *mut DtDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

// ---- training ----

/// Starts a run of `method` (e.g. `"dual_teacher"`) with default
/// hyperparameters except for the given epoch count and learning rate.
#[no_mangle]
pub unsafe extern "C" fn dt_trainer_new(
    dataset: *const DtDataset,
    method: *const c_char,
    seed: u64,
    epochs: usize,
    learning_rate: f64,
    out: *mut *mut DtTrainer,
) -> DtStatus {
    guard(|| {
        let bundle = as_ref(dataset, "dataset")?.bundle.clone();
        if method.is_null() {
            return Err(null("method"));
        }
        let name = CStr::from_ptr(method).to_str().map_err(|_| invalid("method is not UTF-8"))?;
        let method: Method = name.parse().status()?;
        let mut config = TrainConfig::new(method, seed).with_epochs(epochs);
        config.learning_rate = learning_rate;
        if let Some(spec) = &bundle.spec {
            config.network.num_classes = spec.num_classes;
        }
        let state = make_method_state(&config, &bundle).status()?;
        write_out(out, DtTrainer { state, bundle })
    })
}

/// Runs one epoch; writes the validation mean Dice if `mean_dice` is non-null.
#[no_mangle]
pub unsafe extern "C" fn dt_trainer_run_epoch(trainer: *mut DtTrainer, mean_dice: *mut f64) -> DtStatus {
    guard(|| {
        let t = as_mut(trainer, "trainer")?;
        let record = t.state.run_epoch(&t.bundle).status()?;
        if let Some(p) = mean_dice.as_mut() {
            *p = record.mean_dice;
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dt_trainer_epoch(trainer: *const DtTrainer, epoch: *mut usize) -> DtStatus {
    guard(|| {
        let t = as_ref(trainer, "trainer")?;
        *as_mut(epoch, "epoch")? = t.state.epoch;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dt_trainer_save_checkpoint(trainer: *const DtTrainer, path: *const c_char) -> DtStatus {
    guard(|| {
        let t = as_ref(trainer, "trainer")?;
        Checkpoint::from_state(&t.state).save(&path_arg(path, "path")?).status()
    })
}

/// Copies the current student network into a new handle.
#[no_mangle]
pub unsafe extern "C" fn dt_trainer_student(trainer: *const DtTrainer, out: *mut *mut DtNetwork) -> DtStatus {
    guard(|| {
        let t = as_ref(trainer, "trainer")?;
        let student = &t.state.student;
        let mut net = Network::<f64>::build(student.config()).status()?;
        net.set_params(&student.params().cast()).status()?;
        net.set_buffers(&student.buffers().cast()).status()?;
        write_out(out, DtNetwork { net })
    })
}

#[no_mangle]
pub unsafe extern "C" fn dt_trainer_free(trainer: *mut DtTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

// ---- networks ----

/// A freshly initialized single-channel network with group normalization.
#[no_mangle]
pub unsafe extern "C" fn dt_network_new(
    num_classes: usize,
    base_channels: usize,
    depth: usize,
    seed: u64,
    out: *mut *mut DtNetwork,
) -> DtStatus {
    guard(|| {
        let config = NetworkConfig {
            num_classes,
            base_channels,
            depth,
            seed,
            ..NetworkConfig::default()
        };
        let net = Network::build(&config).status()?;
        write_out(out, DtNetwork { net })
    })
}

#[no_mangle]
pub unsafe extern "C" fn dt_network_param_count(network: *const DtNetwork, count: *mut usize) -> DtStatus {
    guard(|| {
        let n = as_ref(network, "network")?;
        *as_mut(count, "count")? = n.net.params().total_count();
        Ok(())
    })
}

/// Argmax segmentation of one image into `labels` (`height * width` bytes).
#[no_mangle]
pub unsafe extern "C" fn dt_network_predict(
    network: *const DtNetwork,
    image: *const f64,
    height: usize,
    width: usize,
    labels: *mut u8,
) -> DtStatus {
    guard(|| {
        let n = as_ref(network, "network")?;
        let area = checked_area(height, width)?;
        let img = Image::new(height, width, slice(image, area, "image")?.to_vec()).status()?;
        n.net.config().check_input_size(height, width).status()?;
        let pred = predict_labels(&n.net, &[&img]).status()?;
        slice_mut(labels, area, "labels")?.copy_from_slice(&pred[0].data);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dt_network_free(network: *mut DtNetwork) {
    if !network.is_null() {
        drop(Box::from_raw(network));
    }
}

// ---- EMA teacher ----

fn flat(values: Vec<f64>) -> ParamVector<f64> {
    ParamVector {
        entries: vec![ParamEntry {
            name: "params".into(),
            shape: vec![values.len()],
            offset: 0,
            len: values.len(),
        }],
        values,
    }
}

/// Teacher initialized as a copy of `params`, decaying with `alpha`.
#[no_mangle]
pub unsafe extern "C" fn dt_ema_new(params: *const f64, len: usize, alpha: f64, out: *mut *mut DtEma) -> DtStatus {
    guard(|| {
        let p = flat(slice(params, len, "params")?.to_vec());
        let state = EmaState::init(&p, alpha).status()?;
        write_out(out, DtEma { state })
    })
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`.
#[no_mangle]
pub unsafe extern "C" fn dt_ema_update(ema: *mut DtEma, student: *const f64, len: usize) -> DtStatus {
    guard(|| {
        let e = as_mut(ema, "ema")?;
        let s = flat(slice(student, len, "student")?.to_vec());
        e.state.update(&s).status()
    })
}

#[no_mangle]
pub unsafe extern "C" fn dt_ema_params(ema: *const DtEma, out: *mut f64, len: usize) -> DtStatus {
    guard(|| {
        let e = as_ref(ema, "ema")?;
        let v = &e.state.teacher_params.values;
        if len != v.len() {
            return Err((DtStatus::Dimension, format!("buffer holds {len} values, teacher has {}", v.len())));
        }
        slice_mut(out, len, "out")?.copy_from_slice(v);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dt_ema_step(ema: *const DtEma, step: *mut u64) -> DtStatus {
    guard(|| {
        let e = as_ref(ema, "ema")?;
        *as_mut(step, "step")? = e.state.step;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dt_ema_free(ema: *mut DtEma) {
    if !ema.is_null() {
        drop(Box::from_raw(ema));
    }
}

// ---- appearance alignment ----

/// Histogram-matching translator fitted on the dataset's target-domain
/// training images (labeled and unlabeled).
#[no_mangle]
pub unsafe extern "C" fn dt_translator_fit(dataset: *const DtDataset, out: *mut *mut DtTranslator) -> DtStatus {
    guard(|| {
        let b = &as_ref(dataset, "dataset")?.bundle;
        let images: Vec<&Image> = b.d_t.iter().chain(&b.d_u).map(|s| &s.image).collect();
        let translator = Translator::fit(&images, TranslatorKind::HistogramMatch).status()?;
        write_out(out, DtTranslator { translator })
    })
}

#[no_mangle]
pub unsafe extern "C" fn dt_translator_apply(
    translator: *const DtTranslator,
    image: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
) -> DtStatus {
    guard(|| {
        let t = as_ref(translator, "translator")?;
        let area = checked_area(height, width)?;
        let img = Image::new(height, width, slice(image, area, "image")?.to_vec()).status()?;
        let res = t.translator.translate(&img).status()?;
        slice_mut(out, area, "out")?.copy_from_slice(&res.data);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dt_translator_free(translator: *mut DtTranslator) {
    if !translator.is_null() {
        drop(Box::from_raw(translator));
    }
}

// ---- losses and metrics ----

/// Consistency weight at epoch `t` with the default schedule over `t_max` epochs.
#[no_mangle]
pub unsafe extern "C" fn dt_lambda_con(t: f64, t_max: usize, out: *mut f64) -> DtStatus {
    guard(|| {
        if t_max == 0 || !t.is_finite() {
            return Err(invalid("need t_max >= 1 and a finite t"));
        }
        let w = LossWeights {
            t_max,
            ..LossWeights::default()
        };
        *as_mut(out, "out")? = lambda_con(t, &w);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dt_dice_coefficient(
    pred: *const u8,
    truth: *const u8,
    height: usize,
    width: usize,
    class_id: u8,
    out: *mut f64,
) -> DtStatus {
    guard(|| {
        let p = label_map(pred, height, width, "pred")?;
        let t = label_map(truth, height, width, "truth")?;
        *as_mut(out, "out")? = dice_coefficient(&p, &t, class_id).status()?;
        Ok(())
    })
}

unsafe fn write_grad(grad: *mut f64, g: &ProbMap<f64>) -> Result<(), (DtStatus, String)> {
    if !grad.is_null() {
        slice_mut(grad, g.data.len(), "grad")?.copy_from_slice(&g.data);
    }
    Ok(())
}

/// Cross-entropy plus soft Dice (background included). `grad`, if non-null,
/// receives the gradient with respect to `probs`.
#[no_mangle]
pub unsafe extern "C" fn dt_seg_loss(
    probs: *const f64,
    target: *const u8,
    classes: usize,
    height: usize,
    width: usize,
    value: *mut f64,
    grad: *mut f64,
) -> DtStatus {
    guard(|| {
        let p = prob_map(probs, classes, height, width, "probs")?;
        let t = label_map(target, height, width, "target")?;
        let lg = seg_loss_grad(&p, &t, true, None).status()?;
        *as_mut(value, "value")? = lg.value;
        write_grad(grad, &lg.grad)
    })
}

/// Soft-target cross-entropy from `teacher` to `student`; `grad` is with
/// respect to the student map.
#[no_mangle]
pub unsafe extern "C" fn dt_kd_loss(
    teacher: *const f64,
    student: *const f64,
    classes: usize,
    height: usize,
    width: usize,
    value: *mut f64,
    grad: *mut f64,
) -> DtStatus {
    guard(|| {
        let t = prob_map(teacher, classes, height, width, "teacher")?;
        let s = prob_map(student, classes, height, width, "student")?;
        let pg = kd_loss_grad(&t, &s).status()?;
        *as_mut(value, "value")? = pg.value;
        write_grad(grad, &pg.student)
    })
}

/// Mean squared difference between student and teacher maps; `grad` is with
/// respect to the student map.
#[no_mangle]
pub unsafe extern "C" fn dt_consistency_loss(
    student: *const f64,
    teacher: *const f64,
    classes: usize,
    height: usize,
    width: usize,
    value: *mut f64,
    grad: *mut f64,
) -> DtStatus {
    guard(|| {
        let s = prob_map(student, classes, height, width, "student")?;
        let t = prob_map(teacher, classes, height, width, "teacher")?;
        let pg = consistency_loss_grad(&s, &t).status()?;
        *as_mut(value, "value")? = pg.value;
        write_grad(grad, &pg.student)
    })
}

/// Null-terminated method name for index `i` of the eight supported
/// methods, or null when out of range. The string is static.
#[no_mangle]
pub extern "C" fn dt_method_name(i: usize) -> *const c_char {
    const NAMES: [&CStr; 8] = [
        c"supervised_only",
        c"joint_training",
        c"gan_baseline",
        c"pseudo_label_baseline",
        c"mean_teacher",
        c"no_inter_teacher",
        c"no_intra_teacher",
        c"dual_teacher",
    ];
    NAMES.get(i).map_or(ptr::null(), |s| s.as_ptr())
}
