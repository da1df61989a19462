//! C ABI over the fedmoe simulator.
//!
//! Objects cross the boundary as opaque handles returned through out-pointers
//! and released with the matching `fm_*_free`. Every
//! fallible call returns an [`FmStatus`]; on failure the message is kept per
//! thread and can be copied out with [`fm_last_error`]. Panics are caught at
//! the boundary and reported as `FM_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use fedmoe::cli::checkpoint::{load_global, save_global};
use fedmoe::data::{dirichlet_partition, load_idx, make_synthetic_split, pad_to_32, ClientPartition, PartitionSpec};
use fedmoe::data::{LabeledDataset, SyntheticSpec};
use fedmoe::evaluation::{class_ratios, global_test, local_test};
use fedmoe::federation::{train_federated, FedConfig, GlobalCheckpoint, Weighting};
use fedmoe::numerics::SgdConfig;
use fedmoe::personalization::{personalize_client, Algorithm, LocalConfig, PersonalizationConfig, PersonalizedClient};
use fedmoe::{build_model, Error, ModelParams, ModelSpec, Predictor, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Input = 4,
    Usage = 5,
    Config = 6,
    Format = 7,
    DegenerateClient = 8,
    Evaluation = 9,
    Schema = 10,
    Io = 11,
    Panic = 12,
}

/// Personalization algorithm selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FmAlgorithm {
    Local = 0,
    PflFt = 1,
    PflFb = 2,
    PflMf = 3,
    PflMfe = 4,
}

impl From<FmAlgorithm> for Algorithm {
    fn from(a: FmAlgorithm) -> Self {
        match a {
            FmAlgorithm::Local => Algorithm::Local,
            FmAlgorithm::PflFt => Algorithm::PflFt,
            FmAlgorithm::PflFb => Algorithm::PflFb,
            FmAlgorithm::PflMf => Algorithm::PflMf,
            FmAlgorithm::PflMfe => Algorithm::PflMfe,
        }
    }
}

/// FedAvg hyperparameters. `uniform_weighting` nonzero averages client
/// updates with equal weights instead of by sample count.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FmFedConfig {
    pub rounds: usize,
    pub participation: f64,
    pub local_epochs: usize,
    pub local_batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub uniform_weighting: u8,
    pub seed: u64,
    /// 0 uses every core.
    pub workers: usize,
}

/// Per-client personalization settings. The Local baseline trains from
/// scratch with `epochs`, `learning_rate`, `momentum` and `weight_decay`;
/// the other algorithms adapt at `learning_rate` and train the gate at `gate_lr`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FmPersonalizeConfig {
    pub algorithm: FmAlgorithm,
    pub epochs: usize,
    pub learning_rate: f64,
    pub gate_lr: f64,
    pub batch_size: usize,
    pub split_ratio: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

pub struct FmDataset(LabeledDataset);
pub struct FmModel(ModelParams);
pub struct FmPartition(ClientPartition);
pub struct FmClient {
    client: PersonalizedClient,
    labels: Vec<usize>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> FmStatus {
    match e {
        Error::Dimension(_) => FmStatus::Dimension,
        Error::Input(_) => FmStatus::Input,
        Error::Usage(_) => FmStatus::Usage,
        Error::Config(_) => FmStatus::Config,
        Error::Format { .. } => FmStatus::Format,
        Error::DegenerateClient(_) => FmStatus::DegenerateClient,
        Error::Evaluation(_) => FmStatus::Evaluation,
        Error::Schema(_) => FmStatus::Schema,
        Error::Io { .. } => FmStatus::Io,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
    Arg(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            FmStatus::Ok
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(name))) => {
            set_error(format!("`{name}` is null"));
            FmStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            FmStatus::InvalidArgument
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FmStatus::Panic
        }
    }
}

unsafe fn href<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(name))
}

unsafe fn out<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(name))
}

unsafe fn path_arg(p: *const c_char, name: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("`{name}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// plus one, so callers can size a second call.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fm_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len() + 1
    })
}

/// Generates a train/test pair of synthetic 32x32 images.
///
/// # Safety
/// `out_train` and `out_test` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fm_dataset_synthetic(
    classes: usize,
    per_class: usize,
    test_per_class: usize,
    channels: usize,
    noise: f64,
    seed: u64,
    out_train: *mut *mut FmDataset,
    out_test: *mut *mut FmDataset,
) -> FmStatus {
    guard(|| {
        let (tr, te) = (out(out_train, "out_train")?, out(out_test, "out_test")?);
        let (train, test) = make_synthetic_split(&SyntheticSpec::new(classes, per_class, channels, noise, seed), test_per_class)?;
        *tr = boxed(FmDataset(train));
        *te = boxed(FmDataset(test));
        Ok(())
    })
}

/// Loads an IDX image/label pair, zero-padding images to 32x32.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out_dataset` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fm_dataset_load_idx(
    images_path: *const c_char,
    labels_path: *const c_char,
    out_dataset: *mut *mut FmDataset,
) -> FmStatus {
    guard(|| {
        let images = path_arg(images_path, "images_path")?;
        let labels = path_arg(labels_path, "labels_path")?;
        let dst = out(out_dataset, "out_dataset")?;
        let ds = pad_to_32(&load_idx(&images, &labels)?)?;
        *dst = boxed(FmDataset(ds));
        Ok(())
    })
}

/// Number of examples; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn fm_dataset_len(ds: *const FmDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn fm_dataset_classes(ds: *const FmDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.classes())
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fm_dataset_free(ds: *mut FmDataset) {
    free(ds)
}

/// LeNet-5 for `channels`-channel 32x32 inputs.
///
/// # Safety
/// `out_model` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fm_model_lenet5(channels: usize, classes: usize, seed: u64, out_model: *mut *mut FmModel) -> FmStatus {
    guard(|| {
        let dst = out(out_model, "out_model")?;
        *dst = boxed(FmModel(build_model(&ModelSpec::lenet5(channels, classes), seed)?));
        Ok(())
    })
}

/// MLP with `n_hidden` hidden layers of the given widths.
///
/// # Safety
/// `hidden` must point to `n_hidden` values (may be null when 0);
/// `out_model` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fm_model_mlp(
    channels: usize,
    hidden: *const usize,
    n_hidden: usize,
    classes: usize,
    seed: u64,
    out_model: *mut *mut FmModel,
) -> FmStatus {
    guard(|| {
        let dst = out(out_model, "out_model")?;
        let widths = if n_hidden == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(href(hidden, "hidden")?, n_hidden).to_vec()
        };
        *dst = boxed(FmModel(build_model(&ModelSpec::mlp(channels, widths, classes), seed)?));
        Ok(())
    })
}

/// Trainable parameter count; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn fm_model_param_count(model: *const FmModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.param_count())
}

fn predict_into(p: &dyn Predictor, spec: &ModelSpec, images: &[f64], n: usize, labels: &mut [u32]) -> Result<(), Fail> {
    let x = Tensor::new(vec![n, spec.channels, spec.side, spec.side], images.to_vec())?;
    for (dst, y) in labels.iter_mut().zip(p.logits(&x)?.argmax_rows()) {
        *dst = y as u32;
    }
    Ok(())
}

fn image_slices<'a>(
    images: *const f64,
    n: usize,
    spec: &ModelSpec,
    out_labels: *mut u32,
) -> Result<(&'a [f64], &'a mut [u32]), Fail> {
    if n == 0 {
        return Err(Fail::Arg("`n` must be >= 1".into()));
    }
    if images.is_null() {
        return Err(Fail::Null("images"));
    }
    if out_labels.is_null() {
        return Err(Fail::Null("out_labels"));
    }
    // SAFETY: callers promise the documented buffer sizes.
    unsafe {
        Ok((
            std::slice::from_raw_parts(images, n * spec.input_dim()),
            std::slice::from_raw_parts_mut(out_labels, n),
        ))
    }
}

/// Predicted class for each of `n` images laid out `[n, C, 32, 32]`.
///
/// # Safety
/// `images` must hold `n·C·32·32` values, `out_labels` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn fm_model_predict(model: *const FmModel, images: *const f64, n: usize, out_labels: *mut u32) -> FmStatus {
    guard(|| {
        let m = href(model, "model")?;
        let spec = m.0.spec();
        let (x, y) = image_slices(images, n, spec, out_labels)?;
        predict_into(&m.0, spec, x, n, y)
    })
}

/// Plain test accuracy of `model` on `ds`.
///
/// # Safety
/// Handles must be live; `out_accuracy` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fm_model_accuracy(model: *const FmModel, ds: *const FmDataset, out_accuracy: *mut f64) -> FmStatus {
    guard(|| {
        let (m, d, dst) = (href(model, "model")?, href(ds, "ds")?, out(out_accuracy, "out_accuracy")?);
        *dst = global_test(&m.0, &d.0)?;
        Ok(())
    })
}

/// Writes the model as a global checkpoint.
///
/// # Safety
/// `model` must be live; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fm_model_save(model: *const FmModel, path: *const c_char) -> FmStatus {
    guard(|| {
        let m = href(model, "model")?;
        let path = path_arg(path, "path")?;
        let ckpt = GlobalCheckpoint {
            round: 0,
            params: m.0.clone(),
            accuracy: 0.0,
        };
        save_global(&path, &ckpt, 0)?;
        Ok(())
    })
}

/// Reads a global checkpoint written by this library or the CLI.
///
/// # Safety
/// `path` NUL-terminated; `out_model` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fm_model_load(path: *const c_char, out_model: *mut *mut FmModel) -> FmStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let dst = out(out_model, "out_model")?;
        *dst = boxed(FmModel(load_global(&path)?.params));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fm_model_free(model: *mut FmModel) {
    free(model)
}

/// Dirichlet non-IID split of `ds` over `clients` clients.
///
/// # Safety
/// `ds` must be live; `out_partition` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fm_partition_dirichlet(
    ds: *const FmDataset,
    clients: usize,
    concentration: f64,
    seed: u64,
    out_partition: *mut *mut FmPartition,
) -> FmStatus {
    guard(|| {
        let d = href(ds, "ds")?;
        let dst = out(out_partition, "out_partition")?;
        let p = dirichlet_partition(&d.0, &PartitionSpec { clients, concentration, seed })?;
        *dst = boxed(FmPartition(p));
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a live partition handle.
#[no_mangle]
pub unsafe extern "C" fn fm_partition_num_clients(p: *const FmPartition) -> usize {
    p.as_ref().map_or(0, |p| p.0.len())
}

/// Number of examples held by `client`.
///
/// # Safety
/// `p` must be live; `out_size` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fm_partition_client_size(p: *const FmPartition, client: usize, out_size: *mut usize) -> FmStatus {
    guard(|| {
        let (p, dst) = (href(p, "p")?, out(out_size, "out_size")?);
        *dst = client_indices(p, client)?.len();
        Ok(())
    })
}

fn client_indices(p: &FmPartition, client: usize) -> Result<&[usize], Fail> {
    p.0.clients
        .get(client)
        .map(Vec::as_slice)
        .ok_or_else(|| Fail::Arg(format!("client {client} out of range ({} clients)", p.0.len())))
}

/// Copies `client`'s dataset indices into `buf`, which must hold at least
/// `fm_partition_client_size` entries.
///
/// # Safety
/// `p` must be live; `buf` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn fm_partition_client_indices(p: *const FmPartition, client: usize, buf: *mut usize, len: usize) -> FmStatus {
    guard(|| {
        let p = href(p, "p")?;
        let idx = client_indices(p, client)?;
        if len < idx.len() {
            return Err(Fail::Arg(format!("buffer holds {len} but client {client} has {}", idx.len())));
        }
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        std::ptr::copy_nonoverlapping(idx.as_ptr(), buf, idx.len());
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fm_partition_free(p: *mut FmPartition) {
    free(p)
}

/// Runs FedAvg with the architecture of `like` (its weights are not used;
/// the initial model is drawn from `cfg.seed`). Returns the checkpoint with
/// the best test accuracy and that accuracy.
///
/// # Safety
/// Handles must be live; `cfg`, `out_model` and `out_accuracy` valid.
#[no_mangle]
pub unsafe extern "C" fn fm_fedavg_train(
    train: *const FmDataset,
    test: *const FmDataset,
    partition: *const FmPartition,
    like: *const FmModel,
    cfg: *const FmFedConfig,
    out_model: *mut *mut FmModel,
    out_accuracy: *mut f64,
) -> FmStatus {
    guard(|| {
        let (tr, te) = (href(train, "train")?, href(test, "test")?);
        let (p, like, c) = (href(partition, "partition")?, href(like, "like")?, href(cfg, "cfg")?);
        let (dst, acc) = (out(out_model, "out_model")?, out(out_accuracy, "out_accuracy")?);
        let fed = FedConfig {
            rounds: c.rounds,
            participation: c.participation,
            local_epochs: c.local_epochs,
            local_batch: c.local_batch,
            sgd: SgdConfig {
                weight_decay: c.weight_decay,
                ..SgdConfig::with_momentum(c.learning_rate, c.momentum)
            },
            weighting: if c.uniform_weighting != 0 { Weighting::Uniform } else { Weighting::SampleCount },
            eval_every: 1,
            seed: c.seed,
            workers: c.workers,
        };
        let run = train_federated(&tr.0, &p.0, like.0.spec(), &fed, |m: &ModelParams| global_test(m, &te.0))?;
        *acc = run.best.accuracy;
        *dst = boxed(FmModel(run.best.params));
        Ok(())
    })
}

/// Personalizes `global` for one client of `partition`.
///
/// # Safety
/// Handles must be live; `cfg` and `out_client` valid.
#[no_mangle]
pub unsafe extern "C" fn fm_personalize(
    global: *const FmModel,
    train: *const FmDataset,
    partition: *const FmPartition,
    client: usize,
    cfg: *const FmPersonalizeConfig,
    out_client: *mut *mut FmClient,
) -> FmStatus {
    guard(|| {
        let (g, tr, p, c) = (
            href(global, "global")?,
            href(train, "train")?,
            href(partition, "partition")?,
            href(cfg, "cfg")?,
        );
        let dst = out(out_client, "out_client")?;
        let indices = client_indices(p, client)?;
        let pcfg = PersonalizationConfig {
            algorithm: c.algorithm.into(),
            epochs: c.epochs,
            adapt_lr: c.learning_rate,
            gate_lr: c.gate_lr,
            batch_size: c.batch_size,
            split_ratio: c.split_ratio,
            momentum: c.momentum,
            weight_decay: c.weight_decay,
        };
        pcfg.validate("cfg")?;
        let local = LocalConfig {
            epochs: c.epochs,
            batch_size: c.batch_size,
            sgd: pcfg.adapt_sgd(),
        };
        let split = Arc::new(g.0.split());
        let pc = personalize_client(pcfg.algorithm, client, &tr.0, indices, split, &pcfg, &local, c.seed)?;
        let labels = indices.iter().map(|&i| tr.0.labels()[i]).collect();
        *dst = boxed(FmClient { client: pc, labels });
        Ok(())
    })
}

/// Predicted classes from a personalized client (mixing both experts for
/// gated algorithms).
///
/// # Safety
/// As [`fm_model_predict`].
#[no_mangle]
pub unsafe extern "C" fn fm_client_predict(client: *const FmClient, images: *const f64, n: usize, out_labels: *mut u32) -> FmStatus {
    guard(|| {
        let c = href(client, "client")?;
        let spec = c.client.spec();
        let (x, y) = image_slices(images, n, spec, out_labels)?;
        predict_into(&c.client, spec, x, n, y)
    })
}

/// Global test accuracy and local test accuracy (per-class accuracy weighted
/// by the client's training class ratios) on `test`.
///
/// # Safety
/// Handles must be live; outputs valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fm_client_accuracy(
    client: *const FmClient,
    test: *const FmDataset,
    out_local: *mut f64,
    out_global: *mut f64,
) -> FmStatus {
    guard(|| {
        let (c, t) = (href(client, "client")?, href(test, "test")?);
        let (l, g) = (out(out_local, "out_local")?, out(out_global, "out_global")?);
        let ratios = class_ratios(&c.labels, t.0.classes())?;
        *l = local_test(&c.client, &t.0, &ratios)?;
        *g = global_test(&c.client, &t.0)?;
        Ok(())
    })
}

/// Mean gate value over the client's gate subset, or -1 for ungated algorithms.
///
/// # Safety
/// `client` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn fm_client_mean_gate(client: *const FmClient) -> f64 {
    client.as_ref().and_then(|c| c.client.mean_gate).unwrap_or(-1.0)
}

/// # Safety
/// `client` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fm_client_free(client: *mut FmClient) {
    free(client)
}
