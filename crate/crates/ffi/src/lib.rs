//! C ABI for relpred.
//!
//! Datasets and models are opaque heap handles released with their `_free`
//! function. Every fallible call returns an [`RpStatus`]; on failure a
//! description is available from [`rp_last_error_message`] on the same thread.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use relpred::eval::{evaluate_triples, HITS_AT};
use relpred::kg::PairLabelIndex;
use relpred::model::predict_scores;
use relpred::{checkpoint, DatasetSplits, Error, Hyperparams, ModelParams, OovPolicy, Split, Vocabulary};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidString = 2,
    Io = 3,
    Parse = 4,
    EmptyInput = 5,
    OutOfVocabulary = 6,
    IndexOutOfRange = 7,
    Shape = 8,
    Numeric = 9,
    Config = 10,
    Checkpoint = 11,
    GridSearch = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpSplit {
    Valid = 0,
    Test = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpHyperparams {
    pub d: usize,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub l2_coefficient: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Hits@N over the split. `num_triples` includes out-of-vocabulary triples,
/// which count as misses.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RpMetrics {
    pub hits_at_1: f64,
    pub hits_at_3: f64,
    pub hits_at_5: f64,
    pub hits_at_10: f64,
    pub num_triples: usize,
    pub skipped_oov: usize,
}

/// Train/valid/test splits indexed against the training vocabulary.
pub struct RpDataset {
    splits: DatasetSplits,
}

/// Trained parameters together with the vocabulary they were trained on.
pub struct RpModel {
    params: ModelParams,
    vocab: Vocabulary,
    relation_labels: Vec<CString>,
}

impl RpModel {
    fn new(params: ModelParams, vocab: Vocabulary) -> Self {
        let relation_labels = vocab
            .relations()
            .iter()
            .map(|l| CString::new(l.as_str()).unwrap_or_default())
            .collect();
        RpModel {
            params,
            vocab,
            relation_labels,
        }
    }
}

struct Failure {
    status: RpStatus,
    message: String,
}

impl Failure {
    fn new(status: RpStatus, message: impl Into<String>) -> Self {
        Failure {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.category() {
            "io" => RpStatus::Io,
            "parse" => RpStatus::Parse,
            "empty-input" => RpStatus::EmptyInput,
            "oov" => RpStatus::OutOfVocabulary,
            "index" => RpStatus::IndexOutOfRange,
            "shape" => RpStatus::Shape,
            "numeric" => RpStatus::Numeric,
            "config" => RpStatus::Config,
            "checkpoint" => RpStatus::Checkpoint,
            _ => RpStatus::GridSearch,
        };
        Failure::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(text));
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> RpStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => RpStatus::Ok,
        Ok(Err(f)) => {
            set_last_error(&f.message);
            f.status
        }
        Err(_) => {
            set_last_error("internal panic");
            RpStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(RpStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(RpStatus::InvalidString, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure::new(RpStatus::NullPointer, format!("{what} is null")))
}

fn out_arg<T>(p: *mut T, what: &str) -> Result<*mut T, Failure> {
    if p.is_null() {
        Err(Failure::new(RpStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(p)
    }
}

impl From<RpHyperparams> for Hyperparams {
    fn from(h: RpHyperparams) -> Self {
        Hyperparams {
            d: h.d,
            k: h.k,
            epochs: h.epochs,
            batch_size: h.batch_size,
            dropout_rate: h.dropout_rate,
            l2_coefficient: h.l2_coefficient,
            learning_rate: h.learning_rate,
            seed: h.seed,
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread, or NULL. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads `train.txt`, `valid.txt` and `test.txt` from `dir`. With
/// `skip_oov` false, evaluation triples with unseen labels are an error.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rp_dataset_load(dir: *const c_char, skip_oov: bool, out: *mut *mut RpDataset) -> RpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let policy = if skip_oov { OovPolicy::Skip } else { OovPolicy::Error };
        let splits = DatasetSplits::load_dir(&dir, policy)?;
        *out = Box::into_raw(Box::new(RpDataset { splits }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from [`rp_dataset_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn rp_dataset_free(dataset: *mut RpDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// 0 for a NULL handle.
///
/// # Safety
/// `dataset` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rp_dataset_num_entities(dataset: *const RpDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.splits.vocab.num_entities())
}

/// 0 for a NULL handle.
///
/// # Safety
/// `dataset` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rp_dataset_num_relations(dataset: *const RpDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.splits.vocab.num_relations())
}

/// Number of training entity pairs linked by two or more relations.
///
/// # Safety
/// `dataset` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rp_dataset_multi_relation_pairs(dataset: *const RpDataset, out: *mut usize) -> RpStatus {
    guard(|| {
        let dataset = ref_arg(dataset, "dataset")?;
        let out = out_arg(out, "out")?;
        let splits = &dataset.splits;
        let index = PairLabelIndex::build(&splits.train, splits.vocab.num_relations())?;
        *out = index.count_multilabel_pairs();
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn rp_hyperparams_default() -> RpHyperparams {
    let h = Hyperparams::default();
    RpHyperparams {
        d: h.d,
        k: h.k,
        epochs: h.epochs,
        batch_size: h.batch_size,
        dropout_rate: h.dropout_rate,
        l2_coefficient: h.l2_coefficient,
        learning_rate: h.learning_rate,
        seed: h.seed,
    }
}

/// Trains a model on the dataset's training split.
///
/// # Safety
/// `dataset` and `hyper` must be valid pointers and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rp_model_train(
    dataset: *const RpDataset,
    hyper: *const RpHyperparams,
    out: *mut *mut RpModel,
) -> RpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let dataset = ref_arg(dataset, "dataset")?;
        let hyper: Hyperparams = (*ref_arg(hyper, "hyper")?).into();
        let (params, _) = relpred::fit(&dataset.splits, &hyper)?;
        let model = RpModel::new(params, dataset.splits.vocab.clone());
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rp_model_save(model: *const RpModel, path: *const c_char) -> RpStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        checkpoint::save(&path, &model.params, &model.vocab)?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rp_model_load(path: *const c_char, out: *mut *mut RpModel) -> RpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = PathBuf::from(str_arg(path, "path")?);
        let (params, vocab) = checkpoint::load(&path)?;
        *out = Box::into_raw(Box::new(RpModel::new(params, vocab)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn rp_model_free(model: *mut RpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rp_model_num_relations(model: *const RpModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.num_relations())
}

/// Label of relation `index`, or NULL when out of range. Owned by the model.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rp_model_relation_label(model: *const RpModel, index: usize) -> *const c_char {
    model
        .as_ref()
        .and_then(|m| m.relation_labels.get(index))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// Writes one probability per relation, indexed by relation id, into
/// `scores`. `len` must be at least [`rp_model_num_relations`].
///
/// # Safety
/// `model` must be a live handle, the labels NUL-terminated strings, and
/// `scores` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn rp_model_predict(
    model: *const RpModel,
    subject: *const c_char,
    object: *const c_char,
    scores: *mut f64,
    len: usize,
) -> RpStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let scores = out_arg(scores, "scores")?;
        let lookup = |label: &str| {
            model.vocab.entity_id(label).ok_or_else(|| {
                Failure::from(Error::OutOfVocabulary {
                    label: label.to_owned(),
                    split: "model".into(),
                })
            })
        };
        let s = lookup(str_arg(subject, "subject")?)?;
        let o = lookup(str_arg(object, "object")?)?;
        let num_relations = model.params.num_relations();
        if len < num_relations {
            return Err(Failure::new(
                RpStatus::BufferTooSmall,
                format!("scores holds {len} values, need {num_relations}"),
            ));
        }
        let probs = predict_scores(&model.params, s, o)?;
        std::slice::from_raw_parts_mut(scores, num_relations)
            .iter_mut()
            .zip(probs.iter())
            .for_each(|(dst, &p)| *dst = p);
        Ok(())
    })
}

/// Hits@{1,3,5,10} of `model` on one split of `dataset`. `split` is an
/// [`RpSplit`] value. The dataset must have been loaded with the vocabulary
/// the model was trained on.
///
/// # Safety
/// `model` and `dataset` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rp_model_evaluate(
    model: *const RpModel,
    dataset: *const RpDataset,
    split: u32,
    out: *mut RpMetrics,
) -> RpStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let dataset = ref_arg(dataset, "dataset")?;
        let out = out_arg(out, "out")?;
        if model.vocab.content_hash() != dataset.splits.vocab.content_hash() {
            return Err(Failure::new(
                RpStatus::Checkpoint,
                "model and dataset vocabularies differ",
            ));
        }
        let which = match split {
            s if s == RpSplit::Valid as u32 => Split::Valid,
            s if s == RpSplit::Test as u32 => Split::Test,
            other => return Err(Failure::new(RpStatus::Config, format!("unknown split {other}"))),
        };
        let (triples, skipped) = dataset.splits.split(which);
        let report = evaluate_triples(&model.params, triples, skipped, &HITS_AT)?;
        let hit = |n| report.hits_at(n).unwrap_or(0.0);
        *out = RpMetrics {
            hits_at_1: hit(1),
            hits_at_3: hit(3),
            hits_at_5: hit(5),
            hits_at_10: hit(10),
            num_triples: report.num_test_triples,
            skipped_oov: report.skipped_oov,
        };
        Ok(())
    })
}
