use std::ffi::{CStr, CString};
use std::ptr;

use paircfr::feature_model::{generate_paircad, EditMode, FeatureModelSpec};
use paircfr::linalg::Matrix;
use paircfr::losses::{ce_loss_and_grad, cl_loss_and_grad, EmbeddingBatch, LossConfig, NoPositivePolicy, Similarity};
use paircfr_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let mut needed = 0usize;
    let s = unsafe { pcfr_last_error(buf.as_mut_ptr().cast(), buf.len(), &mut needed) };
    assert_eq!(s, PcfrStatus::Ok);
    CStr::from_bytes_until_nul(&buf).unwrap().to_string_lossy().into_owned()
}

fn generate(n_pairs: usize, seed: u64) -> *mut PcfrDataset {
    let mut ds = ptr::null_mut();
    let s = unsafe { pcfr_dataset_generate(ptr::null(), n_pairs, 1, PcfrEditMode::ExactOpposite, seed, &mut ds) };
    assert_eq!(s, PcfrStatus::Ok, "{}", last_error());
    ds
}

fn hash(ds: *const PcfrDataset) -> String {
    let mut buf = [0u8; 65];
    let mut needed = 0;
    assert_eq!(
        unsafe { pcfr_dataset_content_hash(ds, buf.as_mut_ptr().cast(), buf.len(), &mut needed) },
        PcfrStatus::Ok
    );
    assert_eq!(needed, 65);
    CStr::from_bytes_until_nul(&buf).unwrap().to_str().unwrap().to_owned()
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(pcfr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn generate_matches_core_and_round_trips() {
    let ds = generate(40, 7);
    let (mut n, mut dim) = (0, 0);
    assert_eq!(unsafe { pcfr_dataset_shape(ds, &mut n, &mut dim) }, PcfrStatus::Ok);
    let core = generate_paircad(&FeatureModelSpec::canonical(), 40, 1, EditMode::ExactOpposite, 7).unwrap();
    assert_eq!(n, core.len());
    assert_eq!(dim, core.layout().total());
    assert_eq!(hash(ds), core.content_hash());

    let tmp = tempfile::tempdir().unwrap();
    let path = CString::new(tmp.path().join("ds.tsv").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { pcfr_dataset_save(ds, path.as_ptr()) }, PcfrStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { pcfr_dataset_load(path.as_ptr(), &mut back) }, PcfrStatus::Ok, "{}", last_error());
    assert_eq!(hash(back), hash(ds));
    unsafe {
        pcfr_dataset_free(back);
        pcfr_dataset_free(ds);
    }
}

#[test]
fn null_pointers_and_errors_are_reported() {
    let mut n = 0;
    assert_eq!(unsafe { pcfr_dataset_shape(ptr::null(), &mut n, ptr::null_mut()) }, PcfrStatus::NullPointer);
    assert!(last_error().contains("ds"));
    assert_eq!(
        unsafe { pcfr_dataset_generate(ptr::null(), 4, 1, PcfrEditMode::ExactOpposite, 0, ptr::null_mut()) },
        PcfrStatus::NullPointer
    );

    let bad = CString::new("{\"not\": \"a spec\"}").unwrap();
    let mut ds = ptr::null_mut();
    let s = unsafe { pcfr_dataset_generate(bad.as_ptr(), 4, 1, PcfrEditMode::ExactOpposite, 0, &mut ds) };
    assert_eq!(s, PcfrStatus::Parse);
    assert!(ds.is_null());
    assert!(!last_error().is_empty());

    let missing = CString::new("/nonexistent/ds.tsv").unwrap();
    assert_eq!(unsafe { pcfr_dataset_load(missing.as_ptr(), &mut ds) }, PcfrStatus::Io);

    unsafe {
        pcfr_dataset_free(ptr::null_mut());
        pcfr_model_free(ptr::null_mut());
    }
}

#[test]
fn short_buffers_report_the_needed_size() {
    let ds = generate(4, 0);
    let mut buf = [0u8; 8];
    let mut needed = 0;
    let s = unsafe { pcfr_dataset_content_hash(ds, buf.as_mut_ptr().cast(), buf.len(), &mut needed) };
    assert_eq!(s, PcfrStatus::BufferTooSmall);
    assert_eq!(needed, 65);

    let mut w = [0.0; 2];
    assert_eq!(unsafe { pcfr_closed_form_weights(ds, 0.0, w.as_mut_ptr(), w.len()) }, PcfrStatus::BufferTooSmall);
    unsafe { pcfr_dataset_free(ds) };
}

#[test]
fn closed_form_weights_concentrate_on_the_edited_block() {
    let ds = generate(5000, 1);
    let (mut n, mut dim) = (0, 0);
    unsafe { pcfr_dataset_shape(ds, &mut n, &mut dim) };
    let mut w = vec![0.0; dim];
    assert_eq!(unsafe { pcfr_closed_form_weights(ds, 0.0, w.as_mut_ptr(), dim) }, PcfrStatus::Ok, "{}", last_error());
    let layout = FeatureModelSpec::canonical().layout;
    let r1: f64 = w[layout.r1()].iter().map(|v| v * v).sum();
    let rest: f64 = w[layout.unedited()].iter().map(|v| v * v).sum();
    assert!(rest.sqrt() < 0.05 * r1.sqrt());
    unsafe { pcfr_dataset_free(ds) };
}

#[test]
fn ce_and_cl_match_the_library() {
    let logits = [1.0, -0.5, 0.2, 2.0, 0.0, 0.3];
    let labels = [0usize, 1, 1];
    let (mut loss, mut grad) = (0.0, [0.0; 6]);
    assert_eq!(
        unsafe { pcfr_ce_loss(logits.as_ptr(), 3, 2, labels.as_ptr(), &mut loss, grad.as_mut_ptr()) },
        PcfrStatus::Ok
    );
    let (l, g) = ce_loss_and_grad(&Matrix::from_vec(3, 2, logits.to_vec()).unwrap(), &labels).unwrap();
    assert_eq!(loss, l);
    assert_eq!(&grad[..], g.as_slice());

    let z = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    let labels = [0usize, 0, 1];
    assert_eq!(
        unsafe {
            pcfr_cl_loss(
                z.as_ptr(),
                3,
                2,
                labels.as_ptr(),
                1.0,
                PcfrSimilarity::Cosine,
                PcfrNoPositivePolicy::RepulsionOnly,
                false,
                &mut loss,
                grad.as_mut_ptr(),
            )
        },
        PcfrStatus::Ok
    );
    let cfg = LossConfig {
        tau: 1.0,
        similarity: Similarity::Cosine,
        no_positive_policy: NoPositivePolicy::RepulsionOnly,
        ..LossConfig::default()
    };
    let batch = EmbeddingBatch { z: Matrix::from_vec(3, 2, z.to_vec()).unwrap(), labels: labels.to_vec() };
    let (l, g) = cl_loss_and_grad(&batch, &cfg).unwrap();
    assert_eq!(loss, l);
    assert_eq!(&grad[..], g.as_slice());

    let one_label = [0usize, 0, 0];
    let s = unsafe {
        pcfr_cl_loss(
            z.as_ptr(),
            3,
            2,
            one_label.as_ptr(),
            1.0,
            PcfrSimilarity::Dot,
            PcfrNoPositivePolicy::SkipAnchor,
            false,
            &mut loss,
            grad.as_mut_ptr(),
        )
    };
    assert_eq!(s, PcfrStatus::InvalidArgument);
    assert!(last_error().contains("no contrastive structure"));
}

#[test]
fn paired_ttest_values_and_degenerate_input() {
    let a = [0.9, 0.8, 0.85, 0.95];
    let b = [0.7, 0.75, 0.8, 0.7];
    let (mut t, mut p) = (0.0, 0.0);
    assert_eq!(unsafe { pcfr_paired_ttest(a.as_ptr(), b.as_ptr(), 4, &mut t, &mut p) }, PcfrStatus::Ok);
    let core = paircfr::stats::paired_ttest(&a, &b).unwrap();
    assert_eq!((t, p), (core.t, core.p));
    assert_eq!(unsafe { pcfr_paired_ttest(a.as_ptr(), a.as_ptr(), 4, &mut t, &mut p) }, PcfrStatus::Degenerate);
}

#[test]
fn train_and_evaluate() {
    let train = generate(200, 2);
    let valid = generate(50, 3);
    let l = FeatureModelSpec::canonical().layout;
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { pcfr_model_new(l.dim_r1, l.dim_r2, l.dim_s, 4, 2, 0.1, 0, &mut model) }, PcfrStatus::Ok, "{}", last_error());
    let mut count = 0;
    assert_eq!(unsafe { pcfr_model_params(model, ptr::null_mut(), 0, &mut count) }, PcfrStatus::Ok);
    assert_eq!(count, l.total() * 4 + 4 * 2);
    let mut short = [0.0; 3];
    assert_eq!(
        unsafe { pcfr_model_params(model, short.as_mut_ptr(), short.len(), &mut count) },
        PcfrStatus::BufferTooSmall
    );

    let cfg = CString::new(r#"{"max_epochs": 5, "optimizer": {"kind": "adam_w", "lr": 0.01}}"#).unwrap();
    let mut trained = ptr::null_mut();
    let s = unsafe { pcfr_model_train(model, train, valid, cfg.as_ptr(), &mut trained) };
    assert_eq!(s, PcfrStatus::Ok, "{}", last_error());
    let mut acc = 0.0;
    assert_eq!(unsafe { pcfr_model_evaluate(trained, valid, &mut acc) }, PcfrStatus::Ok);
    assert!(acc > 0.7, "accuracy {acc}");

    let bad = CString::new(r#"{"batch_size": 1}"#).unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(
        unsafe { pcfr_model_train(model, train, valid, bad.as_ptr(), &mut none) },
        PcfrStatus::InvalidArgument
    );
    assert!(none.is_null());
    unsafe {
        pcfr_model_free(trained);
        pcfr_model_free(model);
        pcfr_dataset_free(train);
        pcfr_dataset_free(valid);
    }
}
