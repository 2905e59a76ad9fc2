use std::ffi::{CStr, CString};
use std::ptr;

use attenmix::data::Vocabulary;
use attenmix::model::{forward, init_params, HyperParams};
use attenmix::training::{save_checkpoint, Checkpoint};
use attenmix_ffi::*;

fn fixture(dir: &std::path::Path) -> (CString, Checkpoint) {
    let hyper = HyperParams { dim: 6, levels: 2, heads: 2, ..HyperParams::default() };
    let ids: Vec<String> = (0..8).map(|i| format!("sku-{i}")).collect();
    let vocab = Vocabulary::from_ordered(ids, vec![1; 8]);
    let ckpt = Checkpoint::new(hyper.clone(), vocab, init_params(8, &hyper, 5).unwrap());
    let path = dir.join("m.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    (CString::new(path.to_str().unwrap()).unwrap(), ckpt)
}

fn last_error() -> String {
    let p = atmx_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load(path: &CString) -> *mut AtmxModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { atmx_model_load(path.as_ptr(), &mut m) }, AtmxStatus::Ok);
    m
}

#[test]
fn scores_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ckpt) = fixture(dir.path());
    let m = load(&path);
    unsafe {
        assert_eq!(atmx_model_num_items(m), 8);
        assert_eq!(atmx_model_dim(m), 6);
        let session = [3u32, 1, 7];
        let mut probs = vec![0.0; 8];
        assert_eq!(atmx_score_session(m, session.as_ptr(), 3, probs.as_mut_ptr(), 8), AtmxStatus::Ok);
        assert_eq!(probs, forward(&session, &ckpt.params, ckpt.hyper()).unwrap().probs);

        let (mut items, mut scores, mut written) = ([0u32; 3], [0.0; 3], 0usize);
        let st = atmx_recommend(m, session.as_ptr(), 3, 3, items.as_mut_ptr(), scores.as_mut_ptr(), &mut written);
        assert_eq!(st, AtmxStatus::Ok);
        assert_eq!(written, 3);
        let want = forward(&session, &ckpt.params, ckpt.hyper()).unwrap().top_k(3);
        for j in 0..3 {
            assert_eq!((items[j], scores[j]), want[j]);
        }
        atmx_model_free(m);
    }
}

#[test]
fn vocabulary_lookups() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = fixture(dir.path());
    let m = load(&path);
    unsafe {
        let mut idx = 0u32;
        let id = CString::new("sku-4").unwrap();
        assert_eq!(atmx_item_index(m, id.as_ptr(), &mut idx), AtmxStatus::Ok);
        let mut buf = [0 as std::ffi::c_char; 16];
        let mut len = 0usize;
        assert_eq!(atmx_item_id(m, idx, buf.as_mut_ptr(), buf.len(), &mut len), AtmxStatus::Ok);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), "sku-4");
        assert_eq!(len, 5);

        assert_eq!(atmx_item_id(m, idx, buf.as_mut_ptr(), 5, &mut len), AtmxStatus::BufferTooSmall);
        assert_eq!(len, 5);
        let nope = CString::new("sku-99").unwrap();
        assert_eq!(atmx_item_index(m, nope.as_ptr(), &mut idx), AtmxStatus::UnknownItem);
        assert!(last_error().contains("sku-99"));
        assert_eq!(atmx_item_id(m, 0, buf.as_mut_ptr(), buf.len(), &mut len), AtmxStatus::UnknownItem);
        atmx_model_free(m);
    }
}

#[test]
fn argument_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = fixture(dir.path());
    let m = load(&path);
    unsafe {
        let mut probs = vec![0.0; 8];
        let bad = [2u32, 9];
        assert_eq!(atmx_score_session(m, bad.as_ptr(), 2, probs.as_mut_ptr(), 8), AtmxStatus::UnknownItem);
        let ok = [2u32];
        assert_eq!(atmx_score_session(m, ok.as_ptr(), 1, probs.as_mut_ptr(), 7), AtmxStatus::BufferTooSmall);
        assert_eq!(atmx_score_session(m, ok.as_ptr(), 0, probs.as_mut_ptr(), 8), AtmxStatus::InvalidArgument);
        assert_eq!(atmx_score_session(ptr::null(), ok.as_ptr(), 1, probs.as_mut_ptr(), 8), AtmxStatus::NullPointer);
        assert_eq!(atmx_score_session(m, ok.as_ptr(), 1, probs.as_mut_ptr(), 8), AtmxStatus::Ok);
        assert!(atmx_last_error().is_null());
        assert_eq!(atmx_model_num_items(ptr::null()), 0);
        atmx_model_free(ptr::null_mut());
        atmx_model_free(m);
    }
}

#[test]
fn load_failures_are_classified() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = fixture(dir.path());
    let bytes = std::fs::read(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    unsafe {
        let missing = CString::new(dir.path().join("absent.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(atmx_model_load(missing.as_ptr(), &mut m), AtmxStatus::Io);
        assert!(m.is_null());

        let corrupt = dir.path().join("corrupt.ckpt");
        let mut flipped = bytes.clone();
        flipped[60] ^= 0xff;
        std::fs::write(&corrupt, flipped).unwrap();
        let c = CString::new(corrupt.to_str().unwrap()).unwrap();
        assert_eq!(atmx_model_load(c.as_ptr(), &mut m), AtmxStatus::CorruptCheckpoint);
        assert!(last_error().contains("corrupt"));

        let versioned = dir.path().join("v.ckpt");
        let mut v = bytes;
        v[8] = 77;
        std::fs::write(&versioned, v).unwrap();
        let c = CString::new(versioned.to_str().unwrap()).unwrap();
        assert_eq!(atmx_model_load(c.as_ptr(), &mut m), AtmxStatus::VersionMismatch);

        assert_eq!(atmx_model_load(ptr::null(), &mut m), AtmxStatus::NullPointer);
    }
}

#[test]
fn metrics() {
    let ranks = [1usize, 21, 4];
    let (mut hr, mut mrr) = (0.0, 0.0);
    unsafe {
        assert_eq!(atmx_hr_mrr(ranks.as_ptr(), 3, 20, &mut hr, &mut mrr), AtmxStatus::Ok);
        assert_eq!((hr, mrr), (2.0 / 3.0, 1.25 / 3.0));
        assert_eq!(atmx_hr_mrr(ranks.as_ptr(), 3, 0, &mut hr, &mut mrr), AtmxStatus::InvalidArgument);
        assert_eq!(atmx_hr_mrr(ranks.as_ptr(), 0, 5, &mut hr, &mut mrr), AtmxStatus::InvalidArgument);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/attenmix.h")).unwrap();
    for name in [
        "atmx_last_error",
        "atmx_model_load",
        "atmx_model_free",
        "atmx_model_num_items",
        "atmx_model_dim",
        "atmx_item_index",
        "atmx_item_id",
        "atmx_score_session",
        "atmx_recommend",
        "atmx_hr_mrr",
        "typedef struct AtmxModel AtmxModel",
        "ATMX_STATUS_OK = 0",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    let compiles = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", "-"])
        .stdin(std::process::Stdio::piped())
        .spawn()
        .and_then(|mut c| {
            use std::io::Write;
            c.stdin.take().unwrap().write_all(header.as_bytes())?;
            c.wait()
        });
    if let Ok(status) = compiles {
        assert!(status.success(), "header does not compile as C");
    }
}
