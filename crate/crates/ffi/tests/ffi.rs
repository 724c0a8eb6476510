use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use coder_core::checkpoint::save_encoder;
use coder_core::corpus_io::{tokenize, Vocab};
use coder_core::embed_store::{open_embeddings, write_embeddings};
use coder_core::encoder::{AggMode, EncoderParams};
use coder_core::linalg::Matrix;
use coder_core::ranker::{listnet_loss, rerank, TargetLabels};
use coder_ffi::*;

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    unsafe {
        coder_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    emb: PathBuf,
    ckpt: PathBuf,
    vocab: PathBuf,
    params: EncoderParams,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<f32> = (0..40).map(|i| ((i * 7 % 11) as f32 - 5.0) / 3.0).collect();
    let emb = dir.path().join("e.cdre");
    write_embeddings(&Matrix::from_vec(10, 4, data), &emb).unwrap();
    let params = EncoderParams::init(8, 4, 4, AggMode::Mean, false, 3).unwrap();
    let ckpt = dir.path().join("q.ckpt");
    save_encoder(&params, 0, &ckpt).unwrap();
    let vocab = dir.path().join("vocab.tsv");
    Vocab::from_tokens(["alpha", "beta", "gamma"])
        .save(&vocab)
        .unwrap();
    Fixture {
        emb,
        ckpt,
        vocab,
        params,
        _dir: dir,
    }
}

#[test]
fn embeddings_handle_round_trip() {
    let f = fixture();
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(
            coder_embeddings_open(cpath(&f.emb).as_ptr(), &mut h),
            CoderStatus::CODER_OK
        );
        let (mut dim, mut count) = (0, 0);
        assert_eq!(
            coder_embeddings_shape(h, &mut dim, &mut count),
            CoderStatus::CODER_OK
        );
        assert_eq!((dim, count), (4, 10));
        let mut row = [0f32; 4];
        assert_eq!(
            coder_embeddings_row(h, 3, row.as_mut_ptr(), 4),
            CoderStatus::CODER_OK
        );
        let store = open_embeddings(&f.emb).unwrap();
        assert_eq!(&row[..], store.row(3).unwrap());
        assert_eq!(
            coder_embeddings_row(h, 10, row.as_mut_ptr(), 4),
            CoderStatus::CODER_INVALID
        );
        assert_eq!(
            coder_embeddings_row(h, 0, row.as_mut_ptr(), 3),
            CoderStatus::CODER_BUFFER_TOO_SMALL
        );
        coder_embeddings_free(h);
    }
}

#[test]
fn rerank_matches_core() {
    let f = fixture();
    let (mut store_h, mut enc_h) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(
            coder_embeddings_open(cpath(&f.emb).as_ptr(), &mut store_h),
            CoderStatus::CODER_OK
        );
        assert_eq!(
            coder_encoder_load(cpath(&f.ckpt).as_ptr(), &mut enc_h),
            CoderStatus::CODER_OK
        );
        assert_eq!(coder_encoder_out_dim(enc_h), 4);
        let tokens = [2u32, 4, 5];
        let cands = [9usize, 0, 4, 7];
        let mut ids = [0usize; 4];
        let mut scores = [0f64; 4];
        let st = coder_rerank(
            enc_h,
            store_h,
            tokens.as_ptr(),
            3,
            cands.as_ptr(),
            4,
            ids.as_mut_ptr(),
            scores.as_mut_ptr(),
        );
        assert_eq!(st, CoderStatus::CODER_OK);
        let store = open_embeddings(&f.emb).unwrap();
        let q = f.params.encode_eval(&tokens).unwrap();
        let want = rerank(&q, &cands, &store).unwrap();
        assert_eq!(ids.to_vec(), want.iter().map(|h| h.0).collect::<Vec<_>>());
        assert_eq!(
            scores.to_vec(),
            want.iter().map(|h| h.1).collect::<Vec<_>>()
        );

        let mut qv = [0f64; 4];
        assert_eq!(
            coder_encoder_encode(enc_h, tokens.as_ptr(), 3, qv.as_mut_ptr(), 4),
            CoderStatus::CODER_OK
        );
        assert_eq!(qv.to_vec(), q);
        let mut n = 0;
        let st = coder_dense_search(
            store_h,
            qv.as_ptr(),
            4,
            3,
            ids.as_mut_ptr(),
            scores.as_mut_ptr(),
            &mut n,
        );
        assert_eq!((st, n), (CoderStatus::CODER_OK, 3));
        let bad = [99u32];
        assert_eq!(
            coder_encoder_encode(enc_h, bad.as_ptr(), 1, qv.as_mut_ptr(), 4),
            CoderStatus::CODER_INVALID
        );
        coder_encoder_free(enc_h);
        coder_embeddings_free(store_h);
    }
}

#[test]
fn tokenize_and_losses() {
    let f = fixture();
    let mut v = ptr::null_mut();
    unsafe {
        assert_eq!(
            coder_vocab_load(cpath(&f.vocab).as_ptr(), &mut v),
            CoderStatus::CODER_OK
        );
        let text = CString::new("Beta unknown alpha").unwrap();
        let mut out = [0u32; 8];
        let mut n = 0;
        assert_eq!(
            coder_tokenize(v, text.as_ptr(), 32, out.as_mut_ptr(), 8, &mut n),
            CoderStatus::CODER_OK
        );
        let want = tokenize("Beta unknown alpha", &Vocab::load(&f.vocab).unwrap(), 32);
        assert_eq!(&out[..n], &want[..]);
        assert_eq!(
            coder_tokenize(v, text.as_ptr(), 32, out.as_mut_ptr(), 2, &mut n),
            CoderStatus::CODER_BUFFER_TOO_SMALL
        );
        assert_eq!(n, 4);
        coder_vocab_free(v);

        let s = [1.0, 0.0, 0.5];
        let y = [1.0, f64::NEG_INFINITY, f64::NEG_INFINITY];
        let (mut loss, mut grad) = (0.0, [0.0; 3]);
        assert_eq!(
            coder_listnet_loss(s.as_ptr(), y.as_ptr(), 3, &mut loss, grad.as_mut_ptr()),
            CoderStatus::CODER_OK
        );
        let (l, g) = listnet_loss(&s, &TargetLabels::new(y.to_vec()).unwrap()).unwrap();
        assert_eq!((loss, grad.to_vec()), (l, g));
        let none = [f64::NEG_INFINITY; 3];
        assert_eq!(
            coder_listnet_loss(s.as_ptr(), none.as_ptr(), 3, &mut loss, ptr::null_mut()),
            CoderStatus::CODER_INVALID
        );

        let a = [0.1, 0.4, 0.3, 0.9];
        let (mut t, mut p) = (0.0, 0.0);
        assert_eq!(
            coder_paired_t_test(a.as_ptr(), a.as_ptr(), 4, &mut t, &mut p),
            CoderStatus::CODER_OK
        );
        assert_eq!(p, 1.0);
    }
}

#[test]
fn errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = ptr::null_mut();
    unsafe {
        let missing = cpath(&dir.path().join("nope.cdre"));
        assert_eq!(
            coder_embeddings_open(missing.as_ptr(), &mut h),
            CoderStatus::CODER_IO
        );
        assert!(last_error().contains("nope.cdre"));
        let junk = dir.path().join("junk.cdre");
        std::fs::write(&junk, b"CDRQ0000000000000000").unwrap();
        assert_eq!(
            coder_embeddings_open(cpath(&junk).as_ptr(), &mut h),
            CoderStatus::CODER_FORMAT
        );
        assert!(h.is_null());
        assert_eq!(
            coder_embeddings_open(ptr::null(), &mut h),
            CoderStatus::CODER_NULL_ARGUMENT
        );
        assert!(last_error().contains("path"));
        let (mut d, mut c) = (0, 0);
        assert_eq!(
            coder_embeddings_shape(ptr::null(), &mut d, &mut c),
            CoderStatus::CODER_NULL_ARGUMENT
        );
        assert_eq!(coder_last_error(ptr::null_mut(), 0), last_error().len());
        coder_embeddings_free(ptr::null_mut());
        assert_eq!(
            CStr::from_ptr(coder_version()).to_str().unwrap(),
            env!("CARGO_PKG_VERSION")
        );
    }
}

const C_PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include "coder.h"

int main(int argc, char **argv) {
    CoderEmbeddings *store = NULL;
    CoderEncoder *enc = NULL;
    if (coder_embeddings_open(argv[1], &store) != CODER_OK) return 10;
    if (coder_encoder_load(argv[2], &enc) != CODER_OK) return 11;
    size_t dim = 0, count = 0;
    coder_embeddings_shape(store, &dim, &count);
    if (dim != 4 || count != 10) return 12;
    uint32_t tokens[3] = {2, 4, 5};
    size_t cands[4] = {9, 0, 4, 7};
    size_t ids[4];
    double scores[4];
    if (coder_rerank(enc, store, tokens, 3, cands, 4, ids, scores) != CODER_OK) return 13;
    for (int i = 1; i < 4; i++) if (scores[i] > scores[i - 1]) return 14;
    double s[3] = {0.2, 0.2, 0.2}, y[3] = {1.0, -INFINITY, -INFINITY}, loss = 0.0;
    if (coder_listnet_loss(s, y, 3, &loss, NULL) != CODER_OK) return 15;
    if (fabs(loss - log(3.0)) > 1e-12) return 16;
    if (coder_embeddings_open("/nonexistent/x.cdre", &store) != CODER_IO) return 17;
    char msg[128];
    if (coder_last_error(msg, sizeof msg) == 0) return 18;
    coder_encoder_free(enc);
    printf("%zu\n", ids[0]);
    return 0;
}
"#;

fn target_dir() -> Option<PathBuf> {
    // tests run from target/<profile>/deps
    std::env::current_exe()
        .ok()?
        .parent()?
        .parent()
        .map(Path::to_path_buf)
}

#[test]
fn header_compiles_and_links_from_c() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(include.join("coder.h").exists(), "header not generated");
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let lib = target_dir()
        .map(|d| d.join("libcoder_ffi.a"))
        .filter(|p| p.exists());
    let Some(lib) = lib else {
        let ok = Command::new(&cc)
            .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
            .arg(&include)
            .arg(&src)
            .status()
            .unwrap()
            .success();
        assert!(ok, "header does not compile");
        return;
    };
    let exe = dir.path().join("main");
    let out = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let f = fixture();
    let run = Command::new(&exe)
        .arg(&f.emb)
        .arg(&f.ckpt)
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(0), "C program failed");
    let store = open_embeddings(&f.emb).unwrap();
    let q = f.params.encode_eval(&[2, 4, 5]).unwrap();
    let best = rerank(&q, &[9, 0, 4, 7], &store).unwrap()[0].0;
    assert_eq!(
        String::from_utf8_lossy(&run.stdout).trim(),
        best.to_string()
    );
}

fn which_cc() -> Result<String, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc)
            .arg("--version")
            .output()
            .is_ok_and(|o| o.status.success())
        {
            return Ok(cc.to_string());
        }
    }
    Err(())
}
